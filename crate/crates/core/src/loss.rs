//! Differentiable 1D Wasserstein distances and the per-neuron alignment loss.
//!
//! For equal-sized empirical distributions the p-Wasserstein distance has a
//! closed form over order statistics:
//!
//! `W_p(x, y) = ( (1/n) Σᵢ |x_(i) - y_(i)|^p )^(1/p)`
//!
//! Sorting is a permutation, so gradients flow through the steered branch to
//! the underlying activations. The target branch is always a constant: only
//! the steered side carries gradients.
//!
//! The alignment loss sums `W_p` over every site and every neuron column,
//! accumulated in site-then-neuron order so parallel callers agree bitwise.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::generator::ActivationRecord;
use crate::tape::{NodeId, Tape};
use crate::tensor::Tensor;

/// Floor under the square root in the p=2 derivative at exact zero.
const SQRT_EPS: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossConfig {
    /// Wasserstein order, 1 or 2.
    pub p: u8,
    /// Optional per-site scalar weights; absent sites weigh 1.
    pub site_weights: Option<BTreeMap<String, f64>>,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            p: 1,
            site_weights: None,
        }
    }
}

impl LossConfig {
    pub fn with_p(p: u8) -> Self {
        LossConfig {
            p,
            site_weights: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.p != 1 && self.p != 2 {
            return Err(Error::InvalidConfig(format!("p must be 1 or 2, got {}", self.p)));
        }
        Ok(())
    }

    fn weight(&self, site: &str) -> f64 {
        self.site_weights
            .as_ref()
            .and_then(|m| m.get(site))
            .copied()
            .unwrap_or(1.0)
    }
}

/// Differentiable `W_p` between a steered 1-D node `x` and a constant target
/// `y` of the same length.
pub fn wp_distance(tape: &mut Tape, x: NodeId, y: &Tensor, p: u8) -> Result<NodeId> {
    LossConfig::with_p(p).validate()?;
    let n = tape.value(x).numel();
    if y.shape().len() != 1 || tape.value(x).shape().len() != 1 {
        return Err(Error::ShapeMismatch("wp_distance needs 1-D inputs".into()));
    }
    if n != y.numel() {
        return Err(Error::ShapeMismatch(format!(
            "wp_distance length mismatch: {n} vs {}",
            y.numel()
        )));
    }
    if n == 0 {
        return Err(Error::Degenerate("wp_distance on empty inputs".into()));
    }
    if y.data().iter().any(|v| v.is_nan()) {
        return Err(Error::NonFinite("NaN in wp_distance target".into()));
    }
    let x_sorted = tape.sort_ascending(x)?.sorted;
    let mut y_sorted = y.data().to_vec();
    y_sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let yc = tape.constant(Tensor::vector(y_sorted));
    let diff = tape.sub(x_sorted, yc)?;
    match p {
        1 => {
            let a = tape.abs(diff);
            tape.mean(a)
        }
        _ => {
            let sq = tape.mul(diff, diff)?;
            let m = tape.mean(sq)?;
            Ok(tape.sqrt_guarded(m, SQRT_EPS))
        }
    }
}

/// Value-level `W_p` over two equal-length samples.
pub fn wp_value(x: &[f64], y: &[f64], p: u8) -> Result<f64> {
    LossConfig::with_p(p).validate()?;
    if x.len() != y.len() {
        return Err(Error::ShapeMismatch(format!(
            "wp length mismatch: {} vs {}",
            x.len(),
            y.len()
        )));
    }
    if x.is_empty() {
        return Err(Error::Degenerate("wp on empty inputs".into()));
    }
    if x.iter().chain(y.iter()).any(|v| v.is_nan()) {
        return Err(Error::NonFinite("NaN in wp input".into()));
    }
    let mut xs = x.to_vec();
    let mut ys = y.to_vec();
    xs.sort_by(|a, b| a.partial_cmp(b).unwrap());
    ys.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let n = xs.len() as f64;
    let acc: f64 = xs
        .iter()
        .zip(ys.iter())
        .map(|(a, b)| {
            let d = (a - b).abs();
            if p == 1 {
                d
            } else {
                d * d
            }
        })
        .sum();
    Ok(if p == 1 { acc / n } else { (acc / n).sqrt() })
}

/// Shared structural checks between a steered record and its target.
fn check_sites<'a>(
    steered_sites: impl Iterator<Item = (&'a str, usize, usize)>,
    target: &ActivationRecord,
) -> Result<()> {
    let mut seen = 0;
    for (name, rows, _) in steered_sites {
        let t = target
            .get(name)
            .map_err(|_| Error::ShapeMismatch(format!("site {name} missing from target record")))?;
        if t.rows() != rows {
            return Err(Error::ShapeMismatch(format!(
                "site {name}: {} steered samples vs {} target samples",
                rows,
                t.rows()
            )));
        }
        seen += 1;
    }
    if seen != target.len() {
        return Err(Error::ShapeMismatch(format!(
            "steered record has {seen} sites, target has {}",
            target.len()
        )));
    }
    Ok(())
}

/// Differentiable alignment loss: sum over sites and neurons of `W_p`
/// between steered activation columns (graph nodes) and constant target
/// columns.
pub fn alignment_loss(
    tape: &mut Tape,
    steered: &[(String, NodeId)],
    target: &ActivationRecord,
    cfg: &LossConfig,
) -> Result<NodeId> {
    cfg.validate()?;
    check_sites(
        steered
            .iter()
            .map(|(n, id)| (n.as_str(), tape.value(*id).rows(), tape.value(*id).cols())),
        target,
    )?;
    let mut total = tape.constant(Tensor::scalar(0.0));
    for (name, acts) in steered {
        let tgt = target.get(name)?;
        let d = tape.value(*acts).cols();
        if tgt.cols() != d {
            return Err(Error::ShapeMismatch(format!(
                "site {name}: width {} vs target {}",
                d,
                tgt.cols()
            )));
        }
        let mut site_term = tape.constant(Tensor::scalar(0.0));
        for j in 0..d {
            let xc = tape.col(*acts, j)?;
            let term = wp_distance(tape, xc, &tgt.col(j), cfg.p)?;
            site_term = tape.add(site_term, term)?;
        }
        let w = cfg.weight(name);
        if w != 1.0 {
            site_term = tape.scale(site_term, w);
        }
        total = tape.add(total, site_term)?;
    }
    Ok(total)
}

/// Value-level alignment loss between two captured records.
pub fn alignment_loss_value(
    steered: &ActivationRecord,
    target: &ActivationRecord,
    cfg: &LossConfig,
) -> Result<f64> {
    cfg.validate()?;
    check_sites(
        steered.iter().map(|(n, t)| (n, t.rows(), t.cols())),
        target,
    )?;
    let mut total = 0.0;
    for (name, acts) in steered.iter() {
        let tgt = target.get(name)?;
        if tgt.cols() != acts.cols() {
            return Err(Error::ShapeMismatch(format!(
                "site {name}: width {} vs target {}",
                acts.cols(),
                tgt.cols()
            )));
        }
        let mut site_term = 0.0;
        for j in 0..acts.cols() {
            site_term += wp_value(acts.col(j).data(), tgt.col(j).data(), cfg.p)?;
        }
        total += cfg.weight(name) * site_term;
    }
    Ok(total)
}

/// `W_p` between the strength-λ affine image of `source` and `target`, for a
/// single neuron. The evaluation primitive for λ sweeps.
pub fn transport_gap(
    source: &[f64],
    target: &[f64],
    w: f64,
    b: f64,
    lambda: f64,
    p: u8,
) -> Result<f64> {
    let moved: Vec<f64> = source
        .iter()
        .map(|&s| (1.0 - lambda) * s + lambda * (w * s + b))
        .collect();
    wp_value(&moved, target, p)
}
