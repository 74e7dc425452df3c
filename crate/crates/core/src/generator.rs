//! Frozen toy one-step generator with named hook sites.
//!
//! The generator is a small MLP. Each hidden block runs
//! `linear -> feature norm -> [hook site] -> tanh`; one site sits after every
//! normalization layer, and what the hook returns is both what gets recorded
//! and what flows downstream (post-intervention capture). Normalization is
//! per-sample over the feature axis, so forwards are deterministic row by row.
//!
//! Weights are drawn once from the config seed and never change.

use serde::{Deserialize, Serialize};

use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::rng;
use crate::steering::{InterventionNodes, InterventionParams};
use crate::tape::{NodeId, Tape};
use crate::tensor::Tensor;

pub const NORM_EPS: f64 = 1e-5;

/// Generator architecture. Needs at least two hidden layers so that
/// layer-by-layer incremental estimation has a chain to walk.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GeneratorConfig {
    pub input_dim: usize,
    pub hidden_dims: Vec<usize>,
    pub output_dim: usize,
    pub seed: u64,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        GeneratorConfig {
            input_dim: 32,
            hidden_dims: vec![64, 48, 64],
            output_dim: 16,
            seed: 17,
        }
    }
}

impl GeneratorConfig {
    pub fn validate(&self) -> Result<()> {
        if self.hidden_dims.len() < 2 {
            return Err(Error::InvalidConfig(
                "generator needs >= 2 hidden layers".into(),
            ));
        }
        for &d in [self.input_dim, self.output_dim]
            .iter()
            .chain(self.hidden_dims.iter())
        {
            if d < 2 {
                return Err(Error::InvalidConfig("all dims must be >= 2".into()));
            }
        }
        Ok(())
    }
}

/// A named position right after a normalization layer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HookSite {
    pub name: String,
    pub layer_index: usize,
    pub width: usize,
}

/// Per-site activations captured during one forward pass, in forward order.
/// Row `i` at every site comes from input row `i`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ActivationRecord {
    entries: Vec<(String, Tensor)>,
}

impl ActivationRecord {
    pub fn new() -> Self {
        ActivationRecord {
            entries: Vec::new(),
        }
    }

    pub fn push(&mut self, name: &str, acts: Tensor) {
        self.entries.push((name.to_string(), acts));
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.entries
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, t)| t)
            .ok_or_else(|| Error::UnknownSite(name.into()))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.entries.iter().map(|(n, t)| (n.as_str(), t))
    }

    pub fn site_names(&self) -> Vec<&str> {
        self.entries.iter().map(|(n, _)| n.as_str()).collect()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Sample count, identical across sites.
    pub fn sample_count(&self) -> usize {
        self.entries.first().map(|(_, t)| t.rows()).unwrap_or(0)
    }
}

impl Default for ActivationRecord {
    fn default() -> Self {
        Self::new()
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct HiddenBlock {
    w: Tensor,
    b: Tensor,
    gain: Tensor,
    shift: Tensor,
}

/// Frozen MLP generator. Immutable after build; safe to share across workers.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Generator {
    cfg: GeneratorConfig,
    blocks: Vec<HiddenBlock>,
    out_w: Tensor,
    out_b: Tensor,
    sites: Vec<HookSite>,
}

impl Generator {
    /// Draw weights deterministically from the config seed, then freeze.
    pub fn build(cfg: GeneratorConfig) -> Result<Self> {
        cfg.validate()?;
        let mut blocks = Vec::new();
        let mut sites = Vec::new();
        let mut fan_in = cfg.input_dim;
        for (i, &width) in cfg.hidden_dims.iter().enumerate() {
            let mut r = rng::stream(cfg.seed, &[10, i as u64]);
            let scale = 1.0 / (fan_in as f64).sqrt();
            let w = gaussian(&mut r, vec![fan_in, width], scale);
            let b = gaussian(&mut r, vec![width], 0.1);
            let gain = gaussian(&mut r, vec![width], 0.1).map(|x| 1.0 + x);
            let shift = gaussian(&mut r, vec![width], 0.1);
            blocks.push(HiddenBlock { w, b, gain, shift });
            sites.push(HookSite {
                name: format!("block{}.norm", i + 1),
                layer_index: i,
                width,
            });
            fan_in = width;
        }
        let mut r = rng::stream(cfg.seed, &[11]);
        let scale = 1.0 / (fan_in as f64).sqrt();
        let out_w = gaussian(&mut r, vec![fan_in, cfg.output_dim], scale);
        let out_b = gaussian(&mut r, vec![cfg.output_dim], 0.1);
        Ok(Generator {
            cfg,
            blocks,
            out_w,
            out_b,
            sites,
        })
    }

    pub fn config(&self) -> &GeneratorConfig {
        &self.cfg
    }

    /// Total frozen parameter count (weights, biases, norm gains/shifts).
    pub fn param_count(&self) -> usize {
        let mut n = self.out_w.numel() + self.out_b.numel();
        for b in &self.blocks {
            n += b.w.numel() + b.b.numel() + b.gain.numel() + b.shift.numel();
        }
        n
    }

    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Ok(serde_json::from_str(&text)?)
    }
}

fn gaussian(r: &mut impl Rng, shape: Vec<usize>, scale: f64) -> Tensor {
    let n: usize = shape.iter().product();
    let data: Vec<f64> = (0..n)
        .map(|_| {
            let z: f64 = r.sample(StandardNormal);
            z * scale
        })
        .collect();
    Tensor::new(shape, data).unwrap()
}

/// Anything that can run inputs forward through named hook sites: the frozen
/// generator, or test fixtures like [`IdentityModel`].
pub trait ForwardModel: Sync {
    fn sites(&self) -> &[HookSite];
    fn input_dim(&self) -> usize;
    fn output_dim(&self) -> usize;

    /// Value-level forward. `hook` sees each site's raw activations and
    /// returns what both gets recorded and flows downstream.
    fn forward_hooked(
        &self,
        inputs: &Tensor,
        hook: &mut dyn FnMut(&HookSite, Tensor) -> Result<Tensor>,
    ) -> Result<(Tensor, ActivationRecord)>;

    /// Tape forward: outputs and per-site records stay connected to the
    /// graph, so gradients reach the intervention parameters.
    fn forward_nodes(
        &self,
        tape: &mut Tape,
        inputs: &Tensor,
        intervention: Option<&InterventionNodes>,
    ) -> Result<(NodeId, Vec<(String, NodeId)>)>;

    /// Forward with an optional intervention; captured activations are
    /// post-intervention. With no intervention, plain activations.
    fn forward_capture(
        &self,
        inputs: &Tensor,
        intervention: Option<&InterventionParams>,
    ) -> Result<(Tensor, ActivationRecord)> {
        if let Some(iv) = intervention {
            validate_params(self.sites(), iv)?;
            self.forward_hooked(inputs, &mut |site, acts| {
                if iv.sites.contains_key(&site.name) {
                    iv.apply(&site.name, &acts)
                } else {
                    Ok(acts)
                }
            })
        } else {
            self.forward_hooked(inputs, &mut |_, acts| Ok(acts))
        }
    }
}

/// Every site named in the params must exist on the model with a matching
/// width. Params may address a subset of sites.
pub fn validate_params(sites: &[HookSite], params: &InterventionParams) -> Result<()> {
    for (name, sp) in &params.sites {
        let site = sites
            .iter()
            .find(|s| &s.name == name)
            .ok_or_else(|| Error::UnknownSite(name.clone()))?;
        if sp.w.numel() != site.width || sp.b.numel() != site.width {
            return Err(Error::ShapeMismatch(format!(
                "site {name}: width {} vs params ({}, {})",
                site.width,
                sp.w.numel(),
                sp.b.numel()
            )));
        }
    }
    Ok(())
}

impl ForwardModel for Generator {
    fn sites(&self) -> &[HookSite] {
        &self.sites
    }

    fn input_dim(&self) -> usize {
        self.cfg.input_dim
    }

    fn output_dim(&self) -> usize {
        self.cfg.output_dim
    }

    fn forward_hooked(
        &self,
        inputs: &Tensor,
        hook: &mut dyn FnMut(&HookSite, Tensor) -> Result<Tensor>,
    ) -> Result<(Tensor, ActivationRecord)> {
        check_inputs(inputs, self.cfg.input_dim)?;
        let mut record = ActivationRecord::new();
        let mut x = inputs.clone();
        for (block, site) in self.blocks.iter().zip(self.sites.iter()) {
            let h = linear_val(&x, &block.w, &block.b);
            let normed = layer_norm_val(&h, &block.gain, &block.shift);
            let acts = hook(site, normed)?;
            record.push(&site.name, acts.clone());
            x = acts.map(f64::tanh);
        }
        let out = linear_val(&x, &self.out_w, &self.out_b);
        Ok((out, record))
    }

    fn forward_nodes(
        &self,
        tape: &mut Tape,
        inputs: &Tensor,
        intervention: Option<&InterventionNodes>,
    ) -> Result<(NodeId, Vec<(String, NodeId)>)> {
        check_inputs(inputs, self.cfg.input_dim)?;
        let mut record = Vec::new();
        let mut x = tape.constant(inputs.clone());
        for (block, site) in self.blocks.iter().zip(self.sites.iter()) {
            let w = tape.constant(block.w.clone());
            let b = tape.constant(block.b.clone());
            let gain = tape.constant(block.gain.clone());
            let shift = tape.constant(block.shift.clone());
            let h = tape.matmul(x, w)?;
            let h = tape.rows_add(h, b)?;
            let mut acts = tape.layer_norm(h, gain, shift, NORM_EPS)?;
            if let Some(iv) = intervention {
                if iv.has_site(&site.name) {
                    acts = iv.apply(tape, &site.name, acts)?;
                }
            }
            record.push((site.name.clone(), acts));
            x = tape.tanh(acts);
        }
        let w = tape.constant(self.out_w.clone());
        let b = tape.constant(self.out_b.clone());
        let out = tape.matmul(x, w)?;
        let out = tape.rows_add(out, b)?;
        Ok((out, record))
    }
}

/// Single hook site, output = post-intervention activations. The smallest
/// model the estimators can run against: closed-form fits and gradient fits
/// coincide analytically here, which makes it the oracle fixture.
#[derive(Debug, Clone)]
pub struct IdentityModel {
    sites: Vec<HookSite>,
}

impl IdentityModel {
    pub fn new(width: usize) -> Self {
        IdentityModel {
            sites: vec![HookSite {
                name: "site1".into(),
                layer_index: 0,
                width,
            }],
        }
    }

    pub fn width(&self) -> usize {
        self.sites[0].width
    }
}

impl ForwardModel for IdentityModel {
    fn sites(&self) -> &[HookSite] {
        &self.sites
    }

    fn input_dim(&self) -> usize {
        self.width()
    }

    fn output_dim(&self) -> usize {
        self.width()
    }

    fn forward_hooked(
        &self,
        inputs: &Tensor,
        hook: &mut dyn FnMut(&HookSite, Tensor) -> Result<Tensor>,
    ) -> Result<(Tensor, ActivationRecord)> {
        check_inputs(inputs, self.width())?;
        let acts = hook(&self.sites[0], inputs.clone())?;
        let mut record = ActivationRecord::new();
        record.push(&self.sites[0].name, acts.clone());
        Ok((acts, record))
    }

    fn forward_nodes(
        &self,
        tape: &mut Tape,
        inputs: &Tensor,
        intervention: Option<&InterventionNodes>,
    ) -> Result<(NodeId, Vec<(String, NodeId)>)> {
        check_inputs(inputs, self.width())?;
        let mut acts = tape.constant(inputs.clone());
        if let Some(iv) = intervention {
            if iv.has_site(&self.sites[0].name) {
                acts = iv.apply(tape, &self.sites[0].name, acts)?;
            }
        }
        Ok((acts, vec![(self.sites[0].name.clone(), acts)]))
    }
}

fn check_inputs(inputs: &Tensor, dim: usize) -> Result<()> {
    if inputs.shape().len() != 2 || inputs.cols() != dim {
        return Err(Error::ShapeMismatch(format!(
            "inputs {:?}, expected [n, {dim}]",
            inputs.shape()
        )));
    }
    Ok(())
}

fn linear_val(x: &Tensor, w: &Tensor, b: &Tensor) -> Tensor {
    let (n, k) = (x.rows(), x.cols());
    let m = w.cols();
    let mut data = vec![0.0; n * m];
    for i in 0..n {
        for kk in 0..k {
            let xik = x.data()[i * k + kk];
            for j in 0..m {
                data[i * m + j] += xik * w.data()[kk * m + j];
            }
        }
        for j in 0..m {
            data[i * m + j] += b.data()[j];
        }
    }
    Tensor::matrix(n, m, data).unwrap()
}

fn layer_norm_val(x: &Tensor, gain: &Tensor, shift: &Tensor) -> Tensor {
    let (n, d) = (x.rows(), x.cols());
    let mut data = Vec::with_capacity(n * d);
    for i in 0..n {
        let row = x.row(i);
        let mu = row.iter().sum::<f64>() / d as f64;
        let var = row.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / d as f64;
        let inv_sigma = 1.0 / (var + NORM_EPS).sqrt();
        for j in 0..d {
            data.push(gain.data()[j] * ((row[j] - mu) * inv_sigma) + shift.data()[j]);
        }
    }
    Tensor::matrix(n, d, data).unwrap()
}
