//! Affine-elementwise interventions with a bounded strength knob.
//!
//! An intervention maps activations `a` at a hook site to
//! `(1 - λ)·a + λ·(w ⊙ a + b)`: λ = 0 is the identity, λ = 1 the full
//! transport, intermediate values a partial transport along the straight
//! path. λ is global across sites; per-site strengths are a non-goal.
//!
//! ```
//! use steerkit_core::steering::{InterventionParams, SiteParams};
//! use steerkit_core::tensor::Tensor;
//!
//! let mut sites = std::collections::BTreeMap::new();
//! sites.insert("block1.norm".to_string(), SiteParams {
//!     w: Tensor::vector(vec![2.0]),
//!     b: Tensor::vector(vec![1.0]),
//! });
//! let params = InterventionParams { sites, lambda: 0.5, provenance: "demo".into() };
//! let moved = params.apply("block1.norm", &Tensor::vector(vec![3.0])).unwrap();
//! assert_eq!(moved.data(), &[5.0]); // halfway between 3 and 2*3+1
//! ```

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::generator::HookSite;
use crate::tape::{NodeId, Tape};
use crate::tensor::Tensor;

/// Per-site scale/shift pair. Widths match the target site.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SiteParams {
    pub w: Tensor,
    pub b: Tensor,
}

/// One concept's intervention: per-site affine parameters plus a global
/// strength λ ≥ 0 (λ ∈ [0, 1] for standard use, larger values permitted for
/// over-transport sweeps).
///
/// Sites are keyed by stable site name, not index, so parameters survive a
/// generator-config reordering.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InterventionParams {
    pub sites: BTreeMap<String, SiteParams>,
    pub lambda: f64,
    /// Name of the estimator that produced these parameters.
    pub provenance: String,
}

impl InterventionParams {
    /// `w = 1, b = 0` at every site, λ = 1: behaves as the identity map.
    pub fn identity(sites: &[HookSite]) -> Self {
        let mut map = BTreeMap::new();
        for s in sites {
            map.insert(
                s.name.clone(),
                SiteParams {
                    w: Tensor::full(vec![s.width], 1.0),
                    b: Tensor::zeros(vec![s.width]),
                },
            );
        }
        InterventionParams {
            sites: map,
            lambda: 1.0,
            provenance: "identity".into(),
        }
    }

    /// Copy with a new strength; the original is untouched.
    pub fn with_strength(&self, lambda: f64) -> Result<Self> {
        if lambda.is_nan() || lambda < 0.0 {
            return Err(Error::InvalidConfig(format!(
                "strength must be >= 0, got {lambda}"
            )));
        }
        let mut copy = self.clone();
        copy.lambda = lambda;
        Ok(copy)
    }

    pub fn site(&self, name: &str) -> Result<&SiteParams> {
        self.sites
            .get(name)
            .ok_or_else(|| Error::UnknownSite(name.into()))
    }

    /// Apply the intervention at `site` to rows of `a` (`[n, d]` or `[d]`).
    ///
    /// λ = 0 and λ = 1 short-circuit to the exact endpoint maps, which keeps
    /// "no intervention" and "identity parameters" bitwise-faithful; the
    /// general path evaluates `(1-λ)a + λ(w⊙a + b)` directly.
    pub fn apply(&self, site: &str, a: &Tensor) -> Result<Tensor> {
        let sp = self.site(site)?;
        let d = sp.w.numel();
        let (rows, width) = row_layout(a)?;
        if width != d {
            return Err(Error::ShapeMismatch(format!(
                "site {site}: params width {d}, activations width {width}"
            )));
        }
        if self.lambda == 0.0 {
            return Ok(a.clone());
        }
        let mut out = a.clone();
        let lam = self.lambda;
        for i in 0..rows {
            for j in 0..width {
                let x = a.data()[i * width + j];
                let full = sp.w.data()[j] * x + sp.b.data()[j];
                out.data_mut()[i * width + j] = if lam == 1.0 {
                    full
                } else {
                    (1.0 - lam) * x + lam * full
                };
            }
        }
        Ok(out)
    }

    /// Inverse of [`Self::apply`] per feature, defined wherever
    /// `(1-λ) + λ·wⱼ != 0`.
    pub fn invert(&self, site: &str, y: &Tensor) -> Result<Tensor> {
        let sp = self.site(site)?;
        let (rows, width) = row_layout(y)?;
        if width != sp.w.numel() {
            return Err(Error::ShapeMismatch(format!(
                "site {site}: params width {}, activations width {width}",
                sp.w.numel()
            )));
        }
        let lam = self.lambda;
        let mut out = y.clone();
        for j in 0..width {
            let denom = (1.0 - lam) + lam * sp.w.data()[j];
            if denom == 0.0 {
                return Err(Error::Degenerate(format!(
                    "site {site}: feature {j} not invertible at lambda {lam}"
                )));
            }
            for i in 0..rows {
                out.data_mut()[i * width + j] =
                    (y.data()[i * width + j] - lam * sp.b.data()[j]) / denom;
            }
        }
        Ok(out)
    }

    /// Lift the parameters onto a tape as differentiable leaves. Used by the
    /// gradient-based estimator, which optimizes (w, b) directly.
    pub fn register(&self, tape: &mut Tape) -> InterventionNodes {
        let mut sites = BTreeMap::new();
        for (name, sp) in &self.sites {
            let w = tape.param(sp.w.clone());
            let b = tape.param(sp.b.clone());
            sites.insert(name.clone(), (w, b));
        }
        let lambda = tape.constant(Tensor::scalar(self.lambda));
        InterventionNodes { sites, lambda }
    }

    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self)?;
        std::fs::write(path, text)?;
        Ok(())
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Ok(serde_json::from_str(&text)?)
    }
}

/// Intervention parameters living on a tape, for differentiable forwards:
/// per-site `(w, b)` nodes plus a scalar λ node.
pub struct InterventionNodes {
    pub sites: BTreeMap<String, (NodeId, NodeId)>,
    pub lambda: NodeId,
}

impl InterventionNodes {
    /// Graph version of the affine-elementwise map, differentiable in the
    /// activations, w, b, and λ.
    pub fn apply(&self, tape: &mut Tape, site: &str, a: NodeId) -> Result<NodeId> {
        let &(w, b) = self
            .sites
            .get(site)
            .ok_or_else(|| Error::UnknownSite(site.into()))?;
        if tape.value(a).cols() != tape.value(w).numel() {
            return Err(Error::ShapeMismatch(format!(
                "site {site}: params width {}, activations width {}",
                tape.value(w).numel(),
                tape.value(a).cols()
            )));
        }
        let one = tape.constant(Tensor::scalar(1.0));
        let keep = tape.sub(one, self.lambda)?;
        let kept = tape.mul(keep, a)?;
        let wa = tape.rows_mul(a, w)?;
        let wab = tape.rows_add(wa, b)?;
        let moved = tape.mul(self.lambda, wab)?;
        tape.add(kept, moved)
    }

    pub fn has_site(&self, site: &str) -> bool {
        self.sites.contains_key(site)
    }
}

fn row_layout(t: &Tensor) -> Result<(usize, usize)> {
    match t.shape() {
        [n, d] => Ok((*n, *d)),
        [d] => Ok((1, *d)),
        s => Err(Error::ShapeMismatch(format!(
            "expected [n, d] or [d] activations, got {s:?}"
        ))),
    }
}
