//! MLP hypernetwork: one forward pass from a conditioning embedding to
//! intervention parameters for every hooked site.
//!
//! Architecture: an input adapter (biasless linear into task space, then a
//! learned layer norm) produces a task embedding. Each site contributes a
//! key embedding, each distinct width a shape embedding, and each parameter
//! role (scale w / shift b) a state-key embedding; their concatenation is a
//! weight query. The shared decoder MLP maps `concat(task, query)` to a
//! raw vector of the maximum site width, truncated to the site's width.
//! Two queries per site: one for w, one for b.
//!
//! Output rule: `w = 1 + raw_w`, `b = raw_b`, with the decoder's final layer
//! zero-initialized, so a fresh hypernetwork predicts exactly the identity
//! intervention at every site.
//!
//! An EMA shadow of all parameters is maintained; evaluation-time
//! predictions always read the shadow.

use serde::{Deserialize, Serialize};

use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::generator::HookSite;
use crate::rng;
use crate::steering::{InterventionNodes, InterventionParams, SiteParams};
use crate::tape::{NodeId, Tape};
use crate::tensor::Tensor;

const ADAPTER_LN_EPS: f64 = 1e-5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HypernetConfig {
    pub encoder_dim: usize,
    pub adapter_out: usize,
    pub key_dim: usize,
    pub shape_dim: usize,
    pub state_key_dim: usize,
    pub decoder_hidden: Vec<usize>,
    /// Gain applied to the decoder's raw output before the `w = 1 + raw`,
    /// `b = raw` rule. The final layer starts at zero, so this widens how
    /// far a fixed optimizer travel budget can move the predicted
    /// interventions without touching the identity-at-init property.
    pub output_scale: f64,
    /// Ordered (site name, width) pairs of the target model.
    pub sites: Vec<(String, usize)>,
}

impl HypernetConfig {
    /// Desk-scale configuration, sized to stay below the toy generator's
    /// parameter count while it learns a smooth low-dimensional concept
    /// manifold.
    pub fn for_sites(encoder_dim: usize, sites: &[HookSite]) -> Self {
        HypernetConfig {
            encoder_dim,
            adapter_out: 24,
            key_dim: 12,
            shape_dim: 6,
            state_key_dim: 6,
            decoder_hidden: vec![48, 48],
            output_scale: 3.0,
            sites: sites.iter().map(|s| (s.name.clone(), s.width)).collect(),
        }
    }

    /// Full-scale configuration: adapter 256, composable layer embeddings
    /// key=128/shape=64/state_key=64 (weight query dim 256, decoder input
    /// 512), decoder hidden 1024x1024. Used for parameter-count
    /// cross-checks against the published breakdown.
    pub fn full_scale(encoder_dim: usize, sites: &[(String, usize)]) -> Self {
        HypernetConfig {
            encoder_dim,
            adapter_out: 256,
            key_dim: 128,
            shape_dim: 64,
            state_key_dim: 64,
            decoder_hidden: vec![1024, 1024],
            output_scale: 1.0,
            sites: sites.to_vec(),
        }
    }

    /// Weight query dimension: key + shape + state key.
    pub fn query_dim(&self) -> usize {
        self.key_dim + self.shape_dim + self.state_key_dim
    }

    /// Decoder input: task embedding plus weight query.
    pub fn decoder_in(&self) -> usize {
        self.adapter_out + self.query_dim()
    }

    /// Maximum site width; the decoder's output dimension.
    pub fn max_out(&self) -> usize {
        self.sites.iter().map(|(_, w)| *w).max().unwrap_or(0)
    }

    /// Distinct site widths, ascending. One shape embedding each.
    pub fn distinct_widths(&self) -> Vec<usize> {
        let mut ws: Vec<usize> = self.sites.iter().map(|(_, w)| *w).collect();
        ws.sort_unstable();
        ws.dedup();
        ws
    }

    pub fn validate(&self) -> Result<()> {
        if self.sites.is_empty() {
            return Err(Error::InvalidConfig("hypernet needs at least one site".into()));
        }
        for &d in [
            self.encoder_dim,
            self.adapter_out,
            self.key_dim,
            self.shape_dim,
            self.state_key_dim,
        ]
        .iter()
        {
            if d == 0 {
                return Err(Error::InvalidConfig("hypernet dims must be positive".into()));
            }
        }
        if self.decoder_hidden.iter().any(|&h| h == 0) || self.sites.iter().any(|(_, w)| *w == 0) {
            return Err(Error::InvalidConfig("hypernet dims must be positive".into()));
        }
        if self.output_scale.is_nan() || self.output_scale <= 0.0 {
            return Err(Error::InvalidConfig("output_scale must be positive".into()));
        }
        Ok(())
    }
}

/// Parameter counts per architectural component.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamBreakdown {
    /// Biasless linear projection plus its layer-norm gain and shift.
    pub input_adapter: usize,
    /// Site keys, shape embeddings, and the two state keys.
    pub layer_embeddings: usize,
    /// Decoder hidden layers.
    pub decoding_projection: usize,
    /// Final linear layer onto the maximum site width.
    pub output_projection: usize,
}

impl ParamBreakdown {
    pub fn total(&self) -> usize {
        self.input_adapter + self.layer_embeddings + self.decoding_projection + self.output_projection
    }
}

/// Which parameter set a prediction reads.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamSet {
    Live,
    Ema,
}

#[derive(Debug, Clone, Copy)]
struct ParamLayout {
    adapter_w: usize,
    adapter_gain: usize,
    adapter_shift: usize,
    site_keys_start: usize,
    shapes_start: usize,
    state_key_w: usize,
    state_key_b: usize,
    decoder_start: usize,
    n_decoder_layers: usize,
}

/// Hypernetwork parameters plus their EMA shadow and a step counter.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct HypernetState {
    cfg: HypernetConfig,
    params: Vec<Tensor>,
    ema: Vec<Tensor>,
    step: u64,
}

impl HypernetState {
    /// Scaled-Gaussian fan-in initialization everywhere except the decoder's
    /// final layer, which starts at zero so the initial prediction is the
    /// identity intervention. The EMA shadow starts as a copy of the live
    /// parameters.
    pub fn init(cfg: HypernetConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut r = rng::stream(seed, &[20]);
        let mut params = Vec::new();

        let adapter_scale = 1.0 / (cfg.encoder_dim as f64).sqrt();
        params.push(gaussian(&mut r, vec![cfg.adapter_out, cfg.encoder_dim], adapter_scale));
        params.push(Tensor::full(vec![cfg.adapter_out], 1.0));
        params.push(Tensor::zeros(vec![cfg.adapter_out]));

        for _ in 0..cfg.sites.len() {
            params.push(gaussian(&mut r, vec![cfg.key_dim], 1.0));
        }
        for _ in cfg.distinct_widths() {
            params.push(gaussian(&mut r, vec![cfg.shape_dim], 1.0));
        }
        params.push(gaussian(&mut r, vec![cfg.state_key_dim], 1.0));
        params.push(gaussian(&mut r, vec![cfg.state_key_dim], 1.0));

        let mut fan_in = cfg.decoder_in();
        for &h in &cfg.decoder_hidden {
            let scale = 1.0 / (fan_in as f64).sqrt();
            params.push(gaussian(&mut r, vec![h, fan_in], scale));
            params.push(Tensor::zeros(vec![h]));
            fan_in = h;
        }
        params.push(Tensor::zeros(vec![cfg.max_out(), fan_in]));
        params.push(Tensor::zeros(vec![cfg.max_out()]));

        let ema = params.clone();
        Ok(HypernetState {
            cfg,
            params,
            ema,
            step: 0,
        })
    }

    fn layout(&self) -> ParamLayout {
        let site_keys_start = 3;
        let shapes_start = site_keys_start + self.cfg.sites.len();
        let state_key_w = shapes_start + self.cfg.distinct_widths().len();
        let decoder_start = state_key_w + 2;
        ParamLayout {
            adapter_w: 0,
            adapter_gain: 1,
            adapter_shift: 2,
            site_keys_start,
            shapes_start,
            state_key_w,
            state_key_b: state_key_w + 1,
            decoder_start,
            n_decoder_layers: self.cfg.decoder_hidden.len() + 1,
        }
    }

    pub fn config(&self) -> &HypernetConfig {
        &self.cfg
    }

    pub fn step(&self) -> u64 {
        self.step
    }

    pub fn bump_step(&mut self) {
        self.step += 1;
    }

    pub fn live_params(&self) -> &[Tensor] {
        &self.params
    }

    pub fn live_params_mut(&mut self) -> &mut [Tensor] {
        &mut self.params
    }

    pub fn ema_params(&self) -> &[Tensor] {
        &self.ema
    }

    /// `shadow <- decay·shadow + (1-decay)·live`, every parameter.
    pub fn ema_update(&mut self, decay: f64) -> Result<()> {
        if !(0.0..1.0).contains(&decay) {
            return Err(Error::InvalidConfig(format!("ema decay must be in [0,1), got {decay}")));
        }
        for (shadow, live) in self.ema.iter_mut().zip(self.params.iter()) {
            for (s, l) in shadow.data_mut().iter_mut().zip(live.data()) {
                *s = decay * *s + (1.0 - decay) * l;
            }
        }
        Ok(())
    }

    /// Lift one parameter set onto a tape as differentiable leaves, in
    /// canonical order (the same order gradients are read back in).
    pub fn register(&self, tape: &mut Tape, which: ParamSet) -> Vec<NodeId> {
        let src = match which {
            ParamSet::Live => &self.params,
            ParamSet::Ema => &self.ema,
        };
        src.iter().map(|t| tape.param(t.clone())).collect()
    }

    /// Build the prediction graph from registered parameter nodes.
    /// Returns the per-site intervention nodes with λ fixed to 1 (callers
    /// rescale via `with_strength` on extracted values).
    pub fn predict_nodes(
        &self,
        tape: &mut Tape,
        nodes: &[NodeId],
        embedding: &Tensor,
    ) -> Result<InterventionNodes> {
        if embedding.shape() != [self.cfg.encoder_dim] {
            return Err(Error::ShapeMismatch(format!(
                "embedding {:?}, expected [{}]",
                embedding.shape(),
                self.cfg.encoder_dim
            )));
        }
        let lay = self.layout();
        let widths = self.cfg.distinct_widths();

        let e = tape.constant(embedding.clone());
        let projected = tape.matvec(nodes[lay.adapter_w], e)?;
        let task = tape.layer_norm(
            projected,
            nodes[lay.adapter_gain],
            nodes[lay.adapter_shift],
            ADAPTER_LN_EPS,
        )?;

        let mut sites = std::collections::BTreeMap::new();
        for (i, (name, width)) in self.cfg.sites.iter().enumerate() {
            let key = nodes[lay.site_keys_start + i];
            let shape_idx = widths.iter().position(|w| w == width).unwrap();
            let shape = nodes[lay.shapes_start + shape_idx];

            let raw_w = self.decode(tape, nodes, &lay, task, key, shape, lay.state_key_w, *width)?;
            let raw_b = self.decode(tape, nodes, &lay, task, key, shape, lay.state_key_b, *width)?;
            let ones = tape.constant(Tensor::full(vec![*width], 1.0));
            let w_node = tape.add(raw_w, ones)?;
            sites.insert(name.clone(), (w_node, raw_b));
        }
        let lambda = tape.constant(Tensor::scalar(1.0));
        Ok(InterventionNodes { sites, lambda })
    }

    /// One decoder pass for a (site, state) weight query, truncated to the
    /// site width.
    #[allow(clippy::too_many_arguments)]
    fn decode(
        &self,
        tape: &mut Tape,
        nodes: &[NodeId],
        lay: &ParamLayout,
        task: NodeId,
        key: NodeId,
        shape: NodeId,
        state_key_idx: usize,
        width: usize,
    ) -> Result<NodeId> {
        let query = tape.concat(&[key, shape, nodes[state_key_idx]])?;
        let mut h = tape.concat(&[task, query])?;
        for l in 0..lay.n_decoder_layers {
            let w = nodes[lay.decoder_start + 2 * l];
            let b = nodes[lay.decoder_start + 2 * l + 1];
            h = tape.matvec(w, h)?;
            h = tape.add(h, b)?;
            if l + 1 < lay.n_decoder_layers {
                h = tape.relu(h);
            }
        }
        let trimmed = tape.take_prefix(h, width)?;
        Ok(if self.cfg.output_scale != 1.0 {
            tape.scale(trimmed, self.cfg.output_scale)
        } else {
            trimmed
        })
    }

    /// Evaluation-time prediction: one value-level forward pass reading the
    /// EMA shadow. λ = 1 in the returned params.
    pub fn predict(&self, embedding: &Tensor) -> Result<InterventionParams> {
        self.predict_with(embedding, ParamSet::Ema)
    }

    /// Prediction from an explicit parameter set.
    pub fn predict_with(&self, embedding: &Tensor, which: ParamSet) -> Result<InterventionParams> {
        let mut tape = Tape::new();
        let nodes = self.register(&mut tape, which);
        let iv = self.predict_nodes(&mut tape, &nodes, embedding)?;
        let mut sites = std::collections::BTreeMap::new();
        for (name, &(w, b)) in &iv.sites {
            sites.insert(
                name.clone(),
                SiteParams {
                    w: tape.value(w).clone(),
                    b: tape.value(b).clone(),
                },
            );
        }
        Ok(InterventionParams {
            sites,
            lambda: 1.0,
            provenance: "hypernet".into(),
        })
    }

    /// Exact parameter counts per component.
    pub fn count_params(&self) -> ParamBreakdown {
        let lay = self.layout();
        let count = |range: std::ops::Range<usize>| -> usize {
            range.map(|i| self.params[i].numel()).sum()
        };
        ParamBreakdown {
            input_adapter: count(0..3),
            layer_embeddings: count(lay.site_keys_start..lay.decoder_start),
            decoding_projection: count(lay.decoder_start..lay.decoder_start + 2 * (lay.n_decoder_layers - 1)),
            output_projection: count(
                lay.decoder_start + 2 * (lay.n_decoder_layers - 1)
                    ..lay.decoder_start + 2 * lay.n_decoder_layers,
            ),
        }
    }

    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let state: HypernetState = serde_json::from_str(&text)?;
        state.cfg.validate()?;
        Ok(state)
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
