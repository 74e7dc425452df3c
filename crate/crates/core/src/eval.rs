//! Evaluation: fidelity metrics, method comparison tables, strength and
//! few-shot sweeps, cross-modal transfer, and the loss-order ablation.
//!
//! Both fidelities are output-space cosine metrics. Input fidelity compares
//! steered against unsteered outputs per input; concept fidelity measures,
//! relative to the mean unsteered output over the evaluation inputs, how
//! well steered outputs point toward the concept's mean output direction;
//! baseline-centering keeps "no steering" from scoring spuriously high on
//! concepts near the generic mean. Absolute values are not comparable across
//! metric families; orderings and deltas are what the tables assert.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::estimators::{fit, EstimatorConfig, Method};
use crate::generator::ForwardModel;
use crate::hypernet::HypernetState;
use crate::loss::{alignment_loss_value, LossConfig};
use crate::rng;
use crate::steering::InterventionParams;
use crate::tensor::{cosine, Tensor};
use crate::trainer::{train, TrainConfig};
use crate::world::{encode, ConceptSpec, EncodeMode, Split, World};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalConfig {
    pub seed: u64,
    /// Loss used to score interventions (the amortized objective, p = 1).
    pub loss: LossConfig,
    /// Template for per-concept baseline fits; the method field is swapped
    /// per compared method.
    pub estimator: EstimatorConfig,
    /// Strength at which every method's parameters are applied.
    pub lambda: f64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            seed: 7,
            loss: LossConfig::default(),
            estimator: EstimatorConfig::default(),
            lambda: 1.0,
        }
    }
}

/// Shared evaluation inputs: a seeded draw from the source pool with exactly
/// as many rows as each concept has samples, so alignment losses compare
/// equal-sized distributions.
pub fn eval_inputs(world: &World, seed: u64) -> Tensor {
    let k = world.config.samples_per_concept;
    let n = world.source.samples.rows();
    let mut r = rng::stream(seed, &[300]);
    let idx: Vec<usize> = if k <= n {
        use rand::seq::SliceRandom;
        let mut all: Vec<usize> = (0..n).collect();
        all.shuffle(&mut r);
        all.truncate(k);
        all
    } else {
        use rand::Rng;
        (0..k).map(|_| r.random_range(0..n)).collect()
    };
    world.source.samples.select_rows(&idx)
}

/// Per-concept evaluation context: the unsteered output baseline over the
/// evaluation inputs and the concept's mean output direction.
pub struct ConceptContext {
    pub baseline: Vec<f64>,
    pub target_mean: Vec<f64>,
    pub target_record: crate::generator::ActivationRecord,
}

pub fn concept_context<M: ForwardModel>(
    model: &M,
    concept: &ConceptSpec,
    inputs: &Tensor,
) -> Result<ConceptContext> {
    let (unsteered, _) = model.forward_capture(inputs, None)?;
    let baseline = unsteered.col_means();
    let (concept_out, target_record) = model.forward_capture(&concept.samples_text, None)?;
    let target_mean = concept_out.col_means();
    let gap: f64 = baseline
        .iter()
        .zip(&target_mean)
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>()
        .sqrt();
    if gap < 1e-12 {
        return Err(Error::Degenerate(format!(
            "concept {}: target mean coincides with the source baseline",
            concept.id
        )));
    }
    Ok(ConceptContext {
        baseline,
        target_mean,
        target_record,
    })
}

/// Mean cosine between steered and unsteered outputs, row by row.
/// Exactly 1.0 at identity parameters or λ = 0.
pub fn input_fidelity<M: ForwardModel>(
    model: &M,
    inputs: &Tensor,
    params: &InterventionParams,
) -> Result<f64> {
    let (plain, _) = model.forward_capture(inputs, None)?;
    let (steered, _) = model.forward_capture(inputs, Some(params))?;
    let mut acc = 0.0;
    for i in 0..inputs.rows() {
        acc += cosine(steered.row(i), plain.row(i))?;
    }
    Ok(acc / inputs.rows() as f64)
}

/// Mean cosine between baseline-centered steered outputs and the
/// baseline-centered concept direction.
pub fn concept_fidelity<M: ForwardModel>(
    model: &M,
    inputs: &Tensor,
    params: Option<&InterventionParams>,
    ctx: &ConceptContext,
) -> Result<f64> {
    let (out, _) = model.forward_capture(inputs, params)?;
    let dir: Vec<f64> = ctx
        .target_mean
        .iter()
        .zip(&ctx.baseline)
        .map(|(t, b)| t - b)
        .collect();
    let mut acc = 0.0;
    for i in 0..inputs.rows() {
        let centered: Vec<f64> = out.row(i).iter().zip(&ctx.baseline).map(|(o, b)| o - b).collect();
        acc += cosine(&centered, &dir)?;
    }
    Ok(acc / inputs.rows() as f64)
}

fn mean_sd(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalRow {
    pub split: Split,
    pub method: String,
    pub input_fid_mean: f64,
    pub input_fid_sd: f64,
    pub concept_fid_mean: f64,
    pub concept_fid_sd: f64,
    pub align_loss_mean: f64,
    pub seconds_mean: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalReport {
    pub rows: Vec<EvalRow>,
}

impl EvalReport {
    pub fn to_csv(&self) -> String {
        let mut out = String::from(
            "split,method,input_fid_mean,input_fid_sd,concept_fid_mean,concept_fid_sd,align_loss_mean,seconds_mean\n",
        );
        for r in &self.rows {
            out.push_str(&format!(
                "{:?},{},{},{},{},{},{},{}\n",
                r.split,
                r.method,
                r.input_fid_mean,
                r.input_fid_sd,
                r.concept_fid_mean,
                r.concept_fid_sd,
                r.align_loss_mean,
                r.seconds_mean
            ));
        }
        out
    }

    pub fn row(&self, split: Split, method: &str) -> Option<&EvalRow> {
        self.rows.iter().find(|r| r.split == split && r.method == method)
    }
}

struct ConceptMetrics {
    input_fid: f64,
    concept_fid: f64,
    align_loss: f64,
    seconds: f64,
}

fn score_params<M: ForwardModel>(
    model: &M,
    inputs: &Tensor,
    params: &InterventionParams,
    ctx: &ConceptContext,
    loss: &LossConfig,
    seconds: f64,
) -> Result<ConceptMetrics> {
    let (_, steered_rec) = model.forward_capture(inputs, Some(params))?;
    Ok(ConceptMetrics {
        input_fid: input_fidelity(model, inputs, params)?,
        concept_fid: concept_fidelity(model, inputs, Some(params), ctx)?,
        align_loss: alignment_loss_value(&steered_rec, &ctx.target_record, loss)?,
        seconds,
    })
}

fn aggregate(split: Split, method: &str, metrics: &[ConceptMetrics]) -> EvalRow {
    let (if_mean, if_sd) = mean_sd(&metrics.iter().map(|m| m.input_fid).collect::<Vec<_>>());
    let (cf_mean, cf_sd) = mean_sd(&metrics.iter().map(|m| m.concept_fid).collect::<Vec<_>>());
    let (al_mean, _) = mean_sd(&metrics.iter().map(|m| m.align_loss).collect::<Vec<_>>());
    let (sec_mean, _) = mean_sd(&metrics.iter().map(|m| m.seconds).collect::<Vec<_>>());
    EvalRow {
        split,
        method: method.to_string(),
        input_fid_mean: if_mean,
        input_fid_sd: if_sd,
        concept_fid_mean: cf_mean,
        concept_fid_sd: cf_sd,
        align_loss_mean: al_mean,
        seconds_mean: sec_mean,
    }
}

/// Fit every baseline from scratch on each concept of each split (timed),
/// query the hypernetwork from the concept's conditioning embedding (timed),
/// and score everything on a shared evaluation input set. Rows per split:
/// unsteered, one per method, plus the hypernetwork when given.
pub fn compare_methods<M: ForwardModel>(
    world: &World,
    model: &M,
    methods: &[Method],
    hypernet: Option<&HypernetState>,
    cfg: &EvalConfig,
) -> Result<EvalReport> {
    let inputs = eval_inputs(world, cfg.seed);
    let mut rows = Vec::new();
    for split in [Split::Train, Split::Test] {
        let concepts = world.concepts_in(split);
        if concepts.is_empty() {
            continue;
        }
        let contexts: Vec<ConceptContext> = concepts
            .par_iter()
            .map(|c| concept_context(model, c, &inputs))
            .collect::<Result<_>>()?;

        // Unsteered row: identity parameters, zero cost.
        let identity = InterventionParams::identity(model.sites());
        let unsteered: Vec<ConceptMetrics> = concepts
            .iter()
            .zip(&contexts)
            .map(|(_, ctx)| score_params(model, &inputs, &identity, ctx, &cfg.loss, 0.0))
            .collect::<Result<_>>()?;
        rows.push(aggregate(split, "unsteered", &unsteered));

        for &method in methods {
            let mut est = cfg.estimator.clone();
            est.method = method;
            let metrics: Vec<ConceptMetrics> = concepts
                .par_iter()
                .zip(contexts.par_iter())
                .map(|(c, ctx)| {
                    let fit_src = fit_sources(world, c.id, cfg.seed);
                    let report = fit(model, &fit_src, &c.samples_text, &est)?;
                    let params = report.params.with_strength(cfg.lambda)?;
                    score_params(model, &inputs, &params, ctx, &cfg.loss, report.wall_time_s)
                })
                .collect::<Result<_>>()?;
            rows.push(aggregate(split, method.name(), &metrics));
        }

        if let Some(state) = hypernet {
            let metrics: Vec<ConceptMetrics> = concepts
                .par_iter()
                .zip(contexts.par_iter())
                .map(|(c, ctx)| {
                    let t0 = std::time::Instant::now();
                    let embedding = encode(&c.samples_text, EncodeMode::Average)?;
                    let params = state.predict(&embedding)?;
                    let dt = t0.elapsed().as_secs_f64();
                    let params = params.with_strength(cfg.lambda)?;
                    score_params(model, &inputs, &params, ctx, &cfg.loss, dt)
                })
                .collect::<Result<_>>()?;
            rows.push(aggregate(split, "hypernet", &metrics));
        }
    }
    Ok(EvalReport { rows })
}

/// Source inputs used to fit per-concept baselines, matched in size to the
/// concept's sample count and seeded per concept.
pub fn fit_sources(world: &World, concept_id: usize, seed: u64) -> Tensor {
    let k = world.config.samples_per_concept;
    let n = world.source.samples.rows();
    let mut r = rng::stream(seed, &[301, concept_id as u64]);
    let idx: Vec<usize> = if k <= n {
        use rand::seq::SliceRandom;
        let mut all: Vec<usize> = (0..n).collect();
        all.shuffle(&mut r);
        all.truncate(k);
        all
    } else {
        use rand::Rng;
        (0..k).map(|_| r.random_range(0..n)).collect()
    };
    world.source.samples.select_rows(&idx)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LambdaRow {
    pub lambda: f64,
    pub input_fid: f64,
    pub concept_fid: f64,
    /// Arithmetic mean of the two fidelities.
    pub mean: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LambdaTable {
    pub concept_id: usize,
    pub rows: Vec<LambdaRow>,
}

impl LambdaTable {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("lambda,input_fid,concept_fid,mean\n");
        for r in &self.rows {
            out.push_str(&format!("{},{},{},{}\n", r.lambda, r.input_fid, r.concept_fid, r.mean));
        }
        out
    }
}

pub const DEFAULT_LAMBDA_GRID: [f64; 7] = [0.0, 0.25, 0.5, 0.75, 1.0, 1.25, 1.5];

/// Both fidelities along a strength grid for one concept's parameters.
pub fn lambda_sweep<M: ForwardModel>(
    model: &M,
    world: &World,
    concept: &ConceptSpec,
    params: &InterventionParams,
    grid: &[f64],
    cfg: &EvalConfig,
) -> Result<LambdaTable> {
    if grid.iter().any(|&l| l < 0.0) {
        return Err(Error::InvalidConfig("negative strength in grid".into()));
    }
    let inputs = eval_inputs(world, cfg.seed);
    let ctx = concept_context(model, concept, &inputs)?;
    let mut rows = Vec::with_capacity(grid.len());
    for &lambda in grid {
        let p = params.with_strength(lambda)?;
        let input_fid = input_fidelity(model, &inputs, &p)?;
        let concept_fid = concept_fidelity(model, &inputs, Some(&p), &ctx)?;
        rows.push(LambdaRow {
            lambda,
            input_fid,
            concept_fid,
            mean: 0.5 * (input_fid + concept_fid),
        });
    }
    Ok(LambdaTable {
        concept_id: concept.id,
        rows,
    })
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct NshotRow {
    pub n: usize,
    pub input_fid_mean: f64,
    pub input_fid_sd: f64,
    pub concept_fid_mean: f64,
    pub concept_fid_sd: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct NshotTable {
    pub rows: Vec<NshotRow>,
}

impl NshotTable {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("n,input_fid_mean,input_fid_sd,concept_fid_mean,concept_fid_sd\n");
        for r in &self.rows {
            out.push_str(&format!(
                "{},{},{},{},{}\n",
                r.n, r.input_fid_mean, r.input_fid_sd, r.concept_fid_mean, r.concept_fid_sd
            ));
        }
        out
    }
}

pub const DEFAULT_NSHOT_GRID: [usize; 6] = [1, 2, 4, 8, 16, 32];

/// Condition the hypernetwork on the average of N sampled concept sentences,
/// for each N in the grid, over test concepts.
pub fn nshot_sweep<M: ForwardModel>(
    world: &World,
    model: &M,
    hypernet: &HypernetState,
    ns: &[usize],
    cfg: &EvalConfig,
) -> Result<NshotTable> {
    let max_n = world.config.samples_per_concept;
    for &n in ns {
        if n == 0 || n > max_n {
            return Err(Error::InvalidConfig(format!(
                "N = {n} outside 1..={max_n} available samples"
            )));
        }
    }
    let inputs = eval_inputs(world, cfg.seed);
    let concepts = world.concepts_in(Split::Test);
    let contexts: Vec<ConceptContext> = concepts
        .par_iter()
        .map(|c| concept_context(model, c, &inputs))
        .collect::<Result<_>>()?;

    let mut rows = Vec::with_capacity(ns.len());
    for &n in ns {
        let metrics: Vec<(f64, f64)> = concepts
            .par_iter()
            .zip(contexts.par_iter())
            .map(|(c, ctx)| {
                let rows_idx: Vec<usize> = if n == max_n {
                    (0..max_n).collect()
                } else {
                    use rand::seq::SliceRandom;
                    let mut all: Vec<usize> = (0..max_n).collect();
                    all.shuffle(&mut rng::stream(cfg.seed, &[400, n as u64, c.id as u64]));
                    all.truncate(n);
                    all
                };
                let subset = c.samples_text.select_rows(&rows_idx);
                let embedding = encode(&subset, EncodeMode::Average)?;
                let params = hypernet.predict(&embedding)?.with_strength(cfg.lambda)?;
                Ok((
                    input_fidelity(model, &inputs, &params)?,
                    concept_fidelity(model, &inputs, Some(&params), ctx)?,
                ))
            })
            .collect::<Result<_>>()?;
        let (if_mean, if_sd) = mean_sd(&metrics.iter().map(|m| m.0).collect::<Vec<_>>());
        let (cf_mean, cf_sd) = mean_sd(&metrics.iter().map(|m| m.1).collect::<Vec<_>>());
        rows.push(NshotRow {
            n,
            input_fid_mean: if_mean,
            input_fid_sd: if_sd,
            concept_fid_mean: cf_mean,
            concept_fid_sd: cf_sd,
        });
    }
    Ok(NshotTable { rows })
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CrossmodalRow {
    pub concept_id: usize,
    pub text_input_fid: f64,
    pub text_concept_fid: f64,
    pub image_input_fid: f64,
    pub image_concept_fid: f64,
    pub delta_input_fid: f64,
    pub delta_concept_fid: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CrossmodalTable {
    pub rows: Vec<CrossmodalRow>,
    pub mean_text_concept_fid: f64,
    pub mean_image_concept_fid: f64,
    pub mean_abs_delta_concept_fid: f64,
}

impl CrossmodalTable {
    pub fn to_csv(&self) -> String {
        let mut out = String::from(
            "concept_id,text_input_fid,text_concept_fid,image_input_fid,image_concept_fid,delta_input_fid,delta_concept_fid\n",
        );
        for r in &self.rows {
            out.push_str(&format!(
                "{},{},{},{},{},{},{}\n",
                r.concept_id,
                r.text_input_fid,
                r.text_concept_fid,
                r.image_input_fid,
                r.image_concept_fid,
                r.delta_input_fid,
                r.delta_concept_fid
            ));
        }
        out
    }
}

/// Image-modality conditioning (never used in training) next to text
/// conditioning, per test concept, plus aggregate deltas.
pub fn crossmodal_eval<M: ForwardModel>(
    world: &World,
    model: &M,
    hypernet: &HypernetState,
    cfg: &EvalConfig,
) -> Result<CrossmodalTable> {
    let inputs = eval_inputs(world, cfg.seed);
    let concepts = world.concepts_in(Split::Test);
    let rows: Vec<CrossmodalRow> = concepts
        .par_iter()
        .map(|c| {
            if c.samples_image.rows() == 0 {
                return Err(Error::Degenerate(format!(
                    "concept {} has no image samples",
                    c.id
                )));
            }
            let ctx = concept_context(model, c, &inputs)?;
            let e_text = encode(&c.samples_text, EncodeMode::Average)?;
            let e_image = encode(&c.samples_image, EncodeMode::Average)?;
            let p_text = hypernet.predict(&e_text)?.with_strength(cfg.lambda)?;
            let p_image = hypernet.predict(&e_image)?.with_strength(cfg.lambda)?;
            let text_input_fid = input_fidelity(model, &inputs, &p_text)?;
            let text_concept_fid = concept_fidelity(model, &inputs, Some(&p_text), &ctx)?;
            let image_input_fid = input_fidelity(model, &inputs, &p_image)?;
            let image_concept_fid = concept_fidelity(model, &inputs, Some(&p_image), &ctx)?;
            Ok(CrossmodalRow {
                concept_id: c.id,
                text_input_fid,
                text_concept_fid,
                image_input_fid,
                image_concept_fid,
                delta_input_fid: image_input_fid - text_input_fid,
                delta_concept_fid: image_concept_fid - text_concept_fid,
            })
        })
        .collect::<Result<_>>()?;

    let mean_text = rows.iter().map(|r| r.text_concept_fid).sum::<f64>() / rows.len() as f64;
    let mean_image = rows.iter().map(|r| r.image_concept_fid).sum::<f64>() / rows.len() as f64;
    let mean_abs_delta =
        rows.iter().map(|r| r.delta_concept_fid.abs()).sum::<f64>() / rows.len() as f64;
    Ok(CrossmodalTable {
        rows,
        mean_text_concept_fid: mean_text,
        mean_image_concept_fid: mean_image,
        mean_abs_delta_concept_fid: mean_abs_delta,
    })
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AblationRow {
    pub p: u8,
    pub first_epoch_loss: f64,
    pub final_loss: f64,
    pub input_fid_mean: f64,
    pub concept_fid_mean: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AblationTable {
    pub rows: Vec<AblationRow>,
}

impl AblationTable {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("p,first_epoch_loss,final_loss,input_fid_mean,concept_fid_mean\n");
        for r in &self.rows {
            out.push_str(&format!(
                "{},{},{},{},{}\n",
                r.p, r.first_epoch_loss, r.final_loss, r.input_fid_mean, r.concept_fid_mean
            ));
        }
        out
    }
}

/// Train one hypernetwork per loss order (p = 1 and p = 2) under otherwise
/// identical settings and report both losses and test-split fidelities.
pub fn p_loss_ablation<M: ForwardModel>(
    world: &World,
    model: &M,
    base_state: &HypernetState,
    train_cfg: &TrainConfig,
    cfg: &EvalConfig,
) -> Result<AblationTable> {
    let mut rows = Vec::new();
    for p in [1u8, 2u8] {
        let mut state = base_state.clone();
        let mut tc = train_cfg.clone();
        tc.loss = LossConfig::with_p(p);
        let log = train(world, model, &mut state, &tc)?;

        let inputs = eval_inputs(world, cfg.seed);
        let concepts = world.concepts_in(Split::Test);
        let mut ifids = Vec::new();
        let mut cfids = Vec::new();
        for c in &concepts {
            let ctx = concept_context(model, c, &inputs)?;
            let e = encode(&c.samples_text, EncodeMode::Average)?;
            let params = state.predict(&e)?.with_strength(cfg.lambda)?;
            ifids.push(input_fidelity(model, &inputs, &params)?);
            cfids.push(concept_fidelity(model, &inputs, Some(&params), &ctx)?);
        }
        rows.push(AblationRow {
            p,
            first_epoch_loss: log.epoch_mean_loss.first().copied().unwrap_or(f64::NAN),
            final_loss: log.final_loss,
            input_fid_mean: ifids.iter().sum::<f64>() / ifids.len() as f64,
            concept_fid_mean: cfids.iter().sum::<f64>() / cfids.len() as f64,
        });
    }
    Ok(AblationTable { rows })
}
