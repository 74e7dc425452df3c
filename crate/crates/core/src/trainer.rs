//! End-to-end amortized training.
//!
//! Per optimizer step, a group of concepts is processed on an immutable
//! parameter snapshot: each contributes the gradient of the alignment loss
//! between the generator steered by the hypernetwork's predicted
//! intervention (on source inputs) and the generator run on that concept's
//! target samples. Group gradients are averaged in concept order (a
//! deterministic stand-in for all-reduce), then one AdamW step, one cosine
//! learning-rate update, and one EMA update apply.
//!
//! `group_size` fixes how many concepts share an optimizer step (the
//! simulated data-parallel ranks); `n_workers` only controls execution
//! threads and cannot change any result.

use std::time::Instant;

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::generator::ForwardModel;
use crate::hypernet::{HypernetState, ParamSet};
use crate::loss::{alignment_loss, LossConfig};
use crate::rng;
use crate::tape::Tape;
use crate::tensor::Tensor;
use crate::world::{encode, ConceptSpec, EncodeMode, Split, World};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub lr: f64,
    pub betas: (f64, f64),
    pub eps: f64,
    pub weight_decay: f64,
    /// The schedule ends at `lr * final_lr_factor`.
    pub final_lr_factor: f64,
    pub ema_decay: f64,
    /// Concepts per optimizer step (simulated data-parallel ranks).
    pub group_size: usize,
    /// Execution threads. Results are identical for any value.
    pub n_workers: usize,
    /// Conditioning sentences drawn per step.
    pub cond_subset: usize,
    /// Target-distribution sentences (and source sentences) drawn per step.
    pub target_subset: usize,
    pub loss: LossConfig,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 300,
            lr: 1e-4,
            betas: (0.9, 0.999),
            eps: 1e-8,
            weight_decay: 1e-2,
            final_lr_factor: 1e-3,
            ema_decay: 0.99,
            group_size: 4,
            n_workers: 4,
            cond_subset: 16,
            target_subset: 16,
            loss: LossConfig::default(),
            seed: 7,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.lr <= 0.0 {
            return Err(Error::InvalidConfig("lr must be positive".into()));
        }
        if self.group_size == 0 || self.n_workers == 0 {
            return Err(Error::InvalidConfig("group_size and n_workers must be >= 1".into()));
        }
        if self.cond_subset == 0 || self.target_subset == 0 {
            return Err(Error::InvalidConfig("subset sizes must be >= 1".into()));
        }
        self.loss.validate()
    }
}

/// Per-epoch losses, the full per-step learning-rate trace, and wall time.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainLog {
    pub epoch_mean_loss: Vec<f64>,
    pub lr_trace: Vec<f64>,
    pub epoch_seconds: Vec<f64>,
    pub final_loss: f64,
}

impl TrainLog {
    /// `epoch,mean_loss,lr,seconds` rows; lr is the last step's rate in
    /// that epoch, seconds is cumulative wall time at epoch end.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("epoch,mean_loss,lr,seconds\n");
        let steps_per_epoch = if self.epoch_mean_loss.is_empty() {
            0
        } else {
            self.lr_trace.len() / self.epoch_mean_loss.len()
        };
        for (e, loss) in self.epoch_mean_loss.iter().enumerate() {
            let lr = if steps_per_epoch == 0 {
                0.0
            } else {
                self.lr_trace[(e + 1) * steps_per_epoch - 1]
            };
            out.push_str(&format!("{},{},{},{}\n", e, loss, lr, self.epoch_seconds[e]));
        }
        out
    }
}

/// Cosine schedule from `lr0` at step 0 down to `lr0 * factor` at
/// `step == total`, evaluated as the convex combination
/// `w·lr0 + (1-w)·lr_end` with `w = (1 + cos(pi·step/total))/2`, so both
/// endpoints are exact.
pub fn cosine_lr(step: usize, total: usize, lr0: f64, factor: f64) -> Result<f64> {
    if step > total {
        return Err(Error::InvalidConfig(format!("step {step} > total {total}")));
    }
    let lr_end = lr0 * factor;
    if total == 0 {
        return Ok(lr0);
    }
    let w = 0.5 * (1.0 + (std::f64::consts::PI * step as f64 / total as f64).cos());
    Ok(w * lr0 + (1.0 - w) * lr_end)
}

/// First and second moment estimates for AdamW.
#[derive(Debug, Clone)]
pub struct AdamState {
    m: Vec<Tensor>,
    v: Vec<Tensor>,
    t: u64,
}

impl AdamState {
    pub fn new(params: &[Tensor]) -> Self {
        AdamState {
            m: params.iter().map(|p| Tensor::zeros(p.shape().to_vec())).collect(),
            v: params.iter().map(|p| Tensor::zeros(p.shape().to_vec())).collect(),
            t: 0,
        }
    }
}

/// One decoupled-weight-decay Adam step with bias-corrected moments.
#[allow(clippy::too_many_arguments)]
pub fn adamw_step(
    params: &mut [Tensor],
    grads: &[Tensor],
    state: &mut AdamState,
    lr: f64,
    betas: (f64, f64),
    eps: f64,
    weight_decay: f64,
) -> Result<()> {
    if params.len() != grads.len() {
        return Err(Error::ShapeMismatch("params/grads length mismatch".into()));
    }
    for (i, g) in grads.iter().enumerate() {
        if !g.all_finite() {
            return Err(Error::NonFinite(format!("gradient of parameter {i}")));
        }
        if g.shape() != params[i].shape() {
            return Err(Error::ShapeMismatch(format!("gradient {i} shape mismatch")));
        }
    }
    state.t += 1;
    let (b1, b2) = betas;
    let bc1 = 1.0 - b1.powi(state.t as i32);
    let bc2 = 1.0 - b2.powi(state.t as i32);
    for i in 0..params.len() {
        let m = state.m[i].data_mut();
        let v = state.v[i].data_mut();
        let p = params[i].data_mut();
        let g = grads[i].data();
        for j in 0..p.len() {
            m[j] = b1 * m[j] + (1.0 - b1) * g[j];
            v[j] = b2 * v[j] + (1.0 - b2) * g[j] * g[j];
            let m_hat = m[j] / bc1;
            let v_hat = v[j] / bc2;
            p[j] -= lr * weight_decay * p[j];
            p[j] -= lr * m_hat / (v_hat.sqrt() + eps);
        }
    }
    Ok(())
}

/// One concept's contribution: draw fresh conditioning/target subsets and
/// source inputs, predict the intervention from the conditioning embedding,
/// run the frozen model, and return the loss with gradients for every
/// hypernetwork parameter (in canonical order). The caller aggregates and
/// applies the update.
pub fn train_step<M: ForwardModel>(
    world: &World,
    model: &M,
    state: &HypernetState,
    concept: &ConceptSpec,
    cfg: &TrainConfig,
    epoch: u64,
) -> Result<(f64, Vec<Tensor>)> {
    if concept.split != Split::Train {
        return Err(Error::InvalidConfig(format!(
            "concept {} is not in the train split",
            concept.id
        )));
    }
    let mut r = rng::stream(cfg.seed, &[100, epoch, concept.id as u64]);
    let n = concept.samples_text.rows();
    let (cond_idx, tgt_idx) = draw_subsets(&mut r, n, cfg.cond_subset, cfg.target_subset);
    let src_idx = draw(&mut r, world.source.samples.rows(), cfg.target_subset);

    let cond = concept.samples_text.select_rows(&cond_idx);
    let embedding = encode(&cond, EncodeMode::Average)?;
    let targets = concept.samples_text.select_rows(&tgt_idx);
    let sources = world.source.samples.select_rows(&src_idx);

    let (_, target_rec) = model.forward_capture(&targets, None)?;

    let mut tape = Tape::new();
    let nodes = state.register(&mut tape, ParamSet::Live);
    let intervention = state.predict_nodes(&mut tape, &nodes, &embedding)?;
    let (_, steered) = model.forward_nodes(&mut tape, &sources, Some(&intervention))?;
    let loss = alignment_loss(&mut tape, &steered, &target_rec, &cfg.loss)?;
    let loss_val = tape.value(loss).item();
    tape.backward(loss)?;

    let grads = nodes.iter().map(|&id| tape.grad(id).clone()).collect();
    Ok((loss_val, grads))
}

/// Disjoint conditioning/target index draws when the concept has enough
/// samples. On overflow the conditioning side still avoids duplicates (all
/// samples, when cond >= n) and the target side resamples with replacement.
fn draw_subsets(r: &mut impl rand::Rng, n: usize, cond: usize, target: usize) -> (Vec<usize>, Vec<usize>) {
    if cond + target <= n {
        let mut idx: Vec<usize> = (0..n).collect();
        idx.shuffle(r);
        let cond_idx = idx[..cond].to_vec();
        let tgt_idx = idx[cond..cond + target].to_vec();
        (cond_idx, tgt_idx)
    } else {
        let mut idx: Vec<usize> = (0..n).collect();
        idx.shuffle(r);
        idx.truncate(cond.min(n));
        let tgt_idx = (0..target).map(|_| r.random_range(0..n)).collect();
        (idx, tgt_idx)
    }
}

fn draw(r: &mut impl rand::Rng, n: usize, k: usize) -> Vec<usize> {
    if k <= n {
        let mut idx: Vec<usize> = (0..n).collect();
        idx.shuffle(r);
        idx.truncate(k);
        idx
    } else {
        (0..k).map(|_| r.random_range(0..n)).collect()
    }
}

/// Full training loop. The generator is read-only throughout; only the
/// hypernetwork state mutates.
pub fn train<M: ForwardModel>(
    world: &World,
    model: &M,
    state: &mut HypernetState,
    cfg: &TrainConfig,
) -> Result<TrainLog> {
    cfg.validate()?;
    let train_ids: Vec<usize> = world
        .concepts_in(Split::Train)
        .iter()
        .map(|c| c.id)
        .collect();
    if train_ids.is_empty() {
        return Err(Error::Degenerate("world has no train split".into()));
    }
    let groups_per_epoch = train_ids.len().div_ceil(cfg.group_size);
    let total_steps = cfg.epochs * groups_per_epoch;
    let sched_total = total_steps.saturating_sub(1);

    let mut adam = AdamState::new(state.live_params());
    let mut log = TrainLog {
        epoch_mean_loss: Vec::with_capacity(cfg.epochs),
        lr_trace: Vec::with_capacity(total_steps),
        epoch_seconds: Vec::with_capacity(cfg.epochs),
        final_loss: f64::NAN,
    };

    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cfg.n_workers)
        .build()
        .map_err(|e| Error::InvalidConfig(format!("thread pool: {e}")))?;

    let start = Instant::now();
    let mut step_idx = 0usize;
    for epoch in 0..cfg.epochs {
        let mut order = train_ids.clone();
        order.shuffle(&mut rng::stream(cfg.seed, &[200, epoch as u64]));

        let mut epoch_loss = 0.0;
        for group in order.chunks(cfg.group_size) {
            // Snapshot read: every worker sees the same immutable state.
            let snapshot: &HypernetState = state;
            let results: Result<Vec<(f64, Vec<Tensor>)>> = if cfg.n_workers == 1 {
                group
                    .iter()
                    .map(|&cid| train_step(world, model, snapshot, world.concept(cid)?, cfg, epoch as u64))
                    .collect()
            } else {
                pool.install(|| {
                    group
                        .par_iter()
                        .map(|&cid| {
                            train_step(world, model, snapshot, world.concept(cid)?, cfg, epoch as u64)
                        })
                        .collect()
                })
            };
            let results = results.map_err(|e| Error::InvalidConfig(format!(
                "epoch {epoch}, step {step_idx}: {e}"
            )))?;

            // All-reduce simulation: arithmetic mean in fixed concept order.
            let k = results.len() as f64;
            let mut mean_grads: Vec<Tensor> = results[0].1.clone();
            for (_, grads) in results.iter().skip(1) {
                for (acc, g) in mean_grads.iter_mut().zip(grads.iter()) {
                    for (a, b) in acc.data_mut().iter_mut().zip(g.data()) {
                        *a += b;
                    }
                }
            }
            for t in mean_grads.iter_mut() {
                for v in t.data_mut() {
                    *v /= k;
                }
            }
            epoch_loss += results.iter().map(|(l, _)| l).sum::<f64>();

            let lr = cosine_lr(step_idx, sched_total, cfg.lr, cfg.final_lr_factor)?;
            adamw_step(
                state.live_params_mut(),
                &mean_grads,
                &mut adam,
                lr,
                cfg.betas,
                cfg.eps,
                cfg.weight_decay,
            )?;
            state.ema_update(cfg.ema_decay)?;
            state.bump_step();
            log.lr_trace.push(lr);
            step_idx += 1;
        }
        log.epoch_mean_loss.push(epoch_loss / train_ids.len() as f64);
        log.epoch_seconds.push(start.elapsed().as_secs_f64());
    }
    log.final_loss = log.epoch_mean_loss.last().copied().unwrap_or(f64::NAN);
    Ok(log)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::generator::{Generator, GeneratorConfig};
    use crate::hypernet::HypernetConfig;
    use crate::world::{build_world, WorldConfig};

    fn tiny_world() -> World {
        build_world(&WorldConfig {
            embed_dim: 8,
            latent_dim: 3,
            n_concepts: 6,
            samples_per_concept: 6,
            source_pool_size: 8,
            seed: 11,
            ..WorldConfig::default()
        })
        .unwrap()
    }

    fn tiny_generator() -> Generator {
        Generator::build(GeneratorConfig {
            input_dim: 8,
            hidden_dims: vec![6, 5],
            output_dim: 4,
            seed: 19,
        })
        .unwrap()
    }

    fn tiny_train_cfg() -> TrainConfig {
        TrainConfig {
            epochs: 2,
            group_size: 2,
            n_workers: 1,
            cond_subset: 3,
            target_subset: 3,
            seed: 23,
            ..TrainConfig::default()
        }
    }

    fn fresh_state(world: &World, g: &Generator) -> HypernetState {
        let cfg = HypernetConfig::for_sites(world.config.embed_dim, g.sites());
        HypernetState::init(cfg, 29).unwrap()
    }

    #[test]
    fn cosine_lr_endpoints_and_midpoint() {
        assert_eq!(cosine_lr(0, 100, 1e-4, 1e-3).unwrap(), 1e-4);
        assert_eq!(cosine_lr(100, 100, 1e-4, 1e-3).unwrap(), 1e-4 * 1e-3);
        let mid = cosine_lr(50, 100, 1e-4, 1e-3).unwrap();
        assert!((mid - (1e-4 + 1e-4 * 1e-3) / 2.0).abs() < 1e-20);
        assert!(cosine_lr(101, 100, 1e-4, 1e-3).is_err());
    }

    #[test]
    fn adamw_zero_gradient_zero_decay_is_a_no_op() {
        let mut params = vec![Tensor::vector(vec![1.0, -2.0])];
        let grads = vec![Tensor::vector(vec![0.0, 0.0])];
        let mut st = AdamState::new(&params);
        adamw_step(&mut params, &grads, &mut st, 1e-3, (0.9, 0.999), 1e-8, 0.0).unwrap();
        assert_eq!(params[0].data(), &[1.0, -2.0]);
    }

    /// Independent scalar reference: one hand-rolled AdamW update.
    #[test]
    fn adamw_single_scalar_matches_reference() {
        let (lr, b1, b2, eps, wd) = (1e-2f64, 0.9f64, 0.999f64, 1e-8f64, 0.0f64);
        let theta0 = 0.7f64;
        let g = 1.0f64;
        // reference, written out step by step
        let m = (1.0 - b1) * g;
        let v = (1.0 - b2) * g * g;
        let m_hat = m / (1.0 - b1);
        let v_hat = v / (1.0 - b2);
        let expect = theta0 - lr * m_hat / (v_hat.sqrt() + eps);

        let mut params = vec![Tensor::scalar(theta0)];
        let grads = vec![Tensor::scalar(g)];
        let mut st = AdamState::new(&params);
        adamw_step(&mut params, &grads, &mut st, lr, (b1, b2), eps, wd).unwrap();
        assert!((params[0].item() - expect).abs() < 1e-15);
        // the bias-corrected first step moves by almost exactly lr
        assert!((params[0].item() - (theta0 - lr)).abs() < 1e-8);
    }

    #[test]
    fn adamw_decoupled_decay_shrinks_parameters() {
        let (lr, wd) = (1e-2, 0.1);
        let mut with_decay = vec![Tensor::scalar(2.0)];
        let mut without = vec![Tensor::scalar(2.0)];
        let grads = vec![Tensor::scalar(0.3)];
        let mut s1 = AdamState::new(&with_decay);
        let mut s2 = AdamState::new(&without);
        adamw_step(&mut with_decay, &grads, &mut s1, lr, (0.9, 0.999), 1e-8, wd).unwrap();
        adamw_step(&mut without, &grads, &mut s2, lr, (0.9, 0.999), 1e-8, 0.0).unwrap();
        let shrink = without[0].item() - with_decay[0].item();
        assert!((shrink - lr * wd * 2.0).abs() < 1e-15);
    }

    #[test]
    fn adamw_rejects_nan_gradients() {
        let mut params = vec![Tensor::scalar(1.0)];
        let grads = vec![Tensor::scalar(f64::NAN)];
        let mut st = AdamState::new(&params);
        let err = adamw_step(&mut params, &grads, &mut st, 1e-3, (0.9, 0.999), 1e-8, 0.0);
        assert!(matches!(err, Err(Error::NonFinite(_))));
    }

    #[test]
    fn train_step_is_reproducible_and_reaches_parameters() {
        let world = tiny_world();
        let g = tiny_generator();
        let state = fresh_state(&world, &g);
        let cfg = tiny_train_cfg();
        let concept = world.concepts_in(Split::Train)[0];
        let (l1, g1) = train_step(&world, &g, &state, concept, &cfg, 0).unwrap();
        let (l2, g2) = train_step(&world, &g, &state, concept, &cfg, 0).unwrap();
        assert_eq!(l1, l2);
        assert_eq!(g1.len(), g2.len());
        let norm: f64 = g1.iter().flat_map(|t| t.data()).map(|x| x * x).sum();
        assert!(norm > 0.0, "no gradient reached any parameter");
        // at least the output projection and adapter receive signal
        assert!(g1.last().unwrap().data().iter().any(|&x| x != 0.0));
    }

    #[test]
    fn train_step_rejects_test_concepts() {
        let world = tiny_world();
        let g = tiny_generator();
        let state = fresh_state(&world, &g);
        let concept = world.concepts_in(Split::Test)[0];
        assert!(train_step(&world, &g, &state, concept, &tiny_train_cfg(), 0).is_err());
    }

    #[test]
    fn fresh_state_loss_equals_identity_intervention_loss() {
        // zero-init output layer predicts the identity, so the first loss is
        // exactly the unintervened alignment gap
        let world = tiny_world();
        let g = tiny_generator();
        let state = fresh_state(&world, &g);
        let cfg = tiny_train_cfg();
        let concept = world.concepts_in(Split::Train)[0];
        let (loss, _) = train_step(&world, &g, &state, concept, &cfg, 0).unwrap();

        let mut r = rng::stream(cfg.seed, &[100, 0, concept.id as u64]);
        let n = concept.samples_text.rows();
        let (_, tgt_idx) = draw_subsets(&mut r, n, cfg.cond_subset, cfg.target_subset);
        let src_idx = draw(&mut r, world.source.samples.rows(), cfg.target_subset);
        let targets = concept.samples_text.select_rows(&tgt_idx);
        let sources = world.source.samples.select_rows(&src_idx);
        let (_, tgt_rec) = g.forward_capture(&targets, None).unwrap();
        let (_, src_rec) = g.forward_capture(&sources, None).unwrap();
        let identity_loss =
            crate::loss::alignment_loss_value(&src_rec, &tgt_rec, &cfg.loss).unwrap();
        assert!((loss - identity_loss).abs() < 1e-12);
    }

    #[test]
    fn zero_epochs_leaves_state_unchanged() {
        let world = tiny_world();
        let g = tiny_generator();
        let mut state = fresh_state(&world, &g);
        let before = serde_json::to_string(&state).unwrap();
        let log = train(&world, &g, &mut state, &TrainConfig {
            epochs: 0,
            ..tiny_train_cfg()
        })
        .unwrap();
        assert_eq!(before, serde_json::to_string(&state).unwrap());
        assert!(log.epoch_mean_loss.is_empty());
    }

    #[test]
    fn lr_trace_matches_formula_exactly() {
        let world = tiny_world();
        let g = tiny_generator();
        let mut state = fresh_state(&world, &g);
        let cfg = tiny_train_cfg();
        let log = train(&world, &g, &mut state, &cfg).unwrap();
        let total = log.lr_trace.len();
        for (step, &lr) in log.lr_trace.iter().enumerate() {
            let expect = cosine_lr(step, total - 1, cfg.lr, cfg.final_lr_factor).unwrap();
            assert_eq!(lr, expect);
        }
        assert_eq!(log.lr_trace[0], cfg.lr);
        assert_eq!(*log.lr_trace.last().unwrap(), cfg.lr * cfg.final_lr_factor);
    }

    #[test]
    fn generator_is_bit_identical_after_training() {
        let world = tiny_world();
        let g = tiny_generator();
        let before = serde_json::to_string(&g).unwrap();
        let mut state = fresh_state(&world, &g);
        train(&world, &g, &mut state, &tiny_train_cfg()).unwrap();
        assert_eq!(before, serde_json::to_string(&g).unwrap());
    }

    #[test]
    fn worker_count_does_not_change_the_trajectory() {
        let world = tiny_world();
        let g = tiny_generator();
        let cfg1 = TrainConfig {
            n_workers: 1,
            ..tiny_train_cfg()
        };
        let cfg2 = TrainConfig {
            n_workers: 2,
            ..tiny_train_cfg()
        };
        let mut s1 = fresh_state(&world, &g);
        let mut s2 = fresh_state(&world, &g);
        train(&world, &g, &mut s1, &cfg1).unwrap();
        train(&world, &g, &mut s2, &cfg2).unwrap();
        assert_eq!(
            serde_json::to_string(&s1).unwrap(),
            serde_json::to_string(&s2).unwrap()
        );
    }

    #[test]
    fn group_gradient_is_the_concept_mean() {
        // one optimizer step with group_size = 2 must consume exactly the
        // arithmetic mean of the two per-concept gradients
        let world = tiny_world();
        let g = tiny_generator();
        let state = fresh_state(&world, &g);
        let mut cfg = tiny_train_cfg();
        cfg.epochs = 1;
        let train_ids: Vec<usize> = world.concepts_in(Split::Train).iter().map(|c| c.id).collect();
        cfg.group_size = train_ids.len(); // one group, one optimizer step

        let mut order = train_ids.clone();
        order.shuffle(&mut rng::stream(cfg.seed, &[200, 0]));
        let first_group: Vec<usize> = order.clone();

        let mut grads = Vec::new();
        for cid in &first_group {
            let (_, gr) = train_step(&world, &g, &state, world.concept(*cid).unwrap(), &cfg, 0).unwrap();
            grads.push(gr);
        }
        let k = grads.len() as f64;
        let mean: Vec<Tensor> = (0..grads[0].len())
            .map(|i| {
                let mut acc = grads[0][i].clone();
                for gr in grads.iter().skip(1) {
                    for (a, b) in acc.data_mut().iter_mut().zip(gr[i].data()) {
                        *a += b;
                    }
                }
                for v in acc.data_mut() {
                    *v /= k;
                }
                acc
            })
            .collect();

        // replicate the optimizer's first step by hand
        let mut expect_params: Vec<Tensor> = state.live_params().to_vec();
        let mut adam = AdamState::new(&expect_params);
        let groups = train_ids.len().div_ceil(cfg.group_size);
        let lr = cosine_lr(0, cfg.epochs * groups - 1, cfg.lr, cfg.final_lr_factor).unwrap();
        adamw_step(&mut expect_params, &mean, &mut adam, lr, cfg.betas, cfg.eps, cfg.weight_decay)
            .unwrap();

        assert_eq!(groups, 1);
        let mut traced = state.clone();
        train(&world, &g, &mut traced, &cfg).unwrap();
        for (a, b) in traced.live_params().iter().zip(&expect_params) {
            assert_eq!(a, b);
        }
    }

    #[test]
    fn ema_decay_does_not_affect_live_parameters() {
        let world = tiny_world();
        let g = tiny_generator();
        let mut s1 = fresh_state(&world, &g);
        let mut s2 = fresh_state(&world, &g);
        let mut cfg1 = tiny_train_cfg();
        let mut cfg2 = tiny_train_cfg();
        cfg1.ema_decay = 0.99;
        cfg2.ema_decay = 0.5;
        train(&world, &g, &mut s1, &cfg1).unwrap();
        train(&world, &g, &mut s2, &cfg2).unwrap();
        assert_eq!(
            serde_json::to_string(&s1.live_params()).unwrap(),
            serde_json::to_string(&s2.live_params()).unwrap()
        );
        assert_ne!(
            serde_json::to_string(&s1.ema_params()).unwrap(),
            serde_json::to_string(&s2.ema_params()).unwrap()
        );
    }

    #[test]
    fn csv_log_has_expected_shape() {
        let world = tiny_world();
        let g = tiny_generator();
        let mut state = fresh_state(&world, &g);
        let log = train(&world, &g, &mut state, &tiny_train_cfg()).unwrap();
        let csv = log.to_csv();
        let lines: Vec<&str> = csv.trim().lines().collect();
        assert_eq!(lines[0], "epoch,mean_loss,lr,seconds");
        assert_eq!(lines.len(), 1 + log.epoch_mean_loss.len());
    }
}

#[cfg(test)]
mod gradient_reach_tests {
    use super::*;
    use crate::generator::{Generator, GeneratorConfig};
    use crate::hypernet::HypernetConfig;
    use crate::world::{build_world, WorldConfig};

    /// After a couple of optimizer steps the zero-initialized output layer
    /// carries signal, and every parameter tensor receives gradient.
    #[test]
    fn every_parameter_eventually_receives_gradient() {
        let world = build_world(&WorldConfig {
            embed_dim: 8,
            latent_dim: 3,
            n_concepts: 6,
            samples_per_concept: 6,
            source_pool_size: 8,
            seed: 11,
            ..WorldConfig::default()
        })
        .unwrap();
        let g = Generator::build(GeneratorConfig {
            input_dim: 8,
            hidden_dims: vec![6, 5],
            output_dim: 4,
            seed: 19,
        })
        .unwrap();
        let cfg = TrainConfig {
            epochs: 2,
            group_size: 2,
            n_workers: 1,
            cond_subset: 3,
            target_subset: 3,
            lr: 1e-2,
            seed: 23,
            ..TrainConfig::default()
        };
        let mut state = HypernetState::init(
            HypernetConfig::for_sites(world.config.embed_dim, g.sites()),
            29,
        )
        .unwrap();
        train(&world, &g, &mut state, &cfg).unwrap();
        let concept = world.concepts_in(Split::Train)[0];
        let (_, grads) = train_step(&world, &g, &state, concept, &cfg, 7).unwrap();
        for (i, t) in grads.iter().enumerate() {
            assert!(
                t.data().iter().any(|&x| x != 0.0),
                "parameter {i} received no gradient"
            );
        }
    }
}
