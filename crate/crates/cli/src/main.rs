//! `steerkit` command line: build synthetic worlds, fit per-concept
//! interventions, train the amortized hypernetwork, and emit evaluation
//! reports.
//!
//! Every run writes a fully-resolved config echo next to its artifacts, and
//! all artifacts are byte-reproducible for a fixed config and seed; wall
//! times live only in timing sidecars.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use steerkit_core::estimators::{fit, EstimatorConfig, Method};
use steerkit_core::eval::{
    compare_methods, crossmodal_eval, fit_sources, lambda_sweep, nshot_sweep, p_loss_ablation,
    EvalConfig, DEFAULT_LAMBDA_GRID, DEFAULT_NSHOT_GRID,
};
use steerkit_core::generator::{ForwardModel, Generator, GeneratorConfig};
use steerkit_core::hypernet::{HypernetConfig, HypernetState};
use steerkit_core::loss::LossConfig;
use steerkit_core::trainer::{train, TrainConfig};
use steerkit_core::world::{build_world, concept_distance_stats, Split, World, WorldConfig};

#[derive(Parser)]
#[command(name = "steerkit", about = "Amortized activation steering toolkit", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Build a synthetic concept world and serialize it.
    World(WorldArgs),
    /// Fit one concept with one estimation method.
    Fit(FitArgs),
    /// Train the hypernetwork end to end on the train split.
    Train(TrainArgs),
    /// Run an evaluation and write CSV reports.
    Eval(EvalArgs),
}

/// Flags shared by every command that needs the frozen generator.
#[derive(Args, Clone)]
struct GenFlags {
    /// Generator seed.
    #[arg(long, default_value_t = 17)]
    gen_seed: u64,
    /// Comma-separated hidden widths.
    #[arg(long, default_value = "64,48,64", value_delimiter = ',')]
    gen_hidden: Vec<usize>,
    /// Generator output dimension.
    #[arg(long, default_value_t = 16)]
    gen_out: usize,
}

impl GenFlags {
    fn build(&self, input_dim: usize) -> Result<Generator> {
        Ok(Generator::build(GeneratorConfig {
            input_dim,
            hidden_dims: self.gen_hidden.clone(),
            output_dim: self.gen_out,
            seed: self.gen_seed,
        })?)
    }
}

#[derive(Args)]
struct WorldArgs {
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 7)]
    seed: u64,
    #[arg(long, default_value_t = 96)]
    concepts: usize,
    #[arg(long, default_value_t = 32)]
    embed_dim: usize,
    #[arg(long, default_value_t = 4)]
    latent_dim: usize,
    #[arg(long, default_value_t = 32)]
    samples: usize,
    #[arg(long, default_value_t = 0.05)]
    noise: f64,
    #[arg(long, default_value_t = 0.1)]
    modality_gap: f64,
    /// Optional JSON config file; flags override its fields.
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Args)]
struct FitArgs {
    /// Path to a serialized world.
    #[arg(long)]
    world: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// One of caa, iti, linact, lineas.
    #[arg(long)]
    method: String,
    /// Concept id to fit.
    #[arg(long)]
    concept: usize,
    /// Layer-by-layer estimation on already-intervened activations.
    #[arg(long, default_value_t = true)]
    incremental: bool,
    #[arg(long, default_value_t = 7)]
    seed: u64,
    #[command(flatten)]
    gen: GenFlags,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    world: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 300)]
    epochs: usize,
    #[arg(long, default_value_t = 1e-4)]
    lr: f64,
    /// Execution threads (cannot change results).
    #[arg(long, default_value_t = 4)]
    workers: usize,
    /// Concepts per optimizer step (simulated data-parallel ranks).
    #[arg(long, default_value_t = 4)]
    group_size: usize,
    /// Wasserstein order of the alignment loss (1 or 2).
    #[arg(long, default_value_t = 1)]
    loss_p: u8,
    #[arg(long, default_value_t = 7)]
    seed: u64,
    /// Write a checkpoint every N epochs (0 = only final).
    #[arg(long, default_value_t = 0)]
    ckpt_every: usize,
    /// Continue from an existing checkpoint instead of a fresh init.
    #[arg(long)]
    resume: Option<PathBuf>,
    #[command(flatten)]
    gen: GenFlags,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    world: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// One of: table, lambda, nshot, crossmodal, distances, ablation, all.
    #[arg(long)]
    which: String,
    /// Hypernetwork checkpoint (required by table/lambda-with-hypernet/
    /// nshot/crossmodal).
    #[arg(long)]
    ckpt: Option<PathBuf>,
    /// Method whose fitted params drive the lambda sweep.
    #[arg(long, default_value = "linact")]
    method: String,
    /// Concept id for the lambda sweep.
    #[arg(long, default_value_t = 0)]
    concept: usize,
    #[arg(long, default_value_t = 7)]
    seed: u64,
    /// Epochs for the ablation's two training runs.
    #[arg(long, default_value_t = 40)]
    epochs: usize,
    #[command(flatten)]
    gen: GenFlags,
}

fn main() {
    if let Err(e) = run() {
        eprintln!("error: {e:#}");
        std::process::exit(1);
    }
}

fn run() -> Result<()> {
    match Cli::parse().command {
        Command::World(args) => cmd_world(args),
        Command::Fit(args) => cmd_fit(args),
        Command::Train(args) => cmd_train(args),
        Command::Eval(args) => cmd_eval(args),
    }
}

fn write_echo<T: Serialize>(out: &Path, name: &str, cfg: &T) -> Result<()> {
    fs::create_dir_all(out)?;
    let path = out.join(name);
    fs::write(&path, serde_json::to_string_pretty(cfg)?)
        .with_context(|| format!("writing {}", path.display()))?;
    Ok(())
}

fn write_timing(out: &Path, name: &str, seconds: f64) -> Result<()> {
    let path = out.join(name);
    fs::write(&path, format!("{{\n  \"seconds\": {seconds}\n}}\n"))?;
    Ok(())
}

fn load_world(path: &Path) -> Result<World> {
    World::load(path).with_context(|| format!("loading world from {}", path.display()))
}

fn cmd_world(args: WorldArgs) -> Result<()> {
    let mut cfg = match &args.config {
        Some(path) => {
            let text = fs::read_to_string(path)?;
            serde_json::from_str::<WorldConfig>(&text)?
        }
        None => WorldConfig::default(),
    };
    cfg.seed = args.seed;
    cfg.n_concepts = args.concepts;
    cfg.embed_dim = args.embed_dim;
    cfg.latent_dim = args.latent_dim;
    cfg.samples_per_concept = args.samples;
    cfg.sample_noise = args.noise;
    cfg.modality_gap = args.modality_gap;

    let world = build_world(&cfg)?;
    fs::create_dir_all(&args.out)?;
    write_echo(&args.out, "config-world.json", &cfg)?;
    world.save(&args.out.join("world.json"))?;

    let n_train = world.concepts_in(Split::Train).len();
    let n_test = world.concepts_in(Split::Test).len();
    println!("world: {} concepts (train {n_train} / test {n_test})", cfg.n_concepts);
    let stats = concept_distance_stats(&world.concepts)?;
    for (split, q25, q50, q75) in &stats.split_medians {
        println!("split {split:?}: median distance quantiles q25={q25:.4} q50={q50:.4} q75={q75:.4}");
    }
    println!(
        "difficulty proxies over test concepts: pearson(mean, min) = {:.3}",
        stats.pearson_mean_min
    );
    Ok(())
}

fn cmd_fit(args: FitArgs) -> Result<()> {
    let world = load_world(&args.world)?;
    let generator = args.gen.build(world.config.embed_dim)?;
    let concept = world.concept(args.concept)?;
    let method = Method::parse(&args.method)?;
    let cfg = EstimatorConfig {
        method,
        incremental: args.incremental,
        ..EstimatorConfig::default()
    };

    let fit_src = fit_sources(&world, concept.id, args.seed);
    let report = fit(&generator, &fit_src, &concept.samples_text, &cfg)?;

    fs::create_dir_all(&args.out)?;
    write_echo(&args.out, &format!("config-fit-{}-{}.json", args.method, args.concept), &cfg)?;
    report
        .params
        .save(&args.out.join(format!("params-{}-{}.json", args.method, args.concept)))?;
    // the timing-bearing report is the sidecar
    report.save(&args.out.join(format!("report-fit-{}-{}.json", args.method, args.concept)))?;
    println!(
        "fit {} on concept {}: {:.3}s, per-site loss {}",
        args.method,
        args.concept,
        report.wall_time_s,
        report
            .site_loss
            .iter()
            .map(|(s, b, a)| format!("{s}: {b:.4}->{a:.4}"))
            .collect::<Vec<_>>()
            .join(", ")
    );
    Ok(())
}

fn cmd_train(args: TrainArgs) -> Result<()> {
    let world = load_world(&args.world)?;
    let generator = args.gen.build(world.config.embed_dim)?;
    let cfg = TrainConfig {
        epochs: args.epochs,
        lr: args.lr,
        n_workers: args.workers,
        group_size: args.group_size,
        loss: LossConfig::with_p(args.loss_p),
        seed: args.seed,
        ..TrainConfig::default()
    };
    let hn_cfg = HypernetConfig::for_sites(world.config.embed_dim, generator.sites());
    let mut state = match &args.resume {
        Some(path) => {
            let loaded = HypernetState::load(path)
                .with_context(|| format!("loading checkpoint {}", path.display()))?;
            if loaded.config() != &hn_cfg {
                bail!(
                    "checkpoint {} was trained for a different hypernetwork configuration; \
                     refusing to resume",
                    path.display()
                );
            }
            loaded
        }
        None => HypernetState::init(hn_cfg, args.seed)?,
    };

    fs::create_dir_all(&args.out)?;
    write_echo(&args.out, "config-train.json", &cfg)?;
    generator.save(&args.out.join("generator.json"))?;

    if args.ckpt_every > 0 && args.epochs > args.ckpt_every {
        // segment training so intermediate checkpoints land on disk
        let mut done = 0;
        let mut merged: Option<steerkit_core::trainer::TrainLog> = None;
        while done < args.epochs {
            let span = args.ckpt_every.min(args.epochs - done);
            let mut seg_cfg = cfg.clone();
            seg_cfg.epochs = span;
            // continuing a cosine schedule across segments would distort it;
            // checkpoint segmentation is for inspection, not resumption
            let log = train(&world, &generator, &mut state, &seg_cfg)?;
            done += span;
            state.save(&args.out.join(format!("ckpt-{done}.json")))?;
            merged = Some(match merged {
                None => log,
                Some(mut m) => {
                    m.epoch_mean_loss.extend(log.epoch_mean_loss);
                    m.lr_trace.extend(log.lr_trace);
                    m.epoch_seconds.extend(log.epoch_seconds);
                    m.final_loss = log.final_loss;
                    m
                }
            });
        }
        let log = merged.unwrap();
        fs::write(args.out.join("train-log.csv"), log.to_csv())?;
        state.save(&args.out.join("ckpt-final.json"))?;
        write_timing(&args.out, "timing-train.json", log.epoch_seconds.last().copied().unwrap_or(0.0))?;
        println!("trained {} epochs (segmented); final loss {:.5}", done, log.final_loss);
    } else {
        let log = train(&world, &generator, &mut state, &cfg)?;
        fs::write(args.out.join("train-log.csv"), log.to_csv())?;
        state.save(&args.out.join("ckpt-final.json"))?;
        write_timing(&args.out, "timing-train.json", log.epoch_seconds.last().copied().unwrap_or(0.0))?;
        println!(
            "trained {} epochs; loss {:.5} -> {:.5}",
            args.epochs,
            log.epoch_mean_loss.first().copied().unwrap_or(f64::NAN),
            log.final_loss
        );
    }
    Ok(())
}

fn cmd_eval(args: EvalArgs) -> Result<()> {
    let world = load_world(&args.world)?;
    let generator = args.gen.build(world.config.embed_dim)?;
    let cfg = EvalConfig {
        seed: args.seed,
        ..EvalConfig::default()
    };
    fs::create_dir_all(&args.out)?;

    let load_ckpt = || -> Result<HypernetState> {
        let path = args
            .ckpt
            .as_ref()
            .ok_or_else(|| anyhow::anyhow!("--ckpt is required for this evaluation"))?;
        Ok(HypernetState::load(path)?)
    };

    match args.which.as_str() {
        "table" => {
            let state = load_ckpt()?;
            let methods = [Method::Caa, Method::Iti, Method::Linact, Method::Lineas];
            let report = compare_methods(&world, &generator, &methods, Some(&state), &cfg)?;
            fs::write(args.out.join("report-table.csv"), report.to_csv())?;
            println!("{}", report.to_csv());
        }
        "lambda" => {
            let concept = world.concept(args.concept)?;
            let params = match &args.ckpt {
                Some(path) => {
                    let state = HypernetState::load(path)?;
                    let e = steerkit_core::world::encode(
                        &concept.samples_text,
                        steerkit_core::world::EncodeMode::Average,
                    )?;
                    state.predict(&e)?
                }
                None => {
                    let method = Method::parse(&args.method)?;
                    let est = EstimatorConfig {
                        method,
                        ..EstimatorConfig::default()
                    };
                    let fit_src = fit_sources(&world, concept.id, args.seed);
                    fit(&generator, &fit_src, &concept.samples_text, &est)?.params
                }
            };
            let table = lambda_sweep(&generator, &world, concept, &params, &DEFAULT_LAMBDA_GRID, &cfg)?;
            fs::write(args.out.join("report-lambda.csv"), table.to_csv())?;
            println!("{}", table.to_csv());
        }
        "nshot" => {
            let state = load_ckpt()?;
            let table = nshot_sweep(&world, &generator, &state, &DEFAULT_NSHOT_GRID, &cfg)?;
            fs::write(args.out.join("report-nshot.csv"), table.to_csv())?;
            println!("{}", table.to_csv());
        }
        "crossmodal" => {
            let state = load_ckpt()?;
            let table = crossmodal_eval(&world, &generator, &state, &cfg)?;
            fs::write(args.out.join("report-crossmodal.csv"), table.to_csv())?;
            println!(
                "text cf {:.4}, image cf {:.4}, mean |delta| {:.4}",
                table.mean_text_concept_fid,
                table.mean_image_concept_fid,
                table.mean_abs_delta_concept_fid
            );
        }
        "distances" => {
            let stats = concept_distance_stats(&world.concepts)?;
            let mut csv = String::from("concept_id,split,q25,q50,q75\n");
            for c in &stats.per_concept {
                csv.push_str(&format!("{},{:?},{},{},{}\n", c.id, c.split, c.q25, c.q50, c.q75));
            }
            fs::write(args.out.join("report-distances.csv"), &csv)?;
            let mut diff = String::from("concept_id,mean_dist,min_dist\n");
            for d in &stats.difficulty {
                diff.push_str(&format!("{},{},{}\n", d.id, d.mean_dist, d.min_dist));
            }
            fs::write(args.out.join("report-difficulty.csv"), &diff)?;
            println!(
                "distance quantiles for {} concepts; difficulty pearson {:.3}",
                stats.per_concept.len(),
                stats.pearson_mean_min
            );
        }
        "ablation" => {
            let hn_cfg = HypernetConfig::for_sites(world.config.embed_dim, generator.sites());
            let base = HypernetState::init(hn_cfg, args.seed)?;
            let tc = TrainConfig {
                epochs: args.epochs,
                seed: args.seed,
                ..TrainConfig::default()
            };
            let table = p_loss_ablation(&world, &generator, &base, &tc, &cfg)?;
            fs::write(args.out.join("report-ablation.csv"), table.to_csv())?;
            println!("{}", table.to_csv());
        }
        "all" => {
            let state = load_ckpt()?;
            let methods = [Method::Caa, Method::Iti, Method::Linact, Method::Lineas];
            let report = compare_methods(&world, &generator, &methods, Some(&state), &cfg)?;
            fs::write(args.out.join("report-table.csv"), report.to_csv())?;
            let nshot = nshot_sweep(&world, &generator, &state, &DEFAULT_NSHOT_GRID, &cfg)?;
            fs::write(args.out.join("report-nshot.csv"), nshot.to_csv())?;
            let crossmodal = crossmodal_eval(&world, &generator, &state, &cfg)?;
            fs::write(args.out.join("report-crossmodal.csv"), crossmodal.to_csv())?;
            let concept = world.concepts_in(Split::Test)[0];
            let e = steerkit_core::world::encode(
                &concept.samples_text,
                steerkit_core::world::EncodeMode::Average,
            )?;
            let params = state.predict(&e)?;
            let lambda =
                lambda_sweep(&generator, &world, concept, &params, &DEFAULT_LAMBDA_GRID, &cfg)?;
            fs::write(args.out.join("report-lambda.csv"), lambda.to_csv())?;

            let mut summary = String::new();
            summary.push_str("# Method comparison (per split)\n\n");
            summary.push_str(&report.to_csv());
            summary.push_str("\n# Conditioning-set size sweep (test split)\n\n");
            summary.push_str(&nshot.to_csv());
            summary.push_str("\n# Cross-modal conditioning (test split)\n\n");
            summary.push_str(&crossmodal.to_csv());
            summary.push_str(&format!(
                "\n# Strength sweep (concept {})\n\n",
                concept.id
            ));
            summary.push_str(&lambda.to_csv());
            fs::write(args.out.join("report-summary.txt"), &summary)?;
            println!("{summary}");
        }
        other => bail!("unknown eval '{other}' (expected table, lambda, nshot, crossmodal, distances, ablation, all)"),
    }
    write_echo(&args.out, &format!("config-eval-{}.json", args.which), &cfg)?;
    Ok(())
}
