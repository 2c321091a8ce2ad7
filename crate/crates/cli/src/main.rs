//! `socvae`: generate synthetic data, train model variants, evaluate them and
//! run the collapse diagnostics. Every output is written atomically.

mod settings;

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use rayon::prelude::*;

use socvae::diagnostics::{
    agent_table, aggregate_table, aggregate_trials, ar_curve_table, delta_grid, evaluate_scenes, metrics_table,
    MetricsRow, Requested,
};
use socvae::graph_nets::Aggregator;
use socvae::io::write_atomic;
use socvae::model::{Model, ModelConfig, PreparedScene, Variant};
use socvae::trainer::{log_table, split_validation, train, BetaSchedule, TrainConfig};
use socvae::world::{certificate, generate, read_dataset, write_dataset, ScenarioTemplate, Scene, Template};

use settings::{Settings, UsageError};

#[derive(Parser)]
#[command(name = "socvae", version, about = "Social-CVAE trajectory prediction experiments")]
struct Cli {
    /// TOML file with `key = value` defaults for the subcommand's flags
    /// (top level or under a `[subcommand]` table).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset and print its interactivity certificate.
    GenData(GenData),
    /// Train one variant over several seeded trials.
    Train(Train),
    /// Prediction metrics and collapse diagnostics for a set of checkpoints.
    Evaluate(Evaluate),
    /// Per-agent collapse diagnostics for one checkpoint.
    Diagnose(Diagnose),
}

#[derive(Args)]
struct GenData {
    /// merge, intersection or open-field
    #[arg(long)]
    template: Option<Template>,
    #[arg(long)]
    count: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct Train {
    #[arg(long)]
    data: Option<PathBuf>,
    /// vae, cvae or social-cvae
    #[arg(long)]
    variant: Option<Variant>,
    /// entmax, softmax or max
    #[arg(long)]
    aggregator: Option<Aggregator>,
    /// constant:B, cyclical:B or cyclical:B:CYCLE (default: constant at --beta)
    #[arg(long)]
    beta_schedule: Option<BetaSchedule>,
    #[arg(long)]
    beta: Option<f64>,
    #[arg(long)]
    alpha: Option<f64>,
    #[arg(long)]
    trials: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    learning_rate: Option<f64>,
    #[arg(long)]
    hidden: Option<usize>,
    #[arg(long)]
    latent: Option<usize>,
    /// Fraction of scenes held out for checkpoint selection.
    #[arg(long)]
    val_fraction: Option<f64>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct Evaluate {
    #[arg(long)]
    data: Option<PathBuf>,
    /// Comma-separated checkpoint paths; the position is the trial id.
    #[arg(long, value_delimiter = ',')]
    checkpoints: Option<Vec<PathBuf>>,
    /// Comma-separated sample counts.
    #[arg(long, value_delimiter = ',')]
    k: Option<Vec<usize>>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct Diagnose {
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Comma-separated subset of ar, taug, looade.
    #[arg(long, value_delimiter = ',')]
    metrics: Option<Vec<String>>,
    #[arg(long)]
    out: Option<PathBuf>,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            if e.downcast_ref::<UsageError>().is_some() {
                ExitCode::from(2)
            } else {
                ExitCode::FAILURE
            }
        }
    }
}

fn run(cli: Cli) -> Result<()> {
    let name = match &cli.command {
        Command::GenData(_) => "gen-data",
        Command::Train(_) => "train",
        Command::Evaluate(_) => "evaluate",
        Command::Diagnose(_) => "diagnose",
    };
    let cfg = Settings::load(cli.config.as_deref(), name)?;
    match cli.command {
        Command::GenData(a) => gen_data(a, &cfg),
        Command::Train(a) => train_cmd(a, &cfg),
        Command::Evaluate(a) => evaluate(a, &cfg),
        Command::Diagnose(a) => diagnose(a, &cfg),
    }
}

fn gen_data(a: GenData, cfg: &Settings) -> Result<()> {
    cfg.check_keys(&["template", "count", "seed", "out"])?;
    let template: Template = cfg.require(a.template, "template")?;
    let count: usize = cfg.require(a.count, "count")?;
    let seed: u64 = cfg.pick(a.seed, "seed")?.unwrap_or(0);
    let out: PathBuf = cfg.require(a.out, "out")?;
    if count == 0 {
        return Err(UsageError("--count must be at least 1".into()).into());
    }
    let tpl = ScenarioTemplate::new(template);
    let scenes = generate(&tpl, count, seed)?;
    write_dataset(&out, Some(template), Some(seed), &scenes)?;
    let cert = certificate(&tpl, count, seed)?;
    println!(
        "wrote {count} {template} scenes to {}\ncertificate: mean target FDE under neighbor masking {:.4} m (threshold {} m): {}",
        out.display(),
        cert.mean_fde,
        cert.threshold,
        if cert.passed() { "passed" } else { "FAILED" }
    );
    Ok(())
}

fn load_scenes(path: &Path) -> Result<Vec<Scene>> {
    let scenes = read_dataset(path)?;
    if scenes.is_empty() {
        bail!("{}: dataset is empty", path.display());
    }
    Ok(scenes)
}

fn prepare(scenes: &[Scene]) -> Result<Vec<PreparedScene>> {
    scenes.iter().map(|s| PreparedScene::new(s).map_err(Into::into)).collect()
}

fn train_cmd(a: Train, cfg: &Settings) -> Result<()> {
    cfg.check_keys(&[
        "data",
        "variant",
        "aggregator",
        "beta-schedule",
        "beta",
        "alpha",
        "trials",
        "seed",
        "epochs",
        "batch-size",
        "learning-rate",
        "hidden",
        "latent",
        "val-fraction",
        "out",
    ])?;
    let data: PathBuf = cfg.require(a.data, "data")?;
    let variant: Variant = cfg.require(a.variant, "variant")?;
    let out: PathBuf = cfg.require(a.out, "out")?;
    let trials: usize = cfg.pick(a.trials, "trials")?.unwrap_or(5);
    let seed: u64 = cfg.pick(a.seed, "seed")?.unwrap_or(0);
    let val_fraction: f64 = cfg.pick(a.val_fraction, "val-fraction")?.unwrap_or(0.1);
    if trials == 0 {
        return Err(UsageError("--trials must be at least 1".into()).into());
    }
    if !(0.0..1.0).contains(&val_fraction) {
        return Err(UsageError(format!("--val-fraction must lie in [0, 1), got {val_fraction}")).into());
    }

    let scenes = load_scenes(&data)?;
    let mode = scenes[0].mode;
    let mut model_cfg = ModelConfig::for_mode(mode, variant);
    model_cfg.history = scenes[0].history_len();
    model_cfg.future = scenes[0].future_len();
    if let Some(v) = cfg.pick(a.aggregator, "aggregator")? {
        model_cfg.aggregator = v;
    }
    if let Some(v) = cfg.pick(a.beta, "beta")? {
        model_cfg.beta = v;
    }
    if let Some(v) = cfg.pick(a.alpha, "alpha")? {
        model_cfg.alpha = v;
    }
    if let Some(v) = cfg.pick(a.hidden, "hidden")? {
        model_cfg.hidden = v;
    }
    if let Some(v) = cfg.pick(a.latent, "latent")? {
        model_cfg.latent = v;
    }
    model_cfg.validate().map_err(|e| UsageError(e.to_string()))?;
    let mut train_cfg = TrainConfig::for_mode(mode);
    if let Some(v) = cfg.pick(a.epochs, "epochs")? {
        train_cfg.epochs = v;
    }
    if let Some(v) = cfg.pick(a.batch_size, "batch-size")? {
        train_cfg.batch_size = v;
    }
    if let Some(v) = cfg.pick(a.learning_rate, "learning-rate")? {
        train_cfg.learning_rate = v;
    }
    train_cfg.beta_schedule = cfg.pick(a.beta_schedule, "beta-schedule")?;
    train_cfg.validate().map_err(|e| UsageError(e.to_string()))?;

    let (train_idx, val_idx) = if val_fraction > 0.0 {
        split_validation(scenes.len(), val_fraction, seed)
    } else {
        ((0..scenes.len()).collect(), Vec::new())
    };
    let pick = |idx: &[usize]| -> Vec<Scene> { idx.iter().map(|&i| scenes[i].clone()).collect() };
    let train_set = prepare(&pick(&train_idx))?;
    let val_set = prepare(&pick(&val_idx))?;

    let results: Vec<Result<String>> = (0..trials)
        .into_par_iter()
        .map(|k| {
            let trial_seed = seed.wrapping_add(k as u64);
            let model = Model::new(model_cfg.clone(), trial_seed)?;
            let cfg = TrainConfig {
                seed: trial_seed,
                ..train_cfg.clone()
            };
            let outcome = train(&model, &train_set, &val_set, &cfg, |_| {})?;
            let dir = out.join(format!("trial-{k}"));
            std::fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
            outcome.model.save(&dir.join("final.ckpt"))?;
            outcome.best.save(&dir.join("best.ckpt"))?;
            write_atomic(&dir.join("loss.tsv"), log_table(&outcome.log).as_bytes())?;
            let last = outcome.log.last().expect("at least one epoch");
            Ok(format!(
                "trial {k}: seed {trial_seed}, final train loss {:.6}, best epoch {}",
                last.train.total, outcome.best_epoch
            ))
        })
        .collect();
    for r in results {
        println!("{}", r?);
    }
    Ok(())
}

fn evaluate(a: Evaluate, cfg: &Settings) -> Result<()> {
    cfg.check_keys(&["data", "checkpoints", "k", "seed", "out"])?;
    let data: PathBuf = cfg.require(a.data, "data")?;
    let checkpoints: Vec<PathBuf> = cfg.require(a.checkpoints, "checkpoints")?;
    let ks: Vec<usize> = cfg.pick(a.k, "k")?.unwrap_or_else(|| vec![1, 6]);
    let seed: u64 = cfg.pick(a.seed, "seed")?.unwrap_or(0);
    let out: PathBuf = cfg.require(a.out, "out")?;
    if checkpoints.is_empty() || ks.is_empty() || ks.contains(&0) {
        return Err(UsageError("need at least one checkpoint and sample counts ≥ 1".into()).into());
    }
    let scenes = prepare(&load_scenes(&data)?)?;
    let rows: Vec<Result<MetricsRow>> = checkpoints
        .par_iter()
        .enumerate()
        .map(|(trial, path)| {
            let model = Model::load(path)?;
            let want = Requested {
                ar: model.config.aggregator.has_attention(),
                ..Requested::ALL
            };
            let agents = evaluate_scenes(&model, &scenes, &ks, seed, want)
                .with_context(|| format!("evaluating {}", path.display()))?;
            Ok(MetricsRow::summarize(trial, model.config.variant, model.config.aggregator, &agents)?)
        })
        .collect();
    let rows: Vec<MetricsRow> = rows.into_iter().collect::<Result<_>>()?;

    std::fs::create_dir_all(&out).with_context(|| format!("creating {}", out.display()))?;
    write_atomic(&out.join("metrics.tsv"), metrics_table(&rows).as_bytes())?;
    let mut groups: BTreeMap<(String, String), Vec<MetricsRow>> = BTreeMap::new();
    for r in &rows {
        groups
            .entry((r.variant.to_string(), r.aggregator.to_string()))
            .or_default()
            .push(r.clone());
    }
    let mut agg_text = String::new();
    let deltas = delta_grid();
    for ((variant, aggregator), group) in &groups {
        let agg = aggregate_trials(group)?;
        for line in aggregate_table(&agg).lines() {
            if line.starts_with("metric\t") {
                if agg_text.is_empty() {
                    agg_text.push_str(&format!("variant\taggregator\t{line}\n"));
                }
            } else {
                agg_text.push_str(&format!("{variant}\t{aggregator}\t{line}\n"));
            }
        }
        let curves: Vec<&Vec<f64>> = group.iter().filter_map(|r| r.ar_delta.as_ref()).collect();
        if !curves.is_empty() {
            let mean: Vec<f64> = (0..deltas.len())
                .map(|i| curves.iter().map(|c| c[i]).sum::<f64>() / curves.len() as f64)
                .collect();
            write_atomic(
                &out.join(format!("ar_curve-{variant}-{aggregator}.tsv")),
                ar_curve_table(&deltas, &mean).as_bytes(),
            )?;
        }
    }
    write_atomic(&out.join("aggregate.tsv"), agg_text.as_bytes())?;
    print!("{agg_text}");
    Ok(())
}

fn diagnose(a: Diagnose, cfg: &Settings) -> Result<()> {
    cfg.check_keys(&["data", "checkpoint", "metrics", "out"])?;
    let data: PathBuf = cfg.require(a.data, "data")?;
    let checkpoint: PathBuf = cfg.require(a.checkpoint, "checkpoint")?;
    let metrics: Vec<String> = cfg
        .pick(a.metrics, "metrics")?
        .unwrap_or_else(|| vec!["ar".into(), "taug".into(), "looade".into()]);
    let out: PathBuf = cfg.require(a.out, "out")?;
    let mut want = Requested::NONE;
    for m in &metrics {
        match m.as_str() {
            "ar" => want.ar = true,
            "taug" => want.tau_g = true,
            "looade" => want.loo_ade = true,
            other => return Err(UsageError(format!("unknown metric `{other}` (expected ar, taug or looade)")).into()),
        }
    }
    let model = Model::load(&checkpoint)?;
    if want.ar && !model.config.aggregator.has_attention() {
        return Err(UsageError(format!(
            "metric `ar` needs attention weights, but {} uses {} aggregation",
            checkpoint.display(),
            model.config.aggregator
        ))
        .into());
    }
    let scenes = prepare(&load_scenes(&data)?)?;
    let agents = evaluate_scenes(&model, &scenes, &[1], 0, want)?;
    write_atomic(&out, agent_table(&agents).as_bytes())?;
    let row = MetricsRow::summarize(0, model.config.variant, model.config.aggregator, &agents)?;
    let fmt = |v: Option<f64>| v.map_or("-".to_string(), |x| format!("{x:.6}"));
    println!(
        "{} agents: AR {} %, tau_g {}, looADE {}",
        agents.len(),
        fmt(row.ar),
        fmt(row.tau_g),
        fmt(row.loo_ade)
    );
    Ok(())
}
