//! Command-line pipeline: every subcommand reads one flat config plus
//! `key=value` overrides and writes into a fresh run directory named by the
//! config hash and a timestamp.
//!
//! Outputs are assembled in a hidden staging directory that is renamed into
//! place only when the command finishes, so a failed run leaves nothing
//! behind.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use crate::check::{model_suite, op_suite, CheckResult};
use crate::checkpoint::Checkpoint;
use crate::config::RunConfig;
use crate::context::{ContextKind, ContextViT};
use crate::data::{generate_dataset, DatasetSplit};
use crate::error::{Error, Result};
use crate::eval::{
    batch_size_sweep, collect_context_tokens, compute_metrics, pca_project, run_ablation, separation_score,
    MetricsReport,
};
use crate::numerics::{GradCheckOptions, Tensor};
use crate::train::{fine_tune, linear_probe, MetricRow, TrainMode, TrainReport};

#[derive(Debug, Parser)]
#[command(name = "contextvit", version, about = "Context-conditioned vision transformers on synthetic grouped shift")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate the synthetic dataset (binary file plus JSON manifest).
    GenerateData(RunArgs),
    /// Fine-tune a model and save a checkpoint.
    Train(RunArgs),
    /// Train a fresh linear head on a frozen checkpoint.
    Probe(RunArgs),
    /// Train every configured context kind for every seed.
    Ablate(RunArgs),
    /// Re-evaluate a checkpoint on held-out groups at several evaluation batch sizes.
    Sweep(RunArgs),
    /// Export context tokens of a checkpoint with their PCA projection.
    ExportContext(RunArgs),
    /// Run the finite-difference gradient suite.
    GradCheck(RunArgs),
}

#[derive(Debug, Args)]
pub struct RunArgs {
    /// Flat TOML config file; defaults are used when omitted.
    #[arg(short, long)]
    pub config: Option<PathBuf>,
    /// Overrides in key=value form.
    pub overrides: Vec<String>,
}

impl Command {
    pub fn name(&self) -> &'static str {
        match self {
            Command::GenerateData(_) => "generate-data",
            Command::Train(_) => "train",
            Command::Probe(_) => "probe",
            Command::Ablate(_) => "ablate",
            Command::Sweep(_) => "sweep",
            Command::ExportContext(_) => "export-context",
            Command::GradCheck(_) => "grad-check",
        }
    }

    fn args(&self) -> &RunArgs {
        match self {
            Command::GenerateData(a)
            | Command::Train(a)
            | Command::Probe(a)
            | Command::Ablate(a)
            | Command::Sweep(a)
            | Command::ExportContext(a)
            | Command::GradCheck(a) => a,
        }
    }
}

/// Where a finished command left its outputs, and whether its checks passed.
#[derive(Debug)]
pub struct Outcome {
    pub run_dir: PathBuf,
    pub success: bool,
}

pub fn load_config(args: &RunArgs) -> Result<RunConfig> {
    match &args.config {
        Some(path) => RunConfig::load(path, &args.overrides),
        None => RunConfig::parse("", &args.overrides),
    }
}

/// Parses the config, runs the command in a staging directory and moves
/// the outputs into place.
pub fn dispatch(command: &Command) -> Result<Outcome> {
    let cfg = load_config(command.args())?;
    let root = PathBuf::from(&cfg.output_dir);
    fs::create_dir_all(&root).map_err(|e| Error::io(&root, e))?;
    let stamp = SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0);
    let staging = root.join(format!(".{}-{stamp}-{}.partial", cfg.short_hash(), std::process::id()));
    fs::create_dir_all(&staging).map_err(|e| Error::io(&staging, e))?;

    let result = execute(command, &cfg, &staging);
    let success = match result {
        Ok(s) => s,
        Err(e) => {
            let _ = fs::remove_dir_all(&staging);
            return Err(e);
        }
    };
    let run_dir = unique_dir(&root, &format!("{}-{stamp}", cfg.short_hash()));
    fs::rename(&staging, &run_dir).map_err(|e| Error::io(&run_dir, e))?;
    Ok(Outcome { run_dir, success })
}

fn unique_dir(root: &Path, base: &str) -> PathBuf {
    let first = root.join(base);
    if !first.exists() {
        return first;
    }
    (1..)
        .map(|i| root.join(format!("{base}-{i}")))
        .find(|p| !p.exists())
        .expect("some suffix is free")
}

#[derive(Serialize)]
struct RunInfo<'a> {
    command: &'a str,
    config_hash: String,
    seed: u64,
    crate_version: &'static str,
}

fn execute(command: &Command, cfg: &RunConfig, dir: &Path) -> Result<bool> {
    write(dir, "config.toml", cfg.resolved())?;
    let info = RunInfo {
        command: command.name(),
        config_hash: cfg.content_hash(),
        seed: cfg.seed,
        crate_version: env!("CARGO_PKG_VERSION"),
    };
    write_json(dir, "run.json", &info)?;
    match command {
        Command::GenerateData(_) => {
            let data = generate_dataset(&cfg.spec(), cfg.data_seed)?;
            data.save(dir, "dataset")?;
            Ok(true)
        }
        Command::Train(_) => train(cfg, dir),
        Command::Probe(_) => probe(cfg, dir),
        Command::Ablate(_) => ablate(cfg, dir),
        Command::Sweep(_) => sweep(cfg, dir),
        Command::ExportContext(_) => export_context(cfg, dir),
        Command::GradCheck(_) => grad_check(cfg, dir),
    }
}

fn write(dir: &Path, name: &str, text: impl AsRef<[u8]>) -> Result<()> {
    let path = dir.join(name);
    fs::write(&path, text).map_err(|e| Error::io(&path, e))
}

fn write_json<T: Serialize>(dir: &Path, name: &str, value: &T) -> Result<()> {
    write(dir, name, serde_json::to_string_pretty(value)?)
}

fn write_csv<T: Serialize>(dir: &Path, name: &str, rows: &[T]) -> Result<()> {
    let path = dir.join(name);
    let mut w = csv::Writer::from_path(&path).map_err(|e| Error::Serde(format!("{}: {e}", path.display())))?;
    for r in rows {
        w.serialize(r).map_err(|e| Error::Serde(format!("{}: {e}", path.display())))?;
    }
    w.flush().map_err(|e| Error::io(&path, e))
}

/// Writes a CSV with explicit header and rows of strings.
fn write_table(dir: &Path, name: &str, header: &[String], rows: &[Vec<String>]) -> Result<()> {
    let path = dir.join(name);
    let err = |e: csv::Error| Error::Serde(format!("{}: {e}", path.display()));
    let mut w = csv::Writer::from_path(&path).map_err(err)?;
    w.write_record(header).map_err(err)?;
    for r in rows {
        w.write_record(r).map_err(err)?;
    }
    w.flush().map_err(|e| Error::io(&path, e))
}

/// Loads the configured dataset file, or generates one from the data keys.
pub fn dataset(cfg: &RunConfig) -> Result<DatasetSplit> {
    let data = if cfg.dataset.is_empty() {
        generate_dataset(&cfg.spec(), cfg.data_seed)?
    } else {
        DatasetSplit::load(Path::new(&cfg.dataset))?
    };
    let s = &data.spec;
    if (s.image_h, s.image_w, s.channels, s.num_classes) != (cfg.image_h, cfg.image_w, cfg.channels, cfg.num_classes) {
        return Err(Error::Config(format!(
            "dataset is {}x{}x{} with {} classes, config expects {}x{}x{} with {}",
            s.image_h, s.image_w, s.channels, s.num_classes, cfg.image_h, cfg.image_w, cfg.channels, cfg.num_classes
        )));
    }
    Ok(data)
}

fn kind_with_options(cfg: &RunConfig, name: &str) -> Result<ContextKind> {
    let kind: ContextKind = name.parse()?;
    Ok(kind.with_ema_lambda(cfg.ema_lambda).with_context_patches(cfg.context_patches))
}

/// Rebuilds the model stored in the configured checkpoint. The kind comes
/// from the checkpoint; architecture from the config.
pub fn load_model(cfg: &RunConfig, data: &DatasetSplit) -> Result<ContextViT> {
    let path = cfg
        .checkpoint_path()
        .ok_or_else(|| Error::Config("this command needs checkpoint = \"<path>\"".into()))?;
    let ck = Checkpoint::load(&path)?;
    let kind = kind_with_options(cfg, &ck.kind)?;
    let mut model = ContextViT::new(cfg.vit(), kind, &data.spec.train_group_ids(), cfg.seed)?;
    ck.apply_to(&mut model)
        .map_err(|e| Error::Checkpoint(format!("{}: {e}", path.display())))?;
    Ok(model)
}

fn metric_rows(report: &MetricsReport, epoch: usize, cfg_seed: u64, kind: &str) -> Vec<MetricRow> {
    let mut rows = Vec::new();
    let row = |split: &str, metric: &str, value: f64| MetricRow {
        epoch,
        split: split.to_string(),
        metric: metric.to_string(),
        value,
        seed: cfg_seed,
        kind: kind.to_string(),
    };
    for s in &report.splits {
        rows.push(row(&s.split, "final_accuracy", s.accuracy));
        rows.push(row(&s.split, "final_worst_group_accuracy", s.worst_group));
    }
    rows.push(row("ood_test", "ood_gap", report.ood_gap));
    rows
}

#[derive(Serialize)]
struct TrainSummary<'a> {
    config_hash: String,
    report: &'a TrainReport,
    metrics: &'a MetricsReport,
    #[serde(skip_serializing_if = "Option::is_none")]
    backbone_unchanged: Option<bool>,
}

fn finish_training(
    cfg: &RunConfig,
    dir: &Path,
    model: &ContextViT,
    data: &DatasetSplit,
    report: &TrainReport,
    checkpoint_name: &str,
    backbone_unchanged: Option<bool>,
) -> Result<()> {
    let metrics = compute_metrics(model, data, cfg.eval_batch_size)?;
    let mut rows = report.rows.clone();
    rows.extend(metric_rows(&metrics, report.best_epoch, cfg.seed, &report.kind));
    write_csv(dir, "metrics.csv", &rows)?;
    let summary = TrainSummary {
        config_hash: cfg.content_hash(),
        report: &TrainReport { rows: Vec::new(), ..report.clone() },
        metrics: &metrics,
        backbone_unchanged,
    };
    write_json(dir, "summary.json", &summary)?;
    Checkpoint::from_model(model, &cfg.content_hash(), None).save(&dir.join(checkpoint_name))
}

fn train(cfg: &RunConfig, dir: &Path) -> Result<bool> {
    let data = dataset(cfg)?;
    let mut model = ContextViT::new(cfg.vit(), cfg.context_kind()?, &data.spec.train_group_ids(), cfg.seed)?;
    let report = match cfg.mode {
        TrainMode::Finetune => fine_tune(&mut model, &data, &cfg.train())?,
        TrainMode::Probe => linear_probe(&mut model, &data, &cfg.probe())?,
    };
    finish_training(cfg, dir, &model, &data, &report, "checkpoint.bin", None)?;
    Ok(true)
}

fn probe(cfg: &RunConfig, dir: &Path) -> Result<bool> {
    let data = dataset(cfg)?;
    let mut model = load_model(cfg, &data)?;
    let frozen: Vec<Tensor> = frozen_params(&model);
    let report = linear_probe(&mut model, &data, &cfg.probe())?;
    let unchanged = frozen == frozen_params(&model);
    finish_training(cfg, dir, &model, &data, &report, "probe_checkpoint.bin", Some(unchanged))?;
    Ok(unchanged)
}

fn frozen_params(model: &ContextViT) -> Vec<Tensor> {
    model
        .params
        .ids()
        .filter(|&id| !model.is_head_param(id))
        .map(|id| model.params.get(id).clone())
        .collect()
}

fn ablate(cfg: &RunConfig, dir: &Path) -> Result<bool> {
    let data = dataset(cfg)?;
    let kinds = cfg.ablation_kind_list()?;
    let seeds = cfg.ablation_seed_list()?;
    let table = run_ablation(&data, &cfg.vit(), &cfg.train(), &kinds, &seeds, |run| {
        eprintln!(
            "{:32} seed {:3}  id {:.4}  ood {:.4}  {:.1}s{}",
            run.kind,
            run.seed,
            run.id_accuracy,
            run.ood_accuracy,
            run.wall_seconds,
            run.error.as_deref().map(|e| format!("  FAILED: {e}")).unwrap_or_default()
        );
    })?;
    write_csv(dir, "ablation.csv", &table.rows)?;
    write_csv(dir, "ablation_runs.csv", &table.runs)?;
    write_json(dir, "ablation.json", &table)?;
    Ok(table.runs.iter().all(|r| r.error.is_none()))
}

fn sweep(cfg: &RunConfig, dir: &Path) -> Result<bool> {
    let data = dataset(cfg)?;
    let model = load_model(cfg, &data)?;
    let points = batch_size_sweep(&model, &data.ood_test, &cfg.sweep_size_list()?)?;
    let header = ["batch_size", "accuracy", "worst_group_accuracy"].map(String::from);
    let rows: Vec<Vec<String>> = points
        .iter()
        .map(|p| {
            vec![
                p.batch_size.to_string(),
                p.metrics.accuracy.to_string(),
                p.metrics.worst_group.to_string(),
            ]
        })
        .collect();
    write_table(dir, "sweep.csv", &header, &rows)?;
    write_json(dir, "sweep.json", &points)?;
    Ok(true)
}

#[derive(Serialize)]
struct ExportSummary {
    kind: String,
    layer: usize,
    tokens: usize,
    explained_ratio: Vec<f64>,
    zero_variance_components: usize,
    separation: crate::eval::Separation,
}

fn export_context(cfg: &RunConfig, dir: &Path) -> Result<bool> {
    let data = dataset(cfg)?;
    let model = load_model(cfg, &data)?;
    let mut rows = Vec::new();
    let mut groups = Vec::new();
    let mut splits = Vec::new();
    for split in [&data.id_test, &data.ood_test] {
        let t = collect_context_tokens(
            &model,
            split,
            cfg.export_layer,
            cfg.export_batches_per_group,
            cfg.export_batch_size,
            cfg.seed,
        )?;
        let d = model.config.dim;
        for (i, g) in t.groups.iter().enumerate() {
            rows.push(t.tokens.data()[i * d..(i + 1) * d].to_vec());
            groups.push(*g);
            splits.push(split.name.clone());
        }
    }
    let tokens = Tensor::from_rows(&rows)?;
    let k = cfg.pca_components.min(model.config.dim);
    let pca = pca_project(&tokens, k)?;
    let separation = separation_score(&tokens, &groups)?;

    let mut header = vec!["split".to_string(), "group".to_string()];
    header.extend((0..model.config.dim).map(|j| format!("t{j}")));
    let token_rows: Vec<Vec<String>> = rows
        .iter()
        .zip(&groups)
        .zip(&splits)
        .map(|((r, g), s)| {
            let mut out = vec![s.clone(), g.to_string()];
            out.extend(r.iter().map(f64::to_string));
            out
        })
        .collect();
    write_table(dir, "context_tokens.csv", &header, &token_rows)?;

    let mut header = vec!["split".to_string(), "group".to_string()];
    header.extend((1..=k).map(|j| format!("pc{j}")));
    let pca_rows: Vec<Vec<String>> = (0..rows.len())
        .map(|i| {
            let mut out = vec![splits[i].clone(), groups[i].to_string()];
            out.extend(pca.projections.data()[i * k..(i + 1) * k].iter().map(f64::to_string));
            out
        })
        .collect();
    write_table(dir, "pca.csv", &header, &pca_rows)?;
    write_json(
        dir,
        "context_summary.json",
        &ExportSummary {
            kind: model.kind.to_string(),
            layer: cfg.export_layer,
            tokens: rows.len(),
            explained_ratio: pca.explained_ratio.clone(),
            zero_variance_components: pca.zero_variance,
            separation,
        },
    )?;
    Ok(true)
}

fn grad_check(cfg: &RunConfig, dir: &Path) -> Result<bool> {
    let ops = GradCheckOptions {
        step: cfg.grad_check_step,
        seed: cfg.seed,
        ..GradCheckOptions::default()
    };
    let models = GradCheckOptions {
        max_coords_per_param: Some(cfg.grad_check_coords),
        ..ops.clone()
    };
    let mut results: Vec<CheckResult> = op_suite(&ops, cfg.grad_check_tolerance)?;
    results.extend(model_suite(&models, cfg.grad_check_tolerance)?);
    for r in &results {
        eprintln!(
            "{} {:40} max rel error {:.3e} over {} coordinates",
            if r.passed { "ok  " } else { "FAIL" },
            r.name,
            r.max_rel_error,
            r.checked
        );
    }
    write_csv(dir, "grad_check.csv", &results)?;
    Ok(results.iter().all(|r| r.passed))
}
