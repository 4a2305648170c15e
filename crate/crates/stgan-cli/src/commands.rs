//! Subcommand implementations and error-to-exit-code mapping.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use stgan_core::bench::{backtest, generate_virtual_windows, BenchError};
use stgan_core::config::{ConfigError, DataSource, RunConfig};
use stgan_core::data::{load_csv, synth_panel, DataError, TimeSeriesPanel};
use stgan_core::metrics::{improvement_rate, ImprovementEntry, MetricReport, MetricsError};
use stgan_core::train::{
    load_checkpoint, save_checkpoint, train_with, Checkpoint, TrainError, TrainEvent,
};

use crate::lock::DirLock;
use crate::{Cli, Command};

pub enum CliError {
    Config(String),
    Runtime {
        name: &'static str,
        message: String,
    },
}

fn rt(name: &'static str, message: impl std::fmt::Display) -> CliError {
    CliError::Runtime {
        name,
        message: message.to_string(),
    }
}

impl From<ConfigError> for CliError {
    fn from(e: ConfigError) -> Self {
        CliError::Config(e.to_string())
    }
}

impl From<DataError> for CliError {
    fn from(e: DataError) -> Self {
        let name = match &e {
            DataError::MalformedHeader(_) => "MalformedHeader",
            DataError::NonMonotonicDates { .. } => "NonMonotonicDates",
            DataError::UnevenSpacing { .. } => "UnevenSpacing",
            DataError::NegativeValue { .. } => "NegativeValue",
            DataError::CellParse { .. } => "CellParse",
            DataError::RaggedRow { .. } => "RaggedRow",
            DataError::InvalidSpec(_) => "InvalidSpec",
            DataError::WindowTooLong { .. } => "WindowTooLong",
            DataError::InvalidPanel(_) => "InvalidPanel",
            DataError::Io(_) => "Io",
            DataError::Csv(_) => "Csv",
        };
        rt(name, e)
    }
}

impl From<TrainError> for CliError {
    fn from(e: TrainError) -> Self {
        let name = match &e {
            TrainError::Divergence { .. } => "DivergenceDetected",
            TrainError::InvalidSetup(_) => "InvalidSetup",
            TrainError::VersionMismatch { .. } => "VersionMismatch",
            TrainError::CorruptCheckpoint(_) => "CorruptCheckpoint",
            TrainError::IncompatibleCheckpoint(_) => "IncompatibleCheckpoint",
            TrainError::Data(_) => "Data",
            TrainError::Predictor(_) => "Predictor",
            TrainError::Stgan(_) => "Stgan",
            TrainError::Spatial(_) => "Spatial",
            TrainError::Io(_) => "Io",
        };
        rt(name, e)
    }
}

impl From<BenchError> for CliError {
    fn from(e: BenchError) -> Self {
        let name = match &e {
            BenchError::SeasonTooLong { .. } => "SeasonTooLong",
            BenchError::IncompatibleCheckpoint(_) => "IncompatibleCheckpoint",
            BenchError::NoTestWindows => "NoTestWindows",
            BenchError::Metrics(_) => "Metrics",
            BenchError::Data(_) => "Data",
            BenchError::Predictor(_) => "Predictor",
            BenchError::Stgan(_) => "Stgan",
            BenchError::Spatial(_) => "Spatial",
            BenchError::Train(_) => "Train",
        };
        rt(name, e)
    }
}

impl From<MetricsError> for CliError {
    fn from(e: MetricsError) -> Self {
        rt("Metrics", e)
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        rt("Io", e)
    }
}

/// Structured log line on stderr: `ts=<utc> phase=<phase> <rest>`.
fn log(phase: &str, rest: std::fmt::Arguments) {
    let ts = chrono::Utc::now().format("%Y-%m-%dT%H:%M:%S%.3fZ");
    eprintln!("ts={ts} phase={phase} {rest}");
}

macro_rules! logf {
    ($phase:expr, $($arg:tt)*) => { log($phase, format_args!($($arg)*)) };
}

/// Config file plus flag/environment overrides.
/// Precedence: flag > STGAN_SEED > file > default.
fn effective_config(cli: &Cli) -> Result<RunConfig, CliError> {
    let mut cfg = match &cli.config {
        Some(path) => RunConfig::from_path(path)?,
        None => RunConfig::default(),
    };
    if let Ok(env_seed) = std::env::var("STGAN_SEED") {
        let parsed: u64 = env_seed.parse().map_err(|_| {
            CliError::Config(format!("STGAN_SEED must be an unsigned integer, got '{env_seed}'"))
        })?;
        cfg.train.seed = parsed;
        cfg.data.synth_seed = parsed;
    }
    if let Some(seed) = cli.seed {
        cfg.train.seed = seed;
        cfg.data.synth_seed = seed;
    }
    if cli.desk_scale {
        cfg.mode.desk_scale = true;
    }
    if let Some(mi) = cli.max_iters {
        cfg.train.max_iters = mi;
    }
    if let Some(pe) = cli.pretrain_epochs {
        cfg.train.pretrain_epochs = pe;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn load_panel(cfg: &RunConfig, data_flag: &Option<PathBuf>) -> Result<TimeSeriesPanel, CliError> {
    if let Some(path) = data_flag {
        return Ok(load_csv(path)?);
    }
    match cfg.data.source {
        DataSource::Csv => {
            let path = cfg.data.csv_path.as_ref().ok_or_else(|| {
                CliError::Config("data.source = \"csv\" requires data.csv_path".into())
            })?;
            Ok(load_csv(path)?)
        }
        DataSource::Synth => Ok(synth_panel(
            cfg.data.n_regions,
            cfg.data.n_steps,
            cfg.data.synth_seed,
            &cfg.data.synth,
        )?),
    }
}

fn parent_dir(path: &Path) -> PathBuf {
    match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p.to_path_buf(),
        _ => PathBuf::from("."),
    }
}

pub fn run(cli: Cli) -> Result<(), CliError> {
    match &cli.command {
        Command::Synth { out } => {
            let cfg = effective_config(&cli)?;
            let _lock = DirLock::acquire(&parent_dir(out)).map_err(|e| rt("Lock", e))?;
            let panel = synth_panel(
                cfg.data.n_regions,
                cfg.data.n_steps,
                cfg.data.synth_seed,
                &cfg.data.synth,
            )?;
            panel.save_csv(out)?;
            logf!(
                "synth",
                "seed={} rows={} regions={} out={}",
                cfg.data.synth_seed,
                panel.n_steps(),
                panel.n_regions(),
                out.display()
            );
            Ok(())
        }
        Command::Pretrain { data, out } => {
            let mut cfg = effective_config(&cli)?;
            cfg.train.max_iters = 0;
            run_training(&cli, cfg, data, out, None, "pretrain")
        }
        Command::Train { data, out, resume } => {
            let cfg = effective_config(&cli)?;
            let resume_cp = match resume {
                Some(path) => Some(load_checkpoint(path)?),
                None => None,
            };
            run_training(&cli, cfg, data, out, resume_cp, "train")
        }
        Command::Generate {
            data,
            checkpoint,
            out_dir,
            count,
        } => {
            let cfg = effective_config(&cli)?;
            let _lock = DirLock::acquire(out_dir).map_err(|e| rt("Lock", e))?;
            let cp = load_checkpoint(checkpoint)?;
            let panel = load_panel(&cfg, data)?;
            let windows = stgan_core::data::make_windows(&panel, cp.q, cp.p)?;
            let all_idx: Vec<usize> = (0..windows.len()).collect();
            let samples = generate_virtual_windows(&panel, &cp, &all_idx, *count)?;
            for (v, (k, scaled_sample)) in samples.iter().enumerate() {
                // Back to the data domain for export.
                let raw = ndarray::Array2::from_shape_fn(scaled_sample.dim(), |(t, r)| {
                    cp.scale.unscale_value(r, scaled_sample[(t, r)])
                });
                let dates = panel.timestamps()[*k..*k + cp.q].to_vec();
                let vp = TimeSeriesPanel::new(raw, dates, panel.regions().to_vec())
                    .map_err(CliError::from)?;
                let path = out_dir.join(format!("virtual_{v:04}.csv"));
                vp.save_csv(&path)?;
            }
            logf!(
                "generate",
                "count={} out_dir={}",
                samples.len(),
                out_dir.display()
            );
            Ok(())
        }
        Command::Evaluate {
            data,
            checkpoint,
            out,
            csv,
        } => {
            let cfg = effective_config(&cli)?;
            let _lock = DirLock::acquire(&parent_dir(out)).map_err(|e| rt("Lock", e))?;
            let cp = load_checkpoint(checkpoint)?;
            let panel = load_panel(&cfg, data)?;
            let mut plan = cfg.backtest_plan();
            // Evaluation follows the checkpoint's window sizes.
            plan.q = cp.q;
            plan.p = cp.p;
            plan.horizons.retain(|&h| h <= cp.p);
            if plan.horizons.is_empty() {
                plan.horizons = vec![cp.p];
            }
            let report = backtest(&panel, &plan, &cp)?;
            report
                .validate()
                .map_err(|e| rt("InvalidReport", e))?;
            std::fs::write(out, report.to_json())?;
            if let Some(csv_path) = csv {
                std::fs::write(csv_path, report.to_csv())?;
            }
            let headline: Vec<String> = report
                .aggregates
                .iter()
                .filter(|a| a.horizon == plan.horizons[0])
                .map(|a| format!("{}_mape={:.4}", a.model, a.mape))
                .collect();
            logf!(
                "evaluate",
                "windows_q={} p={} {} out={}",
                plan.q,
                plan.p,
                headline.join(" "),
                out.display()
            );
            Ok(())
        }
        Command::Report {
            out,
            external,
            inputs,
        } => {
            let _lock = DirLock::acquire(&parent_dir(out)).map_err(|e| rt("Lock", e))?;
            let summary = merge_reports(inputs, external)?;
            std::fs::write(out, serde_json::to_string_pretty(&summary).expect("summary json"))?;
            logf!(
                "report",
                "inputs={} out={}",
                inputs.len(),
                out.display()
            );
            Ok(())
        }
    }
}

fn run_training(
    _cli: &Cli,
    cfg: RunConfig,
    data: &Option<PathBuf>,
    out: &Path,
    resume: Option<Checkpoint>,
    phase: &'static str,
) -> Result<(), CliError> {
    let _lock = DirLock::acquire(&parent_dir(out)).map_err(|e| rt("Lock", e))?;
    let panel = load_panel(&cfg, data)?;
    let opts = cfg.train_options();
    logf!(
        phase,
        "seed={} q={} p={} pretrain_epochs={} max_iters={} mode={:?}",
        opts.train.seed,
        opts.q,
        opts.p,
        opts.train.pretrain_epochs,
        opts.train.max_iters,
        opts.mode
    );
    let interim_dir = parent_dir(out);
    let cp = train_with(&panel, &opts, resume, &mut |event| match event {
        TrainEvent::PretrainEpoch {
            epoch,
            loss,
            val_mape,
        } => {
            if let Some(vm) = val_mape {
                logf!(phase, "stage=pretrain epoch={epoch} loss={loss:.6} val_mape={vm:.4}");
            } else {
                logf!(phase, "stage=pretrain epoch={epoch} loss={loss:.6}");
            }
        }
        TrainEvent::JointIter { iter, losses } => {
            logf!(
                phase,
                "stage=adversarial iter={iter} d_loss={:.4} gp={:.4} g_adv={:.4} pred_mse={:.6} g_total={:.4}",
                losses.d_total,
                losses.gp,
                losses.g_adv,
                losses.pred_mse,
                losses.g_total
            );
        }
        TrainEvent::FinetuneStep { step, loss } => {
            logf!(phase, "stage=finetune step={step} loss={loss:.6}");
        }
        TrainEvent::CheckpointReady(cp) => {
            let path = interim_dir.join(format!("interim_{:06}.ckpt", cp.iter));
            match save_checkpoint(cp, &path) {
                Ok(()) => logf!(phase, "stage=checkpoint iter={} out={}", cp.iter, path.display()),
                Err(e) => logf!(phase, "stage=checkpoint error={e}"),
            }
        }
    })?;
    save_checkpoint(&cp, out)?;
    logf!(
        phase,
        "stage=done iter={} pretrain_final_loss={:.6} out={}",
        cp.iter,
        cp.metrics.pretrain_final_loss,
        out.display()
    );
    Ok(())
}

/// Merged view over several evaluation reports.
#[derive(Debug, Serialize, Deserialize)]
struct Summary {
    schema_version: u32,
    inputs: usize,
    /// Mean aggregate errors per (model, horizon) across reports.
    aggregates: Vec<SummaryAggregate>,
    /// Improvement of the primary model over every baseline, recomputed
    /// from the pooled horizon-average errors.
    improvement: Vec<ImprovementEntry>,
}

#[derive(Debug, Serialize, Deserialize)]
struct SummaryAggregate {
    model: String,
    horizon: usize,
    mae: f64,
    mape: f64,
}

fn merge_reports(inputs: &[PathBuf], external: &[String]) -> Result<Summary, CliError> {
    if inputs.is_empty() {
        return Err(CliError::Config("report needs at least one input".into()));
    }
    let mut reports = Vec::with_capacity(inputs.len());
    for path in inputs {
        let text = std::fs::read_to_string(path)?;
        let report =
            MetricReport::from_json(&text).map_err(|e| rt("InvalidReport", e))?;
        report.validate().map_err(|e| rt("InvalidReport", e))?;
        reports.push(report);
    }
    // (model, horizon) → accumulated errors, ordered by first appearance.
    let mut keys: Vec<(String, usize)> = Vec::new();
    let mut sums: Vec<(f64, f64, usize)> = Vec::new();
    for report in &reports {
        for agg in &report.aggregates {
            let key = (agg.model.clone(), agg.horizon);
            match keys.iter().position(|k| *k == key) {
                Some(i) => {
                    sums[i].0 += agg.mae;
                    sums[i].1 += agg.mape;
                    sums[i].2 += 1;
                }
                None => {
                    keys.push(key);
                    sums.push((agg.mae, agg.mape, 1));
                }
            }
        }
    }
    let aggregates: Vec<SummaryAggregate> = keys
        .iter()
        .zip(sums.iter())
        .map(|((model, horizon), (mae, mape, count))| SummaryAggregate {
            model: model.clone(),
            horizon: *horizon,
            mae: mae / *count as f64,
            mape: mape / *count as f64,
        })
        .collect();

    // Pooled horizon-average error per model.
    let models: Vec<String> = reports[0].models.clone();
    let primary = models
        .first()
        .ok_or_else(|| CliError::Config("report has no models".into()))?
        .clone();
    let mean_of = |model: &str, pick_mae: bool| -> Option<f64> {
        let values: Vec<f64> = aggregates
            .iter()
            .filter(|a| a.model == model)
            .map(|a| if pick_mae { a.mae } else { a.mape })
            .collect();
        if values.is_empty() {
            None
        } else {
            Some(values.iter().sum::<f64>() / values.len() as f64)
        }
    };
    let ours_mae = mean_of(&primary, true)
        .ok_or_else(|| rt("InvalidReport", "primary model missing from aggregates"))?;
    let ours_mape = mean_of(&primary, false).expect("same filter");

    let mut improvement = Vec::new();
    for model in models.iter().skip(1) {
        if let (Some(b_mae), Some(b_mape)) = (mean_of(model, true), mean_of(model, false)) {
            improvement.push(ImprovementEntry {
                baseline: model.clone(),
                horizon: None,
                ir_mae: improvement_rate(b_mae, ours_mae)?,
                ir_mape: improvement_rate(b_mape, ours_mape)?,
            });
        }
    }
    for spec in external {
        let (name, mae, mape) = parse_external(spec)?;
        improvement.push(ImprovementEntry {
            baseline: name,
            horizon: None,
            ir_mae: improvement_rate(mae, ours_mae)?,
            ir_mape: improvement_rate(mape, ours_mape)?,
        });
    }

    Ok(Summary {
        schema_version: 1,
        inputs: inputs.len(),
        aggregates,
        improvement,
    })
}

/// Parse `name=mae,mape` (externally computed baseline errors).
fn parse_external(spec: &str) -> Result<(String, f64, f64), CliError> {
    let bad = || {
        CliError::Config(format!(
            "--external '{spec}' must look like name=mae,mape"
        ))
    };
    let (name, rest) = spec.split_once('=').ok_or_else(bad)?;
    let (mae_s, mape_s) = rest.split_once(',').ok_or_else(bad)?;
    let mae: f64 = mae_s.trim().parse().map_err(|_| bad())?;
    let mape: f64 = mape_s.trim().parse().map_err(|_| bad())?;
    if name.trim().is_empty() || mae <= 0.0 || mape <= 0.0 {
        return Err(bad());
    }
    Ok((name.trim().to_string(), mae, mape))
}
