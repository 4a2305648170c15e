//! Two-phase training: predictor pretraining on real windows, then joint
//! adversarial optimization where the critic scores full (history ⊕ forecast)
//! windows and predictor error feeds back into sample generation.

mod checkpoint;
mod joint;
mod pretrain;

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, LossHistory, MetricSnapshot};
pub use joint::{gan_only_step, joint_step, JointBatch, JointLosses};
pub use pretrain::{pretrain_predictor, PretrainOutcome};

use ndarray::Array2;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{
    apply_scale, fit_scale, make_windows, DataError, ScaleParams, TimeSeriesPanel, WindowBatch,
};
use crate::opt::{AdamConfig, AdamState};
use crate::predictor::{PredictorConfig, PredictorError, PredictorState};
use crate::spatial::{SpatialError, SpatialWeights, WeightNormalization};
use crate::stgan::{GanConfig, GanState, StganError};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("training diverged: non-finite {what} at {phase} step {step}")]
    Divergence {
        what: &'static str,
        phase: &'static str,
        step: u64,
    },
    #[error("invalid training setup: {0}")]
    InvalidSetup(String),
    #[error("checkpoint version {found} unsupported (expected {expected})")]
    VersionMismatch { found: u32, expected: u32 },
    #[error("corrupt checkpoint: {0}")]
    CorruptCheckpoint(String),
    #[error("checkpoint incompatible: {0}")]
    IncompatibleCheckpoint(String),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Predictor(#[from] PredictorError),
    #[error(transparent)]
    Stgan(#[from] StganError),
    #[error(transparent)]
    Spatial(#[from] SpatialError),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

/// Learning rates, loss weights, and loop sizes for both phases.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub lr_g: f64,
    pub lr_d: f64,
    pub lr_t: f64,
    pub batch_size: usize,
    pub max_iters: u64,
    pub pretrain_epochs: usize,
    pub n_critic: usize,
    pub lambda_gp: f64,
    pub lambda_gan: f64,
    pub lambda_pred: f64,
    pub seed: u64,
    /// Optional adversarial warmup scoring q-length windows before the
    /// joint phase.
    pub warmup_iters: u64,
    /// Virtual windows per real window when augmenting without joint
    /// training.
    pub virtual_mix: f64,
    /// Predictor learning rate during the joint phase; defaults to `lr_g`
    /// (`None`), distinct from the pretraining rate `lr_t`.
    pub joint_lr_t: Option<f64>,
    /// Pretraining early stop: evaluations without improvement before
    /// stopping. `None` disables.
    pub early_stop_patience: Option<usize>,
    /// Epochs between validation evaluations during pretraining.
    pub eval_interval: usize,
    /// Joint iterations between checkpoint events (0 = final only).
    pub checkpoint_interval: u64,
    /// Keep the generator fixed during joint steps (ablation).
    pub freeze_generator: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr_g: 2e-4,
            lr_d: 2e-4,
            lr_t: 2e-4,
            batch_size: 64,
            max_iters: 1000,
            pretrain_epochs: 100,
            n_critic: 5,
            lambda_gp: 10.0,
            lambda_gan: 1.0,
            lambda_pred: 1.0,
            seed: 0,
            warmup_iters: 0,
            virtual_mix: 1.0,
            joint_lr_t: None,
            early_stop_patience: Some(20),
            eval_interval: 1,
            checkpoint_interval: 0,
            freeze_generator: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        if self.lr_g <= 0.0 || self.lr_d <= 0.0 || self.lr_t <= 0.0 {
            return Err(TrainError::InvalidSetup(
                "learning rates must be positive".into(),
            ));
        }
        if self.n_critic < 1 {
            return Err(TrainError::InvalidSetup("n_critic must be >= 1".into()));
        }
        if self.batch_size < 1 {
            return Err(TrainError::InvalidSetup("batch_size must be >= 1".into()));
        }
        if self.eval_interval < 1 {
            return Err(TrainError::InvalidSetup(
                "eval_interval must be >= 1".into(),
            ));
        }
        if self.virtual_mix < 0.0 {
            return Err(TrainError::InvalidSetup(
                "virtual_mix must be nonnegative".into(),
            ));
        }
        Ok(())
    }
}

/// Chronological split fractions.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SplitFractions {
    pub train: f64,
    pub val: f64,
    pub test: f64,
}

impl Default for SplitFractions {
    fn default() -> Self {
        SplitFractions {
            train: 0.7,
            val: 0.1,
            test: 0.2,
        }
    }
}

impl SplitFractions {
    pub fn validate(&self) -> Result<(), TrainError> {
        let sum = self.train + self.val + self.test;
        if (sum - 1.0).abs() > 1e-9 {
            return Err(TrainError::InvalidSetup(format!(
                "split fractions sum to {sum}, need 1"
            )));
        }
        if self.train <= 0.0 || self.val < 0.0 || self.test < 0.0 {
            return Err(TrainError::InvalidSetup(
                "split fractions must be nonnegative with train > 0".into(),
            ));
        }
        Ok(())
    }
}

/// Whether the predictor is embedded in the adversarial loop or trained on
/// a fixed pool of generated windows.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrainingMode {
    Joint,
    /// Ablation: train the GAN alone on q-length windows, then fine-tune
    /// the predictor on real windows concatenated with generated ones.
    NoJoint,
}

/// Everything `train` needs beyond the panel.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainOptions {
    pub q: usize,
    pub p: usize,
    pub fractions: SplitFractions,
    pub predictor: PredictorConfig,
    pub gan: GanConfig,
    pub train: TrainConfig,
    pub normalization: WeightNormalization,
    pub mode: TrainingMode,
}

/// Scaled windows, per-window spatial weights, and split index sets.
#[derive(Debug, Clone)]
pub struct PreparedData {
    pub scale: ScaleParams,
    pub scaled_values: Array2<f64>,
    /// Every stride-1 window of the panel, scaled.
    pub windows: WindowBatch,
    /// Normalized spatial weights per window, index-aligned with `windows`.
    pub weights: Vec<SpatialWeights>,
    pub train_idx: Vec<usize>,
    pub val_idx: Vec<usize>,
    pub test_idx: Vec<usize>,
    pub n_train_rows: usize,
    pub n_val_rows: usize,
    pub regions: Vec<String>,
    pub q: usize,
    pub p: usize,
}

/// Split the panel chronologically, fit scaling on training rows only, cut
/// windows, and precompute per-window spatial weights. A window belongs to
/// the split that contains its entire horizon; histories may reach back.
pub fn prepare_data(
    panel: &TimeSeriesPanel,
    q: usize,
    p: usize,
    fractions: SplitFractions,
    normalization: WeightNormalization,
) -> Result<PreparedData, TrainError> {
    fractions.validate()?;
    let t = panel.n_steps();
    let n_train_rows = (fractions.train * t as f64).floor() as usize;
    let n_val_rows = (fractions.val * t as f64).floor() as usize;
    if n_train_rows < q + p {
        return Err(TrainError::InvalidSetup(format!(
            "training segment of {n_train_rows} rows cannot hold a q+p = {} window",
            q + p
        )));
    }
    let scale = fit_scale(panel, n_train_rows)?;
    let raw_windows = make_windows(panel, q, p)?;
    let windows = apply_scale(&raw_windows, &scale);
    let scaled_values = crate::data::scale_panel_values(panel, &scale);

    let mut weights = Vec::with_capacity(windows.len());
    for (k, hist) in windows.history.iter().enumerate() {
        weights.push(SpatialWeights::from_window(
            hist,
            windows.anchors[k],
            normalization,
        )?);
    }

    let mut train_idx = Vec::new();
    let mut val_idx = Vec::new();
    let mut test_idx = Vec::new();
    for k in 0..windows.len() {
        let horizon_start = k + q;
        let horizon_end = k + q + p;
        if horizon_end <= n_train_rows {
            train_idx.push(k);
        } else if horizon_start >= n_train_rows && horizon_end <= n_train_rows + n_val_rows {
            val_idx.push(k);
        } else if horizon_start >= n_train_rows + n_val_rows {
            test_idx.push(k);
        }
    }
    if train_idx.is_empty() {
        return Err(TrainError::InvalidSetup(
            "no training windows after the split".into(),
        ));
    }
    Ok(PreparedData {
        scale,
        scaled_values,
        windows,
        weights,
        train_idx,
        val_idx,
        test_idx,
        n_train_rows,
        n_val_rows,
        regions: panel.regions().to_vec(),
        q,
        p,
    })
}

/// Progress callback payloads.
#[derive(Debug)]
pub enum TrainEvent<'a> {
    PretrainEpoch {
        epoch: usize,
        loss: f64,
        val_mape: Option<f64>,
    },
    JointIter {
        iter: u64,
        losses: &'a JointLosses,
    },
    FinetuneStep {
        step: u64,
        loss: f64,
    },
    /// Periodic snapshot ready to be persisted.
    CheckpointReady(Box<Checkpoint>),
}

/// Train from scratch; see [`train_with`] for resume and progress hooks.
pub fn train(panel: &TimeSeriesPanel, opts: &TrainOptions) -> Result<Checkpoint, TrainError> {
    train_with(panel, opts, None, &mut |_| {})
}

/// Full pipeline: pretrain, then `max_iters` adversarial iterations (joint
/// or ablation mode), emitting events along the way. With `resume`, the
/// checkpoint's states and RNG position continue exactly where they left
/// off; the finished run is identical to an uninterrupted one.
pub fn train_with(
    panel: &TimeSeriesPanel,
    opts: &TrainOptions,
    resume: Option<Checkpoint>,
    on_event: &mut dyn FnMut(&TrainEvent),
) -> Result<Checkpoint, TrainError> {
    opts.train.validate()?;
    opts.predictor.validate()?;
    if opts.predictor.window != opts.q || opts.predictor.horizon != opts.p {
        return Err(TrainError::InvalidSetup(format!(
            "predictor config ({}, {}) disagrees with q={}, p={}",
            opts.predictor.window, opts.predictor.horizon, opts.q, opts.p
        )));
    }
    let prepared = prepare_data(panel, opts.q, opts.p, opts.fractions, opts.normalization)?;
    let cfg = &opts.train;

    let (mut gan, mut pred, mut opt_t, mut rng, mut history, mut metrics, start_iter) =
        match resume {
            Some(cp) => {
                cp.check_compatible(&prepared, opts)?;
                let rng = cp.restore_rng();
                (
                    cp.gan,
                    cp.predictor,
                    cp.opt_t,
                    rng,
                    cp.loss_history,
                    cp.metrics,
                    cp.iter,
                )
            }
            None => {
                let gan = GanState::init(opts.gan, cfg.seed.wrapping_add(1));
                let mut rng = ChaCha20Rng::seed_from_u64(cfg.seed);
                let train_windows = prepared.windows.select(&prepared.train_idx);
                let val_windows = if prepared.val_idx.is_empty() {
                    None
                } else {
                    Some(prepared.windows.select(&prepared.val_idx))
                };
                let outcome = pretrain_predictor(
                    &train_windows,
                    val_windows.as_ref(),
                    &prepared.scale,
                    opts.predictor,
                    cfg,
                    &mut rng,
                    &mut |epoch, loss, val| {
                        on_event(&TrainEvent::PretrainEpoch {
                            epoch,
                            loss,
                            val_mape: val,
                        });
                    },
                )?;
                let metrics = MetricSnapshot {
                    pretrain_final_loss: outcome.loss_curve.last().copied().unwrap_or(0.0),
                    best_val_mape: outcome.best_val_mape,
                    last_d_loss: 0.0,
                    last_g_loss: 0.0,
                    last_pred_loss: 0.0,
                };
                let history = LossHistory {
                    pretrain: outcome.loss_curve,
                    joint: Vec::new(),
                    finetune: Vec::new(),
                };
                (gan, outcome.state, outcome.opt, rng, history, metrics, 0)
            }
        };

    match opts.mode {
        TrainingMode::Joint => {
            // Optional adversarial warmup on q-length windows.
            if start_iter == 0 {
                for w in 0..cfg.warmup_iters {
                    let batch_idx = sample_batch(&prepared.train_idx, cfg.batch_size, &mut rng);
                    let losses =
                        gan_only_step(&mut gan, &prepared, &batch_idx, cfg, &mut rng, w)?;
                    history.joint.push(losses);
                }
            }
            for iter in start_iter..cfg.max_iters {
                let batch_idx = sample_batch(&prepared.train_idx, cfg.batch_size, &mut rng);
                let losses = joint_step(
                    &mut gan,
                    &mut pred,
                    &mut opt_t,
                    &prepared,
                    &batch_idx,
                    cfg,
                    &mut rng,
                )?;
                metrics.last_d_loss = losses.d_total;
                metrics.last_g_loss = losses.g_total;
                metrics.last_pred_loss = losses.pred_mse;
                on_event(&TrainEvent::JointIter {
                    iter,
                    losses: &losses,
                });
                history.joint.push(losses);
                let done = iter + 1;
                if cfg.checkpoint_interval > 0
                    && done % cfg.checkpoint_interval == 0
                    && done < cfg.max_iters
                {
                    let cp = Checkpoint::capture(
                        &prepared, opts, &gan, &pred, &opt_t, &rng, &history, &metrics, done,
                    );
                    on_event(&TrainEvent::CheckpointReady(Box::new(cp)));
                }
            }
        }
        TrainingMode::NoJoint => {
            // Adversarial training alone, then predictor fine-tuning on
            // real windows concatenated with generated ones.
            for iter in start_iter..cfg.max_iters {
                let batch_idx = sample_batch(&prepared.train_idx, cfg.batch_size, &mut rng);
                let losses = gan_only_step(&mut gan, &prepared, &batch_idx, cfg, &mut rng, iter)?;
                metrics.last_d_loss = losses.d_total;
                metrics.last_g_loss = losses.g_total;
                on_event(&TrainEvent::JointIter {
                    iter,
                    losses: &losses,
                });
                history.joint.push(losses);
            }
            let steps = cfg.max_iters;
            finetune_on_mixture(
                &mut pred,
                &mut opt_t,
                &gan,
                &prepared,
                cfg,
                steps,
                &mut rng,
                &mut history,
                on_event,
            )?;
        }
    }

    Ok(Checkpoint::capture(
        &prepared,
        opts,
        &gan,
        &pred,
        &opt_t,
        &rng,
        &history,
        &metrics,
        cfg.max_iters,
    ))
}

fn sample_batch(pool: &[usize], batch_size: usize, rng: &mut ChaCha20Rng) -> Vec<usize> {
    (0..batch_size.min(pool.len()).max(1))
        .map(|_| pool[(rng.random::<u64>() as usize) % pool.len()])
        .collect()
}

/// Build the ablation training pool (real plus generated windows, horizon
/// targets always real) and fine-tune the predictor on it.
#[allow(clippy::too_many_arguments)]
fn finetune_on_mixture(
    pred: &mut PredictorState,
    opt_t: &mut AdamState,
    gan: &GanState,
    prepared: &PreparedData,
    cfg: &TrainConfig,
    steps: u64,
    rng: &mut ChaCha20Rng,
    history: &mut LossHistory,
    on_event: &mut dyn FnMut(&TrainEvent),
) -> Result<(), TrainError> {
    use crate::stgan::{condition_window, generate, NoiseWindow};

    let n = prepared.regions.len();
    // Each entry: per-region history sequences plus the real horizon.
    let mut pool: Vec<(Array2<f64>, Array2<f64>)> = Vec::new();
    for &k in &prepared.train_idx {
        pool.push((
            prepared.windows.history[k].clone(),
            prepared.windows.horizon[k].clone(),
        ));
    }
    let n_virtual = (cfg.virtual_mix * prepared.train_idx.len() as f64).round() as usize;
    for v in 0..n_virtual {
        let k = prepared.train_idx[v % prepared.train_idx.len()];
        let y = condition_window(&prepared.scaled_values, prepared.windows.anchors[k], prepared.q);
        let noise = NoiseWindow::sample(rng, y);
        let sample = generate(&noise, &prepared.weights[k], gan)?;
        pool.push((sample, prepared.windows.horizon[k].clone()));
    }

    let adam_cfg = AdamConfig::with_lr(cfg.lr_t);
    for step in 0..steps {
        let idx: Vec<usize> = (0..cfg.batch_size.min(pool.len()))
            .map(|_| (rng.random::<u64>() as usize) % pool.len())
            .collect();
        let mut seqs = Vec::with_capacity(idx.len() * n);
        let mut targets = Vec::with_capacity(idx.len() * n);
        for &i in &idx {
            let (hist, hor) = &pool[i];
            for r in 0..n {
                seqs.push(hist.column(r).to_vec());
                targets.push(hor.column(r).to_vec());
            }
        }
        let loss = pretrain::sgd_step(pred, opt_t, &seqs, &targets, &adam_cfg, cfg, rng)?;
        if !loss.is_finite() {
            return Err(TrainError::Divergence {
                what: "finetune loss",
                phase: "finetune",
                step,
            });
        }
        history.finetune.push(loss);
        on_event(&TrainEvent::FinetuneStep { step, loss });
    }
    Ok(())
}
