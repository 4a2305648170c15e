//! Predictor pretraining on real windows with MSE loss and optional
//! validation-based early stopping.

use ndarray::Array2;
use rand::Rng;
use rand_chacha::ChaCha20Rng;

use crate::data::{ScaleParams, WindowBatch};
use crate::opt::{AdamConfig, AdamState};
use crate::predictor::{
    forecast_batch, predictor_forward, ForwardStats, PredictorConfig, PredictorState,
    PredictorVars,
};
use crate::tensor::Tape;

use super::{TrainConfig, TrainError};

/// Result of pretraining: final (or best-validation) state plus curves.
#[derive(Debug, Clone)]
pub struct PretrainOutcome {
    pub state: PredictorState,
    pub opt: AdamState,
    /// Mean training MSE per epoch.
    pub loss_curve: Vec<f64>,
    pub best_val_mape: Option<f64>,
    pub epochs_run: usize,
}

/// Minimize MSE between `forecast(history)` and the horizon over the given
/// real windows. Runs `cfg.pretrain_epochs` epochs (zero returns the
/// initialization unchanged); with validation windows and a patience
/// setting, stops early on stagnating validation MAPE and returns the best
/// state seen.
pub fn pretrain_predictor(
    train: &WindowBatch,
    val: Option<&WindowBatch>,
    scale: &ScaleParams,
    pred_cfg: PredictorConfig,
    cfg: &TrainConfig,
    rng: &mut ChaCha20Rng,
    on_epoch: &mut dyn FnMut(usize, f64, Option<f64>),
) -> Result<PretrainOutcome, TrainError> {
    pred_cfg.validate()?;
    let mut state = {
        let mut init_rng = ChaCha20Rng::seed_from_u64(cfg.seed.wrapping_add(2));
        PredictorState::init(pred_cfg, &mut init_rng)?
    };
    let mut opt = AdamState::for_tensors(&state.tensors());
    let adam_cfg = AdamConfig::with_lr(cfg.lr_t);
    let n = train.n_regions();

    let mut best: Option<(f64, PredictorState, AdamState)> = None;
    let mut evals_since_best = 0usize;
    let mut loss_curve = Vec::with_capacity(cfg.pretrain_epochs);
    let mut epochs_run = 0;

    for epoch in 0..cfg.pretrain_epochs {
        // Shuffle window order, then walk in batches.
        let mut order: Vec<usize> = (0..train.len()).collect();
        for i in (1..order.len()).rev() {
            let j = (rng.random::<u64>() as usize) % (i + 1);
            order.swap(i, j);
        }
        let mut epoch_loss = 0.0;
        let mut batches = 0usize;
        for chunk in order.chunks(cfg.batch_size.max(1)) {
            let mut seqs = Vec::with_capacity(chunk.len() * n);
            let mut targets = Vec::with_capacity(chunk.len() * n);
            for &k in chunk {
                for r in 0..n {
                    seqs.push(train.history[k].column(r).to_vec());
                    targets.push(train.horizon[k].column(r).to_vec());
                }
            }
            let loss = sgd_step(&mut state, &mut opt, &seqs, &targets, &adam_cfg, cfg, rng)?;
            if !loss.is_finite() {
                return Err(TrainError::Divergence {
                    what: "pretrain loss",
                    phase: "pretrain",
                    step: epoch as u64,
                });
            }
            epoch_loss += loss;
            batches += 1;
        }
        let mean_loss = epoch_loss / batches.max(1) as f64;
        loss_curve.push(mean_loss);
        epochs_run = epoch + 1;

        let mut val_mape_now = None;
        if let (Some(vw), Some(patience)) = (val, cfg.early_stop_patience) {
            if (epoch + 1) % cfg.eval_interval == 0 && !vw.is_empty() {
                let vm = validation_mape(&state, vw, scale)?;
                val_mape_now = vm;
                if let Some(vm) = vm {
                    let improved = best.as_ref().map_or(true, |(b, _, _)| vm < *b);
                    if improved {
                        best = Some((vm, state.clone(), opt.clone()));
                        evals_since_best = 0;
                    } else {
                        evals_since_best += 1;
                        if evals_since_best >= patience {
                            on_epoch(epoch, mean_loss, val_mape_now);
                            break;
                        }
                    }
                }
            }
        }
        on_epoch(epoch, mean_loss, val_mape_now);
    }

    let best_val_mape = best.as_ref().map(|(b, _, _)| *b);
    if let Some((_, st, op)) = best {
        state = st;
        opt = op;
    }
    Ok(PretrainOutcome {
        state,
        opt,
        loss_curve,
        best_val_mape,
        epochs_run,
    })
}

/// One MSE gradient step over a batch of (sequence, target) pairs.
/// Returns the batch loss. Shared by pretraining and ablation fine-tuning.
pub(super) fn sgd_step(
    state: &mut PredictorState,
    opt: &mut AdamState,
    seqs: &[Vec<f64>],
    targets: &[Vec<f64>],
    adam_cfg: &AdamConfig,
    cfg: &TrainConfig,
    rng: &mut ChaCha20Rng,
) -> Result<f64, TrainError> {
    assert_eq!(seqs.len(), targets.len());
    let pred_cfg = state.config;
    let s = seqs.len();
    let mut x = Array2::zeros((s * pred_cfg.window, 1));
    for (i, seq) in seqs.iter().enumerate() {
        for (t, &v) in seq.iter().enumerate() {
            x[(i * pred_cfg.window + t, 0)] = v;
        }
    }
    let mut target = Array2::zeros((s, pred_cfg.horizon));
    for (i, tr) in targets.iter().enumerate() {
        for (h, &v) in tr.iter().enumerate() {
            target[(i, h)] = v;
        }
    }

    let mut tape = Tape::new();
    let vars = PredictorVars::leaves(&mut tape, state, true);
    let xv = tape.constant(x);
    let mut stats = ForwardStats::default();
    let dropout = pred_cfg.dropout;
    let out = if dropout > 0.0 {
        predictor_forward(
            &mut tape,
            xv,
            &vars,
            &pred_cfg,
            s,
            Some((rng, dropout)),
            &mut stats,
            None,
        )
    } else {
        predictor_forward(&mut tape, xv, &vars, &pred_cfg, s, None, &mut stats, None)
    };
    let tv = tape.constant(target);
    let loss = tape.mse(out, tv);
    let loss_val = tape.scalar(loss);
    if !loss_val.is_finite() {
        return Err(TrainError::Divergence {
            what: "predictor loss",
            phase: "sgd_step",
            step: cfg.seed,
        });
    }
    let wrt = vars.var_list();
    let grad_vars = tape.backward(loss, &wrt);
    let grads: Vec<Array2<f64>> = grad_vars.iter().map(|&g| tape.value(g).clone()).collect();
    drop(tape);
    let mut params = state.tensors_mut();
    opt.step(&mut params, &grads, adam_cfg);
    Ok(loss_val)
}

/// Mean MAPE of the predictor on validation windows in the original data
/// domain. Entries with near-zero actuals are skipped; `None` if nothing
/// was measurable.
fn validation_mape(
    state: &PredictorState,
    val: &WindowBatch,
    scale: &ScaleParams,
) -> Result<Option<f64>, TrainError> {
    let n = val.n_regions();
    let mut seqs = Vec::with_capacity(val.len() * n);
    for k in 0..val.len() {
        for r in 0..n {
            seqs.push(val.history[k].column(r).to_vec());
        }
    }
    let out = forecast_batch(&seqs, state)?;
    let mut sum = 0.0;
    let mut count = 0usize;
    for k in 0..val.len() {
        for r in 0..n {
            for h in 0..val.p {
                let actual = scale.unscale_value(r, val.horizon[k][(h, r)]);
                let predicted = scale.unscale_value(r, out[(k * n + r, h)]);
                if actual.abs() > 1e-8 {
                    sum += ((actual - predicted) / actual).abs();
                    count += 1;
                }
            }
        }
    }
    Ok(if count == 0 {
        None
    } else {
        Some(sum / count as f64)
    })
}

use rand::SeedableRng;

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{apply_scale, fit_scale, make_windows, synth_panel, SynthSpec};
    use crate::predictor::forecast;

    fn micro_cfg(q: usize, p: usize) -> PredictorConfig {
        PredictorConfig {
            d_model: 16,
            n_heads: 2,
            n_layers: 1,
            d_ffn: 32,
            dropout: 0.0,
            conv_kernel: 3,
            horizon: p,
            window: q,
        }
    }

    #[test]
    fn zero_epochs_returns_initialization() {
        let spec = SynthSpec {
            seasonal_period: 12,
            ..SynthSpec::default()
        };
        let panel = synth_panel(2, 80, 3, &spec).unwrap();
        let scale = fit_scale(&panel, 60).unwrap();
        let windows = apply_scale(&make_windows(&panel, 8, 2).unwrap(), &scale);
        let cfg = TrainConfig {
            pretrain_epochs: 0,
            seed: 5,
            ..TrainConfig::default()
        };
        let mut rng = ChaCha20Rng::seed_from_u64(cfg.seed);
        let out = pretrain_predictor(
            &windows,
            None,
            &scale,
            micro_cfg(8, 2),
            &cfg,
            &mut rng,
            &mut |_, _, _| {},
        )
        .unwrap();
        let mut init_rng = ChaCha20Rng::seed_from_u64(cfg.seed.wrapping_add(2));
        let expect = PredictorState::init(micro_cfg(8, 2), &mut init_rng).unwrap();
        assert_eq!(out.state, expect);
        assert!(out.loss_curve.is_empty());
    }

    #[test]
    fn pretraining_is_deterministic() {
        let spec = SynthSpec {
            seasonal_period: 12,
            ..SynthSpec::default()
        };
        let panel = synth_panel(2, 80, 3, &spec).unwrap();
        let scale = fit_scale(&panel, 60).unwrap();
        let windows = apply_scale(&make_windows(&panel, 8, 2).unwrap(), &scale);
        let cfg = TrainConfig {
            pretrain_epochs: 3,
            batch_size: 16,
            seed: 7,
            lr_t: 1e-3,
            ..TrainConfig::default()
        };
        let run = || {
            let mut rng = ChaCha20Rng::seed_from_u64(cfg.seed);
            pretrain_predictor(
                &windows,
                None,
                &scale,
                micro_cfg(8, 2),
                &cfg,
                &mut rng,
                &mut |_, _, _| {},
            )
            .unwrap()
        };
        let a = run();
        let b = run();
        assert_eq!(a.loss_curve, b.loss_curve);
        assert_eq!(a.state, b.state);
    }

    #[test]
    fn constant_panel_reaches_tiny_mse() {
        // A constant panel scales to all-zero targets; the loss must
        // collapse quickly.
        use chrono::NaiveDate;
        let t = 60;
        let values = Array2::from_elem((t, 2), 42.0);
        let dates: Vec<NaiveDate> = (0..t)
            .map(|i| {
                NaiveDate::from_ymd_opt(2020, 1, 1).unwrap() + chrono::Duration::days(i as i64)
            })
            .collect();
        let panel = crate::data::TimeSeriesPanel::new(
            values,
            dates,
            vec!["a".into(), "b".into()],
        )
        .unwrap();
        let scale = fit_scale(&panel, 40).unwrap();
        assert!(scale.constant.iter().all(|&c| c));
        let windows = apply_scale(&make_windows(&panel, 8, 2).unwrap(), &scale);
        let cfg = TrainConfig {
            pretrain_epochs: 100,
            batch_size: 32,
            lr_t: 1e-3,
            seed: 1,
            early_stop_patience: None,
            ..TrainConfig::default()
        };
        let mut rng = ChaCha20Rng::seed_from_u64(cfg.seed);
        let out = pretrain_predictor(
            &windows,
            None,
            &scale,
            micro_cfg(8, 2),
            &cfg,
            &mut rng,
            &mut |_, _, _| {},
        )
        .unwrap();
        let last = *out.loss_curve.last().unwrap();
        assert!(last < 1e-6, "final MSE {last}");
    }

    #[test]
    fn learns_noiseless_sine_to_low_mape() {
        // y_t = 2 + sin(2πt/12): predictable exactly from a 24-step window.
        use chrono::NaiveDate;
        let t = 140;
        let values = Array2::from_shape_fn((t, 2), |(i, _)| {
            2.0 + (2.0 * std::f64::consts::PI * i as f64 / 12.0).sin()
        });
        let dates: Vec<NaiveDate> = (0..t)
            .map(|i| {
                NaiveDate::from_ymd_opt(2020, 1, 1).unwrap() + chrono::Duration::days(i as i64)
            })
            .collect();
        let panel =
            crate::data::TimeSeriesPanel::new(values, dates, vec!["a".into(), "b".into()])
                .unwrap();
        let scale = fit_scale(&panel, 110).unwrap();
        let windows = apply_scale(&make_windows(&panel, 24, 3).unwrap(), &scale);
        let train: Vec<usize> = (0..windows.len()).filter(|k| k + 27 <= 110).collect();
        let train_windows = windows.select(&train);
        let cfg = TrainConfig {
            pretrain_epochs: 2000,
            batch_size: 64,
            lr_t: 2e-3,
            seed: 3,
            early_stop_patience: None,
            ..TrainConfig::default()
        };
        let mut rng = ChaCha20Rng::seed_from_u64(cfg.seed);
        let out = pretrain_predictor(
            &train_windows,
            None,
            &scale,
            micro_cfg(24, 3),
            &cfg,
            &mut rng,
            &mut |_, _, _| {},
        )
        .unwrap();
        // Held-out windows: everything after the training cut.
        let test: Vec<usize> = (0..windows.len()).filter(|k| k + 24 >= 110).collect();
        let mut errs = Vec::new();
        for &k in &test {
            let x = windows.history[k].column(0).to_owned().insert_axis(ndarray::Axis(1));
            let yhat = forecast(&x, &out.state).unwrap();
            for h in 0..3 {
                let actual = scale.unscale_value(0, windows.horizon[k][(h, 0)]);
                let predicted = scale.unscale_value(0, yhat[h]);
                errs.push(((actual - predicted) / actual).abs());
            }
        }
        let mape = errs.iter().sum::<f64>() / errs.len() as f64;
        assert!(mape < 0.05, "MAPE {mape}");
    }
}
