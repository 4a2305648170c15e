//! Rolling-window backtesting over the held-out test segment, naive
//! baselines, and report assembly.

use ndarray::Array2;
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{make_windows, DataError, TimeSeriesPanel};
use crate::metrics::{
    clamp_hurst, dtw, hurst, improvement_rate, mae, mape, AggregateMetrics, ForecastMetrics,
    ImprovementEntry, MetricReport, MetricsError, RegionQuality, SampleQuality,
};
use crate::predictor::{forecast_batch, PredictorError};
use crate::spatial::{SpatialError, SpatialWeights};
use crate::stgan::{condition_window, generate, NoiseWindow, StganError};
use crate::train::{Checkpoint, SplitFractions, TrainError};

#[derive(Debug, Error)]
pub enum BenchError {
    #[error("season {season} exceeds history length {len}")]
    SeasonTooLong { season: usize, len: usize },
    #[error("checkpoint incompatible with panel/plan: {0}")]
    IncompatibleCheckpoint(String),
    #[error("no test windows under the given split")]
    NoTestWindows,
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Predictor(#[from] PredictorError),
    #[error(transparent)]
    Stgan(#[from] StganError),
    #[error(transparent)]
    Spatial(#[from] SpatialError),
    #[error(transparent)]
    Train(#[from] TrainError),
}

/// Forecasting models the harness can run.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    /// The trained checkpoint.
    Ours,
    SeasonalNaive,
    Persistence,
}

impl ModelKind {
    pub fn name(&self) -> &'static str {
        match self {
            ModelKind::Ours => "ours",
            ModelKind::SeasonalNaive => "seasonal_naive",
            ModelKind::Persistence => "persistence",
        }
    }
}

/// What to evaluate: window sizes, lead times, split, and the model list.
/// The first model is the primary one; improvement rates compare it against
/// every other entry.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BacktestPlan {
    pub q: usize,
    pub p: usize,
    /// Lead times to report, each in 1..=p.
    pub horizons: Vec<usize>,
    pub fractions: SplitFractions,
    pub models: Vec<ModelKind>,
    /// Season length for the seasonal-naive baseline.
    pub season: usize,
    /// Generated windows per region for sample-quality metrics (0 disables).
    pub quality_windows: usize,
}

impl Default for BacktestPlan {
    fn default() -> Self {
        BacktestPlan {
            q: 90,
            p: 14,
            horizons: vec![1, 3, 5, 14],
            fractions: SplitFractions::default(),
            models: vec![
                ModelKind::Ours,
                ModelKind::SeasonalNaive,
                ModelKind::Persistence,
            ],
            season: 7,
            quality_windows: 16,
        }
    }
}

impl BacktestPlan {
    pub fn validate(&self) -> Result<(), BenchError> {
        if self.models.is_empty() {
            return Err(BenchError::IncompatibleCheckpoint(
                "no models to run".into(),
            ));
        }
        if self.horizons.is_empty() || self.horizons.iter().any(|&h| h == 0 || h > self.p) {
            return Err(BenchError::IncompatibleCheckpoint(format!(
                "horizons {:?} must lie in 1..={}",
                self.horizons, self.p
            )));
        }
        Ok(())
    }
}

/// Seasonal-naive forecast: step h repeats the value one whole season
/// multiple back, `ŷ_{t+h} = y_{t+h−season·⌈h/season⌉}`.
pub fn seasonal_naive(history: &[f64], season: usize, p: usize) -> Result<Vec<f64>, BenchError> {
    if season == 0 || season > history.len() {
        return Err(BenchError::SeasonTooLong {
            season,
            len: history.len(),
        });
    }
    let len = history.len();
    Ok((1..=p)
        .map(|h| {
            let cycles = h.div_ceil(season);
            let offset = cycles * season - h;
            history[len - 1 - offset]
        })
        .collect())
}

/// Run every planned model over the test-segment windows and assemble the
/// evaluation report. Inputs to the trained model are scaled with the
/// checkpoint's own parameters; metrics are computed in the raw domain.
pub fn backtest(
    panel: &TimeSeriesPanel,
    plan: &BacktestPlan,
    checkpoint: &Checkpoint,
) -> Result<MetricReport, BenchError> {
    plan.validate()?;
    if checkpoint.q != plan.q || checkpoint.p != plan.p {
        return Err(BenchError::IncompatibleCheckpoint(format!(
            "checkpoint trained with (q={}, p={}), plan wants (q={}, p={})",
            checkpoint.q, checkpoint.p, plan.q, plan.p
        )));
    }
    if checkpoint.regions != panel.regions() {
        return Err(BenchError::IncompatibleCheckpoint(
            "checkpoint regions differ from the panel".into(),
        ));
    }
    let n = panel.n_regions();
    let t = panel.n_steps();
    let n_train = (plan.fractions.train * t as f64).floor() as usize;
    let n_val = (plan.fractions.val * t as f64).floor() as usize;
    let windows = make_windows(panel, plan.q, plan.p)?;
    let test_idx: Vec<usize> = (0..windows.len())
        .filter(|&k| k + plan.q >= n_train + n_val)
        .collect();
    if test_idx.is_empty() {
        return Err(BenchError::NoTestWindows);
    }

    // forecasts[model][window][region] = p-vector in the raw domain.
    let mut forecasts: Vec<Vec<Vec<Vec<f64>>>> = Vec::with_capacity(plan.models.len());
    for model in &plan.models {
        let mut per_window = Vec::with_capacity(test_idx.len());
        match model {
            ModelKind::Ours => {
                let scale = &checkpoint.scale;
                let mut seqs = Vec::with_capacity(test_idx.len() * n);
                for &k in &test_idx {
                    for r in 0..n {
                        let scaled: Vec<f64> = windows.history[k]
                            .column(r)
                            .iter()
                            .map(|&v| scale.scale_value(r, v))
                            .collect();
                        seqs.push(scaled);
                    }
                }
                let out = forecast_batch(&seqs, &checkpoint.predictor)?;
                for (wi, _) in test_idx.iter().enumerate() {
                    let mut per_region = Vec::with_capacity(n);
                    for r in 0..n {
                        let row = out.row(wi * n + r);
                        per_region
                            .push(row.iter().map(|&v| scale.unscale_value(r, v)).collect());
                    }
                    per_window.push(per_region);
                }
            }
            ModelKind::SeasonalNaive | ModelKind::Persistence => {
                let season = if *model == ModelKind::Persistence {
                    1
                } else {
                    plan.season
                };
                for &k in &test_idx {
                    let mut per_region = Vec::with_capacity(n);
                    for r in 0..n {
                        let hist = windows.history[k].column(r).to_vec();
                        per_region.push(seasonal_naive(&hist, season, plan.p)?);
                    }
                    per_window.push(per_region);
                }
            }
        }
        forecasts.push(per_window);
    }

    // Per (region, horizon, model) lead-time errors across test windows.
    let mut report_forecasts = Vec::new();
    let mut aggregates = Vec::new();
    let model_names: Vec<String> = plan.models.iter().map(|m| m.name().to_string()).collect();
    for (mi, _) in plan.models.iter().enumerate() {
        for &h in &plan.horizons {
            let mut region_mae = Vec::with_capacity(n);
            let mut region_mape = Vec::with_capacity(n);
            let mut flat_actual = Vec::new();
            let mut flat_pred = Vec::new();
            for r in 0..n {
                let mut actual = Vec::with_capacity(test_idx.len());
                let mut predicted = Vec::with_capacity(test_idx.len());
                for (wi, &k) in test_idx.iter().enumerate() {
                    actual.push(windows.horizon[k][(h - 1, r)]);
                    predicted.push(forecasts[mi][wi][r][h - 1]);
                }
                flat_actual.extend_from_slice(&actual);
                flat_pred.extend_from_slice(&predicted);
                let m_mae = mae(&actual, &predicted)?;
                let m_mape = mape(&actual, &predicted)?;
                report_forecasts.push(ForecastMetrics {
                    region: panel.regions()[r].clone(),
                    horizon: h,
                    model: model_names[mi].clone(),
                    mae: m_mae,
                    mape: m_mape,
                });
                region_mae.push(m_mae);
                region_mape.push(m_mape);
            }
            aggregates.push(AggregateMetrics {
                model: model_names[mi].clone(),
                horizon: h,
                mae: region_mae.iter().sum::<f64>() / n as f64,
                mape: region_mape.iter().sum::<f64>() / n as f64,
                mape_flat: mape(&flat_actual, &flat_pred)?,
            });
        }
    }

    // Improvement of the primary model over each other model, per horizon
    // and averaged over horizons.
    let mut improvement = Vec::new();
    let agg = |mi: usize, h: usize| -> &AggregateMetrics {
        &aggregates[mi * plan.horizons.len() + h]
    };
    for mi in 1..plan.models.len() {
        for (hi, &h) in plan.horizons.iter().enumerate() {
            improvement.push(ImprovementEntry {
                baseline: model_names[mi].clone(),
                horizon: Some(h),
                ir_mae: improvement_rate(agg(mi, hi).mae, agg(0, hi).mae)?,
                ir_mape: improvement_rate(agg(mi, hi).mape, agg(0, hi).mape)?,
            });
        }
        let mean_of = |mi: usize, f: &dyn Fn(&AggregateMetrics) -> f64| -> f64 {
            (0..plan.horizons.len()).map(|hi| f(agg(mi, hi))).sum::<f64>()
                / plan.horizons.len() as f64
        };
        improvement.push(ImprovementEntry {
            baseline: model_names[mi].clone(),
            horizon: None,
            ir_mae: improvement_rate(mean_of(mi, &|a| a.mae), mean_of(0, &|a| a.mae))?,
            ir_mape: improvement_rate(mean_of(mi, &|a| a.mape), mean_of(0, &|a| a.mape))?,
        });
    }

    // Sample quality on generated windows vs real test windows. Both sides
    // are compared in the scaled domain.
    let sample_quality_block = if plan.quality_windows > 0 {
        let scale = &checkpoint.scale;
        let real: Vec<Array2<f64>> = test_idx
            .iter()
            .map(|&k| {
                Array2::from_shape_fn((plan.q, n), |(t, r)| {
                    scale.scale_value(r, windows.history[k][(t, r)])
                })
            })
            .collect();
        let virtual_windows: Vec<Array2<f64>> =
            generate_virtual_windows(panel, checkpoint, &test_idx, plan.quality_windows)?
                .into_iter()
                .map(|(_, w)| w)
                .collect();
        let real_series: Vec<Vec<f64>> = (0..n)
            .map(|r| {
                panel
                    .values()
                    .column(r)
                    .iter()
                    .skip(n_train + n_val)
                    .map(|&v| scale.scale_value(r, v))
                    .collect()
            })
            .collect();
        Some(sample_quality(
            &real,
            &virtual_windows,
            panel.regions(),
            real_series,
        )?)
    } else {
        None
    };

    let constant_regions = checkpoint
        .scale
        .constant
        .iter()
        .enumerate()
        .filter(|(_, &c)| c)
        .map(|(r, _)| panel.regions()[r].clone())
        .collect();

    let report = MetricReport {
        schema_version: MetricReport::SCHEMA_VERSION,
        q: plan.q,
        p: plan.p,
        horizons: plan.horizons.clone(),
        models: model_names,
        regions: panel.regions().to_vec(),
        constant_regions,
        forecasts: report_forecasts,
        aggregates,
        improvement,
        sample_quality: sample_quality_block,
    };
    debug_assert!(report.validate().is_ok());
    Ok(report)
}

/// Generate scaled-domain [0,1]-clipped virtual windows from the
/// checkpoint's generator, cycling over the given window indices. Seeded
/// from the training seed so evaluation is reproducible. Returns
/// `(window index, sample)` pairs.
pub fn generate_virtual_windows(
    panel: &TimeSeriesPanel,
    checkpoint: &Checkpoint,
    window_idx: &[usize],
    count: usize,
) -> Result<Vec<(usize, Array2<f64>)>, BenchError> {
    assert!(!window_idx.is_empty(), "no windows to condition on");
    let q = checkpoint.q;
    let scale = &checkpoint.scale;
    let scaled = crate::data::scale_panel_values(panel, scale);
    let windows = make_windows(panel, q, checkpoint.p)?;
    let mut rng =
        ChaCha20Rng::seed_from_u64(checkpoint.train_config.seed.wrapping_add(0x5a17));
    let mut out = Vec::with_capacity(count);
    for v in 0..count {
        let k = window_idx[v % window_idx.len()];
        let anchor = windows.anchors[k];
        let hist_scaled = Array2::from_shape_fn((q, panel.n_regions()), |(t, r)| {
            scale.scale_value(r, windows.history[k][(t, r)])
        });
        let weights =
            SpatialWeights::from_window(&hist_scaled, anchor, checkpoint.normalization)?;
        let y = condition_window(&scaled, anchor, q);
        let noise = NoiseWindow::sample(&mut rng, y);
        let mut sample = generate(&noise, &weights, &checkpoint.gan)?;
        // Exported samples are clipped to the scaled domain.
        sample.mapv_inplace(|x| x.clamp(0.0, 1.0));
        out.push((k, sample));
    }
    Ok(out)
}

/// Sample-quality block: per region, the long-memory estimate of the real
/// test segment and of the concatenated virtual windows, plus the mean DTW
/// from each virtual window to its nearest real window.
///
/// `real` and `virtual_windows` are same-width window matrices in a common
/// domain; `real_series` is the contiguous per-region test segment used for
/// the real long-memory estimate.
pub fn sample_quality(
    real: &[Array2<f64>],
    virtual_windows: &[Array2<f64>],
    regions: &[String],
    real_series: Vec<Vec<f64>>,
) -> Result<SampleQuality, BenchError> {
    assert!(!real.is_empty() && !virtual_windows.is_empty());
    let n = regions.len();
    let mut per_region = Vec::with_capacity(n);
    for (r, region) in regions.iter().enumerate() {
        let hurst_real = hurst(&real_series[r]).ok().map(clamp_hurst);
        let virt_series: Vec<f64> = virtual_windows
            .iter()
            .flat_map(|w| w.column(r).to_vec())
            .collect();
        let hurst_virtual = hurst(&virt_series).ok().map(clamp_hurst);
        let mut dtw_sum = 0.0;
        for vw in virtual_windows {
            let vcol = vw.column(r).to_vec();
            let nearest = real
                .iter()
                .map(|rw| dtw(&vcol, &rw.column(r).to_vec()))
                .fold(f64::INFINITY, f64::min);
            dtw_sum += nearest;
        }
        per_region.push(RegionQuality {
            region: region.clone(),
            hurst_real,
            hurst_virtual,
            dtw_mean: dtw_sum / virtual_windows.len() as f64,
        });
    }
    Ok(SampleQuality { per_region })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn seasonal_naive_follows_season() {
        // season 1 = persistence
        let out = seasonal_naive(&[5.0, 6.0, 7.0], 1, 4).unwrap();
        assert_eq!(out, vec![7.0, 7.0, 7.0, 7.0]);
        // last season repeats
        let out = seasonal_naive(&[1.0, 2.0, 10.0, 20.0, 30.0], 3, 3).unwrap();
        assert_eq!(out, vec![10.0, 20.0, 30.0]);
        // beyond one season wraps
        let out = seasonal_naive(&[10.0, 20.0], 2, 5).unwrap();
        assert_eq!(out, vec![10.0, 20.0, 10.0, 20.0, 10.0]);
        assert!(matches!(
            seasonal_naive(&[1.0, 2.0], 3, 1),
            Err(BenchError::SeasonTooLong { season: 3, len: 2 })
        ));
    }

    #[test]
    fn seasonal_naive_is_exact_on_periodic_series() {
        let season = 4;
        let series: Vec<f64> = (0..32).map(|t| (t % season) as f64 + 1.0).collect();
        let forecast = seasonal_naive(&series, season, 8).unwrap();
        for (h, &v) in forecast.iter().enumerate() {
            let expect = ((32 + h) % season) as f64 + 1.0;
            assert_eq!(v, expect);
        }
    }

    #[test]
    fn sample_quality_zero_for_identical_windows() {
        let w = Array2::from_shape_fn((40, 2), |(t, r)| ((t * (r + 1)) as f64 * 0.37).sin());
        let regions = vec!["a".to_string(), "b".to_string()];
        let series = vec![w.column(0).to_vec(), w.column(1).to_vec()];
        let q = sample_quality(
            std::slice::from_ref(&w),
            std::slice::from_ref(&w),
            &regions,
            series,
        )
        .unwrap();
        assert_eq!(q.per_region.len(), 2);
        for r in &q.per_region {
            assert_eq!(r.dtw_mean, 0.0);
        }
    }
}
