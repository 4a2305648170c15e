//! Sample-quality metrics (rescaled-range Hurst exponent, dynamic time
//! warping) and forecast metrics (MAE, MAPE, improvement rate), plus the
//! serializable evaluation report.

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("series too short: n = {n}, need >= {min}")]
    SeriesTooShort { n: usize, min: usize },
    #[error("constant series")]
    ConstantSeries,
    #[error("length mismatch: {a} vs {b}")]
    LengthMismatch { a: usize, b: usize },
    #[error("actual value at index {index} is within {eps} of zero")]
    ZeroActual { index: usize, eps: f64 },
    #[error("baseline MAPE must be positive, got {0}")]
    ZeroBaseline(f64),
}

const HURST_MIN_LEN: usize = 32;
const HURST_MIN_BLOCK: usize = 8;
const MAPE_EPS: f64 = 1e-8;

/// Rescaled-range Hurst exponent.
///
/// Blocks of sizes `{2^k : 8 <= 2^k <= n/2}`; per block, R is the range of
/// mean-adjusted cumulative sums and S the block standard deviation; the
/// estimate is the least-squares slope of log(mean R/S) against log(size).
pub fn hurst(x: &[f64]) -> Result<f64, MetricsError> {
    let n = x.len();
    if n < HURST_MIN_LEN {
        return Err(MetricsError::SeriesTooShort {
            n,
            min: HURST_MIN_LEN,
        });
    }
    if x.iter().all(|&v| v == x[0]) {
        return Err(MetricsError::ConstantSeries);
    }
    let mut log_size = Vec::new();
    let mut log_rs = Vec::new();
    let mut size = HURST_MIN_BLOCK;
    while size <= n / 2 {
        let blocks = n / size;
        let mut sum = 0.0;
        let mut count = 0usize;
        for b in 0..blocks {
            let blk = &x[b * size..(b + 1) * size];
            let mean = blk.iter().sum::<f64>() / size as f64;
            let mut cum = 0.0;
            let mut lo = f64::INFINITY;
            let mut hi = f64::NEG_INFINITY;
            let mut var = 0.0;
            for &v in blk {
                cum += v - mean;
                lo = lo.min(cum);
                hi = hi.max(cum);
                var += (v - mean) * (v - mean);
            }
            let sd = (var / size as f64).sqrt();
            if sd > 0.0 {
                sum += (hi - lo) / sd;
                count += 1;
            }
        }
        if count > 0 {
            log_size.push((size as f64).ln());
            log_rs.push((sum / count as f64).ln());
        }
        size *= 2;
    }
    if log_size.len() < 2 {
        return Err(MetricsError::ConstantSeries);
    }
    Ok(ols_slope(&log_size, &log_rs))
}

fn ols_slope(x: &[f64], y: &[f64]) -> f64 {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let mut num = 0.0;
    let mut den = 0.0;
    for (&xi, &yi) in x.iter().zip(y.iter()) {
        num += (xi - mx) * (yi - my);
        den += (xi - mx) * (xi - mx);
    }
    num / den
}

/// Dynamic time warping distance: the square root of the minimum cumulative
/// squared difference over monotone warping paths with steps
/// {(1,0), (0,1), (1,1)}.
pub fn dtw(x: &[f64], y: &[f64]) -> f64 {
    assert!(!x.is_empty() && !y.is_empty(), "dtw needs nonempty series");
    let n = x.len();
    let m = y.len();
    // One rolling row of the DP table.
    let mut prev = vec![f64::INFINITY; m + 1];
    let mut cur = vec![f64::INFINITY; m + 1];
    prev[0] = 0.0;
    for i in 1..=n {
        cur[0] = f64::INFINITY;
        for j in 1..=m {
            let d = x[i - 1] - y[j - 1];
            let best = prev[j].min(cur[j - 1]).min(prev[j - 1]);
            cur[j] = d * d + best;
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[m].sqrt()
}

/// Mean absolute error over paired vectors.
pub fn mae(actual: &[f64], predicted: &[f64]) -> Result<f64, MetricsError> {
    if actual.len() != predicted.len() {
        return Err(MetricsError::LengthMismatch {
            a: actual.len(),
            b: predicted.len(),
        });
    }
    assert!(!actual.is_empty(), "mae needs nonempty vectors");
    let sum: f64 = actual
        .iter()
        .zip(predicted.iter())
        .map(|(a, p)| (a - p).abs())
        .sum();
    Ok(sum / actual.len() as f64)
}

/// Mean absolute percentage error as a fraction (0.094, not 9.4%).
/// Errors with [`MetricsError::ZeroActual`] when any |actual| < 1e-8.
pub fn mape(actual: &[f64], predicted: &[f64]) -> Result<f64, MetricsError> {
    if actual.len() != predicted.len() {
        return Err(MetricsError::LengthMismatch {
            a: actual.len(),
            b: predicted.len(),
        });
    }
    assert!(!actual.is_empty(), "mape needs nonempty vectors");
    let mut sum = 0.0;
    for (i, (a, p)) in actual.iter().zip(predicted.iter()).enumerate() {
        if a.abs() < MAPE_EPS {
            return Err(MetricsError::ZeroActual {
                index: i,
                eps: MAPE_EPS,
            });
        }
        sum += ((a - p) / a).abs();
    }
    Ok(sum / actual.len() as f64)
}

/// Percent improvement of `ours` over `baseline`:
/// `100 · (baseline − ours) / baseline`. Positive means ours is better.
pub fn improvement_rate(baseline: f64, ours: f64) -> Result<f64, MetricsError> {
    if baseline <= 0.0 {
        return Err(MetricsError::ZeroBaseline(baseline));
    }
    Ok(100.0 * (baseline - ours) / baseline)
}

/// Clamp a Hurst estimate into the reportable range [0, 1.5].
pub fn clamp_hurst(h: f64) -> f64 {
    h.clamp(0.0, 1.5)
}

// ----- evaluation report -----

/// Per-(region, horizon, model) forecast errors.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ForecastMetrics {
    pub region: String,
    pub horizon: usize,
    pub model: String,
    pub mae: f64,
    pub mape: f64,
}

/// Per-(model, horizon) errors aggregated over regions.
///
/// `mape` averages per-region MAPE (windows first, then regions);
/// `mape_flat` averages over all window×region pairs directly.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AggregateMetrics {
    pub model: String,
    pub horizon: usize,
    pub mae: f64,
    pub mape: f64,
    pub mape_flat: f64,
}

/// Improvement of the primary model over one baseline.
/// `horizon = None` is the all-horizon average (the headline number).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImprovementEntry {
    pub baseline: String,
    pub horizon: Option<usize>,
    pub ir_mae: f64,
    pub ir_mape: f64,
}

/// Generated-sample quality for one region.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegionQuality {
    pub region: String,
    pub hurst_real: Option<f64>,
    pub hurst_virtual: Option<f64>,
    /// Mean DTW from each virtual window to its nearest real window.
    pub dtw_mean: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
pub struct SampleQuality {
    pub per_region: Vec<RegionQuality>,
}

/// The evaluation output record; serializes to JSON with stable key order
/// (struct declaration order) so identical runs are byte-identical.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub schema_version: u32,
    pub q: usize,
    pub p: usize,
    pub horizons: Vec<usize>,
    pub models: Vec<String>,
    pub regions: Vec<String>,
    /// Regions whose training segment was constant (scale fallback applied).
    pub constant_regions: Vec<String>,
    pub forecasts: Vec<ForecastMetrics>,
    pub aggregates: Vec<AggregateMetrics>,
    pub improvement: Vec<ImprovementEntry>,
    pub sample_quality: Option<SampleQuality>,
}

impl MetricReport {
    pub const SCHEMA_VERSION: u32 = 1;

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serialization")
    }

    pub fn from_json(s: &str) -> Result<Self, serde_json::Error> {
        serde_json::from_str(s)
    }

    /// Check the report's numeric invariants: errors nonnegative and finite,
    /// Hurst estimates inside the reportable range, DTW nonnegative.
    pub fn validate(&self) -> Result<(), String> {
        if self.schema_version != Self::SCHEMA_VERSION {
            return Err(format!("schema_version {}", self.schema_version));
        }
        for f in &self.forecasts {
            if !(f.mae.is_finite() && f.mae >= 0.0) || !(f.mape.is_finite() && f.mape >= 0.0) {
                return Err(format!(
                    "bad forecast metrics for {}/{}/{}",
                    f.region, f.horizon, f.model
                ));
            }
        }
        for a in &self.aggregates {
            if !(a.mae.is_finite() && a.mae >= 0.0)
                || !(a.mape.is_finite() && a.mape >= 0.0)
                || !(a.mape_flat.is_finite() && a.mape_flat >= 0.0)
            {
                return Err(format!("bad aggregate for {}/{}", a.model, a.horizon));
            }
        }
        for i in &self.improvement {
            if !i.ir_mae.is_finite() || !i.ir_mape.is_finite() {
                return Err(format!("bad improvement entry vs {}", i.baseline));
            }
        }
        if let Some(sq) = &self.sample_quality {
            for r in &sq.per_region {
                if !(r.dtw_mean.is_finite() && r.dtw_mean >= 0.0) {
                    return Err(format!("bad dtw for {}", r.region));
                }
                for h in [r.hurst_real, r.hurst_virtual].into_iter().flatten() {
                    if !(0.0..=1.5).contains(&h) {
                        return Err(format!("hurst {h} outside [0, 1.5] for {}", r.region));
                    }
                }
            }
        }
        Ok(())
    }

    /// Flat `region,horizon,model,mae,mape` CSV of the per-region block.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("region,horizon,model,mae,mape\n");
        for f in &self.forecasts {
            out.push_str(&format!(
                "{},{},{},{},{}\n",
                f.region, f.horizon, f.model, f.mae, f.mape
            ));
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha20Rng;
    use rand_distr::StandardNormal;

    #[test]
    fn hurst_white_noise_near_half() {
        let mut rng = ChaCha20Rng::seed_from_u64(1000);
        let x: Vec<f64> = (0..4096).map(|_| rng.sample(StandardNormal)).collect();
        let h = hurst(&x).unwrap();
        assert!((h - 0.5).abs() <= 0.1, "H = {h}");
    }

    #[test]
    fn hurst_random_walk_near_one() {
        let mut rng = ChaCha20Rng::seed_from_u64(3000);
        let mut cum = 0.0;
        let x: Vec<f64> = (0..4096)
            .map(|_| {
                let e: f64 = rng.sample(StandardNormal);
                cum += e;
                cum
            })
            .collect();
        let h = hurst(&x).unwrap();
        assert!((h - 1.0).abs() <= 0.1, "H = {h}");
    }

    #[test]
    fn hurst_guards() {
        assert!(matches!(
            hurst(&[1.0; 16]),
            Err(MetricsError::SeriesTooShort { .. })
        ));
        assert!(matches!(
            hurst(&[2.5; 64]),
            Err(MetricsError::ConstantSeries)
        ));
    }

    #[test]
    fn hurst_is_affine_invariant() {
        let mut rng = ChaCha20Rng::seed_from_u64(77);
        let x: Vec<f64> = (0..1024).map(|_| rng.sample(StandardNormal)).collect();
        let base = hurst(&x).unwrap();
        let moved: Vec<f64> = x.iter().map(|v| 3.5 * v + 100.0).collect();
        assert!((base - hurst(&moved).unwrap()).abs() < 1e-6);
    }

    #[test]
    fn dtw_basic_identities() {
        let x = [1.0, 2.0, 3.0, 2.0];
        assert_eq!(dtw(&x, &x), 0.0);
        // D(3,2) = 1 by hand.
        assert!((dtw(&[1.0, 2.0, 3.0], &[1.0, 3.0]) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn dtw_is_symmetric_and_bounded_by_euclidean() {
        let mut rng = ChaCha20Rng::seed_from_u64(12);
        for _ in 0..100 {
            let n = 2 + (rng.random::<u32>() % 6) as usize;
            let m = 2 + (rng.random::<u32>() % 6) as usize;
            let x: Vec<f64> = (0..n).map(|_| rng.random::<f64>() * 4.0).collect();
            let y: Vec<f64> = (0..m).map(|_| rng.random::<f64>() * 4.0).collect();
            let d1 = dtw(&x, &y);
            let d2 = dtw(&y, &x);
            assert!((d1 - d2).abs() < 1e-12);
            assert!(d1 >= 0.0);
        }
        // Equal lengths: the diagonal path is admissible.
        for _ in 0..50 {
            let n = 3 + (rng.random::<u32>() % 5) as usize;
            let x: Vec<f64> = (0..n).map(|_| rng.random::<f64>() * 4.0).collect();
            let y: Vec<f64> = (0..n).map(|_| rng.random::<f64>() * 4.0).collect();
            let euclid = x
                .iter()
                .zip(y.iter())
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f64>()
                .sqrt();
            assert!(dtw(&x, &y) <= euclid + 1e-12);
        }
    }

    #[test]
    fn mae_mape_arithmetic_and_guards() {
        assert_eq!(mae(&[1.0, 2.0], &[1.0, 2.0]).unwrap(), 0.0);
        assert_eq!(mape(&[1.0, 2.0], &[1.0, 2.0]).unwrap(), 0.0);
        let m = mae(&[100.0, 200.0], &[110.0, 180.0]).unwrap();
        assert!((m - 15.0).abs() < 1e-12);
        let m = mape(&[100.0, 200.0], &[110.0, 180.0]).unwrap();
        assert!((m - 0.1).abs() < 1e-12);
        assert!(matches!(
            mape(&[0.0, 1.0], &[1.0, 1.0]),
            Err(MetricsError::ZeroActual { index: 0, .. })
        ));
        assert!(matches!(
            mae(&[1.0], &[1.0, 2.0]),
            Err(MetricsError::LengthMismatch { .. })
        ));
    }

    #[test]
    fn mae_scales_linearly_and_is_permutation_equivariant() {
        let a = [3.0, 9.0, 4.0];
        let p = [2.5, 10.0, 3.0];
        let base = mae(&a, &p).unwrap();
        let a2: Vec<f64> = a.iter().map(|v| 7.0 * v).collect();
        let p2: Vec<f64> = p.iter().map(|v| 7.0 * v).collect();
        assert!((mae(&a2, &p2).unwrap() - 7.0 * base).abs() < 1e-12);
        let perm_a = [9.0, 4.0, 3.0];
        let perm_p = [10.0, 3.0, 2.5];
        assert!((mae(&perm_a, &perm_p).unwrap() - base).abs() < 1e-12);
        assert!(
            (mape(&perm_a, &perm_p).unwrap() - mape(&a, &p).unwrap()).abs() < 1e-12
        );
    }

    #[test]
    fn improvement_rate_convention() {
        assert_eq!(improvement_rate(0.2, 0.2).unwrap(), 0.0);
        assert_eq!(improvement_rate(0.2, 0.1).unwrap(), 50.0);
        assert!(matches!(
            improvement_rate(0.0, 0.1),
            Err(MetricsError::ZeroBaseline(_))
        ));
    }

    #[test]
    fn report_round_trips_through_json() {
        let report = MetricReport {
            schema_version: MetricReport::SCHEMA_VERSION,
            q: 30,
            p: 3,
            horizons: vec![1, 3],
            models: vec!["ours".into(), "seasonal_naive".into()],
            regions: vec!["a".into(), "b".into()],
            constant_regions: vec![],
            forecasts: vec![ForecastMetrics {
                region: "a".into(),
                horizon: 1,
                model: "ours".into(),
                mae: 1.5,
                mape: 0.1,
            }],
            aggregates: vec![],
            improvement: vec![ImprovementEntry {
                baseline: "seasonal_naive".into(),
                horizon: None,
                ir_mae: 10.0,
                ir_mape: 12.5,
            }],
            sample_quality: None,
        };
        let json = report.to_json();
        let back = MetricReport::from_json(&json).unwrap();
        assert_eq!(report, back);
        assert_eq!(json, back.to_json());
    }
}
