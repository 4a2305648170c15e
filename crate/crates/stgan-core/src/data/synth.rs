//! Seeded synthetic demand panels with seasonality, a shared latent factor,
//! and AR(1) noise, standing in for proprietary arrival data.

use chrono::NaiveDate;
use ndarray::Array2;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::panel::date_sequence;
use super::{DataError, Frequency, TimeSeriesPanel};

/// Generator settings. Region `n` at step `t` follows
/// `level + amp·sin(2πt/period + φ_n) + loading_n·f_t + e_{n,t}`
/// with `f` a shared AR(1) latent and `e` per-region AR(1) noise,
/// clipped at zero.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthSpec {
    pub base_level: f64,
    pub seasonal_period: usize,
    pub seasonal_amplitude: f64,
    /// Shared-factor loading per region; empty = alternating ±`loading_scale`.
    pub loadings: Vec<f64>,
    pub loading_scale: f64,
    /// AR(1) coefficient for both the shared factor and the noise.
    pub ar_coeff: f64,
    pub noise_scale: f64,
    pub start_date: NaiveDate,
    pub frequency: Frequency,
}

impl Default for SynthSpec {
    fn default() -> Self {
        SynthSpec {
            base_level: 100.0,
            seasonal_period: 12,
            seasonal_amplitude: 10.0,
            loadings: Vec::new(),
            loading_scale: 4.0,
            ar_coeff: 0.7,
            noise_scale: 1.0,
            start_date: NaiveDate::from_ymd_opt(2017, 1, 1).expect("valid date"),
            frequency: Frequency::Daily,
        }
    }
}

impl SynthSpec {
    fn validate(&self, n_regions: usize, n_steps: usize) -> Result<(), DataError> {
        if n_regions < 2 {
            return Err(DataError::InvalidSpec(format!(
                "n_regions = {n_regions}, need >= 2"
            )));
        }
        if !(0.0..1.0).contains(&self.ar_coeff) {
            return Err(DataError::InvalidSpec(format!(
                "ar_coeff = {}, need [0, 1)",
                self.ar_coeff
            )));
        }
        if self.seasonal_amplitude < 0.0 {
            return Err(DataError::InvalidSpec("negative seasonal_amplitude".into()));
        }
        if self.noise_scale < 0.0 {
            return Err(DataError::InvalidSpec("negative noise_scale".into()));
        }
        if self.seasonal_period == 0 {
            return Err(DataError::InvalidSpec("seasonal_period = 0".into()));
        }
        if n_steps < 4 * self.seasonal_period {
            return Err(DataError::InvalidSpec(format!(
                "n_steps = {n_steps} < 4 × seasonal_period = {}",
                4 * self.seasonal_period
            )));
        }
        if !self.loadings.is_empty() && self.loadings.len() != n_regions {
            return Err(DataError::InvalidSpec(format!(
                "{} loadings for {n_regions} regions",
                self.loadings.len()
            )));
        }
        Ok(())
    }

    fn region_loadings(&self, n_regions: usize) -> Vec<f64> {
        if !self.loadings.is_empty() {
            return self.loadings.clone();
        }
        (0..n_regions)
            .map(|n| {
                if n % 2 == 0 {
                    self.loading_scale
                } else {
                    -self.loading_scale
                }
            })
            .collect()
    }
}

/// Generate a deterministic panel from `(n_regions, n_steps, seed, spec)`.
pub fn synth_panel(
    n_regions: usize,
    n_steps: usize,
    seed: u64,
    spec: &SynthSpec,
) -> Result<TimeSeriesPanel, DataError> {
    spec.validate(n_regions, n_steps)?;
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let loadings = spec.region_loadings(n_regions);
    let phases: Vec<f64> = (0..n_regions)
        .map(|n| 2.0 * std::f64::consts::PI * n as f64 / n_regions as f64)
        .collect();

    let omega = 2.0 * std::f64::consts::PI / spec.seasonal_period as f64;
    let mut factor = 0.0_f64;
    let mut noise = vec![0.0_f64; n_regions];
    let mut values = Array2::zeros((n_steps, n_regions));
    for t in 0..n_steps {
        let eta: f64 = rng.sample(StandardNormal);
        factor = spec.ar_coeff * factor + eta;
        for (n, loading) in loadings.iter().enumerate() {
            let xi: f64 = rng.sample(StandardNormal);
            noise[n] = spec.ar_coeff * noise[n] + spec.noise_scale * xi;
            let v = spec.base_level
                + spec.seasonal_amplitude * (omega * t as f64 + phases[n]).sin()
                + loading * factor
                + noise[n];
            values[(t, n)] = v.max(0.0);
        }
    }

    let regions = (0..n_regions).map(|n| format!("region_{n:02}")).collect();
    let timestamps = date_sequence(spec.start_date, spec.frequency, n_steps);
    TimeSeriesPanel::new(values, timestamps, regions)
}
