//! Spatiotemporal GAN: graph-convolution + gated-recurrence generator and
//! critic, Wasserstein losses, and the gradient penalty.

mod forward;
mod loss;

pub use forward::{
    condition_window, discriminate, discriminator_forward, gcn_forward, generate,
    generator_forward, lstm_forward, stack_windows, unstack_windows, DiscriminatorVars,
    GcnVars, GeneratorVars, LstmVars,
};
pub use loss::{d_loss, g_loss, gradient_penalty};

use ndarray::Array2;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::opt::AdamState;

#[derive(Debug, Error)]
pub enum StganError {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("non-finite state in forward pass")]
    NonFiniteState,
}

/// Network widths. `f1`/`f2` are the two graph-convolution feature widths,
/// `hidden` the recurrent state width.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GanConfig {
    pub f1: usize,
    pub f2: usize,
    pub hidden: usize,
}

impl Default for GanConfig {
    fn default() -> Self {
        GanConfig {
            f1: 32,
            f2: 64,
            hidden: 64,
        }
    }
}

/// Generator input channels: noise plus conditioning window.
pub const GEN_CHANNELS: usize = 2;
/// Critic input channels: the demand series alone.
pub const DISC_CHANNELS: usize = 1;

/// Two-layer graph-convolution weights.
#[derive(Debug, Clone, PartialEq)]
pub struct GcnParams {
    /// in_channels×F1 (1 for the critic, 2 for the conditioned generator).
    pub w0: Array2<f64>,
    /// F1×F2.
    pub w1: Array2<f64>,
}

/// Gated-recurrence weights: per-gate input maps (F2×d), recurrent maps
/// (d×d), and biases (1×d).
#[derive(Debug, Clone, PartialEq)]
pub struct LstmParams {
    pub w_xi: Array2<f64>,
    pub w_xf: Array2<f64>,
    pub w_xo: Array2<f64>,
    pub w_xc: Array2<f64>,
    pub w_hi: Array2<f64>,
    pub w_hf: Array2<f64>,
    pub w_ho: Array2<f64>,
    pub w_hc: Array2<f64>,
    pub b_i: Array2<f64>,
    pub b_f: Array2<f64>,
    pub b_o: Array2<f64>,
    pub b_c: Array2<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GeneratorParams {
    pub gcn: GcnParams,
    pub lstm: LstmParams,
    /// Per-step output head d×1 applied to every hidden state.
    pub w_g: Array2<f64>,
    pub b_g: Array2<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DiscriminatorParams {
    pub gcn: GcnParams,
    pub lstm: LstmParams,
    /// Score head d×1 applied to the final hidden state.
    pub w_score: Array2<f64>,
    pub b_score: Array2<f64>,
}

/// Generator + critic parameters with their optimizer state.
#[derive(Debug, Clone, PartialEq)]
pub struct GanState {
    pub config: GanConfig,
    pub generator: GeneratorParams,
    pub discriminator: DiscriminatorParams,
    pub opt_g: AdamState,
    pub opt_d: AdamState,
    pub iter: u64,
    pub seed: u64,
}

/// Noise and conditioning input for one generated window, both Q×N.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseWindow {
    pub z: Array2<f64>,
    pub y: Array2<f64>,
}

impl NoiseWindow {
    /// Standard-normal noise with the given condition window.
    pub fn sample(rng: &mut ChaCha20Rng, y: Array2<f64>) -> NoiseWindow {
        let z = Array2::from_shape_fn(y.dim(), |_| rng.sample(StandardNormal));
        NoiseWindow { z, y }
    }
}

fn glorot(rng: &mut ChaCha20Rng, rows: usize, cols: usize) -> Array2<f64> {
    let sd = (2.0 / (rows + cols) as f64).sqrt();
    Array2::from_shape_fn((rows, cols), |_| {
        let e: f64 = rng.sample(StandardNormal);
        sd * e
    })
}

fn head_init(rng: &mut ChaCha20Rng, rows: usize, cols: usize) -> Array2<f64> {
    Array2::from_shape_fn((rows, cols), |_| {
        let e: f64 = rng.sample(StandardNormal);
        0.01 * e
    })
}

impl LstmParams {
    fn init(rng: &mut ChaCha20Rng, f2: usize, d: usize) -> LstmParams {
        LstmParams {
            w_xi: glorot(rng, f2, d),
            w_xf: glorot(rng, f2, d),
            w_xo: glorot(rng, f2, d),
            w_xc: glorot(rng, f2, d),
            w_hi: glorot(rng, d, d),
            w_hf: glorot(rng, d, d),
            w_ho: glorot(rng, d, d),
            w_hc: glorot(rng, d, d),
            b_i: Array2::zeros((1, d)),
            // Forget gate opens at init so early gradients flow through time.
            b_f: Array2::ones((1, d)),
            b_o: Array2::zeros((1, d)),
            b_c: Array2::zeros((1, d)),
        }
    }
}

impl GeneratorParams {
    pub fn init(rng: &mut ChaCha20Rng, cfg: &GanConfig) -> GeneratorParams {
        GeneratorParams {
            gcn: GcnParams {
                w0: glorot(rng, GEN_CHANNELS, cfg.f1),
                w1: glorot(rng, cfg.f1, cfg.f2),
            },
            lstm: LstmParams::init(rng, cfg.f2, cfg.hidden),
            w_g: head_init(rng, cfg.hidden, 1),
            b_g: Array2::zeros((1, 1)),
        }
    }

    /// Tensors in the fixed traversal order shared by the optimizer,
    /// checkpoints, and gradient extraction.
    pub fn tensors(&self) -> Vec<&Array2<f64>> {
        let mut v = vec![&self.gcn.w0, &self.gcn.w1];
        v.extend(self.lstm.tensor_list());
        v.push(&self.w_g);
        v.push(&self.b_g);
        v
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Array2<f64>> {
        let mut v: Vec<&mut Array2<f64>> = vec![&mut self.gcn.w0, &mut self.gcn.w1];
        let LstmParams {
            w_xi,
            w_xf,
            w_xo,
            w_xc,
            w_hi,
            w_hf,
            w_ho,
            w_hc,
            b_i,
            b_f,
            b_o,
            b_c,
        } = &mut self.lstm;
        v.extend([
            w_xi, w_xf, w_xo, w_xc, w_hi, w_hf, w_ho, w_hc, b_i, b_f, b_o, b_c,
        ]);
        v.push(&mut self.w_g);
        v.push(&mut self.b_g);
        v
    }
}

impl DiscriminatorParams {
    pub fn init(rng: &mut ChaCha20Rng, cfg: &GanConfig) -> DiscriminatorParams {
        DiscriminatorParams {
            gcn: GcnParams {
                w0: glorot(rng, DISC_CHANNELS, cfg.f1),
                w1: glorot(rng, cfg.f1, cfg.f2),
            },
            lstm: LstmParams::init(rng, cfg.f2, cfg.hidden),
            w_score: head_init(rng, cfg.hidden, 1),
            b_score: Array2::zeros((1, 1)),
        }
    }

    pub fn tensors(&self) -> Vec<&Array2<f64>> {
        let mut v = vec![&self.gcn.w0, &self.gcn.w1];
        v.extend(self.lstm.tensor_list());
        v.push(&self.w_score);
        v.push(&self.b_score);
        v
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Array2<f64>> {
        let mut v: Vec<&mut Array2<f64>> = vec![&mut self.gcn.w0, &mut self.gcn.w1];
        let LstmParams {
            w_xi,
            w_xf,
            w_xo,
            w_xc,
            w_hi,
            w_hf,
            w_ho,
            w_hc,
            b_i,
            b_f,
            b_o,
            b_c,
        } = &mut self.lstm;
        v.extend([
            w_xi, w_xf, w_xo, w_xc, w_hi, w_hf, w_ho, w_hc, b_i, b_f, b_o, b_c,
        ]);
        v.push(&mut self.w_score);
        v.push(&mut self.b_score);
        v
    }
}

impl LstmParams {
    fn tensor_list(&self) -> Vec<&Array2<f64>> {
        vec![
            &self.w_xi, &self.w_xf, &self.w_xo, &self.w_xc, &self.w_hi, &self.w_hf, &self.w_ho,
            &self.w_hc, &self.b_i, &self.b_f, &self.b_o, &self.b_c,
        ]
    }
}

impl GanState {
    /// Seeded initialization of both networks and their optimizer state.
    pub fn init(config: GanConfig, seed: u64) -> GanState {
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        let generator = GeneratorParams::init(&mut rng, &config);
        let discriminator = DiscriminatorParams::init(&mut rng, &config);
        let opt_g = AdamState::for_tensors(&generator.tensors());
        let opt_d = AdamState::for_tensors(&discriminator.tensors());
        GanState {
            config,
            generator,
            discriminator,
            opt_g,
            opt_d,
            iter: 0,
            seed,
        }
    }
}
