//! Encoder-only Transformer predictor with causal convolution, sinusoidal
//! positional encoding, global average pooling, and a non-autoregressive
//! multi-step head. Each region's univariate window is processed separately
//! with shared weights.

mod model;

pub use model::{
    attention_head, causal_conv, embed_series, encoder_forward, forecast, forecast_batch,
    forecast_with_stats, global_pool, pe_matrix, positional_encoding, predictor_forward,
    ForwardStats, ForwardTrace, PredictorVars,
};

use ndarray::Array2;
use rand::Rng;
use rand_chacha::ChaCha20Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum PredictorError {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("non-finite activation")]
    NonFiniteActivation,
    #[error("invalid predictor config: {0}")]
    InvalidConfig(String),
}

/// Architecture hyperparameters. `paper` carries the published defaults;
/// `desk_scale` is the down-scaled variant used by fast test runs.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PredictorConfig {
    pub d_model: usize,
    pub n_heads: usize,
    pub n_layers: usize,
    pub d_ffn: usize,
    pub dropout: f64,
    pub conv_kernel: usize,
    /// Forecast horizon p.
    pub horizon: usize,
    /// History window q.
    pub window: usize,
}

impl PredictorConfig {
    /// Published defaults: model dimension 512, 8 heads, 6 layers, FFN 2048,
    /// dropout 0.1, kernel 3.
    pub fn paper(window: usize, horizon: usize) -> Self {
        PredictorConfig {
            d_model: 512,
            n_heads: 8,
            n_layers: 6,
            d_ffn: 2048,
            dropout: 0.1,
            conv_kernel: 3,
            horizon,
            window,
        }
    }

    /// Down-scaled configuration for minute-scale runs.
    pub fn desk_scale(window: usize, horizon: usize) -> Self {
        PredictorConfig {
            d_model: 64,
            n_heads: 4,
            n_layers: 2,
            d_ffn: 128,
            dropout: 0.0,
            conv_kernel: 3,
            horizon,
            window,
        }
    }

    pub fn d_k(&self) -> usize {
        self.d_model / self.n_heads
    }

    pub fn validate(&self) -> Result<(), PredictorError> {
        if self.d_model == 0 || self.n_heads == 0 || self.d_model % self.n_heads != 0 {
            return Err(PredictorError::InvalidConfig(format!(
                "d_model {} must be a positive multiple of n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if self.d_model % 2 != 0 {
            return Err(PredictorError::InvalidConfig(
                "d_model must be even for sin/cos positional encoding".into(),
            ));
        }
        if self.conv_kernel == 0 || self.conv_kernel % 2 == 0 {
            return Err(PredictorError::InvalidConfig(format!(
                "conv_kernel {} must be odd and >= 1",
                self.conv_kernel
            )));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(PredictorError::InvalidConfig(format!(
                "dropout {} outside [0, 1)",
                self.dropout
            )));
        }
        if self.window < 2 || self.horizon < 1 || self.n_layers == 0 {
            return Err(PredictorError::InvalidConfig(
                "need window >= 2, horizon >= 1, n_layers >= 1".into(),
            ));
        }
        Ok(())
    }
}

/// One encoder layer's parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerParams {
    pub w_q: Array2<f64>,
    pub w_k: Array2<f64>,
    pub w_v: Array2<f64>,
    pub w_o: Array2<f64>,
    pub ln1_gamma: Array2<f64>,
    pub ln1_beta: Array2<f64>,
    pub w_1: Array2<f64>,
    pub b_1: Array2<f64>,
    pub w_2: Array2<f64>,
    pub b_2: Array2<f64>,
    pub ln2_gamma: Array2<f64>,
    pub ln2_beta: Array2<f64>,
}

/// All predictor parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct PredictorState {
    pub config: PredictorConfig,
    pub w_e: Array2<f64>,
    pub b_e: Array2<f64>,
    /// Causal convolution taps; index τ multiplies the input delayed by τ.
    pub conv: Vec<Array2<f64>>,
    pub layers: Vec<LayerParams>,
    pub head_w1: Array2<f64>,
    pub head_b1: Array2<f64>,
    pub head_w2: Array2<f64>,
    pub head_b2: Array2<f64>,
    pub w_out: Array2<f64>,
    pub b_out: Array2<f64>,
}

fn glorot(rng: &mut ChaCha20Rng, rows: usize, cols: usize) -> Array2<f64> {
    let sd = (2.0 / (rows + cols) as f64).sqrt();
    Array2::from_shape_fn((rows, cols), |_| {
        let e: f64 = rng.sample(StandardNormal);
        sd * e
    })
}

impl PredictorState {
    pub fn init(config: PredictorConfig, rng: &mut ChaCha20Rng) -> Result<Self, PredictorError> {
        config.validate()?;
        let d = config.d_model;
        let k = config.conv_kernel;
        let conv_scale = 1.0 / (k as f64).sqrt();
        let conv = (0..k).map(|_| glorot(rng, d, d).mapv(|v| v * conv_scale)).collect();
        let layers = (0..config.n_layers)
            .map(|_| LayerParams {
                w_q: glorot(rng, d, d),
                w_k: glorot(rng, d, d),
                w_v: glorot(rng, d, d),
                w_o: glorot(rng, d, d),
                ln1_gamma: Array2::ones((1, d)),
                ln1_beta: Array2::zeros((1, d)),
                w_1: glorot(rng, d, config.d_ffn),
                b_1: Array2::zeros((1, config.d_ffn)),
                w_2: glorot(rng, config.d_ffn, d),
                b_2: Array2::zeros((1, d)),
                ln2_gamma: Array2::ones((1, d)),
                ln2_beta: Array2::zeros((1, d)),
            })
            .collect();
        Ok(PredictorState {
            config,
            w_e: glorot(rng, 1, d),
            b_e: Array2::zeros((1, d)),
            conv,
            layers,
            head_w1: glorot(rng, d, config.d_ffn),
            head_b1: Array2::zeros((1, config.d_ffn)),
            head_w2: glorot(rng, config.d_ffn, d),
            head_b2: Array2::zeros((1, d)),
            // Zero head: the untrained forecast is exactly zero in the
            // scaled domain.
            w_out: Array2::zeros((d, config.horizon)),
            b_out: Array2::zeros((1, config.horizon)),
        })
    }

    /// Tensors in the fixed traversal order shared by the optimizer,
    /// checkpoints, and gradient extraction.
    pub fn tensors(&self) -> Vec<&Array2<f64>> {
        let mut v: Vec<&Array2<f64>> = vec![&self.w_e, &self.b_e];
        v.extend(self.conv.iter());
        for l in &self.layers {
            v.extend([
                &l.w_q, &l.w_k, &l.w_v, &l.w_o, &l.ln1_gamma, &l.ln1_beta, &l.w_1, &l.b_1,
                &l.w_2, &l.b_2, &l.ln2_gamma, &l.ln2_beta,
            ]);
        }
        v.extend([
            &self.head_w1,
            &self.head_b1,
            &self.head_w2,
            &self.head_b2,
            &self.w_out,
            &self.b_out,
        ]);
        v
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Array2<f64>> {
        let mut v: Vec<&mut Array2<f64>> = vec![&mut self.w_e, &mut self.b_e];
        v.extend(self.conv.iter_mut());
        for l in &mut self.layers {
            let LayerParams {
                w_q,
                w_k,
                w_v,
                w_o,
                ln1_gamma,
                ln1_beta,
                w_1,
                b_1,
                w_2,
                b_2,
                ln2_gamma,
                ln2_beta,
            } = l;
            v.extend([
                w_q, w_k, w_v, w_o, ln1_gamma, ln1_beta, w_1, b_1, w_2, b_2, ln2_gamma, ln2_beta,
            ]);
        }
        v.extend([
            &mut self.head_w1,
            &mut self.head_b1,
            &mut self.head_w2,
            &mut self.head_b2,
            &mut self.w_out,
            &mut self.b_out,
        ]);
        v
    }
}
