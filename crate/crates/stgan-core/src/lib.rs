//! Virtual-sample generation and multi-region demand forecasting.
//!
//! The crate pairs a spatiotemporal GAN (graph convolution over per-window
//! correlation graphs + gated recurrence, trained with a gradient-penalty
//! critic) with an encoder-only causal-convolution Transformer predictor.
//! The two are trained jointly so predictor error shapes sample generation,
//! then evaluated with a rolling-window backtesting harness.

pub mod bench;
pub mod config;
pub mod data;
pub mod opt;
pub mod predictor;
pub mod metrics;
pub mod spatial;
pub mod stgan;
pub mod tensor;
pub mod train;
