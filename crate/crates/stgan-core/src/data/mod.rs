//! Multi-region demand panels: loading, synthesis, windowing, and scaling.

mod panel;
mod scale;
mod synth;
mod window;

pub use panel::{load_csv, Frequency, TimeSeriesPanel};
pub use scale::{apply_scale, fit_scale, invert_scale, scale_panel_values, ScaleParams};
pub use synth::{synth_panel, SynthSpec};
pub use window::{make_windows, WindowBatch};

use thiserror::Error;

/// Errors from panel construction, loading, synthesis, and windowing.
#[derive(Debug, Error)]
pub enum DataError {
    #[error("malformed header: {0}")]
    MalformedHeader(String),
    #[error("dates not strictly increasing at data row {row}")]
    NonMonotonicDates { row: usize },
    #[error("uneven timestamp spacing at data row {row}")]
    UnevenSpacing { row: usize },
    #[error("negative value at data row {row}, column {column}")]
    NegativeValue { row: usize, column: String },
    #[error("unparseable number at data row {row}, column {column}")]
    CellParse { row: usize, column: String },
    #[error("data row {row} has {got} fields, expected {expected}")]
    RaggedRow {
        row: usize,
        got: usize,
        expected: usize,
    },
    #[error("invalid synthetic spec: {0}")]
    InvalidSpec(String),
    #[error("window length q+p = {needed} exceeds panel length T = {have}")]
    WindowTooLong { needed: usize, have: usize },
    #[error("invalid panel: {0}")]
    InvalidPanel(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
}
