//! Per-region min-max scaling to [0, 1], fit on training rows only.

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use super::{DataError, TimeSeriesPanel, WindowBatch};

/// Per-region affine transform `(x − shift) / scale`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScaleParams {
    pub shift: Vec<f64>,
    pub scale: Vec<f64>,
    /// Regions whose fit rows were constant (scale forced to 1).
    pub constant: Vec<bool>,
}

impl ScaleParams {
    pub fn n_regions(&self) -> usize {
        self.shift.len()
    }

    pub fn scale_value(&self, region: usize, x: f64) -> f64 {
        (x - self.shift[region]) / self.scale[region]
    }

    pub fn unscale_value(&self, region: usize, x: f64) -> f64 {
        x * self.scale[region] + self.shift[region]
    }
}

/// Fit per-region min-max parameters on panel rows `[0, fit_rows)`.
/// A constant region gets `scale = 1`, `shift = min`, and a flag.
pub fn fit_scale(panel: &TimeSeriesPanel, fit_rows: usize) -> Result<ScaleParams, DataError> {
    if fit_rows < 2 || fit_rows > panel.n_steps() {
        return Err(DataError::InvalidPanel(format!(
            "fit_rows = {fit_rows} outside [2, {}]",
            panel.n_steps()
        )));
    }
    let values = panel.values();
    let n = panel.n_regions();
    let mut shift = Vec::with_capacity(n);
    let mut scale = Vec::with_capacity(n);
    let mut constant = Vec::with_capacity(n);
    for j in 0..n {
        let col = values.column(j);
        let mut lo = f64::INFINITY;
        let mut hi = f64::NEG_INFINITY;
        for &v in col.iter().take(fit_rows) {
            lo = lo.min(v);
            hi = hi.max(v);
        }
        let range = hi - lo;
        if range == 0.0 {
            shift.push(lo);
            scale.push(1.0);
            constant.push(true);
        } else {
            shift.push(lo);
            scale.push(range);
            constant.push(false);
        }
    }
    Ok(ScaleParams {
        shift,
        scale,
        constant,
    })
}

fn map_matrix(m: &Array2<f64>, params: &ScaleParams, forward: bool) -> Array2<f64> {
    let mut out = m.clone();
    for ((_, j), v) in out.indexed_iter_mut() {
        *v = if forward {
            params.scale_value(j, *v)
        } else {
            params.unscale_value(j, *v)
        };
    }
    out
}

/// Scale every window of a batch into the [0, 1] fit domain.
pub fn apply_scale(batch: &WindowBatch, params: &ScaleParams) -> WindowBatch {
    WindowBatch {
        history: batch
            .history
            .iter()
            .map(|h| map_matrix(h, params, true))
            .collect(),
        horizon: batch
            .horizon
            .iter()
            .map(|h| map_matrix(h, params, true))
            .collect(),
        anchors: batch.anchors.clone(),
        q: batch.q,
        p: batch.p,
        scale: Some(params.clone()),
    }
}

/// Undo [`apply_scale`]; round-trips to within 1e-10.
pub fn invert_scale(batch: &WindowBatch, params: &ScaleParams) -> WindowBatch {
    WindowBatch {
        history: batch
            .history
            .iter()
            .map(|h| map_matrix(h, params, false))
            .collect(),
        horizon: batch
            .horizon
            .iter()
            .map(|h| map_matrix(h, params, false))
            .collect(),
        anchors: batch.anchors.clone(),
        q: batch.q,
        p: batch.p,
        scale: None,
    }
}

/// Scale a whole panel's values (training convenience; labels unchanged).
pub fn scale_panel_values(panel: &TimeSeriesPanel, params: &ScaleParams) -> Array2<f64> {
    map_matrix(panel.values(), params, true)
}

impl TimeSeriesPanel {
    /// Panel with the same labels and min-max-scaled values. Scaled values may
    /// lie outside [0, 1] on rows beyond the fit range; nonnegativity is not
    /// preserved, so this bypasses panel validation on values.
    pub fn scaled_copy(&self, params: &ScaleParams) -> TimeSeriesPanel {
        self.with_values(map_matrix(self.values(), params, true))
    }
}
