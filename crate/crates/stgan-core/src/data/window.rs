//! Stride-1 rolling windows over a panel.

use ndarray::{s, Array2};

use super::{DataError, ScaleParams, TimeSeriesPanel};

/// A batch of (q-step history, p-step horizon) window pairs.
#[derive(Debug, Clone, PartialEq)]
pub struct WindowBatch {
    /// Per-window Q×N history.
    pub history: Vec<Array2<f64>>,
    /// Per-window P×N horizon.
    pub horizon: Vec<Array2<f64>>,
    /// Index of the last history row of each window in the source panel.
    pub anchors: Vec<usize>,
    pub q: usize,
    pub p: usize,
    /// Scaling applied to the values, when any.
    pub scale: Option<ScaleParams>,
}

impl WindowBatch {
    pub fn len(&self) -> usize {
        self.history.len()
    }

    pub fn is_empty(&self) -> bool {
        self.history.is_empty()
    }

    pub fn n_regions(&self) -> usize {
        self.history.first().map_or(0, |h| h.ncols())
    }

    /// Sub-batch of the given window indices (panics on out-of-range).
    pub fn select(&self, idx: &[usize]) -> WindowBatch {
        WindowBatch {
            history: idx.iter().map(|&i| self.history[i].clone()).collect(),
            horizon: idx.iter().map(|&i| self.horizon[i].clone()).collect(),
            anchors: idx.iter().map(|&i| self.anchors[i]).collect(),
            q: self.q,
            p: self.p,
            scale: self.scale.clone(),
        }
    }

    /// History rows and horizon rows of window `i` stacked into one
    /// (q+p)×N matrix.
    pub fn full_window(&self, i: usize) -> Array2<f64> {
        let mut out = Array2::zeros((self.q + self.p, self.n_regions()));
        out.slice_mut(s![..self.q, ..]).assign(&self.history[i]);
        out.slice_mut(s![self.q.., ..]).assign(&self.horizon[i]);
        out
    }
}

/// Cut every stride-1 window: exactly `T − q − p + 1` of them; window `k`
/// has history rows `[k, k+q)` and horizon rows `[k+q, k+q+p)`.
pub fn make_windows(
    panel: &TimeSeriesPanel,
    q: usize,
    p: usize,
) -> Result<WindowBatch, DataError> {
    let t = panel.n_steps();
    if q < 2 {
        return Err(DataError::InvalidPanel(format!("q = {q}, need q >= 2")));
    }
    if p < 1 {
        return Err(DataError::InvalidPanel(format!("p = {p}, need p >= 1")));
    }
    if q + p > t {
        return Err(DataError::WindowTooLong {
            needed: q + p,
            have: t,
        });
    }
    let count = t - q - p + 1;
    let values = panel.values();
    let mut history = Vec::with_capacity(count);
    let mut horizon = Vec::with_capacity(count);
    let mut anchors = Vec::with_capacity(count);
    for k in 0..count {
        history.push(values.slice(s![k..k + q, ..]).to_owned());
        horizon.push(values.slice(s![k + q..k + q + p, ..]).to_owned());
        anchors.push(k + q - 1);
    }
    Ok(WindowBatch {
        history,
        horizon,
        anchors,
        q,
        p,
        scale: None,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{synth_panel, SynthSpec};

    fn panel(t: usize) -> TimeSeriesPanel {
        let spec = SynthSpec {
            seasonal_period: 7,
            ..SynthSpec::default()
        };
        synth_panel(3, t, 1, &spec).unwrap()
    }

    #[test]
    fn window_count_matches_formula() {
        let b = make_windows(&panel(100), 90, 1).unwrap();
        assert_eq!(b.len(), 10);
        let b = make_windows(&panel(144), 12, 12).unwrap();
        assert_eq!(b.len(), 121);
    }

    #[test]
    fn too_long_window_rejected() {
        let p = panel(40);
        let small = p.slice_rows(0, 5).unwrap();
        assert!(matches!(
            make_windows(&small, 4, 2),
            Err(DataError::WindowTooLong { needed: 6, have: 5 })
        ));
    }

    #[test]
    fn windows_are_contiguous_and_stride_one() {
        let p = panel(50);
        let b = make_windows(&p, 8, 3).unwrap();
        assert_eq!(b.len(), 50 - 8 - 3 + 1);
        let v = p.values();
        for (k, (h, z)) in b.history.iter().zip(b.horizon.iter()).enumerate() {
            assert_eq!(h, &v.slice(s![k..k + 8, ..]).to_owned());
            assert_eq!(z, &v.slice(s![k + 8..k + 11, ..]).to_owned());
            assert_eq!(b.anchors[k], k + 7);
        }
        // Adjacent windows share q+p−1 rows.
        for k in 1..b.len() {
            let prev = b.full_window(k - 1);
            let cur = b.full_window(k);
            assert_eq!(
                prev.slice(s![1.., ..]).to_owned(),
                cur.slice(s![..10, ..]).to_owned()
            );
        }
    }
}
