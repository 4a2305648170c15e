//! Dynamic spatial weights: per-window Pearson correlation among regions and
//! its nonnegative, row-stochastic normalization for graph convolution.

use ndarray::Array2;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum SpatialError {
    #[error("series lengths differ: {x} vs {y}")]
    LengthMismatch { x: usize, y: usize },
    #[error("window length {0} too short, need >= 2")]
    WindowTooShort(usize),
    #[error("raw weight matrix must be symmetric with entries in [-1, 1]")]
    InvalidRaw,
}

/// Sample Pearson coefficient plus a degenerate-variance flag.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PearsonCoeff {
    pub value: f64,
    /// True when either series had zero variance inside the window
    /// (the value is then 0 by convention).
    pub degenerate: bool,
}

/// How raw correlations are mapped to convolution weights.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WeightNormalization {
    /// Affine map to [0,1] then row normalization (row-stochastic).
    #[default]
    AffineRow,
    /// Absolute value then row normalization.
    AbsRow,
    /// Affine map to [0,1] then symmetric degree normalization D^-1/2 S D^-1/2.
    SymmetricDegree,
}

/// Per-window N×N weights consumed by graph convolution.
#[derive(Debug, Clone, PartialEq)]
pub struct SpatialWeights {
    /// Pearson coefficients a_ij in [-1, 1]; symmetric.
    pub raw: Array2<f64>,
    /// Normalized nonnegative weights (row-stochastic in the default mode).
    pub normalized: Array2<f64>,
    /// Index of the window's last history row in the source panel.
    pub window_anchor: usize,
    /// Window length the weights were computed over.
    pub window_len: usize,
    /// Regions constant within this window.
    pub degenerate: Vec<bool>,
}

impl SpatialWeights {
    /// Compute raw and normalized weights from one Q×N history window.
    pub fn from_window(
        history: &Array2<f64>,
        window_anchor: usize,
        normalization: WeightNormalization,
    ) -> Result<SpatialWeights, SpatialError> {
        let (raw, degenerate) = build_weights(history)?;
        let normalized = normalize_weights(&raw, normalization)?;
        Ok(SpatialWeights {
            raw,
            normalized,
            window_anchor,
            window_len: history.nrows(),
            degenerate,
        })
    }
}

/// Sample Pearson correlation of two equal-length windows.
pub fn pearson_window(x: &[f64], y: &[f64]) -> Result<PearsonCoeff, SpatialError> {
    if x.len() != y.len() {
        return Err(SpatialError::LengthMismatch {
            x: x.len(),
            y: y.len(),
        });
    }
    if x.len() < 2 {
        return Err(SpatialError::WindowTooShort(x.len()));
    }
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let mut cov = 0.0;
    let mut vx = 0.0;
    let mut vy = 0.0;
    for (&a, &b) in x.iter().zip(y.iter()) {
        let dx = a - mx;
        let dy = b - my;
        cov += dx * dy;
        vx += dx * dx;
        vy += dy * dy;
    }
    if vx == 0.0 || vy == 0.0 {
        return Ok(PearsonCoeff {
            value: 0.0,
            degenerate: true,
        });
    }
    // Rounding can push |r| marginally past 1 for collinear series.
    let value = (cov / (vx.sqrt() * vy.sqrt())).clamp(-1.0, 1.0);
    Ok(PearsonCoeff {
        value,
        degenerate: false,
    })
}

/// Raw correlation matrix of a Q×N window: a_ij over column pairs, a_ii = 1
/// for non-degenerate columns, zero rows (with flags) for constant columns.
pub fn build_weights(history: &Array2<f64>) -> Result<(Array2<f64>, Vec<bool>), SpatialError> {
    let (q, n) = history.dim();
    if q < 2 {
        return Err(SpatialError::WindowTooShort(q));
    }
    if n < 2 {
        return Err(SpatialError::InvalidRaw);
    }
    let cols: Vec<Vec<f64>> = (0..n).map(|j| history.column(j).to_vec()).collect();
    let mut degenerate = vec![false; n];
    for (j, col) in cols.iter().enumerate() {
        let first = col[0];
        degenerate[j] = col.iter().all(|&v| v == first);
    }
    let mut raw = Array2::zeros((n, n));
    for i in 0..n {
        if degenerate[i] {
            continue;
        }
        raw[(i, i)] = 1.0;
        for j in (i + 1)..n {
            if degenerate[j] {
                continue;
            }
            let r = pearson_window(&cols[i], &cols[j])?.value;
            raw[(i, j)] = r;
            raw[(j, i)] = r;
        }
    }
    Ok((raw, degenerate))
}

/// Map raw correlations to nonnegative convolution weights.
///
/// Default mode: s_ij = (a_ij + 1)/2 then rows normalized to sum 1; an
/// all-zero row falls back to the identity on its diagonal.
pub fn normalize_weights(
    raw: &Array2<f64>,
    mode: WeightNormalization,
) -> Result<Array2<f64>, SpatialError> {
    let (r, c) = raw.dim();
    if r != c {
        return Err(SpatialError::InvalidRaw);
    }
    for i in 0..r {
        for j in 0..c {
            let v = raw[(i, j)];
            if !(-1.0..=1.0).contains(&v) || (raw[(j, i)] - v).abs() > 1e-12 {
                return Err(SpatialError::InvalidRaw);
            }
        }
    }
    let shifted = match mode {
        WeightNormalization::AffineRow | WeightNormalization::SymmetricDegree => {
            raw.mapv(|a| (a + 1.0) / 2.0)
        }
        WeightNormalization::AbsRow => raw.mapv(f64::abs),
    };
    let mut out = Array2::zeros((r, c));
    match mode {
        WeightNormalization::AffineRow | WeightNormalization::AbsRow => {
            for i in 0..r {
                let row_sum: f64 = (0..c).map(|j| shifted[(i, j)]).sum();
                if row_sum == 0.0 {
                    out[(i, i)] = 1.0;
                } else {
                    for j in 0..c {
                        out[(i, j)] = shifted[(i, j)] / row_sum;
                    }
                }
            }
        }
        WeightNormalization::SymmetricDegree => {
            let degrees: Vec<f64> = (0..r)
                .map(|i| (0..c).map(|j| shifted[(i, j)]).sum())
                .collect();
            for i in 0..r {
                if degrees[i] == 0.0 {
                    out[(i, i)] = 1.0;
                    continue;
                }
                for j in 0..c {
                    if degrees[j] == 0.0 {
                        continue;
                    }
                    out[(i, j)] = shifted[(i, j)] / (degrees[i].sqrt() * degrees[j].sqrt());
                }
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha20Rng;

    #[test]
    fn pearson_hand_values() {
        let r = pearson_window(&[1.0, 2.0, 3.0], &[1.0, 2.0, 3.0]).unwrap();
        assert!((r.value - 1.0).abs() < 1e-12);
        let r = pearson_window(&[1.0, 2.0, 3.0], &[3.0, 2.0, 1.0]).unwrap();
        assert!((r.value + 1.0).abs() < 1e-12);
        // cov-sum 5, norms √42/3·√6 → r = 2.5/√7
        let r = pearson_window(&[1.0, 2.0, 4.0], &[2.0, 2.0, 5.0]).unwrap();
        let expect = 2.5 / 7.0_f64.sqrt();
        assert!((r.value - expect).abs() < 1e-10, "r = {}", r.value);
        assert!((r.value - 0.9449).abs() < 1e-4);
    }

    #[test]
    fn zero_variance_flags_degenerate() {
        let r = pearson_window(&[2.0, 2.0, 2.0], &[1.0, 2.0, 3.0]).unwrap();
        assert_eq!(r.value, 0.0);
        assert!(r.degenerate);
        assert!(matches!(
            pearson_window(&[1.0], &[1.0, 2.0]),
            Err(SpatialError::LengthMismatch { .. })
        ));
    }

    #[test]
    fn build_weights_identical_and_opposed_columns() {
        let w = build_weights(&array![[1.0, 1.0], [2.0, 2.0], [3.0, 3.0]])
            .unwrap()
            .0;
        let expect = array![[1.0, 1.0], [1.0, 1.0]];
        for (a, b) in w.iter().zip(expect.iter()) {
            assert!((a - b).abs() < 1e-12);
        }
        let w = build_weights(&array![[1.0, 3.0], [2.0, 2.0], [3.0, 1.0]])
            .unwrap()
            .0;
        let expect = array![[1.0, -1.0], [-1.0, 1.0]];
        for (a, b) in w.iter().zip(expect.iter()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn degenerate_column_gives_zero_row_and_flag() {
        let (w, flags) = build_weights(&array![[5.0, 1.0], [5.0, 2.0], [5.0, 3.0]]).unwrap();
        assert!(flags[0] && !flags[1]);
        assert_eq!(w.row(0).to_vec(), vec![0.0, 0.0]);
        assert_eq!(w[(1, 1)], 1.0);
    }

    #[test]
    fn pearson_is_affine_invariant() {
        let mut rng = ChaCha20Rng::seed_from_u64(9);
        for _ in 0..50 {
            let x: Vec<f64> = (0..16).map(|_| rng.random::<f64>()).collect();
            let y: Vec<f64> = (0..16).map(|_| rng.random::<f64>()).collect();
            let base = pearson_window(&x, &y).unwrap().value;
            let alpha = 0.1 + 5.0 * rng.random::<f64>();
            let beta = 10.0 * rng.random::<f64>() - 5.0;
            let xs: Vec<f64> = x.iter().map(|v| alpha * v + beta).collect();
            let shifted = pearson_window(&xs, &y).unwrap().value;
            assert!((base - shifted).abs() < 1e-8);
        }
    }

    #[test]
    fn normalize_hand_cases() {
        let nm = normalize_weights(
            &array![[1.0, 1.0], [1.0, 1.0]],
            WeightNormalization::AffineRow,
        )
        .unwrap();
        assert_eq!(nm, array![[0.5, 0.5], [0.5, 0.5]]);
        let nm = normalize_weights(
            &array![[1.0, -1.0], [-1.0, 1.0]],
            WeightNormalization::AffineRow,
        )
        .unwrap();
        assert_eq!(nm, array![[1.0, 0.0], [0.0, 1.0]]);
    }

    #[test]
    fn normalized_rows_are_stochastic_and_nonnegative() {
        let mut rng = ChaCha20Rng::seed_from_u64(7);
        for _ in 0..1000 {
            let n = 5;
            let mut raw = Array2::zeros((n, n));
            for i in 0..n {
                raw[(i, i)] = 1.0;
                for j in (i + 1)..n {
                    let v = rng.random::<f64>() * 2.0 - 1.0;
                    raw[(i, j)] = v;
                    raw[(j, i)] = v;
                }
            }
            let nm = normalize_weights(&raw, WeightNormalization::AffineRow).unwrap();
            for i in 0..n {
                let sum: f64 = nm.row(i).sum();
                assert!((sum - 1.0).abs() < 1e-8, "row sum {sum}");
                assert!(nm.row(i).iter().all(|&v| v >= 0.0));
            }
        }
    }

    #[test]
    fn raw_weights_invariant_to_column_rescaling() {
        let mut rng = ChaCha20Rng::seed_from_u64(21);
        let history = Array2::from_shape_fn((12, 4), |_| rng.random::<f64>() * 10.0);
        let (base, _) = build_weights(&history).unwrap();
        let mut scaled = history.clone();
        for j in 0..4 {
            let alpha = 0.5 + j as f64;
            let beta = 3.0 * j as f64;
            for i in 0..12 {
                scaled[(i, j)] = alpha * scaled[(i, j)] + beta;
            }
        }
        let (after, _) = build_weights(&scaled).unwrap();
        for (a, b) in base.iter().zip(after.iter()) {
            assert!((a - b).abs() < 1e-8);
        }
    }

    #[test]
    fn regime_change_flips_raw_sign() {
        // Two regions driven by a shared factor whose loading flips sign at
        // t0: window correlations before and after differ in sign.
        let t0 = 50;
        let mut values = Array2::zeros((100, 2));
        let mut f = 0.0;
        let mut rng = ChaCha20Rng::seed_from_u64(3);
        for t in 0..100 {
            f = 0.5 * f + rng.random::<f64>() - 0.5;
            let sign = if t < t0 { 1.0 } else { -1.0 };
            values[(t, 0)] = f;
            values[(t, 1)] = sign * f;
        }
        let before = build_weights(&values.slice(ndarray::s![..t0, ..]).to_owned())
            .unwrap()
            .0;
        let after = build_weights(&values.slice(ndarray::s![t0.., ..]).to_owned())
            .unwrap()
            .0;
        assert!(before[(0, 1)] > 0.5);
        assert!(after[(0, 1)] < -0.5);
    }

    #[test]
    fn alternative_normalizations_are_nonnegative() {
        let raw = array![[1.0, -0.3], [-0.3, 1.0]];
        for mode in [
            WeightNormalization::AbsRow,
            WeightNormalization::SymmetricDegree,
        ] {
            let nm = normalize_weights(&raw, mode).unwrap();
            assert!(nm.iter().all(|&v| v >= 0.0), "{mode:?}");
        }
    }
}
