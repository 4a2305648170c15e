//! Tape builders for the generator and critic forward passes.
//!
//! Batches are stacked step-major: row `(t·B + b)·N + i` holds window `b`,
//! step `t`, region `i`. Per-window adjacency matrices then line up with
//! [`Tape::graph_mix`]'s block cycling, and step `t` of every window is one
//! contiguous row range for the recurrence.

use std::rc::Rc;

use ndarray::Array2;

use crate::spatial::SpatialWeights;
use crate::tensor::{Tape, Var, WindowDims};

use super::{
    DiscriminatorParams, GanState, GeneratorParams, NoiseWindow, StganError, DISC_CHANNELS,
    GEN_CHANNELS,
};

pub struct GcnVars {
    pub w0: Var,
    pub w1: Var,
}

pub struct LstmVars {
    pub w_xi: Var,
    pub w_xf: Var,
    pub w_xo: Var,
    pub w_xc: Var,
    pub w_hi: Var,
    pub w_hf: Var,
    pub w_ho: Var,
    pub w_hc: Var,
    pub b_i: Var,
    pub b_f: Var,
    pub b_o: Var,
    pub b_c: Var,
}

pub struct GeneratorVars {
    pub gcn: GcnVars,
    pub lstm: LstmVars,
    pub w_g: Var,
    pub b_g: Var,
}

pub struct DiscriminatorVars {
    pub gcn: GcnVars,
    pub lstm: LstmVars,
    pub w_score: Var,
    pub b_score: Var,
}

impl GeneratorVars {
    /// Push parameter leaves in the same order as `GeneratorParams::tensors`.
    pub fn leaves(tape: &mut Tape, p: &GeneratorParams, grad: bool) -> GeneratorVars {
        GeneratorVars {
            gcn: GcnVars {
                w0: tape.leaf(p.gcn.w0.clone(), grad),
                w1: tape.leaf(p.gcn.w1.clone(), grad),
            },
            lstm: lstm_leaves(tape, &p.lstm, grad),
            w_g: tape.leaf(p.w_g.clone(), grad),
            b_g: tape.leaf(p.b_g.clone(), grad),
        }
    }

    /// Vars in `tensors()` order, for gradient extraction.
    pub fn var_list(&self) -> Vec<Var> {
        let mut v = vec![self.gcn.w0, self.gcn.w1];
        v.extend(self.lstm.var_list());
        v.push(self.w_g);
        v.push(self.b_g);
        v
    }
}

impl DiscriminatorVars {
    pub fn leaves(tape: &mut Tape, p: &DiscriminatorParams, grad: bool) -> DiscriminatorVars {
        DiscriminatorVars {
            gcn: GcnVars {
                w0: tape.leaf(p.gcn.w0.clone(), grad),
                w1: tape.leaf(p.gcn.w1.clone(), grad),
            },
            lstm: lstm_leaves(tape, &p.lstm, grad),
            w_score: tape.leaf(p.w_score.clone(), grad),
            b_score: tape.leaf(p.b_score.clone(), grad),
        }
    }

    pub fn var_list(&self) -> Vec<Var> {
        let mut v = vec![self.gcn.w0, self.gcn.w1];
        v.extend(self.lstm.var_list());
        v.push(self.w_score);
        v.push(self.b_score);
        v
    }
}

fn lstm_leaves(tape: &mut Tape, p: &super::LstmParams, grad: bool) -> LstmVars {
    LstmVars {
        w_xi: tape.leaf(p.w_xi.clone(), grad),
        w_xf: tape.leaf(p.w_xf.clone(), grad),
        w_xo: tape.leaf(p.w_xo.clone(), grad),
        w_xc: tape.leaf(p.w_xc.clone(), grad),
        w_hi: tape.leaf(p.w_hi.clone(), grad),
        w_hf: tape.leaf(p.w_hf.clone(), grad),
        w_ho: tape.leaf(p.w_ho.clone(), grad),
        w_hc: tape.leaf(p.w_hc.clone(), grad),
        b_i: tape.leaf(p.b_i.clone(), grad),
        b_f: tape.leaf(p.b_f.clone(), grad),
        b_o: tape.leaf(p.b_o.clone(), grad),
        b_c: tape.leaf(p.b_c.clone(), grad),
    }
}

impl LstmVars {
    fn var_list(&self) -> Vec<Var> {
        vec![
            self.w_xi, self.w_xf, self.w_xo, self.w_xc, self.w_hi, self.w_hf, self.w_ho,
            self.w_hc, self.b_i, self.b_f, self.b_o, self.b_c,
        ]
    }
}

/// Stack per-window Q×N matrices into the step-major (Q·B·N)×1 layout.
pub fn stack_windows(windows: &[Array2<f64>]) -> Array2<f64> {
    assert!(!windows.is_empty(), "stack_windows needs windows");
    let (q, n) = windows[0].dim();
    let b = windows.len();
    let mut out = Array2::zeros((q * b * n, 1));
    for (wi, w) in windows.iter().enumerate() {
        assert_eq!(w.dim(), (q, n), "stack_windows ragged window");
        for t in 0..q {
            for i in 0..n {
                out[((t * b + wi) * n + i, 0)] = w[(t, i)];
            }
        }
    }
    out
}

/// Inverse of [`stack_windows`].
pub fn unstack_windows(x: &Array2<f64>, q: usize, b: usize, n: usize) -> Vec<Array2<f64>> {
    assert_eq!(x.dim(), (q * b * n, 1), "unstack_windows shape");
    (0..b)
        .map(|wi| {
            Array2::from_shape_fn((q, n), |(t, i)| x[((t * b + wi) * n + i, 0)])
        })
        .collect()
}

/// Two graph-convolution layers: `Ã·ReLU(Ã·X·W0)·W1`, applied independently
/// at every step with the window's own Ã.
pub fn gcn_forward(tape: &mut Tape, x: Var, adj: Rc<Vec<Array2<f64>>>, g: &GcnVars) -> Var {
    let xw = tape.matmul(x, g.w0);
    let mixed = tape.graph_mix(xw, Rc::clone(&adj));
    let act = tape.relu(mixed);
    let aw = tape.matmul(act, g.w1);
    tape.graph_mix(aw, adj)
}

/// Gated recurrence over the step-major sequence; returns the hidden state
/// after every step, each (B·N)×d. Initial hidden and cell states are zero.
///
/// The four gate transforms are packed into one matmul per step by
/// concatenating the gate weights column-wise on the tape.
pub fn lstm_forward(tape: &mut Tape, seq: Var, dims: WindowDims, l: &LstmVars) -> Vec<Var> {
    let rows = dims.windows * dims.rows_per_window;
    let d = tape.value(l.w_hi).ncols();
    assert_eq!(
        tape.value(seq).nrows(),
        dims.total_rows(),
        "lstm_forward sequence rows"
    );
    let w_x_all = tape.concat_cols(&[l.w_xi, l.w_xf, l.w_xo, l.w_xc]);
    let w_h_all = tape.concat_cols(&[l.w_hi, l.w_hf, l.w_ho, l.w_hc]);
    let b_all = tape.concat_cols(&[l.b_i, l.b_f, l.b_o, l.b_c]);
    let mut h = tape.constant(Array2::zeros((rows, d)));
    let mut c = tape.constant(Array2::zeros((rows, d)));
    let mut outputs = Vec::with_capacity(dims.steps);
    for step in 0..dims.steps {
        let x_t = tape.slice_rows(seq, step * rows, rows);
        let xa = tape.affine(x_t, w_x_all, b_all);
        let ha = tape.matmul(h, w_h_all);
        let pre = tape.add(xa, ha);
        let i_pre = tape.slice_cols(pre, 0, d);
        let f_pre = tape.slice_cols(pre, d, d);
        let o_pre = tape.slice_cols(pre, 2 * d, d);
        let c_pre = tape.slice_cols(pre, 3 * d, d);
        let i_gate = tape.sigmoid(i_pre);
        let f_gate = tape.sigmoid(f_pre);
        let o_gate = tape.sigmoid(o_pre);
        let cand = tape.tanh(c_pre);
        let keep = tape.mul(f_gate, c);
        let write = tape.mul(i_gate, cand);
        c = tape.add(keep, write);
        let c_act = tape.tanh(c);
        h = tape.mul(o_gate, c_act);
        outputs.push(h);
    }
    outputs
}

/// Full generator pass: (Q·B·N)×2 noise⊕condition input to a (Q·B·N)×1
/// sample in the scaled domain (no output activation).
pub fn generator_forward(
    tape: &mut Tape,
    zy: Var,
    adj: Rc<Vec<Array2<f64>>>,
    g: &GeneratorVars,
    dims: WindowDims,
) -> Var {
    assert_eq!(tape.value(zy).ncols(), GEN_CHANNELS, "generator channels");
    let feats = gcn_forward(tape, zy, adj, &g.gcn);
    let hidden = lstm_forward(tape, feats, dims, &g.lstm);
    let rows = dims.windows * dims.rows_per_window;
    let outs: Vec<Var> = hidden
        .iter()
        .map(|&h| {
            let o = tape.matmul(h, g.w_g);
            let bb = tape.bcast_scalar(g.b_g, rows, 1);
            tape.add(o, bb)
        })
        .collect();
    tape.concat_rows(&outs)
}

/// Full critic pass: (L·B·N)×1 input to one unbounded score per window.
/// The final hidden state is projected and averaged over regions.
pub fn discriminator_forward(
    tape: &mut Tape,
    x: Var,
    adj: Rc<Vec<Array2<f64>>>,
    d: &DiscriminatorVars,
    dims: WindowDims,
) -> Var {
    assert_eq!(tape.value(x).ncols(), DISC_CHANNELS, "critic channels");
    let feats = gcn_forward(tape, x, adj, &d.gcn);
    let hidden = lstm_forward(tape, feats, dims, &d.lstm);
    let last = *hidden.last().expect("at least one step");
    let proj = tape.matmul(last, d.w_score);
    let pooled = tape.block_mean_rows(proj, dims.rows_per_window);
    let bb = tape.bcast_scalar(d.b_score, dims.windows, 1);
    tape.add(pooled, bb)
}

/// Conditioning window for the window ending at `anchor`: the q real rows
/// immediately preceding the window's history, or zeros when the panel
/// starts too late to provide them.
pub fn condition_window(values: &Array2<f64>, anchor: usize, q: usize) -> Array2<f64> {
    let n = values.ncols();
    if anchor + 1 < 2 * q {
        return Array2::zeros((q, n));
    }
    let start = anchor + 1 - 2 * q;
    values.slice(ndarray::s![start..start + q, ..]).to_owned()
}

/// Generate one Q×N virtual window (deterministic in its inputs).
pub fn generate(
    noise: &NoiseWindow,
    weights: &SpatialWeights,
    state: &GanState,
) -> Result<Array2<f64>, StganError> {
    let (q, n) = noise.z.dim();
    if noise.y.dim() != (q, n) {
        return Err(StganError::ShapeMismatch(format!(
            "noise z {:?} vs condition y {:?}",
            noise.z.dim(),
            noise.y.dim()
        )));
    }
    if weights.normalized.dim() != (n, n) {
        return Err(StganError::ShapeMismatch(format!(
            "weights {:?} for {n} regions",
            weights.normalized.dim()
        )));
    }
    let mut tape = Tape::new();
    let z = tape.constant(stack_windows(std::slice::from_ref(&noise.z)));
    let y = tape.constant(stack_windows(std::slice::from_ref(&noise.y)));
    let zy = tape.concat_cols(&[z, y]);
    let vars = GeneratorVars::leaves(&mut tape, &state.generator, false);
    let adj = Rc::new(vec![weights.normalized.clone()]);
    let dims = WindowDims {
        steps: q,
        windows: 1,
        rows_per_window: n,
    };
    let out = generator_forward(&mut tape, zy, adj, &vars, dims);
    if !tape.is_finite(out) {
        return Err(StganError::NonFiniteState);
    }
    Ok(unstack_windows(tape.value(out), q, 1, n).remove(0))
}

/// Score one L×N window with the critic.
pub fn discriminate(
    x: &Array2<f64>,
    weights: &SpatialWeights,
    state: &GanState,
) -> Result<f64, StganError> {
    let (l, n) = x.dim();
    if weights.normalized.dim() != (n, n) {
        return Err(StganError::ShapeMismatch(format!(
            "weights {:?} for {n} regions",
            weights.normalized.dim()
        )));
    }
    let mut tape = Tape::new();
    let xs = tape.constant(stack_windows(std::slice::from_ref(x)));
    let vars = DiscriminatorVars::leaves(&mut tape, &state.discriminator, false);
    let adj = Rc::new(vec![weights.normalized.clone()]);
    let dims = WindowDims {
        steps: l,
        windows: 1,
        rows_per_window: n,
    };
    let score = discriminator_forward(&mut tape, xs, adj, &vars, dims);
    if !tape.is_finite(score) {
        return Err(StganError::NonFiniteState);
    }
    Ok(tape.scalar(score))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::spatial::WeightNormalization;
    use crate::stgan::GanConfig;
    use ndarray::array;
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha20Rng;

    fn dims(q: usize, b: usize, n: usize) -> WindowDims {
        WindowDims {
            steps: q,
            windows: b,
            rows_per_window: n,
        }
    }

    fn stack_leaf(tape: &mut Tape, ws: &[Array2<f64>]) -> Var {
        let v = stack_windows(ws);
        tape.constant(v)
    }

    #[test]
    fn gcn_identity_path_broadcasts_input() {
        let mut tape = Tape::new();
        let x = array![[1.0, 2.0], [3.0, 4.0], [0.5, 0.0]]; // Q=3, N=2, nonneg
        let xv = stack_leaf(&mut tape, std::slice::from_ref(&x));
        let f = 3;
        let g = GcnVars {
            w0: tape.constant(Array2::ones((1, f))),
            w1: tape.constant(Array2::eye(f)),
        };
        let adj = Rc::new(vec![Array2::eye(2)]);
        let h = gcn_forward(&mut tape, xv, adj, &g);
        let hv = tape.value(h);
        assert_eq!(hv.dim(), (6, f));
        let flat = stack_windows(std::slice::from_ref(&x));
        for r in 0..6 {
            for c in 0..f {
                assert!((hv[(r, c)] - flat[(r, 0)]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn gcn_relu_kills_negative_input() {
        let mut tape = Tape::new();
        let x = Array2::from_elem((4, 3), -2.0);
        let xv = stack_leaf(&mut tape, std::slice::from_ref(&x));
        let g = GcnVars {
            w0: tape.constant(Array2::ones((1, 2))),
            w1: tape.constant(Array2::ones((2, 2))),
        };
        let adj = Rc::new(vec![Array2::from_elem((3, 3), 1.0 / 3.0)]);
        let h = gcn_forward(&mut tape, xv, adj, &g);
        assert!(tape.value(h).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn gcn_hand_case_uniform_mixing() {
        let mut tape = Tape::new();
        let x = array![[2.0, 4.0]]; // one step, two regions
        let xv = stack_leaf(&mut tape, std::slice::from_ref(&x));
        let g = GcnVars {
            w0: tape.constant(array![[1.0]]),
            w1: tape.constant(array![[1.0]]),
        };
        let adj = Rc::new(vec![array![[0.5, 0.5], [0.5, 0.5]]]);
        let h = gcn_forward(&mut tape, xv, adj, &g);
        let hv = tape.value(h);
        assert!((hv[(0, 0)] - 3.0).abs() < 1e-12);
        assert!((hv[(1, 0)] - 3.0).abs() < 1e-12);
    }

    #[test]
    fn gcn_is_region_permutation_equivariant() {
        let mut rng = ChaCha20Rng::seed_from_u64(4);
        let n = 4;
        let q = 3;
        let x = Array2::from_shape_fn((q, n), |_| rng.random::<f64>());
        // Row-stochastic random adjacency.
        let mut adj = Array2::from_shape_fn((n, n), |_| rng.random::<f64>());
        for mut row in adj.outer_iter_mut() {
            let s: f64 = row.sum();
            row.mapv_inplace(|v| v / s);
        }
        let w0 = Array2::from_shape_fn((1, 5), |_| rng.random::<f64>() - 0.5);
        let w1 = Array2::from_shape_fn((5, 2), |_| rng.random::<f64>() - 0.5);

        let run = |x: &Array2<f64>, adj: &Array2<f64>| -> Array2<f64> {
            let mut tape = Tape::new();
            let xv = stack_leaf(&mut tape, std::slice::from_ref(x));
            let g = GcnVars {
                w0: tape.constant(w0.clone()),
                w1: tape.constant(w1.clone()),
            };
            let h = gcn_forward(&mut tape, xv, Rc::new(vec![adj.clone()]), &g);
            tape.value(h).clone()
        };

        let perm = [2usize, 0, 3, 1];
        let xp = Array2::from_shape_fn((q, n), |(t, i)| x[(t, perm[i])]);
        let adjp = Array2::from_shape_fn((n, n), |(i, j)| adj[(perm[i], perm[j])]);

        let base = run(&x, &adj);
        let permuted = run(&xp, &adjp);
        for t in 0..q {
            for i in 0..n {
                for c in 0..2 {
                    let a = base[(t * n + perm[i], c)];
                    let b = permuted[(t * n + i, c)];
                    assert!((a - b).abs() < 1e-8, "{a} vs {b}");
                }
            }
        }
    }

    fn zero_lstm(tape: &mut Tape, f2: usize, d: usize) -> LstmVars {
        LstmVars {
            w_xi: tape.constant(Array2::zeros((f2, d))),
            w_xf: tape.constant(Array2::zeros((f2, d))),
            w_xo: tape.constant(Array2::zeros((f2, d))),
            w_xc: tape.constant(Array2::zeros((f2, d))),
            w_hi: tape.constant(Array2::zeros((d, d))),
            w_hf: tape.constant(Array2::zeros((d, d))),
            w_ho: tape.constant(Array2::zeros((d, d))),
            w_hc: tape.constant(Array2::zeros((d, d))),
            b_i: tape.constant(Array2::zeros((1, d))),
            b_f: tape.constant(Array2::zeros((1, d))),
            b_o: tape.constant(Array2::zeros((1, d))),
            b_c: tape.constant(Array2::zeros((1, d))),
        }
    }

    #[test]
    fn lstm_zero_parameters_give_zero_outputs() {
        let mut tape = Tape::new();
        let seq = tape.constant(Array2::from_elem((6, 2), 1.5)); // Q=3, N=2, F2=2
        let l = zero_lstm(&mut tape, 2, 3);
        let outs = lstm_forward(&mut tape, seq, dims(3, 1, 2), &l);
        for h in outs {
            assert!(tape.value(h).iter().all(|&v| v == 0.0));
        }
    }

    fn random_lstm(tape: &mut Tape, rng: &mut ChaCha20Rng, f2: usize, d: usize) -> LstmVars {
        let mut m = |r: usize, c: usize| {
            let v = Array2::from_shape_fn((r, c), |_| rng.random::<f64>() - 0.5);
            v
        };
        let w_xi = m(f2, d);
        let w_xf = m(f2, d);
        let w_xo = m(f2, d);
        let w_xc = m(f2, d);
        let w_hi = m(d, d);
        let w_hf = m(d, d);
        let w_ho = m(d, d);
        let w_hc = m(d, d);
        let b_i = m(1, d);
        let b_f = m(1, d);
        let b_o = m(1, d);
        let b_c = m(1, d);
        LstmVars {
            w_xi: tape.constant(w_xi),
            w_xf: tape.constant(w_xf),
            w_xo: tape.constant(w_xo),
            w_xc: tape.constant(w_xc),
            w_hi: tape.constant(w_hi),
            w_hf: tape.constant(w_hf),
            w_ho: tape.constant(w_ho),
            w_hc: tape.constant(w_hc),
            b_i: tape.constant(b_i),
            b_f: tape.constant(b_f),
            b_o: tape.constant(b_o),
            b_c: tape.constant(b_c),
        }
    }

    #[test]
    fn lstm_matches_scalar_reference_recurrence() {
        let mut rng = ChaCha20Rng::seed_from_u64(11);
        let (q, n, f2, d) = (3, 2, 3, 2);
        let seq_arr = Array2::from_shape_fn((q * n, f2), |_| rng.random::<f64>() - 0.5);
        let mut tape = Tape::new();
        let seq = tape.constant(seq_arr.clone());
        let l = random_lstm(&mut tape, &mut rng, f2, d);
        let outs = lstm_forward(&mut tape, seq, dims(q, 1, n), &l);

        // Independent scalar recurrence with explicit loops.
        let val = |v: Var, tape: &Tape| tape.value(v).clone();
        let (w_xi, w_xf, w_xo, w_xc) = (
            val(l.w_xi, &tape),
            val(l.w_xf, &tape),
            val(l.w_xo, &tape),
            val(l.w_xc, &tape),
        );
        let (w_hi, w_hf, w_ho, w_hc) = (
            val(l.w_hi, &tape),
            val(l.w_hf, &tape),
            val(l.w_ho, &tape),
            val(l.w_hc, &tape),
        );
        let (b_i, b_f, b_o, b_c) = (
            val(l.b_i, &tape),
            val(l.b_f, &tape),
            val(l.b_o, &tape),
            val(l.b_c, &tape),
        );
        let sig = |x: f64| 1.0 / (1.0 + (-x).exp());
        let mut h = vec![vec![0.0; d]; n];
        let mut c = vec![vec![0.0; d]; n];
        for t in 0..q {
            let mut h_next = vec![vec![0.0; d]; n];
            for row in 0..n {
                for k in 0..d {
                    let mut pre_i = b_i[(0, k)];
                    let mut pre_f = b_f[(0, k)];
                    let mut pre_o = b_o[(0, k)];
                    let mut pre_c = b_c[(0, k)];
                    for j in 0..f2 {
                        let x = seq_arr[(t * n + row, j)];
                        pre_i += x * w_xi[(j, k)];
                        pre_f += x * w_xf[(j, k)];
                        pre_o += x * w_xo[(j, k)];
                        pre_c += x * w_xc[(j, k)];
                    }
                    for j in 0..d {
                        pre_i += h[row][j] * w_hi[(j, k)];
                        pre_f += h[row][j] * w_hf[(j, k)];
                        pre_o += h[row][j] * w_ho[(j, k)];
                        pre_c += h[row][j] * w_hc[(j, k)];
                    }
                    let i_g = sig(pre_i);
                    let f_g = sig(pre_f);
                    let o_g = sig(pre_o);
                    c[row][k] = f_g * c[row][k] + i_g * pre_c.tanh();
                    h_next[row][k] = o_g * c[row][k].tanh();
                }
            }
            h = h_next;
            let got = val(outs[t], &tape);
            for row in 0..n {
                for k in 0..d {
                    assert!(
                        (got[(row, k)] - h[row][k]).abs() < 1e-10,
                        "step {t}: {} vs {}",
                        got[(row, k)],
                        h[row][k]
                    );
                }
            }
        }
    }

    #[test]
    fn lstm_is_causal() {
        let mut rng = ChaCha20Rng::seed_from_u64(13);
        let (q, n, f2, d) = (4, 2, 3, 3);
        let base = Array2::from_shape_fn((q * n, f2), |_| rng.random::<f64>() - 0.5);
        let mut tape = Tape::new();
        let l = random_lstm(&mut tape, &mut rng, f2, d);

        let run = |tape: &mut Tape, arr: &Array2<f64>, l: &LstmVars, steps: usize| {
            let seq = tape.constant(arr.clone());
            lstm_forward(tape, seq, dims(steps, 1, n), l)
                .iter()
                .map(|&h| tape.value(h).clone())
                .collect::<Vec<_>>()
        };

        let full = run(&mut tape, &base, &l, q);
        // Same prefix, different suffix.
        let mut tampered = base.clone();
        for j in 0..f2 {
            tampered[((q - 1) * n, j)] += 10.0;
            tampered[((q - 1) * n + 1, j)] -= 7.0;
        }
        let other = run(&mut tape, &tampered, &l, q);
        for t in 0..q - 1 {
            for (a, b) in full[t].iter().zip(other[t].iter()) {
                assert_eq!(a, b, "h_{t} changed by a future perturbation");
            }
        }
        // Q=1 run agrees with the first step of the full run.
        let first_step = base.slice(ndarray::s![..n, ..]).to_owned();
        let short = run(&mut tape, &first_step, &l, 1);
        for (a, b) in short[0].iter().zip(full[0].iter()) {
            assert_eq!(a, b);
        }
    }

    #[test]
    fn generate_shape_and_determinism() {
        let state = GanState::init(GanConfig::default(), 42);
        let mut rng = ChaCha20Rng::seed_from_u64(7);
        let (q, n) = (30, 4);
        let y = Array2::from_shape_fn((q, n), |_| rng.random::<f64>());
        let noise = NoiseWindow::sample(&mut rng, y);
        let history = Array2::from_shape_fn((q, n), |(t, i)| (t + i) as f64);
        let weights =
            SpatialWeights::from_window(&history, q - 1, WeightNormalization::AffineRow).unwrap();
        let a = generate(&noise, &weights, &state).unwrap();
        let b = generate(&noise, &weights, &state).unwrap();
        assert_eq!(a.dim(), (30, 4));
        assert_eq!(a, b);
    }

    #[test]
    fn discriminate_is_deterministic_and_unbounded() {
        let mut state = GanState::init(GanConfig::default(), 42);
        // A large bias shows the score is a free real, not a probability.
        state.discriminator.b_score[(0, 0)] = 5.0;
        let (l, n) = (12, 3);
        let x = Array2::from_shape_fn((l, n), |(t, i)| ((t * 3 + i) % 5) as f64 * 0.1);
        let history = Array2::from_shape_fn((l, n), |(t, i)| (t * (i + 1)) as f64);
        let weights =
            SpatialWeights::from_window(&history, l - 1, WeightNormalization::AffineRow).unwrap();
        let s1 = discriminate(&x, &weights, &state).unwrap();
        let s2 = discriminate(&x, &weights, &state).unwrap();
        assert_eq!(s1, s2);
        assert!(s1 > 1.0, "score {s1} should not be squashed into [0,1]");
    }

    #[test]
    fn condition_window_edges() {
        let values = Array2::from_shape_fn((20, 2), |(t, i)| (t * 10 + i) as f64);
        // anchor 9, q 5 → rows 0..5
        let c = condition_window(&values, 9, 5);
        assert_eq!(c[(0, 0)], 0.0);
        assert_eq!(c[(4, 1)], 41.0);
        // too early → zeros
        let c = condition_window(&values, 8, 5);
        assert!(c.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn stack_unstack_round_trip() {
        let mut rng = ChaCha20Rng::seed_from_u64(3);
        let ws: Vec<Array2<f64>> = (0..3)
            .map(|_| Array2::from_shape_fn((5, 2), |_| rng.random::<f64>()))
            .collect();
        let stacked = stack_windows(&ws);
        let back = unstack_windows(&stacked, 5, 3, 2);
        assert_eq!(ws, back);
    }
}
