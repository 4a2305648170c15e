//! Predictor forward pass: tape builder plus standalone stage functions.
//!
//! Batches stack S univariate sequences of length q as contiguous q-row
//! blocks, so per-sequence attention runs through the block matmul ops while
//! projections and the FFN batch across all rows at once.

use ndarray::Array2;
use rand::Rng;
use rand_chacha::ChaCha20Rng;

use crate::tensor::{Tape, Var};

use super::{PredictorConfig, PredictorError, PredictorState};

const LN_EPS: f64 = 1e-8;

/// Parameter leaves in `PredictorState::tensors` order.
pub struct PredictorVars {
    pub w_e: Var,
    pub b_e: Var,
    pub conv: Vec<Var>,
    pub layers: Vec<LayerVars>,
    pub head_w1: Var,
    pub head_b1: Var,
    pub head_w2: Var,
    pub head_b2: Var,
    pub w_out: Var,
    pub b_out: Var,
}

pub struct LayerVars {
    pub w_q: Var,
    pub w_k: Var,
    pub w_v: Var,
    pub w_o: Var,
    pub ln1_gamma: Var,
    pub ln1_beta: Var,
    pub w_1: Var,
    pub b_1: Var,
    pub w_2: Var,
    pub b_2: Var,
    pub ln2_gamma: Var,
    pub ln2_beta: Var,
}

impl PredictorVars {
    pub fn leaves(tape: &mut Tape, p: &PredictorState, grad: bool) -> PredictorVars {
        PredictorVars {
            w_e: tape.leaf(p.w_e.clone(), grad),
            b_e: tape.leaf(p.b_e.clone(), grad),
            conv: p.conv.iter().map(|c| tape.leaf(c.clone(), grad)).collect(),
            layers: p
                .layers
                .iter()
                .map(|l| LayerVars {
                    w_q: tape.leaf(l.w_q.clone(), grad),
                    w_k: tape.leaf(l.w_k.clone(), grad),
                    w_v: tape.leaf(l.w_v.clone(), grad),
                    w_o: tape.leaf(l.w_o.clone(), grad),
                    ln1_gamma: tape.leaf(l.ln1_gamma.clone(), grad),
                    ln1_beta: tape.leaf(l.ln1_beta.clone(), grad),
                    w_1: tape.leaf(l.w_1.clone(), grad),
                    b_1: tape.leaf(l.b_1.clone(), grad),
                    w_2: tape.leaf(l.w_2.clone(), grad),
                    b_2: tape.leaf(l.b_2.clone(), grad),
                    ln2_gamma: tape.leaf(l.ln2_gamma.clone(), grad),
                    ln2_beta: tape.leaf(l.ln2_beta.clone(), grad),
                })
                .collect(),
            head_w1: tape.leaf(p.head_w1.clone(), grad),
            head_b1: tape.leaf(p.head_b1.clone(), grad),
            head_w2: tape.leaf(p.head_w2.clone(), grad),
            head_b2: tape.leaf(p.head_b2.clone(), grad),
            w_out: tape.leaf(p.w_out.clone(), grad),
            b_out: tape.leaf(p.b_out.clone(), grad),
        }
    }

    /// Vars in `tensors()` order, for gradient extraction.
    pub fn var_list(&self) -> Vec<Var> {
        let mut v = vec![self.w_e, self.b_e];
        v.extend(self.conv.iter().copied());
        for l in &self.layers {
            v.extend([
                l.w_q, l.w_k, l.w_v, l.w_o, l.ln1_gamma, l.ln1_beta, l.w_1, l.b_1, l.w_2, l.b_2,
                l.ln2_gamma, l.ln2_beta,
            ]);
        }
        v.extend([
            self.head_w1,
            self.head_b1,
            self.head_w2,
            self.head_b2,
            self.w_out,
            self.b_out,
        ]);
        v
    }
}

/// Counts of work done by a forward pass.
#[derive(Debug, Default, Clone, Copy, PartialEq, Eq)]
pub struct ForwardStats {
    /// Number of passes through the encoder stack (one per forward call,
    /// independent of the horizon).
    pub encoder_passes: usize,
}

/// Optional capture of internals for verification.
#[derive(Debug, Default)]
pub struct ForwardTrace {
    /// Softmax attention matrices, one per (layer, head), each (S·q)×q.
    pub attention: Vec<Array2<f64>>,
    /// Layer-norm outputs before the affine rescale, one per norm site.
    pub ln_pre_affine: Vec<Array2<f64>>,
}

/// The sinusoidal position table: `pe[pos, 2k] = sin(pos/10000^{2k/d})`,
/// `pe[pos, 2k+1] = cos(pos/10000^{2k/d})`.
pub fn pe_matrix(q: usize, d_model: usize) -> Array2<f64> {
    assert!(d_model % 2 == 0, "d_model must be even");
    Array2::from_shape_fn((q, d_model), |(pos, j)| {
        let k = (j / 2) as f64;
        let angle = pos as f64 / 10000f64.powf(2.0 * k / d_model as f64);
        if j % 2 == 0 {
            angle.sin()
        } else {
            angle.cos()
        }
    })
}

fn layer_norm(
    tape: &mut Tape,
    x: Var,
    gamma: Var,
    beta: Var,
    trace: &mut Option<&mut ForwardTrace>,
) -> Var {
    let (node, normed) = tape.layer_norm(x, gamma, beta, LN_EPS);
    if let Some(t) = trace.as_deref_mut() {
        t.ln_pre_affine.push(normed.as_ref().clone());
    }
    node
}

fn dropout_mask(
    tape: &mut Tape,
    x: Var,
    train: &mut Option<(&mut ChaCha20Rng, f64)>,
) -> Var {
    match train {
        Some((rng, rate)) if *rate > 0.0 => {
            let keep = 1.0 - *rate;
            let dim = tape.value(x).dim();
            let mask = Array2::from_shape_fn(dim, |_| {
                if rng.random::<f64>() < keep {
                    1.0 / keep
                } else {
                    0.0
                }
            });
            let m = tape.constant(mask);
            tape.mul(x, m)
        }
        _ => x,
    }
}

/// Full pipeline on stacked sequences: (S·q)×1 input to S×p forecasts.
#[allow(clippy::too_many_arguments)]
pub fn predictor_forward(
    tape: &mut Tape,
    x: Var,
    vars: &PredictorVars,
    cfg: &PredictorConfig,
    seqs: usize,
    mut train: Option<(&mut ChaCha20Rng, f64)>,
    stats: &mut ForwardStats,
    mut trace: Option<&mut ForwardTrace>,
) -> Var {
    let q = cfg.window;
    let rows = seqs * q;
    assert_eq!(tape.value(x).dim(), (rows, 1), "predictor input shape");

    // Embedding.
    let embedded = tape.affine(x, vars.w_e, vars.b_e);

    // Causal convolution: tap τ multiplies the input delayed by τ steps.
    let mut conv_out: Option<Var> = None;
    for (tau, &w) in vars.conv.iter().enumerate() {
        let shifted = if tau == 0 {
            embedded
        } else {
            tape.block_shift_down(embedded, q, tau)
        };
        let term = tape.matmul(shifted, w);
        conv_out = Some(match conv_out {
            Some(acc) => tape.add(acc, term),
            None => term,
        });
    }
    let conv = conv_out.expect("at least one conv tap");

    // Positional encoding, tiled across sequences.
    let pe = pe_matrix(q, cfg.d_model);
    let mut tiled = Array2::zeros((rows, cfg.d_model));
    for s in 0..seqs {
        tiled
            .slice_mut(ndarray::s![s * q..(s + 1) * q, ..])
            .assign(&pe);
    }
    let pe_leaf = tape.constant(tiled);
    let mut h = tape.add(conv, pe_leaf);

    // Encoder stack.
    stats.encoder_passes += 1;
    let d_k = cfg.d_k();
    let scale = 1.0 / (d_k as f64).sqrt();
    for layer in &vars.layers {
        let q_all = tape.matmul(h, layer.w_q);
        let k_all = tape.matmul(h, layer.w_k);
        let v_all = tape.matmul(h, layer.w_v);
        let mut heads = Vec::with_capacity(cfg.n_heads);
        for hd in 0..cfg.n_heads {
            let qh = tape.slice_cols(q_all, hd * d_k, d_k);
            let kh = tape.slice_cols(k_all, hd * d_k, d_k);
            let vh = tape.slice_cols(v_all, hd * d_k, d_k);
            let logits = tape.bmm_nt(qh, kh, q);
            let scaled = tape.scale(logits, scale);
            let attn = tape.softmax(scaled);
            if let Some(t) = trace.as_deref_mut() {
                t.attention.push(tape.value(attn).clone());
            }
            heads.push(tape.bmm_nn(attn, vh, q));
        }
        let concat = tape.concat_cols(&heads);
        let projected = tape.matmul(concat, layer.w_o);
        let dropped = dropout_mask(tape, projected, &mut train);
        let res1 = tape.add(h, dropped);
        let normed1 = layer_norm(tape, res1, layer.ln1_gamma, layer.ln1_beta, &mut trace);

        let ff1 = tape.affine(normed1, layer.w_1, layer.b_1);
        let act = tape.relu(ff1);
        let ff2 = tape.affine(act, layer.w_2, layer.b_2);
        let dropped2 = dropout_mask(tape, ff2, &mut train);
        let res2 = tape.add(normed1, dropped2);
        h = layer_norm(tape, res2, layer.ln2_gamma, layer.ln2_beta, &mut trace);
    }

    // Global average pooling over each sequence.
    let pooled = tape.block_mean_rows(h, q);

    // Refinement FFN, then the linear multi-step head.
    let hf1 = tape.affine(pooled, vars.head_w1, vars.head_b1);
    let hact = tape.relu(hf1);
    let refined = tape.affine(hact, vars.head_w2, vars.head_b2);
    tape.affine(refined, vars.w_out, vars.b_out)
}

/// Stack per-sequence column vectors into the (S·q)×1 block layout.
pub fn stack_sequences(seqs: &[Vec<f64>]) -> Array2<f64> {
    assert!(!seqs.is_empty(), "no sequences");
    let q = seqs[0].len();
    let mut out = Array2::zeros((seqs.len() * q, 1));
    for (s, seq) in seqs.iter().enumerate() {
        assert_eq!(seq.len(), q, "ragged sequences");
        for (t, &v) in seq.iter().enumerate() {
            out[(s * q + t, 0)] = v;
        }
    }
    out
}

// ----- standalone stage functions -----

/// Embed a q×1 window: `E = x·W_E + b_E` rowwise.
pub fn embed_series(x: &Array2<f64>, state: &PredictorState) -> Result<Array2<f64>, PredictorError> {
    if x.ncols() != 1 {
        return Err(PredictorError::ShapeMismatch(format!(
            "embed input must be q×1, got {:?}",
            x.dim()
        )));
    }
    let mut tape = Tape::new();
    let xv = tape.constant(x.clone());
    let w = tape.constant(state.w_e.clone());
    let b = tape.constant(state.b_e.clone());
    let out = tape.affine(xv, w, b);
    Ok(tape.value(out).clone())
}

/// Causal convolution over an embedded q×d window with the state's taps.
/// Output row t depends only on input rows `t−k+1..t` (zero padded).
pub fn causal_conv(e: &Array2<f64>, state: &PredictorState) -> Result<Array2<f64>, PredictorError> {
    let d = state.config.d_model;
    if e.ncols() != d {
        return Err(PredictorError::ShapeMismatch(format!(
            "conv input must be q×{d}, got {:?}",
            e.dim()
        )));
    }
    let q = e.nrows();
    let mut tape = Tape::new();
    let ev = tape.constant(e.clone());
    let mut acc: Option<Var> = None;
    for (tau, w) in state.conv.iter().enumerate() {
        let wv = tape.constant(w.clone());
        let shifted = if tau == 0 {
            ev
        } else {
            tape.block_shift_down(ev, q, tau)
        };
        let term = tape.matmul(shifted, wv);
        acc = Some(match acc {
            Some(a) => tape.add(a, term),
            None => term,
        });
    }
    Ok(tape.value(acc.expect("conv taps")).clone())
}

/// Add the sinusoidal position table to a q×d matrix.
pub fn positional_encoding(c: &Array2<f64>) -> Array2<f64> {
    c + &pe_matrix(c.nrows(), c.ncols())
}

/// One attention head: `softmax(QKᵀ/√d_k)·V` with `Q = P·W_Q` etc.
pub fn attention_head(
    p: &Array2<f64>,
    w_q: &Array2<f64>,
    w_k: &Array2<f64>,
    w_v: &Array2<f64>,
) -> Array2<f64> {
    let d_k = w_q.ncols();
    let q = p.dot(w_q);
    let k = p.dot(w_k);
    let v = p.dot(w_v);
    let mut logits = q.dot(&k.t());
    logits.mapv_inplace(|x| x / (d_k as f64).sqrt());
    for mut row in logits.outer_iter_mut() {
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        row.mapv_inplace(|x| (x - m).exp());
        let s = row.sum();
        row.mapv_inplace(|x| x / s);
    }
    logits.dot(&v)
}

/// Run only the encoder stack on a post-encoding q×d input (eval mode).
pub fn encoder_forward(
    p: &Array2<f64>,
    state: &PredictorState,
) -> Result<Array2<f64>, PredictorError> {
    let cfg = &state.config;
    if p.ncols() != cfg.d_model {
        return Err(PredictorError::ShapeMismatch(format!(
            "encoder input must be q×{}, got {:?}",
            cfg.d_model,
            p.dim()
        )));
    }
    let q = p.nrows();
    let mut tape = Tape::new();
    let vars = PredictorVars::leaves(&mut tape, state, false);
    let mut h = tape.constant(p.clone());
    let d_k = cfg.d_k();
    let scale = 1.0 / (d_k as f64).sqrt();
    let mut none_trace: Option<&mut ForwardTrace> = None;
    for layer in &vars.layers {
        let q_all = tape.matmul(h, layer.w_q);
        let k_all = tape.matmul(h, layer.w_k);
        let v_all = tape.matmul(h, layer.w_v);
        let mut heads = Vec::with_capacity(cfg.n_heads);
        for hd in 0..cfg.n_heads {
            let qh = tape.slice_cols(q_all, hd * d_k, d_k);
            let kh = tape.slice_cols(k_all, hd * d_k, d_k);
            let vh = tape.slice_cols(v_all, hd * d_k, d_k);
            let logits = tape.bmm_nt(qh, kh, q);
            let scaled = tape.scale(logits, scale);
            let attn = tape.softmax(scaled);
            heads.push(tape.bmm_nn(attn, vh, q));
        }
        let concat = tape.concat_cols(&heads);
        let projected = tape.matmul(concat, layer.w_o);
        let res1 = tape.add(h, projected);
        let normed1 = layer_norm(&mut tape, res1, layer.ln1_gamma, layer.ln1_beta, &mut none_trace);
        let ff1 = tape.affine(normed1, layer.w_1, layer.b_1);
        let act = tape.relu(ff1);
        let ff2 = tape.affine(act, layer.w_2, layer.b_2);
        let res2 = tape.add(normed1, ff2);
        h = layer_norm(&mut tape, res2, layer.ln2_gamma, layer.ln2_beta, &mut none_trace);
    }
    if !tape.is_finite(h) {
        return Err(PredictorError::NonFiniteActivation);
    }
    Ok(tape.value(h).clone())
}

/// Arithmetic mean over the q rows.
pub fn global_pool(h: &Array2<f64>) -> Vec<f64> {
    let q = h.nrows() as f64;
    (0..h.ncols()).map(|j| h.column(j).sum() / q).collect()
}

/// Forecast the whole p-step horizon from one scaled q×1 window in a single
/// encoder pass.
pub fn forecast(x: &Array2<f64>, state: &PredictorState) -> Result<Vec<f64>, PredictorError> {
    forecast_with_stats(x, state).map(|(y, _)| y)
}

/// [`forecast`] plus pass-count statistics.
pub fn forecast_with_stats(
    x: &Array2<f64>,
    state: &PredictorState,
) -> Result<(Vec<f64>, ForwardStats), PredictorError> {
    let cfg = &state.config;
    if x.dim() != (cfg.window, 1) {
        return Err(PredictorError::ShapeMismatch(format!(
            "forecast input must be {}×1, got {:?}",
            cfg.window,
            x.dim()
        )));
    }
    let mut tape = Tape::new();
    let vars = PredictorVars::leaves(&mut tape, state, false);
    let xv = tape.constant(x.clone());
    let mut stats = ForwardStats::default();
    let out = predictor_forward(&mut tape, xv, &vars, cfg, 1, None, &mut stats, None);
    if !tape.is_finite(out) {
        return Err(PredictorError::NonFiniteActivation);
    }
    Ok((tape.value(out).row(0).to_vec(), stats))
}

/// Forecast many scaled q-length sequences at once; row s of the result is
/// the p-step horizon for sequence s.
pub fn forecast_batch(
    seqs: &[Vec<f64>],
    state: &PredictorState,
) -> Result<Array2<f64>, PredictorError> {
    let cfg = &state.config;
    if seqs.is_empty() {
        return Err(PredictorError::ShapeMismatch("empty batch".into()));
    }
    if seqs.iter().any(|s| s.len() != cfg.window) {
        return Err(PredictorError::ShapeMismatch(format!(
            "all sequences must have length {}",
            cfg.window
        )));
    }
    let mut tape = Tape::new();
    let vars = PredictorVars::leaves(&mut tape, state, false);
    let xv = tape.constant(stack_sequences(seqs));
    let mut stats = ForwardStats::default();
    let out = predictor_forward(
        &mut tape,
        xv,
        &vars,
        cfg,
        seqs.len(),
        None,
        &mut stats,
        None,
    );
    if !tape.is_finite(out) {
        return Err(PredictorError::NonFiniteActivation);
    }
    Ok(tape.value(out).clone())
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha20Rng;

    fn micro_state(q: usize, p: usize, seed: u64) -> PredictorState {
        let cfg = PredictorConfig {
            d_model: 8,
            n_heads: 2,
            n_layers: 2,
            d_ffn: 16,
            dropout: 0.0,
            conv_kernel: 3,
            horizon: p,
            window: q,
        };
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        PredictorState::init(cfg, &mut rng).unwrap()
    }

    #[test]
    fn embed_zero_input_gives_bias_rows() {
        let mut state = micro_state(4, 2, 1);
        state.b_e = Array2::from_shape_fn((1, 8), |(_, j)| j as f64);
        let e = embed_series(&Array2::zeros((4, 1)), &state).unwrap();
        for r in 0..4 {
            for j in 0..8 {
                assert_eq!(e[(r, j)], j as f64);
            }
        }
    }

    #[test]
    fn embed_ones_weight_replicates_input() {
        let mut state = micro_state(2, 1, 1);
        state.w_e = Array2::ones((1, 8));
        state.b_e = Array2::zeros((1, 8));
        let e = embed_series(&array![[1.0], [2.0]], &state).unwrap();
        for j in 0..8 {
            assert_eq!(e[(0, j)], 1.0);
            assert_eq!(e[(1, j)], 2.0);
        }
    }

    #[test]
    fn embed_is_affine() {
        let state = micro_state(5, 2, 2);
        let mut rng = ChaCha20Rng::seed_from_u64(3);
        let x = Array2::from_shape_fn((5, 1), |_| rng.random::<f64>());
        let zero = embed_series(&Array2::zeros((5, 1)), &state).unwrap();
        let ex = embed_series(&x, &state).unwrap();
        let alpha = 3.25;
        let ax = embed_series(&x.mapv(|v| alpha * v), &state).unwrap();
        for ((a, e), z) in ax.iter().zip(ex.iter()).zip(zero.iter()) {
            assert!((a - z - alpha * (e - z)).abs() < 1e-10);
        }
    }

    #[test]
    fn conv_identity_kernel_is_identity() {
        let mut state = micro_state(6, 1, 4);
        state.conv = vec![
            Array2::eye(8),
            Array2::zeros((8, 8)),
            Array2::zeros((8, 8)),
        ];
        let mut rng = ChaCha20Rng::seed_from_u64(5);
        let e = Array2::from_shape_fn((6, 8), |_| rng.random::<f64>());
        let c = causal_conv(&e, &state).unwrap();
        for (a, b) in c.iter().zip(e.iter()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn conv_oldest_tap_is_pure_delay() {
        let mut state = micro_state(6, 1, 4);
        state.conv = vec![
            Array2::zeros((8, 8)),
            Array2::zeros((8, 8)),
            Array2::eye(8),
        ];
        let mut rng = ChaCha20Rng::seed_from_u64(6);
        let e = Array2::from_shape_fn((6, 8), |_| rng.random::<f64>());
        let c = causal_conv(&e, &state).unwrap();
        for t in 0..6 {
            for j in 0..8 {
                let expect = if t < 2 { 0.0 } else { e[(t - 2, j)] };
                assert_eq!(c[(t, j)], expect);
            }
        }
    }

    #[test]
    fn conv_never_leaks_future_steps() {
        let state = micro_state(8, 1, 7);
        let mut rng = ChaCha20Rng::seed_from_u64(8);
        for _ in 0..100 {
            let e = Array2::from_shape_fn((8, 8), |_| rng.random::<f64>());
            let base = causal_conv(&e, &state).unwrap();
            let cut = 1 + (rng.random::<u32>() as usize) % 7;
            let mut tampered = e.clone();
            for t in cut..8 {
                for j in 0..8 {
                    tampered[(t, j)] += rng.random::<f64>() * 5.0;
                }
            }
            let other = causal_conv(&tampered, &state).unwrap();
            for t in 0..cut {
                for j in 0..8 {
                    assert_eq!(base[(t, j)], other[(t, j)], "leak at t={t}");
                }
            }
        }
    }

    #[test]
    fn positional_encoding_values() {
        let pe = pe_matrix(4, 8);
        // Row 0 alternates sin(0)=0, cos(0)=1.
        for j in 0..8 {
            let expect = if j % 2 == 0 { 0.0 } else { 1.0 };
            assert_eq!(pe[(0, j)], expect);
        }
        assert!((pe[(1, 0)] - 1f64.sin()).abs() < 1e-12);
        assert!(pe.iter().all(|v| (-1.0..=1.0).contains(v)));
        // positional_encoding adds the table.
        let c = Array2::from_elem((4, 8), 2.0);
        let p = positional_encoding(&c);
        for ((i, j), v) in p.indexed_iter() {
            assert!((v - 2.0 - pe[(i, j)]).abs() < 1e-12);
        }
    }

    #[test]
    fn attention_single_token_returns_value_row() {
        let p = array![[1.0, 2.0]];
        let w = Array2::eye(2);
        let out = attention_head(&p, &w, &w, &w);
        assert_eq!(out, array![[1.0, 2.0]]);
    }

    #[test]
    fn attention_identical_rows_average_values() {
        let p = array![[1.0, 2.0], [1.0, 2.0], [1.0, 2.0]];
        let mut rng = ChaCha20Rng::seed_from_u64(1);
        let wq = Array2::from_shape_fn((2, 2), |_| rng.random::<f64>());
        let wk = Array2::from_shape_fn((2, 2), |_| rng.random::<f64>());
        let wv = Array2::from_shape_fn((2, 2), |_| rng.random::<f64>());
        let out = attention_head(&p, &wq, &wk, &wv);
        let v = p.dot(&wv);
        for r in 0..3 {
            for c in 0..2 {
                assert!((out[(r, c)] - v[(0, c)]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn attention_zero_query_is_uniform() {
        // d_k = 1, W_Q = 0 → logits 0 → output is the mean of V = [1,3] → 2.
        let p = array![[1.0], [3.0]];
        let wq = array![[0.0]];
        let wk = array![[0.7]];
        let wv = array![[1.0]];
        let out = attention_head(&p, &wq, &wk, &wv);
        assert!((out[(0, 0)] - 2.0).abs() < 1e-12);
        assert!((out[(1, 0)] - 2.0).abs() < 1e-12);
    }

    #[test]
    fn bmm_attention_matches_dense_attention() {
        let state = micro_state(5, 2, 9);
        let mut rng = ChaCha20Rng::seed_from_u64(10);
        let p = Array2::from_shape_fn((5, 8), |_| rng.random::<f64>() - 0.5);
        // Head 0 of layer 0 computed densely.
        let l = &state.layers[0];
        let d_k = state.config.d_k();
        let wq = l.w_q.slice(ndarray::s![.., ..d_k]).to_owned();
        let wk = l.w_k.slice(ndarray::s![.., ..d_k]).to_owned();
        let wv = l.w_v.slice(ndarray::s![.., ..d_k]).to_owned();
        let dense = attention_head(&p, &wq, &wk, &wv);

        let mut tape = Tape::new();
        let pv = tape.constant(p.clone());
        let wql = tape.constant(l.w_q.clone());
        let wkl = tape.constant(l.w_k.clone());
        let wvl = tape.constant(l.w_v.clone());
        let q_all = tape.matmul(pv, wql);
        let k_all = tape.matmul(pv, wkl);
        let v_all = tape.matmul(pv, wvl);
        let qh = tape.slice_cols(q_all, 0, d_k);
        let kh = tape.slice_cols(k_all, 0, d_k);
        let vh = tape.slice_cols(v_all, 0, d_k);
        let logits = tape.bmm_nt(qh, kh, 5);
        let scaled = tape.scale(logits, 1.0 / (d_k as f64).sqrt());
        let attn = tape.softmax(scaled);
        let ctx = tape.bmm_nn(attn, vh, 5);
        for (a, b) in tape.value(ctx).iter().zip(dense.iter()) {
            assert!((a - b).abs() < 1e-10);
        }
    }

    #[test]
    fn encoder_attention_rows_sum_to_one_and_norms_standardize() {
        let state = micro_state(6, 2, 11);
        let mut rng = ChaCha20Rng::seed_from_u64(12);
        let x = Array2::from_shape_fn((12, 1), |_| rng.random::<f64>());
        let mut tape = Tape::new();
        let vars = PredictorVars::leaves(&mut tape, &state, false);
        let xv = tape.constant(x);
        let mut stats = ForwardStats::default();
        let mut trace = ForwardTrace::default();
        let _ = predictor_forward(
            &mut tape,
            xv,
            &vars,
            &state.config,
            2,
            None,
            &mut stats,
            Some(&mut trace),
        );
        assert_eq!(trace.attention.len(), 2 * 2); // layers × heads
        for attn in &trace.attention {
            for row in attn.outer_iter() {
                let s: f64 = row.sum();
                assert!((s - 1.0).abs() < 1e-6, "row sum {s}");
                assert!(row.iter().all(|&v| v >= 0.0));
            }
        }
        assert_eq!(trace.ln_pre_affine.len(), 2 * 2); // two norms per layer
        for ln in &trace.ln_pre_affine {
            for row in ln.outer_iter() {
                let d = row.len() as f64;
                let mean: f64 = row.sum() / d;
                let var: f64 = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d;
                assert!(mean.abs() < 1e-5, "row mean {mean}");
                assert!((var - 1.0).abs() < 1e-3, "row var {var}");
            }
        }
    }

    #[test]
    fn forward_is_bitwise_repeatable_without_dropout() {
        let state = micro_state(7, 3, 13);
        let mut rng = ChaCha20Rng::seed_from_u64(14);
        let x: Array2<f64> = Array2::from_shape_fn((7, 1), |_| rng.random::<f64>());
        let a = forecast(&x, &state).unwrap();
        let b = forecast(&x, &state).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn zeroed_residual_branches_reduce_to_norm_chain() {
        let mut state = micro_state(5, 1, 15);
        for l in &mut state.layers {
            l.w_o = Array2::zeros((8, 8));
            l.w_2 = Array2::zeros((16, 8));
        }
        let mut rng = ChaCha20Rng::seed_from_u64(16);
        let p = Array2::from_shape_fn((5, 8), |_| rng.random::<f64>() * 2.0);
        let h = encoder_forward(&p, &state).unwrap();

        // Independent layer-norm chain (γ=1, β=0 at init).
        let ln = |x: &Array2<f64>| -> Array2<f64> {
            let mut out = x.clone();
            for mut row in out.outer_iter_mut() {
                let d = row.len() as f64;
                let mean = row.sum() / d;
                let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d;
                let inv = 1.0 / (var + LN_EPS).sqrt();
                row.mapv_inplace(|v| (v - mean) * inv);
            }
            out
        };
        let mut expect = p;
        for _ in 0..2 {
            expect = ln(&ln(&expect));
        }
        for (a, b) in h.iter().zip(expect.iter()) {
            assert!((a - b).abs() < 1e-10, "{a} vs {b}");
        }
    }

    #[test]
    fn pool_is_mean_and_permutation_invariant() {
        assert_eq!(
            global_pool(&array![[1.0, 2.0], [3.0, 4.0]]),
            vec![2.0, 3.0]
        );
        let constant = Array2::from_elem((4, 3), 0.7);
        assert_eq!(global_pool(&constant), vec![0.7, 0.7, 0.7]);
        let a = array![[1.0, 5.0], [2.0, 6.0], [3.0, 7.0]];
        let b = array![[3.0, 7.0], [1.0, 5.0], [2.0, 6.0]];
        assert_eq!(global_pool(&a), global_pool(&b));
    }

    #[test]
    fn forecast_shape_sharing_and_single_pass() {
        for p in [1, 3, 5] {
            let state = micro_state(6, p, 17);
            let mut rng = ChaCha20Rng::seed_from_u64(18);
            let x = Array2::from_shape_fn((6, 1), |_| rng.random::<f64>());
            let (y, stats) = forecast_with_stats(&x, &state).unwrap();
            assert_eq!(y.len(), p);
            assert_eq!(stats.encoder_passes, 1);
        }
        // Two identical sequences share weights → identical forecasts.
        let state = micro_state(6, 3, 19);
        let seq: Vec<f64> = (0..6).map(|t| (t as f64 * 0.3).sin()).collect();
        let out = forecast_batch(&[seq.clone(), seq], &state).unwrap();
        for j in 0..3 {
            assert_eq!(out[(0, j)], out[(1, j)]);
        }
    }

    #[test]
    fn parameter_gradients_match_finite_differences() {
        // MSE loss on a d_model=8, q=5 configuration.
        let state = micro_state(5, 2, 20);
        let cfg = state.config;
        let mut rng = ChaCha20Rng::seed_from_u64(21);
        let x = Array2::from_shape_fn((5, 1), |_| rng.random::<f64>());
        let target = Array2::from_shape_fn((1, 2), |_| rng.random::<f64>());

        let loss_of = |st: &PredictorState| -> f64 {
            let mut tape = Tape::new();
            let vars = PredictorVars::leaves(&mut tape, st, false);
            let xv = tape.constant(x.clone());
            let mut stats = ForwardStats::default();
            let out = predictor_forward(&mut tape, xv, &vars, &cfg, 1, None, &mut stats, None);
            let tv = tape.constant(target.clone());
            let l = tape.mse(out, tv);
            tape.scalar(l)
        };

        let mut tape = Tape::new();
        let vars = PredictorVars::leaves(&mut tape, &state, true);
        let xv = tape.constant(x.clone());
        let mut stats = ForwardStats::default();
        let out = predictor_forward(&mut tape, xv, &vars, &cfg, 1, None, &mut stats, None);
        let tv = tape.constant(target.clone());
        let loss = tape.mse(out, tv);
        let wrt = vars.var_list();
        let grads = tape.backward(loss, &wrt);

        // Spot-check a deterministic sample of parameters in every tensor.
        let tensors = state.tensors();
        for (ti, tensor) in tensors.iter().enumerate() {
            let g = tape.value(grads[ti]).clone();
            let (rows, cols) = tensor.dim();
            let picks = [(0usize, 0usize), (rows / 2, cols / 2), (rows - 1, cols - 1)];
            for &(r, c) in &picks {
                let mut stp = state.clone();
                stp.tensors_mut()[ti][(r, c)] += 1e-5;
                let mut stm = state.clone();
                stm.tensors_mut()[ti][(r, c)] -= 1e-5;
                let fd = (loss_of(&stp) - loss_of(&stm)) / 2e-5;
                let a = g[(r, c)];
                let denom = a.abs().max(fd.abs()).max(1e-6);
                assert!(
                    ((a - fd) / denom).abs() < 1e-3,
                    "tensor {ti} ({r},{c}): analytic {a} vs fd {fd}"
                );
            }
        }
    }

    #[test]
    fn dropout_masks_are_applied_in_train_mode() {
        let mut state = micro_state(6, 2, 22);
        state.config.dropout = 0.5;
        state.w_out = Array2::ones((8, 2));
        let mut rng = ChaCha20Rng::seed_from_u64(23);
        let x = Array2::from_shape_fn((6, 1), |_| rng.random::<f64>() + 0.5);
        let run = |seed: u64, state: &PredictorState, x: &Array2<f64>| {
            let mut tape = Tape::new();
            let vars = PredictorVars::leaves(&mut tape, state, false);
            let xv = tape.constant(x.clone());
            let mut stats = ForwardStats::default();
            let mut drop_rng = ChaCha20Rng::seed_from_u64(seed);
            let out = predictor_forward(
                &mut tape,
                xv,
                &vars,
                &state.config,
                1,
                Some((&mut drop_rng, state.config.dropout)),
                &mut stats,
                None,
            );
            tape.value(out).clone()
        };
        let a = run(1, &state, &x);
        let b = run(1, &state, &x);
        let c = run(2, &state, &x);
        assert_eq!(a, b, "same dropout seed must repeat");
        assert_ne!(a, c, "different dropout seeds must differ");
    }
}
