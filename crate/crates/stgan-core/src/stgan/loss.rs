//! Wasserstein losses and the interpolate gradient penalty.

use ndarray::Array2;

use crate::tensor::{Tape, Var, WindowDims};

/// Critic loss `−(mean(real) − mean(fake)) + λ_gp·gp`.
pub fn d_loss(tape: &mut Tape, real_scores: Var, fake_scores: Var, gp: Var, lambda_gp: f64) -> Var {
    let mr = tape.mean_all(real_scores);
    let mf = tape.mean_all(fake_scores);
    let gap = tape.sub(mr, mf);
    let neg = tape.neg(gap);
    let pen = tape.scale(gp, lambda_gp);
    tape.add(neg, pen)
}

/// Generator loss `−mean(fake)`.
pub fn g_loss(tape: &mut Tape, fake_scores: Var) -> Var {
    let mf = tape.mean_all(fake_scores);
    tape.neg(mf)
}

/// `E[(‖∇_x̂ D(x̂)‖₂ − 1)²]` over per-window interpolates
/// `x̂ = ε·real + (1−ε)·fake`.
///
/// `real` and `fake` are step-major stacks matching `dims`; `eps` holds one
/// mixing coefficient per window. The critic maps the stacked input to one
/// score per window. The input gradient is taken on this tape, so the
/// resulting penalty node stays differentiable with respect to any critic
/// parameters that require gradients.
pub fn gradient_penalty(
    tape: &mut Tape,
    critic: &mut dyn FnMut(&mut Tape, Var) -> Var,
    real: &Array2<f64>,
    fake: &Array2<f64>,
    dims: WindowDims,
    eps: &[f64],
) -> Var {
    assert_eq!(real.dim(), fake.dim(), "gradient_penalty shapes");
    assert_eq!(real.nrows(), dims.total_rows(), "gradient_penalty rows");
    assert_eq!(eps.len(), dims.windows, "one epsilon per window");

    let mut mixed = Array2::zeros(real.dim());
    for t in 0..dims.steps {
        for w in 0..dims.windows {
            let base = (t * dims.windows + w) * dims.rows_per_window;
            let e = eps[w];
            for i in 0..dims.rows_per_window {
                for c in 0..real.ncols() {
                    mixed[(base + i, c)] =
                        e * real[(base + i, c)] + (1.0 - e) * fake[(base + i, c)];
                }
            }
        }
    }

    let x_hat = tape.leaf(mixed, true);
    let scores = critic(tape, x_hat);
    assert_eq!(
        tape.value(scores).dim(),
        (dims.windows, 1),
        "critic must score each window"
    );
    // Per-window scores depend only on their own rows, so the gradient of the
    // summed score recovers each window's own input gradient.
    let total = tape.sum_all(scores);
    let grad = tape.backward(total, &[x_hat])[0];
    let grad_sq = tape.mul(grad, grad);
    let per_window = tape.window_sum(grad_sq, dims);
    // Tiny offset keeps the square root differentiable at an all-zero gradient.
    let shifted = tape.add_scalar(per_window, 1e-24);
    let norms = tape.sqrt(shifted);
    let centered = tape.add_scalar(norms, -1.0);
    let sq = tape.mul(centered, centered);
    tape.mean_all(sq)
}
