//! Adversarial steps: critic updates on (history ⊕ forecast) windows with a
//! gradient penalty, then one combined generator + predictor update.

use std::rc::Rc;

use ndarray::Array2;
use rand::Rng;
use rand_chacha::ChaCha20Rng;
use rand_distr::StandardNormal;

use crate::opt::AdamConfig;
use crate::predictor::{predictor_forward, ForwardStats, PredictorState, PredictorVars};
use crate::stgan::{
    condition_window, d_loss, discriminator_forward, g_loss, generator_forward,
    gradient_penalty, stack_windows, DiscriminatorVars, GanState, GeneratorVars,
};
use crate::tensor::{Tape, WindowDims};

use super::{PreparedData, TrainConfig, TrainError};

/// Loss values of one adversarial iteration.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct JointLosses {
    /// Critic loss including the weighted penalty (last critic update).
    pub d_total: f64,
    /// Score gap −(mean real − mean fake) before the penalty.
    pub d_wasserstein: f64,
    /// Gradient penalty value (unweighted).
    pub gp: f64,
    /// Adversarial generator loss −mean(fake score).
    pub g_adv: f64,
    /// Forecast MSE on generated histories against real horizons.
    pub pred_mse: f64,
    /// Combined generator objective λ_gan·g_adv + λ_pred·pred_mse.
    pub g_total: f64,
}

/// Per-batch tensors shared by every update in one iteration.
pub struct JointBatch {
    pub adjacency: Rc<Vec<Array2<f64>>>,
    pub conditions: Array2<f64>,
    pub real_full: Array2<f64>,
    pub real_hist: Array2<f64>,
    /// Real histories in the predictor's per-sequence layout, (B·N·q)×1.
    pub real_hist_seqs: Array2<f64>,
    pub horizon_targets: Array2<f64>,
    pub windows: usize,
    pub regions: usize,
}

impl JointBatch {
    pub fn assemble(prepared: &PreparedData, batch_idx: &[usize]) -> JointBatch {
        let n = prepared.regions.len();
        let q = prepared.q;
        let p = prepared.p;
        let adjacency: Vec<Array2<f64>> = batch_idx
            .iter()
            .map(|&k| prepared.weights[k].normalized.clone())
            .collect();
        let conditions: Vec<Array2<f64>> = batch_idx
            .iter()
            .map(|&k| {
                condition_window(&prepared.scaled_values, prepared.windows.anchors[k], q)
            })
            .collect();
        let fulls: Vec<Array2<f64>> = batch_idx
            .iter()
            .map(|&k| prepared.windows.full_window(k))
            .collect();
        let hists: Vec<Array2<f64>> = batch_idx
            .iter()
            .map(|&k| prepared.windows.history[k].clone())
            .collect();
        let mut targets = Array2::zeros((batch_idx.len() * n, p));
        let mut hist_seqs = Array2::zeros((batch_idx.len() * n * q, 1));
        for (wi, &k) in batch_idx.iter().enumerate() {
            for r in 0..n {
                for h in 0..p {
                    targets[(wi * n + r, h)] = prepared.windows.horizon[k][(h, r)];
                }
                for t in 0..q {
                    hist_seqs[((wi * n + r) * q + t, 0)] = prepared.windows.history[k][(t, r)];
                }
            }
        }
        JointBatch {
            adjacency: Rc::new(adjacency),
            conditions: stack_windows(&conditions),
            real_full: stack_windows(&fulls),
            real_hist: stack_windows(&hists),
            real_hist_seqs: hist_seqs,
            horizon_targets: targets,
            windows: batch_idx.len(),
            regions: n,
        }
    }
}

/// Step-major (t·B + w)·N + i row → per-sequence s·q + t row, s = w·N + i.
fn gan_to_pred_idx(q: usize, b: usize, n: usize) -> Vec<usize> {
    let mut idx = vec![0usize; q * b * n];
    for w in 0..b {
        for i in 0..n {
            let s = w * n + i;
            for t in 0..q {
                idx[s * q + t] = (t * b + w) * n + i;
            }
        }
    }
    idx
}

/// (B·N)×p forecast matrix → step-major (h·B + w)·N + i rows.
fn pred_to_gan_idx(p: usize, b: usize, n: usize) -> Vec<usize> {
    let mut idx = vec![0usize; p * b * n];
    for h in 0..p {
        for w in 0..b {
            for i in 0..n {
                idx[(h * b + w) * n + i] = (w * n + i) * p + h;
            }
        }
    }
    idx
}

fn sample_noise(rng: &mut ChaCha20Rng, rows: usize) -> Array2<f64> {
    Array2::from_shape_fn((rows, 1), |_| rng.sample(StandardNormal))
}

/// One full adversarial iteration: `n_critic` critic updates on q+p-length
/// real vs (generated ⊕ forecast) windows, then a combined update of the
/// generator and predictor. Critic updates never touch generator or
/// predictor tensors and vice versa.
pub fn joint_step(
    gan: &mut GanState,
    pred: &mut PredictorState,
    opt_t: &mut crate::opt::AdamState,
    prepared: &PreparedData,
    batch_idx: &[usize],
    cfg: &TrainConfig,
    rng: &mut ChaCha20Rng,
) -> Result<JointLosses, TrainError> {
    let jb = JointBatch::assemble(prepared, batch_idx);
    let (b, n, q, p) = (jb.windows, jb.regions, prepared.q, prepared.p);
    let dims_q = WindowDims {
        steps: q,
        windows: b,
        rows_per_window: n,
    };
    let dims_l = WindowDims {
        steps: q + p,
        windows: b,
        rows_per_window: n,
    };
    let g2p = Rc::new(gan_to_pred_idx(q, b, n));
    let p2g = Rc::new(pred_to_gan_idx(p, b, n));
    let adam_d = AdamConfig::with_lr(cfg.lr_d);
    let adam_g = AdamConfig::with_lr(cfg.lr_g);
    // Joint-phase predictor rate defaults to the generator's, not the
    // pretraining rate.
    let adam_t = AdamConfig::with_lr(cfg.joint_lr_t.unwrap_or(cfg.lr_g));
    let pred_cfg = pred.config;

    let mut d_total = 0.0;
    let mut d_wasserstein = 0.0;
    let mut gp_value = 0.0;
    for _ in 0..cfg.n_critic {
        let z = sample_noise(rng, q * b * n);
        let eps: Vec<f64> = (0..b).map(|_| rng.random::<f64>()).collect();
        let mut tape = Tape::new();
        let gvars = GeneratorVars::leaves(&mut tape, &gan.generator, false);
        let pvars = PredictorVars::leaves(&mut tape, pred, false);
        let dvars = DiscriminatorVars::leaves(&mut tape, &gan.discriminator, true);

        let zl = tape.constant(z);
        let yl = tape.constant(jb.conditions.clone());
        let zy = tape.concat_cols(&[zl, yl]);
        let x_hat = generator_forward(&mut tape, zy, Rc::clone(&jb.adjacency), &gvars, dims_q);
        let pred_in = tape.gather(x_hat, Rc::clone(&g2p), (b * n * q, 1));
        let mut stats = ForwardStats::default();
        let y_hat = predictor_forward(
            &mut tape, pred_in, &pvars, &pred_cfg, b * n, None, &mut stats, None,
        );
        let tail = tape.gather(y_hat, Rc::clone(&p2g), (p * b * n, 1));
        let fake_full = tape.concat_rows(&[x_hat, tail]);
        let fake_value = tape.value(fake_full).clone();

        let real = tape.constant(jb.real_full.clone());
        let real_scores =
            discriminator_forward(&mut tape, real, Rc::clone(&jb.adjacency), &dvars, dims_l);
        let fake_scores = discriminator_forward(
            &mut tape,
            fake_full,
            Rc::clone(&jb.adjacency),
            &dvars,
            dims_l,
        );
        let adjacency = Rc::clone(&jb.adjacency);
        let gp = gradient_penalty(
            &mut tape,
            &mut |t, x| discriminator_forward(t, x, Rc::clone(&adjacency), &dvars, dims_l),
            &jb.real_full,
            &fake_value,
            dims_l,
            &eps,
        );
        let ld = d_loss(&mut tape, real_scores, fake_scores, gp, cfg.lambda_gp);
        d_total = tape.scalar(ld);
        gp_value = tape.scalar(gp);
        let mr = tape.value(real_scores).mean().unwrap();
        let mf = tape.value(fake_scores).mean().unwrap();
        d_wasserstein = -(mr - mf);
        if !d_total.is_finite() {
            return Err(TrainError::Divergence {
                what: "critic loss",
                phase: "joint",
                step: gan.iter,
            });
        }
        let wrt = dvars.var_list();
        let grad_vars = tape.backward(ld, &wrt);
        let grads: Vec<Array2<f64>> = grad_vars.iter().map(|&g| tape.value(g).clone()).collect();
        drop(tape);
        let mut params = gan.discriminator.tensors_mut();
        gan.opt_d.step(&mut params, &grads, &adam_d);
    }

    // Combined generator + predictor update on fresh noise. The forecast
    // loss covers generated histories and the batch's real histories 1:1,
    // both against the real horizons.
    let z = sample_noise(rng, q * b * n);
    let mut tape = Tape::new();
    let gen_grad = !cfg.freeze_generator;
    let pred_grad = cfg.lambda_pred != 0.0;
    let gvars = GeneratorVars::leaves(&mut tape, &gan.generator, gen_grad);
    let pvars = PredictorVars::leaves(&mut tape, pred, pred_grad);
    let dvars = DiscriminatorVars::leaves(&mut tape, &gan.discriminator, false);

    let zl = tape.constant(z);
    let yl = tape.constant(jb.conditions.clone());
    let zy = tape.concat_cols(&[zl, yl]);
    let x_hat = generator_forward(&mut tape, zy, Rc::clone(&jb.adjacency), &gvars, dims_q);
    let virt_in = tape.gather(x_hat, Rc::clone(&g2p), (b * n * q, 1));
    let real_in = tape.constant(jb.real_hist_seqs.clone());
    let pred_in = tape.concat_rows(&[virt_in, real_in]);
    let mut stats = ForwardStats::default();
    let seqs = 2 * b * n;
    let y_hat = if pred_cfg.dropout > 0.0 {
        predictor_forward(
            &mut tape,
            pred_in,
            &pvars,
            &pred_cfg,
            seqs,
            Some((rng, pred_cfg.dropout)),
            &mut stats,
            None,
        )
    } else {
        predictor_forward(
            &mut tape, pred_in, &pvars, &pred_cfg, seqs, None, &mut stats, None,
        )
    };
    let mut both_targets = Array2::zeros((seqs, p));
    for s in 0..b * n {
        for h in 0..p {
            both_targets[(s, h)] = jb.horizon_targets[(s, h)];
            both_targets[(b * n + s, h)] = jb.horizon_targets[(s, h)];
        }
    }
    let targets = tape.constant(both_targets);
    let l_pred = tape.mse(y_hat, targets);

    // The critic sees the forecast tail as data: the adversarial term feeds
    // gradients to the generator only through the generated history rows.
    // Only the virtual half of the forecasts forms the fake tail.
    let y_hat_virt = tape.slice_rows(y_hat, 0, b * n);
    let tail = tape.gather(y_hat_virt, Rc::clone(&p2g), (p * b * n, 1));
    let tail_detached = tape.detach(tail);
    let fake_full = tape.concat_rows(&[x_hat, tail_detached]);
    let fake_scores = discriminator_forward(
        &mut tape,
        fake_full,
        Rc::clone(&jb.adjacency),
        &dvars,
        dims_l,
    );
    let l_g = g_loss(&mut tape, fake_scores);
    let weighted_g = tape.scale(l_g, cfg.lambda_gan);
    let weighted_pred = tape.scale(l_pred, cfg.lambda_pred);
    let total = tape.add(weighted_g, weighted_pred);

    let g_adv = tape.scalar(l_g);
    let pred_mse = tape.scalar(l_pred);
    let g_total = tape.scalar(total);
    if !g_total.is_finite() {
        return Err(TrainError::Divergence {
            what: "generator loss",
            phase: "joint",
            step: gan.iter,
        });
    }

    let mut wrt = Vec::new();
    if gen_grad {
        wrt.extend(gvars.var_list());
    }
    if pred_grad {
        wrt.extend(pvars.var_list());
    }
    if !wrt.is_empty() {
        let grad_vars = tape.backward(total, &wrt);
        let grads: Vec<Array2<f64>> =
            grad_vars.iter().map(|&g| tape.value(g).clone()).collect();
        drop(tape);
        let mut offset = 0;
        if gen_grad {
            let g_count = gan.generator.tensors().len();
            let mut params = gan.generator.tensors_mut();
            gan.opt_g.step(&mut params, &grads[..g_count], &adam_g);
            offset = g_count;
        }
        if pred_grad {
            let mut params = pred.tensors_mut();
            opt_t.step(&mut params, &grads[offset..], &adam_t);
        }
    }

    gan.iter += 1;
    Ok(JointLosses {
        d_total,
        d_wasserstein,
        gp: gp_value,
        g_adv,
        pred_mse,
        g_total,
    })
}

/// Adversarial update on q-length windows only: the critic scores real
/// histories against generated ones, with no predictor in the loop. Used
/// for warmup and for the no-joint ablation.
pub fn gan_only_step(
    gan: &mut GanState,
    prepared: &PreparedData,
    batch_idx: &[usize],
    cfg: &TrainConfig,
    rng: &mut ChaCha20Rng,
    step: u64,
) -> Result<JointLosses, TrainError> {
    let jb = JointBatch::assemble(prepared, batch_idx);
    let (b, n, q) = (jb.windows, jb.regions, prepared.q);
    let dims_q = WindowDims {
        steps: q,
        windows: b,
        rows_per_window: n,
    };
    let adam_d = AdamConfig::with_lr(cfg.lr_d);
    let adam_g = AdamConfig::with_lr(cfg.lr_g);

    let mut d_total = 0.0;
    let mut d_wasserstein = 0.0;
    let mut gp_value = 0.0;
    for _ in 0..cfg.n_critic {
        let z = sample_noise(rng, q * b * n);
        let eps: Vec<f64> = (0..b).map(|_| rng.random::<f64>()).collect();
        let mut tape = Tape::new();
        let gvars = GeneratorVars::leaves(&mut tape, &gan.generator, false);
        let dvars = DiscriminatorVars::leaves(&mut tape, &gan.discriminator, true);
        let zl = tape.constant(z);
        let yl = tape.constant(jb.conditions.clone());
        let zy = tape.concat_cols(&[zl, yl]);
        let x_hat = generator_forward(&mut tape, zy, Rc::clone(&jb.adjacency), &gvars, dims_q);
        let fake_value = tape.value(x_hat).clone();
        let real = tape.constant(jb.real_hist.clone());
        let real_scores =
            discriminator_forward(&mut tape, real, Rc::clone(&jb.adjacency), &dvars, dims_q);
        let fake_scores =
            discriminator_forward(&mut tape, x_hat, Rc::clone(&jb.adjacency), &dvars, dims_q);
        let adjacency = Rc::clone(&jb.adjacency);
        let gp = gradient_penalty(
            &mut tape,
            &mut |t, x| discriminator_forward(t, x, Rc::clone(&adjacency), &dvars, dims_q),
            &jb.real_hist,
            &fake_value,
            dims_q,
            &eps,
        );
        let ld = d_loss(&mut tape, real_scores, fake_scores, gp, cfg.lambda_gp);
        d_total = tape.scalar(ld);
        gp_value = tape.scalar(gp);
        let mr = tape.value(real_scores).mean().unwrap();
        let mf = tape.value(fake_scores).mean().unwrap();
        d_wasserstein = -(mr - mf);
        if !d_total.is_finite() {
            return Err(TrainError::Divergence {
                what: "critic loss",
                phase: "gan_only",
                step,
            });
        }
        let wrt = dvars.var_list();
        let grad_vars = tape.backward(ld, &wrt);
        let grads: Vec<Array2<f64>> = grad_vars.iter().map(|&g| tape.value(g).clone()).collect();
        drop(tape);
        let mut params = gan.discriminator.tensors_mut();
        gan.opt_d.step(&mut params, &grads, &adam_d);
    }

    let z = sample_noise(rng, q * b * n);
    let mut tape = Tape::new();
    let gvars = GeneratorVars::leaves(&mut tape, &gan.generator, !cfg.freeze_generator);
    let dvars = DiscriminatorVars::leaves(&mut tape, &gan.discriminator, false);
    let zl = tape.constant(z);
    let yl = tape.constant(jb.conditions.clone());
    let zy = tape.concat_cols(&[zl, yl]);
    let x_hat = generator_forward(&mut tape, zy, Rc::clone(&jb.adjacency), &gvars, dims_q);
    let fake_scores =
        discriminator_forward(&mut tape, x_hat, Rc::clone(&jb.adjacency), &dvars, dims_q);
    let l_g = g_loss(&mut tape, fake_scores);
    let g_adv = tape.scalar(l_g);
    if !g_adv.is_finite() {
        return Err(TrainError::Divergence {
            what: "generator loss",
            phase: "gan_only",
            step,
        });
    }
    if !cfg.freeze_generator {
        let wrt = gvars.var_list();
        let grad_vars = tape.backward(l_g, &wrt);
        let grads: Vec<Array2<f64>> = grad_vars.iter().map(|&g| tape.value(g).clone()).collect();
        drop(tape);
        let mut params = gan.generator.tensors_mut();
        gan.opt_g.step(&mut params, &grads, &adam_g);
    }

    gan.iter += 1;
    Ok(JointLosses {
        d_total,
        d_wasserstein,
        gp: gp_value,
        g_adv,
        pred_mse: 0.0,
        g_total: g_adv,
    })
}
