//! Built-in oracle suites: independent reference implementations and
//! randomized equivalence checks used by `cmd_check` and the test harness.

use ndarray::{Array1, Array2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::crf::{self, TransitionModel};
use crate::error::{Error, Result};
use crate::nn::{
    init_params, lstm_cell_forward, ForwardOpts, GradientStore, LstmDirectionParams, ModelParams,
    SLOT_NAMES,
};
use crate::optim::{init_state, step, OptimizerConfig, OptimizerKind};
use crate::train::{batch_loss, batch_loss_and_grads};

/// Scalar-loop LSTM cell reference: same math as the vectorized cell, but
/// written with explicit index loops and no linear-algebra helpers.
pub fn scalar_lstm_cell(
    x: &Array1<f64>,
    h_prev: &Array1<f64>,
    c_prev: &Array1<f64>,
    p: &LstmDirectionParams,
) -> (Array1<f64>, Array1<f64>) {
    let h = h_prev.len();
    let e = x.len();
    let mut z = vec![0.0; h + e];
    for j in 0..h {
        z[j] = h_prev[j];
    }
    for j in 0..e {
        z[h + j] = x[j];
    }
    let dot = |w: &ndarray::Array2<f64>, b: &Array1<f64>, row: usize| -> f64 {
        let mut acc = b[row];
        for (col, zv) in z.iter().enumerate() {
            acc += w[[row, col]] * zv;
        }
        acc
    };
    let sig = |v: f64| 1.0 / (1.0 + (-v).exp());
    let mut h_t = Array1::zeros(h);
    let mut c_t = Array1::zeros(h);
    for j in 0..h {
        let f = sig(dot(&p.w_f, &p.b_f, j));
        let i = sig(dot(&p.w_i, &p.b_i, j));
        let o = sig(dot(&p.w_o, &p.b_o, j));
        let g = dot(&p.w_c, &p.b_c, j).tanh();
        let c = f * c_prev[j] + i * g;
        c_t[j] = c;
        h_t[j] = o * c.tanh();
    }
    (h_t, c_t)
}

/// Checks dynamic-programming CRF inference against exhaustive enumeration
/// on random instances (lengths 1–6, 1–5 tags, scores uniform in
/// `[-2, 2)`). Partition functions must agree within `1e-9` and decoded
/// paths exactly. Returns the largest observed partition deviation.
pub fn crf_oracle_suite(instances: usize, seed: u64) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut max_delta = 0.0f64;
    for case in 0..instances {
        let n = rng.random_range(1..=6);
        let k = rng.random_range(1..=5);
        let emissions = Array2::from_shape_fn((n, k), |_| rng.random_range(-2.0..2.0));
        let trans = TransitionModel {
            trans: Array2::from_shape_fn((k, k), |_| rng.random_range(-2.0..2.0)),
            start: Array1::from_shape_fn(k, |_| rng.random_range(-2.0..2.0)),
            stop: Array1::from_shape_fn(k, |_| rng.random_range(-2.0..2.0)),
        };

        let log_z = crf::log_partition(&emissions, &trans)?;
        let log_z_ref = crf::brute_force_log_partition(&emissions, &trans)?;
        let delta = (log_z - log_z_ref).abs();
        if delta > 1e-9 {
            return Err(Error::NumericFailure(format!(
                "case {case} (n={n}, k={k}): log partition {log_z} vs enumeration {log_z_ref}"
            )));
        }
        max_delta = max_delta.max(delta);

        let fast = crf::viterbi_decode(&emissions, &trans)?;
        let slow = crf::brute_force_best(&emissions, &trans)?;
        if fast.tags != slow.tags || fast.score != slow.score {
            return Err(Error::NumericFailure(format!(
                "case {case} (n={n}, k={k}): viterbi {:?} ({}) vs enumeration {:?} ({})",
                fast.tags, fast.score, slow.tags, slow.score
            )));
        }
    }
    Ok(max_delta)
}

const FD_VOCAB: usize = 7;
const FD_EMBED: usize = 4;
const FD_HIDDEN: usize = 3;
const FD_TAGS: usize = 5;
const FD_LEN: usize = 6;
const FD_BATCH: usize = 2;
const FD_STEP: f64 = 1e-5;
const FD_REL_TOL: f64 = 1e-4;
const FD_ABS_FLOOR: f64 = 1e-7;

/// Central-difference check of every analytic gradient entry on a small
/// random model and batch. An entry passes when
/// `|analytic - fd| <= max(1e-7, 1e-4 * max(|analytic|, |fd|))`.
/// Returns the worst relative error observed.
pub fn gradient_fd_suite(seed: u64) -> Result<f64> {
    gradient_fd_run(seed, None)
}

/// [`gradient_fd_suite`] with a deliberately damaged analytic gradient;
/// must fail. Exists so the checker itself can be checked.
#[doc(hidden)]
pub fn gradient_fd_suite_corrupted(seed: u64) -> Result<f64> {
    gradient_fd_run(seed, Some(1e-3))
}

fn gradient_fd_run(seed: u64, corruption: Option<f64>) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut params = init_params(FD_VOCAB, FD_EMBED, FD_HIDDEN, FD_TAGS, &mut rng)?;
    let mut ids = Vec::with_capacity(FD_BATCH);
    let mut gold = Vec::with_capacity(FD_BATCH);
    for _ in 0..FD_BATCH {
        ids.push(
            (0..FD_LEN)
                .map(|_| rng.random_range(2..FD_VOCAB))
                .collect::<Vec<usize>>(),
        );
        gold.push(
            (0..FD_LEN)
                .map(|_| rng.random_range(0..FD_TAGS))
                .collect::<Vec<usize>>(),
        );
    }
    let batch: Vec<(&[usize], &[usize])> = ids
        .iter()
        .zip(&gold)
        .map(|(i, g)| (i.as_slice(), g.as_slice()))
        .collect();

    // no dropout, so the rng is never consumed and every evaluation is
    // a pure function of the parameters
    let opts = ForwardOpts::default();
    let mut unused_rng = ChaCha8Rng::seed_from_u64(0);
    let mut grads = GradientStore::zeros_like(&params);
    batch_loss_and_grads(&params, &batch, &opts, &mut unused_rng, &mut grads)?;
    if let Some(delta) = corruption {
        grads.flat_mut()[1][0] += delta; // fwd.w_f, first entry
    }

    let mut worst_rel = 0.0f64;
    #[allow(clippy::needless_range_loop)] // slot indexes three parallel stores
    for slot in 0..SLOT_NAMES.len() {
        for idx in 0..grads.flat()[slot].len() {
            let orig = params.flat()[slot][idx];
            params.flat_mut()[slot][idx] = orig + FD_STEP;
            let plus = batch_loss(&params, &batch, &opts, &mut unused_rng)?;
            params.flat_mut()[slot][idx] = orig - FD_STEP;
            let minus = batch_loss(&params, &batch, &opts, &mut unused_rng)?;
            params.flat_mut()[slot][idx] = orig;

            let fd = (plus - minus) / (2.0 * FD_STEP);
            let analytic = grads.flat()[slot][idx];
            let diff = (analytic - fd).abs();
            let scale = analytic.abs().max(fd.abs());
            if diff > (FD_REL_TOL * scale).max(FD_ABS_FLOOR) {
                return Err(Error::NumericFailure(format!(
                    "gradient mismatch at {}[{idx}]: analytic {analytic:.9e}, central difference {fd:.9e}",
                    SLOT_NAMES[slot]
                )));
            }
            worst_rel = worst_rel.max(diff / scale.max(FD_ABS_FLOOR));
        }
    }
    Ok(worst_rel)
}

const QUADRATIC_STEP_BUDGET: usize = 10_000;

/// Drives every optimizer at lr 0.01 down the quadratic
/// `f(theta) = ||theta||^2 / 2` (gradient `theta`) from all-ones
/// parameters. Every coordinate follows the same scalar trajectory, so
/// this is the textbook 1-d sanity problem run through the real `step`
/// machinery. Returns, per optimizer, the first step at which every
/// parameter magnitude drops below `1e-3`; errors if an optimizer fails
/// to get there within 10000 steps.
pub fn optimizer_quadratic_suite() -> Result<Vec<(OptimizerKind, usize)>> {
    let mut results = Vec::new();
    for kind in [
        OptimizerKind::Adam,
        OptimizerKind::Gd,
        OptimizerKind::RmsProp,
    ] {
        let cfg = OptimizerConfig::for_kind(kind).with_lr(0.01);
        let mut params = ModelParams::zeros(2, 2, 2, 2);
        for slot in params.flat_mut() {
            slot.fill(1.0);
        }
        let mut grads = GradientStore::zeros_like(&params);
        let mut state = init_state(&params, &cfg);
        let mut first_hit = None;
        for step_index in 1..=QUADRATIC_STEP_BUDGET {
            for (g, p) in grads.flat_mut().into_iter().zip(params.flat()) {
                g.copy_from_slice(p);
            }
            step(&mut params, &grads, &mut state, &cfg)?;
            let max_abs = params
                .flat()
                .iter()
                .flat_map(|s| s.iter())
                .fold(0.0f64, |m, v| m.max(v.abs()));
            if max_abs < 1e-3 {
                first_hit = Some(step_index);
                break;
            }
        }
        match first_hit {
            Some(s) => results.push((kind, s)),
            None => {
                return Err(Error::NumericFailure(format!(
                    "{kind} did not reach |theta| < 1e-3 within {QUADRATIC_STEP_BUDGET} steps"
                )))
            }
        }
    }
    Ok(results)
}

/// Compares the vectorized LSTM cell against [`scalar_lstm_cell`] on
/// random shapes and inputs (tolerance `1e-12`), then checks that zero
/// parameters and inputs give exactly zero state. Returns the worst
/// deviation seen.
pub fn lstm_cell_fidelity_suite(cases: usize, seed: u64) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = 0.0f64;
    for case in 0..cases {
        let h = rng.random_range(1..=5);
        let e = rng.random_range(1..=6);
        let mut p = LstmDirectionParams::zeros(h, h + e);
        for w in [&mut p.w_f, &mut p.w_i, &mut p.w_o, &mut p.w_c] {
            w.mapv_inplace(|_| rng.random_range(-1.0..1.0));
        }
        for b in [&mut p.b_f, &mut p.b_i, &mut p.b_o, &mut p.b_c] {
            b.mapv_inplace(|_| rng.random_range(-1.0..1.0));
        }
        let x = Array1::from_shape_fn(e, |_| rng.random_range(-1.0..1.0));
        let h_prev = Array1::from_shape_fn(h, |_| rng.random_range(-1.0..1.0));
        let c_prev = Array1::from_shape_fn(h, |_| rng.random_range(-1.0..1.0));

        let (h_fast, c_fast) = lstm_cell_forward(&x, &h_prev, &c_prev, &p)?;
        let (h_ref, c_ref) = scalar_lstm_cell(&x, &h_prev, &c_prev, &p);
        for (a, b) in h_fast.iter().zip(&h_ref).chain(c_fast.iter().zip(&c_ref)) {
            let d = (a - b).abs();
            if d > 1e-12 {
                return Err(Error::NumericFailure(format!(
                    "cell case {case} (h={h}, e={e}): deviation {d:e}"
                )));
            }
            worst = worst.max(d);
        }
    }

    let p = LstmDirectionParams::zeros(3, 5);
    let (h_zero, c_zero) =
        lstm_cell_forward(&Array1::zeros(2), &Array1::zeros(3), &Array1::zeros(3), &p)?;
    if h_zero.iter().chain(c_zero.iter()).any(|&v| v != 0.0) {
        return Err(Error::NumericFailure(
            "zero parameters and inputs produced nonzero state".into(),
        ));
    }
    Ok(worst)
}
