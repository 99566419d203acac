//! Finite-difference contracts for every tape primitive.
//!
//! Each op is checked over 20 seeded random trials at eps = 1e-5 with the
//! worst relative error held to 1e-5. ReLU draws keep inputs away from the
//! kink; everything else uses unrestricted draws.

use hico_core::autodiff::{grad_check, Init, Parameter, Phase, RunningStats, Tape, TapeId, Tensor};
use hico_core::rng::{derive_u64, Rng};

const TRIALS: u64 = 20;
const EPS: f64 = 1e-5;
const TOL: f64 = 1e-5;

fn rand_param(name: &str, dims: &[usize], seed: u64, lo: f64, hi: f64) -> Parameter {
    Parameter::new(name, Tensor::create(dims, Init::Uniform { lo, hi, seed }).unwrap())
}

/// Draws in [-1.5, -0.2] or [0.2, 1.5]: clear of the ReLU kink so the
/// eps-ball around each coordinate stays on one side.
fn rand_param_off_zero(name: &str, dims: &[usize], seed: u64) -> Parameter {
    let mut p = rand_param(name, dims, seed, 0.2, 1.5);
    let mut rng = Rng::new(derive_u64(seed, 7));
    for v in p.value.data_mut() {
        if rng.next_f64() < 0.5 {
            *v = -*v;
        }
    }
    p
}

fn check<F>(trial: u64, params: &[Parameter], f: F) -> f64
where
    F: Fn(&mut Tape, &[TapeId]) -> hico_core::Result<TapeId>,
{
    let err = grad_check(f, params, EPS).unwrap();
    assert!(err <= TOL, "trial {trial}: max rel err {err} > {TOL}");
    err
}

#[test]
fn linear_gradients() {
    for t in 0..TRIALS {
        let x = rand_param("x", &[3, 4], derive_u64(100, t), -1.0, 1.0);
        let w = rand_param("w", &[4, 5], derive_u64(101, t), -1.0, 1.0);
        let b = rand_param("b", &[5], derive_u64(102, t), -0.5, 0.5);
        check(t, &[x, w, b], |tape, ids| {
            let y = tape.linear(ids[0], ids[1], ids[2])?;
            let sq = tape.mul(y, y)?;
            tape.sum(sq)
        });
    }
}

#[test]
fn conv2d_gradients_3x3_stride_1() {
    for t in 0..TRIALS {
        let x = rand_param("x", &[2, 3, 5, 4], derive_u64(200, t), -1.0, 1.0);
        let k = rand_param("k", &[2, 3, 3, 3], derive_u64(201, t), -0.6, 0.6);
        check(t, &[x, k], |tape, ids| {
            let y = tape.conv2d(ids[0], ids[1], 1, 1)?;
            let sq = tape.mul(y, y)?;
            tape.sum(sq)
        });
    }
}

#[test]
fn conv2d_gradients_3x3_stride_2() {
    for t in 0..TRIALS {
        let x = rand_param("x", &[1, 2, 5, 5], derive_u64(210, t), -1.0, 1.0);
        let k = rand_param("k", &[3, 2, 3, 3], derive_u64(211, t), -0.6, 0.6);
        check(t, &[x, k], |tape, ids| {
            let y = tape.conv2d(ids[0], ids[1], 2, 1)?;
            let sq = tape.mul(y, y)?;
            tape.sum(sq)
        });
    }
}

#[test]
fn conv2d_gradients_1x1() {
    for t in 0..TRIALS {
        let x = rand_param("x", &[2, 4, 3, 3], derive_u64(220, t), -1.0, 1.0);
        let k = rand_param("k", &[2, 4, 1, 1], derive_u64(221, t), -0.8, 0.8);
        check(t, &[x, k], |tape, ids| {
            let y = tape.conv2d(ids[0], ids[1], 1, 0)?;
            let sq = tape.mul(y, y)?;
            tape.sum(sq)
        });
    }
}

#[test]
fn batchnorm_train_gradients() {
    for t in 0..TRIALS {
        let x = rand_param("x", &[3, 2, 2, 2], derive_u64(300, t), -2.0, 2.0);
        let gamma = rand_param("gamma", &[2], derive_u64(301, t), 0.5, 1.5);
        let beta = rand_param("beta", &[2], derive_u64(302, t), -0.5, 0.5);
        // Project against a fixed random tensor: a plain sum of squares is
        // nearly invariant to x through train-mode normalization (the
        // normalized square sum is a constant), which leaves only an
        // O(eps)-sized gradient and an ill-conditioned comparison.
        let probe =
            Tensor::create(&[3, 2, 2, 2], Init::Uniform { lo: -1.0, hi: 1.0, seed: derive_u64(303, t) }).unwrap();
        check(t, &[x, gamma, beta], |tape, ids| {
            // Fresh stats per evaluation: the update is a side effect that
            // must not leak between finite-difference probes.
            let mut stats = RunningStats::new(2);
            let y = tape.batchnorm2d(ids[0], ids[1], ids[2], &mut stats, Phase::Train, 0.1, 1e-5)?;
            let pid = tape.constant(probe.clone());
            let proj = tape.mul(y, pid)?;
            let lin = tape.sum(proj)?;
            let sq = tape.mul(proj, proj)?;
            let quad = tape.sum(sq)?;
            tape.add(lin, quad)
        });
    }
}

#[test]
fn batchnorm_eval_gradients() {
    for t in 0..TRIALS {
        let x = rand_param("x", &[2, 3, 2, 2], derive_u64(310, t), -2.0, 2.0);
        let gamma = rand_param("gamma", &[3], derive_u64(311, t), 0.5, 1.5);
        let beta = rand_param("beta", &[3], derive_u64(312, t), -0.5, 0.5);
        let mut stats_rng = Rng::new(derive_u64(313, t));
        let frozen = RunningStats {
            mean: (0..3).map(|_| stats_rng.uniform(-0.5, 0.5)).collect(),
            var: (0..3).map(|_| stats_rng.uniform(0.5, 2.0)).collect(),
        };
        check(t, &[x, gamma, beta], |tape, ids| {
            let mut stats = frozen.clone();
            let y = tape.batchnorm2d(ids[0], ids[1], ids[2], &mut stats, Phase::Eval, 0.1, 1e-5)?;
            let sq = tape.mul(y, y)?;
            tape.sum(sq)
        });
    }
}

#[test]
fn relu_gradients_off_kink() {
    for t in 0..TRIALS {
        let x = rand_param_off_zero("x", &[4, 5], derive_u64(400, t));
        check(t, &[x], |tape, ids| {
            let y = tape.relu(ids[0])?;
            let sq = tape.mul(y, y)?;
            tape.sum(sq)
        });
    }
}

#[test]
fn add_mul_scale_gradients() {
    for t in 0..TRIALS {
        let a = rand_param("a", &[3, 4], derive_u64(500, t), -1.0, 1.0);
        let b = rand_param("b", &[3, 4], derive_u64(501, t), -1.0, 1.0);
        check(t, &[a, b], |tape, ids| {
            let s = tape.add(ids[0], ids[1])?;
            let p = tape.mul(s, ids[0])?;
            let sc = tape.scale(p, -1.7)?;
            tape.sum(sc)
        });
    }
}

#[test]
fn upsample_gradients() {
    for t in 0..TRIALS {
        let x = rand_param("x", &[2, 2, 3, 2], derive_u64(600, t), -1.0, 1.0);
        check(t, &[x], |tape, ids| {
            let y = tape.upsample2x(ids[0])?;
            let sq = tape.mul(y, y)?;
            tape.sum(sq)
        });
    }
}

#[test]
fn global_avg_pool_gradients() {
    for t in 0..TRIALS {
        let x = rand_param("x", &[2, 3, 2, 4], derive_u64(700, t), -1.0, 1.0);
        check(t, &[x], |tape, ids| {
            let y = tape.global_avg_pool(ids[0])?;
            let sq = tape.mul(y, y)?;
            tape.sum(sq)
        });
    }
}

#[test]
fn row_normalize_gradients() {
    for t in 0..TRIALS {
        // Rows well away from the zero-norm clamp.
        let x = rand_param_off_zero("x", &[4, 3], derive_u64(800, t));
        check(t, &[x], |tape, ids| {
            let y = tape.row_l2_normalize(ids[0])?;
            let w = rand_weight_tensor(3, t);
            let wid = tape.constant(w);
            // Project onto a fixed direction so the loss sees row interactions.
            let sim = tape.matmul_nt(y, wid)?;
            let sq = tape.mul(sim, sim)?;
            tape.sum(sq)
        });
    }
}

fn rand_weight_tensor(d: usize, t: u64) -> Tensor {
    Tensor::create(&[2, d], Init::Uniform { lo: -1.0, hi: 1.0, seed: derive_u64(801, t) }).unwrap()
}

#[test]
fn matmul_nt_gradients_including_self_similarity() {
    for t in 0..TRIALS {
        let a = rand_param("a", &[3, 4], derive_u64(900, t), -1.0, 1.0);
        let b = rand_param("b", &[2, 4], derive_u64(901, t), -1.0, 1.0);
        check(t, &[a, b], |tape, ids| {
            let s = tape.matmul_nt(ids[0], ids[1])?;
            let sq = tape.mul(s, s)?;
            tape.sum(sq)
        });
        // a @ a^T: both adjoint paths land on the same accumulator.
        let a2 = rand_param("a2", &[3, 4], derive_u64(902, t), -1.0, 1.0);
        check(t, &[a2], |tape, ids| {
            let s = tape.matmul_nt(ids[0], ids[0])?;
            let sq = tape.mul(s, s)?;
            tape.sum(sq)
        });
    }
}

#[test]
fn concat_rows_gradients() {
    for t in 0..TRIALS {
        let a = rand_param("a", &[2, 3], derive_u64(1000, t), -1.0, 1.0);
        let b = rand_param("b", &[3, 3], derive_u64(1001, t), -1.0, 1.0);
        check(t, &[a, b], |tape, ids| {
            let z = tape.concat_rows(ids[0], ids[1])?;
            let s = tape.matmul_nt(z, z)?;
            let sq = tape.mul(s, s)?;
            tape.sum(sq)
        });
    }
}

#[test]
fn info_nce_gradients_with_exclusion() {
    for t in 0..TRIALS {
        let s = rand_param("s", &[4, 4], derive_u64(1100, t), -2.0, 2.0);
        let positives = vec![2, 3, 0, 1];
        check(t, &[s], |tape, ids| tape.info_nce_sum(ids[0], positives.clone(), true));
    }
}

#[test]
fn info_nce_gradients_without_exclusion() {
    for t in 0..TRIALS {
        let s = rand_param("s", &[3, 5], derive_u64(1200, t), -2.0, 2.0);
        let positives = vec![4, 0, 2];
        check(t, &[s], |tape, ids| tape.info_nce_sum(ids[0], positives.clone(), false));
    }
}

#[test]
fn soft_ce_gradients_with_soft_targets_and_weights() {
    for t in 0..TRIALS {
        let s = rand_param("s", &[3, 4], derive_u64(1300, t), -2.0, 2.0);
        // Soft targets that do not sum to 1, plus a zero row weight: the
        // adjoint must honor both.
        let targets = Tensor::create(&[3, 4], Init::Uniform { lo: 0.0, hi: 0.6, seed: derive_u64(1301, t) }).unwrap();
        let weights = vec![0.5, 0.0, 1.25];
        check(t, &[s], |tape, ids| tape.soft_ce_sum(ids[0], &targets, weights.clone()));
    }
}

#[test]
fn deep_composition_gradients() {
    // A little network: conv -> bn -> relu -> pool -> linear -> soft ce.
    // Exercises accumulation across op kinds in one graph.
    for t in 0..5 {
        let x = rand_param("x", &[2, 1, 4, 4], derive_u64(1400, t), -1.0, 1.0);
        let k = rand_param("k", &[2, 1, 3, 3], derive_u64(1401, t), -0.6, 0.6);
        let gamma = rand_param("gamma", &[2], derive_u64(1402, t), 0.5, 1.5);
        let beta = rand_param("beta", &[2], derive_u64(1403, t), -0.5, 0.5);
        let w = rand_param("w", &[2, 3], derive_u64(1404, t), -1.0, 1.0);
        let b = rand_param("b", &[3], derive_u64(1405, t), -0.5, 0.5);
        let targets = Tensor::create(&[2, 3], Init::Uniform { lo: 0.0, hi: 1.0, seed: derive_u64(1406, t) }).unwrap();
        let err = grad_check(
            |tape, ids| {
                let mut stats = RunningStats::new(2);
                let c = tape.conv2d(ids[0], ids[1], 1, 1)?;
                let n = tape.batchnorm2d(c, ids[2], ids[3], &mut stats, Phase::Train, 0.1, 1e-5)?;
                let r = tape.relu(n)?;
                let p = tape.global_avg_pool(r)?;
                let logits = tape.linear(p, ids[4], ids[5])?;
                tape.soft_ce_sum(logits, &targets, vec![0.5, 0.5])
            },
            &[x, k, gamma, beta, w, b],
            EPS,
        )
        .unwrap();
        // ReLU kinks can sit near batch-normalized zeros; allow a slightly
        // looser bound than the per-op checks while still catching any wrong
        // adjoint outright.
        assert!(err <= 1e-4, "trial {t}: composite err {err}");
    }
}
