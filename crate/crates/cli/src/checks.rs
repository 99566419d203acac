//! Runtime gradient verification: every tape primitive, the loss
//! compositions, and the full objective through the model, each held to
//! central finite differences. Produces a line-per-check report.

use hico_core::autodiff::{
    grad_check, grad_check_with_floor, Init, Parameter, Phase, RunningStats, Tape, TapeId, Tensor,
};
use hico_core::encoder::{BackboneConfig, Binding, TinyFpn};
use hico_core::losses;
use hico_core::rng::{derive_u64, Rng};
use hico_core::{Error, Result};

const TRIALS: u64 = 3;
const EPS: f64 = 1e-5;
pub const OP_TOL: f64 = 1e-5;
pub const FULL_TOL: f64 = 1e-4;

#[derive(Debug, Clone)]
pub struct CheckLine {
    pub name: String,
    pub max_rel_err: f64,
    pub tolerance: f64,
}

impl CheckLine {
    pub fn passed(&self) -> bool {
        self.max_rel_err <= self.tolerance
    }
}

pub fn render_report(lines: &[CheckLine]) -> String {
    let width = lines.iter().map(|l| l.name.len()).max().unwrap_or(0);
    let mut s = String::new();
    for l in lines {
        s.push_str(&format!(
            "{:width$}  max rel err {:>9.2e}  (tol {:.0e})  {}\n",
            l.name,
            l.max_rel_err,
            l.tolerance,
            if l.passed() { "PASS" } else { "FAIL" },
        ));
    }
    let failed = lines.iter().filter(|l| !l.passed()).count();
    s.push_str(&format!("{} checks, {} failed\n", lines.len(), failed));
    s
}

/// Error out (exit code 1) when any line failed.
pub fn verdict(lines: &[CheckLine]) -> Result<()> {
    let failed: Vec<&str> = lines.iter().filter(|l| !l.passed()).map(|l| l.name.as_str()).collect();
    if failed.is_empty() {
        Ok(())
    } else {
        Err(Error::NumericalFailure(format!("gradient checks failed: {}", failed.join(", "))))
    }
}

fn rand_param(name: &str, dims: &[usize], seed: u64, lo: f64, hi: f64) -> Result<Parameter> {
    Ok(Parameter::new(name, Tensor::create(dims, Init::Uniform { lo, hi, seed })?))
}

/// Draws clear of zero (|v| in [0.2, 1.5]) so ReLU kinks and row norms
/// stay well conditioned under the finite-difference eps.
fn rand_param_off_zero(name: &str, dims: &[usize], seed: u64) -> Result<Parameter> {
    let mut p = rand_param(name, dims, seed, 0.2, 1.5)?;
    let mut rng = Rng::new(derive_u64(seed, 7));
    for v in p.value.data_mut() {
        if rng.next_f64() < 0.5 {
            *v = -*v;
        }
    }
    Ok(p)
}

fn worst_over_trials<F>(base_seed: u64, f: F) -> Result<f64>
where
    F: Fn(u64) -> Result<f64>,
{
    let mut worst = 0.0f64;
    for t in 0..TRIALS {
        worst = worst.max(f(derive_u64(base_seed, t))?);
    }
    Ok(worst)
}

/// One finite-difference check per tape primitive.
pub fn check_primitives(seed: u64) -> Result<Vec<CheckLine>> {
    let mut lines = Vec::new();
    let mut push = |name: &str, err: f64| {
        lines.push(CheckLine { name: name.into(), max_rel_err: err, tolerance: OP_TOL });
    };

    push(
        "linear",
        worst_over_trials(derive_u64(seed, 1), |s| {
            let x = rand_param("x", &[3, 4], derive_u64(s, 0), -1.0, 1.0)?;
            let w = rand_param("w", &[4, 5], derive_u64(s, 1), -1.0, 1.0)?;
            let b = rand_param("b", &[5], derive_u64(s, 2), -0.5, 0.5)?;
            grad_check(
                |tape, ids| {
                    let y = tape.linear(ids[0], ids[1], ids[2])?;
                    let sq = tape.mul(y, y)?;
                    tape.sum(sq)
                },
                &[x, w, b],
                EPS,
            )
        })?,
    );

    push(
        "conv2d stride 1",
        worst_over_trials(derive_u64(seed, 2), |s| {
            let x = rand_param("x", &[2, 3, 5, 4], derive_u64(s, 0), -1.0, 1.0)?;
            let k = rand_param("k", &[2, 3, 3, 3], derive_u64(s, 1), -0.6, 0.6)?;
            grad_check(
                |tape, ids| {
                    let y = tape.conv2d(ids[0], ids[1], 1, 1)?;
                    let sq = tape.mul(y, y)?;
                    tape.sum(sq)
                },
                &[x, k],
                EPS,
            )
        })?,
    );

    push(
        "conv2d stride 2",
        worst_over_trials(derive_u64(seed, 3), |s| {
            let x = rand_param("x", &[1, 2, 5, 5], derive_u64(s, 0), -1.0, 1.0)?;
            let k = rand_param("k", &[3, 2, 3, 3], derive_u64(s, 1), -0.6, 0.6)?;
            grad_check(
                |tape, ids| {
                    let y = tape.conv2d(ids[0], ids[1], 2, 1)?;
                    let sq = tape.mul(y, y)?;
                    tape.sum(sq)
                },
                &[x, k],
                EPS,
            )
        })?,
    );

    push(
        "conv2d 1x1",
        worst_over_trials(derive_u64(seed, 4), |s| {
            let x = rand_param("x", &[2, 4, 3, 3], derive_u64(s, 0), -1.0, 1.0)?;
            let k = rand_param("k", &[2, 4, 1, 1], derive_u64(s, 1), -0.8, 0.8)?;
            grad_check(
                |tape, ids| {
                    let y = tape.conv2d(ids[0], ids[1], 1, 0)?;
                    let sq = tape.mul(y, y)?;
                    tape.sum(sq)
                },
                &[x, k],
                EPS,
            )
        })?,
    );

    push(
        "batchnorm train",
        worst_over_trials(derive_u64(seed, 5), |s| {
            let x = rand_param("x", &[3, 2, 2, 2], derive_u64(s, 0), -2.0, 2.0)?;
            let gamma = rand_param("gamma", &[2], derive_u64(s, 1), 0.5, 1.5)?;
            let beta = rand_param("beta", &[2], derive_u64(s, 2), -0.5, 0.5)?;
            // Project against a fixed random tensor: a plain square sum is
            // nearly invariant to x through train-mode normalization.
            let probe = Tensor::create(&[3, 2, 2, 2], Init::Uniform { lo: -1.0, hi: 1.0, seed: derive_u64(s, 3) })?;
            grad_check(
                |tape, ids| {
                    let mut stats = RunningStats::new(2);
                    let y = tape.batchnorm2d(ids[0], ids[1], ids[2], &mut stats, Phase::Train, 0.1, 1e-5)?;
                    let pid = tape.constant(probe.clone());
                    let proj = tape.mul(y, pid)?;
                    let lin = tape.sum(proj)?;
                    let sq = tape.mul(proj, proj)?;
                    let quad = tape.sum(sq)?;
                    tape.add(lin, quad)
                },
                &[x, gamma, beta],
                EPS,
            )
        })?,
    );

    push(
        "batchnorm eval",
        worst_over_trials(derive_u64(seed, 6), |s| {
            let x = rand_param("x", &[2, 3, 2, 2], derive_u64(s, 0), -2.0, 2.0)?;
            let gamma = rand_param("gamma", &[3], derive_u64(s, 1), 0.5, 1.5)?;
            let beta = rand_param("beta", &[3], derive_u64(s, 2), -0.5, 0.5)?;
            let mut stats_rng = Rng::new(derive_u64(s, 3));
            let frozen = RunningStats {
                mean: (0..3).map(|_| stats_rng.uniform(-0.5, 0.5)).collect(),
                var: (0..3).map(|_| stats_rng.uniform(0.5, 2.0)).collect(),
            };
            grad_check(
                |tape, ids| {
                    let mut stats = frozen.clone();
                    let y = tape.batchnorm2d(ids[0], ids[1], ids[2], &mut stats, Phase::Eval, 0.1, 1e-5)?;
                    let sq = tape.mul(y, y)?;
                    tape.sum(sq)
                },
                &[x, gamma, beta],
                EPS,
            )
        })?,
    );

    push(
        "relu",
        worst_over_trials(derive_u64(seed, 7), |s| {
            let x = rand_param_off_zero("x", &[3, 2, 2, 2], derive_u64(s, 0))?;
            grad_check(
                |tape, ids| {
                    let y = tape.relu(ids[0])?;
                    let sq = tape.mul(y, y)?;
                    tape.sum(sq)
                },
                &[x],
                EPS,
            )
        })?,
    );

    push(
        "add mul scale",
        worst_over_trials(derive_u64(seed, 8), |s| {
            let a = rand_param("a", &[2, 3], derive_u64(s, 0), -1.0, 1.0)?;
            let b = rand_param("b", &[2, 3], derive_u64(s, 1), -1.0, 1.0)?;
            grad_check(
                |tape, ids| {
                    let sum = tape.add(ids[0], ids[1])?;
                    let prod = tape.mul(sum, ids[0])?;
                    let scaled = tape.scale(prod, 1.7)?;
                    tape.sum(scaled)
                },
                &[a, b],
                EPS,
            )
        })?,
    );

    push(
        "upsample2x",
        worst_over_trials(derive_u64(seed, 9), |s| {
            let x = rand_param("x", &[2, 3, 2, 2], derive_u64(s, 0), -1.0, 1.0)?;
            grad_check(
                |tape, ids| {
                    let y = tape.upsample2x(ids[0])?;
                    let sq = tape.mul(y, y)?;
                    tape.sum(sq)
                },
                &[x],
                EPS,
            )
        })?,
    );

    push(
        "global_avg_pool",
        worst_over_trials(derive_u64(seed, 10), |s| {
            let x = rand_param("x", &[2, 3, 3, 2], derive_u64(s, 0), -1.0, 1.0)?;
            grad_check(
                |tape, ids| {
                    let y = tape.global_avg_pool(ids[0])?;
                    let sq = tape.mul(y, y)?;
                    tape.sum(sq)
                },
                &[x],
                EPS,
            )
        })?,
    );

    push(
        "row_l2_normalize",
        worst_over_trials(derive_u64(seed, 11), |s| {
            let x = rand_param_off_zero("x", &[3, 4], derive_u64(s, 0))?;
            let probe = Tensor::create(&[3, 4], Init::Uniform { lo: -1.0, hi: 1.0, seed: derive_u64(s, 1) })?;
            grad_check(
                |tape, ids| {
                    let y = tape.row_l2_normalize(ids[0])?;
                    let pid = tape.constant(probe.clone());
                    let proj = tape.mul(y, pid)?;
                    tape.sum(proj)
                },
                &[x],
                EPS,
            )
        })?,
    );

    push(
        "matmul_nt",
        worst_over_trials(derive_u64(seed, 12), |s| {
            let a = rand_param("a", &[3, 4], derive_u64(s, 0), -1.0, 1.0)?;
            let b = rand_param("b", &[2, 4], derive_u64(s, 1), -1.0, 1.0)?;
            grad_check(
                |tape, ids| {
                    let y = tape.matmul_nt(ids[0], ids[1])?;
                    let sq = tape.mul(y, y)?;
                    tape.sum(sq)
                },
                &[a, b],
                EPS,
            )
        })?,
    );

    push(
        "concat_rows",
        worst_over_trials(derive_u64(seed, 13), |s| {
            let a = rand_param("a", &[2, 3], derive_u64(s, 0), -1.0, 1.0)?;
            let b = rand_param("b", &[3, 3], derive_u64(s, 1), -1.0, 1.0)?;
            grad_check(
                |tape, ids| {
                    let y = tape.concat_rows(ids[0], ids[1])?;
                    let sq = tape.mul(y, y)?;
                    tape.sum(sq)
                },
                &[a, b],
                EPS,
            )
        })?,
    );

    push(
        "sum",
        worst_over_trials(derive_u64(seed, 14), |s| {
            let x = rand_param("x", &[4, 2], derive_u64(s, 0), -1.0, 1.0)?;
            grad_check(
                |tape, ids| {
                    let sq = tape.mul(ids[0], ids[0])?;
                    tape.sum(sq)
                },
                &[x],
                EPS,
            )
        })?,
    );

    push(
        "info_nce excl",
        worst_over_trials(derive_u64(seed, 15), |s| {
            let sim = rand_param("s", &[4, 4], derive_u64(s, 0), -2.0, 2.0)?;
            grad_check(|tape, ids| tape.info_nce_sum(ids[0], vec![2, 3, 0, 1], true), &[sim], EPS)
        })?,
    );

    push(
        "info_nce no excl",
        worst_over_trials(derive_u64(seed, 16), |s| {
            let sim = rand_param("s", &[3, 5], derive_u64(s, 0), -2.0, 2.0)?;
            grad_check(|tape, ids| tape.info_nce_sum(ids[0], vec![4, 0, 2], false), &[sim], EPS)
        })?,
    );

    push(
        "soft_ce",
        worst_over_trials(derive_u64(seed, 17), |s| {
            let logits = rand_param("s", &[3, 4], derive_u64(s, 0), -2.0, 2.0)?;
            let targets = Tensor::create(&[3, 4], Init::Uniform { lo: 0.0, hi: 0.6, seed: derive_u64(s, 1) })?;
            grad_check(
                |tape, ids| tape.soft_ce_sum(ids[0], &targets, vec![0.5, 0.0, 1.25]),
                &[logits],
                EPS,
            )
        })?,
    );

    Ok(lines)
}

/// Finite-difference checks of the loss compositions on random embeddings
/// and logits.
pub fn check_losses(seed: u64) -> Result<Vec<CheckLine>> {
    let n = 4;
    let d = 6;
    let classes = 3;
    let mut lines = Vec::new();
    let mut push = |name: &str, err: f64| {
        lines.push(CheckLine { name: name.into(), max_rel_err: err, tolerance: OP_TOL });
    };

    push(
        "peer_level_loss",
        worst_over_trials(derive_u64(seed, 21), |s| {
            let a = rand_param_off_zero("a", &[n, d], derive_u64(s, 0))?;
            let b = rand_param_off_zero("b", &[n, d], derive_u64(s, 1))?;
            grad_check(|tape, ids| losses::peer_level_loss(tape, ids[0], ids[1], 0.5), &[a, b], EPS)
        })?,
    );

    push(
        "cross_level_loss",
        worst_over_trials(derive_u64(seed, 22), |s| {
            let ga = rand_param_off_zero("ga", &[n, d], derive_u64(s, 0))?;
            let gb = rand_param_off_zero("gb", &[n, d], derive_u64(s, 1))?;
            let la = rand_param_off_zero("la", &[n, d], derive_u64(s, 2))?;
            let lb = rand_param_off_zero("lb", &[n, d], derive_u64(s, 3))?;
            grad_check(
                |tape, ids| losses::cross_level_loss(tape, ids[0], ids[1], ids[2], ids[3], 0.5),
                &[ga, gb, la, lb],
                EPS,
            )
        })?,
    );

    push(
        "overall_contrastive",
        worst_over_trials(derive_u64(seed, 23), |s| {
            let a = rand_param_off_zero("a", &[n, d], derive_u64(s, 0))?;
            let b = rand_param_off_zero("b", &[n, d], derive_u64(s, 1))?;
            let g1 = rand_param_off_zero("g1", &[n, d], derive_u64(s, 2))?;
            let g2 = rand_param_off_zero("g2", &[n, d], derive_u64(s, 3))?;
            grad_check(
                |tape, ids| {
                    let peer = vec![
                        losses::peer_level_loss(tape, ids[0], ids[1], 0.5)?,
                        losses::peer_level_loss(tape, ids[2], ids[3], 0.5)?,
                    ];
                    let cross = vec![losses::cross_level_loss(tape, ids[2], ids[3], ids[0], ids[1], 0.5)?];
                    losses::overall_contrastive(tape, &peer, &cross, 0.5)
                },
                &[a, b, g1, g2],
                EPS,
            )
        })?,
    );

    push(
        "softened_ce",
        worst_over_trials(derive_u64(seed, 24), |s| {
            let la = rand_param("la", &[n, classes], derive_u64(s, 0), -2.0, 2.0)?;
            let lb = rand_param("lb", &[n, classes], derive_u64(s, 1), -2.0, 2.0)?;
            let targets = losses::soften_labels(&[0, 2, 1, 0], classes, 0.2, 8)?;
            let w = 1.0 / (2.0 * n as f64);
            grad_check(
                |tape, ids| losses::softened_ce(tape, ids[0], ids[1], &targets, &vec![w; n]),
                &[la, lb],
                EPS,
            )
        })?,
    );

    push(
        "total_loss",
        worst_over_trials(derive_u64(seed, 25), |s| {
            let a = rand_param_off_zero("a", &[n, d], derive_u64(s, 0))?;
            let b = rand_param_off_zero("b", &[n, d], derive_u64(s, 1))?;
            let la = rand_param("la", &[n, classes], derive_u64(s, 2), -2.0, 2.0)?;
            let lb = rand_param("lb", &[n, classes], derive_u64(s, 3), -2.0, 2.0)?;
            let targets = losses::soften_labels(&[1, 0, 2, 1], classes, 0.2, 8)?;
            let w = 1.0 / (2.0 * n as f64);
            grad_check(
                |tape, ids| {
                    let peer = vec![losses::peer_level_loss(tape, ids[0], ids[1], 0.5)?];
                    let cross = vec![losses::cross_level_loss(tape, ids[0], ids[1], ids[0], ids[1], 0.5)?];
                    let con = losses::overall_contrastive(tape, &peer, &cross, 0.5)?;
                    let soft = losses::softened_ce(tape, ids[2], ids[3], &targets, &vec![w; n])?;
                    losses::total_loss(tape, con, soft, 0.2)
                },
                &[a, b, la, lb],
                EPS,
            )
        })?,
    );

    Ok(lines)
}

/// The full objective end to end: two views through the model, all five
/// contrastive terms plus the softened classification part, every
/// parameter checked against finite differences. The 1e-4 floor keeps the
/// comparison absolute where deep BatchNorm chains drive true gradients
/// under finite-difference noise.
pub fn check_full(size: usize, channels: usize, seed: u64) -> Result<Vec<CheckLine>> {
    if size < 8 {
        return Err(Error::ConfigError(format!("probe size must be at least 8, got {size}")));
    }
    if channels == 0 {
        return Err(Error::ConfigError("probe channels must be positive".into()));
    }
    let cfg = BackboneConfig {
        in_channels: 1,
        stem_channels: channels,
        stage_channels: [channels; 4],
        fpn_channels: channels,
        embed_dim: channels,
        num_classes: 3,
        input_hw: size,
        stem_downsample: false,
        head_relu: false,
    };
    // Widths below 4 can steer a pre-normalization embedding row toward zero
    // (batch stats over two values mirror the rows exactly), where the
    // normalize curvature outruns central differences and the check reports
    // an honest FAIL. The default probe stays clear of that regime.
    let model = TinyFpn::new(cfg, seed)?;
    let names = model.param_names();
    let params = model.named_parameters();
    let v1 = Tensor::create(&[2, 1, size, size], Init::Uniform { lo: 0.0, hi: 1.0, seed: derive_u64(seed, 81) })?;
    let v2 = Tensor::create(&[2, 1, size, size], Init::Uniform { lo: 0.0, hi: 1.0, seed: derive_u64(seed, 82) })?;
    let targets = losses::soften_labels(&[0, 2], 3, 0.2, 8)?;

    let f = |tape: &mut Tape, ids: &[TapeId]| -> Result<TapeId> {
        let mut m = model.clone();
        let binding = Binding::from_parts(&names, ids)?;
        let (o1, o2) = m.forward_pair(tape, &binding, v1.clone(), v2.clone(), Phase::Train)?;
        let peer: Vec<TapeId> = [
            (o1.embeddings.local, o2.embeddings.local),
            (o1.embeddings.medium, o2.embeddings.medium),
            (o1.embeddings.global_, o2.embeddings.global_),
        ]
        .into_iter()
        .map(|(a, b)| losses::peer_level_loss(tape, a, b, 0.5))
        .collect::<Result<_>>()?;
        let cross: Vec<TapeId> = [
            (o1.embeddings.local, o2.embeddings.local),
            (o1.embeddings.medium, o2.embeddings.medium),
        ]
        .into_iter()
        .map(|(a, b)| losses::cross_level_loss(tape, o1.embeddings.global_, o2.embeddings.global_, a, b, 0.5))
        .collect::<Result<_>>()?;
        let l_con = losses::overall_contrastive(tape, &peer, &cross, 0.5)?;
        let l_soft = losses::softened_ce(tape, o1.logits, o2.logits, &targets, &[0.25, 0.25])?;
        losses::total_loss(tape, l_con, l_soft, 0.2)
    };

    let err = grad_check_with_floor(f, &params, EPS, 1e-4)?;
    Ok(vec![CheckLine { name: "full objective".into(), max_rel_err: err, tolerance: FULL_TOL }])
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn primitive_checks_pass_at_default_seed() {
        let lines = check_primitives(41).unwrap();
        assert_eq!(lines.len(), 17);
        assert!(lines.iter().all(|l| l.passed()), "{}", render_report(&lines));
        assert!(verdict(&lines).is_ok());
    }

    #[test]
    fn loss_checks_pass_at_default_seed() {
        let lines = check_losses(41).unwrap();
        assert_eq!(lines.len(), 5);
        assert!(lines.iter().all(|l| l.passed()), "{}", render_report(&lines));
    }

    #[test]
    fn report_marks_failures() {
        let lines = vec![
            CheckLine { name: "good".into(), max_rel_err: 1e-9, tolerance: 1e-5 },
            CheckLine { name: "bad".into(), max_rel_err: 1e-2, tolerance: 1e-5 },
        ];
        let text = render_report(&lines);
        assert!(text.contains("PASS"));
        assert!(text.contains("FAIL"));
        assert!(text.contains("2 checks, 1 failed"));
        assert!(verdict(&lines).is_err());
    }
}
