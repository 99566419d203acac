//! Contrastive and classification objectives.
//!
//! All losses are recorded on a [`Tape`] so gradients flow back into the
//! encoder. The building blocks:
//!
//! * `peer_level_loss` - symmetric InfoNCE between the two views of one
//!   embedding level. Candidates are the 2N stacked rows of that level with
//!   the anchor excluded from its own denominator.
//! * `cross_level_loss` - symmetric InfoNCE between the global level and a
//!   finer level. Candidates are the 2N rows of the anchor's opposite level;
//!   the anchor is not among them, so nothing is excluded and every
//!   denominator has 2N terms.
//! * `overall_contrastive` - convex mix of peer terms (weight lambda) and
//!   cross terms (weight 1 - lambda).
//! * `soften_labels` / `softened_ce` - one-hot labels spread by alpha over a
//!   configurable denominator, without renormalization, then soft-target
//!   cross-entropy averaged over both views.
//! * `total_loss` - contrastive part plus beta times the softened part.
//!
//! Temperatures, mixing weights and similarity all follow one convention:
//! similarity is cosine, logits are similarity / tau.

use crate::autodiff::{Shape, Tape, TapeId, Tensor};
use crate::{Error, Result};

/// Scalar hyperparameters of the combined objective.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossWeights {
    /// Softmax temperature for every InfoNCE term.
    pub tau: f64,
    /// Peer-level weight in the contrastive mix; cross-level gets 1 - lambda.
    pub lambda: f64,
    /// Label softening mass moved off the true class.
    pub alpha: f64,
    /// Weight of the softened classification loss in the total.
    pub beta: f64,
    /// What the softening formula divides by; see [`SmoothDenominator`].
    pub smooth_denominator: SmoothDenominator,
}

/// Denominator convention for label softening. The historic convention
/// spreads alpha over (batch size - 1); the textbook label-smoothing variant
/// spreads it over (classes - 1).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum SmoothDenominator {
    #[default]
    BatchMinusOne,
    ClassesMinusOne,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            tau: 0.5,
            lambda: 0.5,
            alpha: 0.2,
            beta: 0.2,
            smooth_denominator: SmoothDenominator::BatchMinusOne,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        if !(self.tau > 0.0) {
            return Err(Error::InvalidHyperparameter(format!("tau must be > 0, got {}", self.tau)));
        }
        if !(0.0..=1.0).contains(&self.lambda) {
            return Err(Error::InvalidHyperparameter(format!("lambda must be in [0, 1], got {}", self.lambda)));
        }
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(Error::InvalidHyperparameter(format!("alpha must be in [0, 1], got {}", self.alpha)));
        }
        if !(self.beta >= 0.0 && self.beta.is_finite()) {
            return Err(Error::InvalidHyperparameter(format!("beta must be >= 0, got {}", self.beta)));
        }
        Ok(())
    }
}

// ── value-level similarity and InfoNCE ──────────────────────────────────────

/// Cosine similarity of two vectors, with norms clamped at 1e-12. The flag is
/// true when either vector was at or below the clamp (the value is then a
/// degenerate 0 rather than a direction).
pub fn cosine_similarity(a: &[f64], b: &[f64]) -> Result<(f64, bool)> {
    const EPS: f64 = 1e-12;
    if a.len() != b.len() || a.is_empty() {
        return Err(Error::ShapeMismatch(format!(
            "cosine_similarity: lengths {} vs {}",
            a.len(),
            b.len()
        )));
    }
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|v| v * v).sum::<f64>().sqrt();
    let nb = b.iter().map(|v| v * v).sum::<f64>().sqrt();
    let degenerate = na <= EPS || nb <= EPS;
    Ok((dot / (na.max(EPS) * nb.max(EPS)), degenerate))
}

/// InfoNCE for one anchor drawn from a candidate set: the negative log of
/// `exp(sim(anchor, positive)/tau)` over the sum of `exp(sim(anchor, k)/tau)`
/// for every candidate k other than the anchor itself.
pub fn info_nce(anchor_index: usize, candidates: &Tensor, positive_index: usize, tau: f64) -> Result<f64> {
    if !(tau > 0.0) {
        return Err(Error::InvalidHyperparameter(format!("tau must be > 0, got {tau}")));
    }
    let (k, d) = candidates.shape().as_2d()?;
    if anchor_index >= k || positive_index >= k {
        return Err(Error::ShapeMismatch(format!(
            "info_nce: indices ({anchor_index}, {positive_index}) out of {k} candidates"
        )));
    }
    if anchor_index == positive_index {
        return Err(Error::InvalidHyperparameter(
            "info_nce: anchor and positive must differ".into(),
        ));
    }
    let data = candidates.data();
    let anchor = &data[anchor_index * d..(anchor_index + 1) * d];
    let mut logits = Vec::with_capacity(k - 1);
    let mut positive_logit = 0.0;
    for j in 0..k {
        if j == anchor_index {
            continue;
        }
        let (sim, _) = cosine_similarity(anchor, &data[j * d..(j + 1) * d])?;
        let logit = sim / tau;
        logits.push(logit);
        if j == positive_index {
            positive_logit = logit;
        }
    }
    let mx = logits.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(v));
    let z: f64 = logits.iter().map(|v| (v - mx).exp()).sum();
    Ok(mx + z.ln() - positive_logit)
}

// ── tape-level losses ───────────────────────────────────────────────────────

/// Positive index for a stacked two-view matrix: row i pairs with row
/// (i + n) mod 2n.
fn swap_positives(n: usize) -> Vec<usize> {
    (0..2 * n).map(|i| (i + n) % (2 * n)).collect()
}

fn check_views(tape: &Tape, a: TapeId, b: TapeId) -> Result<(usize, usize)> {
    let (na, d) = tape.value(a).shape().as_2d()?;
    let (nb, db) = tape.value(b).shape().as_2d()?;
    if na != nb || d != db {
        return Err(Error::ShapeMismatch(format!(
            "paired views must match, got {} vs {}",
            tape.value(a).shape(),
            tape.value(b).shape()
        )));
    }
    if na == 0 {
        return Err(Error::EmptyBatch);
    }
    Ok((na, d))
}

/// Stack both views and scale rows to unit norm.
fn stacked_unit_rows(tape: &mut Tape, a: TapeId, b: TapeId) -> Result<TapeId> {
    let z = tape.concat_rows(a, b)?;
    tape.row_l2_normalize(z)
}

/// Symmetric peer-level InfoNCE between two views of one level,
/// `(1/2N) * sum_i [nce(a_i -> b_i) + nce(b_i -> a_i)]`, with candidates the
/// 2N stacked rows and each anchor excluded from its own denominator.
pub fn peer_level_loss(tape: &mut Tape, a: TapeId, b: TapeId, tau: f64) -> Result<TapeId> {
    if !(tau > 0.0) {
        return Err(Error::InvalidHyperparameter(format!("tau must be > 0, got {tau}")));
    }
    let (n, _) = check_views(tape, a, b)?;
    let z = stacked_unit_rows(tape, a, b)?;
    let sims = tape.matmul_nt(z, z)?;
    let logits = tape.scale(sims, 1.0 / tau)?;
    let total = tape.info_nce_sum(logits, swap_positives(n), true)?;
    tape.scale(total, 1.0 / (2.0 * n as f64))
}

/// Symmetric cross-level InfoNCE between the global level and one finer
/// level: both directions of both view pairings, each anchor scored against
/// all 2N rows of the opposite level, averaged by 2N. Nothing is excluded
/// because anchors never sit in the opposite level's candidate set.
pub fn cross_level_loss(
    tape: &mut Tape,
    global_a: TapeId,
    global_b: TapeId,
    level_a: TapeId,
    level_b: TapeId,
    tau: f64,
) -> Result<TapeId> {
    if !(tau > 0.0) {
        return Err(Error::InvalidHyperparameter(format!("tau must be > 0, got {tau}")));
    }
    let (n, dg) = check_views(tape, global_a, global_b)?;
    let (nl, dl) = check_views(tape, level_a, level_b)?;
    if n != nl || dg != dl {
        return Err(Error::ShapeMismatch(format!(
            "cross_level_loss: global is {}x{dg}, level is {nl}x{dl}",
            n
        )));
    }
    let zg = stacked_unit_rows(tape, global_a, global_b)?;
    let zl = stacked_unit_rows(tape, level_a, level_b)?;
    let positives = swap_positives(n);

    let s_gl = tape.matmul_nt(zg, zl)?;
    let s_gl = tape.scale(s_gl, 1.0 / tau)?;
    let nce_gl = tape.info_nce_sum(s_gl, positives.clone(), false)?;

    let s_lg = tape.matmul_nt(zl, zg)?;
    let s_lg = tape.scale(s_lg, 1.0 / tau)?;
    let nce_lg = tape.info_nce_sum(s_lg, positives, false)?;

    let total = tape.add(nce_gl, nce_lg)?;
    tape.scale(total, 1.0 / (2.0 * n as f64))
}

/// Peer weight actually applied by [`overall_contrastive`]: when one side has
/// no enabled terms the other side keeps full weight instead of being scaled
/// by a vacuous lambda. With both sides present this is just lambda.
pub fn effective_lambda(n_peer: usize, n_cross: usize, lambda: f64) -> f64 {
    if n_cross == 0 {
        1.0
    } else if n_peer == 0 {
        0.0
    } else {
        lambda
    }
}

/// Convex combination of peer and cross terms:
/// `lambda * sum(peer) + (1 - lambda) * sum(cross)`.
pub fn overall_contrastive(
    tape: &mut Tape,
    peer_terms: &[TapeId],
    cross_terms: &[TapeId],
    lambda: f64,
) -> Result<TapeId> {
    if !(0.0..=1.0).contains(&lambda) {
        return Err(Error::InvalidHyperparameter(format!("lambda must be in [0, 1], got {lambda}")));
    }
    let lam = effective_lambda(peer_terms.len(), cross_terms.len(), lambda);
    let sum_side = |tape: &mut Tape, terms: &[TapeId]| -> Result<TapeId> {
        match terms {
            [] => tape.scalar_const(0.0),
            [first, rest @ ..] => {
                let mut acc = *first;
                for t in rest {
                    acc = tape.add(acc, *t)?;
                }
                Ok(acc)
            }
        }
    };
    let peer = sum_side(tape, peer_terms)?;
    let cross = sum_side(tape, cross_terms)?;
    let wp = tape.scale(peer, lam)?;
    let wc = tape.scale(cross, 1.0 - lam)?;
    tape.add(wp, wc)
}

// ── label softening and classification ──────────────────────────────────────

/// Soften a one-hot row: scale the hot entry by (1 - alpha) and add
/// `alpha / (denominator - 1)` to every entry. The result deliberately does
/// not sum to one unless the denominator happens to equal the class count.
pub fn soften_label(one_hot: &[f64], alpha: f64, denominator: usize) -> Result<Vec<f64>> {
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::InvalidHyperparameter(format!("alpha must be in [0, 1], got {alpha}")));
    }
    if denominator < 2 {
        return Err(Error::InvalidHyperparameter(format!(
            "softening denominator must be at least 2, got {denominator}"
        )));
    }
    let spread = alpha / (denominator - 1) as f64;
    Ok(one_hot.iter().map(|&y| (1.0 - alpha) * y + spread).collect())
}

/// Soft-target matrix for a batch of class ids.
pub fn soften_labels(class_ids: &[usize], num_classes: usize, alpha: f64, denominator: usize) -> Result<Tensor> {
    if class_ids.is_empty() {
        return Err(Error::EmptyBatch);
    }
    if num_classes < 1 {
        return Err(Error::ConfigError("num_classes must be positive".into()));
    }
    let mut rows = Vec::with_capacity(class_ids.len() * num_classes);
    for &c in class_ids {
        if c >= num_classes {
            return Err(Error::ShapeMismatch(format!("class id {c} out of {num_classes} classes")));
        }
        let mut one_hot = vec![0.0; num_classes];
        one_hot[c] = 1.0;
        rows.extend(soften_label(&one_hot, alpha, denominator)?);
    }
    Tensor::from_vec(Shape::new(&[class_ids.len(), num_classes])?, rows)
}

/// Soft-target cross-entropy over both views:
/// `sum_i w_i * [CE(logits_a[i], t_i) + CE(logits_b[i], t_i)]`.
/// With every weight 1/(2N) this is the plain two-view average; masking rows
/// to 0 and the rest to 1/(2 * labeled) restricts it to a labeled subset.
pub fn softened_ce(
    tape: &mut Tape,
    logits_a: TapeId,
    logits_b: TapeId,
    targets: &Tensor,
    row_weights: &[f64],
) -> Result<TapeId> {
    let sa = tape.value(logits_a).shape().clone();
    let sb = tape.value(logits_b).shape().clone();
    if sa != sb {
        return Err(Error::ShapeMismatch(format!("softened_ce: logits {sa} vs {sb}")));
    }
    let la = tape.soft_ce_sum(logits_a, targets, row_weights.to_vec())?;
    let lb = tape.soft_ce_sum(logits_b, targets, row_weights.to_vec())?;
    tape.add(la, lb)
}

/// Total objective: contrastive part plus beta times the softened
/// classification part.
pub fn total_loss(tape: &mut Tape, l_con: TapeId, l_soften: TapeId, beta: f64) -> Result<TapeId> {
    if !(beta >= 0.0 && beta.is_finite()) {
        return Err(Error::InvalidHyperparameter(format!("beta must be >= 0, got {beta}")));
    }
    let weighted = tape.scale(l_soften, beta)?;
    tape.add(l_con, weighted)
}

// ── value-level batch container ─────────────────────────────────────────────

/// Stacked two-view embeddings of one batch at all three levels: rows 0..N
/// are view one, rows N..2N are view two, row i and row i+N come from the
/// same video.
#[derive(Debug, Clone)]
pub struct ContrastiveBatch {
    pub local: Tensor,
    pub medium: Tensor,
    pub global: Tensor,
    pub video_ids: Vec<u32>,
}

impl ContrastiveBatch {
    pub fn validate(&self) -> Result<usize> {
        let (rows, d) = self.local.shape().as_2d()?;
        if rows == 0 || rows % 2 != 0 {
            return Err(Error::ShapeMismatch(format!("stacked views need an even row count, got {rows}")));
        }
        let n = rows / 2;
        for (name, t) in [("medium", &self.medium), ("global", &self.global)] {
            let (r, dd) = t.shape().as_2d()?;
            if r != rows || dd != d {
                return Err(Error::ShapeMismatch(format!(
                    "{name} level is {r}x{dd}, local is {rows}x{d}"
                )));
            }
        }
        if self.video_ids.len() != rows {
            return Err(Error::ShapeMismatch(format!(
                "{} video ids for {rows} rows",
                self.video_ids.len()
            )));
        }
        for i in 0..n {
            if self.video_ids[i] != self.video_ids[i + n] {
                return Err(Error::ShapeMismatch(format!(
                    "row {i} and its paired view come from different videos"
                )));
            }
            for j in (i + 1)..n {
                if self.video_ids[i] == self.video_ids[j] {
                    return Err(Error::ShapeMismatch(format!(
                        "video {} appears twice in one batch",
                        self.video_ids[i]
                    )));
                }
            }
        }
        Ok(n)
    }

    fn half(&self, t: &Tensor, second: bool) -> Result<Tensor> {
        let (rows, d) = t.shape().as_2d()?;
        let n = rows / 2;
        let range = if second { n * d..rows * d } else { 0..n * d };
        Tensor::from_vec(Shape::new(&[n, d])?, t.data()[range].to_vec())
    }

    /// Peer-level loss values (local, medium, global) on a scratch tape.
    pub fn peer_level_losses(&self, tau: f64) -> Result<[f64; 3]> {
        self.validate()?;
        let mut out = [0.0; 3];
        for (slot, level) in [&self.local, &self.medium, &self.global].into_iter().enumerate() {
            let mut tape = Tape::new();
            let a = tape.constant(self.half(level, false)?);
            let b = tape.constant(self.half(level, true)?);
            let id = peer_level_loss(&mut tape, a, b, tau)?;
            out[slot] = tape.value(id).item()?;
        }
        Ok(out)
    }

    /// Cross-level loss values (global-local, global-medium) on a scratch tape.
    pub fn cross_level_losses(&self, tau: f64) -> Result<[f64; 2]> {
        self.validate()?;
        let ga = self.half(&self.global, false)?;
        let gb = self.half(&self.global, true)?;
        let mut out = [0.0; 2];
        for (slot, level) in [&self.local, &self.medium].into_iter().enumerate() {
            let mut tape = Tape::new();
            let g1 = tape.constant(ga.clone());
            let g2 = tape.constant(gb.clone());
            let l1 = tape.constant(self.half(level, false)?);
            let l2 = tape.constant(self.half(level, true)?);
            let id = cross_level_loss(&mut tape, g1, g2, l1, l2, tau)?;
            out[slot] = tape.value(id).item()?;
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Init;

    fn t(dims: &[usize], data: Vec<f64>) -> Tensor {
        Tensor::from_vec(Shape::new(dims).unwrap(), data).unwrap()
    }

    #[test]
    fn cosine_known_value() {
        let (v, deg) = cosine_similarity(&[1.0, 1.0], &[1.0, 0.0]).unwrap();
        assert!((v - std::f64::consts::FRAC_1_SQRT_2).abs() < 1e-15);
        assert!(!deg);
    }

    #[test]
    fn cosine_zero_vector_flags_degenerate() {
        let (v, deg) = cosine_similarity(&[0.0, 0.0], &[1.0, 0.0]).unwrap();
        assert_eq!(v, 0.0);
        assert!(deg);
    }

    #[test]
    fn info_nce_single_pair_is_zero() {
        let c = t(&[2, 2], vec![1.0, 0.0, 0.6, 0.8]);
        let v = info_nce(0, &c, 1, 0.5).unwrap();
        assert!(v.abs() < 1e-15);
    }

    #[test]
    fn info_nce_uniform_similarities_give_log_of_set_size() {
        // Four identical candidates: every pairwise similarity is 1, so the
        // loss is log(2N - 1) = log 3 independent of tau.
        let c = t(&[4, 2], vec![2.0, 0.0, 1.0, 0.0, 3.0, 0.0, 0.5, 0.0]);
        let v = info_nce(0, &c, 2, 0.5).unwrap();
        assert!((v - 3.0f64.ln()).abs() < 1e-12, "v = {v}");
        let v = info_nce(1, &c, 3, 0.17).unwrap();
        assert!((v - 3.0f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn info_nce_hand_computed_axis_pair() {
        // Two orthogonal pairs at tau = 0.5: the anchor sees its positive at
        // similarity 1 and the two others at 0, so the loss is
        // log(1 + 2 exp(-2)).
        let c = t(&[4, 2], vec![1.0, 0.0, 0.0, 1.0, 1.0, 0.0, 0.0, 1.0]);
        let v = info_nce(0, &c, 2, 0.5).unwrap();
        let expect = (1.0 + 2.0 * (-2.0f64).exp()).ln();
        assert!((v - expect).abs() < 1e-12);
        assert!((v - 0.2395447662218846).abs() < 1e-12);
    }

    #[test]
    fn info_nce_decreases_as_positive_alignment_grows() {
        let base = vec![1.0, 0.0, 0.6, 0.8, -1.0, 0.3, 0.2, -0.9];
        let mut prev = f64::INFINITY;
        for align in [0.0, 0.5, 0.9, 0.99] {
            let mut data = base.clone();
            // Move the positive toward the anchor.
            data[2] = (1.0 - align) * 0.6 + align;
            data[3] = (1.0 - align) * 0.8;
            let c = t(&[4, 2], data);
            let v = info_nce(0, &c, 1, 0.5).unwrap();
            assert!(v < prev, "align {align}: {v} !< {prev}");
            prev = v;
        }
    }

    #[test]
    fn info_nce_validates_arguments() {
        let c = t(&[3, 2], vec![1.0, 0.0, 0.0, 1.0, 1.0, 1.0]);
        assert!(matches!(info_nce(0, &c, 0, 0.5), Err(Error::InvalidHyperparameter(_))));
        assert!(matches!(info_nce(0, &c, 1, 0.0), Err(Error::InvalidHyperparameter(_))));
        assert!(matches!(info_nce(0, &c, 1, -0.5), Err(Error::InvalidHyperparameter(_))));
        assert!(matches!(info_nce(5, &c, 1, 0.5), Err(Error::ShapeMismatch(_))));
    }

    #[test]
    fn info_nce_is_nonnegative_on_random_sets() {
        for seed in 0..50 {
            let c = Tensor::create(&[6, 3], Init::Uniform { lo: -1.0, hi: 1.0, seed }).unwrap();
            let v = info_nce(0, &c, 3, 0.5).unwrap();
            assert!(v >= 0.0, "seed {seed}: {v}");
        }
    }

    #[test]
    fn peer_level_loss_is_symmetric_in_views() {
        let a = t(&[3, 4], vec![0.3, -0.1, 0.8, 0.5, -0.9, 0.2, 0.1, 0.4, 0.6, -0.3, -0.2, 0.7]);
        let b = t(&[3, 4], vec![0.1, 0.9, -0.4, 0.2, 0.5, 0.5, -0.6, 0.1, -0.8, 0.3, 0.2, -0.1]);
        let run = |x: &Tensor, y: &Tensor| {
            let mut tape = Tape::new();
            let xa = tape.constant(x.clone());
            let yb = tape.constant(y.clone());
            let id = peer_level_loss(&mut tape, xa, yb, 0.5).unwrap();
            tape.value(id).item().unwrap()
        };
        let fwd = run(&a, &b);
        let rev = run(&b, &a);
        assert!((fwd - rev).abs() < 1e-12, "{fwd} vs {rev}");
    }

    #[test]
    fn peer_level_single_video_is_zero() {
        let mut tape = Tape::new();
        let a = tape.constant(t(&[1, 3], vec![0.2, -0.5, 0.9]));
        let b = tape.constant(t(&[1, 3], vec![0.7, 0.1, -0.3]));
        let id = peer_level_loss(&mut tape, a, b, 0.5).unwrap();
        assert!(tape.value(id).item().unwrap().abs() < 1e-15);
    }

    #[test]
    fn overall_contrastive_arithmetic() {
        // All five terms equal to 1 at lambda 0.5: 0.5 * 3 + 0.5 * 2 = 2.5.
        let mut tape = Tape::new();
        let ones: Vec<TapeId> = (0..5).map(|_| tape.scalar_const(1.0).unwrap()).collect();
        let id = overall_contrastive(&mut tape, &ones[..3], &ones[3..], 0.5).unwrap();
        assert!((tape.value(id).item().unwrap() - 2.5).abs() < 1e-15);
    }

    #[test]
    fn overall_contrastive_degenerate_sides_keep_full_weight() {
        let mut tape = Tape::new();
        let one = tape.scalar_const(1.0).unwrap();
        let peer_only = overall_contrastive(&mut tape, &[one], &[], 0.5).unwrap();
        assert_eq!(tape.value(peer_only).item().unwrap(), 1.0);
        let cross_only = overall_contrastive(&mut tape, &[], &[one], 0.5).unwrap();
        assert_eq!(tape.value(cross_only).item().unwrap(), 1.0);
        assert!(matches!(
            overall_contrastive(&mut tape, &[one], &[one], 1.5),
            Err(Error::InvalidHyperparameter(_))
        ));
    }

    #[test]
    fn total_loss_arithmetic() {
        let mut tape = Tape::new();
        let con = tape.scalar_const(2.5).unwrap();
        let soft = tape.scalar_const(1.0).unwrap();
        let id = total_loss(&mut tape, con, soft, 0.2).unwrap();
        assert!((tape.value(id).item().unwrap() - 2.7).abs() < 1e-15);
        assert!(matches!(
            total_loss(&mut tape, con, soft, -0.1),
            Err(Error::InvalidHyperparameter(_))
        ));
    }

    #[test]
    fn soften_label_known_values() {
        // alpha 0.2 over denominator 32: hot entry 0.8 + 0.2/31, rest 0.2/31.
        let soft = soften_label(&[1.0, 0.0, 0.0], 0.2, 32).unwrap();
        assert!((soft[0] - 0.8064516129032258).abs() < 1e-9);
        assert!((soft[1] - 0.0064516129032258).abs() < 1e-9);
        assert!((soft[2] - soft[1]).abs() < 1e-15);
        let sum: f64 = soft.iter().sum();
        assert!((sum - 0.8193548387096774).abs() < 1e-9);
    }

    #[test]
    fn soften_label_alpha_zero_is_identity() {
        let soft = soften_label(&[0.0, 1.0, 0.0], 0.0, 32).unwrap();
        assert_eq!(soft, vec![0.0, 1.0, 0.0]);
    }

    #[test]
    fn soften_label_keeps_argmax_for_moderate_alpha() {
        for denom in [2usize, 3, 8, 32] {
            let soft = soften_label(&[0.0, 1.0, 0.0], 0.5, denom).unwrap();
            assert!(soft[1] > soft[0] && soft[1] > soft[2], "denom {denom}: {soft:?}");
        }
    }

    #[test]
    fn soften_label_rejects_small_denominator() {
        assert!(matches!(
            soften_label(&[1.0], 0.2, 1),
            Err(Error::InvalidHyperparameter(_))
        ));
        assert!(matches!(
            soften_label(&[1.0], 1.5, 32),
            Err(Error::InvalidHyperparameter(_))
        ));
    }

    #[test]
    fn soften_labels_classes_denominator_recovers_textbook_smoothing() {
        // denominator = classes: spread alpha/(C-1).
        let m = soften_labels(&[0], 3, 0.2, 3).unwrap();
        assert!((m.data()[0] - 0.9).abs() < 1e-12);
        assert!((m.data()[1] - 0.1).abs() < 1e-12);
        assert!((m.data()[2] - 0.1).abs() < 1e-12);
    }

    #[test]
    fn softened_ce_uniform_logits_is_log_c() {
        let mut tape = Tape::new();
        let o = tape.constant(t(&[2, 3], vec![0.1, 0.1, 0.1, -2.0, -2.0, -2.0]));
        let targets = soften_labels(&[0, 2], 3, 0.0, 32).unwrap();
        let id = softened_ce(&mut tape, o, o, &targets, &[0.25, 0.25]).unwrap();
        assert!((tape.value(id).item().unwrap() - 3.0f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn softened_ce_identical_views_average_to_single_view() {
        let mut tape = Tape::new();
        let o = tape.constant(t(&[2, 2], vec![1.0, -0.5, 0.3, 0.8]));
        let targets = soften_labels(&[0, 1], 2, 0.2, 8).unwrap();
        let both = softened_ce(&mut tape, o, o, &targets, &[0.25, 0.25]).unwrap();
        let single = tape.soft_ce_sum(o, &targets, vec![0.5, 0.5]).unwrap();
        let a = tape.value(both).item().unwrap();
        let b = tape.value(single).item().unwrap();
        assert!((a - b).abs() < 1e-15);
    }

    #[test]
    fn batch_validation_catches_mispairings() {
        let level = t(&[4, 2], vec![0.0; 8]);
        let mut batch = ContrastiveBatch {
            local: level.clone(),
            medium: level.clone(),
            global: level.clone(),
            video_ids: vec![1, 2, 1, 2],
        };
        assert_eq!(batch.validate().unwrap(), 2);
        batch.video_ids = vec![1, 2, 2, 1];
        assert!(batch.validate().is_err());
        batch.video_ids = vec![1, 1, 1, 1];
        assert!(batch.validate().is_err());
    }

    #[test]
    fn loss_weights_defaults_and_validation() {
        let w = LossWeights::default();
        assert_eq!((w.tau, w.lambda, w.alpha, w.beta), (0.5, 0.5, 0.2, 0.2));
        w.validate().unwrap();
        let bad = LossWeights { tau: 0.0, ..w };
        assert!(bad.validate().is_err());
    }
}
