//! Brute-force reference implementations of the objectives, written as plain
//! double loops over `f64` slices. This crate deliberately shares no code
//! with the training library: no tape, no max-shifted logsumexp, no row
//! stacking tricks. Tests compare the fast paths against these within tight
//! tolerances.
//!
//! The naive `exp` sums here are only valid for moderate logits; callers
//! keep inputs in ordinary ranges.

/// Cosine similarity, undefined (NaN) for zero vectors by design: reference
/// inputs are kept away from zero.
pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na: f64 = a.iter().map(|v| v * v).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|v| v * v).sum::<f64>().sqrt();
    dot / (na * nb)
}

/// One InfoNCE term: anchor scored against every candidate except those in
/// `skip`, positive at `positive`.
fn nce_term(anchor: &[f64], candidates: &[Vec<f64>], positive: usize, skip: Option<usize>, tau: f64) -> f64 {
    let mut denom = 0.0;
    let mut pos = 0.0;
    for (k, cand) in candidates.iter().enumerate() {
        if Some(k) == skip {
            continue;
        }
        let e = (cosine(anchor, cand) / tau).exp();
        denom += e;
        if k == positive {
            pos = e;
        }
    }
    -(pos / denom).ln()
}

/// Symmetric peer-level loss for two views of one level: candidates are the
/// 2N stacked rows, each anchor excluded from its own denominator, averaged
/// over all 2N anchors.
pub fn peer_level(a: &[Vec<f64>], b: &[Vec<f64>], tau: f64) -> f64 {
    assert_eq!(a.len(), b.len());
    let n = a.len();
    let rows: Vec<Vec<f64>> = a.iter().chain(b).cloned().collect();
    let mut total = 0.0;
    for i in 0..2 * n {
        let positive = (i + n) % (2 * n);
        total += nce_term(&rows[i], &rows, positive, Some(i), tau);
    }
    total / (2.0 * n as f64)
}

/// Symmetric cross-level loss between the global level and one finer level:
/// every global row scored against all 2N rows of the finer level and vice
/// versa, positives at the swapped view of the same video, nothing excluded.
pub fn cross_level(ga: &[Vec<f64>], gb: &[Vec<f64>], la: &[Vec<f64>], lb: &[Vec<f64>], tau: f64) -> f64 {
    let n = ga.len();
    assert!(gb.len() == n && la.len() == n && lb.len() == n);
    let g: Vec<Vec<f64>> = ga.iter().chain(gb).cloned().collect();
    let l: Vec<Vec<f64>> = la.iter().chain(lb).cloned().collect();
    let mut total = 0.0;
    for i in 0..2 * n {
        let positive = (i + n) % (2 * n);
        total += nce_term(&g[i], &l, positive, None, tau);
        total += nce_term(&l[i], &g, positive, None, tau);
    }
    total / (2.0 * n as f64)
}

/// Softened label row: true entry scaled by (1 - alpha), then
/// alpha / (denominator - 1) added to every entry, no renormalization.
pub fn soften(one_hot: &[f64], alpha: f64, denominator: usize) -> Vec<f64> {
    let spread = alpha / (denominator as f64 - 1.0);
    one_hot.iter().map(|&y| (1.0 - alpha) * y + spread).collect()
}

/// Cross-entropy of one logit row against a soft target row.
pub fn soft_ce(logits: &[f64], target: &[f64]) -> f64 {
    let z: f64 = logits.iter().map(|v| v.exp()).sum();
    logits
        .iter()
        .zip(target)
        .map(|(&o, &t)| -t * (o.exp() / z).ln())
        .sum()
}

/// Two-view weighted soft cross-entropy:
/// `sum_i w_i * [CE(o1_i, t_i) + CE(o2_i, t_i)]`.
pub fn softened_pair_ce(o1: &[Vec<f64>], o2: &[Vec<f64>], targets: &[Vec<f64>], weights: &[f64]) -> f64 {
    let mut total = 0.0;
    for i in 0..targets.len() {
        total += weights[i] * (soft_ce(&o1[i], &targets[i]) + soft_ce(&o2[i], &targets[i]));
    }
    total
}

/// Contrastive mix: `lambda * sum(peer) + (1 - lambda) * sum(cross)`.
pub fn overall_contrastive(peer: &[f64], cross: &[f64], lambda: f64) -> f64 {
    lambda * peer.iter().sum::<f64>() + (1.0 - lambda) * cross.iter().sum::<f64>()
}

/// Total objective: contrastive plus beta times softened classification.
pub fn total(l_con: f64, l_soften: f64, beta: f64) -> f64 {
    l_con + beta * l_soften
}

/// Ridge-regularized least-squares probe on frozen features, solved by
/// normal equations with Gaussian elimination. Returns per-class weight rows
/// (including a bias column appended to the features). Used as an
/// independent check that features carry label information.
pub fn ridge_probe(features: &[Vec<f64>], class_ids: &[usize], num_classes: usize, ridge: f64) -> Vec<Vec<f64>> {
    let n = features.len();
    assert_eq!(class_ids.len(), n);
    let d = features[0].len() + 1;
    // Design matrix with bias column.
    let x: Vec<Vec<f64>> = features
        .iter()
        .map(|f| {
            let mut row = f.clone();
            row.push(1.0);
            row
        })
        .collect();
    // A = X^T X + ridge * I, one shared factorization for all classes.
    let mut a = vec![vec![0.0; d]; d];
    for row in &x {
        for i in 0..d {
            for j in 0..d {
                a[i][j] += row[i] * row[j];
            }
        }
    }
    for i in 0..d {
        a[i][i] += ridge;
    }
    // B = X^T Y for one-hot Y, one column per class.
    let mut b = vec![vec![0.0; num_classes]; d];
    for (row, &c) in x.iter().zip(class_ids) {
        assert!(c < num_classes);
        for i in 0..d {
            b[i][c] += row[i];
        }
    }
    // Gaussian elimination with partial pivoting on [A | B].
    let mut aug: Vec<Vec<f64>> = a
        .into_iter()
        .zip(b)
        .map(|(ar, br)| ar.into_iter().chain(br).collect())
        .collect();
    let cols = d + num_classes;
    for col in 0..d {
        let pivot = (col..d)
            .max_by(|&i, &j| aug[i][col].abs().partial_cmp(&aug[j][col].abs()).unwrap())
            .unwrap();
        aug.swap(col, pivot);
        let p = aug[col][col];
        assert!(p.abs() > 1e-12, "singular normal equations");
        for j in col..cols {
            aug[col][j] /= p;
        }
        for i in 0..d {
            if i != col && aug[i][col] != 0.0 {
                let f = aug[i][col];
                for j in col..cols {
                    aug[i][j] -= f * aug[col][j];
                }
            }
        }
    }
    (0..num_classes)
        .map(|c| (0..d).map(|i| aug[i][d + c]).collect())
        .collect()
}

/// Accuracy of the ridge probe on held-out features.
pub fn probe_accuracy(weights: &[Vec<f64>], features: &[Vec<f64>], class_ids: &[usize]) -> f64 {
    let mut hits = 0usize;
    for (f, &c) in features.iter().zip(class_ids) {
        let mut row = f.clone();
        row.push(1.0);
        let best = weights
            .iter()
            .enumerate()
            .map(|(k, w)| (k, w.iter().zip(&row).map(|(a, b)| a * b).sum::<f64>()))
            .max_by(|a, b| a.1.partial_cmp(&b.1).unwrap())
            .unwrap()
            .0;
        if best == c {
            hits += 1;
        }
    }
    hits as f64 / features.len() as f64
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_pair_peer_loss_is_zero() {
        let a = vec![vec![1.0, 0.0]];
        let b = vec![vec![0.0, 1.0]];
        assert!(peer_level(&a, &b, 0.5).abs() < 1e-15);
    }

    #[test]
    fn identical_rows_give_log_of_candidate_count() {
        let a = vec![vec![1.0, 0.0], vec![2.0, 0.0]];
        let b = vec![vec![3.0, 0.0], vec![0.5, 0.0]];
        let v = peer_level(&a, &b, 0.5);
        assert!((v - 3.0f64.ln()).abs() < 1e-12);
        // Both directions contribute ln(2N) per anchor, so collapsing the
        // two levels onto the same rows gives exactly 2 ln(2N).
        let v = cross_level(&a, &b, &a, &b, 0.5);
        assert!((v - 2.0 * 4.0f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn soft_ce_uniform_logits() {
        let v = soft_ce(&[0.3, 0.3, 0.3], &soften(&[1.0, 0.0, 0.0], 0.0, 32));
        assert!((v - 3.0f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn ridge_probe_separates_trivial_clusters() {
        let features: Vec<Vec<f64>> = (0..20)
            .map(|i| {
                let c = (i % 2) as f64;
                vec![2.0 * c - 1.0 + 0.01 * i as f64, 0.5 - c]
            })
            .collect();
        let labels: Vec<usize> = (0..20).map(|i| i % 2).collect();
        let w = ridge_probe(&features, &labels, 2, 1e-6);
        assert_eq!(probe_accuracy(&w, &features, &labels), 1.0);
    }
}
