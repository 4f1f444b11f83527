//! Batch-hard triplet loss on PK-structured batches plus label-smoothed
//! cross entropy.
//!
//! These run on tape tensors so gradients flow back into the branches. The
//! hardest positive/negative per anchor is picked from the forward values;
//! the selection indices then enter the graph through a gather, which is the
//! usual subgradient treatment of the max/min.

use crate::error::{Error, Result};
use crate::ops;
use crate::tape::Tape;
use crate::tensor::Tensor;

/// Margin and smoothing defaults; the cited formulations leave both open.
#[derive(Clone, Copy, Debug)]
pub struct LossConfig {
    pub margin: f64,
    pub smoothing: f64,
    pub num_classes: usize,
}

impl LossConfig {
    pub fn new(margin: f64, smoothing: f64, num_classes: usize) -> Result<Self> {
        if margin < 0.0 {
            return Err(Error::ConfigInvalid(format!("margin must be >= 0, got {margin}")));
        }
        if !(0.0..1.0).contains(&smoothing) {
            return Err(Error::ConfigInvalid(format!(
                "smoothing must lie in [0,1), got {smoothing}"
            )));
        }
        Ok(LossConfig { margin, smoothing, num_classes })
    }
}

/// Symmetric `[N,N]` Euclidean distance matrix over embedding rows, zero
/// diagonal, each unordered pair evaluated once.
pub fn pairwise_euclidean(tape: &Tape, emb: &Tensor) -> Result<Tensor> {
    if emb.rank() != 2 {
        return Err(Error::ShapeMismatch(format!(
            "pairwise_euclidean wants [N,C], got {:?}",
            emb.shape()
        )));
    }
    let (n, c) = (emb.shape()[0], emb.shape()[1]);
    if n < 2 {
        return Err(Error::BatchTooSmall(format!(
            "pairwise distances need N >= 2, got {n}"
        )));
    }
    let rows: Vec<Tensor> = (0..n)
        .map(|i| ops::slice(tape, emb, i * c, c))
        .collect::<Result<_>>()?;
    let mut pair = vec![vec![None; n]; n];
    for i in 0..n {
        for j in (i + 1)..n {
            let d = ops::euclidean_distance(tape, &rows[i], &rows[j])?;
            pair[i][j] = Some(d);
        }
    }
    assemble_square(tape, n, |i, j| {
        if i < j {
            pair[i][j].clone()
        } else {
            pair[j][i].clone()
        }
    })
}

/// Build an `[N,N]` tensor from per-cell scalar tensors (`None` = constant
/// zero). Reusing one scalar for (i,j) and (j,i) keeps the matrix bit-exactly
/// symmetric and routes both cells' gradients to the single evaluation.
pub(crate) fn assemble_square<F>(tape: &Tape, n: usize, cell: F) -> Result<Tensor>
where
    F: Fn(usize, usize) -> Option<Tensor>,
{
    let zero = Tensor::scalar(0.0);
    let mut cells = Vec::with_capacity(n * n);
    for i in 0..n {
        for j in 0..n {
            cells.push(cell(i, j).unwrap_or_else(|| zero.clone()));
        }
    }
    let refs: Vec<&Tensor> = cells.iter().collect();
    let flat = ops::concat(tape, &refs)?;
    ops::reshape(tape, &flat, &[n, n])
}

/// Batch-hard mining: mean over anchors of
/// `max(0, margin + max_pos_dist - min_neg_dist)`. The anchor itself is
/// excluded from its positives. Ties pick the lowest index.
pub fn hard_triplet_loss(
    tape: &Tape,
    distmat: &Tensor,
    labels: &[usize],
    margin: f64,
) -> Result<Tensor> {
    let n = labels.len();
    if distmat.rank() != 2 || distmat.shape() != [n, n] {
        return Err(Error::ShapeMismatch(format!(
            "distance matrix {:?} vs {n} labels",
            distmat.shape()
        )));
    }
    let d = distmat.data();
    let mut pos_idx = Vec::with_capacity(n);
    let mut neg_idx = Vec::with_capacity(n);
    for a in 0..n {
        let mut hardest_pos: Option<(usize, f64)> = None;
        let mut hardest_neg: Option<(usize, f64)> = None;
        for j in 0..n {
            if j == a {
                continue;
            }
            let dist = d[a * n + j];
            if labels[j] == labels[a] {
                if hardest_pos.map_or(true, |(_, best)| dist > best) {
                    hardest_pos = Some((j, dist));
                }
            } else if hardest_neg.map_or(true, |(_, best)| dist < best) {
                hardest_neg = Some((j, dist));
            }
        }
        let (p, _) = hardest_pos.ok_or(Error::NoPositive(a))?;
        let (ng, _) = hardest_neg.ok_or(Error::NoNegative(a))?;
        pos_idx.push(a * n + p);
        neg_idx.push(a * n + ng);
    }
    let pos = ops::gather(tape, distmat, &pos_idx)?;
    let neg = ops::gather(tape, distmat, &neg_idx)?;
    let violation = ops::add_scalar(tape, &ops::sub(tape, &pos, &neg)?, margin);
    Ok(ops::mean(tape, &ops::relu(tape, &violation)))
}

/// Cross entropy against the smoothed target `(1 - eps)` on the true class
/// plus `eps / C` on every class, via stable log-softmax, averaged over the
/// batch.
pub fn label_smooth_ce(
    tape: &Tape,
    logits: &Tensor,
    labels: &[usize],
    eps: f64,
) -> Result<Tensor> {
    if logits.rank() != 2 || logits.shape()[0] != labels.len() {
        return Err(Error::ShapeMismatch(format!(
            "logits {:?} vs {} labels",
            logits.shape(),
            labels.len()
        )));
    }
    let (n, c) = (logits.shape()[0], logits.shape()[1]);
    if let Some(&bad) = labels.iter().find(|&&l| l >= c) {
        return Err(Error::LabelOutOfRange { label: bad, classes: c });
    }
    let mut target = vec![eps / c as f64; n * c];
    for (row, &label) in labels.iter().enumerate() {
        target[row * c + label] += 1.0 - eps;
    }
    let target = Tensor::from_vec(&[n, c], target)?;
    let ls = ops::log_softmax(tape, logits)?;
    let weighted = ops::mul(tape, &ls, &target)?;
    Ok(ops::scale(tape, &ops::sum(tape, &weighted), -1.0 / n as f64))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn pairwise_identical_rows_give_zero_matrix() {
        let tape = Tape::new();
        let emb = Tensor::from_vec(&[3, 2], vec![1.0, 2.0, 1.0, 2.0, 1.0, 2.0]).unwrap();
        let d = pairwise_euclidean(&tape, &emb).unwrap();
        assert!(d.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn pairwise_small_case() {
        let tape = Tape::new();
        let emb = Tensor::from_vec(&[2, 2], vec![0.0, 0.0, 3.0, 4.0]).unwrap();
        let d = pairwise_euclidean(&tape, &emb).unwrap();
        assert_eq!(d.data(), &[0.0, 5.0, 5.0, 0.0]);
    }

    #[test]
    fn pairwise_matches_per_pair_oracle_and_is_symmetric() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let tape = Tape::new();
        let emb = Tensor::rand_uniform(&mut rng, &[5, 4], -1.0, 1.0);
        let d = pairwise_euclidean(&tape, &emb).unwrap();
        for i in 0..5 {
            for j in 0..5 {
                let oracle: f64 = (0..4)
                    .map(|k| (emb.data()[i * 4 + k] - emb.data()[j * 4 + k]).powi(2))
                    .sum::<f64>()
                    .sqrt();
                assert!((d.data()[i * 5 + j] - oracle).abs() < 1e-12);
                // bit-exact symmetry: single evaluation per unordered pair
                assert_eq!(d.data()[i * 5 + j], d.data()[j * 5 + i]);
            }
        }
    }

    #[test]
    fn pairwise_rejects_single_row() {
        let tape = Tape::new();
        let emb = Tensor::zeros(&[1, 3]);
        assert!(matches!(
            pairwise_euclidean(&tape, &emb),
            Err(Error::BatchTooSmall(_))
        ));
    }

    #[test]
    fn triplet_satisfied_batch_has_zero_loss() {
        let tape = Tape::new();
        // same-id distances 0, cross-id distances 1.0 >> margin
        let d = Tensor::from_vec(
            &[4, 4],
            vec![
                0.0, 0.0, 1.0, 1.0, //
                0.0, 0.0, 1.0, 1.0, //
                1.0, 1.0, 0.0, 0.0, //
                1.0, 1.0, 0.0, 0.0,
            ],
        )
        .unwrap();
        let loss = hard_triplet_loss(&tape, &d, &[0, 0, 1, 1], 0.3).unwrap();
        assert_eq!(loss.value(), 0.0);
    }

    #[test]
    fn triplet_hand_case_matches_enumeration() {
        let tape = Tape::new();
        // anchor 0: hardest positive 2.0 (to 1), hardest negative 1.5 (to 2)
        let d = Tensor::from_vec(
            &[4, 4],
            vec![
                0.0, 2.0, 1.5, 3.0, //
                2.0, 0.0, 2.5, 2.6, //
                1.5, 2.5, 0.0, 1.0, //
                3.0, 2.6, 1.0, 0.0,
            ],
        )
        .unwrap();
        let labels = [0usize, 0, 1, 1];
        let margin = 0.3;
        let loss = hard_triplet_loss(&tape, &d, &labels, margin).unwrap();
        // anchor 0 term: 0.3 + 2.0 - 1.5 = 0.8
        let a0 = margin + 2.0 - 1.5;
        assert!((a0 - 0.8).abs() < 1e-12);
        // exhaustive enumeration over all (anchor, pos, neg) triples
        let mut total = 0.0;
        for a in 0..4 {
            let mut worst = f64::NEG_INFINITY;
            for p in 0..4 {
                if p == a || labels[p] != labels[a] {
                    continue;
                }
                for ng in 0..4 {
                    if labels[ng] == labels[a] {
                        continue;
                    }
                    worst = worst.max(margin + d.data()[a * 4 + p] - d.data()[a * 4 + ng]);
                }
            }
            total += worst.max(0.0);
        }
        assert!((loss.value() - total / 4.0).abs() < 1e-12);
    }

    #[test]
    fn triplet_scales_homogeneously_at_zero_margin() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let tape = Tape::new();
        let emb = Tensor::rand_uniform(&mut rng, &[4, 3], -1.0, 1.0);
        let labels = [0usize, 0, 1, 1];
        let d = pairwise_euclidean(&tape, &emb).unwrap();
        let base = hard_triplet_loss(&tape, &d, &labels, 0.0).unwrap().value();
        let scaled_data: Vec<f64> = d.data().iter().map(|v| 3.0 * v).collect();
        let d3 = Tensor::from_vec(&[4, 4], scaled_data).unwrap();
        let scaled = hard_triplet_loss(&tape, &d3, &labels, 0.0).unwrap().value();
        assert!((scaled - 3.0 * base).abs() < 1e-12);
    }

    #[test]
    fn triplet_reports_offending_anchor() {
        let tape = Tape::new();
        let d = Tensor::zeros(&[3, 3]);
        // anchor 2 has no positive
        assert!(matches!(
            hard_triplet_loss(&tape, &d, &[0, 0, 1], 0.3),
            Err(Error::NoNegative(_)) | Err(Error::NoPositive(2))
        ));
        // all same id: anchor 0 has no negative
        assert!(matches!(
            hard_triplet_loss(&tape, &d, &[0, 0, 0], 0.3),
            Err(Error::NoNegative(0))
        ));
    }

    #[test]
    fn ce_extreme_correct_logits_vanishes() {
        let tape = Tape::new();
        let logits = Tensor::from_vec(&[2, 3], vec![50.0, 0.0, 0.0, 0.0, 50.0, 0.0]).unwrap();
        let loss = label_smooth_ce(&tape, &logits, &[0, 1], 0.0).unwrap();
        assert!(loss.value() < 1e-12, "loss {}", loss.value());
    }

    #[test]
    fn ce_uniform_logits_give_ln_c() {
        let tape = Tape::new();
        let logits = Tensor::full(&[2, 5], 0.7);
        for eps in [0.0, 0.1, 0.5] {
            let loss = label_smooth_ce(&tape, &logits, &[4, 2], eps).unwrap();
            assert!((loss.value() - (5.0f64).ln()).abs() < 1e-12);
        }
    }

    #[test]
    fn ce_matches_direct_formula() {
        let tape = Tape::new();
        let logits = Tensor::from_vec(&[1, 3], vec![2.0, 0.0, 0.0]).unwrap();
        let loss = label_smooth_ce(&tape, &logits, &[0], 0.1).unwrap();
        // frozen from the closed-form evaluation of the smoothed target
        assert!((loss.value() - 0.3728780995552179).abs() < 1e-12);
    }

    #[test]
    fn ce_rejects_out_of_range_label() {
        let tape = Tape::new();
        let logits = Tensor::zeros(&[1, 3]);
        assert!(matches!(
            label_smooth_ce(&tape, &logits, &[3], 0.1),
            Err(Error::LabelOutOfRange { label: 3, classes: 3 })
        ));
    }

    // Shift invariance: adding a constant to all logits of a sample leaves
    // the loss unchanged.
    #[test]
    fn ce_is_shift_invariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let tape = Tape::new();
        let logits = Tensor::rand_uniform(&mut rng, &[3, 4], -2.0, 2.0);
        let labels = [1usize, 0, 3];
        let base = label_smooth_ce(&tape, &logits, &labels, 0.1).unwrap().value();
        let shifted_data: Vec<f64> = logits
            .data()
            .iter()
            .enumerate()
            .map(|(i, v)| v + 10.0 * ((i / 4) as f64 + 1.0))
            .collect();
        let shifted = Tensor::from_vec(&[3, 4], shifted_data).unwrap();
        let moved = label_smooth_ce(&tape, &shifted, &labels, 0.1).unwrap().value();
        assert!((base - moved).abs() < 1e-10);
    }

    #[test]
    fn ce_with_zero_eps_matches_plain_cross_entropy() {
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        let tape = Tape::new();
        for _ in 0..20 {
            let logits = Tensor::rand_uniform(&mut rng, &[4, 6], -3.0, 3.0);
            let labels = [2usize, 0, 5, 3];
            let ours = label_smooth_ce(&tape, &logits, &labels, 0.0).unwrap().value();
            // independent plain CE oracle
            let mut oracle = 0.0;
            for (r, &lab) in labels.iter().enumerate() {
                let row = &logits.data()[r * 6..(r + 1) * 6];
                let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let lse = m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
                oracle -= row[lab] - lse;
            }
            oracle /= 4.0;
            assert!((ours - oracle).abs() < 1e-10);
        }
    }

    #[test]
    fn both_losses_pass_gradcheck() {
        use crate::gradcheck::{grad_check, STEP};
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        let emb = Tensor::rand_uniform(&mut rng, &[4, 3], -1.0, 1.0).with_grad();
        let labels = [0usize, 0, 1, 1];
        let report = grad_check(
            |t, e| {
                let d = pairwise_euclidean(t, e)?;
                hard_triplet_loss(t, &d, &labels, 0.3)
            },
            &emb,
            STEP,
        )
        .unwrap();
        assert!(report.max_rel_err < 1e-4, "triplet err {}", report.max_rel_err);

        let logits = Tensor::rand_uniform(&mut rng, &[3, 4], -1.0, 1.0).with_grad();
        let report = grad_check(
            |t, l| label_smooth_ce(t, l, &[0, 3, 1], 0.1),
            &logits,
            STEP,
        )
        .unwrap();
        assert!(report.max_rel_err < 1e-4, "ce err {}", report.max_rel_err);
    }
}
