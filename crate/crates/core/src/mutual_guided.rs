//! Mutual-guided dynamic branch: pairwise kernel exchange.
//!
//! For a pair (i, j), image i's kernel filters image j's feature and vice
//! versa; the pair distance is the Euclidean distance between the two
//! exchanged projections. The matrix over a batch is exactly symmetric
//! because each unordered pair is evaluated once. The branch trains with
//! batch-hard triplet loss directly on this matrix and carries no ID head.

use rand::Rng;

use crate::error::{Error, Result};
use crate::layers::ParamVisitor;
use crate::losses;
use crate::ops;
use crate::self_guided::{ChannelCompressor, Controller};
use crate::tape::Tape;
use crate::tensor::Tensor;
use crate::Mode;

/// Query x gallery distances outside the autodiff graph (evaluation path).
#[derive(Clone, Debug)]
pub struct DistanceMatrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl DistanceMatrix {
    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::ShapeMismatch(format!(
                "{rows}x{cols} matrix wants {} entries, got {}",
                rows * cols,
                data.len()
            )));
        }
        if let Some(bad) = data.iter().find(|v| !v.is_finite() || **v < 0.0) {
            return Err(Error::ShapeMismatch(format!(
                "distances must be finite and nonnegative, found {bad}"
            )));
        }
        Ok(DistanceMatrix { rows, cols, data })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols + j]
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }
}

/// The ingredients of one exchanged-kernel comparison: each feature is
/// filtered by the *other* image's kernel.
pub struct PairContext<'a> {
    pub f_i: &'a [f64],
    pub f_j: &'a [f64],
    pub k_i: &'a [f64],
    pub k_j: &'a [f64],
    pub dim: usize,
}

/// `|| K_i f_j - K_j f_i ||_2` with plain arithmetic; the tape variant used
/// in training performs the same operations in the same order.
pub fn mutual_pair_distance(ctx: &PairContext<'_>) -> Result<f64> {
    let d = ctx.dim;
    if ctx.f_i.len() != d
        || ctx.f_j.len() != d
        || ctx.k_i.len() != d * d
        || ctx.k_j.len() != d * d
    {
        return Err(Error::ShapeMismatch(format!(
            "pair context extents disagree with dim {d}: f_i {}, f_j {}, k_i {}, k_j {}",
            ctx.f_i.len(),
            ctx.f_j.len(),
            ctx.k_i.len(),
            ctx.k_j.len()
        )));
    }
    let mut acc = 0.0;
    for r in 0..d {
        let mut a = 0.0;
        let mut b = 0.0;
        for c in 0..d {
            a += ctx.k_i[r * d + c] * ctx.f_j[c];
            b += ctx.k_j[r * d + c] * ctx.f_i[c];
        }
        acc += (a - b) * (a - b);
    }
    Ok(acc.sqrt())
}

pub struct MutualBranch {
    pub compressor: ChannelCompressor,
    pub controller: Controller,
}

impl MutualBranch {
    pub fn new<R: Rng>(rng: &mut R, c_o: usize, c_m: usize, squeeze: usize) -> Result<Self> {
        Ok(MutualBranch {
            compressor: ChannelCompressor::new(rng, c_o, c_m)?,
            controller: Controller::new(rng, c_o, squeeze, c_m)?,
        })
    }

    /// Compressed pooled feature f_i, `[B, C_m]`.
    pub fn features(&self, tape: &Tape, featmap: &Tensor, mode: Mode) -> Result<Tensor> {
        let compressed = self.compressor.forward(tape, featmap, mode)?;
        ops::global_avg_pool(tape, &compressed)
    }

    /// One kernel per image from the holistic pooled feature, `[B, C_m, C_m]`.
    pub fn kernels(&self, tape: &Tape, pooled: &Tensor, mode: Mode) -> Result<Tensor> {
        self.controller.forward(tape, pooled, mode)
    }

    pub fn visit(&mut self, v: &mut dyn ParamVisitor) {
        self.compressor.visit("mutual.compressor", v);
        self.controller.visit("mutual.controller", v);
    }
}

/// Differentiable `[N,N]` exchanged-kernel distance matrix from
/// already-computed features and kernels (one controller pass per image,
/// one distance per unordered pair; the diagonal is constant zero).
pub fn mutual_distance_matrix(tape: &Tape, feats: &Tensor, kernels: &Tensor) -> Result<Tensor> {
    if feats.rank() != 2 || kernels.rank() != 3 {
        return Err(Error::ShapeMismatch(format!(
            "wants feats [N,C] and kernels [N,C,C], got {:?} / {:?}",
            feats.shape(),
            kernels.shape()
        )));
    }
    let (n, c) = (feats.shape()[0], feats.shape()[1]);
    if n < 2 {
        return Err(Error::BatchTooSmall(format!(
            "mutual distance matrix needs N >= 2, got {n}"
        )));
    }
    if kernels.shape()[0] != n {
        return Err(Error::KernelCountMismatch {
            kernels: kernels.shape()[0],
            batch: n,
        });
    }
    if kernels.shape()[1] != c || kernels.shape()[2] != c {
        return Err(Error::ShapeMismatch(format!(
            "kernel extent {:?} vs feature width {c}",
            kernels.shape()
        )));
    }

    let f_rows: Vec<Tensor> = (0..n)
        .map(|i| ops::slice(tape, feats, i * c, c))
        .collect::<Result<_>>()?;
    let k_mats: Vec<Tensor> = (0..n)
        .map(|i| {
            let flat = ops::slice(tape, kernels, i * c * c, c * c)?;
            ops::reshape(tape, &flat, &[c, c])
        })
        .collect::<Result<_>>()?;

    let mut upper = vec![vec![None; n]; n];
    for i in 0..n {
        for j in (i + 1)..n {
            let kifj = ops::matvec(tape, &k_mats[i], &f_rows[j])?;
            let kjfi = ops::matvec(tape, &k_mats[j], &f_rows[i])?;
            upper[i][j] = Some(ops::euclidean_distance(tape, &kifj, &kjfi)?);
        }
    }
    losses::assemble_square(tape, n, |i, j| {
        if i < j {
            upper[i][j].clone()
        } else {
            upper[j][i].clone()
        }
    })
}

/// Test-phase distances for every (query, gallery) pair. Kernels and
/// features are computed once per image upstream, so this performs exactly
/// Q*G distance evaluations.
pub fn cross_distance_matrix(
    q_feats: &Tensor,
    q_kernels: &Tensor,
    g_feats: &Tensor,
    g_kernels: &Tensor,
) -> Result<DistanceMatrix> {
    let (q, c) = (q_feats.shape()[0], q_feats.shape()[1]);
    let g = g_feats.shape()[0];
    if g_feats.shape()[1] != c {
        return Err(Error::ShapeMismatch(format!(
            "query width {c} vs gallery width {}",
            g_feats.shape()[1]
        )));
    }
    for (k, n) in [(q_kernels, q), (g_kernels, g)] {
        if k.rank() != 3 || k.shape() != [n, c, c] {
            return Err(Error::ShapeMismatch(format!(
                "kernels {:?} vs [{n},{c},{c}]",
                k.shape()
            )));
        }
    }
    let mut data = vec![0.0; q * g];
    for qi in 0..q {
        for gi in 0..g {
            let ctx = PairContext {
                f_i: &q_feats.data()[qi * c..(qi + 1) * c],
                f_j: &g_feats.data()[gi * c..(gi + 1) * c],
                k_i: &q_kernels.data()[qi * c * c..(qi + 1) * c * c],
                k_j: &g_kernels.data()[gi * c * c..(gi + 1) * c * c],
                dim: c,
            };
            data[qi * g + gi] = mutual_pair_distance(&ctx)?;
        }
    }
    DistanceMatrix::from_vec(q, g, data)
}

/// Triplet-only training loss on the exchanged-kernel distance matrix.
pub fn mutual_branch_loss(
    tape: &Tape,
    distmat: &Tensor,
    labels: &[usize],
    margin: f64,
) -> Result<Tensor> {
    losses::hard_triplet_loss(tape, distmat, labels, margin)
}
