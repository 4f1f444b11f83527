//! Retrieval evaluation: CMC and mAP with cross-camera filtering,
//! flip-averaged feature extraction, and distance-matrix fusion.
//!
//! Ranking rules fixed here (the standard cross-camera protocol):
//! - gallery sorted ascending by distance, ties broken by gallery index
//!   (stable sort);
//! - gallery entries sharing the query's identity AND camera are removed;
//! - queries with no remaining positive are excluded from both metrics.

use crate::data::flip;
use crate::error::{Error, Result};
use crate::model::ReidModel;
use crate::mutual_guided::DistanceMatrix;
use crate::tape::Tape;
use crate::tensor::Tensor;
use crate::Mode;

#[derive(Clone, Debug)]
pub struct EvalReport {
    pub map: f64,
    /// cmc[k] = fraction of valid queries whose first remaining positive
    /// appears within rank k+1.
    pub cmc: Vec<f64>,
    pub num_valid_queries: usize,
}

impl EvalReport {
    pub fn cmc_at(&self, rank: usize) -> f64 {
        self.cmc.get(rank - 1).copied().unwrap_or(1.0)
    }

    /// Line-based key=value rendering.
    pub fn render_key_values(&self, prefix: &str) -> String {
        let mut out = String::new();
        out.push_str(&format!("{prefix}map={}\n", self.map));
        out.push_str(&format!(
            "{prefix}num_valid_queries={}\n",
            self.num_valid_queries
        ));
        for rank in [1, 5, 10] {
            if rank <= self.cmc.len() {
                out.push_str(&format!("{prefix}cmc{rank}={}\n", self.cmc[rank - 1]));
            }
        }
        out
    }

    /// CSV of the full curve, columns `rank,cmc`, rank 1-based.
    pub fn render_cmc_csv(&self) -> String {
        let mut out = String::from("rank,cmc\n");
        for (k, v) in self.cmc.iter().enumerate() {
            out.push_str(&format!("{},{}\n", k + 1, v));
        }
        out
    }
}

fn check_extents(
    distmat: &DistanceMatrix,
    q_ids: &[usize],
    g_ids: &[usize],
    q_cams: &[usize],
    g_cams: &[usize],
) -> Result<()> {
    if q_ids.len() != distmat.rows()
        || q_cams.len() != distmat.rows()
        || g_ids.len() != distmat.cols()
        || g_cams.len() != distmat.cols()
    {
        return Err(Error::ShapeMismatch(format!(
            "distmat {}x{} vs {} query ids / {} gallery ids",
            distmat.rows(),
            distmat.cols(),
            q_ids.len(),
            g_ids.len()
        )));
    }
    Ok(())
}

/// Sorted gallery indices for one query with same-id-same-cam entries
/// removed. Stable sort keeps index order on distance ties.
fn filtered_ranking(
    distmat: &DistanceMatrix,
    q: usize,
    q_id: usize,
    q_cam: usize,
    g_ids: &[usize],
    g_cams: &[usize],
) -> Vec<usize> {
    let mut order: Vec<usize> = (0..distmat.cols()).collect();
    order.sort_by(|&a, &b| distmat.get(q, a).total_cmp(&distmat.get(q, b)));
    order
        .into_iter()
        .filter(|&g| !(g_ids[g] == q_id && g_cams[g] == q_cam))
        .collect()
}

pub fn compute_cmc(
    distmat: &DistanceMatrix,
    q_ids: &[usize],
    g_ids: &[usize],
    q_cams: &[usize],
    g_cams: &[usize],
    max_rank: usize,
) -> Result<Vec<f64>> {
    check_extents(distmat, q_ids, g_ids, q_cams, g_cams)?;
    let mut hits = vec![0usize; max_rank];
    let mut valid = 0usize;
    for q in 0..distmat.rows() {
        let ranking = filtered_ranking(distmat, q, q_ids[q], q_cams[q], g_ids, g_cams);
        let first_pos = ranking.iter().position(|&g| g_ids[g] == q_ids[q]);
        let Some(first) = first_pos else { continue };
        valid += 1;
        for (k, hit) in hits.iter_mut().enumerate() {
            if first <= k {
                *hit += 1;
            }
        }
    }
    if valid == 0 {
        return Err(Error::NoValidQuery);
    }
    Ok(hits.iter().map(|&h| h as f64 / valid as f64).collect())
}

pub fn compute_map(
    distmat: &DistanceMatrix,
    q_ids: &[usize],
    g_ids: &[usize],
    q_cams: &[usize],
    g_cams: &[usize],
) -> Result<f64> {
    check_extents(distmat, q_ids, g_ids, q_cams, g_cams)?;
    let mut ap_sum = 0.0;
    let mut valid = 0usize;
    for q in 0..distmat.rows() {
        let ranking = filtered_ranking(distmat, q, q_ids[q], q_cams[q], g_ids, g_cams);
        let num_pos = ranking.iter().filter(|&&g| g_ids[g] == q_ids[q]).count();
        if num_pos == 0 {
            continue;
        }
        valid += 1;
        let mut seen = 0usize;
        let mut ap = 0.0;
        for (rank, &g) in ranking.iter().enumerate() {
            if g_ids[g] == q_ids[q] {
                seen += 1;
                ap += seen as f64 / (rank + 1) as f64;
            }
        }
        ap_sum += ap / num_pos as f64;
    }
    if valid == 0 {
        return Err(Error::NoValidQuery);
    }
    Ok(ap_sum / valid as f64)
}

/// mAP and CMC in one pass over the same ranking rules.
pub fn evaluate_ranking(
    distmat: &DistanceMatrix,
    q_ids: &[usize],
    g_ids: &[usize],
    q_cams: &[usize],
    g_cams: &[usize],
    max_rank: usize,
) -> Result<EvalReport> {
    let cmc = compute_cmc(distmat, q_ids, g_ids, q_cams, g_cams, max_rank)?;
    let map = compute_map(distmat, q_ids, g_ids, q_cams, g_cams)?;
    let mut valid = 0usize;
    for q in 0..distmat.rows() {
        let ranking = filtered_ranking(distmat, q, q_ids[q], q_cams[q], g_ids, g_cams);
        if ranking.iter().any(|&g| g_ids[g] == q_ids[q]) {
            valid += 1;
        }
    }
    Ok(EvalReport {
        map,
        cmc,
        num_valid_queries: valid,
    })
}

/// Min-max normalize each matrix to `[0,1]` (a constant matrix maps to all
/// zeros), then average with the weights renormalized to sum 1.
pub fn fuse_distances(mats: &[&DistanceMatrix], weights: &[f64]) -> Result<DistanceMatrix> {
    if mats.is_empty() || mats.len() != weights.len() {
        return Err(Error::ShapeMismatch(format!(
            "{} matrices vs {} weights",
            mats.len(),
            weights.len()
        )));
    }
    let (rows, cols) = (mats[0].rows(), mats[0].cols());
    for m in mats {
        if m.rows() != rows || m.cols() != cols {
            return Err(Error::ShapeMismatch(format!(
                "fusion extents {}x{} vs {}x{}",
                m.rows(),
                m.cols(),
                rows,
                cols
            )));
        }
    }
    if let Some(&w) = weights.iter().find(|&&w| w < 0.0 || !w.is_finite()) {
        return Err(Error::ConfigInvalid(format!(
            "fusion weights must be finite and nonnegative, got {w}"
        )));
    }
    let total: f64 = weights.iter().sum();
    if total == 0.0 {
        return Err(Error::AllZeroWeights);
    }
    let mut fused = vec![0.0; rows * cols];
    for (m, &w) in mats.iter().zip(weights) {
        let lo = m.data().iter().cloned().fold(f64::INFINITY, f64::min);
        let hi = m.data().iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let range = hi - lo;
        let weight = w / total;
        if range > 0.0 {
            for (f, &d) in fused.iter_mut().zip(m.data()) {
                *f += weight * (d - lo) / range;
            }
        }
        // constant matrix contributes zeros
    }
    DistanceMatrix::from_vec(rows, cols, fused)
}

/// Plain query x gallery Euclidean distances between embedding rows.
pub fn cross_euclidean(q: &Tensor, g: &Tensor) -> Result<DistanceMatrix> {
    if q.rank() != 2 || g.rank() != 2 || q.shape()[1] != g.shape()[1] {
        return Err(Error::ShapeMismatch(format!(
            "cross_euclidean: {:?} vs {:?}",
            q.shape(),
            g.shape()
        )));
    }
    let (qn, c) = (q.shape()[0], q.shape()[1]);
    let gn = g.shape()[0];
    let mut data = vec![0.0; qn * gn];
    for i in 0..qn {
        for j in 0..gn {
            let mut acc = 0.0;
            for k in 0..c {
                let d = q.data()[i * c + k] - g.data()[j * c + k];
                acc += d * d;
            }
            data[i * gn + j] = acc.sqrt();
        }
    }
    DistanceMatrix::from_vec(qn, gn, data)
}

/// Flip-averaged eval-mode features: every branch feature is the mean of
/// the original and horizontally flipped pass. Mutual kernels come from the
/// averaged holistic feature, one controller evaluation per image.
pub struct EvalEmbeddings {
    /// Pre-batch-norm pooled backbone feature, `[N, C_o]`.
    pub pooled: Tensor,
    pub global: Option<Tensor>,
    pub self_emb: Option<Tensor>,
    pub mutual_feats: Option<Tensor>,
    pub mutual_kernels: Option<Tensor>,
}

fn average(a: &Tensor, b: &Tensor) -> Tensor {
    let data: Vec<f64> = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| 0.5 * (x + y))
        .collect();
    Tensor::from_vec(a.shape(), data).expect("averaged shape")
}

pub fn flip_average_embed(model: &ReidModel, images: &Tensor) -> Result<EvalEmbeddings> {
    let tape = Tape::new();
    let straight = model.forward(&tape, images, Mode::Eval)?;
    let mirrored = model.forward(&tape, &flip(images), Mode::Eval)?;

    let pooled = average(&straight.pooled, &mirrored.pooled);
    let global = match (&straight.global_emb, &mirrored.global_emb) {
        (Some(a), Some(b)) => Some(average(a, b)),
        _ => None,
    };
    let self_emb = match (&straight.self_emb, &mirrored.self_emb) {
        (Some(a), Some(b)) => Some(average(a, b)),
        _ => None,
    };
    let mutual_feats = match (&straight.mutual_feats, &mirrored.mutual_feats) {
        (Some(a), Some(b)) => Some(average(a, b)),
        _ => None,
    };
    // One controller pass per image on the averaged holistic feature: the
    // averaged vector is the image's final feature, and kernels are defined
    // as a function of it.
    let mutual_kernels = match &model.mutual {
        Some(branch) => Some(branch.kernels(&tape, &pooled, Mode::Eval)?),
        None => None,
    };
    Ok(EvalEmbeddings {
        pooled,
        global,
        self_emb,
        mutual_feats,
        mutual_kernels,
    })
}

fn select_rows(t: &Tensor, indices: &[usize]) -> Result<Tensor> {
    let row = t.numel() / t.shape()[0];
    let mut data = Vec::with_capacity(indices.len() * row);
    for &i in indices {
        data.extend_from_slice(&t.data()[i * row..(i + 1) * row]);
    }
    let mut shape = t.shape().to_vec();
    shape[0] = indices.len();
    Tensor::from_vec(&shape, data)
}

/// Per-branch query x gallery distance matrices plus their fusion, computed
/// from flip-averaged eval features over the held-out-camera split.
pub struct BranchDistances {
    pub query: Vec<usize>,
    pub gallery: Vec<usize>,
    /// Distances on the raw pooled feature, before batch norm.
    pub global_pre: DistanceMatrix,
    pub global: Option<DistanceMatrix>,
    pub self_guided: Option<DistanceMatrix>,
    pub mutual: Option<DistanceMatrix>,
    pub fused: DistanceMatrix,
}

pub fn branch_distances(
    model: &ReidModel,
    dataset: &crate::data::Dataset,
    fuse_weights: &[f64; 3],
) -> Result<BranchDistances> {
    let (query, gallery) = crate::data::split_query_gallery(dataset);
    if query.is_empty() || gallery.is_empty() {
        return Err(Error::NoValidQuery);
    }
    let images: Vec<Tensor> = dataset.samples.iter().map(|s| s.image.clone()).collect();
    let images = crate::data::stack_images(&images)?;
    let emb = flip_average_embed(model, &images)?;

    let q_pooled = select_rows(&emb.pooled, &query)?;
    let g_pooled = select_rows(&emb.pooled, &gallery)?;
    let global_pre = cross_euclidean(&q_pooled, &g_pooled)?;

    let global = match &emb.global {
        Some(e) => Some(cross_euclidean(
            &select_rows(e, &query)?,
            &select_rows(e, &gallery)?,
        )?),
        None => None,
    };
    let self_guided = match &emb.self_emb {
        Some(e) => Some(cross_euclidean(
            &select_rows(e, &query)?,
            &select_rows(e, &gallery)?,
        )?),
        None => None,
    };
    let mutual = match (&emb.mutual_feats, &emb.mutual_kernels) {
        (Some(f), Some(k)) => Some(crate::mutual_guided::cross_distance_matrix(
            &select_rows(f, &query)?,
            &select_rows(k, &query)?,
            &select_rows(f, &gallery)?,
            &select_rows(k, &gallery)?,
        )?),
        _ => None,
    };

    let mut mats: Vec<&DistanceMatrix> = Vec::new();
    let mut weights = Vec::new();
    if let Some(m) = &global {
        mats.push(m);
        weights.push(fuse_weights[0]);
    }
    if let Some(m) = &self_guided {
        mats.push(m);
        weights.push(fuse_weights[1]);
    }
    if let Some(m) = &mutual {
        mats.push(m);
        weights.push(fuse_weights[2]);
    }
    let fused = fuse_distances(&mats, &weights)?;
    Ok(BranchDistances {
        query,
        gallery,
        global_pre,
        global,
        self_guided,
        mutual,
        fused,
    })
}

/// mAP/CMC per enabled branch plus the fused matrix.
pub struct EvalOutcome {
    pub global: Option<EvalReport>,
    pub self_guided: Option<EvalReport>,
    pub mutual: Option<EvalReport>,
    pub fused: EvalReport,
    pub distances: BranchDistances,
}

impl EvalOutcome {
    /// Line-based key=value rendering of every branch report.
    pub fn render(&self) -> String {
        let mut out = String::new();
        out.push_str(&format!(
            "num_query={}\nnum_gallery={}\n",
            self.distances.query.len(),
            self.distances.gallery.len()
        ));
        for (name, report) in self.reports() {
            out.push_str(&report.render_key_values(&format!("{name}.")));
        }
        out
    }

    pub fn reports(&self) -> Vec<(&'static str, &EvalReport)> {
        let mut out: Vec<(&'static str, &EvalReport)> = Vec::new();
        if let Some(r) = &self.global {
            out.push(("global", r));
        }
        if let Some(r) = &self.self_guided {
            out.push(("self", r));
        }
        if let Some(r) = &self.mutual {
            out.push(("mutual", r));
        }
        out.push(("fused", &self.fused));
        out
    }
}

pub fn evaluate_model(
    model: &ReidModel,
    dataset: &crate::data::Dataset,
    fuse_weights: &[f64; 3],
    max_rank: Option<usize>,
) -> Result<EvalOutcome> {
    let distances = branch_distances(model, dataset, fuse_weights)?;
    let q_ids: Vec<usize> = distances.query.iter().map(|&i| dataset.samples[i].id).collect();
    let g_ids: Vec<usize> = distances.gallery.iter().map(|&i| dataset.samples[i].id).collect();
    let q_cams: Vec<usize> = distances.query.iter().map(|&i| dataset.samples[i].cam).collect();
    let g_cams: Vec<usize> = distances.gallery.iter().map(|&i| dataset.samples[i].cam).collect();
    let max_rank = max_rank.unwrap_or_else(|| distances.gallery.len().min(20));
    let rank = |m: &DistanceMatrix| evaluate_ranking(m, &q_ids, &g_ids, &q_cams, &g_cams, max_rank);

    let global = distances.global.as_ref().map(&rank).transpose()?;
    let self_guided = distances.self_guided.as_ref().map(&rank).transpose()?;
    let mutual = distances.mutual.as_ref().map(&rank).transpose()?;
    let fused = rank(&distances.fused)?;
    Ok(EvalOutcome {
        global,
        self_guided,
        mutual,
        fused,
        distances,
    })
}

/// The per-pair distance dump behind the scatter-style analysis: one row per
/// (query, gallery) pair with raw and per-column min-max-normalized
/// distances. Requires all three branches.
pub fn export_distances_csv(
    model: &ReidModel,
    dataset: &crate::data::Dataset,
    fuse_weights: &[f64; 3],
) -> Result<String> {
    let d = branch_distances(model, dataset, fuse_weights)?;
    let (Some(global), Some(self_guided), Some(mutual)) =
        (&d.global, &d.self_guided, &d.mutual)
    else {
        return Err(Error::ConfigInvalid(
            "distance export needs all three branches enabled".into(),
        ));
    };
    let cols: [(&str, &DistanceMatrix); 5] = [
        ("d_global_pre", &d.global_pre),
        ("d_global", global),
        ("d_self", self_guided),
        ("d_mutual", mutual),
        ("d_fused", &d.fused),
    ];
    let norm = |m: &DistanceMatrix| -> Vec<f64> {
        let lo = m.data().iter().cloned().fold(f64::INFINITY, f64::min);
        let hi = m.data().iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let range = hi - lo;
        m.data()
            .iter()
            .map(|&v| if range > 0.0 { (v - lo) / range } else { 0.0 })
            .collect()
    };
    let normalized: Vec<Vec<f64>> = cols.iter().map(|(_, m)| norm(m)).collect();

    let mut out = String::from("query_idx,gallery_idx,same_id");
    for (name, _) in &cols {
        out.push(',');
        out.push_str(name);
    }
    for (name, _) in &cols {
        out.push_str(&format!(",{name}_norm"));
    }
    out.push('\n');
    for (qi, &q) in d.query.iter().enumerate() {
        for (gi, &g) in d.gallery.iter().enumerate() {
            let flat = qi * d.gallery.len() + gi;
            let same = (dataset.samples[q].id == dataset.samples[g].id) as u8;
            out.push_str(&format!("{q},{g},{same}"));
            for (_, m) in &cols {
                out.push_str(&format!(",{}", m.data()[flat]));
            }
            for n in &normalized {
                out.push_str(&format!(",{}", n[flat]));
            }
            out.push('\n');
        }
    }
    Ok(out)
}
