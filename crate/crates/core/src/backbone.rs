//! Miniature convolutional backbone and the global branch.
//!
//! The backbone is a stack of conv -> batch-norm -> ReLU stages with 3x3
//! kernels and pad 1, so spatial extents divide exactly by the stride
//! product. The global branch pools the final feature map, batch-normalizes
//! the pooled vector, and trains it with triplet + ID loss.

use rand::Rng;

use crate::error::{Error, Result};
use crate::layers::{BatchNorm, Conv2d, Linear, ParamVisitor};
use crate::losses::{self, LossConfig};
use crate::ops;
use crate::tape::Tape;
use crate::tensor::Tensor;
use crate::Mode;

#[derive(Clone, Debug)]
pub struct BackboneConfig {
    /// Channel width per stage; the last entry is the holistic feature
    /// width C_o.
    pub widths: Vec<usize>,
    pub strides: Vec<usize>,
    pub in_channels: usize,
}

impl BackboneConfig {
    pub fn desk_default() -> Self {
        BackboneConfig {
            widths: vec![16, 32, 64],
            strides: vec![2, 2, 2],
            in_channels: 3,
        }
    }

    pub fn out_channels(&self) -> usize {
        *self.widths.last().expect("validated non-empty")
    }

    pub fn stride_product(&self) -> usize {
        self.strides.iter().product()
    }

    pub fn validate(&self) -> Result<()> {
        if self.widths.is_empty() || self.widths.len() != self.strides.len() {
            return Err(Error::ConfigInvalid(format!(
                "backbone wants matching non-empty widths/strides, got {:?} / {:?}",
                self.widths, self.strides
            )));
        }
        if let Some(&s) = self.strides.iter().find(|&&s| s != 1 && s != 2) {
            return Err(Error::ConfigInvalid(format!("stride {s} not in {{1,2}}")));
        }
        Ok(())
    }
}

pub struct Backbone {
    stages: Vec<(Conv2d, BatchNorm)>,
    stride_product: usize,
}

impl Backbone {
    pub fn new<R: Rng>(rng: &mut R, cfg: &BackboneConfig) -> Result<Self> {
        cfg.validate()?;
        let mut stages = Vec::with_capacity(cfg.widths.len());
        let mut in_c = cfg.in_channels;
        for (&out_c, &stride) in cfg.widths.iter().zip(&cfg.strides) {
            stages.push((Conv2d::new(rng, in_c, out_c, 3, stride, 1), BatchNorm::new(out_c)));
            in_c = out_c;
        }
        Ok(Backbone {
            stages,
            stride_product: cfg.stride_product(),
        })
    }

    /// `[B,3,H,W] -> [B,C_o,H/prod(strides),W/prod(strides)]`.
    pub fn forward(&self, tape: &Tape, images: &Tensor, mode: Mode) -> Result<Tensor> {
        if images.rank() != 4 {
            return Err(Error::ShapeMismatch(format!(
                "backbone wants [B,3,H,W], got {:?}",
                images.shape()
            )));
        }
        let (h, w) = (images.shape()[2], images.shape()[3]);
        if h % self.stride_product != 0 || w % self.stride_product != 0 {
            return Err(Error::ShapeMismatch(format!(
                "spatial extents {h}x{w} not divisible by stride product {}",
                self.stride_product
            )));
        }
        let mut x = images.clone();
        for (conv, bn) in &self.stages {
            x = conv.forward(tape, &x, mode)?;
            x = bn.forward(tape, &x, mode)?;
            x = ops::relu(tape, &x);
        }
        Ok(x)
    }

    pub fn visit(&mut self, v: &mut dyn ParamVisitor) {
        for (i, (conv, bn)) in self.stages.iter_mut().enumerate() {
            conv.visit(&format!("backbone.stage{i}.conv"), v);
            bn.visit(&format!("backbone.stage{i}.bn"), v);
        }
    }
}

/// Per-branch loss with the components recorded separately; the scalar
/// tensor stays on the tape for backward.
pub struct BranchLoss {
    pub loss: Tensor,
    pub triplet: f64,
    pub ce: f64,
}

/// Pooled embedding, 1-D batch norm, and a bias-free classifier head.
pub struct GlobalBranch {
    pub bn: BatchNorm,
    pub classifier: Linear,
}

impl GlobalBranch {
    pub fn new<R: Rng>(rng: &mut R, c_o: usize, num_ids: usize) -> Self {
        GlobalBranch {
            bn: BatchNorm::new(c_o),
            classifier: Linear::new(rng, c_o, num_ids, false),
        }
    }

    /// Post-batch-norm embedding; this is also the test-time feature.
    pub fn embed(&self, tape: &Tape, pooled: &Tensor, mode: Mode) -> Result<Tensor> {
        self.bn.forward(tape, pooled, mode)
    }

    pub fn logits(&self, tape: &Tape, emb: &Tensor, mode: Mode) -> Result<Tensor> {
        self.classifier.forward(tape, emb, mode)
    }

    pub fn visit(&mut self, v: &mut dyn ParamVisitor) {
        self.bn.visit("global.bn", v);
        self.classifier.visit("global.classifier", v);
    }
}

/// Triplet + label-smoothed ID loss on an embedding/logits pair; used by
/// both the global and the self-guided branch heads.
pub fn embedding_branch_loss(
    tape: &Tape,
    emb: &Tensor,
    logits: &Tensor,
    labels: &[usize],
    cfg: &LossConfig,
) -> Result<BranchLoss> {
    let dist = losses::pairwise_euclidean(tape, emb)?;
    let triplet = losses::hard_triplet_loss(tape, &dist, labels, cfg.margin)?;
    let ce = losses::label_smooth_ce(tape, logits, labels, cfg.smoothing)?;
    let total = ops::add(tape, &triplet, &ce)?;
    Ok(BranchLoss {
        loss: total,
        triplet: triplet.value(),
        ce: ce.value(),
    })
}
