//! Self-guided dynamic branch: a controller turns each image's own pooled
//! feature into a per-image 1x1 kernel that is applied back onto that
//! image's compressed feature map.
//!
//! The controller is the three-step affine map
//! `C_o -> C_o/d -> C_o/d -> C_kernel^2` with ReLU between layers; generated
//! kernels are scaled to unit Frobenius norm before use, so the branch is
//! invariant to the controller's output scale.

use rand::Rng;

use crate::backbone::{embedding_branch_loss, BranchLoss};
use crate::error::{Error, Result};
use crate::layers::{BatchNorm, Conv2d, Linear, ParamVisitor};
use crate::losses::LossConfig;
use crate::ops;
use crate::tape::Tape;
use crate::tensor::Tensor;
use crate::Mode;

/// Kernel generator shared in shape by the self-guided and mutual branches
/// (their parameters are independent).
pub struct Controller {
    pub l1: Linear,
    pub l2: Linear,
    pub l3: Linear,
    kernel_width: usize,
}

impl Controller {
    pub fn new<R: Rng>(rng: &mut R, c_o: usize, squeeze: usize, kernel_width: usize) -> Result<Self> {
        if squeeze == 0 || c_o % squeeze != 0 {
            return Err(Error::ConfigInvalid(format!(
                "squeeze {squeeze} must divide the feature width {c_o}"
            )));
        }
        let hidden = c_o / squeeze;
        Ok(Controller {
            l1: Linear::new(rng, c_o, hidden, true),
            l2: Linear::new(rng, hidden, hidden, true),
            l3: Linear::new(rng, hidden, kernel_width * kernel_width, true),
            kernel_width,
        })
    }

    pub fn kernel_width(&self) -> usize {
        self.kernel_width
    }

    /// `[B, C_o] -> [B, C, C]` unit-Frobenius kernels (zero input with zero
    /// parameters stays the zero kernel through the eps floor).
    pub fn forward(&self, tape: &Tape, pooled: &Tensor, mode: Mode) -> Result<Tensor> {
        let h1 = ops::relu(tape, &self.l1.forward(tape, pooled, mode)?);
        let h2 = ops::relu(tape, &self.l2.forward(tape, &h1, mode)?);
        let raw = self.l3.forward(tape, &h2, mode)?;
        let normalized = ops::frobenius_normalize_batched(tape, &raw, ops::NORM_EPS);
        let b = pooled.shape()[0];
        let c = self.kernel_width;
        ops::reshape(tape, &normalized, &[b, c, c])
    }

    pub fn visit(&mut self, prefix: &str, v: &mut dyn ParamVisitor) {
        self.l1.visit(&format!("{prefix}.l1"), v);
        self.l2.visit(&format!("{prefix}.l2"), v);
        self.l3.visit(&format!("{prefix}.l3"), v);
    }

    /// Put the controller in a generic position: biases drawn uniformly
    /// instead of the zero init, so no input can silence a whole layer.
    /// Test fixtures use this to rule out the zero-kernel corner.
    pub fn randomize_biases<R: Rng>(&mut self, rng: &mut R, scale: f64) {
        for layer in [&mut self.l1, &mut self.l2, &mut self.l3] {
            let bias = layer.bias.as_mut().expect("controller layers carry biases");
            for b in bias.data_mut() {
                *b = rng.gen_range(-scale..scale);
            }
        }
    }

    /// Test fixture: zero the final layer and set its bias so the
    /// pre-normalization kernel is the identity matrix. After Frobenius
    /// normalization the applied kernel is `I / sqrt(C)`.
    pub fn force_identity_kernel(&mut self) {
        self.l3.weight.data_mut().fill(0.0);
        let c = self.kernel_width;
        let bias = self.l3.bias.as_mut().expect("controller l3 has bias");
        let bias = bias.data_mut();
        bias.fill(0.0);
        for i in 0..c {
            bias[i * c + i] = 1.0;
        }
    }
}

/// Three 1x1 conv -> batch-norm -> ReLU blocks reducing channel width while
/// preserving spatial extents.
pub struct ChannelCompressor {
    blocks: Vec<(Conv2d, BatchNorm)>,
}

impl ChannelCompressor {
    pub fn new<R: Rng>(rng: &mut R, in_c: usize, out_c: usize) -> Result<Self> {
        if out_c == 0 {
            return Err(Error::ConfigInvalid("compressor output width must be >= 1".into()));
        }
        let widths = [out_c, out_c, out_c];
        let mut blocks = Vec::with_capacity(widths.len());
        let mut prev = in_c;
        for &w in &widths {
            blocks.push((Conv2d::new(rng, prev, w, 1, 1, 0), BatchNorm::new(w)));
            prev = w;
        }
        Ok(ChannelCompressor { blocks })
    }

    pub fn forward(&self, tape: &Tape, featmap: &Tensor, mode: Mode) -> Result<Tensor> {
        let mut x = featmap.clone();
        for (conv, bn) in &self.blocks {
            x = conv.forward(tape, &x, mode)?;
            x = bn.forward(tape, &x, mode)?;
            x = ops::relu(tape, &x);
        }
        Ok(x)
    }

    pub fn visit(&mut self, prefix: &str, v: &mut dyn ParamVisitor) {
        for (i, (conv, bn)) in self.blocks.iter_mut().enumerate() {
            conv.visit(&format!("{prefix}.block{i}.conv"), v);
            bn.visit(&format!("{prefix}.block{i}.bn"), v);
        }
    }
}

pub struct SelfBranch {
    pub compressor: ChannelCompressor,
    pub controller: Controller,
    pub classifier: Linear,
}

impl SelfBranch {
    pub fn new<R: Rng>(
        rng: &mut R,
        c_o: usize,
        c_branch: usize,
        squeeze: usize,
        num_ids: usize,
    ) -> Result<Self> {
        Ok(SelfBranch {
            compressor: ChannelCompressor::new(rng, c_o, c_branch)?,
            controller: Controller::new(rng, c_o, squeeze, c_branch)?,
            classifier: Linear::new(rng, c_branch, num_ids, false),
        })
    }

    /// Pooled holistic feature drives the controller; the kernel filters the
    /// compressed map, which is then pooled into the branch embedding.
    pub fn forward(
        &self,
        tape: &Tape,
        featmap: &Tensor,
        pooled: &Tensor,
        mode: Mode,
    ) -> Result<Tensor> {
        let kernels = self.controller.forward(tape, pooled, mode)?;
        let compressed = self.compressor.forward(tape, featmap, mode)?;
        let filtered = ops::dynamic_conv_1x1(tape, &compressed, &kernels)?;
        ops::global_avg_pool(tape, &filtered)
    }

    pub fn logits(&self, tape: &Tape, emb: &Tensor, mode: Mode) -> Result<Tensor> {
        self.classifier.forward(tape, emb, mode)
    }

    pub fn loss(
        &self,
        tape: &Tape,
        emb: &Tensor,
        logits: &Tensor,
        labels: &[usize],
        cfg: &LossConfig,
    ) -> Result<BranchLoss> {
        embedding_branch_loss(tape, emb, logits, labels, cfg)
    }

    pub fn visit(&mut self, v: &mut dyn ParamVisitor) {
        self.compressor.visit("self.compressor", v);
        self.controller.visit("self.controller", v);
        self.classifier.visit("self.classifier", v);
    }
}
