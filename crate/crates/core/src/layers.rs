//! Layer structs: parameters plus the glue that binds them to a step's tape.
//!
//! In `Train` mode a layer registers its parameters as tape leaves before
//! use (memoized, so repeated use accumulates onto one node); in `Eval` mode
//! parameters stay detached and the forward pass records nothing.

use std::cell::RefCell;

use rand::Rng;

use crate::error::Result;
use crate::ops::{self, BnStats};
use crate::tape::Tape;
use crate::tensor::Tensor;
use crate::Mode;

pub const BN_EPS: f64 = 1e-5;
/// Weight of the current batch in the running-stat exponential moving average.
pub const BN_MOMENTUM: f64 = 0.1;

fn bind(tape: &Tape, t: &Tensor, mode: Mode) -> Tensor {
    match mode {
        Mode::Train => tape.leaf(t),
        Mode::Eval => t.clone(),
    }
}

/// He fan-in initialization: N(0, sqrt(2 / fan_in)).
pub fn he_init<R: Rng>(rng: &mut R, shape: &[usize], fan_in: usize) -> Tensor {
    Tensor::randn(rng, shape, (2.0 / fan_in as f64).sqrt()).with_grad()
}

/// Visitor over named parameters, in a fixed declaration order. The same
/// order drives checkpoint records and optimizer state, so it must stay
/// deterministic.
pub trait ParamVisitor {
    fn visit(&mut self, name: &str, t: &mut Tensor);
    /// Non-trainable state that still belongs in checkpoints.
    fn visit_buffer(&mut self, name: &str, values: &mut Vec<f64>);
}

pub struct Conv2d {
    pub weight: Tensor,
    pub stride: usize,
    pub pad: usize,
}

impl Conv2d {
    pub fn new<R: Rng>(
        rng: &mut R,
        in_c: usize,
        out_c: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
    ) -> Self {
        let fan_in = in_c * kernel * kernel;
        Conv2d {
            weight: he_init(rng, &[out_c, in_c, kernel, kernel], fan_in),
            stride,
            pad,
        }
    }

    pub fn forward(&self, tape: &Tape, x: &Tensor, mode: Mode) -> Result<Tensor> {
        let w = bind(tape, &self.weight, mode);
        ops::conv2d(tape, x, &w, self.stride, self.pad)
    }

    pub fn visit(&mut self, prefix: &str, v: &mut dyn ParamVisitor) {
        v.visit(&format!("{prefix}.weight"), &mut self.weight);
    }
}

pub struct BatchNorm {
    pub gamma: Tensor,
    pub beta: Tensor,
    stats: RefCell<BnStats>,
}

impl BatchNorm {
    pub fn new(channels: usize) -> Self {
        BatchNorm {
            gamma: Tensor::full(&[channels], 1.0).with_grad(),
            beta: Tensor::zeros(&[channels]).with_grad(),
            stats: RefCell::new(BnStats::identity(channels)),
        }
    }

    pub fn forward(&self, tape: &Tape, x: &Tensor, mode: Mode) -> Result<Tensor> {
        let gamma = bind(tape, &self.gamma, mode);
        let beta = bind(tape, &self.beta, mode);
        let mut stats = self.stats.borrow_mut();
        ops::batch_norm(tape, x, &gamma, &beta, &mut stats, mode, BN_EPS, BN_MOMENTUM)
    }

    pub fn running_stats(&self) -> BnStats {
        self.stats.borrow().clone()
    }

    pub fn visit(&mut self, prefix: &str, v: &mut dyn ParamVisitor) {
        v.visit(&format!("{prefix}.gamma"), &mut self.gamma);
        v.visit(&format!("{prefix}.beta"), &mut self.beta);
        let mut stats = self.stats.borrow_mut();
        v.visit_buffer(&format!("{prefix}.running_mean"), &mut stats.mean);
        v.visit_buffer(&format!("{prefix}.running_var"), &mut stats.var);
    }
}

pub struct Linear {
    pub weight: Tensor,
    pub bias: Option<Tensor>,
}

impl Linear {
    pub fn new<R: Rng>(rng: &mut R, in_f: usize, out_f: usize, with_bias: bool) -> Self {
        Linear {
            weight: he_init(rng, &[out_f, in_f], in_f),
            bias: with_bias.then(|| Tensor::zeros(&[out_f]).with_grad()),
        }
    }

    pub fn forward(&self, tape: &Tape, x: &Tensor, mode: Mode) -> Result<Tensor> {
        let w = bind(tape, &self.weight, mode);
        let b = self.bias.as_ref().map(|b| bind(tape, b, mode));
        ops::linear(tape, x, &w, b.as_ref())
    }

    pub fn visit(&mut self, prefix: &str, v: &mut dyn ParamVisitor) {
        v.visit(&format!("{prefix}.weight"), &mut self.weight);
        if let Some(b) = self.bias.as_mut() {
            v.visit(&format!("{prefix}.bias"), b);
        }
    }
}
