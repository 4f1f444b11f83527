//! Central finite-difference verification of backward rules.
//!
//! `grad_check` compares the tape gradient of a scalar-valued function
//! against central differences, coordinate by coordinate, in double
//! precision. The named registry drives the `gradcheck` CLI subcommand and
//! the acceptance suite: one entry per differentiable primitive plus one per
//! full branch.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::ops;
use crate::tape::Tape;
use crate::tensor::Tensor;
use crate::Mode;

/// Pass threshold for the registry and the CLI.
pub const TOLERANCE: f64 = 1e-4;
/// Central-difference step.
pub const STEP: f64 = 1e-5;

#[derive(Clone, Copy, Debug)]
pub struct GradCheck {
    /// max over coordinates of |analytic - numeric| / max(|analytic|, |numeric|, 1e-8)
    pub max_rel_err: f64,
    /// True when no analytic gradient flowed to the input (detached input
    /// or a genuinely zero derivative).
    pub analytic_zero: bool,
}

impl GradCheck {
    pub fn passed(&self) -> bool {
        self.max_rel_err < TOLERANCE
    }
}

/// Compare the analytic gradient of `f` at `x` against central differences
/// with the given step. `f` must be a deterministic scalar-valued function
/// of `x`; the tensor handed to it is already bound to the supplied tape.
pub fn grad_check<F>(f: F, x: &Tensor, step: f64) -> Result<GradCheck>
where
    F: Fn(&Tape, &Tensor) -> Result<Tensor>,
{
    let tape = Tape::new();
    let bound = tape.leaf(x);
    let y = f(&tape, &bound)?;
    let analytic = if y.is_attached() {
        tape.backward(&y)?;
        tape.grad_or_zero(&bound)
    } else {
        vec![0.0; x.numel()]
    };

    let mut max_rel = 0.0f64;
    let base = x.data().to_vec();
    for i in 0..x.numel() {
        let mut plus = base.clone();
        plus[i] += step;
        let mut minus = base.clone();
        minus[i] -= step;
        let fp = eval_scalar(&f, x, plus)?;
        let fm = eval_scalar(&f, x, minus)?;
        let numeric = (fp - fm) / (2.0 * step);
        let denom = analytic[i].abs().max(numeric.abs()).max(1e-8);
        max_rel = max_rel.max((analytic[i] - numeric).abs() / denom);
    }
    Ok(GradCheck {
        max_rel_err: max_rel,
        analytic_zero: analytic.iter().all(|&v| v == 0.0),
    })
}

fn eval_scalar<F>(f: &F, like: &Tensor, data: Vec<f64>) -> Result<f64>
where
    F: Fn(&Tape, &Tensor) -> Result<Tensor>,
{
    let tape = Tape::new();
    let x = Tensor::from_vec(like.shape(), data)?;
    let y = f(&tape, &x)?;
    debug_assert_eq!(y.numel(), 1, "grad_check target must be scalar");
    Ok(y.value())
}

/// One named check; `run(seed)` builds a random fixture and returns the
/// worst error over the differentiable inputs it exercises.
pub struct CheckEntry {
    pub name: &'static str,
    pub run: Box<dyn Fn(u64) -> Result<GradCheck> + Send + Sync>,
}

fn rng_for(seed: u64, tag: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed.wrapping_mul(0x9e37_79b9_7f4a_7c15).wrapping_add(tag))
}

fn worst(results: &[GradCheck]) -> GradCheck {
    let mut out = GradCheck {
        max_rel_err: 0.0,
        analytic_zero: false,
    };
    for r in results {
        if r.max_rel_err > out.max_rel_err {
            out.max_rel_err = r.max_rel_err;
        }
        out.analytic_zero |= r.analytic_zero;
    }
    out
}

/// Keep random values away from ReLU/hinge kinks so central differences do
/// not straddle a nondifferentiable point.
fn away_from_zero(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let t = Tensor::rand_uniform(rng, shape, -1.0, 1.0);
    let data: Vec<f64> = t
        .data()
        .iter()
        .map(|&v| if v.abs() < 0.05 { v + 0.1 * v.signum().max(0.5) } else { v })
        .collect();
    Tensor::from_vec(shape, data).unwrap()
}

/// Every differentiable primitive, each wrapped so the checked quantity is
/// a scalar. Branch-level entries are appended by [`full_registry`].
pub fn primitive_registry() -> Vec<CheckEntry> {
    let mut checks: Vec<CheckEntry> = Vec::new();

    macro_rules! entry {
        ($name:expr, $body:expr) => {
            checks.push(CheckEntry {
                name: $name,
                run: Box::new($body),
            });
        };
    }

    entry!("relu", |seed| {
        let mut rng = rng_for(seed, 1);
        let x = away_from_zero(&mut rng, &[3, 4]).with_grad();
        grad_check(|t, x| Ok(ops::sum(t, &ops::relu(t, x))), &x, STEP)
    });

    entry!("add", |seed| {
        let mut rng = rng_for(seed, 2);
        let a = Tensor::rand_uniform(&mut rng, &[2, 3], -1.0, 1.0).with_grad();
        let b = Tensor::rand_uniform(&mut rng, &[2, 3], -1.0, 1.0);
        let r1 = grad_check(|t, x| Ok(ops::sum(t, &ops::add(t, x, &b)?)), &a, STEP)?;
        let b2 = b.clone().with_grad();
        let a2 = a.clone();
        let r2 = grad_check(|t, x| Ok(ops::sum(t, &ops::add(t, &a2, x)?)), &b2, STEP)?;
        Ok(worst(&[r1, r2]))
    });

    entry!("sub", |seed| {
        let mut rng = rng_for(seed, 3);
        let a = Tensor::rand_uniform(&mut rng, &[2, 3], -1.0, 1.0).with_grad();
        let b = Tensor::rand_uniform(&mut rng, &[2, 3], -1.0, 1.0).with_grad();
        let a1 = a.clone();
        let r1 = grad_check(|t, x| Ok(ops::sum(t, &ops::sub(t, x, &b)?)), &a, STEP)?;
        let r2 = grad_check(|t, x| Ok(ops::sum(t, &ops::sub(t, &a1, x)?)), &b, STEP)?;
        Ok(worst(&[r1, r2]))
    });

    entry!("mul", |seed| {
        let mut rng = rng_for(seed, 4);
        let a = Tensor::rand_uniform(&mut rng, &[2, 3], -1.0, 1.0).with_grad();
        let b = Tensor::rand_uniform(&mut rng, &[2, 3], -1.0, 1.0).with_grad();
        let a1 = a.clone();
        let r1 = grad_check(|t, x| Ok(ops::sum(t, &ops::mul(t, x, &b)?)), &a, STEP)?;
        let r2 = grad_check(|t, x| Ok(ops::sum(t, &ops::mul(t, &a1, x)?)), &b, STEP)?;
        Ok(worst(&[r1, r2]))
    });

    entry!("scale", |seed| {
        let mut rng = rng_for(seed, 5);
        let x = Tensor::rand_uniform(&mut rng, &[5], -1.0, 1.0).with_grad();
        grad_check(|t, x| Ok(ops::sum(t, &ops::scale(t, x, -2.5))), &x, STEP)
    });

    entry!("add_scalar", |seed| {
        let mut rng = rng_for(seed, 6);
        let x = Tensor::rand_uniform(&mut rng, &[5], -1.0, 1.0).with_grad();
        grad_check(|t, x| Ok(ops::sum(t, &ops::add_scalar(t, x, 0.3))), &x, STEP)
    });

    entry!("sum", |seed| {
        let mut rng = rng_for(seed, 7);
        let x = Tensor::rand_uniform(&mut rng, &[3, 2], -1.0, 1.0).with_grad();
        grad_check(|t, x| Ok(ops::sum(t, x)), &x, STEP)
    });

    entry!("mean", |seed| {
        let mut rng = rng_for(seed, 8);
        let x = Tensor::rand_uniform(&mut rng, &[3, 2], -1.0, 1.0).with_grad();
        grad_check(|t, x| Ok(ops::mean(t, x)), &x, STEP)
    });

    entry!("matmul", |seed| {
        let mut rng = rng_for(seed, 9);
        let a = Tensor::rand_uniform(&mut rng, &[4, 3], -1.0, 1.0).with_grad();
        let b = Tensor::rand_uniform(&mut rng, &[3, 5], -1.0, 1.0).with_grad();
        let a1 = a.clone();
        let r1 = grad_check(|t, x| Ok(ops::sum(t, &ops::matmul(t, x, &b)?)), &a, STEP)?;
        let r2 = grad_check(|t, x| Ok(ops::sum(t, &ops::matmul(t, &a1, x)?)), &b, STEP)?;
        Ok(worst(&[r1, r2]))
    });

    entry!("matvec", |seed| {
        let mut rng = rng_for(seed, 10);
        let a = Tensor::rand_uniform(&mut rng, &[4, 3], -1.0, 1.0).with_grad();
        let x = Tensor::rand_uniform(&mut rng, &[3], -1.0, 1.0).with_grad();
        let a1 = a.clone();
        let r1 = grad_check(|t, m| Ok(ops::sum(t, &ops::matvec(t, m, &x)?)), &a, STEP)?;
        let r2 = grad_check(|t, v| Ok(ops::sum(t, &ops::matvec(t, &a1, v)?)), &x, STEP)?;
        Ok(worst(&[r1, r2]))
    });

    entry!("linear", |seed| {
        let mut rng = rng_for(seed, 11);
        let x = Tensor::rand_uniform(&mut rng, &[3, 4], -1.0, 1.0).with_grad();
        let w = Tensor::rand_uniform(&mut rng, &[2, 4], -1.0, 1.0).with_grad();
        let b = Tensor::rand_uniform(&mut rng, &[2], -1.0, 1.0).with_grad();
        let (x1, w1) = (x.clone(), w.clone());
        let (w2, b2) = (w.clone(), b.clone());
        let r1 = grad_check(
            |t, v| Ok(ops::sum(t, &ops::linear(t, v, &w2, Some(&b2))?)),
            &x,
            STEP,
        )?;
        let b3 = b.clone();
        let r2 = grad_check(
            |t, v| Ok(ops::sum(t, &ops::linear(t, &x1, v, Some(&b3))?)),
            &w,
            STEP,
        )?;
        let x2 = x.clone();
        let r3 = grad_check(
            |t, v| Ok(ops::sum(t, &ops::linear(t, &x2, &w1, Some(v))?)),
            &b,
            STEP,
        )?;
        Ok(worst(&[r1, r2, r3]))
    });

    entry!("conv2d", |seed| {
        let mut rng = rng_for(seed, 12);
        let x = Tensor::rand_uniform(&mut rng, &[2, 3, 5, 4], -1.0, 1.0).with_grad();
        let w = Tensor::rand_uniform(&mut rng, &[2, 3, 3, 3], -1.0, 1.0).with_grad();
        let x1 = x.clone();
        let r1 = grad_check(
            |t, v| Ok(ops::sum(t, &ops::conv2d(t, v, &w, 2, 1)?)),
            &x,
            STEP,
        )?;
        let r2 = grad_check(
            |t, v| Ok(ops::sum(t, &ops::conv2d(t, &x1, v, 2, 1)?)),
            &w,
            STEP,
        )?;
        Ok(worst(&[r1, r2]))
    });

    entry!("dynamic_conv_1x1", |seed| {
        let mut rng = rng_for(seed, 13);
        let f = Tensor::rand_uniform(&mut rng, &[2, 3, 2, 2], -1.0, 1.0).with_grad();
        let k = Tensor::rand_uniform(&mut rng, &[2, 3, 3], -1.0, 1.0).with_grad();
        let f1 = f.clone();
        let r1 = grad_check(
            |t, v| Ok(ops::sum(t, &ops::dynamic_conv_1x1(t, v, &k)?)),
            &f,
            STEP,
        )?;
        let r2 = grad_check(
            |t, v| Ok(ops::sum(t, &ops::dynamic_conv_1x1(t, &f1, v)?)),
            &k,
            STEP,
        )?;
        Ok(worst(&[r1, r2]))
    });

    entry!("batch_norm_train", |seed| {
        let mut rng = rng_for(seed, 14);
        let x = Tensor::rand_uniform(&mut rng, &[4, 3, 2, 2], -1.0, 1.0).with_grad();
        let gamma = Tensor::rand_uniform(&mut rng, &[3], 0.5, 1.5).with_grad();
        let beta = Tensor::rand_uniform(&mut rng, &[3], -0.5, 0.5).with_grad();
        let bn = |t: &Tape, x: &Tensor, g: &Tensor, b: &Tensor| {
            let mut stats = ops::BnStats::identity(3);
            ops::batch_norm(t, x, g, b, &mut stats, Mode::Train, 1e-5, 0.1)
        };
        // probe a nonuniform direction: sum() alone has zero gradient
        // through the mean-subtraction
        let probe = Tensor::rand_uniform(&mut rng, &[4, 3, 2, 2], -1.0, 1.0);
        let score = move |t: &Tape, y: &Tensor| -> Result<Tensor> {
            Ok(ops::sum(t, &ops::mul(t, y, &probe)?))
        };
        let (x1, x2) = (x.clone(), x.clone());
        let (g1, g2) = (gamma.clone(), gamma.clone());
        let (b1, b2) = (beta.clone(), beta.clone());
        let r1 = grad_check(|t, v| score(t, &bn(t, v, &g1, &b1)?), &x, STEP)?;
        let r2 = grad_check(|t, v| score(t, &bn(t, &x1, v, &b2)?), &gamma, STEP)?;
        let r3 = grad_check(|t, v| score(t, &bn(t, &x2, &g2, v)?), &beta, STEP)?;
        Ok(worst(&[r1, r2, r3]))
    });

    entry!("batch_norm_eval", |seed| {
        let mut rng = rng_for(seed, 15);
        let x = Tensor::rand_uniform(&mut rng, &[3, 2], -1.0, 1.0).with_grad();
        let gamma = Tensor::rand_uniform(&mut rng, &[2], 0.5, 1.5);
        let beta = Tensor::rand_uniform(&mut rng, &[2], -0.5, 0.5);
        let mean = vec![0.2, -0.1];
        let var = vec![1.3, 0.8];
        grad_check(
            |t, v| {
                let mut stats = ops::BnStats {
                    mean: mean.clone(),
                    var: var.clone(),
                };
                let y = ops::batch_norm(t, v, &gamma, &beta, &mut stats, Mode::Eval, 1e-5, 0.1)?;
                Ok(ops::sum(t, &y))
            },
            &x,
            STEP,
        )
    });

    entry!("global_avg_pool", |seed| {
        let mut rng = rng_for(seed, 16);
        let x = Tensor::rand_uniform(&mut rng, &[2, 3, 3, 2], -1.0, 1.0).with_grad();
        grad_check(
            |t, v| Ok(ops::sum(t, &ops::global_avg_pool(t, v)?)),
            &x,
            STEP,
        )
    });

    entry!("frobenius_normalize", |seed| {
        let mut rng = rng_for(seed, 17);
        let x = Tensor::rand_uniform(&mut rng, &[3, 3], 0.2, 1.0).with_grad();
        let probe = Tensor::rand_uniform(&mut rng, &[9], -1.0, 1.0);
        // project onto a fixed direction so the radial null-space is visible
        grad_check(
            |t, v| {
                let y = ops::frobenius_normalize(t, v, ops::NORM_EPS);
                let flat = ops::reshape(t, &y, &[9])?;
                Ok(ops::sum(t, &ops::mul(t, &flat, &probe)?))
            },
            &x,
            STEP,
        )
    });

    entry!("frobenius_normalize_batched", |seed| {
        let mut rng = rng_for(seed, 18);
        let x = Tensor::rand_uniform(&mut rng, &[2, 4], 0.2, 1.0).with_grad();
        let probe = Tensor::rand_uniform(&mut rng, &[8], -1.0, 1.0);
        grad_check(
            |t, v| {
                let y = ops::frobenius_normalize_batched(t, v, ops::NORM_EPS);
                let flat = ops::reshape(t, &y, &[8])?;
                Ok(ops::sum(t, &ops::mul(t, &flat, &probe)?))
            },
            &x,
            STEP,
        )
    });

    entry!("euclidean_distance", |seed| {
        let mut rng = rng_for(seed, 19);
        let a = Tensor::rand_uniform(&mut rng, &[5], -1.0, 1.0).with_grad();
        let b = Tensor::rand_uniform(&mut rng, &[5], -1.0, 1.0).with_grad();
        let a1 = a.clone();
        let r1 = grad_check(|t, v| ops::euclidean_distance(t, v, &b), &a, STEP)?;
        let r2 = grad_check(|t, v| ops::euclidean_distance(t, &a1, v), &b, STEP)?;
        Ok(worst(&[r1, r2]))
    });

    entry!("log_softmax", |seed| {
        let mut rng = rng_for(seed, 20);
        let x = Tensor::rand_uniform(&mut rng, &[3, 4], -1.0, 1.0).with_grad();
        let probe = Tensor::rand_uniform(&mut rng, &[12], -1.0, 1.0);
        grad_check(
            |t, v| {
                let y = ops::log_softmax(t, v)?;
                let flat = ops::reshape(t, &y, &[12])?;
                Ok(ops::sum(t, &ops::mul(t, &flat, &probe)?))
            },
            &x,
            STEP,
        )
    });

    entry!("reshape", |seed| {
        let mut rng = rng_for(seed, 21);
        let x = Tensor::rand_uniform(&mut rng, &[2, 6], -1.0, 1.0).with_grad();
        let probe = Tensor::rand_uniform(&mut rng, &[3, 4], -1.0, 1.0);
        grad_check(
            |t, v| {
                let y = ops::reshape(t, v, &[3, 4])?;
                Ok(ops::sum(t, &ops::mul(t, &y, &probe)?))
            },
            &x,
            STEP,
        )
    });

    entry!("slice", |seed| {
        let mut rng = rng_for(seed, 22);
        let x = Tensor::rand_uniform(&mut rng, &[8], -1.0, 1.0).with_grad();
        grad_check(
            |t, v| Ok(ops::sum(t, &ops::slice(t, v, 2, 4)?)),
            &x,
            STEP,
        )
    });

    entry!("gather", |seed| {
        let mut rng = rng_for(seed, 23);
        let x = Tensor::rand_uniform(&mut rng, &[6], -1.0, 1.0).with_grad();
        grad_check(
            |t, v| Ok(ops::sum(t, &ops::gather(t, v, &[0, 5, 0, 3])?)),
            &x,
            STEP,
        )
    });

    entry!("concat", |seed| {
        let mut rng = rng_for(seed, 24);
        let a = Tensor::rand_uniform(&mut rng, &[3], -1.0, 1.0).with_grad();
        let b = Tensor::rand_uniform(&mut rng, &[2], -1.0, 1.0);
        grad_check(
            |t, v| Ok(ops::sum(t, &ops::concat(t, &[v, &b])?)),
            &a,
            STEP,
        )
    });

    checks
}

/// Fault-injection fixture for testing the failure path: the forward value
/// equals `sum(x)` but the recorded graph carries gradient 2, because the
/// doubled value is brought back down by a constant (gradient-free) shift.
pub fn injected_fault(tape: &Tape, x: &Tensor) -> Result<Tensor> {
    let doubled = ops::scale(tape, &ops::sum(tape, x), 2.0);
    let correction = -x.data().iter().sum::<f64>();
    Ok(ops::add_scalar(tape, &doubled, correction))
}

fn micro_model(seed: u64, branches: crate::model::BranchSet) -> Result<crate::model::ReidModel> {
    use crate::backbone::BackboneConfig;
    use crate::model::{ModelConfig, ReidModel};
    ReidModel::new(
        ModelConfig {
            backbone: BackboneConfig {
                widths: vec![4, 6],
                strides: vec![2, 2],
                in_channels: 3,
            },
            c_self: 4,
            c_m: 4,
            squeeze: 2,
            num_ids: 2,
            branches,
        },
        seed,
    )
}

/// Loss of one full branch as a function of the input image batch; the
/// finite-difference sweep drives every backward rule on that path.
fn branch_checks() -> Vec<CheckEntry> {
    use crate::backbone::embedding_branch_loss;
    use crate::losses::LossConfig;
    use crate::model::BranchSet;
    use crate::mutual_guided::{mutual_branch_loss, mutual_distance_matrix};

    let labels = [0usize, 0, 1, 1];
    let mut checks: Vec<CheckEntry> = Vec::new();

    checks.push(CheckEntry {
        name: "global_branch",
        run: Box::new(move |seed| {
            let model = micro_model(
                seed,
                BranchSet { global: true, self_guided: false, mutual: false },
            )?;
            let mut rng = rng_for(seed, 30);
            let images = Tensor::rand_uniform(&mut rng, &[4, 3, 4, 4], -1.0, 1.0).with_grad();
            let cfg = LossConfig::new(0.3, 0.1, 2)?;
            grad_check(
                |t, x| {
                    let out = model.forward(t, x, Mode::Train)?;
                    let bl = embedding_branch_loss(
                        t,
                        out.global_emb.as_ref().unwrap(),
                        out.global_logits.as_ref().unwrap(),
                        &labels,
                        &cfg,
                    )?;
                    Ok(bl.loss)
                },
                &images,
                STEP,
            )
        }),
    });

    checks.push(CheckEntry {
        name: "self_branch",
        run: Box::new(move |seed| {
            let model = micro_model(
                seed,
                BranchSet { global: false, self_guided: true, mutual: false },
            )?;
            let mut rng = rng_for(seed, 31);
            let images = Tensor::rand_uniform(&mut rng, &[4, 3, 4, 4], -1.0, 1.0).with_grad();
            let cfg = LossConfig::new(0.3, 0.1, 2)?;
            grad_check(
                |t, x| {
                    let out = model.forward(t, x, Mode::Train)?;
                    let bl = embedding_branch_loss(
                        t,
                        out.self_emb.as_ref().unwrap(),
                        out.self_logits.as_ref().unwrap(),
                        &labels,
                        &cfg,
                    )?;
                    Ok(bl.loss)
                },
                &images,
                STEP,
            )
        }),
    });

    checks.push(CheckEntry {
        name: "mutual_branch",
        run: Box::new(move |seed| {
            let model = micro_model(
                seed,
                BranchSet { global: false, self_guided: false, mutual: true },
            )?;
            let mut rng = rng_for(seed, 32);
            let images = Tensor::rand_uniform(&mut rng, &[4, 3, 4, 4], -1.0, 1.0).with_grad();
            grad_check(
                |t, x| {
                    let out = model.forward(t, x, Mode::Train)?;
                    let distmat = mutual_distance_matrix(
                        t,
                        out.mutual_feats.as_ref().unwrap(),
                        out.mutual_kernels.as_ref().unwrap(),
                    )?;
                    mutual_branch_loss(t, &distmat, &labels, 0.3)
                },
                &images,
                STEP,
            )
        }),
    });

    checks
}

/// Every primitive plus the three full-branch checks; this is what the
/// `gradcheck` subcommand and the acceptance suite run.
pub fn full_registry() -> Vec<CheckEntry> {
    let mut checks = primitive_registry();
    checks.extend(branch_checks());
    checks
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn linear_map_is_exact_to_rounding() {
        let mut rng = rng_for(0, 99);
        let w = Tensor::rand_uniform(&mut rng, &[6], -1.0, 1.0);
        let x = Tensor::rand_uniform(&mut rng, &[6], -1.0, 1.0).with_grad();
        let report = grad_check(
            |t, v| Ok(ops::sum(t, &ops::mul(t, v, &w)?)),
            &x,
            STEP,
        )
        .unwrap();
        assert!(report.max_rel_err < 1e-8, "err {}", report.max_rel_err);
    }

    #[test]
    fn detached_input_is_flagged() {
        let x = Tensor::from_vec(&[3], vec![0.3, -0.4, 0.9]).unwrap(); // no grad
        let report = grad_check(|t, v| Ok(ops::sum(t, &ops::relu(t, v))), &x, STEP).unwrap();
        assert!(report.analytic_zero);
        assert!(report.max_rel_err > TOLERANCE);
    }

    #[test]
    fn composite_chain_matches_finite_differences() {
        // loss = ||relu(W x)||^2 through matvec + relu + mul + sum
        let mut rng = rng_for(1, 98);
        let w = Tensor::rand_uniform(&mut rng, &[4, 3], -1.0, 1.0);
        let x = away_from_zero(&mut rng, &[3]).with_grad();
        let report = grad_check(
            |t, v| {
                let h = ops::relu(t, &ops::matvec(t, &w, v)?);
                Ok(ops::sum(t, &ops::mul(t, &h, &h)?))
            },
            &x,
            STEP,
        )
        .unwrap();
        assert!(report.max_rel_err < 1e-4, "err {}", report.max_rel_err);
    }

    #[test]
    fn branch_checks_pass_on_a_few_seeds() {
        for seed in 0..3 {
            for entry in branch_checks() {
                let report = (entry.run)(seed).unwrap();
                assert!(
                    report.passed(),
                    "{} failed at seed {seed}: {}",
                    entry.name,
                    report.max_rel_err
                );
            }
        }
    }

    #[test]
    fn every_primitive_passes_on_a_few_seeds() {
        for seed in 0..3 {
            for entry in primitive_registry() {
                let report = (entry.run)(seed).unwrap();
                assert!(
                    report.passed(),
                    "{} failed at seed {seed}: {}",
                    entry.name,
                    report.max_rel_err
                );
            }
        }
    }

    #[test]
    fn corrupted_rule_is_caught() {
        let mut rng = rng_for(2, 97);
        let x = Tensor::rand_uniform(&mut rng, &[4], 0.5, 1.0).with_grad();
        let fault = grad_check(crate::gradcheck::injected_fault, &x, STEP).unwrap();
        assert!(!fault.passed(), "fault not detected: {}", fault.max_rel_err);
    }
}
