//! Differentiable primitives.
//!
//! Every function computes its forward value eagerly and records a backward
//! rule on the tape when at least one input is attached. Rules close over
//! the forward values they need (shared `Arc` buffers, never copies of the
//! whole graph).
//!
//! Conventions fixed here:
//! - convolution is cross-correlation (no kernel flip),
//! - ReLU subgradient at 0 is 0,
//! - `euclidean_distance` has subgradient 0 at coincident points,
//! - normalization eps floor is 1e-12.

use std::sync::Arc;

use crate::error::{Error, Result};
use crate::tape::Tape;
use crate::tensor::{idx4, Tensor};
use crate::Mode;

/// Floor used by `frobenius_normalize` and the distance backward.
pub const NORM_EPS: f64 = 1e-12;

// ---- elementwise ----------------------------------------------------------

pub fn relu(tape: &Tape, x: &Tensor) -> Tensor {
    let data: Vec<f64> = x.data().iter().map(|&v| if v > 0.0 { v } else { 0.0 }).collect();
    let out = x.detached_with(data);
    let xs = Arc::clone(x.buffer());
    tape.record(
        &[x],
        out,
        Box::new(move |g, _| {
            let dx = g
                .iter()
                .zip(xs.iter())
                .map(|(&gi, &xi)| if xi > 0.0 { gi } else { 0.0 })
                .collect();
            vec![Some(dx)]
        }),
    )
}

pub fn add(tape: &Tape, a: &Tensor, b: &Tensor) -> Result<Tensor> {
    same_shape(a, b, "add")?;
    let data: Vec<f64> = a.data().iter().zip(b.data()).map(|(x, y)| x + y).collect();
    let out = a.detached_with(data);
    Ok(tape.record(
        &[a, b],
        out,
        Box::new(move |g, needs| {
            vec![
                needs[0].then(|| g.to_vec()),
                needs[1].then(|| g.to_vec()),
            ]
        }),
    ))
}

pub fn sub(tape: &Tape, a: &Tensor, b: &Tensor) -> Result<Tensor> {
    same_shape(a, b, "sub")?;
    let data: Vec<f64> = a.data().iter().zip(b.data()).map(|(x, y)| x - y).collect();
    let out = a.detached_with(data);
    Ok(tape.record(
        &[a, b],
        out,
        Box::new(move |g, needs| {
            vec![
                needs[0].then(|| g.to_vec()),
                needs[1].then(|| g.iter().map(|v| -v).collect()),
            ]
        }),
    ))
}

/// Elementwise (Hadamard) product.
pub fn mul(tape: &Tape, a: &Tensor, b: &Tensor) -> Result<Tensor> {
    same_shape(a, b, "mul")?;
    let data: Vec<f64> = a.data().iter().zip(b.data()).map(|(x, y)| x * y).collect();
    let out = a.detached_with(data);
    let (av, bv) = (Arc::clone(a.buffer()), Arc::clone(b.buffer()));
    Ok(tape.record(
        &[a, b],
        out,
        Box::new(move |g, needs| {
            vec![
                needs[0].then(|| g.iter().zip(bv.iter()).map(|(gi, y)| gi * y).collect()),
                needs[1].then(|| g.iter().zip(av.iter()).map(|(gi, x)| gi * x).collect()),
            ]
        }),
    ))
}

pub fn scale(tape: &Tape, x: &Tensor, c: f64) -> Tensor {
    let data: Vec<f64> = x.data().iter().map(|v| v * c).collect();
    let out = x.detached_with(data);
    tape.record(
        &[x],
        out,
        Box::new(move |g, _| vec![Some(g.iter().map(|v| v * c).collect())]),
    )
}

pub fn add_scalar(tape: &Tape, x: &Tensor, c: f64) -> Tensor {
    let data: Vec<f64> = x.data().iter().map(|v| v + c).collect();
    let out = x.detached_with(data);
    tape.record(&[x], out, Box::new(move |g, _| vec![Some(g.to_vec())]))
}

// ---- reductions -----------------------------------------------------------

pub fn sum(tape: &Tape, x: &Tensor) -> Tensor {
    let total: f64 = x.data().iter().sum();
    let n = x.numel();
    let out = Tensor::scalar(total);
    tape.record(&[x], out, Box::new(move |g, _| vec![Some(vec![g[0]; n])]))
}

pub fn mean(tape: &Tape, x: &Tensor) -> Tensor {
    let n = x.numel();
    let total: f64 = x.data().iter().sum();
    let out = Tensor::scalar(total / n as f64);
    tape.record(
        &[x],
        out,
        Box::new(move |g, _| vec![Some(vec![g[0] / n as f64; n])]),
    )
}

// ---- linear algebra -------------------------------------------------------

pub fn matmul(tape: &Tape, a: &Tensor, b: &Tensor) -> Result<Tensor> {
    if a.rank() != 2 || b.rank() != 2 {
        return Err(Error::ShapeMismatch(format!(
            "matmul wants rank-2 inputs, got {:?} x {:?}",
            a.shape(),
            b.shape()
        )));
    }
    let (m, k) = (a.shape()[0], a.shape()[1]);
    let (k2, n) = (b.shape()[0], b.shape()[1]);
    if k != k2 {
        return Err(Error::ShapeMismatch(format!(
            "matmul inner extents differ: {:?} x {:?}",
            a.shape(),
            b.shape()
        )));
    }
    let (av, bv) = (a.data(), b.data());
    let mut data = vec![0.0; m * n];
    for i in 0..m {
        for l in 0..k {
            let x = av[i * k + l];
            for j in 0..n {
                data[i * n + j] += x * bv[l * n + j];
            }
        }
    }
    let out = Tensor::from_vec(&[m, n], data)?;
    let (ac, bc) = (Arc::clone(a.buffer()), Arc::clone(b.buffer()));
    Ok(tape.record(
        &[a, b],
        out,
        Box::new(move |g, needs| {
            let da = needs[0].then(|| {
                let mut da = vec![0.0; m * k];
                for i in 0..m {
                    for j in 0..n {
                        let gij = g[i * n + j];
                        for l in 0..k {
                            da[i * k + l] += gij * bc[l * n + j];
                        }
                    }
                }
                da
            });
            let db = needs[1].then(|| {
                let mut db = vec![0.0; k * n];
                for i in 0..m {
                    for l in 0..k {
                        let ail = ac[i * k + l];
                        for j in 0..n {
                            db[l * n + j] += ail * g[i * n + j];
                        }
                    }
                }
                db
            });
            vec![da, db]
        }),
    ))
}

/// `a[M,N] * x[N] -> [M]`.
pub fn matvec(tape: &Tape, a: &Tensor, x: &Tensor) -> Result<Tensor> {
    if a.rank() != 2 || x.rank() != 1 || a.shape()[1] != x.shape()[0] {
        return Err(Error::ShapeMismatch(format!(
            "matvec: {:?} x {:?}",
            a.shape(),
            x.shape()
        )));
    }
    let (m, n) = (a.shape()[0], a.shape()[1]);
    let data: Vec<f64> = (0..m)
        .map(|i| (0..n).map(|j| a.data()[i * n + j] * x.data()[j]).sum())
        .collect();
    let out = Tensor::from_vec(&[m], data)?;
    let (ac, xc) = (Arc::clone(a.buffer()), Arc::clone(x.buffer()));
    Ok(tape.record(
        &[a, x],
        out,
        Box::new(move |g, needs| {
            let da = needs[0].then(|| {
                let mut da = vec![0.0; m * n];
                for i in 0..m {
                    for j in 0..n {
                        da[i * n + j] = g[i] * xc[j];
                    }
                }
                da
            });
            let dx = needs[1].then(|| {
                let mut dx = vec![0.0; n];
                for i in 0..m {
                    for j in 0..n {
                        dx[j] += ac[i * n + j] * g[i];
                    }
                }
                dx
            });
            vec![da, dx]
        }),
    ))
}

/// Affine map `x[B,I] * w[O,I]^T (+ bias[O]) -> [B,O]`.
pub fn linear(tape: &Tape, x: &Tensor, w: &Tensor, bias: Option<&Tensor>) -> Result<Tensor> {
    if x.rank() != 2 || w.rank() != 2 || x.shape()[1] != w.shape()[1] {
        return Err(Error::ShapeMismatch(format!(
            "linear: x {:?} vs w {:?}",
            x.shape(),
            w.shape()
        )));
    }
    let (b, i) = (x.shape()[0], x.shape()[1]);
    let o = w.shape()[0];
    if let Some(bt) = bias {
        if bt.shape() != [o] {
            return Err(Error::ShapeMismatch(format!(
                "linear bias {:?} vs out width {o}",
                bt.shape()
            )));
        }
    }
    let mut data = vec![0.0; b * o];
    for bi in 0..b {
        for oi in 0..o {
            let mut acc = 0.0;
            for ii in 0..i {
                acc += x.data()[bi * i + ii] * w.data()[oi * i + ii];
            }
            if let Some(bt) = bias {
                acc += bt.data()[oi];
            }
            data[bi * o + oi] = acc;
        }
    }
    let out = Tensor::from_vec(&[b, o], data)?;
    let (xc, wc) = (Arc::clone(x.buffer()), Arc::clone(w.buffer()));
    let parents: Vec<&Tensor> = match bias {
        Some(bt) => vec![x, w, bt],
        None => vec![x, w],
    };
    let has_bias = bias.is_some();
    Ok(tape.record(
        &parents,
        out,
        Box::new(move |g, needs| {
            let dx = needs[0].then(|| {
                let mut dx = vec![0.0; b * i];
                for bi in 0..b {
                    for oi in 0..o {
                        let gv = g[bi * o + oi];
                        for ii in 0..i {
                            dx[bi * i + ii] += gv * wc[oi * i + ii];
                        }
                    }
                }
                dx
            });
            let dw = needs[1].then(|| {
                let mut dw = vec![0.0; o * i];
                for bi in 0..b {
                    for oi in 0..o {
                        let gv = g[bi * o + oi];
                        for ii in 0..i {
                            dw[oi * i + ii] += gv * xc[bi * i + ii];
                        }
                    }
                }
                dw
            });
            let mut grads = vec![dx, dw];
            if has_bias {
                grads.push(needs[2].then(|| {
                    let mut db = vec![0.0; o];
                    for bi in 0..b {
                        for oi in 0..o {
                            db[oi] += g[bi * o + oi];
                        }
                    }
                    db
                }));
            }
            grads
        }),
    ))
}

// ---- convolution ----------------------------------------------------------

/// Cross-correlation with zero padding.
/// `x[B,Cin,H,W] * w[Cout,Cin,kh,kw] -> [B,Cout,Ho,Wo]`,
/// `Ho = (H + 2*pad - kh) / stride + 1` (floor).
pub fn conv2d(tape: &Tape, x: &Tensor, w: &Tensor, stride: usize, pad: usize) -> Result<Tensor> {
    if x.rank() != 4 || w.rank() != 4 {
        return Err(Error::ShapeMismatch(format!(
            "conv2d wants rank-4 inputs, got {:?} and {:?}",
            x.shape(),
            w.shape()
        )));
    }
    if x.shape()[1] != w.shape()[1] {
        return Err(Error::ShapeMismatch(format!(
            "conv2d channels: input {:?} vs kernel {:?}",
            x.shape(),
            w.shape()
        )));
    }
    if stride == 0 {
        return Err(Error::ShapeMismatch("conv2d stride must be positive".into()));
    }
    let (bsz, cin, h, wd) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let (cout, _, kh, kw) = (w.shape()[0], w.shape()[1], w.shape()[2], w.shape()[3]);
    if kh > h + 2 * pad || kw > wd + 2 * pad {
        return Err(Error::DegenerateOutput(format!(
            "kernel {kh}x{kw} exceeds padded extents {}x{}",
            h + 2 * pad,
            wd + 2 * pad
        )));
    }
    let ho = (h + 2 * pad - kh) / stride + 1;
    let wo = (wd + 2 * pad - kw) / stride + 1;
    if ho < 1 || wo < 1 {
        return Err(Error::DegenerateOutput(format!(
            "output extent {ho}x{wo} for input {h}x{wd}"
        )));
    }

    // im2col formulation: per image, gather kernel taps into a
    // [Cin*kh*kw, Ho*Wo] matrix and run the convolution as one GEMM per
    // image. The backward pass reuses the same column matrix for dW and
    // scatters W^T * g back through col2im for dx.
    let (hp, wp) = (h + 2 * pad, wd + 2 * pad);
    let padded = pad_input(x.data(), bsz, cin, h, wd, pad);
    let taps = cin * kh * kw;
    let positions = ho * wo;
    let wv = w.data();
    let mut data = vec![0.0; bsz * cout * positions];
    let mut cols = vec![0.0; taps * positions];
    for b in 0..bsz {
        im2col(
            &padded[b * cin * hp * wp..(b + 1) * cin * hp * wp],
            &mut cols,
            cin,
            hp,
            wp,
            kh,
            kw,
            stride,
            ho,
            wo,
        );
        gemm_acc(
            wv,
            &cols,
            &mut data[b * cout * positions..(b + 1) * cout * positions],
            cout,
            taps,
            positions,
        );
    }
    let out = Tensor::from_vec(&[bsz, cout, ho, wo], data)?;
    let (xc, wc) = (Arc::clone(x.buffer()), Arc::clone(w.buffer()));
    Ok(tape.record(
        &[x, w],
        out,
        Box::new(move |g, needs| {
            let padded = pad_input(&xc, bsz, cin, h, wd, pad);
            let mut dxp = needs[0].then(|| vec![0.0; padded.len()]);
            let mut dw = needs[1].then(|| vec![0.0; wc.len()]);
            let mut cols = vec![0.0; taps * positions];
            let mut dcols = vec![0.0; taps * positions];
            for b in 0..bsz {
                let gb = &g[b * cout * positions..(b + 1) * cout * positions];
                im2col(
                    &padded[b * cin * hp * wp..(b + 1) * cin * hp * wp],
                    &mut cols,
                    cin,
                    hp,
                    wp,
                    kh,
                    kw,
                    stride,
                    ho,
                    wo,
                );
                if let Some(dw) = dw.as_mut() {
                    // dW[co, t] += sum_p g[co, p] * cols[t, p]
                    for co in 0..cout {
                        let grow = &gb[co * positions..(co + 1) * positions];
                        let wrow = &mut dw[co * taps..(co + 1) * taps];
                        for t in 0..taps {
                            let crow = &cols[t * positions..(t + 1) * positions];
                            let mut acc = 0.0;
                            for p in 0..positions {
                                acc += grow[p] * crow[p];
                            }
                            wrow[t] += acc;
                        }
                    }
                }
                if let Some(dxp) = dxp.as_mut() {
                    // dcols = W^T * g, then scatter back into the padded image
                    dcols.fill(0.0);
                    for co in 0..cout {
                        let grow = &gb[co * positions..(co + 1) * positions];
                        let wrow = &wc[co * taps..(co + 1) * taps];
                        for t in 0..taps {
                            let wval = wrow[t];
                            if wval == 0.0 {
                                continue;
                            }
                            let drow = &mut dcols[t * positions..(t + 1) * positions];
                            for p in 0..positions {
                                drow[p] += wval * grow[p];
                            }
                        }
                    }
                    col2im(
                        &dcols,
                        &mut dxp[b * cin * hp * wp..(b + 1) * cin * hp * wp],
                        cin,
                        hp,
                        wp,
                        kh,
                        kw,
                        stride,
                        ho,
                        wo,
                    );
                }
            }
            let dx = dxp.map(|dxp| unpad_grad(&dxp, bsz, cin, h, wd, pad));
            vec![dx, dw]
        }),
    ))
}

/// Gather kernel taps of one padded image into a `[taps, Ho*Wo]` matrix.
#[allow(clippy::too_many_arguments)]
fn im2col(
    padded: &[f64],
    cols: &mut [f64],
    cin: usize,
    hp: usize,
    wp: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    ho: usize,
    wo: usize,
) {
    let positions = ho * wo;
    for ci in 0..cin {
        for u in 0..kh {
            for v in 0..kw {
                let t = (ci * kh + u) * kw + v;
                let dst = &mut cols[t * positions..(t + 1) * positions];
                for oh in 0..ho {
                    let src = ci * hp * wp + (oh * stride + u) * wp + v;
                    let drow = &mut dst[oh * wo..(oh + 1) * wo];
                    if stride == 1 {
                        drow.copy_from_slice(&padded[src..src + wo]);
                    } else {
                        for (ow, d) in drow.iter_mut().enumerate() {
                            *d = padded[src + ow * stride];
                        }
                    }
                }
            }
        }
    }
}

/// Scatter-add a `[taps, Ho*Wo]` gradient matrix back onto the padded image.
#[allow(clippy::too_many_arguments)]
fn col2im(
    dcols: &[f64],
    dpadded: &mut [f64],
    cin: usize,
    hp: usize,
    wp: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    ho: usize,
    wo: usize,
) {
    let positions = ho * wo;
    for ci in 0..cin {
        for u in 0..kh {
            for v in 0..kw {
                let t = (ci * kh + u) * kw + v;
                let src = &dcols[t * positions..(t + 1) * positions];
                for oh in 0..ho {
                    let dst = ci * hp * wp + (oh * stride + u) * wp + v;
                    let srow = &src[oh * wo..(oh + 1) * wo];
                    for (ow, &s) in srow.iter().enumerate() {
                        dpadded[dst + ow * stride] += s;
                    }
                }
            }
        }
    }
}

/// `out[m, n] += a[m, k] * b[k, n]` with the k-loop in the middle so the
/// inner loop runs contiguously over rows of `b` and `out`.
fn gemm_acc(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let orow = &mut out[i * n..(i + 1) * n];
        for (l, &aval) in arow.iter().enumerate() {
            if aval == 0.0 {
                continue;
            }
            let brow = &b[l * n..(l + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += aval * bv;
            }
        }
    }
}

fn pad_input(x: &[f64], bsz: usize, cin: usize, h: usize, w: usize, pad: usize) -> Vec<f64> {
    if pad == 0 {
        return x.to_vec();
    }
    let (hp, wp) = (h + 2 * pad, w + 2 * pad);
    let mut out = vec![0.0; bsz * cin * hp * wp];
    for bc in 0..bsz * cin {
        for i in 0..h {
            let src = (bc * h + i) * w;
            let dst = bc * hp * wp + (i + pad) * wp + pad;
            out[dst..dst + w].copy_from_slice(&x[src..src + w]);
        }
    }
    out
}

fn unpad_grad(dxp: &[f64], bsz: usize, cin: usize, h: usize, w: usize, pad: usize) -> Vec<f64> {
    if pad == 0 {
        return dxp.to_vec();
    }
    let (hp, wp) = (h + 2 * pad, w + 2 * pad);
    let mut out = vec![0.0; bsz * cin * h * w];
    for bc in 0..bsz * cin {
        for i in 0..h {
            let src = bc * hp * wp + (i + pad) * wp + pad;
            let dst = (bc * h + i) * w;
            out[dst..dst + w].copy_from_slice(&dxp[src..src + w]);
        }
    }
    out
}

/// Per-image 1x1 convolution: each image's channel vectors are multiplied by
/// that image's own kernel. `f` is `[B,C,h,w]` or `[B,C]`; `k` is `[B,C,C]`.
pub fn dynamic_conv_1x1(tape: &Tape, f: &Tensor, k: &Tensor) -> Result<Tensor> {
    if k.rank() != 3 || k.shape()[1] != k.shape()[2] {
        return Err(Error::ShapeMismatch(format!(
            "dynamic kernels must be [B,C,C], got {:?}",
            k.shape()
        )));
    }
    if f.rank() != 2 && f.rank() != 4 {
        return Err(Error::ShapeMismatch(format!(
            "dynamic_conv_1x1 input must be [B,C,h,w] or [B,C], got {:?}",
            f.shape()
        )));
    }
    let bsz = f.shape()[0];
    let c = f.shape()[1];
    if k.shape()[0] != bsz {
        return Err(Error::KernelCountMismatch {
            kernels: k.shape()[0],
            batch: bsz,
        });
    }
    if k.shape()[1] != c {
        return Err(Error::ShapeMismatch(format!(
            "kernel width {} vs channel width {c}",
            k.shape()[1]
        )));
    }
    let spatial: usize = f.shape()[2..].iter().product::<usize>().max(1);
    let fv = f.data();
    let kv = k.data();
    let mut data = vec![0.0; fv.len()];
    for b in 0..bsz {
        let fb = b * c * spatial;
        let kb = b * c * c;
        for o in 0..c {
            for ci in 0..c {
                let kval = kv[kb + o * c + ci];
                if kval == 0.0 {
                    continue;
                }
                for p in 0..spatial {
                    data[fb + o * spatial + p] += kval * fv[fb + ci * spatial + p];
                }
            }
        }
    }
    let out = f.detached_with(data);
    let (fc, kc) = (Arc::clone(f.buffer()), Arc::clone(k.buffer()));
    Ok(tape.record(
        &[f, k],
        out,
        Box::new(move |g, needs| {
            let df = needs[0].then(|| {
                let mut df = vec![0.0; fc.len()];
                for b in 0..bsz {
                    let fb = b * c * spatial;
                    let kb = b * c * c;
                    for o in 0..c {
                        for ci in 0..c {
                            let kval = kc[kb + o * c + ci];
                            for p in 0..spatial {
                                df[fb + ci * spatial + p] += kval * g[fb + o * spatial + p];
                            }
                        }
                    }
                }
                df
            });
            let dk = needs[1].then(|| {
                let mut dk = vec![0.0; kc.len()];
                for b in 0..bsz {
                    let fb = b * c * spatial;
                    let kb = b * c * c;
                    for o in 0..c {
                        for ci in 0..c {
                            let mut acc = 0.0;
                            for p in 0..spatial {
                                acc += fc[fb + ci * spatial + p] * g[fb + o * spatial + p];
                            }
                            dk[kb + o * c + ci] = acc;
                        }
                    }
                }
                dk
            });
            vec![df, dk]
        }),
    ))
}

// ---- normalization --------------------------------------------------------

/// Running statistics owned by a batch-norm layer.
#[derive(Clone, Debug)]
pub struct BnStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

impl BnStats {
    pub fn identity(channels: usize) -> Self {
        BnStats {
            mean: vec![0.0; channels],
            var: vec![1.0; channels],
        }
    }
}

/// Batch normalization over `[B,C]` (per feature) or `[B,C,H,W]` (per
/// channel). Train mode normalizes with batch statistics (biased variance)
/// and updates the running stats in place with momentum `momentum`; eval
/// mode normalizes with the running stats.
pub fn batch_norm(
    tape: &Tape,
    x: &Tensor,
    gamma: &Tensor,
    beta: &Tensor,
    stats: &mut BnStats,
    mode: Mode,
    eps: f64,
    momentum: f64,
) -> Result<Tensor> {
    if x.rank() != 2 && x.rank() != 4 {
        return Err(Error::ShapeMismatch(format!(
            "batch_norm input must be [B,C] or [B,C,H,W], got {:?}",
            x.shape()
        )));
    }
    let bsz = x.shape()[0];
    let c = x.shape()[1];
    let spatial: usize = x.shape()[2..].iter().product::<usize>().max(1);
    if gamma.shape() != [c] || beta.shape() != [c] || stats.mean.len() != c {
        return Err(Error::ShapeMismatch(format!(
            "batch_norm affine extents: gamma {:?}, beta {:?}, stats {}, channels {c}",
            gamma.shape(),
            beta.shape(),
            stats.mean.len()
        )));
    }
    if mode == Mode::Train && bsz < 2 {
        return Err(Error::BatchTooSmall(format!(
            "batch_norm train mode needs B >= 2, got {bsz}"
        )));
    }

    let n = (bsz * spatial) as f64;
    let xv = x.data();

    let (mean, var) = match mode {
        Mode::Train => {
            let mut mean = vec![0.0; c];
            let mut var = vec![0.0; c];
            for b in 0..bsz {
                for ch in 0..c {
                    let base = (b * c + ch) * spatial;
                    for p in 0..spatial {
                        mean[ch] += xv[base + p];
                    }
                }
            }
            for m in mean.iter_mut() {
                *m /= n;
            }
            for b in 0..bsz {
                for ch in 0..c {
                    let base = (b * c + ch) * spatial;
                    for p in 0..spatial {
                        let d = xv[base + p] - mean[ch];
                        var[ch] += d * d;
                    }
                }
            }
            for v in var.iter_mut() {
                *v /= n;
            }
            for ch in 0..c {
                stats.mean[ch] = (1.0 - momentum) * stats.mean[ch] + momentum * mean[ch];
                stats.var[ch] = (1.0 - momentum) * stats.var[ch] + momentum * var[ch];
            }
            (mean, var)
        }
        Mode::Eval => (stats.mean.clone(), stats.var.clone()),
    };

    let inv: Vec<f64> = var.iter().map(|&v| 1.0 / (v + eps).sqrt()).collect();
    let gv = gamma.data();
    let bv = beta.data();
    let mut data = vec![0.0; xv.len()];
    let mut xhat = vec![0.0; xv.len()];
    for b in 0..bsz {
        for ch in 0..c {
            let base = (b * c + ch) * spatial;
            for p in 0..spatial {
                let i = base + p;
                let xh = (xv[i] - mean[ch]) * inv[ch];
                xhat[i] = xh;
                data[i] = gv[ch] * xh + bv[ch];
            }
        }
    }

    let out = x.detached_with(data);
    let xhat = Arc::new(xhat);
    let inv = Arc::new(inv);
    let gc = Arc::clone(gamma.buffer());
    let train = mode == Mode::Train;
    Ok(tape.record(
        &[x, gamma, beta],
        out,
        Box::new(move |g, needs| {
            // Channel sums are shared by every output slot.
            let mut sum_g = vec![0.0; c];
            let mut sum_gx = vec![0.0; c];
            for b in 0..bsz {
                for ch in 0..c {
                    let base = (b * c + ch) * spatial;
                    for p in 0..spatial {
                        sum_g[ch] += g[base + p];
                        sum_gx[ch] += g[base + p] * xhat[base + p];
                    }
                }
            }
            let dx = needs[0].then(|| {
                let mut dx = vec![0.0; g.len()];
                for b in 0..bsz {
                    for ch in 0..c {
                        let base = (b * c + ch) * spatial;
                        for p in 0..spatial {
                            let i = base + p;
                            dx[i] = if train {
                                gc[ch] * inv[ch]
                                    * (g[i] - sum_g[ch] / n - xhat[i] * sum_gx[ch] / n)
                            } else {
                                gc[ch] * inv[ch] * g[i]
                            };
                        }
                    }
                }
                dx
            });
            vec![
                dx,
                needs[1].then(|| sum_gx.clone()),
                needs[2].then(|| sum_g.clone()),
            ]
        }),
    ))
}

/// Per-channel spatial mean: `[B,C,H,W] -> [B,C]`.
pub fn global_avg_pool(tape: &Tape, x: &Tensor) -> Result<Tensor> {
    if x.rank() != 4 {
        return Err(Error::ShapeMismatch(format!(
            "global_avg_pool wants [B,C,H,W], got {:?}",
            x.shape()
        )));
    }
    let (bsz, c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let area = (h * w) as f64;
    let xv = x.data();
    let mut data = vec![0.0; bsz * c];
    for b in 0..bsz {
        for ch in 0..c {
            let base = (b * c + ch) * h * w;
            data[b * c + ch] = xv[base..base + h * w].iter().sum::<f64>() / area;
        }
    }
    let out = Tensor::from_vec(&[bsz, c], data)?;
    Ok(tape.record(
        &[x],
        out,
        Box::new(move |g, _| {
            let mut dx = vec![0.0; bsz * c * h * w];
            for b in 0..bsz {
                for ch in 0..c {
                    let gv = g[b * c + ch] / area;
                    let base = (b * c + ch) * h * w;
                    for p in 0..h * w {
                        dx[base + p] = gv;
                    }
                }
            }
            vec![Some(dx)]
        }),
    ))
}

fn normalize_rows_impl(tape: &Tape, x: &Tensor, rows: usize, eps: f64) -> Tensor {
    let row_len = x.numel() / rows;
    let xv = x.data();
    let mut norms = vec![0.0; rows];
    let mut data = vec![0.0; xv.len()];
    for r in 0..rows {
        let base = r * row_len;
        let norm = xv[base..base + row_len]
            .iter()
            .map(|v| v * v)
            .sum::<f64>()
            .sqrt();
        norms[r] = norm;
        let denom = norm.max(eps);
        for i in 0..row_len {
            data[base + i] = xv[base + i] / denom;
        }
    }
    let out = x.detached_with(data.clone());
    let y = Arc::new(data);
    tape.record(
        &[x],
        out,
        Box::new(move |g, _| {
            let mut dx = vec![0.0; g.len()];
            for r in 0..rows {
                let base = r * row_len;
                if norms[r] >= eps {
                    // y = x/||x||: project out the radial component.
                    let dot: f64 = (0..row_len).map(|i| g[base + i] * y[base + i]).sum();
                    for i in 0..row_len {
                        dx[base + i] = (g[base + i] - y[base + i] * dot) / norms[r];
                    }
                } else {
                    // Below the floor the map is linear: y = x/eps.
                    for i in 0..row_len {
                        dx[base + i] = g[base + i] / eps;
                    }
                }
            }
            vec![Some(dx)]
        }),
    )
}

/// Scale the whole tensor to unit Frobenius norm, `k / max(||k||_F, eps)`.
pub fn frobenius_normalize(tape: &Tape, k: &Tensor, eps: f64) -> Tensor {
    normalize_rows_impl(tape, k, 1, eps)
}

/// Normalize each slice along the leading axis independently; used to turn a
/// batch of generated kernels `[B, C*C]` into unit-Frobenius kernels.
pub fn frobenius_normalize_batched(tape: &Tape, k: &Tensor, eps: f64) -> Tensor {
    normalize_rows_impl(tape, k, k.shape()[0], eps)
}

/// `||a - b||_2` for rank-1 tensors of equal length, as a shape-`[1]` tensor.
pub fn euclidean_distance(tape: &Tape, a: &Tensor, b: &Tensor) -> Result<Tensor> {
    if a.rank() != 1 || b.rank() != 1 || a.shape() != b.shape() {
        return Err(Error::ShapeMismatch(format!(
            "euclidean_distance: {:?} vs {:?}",
            a.shape(),
            b.shape()
        )));
    }
    let d = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt();
    let out = Tensor::scalar(d);
    let (ac, bc) = (Arc::clone(a.buffer()), Arc::clone(b.buffer()));
    Ok(tape.record(
        &[a, b],
        out,
        Box::new(move |g, needs| {
            // Subgradient 0 at coincident points via the eps floor.
            let scale = g[0] / d.max(NORM_EPS);
            let da: Vec<f64> = ac
                .iter()
                .zip(bc.iter())
                .map(|(x, y)| scale * (x - y))
                .collect();
            let db = needs[1].then(|| da.iter().map(|v| -v).collect());
            vec![needs[0].then_some(da), db]
        }),
    ))
}

// ---- softmax --------------------------------------------------------------

/// Numerically stable row-wise log-softmax on `[B,C]`.
pub fn log_softmax(tape: &Tape, x: &Tensor) -> Result<Tensor> {
    if x.rank() != 2 {
        return Err(Error::ShapeMismatch(format!(
            "log_softmax wants [B,C], got {:?}",
            x.shape()
        )));
    }
    let (b, c) = (x.shape()[0], x.shape()[1]);
    let xv = x.data();
    let mut data = vec![0.0; b * c];
    for r in 0..b {
        let row = &xv[r * c..(r + 1) * c];
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
        for j in 0..c {
            data[r * c + j] = row[j] - lse;
        }
    }
    let out = Tensor::from_vec(&[b, c], data.clone())?;
    let ls = Arc::new(data);
    Ok(tape.record(
        &[x],
        out,
        Box::new(move |g, _| {
            let mut dx = vec![0.0; g.len()];
            for r in 0..b {
                let gsum: f64 = g[r * c..(r + 1) * c].iter().sum();
                for j in 0..c {
                    let i = r * c + j;
                    dx[i] = g[i] - ls[i].exp() * gsum;
                }
            }
            vec![Some(dx)]
        }),
    ))
}

// ---- shape plumbing -------------------------------------------------------

/// Gradient-transparent reshape.
pub fn reshape(tape: &Tape, x: &Tensor, shape: &[usize]) -> Result<Tensor> {
    let out = x.reshaped(shape)?;
    Ok(tape.record(&[x], out, Box::new(move |g, _| vec![Some(g.to_vec())])))
}

/// Contiguous slice of the flattened buffer, as a rank-1 tensor.
pub fn slice(tape: &Tape, x: &Tensor, start: usize, len: usize) -> Result<Tensor> {
    if start + len > x.numel() || len == 0 {
        return Err(Error::ShapeMismatch(format!(
            "slice [{start}, {}) of {} elements",
            start + len,
            x.numel()
        )));
    }
    let total = x.numel();
    let out = Tensor::from_vec(&[len], x.data()[start..start + len].to_vec())?;
    Ok(tape.record(
        &[x],
        out,
        Box::new(move |g, _| {
            let mut dx = vec![0.0; total];
            dx[start..start + len].copy_from_slice(g);
            vec![Some(dx)]
        }),
    ))
}

/// Pick flat indices out of `x`; repeated indices scatter-add in backward.
pub fn gather(tape: &Tape, x: &Tensor, indices: &[usize]) -> Result<Tensor> {
    if indices.is_empty() {
        return Err(Error::ShapeMismatch("gather of zero indices".into()));
    }
    if let Some(&bad) = indices.iter().find(|&&i| i >= x.numel()) {
        return Err(Error::ShapeMismatch(format!(
            "gather index {bad} out of range for {} elements",
            x.numel()
        )));
    }
    let total = x.numel();
    let idx = indices.to_vec();
    let data: Vec<f64> = idx.iter().map(|&i| x.data()[i]).collect();
    let out = Tensor::from_vec(&[idx.len()], data)?;
    Ok(tape.record(
        &[x],
        out,
        Box::new(move |g, _| {
            let mut dx = vec![0.0; total];
            for (pos, &i) in idx.iter().enumerate() {
                dx[i] += g[pos];
            }
            vec![Some(dx)]
        }),
    ))
}

/// Concatenate rank-1 tensors into one rank-1 tensor.
pub fn concat(tape: &Tape, parts: &[&Tensor]) -> Result<Tensor> {
    if parts.is_empty() {
        return Err(Error::ShapeMismatch("concat of zero tensors".into()));
    }
    if let Some(p) = parts.iter().find(|p| p.rank() != 1) {
        return Err(Error::ShapeMismatch(format!(
            "concat wants rank-1 parts, got {:?}",
            p.shape()
        )));
    }
    let lens: Vec<usize> = parts.iter().map(|p| p.numel()).collect();
    let mut data = Vec::with_capacity(lens.iter().sum());
    for p in parts {
        data.extend_from_slice(p.data());
    }
    let out = Tensor::from_vec(&[data.len()], data)?;
    Ok(tape.record(
        parts,
        out,
        Box::new(move |g, needs| {
            let mut grads = Vec::with_capacity(lens.len());
            let mut offset = 0;
            for (i, &len) in lens.iter().enumerate() {
                grads.push(needs[i].then(|| g[offset..offset + len].to_vec()));
                offset += len;
            }
            grads
        }),
    ))
}

fn same_shape(a: &Tensor, b: &Tensor, what: &str) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::ShapeMismatch(format!(
            "{what}: {:?} vs {:?}",
            a.shape(),
            b.shape()
        )));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn assert_close(actual: &[f64], expected: &[f64], tol: f64) {
        assert_eq!(actual.len(), expected.len());
        for (i, (a, e)) in actual.iter().zip(expected).enumerate() {
            assert!(
                (a - e).abs() <= tol,
                "index {i}: {a} vs {e} (diff {})",
                (a - e).abs()
            );
        }
    }

    #[test]
    fn matmul_identity_passes_through() {
        let tape = Tape::new();
        let eye = Tensor::from_vec(&[3, 3], vec![1., 0., 0., 0., 1., 0., 0., 0., 1.]).unwrap();
        let b = Tensor::from_vec(&[3, 2], vec![1., 2., 3., 4., 5., 6.]).unwrap();
        let y = matmul(&tape, &eye, &b).unwrap();
        assert_eq!(y.data(), b.data());
    }

    #[test]
    fn matmul_small_case() {
        let tape = Tape::new();
        let a = Tensor::from_vec(&[2, 2], vec![1., 2., 3., 4.]).unwrap();
        let b = Tensor::from_vec(&[2, 1], vec![1., 1.]).unwrap();
        let y = matmul(&tape, &a, &b).unwrap();
        assert_eq!(y.shape(), &[2, 1]);
        assert_eq!(y.data(), &[3.0, 7.0]);
    }

    #[test]
    fn matmul_rejects_inner_mismatch() {
        let tape = Tape::new();
        let a = Tensor::zeros(&[2, 3]);
        let b = Tensor::zeros(&[2, 3]);
        assert!(matches!(
            matmul(&tape, &a, &b),
            Err(Error::ShapeMismatch(_))
        ));
    }

    #[test]
    fn relu_trivial_cases() {
        let tape = Tape::new();
        let neg = Tensor::from_vec(&[3], vec![-1.0, -0.5, -3.0]).unwrap();
        assert_eq!(relu(&tape, &neg).data(), &[0.0, 0.0, 0.0]);
        let pos = Tensor::from_vec(&[3], vec![0.0, 0.5, 3.0]).unwrap();
        assert_eq!(relu(&tape, &pos).data(), &[0.0, 0.5, 3.0]);
    }

    // Independent sliding-window oracle: materializes the zero-padded image
    // and sums explicitly. Kept separate from the implicit-bounds kernel in
    // `conv2d` so the two can disagree.
    fn conv2d_oracle(
        x: &Tensor,
        w: &Tensor,
        stride: usize,
        pad: usize,
    ) -> (Vec<usize>, Vec<f64>) {
        let (bsz, cin, h, wd) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
        let (cout, _, kh, kw) = (w.shape()[0], w.shape()[1], w.shape()[2], w.shape()[3]);
        let (hp, wp) = (h + 2 * pad, wd + 2 * pad);
        let mut padded = vec![0.0; bsz * cin * hp * wp];
        for b in 0..bsz {
            for c in 0..cin {
                for i in 0..h {
                    for j in 0..wd {
                        padded[((b * cin + c) * hp + i + pad) * wp + j + pad] =
                            x.data()[((b * cin + c) * h + i) * wd + j];
                    }
                }
            }
        }
        let ho = (hp - kh) / stride + 1;
        let wo = (wp - kw) / stride + 1;
        let mut out = vec![0.0; bsz * cout * ho * wo];
        for b in 0..bsz {
            for co in 0..cout {
                for oh in 0..ho {
                    for ow in 0..wo {
                        let mut acc = 0.0;
                        for ci in 0..cin {
                            for u in 0..kh {
                                for v in 0..kw {
                                    acc += padded
                                        [((b * cin + ci) * hp + oh * stride + u) * wp
                                            + ow * stride
                                            + v]
                                        * w.data()[((co * cin + ci) * kh + u) * kw + v];
                                }
                            }
                        }
                        out[((b * cout + co) * ho + oh) * wo + ow] = acc;
                    }
                }
            }
        }
        (vec![bsz, cout, ho, wo], out)
    }

    #[test]
    fn conv2d_channel_identity_kernel_is_identity() {
        let tape = Tape::new();
        let x = Tensor::from_vec(&[1, 2, 2, 2], (1..=8).map(|v| v as f64).collect()).unwrap();
        // 1x1 kernel = channel identity
        let w = Tensor::from_vec(&[2, 2, 1, 1], vec![1., 0., 0., 1.]).unwrap();
        let y = conv2d(&tape, &x, &w, 1, 0).unwrap();
        assert_eq!(y.shape(), x.shape());
        assert_close(y.data(), x.data(), 1e-12);
    }

    #[test]
    fn conv2d_all_ones_sums_window() {
        let tape = Tape::new();
        let x = Tensor::full(&[1, 1, 3, 3], 1.0);
        let w = Tensor::full(&[1, 1, 3, 3], 1.0);
        let y = conv2d(&tape, &x, &w, 1, 0).unwrap();
        assert_eq!(y.shape(), &[1, 1, 1, 1]);
        assert_eq!(y.value(), 9.0);
    }

    #[test]
    fn conv2d_matches_padded_oracle() {
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
        let tape = Tape::new();
        let x = Tensor::rand_uniform(&mut rng, &[2, 3, 5, 4], -1.0, 1.0);
        let w = Tensor::rand_uniform(&mut rng, &[4, 3, 3, 3], -1.0, 1.0);
        for &(stride, pad) in &[(1usize, 0usize), (1, 1), (2, 1)] {
            let y = conv2d(&tape, &x, &w, stride, pad).unwrap();
            let (oshape, ovals) = conv2d_oracle(&x, &w, stride, pad);
            assert_eq!(y.shape(), &oshape[..]);
            assert_close(y.data(), &ovals, 1e-12);
        }
    }

    #[test]
    fn conv2d_rejects_degenerate_output() {
        let tape = Tape::new();
        let x = Tensor::zeros(&[1, 1, 2, 2]);
        let w = Tensor::zeros(&[1, 1, 5, 5]);
        assert!(matches!(
            conv2d(&tape, &x, &w, 1, 0),
            Err(Error::DegenerateOutput(_))
        ));
    }

    #[test]
    fn conv2d_rejects_channel_mismatch() {
        let tape = Tape::new();
        let x = Tensor::zeros(&[1, 2, 4, 4]);
        let w = Tensor::zeros(&[1, 3, 3, 3]);
        assert!(matches!(
            conv2d(&tape, &x, &w, 1, 0),
            Err(Error::ShapeMismatch(_))
        ));
    }

    #[test]
    fn pool_constant_map() {
        let tape = Tape::new();
        let x = Tensor::full(&[2, 3, 2, 2], 1.5);
        let y = global_avg_pool(&tape, &x).unwrap();
        assert_eq!(y.shape(), &[2, 3]);
        assert!(y.data().iter().all(|&v| v == 1.5));
    }

    #[test]
    fn pool_small_case() {
        let tape = Tape::new();
        let x = Tensor::from_vec(&[1, 1, 2, 2], vec![1., 2., 3., 4.]).unwrap();
        let y = global_avg_pool(&tape, &x).unwrap();
        assert_eq!(y.value(), 2.5);
    }

    #[test]
    fn pool_backward_is_uniform() {
        let tape = Tape::new();
        let x = tape.leaf(&Tensor::zeros(&[1, 1, 2, 2]).with_grad());
        let y = global_avg_pool(&tape, &x).unwrap();
        let loss = sum(&tape, &y);
        tape.backward(&loss).unwrap();
        assert_eq!(tape.grad_of(&x).unwrap(), vec![0.25; 4]);
    }

    #[test]
    fn frobenius_unit_norm_unchanged() {
        let tape = Tape::new();
        let k = Tensor::from_vec(&[2, 2], vec![0.5, 0.5, 0.5, 0.5]).unwrap();
        let y = frobenius_normalize(&tape, &k, NORM_EPS);
        assert_close(y.data(), k.data(), 1e-12);
    }

    #[test]
    fn frobenius_zero_tensor_stays_zero() {
        let tape = Tape::new();
        let k = Tensor::zeros(&[3, 3]);
        let y = frobenius_normalize(&tape, &k, NORM_EPS);
        assert!(y.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn frobenius_random_output_norm_is_one() {
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(7);
        let tape = Tape::new();
        for _ in 0..20 {
            let k = Tensor::rand_uniform(&mut rng, &[4, 4], -2.0, 2.0);
            let y = frobenius_normalize(&tape, &k, NORM_EPS);
            let norm = y.data().iter().map(|v| v * v).sum::<f64>().sqrt();
            assert!((norm - 1.0).abs() < 1e-6, "norm {norm}");
        }
    }

    #[test]
    fn euclidean_trivial_cases() {
        let tape = Tape::new();
        let a = Tensor::from_vec(&[2], vec![0.0, 0.0]).unwrap();
        let b = Tensor::from_vec(&[2], vec![3.0, 4.0]).unwrap();
        assert_eq!(euclidean_distance(&tape, &a, &b).unwrap().value(), 5.0);
        assert_eq!(euclidean_distance(&tape, &a, &a).unwrap().value(), 0.0);
        // symmetric in arguments
        assert_eq!(
            euclidean_distance(&tape, &b, &a).unwrap().value(),
            euclidean_distance(&tape, &a, &b).unwrap().value()
        );
    }

    #[test]
    fn euclidean_matches_sum_of_squares_oracle() {
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let tape = Tape::new();
        for _ in 0..10 {
            let a = Tensor::rand_uniform(&mut rng, &[6], -1.0, 1.0);
            let b = Tensor::rand_uniform(&mut rng, &[6], -1.0, 1.0);
            let d = euclidean_distance(&tape, &a, &b).unwrap().value();
            let oracle = a
                .data()
                .iter()
                .zip(b.data())
                .map(|(x, y)| (x - y).powi(2))
                .sum::<f64>()
                .sqrt();
            assert!((d - oracle).abs() < 1e-12);
        }
    }

    #[test]
    fn euclidean_rejects_length_mismatch() {
        let tape = Tape::new();
        let a = Tensor::zeros(&[2]);
        let b = Tensor::zeros(&[3]);
        assert!(euclidean_distance(&tape, &a, &b).is_err());
    }

    #[test]
    fn batch_norm_already_standardized_input_passes_through() {
        let tape = Tape::new();
        // two samples, one channel: mean 0, biased variance 1
        let x = Tensor::from_vec(&[2, 1], vec![-1.0, 1.0]).unwrap();
        let gamma = Tensor::full(&[1], 1.0);
        let beta = Tensor::zeros(&[1]);
        let mut stats = BnStats::identity(1);
        let y = batch_norm(&tape, &x, &gamma, &beta, &mut stats, Mode::Train, 1e-5, 0.1).unwrap();
        assert_close(y.data(), x.data(), 1e-4);
    }

    #[test]
    fn batch_norm_constant_input_gives_beta() {
        let tape = Tape::new();
        let x = Tensor::full(&[3, 2], 7.0);
        let gamma = Tensor::full(&[2], 1.0);
        let beta = Tensor::from_vec(&[2], vec![0.5, -0.5]).unwrap();
        let mut stats = BnStats::identity(2);
        let y = batch_norm(&tape, &x, &gamma, &beta, &mut stats, Mode::Train, 1e-5, 0.1).unwrap();
        for b in 0..3 {
            assert_close(&y.data()[b * 2..(b + 1) * 2], beta.data(), 1e-12);
        }
    }

    #[test]
    fn batch_norm_standardizes_random_input() {
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(5);
        let tape = Tape::new();
        let x = Tensor::rand_uniform(&mut rng, &[8, 3, 2, 2], -2.0, 3.0);
        let gamma = Tensor::full(&[3], 1.0);
        let beta = Tensor::zeros(&[3]);
        let mut stats = BnStats::identity(3);
        let y = batch_norm(&tape, &x, &gamma, &beta, &mut stats, Mode::Train, 1e-8, 0.1).unwrap();
        // direct statistics oracle over the output
        for ch in 0..3 {
            let mut vals = Vec::new();
            for b in 0..8 {
                let base = (b * 3 + ch) * 4;
                vals.extend_from_slice(&y.data()[base..base + 4]);
            }
            let n = vals.len() as f64;
            let mean: f64 = vals.iter().sum::<f64>() / n;
            let var: f64 = vals.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
            assert!(mean.abs() < 1e-6, "channel {ch} mean {mean}");
            assert!((var - 1.0).abs() < 1e-4, "channel {ch} var {var}");
        }
    }

    #[test]
    fn batch_norm_rejects_small_train_batch() {
        let tape = Tape::new();
        let x = Tensor::zeros(&[1, 2]);
        let gamma = Tensor::full(&[2], 1.0);
        let beta = Tensor::zeros(&[2]);
        let mut stats = BnStats::identity(2);
        assert!(matches!(
            batch_norm(&tape, &x, &gamma, &beta, &mut stats, Mode::Train, 1e-5, 0.1),
            Err(Error::BatchTooSmall(_))
        ));
        // eval mode is fine with B = 1
        assert!(
            batch_norm(&tape, &x, &gamma, &beta, &mut stats, Mode::Eval, 1e-5, 0.1).is_ok()
        );
    }

    #[test]
    fn dynamic_conv_identity_kernels() {
        let tape = Tape::new();
        let f = Tensor::from_vec(&[2, 2, 1, 2], (1..=8).map(|v| v as f64).collect()).unwrap();
        let eye = Tensor::from_vec(&[2, 2, 2], vec![1., 0., 0., 1., 1., 0., 0., 1.]).unwrap();
        let y = dynamic_conv_1x1(&tape, &f, &eye).unwrap();
        assert_close(y.data(), f.data(), 1e-12);
        // alpha * identity scales
        let scaled = Tensor::from_vec(&[2, 2, 2], vec![2., 0., 0., 2., 2., 0., 0., 2.]).unwrap();
        let y2 = dynamic_conv_1x1(&tape, &f, &scaled).unwrap();
        let expect: Vec<f64> = f.data().iter().map(|v| 2.0 * v).collect();
        assert_close(y2.data(), &expect, 1e-12);
    }

    #[test]
    fn dynamic_conv_matches_per_image_matmul_oracle() {
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(13);
        let tape = Tape::new();
        let f = Tensor::rand_uniform(&mut rng, &[2, 3, 2, 2], -1.0, 1.0);
        let k = Tensor::rand_uniform(&mut rng, &[2, 3, 3], -1.0, 1.0);
        let y = dynamic_conv_1x1(&tape, &f, &k).unwrap();
        for b in 0..2 {
            for o in 0..3 {
                for p in 0..4 {
                    let mut acc = 0.0;
                    for c in 0..3 {
                        acc += k.data()[b * 9 + o * 3 + c] * f.data()[(b * 3 + c) * 4 + p];
                    }
                    assert!((y.data()[(b * 3 + o) * 4 + p] - acc).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn dynamic_conv_rejects_kernel_count_mismatch() {
        let tape = Tape::new();
        let f = Tensor::zeros(&[3, 2]);
        let k = Tensor::zeros(&[2, 2, 2]);
        assert!(matches!(
            dynamic_conv_1x1(&tape, &f, &k),
            Err(Error::KernelCountMismatch { kernels: 2, batch: 3 })
        ));
    }

    #[test]
    fn dynamic_conv_is_linear_in_features() {
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(17);
        let tape = Tape::new();
        let k = Tensor::rand_uniform(&mut rng, &[2, 4, 4], -1.0, 1.0);
        let x = Tensor::rand_uniform(&mut rng, &[2, 4], -1.0, 1.0);
        let y = Tensor::rand_uniform(&mut rng, &[2, 4], -1.0, 1.0);
        let (alpha, beta) = (0.7, -1.3);
        let mix_data: Vec<f64> = x
            .data()
            .iter()
            .zip(y.data())
            .map(|(a, b)| alpha * a + beta * b)
            .collect();
        let mix = Tensor::from_vec(&[2, 4], mix_data).unwrap();
        let lhs = dynamic_conv_1x1(&tape, &mix, &k).unwrap();
        let fx = dynamic_conv_1x1(&tape, &x, &k).unwrap();
        let fy = dynamic_conv_1x1(&tape, &y, &k).unwrap();
        for i in 0..8 {
            let rhs = alpha * fx.data()[i] + beta * fy.data()[i];
            assert!((lhs.data()[i] - rhs).abs() < 1e-10);
        }
    }

    #[test]
    fn log_softmax_rows_sum_to_one_in_prob_space() {
        let tape = Tape::new();
        let x = Tensor::from_vec(&[2, 3], vec![1.0, 2.0, 3.0, -5.0, 0.0, 5.0]).unwrap();
        let y = log_softmax(&tape, &x).unwrap();
        for r in 0..2 {
            let s: f64 = y.data()[r * 3..(r + 1) * 3].iter().map(|v| v.exp()).sum();
            assert!((s - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn gather_and_concat_roundtrip() {
        let tape = Tape::new();
        let x = Tensor::from_vec(&[4], vec![1., 2., 3., 4.]).unwrap();
        let g = gather(&tape, &x, &[3, 0, 0]).unwrap();
        assert_eq!(g.data(), &[4.0, 1.0, 1.0]);
        let a = Tensor::from_vec(&[2], vec![5.0, 6.0]).unwrap();
        let c = concat(&tape, &[&g, &a]).unwrap();
        assert_eq!(c.data(), &[4.0, 1.0, 1.0, 5.0, 6.0]);
    }

    #[test]
    fn gather_backward_scatter_adds() {
        let tape = Tape::new();
        let x = tape.leaf(&Tensor::from_vec(&[3], vec![1., 2., 3.]).unwrap().with_grad());
        let g = gather(&tape, &x, &[0, 0, 2]).unwrap();
        let loss = sum(&tape, &g);
        tape.backward(&loss).unwrap();
        assert_eq!(tape.grad_of(&x).unwrap(), vec![2.0, 0.0, 1.0]);
    }

    #[test]
    fn slice_backward_fills_range() {
        let tape = Tape::new();
        let x = tape.leaf(&Tensor::from_vec(&[5], vec![1., 2., 3., 4., 5.]).unwrap().with_grad());
        let s = slice(&tape, &x, 1, 3).unwrap();
        assert_eq!(s.data(), &[2.0, 3.0, 4.0]);
        let loss = sum(&tape, &s);
        tape.backward(&loss).unwrap();
        assert_eq!(tape.grad_of(&x).unwrap(), vec![0.0, 1.0, 1.0, 1.0, 0.0]);
    }
}
