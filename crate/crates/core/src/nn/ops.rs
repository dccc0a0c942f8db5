//! Forward and backward kernels for every layer primitive.
//!
//! Convolution transpose is implemented as the exact adjoint of `conv2d`
//! (same weight tensor, scatter instead of gather), so the inner-product
//! identity `<conv(x), y> == <x, conv_t(y)>` holds by construction.

use rayon::prelude::*;

use crate::nn::tensor::Tensor;
use crate::nn::NnError;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Pad {
    Same,
    Valid,
}

/// Output length and leading pad for one spatial dimension.
fn out_dim(h: usize, k: usize, stride: usize, pad: Pad) -> Result<(usize, usize), NnError> {
    match pad {
        Pad::Same => {
            let out = (h + stride - 1) / stride;
            let needed = (out - 1) * stride + k;
            let total = needed.saturating_sub(h);
            Ok((out, total / 2))
        }
        Pad::Valid => {
            if h < k {
                return Err(NnError::ShapeMismatch {
                    expected: format!("input dim >= kernel {}", k),
                    actual: format!("{}", h),
                });
            }
            Ok(((h - k) / stride + 1, 0))
        }
    }
}

fn check_rank4(x: &Tensor, what: &str) -> Result<(), NnError> {
    if x.rank() != 4 {
        return Err(NnError::ShapeMismatch {
            expected: format!("rank-4 tensor for {}", what),
            actual: format!("rank {} ({:?})", x.rank(), x.shape()),
        });
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// conv2d
// ---------------------------------------------------------------------------

/// 2-D convolution. `x: [B,C,H,W]`, `w: [O,C,K,K]`, `bias: [O]`.
pub fn conv2d(x: &Tensor, w: &Tensor, bias: &Tensor, stride: usize, pad: Pad) -> Result<Tensor, NnError> {
    check_rank4(x, "conv2d input")?;
    check_rank4(w, "conv2d weight")?;
    let (b_n, c, h, wd) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let (o, wc, k, k2) = (w.shape()[0], w.shape()[1], w.shape()[2], w.shape()[3]);
    if wc != c || k != k2 || bias.numel() != o {
        return Err(NnError::ShapeMismatch {
            expected: format!("weight [O,{},K,K] and bias [O] for input {:?}", c, x.shape()),
            actual: format!("weight {:?}, bias {:?}", w.shape(), bias.shape()),
        });
    }
    let (ho, pb_h) = out_dim(h, k, stride, pad)?;
    let (wo, pb_w) = out_dim(wd, k, stride, pad)?;

    let mut out = vec![0.0; b_n * o * ho * wo];
    let xs = x.data();
    let ws = w.data();
    let bs = bias.data();
    out.par_chunks_mut(o * ho * wo).enumerate().for_each(|(b, yb)| {
        let xb = &xs[b * c * h * wd..(b + 1) * c * h * wd];
        for oc in 0..o {
            let yo = &mut yb[oc * ho * wo..(oc + 1) * ho * wo];
            yo.fill(bs[oc]);
            for ic in 0..c {
                let xc = &xb[ic * h * wd..(ic + 1) * h * wd];
                for ki in 0..k {
                    for kj in 0..k {
                        let wv = ws[((oc * c + ic) * k + ki) * k + kj];
                        if wv == 0.0 {
                            continue;
                        }
                        accumulate_gather(yo, xc, wv, ho, wo, h, wd, stride, ki, kj, pb_h, pb_w);
                    }
                }
            }
        }
    });
    Tensor::new(vec![b_n, o, ho, wo], out)
}

#[inline]
#[allow(clippy::too_many_arguments)]
fn accumulate_gather(
    yo: &mut [f64],
    xc: &[f64],
    wv: f64,
    ho: usize,
    wo: usize,
    h: usize,
    w: usize,
    stride: usize,
    ki: usize,
    kj: usize,
    pb_h: usize,
    pb_w: usize,
) {
    for i in 0..ho {
        let ih = (i * stride + ki) as isize - pb_h as isize;
        if ih < 0 || ih >= h as isize {
            continue;
        }
        let xrow = &xc[ih as usize * w..ih as usize * w + w];
        let yrow = &mut yo[i * wo..i * wo + wo];
        for (j, y) in yrow.iter_mut().enumerate() {
            let jw = (j * stride + kj) as isize - pb_w as isize;
            if jw < 0 || jw >= w as isize {
                continue;
            }
            *y += wv * xrow[jw as usize];
        }
    }
}

/// Gradient of conv2d output w.r.t. its input: scatter `g: [B,O,Ho,Wo]`
/// back through `w: [O,C,K,K]` onto an input of spatial size `(h, w)`.
fn conv_input_grad_core(
    g: &Tensor,
    w: &Tensor,
    stride: usize,
    pb_h: usize,
    pb_w: usize,
    h: usize,
    wd: usize,
) -> Tensor {
    let (b_n, o, ho, wo) = (g.shape()[0], g.shape()[1], g.shape()[2], g.shape()[3]);
    let c = w.shape()[1];
    let k = w.shape()[2];
    let gs = g.data();
    let ws = w.data();
    let mut out = vec![0.0; b_n * c * h * wd];
    out.par_chunks_mut(c * h * wd).enumerate().for_each(|(b, xb)| {
        let gb = &gs[b * o * ho * wo..(b + 1) * o * ho * wo];
        for ic in 0..c {
            let xc = &mut xb[ic * h * wd..(ic + 1) * h * wd];
            for oc in 0..o {
                let go = &gb[oc * ho * wo..(oc + 1) * ho * wo];
                for ki in 0..k {
                    for kj in 0..k {
                        let wv = ws[((oc * c + ic) * k + ki) * k + kj];
                        if wv == 0.0 {
                            continue;
                        }
                        for i in 0..ho {
                            let ih = (i * stride + ki) as isize - pb_h as isize;
                            if ih < 0 || ih >= h as isize {
                                continue;
                            }
                            let xrow = &mut xc[ih as usize * wd..ih as usize * wd + wd];
                            let grow = &go[i * wo..i * wo + wo];
                            for (j, gv) in grow.iter().enumerate() {
                                let jw = (j * stride + kj) as isize - pb_w as isize;
                                if jw < 0 || jw >= wd as isize {
                                    continue;
                                }
                                xrow[jw as usize] += wv * gv;
                            }
                        }
                    }
                }
            }
        }
    });
    Tensor::from_vec(&[b_n, c, h, wd], out)
}

/// Weight gradient shared by conv2d and conv_transpose2d.
/// `a` plays the conv input role `[B,C,H,W]`, `g` the conv output role
/// `[B,O,Ho,Wo]`; result is `[O,C,K,K]`.
fn conv_weight_grad_core(a: &Tensor, g: &Tensor, stride: usize, pb_h: usize, pb_w: usize, k: usize) -> Tensor {
    let (b_n, c, h, wd) = (a.shape()[0], a.shape()[1], a.shape()[2], a.shape()[3]);
    let (_, o, ho, wo) = (g.shape()[0], g.shape()[1], g.shape()[2], g.shape()[3]);
    let as_ = a.data();
    let gs = g.data();
    let mut gw = vec![0.0; o * c * k * k];
    gw.par_chunks_mut(c * k * k).enumerate().for_each(|(oc, gwo)| {
        for b in 0..b_n {
            let ab = &as_[b * c * h * wd..(b + 1) * c * h * wd];
            let go = &gs[(b * o + oc) * ho * wo..(b * o + oc + 1) * ho * wo];
            for ic in 0..c {
                let ac = &ab[ic * h * wd..(ic + 1) * h * wd];
                for ki in 0..k {
                    for kj in 0..k {
                        let mut acc = 0.0;
                        for i in 0..ho {
                            let ih = (i * stride + ki) as isize - pb_h as isize;
                            if ih < 0 || ih >= h as isize {
                                continue;
                            }
                            let arow = &ac[ih as usize * wd..ih as usize * wd + wd];
                            let grow = &go[i * wo..i * wo + wo];
                            for (j, gv) in grow.iter().enumerate() {
                                let jw = (j * stride + kj) as isize - pb_w as isize;
                                if jw < 0 || jw >= wd as isize {
                                    continue;
                                }
                                acc += gv * arow[jw as usize];
                            }
                        }
                        gwo[(ic * k + ki) * k + kj] += acc;
                    }
                }
            }
        }
    });
    Tensor::from_vec(&[o, c, k, k], gw)
}

/// Backward pass of conv2d: gradients w.r.t. input, weight and bias.
pub fn conv2d_backward(
    x: &Tensor,
    w: &Tensor,
    stride: usize,
    pad: Pad,
    gout: &Tensor,
) -> Result<(Tensor, Tensor, Tensor), NnError> {
    let k = w.shape()[2];
    let (_, pb_h) = out_dim(x.shape()[2], k, stride, pad)?;
    let (_, pb_w) = out_dim(x.shape()[3], k, stride, pad)?;
    let gx = conv_input_grad_core(gout, w, stride, pb_h, pb_w, x.shape()[2], x.shape()[3]);
    let gw = conv_weight_grad_core(x, gout, stride, pb_h, pb_w, k);
    let o = w.shape()[0];
    let (b_n, ho, wo) = (gout.shape()[0], gout.shape()[2], gout.shape()[3]);
    let mut gb = vec![0.0; o];
    for b in 0..b_n {
        for (oc, gbo) in gb.iter_mut().enumerate() {
            let base = (b * o + oc) * ho * wo;
            *gbo += gout.data()[base..base + ho * wo].iter().sum::<f64>();
        }
    }
    Ok((gx, gw, Tensor::from_vec(&[o], gb)))
}

// ---------------------------------------------------------------------------
// conv_transpose2d
// ---------------------------------------------------------------------------

/// Transposed convolution, the adjoint of [`conv2d`] for the same weight.
///
/// `x: [B,O,Hi,Wi]`, `w: [O,C,K,K]` (a conv weight mapping C -> O), output is
/// `[B,C,H,W]` where `(H, W)` is the conv input size that would have produced
/// `(Hi, Wi)`: `Hi*stride` for `Same`, `(Hi-1)*stride + K` for `Valid`.
pub fn conv_transpose2d(x: &Tensor, w: &Tensor, bias: &Tensor, stride: usize, pad: Pad) -> Result<Tensor, NnError> {
    check_rank4(x, "conv_transpose2d input")?;
    check_rank4(w, "conv_transpose2d weight")?;
    let (o, c, k) = (w.shape()[0], w.shape()[1], w.shape()[2]);
    if x.shape()[1] != o || bias.numel() != c {
        return Err(NnError::ShapeMismatch {
            expected: format!("input channels {} and bias [{}] for weight {:?}", o, c, w.shape()),
            actual: format!("input {:?}, bias {:?}", x.shape(), bias.shape()),
        });
    }
    let (hi, wi) = (x.shape()[2], x.shape()[3]);
    let (h, wd) = match pad {
        Pad::Same => (hi * stride, wi * stride),
        Pad::Valid => ((hi - 1) * stride + k, (wi - 1) * stride + k),
    };
    let (ho_check, pb_h) = out_dim(h, k, stride, pad)?;
    let (wo_check, pb_w) = out_dim(wd, k, stride, pad)?;
    debug_assert_eq!((ho_check, wo_check), (hi, wi));
    let mut out = conv_input_grad_core(x, w, stride, pb_h, pb_w, h, wd);
    let b_n = x.shape()[0];
    for b in 0..b_n {
        for ic in 0..c {
            let base = (b * c + ic) * h * wd;
            let bv = bias.data()[ic];
            out.data_mut()[base..base + h * wd].iter_mut().for_each(|v| *v += bv);
        }
    }
    Ok(out)
}

/// Backward pass of conv_transpose2d.
pub fn conv_transpose2d_backward(
    x: &Tensor,
    w: &Tensor,
    stride: usize,
    pad: Pad,
    gout: &Tensor,
) -> Result<(Tensor, Tensor, Tensor), NnError> {
    let k = w.shape()[2];
    let (h, wd) = (gout.shape()[2], gout.shape()[3]);
    let (_, pb_h) = out_dim(h, k, stride, pad)?;
    let (_, pb_w) = out_dim(wd, k, stride, pad)?;
    // Adjoint of the adjoint: input gradient is a plain forward conv.
    let gx = {
        let zero_bias = Tensor::zeros(&[w.shape()[0]]);
        conv2d(gout, w, &zero_bias, stride, pad)?
    };
    let gw = conv_weight_grad_core(gout, x, stride, pb_h, pb_w, k);
    let c = w.shape()[1];
    let b_n = gout.shape()[0];
    let mut gb = vec![0.0; c];
    for b in 0..b_n {
        for (ic, gbc) in gb.iter_mut().enumerate() {
            let base = (b * c + ic) * h * wd;
            *gbc += gout.data()[base..base + h * wd].iter().sum::<f64>();
        }
    }
    Ok((gx, gw, Tensor::from_vec(&[c], gb)))
}

// ---------------------------------------------------------------------------
// pooling / upsampling
// ---------------------------------------------------------------------------

/// 2x2 max pooling with stride 2. Returns the pooled tensor and the flat
/// argmax index of each output cell (first index wins ties, row-major).
pub fn maxpool2_with_argmax(x: &Tensor) -> Result<(Tensor, Vec<usize>), NnError> {
    check_rank4(x, "maxpool2 input")?;
    let (b_n, c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    if h % 2 != 0 || w % 2 != 0 {
        return Err(NnError::Invalid(format!("maxpool2 requires even spatial dims, got {}x{}", h, w)));
    }
    let (ho, wo) = (h / 2, w / 2);
    let mut out = vec![0.0; b_n * c * ho * wo];
    let mut arg = vec![0usize; b_n * c * ho * wo];
    let xs = x.data();
    for bc in 0..b_n * c {
        let xc = &xs[bc * h * w..(bc + 1) * h * w];
        for i in 0..ho {
            for j in 0..wo {
                let mut best = f64::NEG_INFINITY;
                let mut best_idx = 0usize;
                for di in 0..2 {
                    for dj in 0..2 {
                        let idx = (2 * i + di) * w + 2 * j + dj;
                        if xc[idx] > best {
                            best = xc[idx];
                            best_idx = idx;
                        }
                    }
                }
                out[bc * ho * wo + i * wo + j] = best;
                arg[bc * ho * wo + i * wo + j] = bc * h * w + best_idx;
            }
        }
    }
    Ok((Tensor::from_vec(&[b_n, c, ho, wo], out), arg))
}

pub fn maxpool2(x: &Tensor) -> Result<Tensor, NnError> {
    maxpool2_with_argmax(x).map(|(t, _)| t)
}

/// Route each output gradient back to the argmax position.
pub fn maxpool2_backward(input_shape: &[usize], argmax: &[usize], gout: &Tensor) -> Tensor {
    let mut gx = Tensor::zeros(input_shape);
    let g = gout.data();
    let gd = gx.data_mut();
    for (gi, &src) in g.iter().zip(argmax.iter()) {
        gd[src] += *gi;
    }
    gx
}

/// Nearest-neighbor 2x upsampling in both spatial dims.
pub fn upsample2(x: &Tensor) -> Result<Tensor, NnError> {
    check_rank4(x, "upsample2 input")?;
    let (b_n, c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let (ho, wo) = (2 * h, 2 * w);
    let mut out = vec![0.0; b_n * c * ho * wo];
    let xs = x.data();
    for bc in 0..b_n * c {
        let xc = &xs[bc * h * w..(bc + 1) * h * w];
        let oc = &mut out[bc * ho * wo..(bc + 1) * ho * wo];
        for i in 0..ho {
            for j in 0..wo {
                oc[i * wo + j] = xc[(i / 2) * w + j / 2];
            }
        }
    }
    Ok(Tensor::from_vec(&[b_n, c, ho, wo], out))
}

/// Backward of upsample2: sum the gradients of the four replicas.
pub fn upsample2_backward(gout: &Tensor) -> Tensor {
    let (b_n, c, ho, wo) = (gout.shape()[0], gout.shape()[1], gout.shape()[2], gout.shape()[3]);
    let (h, w) = (ho / 2, wo / 2);
    let mut gx = vec![0.0; b_n * c * h * w];
    let g = gout.data();
    for bc in 0..b_n * c {
        let gc = &g[bc * ho * wo..(bc + 1) * ho * wo];
        let xc = &mut gx[bc * h * w..(bc + 1) * h * w];
        for i in 0..ho {
            for j in 0..wo {
                xc[(i / 2) * w + j / 2] += gc[i * wo + j];
            }
        }
    }
    Tensor::from_vec(&[b_n, c, h, w], gx)
}

// ---------------------------------------------------------------------------
// batch norm
// ---------------------------------------------------------------------------

pub struct BnCache {
    pub xhat: Vec<f64>,
    pub inv_std: Vec<f64>,
    pub input_shape: Vec<usize>,
}

/// Train-mode batch norm over the channel dim of `[B,C,H,W]`.
/// Normalizes with biased batch statistics and updates running stats with
/// `running = (1-momentum)*running + momentum*batch`.
pub fn batchnorm_train(
    x: &Tensor,
    gamma: &Tensor,
    beta: &Tensor,
    running_mean: &mut Tensor,
    running_var: &mut Tensor,
    momentum: f64,
    eps: f64,
) -> Result<(Tensor, BnCache), NnError> {
    check_rank4(x, "batchnorm input")?;
    let (b_n, c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    if b_n == 0 {
        return Err(NnError::Invalid("batchnorm on empty batch".into()));
    }
    if gamma.numel() != c || beta.numel() != c {
        return Err(NnError::ShapeMismatch {
            expected: format!("gamma/beta of size {}", c),
            actual: format!("{}/{}", gamma.numel(), beta.numel()),
        });
    }
    let n = b_n * h * w;
    let xs = x.data();
    let mut xhat = vec![0.0; xs.len()];
    let mut out = vec![0.0; xs.len()];
    let mut inv_std = vec![0.0; c];
    for ic in 0..c {
        let mut mean = 0.0;
        for b in 0..b_n {
            let base = (b * c + ic) * h * w;
            mean += xs[base..base + h * w].iter().sum::<f64>();
        }
        mean /= n as f64;
        let mut var = 0.0;
        for b in 0..b_n {
            let base = (b * c + ic) * h * w;
            var += xs[base..base + h * w].iter().map(|v| (v - mean) * (v - mean)).sum::<f64>();
        }
        var /= n as f64;
        let istd = 1.0 / (var + eps).sqrt();
        inv_std[ic] = istd;
        let (gm, bt) = (gamma.data()[ic], beta.data()[ic]);
        for b in 0..b_n {
            let base = (b * c + ic) * h * w;
            for idx in base..base + h * w {
                let xh = (xs[idx] - mean) * istd;
                xhat[idx] = xh;
                out[idx] = gm * xh + bt;
            }
        }
        running_mean.data_mut()[ic] = (1.0 - momentum) * running_mean.data()[ic] + momentum * mean;
        running_var.data_mut()[ic] = (1.0 - momentum) * running_var.data()[ic] + momentum * var;
    }
    let cache = BnCache { xhat, inv_std, input_shape: x.shape().to_vec() };
    Ok((Tensor::from_vec(x.shape(), out), cache))
}

/// Backward of train-mode batch norm. Returns (gx, ggamma, gbeta).
pub fn batchnorm_train_backward(cache: &BnCache, gamma: &Tensor, gout: &Tensor) -> (Tensor, Tensor, Tensor) {
    let (b_n, c, h, w) = (
        cache.input_shape[0],
        cache.input_shape[1],
        cache.input_shape[2],
        cache.input_shape[3],
    );
    let n = (b_n * h * w) as f64;
    let g = gout.data();
    let mut gx = vec![0.0; g.len()];
    let mut ggamma = vec![0.0; c];
    let mut gbeta = vec![0.0; c];
    for ic in 0..c {
        let mut sum_g = 0.0;
        let mut sum_gx = 0.0;
        for b in 0..b_n {
            let base = (b * c + ic) * h * w;
            for idx in base..base + h * w {
                sum_g += g[idx];
                sum_gx += g[idx] * cache.xhat[idx];
            }
        }
        ggamma[ic] = sum_gx;
        gbeta[ic] = sum_g;
        let scale = gamma.data()[ic] * cache.inv_std[ic] / n;
        for b in 0..b_n {
            let base = (b * c + ic) * h * w;
            for idx in base..base + h * w {
                gx[idx] = scale * (n * g[idx] - sum_g - cache.xhat[idx] * sum_gx);
            }
        }
    }
    (
        Tensor::from_vec(&cache.input_shape, gx),
        Tensor::from_vec(&[c], ggamma),
        Tensor::from_vec(&[c], gbeta),
    )
}

/// Inference-mode batch norm: a pure affine function of the input using the
/// stored running statistics.
pub fn batchnorm_infer(
    x: &Tensor,
    gamma: &Tensor,
    beta: &Tensor,
    running_mean: &Tensor,
    running_var: &Tensor,
    eps: f64,
) -> Result<Tensor, NnError> {
    check_rank4(x, "batchnorm input")?;
    let (b_n, c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    if b_n == 0 {
        return Err(NnError::Invalid("batchnorm on empty batch".into()));
    }
    let xs = x.data();
    let mut out = vec![0.0; xs.len()];
    for ic in 0..c {
        let istd = 1.0 / (running_var.data()[ic] + eps).sqrt();
        let mean = running_mean.data()[ic];
        let (gm, bt) = (gamma.data()[ic], beta.data()[ic]);
        for b in 0..b_n {
            let base = (b * c + ic) * h * w;
            for idx in base..base + h * w {
                out[idx] = gm * (xs[idx] - mean) * istd + bt;
            }
        }
    }
    Ok(Tensor::from_vec(x.shape(), out))
}

pub fn batchnorm_infer_backward(
    gamma: &Tensor,
    running_var: &Tensor,
    eps: f64,
    gout: &Tensor,
) -> (Tensor, Tensor) {
    // gx only; gamma/beta grads in infer mode are not used for training but
    // returned as (ggamma-placeholder) zero tensor is avoided: infer backward
    // is only needed for input gradients in frozen-model paths.
    let (b_n, c, h, w) = (gout.shape()[0], gout.shape()[1], gout.shape()[2], gout.shape()[3]);
    let g = gout.data();
    let mut gx = vec![0.0; g.len()];
    for ic in 0..c {
        let scale = gamma.data()[ic] / (running_var.data()[ic] + eps).sqrt();
        for b in 0..b_n {
            let base = (b * c + ic) * h * w;
            for idx in base..base + h * w {
                gx[idx] = scale * g[idx];
            }
        }
    }
    (Tensor::from_vec(gout.shape(), gx), Tensor::zeros(&[c]))
}

// ---------------------------------------------------------------------------
// dense / pooling heads
// ---------------------------------------------------------------------------

/// Affine map: `x: [B,N]`, `w: [M,N]`, `b: [M]` -> `[B,M]`.
pub fn dense(x: &Tensor, w: &Tensor, b: &Tensor) -> Result<Tensor, NnError> {
    if x.rank() != 2 || w.rank() != 2 || x.shape()[1] != w.shape()[1] || b.numel() != w.shape()[0] {
        return Err(NnError::ShapeMismatch {
            expected: format!("x [B,N], w [M,N], b [M]; N={}", w.shape().get(1).copied().unwrap_or(0)),
            actual: format!("x {:?}, w {:?}, b {:?}", x.shape(), w.shape(), b.shape()),
        });
    }
    let (bn, n) = (x.shape()[0], x.shape()[1]);
    let m = w.shape()[0];
    let xs = x.data();
    let ws = w.data();
    let bs = b.data();
    let mut out = vec![0.0; bn * m];
    out.par_chunks_mut(m).enumerate().for_each(|(r, yrow)| {
        let xrow = &xs[r * n..(r + 1) * n];
        for (j, y) in yrow.iter_mut().enumerate() {
            let wrow = &ws[j * n..(j + 1) * n];
            let mut acc = bs[j];
            for i in 0..n {
                acc += wrow[i] * xrow[i];
            }
            *y = acc;
        }
    });
    Tensor::new(vec![bn, m], out)
}

pub fn dense_backward(x: &Tensor, w: &Tensor, gout: &Tensor) -> (Tensor, Tensor, Tensor) {
    let (bn, n) = (x.shape()[0], x.shape()[1]);
    let m = w.shape()[0];
    let xs = x.data();
    let ws = w.data();
    let gs = gout.data();
    let mut gx = vec![0.0; bn * n];
    gx.par_chunks_mut(n).enumerate().for_each(|(r, gxrow)| {
        let grow = &gs[r * m..(r + 1) * m];
        for (j, &gv) in grow.iter().enumerate() {
            if gv == 0.0 {
                continue;
            }
            let wrow = &ws[j * n..(j + 1) * n];
            for i in 0..n {
                gxrow[i] += gv * wrow[i];
            }
        }
    });
    let mut gw = vec![0.0; m * n];
    gw.par_chunks_mut(n).enumerate().for_each(|(j, gwrow)| {
        for r in 0..bn {
            let gv = gs[r * m + j];
            if gv == 0.0 {
                continue;
            }
            let xrow = &xs[r * n..(r + 1) * n];
            for i in 0..n {
                gwrow[i] += gv * xrow[i];
            }
        }
    });
    let mut gb = vec![0.0; m];
    for r in 0..bn {
        for (j, gbj) in gb.iter_mut().enumerate() {
            *gbj += gs[r * m + j];
        }
    }
    (
        Tensor::from_vec(&[bn, n], gx),
        Tensor::from_vec(&[m, n], gw),
        Tensor::from_vec(&[m], gb),
    )
}

/// Global average pool: `[B,C,H,W] -> [B,C]`.
pub fn global_avg_pool(x: &Tensor) -> Result<Tensor, NnError> {
    check_rank4(x, "global_avg_pool input")?;
    let (b_n, c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let hw = (h * w) as f64;
    let mut out = vec![0.0; b_n * c];
    for bc in 0..b_n * c {
        out[bc] = x.data()[bc * h * w..(bc + 1) * h * w].iter().sum::<f64>() / hw;
    }
    Ok(Tensor::from_vec(&[b_n, c], out))
}

pub fn global_avg_pool_backward(input_shape: &[usize], gout: &Tensor) -> Tensor {
    let (h, w) = (input_shape[2], input_shape[3]);
    let hw = (h * w) as f64;
    let mut gx = vec![0.0; input_shape.iter().product()];
    for (bc, &gv) in gout.data().iter().enumerate() {
        let v = gv / hw;
        gx[bc * h * w..(bc + 1) * h * w].iter_mut().for_each(|g| *g = v);
    }
    Tensor::from_vec(input_shape, gx)
}

// ---------------------------------------------------------------------------
// activations
// ---------------------------------------------------------------------------

pub fn relu(x: &Tensor) -> Tensor {
    x.map(|v| if v > 0.0 { v } else { 0.0 })
}

pub fn relu_backward(x: &Tensor, gout: &Tensor) -> Tensor {
    let data = x
        .data()
        .iter()
        .zip(gout.data())
        .map(|(&xv, &gv)| if xv > 0.0 { gv } else { 0.0 })
        .collect();
    Tensor::from_vec(x.shape(), data)
}

pub fn sigmoid(x: &Tensor) -> Tensor {
    x.map(sigmoid_scalar)
}

#[inline]
pub fn sigmoid_scalar(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

/// Backward of sigmoid expressed through its output `y`.
pub fn sigmoid_backward_from_y(y: &Tensor, gout: &Tensor) -> Tensor {
    let data = y
        .data()
        .iter()
        .zip(gout.data())
        .map(|(&yv, &gv)| gv * yv * (1.0 - yv))
        .collect();
    Tensor::from_vec(y.shape(), data)
}

/// Row-wise softmax with max subtraction for stability. Input `[B,K]`.
pub fn softmax_rows(x: &Tensor) -> Result<Tensor, NnError> {
    if x.rank() != 2 {
        return Err(NnError::ShapeMismatch {
            expected: "rank-2 input for softmax_rows".into(),
            actual: format!("{:?}", x.shape()),
        });
    }
    let (bn, k) = (x.shape()[0], x.shape()[1]);
    let mut out = vec![0.0; bn * k];
    for r in 0..bn {
        let row = &x.data()[r * k..(r + 1) * k];
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for (o, &v) in out[r * k..(r + 1) * k].iter_mut().zip(row) {
            *o = (v - m).exp();
            sum += *o;
        }
        out[r * k..(r + 1) * k].iter_mut().for_each(|o| *o /= sum);
    }
    Tensor::new(vec![bn, k], out)
}

// ---------------------------------------------------------------------------
// losses
// ---------------------------------------------------------------------------

/// Mean negative log-likelihood of the labeled class: mean over the batch of
/// `-ln p[label]`. Rows of `probs` must already sum to 1 (within 1e-6).
pub fn cross_entropy(probs: &Tensor, labels: &[usize]) -> Result<f64, NnError> {
    let (bn, k) = (probs.shape()[0], probs.shape()[1]);
    if labels.len() != bn {
        return Err(NnError::ShapeMismatch {
            expected: format!("{} labels", bn),
            actual: format!("{}", labels.len()),
        });
    }
    let mut total = 0.0;
    for (r, &label) in labels.iter().enumerate() {
        if label >= k {
            return Err(NnError::Invalid(format!("label index {} >= class count {}", label, k)));
        }
        let row = &probs.data()[r * k..(r + 1) * k];
        let sum: f64 = row.iter().sum();
        if (sum - 1.0).abs() > 1e-6 {
            return Err(NnError::Invalid(format!("probability row {} sums to {}, not 1", r, sum)));
        }
        total += -(row[label].max(1e-300)).ln();
    }
    Ok(total / bn as f64)
}

/// Fused softmax + cross-entropy from logits. Returns the mean loss and the
/// gradient w.r.t. the logits.
pub fn softmax_ce_with_grad(logits: &Tensor, labels: &[usize]) -> Result<(f64, Tensor), NnError> {
    let probs = softmax_rows(logits)?;
    let (bn, k) = (logits.shape()[0], logits.shape()[1]);
    if labels.len() != bn {
        return Err(NnError::ShapeMismatch {
            expected: format!("{} labels", bn),
            actual: format!("{}", labels.len()),
        });
    }
    let mut loss = 0.0;
    let mut grad = probs.data().to_vec();
    for (r, &label) in labels.iter().enumerate() {
        if label >= k {
            return Err(NnError::Invalid(format!("label index {} >= class count {}", label, k)));
        }
        loss += -(probs.data()[r * k + label].max(1e-300)).ln();
        grad[r * k + label] -= 1.0;
    }
    let scale = 1.0 / bn as f64;
    grad.iter_mut().for_each(|g| *g *= scale);
    Ok((loss * scale, Tensor::from_vec(&[bn, k], grad)))
}

/// Per-image sum of Bernoulli negative log-likelihood evaluated from logits
/// (numerically stable). `logits` and `target` are `[B,...]` with identical
/// shapes; returns per-image sums and the gradient w.r.t. the logits
/// (un-normalized: `sigmoid(l) - y`).
pub fn bce_sum_from_logits(logits: &Tensor, target: &Tensor) -> Result<(Vec<f64>, Tensor), NnError> {
    if logits.shape() != target.shape() {
        return Err(NnError::ShapeMismatch {
            expected: format!("{:?}", logits.shape()),
            actual: format!("{:?}", target.shape()),
        });
    }
    let b_n = logits.shape()[0];
    let per = logits.numel() / b_n;
    let mut sums = vec![0.0; b_n];
    let mut grad = vec![0.0; logits.numel()];
    for b in 0..b_n {
        let mut acc = 0.0;
        for i in b * per..(b + 1) * per {
            let l = logits.data()[i];
            let y = target.data()[i];
            // max(l,0) - l*y + ln(1 + exp(-|l|))
            acc += l.max(0.0) - l * y + (1.0 + (-l.abs()).exp()).ln();
            grad[i] = sigmoid_scalar(l) - y;
        }
        sums[b] = acc;
    }
    Ok((sums, Tensor::from_vec(logits.shape(), grad)))
}
