//! Forward and backward kernels for the network primitives.
//!
//! Every kernel is a pure function over immutable tensors. Summation order
//! inside each output element is fixed (ascending loop order), so results do
//! not depend on the parallel schedule.

use crate::error::{Error, Result};
use crate::par;
use crate::tensor::{Element, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Conv2dSpec {
    pub stride: (usize, usize),
    pub padding: (usize, usize),
    pub groups: usize,
}

impl Conv2dSpec {
    pub fn unit() -> Self {
        Self { stride: (1, 1), padding: (0, 0), groups: 1 }
    }

    pub fn same(kh: usize, kw: usize) -> Self {
        Self { stride: (1, 1), padding: ((kh - 1) / 2, (kw - 1) / 2), groups: 1 }
    }
}

pub fn conv2d_out_shape(xs: &[usize], ws: &[usize], spec: &Conv2dSpec) -> Result<Vec<usize>> {
    if xs.len() != 4 || ws.len() != 4 {
        return Err(Error::ShapeMismatch(format!(
            "conv2d expects rank-4 input/weight, got {:?} and {:?}",
            xs, ws
        )));
    }
    let (n, c, h, w) = (xs[0], xs[1], xs[2], xs[3]);
    let (d, cpg, kh, kw) = (ws[0], ws[1], ws[2], ws[3]);
    let g = spec.groups;
    if g == 0 || c % g != 0 || d % g != 0 || cpg != c / g {
        return Err(Error::ShapeMismatch(format!(
            "conv2d channels/groups: input C={}, weight {:?}, groups={}",
            c, ws, g
        )));
    }
    let (ph, pw) = spec.padding;
    let (sh, sw) = spec.stride;
    if kh > h + 2 * ph || kw > w + 2 * pw {
        return Err(Error::InvalidArgument(format!(
            "kernel {}x{} larger than padded input {}x{}",
            kh,
            kw,
            h + 2 * ph,
            w + 2 * pw
        )));
    }
    let oh = (h + 2 * ph - kh) / sh + 1;
    let ow = (w + 2 * pw - kw) / sw + 1;
    Ok(vec![n, d, oh, ow])
}

/// Output-coordinate ranges for which a kernel tap stays inside the padded
/// input: `0 <= oy*sh + ki - ph < h` and likewise along x. Hoisting these out
/// of the inner loops keeps them branch-free.
#[allow(clippy::too_many_arguments)]
fn conv_bounds(
    h: usize,
    w: usize,
    oh: usize,
    ow: usize,
    sh: usize,
    sw: usize,
    ph: usize,
    pw: usize,
    ki: usize,
    kj: usize,
) -> (usize, usize, usize, usize) {
    let oy_lo = if ki >= ph { 0 } else { (ph - ki).div_ceil(sh) };
    let oy_hi = if h + ph > ki { ((h + ph - ki - 1) / sh + 1).min(oh) } else { 0 };
    let ox_lo = if kj >= pw { 0 } else { (pw - kj).div_ceil(sw) };
    let ox_hi = if w + pw > kj { ((w + pw - kj - 1) / sw + 1).min(ow) } else { 0 };
    (oy_lo, oy_hi.max(oy_lo), ox_lo, ox_hi.max(ox_lo))
}

/// Cross-correlation (no kernel flip) with zero padding.
pub fn conv2d<T: Element>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    b: Option<&Tensor<T>>,
    spec: &Conv2dSpec,
) -> Result<Tensor<T>> {
    let os = conv2d_out_shape(x.shape(), w.shape(), spec)?;
    let (n, c, h, wid) = (x.dim(0), x.dim(1), x.dim(2), x.dim(3));
    let (d, cpg, kh, kw) = (w.dim(0), w.dim(1), w.dim(2), w.dim(3));
    let (oh, ow) = (os[2], os[3]);
    if let Some(bias) = b {
        if bias.shape() != [d] {
            return Err(Error::ShapeMismatch(format!(
                "conv2d bias {:?}, expected [{}]",
                bias.shape(),
                d
            )));
        }
    }
    let g = spec.groups;
    let dpg = d / g;
    let (sh, sw) = spec.stride;
    let (ph, pw) = spec.padding;
    let xd = x.data();
    let wd = w.data();
    let mut out = vec![T::zero(); n * d * oh * ow];
    par::for_each_chunk_mut(&mut out, oh * ow, |nd, plane| {
        let ni = nd / d;
        let di = nd % d;
        let c0 = (di / dpg) * cpg;
        if let Some(bias) = b {
            let bv = bias.data()[di];
            plane.iter_mut().for_each(|o| *o = bv);
        }
        for cg in 0..cpg {
            let xin = &xd[((ni * c + c0 + cg) * h) * wid..((ni * c + c0 + cg) * h + h) * wid];
            for ki in 0..kh {
                for kj in 0..kw {
                    let wv = wd[((di * cpg + cg) * kh + ki) * kw + kj];
                    let (oy_lo, oy_hi, ox_lo, ox_hi) =
                        conv_bounds(h, wid, oh, ow, sh, sw, ph, pw, ki, kj);
                    if ox_lo >= ox_hi {
                        continue;
                    }
                    for oy in oy_lo..oy_hi {
                        let y = oy * sh + ki - ph;
                        let in_row = &xin[y * wid..(y + 1) * wid];
                        let out_row = &mut plane[oy * ow..(oy + 1) * ow];
                        if sw == 1 {
                            let x0 = ox_lo + kj - pw;
                            let src = &in_row[x0..x0 + (ox_hi - ox_lo)];
                            for (o, &v) in out_row[ox_lo..ox_hi].iter_mut().zip(src) {
                                *o = *o + wv * v;
                            }
                        } else {
                            for (ox, o) in out_row[ox_lo..ox_hi].iter_mut().enumerate() {
                                *o = *o + wv * in_row[(ox_lo + ox) * sw + kj - pw];
                            }
                        }
                    }
                }
            }
        }
    });
    Tensor::new(os, out)
}

/// Gradients of conv2d w.r.t. input, weight, and bias.
pub fn conv2d_backward<T: Element>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    spec: &Conv2dSpec,
    gy: &Tensor<T>,
) -> Result<(Tensor<T>, Tensor<T>, Tensor<T>)> {
    let os = conv2d_out_shape(x.shape(), w.shape(), spec)?;
    if gy.shape() != os.as_slice() {
        return Err(Error::ShapeMismatch(format!(
            "conv2d grad shape {:?}, expected {:?}",
            gy.shape(),
            os
        )));
    }
    let (n, c, h, wid) = (x.dim(0), x.dim(1), x.dim(2), x.dim(3));
    let (d, cpg, kh, kw) = (w.dim(0), w.dim(1), w.dim(2), w.dim(3));
    let (oh, ow) = (os[2], os[3]);
    let g = spec.groups;
    let dpg = d / g;
    let (sh, sw) = spec.stride;
    let (ph, pw) = spec.padding;
    let xd = x.data();
    let wd = w.data();
    let gd = gy.data();

    let mut db = vec![T::zero(); d];
    par::for_each_chunk_mut(&mut db, 1, |di, out| {
        let mut acc = T::zero();
        for ni in 0..n {
            let plane = &gd[(ni * d + di) * oh * ow..(ni * d + di + 1) * oh * ow];
            for &v in plane {
                acc = acc + v;
            }
        }
        out[0] = acc;
    });

    let mut dw = vec![T::zero(); d * cpg * kh * kw];
    par::for_each_chunk_mut(&mut dw, cpg * kh * kw, |di, wplane| {
        let c0 = (di / dpg) * cpg;
        for ni in 0..n {
            let gplane = &gd[(ni * d + di) * oh * ow..(ni * d + di + 1) * oh * ow];
            for cg in 0..cpg {
                let xin = &xd[((ni * c + c0 + cg) * h) * wid..((ni * c + c0 + cg) * h + h) * wid];
                for ki in 0..kh {
                    for kj in 0..kw {
                        let (oy_lo, oy_hi, ox_lo, ox_hi) =
                            conv_bounds(h, wid, oh, ow, sh, sw, ph, pw, ki, kj);
                        if ox_lo >= ox_hi {
                            continue;
                        }
                        let mut acc = T::zero();
                        for oy in oy_lo..oy_hi {
                            let y = oy * sh + ki - ph;
                            let in_row = &xin[y * wid..(y + 1) * wid];
                            let g_row = &gplane[oy * ow..(oy + 1) * ow];
                            if sw == 1 {
                                let x0 = ox_lo + kj - pw;
                                let src = &in_row[x0..x0 + (ox_hi - ox_lo)];
                                for (&gv, &v) in g_row[ox_lo..ox_hi].iter().zip(src) {
                                    acc = acc + gv * v;
                                }
                            } else {
                                for (ox, &gv) in g_row[ox_lo..ox_hi].iter().enumerate() {
                                    acc = acc + gv * in_row[(ox_lo + ox) * sw + kj - pw];
                                }
                            }
                        }
                        let slot = &mut wplane[(cg * kh + ki) * kw + kj];
                        *slot = *slot + acc;
                    }
                }
            }
        }
    });

    let mut dx = vec![T::zero(); n * c * h * wid];
    par::for_each_chunk_mut(&mut dx, h * wid, |nc, plane| {
        let ni = nc / c;
        let ci = nc % c;
        let gi = ci / cpg;
        let cg = ci % cpg;
        for dg in 0..dpg {
            let di = gi * dpg + dg;
            let gplane = &gd[(ni * d + di) * oh * ow..(ni * d + di + 1) * oh * ow];
            for ki in 0..kh {
                for kj in 0..kw {
                    let wv = wd[((di * cpg + cg) * kh + ki) * kw + kj];
                    let (oy_lo, oy_hi, ox_lo, ox_hi) =
                        conv_bounds(h, wid, oh, ow, sh, sw, ph, pw, ki, kj);
                    if ox_lo >= ox_hi {
                        continue;
                    }
                    for oy in oy_lo..oy_hi {
                        let y = oy * sh + ki - ph;
                        let out_row = &mut plane[y * wid..(y + 1) * wid];
                        let g_row = &gplane[oy * ow..(oy + 1) * ow];
                        if sw == 1 {
                            let x0 = ox_lo + kj - pw;
                            let dst = &mut out_row[x0..x0 + (ox_hi - ox_lo)];
                            for (o, &gv) in dst.iter_mut().zip(&g_row[ox_lo..ox_hi]) {
                                *o = *o + wv * gv;
                            }
                        } else {
                            for (ox, &gv) in g_row[ox_lo..ox_hi].iter().enumerate() {
                                let xx = (ox_lo + ox) * sw + kj - pw;
                                out_row[xx] = out_row[xx] + wv * gv;
                            }
                        }
                    }
                }
            }
        }
    });

    Ok((
        Tensor::new(x.shape().to_vec(), dx)?,
        Tensor::new(w.shape().to_vec(), dw)?,
        Tensor::new(vec![d], db)?,
    ))
}

fn check_nchw<T: Element>(x: &Tensor<T>, what: &str) -> Result<(usize, usize, usize, usize)> {
    if x.rank() != 4 {
        return Err(Error::ShapeMismatch(format!("{} expects rank-4 NCHW, got {:?}", what, x.shape())));
    }
    Ok((x.dim(0), x.dim(1), x.dim(2), x.dim(3)))
}

fn check_per_channel<T: Element>(t: &Tensor<T>, c: usize, what: &str) -> Result<()> {
    if t.shape() != [c] {
        return Err(Error::ShapeMismatch(format!(
            "{} expects per-channel [{}] tensor, got {:?}",
            what,
            c,
            t.shape()
        )));
    }
    Ok(())
}

/// Eval-mode batch norm: `(x - mean) * gamma / sqrt(var + eps) + beta` per channel.
pub fn batch_norm_eval<T: Element>(
    x: &Tensor<T>,
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
    mean: &Tensor<T>,
    var: &Tensor<T>,
    eps: f64,
) -> Result<Tensor<T>> {
    let (_n, c, h, w) = check_nchw(x, "batch_norm")?;
    for (t, name) in [(gamma, "gamma"), (beta, "beta"), (mean, "mean"), (var, "var")] {
        check_per_channel(t, c, name)?;
    }
    let mut out = vec![T::zero(); x.numel()];
    let xd = x.data();
    let eps = T::from_f64(eps);
    par::for_each_chunk_mut(&mut out, h * w, |nc, plane| {
        let ci = nc % c;
        let inv_std = T::one() / (var.data()[ci] + eps).sqrt();
        let scale = gamma.data()[ci] * inv_std;
        let shift = beta.data()[ci] - mean.data()[ci] * scale;
        let xin = &xd[nc * h * w..(nc + 1) * h * w];
        for (o, &v) in plane.iter_mut().zip(xin) {
            *o = v * scale + shift;
        }
    });
    Tensor::new(x.shape().to_vec(), out)
}

pub fn batch_norm_eval_backward<T: Element>(
    x: &Tensor<T>,
    gamma: &Tensor<T>,
    mean: &Tensor<T>,
    var: &Tensor<T>,
    eps: f64,
    gy: &Tensor<T>,
) -> Result<(Tensor<T>, Tensor<T>, Tensor<T>)> {
    let (n, c, h, w) = check_nchw(x, "batch_norm")?;
    let eps = T::from_f64(eps);
    let plane = h * w;
    let mut dx = vec![T::zero(); x.numel()];
    let mut dgamma = vec![T::zero(); c];
    let mut dbeta = vec![T::zero(); c];
    for ci in 0..c {
        let inv_std = T::one() / (var.data()[ci] + eps).sqrt();
        let scale = gamma.data()[ci] * inv_std;
        let mu = mean.data()[ci];
        let (mut dg, mut db) = (T::zero(), T::zero());
        for ni in 0..n {
            let base = (ni * c + ci) * plane;
            for i in 0..plane {
                let g = gy.data()[base + i];
                dx[base + i] = g * scale;
                dg = dg + g * (x.data()[base + i] - mu) * inv_std;
                db = db + g;
            }
        }
        dgamma[ci] = dg;
        dbeta[ci] = db;
    }
    Ok((
        Tensor::new(x.shape().to_vec(), dx)?,
        Tensor::new(vec![c], dgamma)?,
        Tensor::new(vec![c], dbeta)?,
    ))
}

/// Train-mode batch norm over (N,H,W). Returns output plus the biased batch
/// mean and variance used for normalization (the caller maintains running
/// statistics).
pub fn batch_norm_train<T: Element>(
    x: &Tensor<T>,
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
    eps: f64,
) -> Result<(Tensor<T>, Tensor<T>, Tensor<T>)> {
    let (n, c, h, w) = check_nchw(x, "batch_norm")?;
    check_per_channel(gamma, c, "gamma")?;
    check_per_channel(beta, c, "beta")?;
    let plane = h * w;
    let m = T::from_f64((n * plane) as f64);
    let mut mean = vec![T::zero(); c];
    let mut var = vec![T::zero(); c];
    for ci in 0..c {
        let mut acc = T::zero();
        for ni in 0..n {
            let base = (ni * c + ci) * plane;
            for i in 0..plane {
                acc = acc + x.data()[base + i];
            }
        }
        let mu = acc / m;
        let mut v = T::zero();
        for ni in 0..n {
            let base = (ni * c + ci) * plane;
            for i in 0..plane {
                let d = x.data()[base + i] - mu;
                v = v + d * d;
            }
        }
        mean[ci] = mu;
        var[ci] = v / m;
    }
    let mean = Tensor::new(vec![c], mean)?;
    let var = Tensor::new(vec![c], var)?;
    let out = batch_norm_eval(x, gamma, beta, &mean, &var, eps)?;
    Ok((out, mean, var))
}

pub fn batch_norm_train_backward<T: Element>(
    x: &Tensor<T>,
    gamma: &Tensor<T>,
    mean: &Tensor<T>,
    var: &Tensor<T>,
    eps: f64,
    gy: &Tensor<T>,
) -> Result<(Tensor<T>, Tensor<T>, Tensor<T>)> {
    let (n, c, h, w) = check_nchw(x, "batch_norm")?;
    let plane = h * w;
    let m = T::from_f64((n * plane) as f64);
    let eps = T::from_f64(eps);
    let mut dx = vec![T::zero(); x.numel()];
    let mut dgamma = vec![T::zero(); c];
    let mut dbeta = vec![T::zero(); c];
    for ci in 0..c {
        let mu = mean.data()[ci];
        let inv_std = T::one() / (var.data()[ci] + eps).sqrt();
        let (mut sum_g, mut sum_gx) = (T::zero(), T::zero());
        for ni in 0..n {
            let base = (ni * c + ci) * plane;
            for i in 0..plane {
                let g = gy.data()[base + i];
                sum_g = sum_g + g;
                sum_gx = sum_gx + g * (x.data()[base + i] - mu) * inv_std;
            }
        }
        dgamma[ci] = sum_gx;
        dbeta[ci] = sum_g;
        let k = gamma.data()[ci] * inv_std;
        let mean_g = sum_g / m;
        let mean_gx = sum_gx / m;
        for ni in 0..n {
            let base = (ni * c + ci) * plane;
            for i in 0..plane {
                let xhat = (x.data()[base + i] - mu) * inv_std;
                dx[base + i] = k * (gy.data()[base + i] - mean_g - xhat * mean_gx);
            }
        }
    }
    Ok((
        Tensor::new(x.shape().to_vec(), dx)?,
        Tensor::new(vec![c], dgamma)?,
        Tensor::new(vec![c], dbeta)?,
    ))
}

/// Layer norm over the last axis with per-feature affine.
pub fn layer_norm<T: Element>(
    x: &Tensor<T>,
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
    eps: f64,
) -> Result<Tensor<T>> {
    let k = *x.shape().last().ok_or_else(|| {
        Error::ShapeMismatch("layer_norm on rank-0 tensor".into())
    })?;
    check_per_channel(gamma, k, "gamma")?;
    check_per_channel(beta, k, "beta")?;
    let rows = x.numel() / k.max(1);
    let eps = T::from_f64(eps);
    let mk = T::from_f64(k as f64);
    let mut out = vec![T::zero(); x.numel()];
    let xd = x.data();
    par::for_each_chunk_mut(&mut out, k, |r, row| {
        if r >= rows {
            return;
        }
        let xin = &xd[r * k..(r + 1) * k];
        let mut mu = T::zero();
        for &v in xin {
            mu = mu + v;
        }
        mu = mu / mk;
        let mut var = T::zero();
        for &v in xin {
            var = var + (v - mu) * (v - mu);
        }
        var = var / mk;
        let inv_std = T::one() / (var + eps).sqrt();
        for i in 0..k {
            row[i] = (xin[i] - mu) * inv_std * gamma.data()[i] + beta.data()[i];
        }
    });
    Tensor::new(x.shape().to_vec(), out)
}

pub fn layer_norm_backward<T: Element>(
    x: &Tensor<T>,
    gamma: &Tensor<T>,
    eps: f64,
    gy: &Tensor<T>,
) -> Result<(Tensor<T>, Tensor<T>, Tensor<T>)> {
    let k = *x.shape().last().unwrap();
    let rows = x.numel() / k;
    let eps = T::from_f64(eps);
    let mk = T::from_f64(k as f64);
    let mut dx = vec![T::zero(); x.numel()];
    let mut dgamma = vec![T::zero(); k];
    let mut dbeta = vec![T::zero(); k];
    for r in 0..rows {
        let xin = &x.data()[r * k..(r + 1) * k];
        let gin = &gy.data()[r * k..(r + 1) * k];
        let mut mu = T::zero();
        for &v in xin {
            mu = mu + v;
        }
        mu = mu / mk;
        let mut var = T::zero();
        for &v in xin {
            var = var + (v - mu) * (v - mu);
        }
        var = var / mk;
        let inv_std = T::one() / (var + eps).sqrt();
        let (mut sum_g, mut sum_gx) = (T::zero(), T::zero());
        for i in 0..k {
            let xhat = (xin[i] - mu) * inv_std;
            let g = gin[i] * gamma.data()[i];
            sum_g = sum_g + g;
            sum_gx = sum_gx + g * xhat;
            dgamma[i] = dgamma[i] + gin[i] * xhat;
            dbeta[i] = dbeta[i] + gin[i];
        }
        let mean_g = sum_g / mk;
        let mean_gx = sum_gx / mk;
        for i in 0..k {
            let xhat = (xin[i] - mu) * inv_std;
            let g = gin[i] * gamma.data()[i];
            dx[r * k + i] = inv_std * (g - mean_g - xhat * mean_gx);
        }
    }
    Ok((
        Tensor::new(x.shape().to_vec(), dx)?,
        Tensor::new(vec![k], dgamma)?,
        Tensor::new(vec![k], dbeta)?,
    ))
}

/// Numerically stable softmax along the last axis.
pub fn softmax_last<T: Element>(x: &Tensor<T>) -> Result<Tensor<T>> {
    let k = *x.shape().last().ok_or_else(|| {
        Error::ShapeMismatch("softmax on rank-0 tensor".into())
    })?;
    if k == 0 {
        return Err(Error::InvalidArgument("softmax over empty axis".into()));
    }
    let mut out = vec![T::zero(); x.numel()];
    let xd = x.data();
    par::for_each_chunk_mut(&mut out, k, |r, row| {
        let xin = &xd[r * k..(r + 1) * k];
        let mut max = xin[0];
        for &v in xin {
            if v > max {
                max = v;
            }
        }
        let mut sum = T::zero();
        for i in 0..k {
            let e = (xin[i] - max).exp();
            row[i] = e;
            sum = sum + e;
        }
        for v in row.iter_mut() {
            *v = *v / sum;
        }
    });
    Tensor::new(x.shape().to_vec(), out)
}

pub fn softmax_last_backward<T: Element>(out: &Tensor<T>, gy: &Tensor<T>) -> Result<Tensor<T>> {
    let k = *out.shape().last().unwrap();
    let rows = out.numel() / k;
    let mut dx = vec![T::zero(); out.numel()];
    for r in 0..rows {
        let p = &out.data()[r * k..(r + 1) * k];
        let g = &gy.data()[r * k..(r + 1) * k];
        let mut dot = T::zero();
        for i in 0..k {
            dot = dot + p[i] * g[i];
        }
        for i in 0..k {
            dx[r * k + i] = p[i] * (g[i] - dot);
        }
    }
    Tensor::new(out.shape().to_vec(), dx)
}

/// 2x2 max pooling with stride 2. Requires even spatial extents.
pub fn max_pool2<T: Element>(x: &Tensor<T>) -> Result<(Tensor<T>, Vec<usize>)> {
    let (n, c, h, w) = check_nchw(x, "max_pool2")?;
    if h % 2 != 0 || w % 2 != 0 {
        return Err(Error::InvalidArgument(format!(
            "max_pool2 requires even extents, got {}x{}",
            h, w
        )));
    }
    let (oh, ow) = (h / 2, w / 2);
    let mut out = vec![T::zero(); n * c * oh * ow];
    let mut arg = vec![0usize; n * c * oh * ow];
    for nc in 0..n * c {
        let xin = &x.data()[nc * h * w..(nc + 1) * h * w];
        for oy in 0..oh {
            for ox in 0..ow {
                let mut best_i = (2 * oy) * w + 2 * ox;
                let mut best = xin[best_i];
                for (dy, dx_) in [(0, 1), (1, 0), (1, 1)] {
                    let i = (2 * oy + dy) * w + 2 * ox + dx_;
                    if xin[i] > best {
                        best = xin[i];
                        best_i = i;
                    }
                }
                out[nc * oh * ow + oy * ow + ox] = best;
                arg[nc * oh * ow + oy * ow + ox] = nc * h * w + best_i;
            }
        }
    }
    Ok((Tensor::new(vec![n, c, oh, ow], out)?, arg))
}

pub fn max_pool2_backward<T: Element>(
    x_shape: &[usize],
    argmax: &[usize],
    gy: &Tensor<T>,
) -> Result<Tensor<T>> {
    let mut dx = vec![T::zero(); x_shape.iter().product()];
    for (i, &src) in argmax.iter().enumerate() {
        dx[src] = dx[src] + gy.data()[i];
    }
    Tensor::new(x_shape.to_vec(), dx)
}

#[inline]
fn bilinear_coord(dst: usize, scale: f64, in_extent: usize) -> (usize, usize, f64) {
    // align-corners=false: source = (dst + 0.5) * scale - 0.5, clamped
    let src = ((dst as f64 + 0.5) * scale - 0.5).max(0.0);
    let i0 = (src.floor() as usize).min(in_extent - 1);
    let i1 = (i0 + 1).min(in_extent - 1);
    let frac = (src - i0 as f64).clamp(0.0, 1.0);
    (i0, i1, frac)
}

/// Bilinear resize with the half-pixel (align-corners=false) convention.
pub fn bilinear_resize<T: Element>(x: &Tensor<T>, oh: usize, ow: usize) -> Result<Tensor<T>> {
    let (n, c, h, w) = check_nchw(x, "bilinear_resize")?;
    if oh == 0 || ow == 0 || h == 0 || w == 0 {
        return Err(Error::InvalidArgument("bilinear_resize with zero extent".into()));
    }
    if (oh, ow) == (h, w) {
        return Ok(x.clone());
    }
    let sy = h as f64 / oh as f64;
    let sx = w as f64 / ow as f64;
    let mut out = vec![T::zero(); n * c * oh * ow];
    let xd = x.data();
    par::for_each_chunk_mut(&mut out, oh * ow, |nc, plane| {
        let xin = &xd[nc * h * w..(nc + 1) * h * w];
        for oy in 0..oh {
            let (y0, y1, fy) = bilinear_coord(oy, sy, h);
            for ox in 0..ow {
                let (x0, x1, fx) = bilinear_coord(ox, sx, w);
                let v00 = xin[y0 * w + x0].to_f64();
                let v01 = xin[y0 * w + x1].to_f64();
                let v10 = xin[y1 * w + x0].to_f64();
                let v11 = xin[y1 * w + x1].to_f64();
                let top = v00 + (v01 - v00) * fx;
                let bot = v10 + (v11 - v10) * fx;
                plane[oy * ow + ox] = T::from_f64(top + (bot - top) * fy);
            }
        }
    });
    Tensor::new(vec![n, c, oh, ow], out)
}

pub fn bilinear_resize_backward<T: Element>(
    x_shape: &[usize],
    gy: &Tensor<T>,
) -> Result<Tensor<T>> {
    let (h, w) = (x_shape[2], x_shape[3]);
    let (n, c, oh, ow) = (gy.dim(0), gy.dim(1), gy.dim(2), gy.dim(3));
    if (oh, ow) == (h, w) {
        return Ok(gy.clone());
    }
    let sy = h as f64 / oh as f64;
    let sx = w as f64 / ow as f64;
    let mut dx = vec![T::zero(); n * c * h * w];
    par::for_each_chunk_mut(&mut dx, h * w, |nc, plane| {
        let gin = &gy.data()[nc * oh * ow..(nc + 1) * oh * ow];
        for oy in 0..oh {
            let (y0, y1, fy) = bilinear_coord(oy, sy, h);
            for ox in 0..ow {
                let (x0, x1, fx) = bilinear_coord(ox, sx, w);
                let g = gin[oy * ow + ox].to_f64();
                plane[y0 * w + x0] =
                    plane[y0 * w + x0] + T::from_f64(g * (1.0 - fy) * (1.0 - fx));
                plane[y0 * w + x1] = plane[y0 * w + x1] + T::from_f64(g * (1.0 - fy) * fx);
                plane[y1 * w + x0] = plane[y1 * w + x0] + T::from_f64(g * fy * (1.0 - fx));
                plane[y1 * w + x1] = plane[y1 * w + x1] + T::from_f64(g * fy * fx);
            }
        }
    });
    Tensor::new(x_shape.to_vec(), dx)
}

pub fn global_avg_pool<T: Element>(x: &Tensor<T>) -> Result<Tensor<T>> {
    let (n, c, h, w) = check_nchw(x, "global_avg_pool")?;
    let m = T::from_f64((h * w) as f64);
    let mut out = vec![T::zero(); n * c];
    for nc in 0..n * c {
        let mut acc = T::zero();
        for &v in &x.data()[nc * h * w..(nc + 1) * h * w] {
            acc = acc + v;
        }
        out[nc] = acc / m;
    }
    Tensor::new(vec![n, c, 1, 1], out)
}

pub fn global_avg_pool_backward<T: Element>(
    x_shape: &[usize],
    gy: &Tensor<T>,
) -> Result<Tensor<T>> {
    let (h, w) = (x_shape[2], x_shape[3]);
    let m = T::from_f64((h * w) as f64);
    let mut dx = vec![T::zero(); x_shape.iter().product()];
    for nc in 0..gy.numel() {
        let g = gy.data()[nc] / m;
        for v in &mut dx[nc * h * w..(nc + 1) * h * w] {
            *v = g;
        }
    }
    Tensor::new(x_shape.to_vec(), dx)
}

/// Channel-wise scaling: `x[N,C,H,W] * s[N,C,1,1]`.
pub fn mul_channel<T: Element>(x: &Tensor<T>, s: &Tensor<T>) -> Result<Tensor<T>> {
    let (n, c, h, w) = check_nchw(x, "mul_channel")?;
    if s.shape() != [n, c, 1, 1] {
        return Err(Error::ShapeMismatch(format!(
            "mul_channel scale {:?}, expected [{}, {}, 1, 1]",
            s.shape(),
            n,
            c
        )));
    }
    let mut out = vec![T::zero(); x.numel()];
    let xd = x.data();
    par::for_each_chunk_mut(&mut out, h * w, |nc, plane| {
        let sv = s.data()[nc];
        for (o, &v) in plane.iter_mut().zip(&xd[nc * h * w..(nc + 1) * h * w]) {
            *o = v * sv;
        }
    });
    Tensor::new(x.shape().to_vec(), out)
}

pub fn mul_channel_backward<T: Element>(
    x: &Tensor<T>,
    s: &Tensor<T>,
    gy: &Tensor<T>,
) -> Result<(Tensor<T>, Tensor<T>)> {
    let (n, c, h, w) = check_nchw(x, "mul_channel")?;
    let mut dx = vec![T::zero(); x.numel()];
    let mut ds = vec![T::zero(); n * c];
    for nc in 0..n * c {
        let sv = s.data()[nc];
        let mut acc = T::zero();
        for i in 0..h * w {
            let g = gy.data()[nc * h * w + i];
            dx[nc * h * w + i] = g * sv;
            acc = acc + g * x.data()[nc * h * w + i];
        }
        ds[nc] = acc;
    }
    Ok((Tensor::new(x.shape().to_vec(), dx)?, Tensor::new(vec![n, c, 1, 1], ds)?))
}

/// Broadcast-add `b[k]` to every length-`k` row of `x[..., k]`.
pub fn add_row<T: Element>(x: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let k = *x.shape().last().ok_or_else(|| {
        Error::ShapeMismatch("add_row on rank-0 tensor".into())
    })?;
    check_per_channel(b, k, "row bias")?;
    let mut out = x.to_vec();
    for (i, v) in out.iter_mut().enumerate() {
        *v = *v + b.data()[i % k];
    }
    Tensor::new(x.shape().to_vec(), out)
}

pub fn add_row_backward<T: Element>(k: usize, gy: &Tensor<T>) -> Result<Tensor<T>> {
    let mut db = vec![T::zero(); k];
    for (i, &g) in gy.data().iter().enumerate() {
        db[i % k] = db[i % k] + g;
    }
    Tensor::new(vec![k], db)
}

/// Windowed attention over projected `q`, `k`, `v` of shape `[tokens, C]`.
/// `idx[t*l..(t+1)*l]` lists the key/value rows each query attends to. Heads
/// are the C-axis split into `heads` contiguous spans. Computes
/// `softmax(q k^T / sqrt(d)) v` per query without materializing the gathered
/// neighborhoods; numerically equivalent to the gather/bmm composition.
pub fn windowed_attention<T: Element>(
    q: &Tensor<T>,
    k: &Tensor<T>,
    v: &Tensor<T>,
    idx: &[usize],
    heads: usize,
    l: usize,
) -> Result<Tensor<T>> {
    if q.rank() != 2 || q.shape() != k.shape() || q.shape() != v.shape() {
        return Err(Error::ShapeMismatch(format!(
            "windowed_attention expects matching [tokens, C] operands, got {:?}/{:?}/{:?}",
            q.shape(),
            k.shape(),
            v.shape()
        )));
    }
    let (tokens, c) = (q.dim(0), q.dim(1));
    if heads == 0 || c % heads != 0 {
        return Err(Error::InvalidArgument(format!(
            "channels {} not divisible by heads {}",
            c, heads
        )));
    }
    if l == 0 || idx.len() != tokens * l {
        return Err(Error::ShapeMismatch(format!(
            "neighborhood table has {} entries for {} tokens x {}",
            idx.len(),
            tokens,
            l
        )));
    }
    if let Some(&bad) = idx.iter().find(|&&i| i >= tokens) {
        return Err(Error::InvalidArgument(format!(
            "attention index {} out of {} tokens",
            bad, tokens
        )));
    }
    let d = c / heads;
    let scale = T::from_f64(1.0 / (d as f64).sqrt());
    let (qd, kd, vd) = (q.data(), k.data(), v.data());
    let mut out = vec![T::zero(); tokens * c];
    par::for_each_chunk_mut(&mut out, c, |t, row| {
        let win = &idx[t * l..(t + 1) * l];
        let mut scores = vec![T::zero(); l];
        for m in 0..heads {
            let qh = &qd[t * c + m * d..t * c + (m + 1) * d];
            let mut max = T::from_f64(f64::NEG_INFINITY);
            for (s, &src) in scores.iter_mut().zip(win) {
                let kh = &kd[src * c + m * d..src * c + (m + 1) * d];
                let mut acc = T::zero();
                for (&a, &b) in qh.iter().zip(kh) {
                    acc = acc + a * b;
                }
                *s = acc * scale;
                if *s > max {
                    max = *s;
                }
            }
            let mut sum = T::zero();
            for s in scores.iter_mut() {
                *s = (*s - max).exp();
                sum = sum + *s;
            }
            let oh = &mut row[m * d..(m + 1) * d];
            for (&p, &src) in scores.iter().zip(win) {
                let p = p / sum;
                let vh = &vd[src * c + m * d..src * c + (m + 1) * d];
                for (o, &b) in oh.iter_mut().zip(vh) {
                    *o = *o + p * b;
                }
            }
        }
    });
    Tensor::new(vec![tokens, c], out)
}

/// Batched matmul over the leading axes: `[..., m, k] x [..., k, n]`.
pub fn bmm<T: Element>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let ra = a.rank();
    let rb = b.rank();
    if ra < 2 || rb < 2 || ra != rb || a.shape()[..ra - 2] != b.shape()[..rb - 2] {
        return Err(Error::ShapeMismatch(format!(
            "bmm operands {:?} vs {:?}",
            a.shape(),
            b.shape()
        )));
    }
    let (m, k) = (a.dim(ra - 2), a.dim(ra - 1));
    let (k2, n) = (b.dim(rb - 2), b.dim(rb - 1));
    if k != k2 {
        return Err(Error::ShapeMismatch(format!(
            "bmm inner dims {:?} x {:?}",
            a.shape(),
            b.shape()
        )));
    }
    let batch: usize = a.shape()[..ra - 2].iter().product();
    let ad = a.data();
    let bd = b.data();
    let mut out = vec![T::zero(); batch * m * n];
    par::for_each_chunk_mut(&mut out, m * n, |bi, plane| {
        let ab = &ad[bi * m * k..(bi + 1) * m * k];
        let bb = &bd[bi * k * n..(bi + 1) * k * n];
        for i in 0..m {
            let row = &mut plane[i * n..(i + 1) * n];
            for kk in 0..k {
                let av = ab[i * k + kk];
                let brow = &bb[kk * n..(kk + 1) * n];
                for (o, &bv) in row.iter_mut().zip(brow) {
                    *o = *o + av * bv;
                }
            }
        }
    });
    let mut shape = a.shape()[..ra - 2].to_vec();
    shape.push(m);
    shape.push(n);
    Tensor::new(shape, out)
}

/// Transpose the last two axes.
pub fn transpose_last<T: Element>(x: &Tensor<T>) -> Result<Tensor<T>> {
    let r = x.rank();
    if r < 2 {
        return Err(Error::ShapeMismatch("transpose_last needs rank >= 2".into()));
    }
    let mut axes: Vec<usize> = (0..r).collect();
    axes.swap(r - 2, r - 1);
    x.permute(&axes)
}

/// Gather rows of `x[R, inner...]` along axis 0.
pub fn gather_rows<T: Element>(x: &Tensor<T>, idx: &[usize]) -> Result<Tensor<T>> {
    if x.rank() == 0 {
        return Err(Error::ShapeMismatch("gather_rows on rank-0 tensor".into()));
    }
    let rows = x.dim(0);
    let inner: usize = x.shape()[1..].iter().product();
    let mut out = Vec::with_capacity(idx.len() * inner);
    for &i in idx {
        if i >= rows {
            return Err(Error::InvalidArgument(format!(
                "gather index {} out of {} rows",
                i, rows
            )));
        }
        out.extend_from_slice(&x.data()[i * inner..(i + 1) * inner]);
    }
    let mut shape = x.shape().to_vec();
    shape[0] = idx.len();
    Tensor::new(shape, out)
}

pub fn gather_rows_backward<T: Element>(
    x_shape: &[usize],
    idx: &[usize],
    gy: &Tensor<T>,
) -> Result<Tensor<T>> {
    let inner: usize = x_shape[1..].iter().product();
    let mut dx = vec![T::zero(); x_shape.iter().product()];
    for (o, &i) in idx.iter().enumerate() {
        let src = &gy.data()[o * inner..(o + 1) * inner];
        let dst = &mut dx[i * inner..(i + 1) * inner];
        for (d, &g) in dst.iter_mut().zip(src) {
            *d = *d + g;
        }
    }
    Tensor::new(x_shape.to_vec(), dx)
}

/// GELU (tanh approximation).
pub fn gelu<T: Element>(x: &Tensor<T>) -> Tensor<T> {
    x.map(|v| {
        let v = v.to_f64();
        let u = (2.0 / std::f64::consts::PI).sqrt() * (v + 0.044715 * v * v * v);
        T::from_f64(0.5 * v * (1.0 + u.tanh()))
    })
}

pub fn gelu_backward<T: Element>(x: &Tensor<T>, gy: &Tensor<T>) -> Result<Tensor<T>> {
    gy.zip(x, |g, v| {
        let v = v.to_f64();
        let c = (2.0 / std::f64::consts::PI).sqrt();
        let u = c * (v + 0.044715 * v * v * v);
        let t = u.tanh();
        let sech2 = 1.0 - t * t;
        let du = c * (1.0 + 3.0 * 0.044715 * v * v);
        T::from_f64(g.to_f64() * (0.5 * (1.0 + t) + 0.5 * v * sech2 * du))
    })
}

/// Weighted cross-entropy over `[N, K, H, W]` logits and `[N, H, W]` labels.
/// Returns the mean over pixels of `w[y] * (-log softmax(logits)[y])` and the
/// per-pixel class probabilities needed by the backward pass.
pub fn wce_loss<T: Element>(
    logits: &Tensor<T>,
    labels: &[u32],
    weights: &Tensor<T>,
) -> Result<(T, Tensor<T>)> {
    let (n, k, h, w) = check_nchw(logits, "wce_loss")?;
    if labels.len() != n * h * w {
        return Err(Error::ShapeMismatch(format!(
            "wce_loss labels len {}, expected {}",
            labels.len(),
            n * h * w
        )));
    }
    check_per_channel(weights, k, "class weights")?;
    if weights.data().iter().any(|&v| v <= T::zero()) {
        return Err(Error::InvalidArgument("class weights must be positive".into()));
    }
    let plane = h * w;
    let pixels = T::from_f64((n * plane) as f64);
    let mut probs = vec![T::zero(); logits.numel()];
    let mut loss = T::zero();
    for ni in 0..n {
        for p in 0..plane {
            let y = labels[ni * plane + p] as usize;
            if y >= k {
                return Err(Error::InvalidArgument(format!(
                    "label {} out of range for {} classes",
                    y, k
                )));
            }
            let mut max = logits.data()[(ni * k) * plane + p];
            for c in 1..k {
                let v = logits.data()[(ni * k + c) * plane + p];
                if v > max {
                    max = v;
                }
            }
            let mut sum = T::zero();
            for c in 0..k {
                let e = (logits.data()[(ni * k + c) * plane + p] - max).exp();
                probs[(ni * k + c) * plane + p] = e;
                sum = sum + e;
            }
            for c in 0..k {
                let i = (ni * k + c) * plane + p;
                probs[i] = probs[i] / sum;
            }
            let log_p = logits.data()[(ni * k + y) * plane + p] - max - sum.ln();
            loss = loss - weights.data()[y] * log_p;
        }
    }
    Ok((loss / pixels, Tensor::new(logits.shape().to_vec(), probs)?))
}

pub fn wce_loss_backward<T: Element>(
    probs: &Tensor<T>,
    labels: &[u32],
    weights: &Tensor<T>,
    gy: T,
) -> Result<Tensor<T>> {
    let (n, k, h, w) = check_nchw(probs, "wce_loss")?;
    let plane = h * w;
    let pixels = T::from_f64((n * plane) as f64);
    let mut dx = vec![T::zero(); probs.numel()];
    for ni in 0..n {
        for p in 0..plane {
            let y = labels[ni * plane + p] as usize;
            let wy = weights.data()[y];
            for c in 0..k {
                let i = (ni * k + c) * plane + p;
                let indicator = if c == y { T::one() } else { T::zero() };
                dx[i] = gy * wy * (probs.data()[i] - indicator) / pixels;
            }
        }
    }
    Tensor::new(probs.shape().to_vec(), dx)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::rngs::StdRng;
    use rand::{Rng, SeedableRng};

    fn rand_tensor(shape: Vec<usize>, rng: &mut StdRng) -> Tensor<f64> {
        let n: usize = shape.iter().product();
        Tensor::new(shape, (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
    }

    // Naive six-loop convolution oracle.
    fn conv2d_oracle(
        x: &Tensor<f64>,
        w: &Tensor<f64>,
        b: Option<&Tensor<f64>>,
        spec: &Conv2dSpec,
    ) -> Tensor<f64> {
        let os = conv2d_out_shape(x.shape(), w.shape(), spec).unwrap();
        let (n, c, h, wid) = (x.dim(0), x.dim(1), x.dim(2), x.dim(3));
        let (d, cpg, kh, kw) = (w.dim(0), w.dim(1), w.dim(2), w.dim(3));
        let (oh, ow) = (os[2], os[3]);
        let dpg = d / spec.groups;
        let mut out = vec![0.0; n * d * oh * ow];
        for ni in 0..n {
            for di in 0..d {
                let c0 = (di / dpg) * cpg;
                for oy in 0..oh {
                    for ox in 0..ow {
                        let mut acc = b.map_or(0.0, |bias| bias.data()[di]);
                        for cg in 0..cpg {
                            for ki in 0..kh {
                                for kj in 0..kw {
                                    let y = (oy * spec.stride.0 + ki) as isize
                                        - spec.padding.0 as isize;
                                    let xx = (ox * spec.stride.1 + kj) as isize
                                        - spec.padding.1 as isize;
                                    if y >= 0
                                        && (y as usize) < h
                                        && xx >= 0
                                        && (xx as usize) < wid
                                    {
                                        acc += x.data()[((ni * c + c0 + cg) * h
                                            + y as usize)
                                            * wid
                                            + xx as usize]
                                            * w.data()[((di * cpg + cg) * kh + ki) * kw + kj];
                                    }
                                }
                            }
                        }
                        out[((ni * d + di) * oh + oy) * ow + ox] = acc;
                    }
                }
            }
        }
        Tensor::new(os, out).unwrap()
    }

    #[test]
    fn conv2d_identity_kernel() {
        let x = Tensor::<f64>::new(vec![1, 1, 2, 3], vec![1., 2., 3., 4., 5., 6.]).unwrap();
        let w = Tensor::<f64>::ones(vec![1, 1, 1, 1]).unwrap();
        let y = conv2d(&x, &w, None, &Conv2dSpec::unit()).unwrap();
        assert_eq!(y.data(), x.data());
    }

    #[test]
    fn conv2d_hand_sum() {
        let x = Tensor::<f64>::new(vec![1, 1, 2, 2], vec![1., 2., 3., 4.]).unwrap();
        let w = Tensor::<f64>::ones(vec![1, 1, 2, 2]).unwrap();
        let y = conv2d(&x, &w, None, &Conv2dSpec::unit()).unwrap();
        assert_eq!(y.shape(), &[1, 1, 1, 1]);
        assert_eq!(y.data(), &[10.0]);
    }

    #[test]
    fn conv2d_matches_six_loop_oracle() {
        let mut rng = StdRng::seed_from_u64(7);
        let x = rand_tensor(vec![1, 3, 7, 7], &mut rng);
        let w = rand_tensor(vec![4, 3, 3, 3], &mut rng);
        let b = rand_tensor(vec![4], &mut rng);
        let spec = Conv2dSpec { stride: (1, 1), padding: (1, 1), groups: 1 };
        let got = conv2d(&x, &w, Some(&b), &spec).unwrap();
        let want = conv2d_oracle(&x, &w, Some(&b), &spec);
        assert!(got.max_abs_diff(&want) < 1e-12);
    }

    #[test]
    fn conv2d_grouped_and_strided_match_oracle() {
        let mut rng = StdRng::seed_from_u64(8);
        for (groups, stride, pad) in [(2usize, (1, 1), (1, 1)), (4, (2, 2), (2, 2)), (4, (1, 1), (0, 0))] {
            let x = rand_tensor(vec![2, 4, 6, 8], &mut rng);
            let w = rand_tensor(vec![4, 4 / groups, 3, 3], &mut rng);
            let spec = Conv2dSpec { stride, padding: pad, groups };
            let got = conv2d(&x, &w, None, &spec).unwrap();
            let want = conv2d_oracle(&x, &w, None, &spec);
            assert!(got.max_abs_diff(&want) < 1e-12, "groups={}", groups);
        }
    }

    #[test]
    fn conv2d_homogeneity_and_additivity() {
        let mut rng = StdRng::seed_from_u64(9);
        let x = rand_tensor(vec![1, 2, 5, 5], &mut rng);
        let spec = Conv2dSpec::same(3, 3);
        for _ in 0..5 {
            let k1 = rand_tensor(vec![3, 2, 3, 3], &mut rng);
            let k2 = rand_tensor(vec![3, 2, 3, 3], &mut rng);
            let lambda: f64 = rng.gen_range(-2.0..2.0);
            // homogeneity: conv(F, lambda K) == lambda conv(F, K)
            let lhs = conv2d(&x, &k1.scale(lambda), None, &spec).unwrap();
            let rhs = conv2d(&x, &k1, None, &spec).unwrap().scale(lambda);
            assert!(lhs.max_abs_diff(&rhs) < 1e-10);
            // additivity: conv(F,K1)+conv(F,K2) == conv(F,K1+K2)
            let sum = conv2d(&x, &k1, None, &spec)
                .unwrap()
                .add(&conv2d(&x, &k2, None, &spec).unwrap())
                .unwrap();
            let merged = conv2d(&x, &k1.add(&k2).unwrap(), None, &spec).unwrap();
            assert!(sum.max_abs_diff(&merged) < 1e-10);
        }
    }

    #[test]
    fn conv2d_rejects_bad_shapes() {
        let x = Tensor::<f64>::zeros(vec![1, 3, 4, 4]).unwrap();
        let w = Tensor::<f64>::zeros(vec![2, 2, 3, 3]).unwrap();
        assert!(conv2d(&x, &w, None, &Conv2dSpec::unit()).is_err());
        let big = Tensor::<f64>::zeros(vec![2, 3, 5, 5]).unwrap();
        assert!(conv2d(&x, &big, None, &Conv2dSpec::unit()).is_err());
    }

    #[test]
    fn batch_norm_eval_identity_and_hand_case() {
        let eps = 1e-5;
        let x = Tensor::<f64>::new(vec![1, 1, 2, 2], vec![1., 2., 3., 4.]).unwrap();
        let one = Tensor::<f64>::ones(vec![1]).unwrap();
        let zero = Tensor::<f64>::zeros(vec![1]).unwrap();
        let var = Tensor::<f64>::full(vec![1], 1.0 - eps).unwrap();
        let y = batch_norm_eval(&x, &one, &zero, &zero, &var, eps).unwrap();
        assert!(y.max_abs_diff(&x) < 1e-12);

        // F=2, mu=0.5, delta=2 (var = 4 - eps), eta=1, beta=0.1 -> 0.85
        let f = Tensor::<f64>::full(vec![1, 1, 1, 1], 2.0).unwrap();
        let mu = Tensor::<f64>::full(vec![1], 0.5).unwrap();
        let var4 = Tensor::<f64>::full(vec![1], 4.0 - eps).unwrap();
        let beta = Tensor::<f64>::full(vec![1], 0.1).unwrap();
        let y = batch_norm_eval(&f, &one, &beta, &mu, &var4, eps).unwrap();
        assert!((y.data()[0] - 0.85).abs() < 1e-12);
    }

    #[test]
    fn batch_norm_train_statistics() {
        let mut rng = StdRng::seed_from_u64(10);
        let x = rand_tensor(vec![4, 3, 16, 16], &mut rng);
        let gamma = Tensor::<f64>::full(vec![3], 1.5).unwrap();
        let beta = Tensor::<f64>::full(vec![3], 0.25).unwrap();
        let (y, _, _) = batch_norm_train(&x, &gamma, &beta, 1e-5).unwrap();
        // per-channel mean ~= beta, std ~= |gamma|
        let plane = 16 * 16;
        for c in 0..3 {
            let mut vals = Vec::new();
            for n in 0..4 {
                vals.extend_from_slice(&y.data()[(n * 3 + c) * plane..(n * 3 + c + 1) * plane]);
            }
            let m: f64 = vals.iter().sum::<f64>() / vals.len() as f64;
            let v: f64 = vals.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / vals.len() as f64;
            assert!((m - 0.25).abs() < 1e-5);
            assert!((v.sqrt() - 1.5).abs() < 1e-3);
        }
    }

    #[test]
    fn eval_batch_norm_is_affine_per_channel() {
        let mut rng = StdRng::seed_from_u64(11);
        let x = rand_tensor(vec![2, 3, 4, 4], &mut rng);
        let gamma = rand_tensor(vec![3], &mut rng);
        let beta = rand_tensor(vec![3], &mut rng);
        let mean = rand_tensor(vec![3], &mut rng);
        let var = rand_tensor(vec![3], &mut rng).map(|v| v.abs() + 0.5);
        let eps = 1e-5;
        let a = 1.7;
        let c = 0.3;
        // bn(a*F + c) == a*eta/delta*F + bn(c*1)
        let lhs = batch_norm_eval(&x.scale(a).add_scalar(c), &gamma, &beta, &mean, &var, eps).unwrap();
        let ones = Tensor::<f64>::full(x.shape().to_vec(), c).unwrap();
        let bn_c = batch_norm_eval(&ones, &gamma, &beta, &mean, &var, eps).unwrap();
        let mut scaled = vec![0.0; x.numel()];
        for nc in 0..2 * 3 {
            let ci = nc % 3;
            let s = gamma.data()[ci] / (var.data()[ci] + eps).sqrt();
            for i in 0..16 {
                scaled[nc * 16 + i] = a * s * x.data()[nc * 16 + i] + bn_c.data()[nc * 16 + i];
            }
        }
        let rhs = Tensor::new(x.shape().to_vec(), scaled).unwrap();
        assert!(lhs.max_abs_diff(&rhs) < 1e-10);
    }

    #[test]
    fn softmax_contracts() {
        let x = Tensor::<f64>::new(vec![2], vec![0.0, 0.0]).unwrap();
        assert_eq!(softmax_last(&x).unwrap().data(), &[0.5, 0.5]);
        let x = Tensor::<f64>::new(vec![3], vec![1.0, 2.0, 3.0]).unwrap();
        let y = softmax_last(&x).unwrap();
        let z: f64 = x.data().iter().map(|v| v.exp()).sum();
        for i in 0..3 {
            assert!((y.data()[i] - x.data()[i].exp() / z).abs() < 1e-7);
        }
        assert!((y.data().iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn layer_norm_constant_input_gives_beta() {
        let x = Tensor::<f64>::full(vec![2, 4], 3.0).unwrap();
        let gamma = Tensor::<f64>::ones(vec![4]).unwrap();
        let beta = Tensor::<f64>::new(vec![4], vec![0.1, 0.2, 0.3, 0.4]).unwrap();
        let y = layer_norm(&x, &gamma, &beta, 1e-5).unwrap();
        for r in 0..2 {
            for i in 0..4 {
                assert!((y.data()[r * 4 + i] - beta.data()[i]).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn max_pool_hand_case() {
        let x = Tensor::<f64>::new(vec![1, 1, 2, 2], vec![1., 2., 3., 4.]).unwrap();
        let (y, arg) = max_pool2(&x).unwrap();
        assert_eq!(y.data(), &[4.0]);
        assert_eq!(arg, vec![3]);
        let odd = Tensor::<f64>::zeros(vec![1, 1, 3, 2]).unwrap();
        assert!(max_pool2(&odd).is_err());
    }

    #[test]
    fn bilinear_resize_identity_and_hand_grid() {
        let x = Tensor::<f64>::new(vec![1, 1, 2, 2], vec![0.0, 1.0, 2.0, 3.0]).unwrap();
        assert_eq!(bilinear_resize(&x, 2, 2).unwrap(), x);

        // Hand-computed half-pixel interpolation grid for 2x2 -> 4x4.
        let y = bilinear_resize(&x, 4, 4).unwrap();
        let coord = |d: usize| -> (usize, usize, f64) { bilinear_coord(d, 0.5, 2) };
        for oy in 0..4 {
            for ox in 0..4 {
                let (y0, y1, fy) = coord(oy);
                let (x0, x1, fx) = coord(ox);
                let v = |r: usize, c: usize| x.data()[r * 2 + c];
                let top = v(y0, x0) + (v(y0, x1) - v(y0, x0)) * fx;
                let bot = v(y1, x0) + (v(y1, x1) - v(y1, x0)) * fx;
                let want = top + (bot - top) * fy;
                assert!((y.data()[oy * 4 + ox] - want).abs() < 1e-6);
            }
        }
        // spot-check the analytic values at the corners and center
        assert!((y.data()[0] - 0.0).abs() < 1e-12);
        assert!((y.data()[15] - 3.0).abs() < 1e-12);
    }

    #[test]
    fn gather_scatter_round_trip() {
        let x = Tensor::<f64>::new(vec![3, 2], vec![1., 2., 3., 4., 5., 6.]).unwrap();
        let g = gather_rows(&x, &[2, 0, 2]).unwrap();
        assert_eq!(g.data(), &[5., 6., 1., 2., 5., 6.]);
        let gy = Tensor::<f64>::ones(vec![3, 2]).unwrap();
        let dx = gather_rows_backward(x.shape(), &[2, 0, 2], &gy).unwrap();
        assert_eq!(dx.data(), &[1., 1., 0., 0., 2., 2.]);
        assert!(gather_rows(&x, &[3]).is_err());
    }

    #[test]
    fn wce_uniform_logits_is_ln_k() {
        let logits = Tensor::<f64>::zeros(vec![1, 2, 2, 2]).unwrap();
        let weights = Tensor::<f64>::ones(vec![2]).unwrap();
        let (loss, _) = wce_loss(&logits, &[0, 1, 0, 1], &weights).unwrap();
        assert!((loss - (2.0f64).ln()).abs() < 1e-12);
    }

    #[test]
    fn wce_perfect_logits_decrease_to_zero() {
        let weights = Tensor::<f64>::ones(vec![2]).unwrap();
        let labels = [0u32, 1, 1, 0];
        let mut prev = f64::INFINITY;
        for margin in [1.0, 4.0, 16.0] {
            let mut data = vec![0.0; 8];
            for (p, &y) in labels.iter().enumerate() {
                data[y as usize * 4 + p] = margin;
            }
            let logits = Tensor::<f64>::new(vec![1, 2, 2, 2], data).unwrap();
            let (loss, _) = wce_loss(&logits, &labels, &weights).unwrap();
            assert!(loss < prev);
            prev = loss;
        }
        assert!(prev < 1e-6);
    }

    #[test]
    fn wce_rejects_bad_weights() {
        let logits = Tensor::<f64>::zeros(vec![1, 2, 1, 1]).unwrap();
        let weights = Tensor::<f64>::new(vec![2], vec![1.0, 0.0]).unwrap();
        assert!(wce_loss(&logits, &[0], &weights).is_err());
    }
}
