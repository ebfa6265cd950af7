//! Forward and backward compute routines on raw NHWC slices.
//!
//! Nothing here allocates graph state; `Graph` calls these and records what
//! the backward pass needs.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Real;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Padding {
    /// Output extent `ceil(input / stride)`; odd padding puts the extra
    /// pixel on the bottom/right.
    Same,
    Valid,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Conv2dCfg {
    pub stride: usize,
    pub dilation: usize,
    pub padding: Padding,
}

impl Default for Conv2dCfg {
    fn default() -> Self {
        Self { stride: 1, dilation: 1, padding: Padding::Same }
    }
}

impl Conv2dCfg {
    pub fn same() -> Self {
        Self::default()
    }

    pub fn dilated(dilation: usize) -> Self {
        Self { dilation, ..Self::default() }
    }
}

/// Sliding-window geometry shared by convolutions and pooling.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Geometry {
    pub h: usize,
    pub w: usize,
    pub kh: usize,
    pub kw: usize,
    pub oh: usize,
    pub ow: usize,
    pub stride: usize,
    pub dilation: usize,
    pub pad_top: usize,
    pub pad_left: usize,
}

impl Geometry {
    pub fn new(h: usize, w: usize, kh: usize, kw: usize, cfg: Conv2dCfg) -> Result<Self> {
        if cfg.stride == 0 || cfg.dilation == 0 {
            return Err(Error::InvalidArgument(format!(
                "stride and dilation must be positive (stride={}, dilation={})",
                cfg.stride, cfg.dilation
            )));
        }
        if kh == 0 || kw == 0 {
            return Err(Error::InvalidArgument("empty kernel window".into()));
        }
        let ekh = (kh - 1) * cfg.dilation + 1;
        let ekw = (kw - 1) * cfg.dilation + 1;
        let (oh, ow, pad_top, pad_left) = match cfg.padding {
            Padding::Same => {
                let oh = h.div_ceil(cfg.stride);
                let ow = w.div_ceil(cfg.stride);
                let pad_h = ((oh.max(1) - 1) * cfg.stride + ekh).saturating_sub(h);
                let pad_w = ((ow.max(1) - 1) * cfg.stride + ekw).saturating_sub(w);
                (oh, ow, pad_h / 2, pad_w / 2)
            }
            Padding::Valid => {
                if h < ekh || w < ekw {
                    return Err(Error::InvalidArgument(format!(
                        "VALID window {ekh}x{ekw} larger than input {h}x{w}"
                    )));
                }
                ((h - ekh) / cfg.stride + 1, (w - ekw) / cfg.stride + 1, 0, 0)
            }
        };
        Ok(Self { h, w, kh, kw, oh, ow, stride: cfg.stride, dilation: cfg.dilation, pad_top, pad_left })
    }

    #[inline]
    fn in_row(&self, oy: usize, ky: usize) -> Option<usize> {
        let y = (oy * self.stride + ky * self.dilation) as isize - self.pad_top as isize;
        (y >= 0 && (y as usize) < self.h).then_some(y as usize)
    }

    #[inline]
    fn in_col(&self, ox: usize, kx: usize) -> Option<usize> {
        let x = (ox * self.stride + kx * self.dilation) as isize - self.pad_left as isize;
        (x >= 0 && (x as usize) < self.w).then_some(x as usize)
    }

    fn is_pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.stride == 1 && self.pad_top == 0 && self.pad_left == 0
    }
}

fn im2col<R: Real>(x: &[R], g: &Geometry, cin: usize, col: &mut [R]) {
    let kk = g.kh * g.kw * cin;
    for oy in 0..g.oh {
        for ox in 0..g.ow {
            let row = &mut col[(oy * g.ow + ox) * kk..][..kk];
            for ky in 0..g.kh {
                let dst = &mut row[ky * g.kw * cin..][..g.kw * cin];
                match g.in_row(oy, ky) {
                    None => dst.fill(R::zero()),
                    Some(iy) => {
                        for kx in 0..g.kw {
                            let d = &mut dst[kx * cin..][..cin];
                            match g.in_col(ox, kx) {
                                None => d.fill(R::zero()),
                                Some(ix) => d.copy_from_slice(&x[(iy * g.w + ix) * cin..][..cin]),
                            }
                        }
                    }
                }
            }
        }
    }
}

fn col2im_add<R: Real>(col: &[R], g: &Geometry, cin: usize, dx: &mut [R]) {
    let kk = g.kh * g.kw * cin;
    for oy in 0..g.oh {
        for ox in 0..g.ow {
            let row = &col[(oy * g.ow + ox) * kk..][..kk];
            for ky in 0..g.kh {
                let Some(iy) = g.in_row(oy, ky) else { continue };
                for kx in 0..g.kw {
                    let Some(ix) = g.in_col(ox, kx) else { continue };
                    let src = &row[(ky * g.kw + kx) * cin..][..cin];
                    let dst = &mut dx[(iy * g.w + ix) * cin..][..cin];
                    for (d, &s) in dst.iter_mut().zip(src) {
                        *d += s;
                    }
                }
            }
        }
    }
}

/// Dense 2-D convolution. `x` is `(n, h, w, cin)`, `k` is `(kh, kw, cin, cout)`.
pub fn conv2d_forward<R: Real>(x: &[R], n: usize, cin: usize, k: &[R], cout: usize, g: &Geometry) -> Vec<R> {
    let p = g.oh * g.ow;
    let mut out = vec![R::zero(); n * p * cout];
    if g.is_pointwise() {
        R::gemm(n * p, cin, cout, R::one(), (x, cin as isize, 1), (k, cout as isize, 1), R::zero(), (&mut out, cout as isize, 1));
        return out;
    }
    let kk = g.kh * g.kw * cin;
    let mut col = vec![R::zero(); p * kk];
    for s in 0..n {
        im2col(&x[s * g.h * g.w * cin..][..g.h * g.w * cin], g, cin, &mut col);
        R::gemm(
            p,
            kk,
            cout,
            R::one(),
            (&col, kk as isize, 1),
            (k, cout as isize, 1),
            R::zero(),
            (&mut out[s * p * cout..][..p * cout], cout as isize, 1),
        );
    }
    out
}

/// Returns `(dx, dk)`, each only when requested.
#[allow(clippy::too_many_arguments)]
pub fn conv2d_backward<R: Real>(
    x: &[R],
    n: usize,
    cin: usize,
    k: &[R],
    cout: usize,
    g: &Geometry,
    dy: &[R],
    want_dx: bool,
    want_dk: bool,
) -> (Option<Vec<R>>, Option<Vec<R>>) {
    let p = g.oh * g.ow;
    let kk = g.kh * g.kw * cin;
    let mut dx = want_dx.then(|| vec![R::zero(); x.len()]);
    let mut dk = want_dk.then(|| vec![R::zero(); k.len()]);
    if g.is_pointwise() {
        let rows = n * p;
        if let Some(dk) = dk.as_mut() {
            R::gemm(cin, rows, cout, R::one(), (x, 1, cin as isize), (dy, cout as isize, 1), R::zero(), (dk, cout as isize, 1));
        }
        if let Some(dx) = dx.as_mut() {
            R::gemm(rows, cout, cin, R::one(), (dy, cout as isize, 1), (k, 1, cout as isize), R::zero(), (dx, cin as isize, 1));
        }
        return (dx, dk);
    }
    let mut col = vec![R::zero(); p * kk];
    let mut dcol = if want_dx { vec![R::zero(); p * kk] } else { Vec::new() };
    let plane = g.h * g.w * cin;
    for s in 0..n {
        let dys = &dy[s * p * cout..][..p * cout];
        if let Some(dk) = dk.as_mut() {
            im2col(&x[s * plane..][..plane], g, cin, &mut col);
            R::gemm(kk, p, cout, R::one(), (&col, 1, kk as isize), (dys, cout as isize, 1), R::one(), (dk, cout as isize, 1));
        }
        if let Some(dx) = dx.as_mut() {
            R::gemm(p, cout, kk, R::one(), (dys, cout as isize, 1), (k, 1, cout as isize), R::zero(), (&mut dcol, kk as isize, 1));
            col2im_add(&dcol, g, cin, &mut dx[s * plane..][..plane]);
        }
    }
    (dx, dk)
}

/// Per-channel spatial convolution. `k` is `(kh, kw, cin, mult)`; output
/// channel `c * mult + j` filters input channel `c` with kernel column `j`.
pub fn depthwise_forward<R: Real>(x: &[R], n: usize, cin: usize, k: &[R], mult: usize, g: &Geometry) -> Vec<R> {
    let cout = cin * mult;
    let mut out = vec![R::zero(); n * g.oh * g.ow * cout];
    for s in 0..n {
        let xs = &x[s * g.h * g.w * cin..][..g.h * g.w * cin];
        for oy in 0..g.oh {
            for ox in 0..g.ow {
                let orow = &mut out[((s * g.oh + oy) * g.ow + ox) * cout..][..cout];
                for ky in 0..g.kh {
                    let Some(iy) = g.in_row(oy, ky) else { continue };
                    for kx in 0..g.kw {
                        let Some(ix) = g.in_col(ox, kx) else { continue };
                        let xrow = &xs[(iy * g.w + ix) * cin..][..cin];
                        let krow = &k[(ky * g.kw + kx) * cout..][..cout];
                        if mult == 1 {
                            for ((o, &xv), &kv) in orow.iter_mut().zip(xrow).zip(krow) {
                                *o += xv * kv;
                            }
                        } else {
                            for (c, &xv) in xrow.iter().enumerate() {
                                for j in 0..mult {
                                    orow[c * mult + j] += xv * krow[c * mult + j];
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    out
}

#[allow(clippy::too_many_arguments)]
pub fn depthwise_backward<R: Real>(
    x: &[R],
    n: usize,
    cin: usize,
    k: &[R],
    mult: usize,
    g: &Geometry,
    dy: &[R],
    want_dx: bool,
    want_dk: bool,
) -> (Option<Vec<R>>, Option<Vec<R>>) {
    let cout = cin * mult;
    let mut dx = want_dx.then(|| vec![R::zero(); x.len()]);
    let mut dk = want_dk.then(|| vec![R::zero(); k.len()]);
    let plane = g.h * g.w * cin;
    for s in 0..n {
        let xs = &x[s * plane..][..plane];
        for oy in 0..g.oh {
            for ox in 0..g.ow {
                let grow = &dy[((s * g.oh + oy) * g.ow + ox) * cout..][..cout];
                for ky in 0..g.kh {
                    let Some(iy) = g.in_row(oy, ky) else { continue };
                    for kx in 0..g.kw {
                        let Some(ix) = g.in_col(ox, kx) else { continue };
                        let xoff = (iy * g.w + ix) * cin;
                        let koff = (ky * g.kw + kx) * cout;
                        if let Some(dk) = dk.as_mut() {
                            let dkrow = &mut dk[koff..][..cout];
                            let xrow = &xs[xoff..][..cin];
                            if mult == 1 {
                                for ((d, &xv), &gv) in dkrow.iter_mut().zip(xrow).zip(grow) {
                                    *d += xv * gv;
                                }
                            } else {
                                for (c, &xv) in xrow.iter().enumerate() {
                                    for j in 0..mult {
                                        dkrow[c * mult + j] += xv * grow[c * mult + j];
                                    }
                                }
                            }
                        }
                        if let Some(dx) = dx.as_mut() {
                            let dxrow = &mut dx[s * plane + xoff..][..cin];
                            let krow = &k[koff..][..cout];
                            if mult == 1 {
                                for ((d, &kv), &gv) in dxrow.iter_mut().zip(krow).zip(grow) {
                                    *d += kv * gv;
                                }
                            } else {
                                for (c, d) in dxrow.iter_mut().enumerate() {
                                    for j in 0..mult {
                                        *d += krow[c * mult + j] * grow[c * mult + j];
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    (dx, dk)
}

/// Max pooling; returns the output and the flat input index of each maximum.
pub fn max_pool_forward<R: Real>(x: &[R], n: usize, c: usize, g: &Geometry) -> (Vec<R>, Vec<usize>) {
    let len = n * g.oh * g.ow * c;
    let mut out = vec![R::neg_infinity(); len];
    let mut arg = vec![usize::MAX; len];
    for s in 0..n {
        for oy in 0..g.oh {
            for ox in 0..g.ow {
                let o = ((s * g.oh + oy) * g.ow + ox) * c;
                for ky in 0..g.kh {
                    let Some(iy) = g.in_row(oy, ky) else { continue };
                    for kx in 0..g.kw {
                        let Some(ix) = g.in_col(ox, kx) else { continue };
                        let i = ((s * g.h + iy) * g.w + ix) * c;
                        for ch in 0..c {
                            if x[i + ch] > out[o + ch] || arg[o + ch] == usize::MAX {
                                out[o + ch] = x[i + ch];
                                arg[o + ch] = i + ch;
                            }
                        }
                    }
                }
            }
        }
    }
    (out, arg)
}

/// Values a normalization forward pass keeps for its backward pass.
pub struct NormSaved<R> {
    pub xhat: Vec<R>,
    pub inv_std: Vec<R>,
    pub mean: Vec<R>,
    pub var: Vec<R>,
}

/// Per-sample normalization over `(h, w, c)` followed by a per-channel affine.
pub fn layer_norm_forward<R: Real>(x: &[R], n: usize, c: usize, gamma: &[R], beta: &[R], eps: R) -> (Vec<R>, NormSaved<R>) {
    let per = x.len() / n.max(1);
    let count = R::from_usize(per).unwrap();
    let mut y = vec![R::zero(); x.len()];
    let mut xhat = vec![R::zero(); x.len()];
    let mut inv_std = Vec::with_capacity(n);
    let mut means = Vec::with_capacity(n);
    let mut vars = Vec::with_capacity(n);
    for s in 0..n {
        let xs = &x[s * per..][..per];
        let mean = xs.iter().copied().sum::<R>() / count;
        let var = xs.iter().map(|&v| (v - mean) * (v - mean)).sum::<R>() / count;
        let is = R::one() / (var + eps).sqrt();
        for (i, &v) in xs.iter().enumerate() {
            let h = (v - mean) * is;
            xhat[s * per + i] = h;
            let ch = i % c;
            y[s * per + i] = h * gamma[ch] + beta[ch];
        }
        inv_std.push(is);
        means.push(mean);
        vars.push(var);
    }
    (y, NormSaved { xhat, inv_std, mean: means, var: vars })
}

/// Gradients of layer norm. With `detach_stats` the mean and variance are
/// treated as constants.
#[allow(clippy::too_many_arguments)]
pub fn layer_norm_backward<R: Real>(
    dy: &[R],
    n: usize,
    c: usize,
    gamma: &[R],
    saved: &NormSaved<R>,
    detach_stats: bool,
) -> (Vec<R>, Vec<R>, Vec<R>) {
    let per = dy.len() / n.max(1);
    let count = R::from_usize(per).unwrap();
    let mut dx = vec![R::zero(); dy.len()];
    let mut dgamma = vec![R::zero(); c];
    let mut dbeta = vec![R::zero(); c];
    for s in 0..n {
        let base = s * per;
        let mut sum_dh = R::zero();
        let mut sum_dh_h = R::zero();
        for i in 0..per {
            let ch = i % c;
            let g = dy[base + i];
            let h = saved.xhat[base + i];
            dgamma[ch] += g * h;
            dbeta[ch] += g;
            let dh = g * gamma[ch];
            sum_dh += dh;
            sum_dh_h += dh * h;
        }
        let is = saved.inv_std[s];
        let mean_dh = sum_dh / count;
        let mean_dh_h = sum_dh_h / count;
        for i in 0..per {
            let dh = dy[base + i] * gamma[i % c];
            dx[base + i] = if detach_stats {
                dh * is
            } else {
                is * (dh - mean_dh - saved.xhat[base + i] * mean_dh_h)
            };
        }
    }
    (dx, dgamma, dbeta)
}

/// Per-channel normalization over `(n, h, w)`. `stats` supplies fixed
/// `(mean, var)` for inference; `None` uses the batch statistics.
pub fn batch_norm_forward<R: Real>(
    x: &[R],
    c: usize,
    gamma: &[R],
    beta: &[R],
    eps: R,
    stats: Option<(&[R], &[R])>,
) -> (Vec<R>, NormSaved<R>) {
    let rows = x.len() / c.max(1);
    let count = R::from_usize(rows).unwrap();
    let (mean, var) = match stats {
        Some((m, v)) => (m.to_vec(), v.to_vec()),
        None => {
            let mut mean = vec![R::zero(); c];
            for row in x.chunks_exact(c) {
                for (m, &v) in mean.iter_mut().zip(row) {
                    *m += v;
                }
            }
            mean.iter_mut().for_each(|m| *m /= count);
            let mut var = vec![R::zero(); c];
            for row in x.chunks_exact(c) {
                for ((s, &v), &m) in var.iter_mut().zip(row).zip(&mean) {
                    *s += (v - m) * (v - m);
                }
            }
            var.iter_mut().for_each(|s| *s /= count);
            (mean, var)
        }
    };
    let inv_std: Vec<R> = var.iter().map(|&v| R::one() / (v + eps).sqrt()).collect();
    let mut y = vec![R::zero(); x.len()];
    let mut xhat = vec![R::zero(); x.len()];
    for (i, &v) in x.iter().enumerate() {
        let ch = i % c;
        let h = (v - mean[ch]) * inv_std[ch];
        xhat[i] = h;
        y[i] = h * gamma[ch] + beta[ch];
    }
    (y, NormSaved { xhat, inv_std, mean, var })
}

pub fn batch_norm_backward<R: Real>(
    dy: &[R],
    c: usize,
    gamma: &[R],
    saved: &NormSaved<R>,
    batch_stats: bool,
) -> (Vec<R>, Vec<R>, Vec<R>) {
    let rows = dy.len() / c.max(1);
    let count = R::from_usize(rows).unwrap();
    let mut dgamma = vec![R::zero(); c];
    let mut dbeta = vec![R::zero(); c];
    for (i, &g) in dy.iter().enumerate() {
        let ch = i % c;
        dgamma[ch] += g * saved.xhat[i];
        dbeta[ch] += g;
    }
    let mut dx = vec![R::zero(); dy.len()];
    for (i, d) in dx.iter_mut().enumerate() {
        let ch = i % c;
        let dh = dy[i] * gamma[ch];
        *d = if batch_stats {
            // d xhat summed over the channel equals gamma * dbeta, and
            // d xhat · xhat summed equals gamma * dgamma.
            saved.inv_std[ch] * (dh - gamma[ch] * dbeta[ch] / count - saved.xhat[i] * gamma[ch] * dgamma[ch] / count)
        } else {
            dh * saved.inv_std[ch]
        };
    }
    (dx, dgamma, dbeta)
}
