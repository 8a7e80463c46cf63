//! Raw NCHW kernels on flat slices, used by the tape ops.
//!
//! Every output element is produced by a fixed sequential loop, so results are
//! bit-reproducible for a given build.

use crate::tensor::Element;

/// Geometry of a "same"-padded, stride-1 square convolution.
#[derive(Clone, Copy, Debug)]
pub(crate) struct ConvGeom {
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub k: usize,
    pub ksize: usize,
    pub dilation: usize,
}

impl ConvGeom {
    fn pad(&self) -> isize {
        (self.dilation * (self.ksize - 1) / 2) as isize
    }

    fn offset(&self, tap: usize) -> isize {
        (tap * self.dilation) as isize - self.pad()
    }
}

/// Output positions `o` in `0..len` for which `o + off` is also in `0..len`.
#[inline]
fn valid_range(len: usize, off: isize) -> (usize, usize) {
    let len = len as isize;
    let start = (-off).max(0);
    let end = (len - off).min(len);
    if start >= end {
        (0, 0)
    } else {
        (start as usize, end as usize)
    }
}

#[inline]
fn axpy<T: Element>(alpha: T, x: &[T], y: &mut [T]) {
    for (yi, &xi) in y.iter_mut().zip(x) {
        *yi = *yi + alpha * xi;
    }
}

/// Eight-lane dot product; lanes are reduced in a fixed order.
#[inline]
fn dot_into<T: Element>(acc: &mut [T; 8], a: &[T], b: &[T]) -> T {
    let mut ca = a.chunks_exact(8);
    let mut cb = b.chunks_exact(8);
    for (xa, xb) in (&mut ca).zip(&mut cb) {
        for lane in 0..8 {
            acc[lane] = acc[lane] + xa[lane] * xb[lane];
        }
    }
    ca.remainder()
        .iter()
        .zip(cb.remainder())
        .fold(T::zero(), |s, (&x, &y)| s + x * y)
}

pub(crate) fn conv2d_forward<T: Element>(x: &[T], weight: &[T], bias: &[T], g: ConvGeom) -> Vec<T> {
    let plane = g.h * g.w;
    let taps = g.ksize * g.ksize;
    let mut out = vec![T::zero(); g.n * g.k * plane];
    for ni in 0..g.n {
        for ki in 0..g.k {
            let o = &mut out[(ni * g.k + ki) * plane..][..plane];
            o.fill(bias[ki]);
            for ci in 0..g.c {
                let xin = &x[(ni * g.c + ci) * plane..][..plane];
                let wk = &weight[(ki * g.c + ci) * taps..][..taps];
                for ky in 0..g.ksize {
                    let dy = g.offset(ky);
                    let (y0, y1) = valid_range(g.h, dy);
                    for kx in 0..g.ksize {
                        let dx = g.offset(kx);
                        let (x0, x1) = valid_range(g.w, dx);
                        if x0 == x1 {
                            continue;
                        }
                        let wv = wk[ky * g.ksize + kx];
                        for y in y0..y1 {
                            let src = ((y as isize + dy) as usize) * g.w;
                            let xs = (x0 as isize + dx) as usize;
                            axpy(
                                wv,
                                &xin[src + xs..src + xs + (x1 - x0)],
                                &mut o[y * g.w + x0..y * g.w + x1],
                            );
                        }
                    }
                }
            }
        }
    }
    out
}

pub(crate) struct ConvGrads<T> {
    pub input: Option<Vec<T>>,
    pub weight: Vec<T>,
    pub bias: Vec<T>,
}

pub(crate) fn conv2d_backward<T: Element>(
    x: &[T],
    weight: &[T],
    grad_out: &[T],
    g: ConvGeom,
    need_input: bool,
) -> ConvGrads<T> {
    let plane = g.h * g.w;
    let taps = g.ksize * g.ksize;

    let input = need_input.then(|| {
        let mut gx = vec![T::zero(); g.n * g.c * plane];
        for ni in 0..g.n {
            for ci in 0..g.c {
                let gxp = &mut gx[(ni * g.c + ci) * plane..][..plane];
                for ki in 0..g.k {
                    let gop = &grad_out[(ni * g.k + ki) * plane..][..plane];
                    let wk = &weight[(ki * g.c + ci) * taps..][..taps];
                    for ky in 0..g.ksize {
                        let dy = g.offset(ky);
                        let (y0, y1) = valid_range(g.h, dy);
                        for kx in 0..g.ksize {
                            let dx = g.offset(kx);
                            let (x0, x1) = valid_range(g.w, dx);
                            if x0 == x1 {
                                continue;
                            }
                            let wv = wk[ky * g.ksize + kx];
                            for y in y0..y1 {
                                let dst = ((y as isize + dy) as usize) * g.w;
                                let xs = (x0 as isize + dx) as usize;
                                axpy(
                                    wv,
                                    &gop[y * g.w + x0..y * g.w + x1],
                                    &mut gxp[dst + xs..dst + xs + (x1 - x0)],
                                );
                            }
                        }
                    }
                }
            }
        }
        gx
    });

    let mut gw = vec![T::zero(); g.k * g.c * taps];
    for ki in 0..g.k {
        for ci in 0..g.c {
            for ky in 0..g.ksize {
                let dy = g.offset(ky);
                let (y0, y1) = valid_range(g.h, dy);
                for kx in 0..g.ksize {
                    let dx = g.offset(kx);
                    let (x0, x1) = valid_range(g.w, dx);
                    let mut lanes = [T::zero(); 8];
                    let mut tail = T::zero();
                    if x0 < x1 {
                        for ni in 0..g.n {
                            let gop = &grad_out[(ni * g.k + ki) * plane..][..plane];
                            let xin = &x[(ni * g.c + ci) * plane..][..plane];
                            for y in y0..y1 {
                                let src = ((y as isize + dy) as usize) * g.w;
                                let xs = (x0 as isize + dx) as usize;
                                tail = tail
                                    + dot_into(
                                        &mut lanes,
                                        &gop[y * g.w + x0..y * g.w + x1],
                                        &xin[src + xs..src + xs + (x1 - x0)],
                                    );
                            }
                        }
                    }
                    gw[((ki * g.c + ci) * g.ksize + ky) * g.ksize + kx] =
                        lanes.iter().fold(T::zero(), |s, &v| s + v) + tail;
                }
            }
        }
    }

    let mut gb = vec![T::zero(); g.k];
    for ni in 0..g.n {
        for (ki, b) in gb.iter_mut().enumerate() {
            let gop = &grad_out[(ni * g.k + ki) * plane..][..plane];
            *b = *b + gop.iter().copied().sum::<T>();
        }
    }

    ConvGrads {
        input,
        weight: gw,
        bias: gb,
    }
}

/// Stride-2, 2x2 transposed convolution. `weight` is `[C, K, 2, 2]`.
pub(crate) fn conv_transpose2x2_forward<T: Element>(
    x: &[T],
    weight: &[T],
    bias: &[T],
    [n, c, h, w]: [usize; 4],
    k: usize,
) -> Vec<T> {
    let (oh, ow) = (2 * h, 2 * w);
    let mut out = vec![T::zero(); n * k * oh * ow];
    for ni in 0..n {
        for ki in 0..k {
            let o = &mut out[(ni * k + ki) * oh * ow..][..oh * ow];
            o.fill(bias[ki]);
            for ci in 0..c {
                let xin = &x[(ni * c + ci) * h * w..][..h * w];
                let wk = &weight[(ci * k + ki) * 4..][..4];
                for i in 0..h {
                    for a in 0..2 {
                        let orow = &mut o[(2 * i + a) * ow..][..ow];
                        let (w0, w1) = (wk[a * 2], wk[a * 2 + 1]);
                        for (j, &v) in xin[i * w..(i + 1) * w].iter().enumerate() {
                            orow[2 * j] = orow[2 * j] + w0 * v;
                            orow[2 * j + 1] = orow[2 * j + 1] + w1 * v;
                        }
                    }
                }
            }
        }
    }
    out
}

pub(crate) fn conv_transpose2x2_backward<T: Element>(
    x: &[T],
    weight: &[T],
    grad_out: &[T],
    [n, c, h, w]: [usize; 4],
    k: usize,
    need_input: bool,
) -> ConvGrads<T> {
    let (oh, ow) = (2 * h, 2 * w);
    let input = need_input.then(|| {
        let mut gx = vec![T::zero(); n * c * h * w];
        for ni in 0..n {
            for ci in 0..c {
                let gxp = &mut gx[(ni * c + ci) * h * w..][..h * w];
                for ki in 0..k {
                    let gop = &grad_out[(ni * k + ki) * oh * ow..][..oh * ow];
                    let wk = &weight[(ci * k + ki) * 4..][..4];
                    for i in 0..h {
                        for j in 0..w {
                            let mut s = gxp[i * w + j];
                            for a in 0..2 {
                                for b in 0..2 {
                                    s = s + wk[a * 2 + b] * gop[(2 * i + a) * ow + 2 * j + b];
                                }
                            }
                            gxp[i * w + j] = s;
                        }
                    }
                }
            }
        }
        gx
    });

    let mut gw = vec![T::zero(); c * k * 4];
    for ci in 0..c {
        for ki in 0..k {
            for a in 0..2 {
                for b in 0..2 {
                    let mut s = T::zero();
                    for ni in 0..n {
                        let xin = &x[(ni * c + ci) * h * w..][..h * w];
                        let gop = &grad_out[(ni * k + ki) * oh * ow..][..oh * ow];
                        for i in 0..h {
                            for j in 0..w {
                                s = s + xin[i * w + j] * gop[(2 * i + a) * ow + 2 * j + b];
                            }
                        }
                    }
                    gw[(ci * k + ki) * 4 + a * 2 + b] = s;
                }
            }
        }
    }

    let mut gb = vec![T::zero(); k];
    for ni in 0..n {
        for (ki, b) in gb.iter_mut().enumerate() {
            *b = *b + grad_out[(ni * k + ki) * oh * ow..][..oh * ow].iter().copied().sum::<T>();
        }
    }
    ConvGrads {
        input,
        weight: gw,
        bias: gb,
    }
}

/// Returns pooled values and, per output, the flat input index of the maximum.
/// Ties resolve to the first element in row-major window order.
pub(crate) fn maxpool2x2_forward<T: Element>(x: &[T], [n, c, h, w]: [usize; 4]) -> (Vec<T>, Vec<usize>) {
    let (oh, ow) = (h / 2, w / 2);
    let mut out = Vec::with_capacity(n * c * oh * ow);
    let mut argmax = Vec::with_capacity(n * c * oh * ow);
    for plane in 0..n * c {
        let base = plane * h * w;
        for i in 0..oh {
            for j in 0..ow {
                let mut best = base + 2 * i * w + 2 * j;
                for (a, b) in [(0, 1), (1, 0), (1, 1)] {
                    let idx = base + (2 * i + a) * w + 2 * j + b;
                    if x[idx] > x[best] {
                        best = idx;
                    }
                }
                out.push(x[best]);
                argmax.push(best);
            }
        }
    }
    (out, argmax)
}

pub(crate) struct BatchNormForward<T> {
    pub output: Vec<T>,
    pub normalized: Vec<T>,
    pub inv_std: Vec<T>,
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

pub(crate) const BN_EPS: f64 = 1e-5;

/// Per-channel batch statistics over N x H x W (population variance).
pub(crate) fn batchnorm_train_forward<T: Element>(
    x: &[T],
    gamma: &[T],
    beta: &[T],
    [n, c, h, w]: [usize; 4],
) -> BatchNormForward<T> {
    let plane = h * w;
    let count = (n * plane) as f64;
    let mut mean = vec![0.0f64; c];
    let mut var = vec![0.0f64; c];
    for ci in 0..c {
        let mut s = 0.0;
        for ni in 0..n {
            s += x[(ni * c + ci) * plane..][..plane]
                .iter()
                .map(|v| v.as_f64())
                .sum::<f64>();
        }
        let m = s / count;
        let mut sq = 0.0;
        for ni in 0..n {
            sq += x[(ni * c + ci) * plane..][..plane]
                .iter()
                .map(|v| {
                    let d = v.as_f64() - m;
                    d * d
                })
                .sum::<f64>();
        }
        mean[ci] = m;
        var[ci] = sq / count;
    }
    let inv_std: Vec<T> = var
        .iter()
        .map(|&v| T::from_f64_lossy(1.0 / (v + BN_EPS).sqrt()))
        .collect();
    let means: Vec<T> = mean.iter().map(|&m| T::from_f64_lossy(m)).collect();
    let mut normalized = vec![T::zero(); x.len()];
    let mut output = vec![T::zero(); x.len()];
    for ni in 0..n {
        for ci in 0..c {
            let off = (ni * c + ci) * plane;
            for i in off..off + plane {
                let xh = (x[i] - means[ci]) * inv_std[ci];
                normalized[i] = xh;
                output[i] = gamma[ci] * xh + beta[ci];
            }
        }
    }
    BatchNormForward {
        output,
        normalized,
        inv_std,
        mean,
        var,
    }
}

pub(crate) fn batchnorm_eval_forward<T: Element>(
    x: &[T],
    gamma: &[T],
    beta: &[T],
    running_mean: &[f64],
    running_var: &[f64],
    [n, c, h, w]: [usize; 4],
) -> (Vec<T>, Vec<T>, Vec<T>) {
    let plane = h * w;
    let inv_std: Vec<T> = running_var
        .iter()
        .map(|&v| T::from_f64_lossy(1.0 / (v + BN_EPS).sqrt()))
        .collect();
    let means: Vec<T> = running_mean.iter().map(|&m| T::from_f64_lossy(m)).collect();
    let mut normalized = vec![T::zero(); x.len()];
    let mut output = vec![T::zero(); x.len()];
    for ni in 0..n {
        for ci in 0..c {
            let off = (ni * c + ci) * plane;
            for i in off..off + plane {
                let xh = (x[i] - means[ci]) * inv_std[ci];
                normalized[i] = xh;
                output[i] = gamma[ci] * xh + beta[ci];
            }
        }
    }
    (output, normalized, inv_std)
}

/// Gradients of batch norm. With `batch_stats` the mean and variance depend on
/// the input; otherwise the op is a per-channel affine map.
#[allow(clippy::too_many_arguments)]
pub(crate) fn batchnorm_backward<T: Element>(
    grad_out: &[T],
    normalized: &[T],
    inv_std: &[T],
    gamma: &[T],
    [n, c, h, w]: [usize; 4],
    batch_stats: bool,
) -> (Vec<T>, Vec<T>, Vec<T>) {
    let plane = h * w;
    let count = T::from_usize(n * plane).expect("count fits");
    let mut gx = vec![T::zero(); grad_out.len()];
    let mut ggamma = vec![T::zero(); c];
    let mut gbeta = vec![T::zero(); c];
    for ci in 0..c {
        let mut sum_dy = T::zero();
        let mut sum_dy_xh = T::zero();
        for ni in 0..n {
            let off = (ni * c + ci) * plane;
            for i in off..off + plane {
                sum_dy = sum_dy + grad_out[i];
                sum_dy_xh = sum_dy_xh + grad_out[i] * normalized[i];
            }
        }
        ggamma[ci] = sum_dy_xh;
        gbeta[ci] = sum_dy;
        let scale = gamma[ci] * inv_std[ci];
        for ni in 0..n {
            let off = (ni * c + ci) * plane;
            for i in off..off + plane {
                gx[i] = if batch_stats {
                    scale * (grad_out[i] - (sum_dy + normalized[i] * sum_dy_xh) / count)
                } else {
                    scale * grad_out[i]
                };
            }
        }
    }
    (gx, ggamma, gbeta)
}

pub(crate) fn softmax_channels_forward<T: Element>(x: &[T], [n, c, h, w]: [usize; 4]) -> Vec<T> {
    let plane = h * w;
    let mut out = vec![T::zero(); x.len()];
    for ni in 0..n {
        let base = ni * c * plane;
        for p in 0..plane {
            let mut m = x[base + p];
            for ci in 1..c {
                m = m.max(x[base + ci * plane + p]);
            }
            let mut s = T::zero();
            for ci in 0..c {
                let e = (x[base + ci * plane + p] - m).exp();
                out[base + ci * plane + p] = e;
                s = s + e;
            }
            for ci in 0..c {
                out[base + ci * plane + p] = out[base + ci * plane + p] / s;
            }
        }
    }
    out
}

pub(crate) fn softmax_channels_backward<T: Element>(
    y: &[T],
    grad_out: &[T],
    [n, c, h, w]: [usize; 4],
) -> Vec<T> {
    let plane = h * w;
    let mut gx = vec![T::zero(); y.len()];
    for ni in 0..n {
        let base = ni * c * plane;
        for p in 0..plane {
            let mut dot = T::zero();
            for ci in 0..c {
                dot = dot + y[base + ci * plane + p] * grad_out[base + ci * plane + p];
            }
            for ci in 0..c {
                let i = base + ci * plane + p;
                gx[i] = y[i] * (grad_out[i] - dot);
            }
        }
    }
    gx
}

#[cfg(test)]
mod tests {
    use super::*;

    fn direct_conv(x: &[f64], w: &[f64], h: usize, wd: usize, ks: usize, d: usize) -> Vec<f64> {
        let pad = (d * (ks - 1) / 2) as isize;
        let mut out = vec![0.0; h * wd];
        for y in 0..h as isize {
            for xx in 0..wd as isize {
                let mut s = 0.0;
                for ky in 0..ks as isize {
                    for kx in 0..ks as isize {
                        let iy = y + ky * d as isize - pad;
                        let ix = xx + kx * d as isize - pad;
                        if iy >= 0 && ix >= 0 && iy < h as isize && ix < wd as isize {
                            s += w[(ky * ks as isize + kx) as usize]
                                * x[(iy * wd as isize + ix) as usize];
                        }
                    }
                }
                out[(y * wd as isize + xx) as usize] = s;
            }
        }
        out
    }

    #[test]
    fn matches_direct_convolution_for_all_dilations() {
        let (h, w) = (11, 9);
        let x: Vec<f64> = (0..h * w).map(|i| ((i * 37 % 17) as f64) - 8.0).collect();
        let k: Vec<f64> = (0..9).map(|i| (i as f64) * 0.5 - 2.0).collect();
        for d in 1..=6 {
            let g = ConvGeom {
                n: 1,
                c: 1,
                h,
                w,
                k: 1,
                ksize: 3,
                dilation: d,
            };
            let got = conv2d_forward(&x, &k, &[0.0], g);
            assert_eq!(got, direct_conv(&x, &k, h, w, 3, d), "dilation {d}");
        }
    }

    #[test]
    fn valid_range_handles_offsets_beyond_extent() {
        assert_eq!(valid_range(5, 0), (0, 5));
        assert_eq!(valid_range(5, 2), (0, 3));
        assert_eq!(valid_range(5, -2), (2, 5));
        assert_eq!(valid_range(5, 7), (0, 0));
        assert_eq!(valid_range(5, -5), (0, 0));
    }
}
