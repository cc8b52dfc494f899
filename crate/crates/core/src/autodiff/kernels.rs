//! Forward and backward kernels on flat NCHW buffers.
//!
//! Convolution is correlation (no kernel flip) lowered to im2col + GEMM per
//! image. Per-image work is dispatched through [`crate::parallel`]; weight
//! gradients are reduced in image order so results do not depend on the
//! thread count.

use ndarray::linalg::general_mat_mul;
use ndarray::{ArrayView2, ArrayViewMut2};

use crate::parallel;
use crate::tensor::Scalar;

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeom {
    pub batch: usize,
    pub in_ch: usize,
    pub height: usize,
    pub width: usize,
    pub out_ch: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvGeom {
    pub fn out_hw(&self) -> (usize, usize) {
        (
            (self.height + 2 * self.pad - self.kernel) / self.stride + 1,
            (self.width + 2 * self.pad - self.kernel) / self.stride + 1,
        )
    }

    fn patch(&self) -> usize {
        self.in_ch * self.kernel * self.kernel
    }

    fn out_plane(&self) -> usize {
        let (oh, ow) = self.out_hw();
        oh * ow
    }
}

/// `c = a · b` (optionally transposed operands) with `beta` scaling of `c`.
#[allow(clippy::too_many_arguments)]
fn gemm<T: Scalar>(
    a: &[T],
    (ar, ac): (usize, usize),
    trans_a: bool,
    b: &[T],
    (br, bc): (usize, usize),
    trans_b: bool,
    c: &mut [T],
    beta: T,
) {
    let a = ArrayView2::from_shape((ar, ac), a).expect("gemm lhs shape");
    let b = ArrayView2::from_shape((br, bc), b).expect("gemm rhs shape");
    let a = if trans_a { a.reversed_axes() } else { a };
    let b = if trans_b { b.reversed_axes() } else { b };
    let mut c = ArrayViewMut2::from_shape((a.nrows(), b.ncols()), c).expect("gemm out shape");
    general_mat_mul(T::one(), &a, &b, beta, &mut c);
}

/// `c = a · b` for row-major `a: m×k`, `b: k×n`, accumulating every output
/// strictly in ascending `k`. Inserting zero rows/columns along `k` therefore
/// leaves every result bit unchanged, which forward passes rely on when a
/// soft-pruned model is compared with its extracted core.
fn gemm_ordered<T: Scalar>(a: &[T], m: usize, k: usize, b: &[T], n: usize, c: &mut [T]) {
    debug_assert!(a.len() == m * k && b.len() == k * n && c.len() == m * n);
    c.iter_mut().for_each(|v| *v = T::zero());
    for (arow, crow) in a.chunks_exact(k.max(1)).zip(c.chunks_exact_mut(n.max(1))) {
        for (&av, brow) in arow.iter().zip(b.chunks_exact(n.max(1))) {
            if av == T::zero() {
                continue;
            }
            crow.iter_mut().zip(brow).for_each(|(cv, &bv)| *cv += av * bv);
        }
    }
}

fn im2col<T: Scalar>(img: &[T], g: &ConvGeom, cols: &mut [T]) {
    let (oh, ow) = g.out_hw();
    let k = g.kernel;
    let plane = oh * ow;
    for c in 0..g.in_ch {
        let src = &img[c * g.height * g.width..(c + 1) * g.height * g.width];
        for ky in 0..k {
            for kx in 0..k {
                let row = (c * k + ky) * k + kx;
                let dst = &mut cols[row * plane..(row + 1) * plane];
                for oy in 0..oh {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    let line = &mut dst[oy * ow..(oy + 1) * ow];
                    if iy < 0 || iy as usize >= g.height {
                        line.iter_mut().for_each(|v| *v = T::zero());
                        continue;
                    }
                    let srow = &src[iy as usize * g.width..(iy as usize + 1) * g.width];
                    for (ox, v) in line.iter_mut().enumerate() {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        *v = if ix < 0 || ix as usize >= g.width {
                            T::zero()
                        } else {
                            srow[ix as usize]
                        };
                    }
                }
            }
        }
    }
}

fn col2im<T: Scalar>(cols: &[T], g: &ConvGeom, img: &mut [T]) {
    let (oh, ow) = g.out_hw();
    let k = g.kernel;
    let plane = oh * ow;
    for c in 0..g.in_ch {
        let dst = &mut img[c * g.height * g.width..(c + 1) * g.height * g.width];
        for ky in 0..k {
            for kx in 0..k {
                let row = (c * k + ky) * k + kx;
                let src = &cols[row * plane..(row + 1) * plane];
                for oy in 0..oh {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy as usize >= g.height {
                        continue;
                    }
                    for ox in 0..ow {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        if ix < 0 || ix as usize >= g.width {
                            continue;
                        }
                        dst[iy as usize * g.width + ix as usize] += src[oy * ow + ox];
                    }
                }
            }
        }
    }
}

/// Returns `(output, cols)`; `cols` is the im2col buffer kept for backward.
pub fn conv2d_forward<T: Scalar>(input: &[T], weight: &[T], bias: Option<&[T]>, g: &ConvGeom) -> (Vec<T>, Vec<T>) {
    let patch = g.patch();
    let plane = g.out_plane();
    let in_img = g.in_ch * g.height * g.width;
    let mut cols = vec![T::zero(); g.batch * patch * plane];
    let mut out = vec![T::zero(); g.batch * g.out_ch * plane];
    parallel::for_each_chunk2(&mut out, g.out_ch * plane, &mut cols, patch * plane, |n, y, col| {
        im2col(&input[n * in_img..(n + 1) * in_img], g, col);
        gemm_ordered(weight, g.out_ch, patch, col, plane, y);
        if let Some(b) = bias {
            for (o, row) in y.chunks_mut(plane).enumerate() {
                row.iter_mut().for_each(|v| *v += b[o]);
            }
        }
    });
    (out, cols)
}

/// Returns `(d_input, d_weight, d_bias)`.
pub fn conv2d_backward<T: Scalar>(
    grad_out: &[T],
    cols: &[T],
    weight: &[T],
    has_bias: bool,
    g: &ConvGeom,
) -> (Vec<T>, Vec<T>, Option<Vec<T>>) {
    let patch = g.patch();
    let plane = g.out_plane();
    let in_img = g.in_ch * g.height * g.width;
    let wlen = g.out_ch * patch;
    let mut d_input = vec![T::zero(); g.batch * in_img];
    let mut d_weight_parts = vec![T::zero(); g.batch * wlen];
    parallel::for_each_chunk2(&mut d_input, in_img, &mut d_weight_parts, wlen, |n, dx, dw| {
        let dy = &grad_out[n * g.out_ch * plane..(n + 1) * g.out_ch * plane];
        let col = &cols[n * patch * plane..(n + 1) * patch * plane];
        gemm(dy, (g.out_ch, plane), false, col, (patch, plane), true, dw, T::zero());
        let mut dcol = vec![T::zero(); patch * plane];
        gemm(
            weight,
            (g.out_ch, patch),
            true,
            dy,
            (g.out_ch, plane),
            false,
            &mut dcol,
            T::zero(),
        );
        col2im(&dcol, g, dx);
    });
    let mut d_weight = vec![T::zero(); wlen];
    for part in d_weight_parts.chunks(wlen) {
        d_weight.iter_mut().zip(part).for_each(|(a, &b)| *a += b);
    }
    let d_bias = has_bias.then(|| {
        let mut db = vec![T::zero(); g.out_ch];
        for img in grad_out.chunks(g.out_ch * plane) {
            for (o, row) in img.chunks(plane).enumerate() {
                db[o] += row.iter().copied().sum::<T>();
            }
        }
        db
    });
    (d_input, d_weight, d_bias)
}

/// `y[n, o] = Σ_i x[n, i] w[o, i] + b[o]`.
pub fn linear_forward<T: Scalar>(
    x: &[T],
    weight: &[T],
    bias: Option<&[T]>,
    batch: usize,
    in_f: usize,
    out_f: usize,
) -> Vec<T> {
    let mut wt = vec![T::zero(); in_f * out_f];
    for (o, row) in weight.chunks_exact(in_f.max(1)).enumerate() {
        for (i, &v) in row.iter().enumerate() {
            wt[i * out_f + o] = v;
        }
    }
    let mut y = vec![T::zero(); batch * out_f];
    gemm_ordered(x, batch, in_f, &wt, out_f, &mut y);
    if let Some(b) = bias {
        for row in y.chunks_mut(out_f) {
            row.iter_mut().zip(b).for_each(|(v, &bb)| *v += bb);
        }
    }
    y
}

pub fn linear_backward<T: Scalar>(
    grad_out: &[T],
    x: &[T],
    weight: &[T],
    has_bias: bool,
    batch: usize,
    in_f: usize,
    out_f: usize,
) -> (Vec<T>, Vec<T>, Option<Vec<T>>) {
    let mut dx = vec![T::zero(); batch * in_f];
    gemm(
        grad_out,
        (batch, out_f),
        false,
        weight,
        (out_f, in_f),
        false,
        &mut dx,
        T::zero(),
    );
    let mut dw = vec![T::zero(); out_f * in_f];
    gemm(
        grad_out,
        (batch, out_f),
        true,
        x,
        (batch, in_f),
        false,
        &mut dw,
        T::zero(),
    );
    let db = has_bias.then(|| {
        let mut db = vec![T::zero(); out_f];
        for row in grad_out.chunks(out_f) {
            db.iter_mut().zip(row).for_each(|(a, &b)| *a += b);
        }
        db
    });
    (dx, dw, db)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PoolGeom {
    pub batch: usize,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub kernel: usize,
    pub stride: usize,
}

impl PoolGeom {
    pub fn out_hw(&self) -> (usize, usize) {
        (
            (self.height - self.kernel) / self.stride + 1,
            (self.width - self.kernel) / self.stride + 1,
        )
    }
}

/// Returns `(output, argmax)` with argmax as flat input offsets.
pub fn maxpool_forward<T: Scalar>(x: &[T], g: &PoolGeom) -> (Vec<T>, Vec<usize>) {
    let (oh, ow) = g.out_hw();
    let planes = g.batch * g.channels;
    let mut out = Vec::with_capacity(planes * oh * ow);
    let mut arg = Vec::with_capacity(planes * oh * ow);
    for p in 0..planes {
        let base = p * g.height * g.width;
        for oy in 0..oh {
            for ox in 0..ow {
                let mut best = base + oy * g.stride * g.width + ox * g.stride;
                for ky in 0..g.kernel {
                    for kx in 0..g.kernel {
                        let idx = base + (oy * g.stride + ky) * g.width + ox * g.stride + kx;
                        // Strict comparison keeps the first maximum.
                        if x[idx] > x[best] {
                            best = idx;
                        }
                    }
                }
                out.push(x[best]);
                arg.push(best);
            }
        }
    }
    (out, arg)
}

pub fn maxpool_backward<T: Scalar>(grad_out: &[T], argmax: &[usize], input_len: usize) -> Vec<T> {
    let mut dx = vec![T::zero(); input_len];
    for (&g, &i) in grad_out.iter().zip(argmax) {
        dx[i] += g;
    }
    dx
}

pub fn avgpool_forward<T: Scalar>(x: &[T], g: &PoolGeom) -> Vec<T> {
    let (oh, ow) = g.out_hw();
    let scale = T::one() / T::from_usize(g.kernel * g.kernel);
    let mut out = Vec::with_capacity(g.batch * g.channels * oh * ow);
    for p in 0..g.batch * g.channels {
        let base = p * g.height * g.width;
        for oy in 0..oh {
            for ox in 0..ow {
                let mut acc = T::zero();
                for ky in 0..g.kernel {
                    let row = base + (oy * g.stride + ky) * g.width + ox * g.stride;
                    for kx in 0..g.kernel {
                        acc += x[row + kx];
                    }
                }
                out.push(acc * scale);
            }
        }
    }
    out
}

pub fn avgpool_backward<T: Scalar>(grad_out: &[T], g: &PoolGeom) -> Vec<T> {
    let (oh, ow) = g.out_hw();
    let scale = T::one() / T::from_usize(g.kernel * g.kernel);
    let mut dx = vec![T::zero(); g.batch * g.channels * g.height * g.width];
    for p in 0..g.batch * g.channels {
        let base = p * g.height * g.width;
        for oy in 0..oh {
            for ox in 0..ow {
                let gv = grad_out[(p * oh + oy) * ow + ox] * scale;
                for ky in 0..g.kernel {
                    let row = base + (oy * g.stride + ky) * g.width + ox * g.stride;
                    for kx in 0..g.kernel {
                        dx[row + kx] += gv;
                    }
                }
            }
        }
    }
    dx
}

/// Per-channel normalization cache produced by the forward pass.
#[derive(Debug, Clone)]
pub struct BnCache<T> {
    pub xhat: Vec<T>,
    pub inv_std: Vec<T>,
    /// Batch mean and unbiased variance (training mode only; channels
    /// normalized with stored statistics repeat those).
    pub batch_mean: Vec<T>,
    pub batch_var: Vec<T>,
    pub training: bool,
    /// Channels normalized with batch statistics.
    pub from_batch: Vec<bool>,
}

#[allow(clippy::too_many_arguments)]
pub fn batchnorm_forward<T: Scalar>(
    x: &[T],
    batch: usize,
    channels: usize,
    plane: usize,
    gamma: &[T],
    beta: &[T],
    running_mean: &[T],
    running_var: &[T],
    training: bool,
    fixed: Option<&[bool]>,
) -> (Vec<T>, BnCache<T>) {
    let eps = T::from_f64(BN_EPS);
    let count = batch * plane;
    let mut mean = running_mean.to_vec();
    let mut var = running_var.to_vec();
    let mut unbiased = running_var.to_vec();
    let from_batch: Vec<bool> = (0..channels)
        .map(|c| training && !fixed.is_some_and(|f| f[c]))
        .collect();
    if training {
        for c in (0..channels).filter(|&c| from_batch[c]) {
            let mut s = T::zero();
            for n in 0..batch {
                let off = (n * channels + c) * plane;
                s += x[off..off + plane].iter().copied().sum::<T>();
            }
            let m = s / T::from_usize(count);
            let mut sq = T::zero();
            for n in 0..batch {
                let off = (n * channels + c) * plane;
                for &v in &x[off..off + plane] {
                    let d = v - m;
                    sq += d * d;
                }
            }
            mean[c] = m;
            var[c] = sq / T::from_usize(count);
            unbiased[c] = if count > 1 {
                sq / T::from_usize(count - 1)
            } else {
                var[c]
            };
        }
    }
    let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
    let mut xhat = vec![T::zero(); x.len()];
    let mut y = vec![T::zero(); x.len()];
    for n in 0..batch {
        for c in 0..channels {
            let off = (n * channels + c) * plane;
            for i in off..off + plane {
                let h = (x[i] - mean[c]) * inv_std[c];
                xhat[i] = h;
                y[i] = gamma[c] * h + beta[c];
            }
        }
    }
    let cache = BnCache {
        xhat,
        inv_std,
        batch_mean: if training { mean } else { Vec::new() },
        batch_var: if training { unbiased } else { Vec::new() },
        training,
        from_batch,
    };
    (y, cache)
}

/// Returns `(dx, dgamma, dbeta)`.
pub fn batchnorm_backward<T: Scalar>(
    grad_out: &[T],
    cache: &BnCache<T>,
    gamma: &[T],
    batch: usize,
    channels: usize,
    plane: usize,
) -> (Vec<T>, Vec<T>, Vec<T>) {
    let count = T::from_usize(batch * plane);
    let mut dgamma = vec![T::zero(); channels];
    let mut dbeta = vec![T::zero(); channels];
    for n in 0..batch {
        for c in 0..channels {
            let off = (n * channels + c) * plane;
            for i in off..off + plane {
                dgamma[c] += grad_out[i] * cache.xhat[i];
                dbeta[c] += grad_out[i];
            }
        }
    }
    let mut dx = vec![T::zero(); grad_out.len()];
    for n in 0..batch {
        for c in 0..channels {
            let off = (n * channels + c) * plane;
            let scale = gamma[c] * cache.inv_std[c];
            for i in off..off + plane {
                dx[i] = if cache.from_batch[c] {
                    // dxhat = dy·γ; dx = inv_std/M · (M·dxhat − Σdxhat − xhat·Σ(dxhat·xhat))
                    scale * (grad_out[i] - dbeta[c] / count - cache.xhat[i] * dgamma[c] / count)
                } else {
                    scale * grad_out[i]
                };
            }
        }
    }
    (dx, dgamma, dbeta)
}

/// Mean cross-entropy with max-subtraction. Returns `(loss, softmax)`.
pub fn cross_entropy_forward<T: Scalar>(logits: &[T], labels: &[usize], classes: usize) -> (T, Vec<T>) {
    let batch = labels.len();
    let mut probs = vec![T::zero(); logits.len()];
    let mut total = T::zero();
    for (n, &label) in labels.iter().enumerate() {
        let row = &logits[n * classes..(n + 1) * classes];
        let max = row.iter().copied().fold(T::neg_infinity(), T::max);
        let mut denom = T::zero();
        for (p, &v) in probs[n * classes..(n + 1) * classes].iter_mut().zip(row) {
            *p = (v - max).exp();
            denom += *p;
        }
        probs[n * classes..(n + 1) * classes]
            .iter_mut()
            .for_each(|p| *p = *p / denom);
        total += denom.ln() - (row[label] - max);
    }
    (total / T::from_usize(batch), probs)
}

pub fn cross_entropy_backward<T: Scalar>(probs: &[T], labels: &[usize], classes: usize, grad_loss: T) -> Vec<T> {
    let scale = grad_loss / T::from_usize(labels.len());
    let mut d = probs.to_vec();
    for (n, &label) in labels.iter().enumerate() {
        d[n * classes + label] -= T::one();
    }
    d.iter_mut().for_each(|v| *v *= scale);
    d
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive_conv(x: &[f64], w: &[f64], g: &ConvGeom) -> Vec<f64> {
        let (oh, ow) = g.out_hw();
        let mut out = vec![0.0; g.batch * g.out_ch * oh * ow];
        for n in 0..g.batch {
            for o in 0..g.out_ch {
                for oy in 0..oh {
                    for ox in 0..ow {
                        let mut acc = 0.0;
                        for c in 0..g.in_ch {
                            for ky in 0..g.kernel {
                                for kx in 0..g.kernel {
                                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                                    let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                                    if iy < 0 || ix < 0 || iy as usize >= g.height || ix as usize >= g.width {
                                        continue;
                                    }
                                    acc += x[((n * g.in_ch + c) * g.height + iy as usize) * g.width + ix as usize]
                                        * w[((o * g.in_ch + c) * g.kernel + ky) * g.kernel + kx];
                                }
                            }
                        }
                        out[((n * g.out_ch + o) * oh + oy) * ow + ox] = acc;
                    }
                }
            }
        }
        out
    }

    #[test]
    fn im2col_conv_matches_direct_loop() {
        let g = ConvGeom {
            batch: 2,
            in_ch: 3,
            height: 5,
            width: 6,
            out_ch: 4,
            kernel: 3,
            stride: 2,
            pad: 1,
        };
        let x: Vec<f64> = (0..2 * 3 * 5 * 6).map(|i| ((i * 37 % 11) as f64) - 5.0).collect();
        let w: Vec<f64> = (0..4 * 3 * 9).map(|i| ((i * 13 % 7) as f64) * 0.5 - 1.5).collect();
        let (y, _) = conv2d_forward(&x, &w, None, &g);
        let expected = naive_conv(&x, &w, &g);
        for (a, b) in y.iter().zip(&expected) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn maxpool_keeps_first_maximum() {
        let g = PoolGeom {
            batch: 1,
            channels: 1,
            height: 2,
            width: 2,
            kernel: 2,
            stride: 2,
        };
        let (y, arg) = maxpool_forward(&[3.0f64, 3.0, 1.0, 2.0], &g);
        assert_eq!(y, vec![3.0]);
        assert_eq!(arg, vec![0]);
    }

    #[test]
    fn cross_entropy_stable_for_large_logits() {
        let (loss, probs) = cross_entropy_forward(&[1e4f32, -1e4, 0.0], &[0], 3);
        assert!(loss.is_finite() && loss.abs() < 1e-6);
        assert!(probs.iter().all(|p| p.is_finite()));
    }
}
