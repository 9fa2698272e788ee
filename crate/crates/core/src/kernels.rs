//! Raw convolution, pooling and filtering kernels on NCHW buffers.
//!
//! These are shape-unchecked building blocks; [`crate::autograd::Tape`]
//! validates shapes before calling in.

use crate::scalar::Scalar;

/// Geometry of one 2-D convolution.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub in_ch: usize,
    pub in_h: usize,
    pub in_w: usize,
    pub out_ch: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvGeom {
    pub fn out_h(&self) -> usize {
        (self.in_h + 2 * self.pad - self.kh) / self.stride + 1
    }

    pub fn out_w(&self) -> usize {
        (self.in_w + 2 * self.pad - self.kw) / self.stride + 1
    }

    pub fn patch(&self) -> usize {
        self.in_ch * self.kh * self.kw
    }

    pub fn valid(&self) -> bool {
        self.stride > 0
            && self.in_h + 2 * self.pad >= self.kh
            && self.in_w + 2 * self.pad >= self.kw
    }
}

/// Unfolds one sample `[C, H, W]` into columns `[C*kh*kw, Ho*Wo]`.
pub fn im2col<T: Scalar>(g: &ConvGeom, x: &[T], cols: &mut [T]) {
    let (oh, ow) = (g.out_h(), g.out_w());
    let plane = oh * ow;
    let pad = g.pad as isize;
    for c in 0..g.in_ch {
        let xc = &x[c * g.in_h * g.in_w..(c + 1) * g.in_h * g.in_w];
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (c * g.kh + ki) * g.kw + kj;
                let dst = &mut cols[row * plane..(row + 1) * plane];
                for oy in 0..oh {
                    let iy = (oy * g.stride + ki) as isize - pad;
                    let out_row = &mut dst[oy * ow..(oy + 1) * ow];
                    if iy < 0 || iy >= g.in_h as isize {
                        out_row.fill(T::zero());
                        continue;
                    }
                    let src = &xc[iy as usize * g.in_w..(iy as usize + 1) * g.in_w];
                    for (ox, o) in out_row.iter_mut().enumerate() {
                        let ix = (ox * g.stride + kj) as isize - pad;
                        *o = if ix < 0 || ix >= g.in_w as isize {
                            T::zero()
                        } else {
                            src[ix as usize]
                        };
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: accumulates columns back into `dx`.
pub fn col2im<T: Scalar>(g: &ConvGeom, cols: &[T], dx: &mut [T]) {
    let (oh, ow) = (g.out_h(), g.out_w());
    let plane = oh * ow;
    let pad = g.pad as isize;
    for c in 0..g.in_ch {
        let xc = &mut dx[c * g.in_h * g.in_w..(c + 1) * g.in_h * g.in_w];
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (c * g.kh + ki) * g.kw + kj;
                let src = &cols[row * plane..(row + 1) * plane];
                for oy in 0..oh {
                    let iy = (oy * g.stride + ki) as isize - pad;
                    if iy < 0 || iy >= g.in_h as isize {
                        continue;
                    }
                    let dst = &mut xc[iy as usize * g.in_w..(iy as usize + 1) * g.in_w];
                    for ox in 0..ow {
                        let ix = (ox * g.stride + kj) as isize - pad;
                        if ix >= 0 && ix < g.in_w as isize {
                            dst[ix as usize] += src[oy * ow + ox];
                        }
                    }
                }
            }
        }
    }
}

/// Batched convolution forward. `x` is `[N, C, H, W]`, `w` is `[O, C, kh, kw]`.
pub fn conv2d_forward<T: Scalar>(
    g: &ConvGeom,
    batch: usize,
    x: &[T],
    w: &[T],
    bias: Option<&[T]>,
    out: &mut [T],
) {
    let (plane, patch) = (g.out_h() * g.out_w(), g.patch());
    let in_size = g.in_ch * g.in_h * g.in_w;
    let out_size = g.out_ch * plane;
    let mut cols = vec![T::zero(); patch * plane];
    for n in 0..batch {
        im2col(g, &x[n * in_size..(n + 1) * in_size], &mut cols);
        let y = &mut out[n * out_size..(n + 1) * out_size];
        T::gemm(
            g.out_ch,
            patch,
            plane,
            T::one(),
            w,
            patch as isize,
            1,
            &cols,
            plane as isize,
            1,
            T::zero(),
            y,
            plane as isize,
            1,
        );
        if let Some(b) = bias {
            for (o, &bo) in b.iter().enumerate() {
                for v in &mut y[o * plane..(o + 1) * plane] {
                    *v += bo;
                }
            }
        }
    }
}

/// Batched convolution backward; each output gradient is optional.
#[allow(clippy::too_many_arguments)]
pub fn conv2d_backward<T: Scalar>(
    g: &ConvGeom,
    batch: usize,
    x: &[T],
    w: &[T],
    dy: &[T],
    mut dx: Option<&mut [T]>,
    mut dw: Option<&mut [T]>,
    mut db: Option<&mut [T]>,
) {
    let (plane, patch) = (g.out_h() * g.out_w(), g.patch());
    let in_size = g.in_ch * g.in_h * g.in_w;
    let out_size = g.out_ch * plane;
    let mut cols = vec![T::zero(); patch * plane];
    for n in 0..batch {
        let dyn_ = &dy[n * out_size..(n + 1) * out_size];
        if let Some(dw) = dw.as_deref_mut() {
            im2col(g, &x[n * in_size..(n + 1) * in_size], &mut cols);
            // dW += dY · cols^T
            T::gemm(
                g.out_ch,
                plane,
                patch,
                T::one(),
                dyn_,
                plane as isize,
                1,
                &cols,
                1,
                plane as isize,
                T::one(),
                dw,
                patch as isize,
                1,
            );
        }
        if let Some(dx) = dx.as_deref_mut() {
            // dcols = W^T · dY
            T::gemm(
                patch,
                g.out_ch,
                plane,
                T::one(),
                w,
                1,
                patch as isize,
                dyn_,
                plane as isize,
                1,
                T::zero(),
                &mut cols,
                plane as isize,
                1,
            );
            col2im(g, &cols, &mut dx[n * in_size..(n + 1) * in_size]);
        }
        if let Some(db) = db.as_deref_mut() {
            for (o, d) in db.iter_mut().enumerate() {
                *d += dyn_[o * plane..(o + 1) * plane].iter().copied().sum();
            }
        }
    }
}

/// 2×2 stride-2 max pooling over `planes` planes of `h × w`; returns argmax offsets.
pub fn maxpool2_forward<T: Scalar>(
    planes: usize,
    h: usize,
    w: usize,
    x: &[T],
    out: &mut [T],
) -> Vec<u32> {
    let (oh, ow) = (h / 2, w / 2);
    let mut arg = vec![0u32; planes * oh * ow];
    for p in 0..planes {
        let xp = &x[p * h * w..(p + 1) * h * w];
        for oy in 0..oh {
            for ox in 0..ow {
                let mut best = 2 * oy * w + 2 * ox;
                for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                    let idx = (2 * oy + dy) * w + 2 * ox + dx;
                    if xp[idx] > xp[best] {
                        best = idx;
                    }
                }
                let o = p * oh * ow + oy * ow + ox;
                out[o] = xp[best];
                arg[o] = (p * h * w + best) as u32;
            }
        }
    }
    arg
}

/// Sum over every valid `k × k` window (stride 1, no padding) of each plane.
pub fn box_sum_forward<T: Scalar>(planes: usize, h: usize, w: usize, k: usize, x: &[T], out: &mut [T]) {
    let (oh, ow) = (h + 1 - k, w + 1 - k);
    let mut rows = vec![T::zero(); h * ow];
    for p in 0..planes {
        let xp = &x[p * h * w..(p + 1) * h * w];
        for y in 0..h {
            let src = &xp[y * w..(y + 1) * w];
            let dst = &mut rows[y * ow..(y + 1) * ow];
            let mut acc: T = src[..k].iter().copied().sum();
            dst[0] = acc;
            for j in 1..ow {
                acc += src[j + k - 1] - src[j - 1];
                dst[j] = acc;
            }
        }
        let op = &mut out[p * oh * ow..(p + 1) * oh * ow];
        for j in 0..ow {
            let mut acc = T::zero();
            for y in 0..k {
                acc += rows[y * ow + j];
            }
            op[j] = acc;
            for i in 1..oh {
                acc += rows[(i + k - 1) * ow + j] - rows[(i - 1) * ow + j];
                op[i * ow + j] = acc;
            }
        }
    }
}

/// Adjoint of [`box_sum_forward`].
pub fn box_sum_backward<T: Scalar>(planes: usize, h: usize, w: usize, k: usize, dy: &[T], dx: &mut [T]) {
    let (oh, ow) = (h + 1 - k, w + 1 - k);
    let mut rows = vec![T::zero(); h * ow];
    for p in 0..planes {
        rows.fill(T::zero());
        let dp = &dy[p * oh * ow..(p + 1) * oh * ow];
        for i in 0..oh {
            for dyo in 0..k {
                let dst = &mut rows[(i + dyo) * ow..(i + dyo + 1) * ow];
                for (d, &s) in dst.iter_mut().zip(&dp[i * ow..(i + 1) * ow]) {
                    *d += s;
                }
            }
        }
        let xp = &mut dx[p * h * w..(p + 1) * h * w];
        for y in 0..h {
            let src = &rows[y * ow..(y + 1) * ow];
            let dst = &mut xp[y * w..(y + 1) * w];
            for (j, &s) in src.iter().enumerate() {
                for d in &mut dst[j..j + k] {
                    *d += s;
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive_conv(g: &ConvGeom, x: &[f64], w: &[f64]) -> Vec<f64> {
        let (oh, ow) = (g.out_h(), g.out_w());
        let mut out = vec![0.0; g.out_ch * oh * ow];
        for o in 0..g.out_ch {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = 0.0;
                    for c in 0..g.in_ch {
                        for ki in 0..g.kh {
                            for kj in 0..g.kw {
                                let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                                let ix = (ox * g.stride + kj) as isize - g.pad as isize;
                                if iy < 0 || ix < 0 || iy >= g.in_h as isize || ix >= g.in_w as isize {
                                    continue;
                                }
                                acc += x[(c * g.in_h + iy as usize) * g.in_w + ix as usize]
                                    * w[((o * g.in_ch + c) * g.kh + ki) * g.kw + kj];
                            }
                        }
                    }
                    out[(o * oh + oy) * ow + ox] = acc;
                }
            }
        }
        out
    }

    #[test]
    fn conv_matches_direct_loop() {
        for &(stride, pad, k) in &[(1, 1, 3), (2, 1, 4), (1, 0, 3), (2, 0, 2)] {
            let g = ConvGeom {
                in_ch: 2,
                in_h: 7,
                in_w: 6,
                out_ch: 3,
                kh: k,
                kw: k,
                stride,
                pad,
            };
            let x: Vec<f64> = (0..2 * 7 * 6).map(|i| ((i * 37) % 11) as f64 - 5.0).collect();
            let w: Vec<f64> = (0..3 * 2 * k * k).map(|i| ((i * 13) % 7) as f64 * 0.1).collect();
            let mut out = vec![0.0; 3 * g.out_h() * g.out_w()];
            conv2d_forward(&g, 1, &x, &w, None, &mut out);
            let want = naive_conv(&g, &x, &w);
            for (a, b) in out.iter().zip(&want) {
                assert!((a - b).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn box_sum_matches_naive() {
        let (h, w, k) = (6, 7, 3);
        let x: Vec<f64> = (0..h * w).map(|i| (i as f64).cos()).collect();
        let mut out = vec![0.0; (h - 2) * (w - 2)];
        box_sum_forward(1, h, w, k, &x, &mut out);
        for i in 0..h - 2 {
            for j in 0..w - 2 {
                let mut s = 0.0;
                for a in 0..k {
                    for b in 0..k {
                        s += x[(i + a) * w + j + b];
                    }
                }
                assert!((out[i * (w - 2) + j] - s).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn box_sum_backward_is_adjoint() {
        let (h, w, k) = (5, 6, 3);
        let x: Vec<f64> = (0..h * w).map(|i| (i as f64 * 0.7).sin()).collect();
        let dy: Vec<f64> = (0..(h - 2) * (w - 2)).map(|i| (i as f64 * 0.3).cos()).collect();
        let mut y = vec![0.0; dy.len()];
        box_sum_forward(1, h, w, k, &x, &mut y);
        let mut dx = vec![0.0; x.len()];
        box_sum_backward(1, h, w, k, &dy, &mut dx);
        let lhs: f64 = y.iter().zip(&dy).map(|(a, b)| a * b).sum();
        let rhs: f64 = x.iter().zip(&dx).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-10);
    }
}
