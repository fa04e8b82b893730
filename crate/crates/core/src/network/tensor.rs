//! Minimal NCHW `f32` tensor and GEMM helpers.

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub data: Vec<f32>,
}

impl Tensor {
    pub fn zeros(n: usize, c: usize, h: usize, w: usize) -> Self {
        Self {
            n,
            c,
            h,
            w,
            data: vec![0.0; n * c * h * w],
        }
    }

    pub fn from_vec(n: usize, c: usize, h: usize, w: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != n * c * h * w {
            return Err(Error::Shape(format!(
                "tensor {n}x{c}x{h}x{w} needs {} values, got {}",
                n * c * h * w,
                data.len()
            )));
        }
        Ok(Self { n, c, h, w, data })
    }

    pub fn shape(&self) -> [usize; 4] {
        [self.n, self.c, self.h, self.w]
    }

    #[inline]
    pub fn plane_len(&self) -> usize {
        self.h * self.w
    }

    #[inline]
    pub fn sample_len(&self) -> usize {
        self.c * self.h * self.w
    }

    pub fn sample(&self, b: usize) -> &[f32] {
        let s = self.sample_len();
        &self.data[b * s..(b + 1) * s]
    }

    pub fn sample_mut(&mut self, b: usize) -> &mut [f32] {
        let s = self.sample_len();
        &mut self.data[b * s..(b + 1) * s]
    }

    pub fn plane(&self, b: usize, c: usize) -> &[f32] {
        let p = self.plane_len();
        let off = (b * self.c + c) * p;
        &self.data[off..off + p]
    }

    pub fn plane_mut(&mut self, b: usize, c: usize) -> &mut [f32] {
        let p = self.plane_len();
        let off = (b * self.c + c) * p;
        &mut self.data[off..off + p]
    }

    pub fn add_assign(&mut self, other: &Tensor) {
        debug_assert_eq!(self.shape(), other.shape());
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    pub fn scale(&mut self, s: f32) {
        self.data.iter_mut().for_each(|v| *v *= s);
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Channel concatenation of tensors sharing `n`, `h`, `w`.
    pub fn concat_channels(parts: &[&Tensor]) -> Tensor {
        let first = parts[0];
        let (n, h, w) = (first.n, first.h, first.w);
        let c: usize = parts.iter().map(|t| t.c).sum();
        let mut out = Tensor::zeros(n, c, h, w);
        for b in 0..n {
            let mut off = 0;
            let dst = out.sample_mut(b);
            for t in parts {
                debug_assert_eq!((t.n, t.h, t.w), (n, h, w));
                let src = t.sample(b);
                dst[off..off + src.len()].copy_from_slice(src);
                off += src.len();
            }
        }
        out
    }

    /// Inverse of [`Tensor::concat_channels`]: splits into the given channel counts.
    pub fn split_channels(&self, counts: &[usize]) -> Vec<Tensor> {
        debug_assert_eq!(counts.iter().sum::<usize>(), self.c);
        let mut outs: Vec<Tensor> = counts.iter().map(|&c| Tensor::zeros(self.n, c, self.h, self.w)).collect();
        for b in 0..self.n {
            let src = self.sample(b);
            let mut off = 0;
            for t in outs.iter_mut() {
                let len = t.sample_len();
                t.sample_mut(b).copy_from_slice(&src[off..off + len]);
                off += len;
            }
        }
        outs
    }

    /// Zero-pads (or edge-replicates, when `replicate`) at the bottom and right.
    pub fn pad_bottom_right(&self, pad_h: usize, pad_w: usize, replicate: bool) -> Tensor {
        if pad_h == 0 && pad_w == 0 {
            return self.clone();
        }
        let (oh, ow) = (self.h + pad_h, self.w + pad_w);
        let mut out = Tensor::zeros(self.n, self.c, oh, ow);
        for b in 0..self.n {
            for c in 0..self.c {
                let src = self.plane(b, c);
                let dst = out.plane_mut(b, c);
                for y in 0..oh {
                    if y >= self.h && !replicate {
                        break;
                    }
                    let sy = y.min(self.h - 1);
                    for x in 0..ow {
                        if x >= self.w && !replicate {
                            break;
                        }
                        dst[y * ow + x] = src[sy * self.w + x.min(self.w - 1)];
                    }
                }
            }
        }
        out
    }

    /// Top-left `h x w` window.
    pub fn crop(&self, h: usize, w: usize) -> Tensor {
        if h == self.h && w == self.w {
            return self.clone();
        }
        let mut out = Tensor::zeros(self.n, self.c, h, w);
        for b in 0..self.n {
            for c in 0..self.c {
                let src = self.plane(b, c);
                let dst = out.plane_mut(b, c);
                for y in 0..h {
                    dst[y * w..(y + 1) * w].copy_from_slice(&src[y * self.w..y * self.w + w]);
                }
            }
        }
        out
    }
}

/// `c = alpha * op(a) * op(b) + beta * c` on row-major buffers with explicit
/// strides, so transposes are free.
#[allow(clippy::too_many_arguments)]
#[inline]
pub(crate) fn sgemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f32],
    rsa: usize,
    csa: usize,
    b: &[f32],
    rsb: usize,
    csb: usize,
    c: &mut [f32],
    beta: f32,
) {
    debug_assert!(m == 0 || k == 0 || a.len() > (m - 1) * rsa + (k - 1) * csa);
    debug_assert!(k == 0 || n == 0 || b.len() > (k - 1) * rsb + (n - 1) * csb);
    debug_assert!(c.len() >= m * n);
    // SAFETY: the bounds above cover every element the kernel touches.
    unsafe {
        matrixmultiply::sgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gemm_matches_naive() {
        let (m, k, n) = (3, 4, 5);
        let a: Vec<f32> = (0..m * k).map(|i| i as f32 * 0.5 - 2.0).collect();
        let b: Vec<f32> = (0..k * n).map(|i| (i % 7) as f32 - 3.0).collect();
        let mut c = vec![1.0; m * n];
        sgemm(m, k, n, &a, k, 1, &b, n, 1, &mut c, 1.0);
        for i in 0..m {
            for j in 0..n {
                let mut acc = 1.0;
                for p in 0..k {
                    acc += a[i * k + p] * b[p * n + j];
                }
                assert!((c[i * n + j] - acc).abs() < 1e-4);
            }
        }
        // transposed a
        let at: Vec<f32> = (0..k * m).map(|i| a[(i % m) * k + i / m]).collect();
        let mut c2 = vec![0.0; m * n];
        sgemm(m, k, n, &at, 1, m, &b, n, 1, &mut c2, 0.0);
        for (x, y) in c2.iter().zip(&c) {
            assert!((x + 1.0 - y).abs() < 1e-4);
        }
    }

    #[test]
    fn concat_split_round_trip() {
        let a = Tensor::from_vec(2, 1, 1, 2, vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let b = Tensor::from_vec(2, 2, 1, 2, (0..8).map(|v| v as f32 * 10.0).collect()).unwrap();
        let cat = Tensor::concat_channels(&[&a, &b]);
        assert_eq!(cat.c, 3);
        assert_eq!(cat.sample(1), &[3.0, 4.0, 40.0, 50.0, 60.0, 70.0]);
        let parts = cat.split_channels(&[1, 2]);
        assert_eq!(parts[0], a);
        assert_eq!(parts[1], b);
    }

    #[test]
    fn pad_then_crop_is_identity() {
        let t = Tensor::from_vec(1, 1, 2, 3, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        let p = t.pad_bottom_right(2, 1, true);
        assert_eq!((p.h, p.w), (4, 4));
        assert_eq!(p.data[15], 6.0);
        let z = t.pad_bottom_right(2, 1, false);
        assert_eq!(z.data[15], 0.0);
        assert_eq!(p.crop(2, 3), t);
    }
}
