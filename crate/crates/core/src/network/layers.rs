//! Layers with explicit forward/backward passes.
//!
//! Each layer caches what its backward pass needs during a training-mode
//! forward; eval-mode forwards leave the caches empty. `backward` consumes
//! the cache, accumulates parameter gradients, and returns the gradient with
//! respect to the layer input.

use rand::Rng;
use rand_distr::{Distribution, Normal};

use super::tensor::{sgemm, Tensor};

/// A trainable array with its gradient and momentum buffer.
#[derive(Clone, Debug, PartialEq)]
pub struct Param {
    pub shape: Vec<usize>,
    pub value: Vec<f32>,
    pub grad: Vec<f32>,
    pub velocity: Vec<f32>,
}

impl Param {
    pub fn new(shape: Vec<usize>, value: Vec<f32>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), value.len());
        let n = value.len();
        Self {
            shape,
            value,
            grad: vec![0.0; n],
            velocity: vec![0.0; n],
        }
    }

    pub fn filled(shape: Vec<usize>, v: f32) -> Self {
        let n = shape.iter().product();
        Self::new(shape, vec![v; n])
    }

    pub fn len(&self) -> usize {
        self.value.len()
    }

    pub fn is_empty(&self) -> bool {
        self.value.is_empty()
    }
}

/// A non-trainable state array (batch-norm running statistics).
#[derive(Clone, Debug, PartialEq)]
pub struct Buffer {
    pub shape: Vec<usize>,
    pub value: Vec<f32>,
}

/// Mutable access to one named piece of model state.
pub enum Slot<'a> {
    Param(&'a mut Param),
    Buffer(&'a mut Buffer),
}

/// Anything that owns parameters or buffers.
pub trait Stateful {
    /// Pushes every parameter and buffer under `prefix` in a stable order.
    fn slots<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, Slot<'a>)>);
}

pub(crate) fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}

#[derive(Clone, Debug)]
pub struct Conv2d {
    pub in_c: usize,
    pub out_c: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
    pub weight: Param,
    pub bias: Option<Param>,
    /// Skip the input-gradient GEMM when nothing upstream needs it.
    pub input_grad: bool,
    cache: Option<Tensor>,
}

impl Conv2d {
    /// He-normal initialization over fan-out.
    pub fn new(in_c: usize, out_c: usize, k: usize, stride: usize, pad: usize, bias: bool, rng: &mut impl Rng) -> Self {
        let std = (2.0 / (k * k * out_c) as f64).sqrt();
        let normal = Normal::new(0.0, std).expect("valid std");
        let w: Vec<f32> = (0..out_c * in_c * k * k).map(|_| normal.sample(rng) as f32).collect();
        Self {
            in_c,
            out_c,
            k,
            stride,
            pad,
            weight: Param::new(vec![out_c, in_c, k, k], w),
            bias: bias.then(|| Param::filled(vec![out_c], 0.0)),
            input_grad: true,
            cache: None,
        }
    }

    pub fn out_size(&self, h: usize, w: usize) -> (usize, usize) {
        (
            (h + 2 * self.pad - self.k) / self.stride + 1,
            (w + 2 * self.pad - self.k) / self.stride + 1,
        )
    }

    fn is_pointwise(&self) -> bool {
        self.k == 1 && self.stride == 1 && self.pad == 0
    }

    fn im2col(&self, x: &[f32], h: usize, w: usize, oh: usize, ow: usize, col: &mut [f32]) {
        let (k, s, pad) = (self.k, self.stride, self.pad as isize);
        let p = oh * ow;
        for ci in 0..self.in_c {
            let plane = &x[ci * h * w..(ci + 1) * h * w];
            for ky in 0..k {
                for kx in 0..k {
                    let row = &mut col[((ci * k + ky) * k + kx) * p..][..p];
                    for oy in 0..oh {
                        let iy = (oy * s + ky) as isize - pad;
                        let dst = &mut row[oy * ow..(oy + 1) * ow];
                        if iy < 0 || iy >= h as isize {
                            dst.fill(0.0);
                            continue;
                        }
                        let src = &plane[iy as usize * w..(iy as usize + 1) * w];
                        for (ox, d) in dst.iter_mut().enumerate() {
                            let ix = (ox * s + kx) as isize - pad;
                            *d = if ix < 0 || ix >= w as isize { 0.0 } else { src[ix as usize] };
                        }
                    }
                }
            }
        }
    }

    fn col2im(&self, col: &[f32], h: usize, w: usize, oh: usize, ow: usize, dx: &mut [f32]) {
        let (k, s, pad) = (self.k, self.stride, self.pad as isize);
        let p = oh * ow;
        for ci in 0..self.in_c {
            let plane = &mut dx[ci * h * w..(ci + 1) * h * w];
            for ky in 0..k {
                for kx in 0..k {
                    let row = &col[((ci * k + ky) * k + kx) * p..][..p];
                    for oy in 0..oh {
                        let iy = (oy * s + ky) as isize - pad;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let dst = &mut plane[iy as usize * w..(iy as usize + 1) * w];
                        for (ox, v) in row[oy * ow..(oy + 1) * ow].iter().enumerate() {
                            let ix = (ox * s + kx) as isize - pad;
                            if ix >= 0 && ix < w as isize {
                                dst[ix as usize] += v;
                            }
                        }
                    }
                }
            }
        }
    }

    pub fn forward(&mut self, x: &Tensor, train: bool) -> Tensor {
        assert_eq!(x.c, self.in_c, "conv input channels");
        let (oh, ow) = self.out_size(x.h, x.w);
        let kk = self.in_c * self.k * self.k;
        let p = oh * ow;
        let mut out = Tensor::zeros(x.n, self.out_c, oh, ow);
        let mut col = if self.is_pointwise() { Vec::new() } else { vec![0.0; kk * p] };
        for b in 0..x.n {
            let src: &[f32] = if self.is_pointwise() {
                x.sample(b)
            } else {
                self.im2col(x.sample(b), x.h, x.w, oh, ow, &mut col);
                &col
            };
            sgemm(self.out_c, kk, p, &self.weight.value, kk, 1, src, p, 1, out.sample_mut(b), 0.0);
            if let Some(bias) = &self.bias {
                for (c, bv) in bias.value.iter().enumerate() {
                    out.plane_mut(b, c).iter_mut().for_each(|v| *v += bv);
                }
            }
        }
        self.cache = train.then(|| x.clone());
        out
    }

    pub fn backward(&mut self, g: &Tensor) -> Option<Tensor> {
        let x = self.cache.take().expect("conv backward without training forward");
        let (oh, ow) = (g.h, g.w);
        let kk = self.in_c * self.k * self.k;
        let p = oh * ow;
        let mut dx = self.input_grad.then(|| Tensor::zeros(x.n, x.c, x.h, x.w));
        let mut col = if self.is_pointwise() { Vec::new() } else { vec![0.0; kk * p] };
        let mut dcol = if self.input_grad && !self.is_pointwise() { vec![0.0; kk * p] } else { Vec::new() };
        for b in 0..x.n {
            let gb = g.sample(b);
            let src: &[f32] = if self.is_pointwise() {
                x.sample(b)
            } else {
                self.im2col(x.sample(b), x.h, x.w, oh, ow, &mut col);
                &col
            };
            // dW[oc, kk] += g[oc, p] * col[kk, p]^T
            sgemm(self.out_c, p, kk, gb, p, 1, src, 1, p, &mut self.weight.grad, 1.0);
            if let Some(bias) = &mut self.bias {
                for (c, bg) in bias.grad.iter_mut().enumerate() {
                    *bg += gb[c * p..(c + 1) * p].iter().sum::<f32>();
                }
            }
            if let Some(dx) = dx.as_mut() {
                // dcol[kk, p] = W[oc, kk]^T * g[oc, p]
                if self.is_pointwise() {
                    sgemm(kk, self.out_c, p, &self.weight.value, 1, kk, gb, p, 1, dx.sample_mut(b), 0.0);
                } else {
                    sgemm(kk, self.out_c, p, &self.weight.value, 1, kk, gb, p, 1, &mut dcol, 0.0);
                    self.col2im(&dcol, x.h, x.w, oh, ow, dx.sample_mut(b));
                }
            }
        }
        dx
    }
}

impl Stateful for Conv2d {
    fn slots<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, Slot<'a>)>) {
        out.push((join(prefix, "weight"), Slot::Param(&mut self.weight)));
        if let Some(b) = &mut self.bias {
            out.push((join(prefix, "bias"), Slot::Param(b)));
        }
    }
}

#[derive(Clone, Debug)]
pub struct BatchNorm2d {
    pub gamma: Param,
    pub beta: Param,
    pub running_mean: Buffer,
    pub running_var: Buffer,
    pub momentum: f32,
    pub eps: f32,
    cache: Option<(Tensor, Vec<f32>)>,
}

impl BatchNorm2d {
    pub fn new(c: usize) -> Self {
        Self {
            gamma: Param::filled(vec![c], 1.0),
            beta: Param::filled(vec![c], 0.0),
            running_mean: Buffer {
                shape: vec![c],
                value: vec![0.0; c],
            },
            running_var: Buffer {
                shape: vec![c],
                value: vec![1.0; c],
            },
            momentum: 0.1,
            eps: 1e-5,
            cache: None,
        }
    }

    pub fn forward(&mut self, x: &Tensor, train: bool) -> Tensor {
        let c = x.c;
        let m = (x.n * x.h * x.w) as f64;
        let mut out = x.clone();
        if !train {
            for ch in 0..c {
                let inv = 1.0 / (self.running_var.value[ch] + self.eps).sqrt();
                let scale = self.gamma.value[ch] * inv;
                let shift = self.beta.value[ch] - self.running_mean.value[ch] * scale;
                for b in 0..x.n {
                    out.plane_mut(b, ch).iter_mut().for_each(|v| *v = *v * scale + shift);
                }
            }
            self.cache = None;
            return out;
        }
        let mut xhat = x.clone();
        let mut inv_std = vec![0.0f32; c];
        for ch in 0..c {
            let mut sum = 0.0f64;
            for b in 0..x.n {
                sum += x.plane(b, ch).iter().map(|v| *v as f64).sum::<f64>();
            }
            let mean = sum / m;
            let mut sq = 0.0f64;
            for b in 0..x.n {
                sq += x.plane(b, ch).iter().map(|v| (*v as f64 - mean).powi(2)).sum::<f64>();
            }
            let var = sq / m;
            let inv = 1.0 / (var + self.eps as f64).sqrt();
            inv_std[ch] = inv as f32;
            let (g, bt) = (self.gamma.value[ch], self.beta.value[ch]);
            for b in 0..x.n {
                let xh = xhat.plane_mut(b, ch);
                for v in xh.iter_mut() {
                    *v = ((*v as f64 - mean) * inv) as f32;
                }
                let o = out.plane_mut(b, ch);
                for (ov, xv) in o.iter_mut().zip(xhat.plane(b, ch)) {
                    *ov = xv * g + bt;
                }
            }
            let unbiased = if m > 1.0 { var * m / (m - 1.0) } else { var };
            let mo = self.momentum;
            self.running_mean.value[ch] = (1.0 - mo) * self.running_mean.value[ch] + mo * mean as f32;
            self.running_var.value[ch] = (1.0 - mo) * self.running_var.value[ch] + mo * unbiased as f32;
        }
        self.cache = Some((xhat, inv_std));
        out
    }

    pub fn backward(&mut self, g: &Tensor) -> Tensor {
        let (xhat, inv_std) = self.cache.take().expect("batch norm backward without training forward");
        let m = (g.n * g.h * g.w) as f64;
        let mut dx = Tensor::zeros(g.n, g.c, g.h, g.w);
        for ch in 0..g.c {
            let mut sum_g = 0.0f64;
            let mut sum_gx = 0.0f64;
            for b in 0..g.n {
                for (gv, xv) in g.plane(b, ch).iter().zip(xhat.plane(b, ch)) {
                    sum_g += *gv as f64;
                    sum_gx += (*gv as f64) * (*xv as f64);
                }
            }
            self.gamma.grad[ch] += sum_gx as f32;
            self.beta.grad[ch] += sum_g as f32;
            let k = self.gamma.value[ch] as f64 * inv_std[ch] as f64;
            let (mg, mgx) = (sum_g / m, sum_gx / m);
            for b in 0..g.n {
                let d = dx.plane_mut(b, ch);
                for ((dv, gv), xv) in d.iter_mut().zip(g.plane(b, ch)).zip(xhat.plane(b, ch)) {
                    *dv = (k * (*gv as f64 - mg - *xv as f64 * mgx)) as f32;
                }
            }
        }
        dx
    }
}

impl Stateful for BatchNorm2d {
    fn slots<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, Slot<'a>)>) {
        out.push((join(prefix, "weight"), Slot::Param(&mut self.gamma)));
        out.push((join(prefix, "bias"), Slot::Param(&mut self.beta)));
        out.push((join(prefix, "running_mean"), Slot::Buffer(&mut self.running_mean)));
        out.push((join(prefix, "running_var"), Slot::Buffer(&mut self.running_var)));
    }
}

#[derive(Clone, Debug, Default)]
pub struct Relu {
    mask: Option<Vec<bool>>,
}

impl Relu {
    pub fn forward(&mut self, mut x: Tensor, train: bool) -> Tensor {
        if train {
            self.mask = Some(x.data.iter().map(|v| *v > 0.0).collect());
        }
        x.data.iter_mut().for_each(|v| *v = v.max(0.0));
        x
    }

    pub fn backward(&mut self, mut g: Tensor) -> Tensor {
        let mask = self.mask.take().expect("relu backward without training forward");
        for (v, m) in g.data.iter_mut().zip(mask) {
            if !m {
                *v = 0.0;
            }
        }
        g
    }
}

/// 3x3, stride 2, padding 1 max pooling.
#[derive(Clone, Debug, Default)]
pub struct MaxPool {
    cache: Option<(usize, usize, Vec<u32>)>,
}

impl MaxPool {
    pub fn forward(&mut self, x: &Tensor, train: bool) -> Tensor {
        let (oh, ow) = ((x.h + 2 - 3) / 2 + 1, (x.w + 2 - 3) / 2 + 1);
        let mut out = Tensor::zeros(x.n, x.c, oh, ow);
        let mut arg = vec![0u32; out.data.len()];
        let mut idx = 0;
        for b in 0..x.n {
            for c in 0..x.c {
                let src = x.plane(b, c);
                for oy in 0..oh {
                    for ox in 0..ow {
                        let mut best = f32::NEG_INFINITY;
                        let mut best_i = 0usize;
                        for ky in 0..3 {
                            let iy = (oy * 2 + ky) as isize - 1;
                            if iy < 0 || iy >= x.h as isize {
                                continue;
                            }
                            for kx in 0..3 {
                                let ix = (ox * 2 + kx) as isize - 1;
                                if ix < 0 || ix >= x.w as isize {
                                    continue;
                                }
                                let i = iy as usize * x.w + ix as usize;
                                if src[i] > best {
                                    best = src[i];
                                    best_i = i;
                                }
                            }
                        }
                        out.data[idx] = best;
                        arg[idx] = best_i as u32;
                        idx += 1;
                    }
                }
            }
        }
        self.cache = train.then_some((x.h, x.w, arg));
        out
    }

    pub fn backward(&mut self, g: &Tensor) -> Tensor {
        let (h, w, arg) = self.cache.take().expect("max pool backward without training forward");
        let mut dx = Tensor::zeros(g.n, g.c, h, w);
        let p = g.plane_len();
        for b in 0..g.n {
            for c in 0..g.c {
                let gp = g.plane(b, c);
                let off = (b * g.c + c) * p;
                let d = dx.plane_mut(b, c);
                for (i, gv) in gp.iter().enumerate() {
                    d[arg[off + i] as usize] += gv;
                }
            }
        }
        dx
    }
}

/// 2x unpooling: each value lands in the top-left corner of a 2x2 block of
/// zeros.
pub fn unpool_forward(x: &Tensor) -> Tensor {
    let (oh, ow) = (x.h * 2, x.w * 2);
    let mut out = Tensor::zeros(x.n, x.c, oh, ow);
    for b in 0..x.n {
        for c in 0..x.c {
            let src = x.plane(b, c);
            let dst = out.plane_mut(b, c);
            for y in 0..x.h {
                for xx in 0..x.w {
                    dst[2 * y * ow + 2 * xx] = src[y * x.w + xx];
                }
            }
        }
    }
    out
}

pub fn unpool_backward(g: &Tensor) -> Tensor {
    let (h, w) = (g.h / 2, g.w / 2);
    let mut dx = Tensor::zeros(g.n, g.c, h, w);
    for b in 0..g.n {
        for c in 0..g.c {
            let src = g.plane(b, c);
            let dst = dx.plane_mut(b, c);
            for y in 0..h {
                for x in 0..w {
                    dst[y * w + x] = src[2 * y * g.w + 2 * x];
                }
            }
        }
    }
    dx
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    pub(crate) fn random_tensor(rng: &mut ChaCha8Rng, n: usize, c: usize, h: usize, w: usize) -> Tensor {
        let data = (0..n * c * h * w).map(|_| rng.gen_range(-1.0f32..1.0)).collect();
        Tensor::from_vec(n, c, h, w, data).unwrap()
    }

    fn dot(a: &Tensor, b: &Tensor) -> f64 {
        a.data.iter().zip(&b.data).map(|(x, y)| *x as f64 * *y as f64).sum()
    }

    /// Checks the input gradient of `f` along a random direction with central
    /// differences on the scalar `<f(x), r>`.
    fn check_input_grad(mut f: impl FnMut(&Tensor, bool) -> Tensor, mut back: impl FnMut(&Tensor) -> Tensor, x: &Tensor, rng: &mut ChaCha8Rng) {
        let y = f(x, true);
        let r = random_tensor(rng, y.n, y.c, y.h, y.w);
        let dx = back(&r);
        let dir = random_tensor(rng, x.n, x.c, x.h, x.w);
        let eps = 1e-2f32;
        let mut xp = x.clone();
        let mut xm = x.clone();
        for ((p, m), d) in xp.data.iter_mut().zip(xm.data.iter_mut()).zip(&dir.data) {
            *p += eps * d;
            *m -= eps * d;
        }
        let numeric = (dot(&f(&xp, false), &r) - dot(&f(&xm, false), &r)) / (2.0 * eps as f64);
        let analytic = dot(&dx, &dir);
        let rel = (numeric - analytic).abs() / numeric.abs().max(1e-3);
        assert!(rel < 2e-2, "numeric {numeric} analytic {analytic}");
    }

    #[test]
    fn conv_forward_matches_direct_sum() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut conv = Conv2d::new(2, 3, 3, 2, 1, true, &mut rng);
        conv.bias.as_mut().unwrap().value = vec![0.5, -0.25, 1.0];
        let x = random_tensor(&mut rng, 2, 2, 5, 6);
        let y = conv.forward(&x, false);
        assert_eq!((y.h, y.w), (3, 3));
        for b in 0..2 {
            for oc in 0..3 {
                for oy in 0..3 {
                    for ox in 0..3 {
                        let mut acc = conv.bias.as_ref().unwrap().value[oc];
                        for ic in 0..2 {
                            for ky in 0..3 {
                                for kx in 0..3 {
                                    let iy = (oy * 2 + ky) as isize - 1;
                                    let ix = (ox * 2 + kx) as isize - 1;
                                    if iy >= 0 && iy < 5 && ix >= 0 && ix < 6 {
                                        acc += conv.weight.value[((oc * 2 + ic) * 3 + ky) * 3 + kx]
                                            * x.plane(b, ic)[iy as usize * 6 + ix as usize];
                                    }
                                }
                            }
                        }
                        assert!((y.plane(b, oc)[oy * 3 + ox] - acc).abs() < 1e-5);
                    }
                }
            }
        }
    }

    #[test]
    fn conv_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for (k, s, p) in [(3, 1, 1), (3, 2, 1), (1, 1, 0), (1, 2, 0), (5, 1, 2), (7, 2, 3)] {
            let conv = std::cell::RefCell::new(Conv2d::new(2, 3, k, s, p, true, &mut rng));
            let x = random_tensor(&mut rng, 2, 2, 8, 7);
            check_input_grad(
                |t, train| conv.borrow_mut().forward(t, train),
                |g| conv.borrow_mut().backward(g).unwrap(),
                &x,
                &mut rng,
            );

            // Weight gradient along a random direction.
            let mut c = conv.into_inner();
            c.weight.grad.fill(0.0);
            let y = c.forward(&x, true);
            let r = random_tensor(&mut rng, y.n, y.c, y.h, y.w);
            c.backward(&r);
            let dir: Vec<f32> = (0..c.weight.len()).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let base = c.weight.value.clone();
            let eps = 1e-2;
            let eval = |c: &mut Conv2d, sgn: f32| {
                c.weight.value = base.iter().zip(&dir).map(|(w, d)| w + sgn * eps * d).collect();
                dot(&c.forward(&x, false), &r)
            };
            let numeric = (eval(&mut c, 1.0) - eval(&mut c, -1.0)) / (2.0 * eps as f64);
            let analytic: f64 = c.weight.grad.iter().zip(&dir).map(|(g, d)| *g as f64 * *d as f64).sum();
            assert!((numeric - analytic).abs() / numeric.abs().max(1e-3) < 1e-2, "k={k} s={s}: {numeric} vs {analytic}");
        }
    }

    #[test]
    fn batch_norm_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let bn = std::cell::RefCell::new(BatchNorm2d::new(3));
        bn.borrow_mut().gamma.value = vec![0.5, 1.5, -1.0];
        let x = random_tensor(&mut rng, 2, 3, 4, 4);
        // Use training-mode statistics for every evaluation.
        check_input_grad(
            |t, _| {
                let mut b = bn.borrow_mut();
                let out = b.forward(t, true);
                out
            },
            |g| bn.borrow_mut().backward(g),
            &x,
            &mut rng,
        );
    }

    #[test]
    fn batch_norm_normalizes_and_tracks_running_stats() {
        let mut bn = BatchNorm2d::new(1);
        let x = Tensor::from_vec(1, 1, 2, 2, vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let y = bn.forward(&x, true);
        let mean: f32 = y.data.iter().sum::<f32>() / 4.0;
        assert!(mean.abs() < 1e-6);
        assert!((bn.running_mean.value[0] - 0.25).abs() < 1e-6);
        // unbiased var = 5/3
        assert!((bn.running_var.value[0] - (0.9 + 0.1 * 5.0 / 3.0)).abs() < 1e-6);
    }

    #[test]
    fn maxpool_and_unpool_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        // Distinct values spaced well beyond the probe step so no argmax flips.
        let mut vals: Vec<f32> = (0..60).map(|i| i as f32 * 0.1).collect();
        rand::seq::SliceRandom::shuffle(vals.as_mut_slice(), &mut rng);
        let x = Tensor::from_vec(1, 2, 6, 5, vals).unwrap();
        let mp = std::cell::RefCell::new(MaxPool::default());
        check_input_grad(|t, tr| mp.borrow_mut().forward(t, tr), |g| mp.borrow_mut().backward(g), &x, &mut rng);
        check_input_grad(|t, _| unpool_forward(t), unpool_backward, &x, &mut rng);

        let up = unpool_forward(&Tensor::from_vec(1, 1, 1, 2, vec![3.0, 4.0]).unwrap());
        assert_eq!(up.data, vec![3.0, 0.0, 4.0, 0.0, 0.0, 0.0, 0.0, 0.0]);
    }
}
