//! Training objective: masked L1, edge-aware smoothness, and the learned
//! uncertainty weighting of the two stages.
//!
//! ```text
//! total = exp(-w1) * (L1(stage1, gt) + 1e-3 * smooth(stage1, rgb))
//!       + exp(-w2) * L1(final, gt)
//!       + w1 + w2
//! ```
//!
//! The kernels are generic over the float type so the same code backs the
//! `f32` training loop and the `f64` gradient checks. Batches are handled by
//! treating `n` maps laid out back to back: L1 pools valid pixels across the
//! batch, smoothness averages the per-image values.

use num_traits::Float;
use serde::{Deserialize, Serialize};

use crate::datamodel::{DenseDepthMap, Image, SparseDepthMap};
use crate::error::{Error, Result};

/// Coefficient of the smoothness term inside the stage-1 loss.
pub const SMOOTHNESS_COEFF: f64 = 1e-3;

/// Learned log-variance style weights, both initialized to zero.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub w1: f64,
    pub w2: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub l1_stage1: f64,
    pub l1_stage2: f64,
    pub smooth: f64,
    pub total: f64,
}

#[inline]
fn sign<T: Float>(x: T) -> T {
    if x > T::zero() {
        T::one()
    } else if x < T::zero() {
        -T::one()
    } else {
        T::zero()
    }
}

fn cast<T: Float>(v: f64) -> T {
    T::from(v).expect("float conversion")
}

/// Mean absolute error over pixels where `gt > 0`. When `grad` is given, the
/// gradient with respect to `pred` is accumulated into it scaled by `scale`.
pub fn masked_l1_kernel<T: Float>(pred: &[T], gt: &[f32], grad: Option<(&mut [T], T)>) -> Result<T> {
    if pred.len() != gt.len() {
        return Err(Error::Shape(format!("pred has {} pixels, gt {}", pred.len(), gt.len())));
    }
    let n = gt.iter().filter(|g| **g > 0.0).count();
    if n == 0 {
        return Err(Error::NoValidPixels("L1 ground truth"));
    }
    let inv = T::one() / cast::<T>(n as f64);
    let mut sum = T::zero();
    match grad {
        Some((g, scale)) => {
            let step = inv * scale;
            for ((p, t), gi) in pred.iter().zip(gt).zip(g.iter_mut()) {
                if *t > 0.0 {
                    let d = *p - cast(*t as f64);
                    sum = sum + d.abs();
                    *gi = *gi + sign(d) * step;
                }
            }
        }
        None => {
            for (p, t) in pred.iter().zip(gt) {
                if *t > 0.0 {
                    sum = sum + (*p - cast(*t as f64)).abs();
                }
            }
        }
    }
    Ok(sum * inv)
}

/// Per-edge weights `exp(-|grad I|)` for horizontal and vertical forward
/// differences of the channel-mean intensity. Layout: `n` images of `h*w`;
/// horizontal weights live at `[y, x]` for `x < w-1`, vertical at `[y, x]`
/// for `y < h-1`.
#[derive(Clone, Debug)]
pub struct EdgeWeights {
    pub n: usize,
    pub h: usize,
    pub w: usize,
    pub horiz: Vec<f64>,
    pub vert: Vec<f64>,
}

impl EdgeWeights {
    pub fn from_intensity(intensity: &[f64], n: usize, h: usize, w: usize) -> Result<Self> {
        if intensity.len() != n * h * w {
            return Err(Error::Shape("intensity length does not match n*h*w".into()));
        }
        let mut horiz = vec![0.0; n * h * w];
        let mut vert = vec![0.0; n * h * w];
        for b in 0..n {
            let img = &intensity[b * h * w..(b + 1) * h * w];
            for y in 0..h {
                for x in 0..w {
                    let i = y * w + x;
                    if x + 1 < w {
                        horiz[b * h * w + i] = (-(img[i + 1] - img[i]).abs()).exp();
                    }
                    if y + 1 < h {
                        vert[b * h * w + i] = (-(img[i + w] - img[i]).abs()).exp();
                    }
                }
            }
        }
        Ok(Self { n, h, w, horiz, vert })
    }

    pub fn from_images(images: &[&Image]) -> Result<Self> {
        let first = images.first().ok_or_else(|| Error::Empty("image batch".into()))?;
        let (h, w) = (first.height(), first.width());
        let mut intensity = Vec::with_capacity(images.len() * h * w);
        for img in images {
            if img.height() != h || img.width() != w {
                return Err(Error::Shape("images in a batch must share a shape".into()));
            }
            for y in 0..h {
                for x in 0..w {
                    intensity.push(img.intensity(y, x) as f64);
                }
            }
        }
        Self::from_intensity(&intensity, images.len(), h, w)
    }
}

/// Edge-aware smoothness averaged over the batch. Each image contributes the
/// mean horizontal term plus the mean vertical term.
pub fn smoothness_kernel<T: Float>(pred: &[T], edges: &EdgeWeights, grad: Option<(&mut [T], T)>) -> Result<T> {
    let (n, h, w) = (edges.n, edges.h, edges.w);
    if pred.len() != n * h * w {
        return Err(Error::Shape(format!("pred has {} values, expected {}", pred.len(), n * h * w)));
    }
    let batch = cast::<T>(n as f64);
    let inv_h = if w > 1 { T::one() / (cast::<T>((h * (w - 1)) as f64) * batch) } else { T::zero() };
    let inv_v = if h > 1 { T::one() / (cast::<T>(((h - 1) * w) as f64) * batch) } else { T::zero() };
    let mut acc_h = T::zero();
    let mut acc_v = T::zero();
    let mut grad = grad;
    for b in 0..n {
        let off = b * h * w;
        for y in 0..h {
            for x in 0..w {
                let i = off + y * w + x;
                if x + 1 < w {
                    let d = pred[i + 1] - pred[i];
                    let e: T = cast(edges.horiz[i]);
                    acc_h = acc_h + d.abs() * e;
                    if let Some((g, scale)) = grad.as_mut() {
                        let s = sign(d) * e * inv_h * *scale;
                        g[i + 1] = g[i + 1] + s;
                        g[i] = g[i] - s;
                    }
                }
                if y + 1 < h {
                    let d = pred[i + w] - pred[i];
                    let e: T = cast(edges.vert[i]);
                    acc_v = acc_v + d.abs() * e;
                    if let Some((g, scale)) = grad.as_mut() {
                        let s = sign(d) * e * inv_v * *scale;
                        g[i + w] = g[i + w] + s;
                        g[i] = g[i] - s;
                    }
                }
            }
        }
    }
    Ok(acc_h * inv_h + acc_v * inv_v)
}

/// Gradients of the total loss.
#[derive(Clone, Debug)]
pub struct LossGrad<T> {
    pub report: LossReport,
    pub d_stage1: Vec<T>,
    pub d_final: Vec<T>,
    pub d_w1: f64,
    pub d_w2: f64,
}

/// Evaluates the total loss and, when `with_grad`, its gradient with respect
/// to both predictions and both weights.
pub fn total_loss_kernel<T: Float>(
    stage1: &[T],
    final_pred: &[T],
    gt: &[f32],
    edges: &EdgeWeights,
    w: LossWeights,
    smoothness_on: bool,
    with_grad: bool,
) -> Result<LossGrad<T>> {
    let s1 = (-w.w1).exp();
    let s2 = (-w.w2).exp();
    let mut d_stage1 = if with_grad { vec![T::zero(); stage1.len()] } else { Vec::new() };
    let mut d_final = if with_grad { vec![T::zero(); final_pred.len()] } else { Vec::new() };

    let l1_1 = masked_l1_kernel(stage1, gt, with_grad.then(|| (&mut d_stage1[..], cast(s1))))?;
    let l1_2 = masked_l1_kernel(final_pred, gt, with_grad.then(|| (&mut d_final[..], cast(s2))))?;
    let smooth = if smoothness_on {
        smoothness_kernel(stage1, edges, with_grad.then(|| (&mut d_stage1[..], cast(s1 * SMOOTHNESS_COEFF))))?
    } else {
        T::zero()
    };

    let (l1_1, l1_2, smooth) = (l1_1.to_f64().unwrap(), l1_2.to_f64().unwrap(), smooth.to_f64().unwrap());
    let stage1_term = l1_1 + SMOOTHNESS_COEFF * smooth;
    let total = s1 * stage1_term + s2 * l1_2 + w.w1 + w.w2;
    Ok(LossGrad {
        report: LossReport {
            l1_stage1: l1_1,
            l1_stage2: l1_2,
            smooth,
            total,
        },
        d_stage1,
        d_final,
        d_w1: -s1 * stage1_term + 1.0,
        d_w2: -s2 * l1_2 + 1.0,
    })
}

/// Mean absolute error of `pred` over the valid pixels of `gt`.
pub fn masked_l1(pred: &DenseDepthMap, gt: &SparseDepthMap) -> Result<f64> {
    check_same(pred, gt)?;
    let p: Vec<f64> = pred.depth().iter().map(|v| *v as f64).collect();
    masked_l1_kernel(&p, gt.depth(), None)
}

pub fn edge_aware_smoothness(pred: &DenseDepthMap, image: &Image) -> Result<f64> {
    if pred.height() != image.height() || pred.width() != image.width() {
        return Err(Error::Shape("prediction and image differ in shape".into()));
    }
    let edges = EdgeWeights::from_images(&[image])?;
    let p: Vec<f64> = pred.depth().iter().map(|v| *v as f64).collect();
    smoothness_kernel(&p, &edges, None)
}

pub fn total_loss(
    stage1: &DenseDepthMap,
    final_pred: &DenseDepthMap,
    gt: &SparseDepthMap,
    image: &Image,
    w: LossWeights,
    smoothness_on: bool,
) -> Result<LossReport> {
    check_same(stage1, gt)?;
    check_same(final_pred, gt)?;
    let edges = EdgeWeights::from_images(&[image])?;
    let s1: Vec<f64> = stage1.depth().iter().map(|v| *v as f64).collect();
    let f: Vec<f64> = final_pred.depth().iter().map(|v| *v as f64).collect();
    Ok(total_loss_kernel(&s1, &f, gt.depth(), &edges, w, smoothness_on, false)?.report)
}

fn check_same(pred: &DenseDepthMap, gt: &SparseDepthMap) -> Result<()> {
    if !gt.same_shape(pred.height(), pred.width()) {
        return Err(Error::Shape(format!(
            "prediction {}x{} vs ground truth {}x{}",
            pred.height(),
            pred.width(),
            gt.height(),
            gt.width()
        )));
    }
    Ok(())
}
