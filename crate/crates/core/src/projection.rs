//! Pinhole projection of sensor points into sparse depth maps.

use nalgebra::{Matrix3, Matrix4, Vector4};

use crate::datamodel::{DenseDepthMap, Image, Point3D, SparseDepthMap};
use crate::error::{Error, Result};

/// Default number of radar sweeps accumulated per sample.
pub const DEFAULT_SWEEPS: usize = 3;

const ROTATION_TOLERANCE: f64 = 1e-6;

/// Checks that the upper-left 3x3 block is a proper rotation and the bottom
/// row is `[0, 0, 0, 1]`.
pub fn check_rigid(t: &Matrix4<f64>) -> Result<()> {
    let r: Matrix3<f64> = t.fixed_view::<3, 3>(0, 0).into_owned();
    let ortho = (r.transpose() * r - Matrix3::identity()).abs().max();
    let det = r.determinant();
    let bottom = (t[(3, 0)].abs() + t[(3, 1)].abs() + t[(3, 2)].abs() + (t[(3, 3)] - 1.0).abs()) as f64;
    if !t.iter().all(|v| v.is_finite()) || ortho > ROTATION_TOLERANCE || (det - 1.0).abs() > ROTATION_TOLERANCE || bottom > ROTATION_TOLERANCE {
        return Err(Error::InvalidValue(format!(
            "transform is not rigid (orthonormality error {ortho:.2e}, det {det:.6})"
        )));
    }
    Ok(())
}

/// Inverse of a rigid transform, `[R^T | -R^T t]`.
pub fn invert_rigid(t: &Matrix4<f64>) -> Matrix4<f64> {
    let r = t.fixed_view::<3, 3>(0, 0).transpose();
    let trans = -(r * t.fixed_view::<3, 1>(0, 3));
    let mut out = Matrix4::identity();
    out.fixed_view_mut::<3, 3>(0, 0).copy_from(&r);
    out.fixed_view_mut::<3, 1>(0, 3).copy_from(&trans);
    out
}

pub fn transform_point(t: &Matrix4<f64>, p: &Point3D) -> Point3D {
    let v = t * Vector4::new(p.x, p.y, p.z, 1.0);
    Point3D::new(v.x, v.y, v.z)
}

/// Intrinsics plus the sensor-to-camera transform for one target grid.
#[derive(Clone, Debug, PartialEq)]
pub struct CameraModel {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub extrinsic: Matrix4<f64>,
    pub width: usize,
    pub height: usize,
}

impl CameraModel {
    pub fn new(fx: f64, fy: f64, cx: f64, cy: f64, extrinsic: Matrix4<f64>, width: usize, height: usize) -> Result<Self> {
        if !(fx > 0.0 && fy > 0.0) {
            return Err(Error::InvalidValue(format!("focal lengths must be positive, got {fx}, {fy}")));
        }
        if width == 0 || height == 0 {
            return Err(Error::Shape("camera grid must be non-empty".into()));
        }
        check_rigid(&extrinsic)?;
        Ok(Self {
            fx,
            fy,
            cx,
            cy,
            extrinsic,
            width,
            height,
        })
    }

    /// Same camera with intrinsics scaled for a grid `factor` times smaller.
    pub fn scaled(&self, factor: usize) -> Result<Self> {
        let f = factor as f64;
        if factor == 0 || self.width % factor != 0 || self.height % factor != 0 {
            return Err(Error::Shape(format!(
                "{}x{} is not divisible by {factor}",
                self.height, self.width
            )));
        }
        // Pixel centers: u' + 0.5 = (u + 0.5) / f.
        Self::new(
            self.fx / f,
            self.fy / f,
            (self.cx + 0.5) / f - 0.5,
            (self.cy + 0.5) / f - 0.5,
            self.extrinsic,
            self.width / factor,
            self.height / factor,
        )
    }

    pub fn with_extrinsic(&self, extrinsic: Matrix4<f64>) -> Result<Self> {
        check_rigid(&extrinsic)?;
        Ok(Self { extrinsic, ..self.clone() })
    }
}

/// A point that landed inside the image.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ProjectedPoint {
    pub u: usize,
    pub v: usize,
    /// Camera-frame z, meters.
    pub depth: f64,
}

/// Projects sensor points through `cam`, dropping anything behind the camera
/// or outside the grid. Pixel coordinates are rounded to the nearest center.
pub fn project_points(points: &[Point3D], cam: &CameraModel) -> Vec<ProjectedPoint> {
    points
        .iter()
        .filter(|p| p.is_finite())
        .filter_map(|p| {
            let c = transform_point(&cam.extrinsic, p);
            if c.z <= 0.0 {
                return None;
            }
            let u = (cam.fx * c.x / c.z + cam.cx).round();
            let v = (cam.fy * c.y / c.z + cam.cy).round();
            if u < 0.0 || v < 0.0 || u >= cam.width as f64 || v >= cam.height as f64 {
                return None;
            }
            Some(ProjectedPoint {
                u: u as usize,
                v: v as usize,
                depth: c.z,
            })
        })
        .collect()
}

/// Z-buffers projected points into a sparse map; the nearest point wins a
/// shared pixel.
pub fn render_sparse_map(projected: &[ProjectedPoint], height: usize, width: usize) -> Result<SparseDepthMap> {
    let mut map = SparseDepthMap::zeros(height, width);
    for p in projected {
        if p.u >= width || p.v >= height {
            return Err(Error::Shape(format!(
                "projected pixel ({}, {}) outside {height}x{width}",
                p.u, p.v
            )));
        }
        if !(p.depth > 0.0 && p.depth.is_finite()) {
            return Err(Error::InvalidValue(format!("projected depth {}", p.depth)));
        }
        let d = p.depth as f32;
        let cur = map.get(p.v, p.u);
        if cur == 0.0 || d < cur {
            map.set(p.v, p.u, d);
        }
    }
    Ok(map)
}

/// One sensor acquisition. `extrinsic` maps this sweep's sensor frame into
/// the reference camera frame.
#[derive(Clone, Debug, PartialEq)]
pub struct Sweep {
    pub timestamp: f64,
    pub points: Vec<Point3D>,
    pub extrinsic: Matrix4<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SweepSet {
    sweeps: Vec<Sweep>,
}

impl SweepSet {
    pub fn new(sweeps: Vec<Sweep>) -> Result<Self> {
        if sweeps.is_empty() {
            return Err(Error::Empty("sweep set".into()));
        }
        if sweeps.windows(2).any(|w| w[1].timestamp <= w[0].timestamp) {
            return Err(Error::InvalidValue("sweep timestamps must be strictly increasing".into()));
        }
        for s in &sweeps {
            check_rigid(&s.extrinsic)?;
        }
        Ok(Self { sweeps })
    }

    pub fn sweeps(&self) -> &[Sweep] {
        &self.sweeps
    }
}

/// Result of [`accumulate_sweeps`].
#[derive(Clone, Debug, PartialEq)]
pub struct Accumulated {
    pub points: Vec<Point3D>,
    pub sweeps_used: usize,
    /// Set when fewer than the requested number of sweeps were available.
    pub warning: Option<String>,
}

/// Merges the `n` sweeps closest in time to `reference_time`, each moved
/// into the reference camera frame by its own extrinsic.
pub fn accumulate_sweeps(s: &SweepSet, reference_time: f64, n: usize) -> Result<Accumulated> {
    if n == 0 {
        return Err(Error::InvalidValue("sweep count must be >= 1".into()));
    }
    let mut order: Vec<usize> = (0..s.sweeps.len()).collect();
    order.sort_by(|&a, &b| {
        let da = (s.sweeps[a].timestamp - reference_time).abs();
        let db = (s.sweeps[b].timestamp - reference_time).abs();
        da.total_cmp(&db).then(a.cmp(&b))
    });
    let used = n.min(order.len());
    let mut chosen = order[..used].to_vec();
    chosen.sort_unstable();

    let warning = (used < n).then(|| {
        let msg = format!("requested {n} sweeps but only {used} available");
        log::warn!("{msg}");
        msg
    });
    let points = chosen
        .iter()
        .flat_map(|&i| {
            let sw = &s.sweeps[i];
            sw.points.iter().map(move |p| transform_point(&sw.extrinsic, p))
        })
        .collect();
    Ok(Accumulated {
        points,
        sweeps_used: used,
        warning,
    })
}

/// Area (box-filter) downscaling by an integer factor.
pub trait Downscale: Sized {
    fn downscale(&self, factor: usize) -> Result<Self>;
}

fn check_factor(height: usize, width: usize, factor: usize) -> Result<()> {
    if factor == 0 || height % factor != 0 || width % factor != 0 {
        return Err(Error::Shape(format!("{height}x{width} is not divisible by {factor}")));
    }
    Ok(())
}

fn area_pool(src: &[f32], height: usize, width: usize, channels: usize, factor: usize) -> Vec<f32> {
    let (oh, ow) = (height / factor, width / factor);
    let norm = 1.0 / (factor * factor) as f64;
    let mut out = vec![0.0f32; oh * ow * channels];
    for y in 0..oh {
        for x in 0..ow {
            for c in 0..channels {
                let mut acc = 0.0f64;
                for dy in 0..factor {
                    for dx in 0..factor {
                        acc += src[((y * factor + dy) * width + x * factor + dx) * channels + c] as f64;
                    }
                }
                out[(y * ow + x) * channels + c] = (acc * norm) as f32;
            }
        }
    }
    out
}

impl Downscale for Image {
    fn downscale(&self, factor: usize) -> Result<Self> {
        check_factor(self.height(), self.width(), factor)?;
        if factor == 1 {
            return Ok(self.clone());
        }
        let px = area_pool(self.pixels(), self.height(), self.width(), 3, factor);
        let px = px.into_iter().map(|v| v.clamp(0.0, 1.0)).collect();
        Image::new(self.height() / factor, self.width() / factor, px)
    }
}

impl Downscale for DenseDepthMap {
    fn downscale(&self, factor: usize) -> Result<Self> {
        check_factor(self.height(), self.width(), factor)?;
        if factor == 1 {
            return Ok(self.clone());
        }
        let d = area_pool(self.depth(), self.height(), self.width(), 1, factor);
        let max = d.iter().copied().fold(0.0f32, f32::max);
        DenseDepthMap::from_raw(self.height() / factor, self.width() / factor, d, max)
    }
}

impl Downscale for SparseDepthMap {
    /// Always fails: averaging holes into measurements fabricates depth.
    fn downscale(&self, _factor: usize) -> Result<Self> {
        Err(Error::SparseDownscale)
    }
}
