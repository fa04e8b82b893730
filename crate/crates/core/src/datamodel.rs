//! Value types shared across the pipeline.
//!
//! Depths are meters in `f32`. Sparse maps use `0.0` for "no measurement";
//! dense maps are clamped to `[MIN_PREDICTION, max_depth]`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Default upper bound on depth values, meters.
pub const DEFAULT_MAX_DEPTH: f32 = 80.0;

/// Lower clamp applied to predictions so that log-metrics stay finite.
pub const MIN_PREDICTION: f32 = 0.1;

/// Largest depth representable by the 16-bit millimeter storage format.
pub const MAX_STORABLE_DEPTH: f32 = u16::MAX as f32 / 1000.0;

/// An RGB image with channel values in `[0, 1]`, stored row-major and
/// channel-interleaved (`[(y * width + x) * 3 + c]`).
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    height: usize,
    width: usize,
    pixels: Vec<f32>,
}

impl Image {
    pub fn new(height: usize, width: usize, pixels: Vec<f32>) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(Error::Shape(format!("image must be non-empty, got {height}x{width}")));
        }
        if pixels.len() != height * width * 3 {
            return Err(Error::Shape(format!(
                "image {height}x{width}x3 needs {} values, got {}",
                height * width * 3,
                pixels.len()
            )));
        }
        if let Some(bad) = pixels.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::InvalidValue(format!("image channel value {bad} outside [0, 1]")));
        }
        Ok(Self {
            height,
            width,
            pixels,
        })
    }

    pub fn filled(height: usize, width: usize, rgb: [f32; 3]) -> Result<Self> {
        let pixels = (0..height * width).flat_map(|_| rgb).collect();
        Self::new(height, width, pixels)
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn pixels(&self) -> &[f32] {
        &self.pixels
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize, c: usize) -> f32 {
        self.pixels[(y * self.width + x) * 3 + c]
    }

    /// Channel mean at a pixel; the edge-aware smoothness term uses this.
    #[inline]
    pub fn intensity(&self, y: usize, x: usize) -> f32 {
        let i = (y * self.width + x) * 3;
        (self.pixels[i] + self.pixels[i + 1] + self.pixels[i + 2]) / 3.0
    }

    /// Planar `[3, H, W]` copy, the layout the network consumes.
    pub fn to_planar(&self) -> Vec<f32> {
        let hw = self.height * self.width;
        let mut out = vec![0.0; 3 * hw];
        for (p, px) in self.pixels.chunks_exact(3).enumerate() {
            for c in 0..3 {
                out[c * hw + p] = px[c];
            }
        }
        out
    }

    pub fn into_pixels(self) -> Vec<f32> {
        self.pixels
    }
}

/// A 2D grid of depths in meters.
#[derive(Clone, Debug, PartialEq)]
struct Grid {
    height: usize,
    width: usize,
    depth: Vec<f32>,
}

impl Grid {
    fn new(height: usize, width: usize, depth: Vec<f32>) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(Error::Shape(format!("depth map must be non-empty, got {height}x{width}")));
        }
        if depth.len() != height * width {
            return Err(Error::Shape(format!(
                "depth map {height}x{width} needs {} values, got {}",
                height * width,
                depth.len()
            )));
        }
        Ok(Self {
            height,
            width,
            depth,
        })
    }
}

/// Sparse depth measurements; `0.0` marks pixels without a measurement.
#[derive(Clone, Debug, PartialEq)]
pub struct SparseDepthMap(Grid);

impl SparseDepthMap {
    /// Builds a map, rejecting negative or non-finite depths.
    pub fn new(height: usize, width: usize, depth: Vec<f32>) -> Result<Self> {
        if let Some(bad) = depth.iter().find(|d| !d.is_finite() || **d < 0.0) {
            return Err(Error::InvalidValue(format!("sparse depth {bad} must be finite and >= 0")));
        }
        Ok(Self(Grid::new(height, width, depth)?))
    }

    pub fn zeros(height: usize, width: usize) -> Self {
        Self(Grid {
            height,
            width,
            depth: vec![0.0; height * width],
        })
    }

    pub fn height(&self) -> usize {
        self.0.height
    }

    pub fn width(&self) -> usize {
        self.0.width
    }

    pub fn depth(&self) -> &[f32] {
        &self.0.depth
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize) -> f32 {
        self.0.depth[y * self.0.width + x]
    }

    /// Sets one pixel; `0.0` clears it.
    pub fn set(&mut self, y: usize, x: usize, depth: f32) {
        debug_assert!(depth.is_finite() && depth >= 0.0);
        self.0.depth[y * self.0.width + x] = depth;
    }

    pub fn valid_count(&self) -> usize {
        self.0.depth.iter().filter(|d| **d > 0.0).count()
    }

    /// Row-major `(y, x, depth)` for every valid pixel.
    pub fn valid_pixels(&self) -> impl Iterator<Item = (usize, usize, f32)> + '_ {
        let w = self.0.width;
        self.0
            .depth
            .iter()
            .enumerate()
            .filter(|(_, d)| **d > 0.0)
            .map(move |(i, d)| (i / w, i % w, *d))
    }

    /// Checks that every measurement lies in `(0, max_depth]`.
    pub fn check_range(&self, max_depth: f32) -> Result<()> {
        match self.0.depth.iter().find(|d| **d > max_depth) {
            Some(bad) => Err(Error::InvalidValue(format!("depth {bad} exceeds max_depth {max_depth}"))),
            None => Ok(()),
        }
    }

    pub fn same_shape(&self, height: usize, width: usize) -> bool {
        self.0.height == height && self.0.width == width
    }

    /// Zeroes every pixel where `mask` is false.
    pub fn masked(&self, mask: &ValidMask) -> Result<Self> {
        if !self.same_shape(mask.height, mask.width) {
            return Err(Error::Shape("mask and map differ in shape".into()));
        }
        let depth = self
            .0
            .depth
            .iter()
            .zip(&mask.mask)
            .map(|(d, keep)| if *keep { *d } else { 0.0 })
            .collect();
        Ok(Self(Grid {
            height: self.0.height,
            width: self.0.width,
            depth,
        }))
    }
}

/// Dense predicted depth, every entry in `[MIN_PREDICTION, max_depth]`.
#[derive(Clone, Debug, PartialEq)]
pub struct DenseDepthMap(Grid);

impl DenseDepthMap {
    /// Builds a dense map, clamping raw network output into the valid range.
    /// Non-finite values are rejected rather than clamped.
    pub fn from_raw(height: usize, width: usize, raw: Vec<f32>, max_depth: f32) -> Result<Self> {
        if let Some(bad) = raw.iter().find(|d| !d.is_finite()) {
            return Err(Error::InvalidValue(format!("dense depth {bad} is not finite")));
        }
        let depth = raw
            .into_iter()
            .map(|d| d.clamp(MIN_PREDICTION, max_depth))
            .collect();
        Ok(Self(Grid::new(height, width, depth)?))
    }

    pub fn height(&self) -> usize {
        self.0.height
    }

    pub fn width(&self) -> usize {
        self.0.width
    }

    pub fn depth(&self) -> &[f32] {
        &self.0.depth
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize) -> f32 {
        self.0.depth[y * self.0.width + x]
    }
}

/// A sensor point in meters; `depth` is the camera-frame z once projected.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Point3D {
    pub x: f64,
    pub y: f64,
    pub z: f64,
}

impl Point3D {
    pub fn new(x: f64, y: f64, z: f64) -> Self {
        Self { x, y, z }
    }

    pub fn is_finite(&self) -> bool {
        self.x.is_finite() && self.y.is_finite() && self.z.is_finite()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Lighting {
    Day,
    Night,
}

impl Lighting {
    pub fn as_str(self) -> &'static str {
        match self {
            Lighting::Day => "day",
            Lighting::Night => "night",
        }
    }
}

impl std::str::FromStr for Lighting {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "day" => Ok(Lighting::Day),
            "night" => Ok(Lighting::Night),
            other => Err(Error::InvalidValue(format!("unknown lighting tag {other:?}"))),
        }
    }
}

/// One training or evaluation datum.
#[derive(Clone, Debug, PartialEq)]
pub struct FusionSample {
    pub image: Image,
    pub radar: SparseDepthMap,
    pub lidar_gt: SparseDepthMap,
    pub lighting: Lighting,
    pub sample_id: String,
    /// Scene the sample was recorded in; train/val splits never share one.
    pub scene_id: String,
}

impl FusionSample {
    /// Validates shapes and the non-empty ground truth requirement.
    pub fn new(
        image: Image,
        radar: SparseDepthMap,
        lidar_gt: SparseDepthMap,
        lighting: Lighting,
        sample_id: impl Into<String>,
        scene_id: impl Into<String>,
    ) -> Result<Self> {
        let (h, w) = (image.height(), image.width());
        if !radar.same_shape(h, w) || !lidar_gt.same_shape(h, w) {
            return Err(Error::Shape(format!(
                "image {h}x{w}, radar {}x{}, lidar {}x{} must agree",
                radar.height(),
                radar.width(),
                lidar_gt.height(),
                lidar_gt.width()
            )));
        }
        if lidar_gt.valid_count() == 0 {
            return Err(Error::NoValidPixels("sample ground truth"));
        }
        Ok(Self {
            image,
            radar,
            lidar_gt,
            lighting,
            sample_id: sample_id.into(),
            scene_id: scene_id.into(),
        })
    }

    pub fn height(&self) -> usize {
        self.image.height()
    }

    pub fn width(&self) -> usize {
        self.image.width()
    }
}

/// Pixels carrying a measurement.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ValidMask {
    height: usize,
    width: usize,
    mask: Vec<bool>,
}

impl ValidMask {
    pub fn from_bools(height: usize, width: usize, mask: Vec<bool>) -> Result<Self> {
        if mask.len() != height * width {
            return Err(Error::Shape("mask length does not match its shape".into()));
        }
        Ok(Self {
            height,
            width,
            mask,
        })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn as_slice(&self) -> &[bool] {
        &self.mask
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize) -> bool {
        self.mask[y * self.width + x]
    }

    pub fn count(&self) -> usize {
        self.mask.iter().filter(|m| **m).count()
    }
}

pub fn valid_mask(d: &SparseDepthMap) -> ValidMask {
    ValidMask {
        height: d.height(),
        width: d.width(),
        mask: d.depth().iter().map(|v| *v > 0.0).collect(),
    }
}

/// Quantizes meters to the millimeter storage grid.
pub fn depth_to_mm(depth: f32) -> Result<u16> {
    if !(0.0..=MAX_STORABLE_DEPTH).contains(&depth) {
        return Err(Error::InvalidValue(format!(
            "depth {depth} m is outside the storable range [0, {MAX_STORABLE_DEPTH}]"
        )));
    }
    Ok((depth * 1000.0).round() as u16)
}

pub fn mm_to_depth(mm: u16) -> f32 {
    mm as f32 / 1000.0
}

/// Snaps a depth onto the millimeter grid so it survives storage unchanged.
pub fn quantize_depth(depth: f32) -> f32 {
    (depth * 1000.0).round() / 1000.0
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn valid_mask_of_empty_map_is_empty() {
        let d = SparseDepthMap::zeros(4, 5);
        assert_eq!(valid_mask(&d).count(), 0);
    }

    #[test]
    fn valid_mask_counts_nonzero_entries() {
        let mut d = SparseDepthMap::zeros(4, 5);
        d.set(0, 0, 1.0);
        d.set(2, 3, 7.5);
        d.set(3, 4, 80.0);
        let m = valid_mask(&d);
        assert_eq!(m.count(), 3);
        assert!(m.get(2, 3));
        assert!(!m.get(1, 1));
    }

    #[test]
    fn dense_map_gives_all_true_mask() {
        let d = SparseDepthMap::new(3, 3, vec![2.0; 9]).unwrap();
        assert_eq!(valid_mask(&d).count(), 9);
    }

    #[test]
    fn rejects_negative_depth_and_bad_shapes() {
        assert!(SparseDepthMap::new(1, 2, vec![1.0, -1.0]).is_err());
        assert!(SparseDepthMap::new(2, 2, vec![1.0]).is_err());
        assert!(Image::new(1, 1, vec![0.5, 1.5, 0.0]).is_err());
        assert!(Image::new(0, 1, vec![]).is_err());
    }

    #[test]
    fn sample_requires_ground_truth() {
        let img = Image::filled(2, 2, [0.5; 3]).unwrap();
        let err = FusionSample::new(
            img,
            SparseDepthMap::zeros(2, 2),
            SparseDepthMap::zeros(2, 2),
            Lighting::Day,
            "s",
            "scene",
        );
        assert!(matches!(err, Err(Error::NoValidPixels(_))));
    }

    #[test]
    fn dense_map_is_clamped() {
        let d = DenseDepthMap::from_raw(1, 3, vec![-4.0, 10.0, 200.0], 80.0).unwrap();
        assert_eq!(d.depth(), &[MIN_PREDICTION, 10.0, 80.0]);
        assert!(DenseDepthMap::from_raw(1, 1, vec![f32::NAN], 80.0).is_err());
    }

    #[test]
    fn storage_range_is_enforced() {
        assert_eq!(depth_to_mm(0.0).unwrap(), 0);
        assert_eq!(depth_to_mm(12.345).unwrap(), 12345);
        assert!(depth_to_mm(70.0).is_err());
    }

    proptest! {
        #[test]
        fn mask_rederivation_is_idempotent(vals in proptest::collection::vec(prop_oneof![Just(0.0f32), 0.1f32..80.0], 12)) {
            let d = SparseDepthMap::new(3, 4, vals).unwrap();
            let m = valid_mask(&d);
            let masked = d.masked(&m).unwrap();
            prop_assert_eq!(&masked, &d);
            prop_assert_eq!(valid_mask(&masked), m.clone());
            prop_assert_eq!(m.count(), d.valid_count());
        }

        #[test]
        fn millimeter_quantization_round_trips(mm in 0u16..=u16::MAX) {
            let d = mm_to_depth(mm);
            prop_assert_eq!(depth_to_mm(d).unwrap(), mm);
            prop_assert_eq!(quantize_depth(d).to_bits(), d.to_bits());
        }
    }
}
