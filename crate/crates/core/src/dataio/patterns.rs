//! Alternative sparse depth inputs built from a sample's radar and LiDAR.

use rand::seq::index::sample as sample_indices;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::datamodel::{FusionSample, SparseDepthMap};
use crate::error::{Error, Result};
use crate::filtering::{keeps, ThresholdParams};

/// Default neighbor count for the LiDAR-sampled pattern.
pub const DEFAULT_K: usize = 2;
/// Default Chebyshev radius of the ground-truth radar filter, pixels.
pub const DEFAULT_RADIUS: usize = 4;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PatternKind {
    Radar,
    RadarGtFiltered,
    LidarSampled,
    LidarUniform,
}

impl PatternKind {
    pub const ALL: [PatternKind; 4] = [
        PatternKind::Radar,
        PatternKind::RadarGtFiltered,
        PatternKind::LidarSampled,
        PatternKind::LidarUniform,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            PatternKind::Radar => "radar",
            PatternKind::RadarGtFiltered => "radar_gt_filtered",
            PatternKind::LidarSampled => "lidar_sampled",
            PatternKind::LidarUniform => "lidar_uniform",
        }
    }
}

impl std::str::FromStr for PatternKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        PatternKind::ALL
            .into_iter()
            .find(|k| k.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown input pattern {s:?}")))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PatternParams {
    pub k: usize,
    /// Uniform sample size; `None` matches the sample's radar count.
    pub n_uniform: Option<usize>,
    pub radius_px: usize,
    pub threshold: ThresholdParams,
}

impl Default for PatternParams {
    fn default() -> Self {
        Self {
            k: DEFAULT_K,
            n_uniform: None,
            radius_px: DEFAULT_RADIUS,
            threshold: ThresholdParams::default(),
        }
    }
}

/// Builds the depth input of the given kind for one sample.
pub fn make_input_pattern(kind: PatternKind, s: &FusionSample, p: &PatternParams, rng_seed: u64) -> Result<SparseDepthMap> {
    match kind {
        PatternKind::Radar => Ok(s.radar.clone()),
        PatternKind::RadarGtFiltered => gt_filter_radar(&s.radar, &s.lidar_gt, p.radius_px, &p.threshold),
        PatternKind::LidarSampled => lidar_knn(&s.radar, &s.lidar_gt, p.k),
        PatternKind::LidarUniform => {
            let n = p.n_uniform.unwrap_or_else(|| s.radar.valid_count());
            lidar_uniform(&s.lidar_gt, n, rng_seed)
        }
    }
}

fn check_shapes(a: &SparseDepthMap, b: &SparseDepthMap) -> Result<()> {
    if !a.same_shape(b.height(), b.width()) {
        return Err(Error::Shape(format!(
            "maps differ: {}x{} vs {}x{}",
            a.height(),
            a.width(),
            b.height(),
            b.width()
        )));
    }
    Ok(())
}

/// Keeps a radar pixel when LiDAR exists within `radius` (Chebyshev) and
/// the median of those LiDAR depths is within the adaptive tolerance.
pub fn gt_filter_radar(radar: &SparseDepthMap, lidar: &SparseDepthMap, radius: usize, p: &ThresholdParams) -> Result<SparseDepthMap> {
    check_shapes(radar, lidar)?;
    let (h, w) = (radar.height(), radar.width());
    let mut out = SparseDepthMap::zeros(h, w);
    let mut neigh = Vec::new();
    for (v, u, d) in radar.valid_pixels() {
        neigh.clear();
        for y in v.saturating_sub(radius)..=(v + radius).min(h - 1) {
            for x in u.saturating_sub(radius)..=(u + radius).min(w - 1) {
                let l = lidar.get(y, x);
                if l > 0.0 {
                    neigh.push(l as f64);
                }
            }
        }
        if neigh.is_empty() {
            continue;
        }
        neigh.sort_by(f64::total_cmp);
        let m = neigh.len();
        let median = if m % 2 == 1 {
            neigh[m / 2]
        } else {
            (neigh[m / 2 - 1] + neigh[m / 2]) / 2.0
        };
        if keeps(d as f64, median, p) {
            out.set(v, u, d);
        }
    }
    Ok(out)
}

/// For every radar pixel, copies the `k` LiDAR pixels nearest in image
/// distance (ties by row-major order).
pub fn lidar_knn(radar: &SparseDepthMap, lidar: &SparseDepthMap, k: usize) -> Result<SparseDepthMap> {
    check_shapes(radar, lidar)?;
    let pts: Vec<(usize, usize, f32)> = lidar.valid_pixels().collect();
    let mut out = SparseDepthMap::zeros(radar.height(), radar.width());
    let mut dist: Vec<(i64, usize)> = Vec::with_capacity(pts.len());
    for (v, u, _) in radar.valid_pixels() {
        dist.clear();
        dist.extend(pts.iter().enumerate().map(|(i, &(y, x, _))| {
            let dy = y as i64 - v as i64;
            let dx = x as i64 - u as i64;
            (dy * dy + dx * dx, i)
        }));
        let take = k.min(dist.len());
        if take == 0 {
            break;
        }
        dist.select_nth_unstable(take - 1);
        for &(_, i) in &dist[..take] {
            let (y, x, d) = pts[i];
            out.set(y, x, d);
        }
    }
    Ok(out)
}

/// `n` LiDAR pixels drawn uniformly without replacement.
pub fn lidar_uniform(lidar: &SparseDepthMap, n: usize, seed: u64) -> Result<SparseDepthMap> {
    let pts: Vec<(usize, usize, f32)> = lidar.valid_pixels().collect();
    let mut out = SparseDepthMap::zeros(lidar.height(), lidar.width());
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for i in sample_indices(&mut rng, pts.len(), n.min(pts.len())) {
        let (y, x, d) = pts[i];
        out.set(y, x, d);
    }
    Ok(out)
}
