//! Procedural driving-like scenes: a ground plane and boxes, ray-cast
//! analytically, with a scan-line LiDAR and a noisy multi-sweep radar.

use nalgebra::{Matrix4, Vector3};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::datamodel::{quantize_depth, FusionSample, Image, Lighting, Point3D, SparseDepthMap, MAX_STORABLE_DEPTH};
use crate::error::{Error, Result};
use crate::filtering::{tau, ThresholdParams};
use crate::projection::{accumulate_sweeps, invert_rigid, project_points, render_sparse_map, CameraModel, Sweep, SweepSet};

/// Horizontal field of view of the synthetic camera, degrees.
pub const HFOV_DEG: f64 = 64.0;
/// Range limit of both synthetic sensors, meters. Keeps every stored depth
/// inside the 16-bit millimeter grid.
pub const SENSOR_RANGE: f64 = 60.0;
/// Radar sweeps merged per sample.
pub const RADAR_SWEEPS: usize = 3;

/// Generator knobs. Ranges are inclusive `(min, max)` pairs sampled per
/// scene; everything is deterministic in `seed`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SceneSpec {
    pub seed: u64,
    pub height: usize,
    pub width: usize,
    pub n_boxes: (usize, usize),
    /// Camera height above the ground plane.
    pub ground_height: (f64, f64),
    /// Camera pitch, degrees, positive looking down.
    pub pitch_deg: (f64, f64),
    /// Box edge lengths.
    pub box_size: (f64, f64),
    /// Lateral offset of box centers from the camera axis.
    pub box_lateral: (f64, f64),
    /// Forward distance of box centers from the first frame.
    pub box_distance: (f64, f64),
    /// Chance of a building facade closing off the street.
    pub facade_probability: f64,
    /// Facade distance from the first frame.
    pub facade_distance: (f64, f64),
    pub outlier_rate: f64,
    /// Absolute depth displacement of outliers; the sign is random.
    pub outlier_offset_range: (f64, f64),
    /// Rows that radar can see, as fractions of image height.
    pub vertical_fov_band: (f64, f64),
    /// Radar returns per sample after sweep accumulation.
    pub radar_points: (usize, usize),
    pub lidar_beams: usize,
    /// LiDAR elevation span, degrees above and below level.
    pub lidar_elevation_deg: (f64, f64),
    pub lidar_azimuth_step_deg: f64,
    pub night_fraction: f64,
    /// Frames per scene and camera advance between frames, meters.
    pub frames: usize,
    pub frame_step: f64,
}

impl Default for SceneSpec {
    fn default() -> Self {
        Self {
            seed: 0,
            height: 96,
            width: 160,
            n_boxes: (4, 9),
            ground_height: (1.2, 2.2),
            pitch_deg: (-1.0, 3.0),
            box_size: (0.8, 4.5),
            box_lateral: (-10.0, 10.0),
            box_distance: (6.0, 62.0),
            facade_probability: 0.7,
            facade_distance: (38.0, 58.0),
            outlier_rate: 0.3,
            outlier_offset_range: (6.0, 30.0),
            vertical_fov_band: (0.40, 0.65),
            radar_points: (40, 100),
            lidar_beams: 32,
            lidar_elevation_deg: (10.0, -30.0),
            lidar_azimuth_step_deg: 0.32,
            night_fraction: 0.25,
            frames: 4,
            frame_step: 3.0,
        }
    }
}

impl SceneSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(format!("scene spec: {m}")));
        if self.height == 0 || self.width == 0 {
            return bad("image size must be positive");
        }
        if !(0.0..=1.0).contains(&self.outlier_rate) {
            return bad("outlier_rate must be in [0, 1]");
        }
        let (lo, hi) = self.vertical_fov_band;
        if !(0.0 <= lo && lo < hi && hi <= 1.0) {
            return bad("vertical_fov_band needs 0 <= v_min < v_max <= 1");
        }
        if self.outlier_offset_range.0 < 0.0 || self.outlier_offset_range.0 > self.outlier_offset_range.1 {
            return bad("outlier_offset_range must be ordered and non-negative");
        }
        if self.n_boxes.0 > self.n_boxes.1 || self.radar_points.0 > self.radar_points.1 || self.radar_points.1 == 0 {
            return bad("count ranges must be ordered and non-empty");
        }
        if self.frames == 0 || self.lidar_beams < 2 || !(self.lidar_azimuth_step_deg > 0.0) {
            return bad("frames, lidar_beams and lidar_azimuth_step_deg must be positive");
        }
        if !(0.0..=1.0).contains(&self.night_fraction) || !(0.0..=1.0).contains(&self.facade_probability) {
            return bad("night_fraction and facade_probability must be in [0, 1]");
        }
        Ok(())
    }

    /// Pinhole model of the synthetic camera at this resolution.
    pub fn camera(&self) -> Result<CameraModel> {
        let fx = self.width as f64 / 2.0 / (HFOV_DEG.to_radians() / 2.0).tan();
        CameraModel::new(
            fx,
            fx,
            (self.width as f64 - 1.0) / 2.0,
            (self.height as f64 - 1.0) / 2.0,
            Matrix4::identity(),
            self.width,
            self.height,
        )
    }
}

/// Ground truth about one radar return.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RadarLabel {
    pub u: usize,
    pub v: usize,
    /// Stored radar depth, meters.
    pub depth: f32,
    /// Scene depth at the pixel, meters.
    pub true_depth: f32,
    pub outlier: bool,
}

impl RadarLabel {
    pub fn offset(&self) -> f32 {
        self.depth - self.true_depth
    }
}

/// One generated frame.
#[derive(Clone, Debug)]
pub struct SyntheticSample {
    pub sample: FusionSample,
    pub labels: Vec<RadarLabel>,
    /// Full-resolution scene depth; 0 where the ray hits nothing in range.
    pub truth: SparseDepthMap,
}

#[derive(Clone, Debug)]
struct Box3 {
    center: Vector3<f64>,
    half: Vector3<f64>,
    yaw: f64,
    albedo: [f64; 3],
}

#[derive(Clone, Copy)]
enum Surface {
    Ground,
    Box(usize),
}

struct Hit {
    t: f64,
    normal: Vector3<f64>,
    point: Vector3<f64>,
    surface: Surface,
}

/// Scene geometry in a level frame: x right, y down, z forward, ground at
/// `y = cam_height`, first camera at the origin.
struct Scene {
    cam_height: f64,
    pitch: f64,
    boxes: Vec<Box3>,
    light: Vector3<f64>,
    ground_tones: [[f64; 3]; 2],
    lighting: Lighting,
}

impl Scene {
    fn random(spec: &SceneSpec, rng: &mut ChaCha8Rng) -> Self {
        let cam_height = rng.gen_range(spec.ground_height.0..=spec.ground_height.1);
        let pitch = rng.gen_range(spec.pitch_deg.0..=spec.pitch_deg.1).to_radians();
        let n = rng.gen_range(spec.n_boxes.0..=spec.n_boxes.1);
        let mut boxes: Vec<Box3> = (0..n)
            .map(|_| {
                let mut size = || rng.gen_range(spec.box_size.0..=spec.box_size.1);
                let (w, h, d) = (size(), size(), size());
                let x = rng.gen_range(spec.box_lateral.0..=spec.box_lateral.1);
                let z = rng.gen_range(spec.box_distance.0..=spec.box_distance.1);
                let base: f64 = rng.gen_range(0.15..0.85);
                Box3 {
                    center: Vector3::new(x, cam_height - h / 2.0, z),
                    half: Vector3::new(w / 2.0, h / 2.0, d / 2.0),
                    yaw: rng.gen_range(-0.6..0.6),
                    albedo: [
                        (base + rng.gen_range(-0.15..0.15)).clamp(0.05, 0.95),
                        (base + rng.gen_range(-0.15..0.15)).clamp(0.05, 0.95),
                        (base + rng.gen_range(-0.15..0.15)).clamp(0.05, 0.95),
                    ],
                }
            })
            .collect();
        if rng.gen_bool(spec.facade_probability) {
            let z = rng.gen_range(spec.facade_distance.0..=spec.facade_distance.1);
            let h = rng.gen_range(6.0..16.0);
            let tone: f64 = rng.gen_range(0.3..0.7);
            boxes.push(Box3 {
                center: Vector3::new(rng.gen_range(-10.0..10.0), cam_height - h / 2.0, z + 2.0),
                half: Vector3::new(rng.gen_range(25.0..60.0), h / 2.0, 2.0),
                yaw: 0.0,
                albedo: [tone, tone * 0.92, tone * 0.85],
            });
        }
        let light = Vector3::new(rng.gen_range(-0.6..0.6), -1.0, rng.gen_range(-0.8..0.3)).normalize();
        let g: f64 = rng.gen_range(0.3..0.5);
        let lighting = if rng.gen_bool(spec.night_fraction) {
            Lighting::Night
        } else {
            Lighting::Day
        };
        Self {
            cam_height,
            pitch,
            boxes,
            light,
            ground_tones: [[g, g * 0.97, g * 0.92], [g * 0.8, g * 0.8, g * 0.78]],
            lighting,
        }
    }

    /// Camera-frame direction to level-frame direction.
    fn to_level(&self, d: Vector3<f64>) -> Vector3<f64> {
        let (s, c) = self.pitch.sin_cos();
        Vector3::new(d.x, d.y * c + d.z * s, -d.y * s + d.z * c)
    }

    fn to_camera(&self, d: Vector3<f64>) -> Vector3<f64> {
        let (s, c) = self.pitch.sin_cos();
        Vector3::new(d.x, d.y * c - d.z * s, d.y * s + d.z * c)
    }

    /// Nearest intersection along `origin + t * dir` with `t > 0`.
    fn cast(&self, origin: Vector3<f64>, dir: Vector3<f64>) -> Option<Hit> {
        let mut best: Option<Hit> = None;
        if dir.y > 1e-12 {
            let t = (self.cam_height - origin.y) / dir.y;
            if t > 0.0 {
                best = Some(Hit {
                    t,
                    normal: Vector3::new(0.0, -1.0, 0.0),
                    point: origin + dir * t,
                    surface: Surface::Ground,
                });
            }
        }
        for (i, b) in self.boxes.iter().enumerate() {
            let (s, c) = b.yaw.sin_cos();
            let rot = |v: Vector3<f64>| Vector3::new(c * v.x - s * v.z, v.y, s * v.x + c * v.z);
            let unrot = |v: Vector3<f64>| Vector3::new(c * v.x + s * v.z, v.y, -s * v.x + c * v.z);
            let o = rot(origin - b.center);
            let d = rot(dir);
            let (mut t0, mut t1) = (f64::NEG_INFINITY, f64::INFINITY);
            let mut axis = 0;
            let mut sign = 0.0;
            for k in 0..3 {
                if d[k].abs() < 1e-12 {
                    if o[k].abs() > b.half[k] {
                        t0 = f64::INFINITY;
                    }
                    continue;
                }
                let ta = (-b.half[k] - o[k]) / d[k];
                let tb = (b.half[k] - o[k]) / d[k];
                let (near, far) = if ta < tb { (ta, tb) } else { (tb, ta) };
                if near > t0 {
                    t0 = near;
                    axis = k;
                    sign = -d[k].signum();
                }
                t1 = t1.min(far);
            }
            if t0 <= t1 && t0 > 0.0 && best.as_ref().is_none_or(|h| t0 < h.t) {
                let mut n = Vector3::zeros();
                n[axis] = sign;
                best = Some(Hit {
                    t: t0,
                    normal: unrot(n),
                    point: origin + dir * t0,
                    surface: Surface::Box(i),
                });
            }
        }
        best
    }

    fn shade(&self, hit: Option<&Hit>, dir: Vector3<f64>, rng: &mut ChaCha8Rng) -> [f64; 3] {
        let sky = {
            let up = (-dir.y / dir.norm()).clamp(0.0, 1.0);
            [0.75 - 0.35 * up, 0.82 - 0.25 * up, 0.95 - 0.05 * up]
        };
        let Some(h) = hit else { return sky };
        let albedo = match h.surface {
            Surface::Ground => {
                let tile = ((h.point.x / 2.0).floor() as i64 + (h.point.z / 2.0).floor() as i64).rem_euclid(2) as usize;
                let stripe = (h.point.x.abs() < 0.12) as usize as f64 * 0.35;
                let t = self.ground_tones[tile];
                [t[0] + stripe, t[1] + stripe, t[2] + stripe]
            }
            Surface::Box(i) => {
                let b = &self.boxes[i];
                let band = if ((h.point.y - (self.cam_height - 2.0 * b.half.y)) / 0.5).floor() as i64 % 2 == 0 {
                    1.0
                } else {
                    0.9
                };
                b.albedo.map(|a| a * band)
            }
        };
        let lambert = (-h.normal.dot(&self.light)).max(0.0);
        let fog = (-h.t / 140.0).exp();
        let grain: f64 = rng.gen_range(-0.03..0.03);
        let mut out = [0.0; 3];
        for k in 0..3 {
            let lit = albedo[k] * (0.35 + 0.65 * lambert) + grain;
            out[k] = lit * fog + sky[k] * (1.0 - fog);
        }
        out
    }
}

/// Generates the first frame of the scene described by `spec`.
pub fn generate_synthetic_sample(spec: &SceneSpec) -> Result<SyntheticSample> {
    let mut one = spec.clone();
    one.frames = 1;
    Ok(generate_scene(&one, "scene")?.swap_remove(0))
}

/// Generates `spec.frames` consecutive frames of one scene. Sample ids are
/// `{scene_id}_f{k:02}`.
pub fn generate_scene(spec: &SceneSpec, scene_id: &str) -> Result<Vec<SyntheticSample>> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let scene = Scene::random(spec, &mut rng);
    let cam = spec.camera()?;
    (0..spec.frames)
        .map(|k| {
            let origin = Vector3::new(0.0, 0.0, k as f64 * spec.frame_step);
            let mut frng = ChaCha8Rng::seed_from_u64(spec.seed);
            frng.set_stream(k as u64 + 1);
            render_frame(spec, &scene, &cam, origin, &mut frng, format!("{scene_id}_f{k:02}"), scene_id)
        })
        .collect()
}

fn render_frame(
    spec: &SceneSpec,
    scene: &Scene,
    cam: &CameraModel,
    origin: Vector3<f64>,
    rng: &mut ChaCha8Rng,
    sample_id: String,
    scene_id: &str,
) -> Result<SyntheticSample> {
    let (h, w) = (spec.height, spec.width);
    let night = scene.lighting == Lighting::Night;
    let noise = Normal::new(0.0, if night { 0.02 } else { 0.01 }).expect("valid sigma");
    let mut truth = vec![0.0f32; h * w];
    let mut on_box = vec![false; h * w];
    let mut pixels = Vec::with_capacity(h * w * 3);
    for v in 0..h {
        for u in 0..w {
            let d_cam = Vector3::new((u as f64 - cam.cx) / cam.fx, (v as f64 - cam.cy) / cam.fy, 1.0);
            let dir = scene.to_level(d_cam);
            let hit = scene.cast(origin, dir).filter(|h| h.t <= SENSOR_RANGE);
            if let Some(hh) = &hit {
                truth[v * w + u] = quantize_depth(hh.t as f32);
                on_box[v * w + u] = matches!(hh.surface, Surface::Box(_));
            }
            let rgb = scene.shade(hit.as_ref(), dir, rng);
            for c in rgb {
                let mut val = if night { c * 0.3 } else { c };
                val += noise.sample(rng);
                pixels.push((val.clamp(0.0, 1.0) * 255.0).round() as f32 / 255.0);
            }
        }
    }
    let image = Image::new(h, w, pixels)?;
    let truth = SparseDepthMap::new(h, w, truth)?;
    let lidar = scan_lidar(spec, scene, cam, &truth);
    let (radar, labels) = radar_returns(spec, cam, &truth, &on_box, rng)?;
    let sample = FusionSample::new(image, radar, lidar, scene.lighting, sample_id, scene_id)?;
    Ok(SyntheticSample { sample, labels, truth })
}

/// Copies scene depth at the pixels hit by a rotating multi-beam scanner.
fn scan_lidar(spec: &SceneSpec, scene: &Scene, cam: &CameraModel, truth: &SparseDepthMap) -> SparseDepthMap {
    let mut out = SparseDepthMap::zeros(truth.height(), truth.width());
    let (top, bottom) = spec.lidar_elevation_deg;
    let half_fov = (HFOV_DEG / 2.0 + 1.0).to_radians();
    let step = spec.lidar_azimuth_step_deg.to_radians();
    let n_az = (2.0 * half_fov / step).ceil() as usize;
    for b in 0..spec.lidar_beams {
        let elev = (top + (bottom - top) * b as f64 / (spec.lidar_beams - 1) as f64).to_radians();
        for a in 0..=n_az {
            let az = -half_fov + a as f64 * step;
            let level = Vector3::new(elev.cos() * az.sin(), -elev.sin(), elev.cos() * az.cos());
            let d = scene.to_camera(level);
            if d.z <= 1e-9 {
                continue;
            }
            let u = (cam.fx * d.x / d.z + cam.cx).round();
            let v = (cam.fy * d.y / d.z + cam.cy).round();
            if u < 0.0 || v < 0.0 || u >= cam.width as f64 || v >= cam.height as f64 {
                continue;
            }
            let (u, v) = (u as usize, v as usize);
            let depth = truth.get(v, u);
            if depth > 0.0 {
                out.set(v, u, depth);
            }
        }
    }
    out
}

/// True when every pixel within Chebyshev radius `r` carries scene depth
/// close to the center's.
fn locally_flat(truth: &SparseDepthMap, v: usize, u: usize, r: usize, tol: f32) -> bool {
    let d = truth.get(v, u);
    let (h, w) = (truth.height(), truth.width());
    for y in v.saturating_sub(r)..=(v + r).min(h - 1) {
        for x in u.saturating_sub(r)..=(u + r).min(w - 1) {
            let n = truth.get(y, x);
            if n == 0.0 || (n - d).abs() > tol {
                return false;
            }
        }
    }
    true
}

/// Radar returns on locally flat surfaces inside the vertical band, split
/// across sweeps taken from a moving vehicle and merged back.
fn radar_returns(
    spec: &SceneSpec,
    cam: &CameraModel,
    truth: &SparseDepthMap,
    on_box: &[bool],
    rng: &mut ChaCha8Rng,
) -> Result<(SparseDepthMap, Vec<RadarLabel>)> {
    let (h, w) = (truth.height(), truth.width());
    let v0 = (spec.vertical_fov_band.0 * h as f64).floor() as usize;
    let v1 = ((spec.vertical_fov_band.1 * h as f64).ceil() as usize).min(h);
    let tp = ThresholdParams::default();
    let mut candidates = Vec::new();
    for v in v0..v1 {
        for u in 0..w {
            let d = truth.get(v, u);
            if d > 0.0 && locally_flat(truth, v, u, 4, 0.5 * tau(d as f64, &tp) as f32) {
                candidates.push((v, u));
            }
        }
    }
    let want = rng.gen_range(spec.radar_points.0..=spec.radar_points.1);
    // Objects reflect far more strongly than road surface.
    let chosen: Vec<(usize, usize)> = candidates
        .choose_multiple_weighted(rng, want.min(candidates.len()), |&(v, u)| if on_box[v * w + u] { 4.0 } else { 1.0 })
        .map_err(|e| Error::InvalidValue(format!("radar sampling: {e}")))?
        .copied()
        .collect();

    // Sweep extrinsics: the radar sits below the camera; older sweeps were
    // taken from further back along the direction of travel.
    let speed = 8.0;
    let times = [-0.1, -0.05, 0.0];
    let extrinsics: Vec<Matrix4<f64>> = times
        .iter()
        .map(|t| Matrix4::new_translation(&Vector3::new(0.0, 0.4, speed * t)))
        .collect();
    let mut sweep_points: Vec<Vec<Point3D>> = vec![Vec::new(); RADAR_SWEEPS];
    let mut labels = Vec::with_capacity(chosen.len());
    for (i, &(v, u)) in chosen.iter().enumerate() {
        let g = truth.get(v, u);
        let outlier = rng.gen_bool(spec.outlier_rate);
        let depth = if outlier {
            let mag = rng.gen_range(spec.outlier_offset_range.0..=spec.outlier_offset_range.1) as f32;
            let sign = if rng.gen_bool(0.5) { 1.0 } else { -1.0 };
            let first = g + sign * mag;
            let d = if first > 0.5 && first < MAX_STORABLE_DEPTH as f32 { first } else { g - sign * mag };
            quantize_depth(d.clamp(0.5, (MAX_STORABLE_DEPTH - 0.5) as f32))
        } else {
            g
        };
        let ray = Vector3::new((u as f64 - cam.cx) / cam.fx, (v as f64 - cam.cy) / cam.fy, 1.0) * depth as f64;
        let k = i % RADAR_SWEEPS;
        let local = invert_rigid(&extrinsics[k]).transform_point(&ray.into());
        sweep_points[k].push(Point3D::new(local.x, local.y, local.z));
        labels.push(RadarLabel {
            u,
            v,
            depth,
            true_depth: g,
            outlier,
        });
    }
    let sweeps = SweepSet::new(
        sweep_points
            .into_iter()
            .zip(times)
            .zip(&extrinsics)
            .map(|((points, t), e)| Sweep {
                timestamp: t,
                points,
                extrinsic: *e,
            })
            .collect(),
    )?;
    let merged = accumulate_sweeps(&sweeps, 0.0, RADAR_SWEEPS)?;
    let projected = project_points(&merged.points, cam);
    let mut radar = render_sparse_map(&projected, h, w)?;
    for v in 0..h {
        for u in 0..w {
            let d = radar.get(v, u);
            if d > 0.0 {
                radar.set(v, u, quantize_depth(d));
            }
        }
    }
    labels.sort_by_key(|l| (l.v, l.u));
    Ok((radar, labels))
}
