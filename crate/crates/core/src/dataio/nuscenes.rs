//! Reader for the official nuScenes directory layout (JSON metadata tables,
//! `.pcd` radar sweeps, `.pcd.bin` LiDAR sweeps, JPEG camera frames).
//!
//! Each key frame yields one sample per camera in [`CAMERAS`]. Camera frames
//! are area-downscaled by [`DOWNSCALE`]; radar (3 sweeps per radar, all five
//! radars) and LiDAR are projected straight into the reduced grid.
//! Scenes are sorted by name and the last [`VAL_SCENES`] form the validation
//! split.

use std::collections::HashMap;
use std::fs;
use std::path::{Path, PathBuf};

use nalgebra::{Matrix4, Quaternion, Translation3, UnitQuaternion};
use serde::de::DeserializeOwned;
use serde::Deserialize;

use super::storage::Split;
use crate::datamodel::{FusionSample, Image, Lighting, Point3D};
use crate::error::{Error, Result};
use crate::projection::{
    accumulate_sweeps, invert_rigid, project_points, render_sparse_map, CameraModel, Downscale, Sweep, SweepSet, DEFAULT_SWEEPS,
};

pub const CAMERAS: [&str; 2] = ["CAM_FRONT", "CAM_BACK"];
pub const RADARS: [&str; 5] = ["RADAR_FRONT", "RADAR_FRONT_LEFT", "RADAR_FRONT_RIGHT", "RADAR_BACK_LEFT", "RADAR_BACK_RIGHT"];
pub const LIDAR: &str = "LIDAR_TOP";
pub const VAL_SCENES: usize = 85;
pub const DOWNSCALE: usize = 2;
/// Floats per LiDAR point in `.pcd.bin` files: x, y, z, intensity, ring.
const LIDAR_STRIDE: usize = 5;

#[derive(Deserialize)]
struct SceneRec {
    token: String,
    name: String,
    #[serde(default)]
    description: String,
}

#[derive(Deserialize)]
struct SampleRec {
    token: String,
    scene_token: String,
}

#[derive(Deserialize)]
struct SampleDataRec {
    token: String,
    sample_token: String,
    ego_pose_token: String,
    calibrated_sensor_token: String,
    timestamp: i64,
    filename: String,
    is_key_frame: bool,
    #[serde(default)]
    prev: String,
}

#[derive(Deserialize)]
struct CalibRec {
    token: String,
    sensor_token: String,
    translation: [f64; 3],
    rotation: [f64; 4],
    #[serde(default)]
    camera_intrinsic: Vec<Vec<f64>>,
}

#[derive(Deserialize)]
struct SensorRec {
    token: String,
    channel: String,
}

#[derive(Deserialize)]
struct PoseRec {
    token: String,
    translation: [f64; 3],
    rotation: [f64; 4],
}

/// One camera image of one key frame.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SampleKey {
    pub sample_token: String,
    pub camera: String,
    pub scene: String,
    pub split: Split,
}

impl SampleKey {
    /// Identifier used as the sample id.
    pub fn id(&self) -> String {
        format!("{}_{}", self.sample_token, self.camera)
    }
}

impl std::fmt::Display for SampleKey {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.id())
    }
}

struct SensorData {
    sample_token: String,
    channel: String,
    calib: String,
    pose: String,
    timestamp: i64,
    filename: String,
    prev: String,
}

/// Indexed metadata of one nuScenes version.
pub struct NuScenes {
    root: PathBuf,
    keys: Vec<SampleKey>,
    night: HashMap<String, bool>,
    data: HashMap<String, SensorData>,
    /// (sample token, channel) -> key-frame sample_data token.
    key_frames: HashMap<(String, String), String>,
    calib: HashMap<String, CalibRec>,
    poses: HashMap<String, PoseRec>,
}

fn table<T: DeserializeOwned>(dir: &Path, name: &str) -> Result<Vec<T>> {
    let p = dir.join(format!("{name}.json"));
    let text = fs::read_to_string(&p).map_err(|e| Error::io(&p, e))?;
    serde_json::from_str(&text).map_err(|e| Error::format(&p, e.to_string()))
}

/// Homogeneous transform from a nuScenes translation + `[w, x, y, z]`
/// quaternion.
fn pose_matrix(t: [f64; 3], q: [f64; 4]) -> Matrix4<f64> {
    let r = UnitQuaternion::from_quaternion(Quaternion::new(q[0], q[1], q[2], q[3]));
    Translation3::new(t[0], t[1], t[2]).to_homogeneous() * r.to_homogeneous()
}

impl NuScenes {
    /// Indexes `root/<version>/*.json` with the default split.
    pub fn open(root: &Path, version: &str) -> Result<Self> {
        Self::open_with(root, version, VAL_SCENES)
    }

    /// As [`NuScenes::open`], holding out the last `val_scenes` scenes.
    pub fn open_with(root: &Path, version: &str, val_scenes: usize) -> Result<Self> {
        let meta = root.join(version);
        let scenes: Vec<SceneRec> = table(&meta, "scene")?;
        let samples: Vec<SampleRec> = table(&meta, "sample")?;
        let sample_data: Vec<SampleDataRec> = table(&meta, "sample_data")?;
        let calib: Vec<CalibRec> = table(&meta, "calibrated_sensor")?;
        let sensors: Vec<SensorRec> = table(&meta, "sensor")?;
        let poses: Vec<PoseRec> = table(&meta, "ego_pose")?;

        let channel_of: HashMap<&str, &str> = sensors.iter().map(|s| (s.token.as_str(), s.channel.as_str())).collect();
        let calib: HashMap<String, CalibRec> = calib.into_iter().map(|c| (c.token.clone(), c)).collect();
        let mut data = HashMap::with_capacity(sample_data.len());
        let mut key_frames = HashMap::new();
        for sd in sample_data {
            let c = calib
                .get(&sd.calibrated_sensor_token)
                .ok_or_else(|| Error::format(&meta, format!("sample_data {} has no calibration", sd.token)))?;
            let channel = channel_of
                .get(c.sensor_token.as_str())
                .ok_or_else(|| Error::format(&meta, format!("calibration {} has no sensor", c.token)))?
                .to_string();
            if sd.is_key_frame {
                key_frames.insert((sd.sample_token.clone(), channel.clone()), sd.token.clone());
            }
            data.insert(
                sd.token,
                SensorData {
                    sample_token: sd.sample_token,
                    channel,
                    calib: sd.calibrated_sensor_token,
                    pose: sd.ego_pose_token,
                    timestamp: sd.timestamp,
                    filename: sd.filename,
                    prev: sd.prev,
                },
            );
        }

        let mut names: Vec<&SceneRec> = scenes.iter().collect();
        names.sort_by(|a, b| a.name.cmp(&b.name));
        let n_train = names.len().saturating_sub(val_scenes);
        let split_of: HashMap<&str, (Split, &str)> = names
            .iter()
            .enumerate()
            .map(|(i, s)| (s.token.as_str(), (if i < n_train { Split::Train } else { Split::Val }, s.name.as_str())))
            .collect();
        let night = scenes
            .iter()
            .map(|s| (s.name.clone(), s.description.to_lowercase().contains("night")))
            .collect();

        let mut keys = Vec::new();
        for s in &samples {
            let Some(&(split, scene)) = split_of.get(s.scene_token.as_str()) else {
                return Err(Error::format(&meta, format!("sample {} references an unknown scene", s.token)));
            };
            for cam in CAMERAS {
                if key_frames.contains_key(&(s.token.clone(), cam.to_string())) {
                    keys.push(SampleKey {
                        sample_token: s.token.clone(),
                        camera: cam.to_string(),
                        scene: scene.to_string(),
                        split,
                    });
                }
            }
        }
        keys.sort_by(|a, b| a.id().cmp(&b.id()));
        Ok(Self {
            root: root.to_path_buf(),
            keys,
            night,
            data,
            key_frames,
            calib,
            poses: poses.into_iter().map(|p| (p.token.clone(), p)).collect(),
        })
    }

    pub fn keys(&self, split: Split) -> impl Iterator<Item = &SampleKey> {
        self.keys.iter().filter(move |k| k.split == split)
    }

    /// Number of camera images in `split`.
    pub fn count(&self, split: Split) -> usize {
        self.keys(split).count()
    }

    /// Every `step`-th key of `split`.
    pub fn sample_every(&self, split: Split, step: usize) -> Vec<SampleKey> {
        self.keys(split).step_by(step.max(1)).cloned().collect()
    }

    pub fn find(&self, id: &str) -> Option<&SampleKey> {
        self.keys.iter().find(|k| k.id() == id)
    }

    fn record(&self, token: &str) -> Result<&SensorData> {
        self.data
            .get(token)
            .ok_or_else(|| Error::format(&self.root, format!("unknown sample_data {token}")))
    }

    /// Sensor frame to global frame at the sweep's own timestamp.
    fn sensor_to_global(&self, sd: &SensorData) -> Result<Matrix4<f64>> {
        let c = &self.calib[&sd.calib];
        let p = self
            .poses
            .get(&sd.pose)
            .ok_or_else(|| Error::format(&self.root, format!("unknown ego pose {}", sd.pose)))?;
        Ok(pose_matrix(p.translation, p.rotation) * pose_matrix(c.translation, c.rotation))
    }

    /// Loads one camera image with its projected radar and LiDAR maps.
    pub fn load(&self, key: &SampleKey) -> Result<FusionSample> {
        let frame = |channel: &str| {
            self.key_frames
                .get(&(key.sample_token.clone(), channel.to_string()))
                .map(String::as_str)
        };
        let cam_token = frame(&key.camera).ok_or_else(|| Error::format(&self.root, format!("{key}: no camera frame")))?;
        let cam_sd = self.record(cam_token)?;
        let image = read_jpeg(&self.root.join(&cam_sd.filename))?;
        let (full_h, full_w) = (image.height(), image.width());
        let image = image.downscale(DOWNSCALE)?;
        let (h, w) = (image.height(), image.width());

        let k = &self.calib[&cam_sd.calib].camera_intrinsic;
        if k.len() != 3 || k.iter().any(|r| r.len() != 3) {
            return Err(Error::format(&self.root, format!("{key}: camera intrinsics must be 3x3")));
        }
        let global_to_cam = invert_rigid(&self.sensor_to_global(cam_sd)?);
        let cam = CameraModel::new(k[0][0], k[1][1], k[0][2], k[1][2], Matrix4::identity(), full_w, full_h)?.scaled(DOWNSCALE)?;
        let t_cam = cam_sd.timestamp as f64 * 1e-6;

        let mut radar_points = Vec::new();
        for channel in RADARS {
            let Some(mut token) = frame(channel) else { continue };
            let mut sweeps = Vec::new();
            while sweeps.len() < DEFAULT_SWEEPS {
                let sd = self.record(token)?;
                sweeps.push(Sweep {
                    timestamp: sd.timestamp as f64 * 1e-6 - t_cam,
                    points: read_radar_pcd(&self.root.join(&sd.filename))?,
                    extrinsic: global_to_cam * self.sensor_to_global(sd)?,
                });
                if sd.prev.is_empty() {
                    break;
                }
                token = &sd.prev;
            }
            sweeps.reverse();
            radar_points.extend(accumulate_sweeps(&SweepSet::new(sweeps)?, 0.0, DEFAULT_SWEEPS)?.points);
        }
        let radar = render_sparse_map(&project_points(&radar_points, &cam), h, w)?;

        let lidar_token = frame(LIDAR).ok_or_else(|| Error::format(&self.root, format!("{key}: no LiDAR frame")))?;
        let lidar_sd = self.record(lidar_token)?;
        let cam = cam.with_extrinsic(global_to_cam * self.sensor_to_global(lidar_sd)?)?;
        let lidar = read_lidar_bin(&self.root.join(&lidar_sd.filename))?;
        let lidar = render_sparse_map(&project_points(&lidar, &cam), h, w)?;

        let lighting = if self.night.get(&key.scene).copied().unwrap_or(false) {
            Lighting::Night
        } else {
            Lighting::Day
        };
        debug_assert_eq!(cam_sd.sample_token, key.sample_token);
        debug_assert_eq!(cam_sd.channel, key.camera);
        FusionSample::new(image, radar, lidar, lighting, key.id(), key.scene.clone())
    }
}

fn read_jpeg(path: &Path) -> Result<Image> {
    let img = image::open(path).map_err(|e| Error::format(path, e.to_string()))?.to_rgb8();
    let (w, h) = img.dimensions();
    let px = img.into_raw().into_iter().map(|v| v as f32 / 255.0).collect();
    Image::new(h as usize, w as usize, px)
}

fn read_lidar_bin(path: &Path) -> Result<Vec<Point3D>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.len() % (4 * LIDAR_STRIDE) != 0 {
        return Err(Error::format(path, "LiDAR file is not a whole number of points"));
    }
    Ok(bytes
        .chunks_exact(4 * LIDAR_STRIDE)
        .map(|c| {
            let f = |i: usize| f32::from_le_bytes(c[4 * i..4 * i + 4].try_into().unwrap()) as f64;
            Point3D::new(f(0), f(1), f(2))
        })
        .collect())
}

/// Field layout of a binary `.pcd` file.
struct PcdField {
    name: String,
    offset: usize,
    kind: u8,
    size: usize,
}

/// Parses a binary PCD file into per-point field maps.
pub fn read_pcd(path: &Path) -> Result<Vec<HashMap<String, f64>>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let bad = |m: &str| Error::format(path, m.to_string());
    let mut header: HashMap<String, Vec<String>> = HashMap::new();
    let mut pos = 0;
    loop {
        let end = bytes[pos..].iter().position(|b| *b == b'\n').ok_or_else(|| bad("unterminated header"))? + pos;
        let line = std::str::from_utf8(&bytes[pos..end]).map_err(|_| bad("header is not text"))?.trim();
        pos = end + 1;
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let mut parts = line.split_whitespace();
        let key = parts.next().unwrap_or_default().to_uppercase();
        let vals: Vec<String> = parts.map(String::from).collect();
        let done = key == "DATA";
        header.insert(key, vals);
        if done {
            break;
        }
    }
    if header["DATA"].first().map(String::as_str) != Some("binary") {
        return Err(bad("only binary PCD data is supported"));
    }
    let list = |k: &str| header.get(k).cloned().ok_or_else(|| bad(&format!("missing {k}")));
    let names = list("FIELDS")?;
    let sizes: Vec<usize> = list("SIZE")?.iter().map(|s| s.parse().map_err(|_| bad("bad SIZE"))).collect::<Result<_>>()?;
    let types = list("TYPE")?;
    let counts: Vec<usize> = match header.get("COUNT") {
        Some(c) => c.iter().map(|s| s.parse().map_err(|_| bad("bad COUNT"))).collect::<Result<_>>()?,
        None => vec![1; names.len()],
    };
    if sizes.len() != names.len() || types.len() != names.len() || counts.len() != names.len() {
        return Err(bad("FIELDS, SIZE, TYPE and COUNT disagree"));
    }
    let n: usize = list("POINTS")?
        .first()
        .and_then(|s| s.parse().ok())
        .ok_or_else(|| bad("bad POINTS"))?;
    let mut fields = Vec::new();
    let mut offset = 0;
    for i in 0..names.len() {
        fields.push(PcdField {
            name: names[i].clone(),
            offset,
            kind: types[i].as_bytes().first().copied().unwrap_or(b'?'),
            size: sizes[i],
        });
        offset += sizes[i] * counts[i];
    }
    let stride = offset;
    if bytes.len() < pos + n * stride {
        return Err(bad("truncated point data"));
    }
    let mut out = Vec::with_capacity(n);
    for p in 0..n {
        let rec = &bytes[pos + p * stride..pos + (p + 1) * stride];
        let mut m = HashMap::with_capacity(fields.len());
        for f in &fields {
            let b = &rec[f.offset..f.offset + f.size];
            let v = match (f.kind, f.size) {
                (b'F', 4) => f32::from_le_bytes(b.try_into().unwrap()) as f64,
                (b'F', 8) => f64::from_le_bytes(b.try_into().unwrap()),
                (b'I', 1) => b[0] as i8 as f64,
                (b'I', 2) => i16::from_le_bytes(b.try_into().unwrap()) as f64,
                (b'I', 4) => i32::from_le_bytes(b.try_into().unwrap()) as f64,
                (b'U', 1) => b[0] as f64,
                (b'U', 2) => u16::from_le_bytes(b.try_into().unwrap()) as f64,
                (b'U', 4) => u32::from_le_bytes(b.try_into().unwrap()) as f64,
                _ => return Err(bad(&format!("unsupported field type {}{}", f.kind as char, f.size))),
            };
            m.insert(f.name.clone(), v);
        }
        out.push(m);
    }
    Ok(out)
}

/// Radar returns passing the devkit's default quality filters: valid
/// state, dynamic property below 7, unambiguous velocity.
fn read_radar_pcd(path: &Path) -> Result<Vec<Point3D>> {
    let get = |m: &HashMap<String, f64>, k: &str, default: f64| m.get(k).copied().unwrap_or(default);
    Ok(read_pcd(path)?
        .iter()
        .filter(|m| get(m, "invalid_state", 0.0) == 0.0 && get(m, "dyn_prop", 0.0) < 7.0 && get(m, "ambig_state", 3.0) == 3.0)
        .map(|m| Point3D::new(get(m, "x", f64::NAN), get(m, "y", f64::NAN), get(m, "z", f64::NAN)))
        .collect())
}

/// Loads every sample of `split`, or every `step`-th one.
pub fn load_split(ds: &NuScenes, split: Split, step: usize) -> Result<Vec<FusionSample>> {
    let mut out = Vec::new();
    for key in ds.sample_every(split, step) {
        match ds.load(&key) {
            Ok(s) => out.push(s),
            Err(e) => log::warn!("skipping {key}: {e}"),
        }
    }
    if out.is_empty() {
        return Err(Error::Empty(format!("nuScenes {} split", split.as_str())));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pcd_fields_are_decoded() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("r.pcd");
        let mut bytes = b"# .PCD v0.7\nVERSION 0.7\nFIELDS x y z dyn_prop\nSIZE 4 4 4 1\nTYPE F F F I\nCOUNT 1 1 1 1\nWIDTH 2\nHEIGHT 1\nPOINTS 2\nDATA binary\n".to_vec();
        for (x, d) in [(1.5f32, 0i8), (-2.0, 7)] {
            bytes.extend(x.to_le_bytes());
            bytes.extend(0.25f32.to_le_bytes());
            bytes.extend(10f32.to_le_bytes());
            bytes.push(d as u8);
        }
        fs::write(&p, &bytes).unwrap();
        let pts = read_pcd(&p).unwrap();
        assert_eq!(pts.len(), 2);
        assert_eq!(pts[1]["x"], -2.0);
        assert_eq!(pts[0]["y"], 0.25);
        // dyn_prop 7 fails the quality filter.
        assert_eq!(read_radar_pcd(&p).unwrap(), vec![Point3D::new(1.5, 0.25, 10.0)]);
    }

    #[test]
    fn truncated_pcd_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("r.pcd");
        fs::write(&p, b"FIELDS x\nSIZE 4\nTYPE F\nPOINTS 3\nDATA binary\n\0\0\0\0").unwrap();
        assert!(read_pcd(&p).is_err());
    }

    #[test]
    fn quaternion_pose() {
        // 90 degrees about z.
        let s = std::f64::consts::FRAC_1_SQRT_2;
        let m = pose_matrix([1.0, 2.0, 3.0], [s, 0.0, 0.0, s]);
        let p = crate::projection::transform_point(&m, &Point3D::new(1.0, 0.0, 0.0));
        assert!((p.x - 1.0).abs() < 1e-12 && (p.y - 3.0).abs() < 1e-12 && (p.z - 3.0).abs() < 1e-12);
    }
}
