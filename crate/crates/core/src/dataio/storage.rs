//! On-disk sample layout: one directory per sample holding `rgb.png`
//! (8-bit RGB), `radar.depth.png` and `lidar.depth.png` (16-bit millimeters,
//! 0 = no return), `meta.txt` (key=value) and, for synthetic data,
//! `outliers.json`. A dataset root may carry `splits.txt` with one
//! `scene_id split` pair per line.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use image::{ImageBuffer, Luma, Rgb};
use serde::{Deserialize, Serialize};

use super::synthetic::{generate_scene, RadarLabel, SceneSpec};
use crate::datamodel::{depth_to_mm, mm_to_depth, FusionSample, Image, Lighting, SparseDepthMap};
use crate::error::{Error, Result};

pub const RGB_FILE: &str = "rgb.png";
pub const RADAR_FILE: &str = "radar.depth.png";
pub const LIDAR_FILE: &str = "lidar.depth.png";
pub const META_FILE: &str = "meta.txt";
pub const OUTLIER_FILE: &str = "outliers.json";
pub const SPLITS_FILE: &str = "splits.txt";
/// Fraction of scenes routed to validation when no manifest exists.
pub const FALLBACK_VAL_FRACTION: f64 = 0.1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            other => Err(Error::Config(format!("unknown split {other:?}"))),
        }
    }
}

fn write_depth(path: &Path, d: &SparseDepthMap) -> Result<()> {
    let mm = d.depth().iter().map(|&v| depth_to_mm(v)).collect::<Result<Vec<u16>>>()?;
    let buf: ImageBuffer<Luma<u16>, Vec<u16>> = ImageBuffer::from_raw(d.width() as u32, d.height() as u32, mm)
        .ok_or_else(|| Error::Shape("depth buffer size".into()))?;
    buf.save(path)?;
    Ok(())
}

fn read_depth(path: &Path) -> Result<SparseDepthMap> {
    let img = image::open(path)?;
    let luma = match img {
        image::DynamicImage::ImageLuma16(b) => b,
        _ => return Err(Error::format(path, "expected a 16-bit single-channel image")),
    };
    let (w, h) = luma.dimensions();
    let depth = luma.into_raw().into_iter().map(mm_to_depth).collect();
    SparseDepthMap::new(h as usize, w as usize, depth)
}

fn write_rgb(path: &Path, img: &Image) -> Result<()> {
    let bytes: Vec<u8> = img.pixels().iter().map(|v| (v * 255.0).round() as u8).collect();
    let buf: ImageBuffer<Rgb<u8>, Vec<u8>> = ImageBuffer::from_raw(img.width() as u32, img.height() as u32, bytes)
        .ok_or_else(|| Error::Shape("rgb buffer size".into()))?;
    buf.save(path)?;
    Ok(())
}

fn read_rgb(path: &Path) -> Result<Image> {
    let rgb = image::open(path)?.into_rgb8();
    let (w, h) = rgb.dimensions();
    let pixels = rgb.into_raw().into_iter().map(|b| b as f32 / 255.0).collect();
    Image::new(h as usize, w as usize, pixels)
}

/// Writes one sample directory `root/<sample_id>/`.
pub fn write_sample(root: &Path, s: &FusionSample, labels: Option<&[RadarLabel]>) -> Result<PathBuf> {
    let dir = root.join(&s.sample_id);
    fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    write_rgb(&dir.join(RGB_FILE), &s.image)?;
    write_depth(&dir.join(RADAR_FILE), &s.radar)?;
    write_depth(&dir.join(LIDAR_FILE), &s.lidar_gt)?;
    let meta = format!(
        "sample_id={}\nscene_id={}\nlighting={}\n",
        s.sample_id,
        s.scene_id,
        s.lighting.as_str()
    );
    let p = dir.join(META_FILE);
    fs::write(&p, meta).map_err(|e| Error::io(&p, e))?;
    if let Some(l) = labels {
        let p = dir.join(OUTLIER_FILE);
        fs::write(&p, serde_json::to_string_pretty(l)?).map_err(|e| Error::io(&p, e))?;
    }
    Ok(dir)
}

fn parse_meta(path: &Path) -> Result<BTreeMap<String, String>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut out = BTreeMap::new();
    for line in text.lines().map(str::trim).filter(|l| !l.is_empty() && !l.starts_with('#')) {
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::format(path, format!("expected key=value, got {line:?}")))?;
        out.insert(k.trim().to_string(), v.trim().to_string());
    }
    Ok(out)
}

/// Reads one sample directory.
pub fn read_sample(dir: &Path) -> Result<FusionSample> {
    let meta_path = dir.join(META_FILE);
    let meta = parse_meta(&meta_path)?;
    let get = |k: &str| meta.get(k).ok_or_else(|| Error::format(&meta_path, format!("missing key {k}")));
    let lighting: Lighting = get("lighting")?.parse()?;
    let sample_id = get("sample_id")?.clone();
    let scene_id = meta.get("scene_id").cloned().unwrap_or_else(|| sample_id.clone());
    FusionSample::new(
        read_rgb(&dir.join(RGB_FILE))?,
        read_depth(&dir.join(RADAR_FILE))?,
        read_depth(&dir.join(LIDAR_FILE))?,
        lighting,
        sample_id,
        scene_id,
    )
}

/// Reads `outliers.json` from a sample directory.
pub fn read_labels(dir: &Path) -> Result<Vec<RadarLabel>> {
    let p = dir.join(OUTLIER_FILE);
    let text = fs::read_to_string(&p).map_err(|e| Error::io(&p, e))?;
    serde_json::from_str(&text).map_err(|e| Error::format(&p, e.to_string()))
}

/// Scene-level split assignment.
pub fn read_splits(root: &Path) -> Result<Option<BTreeMap<String, Split>>> {
    let p = root.join(SPLITS_FILE);
    if !p.exists() {
        return Ok(None);
    }
    let text = fs::read_to_string(&p).map_err(|e| Error::io(&p, e))?;
    let mut out = BTreeMap::new();
    for line in text.lines().map(str::trim).filter(|l| !l.is_empty() && !l.starts_with('#')) {
        let mut parts = line.split_whitespace();
        match (parts.next(), parts.next(), parts.next()) {
            (Some(scene), Some(split), None) => {
                out.insert(scene.to_string(), split.parse()?);
            }
            _ => return Err(Error::format(&p, format!("expected `scene_id split`, got {line:?}"))),
        }
    }
    Ok(Some(out))
}

pub fn write_splits(root: &Path, splits: &BTreeMap<String, Split>) -> Result<()> {
    let p = root.join(SPLITS_FILE);
    let text: String = splits.iter().map(|(s, sp)| format!("{s} {sp}\n")).collect();
    fs::write(&p, text).map_err(|e| Error::io(&p, e))
}

/// Stable hash split used when a root has no manifest.
pub fn fallback_split(scene_id: &str) -> Split {
    // FNV-1a, fixed so assignments never change between builds.
    let mut h: u64 = 0xcbf29ce484222325;
    for b in scene_id.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x100000001b3);
    }
    if (h % 10_000) as f64 / 10_000.0 < FALLBACK_VAL_FRACTION {
        Split::Val
    } else {
        Split::Train
    }
}

/// Synthetic dataset parameters for [`write_synthetic_dataset`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthConfig {
    pub count: usize,
    /// Every `val_every`-th scene goes to validation; 0 disables validation.
    pub val_every: usize,
    pub scene: SceneSpec,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            count: 64,
            val_every: 10,
            scene: SceneSpec::default(),
        }
    }
}

/// Per-scene seed derived from the dataset seed.
pub fn scene_seed(seed: u64, scene: usize) -> u64 {
    seed.wrapping_mul(0x9E3779B97F4A7C15).wrapping_add(scene as u64).rotate_left(17) ^ 0xD1B54A32D192ED03
}

/// Generates `cfg.count` samples under `root` plus the split manifest.
/// Returns the number of samples written.
pub fn write_synthetic_dataset(root: &Path, cfg: &SynthConfig) -> Result<usize> {
    cfg.scene.validate()?;
    if cfg.count == 0 {
        return Err(Error::Config("count must be positive".into()));
    }
    fs::create_dir_all(root).map_err(|e| Error::io(root, e))?;
    let frames = cfg.scene.frames;
    let n_scenes = cfg.count.div_ceil(frames);
    let digits = n_scenes.to_string().len().max(4);
    let mut splits = BTreeMap::new();
    let mut written = 0;
    for i in 0..n_scenes {
        let scene_id = format!("scene{i:0digits$}");
        let mut spec = cfg.scene.clone();
        spec.seed = scene_seed(cfg.scene.seed, i);
        spec.frames = frames.min(cfg.count - written);
        for s in generate_scene(&spec, &scene_id)? {
            write_sample(root, &s.sample, Some(&s.labels))?;
            written += 1;
        }
        let split = if cfg.val_every > 0 && i % cfg.val_every == cfg.val_every - 1 {
            Split::Val
        } else {
            Split::Train
        };
        splits.insert(scene_id, split);
    }
    write_splits(root, &splits)?;
    Ok(written)
}

/// Sample directories under `root`, sorted by name.
pub fn sample_dirs(root: &Path) -> Result<Vec<PathBuf>> {
    let mut dirs = Vec::new();
    for entry in fs::read_dir(root).map_err(|e| Error::io(root, e))? {
        let entry = entry.map_err(|e| Error::io(root, e))?;
        let path = entry.path();
        if path.is_dir() && path.join(META_FILE).exists() {
            dirs.push(path);
        }
    }
    dirs.sort();
    Ok(dirs)
}

/// Loads one split of a dataset root in `sample_id` order. Unreadable
/// samples are skipped with a warning.
pub fn load_dataset(root: &Path, split: Split) -> Result<Vec<FusionSample>> {
    let manifest = read_splits(root)?;
    let mut out = Vec::new();
    for dir in sample_dirs(root)? {
        match read_sample(&dir) {
            Ok(s) => {
                let assigned = manifest
                    .as_ref()
                    .and_then(|m| m.get(&s.scene_id).copied())
                    .unwrap_or_else(|| fallback_split(&s.scene_id));
                if assigned == split {
                    out.push(s);
                }
            }
            Err(e) => log::warn!("skipping {}: {e}", dir.display()),
        }
    }
    if out.is_empty() {
        return Err(Error::Empty(format!("{split} split of {}", root.display())));
    }
    out.sort_by(|a, b| a.sample_id.cmp(&b.sample_id));
    Ok(out)
}

/// Scene ids present in a loaded split.
pub fn scene_ids(samples: &[FusionSample]) -> BTreeSet<String> {
    samples.iter().map(|s| s.scene_id.clone()).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(count: usize) -> SynthConfig {
        SynthConfig {
            count,
            val_every: 3,
            scene: SceneSpec {
                height: 32,
                width: 48,
                frames: 2,
                ..SceneSpec::default()
            },
        }
    }

    #[test]
    fn written_samples_read_back_bit_exactly() {
        let dir = tempfile::tempdir().unwrap();
        let spec = SceneSpec {
            seed: 7,
            ..SceneSpec::default()
        };
        let s = generate_scene(&spec, "scene0000").unwrap().swap_remove(0);
        let p = write_sample(dir.path(), &s.sample, Some(&s.labels)).unwrap();
        let back = read_sample(&p).unwrap();
        assert_eq!(back, s.sample);
        assert_eq!(read_labels(&p).unwrap(), s.labels);
    }

    #[test]
    fn splits_partition_scenes() {
        let dir = tempfile::tempdir().unwrap();
        assert_eq!(write_synthetic_dataset(dir.path(), &small(11)).unwrap(), 11);
        let train = load_dataset(dir.path(), Split::Train).unwrap();
        let val = load_dataset(dir.path(), Split::Val).unwrap();
        assert_eq!(train.len() + val.len(), 11);
        assert!(scene_ids(&train).is_disjoint(&scene_ids(&val)));
        let ids: Vec<_> = train.iter().map(|s| s.sample_id.clone()).collect();
        let mut sorted = ids.clone();
        sorted.sort();
        assert_eq!(ids, sorted);
    }

    #[test]
    fn corrupt_samples_are_skipped() {
        let dir = tempfile::tempdir().unwrap();
        write_synthetic_dataset(dir.path(), &small(4)).unwrap();
        let before = load_dataset(dir.path(), Split::Train).unwrap().len();
        let victim = sample_dirs(dir.path()).unwrap()[0].clone();
        fs::write(victim.join(RADAR_FILE), b"not a png").unwrap();
        assert_eq!(load_dataset(dir.path(), Split::Train).unwrap().len(), before - 1);
    }

    #[test]
    fn empty_split_is_an_error() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = small(2);
        cfg.val_every = 0;
        write_synthetic_dataset(dir.path(), &cfg).unwrap();
        assert!(matches!(load_dataset(dir.path(), Split::Val), Err(Error::Empty(_))));
    }

    #[test]
    fn depth_beyond_storage_is_refused() {
        let dir = tempfile::tempdir().unwrap();
        let mut d = SparseDepthMap::zeros(2, 2);
        d.set(0, 0, 70.0);
        assert!(write_depth(&dir.path().join("x.png"), &d).is_err());
    }

    #[test]
    fn fallback_split_is_stable_and_roughly_ten_percent() {
        let val = (0..2000).filter(|i| fallback_split(&format!("scene{i:04}")) == Split::Val).count();
        assert!((120..=280).contains(&val), "{val}");
        assert_eq!(fallback_split("abc"), fallback_split("abc"));
    }
}
