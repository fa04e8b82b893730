//! Per-sample figures: radar overlay, coarse map, final map and ground truth
//! on a shared depth color scale.

use image::{Rgb, RgbImage};
use radar_depth::datamodel::{FusionSample, Image, SparseDepthMap};
use radar_depth::network::Prediction;

pub const KEPT_COLOR: Rgb<u8> = Rgb([40, 220, 60]);
pub const DROPPED_COLOR: Rgb<u8> = Rgb([235, 30, 30]);
/// Pixels without a value (sparse maps, missing stage).
pub const EMPTY_COLOR: Rgb<u8> = Rgb([32, 32, 32]);
const GAP: u32 = 4;
const BAR_HEIGHT: u32 = 12;

/// Color of `depth` on the `[0, max_depth]` scale; out-of-range values clamp.
pub fn depth_color(depth: f32, max_depth: f32) -> Rgb<u8> {
    let t = (depth / max_depth).clamp(0.0, 1.0) as f64;
    let c = colorous::TURBO.eval_continuous(t);
    Rgb([c.r, c.g, c.b])
}

/// Colorizes a depth grid; entries `<= 0` are drawn as empty when `sparse`.
pub fn colorize(depth: &[f32], height: usize, width: usize, max_depth: f32, sparse: bool) -> RgbImage {
    RgbImage::from_fn(width as u32, height as u32, |x, y| {
        let d = depth[y as usize * width + x as usize];
        if sparse && d <= 0.0 {
            EMPTY_COLOR
        } else {
            depth_color(d, max_depth)
        }
    })
}

fn rgb_image(img: &Image) -> RgbImage {
    RgbImage::from_fn(img.width() as u32, img.height() as u32, |x, y| {
        let c = |k| (img.get(y as usize, x as usize, k).clamp(0.0, 1.0) * 255.0).round() as u8;
        Rgb([c(0), c(1), c(2)])
    })
}

fn mark(img: &mut RgbImage, x: usize, y: usize, color: Rgb<u8>) {
    let (w, h) = (img.width() as i64, img.height() as i64);
    for dy in -1..=1i64 {
        for dx in -1..=1i64 {
            let (px, py) = (x as i64 + dx, y as i64 + dy);
            if (0..w).contains(&px) && (0..h).contains(&py) {
                img.put_pixel(px as u32, py as u32, color);
            }
        }
    }
}

/// RGB with every radar return marked: kept points in one color, points
/// rejected by the filter in another. Without a filtered map every point
/// counts as kept.
pub fn radar_overlay(image: &Image, radar: &SparseDepthMap, filtered: Option<&SparseDepthMap>) -> RgbImage {
    let mut out = rgb_image(image);
    let points: Vec<_> = radar.valid_pixels().collect();
    // Dropped markers last so they stay visible next to kept ones.
    for pass_dropped in [false, true] {
        for &(v, u, _) in &points {
            let kept = filtered.is_none_or(|f| f.get(v, u) > 0.0);
            if kept != pass_dropped {
                mark(&mut out, u, v, if kept { KEPT_COLOR } else { DROPPED_COLOR });
            }
        }
    }
    out
}

/// Horizontal color bar from 0 (left) to `max_depth` (right).
pub fn color_bar(width: u32, max_depth: f32) -> RgbImage {
    RgbImage::from_fn(width, BAR_HEIGHT, |x, _| {
        depth_color(x as f32 / (width.max(2) - 1) as f32 * max_depth, max_depth)
    })
}

/// 2x2 panel figure (overlay, stage 1 | final, ground truth) with a color bar
/// underneath.
pub fn figure(s: &FusionSample, p: &Prediction, max_depth: f32) -> RgbImage {
    let (h, w) = (s.height(), s.width());
    let overlay = radar_overlay(&s.image, &s.radar, p.filtered.as_ref());
    let stage1 = match &p.stage1 {
        Some(m) => colorize(m.depth(), h, w, max_depth, false),
        None => RgbImage::from_pixel(w as u32, h as u32, EMPTY_COLOR),
    };
    let fin = colorize(p.final_depth.depth(), h, w, max_depth, false);
    let gt = colorize(s.lidar_gt.depth(), h, w, max_depth, true);
    let (pw, ph) = (w as u32, h as u32);
    let width = 2 * pw + GAP;
    let mut out = RgbImage::from_pixel(width, 2 * ph + 2 * GAP + BAR_HEIGHT, Rgb([255, 255, 255]));
    for (panel, x, y) in [(&overlay, 0, 0), (&stage1, pw + GAP, 0), (&fin, 0, ph + GAP), (&gt, pw + GAP, ph + GAP)] {
        image::imageops::replace(&mut out, panel, x as i64, y as i64);
    }
    image::imageops::replace(&mut out, &color_bar(width, max_depth), 0, (2 * ph + 2 * GAP) as i64);
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use radar_depth::datamodel::{DenseDepthMap, Lighting};

    #[test]
    fn color_scale_spans_zero_to_max_depth() {
        let lo = colorous::TURBO.eval_continuous(0.0);
        let hi = colorous::TURBO.eval_continuous(1.0);
        assert_eq!(depth_color(0.0, 80.0), Rgb([lo.r, lo.g, lo.b]));
        assert_eq!(depth_color(80.0, 80.0), Rgb([hi.r, hi.g, hi.b]));
        assert_eq!(depth_color(500.0, 80.0), depth_color(80.0, 80.0));
        assert_ne!(depth_color(20.0, 80.0), depth_color(60.0, 80.0));
        let bar = color_bar(100, 80.0);
        assert_eq!(*bar.get_pixel(0, 0), depth_color(0.0, 80.0));
        assert_eq!(*bar.get_pixel(99, 0), depth_color(80.0, 80.0));
    }

    #[test]
    fn dropped_points_are_flagged() {
        let img = Image::filled(20, 30, [0.5; 3]).unwrap();
        let mut radar = SparseDepthMap::zeros(20, 30);
        radar.set(5, 5, 10.0);
        radar.set(12, 20, 40.0);
        let mut filtered = SparseDepthMap::zeros(20, 30);
        filtered.set(5, 5, 10.0);
        let o = radar_overlay(&img, &radar, Some(&filtered));
        assert_eq!(*o.get_pixel(5, 5), KEPT_COLOR);
        assert_eq!(*o.get_pixel(20, 12), DROPPED_COLOR);
        assert_eq!(*o.get_pixel(0, 0), Rgb([128, 128, 128]));
        let unfiltered = radar_overlay(&img, &radar, None);
        assert_eq!(*unfiltered.get_pixel(20, 12), KEPT_COLOR);
    }

    #[test]
    fn figure_layout() {
        let img = Image::filled(8, 10, [0.1, 0.2, 0.3]).unwrap();
        let mut gt = SparseDepthMap::zeros(8, 10);
        gt.set(1, 1, 30.0);
        let s = FusionSample::new(img, SparseDepthMap::zeros(8, 10), gt, Lighting::Night, "a", "b").unwrap();
        let p = Prediction {
            stage1: None,
            filtered: None,
            final_depth: DenseDepthMap::from_raw(8, 10, vec![20.0; 80], 80.0).unwrap(),
        };
        let f = figure(&s, &p, 80.0);
        assert_eq!(f.dimensions(), (2 * 10 + GAP, 2 * 8 + 2 * GAP + BAR_HEIGHT));
        assert_eq!(*f.get_pixel(0, 8 + GAP), depth_color(20.0, 80.0));
        assert_eq!(*f.get_pixel(10 + GAP + 1, 8 + GAP + 1), depth_color(30.0, 80.0));
        assert_eq!(*f.get_pixel(10 + GAP, 8 + GAP), EMPTY_COLOR);
        assert_eq!(*f.get_pixel(10 + GAP, 0), EMPTY_COLOR);
    }
}
