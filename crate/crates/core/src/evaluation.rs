//! Depth metrics over ground-truth pixels, pooled across a split.

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::datamodel::{DenseDepthMap, Lighting, SparseDepthMap};
use crate::error::{Error, Result};

/// Running per-pixel sums; adding two of these pools their pixels.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct PixelSums {
    pub n_pixels: u64,
    pub n_samples: u64,
    pub sq_err: f64,
    pub abs_err: f64,
    pub abs_log_err: f64,
    pub rel_err: f64,
    pub within: [u64; 3],
}

impl PixelSums {
    /// Statistics of one prediction against its ground truth.
    pub fn from_maps(pred: &DenseDepthMap, gt: &SparseDepthMap) -> Result<Self> {
        if !gt.same_shape(pred.height(), pred.width()) {
            return Err(Error::Shape(format!(
                "prediction {}x{} vs ground truth {}x{}",
                pred.height(),
                pred.width(),
                gt.height(),
                gt.width()
            )));
        }
        let mut s = PixelSums {
            n_samples: 1,
            ..Default::default()
        };
        for (p, y) in pred.depth().iter().zip(gt.depth()) {
            if *y > 0.0 {
                s.push(*p as f64, *y as f64)?;
            }
        }
        if s.n_pixels == 0 {
            return Err(Error::NoValidPixels("metric ground truth"));
        }
        Ok(s)
    }

    fn push(&mut self, pred: f64, gt: f64) -> Result<()> {
        if !(pred > 0.0) {
            return Err(Error::InvalidValue(format!("prediction {pred} must be positive on valid pixels")));
        }
        let d = pred - gt;
        self.n_pixels += 1;
        self.sq_err += d * d;
        self.abs_err += d.abs();
        self.abs_log_err += (gt.ln() - pred.ln()).abs();
        self.rel_err += d.abs() / gt;
        let ratio = (pred / gt).max(gt / pred);
        for (n, count) in self.within.iter_mut().enumerate() {
            if ratio < 1.25f64.powi(n as i32 + 1) {
                *count += 1;
            }
        }
        Ok(())
    }

    pub fn merge(&mut self, other: &PixelSums) {
        self.n_pixels += other.n_pixels;
        self.n_samples += other.n_samples;
        self.sq_err += other.sq_err;
        self.abs_err += other.abs_err;
        self.abs_log_err += other.abs_log_err;
        self.rel_err += other.rel_err;
        for (a, b) in self.within.iter_mut().zip(other.within) {
            *a += b;
        }
    }

    pub fn report(&self) -> Result<MetricsReport> {
        if self.n_pixels == 0 {
            return Err(Error::NoValidPixels("metric aggregation"));
        }
        let n = self.n_pixels as f64;
        Ok(MetricsReport {
            rmse: (self.sq_err / n).sqrt(),
            mae: self.abs_err / n,
            mae_log: self.abs_log_err / n,
            rel: self.rel_err / n,
            delta1: self.within[0] as f64 / n,
            delta2: self.within[1] as f64 / n,
            delta3: self.within[2] as f64 / n,
            n_pixels: self.n_pixels,
            n_samples: self.n_samples,
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub rmse: f64,
    pub mae: f64,
    pub mae_log: f64,
    pub rel: f64,
    pub delta1: f64,
    pub delta2: f64,
    pub delta3: f64,
    pub n_pixels: u64,
    pub n_samples: u64,
}

impl MetricsReport {
    /// `(name, value)` pairs for the seven metrics, in table order.
    pub fn metrics(&self) -> [(&'static str, f64); 7] {
        [
            ("delta1", self.delta1),
            ("delta2", self.delta2),
            ("delta3", self.delta3),
            ("rmse", self.rmse),
            ("mae", self.mae),
            ("rel", self.rel),
            ("mae_log", self.mae_log),
        ]
    }

    /// Flat `key=value` line, optionally prefixed (`val_mae=...`).
    pub fn to_kv(&self, prefix: &str) -> String {
        let mut parts: Vec<String> = self
            .metrics()
            .iter()
            .map(|(k, v)| format!("{prefix}{k}={v:.6}"))
            .collect();
        parts.push(format!("{prefix}n_pixels={}", self.n_pixels));
        parts.push(format!("{prefix}n_samples={}", self.n_samples));
        parts.join(" ")
    }
}

impl fmt::Display for MetricsReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.to_kv(""))
    }
}

pub fn compute_metrics(pred: &DenseDepthMap, gt: &SparseDepthMap) -> Result<MetricsReport> {
    PixelSums::from_maps(pred, gt)?.report()
}

/// Whole-split report plus per-lighting sub-reports.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitReport {
    pub all: MetricsReport,
    pub by_lighting: BTreeMap<String, MetricsReport>,
}

/// Pools per-sample sums into split-level reports.
pub fn aggregate(samples: &[(Lighting, PixelSums)]) -> Result<SplitReport> {
    if samples.is_empty() {
        return Err(Error::Empty("no samples to aggregate".into()));
    }
    let mut all = PixelSums::default();
    let mut groups: BTreeMap<&'static str, PixelSums> = BTreeMap::new();
    for (lighting, s) in samples {
        all.merge(s);
        groups.entry(lighting.as_str()).or_default().merge(s);
    }
    let by_lighting = groups
        .into_iter()
        .map(|(k, s)| Ok((k.to_string(), s.report()?)))
        .collect::<Result<_>>()?;
    Ok(SplitReport {
        all: all.report()?,
        by_lighting,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn dense(v: Vec<f32>) -> DenseDepthMap {
        let n = v.len();
        DenseDepthMap::from_raw(1, n, v, 80.0).unwrap()
    }

    fn sparse(v: Vec<f32>) -> SparseDepthMap {
        let n = v.len();
        SparseDepthMap::new(1, n, v).unwrap()
    }

    #[test]
    fn perfect_prediction() {
        let r = compute_metrics(&dense(vec![2.0, 5.0, 9.0]), &sparse(vec![2.0, 5.0, 9.0])).unwrap();
        assert_eq!((r.rmse, r.mae, r.rel, r.mae_log), (0.0, 0.0, 0.0, 0.0));
        assert_eq!((r.delta1, r.delta2, r.delta3), (1.0, 1.0, 1.0));
    }

    #[test]
    fn two_pixel_hand_oracle() {
        let r = compute_metrics(&dense(vec![3.0, 3.0, 50.0]), &sparse(vec![2.0, 4.0, 0.0])).unwrap();
        assert!((r.mae - 1.0).abs() < 1e-12);
        assert!((r.rmse - 1.0).abs() < 1e-12);
        assert!((r.rel - 0.375).abs() < 1e-12);
        assert_eq!(r.delta1, 0.0);
        assert_eq!(r.delta2, 1.0);
        let log = ((2f64.ln() - 3f64.ln()).abs() + (4f64.ln() - 3f64.ln()).abs()) / 2.0;
        assert!((r.mae_log - log).abs() < 1e-12);
        assert_eq!(r.n_pixels, 2);
    }

    #[test]
    fn ratio_below_threshold_counts() {
        let gt = vec![1.0f32, 10.0, 33.0];
        let pred = gt.iter().map(|v| v * 1.24).collect();
        assert_eq!(compute_metrics(&dense(pred), &sparse(gt)).unwrap().delta1, 1.0);
    }

    #[test]
    fn empty_ground_truth_is_an_error() {
        assert!(compute_metrics(&dense(vec![1.0]), &sparse(vec![0.0])).is_err());
        assert!(aggregate(&[]).is_err());
    }

    #[test]
    fn pooled_aggregation() {
        let a = PixelSums::from_maps(&dense(vec![5.0]), &sparse(vec![5.0])).unwrap();
        let b = PixelSums::from_maps(&dense(vec![6.0, 2.0, 14.0]), &sparse(vec![2.0, 6.0, 10.0])).unwrap();
        assert!((b.report().unwrap().mae - 4.0).abs() < 1e-12);

        let single = aggregate(&[(Lighting::Day, a)]).unwrap();
        assert_eq!(single.all, a.report().unwrap());

        let both = aggregate(&[(Lighting::Day, a), (Lighting::Night, b)]).unwrap();
        assert!((both.all.mae - 3.0).abs() < 1e-12);
        assert_eq!(both.all.n_samples, 2);
        assert_eq!(both.by_lighting["night"], b.report().unwrap());

        let mut pooled = both.by_lighting["day"];
        let night = both.by_lighting["night"];
        let merged = {
            let mut s = a;
            s.merge(&b);
            s.report().unwrap()
        };
        assert_eq!(merged, both.all);
        pooled.n_samples += night.n_samples;
        assert_eq!(pooled.n_samples, both.all.n_samples);
    }

    #[test]
    fn kv_line_lists_every_metric() {
        let r = compute_metrics(&dense(vec![3.0]), &sparse(vec![2.0])).unwrap();
        let line = r.to_kv("val_");
        for k in ["delta1", "delta2", "delta3", "rmse", "mae", "rel", "mae_log"] {
            assert!(line.contains(&format!("val_{k}=")), "{line}");
        }
    }
}
