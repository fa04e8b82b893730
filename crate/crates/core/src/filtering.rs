//! Depth-adaptive outlier rejection of radar returns against a coarse dense
//! prediction.
//!
//! The tolerance grows geometrically with depth, from `alpha` at 0 m to `beta`
//! at `k` meters:
//!
//! ```text
//! tau(d) = exp(d * ln(beta / alpha) / k + ln(alpha))
//! ```
//!
//! A radar pixel `p` survives iff `|radar(p) - coarse(p)| <= tau(radar(p))`.

use serde::{Deserialize, Serialize};

use crate::datamodel::{DenseDepthMap, SparseDepthMap, ValidMask};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ThresholdParams {
    /// Tolerance at zero depth, meters.
    pub alpha: f64,
    /// Tolerance at depth `k`, meters.
    pub beta: f64,
    /// Depth at which the tolerance reaches `beta`, meters.
    pub k: f64,
}

impl Default for ThresholdParams {
    fn default() -> Self {
        Self {
            alpha: 5.0,
            beta: 18.0,
            k: 80.0,
        }
    }
}

impl ThresholdParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha > 0.0 && self.alpha < self.beta && self.k > 0.0) || !self.beta.is_finite() {
            return Err(Error::Config(format!(
                "filter thresholds need 0 < alpha < beta and k > 0, got alpha={}, beta={}, k={}",
                self.alpha, self.beta, self.k
            )));
        }
        Ok(())
    }
}

/// Depth-dependent tolerance in meters.
pub fn tau(d: f64, p: &ThresholdParams) -> f64 {
    (d * (p.beta / p.alpha).ln() / p.k + p.alpha.ln()).exp()
}

/// Whether a radar return at `radar_depth` agrees with `reference`.
#[inline]
pub fn keeps(radar_depth: f64, reference: f64, p: &ThresholdParams) -> bool {
    (radar_depth - reference).abs() <= tau(radar_depth, p)
}

/// Drops radar returns that disagree with the coarse prediction.
pub fn noise_filter(
    radar: &SparseDepthMap,
    coarse: &DenseDepthMap,
    p: &ThresholdParams,
) -> Result<(SparseDepthMap, ValidMask)> {
    let (h, w) = (radar.height(), radar.width());
    if coarse.height() != h || coarse.width() != w {
        return Err(Error::Shape(format!(
            "radar {h}x{w} vs coarse {}x{}",
            coarse.height(),
            coarse.width()
        )));
    }
    let mut filtered = SparseDepthMap::zeros(h, w);
    let mut keep = vec![false; h * w];
    for (y, x, d) in radar.valid_pixels() {
        if keeps(d as f64, coarse.get(y, x) as f64, p) {
            filtered.set(y, x, d);
            keep[y * w + x] = true;
        }
    }
    Ok((filtered, ValidMask::from_bools(h, w, keep)?))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    const P: ThresholdParams = ThresholdParams {
        alpha: 5.0,
        beta: 18.0,
        k: 80.0,
    };

    #[test]
    fn tau_endpoints_and_midpoint() {
        assert!((tau(0.0, &P) - 5.0).abs() <= 1e-12);
        assert!((tau(80.0, &P) - 18.0).abs() <= 1e-12);
        assert!((tau(40.0, &P) - 90f64.sqrt()).abs() <= 1e-12);
        // 5 * 3.6^(1/8)
        assert!((tau(10.0, &P) - 5.0 * 3.6f64.powf(0.125)).abs() < 1e-12);
        assert!((tau(10.0, &P) - 5.868).abs() < 1e-3);
    }

    fn one_pixel(radar: f32, coarse: f32) -> (SparseDepthMap, ValidMask) {
        let r = SparseDepthMap::new(1, 2, vec![radar, 0.0]).unwrap();
        let c = DenseDepthMap::from_raw(1, 2, vec![coarse, 1.0], 80.0).unwrap();
        noise_filter(&r, &c, &P).unwrap()
    }

    #[test]
    fn small_residual_kept_large_residual_dropped() {
        let (f, m) = one_pixel(10.0, 10.5);
        assert_eq!(f.get(0, 0), 10.0);
        assert!(m.get(0, 0));

        let (f, m) = one_pixel(10.0, 30.0);
        assert_eq!(f.valid_count(), 0);
        assert!(!m.get(0, 0));
        assert!(!m.get(0, 1));
    }

    #[test]
    fn identical_prediction_keeps_everything() {
        let r = SparseDepthMap::new(2, 2, vec![3.0, 0.0, 40.0, 79.0]).unwrap();
        let c = DenseDepthMap::from_raw(2, 2, vec![3.0, 12.0, 40.0, 79.0], 80.0).unwrap();
        let (f, m) = noise_filter(&r, &c, &P).unwrap();
        assert_eq!(f, r);
        assert_eq!(m.count(), 3);
    }

    #[test]
    fn shape_mismatch_is_an_error() {
        let r = SparseDepthMap::zeros(2, 2);
        let c = DenseDepthMap::from_raw(1, 2, vec![1.0, 1.0], 80.0).unwrap();
        assert!(noise_filter(&r, &c, &P).is_err());
    }

    #[test]
    fn param_validation() {
        assert!(P.validate().is_ok());
        assert!(ThresholdParams { alpha: 18.0, beta: 5.0, k: 80.0 }.validate().is_err());
        assert!(ThresholdParams { alpha: 5.0, beta: 18.0, k: 0.0 }.validate().is_err());
    }

    proptest! {
        #[test]
        fn tau_is_strictly_increasing(a in 0.0f64..200.0, b in 0.0f64..200.0) {
            prop_assume!(a < b);
            prop_assert!(tau(a, &P) < tau(b, &P));
        }

        #[test]
        fn smaller_residual_is_also_kept(d in 0.1f64..80.0, r in 0.0f64..40.0, frac in 0.0f64..1.0) {
            if keeps(d, d + r, &P) {
                prop_assert!(keeps(d, d + r * frac, &P));
                prop_assert!(keeps(d, d - r * frac, &P));
            }
        }

        #[test]
        fn filtered_is_a_subset_of_radar(vals in proptest::collection::vec((prop_oneof![Just(0.0f32), 0.5f32..70.0], 0.5f32..70.0), 16)) {
            let (r, c): (Vec<f32>, Vec<f32>) = vals.into_iter().unzip();
            let radar = SparseDepthMap::new(4, 4, r).unwrap();
            let coarse = DenseDepthMap::from_raw(4, 4, c, 80.0).unwrap();
            let (f, m) = noise_filter(&radar, &coarse, &P).unwrap();
            for (i, (fd, rd)) in f.depth().iter().zip(radar.depth()).enumerate() {
                prop_assert!(*fd == 0.0 || fd == rd);
                prop_assert_eq!(m.as_slice()[i], *fd > 0.0);
            }
        }
    }
}
