//! Sensor preprocessing into the mapping network's input vector.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geo::{LatLng, METERS_PER_DEGREE};
use crate::labeling::bearing;
use crate::scenario::{Message, SensorRecord};

pub const DEFAULT_WINDOW: usize = 4;
pub const DEFAULT_V_MAX: f64 = 40.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FeatureConfig {
    /// Samples per window (k seconds at the tick interval).
    pub window: usize,
    pub comm_range: f64,
    pub v_max: f64,
}

impl Default for FeatureConfig {
    fn default() -> Self {
        Self { window: DEFAULT_WINDOW, comm_range: 50.0, v_max: DEFAULT_V_MAX }
    }
}

impl FeatureConfig {
    /// Width of [`FeatureVector::to_input`].
    pub fn input_width(&self) -> usize {
        2 * self.window + 3
    }
}

/// Degrees of latitude and longitude that normalize to 1.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NormScale {
    pub lat_deg: f64,
    pub lng_deg: f64,
}

impl NormScale {
    /// `range_m` expressed in degrees at latitude `ref_lat`.
    pub fn for_range(range_m: f64, ref_lat: f64) -> Self {
        Self {
            lat_deg: range_m / METERS_PER_DEGREE,
            lng_deg: range_m / (METERS_PER_DEGREE * ref_lat.to_radians().cos()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureVector {
    /// (Δlat, Δlng) per slot, oldest first.
    pub latlng_deltas: Vec<[f64; 2]>,
    pub spd_y_norm: f64,
    pub spd_x_norm: f64,
    pub gamma: f64,
    pub validity_mask: Vec<bool>,
}

impl FeatureVector {
    /// Flat network input: deltas, sender speed, ego speed, gamma.
    pub fn to_input(&self) -> Vec<f64> {
        let mut v = Vec::with_capacity(self.latlng_deltas.len() * 2 + 3);
        for d in &self.latlng_deltas {
            v.extend_from_slice(d);
        }
        v.extend([self.spd_y_norm, self.spd_x_norm, self.gamma]);
        v
    }

    pub fn from_input(input: &[f64], mask: Vec<bool>) -> Result<Self> {
        if input.len() < 3 || !(input.len() - 3).is_multiple_of(2) || (input.len() - 3) / 2 != mask.len() {
            return Err(Error::Dimension(format!(
                "feature array of length {} does not match a window of {}",
                input.len(),
                mask.len()
            )));
        }
        let w = mask.len();
        Ok(Self {
            latlng_deltas: (0..w).map(|i| [input[2 * i], input[2 * i + 1]]).collect(),
            spd_y_norm: input[2 * w],
            spd_x_norm: input[2 * w + 1],
            gamma: input[2 * w + 2],
            validity_mask: mask,
        })
    }
}

/// Raw signed difference `msg - ego` in degrees as (Δlat, Δlng).
pub fn latlng_delta(msg: LatLng, ego: LatLng) -> (f64, f64) {
    (msg.lat - ego.lat, msg.lng - ego.lng)
}

pub fn latlng_delta_norm(msg: LatLng, ego: LatLng, scale: NormScale) -> (f64, f64) {
    let (dlat, dlng) = latlng_delta(msg, ego);
    ((dlat / scale.lat_deg).clamp(-1.0, 1.0), (dlng / scale.lng_deg).clamp(-1.0, 1.0))
}

/// Signed angular offset of the sender from the ego heading, in [-1, 1].
/// Positive means the sender is on the ego's left.
pub fn orientation_gamma(alpha_ori: f64, beta: f64) -> f64 {
    let d = alpha_ori - beta;
    if d < -180.0 {
        (d + 360.0) / 180.0
    } else if d > 180.0 {
        (d - 360.0) / 180.0
    } else {
        d / 180.0
    }
}

pub fn speed_norm(spd: f64, v_max: f64) -> Result<f64> {
    if spd < 0.0 {
        return Err(Error::NegativeSpeed(spd));
    }
    if !(v_max > 0.0) {
        return Err(Error::Config(format!("v_max must be positive, got {v_max}")));
    }
    Ok((spd / v_max).clamp(0.0, 1.0))
}

/// Assembles a feature vector from one sender's window, oldest slot first.
/// Empty slots are zero-filled and masked out; speeds and gamma come from
/// the newest populated slot.
pub fn build_feature_vector(
    window: &[Option<(&Message, &SensorRecord)>],
    cfg: &FeatureConfig,
) -> Result<FeatureVector> {
    let (newest_msg, newest_ego) = window.iter().rev().flatten().next().copied().ok_or(Error::EmptyHistory)?;
    let scale = NormScale::for_range(cfg.comm_range, newest_ego.lat);
    let mut latlng_deltas = Vec::with_capacity(window.len());
    let mut validity_mask = Vec::with_capacity(window.len());
    for slot in window {
        match slot {
            Some((m, e)) => {
                let (a, b) = latlng_delta_norm(m.position(), e.position(), scale);
                if !(a.is_finite() && b.is_finite()) {
                    return Err(Error::NonFinite("position"));
                }
                latlng_deltas.push([a, b]);
                validity_mask.push(true);
            }
            None => {
                latlng_deltas.push([0.0, 0.0]);
                validity_mask.push(false);
            }
        }
    }
    let beta = bearing(newest_ego.position(), newest_msg.position()).degrees;
    Ok(FeatureVector {
        latlng_deltas,
        spd_y_norm: speed_norm(newest_msg.spd, cfg.v_max)?,
        spd_x_norm: speed_norm(newest_ego.spd, cfg.v_max)?,
        gamma: orientation_gamma(newest_ego.ori, beta),
        validity_mask,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn msg(lat: f64, lng: f64, spd: f64) -> Message {
        Message { lat, lng, ori: 0.0, spd, id: 1, state: String::new() }
    }

    fn ego(lat: f64, lng: f64, ori: f64) -> SensorRecord {
        SensorRecord { lat, lng, ori, spd: 10.0 }
    }

    #[test]
    fn worked_gps_difference() {
        let (dlat, dlng) = latlng_delta(LatLng::new(23.973875, 120.982025), LatLng::new(23.973828, 120.982038));
        assert!((dlat - 0.000047).abs() < 1e-12);
        assert!((dlng + 0.000013).abs() < 1e-12);
    }

    #[test]
    fn delta_norm_edges() {
        let p = LatLng::new(23.0, 120.0);
        let s = NormScale::for_range(50.0, 23.0);
        assert_eq!(latlng_delta_norm(p, p, s), (0.0, 0.0));
        let far = LatLng::new(24.0, 119.0);
        assert_eq!(latlng_delta_norm(far, p, s), (1.0, -1.0));
    }

    #[test]
    fn gamma_branches() {
        assert_eq!(orientation_gamma(42.0, 42.0), 0.0);
        assert!((orientation_gamma(10.0, 350.0) - 20.0 / 180.0).abs() < 1e-12);
        assert!((orientation_gamma(350.0, 10.0) + 20.0 / 180.0).abs() < 1e-12);
        assert!((orientation_gamma(10.0, 350.0) - 0.111).abs() < 1e-3);
    }

    #[test]
    fn gamma_grid_bounds_and_antisymmetry() {
        for a in 0..360i32 {
            for b in 0..360 {
                let g = orientation_gamma(a as f64, b as f64);
                assert!((-1.0..=1.0).contains(&g), "gamma({a},{b}) = {g}");
                if (a - b).abs() != 180 {
                    assert_eq!(g, -orientation_gamma(b as f64, a as f64), "({a},{b})");
                }
            }
        }
    }

    #[test]
    fn speed_normalization() {
        assert_eq!(speed_norm(0.0, 40.0).unwrap(), 0.0);
        assert_eq!(speed_norm(40.0, 40.0).unwrap(), 1.0);
        assert_eq!(speed_norm(10.0, 40.0).unwrap(), 0.25);
        assert_eq!(speed_norm(80.0, 40.0).unwrap(), 1.0);
        assert!(matches!(speed_norm(-1.0, 40.0), Err(Error::NegativeSpeed(_))));
    }

    #[test]
    fn window_padding_and_mask() {
        let cfg = FeatureConfig::default();
        let m = msg(23.0002, 120.0001, 8.0);
        let e = ego(23.0, 120.0, 0.0);
        let full: Vec<_> = (0..4).map(|_| Some((&m, &e))).collect();
        let fv = build_feature_vector(&full, &cfg).unwrap();
        assert_eq!(fv.validity_mask, vec![true; 4]);
        assert_eq!(fv.to_input().len(), cfg.input_width());

        let partial = vec![None, None, None, Some((&m, &e))];
        let fv = build_feature_vector(&partial, &cfg).unwrap();
        assert_eq!(fv.validity_mask, vec![false, false, false, true]);
        assert_eq!(&fv.latlng_deltas[..3], &[[0.0, 0.0]; 3]);
        assert!((fv.spd_y_norm - 0.2).abs() < 1e-12);

        assert!(matches!(build_feature_vector(&[None, None], &cfg), Err(Error::EmptyHistory)));
    }

    #[test]
    fn translation_invariance() {
        let cfg = FeatureConfig::default();
        let build = |off: f64| {
            let m = msg(23.0002, 120.0001 + off, 8.0);
            let e = ego(23.0, 120.0 + off, 30.0);
            build_feature_vector(&[Some((&m, &e))], &cfg).unwrap()
        };
        let (a, b) = (build(0.0), build(0.37));
        for (x, y) in a.latlng_deltas.iter().zip(&b.latlng_deltas) {
            assert!((x[0] - y[0]).abs() < 1e-6 && (x[1] - y[1]).abs() < 1e-6);
        }
        assert!((a.gamma - b.gamma).abs() < 0.01);
    }

    #[test]
    fn input_round_trip() {
        let fv = FeatureVector {
            latlng_deltas: vec![[0.1, -0.2], [0.3, 0.4]],
            spd_y_norm: 0.5,
            spd_x_norm: 0.6,
            gamma: -0.7,
            validity_mask: vec![true, false],
        };
        assert_eq!(FeatureVector::from_input(&fv.to_input(), fv.validity_mask.clone()).unwrap(), fv);
        assert!(FeatureVector::from_input(&[0.0; 6], vec![true]).is_err());
    }
}
