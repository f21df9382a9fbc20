//! Spherical-earth helpers shared by the simulator and the feature pipeline.
//!
//! Distances use the haversine formula on a sphere of mean earth radius.
//! Local conversions use an equirectangular approximation around an origin,
//! which is accurate to well under a centimetre over the few hundred metres
//! a scenario spans.

use serde::{Deserialize, Serialize};

pub const EARTH_RADIUS_M: f64 = 6_371_008.8;

/// Metres per degree of latitude (and of longitude at the equator) on the
/// same sphere the haversine distance uses.
pub const METERS_PER_DEGREE: f64 = EARTH_RADIUS_M * std::f64::consts::PI / 180.0;

/// A position in decimal degrees, north and east positive.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LatLng {
    pub lat: f64,
    pub lng: f64,
}

impl LatLng {
    pub const fn new(lat: f64, lng: f64) -> Self {
        Self { lat, lng }
    }
}

/// Great-circle distance in metres.
pub fn haversine_m(a: LatLng, b: LatLng) -> f64 {
    let (phi1, phi2) = (a.lat.to_radians(), b.lat.to_radians());
    let dphi = phi2 - phi1;
    let dlambda = (b.lng - a.lng).to_radians();
    let h = (dphi / 2.0).sin().powi(2) + phi1.cos() * phi2.cos() * (dlambda / 2.0).sin().powi(2);
    2.0 * EARTH_RADIUS_M * h.sqrt().min(1.0).asin()
}

/// Offset of `p` from `origin` in metres as (east, north).
pub fn to_local(origin: LatLng, p: LatLng) -> (f64, f64) {
    let north = (p.lat - origin.lat) * METERS_PER_DEGREE;
    let east = (p.lng - origin.lng) * METERS_PER_DEGREE * origin.lat.to_radians().cos();
    (east, north)
}

/// Inverse of [`to_local`].
pub fn from_local(origin: LatLng, east: f64, north: f64) -> LatLng {
    LatLng {
        lat: origin.lat + north / METERS_PER_DEGREE,
        lng: origin.lng + east / (METERS_PER_DEGREE * origin.lat.to_radians().cos()),
    }
}

/// Wraps an angle in degrees into [0, 360).
pub fn wrap_360(deg: f64) -> f64 {
    let w = deg.rem_euclid(360.0);
    if w >= 360.0 {
        0.0
    } else {
        w
    }
}

/// Wraps an angle difference in degrees into (-180, 180].
pub fn wrap_180(deg: f64) -> f64 {
    let w = wrap_360(deg);
    if w > 180.0 {
        w - 360.0
    } else {
        w
    }
}

/// Compass heading (clockwise from north) of a local (east, north) vector.
pub fn heading_of(east: f64, north: f64) -> f64 {
    wrap_360(east.atan2(north).to_degrees())
}

/// Unit (east, north) vector for a compass heading.
pub fn heading_vector(heading_deg: f64) -> (f64, f64) {
    let r = heading_deg.to_radians();
    (r.sin(), r.cos())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn one_degree_of_latitude() {
        let d = haversine_m(LatLng::new(0.0, 0.0), LatLng::new(1.0, 0.0));
        assert!((d - METERS_PER_DEGREE).abs() < 1e-6, "{d}");
    }

    #[test]
    fn local_round_trip() {
        let origin = LatLng::new(23.9738, 120.982);
        let p = from_local(origin, 37.5, -12.25);
        let (e, n) = to_local(origin, p);
        assert!((e - 37.5).abs() < 1e-9 && (n + 12.25).abs() < 1e-9);
    }

    #[test]
    fn local_distance_agrees_with_haversine() {
        let origin = LatLng::new(23.9738, 120.982);
        let p = from_local(origin, 30.0, 40.0);
        assert!((haversine_m(origin, p) - 50.0).abs() < 0.05);
    }

    #[test]
    fn wrapping() {
        assert_eq!(wrap_360(-10.0), 350.0);
        assert_eq!(wrap_360(720.0), 0.0);
        assert_eq!(wrap_180(190.0), -170.0);
        assert_eq!(wrap_180(180.0), 180.0);
        assert_eq!(wrap_180(-180.0), 180.0);
        assert_eq!(heading_of(1.0, 0.0), 90.0);
    }
}
