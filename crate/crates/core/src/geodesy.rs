//! Earth models and frame conversions.
//!
//! The world frame (w-frame) used throughout the crate is a gravity-aligned
//! north-east-down (NED) frame anchored at a geodetic origin. Gravity follows
//! the Somigliana normal-gravity formula on the WGS-84 ellipsoid with a
//! linear free-air height correction, and geodetic/world conversions go
//! through exact ECEF differences so no distance-dependent linearization
//! error enters the pipeline.

use nalgebra::{Matrix3, Vector3};
use thiserror::Error;

/// WGS-84 semi-major axis, meters.
pub const WGS84_A: f64 = 6_378_137.0;
/// WGS-84 flattening.
pub const WGS84_F: f64 = 1.0 / 298.257_223_563;
/// WGS-84 first eccentricity squared.
pub const WGS84_E2: f64 = WGS84_F * (2.0 - WGS84_F);
/// WGS-84 semi-minor axis, meters.
pub const WGS84_B: f64 = WGS84_A * (1.0 - WGS84_F);
/// Earth rotation rate, rad/s.
pub const EARTH_RATE: f64 = 7.292_115e-5;
/// Normal gravity at the equator, m/s².
pub const GRAVITY_EQUATOR: f64 = 9.780_325_3359;
/// Normal gravity at the poles, m/s².
pub const GRAVITY_POLE: f64 = 9.832_184_9379;
/// Somigliana constant k = (b·gp − a·ge) / (a·ge).
pub const SOMIGLIANA_K: f64 =
    (WGS84_B * GRAVITY_POLE - WGS84_A * GRAVITY_EQUATOR) / (WGS84_A * GRAVITY_EQUATOR);
/// Free-air gravity gradient, (m/s²)/m.
pub const FREE_AIR_GRADIENT: f64 = 3.086e-6;

#[derive(Debug, Error, PartialEq)]
pub enum GeodesyError {
    #[error("latitude {0} rad outside [-pi/2, pi/2]")]
    InvalidLatitude(f64),
    #[error("longitude {0} rad outside [-pi, pi]")]
    InvalidLongitude(f64),
}

/// Geodetic position on the WGS-84 ellipsoid (radians, radians, meters).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GeodeticPosition {
    pub latitude: f64,
    pub longitude: f64,
    pub height: f64,
}

impl GeodeticPosition {
    pub fn new(latitude: f64, longitude: f64, height: f64) -> Result<Self, GeodesyError> {
        if !latitude.is_finite() || latitude.abs() > std::f64::consts::FRAC_PI_2 {
            return Err(GeodesyError::InvalidLatitude(latitude));
        }
        if !longitude.is_finite() || longitude.abs() > std::f64::consts::PI {
            return Err(GeodesyError::InvalidLongitude(longitude));
        }
        Ok(Self { latitude, longitude, height })
    }

    pub fn from_degrees(lat_deg: f64, lon_deg: f64, height: f64) -> Result<Self, GeodesyError> {
        Self::new(lat_deg.to_radians(), lon_deg.to_radians(), height)
    }
}

/// Local gravity-aligned NED world frame anchored at `origin`.
///
/// The gravity vector and Earth rotation rate are evaluated once at the
/// anchor and treated as constants of the frame.
#[derive(Debug, Clone, Copy)]
pub struct WorldFrame {
    pub origin: GeodeticPosition,
    /// Gravity in the world frame, `[0, 0, g]` (down-positive).
    pub gravity: Vector3<f64>,
    /// Earth rotation rate expressed in the world frame.
    pub earth_rate: Vector3<f64>,
}

impl WorldFrame {
    pub fn new(origin: GeodeticPosition) -> Self {
        Self {
            origin,
            gravity: local_gravity(origin.latitude, origin.height),
            earth_rate: earth_rate_world(origin.latitude),
        }
    }

    /// A frame with no gravity and no Earth rotation. Degenerate configuration
    /// used to isolate kinematic terms in tests.
    pub fn non_rotating(origin: GeodeticPosition) -> Self {
        Self { origin, gravity: Vector3::zeros(), earth_rate: Vector3::zeros() }
    }

    /// Convert a geodetic position to world-frame NED coordinates.
    pub fn to_world(&self, p: &GeodeticPosition) -> Vector3<f64> {
        geodetic_to_world(&self.origin, p)
    }

    /// Convert world-frame NED coordinates back to a geodetic position.
    pub fn to_geodetic(&self, p_world: &Vector3<f64>) -> GeodeticPosition {
        world_to_geodetic(&self.origin, p_world)
    }
}

/// Normal gravity in the world frame: `[0, 0, g(lat, h)]` in NED.
///
/// Somigliana formula on WGS-84 with a linear free-air correction in height.
pub fn local_gravity(latitude: f64, height: f64) -> Vector3<f64> {
    let s2 = latitude.sin().powi(2);
    let g0 = GRAVITY_EQUATOR * (1.0 + SOMIGLIANA_K * s2) / (1.0 - WGS84_E2 * s2).sqrt();
    Vector3::new(0.0, 0.0, g0 - FREE_AIR_GRADIENT * height)
}

/// Earth rotation rate in the local NED frame: `ω_e · [cos lat, 0, −sin lat]`.
pub fn earth_rate_world(latitude: f64) -> Vector3<f64> {
    Vector3::new(EARTH_RATE * latitude.cos(), 0.0, -EARTH_RATE * latitude.sin())
}

/// Rotation taking ECEF vectors into the NED frame at `p`.
pub fn ecef_to_ned_rotation(p: &GeodeticPosition) -> Matrix3<f64> {
    let (slat, clat) = p.latitude.sin_cos();
    let (slon, clon) = p.longitude.sin_cos();
    Matrix3::new(
        -slat * clon, -slat * slon, clat, //
        -slon, clon, 0.0, //
        -clat * clon, -clat * slon, -slat,
    )
}

/// Geodetic to ECEF coordinates.
pub fn geodetic_to_ecef(p: &GeodeticPosition) -> Vector3<f64> {
    let (slat, clat) = p.latitude.sin_cos();
    let (slon, clon) = p.longitude.sin_cos();
    let n = WGS84_A / (1.0 - WGS84_E2 * slat * slat).sqrt();
    Vector3::new(
        (n + p.height) * clat * clon,
        (n + p.height) * clat * slon,
        (n * (1.0 - WGS84_E2) + p.height) * slat,
    )
}

/// ECEF to geodetic coordinates by fixed-point iteration on the latitude.
pub fn ecef_to_geodetic(ecef: &Vector3<f64>) -> GeodeticPosition {
    let lon = ecef.y.atan2(ecef.x);
    let rho = (ecef.x * ecef.x + ecef.y * ecef.y).sqrt();
    let mut lat = ecef.z.atan2(rho * (1.0 - WGS84_E2));
    let mut height = 0.0;
    for _ in 0..20 {
        let slat = lat.sin();
        let n = WGS84_A / (1.0 - WGS84_E2 * slat * slat).sqrt();
        height = rho / lat.cos() - n;
        let next = ecef.z.atan2(rho * (1.0 - WGS84_E2 * n / (n + height)));
        let done = (next - lat).abs() < 1e-15;
        lat = next;
        if done {
            break;
        }
    }
    GeodeticPosition { latitude: lat, longitude: lon, height }
}

/// NED offset of `p` from `origin`: exact ECEF difference rotated into the
/// origin's NED frame.
pub fn geodetic_to_world(origin: &GeodeticPosition, p: &GeodeticPosition) -> Vector3<f64> {
    ecef_to_ned_rotation(origin) * (geodetic_to_ecef(p) - geodetic_to_ecef(origin))
}

/// Inverse of [`geodetic_to_world`]: lift a world-frame point back to
/// geodetic coordinates.
///
/// Newton iteration directly on the forward map, so forward(inverse(p))
/// reproduces `p` to the floating-point resolution of the geodetic
/// representation (sub-nanometer for offsets below ~10 km).
pub fn world_to_geodetic(origin: &GeodeticPosition, p_world: &Vector3<f64>) -> GeodeticPosition {
    let mut g = *origin;
    let mut best = g;
    let mut best_err = f64::INFINITY;
    for _ in 0..12 {
        let err = p_world - geodetic_to_world(origin, &g);
        if err.norm() < best_err {
            best = g;
            best_err = err.norm();
        }
        if best_err < 1e-12 {
            break;
        }
        let s2 = g.latitude.sin().powi(2);
        let den = 1.0 - WGS84_E2 * s2;
        let n = WGS84_A / den.sqrt();
        let m = WGS84_A * (1.0 - WGS84_E2) / (den * den.sqrt());
        g.latitude += err.x / (m + g.height);
        g.longitude += err.y / ((n + g.height) * g.latitude.cos());
        g.height -= err.z;
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use std::f64::consts::{FRAC_PI_2, FRAC_PI_4};

    #[test]
    fn gravity_matches_somigliana_reference_values() {
        assert_relative_eq!(local_gravity(0.0, 0.0).z, 9.780_325_3359, epsilon = 1e-9);
        assert_relative_eq!(local_gravity(FRAC_PI_2, 0.0).z, 9.832_184_9379, epsilon = 1e-9);
        assert!(local_gravity(0.0, 0.0).fixed_rows::<2>(0).norm() == 0.0);
    }

    #[test]
    fn free_air_correction_reduces_gravity_with_height() {
        let g0 = local_gravity(0.0, 0.0).z;
        let g1 = local_gravity(0.0, 1000.0).z;
        // free-air gradient oracle: 3.086e-6 per meter
        assert_relative_eq!(g0 - g1, 3.086e-3, epsilon = 1e-9);
    }

    #[test]
    fn gravity_monotonic_in_latitude() {
        let mut prev = local_gravity(0.0, 0.0).z;
        for i in 1..=90 {
            let g = local_gravity((i as f64).to_radians(), 0.0).z;
            assert!(g > prev, "gravity not increasing at {} deg", i);
            prev = g;
        }
    }

    #[test]
    fn earth_rate_reference_values() {
        let eq = earth_rate_world(0.0);
        assert_relative_eq!(eq.x, 7.292_115e-5, epsilon = 1e-18);
        assert_eq!(eq.y, 0.0);
        assert!(eq.z.abs() < 1e-20);

        let pole = earth_rate_world(FRAC_PI_2);
        assert!(pole.x.abs() < 1e-20);
        assert_relative_eq!(pole.z, -7.292_115e-5, epsilon = 1e-18);

        // omega_e / sqrt(2), evaluated independently
        let mid = earth_rate_world(FRAC_PI_4);
        let expected = 7.292_115e-5 / 2.0_f64.sqrt();
        assert_relative_eq!(mid.x, expected, epsilon = 1e-18);
        assert_relative_eq!(mid.z, -expected, epsilon = 1e-18);
    }

    #[test]
    fn earth_rate_norm_constant() {
        for i in 0..=180 {
            let lat = -FRAC_PI_2 + (i as f64) * FRAC_PI_2 / 90.0;
            assert!((earth_rate_world(lat).norm() - EARTH_RATE).abs() < 1e-18);
        }
    }

    #[test]
    fn world_conversion_identity_and_signs() {
        let origin = GeodeticPosition::new(0.5, 1.0, 100.0).unwrap();
        assert_eq!(geodetic_to_world(&origin, &origin), Vector3::zeros());

        let below = GeodeticPosition { height: origin.height - 10.0, ..origin };
        let w = geodetic_to_world(&origin, &below);
        assert_relative_eq!(w.z, 10.0, epsilon = 1e-9);
        assert!(w.fixed_rows::<2>(0).norm() < 1e-9);
    }

    #[test]
    fn small_north_offset_matches_meridian_radius() {
        let origin = GeodeticPosition::new(0.0, 0.2, 0.0).unwrap();
        let p = GeodeticPosition { latitude: 1e-5, ..origin };
        let w = geodetic_to_world(&origin, &p);
        // meridian radius of curvature at the equator: a(1 - e^2)
        let m = WGS84_A * (1.0 - WGS84_E2);
        assert_relative_eq!(w.x, m * 1e-5, epsilon = 1e-3);
        assert!(w.y.abs() < 1e-9);
    }

    #[test]
    fn world_round_trip_below_nanometer() {
        // lat/lon kept below 0.5 rad so that one ulp of the geodetic
        // representation stays under ~0.4 nm of position
        let origin = GeodeticPosition::new(0.4, 0.2, 42.0).unwrap();
        // deterministic fan of offsets out to ~9 km
        for i in 0..64 {
            let t = i as f64;
            let p = Vector3::new(
                (t * 0.71).sin() * 9000.0,
                (t * 0.37).cos() * 9000.0,
                (t * 0.13).sin() * 200.0,
            );
            let back = geodetic_to_world(&origin, &world_to_geodetic(&origin, &p));
            assert!((back - p).norm() < 1e-9, "round trip error {}", (back - p).norm());
        }
    }

    #[test]
    fn invalid_inputs_rejected() {
        assert!(GeodeticPosition::new(2.0, 0.0, 0.0).is_err());
        assert!(GeodeticPosition::new(0.0, 4.0, 0.0).is_err());
        assert!(GeodeticPosition::new(f64::NAN, 0.0, 0.0).is_err());
    }
}

