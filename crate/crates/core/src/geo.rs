//! Earth frames and satellite/receiver geometry.
//!
//! Everything here works on WGS-84. Positions are plain `Vector3<f64>` in
//! the earth-centered earth-fixed frame; local errors are reported in an
//! east-north-up frame anchored at a reference point.

use nalgebra::{Matrix3, Vector3};
use std::f64::consts::{FRAC_PI_2, TAU};
use thiserror::Error;

/// Speed of light (m/s).
pub const SPEED_OF_LIGHT: f64 = 299_792_458.0;
/// Earth rotation rate (rad/s).
pub const EARTH_ROTATION_RATE: f64 = 7.292_115_146_7e-5;
/// WGS-84 semi-major axis (m).
pub const WGS84_A: f64 = 6_378_137.0;
/// WGS-84 flattening.
pub const WGS84_F: f64 = 1.0 / 298.257_223_563;
/// WGS-84 semi-minor axis (m).
pub const WGS84_B: f64 = WGS84_A * (1.0 - WGS84_F);
/// First eccentricity squared.
pub const WGS84_E2: f64 = WGS84_F * (2.0 - WGS84_F);

const GEODETIC_TOL: f64 = 1e-12;
const GEODETIC_MAX_ITER: usize = 10;

/// A point in the ECEF frame (m).
pub type EcefPoint = Vector3<f64>;
/// A velocity in the ECEF frame (m/s).
pub type EcefVelocity = Vector3<f64>;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GeoError {
    #[error("latitude {0} rad is outside [-pi/2, pi/2]")]
    LatitudeOutOfRange(f64),
    #[error("point is at the earth center")]
    Origin,
    #[error("points coincide")]
    CoincidentPoints,
    #[error("non-finite coordinate")]
    NonFinite,
}

/// Geodetic coordinates: latitude and longitude in radians, ellipsoidal height in meters.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Geodetic {
    pub lat: f64,
    pub lon: f64,
    pub height: f64,
}

impl Geodetic {
    pub fn new(lat: f64, lon: f64, height: f64) -> Self {
        Self { lat, lon, height }
    }

    pub fn from_degrees(lat_deg: f64, lon_deg: f64, height: f64) -> Self {
        Self::new(lat_deg.to_radians(), lon_deg.to_radians(), height)
    }
}

/// Local east/north/up offset (m).
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct Enu {
    pub east: f64,
    pub north: f64,
    pub up: f64,
}

impl Enu {
    pub fn new(east: f64, north: f64, up: f64) -> Self {
        Self { east, north, up }
    }

    pub fn horizontal_norm(&self) -> f64 {
        self.east.hypot(self.north)
    }

    pub fn norm(&self) -> f64 {
        (self.east * self.east + self.north * self.north + self.up * self.up).sqrt()
    }

    pub fn as_vector(&self) -> Vector3<f64> {
        Vector3::new(self.east, self.north, self.up)
    }
}

fn prime_vertical_radius(sin_lat: f64) -> f64 {
    WGS84_A / (1.0 - WGS84_E2 * sin_lat * sin_lat).sqrt()
}

pub fn geodetic_to_ecef(geo: &Geodetic) -> Result<EcefPoint, GeoError> {
    if !(geo.lat.is_finite() && geo.lon.is_finite() && geo.height.is_finite()) {
        return Err(GeoError::NonFinite);
    }
    if geo.lat.abs() > FRAC_PI_2 {
        return Err(GeoError::LatitudeOutOfRange(geo.lat));
    }
    let (sin_lat, cos_lat) = geo.lat.sin_cos();
    let (sin_lon, cos_lon) = geo.lon.sin_cos();
    let n = prime_vertical_radius(sin_lat);
    Ok(Vector3::new(
        (n + geo.height) * cos_lat * cos_lon,
        (n + geo.height) * cos_lat * sin_lon,
        (n * (1.0 - WGS84_E2) + geo.height) * sin_lat,
    ))
}

/// Iterative inverse of [`geodetic_to_ecef`].
///
/// Uses the fixed-point latitude update `lat = atan2(z + e² N sin(lat), p)`
/// with the height taken from the projection onto the normal, which stays
/// well conditioned at the poles.
pub fn ecef_to_geodetic(p: &EcefPoint) -> Result<Geodetic, GeoError> {
    if !p.iter().all(|v| v.is_finite()) {
        return Err(GeoError::NonFinite);
    }
    if p.norm() == 0.0 {
        return Err(GeoError::Origin);
    }
    let rho = p.x.hypot(p.y);
    let lon = if rho == 0.0 { 0.0 } else { p.y.atan2(p.x) };

    let mut lat = p.z.atan2(rho * (1.0 - WGS84_E2));
    for _ in 0..GEODETIC_MAX_ITER {
        let n = prime_vertical_radius(lat.sin());
        let next = (p.z + WGS84_E2 * n * lat.sin()).atan2(rho);
        let delta = (next - lat).abs();
        lat = next;
        if delta < GEODETIC_TOL {
            break;
        }
    }
    let (sin_lat, cos_lat) = lat.sin_cos();
    let height = rho * cos_lat + p.z * sin_lat - WGS84_A * (1.0 - WGS84_E2 * sin_lat * sin_lat).sqrt();
    Ok(Geodetic { lat, lon, height })
}

/// Rotation taking ECEF offsets to ENU at the given geodetic location.
pub fn enu_rotation(lat: f64, lon: f64) -> Matrix3<f64> {
    let (sl, cl) = lat.sin_cos();
    let (so, co) = lon.sin_cos();
    Matrix3::new(
        -so, co, 0.0, //
        -sl * co, -sl * so, cl, //
        cl * co, cl * so, sl,
    )
}

pub fn ecef_to_enu(p: &EcefPoint, reference: &EcefPoint) -> Result<Enu, GeoError> {
    let geo = ecef_to_geodetic(reference)?;
    let v = enu_rotation(geo.lat, geo.lon) * (p - reference);
    Ok(Enu::new(v.x, v.y, v.z))
}

/// Inverse of [`ecef_to_enu`].
pub fn enu_to_ecef(enu: &Enu, reference: &EcefPoint) -> Result<EcefPoint, GeoError> {
    let geo = ecef_to_geodetic(reference)?;
    Ok(reference + enu_rotation(geo.lat, geo.lon).transpose() * enu.as_vector())
}

/// Elevation and azimuth (radians) of `sat` seen from `rcv`.
///
/// Azimuth is clockwise from north in `[0, 2π)`.
pub fn elevation_azimuth(sat: &EcefPoint, rcv: &EcefPoint) -> Result<(f64, f64), GeoError> {
    if sat == rcv {
        return Err(GeoError::CoincidentPoints);
    }
    let enu = ecef_to_enu(sat, rcv)?;
    let elevation = enu.up.atan2(enu.horizontal_norm());
    let mut azimuth = enu.east.atan2(enu.north);
    if azimuth < 0.0 {
        azimuth += TAU;
    }
    if azimuth >= TAU {
        azimuth -= TAU;
    }
    Ok((elevation, azimuth))
}

pub fn los_unit_vector(sat: &EcefPoint, rcv: &EcefPoint) -> Result<Vector3<f64>, GeoError> {
    let d = sat - rcv;
    let range = d.norm();
    if range == 0.0 {
        return Err(GeoError::CoincidentPoints);
    }
    if !range.is_finite() {
        return Err(GeoError::NonFinite);
    }
    Ok(d / range)
}
