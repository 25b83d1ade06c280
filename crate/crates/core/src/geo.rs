//! WGS-84 geodetic coordinates and the local East-North-Up frame.
//!
//! All map reasoning happens in meters: OSM geometry is projected into an
//! ENU frame tangent to the ellipsoid at a query center, via the exact
//! geodetic -> ECEF -> ENU chain.

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// WGS-84 semi-major axis in meters.
pub const WGS84_A: f64 = 6_378_137.0;
/// WGS-84 flattening.
pub const WGS84_F: f64 = 1.0 / 298.257_223_563;
/// First eccentricity squared.
pub const WGS84_E2: f64 = WGS84_F * (2.0 - WGS84_F);

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GeoError {
    #[error("invalid coordinate: lat={lat}, lon={lon}")]
    InvalidCoordinate { lat: f64, lon: f64 },
}

/// A latitude/longitude pair in degrees.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GeoPoint {
    lat: f64,
    lon: f64,
}

impl GeoPoint {
    pub fn new(lat: f64, lon: f64) -> Result<Self, GeoError> {
        let point = Self { lat, lon };
        point.validate()?;
        Ok(point)
    }

    pub fn lat(&self) -> f64 {
        self.lat
    }

    pub fn lon(&self) -> f64 {
        self.lon
    }

    pub fn validate(&self) -> Result<(), GeoError> {
        let ok = self.lat.is_finite()
            && self.lon.is_finite()
            && (-90.0..=90.0).contains(&self.lat)
            && (-180.0..=180.0).contains(&self.lon);
        if ok {
            Ok(())
        } else {
            Err(GeoError::InvalidCoordinate {
                lat: self.lat,
                lon: self.lon,
            })
        }
    }
}

/// Local tangent-plane coordinates in meters: x east, y north, z up.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct EnuPoint {
    pub x: f64,
    pub y: f64,
    pub z: f64,
}

impl EnuPoint {
    pub const ORIGIN: EnuPoint = EnuPoint {
        x: 0.0,
        y: 0.0,
        z: 0.0,
    };

    pub fn new(x: f64, y: f64, z: f64) -> Self {
        Self { x, y, z }
    }

    /// Point on the ground plane (z = 0).
    pub fn planar(x: f64, y: f64) -> Self {
        Self { x, y, z: 0.0 }
    }
}

/// Earth-centered, earth-fixed cartesian coordinates in meters.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Ecef {
    pub x: f64,
    pub y: f64,
    pub z: f64,
}

/// Geodetic to ECEF at ellipsoidal height `height` (meters).
pub fn geodetic_to_ecef(point: GeoPoint, height: f64) -> Ecef {
    let (sin_lat, cos_lat) = point.lat.to_radians().sin_cos();
    let (sin_lon, cos_lon) = point.lon.to_radians().sin_cos();
    let n = WGS84_A / (1.0 - WGS84_E2 * sin_lat * sin_lat).sqrt();
    Ecef {
        x: (n + height) * cos_lat * cos_lon,
        y: (n + height) * cos_lat * sin_lon,
        z: (n * (1.0 - WGS84_E2) + height) * sin_lat,
    }
}

/// ENU coordinates of `point` in the frame tangent at `reference`.
///
/// Both points are taken at zero ellipsoidal height.
pub fn gps_to_enu(point: GeoPoint, reference: GeoPoint) -> Result<EnuPoint, GeoError> {
    point.validate()?;
    reference.validate()?;
    Ok(enu_from_validated(point, reference))
}

/// Projection for points already known to be valid (e.g. produced by the
/// OSM parser); skips the range checks.
pub(crate) fn enu_from_validated(point: GeoPoint, reference: GeoPoint) -> EnuPoint {
    if point == reference {
        return EnuPoint::ORIGIN;
    }
    let p = geodetic_to_ecef(point, 0.0);
    let r = geodetic_to_ecef(reference, 0.0);
    let (dx, dy, dz) = (p.x - r.x, p.y - r.y, p.z - r.z);
    let (sin_lat, cos_lat) = reference.lat.to_radians().sin_cos();
    let (sin_lon, cos_lon) = reference.lon.to_radians().sin_cos();
    EnuPoint {
        x: -sin_lon * dx + cos_lon * dy,
        y: -sin_lat * cos_lon * dx - sin_lat * sin_lon * dy + cos_lat * dz,
        z: cos_lat * cos_lon * dx + cos_lat * sin_lon * dy + sin_lat * dz,
    }
}

/// Planar Euclidean distance; z is ignored.
pub fn enu_distance(a: EnuPoint, b: EnuPoint) -> f64 {
    (a.x - b.x).hypot(a.y - b.y)
}

/// Approximate meters per degree of latitude/longitude at `lat`, used to
/// size search boxes. Not used for any exact geometry.
pub(crate) fn meters_per_degree(lat: f64) -> (f64, f64) {
    let (sin_lat, cos_lat) = lat.to_radians().sin_cos();
    let w = (1.0 - WGS84_E2 * sin_lat * sin_lat).sqrt();
    let meridional = WGS84_A * (1.0 - WGS84_E2) / (w * w * w);
    let normal = WGS84_A / w;
    let deg = std::f64::consts::PI / 180.0;
    (meridional * deg, normal * cos_lat * deg)
}
