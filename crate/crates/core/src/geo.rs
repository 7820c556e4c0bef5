//! WGS84 bounding boxes and points, decimal degrees.

use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GeoPoint {
    pub lat: f64,
    pub lon: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GeoRegion {
    pub min_lon: f64,
    pub min_lat: f64,
    pub max_lon: f64,
    pub max_lat: f64,
}

impl GeoRegion {
    pub const fn new(min_lon: f64, min_lat: f64, max_lon: f64, max_lat: f64) -> Self {
        GeoRegion { min_lon, min_lat, max_lon, max_lat }
    }

    /// The whole globe.
    pub const fn world() -> Self {
        GeoRegion::new(-180.0, -90.0, 180.0, 90.0)
    }

    /// Finite coordinates with `min <= max` on both axes.
    pub fn is_valid(&self) -> bool {
        let all_finite = [self.min_lon, self.min_lat, self.max_lon, self.max_lat].iter().all(|v| v.is_finite());
        all_finite && self.min_lon <= self.max_lon && self.min_lat <= self.max_lat
    }

    /// Closed-box overlap: shared edges and corners count.
    pub fn intersects(&self, other: &GeoRegion) -> bool {
        self.min_lon <= other.max_lon
            && other.min_lon <= self.max_lon
            && self.min_lat <= other.max_lat
            && other.min_lat <= self.max_lat
    }

    pub fn contains_point(&self, p: &GeoPoint) -> bool {
        (self.min_lon..=self.max_lon).contains(&p.lon) && (self.min_lat..=self.max_lat).contains(&p.lat)
    }
}
