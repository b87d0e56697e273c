//! Spherical geometry on WGS84-style degree coordinates.

use serde::{Deserialize, Serialize};

pub const EARTH_RADIUS_KM: f64 = 6371.0088;
const KM_PER_DEG_LAT: f64 = 111.32;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LatLon {
    pub lat: f64,
    pub lon: f64,
}

impl LatLon {
    pub fn new(lat: f64, lon: f64) -> Self {
        LatLon { lat, lon }
    }

    /// Offsets this point by planar kilometres (east, north).
    pub fn offset_km(self, east: f64, north: f64) -> Self {
        LatLon {
            lat: self.lat + north / KM_PER_DEG_LAT,
            lon: self.lon + east / (KM_PER_DEG_LAT * self.lat.to_radians().cos()),
        }
    }
}

pub fn haversine_km(a: LatLon, b: LatLon) -> f64 {
    let (p1, p2) = (a.lat.to_radians(), b.lat.to_radians());
    let dp = p2 - p1;
    let dl = (b.lon - a.lon).to_radians();
    let h = (dp / 2.0).sin().powi(2) + p1.cos() * p2.cos() * (dl / 2.0).sin().powi(2);
    2.0 * EARTH_RADIUS_KM * h.sqrt().min(1.0).asin()
}

pub fn haversine_m(a: LatLon, b: LatLon) -> f64 {
    haversine_km(a, b) * 1000.0
}

/// Initial great-circle bearing from `a` to `b`, degrees clockwise from
/// north in `[0, 360)`.
pub fn bearing_deg(a: LatLon, b: LatLon) -> f64 {
    let (p1, p2) = (a.lat.to_radians(), b.lat.to_radians());
    let dl = (b.lon - a.lon).to_radians();
    let y = dl.sin() * p2.cos();
    let x = p1.cos() * p2.sin() - p1.sin() * p2.cos() * dl.cos();
    let deg = y.atan2(x).to_degrees();
    let d = deg.rem_euclid(360.0);
    if d >= 360.0 {
        0.0
    } else {
        d
    }
}

/// Axis-aligned latitude/longitude box.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BBox {
    pub min_lat: f64,
    pub min_lon: f64,
    pub max_lat: f64,
    pub max_lon: f64,
}

impl BBox {
    pub fn new(min_lat: f64, min_lon: f64, max_lat: f64, max_lon: f64) -> Self {
        BBox { min_lat, min_lon, max_lat, max_lon }
    }

    /// Houston area of interest.
    pub fn houston() -> Self {
        BBox::new(29.55, -95.56, 29.95, -95.16)
    }

    pub fn is_valid(&self) -> bool {
        self.max_lat > self.min_lat
            && self.max_lon > self.min_lon
            && [self.min_lat, self.min_lon, self.max_lat, self.max_lon]
                .iter()
                .all(|v| v.is_finite())
    }

    pub fn contains(&self, p: LatLon) -> bool {
        p.lat >= self.min_lat && p.lat <= self.max_lat && p.lon >= self.min_lon && p.lon <= self.max_lon
    }

    pub fn center(&self) -> LatLon {
        LatLon::new((self.min_lat + self.max_lat) / 2.0, (self.min_lon + self.max_lon) / 2.0)
    }

    /// East-west and north-south extent in km at the box centre.
    pub fn extent_km(&self) -> (f64, f64) {
        let c = self.center();
        let ew = haversine_km(LatLon::new(c.lat, self.min_lon), LatLon::new(c.lat, self.max_lon));
        let ns = haversine_km(LatLon::new(self.min_lat, c.lon), LatLon::new(self.max_lat, c.lon));
        (ew, ns)
    }
}

/// Even-odd ray casting on a closed ring of (lat, lon) vertices.
pub fn point_in_polygon(p: LatLon, ring: &[LatLon]) -> bool {
    let n = ring.len();
    if n < 3 {
        return false;
    }
    let mut inside = false;
    let mut j = n - 1;
    for i in 0..n {
        let (a, b) = (ring[i], ring[j]);
        if (a.lat > p.lat) != (b.lat > p.lat) {
            let x = (b.lon - a.lon) * (p.lat - a.lat) / (b.lat - a.lat) + a.lon;
            if p.lon < x {
                inside = !inside;
            }
        }
        j = i;
    }
    inside
}
