//! Geolocated points: parsing, great-circle distance, and spatial de-duplication.
//!
//! Point collections come in as CSV (`id,lat,lon,label,category`) or GeoJSON
//! FeatureCollections of Points carrying the same properties. Spacing is
//! enforced greedily in input order with a 3-D chord-space grid index, so the
//! check stays near-linear and is pole- and antimeridian-safe.

use std::collections::HashMap;
use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Mean Earth radius in meters (spherical model).
pub const EARTH_RADIUS_M: f64 = 6_371_000.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PointLabel {
    School,
    NonSchool,
}

impl fmt::Display for PointLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            PointLabel::School => write!(f, "school"),
            PointLabel::NonSchool => write!(f, "non_school"),
        }
    }
}

/// A WGS84 coordinate with a source tag.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GeoPoint {
    pub id: String,
    pub lat: f64,
    pub lon: f64,
    pub label: PointLabel,
    /// Free-text source tag, e.g. "giga" or "hospital".
    pub category: String,
}

impl GeoPoint {
    pub fn new(
        id: impl Into<String>,
        lat: f64,
        lon: f64,
        label: PointLabel,
        category: impl Into<String>,
    ) -> Result<Self> {
        if !(-90.0..=90.0).contains(&lat) || !lat.is_finite() {
            return Err(Error::InvalidInput(format!("latitude {lat} out of [-90, 90]")));
        }
        if !(-180.0..=180.0).contains(&lon) || !lon.is_finite() {
            return Err(Error::InvalidInput(format!("longitude {lon} out of [-180, 180]")));
        }
        Ok(GeoPoint {
            id: id.into(),
            lat,
            lon,
            label,
            category: category.into(),
        })
    }

    /// Unit-sphere Cartesian coordinates, used for chord-space indexing.
    fn unit_xyz(&self) -> [f64; 3] {
        let (lat, lon) = (self.lat.to_radians(), self.lon.to_radians());
        [lat.cos() * lon.cos(), lat.cos() * lon.sin(), lat.sin()]
    }
}

/// Axis-aligned region in degrees.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GeoBBox {
    pub min_lat: f64,
    pub min_lon: f64,
    pub max_lat: f64,
    pub max_lon: f64,
}

impl GeoBBox {
    pub fn new(min_lat: f64, min_lon: f64, max_lat: f64, max_lon: f64) -> Result<Self> {
        if min_lat >= max_lat || min_lon >= max_lon {
            return Err(Error::InvalidInput(format!(
                "degenerate region [{min_lat},{min_lon}] x [{max_lat},{max_lon}]"
            )));
        }
        Ok(GeoBBox {
            min_lat,
            min_lon,
            max_lat,
            max_lon,
        })
    }

    pub fn contains(&self, lat: f64, lon: f64) -> bool {
        lat >= self.min_lat && lat <= self.max_lat && lon >= self.min_lon && lon <= self.max_lon
    }
}

/// Great-circle distance in meters on a sphere of radius [`EARTH_RADIUS_M`].
pub fn haversine_m(a: &GeoPoint, b: &GeoPoint) -> f64 {
    let (lat1, lat2) = (a.lat.to_radians(), b.lat.to_radians());
    let dlat = (b.lat - a.lat).to_radians();
    let dlon = (b.lon - a.lon).to_radians();
    let h = (dlat / 2.0).sin().powi(2) + lat1.cos() * lat2.cos() * (dlon / 2.0).sin().powi(2);
    2.0 * EARTH_RADIUS_M * h.sqrt().min(1.0).asin()
}

/// Removes exact duplicate coordinates, then greedily drops any point closer
/// than `min_sep` meters to an already-kept point. First come, first kept.
pub fn dedupe_and_space(points: &[GeoPoint], min_sep: f64) -> Result<Vec<GeoPoint>> {
    if min_sep < 0.0 || !min_sep.is_finite() {
        return Err(Error::InvalidInput(format!("min_sep {min_sep} must be >= 0")));
    }
    // Chord length corresponding to the great-circle separation; comparing
    // squared chords avoids trig in the hot path.
    let chord_min = 2.0 * (min_sep / (2.0 * EARTH_RADIUS_M)).sin() * EARTH_RADIUS_M;
    let mut index = ChordGrid::new(chord_min);
    let mut seen_coords: HashMap<(u64, u64), ()> = HashMap::new();
    let mut kept = Vec::new();
    for p in points {
        let coord_key = (p.lat.to_bits(), p.lon.to_bits());
        if seen_coords.contains_key(&coord_key) {
            continue;
        }
        let xyz = scale(p.unit_xyz(), EARTH_RADIUS_M);
        if min_sep > 0.0 && index.has_neighbor_within(xyz, chord_min) {
            continue;
        }
        seen_coords.insert(coord_key, ());
        index.insert(xyz);
        kept.push(p.clone());
    }
    Ok(kept)
}

fn scale(v: [f64; 3], s: f64) -> [f64; 3] {
    [v[0] * s, v[1] * s, v[2] * s]
}

/// Uniform grid over 3-D chord space. Cell side equals the query radius, so
/// all neighbors within that radius live in the 27 surrounding cells.
struct ChordGrid {
    cell: f64,
    cells: HashMap<[i64; 3], Vec<[f64; 3]>>,
}

impl ChordGrid {
    fn new(cell: f64) -> Self {
        ChordGrid {
            cell: if cell > 0.0 { cell } else { 1.0 },
            cells: HashMap::new(),
        }
    }

    fn key(&self, p: [f64; 3]) -> [i64; 3] {
        [
            (p[0] / self.cell).floor() as i64,
            (p[1] / self.cell).floor() as i64,
            (p[2] / self.cell).floor() as i64,
        ]
    }

    fn insert(&mut self, p: [f64; 3]) {
        self.cells.entry(self.key(p)).or_default().push(p);
    }

    fn has_neighbor_within(&self, p: [f64; 3], radius: f64) -> bool {
        let k = self.key(p);
        let r2 = radius * radius;
        for dx in -1..=1 {
            for dy in -1..=1 {
                for dz in -1..=1 {
                    let key = [k[0] + dx, k[1] + dy, k[2] + dz];
                    if let Some(bucket) = self.cells.get(&key) {
                        for q in bucket {
                            let d2 = (p[0] - q[0]).powi(2)
                                + (p[1] - q[1]).powi(2)
                                + (p[2] - q[2]).powi(2);
                            if d2 < r2 {
                                return true;
                            }
                        }
                    }
                }
            }
        }
        false
    }
}

#[derive(Debug, Deserialize)]
struct CsvPointRow {
    id: String,
    lat: f64,
    lon: f64,
    label: PointLabel,
    category: String,
}

/// Reads points from CSV with header `id,lat,lon,label,category`.
pub fn read_points_csv(path: &Path) -> Result<Vec<GeoPoint>> {
    let mut reader = csv::Reader::from_path(path).map_err(|e| match e.kind() {
        csv::ErrorKind::Io(_) => Error::io(path, std::io::Error::other(e.to_string())),
        _ => Error::Decode(format!("{}: {e}", path.display())),
    })?;
    let mut points = Vec::new();
    for row in reader.deserialize::<CsvPointRow>() {
        let row = row.map_err(|e| Error::Decode(format!("{}: {e}", path.display())))?;
        points.push(GeoPoint::new(row.id, row.lat, row.lon, row.label, row.category)?);
    }
    Ok(points)
}

/// Writes points as CSV with the canonical header.
pub fn write_points_csv(points: &[GeoPoint], path: &Path) -> Result<()> {
    let mut writer = csv::Writer::from_path(path).map_err(|e| Error::io(path, std::io::Error::other(e.to_string())))?;
    writer
        .write_record(["id", "lat", "lon", "label", "category"])
        .map_err(|e| Error::io(path, std::io::Error::other(e.to_string())))?;
    for p in points {
        writer
            .write_record([
                p.id.as_str(),
                &p.lat.to_string(),
                &p.lon.to_string(),
                &p.label.to_string(),
                p.category.as_str(),
            ])
            .map_err(|e| Error::io(path, std::io::Error::other(e.to_string())))?;
    }
    writer
        .flush()
        .map_err(|e| Error::io(path, e))?;
    Ok(())
}

/// Reads a GeoJSON FeatureCollection of Points. Each feature must carry
/// `id`, `label`, and `category` properties; coordinates are `[lon, lat]`.
pub fn read_points_geojson(path: &Path) -> Result<Vec<GeoPoint>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let value: serde_json::Value =
        serde_json::from_str(&text).map_err(|e| Error::Decode(format!("{}: {e}", path.display())))?;
    let features = value
        .get("features")
        .and_then(|f| f.as_array())
        .ok_or_else(|| Error::Decode("GeoJSON missing features array".into()))?;
    let mut points = Vec::new();
    for feature in features {
        let geometry = feature
            .get("geometry")
            .ok_or_else(|| Error::Decode("feature missing geometry".into()))?;
        let gtype = geometry.get("type").and_then(|t| t.as_str()).unwrap_or("");
        if gtype != "Point" {
            return Err(Error::Decode(format!("unsupported geometry type {gtype:?}")));
        }
        let coords = geometry
            .get("coordinates")
            .and_then(|c| c.as_array())
            .ok_or_else(|| Error::Decode("point missing coordinates".into()))?;
        if coords.len() < 2 {
            return Err(Error::Decode("point coordinates need [lon, lat]".into()));
        }
        let lon = coords[0].as_f64().ok_or_else(|| Error::Decode("lon not a number".into()))?;
        let lat = coords[1].as_f64().ok_or_else(|| Error::Decode("lat not a number".into()))?;
        let props = feature.get("properties").cloned().unwrap_or_default();
        let id = props
            .get("id")
            .and_then(|v| v.as_str())
            .ok_or_else(|| Error::Decode("feature missing id property".into()))?
            .to_string();
        let label: PointLabel = serde_json::from_value(
            props.get("label").cloned().unwrap_or(serde_json::Value::Null),
        )
        .map_err(|_| Error::Decode(format!("feature {id}: bad or missing label")))?;
        let category = props
            .get("category")
            .and_then(|v| v.as_str())
            .unwrap_or("")
            .to_string();
        points.push(GeoPoint::new(id, lat, lon, label, category)?);
    }
    Ok(points)
}
