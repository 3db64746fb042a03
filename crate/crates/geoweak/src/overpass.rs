//! Client for Overpass-style map queries that source negative points.
//!
//! Categories such as `amenity=hospital` (or bare values, which default to
//! the `amenity` key) are templated into one query per region. Raw responses
//! are cached on disk keyed by (region, categories) so repeated runs replay
//! from the cache without network access.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use serde_json::Value;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::geo::{GeoBBox, GeoPoint, PointLabel};
use crate::imagery::{HttpTransport, RetryPolicy};

/// A category to query, split into an OSM tag key and value.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord)]
pub struct Category {
    pub key: String,
    pub value: String,
}

impl Category {
    /// Parses `key=value`; a bare value gets the `amenity` key.
    pub fn parse(text: &str) -> Result<Self> {
        let text = text.trim();
        if text.is_empty() {
            return Err(Error::InvalidInput("empty category".into()));
        }
        let (key, value) = match text.split_once('=') {
            Some((k, v)) => (k.trim(), v.trim()),
            None => ("amenity", text),
        };
        if key.is_empty() || value.is_empty() {
            return Err(Error::InvalidInput(format!("malformed category {text:?}")));
        }
        Ok(Category {
            key: key.to_string(),
            value: value.to_string(),
        })
    }

    fn as_tag(&self) -> String {
        format!("{}={}", self.key, self.value)
    }
}

/// Renders the query text for a region and category set. Nodes and ways are
/// both requested; ways report their computed centers.
pub fn build_query(region: &GeoBBox, categories: &[Category]) -> String {
    let bbox = format!(
        "{},{},{},{}",
        region.min_lat, region.min_lon, region.max_lat, region.max_lon
    );
    let mut clauses = String::new();
    for cat in categories {
        clauses.push_str(&format!(
            "  node[\"{key}\"=\"{val}\"]({bbox});\n  way[\"{key}\"=\"{val}\"]({bbox});\n",
            key = cat.key,
            val = cat.value,
        ));
    }
    format!("[out:json][timeout:60];\n(\n{clauses});\nout center;\n")
}

/// Percent-encodes a query string component (RFC 3986 unreserved set kept).
fn urlencode(text: &str) -> String {
    let mut out = String::with_capacity(text.len() * 3);
    for byte in text.bytes() {
        match byte {
            b'A'..=b'Z' | b'a'..=b'z' | b'0'..=b'9' | b'-' | b'.' | b'_' | b'~' => {
                out.push(byte as char)
            }
            other => out.push_str(&format!("%{other:02X}")),
        }
    }
    out
}

/// Cache file name for a (region, categories) pair. Category order does not
/// matter; coordinates participate at full precision.
pub fn cache_key(region: &GeoBBox, categories: &[Category]) -> String {
    let sorted: BTreeSet<String> = categories.iter().map(Category::as_tag).collect();
    let mut hasher = Sha256::new();
    hasher.update(format!(
        "{:?},{:?},{:?},{:?}|",
        region.min_lat.to_bits(),
        region.min_lon.to_bits(),
        region.max_lat.to_bits(),
        region.max_lon.to_bits()
    ));
    for tag in &sorted {
        hasher.update(tag.as_bytes());
        hasher.update(b";");
    }
    hex::encode(hasher.finalize())
}

/// Overpass-style query client with a disk cache.
pub struct OverpassClient {
    endpoint: String,
    cache_dir: PathBuf,
    transport: Box<dyn HttpTransport>,
    retry: RetryPolicy,
}

impl OverpassClient {
    pub fn new(
        endpoint: impl Into<String>,
        cache_dir: impl Into<PathBuf>,
        transport: Box<dyn HttpTransport>,
    ) -> Self {
        OverpassClient {
            endpoint: endpoint.into(),
            cache_dir: cache_dir.into(),
            transport,
            retry: RetryPolicy::default(),
        }
    }

    pub fn with_retry(mut self, retry: RetryPolicy) -> Self {
        self.retry = retry;
        self
    }

    fn cache_path(&self, key: &str) -> PathBuf {
        self.cache_dir.join(format!("{key}.json"))
    }

    /// Returns the raw response for the query, serving from the cache when a
    /// prior run already stored it.
    fn fetch_raw(&self, region: &GeoBBox, categories: &[Category]) -> Result<Vec<u8>> {
        let path = self.cache_path(&cache_key(region, categories));
        if path.exists() {
            return std::fs::read(&path).map_err(|e| Error::io(&path, e));
        }
        let query = build_query(region, categories);
        let url = format!("{}?data={}", self.endpoint, urlencode(&query));
        let bytes = self.retry.run(|| self.transport.get(&url))?;
        std::fs::create_dir_all(&self.cache_dir).map_err(|e| Error::io(&self.cache_dir, e))?;
        std::fs::write(&path, &bytes).map_err(|e| Error::io(&path, e))?;
        Ok(bytes)
    }
}

/// Pulls one element's coordinates: nodes carry lat/lon directly, ways and
/// relations carry a precomputed `center`.
fn element_coords(element: &Value) -> Option<(f64, f64)> {
    if let (Some(lat), Some(lon)) = (element["lat"].as_f64(), element["lon"].as_f64()) {
        return Some((lat, lon));
    }
    let center = element.get("center")?;
    Some((center["lat"].as_f64()?, center["lon"].as_f64()?))
}

/// Finds which requested category an element's tags satisfy.
fn matched_category(element: &Value, categories: &[Category]) -> Option<String> {
    let tags = element.get("tags")?.as_object()?;
    categories
        .iter()
        .find(|c| tags.get(&c.key).and_then(Value::as_str) == Some(c.value.as_str()))
        .map(Category::as_tag)
}

/// Parses a raw JSON response into non_school points inside `region`.
/// Elements without coordinates are skipped; elements outside the region are
/// dropped (servers may return boundary-crossing ways).
pub fn parse_elements(raw: &[u8], region: &GeoBBox, categories: &[Category]) -> Result<Vec<GeoPoint>> {
    let doc: Value =
        serde_json::from_slice(raw).map_err(|e| Error::Decode(format!("overpass response: {e}")))?;
    let elements = doc["elements"]
        .as_array()
        .ok_or_else(|| Error::Decode("overpass response missing elements array".into()))?;
    let fallback_category = categories
        .first()
        .map(Category::as_tag)
        .unwrap_or_else(|| "unknown".to_string());
    let mut points = Vec::new();
    for element in elements {
        let Some((lat, lon)) = element_coords(element) else {
            continue;
        };
        if !region.contains(lat, lon) {
            continue;
        }
        let etype = element["type"].as_str().unwrap_or("element");
        let eid = element["id"].as_u64().unwrap_or(0);
        let category = matched_category(element, categories).unwrap_or_else(|| fallback_category.clone());
        points.push(GeoPoint::new(
            format!("{etype}/{eid}"),
            lat,
            lon,
            PointLabel::NonSchool,
            category,
        )?);
    }
    Ok(points)
}

/// Queries negative (non-school) points for a region. Results come back
/// labeled non_school, fall inside the region, and are cached on disk.
pub fn fetch_negative_points(
    client: &OverpassClient,
    region: &GeoBBox,
    category_texts: &[String],
) -> Result<Vec<GeoPoint>> {
    if category_texts.is_empty() {
        return Err(Error::InvalidInput("categories must be non-empty".into()));
    }
    let categories: Vec<Category> = category_texts
        .iter()
        .map(|t| Category::parse(t))
        .collect::<Result<_>>()?;
    let raw = client.fetch_raw(region, &categories)?;
    parse_elements(&raw, region, &categories)
}

/// Convenience wrapper loading a recorded response file instead of a live
/// endpoint, for offline runs against saved fixtures.
pub fn parse_fixture_file(path: &Path, region: &GeoBBox, category_texts: &[String]) -> Result<Vec<GeoPoint>> {
    let categories: Vec<Category> = category_texts
        .iter()
        .map(|t| Category::parse(t))
        .collect::<Result<_>>()?;
    let raw = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    parse_elements(&raw, region, &categories)
}
