//! Content-based tile filtering.
//!
//! Each candidate tile gets three region metrics (vegetation, desert, sea)
//! computed from a small center crop with fixed HSV rules. Thresholds come
//! from the empirical 95th percentile over a calibration sample, floored at
//! 0.8, and a tile is rejected when any metric strictly exceeds its
//! threshold.

use std::fmt;
use std::path::Path;

use image::RgbImage;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imagery::ImageTile;

/// Per-tile content ratios, each in [0,1]. The pixel classes are disjoint so
/// the three ratios sum to at most 1.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RegionMetrics {
    pub vegetation_ratio: f64,
    pub desert_ratio: f64,
    pub sea_ratio: f64,
}

impl RegionMetrics {
    pub fn get(&self, kind: MetricKind) -> f64 {
        match kind {
            MetricKind::Vegetation => self.vegetation_ratio,
            MetricKind::Desert => self.desert_ratio,
            MetricKind::Sea => self.sea_ratio,
        }
    }
}

/// Which of the three region metrics a threshold or rejection refers to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MetricKind {
    Vegetation,
    Desert,
    Sea,
}

impl MetricKind {
    pub const ALL: [MetricKind; 3] = [MetricKind::Vegetation, MetricKind::Desert, MetricKind::Sea];
}

impl fmt::Display for MetricKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let name = match self {
            MetricKind::Vegetation => "vegetation",
            MetricKind::Desert => "desert",
            MetricKind::Sea => "sea",
        };
        f.write_str(name)
    }
}

/// HSV classification rules for the three pixel classes. The defaults keep
/// the hue bands disjoint; classification checks vegetation, then sea, then
/// desert, so overlapping custom bands still yield disjoint counts.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ColorRules {
    /// Hue band in degrees, inclusive.
    pub vegetation_hue: (f64, f64),
    pub vegetation_min_sat: f64,
    pub vegetation_min_val: f64,
    pub sea_hue: (f64, f64),
    pub sea_min_sat: f64,
    pub desert_hue: (f64, f64),
    /// Saturation band, inclusive. Desert reads as pale, not vivid.
    pub desert_sat: (f64, f64),
    pub desert_min_val: f64,
}

impl Default for ColorRules {
    fn default() -> Self {
        ColorRules {
            vegetation_hue: (70.0, 170.0),
            vegetation_min_sat: 0.25,
            vegetation_min_val: 0.15,
            sea_hue: (180.0, 260.0),
            sea_min_sat: 0.25,
            desert_hue: (20.0, 55.0),
            desert_sat: (0.15, 0.6),
            desert_min_val: 0.5,
        }
    }
}

/// RGB u8 to HSV with h in [0,360), s and v in [0,1].
fn rgb_to_hsv(r: u8, g: u8, b: u8) -> (f64, f64, f64) {
    let r = f64::from(r) / 255.0;
    let g = f64::from(g) / 255.0;
    let b = f64::from(b) / 255.0;
    let max = r.max(g).max(b);
    let min = r.min(g).min(b);
    let delta = max - min;
    let v = max;
    let s = if max == 0.0 { 0.0 } else { delta / max };
    let h = if delta == 0.0 {
        0.0
    } else if max == r {
        60.0 * (((g - b) / delta).rem_euclid(6.0))
    } else if max == g {
        60.0 * ((b - r) / delta + 2.0)
    } else {
        60.0 * ((r - g) / delta + 4.0)
    };
    (h.rem_euclid(360.0), s, v)
}

impl ColorRules {
    pub fn classify(&self, r: u8, g: u8, b: u8) -> Option<MetricKind> {
        let (h, s, v) = rgb_to_hsv(r, g, b);
        let in_band = |band: (f64, f64), x: f64| x >= band.0 && x <= band.1;
        if in_band(self.vegetation_hue, h) && s >= self.vegetation_min_sat && v >= self.vegetation_min_val {
            Some(MetricKind::Vegetation)
        } else if in_band(self.sea_hue, h) && s >= self.sea_min_sat {
            Some(MetricKind::Sea)
        } else if in_band(self.desert_hue, h) && in_band(self.desert_sat, s) && v >= self.desert_min_val {
            Some(MetricKind::Desert)
        } else {
            None
        }
    }
}

/// Returns the centered h×w sub-raster. For odd remainders the extra row or
/// column stays on the bottom/right side, so the offset is floor((H-h)/2).
pub fn center_crop(tile: &ImageTile, size_px: (u32, u32)) -> Result<ImageTile> {
    let (crop_h, crop_w) = size_px;
    let (tile_h, tile_w) = tile.size_px();
    if crop_h > tile_h || crop_w > tile_w {
        return Err(Error::InvalidInput(format!(
            "crop {crop_h}x{crop_w} exceeds tile {tile_h}x{tile_w}"
        )));
    }
    if crop_h == 0 || crop_w == 0 {
        return Err(Error::InvalidInput("crop size must be positive".into()));
    }
    let top = (tile_h - crop_h) / 2;
    let left = (tile_w - crop_w) / 2;
    let view = image::imageops::crop_imm(&tile.pixels, left, top, crop_w, crop_h).to_image();
    ImageTile::new(view, tile.mpp, tile.center.clone(), tile.source_id.clone())
}

/// Classifies every pixel of an RGB crop and reports per-class ratios.
pub fn region_metrics(crop: &RgbImage, rules: &ColorRules) -> RegionMetrics {
    let total = u64::from(crop.width()) * u64::from(crop.height());
    let mut counts = [0u64; 3];
    for pixel in crop.pixels() {
        let [r, g, b] = pixel.0;
        if let Some(kind) = rules.classify(r, g, b) {
            let slot = match kind {
                MetricKind::Vegetation => 0,
                MetricKind::Desert => 1,
                MetricKind::Sea => 2,
            };
            counts[slot] += 1;
        }
    }
    RegionMetrics {
        vegetation_ratio: counts[0] as f64 / total as f64,
        desert_ratio: counts[1] as f64 / total as f64,
        sea_ratio: counts[2] as f64 / total as f64,
    }
}

/// Per-metric rejection thresholds plus the calibration sample size.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Thresholds {
    pub vegetation: f64,
    pub desert: f64,
    pub sea: f64,
    pub sample_size: usize,
}

impl Thresholds {
    pub fn get(&self, kind: MetricKind) -> f64 {
        match kind {
            MetricKind::Vegetation => self.vegetation,
            MetricKind::Desert => self.desert,
            MetricKind::Sea => self.sea,
        }
    }

    pub fn write_toml(&self, path: &Path) -> Result<()> {
        let text = toml::to_string_pretty(self)
            .map_err(|e| Error::Config(format!("serialize thresholds: {e}")))?;
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn read_toml(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }
}

/// Empirical quantile with linear interpolation between order statistics
/// (the inclusive method: rank = (n-1)·p).
fn percentile_linear(sorted: &[f64], p: f64) -> f64 {
    debug_assert!(!sorted.is_empty());
    if sorted.len() == 1 {
        return sorted[0];
    }
    let rank = (sorted.len() - 1) as f64 * p;
    let lower = rank.floor() as usize;
    let frac = rank - lower as f64;
    if lower + 1 >= sorted.len() {
        sorted[sorted.len() - 1]
    } else {
        sorted[lower] + frac * (sorted[lower + 1] - sorted[lower])
    }
}

/// Calibrates per-metric thresholds: max(0.8, empirical p95 of the sample).
pub fn calibrate_thresholds(samples: &[RegionMetrics]) -> Result<Thresholds> {
    if samples.is_empty() {
        return Err(Error::InvalidInput("calibration requires at least one sample".into()));
    }
    let p95_of = |kind: MetricKind| {
        let mut values: Vec<f64> = samples.iter().map(|m| m.get(kind)).collect();
        values.sort_by(|a, b| a.total_cmp(b));
        percentile_linear(&values, 0.95).max(0.8)
    };
    Ok(Thresholds {
        vegetation: p95_of(MetricKind::Vegetation),
        desert: p95_of(MetricKind::Desert),
        sea: p95_of(MetricKind::Sea),
        sample_size: samples.len(),
    })
}

/// The metrics strictly above their thresholds. Empty means the tile is kept;
/// boundary-equal values do not fire.
pub fn exceeded_metrics(metrics: &RegionMetrics, thresholds: &Thresholds) -> Vec<MetricKind> {
    MetricKind::ALL
        .into_iter()
        .filter(|&kind| metrics.get(kind) > thresholds.get(kind))
        .collect()
}

/// Partition of filtered items: rejected entries carry the metrics that fired.
#[derive(Debug, Clone)]
pub struct FilterReport<T> {
    pub kept: Vec<(T, RegionMetrics)>,
    pub rejected: Vec<(T, RegionMetrics, Vec<MetricKind>)>,
}

/// Splits items into kept and rejected. Rejection means at least one metric
/// strictly exceeds its threshold.
pub fn filter_tiles<T>(items: Vec<(T, RegionMetrics)>, thresholds: &Thresholds) -> FilterReport<T> {
    let mut kept = Vec::new();
    let mut rejected = Vec::new();
    for (item, metrics) in items {
        let reasons = exceeded_metrics(&metrics, thresholds);
        if reasons.is_empty() {
            kept.push((item, metrics));
        } else {
            rejected.push((item, metrics, reasons));
        }
    }
    FilterReport { kept, rejected }
}

/// One row of the QA dump.
#[derive(Debug, Clone)]
pub struct MetricsRow {
    pub tile_id: String,
    pub metrics: RegionMetrics,
    pub kept: bool,
    pub reasons: Vec<MetricKind>,
}

/// Writes the QA dump: `tile_id,vegetation,desert,sea,kept,reasons`, with
/// multiple reasons joined by `|`.
pub fn write_metrics_csv(path: &Path, rows: &[MetricsRow]) -> Result<()> {
    let mut writer = csv::Writer::from_path(path).map_err(|e| Error::io(path, std::io::Error::other(e)))?;
    writer
        .write_record(["tile_id", "vegetation", "desert", "sea", "kept", "reasons"])
        .map_err(|e| Error::io(path, std::io::Error::other(e)))?;
    for row in rows {
        let reasons = row
            .reasons
            .iter()
            .map(ToString::to_string)
            .collect::<Vec<_>>()
            .join("|");
        writer
            .write_record([
                row.tile_id.as_str(),
                &format!("{:.6}", row.metrics.vegetation_ratio),
                &format!("{:.6}", row.metrics.desert_ratio),
                &format!("{:.6}", row.metrics.sea_ratio),
                if row.kept { "true" } else { "false" },
                &reasons,
            ])
            .map_err(|e| Error::io(path, std::io::Error::other(e)))?;
    }
    writer.flush().map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geo::{GeoPoint, PointLabel};
    use approx::assert_abs_diff_eq;

    fn tile_from(img: RgbImage) -> ImageTile {
        let center = GeoPoint::new("t", 0.0, 0.0, PointLabel::School, "giga").unwrap();
        ImageTile::new(img, 0.6, center, "t").unwrap()
    }

    fn metrics(v: f64, d: f64, s: f64) -> RegionMetrics {
        RegionMetrics { vegetation_ratio: v, desert_ratio: d, sea_ratio: s }
    }

    #[test]
    fn full_size_crop_is_identity() {
        let img = RgbImage::from_fn(500, 500, |x, y| image::Rgb([(x % 251) as u8, (y % 251) as u8, 7]));
        let tile = tile_from(img.clone());
        let crop = center_crop(&tile, (500, 500)).unwrap();
        assert_eq!(crop.pixels, img);
    }

    #[test]
    fn centered_crop_takes_rows_one_and_two_of_four() {
        // Pixel value encodes (row, col) so the selected window is checkable.
        let img = RgbImage::from_fn(4, 4, |x, y| image::Rgb([y as u8, x as u8, 0]));
        let tile = tile_from(img);
        let crop = center_crop(&tile, (2, 2)).unwrap();
        assert_eq!(crop.size_px(), (2, 2));
        // Expect rows 1..=2 and cols 1..=2 of the source.
        for cy in 0..2u32 {
            for cx in 0..2u32 {
                let px = crop.pixels.get_pixel(cx, cy).0;
                assert_eq!((px[0], px[1]), ((cy + 1) as u8, (cx + 1) as u8));
            }
        }
    }

    #[test]
    fn odd_remainder_leaves_extra_on_bottom_right() {
        let img = RgbImage::from_fn(5, 5, |x, y| image::Rgb([y as u8, x as u8, 0]));
        let tile = tile_from(img);
        let crop = center_crop(&tile, (2, 2)).unwrap();
        // offset = floor((5-2)/2) = 1, so rows/cols 1..=2 again.
        let px = crop.pixels.get_pixel(0, 0).0;
        assert_eq!((px[0], px[1]), (1, 1));
    }

    #[test]
    fn oversize_crop_is_input_error() {
        let tile = tile_from(RgbImage::new(500, 500));
        let err = center_crop(&tile, (600, 600)).unwrap_err();
        assert!(matches!(err, Error::InvalidInput(_)));
    }

    #[test]
    fn pure_green_is_all_vegetation() {
        let img = RgbImage::from_pixel(10, 10, image::Rgb([0, 255, 0]));
        let m = region_metrics(&img, &ColorRules::default());
        assert_abs_diff_eq!(m.vegetation_ratio, 1.0);
        assert_abs_diff_eq!(m.desert_ratio, 0.0);
        assert_abs_diff_eq!(m.sea_ratio, 0.0);
    }

    #[test]
    fn pure_blue_is_all_sea() {
        let img = RgbImage::from_pixel(10, 10, image::Rgb([0, 0, 255]));
        let m = region_metrics(&img, &ColorRules::default());
        assert_abs_diff_eq!(m.sea_ratio, 1.0);
        assert_abs_diff_eq!(m.vegetation_ratio, 0.0);
    }

    #[test]
    fn green_blue_checkerboard_splits_half_half_exactly() {
        let img = RgbImage::from_fn(10, 10, |x, y| {
            if (x + y) % 2 == 0 {
                image::Rgb([0, 255, 0])
            } else {
                image::Rgb([0, 0, 255])
            }
        });
        let m = region_metrics(&img, &ColorRules::default());
        assert_eq!(m.vegetation_ratio, 0.5);
        assert_eq!(m.sea_ratio, 0.5);
        assert_eq!(m.desert_ratio, 0.0);
    }

    #[test]
    fn desert_rule_matches_pale_sand_tones() {
        // Sand-like tone: hue ~34 deg, sat ~0.33, val ~0.85.
        let img = RgbImage::from_pixel(4, 4, image::Rgb([217, 186, 145]));
        let m = region_metrics(&img, &ColorRules::default());
        assert_abs_diff_eq!(m.desert_ratio, 1.0);
    }

    #[test]
    fn ratios_sum_to_at_most_one() {
        let img = RgbImage::from_fn(16, 16, |x, y| {
            image::Rgb([(x * 16) as u8, (y * 16) as u8, ((x + y) * 8) as u8])
        });
        let m = region_metrics(&img, &ColorRules::default());
        assert!(m.vegetation_ratio + m.desert_ratio + m.sea_ratio <= 1.0 + 1e-12);
    }

    #[test]
    fn low_percentiles_fall_back_to_floor() {
        let samples: Vec<_> = (0..100).map(|_| metrics(0.1, 0.0, 0.0)).collect();
        let t = calibrate_thresholds(&samples).unwrap();
        assert_eq!(t.vegetation, 0.8);
        assert_eq!(t.desert, 0.8);
        assert_eq!(t.sea, 0.8);
        assert_eq!(t.sample_size, 100);
    }

    #[test]
    fn p95_above_floor_wins() {
        // 21 sorted values; rank = (21-1)*0.95 = 19 exactly, so p95 is the
        // value at index 19.
        let mut values: Vec<f64> = (0..19).map(|i| i as f64 * 0.01).collect();
        values.push(0.93);
        values.push(1.0);
        let samples: Vec<_> = values.iter().map(|&v| metrics(v, 0.0, 0.0)).collect();
        let t = calibrate_thresholds(&samples).unwrap();
        assert_abs_diff_eq!(t.vegetation, 0.93, epsilon = 1e-12);
        assert_eq!(t.desert, 0.8);
    }

    #[test]
    fn p95_interpolates_between_order_statistics() {
        // Two samples 0 and 1: rank = 0.95, so p95 = 0.95 by interpolation.
        let samples = vec![metrics(0.0, 0.0, 0.0), metrics(1.0, 0.0, 0.0)];
        let t = calibrate_thresholds(&samples).unwrap();
        assert_abs_diff_eq!(t.vegetation, 0.95, epsilon = 1e-12);
    }

    #[test]
    fn single_sample_gets_floor() {
        let t = calibrate_thresholds(&[metrics(0.5, 0.5, 0.5)]).unwrap();
        assert_eq!((t.vegetation, t.desert, t.sea), (0.8, 0.8, 0.8));
    }

    #[test]
    fn empty_samples_rejected() {
        assert!(matches!(calibrate_thresholds(&[]), Err(Error::InvalidInput(_))));
    }

    #[test]
    fn calibration_is_permutation_invariant() {
        let mut samples: Vec<_> = (0..50)
            .map(|i| metrics((i as f64 / 49.0).powi(2), 0.3, i as f64 / 100.0))
            .collect();
        let a = calibrate_thresholds(&samples).unwrap();
        samples.reverse();
        samples.swap(3, 40);
        let b = calibrate_thresholds(&samples).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn clean_metrics_are_kept() {
        let t = Thresholds { vegetation: 0.8, desert: 0.8, sea: 0.8, sample_size: 1 };
        let report = filter_tiles(vec![("a", metrics(0.0, 0.0, 0.0))], &t);
        assert_eq!(report.kept.len(), 1);
        assert!(report.rejected.is_empty());
    }

    #[test]
    fn exceeding_vegetation_rejects_with_reason() {
        let t = Thresholds { vegetation: 0.9, desert: 0.95, sea: 0.95, sample_size: 1 };
        let report = filter_tiles(vec![("a", metrics(0.95, 0.0, 0.0))], &t);
        assert!(report.kept.is_empty());
        assert_eq!(report.rejected[0].2, vec![MetricKind::Vegetation]);
    }

    #[test]
    fn boundary_equal_is_kept() {
        let t = Thresholds { vegetation: 0.9, desert: 0.9, sea: 0.9, sample_size: 1 };
        let report = filter_tiles(vec![("a", metrics(0.9, 0.9, 0.9))], &t);
        assert_eq!(report.kept.len(), 1);
    }

    #[test]
    fn multiple_reasons_recorded_together() {
        let t = Thresholds { vegetation: 0.5, desert: 0.9, sea: 0.5, sample_size: 1 };
        let report = filter_tiles(vec![("a", metrics(0.6, 0.0, 0.7))], &t);
        assert_eq!(report.rejected[0].2, vec![MetricKind::Vegetation, MetricKind::Sea]);
    }

    #[test]
    fn raising_thresholds_never_shrinks_kept_set() {
        let items: Vec<(usize, RegionMetrics)> = (0..40)
            .map(|i| {
                let f = i as f64 / 39.0;
                (i, metrics(f, 1.0 - f, (f * 7.0).fract()))
            })
            .collect();
        let low = Thresholds { vegetation: 0.82, desert: 0.85, sea: 0.8, sample_size: 1 };
        let high = Thresholds { vegetation: 0.95, desert: 0.9, sea: 0.93, sample_size: 1 };
        let kept_low: Vec<usize> = filter_tiles(items.clone(), &low).kept.into_iter().map(|(i, _)| i).collect();
        let kept_high: Vec<usize> = filter_tiles(items, &high).kept.into_iter().map(|(i, _)| i).collect();
        assert!(kept_low.iter().all(|i| kept_high.contains(i)));
    }

    #[test]
    fn thresholds_roundtrip_through_file() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("thresholds.toml");
        let t = Thresholds { vegetation: 0.93, desert: 0.8, sea: 0.812345, sample_size: 1000 };
        t.write_toml(&path).unwrap();
        let back = Thresholds::read_toml(&path).unwrap();
        assert_eq!(t, back);
    }

    #[test]
    fn metrics_csv_has_expected_shape() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("metrics.csv");
        let rows = vec![
            MetricsRow { tile_id: "t1".into(), metrics: metrics(0.1, 0.0, 0.0), kept: true, reasons: vec![] },
            MetricsRow {
                tile_id: "t2".into(),
                metrics: metrics(0.95, 0.0, 0.9),
                kept: false,
                reasons: vec![MetricKind::Vegetation, MetricKind::Sea],
            },
        ];
        write_metrics_csv(&path, &rows).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        let mut lines = text.lines();
        assert_eq!(lines.next().unwrap(), "tile_id,vegetation,desert,sea,kept,reasons");
        assert!(lines.next().unwrap().starts_with("t1,0.100000,"));
        assert!(lines.next().unwrap().ends_with("false,vegetation|sea"));
    }
}
