//! Automatic box labeling of school tiles.
//!
//! For each tile: take the 400 px center crop, segment it with the three
//! prompts, drop masks outside the size band, keep the two closest to center,
//! optionally fuse them on spatial overlap, vet the survivor's shape, check
//! its centroid stays near the crop center, and emit the normalized box that
//! encloses it in full-tile coordinates.

pub mod backend;
pub mod mask;

use std::fmt;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::bbox::BBox;
use crate::error::{Error, Result};
use crate::filtering::center_crop;
use crate::imagery::ImageTile;
pub use backend::{segment_all, RemoteSegmentBackend, Scene, SceneShape, SegmentBackend, SyntheticSceneBackend};
pub use mask::{Bitmap, Mask};

/// Tunables for the labeling pipeline. Defaults suit 500 px tiles at
/// 0.6 m/px with single-school scenes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AutolabelParams {
    /// Square center-crop side in pixels.
    pub crop_px: u32,
    pub prompts: Vec<String>,
    /// Mask area as a fraction of crop area, inclusive band.
    pub min_area_frac: f64,
    pub max_area_frac: f64,
    /// Bitmap-IoU above which the two selected masks merge.
    pub fuse_iou: f64,
    pub solidity_min: f64,
    pub aspect_max: f64,
    /// Max allowed centroid distance from crop center, in pixels.
    pub center_max_px: f64,
}

impl Default for AutolabelParams {
    fn default() -> Self {
        AutolabelParams {
            crop_px: 400,
            prompts: vec!["building".into(), "roof".into(), "school".into()],
            min_area_frac: 0.005,
            max_area_frac: 0.60,
            fuse_iou: 0.10,
            solidity_min: 0.70,
            aspect_max: 6.0,
            center_max_px: 100.0,
        }
    }
}

/// Why a tile failed to produce a label.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RejectReason {
    /// Backend produced no masks at all.
    NoValidMask,
    /// Masks existed but none fit the size band.
    SizeOutOfRange,
    /// The final candidate failed solidity or aspect vetting.
    SolidityFail,
    /// The final candidate sits too far from the crop center.
    CentroidTooFar,
}

impl fmt::Display for RejectReason {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let name = match self {
            RejectReason::NoValidMask => "no_valid_mask",
            RejectReason::SizeOutOfRange => "size_out_of_range",
            RejectReason::SolidityFail => "solidity_fail",
            RejectReason::CentroidTooFar => "centroid_too_far",
        };
        f.write_str(name)
    }
}

/// Result of labeling one tile. Exactly one of `bbox`/`reason` is present.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AutolabelOutcome {
    pub tile_id: String,
    pub status: AutolabelStatus,
    pub bbox: Option<BBox>,
    pub reason: Option<RejectReason>,
    /// Whether the two selected masks were merged; None when fewer than two
    /// candidates reached the fusion step.
    pub fused: Option<bool>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AutolabelStatus {
    Labeled,
    Rejected,
}

impl AutolabelOutcome {
    pub fn labeled(tile_id: impl Into<String>, bbox: BBox, fused: Option<bool>) -> Self {
        AutolabelOutcome {
            tile_id: tile_id.into(),
            status: AutolabelStatus::Labeled,
            bbox: Some(bbox),
            reason: None,
            fused,
        }
    }

    pub fn rejected(tile_id: impl Into<String>, reason: RejectReason, fused: Option<bool>) -> Self {
        AutolabelOutcome {
            tile_id: tile_id.into(),
            status: AutolabelStatus::Rejected,
            bbox: None,
            reason: Some(reason),
            fused,
        }
    }

    pub fn is_labeled(&self) -> bool {
        self.status == AutolabelStatus::Labeled
    }
}

/// Keeps masks whose area fraction of the crop lies inside the inclusive
/// band [min_frac, max_frac].
pub fn filter_masks_by_size(masks: Vec<Mask>, crop_area_px: usize, min_frac: f64, max_frac: f64) -> Vec<Mask> {
    debug_assert!(crop_area_px > 0);
    masks
        .into_iter()
        .filter(|m| {
            let frac = m.area_px as f64 / crop_area_px as f64;
            frac >= min_frac && frac <= max_frac
        })
        .collect()
}

/// Sorts masks by centroid distance to `center` (row, col) and keeps at most
/// two. Distance ties prefer the larger area; remaining ties keep the
/// earlier mask (prompt order).
pub fn select_two_closest(mut masks: Vec<Mask>, center: (f64, f64)) -> Vec<Mask> {
    let dist = |m: &Mask| {
        let dr = m.centroid.0 - center.0;
        let dc = m.centroid.1 - center.1;
        (dr * dr + dc * dc).sqrt()
    };
    masks.sort_by(|a, b| {
        dist(a)
            .total_cmp(&dist(b))
            .then_with(|| b.area_px.cmp(&a.area_px))
    });
    masks.truncate(2);
    masks
}

/// Merges the two selected masks when they overlap in space: bitmap IoU
/// above `fuse_iou`, or touching/overlapping tight boxes. Otherwise both
/// come back and the caller keeps the closer one.
pub fn maybe_fuse(m1: &Mask, m2: &Mask, fuse_iou: f64) -> Result<Vec<Mask>> {
    let iou = m1.bitmap.iou(&m2.bitmap)?;
    if iou > fuse_iou || m1.bounds_intersect(m2) {
        Ok(vec![m1.fuse(m2)?])
    } else {
        Ok(vec![m1.clone(), m2.clone()])
    }
}

/// Shape vetting: solidity at least `solidity_min` and hull-box aspect at
/// most `aspect_max`.
pub fn validate_mask(mask: &Mask, solidity_min: f64, aspect_max: f64) -> bool {
    mask.solidity() >= solidity_min && mask.aspect_ratio() <= aspect_max
}

/// Converts a crop-frame mask to a normalized tile-frame box. The box spans
/// the corner extents of the mask's true pixels, shifted by the centered
/// crop offset.
pub fn mask_to_bbox(mask: &Mask, crop_size: (u32, u32), tile_size: (u32, u32)) -> Result<BBox> {
    let (r0, c0, r1, c1) = mask.tight_bounds();
    let off_y = f64::from((tile_size.0 - crop_size.0) / 2);
    let off_x = f64::from((tile_size.1 - crop_size.1) / 2);
    BBox::from_pixel_corners(
        0,
        c0 as f64 + off_x,
        r0 as f64 + off_y,
        (c1 + 1) as f64 + off_x,
        (r1 + 1) as f64 + off_y,
        tile_size.1,
        tile_size.0,
    )
}

/// Runs the full labeling pipeline on one tile.
pub fn autolabel_tile(
    tile: &ImageTile,
    backend: &dyn SegmentBackend,
    params: &AutolabelParams,
) -> Result<AutolabelOutcome> {
    let tile_size = tile.size_px();
    let crop = center_crop(tile, (params.crop_px, params.crop_px))?;
    let crop_size = crop.size_px();
    let masks = segment_all(backend, &crop, &params.prompts)?;
    if masks.is_empty() {
        return Ok(AutolabelOutcome::rejected(&tile.source_id, RejectReason::NoValidMask, None));
    }

    let crop_area = crop_size.0 as usize * crop_size.1 as usize;
    let sized = filter_masks_by_size(masks, crop_area, params.min_area_frac, params.max_area_frac);
    if sized.is_empty() {
        return Ok(AutolabelOutcome::rejected(&tile.source_id, RejectReason::SizeOutOfRange, None));
    }

    let center = ((crop_size.0 as f64 - 1.0) / 2.0, (crop_size.1 as f64 - 1.0) / 2.0);
    let selected = select_two_closest(sized, center);
    let (candidate, fused) = if selected.len() == 2 {
        let outcome = maybe_fuse(&selected[0], &selected[1], params.fuse_iou)?;
        let was_fused = outcome.len() == 1;
        (outcome.into_iter().next().expect("fusion returns at least one mask"), Some(was_fused))
    } else {
        (selected.into_iter().next().expect("size filter left at least one mask"), None)
    };

    if !validate_mask(&candidate, params.solidity_min, params.aspect_max) {
        return Ok(AutolabelOutcome::rejected(&tile.source_id, RejectReason::SolidityFail, fused));
    }

    let dr = candidate.centroid.0 - center.0;
    let dc = candidate.centroid.1 - center.1;
    if (dr * dr + dc * dc).sqrt() > params.center_max_px {
        return Ok(AutolabelOutcome::rejected(&tile.source_id, RejectReason::CentroidTooFar, fused));
    }

    let bbox = mask_to_bbox(&candidate, crop_size, tile_size)?;
    Ok(AutolabelOutcome::labeled(&tile.source_id, bbox, fused))
}

/// Labels many tiles, respecting the backend's concurrency bound when it
/// declares one.
pub fn autolabel_tiles(
    tiles: &[ImageTile],
    backend: &dyn SegmentBackend,
    params: &AutolabelParams,
) -> Vec<Result<AutolabelOutcome>> {
    match backend.max_in_flight() {
        None => tiles
            .par_iter()
            .map(|tile| autolabel_tile(tile, backend, params))
            .collect(),
        Some(bound) => {
            let mut out = Vec::with_capacity(tiles.len());
            for chunk in tiles.chunks(bound.max(1)) {
                out.par_extend(chunk.par_iter().map(|tile| autolabel_tile(tile, backend, params)));
            }
            out
        }
    }
}

/// Writes the audit log: `tile_id,status,reason,cx,cy,w,h`, blank fields
/// where not applicable.
pub fn write_outcomes_csv(path: &Path, outcomes: &[AutolabelOutcome]) -> Result<()> {
    let mut writer = csv::Writer::from_path(path).map_err(|e| Error::io(path, std::io::Error::other(e)))?;
    writer
        .write_record(["tile_id", "status", "reason", "cx", "cy", "w", "h"])
        .map_err(|e| Error::io(path, std::io::Error::other(e)))?;
    for o in outcomes {
        let status = match o.status {
            AutolabelStatus::Labeled => "labeled",
            AutolabelStatus::Rejected => "rejected",
        };
        let reason = o.reason.map(|r| r.to_string()).unwrap_or_default();
        let coords = match &o.bbox {
            Some(b) => [
                format!("{:.6}", b.cx),
                format!("{:.6}", b.cy),
                format!("{:.6}", b.w),
                format!("{:.6}", b.h),
            ],
            None => [String::new(), String::new(), String::new(), String::new()],
        };
        writer
            .write_record([o.tile_id.as_str(), status, &reason, &coords[0], &coords[1], &coords[2], &coords[3]])
            .map_err(|e| Error::io(path, std::io::Error::other(e)))?;
    }
    writer.flush().map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autolabel::mask::rect_bitmap;
    use crate::geo::{GeoPoint, PointLabel};
    use approx::assert_abs_diff_eq;
    use image::RgbImage;

    fn mask_at(dims: (usize, usize), row: i64, col: i64, h: i64, w: i64, prompt: &str) -> Mask {
        Mask::from_bitmap(rect_bitmap(dims, row, col, h, w), prompt, 0.9).unwrap()
    }

    fn tile(id: &str) -> ImageTile {
        let center = GeoPoint::new(id, 10.0, 20.0, PointLabel::School, "giga").unwrap();
        ImageTile::new(RgbImage::new(500, 500), 0.6, center, id).unwrap()
    }

    fn scene_backend(dir: &Path, id: &str, shapes: &[(&str, [i64; 4])]) -> SyntheticSceneBackend {
        let mut scene = Scene::new(500, 500);
        for (prompt, rect) in shapes {
            scene.push(*prompt, SceneShape::Rect { rect: *rect, score: 0.9 });
        }
        scene.write(&dir.join(format!("{id}.json"))).unwrap();
        SyntheticSceneBackend::new(dir)
    }

    #[test]
    fn size_band_keeps_midsized_masks_only() {
        let dims = (400, 400);
        let crop_area = 160_000;
        let masks = vec![
            mask_at(dims, 0, 0, 50, 80, "a"),   // 4000 px = 2.5%
            mask_at(dims, 0, 100, 16, 10, "b"), // 160 px = 0.1%
            mask_at(dims, 0, 0, 320, 400, "c"), // 128000 px = 80%
        ];
        let kept = filter_masks_by_size(masks, crop_area, 0.005, 0.60);
        assert_eq!(kept.len(), 1);
        assert_eq!(kept[0].area_px, 4000);
    }

    #[test]
    fn selection_orders_by_distance_and_keeps_two() {
        let dims = (400, 400);
        let center = (199.5, 199.5);
        // Centroid row offsets from center: ~10, ~40, ~90 px.
        let near = mask_at(dims, 185, 180, 20, 40, "near");
        let mid = mask_at(dims, 150, 180, 20, 40, "mid");
        let far = mask_at(dims, 100, 180, 20, 40, "far");
        let picked = select_two_closest(vec![far.clone(), near.clone(), mid.clone()], center);
        assert_eq!(picked.len(), 2);
        assert_eq!(picked[0].prompt, "near");
        assert_eq!(picked[1].prompt, "mid");

        let single = select_two_closest(vec![far], center);
        assert_eq!(single.len(), 1);
    }

    #[test]
    fn equidistant_tie_prefers_larger_area() {
        let dims = (400, 400);
        let center = (199.5, 199.5);
        // Rows reflected around the center and columns sharing a centroid,
        // so the two masks sit at exactly the same distance.
        let small = mask_at(dims, 150, 180, 20, 25, "small"); // area 500, centroid (159.5, 192)
        let big = mask_at(dims, 230, 170, 20, 45, "big"); // area 900, centroid (239.5, 192)
        let d = |m: &Mask| ((m.centroid.0 - center.0).powi(2) + (m.centroid.1 - center.1).powi(2)).sqrt();
        assert_abs_diff_eq!(d(&small), d(&big), epsilon = 1e-9);
        let picked = select_two_closest(vec![small, big], center);
        assert_eq!(picked[0].prompt, "big");
        assert_eq!(picked[0].area_px, 900);
    }

    #[test]
    fn fuse_merges_overlapping_and_keeps_disjoint() {
        let dims = (400, 400);
        let a = mask_at(dims, 100, 100, 40, 40, "a");
        let b = mask_at(dims, 120, 120, 40, 40, "b");
        let fused = maybe_fuse(&a, &b, 0.10).unwrap();
        assert_eq!(fused.len(), 1);
        assert_eq!(fused[0].area_px, 1600 + 1600 - 400);

        let far = mask_at(dims, 300, 300, 40, 40, "far");
        let both = maybe_fuse(&a, &far, 0.10).unwrap();
        assert_eq!(both.len(), 2);
    }

    #[test]
    fn fuse_identical_masks_is_idempotent() {
        let dims = (400, 400);
        let a = mask_at(dims, 100, 100, 40, 40, "a");
        let out = maybe_fuse(&a, &a.clone(), 0.10).unwrap();
        assert_eq!(out.len(), 1);
        assert_eq!(out[0].bitmap, a.bitmap);
    }

    #[test]
    fn touching_boxes_fuse_without_pixel_overlap() {
        let dims = (400, 400);
        let left = mask_at(dims, 180, 160, 40, 40, "left");
        let right = mask_at(dims, 180, 200, 40, 40, "right");
        assert_eq!(left.bitmap.iou(&right.bitmap).unwrap(), 0.0);
        let fused = maybe_fuse(&left, &right, 0.10).unwrap();
        assert_eq!(fused.len(), 1);
        assert_eq!(fused[0].area_px, 3200);
    }

    #[test]
    fn bbox_transform_oracle() {
        // Mask rows 100..=199, cols 150..=249 in a 400 px crop of a 500 px
        // tile: tile-frame corner extents x in [200,300], y in [150,250],
        // so cx=0.50, cy=0.40, w=h=0.20.
        let m = mask_at((400, 400), 100, 150, 100, 100, "building");
        let b = mask_to_bbox(&m, (400, 400), (500, 500)).unwrap();
        assert_abs_diff_eq!(b.cx, 0.50, epsilon = 1e-12);
        assert_abs_diff_eq!(b.cy, 0.40, epsilon = 1e-12);
        assert_abs_diff_eq!(b.w, 0.20, epsilon = 1e-12);
        assert_abs_diff_eq!(b.h, 0.20, epsilon = 1e-12);
    }

    #[test]
    fn full_crop_mask_maps_to_crop_extent() {
        let m = mask_at((400, 400), 0, 0, 400, 400, "building");
        let b = mask_to_bbox(&m, (400, 400), (500, 500)).unwrap();
        let (x1, y1, x2, y2) = b.corners();
        assert_abs_diff_eq!(x1, 0.1, epsilon = 1e-12);
        assert_abs_diff_eq!(y1, 0.1, epsilon = 1e-12);
        assert_abs_diff_eq!(x2, 0.9, epsilon = 1e-12);
        assert_abs_diff_eq!(y2, 0.9, epsilon = 1e-12);
    }

    #[test]
    fn one_pixel_mask_maps_to_tile_center() {
        let m = mask_at((400, 400), 200, 200, 1, 1, "building");
        let b = mask_to_bbox(&m, (400, 400), (500, 500)).unwrap();
        assert_abs_diff_eq!(b.w, 1.0 / 500.0, epsilon = 1e-12);
        assert_abs_diff_eq!(b.h, 1.0 / 500.0, epsilon = 1e-12);
        assert_abs_diff_eq!(b.cx, 250.5 / 500.0, epsilon = 1e-12);
        assert_abs_diff_eq!(b.cy, 250.5 / 500.0, epsilon = 1e-12);
    }

    #[test]
    fn bbox_tightly_encloses_every_true_pixel() {
        let dims = (400, 400);
        let m = mask_at(dims, 37, 121, 63, 29, "building");
        let b = mask_to_bbox(&m, (400, 400), (500, 500)).unwrap();
        let (x1, y1, x2, y2) = b.corners();
        for (r, c) in m.bitmap.true_pixels() {
            let px = (c as f64 + 50.0 + 0.5) / 500.0;
            let py = (r as f64 + 50.0 + 0.5) / 500.0;
            assert!(px > x1 && px < x2 && py > y1 && py < y2, "pixel ({r},{c}) escapes box");
        }
        // Tight: shrinking by one pixel on any side loses a pixel.
        assert_abs_diff_eq!((x2 - x1) * 500.0, 29.0, epsilon = 1e-9);
        assert_abs_diff_eq!((y2 - y1) * 500.0, 63.0, epsilon = 1e-9);
    }

    #[test]
    fn centered_building_is_labeled_with_oracle_box() {
        let dir = tempfile::tempdir().unwrap();
        // 60x90 rect centered in the 500 frame: rows 220..280, cols 205..295.
        let backend = scene_backend(dir.path(), "t1", &[("building", [220, 205, 60, 90])]);
        let outcome = autolabel_tile(&tile("t1"), &backend, &AutolabelParams::default()).unwrap();
        assert!(outcome.is_labeled(), "{outcome:?}");
        let b = outcome.bbox.unwrap();
        assert_abs_diff_eq!(b.cx, 0.5, epsilon = 1e-12);
        assert_abs_diff_eq!(b.cy, 0.5, epsilon = 1e-12);
        assert_abs_diff_eq!(b.w, 90.0 / 500.0, epsilon = 1e-12);
        assert_abs_diff_eq!(b.h, 60.0 / 500.0, epsilon = 1e-12);
        assert_eq!(outcome.fused, None);
    }

    #[test]
    fn empty_scene_rejects_no_valid_mask() {
        let dir = tempfile::tempdir().unwrap();
        let backend = scene_backend(dir.path(), "t2", &[]);
        let outcome = autolabel_tile(&tile("t2"), &backend, &AutolabelParams::default()).unwrap();
        assert_eq!(outcome.reason, Some(RejectReason::NoValidMask));
        assert!(outcome.bbox.is_none());
    }

    #[test]
    fn distant_building_rejects_centroid_too_far() {
        let dir = tempfile::tempdir().unwrap();
        // Centroid ~150 px from crop center (building near the crop corner).
        let backend = scene_backend(dir.path(), "t3", &[("building", [80, 220, 60, 60])]);
        let outcome = autolabel_tile(&tile("t3"), &backend, &AutolabelParams::default()).unwrap();
        assert_eq!(outcome.reason, Some(RejectReason::CentroidTooFar));
    }

    #[test]
    fn tiny_building_rejects_size_out_of_range() {
        let dir = tempfile::tempdir().unwrap();
        // 16x10 = 160 px, 0.1% of the crop.
        let backend = scene_backend(dir.path(), "t4", &[("building", [240, 245, 16, 10])]);
        let outcome = autolabel_tile(&tile("t4"), &backend, &AutolabelParams::default()).unwrap();
        assert_eq!(outcome.reason, Some(RejectReason::SizeOutOfRange));
    }

    #[test]
    fn l_shaped_building_rejects_solidity() {
        let dir = tempfile::tempdir().unwrap();
        // Two arms fused into an L-shape around the center (they touch, so
        // fusion fires, and the L fails the solidity rule).
        let backend = scene_backend(
            dir.path(),
            "t5",
            &[("building", [210, 230, 80, 20]), ("roof", [270, 230, 20, 80])],
        );
        let outcome = autolabel_tile(&tile("t5"), &backend, &AutolabelParams::default()).unwrap();
        assert_eq!(outcome.reason, Some(RejectReason::SolidityFail));
        assert_eq!(outcome.fused, Some(true));
    }

    #[test]
    fn pipeline_is_deterministic() {
        let dir = tempfile::tempdir().unwrap();
        let backend = scene_backend(
            dir.path(),
            "t6",
            &[("building", [220, 205, 60, 90]), ("roof", [225, 210, 50, 70])],
        );
        let a = autolabel_tile(&tile("t6"), &backend, &AutolabelParams::default()).unwrap();
        let b = autolabel_tile(&tile("t6"), &backend, &AutolabelParams::default()).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn batch_matches_serial_results() {
        let dir = tempfile::tempdir().unwrap();
        let mut tiles = Vec::new();
        for i in 0..6 {
            let id = format!("b{i}");
            scene_backend(dir.path(), &id, &[("building", [220, 205, 60, 60 + i])]);
            tiles.push(tile(&id));
        }
        let backend = SyntheticSceneBackend::new(dir.path());
        let params = AutolabelParams::default();
        let batch: Vec<_> = autolabel_tiles(&tiles, &backend, &params)
            .into_iter()
            .map(|r| r.unwrap())
            .collect();
        for (t, got) in tiles.iter().zip(&batch) {
            let serial = autolabel_tile(t, &backend, &params).unwrap();
            assert_eq!(&serial, got);
        }
    }

    #[test]
    fn outcome_log_shape() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("outcomes.csv");
        let outcomes = vec![
            AutolabelOutcome::labeled("t1", BBox::new(0, 0.45, 0.5, 0.2, 0.2).unwrap(), Some(false)),
            AutolabelOutcome::rejected("t2", RejectReason::CentroidTooFar, None),
        ];
        write_outcomes_csv(&path, &outcomes).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        let mut lines = text.lines();
        assert_eq!(lines.next().unwrap(), "tile_id,status,reason,cx,cy,w,h");
        assert_eq!(lines.next().unwrap(), "t1,labeled,,0.450000,0.500000,0.200000,0.200000");
        assert_eq!(lines.next().unwrap(), "t2,rejected,centroid_too_far,,,,");
    }
}
