//! Seeded synthetic corpus for offline runs.
//!
//! Builds a miniature world on disk: geolocation points, tile PNGs, scene
//! sidecars for the synthetic segmentation backend, a golden pool with
//! trusted labels, and a record of what the labeling pipeline must decide
//! for every school-candidate tile. Everything derives from one seed, so
//! two generations with the same spec are byte-identical.

use std::path::{Path, PathBuf};

use image::{Rgb, RgbImage};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autolabel::{Scene, SceneShape};
use crate::bbox::BBox;
use crate::dataset::{write_labels, Dataset, LabeledImage, Provenance, Split};
use crate::error::{Error, Result};
use crate::geo::{write_points_csv, GeoPoint, PointLabel};
use crate::imagery::tile_filename;

/// Category tag on points destined for the auto-labeled pool.
pub const CATEGORY_AUTO: &str = "demo_auto";
/// Category tag on points destined for the golden pool.
pub const CATEGORY_GOLDEN: &str = "demo_golden";

const GROUND: [u8; 3] = [120, 118, 115];
const VEGETATION: [u8; 3] = [60, 140, 50];
const ROAD: [u8; 3] = [80, 80, 82];
/// Low-saturation roof tones, invisible to the color-ratio filters.
const ROOFS: [[u8; 3]; 4] = [[200, 200, 205], [190, 185, 180], [220, 215, 210], [170, 170, 175]];

/// Size and content of a generated corpus.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CorpusSpec {
    /// School sites whose labels come from the labeling pipeline.
    pub n_school_auto: usize,
    /// Background sites mixed into the auto pool.
    pub n_negative_auto: usize,
    /// School sites with trusted hand-style labels.
    pub n_school_golden: usize,
    /// Background sites in the golden pool.
    pub n_negative_golden: usize,
    /// School candidates painted green so the region filter drops them.
    pub n_vegetation: usize,
    /// Add one engineered scene per labeling rejection reason.
    pub with_reject_scenes: bool,
    /// Buildings per golden school site, 1 to 6. Auto-pool sites always
    /// have one; hand labels may mark several buildings on a campus.
    pub golden_boxes_per_site: usize,
    pub tile_px: u32,
    pub seed: u64,
}

impl Default for CorpusSpec {
    fn default() -> Self {
        CorpusSpec {
            n_school_auto: 20,
            n_negative_auto: 10,
            n_school_golden: 16,
            n_negative_golden: 8,
            n_vegetation: 2,
            with_reject_scenes: true,
            golden_boxes_per_site: 1,
            tile_px: 500,
            seed: 7,
        }
    }
}

/// What the labeling pipeline must produce for one school-candidate tile.
/// `rect` is the building's [row, col, height, width] in tile pixels; the
/// expected box is derivable from it by the corner-extent transform.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ExpectedOutcome {
    pub tile_id: String,
    /// "labeled" or "rejected".
    pub status: String,
    /// Rejection reason in snake_case when status is "rejected".
    pub reason: Option<String>,
    pub rect: Option<[i64; 4]>,
    /// Normalized [cx, cy, w, h] for labeled tiles.
    pub bbox: Option<[f64; 4]>,
}

/// Paths and ground truth of a generated corpus.
#[derive(Debug, Clone)]
pub struct SynthCorpus {
    pub root: PathBuf,
    pub points_csv: PathBuf,
    pub tiles_dir: PathBuf,
    pub scenes_dir: PathBuf,
    /// Manifest of the golden pool, loadable with `dataset::read_labels`.
    pub golden_manifest: PathBuf,
    pub expected_path: PathBuf,
    /// One entry per school-candidate tile in the auto pool.
    pub expected: Vec<ExpectedOutcome>,
}

/// Normalized box a building rect must produce after labeling: corner
/// extents shifted from crop back to tile coordinates, divided by tile
/// size. Written with the same arithmetic the pipeline uses so results
/// compare exactly, not approximately.
pub fn rect_to_bbox(rect: [i64; 4], tile_px: u32) -> Result<BBox> {
    let [row, col, h, w] = rect;
    BBox::from_pixel_corners(
        0,
        col as f64,
        row as f64,
        (col + w) as f64,
        (row + h) as f64,
        tile_px,
        tile_px,
    )
}

fn paint_rect(img: &mut RgbImage, rect: [i64; 4], color: [u8; 3]) {
    let [row, col, h, w] = rect;
    for r in row.max(0)..(row + h).min(i64::from(img.height())) {
        for c in col.max(0)..(col + w).min(i64::from(img.width())) {
            img.put_pixel(c as u32, r as u32, Rgb(color));
        }
    }
}

fn save_tile(img: &RgbImage, tiles_dir: &Path, lat: f64, lon: f64) -> Result<()> {
    let path = tiles_dir.join(tile_filename(lat, lon));
    img.save(&path).map_err(|e| Error::Decode(format!("write {}: {e}", path.display())))
}

/// Grid placement roughly 1.1 km apart, far above the 300 m spacing floor.
fn site_coords(serial: usize) -> (f64, f64) {
    let lat = 9.0 + 0.01 * (serial / 25) as f64;
    let lon = 38.7 + 0.01 * (serial % 25) as f64;
    (lat, lon)
}

/// One school building: roof rect fully inside the analysis crop with its
/// centroid well under the 100 px distance gate.
fn school_rect(rng: &mut ChaCha8Rng) -> [i64; 4] {
    let h = rng.gen_range(50..=110i64);
    let w = rng.gen_range(50..=110i64);
    let row = rng.gen_range(196..=304) - h / 2;
    let col = rng.gen_range(196..=304) - w / 2;
    [row, col, h, w]
}

struct SiteWriter<'a> {
    tiles_dir: &'a Path,
    scenes_dir: &'a Path,
    serial: usize,
    points: Vec<GeoPoint>,
}

impl SiteWriter<'_> {
    /// Registers a point, paints its tile, and optionally writes its scene.
    /// Returns the point id.
    fn add_site(
        &mut self,
        id: String,
        label: PointLabel,
        category: &str,
        img: &RgbImage,
        scene: Option<&Scene>,
    ) -> Result<String> {
        let (lat, lon) = site_coords(self.serial);
        self.serial += 1;
        self.points.push(GeoPoint::new(&id, lat, lon, label, category)?);
        save_tile(img, self.tiles_dir, lat, lon)?;
        if let Some(scene) = scene {
            scene.write(&self.scenes_dir.join(format!("{id}.json")))?;
        }
        Ok(id)
    }
}

fn ground_tile(px: u32) -> RgbImage {
    RgbImage::from_pixel(px, px, Rgb(GROUND))
}

fn negative_tile(px: u32, serial: usize) -> RgbImage {
    let mut img = ground_tile(px);
    // A road stripe for texture; gray, so the color filters see nothing.
    let offset = ((serial * 37) % 300) as i64 + 100;
    paint_rect(&mut img, [offset, 0, 20, i64::from(px)], ROAD);
    img
}

/// Builds a school tile plus its scene. Every third site duplicates the
/// roof under a second prompt, exercising the fusion path without changing
/// the resulting box.
fn school_site(
    rng: &mut ChaCha8Rng,
    serial: usize,
    tile_px: u32,
) -> (RgbImage, Scene, [i64; 4]) {
    let rect = school_rect(rng);
    let mut img = ground_tile(tile_px);
    paint_rect(&mut img, rect, ROOFS[serial % ROOFS.len()]);
    let mut scene = Scene::new(tile_px as usize, tile_px as usize);
    scene.push("building", SceneShape::Rect { rect, score: 0.9 });
    if serial % 3 == 0 {
        scene.push("roof", SceneShape::Rect { rect, score: 0.8 });
    }
    (img, scene, rect)
}

/// Non-overlapping cell origins for multi-building campuses, all inside
/// the 400 px analysis crop of a 500 px tile.
const CAMPUS_CELLS: [(i64, i64); 6] =
    [(130, 120), (130, 230), (130, 340), (240, 120), (240, 230), (240, 340)];

/// A campus of `count` buildings on separate cells. Returns the painted
/// tile, a scene holding every building, and the rects themselves.
fn campus_site(
    rng: &mut ChaCha8Rng,
    serial: usize,
    tile_px: u32,
    count: usize,
) -> (RgbImage, Scene, Vec<[i64; 4]>) {
    let mut img = ground_tile(tile_px);
    let mut scene = Scene::new(tile_px as usize, tile_px as usize);
    let mut rects = Vec::with_capacity(count);
    for (cell_r, cell_c) in CAMPUS_CELLS.iter().take(count) {
        let rect = [
            cell_r + rng.gen_range(0..=25),
            cell_c + rng.gen_range(0..=25),
            rng.gen_range(50..=80),
            rng.gen_range(50..=80),
        ];
        paint_rect(&mut img, rect, ROOFS[serial % ROOFS.len()]);
        scene.push("building", SceneShape::Rect { rect, score: 0.9 });
        rects.push(rect);
    }
    (img, scene, rects)
}

/// Generates the corpus under `root`, creating `tiles/`, `scenes/`, and
/// `golden/` subdirectories plus `points.csv` and `expected.jsonl`.
pub fn generate_corpus(root: &Path, spec: &CorpusSpec) -> Result<SynthCorpus> {
    if spec.tile_px < 500 {
        return Err(Error::InvalidInput(format!(
            "tile size {} is smaller than the 400 px analysis crop plus margins",
            spec.tile_px
        )));
    }
    if spec.golden_boxes_per_site == 0 || spec.golden_boxes_per_site > CAMPUS_CELLS.len() {
        return Err(Error::InvalidInput(format!(
            "golden_boxes_per_site = {} must be in 1..={}",
            spec.golden_boxes_per_site,
            CAMPUS_CELLS.len()
        )));
    }
    let tiles_dir = root.join("tiles");
    let scenes_dir = root.join("scenes");
    for dir in [root, &tiles_dir, &scenes_dir] {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }

    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut writer = SiteWriter {
        tiles_dir: &tiles_dir,
        scenes_dir: &scenes_dir,
        serial: 0,
        points: Vec::new(),
    };
    let mut expected = Vec::new();

    for i in 0..spec.n_school_auto {
        let (img, scene, rect) = school_site(&mut rng, i, spec.tile_px);
        let id = writer.add_site(
            format!("as{i:03}"),
            PointLabel::School,
            CATEGORY_AUTO,
            &img,
            Some(&scene),
        )?;
        let bbox = rect_to_bbox(rect, spec.tile_px)?;
        expected.push(ExpectedOutcome {
            tile_id: id,
            status: "labeled".into(),
            reason: None,
            rect: Some(rect),
            bbox: Some([bbox.cx, bbox.cy, bbox.w, bbox.h]),
        });
    }

    for i in 0..spec.n_vegetation {
        // Dense canopy: the region filter must drop these before labeling.
        let img = RgbImage::from_pixel(spec.tile_px, spec.tile_px, Rgb(VEGETATION));
        let scene = Scene::new(spec.tile_px as usize, spec.tile_px as usize);
        writer.add_site(
            format!("av{i:03}"),
            PointLabel::School,
            CATEGORY_AUTO,
            &img,
            Some(&scene),
        )?;
    }

    if spec.with_reject_scenes {
        for (name, reason, shapes) in reject_scene_constructions() {
            let mut scene = Scene::new(spec.tile_px as usize, spec.tile_px as usize);
            let mut img = ground_tile(spec.tile_px);
            for rect in &shapes {
                scene.push("building", SceneShape::Rect { rect: *rect, score: 0.9 });
                paint_rect(&mut img, *rect, ROOFS[0]);
            }
            let id = writer.add_site(
                name.to_string(),
                PointLabel::School,
                CATEGORY_AUTO,
                &img,
                Some(&scene),
            )?;
            expected.push(ExpectedOutcome {
                tile_id: id,
                status: "rejected".into(),
                reason: Some(reason.to_string()),
                rect: None,
                bbox: None,
            });
        }
    }

    for i in 0..spec.n_negative_auto {
        let img = negative_tile(spec.tile_px, i);
        writer.add_site(format!("an{i:03}"), PointLabel::NonSchool, CATEGORY_AUTO, &img, None)?;
    }

    // Golden pool: trusted labels written directly from the construction,
    // never through the labeling pipeline.
    let mut golden_images = Vec::new();
    for i in 0..spec.n_school_golden {
        let (img, scene, rects) =
            campus_site(&mut rng, i + 1, spec.tile_px, spec.golden_boxes_per_site);
        let id = writer.add_site(
            format!("gs{i:03}"),
            PointLabel::School,
            CATEGORY_GOLDEN,
            &img,
            Some(&scene),
        )?;
        let (lat, lon) = site_coords(writer.serial - 1);
        golden_images.push(LabeledImage {
            id,
            image_path: tiles_dir.join(tile_filename(lat, lon)),
            boxes: rects
                .into_iter()
                .map(|r| rect_to_bbox(r, spec.tile_px))
                .collect::<Result<_>>()?,
            provenance: Provenance::Golden,
            split: Split::Unassigned,
        });
    }
    for i in 0..spec.n_negative_golden {
        let img = negative_tile(spec.tile_px, i + 13);
        let id = writer.add_site(
            format!("gn{i:03}"),
            PointLabel::NonSchool,
            CATEGORY_GOLDEN,
            &img,
            None,
        )?;
        let (lat, lon) = site_coords(writer.serial - 1);
        golden_images.push(LabeledImage {
            id,
            image_path: tiles_dir.join(tile_filename(lat, lon)),
            boxes: Vec::new(),
            provenance: Provenance::Golden,
            split: Split::Unassigned,
        });
    }

    let points_csv = root.join("points.csv");
    write_points_csv(&writer.points, &points_csv)?;
    let golden_manifest = write_labels(&Dataset::new(golden_images), &root.join("golden"))?;

    let expected_path = root.join("expected.jsonl");
    write_expected(&expected, &expected_path)?;

    Ok(SynthCorpus {
        root: root.to_path_buf(),
        points_csv,
        tiles_dir,
        scenes_dir,
        golden_manifest,
        expected_path,
        expected,
    })
}

/// One construction per rejection reason, each tripping exactly its own
/// gate. Rects are [row, col, height, width] in a 500 px tile frame.
fn reject_scene_constructions() -> Vec<(&'static str, &'static str, Vec<[i64; 4]>)> {
    vec![
        // No shapes at all.
        ("ar_empty", "no_valid_mask", vec![]),
        // 360 px square: 81% of the crop, far past the 60% ceiling.
        ("ar_giant", "size_out_of_range", vec![[70, 70, 360, 360]]),
        // Two overlapping arms fuse into an L whose solidity is ~0.61.
        // Each arm alone passes the size band, so only the shape gate trips.
        ("ar_lshape", "solidity_fail", vec![[170, 170, 60, 15], [215, 170, 15, 60]]),
        // Sound building parked near the crop corner, ~216 px off center.
        ("ar_corner", "centroid_too_far", vec![[60, 60, 60, 90]]),
    ]
}

fn write_expected(expected: &[ExpectedOutcome], path: &Path) -> Result<()> {
    let mut out = String::new();
    for record in expected {
        let line = serde_json::to_string(record)
            .map_err(|e| Error::Decode(format!("serialize expectation: {e}")))?;
        out.push_str(&line);
        out.push('\n');
    }
    std::fs::write(path, out).map_err(|e| Error::io(path, e))
}

pub fn read_expected(path: &Path) -> Result<Vec<ExpectedOutcome>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| {
            serde_json::from_str(l).map_err(|e| Error::Decode(format!("expectation line: {e}")))
        })
        .collect()
}
