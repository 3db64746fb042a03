//! Prompt-conditioned segmentation backends.
//!
//! Two implementations of [`SegmentBackend`]: a deterministic synthetic one
//! that rasterizes shapes from a per-tile scene sidecar (used by tests and
//! the offline demo), and a remote adapter that posts the crop to a model
//! server. Both return masks in the coordinate frame of the crop they were
//! given.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::autolabel::mask::{rect_bitmap, Bitmap, Mask};
use crate::error::{Error, Result};
use crate::imagery::{HttpTransport, ImageTile, RetryPolicy};

/// Produces candidate masks for one prompt on one crop.
pub trait SegmentBackend: Send + Sync {
    fn segment(&self, crop: &ImageTile, prompt: &str) -> Result<Vec<Mask>>;

    /// Upper bound on concurrent in-flight requests; None means unlimited.
    fn max_in_flight(&self) -> Option<usize> {
        None
    }
}

/// Runs every prompt in order and pools the masks. No dedup happens here;
/// identical shapes under different prompts yield distinct masks.
pub fn segment_all(backend: &dyn SegmentBackend, crop: &ImageTile, prompts: &[String]) -> Result<Vec<Mask>> {
    let mut masks = Vec::new();
    for prompt in prompts {
        masks.extend(backend.segment(crop, prompt)?);
    }
    Ok(masks)
}

fn default_shape_score() -> f64 {
    1.0
}

/// One drawable object in a scene sidecar. Coordinates are (row, col) in the
/// scene's frame.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(untagged)]
pub enum SceneShape {
    Rect {
        /// [row, col, height, width] in pixels.
        rect: [i64; 4],
        #[serde(default = "default_shape_score")]
        score: f64,
    },
    Polygon {
        /// Vertices as [row, col]; closed implicitly.
        polygon: Vec<[f64; 2]>,
        #[serde(default = "default_shape_score")]
        score: f64,
    },
}

impl SceneShape {
    fn score(&self) -> f64 {
        match self {
            SceneShape::Rect { score, .. } | SceneShape::Polygon { score, .. } => *score,
        }
    }

    /// Rasterizes into a crop-sized bitmap. `offset` maps crop coordinates
    /// into the scene frame: frame_row = crop_row + offset.0.
    fn rasterize(&self, dims: (usize, usize), offset: (i64, i64)) -> Bitmap {
        match self {
            SceneShape::Rect { rect, .. } => {
                let [row, col, h, w] = *rect;
                rect_bitmap(dims, row - offset.0, col - offset.1, h, w)
            }
            SceneShape::Polygon { polygon, .. } => {
                let mut bm = Bitmap::new(dims.0, dims.1);
                if polygon.len() < 3 {
                    return bm;
                }
                for r in 0..dims.0 {
                    for c in 0..dims.1 {
                        let fy = r as f64 + offset.0 as f64 + 0.5;
                        let fx = c as f64 + offset.1 as f64 + 0.5;
                        if point_in_polygon(fy, fx, polygon) {
                            bm.set(r, c, true);
                        }
                    }
                }
                bm
            }
        }
    }
}

/// Even-odd ray cast; vertices are [row, col].
fn point_in_polygon(py: f64, px: f64, poly: &[[f64; 2]]) -> bool {
    let mut inside = false;
    let mut j = poly.len() - 1;
    for i in 0..poly.len() {
        let (yi, xi) = (poly[i][0], poly[i][1]);
        let (yj, xj) = (poly[j][0], poly[j][1]);
        if (yi > py) != (yj > py) && px < (xj - xi) * (py - yi) / (yj - yi) + xi {
            inside = !inside;
        }
        j = i;
    }
    inside
}

/// Per-tile scene description: shapes grouped by prompt, in a fixed frame
/// (normally the full tile) so the same file serves any crop size.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Scene {
    pub frame_h: usize,
    pub frame_w: usize,
    #[serde(default)]
    pub prompts: BTreeMap<String, Vec<SceneShape>>,
}

impl Scene {
    pub fn new(frame_h: usize, frame_w: usize) -> Self {
        Scene { frame_h, frame_w, prompts: BTreeMap::new() }
    }

    pub fn push(&mut self, prompt: impl Into<String>, shape: SceneShape) {
        self.prompts.entry(prompt.into()).or_default().push(shape);
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| {
            if e.kind() == std::io::ErrorKind::NotFound {
                Error::NotFound(format!("scene file {}", path.display()))
            } else {
                Error::io(path, e)
            }
        })?;
        serde_json::from_str(&text).map_err(|e| Error::Decode(format!("{}: {e}", path.display())))
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self)
            .map_err(|e| Error::Decode(format!("serialize scene: {e}")))?;
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    /// Rasterizes this scene's shapes for one prompt into a crop of the
    /// given size, assuming the crop is centered in the frame. Shapes that
    /// end up with zero visible pixels are dropped.
    pub fn masks_for(&self, prompt: &str, crop_dims: (usize, usize)) -> Result<Vec<Mask>> {
        let offset = (
            (self.frame_h as i64 - crop_dims.0 as i64).div_euclid(2),
            (self.frame_w as i64 - crop_dims.1 as i64).div_euclid(2),
        );
        let Some(shapes) = self.prompts.get(prompt) else {
            return Ok(Vec::new());
        };
        let mut masks = Vec::new();
        for shape in shapes {
            let bitmap = shape.rasterize(crop_dims, offset);
            if bitmap.count_true() > 0 {
                masks.push(Mask::from_bitmap(bitmap, prompt, shape.score())?);
            }
        }
        Ok(masks)
    }
}

/// Deterministic backend reading `{tile_id}.json` scene sidecars. A missing
/// sidecar is an error; tiles with nothing to segment need a scene with no
/// shapes.
pub struct SyntheticSceneBackend {
    scene_dir: PathBuf,
}

impl SyntheticSceneBackend {
    pub fn new(scene_dir: impl Into<PathBuf>) -> Self {
        SyntheticSceneBackend { scene_dir: scene_dir.into() }
    }

    pub fn scene_path(&self, tile_id: &str) -> PathBuf {
        self.scene_dir.join(format!("{tile_id}.json"))
    }
}

impl SegmentBackend for SyntheticSceneBackend {
    fn segment(&self, crop: &ImageTile, prompt: &str) -> Result<Vec<Mask>> {
        let scene = Scene::read(&self.scene_path(&crop.source_id))?;
        let (h, w) = crop.size_px();
        scene.masks_for(prompt, (h as usize, w as usize))
    }
}

/// Wire format returned by a remote segmentation server: shapes in crop
/// coordinates.
#[derive(Debug, Deserialize)]
struct RemoteMasksResponse {
    masks: Vec<SceneShape>,
}

/// Posts the crop PNG to a model server and rasterizes the returned shapes.
/// Network failures are retryable.
pub struct RemoteSegmentBackend {
    endpoint: String,
    transport: Box<dyn HttpTransport>,
    retry: RetryPolicy,
    max_in_flight: usize,
}

impl RemoteSegmentBackend {
    pub fn new(endpoint: impl Into<String>, transport: Box<dyn HttpTransport>) -> Self {
        RemoteSegmentBackend {
            endpoint: endpoint.into(),
            transport,
            retry: RetryPolicy::default(),
            max_in_flight: 4,
        }
    }

    pub fn with_retry(mut self, retry: RetryPolicy) -> Self {
        self.retry = retry;
        self
    }
}

impl SegmentBackend for RemoteSegmentBackend {
    fn segment(&self, crop: &ImageTile, prompt: &str) -> Result<Vec<Mask>> {
        let mut png = Vec::new();
        crop.pixels
            .write_to(&mut std::io::Cursor::new(&mut png), image::ImageFormat::Png)
            .map_err(|e| Error::Decode(format!("encode crop {}: {e}", crop.source_id)))?;
        let url = format!("{}?prompt={}", self.endpoint, prompt);
        let body = self.retry.run(|| self.transport.post(&url, &png, "image/png"))?;
        let parsed: RemoteMasksResponse = serde_json::from_slice(&body)
            .map_err(|e| Error::Decode(format!("segmentation response for {}: {e}", crop.source_id)))?;
        let (h, w) = crop.size_px();
        let dims = (h as usize, w as usize);
        let mut masks = Vec::new();
        for shape in &parsed.masks {
            let bitmap = shape.rasterize(dims, (0, 0));
            if bitmap.count_true() > 0 {
                masks.push(Mask::from_bitmap(bitmap, prompt, shape.score().clamp(0.0, 1.0))?);
            }
        }
        Ok(masks)
    }

    fn max_in_flight(&self) -> Option<usize> {
        Some(self.max_in_flight)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geo::{GeoPoint, PointLabel};
    use image::RgbImage;

    fn crop_tile(id: &str, h: u32, w: u32) -> ImageTile {
        let center = GeoPoint::new(id, 0.0, 0.0, PointLabel::School, "giga").unwrap();
        ImageTile::new(RgbImage::new(w, h), 0.6, center, id).unwrap()
    }

    fn rect(row: i64, col: i64, h: i64, w: i64) -> SceneShape {
        SceneShape::Rect { rect: [row, col, h, w], score: 0.9 }
    }

    #[test]
    fn one_rectangle_yields_one_mask_with_exact_area() {
        let dir = tempfile::tempdir().unwrap();
        let mut scene = Scene::new(400, 400);
        scene.push("building", rect(100, 100, 50, 80));
        scene.write(&dir.path().join("t1.json")).unwrap();

        let backend = SyntheticSceneBackend::new(dir.path());
        let masks = backend.segment(&crop_tile("t1", 400, 400), "building").unwrap();
        assert_eq!(masks.len(), 1);
        assert_eq!(masks[0].area_px, 4000);
        assert_eq!(masks[0].prompt, "building");
    }

    #[test]
    fn empty_scene_yields_no_masks() {
        let dir = tempfile::tempdir().unwrap();
        Scene::new(400, 400).write(&dir.path().join("t2.json")).unwrap();
        let backend = SyntheticSceneBackend::new(dir.path());
        let masks = backend.segment(&crop_tile("t2", 400, 400), "building").unwrap();
        assert!(masks.is_empty());
    }

    #[test]
    fn missing_scene_file_is_an_error() {
        let dir = tempfile::tempdir().unwrap();
        let backend = SyntheticSceneBackend::new(dir.path());
        let err = backend.segment(&crop_tile("ghost", 400, 400), "building").unwrap_err();
        assert!(matches!(err, Error::NotFound(_)), "{err}");
    }

    #[test]
    fn same_shape_under_three_prompts_pools_to_three_masks() {
        let dir = tempfile::tempdir().unwrap();
        let mut scene = Scene::new(400, 400);
        for prompt in ["building", "roof", "school"] {
            scene.push(prompt, rect(150, 150, 40, 40));
        }
        scene.write(&dir.path().join("t3.json")).unwrap();
        let backend = SyntheticSceneBackend::new(dir.path());
        let prompts: Vec<String> = ["building", "roof", "school"].iter().map(|s| s.to_string()).collect();
        let masks = segment_all(&backend, &crop_tile("t3", 400, 400), &prompts).unwrap();
        assert_eq!(masks.len(), 3);
        assert!(masks.windows(2).all(|w| w[0].bitmap == w[1].bitmap));
        // Prompt order preserved in the pooled list.
        assert_eq!(masks[0].prompt, "building");
        assert_eq!(masks[2].prompt, "school");
    }

    #[test]
    fn centered_crop_translates_frame_coordinates() {
        // Frame 500; crop 400 -> offset 50. Rect at frame rows 150..250,
        // cols 200..300 must land at crop rows 100..200, cols 150..250.
        let dir = tempfile::tempdir().unwrap();
        let mut scene = Scene::new(500, 500);
        scene.push("building", rect(150, 200, 100, 100));
        scene.write(&dir.path().join("t4.json")).unwrap();
        let backend = SyntheticSceneBackend::new(dir.path());
        let masks = backend.segment(&crop_tile("t4", 400, 400), "building").unwrap();
        assert_eq!(masks.len(), 1);
        let (r0, c0, r1, c1) = masks[0].tight_bounds();
        assert_eq!((r0, c0, r1, c1), (100, 150, 199, 249));
    }

    #[test]
    fn shapes_outside_the_crop_are_dropped_and_partials_clipped() {
        let dir = tempfile::tempdir().unwrap();
        let mut scene = Scene::new(500, 500);
        // Fully in the 50 px frame margin, invisible to a 400 px crop.
        scene.push("building", rect(0, 0, 40, 40));
        // Straddles the crop edge at frame row 50: rows 30..70 -> 20 rows visible.
        scene.push("building", rect(30, 200, 40, 10));
        scene.write(&dir.path().join("t5.json")).unwrap();
        let backend = SyntheticSceneBackend::new(dir.path());
        let masks = backend.segment(&crop_tile("t5", 400, 400), "building").unwrap();
        assert_eq!(masks.len(), 1);
        assert_eq!(masks[0].area_px, 20 * 10);
        let (r0, ..) = masks[0].tight_bounds();
        assert_eq!(r0, 0);
    }

    #[test]
    fn triangle_polygon_rasterizes_by_pixel_centers() {
        // Right triangle with legs of 10 px: centers strictly inside the
        // hypotenuse satisfy row+col <= 8, giving 45 pixels.
        let dir = tempfile::tempdir().unwrap();
        let mut scene = Scene::new(20, 20);
        scene.push(
            "building",
            SceneShape::Polygon {
                polygon: vec![[0.0, 0.0], [0.0, 10.0], [10.0, 0.0]],
                score: 1.0,
            },
        );
        scene.write(&dir.path().join("t6.json")).unwrap();
        let backend = SyntheticSceneBackend::new(dir.path());
        let masks = backend.segment(&crop_tile("t6", 20, 20), "building").unwrap();
        assert_eq!(masks.len(), 1);
        assert_eq!(masks[0].area_px, 45);
    }

    #[test]
    fn scene_roundtrips_through_json() {
        let mut scene = Scene::new(500, 500);
        scene.push("building", rect(1, 2, 3, 4));
        scene.push(
            "roof",
            SceneShape::Polygon { polygon: vec![[0.0, 0.0], [0.0, 5.0], [5.0, 0.0]], score: 0.5 },
        );
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("s.json");
        scene.write(&path).unwrap();
        let back = Scene::read(&path).unwrap();
        assert_eq!(back.frame_h, 500);
        assert_eq!(back.prompts.len(), 2);
        match &back.prompts["building"][0] {
            SceneShape::Rect { rect, score } => {
                assert_eq!(*rect, [1, 2, 3, 4]);
                assert_eq!(*score, 0.9);
            }
            other => panic!("expected rect, got {other:?}"),
        }
    }

    struct PostFixture {
        body: Vec<u8>,
    }

    impl HttpTransport for PostFixture {
        fn get(&self, url: &str) -> Result<Vec<u8>> {
            Err(Error::Backend(format!("unexpected GET {url}")))
        }

        fn post(&self, _url: &str, body: &[u8], content_type: &str) -> Result<Vec<u8>> {
            assert_eq!(content_type, "image/png");
            assert!(!body.is_empty());
            Ok(self.body.clone())
        }
    }

    #[test]
    fn remote_backend_parses_shape_response() {
        let response = r#"{"masks": [{"rect": [10, 10, 20, 30], "score": 0.8}]}"#;
        let backend = RemoteSegmentBackend::new(
            "https://seg.example/segment",
            Box::new(PostFixture { body: response.as_bytes().to_vec() }),
        );
        let masks = backend.segment(&crop_tile("r1", 100, 100), "school").unwrap();
        assert_eq!(masks.len(), 1);
        assert_eq!(masks[0].area_px, 600);
        assert_eq!(masks[0].score, 0.8);
        assert_eq!(masks[0].prompt, "school");
        assert_eq!(backend.max_in_flight(), Some(4));
    }

    #[test]
    fn remote_backend_surfaces_bad_json_as_decode() {
        let backend = RemoteSegmentBackend::new(
            "https://seg.example/segment",
            Box::new(PostFixture { body: b"oops".to_vec() }),
        );
        let err = backend.segment(&crop_tile("r2", 50, 50), "school").unwrap_err();
        assert!(matches!(err, Error::Decode(_)), "{err}");
    }
}
