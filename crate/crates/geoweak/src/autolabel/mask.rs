//! Binary masks and the shape measurements used to vet them.
//!
//! Solidity compares mask area to the area of the convex hull taken over
//! pixel-square corners, so a filled axis-aligned rectangle scores exactly
//! 1.0 and no mask can score above 1.0.

use crate::error::{Error, Result};

/// Row-major boolean raster.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Bitmap {
    h: usize,
    w: usize,
    data: Vec<bool>,
}

impl Bitmap {
    pub fn new(h: usize, w: usize) -> Self {
        Bitmap { h, w, data: vec![false; h * w] }
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.h, self.w)
    }

    pub fn get(&self, row: usize, col: usize) -> bool {
        row < self.h && col < self.w && self.data[row * self.w + col]
    }

    pub fn set(&mut self, row: usize, col: usize, value: bool) {
        assert!(row < self.h && col < self.w, "pixel ({row},{col}) outside {}x{}", self.h, self.w);
        self.data[row * self.w + col] = value;
    }

    pub fn count_true(&self) -> usize {
        self.data.iter().filter(|&&b| b).count()
    }

    /// Iterator over true-pixel (row, col) coordinates.
    pub fn true_pixels(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        self.data
            .iter()
            .enumerate()
            .filter(|(_, &b)| b)
            .map(|(i, _)| (i / self.w, i % self.w))
    }

    pub fn union(&self, other: &Bitmap) -> Result<Bitmap> {
        if self.dims() != other.dims() {
            return Err(Error::InvalidInput(format!(
                "bitmap dims {:?} vs {:?} differ",
                self.dims(),
                other.dims()
            )));
        }
        let data = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(&a, &b)| a || b)
            .collect();
        Ok(Bitmap { h: self.h, w: self.w, data })
    }

    /// Intersection-over-union of two same-sized bitmaps.
    pub fn iou(&self, other: &Bitmap) -> Result<f64> {
        if self.dims() != other.dims() {
            return Err(Error::InvalidInput(format!(
                "bitmap dims {:?} vs {:?} differ",
                self.dims(),
                other.dims()
            )));
        }
        let mut inter = 0usize;
        let mut union = 0usize;
        for (&a, &b) in self.data.iter().zip(&other.data) {
            inter += usize::from(a && b);
            union += usize::from(a || b);
        }
        Ok(if union == 0 { 0.0 } else { inter as f64 / union as f64 })
    }
}

/// A segmentation mask with cached area and centroid.
#[derive(Debug, Clone, PartialEq)]
pub struct Mask {
    pub bitmap: Bitmap,
    /// Count of true pixels; always ≥ 1.
    pub area_px: usize,
    /// Mean (row, col) of true pixels.
    pub centroid: (f64, f64),
    pub prompt: String,
    /// Backend confidence in [0,1]; recorded but not used for selection.
    pub score: f64,
}

impl Mask {
    pub fn from_bitmap(bitmap: Bitmap, prompt: impl Into<String>, score: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&score) {
            return Err(Error::InvalidInput(format!("mask score {score} outside [0,1]")));
        }
        let mut count = 0usize;
        let mut row_sum = 0.0;
        let mut col_sum = 0.0;
        for (r, c) in bitmap.true_pixels() {
            count += 1;
            row_sum += r as f64;
            col_sum += c as f64;
        }
        if count == 0 {
            return Err(Error::InvalidInput("mask has no true pixels".into()));
        }
        Ok(Mask {
            bitmap,
            area_px: count,
            centroid: (row_sum / count as f64, col_sum / count as f64),
            prompt: prompt.into(),
            score,
        })
    }

    /// Tight pixel-index bounds (r0, c0, r1, c1), inclusive.
    pub fn tight_bounds(&self) -> (usize, usize, usize, usize) {
        let mut r0 = usize::MAX;
        let mut c0 = usize::MAX;
        let mut r1 = 0usize;
        let mut c1 = 0usize;
        for (r, c) in self.bitmap.true_pixels() {
            r0 = r0.min(r);
            c0 = c0.min(c);
            r1 = r1.max(r);
            c1 = c1.max(c);
        }
        (r0, c0, r1, c1)
    }

    /// Whether the corner-extent boxes of two masks touch or overlap.
    /// Edge-adjacent pixels count as touching.
    pub fn bounds_intersect(&self, other: &Mask) -> bool {
        let (ar0, ac0, ar1, ac1) = self.tight_bounds();
        let (br0, bc0, br1, bc1) = other.tight_bounds();
        // Corner extents are [r0, r1+1] x [c0, c1+1]; closed intervals.
        ar0 <= br1 + 1 && br0 <= ar1 + 1 && ac0 <= bc1 + 1 && bc0 <= ac1 + 1
    }

    /// Pixelwise union of two masks from the same crop. The joined prompt
    /// records both sources; the score keeps the larger confidence.
    pub fn fuse(&self, other: &Mask) -> Result<Mask> {
        let bitmap = self.bitmap.union(&other.bitmap)?;
        let prompt = if self.prompt == other.prompt {
            self.prompt.clone()
        } else {
            format!("{}+{}", self.prompt, other.prompt)
        };
        Mask::from_bitmap(bitmap, prompt, self.score.max(other.score))
    }

    /// Convex hull area over pixel-square corners. Every true pixel
    /// contributes a full unit square, so the result is ≥ area_px.
    pub fn hull_area(&self) -> f64 {
        let mut points: Vec<(i64, i64)> = Vec::new();
        for (r, c) in self.bitmap.true_pixels() {
            // Interior pixels cannot host hull vertices; keep boundary only.
            let boundary = r == 0
                || c == 0
                || !self.bitmap.get(r - 1, c)
                || !self.bitmap.get(r + 1, c)
                || !self.bitmap.get(r, c - 1)
                || !self.bitmap.get(r, c + 1);
            if boundary {
                let (x, y) = (c as i64, r as i64);
                points.extend_from_slice(&[(x, y), (x + 1, y), (x, y + 1), (x + 1, y + 1)]);
            }
        }
        let hull = convex_hull(points);
        polygon_area(&hull)
    }

    /// Mask area over hull area, in (0,1]. Exactly 1.0 for filled convex
    /// axis-aligned shapes.
    pub fn solidity(&self) -> f64 {
        let hull = self.hull_area();
        debug_assert!(hull > 0.0);
        (self.area_px as f64 / hull).min(1.0)
    }

    /// Hull-bbox aspect ratio, ≥ 1. Uses corner extents so a 1-pixel-wide
    /// strip of length n scores n.
    pub fn aspect_ratio(&self) -> f64 {
        let (r0, c0, r1, c1) = self.tight_bounds();
        let h = (r1 - r0 + 1) as f64;
        let w = (c1 - c0 + 1) as f64;
        h.max(w) / h.min(w)
    }
}

/// Monotone-chain convex hull; returns vertices in counterclockwise order.
fn convex_hull(mut points: Vec<(i64, i64)>) -> Vec<(i64, i64)> {
    points.sort_unstable();
    points.dedup();
    if points.len() <= 2 {
        return points;
    }
    let cross = |o: (i64, i64), a: (i64, i64), b: (i64, i64)| {
        (a.0 - o.0) * (b.1 - o.1) - (a.1 - o.1) * (b.0 - o.0)
    };
    let mut lower: Vec<(i64, i64)> = Vec::new();
    for &p in &points {
        while lower.len() >= 2 && cross(lower[lower.len() - 2], lower[lower.len() - 1], p) <= 0 {
            lower.pop();
        }
        lower.push(p);
    }
    let mut upper: Vec<(i64, i64)> = Vec::new();
    for &p in points.iter().rev() {
        while upper.len() >= 2 && cross(upper[upper.len() - 2], upper[upper.len() - 1], p) <= 0 {
            upper.pop();
        }
        upper.push(p);
    }
    lower.pop();
    upper.pop();
    lower.extend(upper);
    lower
}

/// Shoelace area; 0 for fewer than 3 vertices.
fn polygon_area(vertices: &[(i64, i64)]) -> f64 {
    if vertices.len() < 3 {
        return 0.0;
    }
    let mut twice = 0i64;
    for i in 0..vertices.len() {
        let (x1, y1) = vertices[i];
        let (x2, y2) = vertices[(i + 1) % vertices.len()];
        twice += x1 * y2 - x2 * y1;
    }
    (twice.abs() as f64) / 2.0
}

/// Builds a rectangle bitmap, clipped to the raster. Rows and cols are
/// pixel indices; extents in pixels.
pub fn rect_bitmap(dims: (usize, usize), row: i64, col: i64, rect_h: i64, rect_w: i64) -> Bitmap {
    let (h, w) = dims;
    let mut bm = Bitmap::new(h, w);
    let r_start = row.max(0);
    let c_start = col.max(0);
    let r_end = (row + rect_h).min(h as i64);
    let c_end = (col + rect_w).min(w as i64);
    for r in r_start..r_end {
        for c in c_start..c_end {
            bm.set(r as usize, c as usize, true);
        }
    }
    bm
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn mask_of(bm: Bitmap) -> Mask {
        Mask::from_bitmap(bm, "building", 0.9).unwrap()
    }

    #[test]
    fn constructor_computes_area_and_centroid() {
        // 50x80 rectangle at rows 10..60, cols 20..100.
        let m = mask_of(rect_bitmap((200, 200), 10, 20, 50, 80));
        assert_eq!(m.area_px, 4000);
        assert_abs_diff_eq!(m.centroid.0, (10.0 + 59.0) / 2.0, epsilon = 1e-12);
        assert_abs_diff_eq!(m.centroid.1, (20.0 + 99.0) / 2.0, epsilon = 1e-12);
    }

    #[test]
    fn empty_bitmap_rejected() {
        assert!(Mask::from_bitmap(Bitmap::new(10, 10), "roof", 0.5).is_err());
    }

    #[test]
    fn filled_rectangle_solidity_is_exactly_one() {
        let m = mask_of(rect_bitmap((100, 100), 5, 7, 30, 41));
        assert_eq!(m.solidity(), 1.0);
        assert_eq!(m.hull_area(), (30 * 41) as f64);
    }

    #[test]
    fn single_pixel_solidity_is_one() {
        let mut bm = Bitmap::new(10, 10);
        bm.set(4, 4, true);
        let m = mask_of(bm);
        assert_eq!(m.hull_area(), 1.0);
        assert_eq!(m.solidity(), 1.0);
        assert_eq!(m.aspect_ratio(), 1.0);
    }

    #[test]
    fn two_collinear_pixels_solidity_is_one() {
        let mut bm = Bitmap::new(10, 10);
        bm.set(3, 3, true);
        bm.set(3, 4, true);
        let m = mask_of(bm);
        assert_eq!(m.hull_area(), 2.0);
        assert_eq!(m.solidity(), 1.0);
    }

    #[test]
    fn diagonal_pixel_pair_hull_is_hexagon() {
        // Pixels (0,0) and (1,1): hull over their 8 corners has area 3
        // (hand shoelace over (0,0),(1,0),(2,1),(2,2),(1,2),(0,1)).
        let mut bm = Bitmap::new(4, 4);
        bm.set(0, 0, true);
        bm.set(1, 1, true);
        let m = mask_of(bm);
        assert_eq!(m.hull_area(), 3.0);
        assert_abs_diff_eq!(m.solidity(), 2.0 / 3.0, epsilon = 1e-12);
    }

    #[test]
    fn l_shape_fails_solidity() {
        // Vertical arm rows 0..40 x cols 0..10 plus horizontal arm
        // rows 30..40 x cols 0..40. Area 400+400-100 = 700. Hull is the
        // pentagon (0,0),(10,0),(40,30),(40,40),(0,40) with shoelace
        // area 1150 (hand-computed).
        let dims = (60, 60);
        let arm1 = rect_bitmap(dims, 0, 0, 40, 10);
        let arm2 = rect_bitmap(dims, 30, 0, 10, 40);
        let m = mask_of(arm1.union(&arm2).unwrap());
        assert_eq!(m.area_px, 700);
        assert_eq!(m.hull_area(), 1150.0);
        assert_abs_diff_eq!(m.solidity(), 700.0 / 1150.0, epsilon = 1e-12);
        assert!(m.solidity() < 0.70);
    }

    #[test]
    fn thin_strip_aspect_ratio() {
        let m = mask_of(rect_bitmap((300, 300), 10, 10, 2, 200));
        assert_eq!(m.aspect_ratio(), 100.0);
        // Solidity stays perfect; only the aspect rule flags it.
        assert_eq!(m.solidity(), 1.0);
    }

    #[test]
    fn solidity_never_exceeds_one() {
        // Plus-shaped mask (convex hull adds the corner notches).
        let dims = (50, 50);
        let horiz = rect_bitmap(dims, 20, 10, 10, 30);
        let vert = rect_bitmap(dims, 10, 20, 30, 10);
        let m = mask_of(horiz.union(&vert).unwrap());
        let s = m.solidity();
        assert!(s > 0.0 && s <= 1.0, "solidity {s}");
        assert!(s < 1.0);
    }

    #[test]
    fn union_area_matches_inclusion_exclusion() {
        let dims = (100, 100);
        let a = rect_bitmap(dims, 10, 10, 20, 20);
        let b = rect_bitmap(dims, 20, 20, 20, 20);
        let u = a.union(&b).unwrap();
        // Overlap is rows 20..30 x cols 20..30 = 100 px.
        assert_eq!(u.count_true(), 400 + 400 - 100);
    }

    #[test]
    fn bitmap_iou_hand_value() {
        let dims = (100, 100);
        let a = rect_bitmap(dims, 0, 0, 10, 10);
        let b = rect_bitmap(dims, 0, 5, 10, 10);
        // Intersection 10x5 = 50, union 150.
        assert_abs_diff_eq!(a.iou(&b).unwrap(), 50.0 / 150.0, epsilon = 1e-12);
    }

    #[test]
    fn mismatched_dims_error() {
        let a = rect_bitmap((10, 10), 0, 0, 2, 2);
        let b = rect_bitmap((20, 10), 0, 0, 2, 2);
        assert!(a.union(&b).is_err());
        assert!(a.iou(&b).is_err());
    }

    #[test]
    fn bounds_touching_counts_as_intersecting() {
        let dims = (50, 50);
        let a = mask_of(rect_bitmap(dims, 0, 0, 10, 10));
        let b = mask_of(rect_bitmap(dims, 0, 10, 10, 10));
        assert!(a.bounds_intersect(&b));
        let far = mask_of(rect_bitmap(dims, 0, 30, 10, 10));
        assert!(!a.bounds_intersect(&far));
    }

    #[test]
    fn fuse_is_commutative_and_idempotent() {
        let dims = (50, 50);
        let a = mask_of(rect_bitmap(dims, 5, 5, 10, 10));
        let b = Mask::from_bitmap(rect_bitmap(dims, 10, 10, 10, 10), "roof", 0.4).unwrap();
        let ab = a.fuse(&b).unwrap();
        let ba = b.fuse(&a).unwrap();
        assert_eq!(ab.bitmap, ba.bitmap);
        assert_eq!(ab.area_px, ba.area_px);
        let aa = a.fuse(&a).unwrap();
        assert_eq!(aa.bitmap, a.bitmap);
        assert_eq!(aa.prompt, a.prompt);
    }
}
