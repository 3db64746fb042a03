//! Normalized bounding boxes.
//!
//! Boxes store center/extent as fractions of image width and height, the
//! convention the label files use. Construction clamps the box to the unit
//! square and rejects boxes that end up empty.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Axis-aligned box in normalized image coordinates. `cx, cy` locate the
/// center; `w, h` are the full extents. Class 0 is the school class.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BBox {
    pub class_id: u32,
    pub cx: f64,
    pub cy: f64,
    pub w: f64,
    pub h: f64,
    /// Detector confidence in [0,1]; absent on ground-truth boxes.
    pub score: Option<f64>,
}

impl BBox {
    /// Builds a box, clamping its corners into [0,1]. The clamped box must
    /// retain positive width and height.
    pub fn new(class_id: u32, cx: f64, cy: f64, w: f64, h: f64) -> Result<Self> {
        for (name, v) in [("cx", cx), ("cy", cy), ("w", w), ("h", h)] {
            if !v.is_finite() {
                return Err(Error::InvalidInput(format!("box {name}={v} not finite")));
            }
        }
        if w <= 0.0 || h <= 0.0 {
            return Err(Error::InvalidInput(format!("box extent {w}x{h} must be positive")));
        }
        let x1 = cx - w / 2.0;
        let x2 = cx + w / 2.0;
        let y1 = cy - h / 2.0;
        let y2 = cy + h / 2.0;
        if x1 >= 0.0 && x2 <= 1.0 && y1 >= 0.0 && y2 <= 1.0 {
            // Already inside the unit square: keep the caller's exact values.
            return Ok(BBox { class_id, cx, cy, w, h, score: None });
        }
        let (x1, x2) = (x1.clamp(0.0, 1.0), x2.clamp(0.0, 1.0));
        let (y1, y2) = (y1.clamp(0.0, 1.0), y2.clamp(0.0, 1.0));
        if x2 - x1 <= 0.0 || y2 - y1 <= 0.0 {
            return Err(Error::InvalidInput(format!(
                "box ({cx},{cy},{w},{h}) clamps to zero area"
            )));
        }
        Ok(BBox {
            class_id,
            cx: (x1 + x2) / 2.0,
            cy: (y1 + y2) / 2.0,
            w: x2 - x1,
            h: y2 - y1,
            score: None,
        })
    }

    pub fn with_score(mut self, score: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&score) {
            return Err(Error::InvalidInput(format!("score {score} outside [0,1]")));
        }
        self.score = Some(score);
        Ok(self)
    }

    /// Corner form (x1, y1, x2, y2) in normalized coordinates.
    pub fn corners(&self) -> (f64, f64, f64, f64) {
        (
            self.cx - self.w / 2.0,
            self.cy - self.h / 2.0,
            self.cx + self.w / 2.0,
            self.cy + self.h / 2.0,
        )
    }

    /// Builds from normalized corner coordinates.
    pub fn from_corners(class_id: u32, x1: f64, y1: f64, x2: f64, y2: f64) -> Result<Self> {
        BBox::new(class_id, (x1 + x2) / 2.0, (y1 + y2) / 2.0, x2 - x1, y2 - y1)
    }

    /// Builds from pixel corner extents in an image of `width_px` x `height_px`.
    pub fn from_pixel_corners(
        class_id: u32,
        x1: f64,
        y1: f64,
        x2: f64,
        y2: f64,
        width_px: u32,
        height_px: u32,
    ) -> Result<Self> {
        if width_px == 0 || height_px == 0 {
            return Err(Error::InvalidInput("image dimensions must be positive".into()));
        }
        let wf = f64::from(width_px);
        let hf = f64::from(height_px);
        BBox::from_corners(class_id, x1 / wf, y1 / hf, x2 / wf, y2 / hf)
    }

    pub fn area(&self) -> f64 {
        self.w * self.h
    }

    /// Intersection-over-union with another box; 0 when disjoint.
    pub fn iou(&self, other: &BBox) -> f64 {
        let (ax1, ay1, ax2, ay2) = self.corners();
        let (bx1, by1, bx2, by2) = other.corners();
        let ix = (ax2.min(bx2) - ax1.max(bx1)).max(0.0);
        let iy = (ay2.min(by2) - ay1.max(by1)).max(0.0);
        let inter = ix * iy;
        let union = self.area() + other.area() - inter;
        if union <= 0.0 {
            0.0
        } else {
            inter / union
        }
    }
}
