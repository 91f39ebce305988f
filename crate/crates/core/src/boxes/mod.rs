//! Box algebra and detection bookkeeping.
//!
//! Coordinates are image pixels. `x` is the row axis and `y` the column
//! axis, the same pairing the convolution kernels use (`x` with kernel
//! height, `y` with kernel width).

mod analysis;
mod anchors;
mod assign;
mod coder;
mod nms;

pub use analysis::{alignment_histogram, decode_offsets_to_roi, Histogram};
pub use anchors::{make_anchor_grid, AnchorGrid};
pub use assign::{assign_labels, Label, LabelAssignment, Matcher};
pub use coder::{decode, encode, Delta, MAX_LOG_SCALE};
pub use nms::nms;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Axis-aligned rectangle `(x1, y1, x2, y2)`. Serializes as a JSON array.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(into = "[f64; 4]", try_from = "[f64; 4]")]
pub struct BBox {
    pub x1: f64,
    pub y1: f64,
    pub x2: f64,
    pub y2: f64,
}

impl BBox {
    pub fn new(x1: f64, y1: f64, x2: f64, y2: f64) -> Result<Self> {
        let b = Self { x1, y1, x2, y2 };
        b.validate()?;
        Ok(b)
    }

    pub fn from_center(cx: f64, cy: f64, extent_x: f64, extent_y: f64) -> Self {
        Self {
            x1: cx - 0.5 * extent_x,
            y1: cy - 0.5 * extent_y,
            x2: cx + 0.5 * extent_x,
            y2: cy + 0.5 * extent_y,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let finite = [self.x1, self.y1, self.x2, self.y2]
            .iter()
            .all(|v| v.is_finite());
        if !finite || self.x2 < self.x1 || self.y2 < self.y1 {
            return Err(Error::Contract(format!("invalid box {self:?}")));
        }
        Ok(())
    }

    pub fn extent_x(&self) -> f64 {
        self.x2 - self.x1
    }

    pub fn extent_y(&self) -> f64 {
        self.y2 - self.y1
    }

    pub fn area(&self) -> f64 {
        self.extent_x().max(0.0) * self.extent_y().max(0.0)
    }

    pub fn center(&self) -> (f64, f64) {
        (0.5 * (self.x1 + self.x2), 0.5 * (self.y1 + self.y2))
    }

    pub fn translate(&self, dx: f64, dy: f64) -> Self {
        Self {
            x1: self.x1 + dx,
            y1: self.y1 + dy,
            x2: self.x2 + dx,
            y2: self.y2 + dy,
        }
    }

    pub fn scale(&self, k: f64) -> Self {
        Self {
            x1: self.x1 * k,
            y1: self.y1 * k,
            x2: self.x2 * k,
            y2: self.y2 * k,
        }
    }

    /// Clamps into `[0, height] × [0, width]` and enforces a minimum extent.
    /// Boxes thinner than `min_extent` grow about their clamped center and
    /// are pushed back inside the image.
    pub fn clamp(&self, height: f64, width: f64, min_extent: f64) -> Self {
        let (x1, x2) = clamp_axis(self.x1, self.x2, height, min_extent);
        let (y1, y2) = clamp_axis(self.y1, self.y2, width, min_extent);
        Self { x1, y1, x2, y2 }
    }

    pub fn max_abs_diff(&self, other: &Self) -> f64 {
        [
            self.x1 - other.x1,
            self.y1 - other.y1,
            self.x2 - other.x2,
            self.y2 - other.y2,
        ]
        .iter()
        .fold(0.0f64, |m, d| m.max(d.abs()))
    }
}

fn clamp_axis(lo: f64, hi: f64, limit: f64, min_extent: f64) -> (f64, f64) {
    let min_extent = min_extent.min(limit);
    let (mut lo, mut hi) = (lo.clamp(0.0, limit), hi.clamp(0.0, limit));
    if hi - lo < min_extent {
        let c = 0.5 * (lo + hi);
        lo = (c - 0.5 * min_extent).clamp(0.0, limit - min_extent);
        hi = lo + min_extent;
    }
    (lo, hi)
}

impl From<BBox> for [f64; 4] {
    fn from(b: BBox) -> Self {
        [b.x1, b.y1, b.x2, b.y2]
    }
}

impl TryFrom<[f64; 4]> for BBox {
    type Error = Error;

    fn try_from(v: [f64; 4]) -> Result<Self> {
        BBox::new(v[0], v[1], v[2], v[3])
    }
}

/// Intersection over union; 0 when the union is empty.
pub fn iou(a: &BBox, b: &BBox) -> f64 {
    let ix = (a.x2.min(b.x2) - a.x1.max(b.x1)).max(0.0);
    let iy = (a.y2.min(b.y2) - a.y1.max(b.y1)).max(0.0);
    let inter = ix * iy;
    let union = a.area() + b.area() - inter;
    if union <= 0.0 {
        0.0
    } else {
        (inter / union).clamp(0.0, 1.0)
    }
}

/// One box per location of an `height × width` feature grid, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct BoxMap {
    pub height: usize,
    pub width: usize,
    pub boxes: Vec<BBox>,
}

impl BoxMap {
    pub fn new(height: usize, width: usize, boxes: Vec<BBox>) -> Result<Self> {
        if boxes.len() != height * width {
            return Err(Error::Shape(format!(
                "{} boxes for a {height}x{width} grid",
                boxes.len()
            )));
        }
        Ok(Self {
            height,
            width,
            boxes,
        })
    }

    pub fn at(&self, x: usize, y: usize) -> &BBox {
        &self.boxes[x * self.width + y]
    }
}

/// A scored, classified box. Serializes as `[x1, y1, x2, y2, score, class]`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(
    into = "(f64, f64, f64, f64, f64, usize)",
    try_from = "(f64, f64, f64, f64, f64, usize)"
)]
pub struct Detection {
    pub bbox: BBox,
    pub score: f64,
    pub class: usize,
}

impl From<Detection> for (f64, f64, f64, f64, f64, usize) {
    fn from(d: Detection) -> Self {
        (d.bbox.x1, d.bbox.y1, d.bbox.x2, d.bbox.y2, d.score, d.class)
    }
}

impl TryFrom<(f64, f64, f64, f64, f64, usize)> for Detection {
    type Error = Error;

    fn try_from(v: (f64, f64, f64, f64, f64, usize)) -> Result<Self> {
        Ok(Detection {
            bbox: BBox::new(v.0, v.1, v.2, v.3)?,
            score: v.4,
            class: v.5,
        })
    }
}
