//! Synthetic detection scenes: filled rectangles on a noisy background,
//! labelled by aspect ratio.

use serde::{Deserialize, Serialize};

use crate::boxes::{iou, BBox};
use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::Tensor;

pub const MIN_EXTENT: usize = 8;
pub const MAX_EXTENT: usize = 48;
pub const MAX_OBJECTS: usize = 3;
/// Largest IoU allowed between two ground truths of one scene.
pub const MAX_GT_IOU: f64 = 0.3;
const ATTEMPTS_PER_OBJECT: usize = 200;
/// Grey levels are stored as bytes and scaled by this factor.
pub const LEVEL_SCALE: f64 = 1.0 / 255.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ShapeClass {
    Tall,
    Square,
    Wide,
}

impl ShapeClass {
    pub const ALL: [ShapeClass; 3] = [ShapeClass::Tall, ShapeClass::Square, ShapeClass::Wide];
    pub const COUNT: usize = 3;

    /// Tall when rows/cols > 1.5, wide when < 1/1.5, square otherwise.
    pub fn of(bbox: &BBox) -> Self {
        let r = bbox.extent_x() / bbox.extent_y();
        if r > 1.5 {
            ShapeClass::Tall
        } else if r < 1.0 / 1.5 {
            ShapeClass::Wide
        } else {
            ShapeClass::Square
        }
    }

    pub fn index(&self) -> usize {
        *self as usize
    }

    pub fn from_index(i: usize) -> Option<Self> {
        Self::ALL.get(i).copied()
    }

    /// Aspect ratios the generator draws from, kept clear of the class
    /// boundaries so the label is never ambiguous.
    fn ratio_band(&self) -> (f64, f64) {
        match self {
            ShapeClass::Tall => (1.8, 3.0),
            ShapeClass::Square => (0.85, 1.18),
            ShapeClass::Wide => (1.0 / 3.0, 1.0 / 1.8),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub bbox: BBox,
    pub class: ShapeClass,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticScene {
    pub size: usize,
    /// Row-major grey levels; the image is `levels · LEVEL_SCALE`.
    pub levels: Vec<u8>,
    pub objects: Vec<GroundTruth>,
}

impl SyntheticScene {
    /// `[1 × size × size]` image tensor.
    pub fn image(&self) -> Tensor {
        Tensor::from_vec(
            &[1, self.size, self.size],
            self.levels
                .iter()
                .map(|&l| f64::from(l) * LEVEL_SCALE)
                .collect(),
        )
        .expect("levels match the image size")
    }

    pub fn gt_boxes(&self) -> Vec<BBox> {
        self.objects.iter().map(|o| o.bbox).collect()
    }

    /// Checks the scene invariants: boxes inside the canvas, extents in
    /// range, classes consistent with the box shapes, low mutual overlap.
    pub fn validate(&self) -> Result<()> {
        if self.levels.len() != self.size * self.size {
            return Err(Error::Shape(format!(
                "{} levels for a {0}x{0} image",
                self.size
            )));
        }
        let lim = self.size as f64;
        for (k, o) in self.objects.iter().enumerate() {
            let b = &o.bbox;
            if b.x1 < 0.0 || b.y1 < 0.0 || b.x2 > lim || b.y2 > lim {
                return Err(Error::Contract(format!(
                    "object {k} {b:?} leaves the canvas"
                )));
            }
            for e in [b.extent_x(), b.extent_y()] {
                if !(MIN_EXTENT as f64..=MAX_EXTENT as f64).contains(&e) {
                    return Err(Error::Contract(format!("object {k} has extent {e}")));
                }
            }
            if ShapeClass::of(b) != o.class {
                return Err(Error::Contract(format!(
                    "object {k} labelled {:?} but shaped otherwise",
                    o.class
                )));
            }
            for other in &self.objects[..k] {
                if iou(b, &other.bbox) > MAX_GT_IOU {
                    return Err(Error::Contract(format!(
                        "object {k} overlaps an earlier object"
                    )));
                }
            }
        }
        Ok(())
    }
}

fn sample_object(rng: &mut Rng, size: usize) -> Option<GroundTruth> {
    let class = ShapeClass::ALL[rng.range(0, ShapeClass::COUNT)];
    let (lo, hi) = class.ratio_band();
    let ratio = (lo.ln() + (hi.ln() - lo.ln()) * rng.uniform()).exp();
    let side = rng.uniform_in(MIN_EXTENT as f64, MAX_EXTENT as f64);
    let ex = (side * ratio.sqrt()).round() as usize;
    let ey = (side / ratio.sqrt()).round() as usize;
    let in_range = |e: usize| (MIN_EXTENT..=MAX_EXTENT.min(size)).contains(&e);
    if !in_range(ex) || !in_range(ey) {
        return None;
    }
    let x1 = rng.range(0, size - ex + 1);
    let y1 = rng.range(0, size - ey + 1);
    let bbox = BBox::new(x1 as f64, y1 as f64, (x1 + ex) as f64, (y1 + ey) as f64).ok()?;
    let r = bbox.extent_x() / bbox.extent_y();
    // rounding may leave the band; the class must still be unambiguous
    if ShapeClass::of(&bbox) != class || r < lo * 0.95 || r > hi * 1.05 {
        return None;
    }
    Some(GroundTruth { bbox, class })
}

/// One scene of `size × size` pixels with 1 to 3 objects. Objects are drawn
/// by rejection sampling; if an object cannot be placed within a bounded
/// number of attempts the scene keeps fewer objects.
pub fn generate_scene(rng: &mut Rng, size: usize) -> SyntheticScene {
    let wanted = rng.range(1, MAX_OBJECTS + 1);
    let mut objects: Vec<GroundTruth> = Vec::with_capacity(wanted);
    for _ in 0..wanted {
        for _ in 0..ATTEMPTS_PER_OBJECT {
            if let Some(o) = sample_object(rng, size) {
                if objects.iter().all(|p| iou(&p.bbox, &o.bbox) <= MAX_GT_IOU) {
                    objects.push(o);
                    break;
                }
            }
        }
    }
    let mut levels: Vec<u8> = (0..size * size).map(|_| rng.range(0, 64) as u8).collect();
    for o in &objects {
        let base = rng.range(128, 231) as i32;
        let b = o.bbox;
        for r in b.x1 as usize..b.x2 as usize {
            for c in b.y1 as usize..b.y2 as usize {
                let v = base + rng.range(0, 51) as i32 - 25;
                levels[r * size + c] = v.clamp(0, 255) as u8;
            }
        }
    }
    SyntheticScene {
        size,
        levels,
        objects,
    }
}

/// Train and evaluation splits use disjoint RNG streams of the same seed.
pub const EVAL_STREAM_BASE: u64 = 1 << 32;

pub fn make_dataset(seed: u64, count: usize, size: usize, eval_split: bool) -> Vec<SyntheticScene> {
    let base = if eval_split { EVAL_STREAM_BASE } else { 0 };
    (0..count as u64)
        .map(|i| generate_scene(&mut Rng::derive(seed, base + i), size))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn deterministic() {
        let a = generate_scene(&mut Rng::new(9), 64);
        let b = generate_scene(&mut Rng::new(9), 64);
        assert_eq!(a, b);
        assert_ne!(a, generate_scene(&mut Rng::new(10), 64));
    }

    #[test]
    fn invariants_over_many_scenes() {
        let mut rng = Rng::new(1);
        let mut counts = [0usize; 3];
        for _ in 0..1000 {
            let s = generate_scene(&mut rng, 64);
            s.validate().unwrap();
            assert!((1..=MAX_OBJECTS).contains(&s.objects.len()));
            for o in &s.objects {
                counts[o.class.index()] += 1;
            }
        }
        assert!(counts.iter().all(|&c| c > 300), "{counts:?}");
    }

    #[test]
    fn classification_bands() {
        let b = |ex: f64, ey: f64| ShapeClass::of(&BBox::new(0.0, 0.0, ex, ey).unwrap());
        assert_eq!(b(30.0, 10.0), ShapeClass::Tall);
        assert_eq!(b(15.0, 10.0), ShapeClass::Square);
        assert_eq!(b(10.0, 15.0), ShapeClass::Square);
        assert_eq!(b(10.0, 16.0), ShapeClass::Wide);
    }

    #[test]
    fn objects_are_brighter_than_background() {
        let s = generate_scene(&mut Rng::new(4), 64);
        let o = s.objects[0].bbox;
        let inside = s.levels[o.x1 as usize * 64 + o.y1 as usize];
        assert!(inside >= 103);
        assert_eq!(s.image().shape(), &[1, 64, 64]);
    }
}
