use super::{BBox, BoxMap};
use crate::error::{Error, Result};

/// One pre-defined anchor per feature location.
#[derive(Clone, Debug, PartialEq)]
pub struct AnchorGrid {
    pub map: BoxMap,
    pub stride: usize,
    pub scale: f64,
    /// Row extent over column extent.
    pub ratio: f64,
}

/// Anchors centered on every cell, `((X + 0.5)·S, (Y + 0.5)·S)`, with area
/// `(scale·S)²` split between the axes by `ratio = extent_x / extent_y`.
pub fn make_anchor_grid(
    height: usize,
    width: usize,
    stride: usize,
    scale: f64,
    ratio: f64,
) -> Result<AnchorGrid> {
    if stride == 0 || !(scale > 0.0) || !(ratio > 0.0) {
        return Err(Error::Config(format!(
            "anchor parameters must be positive (stride {stride}, scale {scale}, ratio {ratio})"
        )));
    }
    let s = stride as f64;
    let side = scale * s;
    let extent_x = side * ratio.sqrt();
    let extent_y = side / ratio.sqrt();
    let boxes = (0..height * width)
        .map(|l| {
            let (x, y) = (l / width, l % width);
            BBox::from_center(
                (x as f64 + 0.5) * s,
                (y as f64 + 0.5) * s,
                extent_x,
                extent_y,
            )
        })
        .collect();
    Ok(AnchorGrid {
        map: BoxMap::new(height, width, boxes)?,
        stride,
        scale,
        ratio,
    })
}
