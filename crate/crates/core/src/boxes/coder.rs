//! Box deltas relative to an anchor:
//! `(Δcx / ex_a, Δcy / ey_a, ln(ex / ex_a), ln(ey / ey_a))` where `ex`, `ey`
//! are the row and column extents.

use super::BBox;
use crate::error::{Error, Result};

pub type Delta = [f64; 4];

/// Upper bound on the log-scale deltas accepted by [`decode`], so that an
/// untrained regressor cannot overflow `exp`.
pub const MAX_LOG_SCALE: f64 = 4.135_166_556_742_356; // ln(1000 / 16)

pub fn encode(anchor: &BBox, gt: &BBox) -> Result<Delta> {
    let (ea_x, ea_y) = (anchor.extent_x(), anchor.extent_y());
    if !(ea_x > 0.0 && ea_y > 0.0) {
        return Err(Error::Contract(format!("anchor {anchor:?} has no area")));
    }
    let (eg_x, eg_y) = (gt.extent_x(), gt.extent_y());
    if !(eg_x > 0.0 && eg_y > 0.0) {
        return Err(Error::Domain(format!("ground truth {gt:?} has no area")));
    }
    let (ca_x, ca_y) = anchor.center();
    let (cg_x, cg_y) = gt.center();
    Ok([
        (cg_x - ca_x) / ea_x,
        (cg_y - ca_y) / ea_y,
        (eg_x / ea_x).ln(),
        (eg_y / ea_y).ln(),
    ])
}

/// Inverse of [`encode`]. The result is not clamped to any image.
pub fn decode(anchor: &BBox, delta: &Delta) -> BBox {
    let (ea_x, ea_y) = (anchor.extent_x(), anchor.extent_y());
    let (ca_x, ca_y) = anchor.center();
    let cx = ca_x + delta[0] * ea_x;
    let cy = ca_y + delta[1] * ea_y;
    let ex = ea_x * delta[2].min(MAX_LOG_SCALE).exp();
    let ey = ea_y * delta[3].min(MAX_LOG_SCALE).exp();
    BBox::from_center(cx, cy, ex, ey)
}
