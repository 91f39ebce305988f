//! Feature/anchor alignment analysis: recover the RoI a set of sampling
//! points implies, and histogram its IoU against the anchors.

use std::fmt::Write as _;

use serde::Serialize;

use super::{iou, BBox};
use crate::conv::Kernel;
use crate::error::{shape_err, Error, Result};

/// The RoI implied by one location's (possibly deformed) sampling points.
///
/// Takes the circumscribed rectangle of the `h·w` points, widens it by half
/// the mean tap spacing on each side, and scales to image pixels. The mean
/// spacing along an axis is `(max − min) / (taps − 1)`, or one cell for a
/// single tap. With zero offsets this returns the convolution's implicit
/// RoI; with RoIConv offsets it returns the generating anchor, provided the
/// kernel has at least two taps along each axis.
pub fn decode_offsets_to_roi(
    offsets: &[f64],
    kernel: Kernel,
    x: usize,
    y: usize,
    stride: usize,
) -> Result<BBox> {
    if offsets.len() != 2 * kernel.taps() {
        return Err(shape_err!(
            "{} offsets for a {}x{} kernel, expected {}",
            offsets.len(),
            kernel.h,
            kernel.w,
            2 * kernel.taps()
        ));
    }
    let (mut min_x, mut max_x) = (f64::INFINITY, f64::NEG_INFINITY);
    let (mut min_y, mut max_y) = (f64::INFINITY, f64::NEG_INFINITY);
    for i in 0..kernel.h {
        for j in 0..kernel.w {
            let t = 2 * (i * kernel.w + j);
            let (px, py) = kernel.tap_point(x, y, i, j);
            let (px, py) = (px + offsets[t], py + offsets[t + 1]);
            min_x = min_x.min(px);
            max_x = max_x.max(px);
            min_y = min_y.min(py);
            max_y = max_y.max(py);
        }
    }
    let spacing = |lo: f64, hi: f64, taps: usize| {
        if taps > 1 {
            (hi - lo) / (taps - 1) as f64
        } else {
            1.0
        }
    };
    let half_x = 0.5 * spacing(min_x, max_x, kernel.h);
    let half_y = 0.5 * spacing(min_y, max_y, kernel.w);
    let s = stride as f64;
    Ok(BBox {
        x1: (min_x - half_x) * s,
        y1: (min_y - half_y) * s,
        x2: (max_x + half_x) * s,
        y2: (max_y + half_y) * s,
    })
}

/// IoU counts over `[0, 1]` in equal bins; the last bin is closed on the right.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Histogram {
    pub bin_width: f64,
    pub counts: Vec<usize>,
    pub mean: f64,
    pub min: f64,
}

impl Histogram {
    pub fn total(&self) -> usize {
        self.counts.iter().sum()
    }

    pub fn bin_range(&self, k: usize) -> (f64, f64) {
        let lo = k as f64 * self.bin_width;
        (lo, ((k + 1) as f64 * self.bin_width).min(1.0))
    }

    /// `bin_lo,bin_hi,count` rows with a header line.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("bin_lo,bin_hi,count\n");
        for (k, c) in self.counts.iter().enumerate() {
            let (lo, hi) = self.bin_range(k);
            writeln!(out, "{lo:.4},{hi:.4},{c}").expect("write to string");
        }
        out
    }
}

pub fn alignment_histogram(
    implicit_rois: &[BBox],
    anchors: &[BBox],
    bin_width: f64,
) -> Result<Histogram> {
    if !(bin_width > 0.0 && bin_width <= 1.0) {
        return Err(Error::Config(format!(
            "bin width must lie in (0, 1], got {bin_width}"
        )));
    }
    if implicit_rois.len() != anchors.len() {
        return Err(shape_err!(
            "{} RoIs vs {} anchors",
            implicit_rois.len(),
            anchors.len()
        ));
    }
    let bins = ((1.0 / bin_width) - 1e-9).ceil() as usize;
    let mut counts = vec![0usize; bins];
    let (mut sum, mut min) = (0.0, f64::INFINITY);
    for (r, a) in implicit_rois.iter().zip(anchors) {
        let v = iou(r, a);
        sum += v;
        min = min.min(v);
        let k = ((v / bin_width) as usize).min(bins - 1);
        counts[k] += 1;
    }
    let n = anchors.len();
    Ok(Histogram {
        bin_width,
        counts,
        mean: if n > 0 { sum / n as f64 } else { 0.0 },
        min: if n > 0 { min } else { 0.0 },
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::boxes::make_anchor_grid;
    use crate::conv::{implicit_roi, roiconv_offsets_at};
    use crate::rng::Rng;

    #[test]
    fn zero_offsets_recover_implicit_roi() {
        for &(kh, kw, s) in &[(3, 3, 16), (1, 1, 8), (2, 5, 4)] {
            let k = Kernel::new(kh, kw);
            let roi = decode_offsets_to_roi(&vec![0.0; 2 * k.taps()], k, 3, 2, s).unwrap();
            assert_eq!(roi, implicit_roi(3, 2, k, s));
        }
    }

    #[test]
    fn unit_row_shift_moves_by_one_stride() {
        let k = Kernel::square(3);
        let offs: Vec<f64> = (0..18)
            .map(|c| if c % 2 == 0 { 1.0 } else { 0.0 })
            .collect();
        let roi = decode_offsets_to_roi(&offs, k, 4, 4, 16).unwrap();
        assert_eq!(roi, implicit_roi(4, 4, k, 16).translate(16.0, 0.0));
    }

    #[test]
    fn round_trips_roiconv_offsets() {
        let mut rng = Rng::new(50);
        for _ in 0..500 {
            let k = Kernel::new(rng.range(2, 8), rng.range(2, 8));
            let s = [4, 8, 16, 32][rng.range(0, 4)];
            let (x, y) = (rng.range(0, 12), rng.range(0, 12));
            let x1 = rng.uniform_in(-100.0, 300.0);
            let y1 = rng.uniform_in(-100.0, 300.0);
            let b = BBox::new(
                x1,
                y1,
                x1 + rng.uniform_in(0.5, 400.0),
                y1 + rng.uniform_in(0.5, 400.0),
            )
            .unwrap();
            let offs = roiconv_offsets_at(&b, k, x, y, s).unwrap();
            let back = decode_offsets_to_roi(&offs, k, x, y, s).unwrap();
            assert!(back.max_abs_diff(&b) <= 1e-9, "{b:?} -> {back:?}");
        }
    }

    #[test]
    fn histograms() {
        let k = Kernel::square(3);
        let anchors = make_anchor_grid(5, 5, 16, 4.0, 1.0).unwrap().map.boxes;
        let rois: Vec<BBox> = (0..25).map(|l| implicit_roi(l / 5, l % 5, k, 16)).collect();
        let h = alignment_histogram(&rois, &anchors, 0.05).unwrap();
        assert_eq!(h.counts.len(), 20);
        assert_eq!(h.counts[11], 25); // 0.5625 falls in [0.55, 0.60)
        assert!((h.mean - 0.5625).abs() < 1e-12);

        let same = alignment_histogram(&anchors, &anchors, 0.05).unwrap();
        assert_eq!(same.counts[19], 25);
        assert_eq!(same.total(), 25);
        assert!(alignment_histogram(&anchors, &anchors, 0.0).is_err());
        assert!(alignment_histogram(&anchors, &anchors, 1.5).is_err());
        assert!(alignment_histogram(&anchors[..3], &anchors, 0.1).is_err());
        assert!(same
            .to_csv()
            .starts_with("bin_lo,bin_hi,count\n0.0000,0.0500,0\n"));
        assert_eq!(
            alignment_histogram(&anchors, &anchors, 0.3)
                .unwrap()
                .counts
                .len(),
            4
        );
    }
}
