//! Analytic offsets that turn a deformable convolution into RoIConv.
//!
//! For an anchor `(x1, y1, x2, y2)` at output `(X, Y)` of a stride-`S` map,
//! tap `(i, j)` is moved from its convolution position onto the RoIAlign
//! sampling point of the anchor:
//!
//! ```text
//! O_x(i) = x1/S − X + ⌊h/2⌋ + ((x2 − x1)/(h·S) − 1)(i + 0.5)
//! O_y(j) = y1/S − Y + ⌊w/2⌋ + ((y2 − y1)/(w·S) − 1)(j + 0.5)
//! ```
//!
//! Both are affine in `(x1, y1, x2, y2, X, Y)`, i.e. a 1×1 convolution over
//! the anchor map plus a constant, so generating them costs nothing
//! comparable to the convolution itself.

use super::{Kernel, OffsetField};
use crate::boxes::{BBox, BoxMap};
use crate::error::Result;
use crate::tensor::{Scalar, Tensor};

/// Offsets for a single location, in [`OffsetField`] channel order.
pub fn roiconv_offsets_at(
    anchor: &BBox,
    kernel: Kernel,
    x: usize,
    y: usize,
    stride: usize,
) -> Result<Vec<f64>> {
    anchor.validate()?;
    let s = stride as f64;
    let bin_x = anchor.extent_x() / (kernel.h as f64 * s) - 1.0;
    let bin_y = anchor.extent_y() / (kernel.w as f64 * s) - 1.0;
    let base_x = anchor.x1 / s - x as f64 + kernel.half_h() as f64;
    let base_y = anchor.y1 / s - y as f64 + kernel.half_w() as f64;
    let mut out = Vec::with_capacity(2 * kernel.taps());
    for i in 0..kernel.h {
        let ox = base_x + bin_x * (i as f64 + 0.5);
        for j in 0..kernel.w {
            out.push(ox);
            out.push(base_y + bin_y * (j as f64 + 0.5));
        }
    }
    Ok(out)
}

/// Offset field aligning every location's taps with its anchor's RoIAlign
/// sampling points. Rejects anchors with negative extent.
pub fn roiconv_offsets<T: Scalar>(
    anchors: &BoxMap,
    kernel: Kernel,
    stride: usize,
) -> Result<OffsetField<T>> {
    let (h, w) = (anchors.height, anchors.width);
    let plane = h * w;
    let mut data = vec![T::zero(); 2 * kernel.taps() * plane];
    for x in 0..h {
        for y in 0..w {
            let loc = x * w + y;
            let offs = roiconv_offsets_at(anchors.at(x, y), kernel, x, y, stride)?;
            for (ch, v) in offs.into_iter().enumerate() {
                data[ch * plane + loc] = T::from_f64(v);
            }
        }
    }
    OffsetField::new(Tensor::from_vec(&[2 * kernel.taps(), h, w], data)?, kernel)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::conv::{
        conv_forward, deform_conv_forward, deform_sample_points, implicit_roi, roialign_points,
        ConvSpec, FeatureMap,
    };
    use crate::rng::Rng;

    fn implicit_map(h: usize, w: usize, k: Kernel, s: usize) -> BoxMap {
        let boxes = (0..h * w)
            .map(|l| implicit_roi(l / w, l % w, k, s))
            .collect();
        BoxMap::new(h, w, boxes).unwrap()
    }

    #[test]
    fn hand_derived_offsets() {
        let k = Kernel::new(3, 1);
        let a = BBox::new(0.0, 16.0, 96.0, 32.0).unwrap();
        let offs = roiconv_offsets_at(&a, k, 1, 1, 16).unwrap();
        let ox: Vec<f64> = offs.iter().step_by(2).copied().collect();
        assert_eq!(ox, vec![0.5, 1.5, 2.5]);
        let doubled = BBox::new(0.0, 16.0, 192.0, 32.0).unwrap();
        assert_eq!(roiconv_offsets_at(&doubled, k, 1, 1, 16).unwrap()[0], 1.5);
    }

    #[test]
    fn implicit_roi_gives_zero_offsets() {
        for &(kh, kw, s) in &[(3, 3, 16), (2, 4, 8), (5, 5, 1), (1, 1, 4)] {
            let k = Kernel::new(kh, kw);
            let off: OffsetField = roiconv_offsets(&implicit_map(4, 5, k, s), k, s).unwrap();
            assert!(off.tensor.data().iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn identity_through_deform_conv() {
        let mut rng = Rng::new(30);
        let k = Kernel::square(3);
        let f =
            FeatureMap::new(Tensor::from_vec(&[2, 5, 6], rng.normal_vec(60)).unwrap(), 8).unwrap();
        let spec = ConvSpec::gaussian(k, 2, 3, 1.0, 0.1, &mut rng);
        let off = roiconv_offsets(&implicit_map(5, 6, k, 8), k, 8).unwrap();
        let a = deform_conv_forward(&f, &spec, &off).unwrap();
        assert!(a.max_abs_diff(&conv_forward(&f, &spec).unwrap()).unwrap() <= 1e-12);
    }

    #[test]
    fn samples_land_on_roialign_points() {
        let mut rng = Rng::new(31);
        let k = Kernel::new(3, 5);
        let (h, w, s) = (4, 4, 16);
        let boxes: Vec<BBox> = (0..h * w)
            .map(|_| {
                let x1 = rng.uniform_in(-20.0, 60.0);
                let y1 = rng.uniform_in(-20.0, 60.0);
                BBox::new(
                    x1,
                    y1,
                    x1 + rng.uniform_in(0.0, 90.0),
                    y1 + rng.uniform_in(0.0, 90.0),
                )
                .unwrap()
            })
            .collect();
        let map = BoxMap::new(h, w, boxes).unwrap();
        let off: OffsetField = roiconv_offsets(&map, k, s).unwrap();
        for x in 0..h {
            for y in 0..w {
                let got = deform_sample_points(&off, x, y);
                let want = roialign_points(map.at(x, y), k.h, k.w, s).unwrap();
                for (g, e) in got.iter().zip(&want) {
                    assert!((g.x - e.x).abs() <= 1e-9 && (g.y - e.y).abs() <= 1e-9);
                }
            }
        }
    }

    #[test]
    fn negative_extent_rejected() {
        let bad = BBox {
            x1: 5.0,
            y1: 0.0,
            x2: 4.0,
            y2: 3.0,
        };
        let map = BoxMap::new(1, 1, vec![bad]).unwrap();
        assert!(roiconv_offsets::<f64>(&map, Kernel::square(3), 8).is_err());
    }

    #[test]
    fn offsets_are_affine_in_anchor_and_location() {
        let mut rng = Rng::new(32);
        let k = Kernel::square(3);
        let s = 8;
        let zero_at = |x: usize, y: usize| implicit_roi(x, y, k, s);
        for _ in 0..50 {
            let (x, y) = (rng.range(0, 10), rng.range(0, 10));
            let base = zero_at(x, y);
            let d1 = [
                rng.normal(),
                rng.normal(),
                5.0 + rng.uniform(),
                5.0 + rng.uniform(),
            ];
            let d2 = [
                rng.normal(),
                rng.normal(),
                5.0 + rng.uniform(),
                5.0 + rng.uniform(),
            ];
            let shifted = |d: &[f64; 4]| BBox {
                x1: base.x1 + d[0],
                y1: base.y1 + d[1],
                x2: base.x2 + d[2],
                y2: base.y2 + d[3],
            };
            let sum: [f64; 4] = std::array::from_fn(|i| d1[i] + d2[i]);
            let o1 = roiconv_offsets_at(&shifted(&d1), k, x, y, s).unwrap();
            let o2 = roiconv_offsets_at(&shifted(&d2), k, x, y, s).unwrap();
            let o12 = roiconv_offsets_at(&shifted(&sum), k, x, y, s).unwrap();
            for c in 0..o1.len() {
                assert!((o12[c] - o1[c] - o2[c]).abs() < 1e-12);
            }
            // moving the output location by one row shifts every Δx by −1
            let moved = roiconv_offsets_at(&shifted(&d1), k, x + 1, y, s).unwrap();
            for c in (0..o1.len()).step_by(2) {
                assert!((moved[c] - (o1[c] - 1.0)).abs() < 1e-12);
                assert_eq!(moved[c + 1], o1[c + 1]);
            }
        }
    }
}
