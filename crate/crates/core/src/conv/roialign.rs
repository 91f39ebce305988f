use super::bilinear::Bracket;
use super::{FeatureMap, Kernel, SamplePoint};
use crate::boxes::BBox;
use crate::error::{shape_err, Result};
use crate::tensor::{Scalar, Tensor};

/// Sampling points of an `out_h × out_w` RoIAlign with one sample per bin,
/// in feature-grid coordinates of a map with the given stride. Row-major
/// over bins.
pub fn roialign_points(
    roi: &BBox,
    out_h: usize,
    out_w: usize,
    stride: usize,
) -> Result<Vec<SamplePoint>> {
    roi.validate()?;
    if out_h == 0 || out_w == 0 {
        return Err(shape_err!(
            "RoIAlign output must be non-empty, got {out_h}x{out_w}"
        ));
    }
    let s = stride as f64;
    let (h, w) = (out_h as f64, out_w as f64);
    let mut pts = Vec::with_capacity(out_h * out_w);
    for i in 0..out_h {
        let x = (h * roi.x1 + roi.extent_x() * (i as f64 + 0.5)) / (h * s);
        for j in 0..out_w {
            let y = (w * roi.y1 + roi.extent_y() * (j as f64 + 0.5)) / (w * s);
            pts.push(SamplePoint::new(x, y));
        }
    }
    Ok(pts)
}

/// RoIAlign with sampling ratio 1: bin `(i, j)` of the `C × out_h × out_w`
/// result is the bilinear sample at the bin center.
pub fn roialign<T: Scalar>(
    f: &FeatureMap<T>,
    roi: &BBox,
    out_h: usize,
    out_w: usize,
) -> Result<Tensor<T>> {
    let pts = roialign_points(roi, out_h, out_w, f.stride)?;
    let c_in = f.channels();
    let bins = out_h * out_w;
    let mut out = vec![T::zero(); c_in * bins];
    for (k, p) in pts.iter().enumerate() {
        let br = Bracket::new(SamplePoint::new(T::from_f64(p.x), T::from_f64(p.y)));
        for c in 0..c_in {
            out[c * bins + k] = br.sample(f, c);
        }
    }
    Tensor::from_vec(&[c_in, out_h, out_w], out)
}

/// The RoI whose RoIAlign sampling points coincide with the taps of an
/// `h × w` convolution at output `(x, y)` on a stride-`S` map.
pub fn implicit_roi(x: usize, y: usize, kernel: Kernel, stride: usize) -> BBox {
    let s = stride as f64;
    let x0 = x as f64 - kernel.half_h() as f64;
    let y0 = y as f64 - kernel.half_w() as f64;
    BBox {
        x1: x0 * s,
        y1: y0 * s,
        x2: (x0 + kernel.h as f64) * s,
        y2: (y0 + kernel.w as f64) * s,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::conv::{conv_forward, im2col, ConvSpec};
    use crate::rng::Rng;
    use crate::tensor::gemm;

    #[test]
    fn implicit_roi_examples() {
        let b = implicit_roi(10, 10, Kernel::square(3), 16);
        assert_eq!((b.x1, b.y1, b.x2, b.y2), (144.0, 144.0, 192.0, 192.0));
        assert_eq!((b.extent_x(), b.extent_y()), (48.0, 48.0));
        let unit = implicit_roi(0, 0, Kernel::square(1), 1);
        assert_eq!((unit.x1, unit.y1, unit.x2, unit.y2), (0.0, 0.0, 1.0, 1.0));
    }

    #[test]
    fn single_bin_examples() {
        let f = FeatureMap::new(
            Tensor::from_vec(&[1, 2, 2], vec![0.0, 1.0, 2.0, 3.0]).unwrap(),
            1,
        )
        .unwrap();
        let whole = roialign(&f, &BBox::new(0.0, 0.0, 2.0, 2.0).unwrap(), 1, 1).unwrap();
        assert_eq!(whole.data(), &[1.5]);
        let cell = roialign(&f, &BBox::new(1.0, 0.0, 2.0, 1.0).unwrap(), 1, 1).unwrap();
        assert_eq!(cell.data(), &[2.0]);
    }

    #[test]
    fn degenerate_roi_collapses_and_negative_rejected() {
        let f = FeatureMap::new(
            Tensor::from_vec(&[1, 2, 2], vec![0.0, 1.0, 2.0, 3.0]).unwrap(),
            1,
        )
        .unwrap();
        let point = roialign(&f, &BBox::new(1.0, 1.0, 1.0, 1.0).unwrap(), 2, 3).unwrap();
        assert!(point.data().iter().all(|&v| v == 1.5));
        let bad = BBox {
            x1: 1.0,
            y1: 0.0,
            x2: 0.0,
            y2: 1.0,
        };
        assert!(roialign(&f, &bad, 1, 1).is_err());
    }

    #[test]
    fn implicit_roi_reproduces_im2col_column() {
        let mut rng = Rng::new(11);
        let f =
            FeatureMap::new(Tensor::from_vec(&[2, 5, 4], rng.normal_vec(40)).unwrap(), 8).unwrap();
        let k = Kernel::new(3, 2);
        let cols = im2col(&f, k).unwrap();
        let spec = ConvSpec::gaussian(k, 2, 3, 1.0, 0.2, &mut rng);
        let conv = conv_forward(&f, &spec).unwrap();
        for x in 0..5 {
            for y in 0..4 {
                let tile = roialign(&f, &implicit_roi(x, y, k, 8), k.h, k.w).unwrap();
                for row in 0..cols.shape()[0] {
                    let a = cols.get(&[row, x * 4 + y]).unwrap();
                    assert!((a - tile.data()[row]).abs() <= 1e-12);
                }
                let fc = gemm(&spec.weights, &tile.reshape(&[12, 1]).unwrap()).unwrap();
                for co in 0..3 {
                    let v = fc.data()[co] + spec.bias.data()[co];
                    assert!((v - conv.get(&[co, x, y]).unwrap()).abs() <= 1e-10);
                }
            }
        }
    }
}
