use super::{FeatureMap, SamplePoint};
use crate::tensor::Scalar;

/// The four cells around a sample point and their interpolation fractions.
///
/// `a` and `b` lie in `(0, 1]`: at an exact cell center the point is
/// attributed to the segment *below* it (`a = 1`), which makes the value
/// exact and the gradient the left-hand limit.
#[derive(Clone, Copy, Debug)]
pub(crate) struct Bracket<T> {
    pub r0: isize,
    pub c0: isize,
    pub a: T,
    pub b: T,
}

impl<T: Scalar> Bracket<T> {
    #[inline]
    pub fn new(p: SamplePoint<T>) -> Self {
        let half = T::from_f64(0.5);
        let u = p.x - half;
        let v = p.y - half;
        let r0 = u.ceil() - T::one();
        let c0 = v.ceil() - T::one();
        Self {
            r0: r0.to_isize().unwrap_or(isize::MIN / 2),
            c0: c0.to_isize().unwrap_or(isize::MIN / 2),
            a: u - r0,
            b: v - c0,
        }
    }

    /// `[(row, col, weight)]` for the four corners.
    #[inline]
    pub fn corners(&self) -> [(isize, isize, T); 4] {
        let one = T::one();
        [
            (self.r0, self.c0, (one - self.a) * (one - self.b)),
            (self.r0, self.c0 + 1, (one - self.a) * self.b),
            (self.r0 + 1, self.c0, self.a * (one - self.b)),
            (self.r0 + 1, self.c0 + 1, self.a * self.b),
        ]
    }

    #[inline]
    pub fn sample(&self, f: &FeatureMap<T>, channel: usize) -> T {
        let mut acc = T::zero();
        for (r, c, wgt) in self.corners() {
            acc += wgt * f.value_or_zero(channel, r, c);
        }
        acc
    }

    /// `(∂v/∂x, ∂v/∂y)` of the interpolated value.
    #[inline]
    pub fn point_grad(&self, f: &FeatureMap<T>, channel: usize) -> (T, T) {
        let one = T::one();
        let v00 = f.value_or_zero(channel, self.r0, self.c0);
        let v01 = f.value_or_zero(channel, self.r0, self.c0 + 1);
        let v10 = f.value_or_zero(channel, self.r0 + 1, self.c0);
        let v11 = f.value_or_zero(channel, self.r0 + 1, self.c0 + 1);
        let dx = (one - self.b) * (v10 - v00) + self.b * (v11 - v01);
        let dy = (one - self.a) * (v01 - v00) + self.a * (v11 - v10);
        (dx, dy)
    }
}

/// Bilinear interpolation of one channel at a continuous point, reading
/// zeros outside the map.
pub fn bilinear_sample<T: Scalar>(f: &FeatureMap<T>, p: SamplePoint<T>, channel: usize) -> T {
    Bracket::new(p).sample(f, channel)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CellGrad<T> {
    pub row: usize,
    pub col: usize,
    pub grad: T,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BilinearGrads<T> {
    /// Gradient reaching each in-bounds corner cell; `None` for corners off the map.
    pub cells: [Option<CellGrad<T>>; 4],
    pub dx: T,
    pub dy: T,
}

/// Gradients of `upstream · bilinear_sample(f, p, channel)` with respect to
/// the four corner cells and to the point itself.
pub fn bilinear_grads<T: Scalar>(
    f: &FeatureMap<T>,
    p: SamplePoint<T>,
    channel: usize,
    upstream: T,
) -> BilinearGrads<T> {
    let br = Bracket::new(p);
    let (h, w) = (f.height() as isize, f.width() as isize);
    let corners = br.corners();
    let cells = std::array::from_fn(|k| {
        let (r, c, wgt) = corners[k];
        (r >= 0 && c >= 0 && r < h && c < w).then(|| CellGrad {
            row: r as usize,
            col: c as usize,
            grad: wgt * upstream,
        })
    });
    let (dx, dy) = br.point_grad(f, channel);
    BilinearGrads {
        cells,
        dx: dx * upstream,
        dy: dy * upstream,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numdiff::{central_difference, relative_error};
    use crate::rng::Rng;
    use crate::tensor::Tensor;

    fn map(h: usize, w: usize, data: Vec<f64>) -> FeatureMap {
        FeatureMap::new(Tensor::from_vec(&[1, h, w], data).unwrap(), 1).unwrap()
    }

    #[test]
    fn cell_centers_are_exact() {
        let mut rng = Rng::new(8);
        let f = map(4, 3, rng.normal_vec(12));
        for r in 0..4 {
            for c in 0..3 {
                let v = bilinear_sample(&f, SamplePoint::new(r as f64 + 0.5, c as f64 + 0.5), 0);
                assert_eq!(v, f.tensor.get(&[0, r, c]).unwrap());
            }
        }
    }

    #[test]
    fn hand_interpolation_and_padding() {
        let f = map(2, 2, vec![0.0, 1.0, 2.0, 3.0]);
        assert_eq!(bilinear_sample(&f, SamplePoint::new(1.0, 1.0), 0), 1.5);
        assert_eq!(bilinear_sample(&f, SamplePoint::new(-5.0, -5.0), 0), 0.0);
        // halfway between the last cell center and the padding
        assert_eq!(bilinear_sample(&f, SamplePoint::new(2.0, 1.5), 0), 1.5);
    }

    #[test]
    fn flat_field_and_zero_upstream() {
        let f = map(3, 3, vec![2.0; 9]);
        let g = bilinear_grads(&f, SamplePoint::new(1.3, 1.7), 0, 1.0);
        assert_eq!((g.dx, g.dy), (0.0, 0.0));
        let mut rng = Rng::new(9);
        let f = map(3, 3, rng.normal_vec(9));
        let g = bilinear_grads(&f, SamplePoint::new(1.3, 0.2), 0, 0.0);
        assert_eq!((g.dx, g.dy), (0.0, 0.0));
        assert!(g.cells.iter().flatten().all(|c| c.grad == 0.0));
        // corner column -1 is off the map
        assert_eq!(g.cells.iter().flatten().count(), 2);
    }

    #[test]
    fn gridline_uses_left_limit() {
        let f = map(3, 1, vec![0.0, 1.0, 5.0]);
        // exactly on the center of row 1: slope of the segment from row 0
        let g = bilinear_grads(&f, SamplePoint::new(1.5, 0.5), 0, 1.0);
        assert_eq!(g.dx, 1.0);
    }

    #[test]
    fn matches_finite_differences() {
        let mut rng = Rng::new(10);
        let f = map(5, 6, rng.normal_vec(30));
        let mut checked = 0;
        while checked < 100 {
            let p = SamplePoint::new(rng.uniform_in(-1.0, 6.0), rng.uniform_in(-1.0, 7.0));
            let near_grid = |v: f64| ((v - 0.5) - (v - 0.5).round()).abs() < 1e-3;
            if near_grid(p.x) || near_grid(p.y) {
                continue;
            }
            checked += 1;
            let up = rng.normal();
            let g = bilinear_grads(&f, p, 0, up);
            let nx = central_difference(p.x, 1e-5, |x| {
                up * bilinear_sample(&f, SamplePoint::new(x, p.y), 0)
            });
            let ny = central_difference(p.y, 1e-5, |y| {
                up * bilinear_sample(&f, SamplePoint::new(p.x, y), 0)
            });
            assert!(relative_error(g.dx, nx) <= 1e-6, "{} vs {}", g.dx, nx);
            assert!(relative_error(g.dy, ny) <= 1e-6);
            for cell in g.cells.iter().flatten() {
                let mut data = f.tensor.data().to_vec();
                let idx = cell.row * 6 + cell.col;
                let num = central_difference(data[idx], 1e-5, |v| {
                    data[idx] = v;
                    up * bilinear_sample(&map(5, 6, data.clone()), p, 0)
                });
                assert!(relative_error(cell.grad, num) <= 1e-6);
            }
        }
    }
}
