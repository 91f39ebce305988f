use super::{check_kernel_fits, ConvSpec, FeatureMap, Kernel};
use crate::error::{shape_err, Result};
use crate::tensor::{gemm, gemm_nt, gemm_tn, Scalar, Tensor};

/// Gradients of a convolution with respect to its input and parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct ConvGrads<T = f64> {
    pub input: Tensor<T>,
    pub weights: Tensor<T>,
    pub bias: Tensor<T>,
}

/// Unfolds `f` into a `(Cin·h·w) × (H·W)` matrix. Column `X·W + Y` holds the
/// tile read by output `(X, Y)`; row `(c·h + i)·w + j` is tap `(i, j)` of
/// channel `c`. Taps that fall off the map read zero.
pub fn im2col<T: Scalar>(f: &FeatureMap<T>, kernel: Kernel) -> Result<Tensor<T>> {
    let (c_in, h, w) = f.dims();
    check_kernel_fits(kernel, h, w)?;
    let hw = h * w;
    let (kh, kw) = (kernel.half_h() as isize, kernel.half_w() as isize);
    let src = f.tensor.data();
    let mut cols = vec![T::zero(); c_in * kernel.taps() * hw];
    for c in 0..c_in {
        let plane = &src[c * hw..(c + 1) * hw];
        for i in 0..kernel.h {
            for j in 0..kernel.w {
                let row = (c * kernel.h + i) * kernel.w + j;
                let dst = &mut cols[row * hw..(row + 1) * hw];
                for x in 0..h {
                    let r = x as isize - kh + i as isize;
                    if r < 0 || r >= h as isize {
                        continue;
                    }
                    for y in 0..w {
                        let col = y as isize - kw + j as isize;
                        if col >= 0 && col < w as isize {
                            dst[x * w + y] = plane[r as usize * w + col as usize];
                        }
                    }
                }
            }
        }
    }
    Tensor::from_vec(&[c_in * kernel.taps(), hw], cols)
}

/// Adjoint of [`im2col`]: scatter-adds every column entry back onto the
/// input cell it was read from. Entries that came from padding are dropped.
pub fn col2im<T: Scalar>(
    cols: &Tensor<T>,
    shape: (usize, usize, usize),
    kernel: Kernel,
) -> Result<Tensor<T>> {
    let (c_in, h, w) = shape;
    check_kernel_fits(kernel, h, w)?;
    let hw = h * w;
    if cols.shape() != [c_in * kernel.taps(), hw] {
        return Err(shape_err!(
            "columns {:?} do not match im2col of {:?} with a {}x{} kernel",
            cols.shape(),
            shape,
            kernel.h,
            kernel.w
        ));
    }
    let (kh, kw) = (kernel.half_h() as isize, kernel.half_w() as isize);
    let src = cols.data();
    let mut out = vec![T::zero(); c_in * hw];
    for c in 0..c_in {
        let plane = &mut out[c * hw..(c + 1) * hw];
        for i in 0..kernel.h {
            for j in 0..kernel.w {
                let row = (c * kernel.h + i) * kernel.w + j;
                let col_row = &src[row * hw..(row + 1) * hw];
                for x in 0..h {
                    let r = x as isize - kh + i as isize;
                    if r < 0 || r >= h as isize {
                        continue;
                    }
                    for y in 0..w {
                        let col = y as isize - kw + j as isize;
                        if col >= 0 && col < w as isize {
                            plane[r as usize * w + col as usize] += col_row[x * w + y];
                        }
                    }
                }
            }
        }
    }
    Tensor::from_vec(&[c_in, h, w], out)
}

pub(crate) fn check_channels<T: Scalar>(f: &FeatureMap<T>, spec: &ConvSpec<T>) -> Result<()> {
    if f.channels() != spec.in_channels {
        return Err(shape_err!(
            "feature map has {} channels, convolution expects {}",
            f.channels(),
            spec.in_channels
        ));
    }
    Ok(())
}

/// `W · cols + b`, reshaped to `Cout × H × W`.
pub(crate) fn apply_fc<T: Scalar>(
    spec: &ConvSpec<T>,
    cols: &Tensor<T>,
    h: usize,
    w: usize,
) -> Result<Tensor<T>> {
    let mut out = gemm(&spec.weights, cols)?;
    let hw = h * w;
    for (row, &b) in out.data_mut().chunks_mut(hw).zip(spec.bias.data()) {
        for v in row {
            *v += b;
        }
    }
    out.reshape(&[spec.out_channels, h, w])
}

/// Stride-1 "same" convolution computed as im2col followed by a GEMM.
pub fn conv_forward<T: Scalar>(f: &FeatureMap<T>, spec: &ConvSpec<T>) -> Result<Tensor<T>> {
    check_channels(f, spec)?;
    let cols = im2col(f, spec.kernel)?;
    apply_fc(spec, &cols, f.height(), f.width())
}

/// Parameter gradients shared by the regular and deformable backward passes,
/// given the (possibly deformed) column matrix the forward pass used.
pub(crate) fn fc_backward<T: Scalar>(
    spec: &ConvSpec<T>,
    cols: &Tensor<T>,
    grad_out: &Tensor<T>,
    h: usize,
    w: usize,
) -> Result<(Tensor<T>, Tensor<T>, Tensor<T>)> {
    if grad_out.shape() != [spec.out_channels, h, w] {
        return Err(shape_err!(
            "grad_out {:?}, expected [{}, {h}, {w}]",
            grad_out.shape(),
            spec.out_channels
        ));
    }
    let g2 = grad_out.clone().reshape(&[spec.out_channels, h * w])?;
    let grad_weights = gemm_nt(&g2, cols)?;
    let grad_cols = gemm_tn(&spec.weights, &g2)?;
    let grad_bias = Tensor::from_vec(
        &[spec.out_channels],
        g2.data()
            .chunks(h * w)
            .map(|row| row.iter().copied().sum())
            .collect(),
    )?;
    Ok((grad_cols, grad_weights, grad_bias))
}

pub fn conv_backward<T: Scalar>(
    f: &FeatureMap<T>,
    spec: &ConvSpec<T>,
    grad_out: &Tensor<T>,
) -> Result<ConvGrads<T>> {
    check_channels(f, spec)?;
    let (h, w) = (f.height(), f.width());
    let cols = im2col(f, spec.kernel)?;
    let (grad_cols, weights, bias) = fc_backward(spec, &cols, grad_out, h, w)?;
    let input = col2im(&grad_cols, f.dims(), spec.kernel)?;
    Ok(ConvGrads {
        input,
        weights,
        bias,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numdiff::{numeric_gradient, relative_error};
    use crate::rng::Rng;

    fn random_map(rng: &mut Rng, c: usize, h: usize, w: usize) -> FeatureMap {
        FeatureMap::new(
            Tensor::from_vec(&[c, h, w], rng.normal_vec(c * h * w)).unwrap(),
            1,
        )
        .unwrap()
    }

    /// Six nested loops straight from the definition of convolution.
    fn direct_conv(f: &FeatureMap, spec: &ConvSpec) -> Tensor {
        let (cin, h, w) = f.dims();
        let k = spec.kernel;
        Tensor::from_fn(&[spec.out_channels, h, w], |o| {
            let (co, x, y) = (o[0], o[1], o[2]);
            let mut acc = spec.bias.data()[co];
            for ci in 0..cin {
                for i in 0..k.h {
                    for j in 0..k.w {
                        let r = x as isize + i as isize - (k.h / 2) as isize;
                        let c = y as isize + j as isize - (k.w / 2) as isize;
                        let wgt = spec.weights.get(&[co, (ci * k.h + i) * k.w + j]).unwrap();
                        acc += wgt * f.value_or_zero(ci, r, c);
                    }
                }
            }
            acc
        })
    }

    #[test]
    fn one_by_one_is_reshape() {
        let mut rng = Rng::new(1);
        let f = random_map(&mut rng, 3, 4, 5);
        let cols = im2col(&f, Kernel::square(1)).unwrap();
        assert_eq!(cols.data(), f.tensor.data());
        assert_eq!(
            col2im(&cols, f.dims(), Kernel::square(1)).unwrap(),
            f.tensor
        );
    }

    #[test]
    fn center_column_of_3x3() {
        let t = Tensor::from_vec(&[1, 3, 3], (1..=9).map(f64::from).collect()).unwrap();
        let f = FeatureMap::new(t, 1).unwrap();
        let cols = im2col(&f, Kernel::square(3)).unwrap();
        let center: Vec<f64> = (0..9).map(|row| cols.get(&[row, 4]).unwrap()).collect();
        assert_eq!(center, (1..=9).map(f64::from).collect::<Vec<_>>());
        // corner output (0,0) sees padding on its top row and left column
        assert_eq!(cols.get(&[0, 0]).unwrap(), 0.0);
        assert_eq!(cols.get(&[4, 0]).unwrap(), 1.0);
    }

    #[test]
    fn shapes() {
        let f = FeatureMap::new(Tensor::<f64>::zeros(&[2, 4, 5]), 1).unwrap();
        assert_eq!(im2col(&f, Kernel::square(3)).unwrap().shape(), &[18, 20]);
        assert!(im2col(&f, Kernel::new(10, 1)).is_err());
        assert!(im2col(&f, Kernel::new(9, 11)).is_ok());
        let zeros = Tensor::<f64>::zeros(&[18, 20]);
        assert!(col2im(&zeros, (2, 4, 5), Kernel::square(3))
            .unwrap()
            .data()
            .iter()
            .all(|&v| v == 0.0));
        assert!(col2im(&zeros, (2, 4, 4), Kernel::square(3)).is_err());
    }

    #[test]
    fn adjoint_identity() {
        let mut rng = Rng::new(77);
        for _ in 0..20 {
            let (c, h, w) = (rng.range(1, 4), rng.range(1, 7), rng.range(1, 7));
            let k = Kernel::new(
                rng.range(1, (2 * h + 2).min(6)),
                rng.range(1, (2 * w + 2).min(6)),
            );
            let x = random_map(&mut rng, c, h, w);
            let cols = im2col(&x, k).unwrap();
            let y = Tensor::from_vec(cols.shape(), rng.normal_vec(cols.len())).unwrap();
            let lhs = cols.dot(&y).unwrap();
            let rhs = x.tensor.dot(&col2im(&y, x.dims(), k).unwrap()).unwrap();
            assert!(
                (lhs - rhs).abs() <= 1e-12 * lhs.abs().max(1.0),
                "{lhs} vs {rhs}"
            );
        }
    }

    #[test]
    fn delta_kernel_is_identity() {
        let mut rng = Rng::new(2);
        let f = random_map(&mut rng, 1, 5, 6);
        let mut spec = ConvSpec::zeros(Kernel::square(3), 1, 1);
        spec.weights.set(&[0, 4], 1.0).unwrap();
        assert_eq!(conv_forward(&f, &spec).unwrap(), f.tensor);
    }

    #[test]
    fn matches_direct_convolution() {
        let mut rng = Rng::new(3);
        for &(kh, kw) in &[(3, 3), (1, 1), (2, 2), (5, 3), (2, 5)] {
            let f = random_map(&mut rng, 4, 5, 5);
            let spec = ConvSpec::gaussian(Kernel::new(kh, kw), 4, 3, 1.0, 0.0, &mut rng);
            let spec = ConvSpec {
                bias: Tensor::from_vec(&[3], rng.normal_vec(3)).unwrap(),
                ..spec
            };
            let fast = conv_forward(&f, &spec).unwrap();
            let slow = direct_conv(&f, &spec);
            assert!(fast.max_abs_diff(&slow).unwrap() <= 1e-12);
        }
        let f = random_map(&mut rng, 1, 4, 5);
        let spec = ConvSpec::gaussian(Kernel::square(3), 1, 2, 1.0, 0.3, &mut rng);
        assert!(
            conv_forward(&f, &spec)
                .unwrap()
                .max_abs_diff(&direct_conv(&f, &spec))
                .unwrap()
                <= 1e-12
        );
    }

    #[test]
    fn channel_mismatch_rejected() {
        let f = FeatureMap::new(Tensor::<f64>::zeros(&[2, 3, 3]), 1).unwrap();
        let spec = ConvSpec::zeros(Kernel::square(3), 3, 1);
        assert!(conv_forward(&f, &spec).is_err());
    }

    #[test]
    fn backward_trivial_cases() {
        let mut rng = Rng::new(4);
        let f = random_map(&mut rng, 2, 3, 4);
        let spec = ConvSpec::gaussian(Kernel::square(3), 2, 3, 1.0, 0.0, &mut rng);
        let g = conv_backward(&f, &spec, &Tensor::zeros(&[3, 3, 4])).unwrap();
        assert!(g
            .input
            .data()
            .iter()
            .chain(g.weights.data())
            .chain(g.bias.data())
            .all(|&v| v == 0.0));
        let g = conv_backward(&f, &spec, &Tensor::full(&[3, 3, 4], 1.0)).unwrap();
        assert_eq!(g.bias.data(), &[12.0, 12.0, 12.0]);
        assert!(conv_backward(&f, &spec, &Tensor::zeros(&[3, 4, 4])).is_err());
    }

    #[test]
    fn backward_matches_finite_differences() {
        let mut rng = Rng::new(5);
        let f = random_map(&mut rng, 1, 3, 3);
        let spec = ConvSpec::gaussian(Kernel::square(3), 1, 2, 1.0, 0.1, &mut rng);
        let upstream = Tensor::from_vec(&[2, 3, 3], rng.normal_vec(18)).unwrap();
        let grads = conv_backward(&f, &spec, &upstream).unwrap();
        let loss =
            |f: &FeatureMap, s: &ConvSpec| conv_forward(f, s).unwrap().dot(&upstream).unwrap();

        let mut x = f.tensor.data().to_vec();
        let num = numeric_gradient(&mut x, 1e-5, |v| {
            loss(
                &FeatureMap::new(Tensor::from_vec(&[1, 3, 3], v.to_vec()).unwrap(), 1).unwrap(),
                &spec,
            )
        });
        for (a, n) in grads.input.data().iter().zip(&num) {
            assert!(relative_error(*a, *n) <= 1e-6);
        }
        let mut wv = spec.weights.data().to_vec();
        let num = numeric_gradient(&mut wv, 1e-5, |v| {
            let mut s = spec.clone();
            s.weights.data_mut().copy_from_slice(v);
            loss(&f, &s)
        });
        for (a, n) in grads.weights.data().iter().zip(&num) {
            assert!(relative_error(*a, *n) <= 1e-6);
        }
    }
}
