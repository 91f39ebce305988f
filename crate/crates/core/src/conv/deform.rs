//! Deformable convolution: im2col with per-tap fractional offsets.
//!
//! The same kernel runs learned-offset deformable convolution and RoIConv;
//! the two differ only in where the offset field comes from.

use super::bilinear::Bracket;
use super::im2col::{apply_fc, check_channels, fc_backward};
use super::{ConvSpec, FeatureMap, Kernel, OffsetField, SamplePoint};
use crate::error::Result;
use crate::tensor::{Scalar, Tensor};

#[derive(Clone, Debug, PartialEq)]
pub struct DeformGrads<T = f64> {
    pub input: Tensor<T>,
    pub weights: Tensor<T>,
    pub bias: Tensor<T>,
    /// Present only when the offsets were marked trainable.
    pub offsets: Option<Tensor<T>>,
}

/// Sampling points of every tap at output `(x, y)`, row-major over taps.
pub fn deform_sample_points<T: Scalar>(
    offsets: &OffsetField<T>,
    x: usize,
    y: usize,
) -> Vec<SamplePoint<f64>> {
    let k = offsets.kernel;
    let mut pts = Vec::with_capacity(k.taps());
    for i in 0..k.h {
        for j in 0..k.w {
            let (px, py) = k.tap_point(x, y, i, j);
            let (dx, dy) = offsets.offset(i, j, x, y);
            pts.push(SamplePoint::new(px + dx.as_f64(), py + dy.as_f64()));
        }
    }
    pts
}

#[inline]
fn tap_bracket<T: Scalar>(
    k: Kernel,
    offsets: &OffsetField<T>,
    i: usize,
    j: usize,
    x: usize,
    y: usize,
) -> Bracket<T> {
    let (dx, dy) = offsets.offset(i, j, x, y);
    let base_x = T::from_f64(x as f64 - k.half_h() as f64 + i as f64 + 0.5);
    let base_y = T::from_f64(y as f64 - k.half_w() as f64 + j as f64 + 0.5);
    Bracket::new(SamplePoint::new(base_x + dx, base_y + dy))
}

/// im2col with every tap displaced by its offset and read by bilinear
/// interpolation. Zero offsets reproduce [`im2col`](super::im2col) exactly.
pub fn deform_im2col<T: Scalar>(f: &FeatureMap<T>, offsets: &OffsetField<T>) -> Result<Tensor<T>> {
    let (c_in, h, w) = f.dims();
    let k = offsets.kernel;
    offsets.check_matches(k, h, w)?;
    let hw = h * w;
    let mut cols = vec![T::zero(); c_in * k.taps() * hw];
    for i in 0..k.h {
        for j in 0..k.w {
            for x in 0..h {
                for y in 0..w {
                    let br = tap_bracket(k, offsets, i, j, x, y);
                    let loc = x * w + y;
                    for c in 0..c_in {
                        let row = (c * k.h + i) * k.w + j;
                        cols[row * hw + loc] = br.sample(f, c);
                    }
                }
            }
        }
    }
    Tensor::from_vec(&[c_in * k.taps(), hw], cols)
}

pub fn deform_conv_forward<T: Scalar>(
    f: &FeatureMap<T>,
    spec: &ConvSpec<T>,
    offsets: &OffsetField<T>,
) -> Result<Tensor<T>> {
    check_channels(f, spec)?;
    offsets.check_matches(spec.kernel, f.height(), f.width())?;
    let cols = deform_im2col(f, offsets)?;
    apply_fc(spec, &cols, f.height(), f.width())
}

/// Backward pass of [`deform_conv_forward`]. Offset gradients are computed
/// only when `offsets_trainable` is set; RoIConv treats its analytic
/// offsets as constants and passes `false`.
pub fn deform_conv_backward<T: Scalar>(
    f: &FeatureMap<T>,
    spec: &ConvSpec<T>,
    offsets: &OffsetField<T>,
    grad_out: &Tensor<T>,
    offsets_trainable: bool,
) -> Result<DeformGrads<T>> {
    check_channels(f, spec)?;
    let (c_in, h, w) = f.dims();
    let k = spec.kernel;
    offsets.check_matches(k, h, w)?;
    let cols = deform_im2col(f, offsets)?;
    let (grad_cols, weights, bias) = fc_backward(spec, &cols, grad_out, h, w)?;

    let hw = h * w;
    let gc = grad_cols.data();
    let mut grad_in = vec![T::zero(); c_in * hw];
    let mut grad_off = if offsets_trainable {
        vec![T::zero(); 2 * k.taps() * hw]
    } else {
        Vec::new()
    };
    for i in 0..k.h {
        for j in 0..k.w {
            let ch = 2 * (i * k.w + j);
            for x in 0..h {
                for y in 0..w {
                    let br = tap_bracket(k, offsets, i, j, x, y);
                    let corners = br.corners();
                    let loc = x * w + y;
                    let (mut gx, mut gy) = (T::zero(), T::zero());
                    for c in 0..c_in {
                        let g = gc[((c * k.h + i) * k.w + j) * hw + loc];
                        if g == T::zero() {
                            continue;
                        }
                        for &(r, col, wgt) in &corners {
                            if r >= 0 && col >= 0 && (r as usize) < h && (col as usize) < w {
                                grad_in[c * hw + r as usize * w + col as usize] += wgt * g;
                            }
                        }
                        if offsets_trainable {
                            let (dx, dy) = br.point_grad(f, c);
                            gx += g * dx;
                            gy += g * dy;
                        }
                    }
                    if offsets_trainable {
                        grad_off[ch * hw + loc] = gx;
                        grad_off[(ch + 1) * hw + loc] = gy;
                    }
                }
            }
        }
    }
    let offsets_grad = if offsets_trainable {
        Some(Tensor::from_vec(&[2 * k.taps(), h, w], grad_off)?)
    } else {
        None
    };
    Ok(DeformGrads {
        input: Tensor::from_vec(&[c_in, h, w], grad_in)?,
        weights,
        bias,
        offsets: offsets_grad,
    })
}
