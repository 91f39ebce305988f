//! Convolution as RoIAlign followed by a fully connected layer.
//!
//! Conventions shared by every operator here:
//!
//! * Feature cell `(r, c)` has its center at continuous coordinate
//!   `(r + 0.5, c + 0.5)`. Sampling exactly at a center returns that cell.
//! * `x` is the row coordinate and pairs with the kernel height `h`; `y` is
//!   the column coordinate and pairs with the kernel width `w`.
//! * Convolutions are stride-1 with zero padding of `floor(h/2)` rows and
//!   `floor(w/2)` columns on the leading side, so tap `(i, j)` of output
//!   `(X, Y)` sits at `(X - floor(h/2) + i + 0.5, Y - floor(w/2) + j + 0.5)`.
//!   Even kernels are therefore centered asymmetrically.
//! * Bilinear samples outside the map read zeros, the same as convolution
//!   padding. This is what makes the RoIAlign form agree with the im2col
//!   form at the borders.

mod bilinear;
mod deform;
mod flops;
mod im2col;
mod roialign;
mod roiconv;

pub use bilinear::{bilinear_grads, bilinear_sample, BilinearGrads, CellGrad};
pub use deform::{
    deform_conv_backward, deform_conv_forward, deform_im2col, deform_sample_points, DeformGrads,
};
pub use flops::{flop_count, FlopCount, FlopShape, OpKind};
pub use im2col::{col2im, conv_backward, conv_forward, im2col, ConvGrads};
pub use roialign::{implicit_roi, roialign, roialign_points};
pub use roiconv::{roiconv_offsets, roiconv_offsets_at};

use crate::error::{shape_err, Error, Result};
use crate::rng::Rng;
use crate::tensor::{Scalar, Tensor};

/// Kernel extent `h × w`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct Kernel {
    pub h: usize,
    pub w: usize,
}

impl Kernel {
    pub fn new(h: usize, w: usize) -> Self {
        Self { h, w }
    }

    pub fn square(k: usize) -> Self {
        Self { h: k, w: k }
    }

    pub fn taps(&self) -> usize {
        self.h * self.w
    }

    pub fn half_h(&self) -> usize {
        self.h / 2
    }

    pub fn half_w(&self) -> usize {
        self.w / 2
    }

    /// Continuous position of tap `(i, j)` for output `(x, y)`, before any offset.
    pub fn tap_point(&self, x: usize, y: usize, i: usize, j: usize) -> (f64, f64) {
        (
            x as f64 - self.half_h() as f64 + i as f64 + 0.5,
            y as f64 - self.half_w() as f64 + j as f64 + 0.5,
        )
    }
}

/// Weights and bias of a convolution, laid out as the fully connected layer
/// `W ∈ R^{Cout × (Cin·h·w)}` that follows im2col.
#[derive(Clone, Debug, PartialEq)]
pub struct ConvSpec<T = f64> {
    pub kernel: Kernel,
    pub in_channels: usize,
    pub out_channels: usize,
    pub weights: Tensor<T>,
    pub bias: Tensor<T>,
}

impl<T: Scalar> ConvSpec<T> {
    pub fn new(kernel: Kernel, weights: Tensor<T>, bias: Tensor<T>) -> Result<Self> {
        if kernel.h == 0 || kernel.w == 0 {
            return Err(shape_err!(
                "kernel extents must be positive, got {kernel:?}"
            ));
        }
        let (out_channels, cols) = weights.dims2()?;
        if cols % kernel.taps() != 0 || cols == 0 || out_channels == 0 {
            return Err(shape_err!(
                "weights {:?} inconsistent with a {}x{} kernel",
                weights.shape(),
                kernel.h,
                kernel.w
            ));
        }
        if bias.shape() != [out_channels] {
            return Err(shape_err!(
                "bias shape {:?}, expected [{out_channels}]",
                bias.shape()
            ));
        }
        Ok(Self {
            kernel,
            in_channels: cols / kernel.taps(),
            out_channels,
            weights,
            bias,
        })
    }

    pub fn zeros(kernel: Kernel, in_channels: usize, out_channels: usize) -> Self {
        Self {
            kernel,
            in_channels,
            out_channels,
            weights: Tensor::zeros(&[out_channels, in_channels * kernel.taps()]),
            bias: Tensor::zeros(&[out_channels]),
        }
    }

    /// Gaussian weights with standard deviation `std`, bias filled with `bias`.
    pub fn gaussian(
        kernel: Kernel,
        in_channels: usize,
        out_channels: usize,
        std: f64,
        bias: f64,
        rng: &mut Rng,
    ) -> Self {
        let n = out_channels * in_channels * kernel.taps();
        let w = (0..n).map(|_| T::from_f64(std * rng.normal())).collect();
        Self {
            kernel,
            in_channels,
            out_channels,
            weights: Tensor::from_vec(&[out_channels, in_channels * kernel.taps()], w)
                .expect("consistent shape"),
            bias: Tensor::full(&[out_channels], T::from_f64(bias)),
        }
    }

    pub fn col_rows(&self) -> usize {
        self.in_channels * self.kernel.taps()
    }

    pub fn param_count(&self) -> usize {
        self.weights.len() + self.bias.len()
    }
}

/// A `C × H × W` feature tensor and its stride in image pixels per cell.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureMap<T = f64> {
    pub tensor: Tensor<T>,
    pub stride: usize,
}

impl<T: Scalar> FeatureMap<T> {
    pub fn new(tensor: Tensor<T>, stride: usize) -> Result<Self> {
        tensor.dims3()?;
        if stride == 0 {
            return Err(Error::Contract("feature stride must be at least 1".into()));
        }
        Ok(Self { tensor, stride })
    }

    pub fn channels(&self) -> usize {
        self.tensor.shape()[0]
    }

    pub fn height(&self) -> usize {
        self.tensor.shape()[1]
    }

    pub fn width(&self) -> usize {
        self.tensor.shape()[2]
    }

    pub fn dims(&self) -> (usize, usize, usize) {
        (self.channels(), self.height(), self.width())
    }

    /// Cell value with zero padding outside the map.
    #[inline]
    pub fn value_or_zero(&self, channel: usize, row: isize, col: isize) -> T {
        let (_, h, w) = self.dims();
        if row < 0 || col < 0 || row >= h as isize || col >= w as isize {
            T::zero()
        } else {
            self.tensor.data()[(channel * h + row as usize) * w + col as usize]
        }
    }
}

/// Per-location sampling offsets for a `h × w` kernel, shape `2hw × H × W`.
///
/// Channel `2·(i·w + j)` holds the row offset `Δx` of tap `(i, j)` and
/// channel `2·(i·w + j) + 1` the column offset `Δy`, in feature cells.
#[derive(Clone, Debug, PartialEq)]
pub struct OffsetField<T = f64> {
    pub tensor: Tensor<T>,
    pub kernel: Kernel,
}

impl<T: Scalar> OffsetField<T> {
    pub fn new(tensor: Tensor<T>, kernel: Kernel) -> Result<Self> {
        let (c, _, _) = tensor.dims3()?;
        if c != 2 * kernel.taps() {
            return Err(shape_err!(
                "offset field has {c} channels, a {}x{} kernel needs {}",
                kernel.h,
                kernel.w,
                2 * kernel.taps()
            ));
        }
        Ok(Self { tensor, kernel })
    }

    pub fn zeros(kernel: Kernel, height: usize, width: usize) -> Self {
        Self {
            tensor: Tensor::zeros(&[2 * kernel.taps(), height, width]),
            kernel,
        }
    }

    pub fn height(&self) -> usize {
        self.tensor.shape()[1]
    }

    pub fn width(&self) -> usize {
        self.tensor.shape()[2]
    }

    /// `(Δx, Δy)` of tap `(i, j)` at output location `(x, y)`.
    #[inline]
    pub fn offset(&self, i: usize, j: usize, x: usize, y: usize) -> (T, T) {
        let plane = self.height() * self.width();
        let loc = x * self.width() + y;
        let ch = 2 * (i * self.kernel.w + j);
        let d = self.tensor.data();
        (d[ch * plane + loc], d[(ch + 1) * plane + loc])
    }

    /// The `2hw` offsets of one output location, in channel order.
    pub fn at_location(&self, x: usize, y: usize) -> Vec<T> {
        let plane = self.height() * self.width();
        let loc = x * self.width() + y;
        (0..2 * self.kernel.taps())
            .map(|ch| self.tensor.data()[ch * plane + loc])
            .collect()
    }

    pub(crate) fn check_matches(&self, kernel: Kernel, height: usize, width: usize) -> Result<()> {
        if self.kernel != kernel || self.height() != height || self.width() != width {
            return Err(shape_err!(
                "offset field for {:?} on {}x{} does not match {:?} on {height}x{width}",
                self.kernel,
                self.height(),
                self.width(),
                kernel
            ));
        }
        Ok(())
    }
}

/// Continuous feature-grid coordinate (`x` = row, `y` = column).
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SamplePoint<T = f64> {
    pub x: T,
    pub y: T,
}

impl<T> SamplePoint<T> {
    pub fn new(x: T, y: T) -> Self {
        Self { x, y }
    }
}

/// Checks that the kernel fits the equivalence-mode padding of a map.
pub(crate) fn check_kernel_fits(kernel: Kernel, height: usize, width: usize) -> Result<()> {
    if kernel.h > 2 * height + 1 || kernel.w > 2 * width + 1 {
        return Err(shape_err!(
            "{}x{} kernel is larger than 2·dim+1 for a {height}x{width} map",
            kernel.h,
            kernel.w
        ));
    }
    Ok(())
}
