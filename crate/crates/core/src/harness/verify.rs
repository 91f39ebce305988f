//! Randomized checks of the convolution/RoIAlign equivalence and of RoIConv.

use serde::{Deserialize, Serialize};

use crate::boxes::{BBox, BoxMap};
use crate::conv::{
    col2im, conv_forward, deform_conv_forward, deform_sample_points, im2col, implicit_roi,
    roialign, roialign_points, roiconv_offsets, ConvSpec, FeatureMap, Kernel,
};
use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::{Scalar, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct VerifyConfig {
    /// Random convolution configurations to test.
    pub cases: usize,
    /// Bound on |conv − FC∘RoIAlign| over every output.
    pub tolerance: f64,
    /// Bound on |RoIConv(implicit RoIs) − conv|.
    pub identity_tolerance: f64,
    /// Random anchors whose RoIConv sampling points are compared with RoIAlign.
    pub anchor_boxes: usize,
    pub coordinate_tolerance: f64,
    /// Bound on the relative mismatch of `<im2col x, y>` and `<x, col2im y>`.
    pub adjoint_tolerance: f64,
}

impl Default for VerifyConfig {
    fn default() -> Self {
        Self {
            cases: 100,
            tolerance: 1e-10,
            identity_tolerance: 1e-12,
            anchor_boxes: 1000,
            coordinate_tolerance: 1e-9,
            adjoint_tolerance: 1e-12,
        }
    }
}

impl VerifyConfig {
    /// Defaults suited to single precision.
    pub fn single_precision() -> Self {
        Self {
            tolerance: 1e-4,
            identity_tolerance: 1e-5,
            adjoint_tolerance: 1e-5,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("tolerance", self.tolerance),
            ("identity_tolerance", self.identity_tolerance),
            ("coordinate_tolerance", self.coordinate_tolerance),
            ("adjoint_tolerance", self.adjoint_tolerance),
        ] {
            if !(v >= 0.0) {
                return Err(Error::Config(format!("{name} must be >= 0, got {v}")));
            }
        }
        if self.cases == 0 {
            return Err(Error::Config("cases must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CaseReport {
    pub case: usize,
    pub kernel: Kernel,
    pub in_channels: usize,
    pub out_channels: usize,
    pub height: usize,
    pub width: usize,
    pub stride: usize,
    /// Max |conv − FC∘RoIAlign(implicit RoI)| over all outputs.
    pub equivalence_error: f64,
    /// Max |deform_conv(RoIConv offsets of implicit RoIs) − conv|.
    pub identity_error: f64,
    /// Relative adjoint mismatch of im2col/col2im.
    pub adjoint_error: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct VerifyReport {
    pub config: VerifyConfig,
    pub cases: Vec<CaseReport>,
    pub max_equivalence_error: f64,
    pub max_identity_error: f64,
    pub max_adjoint_error: f64,
    /// Max distance between RoIConv sampling points and RoIAlign bin
    /// centers over the random anchors.
    pub max_coordinate_error: f64,
    pub passed: bool,
}

/// `W · x + b` for one column, accumulated tap by tap in reverse order so
/// the oracle does not share rounding with the GEMM path.
fn fc_column<T: Scalar>(spec: &ConvSpec<T>, col: &[T], out: usize) -> T {
    let row = &spec.weights.data()[out * col.len()..(out + 1) * col.len()];
    let mut acc = T::zero();
    for k in (0..col.len()).rev() {
        acc += row[k] * col[k];
    }
    acc + spec.bias.data()[out]
}

const STRIDES: [usize; 5] = [1, 2, 4, 8, 16];

fn random_case<T: Scalar>(rng: &mut Rng) -> (FeatureMap<T>, ConvSpec<T>) {
    let (h, w) = (rng.range(1, 11), rng.range(1, 11));
    let kernel = Kernel::new(
        rng.range(1, (2 * h + 2).min(8)),
        rng.range(1, (2 * w + 2).min(8)),
    );
    let (cin, cout) = (rng.range(1, 5), rng.range(1, 5));
    let stride = STRIDES[rng.range(0, STRIDES.len())];
    let data = rng
        .normal_vec(cin * h * w)
        .into_iter()
        .map(T::from_f64)
        .collect();
    let f = FeatureMap::new(Tensor::from_vec(&[cin, h, w], data).expect("sized"), stride)
        .expect("valid");
    let mut spec = ConvSpec::<T>::gaussian(kernel, cin, cout, 1.0, 0.0, rng);
    for b in spec.bias.data_mut() {
        *b = T::from_f64(rng.normal());
    }
    (f, spec)
}

fn check_case<T: Scalar>(
    case: usize,
    f: &FeatureMap<T>,
    spec: &ConvSpec<T>,
    rng: &mut Rng,
) -> Result<CaseReport> {
    let (cin, h, w) = f.dims();
    let k = spec.kernel;
    let conv = conv_forward(f, spec)?;
    let mut equivalence_error = 0.0f64;
    let mut anchors = Vec::with_capacity(h * w);
    for x in 0..h {
        for y in 0..w {
            let roi = implicit_roi(x, y, k, f.stride);
            anchors.push(roi);
            let col = roialign(f, &roi, k.h, k.w)?;
            for o in 0..spec.out_channels {
                let fc = fc_column(spec, col.data(), o);
                let d = (fc - conv.get(&[o, x, y])?).abs().as_f64();
                equivalence_error = equivalence_error.max(d);
            }
        }
    }
    let offsets = roiconv_offsets(&BoxMap::new(h, w, anchors)?, k, f.stride)?;
    let identity_error = deform_conv_forward(f, spec, &offsets)?
        .max_abs_diff(&conv)?
        .as_f64();

    let cols = im2col(f, k)?;
    let y = Tensor::from_vec(
        cols.shape(),
        rng.normal_vec(cols.len())
            .into_iter()
            .map(T::from_f64)
            .collect(),
    )?;
    // accumulate in f64 so single precision measures the operators, not the sum
    let dot = |a: &[T], b: &[T]| {
        a.iter()
            .zip(b)
            .map(|(p, q)| p.as_f64() * q.as_f64())
            .sum::<f64>()
    };
    let lhs = dot(cols.data(), y.data());
    let rhs = dot(f.tensor.data(), col2im(&y, (cin, h, w), k)?.data());
    let adjoint_error = (lhs - rhs).abs() / lhs.abs().max(rhs.abs()).max(1.0);

    Ok(CaseReport {
        case,
        kernel: k,
        in_channels: cin,
        out_channels: spec.out_channels,
        height: h,
        width: w,
        stride: f.stride,
        equivalence_error,
        identity_error,
        adjoint_error,
    })
}

/// Max coordinate error between RoIConv sampling points and RoIAlign bin
/// centers for `n` random anchors at random locations.
pub fn coordinate_check(rng: &mut Rng, n: usize) -> Result<f64> {
    let mut worst = 0.0f64;
    for _ in 0..n {
        let kernel = Kernel::new(rng.range(1, 8), rng.range(1, 8));
        let stride = STRIDES[rng.range(0, STRIDES.len())];
        let (h, w) = (rng.range(1, 9), rng.range(1, 9));
        let (x, y) = (rng.range(0, h), rng.range(0, w));
        let s = stride as f64;
        let x1 = rng.uniform_in(-4.0, h as f64 + 4.0) * s;
        let y1 = rng.uniform_in(-4.0, w as f64 + 4.0) * s;
        let anchor = BBox::new(
            x1,
            y1,
            x1 + rng.uniform_in(0.0, 12.0) * s,
            y1 + rng.uniform_in(0.0, 12.0) * s,
        )?;
        let mut boxes = vec![implicit_roi(0, 0, kernel, stride); h * w];
        boxes[x * w + y] = anchor;
        let offsets = roiconv_offsets::<f64>(&BoxMap::new(h, w, boxes)?, kernel, stride)?;
        let got = deform_sample_points(&offsets, x, y);
        let want = roialign_points(&anchor, kernel.h, kernel.w, stride)?;
        for (g, e) in got.iter().zip(&want) {
            worst = worst.max((g.x - e.x).abs()).max((g.y - e.y).abs());
        }
    }
    Ok(worst)
}

/// Runs every check with a generator seeded by `seed`. `passed` is true iff
/// each maximum error is within its tolerance.
pub fn run_verify<T: Scalar>(config: &VerifyConfig, seed: u64) -> Result<VerifyReport> {
    config.validate()?;
    let mut rng = Rng::new(seed);
    let mut cases = Vec::with_capacity(config.cases);
    for case in 0..config.cases {
        let (f, spec) = random_case::<T>(&mut rng);
        cases.push(check_case(case, &f, &spec, &mut rng)?);
    }
    let max = |get: fn(&CaseReport) -> f64| cases.iter().map(get).fold(0.0f64, f64::max);
    let max_equivalence_error = max(|c| c.equivalence_error);
    let max_identity_error = max(|c| c.identity_error);
    let max_adjoint_error = max(|c| c.adjoint_error);
    let max_coordinate_error = coordinate_check(&mut rng, config.anchor_boxes)?;
    let passed = max_equivalence_error <= config.tolerance
        && max_identity_error <= config.identity_tolerance
        && max_adjoint_error <= config.adjoint_tolerance
        && max_coordinate_error <= config.coordinate_tolerance;
    Ok(VerifyReport {
        config: config.clone(),
        cases,
        max_equivalence_error,
        max_identity_error,
        max_adjoint_error,
        max_coordinate_error,
        passed,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn small_run_passes() {
        let c = VerifyConfig {
            cases: 10,
            anchor_boxes: 50,
            ..Default::default()
        };
        let r = run_verify::<f64>(&c, 1).unwrap();
        assert!(r.passed, "{r:?}");
        assert_eq!(r.cases.len(), 10);
    }

    #[test]
    fn zero_tolerance_fails() {
        let c = VerifyConfig {
            cases: 20,
            tolerance: 0.0,
            anchor_boxes: 10,
            ..Default::default()
        };
        let r = run_verify::<f64>(&c, 2).unwrap();
        assert!(r.max_equivalence_error > 0.0);
        assert!(!r.passed);
    }

    #[test]
    fn single_precision_defaults_pass() {
        let c = VerifyConfig {
            cases: 10,
            anchor_boxes: 50,
            ..VerifyConfig::single_precision()
        };
        let r = run_verify::<f32>(&c, 3).unwrap();
        assert!(
            r.passed,
            "{} {} {} {}",
            r.max_equivalence_error,
            r.max_identity_error,
            r.max_adjoint_error,
            r.max_coordinate_error
        );
    }
}
