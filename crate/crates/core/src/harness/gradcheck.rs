//! Finite-difference checks of every hand-written backward pass.

use serde::{Deserialize, Serialize};

use crate::conv::{
    bilinear_grads, bilinear_sample, conv_backward, conv_forward, deform_conv_backward,
    deform_conv_forward, ConvSpec, FeatureMap, Kernel, OffsetField, SamplePoint,
};
use crate::detector::{
    batch_loss, batch_loss_value, focal_loss, make_dataset, smooth_l1, AdmVariant, DetectionConfig,
    Network, SyntheticScene,
};
use crate::error::{Error, Result};
use crate::numdiff::{numeric_gradient_4th, relative_error};
use crate::rng::Rng;
use crate::tensor::Tensor;

/// Operators covered by [`run_gradcheck`], in report order.
pub const OPERATORS: [&str; 9] = [
    "conv",
    "bilinear",
    "deform_conv",
    "focal_loss",
    "smooth_l1",
    "avgpool",
    "end_to_end_vanilla_conv",
    "end_to_end_learned_deform",
    "end_to_end_roiconv",
];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GradcheckConfig {
    pub operator_tolerance: f64,
    pub end_to_end_tolerance: f64,
    /// Parameters sampled per end-to-end check.
    pub end_to_end_samples: usize,
    /// Test hook: scales the analytic gradient of the named operator by
    /// `1 + 1e-3`, which the check must catch.
    pub corrupt_backward: Option<String>,
}

impl Default for GradcheckConfig {
    fn default() -> Self {
        Self {
            operator_tolerance: 1e-6,
            end_to_end_tolerance: 1e-5,
            end_to_end_samples: 20,
            corrupt_backward: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct OperatorReport {
    pub operator: String,
    pub checked: usize,
    /// End-to-end samples redrawn because a kink of the loss was in reach.
    pub redrawn: usize,
    pub max_relative_error: f64,
    pub tolerance: f64,
    pub passed: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct GradcheckReport {
    pub config: GradcheckConfig,
    pub operators: Vec<OperatorReport>,
    pub passed: bool,
}

/// Step of the fourth-order difference stencil for the operator checks.
/// Truncation error is O(ε⁴), so round-off dominates below this.
const EPS: f64 = 1e-3;

/// Smaller step for the whole detector, whose loss has kinks (ReLU,
/// bilinear cell boundaries) that a large step could straddle.
const E2E_EPS: f64 = 1e-4;

/// Step for deformable convolution, which is piecewise linear in every
/// coordinate: sampling points stay 0.1 from the kinks, so a step well
/// below that is exact up to round-off, and larger steps shrink round-off.
const EPS_PIECEWISE_LINEAR: f64 = 1e-2;

/// Paired analytic and numeric derivatives.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct GradientComparison {
    pub analytic: Vec<f64>,
    pub numeric: Vec<f64>,
}

impl GradientComparison {
    fn new() -> Self {
        Self {
            analytic: Vec::new(),
            numeric: Vec::new(),
        }
    }

    pub fn max_relative_error(&self) -> f64 {
        self.analytic
            .iter()
            .zip(&self.numeric)
            .map(|(a, n)| relative_error(*a, *n))
            .fold(0.0f64, f64::max)
    }

    fn push(&mut self, analytic: &[f64], numeric: &[f64]) {
        self.analytic.extend_from_slice(analytic);
        self.numeric.extend_from_slice(numeric);
    }
}

fn random_tensor(rng: &mut Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    Tensor::from_vec(shape, rng.normal_vec(n)).expect("sized")
}

/// Offsets whose sampling points stay at least `margin` away from the
/// grid lines where bilinear interpolation has kinks.
fn smooth_offsets(rng: &mut Rng, k: Kernel, h: usize, w: usize) -> OffsetField {
    let data = (0..2 * k.taps() * h * w)
        .map(|_| rng.range(0, 3) as f64 - 1.0 + rng.uniform_in(0.1, 0.9))
        .collect();
    OffsetField::new(
        Tensor::from_vec(&[2 * k.taps(), h, w], data).expect("sized"),
        k,
    )
    .expect("channels match")
}

/// Projects an output onto a fixed random direction so every operator
/// reduces to a scalar objective.
fn project(out: &Tensor, dir: &Tensor) -> f64 {
    out.dot(dir).expect("same shape")
}

fn check_conv(rng: &mut Rng) -> Result<GradientComparison> {
    let mut cmp = GradientComparison::new();
    for &(kh, kw) in &[(3, 3), (2, 4), (1, 1), (5, 3)] {
        let k = Kernel::new(kh, kw);
        let f = FeatureMap::new(random_tensor(rng, &[2, 5, 4]), 1)?;
        let spec = ConvSpec::gaussian(k, 2, 3, 1.0, 0.3, rng);
        let dir = random_tensor(rng, &[3, 5, 4]);
        let g = conv_backward(&f, &spec, &dir)?;
        let mut x = f.tensor.data().to_vec();
        let num = numeric_gradient_4th(&mut x, EPS, |v| {
            let fm = FeatureMap::new(Tensor::from_vec(&[2, 5, 4], v.to_vec()).expect("sized"), 1)
                .expect("valid");
            project(&conv_forward(&fm, &spec).expect("valid"), &dir)
        });
        cmp.push(g.input.data(), &num);
        let mut wv = spec.weights.data().to_vec();
        let num = numeric_gradient_4th(&mut wv, EPS, |v| {
            let s = ConvSpec {
                weights: Tensor::from_vec(spec.weights.shape(), v.to_vec()).expect("sized"),
                ..spec.clone()
            };
            project(&conv_forward(&f, &s).expect("valid"), &dir)
        });
        cmp.push(g.weights.data(), &num);
        let mut bv = spec.bias.data().to_vec();
        let num = numeric_gradient_4th(&mut bv, EPS, |v| {
            let s = ConvSpec {
                bias: Tensor::from_vec(&[3], v.to_vec()).expect("sized"),
                ..spec.clone()
            };
            project(&conv_forward(&f, &s).expect("valid"), &dir)
        });
        cmp.push(g.bias.data(), &num);
    }
    Ok(cmp)
}

fn check_bilinear(rng: &mut Rng) -> Result<GradientComparison> {
    let mut cmp = GradientComparison::new();
    let (h, w) = (4, 5);
    let f = FeatureMap::new(random_tensor(rng, &[1, h, w]), 1)?;
    for _ in 0..50 {
        // keep clear of the grid lines at half-integers
        let coord =
            |rng: &mut Rng, n: usize| rng.range(0, n + 2) as f64 - 1.0 + rng.uniform_in(0.05, 0.95);
        let p = SamplePoint::new(coord(rng, h), coord(rng, w));
        let up = rng.normal();
        let g = bilinear_grads(&f, p, 0, up);
        let mut xy = [p.x, p.y];
        let num = numeric_gradient_4th(&mut xy, EPS, |v| {
            up * bilinear_sample(&f, SamplePoint::new(v[0], v[1]), 0)
        });
        cmp.push(&[g.dx, g.dy], &num);
        let mut cells = f.tensor.data().to_vec();
        let num = numeric_gradient_4th(&mut cells, EPS, |v| {
            let fm = FeatureMap::new(Tensor::from_vec(&[1, h, w], v.to_vec()).expect("sized"), 1)
                .expect("valid");
            up * bilinear_sample(&fm, p, 0)
        });
        let mut analytic = vec![0.0; h * w];
        for c in g.cells.iter().flatten() {
            analytic[c.row * w + c.col] += c.grad;
        }
        cmp.push(&analytic, &num);
    }
    Ok(cmp)
}

fn check_deform(rng: &mut Rng) -> Result<GradientComparison> {
    let mut cmp = GradientComparison::new();
    for &(kh, kw) in &[(3, 3), (2, 3), (1, 1)] {
        let k = Kernel::new(kh, kw);
        let (h, w) = (4, 5);
        let f = FeatureMap::new(random_tensor(rng, &[2, h, w]), 1)?;
        let spec = ConvSpec::gaussian(k, 2, 2, 1.0, 0.1, rng);
        let off = smooth_offsets(rng, k, h, w);
        let dir = random_tensor(rng, &[2, h, w]);
        let g = deform_conv_backward(&f, &spec, &off, &dir, true)?;
        let mut x = f.tensor.data().to_vec();
        let num = numeric_gradient_4th(&mut x, EPS_PIECEWISE_LINEAR, |v| {
            let fm = FeatureMap::new(Tensor::from_vec(&[2, h, w], v.to_vec()).expect("sized"), 1)
                .expect("valid");
            project(&deform_conv_forward(&fm, &spec, &off).expect("valid"), &dir)
        });
        cmp.push(g.input.data(), &num);
        let mut o = off.tensor.data().to_vec();
        let num = numeric_gradient_4th(&mut o, EPS_PIECEWISE_LINEAR, |v| {
            let of = OffsetField::new(
                Tensor::from_vec(off.tensor.shape(), v.to_vec()).expect("sized"),
                k,
            )
            .expect("valid");
            project(&deform_conv_forward(&f, &spec, &of).expect("valid"), &dir)
        });
        cmp.push(g.offsets.as_ref().expect("trainable").data(), &num);
        let mut wv = spec.weights.data().to_vec();
        let num = numeric_gradient_4th(&mut wv, EPS_PIECEWISE_LINEAR, |v| {
            let s = ConvSpec {
                weights: Tensor::from_vec(spec.weights.shape(), v.to_vec()).expect("sized"),
                ..spec.clone()
            };
            project(&deform_conv_forward(&f, &s, &off).expect("valid"), &dir)
        });
        cmp.push(g.weights.data(), &num);
    }
    Ok(cmp)
}

fn check_focal(rng: &mut Rng) -> Result<GradientComparison> {
    let mut cmp = GradientComparison::new();
    for &gamma in &[0.0, 1.0, 2.0] {
        let mut z: Vec<f64> = (0..30).map(|_| 3.0 * rng.normal()).collect();
        let t: Vec<Option<bool>> = (0..30)
            .map(|_| match rng.range(0, 4) {
                0 => Some(true),
                1 => None,
                _ => Some(false),
            })
            .collect();
        let a = focal_loss(&z, &t, 0.25, gamma)?.grad;
        let num = numeric_gradient_4th(&mut z, EPS, |v| {
            focal_loss(v, &t, 0.25, gamma).expect("finite").value
        });
        cmp.push(&a, &num);
    }
    Ok(cmp)
}

fn check_smooth_l1(rng: &mut Rng) -> Result<GradientComparison> {
    let mut cmp = GradientComparison::new();
    let beta = 1.0 / 9.0;
    let t = rng.normal_vec(40);
    // differences kept at least 0.01 away from the kink at |d| = β
    let mut p: Vec<f64> = t
        .iter()
        .map(|v| {
            let mag = if rng.uniform() < 0.5 {
                rng.uniform_in(0.0, beta - 0.01)
            } else {
                rng.uniform_in(beta + 0.01, 1.0)
            };
            v + if rng.uniform() < 0.5 { mag } else { -mag }
        })
        .collect();
    let a = smooth_l1(&p, &t, beta)?.grad;
    let num = numeric_gradient_4th(&mut p, 1e-3, |v| {
        smooth_l1(v, &t, beta).expect("sized").value
    });
    cmp.push(&a, &num);
    Ok(cmp)
}

fn check_avgpool(rng: &mut Rng) -> Result<GradientComparison> {
    let mut cmp = GradientComparison::new();
    let x = random_tensor(rng, &[2, 6, 4]);
    let dir = random_tensor(rng, &[2, 3, 2]);
    let a = crate::detector::avgpool2_backward(&dir, (2, 6, 4))?;
    let mut v = x.data().to_vec();
    let num = numeric_gradient_4th(&mut v, EPS, |v| {
        let t = Tensor::from_vec(&[2, 6, 4], v.to_vec()).expect("sized");
        project(&crate::detector::avgpool2(&t).expect("valid"), &dir)
    });
    cmp.push(a.data(), &num);
    Ok(cmp)
}

/// Small network and scenes for the end-to-end check.
pub fn end_to_end_fixture(
    variant: AdmVariant,
    seed: u64,
) -> (DetectionConfig, Vec<SyntheticScene>) {
    let config = DetectionConfig {
        image_size: 32,
        adm_variant: variant,
        backbone_channels: [2, 3, 4],
        head_channels: 4,
        // a low ADM threshold gives the ADM regressor positives at init
        adm_fg: 0.4,
        adm_bg: 0.3,
        seed,
        ..Default::default()
    };
    (config, make_dataset(seed, 2, 32, false))
}

/// The fixture's network with every bias jittered. At initialization biases
/// are zero, so cells with all-zero inputs sit exactly on a ReLU kink where
/// the loss has no derivative; a generic point avoids that.
pub fn end_to_end_network(config: &DetectionConfig) -> Network {
    let mut net = Network::init(config);
    let mut rng = Rng::derive(config.seed, 0x9c);
    for (name, t) in net.tensors_mut() {
        if name.ends_with(".bias") {
            for b in t.data_mut() {
                *b += 0.05 * rng.normal();
            }
        }
    }
    net
}

/// Analytic and numeric loss derivatives at `samples` random parameters,
/// with label assignment and refined anchors frozen at their current values.
///
/// The loss has kinks (ReLU, bilinear cell boundaries). A parameter whose
/// stencils at steps ε and ε/4 disagree by more than `tolerance` has a kink
/// within reach and is redrawn; its derivative is not defined at the
/// resolution of the check. A wrong backward pass is still caught, because
/// both stencils then agree with each other but not with it.
pub fn end_to_end_errors(
    net: &Network,
    config: &DetectionConfig,
    scenes: &[SyntheticScene],
    samples: usize,
    tolerance: f64,
    rng: &mut Rng,
    corrupt: bool,
) -> Result<(GradientComparison, usize)> {
    let refs: Vec<&SyntheticScene> = scenes.iter().collect();
    let out = batch_loss(net, config, &refs, None)?;
    let fixed = out.refined.clone();
    let grads: Vec<Tensor> = out
        .grads
        .tensors()
        .into_iter()
        .map(|(_, t)| t.clone())
        .collect();
    let mut probe = net.clone();
    let mut cmp = GradientComparison::new();
    let mut redrawn = 0;
    while cmp.analytic.len() < samples {
        if redrawn > 10 * samples {
            return Err(Error::Contract(format!(
                "{redrawn} of the sampled parameters sit next to a kink of the loss"
            )));
        }
        let ti = rng.range(0, grads.len());
        let ei = rng.range(0, grads[ti].len());
        let analytic = grads[ti].data()[ei] * if corrupt { 1.0 + 1e-3 } else { 1.0 };
        let orig = probe.tensors()[ti].1.data()[ei];
        let mut numeric = |eps: f64| {
            let mut x = [orig];
            let g = numeric_gradient_4th(&mut x, eps, |v| {
                probe.tensors_mut()[ti].1.data_mut()[ei] = v[0];
                batch_loss_value(&probe, config, &refs, Some(&fixed)).expect("finite loss")
            });
            g[0]
        };
        let (wide, narrow) = (numeric(E2E_EPS), numeric(E2E_EPS / 4.0));
        probe.tensors_mut()[ti].1.data_mut()[ei] = orig;
        if relative_error(wide, narrow) > tolerance {
            redrawn += 1;
            continue;
        }
        cmp.push(&[analytic], &[wide]);
    }
    Ok((cmp, redrawn))
}

/// Runs every registered check and reports the worst relative error of each.
pub fn run_gradcheck(config: &GradcheckConfig, seed: u64) -> Result<GradcheckReport> {
    if let Some(name) = &config.corrupt_backward {
        if !OPERATORS.contains(&name.as_str()) {
            return Err(Error::Config(format!(
                "unknown operator {name:?} in corrupt_backward"
            )));
        }
    }
    if config.end_to_end_samples == 0 {
        return Err(Error::Config("end_to_end_samples must be positive".into()));
    }
    let mut operators = Vec::with_capacity(OPERATORS.len());
    for (k, &name) in OPERATORS.iter().enumerate() {
        let mut rng = Rng::derive(seed, k as u64);
        let corrupt = config.corrupt_backward.as_deref() == Some(name);
        let mut redrawn = 0;
        let (mut cmp, tolerance) = match name {
            "conv" => (check_conv(&mut rng)?, config.operator_tolerance),
            "bilinear" => (check_bilinear(&mut rng)?, config.operator_tolerance),
            "deform_conv" => (check_deform(&mut rng)?, config.operator_tolerance),
            "focal_loss" => (check_focal(&mut rng)?, config.operator_tolerance),
            "smooth_l1" => (check_smooth_l1(&mut rng)?, config.operator_tolerance),
            "avgpool" => (check_avgpool(&mut rng)?, config.operator_tolerance),
            _ => {
                let variant: AdmVariant = name.trim_start_matches("end_to_end_").parse()?;
                let (cfg, scenes) = end_to_end_fixture(variant, seed);
                let net = end_to_end_network(&cfg);
                let tol = config.end_to_end_tolerance;
                let (cmp, r) = end_to_end_errors(
                    &net,
                    &cfg,
                    &scenes,
                    config.end_to_end_samples,
                    tol,
                    &mut rng,
                    corrupt,
                )?;
                redrawn = r;
                (cmp, tol)
            }
        };
        if corrupt && !name.starts_with("end_to_end") {
            for a in &mut cmp.analytic {
                *a *= 1.0 + 1e-3;
            }
        }
        let max_relative_error = cmp.max_relative_error();
        operators.push(OperatorReport {
            operator: name.to_string(),
            checked: cmp.analytic.len(),
            redrawn,
            max_relative_error,
            tolerance,
            passed: max_relative_error <= tolerance,
        });
    }
    let passed = operators.iter().all(|o| o.passed);
    Ok(GradcheckReport {
        config: config.clone(),
        operators,
        passed,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_run_passes_with_one_entry_per_operator() {
        let r = run_gradcheck(&GradcheckConfig::default(), 0).unwrap();
        for o in &r.operators {
            assert!(o.passed, "{o:?}");
            assert!(o.checked > 0);
        }
        let names: Vec<&str> = r.operators.iter().map(|o| o.operator.as_str()).collect();
        assert_eq!(names, OPERATORS);
    }

    #[test]
    fn corrupted_backward_is_caught() {
        for name in ["deform_conv", "end_to_end_roiconv"] {
            let c = GradcheckConfig {
                corrupt_backward: Some(name.into()),
                ..Default::default()
            };
            let r = run_gradcheck(&c, 0).unwrap();
            assert!(!r.passed);
            assert!(r
                .operators
                .iter()
                .filter(|o| !o.passed)
                .all(|o| o.operator == name));
        }
    }

    #[test]
    fn unknown_corruption_target() {
        let c = GradcheckConfig {
            corrupt_backward: Some("nope".into()),
            ..Default::default()
        };
        assert!(run_gradcheck(&c, 0).is_err());
    }
}
