//! Single-threaded micro-benchmark of plain convolution, deformable
//! convolution with precomputed offsets, and RoIConv including its offset
//! generation, alongside the multiply-add model.

use std::hint::black_box;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::boxes::{BBox, BoxMap};
use crate::conv::{
    conv_forward, deform_conv_forward, flop_count, roiconv_offsets, ConvSpec, FeatureMap,
    FlopCount, FlopShape, Kernel, OpKind,
};
use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::{Scalar, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BenchConfig {
    pub kernels: Vec<usize>,
    pub channels: usize,
    pub size: usize,
    pub stride: usize,
    pub warmup: usize,
    pub iterations: usize,
    /// Largest accepted median-time ratio of RoIConv over deformable conv.
    pub max_roiconv_ratio: f64,
}

impl Default for BenchConfig {
    fn default() -> Self {
        Self {
            kernels: vec![3, 5, 7],
            channels: 256,
            size: 8,
            stride: 8,
            warmup: 10,
            iterations: 100,
            max_roiconv_ratio: 1.1,
        }
    }
}

impl BenchConfig {
    pub fn validate(&self) -> Result<()> {
        if self.kernels.is_empty() || self.kernels.contains(&0) {
            return Err(Error::Config(
                "kernels must be a non-empty list of positive sizes".into(),
            ));
        }
        if self.channels == 0 || self.size == 0 || self.stride == 0 || self.iterations == 0 {
            return Err(Error::Config(
                "channels, size, stride and iterations must be positive".into(),
            ));
        }
        if !(self.max_roiconv_ratio > 0.0) {
            return Err(Error::Config("max_roiconv_ratio must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct BenchRow {
    pub kernel: usize,
    pub op: OpKind,
    pub median_ms: f64,
    pub min_ms: f64,
    pub flops: FlopCount,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct BenchReport {
    pub config: BenchConfig,
    pub precision: String,
    pub build_mode: String,
    pub rows: Vec<BenchRow>,
    /// `(kernel, roiconv median / deform_conv median)`.
    pub roiconv_ratios: Vec<(usize, f64)>,
    pub ratio_ok: bool,
    /// Median time grows with kernel size for every op.
    pub monotone_in_kernel: bool,
    /// RoIConv and deformable conv have equal sampling multiply-adds.
    pub sampling_flops_equal: bool,
    pub wall_seconds: f64,
}

impl BenchReport {
    pub fn row(&self, kernel: usize, op: OpKind) -> Option<&BenchRow> {
        self.rows.iter().find(|r| r.kernel == kernel && r.op == op)
    }

    pub fn passed(&self) -> bool {
        self.ratio_ok && self.monotone_in_kernel && self.sampling_flops_equal
    }

    pub fn timings_csv(&self) -> String {
        let mut out = String::from("kernel,op,median_ms,min_ms\n");
        for r in &self.rows {
            out.push_str(&format!(
                "{},{},{:.6},{:.6}\n",
                r.kernel, r.op, r.median_ms, r.min_ms
            ));
        }
        out
    }

    pub fn flops_csv(&self) -> String {
        let mut out =
            String::from("kernel,op,sampling_macs,bias_adds,offset_generation_macs,total\n");
        for r in &self.rows {
            let f = &r.flops;
            out.push_str(&format!(
                "{},{},{},{},{},{}\n",
                r.kernel,
                r.op,
                f.sampling_macs,
                f.bias_adds,
                f.offset_generation_macs,
                f.total()
            ));
        }
        out
    }
}

pub fn build_mode() -> &'static str {
    if cfg!(debug_assertions) {
        "debug"
    } else {
        "release"
    }
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Anchors jittered around each cell, like the refined anchors RoIConv
/// sees in the detector.
fn bench_anchors(rng: &mut Rng, size: usize, stride: usize) -> Result<BoxMap> {
    let s = stride as f64;
    let boxes = (0..size * size)
        .map(|loc| {
            let cx = ((loc / size) as f64 + 0.5 + rng.uniform_in(-0.5, 0.5)) * s;
            let cy = ((loc % size) as f64 + 0.5 + rng.uniform_in(-0.5, 0.5)) * s;
            BBox::from_center(
                cx,
                cy,
                rng.uniform_in(1.0, 6.0) * s,
                rng.uniform_in(1.0, 6.0) * s,
            )
        })
        .collect();
    BoxMap::new(size, size, boxes)
}

pub fn run_bench<T: Scalar>(config: &BenchConfig, seed: u64) -> Result<BenchReport> {
    config.validate()?;
    let started = Instant::now();
    let mut rng = Rng::derive(seed, 0xbe7c);
    let (c, n) = (config.channels, config.size);
    let input = Tensor::from_vec(
        &[c, n, n],
        rng.normal_vec(c * n * n)
            .into_iter()
            .map(T::from_f64)
            .collect(),
    )?;
    let f = FeatureMap::new(input, config.stride)?;
    let anchors = bench_anchors(&mut rng, n, config.stride)?;
    let mut rows = Vec::new();
    let mut ratios = Vec::new();
    let mut sampling_equal = true;
    for &k in &config.kernels {
        let kernel = Kernel::square(k);
        let spec = ConvSpec::<T>::gaussian(
            kernel,
            c,
            c,
            (1.0 / (c * k * k) as f64).sqrt(),
            0.0,
            &mut rng,
        );
        let precomputed = roiconv_offsets::<T>(&anchors, kernel, config.stride)?;
        let run = |op: OpKind| -> Result<()> {
            match op {
                OpKind::Conv => {
                    black_box(conv_forward(&f, &spec)?);
                }
                OpKind::DeformConv => {
                    black_box(deform_conv_forward(&f, &spec, &precomputed)?);
                }
                OpKind::RoiConv => {
                    let off = roiconv_offsets::<T>(black_box(&anchors), kernel, config.stride)?;
                    black_box(deform_conv_forward(&f, &spec, &off)?);
                }
            }
            Ok(())
        };
        for _ in 0..config.warmup {
            for op in OpKind::ALL {
                run(op)?;
            }
        }
        let mut times: [Vec<f64>; 3] = Default::default();
        for it in 0..config.iterations {
            // rotate the order so no op always runs right after another
            for r in 0..3 {
                let idx = (it + r) % 3;
                let t = Instant::now();
                run(OpKind::ALL[idx])?;
                times[idx].push(t.elapsed().as_secs_f64() * 1e3);
            }
        }
        let shape = FlopShape {
            kernel,
            in_channels: c,
            out_channels: c,
            height: n,
            width: n,
        };
        let mut medians = [0.0; 3];
        for (idx, op) in OpKind::ALL.into_iter().enumerate() {
            medians[idx] = median(times[idx].clone());
            rows.push(BenchRow {
                kernel: k,
                op,
                median_ms: medians[idx],
                min_ms: times[idx].iter().copied().fold(f64::INFINITY, f64::min),
                flops: flop_count(op, &shape, true),
            });
        }
        sampling_equal &= flop_count(OpKind::RoiConv, &shape, true).sampling_macs
            == flop_count(OpKind::DeformConv, &shape, true).sampling_macs;
        ratios.push((k, medians[2] / medians[1]));
    }
    let mut sorted = config.kernels.clone();
    sorted.sort_unstable();
    let monotone = OpKind::ALL.iter().all(|&op| {
        let t: Vec<f64> = sorted
            .iter()
            .map(|&k| {
                rows.iter()
                    .find(|r| r.kernel == k && r.op == op)
                    .expect("row")
                    .median_ms
            })
            .collect();
        t.windows(2).all(|w| w[1] > w[0])
    });
    Ok(BenchReport {
        config: config.clone(),
        precision: T::NAME.into(),
        build_mode: build_mode().into(),
        ratio_ok: ratios.iter().all(|&(_, r)| r <= config.max_roiconv_ratio),
        roiconv_ratios: ratios,
        monotone_in_kernel: monotone,
        sampling_flops_equal: sampling_equal,
        rows,
        wall_seconds: started.elapsed().as_secs_f64(),
    })
}
