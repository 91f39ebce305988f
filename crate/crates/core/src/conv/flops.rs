//! Multiply-add accounting for the three alignment operators.
//!
//! The model counts the multiply-adds of the sampling-and-accumulate GEMM
//! (`Cout · Cin · h · w` per output location) plus one bias add per output.
//! Interpolation weights are excluded for both deformable arms, so plain and
//! deformable convolution cost the same and RoIConv differs from
//! deformable convolution only by its offset generation.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::Kernel;
use crate::error::Error;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OpKind {
    Conv,
    DeformConv,
    RoiConv,
}

impl OpKind {
    pub const ALL: [OpKind; 3] = [OpKind::Conv, OpKind::DeformConv, OpKind::RoiConv];

    pub fn name(&self) -> &'static str {
        match self {
            OpKind::Conv => "conv",
            OpKind::DeformConv => "deform_conv",
            OpKind::RoiConv => "roiconv",
        }
    }
}

impl fmt::Display for OpKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for OpKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self, Error> {
        OpKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown op kind {s:?}")))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct FlopShape {
    pub kernel: Kernel,
    pub in_channels: usize,
    pub out_channels: usize,
    pub height: usize,
    pub width: usize,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct FlopCount {
    pub sampling_macs: u64,
    pub bias_adds: u64,
    pub offset_generation_macs: u64,
}

impl FlopCount {
    pub fn total(&self) -> u64 {
        self.sampling_macs + self.bias_adds + self.offset_generation_macs
    }
}

/// Multiply-adds of one forward pass. Offset generation is only counted
/// for RoIConv and only when requested: each of the `2·h·w` offset scalars
/// per location is a combination of `(x1, y1, x2, y2, X, Y)`, charged at six
/// multiply-adds.
pub fn flop_count(kind: OpKind, shape: &FlopShape, with_offset_generation: bool) -> FlopCount {
    let locations = (shape.height * shape.width) as u64;
    let taps = shape.kernel.taps() as u64;
    let sampling_macs = shape.out_channels as u64 * shape.in_channels as u64 * taps * locations;
    let offset_generation_macs = match kind {
        OpKind::RoiConv if with_offset_generation => 2 * taps * 6 * locations,
        _ => 0,
    };
    FlopCount {
        sampling_macs,
        bias_adds: shape.out_channels as u64 * locations,
        offset_generation_macs,
    }
}
