//! The verification, gradient-check, analysis and benchmark suites behind
//! the command line. Each suite takes a serde config (unknown keys
//! rejected) and a seed and returns a serializable report.

mod analyze;
mod bench;
mod gradcheck;
mod verify;

pub use analyze::{
    implicit_roi_size, run_analyze, AnalyzeConfig, AnalyzeReport, ArmHistogram, ImplicitRoiSize,
    MisalignmentRow,
};
pub use bench::{build_mode, run_bench, BenchConfig, BenchReport, BenchRow};
pub use gradcheck::{
    end_to_end_errors, end_to_end_fixture, end_to_end_network, run_gradcheck, GradcheckConfig,
    GradcheckReport, GradientComparison, OperatorReport, OPERATORS,
};
pub use verify::{coordinate_check, run_verify, CaseReport, VerifyConfig, VerifyReport};
