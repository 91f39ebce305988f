//! One function per subcommand. Each resolves its config, runs, writes its
//! outputs and a `manifest.json` echoing the resolved config.

use std::fs;
use std::path::Path;

use aligndet::detector::{
    compare_variants, evaluate, evaluate_detections, load_checkpoint, loss_curve_csv, make_dataset,
    save_checkpoint, train, AdmVariant, CompareSettings, GroundTruth,
};
use aligndet::harness::{
    build_mode, run_analyze, run_bench, run_gradcheck, run_verify, AnalyzeConfig, BenchConfig,
    GradcheckConfig, VerifyConfig,
};
use serde::de::DeserializeOwned;
use serde::Serialize;
use serde_json::{json, Value};

use crate::config::{CompareRun, DetectionsFile, EvalRun, TrainRun};
use crate::{Cli, Command, Precision};

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error(transparent)]
    Run(#[from] aligndet::Error),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Usage(_) | CliError::Run(aligndet::Error::Config(_)) => 2,
            CliError::Run(_) => 1,
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Run(e.into())
    }
}

type Result<T> = std::result::Result<T, CliError>;

pub struct Outcome {
    pub passed: bool,
}

/// Overlays `over` onto `base`, recursing into objects.
fn merge(base: &mut Value, over: Value) {
    match (base, over) {
        (Value::Object(b), Value::Object(o)) => {
            for (k, v) in o {
                match b.get_mut(&k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}

/// `base` with the keys of the `--config` file applied on top. Unknown keys
/// are rejected when the merged value is decoded.
fn resolve<T: Serialize + DeserializeOwned>(cli: &Cli, base: T) -> Result<T> {
    let Some(path) = &cli.config else {
        return Ok(base);
    };
    let text = fs::read_to_string(path)
        .map_err(|e| CliError::Usage(format!("cannot read {}: {e}", path.display())))?;
    let over: Value = serde_json::from_str(&text)
        .map_err(|e| CliError::Usage(format!("{} is not JSON: {e}", path.display())))?;
    if !over.is_object() {
        return Err(CliError::Usage(format!(
            "{} must hold a JSON object",
            path.display()
        )));
    }
    let mut value = serde_json::to_value(base).expect("configs serialize");
    merge(&mut value, over);
    serde_json::from_value(value)
        .map_err(|e| CliError::Usage(format!("invalid config {}: {e}", path.display())))
}

fn precision(cli: &Cli, default: Precision) -> Precision {
    cli.precision.unwrap_or(default)
}

fn require_f64(cli: &Cli) -> Result<()> {
    match cli.precision {
        Some(Precision::F32) => Err(CliError::Usage(format!(
            "{} runs in double precision only",
            cli.command.name()
        ))),
        _ => Ok(()),
    }
}

struct Writer<'a> {
    dir: &'a Path,
    files: Vec<String>,
}

impl<'a> Writer<'a> {
    fn new(dir: &'a Path) -> Result<Self> {
        fs::create_dir_all(dir)?;
        Ok(Self {
            dir,
            files: Vec::new(),
        })
    }

    fn text(&mut self, name: &str, body: &str) -> Result<()> {
        fs::write(self.dir.join(name), body)?;
        self.files.push(name.to_string());
        Ok(())
    }

    fn json(&mut self, name: &str, value: &impl Serialize) -> Result<()> {
        let body = serde_json::to_string_pretty(value).map_err(aligndet::Error::from)?;
        self.text(name, &(body + "\n"))
    }

    fn manifest(
        mut self,
        cli: &Cli,
        prec: Precision,
        config: &impl Serialize,
        passed: bool,
        summary: Value,
    ) -> Result<Outcome> {
        let files = std::mem::take(&mut self.files);
        let m = json!({
            "command": cli.command.name(),
            "version": env!("CARGO_PKG_VERSION"),
            "seed": cli.seed,
            "precision": match prec { Precision::F32 => "f32", Precision::F64 => "f64" },
            "build_mode": build_mode(),
            "config": config,
            "outputs": files,
            "passed": passed,
            "summary": summary,
        });
        self.json("manifest.json", &m)?;
        Ok(Outcome { passed })
    }
}

pub fn run(cli: &Cli) -> Result<Outcome> {
    match cli.command {
        Command::Verify => verify(cli),
        Command::Gradcheck => gradcheck(cli),
        Command::Analyze => analyze(cli),
        Command::Train => train_cmd(cli),
        Command::Eval => eval(cli),
        Command::Compare => compare(cli),
        Command::Bench => bench(cli),
    }
}

fn verify(cli: &Cli) -> Result<Outcome> {
    let prec = precision(cli, Precision::F64);
    let base = match prec {
        Precision::F32 => VerifyConfig::single_precision(),
        Precision::F64 => VerifyConfig::default(),
    };
    let config = resolve(cli, base)?;
    config.validate()?;
    let report = match prec {
        Precision::F32 => run_verify::<f32>(&config, cli.seed)?,
        Precision::F64 => run_verify::<f64>(&config, cli.seed)?,
    };
    let mut w = Writer::new(&cli.out)?;
    let mut csv = String::from("case,kernel_h,kernel_w,in_channels,out_channels,height,width,stride,equivalence_error,identity_error,adjoint_error\n");
    for c in &report.cases {
        csv.push_str(&format!(
            "{},{},{},{},{},{},{},{},{:e},{:e},{:e}\n",
            c.case,
            c.kernel.h,
            c.kernel.w,
            c.in_channels,
            c.out_channels,
            c.height,
            c.width,
            c.stride,
            c.equivalence_error,
            c.identity_error,
            c.adjoint_error
        ));
    }
    w.text("verify_cases.csv", &csv)?;
    w.json("verify.json", &report)?;
    let summary = json!({
        "max_equivalence_error": report.max_equivalence_error,
        "max_identity_error": report.max_identity_error,
        "max_adjoint_error": report.max_adjoint_error,
        "max_coordinate_error": report.max_coordinate_error,
    });
    eprintln!("{summary}");
    w.manifest(cli, prec, &config, report.passed, summary)
}

fn gradcheck(cli: &Cli) -> Result<Outcome> {
    require_f64(cli)?;
    let config = resolve(cli, GradcheckConfig::default())?;
    let report = run_gradcheck(&config, cli.seed)?;
    let mut w = Writer::new(&cli.out)?;
    let mut csv = String::from("operator,checked,redrawn,max_relative_error,tolerance,passed\n");
    for o in &report.operators {
        csv.push_str(&format!(
            "{},{},{},{:e},{:e},{}\n",
            o.operator, o.checked, o.redrawn, o.max_relative_error, o.tolerance, o.passed
        ));
        eprintln!(
            "{:<28} {:>10.3e}  {}",
            o.operator,
            o.max_relative_error,
            if o.passed { "ok" } else { "FAIL" }
        );
    }
    w.text("gradcheck.csv", &csv)?;
    w.json("gradcheck.json", &report)?;
    let failed: Vec<&str> = report
        .operators
        .iter()
        .filter(|o| !o.passed)
        .map(|o| o.operator.as_str())
        .collect();
    w.manifest(
        cli,
        Precision::F64,
        &config,
        report.passed,
        json!({ "failed": failed }),
    )
}

fn analyze(cli: &Cli) -> Result<Outcome> {
    require_f64(cli)?;
    let config = resolve(cli, AnalyzeConfig::default())?;
    let report = run_analyze(&config, cli.seed)?;
    let mut w = Writer::new(&cli.out)?;
    w.text("implicit_rois.csv", &report.implicit_roi_csv())?;
    w.text("misalignment.csv", &report.misalignment_csv())?;
    let mut means = serde_json::Map::new();
    for h in &report.histograms {
        w.text(&format!("alignment_{}.csv", h.arm), &h.histogram.to_csv())?;
        means.insert(h.arm.to_string(), json!(h.histogram.mean));
    }
    w.json("analyze.json", &report)?;
    let summary = json!({ "anchor_source": report.anchor_source, "mean_alignment_iou": means });
    eprintln!("{summary}");
    w.manifest(cli, Precision::F64, &config, true, summary)
}

fn train_cmd(cli: &Cli) -> Result<Outcome> {
    require_f64(cli)?;
    let mut run = resolve(cli, TrainRun::default())?;
    run.model.seed = cli.seed;
    run.model.validate()?;
    if run.train_scenes == 0 {
        return Err(CliError::Usage("train_scenes must be positive".into()));
    }
    let scenes = make_dataset(run.data_seed, run.train_scenes, run.model.image_size, false);
    let (state, curve) = train(&run.model, &scenes, run.steps, |step, p| {
        if (step + 1) % 100 == 0 {
            eprintln!("step {:>6}  loss {:.5}", step + 1, p.total);
        }
    })?;
    let mut w = Writer::new(&cli.out)?;
    w.text("loss.csv", &loss_curve_csv(&curve))?;
    save_checkpoint(
        &cli.out.join("checkpoint"),
        &run.model,
        &state.net,
        state.step,
    )?;
    w.files.push("checkpoint/".into());
    let summary = json!({
        "steps": state.step,
        "initial_loss": curve.first().map(|p| p.total),
        "final_loss": curve.last().map(|p| p.total),
    });
    w.manifest(cli, Precision::F64, &run, true, summary)
}

fn eval(cli: &Cli) -> Result<Outcome> {
    require_f64(cli)?;
    let run = resolve(cli, EvalRun::default())?;
    let metrics = match (&run.checkpoint, &run.detections) {
        (Some(dir), None) => {
            let (config, net, _) = load_checkpoint(dir)?;
            let scenes = make_dataset(
                run.data_seed,
                run.eval_scenes.max(1),
                config.image_size,
                true,
            );
            evaluate(&net, &config, &scenes)?
        }
        (None, Some(path)) => {
            let text = fs::read_to_string(path)?;
            let file: DetectionsFile = serde_json::from_str(&text).map_err(|e| {
                CliError::Usage(format!("invalid detections file {}: {e}", path.display()))
            })?;
            let dets: Vec<_> = file.scenes.iter().map(|s| s.detections.clone()).collect();
            let gts: Vec<Vec<GroundTruth>> =
                file.scenes.iter().map(|s| s.ground_truth.clone()).collect();
            evaluate_detections(&dets, &gts)?
        }
        _ => {
            return Err(CliError::Usage(
                "eval needs exactly one of `checkpoint` and `detections`".into(),
            ))
        }
    };
    let mut w = Writer::new(&cli.out)?;
    w.json("metrics.json", &metrics)?;
    eprintln!(
        "mAP {:.4}  AP50 {:.4}  AP75 {:.4}",
        metrics.map, metrics.ap50, metrics.ap75
    );
    let summary = serde_json::to_value(&metrics).map_err(aligndet::Error::from)?;
    w.manifest(cli, Precision::F64, &run, true, summary)
}

fn compare(cli: &Cli) -> Result<Outcome> {
    require_f64(cli)?;
    let run = resolve(cli, CompareRun::default())?;
    run.model.validate()?;
    let settings = CompareSettings {
        seeds: run.seeds.clone(),
        train_scenes: run.train_scenes,
        eval_scenes: run.eval_scenes,
        steps: run.steps,
        data_seed: cli.seed,
    };
    let report = compare_variants(&run.model, &settings, |v, seed, m| {
        eprintln!(
            "{v:<15} seed {seed:>3}  mAP {:.4}  AP50 {:.4}  AP75 {:.4}",
            m.map, m.ap50, m.ap75
        );
    })?;
    let mut w = Writer::new(&cli.out)?;
    w.text("comparison.csv", &report.to_csv())?;
    for a in &report.arms {
        w.text(
            &format!("alignment_{}.csv", a.variant),
            &a.alignment.to_csv(),
        )?;
    }
    w.json("comparison.json", &report)?;
    let median = |v| report.arm(v).map(|a| a.median_map);
    let (roi, van) = (median(AdmVariant::Roiconv), median(AdmVariant::VanillaConv));
    let passed = matches!((roi, van), (Some(r), Some(v)) if r > v);
    eprint!("{}", report.to_csv());
    let summary = json!({
        "median_map": report.arms.iter().map(|a| (a.variant.to_string(), json!(a.median_map))).collect::<serde_json::Map<_, _>>(),
        "roiconv_beats_vanilla_conv": passed,
    });
    w.manifest(cli, Precision::F64, &run, passed, summary)
}

fn bench(cli: &Cli) -> Result<Outcome> {
    let prec = precision(cli, Precision::F32);
    let config = resolve(cli, BenchConfig::default())?;
    config.validate()?;
    let report = match prec {
        Precision::F32 => run_bench::<f32>(&config, cli.seed)?,
        Precision::F64 => run_bench::<f64>(&config, cli.seed)?,
    };
    let mut w = Writer::new(&cli.out)?;
    w.text("bench_timings.csv", &report.timings_csv())?;
    w.text("bench_flops.csv", &report.flops_csv())?;
    w.json("bench.json", &report)?;
    eprint!("{}", report.timings_csv());
    let summary = json!({
        "roiconv_over_deform_conv": report.roiconv_ratios,
        "monotone_in_kernel": report.monotone_in_kernel,
        "sampling_flops_equal": report.sampling_flops_equal,
        "build_mode": report.build_mode,
        "wall_seconds": report.wall_seconds,
    });
    eprintln!("{summary}");
    w.manifest(cli, prec, &config, report.passed(), summary)
}
