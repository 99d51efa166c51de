//! Argument parsing and the subcommands.

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use clap::{Args, Parser, Subcommand, ValueEnum};
use cpaudit_core::audit::{
    calibration_curve, coverage_report, default_target_grid, efficiency_curve, superclass_collapse, StratumRow,
};
use cpaudit_core::bounds::BoundKind;
use cpaudit_core::conformal::{
    calibrate_dataset, mondrian_calibrate, predict_sets, weighted_calibrate_dataset, Partition, PredictionSet,
};
use cpaudit_core::data::{split_dataset, SplitSpec, Taxonomy};
use cpaudit_core::pitfalls::{run_pitfalls, Pitfall, PitfallsConfig};
use cpaudit_core::selective::{choose_lambda, selective_curve, size_one_misuse_demo, SelectiveConfig};
use cpaudit_core::shift::{label_shift_weights, shift_experiment, ShiftSpec};
use cpaudit_core::synth::{generate, SynthConfig};
use cpaudit_core::trials::Sequential;
use cpaudit_core::{CalibrationResult, CoverageReport, ScoreConfig};
use serde::Serialize;

use crate::error::{CliError, Result};
use crate::io::{read_dataset, read_json, sibling, write_csv_rows, write_dataset, write_json, Format};
use crate::manifest::{FileDigest, RunManifest};
use crate::parallel::Parallel;

#[derive(Debug, Parser, Serialize)]
#[command(name = "cpaudit", version, about = "Conformal prediction sets and coverage audits for classifier outputs")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Command {
    /// Generate a synthetic dataset from a config JSON.
    Synth(SynthArgs),
    /// Split a dataset into calibration and evaluation parts.
    Split(SplitArgs),
    /// Fit a conformal threshold on calibration data.
    Calibrate(CalibrateArgs),
    /// Build prediction sets with a fitted calibration.
    Predict(PredictArgs),
    /// Coverage and efficiency reports.
    #[command(subcommand)]
    Audit(AuditCommand),
    /// Shift an evaluation set and measure coverage before and after recalibration.
    Shift(ShiftArgs),
    /// Selective-accuracy curve and certified confidence threshold.
    Selective(SelectiveArgs),
    /// Run the bundled pitfall demonstrations.
    Pitfalls(PitfallsArgs),
    /// Re-run a command from its manifest and check its outputs are identical.
    Replay(ReplayArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum ScoreKind {
    Deterministic,
    Randomized,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct ScoreArgs {
    #[arg(long, default_value_t = 0.1)]
    pub alpha: f64,
    #[arg(long, value_enum, default_value_t = ScoreKind::Deterministic)]
    pub score: ScoreKind,
    /// Seed for randomized scores.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

impl ScoreArgs {
    fn config(&self) -> ScoreConfig {
        match self.score {
            ScoreKind::Deterministic => ScoreConfig::deterministic(self.alpha),
            ScoreKind::Randomized => ScoreConfig::randomized(self.alpha, self.seed),
        }
    }
}

/// `none`, `class` or `group:<attribute>`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum PartitionArg {
    None,
    Class,
    Group(String),
}

impl FromStr for PartitionArg {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "none" => Ok(PartitionArg::None),
            "class" => Ok(PartitionArg::Class),
            _ => match s.strip_prefix("group:") {
                Some(attr) if !attr.is_empty() => Ok(PartitionArg::Group(attr.to_string())),
                _ => Err(format!("expected none, class or group:<attribute>, got {s:?}")),
            },
        }
    }
}

#[derive(Debug, Args, Serialize)]
pub struct SynthArgs {
    #[arg(long)]
    pub config: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, value_enum)]
    pub format: Option<Format>,
    /// Overrides the seed in the config.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Overrides the record count in the config.
    #[arg(long)]
    pub n: Option<usize>,
}

#[derive(Debug, Args, Serialize)]
pub struct SplitArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub cal_size: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Keep class proportions in both parts.
    #[arg(long)]
    pub stratify: bool,
    #[arg(long)]
    pub out_cal: PathBuf,
    #[arg(long)]
    pub out_eval: PathBuf,
    #[arg(long, value_enum)]
    pub format: Option<Format>,
}

#[derive(Debug, Args, Serialize)]
pub struct CalibrateArgs {
    #[arg(long)]
    pub cal: PathBuf,
    #[command(flatten)]
    pub score: ScoreArgs,
    #[arg(long, default_value = "none")]
    pub partition: PartitionArg,
    /// Comma-separated deployment class distribution; reweights the
    /// calibration set toward it.
    #[arg(long)]
    pub label_shift_target: Option<String>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args, Serialize)]
pub struct PredictArgs {
    #[arg(long)]
    pub calib: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    /// Seed for randomized scores.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Subcommand, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum AuditCommand {
    /// Marginal, per-class, per-group and per-set-size coverage.
    Coverage(CoverageArgs),
    /// Empirical against target coverage over an alpha grid.
    Curve(CurveArgs),
    /// Singleton fraction and informativeness over an alpha grid.
    Efficiency(EfficiencyArgs),
    /// Map prediction sets through a class taxonomy.
    Collapse(CollapseArgs),
}

#[derive(Debug, Args, Serialize)]
pub struct CoverageArgs {
    #[arg(long)]
    pub sets: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    /// Recorded in the report.
    #[arg(long, default_value_t = 0.1)]
    pub alpha: f64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args, Serialize)]
pub struct CurveArgs {
    #[arg(long)]
    pub cal: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    #[command(flatten)]
    pub score: ScoreArgs,
    /// Comma-separated alphas; defaults to targets from model accuracy to 0.999.
    #[arg(long)]
    pub alphas: Option<String>,
    #[arg(long, default_value_t = 20)]
    pub points: usize,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args, Serialize)]
pub struct EfficiencyArgs {
    #[arg(long)]
    pub cal: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    #[command(flatten)]
    pub score: ScoreArgs,
    /// Taxonomy JSON; overrides one stored in the dataset.
    #[arg(long)]
    pub taxonomy: Option<PathBuf>,
    #[arg(long)]
    pub alphas: Option<String>,
    #[arg(long, default_value_t = 10)]
    pub points: usize,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args, Serialize)]
pub struct CollapseArgs {
    #[arg(long)]
    pub sets: PathBuf,
    #[arg(long)]
    pub taxonomy: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args, Serialize)]
pub struct ShiftArgs {
    #[arg(long)]
    pub cal: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    /// Shift spec as inline JSON or a path to a JSON file.
    #[arg(long)]
    pub spec: String,
    #[arg(long, default_value_t = 1000)]
    pub n_recal: usize,
    #[command(flatten)]
    pub score: ScoreArgs,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum BoundArg {
    Hoeffding,
    ClopperPearson,
}

impl From<BoundArg> for BoundKind {
    fn from(b: BoundArg) -> Self {
        match b {
            BoundArg::Hoeffding => BoundKind::Hoeffding,
            BoundArg::ClopperPearson => BoundKind::ClopperPearson,
        }
    }
}

#[derive(Debug, Args, Serialize)]
pub struct SelectiveArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, default_value_t = 0.1)]
    pub delta: f64,
    /// Accuracy to certify; without it only the curve is written.
    #[arg(long)]
    pub target_accuracy: Option<f64>,
    #[arg(long, value_enum, default_value_t = BoundArg::Hoeffding)]
    pub bound: BoundArg,
    #[arg(long, default_value_t = 101)]
    pub grid_points: usize,
    /// Curve CSV.
    #[arg(long)]
    pub out: PathBuf,
    /// Certification JSON; defaults to the curve path with a .json extension.
    #[arg(long)]
    pub cert_out: Option<PathBuf>,
    /// Calibration set for the singleton-set comparison.
    #[arg(long, requires = "misuse_out")]
    pub cal: Option<PathBuf>,
    #[arg(long, requires = "cal")]
    pub misuse_out: Option<PathBuf>,
    #[arg(long)]
    pub alphas: Option<String>,
    #[command(flatten)]
    pub score: ScoreArgs,
}

#[derive(Debug, Args, Serialize)]
pub struct PitfallsArgs {
    /// Config JSON; the bundled default when absent.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub trials: Option<usize>,
    /// Run only these demos (repeatable or comma-separated).
    #[arg(long, value_delimiter = ',')]
    pub only: Vec<String>,
    /// Worker threads for Monte Carlo trials; 1 runs them in order on this thread.
    #[arg(long, default_value_t = 1)]
    pub parallel_trials: usize,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args, Serialize)]
pub struct ReplayArgs {
    #[arg(long)]
    pub manifest: PathBuf,
}

/// What a command read and wrote.
#[derive(Default)]
struct Run {
    inputs: Vec<PathBuf>,
    outputs: Vec<PathBuf>,
    seeds: BTreeMap<String, u64>,
    resolved: Option<serde_json::Value>,
}

impl Run {
    fn seed(mut self, name: &str, value: u64) -> Self {
        self.seeds.insert(name.to_string(), value);
        self
    }
}

/// Parses `args` (including the program name), runs the command and returns
/// the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let args: Vec<OsString> = args.into_iter().map(Into::into).collect();
    let cli = match Cli::try_parse_from(&args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 1 } else { 0 };
        }
    };
    let raw: Vec<String> = args.iter().skip(1).map(|a| a.to_string_lossy().into_owned()).collect();
    match execute(&cli, &raw) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

/// Runs a parsed command and writes its manifest next to the primary output.
pub fn execute(cli: &Cli, raw_args: &[String]) -> Result<()> {
    if let Command::Replay(a) = &cli.command {
        return replay(&a.manifest);
    }
    let run = dispatch(&cli.command)?;
    let mut config = serde_json::to_value(&cli.command).map_err(|e| CliError::Usage(e.to_string()))?;
    if let (Some(resolved), serde_json::Value::Object(map)) = (run.resolved.clone(), &mut config) {
        map.insert("resolved".to_string(), resolved);
    }
    let manifest = RunManifest {
        command: command_name(&cli.command).to_string(),
        args: raw_args.to_vec(),
        config,
        seeds: run.seeds.clone(),
        inputs: run.inputs.iter().map(|p| FileDigest::of(p)).collect::<Result<_>>()?,
        outputs: run.outputs.iter().map(|p| FileDigest::of(p)).collect::<Result<_>>()?,
        version: env!("CARGO_PKG_VERSION").to_string(),
        timestamp: RunManifest::timestamp_now(),
    };
    write_json(&manifest_path(&run.outputs[0]), &manifest)
}

pub fn manifest_path(primary_output: &Path) -> PathBuf {
    sibling(primary_output, ".manifest.json")
}

fn command_name(c: &Command) -> &'static str {
    match c {
        Command::Synth(_) => "synth",
        Command::Split(_) => "split",
        Command::Calibrate(_) => "calibrate",
        Command::Predict(_) => "predict",
        Command::Audit(AuditCommand::Coverage(_)) => "audit coverage",
        Command::Audit(AuditCommand::Curve(_)) => "audit curve",
        Command::Audit(AuditCommand::Efficiency(_)) => "audit efficiency",
        Command::Audit(AuditCommand::Collapse(_)) => "audit collapse",
        Command::Shift(_) => "shift",
        Command::Selective(_) => "selective",
        Command::Pitfalls(_) => "pitfalls",
        Command::Replay(_) => "replay",
    }
}

fn dispatch(c: &Command) -> Result<Run> {
    match c {
        Command::Synth(a) => cmd_synth(a),
        Command::Split(a) => cmd_split(a),
        Command::Calibrate(a) => cmd_calibrate(a),
        Command::Predict(a) => cmd_predict(a),
        Command::Audit(AuditCommand::Coverage(a)) => cmd_coverage(a),
        Command::Audit(AuditCommand::Curve(a)) => cmd_curve(a),
        Command::Audit(AuditCommand::Efficiency(a)) => cmd_efficiency(a),
        Command::Audit(AuditCommand::Collapse(a)) => cmd_collapse(a),
        Command::Shift(a) => cmd_shift(a),
        Command::Selective(a) => cmd_selective(a),
        Command::Pitfalls(a) => cmd_pitfalls(a),
        Command::Replay(_) => unreachable!("handled by execute"),
    }
}

fn parse_list(what: &str, s: &str) -> Result<Vec<f64>> {
    s.split(',')
        .map(|x| {
            x.trim()
                .parse::<f64>()
                .map_err(|_| CliError::Usage(format!("{what}: `{x}` is not a number")))
        })
        .collect()
}

fn resolved<T: Serialize>(value: &T) -> Option<serde_json::Value> {
    serde_json::to_value(value).ok()
}

/// CSV next to a JSON output (`x.json` gives `x.csv`).
fn table_path(out: &Path) -> PathBuf {
    if Format::from_path(out) == Format::Csv {
        sibling(out, ".csv")
    } else {
        out.with_extension("csv")
    }
}

fn cmd_synth(a: &SynthArgs) -> Result<Run> {
    let mut cfg: SynthConfig = read_json(&a.config)?;
    if let Some(seed) = a.seed {
        cfg.seed = seed;
    }
    if let Some(n) = a.n {
        cfg.n = n;
    }
    let ds = generate(&cfg)?;
    write_dataset(&a.out, &ds, a.format)?;
    println!("wrote {} records, {} classes, accuracy {:.4}", ds.len(), ds.num_classes(), ds.accuracy());
    Ok(Run {
        inputs: vec![a.config.clone()],
        outputs: vec![a.out.clone()],
        resolved: resolved(&cfg),
        ..Run::default()
    }
    .seed("synth", cfg.seed))
}

fn cmd_split(a: &SplitArgs) -> Result<Run> {
    let ds = read_dataset(&a.data, None)?;
    let (cal, eval) = split_dataset(
        &ds,
        &SplitSpec {
            calibration_size: a.cal_size,
            seed: a.seed,
            stratify_by_class: a.stratify,
        },
    )?;
    write_dataset(&a.out_cal, &cal, a.format)?;
    write_dataset(&a.out_eval, &eval, a.format)?;
    println!("calibration {} records, evaluation {} records", cal.len(), eval.len());
    Ok(Run {
        inputs: vec![a.data.clone()],
        outputs: vec![a.out_cal.clone(), a.out_eval.clone()],
        ..Run::default()
    }
    .seed("split", a.seed))
}

fn cmd_calibrate(a: &CalibrateArgs) -> Result<Run> {
    let cal = read_dataset(&a.cal, None)?;
    let cfg = a.score.config();
    let calib: CalibrationResult = match (&a.partition, &a.label_shift_target) {
        (PartitionArg::None, None) => calibrate_dataset(&cal, &cfg)?,
        (PartitionArg::None, Some(target)) => {
            let weights = label_shift_weights(&cal, &parse_list("label-shift-target", target)?)?;
            weighted_calibrate_dataset(&cal, &weights, &cfg)?
        }
        (PartitionArg::Class, None) => mondrian_calibrate(&cal, &Partition::ByClass, &cfg)?,
        (PartitionArg::Group(attr), None) => mondrian_calibrate(&cal, &Partition::ByGroup(attr.clone()), &cfg)?,
        (_, Some(_)) => {
            return Err(CliError::Usage("--label-shift-target cannot be combined with a partition".into()));
        }
    };
    write_json(&a.out, &calib)?;
    println!("tau {} from {} calibration records at alpha {}", calib.tau, calib.n_cal, calib.alpha);
    Ok(Run {
        inputs: vec![a.cal.clone()],
        outputs: vec![a.out.clone()],
        ..Run::default()
    }
    .seed("score", a.score.seed))
}

fn cmd_predict(a: &PredictArgs) -> Result<Run> {
    let calib: CalibrationResult = read_json(&a.calib)?;
    let ds = read_dataset(&a.data, None)?;
    let sets = predict_sets(&ds, &calib, a.seed)?;
    write_json(&a.out, &sets)?;
    let mean = sets.iter().map(PredictionSet::len).sum::<usize>() as f64 / sets.len().max(1) as f64;
    println!("{} prediction sets, mean size {mean:.4}", sets.len());
    Ok(Run {
        inputs: vec![a.calib.clone(), a.data.clone()],
        outputs: vec![a.out.clone()],
        ..Run::default()
    }
    .seed("prediction", a.seed))
}

fn write_report(out: &Path, report: &CoverageReport) -> Result<PathBuf> {
    write_json(out, report)?;
    let table = table_path(out);
    write_csv_rows(&table, &report.rows())?;
    Ok(table)
}

fn cmd_coverage(a: &CoverageArgs) -> Result<Run> {
    let sets: Vec<PredictionSet> = read_json(&a.sets)?;
    let ds = read_dataset(&a.data, None)?;
    let report = coverage_report(&sets, &ds, a.alpha)?;
    let table = write_report(&a.out, &report)?;
    let m = report.marginal;
    println!("marginal coverage {:.4} [{:.4}, {:.4}] over {} records", m.rate, m.lower, m.upper, m.n);
    Ok(Run {
        inputs: vec![a.sets.clone(), a.data.clone()],
        outputs: vec![a.out.clone(), table],
        ..Run::default()
    })
}

fn alpha_grid(list: &Option<String>, accuracy: f64, points: usize) -> Result<Vec<f64>> {
    match list {
        Some(s) => parse_list("alphas", s),
        None => Ok(default_target_grid(accuracy, points).into_iter().map(|t| 1.0 - t).collect()),
    }
}

fn cmd_curve(a: &CurveArgs) -> Result<Run> {
    let cal = read_dataset(&a.cal, None)?;
    let eval = read_dataset(&a.data, None)?;
    let alphas = alpha_grid(&a.alphas, eval.accuracy(), a.points)?;
    let curve = calibration_curve(&cal, &eval, &alphas, &a.score.config())?;
    write_json(&a.out, &curve)?;
    let table = table_path(&a.out);
    write_csv_rows(&table, &curve.points)?;
    println!("{} curve points", curve.points.len());
    Ok(Run {
        inputs: vec![a.cal.clone(), a.data.clone()],
        outputs: vec![a.out.clone(), table],
        ..Run::default()
    }
    .seed("score", a.score.seed))
}

fn cmd_efficiency(a: &EfficiencyArgs) -> Result<Run> {
    let cal = read_dataset(&a.cal, None)?;
    let mut eval = read_dataset(&a.data, None)?;
    let mut inputs = vec![a.cal.clone(), a.data.clone()];
    if let Some(path) = &a.taxonomy {
        let taxonomy: Taxonomy = read_json(path)?;
        eval = eval.with_taxonomy(Some(taxonomy))?;
        inputs.push(path.clone());
    }
    let alphas = alpha_grid(&a.alphas, eval.accuracy(), a.points)?;
    let points = efficiency_curve(&cal, &eval, &alphas, &a.score.config())?;
    write_json(&a.out, &points)?;
    let table = table_path(&a.out);
    write_csv_rows(&table, &points)?;
    println!("{} efficiency points", points.len());
    Ok(Run {
        inputs,
        outputs: vec![a.out.clone(), table],
        ..Run::default()
    }
    .seed("score", a.score.seed))
}

fn cmd_collapse(a: &CollapseArgs) -> Result<Run> {
    let sets: Vec<PredictionSet> = read_json(&a.sets)?;
    let taxonomy: Taxonomy = read_json(&a.taxonomy)?;
    let collapsed = superclass_collapse(&sets, &taxonomy)?;
    write_json(&a.out, &collapsed)?;
    println!("informativeness {:.4}", collapsed.informativeness);
    Ok(Run {
        inputs: vec![a.sets.clone(), a.taxonomy.clone()],
        outputs: vec![a.out.clone()],
        ..Run::default()
    })
}

#[derive(Serialize)]
struct PhaseRow<'a> {
    phase: &'a str,
    stratum: &'a str,
    key: &'a str,
    n: usize,
    covered: usize,
    rate: f64,
    lower: f64,
    upper: f64,
}

fn phase_rows<'a>(phase: &'a str, rows: &'a [StratumRow]) -> impl Iterator<Item = PhaseRow<'a>> {
    rows.iter().map(move |r| PhaseRow {
        phase,
        stratum: &r.stratum,
        key: &r.key,
        n: r.n,
        covered: r.covered,
        rate: r.rate,
        lower: r.lower,
        upper: r.upper,
    })
}

fn cmd_shift(a: &ShiftArgs) -> Result<Run> {
    let cal = read_dataset(&a.cal, None)?;
    let eval = read_dataset(&a.data, None)?;
    let mut inputs = vec![a.cal.clone(), a.data.clone()];
    let spec: ShiftSpec = if a.spec.trim_start().starts_with('{') {
        serde_json::from_str(&a.spec).map_err(|e| CliError::Usage(format!("--spec: {e}")))?
    } else {
        let path = PathBuf::from(&a.spec);
        let spec = read_json(&path)?;
        inputs.push(path);
        spec
    };
    let exp = shift_experiment(&cal, &eval, &spec, &a.score.config(), a.n_recal, a.score.seed)?;
    write_json(&a.out, &exp)?;

    let phases = [
        ("before", Some(&exp.before)),
        ("after_shift", Some(&exp.after_shift)),
        ("after_recalibration", Some(&exp.after_recalibration)),
        ("after_weighting", exp.after_weighting.as_ref()),
    ];
    let tables: Vec<(&str, Vec<StratumRow>)> =
        phases.iter().filter_map(|(p, r)| r.map(|r| (*p, r.rows()))).collect();
    let rows: Vec<PhaseRow> = tables.iter().flat_map(|(p, rows)| phase_rows(p, rows)).collect();
    let table = table_path(&a.out);
    write_csv_rows(&table, &rows)?;

    let r = &exp.result;
    println!(
        "coverage before {:.4}, after shift {:.4}, after recalibration {:.4}",
        r.coverage_before, r.coverage_after_shift, r.coverage_after_recalibration
    );
    if let Some(w) = r.coverage_after_weighting {
        println!("coverage with reweighted calibration {w:.4}");
    }
    Ok(Run {
        inputs,
        outputs: vec![a.out.clone(), table],
        resolved: resolved(&spec),
        ..Run::default()
    }
    .seed("shift", spec.seed)
    .seed("experiment", a.score.seed))
}

#[derive(Serialize)]
struct CurveRow {
    lambda: f64,
    rejection: f64,
    n_kept: usize,
    acc: f64,
    lcb: f64,
}

#[derive(Serialize)]
struct CertificationFile {
    delta: f64,
    target_accuracy: Option<f64>,
    bound: BoundArg,
    certification: Option<cpaudit_core::selective::Certification>,
}

fn cmd_selective(a: &SelectiveArgs) -> Result<Run> {
    let ds = read_dataset(&a.data, None)?;
    let mut cfg = SelectiveConfig::for_dataset(&ds, a.delta, a.target_accuracy);
    cfg.grid = cpaudit_core::selective::default_grid(&ds, a.grid_points);
    cfg.bound = a.bound.into();
    let curve = selective_curve(&ds, &cfg)?;
    let rows: Vec<CurveRow> = curve
        .points
        .iter()
        .map(|p| CurveRow {
            lambda: p.lambda,
            rejection: p.rejection_fraction,
            n_kept: p.n_kept,
            acc: p.empirical_accuracy,
            lcb: p.lower_bound,
        })
        .collect();
    write_csv_rows(&a.out, &rows)?;
    let mut inputs = vec![a.data.clone()];
    let mut outputs = vec![a.out.clone()];

    let certification = match a.target_accuracy {
        Some(_) => choose_lambda(&ds, &cfg)?,
        None => None,
    };
    let cert_out = a.cert_out.clone().unwrap_or_else(|| a.out.with_extension("json"));
    write_json(
        &cert_out,
        &CertificationFile {
            delta: a.delta,
            target_accuracy: a.target_accuracy,
            bound: a.bound,
            certification,
        },
    )?;
    outputs.push(cert_out);
    match (a.target_accuracy, certification) {
        (Some(t), Some(c)) => println!(
            "certified accuracy {:.4} >= {t} at lambda {} keeping {} records",
            c.certified_accuracy, c.lambda, c.n_kept
        ),
        (Some(t), None) => println!("no threshold certifies accuracy {t} at delta {}", a.delta),
        (None, _) => println!("{} curve points", rows.len()),
    }

    if let (Some(cal_path), Some(misuse_out)) = (&a.cal, &a.misuse_out) {
        let cal = read_dataset(cal_path, None)?;
        let alphas = match &a.alphas {
            Some(s) => parse_list("alphas", s)?,
            None => vec![0.01, 0.02, 0.05, 0.1, 0.15, 0.2, 0.3, 0.4],
        };
        let report = size_one_misuse_demo(&cal, &ds, &alphas, &a.score.config(), a.delta)?;
        write_json(misuse_out, &report)?;
        inputs.push(cal_path.clone());
        outputs.push(misuse_out.clone());
    }
    Ok(Run {
        inputs,
        outputs,
        ..Run::default()
    }
    .seed("score", a.score.seed))
}

fn cmd_pitfalls(a: &PitfallsArgs) -> Result<Run> {
    let mut inputs = Vec::new();
    let mut cfg = match &a.config {
        Some(path) => {
            inputs.push(path.clone());
            read_json(path)?
        }
        None => PitfallsConfig::default(),
    };
    if let Some(seed) = a.seed {
        cfg.seed = seed;
    }
    if let Some(trials) = a.trials {
        cfg.trials = trials;
    }
    let only = a.only.iter().map(|s| Pitfall::parse(s)).collect::<Result<Vec<_>, _>>()?;
    let report = match a.parallel_trials {
        0 => return Err(CliError::Usage("--parallel-trials must be at least 1".into())),
        1 => run_pitfalls(&cfg, &only, &Sequential)?,
        n => {
            let exec = Parallel::new(n).map_err(|e| CliError::Usage(e.to_string()))?;
            run_pitfalls(&cfg, &only, &exec)?
        }
    };
    write_json(&a.out, &report)?;
    for (p, d) in &report.demos {
        let verdict = serde_json::to_value(d.verdict).ok();
        let verdict = verdict.as_ref().and_then(|v| v.as_str()).unwrap_or("?");
        println!("{}: {verdict} ({})", p.name(), d.check);
    }
    Ok(Run {
        inputs,
        outputs: vec![a.out.clone()],
        resolved: resolved(&cfg),
        ..Run::default()
    }
    .seed("pitfalls", cfg.seed))
}

fn replay(path: &Path) -> Result<()> {
    let manifest: RunManifest = read_json(path)?;
    for input in &manifest.inputs {
        let now = FileDigest::of(&input.path)?;
        if now.sha256 != input.sha256 {
            return Err(CliError::Usage(format!("input {} changed since the run", input.path.display())));
        }
    }
    let argv = std::iter::once("cpaudit".to_string()).chain(manifest.args.iter().cloned());
    let cli = Cli::try_parse_from(argv).map_err(|e| CliError::Usage(format!("manifest args: {e}")))?;
    if matches!(cli.command, Command::Replay(_)) {
        return Err(CliError::Usage("a manifest cannot replay another replay".into()));
    }
    dispatch(&cli.command)?;
    for output in &manifest.outputs {
        let now = FileDigest::of(&output.path)?;
        if now.sha256 != output.sha256 {
            return Err(CliError::Usage(format!("output {} differs from the recorded run", output.path.display())));
        }
    }
    println!("replayed {}: {} outputs identical", manifest.command, manifest.outputs.len());
    Ok(())
}
