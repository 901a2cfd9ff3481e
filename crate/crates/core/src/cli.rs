//! Command-line front end.
//!
//! Settings come from built-in defaults, then an optional `--config` file of
//! `key=value` lines (`#` starts a comment), then `--set key=value` pairs,
//! then dedicated flags. Keys:
//!
//! ```text
//! task  seed  out
//! params.<field>            any HyperParams field; lists are comma separated
//! scenario.<field>          any BiasScenario field; boxes_per_image=min..max
//! paths.calibration  paths.test  paths.artifact  paths.outcomes
//! sweep.axis  sweep.values
//! ```
//!
//! Paths left unset default to files inside the output directory, so
//! `synth`, `calibrate`, `apply` and `evaluate` chain without extra flags.

use std::ffi::OsString;
use std::fs::{self, File};
use std::io::{BufReader, BufWriter};
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use crate::calibration::calibrate;
use crate::data_model::{read_dataset, write_jsonl, CalibrationArtifact, Dataset, HyperParams, Task};
use crate::error::{Error, Result};
use crate::pipeline::{self, SweepAxis};
use crate::repair::OnlineEngine;
use crate::synthgen::{self, BiasScenario};

#[derive(Debug, Parser)]
#[command(name = "fairsight", version, about = "Conformal fairness monitoring and repair")]
pub struct Cli {
    /// key=value settings file.
    #[arg(long, global = true, value_name = "PATH")]
    config: Option<PathBuf>,
    #[arg(long, global = true, value_name = "N")]
    seed: Option<u64>,
    #[arg(long, global = true, value_name = "classification|detection")]
    task: Option<String>,
    /// Output directory.
    #[arg(long, global = true, value_name = "DIR")]
    out: Option<PathBuf>,
    /// Extra `key=value` setting; repeatable, applied after the config file.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Write seeded synthetic calibration.jsonl and test.jsonl.
    Synth(SynthArgs),
    /// Fit thresholds on a calibration set and write artifact.json.
    Calibrate(CalibrateArgs),
    /// Stream test records through the online engine, writing outcomes.jsonl.
    Apply(ApplyArgs),
    /// Compare metrics before and after repair (report.json, report.csv).
    Evaluate(EvaluateArgs),
    /// Run the whole pipeline once per value of one parameter (sweep.csv).
    Sweep(SweepArgs),
}

#[derive(Debug, Args)]
struct SynthArgs {
    #[arg(long)]
    n: Option<usize>,
    #[arg(long)]
    suppression: Option<f64>,
    #[arg(long)]
    group1_fraction: Option<f64>,
}

#[derive(Debug, Args)]
struct CalibrateArgs {
    #[arg(long, value_name = "PATH")]
    calibration: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct ApplyArgs {
    #[arg(long, value_name = "PATH")]
    artifact: Option<PathBuf>,
    /// Test records; `-` streams stdin to stdout.
    #[arg(long, value_name = "PATH")]
    test: Option<PathBuf>,
    /// Flag violations without repairing them.
    #[arg(long)]
    passthrough: bool,
}

#[derive(Debug, Args)]
struct EvaluateArgs {
    #[arg(long, value_name = "PATH")]
    test: Option<PathBuf>,
    #[arg(long, value_name = "PATH")]
    outcomes: Option<PathBuf>,
    /// Take metric settings from this artifact instead of the config.
    #[arg(long, value_name = "PATH")]
    artifact: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct SweepArgs {
    #[arg(long)]
    axis: Option<String>,
    /// Comma-separated values.
    #[arg(long)]
    values: Option<String>,
    #[arg(long, value_name = "PATH")]
    calibration: Option<PathBuf>,
    #[arg(long, value_name = "PATH")]
    test: Option<PathBuf>,
}

/// Fully resolved settings for one invocation.
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub task: Task,
    pub out: PathBuf,
    pub params: HyperParams,
    pub scenario: BiasScenario,
    pub calibration: Option<PathBuf>,
    pub test: Option<PathBuf>,
    pub artifact: Option<PathBuf>,
    pub outcomes: Option<PathBuf>,
    pub sweep_axis: Option<SweepAxis>,
    pub sweep_values: Vec<f64>,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            task: Task::Classification,
            out: PathBuf::from("."),
            params: HyperParams::default(),
            scenario: BiasScenario::default(),
            calibration: None,
            test: None,
            artifact: None,
            outcomes: None,
            sweep_axis: None,
            sweep_values: Vec::new(),
        }
    }
}

fn parse_value<T: std::str::FromStr>(key: &str, value: &str) -> Result<T>
where
    T::Err: std::fmt::Display,
{
    value
        .trim()
        .parse()
        .map_err(|e| Error::param(key, format!("cannot parse `{value}`: {e}")))
}

fn parse_list(key: &str, value: &str) -> Result<Vec<f64>> {
    value
        .split(',')
        .filter(|s| !s.trim().is_empty())
        .map(|s| parse_value(key, s))
        .collect()
}

fn parse_range(key: &str, value: &str) -> Result<(usize, usize)> {
    let (lo, hi) = value
        .split_once("..")
        .ok_or_else(|| Error::param(key, format!("expected min..max, got `{value}`")))?;
    Ok((parse_value(key, lo)?, parse_value(key, hi)?))
}

impl RunConfig {
    /// Applies one `key=value` setting.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let key = key.trim();
        let value = value.trim();
        let p = &mut self.params;
        let s = &mut self.scenario;
        match key {
            "task" => {
                self.task = parse_value(key, value)?;
                s.task = self.task;
            }
            "seed" => s.seed = parse_value(key, value)?,
            "out" => self.out = PathBuf::from(value),
            "paths.calibration" => self.calibration = Some(PathBuf::from(value)),
            "paths.test" => self.test = Some(PathBuf::from(value)),
            "paths.artifact" => self.artifact = Some(PathBuf::from(value)),
            "paths.outcomes" => self.outcomes = Some(PathBuf::from(value)),
            "sweep.axis" => self.sweep_axis = Some(value.parse()?),
            "sweep.values" => self.sweep_values = parse_list(key, value)?,
            "params.alpha" => p.alpha = parse_value(key, value)?,
            "params.lambda" => p.lambda = parse_value(key, value)?,
            "params.gamma" => p.gamma = parse_value(key, value)?,
            "params.kappa" => p.kappa = parse_value(key, value)?,
            "params.delta_max" => p.delta_max = parse_value(key, value)?,
            "params.eta_candidates" => p.eta_candidates = parse_list(key, value)?,
            "params.kappa_candidates" => p.kappa_candidates = parse_list(key, value)?,
            "params.delta_max_candidates" => p.delta_max_candidates = parse_list(key, value)?,
            "params.epsilon" => p.epsilon = parse_value(key, value)?,
            "params.delta" => p.delta = parse_value(key, value)?,
            "params.grid" => p.grid = parse_value(key, value)?,
            "params.adaptive_enabled" => p.adaptive_enabled = parse_value(key, value)?,
            "params.region_aggregation" => p.region_aggregation = parse_value(key, value)?,
            "params.iou_threshold" => p.iou_threshold = parse_value(key, value)?,
            "params.positive_class" => p.positive_class = parse_value(key, value)?,
            "scenario.seed" => s.seed = parse_value(key, value)?,
            "scenario.n_records" => s.n_records = parse_value(key, value)?,
            "scenario.group1_fraction" => s.group1_fraction = parse_value(key, value)?,
            "scenario.base_accuracy" => s.base_accuracy = parse_value(key, value)?,
            "scenario.confidence_suppression" => {
                s.confidence_suppression = parse_value(key, value)?
            }
            "scenario.label_noise" => s.label_noise = parse_value(key, value)?,
            "scenario.boxes_per_image" => s.boxes_per_image = parse_range(key, value)?,
            "scenario.num_classes" => s.num_classes = parse_value(key, value)?,
            other => return Err(Error::param(other, "unknown setting")),
        }
        Ok(())
    }

    /// Applies every non-comment line of a config file body.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                Error::param(format!("config line {}", i + 1), "expected key=value")
            })?;
            self.set(key, value)?;
        }
        Ok(())
    }

    fn path_or(&self, explicit: &Option<PathBuf>, file: &str) -> PathBuf {
        explicit.clone().unwrap_or_else(|| self.out.join(file))
    }
}

fn build_config(cli: &Cli) -> Result<RunConfig> {
    let mut cfg = RunConfig::default();
    if let Some(path) = &cli.config {
        let text = fs::read_to_string(path)
            .map_err(|e| Error::param("--config", format!("{}: {e}", path.display())))?;
        cfg.apply_text(&text)?;
    }
    for pair in &cli.overrides {
        let (k, v) = pair
            .split_once('=')
            .ok_or_else(|| Error::param("--set", format!("expected key=value, got `{pair}`")))?;
        cfg.set(k, v)?;
    }
    if let Some(task) = &cli.task {
        cfg.set("task", task)?;
    }
    if let Some(seed) = cli.seed {
        cfg.scenario.seed = seed;
    }
    if let Some(out) = &cli.out {
        cfg.out = out.clone();
    }
    match &cli.command {
        Command::Synth(a) => {
            if let Some(n) = a.n {
                cfg.scenario.n_records = n;
            }
            if let Some(s) = a.suppression {
                cfg.scenario.confidence_suppression = s;
            }
            if let Some(f) = a.group1_fraction {
                cfg.scenario.group1_fraction = f;
            }
        }
        Command::Calibrate(a) => set_path(&mut cfg.calibration, &a.calibration),
        Command::Apply(a) => {
            set_path(&mut cfg.artifact, &a.artifact);
            set_path(&mut cfg.test, &a.test);
        }
        Command::Evaluate(a) => {
            set_path(&mut cfg.test, &a.test);
            set_path(&mut cfg.outcomes, &a.outcomes);
            set_path(&mut cfg.artifact, &a.artifact);
        }
        Command::Sweep(a) => {
            if let Some(axis) = &a.axis {
                cfg.set("sweep.axis", axis)?;
            }
            if let Some(values) = &a.values {
                cfg.set("sweep.values", values)?;
            }
            set_path(&mut cfg.calibration, &a.calibration);
            set_path(&mut cfg.test, &a.test);
        }
    }
    cfg.params.validate()?;
    Ok(cfg)
}

fn set_path(slot: &mut Option<PathBuf>, flag: &Option<PathBuf>) {
    if flag.is_some() {
        slot.clone_from(flag);
    }
}

fn require_input(path: PathBuf, what: &str) -> Result<PathBuf> {
    if path.is_file() {
        Ok(path)
    } else {
        Err(Error::param(what, format!("{} does not exist", path.display())))
    }
}

fn ensure_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn to_json<T: serde::Serialize>(value: &T) -> String {
    let mut s = serde_json::to_string_pretty(value).expect("report types serialize");
    s.push('\n');
    s
}

fn load_artifact(path: &Path) -> Result<CalibrationArtifact> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    CalibrationArtifact::from_json(&text)
}

fn cmd_synth(cfg: &RunConfig) -> Result<()> {
    cfg.scenario.validate()?;
    let (cal, test) = synthgen::generate_split(&cfg.scenario)?;
    ensure_dir(&cfg.out)?;
    for (data, name) in [(&cal, "calibration.jsonl"), (&test, "test.jsonl")] {
        let path = cfg.out.join(name);
        match data {
            Dataset::Classification(r) => write_jsonl(&path, r)?,
            Dataset::Detection(r) => write_jsonl(&path, r)?,
        }
        let [g0, g1] = data.group_counts();
        println!("wrote {} records to {} (group 0: {g0}, group 1: {g1})", data.len(), path.display());
    }
    Ok(())
}

fn cmd_calibrate(cfg: &RunConfig) -> Result<()> {
    let path = require_input(cfg.path_or(&cfg.calibration, "calibration.jsonl"), "paths.calibration")?;
    let data = read_dataset(&path, cfg.task)?;
    let report = calibrate(&data, &cfg.params)?;
    ensure_dir(&cfg.out)?;
    let artifact_path = cfg.path_or(&cfg.artifact, "artifact.json");
    write_text(&artifact_path, &report.artifact.to_json())?;
    write_text(&cfg.out.join("calibration_report.json"), &to_json(&report))?;

    let a = &report.artifact;
    println!("n = {}", a.n);
    println!("q_alpha = {}", a.q_alpha);
    println!("calibration exceedances = {}", report.calibration_exceedances);
    match a.task {
        Task::Classification => {
            println!("selected kappa = {}, delta_max = {}", a.params.kappa, a.params.delta_max);
            println!("kappa,delta_max,dpd,accuracy");
            for row in &report.kappa_search_table {
                println!("{},{},{},{}", row.kappa, row.delta_max, row.dpd, row.accuracy);
            }
        }
        Task::Detection => {
            println!("selected eta = {}", a.eta_selected.unwrap_or(1.0));
            println!("eta,gap,mean_ap");
            for row in &report.eta_search_table {
                println!("{},{},{}", row.eta, row.gap, row.mean_ap);
            }
        }
    }
    println!("artifact written to {}", artifact_path.display());
    Ok(())
}

fn cmd_apply(cfg: &RunConfig, passthrough: bool) -> Result<()> {
    let artifact_path = require_input(cfg.path_or(&cfg.artifact, "artifact.json"), "paths.artifact")?;
    let artifact = load_artifact(&artifact_path)?;
    let mut engine = OnlineEngine::new(&artifact);
    if passthrough {
        engine = engine.passthrough();
    }
    let streaming = cfg.test.as_deref() == Some(Path::new("-"));
    let n = if streaming {
        let stdout = std::io::stdout();
        pipeline::apply_stream(&mut engine, std::io::stdin().lock(), BufWriter::new(stdout.lock()))?
    } else {
        let test_path = require_input(cfg.path_or(&cfg.test, "test.jsonl"), "paths.test")?;
        ensure_dir(&cfg.out)?;
        let out_path = cfg.path_or(&cfg.outcomes, "outcomes.jsonl");
        let input = File::open(&test_path).map_err(|e| Error::io(&test_path, e))?;
        let output = File::create(&out_path).map_err(|e| Error::io(&out_path, e))?;
        let n = pipeline::apply_stream(&mut engine, BufReader::new(input), BufWriter::new(output))?;
        println!("outcomes written to {}", out_path.display());
        n
    };
    let rate = if n == 0 {
        0.0
    } else {
        engine.violation_count() as f64 / n as f64
    };
    let summary = format!(
        "processed {n} records, violation rate {rate}\ninitial threshold {}, final threshold {}",
        artifact.q_alpha,
        engine.current_threshold()
    );
    // Keep stdout clean for outcome lines when streaming.
    if streaming {
        eprintln!("{summary}");
    } else {
        println!("{summary}");
    }
    Ok(())
}

fn cmd_evaluate(cfg: &RunConfig) -> Result<()> {
    let test_path = require_input(cfg.path_or(&cfg.test, "test.jsonl"), "paths.test")?;
    let outcomes_path = require_input(cfg.path_or(&cfg.outcomes, "outcomes.jsonl"), "paths.outcomes")?;
    let (task, params) = match &cfg.artifact {
        Some(path) => {
            let a = load_artifact(&require_input(path.clone(), "paths.artifact")?)?;
            (a.task, a.params)
        }
        None => (cfg.task, cfg.params.clone()),
    };
    let data = read_dataset(&test_path, task)?;
    let file = File::open(&outcomes_path).map_err(|e| Error::io(&outcomes_path, e))?;
    let outcomes = pipeline::read_outcomes(BufReader::new(file))?;
    let report = pipeline::evaluate(&data, &outcomes, &params)?;
    ensure_dir(&cfg.out)?;
    write_text(&cfg.out.join("report.json"), &to_json(&report))?;
    write_text(&cfg.out.join("report.csv"), &report.to_csv())?;
    print!("{}", report.to_csv());
    Ok(())
}

fn cmd_sweep(cfg: &RunConfig) -> Result<()> {
    let axis = cfg
        .sweep_axis
        .ok_or_else(|| Error::param("sweep.axis", "required (lambda|gamma|eta|kappa)"))?;
    let cal_path = require_input(cfg.path_or(&cfg.calibration, "calibration.jsonl"), "paths.calibration")?;
    let test_path = require_input(cfg.path_or(&cfg.test, "test.jsonl"), "paths.test")?;
    let cal = read_dataset(&cal_path, cfg.task)?;
    let test = read_dataset(&test_path, cfg.task)?;
    let rows = pipeline::sweep(&cal, &test, &cfg.params, axis, &cfg.sweep_values)?;
    ensure_dir(&cfg.out)?;
    let csv = pipeline::sweep_csv(&rows);
    write_text(&cfg.out.join("sweep.csv"), &csv)?;
    print!("{csv}");
    Ok(())
}

pub fn execute(cli: &Cli) -> Result<()> {
    let cfg = build_config(cli)?;
    match &cli.command {
        Command::Synth(_) => cmd_synth(&cfg),
        Command::Calibrate(_) => cmd_calibrate(&cfg),
        Command::Apply(a) => cmd_apply(&cfg, a.passthrough),
        Command::Evaluate(_) => cmd_evaluate(&cfg),
        Command::Sweep(_) => cmd_sweep(&cfg),
    }
}

/// Parses `args`, runs the command and returns the process exit code.
/// Failures print one `error[CODE]: message` line to stderr.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                print!("{e}");
                return 0;
            }
            let msg = e.to_string();
            let first = msg.lines().next().unwrap_or("invalid arguments");
            eprintln!("error[CONFIG_ERROR]: {}", first.trim_start_matches("error: "));
            return 2;
        }
    };
    match execute(&cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error[{}]: {}", e.code(), e.to_string().replace('\n', " "));
            e.exit_code()
        }
    }
}
