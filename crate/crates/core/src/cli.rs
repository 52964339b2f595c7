//! Experiment runner: single solves, sweeps over the number of segments,
//! side-by-side runs against the single-segment homotopy and a coercivity
//! diagnostic.
//!
//! Configuration is flat `key = value` text; command-line flags override
//! file values. Every run writes the resolved configuration next to its
//! outputs.

use std::fmt;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::sync::Arc;
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use nalgebra::DVector;
use rayon::prelude::*;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::problems::{ProblemInstance, ProblemKind};
use crate::sampling::Partition;
use crate::schedule::{NodeSchedule, ScheduleKind};
use crate::tracer::{trace, TraceConfig, TraceResult, TraceStatus};

pub const EXIT_OK: i32 = 0;
pub const EXIT_SOLVER_FAILURE: i32 = 2;
pub const EXIT_CONFIG_ERROR: i32 = 3;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum PartitionSpec {
    /// `q_l = round(l N / L)`.
    Uniform,
    /// `q_l = tau1 · l`; requires `N = tau1 · L`.
    Linear(usize),
}

impl fmt::Display for PartitionSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            PartitionSpec::Uniform => f.write_str("uniform"),
            PartitionSpec::Linear(tau) => write!(f, "linear:{tau}"),
        }
    }
}

impl FromStr for PartitionSpec {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.split_once(':') {
            None if s == "uniform" => Ok(PartitionSpec::Uniform),
            Some(("linear", tau)) => tau
                .parse()
                .map(PartitionSpec::Linear)
                .map_err(|_| Error::Config(format!("bad partition step '{tau}'"))),
            _ => Err(Error::Config(format!(
                "unknown partition '{s}' (uniform | linear:<step>)"
            ))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ScheduleSpec {
    Uniform,
    /// Random descending nodes drawn from `schedule_seed`.
    Random,
    Harmonic(f64),
}

impl fmt::Display for ScheduleSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ScheduleSpec::Uniform => f.write_str("uniform"),
            ScheduleSpec::Random => f.write_str("random"),
            ScheduleSpec::Harmonic(tau) => write!(f, "harmonic:{tau}"),
        }
    }
}

impl FromStr for ScheduleSpec {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.split_once(':') {
            None if s == "uniform" => Ok(ScheduleSpec::Uniform),
            None if s == "random" => Ok(ScheduleSpec::Random),
            Some(("harmonic", tau)) => tau
                .parse()
                .map(ScheduleSpec::Harmonic)
                .map_err(|_| Error::Config(format!("bad harmonic rate '{tau}'"))),
            _ => Err(Error::Config(format!(
                "unknown schedule '{s}' (uniform | random | harmonic:<rate>)"
            ))),
        }
    }
}

/// A segment count, absolute or as a fraction of `N` (`0.55N`).
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum SegmentSpec {
    Count(usize),
    Fraction(f64),
}

impl SegmentSpec {
    /// `ceil(fraction · N)`, at least 1.
    pub fn resolve(&self, total: usize) -> usize {
        match *self {
            SegmentSpec::Count(l) => l,
            SegmentSpec::Fraction(f) => ((f * total as f64).ceil() as usize).max(1),
        }
    }
}

impl fmt::Display for SegmentSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            SegmentSpec::Count(l) => write!(f, "{l}"),
            SegmentSpec::Fraction(v) => write!(f, "{v}N"),
        }
    }
}

impl FromStr for SegmentSpec {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::Config(format!("bad segment count '{s}'"));
        if let Some(frac) = s.strip_suffix('N') {
            let v: f64 = if frac.is_empty() {
                1.0
            } else {
                frac.parse().map_err(|_| bad())?
            };
            if !(v > 0.0 && v <= 1.0) {
                return Err(bad());
            }
            Ok(SegmentSpec::Fraction(v))
        } else {
            s.parse().map(SegmentSpec::Count).map_err(|_| bad())
        }
    }
}

/// Everything that determines a run.
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub problem: ProblemKind,
    pub n: usize,
    /// Sample count `N`.
    pub samples: usize,
    /// Segment count `L`.
    pub segments: SegmentSpec,
    pub partition: PartitionSpec,
    pub schedule: ScheduleSpec,
    pub schedule_seed: u64,
    pub seed: u64,
    pub kappa0: u32,
    /// Empty means zero.
    pub alpha: Vec<f64>,
    pub reps: usize,
    pub out: PathBuf,
    /// Segment counts visited by `sweep-l`.
    pub l_values: Vec<SegmentSpec>,
    /// Segment count of the reference run in `compare`.
    pub baseline_segments: SegmentSpec,
    pub tracer: TraceConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            problem: ProblemKind::SinSystem,
            n: 3,
            samples: 10_000,
            segments: SegmentSpec::Count(20),
            partition: PartitionSpec::Uniform,
            schedule: ScheduleSpec::Harmonic(7000.0),
            schedule_seed: 1,
            seed: 1,
            kappa0: 2,
            alpha: Vec::new(),
            reps: 1,
            out: PathBuf::from("out"),
            l_values: vec![
                SegmentSpec::Count(1),
                SegmentSpec::Fraction(0.1),
                SegmentSpec::Fraction(0.25),
                SegmentSpec::Fraction(0.55),
                SegmentSpec::Fraction(0.8),
                SegmentSpec::Fraction(1.0),
            ],
            baseline_segments: SegmentSpec::Count(1),
            tracer: TraceConfig {
                record_path: true,
                ..TraceConfig::default()
            },
        }
    }
}

fn join<T: fmt::Display>(items: &[T]) -> String {
    items
        .iter()
        .map(|v| v.to_string())
        .collect::<Vec<_>>()
        .join(",")
}

fn parse_list<T: FromStr>(value: &str) -> std::result::Result<Vec<T>, ()> {
    if value.trim().is_empty() {
        return Ok(Vec::new());
    }
    value
        .split(',')
        .map(|v| v.trim().parse().map_err(|_| ()))
        .collect()
}

impl RunConfig {
    /// Parses `key = value` lines over the defaults. `#` starts a comment.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = RunConfig::default();
        for (no, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key = value", no + 1)))?;
            cfg.set(key.trim(), value.trim())?;
        }
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        Self::parse(&text)
    }

    /// Sets one key from its text form.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        fn num<T: FromStr>(key: &str, value: &str) -> Result<T> {
            value
                .parse()
                .map_err(|_| Error::Config(format!("bad value '{value}' for {key}")))
        }
        let tr = &mut self.tracer;
        match key {
            "problem" => self.problem = value.parse()?,
            "n" => self.n = num(key, value)?,
            "N" | "samples" => self.samples = num(key, value)?,
            "L" | "segments" => self.segments = value.parse()?,
            "partition" => self.partition = value.parse()?,
            "schedule" => self.schedule = value.parse()?,
            "schedule_seed" => self.schedule_seed = num(key, value)?,
            "seed" => self.seed = num(key, value)?,
            "kappa0" => self.kappa0 = num(key, value)?,
            "alpha" => {
                self.alpha =
                    parse_list(value).map_err(|_| Error::Config(format!("bad alpha '{value}'")))?
            }
            "reps" => self.reps = num(key, value)?,
            "out" => self.out = PathBuf::from(value),
            "l_values" => {
                self.l_values = value
                    .split(',')
                    .map(|v| v.trim().parse())
                    .collect::<Result<Vec<SegmentSpec>>>()?
            }
            "baseline_L" => self.baseline_segments = value.parse()?,
            "h0" => tr.h0 = num(key, value)?,
            "h_min" => tr.h_min = num(key, value)?,
            "h_max" => tr.h_max = num(key, value)?,
            "corrector_tol" => tr.corrector_tol = num(key, value)?,
            "max_corrector_iters" => tr.max_corrector_iters = num(key, value)?,
            "grow" => tr.grow = num(key, value)?,
            "shrink" => tr.shrink = num(key, value)?,
            "max_steps" => tr.max_steps = num(key, value)?,
            "t_end" => {
                tr.t_end = if value == "auto" {
                    None
                } else {
                    Some(num(key, value)?)
                }
            }
            "polish_tol" => tr.polish_tol = num(key, value)?,
            "max_polish_iters" => tr.max_polish_iters = num(key, value)?,
            "max_condition" => tr.max_condition = num(key, value)?,
            "box_factor" => tr.box_factor = num(key, value)?,
            "record_path" => tr.record_path = num(key, value)?,
            other => return Err(Error::Config(format!("unknown key '{other}'"))),
        }
        Ok(())
    }

    /// All keys in a fixed order; [`parse`](Self::parse) reads it back to
    /// an equal configuration.
    pub fn to_text(&self) -> String {
        let tr = &self.tracer;
        let mut entries: Vec<(&str, String)> = vec![
            ("problem", self.problem.to_string()),
            ("n", self.n.to_string()),
            ("N", self.samples.to_string()),
            ("L", self.segments.to_string()),
            ("partition", self.partition.to_string()),
            ("schedule", self.schedule.to_string()),
            ("schedule_seed", self.schedule_seed.to_string()),
            ("seed", self.seed.to_string()),
            ("kappa0", self.kappa0.to_string()),
            ("alpha", join(&self.alpha)),
            ("reps", self.reps.to_string()),
            ("out", self.out.display().to_string()),
            ("l_values", join(&self.l_values)),
            ("baseline_L", self.baseline_segments.to_string()),
        ];
        entries.extend([
            ("h0", tr.h0.to_string()),
            ("h_min", tr.h_min.to_string()),
            ("h_max", tr.h_max.to_string()),
            ("corrector_tol", tr.corrector_tol.to_string()),
            ("max_corrector_iters", tr.max_corrector_iters.to_string()),
            ("grow", tr.grow.to_string()),
            ("shrink", tr.shrink.to_string()),
            ("max_steps", tr.max_steps.to_string()),
            (
                "t_end",
                tr.t_end.map_or("auto".to_string(), |t| t.to_string()),
            ),
            ("polish_tol", tr.polish_tol.to_string()),
            ("max_polish_iters", tr.max_polish_iters.to_string()),
            ("max_condition", tr.max_condition.to_string()),
            ("box_factor", tr.box_factor.to_string()),
            ("record_path", tr.record_path.to_string()),
        ]);
        entries
            .into_iter()
            .map(|(k, v)| format!("{k} = {v}\n"))
            .collect()
    }

    pub fn resolved_segments(&self) -> usize {
        self.segments.resolve(self.samples)
    }

    /// Checks everything that can be checked without running.
    pub fn validate(&self) -> Result<()> {
        self.tracer.validate()?;
        let l = self.resolved_segments();
        if self.samples == 0 {
            return Err(Error::Config("N must be positive".into()));
        }
        if l == 0 || l > self.samples {
            return Err(Error::Config(format!(
                "L = {l} must lie in 1..=N = {}",
                self.samples
            )));
        }
        if self.reps == 0 {
            return Err(Error::Config("reps must be positive".into()));
        }
        if self.kappa0 < 2 {
            return Err(Error::Config(format!(
                "kappa0 must be at least 2, got {}",
                self.kappa0
            )));
        }
        if !self.alpha.is_empty() && self.alpha.len() != self.n {
            return Err(Error::Config(format!(
                "alpha has {} entries, n = {}",
                self.alpha.len(),
                self.n
            )));
        }
        if let PartitionSpec::Linear(tau) = self.partition {
            if tau * l != self.samples {
                return Err(Error::Config(format!(
                    "linear:{tau} with L = {l} covers {} samples, N = {}",
                    tau * l,
                    self.samples
                )));
            }
        }
        ProblemInstance::build(self.problem, self.n, self.kappa0)?;
        Ok(())
    }
}

/// Outcome of one trace.
#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub segments: usize,
    pub seed: u64,
    pub schedule_seed: u64,
    pub result: TraceResult,
    pub wall_seconds: f64,
    pub analytic_jacobian: bool,
}

/// Runs one trace with `L = segments`, sample seed `seed` and schedule
/// seed `schedule_seed`; everything else from `cfg`.
pub fn run_once(
    cfg: &RunConfig,
    segments: usize,
    seed: u64,
    schedule_seed: u64,
) -> Result<RunOutcome> {
    let inst = ProblemInstance::build(cfg.problem, cfg.n, cfg.kappa0)?;
    let samples = Arc::new(inst.draw_samples(cfg.samples, seed)?);
    let partition = match cfg.partition {
        PartitionSpec::Uniform => Partition::uniform(cfg.samples, segments)?,
        PartitionSpec::Linear(tau) => {
            let p = Partition::linear(tau, segments)?;
            if p.total() != cfg.samples {
                return Err(Error::Config(format!(
                    "linear:{tau} with L = {segments} does not cover N"
                )));
            }
            p
        }
    };
    let kind = match cfg.schedule {
        ScheduleSpec::Uniform => ScheduleKind::Uniform,
        ScheduleSpec::Random => ScheduleKind::RandomDescending {
            seed: schedule_seed,
        },
        ScheduleSpec::Harmonic(tau0) => ScheduleKind::Harmonic { tau0 },
    };
    let schedule = NodeSchedule::new(kind, segments)?;
    let mut hm = inst.homotopy(samples, partition, schedule)?;
    if !cfg.alpha.is_empty() {
        hm = hm.with_alpha(DVector::from_column_slice(&cfg.alpha))?;
    }
    let start = Instant::now();
    let result = trace(&hm, &cfg.tracer)?;
    Ok(RunOutcome {
        segments,
        seed,
        schedule_seed,
        result,
        wall_seconds: start.elapsed().as_secs_f64(),
        analytic_jacobian: inst.model.has_analytic_jacobian(),
    })
}

#[derive(Debug, Clone, Serialize)]
pub struct Summary {
    pub problem: String,
    pub n: usize,
    pub samples: usize,
    pub segments: usize,
    pub seed: u64,
    pub status: TraceStatus,
    pub x: Vec<f64>,
    pub t: f64,
    pub final_residual: f64,
    pub predictor_steps: u64,
    pub accepted_steps: u64,
    pub rejected_steps: u64,
    pub corrector_iters: u64,
    pub sample_evals: u64,
    pub wall_seconds: f64,
    pub analytic_jacobian: bool,
    pub message: Option<String>,
}

impl Summary {
    pub fn new(cfg: &RunConfig, run: &RunOutcome) -> Self {
        let r = &run.result;
        Summary {
            problem: cfg.problem.to_string(),
            n: cfg.n,
            samples: cfg.samples,
            segments: run.segments,
            seed: run.seed,
            status: r.status,
            x: r.x.clone(),
            t: r.t,
            final_residual: r.final_residual,
            predictor_steps: r.counters.predictor_steps,
            accepted_steps: r.counters.accepted_steps,
            rejected_steps: r.counters.rejected_steps,
            corrector_iters: r.counters.corrector_iters_total,
            sample_evals: r.counters.sample_evals,
            wall_seconds: run.wall_seconds,
            analytic_jacobian: run.analytic_jacobian,
            message: r.message.clone(),
        }
    }
}

/// One row of an L-sweep.
#[derive(Debug, Clone, PartialEq)]
pub struct SweepRow {
    pub segments: usize,
    pub reps: usize,
    pub converged: usize,
    pub mean_evals: f64,
    pub min_evals: u64,
    pub max_evals: u64,
    pub mean_wall_seconds: f64,
    pub best: bool,
}

/// Runs every `L` in `cfg.l_values` for `cfg.reps` repetitions.
/// Repetition `r` uses sample seed `seed + r` and schedule seed
/// `schedule_seed + r`, the same for every `L`.
pub fn sweep(cfg: &RunConfig) -> Result<Vec<SweepRow>> {
    let ls: Vec<usize> = cfg
        .l_values
        .iter()
        .map(|s| s.resolve(cfg.samples))
        .collect();
    if let Some(&bad) = ls.iter().find(|&&l| l > cfg.samples) {
        return Err(Error::Config(format!(
            "L = {bad} exceeds N = {}",
            cfg.samples
        )));
    }
    let jobs: Vec<(usize, u64)> = ls
        .iter()
        .flat_map(|&l| (0..cfg.reps as u64).map(move |r| (l, r)))
        .collect();
    let runs = jobs
        .par_iter()
        .map(|&(l, r)| run_once(cfg, l, cfg.seed + r, cfg.schedule_seed + r))
        .collect::<Result<Vec<_>>>()?;
    let mut rows: Vec<SweepRow> = ls
        .iter()
        .enumerate()
        .map(|(k, &l)| {
            let group = &runs[k * cfg.reps..(k + 1) * cfg.reps];
            let evals: Vec<u64> = group
                .iter()
                .map(|o| o.result.counters.sample_evals)
                .collect();
            SweepRow {
                segments: l,
                reps: cfg.reps,
                converged: group.iter().filter(|o| o.result.converged()).count(),
                mean_evals: evals.iter().sum::<u64>() as f64 / cfg.reps as f64,
                min_evals: *evals.iter().min().expect("reps >= 1"),
                max_evals: *evals.iter().max().expect("reps >= 1"),
                mean_wall_seconds: group.iter().map(|o| o.wall_seconds).sum::<f64>()
                    / cfg.reps as f64,
                best: false,
            }
        })
        .collect();
    if let Some(best) = rows
        .iter()
        .enumerate()
        .min_by(|a, b| a.1.mean_evals.total_cmp(&b.1.mean_evals))
        .map(|(i, _)| i)
    {
        rows[best].best = true;
    }
    Ok(rows)
}

pub fn write_sweep_csv<W: std::io::Write>(rows: &[SweepRow], writer: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record([
        "L",
        "reps",
        "converged",
        "mean_sample_evals",
        "min_sample_evals",
        "max_sample_evals",
        "mean_wall_seconds",
        "best",
    ])?;
    for r in rows {
        w.write_record([
            r.segments.to_string(),
            r.reps.to_string(),
            r.converged.to_string(),
            format!("{:.1}", r.mean_evals),
            r.min_evals.to_string(),
            r.max_evals.to_string(),
            format!("{:.6}", r.mean_wall_seconds),
            (if r.best { "1" } else { "0" }).to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// One repetition of a side-by-side comparison.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CompareRow {
    pub rep: usize,
    pub seed: u64,
    pub segments: usize,
    pub baseline_segments: usize,
    pub converged: bool,
    pub baseline_converged: bool,
    pub sample_evals: u64,
    pub baseline_sample_evals: u64,
    /// `sample_evals / baseline_sample_evals`.
    pub eval_ratio: f64,
    pub wall_seconds: f64,
    pub baseline_wall_seconds: f64,
    pub wall_ratio: f64,
    /// `‖x - x_baseline‖∞`.
    pub state_gap: f64,
}

/// Runs the configured `L` and the baseline `L` on identical samples and
/// schedule seeds, `cfg.reps` times.
pub fn compare(cfg: &RunConfig) -> Result<Vec<CompareRow>> {
    let l = cfg.resolved_segments();
    let lb = cfg.baseline_segments.resolve(cfg.samples);
    (0..cfg.reps)
        .into_par_iter()
        .map(|r| {
            let seed = cfg.seed + r as u64;
            let sseed = cfg.schedule_seed + r as u64;
            let a = run_once(cfg, l, seed, sseed)?;
            let b = run_once(cfg, lb, seed, sseed)?;
            let (ea, eb) = (
                a.result.counters.sample_evals,
                b.result.counters.sample_evals,
            );
            let gap = a
                .result
                .x
                .iter()
                .zip(&b.result.x)
                .map(|(u, v)| (u - v).abs())
                .fold(0.0, f64::max);
            Ok(CompareRow {
                rep: r,
                seed,
                segments: l,
                baseline_segments: lb,
                converged: a.result.converged(),
                baseline_converged: b.result.converged(),
                sample_evals: ea,
                baseline_sample_evals: eb,
                eval_ratio: ea as f64 / eb as f64,
                wall_seconds: a.wall_seconds,
                baseline_wall_seconds: b.wall_seconds,
                wall_ratio: a.wall_seconds / b.wall_seconds,
                state_gap: gap,
            })
        })
        .collect()
}

pub fn write_compare_csv<W: std::io::Write>(rows: &[CompareRow], writer: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

#[derive(Debug, Parser)]
#[command(
    name = "grsaa",
    version,
    about = "Sample-average homotopy solver for stochastic equations"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Trace one path and write path.csv, summary.json and config.txt.
    Solve(CommonArgs),
    /// Sample evaluations across segment counts (sweep.csv).
    #[command(name = "sweep-l")]
    SweepL {
        #[command(flatten)]
        common: CommonArgs,
        /// Comma-separated segment counts; `0.55N` means ceil(0.55 N).
        #[arg(long = "l-values")]
        l_values: Option<String>,
    },
    /// Configured L against the baseline L on identical samples (compare.csv).
    Compare {
        #[command(flatten)]
        common: CommonArgs,
        #[arg(long = "baseline-L")]
        baseline: Option<String>,
    },
    /// Smallest (x - x0)ᵀ f(x, ξ) over the boundary of the domain box.
    #[command(name = "diagnose-coercivity")]
    DiagnoseCoercivity {
        #[command(flatten)]
        common: CommonArgs,
        /// Lattice points per axis.
        #[arg(long, default_value_t = 5)]
        grid: usize,
        /// Check at most this many samples.
        #[arg(long = "sample-cap")]
        sample_cap: Option<usize>,
    },
}

#[derive(Debug, Args)]
pub struct CommonArgs {
    /// Config file of `key = value` lines.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// market | sin | svi
    #[arg(long)]
    pub problem: Option<String>,
    #[arg(long)]
    pub n: Option<usize>,
    #[arg(long = "N")]
    pub samples: Option<usize>,
    /// Segment count, or a fraction of N such as 0.55N.
    #[arg(long = "L")]
    pub segments: Option<String>,
    /// uniform | linear:<step>
    #[arg(long)]
    pub partition: Option<String>,
    /// uniform | random | harmonic:<rate>
    #[arg(long)]
    pub schedule: Option<String>,
    #[arg(long = "schedule-seed")]
    pub schedule_seed: Option<u64>,
    #[arg(long)]
    pub kappa0: Option<u32>,
    /// Comma-separated perturbation vector.
    #[arg(long, allow_hyphen_values = true)]
    pub alpha: Option<String>,
    #[arg(long)]
    pub reps: Option<usize>,
    /// Extra `key=value` overrides, applied last.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub set: Vec<String>,
}

impl CommonArgs {
    pub fn resolve(&self) -> Result<RunConfig> {
        let mut cfg = match &self.config {
            Some(path) => RunConfig::load(path)?,
            None => RunConfig::default(),
        };
        let overrides: [(&str, Option<String>); 12] = [
            ("seed", self.seed.map(|v| v.to_string())),
            ("out", self.out.as_ref().map(|p| p.display().to_string())),
            ("problem", self.problem.clone()),
            ("n", self.n.map(|v| v.to_string())),
            ("N", self.samples.map(|v| v.to_string())),
            ("L", self.segments.clone()),
            ("partition", self.partition.clone()),
            ("schedule", self.schedule.clone()),
            ("schedule_seed", self.schedule_seed.map(|v| v.to_string())),
            ("kappa0", self.kappa0.map(|v| v.to_string())),
            ("alpha", self.alpha.clone()),
            ("reps", self.reps.map(|v| v.to_string())),
        ];
        for (key, value) in overrides {
            if let Some(v) = value {
                cfg.set(key, &v)?;
            }
        }
        for kv in &self.set {
            let (k, v) = kv
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("--set expects KEY=VALUE, got '{kv}'")))?;
            cfg.set(k.trim(), v.trim())?;
        }
        Ok(cfg)
    }
}

fn prepare_out(cfg: &RunConfig) -> Result<()> {
    fs::create_dir_all(&cfg.out)?;
    fs::write(cfg.out.join("config.txt"), cfg.to_text())?;
    Ok(())
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value).map_err(|e| Error::Io(e.to_string()))?;
    fs::write(path, text + "\n")?;
    Ok(())
}

fn cmd_solve(cfg: &RunConfig) -> Result<i32> {
    let run = run_once(cfg, cfg.resolved_segments(), cfg.seed, cfg.schedule_seed)?;
    prepare_out(cfg)?;
    run.result
        .write_path_csv(fs::File::create(cfg.out.join("path.csv"))?)?;
    let summary = Summary::new(cfg, &run);
    write_json(&cfg.out.join("summary.json"), &summary)?;
    let mut out = std::io::stdout().lock();
    let _ = writeln!(
        out,
        "{}: {:?} after {} steps, {} sample evaluations, residual {:.3e}",
        cfg.problem,
        run.result.status,
        summary.predictor_steps,
        summary.sample_evals,
        summary.final_residual
    );
    let _ = writeln!(out, "x = {:?}", run.result.x);
    if run.result.converged() {
        Ok(EXIT_OK)
    } else {
        eprintln!(
            "solver did not converge: {}",
            run.result.message.as_deref().unwrap_or("no detail")
        );
        Ok(EXIT_SOLVER_FAILURE)
    }
}

fn cmd_sweep(cfg: &RunConfig) -> Result<i32> {
    let rows = sweep(cfg)?;
    prepare_out(cfg)?;
    write_sweep_csv(&rows, fs::File::create(cfg.out.join("sweep.csv"))?)?;
    let _ = write_sweep_csv(&rows, std::io::stdout());
    let all = rows.iter().all(|r| r.converged == r.reps);
    Ok(if all { EXIT_OK } else { EXIT_SOLVER_FAILURE })
}

fn cmd_compare(cfg: &RunConfig) -> Result<i32> {
    let rows = compare(cfg)?;
    prepare_out(cfg)?;
    write_compare_csv(&rows, fs::File::create(cfg.out.join("compare.csv"))?)?;
    let _ = write_compare_csv(&rows, std::io::stdout());
    let all = rows.iter().all(|r| r.converged && r.baseline_converged);
    Ok(if all { EXIT_OK } else { EXIT_SOLVER_FAILURE })
}

fn cmd_coercivity(cfg: &RunConfig, grid: usize, sample_cap: Option<usize>) -> Result<i32> {
    if grid < 2 {
        return Err(Error::Config(
            "grid needs at least 2 points per axis".into(),
        ));
    }
    let inst = ProblemInstance::build(cfg.problem, cfg.n, cfg.kappa0)?;
    let l = cfg.resolved_segments();
    let samples = Arc::new(inst.draw_samples(cfg.samples, cfg.seed)?);
    let hm = inst.homotopy(
        samples,
        Partition::uniform(cfg.samples, l)?,
        NodeSchedule::new(ScheduleKind::Uniform, l)?,
    )?;
    let report = hm.blended().check_coercivity(grid, sample_cap);
    prepare_out(cfg)?;
    write_json(&cfg.out.join("coercivity.json"), &report)?;
    let _ = writeln!(
        std::io::stdout(),
        "min (x - x0)·f = {:.6e} over {} boundary points x {} samples ({})",
        report.min_inner_product,
        report.points_checked,
        report.samples_checked,
        if report.satisfied {
            "positive"
        } else {
            "not positive"
        }
    );
    Ok(EXIT_OK)
}

/// Parses `args`, runs the command and returns the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() {
                EXIT_CONFIG_ERROR
            } else {
                EXIT_OK
            };
            let _ = e.print();
            return code;
        }
    };
    let outcome = (|| -> Result<i32> {
        match &cli.command {
            Command::Solve(common) => {
                let cfg = common.resolve()?;
                cfg.validate()?;
                cmd_solve(&cfg)
            }
            Command::SweepL { common, l_values } => {
                let mut cfg = common.resolve()?;
                if let Some(v) = l_values {
                    cfg.set("l_values", v)?;
                }
                cfg.validate()?;
                cmd_sweep(&cfg)
            }
            Command::Compare { common, baseline } => {
                let mut cfg = common.resolve()?;
                if let Some(v) = baseline {
                    cfg.set("baseline_L", v)?;
                }
                cfg.validate()?;
                cmd_compare(&cfg)
            }
            Command::DiagnoseCoercivity {
                common,
                grid,
                sample_cap,
            } => {
                let cfg = common.resolve()?;
                cfg.validate()?;
                cmd_coercivity(&cfg, *grid, *sample_cap)
            }
        }
    })();
    match outcome {
        Ok(code) => code,
        Err(
            e @ (Error::Config(_)
            | Error::InvalidTraceConfig(_)
            | Error::InvalidPartition(_)
            | Error::InvalidSchedule(_)),
        ) => {
            eprintln!("error: {e}");
            EXIT_CONFIG_ERROR
        }
        Err(e) => {
            eprintln!("error: {e}");
            EXIT_SOLVER_FAILURE
        }
    }
}
