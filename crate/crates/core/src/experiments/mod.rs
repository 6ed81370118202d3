//! Config-driven experiment drivers behind the `goodspeed` CLI.
//!
//! Each driver validates its config before touching the filesystem, so a bad
//! config never leaves partial output behind.

mod config;
mod output;
pub mod presets;

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::estimator::{ALPHA_MAX, ALPHA_MIN};
use crate::fluid_oracle::{small_instance_optimum, solve_optimal_goodput, RegionSpec};
use crate::scheduler::{utility_log, SchedulerKind, ENUM_MAX_CAPACITY, ENUM_MAX_CLIENTS};
use crate::sim_engine::{trailing_std, RoundRecord, Simulation, TimeBreakdown};

pub use config::{
    ExperimentConfig, Levels, OracleConfig, OutputConfig, ProfileConfig, SweepParam, TraceFormat, UtilityKind,
};
pub use output::{
    csv_body, csv_header, csv_row, fmt_sig9, json_num, jsonl_header, jsonl_row, trace_columns, TraceWriter, BUILD_ID,
};

/// Tolerance below which a scheduler "beats" the oracle only numerically.
pub const ORACLE_SLACK: f64 = 1e-6;

/// Shares of cumulative modeled wall time.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct TimeFractions {
    pub receive: f64,
    pub verify: f64,
    pub send: f64,
}

impl TimeFractions {
    pub fn of(total: &TimeBreakdown) -> Option<Self> {
        (total.total_ms > 0.0).then(|| Self {
            receive: total.receive_ms / total.total_ms,
            verify: total.verify_ms / total.total_ms,
            send: total.send_ms / total.total_ms,
        })
    }
}

/// End-of-run metrics. Fields that need at least one round are `None` at `T = 0`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunSummary {
    pub name: String,
    pub scheduler: SchedulerKind,
    pub seed: u64,
    pub rounds: u64,
    /// `U(x̄(T))`.
    pub utility: Option<f64>,
    /// `U(X(T))`.
    pub utility_smoothed: Option<f64>,
    pub running_avg: Option<Vec<f64>>,
    pub goodput_hat: Vec<f64>,
    pub alpha_hat: Vec<f64>,
    pub mean_alpha_hat: Option<f64>,
    pub zero_slot_rounds: Vec<u64>,
    pub time_total: TimeBreakdown,
    pub time_fractions: Option<TimeFractions>,
    pub outputs: Vec<String>,
}

/// Runs `cfg` under `scheduler`, handing every record to `sink`.
pub fn simulate<F>(cfg: &ExperimentConfig, scheduler: SchedulerKind, mut sink: F) -> Result<RunSummary>
where
    F: FnMut(&RoundRecord) -> Result<()>,
{
    let mut sim = Simulation::new(cfg.engine(scheduler), cfg.profile()?)?;
    let mut total = TimeBreakdown::default();
    sim.run_with(cfg.rounds, |r| {
        total.accumulate(&r.time);
        sink(r)
    })?;

    let running_avg = sim.running_average();
    let goodput_hat: Vec<f64> = sim.clients().iter().map(|c| c.estimates.goodput_hat).collect();
    let alpha_hat: Vec<f64> = sim.clients().iter().map(|c| c.estimates.alpha_hat).collect();
    let played = cfg.rounds > 0;
    Ok(RunSummary {
        name: cfg.name.clone(),
        scheduler,
        seed: cfg.seed,
        rounds: cfg.rounds,
        utility: running_avg.as_deref().map(utility_log).transpose()?,
        utility_smoothed: played.then(|| utility_log(&goodput_hat)).transpose()?,
        running_avg,
        mean_alpha_hat: played.then(|| alpha_hat.iter().sum::<f64>() / alpha_hat.len() as f64),
        goodput_hat,
        alpha_hat,
        zero_slot_rounds: sim.clients().iter().map(|c| c.zero_slot_rounds).collect(),
        time_fractions: TimeFractions::of(&total),
        time_total: total,
        outputs: Vec::new(),
    })
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    let file = File::create(path).map_err(|e| Error::Io(format!("{}: {e}", path.display())))?;
    Ok(BufWriter::new(file))
}

fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::Io(format!("{}: {e}", dir.display())))
}

fn trace_path(dir: &Path, cfg: &ExperimentConfig, scheduler: SchedulerKind, format: TraceFormat) -> PathBuf {
    dir.join(format!("{}-{}.{}", cfg.name, scheduler.name(), format.extension()))
}

/// Simulates `cfg` with `scheduler`, writing one trace per configured format into `dir`.
pub fn run_to_dir(cfg: &ExperimentConfig, scheduler: SchedulerKind, dir: &Path) -> Result<RunSummary> {
    create_dir(dir)?;
    let mut paths = Vec::new();
    let mut writers = Vec::new();
    for &format in &cfg.output.formats {
        let path = trace_path(dir, cfg, scheduler, format);
        writers.push(TraceWriter::new(create(&path)?, format, cfg, scheduler.name())?);
        paths.push(path.display().to_string());
    }
    let mut summary = simulate(cfg, scheduler, |r| writers.iter_mut().try_for_each(|w| w.write(r)))?;
    for w in writers {
        w.finish()?;
    }
    summary.outputs = paths;
    Ok(summary)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Report<T: Serialize> {
    pub build: &'static str,
    pub config: ExperimentConfig,
    #[serde(flatten)]
    pub body: T,
}

impl<T: Serialize> Report<T> {
    pub fn new(cfg: &ExperimentConfig, body: T) -> Self {
        Self {
            build: BUILD_ID,
            config: cfg.clone(),
            body,
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    let mut w = create(path)?;
    w.write_all(text.as_bytes())?;
    w.flush()?;
    Ok(())
}

/// `run`: simulate the configured scheduler and write its trace and summary.
pub fn cmd_run(cfg: &ExperimentConfig, dir: &Path) -> Result<Report<RunSummary>> {
    let mut summary = run_to_dir(cfg, cfg.scheduler, dir)?;
    let path = dir.join(format!("{}-{}-summary.json", cfg.name, cfg.scheduler.name()));
    summary.outputs.push(path.display().to_string());
    let report = Report::new(cfg, summary);
    write_text(&path, &report.to_json())?;
    Ok(report)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(tag = "status", rename_all = "lowercase")]
pub enum CrossCheck {
    Skipped {
        reason: String,
    },
    Done {
        utility: f64,
        x: Vec<f64>,
        utility_diff: f64,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct OracleReport {
    pub alphas: Vec<f64>,
    pub capacity: u32,
    pub x_star: Vec<f64>,
    pub utility: f64,
    pub fw_gap: f64,
    pub gap_tol: f64,
    pub iterations: u64,
    pub converged: bool,
    pub cross_check: CrossCheck,
}

/// The region of the configured profile's long-run acceptance rates, clamped
/// like the estimates.
pub fn region_of(cfg: &ExperimentConfig) -> Result<RegionSpec> {
    let alphas = cfg
        .profile()?
        .long_run_alphas()
        .into_iter()
        .map(|a| a.clamp(ALPHA_MIN, ALPHA_MAX))
        .collect();
    RegionSpec::new(alphas, cfg.capacity)
}

pub fn oracle(cfg: &ExperimentConfig) -> Result<OracleReport> {
    let region = region_of(cfg)?;
    let fw = solve_optimal_goodput(&region, cfg.oracle.max_iters, cfg.oracle.gap_tol);
    let cross_check = if region.clients() <= ENUM_MAX_CLIENTS && region.capacity() <= ENUM_MAX_CAPACITY {
        let m = small_instance_optimum(&region, cfg.oracle.restarts)?;
        CrossCheck::Done {
            utility_diff: (m.utility - fw.utility).abs(),
            utility: m.utility,
            x: m.point.values,
        }
    } else {
        CrossCheck::Skipped {
            reason: format!("enumeration limited to {ENUM_MAX_CLIENTS} clients and capacity {ENUM_MAX_CAPACITY}"),
        }
    };
    Ok(OracleReport {
        alphas: region.alphas().to_vec(),
        capacity: region.capacity(),
        x_star: fw.point.values,
        utility: fw.utility,
        fw_gap: fw.point.fw_gap,
        gap_tol: cfg.oracle.gap_tol,
        iterations: fw.iterations,
        converged: fw.converged,
        cross_check,
    })
}

/// `oracle`: solve for `x*` and write the report. The caller decides the exit
/// status from `converged`.
pub fn cmd_oracle(cfg: &ExperimentConfig, dir: &Path) -> Result<Report<OracleReport>> {
    let report = Report::new(cfg, oracle(cfg)?);
    create_dir(dir)?;
    write_text(&dir.join(format!("{}-oracle.json", cfg.name)), &report.to_json())?;
    Ok(report)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SchedulerResult {
    pub scheduler: SchedulerKind,
    pub utility: Option<f64>,
    pub running_avg: Option<Vec<f64>>,
    /// `U(x*) - U(x̄(T))`.
    pub gap_to_oracle: Option<f64>,
    /// Set when `gap_to_oracle < -ORACLE_SLACK`. A finite-horizon average can
    /// leave the region through sampling noise, so this is reported, not an error.
    pub exceeds_oracle: bool,
    pub time_total: TimeBreakdown,
    pub time_fractions: Option<TimeFractions>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ComparisonReport {
    pub oracle_utility: f64,
    pub oracle_x: Vec<f64>,
    pub fw_gap: f64,
    pub results: Vec<SchedulerResult>,
}

impl ComparisonReport {
    pub fn result(&self, scheduler: SchedulerKind) -> Option<&SchedulerResult> {
        self.results.iter().find(|r| r.scheduler == scheduler)
    }

    pub fn to_csv(&self, cfg: &ExperimentConfig) -> String {
        let mut cols: Vec<String> = ["scheduler", "utility", "gap_to_oracle", "exceeds_oracle"]
            .iter()
            .map(|s| s.to_string())
            .collect();
        cols.extend((0..cfg.clients).map(|i| format!("xbar_{i}")));
        cols.extend(
            ["receive_frac", "verify_frac", "send_frac", "total_ms"]
                .iter()
                .map(|s| s.to_string()),
        );
        let title = format!(
            "comparison {} seed={} oracle_U={}",
            cfg.name,
            cfg.seed,
            fmt_sig9(self.oracle_utility)
        );
        let mut text = csv_header(cfg, &title, &cols);
        let opt = |v: Option<f64>| v.map(fmt_sig9).unwrap_or_default();
        for r in &self.results {
            let mut line = format!(
                "{},{},{},{}",
                r.scheduler,
                opt(r.utility),
                opt(r.gap_to_oracle),
                r.exceeds_oracle
            );
            for i in 0..cfg.clients {
                line.push(',');
                line.push_str(&opt(r.running_avg.as_ref().map(|x| x[i])));
            }
            let f = r.time_fractions;
            for v in [f.map(|f| f.receive), f.map(|f| f.verify), f.map(|f| f.send)] {
                line.push(',');
                line.push_str(&opt(v));
            }
            line.push(',');
            line.push_str(&fmt_sig9(r.time_total.total_ms));
            text.push_str(&line);
            text.push('\n');
        }
        text
    }
}

fn compared(cfg: &ExperimentConfig) -> Result<Vec<SchedulerKind>> {
    let mut kinds = cfg.compare.clone();
    kinds.dedup();
    if kinds.len() < 2 {
        return Err(Error::Usage(format!(
            "compare needs at least two distinct schedulers in `compare`, got {}",
            kinds.len()
        )));
    }
    Ok(kinds)
}

/// Runs every scheduler in `compare` on the same seed and profile. With `dir`
/// set, per-scheduler traces are written there.
pub fn compare(cfg: &ExperimentConfig, dir: Option<&Path>) -> Result<ComparisonReport> {
    let kinds = compared(cfg)?;
    let region = region_of(cfg)?;
    let fw = solve_optimal_goodput(&region, cfg.oracle.max_iters, cfg.oracle.gap_tol);
    let summaries = kinds
        .par_iter()
        .map(|&k| match dir {
            Some(d) => run_to_dir(cfg, k, d),
            None => simulate(cfg, k, |_| Ok(())),
        })
        .collect::<Result<Vec<_>>>()?;
    let results = summaries
        .into_iter()
        .map(|s| {
            let gap = s.utility.map(|u| fw.utility - u);
            SchedulerResult {
                scheduler: s.scheduler,
                utility: s.utility,
                running_avg: s.running_avg,
                gap_to_oracle: gap,
                exceeds_oracle: gap.is_some_and(|g| g < -ORACLE_SLACK),
                time_total: s.time_total,
                time_fractions: s.time_fractions,
            }
        })
        .collect();
    Ok(ComparisonReport {
        oracle_utility: fw.utility,
        oracle_x: fw.point.values,
        fw_gap: fw.point.fw_gap,
        results,
    })
}

/// `compare`: traces per scheduler plus the report as JSON and CSV.
pub fn cmd_compare(cfg: &ExperimentConfig, dir: &Path) -> Result<Report<ComparisonReport>> {
    compared(cfg)?;
    create_dir(dir)?;
    let report = Report::new(cfg, compare(cfg, Some(dir))?);
    write_text(&dir.join(format!("{}-compare.json", cfg.name)), &report.to_json())?;
    write_text(&dir.join(format!("{}-compare.csv", cfg.name)), &report.body.to_csv(cfg))?;
    Ok(report)
}

/// Window of the steady-state oscillation statistic.
pub const OSCILLATION_WINDOW: usize = 100;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SweepPoint {
    pub value: f64,
    pub utility: Option<f64>,
    pub utility_smoothed: Option<f64>,
    /// Standard deviation of `U(X(t))` over the final rounds.
    pub trailing_std: Option<f64>,
    pub time_fractions: Option<TimeFractions>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SweepReport {
    pub param: SweepParam,
    pub points: Vec<SweepPoint>,
    pub outputs: Vec<String>,
}

pub fn sweep_columns() -> Vec<String> {
    [
        "param",
        "value",
        "seed",
        "scheduler",
        "t",
        "client",
        "x",
        "X",
        "xbar",
        "alpha_true",
        "alpha_hat",
        "S",
        "U_smoothed",
        "U_running_avg",
        "total_ms",
    ]
    .iter()
    .map(|s| s.to_string())
    .collect()
}

fn sweep_rows(param: SweepParam, value: f64, r: &RoundRecord, scheduler: &str, seed: u64, out: &mut String) {
    let shared = format!("{},{},{seed},{scheduler},{}", param.name(), fmt_sig9(value), r.t);
    for i in 0..r.slots.len() {
        out.push_str(&format!(
            "{shared},{i},{},{},{},{},{},{},{},{},{}\n",
            r.goodput[i],
            fmt_sig9(r.goodput_hat[i]),
            fmt_sig9(r.running_avg[i]),
            fmt_sig9(r.alpha_true[i]),
            fmt_sig9(r.alpha_hat[i]),
            r.slots[i],
            fmt_sig9(r.utility_smoothed),
            fmt_sig9(r.utility_running_avg),
            fmt_sig9(r.time.total_ms),
        ));
    }
}

/// Runs `cfg` once per value of `param` (in parallel, sharing the seed) and
/// returns the summary plus the long-format CSV body rows.
pub fn sweep(cfg: &ExperimentConfig, param: SweepParam, values: &[f64]) -> Result<(SweepReport, String)> {
    if values.is_empty() {
        return Err(Error::Usage("sweep needs at least one value".into()));
    }
    let configs = values
        .iter()
        .map(|&v| cfg.with_param(param, v))
        .collect::<Result<Vec<_>>>()?;
    let runs = configs
        .par_iter()
        .zip(values)
        .map(|(c, &value)| {
            let mut rows = String::new();
            let mut series = Vec::with_capacity(c.rounds as usize);
            let s = simulate(c, c.scheduler, |r| {
                series.push(r.utility_smoothed);
                sweep_rows(param, value, r, c.scheduler.name(), c.seed, &mut rows);
                Ok(())
            })?;
            let point = SweepPoint {
                value,
                utility: s.utility,
                utility_smoothed: s.utility_smoothed,
                trailing_std: trailing_std(&series, OSCILLATION_WINDOW),
                time_fractions: s.time_fractions,
            };
            Ok((point, rows))
        })
        .collect::<Result<Vec<_>>>()?;
    let mut body = String::new();
    let mut points = Vec::new();
    for (p, rows) in runs {
        points.push(p);
        body.push_str(&rows);
    }
    Ok((
        SweepReport {
            param,
            points,
            outputs: Vec::new(),
        },
        body,
    ))
}

/// `sweep`: long-format CSV plus a JSON summary.
pub fn cmd_sweep(cfg: &ExperimentConfig, param: SweepParam, values: &[f64], dir: &Path) -> Result<Report<SweepReport>> {
    let (mut report, body) = sweep(cfg, param, values)?;
    create_dir(dir)?;
    let stem = format!("{}-sweep-{}", cfg.name, param.name());
    let csv = dir.join(format!("{stem}.csv"));
    let values: Vec<String> = values.iter().map(|v| fmt_sig9(*v)).collect();
    let title = format!(
        "sweep {} {}=[{}] seed={}",
        cfg.name,
        param.name(),
        values.join(","),
        cfg.seed
    );
    write_text(&csv, &(csv_header(cfg, &title, &sweep_columns()) + &body))?;
    let json = dir.join(format!("{stem}.json"));
    report.outputs = vec![csv.display().to_string(), json.display().to_string()];
    let report = Report::new(cfg, report);
    write_text(&json, &report.to_json())?;
    Ok(report)
}
