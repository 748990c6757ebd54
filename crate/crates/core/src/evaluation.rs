//! Metric harness: MASE, quantile-based CRPS, the seasonal-naive baseline
//! and geometric-mean aggregation of baseline-normalized scores.

use std::io::Write;
use std::path::Path;

use rayon::prelude::*;
use serde::Serialize;

use crate::decoding::{Forecaster, QuantileForecast};
use crate::error::{Error, Result};
use crate::model::default_levels;
use crate::objective::pinball;
use crate::series::Series;

/// A forecasting task: context plus the held-out continuation.
#[derive(Clone, Debug, PartialEq)]
pub struct Task {
    pub id: String,
    pub context: Series,
    pub targets: Series,
}

impl Task {
    /// Holds out the last `horizon` points of `series`.
    pub fn from_series(series: &Series, horizon: usize) -> Result<Self> {
        let (context, targets) = series.split_last(horizon).ok_or(Error::InsufficientLength {
            len: series.len(),
            needed: horizon + 1,
        })?;
        Ok(Self {
            id: series.id.clone(),
            context,
            targets,
        })
    }
}

/// Value one or more whole seasons back for each of `horizon` steps:
/// `ŷ_{c+h} = y_{c+h−s·⌈h/s⌉}`. Missing anchors fall back one further season.
pub fn seasonal_naive_point(context: &Series, horizon: usize) -> Result<Vec<f64>> {
    let s = context.season_length.max(1);
    let c = context.len();
    if c < s {
        return Err(Error::Baseline(format!("context of {c} points is shorter than one season of {s}")));
    }
    (1..=horizon)
        .map(|h| {
            let mut idx = (c + h - s * h.div_ceil(s)) as isize - 1;
            while idx >= 0 {
                if let Some(v) = context.get(idx as usize) {
                    return Ok(v);
                }
                idx -= s as isize;
            }
            Err(Error::Baseline(format!("no observed value at seasonal phase of step {h}")))
        })
        .collect()
}

/// Seasonal naive as a degenerate quantile forecast: every level equals the
/// point value.
pub fn seasonal_naive(context: &Series, horizon: usize, levels: &[f32]) -> Result<QuantileForecast> {
    let point = seasonal_naive_point(context, horizon)?;
    QuantileForecast::from_rows(levels.to_vec(), point.into_iter().map(|v| vec![v; levels.len()]))
}

pub struct SeasonalNaive {
    pub levels: Vec<f32>,
}

impl Default for SeasonalNaive {
    fn default() -> Self {
        Self {
            levels: default_levels(),
        }
    }
}

impl Forecaster for SeasonalNaive {
    fn name(&self) -> &str {
        "seasonal-naive"
    }

    fn forecast(&self, context: &Series, horizon: usize) -> Result<QuantileForecast> {
        seasonal_naive(context, horizon, &self.levels)
    }
}

/// Mean absolute error over observed targets divided by the in-sample mean
/// absolute seasonal difference of the context.
pub fn mase(targets: &Series, point: &[f64], context: &Series, season_length: usize) -> Result<f64> {
    if point.len() != targets.len() {
        return Err(Error::dim("mase", &[targets.len()], &[point.len()]));
    }
    let s = season_length.max(1);
    let (mut num, mut n) = (0.0, 0usize);
    for (t, &f) in point.iter().enumerate() {
        if let Some(y) = targets.get(t) {
            num += (y - f).abs();
            n += 1;
        }
    }
    if n == 0 {
        return Err(Error::EmptyInput("every target is missing"));
    }
    let (mut den, mut m) = (0.0, 0usize);
    for t in s..context.len() {
        if let (Some(a), Some(b)) = (context.get(t), context.get(t - s)) {
            den += (a - b).abs();
            m += 1;
        }
    }
    if m == 0 || den == 0.0 {
        return Err(Error::UndefinedMase);
    }
    Ok((num / n as f64) / (den / m as f64))
}

/// `mean_t (2/|Q|)·Σ_q pinball(y_t, ŷ_t^q, q)` over observed targets.
pub fn crps_from_quantiles(targets: &Series, qf: &QuantileForecast) -> Result<f64> {
    if qf.horizon() != targets.len() {
        return Err(Error::dim("crps_from_quantiles", &[targets.len()], &[qf.horizon()]));
    }
    let scale = 2.0 / qf.n_q() as f64;
    let (mut total, mut n) = (0.0, 0usize);
    for (t, row) in qf.rows().enumerate() {
        let Some(y) = targets.get(t) else { continue };
        let mut s = 0.0;
        for (&v, &q) in row.iter().zip(&qf.levels) {
            s += pinball(y, v, crate::decoding::level_f64(q))?;
        }
        total += scale * s;
        n += 1;
    }
    if n == 0 {
        return Err(Error::EmptyInput("every target is missing"));
    }
    Ok(total / n as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EvalRecord {
    pub task_id: String,
    pub mase: f64,
    pub crps: f64,
    pub baseline_mase: f64,
    pub baseline_crps: f64,
    pub normalized_mase: f64,
    pub normalized_crps: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct Aggregate {
    pub agg_mase: f64,
    pub agg_crps: f64,
}

fn geometric_mean(xs: impl Iterator<Item = f64>) -> Result<f64> {
    let (mut log_sum, mut n) = (0.0, 0usize);
    for x in xs {
        if !(x > 0.0 && x.is_finite()) {
            return Err(Error::Aggregation(x));
        }
        log_sum += x.ln();
        n += 1;
    }
    if n == 0 {
        return Err(Error::EmptyInput("no records to aggregate"));
    }
    Ok((log_sum / n as f64).exp())
}

/// Geometric means of the normalized scores.
pub fn aggregate(records: &[EvalRecord]) -> Result<Aggregate> {
    Ok(Aggregate {
        agg_mase: geometric_mean(records.iter().map(|r| r.normalized_mase))?,
        agg_crps: geometric_mean(records.iter().map(|r| r.normalized_crps))?,
    })
}

/// Scores one forecast against its task and the seasonal-naive baseline.
pub fn score_task(task: &Task, qf: &QuantileForecast) -> Result<EvalRecord> {
    let s = task.context.season_length;
    let base = seasonal_naive(&task.context, task.targets.len(), &qf.levels)?;
    let mase_v = mase(&task.targets, &qf.median(), &task.context, s)?;
    let crps_v = crps_from_quantiles(&task.targets, qf)?;
    let baseline_mase = mase(&task.targets, &base.median(), &task.context, s)?;
    let baseline_crps = crps_from_quantiles(&task.targets, &base)?;
    if baseline_mase <= 0.0 || baseline_crps <= 0.0 {
        return Err(Error::Baseline("baseline is exact; normalized scores are undefined".into()));
    }
    Ok(EvalRecord {
        task_id: task.id.clone(),
        mase: mase_v,
        crps: crps_v,
        baseline_mase,
        baseline_crps,
        normalized_mase: mase_v / baseline_mase,
        normalized_crps: crps_v / baseline_crps,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Skipped {
    pub task_id: String,
    pub reason: String,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EvalReport {
    /// Scored tasks ordered by `task_id`.
    pub records: Vec<EvalRecord>,
    pub skipped: Vec<Skipped>,
    /// Absent when no task was scored.
    pub aggregate: Option<Aggregate>,
}

pub const REPORT_HEADER: &str = "task_id,mase,crps,baseline_mase,baseline_crps,normalized_mase,normalized_crps";

impl EvalReport {
    pub fn write_csv(&self, out: &mut impl Write) -> std::io::Result<()> {
        writeln!(out, "{REPORT_HEADER}")?;
        for r in &self.records {
            writeln!(
                out,
                "{},{},{},{},{},{},{}",
                r.task_id, r.mase, r.crps, r.baseline_mase, r.baseline_crps, r.normalized_mase, r.normalized_crps
            )?;
        }
        if let Some(a) = self.aggregate {
            writeln!(out, "aggregate,,,,,{},{}", a.agg_mase, a.agg_crps)?;
        }
        Ok(())
    }

    pub fn write_skipped_csv(&self, out: &mut impl Write) -> std::io::Result<()> {
        writeln!(out, "task_id,reason")?;
        for s in &self.skipped {
            writeln!(out, "{},\"{}\"", s.task_id, s.reason.replace('"', "'"))?;
        }
        Ok(())
    }
}

/// Forecasts and scores every task in parallel. Failing tasks are reported
/// as skipped rather than aborting the run. With `out_path`, the report is
/// written as CSV and any skips go to a sibling `.skipped.csv`.
pub fn run_eval(forecaster: &dyn Forecaster, tasks: &[Task], out_path: Option<&Path>) -> Result<EvalReport> {
    let results: Vec<(String, Result<EvalRecord>)> = tasks
        .par_iter()
        .map(|task| {
            let r = forecaster
                .forecast(&task.context, task.targets.len())
                .and_then(|qf| score_task(task, &qf));
            (task.id.clone(), r)
        })
        .collect();
    let mut records = Vec::new();
    let mut skipped = Vec::new();
    for (task_id, r) in results {
        match r {
            Ok(rec) => records.push(rec),
            Err(e) => skipped.push(Skipped {
                task_id,
                reason: e.to_string(),
            }),
        }
    }
    records.sort_by(|a, b| a.task_id.cmp(&b.task_id));
    skipped.sort_by(|a, b| a.task_id.cmp(&b.task_id));
    let aggregate = if records.is_empty() { None } else { Some(aggregate(&records)?) };
    let report = EvalReport {
        records,
        skipped,
        aggregate,
    };
    if let Some(path) = out_path {
        let mut buf = Vec::new();
        report.write_csv(&mut buf).map_err(|e| Error::io(path, e))?;
        std::fs::write(path, buf).map_err(|e| Error::io(path, e))?;
        if !report.skipped.is_empty() {
            let skip_path = path.with_extension("skipped.csv");
            let mut buf = Vec::new();
            report.write_skipped_csv(&mut buf).map_err(|e| Error::io(&skip_path, e))?;
            std::fs::write(&skip_path, buf).map_err(|e| Error::io(&skip_path, e))?;
        }
    }
    Ok(report)
}
