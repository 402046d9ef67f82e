//! On-disk formats: the per-step trajectory CSV and the run summary JSON.
//! Column order is fixed; floats use 17 significant digits so a CSV
//! re-parses to the same bits.

use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::config::ExperimentConfig;
use crate::error::{Error, Result};
use crate::guidance::Variant;
use crate::metrics::MetricReport;
use crate::optimizer::{RunOutcome, Snapshot, StepRecord, Trajectory};

pub fn fmt_f64(x: f64) -> String {
    format!("{x:.16e}")
}

fn fmt_opt(x: Option<f64>) -> String {
    x.map(fmt_f64).unwrap_or_default()
}

pub fn trajectory_header(world_dim: usize) -> Vec<String> {
    let mut h = vec!["tau".to_string(), "t".into(), "view".into()];
    h.extend((0..world_dim).map(|i| format!("theta_{i}")));
    h.extend(
        [
            "grad_norm",
            "guidance_norm",
            "m1_norm",
            "m2_norm",
            "rec_loss",
            "rec_loss_per_dim",
            "filter_mask",
            "filter_rejections",
            "finetune_steps",
            "nearest_mode_distance",
            "source_target_distance",
        ]
        .map(String::from),
    );
    h
}

fn record_row(r: &StepRecord) -> Vec<String> {
    let mut row = vec![r.tau.to_string(), r.t.to_string(), r.view.to_string()];
    row.extend(r.theta.iter().map(|&x| fmt_f64(x)));
    row.extend([
        fmt_f64(r.grad_norm),
        fmt_f64(r.guidance_norm),
        fmt_f64(r.m1_norm),
        fmt_f64(r.m2_norm),
        fmt_f64(r.rec_loss),
        fmt_f64(r.rec_loss_per_dim),
        r.filter_mask.to_string(),
        r.filter_rejections.to_string(),
        r.finetune_steps.to_string(),
        fmt_opt(r.metrics.as_ref().map(|m| m.nearest_mode_distance)),
        fmt_opt(r.metrics.as_ref().and_then(|m| m.source_target_distance)),
    ]);
    row
}

fn csv_err(e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::Io(io),
        other => Error::InvalidArgument(format!("csv: {other:?}")),
    }
}

pub fn write_trajectory_csv<W: Write>(traj: &Trajectory, world_dim: usize, w: W) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record(trajectory_header(world_dim)).map_err(csv_err)?;
    for r in &traj.records {
        out.write_record(record_row(r)).map_err(csv_err)?;
    }
    out.flush()?;
    Ok(())
}

/// A trajectory CSV read back as named numeric columns; empty cells are NaN.
#[derive(Debug, Clone, PartialEq)]
pub struct Table {
    pub columns: Vec<String>,
    pub rows: Vec<Vec<f64>>,
}

impl Table {
    pub fn column(&self, name: &str) -> Option<Vec<f64>> {
        let i = self.columns.iter().position(|c| c == name)?;
        Some(self.rows.iter().map(|r| r[i]).collect())
    }
}

pub fn read_table<R: Read>(r: R) -> Result<Table> {
    let mut rdr = csv::Reader::from_reader(r);
    let columns: Vec<String> = rdr.headers().map_err(csv_err)?.iter().map(String::from).collect();
    let mut rows = Vec::new();
    for (i, rec) in rdr.records().enumerate() {
        let rec = rec.map_err(csv_err)?;
        let row = rec
            .iter()
            .map(|cell| {
                if cell.is_empty() {
                    Ok(f64::NAN)
                } else {
                    cell.parse::<f64>().map_err(|_| {
                        Error::InvalidArgument(format!("row {}: `{cell}` is not a number", i + 1))
                    })
                }
            })
            .collect::<Result<Vec<_>>>()?;
        rows.push(row);
    }
    Ok(Table { columns, rows })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub variant: Variant,
    pub seed: u64,
    pub steps_requested: usize,
    pub steps_completed: usize,
    /// SHA-256 of the `(view, t, eps)` stream; equal across paired runs.
    pub stream_hash: String,
    pub initial: Snapshot,
    pub report: Option<MetricReport>,
    pub filter_rejections: usize,
    pub finetune_steps: usize,
    pub final_particles: Vec<Vec<f64>>,
    pub failure: Option<String>,
    pub config: ExperimentConfig,
}

impl RunSummary {
    pub fn new(config: &ExperimentConfig, outcome: &RunOutcome) -> Self {
        let records = &outcome.trajectory.records;
        Self {
            variant: config.guidance.variant,
            seed: config.run.seed,
            steps_requested: config.run.steps,
            steps_completed: records.len(),
            stream_hash: outcome.trajectory.stream_hash.clone(),
            initial: outcome.trajectory.initial.clone(),
            report: outcome.report.clone(),
            filter_rejections: records.iter().map(|r| r.filter_rejections).sum(),
            finetune_steps: records.iter().map(|r| r.finetune_steps).sum(),
            final_particles: outcome.asset.particles.clone(),
            failure: outcome.failure.as_ref().map(ToString::to_string),
            config: config.clone(),
        }
    }
}

/// Writes `trajectory.csv` and `summary.json` into `dir`, creating it.
pub fn write_run_outputs(dir: &Path, config: &ExperimentConfig, outcome: &RunOutcome) -> Result<RunSummary> {
    std::fs::create_dir_all(dir)?;
    let file = std::fs::File::create(dir.join("trajectory.csv"))?;
    write_trajectory_csv(&outcome.trajectory, config.world_dim(), std::io::BufWriter::new(file))?;
    let summary = RunSummary::new(config, outcome);
    std::fs::write(dir.join("summary.json"), serde_json::to_string_pretty(&summary)? + "\n")?;
    Ok(summary)
}
