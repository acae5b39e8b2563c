//! JSON and CSV emission for run, cost and sweep reports.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use sbattn::attention::SweepRow;
use sbattn::cost::CostReport;
use serde::Serialize;

use crate::error::{HarnessError, Result};
use crate::train::RunReport;

pub fn write_json<T: Serialize>(value: &T, path: &Path) -> Result<()> {
    let file = File::create(path).map_err(|e| HarnessError::io(path, e))?;
    let mut out = BufWriter::new(file);
    serde_json::to_writer_pretty(&mut out, value)?;
    out.write_all(b"\n").map_err(|e| HarnessError::io(path, e))?;
    out.flush().map_err(|e| HarnessError::io(path, e))
}

fn csv_writer(path: &Path) -> Result<csv::Writer<File>> {
    let file = File::create(path).map_err(|e| HarnessError::io(path, e))?;
    Ok(csv::Writer::from_writer(file))
}

#[derive(Serialize)]
struct EpochRow {
    epoch: usize,
    lr: f64,
    train_loss: f64,
    test_acc: f64,
    lambda_min: Option<f64>,
    lambda_mean: Option<f64>,
    lambda_max: Option<f64>,
}

/// One row per epoch; λ columns stay empty for models without SB sites.
pub fn write_epoch_csv(report: &RunReport, path: &Path) -> Result<()> {
    let mut w = csv_writer(path)?;
    for e in &report.epochs {
        w.serialize(EpochRow {
            epoch: e.epoch,
            lr: e.lr,
            train_loss: e.train_loss,
            test_acc: e.test_accuracy,
            lambda_min: e.lambda.as_ref().map(|l| l.min),
            lambda_mean: e.lambda.as_ref().map(|l| l.mean),
            lambda_max: e.lambda.as_ref().map(|l| l.max),
        })?;
    }
    w.flush().map_err(|e| HarnessError::io(path, e))
}

#[derive(Serialize)]
struct CostRow<'a> {
    name: &'a str,
    #[serde(rename = "type")]
    kind: &'a str,
    params: u64,
    multiplies: u64,
    adds: u64,
}

pub fn write_cost_csv(report: &CostReport, path: &Path) -> Result<()> {
    let mut w = csv_writer(path)?;
    for l in &report.breakdown {
        w.serialize(CostRow {
            name: &l.name,
            kind: &l.kind,
            params: l.params,
            multiplies: l.multiplies,
            adds: l.adds,
        })?;
    }
    w.flush().map_err(|e| HarnessError::io(path, e))
}

pub fn write_sweep_csv(rows: &[SweepRow], path: &Path) -> Result<()> {
    let mut w = csv_writer(path)?;
    for row in rows {
        w.serialize(row)?;
    }
    w.flush().map_err(|e| HarnessError::io(path, e))
}
