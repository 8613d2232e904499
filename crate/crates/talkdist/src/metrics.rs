//! Line-oriented CSV metrics log: one file per run, fixed header, one row
//! per training step plus one per evaluation.
//!
//! Column mapping for the loss terms: `loss_interact` carries the method's
//! weighted primary distillation term(s) (the per-iteration interaction
//! terms, or the logit/fitnet term of a baseline), `loss_mc` the weighted
//! message-space term (message consistency, or the feature term of the
//! fd/hybrid baselines), `loss_sc` the weighted state-consistency term.
//! Every row satisfies loss_total = loss_gt + loss_interact + loss_mc +
//! loss_sc up to f32 rounding.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::losses::LossReport;

pub const CSV_HEADER: &str =
    "step,wall_ms,split,method,k,loss_total,loss_gt,loss_interact,loss_mc,loss_sc,metric_name,metric_value";

#[derive(Debug, Clone, PartialEq)]
pub struct MetricRow {
    pub step: usize,
    pub wall_ms: u128,
    pub split: String,
    pub method: String,
    pub k: usize,
    pub loss_total: Option<f32>,
    pub loss_gt: Option<f32>,
    pub loss_interact: Option<f32>,
    pub loss_mc: Option<f32>,
    pub loss_sc: Option<f32>,
    pub metric_name: Option<String>,
    pub metric_value: Option<f64>,
}

impl MetricRow {
    pub fn train_loss(
        step: usize,
        wall_ms: u128,
        method: &str,
        k: usize,
        report: &LossReport,
    ) -> Self {
        MetricRow {
            step,
            wall_ms,
            split: "train".into(),
            method: method.into(),
            k,
            loss_total: Some(report.total),
            loss_gt: Some(report.gt),
            loss_interact: Some(report.col_interact),
            loss_mc: Some(report.col_mc),
            loss_sc: Some(report.col_sc),
            metric_name: None,
            metric_value: None,
        }
    }

    pub fn metric(
        step: usize,
        wall_ms: u128,
        split: &str,
        method: &str,
        k: usize,
        name: &str,
        value: f64,
    ) -> Self {
        MetricRow {
            step,
            wall_ms,
            split: split.into(),
            method: method.into(),
            k,
            loss_total: None,
            loss_gt: None,
            loss_interact: None,
            loss_mc: None,
            loss_sc: None,
            metric_name: Some(name.into()),
            metric_value: Some(value),
        }
    }

    /// Everything except wall-clock time, for determinism comparisons.
    #[allow(clippy::type_complexity)]
    pub fn deterministic_fields(
        &self,
    ) -> (
        usize,
        &str,
        &str,
        usize,
        [Option<u32>; 5],
        Option<&str>,
        Option<u64>,
    ) {
        (
            self.step,
            &self.split,
            &self.method,
            self.k,
            [
                self.loss_total.map(f32::to_bits),
                self.loss_gt.map(f32::to_bits),
                self.loss_interact.map(f32::to_bits),
                self.loss_mc.map(f32::to_bits),
                self.loss_sc.map(f32::to_bits),
            ],
            self.metric_name.as_deref(),
            self.metric_value.map(f64::to_bits),
        )
    }

    pub fn to_csv(&self) -> String {
        let f32s = |v: Option<f32>| v.map(|x| format!("{x}")).unwrap_or_default();
        format!(
            "{},{},{},{},{},{},{},{},{},{},{},{}",
            self.step,
            self.wall_ms,
            self.split,
            self.method,
            self.k,
            f32s(self.loss_total),
            f32s(self.loss_gt),
            f32s(self.loss_interact),
            f32s(self.loss_mc),
            f32s(self.loss_sc),
            self.metric_name.clone().unwrap_or_default(),
            self.metric_value.map(|v| format!("{v}")).unwrap_or_default(),
        )
    }

    pub fn from_csv(line: &str) -> Result<Self> {
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 12 {
            return Err(Error::Data(format!(
                "metrics row has {} fields, expected 12: {line}",
                fields.len()
            )));
        }
        let opt_f32 = |s: &str| -> Result<Option<f32>> {
            if s.is_empty() {
                Ok(None)
            } else {
                s.parse::<f32>()
                    .map(Some)
                    .map_err(|_| Error::Data(format!("bad float '{s}' in metrics row")))
            }
        };
        Ok(MetricRow {
            step: fields[0]
                .parse()
                .map_err(|_| Error::Data(format!("bad step '{}'", fields[0])))?,
            wall_ms: fields[1]
                .parse()
                .map_err(|_| Error::Data(format!("bad wall_ms '{}'", fields[1])))?,
            split: fields[2].to_string(),
            method: fields[3].to_string(),
            k: fields[4].parse().map_err(|_| Error::Data(format!("bad k '{}'", fields[4])))?,
            loss_total: opt_f32(fields[5])?,
            loss_gt: opt_f32(fields[6])?,
            loss_interact: opt_f32(fields[7])?,
            loss_mc: opt_f32(fields[8])?,
            loss_sc: opt_f32(fields[9])?,
            metric_name: (!fields[10].is_empty()).then(|| fields[10].to_string()),
            metric_value: if fields[11].is_empty() {
                None
            } else {
                Some(
                    fields[11]
                        .parse::<f64>()
                        .map_err(|_| Error::Data(format!("bad metric value '{}'", fields[11])))?,
                )
            },
        })
    }
}

pub struct MetricsWriter {
    out: BufWriter<File>,
}

impl MetricsWriter {
    pub fn create(path: &Path) -> Result<Self> {
        let file = File::create(path)?;
        let mut out = BufWriter::new(file);
        writeln!(out, "{CSV_HEADER}")?;
        Ok(MetricsWriter { out })
    }

    pub fn write_row(&mut self, row: &MetricRow) -> Result<()> {
        writeln!(self.out, "{}", row.to_csv())?;
        Ok(())
    }

    pub fn finish(mut self) -> Result<()> {
        self.out.flush()?;
        Ok(())
    }
}

pub fn write_rows(path: &Path, rows: &[MetricRow]) -> Result<()> {
    let mut w = MetricsWriter::create(path)?;
    for row in rows {
        w.write_row(row)?;
    }
    w.finish()
}

pub fn read_rows(path: &Path) -> Result<Vec<MetricRow>> {
    let file = File::open(path)
        .map_err(|e| Error::Data(format!("cannot open metrics file {}: {e}", path.display())))?;
    let mut lines = BufReader::new(file).lines();
    match lines.next() {
        Some(Ok(header)) if header == CSV_HEADER => {}
        other => {
            return Err(Error::Data(format!(
                "bad metrics header in {}: {:?}",
                path.display(),
                other
            )))
        }
    }
    let mut rows = Vec::new();
    for line in lines {
        let line = line?;
        if line.is_empty() {
            continue;
        }
        rows.push(MetricRow::from_csv(&line)?);
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_rows() {
        let dir = std::env::temp_dir().join(format!("td-metrics-{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("m.csv");
        let report = LossReport {
            gt: 1.5,
            col_interact: 0.25,
            col_mc: 0.1,
            col_sc: 0.0,
            total: 1.85,
            ..LossReport::default()
        };
        let rows = vec![
            MetricRow::train_loss(1, 12, "td", 2, &report),
            MetricRow::metric(10, 99, "eval", "td", 2, "rmse", 1.0625),
        ];
        write_rows(&path, &rows).unwrap();
        let back = read_rows(&path).unwrap();
        assert_eq!(rows, back);
        std::fs::remove_dir_all(&dir).ok();
    }

    #[test]
    fn loss_columns_sum_to_total() {
        let report = LossReport {
            gt: 0.7,
            col_interact: 0.31,
            col_mc: 0.05,
            col_sc: 0.125,
            total: 0.7 + 0.31 + 0.05 + 0.125,
            ..LossReport::default()
        };
        let row = MetricRow::train_loss(1, 0, "td", 1, &report);
        let sum = row.loss_gt.unwrap()
            + row.loss_interact.unwrap()
            + row.loss_mc.unwrap()
            + row.loss_sc.unwrap();
        assert!((row.loss_total.unwrap() - sum).abs() <= 1e-6 * sum.abs());
    }
}
