//! Run reports, their JSON/CSV forms, and the standalone-vs-combined
//! overhead comparison.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::metrics::Metrics;

use super::config::Format;
use super::HarnessError;

/// Stable CSV column order.
pub const CSV_COLUMNS: [&str; 20] = [
    "config_hash",
    "rep",
    "converged",
    "final_relative_residual",
    "spmv_count",
    "n_extra",
    "sdc_injected",
    "sdc_detected",
    "inner_restarts",
    "outer_restarts",
    "checkpoints_taken",
    "bytes_checkpointed",
    "t_sdc_d",
    "t_sdc_r",
    "t_pf_x",
    "t_pf_r",
    "t_check",
    "t_check_dynamic_fraction",
    "t_recompute",
    "total_time",
];

/// Numeric columns that enter the aggregate.
pub const AGGREGATE_COLUMNS: &[&str] = &[
    "converged",
    "final_relative_residual",
    "spmv_count",
    "n_extra",
    "sdc_injected",
    "sdc_detected",
    "inner_restarts",
    "outer_restarts",
    "checkpoints_taken",
    "bytes_checkpointed",
    "t_sdc_d",
    "t_sdc_r",
    "t_pf_x",
    "t_pf_r",
    "t_check",
    "t_check_dynamic_fraction",
    "t_recompute",
    "total_time",
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RepRecord {
    pub rep: usize,
    pub seed: u64,
    /// `converged` or the abort code.
    pub status: String,
    pub error: Option<String>,
    pub final_epoch: u64,
    pub kills: usize,
    pub metrics: Metrics,
}

impl RepRecord {
    pub fn converged(&self) -> bool {
        self.status == "converged"
    }

    /// Value of a numeric CSV column.
    pub fn column(&self, name: &str) -> Option<f64> {
        let m = &self.metrics;
        Some(match name {
            "rep" => self.rep as f64,
            "converged" => f64::from(u8::from(m.converged)),
            "final_relative_residual" => m.final_relative_residual,
            "spmv_count" => m.spmv_count as f64,
            "n_extra" => m.n_extra as f64,
            "sdc_injected" => m.sdc_injected as f64,
            "sdc_detected" => m.sdc_detected as f64,
            "inner_restarts" => m.inner_restarts as f64,
            "outer_restarts" => m.outer_restarts as f64,
            "checkpoints_taken" => m.checkpoints_taken as f64,
            "bytes_checkpointed" => m.bytes_checkpointed as f64,
            "t_sdc_d" => m.t_sdc_d,
            "t_sdc_r" => m.t_sdc_r,
            "t_pf_x" => m.t_pf_x,
            "t_pf_r" => m.t_pf_r,
            "t_check" => m.t_check,
            "t_check_dynamic_fraction" => m.t_check_dynamic_fraction(),
            "t_recompute" => m.t_recompute,
            "total_time" => m.total_time,
            _ => return None,
        })
    }

    fn csv_row(&self, config_hash: &str) -> Vec<String> {
        let m = &self.metrics;
        let mut row = vec![
            config_hash.to_string(),
            self.rep.to_string(),
            m.converged.to_string(),
        ];
        for name in &CSV_COLUMNS[3..] {
            let v = self.column(name).expect("schema column");
            // Integer counters print without a fractional part.
            let is_count = !name.starts_with("t_")
                && *name != "final_relative_residual"
                && *name != "total_time";
            row.push(if is_count {
                format!("{}", v as i64)
            } else if *name == "final_relative_residual" {
                format!("{v:e}")
            } else {
                format!("{v}")
            });
        }
        row
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Stat {
    pub mean: f64,
    /// Sample standard deviation, 0 for a single repetition.
    pub stddev: f64,
    /// `stddev / |mean|`, 0 when the mean is 0.
    pub cv: f64,
}

impl Stat {
    pub fn of(values: &[f64]) -> Stat {
        let n = values.len() as f64;
        if values.is_empty() {
            return Stat {
                mean: 0.0,
                stddev: 0.0,
                cv: 0.0,
            };
        }
        let mean = values.iter().sum::<f64>() / n;
        let stddev = if values.len() > 1 {
            (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
        } else {
            0.0
        };
        let cv = if mean != 0.0 {
            stddev / mean.abs()
        } else {
            0.0
        };
        Stat { mean, stddev, cv }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub config_hash: String,
    /// Resolved `key = value` configuration.
    pub config: BTreeMap<String, String>,
    /// Inner iterations of the fault-free reference run.
    pub reference_iterations: u64,
    pub reps: Vec<RepRecord>,
    pub aggregate: BTreeMap<String, Stat>,
}

impl RunReport {
    pub fn new(
        config_hash: String,
        config: BTreeMap<String, String>,
        reference_iterations: u64,
        reps: Vec<RepRecord>,
    ) -> Self {
        let aggregate = aggregate(&reps);
        RunReport {
            config_hash,
            config,
            reference_iterations,
            reps,
            aggregate,
        }
    }

    pub fn all_converged(&self) -> bool {
        self.reps.iter().all(RepRecord::converged)
    }

    /// 0 when every repetition converged, 2 otherwise.
    pub fn exit_code(&self) -> i32 {
        if self.all_converged() {
            0
        } else {
            2
        }
    }

    pub fn mean(&self, column: &str) -> f64 {
        self.aggregate.get(column).map_or(0.0, |s| s.mean)
    }

    pub fn to_csv(&self) -> Result<String, HarnessError> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(CSV_COLUMNS)?;
        for r in &self.reps {
            w.write_record(r.csv_row(&self.config_hash))?;
        }
        let bytes = w
            .into_inner()
            .map_err(|e| HarnessError::Io(e.into_error().to_string()))?;
        Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
    }

    pub fn to_json(&self) -> Result<String, HarnessError> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self, HarnessError> {
        Ok(serde_json::from_str(text)?)
    }
}

/// Mean, stddev and CV of every aggregate column over the repetitions.
pub fn aggregate(reps: &[RepRecord]) -> BTreeMap<String, Stat> {
    AGGREGATE_COLUMNS
        .iter()
        .map(|c| {
            let values: Vec<f64> = reps
                .iter()
                .map(|r| r.column(c).expect("schema column"))
                .collect();
            (c.to_string(), Stat::of(&values))
        })
        .collect()
}

/// Writes `report` to `path`.
pub fn emit(report: &RunReport, format: Format, path: &Path) -> Result<(), HarnessError> {
    let text = match format {
        Format::Json => report.to_json()?,
        Format::Csv => report.to_csv()?,
    };
    let mut f = BufWriter::new(
        File::create(path).map_err(|e| HarnessError::Io(format!("{}: {e}", path.display())))?,
    );
    f.write_all(text.as_bytes())
        .and_then(|_| f.flush())
        .map_err(|e| HarnessError::Io(e.to_string()))?;
    Ok(())
}

/// One quantity across the four experiment kinds.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Estimate {
    pub baseline: f64,
    pub se_only: f64,
    pub pf_only: f64,
    pub multi: f64,
    /// `baseline + (se − baseline) + (pf − baseline)`.
    pub estimate: f64,
    /// `multi − estimate`.
    pub discrepancy: f64,
}

impl Estimate {
    fn new(baseline: f64, se_only: f64, pf_only: f64, multi: f64) -> Self {
        let estimate = baseline + (se_only - baseline) + (pf_only - baseline);
        Estimate {
            baseline,
            se_only,
            pf_only,
            multi,
            estimate,
            discrepancy: multi - estimate,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Comparison {
    pub spmv_count: Estimate,
    pub total_time: Estimate,
    /// SpMVs of recomputed outer iterations in the combined run beyond the
    /// fixed inner budget: SDC restarts replayed after a rollback.
    pub interaction_spmv: f64,
}

/// Settings that must agree across the four reports.
const SHARED_KEYS: [&str; 9] = [
    "problem",
    "nx",
    "ny",
    "nz",
    "ranks",
    "inner",
    "outer",
    "tol",
    "checkpoint-basis",
];

/// Standalone-vs-combined estimate from repetition means.
pub fn compare_runs(
    baseline: &RunReport,
    se_only: &RunReport,
    pf_only: &RunReport,
    multi: &RunReport,
) -> Result<Comparison, HarnessError> {
    let all = [baseline, se_only, pf_only, multi];
    for key in SHARED_KEYS {
        let values: Vec<Option<&String>> = all.iter().map(|r| r.config.get(key)).collect();
        if values.iter().any(|v| *v != values[0]) {
            return Err(HarnessError::ConfigMismatch {
                key: key.to_string(),
                values: values
                    .iter()
                    .map(|v| v.cloned().unwrap_or_default())
                    .collect(),
            });
        }
    }
    let est = |c: &str| {
        Estimate::new(
            baseline.mean(c),
            se_only.mean(c),
            pf_only.mean(c),
            multi.mean(c),
        )
    };
    let interaction = multi
        .reps
        .iter()
        .map(|r| r.metrics.recompute_sdc_excess_spmv as f64)
        .sum::<f64>()
        / multi.reps.len().max(1) as f64;
    Ok(Comparison {
        spmv_count: est("spmv_count"),
        total_time: est("total_time"),
        interaction_spmv: interaction,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rep(i: usize, spmv: u64) -> RepRecord {
        RepRecord {
            rep: i,
            seed: i as u64,
            status: "converged".into(),
            error: None,
            final_epoch: 0,
            kills: 0,
            metrics: Metrics {
                spmv_count: spmv,
                converged: true,
                total_time: 0.5,
                ..Default::default()
            },
        }
    }

    #[test]
    fn stats_oracle() {
        let s = Stat::of(&[2.0, 4.0, 4.0, 4.0, 5.0, 5.0, 7.0, 9.0]);
        assert_eq!(s.mean, 5.0);
        // Sample variance 32/7.
        assert!((s.stddev - (32.0f64 / 7.0).sqrt()).abs() < 1e-15);
        assert_eq!(Stat::of(&[3.0]).stddev, 0.0);
        assert_eq!(Stat::of(&[0.0, 0.0]).cv, 0.0);
    }

    #[test]
    fn csv_schema() {
        let r = RunReport::new(
            "abc".into(),
            BTreeMap::new(),
            0,
            vec![rep(0, 10), rep(1, 12)],
        );
        let csv = r.to_csv().unwrap();
        let mut rd = csv::Reader::from_reader(csv.as_bytes());
        assert_eq!(rd.headers().unwrap().len(), CSV_COLUMNS.len());
        assert_eq!(rd.records().count(), 2);
        assert_eq!(r.mean("spmv_count"), 11.0);
    }

    #[test]
    fn compare_null_plans() {
        let r = RunReport::new("h".into(), BTreeMap::new(), 0, vec![rep(0, 100)]);
        let c = compare_runs(&r, &r, &r, &r).unwrap();
        assert_eq!(c.spmv_count.discrepancy, 0.0);
        assert_eq!(c.total_time.discrepancy, 0.0);
    }

    #[test]
    fn compare_mismatch() {
        let a = RunReport::new(
            "h".into(),
            [("ranks".to_string(), "4".to_string())].into(),
            0,
            vec![rep(0, 1)],
        );
        let b = RunReport::new(
            "h".into(),
            [("ranks".to_string(), "2".to_string())].into(),
            0,
            vec![rep(0, 1)],
        );
        assert!(matches!(
            compare_runs(&a, &a, &a, &b),
            Err(HarnessError::ConfigMismatch { .. })
        ));
    }
}
