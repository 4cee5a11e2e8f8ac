use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use super::{EpochRecord, TrainConfig, TrainOutcome};
use crate::error::{Error, Result};
use crate::joint_loss::SIMPLEX_TOLERANCE;

pub const CSV_HEADER: &str =
    "epoch,train_joint_mean,train_joint_sum,val_joint_mean,val_joint_sum,w_emotion,w_gender,nll_emotion,nll_gender";

/// Renders a curve as CSV. Weight and NLL columns assume the two-task
/// (emotion, gender) layout; the NLL columns hold validation means.
/// Numbers use the shortest representation that parses back to the same
/// `f64`, so rendering is exact and reproducible.
pub fn curve_csv(curve: &[EpochRecord]) -> Result<String> {
    let mut out = String::with_capacity(64 * (curve.len() + 1));
    out.push_str(CSV_HEADER);
    out.push('\n');
    for r in curve {
        if r.weights.len() != 2 || r.val_task_nll.len() != 2 {
            return Err(Error::argument("curve_csv", "CSV layout needs exactly two tasks"));
        }
        writeln!(
            out,
            "{},{},{},{},{},{},{},{},{}",
            r.epoch,
            r.train_joint_mean,
            r.train_joint_sum,
            r.val_joint_mean,
            r.val_joint_sum,
            r.weights[0],
            r.weights[1],
            r.val_task_nll[0],
            r.val_task_nll[1]
        )
        .expect("writing to a String");
    }
    Ok(out)
}

/// One row of the comparison table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub name: String,
    pub audio: bool,
    pub video: bool,
    pub dynamic: bool,
    pub final_weights: Vec<f64>,
    pub final_val_joint_mean: f64,
    pub final_val_joint_sum: f64,
    pub final_train_joint_mean: f64,
    pub best_epoch: usize,
    pub best_weights: Vec<f64>,
    pub best_val_joint_mean: f64,
    pub best_val_joint_sum: f64,
}

impl ReportRow {
    /// Validation minus training joint mean NLL at the final epoch.
    pub fn final_gap(&self) -> f64 {
        self.final_val_joint_mean - self.final_train_joint_mean
    }
}

/// One configuration's row plus its full curve (epoch 0 included).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConfigRun {
    pub row: ReportRow,
    pub curve: Vec<EpochRecord>,
}

impl ConfigRun {
    pub fn new(name: &str, config: &TrainConfig, outcome: &TrainOutcome) -> Self {
        let fusion = config.modality.fusion();
        let last = outcome.final_record();
        let best = outcome.best_record();
        Self {
            row: ReportRow {
                name: name.to_string(),
                audio: fusion.uses_audio(),
                video: fusion.uses_video(),
                dynamic: config.weighting.is_dynamic(),
                final_weights: last.weights.clone(),
                final_val_joint_mean: last.val_joint_mean,
                final_val_joint_sum: last.val_joint_sum,
                final_train_joint_mean: last.train_joint_mean,
                best_epoch: best.epoch,
                best_weights: best.weights.clone(),
                best_val_joint_mean: best.val_joint_mean,
                best_val_joint_sum: best.val_joint_sum,
            },
            curve: outcome.curve(),
        }
    }
}

/// Result of one suite seed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub seed: u64,
    pub data_seed: u64,
    pub runs: Vec<ConfigRun>,
}

impl ExperimentReport {
    pub fn new(seed: u64, data_seed: u64, runs: Vec<ConfigRun>) -> Self {
        Self { seed, data_seed, runs }
    }

    pub fn rows(&self) -> impl Iterator<Item = &ReportRow> {
        self.runs.iter().map(|r| &r.row)
    }

    pub fn row(&self, name: &str) -> Option<&ReportRow> {
        self.rows().find(|r| r.name == name)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

/// Median over seeds of one configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub name: String,
    pub audio: bool,
    pub video: bool,
    /// Per-task medians of the final weights, renormalized to sum to one.
    pub weights: Vec<f64>,
    pub val_joint_mean: f64,
    pub val_joint_sum: f64,
    pub gap: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SuiteSummary {
    pub seeds: Vec<u64>,
    pub rows: Vec<SummaryRow>,
}

fn median(mut values: Vec<f64>) -> f64 {
    values.sort_by(f64::total_cmp);
    let n = values.len();
    if n % 2 == 1 {
        values[n / 2]
    } else {
        (values[n / 2 - 1] + values[n / 2]) / 2.0
    }
}

/// Median-over-seeds summary. All reports must list the same configurations
/// in the same order.
pub fn aggregate(reports: &[ExperimentReport]) -> Result<SuiteSummary> {
    let first = reports
        .first()
        .ok_or_else(|| Error::argument("aggregate", "no reports"))?;
    let names: Vec<&str> = first.rows().map(|r| r.name.as_str()).collect();
    for r in reports {
        if r.rows().map(|r| r.name.as_str()).ne(names.iter().copied()) {
            return Err(Error::argument("aggregate", "reports list different configurations"));
        }
    }
    let rows = first
        .rows()
        .enumerate()
        .map(|(i, template)| {
            let column = |f: &dyn Fn(&ReportRow) -> f64| median(reports.iter().map(|r| f(&r.runs[i].row)).collect());
            let k = template.final_weights.len();
            let mut weights: Vec<f64> = (0..k).map(|t| column(&|r| r.final_weights[t])).collect();
            let total: f64 = weights.iter().sum();
            if (total - 1.0).abs() > SIMPLEX_TOLERANCE {
                weights.iter_mut().for_each(|w| *w /= total);
            }
            SummaryRow {
                name: template.name.clone(),
                audio: template.audio,
                video: template.video,
                weights,
                val_joint_mean: column(&|r| r.final_val_joint_mean),
                val_joint_sum: column(&|r| r.final_val_joint_sum),
                gap: column(&|r| r.final_gap()),
            }
        })
        .collect();
    Ok(SuiteSummary {
        seeds: reports.iter().map(|r| r.seed).collect(),
        rows,
    })
}

impl SuiteSummary {
    pub fn row(&self, name: &str) -> Option<&SummaryRow> {
        self.rows.iter().find(|r| r.name == name)
    }

    /// Plain-text table with columns Model, Modality, Task Weights and
    /// Validation NLL (median final joint mean, then sum).
    pub fn table(&self) -> String {
        let mut out = format!(
            "{:<14} {:<8} {:<20} {}\n",
            "Model", "Modality", "Task Weights", "Validation NLL (mean / sum)"
        );
        for r in &self.rows {
            let modality = match (r.audio, r.video) {
                (true, true) => "A+V",
                (true, false) => "A",
                (false, true) => "V",
                (false, false) => "-",
            };
            let weights: Vec<String> = r.weights.iter().map(|w| format!("{w:.4}")).collect();
            writeln!(
                out,
                "{:<14} {:<8} {:<20} {:.4} / {:.2}",
                r.name,
                modality,
                weights.join(" / "),
                r.val_joint_mean,
                r.val_joint_sum
            )
            .expect("writing to a String");
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn median_of_odd_and_even_counts() {
        assert_eq!(median(vec![3.0, 1.0, 2.0]), 2.0);
        assert_eq!(median(vec![4.0, 1.0, 2.0, 3.0]), 2.5);
    }

    #[test]
    fn csv_rejects_other_task_counts() {
        let r = EpochRecord {
            epoch: 0,
            train_joint_mean: 1.0,
            train_joint_sum: 2.0,
            val_joint_mean: 1.0,
            val_joint_sum: 2.0,
            train_task_nll: vec![1.0],
            val_task_nll: vec![1.0],
            weights: vec![1.0],
        };
        assert!(curve_csv(&[r]).is_err());
    }
}
