use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::config::ExperimentConfig;
use super::evaluate::{evaluate, EvaluationReport};
use super::plot::bar_plot;
use super::train::{prepare_split, train_on, TrainOptions};
use crate::error::{Error, Result};
use crate::metrics::{mean_sd, summary_table, write_metrics_csv};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AblationAxis {
    M,
    Thres,
    AlphaBeta,
    Components,
    InputCombo,
}

impl FromStr for AblationAxis {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "M" | "m" => Ok(Self::M),
            "thres" | "threshold" => Ok(Self::Thres),
            "alpha_beta" => Ok(Self::AlphaBeta),
            "components" => Ok(Self::Components),
            "input_combo" => Ok(Self::InputCombo),
            _ => Err(Error::Config(format!("unknown ablation axis `{s}`"))),
        }
    }
}

impl fmt::Display for AblationAxis {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::M => "M",
            Self::Thres => "thres",
            Self::AlphaBeta => "alpha_beta",
            Self::Components => "components",
            Self::InputCombo => "input_combo",
        })
    }
}

/// Applies one ablation value to a base configuration.
///
/// `components` takes `model1` (no decomposition loss, no filtering),
/// `model2` (no filtering), `model3` (no decomposition loss), `ours`, and
/// `baseline` (supervised only). `alpha_beta` takes `alpha:beta`.
pub fn apply_ablation(base: &ExperimentConfig, axis: AblationAxis, value: &str) -> Result<ExperimentConfig> {
    let bad = || Error::Config(format!("invalid value `{value}` for ablation axis {axis}"));
    let mut c = base.clone();
    match axis {
        AblationAxis::M => c.m = value.parse().map_err(|_| bad())?,
        AblationAxis::Thres => c.threshold = value.parse().map_err(|_| bad())?,
        AblationAxis::AlphaBeta => {
            let (a, b) = value.split_once(':').ok_or_else(bad)?;
            c.loss.alpha = a.trim().parse().map_err(|_| bad())?;
            c.loss.beta = b.trim().parse().map_err(|_| bad())?;
        }
        AblationAxis::Components => {
            let (dcp, cse) = match value.to_ascii_lowercase().as_str() {
                "model1" => (false, false),
                "model2" => (true, false),
                "model3" => (false, true),
                "ours" => (true, true),
                "baseline" => return Ok(base.baseline()),
                _ => return Err(bad()),
            };
            c.use_dcp = dcp;
            c.use_cse = cse;
        }
        AblationAxis::InputCombo => c.input_combo = value.parse()?,
    }
    c.validate()?;
    Ok(c)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub value: String,
    pub report: EvaluationReport,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationTable {
    pub axis: AblationAxis,
    pub rows: Vec<AblationRow>,
}

impl AblationTable {
    pub fn render(&self) -> String {
        let rows: Vec<(String, Vec<_>)> = self.rows.iter().map(|r| (format!("{}={}", self.axis, r.value), r.report.results.clone())).collect();
        summary_table(&rows)
    }

    pub fn mean_dsc(&self) -> Vec<f64> {
        self.rows.iter().map(|r| mean_sd(&r.report.results.iter().map(|m| m.dsc).collect::<Vec<_>>()).0).collect()
    }
}

/// One training run per value on a shared split, each evaluated on the test
/// subjects.
pub fn run_ablation(base: &ExperimentConfig, axis: AblationAxis, values: &[String], output_dir: Option<&Path>) -> Result<AblationTable> {
    let configs: Vec<ExperimentConfig> = values.iter().map(|v| apply_ablation(base, axis, v)).collect::<Result<_>>()?;
    let split = prepare_split(base)?;
    let mut rows = Vec::new();
    for (value, cfg) in values.iter().zip(&configs) {
        let run_dir = output_dir.map(|d| d.join(format!("{axis}_{}", value.replace([':', '/', '+'], "_"))));
        let outcome = train_on(cfg, &split, &TrainOptions { output_dir: run_dir.clone(), ..Default::default() })?;
        let report = evaluate(&outcome.checkpoint, &split.test);
        if let Some(d) = &run_dir {
            write_metrics_csv(&d.join("metrics.csv"), &report.results)?;
        }
        rows.push(AblationRow { value: value.clone(), report });
    }
    let table = AblationTable { axis, rows };
    if let Some(d) = output_dir {
        std::fs::write(d.join(format!("ablation_{axis}.txt")), table.render()).map_err(|e| Error::io(d, e))?;
        bar_plot(&d.join(format!("ablation_{axis}.png")), &table.mean_dsc())?;
    }
    Ok(table)
}
