//! Run outputs: the accuracy-matrix CSV and the JSON summary.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::harness::RunResult;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub dataset: String,
    pub method: String,
    pub seed: u64,
    #[serde(rename = "AA")]
    pub aa: f64,
    /// Absent for single-task streams.
    #[serde(rename = "AF")]
    pub af: Option<f64>,
    pub per_stage_retrieval_accuracy: Vec<f64>,
    pub wall_time_seconds: f64,
    pub config: serde_json::Value,
}

impl Summary {
    pub fn new(
        dataset: &str,
        method: &str,
        seed: u64,
        result: &RunResult,
        wall_time_seconds: f64,
        config: serde_json::Value,
    ) -> Self {
        Self {
            dataset: dataset.to_string(),
            method: method.to_string(),
            seed,
            aa: result.average_accuracy,
            af: result.average_forgetting,
            per_stage_retrieval_accuracy: result.per_stage_retrieval_accuracy.clone(),
            wall_time_seconds,
            config,
        }
    }

    /// Everything except the wall-clock time, which is the only field that
    /// differs between two runs of the same configuration.
    pub fn reproducible_part(&self) -> serde_json::Value {
        let mut v = serde_json::to_value(self).expect("plain data");
        v.as_object_mut().expect("struct").remove("wall_time_seconds");
        v
    }
}

#[derive(Debug, Clone)]
pub struct OutputPaths {
    pub matrix_csv: PathBuf,
    pub summary_json: PathBuf,
}

/// Writes `<dir>/<stem>.matrix.csv` and `<dir>/<stem>.summary.json`.
pub fn write_outputs(dir: &Path, stem: &str, result: &RunResult, summary: &Summary) -> Result<OutputPaths> {
    fs::create_dir_all(dir)?;
    let paths = OutputPaths {
        matrix_csv: dir.join(format!("{stem}.matrix.csv")),
        summary_json: dir.join(format!("{stem}.summary.json")),
    };
    fs::write(&paths.matrix_csv, result.matrix.to_csv())?;
    fs::write(&paths.summary_json, serde_json::to_string_pretty(summary)? + "\n")?;
    Ok(paths)
}
