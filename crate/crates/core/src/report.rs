//! Experiment reports (`report.json`) and method comparison tables.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::engine::{aggregate, SeedResult};
use crate::error::{Error, Result};

pub const SCHEMA_VERSION: u32 = 1;

/// One metric summarised over seeds.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MetricEntry {
    pub mean: f64,
    pub std: f64,
    pub n_runs: usize,
    pub single_run: bool,
    pub per_seed: Vec<f64>,
    /// Feature extractor id, `none` for metrics computed on labels.
    pub extractor: String,
    /// Images scored per seed.
    pub n_samples: usize,
    /// Reference images per seed, for two-sample metrics.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub n_reference: Option<usize>,
}

impl MetricEntry {
    pub fn new(values: Vec<f64>, extractor: impl Into<String>, n_samples: usize, n_reference: Option<usize>) -> Result<Self> {
        let a = aggregate(&values)?;
        Ok(Self {
            mean: a.mean,
            std: a.std,
            n_runs: a.n,
            single_run: a.single_run,
            per_seed: values,
            extractor: extractor.into(),
            n_samples,
            n_reference,
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunSummary {
    pub run_index: usize,
    pub seed: u64,
    pub split_hash: String,
    pub test_mse: Option<f64>,
    pub val_mse: Option<f64>,
    pub aborted: Option<String>,
    pub wall_clock_secs: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunReport {
    pub schema_version: u32,
    pub method: String,
    pub config_hash: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub data_hash: Option<String>,
    pub n_runs: usize,
    pub n_aborted: usize,
    pub mse: MetricEntry,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub is_mean: Option<MetricEntry>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub is_std: Option<MetricEntry>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fid: Option<MetricEntry>,
    pub runs: Vec<RunSummary>,
    pub wall_clock_secs: f64,
}

impl RunReport {
    /// Summarises finished runs; aborted runs are listed but not aggregated.
    pub fn from_results(method: &str, config_hash: &str, results: &[SeedResult]) -> Result<Self> {
        let done: Vec<&SeedResult> = results.iter().filter(|r| r.test_mse.is_some()).collect();
        if done.is_empty() {
            return Err(Error::Report(format!("all {} runs aborted", results.len())));
        }
        let n_test = done[0].n_test;
        let mse = MetricEntry::new(done.iter().map(|r| r.test_mse.unwrap()).collect(), "none", n_test, None)?;
        let tm: Vec<_> = done.iter().filter_map(|r| r.translation.as_ref()).collect();
        let (is_mean, is_std, fid) = if tm.len() == done.len() {
            let t0 = tm[0];
            let entry = |f: &dyn Fn(&crate::metrics::TranslationMetrics) -> f64, reference| {
                MetricEntry::new(tm.iter().map(|t| f(t)).collect(), t0.extractor.clone(), t0.n_translated, reference)
            };
            (
                Some(entry(&|t| t.is_mean, None)?),
                Some(entry(&|t| t.is_std, None)?),
                Some(entry(&|t| t.fid, Some(t0.n_reference))?),
            )
        } else {
            (None, None, None)
        };
        Ok(Self {
            schema_version: SCHEMA_VERSION,
            method: method.to_string(),
            config_hash: config_hash.to_string(),
            data_hash: None,
            n_runs: results.len(),
            n_aborted: results.len() - done.len(),
            mse,
            is_mean,
            is_std,
            fid,
            runs: results
                .iter()
                .map(|r| RunSummary {
                    run_index: r.run_index,
                    seed: r.seed,
                    split_hash: r.split_hash.clone(),
                    test_mse: r.test_mse,
                    val_mse: r.val_mse,
                    aborted: r.aborted.clone(),
                    wall_clock_secs: r.wall_clock_secs,
                })
                .collect(),
            wall_clock_secs: results.iter().map(|r| r.wall_clock_secs).sum(),
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let json = serde_json::to_string_pretty(self)?;
        std::fs::write(path, json + "\n").map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let value: serde_json::Value = serde_json::from_str(&text)?;
        match value.get("schema_version").and_then(|v| v.as_u64()) {
            Some(v) if v == SCHEMA_VERSION as u64 => Ok(serde_json::from_value(value)?),
            Some(v) => Err(Error::Report(format!("{}: schema version {v}, expected {SCHEMA_VERSION}", path.display()))),
            None => Err(Error::Report(format!("{}: missing schema_version", path.display()))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ComparisonRow {
    pub method: String,
    pub mean: f64,
    pub std: f64,
    pub n_runs: usize,
    pub config_hash: String,
}

/// Rows sorted by mean test MSE, lowest first.
#[derive(Clone, Debug, PartialEq)]
pub struct Comparison {
    pub rows: Vec<ComparisonRow>,
}

pub fn compare(reports: &[RunReport]) -> Result<Comparison> {
    if reports.len() < 2 {
        return Err(Error::Report(format!("need at least 2 reports, got {}", reports.len())));
    }
    let versions: Vec<u32> = reports.iter().map(|r| r.schema_version).collect();
    if versions.iter().any(|&v| v != versions[0]) {
        return Err(Error::Report(format!("mixed schema versions {versions:?}")));
    }
    let mut rows: Vec<ComparisonRow> = reports
        .iter()
        .map(|r| ComparisonRow {
            method: r.method.clone(),
            mean: r.mse.mean,
            std: r.mse.std,
            n_runs: r.mse.n_runs,
            config_hash: r.config_hash.clone(),
        })
        .collect();
    rows.sort_by(|a, b| a.mean.total_cmp(&b.mean).then_with(|| a.method.cmp(&b.method)));
    Ok(Comparison { rows })
}

impl Comparison {
    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        for row in &self.rows {
            w.serialize(row)?;
        }
        let bytes = w.into_inner().map_err(|e| Error::Report(e.to_string()))?;
        String::from_utf8(bytes).map_err(|e| Error::Report(e.to_string()))
    }

    pub fn to_table(&self) -> String {
        let width = self.rows.iter().map(|r| r.method.len()).max().unwrap_or(0).max("method".len());
        let mut out = format!("{:<width$}  {:>12}  {:>12}  {:>6}  config\n", "method", "mean", "std", "runs");
        for r in &self.rows {
            out += &format!(
                "{:<width$}  {:>12.4}  {:>12.4}  {:>6}  {}\n",
                r.method, r.mean, r.std, r.n_runs, r.config_hash
            );
        }
        out
    }
}
