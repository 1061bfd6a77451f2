//! Run artifacts. Metrics streams are newline-delimited JSON whose first line
//! is a header carrying the run configuration and input hashes; every later
//! line is a [`MetricsRecord`]. Summaries are CSV with [`SUMMARY_HEADER`].

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use super::config::{RunConfig, Study};
use crate::error::{Error, Result};
use crate::protocols::{EvalSummary, MetricsRecord, METRICS_SCHEMA};
use crate::util::{hash_json, write_atomic};

#[derive(Serialize)]
struct StreamHeader<'a> {
    schema: u32,
    kind: &'static str,
    config: &'a RunConfig,
    inputs: &'a BTreeMap<String, String>,
}

pub fn write_metrics(path: &Path, cfg: &RunConfig, inputs: &BTreeMap<String, String>, records: &[MetricsRecord]) -> Result<()> {
    let mut out = serde_json::to_string(&StreamHeader {
        schema: METRICS_SCHEMA,
        kind: "header",
        config: cfg,
        inputs,
    })?;
    out.push('\n');
    for r in records {
        out.push_str(&serde_json::to_string(r)?);
        out.push('\n');
    }
    write_atomic(path, out.as_bytes())
}

/// Parses a metrics stream into its header and records.
pub fn read_ndjson(path: &Path) -> Result<(Value, Vec<MetricsRecord>)> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut lines = text.lines().filter(|l| !l.trim().is_empty());
    let header: Value = serde_json::from_str(lines.next().ok_or_else(|| Error::Config(format!("{} is empty", path.display())))?)?;
    let records = lines.map(serde_json::from_str).collect::<std::result::Result<_, _>>()?;
    Ok((header, records))
}

pub const SUMMARY_HEADER: &str = "study,algorithm,protocol,selection,target_count,target_ratio,lambda,eval_threshold,\
metric,mean,ci95,mse_clean,mse_clean_ci95,test_tasks,best_episode,seed,config_hash";

/// One test result, tied to its configuration by hash.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub study: String,
    pub algorithm: String,
    pub protocol: String,
    pub selection: String,
    pub target_count: usize,
    pub target_ratio: f64,
    pub lambda: f64,
    pub eval_threshold: f64,
    pub metric: String,
    pub mean: f64,
    pub ci95: f64,
    pub mse_clean: Option<f64>,
    pub mse_clean_ci95: Option<f64>,
    pub test_tasks: usize,
    pub best_episode: u64,
    pub seed: u64,
    pub config_hash: String,
}

impl SummaryRow {
    pub fn new(cfg: &RunConfig, test: &EvalSummary, target_count: usize, best_episode: u64) -> Result<Self> {
        let (metric, stat) = match (test.accuracy, test.mse_noisy) {
            (Some(a), _) => ("accuracy", a),
            (None, Some(m)) => ("mse_noisy", m),
            _ => return Err(Error::Config("evaluation produced no metric".into())),
        };
        let p = &cfg.protocol;
        Ok(SummaryRow {
            study: cfg.study.to_string(),
            algorithm: cfg.algorithm.to_string(),
            protocol: if target_count == 0 { "sq".into() } else { "st".into() },
            selection: p.selection.to_string(),
            target_count,
            target_ratio: p.target_ratio,
            lambda: p.lambda,
            eval_threshold: if cfg.study == Study::Gaussian { cfg.gaussian.eval_threshold } else { 1.0 },
            metric: metric.into(),
            mean: stat.mean,
            ci95: stat.ci95,
            mse_clean: test.mse_clean.map(|s| s.mean),
            mse_clean_ci95: test.mse_clean.map(|s| s.ci95),
            test_tasks: test.episodes,
            best_episode,
            seed: cfg.seed,
            config_hash: hash_json(cfg)?,
        })
    }

    fn csv_line(&self) -> String {
        let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        format!(
            "{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{}",
            self.study,
            self.algorithm,
            self.protocol,
            self.selection,
            self.target_count,
            self.target_ratio,
            self.lambda,
            self.eval_threshold,
            self.metric,
            self.mean,
            self.ci95,
            opt(self.mse_clean),
            opt(self.mse_clean_ci95),
            self.test_tasks,
            self.best_episode,
            self.seed,
            self.config_hash
        )
    }
}

pub fn summary_csv(rows: &[SummaryRow]) -> String {
    let mut out = String::from(SUMMARY_HEADER);
    out.push('\n');
    for r in rows {
        let _ = writeln!(out, "{}", r.csv_line());
    }
    out
}

pub fn write_summary(path: &Path, rows: &[SummaryRow]) -> Result<()> {
    write_atomic(path, summary_csv(rows).as_bytes())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::protocols::{Algorithm, Stat};

    fn summary() -> EvalSummary {
        EvalSummary {
            episodes: 10,
            mse_noisy: Some(Stat { mean: 4.5, ci95: 0.1 }),
            mse_clean: Some(Stat { mean: 4.25, ci95: 0.1 }),
            accuracy: None,
        }
    }

    #[test]
    fn summary_columns_match_header() {
        let cfg = RunConfig::new(Study::Sinusoid, Algorithm::Maml);
        let row = SummaryRow::new(&cfg, &summary(), 0, 100).unwrap();
        let csv = summary_csv(&[row]);
        let mut lines = csv.lines();
        let h = lines.next().unwrap().split(',').count();
        assert_eq!(lines.next().unwrap().split(',').count(), h);
        assert!(csv.contains(",sq,"));
        assert!(csv.contains(",mse_noisy,4.5,"));
    }

    #[test]
    fn metrics_stream_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ndjson");
        let cfg = RunConfig::new(Study::Sinusoid, Algorithm::Protoreg);
        let rec = MetricsRecord {
            schema: METRICS_SCHEMA,
            episode: 5,
            split: "val".into(),
            loss: None,
            mse_noisy: Some(1.0),
            mse_clean: Some(0.5),
            accuracy: None,
            lr_eff: 0.01,
            wall_clock_s: 0.0,
        };
        let mut inputs = BTreeMap::new();
        inputs.insert("bank".to_string(), "abc".to_string());
        write_metrics(&path, &cfg, &inputs, std::slice::from_ref(&rec)).unwrap();
        let (header, records) = read_ndjson(&path).unwrap();
        assert_eq!(records, vec![rec]);
        let back: RunConfig = serde_json::from_value(header["config"].clone()).unwrap();
        assert_eq!(back, cfg);
        assert_eq!(header["inputs"]["bank"], "abc");
    }
}
