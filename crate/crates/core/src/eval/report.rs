//! Run reports and run comparison.
//!
//! Reports serialize as pretty-printed JSON with a fixed key order (struct
//! field order, maps sorted by key). Wall-clock time lives in a separate
//! `timing.json` next to the report so reruns produce identical report
//! bytes.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::autodiff::container::{sha256_hex, write_atomic};
use crate::data::census::LabelRule;
use crate::data::CorrelationEntry;
use crate::error::{Error, Result};

pub const REPORT_FORMAT: &str = "mptrec-report/1";

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FlopReport {
    pub convention: String,
    pub batch_size: usize,
    /// One training step under the run's own scheme.
    pub per_batch: u64,
    /// Tuning runs only: the same step recomputing frozen features.
    pub per_batch_no_cache: Option<u64>,
    /// Tuning runs only: one full-training step of the same architecture
    /// on all tasks.
    pub full_training: Option<u64>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunReport {
    pub format: String,
    pub run_id: String,
    /// `pretrain`, `baseline`, `prompt` or `finetune`.
    pub stage: String,
    pub architecture: String,
    pub config_digest: String,
    pub seed: u64,
    pub tasks: Vec<String>,
    pub test_auc: BTreeMap<String, f64>,
    pub validation_auc: BTreeMap<String, f64>,
    pub reference_run: Option<String>,
    /// `test_auc − reference.test_auc` per shared task.
    pub gains: BTreeMap<String, f64>,
    pub params_total: usize,
    pub params_trainable: usize,
    /// Trainable parameters of full training on all tasks (tuning runs).
    pub params_full_training: Option<usize>,
    pub flops: FlopReport,
    pub correlation: Vec<CorrelationEntry>,
    pub label_rules: BTreeMap<String, LabelRule>,
    /// New-task AUC over the reference's AUC on the same task.
    pub retention: Option<f64>,
    pub epochs_run: usize,
    pub best_epoch: Option<usize>,
    /// Additional named measurements such as probe accuracies.
    pub metrics: BTreeMap<String, f64>,
    pub notes: BTreeMap<String, String>,
}

impl RunReport {
    pub fn new(run_id: &str, stage: &str, architecture: &str, seed: u64) -> Self {
        RunReport {
            format: REPORT_FORMAT.into(),
            run_id: run_id.into(),
            stage: stage.into(),
            architecture: architecture.into(),
            seed,
            ..RunReport::default()
        }
    }

    /// Sets `config_digest` to the SHA-256 of the config's JSON form.
    pub fn digest_config<T: Serialize>(&mut self, config: &T) -> Result<()> {
        self.config_digest = sha256_hex(serde_json::to_string(config)?.as_bytes());
        Ok(())
    }

    /// Fills `gains` against `reference`.
    pub fn set_reference(&mut self, reference: &RunReport) -> Result<()> {
        let table = compare_runs(self, reference)?;
        self.reference_run = Some(reference.run_id.clone());
        self.gains = table
            .rows
            .iter()
            .map(|r| (r.task.clone(), r.gain))
            .collect();
        Ok(())
    }

    pub fn to_json(&self) -> Result<String> {
        let mut s = serde_json::to_string_pretty(self)?;
        s.push('\n');
        Ok(s)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let r: RunReport = serde_json::from_str(text)?;
        if r.format != REPORT_FORMAT {
            return Err(Error::Format(format!(
                "unsupported report format `{}`",
                r.format
            )));
        }
        Ok(r)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        write_atomic(path, self.to_json()?.as_bytes())
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }

    pub fn csv_header(&self) -> String {
        let mut cols: Vec<String> = [
            "run_id",
            "stage",
            "architecture",
            "seed",
            "params_trainable",
            "flops_per_batch",
        ]
        .iter()
        .map(|s| s.to_string())
        .collect();
        cols.extend(self.test_auc.keys().map(|t| format!("auc.{t}")));
        cols.extend(self.gains.keys().map(|t| format!("gain.{t}")));
        cols.join(",")
    }

    /// Comma-separated summary; numbers use their shortest round-trip form.
    pub fn csv_row(&self) -> String {
        let mut cols = vec![
            self.run_id.clone(),
            self.stage.clone(),
            self.architecture.clone(),
            self.seed.to_string(),
            self.params_trainable.to_string(),
            self.flops.per_batch.to_string(),
        ];
        cols.extend(self.test_auc.values().map(|v| v.to_string()));
        cols.extend(self.gains.values().map(|v| v.to_string()));
        cols.join(",")
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GainRow {
    pub task: String,
    pub auc_a: f64,
    pub auc_b: f64,
    pub gain: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GainTable {
    pub run_a: String,
    pub run_b: String,
    pub rows: Vec<GainRow>,
}

impl GainTable {
    /// Aligned text, AUCs and gains rounded to four decimals.
    pub fn render(&self) -> String {
        let w = self
            .rows
            .iter()
            .map(|r| r.task.len())
            .max()
            .unwrap_or(4)
            .max(4);
        let mut out = String::new();
        writeln!(out, "a = {}", self.run_a).unwrap();
        writeln!(out, "b = {}", self.run_b).unwrap();
        writeln!(
            out,
            "{:<w$}  {:>8}  {:>8}  {:>8}",
            "task", "auc_a", "auc_b", "gain"
        )
        .unwrap();
        for r in &self.rows {
            writeln!(
                out,
                "{:<w$}  {:>8.4}  {:>8.4}  {:>+8.4}",
                r.task, r.auc_a, r.auc_b, r.gain
            )
            .unwrap();
        }
        out
    }
}

/// Per-task `AUC_a − AUC_b` over the tasks both reports measured.
pub fn compare_runs(a: &RunReport, b: &RunReport) -> Result<GainTable> {
    let rows: Vec<GainRow> = a
        .test_auc
        .iter()
        .filter_map(|(t, &x)| {
            b.test_auc.get(t).map(|&y| GainRow {
                task: t.clone(),
                auc_a: x,
                auc_b: y,
                gain: x - y,
            })
        })
        .collect();
    if rows.is_empty() {
        return Err(Error::Invalid(format!(
            "runs `{}` and `{}` share no tasks",
            a.run_id, b.run_id
        )));
    }
    Ok(GainTable {
        run_a: a.run_id.clone(),
        run_b: b.run_id.clone(),
        rows,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn report(id: &str, aucs: &[(&str, f64)]) -> RunReport {
        let mut r = RunReport::new(id, "pretrain", "mpt_rec", 1);
        r.test_auc = aucs.iter().map(|(k, v)| (k.to_string(), *v)).collect();
        r
    }

    #[test]
    fn self_comparison_is_zero() {
        let a = report("a", &[("t1", 0.91), ("t2", 0.8)]);
        let t = compare_runs(&a, &a).unwrap();
        assert!(t.rows.iter().all(|r| r.gain == 0.0));
        assert!(t.render().contains("+0.0000"));
    }

    #[test]
    fn gains_are_antisymmetric() {
        let a = report("a", &[("t1", 0.91), ("t2", 0.8)]);
        let b = report("b", &[("t1", 0.87), ("t3", 0.7)]);
        let ab = compare_runs(&a, &b).unwrap();
        let ba = compare_runs(&b, &a).unwrap();
        assert_eq!(ab.rows.len(), 1);
        assert_eq!(ab.rows[0].gain, -ba.rows[0].gain);
        assert!(compare_runs(&report("c", &[("x", 0.5)]), &a).is_err());
    }

    #[test]
    fn json_round_trip_is_stable() {
        let mut a = report("a", &[("t1", 0.123456789)]);
        a.notes.insert("k".into(), "v".into());
        let s = a.to_json().unwrap();
        let back = RunReport::from_json(&s).unwrap();
        assert_eq!(back, a);
        assert_eq!(back.to_json().unwrap(), s);
    }
}
