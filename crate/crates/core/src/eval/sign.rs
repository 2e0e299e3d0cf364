use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::eval::report::RunReport;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Sign {
    Positive,
    Negative,
    Neutral,
}

impl Sign {
    pub fn of(delta: f64) -> Sign {
        if delta > 0.0 {
            Sign::Positive
        } else if delta < 0.0 {
            Sign::Negative
        } else {
            Sign::Neutral
        }
    }

    pub fn symbol(self) -> &'static str {
        match self {
            Sign::Positive => "+",
            Sign::Negative => "-",
            Sign::Neutral => "0",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SignRow {
    /// Run id of the joint training run.
    pub run_id: String,
    /// The task added in the joint run.
    pub new_task: String,
    /// Per existing task: joint AUC − pretrain AUC.
    pub deltas: Vec<f64>,
    pub signs: Vec<Sign>,
    /// Mean Pearson correlation between the new task and the existing
    /// tasks, when the joint report carries a correlation table.
    pub avg_coef: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SignTable {
    pub pretrain_run: String,
    pub existing_tasks: Vec<String>,
    pub rows: Vec<SignRow>,
}

/// Signs of `AUC(joint training with the new task) − AUC(pretrain)` for every
/// existing task of the pretrain run.
pub fn build_sign_table(pretrain: &RunReport, joints: &[RunReport]) -> Result<SignTable> {
    if joints.is_empty() {
        return Err(Error::Invalid(
            "sign table needs at least one joint run".into(),
        ));
    }
    let existing: Vec<String> = pretrain.test_auc.keys().cloned().collect();
    if existing.is_empty() {
        return Err(Error::Invalid(format!(
            "pretrain run `{}` has no AUC",
            pretrain.run_id
        )));
    }
    let mut rows = Vec::new();
    for j in joints {
        let new: Vec<&String> = j
            .test_auc
            .keys()
            .filter(|t| !existing.contains(t))
            .collect();
        let [new_task] = new.as_slice() else {
            return Err(Error::Invalid(format!(
                "joint run `{}` must add exactly one task to {:?}",
                j.run_id, existing
            )));
        };
        let mut deltas = Vec::new();
        for t in &existing {
            let after = j.test_auc.get(t).ok_or_else(|| {
                Error::Invalid(format!("joint run `{}` has no AUC for `{t}`", j.run_id))
            })?;
            deltas.push(after - pretrain.test_auc[t]);
        }
        let coefs: Vec<f64> = j
            .correlation
            .iter()
            .filter(|c| {
                (&c.task_a == *new_task && existing.contains(&c.task_b))
                    || (&c.task_b == *new_task && existing.contains(&c.task_a))
            })
            .map(|c| c.coefficient)
            .collect();
        rows.push(SignRow {
            run_id: j.run_id.clone(),
            new_task: (*new_task).clone(),
            signs: deltas.iter().map(|&d| Sign::of(d)).collect(),
            deltas,
            avg_coef: (coefs.len() == existing.len())
                .then(|| coefs.iter().sum::<f64>() / coefs.len() as f64),
        });
    }
    Ok(SignTable {
        pretrain_run: pretrain.run_id.clone(),
        existing_tasks: existing,
        rows,
    })
}

impl SignTable {
    pub fn has_negative(&self) -> bool {
        self.rows.iter().any(|r| r.signs.contains(&Sign::Negative))
    }

    /// One row per new task, one column per existing task, then Avg.Coef.
    pub fn render(&self) -> String {
        let w0 = self
            .rows
            .iter()
            .map(|r| r.new_task.len() + 4)
            .max()
            .unwrap_or(8)
            .max(8);
        let widths: Vec<usize> = self.existing_tasks.iter().map(|t| t.len().max(9)).collect();
        let mut out = String::new();
        write!(out, "{:<w0$}", "new task").unwrap();
        for (t, w) in self.existing_tasks.iter().zip(&widths) {
            write!(out, "  {t:>w$}").unwrap();
        }
        writeln!(out, "  {:>8}", "Avg.Coef").unwrap();
        for r in &self.rows {
            write!(out, "{:<w0$}", format!("T3: {}", r.new_task)).unwrap();
            for ((s, d), w) in r.signs.iter().zip(&r.deltas).zip(&widths) {
                write!(out, "  {:>w$}", format!("{} {:+.4}", s.symbol(), d)).unwrap();
            }
            match r.avg_coef {
                Some(c) => writeln!(out, "  {c:>8.3}").unwrap(),
                None => writeln!(out, "  {:>8}", "n/a").unwrap(),
            }
        }
        out
    }
}
