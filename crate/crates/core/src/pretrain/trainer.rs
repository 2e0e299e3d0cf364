//! Epoch loop shared by every training stage: shuffled mini-batches, one
//! optimizer step per batch, validation after each epoch, best-epoch
//! snapshot and divergence guard.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Optimizer, OptimizerKind, ParamStore};
use crate::data::shuffled_batches;
use crate::error::{Error, Result};
use crate::model::ModelGraph;

/// Loss values of one step. Stages without a term leave it empty.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct StepLosses {
    pub loss_s: Vec<f64>,
    pub loss_e: Option<f64>,
    pub loss_f: f64,
    pub loss_gan: f64,
    pub total: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub loss_s: Vec<f64>,
    pub loss_e: Option<f64>,
    pub loss_f: f64,
    pub loss_gan: f64,
    pub total: f64,
    pub validation_auc: BTreeMap<String, f64>,
    pub em_changed: Option<usize>,
}

impl EpochLog {
    pub fn line(&self) -> String {
        let mut s = format!("epoch {:>3}", self.epoch);
        let ls: Vec<String> = self.loss_s.iter().map(|v| format!("{v:.6}")).collect();
        write!(s, " loss_s=[{}]", ls.join(",")).unwrap();
        match self.loss_e {
            Some(v) => write!(s, " loss_e={v:.6}").unwrap(),
            None => s.push_str(" loss_e=-"),
        }
        write!(s, " loss_f={:.6} total={:.6}", self.loss_f, self.total).unwrap();
        for (t, a) in &self.validation_auc {
            write!(s, " val_auc.{t}={a:.4}").unwrap();
        }
        if let Some(c) = self.em_changed {
            write!(s, " em_changed={c}").unwrap();
        }
        s
    }
}

#[derive(Clone, Debug)]
pub struct LoopParams {
    pub learning_rate: f64,
    pub optimizer: OptimizerKind,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub divergence_factor: f64,
    pub divergence_patience: usize,
    pub select_best: bool,
}

#[derive(Clone, Debug, Default)]
pub struct LoopOutcome {
    pub log: Vec<EpochLog>,
    pub best_epoch: Option<usize>,
    pub best_validation: BTreeMap<String, f64>,
    pub epochs_run: usize,
}

/// Largest parameter norms, for divergence diagnostics.
pub fn norm_summary(store: &ParamStore) -> String {
    let mut norms: Vec<(f64, &str)> = store
        .iter()
        .map(|(_, p)| (p.value.norm(), p.name.as_str()))
        .collect();
    norms.sort_by(|a, b| b.0.total_cmp(&a.0));
    norms
        .iter()
        .take(8)
        .map(|(n, name)| format!("{name}={n:.4e}"))
        .collect::<Vec<_>>()
        .join(", ")
}

fn mean(values: &[f64]) -> f64 {
    if values.is_empty() {
        0.0
    } else {
        values.iter().sum::<f64>() / values.len() as f64
    }
}

pub fn run_loop(
    model: &mut ModelGraph,
    fit_rows: &[usize],
    p: &LoopParams,
    mut step: impl FnMut(&mut ModelGraph, &[usize], &mut Optimizer) -> Result<StepLosses>,
    mut validate: impl FnMut(&ModelGraph) -> Result<BTreeMap<String, f64>>,
    mut after_epoch: impl FnMut(&ModelGraph, usize) -> Result<Option<usize>>,
) -> Result<LoopOutcome> {
    if p.batch_size == 0 || !(p.learning_rate > 0.0) {
        return Err(Error::Config(
            "batch_size and learning_rate must be positive".into(),
        ));
    }
    let mut opt = Optimizer::new(p.optimizer, p.learning_rate);
    let mut rng = ChaCha8Rng::seed_from_u64(p.seed ^ 0x5851_F42D_4C95_7F2D);
    let mut out = LoopOutcome::default();
    let mut best_score = f64::NEG_INFINITY;
    let mut best_snapshot = None;
    let mut initial: Option<f64> = None;
    let mut above = 0usize;
    for epoch in 1..=p.epochs {
        let mut steps: Vec<StepLosses> = Vec::new();
        for (bi, rows) in shuffled_batches(fit_rows, p.batch_size, &mut rng)
            .iter()
            .enumerate()
        {
            let losses = step(model, rows, &mut opt).map_err(|e| match e {
                Error::NonFinite { .. } | Error::NonFiniteGradient { .. } => Error::Diverged(format!(
                    "{e} at epoch {epoch} batch {bi}; learning_rate={}; largest parameter norms: {}",
                    p.learning_rate,
                    norm_summary(&model.store)
                )),
                other => other,
            })?;
            initial.get_or_insert(losses.total);
            steps.push(losses);
        }
        let n_s = steps.first().map_or(0, |s| s.loss_s.len());
        let loss_s = (0..n_s)
            .map(|k| mean(&steps.iter().map(|s| s.loss_s[k]).collect::<Vec<_>>()))
            .collect();
        let loss_e = steps
            .iter()
            .map(|s| s.loss_e)
            .collect::<Option<Vec<f64>>>()
            .filter(|v| !v.is_empty())
            .map(|v| mean(&v));
        let total = mean(&steps.iter().map(|s| s.total).collect::<Vec<_>>());
        let em_changed = after_epoch(model, epoch)?;
        let validation_auc = validate(model)?;
        let entry = EpochLog {
            epoch,
            loss_s,
            loss_e,
            loss_f: mean(&steps.iter().map(|s| s.loss_f).collect::<Vec<_>>()),
            loss_gan: mean(&steps.iter().map(|s| s.loss_gan).collect::<Vec<_>>()),
            total,
            validation_auc,
            em_changed,
        };
        log::info!("{}", entry.line());
        let score = mean(&entry.validation_auc.values().copied().collect::<Vec<_>>());
        if !p.select_best || score > best_score {
            best_score = score;
            out.best_epoch = Some(epoch);
            out.best_validation = entry.validation_auc.clone();
            if p.select_best {
                best_snapshot = Some(model.store.snapshot());
            }
        }
        out.log.push(entry);
        out.epochs_run = epoch;
        if let Some(init) = initial {
            if total > p.divergence_factor * init {
                above += 1;
                if above >= p.divergence_patience {
                    return Err(Error::Diverged(format!(
                        "total loss {total:.6} exceeded {}x the initial {init:.6} for {above} epochs",
                        p.divergence_factor
                    )));
                }
            } else {
                above = 0;
            }
        }
    }
    if let Some(s) = best_snapshot {
        model.store.restore(&s);
    }
    Ok(out)
}
