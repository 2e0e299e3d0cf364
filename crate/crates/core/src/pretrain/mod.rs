//! Multi-task pre-training: adversarial disentangling of `x_s` with EM
//! pseudo-task labels plus fusion prediction, and plain joint training for
//! the baselines.
//!
//! Per step:
//!
//! ```text
//! Loss_s   = Σ_k BCE(G_k(x_s), y_k)
//! Loss_e   = NLL(K(GRL(x_s)), y_e)
//! Loss_gan = α·Loss_e + (1−α)·Loss_s
//! Loss_f   = Σ_k BCE(tower_k(x_f), y_k)
//! total    = Loss_gan + Loss_f
//! ```

pub mod em;
pub mod trainer;

use std::cell::RefCell;
use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Optimizer, OptimizerKind, Var};
use crate::data::{correlation_table, validation_split, Dataset, ExampleBatch};
use crate::error::{Error, Result};
use crate::eval::{evaluate_auc, RunReport};
use crate::exec::Parallelism;
use crate::model::accounting::{count_flops, FLOP_CONVENTION};
use crate::model::forward::{baseline_forward, mptrec_forward, ForwardMode, MptIntermediates};
use crate::model::{count_params, Architecture, FlopMode, ModelGraph};

pub use em::{assign_task_labels_em, em_update, PseudoLabelState};
pub use trainer::{EpochLog, LoopOutcome, LoopParams, StepLosses};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PretrainConfig {
    /// Weight of `Loss_e` against `Loss_s` in `Loss_gan`.
    pub alpha: f64,
    pub learning_rate: f64,
    pub optimizer: OptimizerKind,
    pub epochs: usize,
    pub batch_size: usize,
    pub grl_lambda: f64,
    /// Epochs between E-steps.
    pub em_rounds: usize,
    /// Epochs of classifier training before the first E-step.
    pub em_warmup_epochs: usize,
    pub seed: u64,
    pub validation_fraction: f64,
    pub divergence_factor: f64,
    pub divergence_patience: usize,
    /// Restore the epoch with the best mean validation AUC at the end.
    pub select_best: bool,
    pub eval_batch_size: usize,
    pub parallelism: Parallelism,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        PretrainConfig {
            alpha: 0.1,
            learning_rate: 1e-3,
            optimizer: OptimizerKind::adam(),
            epochs: 10,
            batch_size: 512,
            grl_lambda: 1.0,
            em_rounds: 1,
            em_warmup_epochs: 1,
            seed: 0,
            validation_fraction: 0.1,
            divergence_factor: 10.0,
            divergence_patience: 3,
            select_best: true,
            eval_batch_size: 4096,
            parallelism: Parallelism::default(),
        }
    }
}

impl PretrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(Error::Config(format!(
                "alpha must lie in [0, 1], got {}",
                self.alpha
            )));
        }
        if !(self.grl_lambda > 0.0) {
            return Err(Error::Config(format!(
                "grl_lambda must be > 0, got {}",
                self.grl_lambda
            )));
        }
        if self.batch_size == 0 || self.eval_batch_size == 0 || self.em_rounds == 0 {
            return Err(Error::Config(
                "batch sizes and em_rounds must be positive".into(),
            ));
        }
        if !(self.learning_rate > 0.0) {
            return Err(Error::Config("learning_rate must be > 0".into()));
        }
        if !(0.0..1.0).contains(&self.validation_fraction) {
            return Err(Error::Config(
                "validation_fraction must lie in [0, 1)".into(),
            ));
        }
        Ok(())
    }

    pub(crate) fn loop_params(&self) -> LoopParams {
        LoopParams {
            learning_rate: self.learning_rate,
            optimizer: self.optimizer,
            epochs: self.epochs,
            batch_size: self.batch_size,
            seed: self.seed,
            divergence_factor: self.divergence_factor,
            divergence_patience: self.divergence_patience,
            select_best: self.select_best,
        }
    }
}

/// Scalar loss nodes of a pre-training graph.
#[derive(Clone, Debug)]
pub struct LossVars {
    pub loss_s: Vec<Var>,
    pub loss_e: Option<Var>,
    pub loss_f: Var,
    pub loss_gan: Var,
    pub total: Var,
}

impl LossVars {
    pub fn values(&self, g: &Graph) -> StepLosses {
        StepLosses {
            loss_s: self.loss_s.iter().map(|&v| g.value(v).item()).collect(),
            loss_e: self.loss_e.map(|v| g.value(v).item()),
            loss_f: g.value(self.loss_f).item(),
            loss_gan: g.value(self.loss_gan).item(),
            total: g.value(self.total).item(),
        }
    }
}

/// Forward pass and losses for one MPT-Rec pre-training batch.
/// `pseudo_labels[i]` is the EM cluster of batch row `i`.
pub fn build_pretrain_graph(
    model: &ModelGraph,
    batch: &ExampleBatch,
    pseudo_labels: &[usize],
    alpha: f64,
    grl_lambda: f64,
) -> Result<(Graph, MptIntermediates, LossVars)> {
    let mut g = Graph::new();
    let out = mptrec_forward(&mut g, model, batch, ForwardMode::Pretrain { grl_lambda })?;
    let mut loss_s = Vec::new();
    let mut loss_f_parts = Vec::new();
    for (k, task) in model.tasks.iter().enumerate() {
        let y = batch.labels(task)?;
        loss_s.push(g.bce_loss(out.aux_predictions[k], y)?);
        loss_f_parts.push(g.bce_loss(out.predictions[k], y)?);
    }
    let loss_f = g.add_all(&loss_f_parts)?;
    let sum_s = g.add_all(&loss_s)?;
    let share = g.scale(sum_s, 1.0 - alpha)?;
    let (loss_e, loss_gan) = match out.class_probs {
        Some(probs) => {
            let le = g.nll_loss(probs, pseudo_labels)?;
            let weighted = g.scale(le, alpha)?;
            (Some(le), g.add(weighted, share)?)
        }
        None => (None, share),
    };
    let total = g.add(loss_gan, loss_f)?;
    Ok((
        g,
        out,
        LossVars {
            loss_s,
            loss_e,
            loss_f,
            loss_gan,
            total,
        },
    ))
}

/// Forward pass and summed task BCE for a baseline batch.
pub fn build_baseline_graph(model: &ModelGraph, batch: &ExampleBatch) -> Result<(Graph, Var)> {
    let mut g = Graph::new();
    let out = baseline_forward(&mut g, model, batch)?;
    let mut parts = Vec::new();
    for (k, task) in model.tasks.iter().enumerate() {
        parts.push(g.bce_loss(out.predictions[k], batch.labels(task)?)?);
    }
    let total = g.add_all(&parts)?;
    Ok((g, total))
}

/// One optimizer step on all trainable parameters. Gradients are zeroed
/// first.
pub fn pretrain_step(
    model: &mut ModelGraph,
    batch: &ExampleBatch,
    pseudo_labels: &[usize],
    config: &PretrainConfig,
    optimizer: &mut Optimizer,
) -> Result<StepLosses> {
    model.store.zero_grads();
    let (g, _, vars) =
        build_pretrain_graph(model, batch, pseudo_labels, config.alpha, config.grl_lambda)?;
    g.backward(vars.total, &mut model.store)?;
    optimizer.step(&mut model.store)?;
    Ok(vars.values(&g))
}

pub fn baseline_step(
    model: &mut ModelGraph,
    batch: &ExampleBatch,
    optimizer: &mut Optimizer,
) -> Result<StepLosses> {
    model.store.zero_grads();
    let (g, total) = build_baseline_graph(model, batch)?;
    g.backward(total, &mut model.store)?;
    optimizer.step(&mut model.store)?;
    let t = g.value(total).item();
    Ok(StepLosses {
        loss_f: t,
        total: t,
        ..StepLosses::default()
    })
}

pub struct PretrainOutcome {
    pub model: ModelGraph,
    pub report: RunReport,
    pub log: Vec<EpochLog>,
    /// Final EM state; `None` for baselines and `no_gan`.
    pub pseudo_labels: Option<PseudoLabelState>,
    /// Training rows (indices into the training dataset) used for fitting.
    pub fit_rows: Vec<usize>,
    pub validation_rows: Vec<usize>,
}

fn check_tasks(model: &ModelGraph, data: &Dataset) -> Result<()> {
    for t in &model.tasks {
        data.labels(t)?;
    }
    if data.schema != model.schema {
        return Err(Error::Invalid(
            "dataset schema differs from the model schema".into(),
        ));
    }
    Ok(())
}

/// Trains every task of `model` jointly. MPT-Rec models use the adversarial
/// objective with EM pseudo-labels; baselines minimize the summed task BCE.
/// The best-validation epoch is kept and scored on `test`.
pub fn run_pretrain(
    mut model: ModelGraph,
    train: &Dataset,
    test: &Dataset,
    config: &PretrainConfig,
    run_id: &str,
) -> Result<PretrainOutcome> {
    config.validate()?;
    check_tasks(&model, train)?;
    check_tasks(&model, test)?;
    if train.is_empty() {
        return Err(Error::Invalid("training set is empty".into()));
    }
    let (fit, valid) = validation_split(train.len(), config.validation_fraction, config.seed);
    let is_mpt = model.architecture() == Architecture::MptRec;
    let em_active = is_mpt && model.mptrec()?.classifier.is_some();
    let mut position = vec![usize::MAX; train.len()];
    for (i, &r) in fit.iter().enumerate() {
        position[r] = i;
    }
    let state = RefCell::new(PseudoLabelState::uniform_random(
        fit.len(),
        model.tasks.len(),
        config.seed ^ 0xE11,
    )?);
    let params = config.loop_params();
    let par = config.parallelism;
    let validate = |m: &ModelGraph| {
        if valid.is_empty() {
            Ok(BTreeMap::new())
        } else {
            evaluate_auc(m, train, Some(&valid), config.eval_batch_size, par)
        }
    };
    let outcome = if is_mpt {
        run_loop_mpt(
            &mut model, train, &fit, &position, &state, config, &params, validate, em_active,
        )?
    } else {
        trainer::run_loop(
            &mut model,
            &fit,
            &params,
            |m, rows, opt| baseline_step(m, &train.batch(rows), opt),
            validate,
            |_, _| Ok(None),
        )?
    };
    let mut report = RunReport::new(
        run_id,
        if is_mpt { "pretrain" } else { "baseline" },
        model.architecture().name(),
        config.seed,
    );
    report.tasks = model.tasks.clone();
    report.test_auc = evaluate_auc(&model, test, None, config.eval_batch_size, par)?;
    report.validation_auc = outcome.best_validation.clone();
    report.params_total = count_params(&model, false);
    report.params_trainable = count_params(&model, true);
    report.flops.convention = FLOP_CONVENTION.into();
    report.flops.batch_size = config.batch_size;
    report.flops.per_batch = count_flops(&model, config.batch_size, FlopMode::FullTraining)?;
    if model.tasks.len() > 1 {
        report.correlation = correlation_table(train, &model.tasks)?;
    }
    report.epochs_run = outcome.epochs_run;
    report.best_epoch = outcome.best_epoch;
    Ok(PretrainOutcome {
        model,
        report,
        log: outcome.log,
        pseudo_labels: em_active.then(|| state.into_inner()),
        fit_rows: fit,
        validation_rows: valid,
    })
}

#[allow(clippy::too_many_arguments)]
fn run_loop_mpt(
    model: &mut ModelGraph,
    train: &Dataset,
    fit: &[usize],
    position: &[usize],
    state: &RefCell<PseudoLabelState>,
    config: &PretrainConfig,
    params: &LoopParams,
    validate: impl FnMut(&ModelGraph) -> Result<BTreeMap<String, f64>>,
    em_active: bool,
) -> Result<LoopOutcome> {
    trainer::run_loop(
        model,
        fit,
        params,
        |m, rows, opt| {
            let labels: Vec<usize> = {
                let s = state.borrow();
                rows.iter().map(|&r| s.labels[position[r]]).collect()
            };
            pretrain_step(m, &train.batch(rows), &labels, config, opt)
        },
        validate,
        |m, epoch| {
            if !em_active
                || epoch < config.em_warmup_epochs
                || !(epoch - config.em_warmup_epochs).is_multiple_of(config.em_rounds)
            {
                return Ok(None);
            }
            let next = assign_task_labels_em(
                m,
                train,
                fit,
                &state.borrow(),
                config.eval_batch_size,
                config.parallelism,
            )?;
            let changed = next.history.last().map(|h| h.changed);
            *state.borrow_mut() = next;
            Ok(changed)
        },
    )
}
