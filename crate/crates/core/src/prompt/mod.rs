//! New-task adaptation of a frozen pre-trained model: prompt tuning for
//! MPT-Rec and the frozen fine-tuning schemes of the baselines.
//!
//! Prompt head, per instance:
//!
//! ```text
//! h_o  = P(x_o)
//! γ    = softmax_k(h_o·E_kᵀ / T)
//! x_t  = Σ_k γ_k·x_k
//! x_new = x_t ⊙ E_n
//! x'   = β_s·x_s + β_new·x_new,  (β_s, β_new) = gate_new(x_o)
//! ŷ    = tower_new(x')
//! ```
//!
//! Every pre-trained tensor is frozen, so the features feeding the head can
//! be computed once and cached ([`FrozenCache`]).

pub mod cache;

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, OptimizerKind, Var};
use crate::data::{validation_split, Dataset, ExampleBatch};
use crate::error::{Error, Result};
use crate::eval::{auc_u8, evaluate_auc, RunReport};
use crate::exec::Parallelism;
use crate::model::accounting::{count_flops, FLOP_CONVENTION};
use crate::model::forward::{
    finetune_head, frozen_feature_names, frozen_features, prompt_head, PromptIntermediates,
};
use crate::model::{count_params, FinetuneScheme, FlopMode, ModelGraph, NewTaskParts};
use crate::pretrain::trainer::{self, EpochLog, LoopParams, StepLosses};
use crate::tensor::Tensor;

pub use cache::{source_checksum, FrozenCache};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PromptConfig {
    /// Softmax temperature of the transfer weights; unused by fine-tuning.
    pub temperature: f64,
    pub learning_rate: f64,
    pub optimizer: OptimizerKind,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    /// Parameters to freeze. `None` freezes every pre-trained parameter.
    pub freeze_manifest: Option<Vec<String>>,
    /// Train on cached frozen features instead of recomputing them.
    pub use_cache: bool,
    /// Start `E_n` at the γ-weighted mean of the existing task embeddings.
    pub init_task_embedding: bool,
    pub validation_fraction: f64,
    pub divergence_factor: f64,
    pub divergence_patience: usize,
    pub select_best: bool,
    pub eval_batch_size: usize,
    pub parallelism: Parallelism,
}

impl Default for PromptConfig {
    fn default() -> Self {
        PromptConfig {
            temperature: 1.0,
            learning_rate: 1e-3,
            optimizer: OptimizerKind::adam(),
            epochs: 5,
            batch_size: 512,
            seed: 0,
            freeze_manifest: None,
            use_cache: true,
            init_task_embedding: true,
            validation_fraction: 0.1,
            divergence_factor: 10.0,
            divergence_patience: 3,
            select_best: true,
            eval_batch_size: 4096,
            parallelism: Parallelism::default(),
        }
    }
}

impl PromptConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.temperature > 0.0) || !self.temperature.is_finite() {
            return Err(Error::Config(format!(
                "temperature must be > 0, got {}",
                self.temperature
            )));
        }
        if !(self.learning_rate > 0.0) {
            return Err(Error::Config("learning_rate must be > 0".into()));
        }
        if self.batch_size == 0 || self.eval_batch_size == 0 {
            return Err(Error::Config("batch sizes must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.validation_fraction) {
            return Err(Error::Config(
                "validation_fraction must lie in [0, 1)".into(),
            ));
        }
        Ok(())
    }

    fn loop_params(&self) -> LoopParams {
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

pub fn new_task_name(model: &ModelGraph) -> Result<&str> {
    model
        .new_task
        .as_ref()
        .map(NewTaskParts::task)
        .ok_or_else(|| Error::Invalid("model has no new task".into()))
}

/// Freezes exactly the manifest (default: every pre-trained parameter).
/// Returns the frozen names.
pub fn freeze_pretrained(
    model: &mut ModelGraph,
    manifest: Option<&[String]>,
) -> Result<Vec<String>> {
    let names = manifest.map_or_else(|| model.pretrained_param_names(), <[String]>::to_vec);
    model.store.freeze(&names)?;
    Ok(names)
}

/// Reads a freeze manifest: one parameter name per line; blank lines and
/// lines starting with `#` are skipped.
pub fn parse_manifest(text: &str) -> Vec<String> {
    text.lines()
        .map(str::trim)
        .filter(|l| !l.is_empty() && !l.starts_with('#'))
        .map(str::to_string)
        .collect()
}

/// Transfer weights `γ` (`[B, N]`) of a prompt model for raw `x_o` rows.
pub fn transfer_weights(model: &ModelGraph, x_o: &Tensor) -> Result<Tensor> {
    let mut features = BTreeMap::new();
    features.insert("x_o".to_string(), x_o.clone());
    features.insert(
        "x_s".to_string(),
        Tensor::zeros(x_o.rows(), model.hidden_dim()),
    );
    for t in &model.tasks {
        features.insert(
            format!("x_k.{t}"),
            Tensor::zeros(x_o.rows(), model.hidden_dim()),
        );
    }
    let (g, ph) = prompt_graph(model, &features)?;
    Ok(g.value(ph.gamma).clone())
}

fn feature_inputs(
    g: &mut Graph,
    model: &ModelGraph,
    features: &BTreeMap<String, Tensor>,
) -> Result<BTreeMap<String, Var>> {
    frozen_feature_names(model)?
        .into_iter()
        .map(|n| {
            let t = features
                .get(&n)
                .ok_or_else(|| Error::Invalid(format!("missing frozen feature `{n}`")))?;
            Ok((n, g.input(t.clone())?))
        })
        .collect()
}

fn prompt_graph(
    model: &ModelGraph,
    features: &BTreeMap<String, Tensor>,
) -> Result<(Graph, PromptIntermediates)> {
    let mut g = Graph::new();
    let vars = feature_inputs(&mut g, model, features)?;
    let ph = prompt_head(&mut g, model, &vars)?;
    Ok((g, ph))
}

/// New-task prediction built on precomputed features. Works for prompt and
/// fine-tuning heads.
pub fn tuning_forward(
    model: &ModelGraph,
    features: &BTreeMap<String, Tensor>,
) -> Result<(Graph, Var)> {
    let mut g = Graph::new();
    let vars = feature_inputs(&mut g, model, features)?;
    let pred = match &model.new_task {
        Some(NewTaskParts::Prompt { .. }) => prompt_head(&mut g, model, &vars)?.prediction,
        Some(NewTaskParts::Finetune { .. }) => finetune_head(&mut g, model, &vars)?,
        None => return Err(Error::Invalid("model has no new task".into())),
    };
    Ok((g, pred))
}

/// Tuning graph with the new-task BCE loss.
pub fn build_tuning_graph(
    model: &ModelGraph,
    features: &BTreeMap<String, Tensor>,
    labels: &[f64],
) -> Result<(Graph, Var, Var)> {
    let (mut g, pred) = tuning_forward(model, features)?;
    let loss = g.bce_loss(pred, labels)?;
    Ok((g, pred, loss))
}

/// Frozen features of a batch computed live.
pub fn live_features(model: &ModelGraph, batch: &ExampleBatch) -> Result<BTreeMap<String, Tensor>> {
    let mut g = Graph::new();
    let vars = frozen_features(&mut g, model, batch)?;
    Ok(vars
        .into_iter()
        .map(|(k, v)| (k, g.value(v).clone()))
        .collect())
}

/// Values of the prompt head for one batch.
#[derive(Clone, Debug, PartialEq)]
pub struct PromptOutputs {
    pub gamma: Tensor,
    pub x_t: Tensor,
    pub x_new: Tensor,
    pub beta: Option<Tensor>,
    pub x_prime: Tensor,
    pub prediction: Vec<f64>,
}

/// Prompt head on cached features; every batch row must be in the cache.
pub fn prompt_forward(
    model: &ModelGraph,
    batch: &ExampleBatch,
    cache: &FrozenCache,
) -> Result<PromptOutputs> {
    cache.check(model)?;
    let features = cache.features(&batch.row_ids)?;
    let (g, ph) = prompt_graph(model, &features)?;
    Ok(PromptOutputs {
        gamma: g.value(ph.gamma).clone(),
        x_t: g.value(ph.x_t).clone(),
        x_new: g.value(ph.x_new).clone(),
        beta: ph.beta.map(|b| g.value(b).clone()),
        x_prime: g.value(ph.x_prime).clone(),
        prediction: g.value(ph.prediction).data().to_vec(),
    })
}

/// Sets `E_n = Σ_k γ̄_k·E_k`, with `γ̄` the mean transfer weights over
/// `batch`. Task-level transfer derives `γ` from `E_n` itself, so there the
/// plain mean of the `E_k` is used.
pub fn init_new_task_embedding(model: &mut ModelGraph, batch: &ExampleBatch) -> Result<()> {
    let Some(NewTaskParts::Prompt {
        task_embedding,
        projection,
        ..
    }) = &model.new_task
    else {
        return Err(Error::Invalid("model has no prompt task".into()));
    };
    let (e_n, has_projection) = (*task_embedding, projection.is_some());
    let p = model.mptrec()?;
    let n = p.task_embeddings.len();
    let weights: Vec<f64> = if has_projection && batch.batch_size() > 0 {
        let gamma = transfer_weights(model, &live_features(model, batch)?["x_o"])?;
        (0..n)
            .map(|k| gamma.column_values(k).iter().sum::<f64>() / gamma.rows() as f64)
            .collect()
    } else {
        vec![1.0 / n as f64; n]
    };
    let h = model.hidden_dim();
    let mut value = vec![0.0; h];
    for (k, &id) in p.task_embeddings.iter().enumerate() {
        for (v, e) in value.iter_mut().zip(model.store.value(id).data()) {
            *v += weights[k] * e;
        }
    }
    model.store.get_mut(e_n).value = Tensor::row(value);
    Ok(())
}

/// Result of a prompt-tuning or fine-tuning run.
pub struct TuneOutcome {
    pub model: ModelGraph,
    pub report: RunReport,
    pub log: Vec<EpochLog>,
    pub frozen: Vec<String>,
    pub cache: Option<FrozenCache>,
}

/// Labels and splits shared by both tuning entry points.
struct TuneData<'a> {
    train: &'a Dataset,
    task: String,
    labels: Vec<u8>,
    fit: Vec<usize>,
    valid: Vec<usize>,
}

impl<'a> TuneData<'a> {
    fn new(train: &'a Dataset, task: &str, cfg: &PromptConfig) -> Result<Self> {
        let labels = train.labels(task)?.to_vec();
        if train.is_empty() {
            return Err(Error::Invalid("training set is empty".into()));
        }
        let (fit, valid) = validation_split(train.len(), cfg.validation_fraction, cfg.seed);
        Ok(TuneData {
            train,
            task: task.to_string(),
            labels,
            fit,
            valid,
        })
    }

    fn targets(&self, rows: &[usize]) -> Vec<f64> {
        rows.iter().map(|&r| self.labels[r] as f64).collect()
    }

    fn ids(&self, rows: &[usize]) -> Vec<u64> {
        rows.iter().map(|&r| self.train.row_ids[r]).collect()
    }
}

fn batch_features(
    model: &ModelGraph,
    data: &TuneData,
    cache: Option<&FrozenCache>,
    rows: &[usize],
) -> Result<BTreeMap<String, Tensor>> {
    match cache {
        Some(c) => c.features(&data.ids(rows)),
        None => live_features(model, &data.train.batch(rows)),
    }
}

fn new_task_auc(
    model: &ModelGraph,
    data: &TuneData,
    cache: Option<&FrozenCache>,
    rows: &[usize],
    bs: usize,
) -> Result<f64> {
    let mut scores = Vec::with_capacity(rows.len());
    for chunk in rows.chunks(bs) {
        let (g, pred) = tuning_forward(model, &batch_features(model, data, cache, chunk)?)?;
        scores.extend_from_slice(g.value(pred).data());
    }
    let labels: Vec<u8> = rows.iter().map(|&r| data.labels[r]).collect();
    auc_u8(&scores, &labels)
}

fn train_head(
    model: &mut ModelGraph,
    data: &TuneData,
    cache: Option<&FrozenCache>,
    cfg: &PromptConfig,
) -> Result<trainer::LoopOutcome> {
    if model.store.count(true) == 0 {
        return Ok(trainer::LoopOutcome::default());
    }
    trainer::run_loop(
        model,
        &data.fit,
        &cfg.loop_params(),
        |m, rows, opt| {
            let features = batch_features(m, data, cache, rows)?;
            m.store.zero_grads();
            let (g, _, loss) = build_tuning_graph(m, &features, &data.targets(rows))?;
            g.backward(loss, &mut m.store)?;
            opt.step(&mut m.store)?;
            let l = g.value(loss).item();
            Ok(StepLosses {
                loss_f: l,
                total: l,
                ..StepLosses::default()
            })
        },
        |m| {
            let mut out = BTreeMap::new();
            if !data.valid.is_empty() {
                out.insert(
                    data.task.clone(),
                    new_task_auc(m, data, cache, &data.valid, cfg.eval_batch_size)?,
                );
            }
            Ok(out)
        },
        |_, _| Ok(None),
    )
}

#[allow(clippy::too_many_arguments)]
fn finish(
    model: ModelGraph,
    stage: &str,
    run_id: &str,
    data: &TuneData,
    test: &Dataset,
    cfg: &PromptConfig,
    frozen: Vec<String>,
    frozen_digest: String,
    outcome: trainer::LoopOutcome,
    cache: Option<FrozenCache>,
    reference: Option<&RunReport>,
) -> Result<TuneOutcome> {
    let after = model.store.digest(Some(&frozen));
    if after != frozen_digest {
        return Err(Error::Invalid(
            "frozen parameters changed during tuning".into(),
        ));
    }
    let mut report = RunReport::new(run_id, stage, model.architecture().name(), cfg.seed);
    report.tasks = vec![data.task.clone()];
    report.test_auc = evaluate_auc(&model, test, None, cfg.eval_batch_size, cfg.parallelism)?;
    report.validation_auc = outcome.best_validation.clone();
    report.params_total = count_params(&model, false);
    report.params_trainable = count_params(&model, true);
    let mut full_cfg = model.config.clone();
    full_cfg.ablation.fixed_weights = None;
    full_cfg.ablation.task_embedding_similarity = false;
    let full = ModelGraph::build(&full_cfg, &model.schema, &model.all_tasks(), model.seed)?;
    report.params_full_training = Some(count_params(&full, true));
    report.flops.convention = FLOP_CONVENTION.into();
    report.flops.batch_size = cfg.batch_size;
    report.flops.per_batch = count_flops(&model, cfg.batch_size, FlopMode::Tuning)?;
    report.flops.per_batch_no_cache = Some(count_flops(
        &model,
        cfg.batch_size,
        FlopMode::TuningNoCache,
    )?);
    report.flops.full_training = Some(count_flops(&full, cfg.batch_size, FlopMode::FullTraining)?);
    report.epochs_run = outcome.epochs_run;
    report.best_epoch = outcome.best_epoch;
    report.notes.insert("frozen_digest".into(), frozen_digest);
    report
        .notes
        .insert("frozen_params".into(), frozen.len().to_string());
    report.notes.insert(
        "cache".into(),
        if cache.is_some() { "cached" } else { "live" }.into(),
    );
    if let Some(r) = reference {
        report.set_reference(r)?;
        if let (Some(a), Some(b)) = (report.test_auc.get(&data.task), r.test_auc.get(&data.task)) {
            report.retention = Some(a / b);
        }
    }
    Ok(TuneOutcome {
        model,
        report,
        log: outcome.log,
        frozen,
        cache,
    })
}

fn prepare_cache(
    model: &ModelGraph,
    train: &Dataset,
    cfg: &PromptConfig,
    cache: Option<FrozenCache>,
) -> Result<Option<FrozenCache>> {
    if !cfg.use_cache {
        return Ok(None);
    }
    let c = match cache {
        Some(c) => c,
        None => FrozenCache::build(model, train, None, cfg.eval_batch_size, cfg.parallelism)?,
    };
    c.check(model)?;
    Ok(Some(c))
}

/// Adds the prompt components for `task`, freezes the pre-trained model and
/// trains the new head on `train`. A supplied cache must come from the same
/// pre-trained parameters and cover every training row.
#[allow(clippy::too_many_arguments)]
pub fn run_prompt_tune(
    pretrained: ModelGraph,
    task: &str,
    train: &Dataset,
    test: &Dataset,
    cfg: &PromptConfig,
    run_id: &str,
    cache: Option<FrozenCache>,
    reference: Option<&RunReport>,
) -> Result<TuneOutcome> {
    cfg.validate()?;
    let mut model = pretrained;
    model.add_prompt_task(task, cfg.temperature)?;
    let frozen = freeze_pretrained(&mut model, cfg.freeze_manifest.as_deref())?;
    let digest = model.store.digest(Some(&frozen));
    let data = TuneData::new(train, task, cfg)?;
    if cfg.init_task_embedding {
        let warm: Vec<usize> = data.fit.iter().copied().take(cfg.batch_size).collect();
        init_new_task_embedding(&mut model, &train.batch(&warm))?;
    }
    let cache = prepare_cache(&model, train, cfg, cache)?;
    let outcome = train_head(&mut model, &data, cache.as_ref(), cfg)?;
    let mut out = finish(
        model, "prompt", run_id, &data, test, cfg, frozen, digest, outcome, cache, reference,
    )?;
    out.report
        .notes
        .insert("temperature".into(), cfg.temperature.to_string());
    Ok(out)
}

/// Frozen fine-tuning of a pre-trained baseline on `task` under `scheme`.
/// `FullFreeze` builds the scheme's new components and freezes them too, so
/// the new head stays at its initialization.
#[allow(clippy::too_many_arguments)]
pub fn finetune_baseline(
    pretrained: ModelGraph,
    task: &str,
    scheme: FinetuneScheme,
    train: &Dataset,
    test: &Dataset,
    cfg: &PromptConfig,
    run_id: &str,
    reference: Option<&RunReport>,
) -> Result<TuneOutcome> {
    cfg.validate()?;
    let mut model = pretrained;
    model.add_finetune_task(task, scheme)?;
    let mut frozen = freeze_pretrained(&mut model, cfg.freeze_manifest.as_deref())?;
    if scheme == FinetuneScheme::FullFreeze {
        let extra = model.new_task_param_names();
        model.store.freeze(&extra)?;
        frozen.extend(extra);
    }
    let digest = model.store.digest(Some(&frozen));
    let data = TuneData::new(train, task, cfg)?;
    let cache = prepare_cache(&model, train, cfg, None)?;
    let outcome = train_head(&mut model, &data, cache.as_ref(), cfg)?;
    let mut out = finish(
        model, "finetune", run_id, &data, test, cfg, frozen, digest, outcome, cache, reference,
    )?;
    out.report
        .notes
        .insert("scheme".into(), scheme.name().into());
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::synthetic::{generate_synthetic, SyntheticSpec};
    use crate::model::ModelConfig;

    fn model() -> (ModelGraph, Dataset) {
        let (ds, schema) = generate_synthetic(&SyntheticSpec {
            n_samples: 40,
            n_features: 5,
            n_tasks: 3,
            seed: 2,
            ..SyntheticSpec::default()
        })
        .unwrap();
        let cfg = ModelConfig {
            expert_hidden: vec![6, 3],
            tower_hidden: vec![4],
            classifier_hidden: vec![4],
            projection_hidden: 5,
            ..ModelConfig::default()
        };
        let m = ModelGraph::build(&cfg, &schema, &["t1".into(), "t2".into()], 4).unwrap();
        (m, ds)
    }

    #[test]
    fn default_manifest_leaves_only_new_components() {
        let (mut m, _) = model();
        m.add_prompt_task("t3", 1.0).unwrap();
        freeze_pretrained(&mut m, None).unwrap();
        let trainable: Vec<&str> = m
            .store
            .iter()
            .filter(|(_, p)| p.trainable)
            .map(|(_, p)| p.name.as_str())
            .collect();
        assert!(!trainable.is_empty());
        assert!(trainable.iter().all(|n| n.starts_with("projection/")
            || *n == "task_embedding/t3"
            || n.starts_with("gate/t3/")
            || n.starts_with("tower/t3/")));
        let unknown = freeze_pretrained(&mut m, Some(&["nope".to_string()]));
        assert!(
            matches!(unknown, Err(Error::UnknownParameters(v)) if v == vec!["nope".to_string()])
        );
    }

    #[test]
    fn cache_round_trip_and_staleness() {
        let (mut m, ds) = model();
        m.add_prompt_task("t3", 1.0).unwrap();
        let c = FrozenCache::build(&m, &ds, None, 7, Parallelism::Sequential).unwrap();
        let back = FrozenCache::from_container(
            &crate::autodiff::Container::from_bytes(&c.to_container().to_bytes().unwrap()).unwrap(),
        )
        .unwrap();
        assert_eq!(back, c);
        assert!(matches!(c.features(&[0, 999]), Err(Error::CacheMiss(v)) if v == vec![999]));
        let id = m.store.id("expert_shared/l0/b").unwrap();
        m.store.get_mut(id).value.data_mut()[0] += 1.0;
        assert!(matches!(c.check(&m), Err(Error::StaleCache { .. })));
    }

    #[test]
    fn manifest_parsing_skips_comments() {
        assert_eq!(parse_manifest("a\n# c\n\n  b  \n"), vec!["a", "b"]);
    }
}
