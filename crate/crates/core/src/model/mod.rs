//! Architectures: MPT-Rec and the Single Task, Shared Bottom, MMOE and PLE
//! baselines, plus the components added for a new task.
//!
//! A [`ModelGraph`] owns a [`ParamStore`] and the wiring that addresses it.
//! Parameter names start with their owner component (`embedding/`,
//! `expert_shared/`, `expert/<task>/`, `classifier/`, `tower_shared/<task>/`,
//! `gate/<task>/`, `tower/<task>/`, `task_embedding/<task>`, `projection/`,
//! `bottom/`, `single/<task>/`), so a name identifies exactly one owner.

pub mod accounting;
pub mod forward;
pub mod layers;

use std::collections::BTreeMap;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Container, ParamId, ParamStore};
use crate::data::FeatureSchema;
use crate::error::{Error, Result};

pub use accounting::{count_params, graph_flops, FlopMode};
pub use forward::{baseline_forward, mptrec_forward, predict_batch, ForwardMode, MptIntermediates};
pub use layers::{Activation, Dense, EmbeddingNetwork, Mlp};

pub const CHECKPOINT_FORMAT: &str = "mptrec-checkpoint/1";

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Architecture {
    SingleTask,
    SharedBottom,
    Mmoe,
    Ple,
    #[default]
    MptRec,
}

impl Architecture {
    pub fn name(self) -> &'static str {
        match self {
            Architecture::SingleTask => "single_task",
            Architecture::SharedBottom => "shared_bottom",
            Architecture::Mmoe => "mmoe",
            Architecture::Ple => "ple",
            Architecture::MptRec => "mpt_rec",
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Ablation {
    /// Predict from `x_s` alone.
    pub share_only: bool,
    /// Predict from the task-conditioned `x_k` alone.
    pub specific_only: bool,
    /// Drop the task classifier, its loss and the gradient reversal.
    pub no_gan: bool,
    /// Constant `(β_s, β_new)` in place of the new-task gate.
    pub fixed_weights: Option<[f64; 2]>,
    /// Task-level transfer weights `softmax(E_n·E_k)` instead of the
    /// instance-level projection.
    pub task_embedding_similarity: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub architecture: Architecture,
    /// Expert (and Shared Bottom / Single Task bottom) layer sizes; the last
    /// entry is the representation width `H`.
    pub expert_hidden: Vec<usize>,
    pub tower_hidden: Vec<usize>,
    pub classifier_hidden: Vec<usize>,
    pub projection_hidden: usize,
    /// MMOE expert count; `None` means one more than the task count.
    pub n_experts: Option<usize>,
    pub ple_shared_experts: usize,
    pub ple_task_experts: usize,
    /// Reuse the fusion towers for the auxiliary `x_s` predictions.
    pub share_aux_towers: bool,
    pub ablation: Ablation,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            architecture: Architecture::MptRec,
            expert_hidden: vec![256, 128],
            tower_hidden: vec![64],
            classifier_hidden: vec![64],
            projection_hidden: 64,
            n_experts: None,
            ple_shared_experts: 1,
            ple_task_experts: 1,
            share_aux_towers: false,
            ablation: Ablation::default(),
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.expert_hidden.is_empty() || self.expert_hidden.contains(&0) {
            return Err(Error::Config(
                "expert_hidden must be non-empty and positive".into(),
            ));
        }
        if self.tower_hidden.contains(&0)
            || self.classifier_hidden.contains(&0)
            || self.projection_hidden == 0
        {
            return Err(Error::Config("layer sizes must be positive".into()));
        }
        if self.n_experts == Some(0) || self.ple_shared_experts == 0 || self.ple_task_experts == 0 {
            return Err(Error::Config("expert counts must be positive".into()));
        }
        let a = &self.ablation;
        if a.share_only && a.specific_only {
            return Err(Error::Config(
                "share_only and specific_only are exclusive".into(),
            ));
        }
        if let Some([bs, bn]) = a.fixed_weights {
            if bs < 0.0 || bn < 0.0 || ((bs + bn) - 1.0).abs() > 1e-9 {
                return Err(Error::Config(format!(
                    "fixed_weights must be non-negative and sum to 1, got [{bs}, {bn}]"
                )));
            }
        }
        Ok(())
    }

    pub fn hidden_dim(&self) -> usize {
        *self.expert_hidden.last().expect("validated")
    }
}

#[derive(Clone, Debug)]
pub struct MptRecParts {
    pub embedding: EmbeddingNetwork,
    pub shared_expert: Mlp,
    pub experts: Vec<Mlp>,
    /// Absent under the `no_gan` ablation.
    pub classifier: Option<Mlp>,
    /// Empty when `share_aux_towers` is set.
    pub aux_towers: Vec<Mlp>,
    /// Empty under `share_only` / `specific_only`.
    pub gates: Vec<Mlp>,
    pub towers: Vec<Mlp>,
    pub task_embeddings: Vec<ParamId>,
}

#[derive(Clone, Debug)]
pub struct SingleTaskNet {
    pub embedding: EmbeddingNetwork,
    pub bottom: Mlp,
    pub tower: Mlp,
}

#[derive(Clone, Debug)]
pub enum Parts {
    SingleTask(Vec<SingleTaskNet>),
    SharedBottom {
        embedding: EmbeddingNetwork,
        bottom: Mlp,
        towers: Vec<Mlp>,
    },
    Mmoe {
        embedding: EmbeddingNetwork,
        experts: Vec<Mlp>,
        gates: Vec<Mlp>,
        towers: Vec<Mlp>,
    },
    Ple {
        embedding: EmbeddingNetwork,
        shared: Vec<Mlp>,
        specific: Vec<Vec<Mlp>>,
        gates: Vec<Mlp>,
        towers: Vec<Mlp>,
    },
    MptRec(MptRecParts),
}

/// Frozen fine-tuning schemes for baselines.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FinetuneScheme {
    /// Shared Bottom*: shared bottom frozen, new tower trained.
    SharedBottomStar,
    /// MMOE*: experts frozen, new gate and tower trained.
    MmoeStar,
    /// PLE*: shared experts frozen, new specific expert, gate and tower trained.
    PleStar,
    /// Control: the architecture's new-task components are built and frozen
    /// untrained.
    FullFreeze,
}

impl FinetuneScheme {
    pub fn name(self) -> &'static str {
        match self {
            FinetuneScheme::SharedBottomStar => "shared_bottom_star",
            FinetuneScheme::MmoeStar => "mmoe_star",
            FinetuneScheme::PleStar => "ple_star",
            FinetuneScheme::FullFreeze => "full_freeze",
        }
    }
}

/// Components of a new task added after pre-training.
#[derive(Clone, Debug)]
pub enum NewTaskParts {
    Prompt {
        task: String,
        temperature: f64,
        /// Absent under task-embedding-similarity transfer.
        projection: Option<Mlp>,
        task_embedding: ParamId,
        /// Absent under fixed fusion weights.
        gate: Option<Mlp>,
        tower: Mlp,
    },
    Finetune {
        task: String,
        scheme: FinetuneScheme,
        experts: Vec<Mlp>,
        gate: Option<Mlp>,
        tower: Mlp,
    },
}

impl NewTaskParts {
    pub fn task(&self) -> &str {
        match self {
            NewTaskParts::Prompt { task, .. } | NewTaskParts::Finetune { task, .. } => task,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum NewTaskSpec {
    Prompt {
        task: String,
        temperature: f64,
    },
    Finetune {
        task: String,
        scheme: FinetuneScheme,
    },
}

#[derive(Clone, Debug)]
pub struct ModelGraph {
    pub config: ModelConfig,
    pub schema: FeatureSchema,
    pub tasks: Vec<String>,
    pub seed: u64,
    pub store: ParamStore,
    pub parts: Parts,
    pub new_task: Option<NewTaskParts>,
    new_task_spec: Option<NewTaskSpec>,
    /// Parameters with index below this belong to the pre-trained model.
    base_len: usize,
}

fn new_task_seed(seed: u64) -> u64 {
    seed.wrapping_add(0x9E37_79B9_7F4A_7C15)
}

impl ModelGraph {
    /// Builds and initializes an architecture for `tasks`. Initialization
    /// depends only on `(config, schema, tasks, seed)`.
    pub fn build(
        config: &ModelConfig,
        schema: &FeatureSchema,
        tasks: &[String],
        seed: u64,
    ) -> Result<Self> {
        config.validate()?;
        schema.validate()?;
        if tasks.is_empty() {
            return Err(Error::Config("at least one task is required".into()));
        }
        let mut seen = std::collections::BTreeSet::new();
        if let Some(t) = tasks
            .iter()
            .find(|t| !seen.insert(t.as_str()) || t.contains('/') || t.is_empty())
        {
            return Err(Error::Config(format!(
                "invalid or duplicate task name `{t}`"
            )));
        }
        let d = schema.input_dim();
        if d == 0 {
            return Err(Error::Config("schema has no input columns".into()));
        }
        let h = config.hidden_dim();
        let n = tasks.len();
        let mut store = ParamStore::new();
        let rng = &mut ChaCha8Rng::seed_from_u64(seed);
        let st = &mut store;
        let eh = &config.expert_hidden;
        let th = &config.tower_hidden;
        let parts = match config.architecture {
            Architecture::SingleTask => {
                let mut nets = Vec::new();
                for t in tasks {
                    nets.push(SingleTaskNet {
                        embedding: EmbeddingNetwork::new(
                            st,
                            rng,
                            &format!("single/{t}/embedding"),
                            schema,
                        )?,
                        bottom: layers::expert(st, rng, &format!("single/{t}/bottom"), d, eh)?,
                        tower: layers::tower(st, rng, &format!("tower/{t}"), h, th)?,
                    });
                }
                Parts::SingleTask(nets)
            }
            Architecture::SharedBottom => Parts::SharedBottom {
                embedding: EmbeddingNetwork::new(st, rng, "embedding", schema)?,
                bottom: layers::expert(st, rng, "bottom", d, eh)?,
                towers: tasks
                    .iter()
                    .map(|t| layers::tower(st, rng, &format!("tower/{t}"), h, th))
                    .collect::<Result<_>>()?,
            },
            Architecture::Mmoe => {
                let e = config.n_experts.unwrap_or(n + 1);
                let embedding = EmbeddingNetwork::new(st, rng, "embedding", schema)?;
                let experts = (0..e)
                    .map(|i| layers::expert(st, rng, &format!("expert/e{i}"), d, eh))
                    .collect::<Result<_>>()?;
                let gates = tasks
                    .iter()
                    .map(|t| layers::gate(st, rng, &format!("gate/{t}"), d, e))
                    .collect::<Result<_>>()?;
                let towers = tasks
                    .iter()
                    .map(|t| layers::tower(st, rng, &format!("tower/{t}"), h, th))
                    .collect::<Result<_>>()?;
                Parts::Mmoe {
                    embedding,
                    experts,
                    gates,
                    towers,
                }
            }
            Architecture::Ple => {
                let (s, p) = (config.ple_shared_experts, config.ple_task_experts);
                let embedding = EmbeddingNetwork::new(st, rng, "embedding", schema)?;
                let shared = (0..s)
                    .map(|i| layers::expert(st, rng, &format!("expert_shared/s{i}"), d, eh))
                    .collect::<Result<_>>()?;
                let specific = tasks
                    .iter()
                    .map(|t| {
                        (0..p)
                            .map(|i| layers::expert(st, rng, &format!("expert/{t}/e{i}"), d, eh))
                            .collect::<Result<Vec<_>>>()
                    })
                    .collect::<Result<_>>()?;
                let gates = tasks
                    .iter()
                    .map(|t| layers::gate(st, rng, &format!("gate/{t}"), d, s + p))
                    .collect::<Result<_>>()?;
                let towers = tasks
                    .iter()
                    .map(|t| layers::tower(st, rng, &format!("tower/{t}"), h, th))
                    .collect::<Result<_>>()?;
                Parts::Ple {
                    embedding,
                    shared,
                    specific,
                    gates,
                    towers,
                }
            }
            Architecture::MptRec => {
                let ab = &config.ablation;
                let embedding = EmbeddingNetwork::new(st, rng, "embedding", schema)?;
                let shared_expert = layers::expert(st, rng, "expert_shared", d, eh)?;
                let experts = tasks
                    .iter()
                    .map(|t| layers::expert(st, rng, &format!("expert/{t}"), d, eh))
                    .collect::<Result<_>>()?;
                let classifier = if ab.no_gan {
                    None
                } else {
                    let dims: Vec<usize> = std::iter::once(h)
                        .chain(config.classifier_hidden.iter().copied())
                        .chain(std::iter::once(n))
                        .collect();
                    Some(Mlp::new(st, rng, "classifier", &dims, Activation::Softmax)?)
                };
                let aux_towers = if config.share_aux_towers {
                    Vec::new()
                } else {
                    tasks
                        .iter()
                        .map(|t| layers::tower(st, rng, &format!("tower_shared/{t}"), h, th))
                        .collect::<Result<_>>()?
                };
                let gates = if ab.share_only || ab.specific_only {
                    Vec::new()
                } else {
                    tasks
                        .iter()
                        .map(|t| layers::gate(st, rng, &format!("gate/{t}"), d, 2))
                        .collect::<Result<_>>()?
                };
                let towers = tasks
                    .iter()
                    .map(|t| layers::tower(st, rng, &format!("tower/{t}"), h, th))
                    .collect::<Result<_>>()?;
                let task_embeddings = tasks
                    .iter()
                    .map(|t| layers::task_embedding(st, rng, &format!("task_embedding/{t}"), h))
                    .collect::<Result<_>>()?;
                Parts::MptRec(MptRecParts {
                    embedding,
                    shared_expert,
                    experts,
                    classifier,
                    aux_towers,
                    gates,
                    towers,
                    task_embeddings,
                })
            }
        };
        let base_len = store.len();
        Ok(ModelGraph {
            config: config.clone(),
            schema: schema.clone(),
            tasks: tasks.to_vec(),
            seed,
            store,
            parts,
            new_task: None,
            new_task_spec: None,
            base_len,
        })
    }

    pub fn architecture(&self) -> Architecture {
        self.config.architecture
    }

    pub fn hidden_dim(&self) -> usize {
        self.config.hidden_dim()
    }

    pub fn input_dim(&self) -> usize {
        self.schema.input_dim()
    }

    pub fn task_index(&self, task: &str) -> Result<usize> {
        self.tasks
            .iter()
            .position(|t| t == task)
            .ok_or_else(|| Error::Invalid(format!("model has no task `{task}`")))
    }

    pub fn mptrec(&self) -> Result<&MptRecParts> {
        match &self.parts {
            Parts::MptRec(p) => Ok(p),
            _ => Err(Error::Invalid(format!(
                "operation requires mpt_rec, model is {}",
                self.architecture().name()
            ))),
        }
    }

    /// Names of every parameter that existed before a new task was added.
    pub fn pretrained_param_names(&self) -> Vec<String> {
        self.store
            .iter()
            .take(self.base_len)
            .map(|(_, p)| p.name.clone())
            .collect()
    }

    pub fn new_task_param_names(&self) -> Vec<String> {
        self.store
            .iter()
            .skip(self.base_len)
            .map(|(_, p)| p.name.clone())
            .collect()
    }

    fn check_new_task_name(&self, task: &str) -> Result<()> {
        if self.new_task.is_some() {
            return Err(Error::Invalid("model already has a new task".into()));
        }
        if self.tasks.iter().any(|t| t == task) || task.contains('/') || task.is_empty() {
            return Err(Error::Invalid(format!("invalid new task name `{task}`")));
        }
        Ok(())
    }

    /// Adds projection, `E_n`, new gate and new tower for prompt tuning.
    pub fn add_prompt_task(&mut self, task: &str, temperature: f64) -> Result<()> {
        self.check_new_task_name(task)?;
        if !(temperature > 0.0) {
            return Err(Error::Config(format!(
                "temperature must be > 0, got {temperature}"
            )));
        }
        self.mptrec()?;
        let (d, h) = (self.input_dim(), self.hidden_dim());
        let ab = self.config.ablation.clone();
        let rng = &mut ChaCha8Rng::seed_from_u64(new_task_seed(self.seed));
        let st = &mut self.store;
        let projection = if ab.task_embedding_similarity {
            None
        } else {
            Some(Mlp::new(
                st,
                rng,
                "projection",
                &[d, self.config.projection_hidden, h],
                Activation::None,
            )?)
        };
        let task_embedding = layers::task_embedding(st, rng, &format!("task_embedding/{task}"), h)?;
        let gate = if ab.fixed_weights.is_some() || ab.share_only || ab.specific_only {
            None
        } else {
            Some(layers::gate(st, rng, &format!("gate/{task}"), d, 2)?)
        };
        let tower = layers::tower(
            st,
            rng,
            &format!("tower/{task}"),
            h,
            &self.config.tower_hidden,
        )?;
        self.new_task = Some(NewTaskParts::Prompt {
            task: task.to_string(),
            temperature,
            projection,
            task_embedding,
            gate,
            tower,
        });
        self.new_task_spec = Some(NewTaskSpec::Prompt {
            task: task.to_string(),
            temperature,
        });
        Ok(())
    }

    /// Adds the new-task components of a baseline fine-tuning scheme.
    pub fn add_finetune_task(&mut self, task: &str, scheme: FinetuneScheme) -> Result<()> {
        self.check_new_task_name(task)?;
        let arch = self.architecture();
        let layout = match (scheme, arch) {
            (FinetuneScheme::SharedBottomStar, Architecture::SharedBottom)
            | (FinetuneScheme::MmoeStar, Architecture::Mmoe)
            | (FinetuneScheme::PleStar, Architecture::Ple) => scheme,
            (FinetuneScheme::FullFreeze, Architecture::SharedBottom) => {
                FinetuneScheme::SharedBottomStar
            }
            (FinetuneScheme::FullFreeze, Architecture::Mmoe) => FinetuneScheme::MmoeStar,
            (FinetuneScheme::FullFreeze, Architecture::Ple) => FinetuneScheme::PleStar,
            _ => {
                return Err(Error::Config(format!(
                    "scheme {} does not apply to architecture {}",
                    scheme.name(),
                    arch.name()
                )))
            }
        };
        let (d, h) = (self.input_dim(), self.hidden_dim());
        let rng = &mut ChaCha8Rng::seed_from_u64(new_task_seed(self.seed));
        let eh = self.config.expert_hidden.clone();
        let st = &mut self.store;
        let (experts, gate) = match (layout, &self.parts) {
            (FinetuneScheme::MmoeStar, Parts::Mmoe { experts, .. }) => (
                Vec::new(),
                Some(layers::gate(
                    st,
                    rng,
                    &format!("gate/{task}"),
                    d,
                    experts.len(),
                )?),
            ),
            (FinetuneScheme::PleStar, Parts::Ple { shared, .. }) => {
                let p = self.config.ple_task_experts;
                let experts = (0..p)
                    .map(|i| layers::expert(st, rng, &format!("expert/{task}/e{i}"), d, &eh))
                    .collect::<Result<Vec<_>>>()?;
                let gate = layers::gate(st, rng, &format!("gate/{task}"), d, shared.len() + p)?;
                (experts, Some(gate))
            }
            _ => (Vec::new(), None),
        };
        let tower = layers::tower(
            st,
            rng,
            &format!("tower/{task}"),
            h,
            &self.config.tower_hidden,
        )?;
        self.new_task = Some(NewTaskParts::Finetune {
            task: task.to_string(),
            scheme,
            experts,
            gate,
            tower,
        });
        self.new_task_spec = Some(NewTaskSpec::Finetune {
            task: task.to_string(),
            scheme,
        });
        Ok(())
    }

    pub fn new_task_spec(&self) -> Option<&NewTaskSpec> {
        self.new_task_spec.as_ref()
    }

    /// All task names with predictions, existing tasks first.
    pub fn all_tasks(&self) -> Vec<String> {
        let mut t = self.tasks.clone();
        if let Some(n) = &self.new_task {
            t.push(n.task().to_string());
        }
        t
    }

    pub fn to_container(&self, extra: &BTreeMap<String, String>) -> Result<Container> {
        let mut meta = extra.clone();
        meta.insert("format".into(), CHECKPOINT_FORMAT.into());
        meta.insert("model_config".into(), serde_json::to_string(&self.config)?);
        meta.insert("schema".into(), serde_json::to_string(&self.schema)?);
        meta.insert("tasks".into(), serde_json::to_string(&self.tasks)?);
        meta.insert("seed".into(), self.seed.to_string());
        if let Some(spec) = &self.new_task_spec {
            meta.insert("new_task".into(), serde_json::to_string(spec)?);
        }
        Ok(Container::from_store(&self.store, meta))
    }

    /// Rebuilds the wiring from the stored description and loads values and
    /// trainable flags. The stored and rebuilt name sets must match exactly.
    pub fn from_container(c: &Container) -> Result<Self> {
        let get = |k: &str| {
            c.meta
                .get(k)
                .ok_or_else(|| Error::Format(format!("checkpoint meta lacks `{k}`")))
        };
        if get("format")? != CHECKPOINT_FORMAT {
            return Err(Error::Format(format!(
                "unsupported checkpoint format `{}`",
                get("format")?
            )));
        }
        let config: ModelConfig = serde_json::from_str(get("model_config")?)?;
        let schema: FeatureSchema = serde_json::from_str(get("schema")?)?;
        let tasks: Vec<String> = serde_json::from_str(get("tasks")?)?;
        let seed: u64 = get("seed")?
            .parse()
            .map_err(|_| Error::Format("checkpoint seed is not an integer".into()))?;
        let mut model = ModelGraph::build(&config, &schema, &tasks, seed)?;
        if let Some(spec) = c.meta.get("new_task") {
            match serde_json::from_str::<NewTaskSpec>(spec)? {
                NewTaskSpec::Prompt { task, temperature } => {
                    model.add_prompt_task(&task, temperature)?
                }
                NewTaskSpec::Finetune { task, scheme } => model.add_finetune_task(&task, scheme)?,
            }
        }
        if c.entries.len() != model.store.len() {
            return Err(Error::Format(format!(
                "checkpoint has {} tensors, architecture has {}",
                c.entries.len(),
                model.store.len()
            )));
        }
        for e in &c.entries {
            let id = model.store.id(&e.name).ok_or_else(|| {
                Error::Format(format!(
                    "checkpoint tensor `{}` is not in the architecture",
                    e.name
                ))
            })?;
            let p = model.store.get_mut(id);
            if p.value.shape() != e.tensor.shape() {
                return Err(Error::Format(format!(
                    "tensor `{}` has shape {:?}, architecture expects {:?}",
                    e.name,
                    e.tensor.shape(),
                    p.value.shape()
                )));
            }
            p.value = e.tensor.clone();
            p.trainable = e.trainable;
        }
        Ok(model)
    }

    pub fn save(&self, path: &Path, extra: &BTreeMap<String, String>) -> Result<()> {
        self.to_container(extra)?.write(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_container(&Container::read(path)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::synthetic::SyntheticSpec;

    fn schema() -> FeatureSchema {
        SyntheticSpec {
            n_features: 5,
            n_categorical: 2,
            categorical_cardinality: 3,
            embedding_dim: 2,
            ..SyntheticSpec::default()
        }
        .schema()
        .unwrap()
    }

    fn tasks() -> Vec<String> {
        vec!["a".into(), "b".into()]
    }

    #[test]
    fn owners_are_unique_prefixes() {
        let cfg = ModelConfig {
            expert_hidden: vec![8, 4],
            ..ModelConfig::default()
        };
        let m = ModelGraph::build(&cfg, &schema(), &tasks(), 1).unwrap();
        let names: Vec<&str> = m.store.names().collect();
        assert!(names.contains(&"embedding/c0"));
        assert!(names.contains(&"expert_shared/l1/w"));
        assert!(names.contains(&"expert/b/l0/b"));
        assert!(names.contains(&"classifier/l1/w"));
        assert!(names.contains(&"task_embedding/a"));
        assert!(names.contains(&"gate/a/l0/w"));
    }

    #[test]
    fn build_is_deterministic() {
        for arch in [
            Architecture::SingleTask,
            Architecture::SharedBottom,
            Architecture::Mmoe,
            Architecture::Ple,
            Architecture::MptRec,
        ] {
            let cfg = ModelConfig {
                architecture: arch,
                expert_hidden: vec![6, 3],
                ..ModelConfig::default()
            };
            let a = ModelGraph::build(&cfg, &schema(), &tasks(), 9).unwrap();
            let b = ModelGraph::build(&cfg, &schema(), &tasks(), 9).unwrap();
            assert_eq!(a.store.digest(None), b.store.digest(None));
        }
    }

    #[test]
    fn container_round_trip_with_new_task() {
        let cfg = ModelConfig {
            expert_hidden: vec![6, 3],
            ..ModelConfig::default()
        };
        let mut m = ModelGraph::build(&cfg, &schema(), &tasks(), 2).unwrap();
        m.add_prompt_task("c", 1.0).unwrap();
        m.store.freeze(&m.pretrained_param_names()).unwrap();
        let c = m.to_container(&BTreeMap::new()).unwrap();
        let back =
            ModelGraph::from_container(&Container::from_bytes(&c.to_bytes().unwrap()).unwrap())
                .unwrap();
        assert_eq!(back.store.digest(None), m.store.digest(None));
        assert_eq!(back.store.count(true), m.store.count(true));
        assert_eq!(back.all_tasks(), vec!["a", "b", "c"]);
    }

    #[test]
    fn scheme_mismatch_is_rejected() {
        let cfg = ModelConfig {
            architecture: Architecture::SharedBottom,
            expert_hidden: vec![6, 3],
            ..ModelConfig::default()
        };
        let mut m = ModelGraph::build(&cfg, &schema(), &tasks(), 2).unwrap();
        assert!(m.add_finetune_task("c", FinetuneScheme::MmoeStar).is_err());
        assert!(m.add_prompt_task("c", 1.0).is_err());
        m.add_finetune_task("c", FinetuneScheme::SharedBottomStar)
            .unwrap();
    }
}
