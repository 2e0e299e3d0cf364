use std::collections::BTreeMap;

use crate::autodiff::{Graph, Var};
use crate::data::ExampleBatch;
use crate::error::{Error, Result};
use crate::model::{FinetuneScheme, ModelGraph, MptRecParts, NewTaskParts, Parts};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum ForwardMode {
    /// Fusion predictions only.
    Inference,
    /// Adds the auxiliary `x_s` predictions and the task classifier behind a
    /// gradient reversal of strength `grl_lambda`.
    Pretrain { grl_lambda: f64 },
}

/// Graph nodes of one MPT-Rec forward pass, per task in model order.
#[derive(Clone, Debug)]
pub struct MptIntermediates {
    pub x_o: Var,
    pub x_s: Var,
    pub x_k: Vec<Var>,
    /// `x_k ⊙ E_k`; empty under `share_only`.
    pub x_e: Vec<Var>,
    /// `[B, 2]` gate outputs `(β_s, β_e)`; empty without gates.
    pub beta: Vec<Var>,
    pub x_f: Vec<Var>,
    pub predictions: Vec<Var>,
    /// `G_k(x_s)`, pretrain mode only.
    pub aux_predictions: Vec<Var>,
    /// `K(GRL(x_s))`, pretrain mode only and absent under `no_gan`.
    pub class_probs: Option<Var>,
}

/// `β_s·x_s + β_e·x_e` with `beta: [B or 1, 2]`.
pub fn fuse(g: &mut Graph, beta: Var, x_s: Var, x_e: Var) -> Result<Var> {
    g.weighted_sum(beta, &[x_s, x_e])
}

/// `x_o`, `x_s` and every `x_k`.
pub fn mptrec_representations(
    g: &mut Graph,
    model: &ModelGraph,
    batch: &ExampleBatch,
) -> Result<(Var, Var, Vec<Var>)> {
    let p = model.mptrec()?;
    let s = &model.store;
    let x_o = p.embedding.forward(g, s, batch)?;
    let x_s = p.shared_expert.forward(g, s, x_o)?;
    let x_k = p
        .experts
        .iter()
        .map(|e| e.forward(g, s, x_o))
        .collect::<Result<_>>()?;
    Ok((x_o, x_s, x_k))
}

/// Everything downstream of the experts.
pub fn mptrec_heads(
    g: &mut Graph,
    model: &ModelGraph,
    x_o: Var,
    x_s: Var,
    x_k: &[Var],
    mode: ForwardMode,
) -> Result<MptIntermediates> {
    let p: &MptRecParts = model.mptrec()?;
    let s = &model.store;
    let ab = &model.config.ablation;
    let n = model.tasks.len();
    if p.task_embeddings.len() != n || x_k.len() != n {
        return Err(Error::Invalid(format!(
            "{} tasks but {} task embeddings and {} experts",
            n,
            p.task_embeddings.len(),
            x_k.len()
        )));
    }
    let mut out = MptIntermediates {
        x_o,
        x_s,
        x_k: x_k.to_vec(),
        x_e: Vec::new(),
        beta: Vec::new(),
        x_f: Vec::new(),
        predictions: Vec::new(),
        aux_predictions: Vec::new(),
        class_probs: None,
    };
    for (k, &xk) in x_k.iter().enumerate() {
        let x_f = if ab.share_only {
            x_s
        } else {
            let e = g.param(s, p.task_embeddings[k])?;
            let x_e = g.mul(xk, e)?;
            out.x_e.push(x_e);
            if ab.specific_only {
                x_e
            } else {
                let beta = p.gates[k].forward(g, s, x_o)?;
                out.beta.push(beta);
                fuse(g, beta, x_s, x_e)?
            }
        };
        out.x_f.push(x_f);
        out.predictions.push(p.towers[k].forward(g, s, x_f)?);
    }
    if let ForwardMode::Pretrain { grl_lambda } = mode {
        for k in 0..n {
            let tower = if model.config.share_aux_towers {
                &p.towers[k]
            } else {
                &p.aux_towers[k]
            };
            out.aux_predictions.push(tower.forward(g, s, x_s)?);
        }
        if let Some(c) = &p.classifier {
            let r = g.grad_reverse(x_s, grl_lambda)?;
            out.class_probs = Some(c.forward(g, s, r)?);
        }
    }
    Ok(out)
}

pub fn mptrec_forward(
    g: &mut Graph,
    model: &ModelGraph,
    batch: &ExampleBatch,
    mode: ForwardMode,
) -> Result<MptIntermediates> {
    let (x_o, x_s, x_k) = mptrec_representations(g, model, batch)?;
    mptrec_heads(g, model, x_o, x_s, &x_k, mode)
}

#[derive(Clone, Debug)]
pub struct BaselineOutputs {
    pub predictions: Vec<Var>,
    /// Per-task gate outputs (MMOE, PLE).
    pub gates: Vec<Var>,
    /// Frozen features a new-task head can build on.
    pub features: BTreeMap<String, Var>,
}

pub fn baseline_forward(
    g: &mut Graph,
    model: &ModelGraph,
    batch: &ExampleBatch,
) -> Result<BaselineOutputs> {
    let s = &model.store;
    let n = model.tasks.len();
    let mut out = BaselineOutputs {
        predictions: Vec::new(),
        gates: Vec::new(),
        features: BTreeMap::new(),
    };
    let towers_len = match &model.parts {
        Parts::SingleTask(nets) => nets.len(),
        Parts::SharedBottom { towers, .. }
        | Parts::Mmoe { towers, .. }
        | Parts::Ple { towers, .. } => towers.len(),
        Parts::MptRec(_) => {
            return Err(Error::Invalid(
                "baseline_forward called on an mpt_rec model".into(),
            ));
        }
    };
    if towers_len != n {
        return Err(Error::Invalid(format!("{n} tasks but {towers_len} towers")));
    }
    match &model.parts {
        Parts::SingleTask(nets) => {
            for net in nets {
                let x = net.embedding.forward(g, s, batch)?;
                let h = net.bottom.forward(g, s, x)?;
                out.predictions.push(net.tower.forward(g, s, h)?);
            }
        }
        Parts::SharedBottom {
            embedding,
            bottom,
            towers,
        } => {
            let x = embedding.forward(g, s, batch)?;
            let h = bottom.forward(g, s, x)?;
            out.features.insert("x_o".into(), x);
            out.features.insert("bottom".into(), h);
            for t in towers {
                out.predictions.push(t.forward(g, s, h)?);
            }
        }
        Parts::Mmoe {
            embedding,
            experts,
            gates,
            towers,
        } => {
            let x = embedding.forward(g, s, batch)?;
            out.features.insert("x_o".into(), x);
            let hs: Vec<Var> = experts
                .iter()
                .map(|e| e.forward(g, s, x))
                .collect::<Result<_>>()?;
            for (i, h) in hs.iter().enumerate() {
                out.features.insert(format!("expert.{i}"), *h);
            }
            for (gate, tower) in gates.iter().zip(towers) {
                let w = gate.forward(g, s, x)?;
                out.gates.push(w);
                let mix = g.weighted_sum(w, &hs)?;
                out.predictions.push(tower.forward(g, s, mix)?);
            }
        }
        Parts::Ple {
            embedding,
            shared,
            specific,
            gates,
            towers,
        } => {
            let x = embedding.forward(g, s, batch)?;
            out.features.insert("x_o".into(), x);
            let hs: Vec<Var> = shared
                .iter()
                .map(|e| e.forward(g, s, x))
                .collect::<Result<_>>()?;
            for (i, h) in hs.iter().enumerate() {
                out.features.insert(format!("expert_shared.{i}"), *h);
            }
            for k in 0..n {
                let mut inputs = hs.clone();
                for e in &specific[k] {
                    inputs.push(e.forward(g, s, x)?);
                }
                let w = gates[k].forward(g, s, x)?;
                out.gates.push(w);
                let mix = g.weighted_sum(w, &inputs)?;
                out.predictions.push(towers[k].forward(g, s, mix)?);
            }
        }
        Parts::MptRec(_) => unreachable!(),
    }
    Ok(out)
}

/// Names of the frozen features the new-task head reads, in a fixed order.
pub fn frozen_feature_names(model: &ModelGraph) -> Result<Vec<String>> {
    Ok(match (&model.parts, &model.new_task) {
        (Parts::MptRec(_), _) => {
            let mut v = vec!["x_o".to_string(), "x_s".to_string()];
            v.extend(model.tasks.iter().map(|t| format!("x_k.{t}")));
            v
        }
        (Parts::SharedBottom { .. }, _) => vec!["bottom".into()],
        (Parts::Mmoe { experts, .. }, _) => std::iter::once("x_o".to_string())
            .chain((0..experts.len()).map(|i| format!("expert.{i}")))
            .collect(),
        (Parts::Ple { shared, .. }, _) => std::iter::once("x_o".to_string())
            .chain((0..shared.len()).map(|i| format!("expert_shared.{i}")))
            .collect(),
        (Parts::SingleTask(_), _) => {
            return Err(Error::Invalid(
                "single_task models have no shared features".into(),
            ));
        }
    })
}

/// Frozen features of the pre-trained model, keyed by
/// [`frozen_feature_names`].
pub fn frozen_features(
    g: &mut Graph,
    model: &ModelGraph,
    batch: &ExampleBatch,
) -> Result<BTreeMap<String, Var>> {
    let names = frozen_feature_names(model)?;
    let mut map = BTreeMap::new();
    if let Parts::MptRec(_) = model.parts {
        let (x_o, x_s, x_k) = mptrec_representations(g, model, batch)?;
        map.insert("x_o".to_string(), x_o);
        map.insert("x_s".to_string(), x_s);
        for (t, v) in model.tasks.iter().zip(x_k) {
            map.insert(format!("x_k.{t}"), v);
        }
    } else {
        let out = baseline_forward(g, model, batch)?;
        for n in &names {
            map.insert(n.clone(), out.features[n]);
        }
    }
    Ok(map)
}

/// Nodes of the prompt head for the new task.
#[derive(Clone, Debug)]
pub struct PromptIntermediates {
    pub h_o: Option<Var>,
    /// `[B, N]`, or `[1, N]` for task-level transfer.
    pub gamma: Var,
    pub x_t: Var,
    pub x_new: Var,
    pub beta: Option<Var>,
    pub x_prime: Var,
    pub prediction: Var,
}

/// Transfer weights, transferred representation, fusion and new tower.
pub fn prompt_head(
    g: &mut Graph,
    model: &ModelGraph,
    features: &BTreeMap<String, Var>,
) -> Result<PromptIntermediates> {
    let p = model.mptrec()?;
    let Some(NewTaskParts::Prompt {
        temperature,
        projection,
        task_embedding,
        gate,
        tower,
        ..
    }) = &model.new_task
    else {
        return Err(Error::Invalid("model has no prompt task".into()));
    };
    let s = &model.store;
    let ab = &model.config.ablation;
    let feat = |name: &str| {
        features
            .get(name)
            .copied()
            .ok_or_else(|| Error::Invalid(format!("missing frozen feature `{name}`")))
    };
    let x_o = feat("x_o")?;
    let x_s = feat("x_s")?;
    let x_k: Vec<Var> = model
        .tasks
        .iter()
        .map(|t| feat(&format!("x_k.{t}")))
        .collect::<Result<_>>()?;
    let e_n = g.param(s, *task_embedding)?;
    let e_k: Vec<Var> = p
        .task_embeddings
        .iter()
        .map(|&id| g.param(s, id))
        .collect::<Result<_>>()?;
    let (h_o, gamma) = match projection {
        Some(proj) => {
            let h_o = proj.forward(g, s, x_o)?;
            let logits: Vec<Var> = e_k
                .iter()
                .map(|&e| g.matmul_t(h_o, e))
                .collect::<Result<_>>()?;
            let l = g.concat(&logits)?;
            let l = g.scale(l, 1.0 / temperature)?;
            (Some(h_o), g.softmax(l)?)
        }
        None => {
            let logits: Vec<Var> = e_k
                .iter()
                .map(|&e| g.matmul_t(e_n, e))
                .collect::<Result<_>>()?;
            let l = g.concat(&logits)?;
            (None, g.softmax(l)?)
        }
    };
    let x_t = g.weighted_sum(gamma, &x_k)?;
    let x_new = g.mul(x_t, e_n)?;
    let (beta, x_prime) = if ab.share_only {
        (None, x_s)
    } else if ab.specific_only {
        (None, x_new)
    } else if let Some([bs, bn]) = ab.fixed_weights {
        let b = g.input(Tensor::row(vec![bs, bn]))?;
        (Some(b), fuse(g, b, x_s, x_new)?)
    } else {
        let gt = gate
            .as_ref()
            .expect("gate built when weights are not fixed");
        let b = gt.forward(g, s, x_o)?;
        (Some(b), fuse(g, b, x_s, x_new)?)
    };
    let prediction = tower.forward(g, s, x_prime)?;
    Ok(PromptIntermediates {
        h_o,
        gamma,
        x_t,
        x_new,
        beta,
        x_prime,
        prediction,
    })
}

/// New-task prediction of a fine-tuned baseline.
pub fn finetune_head(
    g: &mut Graph,
    model: &ModelGraph,
    features: &BTreeMap<String, Var>,
) -> Result<Var> {
    let Some(NewTaskParts::Finetune {
        experts,
        gate,
        tower,
        ..
    }) = &model.new_task
    else {
        return Err(Error::Invalid("model has no fine-tuning task".into()));
    };
    let s = &model.store;
    let names = frozen_feature_names(model)?;
    let feat = |name: &str| {
        features
            .get(name)
            .copied()
            .ok_or_else(|| Error::Invalid(format!("missing frozen feature `{name}`")))
    };
    let rep = match &model.parts {
        Parts::SharedBottom { .. } => feat("bottom")?,
        Parts::Mmoe { .. } | Parts::Ple { .. } => {
            let x_o = feat("x_o")?;
            let mut inputs: Vec<Var> = names[1..].iter().map(|n| feat(n)).collect::<Result<_>>()?;
            for e in experts {
                inputs.push(e.forward(g, s, x_o)?);
            }
            let w = gate
                .as_ref()
                .expect("gate built for mixture schemes")
                .forward(g, s, x_o)?;
            g.weighted_sum(w, &inputs)?
        }
        _ => return Err(Error::Invalid("fine-tuning needs a shared baseline".into())),
    };
    tower.forward(g, s, rep)
}

/// Scheme used to build the new-task components, for reports.
pub fn finetune_scheme(model: &ModelGraph) -> Option<FinetuneScheme> {
    match &model.new_task {
        Some(NewTaskParts::Finetune { scheme, .. }) => Some(*scheme),
        _ => None,
    }
}

/// Live forward pass returning `task → predicted probabilities` for every
/// task, including an added new task.
pub fn predict_batch(
    model: &ModelGraph,
    batch: &ExampleBatch,
) -> Result<BTreeMap<String, Vec<f64>>> {
    let mut g = Graph::new();
    let mut out = BTreeMap::new();
    let column = |g: &Graph, v: Var| g.value(v).data().to_vec();
    match &model.parts {
        Parts::MptRec(_) => {
            let (x_o, x_s, x_k) = mptrec_representations(&mut g, model, batch)?;
            let heads = mptrec_heads(&mut g, model, x_o, x_s, &x_k, ForwardMode::Inference)?;
            for (t, v) in model.tasks.iter().zip(&heads.predictions) {
                out.insert(t.clone(), column(&g, *v));
            }
            if let Some(nt) = &model.new_task {
                let mut f = BTreeMap::new();
                f.insert("x_o".to_string(), x_o);
                f.insert("x_s".to_string(), x_s);
                for (t, v) in model.tasks.iter().zip(&x_k) {
                    f.insert(format!("x_k.{t}"), *v);
                }
                let ph = prompt_head(&mut g, model, &f)?;
                out.insert(nt.task().to_string(), column(&g, ph.prediction));
            }
        }
        _ => {
            let b = baseline_forward(&mut g, model, batch)?;
            for (t, v) in model.tasks.iter().zip(&b.predictions) {
                out.insert(t.clone(), column(&g, *v));
            }
            if let Some(nt) = &model.new_task {
                let p = finetune_head(&mut g, model, &b.features)?;
                out.insert(nt.task().to_string(), column(&g, p));
            }
        }
    }
    Ok(out)
}
