//! Parameter and FLOP counting.
//!
//! FLOPs are counted per operation of a built graph:
//!
//! | op | FLOPs |
//! |----|-------|
//! | dense `[B,in]·[in,out] (+b)` | `2·in·out·B (+ out·B)` |
//! | matmul_t `[n,h]·[m,h]ᵀ` | `2·n·m·h` |
//! | relu, sigmoid, softmax, mul, add, scale | output elements |
//! | weighted_sum over `C` inputs | `2·C·output elements` |
//! | bce, nll, mean, sum | input elements |
//! | gather, concat, grad_reverse, input, param | 0 |
//!
//! A training step counts as three forward passes (forward, then backward at
//! about twice the forward cost). Tuning steps count only the graph built on
//! cached frozen features.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Op};
use crate::data::ExampleBatch;
use crate::error::Result;
use crate::model::forward::{baseline_forward, frozen_features, mptrec_forward, ForwardMode};
use crate::model::{ModelGraph, Parts};
use crate::tensor::Tensor;

pub const FLOP_CONVENTION: &str = "dense=2*in*out*B+out*B; matmul_t=2*n*m*h; elementwise=out; \
weighted_sum=2*C*out; loss/reduce=in; gather/concat/grl=0; train_step=3*forward; \
tuning=head on cached features";

/// Backward pass cost relative to one forward pass.
pub const TRAIN_STEP_FACTOR: u64 = 3;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FlopMode {
    /// One forward pass over every task head.
    Inference,
    /// One training step of the architecture on its tasks.
    FullTraining,
    /// One new-task training step on cached frozen features.
    Tuning,
    /// `Tuning` plus the frozen forward pass a cache would have saved.
    TuningNoCache,
}

pub fn count_params(model: &ModelGraph, trainable_only: bool) -> usize {
    model.store.count(trainable_only)
}

fn elems(g: &Graph, v: crate::autodiff::Var) -> u64 {
    g.shape(v).iter().product::<usize>() as u64
}

/// FLOPs of one forward evaluation of `g`.
pub fn graph_flops(g: &Graph) -> u64 {
    g.ops()
        .map(|(v, op)| match op {
            Op::Dense { x, w, b } => {
                let (n, k) = (g.shape(*x)[0] as u64, g.shape(*x)[1] as u64);
                let m = g.shape(*w)[1] as u64;
                2 * n * k * m + if b.is_some() { n * m } else { 0 }
            }
            Op::MatMulT { a, b } => {
                let (n, h) = (g.shape(*a)[0] as u64, g.shape(*a)[1] as u64);
                2 * n * g.shape(*b)[0] as u64 * h
            }
            Op::Relu(_)
            | Op::Sigmoid(_)
            | Op::Softmax(_)
            | Op::Mul { .. }
            | Op::Add { .. }
            | Op::Scale { .. } => elems(g, v),
            Op::WeightedSum { inputs, .. } => 2 * inputs.len() as u64 * elems(g, v),
            Op::Bce { pred, .. } => elems(g, *pred),
            Op::Nll { probs, .. } => elems(g, *probs),
            Op::Mean(x) | Op::Sum(x) => elems(g, *x),
            Op::Gather { .. }
            | Op::Concat(_)
            | Op::GradReverse { .. }
            | Op::Input
            | Op::Param(_) => 0,
        })
        .sum()
}

/// Batch of `b` rows with id 0 everywhere, zero continuous features and
/// alternating labels for every task of the model.
pub fn dummy_batch(model: &ModelGraph, b: usize) -> ExampleBatch {
    let labels: BTreeMap<String, Vec<f64>> = model
        .all_tasks()
        .into_iter()
        .map(|t| (t, (0..b).map(|i| (i % 2) as f64).collect()))
        .collect();
    ExampleBatch {
        row_ids: (0..b as u64).collect(),
        categorical_ids: vec![vec![0; b]; model.schema.categorical().count()],
        continuous: Tensor::zeros(b, model.schema.continuous().count()),
        labels,
    }
}

/// Per-batch FLOPs of `model` at batch size `b`.
///
/// `FullTraining` covers the model's own tasks (a new task's head is not
/// part of it). The tuning modes require a new task.
pub fn count_flops(model: &ModelGraph, b: usize, mode: FlopMode) -> Result<u64> {
    let batch = dummy_batch(model, b);
    match mode {
        FlopMode::Inference => {
            let mut g = Graph::new();
            if let Parts::MptRec(_) = model.parts {
                mptrec_forward(&mut g, model, &batch, ForwardMode::Inference)?;
            } else {
                baseline_forward(&mut g, model, &batch)?;
            }
            Ok(graph_flops(&g))
        }
        FlopMode::FullTraining => {
            let g = if let Parts::MptRec(_) = model.parts {
                let n = model.tasks.len();
                let pseudo: Vec<usize> = (0..b).map(|i| i % n).collect();
                crate::pretrain::build_pretrain_graph(model, &batch, &pseudo, 0.5, 1.0)?.0
            } else {
                crate::pretrain::build_baseline_graph(model, &batch)?.0
            };
            Ok(TRAIN_STEP_FACTOR * graph_flops(&g))
        }
        FlopMode::Tuning | FlopMode::TuningNoCache => {
            let mut fg = Graph::new();
            let vars = frozen_features(&mut fg, model, &batch)?;
            let features: BTreeMap<String, Tensor> = vars
                .iter()
                .map(|(k, &v)| (k.clone(), fg.value(v).clone()))
                .collect();
            let task = crate::prompt::new_task_name(model)?;
            let (g, _, _) =
                crate::prompt::build_tuning_graph(model, &features, batch.labels(task)?)?;
            let tuning = TRAIN_STEP_FACTOR * graph_flops(&g);
            Ok(if mode == FlopMode::Tuning {
                tuning
            } else {
                tuning + graph_flops(&fg)
            })
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::ParamStore;

    #[test]
    fn dense_four_to_three() {
        let mut s = ParamStore::new();
        let w = s.insert("w", Tensor::filled(4, 3, 0.1), true).unwrap();
        let bias = s.insert("b", Tensor::zeros(1, 3), true).unwrap();
        assert_eq!(s.count(false), 15);
        for (batch, expected) in [(1, 27), (2, 54), (7, 189)] {
            let mut g = Graph::new();
            let x = g.input(Tensor::filled(batch, 4, 1.0)).unwrap();
            let (wv, bv) = (g.param(&s, w).unwrap(), g.param(&s, bias).unwrap());
            g.dense(x, wv, Some(bv)).unwrap();
            assert_eq!(graph_flops(&g), expected);
        }
    }

    #[test]
    fn small_ops_follow_the_table() {
        let mut g = Graph::new();
        let a = g.input(Tensor::filled(2, 3, 0.5)).unwrap();
        let b = g.input(Tensor::filled(4, 3, 0.5)).unwrap();
        let m = g.matmul_t(a, b).unwrap(); // 2·2·4·3 = 48
        let s = g.softmax(m).unwrap(); // 8
        let w = g.input(Tensor::filled(2, 2, 0.5)).unwrap();
        let ws = g.weighted_sum(w, &[a, a]).unwrap(); // 2·2·6 = 24
        let r = g.relu(ws).unwrap(); // 6
        g.mean(r).unwrap(); // 6
        g.concat(&[s, s]).unwrap();
        g.grad_reverse(a, 1.0).unwrap();
        assert_eq!(graph_flops(&g), 48 + 8 + 24 + 6 + 6);
    }
}
