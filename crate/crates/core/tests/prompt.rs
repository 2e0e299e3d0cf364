//! Transfer weights, prompt head and frozen-feature cache.

mod common;

use common::*;
use mptrec::data::Dataset;
use mptrec::eval::predict_dataset;
use mptrec::exec::Parallelism;
use mptrec::model::{Architecture, ModelGraph, NewTaskParts};
use mptrec::prompt::{
    live_features, prompt_forward, run_prompt_tune, transfer_weights, FrozenCache,
};
use mptrec::{Error, Tensor};
use proptest::prelude::*;

fn prompt_model(n_tasks: usize, seed: u64) -> (ModelGraph, Dataset) {
    let (train, _, schema) = synthetic(1600, 6, n_tasks + 1, 0, 0.5, seed);
    let mut m = ModelGraph::build(
        &tiny_model_config(Architecture::MptRec),
        &schema,
        &tasks(n_tasks),
        seed,
    )
    .unwrap();
    m.add_prompt_task(&format!("t{}", n_tasks + 1), 1.0)
        .unwrap();
    (m, train)
}

fn x_o(model: &ModelGraph, data: &Dataset, n: usize) -> Tensor {
    let rows: Vec<usize> = (0..n).collect();
    live_features(model, &data.batch(&rows)).unwrap()["x_o"].clone()
}

fn set_temperature(model: &mut ModelGraph, t: f64) {
    match &mut model.new_task {
        Some(NewTaskParts::Prompt { temperature, .. }) => *temperature = t,
        _ => unreachable!(),
    }
}

fn task_embedding_ids(model: &ModelGraph) -> Vec<mptrec::autodiff::ParamId> {
    model.mptrec().unwrap().task_embeddings.clone()
}

fn entropy(row: &[f64]) -> f64 {
    -row.iter()
        .filter(|p| **p > 0.0)
        .map(|p| p * p.ln())
        .sum::<f64>()
}

#[test]
fn transfer_weights_are_distributions() {
    let (m, data) = prompt_model(3, 1);
    let g = transfer_weights(&m, &x_o(&m, &data, 64)).unwrap();
    assert_eq!(g.shape(), &[64, 3]);
    for i in 0..g.rows() {
        let row = g.row_slice(i);
        assert!(row.iter().all(|&p| p > 0.0));
        assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }
}

#[test]
fn identical_task_embeddings_give_uniform_weights() {
    let (mut m, data) = prompt_model(3, 2);
    let ids = task_embedding_ids(&m);
    let first = m.store.value(ids[0]).clone();
    for &id in &ids[1..] {
        m.store.get_mut(id).value = first.clone();
    }
    let g = transfer_weights(&m, &x_o(&m, &data, 32)).unwrap();
    assert!(g.data().iter().all(|&p| (p - 1.0 / 3.0).abs() < 1e-15));
}

#[test]
fn huge_temperature_flattens_weights() {
    let (mut m, data) = prompt_model(3, 3);
    set_temperature(&mut m, 1e6);
    let g = transfer_weights(&m, &x_o(&m, &data, 32)).unwrap();
    assert!(g.data().iter().all(|&p| (p - 1.0 / 3.0).abs() < 1e-6));
}

#[test]
fn unit_logit_gap_gives_logistic_weights() {
    let (mut m, data) = prompt_model(2, 4);
    let Some(NewTaskParts::Prompt {
        projection: Some(proj),
        ..
    }) = m.new_task.clone()
    else {
        unreachable!()
    };
    let last = proj.layers.last().unwrap();
    let h = last.output;
    let v: Vec<f64> = (0..h).map(|i| 0.3 + i as f64 * 0.1).collect();
    let norm2: f64 = v.iter().map(|x| x * x).sum();
    let w = m.store.value(last.w).clone();
    m.store.get_mut(last.w).value = Tensor::zeros_like(&w);
    m.store.get_mut(last.b).value = Tensor::row(v.clone());
    let ids = task_embedding_ids(&m);
    m.store.get_mut(ids[0]).value = Tensor::row(v.iter().map(|x| x / norm2).collect());
    m.store.get_mut(ids[1]).value = Tensor::row(vec![0.0; h]);
    let g = transfer_weights(&m, &x_o(&m, &data, 8)).unwrap();
    let hi = 1.0 / (1.0 + (-1.0f64).exp());
    for i in 0..8 {
        assert!((g.get(i, 0) - hi).abs() < 1e-12);
        assert!((g.get(i, 1) - (1.0 - hi)).abs() < 1e-12);
    }
    assert!((hi - 0.7311).abs() < 5e-5);
}

#[test]
fn entropy_grows_with_temperature() {
    let (mut m, data) = prompt_model(3, 5);
    let x = x_o(&m, &data, 16);
    let mut last = [0.0; 16];
    for t in [0.05, 0.2, 1.0, 5.0, 50.0] {
        set_temperature(&mut m, t);
        let g = transfer_weights(&m, &x).unwrap();
        for (i, prev) in last.iter_mut().enumerate() {
            let e = entropy(g.row_slice(i));
            assert!(e >= *prev - 1e-12, "row {i} at T={t}");
            *prev = e;
        }
    }
}

#[test]
fn single_source_task_transfers_its_expert() {
    let (m, data) = prompt_model(1, 6);
    let rows: Vec<usize> = (0..32).collect();
    let batch = data.batch(&rows);
    let cache = FrozenCache::build(&m, &data, Some(&rows), 16, Parallelism::Sequential).unwrap();
    let out = prompt_forward(&m, &batch, &cache).unwrap();
    assert!(out.gamma.data().iter().all(|&p| p == 1.0));
    let x1 = &live_features(&m, &batch).unwrap()["x_k.t1"];
    assert_eq!(out.x_t.data(), x1.data());
}

#[test]
fn unit_new_embedding_passes_the_transferred_representation() {
    let (mut m, data) = prompt_model(2, 7);
    let Some(NewTaskParts::Prompt { task_embedding, .. }) = m.new_task.clone() else {
        unreachable!()
    };
    let h = m.hidden_dim();
    m.store.get_mut(task_embedding).value = Tensor::row(vec![1.0; h]);
    let rows: Vec<usize> = (0..32).collect();
    let cache = FrozenCache::build(&m, &data, Some(&rows), 8, Parallelism::Sequential).unwrap();
    let out = prompt_forward(&m, &data.batch(&rows), &cache).unwrap();
    assert_eq!(out.x_new.data(), out.x_t.data());
}

#[test]
fn cached_features_match_live_features_bitwise() {
    let (m, data) = prompt_model(2, 8);
    let rows: Vec<usize> = (0..1000).collect();
    let cache = FrozenCache::build(&m, &data, Some(&rows), 128, Parallelism::Parallel).unwrap();
    assert_eq!(cache.len(), 1000);
    for chunk in rows.chunks(77) {
        let batch = data.batch(chunk);
        let live = live_features(&m, &batch).unwrap();
        let cached = cache.features(&batch.row_ids).unwrap();
        assert_eq!(
            live.keys().collect::<Vec<_>>(),
            cached.keys().collect::<Vec<_>>()
        );
        for (k, t) in &live {
            assert!(bitwise_eq(t.data(), cached[k].data()), "feature {k}");
        }
        let via_cache = prompt_forward(&m, &batch, &cache).unwrap().prediction;
        let preds = predict_dataset(&m, &data, Some(chunk), 512, Parallelism::Sequential).unwrap();
        assert!(bitwise_eq(&via_cache, &preds["t3"]));
    }
}

#[test]
fn cache_miss_names_the_rows() {
    let (m, data) = prompt_model(2, 9);
    let rows: Vec<usize> = (0..10).collect();
    let cache = FrozenCache::build(&m, &data, Some(&rows), 4, Parallelism::Sequential).unwrap();
    let ids = [data.row_ids[3], data.row_ids[500], data.row_ids[501]];
    assert!(
        FrozenCache::build(&m, &data, Some(&[data.len()]), 4, Parallelism::Sequential).is_err()
    );
    match cache.features(&ids) {
        Err(Error::CacheMiss(missing)) => assert_eq!(missing, vec![ids[1], ids[2]]),
        other => panic!("expected a cache miss, got {:?}", other.map(|_| ())),
    }
}

#[test]
fn stale_cache_is_rejected() {
    let (mut m, data) = prompt_model(2, 10);
    let rows: Vec<usize> = (0..10).collect();
    let cache = FrozenCache::build(&m, &data, Some(&rows), 4, Parallelism::Sequential).unwrap();
    cache.check(&m).unwrap();
    let id = m.store.require("expert_shared/l0/w").unwrap();
    m.store.get_mut(id).value.data_mut()[0] += 1e-9;
    assert!(matches!(cache.check(&m), Err(Error::StaleCache { .. })));
}

#[test]
fn prompt_tuning_leaves_existing_tasks_alone() {
    let (train, test, schema) = synthetic(1500, 6, 3, 0, 0.5, 12);
    let base = ModelGraph::build(
        &tiny_model_config(Architecture::MptRec),
        &schema,
        &tasks(2),
        12,
    )
    .unwrap();
    let pre =
        mptrec::pretrain::run_pretrain(base, &train, &test, &quick_pretrain(2, 12), "pre").unwrap();
    let before = predict_dataset(&pre.model, &test, None, 256, Parallelism::Sequential).unwrap();
    let tuned = run_prompt_tune(
        pre.model.clone(),
        "t3",
        &train,
        &test,
        &quick_prompt(3, 12),
        "prompt",
        None,
        None,
    )
    .unwrap();
    let after = predict_dataset(&tuned.model, &test, None, 256, Parallelism::Sequential).unwrap();
    for t in ["t1", "t2"] {
        assert!(bitwise_eq(&before[t], &after[t]), "task {t}");
    }
    assert!(after.contains_key("t3"));
    for name in pre.model.pretrained_param_names() {
        let a = pre
            .model
            .store
            .value(pre.model.store.require(&name).unwrap());
        let b = tuned
            .model
            .store
            .value(tuned.model.store.require(&name).unwrap());
        assert!(bitwise_eq(a.data(), b.data()), "{name}");
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn softmax_is_shift_invariant(
        row in prop::collection::vec(-20.0f64..20.0, 1..8),
        shift in -50.0f64..50.0,
    ) {
        let mut g = mptrec::autodiff::Graph::new();
        let n = row.len();
        let a = g.input(Tensor::matrix(1, n, row.clone()).unwrap()).unwrap();
        let b = g
            .input(Tensor::matrix(1, n, row.iter().map(|v| v + shift).collect()).unwrap())
            .unwrap();
        let (pa, pb) = (g.softmax(a).unwrap(), g.softmax(b).unwrap());
        let (pa, pb) = (g.value(pa).data().to_vec(), g.value(pb).data().to_vec());
        prop_assert!((pa.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        for (x, y) in pa.iter().zip(&pb) {
            prop_assert!((x - y).abs() < 1e-12);
        }
    }
}
