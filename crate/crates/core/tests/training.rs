//! End-to-end pre-training on small synthetic data.

mod common;

use common::*;
use mptrec::autodiff::ParamStore;
use mptrec::eval::{evaluate_auc, predict_dataset};
use mptrec::exec::Parallelism;
use mptrec::model::{Architecture, ModelGraph};
use mptrec::pretrain::{build_pretrain_graph, run_pretrain};
use mptrec::Error;

const ARCHS: [Architecture; 5] = [
    Architecture::SingleTask,
    Architecture::SharedBottom,
    Architecture::Mmoe,
    Architecture::Ple,
    Architecture::MptRec,
];

#[test]
fn every_architecture_learns_the_synthetic_tasks() {
    let (train, test, schema) = synthetic(3000, 8, 2, 0, 0.5, 21);
    for arch in ARCHS {
        let model = ModelGraph::build(&tiny_model_config(arch), &schema, &tasks(2), 21).unwrap();
        let before = evaluate_auc(&model, &test, None, 512, Parallelism::default()).unwrap();
        let out = run_pretrain(model, &train, &test, &quick_pretrain(6, 21), "t").unwrap();
        for t in ["t1", "t2"] {
            let auc = out.report.test_auc[t];
            assert!(auc > 0.75, "{arch:?} {t}: {auc}");
            assert!(
                auc > before[t] + 0.1,
                "{arch:?} {t}: {} -> {auc}",
                before[t]
            );
        }
        assert_eq!(out.pseudo_labels.is_some(), arch == Architecture::MptRec);
        assert_eq!(out.log.len(), 6);
    }
}

#[test]
fn training_is_deterministic_per_seed() {
    let (train, test, schema) = synthetic(800, 6, 2, 0, 0.5, 22);
    let run = |seed| {
        let m = ModelGraph::build(
            &tiny_model_config(Architecture::MptRec),
            &schema,
            &tasks(2),
            seed,
        )
        .unwrap();
        run_pretrain(m, &train, &test, &quick_pretrain(2, seed), "d").unwrap()
    };
    let (a, b, c) = (run(5), run(5), run(6));
    assert_eq!(a.model.store.digest(None), b.model.store.digest(None));
    assert_eq!(a.report.test_auc, b.report.test_auc);
    assert_eq!(a.pseudo_labels, b.pseudo_labels);
    assert_ne!(a.model.store.digest(None), c.model.store.digest(None));
}

#[test]
fn checkpoint_reload_predicts_identically() {
    let (train, test, schema) = synthetic(800, 6, 2, 0, 0.5, 23);
    let dir = tempfile::TempDir::new().unwrap();
    for arch in ARCHS {
        let m = ModelGraph::build(&tiny_model_config(arch), &schema, &tasks(2), 23).unwrap();
        let out = run_pretrain(m, &train, &test, &quick_pretrain(1, 23), "c").unwrap();
        let path = dir.path().join(format!("{}.ckpt", arch.name()));
        out.model.save(&path, &Default::default()).unwrap();
        let back = ModelGraph::load(&path).unwrap();
        let a = predict_dataset(&out.model, &test, None, 128, Parallelism::Sequential).unwrap();
        let b = predict_dataset(&back, &test, None, 128, Parallelism::Parallel).unwrap();
        for t in ["t1", "t2"] {
            assert!(bitwise_eq(&a[t], &b[t]), "{arch:?} {t}");
        }
    }
}

/// Gradients on every `expert_shared` parameter after a backward pass of
/// `pick(losses)`.
fn shared_grads(
    model: &mut ModelGraph,
    alpha: f64,
    pick: impl Fn(&mptrec::pretrain::LossVars) -> Vec<mptrec::autodiff::Var>,
) -> Vec<f64> {
    let (train, _, _) = synthetic(64, 6, 2, 0, 0.5, 24);
    let rows: Vec<usize> = (0..32).collect();
    let pseudo: Vec<usize> = rows.iter().map(|i| i % 2).collect();
    let (g, _, l) = build_pretrain_graph(model, &train.batch(&rows), &pseudo, alpha, 1.0).unwrap();
    let mut out: Option<Vec<f64>> = None;
    for v in pick(&l) {
        model.store.zero_grads();
        g.backward(v, &mut model.store).unwrap();
        let flat = collect_shared(&model.store);
        out = Some(match out {
            None => flat,
            Some(acc) => acc.iter().zip(&flat).map(|(a, b)| a + b).collect(),
        });
    }
    out.unwrap()
}

fn collect_shared(store: &ParamStore) -> Vec<f64> {
    store
        .iter()
        .filter(|(_, p)| p.name.starts_with("expert_shared"))
        .flat_map(|(_, p)| p.grad.data().to_vec())
        .collect()
}

#[test]
fn classifier_gradient_on_the_shared_expert_scales_with_alpha() {
    let (_, _, schema) = synthetic(64, 6, 2, 0, 0.5, 24);
    let mut model = ModelGraph::build(
        &tiny_model_config(Architecture::MptRec),
        &schema,
        &tasks(2),
        24,
    )
    .unwrap();
    let le = shared_grads(&mut model, 0.5, |l| vec![l.loss_e.unwrap()]);
    let le_norm = le.iter().map(|v| v * v).sum::<f64>().sqrt();
    assert!(le_norm > 0.0);
    let mut last = -1.0;
    for alpha in [0.0, 0.1, 0.5, 0.9] {
        let total = shared_grads(&mut model, alpha, |l| vec![l.total]);
        let loss_f = shared_grads(&mut model, alpha, |l| vec![l.loss_f]);
        let loss_s = shared_grads(&mut model, alpha, |l| l.loss_s.clone());
        // total − Loss_f − (1−α)·ΣLoss_s leaves the reversed classifier term.
        let rest: Vec<f64> = (0..total.len())
            .map(|i| total[i] - loss_f[i] - (1.0 - alpha) * loss_s[i])
            .collect();
        let norm = rest.iter().map(|v| v * v).sum::<f64>().sqrt();
        assert!(
            (norm - alpha * le_norm).abs() <= 1e-9 * le_norm.max(1.0),
            "α={alpha}"
        );
        assert!(norm > last);
        last = norm;
    }
}

#[test]
fn invalid_configs_are_rejected() {
    let (train, test, schema) = synthetic(200, 6, 2, 0, 0.5, 25);
    let model = || {
        ModelGraph::build(
            &tiny_model_config(Architecture::MptRec),
            &schema,
            &tasks(2),
            1,
        )
        .unwrap()
    };
    for cfg in [
        mptrec::pretrain::PretrainConfig {
            alpha: 1.5,
            ..quick_pretrain(1, 1)
        },
        mptrec::pretrain::PretrainConfig {
            grl_lambda: 0.0,
            ..quick_pretrain(1, 1)
        },
        mptrec::pretrain::PretrainConfig {
            batch_size: 0,
            ..quick_pretrain(1, 1)
        },
    ] {
        assert!(matches!(
            run_pretrain(model(), &train, &test, &cfg, "x"),
            Err(Error::Config(_))
        ));
    }
    let missing = ModelGraph::build(
        &tiny_model_config(Architecture::MptRec),
        &schema,
        &["t1".to_string(), "nope".to_string()],
        1,
    )
    .unwrap();
    assert!(run_pretrain(missing, &train, &test, &quick_pretrain(1, 1), "x").is_err());
}
