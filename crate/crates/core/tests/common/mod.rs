//! Shared helpers for the integration and acceptance tests.
#![allow(dead_code)]

use std::collections::BTreeMap;

use mptrec::autodiff::{Graph, Op, ParamStore, Var};
use mptrec::data::{
    generate_synthetic, validation_split, Dataset, ExampleBatch, FeatureSchema, SyntheticSpec,
};
use mptrec::model::forward::prompt_head;
use mptrec::model::{
    mptrec_forward, Activation, Architecture, ForwardMode, Mlp, ModelConfig, ModelGraph,
    NewTaskParts,
};
use mptrec::pretrain::{build_pretrain_graph, PretrainConfig};
use mptrec::prompt::{live_features, PromptConfig};
use mptrec::{Result, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const FD_EPS: f64 = 1e-5;
pub const FD_REL_TOL: f64 = 1e-4;
/// Denominator floor of the relative error; gradients below it are compared
/// absolutely at `FD_REL_TOL · FLOOR`.
pub const FD_FLOOR: f64 = 1e-3;
pub const CONFIGS_PER_OP: usize = 20;

pub fn rel_err(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(FD_FLOOR)
}

/// Entries drawn from `±[lo, hi]`, so relu inputs stay clear of the kink.
pub fn rand_matrix(rng: &mut ChaCha8Rng, r: usize, c: usize, lo: f64, hi: f64) -> Tensor {
    let data = (0..r * c)
        .map(|_| {
            let m = rng.random_range(lo..hi);
            if rng.random::<bool>() {
                m
            } else {
                -m
            }
        })
        .collect();
    Tensor::matrix(r, c, data).unwrap()
}

pub fn rand_positive(rng: &mut ChaCha8Rng, r: usize, c: usize, lo: f64, hi: f64) -> Tensor {
    let data = (0..r * c).map(|_| rng.random_range(lo..hi)).collect();
    Tensor::matrix(r, c, data).unwrap()
}

type Build<'a> = dyn Fn(&mut Graph, &[Var]) -> Result<Var> + 'a;

fn scalar_loss(
    build: &Build,
    inputs: &[Tensor],
    weights: &Tensor,
    track: bool,
) -> (Graph, Vec<Var>, Var) {
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs
        .iter()
        .map(|t| {
            if track {
                g.input_with_grad(t.clone()).unwrap()
            } else {
                g.input(t.clone()).unwrap()
            }
        })
        .collect();
    let out = build(&mut g, &vars).unwrap();
    let w = g.input(weights.clone()).unwrap();
    let prod = g.mul(out, w).unwrap();
    let loss = g.sum(prod).unwrap();
    (g, vars, loss)
}

/// Largest relative error between the analytic input gradients of
/// `sum(build(inputs) ⊙ R)` and central differences. `factor` scales the
/// numeric side (`-λ` for gradient reversal, 1 otherwise). Only the inputs
/// flagged in `differentiable` are checked.
pub fn gradcheck(
    build: &Build,
    inputs: &[Tensor],
    differentiable: &[bool],
    factor: f64,
    rng: &mut ChaCha8Rng,
) -> f64 {
    let shape = {
        let mut g = Graph::new();
        let vars: Vec<Var> = inputs.iter().map(|t| g.input(t.clone()).unwrap()).collect();
        let out = build(&mut g, &vars).unwrap();
        g.value(out).shape().to_vec()
    };
    let weights = rand_matrix(rng, shape[0], shape[1], 0.2, 1.0);
    let (g, vars, loss) = scalar_loss(build, inputs, &weights, true);
    let grads = g.backward(loss, &mut ParamStore::new()).unwrap();
    let mut worst = 0.0f64;
    for (i, input) in inputs.iter().enumerate() {
        if !differentiable[i] {
            continue;
        }
        let analytic = grads
            .get(vars[i])
            .cloned()
            .unwrap_or_else(|| Tensor::zeros_like(input));
        for j in 0..input.len() {
            let eval = |delta: f64| {
                let mut moved = inputs.to_vec();
                moved[i].data_mut()[j] += delta;
                let (g, _, l) = scalar_loss(build, &moved, &weights, false);
                g.value(l).item()
            };
            let numeric = (eval(FD_EPS) - eval(-FD_EPS)) / (2.0 * FD_EPS);
            worst = worst.max(rel_err(analytic.data()[j], factor * numeric));
        }
    }
    worst
}

/// `(op, configs, worst relative error)` for every differentiable op.
pub fn gradcheck_all_ops(seed: u64) -> Vec<(&'static str, usize, f64)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();
    let mut run =
        |name: &'static str, rng: &mut ChaCha8Rng, f: &mut dyn FnMut(&mut ChaCha8Rng) -> f64| {
            let worst = (0..CONFIGS_PER_OP).map(|_| f(rng)).fold(0.0, f64::max);
            out.push((name, CONFIGS_PER_OP, worst));
        };
    let dims = |rng: &mut ChaCha8Rng| {
        (
            rng.random_range(1..5usize),
            rng.random_range(1..5usize),
            rng.random_range(1..5usize),
        )
    };

    run("dense", &mut rng, &mut |rng| {
        let (b, i, o) = dims(rng);
        let bias = rng.random::<bool>();
        let mut ins = vec![
            rand_matrix(rng, b, i, 0.1, 1.5),
            rand_matrix(rng, i, o, 0.1, 1.5),
        ];
        if bias {
            ins.push(rand_matrix(rng, 1, o, 0.1, 1.5));
        }
        let n = ins.len();
        gradcheck(
            &|g, v| g.dense(v[0], v[1], v.get(2).copied()),
            &ins,
            &vec![true; n],
            1.0,
            rng,
        )
    });
    run("matmul_t", &mut rng, &mut |rng| {
        let (n, m, h) = dims(rng);
        let ins = [
            rand_matrix(rng, n, h, 0.1, 1.5),
            rand_matrix(rng, m, h, 0.1, 1.5),
        ];
        gradcheck(
            &|g, v| g.matmul_t(v[0], v[1]),
            &ins,
            &[true, true],
            1.0,
            rng,
        )
    });
    run("relu", &mut rng, &mut |rng| {
        let (b, h, _) = dims(rng);
        gradcheck(
            &|g, v| g.relu(v[0]),
            &[rand_matrix(rng, b, h, 0.05, 2.0)],
            &[true],
            1.0,
            rng,
        )
    });
    run("sigmoid", &mut rng, &mut |rng| {
        let (b, h, _) = dims(rng);
        gradcheck(
            &|g, v| g.sigmoid(v[0]),
            &[rand_matrix(rng, b, h, 0.0, 4.0)],
            &[true],
            1.0,
            rng,
        )
    });
    run("softmax", &mut rng, &mut |rng| {
        let (b, h, _) = dims(rng);
        gradcheck(
            &|g, v| g.softmax(v[0]),
            &[rand_matrix(rng, b, h + 1, 0.0, 3.0)],
            &[true],
            1.0,
            rng,
        )
    });
    run("elementwise_mul", &mut rng, &mut |rng| {
        let (b, h, _) = dims(rng);
        let rows = if rng.random::<bool>() { b } else { 1 };
        let ins = [
            rand_matrix(rng, b, h, 0.1, 1.5),
            rand_matrix(rng, rows, h, 0.1, 1.5),
        ];
        gradcheck(&|g, v| g.mul(v[0], v[1]), &ins, &[true, true], 1.0, rng)
    });
    run("add", &mut rng, &mut |rng| {
        let (b, h, _) = dims(rng);
        let rows = if rng.random::<bool>() { b } else { 1 };
        let ins = [
            rand_matrix(rng, b, h, 0.1, 1.5),
            rand_matrix(rng, rows, h, 0.1, 1.5),
        ];
        gradcheck(&|g, v| g.add(v[0], v[1]), &ins, &[true, true], 1.0, rng)
    });
    run("scale", &mut rng, &mut |rng| {
        let (b, h, _) = dims(rng);
        let f = rng.random_range(-2.0..2.0);
        gradcheck(
            &move |g, v| g.scale(v[0], f),
            &[rand_matrix(rng, b, h, 0.1, 1.5)],
            &[true],
            1.0,
            rng,
        )
    });
    run("weighted_sum", &mut rng, &mut |rng| {
        let (b, h, c) = dims(rng);
        let rows = if rng.random::<bool>() { b } else { 1 };
        let mut ins = vec![rand_matrix(rng, rows, c, 0.1, 1.0)];
        ins.extend((0..c).map(|_| rand_matrix(rng, b, h, 0.1, 1.5)));
        let n = ins.len();
        gradcheck(
            &|g, v| g.weighted_sum(v[0], &v[1..]),
            &ins,
            &vec![true; n],
            1.0,
            rng,
        )
    });
    run("gather", &mut rng, &mut |rng| {
        let (rows, d, b) = dims(rng);
        let ids: Vec<usize> = (0..b + 1).map(|_| rng.random_range(0..rows)).collect();
        gradcheck(
            &move |g, v| g.gather(v[0], &ids),
            &[rand_matrix(rng, rows, d, 0.1, 1.5)],
            &[true],
            1.0,
            rng,
        )
    });
    run("concat", &mut rng, &mut |rng| {
        let (b, h, c) = dims(rng);
        let ins: Vec<Tensor> = (0..c)
            .map(|k| rand_matrix(rng, b, h + k, 0.1, 1.5))
            .collect();
        gradcheck(&|g, v| g.concat(v), &ins, &vec![true; c], 1.0, rng)
    });
    run("bce_loss", &mut rng, &mut |rng| {
        let (b, _, _) = dims(rng);
        let y: Vec<f64> = (0..b).map(|_| f64::from(rng.random::<bool>())).collect();
        gradcheck(
            &move |g, v| g.bce_loss(v[0], &y),
            &[rand_positive(rng, b, 1, 0.05, 0.95)],
            &[true],
            1.0,
            rng,
        )
    });
    run("nll_loss", &mut rng, &mut |rng| {
        let (b, c, _) = dims(rng);
        let y: Vec<usize> = (0..b).map(|_| rng.random_range(0..c + 1)).collect();
        gradcheck(
            &move |g, v| g.nll_loss(v[0], &y),
            &[rand_positive(rng, b, c + 1, 0.05, 1.0)],
            &[true],
            1.0,
            rng,
        )
    });
    run("grad_reverse", &mut rng, &mut |rng| {
        let (b, h, _) = dims(rng);
        let lambda = rng.random_range(0.1..2.0);
        gradcheck(
            &move |g, v| g.grad_reverse(v[0], lambda),
            &[rand_matrix(rng, b, h, 0.1, 1.5)],
            &[true],
            -lambda,
            rng,
        )
    });
    run("mean", &mut rng, &mut |rng| {
        let (b, h, _) = dims(rng);
        gradcheck(
            &|g, v| g.mean(v[0]),
            &[rand_matrix(rng, b, h, 0.1, 1.5)],
            &[true],
            1.0,
            rng,
        )
    });
    run("sum", &mut rng, &mut |rng| {
        let (b, h, _) = dims(rng);
        gradcheck(
            &|g, v| g.sum(v[0]),
            &[rand_matrix(rng, b, h, 0.1, 1.5)],
            &[true],
            1.0,
            rng,
        )
    });
    out
}

/// Signs of every ReLU input on the tape.
fn relu_pattern(g: &Graph) -> Vec<bool> {
    g.ops()
        .filter_map(|(_, op)| match op {
            Op::Relu(x) => Some(
                g.value(*x)
                    .data()
                    .iter()
                    .map(|v| *v > 0.0)
                    .collect::<Vec<_>>(),
            ),
            _ => None,
        })
        .flatten()
        .collect()
}

/// Full-model check over every parameter of a tiny MPT-Rec model:
/// `(worst relative error, entries checked, entries skipped)`. Entries whose
/// perturbation moves a ReLU input across zero are skipped.
///
/// With the adversarial branch on, parameters upstream of the gradient
/// reversal are checked against the surrogate `Loss_f + (1−α)·ΣLoss_s −
/// λ·α·Loss_e`, classifier parameters against the total loss.
pub fn gradcheck_model(seed: u64, adversarial: bool) -> (f64, usize, usize) {
    const ALPHA: f64 = 0.3;
    const LAMBDA: f64 = 0.7;
    let (train, _, schema) = synthetic(24, 3, 2, 0, 0.5, seed);
    let mut cfg = tiny_model_config(Architecture::MptRec);
    cfg.ablation.no_gan = !adversarial;
    let mut model = ModelGraph::build(&cfg, &schema, &tasks(2), seed).unwrap();
    // Zero biases put ReLU inputs exactly on the kink; jitter every parameter.
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let ids: Vec<_> = model.store.iter().map(|(id, _)| id).collect();
    for &id in &ids {
        for v in model.store.get_mut(id).value.data_mut() {
            *v += rng.random_range(-0.1..0.1);
        }
    }
    let rows: Vec<usize> = (0..8).collect();
    let pseudo: Vec<usize> = rows.iter().map(|i| i % 2).collect();
    let batch = train.batch(&rows);
    let loss = |m: &ModelGraph, surrogate: bool| {
        let (g, _, l) = build_pretrain_graph(m, &batch, &pseudo, ALPHA, LAMBDA).unwrap();
        let v = l.values(&g);
        let value = match (surrogate, v.loss_e) {
            (true, Some(e)) => v.total - ALPHA * e - LAMBDA * ALPHA * e,
            _ => v.total,
        };
        (value, relu_pattern(&g))
    };
    model.store.zero_grads();
    let (g, _, l) = build_pretrain_graph(&model, &batch, &pseudo, ALPHA, LAMBDA).unwrap();
    g.backward(l.total, &mut model.store).unwrap();
    let (mut worst, mut checked, mut skipped) = (0.0f64, 0, 0);
    for id in ids {
        let surrogate = !model.store.get(id).name.starts_with("classifier");
        let analytic = model.store.get(id).grad.clone();
        for j in 0..analytic.len() {
            let orig = model.store.get(id).value.data()[j];
            model.store.get_mut(id).value.data_mut()[j] = orig + FD_EPS;
            let (up, pu) = loss(&model, surrogate);
            model.store.get_mut(id).value.data_mut()[j] = orig - FD_EPS;
            let (down, pd) = loss(&model, surrogate);
            model.store.get_mut(id).value.data_mut()[j] = orig;
            if pu != pd {
                skipped += 1;
                continue;
            }
            checked += 1;
            worst = worst.max(rel_err(analytic.data()[j], (up - down) / (2.0 * FD_EPS)));
        }
    }
    (worst, checked, skipped)
}

pub fn tasks(n: usize) -> Vec<String> {
    (1..=n).map(|i| format!("t{i}")).collect()
}

/// Train and test splits of a synthetic dataset, 75/25.
pub fn synthetic(
    n: usize,
    features: usize,
    related: usize,
    unrelated: usize,
    correlation: f64,
    seed: u64,
) -> (Dataset, Dataset, FeatureSchema) {
    let spec = SyntheticSpec {
        n_samples: n,
        n_features: features,
        n_tasks: related,
        unrelated_tasks: unrelated,
        target_correlation: correlation,
        seed,
        ..SyntheticSpec::default()
    };
    let (all, schema) = generate_synthetic(&spec).unwrap();
    let (tr, te) = validation_split(all.len(), 0.25, seed ^ 0x7E57);
    (all.subset(&tr), all.subset(&te), schema)
}

pub fn tiny_model_config(arch: Architecture) -> ModelConfig {
    ModelConfig {
        architecture: arch,
        expert_hidden: vec![8, 4],
        tower_hidden: vec![4],
        classifier_hidden: vec![4],
        projection_hidden: 4,
        ..ModelConfig::default()
    }
}

pub fn quick_pretrain(epochs: usize, seed: u64) -> PretrainConfig {
    PretrainConfig {
        epochs,
        batch_size: 32,
        learning_rate: 0.01,
        seed,
        ..PretrainConfig::default()
    }
}

pub fn quick_prompt(epochs: usize, seed: u64) -> PromptConfig {
    PromptConfig {
        epochs,
        batch_size: 32,
        learning_rate: 0.01,
        seed,
        ..PromptConfig::default()
    }
}

/// Bitwise equality of two f64 slices.
pub fn bitwise_eq(a: &[f64], b: &[f64]) -> bool {
    a.len() == b.len() && a.iter().zip(b).all(|(x, y)| x.to_bits() == y.to_bits())
}

type Rows = Vec<Vec<f64>>;

pub fn rows_of(t: &Tensor) -> Rows {
    (0..t.rows()).map(|i| t.row_slice(i).to_vec()).collect()
}

fn hand_softmax(row: &[f64]) -> Vec<f64> {
    let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = row.iter().map(|v| (v - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

/// Plain-loop forward of an [`Mlp`].
pub fn hand_mlp(store: &ParamStore, mlp: &Mlp, x: &Rows) -> Rows {
    let mut cur = x.clone();
    for (li, layer) in mlp.layers.iter().enumerate() {
        let w = store.value(layer.w);
        let b = store.value(layer.b);
        cur = cur
            .iter()
            .map(|row| {
                let mut out: Vec<f64> = (0..layer.output)
                    .map(|j| {
                        b.data()[j] + (0..layer.input).map(|i| row[i] * w.get(i, j)).sum::<f64>()
                    })
                    .collect();
                let act = if li + 1 == mlp.layers.len() {
                    mlp.last
                } else {
                    Activation::Relu
                };
                match act {
                    Activation::None => {}
                    Activation::Relu => out.iter_mut().for_each(|v| *v = v.max(0.0)),
                    Activation::Sigmoid => {
                        out.iter_mut().for_each(|v| *v = 1.0 / (1.0 + (-*v).exp()))
                    }
                    Activation::Softmax => out = hand_softmax(&out),
                }
                out
            })
            .collect();
    }
    cur
}

fn max_diff(a: &Rows, b: &Tensor) -> f64 {
    let mut worst = 0.0f64;
    for (i, row) in a.iter().enumerate() {
        for (j, v) in row.iter().enumerate() {
            worst = worst.max((v - b.get(i, j)).abs());
        }
    }
    if a.len() != b.rows() {
        return f64::INFINITY;
    }
    worst
}

/// Largest deviation of the gate and fusion outputs of an MPT-Rec forward
/// pass from plain-loop arithmetic on the same `x_o`, `x_s` and `x_k`.
pub fn fusion_oracle_error(model: &ModelGraph, batch: &ExampleBatch) -> f64 {
    let p = model.mptrec().unwrap();
    let mut g = Graph::new();
    let out = mptrec_forward(&mut g, model, batch, ForwardMode::Inference).unwrap();
    let x_o = rows_of(g.value(out.x_o));
    let x_s = rows_of(g.value(out.x_s));
    let mut worst = 0.0f64;
    for k in 0..model.tasks.len() {
        let x_k = rows_of(g.value(out.x_k[k]));
        let e_k = model.store.value(p.task_embeddings[k]).data();
        let beta = hand_mlp(&model.store, &p.gates[k], &x_o);
        let x_e: Rows = x_k
            .iter()
            .map(|r| r.iter().zip(e_k).map(|(a, b)| a * b).collect())
            .collect();
        let x_f: Rows = (0..x_s.len())
            .map(|i| {
                (0..x_s[i].len())
                    .map(|j| beta[i][0] * x_s[i][j] + beta[i][1] * x_e[i][j])
                    .collect()
            })
            .collect();
        worst = worst
            .max(max_diff(&beta, g.value(out.beta[k])))
            .max(max_diff(&x_e, g.value(out.x_e[k])))
            .max(max_diff(&x_f, g.value(out.x_f[k])));
    }
    worst
}

/// Largest deviation of the prompt head (transfer weights, transferred
/// representation, new-task fusion) from plain-loop arithmetic.
pub fn prompt_oracle_error(model: &ModelGraph, batch: &ExampleBatch) -> f64 {
    let p = model.mptrec().unwrap();
    let Some(NewTaskParts::Prompt {
        temperature,
        projection: Some(projection),
        task_embedding,
        gate: Some(gate),
        ..
    }) = &model.new_task
    else {
        panic!("prompt model with projection and gate expected");
    };
    let features = live_features(model, batch).unwrap();
    let mut g = Graph::new();
    let vars: BTreeMap<String, Var> = features
        .iter()
        .map(|(k, t)| (k.clone(), g.input(t.clone()).unwrap()))
        .collect();
    let ph = prompt_head(&mut g, model, &vars).unwrap();
    let x_o = rows_of(&features["x_o"]);
    let x_s = rows_of(&features["x_s"]);
    let x_k: Vec<Rows> = model
        .tasks
        .iter()
        .map(|t| rows_of(&features[&format!("x_k.{t}")]))
        .collect();
    let e_n = model.store.value(*task_embedding).data();
    let h_o = hand_mlp(&model.store, projection, &x_o);
    let gamma: Rows = h_o
        .iter()
        .map(|h| {
            let logits: Vec<f64> = p
                .task_embeddings
                .iter()
                .map(|&id| {
                    h.iter()
                        .zip(model.store.value(id).data())
                        .map(|(a, b)| a * b)
                        .sum::<f64>()
                        / temperature
                })
                .collect();
            hand_softmax(&logits)
        })
        .collect();
    let hd = x_s[0].len();
    let x_t: Rows = (0..x_s.len())
        .map(|i| {
            (0..hd)
                .map(|j| (0..x_k.len()).map(|k| gamma[i][k] * x_k[k][i][j]).sum())
                .collect()
        })
        .collect();
    let x_new: Rows = x_t
        .iter()
        .map(|r| r.iter().zip(e_n).map(|(a, b)| a * b).collect())
        .collect();
    let beta = hand_mlp(&model.store, gate, &x_o);
    let x_prime: Rows = (0..x_s.len())
        .map(|i| {
            (0..hd)
                .map(|j| beta[i][0] * x_s[i][j] + beta[i][1] * x_new[i][j])
                .collect()
        })
        .collect();
    [
        max_diff(&gamma, g.value(ph.gamma)),
        max_diff(&x_t, g.value(ph.x_t)),
        max_diff(&x_new, g.value(ph.x_new)),
        max_diff(&beta, g.value(ph.beta.unwrap())),
        max_diff(&x_prime, g.value(ph.x_prime)),
    ]
    .into_iter()
    .fold(0.0, f64::max)
}

/// `O(n²)` pairwise AUC with ties counted as one half.
pub fn pairwise_auc(scores: &[f64], labels: &[u8]) -> f64 {
    let mut num = 0.0;
    let mut den = 0.0;
    for (i, &si) in scores.iter().enumerate() {
        if labels[i] != 1 {
            continue;
        }
        for (j, &sj) in scores.iter().enumerate() {
            if labels[j] != 0 {
                continue;
            }
            den += 1.0;
            num += if si > sj {
                1.0
            } else if si == sj {
                0.5
            } else {
                0.0
            };
        }
    }
    num / den
}
