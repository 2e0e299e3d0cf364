//! Hard-assignment EM over pseudo-task labels.
//!
//! E-step: every instance moves to `argmax_c prior_c · p(c | x_s)` where the
//! posterior comes from the task classifier. M-step: priors become the
//! cluster frequencies. The classifier itself is refit by the training loop
//! between E-steps.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::Graph;
use crate::data::{ordered_batches, Dataset};
use crate::error::{Error, Result};
use crate::exec::{self, Parallelism};
use crate::model::forward::mptrec_representations;
use crate::model::ModelGraph;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EmRound {
    pub round: usize,
    /// Instances whose label changed.
    pub changed: usize,
    /// `(cluster, instances moved into it)` for clusters that came out empty.
    pub reseeded: Vec<(usize, usize)>,
    pub sizes: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PseudoLabelState {
    /// Cluster of every training instance, in training-row order.
    pub labels: Vec<usize>,
    pub priors: Vec<f64>,
    pub round: usize,
    pub history: Vec<EmRound>,
}

fn frequencies(labels: &[usize], k: usize) -> (Vec<usize>, Vec<f64>) {
    let mut sizes = vec![0usize; k];
    for &l in labels {
        sizes[l] += 1;
    }
    let n = labels.len().max(1) as f64;
    let priors = sizes.iter().map(|&s| s as f64 / n).collect();
    (sizes, priors)
}

impl PseudoLabelState {
    /// Uniform-random initial assignment.
    pub fn uniform_random(n: usize, clusters: usize, seed: u64) -> Result<Self> {
        if clusters == 0 {
            return Err(Error::Invalid("EM needs at least one cluster".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let labels: Vec<usize> = (0..n).map(|_| rng.random_range(0..clusters)).collect();
        let (_, priors) = frequencies(&labels, clusters);
        Ok(PseudoLabelState {
            labels,
            priors,
            round: 0,
            history: Vec::new(),
        })
    }

    pub fn clusters(&self) -> usize {
        self.priors.len()
    }
}

/// One E-step plus M-step given classifier posteriors `[n, C]`.
///
/// A cluster left empty is reseeded with the instances whose winning score
/// is lowest, taking at most `max(1, n / (10·C))` of them and never emptying
/// a donor cluster.
pub fn em_update(posteriors: &Tensor, state: &PseudoLabelState) -> Result<PseudoLabelState> {
    let (n, c) = (posteriors.rows(), posteriors.cols());
    if n != state.labels.len() || c != state.clusters() {
        return Err(Error::shape(
            "em_update",
            format!(
                "posteriors {:?} for {} instances and {} clusters",
                posteriors.shape(),
                state.labels.len(),
                state.clusters()
            ),
        ));
    }
    let mut labels = Vec::with_capacity(n);
    let mut confidence = Vec::with_capacity(n);
    for i in 0..n {
        let row = posteriors.row_slice(i);
        let scores: Vec<f64> = row.iter().zip(&state.priors).map(|(p, q)| p * q).collect();
        let total: f64 = scores.iter().sum();
        let mut best = 0;
        for j in 1..c {
            if scores[j] > scores[best] {
                best = j;
            }
        }
        labels.push(best);
        confidence.push(if total > 0.0 {
            scores[best] / total
        } else {
            0.0
        });
    }
    let (mut sizes, _) = frequencies(&labels, c);
    let mut reseeded = Vec::new();
    let quota = (n / (10 * c)).max(1);
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| confidence[a].total_cmp(&confidence[b]).then(a.cmp(&b)));
    for cluster in 0..c {
        if sizes[cluster] > 0 {
            continue;
        }
        let mut moved = 0;
        for &i in &order {
            if moved == quota {
                break;
            }
            let from = labels[i];
            if from != cluster && sizes[from] > 1 {
                sizes[from] -= 1;
                sizes[cluster] += 1;
                labels[i] = cluster;
                moved += 1;
            }
        }
        if moved > 0 {
            log::info!("em: reseeded empty cluster {cluster} with {moved} low-posterior instances");
            reseeded.push((cluster, moved));
        }
    }
    let changed = labels
        .iter()
        .zip(&state.labels)
        .filter(|(a, b)| a != b)
        .count();
    let (sizes, priors) = frequencies(&labels, c);
    let round = state.round + 1;
    let mut history = state.history.clone();
    history.push(EmRound {
        round,
        changed,
        reseeded,
        sizes,
    });
    Ok(PseudoLabelState {
        labels,
        priors,
        round,
        history,
    })
}

/// Classifier posteriors `K(x_s)` for `rows`, scored in parallel batches.
pub fn classifier_posteriors(
    model: &ModelGraph,
    data: &Dataset,
    rows: &[usize],
    batch_size: usize,
    mode: Parallelism,
) -> Result<Tensor> {
    let p = model.mptrec()?;
    let classifier = p
        .classifier
        .as_ref()
        .ok_or_else(|| Error::Invalid("model has no task classifier (no_gan)".into()))?;
    let chunks: Vec<Vec<usize>> = ordered_batches(rows.len(), batch_size)
        .into_iter()
        .map(|c| c.into_iter().map(|i| rows[i]).collect())
        .collect();
    let parts = exec::try_map(&chunks, mode, |chunk| {
        let mut g = Graph::new();
        let (_, x_s, _) = mptrec_representations(&mut g, model, &data.batch(chunk))?;
        let probs = classifier.forward(&mut g, &model.store, x_s)?;
        Ok::<_, Error>(g.value(probs).clone())
    })?;
    if parts.is_empty() {
        return Ok(Tensor::zeros(0, classifier.output_dim()));
    }
    Tensor::vstack(&parts)
}

/// E-step over the training rows followed by the M-step.
pub fn assign_task_labels_em(
    model: &ModelGraph,
    data: &Dataset,
    rows: &[usize],
    state: &PseudoLabelState,
    batch_size: usize,
    mode: Parallelism,
) -> Result<PseudoLabelState> {
    let post = classifier_posteriors(model, data, rows, batch_size, mode)?;
    em_update(&post, state)
}
