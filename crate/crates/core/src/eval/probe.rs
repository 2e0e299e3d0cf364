//! Linear probes on learned representations.
//!
//! A softmax-regression probe is fit on standardized features of one part
//! of the rows and scored on the rest. The disentanglement probe predicts
//! EM pseudo-task labels from `x_s` and from the concatenated `x_k`.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Optimizer, ParamStore};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::model::forward::mptrec_representations;
use crate::model::ModelGraph;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProbeConfig {
    pub steps: usize,
    pub learning_rate: f64,
    /// Share of rows used to fit the probe.
    pub train_fraction: f64,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        ProbeConfig {
            steps: 300,
            learning_rate: 0.05,
            train_fraction: 0.7,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProbeResult {
    pub shared_accuracy: f64,
    pub specific_accuracy: f64,
    /// `1 / clusters`.
    pub uniform_floor: f64,
    /// Held-out frequency of the most common label.
    pub majority_floor: f64,
    pub n_fit: usize,
    pub n_test: usize,
}

fn standardize(x: &Tensor, fit: &[usize]) -> Tensor {
    let (n, d) = (x.rows(), x.cols());
    let mut out = x.clone();
    for j in 0..d {
        let col: Vec<f64> = fit.iter().map(|&i| x.get(i, j)).collect();
        let mean = col.iter().sum::<f64>() / col.len().max(1) as f64;
        let var = col.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / col.len().max(1) as f64;
        let sd = if var > 0.0 { var.sqrt() } else { 1.0 };
        for i in 0..n {
            out.data_mut()[i * d + j] = (x.get(i, j) - mean) / sd;
        }
    }
    out
}

/// Held-out accuracy of a softmax-regression probe fit on `fit` rows.
pub fn linear_probe_accuracy(
    x: &Tensor,
    labels: &[usize],
    classes: usize,
    fit: &[usize],
    test: &[usize],
    cfg: &ProbeConfig,
) -> Result<f64> {
    if x.rows() != labels.len() || fit.is_empty() || test.is_empty() || classes == 0 {
        return Err(Error::Invalid(
            "probe needs aligned labels and non-empty splits".into(),
        ));
    }
    if let Some(&l) = labels.iter().find(|&&l| l >= classes) {
        return Err(Error::Invalid(format!(
            "probe label {l} out of range for {classes} classes"
        )));
    }
    let z = standardize(x, fit);
    let mut store = ParamStore::new();
    let w = store.insert("probe/w", Tensor::zeros(z.cols(), classes), true)?;
    let b = store.insert("probe/b", Tensor::zeros(1, classes), true)?;
    let xf = z.select_rows(fit);
    let yf: Vec<usize> = fit.iter().map(|&i| labels[i]).collect();
    let mut opt = Optimizer::adam(cfg.learning_rate);
    for _ in 0..cfg.steps {
        store.zero_grads();
        let mut g = Graph::new();
        let xi = g.input(xf.clone())?;
        let (wv, bv) = (g.param(&store, w)?, g.param(&store, b)?);
        let logits = g.dense(xi, wv, Some(bv))?;
        let p = g.softmax(logits)?;
        let loss = g.nll_loss(p, &yf)?;
        g.backward(loss, &mut store)?;
        opt.step(&mut store)?;
    }
    let mut g = Graph::new();
    let xi = g.input(z.select_rows(test))?;
    let (wv, bv) = (g.param(&store, w)?, g.param(&store, b)?);
    let logits = g.dense(xi, wv, Some(bv))?;
    let scores = g.value(logits);
    let correct = test
        .iter()
        .enumerate()
        .filter(|(r, &i)| {
            let row = scores.row_slice(*r);
            let best = (0..classes).fold(0, |a, c| if row[c] > row[a] { c } else { a });
            best == labels[i]
        })
        .count();
    Ok(correct as f64 / test.len() as f64)
}

/// Probes `x_s` and `[x_1 .. x_N]` of `rows` against `labels` (one EM
/// cluster per row).
pub fn disentanglement_probe(
    model: &ModelGraph,
    data: &Dataset,
    rows: &[usize],
    labels: &[usize],
    classes: usize,
    cfg: &ProbeConfig,
) -> Result<ProbeResult> {
    if rows.len() != labels.len() || rows.len() < 4 {
        return Err(Error::Invalid(
            "probe needs at least four labelled rows".into(),
        ));
    }
    let mut shared = Vec::new();
    let mut specific = Vec::new();
    for chunk in rows.chunks(1024) {
        let mut g = Graph::new();
        let (_, x_s, x_k) = mptrec_representations(&mut g, model, &data.batch(chunk))?;
        shared.push(g.value(x_s).clone());
        let cat = g.concat(&x_k)?;
        specific.push(g.value(cat).clone());
    }
    let shared = Tensor::vstack(&shared)?;
    let specific = Tensor::vstack(&specific)?;
    let n_fit =
        ((rows.len() as f64 * cfg.train_fraction).round() as usize).clamp(1, rows.len() - 1);
    let fit: Vec<usize> = (0..n_fit).collect();
    let test: Vec<usize> = (n_fit..rows.len()).collect();
    let mut counts = vec![0usize; classes];
    for &i in &test {
        counts[labels[i]] += 1;
    }
    Ok(ProbeResult {
        shared_accuracy: linear_probe_accuracy(&shared, labels, classes, &fit, &test, cfg)?,
        specific_accuracy: linear_probe_accuracy(&specific, labels, classes, &fit, &test, cfg)?,
        uniform_floor: 1.0 / classes as f64,
        majority_floor: *counts.iter().max().unwrap_or(&0) as f64 / test.len() as f64,
        n_fit,
        n_test: test.len(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn separable_and_noise_labels() {
        // label = sign of column 0; column 1 is constant
        let n = 200;
        let mut data = Vec::new();
        let mut labels = Vec::new();
        for i in 0..n {
            let v = (i as f64 * 0.37).sin();
            data.extend([v, 1.0]);
            labels.push(usize::from(v > 0.0));
        }
        let x = Tensor::matrix(n, 2, data).unwrap();
        let fit: Vec<usize> = (0..140).collect();
        let test: Vec<usize> = (140..n).collect();
        let cfg = ProbeConfig::default();
        let acc = linear_probe_accuracy(&x, &labels, 2, &fit, &test, &cfg).unwrap();
        assert!(acc > 0.95, "{acc}");
        let only_const = Tensor::matrix(n, 1, vec![1.0; n]).unwrap();
        let acc = linear_probe_accuracy(&only_const, &labels, 2, &fit, &test, &cfg).unwrap();
        let majority = test.iter().filter(|&&i| labels[i] == 1).count() as f64 / test.len() as f64;
        assert!((acc - majority).abs() < 1e-12 || (acc - (1.0 - majority)).abs() < 1e-12);
    }
}
