//! Synthetic multi-task data with a controllable label correlation.
//!
//! Every task thresholds a Gaussian score at zero. Scores of related tasks
//! mix a shared latent with a private one, `s_k = sqrt(r)·z_shared +
//! sqrt(1−r)·z_k`; each latent is a linear function of the features plus
//! independent noise. For thresholded bivariate normals the label
//! correlation is `(2/π)·asin(r)`, and symmetric label flips with
//! probability `p` scale it by `(1−2p)²`. The mixing weight `r` is solved
//! from the requested label correlation in closed form.

use std::collections::BTreeMap;
use std::f64::consts::PI;
use std::fmt::Write as _;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::autodiff::container::write_atomic;
use crate::data::dataset::Dataset;
use crate::data::schema::{build_vocabulary, ColumnKind, ColumnSpec, FeatureSchema};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SyntheticSpec {
    pub n_samples: usize,
    /// Continuous feature count.
    pub n_features: usize,
    /// Tasks correlated through the shared latent, named `t1..`.
    pub n_tasks: usize,
    /// Pearson correlation between any two related tasks' labels.
    pub target_correlation: f64,
    pub seed: u64,
    /// Extra tasks driven only by their own latent, named after the related ones.
    pub unrelated_tasks: usize,
    /// Fraction of every latent's variance that no feature explains.
    pub noise: f64,
    /// Probability of flipping each label.
    pub label_flip: f64,
    pub n_categorical: usize,
    pub categorical_cardinality: usize,
    pub embedding_dim: usize,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        SyntheticSpec {
            n_samples: 10_000,
            n_features: 16,
            n_tasks: 2,
            target_correlation: 0.5,
            seed: 0,
            unrelated_tasks: 0,
            noise: 0.3,
            label_flip: 0.0,
            n_categorical: 2,
            categorical_cardinality: 8,
            embedding_dim: 4,
        }
    }
}

impl SyntheticSpec {
    pub fn task_names(&self) -> Vec<String> {
        (1..=self.n_tasks + self.unrelated_tasks)
            .map(|i| format!("t{i}"))
            .collect()
    }

    /// Latent mixing weight `r` giving the requested label correlation.
    pub fn mixing_weight(&self) -> Result<f64> {
        let c = self.target_correlation;
        if !(0.0..=1.0).contains(&c) {
            return Err(Error::Invalid(format!(
                "target_correlation {c} outside [0, 1]"
            )));
        }
        if !(0.0..0.5).contains(&self.label_flip) {
            return Err(Error::Invalid(format!(
                "label_flip {} outside [0, 0.5)",
                self.label_flip
            )));
        }
        let ceiling = (1.0 - 2.0 * self.label_flip).powi(2);
        if c > ceiling + 1e-12 {
            return Err(Error::Invalid(format!(
                "target_correlation {c} infeasible with label_flip {}: maximum is {ceiling:.4}",
                self.label_flip
            )));
        }
        Ok((PI * (c / ceiling).min(1.0) / 2.0).sin())
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_samples == 0 || self.n_tasks + self.unrelated_tasks == 0 {
            return Err(Error::Invalid(
                "synthetic spec needs samples and tasks".into(),
            ));
        }
        if !(0.0..1.0).contains(&self.noise) {
            return Err(Error::Invalid(format!(
                "noise {} outside [0, 1)",
                self.noise
            )));
        }
        let latents = 1 + self.n_tasks + self.unrelated_tasks;
        if self.n_features < latents {
            return Err(Error::Invalid(format!(
                "need at least {latents} continuous features for independent latents"
            )));
        }
        if self.n_categorical > 0 && (self.categorical_cardinality == 0 || self.embedding_dim == 0)
        {
            return Err(Error::Invalid(
                "categorical columns need cardinality and embedding_dim".into(),
            ));
        }
        Ok(())
    }

    pub fn schema(&self) -> Result<FeatureSchema> {
        let mut columns = Vec::new();
        for c in 0..self.n_categorical {
            let values: Vec<String> = (0..self.categorical_cardinality)
                .map(|v| format!("v{v}"))
                .collect();
            columns.push(ColumnSpec {
                name: format!("c{c}"),
                kind: ColumnKind::Categorical {
                    vocabulary: build_vocabulary(values.iter().map(String::as_str)),
                    embedding_dim: self.embedding_dim,
                },
                excluded: false,
            });
        }
        for f in 0..self.n_features {
            columns.push(ColumnSpec {
                name: format!("x{f}"),
                kind: ColumnKind::Continuous {
                    mean: 0.0,
                    std: 1.0,
                },
                excluded: false,
            });
        }
        FeatureSchema::new(columns)
    }
}

fn normal(rng: &mut ChaCha8Rng) -> f64 {
    StandardNormal.sample(rng)
}

/// Orthonormal directions by Gram-Schmidt on Gaussian draws, so that latents
/// built from iid standard features are uncorrelated.
fn orthonormal_directions(count: usize, dim: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<f64>> {
    let mut out: Vec<Vec<f64>> = Vec::with_capacity(count);
    while out.len() < count {
        let mut v: Vec<f64> = (0..dim).map(|_| normal(rng)).collect();
        for u in &out {
            let d: f64 = v.iter().zip(u).map(|(a, b)| a * b).sum();
            v.iter_mut().zip(u).for_each(|(a, b)| *a -= d * b);
        }
        let n = v.iter().map(|a| a * a).sum::<f64>().sqrt();
        if n > 1e-8 {
            out.push(v.into_iter().map(|a| a / n).collect());
        }
    }
    out
}

fn standardize(v: &mut [f64]) {
    let n = v.len() as f64;
    let m = v.iter().sum::<f64>() / n;
    let s = (v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / n).sqrt();
    let s = if s > 0.0 { s } else { 1.0 };
    v.iter_mut().for_each(|x| *x = (*x - m) / s);
}

/// Generates `spec.n_samples` rows with row ids `0..n`.
pub fn generate_synthetic(spec: &SyntheticSpec) -> Result<(Dataset, FeatureSchema)> {
    spec.validate()?;
    let r = spec.mixing_weight()?;
    let schema = spec.schema()?;
    let n = spec.n_samples;
    let n_latent = 1 + spec.n_tasks + spec.unrelated_tasks;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);

    let dirs = orthonormal_directions(n_latent, spec.n_features, &mut rng);
    // Categorical column c feeds latent c mod n_latent only.
    let effects: Vec<Vec<f64>> = (0..spec.n_categorical)
        .map(|_| {
            (0..=spec.categorical_cardinality)
                .map(|_| normal(&mut rng))
                .collect()
        })
        .collect();

    let mut continuous = vec![vec![0.0; n]; spec.n_features];
    let mut categorical = vec![vec![0u32; n]; spec.n_categorical];
    for i in 0..n {
        for col in continuous.iter_mut() {
            col[i] = normal(&mut rng);
        }
        for col in categorical.iter_mut() {
            col[i] = rng.random_range(1..=spec.categorical_cardinality as u32);
        }
    }

    let mut latents = Vec::with_capacity(n_latent);
    for (l, dir) in dirs.iter().enumerate() {
        let mut signal: Vec<f64> = (0..n)
            .map(|i| dir.iter().zip(&continuous).map(|(w, col)| w * col[i]).sum())
            .collect();
        for (c, col) in categorical.iter().enumerate() {
            if c % n_latent == l {
                for i in 0..n {
                    signal[i] += effects[c][col[i] as usize];
                }
            }
        }
        standardize(&mut signal);
        let a = (1.0 - spec.noise).sqrt();
        let b = spec.noise.sqrt();
        let z: Vec<f64> = signal
            .iter()
            .map(|s| a * s + b * normal(&mut rng))
            .collect();
        latents.push(z);
    }

    let names = spec.task_names();
    let mut labels = BTreeMap::new();
    for (k, name) in names.iter().enumerate() {
        let ys: Vec<u8> = (0..n)
            .map(|i| {
                let s = if k < spec.n_tasks {
                    r.sqrt() * latents[0][i] + (1.0 - r).sqrt() * latents[1 + k][i]
                } else {
                    latents[1 + k][i]
                };
                let y = u8::from(s > 0.0);
                if spec.label_flip > 0.0 && rng.random::<f64>() < spec.label_flip {
                    1 - y
                } else {
                    y
                }
            })
            .collect();
        labels.insert(name.clone(), ys);
    }

    let ds = Dataset {
        schema: schema.clone(),
        row_ids: (0..n as u64).collect(),
        categorical,
        continuous,
        labels,
    };
    ds.validate()?;
    Ok((ds, schema))
}

/// Header line plus one comma-separated row per example: row id, categorical
/// ids, continuous values, then task labels in name order.
pub fn to_csv(data: &Dataset) -> String {
    let mut out = String::new();
    let mut header = vec!["row_id".to_string()];
    header.extend(data.schema.categorical().map(|c| c.name.clone()));
    header.extend(data.schema.continuous().map(|c| c.name.clone()));
    header.extend(data.labels.keys().cloned());
    out.push_str(&header.join(","));
    out.push('\n');
    for i in 0..data.len() {
        write!(out, "{}", data.row_ids[i]).unwrap();
        for col in &data.categorical {
            write!(out, ",{}", col[i]).unwrap();
        }
        for col in &data.continuous {
            write!(out, ",{}", col[i]).unwrap();
        }
        for ys in data.labels.values() {
            write!(out, ",{}", ys[i]).unwrap();
        }
        out.push('\n');
    }
    out
}

pub fn write_csv(data: &Dataset, path: &Path) -> Result<()> {
    write_atomic(path, to_csv(data).as_bytes())
}
