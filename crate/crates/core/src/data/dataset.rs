use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::data::schema::FeatureSchema;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Fully encoded rows kept column-major in memory.
///
/// Only included columns are stored: excluded columns are dropped at
/// encoding time and cannot influence model inputs.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub schema: FeatureSchema,
    pub row_ids: Vec<u64>,
    /// One id vector per included categorical column, in schema order.
    pub categorical: Vec<Vec<u32>>,
    /// One standardized value vector per included continuous column.
    pub continuous: Vec<Vec<f64>>,
    /// Binary labels per task name.
    pub labels: BTreeMap<String, Vec<u8>>,
}

/// A batch of encoded rows.
#[derive(Clone, Debug, PartialEq)]
pub struct ExampleBatch {
    pub row_ids: Vec<u64>,
    /// Per included categorical column, one vocabulary id per row.
    pub categorical_ids: Vec<Vec<usize>>,
    /// `[batch, n_continuous]`.
    pub continuous: Tensor,
    pub labels: BTreeMap<String, Vec<f64>>,
}

impl ExampleBatch {
    pub fn batch_size(&self) -> usize {
        self.row_ids.len()
    }

    pub fn labels(&self, task: &str) -> Result<&[f64]> {
        self.labels
            .get(task)
            .map(Vec::as_slice)
            .ok_or_else(|| Error::Invalid(format!("batch has no labels for task `{task}`")))
    }
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.row_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.row_ids.is_empty()
    }

    pub fn task_names(&self) -> Vec<String> {
        self.labels.keys().cloned().collect()
    }

    pub fn labels(&self, task: &str) -> Result<&[u8]> {
        self.labels
            .get(task)
            .map(Vec::as_slice)
            .ok_or_else(|| Error::Invalid(format!("dataset has no labels for task `{task}`")))
    }

    pub fn batch(&self, rows: &[usize]) -> ExampleBatch {
        let categorical_ids = self
            .categorical
            .iter()
            .map(|col| rows.iter().map(|&r| col[r] as usize).collect())
            .collect();
        let nc = self.continuous.len();
        let mut cont = Vec::with_capacity(rows.len() * nc);
        for &r in rows {
            for col in &self.continuous {
                cont.push(col[r]);
            }
        }
        let labels = self
            .labels
            .iter()
            .map(|(k, v)| (k.clone(), rows.iter().map(|&r| f64::from(v[r])).collect()))
            .collect();
        ExampleBatch {
            row_ids: rows.iter().map(|&r| self.row_ids[r]).collect(),
            categorical_ids,
            continuous: Tensor::matrix(rows.len(), nc, cont).expect("consistent shape"),
            labels,
        }
    }

    pub fn subset(&self, rows: &[usize]) -> Dataset {
        Dataset {
            schema: self.schema.clone(),
            row_ids: rows.iter().map(|&r| self.row_ids[r]).collect(),
            categorical: self
                .categorical
                .iter()
                .map(|c| rows.iter().map(|&r| c[r]).collect())
                .collect(),
            continuous: self
                .continuous
                .iter()
                .map(|c| rows.iter().map(|&r| c[r]).collect())
                .collect(),
            labels: self
                .labels
                .iter()
                .map(|(k, v)| (k.clone(), rows.iter().map(|&r| v[r]).collect()))
                .collect(),
        }
    }

    /// Keeps only the named tasks' labels.
    pub fn with_tasks(&self, tasks: &[String]) -> Result<Dataset> {
        let mut labels = BTreeMap::new();
        for t in tasks {
            labels.insert(t.clone(), self.labels(t)?.to_vec());
        }
        Ok(Dataset {
            labels,
            ..self.clone()
        })
    }

    /// Checks the batch invariants: equal lengths, ids within vocabulary,
    /// binary labels.
    pub fn validate(&self) -> Result<()> {
        let n = self.len();
        let vocab_sizes: Vec<usize> = self
            .schema
            .categorical()
            .map(|c| match &c.kind {
                crate::data::schema::ColumnKind::Categorical { vocabulary, .. } => vocabulary.len(),
                _ => 0,
            })
            .collect();
        if vocab_sizes.len() != self.categorical.len()
            || self.schema.continuous().count() != self.continuous.len()
        {
            return Err(Error::Invalid(
                "dataset columns disagree with schema".into(),
            ));
        }
        for (col, size) in self.categorical.iter().zip(&vocab_sizes) {
            if col.len() != n || col.iter().any(|&id| id as usize >= *size) {
                return Err(Error::Invalid("categorical column out of range".into()));
            }
        }
        if self.continuous.iter().any(|c| c.len() != n) {
            return Err(Error::Invalid("continuous column length mismatch".into()));
        }
        for (k, v) in &self.labels {
            if v.len() != n || v.iter().any(|&y| y > 1) {
                return Err(Error::Invalid(format!("labels for `{k}` are not binary")));
            }
        }
        Ok(())
    }
}

/// Deterministic train/validation split: rows are shuffled with `seed` and
/// the last `fraction` of the shuffled order becomes validation.
pub fn validation_split(n: usize, fraction: f64, seed: u64) -> (Vec<usize>, Vec<usize>) {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let n_valid = ((n as f64) * fraction).round() as usize;
    let valid = idx.split_off(n - n_valid.min(n));
    (idx, valid)
}

/// Shuffled mini-batches of `indices`; the order depends only on `rng`.
pub fn shuffled_batches(
    indices: &[usize],
    batch_size: usize,
    rng: &mut ChaCha8Rng,
) -> Vec<Vec<usize>> {
    let mut idx = indices.to_vec();
    idx.shuffle(rng);
    idx.chunks(batch_size.max(1))
        .map(<[usize]>::to_vec)
        .collect()
}

/// Sequential mini-batches over `0..n`.
pub fn ordered_batches(n: usize, batch_size: usize) -> Vec<Vec<usize>> {
    (0..n)
        .collect::<Vec<_>>()
        .chunks(batch_size.max(1))
        .map(<[usize]>::to_vec)
        .collect()
}
