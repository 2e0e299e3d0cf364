use std::collections::BTreeMap;

use crate::data::{ordered_batches, Dataset};
use crate::error::Result;
use crate::eval::auc::auc_u8;
use crate::exec::{self, Parallelism};
use crate::model::{predict_batch, ModelGraph};

/// Live predictions for `rows` (all rows when `None`), in row order.
/// Batches are scored independently, so the result does not depend on the
/// parallelism mode.
pub fn predict_dataset(
    model: &ModelGraph,
    data: &Dataset,
    rows: Option<&[usize]>,
    batch_size: usize,
    mode: Parallelism,
) -> Result<BTreeMap<String, Vec<f64>>> {
    let all: Vec<usize>;
    let rows = match rows {
        Some(r) => r,
        None => {
            all = (0..data.len()).collect();
            &all
        }
    };
    let chunks: Vec<Vec<usize>> = ordered_batches(rows.len(), batch_size)
        .into_iter()
        .map(|c| c.into_iter().map(|i| rows[i]).collect())
        .collect();
    let parts = exec::try_map(&chunks, mode, |c| predict_batch(model, &data.batch(c)))?;
    let mut out: BTreeMap<String, Vec<f64>> = BTreeMap::new();
    for part in parts {
        for (task, v) in part {
            out.entry(task).or_default().extend(v);
        }
    }
    Ok(out)
}

/// AUC per task over `rows` for every task that has labels in `data`.
pub fn evaluate_auc(
    model: &ModelGraph,
    data: &Dataset,
    rows: Option<&[usize]>,
    batch_size: usize,
    mode: Parallelism,
) -> Result<BTreeMap<String, f64>> {
    let preds = predict_dataset(model, data, rows, batch_size, mode)?;
    let mut out = BTreeMap::new();
    for (task, scores) in &preds {
        let Ok(all_labels) = data.labels(task) else {
            continue;
        };
        let labels: Vec<u8> = match rows {
            Some(r) => r.iter().map(|&i| all_labels[i]).collect(),
            None => all_labels.to_vec(),
        };
        out.insert(task.clone(), auc_u8(scores, &labels)?);
    }
    Ok(out)
}
