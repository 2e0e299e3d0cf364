use std::fmt::Write as _;
use std::path::Path;

use crate::autodiff::container::write_atomic;
use crate::autodiff::Graph;
use crate::data::Dataset;
use crate::error::Result;
use crate::model::forward::mptrec_representations;
use crate::model::ModelGraph;

/// Tab-separated `x_s` and `x_k` vectors for external projection tools.
///
/// Header: `row_id  kind  h0 .. h{H-1}`. Each row id yields one `shared`
/// line followed by `task-1`, `task-2`, ... lines in task order.
pub fn representations_tsv(model: &ModelGraph, data: &Dataset, rows: &[usize]) -> Result<String> {
    let h = model.hidden_dim();
    let mut out = String::from("row_id\tkind");
    for i in 0..h {
        write!(out, "\th{i}").unwrap();
    }
    out.push('\n');
    for chunk in rows.chunks(256) {
        let batch = data.batch(chunk);
        let mut g = Graph::new();
        let (_, x_s, x_k) = mptrec_representations(&mut g, model, &batch)?;
        for (r, row_id) in batch.row_ids.iter().enumerate() {
            let kinds = std::iter::once(("shared".to_string(), x_s)).chain(
                x_k.iter()
                    .enumerate()
                    .map(|(k, v)| (format!("task-{}", k + 1), *v)),
            );
            for (kind, v) in kinds {
                write!(out, "{row_id}\t{kind}").unwrap();
                for x in g.value(v).row_slice(r) {
                    write!(out, "\t{x}").unwrap();
                }
                out.push('\n');
            }
        }
    }
    Ok(out)
}

pub fn export_representations(
    model: &ModelGraph,
    data: &Dataset,
    rows: &[usize],
    path: &Path,
) -> Result<()> {
    write_atomic(path, representations_tsv(model, data, rows)?.as_bytes())
}
