//! Precomputed frozen features keyed by dataset row id.
//!
//! On disk a cache is a tensor container with a `row_id` column (`[n, 1]`,
//! ids stored as exact f64 integers) and one `feature/<name>` matrix per
//! frozen feature, rows aligned with `row_id`.

use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use crate::autodiff::{Container, Entry, Graph};
use crate::data::{ordered_batches, Dataset};
use crate::error::{Error, Result};
use crate::exec::{self, Parallelism};
use crate::model::forward::{frozen_feature_names, frozen_features};
use crate::model::ModelGraph;
use crate::tensor::Tensor;

pub const CACHE_FORMAT: &str = "mptrec-cache/1";
const MAX_EXACT_ID: u64 = 1 << 53;

#[derive(Clone, Debug, PartialEq)]
pub struct FrozenCache {
    /// Digest of the pre-trained parameters the features came from.
    pub source_checksum: String,
    pub names: Vec<String>,
    pub row_ids: Vec<u64>,
    pub features: BTreeMap<String, Tensor>,
    index: HashMap<u64, usize>,
}

/// Digest identifying the frozen part of `model`. Adding a new task or
/// changing trainable flags leaves it unchanged.
pub fn source_checksum(model: &ModelGraph) -> String {
    model.store.digest(Some(&model.pretrained_param_names()))
}

fn index_of(row_ids: &[u64]) -> Result<HashMap<u64, usize>> {
    let mut index = HashMap::with_capacity(row_ids.len());
    for (i, &id) in row_ids.iter().enumerate() {
        if index.insert(id, i).is_some() {
            return Err(Error::Invalid(format!("duplicate row id {id} in cache")));
        }
    }
    Ok(index)
}

impl FrozenCache {
    /// Runs the frozen forward pass over `rows` (all rows when `None`).
    pub fn build(
        model: &ModelGraph,
        data: &Dataset,
        rows: Option<&[usize]>,
        batch_size: usize,
        mode: Parallelism,
    ) -> Result<Self> {
        if batch_size == 0 {
            return Err(Error::Config("cache batch_size must be positive".into()));
        }
        let names = frozen_feature_names(model)?;
        let rows: Vec<usize> = rows.map_or_else(|| (0..data.len()).collect(), <[usize]>::to_vec);
        if let Some(r) = rows.iter().find(|&&r| r >= data.len()) {
            return Err(Error::Invalid(format!(
                "cache row {r} out of range for {} rows",
                data.len()
            )));
        }
        let row_ids: Vec<u64> = rows.iter().map(|&r| data.row_ids[r]).collect();
        if let Some(id) = row_ids.iter().find(|&&id| id >= MAX_EXACT_ID) {
            return Err(Error::Invalid(format!("row id {id} is too large to cache")));
        }
        let index = index_of(&row_ids)?;
        let chunks: Vec<Vec<usize>> = ordered_batches(rows.len(), batch_size)
            .into_iter()
            .map(|c| c.into_iter().map(|i| rows[i]).collect())
            .collect();
        let parts = exec::try_map(&chunks, mode, |chunk| {
            let mut g = Graph::new();
            let vars = frozen_features(&mut g, model, &data.batch(chunk))?;
            Ok::<_, Error>(
                names
                    .iter()
                    .map(|n| g.value(vars[n]).clone())
                    .collect::<Vec<_>>(),
            )
        })?;
        let mut features = BTreeMap::new();
        for (i, n) in names.iter().enumerate() {
            let t = if parts.is_empty() {
                Tensor::zeros(0, 0)
            } else {
                Tensor::vstack(&parts.iter().map(|p| p[i].clone()).collect::<Vec<_>>())?
            };
            features.insert(n.clone(), t);
        }
        Ok(FrozenCache {
            source_checksum: source_checksum(model),
            names,
            row_ids,
            features,
            index,
        })
    }

    pub fn len(&self) -> usize {
        self.row_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.row_ids.is_empty()
    }

    pub fn contains(&self, row_id: u64) -> bool {
        self.index.contains_key(&row_id)
    }

    /// Fails with [`Error::StaleCache`] unless the cache came from `model`'s
    /// frozen parameters and holds the features it needs.
    pub fn check(&self, model: &ModelGraph) -> Result<()> {
        let current = source_checksum(model);
        if current != self.source_checksum {
            return Err(Error::StaleCache {
                cached: self.source_checksum.clone(),
                current,
            });
        }
        if frozen_feature_names(model)? != self.names {
            return Err(Error::Invalid(
                "cache holds different features than the model needs".into(),
            ));
        }
        Ok(())
    }

    /// Feature matrices for `row_ids`, in the given order.
    pub fn features(&self, row_ids: &[u64]) -> Result<BTreeMap<String, Tensor>> {
        let mut positions = Vec::with_capacity(row_ids.len());
        let mut missing = Vec::new();
        for id in row_ids {
            match self.index.get(id) {
                Some(&p) => positions.push(p),
                None => missing.push(*id),
            }
        }
        if !missing.is_empty() {
            return Err(Error::CacheMiss(missing));
        }
        Ok(self
            .features
            .iter()
            .map(|(n, t)| (n.clone(), t.select_rows(&positions)))
            .collect())
    }

    pub fn to_container(&self) -> Container {
        let mut meta = BTreeMap::new();
        meta.insert("format".into(), CACHE_FORMAT.into());
        meta.insert("source_checksum".into(), self.source_checksum.clone());
        meta.insert("names".into(), self.names.join(","));
        let mut entries = vec![Entry {
            name: "row_id".into(),
            tensor: Tensor::column(self.row_ids.iter().map(|&id| id as f64).collect()),
            trainable: false,
        }];
        for n in &self.names {
            entries.push(Entry {
                name: format!("feature/{n}"),
                tensor: self.features[n].clone(),
                trainable: false,
            });
        }
        Container { meta, entries }
    }

    pub fn from_container(c: &Container) -> Result<Self> {
        let get = |k: &str| {
            c.meta
                .get(k)
                .ok_or_else(|| Error::Format(format!("cache meta lacks `{k}`")))
        };
        if get("format")? != CACHE_FORMAT {
            return Err(Error::Format(format!(
                "unsupported cache format `{}`",
                get("format")?
            )));
        }
        let names: Vec<String> = get("names")?
            .split(',')
            .filter(|s| !s.is_empty())
            .map(str::to_string)
            .collect();
        let entry = |name: &str| {
            c.entries
                .iter()
                .find(|e| e.name == name)
                .map(|e| &e.tensor)
                .ok_or_else(|| Error::Format(format!("cache lacks tensor `{name}`")))
        };
        let ids = entry("row_id")?;
        let row_ids: Vec<u64> = ids
            .data()
            .iter()
            .map(|&v| {
                if v >= 0.0 && v.fract() == 0.0 && v < MAX_EXACT_ID as f64 {
                    Ok(v as u64)
                } else {
                    Err(Error::Format(format!("cache row id {v} is not a valid id")))
                }
            })
            .collect::<Result<_>>()?;
        let mut features = BTreeMap::new();
        for n in &names {
            let t = entry(&format!("feature/{n}"))?;
            if t.rows() != row_ids.len() {
                return Err(Error::Format(format!(
                    "cache feature `{n}` has {} rows for {} ids",
                    t.rows(),
                    row_ids.len()
                )));
            }
            features.insert(n.clone(), t.clone());
        }
        Ok(FrozenCache {
            source_checksum: get("source_checksum")?.clone(),
            names,
            index: index_of(&row_ids)?,
            row_ids,
            features,
        })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        self.to_container().write(path)
    }

    pub fn read(path: &Path) -> Result<Self> {
        Self::from_container(&Container::read(path)?)
    }
}
