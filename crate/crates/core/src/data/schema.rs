use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Vocabulary slot 0 of every categorical column.
pub const OOV_TOKEN: &str = "<oov>";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case", deny_unknown_fields)]
pub enum ColumnKind {
    Categorical {
        vocabulary: Vec<String>,
        embedding_dim: usize,
    },
    /// Standardized with the training split's mean and standard deviation.
    Continuous { mean: f64, std: f64 },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ColumnSpec {
    pub name: String,
    pub kind: ColumnKind,
    /// Label sources and held-out task columns never reach the model.
    pub excluded: bool,
}

impl ColumnSpec {
    pub fn is_categorical(&self) -> bool {
        matches!(self.kind, ColumnKind::Categorical { .. })
    }
}

/// Immutable description of the model inputs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FeatureSchema {
    pub columns: Vec<ColumnSpec>,
}

impl FeatureSchema {
    pub fn new(columns: Vec<ColumnSpec>) -> Result<Self> {
        let schema = FeatureSchema { columns };
        schema.validate()?;
        Ok(schema)
    }

    pub fn validate(&self) -> Result<()> {
        let mut seen = std::collections::HashSet::new();
        for c in &self.columns {
            if !seen.insert(c.name.as_str()) {
                return Err(Error::Invalid(format!("duplicate column `{}`", c.name)));
            }
            if let ColumnKind::Categorical {
                vocabulary,
                embedding_dim,
            } = &c.kind
            {
                if vocabulary.first().map(String::as_str) != Some(OOV_TOKEN) {
                    return Err(Error::Invalid(format!(
                        "column `{}`: vocabulary must start with {OOV_TOKEN}",
                        c.name
                    )));
                }
                if *embedding_dim == 0 && !c.excluded {
                    return Err(Error::Invalid(format!(
                        "column `{}`: zero embedding dim",
                        c.name
                    )));
                }
            }
        }
        Ok(())
    }

    /// Included categorical columns in schema order.
    pub fn categorical(&self) -> impl Iterator<Item = &ColumnSpec> {
        self.columns
            .iter()
            .filter(|c| !c.excluded && c.is_categorical())
    }

    /// Included continuous columns in schema order.
    pub fn continuous(&self) -> impl Iterator<Item = &ColumnSpec> {
        self.columns
            .iter()
            .filter(|c| !c.excluded && !c.is_categorical())
    }

    /// Width `D` of the embedding network output.
    pub fn input_dim(&self) -> usize {
        let emb: usize = self
            .categorical()
            .map(|c| match &c.kind {
                ColumnKind::Categorical { embedding_dim, .. } => *embedding_dim,
                ColumnKind::Continuous { .. } => 0,
            })
            .sum();
        emb + self.continuous().count()
    }

    pub fn column(&self, name: &str) -> Option<&ColumnSpec> {
        self.columns.iter().find(|c| c.name == name)
    }
}

/// Maps raw category strings to vocabulary ids, unknown values to 0.
pub struct CategoryEncoder {
    lookup: HashMap<String, u32>,
}

impl CategoryEncoder {
    pub fn new(vocabulary: &[String]) -> Self {
        CategoryEncoder {
            lookup: vocabulary
                .iter()
                .enumerate()
                .skip(1)
                .map(|(i, v)| (v.clone(), i as u32))
                .collect(),
        }
    }

    pub fn encode(&self, raw: &str) -> u32 {
        self.lookup.get(raw).copied().unwrap_or(0)
    }
}

/// Sorted vocabulary with the OOV token in front.
pub fn build_vocabulary<'a>(values: impl Iterator<Item = &'a str>) -> Vec<String> {
    let set: std::collections::BTreeSet<&str> = values.collect();
    std::iter::once(OOV_TOKEN.to_string())
        .chain(set.into_iter().map(str::to_string))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cat(name: &str, vocab: &[&str], dim: usize, excluded: bool) -> ColumnSpec {
        ColumnSpec {
            name: name.into(),
            kind: ColumnKind::Categorical {
                vocabulary: build_vocabulary(vocab.iter().copied()),
                embedding_dim: dim,
            },
            excluded,
        }
    }

    fn cont(name: &str, excluded: bool) -> ColumnSpec {
        ColumnSpec {
            name: name.into(),
            kind: ColumnKind::Continuous {
                mean: 0.0,
                std: 1.0,
            },
            excluded,
        }
    }

    #[test]
    fn input_dim_skips_excluded_columns() {
        let s = FeatureSchema::new(vec![
            cat("a", &["x", "y"], 3, false),
            cat("b", &["x"], 5, true),
            cont("c", false),
            cont("d", true),
        ])
        .unwrap();
        assert_eq!(s.input_dim(), 4);
    }

    #[test]
    fn unknown_values_map_to_oov() {
        let vocab = build_vocabulary(["b", "a", "b"].into_iter());
        assert_eq!(vocab, vec![OOV_TOKEN, "a", "b"]);
        let enc = CategoryEncoder::new(&vocab);
        assert_eq!(enc.encode("a"), 1);
        assert_eq!(enc.encode("zzz"), 0);
    }

    #[test]
    fn vocabulary_must_start_with_oov() {
        let bad = ColumnSpec {
            name: "a".into(),
            kind: ColumnKind::Categorical {
                vocabulary: vec!["x".into()],
                embedding_dim: 2,
            },
            excluded: false,
        };
        assert!(FeatureSchema::new(vec![bad]).is_err());
    }
}
