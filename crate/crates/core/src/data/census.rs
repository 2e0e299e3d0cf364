//! Loader for the Census-income (KDD) extract.
//!
//! The files are comma-separated with 42 fields per row: 40 features, the
//! survey instance weight (ignored) and the income label. Values carry a
//! leading space which is trimmed. Vocabularies and standardization
//! statistics come from the training file only.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::dataset::Dataset;
use crate::data::schema::{
    build_vocabulary, CategoryEncoder, ColumnKind, ColumnSpec, FeatureSchema,
};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CensusField {
    Nominal(usize),
    Continuous,
    InstanceWeight,
    Label,
}

use CensusField::*;

/// File column order with the distinct-value counts published alongside
/// the dataset.
pub const CENSUS_COLUMNS: [(&str, CensusField); 42] = [
    ("age", Continuous),
    ("class_of_worker", Nominal(9)),
    ("detailed_industry_recode", Nominal(52)),
    ("detailed_occupation_recode", Nominal(47)),
    ("education", Nominal(17)),
    ("wage_per_hour", Continuous),
    ("enroll_in_edu_inst_last_wk", Nominal(3)),
    ("marital_stat", Nominal(7)),
    ("major_industry_code", Nominal(24)),
    ("major_occupation_code", Nominal(15)),
    ("race", Nominal(5)),
    ("hispanic_origin", Nominal(10)),
    ("sex", Nominal(2)),
    ("member_of_a_labor_union", Nominal(3)),
    ("reason_for_unemployment", Nominal(6)),
    ("full_or_part_time_employment_stat", Nominal(8)),
    ("capital_gains", Continuous),
    ("capital_losses", Continuous),
    ("dividends_from_stocks", Continuous),
    ("tax_filer_stat", Nominal(6)),
    ("region_of_previous_residence", Nominal(6)),
    ("state_of_previous_residence", Nominal(51)),
    ("detailed_household_and_family_stat", Nominal(38)),
    ("detailed_household_summary_in_household", Nominal(8)),
    ("instance_weight", InstanceWeight),
    ("migration_code_change_in_msa", Nominal(10)),
    ("migration_code_change_in_reg", Nominal(9)),
    ("migration_code_move_within_reg", Nominal(10)),
    ("live_in_this_house_1_year_ago", Nominal(3)),
    ("migration_prev_res_in_sunbelt", Nominal(4)),
    ("num_persons_worked_for_employer", Continuous),
    ("family_members_under_18", Nominal(5)),
    ("country_of_birth_father", Nominal(43)),
    ("country_of_birth_mother", Nominal(43)),
    ("country_of_birth_self", Nominal(43)),
    ("citizenship", Nominal(5)),
    ("own_business_or_self_employed", Nominal(3)),
    ("fill_inc_questionnaire_for_veterans_admin", Nominal(3)),
    ("veterans_benefits", Nominal(3)),
    ("weeks_worked_in_year", Continuous),
    ("year", Nominal(2)),
    ("income", Label),
];

pub const CENSUS_TRAIN_ROWS: usize = 199_523;
pub const CENSUS_TEST_ROWS: usize = 99_762;

/// Default binarization rules, shipped as `configs/census_rules.toml`.
pub const DEFAULT_RULES: &str = include_str!("../../../../configs/census_rules.toml");

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LabelRule {
    pub column: String,
    /// Raw values mapped to 1; everything else maps to 0.
    pub positive: Vec<String>,
}

/// Task name → binarization rule.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct LabelRules(pub BTreeMap<String, LabelRule>);

impl LabelRules {
    pub fn parse(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(format!("label rules: {e}")))
    }

    pub fn census_default() -> Self {
        Self::parse(DEFAULT_RULES).expect("bundled rules parse")
    }

    pub fn from_path(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    pub fn get(&self, task: &str) -> Result<&LabelRule> {
        self.0
            .get(task)
            .ok_or_else(|| Error::Config(format!("no binarization rule for task `{task}`")))
    }
}

fn normalize(v: &str) -> &str {
    let v = v.trim();
    v.strip_suffix('.').unwrap_or(v).trim_end()
}

/// Binarizes one raw value. Matching ignores surrounding whitespace and a
/// trailing period (the income column is written as `50000+.`).
pub fn make_label(rule: &LabelRule, raw: Option<&str>) -> Result<u8> {
    let value = raw
        .map(normalize)
        .filter(|v| !v.is_empty())
        .ok_or_else(|| {
            Error::Invalid(format!("missing value in label column `{}`", rule.column))
        })?;
    Ok(u8::from(
        rule.positive.iter().any(|p| normalize(p) == value),
    ))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CensusSchemaConfig {
    /// Tasks whose labels are extracted; their source columns are excluded.
    pub tasks: Vec<String>,
    /// Additional columns to drop from the inputs.
    pub excluded: Vec<String>,
    pub embedding_dims: BTreeMap<String, usize>,
    pub default_embedding_dim: usize,
}

impl Default for CensusSchemaConfig {
    fn default() -> Self {
        // Σ embedding dims over the 31 remaining categorical columns is 120;
        // with 7 continuous columns D = 127.
        let dims = [
            ("class_of_worker", 4),
            ("detailed_industry_recode", 8),
            ("detailed_occupation_recode", 8),
            ("enroll_in_edu_inst_last_wk", 2),
            ("major_industry_code", 6),
            ("major_occupation_code", 4),
            ("race", 3),
            ("hispanic_origin", 3),
            ("sex", 2),
            ("member_of_a_labor_union", 2),
            ("reason_for_unemployment", 3),
            ("full_or_part_time_employment_stat", 3),
            ("tax_filer_stat", 3),
            ("region_of_previous_residence", 3),
            ("state_of_previous_residence", 8),
            ("detailed_household_and_family_stat", 8),
            ("detailed_household_summary_in_household", 3),
            ("migration_code_change_in_msa", 3),
            ("migration_code_change_in_reg", 3),
            ("migration_code_move_within_reg", 3),
            ("live_in_this_house_1_year_ago", 2),
            ("migration_prev_res_in_sunbelt", 2),
            ("family_members_under_18", 3),
            ("country_of_birth_father", 6),
            ("country_of_birth_mother", 6),
            ("country_of_birth_self", 8),
            ("citizenship", 3),
            ("own_business_or_self_employed", 2),
            ("fill_inc_questionnaire_for_veterans_admin", 2),
            ("veterans_benefits", 2),
            ("year", 2),
            ("education", 4),
            ("marital_stat", 3),
        ];
        CensusSchemaConfig {
            tasks: vec!["income".into(), "marital".into(), "education".into()],
            excluded: Vec::new(),
            embedding_dims: dims.iter().map(|(k, v)| (k.to_string(), *v)).collect(),
            default_embedding_dim: 4,
        }
    }
}

impl CensusSchemaConfig {
    fn excluded_columns(&self, rules: &LabelRules) -> Result<BTreeSet<String>> {
        let mut out: BTreeSet<String> = self.excluded.iter().cloned().collect();
        for t in &self.tasks {
            out.insert(rules.get(t)?.column.clone());
        }
        Ok(out)
    }

    fn dim(&self, col: &str) -> usize {
        self.embedding_dims
            .get(col)
            .copied()
            .unwrap_or(self.default_embedding_dim)
    }
}

/// Raw rows as read from disk, one `Vec<String>` of trimmed fields per row.
#[derive(Clone, Debug)]
pub struct RawTable {
    pub path: PathBuf,
    pub rows: Vec<Vec<String>>,
    /// 1-based line number of every row, for error messages.
    pub lines: Vec<usize>,
}

pub fn column_index(name: &str) -> Option<usize> {
    CENSUS_COLUMNS.iter().position(|(n, _)| *n == name)
}

pub fn read_census(path: &Path) -> Result<RawTable> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut rows = Vec::new();
    let mut lines = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<String> = line.split(',').map(|f| f.trim().to_string()).collect();
        if fields.len() != CENSUS_COLUMNS.len() {
            return Err(Error::Malformed {
                path: path.to_path_buf(),
                line: i + 1,
                message: format!(
                    "expected {} fields, found {}",
                    CENSUS_COLUMNS.len(),
                    fields.len()
                ),
            });
        }
        for (f, (name, kind)) in fields.iter().zip(CENSUS_COLUMNS.iter()) {
            if matches!(kind, Continuous | InstanceWeight) && f.parse::<f64>().is_err() {
                return Err(Error::Malformed {
                    path: path.to_path_buf(),
                    line: i + 1,
                    message: format!("column `{name}`: `{f}` is not a number"),
                });
            }
        }
        rows.push(fields);
        lines.push(i + 1);
    }
    Ok(RawTable {
        path: path.to_path_buf(),
        rows,
        lines,
    })
}

/// Builds the schema from training rows. An empty table cannot define
/// vocabularies or standardization statistics and is an error.
pub fn build_schema(
    train: &RawTable,
    config: &CensusSchemaConfig,
    rules: &LabelRules,
) -> Result<FeatureSchema> {
    if train.rows.is_empty() {
        return Err(Error::Invalid(format!(
            "{}: no rows to build a schema from",
            train.path.display()
        )));
    }
    let excluded = config.excluded_columns(rules)?;
    let n = train.rows.len() as f64;
    let mut columns = Vec::new();
    for (ci, (name, kind)) in CENSUS_COLUMNS.iter().enumerate() {
        let spec_kind = match kind {
            InstanceWeight | Label => continue,
            Nominal(_) => ColumnKind::Categorical {
                vocabulary: build_vocabulary(train.rows.iter().map(|r| r[ci].as_str())),
                embedding_dim: config.dim(name),
            },
            Continuous => {
                let values: Vec<f64> = train.rows.iter().map(|r| r[ci].parse().unwrap()).collect();
                let mean = values.iter().sum::<f64>() / n;
                let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
                let std = if var > 0.0 { var.sqrt() } else { 1.0 };
                ColumnKind::Continuous { mean, std }
            }
        };
        columns.push(ColumnSpec {
            name: name.to_string(),
            kind: spec_kind,
            excluded: excluded.contains(*name),
        });
    }
    FeatureSchema::new(columns)
}

/// Schema with the published cardinalities and placeholder vocabularies.
/// Sizes the Census architecture without reading the data files.
pub fn nominal_schema(config: &CensusSchemaConfig, rules: &LabelRules) -> Result<FeatureSchema> {
    let excluded = config.excluded_columns(rules)?;
    let mut columns = Vec::new();
    for (name, kind) in CENSUS_COLUMNS.iter() {
        let spec_kind = match kind {
            InstanceWeight | Label => continue,
            Nominal(k) => ColumnKind::Categorical {
                vocabulary: build_vocabulary(
                    (0..*k)
                        .map(|i| format!("v{i:02}"))
                        .collect::<Vec<_>>()
                        .iter()
                        .map(String::as_str),
                ),
                embedding_dim: config.dim(name),
            },
            Continuous => ColumnKind::Continuous {
                mean: 0.0,
                std: 1.0,
            },
        };
        columns.push(ColumnSpec {
            name: name.to_string(),
            kind: spec_kind,
            excluded: excluded.contains(*name),
        });
    }
    FeatureSchema::new(columns)
}

/// Encodes raw rows with a fixed schema. Row ids are `offset + row index`.
pub fn encode(
    table: &RawTable,
    schema: &FeatureSchema,
    tasks: &[String],
    rules: &LabelRules,
    offset: u64,
) -> Result<Dataset> {
    let mut categorical = Vec::new();
    for col in schema.categorical() {
        let ci = column_index(&col.name)
            .ok_or_else(|| Error::Invalid(format!("unknown census column `{}`", col.name)))?;
        let ColumnKind::Categorical { vocabulary, .. } = &col.kind else {
            unreachable!()
        };
        let enc = CategoryEncoder::new(vocabulary);
        categorical.push(table.rows.iter().map(|r| enc.encode(&r[ci])).collect());
    }
    let mut continuous = Vec::new();
    for col in schema.continuous() {
        let ci = column_index(&col.name)
            .ok_or_else(|| Error::Invalid(format!("unknown census column `{}`", col.name)))?;
        let ColumnKind::Continuous { mean, std } = col.kind else {
            unreachable!()
        };
        continuous.push(
            table
                .rows
                .iter()
                .map(|r| (r[ci].parse::<f64>().unwrap() - mean) / std)
                .collect(),
        );
    }
    let mut labels = BTreeMap::new();
    for t in tasks {
        let rule = rules.get(t)?;
        let ci = column_index(&rule.column).ok_or_else(|| {
            Error::Config(format!("task `{t}`: unknown column `{}`", rule.column))
        })?;
        let mut ys = Vec::with_capacity(table.rows.len());
        for (r, line) in table.rows.iter().zip(&table.lines) {
            ys.push(
                make_label(rule, Some(&r[ci])).map_err(|e| Error::Malformed {
                    path: table.path.clone(),
                    line: *line,
                    message: e.to_string(),
                })?,
            );
        }
        labels.insert(t.clone(), ys);
    }
    let ds = Dataset {
        schema: schema.clone(),
        row_ids: (0..table.rows.len() as u64).map(|i| offset + i).collect(),
        categorical,
        continuous,
        labels,
    };
    ds.validate()?;
    Ok(ds)
}

pub struct CensusData {
    pub schema: FeatureSchema,
    pub train: Dataset,
    pub test: Dataset,
}

/// Reads both splits. Test row ids continue after the training ids so that
/// every row id is unique across splits.
pub fn load_census(
    train_path: &Path,
    test_path: &Path,
    config: &CensusSchemaConfig,
    rules: &LabelRules,
) -> Result<CensusData> {
    let train_raw = read_census(train_path)?;
    let test_raw = read_census(test_path)?;
    let schema = build_schema(&train_raw, config, rules)?;
    let train = encode(&train_raw, &schema, &config.tasks, rules, 0)?;
    let test = encode(
        &test_raw,
        &schema,
        &config.tasks,
        rules,
        train_raw.rows.len() as u64,
    )?;
    Ok(CensusData {
        schema,
        train,
        test,
    })
}
