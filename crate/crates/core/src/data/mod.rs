//! Feature schemas, encoded datasets, the Census loader, the synthetic
//! generator and label correlation statistics.

pub mod census;
pub mod dataset;
pub mod schema;
pub mod stats;
pub mod synthetic;

pub use dataset::{ordered_batches, shuffled_batches, validation_split, Dataset, ExampleBatch};
pub use schema::{ColumnKind, ColumnSpec, FeatureSchema};
pub use stats::{correlation_table, label_correlation, pearson_correlation, CorrelationEntry};
pub use synthetic::{generate_synthetic, SyntheticSpec};
