//! Metrics, run reports, comparisons, sign tables and representation export.

pub mod auc;
pub mod export;
pub mod probe;
pub mod report;
pub mod score;
pub mod sign;

pub use auc::{auc, auc_u8};
pub use export::export_representations;
pub use probe::{disentanglement_probe, linear_probe_accuracy, ProbeConfig, ProbeResult};
pub use report::{compare_runs, GainTable, RunReport, REPORT_FORMAT};
pub use score::{evaluate_auc, predict_dataset};
pub use sign::{build_sign_table, Sign, SignTable};
