//! Detection metrics and experiment reports.

mod metrics;
mod report;

pub use metrics::{compute_ap, compute_seqasr, match_detections, sequence_detected, ScoredBox, MATCH_IOU};
pub use report::{
    eval_sequences, evaluate_texture, reports_csv, reports_table, sweep, EvalReport, ThresholdRow, AP_CONVENTION, THRESHOLDS,
};
