//! Average precision, mAP, model evaluation and the ablation harness.

mod ablation;
mod ap;
mod evaluate;
mod report;

pub use ablation::{
    run_ablation, table_title, table_variants, variant_from_label, AblationData, AblationSpec, BlockFlags,
    DatasetMode, DomainMode, RunCache, Variant,
};
pub use ap::{ap_from_flags, compute_ap, compute_map, rank_order, ApMode, ApOutcome, ClassDetection};
pub use evaluate::{
    domain_accuracy, evaluate, evaluate_detections, evaluate_samples, oracle_detections, predict,
    predict_samples, ClassCounts, DetectionRecord, EvalConfig, EvalOutput, EvalResult, ImageEval,
};
pub use report::{percent, ResultsTable, TableRow, TABLE_COLUMNS};
