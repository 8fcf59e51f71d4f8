//! AUROC, sweep and generalization experiment runners, and CSV reports.

mod metrics;
mod report;
mod sweep;

pub use metrics::auroc;
pub use report::{emit_report, jsonl_path, read_report, sort_reports, EvalReport, SplitKind, REPORT_COLUMNS};
pub use sweep::{
    evaluate_on_test, fit_method, max_train_positives, mean_over_seeds, run_c_sweep, run_cq_grid, run_few_shot_sweep,
    run_generalization, run_layer_sweep, run_q_sweep, run_scaling_sweep, run_sweep, substitute, ExperimentData,
    FittedMethod, GridAxis, MethodKind, MethodSpec, PooledFeatures, SweepAxis, SweepSpec,
};
