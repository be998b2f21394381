//! Metrics, ablations, sweeps and timing.

mod ablation;
mod experiment;
mod metrics;
mod report;
mod timing;

pub use ablation::{
    ablation_table, run_ablation, sample_efficiency, sweep_n_meta, AblationRow, Variant, DEFAULT_N_META_GRID,
};
pub use experiment::{test_scores, train_crm_on, tune_plora, CellRun, Experiment};
pub use metrics::{auc, log_loss, paired_bootstrap, rel_impr, BootstrapResult};
pub use report::{curve_csv, CurvePoint, MetricsFile, MetricsReport, PRIMARY};
pub use timing::{timing_harness, timing_table, TimingCell, TimingOptions, DEFAULT_TIMING_GRID};
