//! Segmentation metrics and the ablation runner.

mod ablation;
mod metrics;
mod refine;

pub use ablation::{
    config_hash, median, registry, row_names, run_ablation, select_rows, text_digest, AblationReport, AblationRow,
    RowMetrics, RowOutcome, SceneContext, SuiteConfig,
};
pub use metrics::{confusion, latent_separation, miou, ConfusionMatrix};
pub use refine::{refine_report, RefineReport, ViewRefineStats};
