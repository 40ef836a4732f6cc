//! Experiment runner: configuration, single runs, the ablation grid and
//! embedding comparisons. The `rcl` binary is a thin CLI over this module.

mod config;
mod run;

pub use config::{Combination, DatasetConfig, ExperimentConfig, ExperimentSection, TrainSection};
pub use run::{
    compare_embeddings, evaluate, export_embeddings, make_splits, median, prepare_dir,
    read_embeddings, run_ablation, run_dir, run_single, AblationCell, AblationReport, CellMetrics,
    Comparison, RowMedians, RunOutput, Splits, ABLATION_TABLE_FILE, ABLATION_TSV_FILE,
    CHECKPOINT_FILE, CONFIG_FILE, EMBEDDINGS_FILE, HISTORY_FILE, METRICS_FILE,
};
