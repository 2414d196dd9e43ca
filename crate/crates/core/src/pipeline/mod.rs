//! Two-stage training, leave-one-domain-out evaluation, ablations and
//! reporting.

pub mod batch;
pub mod checkpoint;
pub mod config;
pub mod report;
pub mod run;
pub mod train;

pub use checkpoint::Checkpoint;
pub use config::{Switches, TrainConfig};
pub use run::{
    evaluate, latent_domains, run_ablation, run_fold, AblationReport, AblationRow,
    DiscoveryQuality, FoldMetrics, FoldOutcome,
};
pub use train::{
    total_loss, total_loss_graph, train_stage1, train_stage2, EpochLog, Stage1Result, Stage2Inputs,
    Stage2Result,
};
