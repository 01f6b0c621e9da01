//! Configuration, evaluation, the staged training protocol and run
//! comparison.

mod compare;
mod config;
mod eval;
mod metrics;
mod protocol;
pub mod report;

pub use compare::{compare_runs, CompareRow, Comparison};
pub use config::{ClusterConfig, ExperimentConfig, ProtocolConfig, StageSeeds, StreamOrder, DESK_TOML};
pub use eval::{evaluate, predict_split, EvalMode};
pub use metrics::{median, miou, ConfusionMatrix, IouReport};
pub use protocol::{
    cluster_stage, eval_online, eval_stage, fuse_stage, gen_data, load_cluster, load_data,
    run_protocol, source_only_stage, split_stage, Artifacts, ClusterPaths, FusePaths,
    OnlineResult, RunLayout,
};
