//! Evaluation metrics and the ablation machinery around expert routing and adapter
//! composition.

pub mod baseline;
pub mod experiment;
pub mod gradcheck;
pub mod metrics;
pub mod routing;

pub use baseline::{build_parallel_lora_baseline, drop_one, run_parallel_baseline, zero_branch};
pub use experiment::{prepare_base, run_seed, DeskConfig, DeskReport, SeedOutcome, SeedRun, F1_TARGET};
pub use gradcheck::{gradcheck_pipeline, gradcheck_setup, GradcheckResult};
pub use metrics::{
    eval_format_counts, eval_format_score, eval_mc_accuracy, eval_mc_accuracy_with, f1_counts,
    greedy_decode, micro_f1, target_log_likelihoods, F1Counts,
};
pub use routing::{
    forced_pair_eval, mismatch_summary, pair_performance, ranks, route_stats, spearman,
    ActivationMatrix, MismatchSummary, PairMatrix,
};
