//! Instruction and trajectory metrics, rollout aggregation, PCA export and
//! the paired statistics behind the evaluation.

pub mod pca;
pub mod report;
pub mod stats;
pub mod text;
pub mod traj;

pub use pca::{pca_project, Projection};
pub use report::{
    evaluate_run, parse_rollouts, rollout_grounding_scores, rollout_rows, row_metrics,
    write_rollouts, ReportRow, RolloutRow, RowMetrics,
};
pub use stats::{binomial_upper_tail, mean_std, sign_test, SignTest};
pub use text::{bleu, meteor, normalize, rouge1_f1};
pub use traj::{traj_metrics, TrajMetrics};
