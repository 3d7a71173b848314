//! Training pipelines, closed-loop evaluation and the regression baseline.

mod ablate;
mod baseline;
mod ema;
mod eval;
mod norm;
mod overrides;
mod train;
mod windows;

pub use ablate::{ablate_scales, ablation_csv, AblationConfig, AblationRow};
pub use baseline::{train_baseline, BaselineChunkRegressor, BaselineConfig};
pub use ema::EmaShadow;
pub use eval::{
    eval_reset_seed, evaluate, measure_latency, record_ema_comparison, Agent, BaselineAgent, CarpAgent, EpisodeRecord, EvalMetrics, EvalOptions, EvalReport,
    ExpertAgent, LatencyReport, ModeCounts, Plan, TrajectoryRow, EXECUTE,
};
pub use norm::NormStats;
pub use overrides::parse_overrides;
pub use train::{
    fit_norm, policy_config, train_policy_stage, train_tokenizer_stage, PolicyTrainConfig, TokenizerSet, TokenizerTrainConfig, TrainReport,
    TrainedPolicy,
};
pub use windows::{make_windows, Window};
