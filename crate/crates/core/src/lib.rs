//! Hybrid offline/online policy learning for linear contextual bandits whose
//! logged data has deficient support.
//!
//! The crate provides:
//!
//! - [`linconf`]: per-action ridge statistics with incrementally maintained
//!   inverses and optimistic confidence regions;
//! - [`environ`]: synthetic disjoint-linear reward environments, uniform
//!   deficient-support logging policies, offline dataset generation, and
//!   multiclass-to-bandit conversion;
//! - [`offpolicy`]: plain and clipped importance-weighted value estimates, a
//!   support-deficiency bias diagnostic, the clipped-IPS-optimal restricted
//!   policy, and per-action offline least-squares estimates;
//! - [`agents`]: the fully online optimistic learner, two hybrid learners
//!   that skip reward calls using offline knowledge, and the fully offline
//!   baseline;
//! - [`harness`]: seeded experiment orchestration, regret and reward-call
//!   accounting, and parameter sweeps.

pub mod agents;
pub mod environ;
pub mod harness;
pub mod linconf;
pub mod offpolicy;

pub use agents::{opr_act, AgentError, AgentState, RewardSource, SkipReason, StepOutcome};
pub use environ::{
    banditize, env_pull, gen_logging_policy, gen_offline_dataset, gen_synthetic_model, ingest_csv,
    split_dataset, BanditizedDataset, Contexts, EnvironError, LoggedEvent, LoggingPolicy,
    OfflineDataset, RewardModel,
};
pub use harness::{
    build_offline_dataset, classification_error, oracle_policy_value, run_experiment,
    run_experiment_traced, run_sweep, write_trace_csv, Algorithm, Attribution, ClipRule,
    DatasetSource, HarnessError, RunConfig, RunMetrics, SweepAxis, SweepRow, SweepSummary,
    SweepTable, TraceRow,
};
pub use linconf::{beta_radius, ConfidenceConfig, ConfidenceSet, DesignState, LinConfError};
pub use offpolicy::{
    build_epsilon_support, clipped_ips_value, ips_bias_report, ips_value,
    percentile_clip_constant, solve_pi_plus, BiasReport, EpsilonSupport, OffPolicyError,
    RestrictedPolicy, TargetPolicy,
};
