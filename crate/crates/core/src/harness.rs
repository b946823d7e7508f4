//! Seeded experiment orchestration: builds environments and offline artifacts
//! from a single master seed, drives any of the four learners over a shared
//! context schedule, and reports regret, reward-call, and average-reward
//! metrics.
//!
//! One master seed fans out to named substreams (model, logging policy,
//! dataset, noise, online contexts, agent, offline-policy sampling), so two
//! runs that differ only in the algorithm see byte-identical environments.

use std::time::{Duration, Instant};

use nalgebra::DVector;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::agents::{opr_act, AgentError, AgentState, RewardSource, SkipReason, StepOutcome};
use crate::environ::{
    banditize, env_pull, gen_logging_policy, gen_offline_dataset, gen_synthetic_model, ingest_csv,
    split_dataset, BanditizedDataset, Contexts, EnvironError, LoggingPolicy, OfflineDataset,
    RewardModel,
};
use crate::linconf::{ConfidenceConfig, LinConfError};
use crate::offpolicy::{
    build_epsilon_support, percentile_clip_constant, solve_pi_plus, EpsilonSupport,
    OffPolicyError, RestrictedPolicy,
};

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("invalid run configuration: {}", .0.join("; "))]
    InvalidConfig(Vec<String>),
    #[error("trace alignment: {0}")]
    Alignment(String),
    #[error(transparent)]
    Environ(#[from] EnvironError),
    #[error(transparent)]
    OffPolicy(#[from] OffPolicyError),
    #[error(transparent)]
    Agent(#[from] AgentError),
    #[error(transparent)]
    Confidence(#[from] LinConfError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Algorithm {
    Moful,
    EpsMoful,
    EpsMofulIps,
    Opr,
}

impl Algorithm {
    pub fn as_str(&self) -> &'static str {
        match self {
            Algorithm::Moful => "moful",
            Algorithm::EpsMoful => "eps_moful",
            Algorithm::EpsMofulIps => "eps_moful_ips",
            Algorithm::Opr => "opr",
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DatasetSource {
    #[default]
    Synthetic,
    Csv {
        path: String,
        #[serde(default)]
        label_column: Option<usize>,
        #[serde(default = "default_true")]
        normalize: bool,
        #[serde(default = "default_split_fraction")]
        split_fraction: f64,
    },
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ClipRule {
    #[default]
    Percentile,
    Fixed(f64),
}

/// How a step that defers to the offline policy is scored: by a sample from
/// the restricted policy, or by the logged action itself.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Attribution {
    #[default]
    PiPlus,
    Logged,
}

fn default_true() -> bool {
    true
}

fn default_split_fraction() -> f64 {
    0.7
}

fn default_lambda() -> f64 {
    1.0
}

fn default_delta() -> f64 {
    0.05
}

/// Full description of one experiment; the map from config to metrics is a
/// pure function.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub algorithm: Algorithm,
    pub k: usize,
    pub d: usize,
    pub horizon: usize,
    #[serde(default)]
    pub n_ua: f64,
    #[serde(default)]
    pub l: usize,
    #[serde(default)]
    pub offline_size: usize,
    pub sigma: f64,
    #[serde(default = "default_lambda")]
    pub lambda: f64,
    #[serde(default = "default_delta")]
    pub delta: f64,
    pub s_x: f64,
    pub s_theta: f64,
    #[serde(default)]
    pub dataset_source: DatasetSource,
    #[serde(default)]
    pub noisy_rewards: bool,
    #[serde(default)]
    pub clip_m_rule: ClipRule,
    #[serde(default)]
    pub reward_call_budget: Option<u64>,
    #[serde(default)]
    pub below_threshold_attribution: Attribution,
    #[serde(default)]
    pub reward_clip: Option<(f64, f64)>,
}

impl RunConfig {
    /// Collect every invariant violation, qualified by field path.
    pub fn validate(&self) -> Result<(), Vec<String>> {
        let mut errs = Vec::new();
        if self.k == 0 {
            errs.push("k: must be at least 1".into());
        }
        if self.d == 0 {
            errs.push("d: must be at least 1".into());
        }
        if self.horizon == 0 {
            errs.push("horizon: must be at least 1".into());
        }
        if self.l > self.k {
            errs.push(format!("l: {} exceeds k={}", self.l, self.k));
        }
        if !(0.0..1.0).contains(&self.n_ua) {
            errs.push(format!("n_ua: {} outside [0, 1)", self.n_ua));
        }
        if !(self.sigma >= 0.0) || !self.sigma.is_finite() {
            errs.push("sigma: must be nonnegative and finite".into());
        }
        if !(self.lambda > 0.0) || !self.lambda.is_finite() {
            errs.push("lambda: must be positive and finite".into());
        }
        if !(self.delta > 0.0 && self.delta < 1.0) {
            errs.push(format!("delta: {} outside (0, 1)", self.delta));
        }
        if !(self.s_x > 0.0) || !self.s_x.is_finite() {
            errs.push("s_x: must be positive and finite".into());
        }
        if !(self.s_theta > 0.0) || !self.s_theta.is_finite() {
            errs.push("s_theta: must be positive and finite".into());
        }
        if let ClipRule::Fixed(m) = self.clip_m_rule {
            if !(m >= 1.0) || !m.is_finite() {
                errs.push(format!("clip_m_rule.fixed: {m} must be finite and >= 1"));
            }
        }
        if let DatasetSource::Csv { split_fraction, .. } = &self.dataset_source {
            if !(*split_fraction > 0.0 && *split_fraction < 1.0) {
                errs.push(format!(
                    "dataset_source.split_fraction: {split_fraction} outside (0, 1)"
                ));
            }
        }
        if self.algorithm == Algorithm::EpsMofulIps && self.offline_size == 0 {
            if matches!(self.dataset_source, DatasetSource::Synthetic) {
                errs.push("offline_size: eps_moful_ips requires at least 1".into());
            }
        }
        if self.algorithm == Algorithm::Opr
            && matches!(self.dataset_source, DatasetSource::Synthetic)
            && self.offline_size < self.horizon
        {
            errs.push(format!(
                "offline_size: opr needs every scheduled context logged ({} < horizon {})",
                self.offline_size, self.horizon
            ));
        }
        if let Some((lo, hi)) = self.reward_clip {
            if !(lo < hi) {
                errs.push(format!("reward_clip: empty interval [{lo}, {hi}]"));
            }
        }
        if errs.is_empty() {
            Ok(())
        } else {
            Err(errs)
        }
    }
}

/// Per-run results. `wall_time` is the only field outside the deterministic
/// config-to-metrics contract.
#[derive(Debug, Clone)]
pub struct RunMetrics {
    pub cumulative_regret: Vec<f64>,
    pub reward_calls: u64,
    pub below_threshold_skips: u64,
    pub epsilon_skips: u64,
    pub steps_executed: usize,
    pub average_reward: f64,
    pub classification_error: Option<f64>,
    pub wall_time: Duration,
}

impl RunMetrics {
    pub fn final_regret(&self) -> f64 {
        self.cumulative_regret.last().copied().unwrap_or(0.0)
    }

    /// Equality on everything except `wall_time`.
    pub fn same_results(&self, other: &RunMetrics) -> bool {
        self.cumulative_regret == other.cumulative_regret
            && self.reward_calls == other.reward_calls
            && self.below_threshold_skips == other.below_threshold_skips
            && self.epsilon_skips == other.epsilon_skips
            && self.steps_executed == other.steps_executed
            && self.average_reward == other.average_reward
            && self.classification_error == other.classification_error
    }
}

/// One executed step, in the order the run produced them.
#[derive(Debug, Clone, PartialEq)]
pub struct TraceRow {
    pub t: usize,
    pub context_id: usize,
    pub action: usize,
    pub reward_called: bool,
    pub skip_reason: SkipReason,
    pub optimistic_value: f64,
    pub instantaneous_regret: f64,
}

/// Serialize a trace with columns
/// `t,context_id,action,reward_called,skip_reason,optimistic_value,instantaneous_regret`.
pub fn write_trace_csv<W: std::io::Write>(
    rows: &[TraceRow],
    writer: W,
) -> Result<(), HarnessError> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record([
        "t",
        "context_id",
        "action",
        "reward_called",
        "skip_reason",
        "optimistic_value",
        "instantaneous_regret",
    ])
    .map_err(EnvironError::from)?;
    for row in rows {
        w.write_record(&[
            row.t.to_string(),
            row.context_id.to_string(),
            row.action.to_string(),
            row.reward_called.to_string(),
            row.skip_reason.as_str().to_string(),
            row.optimistic_value.to_string(),
            row.instantaneous_regret.to_string(),
        ])
        .map_err(EnvironError::from)?;
    }
    w.flush().map_err(EnvironError::from)?;
    Ok(())
}

// Substream labels for the master-seed fanout.
const STREAM_MODEL: u64 = 1;
const STREAM_POLICY: u64 = 2;
const STREAM_DATASET: u64 = 3;
const STREAM_NOISE: u64 = 4;
const STREAM_CONTEXTS: u64 = 5;
const STREAM_OPR: u64 = 6;

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn stream_rng(master: u64, stream: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(splitmix64(
        master ^ stream.wrapping_mul(0xA076_1D64_78BD_642F),
    ))
}

/// The exact best action and value under the hidden model: the scoring oracle
/// for regret and for all policy-value checks. Ties resolve to the lowest id.
pub fn oracle_policy_value(model: &RewardModel, x: &[f64]) -> (usize, f64) {
    let mut best = 0usize;
    let mut best_value = f64::NEG_INFINITY;
    for a in 0..model.k() {
        let v = model.mean_reward(x, a);
        if v > best_value {
            best_value = v;
            best = a;
        }
    }
    (best, best_value)
}

/// Fraction of trace steps whose action disagrees with the row label.
pub fn classification_error(
    trace: &[TraceRow],
    dataset: &BanditizedDataset,
    rows: &[usize],
) -> Result<f64, HarnessError> {
    if trace.len() != rows.len() {
        return Err(HarnessError::Alignment(format!(
            "trace has {} steps but {} rows were supplied",
            trace.len(),
            rows.len()
        )));
    }
    if trace.is_empty() {
        return Err(HarnessError::Alignment("empty trace".into()));
    }
    let wrong = trace
        .iter()
        .zip(rows)
        .filter(|(step, &row)| step.action != dataset.label(row))
        .count();
    Ok(wrong as f64 / trace.len() as f64)
}

// ---------------------------------------------------------------------------
// Environment assembly

struct Schedule {
    contexts: Contexts,
    ids: Vec<usize>,
    labels: Option<Vec<u32>>,
    // (from_online_split, row) per step, for banditized reward lookups.
    rows: Option<Vec<(bool, usize)>>,
    n_offline: usize,
}

impl Schedule {
    fn len(&self) -> usize {
        self.ids.len()
    }

    fn in_s(&self, step: usize) -> bool {
        self.ids[step] < self.n_offline
    }
}

struct Experiment {
    model: Option<RewardModel>,
    policy: LoggingPolicy,
    dataset: OfflineDataset,
    splits: Option<(BanditizedDataset, BanditizedDataset)>,
    schedule: Schedule,
}

fn build_experiment(cfg: &RunConfig) -> Result<Experiment, HarnessError> {
    let mut policy_rng = stream_rng(cfg.seed, STREAM_POLICY);
    let mut dataset_rng = stream_rng(cfg.seed, STREAM_DATASET);
    let mut contexts_rng = stream_rng(cfg.seed, STREAM_CONTEXTS);

    match &cfg.dataset_source {
        DatasetSource::Synthetic => {
            let mut model_rng = stream_rng(cfg.seed, STREAM_MODEL);
            let model = gen_synthetic_model(&mut model_rng, cfg.k, cfg.d, cfg.sigma)?
                .with_clip(cfg.reward_clip);
            let offline_contexts =
                Contexts::sample_uniform(&mut dataset_rng, cfg.offline_size, cfg.d);
            let policy =
                gen_logging_policy(&mut policy_rng, cfg.offline_size, cfg.k, cfg.n_ua)?;
            let dataset =
                gen_offline_dataset(&mut dataset_rng, &model, &policy, &offline_contexts)?;

            let n_offline = dataset.len();
            let from_s = n_offline.min(cfg.horizon);
            let mut sched_contexts = Contexts::with_capacity(cfg.d, cfg.horizon);
            let mut ids = Vec::with_capacity(cfg.horizon);
            for i in 0..from_s {
                sched_contexts.push(offline_contexts.row(i));
                ids.push(i);
            }
            for j in 0..cfg.horizon - from_s {
                let fresh: Vec<f64> = (0..cfg.d).map(|_| contexts_rng.random()).collect();
                sched_contexts.push(&fresh);
                ids.push(n_offline + j);
            }
            Ok(Experiment {
                model: Some(model),
                policy,
                dataset,
                splits: None,
                schedule: Schedule {
                    contexts: sched_contexts,
                    ids,
                    labels: None,
                    rows: None,
                    n_offline,
                },
            })
        }
        DatasetSource::Csv { path, label_column, normalize, split_fraction } => {
            let full = ingest_csv(std::path::Path::new(path), *label_column, *normalize)?;
            if full.k() != cfg.k {
                return Err(HarnessError::InvalidConfig(vec![format!(
                    "k: config says {} but {} has {} classes",
                    cfg.k,
                    full.source_name(),
                    full.k()
                )]));
            }
            if full.dim() != cfg.d {
                return Err(HarnessError::InvalidConfig(vec![format!(
                    "d: config says {} but {} has {} features",
                    cfg.d,
                    full.source_name(),
                    full.dim()
                )]));
            }
            let (part_a, part_b) = split_dataset(&full, *split_fraction, &mut dataset_rng)?;
            let n_offline = part_a.len();
            let policy = gen_logging_policy(&mut policy_rng, n_offline, cfg.k, cfg.n_ua)?;

            let s = policy.supported_count();
            let mut offline_contexts = Contexts::with_capacity(cfg.d, n_offline);
            let mut actions = Vec::with_capacity(n_offline);
            let mut rewards = Vec::with_capacity(n_offline);
            let mut propensities = Vec::with_capacity(n_offline);
            for i in 0..n_offline {
                offline_contexts.push(part_a.row(i));
                let supported = policy.supported_actions(i);
                let a = supported[dataset_rng.random_range(0..s)];
                let r = banditize(&part_a, a, i, cfg.noisy_rewards, &mut dataset_rng);
                actions.push(a as u32);
                rewards.push(r);
                propensities.push(1.0 / s as f64);
            }
            let dataset = OfflineDataset::from_parts(
                cfg.k,
                offline_contexts,
                (0..n_offline).collect(),
                actions,
                rewards,
                propensities,
            )?;

            if cfg.algorithm == Algorithm::Opr && cfg.horizon > n_offline {
                return Err(HarnessError::InvalidConfig(vec![format!(
                    "horizon: opr needs every scheduled context logged ({} offline rows < {})",
                    n_offline, cfg.horizon
                )]));
            }
            if cfg.horizon > n_offline && part_b.is_empty() {
                return Err(HarnessError::InvalidConfig(vec![
                    "horizon: exceeds the offline split and the online split is empty".into(),
                ]));
            }

            let from_s = n_offline.min(cfg.horizon);
            let mut sched_contexts = Contexts::with_capacity(cfg.d, cfg.horizon);
            let mut ids = Vec::with_capacity(cfg.horizon);
            let mut labels = Vec::with_capacity(cfg.horizon);
            let mut rows = Vec::with_capacity(cfg.horizon);
            for i in 0..from_s {
                sched_contexts.push(part_a.row(i));
                ids.push(i);
                labels.push(part_a.label(i) as u32);
                rows.push((false, i));
            }
            for j in 0..cfg.horizon - from_s {
                let row = contexts_rng.random_range(0..part_b.len());
                sched_contexts.push(part_b.row(row));
                ids.push(n_offline + j);
                labels.push(part_b.label(row) as u32);
                rows.push((true, row));
            }
            Ok(Experiment {
                model: None,
                policy,
                dataset,
                splits: Some((part_a, part_b)),
                schedule: Schedule {
                    contexts: sched_contexts,
                    ids,
                    labels: Some(labels),
                    rows: Some(rows),
                    n_offline,
                },
            })
        }
    }
}

/// Materialize the offline dataset a run with this configuration would see,
/// without running any learner. Deterministic in the seed.
pub fn build_offline_dataset(cfg: &RunConfig) -> Result<OfflineDataset, HarnessError> {
    cfg.validate().map_err(HarnessError::InvalidConfig)?;
    build_experiment(cfg).map(|exp| exp.dataset)
}

// ---------------------------------------------------------------------------
// Reward access with call counting

struct CountingEnv<'a> {
    model: Option<&'a RewardModel>,
    splits: Option<&'a (BanditizedDataset, BanditizedDataset)>,
    noisy: bool,
    noise: ChaCha8Rng,
    calls: u64,
}

struct StepEnv<'s, 'a> {
    env: &'s mut CountingEnv<'a>,
    x: &'s [f64],
    row: Option<(bool, usize)>,
}

impl RewardSource for StepEnv<'_, '_> {
    fn pull(&mut self, action: usize) -> f64 {
        self.env.calls += 1;
        if let Some(model) = self.env.model {
            env_pull(model, self.x, action, &mut self.env.noise)
        } else {
            let (from_online, row) = self.row.expect("banditized pull needs a row");
            let (part_a, part_b) = self.env.splits.expect("banditized pull needs the splits");
            let part = if from_online { part_b } else { part_a };
            banditize(part, action, row, self.env.noisy, &mut self.env.noise)
        }
    }
}

// ---------------------------------------------------------------------------
// The run loop

enum Learner {
    Agent(AgentState),
    Offline(RestrictedPolicy),
}

/// Run one experiment and return metrics plus the per-step trace.
pub fn run_experiment_traced(
    cfg: &RunConfig,
) -> Result<(RunMetrics, Vec<TraceRow>), HarnessError> {
    cfg.validate().map_err(HarnessError::InvalidConfig)?;
    let start = Instant::now();
    let exp = build_experiment(cfg)?;

    let support = match cfg.algorithm {
        Algorithm::EpsMoful | Algorithm::EpsMofulIps => Some(build_epsilon_support(
            &exp.dataset,
            cfg.l,
            exp.model.as_ref(),
        )?),
        Algorithm::Moful | Algorithm::Opr => None,
    };
    let pi_plus = match cfg.algorithm {
        Algorithm::EpsMofulIps | Algorithm::Opr => {
            let m = match cfg.clip_m_rule {
                ClipRule::Percentile => percentile_clip_constant(&exp.dataset)?,
                ClipRule::Fixed(v) => v,
            };
            Some(solve_pi_plus(&exp.dataset, &exp.policy, m)?)
        }
        Algorithm::Moful | Algorithm::EpsMoful => None,
    };

    let l_effective = support.as_ref().map_or(0, EpsilonSupport::len);
    let conf = ConfidenceConfig {
        sigma: cfg.sigma,
        delta: cfg.delta,
        s_x: cfg.s_x,
        s_theta: cfg.s_theta,
        arm_count_for_union: cfg.k - l_effective,
    };

    let mut learner = match cfg.algorithm {
        Algorithm::Moful => {
            Learner::Agent(AgentState::new_online(cfg.k, cfg.d, cfg.lambda, conf)?)
        }
        Algorithm::EpsMoful => Learner::Agent(AgentState::new_hybrid(
            cfg.k,
            cfg.d,
            cfg.lambda,
            conf,
            support.expect("built above"),
            None,
        )?),
        Algorithm::EpsMofulIps => Learner::Agent(AgentState::new_hybrid(
            cfg.k,
            cfg.d,
            cfg.lambda,
            conf,
            support.expect("built above"),
            pi_plus,
        )?),
        Algorithm::Opr => Learner::Offline(pi_plus.expect("built above")),
    };

    let mut env = CountingEnv {
        model: exp.model.as_ref(),
        splits: exp.splits.as_ref(),
        noisy: cfg.noisy_rewards,
        noise: stream_rng(cfg.seed, STREAM_NOISE),
        calls: 0,
    };
    let mut opr_rng = stream_rng(cfg.seed, STREAM_OPR);

    let mut trace = Vec::with_capacity(cfg.horizon);
    let mut cumulative_regret = Vec::with_capacity(cfg.horizon);
    let mut running_regret = 0.0;
    let mut below_threshold_skips = 0u64;
    let mut epsilon_skips = 0u64;

    for step in 0..exp.schedule.len() {
        if let Some(budget) = cfg.reward_call_budget {
            if env.calls >= budget {
                break;
            }
        }
        let context_id = exp.schedule.ids[step];
        let x_slice = exp.schedule.contexts.row(step);
        let row = exp.schedule.rows.as_ref().map(|r| r[step]);

        let (outcome, attributed) = match &mut learner {
            Learner::Offline(pi) => {
                let action = opr_act(pi, context_id, &mut opr_rng)?;
                let u = pi.u_value(context_id).expect("opr contexts are logged");
                let outcome = StepOutcome {
                    action,
                    reward_called: false,
                    reward: None,
                    skip_reason: SkipReason::BelowUThreshold,
                    optimistic_value: u,
                };
                (outcome, action)
            }
            Learner::Agent(agent) => {
                let x = DVector::from_column_slice(x_slice);
                let mut step_env = StepEnv { env: &mut env, x: x_slice, row };
                let outcome = match cfg.algorithm {
                    Algorithm::Moful => agent.moful_step(&x, &mut step_env)?,
                    Algorithm::EpsMoful => agent.eps_moful_step(&x, &mut step_env)?,
                    Algorithm::EpsMofulIps => {
                        let in_s = exp.schedule.in_s(step).then_some(context_id);
                        agent.eps_moful_ips_step(&x, in_s, &mut step_env)?
                    }
                    Algorithm::Opr => unreachable!("offline learner handled above"),
                };
                let attributed = if outcome.skip_reason == SkipReason::BelowUThreshold {
                    match cfg.below_threshold_attribution {
                        Attribution::PiPlus => {
                            let pi = agent.restricted().expect("threshold skip implies a policy");
                            opr_act(pi, context_id, &mut opr_rng)?
                        }
                        Attribution::Logged => exp
                            .dataset
                            .event_for_context(context_id)
                            .expect("threshold skip implies a logged context")
                            .action,
                    }
                } else {
                    outcome.action
                };
                (outcome, attributed)
            }
        };

        match outcome.skip_reason {
            SkipReason::None => {}
            SkipReason::BelowUThreshold => below_threshold_skips += 1,
            SkipReason::EpsilonSupported => epsilon_skips += 1,
        }

        let instantaneous_regret = match (&exp.model, &exp.schedule.labels) {
            (Some(model), _) => {
                let (_, best) = oracle_policy_value(model, x_slice);
                best - model.mean_reward(x_slice, attributed)
            }
            (None, Some(labels)) => {
                if attributed == labels[step] as usize {
                    0.0
                } else {
                    1.0
                }
            }
            (None, None) => unreachable!("every experiment has a model or labels"),
        };
        running_regret += instantaneous_regret;
        cumulative_regret.push(running_regret);
        trace.push(TraceRow {
            t: step + 1,
            context_id,
            action: attributed,
            reward_called: outcome.reward_called,
            skip_reason: outcome.skip_reason,
            optimistic_value: outcome.optimistic_value,
            instantaneous_regret,
        });
    }

    let average_reward = final_policy_value(cfg, &exp, &learner);
    let classification_error = exp.schedule.labels.as_ref().map(|labels| {
        let wrong = trace
            .iter()
            .enumerate()
            .filter(|(i, row)| row.action != labels[*i] as usize)
            .count();
        wrong as f64 / trace.len().max(1) as f64
    });

    let metrics = RunMetrics {
        steps_executed: trace.len(),
        cumulative_regret,
        reward_calls: env.calls,
        below_threshold_skips,
        epsilon_skips,
        average_reward,
        classification_error,
        wall_time: start.elapsed(),
    };
    Ok((metrics, trace))
}

/// Run one experiment and return its metrics.
pub fn run_experiment(cfg: &RunConfig) -> Result<RunMetrics, HarnessError> {
    run_experiment_traced(cfg).map(|(metrics, _)| metrics)
}

/// Mean true value of the learner's final exploitation policy over the run's
/// full context set. Online learners are scored by the argmax of their region
/// centers; the offline baseline by the exact expectation under its
/// distribution.
fn final_policy_value(cfg: &RunConfig, exp: &Experiment, learner: &Learner) -> f64 {
    let n = exp.schedule.len();
    if n == 0 {
        return 0.0;
    }
    let mut total = 0.0;
    for step in 0..n {
        let x_slice = exp.schedule.contexts.row(step);
        let value = match learner {
            Learner::Agent(agent) => {
                let x = DVector::from_column_slice(x_slice);
                let action = agent.greedy_action(&x);
                step_value(exp, step, action)
            }
            Learner::Offline(pi) => {
                let ctx = exp.schedule.ids[step];
                (0..cfg.k)
                    .map(|a| pi.probability(ctx, a).unwrap_or(0.0) * step_value(exp, step, a))
                    .sum()
            }
        };
        total += value;
    }
    total / n as f64
}

fn step_value(exp: &Experiment, step: usize, action: usize) -> f64 {
    match (&exp.model, &exp.schedule.labels) {
        (Some(model), _) => model.mean_reward(exp.schedule.contexts.row(step), action),
        (None, Some(labels)) => {
            if action == labels[step] as usize {
                1.0
            } else {
                0.0
            }
        }
        (None, None) => unreachable!("every experiment has a model or labels"),
    }
}

// ---------------------------------------------------------------------------
// Sweeps

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepAxis {
    L,
    NUa,
    Horizon,
}

impl SweepAxis {
    pub fn as_str(&self) -> &'static str {
        match self {
            SweepAxis::L => "l",
            SweepAxis::NUa => "n_ua",
            SweepAxis::Horizon => "horizon",
        }
    }

    fn apply(&self, cfg: &mut RunConfig, value: f64) -> Result<(), String> {
        match self {
            SweepAxis::L => {
                if value < 0.0 || value.fract() != 0.0 {
                    return Err(format!("sweep.values: l value {value} is not an integer"));
                }
                cfg.l = value as usize;
            }
            SweepAxis::NUa => cfg.n_ua = value,
            SweepAxis::Horizon => {
                if value < 1.0 || value.fract() != 0.0 {
                    return Err(format!(
                        "sweep.values: horizon value {value} is not a positive integer"
                    ));
                }
                cfg.horizon = value as usize;
            }
        }
        Ok(())
    }
}

/// One run inside a sweep.
#[derive(Debug, Clone)]
pub struct SweepRow {
    pub axis_value: f64,
    pub seed: u64,
    pub final_regret: f64,
    pub reward_calls: u64,
    pub t_doubleprime: u64,
    pub average_reward: f64,
    pub classification_error: Option<f64>,
}

/// Mean and population standard deviation per axis value.
#[derive(Debug, Clone)]
pub struct SweepSummary {
    pub axis_value: f64,
    pub mean_final_regret: f64,
    pub std_final_regret: f64,
    pub mean_reward_calls: f64,
    pub std_reward_calls: f64,
    pub mean_average_reward: f64,
    pub std_average_reward: f64,
}

#[derive(Debug, Clone)]
pub struct SweepTable {
    pub axis: SweepAxis,
    pub rows: Vec<SweepRow>,
    pub summaries: Vec<SweepSummary>,
}

impl SweepTable {
    /// Per-run rows: `axis_value,seed,final_regret,reward_calls,t_doubleprime,average_reward,classification_error`.
    pub fn write_rows_csv<W: std::io::Write>(&self, writer: W) -> Result<(), HarnessError> {
        let mut w = csv::Writer::from_writer(writer);
        w.write_record([
            "axis_value",
            "seed",
            "final_regret",
            "reward_calls",
            "t_doubleprime",
            "average_reward",
            "classification_error",
        ])
        .map_err(EnvironError::from)?;
        for row in &self.rows {
            w.write_record(&[
                row.axis_value.to_string(),
                row.seed.to_string(),
                row.final_regret.to_string(),
                row.reward_calls.to_string(),
                row.t_doubleprime.to_string(),
                row.average_reward.to_string(),
                row.classification_error.map(|e| e.to_string()).unwrap_or_default(),
            ])
            .map_err(EnvironError::from)?;
        }
        w.flush().map_err(EnvironError::from)?;
        Ok(())
    }

    /// Aggregates per axis value.
    pub fn write_summary_csv<W: std::io::Write>(&self, writer: W) -> Result<(), HarnessError> {
        let mut w = csv::Writer::from_writer(writer);
        w.write_record([
            "axis_value",
            "mean_final_regret",
            "std_final_regret",
            "mean_reward_calls",
            "std_reward_calls",
            "mean_average_reward",
            "std_average_reward",
        ])
        .map_err(EnvironError::from)?;
        for s in &self.summaries {
            w.write_record(&[
                s.axis_value.to_string(),
                s.mean_final_regret.to_string(),
                s.std_final_regret.to_string(),
                s.mean_reward_calls.to_string(),
                s.std_reward_calls.to_string(),
                s.mean_average_reward.to_string(),
                s.std_average_reward.to_string(),
            ])
            .map_err(EnvironError::from)?;
        }
        w.flush().map_err(EnvironError::from)?;
        Ok(())
    }
}

fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// Run `repeats` seeded repetitions of `base` at each axis value. Runs execute
/// in parallel; rows come back sorted by (value index, seed).
pub fn run_sweep(
    base: &RunConfig,
    axis: SweepAxis,
    values: &[f64],
    repeats: usize,
) -> Result<SweepTable, HarnessError> {
    if values.is_empty() || repeats == 0 {
        return Err(HarnessError::InvalidConfig(vec![
            "sweep: needs at least one value and one repeat".into(),
        ]));
    }
    let mut jobs = Vec::with_capacity(values.len() * repeats);
    for (vi, &value) in values.iter().enumerate() {
        let mut cfg = base.clone();
        axis.apply(&mut cfg, value)
            .map_err(|e| HarnessError::InvalidConfig(vec![e]))?;
        for rep in 0..repeats {
            let mut cfg = cfg.clone();
            cfg.seed = base.seed.wrapping_add(rep as u64);
            jobs.push((vi, value, cfg));
        }
    }
    let rows: Vec<SweepRow> = jobs
        .par_iter()
        .map(|(_, value, cfg)| {
            run_experiment(cfg).map(|metrics| SweepRow {
                axis_value: *value,
                seed: cfg.seed,
                final_regret: metrics.final_regret(),
                reward_calls: metrics.reward_calls,
                t_doubleprime: metrics.below_threshold_skips,
                average_reward: metrics.average_reward,
                classification_error: metrics.classification_error,
            })
        })
        .collect::<Result<Vec<_>, _>>()?;

    let mut summaries = Vec::with_capacity(values.len());
    for (vi, &value) in values.iter().enumerate() {
        let chunk = &rows[vi * repeats..(vi + 1) * repeats];
        let (mean_final_regret, std_final_regret) =
            mean_std(&chunk.iter().map(|r| r.final_regret).collect::<Vec<_>>());
        let (mean_reward_calls, std_reward_calls) =
            mean_std(&chunk.iter().map(|r| r.reward_calls as f64).collect::<Vec<_>>());
        let (mean_average_reward, std_average_reward) =
            mean_std(&chunk.iter().map(|r| r.average_reward).collect::<Vec<_>>());
        summaries.push(SweepSummary {
            axis_value: value,
            mean_final_regret,
            std_final_regret,
            mean_reward_calls,
            std_reward_calls,
            mean_average_reward,
            std_average_reward,
        });
    }
    Ok(SweepTable { axis, rows, summaries })
}
