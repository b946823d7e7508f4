//! Offline estimators and offline-derived objects: plain and clipped IPS,
//! the support-deficiency bias diagnostic, the clipped-IPS-optimal restricted
//! policy, and the set of actions learnable from logged data alone.

use std::collections::{BTreeMap, BTreeSet};
use std::io;

use nalgebra::{Cholesky, DMatrix, DVector};
use rand::Rng;
use thiserror::Error;

use crate::environ::{
    gen_offline_dataset, ContextIndex, Contexts, EnvironError, LoggingPolicy, OfflineDataset,
    RewardModel,
};

#[derive(Debug, Error)]
pub enum OffPolicyError {
    #[error("corrupted dataset: {0}")]
    CorruptedDataset(String),
    #[error("insufficient support for action {action}: {message}")]
    InsufficientSupport { action: usize, message: String },
    #[error("unknown context id {0}")]
    MissingContext(usize),
    #[error("invalid input: {0}")]
    InvalidInput(String),
    #[error(transparent)]
    Environ(#[from] EnvironError),
}

/// Anything that can report the probability a target policy assigns to an
/// action at a logged context.
pub trait TargetPolicy {
    fn prob(&self, context_id: usize, action: usize) -> f64;
}

impl<F: Fn(usize, usize) -> f64> TargetPolicy for F {
    fn prob(&self, context_id: usize, action: usize) -> f64 {
        self(context_id, action)
    }
}

/// Plain importance-weighted value estimate
/// `(1/n) sum pi(a_i|x_i)/mu(a_i|x_i) * r_i`.
pub fn ips_value(
    dataset: &OfflineDataset,
    pi: &impl TargetPolicy,
) -> Result<f64, OffPolicyError> {
    if dataset.is_empty() {
        return Err(OffPolicyError::InvalidInput("empty dataset".into()));
    }
    let mut total = 0.0;
    for ev in dataset.iter() {
        if ev.propensity <= 0.0 {
            return Err(OffPolicyError::CorruptedDataset(format!(
                "context {}: logged propensity {} is not positive",
                ev.context_id, ev.propensity
            )));
        }
        total += pi.prob(ev.context_id, ev.action) / ev.propensity * ev.reward;
    }
    Ok(total / dataset.len() as f64)
}

/// Clipped importance-weighted value estimate
/// `(1/n) sum r_i * min(pi/mu, m)`.
pub fn clipped_ips_value(
    dataset: &OfflineDataset,
    pi: &impl TargetPolicy,
    m: f64,
) -> Result<f64, OffPolicyError> {
    if dataset.is_empty() {
        return Err(OffPolicyError::InvalidInput("empty dataset".into()));
    }
    if !(m > 0.0) {
        return Err(OffPolicyError::InvalidInput("clip constant must be positive".into()));
    }
    let mut total = 0.0;
    for ev in dataset.iter() {
        if ev.propensity <= 0.0 {
            return Err(OffPolicyError::CorruptedDataset(format!(
                "context {}: logged propensity {} is not positive",
                ev.context_id, ev.propensity
            )));
        }
        let ratio = pi.prob(ev.context_id, ev.action) / ev.propensity;
        total += ev.reward * ratio.min(m);
    }
    Ok(total / dataset.len() as f64)
}

/// Side-by-side Monte Carlo and closed-form bias of the plain IPS estimator.
#[derive(Debug, Clone, Copy)]
pub struct BiasReport {
    pub empirical_bias: f64,
    pub formula_bias: f64,
    pub n_samples: usize,
}

/// Measure the IPS bias on an enumerable context set.
///
/// The closed form is the negated expected target-policy reward mass sitting
/// on unsupported actions; the empirical side averages `ips_value - R(pi)`
/// across `n_mc` freshly simulated datasets (one event per context each).
pub fn ips_bias_report(
    model: &RewardModel,
    policy_mu: &LoggingPolicy,
    pi: &impl TargetPolicy,
    contexts: &Contexts,
    n_mc: usize,
    rng: &mut impl Rng,
) -> Result<BiasReport, OffPolicyError> {
    let n = contexts.len();
    if n == 0 || n_mc == 0 {
        return Err(OffPolicyError::InvalidInput("need contexts and n_mc >= 1".into()));
    }
    let k = model.k();
    let mut true_value = 0.0;
    let mut formula_bias = 0.0;
    for (ctx, x) in contexts.iter().enumerate() {
        for a in 0..k {
            let p = pi.prob(ctx, a);
            let delta = model.mean_reward(x, a);
            true_value += p * delta;
            if !policy_mu.is_supported(ctx, a) {
                formula_bias -= p * delta;
            }
        }
    }
    true_value /= n as f64;
    formula_bias /= n as f64;

    let mut mean_estimate = 0.0;
    for _ in 0..n_mc {
        let dataset = gen_offline_dataset(rng, model, policy_mu, contexts)?;
        mean_estimate += ips_value(&dataset, pi)?;
    }
    mean_estimate /= n_mc as f64;

    Ok(BiasReport {
        empirical_bias: mean_estimate - true_value,
        formula_bias,
        n_samples: n_mc,
    })
}

/// Clip constant from the logged propensities: 90th percentile over 10th,
/// percentiles by linear interpolation between closest ranks.
pub fn percentile_clip_constant(dataset: &OfflineDataset) -> Result<f64, OffPolicyError> {
    if dataset.is_empty() {
        return Err(OffPolicyError::InvalidInput("empty dataset".into()));
    }
    let mut props: Vec<f64> = dataset.iter().map(|ev| ev.propensity).collect();
    props.sort_by(|a, b| a.partial_cmp(b).expect("propensities are finite"));
    let interp = |p: f64| -> f64 {
        let h = (props.len() - 1) as f64 * p;
        let lo = h.floor() as usize;
        let frac = h - lo as f64;
        if lo + 1 < props.len() {
            props[lo] + frac * (props[lo + 1] - props[lo])
        } else {
            props[lo]
        }
    };
    Ok(interp(0.90) / interp(0.10))
}

/// The clipped-IPS-optimal policy over the logging policy's supported actions.
///
/// Per logged context the optimum is closed-form: with a positive logged
/// reward the logged action takes mass `min(m * mu, 1)` and the residual is
/// spread uniformly over the remaining supported actions; otherwise the
/// distribution is uniform over supported actions. `u_values` caches each
/// context's comparison threshold `r_i * min(pi+/mu, m)`.
#[derive(Debug, Clone)]
pub struct RestrictedPolicy {
    k: usize,
    clip_m: f64,
    context_ids: Vec<usize>,
    index: ContextIndex,
    logged_action: Vec<u32>,
    logged_mass: Vec<f64>,
    u_values: Vec<f64>,
    unsupported_per_context: usize,
    unsupported: Vec<u16>,
}

impl RestrictedPolicy {
    pub fn k(&self) -> usize {
        self.k
    }

    pub fn clip_m(&self) -> f64 {
        self.clip_m
    }

    pub fn len(&self) -> usize {
        self.context_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.context_ids.is_empty()
    }

    pub fn context_ids(&self) -> &[usize] {
        &self.context_ids
    }

    pub fn contains_context(&self, context_id: usize) -> bool {
        self.index.get(context_id).is_some()
    }

    fn row_unsupported(&self, row: usize) -> &[u16] {
        let u = self.unsupported_per_context;
        &self.unsupported[row * u..(row + 1) * u]
    }

    /// Probability the policy assigns to `action` at a known context.
    pub fn probability(&self, context_id: usize, action: usize) -> Option<f64> {
        let row = self.index.get(context_id)?;
        if self.row_unsupported(row).binary_search(&(action as u16)).is_ok() {
            return Some(0.0);
        }
        let s = self.k - self.unsupported_per_context;
        if action == self.logged_action[row] as usize {
            Some(self.logged_mass[row])
        } else {
            Some((1.0 - self.logged_mass[row]) / (s - 1) as f64)
        }
    }

    /// Full action distribution at a known context.
    pub fn distribution(&self, context_id: usize) -> Option<Vec<f64>> {
        self.index.get(context_id)?;
        Some(
            (0..self.k)
                .map(|a| self.probability(context_id, a).expect("context checked"))
                .collect(),
        )
    }

    /// The cached comparison threshold for a known context.
    pub fn u_value(&self, context_id: usize) -> Option<f64> {
        self.index.get(context_id).map(|row| self.u_values[row])
    }

    /// Sample an action from the policy's distribution at a known context.
    pub fn sample(&self, context_id: usize, rng: &mut impl Rng) -> Result<usize, OffPolicyError> {
        let row = self
            .index
            .get(context_id)
            .ok_or(OffPolicyError::MissingContext(context_id))?;
        let draw: f64 = rng.random();
        let logged = self.logged_action[row] as usize;
        let mass = self.logged_mass[row];
        if draw < mass {
            return Ok(logged);
        }
        let unsup = self.row_unsupported(row);
        let s = self.k - self.unsupported_per_context;
        if s <= 1 {
            return Ok(logged);
        }
        let residual_each = (1.0 - mass) / (s - 1) as f64;
        let mut acc = mass;
        let mut last_supported = logged;
        for a in 0..self.k {
            if a == logged || unsup.binary_search(&(a as u16)).is_ok() {
                continue;
            }
            acc += residual_each;
            last_supported = a;
            if draw < acc {
                return Ok(a);
            }
        }
        Ok(last_supported)
    }

    /// Serialize as CSV with columns `context_id,action,probability,u_value`.
    pub fn write_csv<W: io::Write>(&self, writer: W) -> Result<(), OffPolicyError> {
        let mut w = csv::Writer::from_writer(writer);
        w.write_record(["context_id", "action", "probability", "u_value"])
            .map_err(EnvironError::from)?;
        for &ctx in &self.context_ids {
            let u = self.u_value(ctx).expect("own context");
            for a in 0..self.k {
                let p = self.probability(ctx, a).expect("own context");
                w.write_record(&[
                    ctx.to_string(),
                    a.to_string(),
                    p.to_string(),
                    u.to_string(),
                ])
                .map_err(EnvironError::from)?;
            }
        }
        w.flush().map_err(EnvironError::from)?;
        Ok(())
    }

    /// Check the distribution and ratio-cap invariants on every context.
    pub fn validate(&self, policy_mu: &LoggingPolicy) -> Result<(), OffPolicyError> {
        for (row, &ctx) in self.context_ids.iter().enumerate() {
            let mut total = 0.0;
            for a in 0..self.k {
                let p = self.probability(ctx, a).expect("own context");
                let mu = policy_mu.propensity(ctx, a);
                if mu == 0.0 && p != 0.0 {
                    return Err(OffPolicyError::CorruptedDataset(format!(
                        "context {ctx}: mass {p} on unsupported action {a}"
                    )));
                }
                if mu > 0.0 && p / mu > self.clip_m + 1e-12 {
                    return Err(OffPolicyError::CorruptedDataset(format!(
                        "context {ctx}: ratio {} exceeds clip {}",
                        p / mu,
                        self.clip_m
                    )));
                }
                total += p;
            }
            if (total - 1.0).abs() > 1e-12 {
                return Err(OffPolicyError::CorruptedDataset(format!(
                    "context {ctx}: probabilities sum to {total}"
                )));
            }
            let _ = row;
        }
        Ok(())
    }
}

impl TargetPolicy for RestrictedPolicy {
    fn prob(&self, context_id: usize, action: usize) -> f64 {
        self.probability(context_id, action).unwrap_or(0.0)
    }
}

/// Maximize the clipped IPS objective over policies sharing the logging
/// policy's support. The objective decomposes per context and touches only
/// the logged action, so the solution is closed-form.
pub fn solve_pi_plus(
    dataset: &OfflineDataset,
    policy_mu: &LoggingPolicy,
    m: f64,
) -> Result<RestrictedPolicy, OffPolicyError> {
    if !(m >= 1.0) || !m.is_finite() {
        return Err(OffPolicyError::InvalidInput(format!(
            "clip constant must be finite and >= 1, got {m}"
        )));
    }
    if dataset.k() != policy_mu.k() {
        return Err(OffPolicyError::InvalidInput("dataset and policy disagree on k".into()));
    }
    let n = dataset.len();
    let u = policy_mu.unsupported_per_context();
    let s = policy_mu.supported_count();
    let mut context_ids = Vec::with_capacity(n);
    let mut logged_action = Vec::with_capacity(n);
    let mut logged_mass = Vec::with_capacity(n);
    let mut u_values = Vec::with_capacity(n);
    let mut unsupported = Vec::with_capacity(n * u);
    for ev in dataset.iter() {
        if ev.context_id >= policy_mu.n_contexts() {
            return Err(OffPolicyError::MissingContext(ev.context_id));
        }
        let mass = if ev.reward > 0.0 {
            (m * ev.propensity).min(1.0)
        } else {
            1.0 / s as f64
        };
        let threshold = ev.reward * (mass / ev.propensity).min(m);
        context_ids.push(ev.context_id);
        logged_action.push(ev.action as u32);
        logged_mass.push(mass);
        u_values.push(threshold);
        unsupported.extend_from_slice(policy_mu.unsupported(ev.context_id));
    }
    let contiguous = context_ids.iter().enumerate().all(|(i, &c)| c == i);
    let index = if contiguous {
        ContextIndex::Contiguous(n)
    } else {
        let mut map = std::collections::HashMap::with_capacity(n);
        for (i, &c) in context_ids.iter().enumerate() {
            map.insert(c, i);
        }
        ContextIndex::Sparse(map)
    };
    Ok(RestrictedPolicy {
        k: dataset.k(),
        clip_m: m,
        context_ids,
        index,
        logged_action,
        logged_mass,
        u_values,
        unsupported_per_context: u,
        unsupported,
    })
}

/// Actions whose parameters are pinned to offline estimates, with the
/// estimates themselves and an optional ground-truth error diagnostic.
#[derive(Debug, Clone)]
pub struct EpsilonSupport {
    actions: BTreeSet<usize>,
    learned: BTreeMap<usize, DVector<f64>>,
    epsilon_hat: Option<f64>,
}

impl EpsilonSupport {
    pub fn empty() -> Self {
        Self { actions: BTreeSet::new(), learned: BTreeMap::new(), epsilon_hat: None }
    }

    pub fn actions(&self) -> &BTreeSet<usize> {
        &self.actions
    }

    pub fn len(&self) -> usize {
        self.actions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.actions.is_empty()
    }

    pub fn contains(&self, action: usize) -> bool {
        self.actions.contains(&action)
    }

    pub fn learned(&self, action: usize) -> Option<&DVector<f64>> {
        self.learned.get(&action)
    }

    pub fn epsilon_hat(&self) -> Option<f64> {
        self.epsilon_hat
    }
}

/// Estimate the `l` most-logged actions from the dataset by per-action
/// least squares, `((1/N_a) sum x x^T)^-1 ((1/N_a) sum x r)`.
///
/// Ties in the per-action counts resolve to the lower action id. When the
/// ground-truth model is supplied, `epsilon_hat` records the worst parameter
/// error across the chosen actions.
pub fn build_epsilon_support(
    dataset: &OfflineDataset,
    l: usize,
    model_for_diagnostics: Option<&RewardModel>,
) -> Result<EpsilonSupport, OffPolicyError> {
    let k = dataset.k();
    if l > k {
        return Err(OffPolicyError::InvalidInput(format!("l={l} exceeds k={k}")));
    }
    if l == 0 {
        return Ok(EpsilonSupport::empty());
    }
    let d = dataset.dim();
    let mut order: Vec<usize> = (0..k).collect();
    let counts = dataset.per_action_counts();
    order.sort_by_key(|&a| (std::cmp::Reverse(counts[a]), a));
    let chosen: BTreeSet<usize> = order[..l].iter().copied().collect();

    let mut grams: BTreeMap<usize, DMatrix<f64>> =
        chosen.iter().map(|&a| (a, DMatrix::zeros(d, d))).collect();
    let mut moments: BTreeMap<usize, DVector<f64>> =
        chosen.iter().map(|&a| (a, DVector::zeros(d))).collect();
    for ev in dataset.iter() {
        if let Some(gram) = grams.get_mut(&ev.action) {
            let x = DVector::from_column_slice(ev.x);
            gram.ger(1.0, &x, &x, 1.0);
            moments.get_mut(&ev.action).expect("same keys").axpy(ev.reward, &x, 1.0);
        }
    }

    let mut learned = BTreeMap::new();
    let mut epsilon_hat: Option<f64> = None;
    for &a in &chosen {
        let n_a = counts[a];
        if n_a < d {
            return Err(OffPolicyError::InsufficientSupport {
                action: a,
                message: format!("{n_a} events for dimension {d}"),
            });
        }
        let scale = 1.0 / n_a as f64;
        let gram = &grams[&a] * scale;
        let moment = &moments[&a] * scale;
        let theta = Cholesky::new(gram.clone())
            .map(|c| c.solve(&moment))
            .or_else(|| gram.lu().solve(&moment))
            .ok_or_else(|| OffPolicyError::InsufficientSupport {
                action: a,
                message: "singular second-moment matrix".into(),
            })?;
        if let Some(model) = model_for_diagnostics {
            let err = (&theta - model.theta(a)).norm();
            epsilon_hat = Some(epsilon_hat.map_or(err, |e: f64| e.max(err)));
        }
        learned.insert(a, theta);
    }
    Ok(EpsilonSupport { actions: chosen, learned, epsilon_hat })
}
