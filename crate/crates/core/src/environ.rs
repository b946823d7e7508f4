//! Ground-truth environments, deficient-support logging policies, offline
//! dataset generation, and multiclass dataset ingestion.
//!
//! Logging policies here are uniform over their supported actions: each
//! context gets a fixed-size set of unsupported actions (propensity zero) and
//! the remaining actions share probability `1 / supported_count`. Offline
//! datasets hold one logged event per context id; context identity is always
//! the integer id, never floating-point equality of the vectors.

use std::collections::HashMap;
use std::io;
use std::path::Path;

use nalgebra::DVector;
use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum EnvironError {
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("ingestion error at row {row}: {message}")]
    Ingestion { row: usize, message: String },
    #[error("corrupted dataset: {0}")]
    CorruptedDataset(String),
    #[error("io error: {0}")]
    Io(#[from] io::Error),
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
}

/// Dense row-major context storage.
#[derive(Debug, Clone, PartialEq)]
pub struct Contexts {
    dim: usize,
    data: Vec<f64>,
}

impl Contexts {
    pub fn new(dim: usize) -> Self {
        Self { dim, data: Vec::new() }
    }

    pub fn with_capacity(dim: usize, n: usize) -> Self {
        Self { dim, data: Vec::with_capacity(dim * n) }
    }

    pub fn from_rows(dim: usize, rows: Vec<f64>) -> Result<Self, EnvironError> {
        if dim == 0 || rows.len() % dim != 0 {
            return Err(EnvironError::InvalidConfig(
                "row data length must be a multiple of the dimension".into(),
            ));
        }
        Ok(Self { dim, data: rows })
    }

    pub fn push(&mut self, row: &[f64]) {
        debug_assert_eq!(row.len(), self.dim);
        self.data.extend_from_slice(row);
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        if self.dim == 0 { 0 } else { self.data.len() / self.dim }
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    pub fn iter(&self) -> impl Iterator<Item = &[f64]> {
        self.data.chunks_exact(self.dim)
    }

    /// `n` contexts sampled uniformly from the unit cube.
    pub fn sample_uniform(rng: &mut impl Rng, n: usize, dim: usize) -> Self {
        let mut data = Vec::with_capacity(n * dim);
        for _ in 0..n * dim {
            data.push(rng.random::<f64>());
        }
        Self { dim, data }
    }
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Hidden per-action parameters and the noise scale of the simulator.
#[derive(Debug, Clone)]
pub struct RewardModel {
    theta_star: Vec<DVector<f64>>,
    sigma: f64,
    reward_clip: Option<(f64, f64)>,
}

impl RewardModel {
    pub fn new(
        theta_star: Vec<DVector<f64>>,
        sigma: f64,
        reward_clip: Option<(f64, f64)>,
    ) -> Result<Self, EnvironError> {
        if theta_star.is_empty() {
            return Err(EnvironError::InvalidConfig("need at least one action".into()));
        }
        let d = theta_star[0].len();
        if theta_star.iter().any(|t| t.len() != d) {
            return Err(EnvironError::InvalidConfig("parameter dimensions differ".into()));
        }
        if !(sigma >= 0.0) {
            return Err(EnvironError::InvalidConfig("sigma must be nonnegative".into()));
        }
        Ok(Self { theta_star, sigma, reward_clip })
    }

    pub fn k(&self) -> usize {
        self.theta_star.len()
    }

    pub fn dim(&self) -> usize {
        self.theta_star[0].len()
    }

    pub fn sigma(&self) -> f64 {
        self.sigma
    }

    pub fn theta(&self, action: usize) -> &DVector<f64> {
        &self.theta_star[action]
    }

    pub fn with_clip(mut self, clip: Option<(f64, f64)>) -> Self {
        self.reward_clip = clip;
        self
    }

    pub fn mean_reward(&self, x: &[f64], action: usize) -> f64 {
        dot(x, self.theta_star[action].as_slice())
    }

    fn clip(&self, r: f64) -> f64 {
        match self.reward_clip {
            Some((lo, hi)) => r.clamp(lo, hi),
            None => r,
        }
    }
}

/// Per-action parameters with i.i.d. standard normal entries.
pub fn gen_synthetic_model(
    rng: &mut impl Rng,
    k: usize,
    d: usize,
    sigma: f64,
) -> Result<RewardModel, EnvironError> {
    if k == 0 || d == 0 {
        return Err(EnvironError::InvalidConfig("k and d must be at least 1".into()));
    }
    let normal = Normal::new(0.0, 1.0).expect("unit normal");
    let theta = (0..k)
        .map(|_| DVector::from_fn(d, |_, _| normal.sample(rng)))
        .collect();
    RewardModel::new(theta, sigma, None)
}

/// One reward draw `<x, theta_a> + N(0, sigma^2)`.
///
/// This is the only reward-generating path the online loop may use; the
/// harness wraps it behind its call counter.
pub fn env_pull(model: &RewardModel, x: &[f64], action: usize, rng: &mut impl Rng) -> f64 {
    let mean = model.mean_reward(x, action);
    let r = if model.sigma > 0.0 {
        let noise = Normal::new(0.0, model.sigma).expect("sigma validated");
        mean + noise.sample(rng)
    } else {
        mean
    };
    model.clip(r)
}

/// A deficient-support logging policy: each context has a fixed-size set of
/// unsupported actions and uniform propensity on the rest.
#[derive(Debug, Clone)]
pub struct LoggingPolicy {
    k: usize,
    n_contexts: usize,
    unsupported_per_context: usize,
    // Flat `n_contexts * unsupported_per_context`, each block sorted.
    unsupported: Vec<u16>,
}

impl LoggingPolicy {
    pub fn k(&self) -> usize {
        self.k
    }

    pub fn n_contexts(&self) -> usize {
        self.n_contexts
    }

    pub fn unsupported_per_context(&self) -> usize {
        self.unsupported_per_context
    }

    pub fn supported_count(&self) -> usize {
        self.k - self.unsupported_per_context
    }

    pub fn unsupported(&self, context_id: usize) -> &[u16] {
        let u = self.unsupported_per_context;
        &self.unsupported[context_id * u..(context_id + 1) * u]
    }

    pub fn is_supported(&self, context_id: usize, action: usize) -> bool {
        self.unsupported(context_id).binary_search(&(action as u16)).is_err()
    }

    pub fn propensity(&self, context_id: usize, action: usize) -> f64 {
        if self.is_supported(context_id, action) {
            1.0 / self.supported_count() as f64
        } else {
            0.0
        }
    }

    pub fn supported_actions(&self, context_id: usize) -> Vec<usize> {
        let unsup = self.unsupported(context_id);
        (0..self.k).filter(|a| unsup.binary_search(&(*a as u16)).is_err()).collect()
    }
}

/// Uniformly random fixed-size unsupported subsets per context, uniform
/// propensity over the complement.
pub fn gen_logging_policy(
    rng: &mut impl Rng,
    n_contexts: usize,
    k: usize,
    n_ua: f64,
) -> Result<LoggingPolicy, EnvironError> {
    if !(0.0..1.0).contains(&n_ua) {
        return Err(EnvironError::InvalidConfig(format!(
            "n_ua must lie in [0, 1), got {n_ua}"
        )));
    }
    if k == 0 || k > u16::MAX as usize {
        return Err(EnvironError::InvalidConfig("k out of range".into()));
    }
    let u = (n_ua * k as f64).floor() as usize;
    if u >= k {
        return Err(EnvironError::InvalidConfig(
            "every context needs at least one supported action".into(),
        ));
    }
    let mut unsupported = Vec::with_capacity(n_contexts * u);
    let mut pool: Vec<u16> = (0..k as u16).collect();
    for _ in 0..n_contexts {
        // Partial Fisher-Yates: the first `u` entries become the subset.
        for i in 0..u {
            let j = rng.random_range(i..k);
            pool.swap(i, j);
        }
        let mut subset: Vec<u16> = pool[..u].to_vec();
        subset.sort_unstable();
        unsupported.extend_from_slice(&subset);
    }
    Ok(LoggingPolicy {
        k,
        n_contexts,
        unsupported_per_context: u,
        unsupported,
    })
}

/// One logged interaction; `x` borrows the dataset's context storage.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LoggedEvent<'a> {
    pub context_id: usize,
    pub x: &'a [f64],
    pub action: usize,
    pub reward: f64,
    pub propensity: f64,
}

/// Lookup from context id to event index.
#[derive(Debug, Clone)]
pub enum ContextIndex {
    /// Ids are exactly `0..n` in event order.
    Contiguous(usize),
    Sparse(HashMap<usize, usize>),
}

impl ContextIndex {
    pub fn get(&self, context_id: usize) -> Option<usize> {
        match self {
            ContextIndex::Contiguous(n) => (context_id < *n).then_some(context_id),
            ContextIndex::Sparse(map) => map.get(&context_id).copied(),
        }
    }
}

/// Logged events from the logging policy, one per context id.
#[derive(Debug, Clone)]
pub struct OfflineDataset {
    k: usize,
    contexts: Contexts,
    context_ids: Vec<usize>,
    actions: Vec<u32>,
    rewards: Vec<f64>,
    propensities: Vec<f64>,
    per_action_counts: Vec<usize>,
    index: ContextIndex,
}

impl OfflineDataset {
    /// Build from raw parts, enforcing the dataset invariants.
    pub fn from_parts(
        k: usize,
        contexts: Contexts,
        context_ids: Vec<usize>,
        actions: Vec<u32>,
        rewards: Vec<f64>,
        propensities: Vec<f64>,
    ) -> Result<Self, EnvironError> {
        let n = context_ids.len();
        if contexts.len() != n || actions.len() != n || rewards.len() != n || propensities.len() != n
        {
            return Err(EnvironError::CorruptedDataset("column lengths differ".into()));
        }
        let mut per_action_counts = vec![0usize; k];
        for (i, &a) in actions.iter().enumerate() {
            if a as usize >= k {
                return Err(EnvironError::CorruptedDataset(format!(
                    "event {i}: action {a} out of range for k={k}"
                )));
            }
            per_action_counts[a as usize] += 1;
        }
        for (i, &p) in propensities.iter().enumerate() {
            if !(p > 0.0 && p <= 1.0) {
                return Err(EnvironError::CorruptedDataset(format!(
                    "event {i}: propensity {p} outside (0, 1]"
                )));
            }
        }
        for (i, &r) in rewards.iter().enumerate() {
            if !r.is_finite() {
                return Err(EnvironError::CorruptedDataset(format!(
                    "event {i}: non-finite reward"
                )));
            }
        }
        let contiguous = context_ids.iter().enumerate().all(|(i, &c)| c == i);
        let index = if contiguous {
            ContextIndex::Contiguous(n)
        } else {
            let mut map = HashMap::with_capacity(n);
            for (i, &c) in context_ids.iter().enumerate() {
                if map.insert(c, i).is_some() {
                    return Err(EnvironError::CorruptedDataset(format!(
                        "event {i}: duplicate context id {c}"
                    )));
                }
            }
            ContextIndex::Sparse(map)
        };
        Ok(Self {
            k,
            contexts,
            context_ids,
            actions,
            rewards,
            propensities,
            per_action_counts,
            index,
        })
    }

    pub fn len(&self) -> usize {
        self.context_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.context_ids.is_empty()
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn dim(&self) -> usize {
        self.contexts.dim()
    }

    pub fn per_action_counts(&self) -> &[usize] {
        &self.per_action_counts
    }

    pub fn event(&self, i: usize) -> LoggedEvent<'_> {
        LoggedEvent {
            context_id: self.context_ids[i],
            x: self.contexts.row(i),
            action: self.actions[i] as usize,
            reward: self.rewards[i],
            propensity: self.propensities[i],
        }
    }

    pub fn iter(&self) -> impl Iterator<Item = LoggedEvent<'_>> {
        (0..self.len()).map(|i| self.event(i))
    }

    pub fn event_for_context(&self, context_id: usize) -> Option<LoggedEvent<'_>> {
        self.index.get(context_id).map(|i| self.event(i))
    }

    pub fn index(&self) -> &ContextIndex {
        &self.index
    }

    /// Serialize as CSV with columns `context_id,x_0..x_{d-1},action,reward,propensity`.
    pub fn write_csv<W: io::Write>(&self, writer: W) -> Result<(), EnvironError> {
        let mut w = csv::Writer::from_writer(writer);
        let d = self.dim();
        let mut header = vec!["context_id".to_string()];
        header.extend((0..d).map(|j| format!("x_{j}")));
        header.extend(["action".into(), "reward".into(), "propensity".into()]);
        w.write_record(&header)?;
        for ev in self.iter() {
            let mut rec = vec![ev.context_id.to_string()];
            rec.extend(ev.x.iter().map(|v| v.to_string()));
            rec.push(ev.action.to_string());
            rec.push(ev.reward.to_string());
            rec.push(ev.propensity.to_string());
            w.write_record(&rec)?;
        }
        w.flush()?;
        Ok(())
    }

    /// Parse the CSV written by [`OfflineDataset::write_csv`]. `k` is inferred
    /// as `max action + 1`.
    pub fn read_csv<R: io::Read>(reader: R) -> Result<Self, EnvironError> {
        let mut r = csv::Reader::from_reader(reader);
        let header = r.headers()?.clone();
        if header.len() < 4 || &header[0] != "context_id" {
            return Err(EnvironError::CorruptedDataset("unexpected header".into()));
        }
        let d = header.len() - 4;
        let mut contexts = Contexts::new(d.max(1));
        let mut context_ids = Vec::new();
        let mut actions = Vec::new();
        let mut rewards = Vec::new();
        let mut propensities = Vec::new();
        let mut row_buf = vec![0.0; d];
        for (row, record) in r.records().enumerate() {
            let record = record?;
            let parse_err = |message: String| EnvironError::Ingestion { row: row + 2, message };
            if record.len() != d + 4 {
                return Err(parse_err(format!(
                    "expected {} fields, found {}",
                    d + 4,
                    record.len()
                )));
            }
            let ctx: usize = record[0]
                .parse()
                .map_err(|_| parse_err(format!("bad context id {:?}", &record[0])))?;
            for j in 0..d {
                row_buf[j] = record[1 + j]
                    .parse()
                    .map_err(|_| parse_err(format!("bad feature {:?}", &record[1 + j])))?;
            }
            let action: u32 = record[d + 1]
                .parse()
                .map_err(|_| parse_err(format!("bad action {:?}", &record[d + 1])))?;
            let reward: f64 = record[d + 2]
                .parse()
                .map_err(|_| parse_err(format!("bad reward {:?}", &record[d + 2])))?;
            let propensity: f64 = record[d + 3]
                .parse()
                .map_err(|_| parse_err(format!("bad propensity {:?}", &record[d + 3])))?;
            context_ids.push(ctx);
            contexts.push(&row_buf);
            actions.push(action);
            rewards.push(reward);
            propensities.push(propensity);
        }
        let k = actions.iter().map(|&a| a as usize + 1).max().unwrap_or(1);
        Self::from_parts(k, contexts, context_ids, actions, rewards, propensities)
    }
}

/// One logged event per context: action sampled from the logging policy,
/// reward drawn from the model. Context ids are `0..contexts.len()`.
pub fn gen_offline_dataset(
    rng: &mut impl Rng,
    model: &RewardModel,
    policy: &LoggingPolicy,
    contexts: &Contexts,
) -> Result<OfflineDataset, EnvironError> {
    if policy.k() != model.k() {
        return Err(EnvironError::InvalidConfig("policy and model disagree on k".into()));
    }
    if policy.n_contexts() < contexts.len() {
        return Err(EnvironError::InvalidConfig(
            "logging policy covers fewer contexts than supplied".into(),
        ));
    }
    let n = contexts.len();
    let noise = (model.sigma() > 0.0).then(|| Normal::new(0.0, model.sigma()).expect("sigma"));
    let mut actions = Vec::with_capacity(n);
    let mut rewards = Vec::with_capacity(n);
    let mut propensities = Vec::with_capacity(n);
    let s = policy.supported_count();
    for (i, x) in contexts.iter().enumerate() {
        let supported = policy.supported_actions(i);
        let a = supported[rng.random_range(0..s)];
        let mut r = model.mean_reward(x, a);
        if let Some(noise) = &noise {
            r += noise.sample(rng);
        }
        actions.push(a as u32);
        rewards.push(model.clip(r));
        propensities.push(1.0 / s as f64);
    }
    OfflineDataset::from_parts(
        model.k(),
        contexts.clone(),
        (0..n).collect(),
        actions,
        rewards,
        propensities,
    )
}

/// A multiclass dataset converted to bandit feedback: labels act as actions.
#[derive(Debug, Clone)]
pub struct BanditizedDataset {
    rows: Contexts,
    labels: Vec<u32>,
    k: usize,
    noisy: bool,
    source_name: String,
}

impl BanditizedDataset {
    pub fn new(
        rows: Contexts,
        labels: Vec<u32>,
        k: usize,
        noisy: bool,
        source_name: String,
    ) -> Result<Self, EnvironError> {
        if rows.len() != labels.len() {
            return Err(EnvironError::InvalidConfig("rows and labels differ in length".into()));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l as usize >= k) {
            return Err(EnvironError::InvalidConfig(format!(
                "label {bad} out of range for k={k}"
            )));
        }
        Ok(Self { rows, labels, k, noisy, source_name })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn dim(&self) -> usize {
        self.rows.dim()
    }

    pub fn noisy(&self) -> bool {
        self.noisy
    }

    pub fn source_name(&self) -> &str {
        &self.source_name
    }

    pub fn row(&self, i: usize) -> &[f64] {
        self.rows.row(i)
    }

    pub fn label(&self, i: usize) -> usize {
        self.labels[i] as usize
    }
}

/// Bandit feedback for playing `action` on `row`: 1 when the action matches
/// the row label, 0 otherwise. In noisy mode the correct reward is revealed
/// with probability 0.5 and a fair coin is returned otherwise.
pub fn banditize(
    data: &BanditizedDataset,
    action: usize,
    row: usize,
    noisy: bool,
    rng: &mut impl Rng,
) -> f64 {
    let clean = if action == data.label(row) { 1.0 } else { 0.0 };
    if !noisy {
        return clean;
    }
    if rng.random_bool(0.5) {
        clean
    } else if rng.random_bool(0.5) {
        1.0
    } else {
        0.0
    }
}

/// Load a numeric CSV with one integer label column (default: the last).
/// With `normalize` each feature vector is scaled to unit Euclidean norm.
pub fn ingest_csv(
    path: &Path,
    label_column: Option<usize>,
    normalize: bool,
) -> Result<BanditizedDataset, EnvironError> {
    let file = std::fs::File::open(path)?;
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .from_reader(file);

    let mut rows: Option<Contexts> = None;
    let mut labels: Vec<u32> = Vec::new();
    let mut label_idx = 0usize;
    let mut width = 0usize;
    let mut first_data_row = true;
    for (row_number, record) in reader.records().enumerate() {
        let record = record?;
        let row = row_number + 1;
        let fail = |message: String| EnvironError::Ingestion { row, message };
        if first_data_row {
            // A header row is detected by any non-numeric field.
            let numeric = record.iter().all(|f| f.trim().parse::<f64>().is_ok());
            if !numeric && row_number == 0 {
                continue;
            }
            width = record.len();
            if width < 2 {
                return Err(fail("need at least one feature and a label column".into()));
            }
            label_idx = match label_column {
                Some(i) if i < width => i,
                Some(i) => {
                    return Err(fail(format!("label column {i} out of range (width {width})")))
                }
                None => width - 1,
            };
            rows = Some(Contexts::new(width - 1));
            first_data_row = false;
        }
        if record.len() != width {
            return Err(fail(format!(
                "ragged row: expected {width} fields, found {}",
                record.len()
            )));
        }
        let mut features = Vec::with_capacity(width - 1);
        let mut label: Option<u32> = None;
        for (j, field) in record.iter().enumerate() {
            let value: f64 = field
                .trim()
                .parse()
                .map_err(|_| fail(format!("non-numeric field {:?} in column {j}", field)))?;
            if !value.is_finite() {
                return Err(fail(format!("non-finite value in column {j}")));
            }
            if j == label_idx {
                if value < 0.0 || value.fract() != 0.0 {
                    return Err(fail(format!("label {value} is not a nonnegative integer")));
                }
                label = Some(value as u32);
            } else {
                features.push(value);
            }
        }
        if normalize {
            let norm = features.iter().map(|v| v * v).sum::<f64>().sqrt();
            if norm > 0.0 {
                for v in &mut features {
                    *v /= norm;
                }
            }
        }
        rows.as_mut().expect("initialized above").push(&features);
        labels.push(label.expect("label column visited"));
    }
    let rows = rows.ok_or(EnvironError::Ingestion {
        row: 0,
        message: "file contains no data rows".into(),
    })?;
    let k = labels.iter().map(|&l| l as usize + 1).max().unwrap_or(0);
    let name = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "dataset".into());
    BanditizedDataset::new(rows, labels, k, false, name)
}

/// Disjoint shuffled split into `floor(fraction * n)` rows and the remainder.
pub fn split_dataset(
    data: &BanditizedDataset,
    fraction: f64,
    rng: &mut impl Rng,
) -> Result<(BanditizedDataset, BanditizedDataset), EnvironError> {
    if !(fraction > 0.0 && fraction < 1.0) {
        return Err(EnvironError::InvalidConfig(format!(
            "split fraction must lie in (0, 1), got {fraction}"
        )));
    }
    let n = data.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(rng);
    let cut = (fraction * n as f64).floor() as usize;
    let build = |ids: &[usize], suffix: &str| {
        let mut rows = Contexts::with_capacity(data.dim(), ids.len());
        let mut labels = Vec::with_capacity(ids.len());
        for &i in ids {
            rows.push(data.row(i));
            labels.push(data.labels[i]);
        }
        BanditizedDataset::new(
            rows,
            labels,
            data.k(),
            data.noisy(),
            format!("{}{suffix}", data.source_name()),
        )
    };
    Ok((build(&order[..cut], ":a")?, build(&order[cut..], ":b")?))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn synthetic_model_deterministic_given_seed() {
        let a = gen_synthetic_model(&mut ChaCha8Rng::seed_from_u64(9), 20, 5, 2.0).unwrap();
        let b = gen_synthetic_model(&mut ChaCha8Rng::seed_from_u64(9), 20, 5, 2.0).unwrap();
        for i in 0..20 {
            assert_eq!(a.theta(i), b.theta(i));
        }
        assert_eq!(a.k(), 20);
        assert_eq!(a.dim(), 5);
        assert_eq!(a.sigma(), 2.0);
    }

    #[test]
    fn synthetic_entries_center_on_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(41);
        let model = gen_synthetic_model(&mut rng, 100, 100, 1.0).unwrap();
        let mut sum = 0.0;
        for a in 0..100 {
            sum += model.theta(a).iter().sum::<f64>();
        }
        assert!((sum / 10_000.0).abs() < 0.05);
    }

    #[test]
    fn logging_policy_half_unsupported_gives_two_over_k() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let policy = gen_logging_policy(&mut rng, 50, 20, 0.5).unwrap();
        for ctx in 0..50 {
            assert_eq!(policy.unsupported(ctx).len(), 10);
            for a in 0..20 {
                let p = policy.propensity(ctx, a);
                if policy.is_supported(ctx, a) {
                    assert!((p - 2.0 / 20.0).abs() < 1e-15);
                } else {
                    assert_eq!(p, 0.0);
                }
            }
            let total: f64 = (0..20).map(|a| policy.propensity(ctx, a)).sum();
            assert!((total - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn logging_policy_full_support() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let policy = gen_logging_policy(&mut rng, 10, 7, 0.0).unwrap();
        for ctx in 0..10 {
            for a in 0..7 {
                assert!((policy.propensity(ctx, a) - 1.0 / 7.0).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn logging_policy_unsupported_fraction_is_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let policy = gen_logging_policy(&mut rng, 1000, 10, 0.4).unwrap();
        let total: usize = (0..1000).map(|c| policy.unsupported(c).len()).sum();
        assert_eq!(total, 4 * 1000);
    }

    #[test]
    fn logging_policy_rejects_full_deficiency() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        assert!(gen_logging_policy(&mut rng, 5, 4, 1.0).is_err());
    }

    #[test]
    fn offline_dataset_noiseless_reward_is_inner_product() {
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        let model = gen_synthetic_model(&mut rng, 3, 2, 0.0).unwrap();
        let policy = gen_logging_policy(&mut rng, 4, 3, 0.0).unwrap();
        let contexts = Contexts::sample_uniform(&mut rng, 4, 2);
        let data = gen_offline_dataset(&mut rng, &model, &policy, &contexts).unwrap();
        for ev in data.iter() {
            assert!((ev.reward - model.mean_reward(ev.x, ev.action)).abs() < 1e-15);
            assert!(ev.propensity > 0.0);
        }
        assert_eq!(data.per_action_counts().iter().sum::<usize>(), 4);
    }

    #[test]
    fn offline_dataset_action_frequencies_concentrate() {
        let mut rng = ChaCha8Rng::seed_from_u64(29);
        let k = 20;
        let model = gen_synthetic_model(&mut rng, k, 3, 1.0).unwrap();
        let policy = gen_logging_policy(&mut rng, 100_000, k, 0.5).unwrap();
        let contexts = Contexts::sample_uniform(&mut rng, 100_000, 3);
        let data = gen_offline_dataset(&mut rng, &model, &policy, &contexts).unwrap();
        // Marginal action frequency: P(supported) * 1/supported = 0.5 * 0.1.
        for &count in data.per_action_counts() {
            let freq = count as f64 / 100_000.0;
            assert!((freq - 0.05).abs() < 0.01, "freq {freq}");
        }
    }

    #[test]
    fn offline_dataset_reproducible_bytes() {
        let gen = || {
            let mut rng = ChaCha8Rng::seed_from_u64(31);
            let model = gen_synthetic_model(&mut rng, 5, 3, 1.5).unwrap();
            let policy = gen_logging_policy(&mut rng, 200, 5, 0.2).unwrap();
            let contexts = Contexts::sample_uniform(&mut rng, 200, 3);
            let data = gen_offline_dataset(&mut rng, &model, &policy, &contexts).unwrap();
            let mut buf = Vec::new();
            data.write_csv(&mut buf).unwrap();
            buf
        };
        assert_eq!(gen(), gen());
    }

    #[test]
    fn offline_dataset_csv_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(37);
        let model = gen_synthetic_model(&mut rng, 4, 2, 1.0).unwrap();
        let policy = gen_logging_policy(&mut rng, 30, 4, 0.25).unwrap();
        let contexts = Contexts::sample_uniform(&mut rng, 30, 2);
        let data = gen_offline_dataset(&mut rng, &model, &policy, &contexts).unwrap();
        let mut buf = Vec::new();
        data.write_csv(&mut buf).unwrap();
        let back = OfflineDataset::read_csv(&buf[..]).unwrap();
        assert_eq!(back.len(), data.len());
        for (a, b) in data.iter().zip(back.iter()) {
            assert_eq!(a.context_id, b.context_id);
            assert_eq!(a.action, b.action);
            assert_eq!(a.x, b.x);
            assert_eq!(a.reward, b.reward);
            assert_eq!(a.propensity, b.propensity);
        }
    }

    #[test]
    fn from_parts_rejects_zero_propensity() {
        let contexts = Contexts::from_rows(1, vec![0.5, 0.2]).unwrap();
        let err = OfflineDataset::from_parts(
            2,
            contexts,
            vec![0, 1],
            vec![0, 1],
            vec![1.0, 0.0],
            vec![0.5, 0.0],
        )
        .unwrap_err();
        assert!(matches!(err, EnvironError::CorruptedDataset(_)));
    }

    #[test]
    fn env_pull_noiseless_and_clt() {
        let mut rng = ChaCha8Rng::seed_from_u64(43);
        let model = gen_synthetic_model(&mut rng, 2, 3, 0.0).unwrap();
        let x = [0.3, 0.6, 0.9];
        let exact = model.mean_reward(&x, 1);
        assert_eq!(env_pull(&model, &x, 1, &mut rng), exact);

        let noisy = RewardModel::new(
            (0..2).map(|a| model.theta(a).clone()).collect(),
            0.7,
            None,
        )
        .unwrap();
        let mean: f64 =
            (0..10_000).map(|_| env_pull(&noisy, &x, 1, &mut rng)).sum::<f64>() / 10_000.0;
        assert!((mean - exact).abs() < 3.0 * 0.7 / 100.0);
        let a = env_pull(&noisy, &x, 1, &mut rng);
        let b = env_pull(&noisy, &x, 1, &mut rng);
        assert_ne!(a, b);
    }

    #[test]
    fn banditize_clean_and_noisy() {
        let rows = Contexts::from_rows(2, vec![0.1, 0.2, 0.3, 0.4]).unwrap();
        let data = BanditizedDataset::new(rows, vec![1, 0], 2, false, "toy".into()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(47);
        assert_eq!(banditize(&data, 1, 0, false, &mut rng), 1.0);
        assert_eq!(banditize(&data, 0, 0, false, &mut rng), 0.0);
        // Correct action in noisy mode: 0.5 * 1 + 0.5 * 0.5 = 0.75.
        let mean: f64 = (0..100_000)
            .map(|_| banditize(&data, 1, 0, true, &mut rng))
            .sum::<f64>()
            / 100_000.0;
        assert!((mean - 0.75).abs() < 0.01, "mean {mean}");
    }

    #[test]
    fn ingest_two_row_file() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("toy.csv");
        std::fs::write(&path, "0.5,0.25,0\n0.1,0.2,1\n").unwrap();
        let data = ingest_csv(&path, None, false).unwrap();
        assert_eq!(data.k(), 2);
        assert_eq!(data.len(), 2);
        assert_eq!(data.row(0), &[0.5, 0.25]);
        assert_eq!(data.label(0), 0);
        assert_eq!(data.label(1), 1);
    }

    #[test]
    fn ingest_header_and_normalization() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("toy.csv");
        std::fs::write(&path, "f0,f1,label\n3,4,1\n0,2,0\n").unwrap();
        let data = ingest_csv(&path, None, true).unwrap();
        assert_eq!(data.len(), 2);
        assert!((data.row(0)[0] - 0.6).abs() < 1e-15);
        assert!((data.row(0)[1] - 0.8).abs() < 1e-15);
        let norm = data.row(1).iter().map(|v| v * v).sum::<f64>().sqrt();
        assert!((norm - 1.0).abs() < 1e-12);
    }

    #[test]
    fn ingest_errors_name_the_row() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.csv");
        std::fs::write(&path, "0.5,0.25,0\n0.1,oops,1\n").unwrap();
        match ingest_csv(&path, None, false).unwrap_err() {
            EnvironError::Ingestion { row, .. } => assert_eq!(row, 2),
            other => panic!("unexpected error {other:?}"),
        }
        let path = dir.path().join("ragged.csv");
        std::fs::write(&path, "0.5,0.25,0\n0.1,1\n").unwrap();
        match ingest_csv(&path, None, false).unwrap_err() {
            EnvironError::Ingestion { row, .. } => assert_eq!(row, 2),
            other => panic!("unexpected error {other:?}"),
        }
    }

    #[test]
    fn split_sizes_and_union() {
        let rows = Contexts::from_rows(1, (0..10).map(|i| i as f64).collect()).unwrap();
        let labels: Vec<u32> = (0..10).map(|i| i % 2).collect();
        let data = BanditizedDataset::new(rows, labels, 2, false, "toy".into()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(53);
        let (a, b) = split_dataset(&data, 0.7, &mut rng).unwrap();
        assert_eq!(a.len(), 7);
        assert_eq!(b.len(), 3);
        let mut seen: Vec<f64> = a
            .rows
            .iter()
            .chain(b.rows.iter())
            .map(|r| r[0])
            .collect();
        seen.sort_by(|p, q| p.partial_cmp(q).unwrap());
        assert_eq!(seen, (0..10).map(|i| i as f64).collect::<Vec<_>>());

        let (a2, b2) = split_dataset(&data, 0.7, &mut ChaCha8Rng::seed_from_u64(53)).unwrap();
        assert_eq!(a.rows, a2.rows);
        assert_eq!(b.rows, b2.rows);
    }
}
