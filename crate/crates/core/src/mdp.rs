//! Exact average-reward machinery for finite MDPs.
//!
//! Everything here works with the average-reward criterion: a policy induces
//! a Markov chain `P^π`, its stationary distribution `d_π` solves
//! `dᵀ = dᵀP^π`, and the successor features are `ψ^π = Σ_s d_π(s) Σ_a π(a|s) φ(s,a)`.
//! For a linear reward `r = w·φ` the average value is simply `ψ^π·w`.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, Result};
use crate::lp::{EqualityLp, LpOutcome};

/// Row sums and probability vectors are validated to this tolerance.
pub const PROB_TOL: f64 = 1e-12;
/// Default residual bound for `‖dᵀP − dᵀ‖₁`.
pub const STATIONARY_TOL: f64 = 1e-10;
/// Singular values of `Pᵀ − I` at or below this count towards the null space.
pub const NULLITY_TOL: f64 = 1e-9;
pub const DEFAULT_MIXING_CAP: usize = 100_000;
/// Occupancy below this is treated as zero when recovering a policy.
const OCCUPANCY_TOL: f64 = 1e-12;
const ACTION_PROB_FLOOR: f64 = 1e-8;

fn check_distribution(what: &'static str, p: &[f64]) -> Result<()> {
    if let Some((i, v)) = p.iter().enumerate().find(|(_, v)| !(**v >= 0.0)) {
        return Err(Error::Invalid {
            what,
            reason: format!("entry {i} is {v}"),
        });
    }
    let sum: f64 = p.iter().sum();
    if (sum - 1.0).abs() > PROB_TOL {
        return Err(Error::Invalid {
            what,
            reason: format!("sums to {sum}"),
        });
    }
    Ok(())
}

/// A reward `r(s,a)` stored row-major by state.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RewardTable {
    n_states: usize,
    n_actions: usize,
    values: Vec<f64>,
}

impl RewardTable {
    pub fn new(n_states: usize, n_actions: usize, values: Vec<f64>) -> Result<Self> {
        check_dim("reward table", n_states * n_actions, values.len())?;
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::Invalid {
                what: "reward table",
                reason: "non-finite entry".into(),
            });
        }
        Ok(Self {
            n_states,
            n_actions,
            values,
        })
    }

    pub fn zeros(n_states: usize, n_actions: usize) -> Self {
        Self {
            n_states,
            n_actions,
            values: vec![0.0; n_states * n_actions],
        }
    }

    pub fn from_fn(n_states: usize, n_actions: usize, f: impl Fn(usize, usize) -> f64) -> Self {
        let mut values = Vec::with_capacity(n_states * n_actions);
        for s in 0..n_states {
            for a in 0..n_actions {
                values.push(f(s, a));
            }
        }
        Self {
            n_states,
            n_actions,
            values,
        }
    }

    /// A state-only reward replicated across actions.
    pub fn from_state_values(n_actions: usize, per_state: &[f64]) -> Self {
        Self::from_fn(per_state.len(), n_actions, |s, _| per_state[s])
    }

    /// `r(s,a) = w·φ(s,a)`.
    pub fn linear(mdp: &TabularMdp, w: &[f64]) -> Result<Self> {
        check_dim("linear reward weight", mdp.n_features(), w.len())?;
        Ok(Self::from_fn(mdp.n_states(), mdp.n_actions(), |s, a| {
            dot(mdp.feature(s, a), w)
        }))
    }

    pub fn n_states(&self) -> usize {
        self.n_states
    }

    pub fn n_actions(&self) -> usize {
        self.n_actions
    }

    #[inline]
    pub fn get(&self, s: usize, a: usize) -> f64 {
        self.values[s * self.n_actions + a]
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn max_abs(&self) -> f64 {
        self.values.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self {
            n_states: self.n_states,
            n_actions: self.n_actions,
            values: self.values.iter().map(|&v| f(v)).collect(),
        }
    }
}

/// A state-to-action-distribution table `π(a|s)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StochasticPolicy {
    n_states: usize,
    n_actions: usize,
    probs: Vec<f64>,
}

impl StochasticPolicy {
    pub fn new(n_states: usize, n_actions: usize, probs: Vec<f64>) -> Result<Self> {
        check_dim("policy table", n_states * n_actions, probs.len())?;
        for row in probs.chunks(n_actions) {
            check_distribution("policy row", row)?;
        }
        Ok(Self {
            n_states,
            n_actions,
            probs,
        })
    }

    pub fn uniform(n_states: usize, n_actions: usize) -> Self {
        Self {
            n_states,
            n_actions,
            probs: vec![1.0 / n_actions as f64; n_states * n_actions],
        }
    }

    pub fn deterministic(n_actions: usize, actions: &[usize]) -> Result<Self> {
        let mut probs = vec![0.0; actions.len() * n_actions];
        for (s, &a) in actions.iter().enumerate() {
            if a >= n_actions {
                return Err(Error::Invalid {
                    what: "deterministic policy",
                    reason: format!("action {a} out of range in state {s}"),
                });
            }
            probs[s * n_actions + a] = 1.0;
        }
        Ok(Self {
            n_states: actions.len(),
            n_actions,
            probs,
        })
    }

    pub fn n_states(&self) -> usize {
        self.n_states
    }

    pub fn n_actions(&self) -> usize {
        self.n_actions
    }

    #[inline]
    pub fn prob(&self, s: usize, a: usize) -> f64 {
        self.probs[s * self.n_actions + a]
    }

    pub fn row(&self, s: usize) -> &[f64] {
        &self.probs[s * self.n_actions..(s + 1) * self.n_actions]
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    /// The most likely action per state (lowest index on ties).
    pub fn greedy_actions(&self) -> Vec<usize> {
        (0..self.n_states)
            .map(|s| {
                let row = self.row(s);
                let mut best = 0;
                for (a, &p) in row.iter().enumerate() {
                    if p > row[best] {
                        best = a;
                    }
                }
                best
            })
            .collect()
    }

    pub fn is_deterministic(&self) -> bool {
        self.probs.iter().all(|&p| p == 0.0 || p == 1.0)
    }

    fn label(&self) -> String {
        let acts = self.greedy_actions();
        if self.is_deterministic() {
            format!("deterministic {acts:?}")
        } else {
            format!("stochastic (greedy {acts:?})")
        }
    }
}

/// A finite MDP with per-action transition matrices and bounded features.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TabularMdp {
    n_states: usize,
    n_actions: usize,
    n_features: usize,
    /// `[a][s][s']`
    transitions: Vec<f64>,
    /// `[s][a][k]`
    features: Vec<f64>,
    extrinsic_reward: RewardTable,
    initial_distribution: Vec<f64>,
}

impl TabularMdp {
    /// `transitions[a]` is a row-major `n_states × n_states` matrix,
    /// `features[s][a]` the feature vector of the pair.
    pub fn new(
        transitions: Vec<Vec<Vec<f64>>>,
        features: Vec<Vec<Vec<f64>>>,
        extrinsic_reward: RewardTable,
        initial_distribution: Vec<f64>,
    ) -> Result<Self> {
        let n_actions = transitions.len();
        if n_actions == 0 {
            return Err(Error::Invalid {
                what: "mdp",
                reason: "no actions".into(),
            });
        }
        let n_states = transitions[0].len();
        if n_states == 0 {
            return Err(Error::Invalid {
                what: "mdp",
                reason: "no states".into(),
            });
        }
        let mut flat_p = Vec::with_capacity(n_actions * n_states * n_states);
        for pa in &transitions {
            check_dim("transition matrix rows", n_states, pa.len())?;
            for row in pa {
                check_dim("transition matrix columns", n_states, row.len())?;
                check_distribution("transition row", row)?;
                flat_p.extend_from_slice(row);
            }
        }
        check_dim("feature states", n_states, features.len())?;
        let n_features = features
            .first()
            .and_then(|f| f.first())
            .map(|v| v.len())
            .unwrap_or(0);
        if n_features == 0 {
            return Err(Error::Invalid {
                what: "features",
                reason: "zero feature dimension".into(),
            });
        }
        let mut flat_f = Vec::with_capacity(n_states * n_actions * n_features);
        for fs in &features {
            check_dim("feature actions", n_actions, fs.len())?;
            for v in fs {
                check_dim("feature dimension", n_features, v.len())?;
                if let Some(x) = v.iter().find(|x| !(0.0..=1.0).contains(*x)) {
                    return Err(Error::Invalid {
                        what: "features",
                        reason: format!("entry {x} outside [0,1]"),
                    });
                }
                flat_f.extend_from_slice(v);
            }
        }
        check_dim("reward states", n_states, extrinsic_reward.n_states())?;
        check_dim("reward actions", n_actions, extrinsic_reward.n_actions())?;
        check_dim("initial distribution", n_states, initial_distribution.len())?;
        check_distribution("initial distribution", &initial_distribution)?;
        Ok(Self {
            n_states,
            n_actions,
            n_features,
            transitions: flat_p,
            features: flat_f,
            extrinsic_reward,
            initial_distribution,
        })
    }

    pub fn n_states(&self) -> usize {
        self.n_states
    }

    pub fn n_actions(&self) -> usize {
        self.n_actions
    }

    pub fn n_features(&self) -> usize {
        self.n_features
    }

    #[inline]
    pub fn transition_row(&self, a: usize, s: usize) -> &[f64] {
        let n = self.n_states;
        let start = (a * n + s) * n;
        &self.transitions[start..start + n]
    }

    #[inline]
    pub fn feature(&self, s: usize, a: usize) -> &[f64] {
        let start = (s * self.n_actions + a) * self.n_features;
        &self.features[start..start + self.n_features]
    }

    pub fn extrinsic_reward(&self) -> &RewardTable {
        &self.extrinsic_reward
    }

    pub fn initial_distribution(&self) -> &[f64] {
        &self.initial_distribution
    }

    pub fn with_extrinsic_reward(mut self, reward: RewardTable) -> Result<Self> {
        check_dim("reward states", self.n_states, reward.n_states())?;
        check_dim("reward actions", self.n_actions, reward.n_actions())?;
        self.extrinsic_reward = reward;
        Ok(self)
    }

    /// Raw little-endian bytes of every array, for fingerprinting.
    pub fn canonical_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        for n in [self.n_states, self.n_actions, self.n_features] {
            out.extend_from_slice(&(n as u64).to_le_bytes());
        }
        for v in self
            .transitions
            .iter()
            .chain(&self.features)
            .chain(self.extrinsic_reward.values())
            .chain(&self.initial_distribution)
        {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    fn check_policy(&self, pi: &StochasticPolicy) -> Result<()> {
        check_dim("policy states", self.n_states, pi.n_states())?;
        check_dim("policy actions", self.n_actions, pi.n_actions())
    }

    fn check_reward(&self, r: &RewardTable) -> Result<()> {
        check_dim("reward states", self.n_states, r.n_states())?;
        check_dim("reward actions", self.n_actions, r.n_actions())
    }
}

#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Probability vector fixed under a policy's chain.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StationaryDistribution(pub Vec<f64>);

impl StationaryDistribution {
    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }
}

/// Expected feature vector under the stationary distribution.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SuccessorFeatures(pub Vec<f64>);

impl SuccessorFeatures {
    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrajectoryEstimate {
    pub v_hat: f64,
    pub psi_hat: Vec<f64>,
    pub horizon: usize,
    pub seed: u64,
}

/// Exponentially decayed running average, `v ← a_d·v + (1 − a_d)·x`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RunningAverage {
    pub value: f64,
    pub decay: f64,
}

impl RunningAverage {
    pub fn new(decay: f64) -> Self {
        Self { value: 0.0, decay }
    }

    #[must_use]
    pub fn updated(self, sample: f64) -> Self {
        update_running_average(self, sample)
    }
}

pub fn update_running_average(avg: RunningAverage, sample: f64) -> RunningAverage {
    RunningAverage {
        value: avg.decay * avg.value + (1.0 - avg.decay) * sample,
        decay: avg.decay,
    }
}

/// Coordinatewise running average of a vector estimate (used for `ψ̂`).
#[derive(Debug, Clone, PartialEq)]
pub struct RunningVector {
    pub value: Vec<f64>,
    pub decay: f64,
}

impl RunningVector {
    pub fn zeros(dim: usize, decay: f64) -> Self {
        Self {
            value: vec![0.0; dim],
            decay,
        }
    }

    pub fn update(&mut self, sample: &[f64]) {
        for (v, x) in self.value.iter_mut().zip(sample) {
            *v = self.decay * *v + (1.0 - self.decay) * x;
        }
    }
}

/// `P^π[s][s'] = Σ_a π(a|s) P^a[s][s']`.
pub fn policy_transition(mdp: &TabularMdp, pi: &StochasticPolicy) -> Result<DMatrix<f64>> {
    mdp.check_policy(pi)?;
    let n = mdp.n_states();
    let mut p = DMatrix::zeros(n, n);
    for s in 0..n {
        for a in 0..mdp.n_actions() {
            let w = pi.prob(s, a);
            if w == 0.0 {
                continue;
            }
            for (sp, &t) in mdp.transition_row(a, s).iter().enumerate() {
                p[(s, sp)] += w * t;
            }
        }
    }
    Ok(p)
}

/// Stationary distribution of a row-stochastic matrix, by a direct linear solve.
///
/// The null space of `Pᵀ − I` is sized from its singular values; more than one
/// zero singular value means several closed classes and is reported as
/// [`Error::NonErgodic`]. The distribution itself comes from `Pᵀ − I` with one
/// balance row replaced by the normalization `Σd = 1`.
pub fn chain_stationary(p: &DMatrix<f64>, tol: f64, label: &str) -> Result<Vec<f64>> {
    let n = p.nrows();
    check_dim("chain columns", n, p.ncols())?;
    let a = p.transpose() - DMatrix::<f64>::identity(n, n);
    let sv = a.clone().singular_values();
    let scale = sv.max().max(1.0);
    let nullity = sv.iter().filter(|&&x| x <= NULLITY_TOL * scale).count();
    if nullity > 1 {
        return Err(Error::NonErgodic {
            nullity,
            policy: label.to_string(),
        });
    }
    let mut m = a;
    for j in 0..n {
        m[(n - 1, j)] = 1.0;
    }
    let mut rhs = DVector::zeros(n);
    rhs[n - 1] = 1.0;
    let sol = m.lu().solve(&rhs).ok_or_else(|| Error::NonErgodic {
        nullity: 2,
        policy: label.to_string(),
    })?;
    let mut d: Vec<f64> = sol.iter().map(|&x| if x < 0.0 && x > -1e-14 { 0.0 } else { x }).collect();
    if d.iter().any(|&x| x < 0.0) {
        return Err(Error::Internal(format!(
            "negative stationary mass for {label}: {d:?}"
        )));
    }
    let sum: f64 = d.iter().sum();
    for x in d.iter_mut() {
        *x /= sum;
    }
    let res = stationary_residual(p, &d);
    if res > tol {
        return Err(Error::Internal(format!(
            "stationary residual {res:.3e} exceeds {tol:.1e} for {label}"
        )));
    }
    Ok(d)
}

/// `‖dᵀP − dᵀ‖₁`.
pub fn stationary_residual(p: &DMatrix<f64>, d: &[f64]) -> f64 {
    let n = d.len();
    (0..n)
        .map(|j| {
            let flow: f64 = (0..n).map(|i| d[i] * p[(i, j)]).sum();
            (flow - d[j]).abs()
        })
        .sum()
}

pub fn stationary_distribution(
    mdp: &TabularMdp,
    pi: &StochasticPolicy,
    tol: f64,
) -> Result<StationaryDistribution> {
    let p = policy_transition(mdp, pi)?;
    chain_stationary(&p, tol, &pi.label()).map(StationaryDistribution)
}

/// `ψ = Σ_s d(s) Σ_a π(a|s) φ(s,a)` for a known stationary distribution.
pub fn successor_features_from(
    mdp: &TabularMdp,
    pi: &StochasticPolicy,
    d: &[f64],
) -> SuccessorFeatures {
    let mut psi = vec![0.0; mdp.n_features()];
    for (s, &ds) in d.iter().enumerate() {
        for a in 0..mdp.n_actions() {
            let w = ds * pi.prob(s, a);
            if w == 0.0 {
                continue;
            }
            for (p, f) in psi.iter_mut().zip(mdp.feature(s, a)) {
                *p += w * f;
            }
        }
    }
    SuccessorFeatures(psi)
}

pub fn successor_features(mdp: &TabularMdp, pi: &StochasticPolicy) -> Result<SuccessorFeatures> {
    let d = stationary_distribution(mdp, pi, STATIONARY_TOL)?;
    Ok(successor_features_from(mdp, pi, d.as_slice()))
}

/// `v^π_w = ψ^π·w`.
pub fn average_value(psi: &[f64], w: &[f64]) -> Result<f64> {
    check_dim("average value", psi.len(), w.len())?;
    Ok(dot(psi, w))
}

/// `r_π(s) = Σ_a π(a|s) r(s,a)`.
pub fn policy_reward(pi: &StochasticPolicy, reward: &RewardTable) -> Vec<f64> {
    (0..pi.n_states())
        .map(|s| (0..pi.n_actions()).map(|a| pi.prob(s, a) * reward.get(s, a)).sum())
        .collect()
}

/// `d_π·r_π` for a general reward table.
pub fn average_reward_value(
    d: &[f64],
    pi: &StochasticPolicy,
    reward: &RewardTable,
) -> Result<f64> {
    check_dim("average reward value", pi.n_states(), d.len())?;
    check_dim("average reward value", pi.n_states(), reward.n_states())?;
    Ok(dot(d, &policy_reward(pi, reward)))
}

/// Exact average value of `pi` under `reward` (solves for `d_π` first).
pub fn policy_value(mdp: &TabularMdp, pi: &StochasticPolicy, reward: &RewardTable) -> Result<f64> {
    mdp.check_reward(reward)?;
    let d = stationary_distribution(mdp, pi, STATIONARY_TOL)?;
    average_reward_value(d.as_slice(), pi, reward)
}

/// Smallest `t ≥ 1` with `max_{x₀} TV(P^t(x₀,·), d) ≤ ε`, by explicit iteration.
pub fn chain_mixing_time(p: &DMatrix<f64>, d: &[f64], epsilon: f64, cap: usize) -> Result<usize> {
    if !(epsilon > 0.0 && epsilon < 1.0) {
        return Err(Error::Invalid {
            what: "mixing epsilon",
            reason: format!("{epsilon} not in (0,1)"),
        });
    }
    let n = p.nrows();
    let mut pt = p.clone();
    let mut last_tv = f64::INFINITY;
    for t in 1..=cap {
        last_tv = (0..n)
            .map(|x0| 0.5 * (0..n).map(|j| (pt[(x0, j)] - d[j]).abs()).sum::<f64>())
            .fold(0.0, f64::max);
        if last_tv <= epsilon {
            return Ok(t);
        }
        pt = &pt * p;
    }
    Err(Error::MixingTimeout { cap, last_tv })
}

pub fn mixing_time(
    mdp: &TabularMdp,
    pi: &StochasticPolicy,
    epsilon: f64,
    cap: usize,
) -> Result<usize> {
    let p = policy_transition(mdp, pi)?;
    let d = chain_stationary(&p, STATIONARY_TOL, &pi.label())?;
    chain_mixing_time(&p, &d, epsilon, cap)
}

#[inline]
pub(crate) fn sample_index<R: Rng>(rng: &mut R, probs: &[f64]) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (i, &p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return i;
        }
    }
    // Rounding left `u` past the cumulative sum; fall back to the last supported index.
    probs.iter().rposition(|&p| p > 0.0).unwrap_or(probs.len() - 1)
}

/// Rolls out `horizon` steps from `s₀ ∼ ρ` and averages rewards and features.
pub fn monte_carlo_estimate(
    mdp: &TabularMdp,
    pi: &StochasticPolicy,
    reward: &RewardTable,
    horizon: usize,
    seed: u64,
) -> Result<TrajectoryEstimate> {
    mdp.check_policy(pi)?;
    mdp.check_reward(reward)?;
    if horizon == 0 {
        return Err(Error::Invalid {
            what: "horizon",
            reason: "must be at least 1".into(),
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut s = sample_index(&mut rng, mdp.initial_distribution());
    let mut r_sum = 0.0;
    let mut f_sum = vec![0.0; mdp.n_features()];
    for _ in 0..horizon {
        let a = sample_index(&mut rng, pi.row(s));
        r_sum += reward.get(s, a);
        for (acc, f) in f_sum.iter_mut().zip(mdp.feature(s, a)) {
            *acc += f;
        }
        s = sample_index(&mut rng, mdp.transition_row(a, s));
    }
    let t = horizon as f64;
    Ok(TrajectoryEstimate {
        v_hat: r_sum / t,
        psi_hat: f_sum.into_iter().map(|x| x / t).collect(),
        horizon,
        seed,
    })
}

/// Result of an occupancy-measure linear program.
#[derive(Debug, Clone)]
pub struct OccupancySolution {
    /// `x(s,a)`, row-major by state.
    pub occupancy: Vec<f64>,
    pub objective: f64,
}

/// Maximizes `Σ x(s,a) r(s,a)` over stationary state-action occupancies,
/// optionally subject to `Σ x(s,a) c(s,a) ≥ level`. Returns `None` when infeasible.
///
/// When the optimal vertex found first induces a chain with several recurrent
/// classes, the lexicographically smallest optimal occupancy is returned instead.
pub fn solve_occupancy_lp(
    mdp: &TabularMdp,
    objective: &RewardTable,
    constraint: Option<(&RewardTable, f64)>,
) -> Result<Option<OccupancySolution>> {
    mdp.check_reward(objective)?;
    if let Some((c, _)) = constraint {
        mdp.check_reward(c)?;
    }
    let mut lp = OccupancyLp::new(mdp, constraint);
    let nx = lp.nx;
    let Some((x, value)) = lp.maximize(objective.values())? else {
        return Ok(None);
    };
    if occupancy_is_unichain(mdp, &x)? {
        return Ok(Some(OccupancySolution {
            occupancy: x,
            objective: value,
        }));
    }
    let scale = objective.max_abs().max(1.0);
    lp.add_inequality(objective.values(), value - LEX_TOL * scale, true);
    let mut best = x;
    for i in 0..nx {
        let mut c = vec![0.0; nx];
        c[i] = -1.0;
        match lp.maximize(&c)? {
            Some((xi, neg_min)) => {
                best = xi;
                let mut row = vec![0.0; nx];
                row[i] = 1.0;
                lp.add_inequality(&row, -neg_min + LEX_TOL, false);
            }
            None => break,
        }
    }
    let value = dot(&best, objective.values());
    Ok(Some(OccupancySolution {
        occupancy: best,
        objective: value,
    }))
}

const LEX_TOL: f64 = 1e-10;

fn occupancy_is_unichain(mdp: &TabularMdp, x: &[f64]) -> Result<bool> {
    let pi = policy_from_occupancy(mdp, x)?;
    let p = policy_transition(mdp, &pi)?;
    match chain_stationary(&p, STATIONARY_TOL, "occupancy policy") {
        Ok(_) => Ok(true),
        Err(Error::NonErgodic { .. }) => Ok(false),
        Err(e) => Err(e),
    }
}

/// Occupancy polytope as equality rows over `x` plus appended slack columns.
struct OccupancyLp {
    nx: usize,
    rows: Vec<Vec<f64>>,
    b: Vec<f64>,
    /// Per row: sign of its slack column, if any.
    slacks: Vec<Option<f64>>,
}

impl OccupancyLp {
    fn new(mdp: &TabularMdp, constraint: Option<(&RewardTable, f64)>) -> Self {
        let n = mdp.n_states();
        let na = mdp.n_actions();
        let nx = n * na;
        let mut lp = Self {
            nx,
            rows: Vec::with_capacity(n + 1),
            b: Vec::with_capacity(n + 1),
            slacks: Vec::new(),
        };
        // Flow balance for all but the last state (the dropped row is implied).
        for sp in 0..n - 1 {
            let mut row = vec![0.0; nx];
            for s in 0..n {
                for act in 0..na {
                    row[s * na + act] -= mdp.transition_row(act, s)[sp];
                }
            }
            for act in 0..na {
                row[sp * na + act] += 1.0;
            }
            lp.rows.push(row);
            lp.b.push(0.0);
            lp.slacks.push(None);
        }
        lp.rows.push(vec![1.0; nx]);
        lp.b.push(1.0);
        lp.slacks.push(None);
        if let Some((c, level)) = constraint {
            lp.add_inequality(c.values(), level, true);
        }
        lp
    }

    /// `row·x ≥ rhs` when `lower`, else `row·x ≤ rhs`.
    fn add_inequality(&mut self, row: &[f64], rhs: f64, lower: bool) {
        self.rows.push(row.to_vec());
        self.b.push(rhs);
        self.slacks.push(Some(if lower { -1.0 } else { 1.0 }));
    }

    fn maximize(&self, c: &[f64]) -> Result<Option<(Vec<f64>, f64)>> {
        let n_slack = self.slacks.iter().filter(|s| s.is_some()).count();
        let n_vars = self.nx + n_slack;
        let mut a = Vec::with_capacity(self.rows.len());
        let mut k = self.nx;
        for (row, slack) in self.rows.iter().zip(&self.slacks) {
            let mut full = row.clone();
            full.resize(n_vars, 0.0);
            if let Some(sign) = slack {
                full[k] = *sign;
                k += 1;
            }
            a.push(full);
        }
        let mut cost = c.to_vec();
        cost.resize(n_vars, 0.0);
        let lp = EqualityLp {
            n_vars,
            a,
            b: self.b.clone(),
            c: cost,
        };
        match lp.solve() {
            LpOutcome::Optimal { mut x, value } => {
                x.truncate(self.nx);
                Ok(Some((x, value)))
            }
            LpOutcome::Infeasible => Ok(None),
            LpOutcome::Unbounded => Err(Error::Internal("occupancy LP reported unbounded".into())),
        }
    }
}

/// Recovers `π(a|s) = x(s,a)/Σ_a x(s,a)` on occupied states.
///
/// Unoccupied states are completed so that the chain flows into the occupied
/// set: in rounds, each such state takes the action with the largest one-step
/// probability of entering the states reached so far (lowest index on ties).
/// States that cannot reach the occupied set at all fall back to uniform.
pub fn policy_from_occupancy(mdp: &TabularMdp, occupancy: &[f64]) -> Result<StochasticPolicy> {
    let n = mdp.n_states();
    let na = mdp.n_actions();
    check_dim("occupancy", n * na, occupancy.len())?;
    let mut probs = vec![0.0; n * na];
    let mut reached = vec![false; n];
    for s in 0..n {
        let row = &occupancy[s * na..(s + 1) * na];
        let mass: f64 = row.iter().sum();
        if mass > OCCUPANCY_TOL {
            for a in 0..na {
                let p = row[a].max(0.0) / mass;
                // Solver round-off left behind by the lexicographic refinement.
                probs[s * na + a] = if p < ACTION_PROB_FLOOR { 0.0 } else { p };
            }
            let total: f64 = probs[s * na..(s + 1) * na].iter().sum();
            probs[s * na..(s + 1) * na].iter_mut().for_each(|p| *p /= total);
            reached[s] = true;
        }
    }
    loop {
        let snapshot = reached.clone();
        let mut progress = false;
        for s in (0..n).filter(|&s| !snapshot[s]) {
            let mut best: Option<(usize, f64)> = None;
            for a in 0..na {
                let into: f64 = mdp
                    .transition_row(a, s)
                    .iter()
                    .zip(&snapshot)
                    .filter(|(_, &r)| r)
                    .map(|(p, _)| p)
                    .sum();
                if into > 0.0 && best.is_none_or(|(_, b)| into > b) {
                    best = Some((a, into));
                }
            }
            if let Some((a, _)) = best {
                probs[s * na + a] = 1.0;
                reached[s] = true;
                progress = true;
            }
        }
        if !progress {
            break;
        }
    }
    for s in (0..n).filter(|&s| !reached[s]) {
        probs[s * na..(s + 1) * na].iter_mut().for_each(|p| *p = 1.0 / na as f64);
    }
    StochasticPolicy::new(n, na, probs)
}

/// Exact average-reward optimal control through the occupancy LP.
///
/// Returns the recovered policy and the optimal average reward.
pub fn optimal_average_policy(
    mdp: &TabularMdp,
    reward: &RewardTable,
) -> Result<(StochasticPolicy, f64)> {
    // The optimal policy is invariant to positive scaling; solving on a unit
    // scale makes the pivot tolerances independent of the reward magnitude.
    let scale = reward.max_abs();
    let scaled = if scale > 0.0 {
        reward.map(|v| v / scale)
    } else {
        reward.clone()
    };
    let sol = solve_occupancy_lp(mdp, &scaled, None)?.ok_or_else(|| {
        Error::Internal("unconstrained occupancy LP is infeasible".into())
    })?;
    let pi = policy_from_occupancy(mdp, &sol.occupancy)?;
    Ok((pi, dot(&sol.occupancy, reward.values())))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    /// Two states, actions {stay, swap}, one-hot state features.
    pub(crate) fn gadget(reward0: f64, reward1: f64) -> TabularMdp {
        let stay = vec![vec![1.0, 0.0], vec![0.0, 1.0]];
        let swap = vec![vec![0.0, 1.0], vec![1.0, 0.0]];
        let phi = vec![
            vec![vec![1.0, 0.0], vec![1.0, 0.0]],
            vec![vec![0.0, 1.0], vec![0.0, 1.0]],
        ];
        TabularMdp::new(
            vec![stay, swap],
            phi,
            RewardTable::from_state_values(2, &[reward0, reward1]),
            vec![0.5, 0.5],
        )
        .unwrap()
    }

    fn swap_policy(p_swap: f64) -> StochasticPolicy {
        StochasticPolicy::new(2, 2, vec![1.0 - p_swap, p_swap, 1.0 - p_swap, p_swap]).unwrap()
    }

    fn chain(rows: &[&[f64]]) -> DMatrix<f64> {
        let n = rows.len();
        DMatrix::from_fn(n, n, |i, j| rows[i][j])
    }

    #[test]
    fn policy_transition_examples() {
        let mdp = gadget(1.0, 0.0);
        let p = policy_transition(&mdp, &swap_policy(1.0)).unwrap();
        assert_eq!(p, chain(&[&[0.0, 1.0], &[1.0, 0.0]]));
        let p = policy_transition(&mdp, &StochasticPolicy::uniform(2, 2)).unwrap();
        assert_eq!(p, chain(&[&[0.5, 0.5], &[0.5, 0.5]]));
        let p = policy_transition(&mdp, &swap_policy(0.8)).unwrap();
        assert_abs_diff_eq!(p, chain(&[&[0.2, 0.8], &[0.8, 0.2]]), epsilon = 1e-15);
    }

    #[test]
    fn policy_transition_shape_mismatch() {
        let mdp = gadget(1.0, 0.0);
        let pi = StochasticPolicy::uniform(3, 2);
        assert!(matches!(
            policy_transition(&mdp, &pi),
            Err(Error::Dimension { .. })
        ));
    }

    #[test]
    fn stationary_examples() {
        let d = chain_stationary(&chain(&[&[0.2, 0.8], &[0.8, 0.2]]), 1e-12, "t").unwrap();
        assert_abs_diff_eq!(d[0], 0.5, epsilon = 1e-14);
        let d = chain_stationary(&chain(&[&[0.9, 0.1], &[0.5, 0.5]]), 1e-12, "t").unwrap();
        assert_abs_diff_eq!(d[0], 5.0 / 6.0, epsilon = 1e-14);
        assert_abs_diff_eq!(d[1], 1.0 / 6.0, epsilon = 1e-14);
        let err = chain_stationary(&chain(&[&[1.0, 0.0], &[0.0, 1.0]]), 1e-12, "self loops");
        assert!(matches!(err, Err(Error::NonErgodic { nullity: 2, .. })));
    }

    #[test]
    fn non_ergodic_policy_is_named() {
        let mdp = gadget(1.0, 0.0);
        let err = stationary_distribution(&mdp, &swap_policy(0.0), 1e-10).unwrap_err();
        match err {
            Error::NonErgodic { policy, .. } => assert!(policy.contains("[0, 0]")),
            other => panic!("unexpected {other}"),
        }
    }

    #[test]
    fn one_hot_successor_features_equal_stationary() {
        let mdp = gadget(1.0, 0.0);
        // π(swap|0) = 0.1, π(swap|1) = 0.5 gives the [[0.9,0.1],[0.5,0.5]] chain.
        let pi = StochasticPolicy::new(2, 2, vec![0.9, 0.1, 0.5, 0.5]).unwrap();
        let psi = successor_features(&mdp, &pi).unwrap();
        assert_abs_diff_eq!(psi.0[0], 5.0 / 6.0, epsilon = 1e-12);
        assert_abs_diff_eq!(psi.0[1], 1.0 / 6.0, epsilon = 1e-12);
        assert_abs_diff_eq!(average_value(&psi.0, &[1.0, 0.0]).unwrap(), 5.0 / 6.0, epsilon = 1e-12);
        assert_eq!(average_value(&psi.0, &[0.0, 0.0]).unwrap(), 0.0);
        assert!(average_value(&psi.0, &[0.0]).is_err());
    }

    #[test]
    fn constant_features_give_constant_sf() {
        let stay = vec![vec![0.7, 0.3], vec![0.4, 0.6]];
        let swap = vec![vec![0.1, 0.9], vec![0.8, 0.2]];
        let c = vec![0.3, 0.9, 0.0];
        let phi = vec![vec![c.clone(), c.clone()], vec![c.clone(), c.clone()]];
        let mdp = TabularMdp::new(
            vec![stay, swap],
            phi,
            RewardTable::zeros(2, 2),
            vec![1.0, 0.0],
        )
        .unwrap();
        for p in [0.0, 0.3, 1.0] {
            let psi = successor_features(&mdp, &swap_policy(p)).unwrap();
            for (x, y) in psi.0.iter().zip(&c) {
                assert_abs_diff_eq!(x, y, epsilon = 1e-12);
            }
        }
    }

    #[test]
    fn mixing_time_examples() {
        let p = chain(&[&[0.2, 0.8], &[0.8, 0.2]]);
        // TV after t steps is 0.5·0.6^t: 0.108 at t=3, 0.0648 at t=4.
        assert_eq!(chain_mixing_time(&p, &[0.5, 0.5], 0.1, 1000).unwrap(), 4);
        let rank_one = chain(&[&[0.3, 0.7], &[0.3, 0.7]]);
        assert_eq!(chain_mixing_time(&rank_one, &[0.3, 0.7], 0.01, 1000).unwrap(), 1);
        let mdp = gadget(1.0, 0.0);
        match mixing_time(&mdp, &swap_policy(1.0), 0.1, DEFAULT_MIXING_CAP) {
            Err(Error::MixingTimeout { last_tv, cap }) => {
                assert_eq!(cap, DEFAULT_MIXING_CAP);
                assert_abs_diff_eq!(last_tv, 0.5, epsilon = 1e-12);
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn running_average_examples() {
        let avg = RunningAverage::new(0.9).updated(1.0);
        assert_abs_diff_eq!(avg.value, 0.1, epsilon = 1e-15);
        assert_eq!(avg.decay, 0.9);
        let avg = RunningAverage { value: 7.0, decay: 0.0 }.updated(-2.5);
        assert_eq!(avg.value, -2.5);
        let mut avg = RunningAverage { value: 4.0, decay: 0.9 };
        for k in 1..=50 {
            avg = avg.updated(1.0);
            let expected = 1.0 + 3.0 * 0.9f64.powi(k);
            assert_abs_diff_eq!(avg.value, expected, epsilon = 1e-12);
        }
    }

    #[test]
    fn monte_carlo_constant_reward() {
        let mdp = gadget(1.0, 1.0);
        for (t, seed) in [(1, 0), (17, 3), (1000, 99)] {
            let est = monte_carlo_estimate(&mdp, &swap_policy(0.3), mdp.extrinsic_reward(), t, seed)
                .unwrap();
            assert_eq!(est.v_hat, 1.0);
            assert_eq!(est.horizon, t);
        }
    }

    #[test]
    fn monte_carlo_symmetric_chain() {
        let mdp = gadget(1.0, 0.0);
        let est = monte_carlo_estimate(&mdp, &swap_policy(0.8), mdp.extrinsic_reward(), 100_000, 5)
            .unwrap();
        assert!((0.49..=0.51).contains(&est.v_hat), "{}", est.v_hat);
        let again = monte_carlo_estimate(&mdp, &swap_policy(0.8), mdp.extrinsic_reward(), 100_000, 5)
            .unwrap();
        assert_eq!(est, again);
        assert!(monte_carlo_estimate(&mdp, &swap_policy(0.8), mdp.extrinsic_reward(), 0, 5).is_err());
    }

    #[test]
    fn optimal_policy_on_gadget() {
        let mdp = gadget(1.0, 0.0);
        let (pi, v) = optimal_average_policy(&mdp, mdp.extrinsic_reward()).unwrap();
        assert_abs_diff_eq!(v, 1.0, epsilon = 1e-12);
        assert_eq!(pi.row(0), &[1.0, 0.0]);
        assert_eq!(pi.row(1), &[0.0, 1.0]);
    }

    #[test]
    fn constant_reward_optimum() {
        let mdp = gadget(0.25, 0.25);
        let (_, v) = optimal_average_policy(&mdp, mdp.extrinsic_reward()).unwrap();
        assert_abs_diff_eq!(v, 0.25, epsilon = 1e-12);
    }

    #[test]
    fn mdp_validation() {
        let bad_row = vec![vec![vec![0.5, 0.4], vec![0.0, 1.0]]];
        let phi = vec![vec![vec![0.0]], vec![vec![0.0]]];
        assert!(TabularMdp::new(bad_row, phi.clone(), RewardTable::zeros(2, 1), vec![1.0, 0.0]).is_err());
        let p = vec![vec![vec![1.0, 0.0], vec![0.0, 1.0]]];
        let bad_phi = vec![vec![vec![1.5]], vec![vec![0.0]]];
        assert!(TabularMdp::new(p.clone(), bad_phi, RewardTable::zeros(2, 1), vec![1.0, 0.0]).is_err());
        assert!(TabularMdp::new(p, phi, RewardTable::zeros(2, 1), vec![0.6, 0.6]).is_err());
    }
}
