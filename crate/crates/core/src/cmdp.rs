//! Per-iteration constrained MDP: maximize `d_π·r_d` subject to `d_π·r_e ≥ α·v_e*`.
//!
//! Two solvers are provided. [`solve_cmdp_lp`] is an exact linear program
//! over occupancy measures. [`solve_cmdp_primal_dual`] is the Lagrangian
//! scheme with a sigmoid multiplier: the policy ascends the combined reward
//! `σ(λ)·r_e + (1 − σ(λ))·r_d` while `λ` descends
//! `f(λ) = σ(λ)(v̂ − α·v_e*) − a_h·H(σ(λ))` every `N_λ` policy steps.
//! The policy is a tabular softmax whose average-reward gradient is computed
//! exactly from the stationary distribution and the differential values.

use std::io::{self, Write};

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, Result};
use crate::mdp::{
    chain_stationary, dot, monte_carlo_estimate, optimal_average_policy, policy_from_occupancy,
    policy_reward, policy_transition, sample_index, solve_occupancy_lp, successor_features_from,
    RewardTable, RunningAverage, RunningVector, StochasticPolicy, TabularMdp, STATIONARY_TOL,
};

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Binary entropy in nats.
pub fn binary_entropy(p: f64) -> f64 {
    let term = |q: f64| if q > 0.0 { -q * q.ln() } else { 0.0 };
    term(p) + term(1.0 - p)
}

/// `σ(λ)·r_e + (1 − σ(λ))·r_d`.
pub fn combined_reward(lambda: f64, r_e: &RewardTable, r_d: &RewardTable) -> Result<RewardTable> {
    check_dim("combined reward states", r_e.n_states(), r_d.n_states())?;
    check_dim("combined reward actions", r_e.n_actions(), r_d.n_actions())?;
    let s = sigmoid(lambda);
    let values = r_e
        .values()
        .iter()
        .zip(r_d.values())
        .map(|(e, d)| s * e + (1.0 - s) * d)
        .collect();
    RewardTable::new(r_e.n_states(), r_e.n_actions(), values)
}

#[derive(Debug, Clone, PartialEq)]
pub struct CmdpSpec {
    pub diversity_reward: RewardTable,
    pub constraint_reward: RewardTable,
    pub alpha: f64,
    pub v_star: f64,
}

impl CmdpSpec {
    pub fn new(diversity_reward: RewardTable, constraint_reward: RewardTable, alpha: f64, v_star: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&alpha) {
            return Err(Error::Invalid {
                what: "alpha",
                reason: format!("{alpha} not in [0,1]"),
            });
        }
        check_dim("cmdp reward states", constraint_reward.n_states(), diversity_reward.n_states())?;
        check_dim("cmdp reward actions", constraint_reward.n_actions(), diversity_reward.n_actions())?;
        Ok(Self {
            diversity_reward,
            constraint_reward,
            alpha,
            v_star,
        })
    }

    /// `α·v_e*`
    pub fn level(&self) -> f64 {
        self.alpha * self.v_star
    }
}

/// Dual-variable state of the sigmoid Lagrangian.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LagrangeState {
    pub lambda: f64,
    pub entropy_weight: f64,
    pub learning_rate: f64,
    pub update_period: usize,
    pub v_hat: RunningAverage,
}

impl LagrangeState {
    pub fn new(cfg: &LagrangeConfig) -> Self {
        Self {
            lambda: cfg.initial_lambda,
            entropy_weight: cfg.entropy_weight,
            learning_rate: cfg.learning_rate,
            update_period: cfg.update_period,
            v_hat: RunningAverage::new(cfg.decay),
        }
    }

    pub fn sigma(&self) -> f64 {
        sigmoid(self.lambda)
    }
}

/// `f(λ) = σ(λ)(v̂ − α·v*) − a_h·H(σ(λ))`.
pub fn lagrange_objective(state: &LagrangeState, v_hat: f64, alpha: f64, v_star: f64) -> f64 {
    let s = state.sigma();
    s * (v_hat - alpha * v_star) - state.entropy_weight * binary_entropy(s)
}

/// `f′(λ) = σ(1 − σ)·[(v̂ − α·v*) − a_h·ln((1 − σ)/σ)]`.
pub fn lagrange_gradient(state: &LagrangeState, v_hat: f64, alpha: f64, v_star: f64) -> f64 {
    let s = state.sigma();
    let log_odds = -state.lambda; // ln((1 − σ)/σ)
    s * (1.0 - s) * ((v_hat - alpha * v_star) - state.entropy_weight * log_odds)
}

/// One gradient-descent step on `f` using the state's running estimate `v̂`.
#[must_use]
pub fn lagrange_step(state: &LagrangeState, alpha: f64, v_star: f64) -> LagrangeState {
    let g = lagrange_gradient(state, state.v_hat.value, alpha, v_star);
    LagrangeState {
        lambda: state.lambda - state.learning_rate * g,
        ..*state
    }
}

/// Softmax logits `θ(s,a)`.
#[derive(Debug, Clone, PartialEq)]
pub struct SoftmaxPolicyParams {
    n_states: usize,
    n_actions: usize,
    pub theta: Vec<f64>,
}

impl SoftmaxPolicyParams {
    pub fn zeros(n_states: usize, n_actions: usize) -> Self {
        Self {
            n_states,
            n_actions,
            theta: vec![0.0; n_states * n_actions],
        }
    }

    pub fn from_theta(n_states: usize, n_actions: usize, theta: Vec<f64>) -> Result<Self> {
        check_dim("softmax parameters", n_states * n_actions, theta.len())?;
        Ok(Self {
            n_states,
            n_actions,
            theta,
        })
    }

    pub fn policy(&self) -> StochasticPolicy {
        let mut probs = Vec::with_capacity(self.theta.len());
        for row in self.theta.chunks(self.n_actions) {
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = row.iter().map(|t| (t - m).exp()).collect();
            let z: f64 = e.iter().sum();
            let mut p: Vec<f64> = e.iter().map(|x| x / z).collect();
            // Fold rounding into the largest entry so rows sum to one.
            let total: f64 = p.iter().sum();
            let imax = (0..p.len()).max_by(|&a, &b| p[a].partial_cmp(&p[b]).unwrap()).unwrap();
            p[imax] += 1.0 - total;
            probs.extend(p);
        }
        StochasticPolicy::new(self.n_states, self.n_actions, probs)
            .expect("softmax rows are distributions")
    }
}

/// Exact quantities of a policy needed by the primal-dual loop.
#[derive(Debug, Clone)]
pub struct PolicyEvaluation {
    pub policy: StochasticPolicy,
    pub stationary: Vec<f64>,
    pub psi: Vec<f64>,
}

pub fn evaluate_policy(mdp: &TabularMdp, policy: StochasticPolicy) -> Result<PolicyEvaluation> {
    let p = policy_transition(mdp, &policy)?;
    let d = chain_stationary(&p, STATIONARY_TOL, "softmax policy")?;
    let psi = successor_features_from(mdp, &policy, &d).0;
    Ok(PolicyEvaluation {
        policy,
        stationary: d,
        psi,
    })
}

/// Differential values `h` solving `h = r_π − v·1 + P^π h` with `d·h = 0`.
pub fn differential_values(p: &DMatrix<f64>, d: &[f64], r_pi: &[f64]) -> Result<(Vec<f64>, f64)> {
    let n = d.len();
    let v = dot(d, r_pi);
    let mut a = DMatrix::<f64>::identity(n, n) - p;
    for i in 0..n {
        for j in 0..n {
            a[(i, j)] += d[j];
        }
    }
    let rhs = DVector::from_iterator(n, r_pi.iter().map(|r| r - v));
    let h = a
        .lu()
        .solve(&rhs)
        .ok_or_else(|| Error::Internal("Poisson system is singular".into()))?;
    Ok((h.iter().copied().collect(), v))
}

/// Exact gradient of the average reward with respect to the softmax logits:
/// `∂v/∂θ(s,a) = d(s)·π(a|s)·(Q(s,a) − V(s))`.
pub fn exact_policy_gradient(
    mdp: &TabularMdp,
    eval: &PolicyEvaluation,
    reward: &RewardTable,
) -> Result<(Vec<f64>, f64)> {
    let pi = &eval.policy;
    let p = policy_transition(mdp, pi)?;
    let r_pi = policy_reward(pi, reward);
    let (h, v) = differential_values(&p, &eval.stationary, &r_pi)?;
    let n = mdp.n_states();
    let na = mdp.n_actions();
    let mut grad = vec![0.0; n * na];
    for s in 0..n {
        let q: Vec<f64> = (0..na)
            .map(|a| reward.get(s, a) - v + dot(mdp.transition_row(a, s), &h))
            .collect();
        let vs: f64 = (0..na).map(|a| pi.prob(s, a) * q[a]).sum();
        for a in 0..na {
            grad[s * na + a] = eval.stationary[s] * pi.prob(s, a) * (q[a] - vs);
        }
    }
    Ok((grad, v))
}

/// Likelihood-ratio estimate of the same gradient from one trajectory, using
/// truncated differential returns `Σ_{k<H} (r_{t+k} − v̄)`.
pub fn sampled_policy_gradient(
    mdp: &TabularMdp,
    pi: &StochasticPolicy,
    reward: &RewardTable,
    horizon: usize,
    window: usize,
    rng: &mut ChaCha8Rng,
) -> Vec<f64> {
    let n = mdp.n_states();
    let na = mdp.n_actions();
    let total = horizon + window;
    let mut states = Vec::with_capacity(total);
    let mut actions = Vec::with_capacity(total);
    let mut rewards = Vec::with_capacity(total);
    let mut s = sample_index(rng, mdp.initial_distribution());
    for _ in 0..total {
        let a = sample_index(rng, pi.row(s));
        states.push(s);
        actions.push(a);
        rewards.push(reward.get(s, a));
        s = sample_index(rng, mdp.transition_row(a, s));
    }
    let v_bar = rewards.iter().sum::<f64>() / total as f64;
    let mut grad = vec![0.0; n * na];
    let mut run: f64 = rewards[..window].iter().map(|r| r - v_bar).sum();
    for t in 0..horizon {
        let (st, at) = (states[t], actions[t]);
        for b in 0..na {
            let score = f64::from(u8::from(b == at)) - pi.prob(st, b);
            grad[st * na + b] += score * run;
        }
        run += rewards[t + window] - rewards[t];
    }
    grad.iter_mut().for_each(|g| *g /= horizon as f64);
    grad
}

fn default_entropy_weight() -> f64 {
    0.01
}
fn default_lagrange_lr() -> f64 {
    0.1
}
fn default_update_period() -> usize {
    30
}
fn default_decay() -> f64 {
    0.9
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LagrangeConfig {
    #[serde(default = "default_entropy_weight")]
    pub entropy_weight: f64,
    #[serde(default = "default_lagrange_lr")]
    pub learning_rate: f64,
    #[serde(default = "default_update_period")]
    pub update_period: usize,
    /// Running-average decay `a_d` for `v̂` and `ψ̂`.
    #[serde(default = "default_decay")]
    pub decay: f64,
    #[serde(default)]
    pub initial_lambda: f64,
}

impl Default for LagrangeConfig {
    fn default() -> Self {
        Self {
            entropy_weight: default_entropy_weight(),
            learning_rate: default_lagrange_lr(),
            update_period: default_update_period(),
            decay: default_decay(),
            initial_lambda: 0.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum GradientMode {
    Exact,
    Sampled { horizon: usize, window: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum ValueEstimate {
    Exact,
    MonteCarlo { horizon: usize },
}

fn default_steps() -> usize {
    150_000
}
fn default_policy_lr() -> f64 {
    8.0
}
fn default_slack() -> f64 {
    0.01
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InnerConfig {
    /// Policy-gradient steps per CMDP solve.
    #[serde(default = "default_steps")]
    pub steps: usize,
    #[serde(default = "default_policy_lr")]
    pub policy_lr: f64,
    #[serde(default = "exact_gradient")]
    pub gradient: GradientMode,
    /// How the constraint value fed to `v̂` (and `ψ̂`) is measured.
    #[serde(default = "exact_estimate")]
    pub estimate: ValueEstimate,
    /// An iterate counts as feasible when `v_e ≥ α·v* − slack·|v*|`.
    #[serde(default = "default_slack")]
    pub feasibility_slack: f64,
}

fn exact_gradient() -> GradientMode {
    GradientMode::Exact
}
fn exact_estimate() -> ValueEstimate {
    ValueEstimate::Exact
}

impl Default for InnerConfig {
    fn default() -> Self {
        Self {
            steps: default_steps(),
            policy_lr: default_policy_lr(),
            gradient: GradientMode::Exact,
            estimate: ValueEstimate::Exact,
            feasibility_slack: default_slack(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TraceRow {
    pub step: usize,
    pub v_e: f64,
    pub v_d: f64,
    pub sigma_lambda: f64,
    pub feasible: bool,
}

/// Appends `step,v_e,v_d,sigma_lambda,feasible` rows (no header).
pub fn write_trace_rows<W: Write>(out: &mut W, rows: &[TraceRow]) -> io::Result<()> {
    for r in rows {
        writeln!(out, "{},{},{},{},{}", r.step, r.v_e, r.v_d, r.sigma_lambda, r.feasible)?;
    }
    Ok(())
}

#[derive(Debug, Clone)]
pub struct CmdpSolution {
    pub policy: StochasticPolicy,
    pub v_d: f64,
    pub v_e: f64,
    /// `v_e ≥ α·v*` (LP: within 1e-9; primal-dual: within the configured slack).
    pub feasible: bool,
    /// Primal-dual only: the last iterate was itself feasible.
    pub converged: bool,
    pub trace: Vec<TraceRow>,
}

/// Exact CMDP solution over occupancy measures.
pub fn solve_cmdp_lp(mdp: &TabularMdp, spec: &CmdpSpec) -> Result<CmdpSolution> {
    let level = spec.level();
    let scale = spec.diversity_reward.max_abs();
    let objective = if scale > 0.0 {
        spec.diversity_reward.map(|v| v / scale)
    } else {
        spec.diversity_reward.clone()
    };
    let sol = solve_occupancy_lp(mdp, &objective, Some((&spec.constraint_reward, level)))?;
    let Some(sol) = sol else {
        let (_, best_v_e) = optimal_average_policy(mdp, &spec.constraint_reward)?;
        return Err(Error::Infeasible {
            required: level,
            best_v_e,
        });
    };
    let policy = policy_from_occupancy(mdp, &sol.occupancy)?;
    let v_d = dot(&sol.occupancy, spec.diversity_reward.values());
    let v_e = dot(&sol.occupancy, spec.constraint_reward.values());
    Ok(CmdpSolution {
        policy,
        v_d,
        v_e,
        feasible: v_e >= level - 1e-9,
        converged: true,
        trace: Vec::new(),
    })
}

/// Supplies `r_d` from the running SF estimate of the current policy.
pub type DiversityRefresh<'a> = dyn Fn(&[f64]) -> Result<RewardTable> + 'a;

/// Sigmoid-Lagrangian primal-dual solve.
///
/// Returns the best feasible iterate by diversity value (latest on ties);
/// with a policy-dependent `r_d` the latest feasible iterate. If no iterate
/// is feasible the one with the largest constraint value is returned with
/// `feasible = false`.
pub fn solve_cmdp_primal_dual(
    mdp: &TabularMdp,
    spec: &CmdpSpec,
    lagrange: &LagrangeConfig,
    inner: &InnerConfig,
    seed: u64,
    refresh: Option<&DiversityRefresh<'_>>,
) -> Result<CmdpSolution> {
    let n = mdp.n_states();
    let na = mdp.n_actions();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut params = SoftmaxPolicyParams::zeros(n, na);
    let mut state = LagrangeState::new(lagrange);
    let mut psi_hat = RunningVector::zeros(mdp.n_features(), lagrange.decay);
    let mut r_d = spec.diversity_reward.clone();
    let level = spec.level();
    let slack = inner.feasibility_slack * spec.v_star.abs();
    let period = lagrange.update_period.max(1);

    let mut trace = Vec::with_capacity(inner.steps);
    let mut best_feasible: Option<(f64, StochasticPolicy, f64, f64)> = None;
    let mut best_any: Option<(StochasticPolicy, f64, f64)> = None;
    let mut last_feasible = false;

    for step in 0..inner.steps.max(1) {
        let eval = evaluate_policy(mdp, params.policy())?;
        let v_e = dot(&eval.stationary, &policy_reward(&eval.policy, &spec.constraint_reward));
        let mc = match inner.estimate {
            ValueEstimate::Exact => None,
            ValueEstimate::MonteCarlo { horizon } => Some(monte_carlo_estimate(
                mdp,
                &eval.policy,
                &spec.constraint_reward,
                horizon,
                rand::Rng::random(&mut rng),
            )?),
        };
        if let Some(refresh) = refresh {
            psi_hat.update(mc.as_ref().map_or(&eval.psi, |m| &m.psi_hat));
            r_d = refresh(&psi_hat.value)?;
        }
        let v_d = dot(&eval.stationary, &policy_reward(&eval.policy, &r_d));
        let feasible = v_e >= level - slack;
        trace.push(TraceRow {
            step,
            v_e,
            v_d,
            sigma_lambda: state.sigma(),
            feasible,
        });
        last_feasible = feasible;
        if feasible {
            let better = refresh.is_some()
                || best_feasible.as_ref().is_none_or(|(b, ..)| v_d >= *b);
            if better {
                best_feasible = Some((v_d, eval.policy.clone(), v_d, v_e));
            }
        } else if best_feasible.is_none() && best_any.as_ref().is_none_or(|(_, _, e)| v_e > *e) {
            best_any = Some((eval.policy.clone(), v_d, v_e));
        }

        let reward = combined_reward(state.lambda, &spec.constraint_reward, &r_d)?;
        let grad = match inner.gradient {
            GradientMode::Exact => exact_policy_gradient(mdp, &eval, &reward)?.0,
            GradientMode::Sampled { horizon, window } => {
                sampled_policy_gradient(mdp, &eval.policy, &reward, horizon, window.max(1), &mut rng)
            }
        };
        for (t, g) in params.theta.iter_mut().zip(&grad) {
            *t += inner.policy_lr * g;
        }

        state.v_hat = state.v_hat.updated(mc.map_or(v_e, |m| m.v_hat));
        if (step + 1) % period == 0 {
            state = lagrange_step(&state, spec.alpha, spec.v_star);
        }
    }

    let (policy, v_d, v_e, feasible) = match (best_feasible, best_any) {
        (Some((_, pi, v_d, v_e)), _) => (pi, v_d, v_e, true),
        (None, Some((pi, v_d, v_e))) => (pi, v_d, v_e, false),
        (None, None) => return Err(Error::Internal("primal-dual loop ran no steps".into())),
    };
    Ok(CmdpSolution {
        policy,
        v_d,
        v_e,
        feasible,
        converged: last_feasible,
        trace,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::envs::{build_env, EnvConfig, FeatureKind};
    use crate::mdp::{policy_value, successor_features};
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    fn gadget() -> TabularMdp {
        build_env(&EnvConfig::two_state()).unwrap()
    }

    fn indicator(state: usize) -> RewardTable {
        RewardTable::from_fn(2, 2, |s, _| if s == state { 1.0 } else { 0.0 })
    }

    fn lagrange(lambda: f64, a_h: f64, v_hat: f64) -> LagrangeState {
        LagrangeState {
            lambda,
            entropy_weight: a_h,
            learning_rate: 0.1,
            update_period: 30,
            v_hat: RunningAverage { value: v_hat, decay: 0.9 },
        }
    }

    #[test]
    fn combined_reward_examples() {
        let r_e = indicator(0);
        let r_d = indicator(1);
        let r = combined_reward(0.0, &r_e, &r_d).unwrap();
        assert_eq!(r.values(), &[0.5, 0.5, 0.5, 0.5]);
        let r = combined_reward(50.0, &r_e, &r_d).unwrap();
        for (a, b) in r.values().iter().zip(r_e.values()) {
            assert_abs_diff_eq!(a, b, epsilon = 1e-12);
        }
    }

    #[test]
    fn lagrange_objective_examples() {
        let st = lagrange(0.0, 0.01, 0.0);
        assert_abs_diff_eq!(lagrange_objective(&st, 0.45, 0.9, 0.5), -0.01 * 2f64.ln(), epsilon = 1e-15);
        assert_abs_diff_eq!(lagrange_objective(&st, 0.45, 0.9, 0.5), -0.006931471805599453, epsilon = 1e-15);
        let st = lagrange(1.3, 0.0, 0.0);
        assert_abs_diff_eq!(lagrange_objective(&st, 0.7, 1.0, 0.4), sigmoid(1.3) * 0.3, epsilon = 1e-15);
        let st = lagrange(0.0, 0.0, 0.0);
        assert_abs_diff_eq!(lagrange_objective(&st, 0.4, 0.0, 1.0), 0.2, epsilon = 1e-15);
    }

    #[test]
    fn lagrange_step_examples() {
        let up = lagrange_step(&lagrange(0.3, 0.0, 0.8), 0.9, 0.5);
        assert!(up.lambda < 0.3);
        let down = lagrange_step(&lagrange(0.3, 0.0, 0.2), 0.9, 0.5);
        assert!(down.lambda > 0.3);
        let st = lagrange(0.0, 0.0, 0.4);
        let next = lagrange_step(&st, 0.0, 1.0);
        assert_abs_diff_eq!(next.lambda, -0.01, epsilon = 1e-15);
        assert_eq!(next.v_hat, st.v_hat);
        assert_eq!(next.update_period, 30);
    }

    #[test]
    fn lagrange_gradient_matches_finite_differences() {
        for &(lambda, a_h, v_hat) in &[(0.2, 0.01, 0.3), (-1.5, 0.05, 0.9), (2.0, 0.0, 0.1)] {
            let st = lagrange(lambda, a_h, v_hat);
            let eps = 1e-6;
            let f = |l: f64| lagrange_objective(&lagrange(l, a_h, v_hat), v_hat, 0.9, 0.5);
            let fd = (f(lambda + eps) - f(lambda - eps)) / (2.0 * eps);
            assert_abs_diff_eq!(lagrange_gradient(&st, v_hat, 0.9, 0.5), fd, epsilon = 1e-9);
        }
    }

    #[test]
    fn entropy_fixed_point_is_one_half() {
        let mut st = lagrange(1.5, 0.01, 0.45);
        for _ in 0..200_000 {
            st = lagrange_step(&st, 0.9, 0.5);
        }
        assert_abs_diff_eq!(st.sigma(), 0.5, epsilon = 1e-6);
    }

    #[test]
    fn lp_gadget_example() {
        let mdp = gadget();
        let spec = CmdpSpec::new(indicator(1), indicator(0), 0.5, 1.0).unwrap();
        let sol = solve_cmdp_lp(&mdp, &spec).unwrap();
        assert_abs_diff_eq!(sol.v_d, 0.5, epsilon = 1e-12);
        assert_abs_diff_eq!(sol.v_e, 0.5, epsilon = 1e-12);
        assert!(sol.feasible);
        assert_eq!(sol.policy.row(0), &[0.0, 1.0]);
        assert_eq!(sol.policy.row(1), &[0.0, 1.0]);
        let d = crate::mdp::stationary_distribution(&mdp, &sol.policy, 1e-10).unwrap();
        assert_abs_diff_eq!(d.0[0], 0.5, epsilon = 1e-12);
    }

    #[test]
    fn lp_infeasible_reports_best_value() {
        let mdp = gadget();
        let spec = CmdpSpec::new(indicator(1), indicator(0), 1.0, 2.0).unwrap();
        match solve_cmdp_lp(&mdp, &spec) {
            Err(Error::Infeasible { required, best_v_e }) => {
                assert_eq!(required, 2.0);
                assert_abs_diff_eq!(best_v_e, 1.0, epsilon = 1e-12);
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn lp_vacuous_constraint_is_unconstrained() {
        let mdp = build_env(&EnvConfig::random(5, 3, 4)).unwrap();
        let r_d = RewardTable::from_fn(5, 3, |s, a| ((s * 3 + a) as f64 * 0.37).sin().abs());
        let spec = CmdpSpec::new(r_d.clone(), mdp.extrinsic_reward().clone(), 0.0, 0.8).unwrap();
        let sol = solve_cmdp_lp(&mdp, &spec).unwrap();
        let (_, best) = optimal_average_policy(&mdp, &r_d).unwrap();
        assert_abs_diff_eq!(sol.v_d, best, epsilon = 1e-10);
    }

    #[test]
    fn lp_aligned_objectives() {
        let mdp = build_env(&EnvConfig::random(5, 2, 9)).unwrap();
        let r_e = mdp.extrinsic_reward().clone();
        let (_, v_star) = optimal_average_policy(&mdp, &r_e).unwrap();
        let spec = CmdpSpec::new(r_e.clone(), r_e.clone(), 0.9, v_star).unwrap();
        let sol = solve_cmdp_lp(&mdp, &spec).unwrap();
        assert_abs_diff_eq!(sol.v_d, v_star, epsilon = 1e-10);
        assert_abs_diff_eq!(policy_value(&mdp, &sol.policy, &r_e).unwrap(), v_star, epsilon = 1e-9);
    }

    #[test]
    fn cmdp_spec_rejects_bad_alpha() {
        assert!(CmdpSpec::new(indicator(1), indicator(0), 1.5, 1.0).is_err());
    }

    fn finite_difference_gradient(mdp: &TabularMdp, theta: &[f64], reward: &RewardTable) -> Vec<f64> {
        let (n, na) = (mdp.n_states(), mdp.n_actions());
        let value = |t: &[f64]| {
            let pi = SoftmaxPolicyParams::from_theta(n, na, t.to_vec()).unwrap().policy();
            policy_value(mdp, &pi, reward).unwrap()
        };
        let eps = 1e-5;
        (0..theta.len())
            .map(|i| {
                let mut plus = theta.to_vec();
                let mut minus = theta.to_vec();
                plus[i] += eps;
                minus[i] -= eps;
                (value(&plus) - value(&minus)) / (2.0 * eps)
            })
            .collect()
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]

        #[test]
        fn exact_gradient_matches_finite_differences(
            seed in 0u64..1000,
            theta in prop::collection::vec(-2.0f64..2.0, 12),
        ) {
            let mdp = build_env(&EnvConfig::random(4, 3, seed)).unwrap();
            let params = SoftmaxPolicyParams::from_theta(4, 3, theta.clone()).unwrap();
            let eval = evaluate_policy(&mdp, params.policy()).unwrap();
            let (grad, _) = exact_policy_gradient(&mdp, &eval, mdp.extrinsic_reward()).unwrap();
            let fd = finite_difference_gradient(&mdp, &theta, mdp.extrinsic_reward());
            let scale = fd.iter().fold(0.0f64, |m, g| m.max(g.abs())).max(1e-8);
            for (g, f) in grad.iter().zip(&fd) {
                prop_assert!((g - f).abs() <= 1e-5 * scale, "{g} vs {f}");
            }
        }

        #[test]
        fn combined_reward_stays_in_unit_interval(
            lambda in -30.0f64..30.0,
            re in prop::collection::vec(0.0f64..=1.0, 6),
            rd in prop::collection::vec(0.0f64..=1.0, 6),
        ) {
            let r_e = RewardTable::new(3, 2, re).unwrap();
            let r_d = RewardTable::new(3, 2, rd).unwrap();
            let r = combined_reward(lambda, &r_e, &r_d).unwrap();
            prop_assert!(r.values().iter().all(|v| (0.0..=1.0).contains(v)));
        }

        #[test]
        fn lagrange_direction_opposes_constraint_gap(lambda in -5.0f64..5.0, v_hat in 0.0f64..1.0, v_star in 0.1f64..1.0) {
            let st = lagrange(lambda, 0.0, v_hat);
            let gap = v_hat - 0.9 * v_star;
            prop_assume!(gap.abs() > 1e-9);
            let next = lagrange_step(&st, 0.9, v_star);
            prop_assert_eq!((next.lambda - lambda).signum(), -gap.signum());
        }
    }

    #[test]
    fn primal_dual_matches_lp_on_gadget() {
        let mdp = gadget();
        let spec = CmdpSpec::new(indicator(1), indicator(0), 0.5, 1.0).unwrap();
        let sol = solve_cmdp_primal_dual(&mdp, &spec, &LagrangeConfig::default(), &InnerConfig::default(), 0, None).unwrap();
        assert!(sol.feasible);
        assert!(sol.v_e >= 0.5 - 0.01, "v_e = {}", sol.v_e);
        assert!((sol.v_d - 0.5).abs() <= 0.05 * 0.5, "v_d = {}", sol.v_d);
    }

    #[test]
    fn primal_dual_without_diversity_maximizes_extrinsic() {
        let mdp = build_env(&EnvConfig::random(5, 3, 21)).unwrap();
        let r_e = mdp.extrinsic_reward().clone();
        let (_, v_star) = optimal_average_policy(&mdp, &r_e).unwrap();
        let spec = CmdpSpec::new(RewardTable::zeros(5, 3), r_e, 0.9, v_star).unwrap();
        let sol = solve_cmdp_primal_dual(&mdp, &spec, &LagrangeConfig::default(), &InnerConfig::default(), 0, None).unwrap();
        assert!((sol.v_e - v_star).abs() <= 0.01 * v_star, "{} vs {v_star}", sol.v_e);
    }

    #[test]
    fn primal_dual_is_deterministic() {
        let mdp = build_env(&EnvConfig::random(4, 2, 3).with_features(FeatureKind::RandomUniform { dim: 2 })).unwrap();
        let r_d = RewardTable::linear(&mdp, &[-1.0, 0.5]).unwrap();
        let (_, v_star) = optimal_average_policy(&mdp, mdp.extrinsic_reward()).unwrap();
        let spec = CmdpSpec::new(r_d, mdp.extrinsic_reward().clone(), 0.9, v_star).unwrap();
        let inner = InnerConfig {
            steps: 600,
            gradient: GradientMode::Sampled { horizon: 200, window: 20 },
            estimate: ValueEstimate::MonteCarlo { horizon: 100 },
            ..InnerConfig::default()
        };
        let a = solve_cmdp_primal_dual(&mdp, &spec, &LagrangeConfig::default(), &inner, 17, None).unwrap();
        let b = solve_cmdp_primal_dual(&mdp, &spec, &LagrangeConfig::default(), &inner, 17, None).unwrap();
        assert_eq!(a.trace, b.trace);
        assert_eq!(a.policy, b.policy);
    }

    #[test]
    fn sampled_gradient_points_along_exact_gradient() {
        let mdp = build_env(&EnvConfig::random(4, 2, 5)).unwrap();
        let params = SoftmaxPolicyParams::from_theta(4, 2, vec![0.3, -0.2, 0.0, 0.5, -0.4, 0.1, 0.2, 0.0]).unwrap();
        let eval = evaluate_policy(&mdp, params.policy()).unwrap();
        let (exact, _) = exact_policy_gradient(&mdp, &eval, mdp.extrinsic_reward()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let sampled = sampled_policy_gradient(&mdp, &eval.policy, mdp.extrinsic_reward(), 400_000, 30, &mut rng);
        let cos = dot(&exact, &sampled) / (dot(&exact, &exact).sqrt() * dot(&sampled, &sampled).sqrt());
        assert!(cos > 0.9, "cosine {cos}");
    }

    #[test]
    fn discrimination_refresh_uses_running_sf() {
        let mdp = build_env(&EnvConfig::chain(3)).unwrap();
        let (_, v_star) = optimal_average_policy(&mdp, mdp.extrinsic_reward()).unwrap();
        let spec = CmdpSpec::new(RewardTable::zeros(3, 3), mdp.extrinsic_reward().clone(), 0.5, v_star).unwrap();
        let calls = std::cell::Cell::new(0usize);
        let refresh = |psi: &[f64]| {
            calls.set(calls.get() + 1);
            RewardTable::linear(&mdp, &psi.iter().map(|p| -p).collect::<Vec<_>>())
        };
        let inner = InnerConfig { steps: 50, ..InnerConfig::default() };
        let sol = solve_cmdp_primal_dual(&mdp, &spec, &LagrangeConfig::default(), &inner, 0, Some(&refresh)).unwrap();
        assert_eq!(calls.get(), 50);
        assert_eq!(sol.trace.len(), 50);
        let _ = successor_features(&mdp, &sol.policy).unwrap();
    }
}
