//! The incremental set-building loop.
//!
//! The set starts with an optimal policy for the extrinsic reward. Each
//! further iteration builds a diversity reward from the SFs found so far,
//! solves the constrained MDP against `α·v_e*`, estimates the new policy's
//! SFs and appends it. `v_e*` only ever moves up.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::cmdp::{
    solve_cmdp_lp, solve_cmdp_primal_dual, CmdpSolution, CmdpSpec, InnerConfig, LagrangeConfig, TraceRow,
};
use crate::diversity::{
    diversity_reward, reward_discrimination, reward_robustness, DiversityMechanism, MechanismKind, PolicyEntry,
    PolicySet,
};
use crate::error::{Error, Result};
use crate::mdp::{
    dot, monte_carlo_estimate, optimal_average_policy, policy_value, stationary_distribution,
    successor_features_from, RewardTable, RunningVector, StationaryDistribution, StochasticPolicy, TabularMdp,
    STATIONARY_TOL,
};

/// Where the constraint reward comes from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ConstraintReward {
    #[default]
    Extrinsic,
    Robustness,
    Discrimination,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SolverKind {
    #[default]
    Lp,
    PrimalDual,
}

fn default_mc_horizon() -> usize {
    1000
}
fn default_mc_trajectories() -> usize {
    20
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum SfEstimator {
    #[default]
    Exact,
    /// `trajectories` rollouts of `horizon` steps, combined with the running
    /// average (decay `a_d`) seeded by the first rollout.
    MonteCarlo {
        #[serde(default = "default_mc_horizon")]
        horizon: usize,
        #[serde(default = "default_mc_trajectories")]
        trajectories: usize,
    },
}

fn default_n_policies() -> usize {
    8
}
fn default_alpha() -> f64 {
    0.9
}
fn default_mechanism() -> DiversityMechanism {
    DiversityMechanism::new(MechanismKind::Min)
}
fn default_fixed_point_iters() -> usize {
    25
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DspConfig {
    #[serde(default = "default_n_policies")]
    pub n_policies: usize,
    #[serde(default = "default_alpha")]
    pub alpha: f64,
    #[serde(default = "default_mechanism")]
    pub mechanism_d: DiversityMechanism,
    #[serde(default)]
    pub mechanism_e: ConstraintReward,
    #[serde(default)]
    pub solver: SolverKind,
    #[serde(default)]
    pub estimator: SfEstimator,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub lagrange: LagrangeConfig,
    #[serde(default)]
    pub inner: InnerConfig,
    /// LP solver with a policy-dependent diversity reward: rounds of
    /// re-solving against the SFs of the previous round's solution.
    #[serde(default = "default_fixed_point_iters")]
    pub fixed_point_iters: usize,
}

impl Default for DspConfig {
    fn default() -> Self {
        Self {
            n_policies: default_n_policies(),
            alpha: default_alpha(),
            mechanism_d: default_mechanism(),
            mechanism_e: ConstraintReward::Extrinsic,
            solver: SolverKind::Lp,
            estimator: SfEstimator::Exact,
            seed: 0,
            lagrange: LagrangeConfig::default(),
            inner: InnerConfig::default(),
            fixed_point_iters: default_fixed_point_iters(),
        }
    }
}

impl DspConfig {
    pub fn with_mechanism(mut self, kind: MechanismKind) -> Self {
        self.mechanism_d.kind = kind;
        self
    }

    pub fn validate(&self) -> Result<()> {
        let invalid = |what, reason: String| Err(Error::Invalid { what, reason });
        if self.n_policies == 0 {
            return invalid("n_policies", "must be at least 1".into());
        }
        if !(0.0..=1.0).contains(&self.alpha) {
            return invalid("alpha", format!("{} not in [0,1]", self.alpha));
        }
        self.mechanism_d.validate()?;
        if let Some(p) = &self.mechanism_d.prior {
            if p.len() != self.n_policies {
                return invalid(
                    "prior",
                    format!("length {} differs from n_policies {}", p.len(), self.n_policies),
                );
            }
        }
        if let SfEstimator::MonteCarlo { horizon, trajectories } = self.estimator {
            if horizon == 0 || trajectories == 0 {
                return invalid("estimator", "horizon and trajectories must be positive".into());
            }
        }
        let l = &self.lagrange;
        if !(0.0..=1.0).contains(&l.decay) {
            return invalid("decay", format!("{} not in [0,1]", l.decay));
        }
        if l.update_period == 0 {
            return invalid("update_period", "must be at least 1".into());
        }
        if !(l.entropy_weight >= 0.0) || !(l.learning_rate > 0.0) {
            return invalid("lagrange", "entropy_weight ≥ 0 and learning_rate > 0 required".into());
        }
        if self.inner.steps == 0 || !(self.inner.policy_lr > 0.0) {
            return invalid("inner", "steps and policy_lr must be positive".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct IterationRecord {
    pub index: usize,
    /// Exact value under this iteration's constraint reward.
    pub v_e: f64,
    /// The value fed to the `v_e*` reset (equals `v_e` with exact estimation).
    pub v_e_estimate: f64,
    /// `v_e*` the constraint was built against.
    pub v_star: f64,
    /// Exact value under the diversity reward; absent for the first policy.
    pub v_d: Option<f64>,
    /// `v_e ≥ α·v_e*` up to 1e-9 (LP) or the configured slack (primal-dual).
    pub feasible: bool,
    /// The CMDP was infeasible (or the primal-dual run never became feasible)
    /// and a fallback policy was kept.
    pub flagged: bool,
    /// Robustness reward degenerated to zero.
    pub degenerate: bool,
    pub stationary: StationaryDistribution,
    pub trace: Vec<TraceRow>,
}

impl IterationRecord {
    /// `v_e / v_e*`, when `v_e*` is non-zero.
    pub fn value_ratio(&self) -> Option<f64> {
        (self.v_star != 0.0).then(|| self.v_e / self.v_star)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DiversityMetrics {
    pub min_distance: Option<f64>,
    pub mean_distance: Option<f64>,
    pub value_ratios: Vec<Option<f64>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DspResult {
    pub set: PolicySet,
    pub records: Vec<IterationRecord>,
    pub metrics: DiversityMetrics,
}

fn distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

/// Min and mean pairwise SF distance plus `v_e/v_e*` per policy.
pub fn diversity_metrics(set: &PolicySet) -> DiversityMetrics {
    let sfs = set.sfs();
    let mut dists = Vec::new();
    for i in 0..sfs.len() {
        for j in i + 1..sfs.len() {
            dists.push(distance(&sfs[i], &sfs[j]));
        }
    }
    let (min_distance, mean_distance) = if dists.is_empty() {
        (None, None)
    } else {
        (
            Some(dists.iter().cloned().fold(f64::INFINITY, f64::min)),
            Some(dists.iter().sum::<f64>() / dists.len() as f64),
        )
    };
    let value_ratios = set
        .entries
        .iter()
        .map(|e| (set.v_star != 0.0 && set.v_star.is_finite()).then(|| e.v_e / set.v_star))
        .collect();
    DiversityMetrics {
        min_distance,
        mean_distance,
        value_ratios,
    }
}

/// For each policy, the smallest SF distance to any earlier policy.
pub fn min_distance_to_earlier(set: &PolicySet) -> Vec<Option<f64>> {
    let sfs = set.sfs();
    (0..sfs.len())
        .map(|i| {
            (0..i)
                .map(|j| distance(&sfs[i], &sfs[j]))
                .fold(None, |m: Option<f64>, d| Some(m.map_or(d, |m| m.min(d))))
        })
        .collect()
}

/// Renormalized leading `k` entries of the configured prior.
fn truncated_prior(mech: &DiversityMechanism, k: usize) -> DiversityMechanism {
    let mut m = mech.clone();
    if let Some(p) = &mech.prior {
        let head = &p[..k];
        let z: f64 = head.iter().sum();
        m.prior = Some(head.iter().map(|x| x / z).collect());
    }
    m
}

struct Estimate {
    psi: Vec<f64>,
    v_e: f64,
}

fn estimate(
    mdp: &TabularMdp,
    pi: &StochasticPolicy,
    d: &StationaryDistribution,
    r_e: &RewardTable,
    estimator: SfEstimator,
    decay: f64,
    rng: &mut ChaCha8Rng,
) -> Result<Estimate> {
    match estimator {
        SfEstimator::Exact => Ok(Estimate {
            psi: successor_features_from(mdp, pi, &d.0).0,
            v_e: policy_value(mdp, pi, r_e)?,
        }),
        SfEstimator::MonteCarlo { horizon, trajectories } => {
            let mut psi = RunningVector::zeros(mdp.n_features(), decay);
            let mut v = 0.0;
            for k in 0..trajectories {
                let est = monte_carlo_estimate(mdp, pi, r_e, horizon, rng.random())?;
                if k == 0 {
                    psi.value = est.psi_hat;
                    v = est.v_hat;
                } else {
                    psi.update(&est.psi_hat);
                    v = decay * v + (1.0 - decay) * est.v_hat;
                }
            }
            Ok(Estimate { psi: psi.value, v_e: v })
        }
    }
}

/// Constraint reward and its optimum for the current set.
fn constraint_reward(
    mdp: &TabularMdp,
    cfg: &DspConfig,
    set: &PolicySet,
) -> Result<(RewardTable, Option<f64>)> {
    match cfg.mechanism_e {
        ConstraintReward::Extrinsic => Ok((mdp.extrinsic_reward().clone(), None)),
        ConstraintReward::Robustness => {
            let r = reward_robustness(set, mdp, &cfg.mechanism_d)?.table;
            let (_, v) = optimal_average_policy(mdp, &r)?;
            Ok((r, Some(v)))
        }
        ConstraintReward::Discrimination => {
            // The newest member plays the role of the policy being identified.
            let (last, rest) = set.entries.split_last().expect("set starts non-empty");
            let others = PolicySet {
                entries: rest.to_vec(),
                v_star: set.v_star,
            };
            let mech = truncated_prior(&cfg.mechanism_d, set.len());
            let r = reward_discrimination(&others, &last.psi.0, mdp, &mech)?;
            let (_, v) = optimal_average_policy(mdp, &r)?;
            Ok((r, Some(v)))
        }
    }
}

struct Solved {
    solution: CmdpSolution,
    r_d: RewardTable,
    flagged: bool,
}

fn solve_lp_or_fallback(mdp: &TabularMdp, spec: &CmdpSpec) -> Result<(CmdpSolution, bool)> {
    match solve_cmdp_lp(mdp, spec) {
        Ok(sol) => Ok((sol, false)),
        Err(Error::Infeasible { .. }) => {
            let (policy, v_e) = optimal_average_policy(mdp, &spec.constraint_reward)?;
            let v_d = policy_value(mdp, &policy, &spec.diversity_reward)?;
            Ok((
                CmdpSolution {
                    policy,
                    v_d,
                    v_e,
                    feasible: false,
                    converged: false,
                    trace: Vec::new(),
                },
                true,
            ))
        }
        Err(e) => Err(e),
    }
}

fn solve_iteration(
    mdp: &TabularMdp,
    cfg: &DspConfig,
    set: &PolicySet,
    r_e: RewardTable,
    v_star: f64,
    seed: u64,
) -> Result<(Solved, bool)> {
    let mech = truncated_prior(&cfg.mechanism_d, (set.len() + 1).min(cfg.n_policies));
    if mech.is_policy_dependent() {
        let refresh = |psi: &[f64]| reward_discrimination(set, psi, mdp, &mech);
        return match cfg.solver {
            SolverKind::PrimalDual => {
                let spec = CmdpSpec::new(RewardTable::zeros(mdp.n_states(), mdp.n_actions()), r_e, cfg.alpha, v_star)?;
                let sol = solve_cmdp_primal_dual(mdp, &spec, &cfg.lagrange, &cfg.inner, seed, Some(&refresh))?;
                let psi = successor_features_from(mdp, &sol.policy, &stationary_distribution(mdp, &sol.policy, STATIONARY_TOL)?.0).0;
                let r_d = refresh(&psi)?;
                let flagged = !sol.feasible;
                Ok((Solved { solution: sol, r_d, flagged }, false))
            }
            SolverKind::Lp => {
                // Start where the primal-dual actor starts (uniform policy) and
                // iterate to a fixed point.
                let uniform = StochasticPolicy::uniform(mdp.n_states(), mdp.n_actions());
                let d = stationary_distribution(mdp, &uniform, STATIONARY_TOL)?;
                let mut psi = successor_features_from(mdp, &uniform, &d.0).0;
                let mut last = None;
                for _ in 0..cfg.fixed_point_iters.max(1) {
                    let r_d = refresh(&psi)?;
                    let spec = CmdpSpec::new(r_d.clone(), r_e.clone(), cfg.alpha, v_star)?;
                    let (sol, flagged) = solve_lp_or_fallback(mdp, &spec)?;
                    let d = stationary_distribution(mdp, &sol.policy, STATIONARY_TOL)?;
                    let next = successor_features_from(mdp, &sol.policy, &d.0).0;
                    let moved = distance(&next, &psi);
                    psi = next;
                    last = Some(Solved { solution: sol, r_d, flagged });
                    if moved < 1e-9 {
                        break;
                    }
                }
                let mut solved = last.expect("at least one round");
                // Report the diversity value against the reward of the returned policy.
                solved.r_d = refresh(&psi)?;
                solved.solution.v_d = policy_value(mdp, &solved.solution.policy, &solved.r_d)?;
                Ok((solved, false))
            }
        };
    }
    let reward = diversity_reward(&mech, set, mdp, None)?;
    let spec = CmdpSpec::new(reward.table.clone(), r_e, cfg.alpha, v_star)?;
    let (solution, flagged) = match cfg.solver {
        SolverKind::Lp => solve_lp_or_fallback(mdp, &spec)?,
        SolverKind::PrimalDual => {
            let sol = solve_cmdp_primal_dual(mdp, &spec, &cfg.lagrange, &cfg.inner, seed, None)?;
            let flagged = !sol.feasible;
            (sol, flagged)
        }
    };
    Ok((
        Solved {
            solution,
            r_d: reward.table,
            flagged,
        },
        reward.degenerate,
    ))
}

pub fn run_dsp(mdp: &TabularMdp, cfg: &DspConfig) -> Result<DspResult> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut set = PolicySet::new();
    let mut records = Vec::with_capacity(cfg.n_policies);

    let r_ext = mdp.extrinsic_reward().clone();
    let (pi0, v0) = optimal_average_policy(mdp, &r_ext)?;
    let d0 = stationary_distribution(mdp, &pi0, STATIONARY_TOL)?;
    let est0 = estimate(mdp, &pi0, &d0, &r_ext, cfg.estimator, cfg.lagrange.decay, &mut rng)?;
    set.push(PolicyEntry::new(pi0, est0.psi, v0));
    set.reset_v_star(v0);
    records.push(IterationRecord {
        index: 0,
        v_e: v0,
        v_e_estimate: est0.v_e,
        v_star: v0,
        v_d: None,
        feasible: true,
        flagged: false,
        degenerate: false,
        stationary: d0,
        trace: Vec::new(),
    });

    for index in 1..cfg.n_policies {
        let (r_e, derived_star) = constraint_reward(mdp, cfg, &set)?;
        if let Some(v) = derived_star {
            set.v_star = v;
        }
        let v_star = set.v_star;
        let seed: u64 = rng.random();
        let (solved, degenerate) = solve_iteration(mdp, cfg, &set, r_e.clone(), v_star, seed)?;
        let pi = solved.solution.policy;
        let d = stationary_distribution(mdp, &pi, STATIONARY_TOL)?;
        let est = estimate(mdp, &pi, &d, &r_e, cfg.estimator, cfg.lagrange.decay, &mut rng)?;
        let v_e = dot(&d.0, &crate::mdp::policy_reward(&pi, &r_e));
        let v_d = dot(&d.0, &crate::mdp::policy_reward(&pi, &solved.r_d));
        let tol = match cfg.solver {
            SolverKind::Lp => 1e-9,
            SolverKind::PrimalDual => cfg.inner.feasibility_slack * v_star.abs(),
        };
        let feasible = v_e >= cfg.alpha * v_star - tol;
        set.push(PolicyEntry::new(pi, est.psi, v_e));
        if cfg.mechanism_e == ConstraintReward::Extrinsic {
            set.reset_v_star(est.v_e);
        }
        records.push(IterationRecord {
            index,
            v_e,
            v_e_estimate: est.v_e,
            v_star,
            v_d: Some(v_d),
            feasible,
            flagged: solved.flagged,
            degenerate,
            stationary: d,
            trace: solved.solution.trace,
        });
    }
    let metrics = diversity_metrics(&set);
    Ok(DspResult { set, records, metrics })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::envs::{build_env, EnvConfig};
    use approx::assert_abs_diff_eq;

    fn entry(psi: Vec<f64>, v_e: f64) -> PolicyEntry {
        PolicyEntry::new(StochasticPolicy::uniform(1, 1), psi, v_e)
    }

    #[test]
    fn metrics_examples() {
        let mut set = PolicySet::new();
        set.push(entry(vec![1.0, 0.0], 1.0));
        set.push(entry(vec![1.0, 0.0], 0.9));
        assert_eq!(diversity_metrics(&set).min_distance, Some(0.0));

        let mut set = PolicySet::new();
        set.push(entry(vec![1.0, 0.0], 1.0));
        set.push(entry(vec![0.0, 1.0], 0.5));
        set.reset_v_star(1.0);
        let m = diversity_metrics(&set);
        assert_abs_diff_eq!(m.min_distance.unwrap(), 2f64.sqrt(), epsilon = 1e-15);
        assert_eq!(m.value_ratios, vec![Some(1.0), Some(0.5)]);

        let mut single = PolicySet::new();
        single.push(entry(vec![1.0], 1.0));
        let m = diversity_metrics(&single);
        assert_eq!((m.min_distance, m.mean_distance), (None, None));
    }

    #[test]
    fn min_distance_to_earlier_examples() {
        let mut set = PolicySet::new();
        set.push(entry(vec![0.0, 0.0], 1.0));
        set.push(entry(vec![3.0, 4.0], 1.0));
        set.push(entry(vec![0.0, 1.0], 1.0));
        assert_eq!(min_distance_to_earlier(&set), vec![None, Some(5.0), Some(1.0)]);
    }

    #[test]
    fn single_policy_run_is_initialization_only() {
        let mdp = build_env(&EnvConfig::gridworld(3, 3)).unwrap();
        let cfg = DspConfig {
            n_policies: 1,
            ..DspConfig::default()
        };
        let res = run_dsp(&mdp, &cfg).unwrap();
        let (_, v) = optimal_average_policy(&mdp, mdp.extrinsic_reward()).unwrap();
        assert_eq!(res.set.len(), 1);
        assert_eq!(res.set.v_star, v);
        assert_eq!(res.records.len(), 1);
    }

    #[test]
    fn gridworld_min_mechanism_meets_constraint() {
        let mdp = build_env(&EnvConfig::gridworld(4, 4)).unwrap();
        let res = run_dsp(&mdp, &DspConfig::default()).unwrap();
        assert_eq!(res.set.len(), 8);
        let v_star = res.set.v_star;
        let mut prev = f64::NEG_INFINITY;
        for r in &res.records {
            assert!(!r.flagged);
            assert!(r.v_e >= 0.9 * v_star - 1e-6, "{} < {}", r.v_e, 0.9 * v_star);
            assert!(r.v_star >= prev);
            prev = r.v_star;
        }
    }

    #[test]
    fn alpha_zero_is_pure_diversity() {
        let mdp = build_env(&EnvConfig::gridworld(3, 3)).unwrap();
        let cfg = DspConfig {
            n_policies: 3,
            alpha: 0.0,
            ..DspConfig::default()
        };
        let res = run_dsp(&mdp, &cfg).unwrap();
        let set = PolicySet {
            entries: res.set.entries[..1].to_vec(),
            v_star: res.set.v_star,
        };
        let r_d = crate::diversity::reward_min(&set, &mdp, &cfg.mechanism_d).unwrap();
        let (_, best) = optimal_average_policy(&mdp, &r_d).unwrap();
        assert_abs_diff_eq!(res.records[1].v_d.unwrap(), best, epsilon = 1e-9);
    }

    #[test]
    fn runs_are_deterministic() {
        let mdp = build_env(&EnvConfig::gridworld(3, 3)).unwrap();
        let cfg = DspConfig {
            n_policies: 3,
            estimator: SfEstimator::MonteCarlo {
                horizon: 200,
                trajectories: 3,
            },
            seed: 5,
            ..DspConfig::default()
        };
        assert_eq!(run_dsp(&mdp, &cfg).unwrap(), run_dsp(&mdp, &cfg).unwrap());
    }

    #[test]
    fn every_mechanism_runs() {
        let mdp = build_env(&EnvConfig::gridworld(3, 3)).unwrap();
        for kind in [
            MechanismKind::None,
            MechanismKind::Average,
            MechanismKind::Min,
            MechanismKind::Discrimination,
            MechanismKind::Robustness,
        ] {
            for mechanism_e in [
                ConstraintReward::Extrinsic,
                ConstraintReward::Robustness,
                ConstraintReward::Discrimination,
            ] {
                let cfg = DspConfig {
                    n_policies: 3,
                    mechanism_e,
                    ..DspConfig::default().with_mechanism(kind)
                };
                let res = run_dsp(&mdp, &cfg).unwrap_or_else(|e| panic!("{kind:?}/{mechanism_e:?}: {e}"));
                assert_eq!(res.set.len(), 3);
            }
        }
    }

    #[test]
    fn primal_dual_solver_runs_on_gadget() {
        let mdp = build_env(&EnvConfig::two_state().with_noise(0.05)).unwrap();
        let cfg = DspConfig {
            n_policies: 2,
            solver: SolverKind::PrimalDual,
            inner: InnerConfig {
                steps: 3000,
                ..InnerConfig::default()
            },
            ..DspConfig::default()
        };
        let res = run_dsp(&mdp, &cfg).unwrap();
        assert_eq!(res.records[1].trace.len(), 3000);
    }

    #[test]
    fn config_validation() {
        let bad = DspConfig {
            alpha: 1.5,
            ..DspConfig::default()
        };
        assert!(matches!(bad.validate(), Err(Error::Invalid { what: "alpha", .. })));
        let bad = DspConfig {
            n_policies: 0,
            ..DspConfig::default()
        };
        assert!(bad.validate().is_err());
        let json = r#"{"n_policies": 2, "alpha": 0.5, "mechanism_d": {"kind": "average"}}"#;
        let cfg: DspConfig = serde_json::from_str(json).unwrap();
        assert_eq!(cfg.mechanism_d.temperature, 3.0);
        assert_eq!(cfg.lagrange, LagrangeConfig::default());
        assert!(serde_json::from_str::<DspConfig>(r#"{"bogus": 1}"#).is_err());
    }
}
