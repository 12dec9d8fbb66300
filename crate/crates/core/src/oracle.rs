//! Brute-force ground truth for the solvers.
//!
//! Nothing here calls the LP, the min-norm active-set code or the
//! primal-dual loop: policies are enumerated, hulls are gridded and
//! convexity is probed pointwise.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::Exp1;

use crate::error::{Error, Result};
use crate::mdp::{
    mixing_time, monte_carlo_estimate, policy_value, stationary_distribution, successor_features_from,
    RewardTable, StochasticPolicy, TabularMdp, DEFAULT_MIXING_CAP, STATIONARY_TOL,
};

pub const ENUMERATION_CAP: u128 = 1_000_000;
/// Grid points allowed in [`hull_min_norm_check`].
pub const GRID_CAP: u128 = 50_000_000;
pub const BIAS_MIN_HORIZON: usize = 1000;

/// Every deterministic policy with its exact value and SFs. Entries are
/// `None` for policies whose chain has several recurrent classes.
#[derive(Debug, Clone)]
pub struct EnumerationResult {
    pub policies: Vec<Vec<usize>>,
    pub values: Vec<Option<f64>>,
    pub sfs: Vec<Option<Vec<f64>>>,
}

impl EnumerationResult {
    pub fn len(&self) -> usize {
        self.policies.len()
    }

    pub fn is_empty(&self) -> bool {
        self.policies.is_empty()
    }

    pub fn max_value(&self) -> Option<f64> {
        self.values.iter().flatten().cloned().reduce(f64::max)
    }

    /// SFs of the policies with a unique stationary distribution.
    pub fn ergodic_sfs(&self) -> Vec<Vec<f64>> {
        self.sfs.iter().flatten().cloned().collect()
    }
}

pub fn policy_count(mdp: &TabularMdp) -> u128 {
    (mdp.n_actions() as u128)
        .checked_pow(mdp.n_states() as u32)
        .unwrap_or(u128::MAX)
}

/// Action table number `k` in mixed radix, state 0 least significant.
pub fn decode_policy(k: u128, n_states: usize, n_actions: usize) -> Vec<usize> {
    let mut rest = k;
    (0..n_states)
        .map(|_| {
            let a = (rest % n_actions as u128) as usize;
            rest /= n_actions as u128;
            a
        })
        .collect()
}

pub fn enumerate_policies(mdp: &TabularMdp, reward: &RewardTable) -> Result<EnumerationResult> {
    let count = policy_count(mdp);
    if count > ENUMERATION_CAP {
        return Err(Error::EnumerationTooLarge {
            count,
            cap: ENUMERATION_CAP,
        });
    }
    let (n, na) = (mdp.n_states(), mdp.n_actions());
    let mut out = EnumerationResult {
        policies: Vec::with_capacity(count as usize),
        values: Vec::with_capacity(count as usize),
        sfs: Vec::with_capacity(count as usize),
    };
    for k in 0..count {
        let actions = decode_policy(k, n, na);
        let pi = StochasticPolicy::deterministic(na, &actions)?;
        match stationary_distribution(mdp, &pi, STATIONARY_TOL) {
            Ok(d) => {
                out.values.push(Some(policy_value(mdp, &pi, reward)?));
                out.sfs.push(Some(successor_features_from(mdp, &pi, &d.0).0));
            }
            Err(Error::NonErgodic { .. }) => {
                out.values.push(None);
                out.sfs.push(None);
            }
            Err(e) => return Err(e),
        }
        out.policies.push(actions);
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConvexityReport {
    pub pairs: usize,
    pub violations: usize,
    /// Largest `f((a+b)/2) − (f(a)+f(b))/2` seen; positive values consume slack.
    pub worst_gap: f64,
    pub slack: f64,
}

impl ConvexityReport {
    pub fn passed(&self) -> bool {
        self.violations == 0
    }

    pub fn slack_consumed(&self) -> f64 {
        self.worst_gap.max(0.0)
    }
}

/// A random interior point of the probability simplex with coordinates on
/// the dyadic grid `2^-30·ℕ`, so midpoints and small-integer linear
/// combinations are computed without rounding.
pub fn random_simplex_point<R: Rng>(rng: &mut R, dim: usize) -> Vec<f64> {
    const GRID: f64 = (1u64 << 30) as f64;
    loop {
        let e: Vec<f64> = (0..dim).map(|_| rng.sample::<f64, _>(Exp1)).collect();
        let z: f64 = e.iter().sum();
        let mut p: Vec<f64> = e[..dim - 1]
            .iter()
            .map(|x| ((x / z) * GRID).round().max(1.0) / GRID)
            .collect();
        let last = 1.0 - p.iter().sum::<f64>();
        if last > 0.0 {
            p.push(last);
            return p;
        }
    }
}

/// Midpoint convexity of `f` on `n_pairs` random interior pairs of the
/// `dim`-simplex: a violation is `f(mid) > (f(a)+f(b))/2 + slack`.
pub fn convexity_probe<F: Fn(&[f64]) -> f64>(
    f: F,
    dim: usize,
    n_pairs: usize,
    seed: u64,
    slack: f64,
) -> ConvexityReport {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut report = ConvexityReport {
        pairs: n_pairs,
        violations: 0,
        worst_gap: f64::NEG_INFINITY,
        slack,
    };
    for _ in 0..n_pairs {
        let a = random_simplex_point(&mut rng, dim);
        let b = random_simplex_point(&mut rng, dim);
        let mid: Vec<f64> = a.iter().zip(&b).map(|(x, y)| 0.5 * (x + y)).collect();
        let gap = f(&mid) - 0.5 * (f(&a) + f(&b));
        if gap > slack {
            report.violations += 1;
        }
        report.worst_gap = report.worst_gap.max(gap);
    }
    report
}

fn binomial(n: u128, k: u128) -> u128 {
    let k = k.min(n - k);
    (0..k).fold(1u128, |acc, i| acc.saturating_mul(n - i) / (i + 1))
}

/// Smallest `‖Σλ_i v_i‖` over the coefficient grid `{λ ∈ Δ : λ_i ∈ h·ℕ}`
/// with `h = 1/⌈1/resolution⌉`.
pub fn hull_min_norm_check(vertices: &[Vec<f64>], resolution: f64) -> Result<f64> {
    let m = vertices.len();
    if m == 0 || m > 4 {
        return Err(Error::Invalid {
            what: "vertices",
            reason: format!("grid mode takes 1 to 4 vertices, got {m}"),
        });
    }
    if !(resolution > 0.0 && resolution <= 0.1) {
        return Err(Error::Invalid {
            what: "resolution",
            reason: format!("{resolution} is outside (0, 0.1]"),
        });
    }
    let k = vertices[0].len();
    for v in vertices {
        crate::error::check_dim("hull vertex", k, v.len())?;
    }
    let steps = (1.0 / resolution).ceil() as usize;
    let points = binomial((steps + m - 1) as u128, (m - 1) as u128);
    if points > GRID_CAP {
        return Err(Error::EnumerationTooLarge {
            count: points,
            cap: GRID_CAP,
        });
    }
    let h = 1.0 / steps as f64;
    let mut best = f64::INFINITY;
    let mut counts = vec![0usize; m];
    grid_walk(vertices, steps, 0, &mut counts, h, &mut best);
    Ok(best)
}

fn grid_walk(vertices: &[Vec<f64>], left: usize, i: usize, counts: &mut [usize], h: f64, best: &mut f64) {
    let m = vertices.len();
    if i == m - 1 {
        counts[i] = left;
        let k = vertices[0].len();
        let mut norm2 = 0.0;
        for j in 0..k {
            let x: f64 = (0..m).map(|v| counts[v] as f64 * h * vertices[v][j]).sum();
            norm2 += x * x;
        }
        *best = best.min(norm2.sqrt());
        return;
    }
    for c in 0..=left {
        counts[i] = c;
        grid_walk(vertices, left - c, i + 1, counts, h, best);
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BiasRow {
    pub horizon: usize,
    pub mean_abs_error: f64,
    pub max_abs_error: f64,
    /// Fraction of seeds with error at most 5% of the reward scale.
    pub within_tolerance: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BiasReport {
    pub exact_value: f64,
    pub reward_scale: f64,
    pub mixing_time: usize,
    pub rows: Vec<BiasRow>,
}

impl BiasReport {
    /// `max(1000, 20·T_mix(0.05))`; the floor keeps fast-mixing chains out
    /// of the variance-dominated regime.
    pub fn horizon_threshold(&self) -> usize {
        BIAS_MIN_HORIZON.max(20 * self.mixing_time)
    }

    /// Every row at or beyond the threshold has ≥95% of seeds within tolerance.
    pub fn passed(&self) -> bool {
        self.rows
            .iter()
            .filter(|r| r.horizon >= self.horizon_threshold())
            .all(|r| r.within_tolerance >= 0.95)
    }
}

/// Reward range `max − min`, or 1 for a constant reward.
pub fn reward_scale(reward: &RewardTable) -> f64 {
    let v = reward.values();
    let hi = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lo = v.iter().cloned().fold(f64::INFINITY, f64::min);
    if hi > lo {
        hi - lo
    } else {
        1.0
    }
}

/// Monte-Carlo average-reward error against the exact value, per horizon.
pub fn estimator_bias_report(
    mdp: &TabularMdp,
    pi: &StochasticPolicy,
    reward: &RewardTable,
    horizons: &[usize],
    n_seeds: usize,
    seed: u64,
) -> Result<BiasReport> {
    let exact = policy_value(mdp, pi, reward)?;
    let scale = reward_scale(reward);
    let t_mix = mixing_time(mdp, pi, 0.05, DEFAULT_MIXING_CAP)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let seeds: Vec<u64> = (0..n_seeds).map(|_| rng.random()).collect();
    let mut rows = Vec::with_capacity(horizons.len());
    for &horizon in horizons {
        let mut sum = 0.0;
        let mut max: f64 = 0.0;
        let mut ok = 0usize;
        for &s in &seeds {
            let err = (monte_carlo_estimate(mdp, pi, reward, horizon, s)?.v_hat - exact).abs();
            sum += err;
            max = max.max(err);
            if err <= 0.05 * scale {
                ok += 1;
            }
        }
        rows.push(BiasRow {
            horizon,
            mean_abs_error: sum / n_seeds.max(1) as f64,
            max_abs_error: max,
            within_tolerance: ok as f64 / n_seeds.max(1) as f64,
        });
    }
    Ok(BiasReport {
        exact_value: exact,
        reward_scale: scale,
        mixing_time: t_mix,
        rows,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diversity::diayn_skill_term;
    use crate::envs::{build_env, EnvConfig};
    use crate::mdp::optimal_average_policy;
    use approx::assert_abs_diff_eq;

    #[test]
    fn enumeration_count_and_values() {
        let mdp = build_env(&EnvConfig::two_state()).unwrap();
        let res = enumerate_policies(&mdp, mdp.extrinsic_reward()).unwrap();
        assert_eq!(res.len(), 4);
        // stay/stay has two recurrent classes.
        assert_eq!(res.policies[0], vec![0, 0]);
        assert!(res.values[0].is_none());
        assert_eq!(res.max_value(), Some(1.0));
    }

    #[test]
    fn enumeration_max_matches_optimal_policy() {
        for seed in 0..10 {
            let mdp = build_env(&EnvConfig::random(5, 3, seed)).unwrap();
            let res = enumerate_policies(&mdp, mdp.extrinsic_reward()).unwrap();
            let (_, v) = optimal_average_policy(&mdp, mdp.extrinsic_reward()).unwrap();
            assert_abs_diff_eq!(res.max_value().unwrap(), v, epsilon = 1e-8);
        }
    }

    #[test]
    fn one_hot_sfs_are_distributions() {
        let mdp = build_env(&EnvConfig::chain(4)).unwrap();
        let res = enumerate_policies(&mdp, mdp.extrinsic_reward()).unwrap();
        assert_eq!(res.len(), 81);
        for psi in res.ergodic_sfs() {
            assert_abs_diff_eq!(psi.iter().sum::<f64>(), 1.0, epsilon = 1e-12);
            assert!(psi.iter().all(|&p| p >= -1e-15));
        }
    }

    #[test]
    fn enumeration_cap() {
        let mdp = build_env(&EnvConfig::gridworld(3, 3)).unwrap();
        assert!(matches!(
            enumerate_policies(&mdp, mdp.extrinsic_reward()),
            Err(Error::EnumerationTooLarge { count: 1_953_125, .. })
        ));
    }

    #[test]
    fn decode_is_mixed_radix() {
        assert_eq!(decode_policy(5, 3, 2), vec![1, 0, 1]);
        assert_eq!(decode_policy(0, 2, 3), vec![0, 0]);
    }

    #[test]
    fn convexity_probe_controls() {
        let others = [vec![0.1, 0.2, 0.3, 0.4], vec![0.4, 0.3, 0.2, 0.1]];
        let prior = [1.0 / 3.0; 3];
        let diayn = |d: &[f64]| {
            let ds = vec![d.to_vec(), others[0].clone(), others[1].clone()];
            diayn_skill_term(&ds, &prior, 0).unwrap()
        };
        let r = convexity_probe(diayn, 4, 1000, 0, 1e-10);
        assert!(r.passed(), "{r:?}");

        let concave = |d: &[f64]| -d.iter().map(|x| x * x).sum::<f64>();
        let r = convexity_probe(concave, 4, 1000, 0, 1e-10);
        assert!(!r.passed());
        assert!(r.violations > 900);

        let linear = |d: &[f64]| d.iter().enumerate().map(|(i, x)| (i as f64 + 1.0) * x).sum::<f64>();
        let r = convexity_probe(linear, 4, 1000, 0, 0.0);
        assert!(r.passed(), "{r:?}");
        assert!(r.slack_consumed() == 0.0);
    }

    #[test]
    fn hull_grid_examples() {
        let h = hull_min_norm_check(&[vec![1.0, 0.0], vec![0.0, 1.0]], 1e-3).unwrap();
        assert_abs_diff_eq!(h, 2f64.sqrt() / 2.0, epsilon = 1e-3);
        let h = hull_min_norm_check(&[vec![3.0, 4.0]], 1e-2).unwrap();
        assert_eq!(h, 5.0);
        let h = hull_min_norm_check(&[vec![1.0, 0.0], vec![-1.0, 0.0]], 1e-3).unwrap();
        assert_abs_diff_eq!(h, 0.0, epsilon = 1e-3);
        assert!(hull_min_norm_check(&[vec![1.0]], 0.5).is_err());
        assert!(hull_min_norm_check(&vec![vec![1.0]; 5], 0.01).is_err());
    }

    #[test]
    fn bias_report_on_symmetric_chain() {
        let mdp = build_env(&EnvConfig::two_state().with_noise(0.2)).unwrap();
        let pi = StochasticPolicy::uniform(2, 2);
        let rep = estimator_bias_report(&mdp, &pi, mdp.extrinsic_reward(), &[1, 100, 100_000], 20, 3).unwrap();
        assert_abs_diff_eq!(rep.exact_value, 0.5, epsilon = 1e-12);
        assert!(rep.rows[2].mean_abs_error < 0.005 * rep.reward_scale);
        assert!(rep.rows[0].max_abs_error <= 1.0);
        assert!(rep.rows[0].mean_abs_error >= rep.rows[1].mean_abs_error);
        assert!(rep.rows[1].mean_abs_error >= rep.rows[2].mean_abs_error);
        assert!(rep.passed());
    }
}
