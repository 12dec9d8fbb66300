//! Worst-case-reward game over successor features.
//!
//! For a set of SFs `Ψ`, the game `min_{‖w‖≤1} max_k ψ^k·w` has value
//! `−‖ψ̂‖`, where `ψ̂` is the min-norm point of the convex hull of `Ψ`, and the
//! minimizing reward is `w = −ψ̂/‖ψ̂‖`. Worst-case policy iteration adds the
//! best response to that reward; the fully-corrective Frank-Wolfe method on
//! `h(ψ) = ½‖ψ‖²` adds the best response to `−ψ̂`. Both share the same
//! initialization and the same deterministic best-response solver here, so
//! their policy sequences can be compared step by step.

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::diversity::{PolicyEntry, PolicySet};
use crate::error::{Error, Result};
use crate::mdp::{
    dot, optimal_average_policy, policy_from_occupancy, policy_value, stationary_distribution,
    successor_features_from, RewardTable, StochasticPolicy, TabularMdp, STATIONARY_TOL,
};

/// Below this norm the min-norm point is treated as the origin.
pub const DEGENERACY_TOL: f64 = 1e-9;
/// Largest dictionary solved by exhaustive support enumeration.
pub const BRUTE_FORCE_MAX: usize = 12;
/// Slack on the "no improving vertex" stopping test.
const STOP_TOL: f64 = 1e-10;

fn norm(v: &[f64]) -> f64 {
    dot(v, v).sqrt()
}

fn combine(vertices: &[Vec<f64>], coefficients: &[f64]) -> Vec<f64> {
    let dim = vertices[0].len();
    let mut p = vec![0.0; dim];
    for (v, &c) in vertices.iter().zip(coefficients) {
        if c != 0.0 {
            for (pi, vi) in p.iter_mut().zip(v) {
                *pi += c * vi;
            }
        }
    }
    p
}

/// The min-norm point of a convex hull and a convex combination producing it.
#[derive(Debug, Clone, PartialEq)]
pub struct MinNormPoint {
    pub point: Vec<f64>,
    /// One weight per input vertex; non-negative and summing to one.
    pub coefficients: Vec<f64>,
}

impl MinNormPoint {
    pub fn norm(&self) -> f64 {
        norm(&self.point)
    }
}

/// Minimizer of `‖Σ λ_i v_i‖` over the affine hull of `support`, or `None`
/// when the support is affinely dependent.
fn affine_min_norm(vertices: &[Vec<f64>], support: &[usize]) -> Option<Vec<f64>> {
    let k = support.len();
    let mut kkt = DMatrix::<f64>::zeros(k + 1, k + 1);
    for (i, &a) in support.iter().enumerate() {
        for (j, &b) in support.iter().enumerate() {
            kkt[(i, j)] = dot(&vertices[a], &vertices[b]);
        }
        kkt[(i, k)] = 1.0;
        kkt[(k, i)] = 1.0;
    }
    let mut rhs = DVector::zeros(k + 1);
    rhs[k] = 1.0;
    let lu = kkt.clone().lu();
    let sol = lu.solve(&rhs)?;
    let residual = (&kkt * &sol - &rhs).amax();
    if !sol.iter().all(|x| x.is_finite()) || residual > 1e-9 {
        return None;
    }
    Some(sol.iter().take(k).copied().collect())
}

/// Exhaustive search over supports, smallest supports first and
/// lexicographic within a size; the first support attaining the minimum wins.
fn min_norm_brute_force(vertices: &[Vec<f64>]) -> MinNormPoint {
    let n = vertices.len();
    let dim = vertices[0].len();
    let max_size = n.min(dim + 1);
    let mut best: Option<(f64, Vec<usize>, Vec<f64>)> = None;
    for size in 1..=max_size {
        let mut support: Vec<usize> = (0..size).collect();
        loop {
            if let Some(lambda) = affine_min_norm(vertices, &support) {
                if lambda.iter().all(|&l| l >= -1e-12) {
                    let lambda: Vec<f64> = lambda.iter().map(|l| l.max(0.0)).collect();
                    let total: f64 = lambda.iter().sum();
                    let lambda: Vec<f64> = lambda.iter().map(|l| l / total).collect();
                    let mut coeffs = vec![0.0; n];
                    for (&i, &l) in support.iter().zip(&lambda) {
                        coeffs[i] = l;
                    }
                    let nrm = norm(&combine(vertices, &coeffs));
                    if best.as_ref().is_none_or(|(b, _, _)| nrm < b - 1e-14) {
                        best = Some((nrm, support.clone(), coeffs));
                    }
                }
            }
            // Next combination in lexicographic order.
            let mut i = size;
            while i > 0 && support[i - 1] == n - size + i - 1 {
                i -= 1;
            }
            if i == 0 {
                break;
            }
            support[i - 1] += 1;
            for j in i..size {
                support[j] = support[j - 1] + 1;
            }
        }
    }
    let (_, _, coefficients) = best.expect("singletons are always feasible");
    MinNormPoint {
        point: combine(vertices, &coefficients),
        coefficients,
    }
}

/// Wolfe's active-set min-norm-point procedure.
fn min_norm_wolfe(vertices: &[Vec<f64>]) -> MinNormPoint {
    let n = vertices.len();
    let scale = vertices.iter().map(|v| dot(v, v)).fold(0.0, f64::max).max(1e-300);
    let start = (0..n)
        .min_by(|&a, &b| {
            dot(&vertices[a], &vertices[a])
                .partial_cmp(&dot(&vertices[b], &vertices[b]))
                .unwrap()
        })
        .unwrap();
    let mut support = vec![start];
    let mut lambda = vec![1.0];
    let mut x = vertices[start].clone();
    for _major in 0..10 * n + 100 {
        let xx = dot(&x, &x);
        let j = (0..n)
            .min_by(|&a, &b| {
                dot(&x, &vertices[a])
                    .partial_cmp(&dot(&x, &vertices[b]))
                    .unwrap()
                    .then(a.cmp(&b))
            })
            .unwrap();
        if dot(&x, &vertices[j]) >= xx - 1e-12 * scale || support.contains(&j) {
            break;
        }
        support.push(j);
        lambda.push(0.0);
        loop {
            let alpha = match affine_min_norm(vertices, &support) {
                Some(a) => a,
                None => {
                    // Affinely dependent support: drop the newest vertex and stop.
                    support.pop();
                    lambda.pop();
                    break;
                }
            };
            if alpha.iter().all(|&a| a > 1e-12) {
                lambda = alpha;
                break;
            }
            let mut theta = 1.0f64;
            for (&l, &a) in lambda.iter().zip(&alpha) {
                if a <= 1e-12 && l - a > 0.0 {
                    theta = theta.min(l / (l - a));
                }
            }
            for (l, a) in lambda.iter_mut().zip(&alpha) {
                *l = theta * a + (1.0 - theta) * *l;
            }
            let mut k = 0;
            while k < support.len() {
                if lambda[k] <= 1e-12 {
                    support.remove(k);
                    lambda.remove(k);
                } else {
                    k += 1;
                }
            }
            let total: f64 = lambda.iter().sum();
            lambda.iter_mut().for_each(|l| *l /= total);
        }
        let mut coeffs = vec![0.0; n];
        for (&i, &l) in support.iter().zip(&lambda) {
            coeffs[i] = l;
        }
        x = combine(vertices, &coeffs);
    }
    let mut coefficients = vec![0.0; n];
    for (&i, &l) in support.iter().zip(&lambda) {
        coefficients[i] = l;
    }
    MinNormPoint {
        point: combine(vertices, &coefficients),
        coefficients,
    }
}

/// `argmin_{ψ ∈ Co(vertices)} ½‖ψ‖²`.
pub fn min_norm_point(vertices: &[Vec<f64>]) -> Result<MinNormPoint> {
    if vertices.is_empty() {
        return Err(Error::EmptyPolicySet {
            mechanism: "min-norm point",
        });
    }
    let dim = vertices[0].len();
    if let Some(v) = vertices.iter().find(|v| v.len() != dim) {
        return Err(Error::Dimension {
            context: "min-norm vertices",
            expected: dim,
            actual: v.len(),
        });
    }
    Ok(if vertices.len() <= BRUTE_FORCE_MAX {
        min_norm_brute_force(vertices)
    } else {
        min_norm_wolfe(vertices)
    })
}

/// Exhaustive-support solver exposed for cross-checking the active-set path.
pub fn min_norm_point_exhaustive(vertices: &[Vec<f64>]) -> Result<MinNormPoint> {
    if vertices.is_empty() {
        return Err(Error::EmptyPolicySet {
            mechanism: "min-norm point",
        });
    }
    Ok(min_norm_brute_force(vertices))
}

#[derive(Debug, Clone, PartialEq)]
pub struct WorstCaseReward {
    /// Unit vector `−ψ̂/‖ψ̂‖`, or zero when degenerate.
    pub w: Vec<f64>,
    /// Set when the origin lies in the hull (`‖ψ̂‖ ≤ 1e-9`).
    pub degenerate: bool,
    pub min_norm: MinNormPoint,
}

pub fn worst_case_reward(vertices: &[Vec<f64>]) -> Result<WorstCaseReward> {
    let mn = min_norm_point(vertices)?;
    let nrm = mn.norm();
    if nrm > DEGENERACY_TOL {
        Ok(WorstCaseReward {
            w: mn.point.iter().map(|x| -x / nrm).collect(),
            degenerate: false,
            min_norm: mn,
        })
    } else {
        Ok(WorstCaseReward {
            w: vec![0.0; mn.point.len()],
            degenerate: true,
            min_norm: mn,
        })
    }
}

/// Game value `min_{w∈B₂} max_k ψ^k·w = −‖ψ̂‖`.
pub fn smp_value(vertices: &[Vec<f64>]) -> Result<f64> {
    Ok(-min_norm_point(vertices)?.norm())
}

/// Dictionary state of the fully-corrective method.
#[derive(Debug, Clone, PartialEq)]
pub struct FwState {
    pub vertices: Vec<Vec<f64>>,
    pub coefficients: Vec<f64>,
    pub min_norm_point: Vec<f64>,
    /// `½‖ψ̂‖²`
    pub h: f64,
    /// `−‖ψ̂‖`
    pub smp_value: f64,
}

impl FwState {
    pub fn from_vertices(vertices: Vec<Vec<f64>>) -> Result<Self> {
        let mn = min_norm_point(&vertices)?;
        let nrm = mn.norm();
        Ok(Self {
            vertices,
            coefficients: mn.coefficients,
            h: 0.5 * nrm * nrm,
            smp_value: -nrm,
            min_norm_point: mn.point,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GameConfig {
    pub max_iters: usize,
    /// Seed of the initial Gaussian reward direction.
    pub seed: u64,
    /// Stop threshold on `h(ψ̂)` for the Frank-Wolfe run.
    pub epsilon: f64,
}

impl Default for GameConfig {
    fn default() -> Self {
        Self {
            max_iters: 50,
            seed: 0,
            epsilon: 1e-12,
        }
    }
}

#[derive(Debug, Clone)]
pub struct GameRun {
    pub set: PolicySet,
    /// `v̄^SMP` (WCPI) or `h(ψ̂)` (Frank-Wolfe), one entry per dictionary size.
    pub trace: Vec<f64>,
    /// The origin entered the hull.
    pub degenerate: bool,
}

/// Best deterministic response to a linear reward `w·φ`.
pub fn best_response(mdp: &TabularMdp, w: &[f64]) -> Result<(StochasticPolicy, Vec<f64>)> {
    let reward = RewardTable::linear(mdp, w)?;
    let (pi, _) = optimal_average_policy(mdp, &reward)?;
    let d = stationary_distribution(mdp, &pi, STATIONARY_TOL)?;
    let psi = successor_features_from(mdp, &pi, d.as_slice()).0;
    Ok((pi, psi))
}

fn initial_policy(mdp: &TabularMdp, seed: u64) -> Result<(StochasticPolicy, Vec<f64>)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let w: Vec<f64> = (0..mdp.n_features())
        .map(|_| StandardNormal.sample(&mut rng))
        .collect();
    best_response(mdp, &w)
}

fn push_entry(set: &mut PolicySet, mdp: &TabularMdp, pi: StochasticPolicy, psi: Vec<f64>) -> Result<()> {
    let v_e = policy_value(mdp, &pi, mdp.extrinsic_reward())?;
    set.push(PolicyEntry::new(pi, psi, v_e));
    Ok(())
}

/// Worst-case policy iteration.
///
/// Stops when the best response to the current worst-case reward does not
/// beat the current game value, returning the set without that response.
pub fn run_wcpi(mdp: &TabularMdp, cfg: &GameConfig) -> Result<GameRun> {
    let (pi, psi) = initial_policy(mdp, cfg.seed)?;
    let mut set = PolicySet::new();
    let mut trace = vec![-norm(&psi)];
    push_entry(&mut set, mdp, pi, psi)?;
    let mut degenerate = false;
    for _ in 1..cfg.max_iters {
        let sfs = set.sfs();
        let wc = worst_case_reward(&sfs)?;
        let v_smp = -wc.min_norm.norm();
        if wc.degenerate {
            degenerate = true;
            break;
        }
        let (pi, psi) = best_response(mdp, &wc.w)?;
        if dot(&psi, &wc.w) <= v_smp + STOP_TOL {
            break;
        }
        push_entry(&mut set, mdp, pi, psi)?;
        trace.push(smp_value(&set.sfs())?);
    }
    if !degenerate {
        degenerate = worst_case_reward(&set.sfs())?.degenerate;
    }
    Ok(GameRun {
        set,
        trace,
        degenerate,
    })
}

/// Fully-corrective Frank-Wolfe on `h(ψ) = ½‖ψ‖²` over policy SFs.
///
/// Besides `h(ψ̂) ≤ ε`, the run stops once the linear minimization step finds
/// no vertex with a positive duality gap.
pub fn run_fcfw(mdp: &TabularMdp, cfg: &GameConfig) -> Result<GameRun> {
    let (pi, psi) = initial_policy(mdp, cfg.seed)?;
    let mut set = PolicySet::new();
    push_entry(&mut set, mdp, pi, psi)?;
    let mut trace = Vec::new();
    let mut degenerate = false;
    for it in 0..cfg.max_iters {
        let state = FwState::from_vertices(set.sfs())?;
        trace.push(state.h);
        if state.h <= cfg.epsilon || -state.smp_value <= DEGENERACY_TOL {
            degenerate = -state.smp_value <= DEGENERACY_TOL;
            break;
        }
        if it + 1 == cfg.max_iters {
            break;
        }
        let direction: Vec<f64> = state.min_norm_point.iter().map(|x| -x).collect();
        let (pi, psi) = best_response(mdp, &direction)?;
        let nrm = -state.smp_value;
        if dot(&psi, &direction) <= -nrm * nrm + STOP_TOL * nrm {
            break;
        }
        push_entry(&mut set, mdp, pi, psi)?;
    }
    Ok(GameRun {
        set,
        trace,
        degenerate,
    })
}

/// Fitted per-step contraction `ρ̂` of the suboptimality `h_t − h_final`.
///
/// A least-squares line through `ln(h_t − h_final)` gives slope `s` and
/// `ρ̂ = 1 − e^s`. Returns `None` for traces with no decrease to fit.
pub fn fit_geometric_rate(trace: &[f64]) -> Option<f64> {
    let last = *trace.last()?;
    let gaps: Vec<(f64, f64)> = trace
        .iter()
        .enumerate()
        .filter(|(_, &h)| h - last > 1e-15)
        .map(|(t, &h)| (t as f64, (h - last).ln()))
        .collect();
    match gaps.len() {
        0 => None,
        // A single positive gap followed by zero suboptimality.
        1 => Some(1.0),
        k => {
            let k = k as f64;
            let mt = gaps.iter().map(|g| g.0).sum::<f64>() / k;
            let ml = gaps.iter().map(|g| g.1).sum::<f64>() / k;
            let cov: f64 = gaps.iter().map(|(t, l)| (t - mt) * (l - ml)).sum();
            let var: f64 = gaps.iter().map(|(t, _)| (t - mt) * (t - mt)).sum();
            Some(1.0 - (cov / var).exp())
        }
    }
}

/// A single stochastic policy whose occupancy is the `weights`-mixture of
/// the given policies' occupancies; its SFs are the same mixture of theirs.
pub fn mixture_policy(
    mdp: &TabularMdp,
    policies: &[StochasticPolicy],
    weights: &[f64],
) -> Result<StochasticPolicy> {
    let n = mdp.n_states();
    let na = mdp.n_actions();
    let mut occupancy = vec![0.0; n * na];
    for (pi, &w) in policies.iter().zip(weights) {
        if w == 0.0 {
            continue;
        }
        let d = stationary_distribution(mdp, pi, STATIONARY_TOL)?;
        for s in 0..n {
            for a in 0..na {
                occupancy[s * na + a] += w * d.0[s] * pi.prob(s, a);
            }
        }
    }
    policy_from_occupancy(mdp, &occupancy)
}
