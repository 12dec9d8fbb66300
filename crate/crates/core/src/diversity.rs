//! Intrinsic diversity rewards computed from a set of successor features.
//!
//! All mechanisms produce a state-action reward table from the SFs of the
//! policies found so far. The explicit ones (`average`, `min`) penalize
//! correlation with earlier SFs, `robustness` uses the worst-case linear
//! reward of the set, and `discrimination` rewards states that identify the
//! current policy under a Gibbs posterior over the set.

use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, Result};
use crate::mdp::{dot, RewardTable, StationaryDistribution, StochasticPolicy, SuccessorFeatures, TabularMdp};
use crate::robustness::worst_case_reward;

const PRIOR_TOL: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq)]
pub struct PolicyEntry {
    pub policy: StochasticPolicy,
    pub psi: SuccessorFeatures,
    /// Average value under the constraint reward.
    pub v_e: f64,
}

impl PolicyEntry {
    pub fn new(policy: StochasticPolicy, psi: Vec<f64>, v_e: f64) -> Self {
        Self {
            policy,
            psi: SuccessorFeatures(psi),
            v_e,
        }
    }
}

/// Ordered policies with their SFs and the running optimum `v_e*`.
#[derive(Debug, Clone, PartialEq)]
pub struct PolicySet {
    pub entries: Vec<PolicyEntry>,
    pub v_star: f64,
}

impl Default for PolicySet {
    fn default() -> Self {
        Self::new()
    }
}

impl PolicySet {
    pub fn new() -> Self {
        Self {
            entries: Vec::new(),
            v_star: f64::NEG_INFINITY,
        }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn push(&mut self, entry: PolicyEntry) {
        self.entries.push(entry);
    }

    /// `v_e* ← max(v_e*, v)`.
    pub fn reset_v_star(&mut self, v: f64) {
        self.v_star = self.v_star.max(v);
    }

    pub fn sfs(&self) -> Vec<Vec<f64>> {
        self.entries.iter().map(|e| e.psi.0.clone()).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MechanismKind {
    None,
    Average,
    Min,
    Discrimination,
    Robustness,
}

impl MechanismKind {
    pub fn as_str(self) -> &'static str {
        match self {
            MechanismKind::None => "none",
            MechanismKind::Average => "average",
            MechanismKind::Min => "min",
            MechanismKind::Discrimination => "discrimination",
            MechanismKind::Robustness => "robustness",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BoundVariant {
    /// Denominator `1 − e^{−τ}`: maps `r̃ ∈ [0,1]` onto `[0,1]`.
    Normalized,
    /// Denominator `1 − e^{τ}`, literally as first stated; negative for `τ > 0`.
    AsWritten,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Bounding {
    #[serde(default = "yes")]
    pub enabled: bool,
    #[serde(default = "normalized")]
    pub variant: BoundVariant,
}

fn yes() -> bool {
    true
}

fn normalized() -> BoundVariant {
    BoundVariant::Normalized
}

impl Default for Bounding {
    fn default() -> Self {
        Self {
            enabled: true,
            variant: BoundVariant::Normalized,
        }
    }
}

impl Bounding {
    pub fn off() -> Self {
        Self {
            enabled: false,
            variant: BoundVariant::Normalized,
        }
    }
}

fn default_temperature() -> f64 {
    3.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DiversityMechanism {
    pub kind: MechanismKind,
    /// Discrimination prior over set members plus the current policy (last).
    /// Uniform when absent.
    #[serde(default)]
    pub prior: Option<Vec<f64>>,
    #[serde(default = "default_temperature")]
    pub temperature: f64,
    #[serde(default)]
    pub bounding: Bounding,
    /// Use `log p(z|s) − log p(z)` instead of `log p(z|s)`.
    #[serde(default)]
    pub subtract_log_prior: bool,
}

impl DiversityMechanism {
    pub fn new(kind: MechanismKind) -> Self {
        Self {
            kind,
            prior: None,
            temperature: default_temperature(),
            bounding: Bounding::default(),
            subtract_log_prior: false,
        }
    }

    pub fn unbounded(kind: MechanismKind) -> Self {
        Self {
            bounding: Bounding::off(),
            ..Self::new(kind)
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.temperature > 0.0) {
            return Err(Error::Invalid {
                what: "temperature",
                reason: format!("{} must be positive", self.temperature),
            });
        }
        if let Some(p) = &self.prior {
            check_prior(p)?;
        }
        Ok(())
    }

    /// Whether the reward depends on the policy being optimized.
    pub fn is_policy_dependent(&self) -> bool {
        self.kind == MechanismKind::Discrimination
    }
}

/// A diversity reward table and whether the mechanism degenerated.
#[derive(Debug, Clone, PartialEq)]
pub struct DiversityReward {
    pub table: RewardTable,
    /// Robustness only: the origin lies in the SF hull and the reward is zero.
    pub degenerate: bool,
}

fn check_prior(prior: &[f64]) -> Result<()> {
    let sum: f64 = prior.iter().sum();
    if (sum - 1.0).abs() > PRIOR_TOL || prior.iter().any(|&p| !(p > 0.0)) {
        return Err(Error::NonNormalizedPrior { sum });
    }
    Ok(())
}

fn norm_sq(w: &[f64]) -> f64 {
    dot(w, w)
}

/// Maps a linear reward `w·φ` through `r̃ = (w·φ + ‖w‖²)/‖w‖²` and then
/// `(1 − e^{−τ r̃}) / D` with `D` chosen by `variant`.
pub fn bound_transform(
    raw: &RewardTable,
    w: &[f64],
    temperature: f64,
    variant: BoundVariant,
) -> Result<RewardTable> {
    let w2 = norm_sq(w);
    if w2 == 0.0 {
        return Err(Error::DegenerateWeight);
    }
    let denom = match variant {
        BoundVariant::Normalized => 1.0 - (-temperature).exp(),
        BoundVariant::AsWritten => 1.0 - temperature.exp(),
    };
    Ok(raw.map(|x| {
        let r_tilde = (x + w2) / w2;
        (1.0 - (-temperature * r_tilde).exp()) / denom
    }))
}

/// `w·φ(s,a)`, bounded when the mechanism asks for it. A zero `w` yields zeros.
fn linear_reward(mdp: &TabularMdp, w: &[f64], mech: &DiversityMechanism) -> Result<RewardTable> {
    let raw = RewardTable::linear(mdp, w)?;
    if !mech.bounding.enabled {
        return Ok(raw);
    }
    match bound_transform(&raw, w, mech.temperature, mech.bounding.variant) {
        Err(Error::DegenerateWeight) => Ok(RewardTable::zeros(mdp.n_states(), mdp.n_actions())),
        other => other,
    }
}

pub fn reward_none(mdp: &TabularMdp) -> RewardTable {
    RewardTable::zeros(mdp.n_states(), mdp.n_actions())
}

/// `w = −(1/k) Σ ψ^k`, reward `w·φ`.
pub fn reward_average(set: &PolicySet, mdp: &TabularMdp, mech: &DiversityMechanism) -> Result<RewardTable> {
    if set.is_empty() {
        return Err(Error::EmptyPolicySet { mechanism: "average" });
    }
    let k = set.len() as f64;
    let mut w = vec![0.0; mdp.n_features()];
    for e in &set.entries {
        check_dim("set SF dimension", mdp.n_features(), e.psi.dim())?;
        for (wi, p) in w.iter_mut().zip(&e.psi.0) {
            *wi -= p / k;
        }
    }
    linear_reward(mdp, &w, mech)
}

/// `r(s,a) = min_k (−ψ^k·φ(s,a))`, bounding each term before the min.
pub fn reward_min(set: &PolicySet, mdp: &TabularMdp, mech: &DiversityMechanism) -> Result<RewardTable> {
    if set.is_empty() {
        return Err(Error::EmptyPolicySet { mechanism: "min" });
    }
    let mut out: Option<RewardTable> = None;
    for e in &set.entries {
        check_dim("set SF dimension", mdp.n_features(), e.psi.dim())?;
        let w: Vec<f64> = e.psi.0.iter().map(|p| -p).collect();
        let term = linear_reward(mdp, &w, mech)?;
        out = Some(match out {
            None => term,
            Some(acc) => RewardTable::from_fn(mdp.n_states(), mdp.n_actions(), |s, a| {
                acc.get(s, a).min(term.get(s, a))
            }),
        });
    }
    Ok(out.expect("non-empty set"))
}

/// `log p(n|s,a)` under the Gibbs posterior
/// `p(z|s) ∝ p(z) exp(φ(s,a)·ψ^z)` over the set members and the current policy
/// (index `n = set.len()`).
pub fn reward_discrimination(
    set: &PolicySet,
    current_psi: &[f64],
    mdp: &TabularMdp,
    mech: &DiversityMechanism,
) -> Result<RewardTable> {
    let n = set.len() + 1;
    let prior = match &mech.prior {
        Some(p) => {
            check_dim("discrimination prior", n, p.len())?;
            check_prior(p)?;
            p.clone()
        }
        None => vec![1.0 / n as f64; n],
    };
    check_dim("current SF dimension", mdp.n_features(), current_psi.len())?;
    let mut psis: Vec<&[f64]> = set.entries.iter().map(|e| e.psi.as_slice()).collect();
    psis.push(current_psi);
    for p in &psis {
        check_dim("set SF dimension", mdp.n_features(), p.len())?;
    }
    let log_prior: Vec<f64> = prior.iter().map(|p| p.ln()).collect();
    let shift = if mech.subtract_log_prior { log_prior[n - 1] } else { 0.0 };
    Ok(RewardTable::from_fn(mdp.n_states(), mdp.n_actions(), |s, a| {
        let phi = mdp.feature(s, a);
        let logits: Vec<f64> = psis
            .iter()
            .zip(&log_prior)
            .map(|(psi, lp)| lp + dot(phi, psi))
            .collect();
        let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = m + logits.iter().map(|l| (l - m).exp()).sum::<f64>().ln();
        logits[n - 1] - lse - shift
    }))
}

/// Tabular Bayes posterior `log p(z|s) = log(d_z(s)p(z) / Σ_k d_k(s)p(k))`, per state.
pub fn discrimination_bayes(ds: &[StationaryDistribution], prior: &[f64], z: usize) -> Result<Vec<f64>> {
    check_dim("bayes prior", ds.len(), prior.len())?;
    check_prior(prior)?;
    let n_states = ds[z].0.len();
    Ok((0..n_states)
        .map(|s| {
            let num = ds[z].0[s] * prior[z];
            let den: f64 = ds.iter().zip(prior).map(|(d, p)| d.0[s] * p).sum();
            (num / den).ln()
        })
        .collect())
}

/// Worst-case linear reward `w·φ` for the set; zero and flagged when degenerate.
pub fn reward_robustness(set: &PolicySet, mdp: &TabularMdp, mech: &DiversityMechanism) -> Result<DiversityReward> {
    if set.is_empty() {
        return Err(Error::EmptyPolicySet { mechanism: "robustness" });
    }
    let wc = worst_case_reward(&set.sfs())?;
    if wc.degenerate {
        return Ok(DiversityReward {
            table: reward_none(mdp),
            degenerate: true,
        });
    }
    Ok(DiversityReward {
        table: linear_reward(mdp, &wc.w, mech)?,
        degenerate: false,
    })
}

/// Dispatches on the mechanism kind. `current_psi` is required for
/// discrimination and ignored otherwise.
pub fn diversity_reward(
    mech: &DiversityMechanism,
    set: &PolicySet,
    mdp: &TabularMdp,
    current_psi: Option<&[f64]>,
) -> Result<DiversityReward> {
    let plain = |table| DiversityReward {
        table,
        degenerate: false,
    };
    match mech.kind {
        MechanismKind::None => Ok(plain(reward_none(mdp))),
        MechanismKind::Average => reward_average(set, mdp, mech).map(plain),
        MechanismKind::Min => reward_min(set, mdp, mech).map(plain),
        MechanismKind::Robustness => reward_robustness(set, mdp, mech),
        MechanismKind::Discrimination => {
            let psi = current_psi.ok_or(Error::Invalid {
                what: "discrimination reward",
                reason: "current policy SFs are required".into(),
            })?;
            reward_discrimination(set, psi, mdp, mech).map(plain)
        }
    }
}

fn check_positive(ds: &[Vec<f64>]) -> Result<()> {
    for d in ds {
        if let Some((index, &value)) = d.iter().enumerate().find(|(_, &v)| !(v > 0.0)) {
            return Err(Error::NotStrictlyPositive { index, value });
        }
    }
    Ok(())
}

/// `Σ_s d_z(s) log(d_z(s)p(z) / Σ_k d_k(s)p(k))` for one skill `z`.
pub fn diayn_skill_term(ds: &[Vec<f64>], prior: &[f64], z: usize) -> Result<f64> {
    check_dim("diayn prior", ds.len(), prior.len())?;
    check_prior(prior)?;
    check_positive(ds)?;
    let n_states = ds[z].len();
    for d in ds {
        check_dim("diayn distributions", n_states, d.len())?;
    }
    Ok((0..n_states)
        .map(|s| {
            let mix: f64 = ds.iter().zip(prior).map(|(d, p)| d[s] * p).sum();
            ds[z][s] * (ds[z][s] * prior[z] / mix).ln()
        })
        .sum())
}

/// `Σ_z p(z) Σ_s d_z(s) log(d_z(s)p(z) / Σ_k d_k(s)p(k))`.
pub fn diayn_objective(ds: &[Vec<f64>], prior: &[f64]) -> Result<f64> {
    let mut total = 0.0;
    for (z, p) in prior.iter().enumerate() {
        total += p * diayn_skill_term(ds, prior, z)?;
    }
    Ok(total)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    /// One state per feature basis vector, a single action.
    fn basis_mdp(dim: usize) -> TabularMdp {
        let p = vec![(0..dim).map(|_| vec![1.0 / dim as f64; dim]).collect()];
        let phi = (0..dim)
            .map(|s| vec![(0..dim).map(|k| if k == s { 1.0 } else { 0.0 }).collect()])
            .collect();
        TabularMdp::new(p, phi, RewardTable::zeros(dim, 1), vec![1.0 / dim as f64; dim]).unwrap()
    }

    fn set_of(psis: &[&[f64]]) -> PolicySet {
        let mut set = PolicySet::new();
        for psi in psis {
            let pi = StochasticPolicy::uniform(psi.len(), 1);
            set.push(PolicyEntry::new(pi, psi.to_vec(), 0.0));
        }
        set
    }

    fn scaled_mdp() -> TabularMdp {
        // Features are in [0,1]; ψ vectors in tests may leave that box.
        basis_mdp(2)
    }

    #[test]
    fn none_is_zero() {
        let mdp = scaled_mdp();
        assert!(reward_none(&mdp).values().iter().all(|&v| v == 0.0));
        let r = diversity_reward(&DiversityMechanism::new(MechanismKind::None), &PolicySet::new(), &mdp, None).unwrap();
        assert!(r.table.values().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn average_examples() {
        let mdp = scaled_mdp();
        let mech = DiversityMechanism::unbounded(MechanismKind::Average);
        let r = reward_average(&set_of(&[&[1.0, 0.0]]), &mdp, &mech).unwrap();
        assert_eq!(r.get(0, 0), -1.0);
        let r = reward_average(&set_of(&[&[1.0, 0.0], &[-1.0, 0.0]]), &mdp, &mech).unwrap();
        assert!(r.values().iter().all(|&v| v == 0.0));
        let bounded = DiversityMechanism::new(MechanismKind::Average);
        let r = reward_average(&set_of(&[&[1.0, 0.0], &[-1.0, 0.0]]), &mdp, &bounded).unwrap();
        assert!(r.values().iter().all(|&v| v == 0.0));
        assert!(matches!(
            reward_average(&PolicySet::new(), &mdp, &mech),
            Err(Error::EmptyPolicySet { .. })
        ));
    }

    #[test]
    fn average_matches_direct_recomputation() {
        let mdp = basis_mdp(3);
        let psis: [&[f64]; 3] = [&[0.2, 0.5, 0.3], &[0.9, 0.05, 0.05], &[0.1, 0.1, 0.8]];
        let r = reward_average(&set_of(&psis), &mdp, &DiversityMechanism::unbounded(MechanismKind::Average)).unwrap();
        for s in 0..3 {
            // φ(s) = e_s, so w·φ(s) = −mean_k ψ^k_s.
            let expected = -(psis[0][s] + psis[1][s] + psis[2][s]) / 3.0;
            assert_abs_diff_eq!(r.get(s, 0), expected, epsilon = 1e-15);
        }
    }

    #[test]
    fn min_examples() {
        let mdp = scaled_mdp();
        let mech = DiversityMechanism::unbounded(MechanismKind::Min);
        let r = reward_min(&set_of(&[&[1.0, 0.0], &[0.0, 1.0]]), &mdp, &mech).unwrap();
        assert_eq!(r.get(0, 0), -1.0);
        let single = set_of(&[&[0.3, 0.7]]);
        let avg = DiversityMechanism::unbounded(MechanismKind::Average);
        assert_eq!(
            reward_min(&single, &mdp, &mech).unwrap(),
            reward_average(&single, &mdp, &avg).unwrap()
        );
        let dup = set_of(&[&[0.3, 0.7], &[0.3, 0.7]]);
        assert_eq!(reward_min(&dup, &mdp, &mech).unwrap(), reward_min(&single, &mdp, &mech).unwrap());
        assert!(reward_min(&PolicySet::new(), &mdp, &mech).is_err());
    }

    #[test]
    fn discrimination_examples() {
        let mdp = scaled_mdp();
        let mech = DiversityMechanism::new(MechanismKind::Discrimination);
        let same = set_of(&[&[0.4, 0.6]]);
        let r = reward_discrimination(&same, &[0.4, 0.6], &mdp, &mech).unwrap();
        for &v in r.values() {
            assert_abs_diff_eq!(v, 0.5f64.ln(), epsilon = 1e-12);
        }
        let sub = DiversityMechanism {
            subtract_log_prior: true,
            ..mech.clone()
        };
        let r = reward_discrimination(&same, &[0.4, 0.6], &mdp, &sub).unwrap();
        for &v in r.values() {
            assert_abs_diff_eq!(v, 0.0, epsilon = 1e-12);
        }
        let other = set_of(&[&[0.0, 1.0]]);
        let r = reward_discrimination(&other, &[1.0, 0.0], &mdp, &mech).unwrap();
        // φ(0) = (1,0): log(e / (e + 1)).
        assert_abs_diff_eq!(r.get(0, 0), -(1.0 + (-1.0f64).exp()).ln(), epsilon = 1e-12);
        assert_abs_diff_eq!(r.get(0, 0), -0.31326168751822286, epsilon = 1e-12);
        let empty = reward_discrimination(&PolicySet::new(), &[1.0, 0.0], &mdp, &mech).unwrap();
        assert!(empty.values().iter().all(|&v| v.abs() < 1e-15));
        let bad = DiversityMechanism {
            prior: Some(vec![0.7, 0.7]),
            ..mech
        };
        assert!(matches!(
            reward_discrimination(&other, &[1.0, 0.0], &mdp, &bad),
            Err(Error::NonNormalizedPrior { .. })
        ));
    }

    #[test]
    fn discrimination_with_prior_shifts_by_log_prior() {
        let mdp = scaled_mdp();
        let prior = vec![0.25, 0.75];
        let mech = DiversityMechanism {
            prior: Some(prior.clone()),
            ..DiversityMechanism::new(MechanismKind::Discrimination)
        };
        let set = set_of(&[&[0.2, 0.8]]);
        let r = reward_discrimination(&set, &[0.6, 0.4], &mdp, &mech).unwrap();
        for s in 0..2 {
            let phi = mdp.feature(s, 0);
            let a = 0.25 * dot(phi, &[0.2, 0.8]).exp();
            let b = 0.75 * dot(phi, &[0.6, 0.4]).exp();
            assert_abs_diff_eq!(r.get(s, 0), (b / (a + b)).ln(), epsilon = 1e-12);
        }
    }

    #[test]
    fn gibbs_and_bayes_agree_in_sign_for_two_skills() {
        let d0 = StationaryDistribution(vec![0.5, 0.3, 0.2]);
        let d1 = StationaryDistribution(vec![0.1, 0.3, 0.6]);
        let mdp = basis_mdp(3);
        let mech = DiversityMechanism::new(MechanismKind::Discrimination);
        let set = set_of(&[d0.as_slice()]);
        let gibbs = reward_discrimination(&set, d1.as_slice(), &mdp, &mech).unwrap();
        let bayes = discrimination_bayes(&[d0, d1], &[0.5, 0.5], 1).unwrap();
        for s in 0..3 {
            let g = gibbs.get(s, 0) - 0.5f64.ln();
            let b = bayes[s] - 0.5f64.ln();
            assert!(g.abs() < 1e-12 && b.abs() < 1e-12 || g.signum() == b.signum(), "state {s}");
        }
    }

    #[test]
    fn robustness_examples() {
        let mdp = scaled_mdp();
        let mech = DiversityMechanism::unbounded(MechanismKind::Robustness);
        let r = reward_robustness(&set_of(&[&[0.6, 0.8]]), &mdp, &mech).unwrap();
        assert_abs_diff_eq!(r.table.get(0, 0), -0.6, epsilon = 1e-12);
        assert_abs_diff_eq!(r.table.get(1, 0), -0.8, epsilon = 1e-12);
        let r = reward_robustness(&set_of(&[&[1.0, 0.0], &[0.0, 1.0]]), &mdp, &mech).unwrap();
        assert_abs_diff_eq!(r.table.get(0, 0), -(0.5f64.sqrt()), epsilon = 1e-12);
        let r = reward_robustness(&set_of(&[&[1.0, 0.0], &[-1.0, 0.0], &[0.0, 1.0]]), &mdp, &mech).unwrap();
        assert!(r.degenerate);
        assert!(r.table.values().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn bound_transform_examples() {
        let w = [0.0, 1.0];
        let zero = RewardTable::new(1, 1, vec![0.0]).unwrap();
        let floor = RewardTable::new(1, 1, vec![-1.0]).unwrap();
        let r = bound_transform(&zero, &w, 3.0, BoundVariant::Normalized).unwrap();
        assert_abs_diff_eq!(r.get(0, 0), 1.0, epsilon = 1e-15);
        let r = bound_transform(&floor, &w, 3.0, BoundVariant::Normalized).unwrap();
        assert_abs_diff_eq!(r.get(0, 0), 0.0, epsilon = 1e-15);
        let r = bound_transform(&zero, &w, 3.0, BoundVariant::AsWritten).unwrap();
        assert_abs_diff_eq!(r.get(0, 0), -0.049787068367863944, epsilon = 1e-12);
        assert_eq!(bound_transform(&zero, &[0.0, 0.0], 3.0, BoundVariant::Normalized), Err(Error::DegenerateWeight));
    }

    #[test]
    fn diayn_examples() {
        let d = vec![0.2, 0.3, 0.5];
        let v = diayn_objective(&[d.clone(), d.clone()], &[0.5, 0.5]).unwrap();
        assert_abs_diff_eq!(v, -(2.0f64.ln()), epsilon = 1e-12);
        assert_abs_diff_eq!(diayn_objective(&[d.clone()], &[1.0]).unwrap(), 0.0, epsilon = 1e-15);
        assert!(matches!(
            diayn_objective(&[vec![0.0, 1.0], d], &[0.5, 0.5]),
            Err(Error::NotStrictlyPositive { .. })
        ));
    }

    #[test]
    fn diayn_matches_kl_form() {
        let ds = vec![vec![0.1, 0.6, 0.3], vec![0.45, 0.15, 0.4]];
        let prior = [0.5, 0.5];
        let mix: Vec<f64> = (0..3).map(|s| 0.5 * ds[0][s] + 0.5 * ds[1][s]).collect();
        let kl = |d: &[f64]| -> f64 { d.iter().zip(&mix).map(|(a, m)| a * (a / m).ln()).sum() };
        let expected: f64 = ds.iter().map(|d| 0.5 * (kl(d) + 0.5f64.ln())).sum();
        assert_abs_diff_eq!(diayn_objective(&ds, &prior).unwrap(), expected, epsilon = 1e-14);
    }

    proptest! {
        #[test]
        fn min_never_exceeds_average(psis in prop::collection::vec(prop::collection::vec(0.0f64..1.0, 3), 1..6)) {
            let mdp = basis_mdp(3);
            let refs: Vec<&[f64]> = psis.iter().map(|p| p.as_slice()).collect();
            let set = set_of(&refs);
            let min = reward_min(&set, &mdp, &DiversityMechanism::unbounded(MechanismKind::Min)).unwrap();
            let avg = reward_average(&set, &mdp, &DiversityMechanism::unbounded(MechanismKind::Average)).unwrap();
            for (m, a) in min.values().iter().zip(avg.values()) {
                prop_assert!(m <= &(a + 1e-12));
            }
        }

        #[test]
        fn discrimination_is_shift_invariant(
            psis in prop::collection::vec(prop::collection::vec(0.0f64..1.0, 2), 1..5),
            current in prop::collection::vec(0.0f64..1.0, 2),
            shift in -2.0f64..2.0,
        ) {
            // Adding c·1 to every ψ shifts each logit by c·Σφ, common to all members.
            let mdp = scaled_mdp();
            let mech = DiversityMechanism::new(MechanismKind::Discrimination);
            let refs: Vec<&[f64]> = psis.iter().map(|p| p.as_slice()).collect();
            let base = reward_discrimination(&set_of(&refs), &current, &mdp, &mech).unwrap();
            let moved: Vec<Vec<f64>> = psis.iter().map(|p| p.iter().map(|x| x + shift).collect()).collect();
            let moved_refs: Vec<&[f64]> = moved.iter().map(|p| p.as_slice()).collect();
            let cur: Vec<f64> = current.iter().map(|x| x + shift).collect();
            let r = reward_discrimination(&set_of(&moved_refs), &cur, &mdp, &mech).unwrap();
            for (a, b) in base.values().iter().zip(r.values()) {
                prop_assert!((a - b).abs() < 1e-10);
            }
        }

        #[test]
        fn normalized_bound_is_monotone_and_bounded(a in 0.0f64..1.0, b in 0.0f64..1.0, tau in 0.1f64..10.0) {
            // With ‖w‖ = 1, raw = r̃ − 1.
            let w = [1.0];
            let t = RewardTable::new(1, 2, vec![a - 1.0, b - 1.0]).unwrap();
            let r = bound_transform(&t, &w, tau, BoundVariant::Normalized).unwrap();
            prop_assert!((0.0..=1.0 + 1e-12).contains(&r.get(0, 0)));
            if a < b {
                prop_assert!(r.get(0, 0) < r.get(0, 1));
            }
        }
    }
}
