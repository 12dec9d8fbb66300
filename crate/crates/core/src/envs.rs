//! Deterministic builders for small benchmark MDPs.
//!
//! Every builder mixes each transition row with the uniform distribution,
//! `(1 − ε)P + ε·U`, so that with `ε > 0` every policy induces an irreducible
//! aperiodic chain and the exact solvers never meet a reducible chain.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::Exp1;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mdp::{RewardTable, TabularMdp};

const TRANSITION_STREAM: u64 = 1;
const FEATURE_STREAM: u64 = 2;
const REWARD_STREAM: u64 = 3;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum EnvKind {
    /// States on a line; actions {left, right, stay}.
    Chain { length: usize },
    /// Actions {up, down, left, right, stay}; walls reflect.
    Gridworld { width: usize, height: usize },
    /// Actions {stay, swap}.
    TwoState,
    /// Dense random transition rows.
    Random { n_states: usize, n_actions: usize },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum FeatureKind {
    OneHotState,
    /// Indicator tiles of `tile × tile` cells placed every `stride` cells.
    TileCoarse {
        tile: usize,
        #[serde(default)]
        stride: Option<usize>,
    },
    XyNormalized,
    /// i.i.d. uniform `[0,1]` features per state-action pair.
    RandomUniform { dim: usize },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum RewardSpec {
    /// 1 in the goal state, 0 elsewhere. Without a state the goal is drawn from the seed.
    Goal {
        #[serde(default)]
        state: Option<usize>,
    },
    /// 1 for the stay action (action 0 for random MDPs).
    StandStill,
    /// `1 − dist(s, goal)/max_dist` in Manhattan distance over the layout.
    Distance {
        #[serde(default)]
        state: Option<usize>,
    },
    /// i.i.d. uniform `[0,1]` per state-action pair.
    RandomUniform,
}

fn default_noise() -> f64 {
    0.01
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EnvConfig {
    pub kind: EnvKind,
    #[serde(default = "default_features")]
    pub features: FeatureKind,
    #[serde(default = "default_noise")]
    pub noise: f64,
    #[serde(default = "default_reward")]
    pub reward: RewardSpec,
    #[serde(default)]
    pub seed: u64,
}

fn default_features() -> FeatureKind {
    FeatureKind::OneHotState
}

fn default_reward() -> RewardSpec {
    RewardSpec::Goal { state: None }
}

/// Planar layout used by the feature maps and plots; state `s` sits at
/// `(s % width, s / width)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Geometry {
    pub width: usize,
    pub height: usize,
}

impl Geometry {
    pub fn n_states(&self) -> usize {
        self.width * self.height
    }

    pub fn coords(&self, s: usize) -> (usize, usize) {
        (s % self.width, s / self.width)
    }
}

impl EnvConfig {
    pub fn new(kind: EnvKind) -> Self {
        Self {
            kind,
            features: default_features(),
            noise: default_noise(),
            reward: default_reward(),
            seed: 0,
        }
    }

    /// The exact noiseless two-state gadget with goal state 0.
    pub fn two_state() -> Self {
        Self {
            noise: 0.0,
            reward: RewardSpec::Goal { state: Some(0) },
            ..Self::new(EnvKind::TwoState)
        }
    }

    pub fn gridworld(width: usize, height: usize) -> Self {
        Self::new(EnvKind::Gridworld { width, height })
    }

    pub fn chain(length: usize) -> Self {
        Self::new(EnvKind::Chain { length })
    }

    pub fn random(n_states: usize, n_actions: usize, seed: u64) -> Self {
        Self {
            reward: RewardSpec::RandomUniform,
            seed,
            ..Self::new(EnvKind::Random {
                n_states,
                n_actions,
            })
        }
    }

    pub fn with_features(mut self, features: FeatureKind) -> Self {
        self.features = features;
        self
    }

    pub fn with_noise(mut self, noise: f64) -> Self {
        self.noise = noise;
        self
    }

    pub fn with_reward(mut self, reward: RewardSpec) -> Self {
        self.reward = reward;
        self
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn geometry(&self) -> Geometry {
        match self.kind {
            EnvKind::Chain { length } => Geometry {
                width: length,
                height: 1,
            },
            EnvKind::Gridworld { width, height } => Geometry { width, height },
            EnvKind::TwoState => Geometry {
                width: 2,
                height: 1,
            },
            EnvKind::Random { n_states, .. } => Geometry {
                width: n_states,
                height: 1,
            },
        }
    }

    pub fn n_actions(&self) -> usize {
        match self.kind {
            EnvKind::Chain { .. } => 3,
            EnvKind::Gridworld { .. } => 5,
            EnvKind::TwoState => 2,
            EnvKind::Random { n_actions, .. } => n_actions,
        }
    }

    /// Index of the "do nothing" action.
    fn stay_action(&self) -> usize {
        match self.kind {
            EnvKind::Chain { .. } => 2,
            EnvKind::Gridworld { .. } => 4,
            EnvKind::TwoState | EnvKind::Random { .. } => 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let invalid = |reason: String| Err(Error::Invalid {
            what: "env config",
            reason,
        });
        if !(0.0..1.0).contains(&self.noise) {
            return invalid(format!("noise {} not in [0,1)", self.noise));
        }
        let g = self.geometry();
        if g.width == 0 || g.height == 0 || self.n_actions() == 0 {
            return invalid("dimensions must be positive".into());
        }
        match &self.features {
            FeatureKind::TileCoarse { tile, stride } => {
                if *tile == 0 || stride.is_some_and(|s| s == 0 || s > *tile) {
                    return invalid("tile size must be positive and stride in 1..=tile".into());
                }
            }
            FeatureKind::RandomUniform { dim } if *dim == 0 => {
                return invalid("random feature dimension must be positive".into());
            }
            _ => {}
        }
        let n = g.n_states();
        match self.reward {
            RewardSpec::Goal { state: Some(s) } | RewardSpec::Distance { state: Some(s) }
                if s >= n =>
            {
                invalid(format!("goal state {s} out of range for {n} states"))
            }
            _ => Ok(()),
        }
    }
}

fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

fn deterministic_transitions(cfg: &EnvConfig) -> Vec<Vec<Vec<f64>>> {
    let g = cfg.geometry();
    let n = g.n_states();
    let na = cfg.n_actions();
    let mut p = vec![vec![vec![0.0; n]; n]; na];
    match cfg.kind {
        EnvKind::TwoState => {
            for s in 0..2 {
                p[0][s][s] = 1.0;
                p[1][s][1 - s] = 1.0;
            }
        }
        EnvKind::Chain { length } => {
            for s in 0..length {
                p[0][s][s.saturating_sub(1)] = 1.0;
                p[1][s][(s + 1).min(length - 1)] = 1.0;
                p[2][s][s] = 1.0;
            }
        }
        EnvKind::Gridworld { width, height } => {
            for s in 0..n {
                let (x, y) = g.coords(s);
                let moves = [
                    (x, y.saturating_sub(1)),
                    (x, (y + 1).min(height - 1)),
                    (x.saturating_sub(1), y),
                    ((x + 1).min(width - 1), y),
                    (x, y),
                ];
                for (a, (nx, ny)) in moves.into_iter().enumerate() {
                    p[a][s][ny * width + nx] = 1.0;
                }
            }
        }
        EnvKind::Random { .. } => {
            let mut rng = stream_rng(cfg.seed, TRANSITION_STREAM);
            for pa in p.iter_mut() {
                for row in pa.iter_mut() {
                    let draws: Vec<f64> = (0..n).map(|_| rng.sample::<f64, _>(Exp1)).collect();
                    let total: f64 = draws.iter().sum();
                    for (dst, x) in row.iter_mut().zip(draws) {
                        *dst = x / total;
                    }
                }
            }
        }
    }
    p
}

fn mix_with_uniform(p: &mut [Vec<Vec<f64>>], noise: f64) {
    if noise == 0.0 {
        return;
    }
    for pa in p.iter_mut() {
        for row in pa.iter_mut() {
            let u = noise / row.len() as f64;
            for x in row.iter_mut() {
                *x = (1.0 - noise) * *x + u;
            }
            // Renormalize so rows sum to one to machine precision.
            let total: f64 = row.iter().sum();
            row.iter_mut().for_each(|x| *x /= total);
        }
    }
}

/// Feature tensor `[s][a][k]` with every entry in `[0,1]`.
pub fn feature_map(
    kind: &FeatureKind,
    geometry: Geometry,
    n_actions: usize,
    seed: u64,
) -> Result<Vec<Vec<Vec<f64>>>> {
    let n = geometry.n_states();
    let per_state: Vec<Vec<f64>> = match kind {
        FeatureKind::OneHotState => (0..n)
            .map(|s| (0..n).map(|k| if k == s { 1.0 } else { 0.0 }).collect())
            .collect(),
        FeatureKind::XyNormalized => (0..n)
            .map(|s| {
                let (x, y) = geometry.coords(s);
                let scale = |v: usize, extent: usize| {
                    if extent > 1 {
                        v as f64 / (extent - 1) as f64
                    } else {
                        0.0
                    }
                };
                vec![scale(x, geometry.width), scale(y, geometry.height)]
            })
            .collect(),
        FeatureKind::TileCoarse { tile, stride } => {
            let tile = *tile;
            let stride = stride.unwrap_or(tile);
            if tile == 0 || stride == 0 || stride > tile {
                return Err(Error::Invalid {
                    what: "tile features",
                    reason: format!("tile {tile}, stride {stride}"),
                });
            }
            let count = |extent: usize| extent.saturating_sub(tile).div_ceil(stride) + 1;
            let (tx, ty) = (count(geometry.width), count(geometry.height));
            (0..n)
                .map(|s| {
                    let (x, y) = geometry.coords(s);
                    let mut f = vec![0.0; tx * ty];
                    for j in 0..ty {
                        for i in 0..tx {
                            let (x0, y0) = (i * stride, j * stride);
                            if (x0..x0 + tile).contains(&x) && (y0..y0 + tile).contains(&y) {
                                f[j * tx + i] = 1.0;
                            }
                        }
                    }
                    f
                })
                .collect()
        }
        FeatureKind::RandomUniform { dim } => {
            if *dim == 0 {
                return Err(Error::Invalid {
                    what: "random features",
                    reason: "zero dimension".into(),
                });
            }
            let mut rng = stream_rng(seed, FEATURE_STREAM);
            return Ok((0..n)
                .map(|_| {
                    (0..n_actions)
                        .map(|_| (0..*dim).map(|_| rng.random::<f64>()).collect())
                        .collect()
                })
                .collect());
        }
    };
    Ok(per_state
        .into_iter()
        .map(|f| vec![f; n_actions])
        .collect())
}

fn manhattan(g: Geometry, a: usize, b: usize) -> usize {
    let (ax, ay) = g.coords(a);
    let (bx, by) = g.coords(b);
    ax.abs_diff(bx) + ay.abs_diff(by)
}

fn extrinsic_reward(cfg: &EnvConfig) -> RewardTable {
    let g = cfg.geometry();
    let n = g.n_states();
    let na = cfg.n_actions();
    let mut rng = stream_rng(cfg.seed, REWARD_STREAM);
    let mut goal = |state: Option<usize>| state.unwrap_or_else(|| rng.random_range(0..n));
    match cfg.reward {
        RewardSpec::Goal { state } => {
            let goal = goal(state);
            RewardTable::from_fn(n, na, |s, _| if s == goal { 1.0 } else { 0.0 })
        }
        RewardSpec::StandStill => {
            let stay = cfg.stay_action();
            RewardTable::from_fn(n, na, |_, a| if a == stay { 1.0 } else { 0.0 })
        }
        RewardSpec::Distance { state } => {
            let goal = goal(state);
            let max_d = (g.width - 1 + g.height - 1).max(1) as f64;
            RewardTable::from_fn(n, na, |s, _| 1.0 - manhattan(g, s, goal) as f64 / max_d)
        }
        RewardSpec::RandomUniform => {
            let values: Vec<f64> = (0..n * na).map(|_| rng.random::<f64>()).collect();
            RewardTable::from_fn(n, na, |s, a| values[s * na + a])
        }
    }
}

pub fn build_env(cfg: &EnvConfig) -> Result<TabularMdp> {
    cfg.validate()?;
    let g = cfg.geometry();
    let n = g.n_states();
    let mut p = deterministic_transitions(cfg);
    mix_with_uniform(&mut p, cfg.noise);
    let phi = feature_map(&cfg.features, g, cfg.n_actions(), cfg.seed)?;
    TabularMdp::new(p, phi, extrinsic_reward(cfg), vec![1.0 / n as f64; n])
}
