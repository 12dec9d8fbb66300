//! `oracle`: brute-force cross-checks pinned into a plain-text golden file.
//!
//! Golden files hold one `key = value` line per pinned value; `#` starts a
//! comment. Integers and booleans must match exactly, floats to a relative
//! tolerance of 1e-9.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sfdiv::diversity::diayn_skill_term;
use sfdiv::envs::{build_env, EnvConfig};
use sfdiv::mdp::{optimal_average_policy, StochasticPolicy};
use sfdiv::oracle::{
    convexity_probe, enumerate_policies, estimator_bias_report, hull_min_norm_check, random_simplex_point,
    BIAS_MIN_HORIZON,
};
use sfdiv::robustness::min_norm_point;

use crate::config::{canonical_json, parse_json, read_text, sha256_hex, validate_name, SCHEMA_VERSION};
use crate::error::{CliError, CliResult};

pub const MANIFEST_FILE: &str = "oracle_manifest.json";
const FLOAT_RTOL: f64 = 1e-9;
const GRID_RESOLUTION: f64 = 1e-3;

fn default_bias_seeds() -> usize {
    200
}
fn default_pairs() -> usize {
    1000
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OracleEnv {
    pub name: String,
    pub env: EnvConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OracleConfig {
    pub schema_version: u32,
    /// Golden file, relative to the config file.
    pub golden: String,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_bias_seeds")]
    pub bias_seeds: usize,
    #[serde(default = "default_pairs")]
    pub convexity_pairs: usize,
    pub envs: Vec<OracleEnv>,
}

impl OracleConfig {
    pub fn load(path: &Path) -> CliResult<Self> {
        let cfg: Self = parse_json(&read_text(path)?)?;
        if cfg.schema_version != SCHEMA_VERSION {
            return Err(CliError::config("schema_version", format!("unsupported version {}", cfg.schema_version)));
        }
        for (i, e) in cfg.envs.iter().enumerate() {
            validate_name(&format!("envs[{i}].name"), &e.name)?;
            e.env
                .validate()
                .map_err(|err| CliError::config(format!("envs[{i}].env"), err.to_string()))?;
        }
        Ok(cfg)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum GoldenValue {
    Int(i64),
    Float(f64),
    Bool(bool),
}

impl fmt::Display for GoldenValue {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::Int(v) => write!(f, "{v}"),
            // Shortest round-trip representation, always with an exponent.
            Self::Float(v) => write!(f, "{v:e}"),
            Self::Bool(v) => write!(f, "{v}"),
        }
    }
}

impl GoldenValue {
    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "true" => return Some(Self::Bool(true)),
            "false" => return Some(Self::Bool(false)),
            _ => {}
        }
        if let Ok(v) = s.parse::<i64>() {
            return Some(Self::Int(v));
        }
        s.parse::<f64>().ok().map(Self::Float)
    }

    pub fn matches(&self, other: &Self) -> bool {
        match (self, other) {
            (Self::Float(a), Self::Float(b)) => (a - b).abs() <= FLOAT_RTOL * a.abs().max(b.abs()).max(1e-3),
            _ => self == other,
        }
    }
}

pub type GoldenTable = BTreeMap<String, GoldenValue>;

pub fn format_golden(values: &GoldenTable) -> String {
    let mut out = String::from("# sfdiv oracle golden values\n# regenerate with `sfdiv oracle --config <file> --regen`\n");
    for (k, v) in values {
        out.push_str(&format!("{k} = {v}\n"));
    }
    out
}

pub fn parse_golden(text: &str) -> CliResult<GoldenTable> {
    let mut out = GoldenTable::new();
    for (n, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let bad = || CliError::Mismatch(format!("golden line {} is malformed: `{raw}`", n + 1));
        let (k, v) = line.split_once('=').ok_or_else(bad)?;
        let value = GoldenValue::parse(v.trim()).ok_or_else(bad)?;
        out.insert(k.trim().to_string(), value);
    }
    Ok(out)
}

/// Every mismatch between pinned and computed values, one message each.
pub fn compare(golden: &GoldenTable, computed: &GoldenTable) -> Vec<String> {
    let mut out = Vec::new();
    for (k, c) in computed {
        match golden.get(k) {
            None => out.push(format!("`{k}` is missing from the golden file (computed {c})")),
            Some(g) if !g.matches(c) => out.push(format!("`{k}`: golden {g}, computed {c}")),
            Some(_) => {}
        }
    }
    for k in golden.keys().filter(|k| !computed.contains_key(*k)) {
        out.push(format!("`{k}` is pinned but no longer computed"));
    }
    out
}

fn check(cond: bool, msg: impl FnOnce() -> String) -> CliResult<()> {
    if cond {
        Ok(())
    } else {
        Err(CliError::Mismatch(msg()))
    }
}

fn env_values(cfg: &OracleConfig, entry: &OracleEnv) -> CliResult<Vec<(String, GoldenValue)>> {
    let name = &entry.name;
    let key = |k: &str| format!("{name}.{k}");
    let mdp = build_env(&entry.env)?;
    let reward = mdp.extrinsic_reward();
    let en = enumerate_policies(&mdp, reward)?;
    let max_det = en
        .max_value()
        .ok_or_else(|| CliError::Runtime(format!("{name}: no deterministic policy has a unique stationary distribution")))?;
    let (_, lp) = optimal_average_policy(&mdp, reward)?;
    check((max_det - lp).abs() <= 1e-8, || {
        format!("{name}: enumeration optimum {max_det} differs from LP optimum {lp}")
    })?;

    let sfs = en.ergodic_sfs();
    let hull = min_norm_point(&sfs)?.norm();
    let three: Vec<Vec<f64>> = sfs.iter().take(3).cloned().collect();
    let solver3 = min_norm_point(&three)?.norm();
    let grid3 = hull_min_norm_check(&three, GRID_RESOLUTION)?;
    let spread = three
        .iter()
        .flat_map(|a| three.iter().map(move |b| a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt()))
        .fold(0.0f64, f64::max);
    check(grid3 >= solver3 - 1e-12 && grid3 - solver3 <= 2.0 * GRID_RESOLUTION * spread + 1e-12, || {
        format!("{name}: grid min-norm {grid3} vs active-set {solver3}")
    })?;

    let uniform = StochasticPolicy::uniform(mdp.n_states(), mdp.n_actions());
    let probe = estimator_bias_report(&mdp, &uniform, reward, &[BIAS_MIN_HORIZON], 1, cfg.seed)?;
    let horizon = probe.horizon_threshold();
    let bias = estimator_bias_report(&mdp, &uniform, reward, &[horizon], cfg.bias_seeds, cfg.seed)?;
    check(bias.passed(), || format!("{name}: estimator bias check failed: {:?}", bias.rows))?;

    Ok(vec![
        (key("policies"), GoldenValue::Int(en.len() as i64)),
        (key("ergodic_policies"), GoldenValue::Int(sfs.len() as i64)),
        (key("max_deterministic_value"), GoldenValue::Float(max_det)),
        (key("lp_optimal_value"), GoldenValue::Float(lp)),
        (key("hull_min_norm"), GoldenValue::Float(hull)),
        (key("hull3_min_norm"), GoldenValue::Float(solver3)),
        (key("hull3_grid_min_norm"), GoldenValue::Float(grid3)),
        (key("mixing_time"), GoldenValue::Int(bias.mixing_time as i64)),
        (key("bias_horizon"), GoldenValue::Int(horizon as i64)),
        (key("bias_within_tolerance"), GoldenValue::Float(bias.rows[0].within_tolerance)),
        (key("bias_mean_abs_error"), GoldenValue::Float(bias.rows[0].mean_abs_error)),
    ])
}

fn probe_values(cfg: &OracleConfig) -> CliResult<Vec<(String, GoldenValue)>> {
    use rand::SeedableRng;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(cfg.seed);
    let others = [random_simplex_point(&mut rng, 4), random_simplex_point(&mut rng, 4)];
    let prior = [0.5, 0.25, 0.25];
    let diayn = |d: &[f64]| {
        let ds = vec![d.to_vec(), others[0].clone(), others[1].clone()];
        diayn_skill_term(&ds, &prior, 0).expect("interior distributions")
    };
    let convex = convexity_probe(diayn, 4, cfg.convexity_pairs, cfg.seed, 1e-10);
    check(convex.passed(), || format!("skill term failed midpoint convexity: {convex:?}"))?;
    let concave = convexity_probe(|d: &[f64]| -d.iter().map(|x| x * x).sum::<f64>(), 4, cfg.convexity_pairs, cfg.seed, 1e-10);
    check(!concave.passed(), || "concave control was not flagged".to_string())?;
    Ok(vec![
        ("convexity.pairs".into(), GoldenValue::Int(convex.pairs as i64)),
        ("convexity.skill_term_violations".into(), GoldenValue::Int(convex.violations as i64)),
        ("convexity.concave_control_violations".into(), GoldenValue::Int(concave.violations as i64)),
    ])
}

/// All pinned values; also fails on any internal cross-check.
pub fn compute_golden(cfg: &OracleConfig) -> CliResult<GoldenTable> {
    let per_env: Vec<Vec<(String, GoldenValue)>> =
        cfg.envs.par_iter().map(|e| env_values(cfg, e)).collect::<CliResult<_>>()?;
    let mut out: GoldenTable = per_env.into_iter().flatten().collect();
    out.extend(probe_values(cfg)?);
    Ok(out)
}

#[derive(Debug, Clone)]
pub struct OracleOutcome {
    pub golden_path: PathBuf,
    pub values: GoldenTable,
    pub regenerated: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct OracleManifest {
    pub tool: String,
    pub version: String,
    pub config_hash: String,
    pub golden_file: String,
    pub golden_sha256: String,
    pub entries: usize,
    pub generated_at: String,
}

pub fn golden_path(config: &Path, cfg: &OracleConfig) -> PathBuf {
    config.parent().unwrap_or_else(|| Path::new(".")).join(&cfg.golden)
}

pub fn cmd_oracle(config: &Path, regen: bool) -> CliResult<OracleOutcome> {
    let cfg = OracleConfig::load(config)?;
    let values = compute_golden(&cfg)?;
    let path = golden_path(config, &cfg);
    if regen {
        let text = format_golden(&values);
        fs::write(&path, &text).map_err(|e| CliError::io(&path, e))?;
        let manifest = OracleManifest {
            tool: env!("CARGO_PKG_NAME").to_string(),
            version: env!("CARGO_PKG_VERSION").to_string(),
            config_hash: sha256_hex(canonical_json(&cfg).as_bytes()),
            golden_file: cfg.golden.clone(),
            golden_sha256: sha256_hex(text.as_bytes()),
            entries: values.len(),
            generated_at: chrono::Utc::now().to_rfc3339_opts(chrono::SecondsFormat::Millis, true),
        };
        let mpath = path.with_file_name(MANIFEST_FILE);
        let body = serde_json::to_string_pretty(&manifest).map_err(|e| CliError::Runtime(e.to_string()))? + "\n";
        fs::write(&mpath, body).map_err(|e| CliError::io(&mpath, e))?;
        return Ok(OracleOutcome {
            golden_path: path,
            values,
            regenerated: true,
        });
    }
    let text = fs::read_to_string(&path)
        .map_err(|e| CliError::Mismatch(format!("cannot read golden file {}: {e}", path.display())))?;
    let mismatches = compare(&parse_golden(&text)?, &values);
    if !mismatches.is_empty() {
        return Err(CliError::Mismatch(mismatches.join("; ")));
    }
    Ok(OracleOutcome {
        golden_path: path,
        values,
        regenerated: false,
    })
}
