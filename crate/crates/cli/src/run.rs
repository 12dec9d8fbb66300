//! `run`: executes each configured set-building run and persists its outputs.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sfdiv::dsp::{min_distance_to_earlier, run_dsp, DspResult};
use sfdiv::envs::{build_env, Geometry};
use sfdiv::mdp::TabularMdp;

use crate::config::{sha256_hex, ExperimentConfig, RunConfig};
use crate::error::{CliError, CliResult};
use crate::svg;

pub const POLICY_SET_SCHEMA: u32 = 1;
pub const MANIFEST_FILE: &str = "manifest.json";
pub const POLICY_SET_FILE: &str = "policy_set.json";
pub const METRICS_FILE: &str = "metrics.csv";
pub const TRACE_FILE: &str = "trace.csv";
pub const SCATTER_FILE: &str = "sf_scatter.svg";
pub const METRICS_HEADER: &str = "index,v_e,v_e_ratio,v_d,feasible,flagged,min_sf_distance";
pub const TRACE_HEADER: &str = "policy,step,v_e,v_d,sigma_lambda,feasible";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolicyRecordFile {
    pub index: usize,
    /// `π(a|s)`, one row per state.
    pub pi: Vec<Vec<f64>>,
    pub psi: Vec<f64>,
    pub stationary: Vec<f64>,
    pub v_e: f64,
    pub v_star: f64,
    pub v_d: Option<f64>,
    pub feasible: bool,
    pub flagged: bool,
    pub degenerate: bool,
}

/// Versioned policy-set file. Holds no timestamps, so equal inputs give equal bytes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolicySetFile {
    pub schema_version: u32,
    pub name: String,
    pub config_hash: String,
    pub mdp_fingerprint: String,
    pub geometry: Geometry,
    pub n_states: usize,
    pub n_actions: usize,
    pub n_features: usize,
    pub alpha: f64,
    pub v_star: f64,
    pub min_distance: Option<f64>,
    pub mean_distance: Option<f64>,
    pub policies: Vec<PolicyRecordFile>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub tool: String,
    pub version: String,
    pub name: String,
    pub config_hash: String,
    pub seed: u64,
    pub started_at: String,
    pub finished_at: String,
    pub outputs: Vec<String>,
    pub flagged_policies: usize,
}

#[derive(Debug, Clone)]
pub struct RunOutputs {
    pub name: String,
    pub dir: PathBuf,
    pub files: Vec<String>,
    pub flagged: usize,
}

pub fn mdp_fingerprint(mdp: &TabularMdp) -> String {
    sha256_hex(&mdp.canonical_bytes())
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

pub fn policy_set_file(run: &RunConfig, mdp: &TabularMdp, res: &DspResult) -> PolicySetFile {
    let policies = res
        .records
        .iter()
        .zip(&res.set.entries)
        .map(|(r, e)| PolicyRecordFile {
            index: r.index,
            pi: (0..mdp.n_states()).map(|s| e.policy.row(s).to_vec()).collect(),
            psi: e.psi.0.clone(),
            stationary: r.stationary.0.clone(),
            v_e: r.v_e,
            v_star: r.v_star,
            v_d: r.v_d,
            feasible: r.feasible,
            flagged: r.flagged,
            degenerate: r.degenerate,
        })
        .collect();
    PolicySetFile {
        schema_version: POLICY_SET_SCHEMA,
        name: run.name.clone(),
        config_hash: run.hash(),
        mdp_fingerprint: mdp_fingerprint(mdp),
        geometry: run.env.geometry(),
        n_states: mdp.n_states(),
        n_actions: mdp.n_actions(),
        n_features: mdp.n_features(),
        alpha: run.dsp.alpha,
        v_star: res.set.v_star,
        min_distance: res.metrics.min_distance,
        mean_distance: res.metrics.mean_distance,
        policies,
    }
}

pub fn metrics_csv(res: &DspResult) -> String {
    let mut out = String::from(METRICS_HEADER);
    out.push('\n');
    let earlier = min_distance_to_earlier(&res.set);
    for (r, d) in res.records.iter().zip(earlier) {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{}",
            r.index,
            r.v_e,
            opt(r.value_ratio()),
            opt(r.v_d),
            r.feasible,
            r.flagged,
            opt(d)
        );
    }
    out
}

pub fn trace_csv(res: &DspResult) -> String {
    let mut out = String::from(TRACE_HEADER);
    out.push('\n');
    for r in &res.records {
        for t in &r.trace {
            let _ = writeln!(
                out,
                "{},{},{},{},{},{}",
                r.index, t.step, t.v_e, t.v_d, t.sigma_lambda, t.feasible
            );
        }
    }
    out
}

pub fn scatter_svg(file: &PolicySetFile) -> String {
    let psis: Vec<Vec<f64>> = file.policies.iter().map(|p| p.psi.clone()).collect();
    let labels: Vec<String> = file.policies.iter().map(|p| p.index.to_string()).collect();
    svg::scatter(&svg::project_2d(&psis), &labels, &format!("{}: successor features", file.name))
}

fn write(dir: &Path, name: &str, contents: &str) -> CliResult<()> {
    let path = dir.join(name);
    fs::write(&path, contents).map_err(|e| CliError::io(path, e))
}

fn now() -> String {
    chrono::Utc::now().to_rfc3339_opts(chrono::SecondsFormat::Millis, true)
}

/// Runs one entry and writes its five output files under `out_root/<name>/`.
pub fn execute_run(run: &RunConfig, out_root: &Path) -> CliResult<RunOutputs> {
    let started_at = now();
    let mdp = build_env(&run.env)?;
    let res = run_dsp(&mdp, &run.dsp)?;
    let file = policy_set_file(run, &mdp, &res);
    let dir = out_root.join(&run.name);
    fs::create_dir_all(&dir).map_err(|e| CliError::io(&dir, e))?;
    let policy_json = serde_json::to_string_pretty(&file).map_err(|e| CliError::Runtime(e.to_string()))?;
    write(&dir, POLICY_SET_FILE, &(policy_json + "\n"))?;
    write(&dir, METRICS_FILE, &metrics_csv(&res))?;
    write(&dir, TRACE_FILE, &trace_csv(&res))?;
    write(&dir, SCATTER_FILE, &scatter_svg(&file))?;
    let flagged = res.records.iter().filter(|r| r.flagged).count();
    let files: Vec<String> = [MANIFEST_FILE, POLICY_SET_FILE, METRICS_FILE, TRACE_FILE, SCATTER_FILE]
        .iter()
        .map(|s| s.to_string())
        .collect();
    let manifest = RunManifest {
        tool: env!("CARGO_PKG_NAME").to_string(),
        version: env!("CARGO_PKG_VERSION").to_string(),
        name: run.name.clone(),
        config_hash: file.config_hash.clone(),
        seed: run.dsp.seed,
        started_at,
        finished_at: now(),
        outputs: files.clone(),
        flagged_policies: flagged,
    };
    let manifest_json = serde_json::to_string_pretty(&manifest).map_err(|e| CliError::Runtime(e.to_string()))?;
    write(&dir, MANIFEST_FILE, &(manifest_json + "\n"))?;
    Ok(RunOutputs {
        name: run.name.clone(),
        dir,
        files,
        flagged,
    })
}

/// Runs every entry, `jobs` at a time. Outputs are returned in config order.
pub fn cmd_run(config: &Path, out_root: &Path, jobs: usize) -> CliResult<Vec<RunOutputs>> {
    let cfg = ExperimentConfig::load(config)?;
    fs::create_dir_all(out_root).map_err(|e| CliError::io(out_root, e))?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs.max(1))
        .build()
        .map_err(|e| CliError::Runtime(e.to_string()))?;
    pool.install(|| cfg.runs.par_iter().map(|run| execute_run(run, out_root)).collect())
}
