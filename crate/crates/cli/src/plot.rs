//! `plot`: re-renders the figures of finished runs into `<run>/plots/`.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use crate::error::{CliError, CliResult};
use crate::run::{scatter_svg, PolicySetFile, POLICY_SET_FILE, TRACE_FILE, TRACE_HEADER};
use crate::svg;

pub const PLOT_DIR: &str = "plots";
const MAX_TRACE_POINTS: usize = 400;

/// Run directories under `dir`: `dir` itself if it holds a policy set,
/// else its immediate subdirectories that do, in name order.
pub fn find_runs(dir: &Path) -> CliResult<Vec<PathBuf>> {
    if dir.join(POLICY_SET_FILE).is_file() {
        return Ok(vec![dir.to_path_buf()]);
    }
    let entries = fs::read_dir(dir).map_err(|e| CliError::io(dir, e))?;
    let mut runs: Vec<PathBuf> = entries
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.join(POLICY_SET_FILE).is_file())
        .collect();
    runs.sort();
    Ok(runs)
}

struct TraceSeries {
    step: Vec<f64>,
    v_e: Vec<f64>,
    v_d: Vec<f64>,
    sigma: Vec<f64>,
}

fn parse_traces(path: &Path) -> CliResult<BTreeMap<usize, TraceSeries>> {
    let text = fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
    let mut lines = text.lines();
    if lines.next() != Some(TRACE_HEADER) {
        return Err(CliError::Runtime(format!("{} has an unexpected header", path.display())));
    }
    let bad = |n: usize| CliError::Runtime(format!("{}: malformed row {}", path.display(), n + 2));
    let mut out: BTreeMap<usize, TraceSeries> = BTreeMap::new();
    for (n, line) in lines.enumerate() {
        let cols: Vec<&str> = line.split(',').collect();
        if cols.len() != 6 {
            return Err(bad(n));
        }
        let num = |i: usize| cols[i].parse::<f64>().map_err(|_| bad(n));
        let policy: usize = cols[0].parse().map_err(|_| bad(n))?;
        let s = out.entry(policy).or_insert(TraceSeries {
            step: Vec::new(),
            v_e: Vec::new(),
            v_d: Vec::new(),
            sigma: Vec::new(),
        });
        s.step.push(num(1)?);
        s.v_e.push(num(2)?);
        s.v_d.push(num(3)?);
        s.sigma.push(num(4)?);
    }
    Ok(out)
}

/// File name and contents of every figure for one run.
pub fn render_run(run_dir: &Path) -> CliResult<Vec<(String, String)>> {
    let path = run_dir.join(POLICY_SET_FILE);
    let text = fs::read_to_string(&path).map_err(|e| CliError::io(&path, e))?;
    let file: PolicySetFile =
        serde_json::from_str(&text).map_err(|e| CliError::Runtime(format!("{}: {e}", path.display())))?;
    let g = file.geometry;
    let mut figures = Vec::new();
    for p in &file.policies {
        figures.push((
            format!("heatmap_{:02}.svg", p.index),
            svg::heatmap(&p.stationary, g.width, g.height, &format!("{}: policy {} stationary distribution", file.name, p.index)),
        ));
    }
    figures.push(("sf_scatter.svg".to_string(), scatter_svg(&file)));
    let trace_path = run_dir.join(TRACE_FILE);
    if trace_path.is_file() {
        for (policy, s) in parse_traces(&trace_path)? {
            let keep = svg::thin_indices(s.step.len(), MAX_TRACE_POINTS);
            let pick = |v: &[f64]| keep.iter().map(|&i| v[i]).collect::<Vec<f64>>();
            figures.push((
                format!("trace_{policy:02}.svg"),
                svg::line_plot(
                    &pick(&s.step),
                    &[("v_e", pick(&s.v_e)), ("v_d", pick(&s.v_d)), ("sigma(lambda)", pick(&s.sigma))],
                    "step",
                    &format!("{}: policy {policy} primal-dual trace", file.name),
                ),
            ));
        }
    }
    Ok(figures)
}

/// Renders everything first and writes only if every run rendered.
pub fn cmd_plot(dir: &Path) -> CliResult<Vec<PathBuf>> {
    let runs = find_runs(dir)?;
    if runs.is_empty() {
        return Err(CliError::Config {
            field: None,
            message: format!("no run with {POLICY_SET_FILE} under {}", dir.display()),
        });
    }
    let rendered: Vec<(PathBuf, Vec<(String, String)>)> = runs
        .iter()
        .map(|r| render_run(r).map(|f| (r.join(PLOT_DIR), f)))
        .collect::<CliResult<_>>()?;
    let mut written = Vec::new();
    for (plot_dir, figures) in rendered {
        fs::create_dir_all(&plot_dir).map_err(|e| CliError::io(&plot_dir, e))?;
        for (name, body) in figures {
            let path = plot_dir.join(name);
            fs::write(&path, body).map_err(|e| CliError::io(&path, e))?;
            written.push(path);
        }
    }
    Ok(written)
}
