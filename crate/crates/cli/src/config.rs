//! Experiment configuration files.
//!
//! ```json
//! {
//!   "schema_version": 1,
//!   "runs": [
//!     {"name": "gadget", "env": {"kind": "two_state", "noise": 0.0},
//!      "dsp": {"n_policies": 2, "mechanism_d": {"kind": "min"}}}
//!   ]
//! }
//! ```
//!
//! Unknown fields anywhere are errors.

use std::collections::HashSet;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use sfdiv::dsp::DspConfig;
use sfdiv::envs::EnvConfig;

use crate::error::{CliError, CliResult};

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub schema_version: u32,
    pub runs: Vec<RunConfig>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    /// Output subdirectory; letters, digits, `-` and `_` only.
    pub name: String,
    pub env: EnvConfig,
    #[serde(default)]
    pub dsp: DspConfig,
}

impl RunConfig {
    /// SHA-256 of the canonical JSON of this entry with defaults filled in.
    pub fn hash(&self) -> String {
        sha256_hex(canonical_json(self).as_bytes())
    }
}

/// Compact JSON with object keys sorted.
pub fn canonical_json<T: Serialize>(value: &T) -> String {
    let v = serde_json::to_value(value).expect("config types serialize");
    serde_json::to_string(&v).expect("values serialize")
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

pub fn read_text(path: &Path) -> CliResult<String> {
    std::fs::read_to_string(path).map_err(|e| CliError::Config {
        field: None,
        message: format!("cannot read {}: {e}", path.display()),
    })
}

/// Parses JSON with `serde_json`'s line/column diagnostics on failure.
pub fn parse_json<T: for<'de> Deserialize<'de>>(text: &str) -> CliResult<T> {
    serde_json::from_str(text).map_err(|e| CliError::Config {
        field: None,
        message: e.to_string(),
    })
}

fn field_for(what: &str) -> &str {
    match what {
        "decay" | "update_period" | "lagrange" => "lagrange",
        "temperature" | "prior" => "mechanism_d",
        _ => "",
    }
}

fn core_to_config(prefix: &str, e: sfdiv::Error) -> CliError {
    match e {
        sfdiv::Error::Invalid { what, reason } => {
            let parent = field_for(what);
            let field = if parent.is_empty() {
                format!("{prefix}.{what}")
            } else if parent == what {
                format!("{prefix}.{what}")
            } else {
                format!("{prefix}.{parent}.{what}")
            };
            CliError::config(field, reason)
        }
        sfdiv::Error::NonNormalizedPrior { sum } => {
            CliError::config(format!("{prefix}.mechanism_d.prior"), format!("sums to {sum}, not 1"))
        }
        other => CliError::Config {
            field: Some(prefix.to_string()),
            message: other.to_string(),
        },
    }
}

pub fn validate_name(field: &str, name: &str) -> CliResult<()> {
    let ok = !name.is_empty() && name.chars().all(|c| c.is_ascii_alphanumeric() || c == '-' || c == '_');
    if ok {
        Ok(())
    } else {
        Err(CliError::config(field, format!("`{name}` must be non-empty [A-Za-z0-9_-]")))
    }
}

impl ExperimentConfig {
    pub fn parse(text: &str) -> CliResult<Self> {
        let cfg: Self = parse_json(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> CliResult<Self> {
        Self::parse(&read_text(path)?)
    }

    pub fn validate(&self) -> CliResult<()> {
        if self.schema_version != SCHEMA_VERSION {
            return Err(CliError::config(
                "schema_version",
                format!("unsupported version {} (expected {SCHEMA_VERSION})", self.schema_version),
            ));
        }
        if self.runs.is_empty() {
            return Err(CliError::config("runs", "at least one run is required"));
        }
        let mut seen = HashSet::new();
        for (i, run) in self.runs.iter().enumerate() {
            validate_name(&format!("runs[{i}].name"), &run.name)?;
            if !seen.insert(run.name.as_str()) {
                return Err(CliError::config(format!("runs[{i}].name"), format!("duplicate name `{}`", run.name)));
            }
            run.env.validate().map_err(|e| core_to_config(&format!("runs[{i}].env"), e))?;
            run.dsp.validate().map_err(|e| core_to_config(&format!("runs[{i}].dsp"), e))?;
        }
        Ok(())
    }
}
