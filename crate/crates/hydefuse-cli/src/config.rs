//! Layered configuration: command-line flags override values from an
//! optional JSON config file, which in turn override built-in defaults.
//!
//! Every subcommand echoes the fully resolved configuration into its
//! `report.json` so a run can be reproduced from its artifacts alone.

use std::path::Path;

use serde::{Deserialize, Serialize};

use hydefuse::denoiser::DenoiserParams;
use hydefuse::{Error, Result};

/// Keys accepted in the JSON config file. All optional; subcommands read
/// the subset they care about and ignore the rest.
#[derive(Debug, Default, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FileConfig {
    pub blur: Option<String>,
    pub radius: Option<usize>,
    pub std: Option<f64>,
    pub decimation: Option<usize>,
    pub lambda: Option<f64>,
    pub groups: Option<usize>,
    pub subspace_dim: Option<usize>,
    pub patch: Option<usize>,
    pub window: Option<usize>,
    pub sigma1: Option<f64>,
    pub sigma2: Option<f64>,
    pub clusters: Option<usize>,
    pub kind: Option<String>,
    pub gamma_frac: Option<f64>,
    pub max_iters: Option<usize>,
    pub tol: Option<f64>,
    pub init: Option<String>,
    pub seed: Option<u64>,
    pub snr_h: Option<f64>,
    pub snr_m: Option<f64>,
    pub threads: Option<usize>,
}

impl FileConfig {
    /// Loads the config file, or returns the empty config when no path was
    /// given. A missing file is an I/O failure; malformed JSON or unknown
    /// keys are configuration errors.
    pub fn load(path: Option<&Path>) -> Result<Self> {
        let Some(path) = path else {
            return Ok(Self::default());
        };
        let text = std::fs::read_to_string(path).map_err(Error::Io)?;
        serde_json::from_str(&text).map_err(|err| {
            Error::Parameter(format!("config file {}: {err}", path.display()))
        })
    }
}

/// Three-layer lookup: explicit flag, then config file, then default.
pub fn pick<T>(flag: Option<T>, file: Option<T>, default: T) -> T {
    flag.or(file).unwrap_or(default)
}

/// Resolved denoiser settings as echoed in reports.
#[derive(Debug, Clone, Serialize)]
pub struct DenoiserEcho {
    pub kind: String,
    pub patch: usize,
    pub window: usize,
    pub sigma1: f64,
    pub sigma2: f64,
    pub clusters: usize,
    pub seed: u64,
}

impl DenoiserEcho {
    pub fn params(&self) -> DenoiserParams {
        DenoiserParams {
            patch_size: self.patch,
            window: self.window,
            sigma_w: self.sigma1,
            sigma_v: self.sigma2,
            clusters: self.clusters,
            seed: self.seed,
        }
    }
}

/// Resolved iteration settings as echoed in reports.
#[derive(Debug, Clone, Serialize)]
pub struct FusionEcho {
    pub subspace_dim: usize,
    pub gamma_frac: f64,
    pub max_iters: usize,
    pub tol: f64,
    pub init: String,
    pub seed: u64,
}

/// Picks a band-averaging group count that divides the band count: four
/// when possible, two for other even counts, and the full band count (a
/// single-band panchromatic response) otherwise.
pub fn default_groups(bands: usize) -> usize {
    if bands % 4 == 0 {
        4
    } else if bands % 2 == 0 {
        2
    } else {
        bands
    }
}
