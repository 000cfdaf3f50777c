//! Run configuration: a TOML file whose tables mirror the command-line flags.
//! Flags win over the file, the file wins over built-in defaults.

use std::fs;
use std::path::Path;

use latticeloc_core::analysis::{LatticeCalib, StatsParams};
use latticeloc_core::lsf::LsfForm;
use latticeloc_core::sim::SimConfig;
use latticeloc_core::SegmentParams;
use serde::{Deserialize, Serialize};

use crate::error::{CliError, Result};

pub const CONFIG_ENV: &str = "LATTICELOC_CONFIG";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Worker threads; 0 uses every core.
    pub jobs: usize,
    pub seed: u64,
    pub segment: SegmentParams,
    pub lattice: LatticeCalib,
    pub analysis: AnalysisOptions,
    pub lsf: LsfForm,
    pub stats: StatsParams,
    pub simulate: SimConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            jobs: 0,
            seed: 0,
            segment: SegmentParams::default(),
            lattice: LatticeCalib::default(),
            analysis: AnalysisOptions::default(),
            lsf: LsfForm::Gaussian,
            stats: StatsParams::default(),
            simulate: SimConfig::default(),
        }
    }
}

/// Estimator settings that are not part of the LSF calibration file.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AnalysisOptions {
    pub reliability_tol: f64,
    pub count_tolerance: f64,
    pub mode_cutoff: f64,
    pub mode_snr: f64,
}

impl Default for AnalysisOptions {
    fn default() -> Self {
        let c = latticeloc_core::AnalysisCalib::new(1.0, latticeloc_core::LsfModel::gaussian(1.0).unwrap(), 1.0);
        Self {
            reliability_tol: c.reliability_tol,
            count_tolerance: c.count_tolerance,
            mode_cutoff: c.mode_cutoff,
            mode_snr: c.mode_snr,
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let bad = |e: &dyn std::fmt::Display| CliError::Usage(format!("config {}: {e}", path.display()));
        let text = fs::read_to_string(path).map_err(|e| bad(&e))?;
        toml::from_str(&text).map_err(|e| bad(&e))
    }

    /// Loads `path`, or returns the defaults when there is none.
    pub fn resolve(path: Option<&Path>) -> Result<Self> {
        path.map_or_else(|| Ok(Self::default()), Self::load)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_file_gives_defaults() {
        let c: RunConfig = toml::from_str("").unwrap();
        assert_eq!(c, RunConfig::default());
    }

    #[test]
    fn tables_override_fields() {
        let c: RunConfig = toml::from_str(
            "jobs = 3\n[segment]\nk_on = 5.0\n[stats]\nmax_n = 4\n[simulate]\nsequences = 7\n[lsf]\nform = \"empirical\"\nspacing = 0.25\n",
        )
        .unwrap();
        assert_eq!(c.jobs, 3);
        assert_eq!(c.segment.k_on, 5.0);
        assert_eq!(c.segment.k_off, SegmentParams::default().k_off);
        assert_eq!(c.stats.max_n, 4);
        assert_eq!(c.simulate.sequences, 7);
        assert_eq!(c.lsf, LsfForm::Empirical { spacing: 0.25 });
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(toml::from_str::<RunConfig>("job = 3").is_err());
    }
}
