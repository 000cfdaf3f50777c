//! Shared fixtures for the benchmarks.

use latticeloc_core::sim::{render_frame, sequence_rng, SimConfig, TruthAtom};
use latticeloc_core::{AnalysisCalib, Frame, FrameMeta, LsfModel};

/// Bright preset: enough signal that every benchmark ROI counts correctly.
pub fn bright() -> SimConfig {
    SimConfig {
        i_a: 20_000.0,
        ..SimConfig::default()
    }
}

pub fn calib(cfg: &SimConfig) -> AnalysisCalib {
    AnalysisCalib::new(cfg.i_a, LsfModel::gaussian(cfg.sigma_sp_px()).unwrap(), cfg.pixel_scale_nm)
}

/// `n` atoms spaced `gap_sites` apart starting at pixel `start_px`.
pub fn row_of_atoms(cfg: &SimConfig, n: usize, start_px: f64, gap_sites: f64) -> Vec<TruthAtom> {
    (0..n)
        .map(|k| TruthAtom {
            site: k as i64,
            position_nm: start_px * cfg.pixel_scale_nm + k as f64 * gap_sites * cfg.site_nm,
            survival: 1.0,
        })
        .collect()
}

pub fn frame(cfg: &SimConfig, atoms: &[TruthAtom], seed: u64) -> Frame {
    render_frame(atoms, cfg, 0, FrameMeta::default(), &mut sequence_rng(seed, 0)).unwrap()
}
