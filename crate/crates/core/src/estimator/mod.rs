//! Spike-convolution fitting of atom positions inside each ROI.
//!
//! Nothing in this module knows the lattice constant: positions come from the
//! data and the LSF alone.

mod amplitudes;
mod count;
mod locate;
mod refine;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lsf::LsfModel;
use crate::pipeline::{bin_vertical, estimate_background, segment, Frame, NoiseEstimate, Profile, Roi, SegmentParams};

pub use amplitudes::{fit_amplitudes, MIN_SEPARATION_PX};
pub use count::{count_atoms, AtomCount};
pub use locate::{locate_spikes, usable_modes};
pub use refine::refine;


/// Spikes fainter than this fraction of `I_a` trigger a split restart.
const SPLIT_BELOW: f64 = 0.5;

/// Calibration constants the estimator needs.
#[derive(Debug, Clone, PartialEq)]
pub struct AnalysisCalib {
    /// Mean integrated fluorescence of one atom per exposure, counts.
    pub i_a: f64,
    pub reliability_tol: f64,
    pub lsf: LsfModel,
    pub pixel_scale_nm: f64,
    /// Fourier modes with `|L^| < mode_cutoff` are never used for position estimates.
    pub mode_cutoff: f64,
    /// Noise deviations a single atom's mode must exceed to be used; 0 keeps every
    /// mode above `mode_cutoff`.
    pub mode_snr: f64,
    pub count_tolerance: f64,
}

impl AnalysisCalib {
    pub fn new(i_a: f64, lsf: LsfModel, pixel_scale_nm: f64) -> Self {
        Self {
            i_a,
            reliability_tol: 0.20,
            lsf,
            pixel_scale_nm,
            mode_cutoff: 1e-3,
            mode_snr: 1.0,
            count_tolerance: 0.3,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = self.i_a > 0.0
            && self.reliability_tol > 0.0
            && self.reliability_tol < 1.0
            && self.mode_cutoff > 0.0
            && self.mode_cutoff < 1.0
            && self.mode_snr >= 0.0
            && self.count_tolerance > 0.0
            && self.pixel_scale_nm > 0.0;
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidInput(format!("invalid analysis calibration: {self:?}")))
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Spike {
    pub amplitude: f64,
    /// Pixel coordinate.
    pub position: f64,
}

/// Baseline plus spikes fitted to one ROI; atoms sorted by position.
#[derive(Debug, Clone, PartialEq)]
pub struct SpikeFit {
    pub a0: f64,
    pub atoms: Vec<Spike>,
    pub residual_rms: f64,
    pub converged: bool,
}

impl SpikeFit {
    pub fn positions(&self) -> Vec<f64> {
        self.atoms.iter().map(|s| s.position).collect()
    }

    pub fn amplitudes(&self) -> Vec<f64> {
        self.atoms.iter().map(|s| s.amplitude).collect()
    }
}

/// Spikes closer than this many LSF widths form one merged spot.
pub const MERGE_RADIUS_SIGMA: f64 = 0.1;

/// Per-atom reliability: `|a - I_a| / I_a < reliability_tol`, where `a` is the
/// summed amplitude of the merged spot the spike belongs to. The amplitudes of
/// coincident spikes are not separately determined, only their sum.
pub fn check_reliability(fit: &SpikeFit, calib: &AnalysisCalib) -> Vec<bool> {
    let radius = MERGE_RADIUS_SIGMA * calib.lsf.sigma_px();
    // atoms are sorted, so merged spots are runs of close neighbours
    let mut spot = vec![0usize; fit.atoms.len()];
    for k in 1..fit.atoms.len() {
        let close = fit.atoms[k].position - fit.atoms[k - 1].position < radius;
        spot[k] = if close { spot[k - 1] } else { spot[k - 1] + 1 };
    }
    let mut totals = vec![0.0; fit.atoms.len()];
    for (s, a) in spot.iter().zip(&fit.atoms) {
        totals[*s] += a.amplitude;
    }
    spot.iter()
        .map(|s| ((totals[*s] - calib.i_a) / calib.i_a).abs() < calib.reliability_tol)
        .collect()
}

/// Cutoff on `|L^|` for a ROI of `len` samples holding `n` atoms.
///
/// A mode is kept when one atom's contribution, `I_a |L^|`, exceeds `mode_snr`
/// times the noise of a Fourier coefficient, `sigma sqrt(len)`. At least `n`
/// modes are kept whenever the fixed floor allows it.
pub fn effective_cutoff(calib: &AnalysisCalib, noise: &NoiseEstimate, len: usize, n: usize) -> f64 {
    let noise_floor = calib.mode_snr * noise.sigma * (len as f64).sqrt() / calib.i_a;
    let adaptive = calib.mode_cutoff.max(noise_floor);
    let period = len.next_power_of_two();
    if usable_modes(&calib.lsf, period, adaptive) >= n {
        return adaptive;
    }
    let nth = calib.lsf.fourier(n as f64 / period as f64).norm();
    nth.min(adaptive).max(calib.mode_cutoff)
}

/// Runs count, locate, linear amplitudes and refinement on one ROI profile.
///
/// An ambiguous count is also fitted with the neighbouring atom number on the
/// side of the estimate; the larger model wins only when its drop in residual
/// sum of squares beats a BIC penalty at the measured noise level.
pub fn fit_roi(roi: &Profile, noise: &NoiseEstimate, calib: &AnalysisCalib) -> Result<(AtomCount, Option<SpikeFit>)> {
    let count = count_atoms(roi, noise, calib)?;
    if count.n == 0 {
        return Ok((count, None));
    }
    let fit = fit_n(roi, noise, calib, count.n)?;
    if !count.ambiguous {
        return Ok((count, Some(fit)));
    }
    let other = if count.estimate > count.n as f64 { count.n + 1 } else { count.n - 1 };
    if other == 0 {
        return Ok((count, Some(fit)));
    }
    let Ok(alt) = fit_n(roi, noise, calib, other) else {
        return Ok((count, Some(fit)));
    };
    let (small, large) = if other > count.n { (&fit, &alt) } else { (&alt, &fit) };
    let len = roi.len() as f64;
    let rss = |f: &SpikeFit| f.residual_rms.powi(2) * len;
    let penalty = 2.0 * len.ln() * noise.sigma.powi(2);
    let gain = rss(small) - rss(large);
    let pick_large = gain > penalty && gain > 1e-9 * rss(small);
    let best = if pick_large { large.clone() } else { small.clone() };
    Ok((count, Some(best)))
}

fn fit_n(roi: &Profile, noise: &NoiseEstimate, calib: &AnalysisCalib, n: usize) -> Result<SpikeFit> {
    let a0 = noise.baseline;
    let cutoff = effective_cutoff(calib, noise, roi.len(), n);
    let mut positions = locate_spikes(roi, a0, n, &calib.lsf, cutoff)?;
    let amplitudes = match fit_amplitudes(roi, a0, &positions, &calib.lsf) {
        Ok(a) => a,
        Err(Error::IllConditioned { .. }) => {
            // coincident roots: pull them apart and let the refinement sort it out
            spread_coincident(&mut positions, 0.25 * calib.lsf.sigma_px());
            fit_amplitudes(roi, a0, &positions, &calib.lsf)?
        }
        Err(e) => return Err(e),
    };
    let floor = 1e-6 * calib.i_a;
    let initial = SpikeFit {
        a0,
        atoms: amplitudes
            .iter()
            .zip(&positions)
            .map(|(a, x)| Spike {
                amplitude: a.max(floor),
                position: *x,
            })
            .collect(),
        residual_rms: f64::NAN,
        converged: false,
    };
    let mut fit = refine(roi, &initial, &calib.lsf, calib);
    for _ in 1..fit.atoms.len() {
        let best = split_starts(&fit, calib)
            .into_iter()
            .map(|start| refine(roi, &start, &calib.lsf, calib))
            .min_by(|a, b| a.residual_rms.total_cmp(&b.residual_rms));
        match best {
            Some(alt) if alt.residual_rms < fit.residual_rms * (1.0 - 1e-9) => fit = alt,
            _ => break,
        }
    }
    Ok(fit)
}

/// Restarts for a fit that parked a faint spike while merging two atoms into
/// one: drop the faintest spike and split one of the others in two.
fn split_starts(fit: &SpikeFit, calib: &AnalysisCalib) -> Vec<SpikeFit> {
    let Some(weak) = (0..fit.atoms.len()).min_by(|a, b| fit.atoms[*a].amplitude.total_cmp(&fit.atoms[*b].amplitude))
    else {
        return Vec::new();
    };
    if fit.atoms[weak].amplitude >= SPLIT_BELOW * calib.i_a {
        return Vec::new();
    }
    let half = 0.25 * calib.lsf.sigma_px();
    (0..fit.atoms.len())
        .filter(|i| *i != weak)
        .map(|split| {
            let mut atoms = Vec::with_capacity(fit.atoms.len());
            for (i, s) in fit.atoms.iter().enumerate() {
                if i == split {
                    for dx in [-half, half] {
                        atoms.push(Spike {
                            amplitude: 0.5 * s.amplitude,
                            position: s.position + dx,
                        });
                    }
                } else if i != weak {
                    atoms.push(*s);
                }
            }
            SpikeFit {
                atoms,
                converged: false,
                ..fit.clone()
            }
        })
        .collect()
}

fn spread_coincident(positions: &mut [f64], gap: f64) {
    positions.sort_by(f64::total_cmp);
    for i in 1..positions.len() {
        if positions[i] - positions[i - 1] < gap {
            positions[i] = positions[i - 1] + gap;
        }
    }
}

/// Extra per-record information for downstream filtering and debugging.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecordDiagnostics {
    pub position_px: f64,
    pub roi_start: i64,
    pub roi_end: i64,
    pub roi_atoms: usize,
    pub count_estimate: f64,
    pub count_ambiguous: bool,
    pub converged: bool,
    pub residual_rms: f64,
    pub a0: f64,
}

/// One fitted atom.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AtomRecord {
    pub frame_id: String,
    pub sequence_id: String,
    pub roi_id: u32,
    pub position_nm: f64,
    pub amplitude: f64,
    pub reliable: bool,
    pub diagnostics: RecordDiagnostics,
}

/// Why a ROI produced no records.
#[derive(Debug, Clone, PartialEq)]
pub struct RoiFailure {
    pub roi: Roi,
    pub message: String,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct FrameAnalysis {
    pub records: Vec<AtomRecord>,
    pub failures: Vec<RoiFailure>,
    pub noise: Option<NoiseEstimate>,
    pub rois: Vec<Roi>,
}

/// Profile, background and ROIs of a frame: the first three pipeline stages.
pub fn prepare_profile(frame: &Frame, seg: &SegmentParams) -> Result<(Profile, NoiseEstimate, Vec<Roi>)> {
    let profile = bin_vertical(frame, None)?;
    let first = estimate_background(&profile, &[])?;
    let rois = segment(&profile, &first, seg)?;
    // re-estimate without the spots, falling back to the first pass when they cover too much
    let noise = estimate_background(&profile, &rois).unwrap_or(first);
    let rois = segment(&profile, &noise, seg)?;
    Ok((profile, noise, rois))
}

/// Full per-frame pipeline. ROI-level failures are collected, never fatal.
pub fn analyze_frame_detailed(frame: &Frame, calib: &AnalysisCalib, seg: &SegmentParams) -> Result<FrameAnalysis> {
    calib.validate()?;
    let (profile, noise, rois) = prepare_profile(frame, seg)?;
    let mut out = FrameAnalysis {
        noise: Some(noise),
        rois: rois.clone(),
        ..Default::default()
    };
    for roi in rois {
        let result = profile
            .slice(roi.start..roi.end)
            .and_then(|sub| fit_roi(&sub, &noise, calib));
        let (count, fit) = match result {
            Ok(v) => v,
            Err(e) => {
                out.failures.push(RoiFailure {
                    roi,
                    message: e.to_string(),
                });
                continue;
            }
        };
        let Some(fit) = fit else { continue };
        let flags = check_reliability(&fit, calib);
        for (spike, reliable) in fit.atoms.iter().zip(flags) {
            out.records.push(AtomRecord {
                frame_id: frame.meta.frame_id.clone(),
                sequence_id: frame.meta.sequence_id.clone(),
                roi_id: roi.roi_id,
                position_nm: spike.position * frame.meta.pixel_scale_nm,
                amplitude: spike.amplitude,
                reliable,
                diagnostics: RecordDiagnostics {
                    position_px: spike.position,
                    roi_start: roi.start,
                    roi_end: roi.end,
                    roi_atoms: fit.atoms.len(),
                    count_estimate: count.estimate,
                    count_ambiguous: count.ambiguous,
                    converged: fit.converged,
                    residual_rms: fit.residual_rms,
                    a0: fit.a0,
                },
            });
        }
    }
    Ok(out)
}

/// Atom records for one frame; failing ROIs are logged and skipped.
pub fn analyze_frame(frame: &Frame, calib: &AnalysisCalib, seg: &SegmentParams) -> Result<Vec<AtomRecord>> {
    let analysis = analyze_frame_detailed(frame, calib, seg)?;
    for f in &analysis.failures {
        log::warn!(
            "frame {}: ROI {} ({}..{}) skipped: {}",
            frame.meta.frame_id,
            f.roi.roi_id,
            f.roi.start,
            f.roi.end,
            f.message
        );
    }
    Ok(analysis.records)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn calib() -> AnalysisCalib {
        AnalysisCalib::new(1000.0, LsfModel::gaussian(2.75).unwrap(), 294.6)
    }

    fn fit_with(amps: &[f64]) -> SpikeFit {
        SpikeFit {
            a0: 0.0,
            atoms: amps
                .iter()
                .enumerate()
                .map(|(i, a)| Spike {
                    amplitude: *a,
                    position: i as f64 * 5.0,
                })
                .collect(),
            residual_rms: 0.0,
            converged: true,
        }
    }

    #[test]
    fn reliability_predicate() {
        let flags = check_reliability(&fit_with(&[1000.0, 500.0, 2000.0, 1190.0, 800.0]), &calib());
        assert_eq!(flags, vec![true, false, false, true, false]);
    }

    #[test]
    fn coincident_spikes_are_judged_together() {
        let mut f = fit_with(&[1000.0, 1000.0, 1000.0]);
        f.atoms[1].position = f.atoms[0].position + 1e-3;
        assert_eq!(check_reliability(&f, &calib()), vec![false, false, true]);
        let mut halves = fit_with(&[500.0, 500.0]);
        halves.atoms[1].position = halves.atoms[0].position;
        assert_eq!(check_reliability(&halves, &calib()), vec![true, true]);
    }

    #[test]
    fn reliability_does_not_touch_fit() {
        let f = fit_with(&[1000.0, 1500.0]);
        let before = f.clone();
        let _ = check_reliability(&f, &calib());
        assert_eq!(f, before);
    }

    #[test]
    fn spreading_coincident_positions() {
        let mut p = vec![3.0, 3.0, 3.0 + 1e-9, 8.0];
        spread_coincident(&mut p, 0.5);
        assert_eq!(p, vec![3.0, 3.5, 4.0, 8.0]);
    }

    #[test]
    fn calib_validation() {
        let mut c = calib();
        assert!(c.validate().is_ok());
        c.reliability_tol = 1.5;
        assert!(c.validate().is_err());
    }
}
