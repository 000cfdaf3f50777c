use super::AnalysisCalib;
use crate::error::{Error, Result};
use crate::pipeline::{NoiseEstimate, Profile};

/// Atom number of one ROI from its integrated excess signal.
#[derive(Debug, Clone, PartialEq)]
pub struct AtomCount {
    pub n: usize,
    /// Integrated excess signal in units of `I_a`.
    pub estimate: f64,
    /// The estimate sits further than the count tolerance from the nearest integer.
    pub ambiguous: bool,
    /// Running sum of `I(x_i) - a0` across the ROI.
    pub cumulative: Vec<f64>,
}

pub fn count_atoms(roi: &Profile, noise: &NoiseEstimate, calib: &AnalysisCalib) -> Result<AtomCount> {
    if !(calib.i_a > 0.0) {
        return Err(Error::InvalidInput(format!("I_a must be positive, got {}", calib.i_a)));
    }
    let cumulative: Vec<f64> = roi
        .intensities()
        .iter()
        .scan(0.0, |acc, v| {
            *acc += v - noise.baseline;
            Some(*acc)
        })
        .collect();
    let total = *cumulative.last().expect("profiles are non-empty");
    if total < -calib.count_tolerance * calib.i_a {
        return Err(Error::NegativeSignal {
            total,
            tolerance: calib.count_tolerance,
        });
    }
    let estimate = total / calib.i_a;
    let n = estimate.round().max(0.0);
    Ok(AtomCount {
        n: n as usize,
        estimate,
        ambiguous: (estimate - n).abs() > calib.count_tolerance,
        cumulative,
    })
}
