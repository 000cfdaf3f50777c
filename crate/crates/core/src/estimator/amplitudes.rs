use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::lsf::LsfModel;
use crate::pipeline::Profile;

/// Positions closer than this cannot be told apart by a linear fit.
pub const MIN_SEPARATION_PX: f64 = 1e-6;
const MAX_CONDITION: f64 = 1e12;

fn closest_pair(positions: &[f64]) -> Option<(f64, f64)> {
    let mut sorted = positions.to_vec();
    sorted.sort_by(f64::total_cmp);
    sorted
        .windows(2)
        .min_by(|a, b| (a[1] - a[0]).total_cmp(&(b[1] - b[0])))
        .map(|w| (w[0], w[1]))
}

/// Linear least-squares amplitudes `a_k` minimizing
/// `sum_i (I(x_i) - a0 - sum_k a_k L(x_i - xi_k))^2` at fixed baseline and positions.
pub fn fit_amplitudes(roi: &Profile, a0: f64, positions: &[f64], lsf: &LsfModel) -> Result<Vec<f64>> {
    if positions.is_empty() {
        return Ok(Vec::new());
    }
    if let Some((a, b)) = closest_pair(positions) {
        if (b - a).abs() < MIN_SEPARATION_PX {
            return Err(Error::IllConditioned { first: a, second: b });
        }
    }
    let m = roi.len();
    if m < positions.len() {
        return Err(Error::InvalidInput(format!(
            "{} samples cannot determine {} amplitudes",
            m,
            positions.len()
        )));
    }
    let design = DMatrix::from_fn(m, positions.len(), |i, k| lsf.eval(roi.x(i) - positions[k]));
    let rhs = DVector::from_iterator(m, roi.intensities().iter().map(|v| v - a0));
    let svd = design.svd(true, true);
    let smax = svd.singular_values.max();
    let smin = svd.singular_values.min();
    if !(smin > 0.0) || smax / smin > MAX_CONDITION {
        let (a, b) = closest_pair(positions).unwrap_or((positions[0], positions[0]));
        return Err(Error::IllConditioned { first: a, second: b });
    }
    let solution = svd
        .solve(&rhs, 0.0)
        .map_err(|e| Error::Degenerate(format!("amplitude solve failed: {e}")))?;
    if solution.iter().any(|v| !v.is_finite()) {
        return Err(Error::Degenerate("non-finite amplitudes".into()));
    }
    Ok(solution.iter().copied().collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_spike_amplitude_is_integrated_signal() {
        let g = LsfModel::gaussian(2.75).unwrap();
        let v: Vec<f64> = (0..64).map(|i| 7.0 + 1500.0 * g.eval(i as f64 - 31.4)).collect();
        let integrated: f64 = v.iter().map(|x| x - 7.0).sum();
        let p = Profile::new(v, 0, 294.6).unwrap();
        let a = fit_amplitudes(&p, 7.0, &[31.4], &g).unwrap();
        assert!((a[0] - integrated).abs() < 1e-9 * integrated);
        assert!((a[0] - 1500.0).abs() < 1e-6);
    }

    #[test]
    fn two_spikes() {
        let g = LsfModel::gaussian(2.75).unwrap();
        let v: Vec<f64> = (0..64)
            .map(|i| 800.0 * g.eval(i as f64 - 30.0) + 1200.0 * g.eval(i as f64 - 32.0))
            .collect();
        let p = Profile::new(v, 0, 294.6).unwrap();
        let a = fit_amplitudes(&p, 0.0, &[30.0, 32.0], &g).unwrap();
        assert!((a[0] - 800.0).abs() < 1e-6 && (a[1] - 1200.0).abs() < 1e-6, "{a:?}");
    }

    #[test]
    fn duplicate_positions_are_ill_conditioned() {
        let g = LsfModel::gaussian(2.75).unwrap();
        let p = Profile::new(vec![1.0; 30], 0, 294.6).unwrap();
        assert!(matches!(
            fit_amplitudes(&p, 0.0, &[12.0, 12.0], &g),
            Err(Error::IllConditioned { .. })
        ));
    }
}
