//! Spike positions from trigonometric moments.
//!
//! The ROI, less its baseline, is a sum of shifted LSFs. Its Fourier
//! coefficients divided by the LSF response are the trigonometric moments
//! `m_j = sum_k a_k z_k^j` with `z_k = exp(-2 pi i xi_k / T)`, a sum of complex
//! exponentials. The `z_k` are recovered with a total-least-squares matrix
//! pencil on the Hankel matrix of the moment sequence.

use std::f64::consts::PI;

use nalgebra::DMatrix;
use num_complex::Complex64;

use crate::error::{Error, Result};
use crate::lsf::LsfModel;
use crate::pipeline::Profile;

/// Highest mode index `j` with `|L^(j/T)| >= cutoff`, scanning up to Nyquist.
pub fn usable_modes(lsf: &LsfModel, period: usize, cutoff: f64) -> usize {
    let mut k = 0;
    while k < period / 2 && lsf.fourier((k + 1) as f64 / period as f64).norm() >= cutoff {
        k += 1;
    }
    k
}

/// Deconvolved moments `m_j` for `j = 0..=k_max` over a window of `period` samples.
fn moments(excess: &[f64], lsf: &LsfModel, period: usize, k_max: usize) -> Vec<Complex64> {
    (0..=k_max)
        .map(|j| {
            let omega = -2.0 * PI * j as f64 / period as f64;
            let c: Complex64 = excess
                .iter()
                .enumerate()
                .map(|(i, y)| Complex64::from_polar(*y, omega * i as f64))
                .sum();
            c / lsf.fourier(j as f64 / period as f64)
        })
        .collect()
}

/// Estimates `n` spike positions (pixel coordinates, ascending) in a ROI.
pub fn locate_spikes(roi: &Profile, a0: f64, n: usize, lsf: &LsfModel, mode_cutoff: f64) -> Result<Vec<f64>> {
    if n == 0 {
        return Ok(Vec::new());
    }
    let len = roi.len();
    let period = len.next_power_of_two();
    let k_max = usable_modes(lsf, period, mode_cutoff);
    if k_max < n {
        return Err(Error::UnderResolved {
            usable: 2 * k_max + 1,
            required: 2 * n + 1,
            atoms: n,
        });
    }
    let excess: Vec<f64> = roi.intensities().iter().map(|v| v - a0).collect();
    if excess.iter().all(|v| *v == 0.0) {
        return Err(Error::Degenerate("ROI carries no signal above baseline".into()));
    }

    let half = moments(&excess, lsf, period, k_max);
    // m_{-j} = conj(m_j) for a real profile and a real, symmetric LSF
    let seq: Vec<Complex64> = (0..=2 * k_max)
        .map(|l| {
            if l >= k_max {
                half[l - k_max]
            } else {
                half[k_max - l].conj()
            }
        })
        .collect();

    let size = k_max + 1;
    let hankel = DMatrix::from_fn(size, size, |r, c| seq[r + c]);
    // signal subspace from the Hermitian eigenproblem of H H*; nalgebra's complex
    // SVD loses accuracy on these matrices
    let eig = nalgebra::SymmetricEigen::new(&hankel * hankel.adjoint());
    let mut order: Vec<usize> = (0..size).collect();
    order.sort_by(|a, b| eig.eigenvalues[*b].total_cmp(&eig.eigenvalues[*a]));
    if !(eig.eigenvalues[order[0]] > 0.0) {
        return Err(Error::Degenerate("moment matrix is zero".into()));
    }

    let signal = DMatrix::from_fn(size, n, |r, c| eig.eigenvectors[(r, order[c])]);
    let upper = signal.rows(0, size - 1).into_owned();
    let lower = signal.rows(1, size - 1).into_owned();
    // the columns are near-orthonormal, so the normal equations are well conditioned
    let pencil = (upper.adjoint() * &upper)
        .cholesky()
        .map(|c| c.solve(&(upper.adjoint() * &lower)))
        .ok_or_else(|| Error::Degenerate("matrix pencil is rank deficient".into()))?;
    let roots = nalgebra::Schur::new(pencil)
        .eigenvalues()
        .ok_or_else(|| Error::Degenerate("matrix pencil eigenvalues did not converge".into()))?;

    let t = period as f64;
    let last = (len - 1) as f64;
    let mut positions: Vec<f64> = roots
        .iter()
        .map(|z| {
            // unit-circle projection: only the phase carries position
            let xi = (-t * z.arg() / (2.0 * PI)).rem_euclid(t);
            let wrapped = xi - t;
            let dist = |p: f64| {
                if p < 0.0 {
                    -p
                } else if p > last {
                    p - last
                } else {
                    0.0
                }
            };
            let local = if dist(wrapped) < dist(xi) { wrapped } else { xi };
            local.clamp(-0.5, last + 0.5) + roi.origin() as f64
        })
        .collect();
    positions.sort_by(f64::total_cmp);
    Ok(positions)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn render(spikes: &[(f64, f64)], len: usize, origin: i64, sigma: f64, base: f64) -> Profile {
        let g = LsfModel::gaussian(sigma).unwrap();
        let v = (0..len)
            .map(|i| {
                let x = (origin + i as i64) as f64;
                base + spikes.iter().map(|(a, xi)| a * g.eval(x - xi)).sum::<f64>()
            })
            .collect();
        Profile::new(v, origin, 294.6).unwrap()
    }

    const SIGMA: f64 = 2.7494;

    #[test]
    fn single_spike_exact() {
        let p = render(&[(1000.0, 10.30)], 64, -22, SIGMA, 40.0);
        let lsf = LsfModel::gaussian(SIGMA).unwrap();
        let xs = locate_spikes(&p, 40.0, 1, &lsf, 1e-3).unwrap();
        assert_eq!(xs.len(), 1);
        assert!((xs[0] - 10.30).abs() < 1e-6, "{xs:?}");
    }

    #[test]
    fn nearest_neighbours_exact() {
        // one lattice site: 432.95 nm / 294.6 nm per px
        let d = 432.95 / 294.6;
        let spikes = [(1000.0, 30.2), (1000.0, 30.2 + d)];
        let p = render(&spikes, 64, 0, SIGMA, 0.0);
        let lsf = LsfModel::gaussian(SIGMA).unwrap();
        let xs = locate_spikes(&p, 0.0, 2, &lsf, 1e-3).unwrap();
        assert!((xs[0] - 30.2).abs() < 1e-6, "{xs:?}");
        assert!((xs[1] - 30.2 - d).abs() < 1e-6, "{xs:?}");
    }

    #[test]
    fn zero_roi_is_degenerate() {
        let p = Profile::new(vec![0.0; 32], 0, 294.6).unwrap();
        let lsf = LsfModel::gaussian(SIGMA).unwrap();
        assert!(matches!(
            locate_spikes(&p, 0.0, 1, &lsf, 1e-3),
            Err(Error::Degenerate(_))
        ));
        assert!(locate_spikes(&p, 0.0, 0, &lsf, 1e-3).unwrap().is_empty());
    }

    #[test]
    fn too_many_atoms_for_window() {
        let p = render(&[(1000.0, 8.0)], 16, 0, SIGMA, 0.0);
        let lsf = LsfModel::gaussian(SIGMA).unwrap();
        assert!(matches!(
            locate_spikes(&p, 0.0, 6, &lsf, 1e-3),
            Err(Error::UnderResolved { .. })
        ));
    }

    #[test]
    fn translation_shifts_positions() {
        let spikes = [(900.0, 28.3), (1100.0, 33.1)];
        let lsf = LsfModel::gaussian(SIGMA).unwrap();
        let a = render(&spikes, 64, 0, SIGMA, 5.0);
        let b = a.clone().with_origin(17);
        let xa = locate_spikes(&a, 5.0, 2, &lsf, 1e-3).unwrap();
        let xb = locate_spikes(&b, 5.0, 2, &lsf, 1e-3).unwrap();
        for (p, q) in xa.iter().zip(&xb) {
            assert!((q - p - 17.0).abs() < 1e-9);
        }
    }
}
