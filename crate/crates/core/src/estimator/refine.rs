use nalgebra::DMatrix;

use super::{AnalysisCalib, Spike, SpikeFit};
use crate::lm::{self, LeastSquares, LmSettings};
use crate::lsf::LsfModel;
use crate::pipeline::Profile;

/// Smallest amplitude the refinement may assign, relative to `I_a`.
const MIN_AMPLITUDE_FRACTION: f64 = 1e-6;

/// Joint residual model over `[a0, a_1, xi_1, ..., a_N, xi_N]`.
pub(crate) struct SpikeModel<'a> {
    pub xs: Vec<f64>,
    pub ys: Vec<f64>,
    pub lsf: &'a LsfModel,
    pub n_atoms: usize,
    pub min_amplitude: f64,
    pub bounds: (f64, f64),
}

impl<'a> SpikeModel<'a> {
    pub fn new(roi: &Profile, lsf: &'a LsfModel, n_atoms: usize, min_amplitude: f64) -> Self {
        Self {
            xs: roi.samples().map(|(x, _)| x).collect(),
            ys: roi.intensities().to_vec(),
            lsf,
            n_atoms,
            min_amplitude,
            bounds: (roi.origin() as f64 - 0.5, roi.end() as f64 - 0.5),
        }
    }

    pub fn params(fit: &SpikeFit) -> Vec<f64> {
        std::iter::once(fit.a0)
            .chain(fit.atoms.iter().flat_map(|s| [s.amplitude, s.position]))
            .collect()
    }

    pub fn cost(&self, params: &[f64]) -> f64 {
        let mut r = vec![0.0; self.xs.len()];
        self.residuals(params, &mut r);
        r.iter().map(|v| v * v).sum()
    }
}

impl LeastSquares for SpikeModel<'_> {
    fn num_params(&self) -> usize {
        1 + 2 * self.n_atoms
    }
    fn num_residuals(&self) -> usize {
        self.xs.len()
    }
    fn residuals(&self, p: &[f64], out: &mut [f64]) {
        for ((o, x), y) in out.iter_mut().zip(&self.xs).zip(&self.ys) {
            let model: f64 = p[1..]
                .chunks_exact(2)
                .map(|s| s[0] * self.lsf.eval(x - s[1]))
                .sum();
            *o = y - p[0] - model;
        }
    }
    fn jacobian(&self, p: &[f64], jac: &mut DMatrix<f64>) {
        for (i, x) in self.xs.iter().enumerate() {
            jac[(i, 0)] = -1.0;
            for (k, s) in p[1..].chunks_exact(2).enumerate() {
                jac[(i, 1 + 2 * k)] = -self.lsf.eval(x - s[1]);
                jac[(i, 2 + 2 * k)] = s[0] * self.lsf.derivative(x - s[1]);
            }
        }
    }
    fn project(&self, p: &mut [f64]) {
        for s in p[1..].chunks_exact_mut(2) {
            s[0] = s[0].max(self.min_amplitude);
            s[1] = s[1].clamp(self.bounds.0, self.bounds.1);
        }
    }
    fn step_converged(&self, p: &[f64], step: &[f64]) -> bool {
        let amp_ok = |v: f64, d: f64| d.abs() <= 1e-12 * v.abs().max(1.0);
        amp_ok(p[0], step[0])
            && p[1..]
                .chunks_exact(2)
                .zip(step[1..].chunks_exact(2))
                .all(|(v, d)| amp_ok(v[0], d[0]) && d[1].abs() < 1e-9)
    }
}

/// Levenberg-Marquardt refinement of baseline, amplitudes and positions.
///
/// Never returns a fit with a larger residual than `initial`; when the damping
/// runs out without any improvement the initial fit comes back with
/// `converged = false`.
pub fn refine(roi: &Profile, initial: &SpikeFit, lsf: &LsfModel, calib: &AnalysisCalib) -> SpikeFit {
    let model = SpikeModel::new(roi, lsf, initial.atoms.len(), MIN_AMPLITUDE_FRACTION * calib.i_a);
    let start = SpikeModel::params(initial);
    let initial_cost = model.cost(&start);
    let out = lm::minimize(&model, &start, &LmSettings::default());

    let rms = |cost: f64| (cost / roi.len() as f64).sqrt();
    if out.damping_exhausted && out.cost >= initial_cost || out.cost > initial_cost {
        return SpikeFit {
            residual_rms: rms(initial_cost),
            converged: false,
            ..initial.clone()
        };
    }
    let mut atoms: Vec<Spike> = out.params[1..]
        .chunks_exact(2)
        .map(|s| Spike {
            amplitude: s[0],
            position: s[1],
        })
        .collect();
    atoms.sort_by(|a, b| a.position.total_cmp(&b.position));
    SpikeFit {
        a0: out.params[0],
        atoms,
        residual_rms: rms(out.cost),
        converged: out.converged,
    }
}
