use std::f64::consts::{PI, SQRT_2};

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};
use statrs::function::erf::erf;

use crate::error::{Error, Result};
use crate::lm::{self, LeastSquares, LmSettings};

fn phi(u: f64) -> f64 {
    0.5 * (1.0 + erf(u / SQRT_2))
}

fn density(u: f64) -> f64 {
    (-0.5 * u * u).exp() / (2.0 * PI).sqrt()
}

/// Counts in equal bins, bin `k` centered at `origin + k * width`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Histogram {
    pub origin: f64,
    pub width: f64,
    pub counts: Vec<u64>,
}

impl Histogram {
    /// Bins centered on multiples of `width` from 0, for non-negative data.
    /// The first bin holds `[0, width/2)`.
    pub fn of_distances(values: &[f64], width: f64) -> Result<Self> {
        if !(width > 0.0) {
            return Err(Error::InvalidInput(format!("bin width must be positive, got {width}")));
        }
        if let Some(v) = values.iter().find(|v| !(**v >= 0.0) || !v.is_finite()) {
            return Err(Error::InvalidInput(format!("distance {v} is not a finite non-negative number")));
        }
        let bin = |v: f64| (v / width + 0.5).floor() as usize;
        let len = values.iter().map(|v| bin(*v) + 1).max().unwrap_or(0);
        let mut counts = vec![0; len];
        for v in values {
            counts[bin(*v)] += 1;
        }
        Ok(Self {
            origin: 0.0,
            width,
            counts,
        })
    }

    /// Bins of `width` whose edges lie on `offset + k * width`.
    pub fn of_positions(values: &[f64], width: f64, offset: f64) -> Result<Self> {
        if !(width > 0.0) || values.is_empty() || values.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidInput("histogram needs finite values and a positive width".into()));
        }
        let lo = values.iter().copied().fold(f64::INFINITY, f64::min);
        let first = ((lo - offset) / width).floor();
        let start = offset + first * width;
        let bin = |v: f64| ((v - start) / width).floor() as usize;
        let len = values.iter().map(|v| bin(*v) + 1).max().unwrap_or(0);
        let mut counts = vec![0; len];
        for v in values {
            counts[bin(*v)] += 1;
        }
        Ok(Self {
            origin: start + 0.5 * width,
            width,
            counts,
        })
    }

    pub fn center(&self, k: usize) -> f64 {
        self.origin + k as f64 * self.width
    }

    /// Edges of bin `k`, clipped at 0 when the histogram is of distances.
    pub fn edges(&self, k: usize) -> (f64, f64) {
        let c = self.center(k);
        let lo = c - 0.5 * self.width;
        if self.origin == 0.0 {
            (lo.max(0.0), c + 0.5 * self.width)
        } else {
            (lo, c + 0.5 * self.width)
        }
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }
}

/// A Gaussian component `amplitude * N(center, sigma)` integrated over bins.
/// `amplitude` is the expected number of samples in the component.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Component {
    pub amplitude: f64,
    pub center: f64,
    pub sigma: f64,
}

impl Component {
    /// Expected count in `[lo, hi)`; folded about 0 when `fold`.
    pub fn mass(&self, lo: f64, hi: f64, fold: bool) -> f64 {
        let one = |c: f64| phi((hi - c) / self.sigma) - phi((lo - c) / self.sigma);
        let m = if fold { one(self.center) + one(-self.center) } else { one(self.center) };
        self.amplitude * m
    }
}

/// Weighted refits after the first unweighted one.
const REWEIGHT_ROUNDS: usize = 3;

#[derive(Debug, Clone, Copy)]
pub struct ComponentBounds {
    pub center: (f64, f64),
    pub sigma: (f64, f64),
}

/// Weighted least-squares fit of a Gaussian mixture to histogram counts.
struct MixtureProblem<'a> {
    hist: &'a Histogram,
    bounds: &'a [ComponentBounds],
    fold: bool,
    weights: Vec<f64>,
}

impl MixtureProblem<'_> {
    fn component(p: &[f64], k: usize) -> Component {
        Component {
            amplitude: p[3 * k],
            center: p[3 * k + 1],
            sigma: p[3 * k + 2],
        }
    }
}

impl LeastSquares for MixtureProblem<'_> {
    fn num_params(&self) -> usize {
        3 * self.bounds.len()
    }
    fn num_residuals(&self) -> usize {
        self.hist.counts.len()
    }
    fn residuals(&self, p: &[f64], out: &mut [f64]) {
        for (i, o) in out.iter_mut().enumerate() {
            let (lo, hi) = self.hist.edges(i);
            let model: f64 = (0..self.bounds.len())
                .map(|k| Self::component(p, k).mass(lo, hi, self.fold))
                .sum();
            *o = self.weights[i] * (self.hist.counts[i] as f64 - model);
        }
    }
    fn jacobian(&self, p: &[f64], jac: &mut DMatrix<f64>) {
        let signs: &[f64] = if self.fold { &[1.0, -1.0] } else { &[1.0] };
        for i in 0..self.hist.counts.len() {
            let (lo, hi) = self.hist.edges(i);
            for k in 0..self.bounds.len() {
                let c = Self::component(p, k);
                let (mut dm, mut dc, mut ds) = (0.0, 0.0, 0.0);
                for s in signs {
                    let (uh, ul) = ((hi - s * c.center) / c.sigma, (lo - s * c.center) / c.sigma);
                    dm += phi(uh) - phi(ul);
                    dc += s * (density(ul) - density(uh)) / c.sigma;
                    ds += (density(ul) * ul - density(uh) * uh) / c.sigma;
                }
                let w = self.weights[i];
                jac[(i, 3 * k)] = -w * dm;
                jac[(i, 3 * k + 1)] = -w * c.amplitude * dc;
                jac[(i, 3 * k + 2)] = -w * c.amplitude * ds;
            }
        }
    }
    fn project(&self, p: &mut [f64]) {
        for (k, b) in self.bounds.iter().enumerate() {
            p[3 * k] = p[3 * k].max(0.0);
            p[3 * k + 1] = p[3 * k + 1].clamp(b.center.0, b.center.1);
            p[3 * k + 2] = p[3 * k + 2].clamp(b.sigma.0, b.sigma.1);
        }
    }
}

/// Fits `initial` components to `hist` within `bounds`. Returns the fitted
/// components and whether the solver converged.
pub fn fit_mixture(
    hist: &Histogram,
    initial: &[Component],
    bounds: &[ComponentBounds],
    fold: bool,
) -> Result<(Vec<Component>, bool)> {
    if initial.len() != bounds.len() {
        return Err(Error::InvalidInput("one bound per component is required".into()));
    }
    if initial.is_empty() {
        return Ok((Vec::new(), true));
    }
    if hist.counts.len() < 3 * initial.len() {
        // fewer bins than parameters: pad with empty bins beyond the data
        let mut padded = hist.clone();
        padded.counts.resize(3 * initial.len(), 0);
        return fit_mixture(&padded, initial, bounds, fold);
    }
    let mut problem = MixtureProblem {
        hist,
        bounds,
        fold,
        weights: vec![1.0; hist.counts.len()],
    };
    let mut params: Vec<f64> = initial
        .iter()
        .flat_map(|c| [c.amplitude, c.center, c.sigma])
        .collect();
    let settings = LmSettings {
        max_iterations: 500,
        ..LmSettings::default()
    };
    // unweighted start, then Poisson weights from the previous model
    let mut converged = false;
    for _ in 0..=REWEIGHT_ROUNDS {
        let out = lm::minimize(&problem, &params, &settings);
        if out.params.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonConvergence("histogram fit produced non-finite parameters".into()));
        }
        params = out.params;
        converged = out.converged;
        let comps: Vec<Component> = (0..initial.len()).map(|k| MixtureProblem::component(&params, k)).collect();
        problem.weights = model_counts(hist, &comps, fold)
            .iter()
            .map(|m| 1.0 / m.max(1.0).sqrt())
            .collect();
    }
    let out_params = params;
    let comps = (0..initial.len())
        .map(|k| MixtureProblem::component(&out_params, k))
        .collect();
    Ok((comps, converged))
}

/// Sum of all components over bin `k`.
pub fn model_counts(hist: &Histogram, comps: &[Component], fold: bool) -> Vec<f64> {
    (0..hist.counts.len())
        .map(|i| {
            let (lo, hi) = hist.edges(i);
            comps.iter().map(|c| c.mass(lo, hi, fold)).sum()
        })
        .collect()
}
