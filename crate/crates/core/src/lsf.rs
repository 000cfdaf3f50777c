//! Line spread function: model, calibration from isolated spots, and
//! persistence.

use std::f64::consts::PI;
use std::fs;
use std::path::Path;

use nalgebra::DMatrix;
use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lm::{self, LeastSquares, LmSettings};
use crate::pipeline::{Frame, NoiseEstimate, Profile, SegmentParams};

const SQRT_2PI: f64 = 2.506_628_274_631_000_5;

/// Area-normalized line spread function centered on zero.
#[derive(Debug, Clone, PartialEq)]
pub enum LsfModel {
    Gaussian { sigma_px: f64 },
    /// Values on a symmetric grid `x_t = (t - (len - 1) / 2) * spacing`,
    /// linearly interpolated, zero outside.
    Empirical { spacing: f64, values: Vec<f64> },
}

impl LsfModel {
    pub fn gaussian(sigma_px: f64) -> Result<Self> {
        if !(sigma_px > 0.0 && sigma_px.is_finite()) {
            return Err(Error::InvalidInput(format!("LSF sigma must be positive, got {sigma_px}")));
        }
        Ok(LsfModel::Gaussian { sigma_px })
    }

    /// Builds an empirical model from a table, symmetrizing it, forcing zero
    /// end points and normalizing to unit area.
    pub fn empirical(spacing: f64, values: Vec<f64>) -> Result<Self> {
        if !(spacing > 0.0) || values.len() < 3 {
            return Err(Error::InvalidInput(
                "empirical LSF needs a positive spacing and at least 3 values".into(),
            ));
        }
        let mut v = values;
        if v.len() % 2 == 0 {
            v.push(0.0);
        }
        let n = v.len();
        let sym: Vec<f64> = (0..n).map(|t| (0.5 * (v[t] + v[n - 1 - t])).max(0.0)).collect();
        let mut sym = sym;
        sym[0] = 0.0;
        sym[n - 1] = 0.0;
        let area: f64 = sym.iter().sum::<f64>() * spacing;
        if !(area > 0.0) {
            return Err(Error::Degenerate("empirical LSF table has no positive area".into()));
        }
        Ok(LsfModel::Empirical {
            spacing,
            values: sym.into_iter().map(|x| x / area).collect(),
        })
    }

    pub fn eval(&self, x: f64) -> f64 {
        match self {
            LsfModel::Gaussian { sigma_px } => {
                let u = x / sigma_px;
                (-0.5 * u * u).exp() / (SQRT_2PI * sigma_px)
            }
            LsfModel::Empirical { spacing, values } => {
                let (t, frac) = Self::table_position(*spacing, values.len(), x);
                match t {
                    Some(t) => values[t] * (1.0 - frac) + values[t + 1] * frac,
                    None => 0.0,
                }
            }
        }
    }

    /// dL/dx.
    pub fn derivative(&self, x: f64) -> f64 {
        match self {
            LsfModel::Gaussian { sigma_px } => -x / (sigma_px * sigma_px) * self.eval(x),
            LsfModel::Empirical { spacing, values } => {
                match Self::table_position(*spacing, values.len(), x).0 {
                    Some(t) => (values[t + 1] - values[t]) / spacing,
                    None => 0.0,
                }
            }
        }
    }

    fn table_position(spacing: f64, len: usize, x: f64) -> (Option<usize>, f64) {
        let pos = x / spacing + (len - 1) as f64 / 2.0;
        if pos < 0.0 || pos >= (len - 1) as f64 {
            return (None, 0.0);
        }
        let t = pos.floor() as usize;
        (Some(t), pos - t as f64)
    }

    /// Standard deviation of the LSF viewed as a distribution.
    pub fn sigma_px(&self) -> f64 {
        match self {
            LsfModel::Gaussian { sigma_px } => *sigma_px,
            LsfModel::Empirical { spacing, values } => {
                let c = (values.len() - 1) as f64 / 2.0;
                let var: f64 = values
                    .iter()
                    .enumerate()
                    .map(|(t, v)| v * ((t as f64 - c) * spacing).powi(2))
                    .sum::<f64>()
                    * spacing;
                var.sqrt()
            }
        }
    }

    /// Fourier transform at `nu` cycles per pixel; exactly 1 at `nu = 0`.
    pub fn fourier(&self, nu: f64) -> Complex64 {
        match self {
            LsfModel::Gaussian { sigma_px } => {
                Complex64::new((-2.0 * PI * PI * sigma_px * sigma_px * nu * nu).exp(), 0.0)
            }
            LsfModel::Empirical { spacing, values } => {
                let c = (values.len() - 1) as f64 / 2.0;
                let mut acc = Complex64::new(0.0, 0.0);
                let mut norm = 0.0;
                for (t, v) in values.iter().enumerate() {
                    let x = (t as f64 - c) * spacing;
                    acc += Complex64::from_polar(*v, -2.0 * PI * nu * x);
                    norm += v;
                }
                acc / norm
            }
        }
    }
}

/// Free-function form of [`LsfModel::fourier`].
pub fn lsf_fourier(model: &LsfModel, nu: f64) -> Complex64 {
    model.fourier(nu)
}

/// One background-subtracted profile cut around an isolated atom.
#[derive(Debug, Clone)]
pub struct IsolatedSpot {
    pub profile: Profile,
    pub noise: NoiseEstimate,
}

/// A sample of the superimposed spot cloud: offset from the spot center (px),
/// amplitude-normalized excess intensity and its least-squares weight.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StackedSample {
    pub offset: f64,
    pub value: f64,
    pub weight: f64,
}

/// Per-spot alignment found while stacking.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SpotAlignment {
    pub center: f64,
    pub amplitude: f64,
}

#[derive(Debug, Clone)]
pub struct Stack {
    pub samples: Vec<StackedSample>,
    pub alignments: Vec<SpotAlignment>,
    pub iterations: usize,
}

const CENTER_TOLERANCE_PX: f64 = 1e-3;
const MAX_ALIGN_ITERATIONS: usize = 100;

/// `amplitude * L(x - center)` against a fixed baseline.
struct SpotFit<'a> {
    xs: Vec<f64>,
    excess: Vec<f64>,
    lsf: &'a LsfModel,
}

impl LeastSquares for SpotFit<'_> {
    fn num_params(&self) -> usize {
        2
    }
    fn num_residuals(&self) -> usize {
        self.xs.len()
    }
    fn residuals(&self, p: &[f64], out: &mut [f64]) {
        for ((o, x), y) in out.iter_mut().zip(&self.xs).zip(&self.excess) {
            *o = y - p[0] * self.lsf.eval(x - p[1]);
        }
    }
    fn jacobian(&self, p: &[f64], jac: &mut DMatrix<f64>) {
        for (i, x) in self.xs.iter().enumerate() {
            jac[(i, 0)] = -self.lsf.eval(x - p[1]);
            jac[(i, 1)] = p[0] * self.lsf.derivative(x - p[1]);
        }
    }
    fn step_converged(&self, p: &[f64], step: &[f64]) -> bool {
        step[1].abs() < 1e-9 && step[0].abs() <= 1e-12 * p[0].abs().max(1.0)
    }
}

fn collect_samples(spots: &[IsolatedSpot], align: &[SpotAlignment]) -> Vec<StackedSample> {
    let mut out = Vec::new();
    for (spot, a) in spots.iter().zip(align) {
        let weight = if spot.noise.sigma > 0.0 {
            (a.amplitude / spot.noise.sigma).powi(2)
        } else {
            1.0
        };
        for (x, v) in spot.profile.samples() {
            out.push(StackedSample {
                offset: x - a.center,
                value: (v - spot.noise.baseline) / a.amplitude,
                weight,
            });
        }
    }
    out
}

/// Superimposes isolated single-atom profiles with sub-pixel alignment.
///
/// Each spot starts at its intensity centroid; the stacked cloud is then fit
/// with a Gaussian and every spot re-fit against it, until no center moves by
/// more than 1e-3 px.
pub fn stack_isolated(spots: &[IsolatedSpot]) -> Result<Stack> {
    if spots.is_empty() {
        return Err(Error::InvalidInput("no isolated spots to stack".into()));
    }
    let mut align = Vec::with_capacity(spots.len());
    for (k, spot) in spots.iter().enumerate() {
        let base = spot.noise.baseline;
        let total: f64 = spot.profile.intensities().iter().map(|v| v - base).sum();
        if !(total > 0.0) {
            return Err(Error::Degenerate(format!(
                "spot {k} has no integrated signal above baseline"
            )));
        }
        let centroid = spot.profile.samples().map(|(x, v)| x * (v - base)).sum::<f64>() / total;
        align.push(SpotAlignment {
            center: centroid,
            amplitude: total,
        });
    }

    let mut iterations = 0;
    loop {
        iterations += 1;
        let samples = collect_samples(spots, &align);
        let model = fit_lsf(&samples, LsfForm::Gaussian)?.model;
        let mut max_shift: f64 = 0.0;
        for (spot, a) in spots.iter().zip(align.iter_mut()) {
            let problem = SpotFit {
                xs: spot.profile.samples().map(|(x, _)| x).collect(),
                excess: spot
                    .profile
                    .intensities()
                    .iter()
                    .map(|v| v - spot.noise.baseline)
                    .collect(),
                lsf: &model,
            };
            let fit = lm::minimize(&problem, &[a.amplitude, a.center], &LmSettings::default());
            let (amp, center) = (fit.params[0], fit.params[1]);
            if amp > 0.0 && center.is_finite() {
                max_shift = max_shift.max((center - a.center).abs());
                *a = SpotAlignment {
                    center,
                    amplitude: amp,
                };
            }
        }
        if max_shift < CENTER_TOLERANCE_PX || iterations >= MAX_ALIGN_ITERATIONS {
            break;
        }
    }
    Ok(Stack {
        samples: collect_samples(spots, &align),
        alignments: align,
        iterations,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "form", rename_all = "lowercase")]
pub enum LsfForm {
    Gaussian,
    Empirical { spacing: f64 },
}

#[derive(Debug, Clone, PartialEq)]
pub struct LsfFit {
    pub model: LsfModel,
    /// Offset of the fitted peak from the stacked origin.
    pub center: f64,
    pub residual_rms: f64,
    pub sample_count: usize,
}

struct GaussianCurve<'a> {
    samples: &'a [StackedSample],
}

impl LeastSquares for GaussianCurve<'_> {
    fn num_params(&self) -> usize {
        3
    }
    fn num_residuals(&self) -> usize {
        self.samples.len()
    }
    fn residuals(&self, p: &[f64], out: &mut [f64]) {
        for (o, s) in out.iter_mut().zip(self.samples) {
            let u = (s.offset - p[1]) / p[2];
            *o = s.weight.sqrt() * (s.value - p[0] * (-0.5 * u * u).exp());
        }
    }
    fn jacobian(&self, p: &[f64], jac: &mut DMatrix<f64>) {
        for (i, s) in self.samples.iter().enumerate() {
            let w = s.weight.sqrt();
            let d = s.offset - p[1];
            let e = (-0.5 * d * d / (p[2] * p[2])).exp();
            jac[(i, 0)] = -w * e;
            jac[(i, 1)] = -w * p[0] * e * d / (p[2] * p[2]);
            jac[(i, 2)] = -w * p[0] * e * d * d / p[2].powi(3);
        }
    }
    fn project(&self, p: &mut [f64]) {
        p[2] = p[2].max(1e-6);
    }
}

fn weighted_rms(samples: &[StackedSample], model: impl Fn(f64) -> f64) -> f64 {
    let (num, den) = samples.iter().fold((0.0, 0.0), |(n, d), s| {
        (n + s.weight * (s.value - model(s.offset)).powi(2), d + s.weight)
    });
    (num / den).sqrt()
}

/// Weighted least-squares fit of the LSF shape to stacked samples. The result
/// is normalized to unit area.
pub fn fit_lsf(samples: &[StackedSample], form: LsfForm) -> Result<LsfFit> {
    if samples.len() < 10 {
        return Err(Error::Degenerate(format!(
            "{} stacked samples, need at least 10",
            samples.len()
        )));
    }
    let (mut mass, mut first) = (0.0, 0.0);
    for s in samples {
        let v = s.value.max(0.0) * s.weight;
        mass += v;
        first += v * s.offset;
    }
    if !(mass > 0.0) {
        return Err(Error::Degenerate("stacked samples carry no positive signal".into()));
    }
    let mean = first / mass;
    let var = samples
        .iter()
        .map(|s| s.value.max(0.0) * s.weight * (s.offset - mean).powi(2))
        .sum::<f64>()
        / mass;
    let spread = samples.iter().map(|s| s.offset).fold(f64::NEG_INFINITY, f64::max)
        - samples.iter().map(|s| s.offset).fold(f64::INFINITY, f64::min);

    match form {
        LsfForm::Gaussian => {
            let sigma0 = var.sqrt();
            if !(sigma0 > 0.0) || spread < 4.0 * sigma0 {
                return Err(Error::Degenerate(format!(
                    "sample offsets span {spread:.3} px, need at least 4 sigma ({:.3} px)",
                    4.0 * sigma0
                )));
            }
            let peak0 = 1.0 / (SQRT_2PI * sigma0);
            let problem = GaussianCurve { samples };
            let settings = LmSettings {
                max_iterations: 200,
                ..Default::default()
            };
            let out = lm::minimize(&problem, &[peak0, mean, sigma0], &settings);
            if !out.converged {
                return Err(Error::NonConvergence(format!(
                    "LSF fit stopped after {} iterations",
                    out.iterations
                )));
            }
            let (amp, center, sigma) = (out.params[0], out.params[1], out.params[2]);
            let model = LsfModel::gaussian(sigma)?;
            let residual_rms = weighted_rms(samples, |x| {
                let u = (x - center) / sigma;
                amp * (-0.5 * u * u).exp()
            });
            Ok(LsfFit {
                model,
                center,
                residual_rms,
                sample_count: samples.len(),
            })
        }
        LsfForm::Empirical { spacing } => {
            if !(spacing > 0.0) {
                return Err(Error::InvalidInput("empirical spacing must be positive".into()));
            }
            let reach = samples
                .iter()
                .map(|s| (s.offset - mean).abs())
                .fold(0.0, f64::max);
            let half = (reach / spacing).ceil() as usize + 1;
            let len = 2 * half + 1;
            let mut sum = vec![0.0; len];
            let mut wsum = vec![0.0; len];
            for s in samples {
                let t = ((s.offset - mean) / spacing).round() as i64 + half as i64;
                let t = t.clamp(0, len as i64 - 1) as usize;
                sum[t] += s.weight * s.value;
                wsum[t] += s.weight;
            }
            let filled: Vec<Option<f64>> = sum
                .iter()
                .zip(&wsum)
                .map(|(s, w)| (*w > 0.0).then(|| s / w))
                .collect();
            let table = fill_gaps(&filled);
            let model = LsfModel::empirical(spacing, table)?;
            let residual_rms = weighted_rms(samples, |x| model.eval(x - mean));
            Ok(LsfFit {
                model,
                center: mean,
                residual_rms,
                sample_count: samples.len(),
            })
        }
    }
}

/// Linear interpolation across empty bins; empty bins at the ends become zero.
fn fill_gaps(bins: &[Option<f64>]) -> Vec<f64> {
    let known: Vec<(usize, f64)> = bins
        .iter()
        .enumerate()
        .filter_map(|(i, v)| v.map(|v| (i, v)))
        .collect();
    (0..bins.len())
        .map(|i| {
            if let Some(v) = bins[i] {
                return v;
            }
            let right = known.iter().position(|(k, _)| *k > i);
            match right {
                Some(r) if r > 0 => {
                    let (i0, v0) = known[r - 1];
                    let (i1, v1) = known[r];
                    v0 + (v1 - v0) * (i - i0) as f64 / (i1 - i0) as f64
                }
                _ => 0.0,
            }
        })
        .collect()
}

/// On-disk calibration: the LSF plus the single-atom fluorescence level.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LsfCalibration {
    pub form: String,
    pub sigma_px: f64,
    pub residual_rms: f64,
    pub sample_count: usize,
    pub profile_count: usize,
    /// Mean integrated single-atom signal, counts.
    pub i_a: f64,
    pub pixel_scale_nm: f64,
    /// Stated uncertainty of the spot width, stored as metadata only.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sigma_uncertainty_nm: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub table_spacing: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub table: Option<Vec<f64>>,
}

impl LsfCalibration {
    pub fn new(fit: &LsfFit, profile_count: usize, i_a: f64, pixel_scale_nm: f64) -> Self {
        let (form, table_spacing, table) = match &fit.model {
            LsfModel::Gaussian { .. } => ("gaussian", None, None),
            LsfModel::Empirical { spacing, values } => {
                ("empirical", Some(*spacing), Some(values.clone()))
            }
        };
        Self {
            form: form.into(),
            sigma_px: fit.model.sigma_px(),
            residual_rms: fit.residual_rms,
            sample_count: fit.sample_count,
            profile_count,
            i_a,
            pixel_scale_nm,
            sigma_uncertainty_nm: None,
            table_spacing,
            table,
        }
    }

    pub fn model(&self) -> Result<LsfModel> {
        match self.form.as_str() {
            "gaussian" => LsfModel::gaussian(self.sigma_px),
            "empirical" => match (self.table_spacing, &self.table) {
                (Some(spacing), Some(table)) => LsfModel::empirical(spacing, table.clone()),
                _ => Err(Error::InvalidInput("empirical calibration lacks its table".into())),
            },
            other => Err(Error::InvalidInput(format!("unknown LSF form {other:?}"))),
        }
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let cal: Self = toml::from_str(&text).map_err(|e| Error::format(path, e.to_string()))?;
        cal.model().map_err(|e| Error::format(path, e.to_string()))?;
        Ok(cal)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = toml::to_string(self).map_err(|e| Error::format(path, e.to_string()))?;
        fs::write(path, text).map_err(|e| Error::io(path, e))
    }
}

/// Calibration from a set of frames plus how many frames it used.
#[derive(Debug, Clone, PartialEq)]
pub struct FrameCalibration {
    pub calibration: LsfCalibration,
    /// Frames that did not segment to exactly one ROI.
    pub skipped: usize,
}

/// Cuts the single ROI out of a frame, or `None` when the frame does not
/// segment to exactly one ROI.
pub fn isolated_spot(frame: &Frame, seg: &SegmentParams) -> Result<Option<IsolatedSpot>> {
    let (profile, noise, rois) = crate::estimator::prepare_profile(frame, seg)?;
    let [roi] = rois.as_slice() else {
        return Ok(None);
    };
    Ok(Some(IsolatedSpot {
        profile: profile.slice(roi.start..roi.end)?,
        noise,
    }))
}

/// Stacks every isolated spot of `frames` and fits the LSF. `I_a` is the mean
/// fitted spot amplitude; the pixel scale comes from the first frame.
pub fn calibrate_from_frames(frames: &[Frame], seg: &SegmentParams, form: LsfForm) -> Result<FrameCalibration> {
    let mut spots = Vec::new();
    for f in frames {
        if let Some(s) = isolated_spot(f, seg)? {
            spots.push(s);
        }
    }
    if spots.is_empty() {
        return Err(Error::Degenerate("no isolated single-atom ROIs found".into()));
    }
    let stack = stack_isolated(&spots)?;
    let fit = fit_lsf(&stack.samples, form)?;
    let i_a = stack.alignments.iter().map(|a| a.amplitude).sum::<f64>() / stack.alignments.len() as f64;
    Ok(FrameCalibration {
        calibration: LsfCalibration::new(&fit, spots.len(), i_a, frames[0].meta.pixel_scale_nm),
        skipped: frames.len() - spots.len(),
    })
}
