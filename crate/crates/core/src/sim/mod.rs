//! Synthetic fluorescence frames with exact ground truth.
//!
//! Atoms are loaded onto lattice sites from a discretized Gaussian, optionally
//! losing same-site pairs, then rendered as elliptical Gaussian spots on a
//! constant background with Poisson shot noise and Gaussian readout noise.

use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Poisson};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::pipeline::io::write_frame_pgm;
use crate::pipeline::{Frame, FrameMeta, SENSOR_MAX};

/// Lattice laser wavelength of the reference setup, nm.
pub const LATTICE_WAVELENGTH_NM: f64 = 865.9;
/// Lattice constant, half the wavelength.
pub const SITE_NM: f64 = LATTICE_WAVELENGTH_NM / 2.0;
/// Measured horizontal spot width (1/sqrt(e) half width) in the object plane.
pub const SPOT_SIGMA_NM: f64 = 810.0;
/// Stated uncertainty of [`SPOT_SIGMA_NM`].
pub const SPOT_SIGMA_UNCERTAINTY_NM: f64 = 19.0;
/// Width of the single-atom loading distribution, in lattice sites.
pub const LOADING_SIGMA_SITES: f64 = 9.5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SimConfig {
    pub pixel_scale_nm: f64,
    pub sigma_sp_hor_nm: f64,
    pub sigma_ver_nm: f64,
    pub site_nm: f64,
    /// Integrated counts of one atom over one exposure.
    pub i_a: f64,
    /// Background counts per pixel.
    pub baseline: f64,
    pub shot_noise: bool,
    pub readout_sigma: f64,
    /// Center of the loading distribution; the frame center when absent.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub loading_center_nm: Option<f64>,
    pub loading_sigma_nm: f64,
    /// Mean of the Poisson atom number, ignored when `fixed_atoms` is set.
    pub mean_atoms: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub fixed_atoms: Option<usize>,
    pub on_site_loss: bool,
    pub mid_exposure_loss_prob: f64,
    pub thermal_jitter_nm: f64,
    pub drift_nm_per_s: f64,
    pub exposure_s: f64,
    pub frames_per_sequence: usize,
    pub sequences: usize,
    pub width: usize,
    pub height: usize,
}

impl Default for SimConfig {
    fn default() -> Self {
        Self {
            pixel_scale_nm: crate::pipeline::DEFAULT_PIXEL_SCALE_NM,
            sigma_sp_hor_nm: SPOT_SIGMA_NM,
            sigma_ver_nm: 1000.0,
            site_nm: SITE_NM,
            i_a: 2000.0,
            baseline: 150.0,
            shot_noise: true,
            readout_sigma: 2.0,
            loading_center_nm: None,
            loading_sigma_nm: LOADING_SIGMA_SITES * SITE_NM,
            mean_atoms: 4.0,
            fixed_atoms: None,
            on_site_loss: true,
            mid_exposure_loss_prob: 0.0,
            thermal_jitter_nm: 23.0,
            drift_nm_per_s: 12.0,
            exposure_s: 1.0,
            frames_per_sequence: 3,
            sequences: 100,
            width: 256,
            height: 16,
        }
    }
}

impl SimConfig {
    /// No noise, jitter, drift or losses: renders are exact closed forms.
    pub fn noiseless() -> Self {
        Self {
            shot_noise: false,
            readout_sigma: 0.0,
            thermal_jitter_nm: 0.0,
            drift_nm_per_s: 0.0,
            on_site_loss: false,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("pixel_scale_nm", self.pixel_scale_nm),
            ("sigma_sp_hor_nm", self.sigma_sp_hor_nm),
            ("sigma_ver_nm", self.sigma_ver_nm),
            ("site_nm", self.site_nm),
            ("i_a", self.i_a),
            ("loading_sigma_nm", self.loading_sigma_nm),
            ("exposure_s", self.exposure_s),
        ];
        for (name, v) in positive {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::InvalidInput(format!("{name} must be positive, got {v}")));
            }
        }
        let non_negative = [
            ("baseline", self.baseline),
            ("readout_sigma", self.readout_sigma),
            ("mean_atoms", self.mean_atoms),
            ("thermal_jitter_nm", self.thermal_jitter_nm),
            ("drift_nm_per_s", self.drift_nm_per_s),
        ];
        for (name, v) in non_negative {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::InvalidInput(format!("{name} must be non-negative, got {v}")));
            }
        }
        if !(0.0..=1.0).contains(&self.mid_exposure_loss_prob) {
            return Err(Error::InvalidInput(format!(
                "mid_exposure_loss_prob must lie in [0, 1], got {}",
                self.mid_exposure_loss_prob
            )));
        }
        if self.width == 0 || self.height == 0 || self.frames_per_sequence == 0 {
            return Err(Error::InvalidInput(
                "width, height and frames_per_sequence must be positive".into(),
            ));
        }
        Ok(())
    }

    pub fn sigma_sp_px(&self) -> f64 {
        self.sigma_sp_hor_nm / self.pixel_scale_nm
    }

    pub fn loading_center(&self) -> f64 {
        self.loading_center_nm
            .unwrap_or(0.5 * (self.width as f64 - 1.0) * self.pixel_scale_nm)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let cfg: Self = toml::from_str(&text).map_err(|e| Error::format(path, e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("SimConfig serializes")
    }
}

/// One atom of the ground truth.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TruthAtom {
    pub site: i64,
    pub position_nm: f64,
    /// Fraction of the exposure the atom stayed trapped.
    pub survival: f64,
}

/// Atoms present in one exposure.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrameTruth {
    pub frame_id: String,
    pub atoms: Vec<TruthAtom>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SequenceTruth {
    pub sequence_id: String,
    pub lattice_offset_nm: f64,
    /// Atoms loaded before any on-site loss.
    pub loaded: usize,
    pub frames: Vec<FrameTruth>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub seed: u64,
    pub config: SimConfig,
    pub sequences: Vec<SequenceTruth>,
}

/// Result of [`sample_loading`].
#[derive(Debug, Clone, PartialEq)]
pub struct Loading {
    pub lattice_offset_nm: f64,
    pub loaded: usize,
    pub atoms: Vec<TruthAtom>,
}

/// Removes every atom that shares its site with another.
pub fn apply_on_site_loss(atoms: &mut Vec<TruthAtom>) {
    let sites: Vec<i64> = atoms.iter().map(|a| a.site).collect();
    atoms.retain(|a| sites.iter().filter(|s| **s == a.site).count() == 1);
}

/// Draws mid-exposure losses: each atom leaves with probability `prob`, keeping
/// a uniform fraction of its fluorescence.
pub fn draw_losses(atoms: &mut [TruthAtom], prob: f64, rng: &mut impl Rng) {
    for atom in atoms.iter_mut() {
        if prob > 0.0 && rng.random::<f64>() < prob {
            atom.survival = rng.random::<f64>();
        }
    }
}

/// Loads atoms onto lattice sites with independent Gaussian positions.
pub fn sample_loading(config: &SimConfig, rng: &mut impl Rng) -> Loading {
    let count = match config.fixed_atoms {
        Some(n) => n,
        None if config.mean_atoms > 0.0 => {
            Poisson::new(config.mean_atoms).expect("positive mean").sample(rng) as usize
        }
        None => 0,
    };
    let offset = rng.random::<f64>() * config.site_nm;
    let spread = Normal::new(config.loading_center(), config.loading_sigma_nm).expect("valid sigma");
    let mut atoms: Vec<TruthAtom> = (0..count)
        .map(|_| {
            let x: f64 = spread.sample(rng);
            let site = ((x - offset) / config.site_nm).round() as i64;
            TruthAtom {
                site,
                position_nm: site as f64 * config.site_nm + offset,
                survival: 1.0,
            }
        })
        .collect();
    if config.on_site_loss {
        apply_on_site_loss(&mut atoms);
    }
    draw_losses(&mut atoms, config.mid_exposure_loss_prob, rng);
    atoms.sort_by(|a, b| a.position_nm.total_cmp(&b.position_nm));
    Loading {
        lattice_offset_nm: offset,
        loaded: count,
        atoms,
    }
}

/// Noise-free expected counts, row-major.
pub fn expected_counts(atoms: &[TruthAtom], config: &SimConfig, shifts_nm: &[f64]) -> Vec<f64> {
    let (w, h) = (config.width, config.height);
    let sigma_x = config.sigma_sp_px();
    let sigma_y = config.sigma_ver_nm / config.pixel_scale_nm;
    let y0 = 0.5 * (h as f64 - 1.0);
    let vertical: Vec<f64> = (0..h)
        .map(|j| (-0.5 * ((j as f64 - y0) / sigma_y).powi(2)).exp())
        .collect();
    let vsum: f64 = vertical.iter().sum();
    let norm_x = 1.0 / (sigma_x * (2.0 * std::f64::consts::PI).sqrt());

    let mut horizontal = vec![0.0; w];
    for (atom, shift) in atoms.iter().zip(shifts_nm) {
        let center = (atom.position_nm + shift) / config.pixel_scale_nm;
        if center < 0.0 || center > (w - 1) as f64 {
            log::warn!("atom at {center:.2} px lies outside the {w}-px frame");
        }
        let amp = atom.survival * config.i_a * norm_x;
        for (i, hx) in horizontal.iter_mut().enumerate() {
            let u = (i as f64 - center) / sigma_x;
            *hx += amp * (-0.5 * u * u).exp();
        }
    }
    let mut out = Vec::with_capacity(w * h);
    for v in &vertical {
        let weight = v / vsum;
        out.extend(horizontal.iter().map(|hx| config.baseline + hx * weight));
    }
    out
}

/// Renders one exposure of `atoms`. `frame_index` counts exposures within the
/// sequence and sets the accumulated lattice drift.
pub fn render_frame(
    atoms: &[TruthAtom],
    config: &SimConfig,
    frame_index: usize,
    meta: FrameMeta,
    rng: &mut impl Rng,
) -> Result<Frame> {
    let drift = config.drift_nm_per_s * config.exposure_s * (frame_index as f64 + 0.5);
    let jitter = (config.thermal_jitter_nm > 0.0)
        .then(|| Normal::new(0.0, config.thermal_jitter_nm).expect("valid sigma"));
    let shifts: Vec<f64> = atoms
        .iter()
        .map(|_| drift + jitter.as_ref().map_or(0.0, |j| j.sample(rng)))
        .collect();
    let mut values = expected_counts(atoms, config, &shifts);
    let readout = (config.readout_sigma > 0.0)
        .then(|| Normal::new(0.0, config.readout_sigma).expect("valid sigma"));
    for v in values.iter_mut() {
        if config.shot_noise && *v > 0.0 {
            *v = Poisson::new(*v).expect("positive mean").sample(rng);
        }
        if let Some(r) = &readout {
            *v += r.sample(rng);
        }
        *v = v.clamp(0.0, SENSOR_MAX);
    }
    Frame::new(
        config.width,
        config.height,
        values,
        FrameMeta {
            pixel_scale_nm: config.pixel_scale_nm,
            exposure_s: config.exposure_s,
            ..meta
        },
    )
}

/// Frames plus their ground truth.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub frames: Vec<Frame>,
    pub manifest: Manifest,
}

/// Independent random stream for one sequence of a campaign.
pub fn sequence_rng(seed: u64, sequence: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(sequence as u64);
    rng
}

pub fn sequence_id(index: usize) -> String {
    format!("seq{index:06}")
}

fn simulate_sequence(config: &SimConfig, seed: u64, index: usize) -> Result<(Vec<Frame>, SequenceTruth)> {
    let mut rng = sequence_rng(seed, index);
    let sequence_id = sequence_id(index);
    let mut loading = sample_loading(config, &mut rng);
    let mut frames = Vec::with_capacity(config.frames_per_sequence);
    let mut truths = Vec::with_capacity(config.frames_per_sequence);
    for k in 0..config.frames_per_sequence {
        if k > 0 {
            // atoms that left during the previous exposure are gone
            loading.atoms.retain(|a| a.survival >= 1.0);
            draw_losses(&mut loading.atoms, config.mid_exposure_loss_prob, &mut rng);
        }
        let frame_id = format!("{sequence_id}_f{k}");
        let meta = FrameMeta {
            frame_id: frame_id.clone(),
            sequence_id: sequence_id.clone(),
            ..FrameMeta::default()
        };
        frames.push(render_frame(&loading.atoms, config, k, meta, &mut rng)?);
        truths.push(FrameTruth {
            frame_id,
            atoms: loading.atoms.clone(),
        });
    }
    Ok((
        frames,
        SequenceTruth {
            sequence_id,
            lattice_offset_nm: loading.lattice_offset_nm,
            loaded: loading.loaded,
            frames: truths,
        },
    ))
}

/// Simulates `config.sequences` sequences of `config.frames_per_sequence`
/// exposures each. Deterministic in `seed`, whatever the thread count.
pub fn run_campaign(config: &SimConfig, seed: u64) -> Result<Dataset> {
    config.validate()?;
    let per_sequence: Vec<(Vec<Frame>, SequenceTruth)> = (0..config.sequences)
        .into_par_iter()
        .map(|i| simulate_sequence(config, seed, i))
        .collect::<Result<_>>()?;
    let mut frames = Vec::new();
    let mut sequences = Vec::new();
    for (f, t) in per_sequence {
        frames.extend(f);
        sequences.push(t);
    }
    Ok(Dataset {
        frames,
        manifest: Manifest {
            seed,
            config: config.clone(),
            sequences,
        },
    })
}

pub const MANIFEST_FILE: &str = "manifest.json";
pub const CONFIG_FILE: &str = "config.toml";

/// Writes frames as `<frame_id>.pgm` with sidecars, plus `manifest.json` and `config.toml`.
pub fn write_dataset(dataset: &Dataset, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    dataset
        .frames
        .par_iter()
        .try_for_each(|f| write_frame_pgm(f, &dir.join(format!("{}.pgm", f.meta.frame_id))))?;
    let manifest_path = dir.join(MANIFEST_FILE);
    let json = serde_json::to_string_pretty(&dataset.manifest)
        .map_err(|e| Error::format(&manifest_path, e.to_string()))?;
    fs::write(&manifest_path, json).map_err(|e| Error::io(&manifest_path, e))?;
    let config_path = dir.join(CONFIG_FILE);
    fs::write(&config_path, dataset.manifest.config.to_toml()).map_err(|e| Error::io(&config_path, e))
}

pub fn read_manifest(path: &Path) -> Result<Manifest> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::format(path, e.to_string()))
}
