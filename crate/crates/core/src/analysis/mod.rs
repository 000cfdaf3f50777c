//! Statistics over fitted atom positions: pair distances, multi-frame
//! averaging, lattice-peak fits and the loading distribution.

mod histogram;

use std::collections::BTreeMap;
use std::f64::consts::{PI, SQRT_2};
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use statrs::function::erf::erf;

use crate::error::{Error, Result};
use crate::estimator::AtomRecord;

pub use histogram::{fit_mixture, model_counts, Component, ComponentBounds, Histogram};

/// Smallest peak width the histogram fits may return, nm.
pub const MIN_PEAK_SIGMA_NM: f64 = 5.0;
/// Peaks with fewer samples than this are not fitted.
pub const MIN_PEAK_SAMPLES: usize = 3;
/// Minimum number of positions for [`fit_loading`].
pub const MIN_LOADING_SAMPLES: usize = 30;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LatticeCalib {
    pub wavelength_nm: f64,
}

impl Default for LatticeCalib {
    fn default() -> Self {
        Self {
            wavelength_nm: crate::sim::LATTICE_WAVELENGTH_NM,
        }
    }
}

impl LatticeCalib {
    pub fn new(wavelength_nm: f64) -> Result<Self> {
        if !(wavelength_nm > 0.0 && wavelength_nm.is_finite()) {
            return Err(Error::InvalidInput(format!("wavelength must be positive, got {wavelength_nm}")));
        }
        Ok(Self { wavelength_nm })
    }

    pub fn site_nm(&self) -> f64 {
        0.5 * self.wavelength_nm
    }
}

/// Identifies the two atoms of a distance sample. `frame_id` is absent for
/// positions averaged over several frames.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PairId {
    pub sequence_id: String,
    pub frame_id: Option<String>,
    pub first: usize,
    pub second: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DistanceSample {
    pub pair: PairId,
    pub distance_nm: f64,
}

fn pairs_of(positions: &[f64], sequence_id: &str, frame_id: Option<&str>, out: &mut Vec<DistanceSample>) {
    let mut sorted = positions.to_vec();
    sorted.sort_by(f64::total_cmp);
    for i in 0..sorted.len() {
        for j in i + 1..sorted.len() {
            out.push(DistanceSample {
                pair: PairId {
                    sequence_id: sequence_id.to_owned(),
                    frame_id: frame_id.map(str::to_owned),
                    first: i,
                    second: j,
                },
                distance_nm: sorted[j] - sorted[i],
            });
        }
    }
}

fn usable(r: &AtomRecord) -> bool {
    r.reliable && !r.diagnostics.count_ambiguous
}

/// Distances between all atom pairs of each frame. ROIs holding an unreliable
/// atom or an ambiguous count are left out entirely.
pub fn pairwise_distances(records: &[AtomRecord]) -> Vec<DistanceSample> {
    let mut out = Vec::new();
    for ((seq, frame), positions) in usable_by_frame(records) {
        pairs_of(&positions, seq, Some(frame), &mut out);
    }
    out
}

/// An atom tracked through the first frames of a sequence.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AveragedAtom {
    pub sequence_id: String,
    pub position_nm: f64,
    pub frames: usize,
    /// Every constituent record was reliable and unambiguous.
    pub reliable: bool,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Averaging {
    pub atoms: Vec<AveragedAtom>,
    /// Detections left without a partner in some frame.
    pub unmatched: usize,
    /// Sequences with fewer than the required frames.
    pub skipped_sequences: usize,
}

fn nearest(target: f64, candidates: &[f64]) -> Option<usize> {
    (0..candidates.len()).min_by(|a, b| (candidates[*a] - target).abs().total_cmp(&(candidates[*b] - target).abs()))
}

/// Averages each atom over the first `frames_required` frames of its sequence
/// (frames ordered by `frame_id`). When every frame holds the same number of
/// detections they are matched by rank. Otherwise an atom of the first frame is
/// followed into each later frame by mutual nearest neighbours closer than half
/// a site; atoms that cannot be followed through every frame are dropped and
/// counted.
pub fn match_and_average(records: &[AtomRecord], frames_required: usize, lattice: &LatticeCalib) -> Result<Averaging> {
    if frames_required == 0 {
        return Err(Error::InvalidInput("frames_required must be at least 1".into()));
    }
    let gate = 0.5 * lattice.site_nm();
    let mut sequences: BTreeMap<&str, BTreeMap<&str, Vec<&AtomRecord>>> = BTreeMap::new();
    for r in records {
        sequences
            .entry(&r.sequence_id)
            .or_default()
            .entry(&r.frame_id)
            .or_default()
            .push(r);
    }
    let mut out = Averaging::default();
    for (seq, frames) in sequences {
        if frames.len() < frames_required {
            out.skipped_sequences += 1;
            continue;
        }
        let frames: Vec<Vec<&AtomRecord>> = frames
            .into_values()
            .take(frames_required)
            .map(|mut f| {
                f.sort_by(|a, b| a.position_nm.total_cmp(&b.position_nm));
                f
            })
            .collect();
        if frames.iter().all(|f| f.len() == frames[0].len()) {
            out.atoms.extend((0..frames[0].len()).map(|k| AveragedAtom {
                sequence_id: seq.to_owned(),
                position_nm: frames.iter().map(|f| f[k].position_nm).sum::<f64>() / frames_required as f64,
                frames: frames_required,
                reliable: frames.iter().all(|f| usable(f[k])),
            }));
            continue;
        }
        // chain: reference position, running sum, reliability
        let mut chains: Vec<Option<(f64, f64, bool)>> = frames[0]
            .iter()
            .map(|r| Some((r.position_nm, r.position_nm, usable(r))))
            .collect();
        for frame in &frames[1..] {
            let here: Vec<f64> = frame.iter().map(|r| r.position_nm).collect();
            let refs: Vec<f64> = chains.iter().map(|c| c.map_or(f64::NAN, |c| c.0)).collect();
            let mut taken = vec![false; here.len()];
            for chain in chains.iter_mut() {
                let Some((reference, sum, ok)) = *chain else { continue };
                let partner = nearest(reference, &here)
                    .filter(|j| (here[*j] - reference).abs() < gate)
                    .filter(|j| nearest(here[*j], &refs).is_some_and(|back| refs[back] == reference));
                match partner {
                    Some(j) => {
                        taken[j] = true;
                        *chain = Some((reference, sum + here[j], ok && usable(frame[j])));
                    }
                    None => {
                        *chain = None;
                        out.unmatched += 1;
                    }
                }
            }
            out.unmatched += taken.iter().filter(|t| !**t).count();
        }
        out.atoms.extend(chains.into_iter().flatten().map(|(_, sum, reliable)| AveragedAtom {
            sequence_id: seq.to_owned(),
            position_nm: sum / frames_required as f64,
            frames: frames_required,
            reliable,
        }));
    }
    Ok(out)
}

/// Distances between reliable averaged atoms of the same sequence.
pub fn averaged_distances(atoms: &[AveragedAtom]) -> Vec<DistanceSample> {
    let mut sequences: BTreeMap<&str, Vec<f64>> = BTreeMap::new();
    for a in atoms.iter().filter(|a| a.reliable) {
        sequences.entry(&a.sequence_id).or_default().push(a.position_nm);
    }
    let mut out = Vec::new();
    for (seq, positions) in sequences {
        pairs_of(&positions, seq, None, &mut out);
    }
    out
}

/// Nearest whole number of lattice sites.
pub fn assign_site_separation(distance_nm: f64, lattice: &LatticeCalib) -> i64 {
    (distance_nm / lattice.site_nm() + 0.5).floor() as i64
}

/// Probability that a position error of width `sigma_nm` stays within a
/// quarter wavelength, i.e. that the site assignment is right.
pub fn reliability_fn(sigma_nm: f64, lattice: &LatticeCalib) -> f64 {
    erf(0.25 * lattice.wavelength_nm / (SQRT_2 * sigma_nm))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PeakFit {
    pub n: u32,
    pub center_nm: f64,
    /// Absent when the peak had too few samples to fit.
    pub sigma_n: Option<f64>,
    /// Number of pairs in the peak.
    pub amplitude: f64,
    pub f_n: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DistanceFit {
    pub histogram: Histogram,
    pub model: Vec<f64>,
    pub peaks: Vec<PeakFit>,
    pub converged: bool,
}

/// Minimum number of distances for [`fit_distance_histogram`].
pub const MIN_DISTANCE_SAMPLES: usize = 10;

/// Fits one Gaussian per site separation `n = 1..=max_n` to the histogram of
/// pair distances, in bins a quarter site wide. Each peak has its own width
/// and amplitude; centers stay at `n` sites unless `free_centers`, in which
/// case they may move by a quarter site. Separation 0 is not modeled since two
/// atoms never share a site after on-site loss.
pub fn fit_distance_histogram(
    distances: &[f64],
    lattice: &LatticeCalib,
    max_n: u32,
    free_centers: bool,
) -> Result<DistanceFit> {
    if distances.len() < MIN_DISTANCE_SAMPLES {
        return Err(Error::InvalidInput(format!(
            "{} distances, at least {MIN_DISTANCE_SAMPLES} are needed",
            distances.len()
        )));
    }
    if max_n == 0 {
        return Err(Error::InvalidInput("max_n must be at least 1".into()));
    }
    let site = lattice.site_nm();
    let limit = (max_n as f64 + 0.5) * site;
    let kept: Vec<f64> = distances.iter().copied().filter(|d| *d < limit).collect();
    let mut histogram = Histogram::of_distances(&kept, 0.25 * site)?;
    histogram.counts.resize(4 * max_n as usize + 2, 0);

    let mut initial = Vec::new();
    let mut bounds = Vec::new();
    let mut fitted = Vec::new();
    for n in 1..=max_n {
        let c = n as f64 * site;
        let members: Vec<f64> = kept.iter().copied().filter(|d| (d - c).abs() < 0.5 * site).collect();
        if members.len() < MIN_PEAK_SAMPLES {
            continue;
        }
        let m = members.iter().sum::<f64>() / members.len() as f64;
        let spread = (members.iter().map(|d| (d - m).powi(2)).sum::<f64>() / members.len() as f64).sqrt();
        let sigma_bounds = (MIN_PEAK_SIGMA_NM, 0.5 * site);
        initial.push(Component {
            amplitude: members.len() as f64,
            center: c,
            sigma: spread.clamp(sigma_bounds.0, sigma_bounds.1),
        });
        let center = if free_centers {
            (c - 0.25 * site, c + 0.25 * site)
        } else {
            (c, c)
        };
        bounds.push(ComponentBounds {
            center,
            sigma: sigma_bounds,
        });
        fitted.push(n);
    }
    if fitted.is_empty() {
        return Err(Error::Degenerate("no peak has enough samples".into()));
    }
    let (comps, converged) = fit_mixture(&histogram, &initial, &bounds, true)?;
    let model = model_counts(&histogram, &comps, true);
    let peaks = (1..=max_n)
        .map(|n| match fitted.iter().position(|f| *f == n) {
            Some(k) => PeakFit {
                n,
                center_nm: comps[k].center,
                sigma_n: Some(comps[k].sigma),
                amplitude: comps[k].amplitude,
                f_n: Some(reliability_fn(comps[k].sigma, lattice)),
            },
            None => PeakFit {
                n,
                center_nm: n as f64 * site,
                sigma_n: None,
                amplitude: 0.0,
                f_n: None,
            },
        })
        .collect();
    Ok(DistanceFit {
        histogram,
        model,
        peaks,
        converged,
    })
}

/// Gaussian loading distribution of single atoms.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LoadingModel {
    pub center_nm: f64,
    pub sigma_p_nm: f64,
    pub samples: usize,
}

/// Fits a Gaussian to the histogram of single-atom positions in site-wide bins.
pub fn fit_loading(positions: &[f64], lattice: &LatticeCalib) -> Result<LoadingModel> {
    if positions.len() < MIN_LOADING_SAMPLES {
        return Err(Error::InvalidInput(format!(
            "{} positions, at least {MIN_LOADING_SAMPLES} are needed",
            positions.len()
        )));
    }
    let n = positions.len() as f64;
    let mean = positions.iter().sum::<f64>() / n;
    let sd = (positions.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n).sqrt();
    let site = lattice.site_nm();
    if !(sd > 0.0) {
        return Err(Error::Degenerate("all positions coincide".into()));
    }
    let hist = Histogram::of_positions(positions, site, mean - 0.5 * site)?;
    let initial = [Component {
        amplitude: n,
        center: mean,
        sigma: sd,
    }];
    let bounds = [ComponentBounds {
        center: (mean - 5.0 * sd - site, mean + 5.0 * sd + site),
        sigma: (0.05 * site, 10.0 * sd + site),
    }];
    let (comps, _) = fit_mixture(&hist, &initial, &bounds, false)?;
    Ok(LoadingModel {
        center_nm: comps[0].center,
        sigma_p_nm: comps[0].sigma,
        samples: positions.len(),
    })
}

/// Expected density of pair distances `d >= 0` for `q0` pairs of atoms loaded
/// independently with width `sigma_p_nm`.
pub fn pair_model_q(distance_nm: f64, q0: f64, sigma_p_nm: f64) -> f64 {
    2.0 * q0 * (-distance_nm * distance_nm / (4.0 * sigma_p_nm * sigma_p_nm)).exp() / (2.0 * PI.sqrt() * sigma_p_nm)
}

#[derive(Debug, Clone, PartialEq)]
pub struct PairFit {
    pub histogram: Histogram,
    pub model: Vec<f64>,
    /// Integral of the fitted distribution, in pairs.
    pub q0: f64,
    pub sigma_nm: f64,
    pub converged: bool,
}

/// Fits a zero-centered Gaussian to the histogram of pair distances.
pub fn fit_pair_distribution(distances: &[f64], bin_width: f64) -> Result<PairFit> {
    if distances.len() < MIN_PEAK_SAMPLES {
        return Err(Error::InvalidInput(format!("{} distances are too few to fit", distances.len())));
    }
    let histogram = Histogram::of_distances(distances, bin_width)?;
    let rms = (distances.iter().map(|d| d * d).sum::<f64>() / distances.len() as f64).sqrt();
    if !(rms > 0.0) {
        return Err(Error::Degenerate("all distances are zero".into()));
    }
    let initial = [Component {
        amplitude: distances.len() as f64,
        center: 0.0,
        sigma: rms,
    }];
    let bounds = [ComponentBounds {
        center: (0.0, 0.0),
        sigma: (0.1 * bin_width, 10.0 * rms + bin_width),
    }];
    let (comps, converged) = fit_mixture(&histogram, &initial, &bounds, true)?;
    let model = model_counts(&histogram, &comps, true);
    Ok(PairFit {
        histogram,
        model,
        q0: comps[0].amplitude,
        sigma_nm: comps[0].sigma,
        converged,
    })
}

/// `bin_center_nm,count,model_value` rows.
pub fn histogram_csv(hist: &Histogram, model: &[f64]) -> String {
    let mut s = String::from("bin_center_nm,count,model_value\n");
    for (k, count) in hist.counts.iter().enumerate() {
        let m = model.get(k).copied().unwrap_or(f64::NAN);
        let _ = writeln!(s, "{},{},{}", hist.center(k), count, m);
    }
    s
}

/// One distance histogram fit, in summary form.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DistanceSummary {
    /// Frames averaged per atom; 1 for single images.
    pub frames_averaged: usize,
    /// Atoms dropped for lack of a partner in some frame.
    pub unmatched: usize,
    pub distances: usize,
    pub bin_width_nm: f64,
    pub converged: bool,
    pub peaks: Vec<PeakFit>,
}

impl DistanceSummary {
    fn new(fit: &DistanceFit, distances: usize, frames_averaged: usize, unmatched: usize) -> Self {
        Self {
            frames_averaged,
            unmatched,
            distances,
            bin_width_nm: fit.histogram.width,
            converged: fit.converged,
            peaks: fit.peaks.clone(),
        }
    }
}

/// Pair distribution of frames holding exactly two usable atoms.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairSummary {
    pub pairs: usize,
    pub q0: f64,
    pub sigma_nm: f64,
    /// Pairs assigned to separation 0 and 1.
    pub zero_site: usize,
    pub one_site: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StatsSummary {
    pub records: usize,
    pub reliable_records: usize,
    pub frames: usize,
    pub sequences: usize,
    pub lattice_wavelength_nm: f64,
    pub single: DistanceSummary,
    pub averaged: Option<DistanceSummary>,
    pub loading: Option<LoadingModel>,
    pub pair: Option<PairSummary>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StatsReport {
    pub summary: StatsSummary,
    pub single: DistanceFit,
    pub averaged: Option<DistanceFit>,
    pub pair: Option<PairFit>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct StatsParams {
    /// Frames averaged per atom; 1 skips averaging.
    pub frames_required: usize,
    pub max_n: u32,
    pub free_centers: bool,
}

impl Default for StatsParams {
    fn default() -> Self {
        Self {
            frames_required: 3,
            max_n: 10,
            free_centers: false,
        }
    }
}

/// Usable positions per frame, keyed by sequence and frame id.
fn usable_by_frame(records: &[AtomRecord]) -> BTreeMap<(&str, &str), Vec<f64>> {
    let mut frames: BTreeMap<(&str, &str), Vec<&AtomRecord>> = BTreeMap::new();
    for r in records {
        frames.entry((&r.sequence_id, &r.frame_id)).or_default().push(r);
    }
    frames
        .into_iter()
        .map(|(k, recs)| {
            let usable_positions = recs
                .iter()
                .filter(|r| recs.iter().filter(|o| o.roi_id == r.roi_id).all(|o| usable(o)))
                .map(|r| r.position_nm)
                .collect();
            (k, usable_positions)
        })
        .collect()
}

/// Single-image and averaged distance histograms, the loading fit from frames
/// with one usable atom and the pair distribution from frames with two. The
/// optional parts are left out when their data are too few to fit.
pub fn compute_stats(records: &[AtomRecord], lattice: &LatticeCalib, params: &StatsParams) -> Result<StatsReport> {
    if records.len() < 2 {
        return Err(Error::InvalidInput(format!(
            "{} records, at least 2 are needed",
            records.len()
        )));
    }
    let distances: Vec<f64> = pairwise_distances(records).iter().map(|d| d.distance_nm).collect();
    let single = fit_distance_histogram(&distances, lattice, params.max_n, params.free_centers)?;

    let averaged = if params.frames_required > 1 {
        let avg = match_and_average(records, params.frames_required, lattice)?;
        let d: Vec<f64> = averaged_distances(&avg.atoms).iter().map(|d| d.distance_nm).collect();
        fit_distance_histogram(&d, lattice, params.max_n, params.free_centers)
            .ok()
            .map(|fit| (DistanceSummary::new(&fit, d.len(), params.frames_required, avg.unmatched), fit))
    } else {
        None
    };

    let frames = usable_by_frame(records);
    let singles: Vec<f64> = frames.values().filter(|p| p.len() == 1).map(|p| p[0]).collect();
    let loading = fit_loading(&singles, lattice).ok();
    let pair_distances: Vec<f64> = frames
        .values()
        .filter(|p| p.len() == 2)
        .map(|p| (p[1] - p[0]).abs())
        .collect();
    let pair = fit_pair_distribution(&pair_distances, lattice.site_nm()).ok().map(|fit| {
        let sites: Vec<i64> = pair_distances.iter().map(|d| assign_site_separation(*d, lattice)).collect();
        let summary = PairSummary {
            pairs: pair_distances.len(),
            q0: fit.q0,
            sigma_nm: fit.sigma_nm,
            zero_site: sites.iter().filter(|n| **n == 0).count(),
            one_site: sites.iter().filter(|n| **n == 1).count(),
        };
        (summary, fit)
    });

    let sequences: std::collections::BTreeSet<&str> = records.iter().map(|r| r.sequence_id.as_str()).collect();
    let (averaged_summary, averaged_fit) = averaged.map_or((None, None), |(s, f)| (Some(s), Some(f)));
    let (pair_summary, pair_fit) = pair.map_or((None, None), |(s, f)| (Some(s), Some(f)));
    Ok(StatsReport {
        summary: StatsSummary {
            records: records.len(),
            reliable_records: records.iter().filter(|r| r.reliable).count(),
            frames: frames.len(),
            sequences: sequences.len(),
            lattice_wavelength_nm: lattice.wavelength_nm,
            single: DistanceSummary::new(&single, distances.len(), 1, 0),
            averaged: averaged_summary,
            loading,
            pair: pair_summary,
        },
        single,
        averaged: averaged_fit,
        pair: pair_fit,
    })
}
