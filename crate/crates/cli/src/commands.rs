use std::fmt::Write as _;
use std::fs;
use std::io::{self, BufRead, BufWriter, Write};
use std::path::{Path, PathBuf};

use latticeloc_core::analysis::{compute_stats, histogram_csv};
use latticeloc_core::estimator::analyze_frame_detailed;
use latticeloc_core::lsf::calibrate_from_frames;
use latticeloc_core::pipeline::io::{list_frames, read_frame};
use latticeloc_core::sim::{run_campaign, write_dataset};
use latticeloc_core::{AnalysisCalib, AtomRecord, Frame, LsfCalibration, StatsSummary};
use log::{info, warn};
use rayon::prelude::*;

use crate::config::RunConfig;
use crate::error::{CliError, Result};

/// Below this many profiles the calibration is reported as low confidence.
pub const MIN_CONFIDENT_PROFILES: usize = 10;

/// Reads every frame of `dir`, skipping unreadable files with a warning.
fn read_frames(dir: &Path) -> Result<Vec<Frame>> {
    let paths = list_frames(dir)?;
    let frames: Vec<Option<Frame>> = paths
        .par_iter()
        .map(|p| match read_frame(p) {
            Ok(f) => Some(f),
            Err(e) => {
                warn!("skipping frame: {e}");
                None
            }
        })
        .collect();
    Ok(frames.into_iter().flatten().collect())
}

fn create_writer(path: &Path) -> Result<BufWriter<fs::File>> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| CliError::io(parent, e))?;
    }
    let f = fs::File::create(path).map_err(|e| CliError::io(path, e))?;
    Ok(BufWriter::new(f))
}

pub fn calibrate_lsf(dir: &Path, output: &Path, cfg: &RunConfig) -> Result<()> {
    let frames = read_frames(dir)?;
    if frames.is_empty() {
        return Err(latticeloc_core::Error::InvalidInput(format!("no readable frames in {}", dir.display())).into());
    }
    let out = calibrate_from_frames(&frames, &cfg.segment, cfg.lsf)?;
    let c = &out.calibration;
    if c.profile_count < MIN_CONFIDENT_PROFILES {
        warn!(
            "low confidence: only {} isolated profiles, {MIN_CONFIDENT_PROFILES} or more recommended",
            c.profile_count
        );
    }
    if out.skipped > 0 {
        info!("{} frames without exactly one ROI were skipped", out.skipped);
    }
    c.save(output)?;
    println!(
        "profiles {} samples {} sigma_px {:.4} i_a {:.1} residual_rms {:.4e}",
        c.profile_count, c.sample_count, c.sigma_px, c.i_a, c.residual_rms
    );
    Ok(())
}

fn record_order(a: &AtomRecord, b: &AtomRecord) -> std::cmp::Ordering {
    (&a.sequence_id, &a.frame_id, a.roi_id)
        .cmp(&(&b.sequence_id, &b.frame_id, b.roi_id))
        .then(a.position_nm.total_cmp(&b.position_nm))
}

pub fn analyze(dir: &Path, calibration: &Path, output: Option<&Path>, cfg: &RunConfig) -> Result<()> {
    let cal = LsfCalibration::load(calibration)?;
    let mut calib = AnalysisCalib::new(cal.i_a, cal.model()?, cal.pixel_scale_nm);
    calib.reliability_tol = cfg.analysis.reliability_tol;
    calib.count_tolerance = cfg.analysis.count_tolerance;
    calib.mode_cutoff = cfg.analysis.mode_cutoff;
    calib.mode_snr = cfg.analysis.mode_snr;
    calib.validate()?;

    let paths = list_frames(dir)?;
    let per_frame: Vec<Option<Vec<AtomRecord>>> = paths
        .par_iter()
        .map(|p| {
            let frame = match read_frame(p) {
                Ok(f) => f,
                Err(e) => {
                    warn!("skipping frame: {e}");
                    return None;
                }
            };
            match analyze_frame_detailed(&frame, &calib, &cfg.segment) {
                Ok(out) => {
                    for f in &out.failures {
                        warn!(
                            "{}: ROI {}..{} skipped: {}",
                            frame.meta.frame_id, f.roi.start, f.roi.end, f.message
                        );
                    }
                    Some(out.records)
                }
                Err(e) => {
                    warn!("{}: {e}", p.display());
                    None
                }
            }
        })
        .collect();
    let analyzed = per_frame.iter().filter(|r| r.is_some()).count();
    let mut records: Vec<AtomRecord> = per_frame.into_iter().flatten().flatten().collect();
    records.sort_by(record_order);

    let mut text = String::new();
    for r in &records {
        let line = serde_json::to_string(r).map_err(|e| CliError::Usage(e.to_string()))?;
        text.push_str(&line);
        text.push('\n');
    }
    match output {
        Some(path) => {
            let mut w = create_writer(path)?;
            w.write_all(text.as_bytes()).and_then(|_| w.flush()).map_err(|e| CliError::io(path, e))?;
        }
        None => io::stdout()
            .lock()
            .write_all(text.as_bytes())
            .map_err(|e| CliError::io("<stdout>", e))?,
    }
    eprintln!(
        "analyzed {analyzed} of {} frames, {} records",
        paths.len(),
        records.len()
    );
    Ok(())
}

pub fn read_records(path: &Path) -> Result<Vec<AtomRecord>> {
    let file = fs::File::open(path).map_err(|e| CliError::io(path, e))?;
    let mut out = Vec::new();
    for (k, line) in io::BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| CliError::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let r = serde_json::from_str(&line).map_err(|e| CliError::Parse {
            path: path.to_owned(),
            message: format!("line {}: {e}", k + 1),
        })?;
        out.push(r);
    }
    Ok(out)
}

fn write_file(path: PathBuf, text: &str) -> Result<()> {
    fs::write(&path, text).map_err(|e| CliError::io(path, e))
}

fn peak_table(summary: &StatsSummary) -> String {
    let mut s = String::from("n   center_nm  sigma_single  F_single  sigma_averaged  F_averaged\n");
    let fmt = |v: Option<f64>, scale: f64, digits: usize| {
        v.map_or_else(|| "-".to_string(), |v| format!("{:.*}", digits, v * scale))
    };
    for (k, p) in summary.single.peaks.iter().enumerate() {
        let a = summary.averaged.as_ref().and_then(|a| a.peaks.get(k));
        let _ = writeln!(
            s,
            "{:<3} {:>9.1}  {:>12}  {:>8}  {:>14}  {:>10}",
            p.n,
            p.center_nm,
            fmt(p.sigma_n, 1.0, 1),
            fmt(p.f_n, 100.0, 1),
            fmt(a.and_then(|a| a.sigma_n), 1.0, 1),
            fmt(a.and_then(|a| a.f_n), 100.0, 1),
        );
    }
    s
}

pub fn stats(records_path: &Path, out_dir: &Path, cfg: &RunConfig) -> Result<()> {
    let records = read_records(records_path)?;
    let report = compute_stats(&records, &cfg.lattice, &cfg.stats)?;
    fs::create_dir_all(out_dir).map_err(|e| CliError::io(out_dir, e))?;
    write_file(
        out_dir.join("single_histogram.csv"),
        &histogram_csv(&report.single.histogram, &report.single.model),
    )?;
    if let Some(a) = &report.averaged {
        write_file(out_dir.join("averaged_histogram.csv"), &histogram_csv(&a.histogram, &a.model))?;
    }
    if let Some(p) = &report.pair {
        write_file(out_dir.join("pair_histogram.csv"), &histogram_csv(&p.histogram, &p.model))?;
    }
    let json = serde_json::to_string_pretty(&report.summary).map_err(|e| CliError::Usage(e.to_string()))?;
    write_file(out_dir.join("summary.json"), &json)?;
    print!("{}", peak_table(&report.summary));
    Ok(())
}

pub fn simulate(out_dir: &Path, cfg: &RunConfig) -> Result<()> {
    let data = run_campaign(&cfg.simulate, cfg.seed)?;
    write_dataset(&data, out_dir)?;
    let atoms: usize = data.manifest.sequences.iter().map(|s| s.frames[0].atoms.len()).sum();
    println!(
        "{} sequences, {} frames, {} atoms after loss, written to {}",
        data.manifest.sequences.len(),
        data.frames.len(),
        atoms,
        out_dir.display()
    );
    Ok(())
}
