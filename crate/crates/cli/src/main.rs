mod commands;
mod config;
mod error;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use latticeloc_core::{LatticeCalib, LsfForm};

use crate::config::{RunConfig, CONFIG_ENV};
use crate::error::{CliError, Result};

/// Atom localization in 1D optical lattice fluorescence images.
#[derive(Debug, Parser)]
#[command(name = "latticeloc", version)]
pub struct Cli {
    /// TOML run configuration; flags override its values.
    #[arg(long, global = true, env = CONFIG_ENV)]
    config: Option<PathBuf>,

    /// Worker threads, 0 for all cores.
    #[arg(long, short = 'j', global = true)]
    jobs: Option<usize>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Fit the line spread function to frames of isolated single atoms.
    CalibrateLsf(CalibrateArgs),
    /// Locate atoms in every frame of a directory, one JSON record per line.
    Analyze(AnalyzeArgs),
    /// Distance histograms, peak fits and reliability table from records.
    Stats(StatsArgs),
    /// Render a synthetic campaign with ground truth.
    Simulate(SimulateArgs),
}

/// Empirical table spacing when neither flag nor file sets one.
const DEFAULT_SPACING_PX: f64 = 0.25;

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Form {
    Gaussian,
    Empirical,
}

#[derive(Debug, Args)]
struct SegmentArgs {
    /// Detection threshold in noise sigmas.
    #[arg(long)]
    k_on: Option<f64>,
    /// Extension threshold in noise sigmas.
    #[arg(long)]
    k_off: Option<f64>,
    #[arg(long)]
    boxcar: Option<usize>,
    /// Pixels added on both sides of each ROI.
    #[arg(long)]
    padding: Option<usize>,
    #[arg(long)]
    min_width: Option<usize>,
}

#[derive(Debug, Args)]
struct CalibrateArgs {
    /// Directory of single-atom frames.
    frames: PathBuf,
    /// Calibration file to write.
    #[arg(long, short)]
    output: PathBuf,
    #[arg(long, value_enum)]
    form: Option<Form>,
    /// Table spacing in pixels for the empirical form.
    #[arg(long)]
    spacing: Option<f64>,
    #[command(flatten)]
    segment: SegmentArgs,
}

#[derive(Debug, Args)]
struct AnalyzeArgs {
    /// Directory of frames.
    frames: PathBuf,
    /// LSF calibration file.
    #[arg(long, short)]
    calibration: PathBuf,
    /// Records file; standard output when absent.
    #[arg(long, short)]
    output: Option<PathBuf>,
    #[arg(long)]
    reliability_tol: Option<f64>,
    #[arg(long)]
    count_tolerance: Option<f64>,
    #[arg(long)]
    mode_cutoff: Option<f64>,
    #[arg(long)]
    mode_snr: Option<f64>,
    #[command(flatten)]
    segment: SegmentArgs,
}

#[derive(Debug, Args)]
struct StatsArgs {
    /// JSON-lines records from `analyze`.
    records: PathBuf,
    /// Output directory for histograms and the summary.
    #[arg(long, short)]
    output: PathBuf,
    /// Frames averaged per atom; 1 skips averaging.
    #[arg(long)]
    frames_required: Option<usize>,
    /// Largest site separation fitted.
    #[arg(long)]
    max_n: Option<u32>,
    /// Let peak centers move by up to a quarter site.
    #[arg(long)]
    free_centers: bool,
    #[arg(long)]
    wavelength_nm: Option<f64>,
}

#[derive(Debug, Args)]
struct SimulateArgs {
    /// Output directory.
    #[arg(long, short)]
    output: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    sequences: Option<usize>,
    #[arg(long)]
    frames_per_sequence: Option<usize>,
    #[arg(long)]
    mean_atoms: Option<f64>,
    #[arg(long)]
    fixed_atoms: Option<usize>,
    /// Integrated counts of one atom per exposure.
    #[arg(long)]
    i_a: Option<f64>,
    /// Background counts per pixel.
    #[arg(long)]
    baseline: Option<f64>,
    #[arg(long)]
    readout_sigma: Option<f64>,
    #[arg(long)]
    mid_exposure_loss_prob: Option<f64>,
    #[arg(long)]
    width: Option<usize>,
    #[arg(long)]
    height: Option<usize>,
    #[arg(long)]
    no_shot_noise: bool,
    #[arg(long)]
    no_on_site_loss: bool,
}

fn set<T>(slot: &mut T, value: Option<T>) {
    if let Some(v) = value {
        *slot = v;
    }
}

impl SegmentArgs {
    fn apply(&self, cfg: &mut RunConfig) {
        let s = &mut cfg.segment;
        set(&mut s.k_on, self.k_on);
        set(&mut s.k_off, self.k_off);
        set(&mut s.boxcar, self.boxcar);
        set(&mut s.padding, self.padding);
        set(&mut s.min_width, self.min_width);
    }
}

impl Cli {
    /// Merges flags into the loaded configuration.
    fn config(&self) -> Result<RunConfig> {
        let mut cfg = RunConfig::resolve(self.config.as_deref())?;
        set(&mut cfg.jobs, self.jobs);
        match &self.command {
            Command::CalibrateLsf(a) => {
                a.segment.apply(&mut cfg);
                match a.form {
                    Some(Form::Gaussian) => cfg.lsf = LsfForm::Gaussian,
                    Some(Form::Empirical) if cfg.lsf == LsfForm::Gaussian => {
                        cfg.lsf = LsfForm::Empirical {
                            spacing: DEFAULT_SPACING_PX,
                        }
                    }
                    _ => {}
                }
                if let (LsfForm::Empirical { spacing }, Some(v)) = (&mut cfg.lsf, a.spacing) {
                    *spacing = v;
                }
            }
            Command::Analyze(a) => {
                a.segment.apply(&mut cfg);
                let o = &mut cfg.analysis;
                set(&mut o.reliability_tol, a.reliability_tol);
                set(&mut o.count_tolerance, a.count_tolerance);
                set(&mut o.mode_cutoff, a.mode_cutoff);
                set(&mut o.mode_snr, a.mode_snr);
            }
            Command::Stats(a) => {
                let s = &mut cfg.stats;
                set(&mut s.frames_required, a.frames_required);
                set(&mut s.max_n, a.max_n);
                s.free_centers |= a.free_centers;
                if let Some(w) = a.wavelength_nm {
                    cfg.lattice = LatticeCalib::new(w).map_err(|e| CliError::Usage(e.to_string()))?;
                }
            }
            Command::Simulate(a) => {
                set(&mut cfg.seed, a.seed);
                let s = &mut cfg.simulate;
                set(&mut s.sequences, a.sequences);
                set(&mut s.frames_per_sequence, a.frames_per_sequence);
                set(&mut s.mean_atoms, a.mean_atoms);
                if a.fixed_atoms.is_some() {
                    s.fixed_atoms = a.fixed_atoms;
                }
                set(&mut s.i_a, a.i_a);
                set(&mut s.baseline, a.baseline);
                set(&mut s.readout_sigma, a.readout_sigma);
                set(&mut s.mid_exposure_loss_prob, a.mid_exposure_loss_prob);
                set(&mut s.width, a.width);
                set(&mut s.height, a.height);
                s.shot_noise &= !a.no_shot_noise;
                s.on_site_loss &= !a.no_on_site_loss;
            }
        }
        Ok(cfg)
    }
}

fn run(cli: &Cli) -> Result<()> {
    let cfg = cli.config()?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(cfg.jobs)
        .build_global()
        .map_err(|e| CliError::Usage(format!("cannot start {} worker threads: {e}", cfg.jobs)))?;
    match &cli.command {
        Command::CalibrateLsf(a) => commands::calibrate_lsf(&a.frames, &a.output, &cfg),
        Command::Analyze(a) => commands::analyze(&a.frames, &a.calibration, a.output.as_deref(), &cfg),
        Command::Stats(a) => commands::stats(&a.records, &a.output, &cfg),
        Command::Simulate(a) => commands::simulate(&a.output, &cfg),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
