//! Sub-diffraction localization of atoms in a one-dimensional optical lattice
//! from fluorescence images.
//!
//! A frame is binned along the lattice axis into a 1D profile, which is the
//! line spread function (LSF) convolved with a baseline plus a sum of Dirac
//! spikes, one per atom. The pipeline
//!
//! 1. segments the profile into regions of interest and estimates the background,
//! 2. counts atoms per region from the integrated signal,
//! 3. locates the spikes from LSF-deconvolved trigonometric moments,
//! 4. fits amplitudes by linear least squares and refines everything with
//!    Levenberg-Marquardt,
//! 5. flags atoms whose fluorescence deviates from the single-atom level.
//!
//! [`analysis`] turns the resulting records into pair-separation statistics
//! and [`sim`] renders synthetic frames with known ground truth.

pub mod analysis;
pub mod error;
pub mod estimator;
pub mod lm;
pub mod lsf;
pub mod pipeline;
pub mod sim;

pub use analysis::{LatticeCalib, StatsParams, StatsReport, StatsSummary};
pub use error::{Error, Result};
pub use estimator::{analyze_frame, AnalysisCalib, AtomRecord, SpikeFit};
pub use lsf::{LsfCalibration, LsfForm, LsfModel};
pub use pipeline::{Frame, FrameMeta, NoiseEstimate, Profile, Roi, SegmentParams};
pub use sim::SimConfig;
