//! Frame ingestion, vertical binning, background statistics and segmentation.

mod background;
mod frame;
pub mod io;
mod segment;

pub use background::{estimate_background, NoiseEstimate, MIN_BACKGROUND_SAMPLES};
pub use frame::{bin_vertical, Frame, FrameMeta, Profile, DEFAULT_PIXEL_SCALE_NM, SENSOR_MAX};
pub use segment::{segment, Roi, SegmentParams};

