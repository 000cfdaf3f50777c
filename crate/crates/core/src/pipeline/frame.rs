use std::ops::Range;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Largest value a 16-bit sensor can report.
pub const SENSOR_MAX: f64 = 65535.0;

/// Object-plane size of one camera pixel for the reference imaging setup.
pub const DEFAULT_PIXEL_SCALE_NM: f64 = 294.6;

/// Acquisition metadata that travels with a frame.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrameMeta {
    pub frame_id: String,
    pub sequence_id: String,
    pub pixel_scale_nm: f64,
    pub exposure_s: f64,
}

impl Default for FrameMeta {
    fn default() -> Self {
        Self {
            frame_id: String::new(),
            sequence_id: String::new(),
            pixel_scale_nm: DEFAULT_PIXEL_SCALE_NM,
            exposure_s: 1.0,
        }
    }
}

/// A raw sensor image. Values are stored row-major, `values[row * width + col]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Frame {
    width: usize,
    height: usize,
    values: Vec<f64>,
    pub meta: FrameMeta,
}

impl Frame {
    pub fn new(width: usize, height: usize, values: Vec<f64>, meta: FrameMeta) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::InvalidInput(format!(
                "frame dimensions must be positive, got {width}x{height}"
            )));
        }
        if values.len() != width * height {
            return Err(Error::InvalidInput(format!(
                "frame {width}x{height} needs {} values, got {}",
                width * height,
                values.len()
            )));
        }
        if let Some(bad) = values
            .iter()
            .find(|v| !v.is_finite() || **v < 0.0 || **v > SENSOR_MAX)
        {
            return Err(Error::InvalidInput(format!(
                "frame value {bad} outside sensor range 0..={SENSOR_MAX}"
            )));
        }
        if !(meta.pixel_scale_nm > 0.0) {
            return Err(Error::InvalidInput(format!(
                "pixel scale must be positive, got {}",
                meta.pixel_scale_nm
            )));
        }
        Ok(Self {
            width,
            height,
            values,
            meta,
        })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn get(&self, col: usize, row: usize) -> f64 {
        self.values[row * self.width + col]
    }

    pub fn row(&self, row: usize) -> &[f64] {
        &self.values[row * self.width..(row + 1) * self.width]
    }
}

/// Vertically binned 1D intensity profile. Sample `i` sits at horizontal pixel `origin + i`.
#[derive(Debug, Clone, PartialEq)]
pub struct Profile {
    intensities: Vec<f64>,
    origin: i64,
    pixel_scale_nm: f64,
}

impl Profile {
    pub fn new(intensities: Vec<f64>, origin: i64, pixel_scale_nm: f64) -> Result<Self> {
        if intensities.is_empty() {
            return Err(Error::InvalidInput("profile must not be empty".into()));
        }
        if intensities.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidInput("profile contains non-finite values".into()));
        }
        if !(pixel_scale_nm > 0.0) {
            return Err(Error::InvalidInput(format!(
                "pixel scale must be positive, got {pixel_scale_nm}"
            )));
        }
        Ok(Self {
            intensities,
            origin,
            pixel_scale_nm,
        })
    }

    pub fn intensities(&self) -> &[f64] {
        &self.intensities
    }

    pub fn len(&self) -> usize {
        self.intensities.len()
    }

    pub fn is_empty(&self) -> bool {
        self.intensities.is_empty()
    }

    pub fn origin(&self) -> i64 {
        self.origin
    }

    /// One past the last pixel index covered.
    pub fn end(&self) -> i64 {
        self.origin + self.intensities.len() as i64
    }

    pub fn pixel_scale_nm(&self) -> f64 {
        self.pixel_scale_nm
    }

    /// Pixel coordinate of sample `i`.
    pub fn x(&self, i: usize) -> f64 {
        (self.origin + i as i64) as f64
    }

    /// Iterates `(pixel coordinate, intensity)` pairs.
    pub fn samples(&self) -> impl Iterator<Item = (f64, f64)> + '_ {
        self.intensities
            .iter()
            .enumerate()
            .map(move |(i, &v)| (self.x(i), v))
    }

    /// Sub-profile over a pixel range in profile coordinates, clipped to the profile.
    pub fn slice(&self, pixels: Range<i64>) -> Result<Profile> {
        let start = pixels.start.max(self.origin);
        let end = pixels.end.min(self.end());
        if start >= end {
            return Err(Error::InvalidInput(format!(
                "range {}..{} does not overlap profile {}..{}",
                pixels.start,
                pixels.end,
                self.origin,
                self.end()
            )));
        }
        let lo = (start - self.origin) as usize;
        let hi = (end - self.origin) as usize;
        Profile::new(
            self.intensities[lo..hi].to_vec(),
            start,
            self.pixel_scale_nm,
        )
    }

    /// Same samples, relabelled so the first sits at `origin`.
    pub fn with_origin(mut self, origin: i64) -> Self {
        self.origin = origin;
        self
    }
}

/// Sums the frame over a window of rows (the whole frame by default), column by column.
pub fn bin_vertical(frame: &Frame, rows: Option<Range<usize>>) -> Result<Profile> {
    let rows = rows.unwrap_or(0..frame.height());
    if rows.is_empty() {
        return Err(Error::InvalidInput("empty row window".into()));
    }
    if rows.end > frame.height() {
        return Err(Error::InvalidInput(format!(
            "row window {}..{} exceeds frame height {}",
            rows.start,
            rows.end,
            frame.height()
        )));
    }
    let mut binned = vec![0.0; frame.width()];
    for row in rows {
        for (acc, v) in binned.iter_mut().zip(frame.row(row)) {
            *acc += v;
        }
    }
    Profile::new(binned, 0, frame.meta.pixel_scale_nm)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn frame(width: usize, height: usize, values: Vec<f64>) -> Frame {
        Frame::new(width, height, values, FrameMeta::default()).unwrap()
    }

    #[test]
    fn zero_frame_bins_to_zero_profile() {
        let p = bin_vertical(&frame(3, 2, vec![0.0; 6]), None).unwrap();
        assert_eq!(p.intensities(), &[0.0, 0.0, 0.0]);
    }

    #[test]
    fn single_column_sums() {
        // 3 rows x 4 columns, column 2 holds 1, 2, 3
        let mut v = vec![0.0; 12];
        v[2] = 1.0;
        v[6] = 2.0;
        v[10] = 3.0;
        let p = bin_vertical(&frame(4, 3, v), None).unwrap();
        assert_eq!(p.intensities(), &[0.0, 0.0, 6.0, 0.0]);
    }

    #[test]
    fn row_window() {
        let v: Vec<f64> = (0..6).map(|i| i as f64).collect();
        let f = frame(2, 3, v);
        let p = bin_vertical(&f, Some(1..3)).unwrap();
        assert_eq!(p.intensities(), &[2.0 + 4.0, 3.0 + 5.0]);
        assert!(bin_vertical(&f, Some(1..1)).is_err());
        assert!(bin_vertical(&f, Some(0..4)).is_err());
    }

    #[test]
    fn rejects_bad_frames() {
        assert!(Frame::new(0, 1, vec![], FrameMeta::default()).is_err());
        assert!(Frame::new(2, 1, vec![1.0], FrameMeta::default()).is_err());
        assert!(Frame::new(1, 1, vec![-1.0], FrameMeta::default()).is_err());
        assert!(Frame::new(1, 1, vec![70000.0], FrameMeta::default()).is_err());
    }

    #[test]
    fn slice_clips() {
        let p = Profile::new((0..10).map(f64::from).collect(), 5, 1.0).unwrap();
        let s = p.slice(3..8).unwrap();
        assert_eq!(s.origin(), 5);
        assert_eq!(s.intensities(), &[0.0, 1.0, 2.0]);
        assert!(p.slice(20..30).is_err());
    }
}
