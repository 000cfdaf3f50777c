use serde::{Deserialize, Serialize};

use super::background::NoiseEstimate;
use super::frame::Profile;
use crate::error::{Error, Result};

/// Half-open pixel range `[start, end)` holding fluorescence from one or more atoms.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Roi {
    pub start: i64,
    pub end: i64,
    pub roi_id: u32,
}

impl Roi {
    pub fn new(start: i64, end: i64, roi_id: u32) -> Result<Self> {
        if start >= end {
            return Err(Error::InvalidInput(format!("empty ROI {start}..{end}")));
        }
        Ok(Self { start, end, roi_id })
    }

    pub fn width(&self) -> usize {
        (self.end - self.start) as usize
    }

    pub fn contains(&self, px: i64) -> bool {
        px >= self.start && px < self.end
    }

    pub fn contains_position(&self, x: f64) -> bool {
        x >= self.start as f64 - 0.5 && x < self.end as f64 - 0.5
    }
}

/// Thresholds for [`segment`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SegmentParams {
    /// Detection threshold in units of the noise sigma.
    pub k_on: f64,
    /// Extension threshold in units of the noise sigma.
    pub k_off: f64,
    pub boxcar: usize,
    pub padding: usize,
    pub min_width: usize,
    /// Detection threshold above baseline used when the noise sigma is zero.
    pub abs_floor: f64,
}

impl Default for SegmentParams {
    fn default() -> Self {
        Self {
            k_on: 4.0,
            k_off: 1.5,
            boxcar: 3,
            padding: 6,
            min_width: 9,
            abs_floor: 1e-6,
        }
    }
}

impl SegmentParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.k_on > 0.0 && self.k_off > 0.0 && self.k_off <= self.k_on) {
            return Err(Error::InvalidInput(format!(
                "need 0 < k_off <= k_on, got k_on {} k_off {}",
                self.k_on, self.k_off
            )));
        }
        if self.boxcar == 0 || self.min_width == 0 || !(self.abs_floor > 0.0) {
            return Err(Error::InvalidInput(
                "boxcar, min_width and abs_floor must be positive".into(),
            ));
        }
        Ok(())
    }

    fn thresholds(&self, noise: &NoiseEstimate) -> (f64, f64) {
        let on = (self.k_on * noise.sigma).max(self.abs_floor);
        let off = (self.k_off * noise.sigma).max(self.abs_floor * self.k_off / self.k_on);
        (noise.baseline + on, noise.baseline + off)
    }
}

fn boxcar(values: &[f64], width: usize) -> Vec<f64> {
    let half_lo = (width - 1) / 2;
    let half_hi = width / 2;
    let n = values.len();
    (0..n)
        .map(|i| {
            let lo = i.saturating_sub(half_lo);
            let hi = (i + half_hi + 1).min(n);
            values[lo..hi].iter().sum::<f64>() / (hi - lo) as f64
        })
        .collect()
}

/// Splits a profile into disjoint regions that rise above the background.
///
/// Runs of the boxcar-smoothed profile above `baseline + k_on * sigma` seed a
/// region, which is grown while the smoothed profile stays above
/// `baseline + k_off * sigma`, padded, clipped to the profile and merged with
/// any overlapping neighbour. Regions are returned sorted by start.
pub fn segment(profile: &Profile, noise: &NoiseEstimate, params: &SegmentParams) -> Result<Vec<Roi>> {
    params.validate()?;
    let smoothed = boxcar(profile.intensities(), params.boxcar);
    let (on, off) = params.thresholds(noise);
    let n = smoothed.len();

    let mut spans: Vec<(usize, usize)> = Vec::new();
    let mut i = 0;
    while i < n {
        if smoothed[i] <= on {
            i += 1;
            continue;
        }
        let mut lo = i;
        let mut hi = i;
        while hi + 1 < n && smoothed[hi + 1] > on {
            hi += 1;
        }
        while lo > 0 && smoothed[lo - 1] > off {
            lo -= 1;
        }
        while hi + 1 < n && smoothed[hi + 1] > off {
            hi += 1;
        }
        let mut start = lo.saturating_sub(params.padding);
        let mut end = (hi + 1 + params.padding).min(n);
        if end - start < params.min_width {
            // grow symmetrically, spilling over to the other side at the profile edges
            let missing = params.min_width - (end - start);
            let grow_lo = (missing / 2).min(start);
            start -= grow_lo;
            end = (end + missing - grow_lo).min(n);
            if end - start < params.min_width {
                start = start.saturating_sub(params.min_width - (end - start));
            }
        }
        match spans.last_mut() {
            Some(last) if start < last.1 => last.1 = last.1.max(end),
            _ => spans.push((start, end)),
        }
        i = hi + 1;
    }

    let origin = profile.origin();
    Ok(spans
        .into_iter()
        .filter(|(s, e)| e - s >= params.min_width)
        .enumerate()
        .map(|(id, (s, e))| Roi {
            start: origin + s as i64,
            end: origin + e as i64,
            roi_id: id as u32,
        })
        .collect())
}
