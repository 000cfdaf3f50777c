use serde::{Deserialize, Serialize};

use super::frame::Profile;
use super::segment::Roi;
use crate::error::{Error, Result};

/// Minimum number of samples outside the excluded regions.
pub const MIN_BACKGROUND_SAMPLES: usize = 20;

/// Scales a median absolute deviation to a Gaussian standard deviation.
const MAD_TO_SIGMA: f64 = 1.4826;

/// Background level `a0` and the standard deviation of the additive noise.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NoiseEstimate {
    pub baseline: f64,
    pub sigma: f64,
}

impl NoiseEstimate {
    pub fn new(baseline: f64, sigma: f64) -> Result<Self> {
        if !baseline.is_finite() || !sigma.is_finite() || sigma < 0.0 {
            return Err(Error::InvalidInput(format!(
                "invalid noise estimate: baseline {baseline}, sigma {sigma}"
            )));
        }
        Ok(Self { baseline, sigma })
    }
}

pub(crate) fn median(values: &mut [f64]) -> f64 {
    debug_assert!(!values.is_empty());
    values.sort_unstable_by(f64::total_cmp);
    let n = values.len();
    if n % 2 == 1 {
        values[n / 2]
    } else {
        0.5 * (values[n / 2 - 1] + values[n / 2])
    }
}

/// Robust background statistics from the samples not covered by `exclude`:
/// median for the baseline, scaled MAD for the noise.
pub fn estimate_background(profile: &Profile, exclude: &[Roi]) -> Result<NoiseEstimate> {
    let mut samples: Vec<f64> = profile
        .samples()
        .filter(|(x, _)| {
            let px = *x as i64;
            !exclude.iter().any(|r| r.contains(px))
        })
        .map(|(_, v)| v)
        .collect();
    if samples.len() < MIN_BACKGROUND_SAMPLES {
        return Err(Error::InsufficientBackground {
            available: samples.len(),
            required: MIN_BACKGROUND_SAMPLES,
        });
    }
    let baseline = median(&mut samples);
    let mut deviations: Vec<f64> = samples.iter().map(|v| (v - baseline).abs()).collect();
    let mad = median(&mut deviations);
    NoiseEstimate::new(baseline, MAD_TO_SIGMA * mad)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, Normal};

    fn profile(v: Vec<f64>) -> Profile {
        Profile::new(v, 0, 294.6).unwrap()
    }

    #[test]
    fn constant_profile() {
        let est = estimate_background(&profile(vec![100.0; 50]), &[]).unwrap();
        assert_eq!(est.baseline, 100.0);
        assert_eq!(est.sigma, 0.0);
    }

    #[test]
    fn too_few_samples() {
        let p = profile(vec![1.0; 30]);
        let roi = Roi::new(0, 15, 0).unwrap();
        match estimate_background(&p, &[roi]) {
            Err(Error::InsufficientBackground { available, .. }) => assert_eq!(available, 15),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn gaussian_background_monte_carlo() {
        // 1000 samples from N(100, 5). The sample median has standard error
        // sqrt(pi/2) * 5 / sqrt(1000) = 0.198, so +-0.5 covers 98.8% of trials;
        // the MAD-based sigma (standard error ~0.18) is covered in ~99.4%.
        // 2000 trials put the binomial error near 0.25%.
        let dist = Normal::new(100.0, 5.0).unwrap();
        let trials = 2000;
        let (mut base_ok, mut sigma_ok) = (0, 0);
        for seed in 0..trials {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let v: Vec<f64> = (0..1000).map(|_| dist.sample(&mut rng)).collect();
            let est = estimate_background(&profile(v), &[]).unwrap();
            base_ok += usize::from((est.baseline - 100.0).abs() <= 0.5);
            sigma_ok += usize::from((est.sigma - 5.0).abs() <= 0.5);
        }
        let rate = |k: usize| k as f64 / trials as f64;
        assert!(rate(base_ok) >= 0.98, "baseline coverage {}", rate(base_ok));
        assert!(rate(sigma_ok) >= 0.985, "sigma coverage {}", rate(sigma_ok));
    }

    #[test]
    fn permutation_invariant() {
        let mut v: Vec<f64> = (0..50).map(|i| ((i * 37) % 11) as f64).collect();
        let a = estimate_background(&profile(v.clone()), &[]).unwrap();
        v.reverse();
        v.rotate_left(13);
        let b = estimate_background(&profile(v), &[]).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn excluding_spot_removes_its_influence() {
        let mut v = vec![10.0; 60];
        for x in v.iter_mut().skip(20).take(10) {
            *x = 500.0;
        }
        let p = profile(v);
        let roi = Roi::new(20, 30, 0).unwrap();
        let est = estimate_background(&p, &[roi]).unwrap();
        assert_eq!(est.baseline, 10.0);
        assert_eq!(est.sigma, 0.0);
    }
}
