use latticeloc_core::lsf::{calibrate_from_frames, LsfForm};
use latticeloc_core::sim::{run_campaign, SimConfig};
use latticeloc_core::{Error, SegmentParams};

#[test]
fn single_atom_frames_recover_the_spot_width() {
    let cfg = SimConfig {
        fixed_atoms: Some(1),
        sequences: 100,
        frames_per_sequence: 1,
        ..SimConfig::default()
    };
    let data = run_campaign(&cfg, 21).unwrap();
    let out = calibrate_from_frames(&data.frames, &SegmentParams::default(), LsfForm::Gaussian).unwrap();
    let c = out.calibration;
    assert!((c.sigma_px / cfg.sigma_sp_px() - 1.0).abs() < 0.02, "{}", c.sigma_px);
    assert!((c.i_a / cfg.i_a - 1.0).abs() < 0.03, "{}", c.i_a);
    assert_eq!(c.profile_count + out.skipped, 100);
}

#[test]
fn one_frame_is_enough() {
    let cfg = SimConfig {
        fixed_atoms: Some(1),
        sequences: 1,
        frames_per_sequence: 1,
        ..SimConfig::default()
    };
    let data = run_campaign(&cfg, 22).unwrap();
    let out = calibrate_from_frames(&data.frames, &SegmentParams::default(), LsfForm::Gaussian).unwrap();
    assert_eq!(out.calibration.profile_count, 1);
}

#[test]
fn no_isolated_spots_is_an_error() {
    let cfg = SimConfig {
        fixed_atoms: Some(0),
        sequences: 3,
        frames_per_sequence: 1,
        ..SimConfig::default()
    };
    let data = run_campaign(&cfg, 23).unwrap();
    let err = calibrate_from_frames(&data.frames, &SegmentParams::default(), LsfForm::Gaussian).unwrap_err();
    assert!(matches!(err, Error::Degenerate(_)), "{err}");
    assert!(calibrate_from_frames(&[], &SegmentParams::default(), LsfForm::Gaussian).is_err());
}
