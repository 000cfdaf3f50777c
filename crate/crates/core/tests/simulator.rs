use latticeloc_core::estimator::analyze_frame;
use latticeloc_core::pipeline::bin_vertical;
use latticeloc_core::sim::{
    apply_on_site_loss, expected_counts, render_frame, run_campaign, sample_loading, sequence_rng, SimConfig,
    TruthAtom,
};
use latticeloc_core::{AnalysisCalib, FrameMeta, LsfModel, SegmentParams};
use rand::Rng;
use statrs::distribution::{ContinuousCDF, Normal};

fn atom(site: i64, position_nm: f64, survival: f64) -> TruthAtom {
    TruthAtom {
        site,
        position_nm,
        survival,
    }
}

#[test]
fn same_site_pair_is_lost() {
    let mut atoms = vec![atom(3, 1299.0, 1.0), atom(3, 1299.0, 1.0)];
    apply_on_site_loss(&mut atoms);
    assert!(atoms.is_empty());
}

#[test]
fn site_index_spread() {
    let cfg = SimConfig {
        fixed_atoms: Some(1),
        loading_center_nm: Some(0.0),
        ..SimConfig::default()
    };
    let mut rng = sequence_rng(3, 0);
    let sites: Vec<f64> = (0..10_000)
        .map(|_| sample_loading(&cfg, &mut rng).atoms[0].site as f64)
        .collect();
    let n = sites.len() as f64;
    let mean = sites.iter().sum::<f64>() / n;
    let sd = (sites.iter().map(|s| (s - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt();
    assert!((sd / 9.5 - 1.0).abs() < 0.05, "{sd}");
}

#[test]
fn fixed_single_atom() {
    let cfg = SimConfig {
        fixed_atoms: Some(1),
        ..SimConfig::default()
    };
    let mut rng = sequence_rng(4, 0);
    for _ in 0..100 {
        let l = sample_loading(&cfg, &mut rng);
        assert_eq!(l.atoms.len(), 1);
        assert_eq!(l.atoms[0].survival, 1.0);
    }
}

#[test]
fn empty_noiseless_frame_is_flat() {
    let cfg = SimConfig::noiseless();
    let frame = render_frame(&[], &cfg, 0, FrameMeta::default(), &mut sequence_rng(0, 0)).unwrap();
    assert!(frame.values().iter().all(|v| *v == cfg.baseline));
}

#[test]
fn half_survival_halves_the_signal() {
    let cfg = SimConfig {
        baseline: 0.0,
        ..SimConfig::noiseless()
    };
    let frame = render_frame(
        &[atom(0, 120.0 * cfg.pixel_scale_nm, 0.5)],
        &cfg,
        0,
        FrameMeta::default(),
        &mut sequence_rng(0, 0),
    )
    .unwrap();
    let total: f64 = frame.values().iter().sum();
    assert!((total / (0.5 * cfg.i_a) - 1.0).abs() < 1e-9, "{total}");
}

/// Expected atoms left after on-site loss: every site holds Poisson(mean p_s)
/// atoms and only singly occupied sites keep theirs. Averaged over the offset.
fn expected_survivors(cfg: &SimConfig) -> f64 {
    let g = Normal::new(0.0, cfg.loading_sigma_nm).unwrap();
    let offsets = 200;
    let mut total = 0.0;
    for k in 0..offsets {
        let offset = (k as f64 + 0.5) / offsets as f64 * cfg.site_nm;
        for s in -200i64..=200 {
            let c = s as f64 * cfg.site_nm + offset;
            let p = g.cdf(c + 0.5 * cfg.site_nm) - g.cdf(c - 0.5 * cfg.site_nm);
            let m = cfg.mean_atoms * p;
            total += m * (-m).exp();
        }
    }
    total / offsets as f64
}

#[test]
fn campaign_atom_totals() {
    let cfg = SimConfig {
        sequences: 2000,
        frames_per_sequence: 3,
        loading_center_nm: Some(0.0),
        width: 8,
        height: 2,
        ..SimConfig::default()
    };
    let d = run_campaign(&cfg, 12).unwrap();
    let loaded: usize = d.manifest.sequences.iter().map(|s| s.loaded).sum();
    let kept: usize = d.manifest.sequences.iter().map(|s| s.frames[0].atoms.len()).sum();
    let target = cfg.sequences as f64 * cfg.mean_atoms;
    assert!((loaded as f64 / target - 1.0).abs() < 0.03, "{loaded}");
    let survivors = cfg.sequences as f64 * expected_survivors(&cfg);
    assert!((kept as f64 / survivors - 1.0).abs() < 0.03, "{kept} vs {survivors}");

    let mut per_sequence = std::collections::BTreeMap::new();
    for f in &d.frames {
        *per_sequence.entry(f.meta.sequence_id.clone()).or_insert(0) += 1;
    }
    assert_eq!(per_sequence.len(), cfg.sequences);
    assert!(per_sequence.values().all(|n| *n == 3));
}

#[test]
fn shot_noise_is_poisson() {
    let cfg = SimConfig {
        readout_sigma: 0.0,
        width: 500,
        height: 200,
        ..SimConfig::default()
    };
    let atoms = [atom(0, 250.0 * cfg.pixel_scale_nm, 1.0)];
    let expected = expected_counts(&atoms, &cfg, &[0.0]);
    let frame = render_frame(&atoms, &cfg, 0, FrameMeta::default(), &mut sequence_rng(6, 0)).unwrap();
    // (x - mu)^2 / mu has mean 1 when the variance equals the mean
    let ratio: f64 = frame
        .values()
        .iter()
        .zip(&expected)
        .map(|(x, mu)| (x - mu).powi(2) / mu)
        .sum::<f64>()
        / expected.len() as f64;
    assert_eq!(expected.len(), 100_000);
    assert!((ratio - 1.0).abs() < 0.05, "{ratio}");
}

#[test]
fn noiseless_frame_round_trip() {
    let cfg = SimConfig::noiseless();
    let calib = AnalysisCalib::new(cfg.i_a, LsfModel::gaussian(cfg.sigma_sp_px()).unwrap(), cfg.pixel_scale_nm);
    let mut rng = sequence_rng(8, 0);
    for n in 1..=6 {
        for _ in 0..5 {
            let mut x = rng.random_range(60.0..100.0) * cfg.pixel_scale_nm;
            let atoms: Vec<TruthAtom> = (0..n)
                .map(|k| {
                    if k > 0 {
                        x += cfg.site_nm * rng.random_range(1..6) as f64;
                    }
                    atom(0, x, 1.0)
                })
                .collect();
            let frame = render_frame(&atoms, &cfg, 0, FrameMeta::default(), &mut rng).unwrap();
            let recs = analyze_frame(&frame, &calib, &SegmentParams::default()).unwrap();
            assert_eq!(recs.len(), n);
            for (r, a) in recs.iter().zip(&atoms) {
                let dx = (r.position_nm - a.position_nm) / cfg.pixel_scale_nm;
                assert!(dx.abs() < 1e-4, "N {n}: dx {dx}");
                assert!((r.amplitude / cfg.i_a - 1.0).abs() < 1e-6, "N {n}: a {}", r.amplitude);
            }
        }
    }
}

#[test]
fn binned_noiseless_render_matches_lsf() {
    let cfg = SimConfig::noiseless();
    let frame = render_frame(
        &[atom(0, 50.3 * cfg.pixel_scale_nm, 1.0)],
        &cfg,
        0,
        FrameMeta::default(),
        &mut sequence_rng(0, 0),
    )
    .unwrap();
    let lsf = LsfModel::gaussian(cfg.sigma_sp_px()).unwrap();
    let p = bin_vertical(&frame, None).unwrap();
    let rows = cfg.height as f64;
    let worst = p
        .samples()
        .map(|(x, v)| {
            let e = rows * cfg.baseline + cfg.i_a * lsf.eval(x - 50.3);
            ((v - e) / e).abs()
        })
        .fold(0.0, f64::max);
    assert!(worst < 1e-9, "{worst}");
}
