use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use latticeloc_core::analysis::LatticeCalib;
use latticeloc_core::estimator::RecordDiagnostics;
use latticeloc_core::sim::{read_manifest, MANIFEST_FILE};
use latticeloc_core::{AtomRecord, LsfCalibration, SimConfig};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use tempfile::TempDir;

fn latticeloc(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_latticeloc"))
        .args(args)
        .env_remove("LATTICELOC_CONFIG")
        .output()
        .unwrap()
}

fn ok(out: &Output) {
    assert!(
        out.status.success(),
        "status {:?}\nstdout {}\nstderr {}",
        out.status,
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// Simulates `sequences` single-atom frames and calibrates on them.
fn calibrate(dir: &Path, sequences: usize, i_a: f64) -> (PathBuf, Output) {
    let frames = dir.join(format!("single_{sequences}_{i_a}"));
    let cal = dir.join(format!("lsf_{sequences}_{i_a}.toml"));
    ok(&latticeloc(&[
        "simulate",
        "-o",
        s(&frames),
        "--fixed-atoms",
        "1",
        "--frames-per-sequence",
        "1",
        "--sequences",
        &sequences.to_string(),
        "--i-a",
        &i_a.to_string(),
        "--seed",
        "5",
    ]));
    let out = latticeloc(&["calibrate-lsf", s(&frames), "-o", s(&cal)]);
    (cal, out)
}

#[test]
fn calibration_recovers_spot_width() {
    let tmp = TempDir::new().unwrap();
    let (cal, out) = calibrate(tmp.path(), 100, 2000.0);
    ok(&out);
    let c = LsfCalibration::load(&cal).unwrap();
    let expected = SimConfig::default().sigma_sp_px();
    assert!((c.sigma_px / expected - 1.0).abs() < 0.02, "{}", c.sigma_px);
    assert!(c.profile_count >= 95, "{}", c.profile_count);
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert!(stdout.contains("samples") && stdout.contains("residual_rms"), "{stdout}");
}

#[test]
fn calibration_from_one_frame_warns() {
    let tmp = TempDir::new().unwrap();
    let (_, out) = calibrate(tmp.path(), 1, 2000.0);
    ok(&out);
    assert!(String::from_utf8_lossy(&out.stderr).contains("low confidence"));
}

#[test]
fn calibration_of_empty_directory_fails() {
    let tmp = TempDir::new().unwrap();
    let empty = tmp.path().join("empty");
    fs::create_dir(&empty).unwrap();
    let out = latticeloc(&["calibrate-lsf", s(&empty), "-o", s(&tmp.path().join("x.toml"))]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("no readable frames"));
}

#[test]
fn usage_errors_exit_with_one() {
    assert_eq!(latticeloc(&["bogus"]).status.code(), Some(1));
    assert_eq!(latticeloc(&["analyze"]).status.code(), Some(1));
    assert_eq!(latticeloc(&["--help"]).status.code(), Some(0));
    let tmp = TempDir::new().unwrap();
    let bad = tmp.path().join("bad.toml");
    fs::write(&bad, "no_such_key = 1\n").unwrap();
    let out = latticeloc(&["--config", s(&bad), "simulate", "-o", s(&tmp.path().join("o"))]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn config_from_environment() {
    let tmp = TempDir::new().unwrap();
    let cfg = tmp.path().join("run.toml");
    fs::write(&cfg, "seed = 4\n[simulate]\nsequences = 3\nframes_per_sequence = 2\n").unwrap();
    let out_dir = tmp.path().join("sim");
    let out = Command::new(env!("CARGO_BIN_EXE_latticeloc"))
        .args(["simulate", "-o", s(&out_dir)])
        .env("LATTICELOC_CONFIG", &cfg)
        .output()
        .unwrap();
    ok(&out);
    let m = read_manifest(&out_dir.join(MANIFEST_FILE)).unwrap();
    assert_eq!(m.seed, 4);
    assert_eq!(m.sequences.len(), 3);
    assert_eq!(m.sequences[0].frames.len(), 2);
    // flags win over the file
    let out = Command::new(env!("CARGO_BIN_EXE_latticeloc"))
        .args(["simulate", "-o", s(&out_dir), "--sequences", "2"])
        .env("LATTICELOC_CONFIG", &cfg)
        .output()
        .unwrap();
    ok(&out);
    assert_eq!(read_manifest(&out_dir.join(MANIFEST_FILE)).unwrap().sequences.len(), 2);
}

fn read_records(path: &Path) -> Vec<AtomRecord> {
    fs::read_to_string(path)
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect()
}

#[test]
fn analysis_matches_ground_truth_and_is_deterministic() {
    let tmp = TempDir::new().unwrap();
    let (cal, out) = calibrate(tmp.path(), 50, 20_000.0);
    ok(&out);
    let frames = tmp.path().join("campaign");
    let sim = ["simulate", "-o", s(&frames), "--sequences", "40", "--i-a", "20000", "--seed", "9"];
    ok(&latticeloc(&sim));
    fs::write(frames.join("broken.pgm"), b"P5\n10 10\n65535\nshort").unwrap();

    let a = tmp.path().join("a.jsonl");
    let b = tmp.path().join("b.jsonl");
    let out = latticeloc(&["--jobs", "1", "analyze", s(&frames), "-c", s(&cal), "-o", s(&a)]);
    ok(&out);
    assert!(String::from_utf8_lossy(&out.stderr).contains("broken"));
    ok(&latticeloc(&["--jobs", "4", "analyze", s(&frames), "-c", s(&cal), "-o", s(&b)]));
    assert_eq!(fs::read(&a).unwrap(), fs::read(&b).unwrap());

    let records = read_records(&a);
    let manifest = read_manifest(&frames.join(MANIFEST_FILE)).unwrap();
    let truth: std::collections::HashMap<String, Vec<f64>> = manifest
        .sequences
        .iter()
        .flat_map(|s| s.frames.iter())
        .map(|f| (f.frame_id.clone(), f.atoms.iter().map(|a| a.position_nm).collect()))
        .collect();
    let reliable: Vec<&AtomRecord> = records.iter().filter(|r| r.reliable).collect();
    assert!(reliable.len() as f64 >= 0.8 * records.len() as f64);
    let near = reliable
        .iter()
        .filter(|r| truth[&r.frame_id].iter().any(|x| (x - r.position_nm).abs() < 0.5 * 432.95))
        .count();
    assert!(near as f64 >= 0.95 * reliable.len() as f64, "{near}/{}", reliable.len());
}

fn record(seq: &str, frame: &str, roi: u32, x: f64) -> AtomRecord {
    AtomRecord {
        frame_id: frame.into(),
        sequence_id: seq.into(),
        roi_id: roi,
        position_nm: x,
        amplitude: 1.0,
        reliable: true,
        diagnostics: RecordDiagnostics {
            position_px: x / 294.6,
            roi_start: 0,
            roi_end: 10,
            roi_atoms: 1,
            count_estimate: 1.0,
            count_ambiguous: false,
            converged: true,
            residual_rms: 0.0,
            a0: 0.0,
        },
    }
}

fn write_records(path: &Path, records: &[AtomRecord]) {
    let text: String = records
        .iter()
        .map(|r| serde_json::to_string(r).unwrap() + "\n")
        .collect();
    fs::write(path, text).unwrap();
}

fn summary(dir: &Path) -> serde_json::Value {
    serde_json::from_str(&fs::read_to_string(dir.join("summary.json")).unwrap()).unwrap()
}

#[test]
fn stats_need_records() {
    let tmp = TempDir::new().unwrap();
    let path = tmp.path().join("one.jsonl");
    write_records(&path, &[record("s", "f0", 0, 1000.0)]);
    let out = latticeloc(&["stats", s(&path), "-o", s(&tmp.path().join("out"))]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("at least 2"));
}

#[test]
fn averaging_improves_reliability() {
    let site = LatticeCalib::default().site_nm();
    let noise = Normal::new(0.0, 130.0).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut records = Vec::new();
    for q in 0..400 {
        let seq = format!("s{q:04}");
        let mut n = 0i64;
        let sites: Vec<i64> = (0..3)
            .map(|_| {
                n += rng.random_range(1..5);
                n
            })
            .collect();
        for f in ["f0", "f1", "f2"] {
            for (k, n) in sites.iter().enumerate() {
                records.push(record(&seq, f, k as u32, *n as f64 * site + noise.sample(&mut rng)));
            }
        }
    }
    let tmp = TempDir::new().unwrap();
    let path = tmp.path().join("r.jsonl");
    write_records(&path, &records);
    let single = tmp.path().join("single");
    let averaged = tmp.path().join("averaged");
    ok(&latticeloc(&["stats", s(&path), "-o", s(&single), "--frames-required", "1", "--max-n", "6"]));
    ok(&latticeloc(&["stats", s(&path), "-o", s(&averaged), "--frames-required", "3", "--max-n", "6"]));
    assert!(averaged.join("averaged_histogram.csv").exists());
    assert!(!single.join("averaged_histogram.csv").exists());
    let csv = fs::read_to_string(single.join("single_histogram.csv")).unwrap();
    assert!(csv.starts_with("bin_center_nm,count,model_value\n"));

    let one = summary(&single)["single"]["peaks"].as_array().unwrap().clone();
    let three = summary(&averaged)["averaged"]["peaks"].as_array().unwrap().clone();
    let mut compared = 0;
    for (p, q) in one.iter().zip(&three) {
        if p["amplitude"].as_f64().unwrap() < 50.0 {
            continue;
        }
        let (f1, f3) = (p["f_n"].as_f64().unwrap(), q["f_n"].as_f64().unwrap());
        assert!(f3 >= f1, "n {}: {f3} < {f1}", p["n"]);
        compared += 1;
    }
    assert!(compared >= 4);
}

#[test]
fn pair_campaign_shows_the_gap() {
    let tmp = TempDir::new().unwrap();
    let (cal, out) = calibrate(tmp.path(), 50, 20_000.0);
    ok(&out);
    let frames = tmp.path().join("pairs");
    ok(&latticeloc(&[
        "simulate",
        "-o",
        s(&frames),
        "--fixed-atoms",
        "2",
        "--frames-per-sequence",
        "1",
        "--sequences",
        "400",
        "--i-a",
        "20000",
        "--seed",
        "11",
    ]));
    let recs = tmp.path().join("pairs.jsonl");
    ok(&latticeloc(&["analyze", s(&frames), "-c", s(&cal), "-o", s(&recs)]));
    let out_dir = tmp.path().join("stats");
    ok(&latticeloc(&["stats", s(&recs), "-o", s(&out_dir), "--frames-required", "1"]));
    let pair = summary(&out_dir)["pair"].clone();
    assert_eq!(pair["zero_site"].as_u64(), Some(0), "{pair}");
    assert!(pair["one_site"].as_u64().unwrap() > 0);
    assert!(pair["pairs"].as_u64().unwrap() > 300);
    // Gaussian tail: width near sqrt(2) times the loading width
    let expected = 2f64.sqrt() * SimConfig::default().loading_sigma_nm;
    assert!((pair["sigma_nm"].as_f64().unwrap() / expected - 1.0).abs() < 0.15, "{pair}");
    assert!(out_dir.join("pair_histogram.csv").exists());
}

#[test]
fn pipeline_is_deterministic_across_thread_counts() {
    let tmp = TempDir::new().unwrap();
    let (cal, out) = calibrate(tmp.path(), 20, 2000.0);
    ok(&out);
    let mut outputs = Vec::new();
    for jobs in ["1", "3"] {
        let dir = tmp.path().join(format!("run{jobs}"));
        let frames = dir.join("frames");
        ok(&latticeloc(&["-j", jobs, "simulate", "-o", s(&frames), "--sequences", "30", "--seed", "13"]));
        let recs = dir.join("r.jsonl");
        ok(&latticeloc(&["-j", jobs, "analyze", s(&frames), "-c", s(&cal), "-o", s(&recs)]));
        let stats = dir.join("stats");
        ok(&latticeloc(&["-j", jobs, "stats", s(&recs), "-o", s(&stats)]));
        let mut files: Vec<PathBuf> = fs::read_dir(&frames).unwrap().map(|e| e.unwrap().path()).collect();
        files.sort();
        let frame_bytes: Vec<Vec<u8>> = files.iter().map(|p| fs::read(p).unwrap()).collect();
        outputs.push((
            frame_bytes,
            fs::read(&recs).unwrap(),
            fs::read(stats.join("summary.json")).unwrap(),
            fs::read(stats.join("single_histogram.csv")).unwrap(),
        ));
    }
    assert!(outputs[0] == outputs[1]);
}
