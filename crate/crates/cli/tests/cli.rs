use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use planemeta::fusion::{
    fusion_report, read_pairs, sweep_threshold, uniform_grid, write_pairs, EntropyMode, FusionReport, PredictionPair,
    SweepResult,
};
use planemeta::ingest::{parse_nifti, read_manifest, ParseOptions};
use planemeta::models::TrainConfig;
use planemeta::preprocess::CleaningConfig;
use serde_json::Value;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_planemeta"))
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("binary runs")
}

fn ok(args: &[&str]) -> Output {
    let out = run(args);
    assert!(
        out.status.success(),
        "{args:?} failed\nstdout: {}\nstderr: {}",
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn s(p: &Path) -> &str {
    p.to_str().expect("utf-8 path")
}

#[derive(serde::Deserialize)]
struct Effective {
    preprocess: CleaningConfig,
    train: TrainConfig,
}

fn dry_run(args: &[&str]) -> Effective {
    let mut all = args.to_vec();
    all.push("--dry-run");
    toml::from_str(&String::from_utf8(ok(&all).stdout).unwrap()).unwrap()
}

fn json(path: &Path) -> Value {
    serde_json::from_str(&fs::read_to_string(path).unwrap()).unwrap()
}

#[test]
fn preprocess_defaults_equal_cleaning_defaults() {
    let cfg = dry_run(&["preprocess", "--input", "in", "--out", "out"]);
    assert_eq!(cfg.preprocess, CleaningConfig::default());
    let flagged = dry_run(&[
        "preprocess",
        "--input",
        "in",
        "--out",
        "out",
        "--stride",
        "10",
        "--mean-min",
        "0.1",
        "--coverage-min",
        "0.25",
        "--size",
        "224",
    ]);
    assert_eq!(flagged.preprocess, CleaningConfig::default());
}

#[test]
fn train_flags_reproduce_train_defaults() {
    let cfg = dry_run(&[
        "train",
        "--data",
        "d.csv",
        "--out",
        "o",
        "--context",
        "random",
        "--epochs",
        "30",
        "--lr",
        "0.001",
    ]);
    assert_eq!(cfg.train, TrainConfig::default());
    assert_eq!(
        dry_run(&["train", "--data", "d.csv", "--out", "o"]).train,
        TrainConfig::default()
    );
}

#[test]
fn flags_override_file_keys() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("c.toml");
    fs::write(
        &path,
        "schema_version = 1\nseed = 9\n[train]\nepochs = 5\nlearning_rate = 0.01\n",
    )
    .unwrap();
    let cfg = dry_run(&[
        "--config",
        s(&path),
        "train",
        "--data",
        "d.csv",
        "--out",
        "o",
        "--epochs",
        "7",
    ]);
    assert_eq!(cfg.train.epochs, 7);
    assert_eq!(cfg.train.learning_rate, 0.01);
    assert_eq!(cfg.train.seed, 9);
    let cfg = dry_run(&[
        "--config",
        s(&path),
        "--seed",
        "4",
        "train",
        "--data",
        "d.csv",
        "--out",
        "o",
    ]);
    assert_eq!(cfg.train.seed, 4);
}

#[test]
fn unknown_flag_exits_nonzero_with_usage() {
    let out = run(&["preprocess", "--input", "a", "--out", "b", "--strid", "3"]);
    assert!(!out.status.success());
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("Usage:"), "{err}");
    assert!(err.contains("--strid"), "{err}");
}

#[test]
fn malformed_config_reports_line_and_key() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("bad.toml");
    fs::write(&path, "schema_version = 1\n[train]\nepochs = \"ten\"\n").unwrap();
    let out = run(&["--config", s(&path), "train", "--data", "d.csv", "--out", "o"]);
    assert_eq!(out.status.code(), Some(3));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.starts_with("error[config]:"), "{err}");
    assert!(err.contains("bad.toml:3:"), "{err}");
    assert!(err.contains("train.epochs"), "{err}");
}

#[test]
fn unknown_config_key_is_an_error() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("typo.toml");
    fs::write(&path, "schema_version = 1\n[fusion]\ntaux = 0.3\n").unwrap();
    let out = run(&["--config", s(&path), "gate-eval", "--pairs", "p.csv", "--out", "o"]);
    assert_eq!(out.status.code(), Some(3));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("fusion.taux"), "{err}");
    fs::write(&path, "[train]\nepochs = 3\n").unwrap();
    let out = run(&["--config", s(&path), "train", "--data", "d.csv", "--out", "o"]);
    assert_eq!(out.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&out.stderr).contains("schema_version"));
}

fn phantoms(dir: &Path, count: usize, shape: &str) -> PathBuf {
    let out = dir.join("heads");
    ok(&[
        "phantom",
        "--out",
        s(&out),
        "--count",
        &count.to_string(),
        "--shape",
        shape,
        "--seed",
        "100",
    ]);
    out
}

#[test]
fn stride_one_samples_every_slice() {
    let dir = tempfile::tempdir().unwrap();
    let heads = phantoms(dir.path(), 1, "20,22,18");
    let out = dir.path().join("data");
    ok(&[
        "preprocess",
        "--input",
        s(&heads),
        "--out",
        s(&out),
        "--stride",
        "1",
        "--size",
        "16",
    ]);
    let report = json(&out.join("report.json"));
    let total = report["kept"].as_u64().unwrap() + report["discarded"].as_u64().unwrap();
    assert_eq!(total, 20 + 22 + 18);
}

/// Opening with a (2r+1)³ cube by direct neighbourhood scans; outside counts as background.
fn open_brute(mask: &[bool], dim: [usize; 3], r: i64) -> Vec<bool> {
    let idx = |x: usize, y: usize, z: usize| (x * dim[1] + y) * dim[2] + z;
    let scan = |src: &[bool], all: bool| {
        let mut dst = vec![false; src.len()];
        for x in 0..dim[0] {
            for y in 0..dim[1] {
                for z in 0..dim[2] {
                    let mut hit = all;
                    for dx in -r..=r {
                        for dy in -r..=r {
                            for dz in -r..=r {
                                let (a, b, c) = (x as i64 + dx, y as i64 + dy, z as i64 + dz);
                                let inside = a >= 0
                                    && b >= 0
                                    && c >= 0
                                    && (a as usize) < dim[0]
                                    && (b as usize) < dim[1]
                                    && (c as usize) < dim[2];
                                let v = inside && src[idx(a as usize, b as usize, c as usize)];
                                if all {
                                    hit &= v
                                } else {
                                    hit |= v
                                }
                            }
                        }
                    }
                    dst[idx(x, y, z)] = hit;
                }
            }
        }
        dst
    };
    scan(&scan(mask, true), false)
}

/// Slices kept per volume, counted directly from voxels.
fn recount(path: &Path, cfg: &CleaningConfig) -> usize {
    let vol = parse_nifti(path, &ParseOptions::default()).unwrap();
    let v = vol.voxels();
    let (nx, ny, nz) = v.dim();
    let dim = [nx, ny, nz];
    let raw: Vec<f32> = v.iter().copied().collect();
    let mask: Vec<bool> = raw.iter().map(|&x| x > cfg.foreground_threshold).collect();
    let opened = open_brute(&mask, dim, cfg.opening_radius as i64);
    let at = |x: usize, y: usize, z: usize| {
        let i = (x * ny + y) * nz + z;
        if opened[i] {
            raw[i]
        } else {
            0.0
        }
    };
    let mut kept = 0;
    for axis in 0..3 {
        for k in (0..dim[axis]).step_by(cfg.sample_stride) {
            let mut values = Vec::new();
            for x in 0..nx {
                for y in 0..ny {
                    for z in 0..nz {
                        if [x, y, z][axis] == k {
                            values.push(at(x, y, z));
                        }
                    }
                }
            }
            let n = values.len() as f64;
            let mean = values.iter().map(|&x| x as f64).sum::<f64>() / n;
            let cover = values.iter().filter(|&&x| x > cfg.foreground_threshold).count() as f64 / n;
            if mean > cfg.mean_intensity_min as f64 && cover > cfg.coverage_min as f64 {
                kept += 1;
            }
        }
    }
    kept
}

#[test]
fn manifest_rows_match_brute_force_recount() {
    let dir = tempfile::tempdir().unwrap();
    let heads = phantoms(dir.path(), 10, "48,52,46");
    let out = dir.path().join("data");
    ok(&[
        "preprocess",
        "--input",
        s(&heads),
        "--out",
        s(&out),
        "--stride",
        "4",
        "--size",
        "32",
    ]);
    let cfg = CleaningConfig {
        sample_stride: 4,
        target_size: 32,
        ..Default::default()
    };
    let mut files: Vec<PathBuf> = fs::read_dir(&heads)
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| p.to_string_lossy().ends_with(".nii.gz"))
        .collect();
    files.sort();
    assert_eq!(files.len(), 10);
    let expected: usize = files.iter().map(|f| recount(f, &cfg)).sum();
    let rows = read_manifest(&out.join("manifest.csv")).unwrap();
    assert_eq!(rows.len(), expected);
    assert!(expected > 0);
}

fn file_bytes(dir: &Path) -> Vec<(PathBuf, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else if p.file_name().unwrap() != "run_manifest.json" {
                out.push((p.strip_prefix(dir).unwrap().to_path_buf(), fs::read(&p).unwrap()));
            }
        }
    }
    out.sort();
    out
}

#[test]
fn preprocess_is_idempotent_and_config_round_trips() {
    let dir = tempfile::tempdir().unwrap();
    let heads = phantoms(dir.path(), 2, "32,34,30");
    let a = dir.path().join("a");
    let flags = [
        "--stride",
        "5",
        "--size",
        "24",
        "--mean-min",
        "0.05",
        "--coverage-min",
        "0.2",
        "--opening-radius",
        "2",
    ];
    let mut args = vec!["preprocess", "--input", s(&heads), "--out", s(&a)];
    args.extend(flags);
    ok(&args);
    let first = file_bytes(&a);
    ok(&args);
    assert_eq!(file_bytes(&a), first);

    let b = dir.path().join("b");
    let cfg = a.join("config.toml");
    ok(&["--config", s(&cfg), "preprocess", "--input", s(&heads), "--out", s(&b)]);
    assert_eq!(file_bytes(&b), first);
}

#[test]
fn run_manifest_records_inputs_outputs_and_metrics() {
    let dir = tempfile::tempdir().unwrap();
    let heads = phantoms(dir.path(), 2, "32,34,30");
    let out = dir.path().join("data");
    ok(&[
        "--seed",
        "3",
        "preprocess",
        "--input",
        s(&heads),
        "--out",
        s(&out),
        "--size",
        "24",
    ]);
    let m = json(&out.join("run_manifest.json"));
    assert_eq!(m["command"], "preprocess");
    assert_eq!(m["seed"], 3);
    assert_eq!(m["config"]["schema_version"], 1);
    assert_eq!(m["config"]["preprocess"]["target_size"], 24);
    assert_eq!(m["tool_version"], env!("CARGO_PKG_VERSION"));
    assert_eq!(m["inputs"][0]["role"], "input");
    assert_eq!(m["inputs"][0]["sha256"].as_str().unwrap().len(), 64);
    let roles: Vec<&str> = m["outputs"]
        .as_array()
        .unwrap()
        .iter()
        .map(|o| o["role"].as_str().unwrap())
        .collect();
    assert_eq!(roles, ["dataset", "report", "config"]);
    assert!(m["wall_clock_secs"].as_f64().unwrap() >= 0.0);
    assert_eq!(m["metrics"]["sources"], 2);
}

/// Deterministic pseudo-random pairs over four classes, including one-hot and uniform members.
fn synthetic_pairs(n: usize) -> Vec<PredictionPair> {
    let mut state = 0x9e37_79b9_7f4a_7c15u64;
    let mut next = move || {
        state = state
            .wrapping_mul(6364136223846793005)
            .wrapping_add(1442695040888963407);
        ((state >> 11) as f64) / ((1u64 << 53) as f64)
    };
    let simplex = |next: &mut dyn FnMut() -> f64| {
        let w: Vec<f64> = (0..4).map(|_| next().powi(3) + 1e-12).collect();
        let t: f64 = w.iter().sum();
        w.into_iter().map(|x| x / t).collect::<Vec<f64>>()
    };
    (0..n)
        .map(|i| {
            let meta = match i % 50 {
                0 => vec![0.0, 1.0, 0.0, 0.0],
                1 => vec![0.25; 4],
                _ => simplex(&mut next),
            };
            PredictionPair {
                record_id: format!("r{i:05}"),
                image_probs: simplex(&mut next),
                meta_probs: meta,
                truth: (next() * 4.0) as usize,
            }
        })
        .collect()
}

#[test]
fn offline_sweep_and_gate_match_the_library() {
    let dir = tempfile::tempdir().unwrap();
    let pairs_path = dir.path().join("pairs.csv");
    write_pairs(&pairs_path, &synthetic_pairs(2000)).unwrap();
    let pairs = read_pairs(&pairs_path).unwrap();
    for mode in [EntropyMode::Normalized, EntropyMode::RawNats] {
        let sw = dir.path().join(format!("sweep_{mode}"));
        ok(&[
            "sweep",
            "--pairs",
            s(&pairs_path),
            "--out",
            s(&sw),
            "--grid",
            "101",
            "--entropy",
            &mode.to_string(),
        ]);
        let got: SweepResult = serde_json::from_value(json(&sw.join("sweep.json"))).unwrap();
        let want = sweep_threshold(&pairs, &uniform_grid(101), mode).unwrap();
        assert_eq!(got, want);

        let ge = dir.path().join(format!("gate_{mode}"));
        ok(&[
            "gate-eval",
            "--pairs",
            s(&pairs_path),
            "--sweep",
            s(&sw.join("sweep.json")),
            "--out",
            s(&ge),
        ]);
        let got: FusionReport = serde_json::from_value(json(&ge.join("fusion_report.json"))).unwrap();
        assert_eq!(got, fusion_report(&pairs, want.best_tau, mode).unwrap());
    }
    let ge = dir.path().join("gate_fixed");
    ok(&["gate-eval", "--pairs", s(&pairs_path), "--tau", "0.35", "--out", s(&ge)]);
    let got: FusionReport = serde_json::from_value(json(&ge.join("fusion_report.json"))).unwrap();
    assert_eq!(got, fusion_report(&pairs, 0.35, EntropyMode::Normalized).unwrap());
}

#[test]
fn plane_workflow_runs_end_to_end() {
    let dir = tempfile::tempdir().unwrap();
    let d = |name: &str| dir.path().join(name);
    let heads = phantoms(dir.path(), 6, "32,34,30");
    ok(&[
        "preprocess",
        "--input",
        s(&heads),
        "--out",
        s(&d("data")),
        "--stride",
        "3",
        "--size",
        "32",
    ]);
    ok(&[
        "split",
        "--data",
        s(&d("data/manifest.csv")),
        "--fractions",
        "0.5,0.25,0.25",
    ]);
    for part in ["train", "val", "test"] {
        assert!(
            !read_manifest(&d(&format!("data/{part}.csv"))).unwrap().is_empty(),
            "{part}"
        );
    }
    ok(&[
        "train",
        "--data",
        s(&d("data/train.csv")),
        "--val",
        s(&d("data/val.csv")),
        "--out",
        s(&d("plane")),
        "--epochs",
        "1",
        "--batch-size",
        "16",
    ]);
    let history = json(&d("plane/history.json"));
    assert_eq!(history.as_array().unwrap().len(), 1);
    ok(&[
        "evaluate",
        "--model",
        s(&d("plane")),
        "--data",
        s(&d("data/test.csv")),
        "--out",
        s(&d("eval")),
    ]);
    let acc = json(&d("eval/metrics.json"))["metrics"]["accuracy"].as_f64().unwrap();
    assert!((0.0..=1.0).contains(&acc));
    ok(&[
        "export",
        "--model",
        s(&d("plane")),
        "--data",
        s(&d("data/test.csv")),
        "--out",
        s(&d("bundle")),
        "--fixtures",
        "3",
    ]);
    let report = json(&d("bundle/export_report.json"));
    assert_eq!(report["fixtures"], 3);
    assert!(report["max_abs_diff_native"].as_f64().unwrap() < 1e-5);
    ok(&[
        "explain",
        "--model",
        s(&d("plane")),
        "--data",
        s(&d("data/test.csv")),
        "--out",
        s(&d("explain")),
        "--k",
        "2",
    ]);
    assert!(d("explain/gallery.png").is_file());
    let errors = json(&d("explain/errors.json"));
    for e in errors["plane"].as_array().unwrap() {
        assert!(d("explain").join(e["overlay"].as_str().unwrap()).is_file());
        assert!(d("explain").join(e["heatmap"].as_str().unwrap()).is_file());
    }
}

#[test]
fn metadata_model_without_plane_model_is_a_config_error() {
    let dir = tempfile::tempdir().unwrap();
    let d = |name: &str| dir.path().join(name);
    ok(&[
        "phantom",
        "--kind",
        "lesion",
        "--out",
        s(&d("les")),
        "--count",
        "8",
        "--shape",
        "32,34,30",
        "--size",
        "32",
        "--stride",
        "3",
    ]);
    let data = d("les/manifest.csv");
    ok(&[
        "train",
        "--data",
        s(&data),
        "--out",
        s(&d("plane")),
        "--epochs",
        "1",
        "--batch-size",
        "16",
        "--val-frac",
        "0.25",
    ]);
    ok(&[
        "train",
        "--task",
        "tumor",
        "--data",
        s(&data),
        "--out",
        s(&d("meta")),
        "--epochs",
        "1",
        "--batch-size",
        "16",
        "--context",
        "2d",
        "--plane-model",
        s(&d("plane")),
        "--val-frac",
        "0.25",
    ]);
    assert_eq!(
        json(&d("meta/meta.json"))["inputs"],
        serde_json::json!(["input", "plane"])
    );
    let out = run(&[
        "evaluate",
        "--model",
        s(&d("meta")),
        "--data",
        s(&data),
        "--out",
        s(&d("ev")),
    ]);
    assert_eq!(out.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&out.stderr).contains("--plane-model"));
    ok(&[
        "evaluate",
        "--model",
        s(&d("meta")),
        "--plane-model",
        s(&d("plane")),
        "--data",
        s(&data),
        "--out",
        s(&d("ev")),
    ]);
}

#[test]
fn missing_input_is_an_input_error() {
    let dir = tempfile::tempdir().unwrap();
    let out = run(&[
        "preprocess",
        "--input",
        s(&dir.path().join("nope")),
        "--out",
        s(&dir.path().join("o")),
    ]);
    assert_eq!(out.status.code(), Some(4));
    assert!(String::from_utf8_lossy(&out.stderr).starts_with("error[input]:"));
}

#[test]
fn unexportable_input_size_fails_before_training() {
    let dir = tempfile::tempdir().unwrap();
    let d = |name: &str| dir.path().join(name);
    let heads = phantoms(dir.path(), 2, "32,34,30");
    ok(&[
        "preprocess",
        "--input",
        s(&heads),
        "--out",
        s(&d("data")),
        "--stride",
        "6",
        "--size",
        "24",
    ]);
    let out = run(&[
        "train",
        "--data",
        s(&d("data/manifest.csv")),
        "--out",
        s(&d("m")),
        "--epochs",
        "1",
    ]);
    assert_eq!(out.status.code(), Some(6));
    assert!(out.stdout.is_empty(), "{}", String::from_utf8_lossy(&out.stdout));
    assert!(String::from_utf8_lossy(&out.stderr).contains("uneven"));
}
