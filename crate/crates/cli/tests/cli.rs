use std::fs;
use std::path::{Path, PathBuf};
use std::process::Command;

use predseg::bench::{GroundTruthEntry, GroundTruthIndex};
use predseg::image_io::{save_binary_png, save_rgb_png};
use predseg::segment::{ContourMap, SegmentConfig};
use predseg::synthetic::two_region_image;
use predseg_cli::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_predseg"));
    c.env("PREDSEG_LOG", "warn");
    c
}

/// Writes `n` small two-region PNGs into `dir`.
fn write_corpus(dir: &Path, n: usize, side: usize) {
    fs::create_dir_all(dir).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for i in 0..n {
        let img = two_region_image(side, side, 0.3, 0.05, &mut rng).unwrap();
        save_rgb_png(&img.image.pixels, dir.join(format!("img{i:02}.png"))).unwrap();
    }
}

fn write_config(dir: &Path, extra: serde_json::Value) -> PathBuf {
    let mut v = serde_json::json!({
        "schema_version": 1,
        "architecture": "pixel",
        "neighborhood": 4,
        "alpha": 0.1,
        "loss": "position",
        "corpus": "corpus",
        "output": "run",
        "epochs": 2,
        "batch_size": 2,
        "crop": 16,
        "negatives": 4,
        "repetitions": 2,
        "seed": 17
    });
    for (k, val) in extra.as_object().unwrap() {
        v[k] = val.clone();
    }
    let path = dir.join("config.json");
    fs::write(&path, serde_json::to_string_pretty(&v).unwrap()).unwrap();
    path
}

fn trained_checkpoint(dir: &Path) -> PathBuf {
    write_corpus(&dir.join("corpus"), 3, 24);
    let cfg = write_config(dir, serde_json::json!({"epochs": 1}));
    let report = cmd_train(&cfg, &TrainOverrides::default()).unwrap();
    report.checkpoints.last().unwrap().clone()
}

#[test]
fn train_writes_checkpoint_manifest_and_metrics() {
    let tmp = tempfile::tempdir().unwrap();
    write_corpus(&tmp.path().join("corpus"), 5, 24);
    let cfg = write_config(tmp.path(), serde_json::json!({}));
    let report = cmd_train(&cfg, &TrainOverrides::default()).unwrap();
    let run = tmp.path().join("run");
    assert_eq!(report.epochs_completed, 2);
    assert_eq!(report.steps, 6);
    assert!(run.join("checkpoints/epoch-0002/manifest.json").is_file());

    let echoed = RunConfig::load(run.join("config.json")).unwrap();
    let original = RunConfig::load(&cfg).unwrap();
    assert_eq!(echoed, original);
    let manifest: serde_json::Value = serde_json::from_slice(&fs::read(run.join("manifest.json")).unwrap()).unwrap();
    let expected = serde_json::to_value(original.train_config().unwrap()).unwrap();
    assert_eq!(manifest["config"], expected);

    let metrics = fs::read_to_string(run.join("metrics.csv")).unwrap();
    assert_eq!(metrics.lines().count(), 7);
    assert_eq!(metrics.lines().next(), Some("step,epoch,loss"));
}

#[test]
fn rerun_gives_identical_metrics() {
    let tmp = tempfile::tempdir().unwrap();
    write_corpus(&tmp.path().join("corpus"), 4, 20);
    let cfg = write_config(tmp.path(), serde_json::json!({"loss": "factor"}));
    let a = tmp.path().join("a");
    let b = tmp.path().join("b");
    cmd_train(&cfg, &TrainOverrides { seed: None, output: Some(a.clone()) }).unwrap();
    cmd_train(&cfg, &TrainOverrides { seed: None, output: Some(b.clone()) }).unwrap();
    assert_eq!(fs::read(a.join("metrics.csv")).unwrap(), fs::read(b.join("metrics.csv")).unwrap());
    assert_eq!(fs::read(a.join("manifest.json")).unwrap(), fs::read(b.join("manifest.json")).unwrap());
    let c = tmp.path().join("c");
    cmd_train(&cfg, &TrainOverrides { seed: Some(18), output: Some(c.clone()) }).unwrap();
    assert_ne!(fs::read(a.join("metrics.csv")).unwrap(), fs::read(c.join("metrics.csv")).unwrap());
}

#[test]
fn missing_corpus_exits_2_naming_the_path() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), serde_json::json!({"corpus": "nowhere"}));
    let out = bin().args(["train", "--config"]).arg(&cfg).output().unwrap();
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("nowhere"));
}

#[test]
fn bad_config_exits_1() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), serde_json::json!({"surprise": 1}));
    let out = bin().args(["train", "--config"]).arg(&cfg).output().unwrap();
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("surprise"));
    let out = bin().args(["train", "--config", "/no/such/config.json"]).output().unwrap();
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn binary_trains_with_seed_and_out_overrides() {
    let tmp = tempfile::tempdir().unwrap();
    write_corpus(&tmp.path().join("corpus"), 2, 16);
    let cfg = write_config(tmp.path(), serde_json::json!({"epochs": 1}));
    let out_dir = tmp.path().join("elsewhere");
    let out = bin()
        .args(["--threads", "1", "train", "--seed", "99", "--config"])
        .arg(&cfg)
        .arg("--out")
        .arg(&out_dir)
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let echoed = RunConfig::load(out_dir.join("config.json")).unwrap();
    assert_eq!(echoed.seed, 99);
    assert!(out_dir.join("metrics.csv").is_file());
}

#[test]
fn contours_are_named_per_head() {
    let tmp = tempfile::tempdir().unwrap();
    let ckpt = trained_checkpoint(tmp.path());
    let cfg = SegmentConfig {
        eigenvectors: 5,
        ..SegmentConfig::default()
    };
    let single = tmp.path().join("corpus/img01.png");
    let out = tmp.path().join("single");
    let written = cmd_contours(&ckpt, &single, &out, None, &cfg).unwrap();
    assert_eq!(written, vec![out.join("img01.head0.png"), out.join("img01.head0.pstf")]);
    let c = ContourMap::from_tensor(&predseg::tensor::read_tensor(&written[1]).unwrap()).unwrap();
    assert_eq!((c.height, c.width), (24, 24));

    let all = tmp.path().join("all");
    let written = cmd_contours(&ckpt, &tmp.path().join("corpus"), &all, Some(0), &cfg).unwrap();
    assert_eq!(written.len(), 3 * 2);
    assert!(cmd_contours(&ckpt, &single, &all, Some(1), &cfg).is_err());
}

#[test]
fn binary_contours_and_connectivity() {
    let tmp = tempfile::tempdir().unwrap();
    let ckpt = trained_checkpoint(tmp.path());
    let out = tmp.path().join("c");
    let status = bin()
        .args(["contours", "--eigenvectors", "4", "--checkpoint"])
        .arg(&ckpt)
        .arg("--input")
        .arg(tmp.path().join("corpus/img00.png"))
        .arg("--out")
        .arg(&out)
        .status()
        .unwrap();
    assert!(status.success());
    assert!(out.join("img00.head0.png").is_file());

    let conn = tmp.path().join("conn");
    let written = cmd_connectivity(&ckpt, &tmp.path().join("corpus"), &conn, None).unwrap();
    assert_eq!(written.len(), 3);
    let cm = predseg::mrf::ConnectivityMap::load(&written[0]).unwrap();
    assert_eq!(cm.offsets, vec![(0, 1), (1, 0)]);
    assert_eq!((cm.height, cm.width), (24, 24));
}

#[test]
fn corrupted_checkpoint_exits_3() {
    let tmp = tempfile::tempdir().unwrap();
    let ckpt = trained_checkpoint(tmp.path());
    let tensor = ckpt.join("head0.log_c.pstf");
    let mut bytes = fs::read(&tensor).unwrap();
    let last = bytes.len() - 1;
    bytes[last] ^= 0x55;
    fs::write(&tensor, bytes).unwrap();
    let out = bin()
        .args(["contours", "--checkpoint"])
        .arg(&ckpt)
        .arg("--input")
        .arg(tmp.path().join("corpus"))
        .arg("--out")
        .arg(tmp.path().join("o"))
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(3), "{}", String::from_utf8_lossy(&out.stderr));

    let missing = bin()
        .args(["contours", "--checkpoint"])
        .arg(tmp.path().join("no-checkpoint"))
        .arg("--input")
        .arg(tmp.path().join("corpus"))
        .arg("--out")
        .arg(tmp.path().join("o"))
        .status()
        .unwrap();
    assert_eq!(missing.code(), Some(2));
}

/// A ground-truth directory plus matching perfect contour maps.
fn perfect_fixture(root: &Path, ids: &[&str]) -> (PathBuf, PathBuf) {
    let gt = root.join("gt");
    let contours = root.join("contours");
    fs::create_dir_all(&gt).unwrap();
    fs::create_dir_all(&contours).unwrap();
    let (h, w) = (30, 40);
    let mut images = Vec::new();
    for (k, id) in ids.iter().enumerate() {
        // one vertical and one horizontal straight line: invariant under thinning
        let map: Vec<bool> = (0..h * w).map(|i| i % w == 10 + k || i / w == 20).collect();
        let name = format!("{id}.png");
        save_binary_png(&map, h, w, gt.join(&name)).unwrap();
        images.push(GroundTruthEntry {
            id: id.to_string(),
            annotators: vec![name],
        });
        let c = ContourMap {
            height: h,
            width: w,
            values: map.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect(),
        };
        if k % 2 == 0 {
            c.save_pstf(contours.join(format!("{id}.head0.pstf"))).unwrap();
        } else {
            c.save_png(contours.join(format!("{id}.png"))).unwrap();
        }
    }
    GroundTruthIndex {
        schema_version: 1,
        images,
    }
    .write(&gt)
    .unwrap();
    (contours, gt)
}

#[test]
fn eval_of_a_perfect_prediction() {
    let tmp = tempfile::tempdir().unwrap();
    let (contours, gt) = perfect_fixture(tmp.path(), &["a", "b", "c"]);
    let out = tmp.path().join("eval");
    let status = bin()
        .args(["eval", "--contours"])
        .arg(&contours)
        .arg("--gt")
        .arg(&gt)
        .arg("--out")
        .arg(&out)
        .status()
        .unwrap();
    assert!(status.success());
    let json: serde_json::Value = serde_json::from_slice(&fs::read(out.join(BENCH_JSON)).unwrap()).unwrap();
    for key in ["F_ODS", "F_OIS", "AP"] {
        assert_eq!(json[key], serde_json::json!(1.0), "{key}");
    }
    let csv = fs::read_to_string(out.join(PR_CSV)).unwrap();
    assert_eq!(csv.lines().count(), 1 + predseg::bench::DEFAULT_THRESHOLDS);
    assert!(fs::read_to_string(out.join(PR_SVG)).unwrap().starts_with("<svg"));

    let plot = tmp.path().join("plots/both.svg");
    let status = bin()
        .arg("pr-plot")
        .arg(format!("{}=mine", out.join(PR_CSV).display()))
        .arg(out.join(PR_CSV))
        .arg("--out")
        .arg(&plot)
        .status()
        .unwrap();
    assert!(status.success());
    let svg = fs::read_to_string(&plot).unwrap();
    assert!(svg.contains("mine") && svg.contains("eval"));
}

#[test]
fn eval_failures() {
    let tmp = tempfile::tempdir().unwrap();
    let (contours, gt) = perfect_fixture(tmp.path(), &["a", "b"]);
    let empty = tmp.path().join("empty");
    fs::create_dir_all(&empty).unwrap();
    let out = bin()
        .args(["eval", "--contours"])
        .arg(&empty)
        .arg("--gt")
        .arg(&gt)
        .arg("--out")
        .arg(tmp.path().join("o"))
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));

    fs::remove_file(contours.join("a.head0.pstf")).unwrap();
    ContourMap {
        height: 30,
        width: 40,
        values: vec![0.0; 1200],
    }
    .save_pstf(contours.join("stray.pstf"))
    .unwrap();
    let err = cmd_eval(&contours, &gt, &tmp.path().join("o"), &EvalOptions::default()).unwrap_err();
    let msg = err.to_string();
    assert!(msg.contains("[a]") && msg.contains("[stray]"), "{msg}");
    assert_eq!(exit_code(&err), 1);

    let err = cmd_eval(&contours, &tmp.path().join("no-gt"), &tmp.path().join("o"), &EvalOptions::default()).unwrap_err();
    assert_eq!(exit_code(&err), 2);
}

#[test]
fn help_documents_every_verb_and_flag() {
    let out = bin().arg("--help").output().unwrap();
    let text = String::from_utf8_lossy(&out.stdout);
    for verb in ["train", "connectivity", "contours", "eval", "pr-plot", "--threads", "PREDSEG_LOG"] {
        assert!(text.contains(verb), "missing {verb}");
    }
    let out = bin().args(["train", "--help"]).output().unwrap();
    let text = String::from_utf8_lossy(&out.stdout);
    for flag in ["--config", "--seed", "--out"] {
        assert!(text.contains(flag), "missing {flag}");
    }
}
