//! End-to-end runs of the binary: generate data, train tiny models, dehaze,
//! evaluate and sweep, plus the exit-code contract for bad invocations.

use std::fs;
use std::path::PathBuf;
use std::process::Command;
use std::sync::OnceLock;

use tempfile::TempDir;

fn run(args: &[&str], envs: &[(&str, &str)]) -> (i32, String, String) {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_echodehaze"));
    cmd.args(args).env_remove("ECHODEHAZE_OUT");
    for (k, v) in envs {
        cmd.env(k, v);
    }
    let out = cmd.output().expect("spawn echodehaze");
    (
        out.status.code().unwrap_or(-1),
        String::from_utf8_lossy(&out.stdout).into_owned(),
        String::from_utf8_lossy(&out.stderr).into_owned(),
    )
}

/// Small settings so training and sampling stay in test-suite territory.
const FAST_CFG: &str = "guidance.steps = 6\n\
    train.steps = 3\n\
    train.batch_size = 2\n\
    train.lambda_kid = 0\n\
    seg_train.steps = 25\n\
    seg_train.batch_size = 2\n";

struct Fixture {
    dir: TempDir,
    data: PathBuf,
    ckpt: PathBuf,
    cfg: PathBuf,
}

static FIXTURE: OnceLock<Fixture> = OnceLock::new();

/// One phantom dataset and one briefly-trained prior shared by the tests.
fn fixture() -> &'static Fixture {
    FIXTURE.get_or_init(|| {
        let dir = tempfile::tempdir().expect("tempdir");
        let data = dir.path().join("data");
        let cfg = dir.path().join("run.cfg");
        fs::write(&cfg, FAST_CFG).unwrap();
        let (code, out, err) = run(
            &[
                "phantom", "generate", "--count", "4", "--size", "32x32", "--seed", "9",
                "--out", data.to_str().unwrap(),
            ],
            &[],
        );
        assert_eq!(code, 0, "phantom generate failed:\n{out}\n{err}");
        let ckpt = dir.path().join("prior.ckpt");
        let (code, out, err) = run(
            &[
                "train-diffusion", "--data", data.to_str().unwrap(),
                "--config", cfg.to_str().unwrap(), "--out", ckpt.to_str().unwrap(),
            ],
            &[],
        );
        assert_eq!(code, 0, "train-diffusion failed:\n{out}\n{err}");
        assert!(ckpt.is_file());
        Fixture { dir, data, ckpt, cfg }
    })
}

#[test]
fn dehaze_directory_then_evaluate() {
    let f = fixture();
    let run_dir = f.dir.path().join("run");
    let args = [
        "dehaze", "--input", f.data.to_str().unwrap(), "--ckpt", f.ckpt.to_str().unwrap(),
        "--config", f.cfg.to_str().unwrap(), "--seed", "5", "--out", run_dir.to_str().unwrap(),
    ];
    let (code, out, err) = run(&args, &[]);
    assert_eq!(code, 0, "dehaze failed:\n{out}\n{err}");
    assert!(out.contains("4 image(s) done"), "unexpected stdout: {out}");
    for rel in [
        "dehazed/0000.png",
        "dehazed_f32/0000.f32",
        "haze/0000.png",
        "haze/0000.txt",
        "guidance/0000.f32",
        "manifest.txt",
        "metrics/0000.txt",
        "metrics/aggregate.txt",
    ] {
        assert!(run_dir.join(rel).is_file(), "missing {rel}");
    }

    // identical rerun reuses every image via the manifest
    let (code, out, _) = run(&args, &[]);
    assert_eq!(code, 0);
    assert!(out.contains("(4 reused)"), "rerun did not reuse: {out}");

    let report = f.dir.path().join("report.txt");
    let (code, out, err) = run(
        &[
            "evaluate",
            "--dehazed", run_dir.join("dehazed_f32").to_str().unwrap(),
            "--reference", f.data.to_str().unwrap(),
            "--masks", f.data.join("masks").to_str().unwrap(),
            "--config", f.cfg.to_str().unwrap(),
            "--out", report.to_str().unwrap(),
        ],
        &[],
    );
    assert_eq!(code, 0, "evaluate failed:\n{out}\n{err}");
    let text = fs::read_to_string(&report).unwrap();
    assert!(text.contains("name = 0000\n"));
    assert!(text.contains("name = aggregate\n"));
    assert!(text.contains("final_score = "));
}

#[test]
fn segment_and_single_image_dehaze() {
    let f = fixture();
    let seg_ckpt = f.dir.path().join("seg.ckpt");
    let (code, out, err) = run(
        &[
            "train-segmenter", "--data", f.data.to_str().unwrap(),
            "--config", f.cfg.to_str().unwrap(), "--seed", "3",
            "--out", seg_ckpt.to_str().unwrap(),
        ],
        &[],
    );
    assert_eq!(code, 0, "train-segmenter failed:\n{out}\n{err}");

    let cfg2 = f.dir.path().join("seg.cfg");
    fs::write(&cfg2, format!("{FAST_CFG}paths.seg_checkpoint = {}\n", seg_ckpt.display())).unwrap();

    let map = f.dir.path().join("segout").join("precision.f32");
    let input = f.data.join("hazy").join("0000.png");
    let (code, out, err) = run(
        &[
            "segment", "--input", input.to_str().unwrap(),
            "--config", cfg2.to_str().unwrap(), "--out-map", map.to_str().unwrap(),
        ],
        &[],
    );
    assert_eq!(code, 0, "segment failed:\n{out}\n{err}");
    assert!(map.is_file());
    for panel in ["ventricle", "septum", "skeleton", "background", "precision"] {
        let p = f.dir.path().join("segout").join("debug").join(format!("{panel}.png"));
        assert!(p.is_file(), "missing debug panel {panel}");
    }

    let run2 = f.dir.path().join("single");
    let (code, out, err) = run(
        &[
            "dehaze", "--input", input.to_str().unwrap(), "--ckpt", f.ckpt.to_str().unwrap(),
            "--config", cfg2.to_str().unwrap(), "--out", run2.to_str().unwrap(),
        ],
        &[],
    );
    assert_eq!(code, 0, "single-image dehaze failed:\n{out}\n{err}");
    assert!(out.contains("metrics skipped"));
    assert!(run2.join("dehazed").join("0000.png").is_file());
    assert!(run2.join("dehazed_f32").join("0000.f32").is_file());
}

#[test]
fn single_image_without_segmenter_is_config_error() {
    let f = fixture();
    let input = f.data.join("hazy").join("0000.png");
    let (code, _, err) = run(
        &[
            "dehaze", "--input", input.to_str().unwrap(), "--ckpt", f.ckpt.to_str().unwrap(),
            "--config", f.cfg.to_str().unwrap(), "--out", f.dir.path().join("x").to_str().unwrap(),
        ],
        &[],
    );
    assert_eq!(code, 2, "expected config error: {err}");
    assert!(err.contains("seg_checkpoint"), "unexpected stderr: {err}");
}

#[test]
fn sweep_reports_best_trial() {
    let f = fixture();
    let cfg3 = f.dir.path().join("sweep.cfg");
    fs::write(
        &cfg3,
        format!("{FAST_CFG}sweep.trials = 2\nsweep.eta_min = 0.001\nsweep.eta_max = 0.01\n"),
    )
    .unwrap();
    let sw = f.dir.path().join("sw");
    let (code, out, err) = run(
        &[
            "sweep", "--data", f.data.to_str().unwrap(), "--ckpt", f.ckpt.to_str().unwrap(),
            "--config", cfg3.to_str().unwrap(), "--seed", "11", "--out", sw.to_str().unwrap(),
        ],
        &[],
    );
    assert_eq!(code, 0, "sweep failed:\n{out}\n{err}");
    assert!(out.contains("best: trial"), "unexpected stdout: {out}");
    assert!(sw.join("sweep.txt").is_file());
    assert!(sw.join("trials").join("000.txt").is_file());
}

#[test]
fn missing_out_is_config_error() {
    let dir = tempfile::tempdir().unwrap();
    let (code, _, err) = run(
        &["phantom", "generate", "--count", "1", "--size", "32x32"],
        &[("TMPDIR", dir.path().to_str().unwrap())],
    );
    assert_eq!(code, 2, "stderr: {err}");
    assert!(err.contains("ECHODEHAZE_OUT"));
}

#[test]
fn out_root_env_fallback() {
    let dir = tempfile::tempdir().unwrap();
    let (code, out, err) = run(
        &["phantom", "generate", "--count", "1", "--size", "32x32", "--seed", "1"],
        &[("ECHODEHAZE_OUT", dir.path().to_str().unwrap())],
    );
    assert_eq!(code, 0, "phantom generate failed:\n{out}\n{err}");
    assert!(dir.path().join("phantoms").join("hazy").join("0000.png").is_file());
}

#[test]
fn unknown_config_key_is_config_error() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.cfg");
    fs::write(&cfg, "no_such_key = 1\n").unwrap();
    let (code, _, err) = run(
        &[
            "phantom", "generate", "--count", "1", "--config", cfg.to_str().unwrap(),
            "--out", dir.path().join("p").to_str().unwrap(),
        ],
        &[],
    );
    assert_eq!(code, 2, "stderr: {err}");
}

#[test]
fn bad_size_is_config_error() {
    let dir = tempfile::tempdir().unwrap();
    let (code, _, err) = run(
        &[
            "phantom", "generate", "--count", "1", "--size", "banana",
            "--out", dir.path().join("p").to_str().unwrap(),
        ],
        &[],
    );
    assert_eq!(code, 2, "stderr: {err}");
    assert!(err.contains("HxW"));
}

#[test]
fn missing_required_flag_exits_two() {
    let (code, _, _) = run(&["dehaze"], &[]);
    assert_eq!(code, 2);
}
