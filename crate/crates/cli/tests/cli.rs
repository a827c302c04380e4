//! End-to-end tests of the `udpm` binary: every verb, the exit-code
//! contract, determinism and replay guarantees, and the run manifests.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn bin() -> PathBuf {
    PathBuf::from(env!("CARGO_BIN_EXE_udpm"))
}

fn run_in(dir: &Path, args: &[&str], envs: &[(&str, &str)]) -> Output {
    let mut cmd = Command::new(bin());
    cmd.current_dir(dir).args(args);
    for (k, v) in envs {
        cmd.env(k, v);
    }
    cmd.output().expect("binary runs")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("no signal exit")
}

fn stderr_text(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

fn write_toy_config(dir: &Path, steps: usize, precision: &str) -> PathBuf {
    let path = dir.join("toy.json");
    let text = format!(
        r#"{{
  "dataset": {{ "generator": "bars", "size": 16, "image_size": 16, "seed": 3 }},
  "steps": {steps},
  "batch_size": 2,
  "hidden": 4,
  "embed_dim": 8,
  "schedule_steps": 3,
  "seed": 9,
  "precision": "{precision}",
  "log_every": 50
}}
"#
    );
    fs::write(&path, text).unwrap();
    path
}

fn train_checkpoint(dir: &Path, out_name: &str) -> PathBuf {
    let config = write_toy_config(dir, 40, "f64");
    let out = run_in(
        dir,
        &[
            "train",
            "--config",
            config.to_str().unwrap(),
            "--out",
            out_name,
        ],
        &[],
    );
    assert_eq!(code(&out), 0, "train failed: {}", stderr_text(&out));
    dir.join(out_name).join("checkpoint.udpm")
}

#[test]
fn verify_filter_runs_and_reports() {
    let tmp = tempfile::tempdir().unwrap();
    let out = run_in(
        tmp.path(),
        &["verify", "--filter", "schedule_endpoints", "--out", "v"],
        &[],
    );
    assert_eq!(code(&out), 0, "{}", stderr_text(&out));
    let report: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(tmp.path().join("v/report.json")).unwrap())
            .unwrap();
    assert_eq!(report["failed"], 0);
    assert_eq!(report["checks"][0]["name"], "schedule_endpoints_exact");
    assert!(tmp.path().join("v/run_manifest.json").exists());
}

#[test]
fn verify_unknown_filter_is_a_usage_error() {
    let tmp = tempfile::tempdir().unwrap();
    let out = run_in(
        tmp.path(),
        &["verify", "--filter", "zz-nothing", "--out", "v"],
        &[],
    );
    assert_eq!(code(&out), 2);
    assert!(stderr_text(&out).contains("matches no checks"));
}

#[test]
fn verify_list_prints_names() {
    let tmp = tempfile::tempdir().unwrap();
    let out = run_in(tmp.path(), &["verify", "--list"], &[]);
    assert_eq!(code(&out), 0);
    let text = String::from_utf8_lossy(&out.stdout);
    assert!(text.contains("posterior_matches_dense_conditioning"));
    assert!(text.lines().count() >= 25);
}

#[test]
fn unknown_subcommand_is_a_usage_error() {
    let tmp = tempfile::tempdir().unwrap();
    let out = run_in(tmp.path(), &["frobnicate"], &[]);
    assert_eq!(code(&out), 2);
}

#[test]
fn train_is_bit_deterministic_and_thread_invariant() {
    let tmp = tempfile::tempdir().unwrap();
    let config = write_toy_config(tmp.path(), 30, "f64");
    let cfg = config.to_str().unwrap();

    let a = run_in(
        tmp.path(),
        &["train", "--config", cfg, "--out", "a"],
        &[("UDPM_THREADS", "1")],
    );
    assert_eq!(code(&a), 0, "{}", stderr_text(&a));
    let b = run_in(
        tmp.path(),
        &["train", "--config", cfg, "--out", "b"],
        &[("UDPM_THREADS", "1")],
    );
    assert_eq!(code(&b), 0, "{}", stderr_text(&b));
    let c = run_in(
        tmp.path(),
        &["train", "--config", cfg, "--out", "c"],
        &[("UDPM_THREADS", "3")],
    );
    assert_eq!(code(&c), 0, "{}", stderr_text(&c));

    let bytes_a = fs::read(tmp.path().join("a/checkpoint.udpm")).unwrap();
    let bytes_b = fs::read(tmp.path().join("b/checkpoint.udpm")).unwrap();
    let bytes_c = fs::read(tmp.path().join("c/checkpoint.udpm")).unwrap();
    assert_eq!(
        bytes_a, bytes_b,
        "same config and seed must give identical checkpoints"
    );
    assert_eq!(bytes_a, bytes_c, "worker count must not change the result");

    let csv = fs::read_to_string(tmp.path().join("a/loss.csv")).unwrap();
    let mut lines = csv.lines();
    assert_eq!(lines.next(), Some("step,loss,mean_level,ema_applied"));
    assert_eq!(csv.lines().count(), 31, "header plus one row per step");
}

#[test]
fn train_requires_the_dataset_field() {
    let tmp = tempfile::tempdir().unwrap();
    let config = tmp.path().join("no-dataset.json");
    fs::write(&config, r#"{ "steps": 5 }"#).unwrap();
    let out = run_in(
        tmp.path(),
        &["train", "--config", config.to_str().unwrap()],
        &[],
    );
    assert_eq!(code(&out), 2);
    assert!(
        stderr_text(&out).contains("dataset"),
        "{}",
        stderr_text(&out)
    );
}

#[test]
fn train_rejects_unknown_config_keys() {
    let tmp = tempfile::tempdir().unwrap();
    let config = tmp.path().join("typo.json");
    fs::write(
        &config,
        r#"{ "dataset": { "generator": "blobs" }, "leraning_rate": 0.1 }"#,
    )
    .unwrap();
    let out = run_in(
        tmp.path(),
        &["train", "--config", config.to_str().unwrap()],
        &[],
    );
    assert_eq!(code(&out), 2);
    assert!(
        stderr_text(&out).contains("leraning_rate"),
        "{}",
        stderr_text(&out)
    );
}

#[test]
fn sampling_is_deterministic_and_replayable() {
    let tmp = tempfile::tempdir().unwrap();
    let ckpt = train_checkpoint(tmp.path(), "t");
    let ck = ckpt.to_str().unwrap();

    let s1 = run_in(
        tmp.path(),
        &[
            "sample",
            "--checkpoint",
            ck,
            "--seed",
            "7",
            "--count",
            "2",
            "--out",
            "s1",
        ],
        &[],
    );
    assert_eq!(code(&s1), 0, "{}", stderr_text(&s1));
    let s2 = run_in(
        tmp.path(),
        &[
            "sample",
            "--checkpoint",
            ck,
            "--seed",
            "7",
            "--count",
            "2",
            "--out",
            "s2",
        ],
        &[],
    );
    assert_eq!(code(&s2), 0, "{}", stderr_text(&s2));
    for name in ["sample_000.png", "sample_001.png", "sample_000.lat"] {
        let a = fs::read(tmp.path().join("s1").join(name)).unwrap();
        let b = fs::read(tmp.path().join("s2").join(name)).unwrap();
        assert_eq!(a, b, "{name} must be byte-identical across reruns");
    }

    let s3 = run_in(
        tmp.path(),
        &["sample", "--checkpoint", ck, "--seed", "8", "--out", "s3"],
        &[],
    );
    assert_eq!(code(&s3), 0);
    assert_ne!(
        fs::read(tmp.path().join("s1/sample_000.png")).unwrap(),
        fs::read(tmp.path().join("s3/sample_000.png")).unwrap(),
        "a different seed must give a different image"
    );

    // Replaying the recorded latent reproduces the image byte for byte.
    let lat = tmp.path().join("s1/sample_000.lat");
    let r = run_in(
        tmp.path(),
        &[
            "sample",
            "--checkpoint",
            ck,
            "--replay",
            lat.to_str().unwrap(),
            "--out",
            "r",
        ],
        &[],
    );
    assert_eq!(code(&r), 0, "{}", stderr_text(&r));
    assert_eq!(
        fs::read(tmp.path().join("s1/sample_000.png")).unwrap(),
        fs::read(tmp.path().join("r/sample_000.png")).unwrap(),
        "replay must reproduce the original image"
    );
}

#[test]
fn interpolation_corners_match_their_sources() {
    let tmp = tempfile::tempdir().unwrap();
    let ckpt = train_checkpoint(tmp.path(), "t");
    let ck = ckpt.to_str().unwrap();

    let s = run_in(
        tmp.path(),
        &[
            "sample",
            "--checkpoint",
            ck,
            "--seed",
            "5",
            "--count",
            "4",
            "--out",
            "s",
        ],
        &[],
    );
    assert_eq!(code(&s), 0, "{}", stderr_text(&s));
    let lat = |i: usize| tmp.path().join("s").join(format!("sample_{i:03}.lat"));

    let out = run_in(
        tmp.path(),
        &[
            "interpolate",
            "--checkpoint",
            ck,
            "--corners",
            lat(0).to_str().unwrap(),
            lat(1).to_str().unwrap(),
            lat(2).to_str().unwrap(),
            lat(3).to_str().unwrap(),
            "--grid",
            "3x3",
            "--out",
            "grid",
        ],
        &[],
    );
    assert_eq!(code(&out), 0, "{}", stderr_text(&out));

    // Row-major corners: top-left, top-right, bottom-left, bottom-right.
    for (cell, idx) in [
        ("cell_r0_c0", 0usize),
        ("cell_r0_c2", 1),
        ("cell_r2_c0", 2),
        ("cell_r2_c2", 3),
    ] {
        let cell_png = fs::read(tmp.path().join("grid").join(format!("{cell}.png"))).unwrap();
        let src_png = fs::read(tmp.path().join("s").join(format!("sample_{idx:03}.png"))).unwrap();
        assert_eq!(cell_png, src_png, "{cell} must equal its source sample");
    }

    let grid = image::open(tmp.path().join("grid/grid.png")).unwrap();
    assert_eq!(grid.width(), 3 * 16, "three 16px columns");
    assert_eq!(grid.height(), 3 * 16, "three 16px rows");

    // A 1xN slerp line between two corners keeps exact endpoints too.
    let line = run_in(
        tmp.path(),
        &[
            "interpolate",
            "--checkpoint",
            ck,
            "--corners",
            lat(0).to_str().unwrap(),
            lat(1).to_str().unwrap(),
            "--grid",
            "1x5",
            "--slerp",
            "--out",
            "line",
        ],
        &[],
    );
    assert_eq!(code(&line), 0, "{}", stderr_text(&line));
    assert_eq!(
        fs::read(tmp.path().join("line/cell_r0_c0.png")).unwrap(),
        fs::read(tmp.path().join("s/sample_000.png")).unwrap()
    );
    assert_eq!(
        fs::read(tmp.path().join("line/cell_r0_c4.png")).unwrap(),
        fs::read(tmp.path().join("s/sample_001.png")).unwrap()
    );
}

#[test]
fn perturb_at_zero_eps_reproduces_the_sample() {
    let tmp = tempfile::tempdir().unwrap();
    let ckpt = train_checkpoint(tmp.path(), "t");
    let ck = ckpt.to_str().unwrap();
    let s = run_in(
        tmp.path(),
        &["sample", "--checkpoint", ck, "--seed", "2", "--out", "s"],
        &[],
    );
    assert_eq!(code(&s), 0, "{}", stderr_text(&s));
    let lat = tmp.path().join("s/sample_000.lat");

    let p0 = run_in(
        tmp.path(),
        &[
            "perturb",
            "--checkpoint",
            ck,
            "--latent",
            lat.to_str().unwrap(),
            "--step",
            "2",
            "--eps",
            "0.0",
            "--out",
            "p0",
        ],
        &[],
    );
    assert_eq!(code(&p0), 0, "{}", stderr_text(&p0));
    assert_eq!(
        fs::read(tmp.path().join("p0/perturbed.png")).unwrap(),
        fs::read(tmp.path().join("s/sample_000.png")).unwrap(),
        "eps 0 must be a no-op"
    );

    let p = run_in(
        tmp.path(),
        &[
            "perturb",
            "--checkpoint",
            ck,
            "--latent",
            lat.to_str().unwrap(),
            "--step",
            "2",
            "--eps",
            "0.5",
            "--out",
            "p",
        ],
        &[],
    );
    assert_eq!(code(&p), 0, "{}", stderr_text(&p));
    assert_ne!(
        fs::read(tmp.path().join("p/perturbed.png")).unwrap(),
        fs::read(tmp.path().join("s/sample_000.png")).unwrap(),
        "a real perturbation must change the image"
    );

    // An out-of-range step is a usage error.
    let bad = run_in(
        tmp.path(),
        &[
            "perturb",
            "--checkpoint",
            ck,
            "--latent",
            lat.to_str().unwrap(),
            "--step",
            "9",
            "--eps",
            "0.1",
            "--out",
            "pbad",
        ],
        &[],
    );
    assert_eq!(code(&bad), 2, "{}", stderr_text(&bad));
}

#[test]
fn elbo_reports_zero_prior_and_parses() {
    let tmp = tempfile::tempdir().unwrap();
    let ckpt = train_checkpoint(tmp.path(), "t");
    let ck = ckpt.to_str().unwrap();
    let s = run_in(
        tmp.path(),
        &["sample", "--checkpoint", ck, "--seed", "2", "--out", "s"],
        &[],
    );
    assert_eq!(code(&s), 0, "{}", stderr_text(&s));

    let img = tmp.path().join("s/sample_000.udt1");
    let e = run_in(
        tmp.path(),
        &[
            "elbo",
            "--checkpoint",
            ck,
            "--image",
            img.to_str().unwrap(),
            "--out",
            "e",
        ],
        &[],
    );
    assert_eq!(code(&e), 0, "{}", stderr_text(&e));
    let report: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(tmp.path().join("e/elbo.json")).unwrap()).unwrap();
    assert_eq!(report["prior_kl"], 0.0);
    assert_eq!(
        report["step_kl"].as_array().unwrap().len(),
        2,
        "two interior steps at L=3"
    );
    assert!(report["total"].as_f64().unwrap().is_finite());
}

#[test]
fn output_directories_hold_exactly_one_run() {
    let tmp = tempfile::tempdir().unwrap();
    let v1 = run_in(
        tmp.path(),
        &["verify", "--filter", "schedule_endpoints", "--out", "v"],
        &[],
    );
    assert_eq!(code(&v1), 0);
    let v2 = run_in(
        tmp.path(),
        &["verify", "--filter", "schedule_endpoints", "--out", "v"],
        &[],
    );
    assert_eq!(
        code(&v2),
        2,
        "a second run must refuse to overwrite the manifest"
    );
    assert!(stderr_text(&v2).contains("run manifest"));
    let v3 = run_in(
        tmp.path(),
        &[
            "verify",
            "--filter",
            "schedule_endpoints",
            "--out",
            "v",
            "--force",
        ],
        &[],
    );
    assert_eq!(code(&v3), 0, "--force replaces the previous run");
    let manifests = fs::read_dir(tmp.path().join("v"))
        .unwrap()
        .filter(|e| e.as_ref().unwrap().file_name() == "run_manifest.json")
        .count();
    assert_eq!(manifests, 1);
}

#[test]
fn manifests_record_the_run_and_its_artifacts() {
    let tmp = tempfile::tempdir().unwrap();
    let ckpt = train_checkpoint(tmp.path(), "t");

    let manifest: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(tmp.path().join("t/run_manifest.json")).unwrap())
            .unwrap();
    assert_eq!(manifest["tool"], "udpm");
    assert_eq!(manifest["command"], "train");
    assert_eq!(manifest["seeds"][0], 9);
    assert_eq!(manifest["config"]["steps"], 40);
    assert_eq!(manifest["config"]["dataset"]["generator"], "bars");
    let hash = manifest["checkpoint_sha256"].as_str().unwrap();
    assert_eq!(hash.len(), 64);
    for artifact in manifest["artifacts"].as_array().unwrap() {
        let p = tmp.path().join("t").join(artifact.as_str().unwrap());
        assert!(p.exists(), "listed artifact {} must exist", p.display());
    }

    // The sample manifest names the checkpoint it used and the same hash.
    let ck = ckpt.to_str().unwrap();
    let s = run_in(
        tmp.path(),
        &["sample", "--checkpoint", ck, "--out", "s"],
        &[],
    );
    assert_eq!(code(&s), 0);
    let sm: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(tmp.path().join("s/run_manifest.json")).unwrap())
            .unwrap();
    assert_eq!(sm["command"], "sample");
    assert_eq!(sm["checkpoint_sha256"].as_str().unwrap(), hash);
    assert_eq!(sm["config"]["checkpoint"].as_str().unwrap(), ck);

    // The sidecar carries the checkpoint hash and schedule too.
    let sidecar: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(tmp.path().join("s/sample_000.json")).unwrap())
            .unwrap();
    assert_eq!(sidecar["checkpoint_sha256"].as_str().unwrap(), hash);
    assert_eq!(sidecar["schedule"]["steps"], 3);
}

#[test]
fn guidance_flags_are_validated() {
    let tmp = tempfile::tempdir().unwrap();
    let ckpt = train_checkpoint(tmp.path(), "t");
    let ck = ckpt.to_str().unwrap();

    // --guidance without --class is a usage error.
    let out = run_in(
        tmp.path(),
        &[
            "sample",
            "--checkpoint",
            ck,
            "--guidance",
            "2.0",
            "--out",
            "g1",
        ],
        &[],
    );
    assert_eq!(code(&out), 2);

    // A class id beyond the checkpoint's classes is a usage error.
    let out = run_in(
        tmp.path(),
        &["sample", "--checkpoint", ck, "--class", "9", "--out", "g2"],
        &[],
    );
    assert_eq!(code(&out), 2, "{}", stderr_text(&out));

    // A valid class produces output distinct from the unconditional path.
    let u = run_in(
        tmp.path(),
        &["sample", "--checkpoint", ck, "--seed", "3", "--out", "u"],
        &[],
    );
    assert_eq!(code(&u), 0);
    let g = run_in(
        tmp.path(),
        &[
            "sample",
            "--checkpoint",
            ck,
            "--seed",
            "3",
            "--class",
            "1",
            "--guidance",
            "2.0",
            "--out",
            "g3",
        ],
        &[],
    );
    assert_eq!(code(&g), 0, "{}", stderr_text(&g));
    // Compare the full-precision tensors: after a short training run the
    // guided shift can be smaller than one 8-bit quantization level.
    assert_ne!(
        fs::read(tmp.path().join("u/sample_000.udt1")).unwrap(),
        fs::read(tmp.path().join("g3/sample_000.udt1")).unwrap()
    );
}

#[test]
fn bad_thread_budget_is_a_usage_error() {
    let tmp = tempfile::tempdir().unwrap();
    let config = write_toy_config(tmp.path(), 5, "f32");
    let out = run_in(
        tmp.path(),
        &["train", "--config", config.to_str().unwrap(), "--out", "t"],
        &[("UDPM_THREADS", "zero")],
    );
    assert_eq!(code(&out), 2, "{}", stderr_text(&out));
    assert!(stderr_text(&out).contains("UDPM_THREADS"));
}
