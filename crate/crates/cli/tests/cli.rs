use std::path::Path;
use std::process::{Command, Output};

const TINY: [&str; 10] = [
    "--set",
    "gen_width=2",
    "--set",
    "disc_width=2",
    "--set",
    "proj_hidden=8",
    "--set",
    "embed_dim=8",
    "--set",
    "patches_per_layer=16",
];

fn conpres(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_conpres")).args(args).output().expect("binary runs")
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn generate(dir: &Path, count: &str) {
    let out = conpres(&["phantom", "generate", "--out", s(dir), "--count", count, "--seed", "1", "--size", "32x40"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
}

fn dataset_hash(stderr: &[u8]) -> String {
    let text = String::from_utf8_lossy(stderr);
    let line = text.lines().find(|l| l.contains("\"dataset\"")).expect("dataset event");
    let v: serde_json::Value = serde_json::from_str(line).unwrap();
    v["hash"].as_str().unwrap().to_string()
}

#[test]
fn help_exits_zero_for_every_subcommand() {
    for cmd in [
        &["--help"][..],
        &["phantom", "generate", "--help"],
        &["train", "--help"],
        &["translate", "--help"],
        &["eval", "--help"],
        &["report", "--help"],
    ] {
        let out = conpres(cmd);
        assert_eq!(out.status.code(), Some(0), "{cmd:?}");
        assert!(String::from_utf8_lossy(&out.stdout).contains("Usage"));
    }
    let help = String::from_utf8_lossy(&conpres(&["train", "--help"]).stdout).into_owned();
    for flag in [
        "--config",
        "--data",
        "--out",
        "--preset",
        "--steps",
        "--seed",
        "--set",
        "--resume",
        "--previews",
        "--overwrite",
    ] {
        assert!(help.contains(flag), "{flag}");
    }
}

#[test]
fn usage_errors_exit_two() {
    assert_eq!(conpres(&["phantom", "generate", "--count", "10"]).status.code(), Some(2));
    assert_eq!(conpres(&["eval", "--a", "x", "--b", "y", "--ssim", "--out", "r.json"]).status.code(), Some(2));
    assert_eq!(conpres(&["frobnicate"]).status.code(), Some(2));
}

#[test]
fn phantom_generate_is_reproducible_and_guarded() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path().join("d");
    let first = conpres(&["phantom", "generate", "--out", s(&d), "--count", "100", "--seed", "1", "--size", "32x40"]);
    assert!(first.status.success());
    for (split, n) in [("train", 80), ("val", 10), ("test", 10)] {
        assert_eq!(std::fs::read_dir(d.join("sim").join(split)).unwrap().count(), n);
    }
    let again = conpres(&["phantom", "generate", "--out", s(&d), "--count", "100", "--seed", "1", "--size", "32x40"]);
    assert_eq!(again.status.code(), Some(1));
    let forced = conpres(&[
        "phantom",
        "generate",
        "--out",
        s(&d),
        "--count",
        "100",
        "--seed",
        "1",
        "--size",
        "32x40",
        "--overwrite",
    ]);
    assert!(forced.status.success());
    assert_eq!(dataset_hash(&first.stderr), dataset_hash(&forced.stderr));
    assert!(d.join("manifest.json").exists());
}

#[test]
fn train_translate_eval_report_pipeline() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    generate(&data, "20");
    let runs = tmp.path().join("runs");
    let run = runs.join("conpres");
    let mut args =
        vec!["train", "--data", s(&data), "--out", s(&run), "--preset", "conpres", "--steps", "50", "--previews", "1"];
    args.extend(TINY);
    let out = conpres(&args);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let log = std::fs::read_to_string(run.join("log.jsonl")).unwrap();
    assert_eq!(log.lines().count(), 50);
    for name in ["config.snapshot", "manifest.json", "checkpoints/step_000000.ckpt", "checkpoints/step_000050.ckpt"] {
        assert!(run.join(name).exists(), "{name}");
    }
    assert!(std::fs::read_dir(run.join("val_previews")).unwrap().count() > 0);
    let manifest: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(run.join("manifest.json")).unwrap()).unwrap();
    for key in ["command_line", "config", "dataset_hash", "code_version", "seed", "started_unix"] {
        assert!(!manifest[key].is_null(), "{key}");
    }

    let ckpt = run.join("checkpoints/step_000050.ckpt");
    let translated = run.join("translated");
    let out = conpres(&[
        "translate",
        "--checkpoint",
        s(&ckpt),
        "--input",
        s(&data.join("sim/test")),
        "--target",
        "real",
        "--out",
        s(&translated),
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert_eq!(conpres::io::list_pngs(&translated).unwrap().len(), 2);
    let seg_real = run.join("seg2real");
    let out = conpres(&[
        "translate",
        "--checkpoint",
        s(&ckpt),
        "--input",
        s(&data.join("seg/test")),
        "--target",
        "real",
        "--out",
        s(&seg_real),
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));

    let report = run.join("metrics.json");
    let out = conpres(&[
        "eval",
        "--a",
        s(&translated),
        "--b",
        s(&data.join("real/test")),
        "--masks",
        s(&data.join("seg/test")),
        "--out",
        s(&report),
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let v: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(&report).unwrap()).unwrap();
    for key in ["ssim_mean", "fid", "kid"] {
        assert!(v[key].is_number(), "{key}");
    }

    let out = conpres(&["report", s(&runs)]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let md = std::fs::read_to_string(runs.join("summary.md")).unwrap();
    assert_eq!(md.lines().count(), 3);
    assert!(md.contains("conpres"));
}

#[test]
fn resume_continues_the_log() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    generate(&data, "10");
    let run = tmp.path().join("run");
    let mut args = vec![
        "train",
        "--data",
        s(&data),
        "--out",
        s(&run),
        "--preset",
        "cut_sc",
        "--steps",
        "4",
        "--set",
        "checkpoint_every=2",
        "--previews",
        "0",
    ];
    args.extend(TINY);
    assert!(conpres(&args).status.success());
    let full = std::fs::read_to_string(run.join("log.jsonl")).unwrap();

    let ckpt = run.join("checkpoints/step_000002.ckpt");
    let out = conpres(&[
        "train",
        "--data",
        s(&data),
        "--out",
        s(&run),
        "--steps",
        "4",
        "--resume",
        s(&ckpt),
        "--previews",
        "0",
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert_eq!(std::fs::read_to_string(run.join("log.jsonl")).unwrap(), full);
    assert!(run.join("manifest.resume_000002.json").exists());
}

#[test]
fn eval_of_a_directory_against_itself() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    generate(&data, "30");
    let sim = data.join("sim/test");
    let report = tmp.path().join("r.json");
    let out = conpres(&[
        "eval",
        "--a",
        s(&sim),
        "--b",
        s(&sim),
        "--masks",
        s(&data.join("seg/test")),
        "--ssim",
        "--out",
        s(&report),
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let v: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(&report).unwrap()).unwrap();
    assert!((v["ssim_mean"].as_f64().unwrap() - 100.0).abs() < 1e-6);
    assert!(v["fid"].as_f64().unwrap().abs() < 1e-6);
    // The unbiased estimate for identical sets is 2(mean off-diagonal - mean diagonal kernel)/n.
    let kid = v["kid"].as_f64().unwrap();
    assert!(kid <= 0.0 && kid > -0.1, "{kid}");
}

#[test]
fn report_on_empty_directory_fails() {
    let tmp = tempfile::tempdir().unwrap();
    assert_eq!(conpres(&["report", s(tmp.path())]).status.code(), Some(1));
}
