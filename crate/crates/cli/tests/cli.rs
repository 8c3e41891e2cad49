use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_scenecrnn"));
    c.env_remove("SCENECRNN_CACHE");
    c
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("spawn scenecrnn")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn synth(dir: &Path, extra: &[&str]) -> PathBuf {
    let out = dir.to_str().unwrap();
    let mut args = vec!["synth", "--out", out];
    args.extend_from_slice(extra);
    let o = run(&args);
    assert!(o.status.success(), "{}", stderr(&o));
    dir.join("manifest.csv")
}

fn tiny_dataset(dir: &Path) -> PathBuf {
    synth(dir, &["--classes", "2", "--per-class", "4", "--test-per-class", "2", "--duration", "4", "--seed", "3"])
}

const TINY_NET: [&str; 8] = ["--hidden", "4", "--att-size", "4", "--conv-channels", "2,2,2", "--batch-size", "4"];

fn tiny_train(manifest: &Path, out: &Path, epochs: &str, extra: &[&str]) -> Output {
    let mut args = vec![
        "train",
        "--manifest",
        manifest.to_str().unwrap(),
        "--epochs",
        epochs,
        "--out",
        out.to_str().unwrap(),
    ];
    args.extend_from_slice(&TINY_NET);
    args.extend_from_slice(extra);
    run(&args)
}

fn read_dir_sorted(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut files: Vec<_> = std::fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| p.is_file())
        .map(|p| (p.file_name().unwrap().to_string_lossy().into_owned(), std::fs::read(&p).unwrap()))
        .collect();
    files.sort();
    files
}

#[test]
fn synth_writes_recordings_and_is_reproducible() {
    let tmp = tempfile::tempdir().unwrap();
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    let args = ["--classes", "4", "--per-class", "10", "--seed", "7", "--duration", "2"];
    let ma = synth(&a, &args);
    synth(&b, &args);
    let manifest = std::fs::read_to_string(&ma).unwrap();
    assert_eq!(manifest.lines().count(), 41);
    assert_eq!(read_dir_sorted(&a.join("audio")).len(), 40);
    assert_eq!(read_dir_sorted(&a.join("audio")), read_dir_sorted(&b.join("audio")));
    assert_eq!(manifest, std::fs::read_to_string(b.join("manifest.csv")).unwrap());
}

#[test]
fn synth_rejects_a_single_class() {
    let tmp = tempfile::tempdir().unwrap();
    let o = run(&["synth", "--out", tmp.path().to_str().unwrap(), "--classes", "1"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("at least two classes"), "{}", stderr(&o));
}

#[test]
fn help_lists_flags_and_unknown_flags_fail() {
    let o = run(&["train", "--help"]);
    assert!(o.status.success());
    let help = stdout(&o);
    for flag in [
        "--manifest",
        "--features",
        "--model",
        "--epochs",
        "--batch-size",
        "--lr",
        "--seed",
        "--checkpoint",
        "--out",
        "logmel",
        "loggam",
        "att_crnn",
        "cnn_baseline",
    ] {
        assert!(help.contains(flag), "train --help lacks {flag}");
    }
    let eval = stdout(&run(&["eval", "--help"]));
    for flag in ["--svm", "--fuse-with", "--checkpoint", "--out"] {
        assert!(eval.contains(flag), "eval --help lacks {flag}");
    }
    let o = run(&["train", "--no-such-flag"]);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn train_echoes_defaults() {
    let tmp = tempfile::tempdir().unwrap();
    let o = run(&[
        "train",
        "--manifest",
        tmp.path().join("missing.csv").to_str().unwrap(),
        "--out",
        tmp.path().to_str().unwrap(),
        "--lr",
        "-1",
    ]);
    assert_eq!(o.status.code(), Some(1), "{}", stderr(&o));
    let o = run(&[
        "train",
        "--manifest",
        tmp.path().join("missing.csv").to_str().unwrap(),
        "--out",
        tmp.path().to_str().unwrap(),
    ]);
    assert_eq!(o.status.code(), Some(2));
    let help = stdout(&run(&["train", "--help"]));
    for default in ["[default: 500]", "[default: 100]", "[default: 0.0001]", "[default: 128]", "[default: 64]"] {
        assert!(help.contains(default), "missing {default}");
    }
    let cal = stdout(&run(&["calibrate", "--help"]));
    assert!(cal.contains("[default: 0.1]"));
}

#[test]
fn train_calibrate_eval_round_trip() {
    let tmp = tempfile::tempdir().unwrap();
    let manifest = tiny_dataset(&tmp.path().join("data"));
    let out = tmp.path().join("run");
    let o = tiny_train(&manifest, &out, "30", &["--lr", "1e-2"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let log = stderr(&o);
    assert!(log.contains("epochs=30") && log.contains("batch=4") && log.contains("C_svm=0.1"), "{log}");
    let ckpt = out.join("model.ckpt");
    assert!(ckpt.exists() && out.join("model.ckpt.cfg").exists());
    let history = std::fs::read_to_string(out.join("history.csv")).unwrap();
    assert_eq!(history.lines().count(), 31);
    assert!(history.starts_with("epoch,train_loss,seg_accuracy"));
    assert!(manifest.parent().unwrap().join(".cache").read_dir().unwrap().count() >= 8);

    let o = run(&["calibrate", "--manifest", manifest.to_str().unwrap(), "--checkpoint", ckpt.to_str().unwrap()]);
    assert!(o.status.success(), "{}", stderr(&o));
    let svm = out.join("model.ckpt.svm");
    assert!(svm.exists());

    let preds = out.join("preds.csv");
    let o = run(&[
        "eval",
        "--manifest",
        manifest.to_str().unwrap(),
        "--checkpoint",
        ckpt.to_str().unwrap(),
        "--svm",
        svm.to_str().unwrap(),
        "--fuse-with",
        ckpt.to_str().unwrap(),
        "--out",
        preds.to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let report = stdout(&o);
    for key in ["segment accuracy", "recording accuracy", "macro F1", "macro precision"] {
        assert!(report.contains(key), "{report}");
    }
    let csv = std::fs::read_to_string(&preds).unwrap();
    let mut lines = csv.lines();
    assert_eq!(lines.next().unwrap(), "recording_id,predicted_class,p_scene_a,p_scene_b");
    assert_eq!(lines.count(), 4);
}

#[test]
fn cnn_baseline_trains_from_the_cli() {
    let tmp = tempfile::tempdir().unwrap();
    let manifest = tiny_dataset(&tmp.path().join("data"));
    let out = tmp.path().join("run");
    let o = tiny_train(&manifest, &out, "2", &["--model", "cnn_baseline", "--features", "loggam", "--keep", "last"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let cfg = std::fs::read_to_string(out.join("model.ckpt.cfg")).unwrap();
    assert!(cfg.contains("cnn_baseline"), "{cfg}");
}

#[test]
fn missing_checkpoint_is_a_runtime_error() {
    let tmp = tempfile::tempdir().unwrap();
    let manifest = tiny_dataset(&tmp.path().join("data"));
    let ckpt = tmp.path().join("nope.ckpt");
    for cmd in ["calibrate", "eval"] {
        let o = run(&[cmd, "--manifest", manifest.to_str().unwrap(), "--checkpoint", ckpt.to_str().unwrap()]);
        assert_eq!(o.status.code(), Some(2), "{cmd}");
        assert!(stderr(&o).contains("nope.ckpt"), "{}", stderr(&o));
    }
}

#[test]
fn eval_rejects_a_class_mismatch() {
    let tmp = tempfile::tempdir().unwrap();
    let two = tiny_dataset(&tmp.path().join("two"));
    let three = synth(
        &tmp.path().join("three"),
        &["--classes", "3", "--per-class", "2", "--test-per-class", "1", "--duration", "2"],
    );
    let out = tmp.path().join("run");
    assert!(tiny_train(&two, &out, "2", &[]).status.success());
    let o = run(&[
        "eval",
        "--manifest",
        three.to_str().unwrap(),
        "--checkpoint",
        out.join("model.ckpt").to_str().unwrap(),
    ]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("classes"), "{}", stderr(&o));
}

#[test]
fn cache_env_overrides_location() {
    let tmp = tempfile::tempdir().unwrap();
    let manifest = tiny_dataset(&tmp.path().join("data"));
    let cache = tmp.path().join("elsewhere");
    let o = bin()
        .args(["train", "--manifest", manifest.to_str().unwrap(), "--epochs", "1", "--out"])
        .arg(tmp.path().join("run"))
        .args(TINY_NET)
        .env("SCENECRNN_CACHE", &cache)
        .output()
        .unwrap();
    assert!(o.status.success(), "{}", stderr(&o));
    assert_eq!(cache.read_dir().unwrap().count(), 8);
    assert!(!manifest.parent().unwrap().join(".cache").exists());
}

#[test]
fn inspect_prints_standard_shapes() {
    let o = run(&["inspect"]);
    assert!(o.status.success());
    let text = stdout(&o);
    assert!(text.contains("conv0    64 x 64 x 80"), "{text}");
    assert!(text.contains("Z        256 x 80"), "{text}");
    assert!(text.contains("x        256"), "{text}");
}
