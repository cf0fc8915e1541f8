use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use shrimpnet::model::Checkpoint;
use tempfile::TempDir;

fn run(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_shrimpnet"))
        .args(args)
        .env("SHRIMPXNET_THREADS", "2")
        .output()
        .expect("spawn shrimpnet")
}

fn ok(args: &[&str]) -> String {
    let out = run(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// Synthetic tree, prepared at 32x32, and a 2-epoch model.
struct Fixture {
    dir: TempDir,
}

impl Fixture {
    fn new() -> Self {
        let dir = TempDir::new().unwrap();
        let f = Self { dir };
        ok(&["synth", "--out", s(&f.path("raw")), "--per-class", "12", "--size", "32", "--seed", "5"]);
        ok(&["prepare", "--data", s(&f.path("raw")), "--out", s(&f.path("prep")), "--size", "32", "32"]);
        f
    }

    fn path(&self, name: &str) -> PathBuf {
        self.dir.path().join(name)
    }

    fn train(&self, out: &str, extra: &[&str]) -> Output {
        let (data, out) = (self.path("prep"), self.path(out));
        let mut args = vec![
            "train",
            "--data",
            s(&data),
            "--out",
            s(&out),
            "--epochs",
            "2",
            "--filters",
            "8,16",
            "--batch-size",
            "16",
        ];
        args.extend_from_slice(extra);
        run(&args)
    }

    fn model(&self) -> PathBuf {
        let ck = self.path("run/model.ckpt");
        if !ck.exists() {
            assert!(self.train("run", &[]).status.success());
        }
        ck
    }
}

#[test]
fn prepare_is_deterministic() {
    let f = Fixture::new();
    ok(&["prepare", "--data", s(&f.path("raw")), "--out", s(&f.path("prep2")), "--size", "32", "32"]);
    for name in ["data.bin", "split.tsv", "classes.txt", "summary.json"] {
        assert_eq!(
            fs::read(f.path("prep").join(name)).unwrap(),
            fs::read(f.path("prep2").join(name)).unwrap(),
            "{name}"
        );
    }
    let manifest: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(f.path("prep/manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["command"], "prepare");
    assert_eq!(manifest["inputs"].as_object().unwrap().len(), 48);
}

#[test]
fn missing_data_dir_exits_2_and_names_it() {
    let dir = TempDir::new().unwrap();
    let missing = dir.path().join("no_such_dir");
    let out = run(&["prepare", "--data", s(&missing), "--out", s(&dir.path().join("o"))]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("no_such_dir"));
}

#[test]
fn flags_override_config_file() {
    let f = Fixture::new();
    let cfg = f.path("c.cfg");
    fs::write(&cfg, "# test\nepochs = 1\npatience = 9\nseed = 4\n").unwrap();
    let out = f.train("p", &["--config", s(&cfg), "--seed", "11"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let text = fs::read_to_string(f.path("p/config.txt")).unwrap();
    let get = |k: &str| {
        text.lines()
            .find_map(|l| l.strip_prefix(&format!("{k} = ")).map(str::to_owned))
            .unwrap()
    };
    assert_eq!(get("epochs"), "2", "flag beats file");
    assert_eq!(get("patience"), "9", "file beats default");
    assert_eq!(get("seed"), "11");
    assert_eq!(get("gamma"), "0.5", "default");
}

#[test]
fn config_error_exits_2_naming_the_line() {
    let f = Fixture::new();
    let cfg = f.path("bad.cfg");
    fs::write(&cfg, "epochs = 3\n\nbatch_size = lots\n").unwrap();
    let out = f.train("bad", &["--config", s(&cfg)]);
    assert_eq!(out.status.code(), Some(2));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("line 3"), "{err}");
}

#[test]
fn divergence_exits_3() {
    let f = Fixture::new();
    let out = f.train("nan", &["--lr", "1e30"]);
    assert_eq!(out.status.code(), Some(3), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(String::from_utf8_lossy(&out.stderr).contains("non-finite"));
}

#[test]
fn train_writes_loadable_checkpoint_and_logs() {
    let f = Fixture::new();
    let ck = Checkpoint::load(&f.model()).unwrap();
    assert_eq!(ck.spec.input_size, (32, 32));
    assert_eq!(ck.spec.num_classes, 4);
    let log = fs::read_to_string(f.path("run/train.log")).unwrap();
    assert_eq!(log.lines().count(), 2);
    assert!(log.lines().all(|l| l.split(' ').count() == 6));
    let last = Checkpoint::load(&f.path("run/last.ckpt")).unwrap();
    assert_eq!(last.epoch, 2);

    let out = run(&[
        "train",
        "--data",
        s(&f.path("prep")),
        "--out",
        s(&f.path("resumed")),
        "--resume",
        s(&f.path("run/last.ckpt")),
        "--epochs",
        "3",
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let log = fs::read_to_string(f.path("resumed/train.log")).unwrap();
    assert_eq!(log.lines().count(), 3);
    assert!(log.lines().last().unwrap().starts_with("2 "));
}

#[test]
fn gridsearch_over_two_freeze_depths() {
    let f = Fixture::new();
    let out = run(&[
        "gridsearch",
        "--data",
        s(&f.path("prep")),
        "--out",
        s(&f.path("grid")),
        "--epochs",
        "1",
        "--filters",
        "8,16",
        "--axis",
        "freeze_depth=0,1",
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let tsv = fs::read_to_string(f.path("grid/grid.tsv")).unwrap();
    let lines: Vec<&str> = tsv.lines().collect();
    assert_eq!(lines.len(), 3);
    assert!(lines[0].starts_with("rank\tfreeze_depth\t"));
    assert!(f.path("grid/best_config.txt").exists());
    Checkpoint::load(&f.path("grid/model.ckpt")).unwrap();
}

#[test]
fn attack_default_ladder() {
    let f = Fixture::new();
    let ck = f.model();
    ok(&["attack", "--checkpoint", s(&ck), "--data", s(&f.path("prep")), "--out", s(&f.path("atk"))]);
    let tsv = fs::read_to_string(f.path("atk/sweep.tsv")).unwrap();
    let rows: Vec<&str> = tsv.lines().skip(1).collect();
    assert_eq!(rows.len(), 7);
    assert!(rows[0].starts_with("0.00\t"));
    assert!(tsv.lines().next().unwrap().contains("validation_loss"));
}

#[test]
fn explain_all_methods_writes_three_overlays() {
    let f = Fixture::new();
    let ck = f.model();
    let out = f.path("cam");
    let stdout = ok(&[
        "explain",
        "--checkpoint",
        s(&ck),
        "--data",
        s(&f.path("prep")),
        "--out",
        s(&out),
        "--limit",
        "1",
        "--class",
        "disc",
    ]);
    let pngs: Vec<_> = fs::read_dir(&out)
        .unwrap()
        .filter_map(|e| e.ok())
        .filter(|e| e.path().extension().is_some_and(|x| x == "png"))
        .collect();
    assert_eq!(pngs.len(), 3, "{stdout}");
    for m in ["gradcam", "gradcampp", "xgradcam"] {
        assert!(stdout.contains(&format!("_{m}_disc.png")));
    }

    let bad = run(&[
        "explain",
        "--checkpoint",
        s(&ck),
        "--data",
        s(&f.path("prep")),
        "--out",
        s(&out),
        "--class",
        "lobster",
    ]);
    assert_eq!(bad.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&bad.stderr).contains("valid: cross, disc, ring, square"));
}

#[test]
fn evaluate_is_repeatable() {
    let f = Fixture::new();
    let ck = f.model();
    for out in ["e1", "e2"] {
        ok(&["evaluate", "--checkpoint", s(&ck), "--data", s(&f.path("prep")), "--out", s(&f.path(out))]);
    }
    let a = fs::read_to_string(f.path("e1/report.json")).unwrap();
    assert_eq!(a, fs::read_to_string(f.path("e2/report.json")).unwrap());
    let v: serde_json::Value = serde_json::from_str(&a).unwrap();
    assert_eq!(v["class_names"].as_array().unwrap().len(), 4);
    assert!(v["bootstrap_ci"]["low"].as_f64().unwrap() <= v["bootstrap_ci"]["high"].as_f64().unwrap());
    let preds = fs::read_to_string(f.path("e1/predictions.tsv")).unwrap();
    // 12 per class: 8 train, 1 validation, 3 test.
    assert_eq!(preds.lines().count(), 1 + 4 * 3);
}

#[test]
fn report_combines_everything() {
    let f = Fixture::new();
    let ck = f.model();
    let out = f.path("rep");
    ok(&[
        "report",
        "--checkpoint",
        s(&ck),
        "--data",
        s(&f.path("prep")),
        "--out",
        s(&out),
        "--limit",
        "1",
        "--bootstrap-iterations",
        "50",
    ]);
    let v: serde_json::Value = serde_json::from_str(&fs::read_to_string(out.join("report.json")).unwrap()).unwrap();
    assert_eq!(v["robustness"].as_array().unwrap().len(), 7);
    assert_eq!(fs::read_dir(out.join("cams")).unwrap().count(), 3);
    assert!(out.join("manifest.json").exists());
}

#[test]
fn incompatible_checkpoint_is_rejected() {
    let f = Fixture::new();
    let ck = f.model();
    ok(&["prepare", "--data", s(&f.path("raw")), "--out", s(&f.path("p16")), "--size", "16", "16"]);
    let out = run(&["evaluate", "--checkpoint", s(&ck), "--data", s(&f.path("p16")), "--out", s(&f.path("x"))]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("32x32"));
}

#[test]
fn help_lists_defaults() {
    let help = ok(&["train", "--help"]);
    for needle in ["[default: 30]", "[default: 128]", "[default: 0.001]", "[default: 5]", "[default: 16,32,64,128]"] {
        assert!(help.contains(needle), "missing {needle}");
    }
    let help = ok(&["attack", "--help"]);
    assert!(help.contains("0,0.1,0.12,0.14,0.16,0.18,0.2"));
    let help = ok(&["prepare", "--help"]);
    assert!(help.contains("[default: threshold]") && help.contains("[default: 0.92]"));
}
