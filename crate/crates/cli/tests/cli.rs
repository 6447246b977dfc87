use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_hierbias"));
    c.env_remove("HIERBIAS_DATA_ROOT").env("RUST_LOG", "warn");
    c
}

fn workspace() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../..")
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().unwrap()
}

fn text(b: &[u8]) -> String {
    String::from_utf8_lossy(b).into_owned()
}

const TOY: &str = r#"
name = "toy_patch"
seed = 1

[dataset]
kind = "coupled"
sources = ["mnist", "patch"]
paths = [[1, 0], [1, 1], [2, 2], [2, 3]]
composition = { train_per_label = 40, test_per_combination = 6 }

[model]
family = "mlp10"
width = 32
depth = 2

[train]
epochs = 2
batch_size = 32
lr_decay_epochs = [1]

[profiles.desk.train]
epochs = 1
lr_decay_epochs = []
"#;

#[test]
fn invalid_config_reports_the_line() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.toml");
    std::fs::write(&cfg, TOY.replace("width = 32", "width = -3")).unwrap();
    let out = run(&["run", cfg.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
    let err = text(&out.stderr);
    assert!(err.contains("line 13"), "{err}");
}

#[test]
fn unknown_profile_is_rejected_by_the_parser() {
    let out = run(&["--profile", "huge", "report"]);
    assert!(!out.status.success());
}

#[test]
fn missing_data_points_at_the_fetch_script() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("toy.toml");
    std::fs::write(&cfg, TOY).unwrap();
    let empty = dir.path().join("empty");
    let out = bin()
        .env("HIERBIAS_DATA_ROOT", &empty)
        .args(["build-dataset", cfg.to_str().unwrap()])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(3));
    let err = text(&out.stderr);
    assert!(err.contains("fetch"), "{err}");
}

#[test]
fn report_of_nothing_is_a_header() {
    let out = run(&["report", "--csv"]);
    assert!(out.status.success());
    assert_eq!(text(&out.stdout).trim(), "name,profile,test_set,depth,ahca,pcs,semantic_accuracy");
}

#[test]
fn staged_and_end_to_end_runs_agree() {
    let data = workspace().join("data");
    if !data.join("mnist").is_dir() {
        eprintln!("MNIST not present under {}; run scripts/fetch_mnist.sh", data.display());
        return;
    }
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("toy.toml");
    std::fs::write(&cfg, TOY).unwrap();
    let cfg = cfg.to_str().unwrap();
    let staged = dir.path().join("staged");
    let whole = dir.path().join("whole");
    let common = |root: &Path| {
        vec![
            "--data-root".to_string(),
            data.to_str().unwrap().to_string(),
            "--out-root".to_string(),
            root.to_str().unwrap().to_string(),
            "--profile".to_string(),
            "desk".to_string(),
        ]
    };
    for cmd in ["build-dataset", "train", "evaluate", "tree"] {
        let out = bin().args(common(&staged)).args([cmd, cfg]).output().unwrap();
        assert!(out.status.success(), "{cmd}: {}", text(&out.stderr));
    }
    let out = bin().args(common(&whole)).args(["run", cfg]).output().unwrap();
    assert!(out.status.success(), "{}", text(&out.stderr));

    let a = staged.join("toy_patch/desk");
    let b = whole.join("toy_patch/desk");
    for f in ["data/train.hsb", "data/test.hsb", "tree.dot", "metrics.csv", "config.toml"] {
        assert!(a.join(f).exists(), "{f}");
    }
    assert_eq!(
        std::fs::read(a.join("confusion/test/aggregate.csv")).unwrap(),
        std::fs::read(b.join("confusion/test/aggregate.csv")).unwrap()
    );
    assert_eq!(
        std::fs::read(a.join("tree.dot")).unwrap(),
        std::fs::read(b.join("tree.dot")).unwrap()
    );

    let out = run(&["report", "--csv", a.to_str().unwrap(), b.to_str().unwrap()]);
    let csv = text(&out.stdout);
    let rows: Vec<&str> = csv.lines().skip(1).collect();
    assert_eq!(rows.len(), 2, "{csv}");
    assert_eq!(rows[0], rows[1]);

    // a different seed is a different config: evaluating the old run must fail
    let out = bin()
        .args(common(&staged))
        .args(["--seed", "9", "evaluate", cfg])
        .output()
        .unwrap();
    assert!(!out.status.success());
    assert!(text(&out.stderr).contains("config"), "{}", text(&out.stderr));
}
