use std::path::Path;
use std::process::{Command, Output};

fn dietcp(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_dietcp"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

const TINY: &str = r#"
[Dataset]
synthetic_train_size = 96
synthetic_val_size = 48

[ViTConfig]
image_size = 16
pos_grid = 4
dim = 16
heads = 2
mlp_ratio = 2

[AugmentConfig]
output_size = 16

[OptimConfig]
total_epochs = 2

[EvalConfig]
knn_k = 3
label_budget = 64

[EvalConfig.probe]
iterations = 20

[WarmStart]
epochs = 1
samples = 32

[Experiment]
cp_subset_size = 32
seeds = [0, 1]
"#;

fn write_config(dir: &Path, text: &str) -> String {
    let p = dir.join("config.toml");
    std::fs::write(&p, text).unwrap();
    p.display().to_string()
}

#[test]
fn default_config_parses_back_to_the_defaults() {
    let o = dietcp(&["default-config"]);
    assert!(o.status.success());
    let parsed = dietcp::experiment::ExperimentConfig::from_toml(&stdout(&o)).unwrap();
    assert_eq!(parsed, dietcp::experiment::ExperimentConfig::default());
}

#[test]
fn unknown_config_key_exits_with_code_2() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "[OptimConfig]\nlearning_rate = 0.1\n");
    let o = dietcp(&["train", "--config", &cfg]);
    assert_eq!(o.status.code(), Some(2), "{}", stderr(&o));
    assert!(stderr(&o).contains("learning_rate"));
}

#[test]
fn missing_dataset_exits_with_code_3() {
    let dir = tempfile::tempdir().unwrap();
    let text = TINY.replace(
        "[Dataset]\n",
        &format!(
            "[Dataset]\nkind = \"files\"\ntrain_path = \"{0}/nope.dcpd\"\nval_path = \"{0}/nope.dcpd\"\n",
            dir.path().display()
        ),
    );
    let cfg = write_config(dir.path(), &text);
    let o = dietcp(&["train", "--config", &cfg, "--out", dir.path().to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(3), "{}", stderr(&o));
}

#[test]
fn train_then_report_is_idempotent() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), TINY);
    let out = dir.path().join("runs");
    let out_s = out.to_str().unwrap();
    let o = dietcp(&["train", "--config", &cfg, "--out", out_s]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(stdout(&o).contains("seed 1"));
    let a = dietcp(&["report", "--out", out_s]);
    let json_a = std::fs::read(out.join("report.json")).unwrap();
    let b = dietcp(&["report", "--out", out_s]);
    assert!(a.status.success() && b.status.success());
    assert_eq!(stdout(&a), stdout(&b));
    assert_eq!(json_a, std::fs::read(out.join("report.json")).unwrap());
    assert!(stdout(&a).contains("seeds [0, 1]"));
    assert!(stdout(&a).contains('±'));
}

#[test]
fn report_without_runs_fails() {
    let dir = tempfile::tempdir().unwrap();
    let o = dietcp(&["report", "--out", dir.path().to_str().unwrap()]);
    assert!(!o.status.success());
    assert!(stderr(&o).contains("no runs found"));
}

#[test]
fn synth_files_feed_a_files_dataset_and_projection() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path().display().to_string();
    for (split, n) in [("train", "96"), ("val", "48")] {
        let path = format!("{d}/{split}.dcpd");
        let o = dietcp(&["synth", "--kind", "target", "--n", n, "--size", "16", "--split", split, "--out", &path]);
        assert!(o.status.success(), "{}", stderr(&o));
        assert!(Path::new(&format!("{d}/{split}.csv")).is_file());
    }
    let text = TINY.replace(
        "[Dataset]\n",
        &format!("[Dataset]\nkind = \"files\"\ntrain_path = \"{d}/train.dcpd\"\nval_path = \"{d}/val.dcpd\"\nnum_classes = 6\n"),
    );
    let cfg = write_config(dir.path(), &text);
    let out = format!("{d}/proj");
    let o = dietcp(&["project", "--config", &cfg, "--out", &out]);
    assert!(o.status.success(), "{}", stderr(&o));
    let csv = std::fs::read_to_string(format!("{out}/projection.csv")).unwrap();
    assert_eq!(csv.lines().next(), Some("sample_index,x,y,label"));
    assert_eq!(csv.lines().count(), 49);
    let o = dietcp(&["eval", "--config", &cfg, "--out", &out, "--seed", "4"]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(stdout(&o).contains("\"phase\": \"pre\""));
}
