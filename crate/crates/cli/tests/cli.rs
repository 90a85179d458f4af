use std::fs;
use std::path::Path;
use std::process::{Command, Output};

const SMALL: &str = r#"
version = "v1"
seed = 3

[synthetic]
n_train = 48
n_test = 30
patch_size_range = [4, 8]

[synthetic.axis]
n_bands = 16
lambda_min_nm = 462.08
lambda_max_nm = 938.37

[synthetic.planted_bands]
P = [3]
K = [7]
Mg = [10]
pH = [13]

[forest]
n_trees = 12
max_depth = 6
"#;

fn hyperaudit(work: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_hyperaudit"))
        .arg("--workdir")
        .arg(work)
        .args(args)
        .output()
        .expect("binary runs")
}

fn small_config(dir: &Path) -> String {
    let path = dir.join("run.toml");
    fs::write(&path, SMALL).unwrap();
    path.to_str().unwrap().to_string()
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exited normally")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

#[test]
fn help_and_usage_errors() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(code(&hyperaudit(dir.path(), &["--help"])), 0);
    assert_eq!(code(&hyperaudit(dir.path(), &["train", "--help"])), 0);
    assert_eq!(code(&hyperaudit(dir.path(), &["frobnicate"])), 1);
    assert_eq!(code(&hyperaudit(dir.path(), &[])), 1);
    assert_eq!(code(&hyperaudit(dir.path(), &["train", "--n-trees", "many"])), 1);
    assert_eq!(code(&hyperaudit(dir.path(), &["run", "--threads", "0"])), 1);
}

#[test]
fn stage_by_stage_chain_produces_all_artifacts() {
    let dir = tempfile::tempdir().unwrap();
    let work = dir.path().join("work");
    let cfg = small_config(dir.path());
    for stage in [
        "gen-data",
        "extract",
        "train",
        "explain",
        "aggregate",
        "prune",
        "audit",
        "report",
    ] {
        let out = hyperaudit(&work, &["--config", &cfg, stage]);
        assert_eq!(code(&out), 0, "{stage}: {}", stderr(&out));
    }
    let mut expected = vec![
        "data/manifest.json".to_string(),
        "features/schema.json".into(),
        "features/train.csv".into(),
        "features/test.csv".into(),
        "prune_report.json".into(),
        "audit_report.json".into(),
        "report.json".into(),
        "report.md".into(),
    ];
    for t in ["P", "K", "Mg", "pH"] {
        expected.push(format!("models/forest_{t}.json"));
        expected.push(format!("shap/{t}_train.csv"));
        expected.push(format!("shap/{t}_train.csv.json"));
        expected.push(format!("shap/{t}_test.csv"));
        expected.push(format!("residuals_{t}.csv"));
        for f in [
            "importance.csv",
            "groups.csv",
            "heatmap.csv",
            "heatmap.json",
            "beeswarm.json",
            "dependency.json",
        ] {
            expected.push(format!("aggregate/{t}/{f}"));
        }
    }
    for rel in &expected {
        assert!(work.join(rel).is_file(), "missing {rel}");
    }
    let md = fs::read_to_string(work.join("report.md")).unwrap();
    assert!(md.contains("| ✗ (61) |"), "{md}");
    assert!(md.contains("%) [k="));

    // the merged run reproduces the stage-by-stage report byte for byte
    let again = dir.path().join("again");
    let out = hyperaudit(&again, &["--config", &cfg, "--threads", "1", "run"]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    assert_eq!(
        fs::read(work.join("report.json")).unwrap(),
        fs::read(again.join("report.json")).unwrap()
    );
    let report = fs::read_to_string(again.join("report.json")).unwrap();
    assert!(
        !report.contains(dir.path().to_str().unwrap()),
        "report leaks an absolute path"
    );
}

#[test]
fn explain_with_mismatched_schema_is_a_validation_error() {
    let dir = tempfile::tempdir().unwrap();
    let work = dir.path().join("work");
    let cfg = small_config(dir.path());
    for stage in ["gen-data", "extract", "train"] {
        assert_eq!(code(&hyperaudit(&work, &["--config", &cfg, stage])), 0);
    }
    // re-extract with spatial groups: the feature schema no longer matches the forests
    assert_eq!(code(&hyperaudit(&work, &["--config", &cfg, "--spatial", "extract"])), 0);
    let out = hyperaudit(&work, &["--config", &cfg, "explain"]);
    assert_eq!(code(&out), 2);
    let err = stderr(&out);
    assert!(err.contains("fingerprint"), "{err}");
    assert!(err.contains("forest_P.json"), "{err}");
}

#[test]
fn missing_inputs_and_bad_config_are_validation_errors() {
    let dir = tempfile::tempdir().unwrap();
    let work = dir.path().join("work");
    let out = hyperaudit(&work, &["train"]);
    assert_eq!(code(&out), 2);
    assert!(stderr(&out).contains("manifest.json"), "{}", stderr(&out));

    let bad = dir.path().join("bad.toml");
    fs::write(&bad, "version = \"v1\"\n[prune]\ntol = 0.0\n").unwrap();
    let out = hyperaudit(&work, &["--config", bad.to_str().unwrap(), "config"]);
    assert_eq!(code(&out), 2);
    assert!(stderr(&out).contains("bad.toml"), "{}", stderr(&out));

    assert_eq!(code(&hyperaudit(&work, &["--load", "gen-data"])), 2);
    assert_eq!(code(&hyperaudit(&work, &["--features-per-split", "1.5", "config"])), 2);
}

#[test]
fn corrupted_dataset_names_the_patch() {
    let dir = tempfile::tempdir().unwrap();
    let work = dir.path().join("work");
    let cfg = small_config(dir.path());
    assert_eq!(code(&hyperaudit(&work, &["--config", &cfg, "gen-data"])), 0);
    fs::remove_file(work.join("data/patch_5.f32")).unwrap();
    let out = hyperaudit(&work, &["--config", &cfg, "extract"]);
    assert_eq!(code(&out), 2);
    assert!(stderr(&out).contains("patch 5"), "{}", stderr(&out));
}

#[test]
fn config_subcommand_prints_effective_toml() {
    let dir = tempfile::tempdir().unwrap();
    let out = hyperaudit(dir.path(), &["--seed", "42", "--n-trees", "9", "config"]);
    assert_eq!(code(&out), 0);
    let text = String::from_utf8(out.stdout).unwrap();
    assert!(text.contains("seed = 42"), "{text}");
    assert!(text.contains("n_trees = 9"), "{text}");
}
