use std::fs;
use std::path::Path;
use std::process::{Command, Output};

const CONFIG: &str = r#"
rounds = 2
master_seed = 5

[federation]
size_scale = 0.03

[train]
epochs_per_round = 1
batch_size = 2

[model]
layers = [
    { in_channels = 2, out_channels = 3, kernel_size = 3 },
    { in_channels = 3, out_channels = 1, kernel_size = 1 },
]
"#;

fn fedstroke(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_fedstroke"))
        .args(args)
        .current_dir(cwd)
        .output()
        .expect("spawn fedstroke")
}

fn ok(args: &[&str], cwd: &Path) -> String {
    let out = fedstroke(args, cwd);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn workspace() -> tempfile::TempDir {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("exp.toml"), CONFIG).unwrap();
    dir
}

#[test]
fn generate_run_evaluate_round_trip() {
    let dir = workspace();
    let cwd = dir.path();
    ok(&["generate", "--config", "exp.toml", "--out", "data"], cwd);
    assert!(cwd.join("data/manifest.json").is_file());

    ok(
        &[
            "run",
            "--config",
            "exp.toml",
            "--data",
            "data",
            "--rule",
            "softmax",
            "--out",
            "run",
            "--save-predictions",
        ],
        cwd,
    );
    for f in [
        "report.json",
        "rounds.csv",
        "per_patient.csv",
        "checkpoints/softmax/round_0002.ckpt",
    ] {
        assert!(cwd.join("run").join(f).is_file(), "{f}");
    }
    let saved = fs::read_to_string(cwd.join("run/per_patient.csv")).unwrap();

    let from_pred = ok(
        &[
            "evaluate",
            "--data",
            "data",
            "--pred",
            "run/predictions",
            "--model",
            "softmax",
        ],
        cwd,
    );
    assert_eq!(from_pred, saved);
    let from_ckpt = ok(
        &[
            "evaluate",
            "--data",
            "data",
            "--checkpoint",
            "run/checkpoints/softmax/round_0002.ckpt",
            "--model",
            "softmax",
        ],
        cwd,
    );
    assert_eq!(from_ckpt, saved);
}

#[test]
fn run_with_data_matches_run_without() {
    let dir = workspace();
    let cwd = dir.path();
    ok(&["generate", "--config", "exp.toml", "--out", "data"], cwd);
    ok(
        &[
            "run", "--config", "exp.toml", "--data", "data", "--out", "a",
        ],
        cwd,
    );
    ok(
        &[
            "run",
            "--config",
            "exp.toml",
            "--out",
            "b",
            "--threads",
            "2",
        ],
        cwd,
    );
    for f in ["rounds.csv", "per_patient.csv"] {
        assert_eq!(
            fs::read(cwd.join("a").join(f)).unwrap(),
            fs::read(cwd.join("b").join(f)).unwrap(),
            "{f}"
        );
    }
}

#[test]
fn flags_override_config() {
    let dir = workspace();
    let cwd = dir.path();
    ok(
        &[
            "run",
            "--config",
            "exp.toml",
            "--rounds",
            "3",
            "--seed",
            "9",
            "--rule",
            "centralized",
            "--out",
            "r",
        ],
        cwd,
    );
    let rounds = fs::read_to_string(cwd.join("r/rounds.csv")).unwrap();
    assert!(rounds
        .lines()
        .any(|l| l.starts_with("3,centralized,large,")));
    let report = fs::read_to_string(cwd.join("r/report.json")).unwrap();
    assert!(report.contains("\"master_seed\": 9"));
}

#[test]
fn suite_report_and_rank() {
    let dir = workspace();
    let cwd = dir.path();
    let stdout = ok(
        &["run-suite", "--config", "exp.toml", "--out", "suite"],
        cwd,
    );
    for model in [
        "centralized",
        "fedavg",
        "vanillaavg",
        "beta",
        "softmax",
        "fedprox",
    ] {
        assert!(stdout.contains(model), "{model} missing from suite output");
    }
    let ranking = fs::read_to_string(cwd.join("suite/ranking.csv")).unwrap();
    assert_eq!(ranking.lines().count(), 1 + 2 * 6);

    let report = ok(&["report", "suite"], cwd);
    assert!(report.contains("limited centers"));
    assert_eq!(
        report.lines().filter(|l| l.starts_with("fedprox ")).count(),
        2
    );

    let ranked = ok(&["rank", "suite/per_patient.csv", "--out", "rank.csv"], cwd);
    assert!(ranked.contains("large centers"));
    assert_eq!(fs::read_to_string(cwd.join("rank.csv")).unwrap(), ranking);
}

#[test]
fn rank_names_models_by_file_stem_without_model_column() {
    let dir = tempfile::tempdir().unwrap();
    let cwd = dir.path();
    let header = "patient_id,center_id,category,dsc,avd_ml,ald,lf1,gt_volume_ml,gt_lesion_count\n";
    fs::write(
        cwd.join("good.csv"),
        format!("{header}p1,1,S,1,0,0,1,2,1\n"),
    )
    .unwrap();
    fs::write(
        cwd.join("poor.csv"),
        format!("{header}p1,1,S,0,2,1,0,2,1\n"),
    )
    .unwrap();
    let out = ok(&["rank", "poor.csv", "good.csv"], cwd);
    let good = out.find("good").unwrap();
    let poor = out.find("poor").unwrap();
    assert!(good < poor, "{out}");
}

#[test]
fn errors_exit_nonzero_with_diagnostic() {
    let dir = workspace();
    let cwd = dir.path();
    let cases: [&[&str]; 5] = [
        &["run", "--rule", "median", "--out", "x"],
        &["run", "--config", "missing.toml", "--out", "x"],
        &["run", "--rounds", "0", "--out", "x"],
        &["rank", "absent.csv"],
        &["evaluate", "--data", "nowhere", "--pred", "p"],
    ];
    for args in cases {
        let out = fedstroke(args, cwd);
        assert!(!out.status.success(), "{args:?} succeeded");
        assert!(
            String::from_utf8_lossy(&out.stderr).contains("error"),
            "{args:?}"
        );
    }
    let bad_config = cwd.join("bad.toml");
    fs::write(&bad_config, "rounds = \"many\"").unwrap();
    assert!(
        !fedstroke(&["run", "--config", "bad.toml", "--out", "x"], cwd)
            .status
            .success()
    );
}
