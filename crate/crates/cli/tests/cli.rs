use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use fedval_cli::{CompareManifest, RunManifest};
use fedval_core::MetricRecord;

const SMALL: &str = r#"
rounds = 4
clients_per_round = 4
selection_seed = 11

[task]
type = "synthetic"
classes = 3
features = 4
samples = 600
separation = 4.0
seed = 1

[partition]
scheme = { type = "iid" }
client_count = 8
seed = 2

[model]
layer_sizes = [4, 8, 3]
seed = 3

[train]
epochs = 2
batch_size = 16
learning_rate = 0.05
seed = 4

[strategy]
kind = { type = "fedval" }
"#;

fn fedval(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_fedval"))
        .args(args)
        .env_remove("FEDVAL_WORKERS")
        .output()
        .expect("binary runs")
}

fn write_config(dir: &Path, name: &str, text: &str) -> PathBuf {
    let path = dir.join(name);
    fs::write(&path, text).unwrap();
    path
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

#[test]
fn run_writes_artifacts() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), "exp.toml", SMALL);
    let out = tmp.path().join("out");
    let o = fedval(&["run", s(&cfg), "--out", s(&out)]);
    assert!(o.status.success(), "{}", stderr(&o));
    for f in [
        "metrics.csv",
        "rounds.jsonl",
        "final_model.json",
        "manifest.json",
        "config.toml",
    ] {
        assert!(out.join(f).is_file(), "{f} missing");
    }

    let csv = fs::read_to_string(out.join("metrics.csv")).unwrap();
    let header: Vec<&str> = csv.lines().next().unwrap().split(',').collect();
    assert_eq!(header, MetricRecord::FIELDS);
    assert_eq!(csv.lines().count(), 1 + 4);

    let logs = fs::read_to_string(out.join("rounds.jsonl")).unwrap();
    assert_eq!(logs.lines().count(), 4);
    for line in logs.lines() {
        let v: serde_json::Value = serde_json::from_str(line).unwrap();
        assert_eq!(v["selected"].as_array().unwrap().len(), 4);
    }

    let manifest: RunManifest =
        serde_json::from_str(&fs::read_to_string(out.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest.strategy, "fedval");
    assert_eq!(manifest.rounds, 4);
    assert!(manifest.config_hash.starts_with("sha256:"));

    let model: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(out.join("final_model.json")).unwrap()).unwrap();
    assert_eq!(
        model["params"].as_array().unwrap().len(),
        4 * 8 + 8 + 8 * 3 + 3
    );

    // The canonical copy hashes the same as the original.
    let again = tmp.path().join("again");
    let o = fedval(&["run", s(&out.join("config.toml")), "--out", s(&again)]);
    assert!(o.status.success(), "{}", stderr(&o));
    let second: RunManifest =
        serde_json::from_str(&fs::read_to_string(again.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(second.config_hash, manifest.config_hash);
    assert_eq!(fs::read(again.join("metrics.csv")).unwrap(), csv.as_bytes());
}

#[test]
fn metrics_do_not_depend_on_workers() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(
        tmp.path(),
        "exp.toml",
        &SMALL.replace("{ type = \"iid\" }", "{ type = \"lda\", alpha = 0.5 }"),
    );
    let mut outputs = Vec::new();
    for (i, workers) in ["1", "1", "4"].iter().enumerate() {
        let out = tmp.path().join(format!("out{i}"));
        let o = fedval(&["run", s(&cfg), "--out", s(&out), "--workers", workers]);
        assert!(o.status.success(), "{}", stderr(&o));
        outputs.push(fs::read(out.join("metrics.csv")).unwrap());
    }
    let env_out = tmp.path().join("env");
    let o = Command::new(env!("CARGO_BIN_EXE_fedval"))
        .args(["run", s(&cfg), "--out", s(&env_out)])
        .env("FEDVAL_WORKERS", "3")
        .output()
        .unwrap();
    assert!(o.status.success(), "{}", stderr(&o));
    outputs.push(fs::read(env_out.join("metrics.csv")).unwrap());
    assert!(outputs.windows(2).all(|w| w[0] == w[1]));
}

#[test]
fn invalid_config_names_the_field() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(
        tmp.path(),
        "bad.toml",
        &SMALL.replace("clients_per_round = 4", "clients_per_round = 9"),
    );
    let o = fedval(&["run", s(&cfg), "--out", s(&tmp.path().join("o"))]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("clients_per_round"), "{}", stderr(&o));

    let typo = write_config(
        tmp.path(),
        "typo.toml",
        &SMALL.replace("selection_seed", "selection_sed"),
    );
    let o = fedval(&["run", s(&typo), "--out", s(&tmp.path().join("o"))]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("selection_sed"), "{}", stderr(&o));
}

#[test]
fn missing_config_is_a_runtime_error() {
    let tmp = tempfile::tempdir().unwrap();
    let o = fedval(&[
        "run",
        s(&tmp.path().join("nope.toml")),
        "--out",
        s(tmp.path()),
    ]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn usage_errors_exit_with_one() {
    assert_eq!(fedval(&["run"]).status.code(), Some(1));
    assert_eq!(
        fedval(&["prob", "--n", "30", "--p", "0.1", "--rounds", "1"])
            .status
            .code(),
        Some(1)
    );
    assert_eq!(fedval(&["--help"]).status.code(), Some(0));
}

#[test]
fn compare_shares_selection_and_writes_long_csv() {
    let tmp = tempfile::tempdir().unwrap();
    let attack = "[attack]\nkind = { type = \"pga\", scale_factor = 2.0, ascent_epochs = 1 }\n\
                  malicious_fraction = 0.1\nplacement_seed = 3\n";
    let cfg = write_config(tmp.path(), "exp.toml", &format!("{SMALL}\n{attack}"));
    let out = tmp.path().join("cmp");
    let o = fedval(&[
        "compare",
        s(&cfg),
        "--strategies",
        "fedavg,fedval,fedprox:2",
        "--out",
        s(&out),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));

    let manifest: CompareManifest =
        serde_json::from_str(&fs::read_to_string(out.join("manifest.json")).unwrap()).unwrap();
    let dirs: Vec<&str> = manifest.runs.iter().map(|r| r.dir.as_str()).collect();
    assert_eq!(dirs, ["fedavg", "fedval", "fedprox-2"]);

    let selected = |dir: &str| -> Vec<serde_json::Value> {
        fs::read_to_string(out.join(dir).join("rounds.jsonl"))
            .unwrap()
            .lines()
            .map(|l| serde_json::from_str::<serde_json::Value>(l).unwrap()["selected"].clone())
            .collect()
    };
    assert_eq!(selected("fedavg"), selected("fedval"));
    assert_eq!(selected("fedavg"), selected("fedprox-2"));

    let combined = fs::read_to_string(out.join("combined.csv")).unwrap();
    let mut lines = combined.lines();
    assert_eq!(lines.next(), Some("strategy,round,metric,value"));
    let accuracy_rows: Vec<Vec<&str>> = lines
        .map(|l| l.split(',').collect::<Vec<_>>())
        .filter(|r| r[2] == "overall_accuracy")
        .collect();
    for strategy in ["fedavg", "fedval", "fedprox:2"] {
        let rounds: Vec<&str> = accuracy_rows
            .iter()
            .filter(|r| r[0] == strategy)
            .map(|r| r[1])
            .collect();
        assert_eq!(rounds, ["1", "2", "3", "4"], "{strategy}");
    }
}

#[test]
fn compare_rejects_bad_strategy_lists() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), "exp.toml", SMALL);
    let out = tmp.path().join("cmp");
    for list in ["", "fedavg,fedavg", "fedavg,bogus"] {
        let o = fedval(&["compare", s(&cfg), "--strategies", list, "--out", s(&out)]);
        assert_eq!(o.status.code(), Some(1), "{list:?}: {}", stderr(&o));
    }
}

#[test]
fn prob_prints_one_row_per_round_count() {
    let o = fedval(&[
        "prob",
        "--n",
        "30",
        "--p",
        "0.1",
        "--k0",
        "9",
        "--rounds",
        "1,100,25000",
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let text = String::from_utf8(o.stdout).unwrap();
    let rows: Vec<Vec<&str>> = text
        .lines()
        .skip(1)
        .map(|l| l.split('\t').collect())
        .collect();
    assert_eq!(rows.len(), 3);
    let once: Vec<f64> = rows.iter().map(|r| r[3].parse().unwrap()).collect();
    assert!(once.windows(2).all(|w| w[0] <= w[1]));
    assert!(once[2] > 0.99);

    let o = fedval(&[
        "prob",
        "--n",
        "30",
        "--p",
        "0",
        "--threshold",
        "0.4",
        "--rounds",
        "5",
    ]);
    let text = String::from_utf8(o.stdout).unwrap();
    let row: Vec<&str> = text.lines().nth(1).unwrap().split('\t').collect();
    assert_eq!(row[0], "9");
    assert_eq!(row[2].parse::<f64>().unwrap(), 0.0);
    assert_eq!(row[3].parse::<f64>().unwrap(), 0.0);
}

#[test]
fn csv_paths_resolve_against_the_config() {
    let tmp = tempfile::tempdir().unwrap();
    let data_dir = tmp.path().join("data");
    fs::create_dir(&data_dir).unwrap();
    let mut rows = String::from("a,b,label,region\n");
    for i in 0..120 {
        let y = i % 2;
        let shift = if y == 1 { 3.0 } else { 0.0 };
        rows.push_str(&format!(
            "{},{},{y},{}\n",
            shift + (i % 7) as f64 * 0.1,
            (i % 5) as f64 * 0.2 - shift,
            ["n", "s"][i % 3 % 2]
        ));
    }
    fs::write(data_dir.join("table.csv"), rows).unwrap();
    let config = SMALL
        .replace(
            "type = \"synthetic\"\nclasses = 3\nfeatures = 4\nsamples = 600\nseparation = 4.0\nseed = 1",
            "type = \"csv\"\npath = \"data/table.csv\"\nschema = { feature_columns = [\"a\", \"b\"], label_column = \"label\", group_column = \"region\" }",
        )
        .replace("[4, 8, 3]", "[2, 4, 2]")
        + "\n[holdout]\nvalidation_per_label = 3\n";
    let cfg = write_config(tmp.path(), "exp.toml", &config);
    // Run from a different working directory.
    let o = Command::new(env!("CARGO_BIN_EXE_fedval"))
        .current_dir(std::env::temp_dir())
        .args(["run", s(&cfg), "--out", s(&tmp.path().join("out"))])
        .output()
        .unwrap();
    assert!(o.status.success(), "{}", stderr(&o));
}

#[test]
fn shipped_configs_are_valid() {
    let dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs");
    let mut count = 0;
    for entry in fs::read_dir(&dir).unwrap() {
        let path = entry.unwrap().path();
        if path.extension().is_some_and(|e| e == "toml") {
            fedval_cli::load_config(&path).unwrap_or_else(|e| panic!("{}: {e}", path.display()));
            count += 1;
        }
    }
    assert!(count >= 4);
}
