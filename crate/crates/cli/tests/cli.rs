use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn data_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../data")
}

fn cfbench(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_cfbench"))
        .args(args)
        .env_remove("CFBENCH_DATA_DIR")
        .env_remove("CFBENCH_JOBS")
        .output()
        .unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn small_config(dir: &Path, extra: &str) -> String {
    let d = data_dir();
    let text = format!(
        r#"
factuals_per_class = 3

[seeds]
split = 1
model = 2
factuals = 3
generators = 4

[grid]
neurons = [8]
learning_rates = [0.01]
epochs = [50]

[[dataset]]
schema = "{d}/linear2d.schema.toml"
data = "{d}/linear2d.csv"

[[dataset]]
schema = "{d}/tilted.schema.toml"
data = "{d}/tilted.csv"
{extra}
[[generator]]
name = "gradient"

[[generator]]
name = "spheres"

[[generator]]
name = "greedy_mean"
"#,
        d = d.display()
    );
    let path = dir.join("run.toml");
    std::fs::write(&path, text).unwrap();
    path.to_string_lossy().into_owned()
}

#[test]
fn validate_bundled_config() {
    let config = data_dir().join("synthetic.run.toml");
    let o = cfbench(&["--config", config.to_str().unwrap(), "validate"]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(stdout(&o).starts_with("ok: 2 datasets, 4 generators"), "{}", stdout(&o));
}

#[test]
fn invalid_config_exits_1() {
    let tmp = tempfile::tempdir().unwrap();
    let missing = "[[dataset]]\nschema = \"absent.schema.toml\"\ndata = \"absent.csv\"\n";
    let config = small_config(tmp.path(), missing);
    let o = cfbench(&["--config", &config, "validate"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("absent.schema.toml"), "{}", stderr(&o));

    let o = cfbench(&["--config", &config, "--out", tmp.path().join("out").to_str().unwrap(), "run"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(!tmp.path().join("out").exists());
}

#[test]
fn usage_errors_exit_1() {
    assert_eq!(cfbench(&["frobnicate"]).status.code(), Some(1));
    assert_eq!(cfbench(&["validate"]).status.code(), Some(1));
    assert_eq!(cfbench(&["rank", "--records", "/nonexistent/records.jsonl"]).status.code(), Some(1));
    assert!(cfbench(&["--help"]).status.success());
}

#[test]
fn runtime_failure_exits_2_and_partial_exits_3() {
    let tmp = tempfile::tempdir().unwrap();
    let flat = tmp.path().join("flat.csv");
    std::fs::write(&flat, "x1,x2,side\n1,2,above\n2,3,above\n").unwrap();
    let d = data_dir();

    // the only dataset fails: nothing written
    let only = format!(
        "factuals_per_class = 2\n[seeds]\nsplit = 1\nmodel = 2\nfactuals = 3\ngenerators = 4\n\
         [[dataset]]\nschema = \"{}/linear2d.schema.toml\"\ndata = \"{}\"\n[[generator]]\nname = \"greedy_mean\"\n",
        d.display(),
        flat.display()
    );
    let only_path = tmp.path().join("only.toml");
    std::fs::write(&only_path, only).unwrap();
    let o = cfbench(&["--config", only_path.to_str().unwrap(), "--out", tmp.path().join("a").to_str().unwrap(), "run"]);
    assert_eq!(o.status.code(), Some(2), "{}", stderr(&o));

    // a later dataset fails after records were written
    let extra = format!(
        "[[dataset]]\nname = \"flat\"\nschema = \"{}/linear2d.schema.toml\"\ndata = \"{}\"\n",
        d.display(),
        flat.display()
    );
    let config = small_config(tmp.path(), &extra);
    let out = tmp.path().join("b");
    let o = cfbench(&["--config", &config, "--out", out.to_str().unwrap(), "run"]);
    assert_eq!(o.status.code(), Some(3), "{}", stderr(&o));
    let lines = std::fs::read_to_string(out.join("records.jsonl")).unwrap();
    assert!(lines.lines().count() > 1);
}

#[test]
fn run_rank_report_recommend() {
    let tmp = tempfile::tempdir().unwrap();
    let config = small_config(tmp.path(), "");
    let out = tmp.path().join("out");
    let out_s = out.to_str().unwrap();

    let o = cfbench(&["--config", &config, "--out", out_s, "--jobs", "2", "run"]);
    assert!(o.status.success(), "{}", stderr(&o));
    // 2 datasets x 6 factuals x 3 generators x 2 runs
    assert!(stdout(&o).starts_with("72 records written"), "{}", stdout(&o));
    for f in ["records.jsonl", "ranks.csv", "coverage.csv", "stability.csv", "time.csv", "report.md"] {
        assert!(out.join(f).exists(), "missing {f}");
    }
    assert!(out.join("trees").read_dir().unwrap().next().is_some());

    let records = out.join("records.jsonl");
    let rec = records.to_str().unwrap();
    let rank_dir = tmp.path().join("ranked");
    let o = cfbench(&[
        "--out",
        rank_dir.to_str().unwrap(),
        "rank",
        "--records",
        rec,
        "--metric",
        "l2",
        "--mode",
        "valid-only",
        "--iman-davenport",
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let text = stdout(&o);
    assert!(text.contains("gradient") && text.contains("greedy_mean"), "{text}");
    assert!(text.contains("Iman-Davenport"), "{text}");
    let csv = std::fs::read_to_string(rank_dir.join("ranks.csv")).unwrap();
    assert!(csv.lines().count() > 1);

    assert_eq!(cfbench(&["rank", "--records", rec, "--metric", "speed"]).status.code(), Some(1));

    let report_dir = tmp.path().join("report");
    let o = cfbench(&["--out", report_dir.to_str().unwrap(), "report", "--records", rec]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(report_dir.join("report.md").exists());

    let query = [
        "--neurons",
        "8",
        "--auc-test",
        "0.99",
        "--rows-train",
        "240",
        "--columns-numerical",
        "2",
        "--columns-categorical",
        "0",
        "--factual-prediction",
        "0.9",
        "--factual-share",
        "0.5",
    ];
    let mut args = vec!["recommend", "--records", rec, "--metric", "l2", "--show-tree"];
    args.extend_from_slice(&query);
    let o = cfbench(&args);
    assert!(o.status.success(), "{}", stderr(&o));
    let text = stdout(&o);
    assert!(text.starts_with("l2: "), "{text}");
    assert!(text.contains("features: "), "{text}");

    let mut args = vec!["recommend", "--records", rec, "--family", "--metric", "coverage"];
    args.extend_from_slice(&query);
    let o = cfbench(&args);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(stdout(&o).contains("CO") || stdout(&o).contains("HE"), "{}", stdout(&o));
}

#[test]
fn fetch_without_urls_is_a_no_op() {
    let config = data_dir().join("synthetic.run.toml");
    let o = cfbench(&["--config", config.to_str().unwrap(), "fetch"]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(stdout(&o).contains("no dataset"));
}
