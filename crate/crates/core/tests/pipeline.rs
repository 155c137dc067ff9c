use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};

use cfbench::bench::{run_benchmark, validate_config, write_report, ReportOptions, RunOptions, RunRecord};
use cfbench::fetch::sha256_hex;
use cfbench::generators::{Family, Generator, GeneratorRequest, Registry, SearchOutcome};

fn data_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../data")
}

fn write_config(dir: &Path, generators: &str, extra_dataset: &str) -> PathBuf {
    let data = data_dir();
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
{extra_dataset}
{generators}
"#,
        d = data.display()
    );
    let path = dir.join("run.toml");
    std::fs::write(&path, text).unwrap();
    path
}

const TWO_GENERATORS: &str = r#"
[[generator]]
name = "gradient"

[[generator]]
name = "greedy_mean"
"#;

/// Returns the factual unchanged except for the first coordinate, which it
/// pushes far in both directions until the class flips.
struct Probe;

impl Generator for Probe {
    fn name(&self) -> &str {
        "probe"
    }

    fn family(&self) -> Family {
        Family::Heuristic
    }

    fn search(&self, req: &GeneratorRequest<'_>) -> SearchOutcome {
        for delta in [1.0, -1.0, 10.0, -10.0] {
            let mut c = req.x.to_vec();
            c[0] += delta;
            if req.flips(&c) {
                return SearchOutcome {
                    counterfactual: Some(c),
                    iterations: 1,
                    diagnostic: None,
                };
            }
        }
        SearchOutcome {
            counterfactual: None,
            iterations: 4,
            diagnostic: Some("no flip".into()),
        }
    }
}

#[test]
fn record_count_and_header() {
    let tmp = tempfile::tempdir().unwrap();
    let config = write_config(tmp.path(), TWO_GENERATORS, "");
    let registry = Registry::with_builtins();
    let cfg = validate_config(&config, &registry).unwrap();
    let options = RunOptions {
        out_dir: Some(tmp.path().join("out")),
        ..RunOptions::default()
    };
    let outcome = run_benchmark(&cfg, &registry, &options).unwrap();
    // 2 generators x 6 factuals x 2 runs
    assert_eq!(outcome.records_written, 24);

    let run = RunRecord::load(&outcome.records_path).unwrap();
    assert_eq!(run.records.len(), 24);
    let text = std::fs::read_to_string(&config).unwrap();
    assert_eq!(run.header.config_sha256, sha256_hex(text.as_bytes()));
    assert_eq!(run.datasets.len(), 1);
    assert_eq!(run.datasets[0].factuals.len(), 6);
    assert!(outcome.out_dir.join("models/linear2d.model.json").exists());

    let seeds: BTreeSet<(String, u8, u64)> = run
        .records
        .iter()
        .map(|r| (r.record.generator.clone(), r.run, r.record.seed))
        .collect();
    for g in ["gradient", "greedy_mean"] {
        let s0 = seeds.iter().find(|s| s.0 == g && s.1 == 0).unwrap().2;
        let s1 = seeds.iter().find(|s| s.0 == g && s.1 == 1).unwrap().2;
        assert_eq!(s1, s0 + 1);
    }
}

#[test]
fn every_generator_sees_the_same_factuals() {
    let tmp = tempfile::tempdir().unwrap();
    let mut registry = Registry::with_builtins();
    registry
        .register("probe", Box::new(|_, _| Ok(Box::new(Probe) as Box<dyn Generator>)))
        .unwrap();
    let gens = format!("{TWO_GENERATORS}\n[[generator]]\nname = \"probe\"\n");
    let config = write_config(tmp.path(), &gens, "");
    let cfg = validate_config(&config, &registry).unwrap();
    let options = RunOptions {
        out_dir: Some(tmp.path().join("out")),
        ..RunOptions::default()
    };
    let outcome = run_benchmark(&cfg, &registry, &options).unwrap();
    let run = RunRecord::load(&outcome.records_path).unwrap();

    let mut per_generator: BTreeMap<String, BTreeSet<usize>> = BTreeMap::new();
    for r in &run.records {
        per_generator
            .entry(r.record.generator.clone())
            .or_default()
            .insert(r.record.factual_row);
    }
    assert_eq!(per_generator.len(), 3);
    let first = per_generator.values().next().unwrap();
    assert!(per_generator.values().all(|rows| rows == first));
    assert_eq!(run.families()["probe"], Family::Heuristic);

    let files = write_report(&run, &outcome.out_dir, &ReportOptions::default()).unwrap();
    for name in ["ranks.csv", "coverage.csv", "stability.csv", "time.csv", "report.md"] {
        assert!(files.iter().any(|f| f.ends_with(name)), "missing {name}");
    }
    let ranks = std::fs::read_to_string(outcome.out_dir.join("ranks.csv")).unwrap();
    assert!(ranks.contains("probe"));
}

#[test]
fn missing_schema_fails_before_any_work() {
    let tmp = tempfile::tempdir().unwrap();
    let bad = "[[dataset]]\nschema = \"nowhere.schema.toml\"\ndata = \"nowhere.csv\"\n";
    let config = write_config(tmp.path(), TWO_GENERATORS, bad);
    let errs = validate_config(&config, &Registry::with_builtins()).unwrap_err();
    assert!(errs.iter().any(|e| e.contains("nowhere.schema.toml")), "{errs:?}");
}

#[test]
fn failure_after_first_dataset_keeps_its_records() {
    let tmp = tempfile::tempdir().unwrap();
    let one_class = tmp.path().join("flat.csv");
    std::fs::write(&one_class, "x1,x2,side\n1,2,above\n2,3,above\n3,4,above\n").unwrap();
    let extra = format!(
        "[[dataset]]\nname = \"flat\"\nschema = \"{}/linear2d.schema.toml\"\ndata = \"{}\"\n",
        data_dir().display(),
        one_class.display()
    );
    let config = write_config(tmp.path(), TWO_GENERATORS, &extra);
    let registry = Registry::with_builtins();
    let cfg = validate_config(&config, &registry).unwrap();
    let options = RunOptions {
        out_dir: Some(tmp.path().join("out")),
        ..RunOptions::default()
    };
    let failure = run_benchmark(&cfg, &registry, &options).unwrap_err();
    assert_eq!(failure.records_written, 24);
    let run = RunRecord::load(failure.records_path.as_ref().unwrap()).unwrap();
    assert_eq!(run.records.len(), 24);
    assert!(failure.error.to_string().contains("load"), "{}", failure.error);
}
