use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use log::warn;
use serde::Serialize;

use super::run::{RecordLine, RunRecord};
use crate::error::{Error, Result};
use crate::metrics::{Metric, ValidityMode};
use crate::ranking::{grouping_tables, tables_to_csv, tables_to_markdown, RankOptions};
use crate::recommender::{build_rows, export_tree, fit_rows, TargetMap, DEFAULT_MAX_DEPTH};

#[derive(Clone, Debug)]
pub struct ReportOptions {
    pub modes: Vec<ValidityMode>,
    pub rank: RankOptions,
    pub max_depth: usize,
}

impl Default for ReportOptions {
    fn default() -> Self {
        Self {
            modes: ValidityMode::ALL.to_vec(),
            rank: RankOptions::default(),
            max_depth: DEFAULT_MAX_DEPTH,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CoverageRow {
    pub generator: String,
    pub grouping: String,
    pub records: usize,
    pub coverage: f64,
    pub realistic: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct StabilityRow {
    pub generator: String,
    pub mean: f64,
    pub min_by_kind: f64,
    pub max_by_kind: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct TimeRow {
    pub generator: String,
    pub columns: usize,
    pub records: usize,
    pub mean_seconds: f64,
}

fn generator_order(run: &RunRecord) -> Vec<String> {
    run.header.generators.iter().map(|g| g.name.clone()).collect()
}

fn groupings_of(r: &RecordLine) -> [String; 2] {
    ["all".to_string(), r.dataset_kind.to_string()]
}

/// Share of records with a valid counterfactual, and with a valid and
/// realistic one, per generator and dataset kind (plus `all`).
pub fn coverage_rows(run: &RunRecord) -> Vec<CoverageRow> {
    let mut acc: BTreeMap<(String, String), (usize, usize, usize)> = BTreeMap::new();
    for r in &run.records {
        for g in groupings_of(r) {
            let e = acc.entry((r.record.generator.clone(), g)).or_default();
            e.0 += 1;
            e.1 += usize::from(r.metrics.coverage);
            e.2 += usize::from(r.metrics.eligible(ValidityMode::ValidAndRealistic));
        }
    }
    let mut out = Vec::new();
    for name in generator_order(run) {
        for ((g, grouping), (n, v, real)) in &acc {
            if *g == name {
                out.push(CoverageRow {
                    generator: g.clone(),
                    grouping: grouping.clone(),
                    records: *n,
                    coverage: *v as f64 / *n as f64,
                    realistic: *real as f64 / *n as f64,
                });
            }
        }
    }
    out
}

/// Mean stability per generator over first-run records (a failed pair
/// counts 0), with its minimum and maximum across dataset kinds.
pub fn stability_rows(run: &RunRecord) -> Vec<StabilityRow> {
    let mut out = Vec::new();
    for name in generator_order(run) {
        let mut by_kind: BTreeMap<String, (f64, usize)> = BTreeMap::new();
        let mut total = (0.0, 0usize);
        for r in run.records.iter().filter(|r| r.run == 0 && r.record.generator == name) {
            let s = f64::from(r.metrics.stability.unwrap_or(0));
            let e = by_kind.entry(r.dataset_kind.to_string()).or_default();
            e.0 += s;
            e.1 += 1;
            total.0 += s;
            total.1 += 1;
        }
        if total.1 == 0 {
            continue;
        }
        let means: Vec<f64> = by_kind.values().map(|(s, n)| s / *n as f64).collect();
        out.push(StabilityRow {
            generator: name,
            mean: total.0 / total.1 as f64,
            min_by_kind: means.iter().copied().fold(f64::INFINITY, f64::min),
            max_by_kind: means.iter().copied().fold(f64::NEG_INFINITY, f64::max),
        });
    }
    out
}

/// Mean generation time per generator and dataset feature-column count.
pub fn time_rows(run: &RunRecord) -> Vec<TimeRow> {
    let columns: BTreeMap<&str, usize> = run.datasets.iter().map(|d| (d.name.as_str(), d.feature_columns())).collect();
    let mut out = Vec::new();
    for name in generator_order(run) {
        let mut acc: BTreeMap<usize, (f64, usize)> = BTreeMap::new();
        for r in run.records.iter().filter(|r| r.record.generator == name) {
            let c = columns.get(r.dataset.as_str()).copied().unwrap_or(0);
            let e = acc.entry(c).or_default();
            e.0 += r.metrics.ct;
            e.1 += 1;
        }
        for (c, (s, n)) in acc {
            out.push(TimeRow {
                generator: name.clone(),
                columns: c,
                records: n,
                mean_seconds: s / n as f64,
            });
        }
    }
    out
}

fn to_csv<T: Serialize>(rows: &[T]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in rows {
        w.serialize(r)?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Config(e.to_string()))?;
    Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
}

fn write(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Writes rank tables, coverage, stability, timing, recommender trees and
/// a markdown summary into `out_dir`. Returns the files written.
pub fn write_report(run: &RunRecord, out_dir: &Path, options: &ReportOptions) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(out_dir.join("trees")).map_err(|e| Error::io(out_dir, e))?;
    let mut files = Vec::new();
    let mut emit = |name: &str, text: &str| -> Result<()> {
        let p = out_dir.join(name);
        write(&p, text)?;
        files.push(p);
        Ok(())
    };

    let scored = run.scored();
    let tables = grouping_tables(&scored, &options.modes, &Metric::ALL, &options.rank)?;
    emit("ranks.csv", &tables_to_csv(&tables)?)?;
    let coverage = coverage_rows(run);
    emit("coverage.csv", &to_csv(&coverage)?)?;
    let stability = stability_rows(run);
    emit("stability.csv", &to_csv(&stability)?)?;
    let time = time_rows(run);
    emit("time.csv", &to_csv(&time)?)?;

    let profiles = run.profiles();
    let families = TargetMap::Family(run.families());
    for &mode in &options.modes {
        for metric in Metric::ALL {
            for (prefix, targets) in [("algorithm", &TargetMap::Algorithm), ("family", &families)] {
                let rows = build_rows(&scored, &profiles, metric, mode, targets)?;
                if rows.is_empty() {
                    warn!("no eligible rows for a {prefix} tree on {metric} ({mode})");
                    continue;
                }
                let tree = fit_rows(&rows, options.max_depth)?;
                emit(&format!("trees/{prefix}-{mode}-{metric}.txt"), &export_tree(&tree))?;
            }
        }
    }

    let mut md = String::new();
    let _ = writeln!(md, "# Benchmark report\n");
    let _ = writeln!(md, "Config SHA-256 `{}`, version {}.\n", run.header.config_sha256, run.header.version);
    let _ = writeln!(md, "## Models\n");
    let _ = writeln!(md, "| dataset | kind | hidden | learning rate | epochs | AUC valid | AUC test | factuals |");
    let _ = writeln!(md, "|---|---|---:|---:|---:|---:|---:|---:|");
    for d in &run.datasets {
        let _ = writeln!(
            md,
            "| {} | {} | {} | {} | {} | {:.4} | {:.4} | {} |",
            d.name,
            d.kind,
            d.selected.n_hidden,
            d.selected.learning_rate,
            d.selected.epochs,
            d.eval.auc_valid,
            d.eval.auc_test,
            d.factuals.len()
        );
    }
    let _ = writeln!(md, "\n## Coverage\n");
    let _ = writeln!(md, "| generator | grouping | records | valid | valid and realistic |");
    let _ = writeln!(md, "|---|---|---:|---:|---:|");
    for c in &coverage {
        let _ = writeln!(
            md,
            "| {} | {} | {} | {:.3} | {:.3} |",
            c.generator, c.grouping, c.records, c.coverage, c.realistic
        );
    }
    let _ = writeln!(md, "\n## Stability\n");
    let _ = writeln!(md, "| generator | mean | min by kind | max by kind |");
    let _ = writeln!(md, "|---|---:|---:|---:|");
    for s in &stability {
        let _ = writeln!(md, "| {} | {:.3} | {:.3} | {:.3} |", s.generator, s.mean, s.min_by_kind, s.max_by_kind);
    }
    let _ = writeln!(md, "\n## Time\n");
    let _ = writeln!(md, "| generator | columns | records | mean seconds |");
    let _ = writeln!(md, "|---|---:|---:|---:|");
    for t in &time {
        let _ = writeln!(md, "| {} | {} | {} | {:.6} |", t.generator, t.columns, t.records, t.mean_seconds);
    }
    let _ = writeln!(md, "\n## Mean ranks\n");
    md.push_str(&tables_to_markdown(&tables));
    let _ = writeln!(
        md,
        "\n---\nTimes depend on the machine; compare them only within one run."
    );
    emit("report.md", &md)?;
    Ok(files)
}
