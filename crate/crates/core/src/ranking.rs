//! Tie-averaged ranking, Friedman test and Nemenyi post-hoc analysis.
//!
//! For each factual row, the algorithms are ranked on one metric. Algorithms
//! that failed on that row (no valid counterfactual, or an unrealistic one
//! when realism is required) share the worst ranks. Mean ranks per
//! algorithm are then tested with Friedman's chi-square, and the Nemenyi
//! critical difference marks the set of algorithms indistinguishable from
//! the best.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;

use log::warn;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ChiSquared, ContinuousCDF, FisherSnedecor};

use crate::error::{Error, Result};
use crate::metrics::{Direction, Metric, MetricVector, ValidityMode};
use crate::schema::DatasetKind;

pub const DEFAULT_ALPHA: f64 = 0.05;

/// Nemenyi `q` at alpha 0.05 for k = 2..=20 (studentized range statistic
/// over sqrt 2, infinite degrees of freedom).
pub const NEMENYI_Q_05: [f64; 19] = [
    1.960, 2.343, 2.569, 2.728, 2.850, 2.949, 3.031, 3.102, 3.164, 3.219, 3.268, 3.313, 3.354, 3.391, 3.426,
    3.458, 3.489, 3.517, 3.544,
];

/// Ranks one row. Entries that are ineligible or have no finite value
/// share the worst ranks; the rest are ranked by value with ties averaged.
pub fn rank_row(values: &[Option<f64>], direction: Direction, eligible: &[bool]) -> Result<Vec<f64>> {
    let k = values.len();
    if k < 2 {
        return Err(Error::Stats(format!("ranking needs at least 2 algorithms, got {k}")));
    }
    if eligible.len() != k {
        return Err(Error::Stats("eligibility flags and values differ in length".into()));
    }
    let mut ok: Vec<(usize, f64)> = values
        .iter()
        .zip(eligible)
        .enumerate()
        .filter_map(|(j, (v, &e))| v.filter(|v| e && v.is_finite()).map(|v| (j, v)))
        .collect();
    ok.sort_by(|a, b| {
        let ord = a.1.total_cmp(&b.1);
        match direction {
            Direction::LowerBetter => ord,
            Direction::HigherBetter => ord.reverse(),
        }
    });
    let mut ranks = vec![0.0; k];
    let mut start = 0;
    while start < ok.len() {
        let mut end = start + 1;
        while end < ok.len() && ok[end].1 == ok[start].1 {
            end += 1;
        }
        // positions start+1 ..= end share their average
        let avg = (start + 1 + end) as f64 / 2.0;
        for &(j, _) in &ok[start..end] {
            ranks[j] = avg;
        }
        start = end;
    }
    let e = ok.len();
    if e < k {
        let worst = (e + 1 + k) as f64 / 2.0;
        for (j, r) in ranks.iter_mut().enumerate() {
            if !ok.iter().any(|&(i, _)| i == j) {
                *r = worst;
            }
        }
    }
    Ok(ranks)
}

/// Per-factual rank rows for one metric on one grouping.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RankMatrix {
    pub grouping: String,
    pub metric: Metric,
    pub mode: ValidityMode,
    pub algorithms: Vec<String>,
    pub rows: Vec<Vec<f64>>,
}

pub fn mean_ranks(rows: &[Vec<f64>]) -> Vec<f64> {
    let Some(first) = rows.first() else {
        return Vec::new();
    };
    let q = rows.len() as f64;
    (0..first.len()).map(|j| rows.iter().map(|r| r[j]).sum::<f64>() / q).collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FriedmanResult {
    pub statistic: f64,
    pub p_value: f64,
    pub df: f64,
}

/// Friedman chi-square on tie-averaged ranks.
pub fn friedman_test(rows: &[Vec<f64>]) -> Result<FriedmanResult> {
    let q = rows.len();
    let k = rows.first().map_or(0, |r| r.len());
    if k < 3 {
        return Err(Error::Stats(format!("Friedman test needs k >= 3 algorithms, got {k}")));
    }
    if q < 2 {
        return Err(Error::Stats(format!("Friedman test needs at least 2 rows, got {q}")));
    }
    if rows.iter().any(|r| r.len() != k) {
        return Err(Error::Stats("rank rows differ in length".into()));
    }
    let rbar = mean_ranks(rows);
    let (kf, qf) = (k as f64, q as f64);
    let sum_sq: f64 = rbar.iter().map(|r| r * r).sum();
    let stat = (12.0 * qf / (kf * (kf + 1.0)) * (sum_sq - kf * (kf + 1.0).powi(2) / 4.0)).max(0.0);
    let df = kf - 1.0;
    let chi = ChiSquared::new(df).map_err(|e| Error::Stats(e.to_string()))?;
    Ok(FriedmanResult {
        statistic: stat,
        p_value: chi.sf(stat),
        df,
    })
}

/// Iman-Davenport F correction of a Friedman statistic: `(F, p)`.
pub fn iman_davenport(friedman: &FriedmanResult, k: usize, q: usize) -> Result<(f64, f64)> {
    let (kf, qf) = (k as f64, q as f64);
    let denom = qf * (kf - 1.0) - friedman.statistic;
    if denom <= 0.0 {
        return Ok((f64::INFINITY, 0.0));
    }
    let f = (qf - 1.0) * friedman.statistic / denom;
    let dist = FisherSnedecor::new(kf - 1.0, (kf - 1.0) * (qf - 1.0)).map_err(|e| Error::Stats(e.to_string()))?;
    Ok((f, dist.sf(f)))
}

pub fn nemenyi_q(k: usize, alpha: f64) -> Result<f64> {
    if (alpha - 0.05).abs() > 1e-12 {
        return Err(Error::Stats(format!("Nemenyi constants are embedded for alpha = 0.05 only, got {alpha}")));
    }
    if !(2..=20).contains(&k) {
        return Err(Error::Stats(format!("Nemenyi constants cover k = 2..20, got {k}")));
    }
    Ok(NEMENYI_Q_05[k - 2])
}

/// `CD = q * sqrt(k (k + 1) / (6 Q))`.
pub fn nemenyi_cd(k: usize, q_rows: usize, alpha: f64) -> Result<f64> {
    if q_rows == 0 {
        return Err(Error::Stats("critical difference needs at least one row".into()));
    }
    let q = nemenyi_q(k, alpha)?;
    let kf = k as f64;
    Ok(q * (kf * (kf + 1.0) / (6.0 * q_rows as f64)).sqrt())
}

/// All algorithms when the Friedman test does not reject; otherwise those
/// within `cd` of the best mean rank.
pub fn best_set(mean_ranks: &[f64], cd: f64, p_value: f64, alpha: f64) -> Vec<bool> {
    if p_value >= alpha {
        return vec![true; mean_ranks.len()];
    }
    let min = mean_ranks.iter().copied().fold(f64::INFINITY, f64::min);
    mean_ranks.iter().map(|r| r - min <= cd).collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RankTable {
    pub grouping: String,
    pub metric: Metric,
    pub mode: ValidityMode,
    pub algorithms: Vec<String>,
    pub mean_ranks: Vec<f64>,
    pub rows: usize,
    pub friedman: Option<FriedmanResult>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub iman_davenport: Option<(f64, f64)>,
    pub cd: Option<f64>,
    pub best: Vec<bool>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RankOptions {
    pub alpha: f64,
    pub iman_davenport: bool,
}

impl Default for RankOptions {
    fn default() -> Self {
        Self {
            alpha: DEFAULT_ALPHA,
            iman_davenport: false,
        }
    }
}

impl RankMatrix {
    /// Mean ranks, Friedman test (k >= 3, Q >= 2) and best set. Without a
    /// test every algorithm counts as best.
    pub fn table(&self, options: &RankOptions) -> Result<RankTable> {
        let k = self.algorithms.len();
        let q = self.rows.len();
        let rbar = mean_ranks(&self.rows);
        let friedman = if k >= 3 && q >= 2 { Some(friedman_test(&self.rows)?) } else { None };
        let cd = if q > 0 { Some(nemenyi_cd(k, q, options.alpha)?) } else { None };
        let best = match (friedman, cd) {
            (Some(f), Some(cd)) => best_set(&rbar, cd, f.p_value, options.alpha),
            _ => vec![true; k],
        };
        let id = match (options.iman_davenport, &friedman) {
            (true, Some(f)) => Some(iman_davenport(f, k, q)?),
            _ => None,
        };
        Ok(RankTable {
            grouping: self.grouping.clone(),
            metric: self.metric,
            mode: self.mode,
            algorithms: self.algorithms.clone(),
            mean_ranks: rbar,
            rows: q,
            friedman,
            iman_davenport: id,
            cd,
            best,
        })
    }
}

/// A scored generation attempt, as ranking sees it.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoredRecord {
    pub dataset: String,
    pub dataset_kind: DatasetKind,
    pub factual_row: usize,
    pub generator: String,
    /// 0 for the first stability run, 1 for the second.
    pub run: u8,
    pub metrics: MetricVector,
}

type FactualKey = (String, usize);

/// Builds the rank matrix of `metric` over the first-run records in
/// `records`. Algorithms appear in first-seen order; a factual missing an
/// algorithm's record treats it as ineligible.
pub fn build_matrix(
    grouping: &str,
    records: &[&ScoredRecord],
    metric: Metric,
    mode: ValidityMode,
) -> Result<Option<RankMatrix>> {
    let mut algorithms: Vec<String> = Vec::new();
    let mut by_factual: BTreeMap<FactualKey, BTreeMap<&str, &MetricVector>> = BTreeMap::new();
    for r in records.iter().filter(|r| r.run == 0) {
        if !algorithms.contains(&r.generator) {
            algorithms.push(r.generator.clone());
        }
        by_factual
            .entry((r.dataset.clone(), r.factual_row))
            .or_default()
            .insert(r.generator.as_str(), &r.metrics);
    }
    if by_factual.is_empty() || algorithms.len() < 2 {
        return Ok(None);
    }
    let mut rows = Vec::with_capacity(by_factual.len());
    for per_alg in by_factual.values() {
        let mut values = Vec::with_capacity(algorithms.len());
        let mut eligible = Vec::with_capacity(algorithms.len());
        for a in &algorithms {
            match per_alg.get(a.as_str()) {
                Some(m) => {
                    values.push(metric.value(m));
                    eligible.push(m.eligible(mode));
                }
                None => {
                    values.push(None);
                    eligible.push(false);
                }
            }
        }
        rows.push(rank_row(&values, metric.direction(), &eligible)?);
    }
    Ok(Some(RankMatrix {
        grouping: grouping.to_string(),
        metric,
        mode,
        algorithms,
        rows,
    }))
}

/// Grouping names present in `records`: `all`, each dataset kind, and one
/// `dataset:<name>` per dataset.
pub fn groupings(records: &[ScoredRecord]) -> Vec<String> {
    let mut out = vec!["all".to_string()];
    let kinds: BTreeSet<DatasetKind> = records.iter().map(|r| r.dataset_kind).collect();
    out.extend(kinds.iter().map(|k| k.to_string()));
    let mut names: Vec<&str> = Vec::new();
    for r in records {
        if !names.contains(&r.dataset.as_str()) {
            names.push(&r.dataset);
        }
    }
    out.extend(names.iter().map(|n| format!("dataset:{n}")));
    out
}

fn in_grouping(r: &ScoredRecord, grouping: &str) -> bool {
    match grouping {
        "all" => true,
        "numerical" => r.dataset_kind == DatasetKind::Numerical,
        "categorical" => r.dataset_kind == DatasetKind::Categorical,
        "mixed" => r.dataset_kind == DatasetKind::Mixed,
        g => g.strip_prefix("dataset:").is_some_and(|n| n == r.dataset),
    }
}

/// Rank tables for every grouping, validity mode and metric, in that order.
pub fn grouping_tables(
    records: &[ScoredRecord],
    modes: &[ValidityMode],
    metrics: &[Metric],
    options: &RankOptions,
) -> Result<Vec<RankTable>> {
    let mut jobs = Vec::new();
    for g in groupings(records) {
        for &mode in modes {
            for &metric in metrics {
                jobs.push((g.clone(), mode, metric));
            }
        }
    }
    let results: Vec<Result<Option<RankTable>>> = jobs
        .par_iter()
        .map(|(g, mode, metric)| {
            let members: Vec<&ScoredRecord> = records.iter().filter(|r| in_grouping(r, g)).collect();
            match build_matrix(g, &members, *metric, *mode)? {
                Some(m) => m.table(options).map(Some),
                None => Ok(None),
            }
        })
        .collect();
    let mut tables = Vec::new();
    let mut skipped = BTreeSet::new();
    for ((g, _, _), r) in jobs.iter().zip(results) {
        match r? {
            Some(t) => tables.push(t),
            None => {
                skipped.insert(g.clone());
            }
        }
    }
    for g in skipped {
        warn!("grouping `{g}` has too few algorithms or rows to rank; omitted");
    }
    Ok(tables)
}

pub fn tables_to_csv(tables: &[RankTable]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record([
        "grouping",
        "mode",
        "metric",
        "algorithm",
        "mean_rank",
        "best",
        "rows",
        "friedman_statistic",
        "friedman_p",
        "critical_difference",
    ])?;
    let opt = |v: Option<f64>| v.map(|v| v.to_string()).unwrap_or_default();
    for t in tables {
        for (j, a) in t.algorithms.iter().enumerate() {
            w.write_record([
                t.grouping.clone(),
                t.mode.to_string(),
                t.metric.to_string(),
                a.clone(),
                t.mean_ranks[j].to_string(),
                u8::from(t.best[j]).to_string(),
                t.rows.to_string(),
                opt(t.friedman.map(|f| f.statistic)),
                opt(t.friedman.map(|f| f.p_value)),
                opt(t.cd),
            ])?;
        }
    }
    let bytes = w.into_inner().map_err(|e| Error::Stats(e.to_string()))?;
    Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
}

/// One markdown table per (grouping, mode): algorithms as rows, metrics as
/// columns, best-set cells in bold.
pub fn tables_to_markdown(tables: &[RankTable]) -> String {
    let mut out = String::new();
    let mut sections: Vec<(&str, ValidityMode)> = Vec::new();
    for t in tables {
        if !sections.contains(&(t.grouping.as_str(), t.mode)) {
            sections.push((t.grouping.as_str(), t.mode));
        }
    }
    for (g, mode) in sections {
        let group: Vec<&RankTable> = tables.iter().filter(|t| t.grouping == g && t.mode == mode).collect();
        let mut algorithms: Vec<&str> = Vec::new();
        for t in &group {
            for a in &t.algorithms {
                if !algorithms.contains(&a.as_str()) {
                    algorithms.push(a);
                }
            }
        }
        let _ = writeln!(out, "### {g} ({mode})\n");
        let _ = write!(out, "| algorithm |");
        for t in &group {
            let _ = write!(out, " {} |", t.metric);
        }
        let _ = write!(out, "\n|---|");
        for _ in &group {
            out.push_str("---:|");
        }
        out.push('\n');
        for a in &algorithms {
            let _ = write!(out, "| {a} |");
            for t in &group {
                match t.algorithms.iter().position(|x| x == a) {
                    Some(j) if t.best[j] => {
                        let _ = write!(out, " **{:.2}** |", t.mean_ranks[j]);
                    }
                    Some(j) => {
                        let _ = write!(out, " {:.2} |", t.mean_ranks[j]);
                    }
                    None => out.push_str(" |"),
                }
            }
            out.push('\n');
        }
        if let Some(t) = group.first() {
            let _ = writeln!(out, "\nRows: {}. Bold marks the statistically best set.\n", t.rows);
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    use Direction::*;

    #[test]
    fn rank_row_examples() {
        let all = [true; 3];
        assert_eq!(
            rank_row(&[Some(1.0), Some(2.0), Some(2.0)], LowerBetter, &all).unwrap(),
            vec![1.0, 2.5, 2.5]
        );
        assert_eq!(
            rank_row(&[Some(0.3), None, Some(0.5)], HigherBetter, &all).unwrap(),
            vec![2.0, 3.0, 1.0]
        );
        assert_eq!(
            rank_row(&[Some(0.3), Some(0.1), Some(0.5)], HigherBetter, &[false, true, false]).unwrap(),
            vec![2.5, 1.0, 2.5]
        );
        assert!(rank_row(&[Some(1.0)], LowerBetter, &[true]).is_err());
    }

    #[test]
    fn mean_rank_examples() {
        assert_eq!(mean_ranks(&[vec![1.0, 2.0], vec![2.0, 1.0]]), vec![1.5, 1.5]);
        assert_eq!(mean_ranks(&[vec![2.0, 1.0, 3.0]]), vec![2.0, 1.0, 3.0]);
        let same = vec![vec![3.0, 1.0, 2.0]; 100];
        assert_eq!(mean_ranks(&same), vec![3.0, 1.0, 2.0]);
    }

    #[test]
    fn friedman_degenerate_and_errors() {
        let tied = vec![vec![2.0, 2.0, 2.0]; 5];
        let f = friedman_test(&tied).unwrap();
        assert_eq!(f.statistic, 0.0);
        assert_eq!(f.p_value, 1.0);
        assert!(friedman_test(&[vec![1.0, 2.0], vec![2.0, 1.0]]).is_err());
        assert!(friedman_test(&[vec![1.0, 2.0, 3.0]]).is_err());
    }

    #[test]
    fn friedman_column_permutation_invariant() {
        let rows = vec![vec![1.0, 2.0, 3.0, 4.0], vec![2.0, 1.0, 4.0, 3.0], vec![1.0, 3.0, 2.0, 4.0]];
        let perm: Vec<Vec<f64>> = rows.iter().map(|r| vec![r[2], r[0], r[3], r[1]]).collect();
        let a = friedman_test(&rows).unwrap();
        let b = friedman_test(&perm).unwrap();
        assert!((a.statistic - b.statistic).abs() < 1e-12);
    }

    #[test]
    fn cd_examples() {
        let cd = nemenyi_cd(2, 4, 0.05).unwrap();
        assert!((cd - 1.960 * (6.0f64 / 24.0).sqrt()).abs() < 1e-12);
        assert!(nemenyi_cd(1_000, 10, 0.05).is_err());
        assert!(nemenyi_cd(3, 10, 0.1).is_err());
        assert!(nemenyi_cd(2, 1_000_000_000, 0.05).unwrap() < 1e-4);
        for k in 2..=20 {
            let mut last = f64::INFINITY;
            for q in 1..50 {
                let cd = nemenyi_cd(k, q, 0.05).unwrap();
                assert!(cd < last);
                last = cd;
            }
        }
    }

    #[test]
    fn best_set_examples() {
        assert_eq!(best_set(&[1.2, 1.3, 4.0], 0.5, 0.01, 0.05), vec![true, true, false]);
        assert_eq!(best_set(&[1.2, 1.3, 4.0], 0.5, 0.2, 0.05), vec![true, true, true]);
        assert_eq!(best_set(&[3.0, 1.0, 2.0], 0.0, 0.0, 0.05), vec![false, true, false]);
    }

    fn rec(ds: &str, kind: DatasetKind, row: usize, g: &str, l2: Option<f64>, realistic: u8) -> ScoredRecord {
        ScoredRecord {
            dataset: ds.into(),
            dataset_kind: kind,
            factual_row: row,
            generator: g.into(),
            run: 0,
            metrics: MetricVector {
                coverage: u8::from(l2.is_some()),
                l2,
                realistic: l2.map(|_| realistic),
                ct: 0.1,
                ..Default::default()
            },
        }
    }

    #[test]
    fn grouping_membership() {
        let records = vec![
            rec("num", DatasetKind::Numerical, 0, "a", Some(1.0), 1),
            rec("num", DatasetKind::Numerical, 0, "b", Some(2.0), 0),
            rec("num", DatasetKind::Numerical, 1, "a", None, 0),
            rec("num", DatasetKind::Numerical, 1, "b", Some(2.0), 1),
        ];
        assert_eq!(groupings(&records), vec!["all", "numerical", "dataset:num"]);
        let tables = grouping_tables(&records, &ValidityMode::ALL, &[Metric::L2], &RankOptions::default()).unwrap();
        assert_eq!(tables.len(), 6);
        let valid = &tables[0];
        assert_eq!(valid.mean_ranks, vec![1.5, 1.5]);
        let realistic = &tables[1];
        assert_eq!(realistic.mode, ValidityMode::ValidAndRealistic);
        assert_eq!(realistic.mean_ranks, vec![1.5, 1.5]);
        let csv = tables_to_csv(&tables).unwrap();
        assert_eq!(csv.lines().count(), 1 + 12);
        let md = tables_to_markdown(&tables);
        assert!(md.contains("### all (valid-only)"));
    }

    #[test]
    fn realistic_mode_is_never_more_permissive() {
        let records = vec![
            rec("d", DatasetKind::Mixed, 0, "a", Some(1.0), 0),
            rec("d", DatasetKind::Mixed, 0, "b", Some(2.0), 1),
            rec("d", DatasetKind::Mixed, 0, "c", Some(3.0), 1),
        ];
        for r in &records {
            assert!(!r.metrics.eligible(ValidityMode::ValidAndRealistic) || r.metrics.eligible(ValidityMode::ValidOnly));
        }
        let refs: Vec<&ScoredRecord> = records.iter().collect();
        let v = build_matrix("all", &refs, Metric::L2, ValidityMode::ValidOnly).unwrap().unwrap();
        let r = build_matrix("all", &refs, Metric::L2, ValidityMode::ValidAndRealistic).unwrap().unwrap();
        assert_eq!(v.rows[0], vec![1.0, 2.0, 3.0]);
        assert_eq!(r.rows[0], vec![3.0, 1.0, 2.0]);
    }

    fn row_strategy() -> impl Strategy<Value = (Vec<Option<f64>>, Vec<bool>)> {
        (2usize..12).prop_flat_map(|k| {
            (
                proptest::collection::vec(proptest::option::weighted(0.8, (-5i32..5).prop_map(f64::from)), k),
                proptest::collection::vec(proptest::bool::weighted(0.8), k),
            )
        })
    }

    proptest! {
        #[test]
        fn rank_rows_sum_to_triangular((values, eligible) in row_strategy(), higher in any::<bool>()) {
            let dir = if higher { HigherBetter } else { LowerBetter };
            let r = rank_row(&values, dir, &eligible).unwrap();
            let k = values.len() as f64;
            prop_assert_eq!(r.iter().sum::<f64>(), k * (k + 1.0) / 2.0);
        }

        #[test]
        fn ranks_invariant_under_monotone_maps(
            (values, eligible) in row_strategy(),
            scale in 0.01f64..100.0,
            shift in -10.0f64..10.0,
        ) {
            let mapped: Vec<Option<f64>> = values.iter().map(|v| v.map(|v| (scale * v + shift).exp())).collect();
            prop_assert_eq!(
                rank_row(&values, LowerBetter, &eligible).unwrap(),
                rank_row(&mapped, LowerBetter, &eligible).unwrap()
            );
        }

        #[test]
        fn ineligible_never_beats_eligible((values, eligible) in row_strategy()) {
            let r = rank_row(&values, LowerBetter, &eligible).unwrap();
            for i in 0..r.len() {
                let ok_i = eligible[i] && values[i].is_some();
                for j in 0..r.len() {
                    let ok_j = eligible[j] && values[j].is_some();
                    if ok_i && !ok_j {
                        prop_assert!(r[j] > r[i]);
                    }
                }
            }
        }
    }
}
