//! Per-record evaluation metrics.
//!
//! Distances are measured in the model's normalized encoded space, the
//! space generators search in. Realistic-constraint checks run on the
//! denormalized vector.

use std::fmt;
use std::str::FromStr;

use log::warn;
use serde::{Deserialize, Serialize};

use crate::constraints::{check_rmc, check_ruc, ConstraintSet};
use crate::dataset::{EncodingMap, FeatureStats};
use crate::error::Error;
use crate::generators::CFRecord;
use crate::model::NeuralModel;
use crate::schema::ColumnKind;

/// Tolerance for treating two feature values as equal.
pub const EQUALITY_TOL: f64 = 1e-9;

fn same(a: f64, b: f64) -> bool {
    (a - b).abs() <= EQUALITY_TOL
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SparsityMode {
    /// One indicator per encoded coordinate.
    #[default]
    Encoded,
    /// One indicator per schema column (one-hot groups count once).
    Grouped,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MadMode {
    /// Categorical part counts changed columns.
    #[default]
    Changed,
    /// Categorical part counts unchanged columns, as the formula is
    /// literally written. Not a distance: `mad(x, x)` is 1 when categorical
    /// columns exist.
    PaperLiteral,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct MetricOptions {
    #[serde(default)]
    pub sparsity: SparsityMode,
    #[serde(default)]
    pub mad: MadMode,
}

/// Which records count as successful when ranking.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ValidityMode {
    ValidOnly,
    ValidAndRealistic,
}

impl ValidityMode {
    pub const ALL: [ValidityMode; 2] = [ValidityMode::ValidOnly, ValidityMode::ValidAndRealistic];

    pub fn label(&self) -> &'static str {
        match self {
            ValidityMode::ValidOnly => "valid-only",
            ValidityMode::ValidAndRealistic => "valid-and-realistic",
        }
    }
}

impl fmt::Display for ValidityMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

impl FromStr for ValidityMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self, Error> {
        match s {
            "valid-only" | "valid" => Ok(ValidityMode::ValidOnly),
            "valid-and-realistic" | "realistic" => Ok(ValidityMode::ValidAndRealistic),
            _ => Err(Error::Config(format!("unknown validity mode `{s}`"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Direction {
    LowerBetter,
    HigherBetter,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Metric {
    Coverage,
    Sparsity,
    Stability,
    L2,
    Ruc,
    Rmc,
    Mad,
    Md,
    Ct,
}

impl Metric {
    pub const ALL: [Metric; 9] = [
        Metric::Coverage,
        Metric::Sparsity,
        Metric::Stability,
        Metric::L2,
        Metric::Ruc,
        Metric::Rmc,
        Metric::Mad,
        Metric::Md,
        Metric::Ct,
    ];

    pub fn direction(&self) -> Direction {
        match self {
            Metric::L2 | Metric::Mad | Metric::Md | Metric::Ct => Direction::LowerBetter,
            _ => Direction::HigherBetter,
        }
    }

    pub fn label(&self) -> &'static str {
        match self {
            Metric::Coverage => "coverage",
            Metric::Sparsity => "sparsity",
            Metric::Stability => "stability",
            Metric::L2 => "l2",
            Metric::Ruc => "ruc",
            Metric::Rmc => "rmc",
            Metric::Mad => "mad",
            Metric::Md => "md",
            Metric::Ct => "ct",
        }
    }

    pub fn value(&self, m: &MetricVector) -> Option<f64> {
        match self {
            Metric::Coverage => Some(f64::from(m.coverage)),
            Metric::Sparsity => m.sparsity,
            Metric::Stability => m.stability.map(f64::from),
            Metric::L2 => m.l2,
            Metric::Ruc => m.ruc.map(f64::from),
            Metric::Rmc => m.rmc.map(f64::from),
            Metric::Mad => m.mad,
            Metric::Md => m.md,
            Metric::Ct => Some(m.ct),
        }
    }
}

impl fmt::Display for Metric {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

impl FromStr for Metric {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self, Error> {
        Metric::ALL
            .into_iter()
            .find(|m| m.label().eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::Config(format!("unknown metric `{s}`")))
    }
}

/// Scores of one generation attempt. Fields other than `coverage` and `ct`
/// are absent when no valid counterfactual was produced.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricVector {
    pub coverage: u8,
    pub sparsity: Option<f64>,
    pub stability: Option<u8>,
    pub l2: Option<f64>,
    pub ruc: Option<u8>,
    pub rmc: Option<u8>,
    pub mad: Option<f64>,
    pub md: Option<f64>,
    pub ct: f64,
    pub realistic: Option<u8>,
}

impl MetricVector {
    pub fn eligible(&self, mode: ValidityMode) -> bool {
        match mode {
            ValidityMode::ValidOnly => self.coverage == 1,
            ValidityMode::ValidAndRealistic => self.coverage == 1 && self.realistic == Some(1),
        }
    }
}

/// 1 iff `c` exists and the model classes of `x` and `c` differ.
pub fn coverage(model: &NeuralModel, x: &[f64], c: Option<&[f64]>) -> u8 {
    let Some(c) = c else { return 0 };
    match (model.predict_class(x), model.predict_class(c)) {
        (Ok(a), Ok(b)) => u8::from(a != b),
        _ => 0,
    }
}

/// Share of encoded coordinates left unchanged.
pub fn sparsity(x: &[f64], c: &[f64]) -> f64 {
    let unchanged = x.iter().zip(c).filter(|(a, b)| same(**a, **b)).count();
    unchanged as f64 / x.len() as f64
}

/// Share of schema columns left unchanged; a one-hot group is one column.
pub fn sparsity_grouped(x: &[f64], c: &[f64], encoding: &EncodingMap) -> f64 {
    let unchanged = encoding
        .columns
        .iter()
        .filter(|col| col.indices.iter().all(|&i| same(x[i], c[i])))
        .count();
    unchanged as f64 / encoding.columns.len() as f64
}

/// 1 iff both runs produced counterfactuals that agree coordinate-wise.
pub fn stability(c1: Option<&[f64]>, c2: Option<&[f64]>) -> u8 {
    match (c1, c2) {
        (Some(a), Some(b)) => u8::from(a.len() == b.len() && a.iter().zip(b).all(|(p, q)| same(*p, *q))),
        _ => 0,
    }
}

pub fn l2(x: &[f64], c: &[f64]) -> f64 {
    x.iter().zip(c).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt()
}

/// MAD-scaled distance: mean `|x - c| / MAD` over numeric columns plus the
/// share of changed categorical and binary columns. A zero MAD counts as 1.
pub fn mad_distance(x: &[f64], c: &[f64], mads: &[f64], encoding: &EncodingMap, mode: MadMode) -> f64 {
    let mut num_sum = 0.0;
    let mut num_n = 0usize;
    let mut cat_sum = 0.0;
    let mut cat_n = 0usize;
    for col in &encoding.columns {
        match col.kind {
            ColumnKind::Numeric => {
                let i = col.indices[0];
                let mad = if mads[i] > 0.0 { mads[i] } else { 1.0 };
                num_sum += (x[i] - c[i]).abs() / mad;
                num_n += 1;
            }
            ColumnKind::Categorical | ColumnKind::Binary => {
                let equal = col.indices.iter().all(|&i| same(x[i], c[i]));
                let hit = match mode {
                    MadMode::Changed => !equal,
                    MadMode::PaperLiteral => equal,
                };
                cat_sum += f64::from(u8::from(hit));
                cat_n += 1;
            }
        }
    }
    let mut total = 0.0;
    if num_n > 0 {
        total += num_sum / num_n as f64;
    }
    if cat_n > 0 {
        total += cat_sum / cat_n as f64;
    }
    total
}

/// `sqrt((c - u)' C^-1 (c - u))` with `cov_inv` row-major.
pub fn mahalanobis(c: &[f64], u: &[f64], cov_inv: &[f64]) -> f64 {
    let n = c.len();
    let d: Vec<f64> = c.iter().zip(u).map(|(a, b)| a - b).collect();
    let mut q = 0.0;
    for i in 0..n {
        let row = &cov_inv[i * n..(i + 1) * n];
        let s: f64 = row.iter().zip(&d).map(|(a, b)| a * b).sum();
        q += d[i] * s;
    }
    q.max(0.0).sqrt()
}

/// Everything needed to score records on one dataset.
pub struct Scorer<'a> {
    pub model: &'a NeuralModel,
    pub encoding: &'a EncodingMap,
    pub stats: &'a FeatureStats,
    pub constraints: &'a ConstraintSet,
    /// Maps a model-space vector back to raw units.
    pub denormalize: &'a (dyn Fn(&[f64]) -> Vec<f64> + Sync),
    pub options: MetricOptions,
}

impl Scorer<'_> {
    /// Scores `record` for factual `x`; `partner` is the other stability run.
    pub fn score(&self, x: &[f64], record: &CFRecord, partner: &CFRecord) -> MetricVector {
        let c = record.counterfactual.as_deref();
        let cov = coverage(self.model, x, c);
        if cov != u8::from(record.valid) {
            warn!(
                "generator `{}` reported valid={} but re-check gives coverage {cov} (row {})",
                record.generator, record.valid, record.factual_row
            );
        }
        let mut m = MetricVector {
            coverage: cov,
            ct: record.wall_clock_seconds,
            ..Default::default()
        };
        let Some(c) = c.filter(|_| cov == 1) else {
            return m;
        };
        let partner_cf = partner
            .counterfactual
            .as_deref()
            .filter(|p| coverage(self.model, x, Some(p)) == 1);
        m.sparsity = Some(match self.options.sparsity {
            SparsityMode::Encoded => sparsity(x, c),
            SparsityMode::Grouped => sparsity_grouped(x, c, self.encoding),
        });
        m.stability = Some(stability(Some(c), partner_cf));
        m.l2 = Some(l2(x, c));
        m.mad = Some(mad_distance(x, c, &self.stats.mad, self.encoding, self.options.mad));
        m.md = Some(mahalanobis(c, &self.stats.mean, &self.stats.cov_inv));
        let raw = (self.denormalize)(c);
        let ruc = check_ruc(&raw, self.constraints);
        let rmc = check_rmc(&raw, self.constraints);
        m.ruc = Some(ruc);
        m.rmc = Some(rmc);
        m.realistic = Some(ruc & rmc);
        m
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::EncodedColumn;
    use crate::generators::testing::linear_model;
    use proptest::prelude::*;

    fn numeric_encoding(n: usize) -> EncodingMap {
        EncodingMap {
            columns: (0..n)
                .map(|i| EncodedColumn {
                    name: format!("f{i}"),
                    kind: ColumnKind::Numeric,
                    indices: vec![i],
                    labels: vec![],
                })
                .collect(),
            width: n,
        }
    }

    fn cat_encoding() -> EncodingMap {
        EncodingMap {
            columns: vec![
                EncodedColumn {
                    name: "a".into(),
                    kind: ColumnKind::Categorical,
                    indices: vec![0, 1],
                    labels: vec!["p".into(), "q".into()],
                },
                EncodedColumn {
                    name: "b".into(),
                    kind: ColumnKind::Categorical,
                    indices: vec![2, 3, 4],
                    labels: vec!["r".into(), "s".into(), "t".into()],
                },
            ],
            width: 5,
        }
    }

    fn record(c: Option<Vec<f64>>, valid: bool) -> CFRecord {
        CFRecord {
            generator: "g".into(),
            factual_row: 0,
            seed: 0,
            counterfactual: c,
            valid,
            wall_clock_seconds: 0.25,
            iterations: 1,
            diagnostic: None,
        }
    }

    #[test]
    fn coverage_examples() {
        let model = linear_model(&[1.0], 0.0);
        assert_eq!(coverage(&model, &[-1.0], None), 0);
        assert_eq!(coverage(&model, &[-1.0], Some(&[1.0])), 1);
        assert_eq!(coverage(&model, &[-1.0], Some(&[-1.0])), 0);
    }

    #[test]
    fn sparsity_examples() {
        assert_eq!(sparsity(&[0.0, 1.0, 2.0, 3.0], &[0.0, 1.0, 2.5, 3.0]), 0.75);
        assert_eq!(sparsity(&[1.0, 2.0], &[1.0, 2.0]), 1.0);
        assert_eq!(sparsity(&[1.0, 2.0], &[0.0, 0.0]), 0.0);
        assert_eq!(sparsity(&[1.0], &[1.0 + 1e-12]), 1.0);
        let enc = cat_encoding();
        let x = [1.0, 0.0, 0.0, 1.0, 0.0];
        let c = [0.0, 1.0, 0.0, 1.0, 0.0];
        assert_eq!(sparsity(&x, &c), 0.6);
        assert_eq!(sparsity_grouped(&x, &c, &enc), 0.5);
    }

    #[test]
    fn stability_examples() {
        assert_eq!(stability(Some(&[1.0, 2.0]), Some(&[1.0, 2.0])), 1);
        assert_eq!(stability(Some(&[1.0, 2.0]), Some(&[1.0, 2.1])), 0);
        assert_eq!(stability(Some(&[1.0, 2.0]), None), 0);
    }

    #[test]
    fn l2_examples() {
        assert_eq!(l2(&[0.0, 0.0], &[3.0, 4.0]), 5.0);
        assert_eq!(l2(&[1.5, -2.0], &[1.5, -2.0]), 0.0);
    }

    #[test]
    fn mad_examples() {
        let enc = numeric_encoding(1);
        assert_eq!(mad_distance(&[1.0], &[5.0], &[2.0], &enc, MadMode::Changed), 2.0);
        assert_eq!(mad_distance(&[1.0], &[5.0], &[0.0], &enc, MadMode::Changed), 4.0);
        let cat = cat_encoding();
        let mads = [1.0; 5];
        let x = [1.0, 0.0, 0.0, 1.0, 0.0];
        let c = [0.0, 1.0, 0.0, 1.0, 0.0];
        assert_eq!(mad_distance(&x, &c, &mads, &cat, MadMode::Changed), 0.5);
        assert_eq!(mad_distance(&x, &x, &mads, &cat, MadMode::Changed), 0.0);
        assert_eq!(mad_distance(&x, &x, &mads, &cat, MadMode::PaperLiteral), 1.0);
    }

    #[test]
    fn mahalanobis_examples() {
        let id = [1.0, 0.0, 0.0, 1.0];
        assert_eq!(mahalanobis(&[3.0, 4.0], &[0.0, 0.0], &id), 5.0);
        assert_eq!(mahalanobis(&[3.0, 4.0], &[3.0, 4.0], &id), 0.0);
        let diag = [0.25, 0.0, 0.0, 1.0];
        assert!((mahalanobis(&[2.0, 1.0], &[0.0, 0.0], &diag) - 2f64.sqrt()).abs() < 1e-15);
    }

    fn scorer_parts() -> (NeuralModel, EncodingMap, FeatureStats, ConstraintSet) {
        let enc = cat_encoding();
        let stats = FeatureStats {
            mean: vec![0.5; 5],
            variance: vec![0.25; 5],
            mad: vec![1.0; 5],
            cov_inv: (0..25).map(|k| if k % 6 == 0 { 1.0 } else { 0.0 }).collect(),
        };
        let schema = crate::schema::FeatureSchema::new(
            "cat",
            "y",
            vec![
                crate::schema::ColumnSpec::categorical("a", &["p", "q"]),
                crate::schema::ColumnSpec::categorical("b", &["r", "s", "t"]),
                crate::schema::ColumnSpec::numeric("y"),
            ],
        );
        let set = ConstraintSet::from_schema(&schema, &enc, &[0.0; 5], &[1.0; 5]).unwrap();
        // class 1 iff the first dummy of `b` is off
        let model = linear_model(&[0.0, 0.0, -1.0, 0.0, 0.0], 0.5);
        (model, enc, stats, set)
    }

    #[test]
    fn score_record_composition() {
        let (model, enc, stats, set) = scorer_parts();
        let ident = |v: &[f64]| v.to_vec();
        let scorer = Scorer {
            model: &model,
            encoding: &enc,
            stats: &stats,
            constraints: &set,
            denormalize: &ident,
            options: MetricOptions::default(),
        };
        let x = [1.0, 0.0, 1.0, 0.0, 0.0];
        let good = record(Some(vec![1.0, 0.0, 0.0, 1.0, 0.0]), true);
        let m = scorer.score(&x, &good, &good);
        assert_eq!(m.coverage, 1);
        assert_eq!(m.realistic, Some(1));
        assert_eq!(m.stability, Some(1));
        assert_eq!(m.sparsity, Some(0.6));
        assert!(m.l2.is_some() && m.mad.is_some() && m.md.is_some());
        assert_eq!(m.ct, 0.25);

        let missing = record(None, false);
        let m = scorer.score(&x, &missing, &good);
        assert_eq!(m, MetricVector { coverage: 0, ct: 0.25, ..Default::default() });
        let m = scorer.score(&x, &good, &missing);
        assert_eq!(m.stability, Some(0));

        // md is evaluated at c alone
        let x2 = [0.0, 1.0, 1.0, 0.0, 0.0];
        assert_eq!(scorer.score(&x2, &good, &good).md, scorer.score(&x, &good, &good).md);

        let broken = record(Some(vec![1.0, 0.0, 0.0, 1.0, 1.0]), true);
        let m = scorer.score(&x, &broken, &broken);
        assert_eq!((m.coverage, m.ruc, m.rmc, m.realistic), (1, Some(1), Some(0), Some(0)));
    }

    #[test]
    fn metric_directions() {
        use Direction::*;
        let lower: Vec<Metric> = Metric::ALL.into_iter().filter(|m| m.direction() == LowerBetter).collect();
        assert_eq!(lower, vec![Metric::L2, Metric::Mad, Metric::Md, Metric::Ct]);
        assert_eq!("MD".parse::<Metric>().unwrap(), Metric::Md);
        assert!("x".parse::<Metric>().is_err());
    }

    proptest! {
        #[test]
        fn sparsity_complements_changed_share(
            pairs in proptest::collection::vec((-3.0f64..3.0, prop::bool::ANY), 1..200)
        ) {
            let x: Vec<f64> = pairs.iter().map(|p| p.0).collect();
            let c: Vec<f64> = pairs.iter().map(|p| if p.1 { p.0 + 1.0 } else { p.0 }).collect();
            let changed = pairs.iter().filter(|p| p.1).count() as f64 / pairs.len() as f64;
            prop_assert_eq!(sparsity(&x, &c) + changed, 1.0);
        }

        #[test]
        fn mahalanobis_identity_is_l2(v in proptest::collection::vec(-10.0f64..10.0, 1..8)) {
            let n = v.len();
            let id: Vec<f64> = (0..n * n).map(|k| if k % (n + 1) == 0 { 1.0 } else { 0.0 }).collect();
            let zero = vec![0.0; n];
            prop_assert!((mahalanobis(&v, &zero, &id) - l2(&zero, &v)).abs() <= 1e-12);
        }

        #[test]
        fn mad_numeric_part_is_symmetric(
            x in proptest::collection::vec(-3.0f64..3.0, 4),
            c in proptest::collection::vec(-3.0f64..3.0, 4),
            mads in proptest::collection::vec(0.0f64..2.0, 4),
        ) {
            let enc = numeric_encoding(4);
            let a = mad_distance(&x, &c, &mads, &enc, MadMode::Changed);
            let b = mad_distance(&c, &x, &mads, &enc, MadMode::Changed);
            prop_assert_eq!(a, b);
        }
    }
}
