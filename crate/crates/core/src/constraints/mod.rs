//! The realistic space: rules a counterfactual must satisfy to describe a
//! possible data point.
//!
//! Univariate rules look at one column (binary values, numeric ranges);
//! multivariate rules look at several (single activation of a one-hot
//! group, algebraic relations between raw features). All checks run on the
//! encoded vector in raw units, i.e. after undoing normalization.

mod expr;

use std::collections::BTreeSet;

use log::warn;
use serde::{Deserialize, Serialize};

pub use expr::{Expr, Relation};

use crate::dataset::{EncodingMap, PreparedDataset};
use crate::error::{Error, Result};
use crate::schema::{ColumnKind, FeatureSchema};

/// Default relative tolerance for relation rules.
pub const DEFAULT_RELATION_TOL: f64 = 1e-3;

/// Relative slack on range bounds, so values clamped in normalized units
/// survive the round trip back to raw units.
const RANGE_SLACK: f64 = 1e-9;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "rule", rename_all = "lowercase")]
pub enum UnivariateRule {
    Binary,
    Range { lo: f64, hi: f64 },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Univariate {
    pub feature: String,
    pub index: usize,
    pub rule: UnivariateRule,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "rule", rename_all = "lowercase")]
pub enum MultivariateRule {
    Ohe {
        feature: String,
        indices: Vec<usize>,
    },
    Relation {
        relation: Relation,
        tol: f64,
        /// Variable name to encoded index.
        bindings: Vec<(String, usize)>,
    },
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ConstraintSet {
    pub univariate: Vec<Univariate>,
    pub multivariate: Vec<MultivariateRule>,
}

impl ConstraintSet {
    /// Builds the rule set for a dataset: a range rule per numeric column
    /// (schema range, else the data's min/max), a binary rule per binary
    /// column and per dummy, a single-activation rule per one-hot group,
    /// then the schema's explicit `[[constraint]]` entries.
    pub fn from_schema(
        schema: &FeatureSchema,
        encoding: &EncodingMap,
        raw_lower: &[f64],
        raw_upper: &[f64],
    ) -> Result<Self> {
        let mut set = ConstraintSet::default();
        for col in &encoding.columns {
            match col.kind {
                ColumnKind::Numeric => {
                    let i = col.indices[0];
                    set.univariate.push(Univariate {
                        feature: col.name.clone(),
                        index: i,
                        rule: UnivariateRule::Range {
                            lo: raw_lower[i],
                            hi: raw_upper[i],
                        },
                    });
                }
                ColumnKind::Binary => set.univariate.push(Univariate {
                    feature: col.name.clone(),
                    index: col.indices[0],
                    rule: UnivariateRule::Binary,
                }),
                ColumnKind::Categorical => {
                    for (&i, label) in col.indices.iter().zip(&col.labels) {
                        set.univariate.push(Univariate {
                            feature: format!("{}={}", col.name, label),
                            index: i,
                            rule: UnivariateRule::Binary,
                        });
                    }
                    set.multivariate.push(MultivariateRule::Ohe {
                        feature: col.name.clone(),
                        indices: col.indices.clone(),
                    });
                }
            }
        }

        for spec in &schema.constraints {
            let kinds = [
                spec.binary.is_some(),
                spec.range.is_some(),
                spec.ohe.is_some(),
                spec.relation.is_some(),
            ];
            if kinds.iter().filter(|k| **k).count() != 1 {
                return Err(Error::Constraint(format!(
                    "constraint entry needs exactly one of binary/range/ohe/relation: {spec:?}"
                )));
            }
            let scalar_column = |name: &Option<String>| -> Result<(String, usize)> {
                let name = name
                    .as_ref()
                    .ok_or_else(|| Error::Constraint("univariate constraint needs `feature`".into()))?;
                let col = encoding
                    .column(name)
                    .ok_or_else(|| Error::Constraint(format!("unknown feature `{name}`")))?;
                if col.kind == ColumnKind::Categorical {
                    return Err(Error::Constraint(format!(
                        "`{name}` is categorical; use an `ohe` constraint"
                    )));
                }
                Ok((name.clone(), col.indices[0]))
            };
            if let Some(b) = spec.binary {
                let (feature, index) = scalar_column(&spec.feature)?;
                if b {
                    set.push_univariate(Univariate {
                        feature,
                        index,
                        rule: UnivariateRule::Binary,
                    });
                }
            } else if let Some([lo, hi]) = spec.range {
                let (feature, index) = scalar_column(&spec.feature)?;
                if !(lo <= hi) {
                    return Err(Error::Constraint(format!(
                        "range [{lo}, {hi}] for `{feature}` has lo > hi"
                    )));
                }
                set.push_univariate(Univariate {
                    feature,
                    index,
                    rule: UnivariateRule::Range { lo, hi },
                });
            } else if let Some(cols) = &spec.ohe {
                for name in cols {
                    let col = encoding
                        .column(name)
                        .ok_or_else(|| Error::Constraint(format!("unknown feature `{name}`")))?;
                    if col.kind != ColumnKind::Categorical {
                        return Err(Error::Constraint(format!(
                            "`{name}` is not a one-hot encoded column"
                        )));
                    }
                    let rule = MultivariateRule::Ohe {
                        feature: name.clone(),
                        indices: col.indices.clone(),
                    };
                    if !set.multivariate.contains(&rule) {
                        set.multivariate.push(rule);
                    }
                }
            } else if let Some(source) = &spec.relation {
                let relation = Relation::parse(source)?;
                let tol = spec.tol.unwrap_or(DEFAULT_RELATION_TOL);
                if !(tol >= 0.0) {
                    return Err(Error::Constraint(format!("negative tolerance in `{source}`")));
                }
                let mut bindings = Vec::new();
                for var in relation.variables() {
                    let (name, index) = scalar_column(&Some(var))?;
                    bindings.push((name, index));
                }
                set.multivariate.push(MultivariateRule::Relation {
                    relation,
                    tol,
                    bindings,
                });
            }
        }
        Ok(set)
    }

    pub fn for_dataset(data: &PreparedDataset) -> Result<Self> {
        Self::from_schema(&data.schema, &data.encoding, &data.raw_lower, &data.raw_upper)
    }

    fn push_univariate(&mut self, rule: Univariate) {
        if !self.univariate.contains(&rule) {
            self.univariate.push(rule);
        }
    }

    pub fn relations(&self) -> impl Iterator<Item = (&Relation, f64)> {
        self.multivariate.iter().filter_map(|m| match m {
            MultivariateRule::Relation { relation, tol, .. } => Some((relation, *tol)),
            _ => None,
        })
    }

    /// Sets every relation's tolerance.
    pub fn with_relation_tol(mut self, new_tol: f64) -> Self {
        for m in &mut self.multivariate {
            if let MultivariateRule::Relation { tol, .. } = m {
                *tol = new_tol;
            }
        }
        self
    }

    /// Univariate rules whose encoded indices exceed `width` make every
    /// check fail.
    fn max_index(&self) -> usize {
        let u = self.univariate.iter().map(|r| r.index);
        let m = self.multivariate.iter().flat_map(|m| match m {
            MultivariateRule::Ohe { indices, .. } => indices.clone(),
            MultivariateRule::Relation { bindings, .. } => bindings.iter().map(|b| b.1).collect(),
        });
        u.chain(m).max().unwrap_or(0)
    }

    /// Names of the rules `raw` violates.
    pub fn violations(&self, raw: &[f64]) -> Vec<String> {
        let mut out = Vec::new();
        if raw.len() <= self.max_index() {
            out.push(format!("vector width {} is too small", raw.len()));
            return out;
        }
        for u in &self.univariate {
            if !univariate_holds(u, raw[u.index]) {
                out.push(format!("{}: {:?}", u.feature, u.rule));
            }
        }
        for m in &self.multivariate {
            if !multivariate_holds(m, raw) {
                out.push(match m {
                    MultivariateRule::Ohe { feature, .. } => format!("one-hot group {feature}"),
                    MultivariateRule::Relation { relation, .. } => relation.source.clone(),
                });
            }
        }
        out
    }

    /// Rows of the dataset outside the realistic space, logged as
    /// data-quality warnings.
    pub fn audit(&self, data: &PreparedDataset) -> Vec<(usize, Vec<String>)> {
        let mut bad = Vec::new();
        for (i, row) in data.x.iter().enumerate() {
            let raw = data.denormalize(row);
            let v = self.violations(&raw);
            if !v.is_empty() {
                warn!("{} row {i} violates {:?}", data.name, v);
                bad.push((i, v));
            }
        }
        bad
    }
}

fn univariate_holds(u: &Univariate, v: f64) -> bool {
    match u.rule {
        UnivariateRule::Binary => v == 0.0 || v == 1.0,
        UnivariateRule::Range { lo, hi } => {
            v.is_finite()
                && v >= lo - RANGE_SLACK * lo.abs().max(1.0)
                && v <= hi + RANGE_SLACK * hi.abs().max(1.0)
        }
    }
}

fn multivariate_holds(m: &MultivariateRule, raw: &[f64]) -> bool {
    match m {
        MultivariateRule::Ohe { indices, .. } => {
            let ones = indices.iter().filter(|&&i| raw[i] == 1.0).count();
            let zeros = indices.iter().filter(|&&i| raw[i] == 0.0).count();
            ones == 1 && zeros == indices.len() - 1
        }
        MultivariateRule::Relation {
            relation,
            tol,
            bindings,
        } => {
            let lookup = |name: &str| {
                bindings
                    .iter()
                    .find(|(n, _)| n == name)
                    .map(|(_, i)| raw[*i])
                    .filter(|v| v.is_finite())
            };
            relation.holds(&lookup, *tol)
        }
    }
}

/// 1 iff every univariate rule holds for the raw-unit encoded vector.
pub fn check_ruc(raw: &[f64], set: &ConstraintSet) -> u8 {
    if raw.len() <= set.max_index() && !set.univariate.is_empty() {
        return 0;
    }
    u8::from(set.univariate.iter().all(|u| univariate_holds(u, raw[u.index])))
}

/// 1 iff every multivariate rule holds for the raw-unit encoded vector.
pub fn check_rmc(raw: &[f64], set: &ConstraintSet) -> u8 {
    if raw.len() <= set.max_index() && !set.multivariate.is_empty() {
        return 0;
    }
    u8::from(set.multivariate.iter().all(|m| multivariate_holds(m, raw)))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Verdict {
    pub ruc: u8,
    pub rmc: u8,
}

impl Verdict {
    pub fn realistic(&self) -> u8 {
        self.ruc & self.rmc
    }
}

/// Realistic verdict for an optional counterfactual (raw units). An absent
/// counterfactual is not realistic.
pub fn realistic(raw: Option<&[f64]>, set: &ConstraintSet) -> u8 {
    match raw {
        Some(r) => check_ruc(r, set) & check_rmc(r, set),
        None => 0,
    }
}

/// Variables referenced by relation rules.
pub fn relation_features(set: &ConstraintSet) -> BTreeSet<String> {
    set.relations().flat_map(|(r, _)| r.variables()).collect()
}
