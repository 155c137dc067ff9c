//! Declarative description of a raw tabular dataset.
//!
//! A schema file is TOML (or JSON when the path ends in `.json`):
//!
//! ```toml
//! name = "circles"
//! target = "diagnosis"
//!
//! [[column]]
//! name = "radius"
//! kind = "numeric"
//! range = [0.0, 40.0]
//!
//! [[column]]
//! name = "diagnosis"
//! kind = "categorical"
//!
//! [[constraint]]
//! relation = "area = pi * radius^2"
//! tol = 1e-3
//! ```

use std::collections::HashSet;
use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ColumnKind {
    Numeric,
    Categorical,
    Binary,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ColumnSpec {
    pub name: String,
    pub kind: ColumnKind,
    /// Realistic range in raw units (numeric columns only).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub range: Option<[f64; 2]>,
    /// Ordered category labels. Binary columns map the first label to 0
    /// and the second to 1.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub categories: Option<Vec<String>>,
}

impl ColumnSpec {
    pub fn numeric(name: impl Into<String>) -> Self {
        Self {
            name: name.into(),
            kind: ColumnKind::Numeric,
            range: None,
            categories: None,
        }
    }

    pub fn categorical(name: impl Into<String>, categories: &[&str]) -> Self {
        Self {
            name: name.into(),
            kind: ColumnKind::Categorical,
            range: None,
            categories: Some(categories.iter().map(|s| s.to_string()).collect()),
        }
    }

    pub fn binary(name: impl Into<String>, categories: [&str; 2]) -> Self {
        Self {
            name: name.into(),
            kind: ColumnKind::Binary,
            range: None,
            categories: Some(categories.iter().map(|s| s.to_string()).collect()),
        }
    }

    pub fn with_range(mut self, lo: f64, hi: f64) -> Self {
        self.range = Some([lo, hi]);
        self
    }

    /// Category labels of a binary column, defaulting to `["0", "1"]`.
    pub fn binary_labels(&self) -> [String; 2] {
        match &self.categories {
            Some(c) if c.len() == 2 => [c[0].clone(), c[1].clone()],
            _ => ["0".to_string(), "1".to_string()],
        }
    }
}

/// One `[[constraint]]` entry as written in the schema file. Exactly one of
/// `binary`, `range`, `ohe` or `relation` is expected.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConstraintSpec {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub feature: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub binary: Option<bool>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub range: Option<[f64; 2]>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ohe: Option<Vec<String>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub relation: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tol: Option<f64>,
}

fn default_rule() -> String {
    "majority-vs-rest".to_string()
}

fn default_true() -> bool {
    true
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FeatureSchema {
    pub name: String,
    pub target: String,
    #[serde(default = "default_rule")]
    pub positive_class_rule: String,
    /// Whether the CSV's first row is a header. Headerless files are read
    /// in schema column order.
    #[serde(default = "default_true")]
    pub has_header: bool,
    #[serde(rename = "column")]
    pub columns: Vec<ColumnSpec>,
    #[serde(rename = "constraint", default)]
    pub constraints: Vec<ConstraintSpec>,
}

/// Dataset grouping by the kinds of its feature columns. Binary columns
/// count as categorical.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DatasetKind {
    Numerical,
    Categorical,
    Mixed,
}

impl fmt::Display for DatasetKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            DatasetKind::Numerical => "numerical",
            DatasetKind::Categorical => "categorical",
            DatasetKind::Mixed => "mixed",
        })
    }
}

impl FeatureSchema {
    pub fn new(name: impl Into<String>, target: impl Into<String>, columns: Vec<ColumnSpec>) -> Self {
        Self {
            name: name.into(),
            target: target.into(),
            positive_class_rule: default_rule(),
            has_header: true,
            columns,
            constraints: Vec::new(),
        }
    }

    pub fn from_path(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let schema: FeatureSchema = if path.extension().is_some_and(|e| e == "json") {
            serde_json::from_str(&text)
                .map_err(|e| Error::Schema(format!("{}: {e}", path.display())))?
        } else {
            toml::from_str(&text).map_err(|e| Error::Schema(format!("{}: {e}", path.display())))?
        };
        schema.validate()?;
        Ok(schema)
    }

    pub fn from_toml_str(text: &str) -> Result<Self> {
        let schema: FeatureSchema = toml::from_str(text).map_err(|e| Error::Schema(e.to_string()))?;
        schema.validate()?;
        Ok(schema)
    }

    pub fn validate(&self) -> Result<()> {
        if self.positive_class_rule != "majority-vs-rest" {
            return Err(Error::Schema(format!(
                "unsupported positive_class_rule `{}`",
                self.positive_class_rule
            )));
        }
        let mut seen = HashSet::new();
        for col in &self.columns {
            if !seen.insert(col.name.as_str()) {
                return Err(Error::Schema(format!("duplicate column `{}`", col.name)));
            }
            let is_target = col.name == self.target;
            match col.kind {
                ColumnKind::Categorical => match &col.categories {
                    Some(c) if c.len() < 2 => {
                        return Err(Error::Schema(format!(
                            "categorical column `{}` needs at least 2 categories",
                            col.name
                        )))
                    }
                    None if !is_target => {
                        return Err(Error::Schema(format!(
                            "categorical column `{}` must list its categories",
                            col.name
                        )))
                    }
                    Some(c) => {
                        let unique: HashSet<_> = c.iter().collect();
                        if unique.len() != c.len() {
                            return Err(Error::Schema(format!(
                                "categorical column `{}` repeats a category",
                                col.name
                            )));
                        }
                    }
                    None => {}
                },
                ColumnKind::Binary => {
                    if let Some(c) = &col.categories {
                        if c.len() != 2 || c[0] == c[1] {
                            return Err(Error::Schema(format!(
                                "binary column `{}` needs exactly 2 distinct categories",
                                col.name
                            )));
                        }
                    }
                }
                ColumnKind::Numeric => {
                    if col.categories.is_some() {
                        return Err(Error::Schema(format!(
                            "numeric column `{}` cannot list categories",
                            col.name
                        )));
                    }
                }
            }
            if let Some([lo, hi]) = col.range {
                if col.kind != ColumnKind::Numeric {
                    return Err(Error::Schema(format!(
                        "range given for non-numeric column `{}`",
                        col.name
                    )));
                }
                if !(lo <= hi) {
                    return Err(Error::Schema(format!(
                        "column `{}` has range [{lo}, {hi}] with lo > hi",
                        col.name
                    )));
                }
            }
        }
        if !seen.contains(self.target.as_str()) {
            return Err(Error::Schema(format!(
                "target `{}` is not among the columns",
                self.target
            )));
        }
        if self.feature_columns().next().is_none() {
            return Err(Error::Schema("schema has no feature columns".into()));
        }
        Ok(())
    }

    /// Feature columns in schema order (the target excluded).
    pub fn feature_columns(&self) -> impl Iterator<Item = &ColumnSpec> {
        self.columns.iter().filter(move |c| c.name != self.target)
    }

    pub fn count_kind(&self, kind: ColumnKind) -> usize {
        self.feature_columns().filter(|c| c.kind == kind).count()
    }

    pub fn dataset_kind(&self) -> DatasetKind {
        let numeric = self.count_kind(ColumnKind::Numeric);
        let categorical = self.count_kind(ColumnKind::Categorical) + self.count_kind(ColumnKind::Binary);
        match (numeric, categorical) {
            (_, 0) => DatasetKind::Numerical,
            (0, _) => DatasetKind::Categorical,
            _ => DatasetKind::Mixed,
        }
    }
}
