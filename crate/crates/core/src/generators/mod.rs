//! Counterfactual generators.
//!
//! A [`Generator`] receives the trained model, a factual vector in model
//! space and the class the model assigns to it, and searches for a nearby
//! vector the model puts in the other class. Three built-in generators
//! cover the common search strategies:
//!
//! * [`GradientGenerator`]: gradient descent on cross-entropy plus an
//!   elastic-net distance penalty (convex-optimization family).
//! * [`SphereGenerator`]: random sampling in growing hyperspherical layers
//!   followed by L0 sparsification (heuristic family).
//! * [`GreedyMeanGenerator`]: best-first search over feature subsets
//!   replaced by their train means or modes (heuristic family).
//!
//! Further generators plug in through [`Registry::register`].

mod gradient;
mod greedy;
mod spheres;

use std::collections::BTreeMap;
use std::fmt;
use std::time::Instant;

use serde::{Deserialize, Serialize};

pub use gradient::{GradientGenerator, GradientParams};
pub use greedy::{GreedyMeanGenerator, GreedyParams};
pub use spheres::{SphereGenerator, SphereParams};

use crate::dataset::{EncodingMap, PreparedDataset};
use crate::error::{Error, Result};
use crate::model::NeuralModel;
use crate::schema::ColumnKind;

/// Search-strategy family.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Family {
    /// Convex / gradient optimization.
    #[serde(rename = "CO")]
    ConvexOptimization,
    /// Heuristic search.
    #[serde(rename = "HE")]
    Heuristic,
    /// Satisfiability solver.
    #[serde(rename = "SS")]
    SatisfiabilitySolver,
}

impl Family {
    pub fn label(&self) -> &'static str {
        match self {
            Family::ConvexOptimization => "CO",
            Family::Heuristic => "HE",
            Family::SatisfiabilitySolver => "SS",
        }
    }
}

impl fmt::Display for Family {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

/// Dataset-derived context shared by every request on one dataset.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeatureContext {
    pub encoding: EncodingMap,
    /// Realistic bounds in model units.
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
    pub means: Vec<f64>,
    pub mads: Vec<f64>,
    /// Train mean (numeric) or modal pattern (binary, one-hot) per index.
    pub replacement: Vec<f64>,
}

impl FeatureContext {
    pub fn from_dataset(data: &PreparedDataset) -> Self {
        Self {
            encoding: data.encoding.clone(),
            lower: data.lower.clone(),
            upper: data.upper.clone(),
            means: data.stats.mean.clone(),
            mads: data.stats.mad.clone(),
            replacement: data.replacement.clone(),
        }
    }

    /// All-numeric context with unbounded ranges and zero means.
    pub fn numeric(width: usize) -> Self {
        let encoding = EncodingMap {
            columns: (0..width)
                .map(|i| crate::dataset::EncodedColumn {
                    name: format!("f{i}"),
                    kind: ColumnKind::Numeric,
                    indices: vec![i],
                    labels: Vec::new(),
                })
                .collect(),
            width,
        };
        Self {
            encoding,
            lower: vec![f64::NEG_INFINITY; width],
            upper: vec![f64::INFINITY; width],
            means: vec![0.0; width],
            mads: vec![1.0; width],
            replacement: vec![0.0; width],
        }
    }

    pub fn width(&self) -> usize {
        self.encoding.width
    }
}

/// Constraint-awareness switches applied to every candidate.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConstraintHooks {
    #[serde(default)]
    pub clamp_range: bool,
    #[serde(default)]
    pub project_ohe: bool,
    /// Encoded indices that must keep their factual value. Empty means
    /// nothing is frozen.
    #[serde(default)]
    pub frozen: Vec<bool>,
    /// Per-index weights of the distance penalty. Empty means all ones.
    #[serde(default)]
    pub weights: Vec<f64>,
}

impl Default for ConstraintHooks {
    fn default() -> Self {
        Self {
            clamp_range: true,
            project_ohe: true,
            frozen: Vec::new(),
            weights: Vec::new(),
        }
    }
}

impl ConstraintHooks {
    pub fn none() -> Self {
        Self {
            clamp_range: false,
            project_ohe: false,
            frozen: Vec::new(),
            weights: Vec::new(),
        }
    }

    pub fn is_frozen(&self, i: usize) -> bool {
        self.frozen.get(i).copied().unwrap_or(false)
    }

    pub fn weight(&self, i: usize) -> f64 {
        self.weights.get(i).copied().unwrap_or(1.0)
    }

    /// Resets frozen entries to the factual, clamps to the realistic range,
    /// and projects dummies, as enabled.
    pub fn apply(&self, c: &mut [f64], x: &[f64], ctx: &FeatureContext) {
        if !self.frozen.is_empty() {
            for (i, ci) in c.iter_mut().enumerate() {
                if self.is_frozen(i) {
                    *ci = x[i];
                }
            }
        }
        if self.clamp_range {
            for (i, ci) in c.iter_mut().enumerate() {
                *ci = ci.clamp(ctx.lower[i], ctx.upper[i]);
            }
        }
        if self.project_ohe {
            project_ohe(c, &ctx.encoding);
        }
    }
}

/// One counterfactual query.
#[derive(Clone, Copy)]
pub struct GeneratorRequest<'a> {
    pub model: &'a NeuralModel,
    pub x: &'a [f64],
    /// Class the model assigns to `x`; the search targets the other one.
    pub y: usize,
    pub context: &'a FeatureContext,
    pub hooks: &'a ConstraintHooks,
    /// Overrides the generator's own iteration / layer / expansion budget.
    pub budget: Option<usize>,
    pub seed: u64,
    /// Row of the factual, carried into the record.
    pub factual_row: usize,
}

impl GeneratorRequest<'_> {
    pub fn validate(&self) -> Result<()> {
        let w = self.context.width();
        if self.x.len() != w || self.model.input_width != w {
            return Err(Error::WidthMismatch {
                expected: w,
                actual: self.x.len(),
            });
        }
        if !self.hooks.frozen.is_empty() && self.hooks.frozen.len() != w {
            return Err(Error::Generator(format!(
                "frozen mask has length {}, expected {w}",
                self.hooks.frozen.len()
            )));
        }
        if !self.hooks.weights.is_empty() && self.hooks.weights.len() != w {
            return Err(Error::Generator(format!(
                "weight vector has length {}, expected {w}",
                self.hooks.weights.len()
            )));
        }
        if self.budget == Some(0) {
            return Err(Error::Generator("budget must be positive".into()));
        }
        if self.y > 1 {
            return Err(Error::Generator(format!("class {} is not binary", self.y)));
        }
        Ok(())
    }

    pub fn target(&self) -> usize {
        1 - self.y
    }

    /// True when the model assigns `c` to a class other than `y`.
    pub fn flips(&self, c: &[f64]) -> bool {
        self.model.predict_class(c).map(|k| k != self.y).unwrap_or(false)
    }
}

/// What a generator's search produced, before validation and timing.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct SearchOutcome {
    pub counterfactual: Option<Vec<f64>>,
    pub iterations: usize,
    pub diagnostic: Option<String>,
}

/// One generation attempt.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CFRecord {
    pub generator: String,
    pub factual_row: usize,
    pub seed: u64,
    pub counterfactual: Option<Vec<f64>>,
    pub valid: bool,
    pub wall_clock_seconds: f64,
    pub iterations: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub diagnostic: Option<String>,
}

pub trait Generator: Send + Sync {
    fn name(&self) -> &str;
    fn family(&self) -> Family;
    /// Whether the search consumes the request seed.
    fn randomized(&self) -> bool {
        false
    }
    fn search(&self, request: &GeneratorRequest<'_>) -> SearchOutcome;
}

/// Runs `generator` under a monotonic clock and re-checks the class flip.
pub fn generate(generator: &dyn Generator, request: &GeneratorRequest<'_>) -> CFRecord {
    let record = |outcome: SearchOutcome, secs: f64| {
        let mut cf = outcome.counterfactual;
        let mut diagnostic = outcome.diagnostic;
        if let Some(c) = &cf {
            if c.len() != request.x.len() {
                diagnostic = Some(format!("generator returned width {}", c.len()));
                cf = None;
            }
        }
        let valid = cf.as_deref().is_some_and(|c| request.flips(c));
        CFRecord {
            generator: generator.name().to_string(),
            factual_row: request.factual_row,
            seed: request.seed,
            counterfactual: cf,
            valid,
            wall_clock_seconds: secs,
            iterations: outcome.iterations,
            diagnostic,
        }
    };
    if let Err(e) = request.validate() {
        return record(
            SearchOutcome {
                diagnostic: Some(e.to_string()),
                ..Default::default()
            },
            0.0,
        );
    }
    let start = Instant::now();
    let outcome = generator.search(request);
    let secs = start.elapsed().as_secs_f64();
    record(outcome, secs)
}

/// Makes one-hot groups a single activation (argmax, lowest index on ties)
/// and rounds binary columns to {0, 1} (0.5 goes to 0).
pub fn project_ohe(v: &mut [f64], encoding: &EncodingMap) {
    for col in &encoding.columns {
        match col.kind {
            ColumnKind::Numeric => {}
            ColumnKind::Binary => {
                let i = col.indices[0];
                v[i] = if v[i] > 0.5 { 1.0 } else { 0.0 };
            }
            ColumnKind::Categorical => {
                let mut best = col.indices[0];
                for &i in &col.indices[1..] {
                    if v[i] > v[best] {
                        best = i;
                    }
                }
                for &i in &col.indices {
                    v[i] = if i == best { 1.0 } else { 0.0 };
                }
            }
        }
    }
}

pub(crate) fn l2_distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(p, q)| (p - q).powi(2)).sum::<f64>().sqrt()
}

pub type Factory = Box<dyn Fn(&str, &serde_json::Value) -> Result<Box<dyn Generator>> + Send + Sync>;

/// Named generator factories. Built-ins are `gradient`, `spheres` and
/// `greedy_mean`.
pub struct Registry {
    factories: BTreeMap<String, Factory>,
}

impl Default for Registry {
    fn default() -> Self {
        Self::with_builtins()
    }
}

fn parse_params<T: serde::de::DeserializeOwned + Default>(params: &serde_json::Value) -> Result<T> {
    if params.is_null() {
        return Ok(T::default());
    }
    serde_json::from_value(params.clone()).map_err(|e| Error::Config(format!("generator parameters: {e}")))
}

impl Registry {
    pub fn empty() -> Self {
        Self {
            factories: BTreeMap::new(),
        }
    }

    pub fn with_builtins() -> Self {
        let mut r = Self::empty();
        r.register(
            "gradient",
            Box::new(|name, p| Ok(Box::new(GradientGenerator::new(name, parse_params(p)?)?))),
        )
        .unwrap();
        r.register(
            "spheres",
            Box::new(|name, p| Ok(Box::new(SphereGenerator::new(name, parse_params(p)?)?))),
        )
        .unwrap();
        r.register(
            "greedy_mean",
            Box::new(|name, p| Ok(Box::new(GreedyMeanGenerator::new(name, parse_params(p)?)?))),
        )
        .unwrap();
        r
    }

    pub fn register(&mut self, kind: &str, factory: Factory) -> Result<()> {
        if self.factories.contains_key(kind) {
            return Err(Error::Config(format!("generator kind `{kind}` is already registered")));
        }
        self.factories.insert(kind.to_string(), factory);
        Ok(())
    }

    pub fn names(&self) -> Vec<String> {
        self.factories.keys().cloned().collect()
    }

    pub fn contains(&self, kind: &str) -> bool {
        self.factories.contains_key(kind)
    }

    pub fn build(&self, kind: &str, name: &str, params: &serde_json::Value) -> Result<Box<dyn Generator>> {
        let factory = self
            .factories
            .get(kind)
            .ok_or_else(|| Error::Config(format!("unknown generator kind `{kind}`")))?;
        factory(name, params)
    }
}
