//! Decision-tree recommender: which generator to use for a given model,
//! dataset and factual.
//!
//! Each factual becomes one training row per best-scoring generator (ties
//! give several rows with the same features). A small CART tree with Gini
//! impurity maps the eight profile features to the winning generator or
//! its family; querying the tree returns the class proportions of the
//! reached leaf.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::dataset::{FactualCase, PreparedDataset};
use crate::error::{Error, Result};
use crate::generators::Family;
use crate::metrics::{Direction, Metric, ValidityMode};
use crate::model::NeuralModel;
use crate::ranking::ScoredRecord;
use crate::schema::ColumnKind;

pub const DEFAULT_MAX_DEPTH: usize = 3;

pub const FEATURE_NAMES: [&str; 8] = [
    "neurons",
    "auc_test",
    "rows_train",
    "columns_numerical",
    "columns_categorical",
    "misclassified",
    "factual_prediction",
    "factual_share",
];

/// Model, dataset and factual characteristics of one factual.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FactualProfile {
    pub dataset: String,
    pub factual_row: usize,
    pub features: [f64; 8],
}

impl FactualProfile {
    pub fn new(model: &NeuralModel, data: &PreparedDataset, factual: &FactualCase) -> Self {
        let auc_test = model.eval.as_ref().map_or(f64::NAN, |e| e.auc_test);
        // binary columns count as categorical
        let categorical =
            data.schema.count_kind(ColumnKind::Categorical) + data.schema.count_kind(ColumnKind::Binary);
        Self {
            dataset: data.name.clone(),
            factual_row: factual.row,
            features: [
                model.n_hidden as f64,
                auc_test,
                data.split.train.len() as f64,
                data.schema.count_kind(ColumnKind::Numeric) as f64,
                categorical as f64,
                f64::from(u8::from(factual.misclassified)),
                factual.score_predicted,
                data.class_share(factual.original_class),
            ],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RecommenderRow {
    pub features: [f64; 8],
    pub target: String,
}

/// How winning generators become tree classes.
#[derive(Clone, Debug, Default, PartialEq)]
pub enum TargetMap {
    #[default]
    Algorithm,
    /// Generator name to family label.
    Family(BTreeMap<String, Family>),
}

impl TargetMap {
    fn label(&self, generator: &str) -> Result<String> {
        match self {
            TargetMap::Algorithm => Ok(generator.to_string()),
            TargetMap::Family(m) => m
                .get(generator)
                .map(|f| f.label().to_string())
                .ok_or_else(|| Error::Tree(format!("no family known for generator `{generator}`"))),
        }
    }
}

/// One row per (factual, best generator) among eligible first-run records.
/// Factuals where no generator is eligible contribute nothing. Under a
/// family map, generators of the same family tying for best give one row.
pub fn build_rows(
    records: &[ScoredRecord],
    profiles: &[FactualProfile],
    metric: Metric,
    mode: ValidityMode,
    targets: &TargetMap,
) -> Result<Vec<RecommenderRow>> {
    let mut by_factual: BTreeMap<(&str, usize), Vec<(&str, f64)>> = BTreeMap::new();
    for r in records.iter().filter(|r| r.run == 0) {
        let entry = by_factual.entry((r.dataset.as_str(), r.factual_row)).or_default();
        if let Some(v) = metric.value(&r.metrics).filter(|v| v.is_finite() && r.metrics.eligible(mode)) {
            entry.push((r.generator.as_str(), v));
        }
    }
    let index: BTreeMap<(&str, usize), &FactualProfile> =
        profiles.iter().map(|p| ((p.dataset.as_str(), p.factual_row), p)).collect();
    let mut rows = Vec::new();
    for (key, cands) in by_factual {
        if cands.is_empty() {
            continue;
        }
        let profile = index
            .get(&key)
            .ok_or_else(|| Error::Tree(format!("no profile for factual {} of `{}`", key.1, key.0)))?;
        let best = match metric.direction() {
            Direction::LowerBetter => cands.iter().map(|c| c.1).fold(f64::INFINITY, f64::min),
            Direction::HigherBetter => cands.iter().map(|c| c.1).fold(f64::NEG_INFINITY, f64::max),
        };
        let mut labels = BTreeSet::new();
        for (g, v) in &cands {
            if *v == best {
                labels.insert(targets.label(g)?);
            }
        }
        for target in labels {
            rows.push(RecommenderRow {
                features: profile.features,
                target,
            });
        }
    }
    Ok(rows)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TreeNode {
    pub gini: f64,
    pub samples: usize,
    /// Per-class counts, aligned with [`DecisionTree::classes`].
    pub counts: Vec<usize>,
    pub split: Option<TreeSplit>,
}

/// Rows with `x[feature] <= threshold` go left.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TreeSplit {
    pub feature: usize,
    pub threshold: f64,
    pub left: Box<TreeNode>,
    pub right: Box<TreeNode>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DecisionTree {
    pub features: Vec<String>,
    pub classes: Vec<String>,
    pub root: TreeNode,
}

pub fn gini(counts: &[usize]) -> f64 {
    let n: usize = counts.iter().sum();
    if n == 0 {
        return 0.0;
    }
    let sq: usize = counts.iter().map(|c| c * c).sum();
    1.0 - sq as f64 / (n * n) as f64
}

/// Sum of squared class counts over the node size, as an exact fraction.
/// Larger is purer; weighted child impurity is `1 - (sl/nl + sr/nr) / n`.
#[derive(Clone, Copy)]
struct Purity {
    num: u128,
    den: u128,
}

impl Purity {
    fn of_split(left: &[usize], right: &[usize]) -> Self {
        let nl: u128 = left.iter().sum::<usize>() as u128;
        let nr: u128 = right.iter().sum::<usize>() as u128;
        let sl: u128 = left.iter().map(|&c| (c * c) as u128).sum();
        let sr: u128 = right.iter().map(|&c| (c * c) as u128).sum();
        Self {
            num: sl * nr + sr * nl,
            den: nl * nr,
        }
    }

    fn of_node(counts: &[usize]) -> Self {
        let n: u128 = counts.iter().sum::<usize>() as u128;
        Self {
            num: counts.iter().map(|&c| (c * c) as u128).sum(),
            den: n,
        }
    }

    fn greater(&self, other: &Self) -> bool {
        self.num * other.den > other.num * self.den
    }
}

fn midpoint(a: f64, b: f64) -> f64 {
    let m = a + (b - a) / 2.0;
    if m < b {
        m
    } else {
        a
    }
}

struct Fitter<'a> {
    x: &'a [Vec<f64>],
    y: &'a [usize],
    n_classes: usize,
    max_depth: usize,
}

impl Fitter<'_> {
    fn counts(&self, idx: &[usize]) -> Vec<usize> {
        let mut c = vec![0; self.n_classes];
        for &i in idx {
            c[self.y[i]] += 1;
        }
        c
    }

    fn best_split(&self, idx: &[usize], parent: &[usize]) -> Option<(usize, f64)> {
        let n_features = self.x[idx[0]].len();
        let mut best: Option<(Purity, usize, f64)> = None;
        for f in 0..n_features {
            let mut order: Vec<usize> = idx.to_vec();
            order.sort_by(|&a, &b| self.x[a][f].total_cmp(&self.x[b][f]));
            let mut left = vec![0; self.n_classes];
            let mut right = parent.to_vec();
            for w in 0..order.len() - 1 {
                let cls = self.y[order[w]];
                left[cls] += 1;
                right[cls] -= 1;
                let (a, b) = (self.x[order[w]][f], self.x[order[w + 1]][f]);
                if a == b {
                    continue;
                }
                let p = Purity::of_split(&left, &right);
                if best.as_ref().is_none_or(|(bp, _, _)| p.greater(bp)) {
                    best = Some((p, f, midpoint(a, b)));
                }
            }
        }
        let (p, f, t) = best?;
        p.greater(&Purity::of_node(parent)).then_some((f, t))
    }

    fn grow(&self, idx: &[usize], depth: usize) -> TreeNode {
        let counts = self.counts(idx);
        let mut node = TreeNode {
            gini: gini(&counts),
            samples: idx.len(),
            counts,
            split: None,
        };
        let pure = node.counts.iter().filter(|&&c| c > 0).count() <= 1;
        if depth >= self.max_depth || pure || idx.len() < 2 {
            return node;
        }
        if let Some((feature, threshold)) = self.best_split(idx, &node.counts) {
            let (l, r): (Vec<usize>, Vec<usize>) = idx.iter().partition(|&&i| self.x[i][feature] <= threshold);
            node.split = Some(TreeSplit {
                feature,
                threshold,
                left: Box::new(self.grow(&l, depth + 1)),
                right: Box::new(self.grow(&r, depth + 1)),
            });
        }
        node
    }
}

/// Greedy CART fit. Candidate thresholds are midpoints between consecutive
/// distinct values; ties go to the lower feature index, then the lower
/// threshold. A split must strictly lower the weighted Gini impurity.
pub fn fit_tree(x: &[Vec<f64>], y: &[String], feature_names: &[&str], max_depth: usize) -> Result<DecisionTree> {
    if x.is_empty() {
        return Err(Error::Tree("no rows to fit".into()));
    }
    if x.len() != y.len() {
        return Err(Error::Tree("feature and target rows differ in count".into()));
    }
    let width = feature_names.len();
    if x.iter().any(|r| r.len() != width) {
        return Err(Error::Tree(format!("every row needs {width} features")));
    }
    if x.iter().flatten().any(|v| v.is_nan()) {
        return Err(Error::Tree("feature values must not be NaN".into()));
    }
    let classes: Vec<String> = y.iter().cloned().collect::<BTreeSet<_>>().into_iter().collect();
    let yi: Vec<usize> = y.iter().map(|c| classes.binary_search(c).unwrap()).collect();
    let fitter = Fitter {
        x,
        y: &yi,
        n_classes: classes.len(),
        max_depth,
    };
    let idx: Vec<usize> = (0..x.len()).collect();
    Ok(DecisionTree {
        features: feature_names.iter().map(|s| s.to_string()).collect(),
        classes,
        root: fitter.grow(&idx, 0),
    })
}

pub fn fit_rows(rows: &[RecommenderRow], max_depth: usize) -> Result<DecisionTree> {
    let x: Vec<Vec<f64>> = rows.iter().map(|r| r.features.to_vec()).collect();
    let y: Vec<String> = rows.iter().map(|r| r.target.clone()).collect();
    fit_tree(&x, &y, &FEATURE_NAMES, max_depth)
}

impl TreeNode {
    pub fn depth(&self) -> usize {
        self.split.as_ref().map_or(0, |s| 1 + s.left.depth().max(s.right.depth()))
    }

    pub fn node_count(&self) -> usize {
        1 + self.split.as_ref().map_or(0, |s| s.left.node_count() + s.right.node_count())
    }

    /// Index of the most frequent class; ties go to the lower index.
    pub fn majority(&self) -> usize {
        let mut best = 0;
        for (i, &c) in self.counts.iter().enumerate() {
            if c > self.counts[best] {
                best = i;
            }
        }
        best
    }
}

impl DecisionTree {
    pub fn depth(&self) -> usize {
        self.root.depth()
    }

    pub fn leaf(&self, query: &[f64]) -> &TreeNode {
        let mut node = &self.root;
        while let Some(s) = &node.split {
            node = if query[s.feature] <= s.threshold { &s.left } else { &s.right };
        }
        node
    }

    /// Class proportions at the reached leaf, highest first (ties by name).
    pub fn scores(&self, query: &[f64]) -> Scores {
        let leaf = self.leaf(query);
        let mut out: Vec<(String, f64)> = leaf
            .counts
            .iter()
            .enumerate()
            .filter(|(_, &c)| c > 0)
            .map(|(i, &c)| (self.classes[i].clone(), c as f64 / leaf.samples as f64))
            .collect();
        out.sort_by(|a, b| b.1.total_cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
        out
    }
}

/// Class labels with their leaf shares.
pub type Scores = Vec<(String, f64)>;

/// Per-metric scores for `query` from each metric's tree.
pub fn recommend(trees: &[(Metric, DecisionTree)], query: &[f64]) -> Result<Vec<(Metric, Scores)>> {
    trees
        .iter()
        .map(|(m, t)| {
            if query.len() != t.features.len() {
                return Err(Error::Tree(format!(
                    "query has {} features, tree expects {}",
                    query.len(),
                    t.features.len()
                )));
            }
            Ok((*m, t.scores(query)))
        })
        .collect()
}

/// Renders the tree one node per line, children indented under their
/// parent (left branch first). Numbers use round-trip formatting so
/// [`parse_tree`] restores the tree exactly.
pub fn export_tree(tree: &DecisionTree) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "features: {}", serde_json::to_string(&tree.features).unwrap());
    let _ = writeln!(out, "classes: {}", serde_json::to_string(&tree.classes).unwrap());
    render(tree, &tree.root, 0, &mut out);
    out
}

fn render(tree: &DecisionTree, node: &TreeNode, depth: usize, out: &mut String) {
    let indent = "  ".repeat(depth);
    let counts: Vec<String> = node.counts.iter().map(|c| c.to_string()).collect();
    let tail = format!(
        "gini={} samples={} value=[{}] class={}",
        node.gini,
        node.samples,
        counts.join(", "),
        tree.classes[node.majority()]
    );
    match &node.split {
        Some(s) => {
            let _ = writeln!(out, "{indent}[{} <= {}] {tail}", tree.features[s.feature], s.threshold);
            render(tree, &s.left, depth + 1, out);
            render(tree, &s.right, depth + 1, out);
        }
        None => {
            let _ = writeln!(out, "{indent}leaf {tail}");
        }
    }
}

pub fn parse_tree(text: &str) -> Result<DecisionTree> {
    let bad = |msg: &str| Error::Tree(format!("malformed tree text: {msg}"));
    let mut lines = text.lines().filter(|l| !l.trim().is_empty());
    let header = |line: Option<&str>, key: &str| -> Result<Vec<String>> {
        let rest = line
            .and_then(|l| l.strip_prefix(key))
            .ok_or_else(|| bad(&format!("expected `{key}` header")))?;
        serde_json::from_str(rest.trim()).map_err(|e| bad(&e.to_string()))
    };
    let features = header(lines.next(), "features:")?;
    let classes = header(lines.next(), "classes:")?;
    let body: Vec<(usize, &str)> = lines
        .map(|l| {
            let trimmed = l.trim_start();
            ((l.len() - trimmed.len()) / 2, trimmed)
        })
        .collect();
    let mut pos = 0;
    let root = parse_node(&body, &mut pos, 0, &features, &bad)?;
    if pos != body.len() {
        return Err(bad("trailing lines"));
    }
    Ok(DecisionTree { features, classes, root })
}

fn parse_node(
    body: &[(usize, &str)],
    pos: &mut usize,
    depth: usize,
    features: &[String],
    bad: &dyn Fn(&str) -> Error,
) -> Result<TreeNode> {
    let &(d, line) = body.get(*pos).ok_or_else(|| bad("missing node"))?;
    if d != depth {
        return Err(bad(&format!("unexpected indentation at `{line}`")));
    }
    *pos += 1;
    let (split, stats) = if let Some(rest) = line.strip_prefix("leaf ") {
        (None, rest)
    } else {
        let rest = line.strip_prefix('[').ok_or_else(|| bad(line))?;
        let (cond, stats) = rest.split_once("] ").ok_or_else(|| bad(line))?;
        let (name, thr) = cond.split_once(" <= ").ok_or_else(|| bad(line))?;
        let feature = features.iter().position(|f| f == name).ok_or_else(|| bad(name))?;
        let threshold: f64 = thr.parse().map_err(|_| bad(thr))?;
        (Some((feature, threshold)), stats)
    };
    let field = |key: &str| -> Result<&str> {
        let start = stats.find(key).ok_or_else(|| bad(key))? + key.len();
        let rest = &stats[start..];
        Ok(if rest.starts_with('[') {
            &rest[1..rest.find(']').ok_or_else(|| bad(key))?]
        } else {
            rest.split(' ').next().unwrap_or("")
        })
    };
    let gini: f64 = field("gini=")?.parse().map_err(|_| bad("gini"))?;
    let samples: usize = field("samples=")?.parse().map_err(|_| bad("samples"))?;
    let counts: Vec<usize> = field("value=")?
        .split(", ")
        .map(|c| c.parse().map_err(|_| bad("value")))
        .collect::<Result<_>>()?;
    let split = match split {
        Some((feature, threshold)) => {
            let left = parse_node(body, pos, depth + 1, features, bad)?;
            let right = parse_node(body, pos, depth + 1, features, bad)?;
            Some(TreeSplit {
                feature,
                threshold,
                left: Box::new(left),
                right: Box::new(right),
            })
        }
        None => None,
    };
    Ok(TreeNode {
        gini,
        samples,
        counts,
        split,
    })
}
