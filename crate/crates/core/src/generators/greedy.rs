use std::cmp::Ordering;
use std::collections::{BinaryHeap, HashSet};

use serde::{Deserialize, Serialize};

use super::{Family, Generator, GeneratorRequest, SearchOutcome};
use crate::error::{Error, Result};

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GreedyParams {
    /// Node expansions before giving up; defaults to twice the number of
    /// replaceable feature units.
    pub max_expansions: Option<usize>,
}

/// Best-first search over sets of features replaced by their train mean
/// (numeric) or modal value (binary, one-hot group). Nodes are ranked by
/// the model's score for the target class; the first expansion producing a
/// class change returns its best-scoring child.
#[derive(Clone, Debug)]
pub struct GreedyMeanGenerator {
    name: String,
    params: GreedyParams,
}

impl GreedyMeanGenerator {
    pub fn new(name: &str, params: GreedyParams) -> Result<Self> {
        if params.max_expansions == Some(0) {
            return Err(Error::Config("greedy_mean max_expansions must be positive".into()));
        }
        Ok(Self {
            name: name.to_string(),
            params,
        })
    }
}

struct Node {
    score: f64,
    units: Vec<usize>,
}

impl PartialEq for Node {
    fn eq(&self, other: &Self) -> bool {
        self.cmp(other) == Ordering::Equal
    }
}

impl Eq for Node {}

impl PartialOrd for Node {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for Node {
    // max-heap: higher score first, then the lexicographically smaller set
    fn cmp(&self, other: &Self) -> Ordering {
        self.score
            .total_cmp(&other.score)
            .then_with(|| other.units.cmp(&self.units))
    }
}

impl Generator for GreedyMeanGenerator {
    fn name(&self) -> &str {
        &self.name
    }

    fn family(&self) -> Family {
        Family::Heuristic
    }

    fn search(&self, req: &GeneratorRequest<'_>) -> SearchOutcome {
        let x = req.x;
        let ctx = req.context;
        let target = req.target();
        // a unit is one encoded column; it qualifies when it is not frozen
        // and its replacement differs from the factual
        let units: Vec<&[usize]> = ctx
            .encoding
            .columns
            .iter()
            .map(|c| c.indices.as_slice())
            .filter(|idx| {
                idx.iter().all(|&i| !req.hooks.is_frozen(i))
                    && idx.iter().any(|&i| ctx.replacement[i] != x[i])
            })
            .collect();
        if units.is_empty() {
            return SearchOutcome {
                counterfactual: None,
                iterations: 0,
                diagnostic: Some("no feature can be replaced".into()),
            };
        }
        let build = |set: &[usize]| {
            let mut c = x.to_vec();
            for &u in set {
                for &i in units[u] {
                    c[i] = ctx.replacement[i];
                }
            }
            req.hooks.apply(&mut c, x, ctx);
            c
        };
        let score = |c: &[f64]| req.model.predict(c).map(|p| p[target]).unwrap_or(f64::NEG_INFINITY);

        let limit = req
            .budget
            .or(self.params.max_expansions)
            .unwrap_or(2 * units.len());
        let mut heap = BinaryHeap::new();
        let mut seen: HashSet<Vec<usize>> = HashSet::new();
        heap.push(Node {
            score: score(x),
            units: Vec::new(),
        });
        seen.insert(Vec::new());
        let mut expansions = 0;
        while let Some(node) = heap.pop() {
            if expansions >= limit {
                break;
            }
            expansions += 1;
            let mut flipped: Option<(Node, Vec<f64>)> = None;
            for u in 0..units.len() {
                if node.units.contains(&u) {
                    continue;
                }
                let mut set = node.units.clone();
                set.push(u);
                set.sort_unstable();
                if !seen.insert(set.clone()) {
                    continue;
                }
                let c = build(&set);
                let child = Node { score: score(&c), units: set };
                if req.flips(&c) {
                    if flipped.as_ref().is_none_or(|(b, _)| child > *b) {
                        flipped = Some((child, c));
                    }
                } else {
                    heap.push(child);
                }
            }
            if let Some((_, c)) = flipped {
                return SearchOutcome {
                    counterfactual: Some(c),
                    iterations: expansions,
                    diagnostic: None,
                };
            }
        }
        SearchOutcome {
            counterfactual: None,
            iterations: expansions,
            diagnostic: Some("expansion budget exhausted without a class change".into()),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::super::testing::*;
    use super::super::*;
    use super::*;
    use crate::dataset::{EncodedColumn, EncodingMap};
    use crate::schema::ColumnKind;

    fn gen() -> GreedyMeanGenerator {
        GreedyMeanGenerator::new("greedy_mean", GreedyParams::default()).unwrap()
    }

    /// Smallest subset size whose replacement flips the class, by
    /// enumerating all subsets.
    fn smallest_flip(model: &NeuralModel, x: &[f64], repl: &[f64]) -> Option<usize> {
        let m = x.len();
        let y = model.predict_class(x).unwrap();
        (1u32..(1 << m))
            .filter(|mask| {
                let c: Vec<f64> = (0..m).map(|i| if mask >> i & 1 == 1 { repl[i] } else { x[i] }).collect();
                model.predict_class(&c).unwrap() != y
            })
            .map(|mask| mask.count_ones() as usize)
            .min()
    }

    #[test]
    fn single_replacement_suffices() {
        let model = linear_model(&[1.0, 0.1, 0.1], 0.0);
        let mut ctx = FeatureContext::numeric(3);
        ctx.replacement = vec![0.5, 0.0, 0.0];
        let hooks = ConstraintHooks::none();
        let x = [-0.2, 0.3, 0.3];
        let rec = generate(&gen(), &request(&model, &x, &ctx, &hooks));
        assert!(rec.valid);
        let c = rec.counterfactual.unwrap();
        let changed = c.iter().zip(&x).filter(|(a, b)| a != b).count();
        assert_eq!(changed, 1);
        assert_eq!(c[0], 0.5);
    }

    #[test]
    fn matches_exhaustive_subset_search() {
        // each feature alone is too weak; only a pair flips
        let model = linear_model(&[1.0, 1.0, 1.0, 0.01], -1.5);
        let mut ctx = FeatureContext::numeric(4);
        ctx.replacement = vec![1.0, 1.0, 0.2, 1.0];
        let hooks = ConstraintHooks::none();
        let x = [0.0, 0.0, 0.0, 0.0];
        let rec = generate(&gen(), &request(&model, &x, &ctx, &hooks));
        assert!(rec.valid);
        let c = rec.counterfactual.unwrap();
        let changed = c.iter().zip(&x).filter(|(a, b)| a != b).count();
        assert_eq!(Some(changed), smallest_flip(&model, &x, &ctx.replacement));
        assert_eq!(c, vec![1.0, 1.0, 0.0, 0.0]);
    }

    #[test]
    fn one_hot_group_is_replaced_whole() {
        // one numeric column and one 3-level categorical
        let encoding = EncodingMap {
            columns: vec![
                EncodedColumn {
                    name: "n".into(),
                    kind: ColumnKind::Numeric,
                    indices: vec![0],
                    labels: vec![],
                },
                EncodedColumn {
                    name: "c".into(),
                    kind: ColumnKind::Categorical,
                    indices: vec![1, 2, 3],
                    labels: vec!["a".into(), "b".into(), "c".into()],
                },
            ],
            width: 4,
        };
        let mut ctx = FeatureContext::numeric(4);
        ctx.encoding = encoding;
        ctx.replacement = vec![0.0, 0.0, 0.0, 1.0];
        let model = linear_model(&[0.1, 0.0, 0.0, 2.0], -0.5);
        let hooks = ConstraintHooks::default();
        let mut ctx2 = ctx.clone();
        ctx2.lower = vec![-5.0, 0.0, 0.0, 0.0];
        ctx2.upper = vec![5.0, 1.0, 1.0, 1.0];
        let x = [0.0, 1.0, 0.0, 0.0];
        let rec = generate(&gen(), &request(&model, &x, &ctx2, &hooks));
        assert!(rec.valid);
        assert_eq!(rec.counterfactual.unwrap(), vec![0.0, 0.0, 0.0, 1.0]);
    }

    #[test]
    fn no_flip_within_budget() {
        let model = linear_model(&[1.0, 1.0], -10.0);
        let mut ctx = FeatureContext::numeric(2);
        ctx.replacement = vec![1.0, 1.0];
        let hooks = ConstraintHooks::none();
        let x = [0.0, 0.0];
        let rec = generate(&gen(), &request(&model, &x, &ctx, &hooks));
        assert!(!rec.valid);
        assert!(rec.counterfactual.is_none());
        assert!(rec.iterations <= 4);
    }
}
