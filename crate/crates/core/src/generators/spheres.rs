use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::{l2_distance, Family, Generator, GeneratorRequest, SearchOutcome};
use crate::error::{Error, Result};
use crate::schema::ColumnKind;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SphereParams {
    /// Outer radius of the first layer (a full ball).
    pub initial_radius: f64,
    /// Width of each later annulus.
    pub growth: f64,
    pub layers: usize,
    pub samples_per_layer: usize,
}

impl Default for SphereParams {
    fn default() -> Self {
        Self {
            initial_radius: 0.1,
            growth: 0.1,
            layers: 40,
            samples_per_layer: 200,
        }
    }
}

/// Growing-spheres search: samples uniformly in successive hyperspherical
/// layers around the factual until some sample changes class, keeps the
/// closest such sample, then reverts coordinates back to the factual one at
/// a time (smallest change first) while the class stays changed.
#[derive(Clone, Debug)]
pub struct SphereGenerator {
    name: String,
    params: SphereParams,
}

impl SphereGenerator {
    pub fn new(name: &str, params: SphereParams) -> Result<Self> {
        if !(params.initial_radius > 0.0 && params.growth > 0.0) {
            return Err(Error::Config("spheres radii must be positive".into()));
        }
        if params.layers == 0 || params.samples_per_layer == 0 {
            return Err(Error::Config("spheres layers and samples_per_layer must be positive".into()));
        }
        Ok(Self {
            name: name.to_string(),
            params,
        })
    }

    /// Inner and outer radius of layer `k` (0-based).
    pub fn layer_bounds(&self, k: usize) -> (f64, f64) {
        let p = &self.params;
        if k == 0 {
            (0.0, p.initial_radius)
        } else {
            (
                p.initial_radius + (k - 1) as f64 * p.growth,
                p.initial_radius + k as f64 * p.growth,
            )
        }
    }
}

/// Radius with density proportional to `r^(d-1)` on `[lo, hi]`.
fn annulus_radius(rng: &mut impl Rng, lo: f64, hi: f64, d: usize) -> f64 {
    let u: f64 = rng.random();
    let a = (lo / hi).powi(d as i32);
    hi * (a + u * (1.0 - a)).powf(1.0 / d as f64)
}

impl Generator for SphereGenerator {
    fn name(&self) -> &str {
        &self.name
    }

    fn family(&self) -> Family {
        Family::Heuristic
    }

    fn randomized(&self) -> bool {
        true
    }

    fn search(&self, req: &GeneratorRequest<'_>) -> SearchOutcome {
        let x = req.x;
        let free: Vec<usize> = (0..x.len()).filter(|&i| !req.hooks.is_frozen(i)).collect();
        if free.is_empty() {
            return SearchOutcome {
                counterfactual: None,
                iterations: 0,
                diagnostic: Some("every feature is frozen".into()),
            };
        }
        let mut rng = ChaCha8Rng::seed_from_u64(req.seed);
        let layers = req.budget.unwrap_or(self.params.layers);
        let d = free.len();
        let mut dir = vec![0.0; d];
        for k in 0..layers {
            let (lo, hi) = self.layer_bounds(k);
            let mut best: Option<(f64, Vec<f64>)> = None;
            for _ in 0..self.params.samples_per_layer {
                let mut norm = 0.0f64;
                for v in dir.iter_mut() {
                    *v = rng.sample(StandardNormal);
                    norm += *v * *v;
                }
                let norm: f64 = norm.sqrt();
                let r = annulus_radius(&mut rng, lo, hi, d);
                if norm == 0.0 {
                    continue;
                }
                let mut c = x.to_vec();
                for (j, &i) in free.iter().enumerate() {
                    c[i] += r * dir[j] / norm;
                }
                req.hooks.apply(&mut c, x, req.context);
                if req.flips(&c) {
                    let dist = l2_distance(&c, x);
                    if best.as_ref().is_none_or(|(b, _)| dist < *b) {
                        best = Some((dist, c));
                    }
                }
            }
            if let Some((_, c)) = best {
                return SearchOutcome {
                    counterfactual: Some(sparsify(req, c)),
                    iterations: k + 1,
                    diagnostic: None,
                };
            }
        }
        SearchOutcome {
            counterfactual: None,
            iterations: layers,
            diagnostic: Some("no class change within the outermost layer".into()),
        }
    }
}

/// Reverts units of `c` to the factual, smallest change first, keeping each
/// reversion that preserves the class change. With one-hot projection on, a
/// categorical column reverts as a whole.
fn sparsify(req: &GeneratorRequest<'_>, mut c: Vec<f64>) -> Vec<f64> {
    let x = req.x;
    let units: Vec<Vec<usize>> = if req.hooks.project_ohe {
        req.context
            .encoding
            .columns
            .iter()
            .flat_map(|col| match col.kind {
                ColumnKind::Categorical => vec![col.indices.clone()],
                _ => col.indices.iter().map(|&i| vec![i]).collect(),
            })
            .collect()
    } else {
        (0..x.len()).map(|i| vec![i]).collect()
    };
    let change = |c: &[f64], u: &[usize]| u.iter().map(|&i| (c[i] - x[i]).powi(2)).sum::<f64>();
    let mut order: Vec<(f64, usize)> = units
        .iter()
        .enumerate()
        .map(|(k, u)| (change(&c, u), k))
        .filter(|(d, _)| *d > 0.0)
        .collect();
    order.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    for (_, k) in order {
        let mut trial = c.clone();
        for &i in &units[k] {
            trial[i] = x[i];
        }
        if req.flips(&trial) {
            c = trial;
        }
    }
    c
}

#[cfg(test)]
mod tests {
    use super::super::testing::*;
    use super::super::*;
    use super::*;

    fn gen() -> SphereGenerator {
        SphereGenerator::new("spheres", SphereParams::default()).unwrap()
    }

    #[test]
    fn one_dimensional_threshold() {
        // class 1 iff x > 0; the first layer reaching past the boundary is
        // (1.0, 1.1], so the result lands in (0, 0.1]
        let model = linear_model(&[1.0], 0.0);
        let ctx = FeatureContext::numeric(1);
        let hooks = ConstraintHooks::none();
        let x = [-1.0];
        for seed in 0..10 {
            let mut req = request(&model, &x, &ctx, &hooks);
            req.seed = seed;
            let rec = generate(&gen(), &req);
            assert!(rec.valid);
            let c = rec.counterfactual.unwrap()[0];
            assert!(c > 0.0 && c <= 0.2, "seed {seed}: {c}");
            assert_eq!(rec.iterations, 11);
        }
    }

    #[test]
    fn annulus_radius_stays_in_bounds() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for d in [1, 2, 5, 30] {
            for _ in 0..500 {
                let r = annulus_radius(&mut rng, 0.3, 0.4, d);
                assert!((0.3..=0.4).contains(&r));
            }
        }
    }

    #[test]
    fn radius_is_bounded_by_layers_used() {
        let model = linear_model(&[0.7, -1.3, 0.4], 0.9);
        let ctx = FeatureContext::numeric(3);
        let hooks = ConstraintHooks::none();
        let g = gen();
        for seed in 0..20 {
            let x = [-(seed as f64) * 0.1, 0.5, 0.0];
            let mut req = request(&model, &x, &ctx, &hooks);
            req.seed = seed;
            let rec = generate(&g, &req);
            if let Some(c) = rec.counterfactual.filter(|_| rec.valid) {
                let (_, hi) = g.layer_bounds(rec.iterations - 1);
                assert!(l2_distance(&c, &x) <= hi + 1e-12);
            }
        }
    }

    #[test]
    fn sparsification_drops_irrelevant_features() {
        // only the first coordinate matters
        let model = linear_model(&[1.0, 0.0, 0.0, 0.0], 0.0);
        let ctx = FeatureContext::numeric(4);
        let hooks = ConstraintHooks::none();
        let x = [-0.3, 0.0, 0.0, 0.0];
        let rec = generate(&gen(), &request(&model, &x, &ctx, &hooks));
        assert!(rec.valid);
        let c = rec.counterfactual.unwrap();
        assert_eq!(&c[1..], &[0.0, 0.0, 0.0]);
    }

    #[test]
    fn seeds_change_samples() {
        let model = linear_model(&[1.0, 1.0], 0.0);
        let ctx = FeatureContext::numeric(2);
        let hooks = ConstraintHooks::none();
        let x = [-0.5, -0.5];
        let mut a = request(&model, &x, &ctx, &hooks);
        a.seed = 1;
        let mut b = a;
        b.seed = 2;
        let ra = generate(&gen(), &a);
        let rb = generate(&gen(), &b);
        assert_ne!(ra.counterfactual, rb.counterfactual);
    }
}
