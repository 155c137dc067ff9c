use serde::{Deserialize, Serialize};

use super::{Family, Generator, GeneratorRequest, SearchOutcome};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GradientParams {
    pub step_size: f64,
    /// Weight of the L1 distance term.
    pub l1: f64,
    /// Weight of the squared L2 distance term.
    pub l2: f64,
    pub max_steps: usize,
}

impl Default for GradientParams {
    fn default() -> Self {
        Self {
            step_size: 0.05,
            l1: 0.0,
            l2: 0.0,
            max_steps: 1000,
        }
    }
}

/// Minimizes `CE(f(c), 1 - y) + l1 * |c - x|_1 + l2 * |c - x|_2^2`.
///
/// The smooth part takes a plain gradient step and the L1 part a
/// soft-threshold (proximal) step, so coordinates whose pull is weaker
/// than the penalty stay exactly at the factual. The iterate is kept
/// continuous; the flip test and the returned vector use a copy passed
/// through the constraint hooks.
#[derive(Clone, Debug)]
pub struct GradientGenerator {
    name: String,
    params: GradientParams,
}

impl GradientGenerator {
    pub fn new(name: &str, params: GradientParams) -> Result<Self> {
        if !(params.step_size > 0.0 && params.step_size.is_finite()) {
            return Err(Error::Config(format!("gradient step_size must be positive, got {}", params.step_size)));
        }
        if !(params.l1 >= 0.0 && params.l2 >= 0.0) {
            return Err(Error::Config("gradient l1 and l2 must be non-negative".into()));
        }
        if params.max_steps == 0 {
            return Err(Error::Config("gradient max_steps must be positive".into()));
        }
        Ok(Self {
            name: name.to_string(),
            params,
        })
    }

    pub fn params(&self) -> &GradientParams {
        &self.params
    }
}

impl Generator for GradientGenerator {
    fn name(&self) -> &str {
        &self.name
    }

    fn family(&self) -> Family {
        Family::ConvexOptimization
    }

    fn search(&self, req: &GeneratorRequest<'_>) -> SearchOutcome {
        let p = &self.params;
        let steps = req.budget.unwrap_or(p.max_steps);
        let target = req.target();
        let hooks = req.hooks;
        let ctx = req.context;
        let x = req.x;
        let mut c = x.to_vec();
        for step in 1..=steps {
            let grad = match req.model.input_gradient(&c, target) {
                Ok(g) => g,
                Err(e) => {
                    return SearchOutcome {
                        counterfactual: None,
                        iterations: step - 1,
                        diagnostic: Some(e.to_string()),
                    }
                }
            };
            for i in 0..c.len() {
                if hooks.is_frozen(i) {
                    c[i] = x[i];
                    continue;
                }
                let w = hooks.weight(i);
                let g = grad[i] + 2.0 * p.l2 * w * (c[i] - x[i]);
                let mut v = c[i] - p.step_size * g;
                if p.l1 > 0.0 {
                    let d = v - x[i];
                    let shrunk = (d.abs() - p.step_size * p.l1 * w).max(0.0);
                    v = x[i] + d.signum() * shrunk;
                }
                if hooks.clamp_range {
                    v = v.clamp(ctx.lower[i], ctx.upper[i]);
                }
                c[i] = v;
            }
            if c.iter().any(|v| !v.is_finite()) {
                return SearchOutcome {
                    counterfactual: None,
                    iterations: step,
                    diagnostic: Some("iterate became non-finite".into()),
                };
            }
            let mut candidate = c.clone();
            hooks.apply(&mut candidate, x, ctx);
            if req.flips(&candidate) {
                return SearchOutcome {
                    counterfactual: Some(candidate),
                    iterations: step,
                    diagnostic: None,
                };
            }
        }
        let mut last = c;
        hooks.apply(&mut last, x, ctx);
        SearchOutcome {
            counterfactual: Some(last),
            iterations: steps,
            diagnostic: Some("step budget exhausted without a class change".into()),
        }
    }
}
