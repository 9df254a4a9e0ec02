//! Levenberg-Marquardt iteration with the multiplicative damping schedule.
//!
//! A step `gamma = -(J^T J + lambda I)^{-1} J^T g` is accepted when it lowers
//! `||g||^2`, after which `lambda` is divided by `rho1`; otherwise `lambda` is
//! multiplied by `rho2`. The step itself comes from a [`StepSolver`].

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::exec::Executor;
use crate::residual::{DecisionVector, Problem, ResidualBlocks};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LmConfig {
    pub lambda0: f64,
    pub rho1: f64,
    pub rho2: f64,
    /// Stop once `||2 J^T g|| <= sigma`. `None` uses `1e-6 (1 + ||2 J^T g||)` at the start point.
    pub sigma: Option<f64>,
    pub max_iters: usize,
    pub lambda_max: f64,
    /// Relative decreases at or below this count as rejections.
    pub min_rel_decrease: f64,
}

impl Default for LmConfig {
    fn default() -> Self {
        LmConfig { lambda0: 1e-2, rho1: 2.0, rho2: 3.0, sigma: None, max_iters: 500, lambda_max: 1e12, min_rel_decrease: 1e-12 }
    }
}

impl LmConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda0 > 0.0) {
            return Err(Error::Config("lambda0 must be > 0".into()));
        }
        if !(self.rho1 > 1.0) || !(self.rho2 >= self.rho1) {
            return Err(Error::Config("damping factors need rho2 >= rho1 > 1".into()));
        }
        if let Some(s) = self.sigma {
            if !(s > 0.0) {
                return Err(Error::Config("sigma must be > 0".into()));
            }
        }
        if !(self.lambda_max > self.lambda0) {
            return Err(Error::Config("lambda_max must exceed lambda0".into()));
        }
        if !(self.min_rel_decrease >= 0.0) {
            return Err(Error::Config("min_rel_decrease must be >= 0".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Termination {
    GradientTolerance,
    MaxIterations,
    DampingLimit,
}

impl std::fmt::Display for Termination {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Termination::GradientTolerance => "gradient-tolerance",
            Termination::MaxIterations => "max-iterations",
            Termination::DampingLimit => "damping-limit",
        })
    }
}

/// One row of the iteration history. `cost` is the cost after the decision,
/// `lambda` the damping used for the step.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Iteration {
    pub iter: usize,
    pub cost: f64,
    pub lambda: f64,
    pub accepted: bool,
    pub gradient_norm: f64,
}

#[derive(Clone, Debug)]
pub struct LmOutcome {
    pub b: DecisionVector,
    pub cost: f64,
    pub history: Vec<Iteration>,
    pub termination: Termination,
    /// Blocks at the returned `b`.
    pub blocks: ResidualBlocks,
}

impl LmOutcome {
    pub fn accepted_steps(&self) -> usize {
        self.history.iter().filter(|h| h.accepted).count()
    }
}

/// Computes the damped step from the blocks at the current point. `Ok(None)`
/// signals a numerical failure; the driver treats it as a rejection.
pub trait StepSolver {
    fn step(&self, blocks: &ResidualBlocks, lambda: f64) -> Result<Option<DecisionVector>>;
}

pub fn run(problem: &Problem, b0: &DecisionVector, config: &LmConfig, solver: &dyn StepSolver, exec: &Executor) -> Result<LmOutcome> {
    config.validate()?;
    problem.check(b0)?;
    let mut b = b0.clone();
    let mut blocks = problem.assemble(&b, exec)?;
    let mut cost = blocks.cost();
    if !cost.is_finite() || !b.is_finite() {
        return Err(Error::InvalidStart);
    }
    let mut grad_norm = blocks.gradient().norm();
    let sigma = config.sigma.unwrap_or(1e-6 * (1.0 + grad_norm));
    let mut lambda = config.lambda0;
    let mut history = vec![Iteration { iter: 0, cost, lambda, accepted: true, gradient_norm: grad_norm }];
    for iter in 1..=config.max_iters {
        if grad_norm <= sigma {
            return Ok(LmOutcome { b, cost, history, termination: Termination::GradientTolerance, blocks });
        }
        if lambda > config.lambda_max {
            return Ok(LmOutcome { b, cost, history, termination: Termination::DampingLimit, blocks });
        }
        let trial = match solver.step(&blocks, lambda)? {
            Some(step) if step.is_finite() => {
                let t = b.add(&step);
                problem.cost(&t, exec).ok().filter(|c| c.is_finite()).map(|c| (t, c))
            }
            _ => None,
        };
        let used = lambda;
        let accepted = match trial {
            Some((t, c)) if c < cost && cost - c > config.min_rel_decrease * cost => {
                b = t;
                blocks = problem.assemble(&b, exec)?;
                cost = blocks.cost();
                grad_norm = blocks.gradient().norm();
                lambda /= config.rho1;
                true
            }
            _ => {
                lambda *= config.rho2;
                false
            }
        };
        history.push(Iteration { iter, cost, lambda: used, accepted, gradient_norm: grad_norm });
    }
    let termination = if grad_norm <= sigma { Termination::GradientTolerance } else { Termination::MaxIterations };
    Ok(LmOutcome { b, cost, history, termination, blocks })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_config_is_valid() {
        LmConfig::default().validate().unwrap();
    }

    #[test]
    fn rejects_bad_damping_factors() {
        let c = LmConfig { rho1: 3.0, rho2: 2.0, ..LmConfig::default() };
        assert!(matches!(c.validate(), Err(Error::Config(_))));
        let c = LmConfig { rho1: 1.0, rho2: 1.0, ..LmConfig::default() };
        assert!(c.validate().is_err());
    }
}
