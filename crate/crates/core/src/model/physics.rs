use std::fmt;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

/// First-principle part of the dynamics, `f_phys(t, x)`.
pub trait Physics: Send + Sync {
    fn n_x(&self) -> usize;
    fn eval(&self, t: f64, x: &DVector<f64>) -> DVector<f64>;
    fn jacobian(&self, t: f64, x: &DVector<f64>) -> DMatrix<f64>;
}

/// Built-in first-principle models, serializable so that model files are
/// self-contained.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum PhysicsSpec {
    /// `f_phys = 0`.
    Zero {
        n_x: usize,
    },
    /// `f_phys = A x`, rows of `A`.
    Linear {
        matrix: Vec<Vec<f64>>,
    },
    Lorenz {
        sigma: f64,
        rho: f64,
        beta: f64,
    },
    /// Forced Van der Pol oscillator, the full truth model.
    VanDerPol {
        amplitude: f64,
        mu: f64,
        omega: f64,
    },
    /// `[x2, A sin(w t)]`: the Van der Pol model with the damping and spring terms missing.
    ForcedOscillator {
        amplitude: f64,
        omega: f64,
    },
}

impl Physics for PhysicsSpec {
    fn n_x(&self) -> usize {
        match self {
            PhysicsSpec::Zero { n_x } => *n_x,
            PhysicsSpec::Linear { matrix } => matrix.len(),
            PhysicsSpec::Lorenz { .. } => 3,
            PhysicsSpec::VanDerPol { .. } | PhysicsSpec::ForcedOscillator { .. } => 2,
        }
    }

    fn eval(&self, t: f64, x: &DVector<f64>) -> DVector<f64> {
        match self {
            PhysicsSpec::Zero { n_x } => DVector::zeros(*n_x),
            PhysicsSpec::Linear { matrix } => DVector::from_iterator(matrix.len(), matrix.iter().map(|row| row.iter().zip(x.iter()).map(|(a, b)| a * b).sum())),
            PhysicsSpec::Lorenz { sigma, rho, beta } => DVector::from_vec(vec![sigma * (x[1] - x[0]), x[0] * (rho - x[2]) - x[1], -beta * x[2] + x[0] * x[1]]),
            PhysicsSpec::VanDerPol { amplitude, mu, omega } => {
                DVector::from_vec(vec![x[1], amplitude * (omega * t).sin() - x[0] + mu * (1.0 - x[0] * x[0]) * x[1]])
            }
            PhysicsSpec::ForcedOscillator { amplitude, omega } => DVector::from_vec(vec![x[1], amplitude * (omega * t).sin()]),
        }
    }

    fn jacobian(&self, _t: f64, x: &DVector<f64>) -> DMatrix<f64> {
        match self {
            PhysicsSpec::Zero { n_x } => DMatrix::zeros(*n_x, *n_x),
            PhysicsSpec::Linear { matrix } => {
                let n = matrix.len();
                DMatrix::from_fn(n, n, |i, j| matrix[i][j])
            }
            PhysicsSpec::Lorenz { sigma, rho, beta } => DMatrix::from_row_slice(3, 3, &[-sigma, *sigma, 0.0, rho - x[2], -1.0, -x[0], x[1], x[0], -beta]),
            PhysicsSpec::VanDerPol { mu, .. } => DMatrix::from_row_slice(2, 2, &[0.0, 1.0, -1.0 - 2.0 * mu * x[0] * x[1], mu * (1.0 - x[0] * x[0])]),
            PhysicsSpec::ForcedOscillator { .. } => DMatrix::from_row_slice(2, 2, &[0.0, 1.0, 0.0, 0.0]),
        }
    }
}

type EvalFn = dyn Fn(f64, &DVector<f64>) -> DVector<f64> + Send + Sync;
type JacFn = dyn Fn(f64, &DVector<f64>) -> DMatrix<f64> + Send + Sync;

/// User-supplied first-principle model given as callbacks.
#[derive(Clone)]
pub struct FnPhysics {
    n_x: usize,
    eval: Arc<EvalFn>,
    jac: Arc<JacFn>,
}

impl FnPhysics {
    pub fn new(
        n_x: usize,
        eval: impl Fn(f64, &DVector<f64>) -> DVector<f64> + Send + Sync + 'static,
        jac: impl Fn(f64, &DVector<f64>) -> DMatrix<f64> + Send + Sync + 'static,
    ) -> Self {
        FnPhysics { n_x, eval: Arc::new(eval), jac: Arc::new(jac) }
    }
}

impl fmt::Debug for FnPhysics {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("FnPhysics").field("n_x", &self.n_x).finish()
    }
}

impl Physics for FnPhysics {
    fn n_x(&self) -> usize {
        self.n_x
    }

    fn eval(&self, t: f64, x: &DVector<f64>) -> DVector<f64> {
        (self.eval)(t, x)
    }

    fn jacobian(&self, t: f64, x: &DVector<f64>) -> DMatrix<f64> {
        (self.jac)(t, x)
    }
}

/// Known time-varying network inputs `u(t)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum ExogenousSignal {
    /// `u(t) = [amplitude * sin(omega t)]`.
    Sine { amplitude: f64, omega: f64 },
    /// Piecewise-linear interpolation between samples, held constant outside.
    Samples { times: Vec<f64>, values: Vec<Vec<f64>> },
}

impl ExogenousSignal {
    pub fn n_u(&self) -> usize {
        match self {
            ExogenousSignal::Sine { .. } => 1,
            ExogenousSignal::Samples { values, .. } => values.first().map_or(0, Vec::len),
        }
    }

    pub fn eval(&self, t: f64) -> DVector<f64> {
        match self {
            ExogenousSignal::Sine { amplitude, omega } => DVector::from_element(1, amplitude * (omega * t).sin()),
            ExogenousSignal::Samples { times, values } => {
                let n = times.len();
                if n == 0 {
                    return DVector::zeros(0);
                }
                if t <= times[0] {
                    return DVector::from_vec(values[0].clone());
                }
                if t >= times[n - 1] {
                    return DVector::from_vec(values[n - 1].clone());
                }
                let k = times.partition_point(|&s| s <= t) - 1;
                let w = (t - times[k]) / (times[k + 1] - times[k]);
                DVector::from_iterator(values[k].len(), values[k].iter().zip(&values[k + 1]).map(|(a, b)| a + w * (b - a)))
            }
        }
    }
}
