//! Dynamics `f(t, x, a) = f_phys(t, x) + f_net(x, u(t), a)` and measurement maps.

mod measurement;
mod network;
mod physics;

use std::sync::Arc;

use nalgebra::{DMatrix, DVector};

pub use measurement::{MeasurementMap, Selection};
pub use network::{elu, elu_derivative, monomial_exponents, Architecture, ErrorNetwork, NetworkDocument, ParamRole};
pub use physics::{ExogenousSignal, FnPhysics, Physics, PhysicsSpec};

use crate::error::{Error, Result};

/// Value and Jacobians of the right-hand side at one point.
#[derive(Clone, Debug)]
pub struct Linearization {
    pub f: DVector<f64>,
    pub f_x: DMatrix<f64>,
    pub f_a: DMatrix<f64>,
}

/// Right-hand side as seen by the solvers. Implementations must be pure so
/// that grid intervals can be evaluated concurrently.
pub trait Dynamics: Send + Sync {
    fn n_x(&self) -> usize;
    fn n_a(&self) -> usize;
    fn rhs(&self, t: f64, x: &DVector<f64>, a: &DVector<f64>) -> DVector<f64>;
    fn linearize(&self, t: f64, x: &DVector<f64>, a: &DVector<f64>) -> Linearization;
}

/// First-principle model plus an optional error network.
#[derive(Clone)]
pub struct SystemModel {
    physics: Arc<dyn Physics>,
    physics_spec: Option<PhysicsSpec>,
    network: Option<ErrorNetwork>,
    exogenous: Option<ExogenousSignal>,
}

impl std::fmt::Debug for SystemModel {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("SystemModel")
            .field("n_x", &self.n_x())
            .field("physics", &self.physics_spec)
            .field("network", &self.network)
            .field("exogenous", &self.exogenous)
            .finish()
    }
}

impl SystemModel {
    pub fn from_spec(spec: PhysicsSpec) -> Self {
        SystemModel { physics: Arc::new(spec.clone()), physics_spec: Some(spec), network: None, exogenous: None }
    }

    pub fn from_physics(physics: Arc<dyn Physics>) -> Self {
        SystemModel { physics, physics_spec: None, network: None, exogenous: None }
    }

    pub fn with_exogenous(mut self, u: ExogenousSignal) -> Result<Self> {
        self.exogenous = Some(u);
        if let Some(net) = &self.network {
            self.check_network(net)?;
        }
        Ok(self)
    }

    pub fn with_network(mut self, net: ErrorNetwork) -> Result<Self> {
        self.check_network(&net)?;
        self.network = Some(net);
        Ok(self)
    }

    fn check_network(&self, net: &ErrorNetwork) -> Result<()> {
        let n_u = self.n_u();
        if net.n_in() != self.n_x() + n_u || net.n_out() != self.n_x() {
            return Err(Error::Dimension(format!("network maps {} -> {}, model needs {} -> {}", net.n_in(), net.n_out(), self.n_x() + n_u, self.n_x())));
        }
        Ok(())
    }

    pub fn n_u(&self) -> usize {
        self.exogenous.as_ref().map_or(0, ExogenousSignal::n_u)
    }

    pub fn physics_spec(&self) -> Option<&PhysicsSpec> {
        self.physics_spec.as_ref()
    }

    pub fn network(&self) -> Option<&ErrorNetwork> {
        self.network.as_ref()
    }

    pub fn network_mut(&mut self) -> Option<&mut ErrorNetwork> {
        self.network.as_mut()
    }

    pub fn exogenous(&self) -> Option<&ExogenousSignal> {
        self.exogenous.as_ref()
    }

    fn net_input(&self, t: f64, x: &DVector<f64>) -> Vec<f64> {
        let mut input: Vec<f64> = x.iter().copied().collect();
        if let Some(u) = &self.exogenous {
            input.extend(u.eval(t).iter());
        }
        input
    }

    fn check(&self, x: &DVector<f64>, a: &DVector<f64>) -> Result<()> {
        if x.len() != self.n_x() {
            return Err(Error::Dimension(format!("state has {} components, model has {}", x.len(), self.n_x())));
        }
        if a.len() != self.n_a() {
            return Err(Error::Dimension(format!("parameter vector has {} entries, model has {}", a.len(), self.n_a())));
        }
        Ok(())
    }

    pub fn eval_f(&self, t: f64, x: &DVector<f64>, a: &DVector<f64>) -> Result<DVector<f64>> {
        self.check(x, a)?;
        Ok(self.rhs(t, x, a))
    }

    pub fn jac_f_x(&self, t: f64, x: &DVector<f64>, a: &DVector<f64>) -> Result<DMatrix<f64>> {
        self.check(x, a)?;
        Ok(self.linearize(t, x, a).f_x)
    }

    pub fn jac_f_a(&self, t: f64, x: &DVector<f64>, a: &DVector<f64>) -> Result<DMatrix<f64>> {
        self.check(x, a)?;
        Ok(self.linearize(t, x, a).f_a)
    }

    /// Current network parameters, or an empty vector.
    pub fn params(&self) -> DVector<f64> {
        self.network.as_ref().map_or_else(|| DVector::zeros(0), |n| n.params.clone())
    }
}

impl Dynamics for SystemModel {
    fn n_x(&self) -> usize {
        self.physics.n_x()
    }

    fn n_a(&self) -> usize {
        self.network.as_ref().map_or(0, ErrorNetwork::n_a)
    }

    fn rhs(&self, t: f64, x: &DVector<f64>, a: &DVector<f64>) -> DVector<f64> {
        let mut f = self.physics.eval(t, x);
        if let Some(net) = &self.network {
            f += net.forward(&self.net_input(t, x), a.as_slice());
        }
        f
    }

    fn linearize(&self, t: f64, x: &DVector<f64>, a: &DVector<f64>) -> Linearization {
        let n_x = self.n_x();
        let mut f = self.physics.eval(t, x);
        let mut f_x = self.physics.jacobian(t, x);
        let f_a = match &self.network {
            Some(net) => {
                let (out, d_in, d_a) = net.forward_with_jacobians(&self.net_input(t, x), a.as_slice());
                f += out;
                f_x += d_in.columns(0, n_x);
                d_a
            }
            None => DMatrix::zeros(n_x, 0),
        };
        Linearization { f, f_x, f_a }
    }
}

/// Wraps a model with fixed parameter values; the solvers then see `n_a = 0`.
pub struct FrozenParams<'a> {
    inner: &'a dyn Dynamics,
    params: DVector<f64>,
    empty: DVector<f64>,
}

impl<'a> FrozenParams<'a> {
    pub fn new(inner: &'a dyn Dynamics, params: DVector<f64>) -> Result<Self> {
        if params.len() != inner.n_a() {
            return Err(Error::Dimension("frozen parameter vector".into()));
        }
        Ok(FrozenParams { inner, params, empty: DVector::zeros(0) })
    }
}

impl Dynamics for FrozenParams<'_> {
    fn n_x(&self) -> usize {
        self.inner.n_x()
    }

    fn n_a(&self) -> usize {
        0
    }

    fn rhs(&self, t: f64, x: &DVector<f64>, _a: &DVector<f64>) -> DVector<f64> {
        self.inner.rhs(t, x, &self.params)
    }

    fn linearize(&self, t: f64, x: &DVector<f64>, _a: &DVector<f64>) -> Linearization {
        let lin = self.inner.linearize(t, x, &self.params);
        Linearization { f: lin.f, f_x: lin.f_x, f_a: DMatrix::zeros(self.n_x(), self.empty.len()) }
    }
}
