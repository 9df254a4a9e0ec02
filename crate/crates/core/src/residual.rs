//! Residual `g(b)` of the discretized identification problem and its block Jacobian.
//!
//! For interval `j` (grid points `j`, `j + 1`, states `x`, `z`) the block stacks
//!
//! * the midpoint defect `S_x^{-1} ((z - x)/dt - f(t_mid, (x + z)/2, a)) sqrt(dt)`,
//! * `sqrt(mu_x / 2) sqrt(dt) x` and `sqrt(mu_x / 2) sqrt(dt) z` (omitted when `mu_x = 0`),
//! * `S_y^{-1} (y - h(x))` when point `j` carries a measurement.
//!
//! The last grid point contributes its measurement rows only, and the parameters
//! contribute `sqrt(mu_a) a`.

use std::sync::Arc;

use nalgebra::{Cholesky, DMatrix, DVector};

use crate::data::MeasurementSet;
use crate::error::{Error, Result};
use crate::exec::Executor;
use crate::grid::Grid;
use crate::model::{Dynamics, MeasurementMap};

type WxFn = dyn Fn(f64) -> DMatrix<f64> + Send + Sync;

/// Weighting of model and measurement errors plus the regularization constants.
#[derive(Clone)]
pub struct Weights {
    n_x: usize,
    sx_inv: DMatrix<f64>,
    wx_fn: Option<Arc<WxFn>>,
    /// Measurement weighting over all channels; each record uses the sub-block of
    /// the channels it observes.
    wy: DMatrix<f64>,
    pub mu_x: f64,
    pub mu_a: f64,
}

impl std::fmt::Debug for Weights {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Weights")
            .field("sx_inv", &self.sx_inv)
            .field("time_varying_wx", &self.wx_fn.is_some())
            .field("wy", &self.wy)
            .field("mu_x", &self.mu_x)
            .field("mu_a", &self.mu_a)
            .finish()
    }
}

/// Inverse of the lower Cholesky factor `S` of `W = S S^T`.
pub fn inverse_factor(w: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    if !w.is_square() {
        return Err(Error::Config("weighting matrix must be square".into()));
    }
    let chol = Cholesky::new(w.clone()).ok_or_else(|| Error::Config("weighting matrix is not positive definite".into()))?;
    let l = chol.l();
    let mut inv = DMatrix::identity(l.nrows(), l.nrows());
    if !l.solve_lower_triangular_mut(&mut inv) {
        return Err(Error::Config("singular weighting factor".into()));
    }
    Ok(inv)
}

impl Weights {
    pub fn new(wx: DMatrix<f64>, wy: DMatrix<f64>, mu_x: f64, mu_a: f64) -> Result<Self> {
        if !(mu_x >= 0.0) || !(mu_a >= 0.0) {
            return Err(Error::Config("regularization constants must be >= 0".into()));
        }
        let sx_inv = inverse_factor(&wx)?;
        inverse_factor(&wy)?;
        Ok(Weights { n_x: wx.nrows(), sx_inv, wx_fn: None, wy, mu_x, mu_a })
    }

    /// `W_x = wx I`, `W_y = wy I`.
    pub fn isotropic(n_x: usize, n_channels: usize, wx: f64, wy: f64, mu_x: f64, mu_a: f64) -> Result<Self> {
        Self::new(DMatrix::identity(n_x, n_x) * wx, DMatrix::identity(n_channels, n_channels) * wy, mu_x, mu_a)
    }

    /// Replaces the constant `W_x` with a time-dependent one, factorized at each use.
    pub fn with_time_varying_wx(mut self, wx: impl Fn(f64) -> DMatrix<f64> + Send + Sync + 'static) -> Self {
        self.wx_fn = Some(Arc::new(wx));
        self
    }

    pub fn n_x(&self) -> usize {
        self.n_x
    }

    fn sx_inv_at(&self, t: f64) -> Result<std::borrow::Cow<'_, DMatrix<f64>>> {
        match &self.wx_fn {
            Some(f) => Ok(std::borrow::Cow::Owned(inverse_factor(&f(t))?)),
            None => Ok(std::borrow::Cow::Borrowed(&self.sx_inv)),
        }
    }

    fn sy_inv_for(&self, channels: &[usize]) -> Result<DMatrix<f64>> {
        if let Some(&c) = channels.iter().find(|&&c| c >= self.wy.nrows()) {
            return Err(Error::Config(format!("no measurement weight for channel {c}")));
        }
        let sub = DMatrix::from_fn(channels.len(), channels.len(), |r, c| self.wy[(channels[r], channels[c])]);
        inverse_factor(&sub)
    }
}

/// States on the grid followed by the parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct DecisionVector {
    pub states: Vec<DVector<f64>>,
    pub params: DVector<f64>,
}

impl DecisionVector {
    pub fn n_x(&self) -> usize {
        self.states.first().map_or(0, |s| s.len())
    }

    pub fn n_a(&self) -> usize {
        self.params.len()
    }

    pub fn len(&self) -> usize {
        self.n_x() * self.states.len() + self.n_a()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn zeros(n_x: usize, n_d: usize, n_a: usize) -> Self {
        DecisionVector { states: vec![DVector::zeros(n_x); n_d], params: DVector::zeros(n_a) }
    }

    /// States from piecewise-linear interpolation of each measured channel over the
    /// times where it is observed (held constant outside), zero for channels never
    /// measured. Assumes the measurement map selects state components.
    pub fn interpolated(grid: &Grid, data: &MeasurementSet, n_x: usize, params: DVector<f64>) -> Self {
        let mut series: Vec<Vec<(f64, f64)>> = vec![Vec::new(); n_x];
        for m in data.records() {
            for (&c, &v) in m.channels.iter().zip(&m.values) {
                if c < n_x {
                    series[c].push((m.time, v));
                }
            }
        }
        let states = grid
            .times()
            .iter()
            .map(|&t| {
                DVector::from_fn(n_x, |c, _| {
                    let s = &series[c];
                    match s.iter().position(|&(tm, _)| tm >= t) {
                        None => s.last().map_or(0.0, |p| p.1),
                        Some(0) => s[0].1,
                        Some(k) => {
                            let (t0, v0) = s[k - 1];
                            let (t1, v1) = s[k];
                            v0 + (v1 - v0) * (t - t0) / (t1 - t0)
                        }
                    }
                })
            })
            .collect();
        DecisionVector { states, params }
    }

    pub fn to_flat(&self) -> DVector<f64> {
        let mut v = Vec::with_capacity(self.len());
        for s in &self.states {
            v.extend(s.iter());
        }
        v.extend(self.params.iter());
        DVector::from_vec(v)
    }

    pub fn from_flat(n_x: usize, n_d: usize, flat: &DVector<f64>) -> Result<Self> {
        if flat.len() < n_x * n_d {
            return Err(Error::Dimension("flat decision vector too short".into()));
        }
        let states = (0..n_d).map(|j| DVector::from_column_slice(&flat.as_slice()[j * n_x..(j + 1) * n_x])).collect();
        let params = DVector::from_column_slice(&flat.as_slice()[n_x * n_d..]);
        Ok(DecisionVector { states, params })
    }

    /// `self + step`.
    pub fn add(&self, step: &DecisionVector) -> DecisionVector {
        DecisionVector { states: self.states.iter().zip(&step.states).map(|(a, b)| a + b).collect(), params: &self.params + &step.params }
    }

    pub fn norm(&self) -> f64 {
        (self.states.iter().map(|s| s.norm_squared()).sum::<f64>() + self.params.norm_squared()).sqrt()
    }

    pub fn is_finite(&self) -> bool {
        self.states.iter().all(|s| s.iter().all(|v| v.is_finite())) && self.params.iter().all(|v| v.is_finite())
    }
}

/// Residual rows of one grid interval and their Jacobians with respect to the
/// left state `x`, the right state `z` and the parameters.
#[derive(Clone, Debug)]
pub struct IntervalBlock {
    pub residual: DVector<f64>,
    pub d_x: DMatrix<f64>,
    pub d_z: DMatrix<f64>,
    pub d_a: DMatrix<f64>,
}

#[derive(Clone, Debug)]
pub struct TerminalBlock {
    pub residual: DVector<f64>,
    pub d_x: DMatrix<f64>,
}

/// `g(b)` split into its per-interval blocks.
#[derive(Clone, Debug)]
pub struct ResidualBlocks {
    pub n_x: usize,
    pub n_a: usize,
    pub intervals: Vec<IntervalBlock>,
    pub terminal: TerminalBlock,
    /// `sqrt(mu_a) a`; its Jacobian is `sqrt(mu_a) I`.
    pub params_residual: DVector<f64>,
    pub sqrt_mu_a: f64,
}

impl ResidualBlocks {
    pub fn n_points(&self) -> usize {
        self.intervals.len() + 1
    }

    pub fn n_b(&self) -> usize {
        self.n_x * self.n_points() + self.n_a
    }

    pub fn cost(&self) -> f64 {
        self.intervals.iter().map(|b| b.residual.norm_squared()).sum::<f64>() + self.terminal.residual.norm_squared() + self.params_residual.norm_squared()
    }

    /// `2 (dg/db)^T g`, accumulated block by block.
    pub fn gradient(&self) -> DecisionVector {
        let mut grad = DecisionVector::zeros(self.n_x, self.n_points(), self.n_a);
        for (j, b) in self.intervals.iter().enumerate() {
            grad.states[j] += b.d_x.tr_mul(&b.residual) * 2.0;
            grad.states[j + 1] += b.d_z.tr_mul(&b.residual) * 2.0;
            if self.n_a > 0 {
                grad.params += b.d_a.tr_mul(&b.residual) * 2.0;
            }
        }
        let last = self.n_points() - 1;
        grad.states[last] += self.terminal.d_x.tr_mul(&self.terminal.residual) * 2.0;
        grad.params += &self.params_residual * (2.0 * self.sqrt_mu_a);
        grad
    }

    /// Stacked `g` and dense `dg/db`. Only meant for small problems and checks.
    pub fn dense(&self) -> (DMatrix<f64>, DVector<f64>) {
        let rows: usize = self.intervals.iter().map(|b| b.residual.len()).sum::<usize>() + self.terminal.residual.len() + self.params_residual.len();
        let n_b = self.n_b();
        let n_x = self.n_x;
        let pcol = n_x * self.n_points();
        let mut jac = DMatrix::zeros(rows, n_b);
        let mut g = DVector::zeros(rows);
        let mut r0 = 0;
        for (j, b) in self.intervals.iter().enumerate() {
            let m = b.residual.len();
            g.rows_mut(r0, m).copy_from(&b.residual);
            jac.view_mut((r0, j * n_x), (m, n_x)).copy_from(&b.d_x);
            jac.view_mut((r0, (j + 1) * n_x), (m, n_x)).copy_from(&b.d_z);
            jac.view_mut((r0, pcol), (m, self.n_a)).copy_from(&b.d_a);
            r0 += m;
        }
        let m = self.terminal.residual.len();
        g.rows_mut(r0, m).copy_from(&self.terminal.residual);
        jac.view_mut((r0, (self.n_points() - 1) * n_x), (m, n_x)).copy_from(&self.terminal.d_x);
        r0 += m;
        for i in 0..self.params_residual.len() {
            g[r0 + i] = self.params_residual[i];
            jac[(r0 + i, pcol + i)] = self.sqrt_mu_a;
        }
        (jac, g)
    }
}

/// Everything needed to evaluate `g(b)`.
pub struct Problem<'a> {
    pub model: &'a dyn Dynamics,
    pub grid: &'a Grid,
    pub data: &'a MeasurementSet,
    pub obs: &'a dyn MeasurementMap,
    pub weights: &'a Weights,
    sy_inv: Vec<DMatrix<f64>>,
}

impl<'a> Problem<'a> {
    pub fn new(model: &'a dyn Dynamics, grid: &'a Grid, data: &'a MeasurementSet, obs: &'a dyn MeasurementMap, weights: &'a Weights) -> Result<Self> {
        let idx = grid.measurement_indices();
        if idx.len() != data.len() {
            return Err(Error::Dimension(format!("grid has {} measurement points, data has {} records", idx.len(), data.len())));
        }
        for (i, (m, &j)) in data.records().iter().zip(idx).enumerate() {
            let span = (grid.time(grid.len() - 1) - grid.time(0)).abs().max(1.0);
            if (grid.time(j) - m.time).abs() > 1e-12 * span {
                return Err(Error::InvalidInput(format!("measurement {i} at t = {} does not match grid point t = {}", m.time, grid.time(j))));
            }
            if obs.n_y(i) != m.values.len() {
                return Err(Error::Dimension(format!("measurement {i} has {} values, h predicts {}", m.values.len(), obs.n_y(i))));
            }
        }
        if weights.n_x() != model.n_x() {
            return Err(Error::Dimension("W_x does not match the state dimension".into()));
        }
        let sy_inv = data.records().iter().map(|m| weights.sy_inv_for(&m.channels)).collect::<Result<Vec<_>>>()?;
        Ok(Problem { model, grid, data, obs, weights, sy_inv })
    }

    pub fn n_x(&self) -> usize {
        self.model.n_x()
    }

    pub fn n_a(&self) -> usize {
        self.model.n_a()
    }

    pub fn n_points(&self) -> usize {
        self.grid.len()
    }

    pub fn check(&self, b: &DecisionVector) -> Result<()> {
        if b.states.len() != self.n_points() || b.states.iter().any(|s| s.len() != self.n_x()) || b.params.len() != self.n_a() {
            return Err(Error::Dimension("decision vector does not match the problem".into()));
        }
        Ok(())
    }

    fn measurement_rows(&self, i: usize, x: &DVector<f64>, with_jac: bool) -> (DVector<f64>, Option<DMatrix<f64>>) {
        let rec = &self.data.records()[i];
        let y = rec.values();
        let pred = self.obs.predict(i, rec.time, x);
        let r = &self.sy_inv[i] * (y - pred);
        let jac = with_jac.then(|| -(&self.sy_inv[i] * self.obs.jacobian(i, rec.time, x)));
        (r, jac)
    }

    fn interval(&self, j: usize, b: &DecisionVector, with_jac: bool) -> Result<IntervalBlock> {
        let n_x = self.n_x();
        let n_a = self.n_a();
        let dt = self.grid.step(j);
        let sq = dt.sqrt();
        let tm = self.grid.midpoint(j);
        let x = &b.states[j];
        let z = &b.states[j + 1];
        let mid = (x + z) * 0.5;
        let sx_inv = self.weights.sx_inv_at(tm)?;
        let meas = self.grid.measurement_at(j);
        let reg = self.weights.mu_x > 0.0;
        let n_y = meas.map_or(0, |i| self.obs.n_y(i));
        let rows = n_x + if reg { 2 * n_x } else { 0 } + n_y;
        let mut residual = DVector::zeros(rows);
        let mut d_x = DMatrix::zeros(rows, n_x);
        let mut d_z = DMatrix::zeros(rows, n_x);
        let mut d_a = DMatrix::zeros(rows, n_a);

        let (f, f_x, f_a) = if with_jac {
            let lin = self.model.linearize(tm, &mid, &b.params);
            (lin.f, Some(lin.f_x), Some(lin.f_a))
        } else {
            (self.model.rhs(tm, &mid, &b.params), None, None)
        };
        let defect = (z - x) / dt - f;
        residual.rows_mut(0, n_x).copy_from(&(&*sx_inv * defect * sq));
        if let (Some(f_x), Some(f_a)) = (f_x, f_a) {
            let ident = DMatrix::<f64>::identity(n_x, n_x) / dt;
            let half = &f_x * 0.5;
            d_x.rows_mut(0, n_x).copy_from(&(&*sx_inv * (-&ident - &half) * sq));
            d_z.rows_mut(0, n_x).copy_from(&(&*sx_inv * (&ident - &half) * sq));
            if n_a > 0 {
                d_a.rows_mut(0, n_x).copy_from(&(&*sx_inv * f_a * (-sq)));
            }
        }
        let mut r0 = n_x;
        if reg {
            let c = (self.weights.mu_x / 2.0).sqrt() * sq;
            residual.rows_mut(r0, n_x).copy_from(&(x * c));
            residual.rows_mut(r0 + n_x, n_x).copy_from(&(z * c));
            for k in 0..n_x {
                d_x[(r0 + k, k)] = c;
                d_z[(r0 + n_x + k, k)] = c;
            }
            r0 += 2 * n_x;
        }
        if let Some(i) = meas {
            let (r, jac) = self.measurement_rows(i, x, with_jac);
            residual.rows_mut(r0, n_y).copy_from(&r);
            if let Some(jac) = jac {
                d_x.view_mut((r0, 0), (n_y, n_x)).copy_from(&jac);
            }
        }
        Ok(IntervalBlock { residual, d_x, d_z, d_a })
    }

    fn terminal(&self, b: &DecisionVector, with_jac: bool) -> TerminalBlock {
        let last = self.n_points() - 1;
        let x = &b.states[last];
        match self.grid.measurement_at(last) {
            Some(i) => {
                let (residual, jac) = self.measurement_rows(i, x, with_jac);
                let d_x = jac.unwrap_or_else(|| DMatrix::zeros(residual.len(), self.n_x()));
                TerminalBlock { residual, d_x }
            }
            None => TerminalBlock { residual: DVector::zeros(0), d_x: DMatrix::zeros(0, self.n_x()) },
        }
    }

    fn blocks(&self, b: &DecisionVector, exec: &Executor, with_jac: bool) -> Result<ResidualBlocks> {
        self.check(b)?;
        let intervals = exec.map(self.grid.n_intervals(), |j| self.interval(j, b, with_jac)).into_iter().collect::<Result<Vec<_>>>()?;
        let sqrt_mu_a = self.weights.mu_a.sqrt();
        Ok(ResidualBlocks {
            n_x: self.n_x(),
            n_a: self.n_a(),
            intervals,
            terminal: self.terminal(b, with_jac),
            params_residual: &b.params * sqrt_mu_a,
            sqrt_mu_a,
        })
    }

    /// Residual blocks and Jacobians at `b`.
    pub fn assemble(&self, b: &DecisionVector, exec: &Executor) -> Result<ResidualBlocks> {
        self.blocks(b, exec, true)
    }

    /// `||g(b)||^2` without forming Jacobians.
    pub fn cost(&self, b: &DecisionVector, exec: &Executor) -> Result<f64> {
        Ok(self.blocks(b, exec, false)?.cost())
    }

    /// Cost of the measurement rows alone.
    pub fn measurement_cost(&self, b: &DecisionVector) -> f64 {
        self.grid.measurement_indices().iter().enumerate().map(|(i, &j)| self.measurement_rows(i, &b.states[j], false).0.norm_squared()).sum()
    }
}
