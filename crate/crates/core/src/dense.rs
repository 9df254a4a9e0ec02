//! Reference LM step from the damped normal equations.
//!
//! `J^T J + lambda I` is block tridiagonal in the states with a dense border for
//! the parameters. Its block Cholesky factor keeps the same shape, so the solve
//! costs `O(N_d (n_x + n_a)^2 n_x + n_a^3)` and never forms an `n_b x n_b` matrix.

use nalgebra::{Cholesky, DMatrix, DVector};

use crate::error::Result;
use crate::exec::Executor;
use crate::lm::{self, LmConfig, LmOutcome, StepSolver};
use crate::residual::{DecisionVector, Problem, ResidualBlocks};

/// `J^T J + lambda I` in block form, with right-hand side `-J^T g`.
#[derive(Clone, Debug)]
pub struct NormalEquations {
    /// State diagonal blocks.
    pub diag: Vec<DMatrix<f64>>,
    /// `upper[j]` couples state `j` (rows) with state `j + 1` (columns).
    pub upper: Vec<DMatrix<f64>>,
    /// `border[j]` couples state `j` (rows) with the parameters (columns).
    pub border: Vec<DMatrix<f64>>,
    pub params: DMatrix<f64>,
    pub rhs_states: Vec<DVector<f64>>,
    pub rhs_params: DVector<f64>,
}

impl NormalEquations {
    pub fn build(blocks: &ResidualBlocks, lambda: f64) -> Self {
        let n_x = blocks.n_x;
        let n_a = blocks.n_a;
        let n_d = blocks.n_points();
        let mut diag = vec![DMatrix::identity(n_x, n_x) * lambda; n_d];
        let mut upper = Vec::with_capacity(n_d.saturating_sub(1));
        let mut border = vec![DMatrix::zeros(n_x, n_a); n_d];
        let mut params = DMatrix::identity(n_a, n_a) * (lambda + blocks.sqrt_mu_a * blocks.sqrt_mu_a);
        let mut rhs_states = vec![DVector::zeros(n_x); n_d];
        let mut rhs_params = -(&blocks.params_residual * blocks.sqrt_mu_a);
        for (j, b) in blocks.intervals.iter().enumerate() {
            diag[j] += b.d_x.tr_mul(&b.d_x);
            diag[j + 1] += b.d_z.tr_mul(&b.d_z);
            upper.push(b.d_x.tr_mul(&b.d_z));
            rhs_states[j] -= b.d_x.tr_mul(&b.residual);
            rhs_states[j + 1] -= b.d_z.tr_mul(&b.residual);
            if n_a > 0 {
                border[j] += b.d_x.tr_mul(&b.d_a);
                border[j + 1] += b.d_z.tr_mul(&b.d_a);
                params += b.d_a.tr_mul(&b.d_a);
                rhs_params -= b.d_a.tr_mul(&b.residual);
            }
        }
        let t = &blocks.terminal;
        diag[n_d - 1] += t.d_x.tr_mul(&t.d_x);
        rhs_states[n_d - 1] -= t.d_x.tr_mul(&t.residual);
        NormalEquations { diag, upper, border, params, rhs_states, rhs_params }
    }

    /// `(J^T J + lambda I) v` for a decision-vector shaped `v`.
    pub fn apply(&self, v: &DecisionVector) -> DecisionVector {
        let n_d = self.diag.len();
        let mut out = DecisionVector { states: (0..n_d).map(|j| &self.diag[j] * &v.states[j]).collect(), params: &self.params * &v.params };
        for j in 0..n_d {
            if j + 1 < n_d {
                out.states[j] += &self.upper[j] * &v.states[j + 1];
                out.states[j + 1] += self.upper[j].tr_mul(&v.states[j]);
            }
            out.states[j] += &self.border[j] * &v.params;
            out.params += self.border[j].tr_mul(&v.states[j]);
        }
        out
    }

    pub fn rhs(&self) -> DecisionVector {
        DecisionVector { states: self.rhs_states.clone(), params: self.rhs_params.clone() }
    }

    /// Block Cholesky solve. `None` when a pivot block is not positive definite.
    pub fn solve(&self) -> Option<DecisionVector> {
        let n_d = self.diag.len();
        let mut l_diag: Vec<DMatrix<f64>> = Vec::with_capacity(n_d);
        // l_sub[j] is the factor block below l_diag[j], i.e. rows of state j + 1.
        let mut l_sub: Vec<DMatrix<f64>> = Vec::with_capacity(n_d);
        let mut l_border: Vec<DMatrix<f64>> = Vec::with_capacity(n_d);
        let mut y_states: Vec<DVector<f64>> = Vec::with_capacity(n_d);
        let mut schur = self.params.clone();
        let mut y_params = self.rhs_params.clone();
        for j in 0..n_d {
            let mut d = self.diag[j].clone();
            let mut a_border = self.border[j].transpose();
            let mut r = self.rhs_states[j].clone();
            if j > 0 {
                let prev = &l_sub[j - 1];
                d -= prev * prev.transpose();
                a_border -= &l_border[j - 1] * prev.transpose();
                r -= prev * &y_states[j - 1];
            }
            let l = Cholesky::new(d)?.l();
            // X L^T = B  <=>  L X^T = B^T
            let solve_right = |b: &DMatrix<f64>| -> Option<DMatrix<f64>> { Some(l.solve_lower_triangular(&b.transpose())?.transpose()) };
            let lb = solve_right(&a_border)?;
            let y = l.solve_lower_triangular(&r)?;
            schur -= &lb * lb.transpose();
            y_params -= &lb * &y;
            if j + 1 < n_d {
                l_sub.push(solve_right(&self.upper[j].transpose())?);
            }
            l_border.push(lb);
            y_states.push(y);
            l_diag.push(l);
        }
        let l_p = Cholesky::new(schur)?.l();
        let y_p = l_p.solve_lower_triangular(&y_params)?;
        let x_p = l_p.tr_solve_lower_triangular(&y_p)?;
        let mut x_states = vec![DVector::zeros(0); n_d];
        for j in (0..n_d).rev() {
            let mut r = &y_states[j] - l_border[j].tr_mul(&x_p);
            if j + 1 < n_d {
                r -= l_sub[j].tr_mul(&x_states[j + 1]);
            }
            x_states[j] = l_diag[j].tr_solve_lower_triangular(&r)?;
        }
        Some(DecisionVector { states: x_states, params: x_p })
    }
}

/// `gamma = -(J^T J + lambda I)^{-1} J^T g`.
pub fn lm_step_dense(blocks: &ResidualBlocks, lambda: f64) -> Option<DecisionVector> {
    NormalEquations::build(blocks, lambda).solve()
}

/// Step solver backed by [`lm_step_dense`].
#[derive(Clone, Copy, Debug, Default)]
pub struct DenseSolver;

impl StepSolver for DenseSolver {
    fn step(&self, blocks: &ResidualBlocks, lambda: f64) -> Result<Option<DecisionVector>> {
        Ok(lm_step_dense(blocks, lambda))
    }
}

/// Levenberg-Marquardt with the reference step, single threaded.
pub fn solve_dense(problem: &Problem, b0: &DecisionVector, config: &LmConfig) -> Result<LmOutcome> {
    lm::run(problem, b0, config, &DenseSolver, &Executor::sequential())
}
