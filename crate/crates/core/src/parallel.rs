//! Batch-parallel solution of the damped LM subproblem.
//!
//! The damped cost splits into the summands `q_0 = 0, q_1, ..., q_{N_d}` (one per
//! grid interval plus a terminal one) and `r` for the parameters. Summands are
//! grouped into `N_s` contiguous batches. Each batch eliminates its interior
//! state updates independently, leaving a quadratic in its boundary state update
//! and `delta`. The batch quadratics are then chained, `delta` is found from the
//! last one, and all state updates are recovered through the stored policies.
//!
//! Summand indices below are 1-based as in the partition; summand `j < N_d` is
//! grid interval `j - 1` and couples grid points `j - 1` and `j` (0-based).

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::exec::Executor;
use crate::lm::{self, LmConfig, LmOutcome, StepSolver};
use crate::qr::{Assignment, LinearPolicy, QuadraticBlock, Var};
use crate::residual::{DecisionVector, Problem, ResidualBlocks};

/// Upper bound on the default batch count.
pub const DEFAULT_MAX_BATCHES: usize = 16;

/// Batch boundaries `zeta` with `zeta[0] = 0` and `zeta[N_s] = N_d + 1`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Partition {
    zeta: Vec<usize>,
}

impl Partition {
    pub fn zeta(&self) -> &[usize] {
        &self.zeta
    }

    pub fn n_batches(&self) -> usize {
        self.zeta.len() - 1
    }

    pub fn n_points(&self) -> usize {
        self.zeta[self.zeta.len() - 1] - 1
    }

    /// Summand indices of batch `s` (0-based batch index).
    pub fn summands(&self, s: usize) -> std::ops::Range<usize> {
        self.zeta[s]..self.zeta[s + 1]
    }

    pub fn sizes(&self) -> Vec<usize> {
        self.zeta.windows(2).map(|w| w[1] - w[0]).collect()
    }
}

/// Splits the `n_d + 1` summands into `n_s` contiguous batches whose sizes differ
/// by at most one, larger batches first.
pub fn make_partition(n_d: usize, n_s: usize) -> Result<Partition> {
    if n_s == 0 || n_s > n_d {
        return Err(Error::Config(format!("batch count {n_s} must be between 1 and the number of grid points {n_d}")));
    }
    let total = n_d + 1;
    let base = total / n_s;
    let extra = total % n_s;
    let mut zeta = Vec::with_capacity(n_s + 1);
    zeta.push(0);
    for s in 0..n_s {
        let size = base + usize::from(s < extra);
        zeta.push(zeta[s] + size);
    }
    Ok(Partition { zeta })
}

/// Default batch count: `DEFAULT_MAX_BATCHES`, capped so batches hold about four
/// summands. It does not depend on the worker count, so results do not either.
pub fn default_batches(n_d: usize) -> usize {
    DEFAULT_MAX_BATCHES.min(n_d.div_ceil(4)).max(1)
}

/// Summand `q_j` (1-based `j >= 1`) with damping `lambda ||beta_{j}||^2` on its left state.
pub fn build_q(blocks: &ResidualBlocks, lambda: f64, j: usize) -> Result<QuadraticBlock> {
    let n_d = blocks.n_points();
    if j == 0 || j > n_d {
        return Err(Error::InvalidInput(format!("summand index {j} out of range 1..={n_d}")));
    }
    let n_x = blocks.n_x;
    let n_a = blocks.n_a;
    let left = j - 1;
    let sl = lambda.sqrt();
    if j < n_d {
        let b = &blocks.intervals[left];
        let m = b.residual.len();
        let n = 2 * n_x + n_a;
        let mut q = DMatrix::zeros(m + n_x, n + 1);
        q.view_mut((0, 0), (m, n_x)).copy_from(&b.d_x);
        q.view_mut((0, n_x), (m, n_x)).copy_from(&b.d_z);
        if n_a > 0 {
            q.view_mut((0, 2 * n_x), (m, n_a)).copy_from(&b.d_a);
        }
        q.view_mut((0, n), (m, 1)).copy_from(&b.residual);
        for i in 0..n_x {
            q[(m + i, i)] = sl;
        }
        let mut vars = vec![(Var::State(left), n_x), (Var::State(left + 1), n_x)];
        if n_a > 0 {
            vars.push((Var::Params, n_a));
        }
        Ok(QuadraticBlock::from_sorted(vars, q))
    } else {
        let t = &blocks.terminal;
        let m = t.residual.len();
        let mut q = DMatrix::zeros(m + n_x, n_x + 1);
        q.view_mut((0, 0), (m, n_x)).copy_from(&t.d_x);
        q.view_mut((0, n_x), (m, 1)).copy_from(&t.residual);
        for i in 0..n_x {
            q[(m + i, i)] = sl;
        }
        Ok(QuadraticBlock::from_sorted(vec![(Var::State(left), n_x)], q))
    }
}

/// `||p_a + sqrt(mu_a) delta||^2 + lambda ||delta||^2`.
pub fn build_r(blocks: &ResidualBlocks, lambda: f64) -> Result<QuadraticBlock> {
    let n_a = blocks.n_a;
    if n_a == 0 {
        return QuadraticBlock::zero(vec![]);
    }
    let mut m = DMatrix::zeros(2 * n_a, n_a);
    let mut c = DVector::zeros(2 * n_a);
    for i in 0..n_a {
        m[(i, i)] = blocks.sqrt_mu_a;
        m[(n_a + i, i)] = lambda.sqrt();
        c[i] = blocks.params_residual[i];
    }
    QuadraticBlock::from_terms(2 * n_a, vec![(Var::Params, m)], c)
}

/// Reduced quadratic of one batch and the policies of its interior state updates,
/// in elimination order.
#[derive(Clone, Debug)]
pub struct BatchResult {
    pub w: QuadraticBlock,
    pub policies: Vec<LinearPolicy>,
}

/// Adds the summands of batch `s` one at a time, eliminating each interior state
/// update as soon as every summand containing it has been added.
pub fn batch_forward(blocks: &ResidualBlocks, lambda: f64, partition: &Partition, s: usize) -> Result<BatchResult> {
    let range = partition.summands(s);
    let first = range.start;
    let mut acc = if first == 0 { QuadraticBlock::zero(vec![])? } else { build_q(blocks, lambda, first)? };
    let mut policies = Vec::with_capacity(range.len().saturating_sub(1));
    for j in first + 1..range.end {
        let q = build_q(blocks, lambda, j)?;
        let (policy, reduced) = QuadraticBlock::stack_eliminate(&[&acc, &q], Var::State(j - 1))?;
        policies.push(policy);
        acc = reduced;
    }
    Ok(BatchResult { w: acc, policies })
}

/// Everything needed to map a parameter update to the optimal state updates.
#[derive(Clone, Debug)]
pub struct Reduction {
    pub partition: Partition,
    pub batches: Vec<BatchResult>,
    /// Policies of the batch-boundary state updates, for batches `1..N_s`.
    pub chain: Vec<LinearPolicy>,
    /// `r + G`: the damped cost minimized over all state updates, as a function of `delta`.
    pub q_delta: QuadraticBlock,
    n_x: usize,
    n_a: usize,
}

/// Runs all batch eliminations (in parallel over batches) and the sequential chain.
pub fn reduce(blocks: &ResidualBlocks, lambda: f64, partition: &Partition, exec: &Executor) -> Result<Reduction> {
    if partition.n_points() != blocks.n_points() {
        return Err(Error::Dimension("partition does not match the grid".into()));
    }
    let batches = exec.map(partition.n_batches(), |s| batch_forward(blocks, lambda, partition, s)).into_iter().collect::<Result<Vec<_>>>()?;
    let (chain, g) = chain(&batches, partition)?;
    let r = build_r(blocks, lambda)?;
    let q_delta = QuadraticBlock::stack(&[&r, &g])?;
    Ok(Reduction { partition: partition.clone(), batches, chain, q_delta, n_x: blocks.n_x, n_a: blocks.n_a })
}

/// Eliminates the boundary state updates in ascending batch order.
fn chain(batches: &[BatchResult], partition: &Partition) -> Result<(Vec<LinearPolicy>, QuadraticBlock)> {
    let mut g = batches[0].w.clone();
    let mut policies = Vec::with_capacity(batches.len() - 1);
    for (s, batch) in batches.iter().enumerate().skip(1) {
        let stacked = QuadraticBlock::stack(&[&g, &batch.w])?;
        let boundary = partition.zeta()[s] - 1;
        let (policy, reduced) = stacked.eliminate(Var::State(boundary))?;
        policies.push(policy);
        g = reduced;
    }
    Ok((policies, g))
}

impl Reduction {
    /// Minimizer of `q_delta` and the minimal damped cost.
    pub fn solve_delta(&self) -> Result<(DVector<f64>, f64)> {
        let (values, min) = self.q_delta.minimize()?;
        let delta = values.get(&Var::Params).cloned().unwrap_or_else(|| DVector::zeros(0));
        if delta.len() != self.n_a {
            return Err(Error::Dimension("parameter update has the wrong size".into()));
        }
        Ok((delta, min))
    }

    /// Boundary state updates for a given `delta`, reconstructed in descending batch order.
    pub fn boundaries(&self, delta: &DVector<f64>) -> Result<Assignment> {
        let mut values = Assignment::new();
        if self.n_a > 0 {
            values.insert(Var::Params, delta.clone());
        }
        for p in self.chain.iter().rev() {
            let v = p.apply(&values)?;
            values.insert(p.var(), v);
        }
        Ok(values)
    }

    /// All state updates for `delta` (boundaries sequentially, batch interiors in parallel).
    pub fn reconstruct(&self, delta: &DVector<f64>, exec: &Executor) -> Result<DecisionVector> {
        let known = self.boundaries(delta)?;
        let interiors = exec.map(self.batches.len(), |s| -> Result<Assignment> {
            let mut values = known.clone();
            let mut out = Assignment::new();
            for p in self.batches[s].policies.iter().rev() {
                let v = p.apply(&values)?;
                values.insert(p.var(), v.clone());
                out.insert(p.var(), v);
            }
            Ok(out)
        });
        let n_d = self.partition.n_points();
        let mut states = vec![None; n_d];
        for (var, v) in known.into_iter().chain(interiors.into_iter().collect::<Result<Vec<_>>>()?.into_iter().flatten()) {
            if let Var::State(j) = var {
                states[j] = Some(v);
            }
        }
        let states = states
            .into_iter()
            .enumerate()
            .map(|(j, v)| v.ok_or_else(|| Error::Dimension(format!("state update {j} was not reconstructed"))))
            .collect::<Result<Vec<_>>>()?;
        debug_assert!(states.iter().all(|s| s.len() == self.n_x));
        Ok(DecisionVector { states, params: delta.clone() })
    }
}

/// The damped step computed by partitioned elimination.
pub fn lm_step_parallel(blocks: &ResidualBlocks, lambda: f64, partition: &Partition, exec: &Executor) -> Result<DecisionVector> {
    let red = reduce(blocks, lambda, partition, exec)?;
    let (delta, _) = red.solve_delta()?;
    red.reconstruct(&delta, exec)
}

/// Step solver running [`lm_step_parallel`] on a fixed partition.
pub struct ParallelSolver<'a> {
    pub partition: Partition,
    pub exec: &'a Executor,
}

impl StepSolver for ParallelSolver<'_> {
    fn step(&self, blocks: &ResidualBlocks, lambda: f64) -> Result<Option<DecisionVector>> {
        lm_step_parallel(blocks, lambda, &self.partition, self.exec).map(Some)
    }
}

/// Levenberg-Marquardt with the partitioned step. `n_s = None` uses [`default_batches`].
pub fn solve_parallel(problem: &Problem, b0: &DecisionVector, config: &LmConfig, n_s: Option<usize>, exec: &Executor) -> Result<LmOutcome> {
    let n_d = problem.n_points();
    let partition = make_partition(n_d, n_s.unwrap_or_else(|| default_batches(n_d)))?;
    lm::run(problem, b0, config, &ParallelSolver { partition, exec }, exec)
}
