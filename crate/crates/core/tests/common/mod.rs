#![allow(dead_code)]

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use sparseid_core::data::{Measurement, MeasurementSet};
use sparseid_core::exec::Executor;
use sparseid_core::grid::Grid;
use sparseid_core::model::{Dynamics, Linearization, PhysicsSpec, Selection, SystemModel};
use sparseid_core::residual::{DecisionVector, Problem, Weights};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn normal(rng: &mut ChaCha8Rng) -> f64 {
    rng.sample(StandardNormal)
}

pub fn random_vector(rng: &mut ChaCha8Rng, n: usize) -> DVector<f64> {
    DVector::from_fn(n, |_, _| normal(rng))
}

pub fn random_matrix(rng: &mut ChaCha8Rng, r: usize, c: usize) -> DMatrix<f64> {
    DMatrix::from_fn(r, c, |_, _| normal(rng))
}

/// `f_i = (A x)_i + sum_l C_il a_l tanh(x_{(i+l) mod n_x}) + 0.1 a_{i mod n_a}^2`.
pub struct TestDynamics {
    pub a: DMatrix<f64>,
    pub c: DMatrix<f64>,
}

impl TestDynamics {
    fn src(&self, i: usize, l: usize) -> usize {
        (i + l) % self.a.nrows()
    }
}

impl Dynamics for TestDynamics {
    fn n_x(&self) -> usize {
        self.a.nrows()
    }

    fn n_a(&self) -> usize {
        self.c.ncols()
    }

    fn rhs(&self, _t: f64, x: &DVector<f64>, a: &DVector<f64>) -> DVector<f64> {
        let n_x = self.n_x();
        let n_a = self.n_a();
        let mut f = &self.a * x;
        for i in 0..n_x {
            for l in 0..n_a {
                f[i] += self.c[(i, l)] * a[l] * x[self.src(i, l)].tanh();
            }
            if n_a > 0 {
                f[i] += 0.1 * a[i % n_a].powi(2);
            }
        }
        f
    }

    fn linearize(&self, t: f64, x: &DVector<f64>, a: &DVector<f64>) -> Linearization {
        let n_x = self.n_x();
        let n_a = self.n_a();
        let mut f_x = self.a.clone();
        let mut f_a = DMatrix::zeros(n_x, n_a);
        for i in 0..n_x {
            for l in 0..n_a {
                let m = self.src(i, l);
                let th = x[m].tanh();
                f_x[(i, m)] += self.c[(i, l)] * a[l] * (1.0 - th * th);
                f_a[(i, l)] += self.c[(i, l)] * th;
            }
            if n_a > 0 {
                f_a[(i, i % n_a)] += 0.2 * a[i % n_a];
            }
        }
        Linearization { f: self.rhs(t, x, a), f_x, f_a }
    }
}

/// `0.2 L L^T + I` with a Gaussian `L`: symmetric positive definite and well conditioned.
pub fn random_spd(rng: &mut ChaCha8Rng, n: usize) -> DMatrix<f64> {
    let l = random_matrix(rng, n, n);
    &l * l.transpose() * 0.2 + DMatrix::identity(n, n)
}

/// A random small identification problem with owned parts.
pub struct Fixture {
    pub model: TestDynamics,
    pub grid: Grid,
    pub data: MeasurementSet,
    pub obs: Selection,
    pub weights: Weights,
}

impl Fixture {
    pub fn problem(&self) -> Problem<'_> {
        Problem::new(&self.model, &self.grid, &self.data, &self.obs, &self.weights).unwrap()
    }

    pub fn random_point(&self, rng: &mut ChaCha8Rng) -> DecisionVector {
        DecisionVector {
            states: (0..self.grid.len()).map(|_| random_vector(rng, self.model.n_x()) * 0.5).collect(),
            params: random_vector(rng, self.model.n_a()) * 0.5,
        }
    }
}

/// `n_d` grid points with spacing 0.1; measurements at both ends and at a random
/// subset of interior points, each observing a random nonempty channel subset.
pub fn random_fixture(rng: &mut ChaCha8Rng, n_x: usize, n_d: usize, n_a: usize, mu_x: f64, mu_a: f64) -> Fixture {
    let dt = 0.1;
    let mut records = Vec::new();
    for k in 0..n_d {
        if k != 0 && k != n_d - 1 && rng.random::<f64>() < 0.5 {
            continue;
        }
        let mut channels: Vec<usize> = (0..n_x).filter(|_| rng.random::<f64>() < 0.6).collect();
        if channels.is_empty() {
            channels.push(rng.random_range(0..n_x));
        }
        let values = channels.iter().map(|_| normal(rng)).collect();
        records.push(Measurement { time: k as f64 / 10.0, channels, values });
    }
    let data = MeasurementSet::from_records(records).unwrap();
    let grid = Grid::build(&data.times(), dt).unwrap();
    assert_eq!(grid.len(), n_d);
    let obs = data.selection(n_x).unwrap();
    let model = TestDynamics { a: random_matrix(rng, n_x, n_x) * 0.5, c: random_matrix(rng, n_x, n_a) };
    let wx = random_spd(rng, n_x);
    let wy = random_spd(rng, n_x);
    let weights = Weights::new(wx, wy, mu_x, mu_a).unwrap();
    Fixture { model, grid, data, obs, weights }
}

pub fn rel_diff(a: &DVector<f64>, b: &DVector<f64>) -> f64 {
    (a - b).norm() / b.norm().max(1e-300)
}

/// Pseudoinverse of a symmetric positive semidefinite matrix through its
/// eigendecomposition, dropping eigenvalues below `1e-10` of the largest.
pub fn pinv_psd(a: &DMatrix<f64>) -> DMatrix<f64> {
    let n = a.nrows();
    if n == 0 {
        return DMatrix::zeros(0, 0);
    }
    let eig = a.clone().symmetric_eigen();
    let max = eig.eigenvalues.iter().cloned().fold(0.0, f64::max);
    let mut out = DMatrix::zeros(n, n);
    for k in 0..n {
        let l = eig.eigenvalues[k];
        if l > 1e-10 * max && l > 0.0 {
            let v = eig.eigenvectors.column(k);
            out += v * v.transpose() / l;
        }
    }
    out
}

/// Random `[M_r M_s M_1]` with `rows` rows; the rank of `M_r` is `rank_r`.
pub fn random_parts(rng: &mut ChaCha8Rng, rows: usize, n_r: usize, n_s: usize, rank_r: usize) -> (DMatrix<f64>, DMatrix<f64>, DVector<f64>) {
    let m_r = if rank_r >= n_r { random_matrix(rng, rows, n_r) } else { random_matrix(rng, rows, rank_r) * random_matrix(rng, rank_r, n_r) };
    (m_r, random_matrix(rng, rows, n_s), random_vector(rng, rows))
}

/// Minimum-norm minimizer over `r` and the minimum of `||M_r r + c||^2`, from
/// `P_r = I - M_r (M_r^T M_r)^+ M_r^T`.
pub fn oracle_min(m_r: &DMatrix<f64>, c: &DVector<f64>) -> (DVector<f64>, f64) {
    let pinv = pinv_psd(&(m_r.transpose() * m_r));
    let r = -(&pinv * m_r.transpose() * c);
    let p = DMatrix::identity(c.len(), c.len()) - m_r * &pinv * m_r.transpose();
    (r, (p * c).norm_squared())
}

/// Linear physics plus a polynomial error network, fitted to noisy data from a
/// slightly different linear system.
pub struct NetFixture {
    pub model: sparseid_core::model::SystemModel,
    pub grid: Grid,
    pub data: MeasurementSet,
    pub obs: Selection,
    pub weights: Weights,
}

impl NetFixture {
    pub fn problem(&self) -> Problem<'_> {
        Problem::new(&self.model, &self.grid, &self.data, &self.obs, &self.weights).unwrap()
    }
}

pub fn net_fixture(rng: &mut ChaCha8Rng, n_x: usize, n_d: usize, degree: u32) -> NetFixture {
    use sparseid_core::model::{ErrorNetwork, PhysicsSpec, SystemModel};
    let a = random_matrix(rng, n_x, n_x) * 0.3 - DMatrix::identity(n_x, n_x) * 0.5;
    let rows: Vec<Vec<f64>> = (0..n_x).map(|i| a.row(i).iter().cloned().collect()).collect();
    let net = ErrorNetwork::polynomial(n_x, n_x, degree).unwrap();
    let model = SystemModel::from_spec(PhysicsSpec::Linear { matrix: rows }).with_network(net).unwrap();
    let truth = &a + random_matrix(rng, n_x, n_x) * 0.2;
    let mut x = random_vector(rng, n_x);
    let mut records = Vec::new();
    for k in 0..n_d {
        let values: Vec<f64> = x.iter().map(|v| v + 0.05 * normal(rng)).collect();
        records.push(Measurement { time: k as f64 / 10.0, channels: (0..n_x).collect(), values });
        x = &x + &truth * &x * 0.1;
    }
    let data = MeasurementSet::from_records(records).unwrap();
    let grid = Grid::build(&data.times(), 0.1).unwrap();
    let obs = data.selection(n_x).unwrap();
    let weights = Weights::isotropic(n_x, n_x, 1.0, 1.0, 1e-4, 1e-3).unwrap();
    NetFixture { model, grid, data, obs, weights }
}

pub fn exponential_problem(n_intervals: usize) -> (SystemModel, Grid, MeasurementSet, Weights) {
    let model = SystemModel::from_spec(PhysicsSpec::Linear { matrix: vec![vec![1.0]] });
    let data = MeasurementSet::from_records(vec![
        Measurement { time: 0.0, channels: vec![0], values: vec![1.0] },
        Measurement { time: 1.0, channels: vec![0], values: vec![1f64.exp()] },
    ])
    .unwrap();
    let grid = Grid::build(&data.times(), 1.0 / n_intervals as f64).unwrap();
    assert_eq!(grid.n_intervals(), n_intervals);
    let w = Weights::isotropic(1, 1, 1.0, 1.0, 0.0, 0.0).unwrap();
    (model, grid, data, w)
}

/// Largest per-interval midpoint defect `|(z - x)/dt - f(mid)|` along the exact solution of `x' = x`.
pub fn max_defect(n_intervals: usize) -> (f64, f64) {
    let (model, grid, data, w) = exponential_problem(n_intervals);
    let obs = data.selection(1).unwrap();
    let p = Problem::new(&model, &grid, &data, &obs, &w).unwrap();
    let b = DecisionVector { states: grid.times().iter().map(|t| DVector::from_element(1, t.exp())).collect(), params: DVector::zeros(0) };
    let blocks = p.assemble(&b, &Executor::sequential()).unwrap();
    let max = blocks.intervals.iter().enumerate().map(|(j, blk)| (blk.residual[0] / grid.step(j).sqrt()).abs()).fold(0.0, f64::max);
    (max, blocks.cost())
}

/// Checks the ceiling law on every measurement interval of `g`.
pub fn ceiling_law_holds(g: &Grid, dt: f64) -> Result<(), String> {
    let idx = g.measurement_indices();
    let t = g.times();
    for w in idx.windows(2) {
        let n = w[1] - w[0];
        let len = t[w[1]] - t[w[0]];
        if len / n as f64 > dt * (1.0 + 1e-9) {
            return Err(format!("interval {len} split into {n} exceeds {dt}"));
        }
        if n > 1 && len / (n - 1) as f64 <= dt * (1.0 - 1e-9) {
            return Err(format!("interval {len} split into {n} is not minimal for {dt}"));
        }
        for k in w[0]..w[1] {
            let h = t[k + 1] - t[k];
            if (h - len / n as f64).abs() > 1e-9 * len {
                return Err(format!("non-uniform step {h} in interval {len}"));
            }
        }
    }
    Ok(())
}
