mod common;

use common::*;
use nalgebra::{DMatrix, DVector};
use sparseid_core::data::{Measurement, MeasurementSet};
use sparseid_core::dense::{lm_step_dense, solve_dense, NormalEquations};
use sparseid_core::exec::Executor;
use sparseid_core::grid::Grid;
use sparseid_core::lm::{LmConfig, Termination};
use sparseid_core::model::{ErrorNetwork, PhysicsSpec, SystemModel};
use sparseid_core::parallel::{batch_forward, build_q, build_r, lm_step_parallel, make_partition, reduce, solve_parallel};
use sparseid_core::qr::{Assignment, QuadraticBlock, Var};
use sparseid_core::residual::{DecisionVector, IntervalBlock, Problem, ResidualBlocks, TerminalBlock, Weights};

fn normal_residual(blocks: &ResidualBlocks, lambda: f64, gamma: &DecisionVector) -> (f64, f64) {
    let ne = NormalEquations::build(blocks, lambda);
    let lhs = ne.apply(gamma).to_flat();
    let rhs = ne.rhs().to_flat();
    ((lhs - &rhs).norm(), rhs.norm())
}

fn scalar_blocks(g: f64, jac: f64) -> ResidualBlocks {
    ResidualBlocks {
        n_x: 1,
        n_a: 0,
        intervals: vec![],
        terminal: TerminalBlock { residual: DVector::from_element(1, g), d_x: DMatrix::from_element(1, 1, jac) },
        params_residual: DVector::zeros(0),
        sqrt_mu_a: 0.0,
    }
}

#[test]
fn scalar_step_closed_form() {
    // g(b) = b - 1 at b = 0
    let gamma = lm_step_dense(&scalar_blocks(-1.0, 1.0), 1.0).unwrap();
    assert!((gamma.states[0][0] - 0.5).abs() < 1e-15);
}

#[test]
fn large_damping_approaches_scaled_gradient() {
    let mut r = rng(31);
    let fx = random_fixture(&mut r, 2, 10, 3, 0.1, 1e-3);
    let blocks = fx.problem().assemble(&fx.random_point(&mut r), &Executor::sequential()).unwrap();
    let lambda = 1e8;
    let gamma = lm_step_dense(&blocks, lambda).unwrap();
    let jtg = blocks.gradient().norm() / 2.0;
    assert!((gamma.norm() - jtg / lambda).abs() <= 0.01 * jtg / lambda);
}

#[test]
fn tiny_damping_is_gauss_newton() {
    let mut r = rng(32);
    let fx = random_fixture(&mut r, 2, 8, 2, 0.1, 1e-2);
    let blocks = fx.problem().assemble(&fx.random_point(&mut r), &Executor::sequential()).unwrap();
    let gamma = lm_step_dense(&blocks, 1e-12).unwrap().to_flat();
    let (jac, g) = blocks.dense();
    let gn = (jac.transpose() * &jac).cholesky().unwrap().solve(&(-(jac.transpose() * g)));
    assert!(rel_diff(&gamma, &gn) <= 1e-6);
}

#[test]
fn dense_step_matches_explicit_normal_equations() {
    let mut r = rng(33);
    for n_x in 1..=3 {
        let fx = random_fixture(&mut r, n_x, 9, 2, 0.0, 1e-3);
        let blocks = fx.problem().assemble(&fx.random_point(&mut r), &Executor::sequential()).unwrap();
        let (jac, g) = blocks.dense();
        let lambda = 0.3;
        let a = jac.transpose() * &jac + DMatrix::identity(jac.ncols(), jac.ncols()) * lambda;
        let explicit = a.cholesky().unwrap().solve(&(-(jac.transpose() * g)));
        let gamma = lm_step_dense(&blocks, lambda).unwrap().to_flat();
        assert!(rel_diff(&gamma, &explicit) <= 1e-12);
    }
}

#[test]
fn parallel_step_is_exact_for_all_partitions() {
    let mut r = rng(34);
    let exec = Executor::sequential();
    for &(n_x, n_d, n_a) in &[(2usize, 20usize, 3usize), (1, 5, 1), (3, 13, 5), (2, 7, 0)] {
        let fx = random_fixture(&mut r, n_x, n_d, n_a, 0.05, 1e-3);
        let blocks = fx.problem().assemble(&fx.random_point(&mut r), &exec).unwrap();
        for &lambda in &[1e-6, 1.0, 1e3] {
            let dense = lm_step_dense(&blocks, lambda).unwrap().to_flat();
            let mut steps = Vec::new();
            for n_s in [1, 2, 4, 8, n_d] {
                if n_s > n_d {
                    continue;
                }
                let part = make_partition(n_d, n_s).unwrap();
                let gamma = lm_step_parallel(&blocks, lambda, &part, &exec).unwrap();
                let (res, scale) = normal_residual(&blocks, lambda, &gamma);
                assert!(res <= 1e-8 * scale, "n_s {n_s} lambda {lambda}: {res} vs {scale}");
                let flat = gamma.to_flat();
                assert!(rel_diff(&flat, &dense) <= 1e-8, "n_s {n_s}");
                steps.push(flat);
            }
            for s in &steps {
                assert!(rel_diff(s, &steps[0]) <= 1e-8);
            }
        }
    }
}

#[test]
fn parallel_step_is_deterministic_across_workers() {
    let mut r = rng(35);
    let fx = random_fixture(&mut r, 3, 30, 4, 0.05, 1e-3);
    let blocks = fx.problem().assemble(&fx.random_point(&mut r), &Executor::sequential()).unwrap();
    let part = make_partition(30, 4).unwrap();
    let a = lm_step_parallel(&blocks, 0.1, &part, &Executor::sequential()).unwrap();
    let b = lm_step_parallel(&blocks, 0.1, &part, &Executor::new(4)).unwrap();
    let c = lm_step_parallel(&blocks, 0.1, &part, &Executor::new(4)).unwrap();
    assert_eq!(a, b);
    assert_eq!(b, c);
}

#[test]
fn q_matches_term_by_term_formula() {
    let mut r = rng(36);
    let fx = random_fixture(&mut r, 2, 6, 3, 0.2, 0.5);
    let blocks = fx.problem().assemble(&fx.random_point(&mut r), &Executor::sequential()).unwrap();
    let lambda = 0.7;
    let mut vals = Assignment::new();
    for j in 0..6 {
        vals.insert(Var::State(j), random_vector(&mut r, 2));
    }
    vals.insert(Var::Params, random_vector(&mut r, 3));
    let delta = &vals[&Var::Params];
    for j in 1..6 {
        let b = &blocks.intervals[j - 1];
        let (bx, bz) = (&vals[&Var::State(j - 1)], &vals[&Var::State(j)]);
        let expected = (&b.residual + &b.d_x * bx + &b.d_z * bz + &b.d_a * delta).norm_squared() + lambda * bx.norm_squared();
        let got = build_q(&blocks, lambda, j).unwrap().value(&vals).unwrap();
        assert!((got - expected).abs() <= 1e-12 * (1.0 + expected));
    }
    let t = &blocks.terminal;
    let bx = &vals[&Var::State(5)];
    let expected = (&t.residual + &t.d_x * bx).norm_squared() + lambda * bx.norm_squared();
    assert!((build_q(&blocks, lambda, 6).unwrap().value(&vals).unwrap() - expected).abs() <= 1e-12 * (1.0 + expected));
    let rq = build_r(&blocks, lambda).unwrap();
    let mut zero = Assignment::new();
    zero.insert(Var::Params, DVector::zeros(3));
    let params = &blocks.params_residual / blocks.sqrt_mu_a;
    assert!((rq.value(&zero).unwrap() - 0.5 * params.norm_squared()).abs() < 1e-12);
}

#[test]
fn zero_blocks_give_zero_q() {
    let n_x = 2;
    let blocks = ResidualBlocks {
        n_x,
        n_a: 1,
        intervals: vec![IntervalBlock { residual: DVector::zeros(2), d_x: DMatrix::zeros(2, 2), d_z: DMatrix::zeros(2, 2), d_a: DMatrix::zeros(2, 1) }],
        terminal: TerminalBlock { residual: DVector::zeros(0), d_x: DMatrix::zeros(0, 2) },
        params_residual: DVector::zeros(1),
        sqrt_mu_a: 0.0,
    };
    let mut vals = Assignment::new();
    vals.insert(Var::State(0), DVector::zeros(2));
    vals.insert(Var::State(1), DVector::zeros(2));
    vals.insert(Var::Params, DVector::zeros(1));
    assert_eq!(build_q(&blocks, 0.0, 1).unwrap().value(&vals).unwrap(), 0.0);
}

#[test]
fn single_summand_batch_returns_q() {
    let mut r = rng(37);
    let fx = random_fixture(&mut r, 2, 5, 2, 0.1, 0.1);
    let blocks = fx.problem().assemble(&fx.random_point(&mut r), &Executor::sequential()).unwrap();
    let part = make_partition(5, 5).unwrap();
    let res = batch_forward(&blocks, 0.5, &part, 2).unwrap();
    assert!(res.policies.is_empty());
    assert_eq!(res.w, build_q(&blocks, 0.5, part.zeta()[2]).unwrap());
}

#[test]
fn three_interval_batch_matches_dense_elimination() {
    let mut r = rng(38);
    let fx = random_fixture(&mut r, 1, 9, 2, 0.1, 0.1);
    let blocks = fx.problem().assemble(&fx.random_point(&mut r), &Executor::sequential()).unwrap();
    let lambda = 0.4;
    // batch 1 holds summands 4, 5, 6
    let part = make_partition(9, 3).unwrap();
    assert_eq!(part.zeta(), &[0, 4, 7, 10]);
    let res = batch_forward(&blocks, lambda, &part, 1).unwrap();
    // summands 4, 5, 6: states 3..6 (0-based), interior 4 and 5
    let qs: Vec<QuadraticBlock> = (4..7).map(|j| build_q(&blocks, lambda, j).unwrap()).collect();
    let refs: Vec<&QuadraticBlock> = qs.iter().collect();
    let sum = QuadraticBlock::stack(&refs).unwrap();
    let interior: Vec<usize> = vec![4, 5];
    for _ in 0..5 {
        let mut vals = Assignment::new();
        vals.insert(Var::State(3), random_vector(&mut r, 1));
        vals.insert(Var::State(6), random_vector(&mut r, 1));
        vals.insert(Var::Params, random_vector(&mut r, 2));
        // closed-form least squares over the interior states
        let m = sum.matrix();
        let cols: Vec<usize> = interior.iter().map(|&j| j - 3).collect();
        let a = DMatrix::from_fn(m.nrows(), 2, |i, k| m[(i, cols[k])]);
        let mut fixed = vals.clone();
        for &j in &interior {
            fixed.insert(Var::State(j), DVector::zeros(1));
        }
        let c = DVector::from_fn(m.nrows(), |i, _| {
            let mut row_val = 0.0;
            let mut col = 0;
            for &(var, d) in sum.vars() {
                for k in 0..d {
                    row_val += m[(i, col + k)] * fixed[&var][k];
                }
                col += d;
            }
            row_val + m[(i, col)]
        });
        let x = (a.transpose() * &a).cholesky().unwrap().solve(&(-(a.transpose() * &c)));
        let expected = (&a * x + c).norm_squared();
        let got = res.w.value(&vals).unwrap();
        assert!((got - expected).abs() <= 1e-9 * (1.0 + expected), "{got} vs {expected}");
    }
}

#[test]
fn two_batch_delta_matches_dense() {
    let mut r = rng(39);
    let fx = random_fixture(&mut r, 1, 12, 3, 0.0, 1e-3);
    let blocks = fx.problem().assemble(&fx.random_point(&mut r), &Executor::sequential()).unwrap();
    let red = reduce(&blocks, 0.01, &make_partition(12, 2).unwrap(), &Executor::sequential()).unwrap();
    let (delta, _) = red.solve_delta().unwrap();
    let dense = lm_step_dense(&blocks, 0.01).unwrap();
    assert!(rel_diff(&delta, &dense.params) <= 1e-10);
}

fn linear_problem_parts(rng: &mut rand_chacha::ChaCha8Rng) -> (SystemModel, Grid, MeasurementSet, Weights) {
    let net = ErrorNetwork::polynomial(2, 2, 0).unwrap();
    let model = SystemModel::from_spec(PhysicsSpec::Linear { matrix: vec![vec![0.0, 1.0], vec![-1.0, -0.1]] }).with_network(net).unwrap();
    let records = (0..11).map(|k| Measurement { time: k as f64 / 5.0, channels: vec![0, 1], values: vec![normal(rng), normal(rng)] }).collect();
    let data = MeasurementSet::from_records(records).unwrap();
    let grid = Grid::build(&data.times(), 0.05).unwrap();
    let w = Weights::isotropic(2, 2, 1.0, 1.0, 1e-3, 1e-3).unwrap();
    (model, grid, data, w)
}

#[test]
fn linear_residual_converges_in_one_step() {
    let mut r = rng(40);
    let (model, grid, data, w) = linear_problem_parts(&mut r);
    let obs = data.selection(2).unwrap();
    let p = Problem::new(&model, &grid, &data, &obs, &w).unwrap();
    let b0 = DecisionVector { states: (0..grid.len()).map(|_| random_vector(&mut r, 2)).collect(), params: random_vector(&mut r, 2) };
    let cfg = LmConfig { lambda0: 1e-8, ..LmConfig::default() };
    let out = solve_dense(&p, &b0, &cfg).unwrap();
    assert_eq!(out.termination, Termination::GradientTolerance);
    assert_eq!(out.accepted_steps(), 2, "initial entry plus one step: {:?}", out.history);
}

#[test]
fn rejection_keeps_point_and_raises_damping() {
    let mut r = rng(41);
    let fx = random_fixture(&mut r, 2, 10, 2, 0.1, 1e-3);
    let p = fx.problem();
    let b0 = fx.random_point(&mut r);
    let cfg = LmConfig { max_iters: 60, ..LmConfig::default() };
    let out = solve_dense(&p, &b0, &cfg).unwrap();
    let h = &out.history;
    let mut cost = h[0].cost;
    for w in h.windows(2) {
        if w[1].accepted {
            assert!(w[1].cost < cost);
            cost = w[1].cost;
        } else {
            assert_eq!(w[1].cost, cost);
        }
    }
}

#[test]
fn damping_schedule_follows_decisions() {
    let mut r = rng(42);
    let fx = random_fixture(&mut r, 2, 10, 2, 0.1, 1e-3);
    let p = fx.problem();
    let cfg = LmConfig { max_iters: 60, ..LmConfig::default() };
    let out = solve_dense(&p, &fx.random_point(&mut r), &cfg).unwrap();
    let h = &out.history;
    assert_eq!(h[1].lambda, cfg.lambda0);
    for w in h[1..].windows(2) {
        let factor = if w[0].accepted { 1.0 / cfg.rho1 } else { cfg.rho2 };
        assert!((w[1].lambda - w[0].lambda * factor).abs() <= 1e-15 * w[1].lambda);
    }
}

#[test]
fn step_is_descent_direction() {
    let mut r = rng(43);
    for _ in 0..10 {
        let fx = random_fixture(&mut r, 2, 8, 3, 0.1, 1e-3);
        let blocks = fx.problem().assemble(&fx.random_point(&mut r), &Executor::sequential()).unwrap();
        let gamma = lm_step_dense(&blocks, 0.1).unwrap().to_flat();
        assert!(gamma.dot(&blocks.gradient().to_flat()) < 0.0);
    }
}

#[test]
fn parallel_and_dense_runs_agree() {
    let mut r = rng(44);
    let fx = random_fixture(&mut r, 2, 20, 3, 0.05, 1e-3);
    let p = fx.problem();
    let b0 = fx.random_point(&mut r);
    let cfg = LmConfig { max_iters: 100, ..LmConfig::default() };
    let dense = solve_dense(&p, &b0, &cfg).unwrap();
    for n_s in [1, 2, 4] {
        let par = solve_parallel(&p, &b0, &cfg, Some(n_s), &Executor::sequential()).unwrap();
        assert!((par.cost - dense.cost).abs() <= 1e-6 * dense.cost);
        let flags: Vec<bool> = par.history.iter().map(|h| h.accepted).collect();
        let dflags: Vec<bool> = dense.history.iter().map(|h| h.accepted).collect();
        assert_eq!(flags, dflags);
    }
}

#[test]
fn non_finite_start_is_rejected() {
    let mut r = rng(45);
    let fx = random_fixture(&mut r, 1, 5, 1, 0.0, 0.0);
    let mut b0 = fx.random_point(&mut r);
    b0.states[2][0] = f64::NAN;
    assert!(solve_dense(&fx.problem(), &b0, &LmConfig::default()).is_err());
}
