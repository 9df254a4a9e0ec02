mod common;

use common::*;
use nalgebra::{DMatrix, DVector};
use sparseid_core::data::{Measurement, MeasurementSet};
use sparseid_core::exec::Executor;
use sparseid_core::model::{Dynamics, MeasurementMap};
use sparseid_core::residual::{DecisionVector, Problem, Weights};

/// Discretized objective written out term by term with explicit inverses of W.
fn objective_direct(fx: &Fixture, b: &DecisionVector, wx: &DMatrix<f64>, wy: &DMatrix<f64>, mu_x: f64, mu_a: f64) -> f64 {
    let wx_inv = wx.clone().try_inverse().unwrap();
    let grid = &fx.grid;
    let mut total = 0.0;
    for j in 0..grid.n_intervals() {
        let dt = grid.step(j);
        let (x, z) = (&b.states[j], &b.states[j + 1]);
        let mid = (x + z) * 0.5;
        let eps = (z - x) / dt - fx.model.rhs(grid.midpoint(j), &mid, &b.params);
        total += dt * (eps.transpose() * &wx_inv * &eps)[0];
        total += mu_x * dt / 2.0 * (x.norm_squared() + z.norm_squared());
    }
    for (i, rec) in fx.data.records().iter().enumerate() {
        let j = grid.measurement_indices()[i];
        let e = rec.values() - fx.obs.predict(i, rec.time, &b.states[j]);
        let sub = DMatrix::from_fn(rec.channels.len(), rec.channels.len(), |r, c| wy[(rec.channels[r], rec.channels[c])]);
        total += (e.transpose() * sub.try_inverse().unwrap() * &e)[0];
    }
    total + mu_a * b.params.norm_squared()
}

#[test]
fn cost_matches_direct_objective() {
    let mut r = rng(11);
    for trial in 0..20 {
        let n_x = 1 + trial % 3;
        let wx = random_spd(&mut r, n_x);
        let wy = random_spd(&mut r, n_x);
        let mut fx = random_fixture(&mut r, n_x, 6 + trial, 1 + trial % 4, 0.0, 0.0);
        let (mu_x, mu_a) = (0.3, 0.7);
        fx.weights = Weights::new(wx.clone(), wy.clone(), mu_x, mu_a).unwrap();
        let b = fx.random_point(&mut r);
        let cost = fx.problem().cost(&b, &Executor::sequential()).unwrap();
        let direct = objective_direct(&fx, &b, &wx, &wy, mu_x, mu_a);
        assert!((cost - direct).abs() <= 1e-12 * direct.max(1.0), "trial {trial}: {cost} vs {direct}");
    }
}

#[test]
fn jacobian_matches_finite_differences() {
    let mut r = rng(12);
    let fx = random_fixture(&mut r, 2, 7, 3, 0.2, 0.1);
    let p = fx.problem();
    let exec = Executor::sequential();
    let b = fx.random_point(&mut r);
    let (jac, g0) = p.assemble(&b, &exec).unwrap().dense();
    let flat = b.to_flat();
    let h = 1e-6;
    for k in 0..flat.len() {
        let mut plus = flat.clone();
        plus[k] += h;
        let mut minus = flat.clone();
        minus[k] -= h;
        let gp = p.assemble(&DecisionVector::from_flat(2, 7, &plus).unwrap(), &exec).unwrap().dense().1;
        let gm = p.assemble(&DecisionVector::from_flat(2, 7, &minus).unwrap(), &exec).unwrap().dense().1;
        let fd = (gp - gm) / (2.0 * h);
        assert_eq!(fd.len(), g0.len());
        let col = jac.column(k).into_owned();
        assert!((&fd - &col).norm() <= 1e-6 * (1.0 + col.norm()), "column {k}");
    }
}

#[test]
fn gradient_matches_finite_differences_of_cost() {
    let mut r = rng(13);
    let fx = random_fixture(&mut r, 3, 9, 4, 0.05, 1e-3);
    let p = fx.problem();
    let exec = Executor::sequential();
    let b = fx.random_point(&mut r);
    let grad = p.assemble(&b, &exec).unwrap().gradient().to_flat();
    let flat = b.to_flat();
    let h = 1e-6;
    let fd = DVector::from_fn(flat.len(), |k, _| {
        let mut plus = flat.clone();
        plus[k] += h;
        let mut minus = flat.clone();
        minus[k] -= h;
        let cp = p.cost(&DecisionVector::from_flat(3, 9, &plus).unwrap(), &exec).unwrap();
        let cm = p.cost(&DecisionVector::from_flat(3, 9, &minus).unwrap(), &exec).unwrap();
        (cp - cm) / (2.0 * h)
    });
    assert!(rel_diff(&grad, &fd) <= 1e-5, "{}", rel_diff(&grad, &fd));
}

#[test]
fn gradient_is_twice_jacobian_transpose_residual() {
    let mut r = rng(14);
    let fx = random_fixture(&mut r, 2, 12, 2, 0.0, 1e-3);
    let blocks = fx.problem().assemble(&fx.random_point(&mut r), &Executor::sequential()).unwrap();
    let (jac, g) = blocks.dense();
    let dense = jac.transpose() * g * 2.0;
    assert!(rel_diff(&blocks.gradient().to_flat(), &dense) < 1e-13);
    assert!((blocks.cost() - blocks.dense().1.norm_squared()).abs() < 1e-12 * blocks.cost());
}

#[test]
fn jacobian_block_sparsity() {
    let mut r = rng(15);
    let fx = random_fixture(&mut r, 2, 8, 2, 0.1, 0.1);
    let blocks = fx.problem().assemble(&fx.random_point(&mut r), &Executor::sequential()).unwrap();
    let (jac, _) = blocks.dense();
    let n_x = 2;
    let mut row = 0;
    for (j, b) in blocks.intervals.iter().enumerate() {
        for rr in row..row + b.residual.len() {
            for c in 0..8 * n_x {
                let state = c / n_x;
                if state != j && state != j + 1 {
                    assert_eq!(jac[(rr, c)], 0.0);
                }
            }
        }
        // only the defect rows may depend on the parameters
        for rr in row + n_x..row + b.residual.len() {
            for c in 8 * n_x..jac.ncols() {
                assert_eq!(jac[(rr, c)], 0.0);
            }
        }
        row += b.residual.len();
    }
}

#[test]
fn assembly_is_independent_of_workers() {
    let mut r = rng(16);
    let fx = random_fixture(&mut r, 3, 30, 5, 0.1, 0.1);
    let b = fx.random_point(&mut r);
    let p = fx.problem();
    let a = p.assemble(&b, &Executor::sequential()).unwrap().dense();
    let c = p.assemble(&b, &Executor::new(4)).unwrap().dense();
    assert_eq!(a, c);
}

#[test]
fn exact_interpolant_cost_is_fourth_order() {
    for n in [10usize, 20, 40, 80] {
        let dt = 1.0 / n as f64;
        let (_, cost) = max_defect(n);
        // defect ~ dt^2 e / 24 on each of the N intervals, weighted by dt
        assert!(cost <= dt.powi(4) * n as f64, "n = {n}: {cost}");
    }
}

#[test]
fn halving_step_quarters_defect() {
    for n in [10usize, 20, 40] {
        let ratio = max_defect(n).0 / max_defect(2 * n).0;
        assert!((3.5..=4.5).contains(&ratio), "ratio {ratio}");
    }
}

#[test]
fn measurement_count_mismatch_is_rejected() {
    let (model, grid, _, w) = exponential_problem(4);
    let data = MeasurementSet::from_records(vec![Measurement { time: 0.0, channels: vec![0], values: vec![1.0] }]).unwrap();
    let obs = data.selection(1).unwrap();
    assert!(Problem::new(&model, &grid, &data, &obs, &w).is_err());
}
