mod common;

use common::*;
use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;
use rand::Rng;
use sparseid_core::qr::{Assignment, QuadraticBlock, Var};
use sparseid_core::Error;

fn block(m_r: &DMatrix<f64>, m_s: &DMatrix<f64>, c: &DVector<f64>) -> QuadraticBlock {
    let rows = c.len();
    QuadraticBlock::from_terms(rows, vec![(Var::State(3), m_r.clone()), (Var::Params, m_s.clone())], c.clone()).unwrap()
}

fn close(a: f64, b: f64, tol: f64) -> bool {
    (a - b).abs() <= tol * (1.0 + b.abs())
}

#[test]
fn matches_pseudoinverse_oracle() {
    let mut r = rng(21);
    for trial in 0..200 {
        let n_r = 1 + trial % 6;
        let n_s = 1 + (trial / 6) % 6;
        let rows = r.random_range(0..14usize);
        let rank = if trial % 3 == 0 { r.random_range(0..n_r) } else { n_r };
        let (m_r, m_s, c) = random_parts(&mut r, rows, n_r, n_s, rank);
        let b = block(&m_r, &m_s, &c);
        let (policy, reduced) = b.eliminate(Var::State(3)).unwrap();
        for _ in 0..3 {
            let s = random_vector(&mut r, n_s);
            let mut vals = Assignment::new();
            vals.insert(Var::Params, s.clone());
            let (r_oracle, v_oracle) = oracle_min(&m_r, &(&m_s * &s + &c));
            let v = reduced.value(&vals).unwrap();
            assert!(close(v, v_oracle, 1e-10), "trial {trial}: {v} vs {v_oracle}");
            let rp = policy.apply(&vals).unwrap();
            assert!((&rp - &r_oracle).norm() <= 1e-10 * (1.0 + r_oracle.norm()), "trial {trial}");
        }
        assert!(reduced.nrows() <= n_s + 1);
    }
}

#[test]
fn zero_block_policy_is_zero() {
    let m_r = DMatrix::zeros(4, 2);
    let mut r = rng(22);
    let m_s = random_matrix(&mut r, 4, 3);
    let c = random_vector(&mut r, 4);
    let (policy, reduced) = block(&m_r, &m_s, &c).eliminate(Var::State(3)).unwrap();
    assert_eq!(policy.coefficients(), DMatrix::zeros(2, 3));
    let s = random_vector(&mut r, 3);
    let mut vals = Assignment::new();
    vals.insert(Var::Params, s.clone());
    assert!(close(reduced.value(&vals).unwrap(), (&m_s * &s + &c).norm_squared(), 1e-13));
}

#[test]
fn duplicated_columns_use_minimum_norm() {
    // r1 and r2 enter only through r1 + r2
    let m_r = DMatrix::from_row_slice(2, 2, &[1.0, 1.0, 2.0, 2.0]);
    let m_s = DMatrix::from_row_slice(2, 1, &[0.0, 0.0]);
    let c = DVector::from_vec(vec![-2.0, -4.0]);
    let (policy, reduced) = block(&m_r, &m_s, &c).eliminate(Var::State(3)).unwrap();
    let mut vals = Assignment::new();
    vals.insert(Var::Params, DVector::zeros(1));
    let r = policy.apply(&vals).unwrap();
    assert!((r[0] - 1.0).abs() < 1e-12 && (r[1] - 1.0).abs() < 1e-12);
    assert!(reduced.value(&vals).unwrap() < 1e-20);
}

#[test]
fn eliminate_unknown_label_is_error() {
    let b = QuadraticBlock::zero(vec![(Var::Params, 2)]).unwrap();
    assert!(matches!(b.eliminate(Var::State(0)), Err(Error::Labels(_))));
}

#[test]
fn stacked_summands_reproduce_direct_sum() {
    // three scalar summands over a chain of states plus a shared parameter
    let mut r = rng(23);
    let blocks: Vec<QuadraticBlock> = (0..3)
        .map(|j| {
            QuadraticBlock::from_terms(
                2,
                vec![
                    (Var::State(j), random_matrix(&mut r, 2, 1)),
                    (Var::State(j + 1), random_matrix(&mut r, 2, 1)),
                    (Var::Params, random_matrix(&mut r, 2, 2)),
                ],
                random_vector(&mut r, 2),
            )
            .unwrap()
        })
        .collect();
    let refs: Vec<&QuadraticBlock> = blocks.iter().collect();
    let stacked = QuadraticBlock::stack(&refs).unwrap();
    let mut vals = Assignment::new();
    for j in 0..4 {
        vals.insert(Var::State(j), random_vector(&mut r, 1));
    }
    vals.insert(Var::Params, random_vector(&mut r, 2));
    let direct: f64 = blocks.iter().map(|b| b.value(&vals).unwrap()).sum();
    assert!(close(stacked.value(&vals).unwrap(), direct, 1e-14));
}

fn arb_block() -> impl Strategy<Value = (u64, usize, usize, usize, usize)> {
    (any::<u64>(), 1usize..=6, 1usize..=6, 0usize..12, 0usize..=6)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn elimination_is_exact_and_optimal((seed, n_r, n_s, rows, rank) in arb_block()) {
        let mut r = rng(seed);
        let (m_r, m_s, c) = random_parts(&mut r, rows, n_r, n_s, rank.min(n_r));
        let b = block(&m_r, &m_s, &c);
        let (policy, reduced) = b.eliminate(Var::State(3)).unwrap();
        let s = random_vector(&mut r, n_s);
        let mut vals = Assignment::new();
        vals.insert(Var::Params, s.clone());
        let red = reduced.value(&vals).unwrap();
        let mut full = vals.clone();
        full.insert(Var::State(3), policy.apply(&vals).unwrap());
        let at_policy = b.value(&full).unwrap();
        prop_assert!(close(at_policy, red, 1e-10));
        for _ in 0..5 {
            let eps = random_vector(&mut r, n_r);
            let eps = eps.normalize() * 1e-3;
            let mut pert = full.clone();
            pert.insert(Var::State(3), &full[&Var::State(3)] + eps);
            prop_assert!(b.value(&pert).unwrap() >= at_policy - 1e-12 * (1.0 + at_policy));
        }
    }

    #[test]
    fn stack_value_is_sum((seed, n_r, n_s, rows, _r) in arb_block(), rows2 in 0usize..6) {
        let mut r = rng(seed);
        let (a_r, a_s, a_c) = random_parts(&mut r, rows, n_r, n_s, n_r);
        let a = block(&a_r, &a_s, &a_c);
        let b = QuadraticBlock::from_terms(rows2, vec![(Var::Params, random_matrix(&mut r, rows2, n_s))], random_vector(&mut r, rows2)).unwrap();
        let st = QuadraticBlock::stack(&[&a, &b]).unwrap();
        let mut vals = Assignment::new();
        vals.insert(Var::Params, random_vector(&mut r, n_s));
        vals.insert(Var::State(3), random_vector(&mut r, n_r));
        let sum = a.value(&vals).unwrap() + b.value(&vals).unwrap();
        prop_assert!(close(st.value(&vals).unwrap(), sum, 1e-13));
    }
}
