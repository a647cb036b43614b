mod common;

use itertools::Itertools;
use ndarray::{array, Array2};
use otrcl::linalg::{col_sums, row_sums};
use otrcl::ot::{exact_ot_oracle, marginal_violation, sinkhorn, CostMatrix, Marginal, SinkhornParams};
use otrcl::partial::{augment, solve_partial, MassSchedule, PartialOtProblem};
use proptest::prelude::*;

fn eps(e: f64) -> SinkhornParams {
    SinkhornParams { epsilon: e, ..SinkhornParams::default() }
}

/// Smallest mean cost of a permutation, by enumeration.
fn enumerate_min(cost: &Array2<f64>) -> f64 {
    let n = cost.nrows();
    (0..n)
        .permutations(n)
        .map(|p| p.iter().enumerate().map(|(i, &j)| cost[[i, j]]).sum::<f64>() / n as f64)
        .fold(f64::INFINITY, f64::min)
}

#[test]
fn oracle_matches_enumeration_on_random_4x4() {
    let mut r = common::rng(11);
    for _ in 0..10 {
        let c = common::uniform(4, 4, &mut r);
        let (_, objective) = exact_ot_oracle(&CostMatrix::new(c.clone()).unwrap()).unwrap();
        assert_eq!(objective, enumerate_min(&c));
    }
}

#[test]
fn sinkhorn_approaches_oracle_from_above() {
    let mut r = common::rng(12);
    for _ in 0..10 {
        let c = CostMatrix::new(common::uniform(4, 4, &mut r)).unwrap();
        let u = Marginal::uniform(4).unwrap();
        let plan = sinkhorn(&c, &u, &u, &eps(0.01)).unwrap();
        assert!(marginal_violation(plan.values.view(), &u, &u) < 1e-12);
        let gap = plan.objective(&c).unwrap() - exact_ot_oracle(&c).unwrap().1;
        assert!((-1e-12..0.05).contains(&gap), "gap {gap}");
    }
}

#[test]
fn one_by_one_plan_is_the_mass() {
    let c = CostMatrix::new(array![[3.0]]).unwrap();
    let a = Marginal::new(vec![2.5]).unwrap();
    let plan = sinkhorn(&c, &a, &a, &SinkhornParams::default()).unwrap();
    assert!((plan.values[[0, 0]] - 2.5).abs() < 1e-12);
}

#[test]
fn constant_cost_gives_independent_coupling() {
    let c = CostMatrix::new(Array2::from_elem((3, 4), 0.7)).unwrap();
    let a = Marginal::new(vec![0.2, 0.3, 0.5]).unwrap();
    let b = Marginal::new(vec![0.1, 0.4, 0.25, 0.25]).unwrap();
    let plan = sinkhorn(&c, &a, &b, &SinkhornParams::default()).unwrap();
    for i in 0..3 {
        for j in 0..4 {
            assert!((plan.values[[i, j]] - a.weights()[i] * b.weights()[j]).abs() < 1e-9);
        }
    }
}

/// Exact partial OT at 1/N granularity: choose which rows carry mass and where.
fn enumerate_partial(cost: &Array2<f64>, s: f64) -> (f64, Vec<(usize, usize)>) {
    let (n, k) = cost.dim();
    let take = (s * n as f64).round() as usize;
    let cap = n / k;
    let mut best = (f64::INFINITY, vec![]);
    for rows in (0..n).combinations(take) {
        for classes in std::iter::repeat_n(0..k, take).multi_cartesian_product() {
            let mut used = vec![0; k];
            classes.iter().for_each(|&c| used[c] += 1);
            if used.iter().any(|&u| u > cap) {
                continue;
            }
            let total: f64 = rows.iter().zip(&classes).map(|(&i, &c)| cost[[i, c]]).sum();
            if total < best.0 {
                best = (total, rows.iter().copied().zip(classes).collect());
            }
        }
    }
    best
}

#[test]
fn partial_mass_goes_to_enumerated_minimizer() {
    let mut r = common::rng(21);
    let mut cost = common::uniform(4, 2, &mut r).mapv(|x| 0.5 + 0.5 * x);
    cost[[1, 0]] = 0.0;
    cost[[2, 1]] = 0.0;
    let (_, chosen) = enumerate_partial(&cost, 0.5);
    let mut rows: Vec<usize> = chosen.iter().map(|&(i, _)| i).collect();
    rows.sort();
    assert_eq!(rows, vec![1, 2]);

    let soft = solve_partial(
        &PartialOtProblem::uniform(CostMatrix::new(cost).unwrap(), 0.5).unwrap(),
        &eps(0.01),
    )
    .unwrap();
    let on_chosen: f64 = chosen.iter().map(|&(i, c)| soft.values[[i, c]]).sum();
    assert!(on_chosen >= 0.9 * soft.values.sum(), "{on_chosen} of {}", soft.values.sum());
}

#[test]
fn augmented_marginals_balance() {
    let cost = CostMatrix::new(Array2::from_elem((3, 2), 1.0)).unwrap();
    let (c, a, b) = augment(&PartialOtProblem::uniform(cost, 0.5).unwrap()).unwrap();
    assert_eq!(c.dim(), (4, 3));
    assert!((a.total() - 1.5).abs() < 1e-12 && (b.total() - 1.5).abs() < 1e-12);
}

#[test]
fn schedule_is_linear_from_start_to_end() {
    let s = MassSchedule::new(0.2, 0.8, 7).unwrap();
    assert_eq!(s.mass_at(0).unwrap(), 0.2);
    assert!((s.mass_at(6).unwrap() - 0.8).abs() < 1e-12);
    assert!((s.mass_at(3).unwrap() - 0.5).abs() < 1e-12);
    assert!(s.mass_at(7).is_err());
}

fn cost_strategy(max_rows: usize, max_cols: usize) -> impl Strategy<Value = Array2<f64>> {
    (1..=max_rows, 1..=max_cols).prop_flat_map(|(m, n)| {
        proptest::collection::vec(0.0f64..1.0, m * n).prop_map(move |v| Array2::from_shape_vec((m, n), v).unwrap())
    })
}

fn weights(n: usize) -> impl Strategy<Value = Marginal> {
    proptest::collection::vec(0.05f64..1.0, n).prop_map(|v| {
        let s: f64 = v.iter().sum();
        Marginal::new(v.into_iter().map(|x| x / s).collect::<Vec<_>>()).unwrap()
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn converged_plans_meet_marginals(
        (c, a, b) in cost_strategy(12, 12).prop_flat_map(|c| {
            let (m, n) = c.dim();
            (Just(c), weights(m), weights(n))
        })
    ) {
        let cost = CostMatrix::new(c).unwrap();
        let plan = sinkhorn(&cost, &a, &b, &SinkhornParams::default()).unwrap();
        prop_assert!(plan.converged);
        prop_assert!(marginal_violation(plan.values.view(), &a, &b) <= 1e-6);
        prop_assert!(plan.values.iter().all(|&x| x >= 0.0));
    }

    #[test]
    fn scaling_cost_and_epsilon_together_keeps_the_plan(c in cost_strategy(8, 8), scale in 0.5f64..4.0) {
        let (m, n) = c.dim();
        let (a, b) = (Marginal::uniform(m).unwrap(), Marginal::uniform(n).unwrap());
        let p1 = sinkhorn(&CostMatrix::new(c.clone()).unwrap(), &a, &b, &eps(0.1)).unwrap();
        let p2 = sinkhorn(&CostMatrix::new(c * scale).unwrap(), &a, &b, &eps(0.1 * scale)).unwrap();
        for (x, y) in p1.values.iter().zip(p2.values.iter()) {
            prop_assert!((x - y).abs() < 1e-6);
        }
    }

    #[test]
    fn permuting_rows_permutes_the_plan(c in cost_strategy(8, 8), seed in any::<u64>()) {
        use rand::seq::SliceRandom;
        let (m, n) = c.dim();
        let mut perm: Vec<usize> = (0..m).collect();
        perm.shuffle(&mut common::rng(seed));
        let permuted = c.select(ndarray::Axis(0), &perm);
        let (a, b) = (Marginal::uniform(m).unwrap(), Marginal::uniform(n).unwrap());
        let p1 = sinkhorn(&CostMatrix::new(c).unwrap(), &a, &b, &eps(0.2)).unwrap();
        let p2 = sinkhorn(&CostMatrix::new(permuted).unwrap(), &a, &b, &eps(0.2)).unwrap();
        for (new_row, &old_row) in perm.iter().enumerate() {
            for j in 0..n {
                prop_assert!((p2.values[[new_row, j]] - p1.values[[old_row, j]]).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn sinkhorn_is_deterministic(c in cost_strategy(10, 10)) {
        let (m, n) = c.dim();
        let cost = CostMatrix::new(c).unwrap();
        let (a, b) = (Marginal::uniform(m).unwrap(), Marginal::uniform(n).unwrap());
        let p1 = sinkhorn(&cost, &a, &b, &SinkhornParams::default()).unwrap();
        let p2 = sinkhorn(&cost, &a, &b, &SinkhornParams::default()).unwrap();
        prop_assert_eq!(p1.values, p2.values);
    }

    #[test]
    fn partial_plans_respect_caps_and_grow_with_mass(
        c in proptest::collection::vec(0.0f64..3.0, 30 * 3).prop_map(|v| Array2::from_shape_vec((30, 3), v).unwrap()),
        s1 in 0.05f64..0.9,
        ds in 0.01f64..0.1,
    ) {
        let s2 = s1 + ds;
        let cost = CostMatrix::new(c).unwrap();
        let params = eps(0.1);
        let y1 = solve_partial(&PartialOtProblem::uniform(cost.clone(), s1).unwrap(), &params).unwrap();
        let y2 = solve_partial(&PartialOtProblem::uniform(cost, s2).unwrap(), &params).unwrap();
        prop_assert!(y1.converged && y2.converged);
        prop_assert!((y1.assigned_mass - s1).abs() <= 1e-4);
        prop_assert!(y2.assigned_mass > y1.assigned_mass);
        for y in [&y1, &y2] {
            prop_assert!(row_sums(y.values.view()).iter().all(|&r| r <= 1.0 + 1e-4));
            prop_assert!(col_sums(y.values.view()).iter().all(|&c| c <= 30.0 / 3.0 + 1e-4));
        }
    }
}
