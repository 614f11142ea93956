//! Property-based invariants for the solver kernels.

use nalgebra::{DMatrix, DVector};
use odecop::plq::{lift_to_qp, solve_inner, L1Term, PlqProgram, Polyhedron, QuadTerm};
use odecop::qp::{solve_qp, QpSettings, QpStandardForm};
use odecop::scenario::{draw_scenarios, DistributionSpec, Marginal};
use odecop::stepper::{interpolate_state, Trajectory};
use proptest::prelude::*;

fn small_vec(n: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-3.0f64..3.0, n)
}

fn simple_qp(
    diag: Vec<f64>,
    q: Vec<f64>,
    center: Vec<f64>,
    spread: Vec<f64>,
) -> QpStandardForm {
    let k = q.len();
    let g = DMatrix::<f64>::identity(k, k);
    let c = DVector::from_vec(center);
    let s = DVector::from_vec(spread);
    QpStandardForm {
        p: DMatrix::from_diagonal(&DVector::from_vec(diag)),
        q: DVector::from_vec(q),
        g,
        lo: &c - &s,
        hi: &c + &s,
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    // Scaling (P, q) by a positive constant leaves the minimizer unchanged.
    #[test]
    fn qp_objective_scaling_invariance(
        diag in prop::collection::vec(0.2f64..4.0, 3),
        q in small_vec(3),
        center in small_vec(3),
        spread in prop::collection::vec(0.2f64..2.0, 3),
        scale in 0.05f64..20.0,
    ) {
        let qp = simple_qp(diag, q, center, spread);
        let scaled = QpStandardForm {
            p: &qp.p * scale,
            q: &qp.q * scale,
            g: qp.g.clone(),
            lo: qp.lo.clone(),
            hi: qp.hi.clone(),
        };
        let settings = QpSettings::default();
        let a = solve_qp(&qp, &settings).unwrap();
        let b = solve_qp(&scaled, &settings).unwrap();
        prop_assert!((a.z - b.z).amax() <= 1e-6);
    }

    // The lifted QP and the PLQ objective agree at the recovered point, and
    // the slack block reproduces the absolute values.
    #[test]
    fn lift_is_lossless(
        h_diag in prop::collection::vec(0.3f64..3.0, 2),
        c in small_vec(2),
        rows in small_vec(4),
        d in small_vec(2),
        w in prop::collection::vec(0.2f64..2.0, 2),
    ) {
        let p = PlqProgram {
            m: 2,
            quad: Some(QuadTerm {
                h: DMatrix::from_diagonal(&DVector::from_vec(h_diag)),
                c: DVector::from_vec(c),
                constant: 0.0,
            }),
            l1: Some(L1Term {
                c: DMatrix::from_row_slice(2, 2, &rows),
                d: DVector::from_vec(d),
                weights: DVector::from_vec(w),
            }),
            mu: 1e-3,
            feasible: Polyhedron::boxed(vec![-4.0, -4.0], vec![4.0, 4.0]),
        };
        let sol = solve_inner(&p, &QpSettings::default()).unwrap();
        let (qp, map) = lift_to_qp(&p, 0.0);
        // evaluate the lifted objective at (y, |C y - d|)
        let l1 = p.l1.as_ref().unwrap();
        let res = &l1.c * &sol.y - &l1.d;
        let mut z = DVector::zeros(qp.q.len());
        for i in 0..p.m {
            z[i] = sol.y[i];
        }
        for i in 0..res.len() {
            z[p.m + i] = res[i].abs();
        }
        let lifted = 0.5 * z.dot(&(&qp.p * &z)) + qp.q.dot(&z)
            + p.quad.as_ref().unwrap().constant;
        let direct = p.objective(&sol.y);
        prop_assert!(map.recover(&z) == sol.y);
        prop_assert!((lifted - direct).abs() <= 1e-8 * (1.0 + direct.abs()));
    }

    // Linear interpolation is exact at nodes and affine between them.
    #[test]
    fn interpolation_is_affine(
        vals in prop::collection::vec(-5.0f64..5.0, 4),
        theta in 0.0f64..1.0,
        seg in 0usize..3,
    ) {
        let grid: Vec<f64> = (0..4).map(|i| 0.5 * i as f64).collect();
        let tr = Trajectory {
            grid: grid.clone(),
            x_nodes: vals.iter().map(|&v| DVector::from_element(1, v)).collect(),
            y_nodes: vec![DVector::zeros(1); 3],
            diagnostics: vec![],
        };
        for (i, &t) in grid.iter().enumerate() {
            prop_assert!((interpolate_state(&tr, t).unwrap()[0] - vals[i]).abs() <= 1e-12);
        }
        let t = grid[seg] + theta * 0.5;
        let expect = vals[seg] * (1.0 - theta) + vals[seg + 1] * theta;
        prop_assert!((interpolate_state(&tr, t).unwrap()[0] - expect).abs() <= 1e-9);
    }

    // Scenario draws are a pure function of (spec, nu, seed), and prefixes
    // of a larger draw coincide with the head of the sample.
    #[test]
    fn scenario_draws_deterministic(seed in 0u64..1_000_000, nu in 2usize..40) {
        let spec = DistributionSpec::new(vec![
            Marginal::Uniform { lo: -1.0, hi: 2.0 },
            Marginal::Normal { mean: 0.5, variance: 2.0 },
        ]);
        let a = draw_scenarios(&spec, nu, seed).unwrap();
        let b = draw_scenarios(&spec, nu, seed).unwrap();
        for i in 0..nu {
            prop_assert!(a.scenarios[i] == b.scenarios[i]);
        }
        let half = a.prefix(nu / 2).unwrap();
        for i in 0..nu / 2 {
            prop_assert!(half.scenarios[i] == a.scenarios[i]);
        }
    }
}
