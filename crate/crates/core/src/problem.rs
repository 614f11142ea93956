//! Declarative model of the coupled system
//!
//! ```text
//!     x'(t) = E[ f(t, x(t), y(t), xi) ],      x(0) = x0,
//!     y(t)  in argmin { E[ g(t, x(t), y, xi) ] : y in K(t, x(t)) },
//!     K(t,x) = { y : E[A(xi)] x + E[B(xi)] y + E[Q(t,xi)] <= 0 } ∩ box,
//! ```
//!
//! together with assembly of its sample-average instantiations at a fixed
//! (t, x): mean drift, feasible polyhedron, and the regularized inner
//! program over a given scenario set.

use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use rand_core::RngCore;

use crate::error::{Error, Result};
use crate::plq::{L1Term, PlqProgram, Polyhedron, QuadTerm};
use crate::scenario::{self, ScenarioSet};

pub type DriftFn =
    Arc<dyn Fn(f64, &DVector<f64>, &DVector<f64>, &DVector<f64>) -> DVector<f64> + Send + Sync>;
pub type MatrixOfScenario = Arc<dyn Fn(&DVector<f64>) -> DMatrix<f64> + Send + Sync>;
pub type VectorOfState = Arc<dyn Fn(f64, &DVector<f64>, &DVector<f64>) -> DVector<f64> + Send + Sync>;
pub type VectorOfTime = Arc<dyn Fn(f64, &DVector<f64>) -> DVector<f64> + Send + Sync>;

#[derive(Clone)]
pub struct DriftSpec {
    pub eval: DriftFn,
    /// Asserts f(t, x, ., xi) is affine; spot-checked by the validator.
    pub affine_in_y: bool,
}

/// One least-squares piece ||M(xi) y - b(t, x, xi)||^2.
#[derive(Clone)]
pub struct QuadPiece {
    pub m_of: MatrixOfScenario,
    pub b_of: VectorOfState,
}

/// One piece ||C(xi) y - c(t, x, xi)||_1.
#[derive(Clone)]
pub struct L1Piece {
    pub c_of: MatrixOfScenario,
    pub d_of: VectorOfState,
}

#[derive(Clone, Default)]
pub struct ObjectiveSpec {
    pub quad_terms: Vec<QuadPiece>,
    pub l1_terms: Vec<L1Piece>,
    /// Known modulus of strong convexity of the expected objective, when
    /// available; must lower-bound the smallest eigenvalue of the
    /// sample-average quadratic Hessian.
    pub strong_convexity_modulus: Option<f64>,
}

#[derive(Clone, Default)]
pub struct ConstraintSpec {
    pub a_of: Option<MatrixOfScenario>,
    pub b_of: Option<MatrixOfScenario>,
    pub q_of: Option<VectorOfTime>,
    pub box_bounds: Option<(Vec<f64>, Vec<f64>)>,
}

#[derive(Clone)]
pub struct CoupledProblem {
    pub n: usize,
    pub m: usize,
    pub d: usize,
    pub horizon: f64,
    pub x0: DVector<f64>,
    pub drift: DriftSpec,
    pub objective: ObjectiveSpec,
    pub constraints: ConstraintSpec,
    /// Lipschitz bound kappa >= E[kappa_f(xi)] for the contraction guard.
    pub kappa: Option<f64>,
}

#[derive(Debug, Clone, Default)]
pub struct ValidationReport {
    pub issues: Vec<String>,
}

impl ValidationReport {
    pub fn ok(&self) -> bool {
        self.issues.is_empty()
    }
}

/// Report-only structural checks: dimensions, affinity spot-checks of the
/// drift in y, and constraint-callable shape consistency.
pub fn validate_problem(p: &CoupledProblem) -> ValidationReport {
    let mut report = ValidationReport::default();
    if p.n < 1 {
        report.issues.push("state dimension n must be >= 1".into());
    }
    if p.horizon <= 0.0 {
        report.issues.push("horizon T must be positive".into());
    }
    if p.x0.len() != p.n {
        report.issues.push(format!(
            "x0 has length {}, expected n = {}",
            p.x0.len(),
            p.n
        ));
    }
    if let Some(k) = p.kappa {
        if k <= 0.0 {
            report.issues.push("kappa must be positive when present".into());
        }
    }
    if let Some((lo, hi)) = &p.constraints.box_bounds {
        if lo.len() != p.m || hi.len() != p.m {
            report.issues.push("box bounds must have length m".into());
        } else if lo.iter().zip(hi).any(|(a, b)| a > b) {
            report.issues.push("box lower bound exceeds upper bound".into());
        }
    }
    if report.issues.iter().any(|s| s.contains("x0")) {
        return report; // probing with a bad x0 would only cascade noise
    }

    let mut rng = scenario::seeded_rng(0x7061_7468_5f70_726f);
    let mut draw = |len: usize| {
        DVector::from_fn(len, |_, _| {
            (rng.next_u64() >> 11) as f64 / (1u64 << 53) as f64 * 2.0 - 1.0
        })
    };
    for probe in 0..10 {
        let t = 0.5 * p.horizon * ((probe + 1) as f64 / 10.0);
        let x = &p.x0 + draw(p.n);
        let xi = draw(p.d);
        let y1 = draw(p.m);
        let y2 = draw(p.m);
        let alpha = 0.1 + 0.8 * (probe as f64 / 10.0);
        let f1 = (p.drift.eval)(t, &x, &y1, &xi);
        if f1.len() != p.n {
            report
                .issues
                .push(format!("drift returns length {}, expected {}", f1.len(), p.n));
            break;
        }
        if p.drift.affine_in_y {
            let f2 = (p.drift.eval)(t, &x, &y2, &xi);
            let ymix = alpha * &y1 + (1.0 - alpha) * &y2;
            let fmix = (p.drift.eval)(t, &x, &ymix, &xi);
            let expect = alpha * &f1 + (1.0 - alpha) * &f2;
            let scale = 1.0 + expect.norm();
            if (&fmix - &expect).norm() > 1e-10 * scale {
                report.issues.push(format!(
                    "affinity probe {probe} failed: |f(a y1+(1-a) y2) - mix| = {:.3e}",
                    (&fmix - &expect).norm()
                ));
            }
        }
        if let (Some(a_of), Some(b_of), Some(q_of)) = (
            &p.constraints.a_of,
            &p.constraints.b_of,
            &p.constraints.q_of,
        ) {
            let a = a_of(&xi);
            let b = b_of(&xi);
            let q = q_of(t, &xi);
            if a.ncols() != p.n || b.ncols() != p.m || a.nrows() != b.nrows() || q.len() != a.nrows()
            {
                report
                    .issues
                    .push("constraint callables have inconsistent shapes".into());
                break;
            }
        }
    }
    report
}

/// Sample-average drift (1/nu) sum_l f(t, x, y, xi_l).
pub fn sample_average_drift(
    p: &CoupledProblem,
    t: f64,
    x: &DVector<f64>,
    y: &DVector<f64>,
    s: &ScenarioSet,
) -> Result<DVector<f64>> {
    let mut acc = DVector::zeros(p.n);
    for (idx, xi) in s.scenarios.iter().enumerate() {
        let v = (p.drift.eval)(t, x, y, xi);
        if v.iter().any(|e| !e.is_finite()) {
            return Err(Error::Evaluation {
                scenario: idx,
                detail: format!("drift produced non-finite entry at t={t}"),
            });
        }
        acc += v;
    }
    Ok(acc / s.nu as f64)
}

/// Sample-average feasible polyhedron K^nu(t, x): rows mean(B) y <= -mean(A) x
/// - mean(Q), with box bounds appended as identity rows.
pub fn assemble_feasible_set(
    p: &CoupledProblem,
    t: f64,
    x: &DVector<f64>,
    s: &ScenarioSet,
) -> Polyhedron {
    let nu = s.nu as f64;
    let mut rows: Option<(DMatrix<f64>, DVector<f64>)> = None;
    if let (Some(a_of), Some(b_of), Some(q_of)) = (
        &p.constraints.a_of,
        &p.constraints.b_of,
        &p.constraints.q_of,
    ) {
        let mut mean_b: Option<DMatrix<f64>> = None;
        let mut mean_rhs: Option<DVector<f64>> = None;
        for xi in &s.scenarios {
            let b = b_of(xi);
            let ax_q = a_of(xi) * x + q_of(t, xi);
            match (&mut mean_b, &mut mean_rhs) {
                (Some(mb), Some(mr)) => {
                    *mb += b;
                    *mr += ax_q;
                }
                _ => {
                    mean_b = Some(b);
                    mean_rhs = Some(ax_q);
                }
            }
        }
        let g = mean_b.unwrap() / nu;
        let hi = -(mean_rhs.unwrap() / nu);
        rows = Some((g, hi));
    }
    let box_rows = p.constraints.box_bounds.as_ref();
    let q_rows = rows.as_ref().map_or(0, |(g, _)| g.nrows());
    let b_rows = box_rows.map_or(0, |(lo, _)| lo.len());
    let r = q_rows + b_rows;
    let mut g = DMatrix::zeros(r, p.m);
    let mut lo = DVector::from_element(r, f64::NEG_INFINITY);
    let mut hi = DVector::from_element(r, f64::INFINITY);
    if let Some((gq, hq)) = rows {
        g.view_mut((0, 0), (q_rows, p.m)).copy_from(&gq);
        hi.rows_mut(0, q_rows).copy_from(&hq);
    }
    if let Some((blo, bhi)) = box_rows {
        for i in 0..b_rows {
            g[(q_rows + i, i)] = 1.0;
            lo[q_rows + i] = blo[i];
            hi[q_rows + i] = bhi[i];
        }
    }
    Polyhedron { g, lo, hi }
}

/// Sample-average regularized inner program at (t, x): averaged quadratic
/// pieces, l1 rows with weight 1/nu each, the feasible polyhedron, and the
/// ridge mu ||y||^2.
pub fn assemble_inner_program(
    p: &CoupledProblem,
    t: f64,
    x: &DVector<f64>,
    s: &ScenarioSet,
    mu: f64,
) -> Result<PlqProgram> {
    if mu < 0.0 {
        return Err(Error::Config("mu must be nonnegative".into()));
    }
    let nu = s.nu as f64;
    let quad = if p.objective.quad_terms.is_empty() {
        None
    } else {
        let mut h = DMatrix::zeros(p.m, p.m);
        let mut c = DVector::zeros(p.m);
        let mut constant = 0.0;
        for piece in &p.objective.quad_terms {
            for xi in &s.scenarios {
                let mat = (piece.m_of)(xi);
                let b = (piece.b_of)(t, x, xi);
                h += mat.transpose() * &mat * (2.0 / nu);
                c -= mat.transpose() * &b * (2.0 / nu);
                constant += b.dot(&b) / nu;
            }
        }
        Some(QuadTerm { h, c, constant })
    };
    let l1 = if p.objective.l1_terms.is_empty() {
        None
    } else {
        // bitwise-identical rows across scenarios (e.g. deterministic
        // coefficients) are merged with summed weights, keeping the lifted
        // QP independent of nu in the deterministic case
        let mut seen: std::collections::HashMap<Vec<u64>, usize> = std::collections::HashMap::new();
        let mut c_rows: Vec<Vec<f64>> = Vec::new();
        let mut d_rows: Vec<f64> = Vec::new();
        let mut weights: Vec<f64> = Vec::new();
        for piece in &p.objective.l1_terms {
            for xi in &s.scenarios {
                let c = (piece.c_of)(xi);
                let d = (piece.d_of)(t, x, xi);
                for i in 0..c.nrows() {
                    let row: Vec<f64> = (0..p.m).map(|j| c[(i, j)]).collect();
                    let mut key: Vec<u64> = row.iter().map(|v| v.to_bits()).collect();
                    key.push(d[i].to_bits());
                    match seen.entry(key) {
                        std::collections::hash_map::Entry::Occupied(e) => {
                            weights[*e.get()] += 1.0 / nu;
                        }
                        std::collections::hash_map::Entry::Vacant(e) => {
                            e.insert(c_rows.len());
                            c_rows.push(row);
                            d_rows.push(d[i]);
                            weights.push(1.0 / nu);
                        }
                    }
                }
            }
        }
        let w = c_rows.len();
        let mut c = DMatrix::zeros(w, p.m);
        for (i, row) in c_rows.iter().enumerate() {
            for (j, &v) in row.iter().enumerate() {
                c[(i, j)] = v;
            }
        }
        Some(L1Term {
            c,
            d: DVector::from_vec(d_rows),
            weights: DVector::from_vec(weights),
        })
    };
    if mu == 0.0 {
        let pd = quad.as_ref().is_some_and(|q| {
            let mut hh = q.h.clone();
            let scale = 1.0 + hh.iter().fold(0.0f64, |a, v| a.max(v.abs()));
            for i in 0..p.m {
                hh[(i, i)] -= 1e-10 * scale;
            }
            hh.cholesky().is_some()
        });
        if !pd {
            return Err(Error::Config(
                "mu = 0 requires a positive definite sample-average quadratic".into(),
            ));
        }
    }
    if let (Some(modulus), Some(q)) = (p.objective.strong_convexity_modulus, &quad) {
        let eig = q.h.clone().symmetric_eigen();
        let lambda_min = eig.eigenvalues.iter().cloned().fold(f64::INFINITY, f64::min);
        if modulus > lambda_min + 1e-8 {
            return Err(Error::Config(format!(
                "declared strong-convexity modulus {modulus} exceeds smallest Hessian eigenvalue {lambda_min}"
            )));
        }
    }
    Ok(PlqProgram {
        m: p.m,
        quad,
        l1,
        mu,
        feasible: assemble_feasible_set(p, t, x, s),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scenario::{DistributionSpec, Marginal};

    fn constant_scenarios(values: &[f64]) -> ScenarioSet {
        ScenarioSet::explicit(
            values
                .iter()
                .map(|&v| DVector::from_vec(vec![v]))
                .collect(),
        )
    }

    fn trivial_problem(m: usize, drift: DriftFn, affine: bool) -> CoupledProblem {
        CoupledProblem {
            n: 1,
            m,
            d: 1,
            horizon: 1.0,
            x0: DVector::from_vec(vec![0.0]),
            drift: DriftSpec {
                eval: drift,
                affine_in_y: affine,
            },
            objective: ObjectiveSpec::default(),
            constraints: ConstraintSpec::default(),
            kappa: None,
        }
    }

    #[test]
    fn constant_drift_averages_to_itself() {
        let p = trivial_problem(
            2,
            Arc::new(|_, _, _, _| DVector::from_vec(vec![7.5])),
            true,
        );
        let s = constant_scenarios(&[1.0, 2.0, 3.0]);
        let v = sample_average_drift(
            &p,
            0.3,
            &DVector::from_vec(vec![4.0]),
            &DVector::zeros(2),
            &s,
        )
        .unwrap();
        assert_eq!(v[0], 7.5);
    }

    #[test]
    fn scalar_scenario_drift_is_arithmetic_mean() {
        let p = trivial_problem(1, Arc::new(|_, _, _, xi| xi.clone()), true);
        let s = constant_scenarios(&[1.0, 2.0, 3.0]);
        let v = sample_average_drift(&p, 0.0, &DVector::zeros(1), &DVector::zeros(1), &s).unwrap();
        assert_eq!(v[0], 2.0);
    }

    #[test]
    fn nonfinite_drift_names_the_scenario() {
        let p = trivial_problem(
            1,
            Arc::new(|_, _, _, xi: &DVector<f64>| DVector::from_vec(vec![1.0 / (xi[0] - 2.0)])),
            true,
        );
        let s = constant_scenarios(&[1.0, 2.0, 3.0]);
        match sample_average_drift(&p, 0.0, &DVector::zeros(1), &DVector::zeros(1), &s) {
            Err(Error::Evaluation { scenario, .. }) => assert_eq!(scenario, 1),
            other => panic!("expected evaluation error, got {other:?}"),
        }
    }

    #[test]
    fn quadratic_drift_fails_affinity_probe() {
        let p = trivial_problem(
            1,
            Arc::new(|_, _, y: &DVector<f64>, _| DVector::from_vec(vec![y[0] * y[0]])),
            true,
        );
        let report = validate_problem(&p);
        assert!(report.issues.iter().any(|s| s.contains("affinity")));
    }

    #[test]
    fn wrong_x0_length_is_listed() {
        let mut p = trivial_problem(1, Arc::new(|_, _, _, _| DVector::zeros(1)), true);
        p.x0 = DVector::from_vec(vec![0.0, 1.0]);
        let report = validate_problem(&p);
        assert!(report.issues.iter().any(|s| s.contains("x0")));
    }

    #[test]
    fn box_only_feasible_set() {
        let mut p = trivial_problem(2, Arc::new(|_, _, _, _| DVector::zeros(1)), true);
        p.constraints.box_bounds = Some((vec![-1.0, -10.0], vec![1.0, 0.0]));
        let s = constant_scenarios(&[0.0]);
        let poly = assemble_feasible_set(&p, 0.0, &DVector::zeros(1), &s);
        assert_eq!(poly.g.nrows(), 2);
        assert_eq!(poly.g, DMatrix::identity(2, 2));
        assert_eq!(poly.lo.as_slice(), &[-1.0, -10.0]);
        assert_eq!(poly.hi.as_slice(), &[1.0, 0.0]);
    }

    #[test]
    fn single_scenario_rows_are_exact() {
        let mut p = trivial_problem(1, Arc::new(|_, _, _, _| DVector::zeros(1)), true);
        p.constraints.a_of = Some(Arc::new(|xi: &DVector<f64>| {
            DMatrix::from_row_slice(1, 1, &[xi[0]])
        }));
        p.constraints.b_of = Some(Arc::new(|xi: &DVector<f64>| {
            DMatrix::from_row_slice(1, 1, &[2.0 * xi[0]])
        }));
        p.constraints.q_of = Some(Arc::new(|t, xi: &DVector<f64>| {
            DVector::from_vec(vec![t + xi[0]])
        }));
        let s = constant_scenarios(&[3.0]);
        let x = DVector::from_vec(vec![2.0]);
        let poly = assemble_feasible_set(&p, 0.5, &x, &s);
        // 3*2 + 6*y + 3.5 <= 0  ->  6 y <= -9.5
        assert_eq!(poly.g[(0, 0)], 6.0);
        assert_eq!(poly.hi[0], -9.5);
        assert_eq!(poly.lo[0], f64::NEG_INFINITY);
    }

    #[test]
    fn duplicated_scenario_equals_single_scenario_bitwise() {
        let mut p = trivial_problem(1, Arc::new(|_, _, _, _| DVector::zeros(1)), true);
        p.constraints.a_of = Some(Arc::new(|xi: &DVector<f64>| {
            DMatrix::from_row_slice(1, 1, &[xi[0] * 0.7])
        }));
        p.constraints.b_of = Some(Arc::new(|xi: &DVector<f64>| {
            DMatrix::from_row_slice(1, 1, &[xi[0] - 0.3])
        }));
        p.constraints.q_of = Some(Arc::new(|t, _| DVector::from_vec(vec![t * 0.1])));
        let x = DVector::from_vec(vec![1.3]);
        let one = assemble_feasible_set(&p, 0.25, &x, &constant_scenarios(&[1.7]));
        let dup = assemble_feasible_set(&p, 0.25, &x, &constant_scenarios(&[1.7, 1.7, 1.7, 1.7]));
        assert_eq!(one.g, dup.g);
        assert_eq!(one.hi, dup.hi);
    }

    #[test]
    fn ridge_only_program_minimizes_at_origin() {
        let p = trivial_problem(3, Arc::new(|_, _, _, _| DVector::zeros(1)), true);
        let s = constant_scenarios(&[1.0]);
        let prog = assemble_inner_program(&p, 0.0, &DVector::zeros(1), &s, 1.0).unwrap();
        let sol = crate::plq::solve_inner(&prog, &crate::qp::QpSettings::default()).unwrap();
        assert!(sol.y.norm() < 1e-7);
    }

    #[test]
    fn mu_zero_with_pd_quadratic_accepted() {
        let mut p = trivial_problem(2, Arc::new(|_, _, _, _| DVector::zeros(1)), true);
        p.objective.quad_terms.push(QuadPiece {
            m_of: Arc::new(|_| DMatrix::identity(2, 2)),
            b_of: Arc::new(|_, _, _| DVector::from_vec(vec![0.4, -0.7])),
        });
        let s = constant_scenarios(&[1.0, 2.0]);
        let prog = assemble_inner_program(&p, 0.0, &DVector::zeros(1), &s, 0.0).unwrap();
        let sol = crate::plq::solve_inner(&prog, &crate::qp::QpSettings::default()).unwrap();
        assert!((sol.y[0] - 0.4).abs() < 1e-7 && (sol.y[1] + 0.7).abs() < 1e-7);
    }

    #[test]
    fn mu_zero_with_singular_quadratic_rejected() {
        let mut p = trivial_problem(2, Arc::new(|_, _, _, _| DVector::zeros(1)), true);
        p.objective.quad_terms.push(QuadPiece {
            m_of: Arc::new(|_| DMatrix::from_row_slice(1, 2, &[1.0, 0.0])),
            b_of: Arc::new(|_, _, _| DVector::from_vec(vec![1.0])),
        });
        let s = constant_scenarios(&[1.0]);
        match assemble_inner_program(&p, 0.0, &DVector::zeros(1), &s, 0.0) {
            Err(Error::Config(_)) => {}
            other => panic!("expected config error, got {other:?}"),
        }
    }

    #[test]
    fn assembly_deterministic_across_equal_seeds() {
        let spec = DistributionSpec {
            marginals: vec![
                Marginal::Normal {
                    mean: 1.0,
                    variance: 0.01,
                },
                Marginal::Uniform { lo: -1.0, hi: 1.0 },
            ],
        };
        let s1 = scenario::draw_scenarios(&spec, 64, 99).unwrap();
        let s2 = scenario::draw_scenarios(&spec, 64, 99).unwrap();
        let mut p = trivial_problem(1, Arc::new(|_, _, _, _| DVector::zeros(1)), true);
        p.d = 2;
        p.constraints.a_of = Some(Arc::new(|xi: &DVector<f64>| {
            DMatrix::from_row_slice(1, 1, &[xi[0] + xi[1]])
        }));
        p.constraints.b_of = Some(Arc::new(|xi: &DVector<f64>| {
            DMatrix::from_row_slice(1, 1, &[xi[0] * xi[1] + 2.0])
        }));
        p.constraints.q_of = Some(Arc::new(|t, xi: &DVector<f64>| {
            DVector::from_vec(vec![t - xi[0]])
        }));
        let x = DVector::from_vec(vec![-1.0]);
        let f1 = assemble_feasible_set(&p, 0.7, &x, &s1);
        let f2 = assemble_feasible_set(&p, 0.7, &x, &s2);
        assert_eq!(f1.g, f2.g);
        assert_eq!(f1.hi, f2.hi);
    }
}
