//! Built-in example problems.
//!
//! The first is a two-state, three-control coupled system with stochastic
//! drift, objective, and constraints. The second is a parameter-estimation
//! problem for a two-state ODE with time-varying coefficients, observed
//! with Gaussian noise; its closed-form reference solution is
//!
//! ```text
//!     x1*(t) = exp(t - cos t + 1)
//!     x2*(t) = exp(1 - t^2) * \int_0^t exp(s^2 + s - cos s) ds
//! ```

use std::str::FromStr;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::gp::{difference_derivatives, Observations};
use crate::problem::{
    ConstraintSpec, CoupledProblem, DriftSpec, L1Piece, ObjectiveSpec, QuadPiece,
};
use crate::quad;
use crate::scenario::{derive_stream, seeded_rng, standard_normal, DistributionSpec, Marginal};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ExampleId {
    Ex61,
    Ex62CaseI,
    Ex62CaseII,
}

impl FromStr for ExampleId {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().replace('_', "-").as_str() {
            "ex61" => Ok(ExampleId::Ex61),
            "ex62-case-i" | "ex62-i" => Ok(ExampleId::Ex62CaseI),
            "ex62-case-ii" | "ex62-ii" => Ok(ExampleId::Ex62CaseII),
            other => Err(Error::Config(format!(
                "unknown example '{other}' (expected ex61, ex62-case-i, ex62-case-ii)"
            ))),
        }
    }
}

/// How derivative information enters the estimation problem.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DerivativeMode {
    /// Noisy derivative measurements are observed directly.
    Direct,
    /// Only states are observed; derivatives come from first differences.
    Differenced,
}

pub type StateMatrixFn = Arc<dyn Fn(&DVector<f64>) -> DMatrix<f64> + Send + Sync>;
pub type StateVectorFn = Arc<dyn Fn(&DVector<f64>) -> DVector<f64> + Send + Sync>;
pub type TimeVectorFn = Arc<dyn Fn(f64) -> DVector<f64> + Send + Sync>;

/// Everything needed to run the parameter-estimation protocol.
pub struct EstimationSetup {
    pub n: usize,
    pub m: usize,
    pub x0: DVector<f64>,
    pub horizon: f64,
    /// Dynamics x' = f1(x) y + f2(x).
    pub f1: StateMatrixFn,
    pub f2: StateVectorFn,
    /// Box for the parameter vector.
    pub box_lo: Vec<f64>,
    pub box_hi: Vec<f64>,
    pub obs_times: Vec<f64>,
    pub noise_var: f64,
    pub derivative_mode: DerivativeMode,
    /// True time-varying parameters, for scoring.
    pub true_params: TimeVectorFn,
    /// Closed-form truth for the states.
    pub truth: Arc<dyn Fn(f64) -> Result<DVector<f64>> + Send + Sync>,
}

pub struct ExampleBundle {
    pub id: ExampleId,
    /// Coupled problem + scenario distribution (stochastic examples).
    pub coupled: Option<(CoupledProblem, DistributionSpec)>,
    /// Estimation protocol data (observation-driven examples).
    pub estimation: Option<EstimationSetup>,
}

pub fn build_example(id: ExampleId) -> ExampleBundle {
    match id {
        ExampleId::Ex61 => ExampleBundle {
            id,
            coupled: Some(build_ex61()),
            estimation: None,
        },
        ExampleId::Ex62CaseI => ExampleBundle {
            id,
            coupled: None,
            estimation: Some(build_ex62(DerivativeMode::Direct)),
        },
        ExampleId::Ex62CaseII => ExampleBundle {
            id,
            coupled: None,
            estimation: Some(build_ex62(DerivativeMode::Differenced)),
        },
    }
}

fn build_ex61() -> (CoupledProblem, DistributionSpec) {
    let drift = DriftSpec {
        eval: Arc::new(
            |t: f64, x: &DVector<f64>, y: &DVector<f64>, xi: &DVector<f64>| {
                let (x1, x2) = (x[0], x[1]);
                let (a, b) = (xi[0], xi[1]);
                DVector::from_vec(vec![
                    a * x1 + 2.0 * x2 + 2.0 * x1 * y[0] + x2 * y[1] + b * y[2],
                    a * a * x1 + b * x2 + 2.0 * t * y[0] + a * x1 * y[2],
                ])
            },
        ),
        affine_in_y: true,
    };
    let objective = ObjectiveSpec {
        quad_terms: vec![QuadPiece {
            m_of: Arc::new(|xi: &DVector<f64>| {
                DMatrix::from_row_slice(
                    2,
                    3,
                    &[2.0 + xi[0], 0.0, -xi[1], 0.0, xi[0] + xi[1], -1.0],
                )
            }),
            b_of: Arc::new(|_t, x: &DVector<f64>, xi: &DVector<f64>| {
                DVector::from_vec(vec![x[0] + xi[1], xi[0] * x[1]])
            }),
        }],
        l1_terms: vec![L1Piece {
            c_of: Arc::new(|_| DMatrix::identity(3, 3)),
            d_of: Arc::new(|_, _, _| DVector::zeros(3)),
        }],
        strong_convexity_modulus: None,
    };
    let constraints = ConstraintSpec {
        a_of: Some(Arc::new(|xi: &DVector<f64>| {
            DMatrix::from_row_slice(2, 2, &[-2.0 - xi[0], 1.0, -1.0, xi[1]])
        })),
        b_of: Some(Arc::new(|xi: &DVector<f64>| {
            DMatrix::from_row_slice(2, 3, &[1.0, xi[0] * xi[0], xi[1], xi[1], 0.0, 2.0])
        })),
        q_of: Some(Arc::new(|t: f64, xi: &DVector<f64>| {
            DVector::from_vec(vec![t - xi[0], xi[1]])
        })),
        box_bounds: None,
    };
    let problem = CoupledProblem {
        n: 2,
        m: 3,
        d: 2,
        horizon: 1.0,
        x0: DVector::from_vec(vec![-1.0, -2.0]),
        drift,
        objective,
        constraints,
        // crude bound on the mean drift's Lipschitz constant in x over the
        // region visited at desk scale; the guard only needs h*kappa < 1
        kappa: Some(10.0),
    };
    let dist = DistributionSpec {
        marginals: vec![
            Marginal::Normal {
                mean: 1.0,
                variance: 0.01,
            },
            Marginal::Uniform { lo: -1.0, hi: 1.0 },
        ],
    };
    (problem, dist)
}

/// x1*(t) = exp(t - cos t + 1)
pub fn ex62_truth_x1(t: f64) -> f64 {
    (t - t.cos() + 1.0).exp()
}

/// x2*(t) = exp(1 - t^2) * \int_0^t exp(s^2 + s - cos s) ds, by quadrature.
pub fn ex62_truth_x2(t: f64) -> Result<f64> {
    // factor exp(-t^2) into the integrand to keep magnitudes tame
    let integral = quad::integrate(
        &|s: f64| (s * s - t * t + s - s.cos()).exp(),
        0.0,
        t,
        1e-12,
    )?;
    Ok(integral * 1f64.exp())
}

fn build_ex62(mode: DerivativeMode) -> EstimationSetup {
    let obs_times: Vec<f64> = (0..=125).map(|i| 0.04 * i as f64).collect();
    EstimationSetup {
        n: 2,
        m: 2,
        x0: DVector::from_vec(vec![1.0, 0.0]),
        horizon: 5.0,
        f1: Arc::new(|x: &DVector<f64>| {
            DMatrix::from_row_slice(2, 2, &[x[0], 0.0, 0.0, x[1]])
        }),
        f2: Arc::new(|x: &DVector<f64>| DVector::from_vec(vec![x[0], x[0]])),
        box_lo: vec![-1.0, -10.0],
        box_hi: vec![1.0, 0.0],
        obs_times,
        noise_var: 0.4,
        derivative_mode: mode,
        true_params: Arc::new(|t: f64| DVector::from_vec(vec![t.sin(), -2.0 * t])),
        truth: Arc::new(|t: f64| {
            Ok(DVector::from_vec(vec![ex62_truth_x1(t), ex62_truth_x2(t)?]))
        }),
    }
}

/// True derivative of the reference solution (used when synthesizing
/// derivative observations).
pub fn ex62_truth_dx(t: f64) -> Result<DVector<f64>> {
    let x1 = ex62_truth_x1(t);
    let x2 = ex62_truth_x2(t)?;
    Ok(DVector::from_vec(vec![
        x1 + t.sin() * x1,
        x1 - 2.0 * t * x2,
    ]))
}

/// Synthesizes noisy observations for the estimation example; each seed
/// gives a fresh noise realization.
pub fn synthesize_observations(setup: &EstimationSetup, seed: u64) -> Result<Observations> {
    let mut rng = seeded_rng(derive_stream(seed, "obs-noise", 0));
    let sd = setup.noise_var.sqrt();
    let mut y = Vec::with_capacity(setup.obs_times.len());
    let mut z_true = Vec::with_capacity(setup.obs_times.len());
    for &t in &setup.obs_times {
        let truth = (setup.truth)(t)?;
        y.push(DVector::from_fn(setup.n, |j, _| {
            truth[j] + sd * standard_normal(&mut rng)
        }));
        if setup.derivative_mode == DerivativeMode::Direct {
            // the truth satisfies the model dynamics exactly
            z_true.push((setup.f1)(&truth) * (setup.true_params)(t) + (setup.f2)(&truth));
        }
    }
    let base = Observations {
        times: setup.obs_times.clone(),
        y,
        z: None,
        noise_var: vec![setup.noise_var; setup.n],
        deriv_noise_var: None,
    };
    match setup.derivative_mode {
        DerivativeMode::Direct => {
            let z = z_true
                .iter()
                .map(|v| DVector::from_fn(setup.n, |j, _| v[j] + sd * standard_normal(&mut rng)))
                .collect();
            Ok(Observations {
                z: Some(z),
                deriv_noise_var: Some(vec![setup.noise_var; setup.n]),
                ..base
            })
        }
        DerivativeMode::Differenced => difference_derivatives(&base),
    }
}

/// The estimation example's dynamics as a forced-control coupled problem
/// (deterministic drift), for isolating integrator error.
pub fn ex62_forced_problem() -> CoupledProblem {
    CoupledProblem {
        n: 2,
        m: 2,
        d: 1,
        horizon: 5.0,
        x0: DVector::from_vec(vec![1.0, 0.0]),
        drift: DriftSpec {
            eval: Arc::new(|_t, x: &DVector<f64>, y: &DVector<f64>, _xi| {
                DVector::from_vec(vec![x[0] * y[0] + x[0], x[1] * y[1] + x[0]])
            }),
            affine_in_y: true,
        },
        objective: ObjectiveSpec::default(),
        constraints: ConstraintSpec {
            box_bounds: Some((vec![-1.0, -10.0], vec![1.0, 0.0])),
            ..ConstraintSpec::default()
        },
        kappa: None,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::problem::validate_problem;
    use crate::scenario::{draw_scenarios, ScenarioSet};
    use crate::stepper::{integrate, ForcedControlSystem, StepConfig};

    #[test]
    fn ex61_passes_validation() {
        let (problem, _) = build_ex61();
        let report = validate_problem(&problem);
        assert!(report.ok(), "issues: {:?}", report.issues);
    }

    #[test]
    fn ex61_feasible_set_at_expectation_scenarios() {
        // with xi duplicated at (1, 0): rows y1 + 1.01 y2 <= 0 (mean of
        // xi1^2 under N(1, 0.01) is 1.01, approximated by the empirical
        // mean) and 2 y3 + 1 <= 0 at t = 0, x = x0
        let (problem, _) = build_ex61();
        let s = ScenarioSet::explicit(vec![DVector::from_vec(vec![1.0, 0.0]); 4]);
        let poly =
            crate::problem::assemble_feasible_set(&problem, 0.0, &problem.x0.clone(), &s);
        // row 0: B row (1, 1, 0) => y1 + y2 <= -(A x + Q) = -( (−3)(−1)+1(−2) + (0−1) ) = 0
        assert_eq!(poly.g.nrows(), 2);
        assert!((poly.g[(0, 0)] - 1.0).abs() < 1e-12);
        assert!((poly.g[(0, 1)] - 1.0).abs() < 1e-12); // xi1^2 = 1 exactly here
        assert!((poly.hi[0] - 0.0).abs() < 1e-12);
        // row 1: B row (0, 0, 2) => 2 y3 <= -( -(-1)*1 + 0*(-2) + 0 ) = -1
        assert!((poly.g[(1, 2)] - 2.0).abs() < 1e-12);
        assert!((poly.hi[1] + 1.0).abs() < 1e-12);
    }

    #[test]
    fn ex61_mean_drift_close_to_expectation_form() {
        let (problem, dist) = build_ex61();
        let s = draw_scenarios(&dist, 2000, 7).unwrap();
        let x = problem.x0.clone();
        let y = DVector::zeros(3);
        let v = crate::problem::sample_average_drift(&problem, 0.0, &x, &y, &s).unwrap();
        // E[xi1] = 1, E[xi2] = 0, E[xi1^2] = 1.01:
        // f1 = 1*(-1) + 2*(-2) = -5;  f2 = 1.01*(-1) + 0*(-2) = -1.01
        // standard errors: xi1 has sd 0.1 -> se(x1 term) = 0.1/sqrt(2000)*|x1|
        let se1 = 0.1 / (2000f64).sqrt();
        let var_xi1sq: f64 = 4.0 * 0.01 + 2.0 * 0.01 * 0.01; // Var[xi1^2], xi1 ~ N(1, 0.01)
        let se2 = ((var_xi1sq + 4.0 / 3.0) / 2000.0).sqrt(); // + Var[xi2 * x2]
        assert!((v[0] + 5.0).abs() <= 3.0 * se1, "drift[0] = {}", v[0]);
        assert!((v[1] + 1.01).abs() <= 3.0 * se2, "drift[1] = {}", v[1]);
    }

    #[test]
    fn ex62_truth_satisfies_its_ode() {
        // check x2' = x1 - 2 t x2 via the quadrature truth, a few points
        for &t in &[0.5, 1.0, 2.5, 4.0, 5.0] {
            let x1 = ex62_truth_x1(t);
            let x2 = ex62_truth_x2(t).unwrap();
            let eps = 1e-6;
            let fd = (ex62_truth_x2(t + eps).unwrap() - ex62_truth_x2(t - eps).unwrap())
                / (2.0 * eps);
            let rhs = x1 - 2.0 * t * x2;
            assert!(
                (fd - rhs).abs() <= 1e-4 * (1.0 + rhs.abs()),
                "t = {t}: fd {fd} vs rhs {rhs}"
            );
        }
    }

    #[test]
    fn ex62_forced_integration_matches_truth() {
        let problem = ex62_forced_problem();
        let s = ScenarioSet::explicit(vec![DVector::zeros(1)]);
        let sys = ForcedControlSystem {
            problem: &problem,
            scenarios: &s,
            control_fn: Arc::new(|t: f64| DVector::from_vec(vec![t.sin(), -2.0 * t])),
        };
        let mut cfg = StepConfig::new(1e-3, 5000, 0.0);
        cfg.fp_tol = 1e-10;
        let tr = integrate(&sys, &cfg).unwrap();
        let mut sup_rel = 0.0f64;
        for (i, &t) in tr.grid.iter().enumerate().skip(1) {
            let x1 = ex62_truth_x1(t);
            sup_rel = sup_rel.max((tr.x_nodes[i][0] - x1).abs() / x1.abs());
        }
        assert!(sup_rel <= 2e-2, "sup relative error {sup_rel}");
        // spot-check x2 at the endpoint against quadrature truth
        let x2 = ex62_truth_x2(5.0).unwrap();
        let rel = (tr.x_nodes[5000][1] - x2).abs() / (1.0 + x2.abs());
        assert!(rel <= 2e-2, "x2 endpoint relative error {rel}");
    }

    #[test]
    fn case_ii_observations_route_through_differences() {
        let setup = build_ex62(DerivativeMode::Differenced);
        let obs = synthesize_observations(&setup, 42).unwrap();
        assert_eq!(obs.z.as_ref().unwrap().len(), 125);
        let dn = obs.deriv_noise_var.as_ref().unwrap()[0];
        assert!((dn - 500.0).abs() / 500.0 < 1e-9);
    }

    #[test]
    fn case_i_observations_noise_fresh_per_seed() {
        let setup = build_ex62(DerivativeMode::Direct);
        let a = synthesize_observations(&setup, 1).unwrap();
        let b = synthesize_observations(&setup, 1).unwrap();
        let c = synthesize_observations(&setup, 2).unwrap();
        assert_eq!(a.y, b.y);
        assert_ne!(a.y, c.y);
        assert_eq!(a.z.as_ref().unwrap().len(), 126);
    }

    #[test]
    fn example_ids_parse() {
        assert_eq!("ex61".parse::<ExampleId>().unwrap(), ExampleId::Ex61);
        assert_eq!(
            "ex62-case-i".parse::<ExampleId>().unwrap(),
            ExampleId::Ex62CaseI
        );
        assert_eq!(
            "EX62_CASE_II".parse::<ExampleId>().unwrap(),
            ExampleId::Ex62CaseII
        );
        assert!("ex63".parse::<ExampleId>().is_err());
    }
}
