//! Implicit time-stepping for the coupled system.
//!
//! Each step solves the inner convex program at (t_{i+1}, x_i) — decoupled
//! from the state update on purpose — and then the implicit relation
//!
//! ```text
//!     x_{i+1} = x_i + h * mean_drift(t_{i+1}, x_{i+1}, y_{i+1})
//! ```
//!
//! by fixed-point iteration, either plain Picard or a depth-1 residual
//! mixing scheme with closed-form coefficient and Picard fallback.

use std::sync::Arc;

use nalgebra::DVector;

use crate::error::{Error, Result};
use crate::plq;
use crate::problem::{sample_average_drift, CoupledProblem};
use crate::qp::QpSettings;
use crate::scenario::ScenarioSet;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Acceleration {
    Picard,
    Ediis1,
}

#[derive(Debug, Clone)]
pub struct StepConfig {
    pub h: f64,
    pub n_steps: usize,
    pub mu: f64,
    pub fp_tol: f64,
    pub fp_max_iter: usize,
    pub acceleration: Acceleration,
    pub qp: QpSettings,
}

impl StepConfig {
    pub fn new(h: f64, n_steps: usize, mu: f64) -> Self {
        StepConfig {
            h,
            n_steps,
            mu,
            fp_tol: 1e-6,
            fp_max_iter: 200,
            acceleration: Acceleration::Ediis1,
            qp: QpSettings::default(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.h <= 0.0 || self.fp_tol <= 0.0 || self.fp_max_iter == 0 {
            return Err(Error::Config(
                "step size, fixed-point tolerance, and iteration cap must be positive".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct FixedPointReport {
    pub iterations: usize,
    pub final_residual: f64,
    pub used_fallback: bool,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ContractionCheck {
    /// h * kappa, verified < 1.
    Verified(f64),
    /// No Lipschitz bound supplied; the guard is waived.
    Skipped,
}

pub fn contraction_check(kappa: Option<f64>, h: f64) -> Result<ContractionCheck> {
    match kappa {
        None => Ok(ContractionCheck::Skipped),
        Some(k) => {
            let product = h * k;
            if product < 1.0 {
                Ok(ContractionCheck::Verified(product))
            } else {
                Err(Error::Config(format!(
                    "contraction guard violated: h*kappa = {product} >= 1"
                )))
            }
        }
    }
}

/// Solves x = map(x) by Picard iteration or depth-1 residual mixing.
///
/// The mixing coefficient minimizing ||(1-theta) r_k + theta r_{k-1}|| is
/// theta = clamp(<r_k, r_k - r_{k-1}> / ||r_k - r_{k-1}||^2, 0, 1); the mixed
/// candidate is discarded for the plain Picard candidate whenever its actual
/// residual is larger, so the accelerated run never trails Picard.
pub fn fixed_point_solve<F>(
    map: F,
    x_init: &DVector<f64>,
    cfg: &StepConfig,
) -> Result<(DVector<f64>, FixedPointReport)>
where
    F: Fn(&DVector<f64>) -> Result<DVector<f64>>,
{
    cfg.validate()?;
    let mut history: Vec<f64> = Vec::new();
    let mut used_fallback = false;

    let mut x = x_init.clone();
    let mut fx = map(&x)?;
    let mut r = &fx - &x;
    let mut prev: Option<(DVector<f64>, DVector<f64>)> = None; // (fx_prev, r_prev)
    // Shadow pure-Picard sequence: the mixed iterate is never allowed to
    // trail it, which bounds the accelerated iteration count by Picard's.
    let mut shadow = (cfg.acceleration == Acceleration::Ediis1)
        .then(|| (fx.clone(), r.clone()));

    for iter in 0..=cfg.fp_max_iter {
        let rn = r.norm();
        history.push(rn);
        if rn <= cfg.fp_tol {
            // one extra application sharpens the returned point
            return Ok((
                fx,
                FixedPointReport {
                    iterations: iter,
                    final_residual: rn,
                    used_fallback,
                },
            ));
        }
        if iter == cfg.fp_max_iter {
            break;
        }
        let (x_next, fx_next, r_next) = match (cfg.acceleration, &prev) {
            (Acceleration::Ediis1, Some((fx_prev, r_prev))) => {
                let dr = &r - r_prev;
                let denom = dr.norm_squared();
                let theta = if denom > 0.0 {
                    (r.dot(&dr) / denom).clamp(0.0, 1.0)
                } else {
                    0.0
                };
                let x_mix = (1.0 - theta) * &fx + theta * fx_prev;
                let f_mix = map(&x_mix)?;
                let r_mix = &f_mix - &x_mix;
                // advance the shadow Picard sequence
                let (sp_x, _) = {
                    let (sfx, _) = shadow.take().unwrap();
                    let nfx = map(&sfx)?;
                    let nr = &nfx - &sfx;
                    shadow = Some((nfx, nr.clone()));
                    (sfx, nr)
                };
                let (_, sp_r) = shadow.as_ref().unwrap().clone();
                if r_mix.norm() <= sp_r.norm() {
                    (x_mix, f_mix, r_mix)
                } else {
                    used_fallback = true;
                    let sp_fx = shadow.as_ref().unwrap().0.clone();
                    (sp_x, sp_fx, sp_r)
                }
            }
            _ => {
                let x_pic = fx.clone();
                let f_pic = map(&x_pic)?;
                let r_pic = &f_pic - &x_pic;
                if shadow.is_some() {
                    // first iteration is pure Picard; keep the shadow in sync
                    shadow = Some((f_pic.clone(), r_pic.clone()));
                }
                (x_pic, f_pic, r_pic)
            }
        };
        prev = Some((fx, r));
        x = x_next;
        fx = fx_next;
        r = r_next;
    }
    let _ = &x;
    Err(Error::FixedPoint {
        iterations: cfg.fp_max_iter,
        final_residual: *history.last().unwrap(),
        residual_history: history,
    })
}

#[derive(Debug, Clone)]
pub struct ControlOutcome {
    pub y: DVector<f64>,
    pub objective: f64,
    pub iterations: usize,
    /// Lifted primal/dual pair for warm-starting the next step.
    pub warm: Option<(DVector<f64>, DVector<f64>)>,
}

/// A system the stepper can integrate: built-in sample-average problems,
/// forced-control variants, and estimation problems all implement this.
pub trait CoupledSystem {
    fn state_dim(&self) -> usize;
    fn control_dim(&self) -> usize;
    fn x0(&self) -> DVector<f64>;
    fn horizon(&self) -> f64;
    fn kappa(&self) -> Option<f64> {
        None
    }
    fn control(
        &self,
        t_next: f64,
        x_prev: &DVector<f64>,
        qp: &QpSettings,
        warm: Option<&(DVector<f64>, DVector<f64>)>,
    ) -> Result<ControlOutcome>;
    fn drift_mean(&self, t: f64, x: &DVector<f64>, y: &DVector<f64>) -> Result<DVector<f64>>;
}

/// Sample-average instantiation of a declarative problem at fixed scenarios.
pub struct SaaSystem<'a> {
    pub problem: &'a CoupledProblem,
    pub scenarios: &'a ScenarioSet,
    pub mu: f64,
}

impl CoupledSystem for SaaSystem<'_> {
    fn state_dim(&self) -> usize {
        self.problem.n
    }

    fn control_dim(&self) -> usize {
        self.problem.m
    }

    fn x0(&self) -> DVector<f64> {
        self.problem.x0.clone()
    }

    fn horizon(&self) -> f64 {
        self.problem.horizon
    }

    fn kappa(&self) -> Option<f64> {
        self.problem.kappa
    }

    fn control(
        &self,
        t_next: f64,
        x_prev: &DVector<f64>,
        qp: &QpSettings,
        warm: Option<&(DVector<f64>, DVector<f64>)>,
    ) -> Result<ControlOutcome> {
        if self.problem.m == 0 {
            return Ok(ControlOutcome {
                y: DVector::zeros(0),
                objective: 0.0,
                iterations: 0,
                warm: None,
            });
        }
        let prog = crate::problem::assemble_inner_program(
            self.problem,
            t_next,
            x_prev,
            self.scenarios,
            self.mu,
        )?;
        let sol = plq::solve_inner_warm(&prog, qp, warm.map(|(z, d)| (z, d)))?;
        Ok(ControlOutcome {
            y: sol.y,
            objective: sol.objective_value,
            iterations: sol.iterations,
            warm: Some((sol.qp_diag.z, sol.qp_diag.dual)),
        })
    }

    fn drift_mean(&self, t: f64, x: &DVector<f64>, y: &DVector<f64>) -> Result<DVector<f64>> {
        sample_average_drift(self.problem, t, x, y, self.scenarios)
    }
}

/// Same dynamics, but the control is prescribed as a function of time and
/// the inner solve is bypassed (used to isolate integrator error).
pub struct ForcedControlSystem<'a> {
    pub problem: &'a CoupledProblem,
    pub scenarios: &'a ScenarioSet,
    pub control_fn: Arc<dyn Fn(f64) -> DVector<f64> + Send + Sync>,
}

impl CoupledSystem for ForcedControlSystem<'_> {
    fn state_dim(&self) -> usize {
        self.problem.n
    }

    fn control_dim(&self) -> usize {
        self.problem.m
    }

    fn x0(&self) -> DVector<f64> {
        self.problem.x0.clone()
    }

    fn horizon(&self) -> f64 {
        self.problem.horizon
    }

    fn kappa(&self) -> Option<f64> {
        self.problem.kappa
    }

    fn control(
        &self,
        t_next: f64,
        _x_prev: &DVector<f64>,
        _qp: &QpSettings,
        _warm: Option<&(DVector<f64>, DVector<f64>)>,
    ) -> Result<ControlOutcome> {
        Ok(ControlOutcome {
            y: (self.control_fn)(t_next),
            objective: 0.0,
            iterations: 0,
            warm: None,
        })
    }

    fn drift_mean(&self, t: f64, x: &DVector<f64>, y: &DVector<f64>) -> Result<DVector<f64>> {
        sample_average_drift(self.problem, t, x, y, self.scenarios)
    }
}

#[derive(Debug, Clone)]
pub struct StepDiagnostics {
    pub fp_iterations: usize,
    pub fp_residual: f64,
    pub used_fallback: bool,
    pub inner_iterations: usize,
    pub inner_objective: f64,
    /// ||y_{i+1}|| / (1 + ||x_i||), the linear-growth diagnostic.
    pub growth_ratio: f64,
}

#[derive(Debug, Clone)]
pub struct Trajectory {
    pub grid: Vec<f64>,
    pub x_nodes: Vec<DVector<f64>>,
    /// Controls at t_1..t_N (one fewer entry than x_nodes).
    pub y_nodes: Vec<DVector<f64>>,
    pub diagnostics: Vec<StepDiagnostics>,
}

impl Trajectory {
    pub fn horizon(&self) -> f64 {
        *self.grid.last().unwrap()
    }

    pub fn max_growth_ratio(&self) -> f64 {
        self.diagnostics
            .iter()
            .fold(0.0f64, |a, d| a.max(d.growth_ratio))
    }

    pub fn to_csv(&self) -> String {
        let n = self.x_nodes[0].len();
        let m = self.y_nodes.first().map_or(0, |y| y.len());
        let mut out = String::from("t");
        for j in 1..=n {
            out.push_str(&format!(",x_{j}"));
        }
        for j in 1..=m {
            out.push_str(&format!(",y_{j}"));
        }
        out.push('\n');
        for (i, t) in self.grid.iter().enumerate() {
            out.push_str(&format!("{t:.16e}"));
            for j in 0..n {
                out.push_str(&format!(",{:.16e}", self.x_nodes[i][j]));
            }
            if m > 0 {
                // control convention: value at t_0 repeats y_1
                let y = &self.y_nodes[i.saturating_sub(1).min(self.y_nodes.len() - 1)];
                for j in 0..m {
                    out.push_str(&format!(",{:.16e}", y[j]));
                }
            }
            out.push('\n');
        }
        out
    }

    pub fn diagnostics_csv(&self) -> String {
        let mut out =
            String::from("step,t,fp_iterations,fp_residual,inner_iterations,growth_ratio\n");
        for (i, d) in self.diagnostics.iter().enumerate() {
            out.push_str(&format!(
                "{},{:.16e},{},{:.16e},{},{:.16e}\n",
                i + 1,
                self.grid[i + 1],
                d.fp_iterations,
                d.fp_residual,
                d.inner_iterations,
                d.growth_ratio
            ));
        }
        out
    }
}

/// One implicit Euler step from (t_next - h, x_prev) to t_next.
pub fn implicit_euler_step(
    sys: &dyn CoupledSystem,
    t_next: f64,
    x_prev: &DVector<f64>,
    cfg: &StepConfig,
    warm: Option<&(DVector<f64>, DVector<f64>)>,
) -> Result<(DVector<f64>, DVector<f64>, ControlOutcome, FixedPointReport)> {
    let ctrl = sys.control(t_next, x_prev, &cfg.qp, warm)?;
    let y = ctrl.y.clone();
    let (x_next, report) = fixed_point_solve(
        |x| Ok(x_prev + cfg.h * sys.drift_mean(t_next, x, &y)?),
        x_prev,
        cfg,
    )?;
    Ok((x_next, y, ctrl, report))
}

/// Runs the full scheme for i = 0..N-1, failing fast on the first bad step.
pub fn integrate(sys: &dyn CoupledSystem, cfg: &StepConfig) -> Result<Trajectory> {
    cfg.validate()?;
    let x0 = sys.x0();
    if cfg.n_steps == 0 {
        return Ok(Trajectory {
            grid: vec![0.0],
            x_nodes: vec![x0],
            y_nodes: vec![],
            diagnostics: vec![],
        });
    }
    let t_final = cfg.h * cfg.n_steps as f64;
    let horizon = sys.horizon();
    if (t_final - horizon).abs() > 1e-12 * horizon.max(1.0) {
        return Err(Error::Config(format!(
            "h*N = {t_final} does not match the horizon T = {horizon}"
        )));
    }
    contraction_check(sys.kappa(), cfg.h)?;

    let mut grid = Vec::with_capacity(cfg.n_steps + 1);
    let mut x_nodes = Vec::with_capacity(cfg.n_steps + 1);
    let mut y_nodes = Vec::with_capacity(cfg.n_steps);
    let mut diagnostics = Vec::with_capacity(cfg.n_steps);
    grid.push(0.0);
    x_nodes.push(x0);
    let mut warm: Option<(DVector<f64>, DVector<f64>)> = None;

    for i in 0..cfg.n_steps {
        let t_next = cfg.h * (i + 1) as f64;
        let x_prev = x_nodes[i].clone();
        let (x_next, y_next, ctrl, fp) =
            implicit_euler_step(sys, t_next, &x_prev, cfg, warm.as_ref()).map_err(|e| {
                Error::Step {
                    index: i,
                    time: t_next,
                    source: Box::new(e),
                }
            })?;
        diagnostics.push(StepDiagnostics {
            fp_iterations: fp.iterations,
            fp_residual: fp.final_residual,
            used_fallback: fp.used_fallback,
            inner_iterations: ctrl.iterations,
            inner_objective: ctrl.objective,
            growth_ratio: y_next.norm() / (1.0 + x_prev.norm()),
        });
        warm = ctrl.warm;
        grid.push(t_next);
        x_nodes.push(x_next);
        y_nodes.push(y_next);
    }
    Ok(Trajectory {
        grid,
        x_nodes,
        y_nodes,
        diagnostics,
    })
}

/// Piecewise linear state interpolant; exact at the nodes.
pub fn interpolate_state(tr: &Trajectory, t: f64) -> Result<DVector<f64>> {
    let t_end = tr.horizon();
    if !(0.0..=t_end + 1e-12).contains(&t) {
        return Err(Error::Domain(format!("t = {t} outside [0, {t_end}]")));
    }
    let t = t.min(t_end);
    let idx = match tr.grid.iter().rposition(|&g| g <= t) {
        Some(i) => i.min(tr.grid.len() - 2),
        None => 0,
    };
    if tr.grid.len() == 1 {
        return Ok(tr.x_nodes[0].clone());
    }
    let (t0, t1) = (tr.grid[idx], tr.grid[idx + 1]);
    let w = (t - t0) / (t1 - t0);
    Ok((1.0 - w) * &tr.x_nodes[idx] + w * &tr.x_nodes[idx + 1])
}

/// Piecewise constant control interpolant: y_h(t) = y_{i+1} on (t_i, t_{i+1}],
/// extended right-continuously at t = 0 with y_1.
pub fn interpolate_control(tr: &Trajectory, t: f64) -> Result<DVector<f64>> {
    let t_end = tr.horizon();
    if !(0.0..=t_end + 1e-12).contains(&t) {
        return Err(Error::Domain(format!("t = {t} outside [0, {t_end}]")));
    }
    if tr.y_nodes.is_empty() {
        return Err(Error::Domain("trajectory has no controls".into()));
    }
    let t = t.min(t_end);
    if t == 0.0 {
        return Ok(tr.y_nodes[0].clone());
    }
    // smallest i with t <= t_{i+1}
    let idx = tr.grid[1..]
        .iter()
        .position(|&g| t <= g)
        .unwrap_or(tr.y_nodes.len() - 1);
    Ok(tr.y_nodes[idx].clone())
}
