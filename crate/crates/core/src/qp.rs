//! Dense convex QP solver over box-interval polyhedra.
//!
//! Operator splitting (ADMM) in the OSQP style with per-row penalties,
//! optional adaptive penalty updates, primal-infeasibility certificates and
//! an optional direct-solve polish step on the detected active set:
//!
//! ```text
//!     minimize    1/2 z' P z + q' z
//!     subject to  g_lo <= G z <= g_hi
//! ```

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

#[derive(Debug, Clone)]
pub struct QpStandardForm {
    pub p: DMatrix<f64>,
    pub q: DVector<f64>,
    pub g: DMatrix<f64>,
    pub lo: DVector<f64>,
    pub hi: DVector<f64>,
}

impl QpStandardForm {
    pub fn dim(&self) -> usize {
        self.q.len()
    }

    pub fn rows(&self) -> usize {
        self.lo.len()
    }

    pub fn validate(&self) -> Result<()> {
        let k = self.dim();
        let r = self.rows();
        if self.p.nrows() != k || self.p.ncols() != k {
            return Err(Error::Config(format!(
                "P must be {k}x{k}, got {}x{}",
                self.p.nrows(),
                self.p.ncols()
            )));
        }
        if self.g.nrows() != r || self.g.ncols() != k || self.hi.len() != r {
            return Err(Error::Config("constraint dimensions inconsistent".into()));
        }
        let scale = 1.0 + self.p.iter().fold(0.0f64, |a, v| a.max(v.abs()));
        for i in 0..k {
            for j in (i + 1)..k {
                if (self.p[(i, j)] - self.p[(j, i)]).abs() > 1e-12 * scale {
                    return Err(Error::Config(format!(
                        "P not symmetric at ({i},{j}): {} vs {}",
                        self.p[(i, j)],
                        self.p[(j, i)]
                    )));
                }
            }
        }
        for i in 0..r {
            if self.lo[i] > self.hi[i] {
                return Err(Error::Config(format!(
                    "row {i}: g_lo {} > g_hi {}",
                    self.lo[i], self.hi[i]
                )));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum QpStatus {
    Optimal,
    PrimalInfeasible,
    DualInfeasible,
    MaxIter,
}

#[derive(Debug, Clone, Copy)]
pub struct Residuals {
    pub primal: f64,
    pub dual: f64,
    /// Worst complementarity violation at (z, dual).
    pub gap: f64,
}

#[derive(Debug, Clone)]
pub struct QpSolution {
    pub z: DVector<f64>,
    pub dual: DVector<f64>,
    pub status: QpStatus,
    pub residuals: Residuals,
    pub iterations: usize,
    /// Separating ray for primal-infeasible problems.
    pub infeasibility_certificate: Option<DVector<f64>>,
}

#[derive(Debug, Clone)]
pub struct QpSettings {
    pub eps_abs: f64,
    pub eps_rel: f64,
    pub max_iter: usize,
    pub rho_init: f64,
    pub adaptive_rho: bool,
    pub polish: bool,
}

impl Default for QpSettings {
    fn default() -> Self {
        QpSettings {
            eps_abs: 1e-8,
            eps_rel: 1e-8,
            max_iter: 20_000,
            rho_init: 0.1,
            adaptive_rho: true,
            polish: true,
        }
    }
}

impl QpSettings {
    pub fn validate(&self) -> Result<()> {
        if !(self.eps_abs > 0.0 && self.eps_rel > 0.0 && self.rho_init > 0.0) {
            return Err(Error::Config("QP tolerances and rho must be positive".into()));
        }
        Ok(())
    }
}

const SIGMA: f64 = 1e-6;
const ALPHA: f64 = 1.6;
const CHECK_EVERY: usize = 25;
const EPS_INFEAS: f64 = 1e-7;
const EQ_ROW_TOL: f64 = 1e-10;
const RHO_EQ_SCALE: f64 = 1e3;

fn inf_norm(v: &DVector<f64>) -> f64 {
    v.iter().fold(0.0f64, |a, x| a.max(x.abs()))
}

/// KKT residuals at a primal/dual pair: primal feasibility violation,
/// stationarity residual, and worst complementarity violation (all inf-norm).
pub fn kkt_residuals(qp: &QpStandardForm, z: &DVector<f64>, dual: &DVector<f64>) -> (f64, f64, f64) {
    let gz = &qp.g * z;
    let mut primal = 0.0f64;
    let mut comp = 0.0f64;
    for i in 0..qp.rows() {
        primal = primal
            .max(qp.lo[i] - gz[i])
            .max(gz[i] - qp.hi[i]);
        let y = dual[i];
        if y > 0.0 {
            // Positive multiplier must pair with an active upper bound.
            comp = comp.max(if qp.hi[i].is_finite() {
                (y * (qp.hi[i] - gz[i])).abs()
            } else {
                y
            });
        } else if y < 0.0 {
            comp = comp.max(if qp.lo[i].is_finite() {
                (y * (gz[i] - qp.lo[i])).abs()
            } else {
                -y
            });
        }
    }
    primal = primal.max(0.0);
    let stat = &qp.p * z + &qp.q + qp.g.transpose() * dual;
    (primal, inf_norm(&stat), comp)
}

struct Factorization {
    chol: Option<nalgebra::Cholesky<f64, nalgebra::Dyn>>,
    lu: Option<nalgebra::LU<f64, nalgebra::Dyn, nalgebra::Dyn>>,
}

impl Factorization {
    fn build(m: DMatrix<f64>) -> Result<Self> {
        match m.clone().cholesky() {
            Some(c) => Ok(Factorization {
                chol: Some(c),
                lu: None,
            }),
            None => {
                let lu = m.lu();
                if lu.determinant().abs() == 0.0 {
                    return Err(Error::Linalg("ADMM KKT matrix singular".into()));
                }
                Ok(Factorization {
                    chol: None,
                    lu: Some(lu),
                })
            }
        }
    }

    fn solve(&self, rhs: &DVector<f64>) -> DVector<f64> {
        if let Some(c) = &self.chol {
            c.solve(rhs)
        } else {
            self.lu.as_ref().unwrap().solve(rhs).unwrap()
        }
    }
}

fn build_rho(qp: &QpStandardForm, rho_bar: f64) -> DVector<f64> {
    DVector::from_fn(qp.rows(), |i, _| {
        if qp.hi[i] - qp.lo[i] <= EQ_ROW_TOL {
            rho_bar * RHO_EQ_SCALE
        } else {
            rho_bar
        }
    })
}

fn factor(qp: &QpStandardForm, rho: &DVector<f64>) -> Result<Factorization> {
    let k = qp.dim();
    let mut m = qp.p.clone();
    for i in 0..k {
        m[(i, i)] += SIGMA;
    }
    // P + sigma I + G' diag(rho) G
    let mut grho = qp.g.clone();
    for i in 0..qp.rows() {
        for j in 0..k {
            grho[(i, j)] *= rho[i];
        }
    }
    m += qp.g.transpose() * grho;
    Factorization::build(m)
}

/// Checks a candidate primal-infeasibility certificate ray `dy`.
fn valid_primal_certificate(qp: &QpStandardForm, dy: &DVector<f64>, tol: f64) -> bool {
    let norm = inf_norm(dy);
    if norm <= 0.0 {
        return false;
    }
    let gt_dy = qp.g.transpose() * dy;
    if inf_norm(&gt_dy) > tol * norm {
        return false;
    }
    let mut support = 0.0;
    for i in 0..qp.rows() {
        let v = dy[i];
        if v > tol * norm {
            if !qp.hi[i].is_finite() {
                return false;
            }
            support += qp.hi[i] * v;
        } else if v < -tol * norm {
            if !qp.lo[i].is_finite() {
                return false;
            }
            support += qp.lo[i] * v;
        }
    }
    support < -tol * norm
}

fn valid_dual_certificate(qp: &QpStandardForm, dx: &DVector<f64>, tol: f64) -> bool {
    let norm = inf_norm(dx);
    if norm <= 0.0 {
        return false;
    }
    let pdx = &qp.p * dx;
    if inf_norm(&pdx) > tol * norm {
        return false;
    }
    if qp.q.dot(dx) >= -tol * norm {
        return false;
    }
    let gdx = &qp.g * dx;
    for i in 0..qp.rows() {
        if qp.hi[i].is_finite() && gdx[i] > tol * norm {
            return false;
        }
        if qp.lo[i].is_finite() && gdx[i] < -tol * norm {
            return false;
        }
    }
    true
}

/// Direct equality solve on the detected active set; returns an improved
/// pair when it beats the ADMM iterate on all three KKT residuals.
fn polish(
    qp: &QpStandardForm,
    z: &DVector<f64>,
    dual: &DVector<f64>,
) -> Option<(DVector<f64>, DVector<f64>)> {
    let k = qp.dim();
    let r = qp.rows();
    let gz = &qp.g * z;
    let mut active: Vec<(usize, f64)> = Vec::new();
    for i in 0..r {
        let span = (qp.hi[i] - qp.lo[i]).abs();
        let low_act = dual[i] < -1e-10 || (qp.lo[i].is_finite() && gz[i] - qp.lo[i] < 1e-7);
        let up_act = dual[i] > 1e-10 || (qp.hi[i].is_finite() && qp.hi[i] - gz[i] < 1e-7);
        if span <= EQ_ROW_TOL {
            active.push((i, qp.lo[i]));
        } else if up_act && qp.hi[i].is_finite() && (!low_act || dual[i] >= 0.0) {
            active.push((i, qp.hi[i]));
        } else if low_act && qp.lo[i].is_finite() {
            active.push((i, qp.lo[i]));
        }
    }
    let na = active.len();
    let dim = k + na;
    let mut kkt = DMatrix::zeros(dim, dim);
    kkt.view_mut((0, 0), (k, k)).copy_from(&qp.p);
    for (a, &(i, _)) in active.iter().enumerate() {
        for j in 0..k {
            kkt[(k + a, j)] = qp.g[(i, j)];
            kkt[(j, k + a)] = qp.g[(i, j)];
        }
    }
    // Tiny regularization keeps the saddle system factorizable; one step of
    // iterative refinement removes its bias.
    const DELTA: f64 = 1e-9;
    let mut kkt_reg = kkt.clone();
    for i in 0..k {
        kkt_reg[(i, i)] += DELTA;
    }
    for i in k..dim {
        kkt_reg[(i, i)] -= DELTA;
    }
    let lu = kkt_reg.lu();
    let mut rhs = DVector::zeros(dim);
    for i in 0..k {
        rhs[i] = -qp.q[i];
    }
    for (a, &(_, b)) in active.iter().enumerate() {
        rhs[k + a] = b;
    }
    let mut sol = lu.solve(&rhs)?;
    for _ in 0..2 {
        let resid = &rhs - &kkt * &sol;
        let corr = lu.solve(&resid)?;
        sol += corr;
    }
    let z_new = DVector::from_fn(k, |i, _| sol[i]);
    let mut dual_new = DVector::zeros(r);
    for (a, &(i, _)) in active.iter().enumerate() {
        dual_new[i] = sol[k + a];
    }
    let (p0, d0, c0) = kkt_residuals(qp, z, dual);
    let (p1, d1, c1) = kkt_residuals(qp, &z_new, &dual_new);
    if p1 <= p0.max(1e-12) && d1 <= d0.max(1e-12) && c1 <= c0.max(1e-12) {
        Some((z_new, dual_new))
    } else {
        None
    }
}

/// Solves the QP from a cold start.
pub fn solve_qp(qp: &QpStandardForm, settings: &QpSettings) -> Result<QpSolution> {
    solve_qp_warm(qp, settings, None)
}

/// Solves the QP, optionally warm-started at a previous primal/dual pair.
pub fn solve_qp_warm(
    qp: &QpStandardForm,
    settings: &QpSettings,
    warm: Option<(&DVector<f64>, &DVector<f64>)>,
) -> Result<QpSolution> {
    qp.validate()?;
    settings.validate()?;
    let k = qp.dim();
    let r = qp.rows();

    let mut rho_bar = settings.rho_init;
    let mut rho = build_rho(qp, rho_bar);
    let mut fac = factor(qp, &rho)?;

    let mut x = DVector::zeros(k);
    let mut y = DVector::zeros(r);
    if let Some((wz, wy)) = warm {
        x.copy_from(wz);
        y.copy_from(wy);
    }
    let mut zc = &qp.g * &x; // auxiliary split variable
    for i in 0..r {
        zc[i] = zc[i].clamp(qp.lo[i], qp.hi[i]);
    }

    let mut y_prev_check = y.clone();
    let mut x_prev_check = x.clone();
    let mut refactor_budget = 30usize;
    let mut best = (f64::INFINITY, x.clone(), y.clone());

    let mut iter = 0usize;
    while iter < settings.max_iter {
        iter += 1;

        // x-update: (P + sigma I + G' diag(rho) G) x = sigma x - q + G'(rho z - y)
        let mut rz_y = DVector::zeros(r);
        for i in 0..r {
            rz_y[i] = rho[i] * zc[i] - y[i];
        }
        let rhs = SIGMA * &x - &qp.q + qp.g.transpose() * rz_y;
        let x_tilde = fac.solve(&rhs);
        let z_tilde = &qp.g * &x_tilde;

        let x_new = ALPHA * &x_tilde + (1.0 - ALPHA) * &x;
        let mut z_new = DVector::zeros(r);
        let mut y_new = DVector::zeros(r);
        for i in 0..r {
            let v = ALPHA * z_tilde[i] + (1.0 - ALPHA) * zc[i] + y[i] / rho[i];
            z_new[i] = v.clamp(qp.lo[i], qp.hi[i]);
            y_new[i] = y[i] + rho[i] * (ALPHA * z_tilde[i] + (1.0 - ALPHA) * zc[i] - z_new[i]);
        }
        x = x_new;
        zc = z_new;
        y = y_new;

        if iter % CHECK_EVERY == 0 || iter == settings.max_iter {
            let gx = &qp.g * &x;
            let r_prim = inf_norm(&(&gx - &zc));
            let px = &qp.p * &x;
            let gty = qp.g.transpose() * &y;
            let stat = &px + &qp.q + &gty;
            let r_dual = inf_norm(&stat);
            let s_prim = inf_norm(&gx).max(inf_norm(&zc)).max(1.0);
            let s_dual = inf_norm(&px)
                .max(inf_norm(&qp.q))
                .max(inf_norm(&gty))
                .max(1.0);
            let eps_prim = settings.eps_abs + settings.eps_rel * s_prim;
            let eps_dual = settings.eps_abs + settings.eps_rel * s_dual;

            let score = r_prim / s_prim + r_dual / s_dual;
            if score < best.0 {
                best = (score, x.clone(), y.clone());
            }

            if r_prim <= eps_prim && r_dual <= eps_dual {
                let mut z_out = x.clone();
                let mut y_out = y.clone();
                if settings.polish {
                    if let Some((zp, yp)) = polish(qp, &z_out, &y_out) {
                        z_out = zp;
                        y_out = yp;
                    }
                }
                let (p, d, c) = kkt_residuals(qp, &z_out, &y_out);
                return Ok(QpSolution {
                    z: z_out,
                    dual: y_out,
                    status: QpStatus::Optimal,
                    residuals: Residuals {
                        primal: p,
                        dual: d,
                        gap: c,
                    },
                    iterations: iter,
                    infeasibility_certificate: None,
                });
            }

            let dy = &y - &y_prev_check;
            if valid_primal_certificate(qp, &dy, EPS_INFEAS) {
                let (p, d, c) = kkt_residuals(qp, &x, &y);
                return Ok(QpSolution {
                    z: x,
                    dual: y,
                    status: QpStatus::PrimalInfeasible,
                    residuals: Residuals {
                        primal: p,
                        dual: d,
                        gap: c,
                    },
                    iterations: iter,
                    infeasibility_certificate: Some(dy),
                });
            }
            let dx = &x - &x_prev_check;
            if valid_dual_certificate(qp, &dx, EPS_INFEAS) {
                let (p, d, c) = kkt_residuals(qp, &x, &y);
                return Ok(QpSolution {
                    z: x,
                    dual: y,
                    status: QpStatus::DualInfeasible,
                    residuals: Residuals {
                        primal: p,
                        dual: d,
                        gap: c,
                    },
                    iterations: iter,
                    infeasibility_certificate: Some(dx),
                });
            }
            y_prev_check = y.clone();
            x_prev_check = x.clone();

            if settings.adaptive_rho && refactor_budget > 0 {
                let ratio = ((r_prim / s_prim) / (r_dual / s_dual).max(1e-300)).sqrt();
                if ratio > 5.0 || ratio < 0.2 {
                    rho_bar = (rho_bar * ratio).clamp(1e-6, 1e6);
                    rho = build_rho(qp, rho_bar);
                    fac = factor(qp, &rho)?;
                    refactor_budget -= 1;
                }
            }
        }
    }

    let (_, bx, by) = best;
    let (p, d, c) = kkt_residuals(qp, &bx, &by);
    Ok(QpSolution {
        z: bx,
        dual: by,
        status: QpStatus::MaxIter,
        residuals: Residuals {
            primal: p,
            dual: d,
            gap: c,
        },
        iterations: settings.max_iter,
        infeasibility_certificate: None,
    })
}
