//! Piecewise linear-quadratic inner programs and their lossless QP lifting.
//!
//! A program is
//!
//! ```text
//!     minimize    1/2 y' H y + c' y + const
//!               + sum_i w_i |C_i y - d_i|
//!               + mu ||y||^2
//!     subject to  y in { lo <= G y <= hi }
//! ```
//!
//! The ℓ1 rows are lifted with one epigraph slack each, which keeps the
//! problem inside the QP kernel while matching the original objective
//! exactly at every optimum.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::qp::{self, QpSettings, QpSolution, QpStandardForm, QpStatus};

#[derive(Debug, Clone)]
pub struct Polyhedron {
    pub g: DMatrix<f64>,
    pub lo: DVector<f64>,
    pub hi: DVector<f64>,
}

impl Polyhedron {
    pub fn unconstrained(m: usize) -> Self {
        Polyhedron {
            g: DMatrix::zeros(0, m),
            lo: DVector::zeros(0),
            hi: DVector::zeros(0),
        }
    }

    pub fn boxed(lo: Vec<f64>, hi: Vec<f64>) -> Self {
        let m = lo.len();
        Polyhedron {
            g: DMatrix::identity(m, m),
            lo: DVector::from_vec(lo),
            hi: DVector::from_vec(hi),
        }
    }

    pub fn contains(&self, y: &DVector<f64>, tol: f64) -> bool {
        let gy = &self.g * y;
        (0..self.lo.len()).all(|i| gy[i] >= self.lo[i] - tol && gy[i] <= self.hi[i] + tol)
    }
}

/// Quadratic piece 1/2 y' H y + c' y + constant.
#[derive(Debug, Clone)]
pub struct QuadTerm {
    pub h: DMatrix<f64>,
    pub c: DVector<f64>,
    pub constant: f64,
}

impl QuadTerm {
    /// Sample-average of squared residuals: (1/nu) sum ||M_l y - b_l||^2.
    pub fn from_residual_blocks(blocks: &[(DMatrix<f64>, DVector<f64>)]) -> Self {
        let m = blocks[0].0.ncols();
        let nu = blocks.len() as f64;
        let mut h = DMatrix::zeros(m, m);
        let mut c = DVector::zeros(m);
        let mut constant = 0.0;
        for (mat, b) in blocks {
            h += mat.transpose() * mat * (2.0 / nu);
            c -= mat.transpose() * b * (2.0 / nu);
            constant += b.dot(b) / nu;
        }
        QuadTerm { h, c, constant }
    }
}

/// Weighted ℓ1 piece: sum_i weights_i |C_i y - d_i|.
#[derive(Debug, Clone)]
pub struct L1Term {
    pub c: DMatrix<f64>,
    pub d: DVector<f64>,
    pub weights: DVector<f64>,
}

#[derive(Debug, Clone)]
pub struct PlqProgram {
    pub m: usize,
    pub quad: Option<QuadTerm>,
    pub l1: Option<L1Term>,
    pub mu: f64,
    pub feasible: Polyhedron,
}

impl PlqProgram {
    pub fn validate(&self) -> Result<()> {
        if let Some(q) = &self.quad {
            if q.h.nrows() != self.m || q.h.ncols() != self.m || q.c.len() != self.m {
                return Err(Error::Config("quadratic term dimensions mismatch".into()));
            }
            let scale = 1.0 + q.h.iter().fold(0.0f64, |a, v| a.max(v.abs()));
            for i in 0..self.m {
                for j in (i + 1)..self.m {
                    if (q.h[(i, j)] - q.h[(j, i)]).abs() > 1e-10 * scale {
                        return Err(Error::Config("H not symmetric".into()));
                    }
                }
            }
        }
        if let Some(l) = &self.l1 {
            if l.c.ncols() != self.m || l.d.len() != l.c.nrows() || l.weights.len() != l.c.nrows() {
                return Err(Error::Config("l1 term dimensions mismatch".into()));
            }
            if l.weights.iter().any(|&w| w <= 0.0) {
                return Err(Error::Config("l1 weights must be positive".into()));
            }
        }
        if self.mu < 0.0 {
            return Err(Error::Config("mu must be nonnegative".into()));
        }
        if self.feasible.g.ncols() != self.m {
            return Err(Error::Config("polyhedron dimension mismatch".into()));
        }
        Ok(())
    }

    pub fn l1_rows(&self) -> usize {
        self.l1.as_ref().map_or(0, |l| l.c.nrows())
    }

    /// True PLQ objective, including the mu ||y||^2 ridge.
    pub fn objective(&self, y: &DVector<f64>) -> f64 {
        let mut v = self.mu * y.dot(y);
        if let Some(q) = &self.quad {
            v += 0.5 * y.dot(&(&q.h * y)) + q.c.dot(y) + q.constant;
        }
        if let Some(l) = &self.l1 {
            let res = &l.c * y - &l.d;
            for i in 0..res.len() {
                v += l.weights[i] * res[i].abs();
            }
        }
        v
    }

    pub fn with_mu(&self, mu: f64) -> PlqProgram {
        let mut p = self.clone();
        p.mu = mu;
        p
    }
}

/// Maps lifted QP variables z = (y, s) back to y and the true objective.
#[derive(Debug, Clone)]
pub struct LiftMap {
    pub m: usize,
    pub slacks: usize,
}

impl LiftMap {
    pub fn recover(&self, z: &DVector<f64>) -> DVector<f64> {
        DVector::from_fn(self.m, |i, _| z[i])
    }
}

/// Lifts a PLQ program to QP standard form. Extra ridge is added on top of
/// the program's own mu (used by the least-norm stage-1 stabilizer).
pub fn lift_to_qp(p: &PlqProgram, extra_ridge: f64) -> (QpStandardForm, LiftMap) {
    let m = p.m;
    let w = p.l1_rows();
    let k = m + w;
    let poly_rows = p.feasible.lo.len();
    let r = poly_rows + 2 * w;

    let mut pmat = DMatrix::zeros(k, k);
    let mut q = DVector::zeros(k);
    if let Some(quad) = &p.quad {
        pmat.view_mut((0, 0), (m, m)).copy_from(&quad.h);
        q.rows_mut(0, m).copy_from(&quad.c);
    }
    let ridge = 2.0 * p.mu + extra_ridge;
    for i in 0..m {
        pmat[(i, i)] += ridge;
    }
    let mut g = DMatrix::zeros(r, k);
    let mut lo = DVector::from_element(r, f64::NEG_INFINITY);
    let mut hi = DVector::from_element(r, f64::INFINITY);
    g.view_mut((0, 0), (poly_rows, m)).copy_from(&p.feasible.g);
    lo.rows_mut(0, poly_rows).copy_from(&p.feasible.lo);
    hi.rows_mut(0, poly_rows).copy_from(&p.feasible.hi);
    if let Some(l) = &p.l1 {
        for i in 0..w {
            q[m + i] = l.weights[i];
            // C_i y - s_i <= d_i
            for j in 0..m {
                g[(poly_rows + i, j)] = l.c[(i, j)];
            }
            g[(poly_rows + i, m + i)] = -1.0;
            hi[poly_rows + i] = l.d[i];
            // C_i y + s_i >= d_i
            for j in 0..m {
                g[(poly_rows + w + i, j)] = l.c[(i, j)];
            }
            g[(poly_rows + w + i, m + i)] = 1.0;
            lo[poly_rows + w + i] = l.d[i];
        }
    }
    (
        QpStandardForm { p: pmat, q, g, lo, hi },
        LiftMap { m, slacks: w },
    )
}

#[derive(Debug, Clone)]
pub struct InnerSolution {
    pub y: DVector<f64>,
    pub objective_value: f64,
    pub iterations: usize,
    pub qp_diag: QpSolution,
}

/// Solves the PLQ program to optimality; infeasibility and max_iter are hard
/// errors here because downstream steps cannot tolerate silent inaccuracy.
pub fn solve_inner(p: &PlqProgram, settings: &QpSettings) -> Result<InnerSolution> {
    solve_inner_warm(p, settings, None)
}

pub fn solve_inner_warm(
    p: &PlqProgram,
    settings: &QpSettings,
    warm: Option<(&DVector<f64>, &DVector<f64>)>,
) -> Result<InnerSolution> {
    p.validate()?;
    let (qp_form, map) = lift_to_qp(p, 0.0);
    let sol = qp::solve_qp_warm(&qp_form, settings, warm)?;
    match sol.status {
        QpStatus::Optimal => {}
        QpStatus::PrimalInfeasible => return Err(Error::infeasible_with_certificate(&sol)),
        QpStatus::DualInfeasible => {
            return Err(Error::Infeasible(
                "inner problem unbounded below (dual infeasibility certificate)".into(),
            ))
        }
        QpStatus::MaxIter => {
            return Err(Error::QpMaxIter {
                iterations: sol.iterations,
                primal: sol.residuals.primal,
                dual: sol.residuals.dual,
            })
        }
    }
    let y = map.recover(&sol.z);
    let objective_value = p.objective(&y);
    Ok(InnerSolution {
        y,
        objective_value,
        iterations: sol.iterations,
        qp_diag: sol,
    })
}

/// Least-norm optimal solution of an unregularized PLQ program.
///
/// Stage 1 computes the optimal value with a tiny stabilizing ridge, then
/// re-evaluates the unridged objective. Stage 2 minimizes ||y||^2 over the
/// eps_opt-optimal set, parameterized as z* + N v with N spanning the
/// nullspace of the unridged lifted Hessian (curvature pins the rest) and the
/// linear cost capped at its stage-1 value. Working in nullspace coordinates
/// avoids near-equality band rows that the ADMM kernel handles poorly.
pub fn least_norm_oracle(p: &PlqProgram, eps_opt: Option<f64>) -> Result<DVector<f64>> {
    if p.mu != 0.0 {
        return Err(Error::Config("least_norm_oracle requires mu = 0".into()));
    }
    p.validate()?;
    let settings = QpSettings::default();

    // Stage 1: ridge-stabilized solve of the original program.
    let (qp_form, map) = lift_to_qp(p, 1e-10);
    let stage1 = qp::solve_qp(&qp_form, &settings)?;
    match stage1.status {
        QpStatus::Optimal => {}
        QpStatus::PrimalInfeasible => return Err(Error::infeasible_with_certificate(&stage1)),
        _ => {
            return Err(Error::QpMaxIter {
                iterations: stage1.iterations,
                primal: stage1.residuals.primal,
                dual: stage1.residuals.dual,
            })
        }
    }
    let y1 = map.recover(&stage1.z);
    let g_min = p.objective(&y1);
    let eps = eps_opt.unwrap_or(1e-8 * (1.0 + g_min.abs()));

    // Stage 2: the solution set of the unridged lifted QP is
    //   { z feasible : P (z - z*) = 0, q' z <= q' z* }   (P, q without ridge),
    // since P(z - z*) = 0 kills the curvature term in the objective gap.
    let (qp0, _) = lift_to_qp(p, 0.0);
    let k = qp0.q.len();
    let eig = qp0.p.clone().symmetric_eigen();
    let lam_max = eig.eigenvalues.iter().fold(0.0f64, |a, v| a.max(v.abs()));
    let null_tol = 1e-9 * (1.0 + lam_max);
    let null_cols: Vec<usize> = (0..k)
        .filter(|&i| eig.eigenvalues[i].abs() <= null_tol)
        .collect();
    if null_cols.is_empty() {
        // curvature already pins a unique optimum
        return Ok(y1);
    }
    let nv = null_cols.len();
    let mut n_mat = DMatrix::zeros(k, nv);
    for (j, &i) in null_cols.iter().enumerate() {
        n_mat.set_column(j, &eig.eigenvectors.column(i));
    }

    // min ||y(z* + N v)||^2 over feasible v, with the linear cost capped.
    let mut selector = DMatrix::zeros(k, k);
    for i in 0..p.m {
        selector[(i, i)] = 2.0;
    }
    let p_v = n_mat.transpose() * &selector * &n_mat + DMatrix::identity(nv, nv) * 1e-10;
    let q_v = n_mat.transpose() * (&selector * &stage1.z);
    let r0 = qp0.lo.len();
    let gz_star = &qp0.g * &stage1.z;
    let mut g_v = DMatrix::zeros(r0 + 1, nv);
    g_v.view_mut((0, 0), (r0, nv)).copy_from(&(&qp0.g * &n_mat));
    let mut lo_v = DVector::from_element(r0 + 1, f64::NEG_INFINITY);
    let mut hi_v = DVector::from_element(r0 + 1, f64::INFINITY);
    for i in 0..r0 {
        lo_v[i] = qp0.lo[i] - gz_star[i];
        hi_v[i] = qp0.hi[i] - gz_star[i];
    }
    let qn = n_mat.transpose() * &qp0.q;
    for j in 0..nv {
        g_v[(r0, j)] = qn[j];
    }
    hi_v[r0] = eps;

    // The v-objective has curvature only on directions that move y; slack-only
    // null directions make it near-singular, which defeats the ADMM kernel.
    // The reduced QP is tiny, so solve it exactly by active-set enumeration
    // (a unique ridged optimum always admits a KKT basis of at most nv rows).
    let p_ridged = &p_v + DMatrix::identity(nv, nv) * 1e-9;
    let v = enumerate_small_qp(&p_ridged, &q_v, &g_v, &lo_v, &hi_v, nv)?;
    Ok(map.recover(&(&stage1.z + &n_mat * &v)))
}

/// Exact minimizer of a small strictly convex QP by enumerating active sets
/// of at most `max_active` rows. Exponential in the row count; intended for
/// the oracle path only.
fn enumerate_small_qp(
    p: &DMatrix<f64>,
    q: &DVector<f64>,
    g: &DMatrix<f64>,
    lo: &DVector<f64>,
    hi: &DVector<f64>,
    max_active: usize,
) -> Result<DVector<f64>> {
    let n = q.len();
    let rows = lo.len();
    if rows > 24 || n > 12 {
        return Err(Error::Config(
            "least_norm_oracle enumeration limited to small instances".into(),
        ));
    }
    let mut best: Option<(f64, DVector<f64>)> = None;
    // active[i]: (row, at_upper)
    let mut active: Vec<(usize, bool)> = Vec::with_capacity(max_active);
    fn recurse(
        row: usize,
        rows: usize,
        max_active: usize,
        active: &mut Vec<(usize, bool)>,
        p: &DMatrix<f64>,
        q: &DVector<f64>,
        g: &DMatrix<f64>,
        lo: &DVector<f64>,
        hi: &DVector<f64>,
        best: &mut Option<(f64, DVector<f64>)>,
    ) {
        if row == rows {
            try_active_set(active, p, q, g, lo, hi, best);
            return;
        }
        recurse(row + 1, rows, max_active, active, p, q, g, lo, hi, best);
        if active.len() < max_active {
            if lo[row].is_finite() {
                active.push((row, false));
                recurse(row + 1, rows, max_active, active, p, q, g, lo, hi, best);
                active.pop();
            }
            if hi[row].is_finite() && hi[row] != lo[row] {
                active.push((row, true));
                recurse(row + 1, rows, max_active, active, p, q, g, lo, hi, best);
                active.pop();
            }
        }
    }
    recurse(0, rows, max_active, &mut active, p, q, g, lo, hi, &mut best);
    best.map(|(_, v)| v).ok_or_else(|| {
        Error::Infeasible("least_norm_oracle stage-2 enumeration found no KKT point".into())
    })
}

fn try_active_set(
    active: &[(usize, bool)],
    p: &DMatrix<f64>,
    q: &DVector<f64>,
    g: &DMatrix<f64>,
    lo: &DVector<f64>,
    hi: &DVector<f64>,
    best: &mut Option<(f64, DVector<f64>)>,
) {
    let n = q.len();
    let na = active.len();
    let mut kkt = DMatrix::zeros(n + na, n + na);
    kkt.view_mut((0, 0), (n, n)).copy_from(p);
    let mut rhs = DVector::zeros(n + na);
    rhs.rows_mut(0, n).copy_from(&(-q));
    for (j, &(i, upper)) in active.iter().enumerate() {
        for col in 0..n {
            kkt[(col, n + j)] = g[(i, col)];
            kkt[(n + j, col)] = g[(i, col)];
        }
        rhs[n + j] = if upper { hi[i] } else { lo[i] };
    }
    let lu = kkt.clone().full_piv_lu();
    let Some(sol) = lu.solve(&rhs) else { return };
    if (&kkt * &sol - &rhs).amax() > 1e-8 {
        return;
    }
    let v = sol.rows(0, n).into_owned();
    let gv = g * &v;
    for i in 0..lo.len() {
        let scale = 1.0 + gv[i].abs();
        if gv[i] < lo[i] - 1e-9 * scale || gv[i] > hi[i] + 1e-9 * scale {
            return;
        }
    }
    for (j, &(i, upper)) in active.iter().enumerate() {
        let lambda = sol[n + j];
        // two-sided ranges let either sign stand in for the opposite bound
        if lo[i] == hi[i] {
            continue;
        }
        if upper && lambda < -1e-9 {
            return;
        }
        if !upper && lambda > 1e-9 {
            return;
        }
    }
    let obj = 0.5 * v.dot(&(p * &v)) + q.dot(&v);
    if best.as_ref().map_or(true, |(b, _)| obj < *b) {
        *best = Some((obj, v));
    }
}

#[derive(Debug, Clone)]
pub struct PathEntry {
    pub mu: f64,
    pub y: DVector<f64>,
    pub norm_y: f64,
    pub g_mu_min: f64,
    pub dist_to_least_norm: f64,
    pub iterations: usize,
}

#[derive(Debug, Clone)]
pub struct PathReport {
    pub entries: Vec<PathEntry>,
    pub y_least_norm: DVector<f64>,
    /// Index of the first failed schedule entry, when the report is partial.
    pub failure_index: Option<usize>,
}

impl PathReport {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("mu,norm_y,g_mu_min,dist_to_least_norm,iterations\n");
        for e in &self.entries {
            out.push_str(&format!(
                "{:.16e},{:.16e},{:.16e},{:.16e},{}\n",
                e.mu, e.norm_y, e.g_mu_min, e.dist_to_least_norm, e.iterations
            ));
        }
        out
    }
}

/// Solves the program along a strictly decreasing ridge schedule and reports
/// norms, optimal values, and distances to the least-norm solution.
pub fn regularization_path(p: &PlqProgram, schedule: &[f64]) -> Result<PathReport> {
    if p.mu != 0.0 {
        return Err(Error::Config("regularization_path requires a mu=0 template".into()));
    }
    if schedule.is_empty() || schedule.windows(2).any(|w| w[1] >= w[0]) || schedule[schedule.len() - 1] <= 0.0
    {
        return Err(Error::Config(
            "schedule must be strictly decreasing and positive".into(),
        ));
    }
    let y_ln = least_norm_oracle(p, None)?;
    let norm_ln = y_ln.norm();
    let settings = QpSettings::default();
    let mut entries = Vec::with_capacity(schedule.len());
    let mut failure_index = None;
    for (idx, &mu) in schedule.iter().enumerate() {
        match solve_inner(&p.with_mu(mu), &settings) {
            Ok(sol) => {
                let norm_y = sol.y.norm();
                debug_assert!(norm_y <= norm_ln + 1e-6);
                entries.push(PathEntry {
                    mu,
                    dist_to_least_norm: (&sol.y - &y_ln).norm(),
                    norm_y,
                    g_mu_min: sol.objective_value,
                    y: sol.y,
                    iterations: sol.iterations,
                });
            }
            Err(_) => {
                failure_index = Some(idx);
                break;
            }
        }
    }
    Ok(PathReport {
        entries,
        y_least_norm: y_ln,
        failure_index,
    })
}

/// Warm-start state for [`solve_inner_splitting`]: the auxiliary row
/// variables and scaled duals of the splitting.
#[derive(Debug, Clone)]
pub struct SplitWarm {
    pub s: DVector<f64>,
    pub u: DVector<f64>,
}

#[derive(Debug, Clone)]
pub struct SplitSolution {
    pub y: DVector<f64>,
    pub objective_value: f64,
    pub iterations: usize,
    pub warm: SplitWarm,
}

/// Operator-splitting solver for PLQ programs with many l1 rows, where the
/// lifted QP would be large. The splitting keeps the linear algebra at
/// m x m: with A = [C; G] and s the row variables,
///
/// ```text
///     y ← (H + 2 mu I + rho A'A)^{-1} (rho A'(s - u) - c)
///     s ← per-row soft-threshold (l1 rows) / clamp (polyhedron rows)
///     u ← u + A y - s
/// ```
///
/// Requires mu > 0 or a positive-definite quadratic so the y-update is
/// well-posed as rho varies.
pub fn solve_inner_splitting(
    p: &PlqProgram,
    settings: &QpSettings,
    warm: Option<&SplitWarm>,
) -> Result<SplitSolution> {
    p.validate()?;
    let m = p.m;
    let r_l1 = p.l1_rows();
    let r_g = p.feasible.g.nrows();
    let rows = r_l1 + r_g;
    if rows == 0 {
        // smooth unconstrained case: direct solve
        let sol = solve_inner(p, settings)?;
        return Ok(SplitSolution {
            warm: SplitWarm {
                s: DVector::zeros(0),
                u: DVector::zeros(0),
            },
            y: sol.y,
            objective_value: sol.objective_value,
            iterations: sol.iterations,
        });
    }

    let mut a = DMatrix::zeros(rows, m);
    if let Some(l) = &p.l1 {
        a.view_mut((0, 0), (r_l1, m)).copy_from(&l.c);
    }
    a.view_mut((r_l1, 0), (r_g, m)).copy_from(&p.feasible.g);

    // exact row equilibration: w |c'y - d| = (w ||c||) |c'y/||c|| - d/||c|||,
    // and bounds scale with their row; keeps A entries O(1) so one rho
    // suits every row
    let mut row_scale = DVector::from_element(rows, 1.0);
    let mut d_scaled = DVector::zeros(r_l1);
    let mut w_scaled = DVector::zeros(r_l1);
    let mut lo_scaled = DVector::zeros(r_g);
    let mut hi_scaled = DVector::zeros(r_g);
    for i in 0..rows {
        let norm = a.row(i).norm();
        if norm > 0.0 {
            row_scale[i] = norm;
            a.row_mut(i).unscale_mut(norm);
        }
    }
    if let Some(l) = &p.l1 {
        for i in 0..r_l1 {
            d_scaled[i] = l.d[i] / row_scale[i];
            w_scaled[i] = l.weights[i] * row_scale[i];
        }
    }
    for j in 0..r_g {
        lo_scaled[j] = p.feasible.lo[j] / row_scale[r_l1 + j];
        hi_scaled[j] = p.feasible.hi[j] / row_scale[r_l1 + j];
    }
    let at = a.transpose();

    let mut h = match &p.quad {
        Some(q) => q.h.clone(),
        None => DMatrix::zeros(m, m),
    };
    for i in 0..m {
        h[(i, i)] += 2.0 * p.mu;
    }
    let c = match &p.quad {
        Some(q) => q.c.clone(),
        None => DVector::zeros(m),
    };
    let ata = &at * &a;

    let factor = |rho: f64| -> Result<nalgebra::Cholesky<f64, nalgebra::Dyn>> {
        let kkt = &h + &ata * rho;
        kkt.cholesky().ok_or_else(|| {
            Error::Linalg("splitting y-update matrix not positive definite".into())
        })
    };

    let mut rho = settings.rho_init.max(1e-6);
    let mut chol = factor(rho)?;
    let mut s = warm.map(|w| w.s.clone()).unwrap_or_else(|| DVector::zeros(rows));
    let mut u = warm.map(|w| w.u.clone()).unwrap_or_else(|| DVector::zeros(rows));
    if s.len() != rows || u.len() != rows {
        return Err(Error::Config("splitting warm start dimension mismatch".into()));
    }

    let soft = |v: f64, k: f64| -> f64 {
        if v > k {
            v - k
        } else if v < -k {
            v + k
        } else {
            0.0
        }
    };

    let mut y = DVector::zeros(m);
    let mut iterations = settings.max_iter;
    let mut converged = false;
    let mut refactors = 0usize;
    for it in 1..=settings.max_iter {
        let rhs = &at * &((&s - &u) * rho) - &c;
        y = chol.solve(&rhs);
        let v = &a * &y;
        let s_prev = s.clone();
        for i in 0..rows {
            let vi = v[i] + u[i];
            if i < r_l1 {
                s[i] = d_scaled[i] + soft(vi - d_scaled[i], w_scaled[i] / rho);
            } else {
                let j = i - r_l1;
                s[i] = vi.clamp(lo_scaled[j], hi_scaled[j]);
            }
        }
        for i in 0..rows {
            u[i] += v[i] - s[i];
        }

        if it % 10 == 0 || it == settings.max_iter {
            let prim = (&v - &s).amax();
            let dual = (&at * &(&s - &s_prev)).amax() * rho;
            let eps_prim = settings.eps_abs + settings.eps_rel * v.amax().max(s.amax());
            let eps_dual = settings.eps_abs + settings.eps_rel * (&at * &(&u * rho)).amax();
            if prim <= eps_prim && dual <= eps_dual {
                iterations = it;
                converged = true;
                break;
            }
            // frequent rho changes destabilize the dual sequence; adapt
            // rarely and only under a strong residual imbalance
            if settings.adaptive_rho && it % 200 == 0 && refactors < 10 {
                let ratio = (prim / eps_prim.max(1e-300)) / (dual / eps_dual.max(1e-300)).max(1e-300);
                if ratio > 25.0 || ratio < 0.04 {
                    let new_rho = (rho * ratio.sqrt()).clamp(1e-8, 1e8);
                    if (new_rho / rho - 1.0).abs() > 1e-3 {
                        // scaled duals must be rescaled with rho
                        u *= rho / new_rho;
                        rho = new_rho;
                        chol = factor(rho)?;
                        refactors += 1;
                    }
                }
            }
        }
    }
    if !converged {
        let prim = (&a * &y - &s).amax();
        return Err(Error::QpMaxIter {
            iterations: settings.max_iter,
            primal: prim,
            dual: f64::NAN,
        });
    }
    // report the feasible projection of the final iterate
    if r_g == p.m && p.feasible.g == DMatrix::identity(m, m) {
        for j in 0..m {
            y[j] = y[j].clamp(p.feasible.lo[j], p.feasible.hi[j]);
        }
    }
    let objective_value = p.objective(&y);
    Ok(SplitSolution {
        y,
        objective_value,
        iterations,
        warm: SplitWarm { s, u },
    })
}
