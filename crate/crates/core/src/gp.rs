//! Per-coordinate Gaussian-process regression on noisy state observations,
//! with optional derivative observations through the differentiated
//! squared-exponential kernel, and joint posterior path sampling.
//!
//! A sampled path is one joint Gaussian draw of (state, derivative) over the
//! whole query grid, so it can serve as a single fixed scenario for sample
//! average approximation.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};

use crate::error::{Error, Result};
use crate::scenario::{derive_stream, seeded_rng, standard_normal};

#[derive(Debug, Clone)]
pub struct Observations {
    pub times: Vec<f64>,
    /// State measurements, one vector in R^n per time.
    pub y: Vec<DVector<f64>>,
    /// Optional derivative measurements aligned with times[0..z.len()].
    pub z: Option<Vec<DVector<f64>>>,
    /// Measurement noise variance per coordinate.
    pub noise_var: Vec<f64>,
    /// Derivative measurement noise variance per coordinate, when z given.
    pub deriv_noise_var: Option<Vec<f64>>,
}

impl Observations {
    pub fn state_dim(&self) -> usize {
        self.y.first().map_or(0, |v| v.len())
    }

    pub fn validate(&self) -> Result<()> {
        if self.y.len() != self.times.len() || self.times.is_empty() {
            return Err(Error::Config(
                "observation count must match times and be nonzero".into(),
            ));
        }
        if self.times.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::Config(
                "observation times must be strictly increasing".into(),
            ));
        }
        let n = self.state_dim();
        if self.y.iter().any(|v| v.len() != n) || self.noise_var.len() != n {
            return Err(Error::Config("observation dimensions inconsistent".into()));
        }
        if let Some(z) = &self.z {
            if z.len() > self.times.len() || z.iter().any(|v| v.len() != n) {
                return Err(Error::Config("derivative record inconsistent".into()));
            }
            if self.deriv_noise_var.as_ref().map_or(true, |v| v.len() != n) {
                return Err(Error::Config(
                    "derivative observations require deriv_noise_var per coordinate".into(),
                ));
            }
        }
        Ok(())
    }
}

/// Fills Z with first-order differences (Y_{i+1} - Y_i) / (t_{i+1} - t_i);
/// the last time is dropped from the derivative record, and the propagated
/// difference-noise variance 2 sigma^2 / dt^2 is attached.
pub fn difference_derivatives(obs: &Observations) -> Result<Observations> {
    obs.validate()?;
    if obs.z.is_some() {
        return Err(Error::Config("derivative record already present".into()));
    }
    let n_t = obs.times.len();
    if n_t < 2 {
        return Err(Error::Config(
            "need at least two observations to difference".into(),
        ));
    }
    let mut z = Vec::with_capacity(n_t - 1);
    for i in 0..n_t - 1 {
        let dt = obs.times[i + 1] - obs.times[i];
        z.push((&obs.y[i + 1] - &obs.y[i]) / dt);
    }
    let mean_dt = (obs.times[n_t - 1] - obs.times[0]) / (n_t - 1) as f64;
    let deriv_noise_var = obs
        .noise_var
        .iter()
        .map(|&s2| 2.0 * s2 / (mean_dt * mean_dt))
        .collect();
    Ok(Observations {
        times: obs.times.clone(),
        y: obs.y.clone(),
        z: Some(z),
        noise_var: obs.noise_var.clone(),
        deriv_noise_var: Some(deriv_noise_var),
    })
}

#[derive(Debug, Clone)]
pub struct GPConfig {
    /// Lengthscale candidates for the marginal-likelihood grid search.
    pub lengthscales: Vec<f64>,
    /// Signal-variance candidates (log-spaced by default).
    pub signal_variances: Vec<f64>,
    pub jitter: f64,
}

impl Default for GPConfig {
    fn default() -> Self {
        GPConfig {
            lengthscales: vec![0.25, 0.5, 1.0, 2.0, 4.0],
            signal_variances: vec![0.1, 1.0, 10.0, 100.0, 1e3, 1e4, 1e5],
            jitter: 1e-10,
        }
    }
}

/// Squared-exponential kernel value and its t/t' derivatives.
fn kern(sf2: f64, ell: f64, t: f64, s: f64) -> f64 {
    let d = t - s;
    sf2 * (-d * d / (2.0 * ell * ell)).exp()
}

/// d k / d t'  (derivative w.r.t. the second argument)
fn kern_d2(sf2: f64, ell: f64, t: f64, s: f64) -> f64 {
    let d = t - s;
    kern(sf2, ell, t, s) * d / (ell * ell)
}

/// d^2 k / (d t d t')
fn kern_d1d2(sf2: f64, ell: f64, t: f64, s: f64) -> f64 {
    let d = t - s;
    kern(sf2, ell, t, s) * (1.0 / (ell * ell) - d * d / (ell * ell * ell * ell))
}

struct CoordModel {
    lengthscale: f64,
    signal_var: f64,
    /// times of value observations, then times of derivative observations
    v_times: Vec<f64>,
    d_times: Vec<f64>,
    chol: Cholesky<f64, Dyn>,
    /// K^{-1} (obs - 0), for posterior means
    alpha: DVector<f64>,
}

pub struct GPModel {
    coords: Vec<CoordModel>,
    pub train_min: f64,
    pub train_max: f64,
    /// Hard extrapolation margin beyond the training span.
    pub margin: f64,
}

impl GPModel {
    pub fn state_dim(&self) -> usize {
        self.coords.len()
    }

    pub fn hyperparameters(&self, coord: usize) -> (f64, f64) {
        (
            self.coords[coord].lengthscale,
            self.coords[coord].signal_var,
        )
    }
}

/// Training covariance of the joint (values, derivatives) vector.
fn train_covariance(
    sf2: f64,
    ell: f64,
    v_times: &[f64],
    d_times: &[f64],
    noise_v: f64,
    noise_d: f64,
    jitter: f64,
) -> DMatrix<f64> {
    let nv = v_times.len();
    let nd = d_times.len();
    let dim = nv + nd;
    let mut k = DMatrix::zeros(dim, dim);
    for i in 0..nv {
        for j in 0..nv {
            k[(i, j)] = kern(sf2, ell, v_times[i], v_times[j]);
        }
    }
    for i in 0..nv {
        for j in 0..nd {
            let v = kern_d2(sf2, ell, v_times[i], d_times[j]);
            k[(i, nv + j)] = v;
            k[(nv + j, i)] = v;
        }
    }
    for i in 0..nd {
        for j in 0..nd {
            k[(nv + i, nv + j)] = kern_d1d2(sf2, ell, d_times[i], d_times[j]);
        }
    }
    for i in 0..nv {
        k[(i, i)] += noise_v + jitter * sf2.max(1.0);
    }
    for i in 0..nd {
        k[(nv + i, nv + i)] += noise_d + jitter * sf2.max(1.0);
    }
    k
}

/// Factorizes with the smallest diagonal shift that succeeds, starting from
/// none, so noiseless interpolation stays as unbiased as roundoff allows.
fn cholesky_with_escalation(mut k: DMatrix<f64>, scale: f64) -> Result<Cholesky<f64, Dyn>> {
    let mut applied = 0.0;
    for rel in [0.0, 1e-14, 1e-12, 1e-10, 1e-8, 1e-6, 1e-4] {
        let add = rel * scale;
        if add > 0.0 || applied == 0.0 {
            for i in 0..k.nrows() {
                k[(i, i)] += add - applied;
            }
            applied = add;
        }
        if let Some(c) = k.clone().cholesky() {
            return Ok(c);
        }
    }
    Err(Error::Linalg(
        "GP covariance not positive definite after jitter escalation".into(),
    ))
}

/// Fits one GP per state coordinate by grid search over (lengthscale,
/// signal variance), maximizing the log marginal likelihood with the noise
/// variance held at its known value.
pub fn fit_gp(obs: &Observations, cfg: &GPConfig) -> Result<GPModel> {
    obs.validate()?;
    let n = obs.state_dim();
    let v_times = obs.times.clone();
    let (d_times, nd) = match &obs.z {
        Some(z) => (obs.times[..z.len()].to_vec(), z.len()),
        None => (Vec::new(), 0),
    };
    let mut coords = Vec::with_capacity(n);
    for j in 0..n {
        let nv = v_times.len();
        let mut target = DVector::zeros(nv + nd);
        for i in 0..nv {
            target[i] = obs.y[i][j];
        }
        if let Some(z) = &obs.z {
            for i in 0..nd {
                target[nv + i] = z[i][j];
            }
        }
        let noise_d = obs
            .deriv_noise_var
            .as_ref()
            .map_or(0.0, |v| v[j]);
        let mut best: Option<(f64, f64, f64)> = None; // (loglik, ell, sf2)
        for &ell in &cfg.lengthscales {
            for &sf2 in &cfg.signal_variances {
                let k = train_covariance(
                    sf2,
                    ell,
                    &v_times,
                    &d_times,
                    obs.noise_var[j],
                    noise_d,
                    cfg.jitter,
                );
                let Some(chol) = k.cholesky() else { continue };
                let alpha = chol.solve(&target);
                let log_det: f64 = chol.l().diagonal().iter().map(|d| d.ln()).sum::<f64>() * 2.0;
                let dim = target.len() as f64;
                let ll = -0.5 * target.dot(&alpha)
                    - 0.5 * log_det
                    - 0.5 * dim * (2.0 * std::f64::consts::PI).ln();
                if best.map_or(true, |(b, _, _)| ll > b) {
                    best = Some((ll, ell, sf2));
                }
            }
        }
        let (_, ell, sf2) = best.ok_or_else(|| {
            Error::Linalg("no hyperparameter candidate admitted a factorization".into())
        })?;
        // final model: no preemptive jitter, escalate only if needed
        let k = train_covariance(sf2, ell, &v_times, &d_times, obs.noise_var[j], noise_d, 0.0);
        let scale = k.diagonal().iter().fold(0.0f64, |a, &v| a.max(v));
        let chol = cholesky_with_escalation(k, scale)?;
        let alpha = chol.solve(&target);
        coords.push(CoordModel {
            lengthscale: ell,
            signal_var: sf2,
            v_times: v_times.clone(),
            d_times: d_times.clone(),
            chol,
            alpha,
        });
    }
    let train_min = v_times[0];
    let train_max = *v_times.last().unwrap();
    let margin = if v_times.len() > 1 {
        v_times
            .windows(2)
            .map(|w| w[1] - w[0])
            .fold(0.0f64, f64::max)
    } else {
        0.0
    };
    Ok(GPModel {
        coords,
        train_min,
        train_max,
        margin,
    })
}

fn check_grid(model: &GPModel, grid: &[f64]) -> Result<()> {
    let lo = model.train_min - model.margin - 1e-12;
    let hi = model.train_max + model.margin + 1e-12;
    for &t in grid {
        if t < lo || t > hi {
            return Err(Error::Domain(format!(
                "query time {t} outside training span [{lo}, {hi}]"
            )));
        }
    }
    Ok(())
}

/// Cross-covariance rows of a joint (value, derivative) query at `t` against
/// the training inputs of one coordinate model.
fn cross_rows(c: &CoordModel, t: f64) -> (DVector<f64>, DVector<f64>) {
    let nv = c.v_times.len();
    let nd = c.d_times.len();
    let mut kv = DVector::zeros(nv + nd);
    let mut kd = DVector::zeros(nv + nd);
    for (i, &s) in c.v_times.iter().enumerate() {
        kv[i] = kern(c.signal_var, c.lengthscale, t, s);
        // cov(f'(t), f(s)) = d/dt k(t, s) = d k / d t'(s, t) by symmetry
        kd[i] = kern_d2(c.signal_var, c.lengthscale, s, t);
    }
    for (i, &s) in c.d_times.iter().enumerate() {
        kv[nv + i] = kern_d2(c.signal_var, c.lengthscale, t, s);
        kd[nv + i] = kern_d1d2(c.signal_var, c.lengthscale, t, s);
    }
    (kv, kd)
}

#[derive(Debug, Clone)]
pub struct PosteriorMoments {
    pub grid: Vec<f64>,
    /// mean[j][i]: coordinate j at grid point i — likewise for the others
    pub mean: Vec<Vec<f64>>,
    pub var: Vec<Vec<f64>>,
    pub dmean: Vec<Vec<f64>>,
    pub dvar: Vec<Vec<f64>>,
}

impl PosteriorMoments {
    pub fn to_csv(&self) -> String {
        let n = self.mean.len();
        let mut out = String::from("t");
        for j in 1..=n {
            out.push_str(&format!(",mean_{j},var_{j},dmean_{j},dvar_{j}"));
        }
        out.push('\n');
        for (i, t) in self.grid.iter().enumerate() {
            out.push_str(&format!("{t:.16e}"));
            for j in 0..n {
                out.push_str(&format!(
                    ",{:.16e},{:.16e},{:.16e},{:.16e}",
                    self.mean[j][i], self.var[j][i], self.dmean[j][i], self.dvar[j][i]
                ));
            }
            out.push('\n');
        }
        out
    }
}

/// Pointwise posterior means and variances for states and derivatives; the
/// derivative moments come from the differentiated kernel.
pub fn posterior_moments(model: &GPModel, grid: &[f64]) -> Result<PosteriorMoments> {
    check_grid(model, grid)?;
    let n = model.state_dim();
    let g = grid.len();
    let mut mean = vec![vec![0.0; g]; n];
    let mut var = vec![vec![0.0; g]; n];
    let mut dmean = vec![vec![0.0; g]; n];
    let mut dvar = vec![vec![0.0; g]; n];
    for (j, c) in model.coords.iter().enumerate() {
        for (i, &t) in grid.iter().enumerate() {
            let (kv, kd) = cross_rows(c, t);
            mean[j][i] = kv.dot(&c.alpha);
            dmean[j][i] = kd.dot(&c.alpha);
            let sv = c.chol.solve(&kv);
            let sd = c.chol.solve(&kd);
            var[j][i] = (kern(c.signal_var, c.lengthscale, t, t) - kv.dot(&sv)).max(0.0);
            dvar[j][i] =
                (kern_d1d2(c.signal_var, c.lengthscale, t, t) - kd.dot(&sd)).max(0.0);
        }
    }
    Ok(PosteriorMoments {
        grid: grid.to_vec(),
        mean,
        var,
        dmean,
        dvar,
    })
}

#[derive(Debug, Clone)]
pub struct PosteriorPathSet {
    pub grid: Vec<f64>,
    pub nu: usize,
    pub seed: u64,
    /// states[l] is a (grid length x n) matrix; likewise derivs[l].
    pub states: Vec<DMatrix<f64>>,
    pub derivs: Vec<DMatrix<f64>>,
}

/// Draws `nu` joint posterior sample paths of (state, derivative) over the
/// whole grid. Each path is one draw of the full joint Gaussian, fixed
/// before any integration begins.
pub fn sample_posterior_paths(
    model: &GPModel,
    grid: &[f64],
    nu: usize,
    seed: u64,
) -> Result<PosteriorPathSet> {
    check_grid(model, grid)?;
    if nu == 0 {
        return Err(Error::Config("path count nu must be >= 1".into()));
    }
    let n = model.state_dim();
    let g = grid.len();
    let mut states = vec![DMatrix::zeros(g, n); nu];
    let mut derivs = vec![DMatrix::zeros(g, n); nu];
    for (j, c) in model.coords.iter().enumerate() {
        // joint posterior over [values(grid); derivatives(grid)]
        let dim = 2 * g;
        let mut mean = DVector::zeros(dim);
        let mut cross = DMatrix::zeros(dim, c.alpha.len());
        for (i, &t) in grid.iter().enumerate() {
            let (kv, kd) = cross_rows(c, t);
            mean[i] = kv.dot(&c.alpha);
            mean[g + i] = kd.dot(&c.alpha);
            cross.row_mut(i).copy_from(&kv.transpose());
            cross.row_mut(g + i).copy_from(&kd.transpose());
        }
        let mut prior = DMatrix::zeros(dim, dim);
        for (a, &ta) in grid.iter().enumerate() {
            for (b, &tb) in grid.iter().enumerate() {
                prior[(a, b)] = kern(c.signal_var, c.lengthscale, ta, tb);
                prior[(a, g + b)] = kern_d2(c.signal_var, c.lengthscale, ta, tb);
                prior[(g + a, b)] = kern_d2(c.signal_var, c.lengthscale, tb, ta);
                prior[(g + a, g + b)] = kern_d1d2(c.signal_var, c.lengthscale, ta, tb);
            }
        }
        let solved = c.chol.solve(&cross.transpose());
        let mut sigma = prior - &cross * solved;
        // symmetrize roundoff
        for a in 0..dim {
            for b in (a + 1)..dim {
                let v = 0.5 * (sigma[(a, b)] + sigma[(b, a)]);
                sigma[(a, b)] = v;
                sigma[(b, a)] = v;
            }
        }
        let scale = sigma.diagonal().iter().fold(0.0f64, |a, &v| a.max(v.abs()));
        let mut rng = seeded_rng(derive_stream(seed, "gp-path", j as u64));
        if scale <= 1e-9 * c.signal_var.max(1.0) {
            // numerically degenerate posterior: every path is the mean
            for l in 0..nu {
                for i in 0..g {
                    states[l][(i, j)] = mean[i];
                    derivs[l][(i, j)] = mean[g + i];
                }
            }
            continue;
        }
        let chol = cholesky_with_escalation(sigma, scale)?;
        let l_mat = chol.l();
        for path in 0..nu {
            let z = DVector::from_fn(dim, |_, _| standard_normal(&mut rng));
            let draw = &mean + &l_mat * z;
            for i in 0..g {
                states[path][(i, j)] = draw[i];
                derivs[path][(i, j)] = draw[g + i];
            }
        }
    }
    Ok(PosteriorPathSet {
        grid: grid.to_vec(),
        nu,
        seed,
        states,
        derivs,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn obs_from_fn(f: impl Fn(f64) -> f64, times: &[f64], noise_var: f64) -> Observations {
        Observations {
            times: times.to_vec(),
            y: times.iter().map(|&t| DVector::from_vec(vec![f(t)])).collect(),
            z: None,
            noise_var: vec![noise_var],
            deriv_noise_var: None,
        }
    }

    #[test]
    fn differences_of_linear_data_are_exact() {
        let times: Vec<f64> = (0..10).map(|i| 0.1 * i as f64).collect();
        let obs = obs_from_fn(|t| 3.0 * t + 1.0, &times, 0.0);
        let d = difference_derivatives(&obs).unwrap();
        for z in d.z.as_ref().unwrap() {
            assert!((z[0] - 3.0).abs() < 1e-12);
        }
        assert_eq!(d.z.as_ref().unwrap().len(), 9);
    }

    #[test]
    fn differences_of_quadratic_follow_identity() {
        let dt = 0.05;
        let times: Vec<f64> = (0..20).map(|i| dt * i as f64).collect();
        let obs = obs_from_fn(|t| t * t, &times, 0.0);
        let d = difference_derivatives(&obs).unwrap();
        for (i, z) in d.z.as_ref().unwrap().iter().enumerate() {
            let expected = 2.0 * times[i] + dt;
            assert!((z[0] - expected).abs() < 1e-12);
        }
    }

    #[test]
    fn difference_noise_propagation() {
        let times: Vec<f64> = (0..126).map(|i| 0.04 * i as f64).collect();
        let obs = obs_from_fn(|t| t, &times, 0.4);
        let d = difference_derivatives(&obs).unwrap();
        let v = d.deriv_noise_var.unwrap()[0];
        assert!((v - 500.0).abs() / 500.0 < 1e-9, "got {v}");
    }

    #[test]
    fn single_point_needs_neighbor() {
        let obs = obs_from_fn(|t| t, &[0.0], 0.0);
        assert!(difference_derivatives(&obs).is_err());
    }

    #[test]
    fn noiseless_interpolation() {
        let times: Vec<f64> = (0..20).map(|i| 0.25 * i as f64).collect();
        let obs = obs_from_fn(|t| (t * 0.8).sin(), &times, 0.0);
        let model = fit_gp(&obs, &GPConfig::default()).unwrap();
        let m = posterior_moments(&model, &times).unwrap();
        for (i, &t) in times.iter().enumerate() {
            assert!(
                (m.mean[0][i] - (t * 0.8).sin()).abs() < 1e-6,
                "t = {t}: {} vs {}",
                m.mean[0][i],
                (t * 0.8).sin()
            );
            assert!(m.var[0][i] <= 1e-10);
        }
    }

    #[test]
    fn derivative_mean_matches_finite_difference() {
        let times: Vec<f64> = (0..26).map(|i| 0.2 * i as f64).collect();
        let obs = obs_from_fn(|t| t.sin(), &times, 1e-6);
        let model = fit_gp(&obs, &GPConfig::default()).unwrap();
        let interior: Vec<f64> = (5..21).map(|i| 0.2 * i as f64).collect();
        let m = posterior_moments(&model, &interior).unwrap();
        let eps = 1e-5;
        for (i, &t) in interior.iter().enumerate() {
            let lo = posterior_moments(&model, &[t - eps]).unwrap().mean[0][0];
            let hi = posterior_moments(&model, &[t + eps]).unwrap().mean[0][0];
            let fd = (hi - lo) / (2.0 * eps);
            let rel = (m.dmean[0][i] - fd).abs() / (1.0 + fd.abs());
            assert!(rel <= 1e-3, "t = {t}: dmean {} vs fd {}", m.dmean[0][i], fd);
        }
    }

    #[test]
    fn symmetric_even_data_has_zero_derivative_at_center() {
        let times: Vec<f64> = (-10..=10).map(|i| i as f64 * 0.2).collect();
        let obs = obs_from_fn(|t| t * t, &times, 1e-8);
        let model = fit_gp(&obs, &GPConfig::default()).unwrap();
        let m = posterior_moments(&model, &[0.0]).unwrap();
        assert!(m.dmean[0][0].abs() < 1e-8, "got {}", m.dmean[0][0]);
    }

    #[test]
    fn far_field_reverts_to_prior_mean() {
        let times = [0.0, 0.1, 0.2];
        let obs = obs_from_fn(|_| 5.0, &times, 1e-4);
        let mut cfg = GPConfig::default();
        cfg.lengthscales = vec![0.25];
        cfg.signal_variances = vec![1.0];
        let model = fit_gp(&obs, &cfg).unwrap();
        // widen the allowed margin for this far-field probe
        let mut model = model;
        model.margin = 10.0;
        let m = posterior_moments(&model, &[0.2 + 2.5]).unwrap(); // 10 lengthscales away
        assert!(m.mean[0][0].abs() <= 1e-6, "got {}", m.mean[0][0]);
    }

    #[test]
    fn extrapolation_margin_enforced() {
        let times: Vec<f64> = (0..5).map(|i| i as f64).collect();
        let obs = obs_from_fn(|t| t, &times, 0.01);
        let model = fit_gp(&obs, &GPConfig::default()).unwrap();
        assert!(posterior_moments(&model, &[4.5]).is_ok()); // within one spacing
        assert!(posterior_moments(&model, &[5.5]).is_err());
    }

    #[test]
    fn paths_deterministic_and_mean_consistent() {
        let times: Vec<f64> = (0..15).map(|i| 0.3 * i as f64).collect();
        let obs = obs_from_fn(|t| (t).cos(), &times, 0.05);
        let model = fit_gp(&obs, &GPConfig::default()).unwrap();
        let grid: Vec<f64> = (1..14).map(|i| 0.3 * i as f64 + 0.1).collect();
        let p1 = sample_posterior_paths(&model, &grid, 64, 5).unwrap();
        let p2 = sample_posterior_paths(&model, &grid, 64, 5).unwrap();
        assert_eq!(p1.states, p2.states);
        assert_eq!(p1.derivs, p2.derivs);

        let m = posterior_moments(&model, &grid).unwrap();
        let big = sample_posterior_paths(&model, &grid, 10_000, 5).unwrap();
        for (i, _) in grid.iter().enumerate() {
            let avg: f64 =
                big.states.iter().map(|s| s[(i, 0)]).sum::<f64>() / big.nu as f64;
            let tol = 4.0 * (m.var[0][i].sqrt() / (big.nu as f64).sqrt()) + 1e-9;
            assert!(
                (avg - m.mean[0][i]).abs() <= tol,
                "grid point {i}: |{avg} - {}| > {tol}",
                m.mean[0][i]
            );
        }
    }

    #[test]
    fn degenerate_posterior_paths_equal_mean() {
        let times: Vec<f64> = (0..30).map(|i| 0.1 * i as f64).collect();
        let obs = obs_from_fn(|t| 2.0 * t, &times, 0.0);
        let model = fit_gp(&obs, &GPConfig::default()).unwrap();
        let grid: Vec<f64> = times[5..25].to_vec();
        let m = posterior_moments(&model, &grid).unwrap();
        let paths = sample_posterior_paths(&model, &grid, 8, 17).unwrap();
        for path in &paths.states {
            for (i, _) in grid.iter().enumerate() {
                assert!(
                    (path[(i, 0)] - m.mean[0][i]).abs() < 1e-6,
                    "path deviates at noiseless data point"
                );
            }
        }
    }
}
