//! Flat key=value run configuration, plus literal parsers for vectors,
//! matrices, and distribution specs. All entry points take untrusted text
//! and must return errors rather than panic.

use std::collections::BTreeMap;

use nalgebra::{DMatrix, DVector};
use std::sync::Arc;

use crate::error::{Error, Result};
use crate::problem::{
    ConstraintSpec, CoupledProblem, DriftSpec, L1Piece, ObjectiveSpec, QuadPiece,
};
use crate::scenario::{DistributionSpec, Marginal};

/// Parsed configuration file: flat `key = value` lines, `#` comments,
/// duplicate keys rejected.
#[derive(Debug, Clone, Default)]
pub struct RawConfig {
    map: BTreeMap<String, String>,
}

pub fn parse_config(input: &str) -> Result<RawConfig> {
    let mut map = BTreeMap::new();
    for (lineno, raw) in input.lines().enumerate() {
        let line = match raw.split_once('#') {
            Some((head, _)) => head,
            None => raw,
        }
        .trim();
        if line.is_empty() {
            continue;
        }
        let (key, value) = line.split_once('=').ok_or_else(|| {
            Error::Config(format!("line {}: expected key = value", lineno + 1))
        })?;
        let key = key.trim();
        let value = value.trim();
        if key.is_empty() {
            return Err(Error::Config(format!("line {}: empty key", lineno + 1)));
        }
        if map.insert(key.to_string(), value.to_string()).is_some() {
            return Err(Error::Config(format!(
                "line {}: duplicate key '{key}'",
                lineno + 1
            )));
        }
    }
    Ok(RawConfig { map })
}

impl RawConfig {
    pub fn get(&self, key: &str) -> Option<&str> {
        self.map.get(key).map(String::as_str)
    }

    pub fn set(&mut self, key: &str, value: String) {
        self.map.insert(key.to_string(), value);
    }

    pub fn get_f64(&self, key: &str) -> Result<Option<f64>> {
        self.map
            .get(key)
            .map(|v| {
                v.parse::<f64>()
                    .map_err(|e| Error::Config(format!("key '{key}': {e}")))
            })
            .transpose()
    }

    pub fn get_usize(&self, key: &str) -> Result<Option<usize>> {
        self.map
            .get(key)
            .map(|v| {
                v.parse::<usize>()
                    .map_err(|e| Error::Config(format!("key '{key}': {e}")))
            })
            .transpose()
    }

    pub fn get_u64(&self, key: &str) -> Result<Option<u64>> {
        self.map
            .get(key)
            .map(|v| {
                v.parse::<u64>()
                    .map_err(|e| Error::Config(format!("key '{key}': {e}")))
            })
            .transpose()
    }

    /// Rejects keys outside the allowed set (prefix match for `problem.`).
    pub fn check_known(&self, allowed: &[&str]) -> Result<()> {
        for key in self.map.keys() {
            let ok = allowed.iter().any(|a| {
                if let Some(prefix) = a.strip_suffix('*') {
                    key.starts_with(prefix)
                } else {
                    key == a
                }
            });
            if !ok {
                return Err(Error::Config(format!("unknown config key '{key}'")));
            }
        }
        Ok(())
    }

    pub fn keys(&self) -> impl Iterator<Item = &str> {
        self.map.keys().map(String::as_str)
    }
}

/// `1, 2.5, -3e-1` → vector.
pub fn parse_vector(s: &str) -> Result<DVector<f64>> {
    let vals = s
        .split(',')
        .map(|tok| {
            tok.trim()
                .parse::<f64>()
                .map_err(|e| Error::Config(format!("bad number '{}': {e}", tok.trim())))
        })
        .collect::<Result<Vec<f64>>>()?;
    if vals.is_empty() {
        return Err(Error::Config("empty vector literal".into()));
    }
    Ok(DVector::from_vec(vals))
}

/// `1,0; 0,1` → matrix (rows separated by `;`).
pub fn parse_matrix(s: &str) -> Result<DMatrix<f64>> {
    let rows: Vec<DVector<f64>> = s
        .split(';')
        .map(parse_vector)
        .collect::<Result<Vec<_>>>()?;
    let ncols = rows[0].len();
    if rows.iter().any(|r| r.len() != ncols) {
        return Err(Error::Config("ragged matrix literal".into()));
    }
    let mut m = DMatrix::zeros(rows.len(), ncols);
    for (i, r) in rows.iter().enumerate() {
        m.row_mut(i).copy_from(&r.transpose());
    }
    Ok(m)
}

/// `normal(1, 0.01), uniform(-1, 1)` → distribution spec. The second
/// normal parameter is a variance.
pub fn parse_distribution(s: &str) -> Result<DistributionSpec> {
    let mut marginals = Vec::new();
    for part in split_top_level(s) {
        let part = part.trim();
        let (name, args) = part
            .split_once('(')
            .ok_or_else(|| Error::Config(format!("bad marginal '{part}'")))?;
        let args = args
            .strip_suffix(')')
            .ok_or_else(|| Error::Config(format!("unclosed marginal '{part}'")))?;
        let nums: Vec<f64> = args
            .split(',')
            .map(|t| {
                t.trim()
                    .parse::<f64>()
                    .map_err(|e| Error::Config(format!("bad marginal parameter '{t}': {e}")))
            })
            .collect::<Result<Vec<f64>>>()?;
        if nums.len() != 2 {
            return Err(Error::Config(format!(
                "marginal '{part}' needs exactly two parameters"
            )));
        }
        let m = match name.trim() {
            "normal" => Marginal::Normal {
                mean: nums[0],
                variance: nums[1],
            },
            "uniform" => Marginal::Uniform {
                lo: nums[0],
                hi: nums[1],
            },
            other => return Err(Error::Config(format!("unknown marginal '{other}'"))),
        };
        marginals.push(m);
    }
    if marginals.is_empty() {
        return Err(Error::Config("empty distribution spec".into()));
    }
    let spec = DistributionSpec { marginals };
    spec.validate()?;
    Ok(spec)
}

fn split_top_level(s: &str) -> Vec<&str> {
    let mut out = Vec::new();
    let mut depth = 0usize;
    let mut start = 0usize;
    for (i, ch) in s.char_indices() {
        match ch {
            '(' => depth += 1,
            ')' => depth = depth.saturating_sub(1),
            ',' if depth == 0 => {
                out.push(&s[start..i]);
                start = i + 1;
            }
            _ => {}
        }
    }
    out.push(&s[start..]);
    out
}

/// Builds a user-defined problem from `problem.*` keys. The format covers
/// deterministic coefficient matrices only (no scenario-dependent
/// coefficients):
///
/// ```text
/// problem.n = 2
/// problem.m = 2
/// problem.horizon = 1.0
/// problem.x0 = 1, 0
/// problem.drift.a = -1, 0; 0, -1      # dx = A x + B y + c
/// problem.drift.b = 1, 0; 0, 1
/// problem.drift.c = 0, 0
/// problem.quad.m = 1, 0; 0, 1         # + ||M y - b||^2
/// problem.quad.b = 0, 0
/// problem.l1.c = 1, 0; 0, 1           # + sum w_i |C y - d|_i
/// problem.l1.d = 0, 0
/// problem.l1.w = 1, 1
/// problem.box.lo = -1, -1
/// problem.box.hi = 1, 1
/// problem.kappa = 5.0
/// dist = normal(0, 1)
/// ```
pub fn build_custom_problem(cfg: &RawConfig) -> Result<(CoupledProblem, DistributionSpec)> {
    let n = cfg
        .get_usize("problem.n")?
        .ok_or_else(|| Error::Config("missing problem.n".into()))?;
    let m = cfg
        .get_usize("problem.m")?
        .ok_or_else(|| Error::Config("missing problem.m".into()))?;
    let horizon = cfg
        .get_f64("problem.horizon")?
        .ok_or_else(|| Error::Config("missing problem.horizon".into()))?;
    if n == 0 || horizon <= 0.0 {
        return Err(Error::Config(
            "problem.n must be >= 1 and problem.horizon > 0".into(),
        ));
    }
    let x0 = parse_vector(
        cfg.get("problem.x0")
            .ok_or_else(|| Error::Config("missing problem.x0".into()))?,
    )?;
    if x0.len() != n {
        return Err(Error::Config("problem.x0 length != problem.n".into()));
    }

    let need_dims = |mat: &DMatrix<f64>, r: usize, c: usize, key: &str| -> Result<()> {
        if mat.nrows() != r || mat.ncols() != c {
            return Err(Error::Config(format!(
                "{key} must be {r}x{c}, got {}x{}",
                mat.nrows(),
                mat.ncols()
            )));
        }
        Ok(())
    };

    let da = parse_matrix(
        cfg.get("problem.drift.a")
            .ok_or_else(|| Error::Config("missing problem.drift.a".into()))?,
    )?;
    need_dims(&da, n, n, "problem.drift.a")?;
    let db = match cfg.get("problem.drift.b") {
        Some(s) => {
            let b = parse_matrix(s)?;
            need_dims(&b, n, m, "problem.drift.b")?;
            b
        }
        None => DMatrix::zeros(n, m),
    };
    let dc = match cfg.get("problem.drift.c") {
        Some(s) => {
            let c = parse_vector(s)?;
            if c.len() != n {
                return Err(Error::Config("problem.drift.c length != n".into()));
            }
            c
        }
        None => DVector::zeros(n),
    };

    let drift = {
        let (da, db, dc) = (da.clone(), db, dc);
        DriftSpec {
            eval: Arc::new(move |_t, x: &DVector<f64>, y: &DVector<f64>, _xi| {
                &da * x + &db * y + &dc
            }),
            affine_in_y: true,
        }
    };

    let mut objective = ObjectiveSpec::default();
    if let Some(ms) = cfg.get("problem.quad.m") {
        let mm = parse_matrix(ms)?;
        if mm.ncols() != m {
            return Err(Error::Config("problem.quad.m column count != m".into()));
        }
        let bb = match cfg.get("problem.quad.b") {
            Some(s) => {
                let b = parse_vector(s)?;
                if b.len() != mm.nrows() {
                    return Err(Error::Config("problem.quad.b length mismatch".into()));
                }
                b
            }
            None => DVector::zeros(mm.nrows()),
        };
        objective.quad_terms.push(QuadPiece {
            m_of: Arc::new(move |_xi| mm.clone()),
            b_of: Arc::new(move |_t, _x, _xi| bb.clone()),
        });
    }
    if let Some(csrc) = cfg.get("problem.l1.c") {
        let cc = parse_matrix(csrc)?;
        if cc.ncols() != m {
            return Err(Error::Config("problem.l1.c column count != m".into()));
        }
        let r = cc.nrows();
        let dd = match cfg.get("problem.l1.d") {
            Some(s) => {
                let d = parse_vector(s)?;
                if d.len() != r {
                    return Err(Error::Config("problem.l1.d length mismatch".into()));
                }
                d
            }
            None => DVector::zeros(r),
        };
        // row weights fold into the rows: w |c'y - d| = |(wc)'y - wd|
        let (cc, dd) = match cfg.get("problem.l1.w") {
            Some(s) => {
                let w = parse_vector(s)?;
                if w.len() != r {
                    return Err(Error::Config("problem.l1.w length mismatch".into()));
                }
                if w.iter().any(|&v| v < 0.0) {
                    return Err(Error::Config("problem.l1.w must be nonnegative".into()));
                }
                let mut cc = cc;
                let mut dd = dd;
                for i in 0..r {
                    let wi = w[i];
                    cc.row_mut(i).scale_mut(wi);
                    dd[i] *= wi;
                }
                (cc, dd)
            }
            None => (cc, dd),
        };
        objective.l1_terms.push(L1Piece {
            c_of: Arc::new(move |_xi| cc.clone()),
            d_of: Arc::new(move |_t, _x, _xi| dd.clone()),
        });
    }
    if m > 0 && objective.quad_terms.is_empty() && objective.l1_terms.is_empty() {
        return Err(Error::Config(
            "control dimension m > 0 requires an objective (problem.quad.* or problem.l1.*)"
                .into(),
        ));
    }

    let mut constraints = ConstraintSpec::default();
    match (cfg.get("problem.box.lo"), cfg.get("problem.box.hi")) {
        (Some(lo), Some(hi)) => {
            let lo = parse_vector(lo)?;
            let hi = parse_vector(hi)?;
            if lo.len() != m || hi.len() != m {
                return Err(Error::Config("problem.box bounds length != m".into()));
            }
            if lo.iter().zip(hi.iter()).any(|(a, b)| a > b) {
                return Err(Error::Config("problem.box.lo exceeds problem.box.hi".into()));
            }
            constraints.box_bounds =
                Some((lo.iter().copied().collect(), hi.iter().copied().collect()));
        }
        (None, None) => {}
        _ => {
            return Err(Error::Config(
                "problem.box.lo and problem.box.hi must be given together".into(),
            ))
        }
    }

    let kappa = cfg.get_f64("problem.kappa")?;

    let dist = match cfg.get("dist") {
        Some(s) => parse_distribution(s)?,
        // deterministic coefficients make the scenario content irrelevant
        None => DistributionSpec {
            marginals: vec![Marginal::Uniform { lo: 0.0, hi: 1.0 }],
        },
    };
    let d = dist.marginals.len();

    let problem = CoupledProblem {
        n,
        m,
        d,
        horizon,
        x0,
        drift,
        objective,
        constraints,
        kappa,
    };
    Ok((problem, dist))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_comments_and_values() {
        let cfg = parse_config("# header\n h = 0.01  # step\nseed=7\n\nexample = ex61\n").unwrap();
        assert_eq!(cfg.get_f64("h").unwrap(), Some(0.01));
        assert_eq!(cfg.get_u64("seed").unwrap(), Some(7));
        assert_eq!(cfg.get("example"), Some("ex61"));
        assert_eq!(cfg.get("missing"), None);
    }

    #[test]
    fn rejects_duplicates_and_garbage() {
        assert!(parse_config("a = 1\na = 2\n").is_err());
        assert!(parse_config("just a line without equals\n").is_err());
        assert!(parse_config("= 3\n").is_err());
        let cfg = parse_config("h = zebra\n").unwrap();
        assert!(cfg.get_f64("h").is_err());
    }

    #[test]
    fn checks_known_keys() {
        let cfg = parse_config("h = 1\nproblem.n = 2\n").unwrap();
        assert!(cfg.check_known(&["h", "problem.*"]).is_ok());
        assert!(cfg.check_known(&["h"]).is_err());
    }

    #[test]
    fn vector_and_matrix_literals() {
        let v = parse_vector(" 1, -2.5, 3e-1 ").unwrap();
        assert_eq!(v.len(), 3);
        assert_eq!(v[1], -2.5);
        let m = parse_matrix("1, 0; 0, 1").unwrap();
        assert_eq!((m.nrows(), m.ncols()), (2, 2));
        assert!(parse_matrix("1, 0; 0").is_err());
        assert!(parse_vector("").is_err());
    }

    #[test]
    fn distribution_literals() {
        let d = parse_distribution("normal(1, 0.01), uniform(-1, 1)").unwrap();
        assert_eq!(d.marginals.len(), 2);
        assert!(parse_distribution("normal(1)").is_err());
        assert!(parse_distribution("cauchy(0, 1)").is_err());
        assert!(parse_distribution("normal(1, 0.01").is_err());
    }

    #[test]
    fn custom_problem_round_trip() {
        let text = "\
problem.n = 2
problem.m = 2
problem.horizon = 1.0
problem.x0 = 1, 0
problem.drift.a = -1, 0; 0, -1
problem.drift.b = 1, 0; 0, 1
problem.quad.m = 1, 0; 0, 1
problem.quad.b = 0.5, -0.5
problem.box.lo = -1, -1
problem.box.hi = 1, 1
problem.kappa = 2.0
";
        let cfg = parse_config(text).unwrap();
        let (problem, dist) = build_custom_problem(&cfg).unwrap();
        assert_eq!(problem.n, 2);
        assert_eq!(problem.kappa, Some(2.0));
        assert_eq!(dist.marginals.len(), 1);
        let report = crate::problem::validate_problem(&problem);
        assert!(report.ok(), "{:?}", report.issues);
    }

    #[test]
    fn custom_problem_rejects_bad_dims() {
        let cfg = parse_config(
            "problem.n = 2\nproblem.m = 1\nproblem.horizon = 1\nproblem.x0 = 1\nproblem.drift.a = 1\n",
        )
        .unwrap();
        assert!(build_custom_problem(&cfg).is_err());
    }
}
