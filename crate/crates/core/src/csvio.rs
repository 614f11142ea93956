//! CSV input for observation data (untrusted input: errors, never panics)
//! and small helpers for writing result files.

use nalgebra::DVector;

use crate::error::{Error, Result};
use crate::gp::Observations;

/// Parses observation data of the form
///
/// ```text
/// t,y_1,...,y_n[,z_1,...,z_n]
/// 0.0,1.0,0.0
/// 0.04,1.04,0.02
/// ```
///
/// The header is mandatory and decides whether derivative columns are
/// present. Times must be strictly increasing. `noise_var` is attached to
/// every coordinate (and, when derivatives are present, to the derivative
/// noise as well).
pub fn parse_observations(input: &str, noise_var: f64) -> Result<Observations> {
    if !(noise_var.is_finite() && noise_var >= 0.0) {
        return Err(Error::Config("noise variance must be finite and >= 0".into()));
    }
    let mut lines = input.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
    let (_, header) = lines
        .next()
        .ok_or_else(|| Error::Parse("empty observations file".into()))?;
    let cols: Vec<&str> = header.split(',').map(str::trim).collect();
    if cols.first() != Some(&"t") {
        return Err(Error::Parse("header must start with column 't'".into()));
    }
    let n_y = cols.iter().filter(|c| c.starts_with("y_")).count();
    let n_z = cols.iter().filter(|c| c.starts_with("z_")).count();
    if n_y == 0 {
        return Err(Error::Parse("header has no y_* columns".into()));
    }
    if n_z != 0 && n_z != n_y {
        return Err(Error::Parse(format!(
            "derivative columns z_* must match state columns: {n_z} vs {n_y}"
        )));
    }
    let expected = 1 + n_y + n_z;
    if cols.len() != expected {
        return Err(Error::Parse(format!(
            "header has {} columns; expected t,y_1..y_{n_y}{}",
            cols.len(),
            if n_z > 0 {
                format!(",z_1..z_{n_z}")
            } else {
                String::new()
            }
        )));
    }
    for (j, name) in cols.iter().enumerate().skip(1) {
        let want = if j <= n_y {
            format!("y_{j}")
        } else {
            format!("z_{}", j - n_y)
        };
        if *name != want {
            return Err(Error::Parse(format!(
                "column {} named '{name}'; expected '{want}'",
                j + 1
            )));
        }
    }

    let mut times = Vec::new();
    let mut y = Vec::new();
    let mut z = Vec::new();
    for (lineno, line) in lines {
        let toks: Vec<&str> = line.split(',').map(str::trim).collect();
        if toks.len() != expected {
            return Err(Error::Parse(format!(
                "line {}: {} fields, expected {expected}",
                lineno + 1,
                toks.len()
            )));
        }
        let mut nums = Vec::with_capacity(expected);
        for tok in &toks {
            let v: f64 = tok
                .parse()
                .map_err(|e| Error::Parse(format!("line {}: bad number '{tok}': {e}", lineno + 1)))?;
            if !v.is_finite() {
                return Err(Error::Parse(format!(
                    "line {}: non-finite value '{tok}'",
                    lineno + 1
                )));
            }
            nums.push(v);
        }
        if let Some(&last) = times.last() {
            if nums[0] <= last {
                return Err(Error::Parse(format!(
                    "line {}: times must be strictly increasing ({} after {})",
                    lineno + 1,
                    nums[0],
                    last
                )));
            }
        }
        times.push(nums[0]);
        y.push(DVector::from_row_slice(&nums[1..=n_y]));
        if n_z > 0 {
            z.push(DVector::from_row_slice(&nums[1 + n_y..]));
        }
    }
    if times.len() < 2 {
        return Err(Error::Parse("need at least two observation rows".into()));
    }
    let obs = Observations {
        times,
        y,
        z: if n_z > 0 { Some(z) } else { None },
        noise_var: vec![noise_var; n_y],
        deriv_noise_var: if n_z > 0 {
            Some(vec![noise_var; n_y])
        } else {
            None
        },
    };
    obs.validate()?;
    Ok(obs)
}

/// Formats observations back out (sixteen-digit floats, same schema the
/// parser accepts).
pub fn observations_to_csv(obs: &Observations) -> String {
    let n = obs.state_dim();
    let mut out = String::from("t");
    for j in 1..=n {
        out.push_str(&format!(",y_{j}"));
    }
    if obs.z.is_some() {
        for j in 1..=n {
            out.push_str(&format!(",z_{j}"));
        }
    }
    out.push('\n');
    for (i, &t) in obs.times.iter().enumerate() {
        out.push_str(&format!("{t:.16e}"));
        for v in obs.y[i].iter() {
            out.push_str(&format!(",{v:.16e}"));
        }
        if let Some(z) = &obs.z {
            for v in z[i].iter() {
                out.push_str(&format!(",{v:.16e}"));
            }
        }
        out.push('\n');
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_value_only_and_derivative_files() {
        let vals = "t,y_1,y_2\n0,1,0\n0.1,1.1,0.2\n0.2,1.2,0.4\n";
        let obs = parse_observations(vals, 0.4).unwrap();
        assert_eq!(obs.times.len(), 3);
        assert_eq!(obs.state_dim(), 2);
        assert!(obs.z.is_none());

        let withz = "t,y_1,z_1\n0,1,1\n0.5,1.6,1.6\n";
        let obs = parse_observations(withz, 0.1).unwrap();
        assert_eq!(obs.z.as_ref().unwrap().len(), 2);
        assert_eq!(obs.deriv_noise_var.as_ref().unwrap(), &vec![0.1]);
    }

    #[test]
    fn rejects_malformed_input() {
        assert!(parse_observations("", 0.1).is_err());
        assert!(parse_observations("a,b\n1,2\n", 0.1).is_err());
        assert!(parse_observations("t,y_1\n0\n", 0.1).is_err());
        assert!(parse_observations("t,y_1\n0,nanana\n1,2\n", 0.1).is_err());
        assert!(parse_observations("t,y_1\n0,inf\n1,2\n", 0.1).is_err());
        assert!(parse_observations("t,y_1,z_1,z_2\n0,1,2,3\n", 0.1).is_err());
        assert!(parse_observations("t,y_2\n0,1\n1,2\n", 0.1).is_err());
        // single row is not enough
        assert!(parse_observations("t,y_1\n0,1\n", 0.1).is_err());
    }

    #[test]
    fn rejects_non_increasing_times() {
        let bad = "t,y_1\n0,1\n0.5,2\n0.5,3\n";
        assert!(parse_observations(bad, 0.1).is_err());
        let bad = "t,y_1\n0.5,1\n0.2,2\n";
        assert!(parse_observations(bad, 0.1).is_err());
    }

    #[test]
    fn round_trips_through_formatter() {
        let src = "t,y_1,z_1\n0,1,1\n0.25,1.25,0.9\n0.5,1.7,1.1\n";
        let obs = parse_observations(src, 0.2).unwrap();
        let text = observations_to_csv(&obs);
        let back = parse_observations(&text, 0.2).unwrap();
        assert_eq!(obs.times, back.times);
        assert_eq!(obs.y, back.y);
        assert_eq!(obs.z, back.z);
    }
}
