//! Seeded generation of i.i.d. scenario sets for sample average approximation.
//!
//! Scenario sets are reproducible across platforms: draws come from a
//! ChaCha12 stream cipher keyed by a 64-bit seed (expanded with splitmix64),
//! uniforms are `next_u64 >> 11` scaled by 2^-53, and normal deviates use the
//! inverse-CDF transform (Acklam's rational approximation). None of this
//! depends on platform-default generators, so a fixed `(spec, nu, seed)`
//! triple yields bit-identical scenarios everywhere.

use nalgebra::DVector;
use rand_chacha::ChaCha12Rng;
use rand_core::{RngCore, SeedableRng};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

/// Per-coordinate marginal distribution; coordinates are independent.
#[derive(Debug, Clone, PartialEq)]
pub enum Marginal {
    /// Normal with the given mean and *variance* (N(1, 0.01) has std 0.1).
    Normal { mean: f64, variance: f64 },
    Uniform { lo: f64, hi: f64 },
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct DistributionSpec {
    pub marginals: Vec<Marginal>,
}

impl DistributionSpec {
    pub fn new(marginals: Vec<Marginal>) -> Self {
        Self { marginals }
    }

    pub fn dim(&self) -> usize {
        self.marginals.len()
    }

    pub fn validate(&self) -> Result<()> {
        for (i, m) in self.marginals.iter().enumerate() {
            match *m {
                Marginal::Normal { variance, .. } => {
                    if !(variance > 0.0) || !variance.is_finite() {
                        return Err(Error::Config(format!(
                            "marginal {i}: Normal variance must be positive, got {variance}"
                        )));
                    }
                }
                Marginal::Uniform { lo, hi } => {
                    if !(lo < hi) || !lo.is_finite() || !hi.is_finite() {
                        return Err(Error::Config(format!(
                            "marginal {i}: Uniform requires lo < hi, got [{lo}, {hi}]"
                        )));
                    }
                }
            }
        }
        Ok(())
    }
}

/// A fixed i.i.d. sample of the noise vector with seed provenance.
#[derive(Debug, Clone)]
pub struct ScenarioSet {
    pub nu: usize,
    pub scenarios: Vec<DVector<f64>>,
    pub seed: u64,
    pub spec: DistributionSpec,
}

impl ScenarioSet {
    /// Common-random-numbers prefix: the first `nu` scenarios of this set.
    ///
    /// Generation is scenario-major, so this equals `draw_scenarios(spec, nu, seed)`
    /// bit-exactly.
    pub fn prefix(&self, nu: usize) -> Result<ScenarioSet> {
        if nu == 0 || nu > self.nu {
            return Err(Error::Config(format!(
                "prefix size {nu} out of range 1..={}",
                self.nu
            )));
        }
        Ok(ScenarioSet {
            nu,
            scenarios: self.scenarios[..nu].to_vec(),
            seed: self.seed,
            spec: self.spec.clone(),
        })
    }

    /// A set holding exactly the given scenarios (for expectation-exact tests).
    pub fn explicit(scenarios: Vec<DVector<f64>>) -> Self {
        ScenarioSet {
            nu: scenarios.len(),
            scenarios,
            seed: 0,
            spec: DistributionSpec::default(),
        }
    }
}

fn splitmix64(state: &mut u64) -> u64 {
    *state = state.wrapping_add(0x9e3779b97f4a7c15);
    let mut z = *state;
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d049bb133111eb);
    z ^ (z >> 31)
}

/// ChaCha12 stream keyed by expanding the 64-bit seed with splitmix64.
pub fn seeded_rng(seed: u64) -> ChaCha12Rng {
    let mut state = seed;
    let mut key = [0u8; 32];
    for chunk in key.chunks_exact_mut(8) {
        chunk.copy_from_slice(&splitmix64(&mut state).to_le_bytes());
    }
    ChaCha12Rng::from_seed(key)
}

/// Uniform draw in [0, 1) with 53 random bits.
pub fn unit_uniform(rng: &mut ChaCha12Rng) -> f64 {
    (rng.next_u64() >> 11) as f64 * (1.0 / 9007199254740992.0)
}

/// Inverse of the standard normal CDF (Acklam's rational approximation,
/// relative error below 1.2e-9 over (0,1)).
pub fn inverse_normal_cdf(p: f64) -> f64 {
    debug_assert!(p > 0.0 && p < 1.0);
    const A: [f64; 6] = [
        -3.969683028665376e+01,
        2.209460984245205e+02,
        -2.759285104469687e+02,
        1.383577518672690e+02,
        -3.066479806614716e+01,
        2.506628277459239e+00,
    ];
    const B: [f64; 5] = [
        -5.447609879822406e+01,
        1.615858368580409e+02,
        -1.556989798598866e+02,
        6.680131188771972e+01,
        -1.328068155288572e+01,
    ];
    const C: [f64; 6] = [
        -7.784894002430293e-03,
        -3.223964580411365e-01,
        -2.400758277161838e+00,
        -2.549732539343734e+00,
        4.374664141464968e+00,
        2.938163982698783e+00,
    ];
    const D: [f64; 4] = [
        7.784695709041462e-03,
        3.224671290700398e-01,
        2.445134137142996e+00,
        3.754408661907416e+00,
    ];
    const P_LOW: f64 = 0.02425;

    if p < P_LOW {
        let q = (-2.0 * p.ln()).sqrt();
        (((((C[0] * q + C[1]) * q + C[2]) * q + C[3]) * q + C[4]) * q + C[5])
            / ((((D[0] * q + D[1]) * q + D[2]) * q + D[3]) * q + 1.0)
    } else if p <= 1.0 - P_LOW {
        let q = p - 0.5;
        let r = q * q;
        (((((A[0] * r + A[1]) * r + A[2]) * r + A[3]) * r + A[4]) * r + A[5]) * q
            / (((((B[0] * r + B[1]) * r + B[2]) * r + B[3]) * r + B[4]) * r + 1.0)
    } else {
        let q = (-2.0 * (1.0 - p).ln()).sqrt();
        -(((((C[0] * q + C[1]) * q + C[2]) * q + C[3]) * q + C[4]) * q + C[5])
            / ((((D[0] * q + D[1]) * q + D[2]) * q + D[3]) * q + 1.0)
    }
}

/// Standard normal draw via the inverse-CDF transform.
pub fn standard_normal(rng: &mut ChaCha12Rng) -> f64 {
    // Shift to (0, 1]; the uniform itself lives in [0, 1).
    let u = 1.0 - unit_uniform(rng);
    inverse_normal_cdf(u)
}

/// Draws `nu` i.i.d. scenarios. Deterministic given `(spec, nu, seed)`.
pub fn draw_scenarios(spec: &DistributionSpec, nu: usize, seed: u64) -> Result<ScenarioSet> {
    if nu == 0 {
        return Err(Error::Config("scenario count nu must be >= 1".into()));
    }
    spec.validate()?;
    let mut rng = seeded_rng(seed);
    let d = spec.dim();
    let mut scenarios = Vec::with_capacity(nu);
    for _ in 0..nu {
        let mut xi = DVector::zeros(d);
        for (j, m) in spec.marginals.iter().enumerate() {
            xi[j] = match *m {
                Marginal::Normal { mean, variance } => {
                    mean + variance.sqrt() * standard_normal(&mut rng)
                }
                Marginal::Uniform { lo, hi } => lo + (hi - lo) * unit_uniform(&mut rng),
            };
        }
        scenarios.push(xi);
    }
    Ok(ScenarioSet {
        nu,
        scenarios,
        seed,
        spec: spec.clone(),
    })
}

/// Deterministic, collision-resistant seed derivation for repetitions and
/// sweep cells: SHA-256 of `base || label || index`, truncated to 64 bits.
pub fn derive_stream(base_seed: u64, label: &str, index: u64) -> u64 {
    let mut hasher = Sha256::new();
    hasher.update(base_seed.to_le_bytes());
    hasher.update([label.len() as u8]);
    hasher.update(label.as_bytes());
    hasher.update(index.to_le_bytes());
    let digest = hasher.finalize();
    u64::from_le_bytes(digest[..8].try_into().unwrap())
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::HashSet;

    #[test]
    fn uniform_degenerate_interval_rejected() {
        let spec = DistributionSpec::new(vec![Marginal::Uniform { lo: 0.0, hi: 0.0 }]);
        assert!(draw_scenarios(&spec, 10, 1).is_err());
    }

    #[test]
    fn normal_moments_match_within_standard_error() {
        let spec = DistributionSpec::new(vec![Marginal::Normal {
            mean: 1.0,
            variance: 0.01,
        }]);
        let n = 100_000usize;
        let set = draw_scenarios(&spec, n, 42).unwrap();
        let mean: f64 = set.scenarios.iter().map(|s| s[0]).sum::<f64>() / n as f64;
        let var: f64 = set
            .scenarios
            .iter()
            .map(|s| (s[0] - mean).powi(2))
            .sum::<f64>()
            / (n - 1) as f64;
        // 4 standard errors of the mean; 5% relative on the variance.
        assert!((mean - 1.0).abs() <= 4.0 * 0.1 / (n as f64).sqrt());
        assert!((var - 0.01).abs() <= 0.05 * 0.01);
    }

    #[test]
    fn determinism_same_inputs_same_sets() {
        let spec = DistributionSpec::new(vec![
            Marginal::Normal {
                mean: 1.0,
                variance: 0.01,
            },
            Marginal::Uniform { lo: -1.0, hi: 1.0 },
        ]);
        let a = draw_scenarios(&spec, 500, 7).unwrap();
        let b = draw_scenarios(&spec, 500, 7).unwrap();
        for (x, y) in a.scenarios.iter().zip(&b.scenarios) {
            assert_eq!(x.as_slice(), y.as_slice());
        }
    }

    #[test]
    fn prefix_equals_fresh_draw() {
        let spec = DistributionSpec::new(vec![
            Marginal::Normal {
                mean: 0.0,
                variance: 1.0,
            },
            Marginal::Uniform { lo: 0.0, hi: 2.0 },
        ]);
        let big = draw_scenarios(&spec, 1000, 99).unwrap();
        let small = draw_scenarios(&spec, 100, 99).unwrap();
        let pre = big.prefix(100).unwrap();
        for (x, y) in pre.scenarios.iter().zip(&small.scenarios) {
            assert_eq!(x.as_slice(), y.as_slice());
        }
    }

    #[test]
    fn derive_stream_deterministic_and_collision_free() {
        assert_eq!(derive_stream(3, "rep", 3), derive_stream(3, "rep", 3));
        let mut state = 0xdeadbeefu64;
        let mut seen = HashSet::new();
        for _ in 0..10_000 {
            let s = splitmix64(&mut state);
            let a = derive_stream(s, "rep", 3);
            let b = derive_stream(s, "rep", 4);
            let c = derive_stream(s, "sweep", 3);
            assert_ne!(a, b);
            assert_ne!(a, c);
            assert!(seen.insert(a));
        }
    }

    #[test]
    fn uniform_empirical_cdf_close_to_truth() {
        let spec = DistributionSpec::new(vec![Marginal::Uniform { lo: -1.0, hi: 1.0 }]);
        let n = 100_000usize;
        let set = draw_scenarios(&spec, n, 2024).unwrap();
        let mut xs: Vec<f64> = set.scenarios.iter().map(|s| s[0]).collect();
        xs.sort_by(|a, b| a.partial_cmp(b).unwrap());
        // Kolmogorov-Smirnov distance against the true CDF (x+1)/2.
        let mut ks: f64 = 0.0;
        for (i, &x) in xs.iter().enumerate() {
            let cdf = (x + 1.0) / 2.0;
            let lo = i as f64 / n as f64;
            let hi = (i + 1) as f64 / n as f64;
            ks = ks.max((cdf - lo).abs()).max((hi - cdf).abs());
        }
        assert!(ks < 0.01, "KS distance {ks}");
    }

    #[test]
    fn inverse_cdf_round_trips_at_known_points() {
        // Phi^-1(0.5) = 0, Phi^-1(0.975) ~ 1.959964
        assert!(inverse_normal_cdf(0.5).abs() < 1e-9);
        assert!((inverse_normal_cdf(0.975) - 1.959963984540054).abs() < 1e-7);
        assert!((inverse_normal_cdf(0.025) + 1.959963984540054).abs() < 1e-7);
    }
}
