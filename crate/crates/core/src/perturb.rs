//! Additive noise perturbation: `w = x + r` with `r` zero-mean and of known
//! variance.

use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use rand_distr::{Distribution, Normal, Uniform};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::mean_and_sample_variance;

#[derive(Debug, Error, PartialEq)]
pub enum PerturbError {
    #[error("invalid noise variance {0}")]
    InvalidVariance(f64),
    #[error("no noise variance configured for attribute {0}")]
    MissingVariance(usize),
    #[error("ratio mode needs at least two values, got {0}")]
    TooFewValues(usize),
    #[error("non-finite input value at position {0}")]
    NonFinite(usize),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NoiseFamily {
    #[default]
    Gaussian,
    /// Symmetric uniform on `[-sqrt(3v), sqrt(3v)]`.
    Uniform,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NoiseVariance {
    Shared(f64),
    /// Indexed by parent-table attribute position.
    PerAttribute(Vec<f64>),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoiseSpec {
    pub family: NoiseFamily,
    pub variance: NoiseVariance,
    pub seed: u64,
}

impl NoiseSpec {
    pub fn new(family: NoiseFamily, variance: f64, seed: u64) -> Self {
        Self {
            family,
            variance: NoiseVariance::Shared(variance),
            seed,
        }
    }

    pub fn variance_for(&self, attribute_index: usize) -> Result<f64, PerturbError> {
        let v = match &self.variance {
            NoiseVariance::Shared(v) => *v,
            NoiseVariance::PerAttribute(vs) => *vs
                .get(attribute_index)
                .ok_or(PerturbError::MissingVariance(attribute_index))?,
        };
        if !(v >= 0.0 && v.is_finite()) {
            return Err(PerturbError::InvalidVariance(v));
        }
        Ok(v)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PerturbedColumn {
    pub attribute_name: String,
    pub values: Vec<f64>,
    pub noise_variance: f64,
}

/// Noise stream for one attribute. Draw `t` of the stream perturbs row `t`.
fn noise_rng(seed: u64, attribute_index: usize) -> ChaCha20Rng {
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    rng.set_stream(attribute_index as u64);
    rng
}

/// Adds i.i.d. zero-mean noise to `x`. The output is a pure function of
/// `(x, spec, attribute_index)`; zero variance returns `x` unchanged.
pub fn perturb_column(
    attribute_name: &str,
    x: &[f64],
    spec: &NoiseSpec,
    attribute_index: usize,
) -> Result<PerturbedColumn, PerturbError> {
    let variance = spec.variance_for(attribute_index)?;
    if let Some(t) = x.iter().position(|v| !v.is_finite()) {
        return Err(PerturbError::NonFinite(t));
    }
    let values = if variance == 0.0 {
        x.to_vec()
    } else {
        let mut rng = noise_rng(spec.seed, attribute_index);
        match spec.family {
            NoiseFamily::Gaussian => {
                let dist = Normal::new(0.0, variance.sqrt())
                    .map_err(|_| PerturbError::InvalidVariance(variance))?;
                x.iter().map(|v| v + dist.sample(&mut rng)).collect()
            }
            NoiseFamily::Uniform => {
                let half = (3.0 * variance).sqrt();
                let dist = Uniform::new_inclusive(-half, half)
                    .map_err(|_| PerturbError::InvalidVariance(variance))?;
                x.iter().map(|v| v + dist.sample(&mut rng)).collect()
            }
        }
    };
    Ok(PerturbedColumn {
        attribute_name: attribute_name.to_string(),
        values,
        noise_variance: variance,
    })
}

/// How a site chooses the noise variance for a column.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NoiseMode {
    Absolute(f64),
    /// A multiple of the column's own sample variance.
    RatioOfSampleVariance(f64),
}

impl Default for NoiseMode {
    fn default() -> Self {
        NoiseMode::RatioOfSampleVariance(0.25)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ResolvedVariance {
    pub variance: f64,
    /// Set when ratio mode met a constant column and resolved to zero.
    pub degenerate: bool,
}

pub fn resolve_variance(mode: NoiseMode, x: &[f64]) -> Result<ResolvedVariance, PerturbError> {
    match mode {
        NoiseMode::Absolute(v) => {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(PerturbError::InvalidVariance(v));
            }
            Ok(ResolvedVariance { variance: v, degenerate: false })
        }
        NoiseMode::RatioOfSampleVariance(ratio) => {
            if !(ratio >= 0.0 && ratio.is_finite()) {
                return Err(PerturbError::InvalidVariance(ratio));
            }
            if x.len() < 2 {
                return Err(PerturbError::TooFewValues(x.len()));
            }
            let (_, s2) = mean_and_sample_variance(x);
            let degenerate = s2 == 0.0;
            if degenerate {
                log::warn!("constant column: ratio noise mode resolves to zero variance");
            }
            Ok(ResolvedVariance { variance: ratio * s2, degenerate })
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_variance_is_identity() {
        let x = vec![1.5, -0.0, 3.25, 1e300];
        for family in [NoiseFamily::Gaussian, NoiseFamily::Uniform] {
            let col = perturb_column("a", &x, &NoiseSpec::new(family, 0.0, 9), 0).unwrap();
            let bits: Vec<u64> = col.values.iter().map(|v| v.to_bits()).collect();
            let want: Vec<u64> = x.iter().map(|v| v.to_bits()).collect();
            assert_eq!(bits, want);
        }
    }

    #[test]
    fn preserves_length_and_reproduces() {
        let x: Vec<f64> = (0..57).map(f64::from).collect();
        let spec = NoiseSpec::new(NoiseFamily::Gaussian, 2.0, 11);
        let a = perturb_column("a", &x, &spec, 3).unwrap();
        let b = perturb_column("a", &x, &spec, 3).unwrap();
        assert_eq!(a.values.len(), 57);
        assert_eq!(a, b);
        let other_attr = perturb_column("a", &x, &spec, 4).unwrap();
        assert_ne!(a.values, other_attr.values);
    }

    #[test]
    fn prefix_of_stream_is_stable() {
        // row t's noise does not depend on how many rows follow it
        let spec = NoiseSpec::new(NoiseFamily::Gaussian, 1.0, 5);
        let long = perturb_column("a", &[0.0; 10], &spec, 2).unwrap();
        let short = perturb_column("a", &[0.0; 4], &spec, 2).unwrap();
        assert_eq!(&long.values[..4], &short.values[..]);
    }

    #[test]
    fn gaussian_noise_moments() {
        let n = 100_000;
        let x = vec![0.0; n];
        let col = perturb_column("a", &x, &NoiseSpec::new(NoiseFamily::Gaussian, 1.0, 2024), 0)
            .unwrap();
        let (m, v) = mean_and_sample_variance(&col.values);
        assert!(m.abs() <= 0.02, "mean {m}");
        assert!((0.97..=1.03).contains(&v), "variance {v}");
    }

    #[test]
    fn uniform_noise_moments_and_support() {
        let n = 100_000;
        let x = vec![10.0; n];
        let col = perturb_column("a", &x, &NoiseSpec::new(NoiseFamily::Uniform, 4.0, 7), 1)
            .unwrap();
        let r: Vec<f64> = col.values.iter().map(|w| w - 10.0).collect();
        let half = 12f64.sqrt();
        assert!(r.iter().all(|v| v.abs() <= half + 1e-12));
        let (m, v) = mean_and_sample_variance(&r);
        assert!(m.abs() <= 0.03, "mean {m}");
        assert!((3.9..=4.1).contains(&v), "variance {v}");
    }

    #[test]
    fn negative_variance_rejected() {
        let spec = NoiseSpec::new(NoiseFamily::Gaussian, -1.0, 0);
        assert_eq!(
            perturb_column("a", &[1.0], &spec, 0),
            Err(PerturbError::InvalidVariance(-1.0))
        );
        let per = NoiseSpec {
            family: NoiseFamily::Gaussian,
            variance: NoiseVariance::PerAttribute(vec![1.0]),
            seed: 0,
        };
        assert_eq!(perturb_column("a", &[1.0], &per, 1), Err(PerturbError::MissingVariance(1)));
    }

    #[test]
    fn resolves_variance() {
        assert_eq!(resolve_variance(NoiseMode::Absolute(2.5), &[]).unwrap().variance, 2.5);
        let r = resolve_variance(NoiseMode::RatioOfSampleVariance(0.25), &[1.0, 2.0, 3.0]).unwrap();
        assert_eq!(r.variance, 0.25);
        assert!(!r.degenerate);
        let c = resolve_variance(NoiseMode::RatioOfSampleVariance(0.7), &[4.0; 5]).unwrap();
        assert_eq!(c.variance, 0.0);
        assert!(c.degenerate);
        assert_eq!(
            resolve_variance(NoiseMode::RatioOfSampleVariance(1.0), &[1.0]),
            Err(PerturbError::TooFewValues(1))
        );
        assert!(resolve_variance(NoiseMode::Absolute(-0.1), &[]).is_err());
    }
}
