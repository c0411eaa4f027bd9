use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::Dataset;
use crate::autodiff::Tensor;
use crate::error::{Error, Result};

/// Parameters of the Gaussian cluster generator.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticSpec {
    pub conditions: usize,
    pub per_condition: usize,
    pub dim: usize,
    #[serde(default)]
    pub seed: u64,
    /// Number of latent factors shared by all conditions.
    #[serde(default = "default_factors")]
    pub factors: usize,
    /// Standard deviation of the condition means.
    #[serde(default = "default_separation")]
    pub separation: f64,
    /// Standard deviation of the isotropic noise.
    #[serde(default = "default_noise")]
    pub noise: f64,
}

fn default_factors() -> usize {
    2
}

fn default_separation() -> f64 {
    1.0
}

fn default_noise() -> f64 {
    0.05
}

impl SyntheticSpec {
    pub fn new(conditions: usize, per_condition: usize, dim: usize, seed: u64) -> Self {
        SyntheticSpec {
            conditions,
            per_condition,
            dim,
            seed,
            factors: default_factors(),
            separation: default_separation(),
            noise: default_noise(),
        }
    }
}

/// `x = μ_c + W z + ε` with a condition mean `μ_c`, a factor loading `W`
/// shared by every condition, `z ~ U(-1, 1)^factors` and Gaussian noise,
/// min-max normalized into `[0, 1]`. Samples are grouped by condition.
pub fn make_synthetic(spec: &SyntheticSpec) -> Result<Dataset> {
    let SyntheticSpec {
        conditions: k,
        per_condition,
        dim: d,
        ..
    } = *spec;
    if k == 0 || per_condition == 0 || d == 0 || spec.factors == 0 {
        return Err(Error::Config(format!("synthetic spec needs positive sizes: {spec:?}")));
    }
    if !(spec.separation >= 0.0 && spec.noise >= 0.0) {
        return Err(Error::Config("separation and noise must be non-negative".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut normal = || -> f64 { StandardNormal.sample(&mut rng) };
    let means: Vec<f64> = (0..k * d).map(|_| spec.separation * normal()).collect();
    let loading: Vec<f64> = (0..d * spec.factors)
        .map(|_| normal() / (spec.factors as f64).sqrt())
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed.wrapping_add(1));
    let mut data = Vec::with_capacity(k * per_condition * d);
    let mut labels = Vec::with_capacity(k * per_condition);
    for c in 0..k {
        for _ in 0..per_condition {
            let z: Vec<f64> = (0..spec.factors).map(|_| rng.random_range(-1.0..1.0)).collect();
            for j in 0..d {
                let shared: f64 = (0..spec.factors).map(|q| loading[j * spec.factors + q] * z[q]).sum();
                let eps: f64 = StandardNormal.sample(&mut rng);
                data.push(means[c * d + j] + shared + spec.noise * eps);
            }
            labels.push(c);
        }
    }
    let x = Tensor::matrix(k * per_condition, d, data)?;
    let names = (0..k).map(|c| c.to_string()).collect();
    let mut ds = Dataset::new(x, labels, k, names)?;
    ds.normalize();
    Ok(ds)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sizes_determinism_and_range() {
        let spec = SyntheticSpec::new(2, 100, 7, 3);
        let a = make_synthetic(&spec).unwrap();
        assert_eq!(a.len(), 200);
        assert_eq!(a.dim(), 7);
        assert!(a.in_unit_cube());
        assert_eq!(a, make_synthetic(&spec).unwrap());
        let other = make_synthetic(&SyntheticSpec::new(2, 100, 7, 4)).unwrap();
        assert_ne!(a.x, other.x);
        assert!(make_synthetic(&SyntheticSpec::new(0, 10, 3, 0)).is_err());
    }
}
