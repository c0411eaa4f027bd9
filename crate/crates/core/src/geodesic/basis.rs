use crate::autodiff::Tensor;
use crate::error::{Error, Result};

/// Hat function `s_{j,k}(t) = ∫₀ᵗ ψ_{j,k}` for the orthonormal Haar wavelet
/// `ψ_{j,k}(u) = 2^{j/2} ψ(2ʲu − k)`.
///
/// Supported on `[k·2⁻ʲ, (k+1)·2⁻ʲ]` with peak `2^{−j/2−1}` at the midpoint,
/// so every hat has unit H¹ norm.
pub fn basis_eval(j: u32, k: usize, t: f64) -> Result<f64> {
    if k >= 1usize << j {
        return Err(Error::OutOfRange {
            what: "basis shift",
            detail: format!("k = {k} at level j = {j}"),
        });
    }
    Ok(hat(j, k, t))
}

pub(crate) fn hat(j: u32, k: usize, t: f64) -> f64 {
    let scale = (1u64 << j) as f64;
    let x = t * scale - k as f64;
    if x <= 0.0 || x >= 1.0 {
        return 0.0;
    }
    let height = x.min(1.0 - x);
    height / scale.sqrt()
}

/// Faber–Schauder system `{s₀ = 1, s₁ = t} ∪ {s_{j,k} : j < N, k < 2ʲ}`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct FaberSchauderBasis {
    pub depth: u32,
}

impl FaberSchauderBasis {
    pub fn new(depth: u32) -> Result<Self> {
        if depth > 20 {
            return Err(Error::Config(format!("basis depth {depth} is unreasonably large")));
        }
        Ok(FaberSchauderBasis { depth })
    }

    /// Functions per latent coordinate, `2^N + 1`.
    pub fn count(&self) -> usize {
        (1usize << self.depth) + 1
    }

    /// Number of hats, `2^N − 1`.
    pub fn interior_count(&self) -> usize {
        (1usize << self.depth) - 1
    }

    /// `(j, k)` of every hat in coefficient order.
    pub fn indices(&self) -> Vec<(u32, usize)> {
        (0..self.depth)
            .flat_map(|j| (0..1usize << j).map(move |k| (j, k)))
            .collect()
    }

    /// The `i`-th basis function in the order `s₀, s₁, s_{0,0}, s_{1,0}, …`.
    pub fn eval(&self, i: usize, t: f64) -> f64 {
        match i {
            0 => 1.0,
            1 => t,
            _ => {
                let n = i - 1;
                let j = n.ilog2();
                hat(j, n - (1usize << j), t)
            }
        }
    }

    /// `T×(2^N − 1)` matrix of hat values at `times`.
    pub fn interior_matrix(&self, times: &[f64]) -> Tensor {
        let idx = self.indices();
        let data = times
            .iter()
            .flat_map(|&t| idx.iter().map(move |&(j, k)| hat(j, k, t)))
            .collect();
        Tensor::from_parts(vec![times.len(), idx.len().max(1)], pad(data, times.len(), idx.len()))
    }
}

// A zero-depth basis has no hats; keep a single zero column so the matrix
// stays valid.
fn pad(data: Vec<f64>, rows: usize, cols: usize) -> Vec<f64> {
    if cols == 0 {
        vec![0.0; rows]
    } else {
        data
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::h1_inner_product;

    #[test]
    fn values_and_support() {
        assert_eq!(basis_eval(0, 0, 0.5).unwrap(), 0.5);
        assert_eq!(basis_eval(1, 1, 0.25).unwrap(), 0.0);
        assert!((basis_eval(2, 1, 0.375).unwrap() - 0.25).abs() < 1e-15);
        assert!(basis_eval(1, 2, 0.5).is_err());
        for j in 0..6 {
            for k in 0..1usize << j {
                assert_eq!(basis_eval(j, k, 0.0).unwrap(), 0.0);
                assert_eq!(basis_eval(j, k, 1.0).unwrap(), 0.0);
            }
        }
    }

    #[test]
    fn counts() {
        let b = FaberSchauderBasis::new(6).unwrap();
        assert_eq!(b.count(), 65);
        assert_eq!(b.indices().len(), 63);
        assert_eq!(b.interior_matrix(&[0.0, 0.5, 1.0]).shape(), &[3, 63]);
    }

    #[test]
    fn gram_matrix_is_identity_at_depth_3() {
        let b = FaberSchauderBasis::new(3).unwrap();
        for i in 0..b.count() {
            for j in 0..b.count() {
                let g = h1_inner_product(|t| b.eval(i, t), |t| b.eval(j, t), 1e-3);
                let expect = if i == j { 1.0 } else { 0.0 };
                assert!((g - expect).abs() < 1e-9, "({i}, {j}) = {g}");
            }
        }
    }
}
