//! Pullback geometry of a decoder: Jacobians, the metric `g = JᵀJ`, the
//! discretized path energy and the H¹ inner product on `[0, 1]`.

use std::f64::consts::FRAC_PI_2;

use nalgebra::{DMatrix, SymmetricEigen};

use crate::autodiff::{Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::nn::{bind_layers, decode_latent, FaeModel};

/// A point `(f, b)` of the latent space; `f` lives in the fiber
/// `[-1, 1]^m` for auto-encoder decoders.
#[derive(Clone, Debug, PartialEq)]
pub struct LatentPoint {
    pub f: Vec<f64>,
    pub b: Vec<f64>,
}

impl LatentPoint {
    pub fn new(f: Vec<f64>, b: Vec<f64>) -> Self {
        LatentPoint { f, b }
    }

    pub fn dim(&self) -> usize {
        self.f.len() + self.b.len()
    }

    pub fn in_cube(&self) -> bool {
        self.f.iter().all(|v| (-1.0..=1.0).contains(v))
    }

    /// `(f, b)` concatenated.
    pub fn to_vec(&self) -> Vec<f64> {
        self.f.iter().chain(&self.b).copied().collect()
    }

    pub fn from_slice(z: &[f64], fiber_dim: usize) -> Self {
        LatentPoint {
            f: z[..fiber_dim].to_vec(),
            b: z[fiber_dim..].to_vec(),
        }
    }
}

/// A smooth map from latent space into sample space.
///
/// `forward` maps each row of an `N×(m+n)` matrix independently to a row of
/// the `N×D` output; [`jacobian`] relies on that row independence.
pub trait Decoder: Sync {
    fn fiber_dim(&self) -> usize;
    fn latent_dim(&self) -> usize;
    fn output_dim(&self) -> usize;
    fn forward(&self, tape: &mut Tape, z: Var) -> Result<Var>;

    /// Whether fiber coordinates are confined to `[-1, 1]` (and clamped on
    /// the way in).
    fn bounded_fiber(&self) -> bool {
        false
    }

    fn base_dim(&self) -> usize {
        self.latent_dim() - self.fiber_dim()
    }

    /// Decodes each row of `z`.
    fn decode_rows(&self, z: &Tensor) -> Result<Tensor> {
        if z.cols() != self.latent_dim() {
            return Err(Error::shape(
                "decode",
                format!("latent rows of width {} for dim M = {}", z.cols(), self.latent_dim()),
            ));
        }
        let mut tape = Tape::new();
        let v = tape.constant(z.clone());
        let out = self.forward(&mut tape, v)?;
        Ok(tape.value(out).clone())
    }

    fn decode_point(&self, p: &LatentPoint) -> Result<Vec<f64>> {
        let z = Tensor::matrix(1, p.dim(), p.to_vec())?;
        Ok(self.decode_rows(&z)?.into_data())
    }
}

/// `Ψ(z) = A z (+ c)` with `A` of shape `D×(m+n)`.
#[derive(Clone, Debug, PartialEq)]
pub struct LinearDecoder {
    pub a: Tensor,
    pub bias: Option<Tensor>,
    pub fiber_dim: usize,
}

impl LinearDecoder {
    pub fn new(a: Tensor, fiber_dim: usize) -> Result<Self> {
        if a.rank() != 2 || fiber_dim > a.cols() {
            return Err(Error::shape("linear_decoder", format!("matrix {:?}, m = {fiber_dim}", a.shape())));
        }
        Ok(LinearDecoder {
            a,
            bias: None,
            fiber_dim,
        })
    }

    pub fn with_bias(mut self, bias: Tensor) -> Result<Self> {
        if bias.len() != self.a.rows() {
            return Err(Error::shape("linear_decoder", "bias length differs from D"));
        }
        self.bias = Some(Tensor::new(vec![bias.len()], bias.into_data())?);
        Ok(self)
    }
}

impl Decoder for LinearDecoder {
    fn fiber_dim(&self) -> usize {
        self.fiber_dim
    }

    fn latent_dim(&self) -> usize {
        self.a.cols()
    }

    fn output_dim(&self) -> usize {
        self.a.rows()
    }

    fn forward(&self, tape: &mut Tape, z: Var) -> Result<Var> {
        let a = tape.constant(self.a.clone());
        let y = tape.matmul_t(z, a)?;
        match &self.bias {
            Some(c) => {
                let c = tape.constant(c.clone());
                tape.add(y, c)
            }
            None => Ok(y),
        }
    }
}

/// `Ψ(u, v) = (cos u cos v, cos u sin v, sin u)`: latitude `u` is the fiber,
/// longitude `v` the base.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct SphereDecoder;

impl Decoder for SphereDecoder {
    fn fiber_dim(&self) -> usize {
        1
    }

    fn latent_dim(&self) -> usize {
        2
    }

    fn output_dim(&self) -> usize {
        3
    }

    fn forward(&self, tape: &mut Tape, z: Var) -> Result<Var> {
        let u = tape.slice(z, 1, 0, 1)?;
        let v = tape.slice(z, 1, 1, 1)?;
        let u_shift = tape.offset(u, FRAC_PI_2)?;
        let cos_u = tape.sin(u_shift)?;
        let sin_u = tape.sin(u)?;
        let v_shift = tape.offset(v, FRAC_PI_2)?;
        let cos_v = tape.sin(v_shift)?;
        let sin_v = tape.sin(v)?;
        let x = tape.mul(cos_u, cos_v)?;
        let y = tape.mul(cos_u, sin_v)?;
        tape.concat(&[x, y, sin_u], 1)
    }
}

/// `Ψ(z) = z`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct IdentityDecoder {
    pub fiber_dim: usize,
    pub base_dim: usize,
}

impl Decoder for IdentityDecoder {
    fn fiber_dim(&self) -> usize {
        self.fiber_dim
    }

    fn latent_dim(&self) -> usize {
        self.fiber_dim + self.base_dim
    }

    fn output_dim(&self) -> usize {
        self.latent_dim()
    }

    fn forward(&self, tape: &mut Tape, z: Var) -> Result<Var> {
        tape.scale(z, 1.0)
    }
}

impl Decoder for FaeModel {
    fn fiber_dim(&self) -> usize {
        self.arch.fiber_dim
    }

    fn latent_dim(&self) -> usize {
        self.arch.latent_dim()
    }

    fn output_dim(&self) -> usize {
        self.arch.input_dim
    }

    fn bounded_fiber(&self) -> bool {
        true
    }

    fn forward(&self, tape: &mut Tape, z: Var) -> Result<Var> {
        let layers = bind_layers(tape, &self.decoder, false);
        decode_latent(tape, &layers, self.arch.fiber_dim, z)
    }
}

fn check_point(decoder: &dyn Decoder, p: &LatentPoint) -> Result<()> {
    if p.f.len() != decoder.fiber_dim() || p.b.len() != decoder.base_dim() {
        return Err(Error::shape(
            "latent point",
            format!(
                "({}, {}) for a decoder with (m, n) = ({}, {})",
                p.f.len(),
                p.b.len(),
                decoder.fiber_dim(),
                decoder.base_dim()
            ),
        ));
    }
    Ok(())
}

/// `D×(m+n)` Jacobian of the decoder at `p`.
///
/// The point is replicated into `D` rows and the diagonal of the decoded
/// batch is summed, so one reverse sweep yields every row of the Jacobian.
pub fn jacobian(decoder: &dyn Decoder, p: &LatentPoint) -> Result<Tensor> {
    check_point(decoder, p)?;
    let d = decoder.output_dim();
    let l = p.dim();
    let z = p.to_vec();
    let batch: Vec<f64> = (0..d).flat_map(|_| z.iter().copied()).collect();
    let mut tape = Tape::new();
    let zv = tape.parameter(Tensor::matrix(d, l, batch)?);
    let y = decoder.forward(&mut tape, zv)?;
    let eye = tape.constant(Tensor::identity(d));
    let diag = tape.mul(y, eye)?;
    let s = tape.sum(diag)?;
    let j = tape.backward(s)?.wrt(zv);
    if !j.is_finite() {
        return Err(Error::NonFinite(format!("jacobian at {z:?}")));
    }
    Ok(j)
}

/// Symmetric positive semi-definite `(m+n)×(m+n)` matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct MetricTensor {
    pub g: Tensor,
}

impl MetricTensor {
    pub fn dim(&self) -> usize {
        self.g.rows()
    }

    /// Eigenvalues in ascending order.
    pub fn eigenvalues(&self) -> Vec<f64> {
        let n = self.dim();
        let m = DMatrix::from_row_slice(n, n, self.g.data());
        let mut ev: Vec<f64> = SymmetricEigen::new(m).eigenvalues.iter().copied().collect();
        ev.sort_by(f64::total_cmp);
        ev
    }

    pub fn max_asymmetry(&self) -> f64 {
        let n = self.dim();
        let mut worst: f64 = 0.0;
        for i in 0..n {
            for j in 0..i {
                worst = worst.max((self.g.get(i, j) - self.g.get(j, i)).abs());
            }
        }
        worst
    }
}

/// `g(p) = J(p)ᵀ J(p)`.
pub fn pullback_metric(decoder: &dyn Decoder, p: &LatentPoint) -> Result<MetricTensor> {
    let j = jacobian(decoder, p)?;
    let (d, l) = j.dims2();
    let mut g = vec![0.0; l * l];
    for a in 0..l {
        for b in a..l {
            let v: f64 = (0..d).map(|k| j.get(k, a) * j.get(k, b)).sum();
            g[a * l + b] = v;
            g[b * l + a] = v;
        }
    }
    Ok(MetricTensor {
        g: Tensor::matrix(l, l, g)?,
    })
}

fn steps_for(dt: f64, points: usize) -> Result<usize> {
    let k = 1.0 / dt;
    if !(dt > 0.0 && (k - k.round()).abs() < 1e-9 && k.round() >= 1.0) {
        return Err(Error::InvalidInput(format!("1/Δt must be a positive integer, Δt = {dt}")));
    }
    let k = k.round() as usize;
    if points != k + 1 {
        return Err(Error::shape(
            "energy",
            format!("{points} path points for Δt = {dt} (expected {})", k + 1),
        ));
    }
    Ok(k)
}

/// `‖Ψ(γ_{k+1}) − Ψ(γ_k)‖² / Δt` for every segment of a path given as
/// `(1/Δt + 1)×(m+n)` rows.
pub fn segment_energies(decoder: &dyn Decoder, path: &Tensor, dt: f64) -> Result<Vec<f64>> {
    let k = steps_for(dt, path.rows())?;
    let y = decoder.decode_rows(path)?;
    Ok((0..k)
        .map(|i| {
            let d: f64 = y.row(i + 1).iter().zip(y.row(i)).map(|(a, b)| (a - b) * (a - b)).sum();
            d / dt
        })
        .collect())
}

/// `E_Δt(γ) = Σ_k ‖Ψ(γ_{k+1}) − Ψ(γ_k)‖² / Δt` (no factor ½).
pub fn discrete_energy(decoder: &dyn Decoder, path: &Tensor, dt: f64) -> Result<f64> {
    Ok(segment_energies(decoder, path, dt)?.iter().sum())
}

/// [`discrete_energy`] recorded on a tape, for differentiation with respect
/// to whatever produced `path`.
pub fn energy_on_tape(tape: &mut Tape, decoder: &dyn Decoder, path: Var, dt: f64) -> Result<Var> {
    let rows = tape.value(path).rows();
    let k = steps_for(dt, rows)?;
    let y = decoder.forward(tape, path)?;
    let next = tape.slice(y, 0, 1, k)?;
    let prev = tape.slice(y, 0, 0, k)?;
    let diff = tape.sub(next, prev)?;
    let sq = tape.squared_norm(diff)?;
    tape.scale(sq, 1.0 / dt)
}

/// Euclidean length of the decoded polyline, `Σ_k ‖Ψ(γ_{k+1}) − Ψ(γ_k)‖`.
pub fn path_length(segment_energies: &[f64], dt: f64) -> f64 {
    segment_energies.iter().map(|e| (e * dt).sqrt()).sum()
}

/// Extreme eigenvalues of the metric over a sample of points.
#[derive(Clone, Debug, PartialEq)]
pub struct ConditionReport {
    pub lambda_min: f64,
    pub lambda_max: f64,
    /// `max(λ_max, 1/λ_min)`; infinite when the metric degenerates.
    pub c_estimate: f64,
    /// True when some metric is singular to within `1e-10`, so no uniform
    /// equivalence constant can hold.
    pub degenerate: bool,
}

pub fn metric_condition_report(decoder: &dyn Decoder, points: &[LatentPoint]) -> Result<ConditionReport> {
    if points.is_empty() {
        return Err(Error::InvalidInput("metric report needs at least one point".into()));
    }
    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    for p in points {
        let ev = pullback_metric(decoder, p)?.eigenvalues();
        lo = lo.min(ev[0]);
        hi = hi.max(ev[ev.len() - 1]);
    }
    let degenerate = lo <= 1e-10;
    if degenerate {
        log::warn!("pullback metric is degenerate (λ_min = {lo:e})");
    }
    let c_estimate = if degenerate { f64::INFINITY } else { hi.max(1.0 / lo) };
    Ok(ConditionReport {
        lambda_min: lo,
        lambda_max: hi,
        c_estimate,
        degenerate,
    })
}

/// `⟨φ, χ⟩ = φ(0)χ(0) + ∫₀¹ φ′χ′`.
///
/// The interval is cut into `2^p ≥ 1/step` cells; derivatives are central
/// differences at cell midpoints and the integral is the midpoint rule. A
/// dyadic cell count makes the quadrature exact for piecewise-linear
/// functions with dyadic breakpoints down to the cell size.
pub fn h1_inner_product(phi: impl Fn(f64) -> f64, chi: impl Fn(f64) -> f64, step: f64) -> f64 {
    let cells = (1.0 / step).ceil().max(1.0) as usize;
    let cells = cells.next_power_of_two();
    let h = 1.0 / cells as f64;
    let mut integral = 0.0;
    let (mut p_prev, mut c_prev) = (phi(0.0), chi(0.0));
    let boundary = p_prev * c_prev;
    for i in 1..=cells {
        let t = i as f64 * h;
        let (p, c) = (phi(t), chi(t));
        integral += (p - p_prev) * (c - c_prev) / h;
        p_prev = p;
        c_prev = c;
    }
    boundary + integral
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::finite_difference_gradient;
    use crate::nn::{init_model, FaeArchitecture};

    fn straight(z0: &[f64], z1: &[f64], dt: f64) -> Tensor {
        let k = (1.0 / dt).round() as usize;
        let l = z0.len();
        let data = (0..=k)
            .flat_map(|i| {
                let t = i as f64 / k as f64;
                (0..l).map(move |j| z0[j] + t * (z1[j] - z0[j]))
            })
            .collect();
        Tensor::matrix(k + 1, l, data).unwrap()
    }

    #[test]
    fn linear_and_identity_jacobians() {
        let a = Tensor::matrix(3, 2, vec![1.0, 2.0, -1.0, 0.5, 0.0, 3.0]).unwrap();
        let lin = LinearDecoder::new(a.clone(), 1).unwrap();
        let j = jacobian(&lin, &LatentPoint::new(vec![0.3], vec![-2.0])).unwrap();
        assert_eq!(j, a);
        let id = IdentityDecoder { fiber_dim: 2, base_dim: 1 };
        let j = jacobian(&id, &LatentPoint::new(vec![0.1, 0.2], vec![0.3])).unwrap();
        assert_eq!(j, Tensor::identity(3));
        assert_eq!(pullback_metric(&id, &LatentPoint::new(vec![0.0, 0.0], vec![0.0])).unwrap().g, Tensor::identity(3));
        assert!(jacobian(&id, &LatentPoint::new(vec![0.1], vec![0.3])).is_err());
    }

    #[test]
    fn fae_jacobian_matches_finite_differences() {
        let mut arch = FaeArchitecture::new(5, 2, 1, 2);
        arch.decoder_hidden = vec![16, 16];
        let model = init_model(&arch, 21).unwrap();
        let p = LatentPoint::new(vec![0.2, -0.5], vec![0.07]);
        let j = jacobian(&model, &p).unwrap();
        for out in 0..5 {
            let fd = finite_difference_gradient(
                |z| Ok(model.decode(&z[..2], &z[2..])?[out]),
                &p.to_vec(),
                1e-5,
            )
            .unwrap();
            for (c, n) in fd.iter().enumerate() {
                let a = j.get(out, c);
                assert!((a - n).abs() / n.abs().max(1e-3) < 1e-6, "{a} vs {n}");
            }
        }
    }

    #[test]
    fn sphere_metric_is_analytic() {
        for u in [0.0, std::f64::consts::FRAC_PI_3, -0.7] {
            let g = pullback_metric(&SphereDecoder, &LatentPoint::new(vec![u], vec![0.4])).unwrap();
            let expect = [1.0, 0.0, 0.0, u.cos().powi(2)];
            for (a, b) in g.g.data().iter().zip(expect) {
                assert!((a - b).abs() < 1e-12, "{a} vs {b}");
            }
        }
    }

    #[test]
    fn energies_of_straight_paths() {
        let id = IdentityDecoder { fiber_dim: 1, base_dim: 1 };
        for dt in [1.0 / 16.0, 1.0 / 64.0, 1.0 / 256.0] {
            let path = straight(&[0.0, 0.0], &[0.6, 0.8], dt);
            let e = discrete_energy(&id, &path, dt).unwrap();
            assert!((e - 1.0).abs() < 1e-12, "{e}");
            let seg = segment_energies(&id, &path, dt).unwrap();
            assert!((seg.iter().sum::<f64>() - e).abs() < 1e-12);
            let (lo, hi) = seg.iter().fold((f64::MAX, f64::MIN), |(a, b), &v| (a.min(v), b.max(v)));
            assert!(hi - lo < 1e-12);
        }
        let a = Tensor::matrix(2, 2, vec![1.0, 2.0, 0.0, 3.0]).unwrap();
        let lin = LinearDecoder::new(a, 1).unwrap();
        let e = discrete_energy(&lin, &straight(&[0.0, 0.0], &[1.0, 1.0], 1.0 / 32.0), 1.0 / 32.0).unwrap();
        assert!((e - 18.0).abs() < 1e-12);
        let constant = straight(&[0.3, 0.3], &[0.3, 0.3], 0.125);
        assert_eq!(discrete_energy(&id, &constant, 0.125).unwrap(), 0.0);
        assert!(discrete_energy(&id, &constant, 0.25).is_err());
        assert!(discrete_energy(&id, &constant, 0.3).is_err());
    }

    #[test]
    fn time_warped_path_speeds_up() {
        let id = IdentityDecoder { fiber_dim: 1, base_dim: 1 };
        let dt = 1.0 / 32.0;
        let data = (0..=32)
            .flat_map(|i| {
                let t = i as f64 * dt;
                [0.5 * t * t, 0.5 * t * t]
            })
            .collect();
        let path = Tensor::matrix(33, 2, data).unwrap();
        let seg = segment_energies(&id, &path, dt).unwrap();
        assert!(seg.windows(2).all(|w| w[1] > w[0]));
    }

    #[test]
    fn tape_energy_matches_direct() {
        let mut arch = FaeArchitecture::new(4, 1, 1, 2);
        arch.decoder_hidden = vec![8];
        let model = init_model(&arch, 2).unwrap();
        let path = straight(&[-0.4, 0.1], &[0.6, -0.2], 1.0 / 64.0);
        let direct = discrete_energy(&model, &path, 1.0 / 64.0).unwrap();
        let mut tape = Tape::new();
        let p = tape.constant(path);
        let e = energy_on_tape(&mut tape, &model, p, 1.0 / 64.0).unwrap();
        assert!((tape.value(e).data()[0] - direct).abs() < 1e-12);
    }

    #[test]
    fn condition_reports() {
        let id = IdentityDecoder { fiber_dim: 1, base_dim: 1 };
        let pts = vec![LatentPoint::new(vec![0.0], vec![0.0]), LatentPoint::new(vec![0.5], vec![1.0])];
        let r = metric_condition_report(&id, &pts).unwrap();
        assert!((r.lambda_min - 1.0).abs() < 1e-12 && (r.lambda_max - 1.0).abs() < 1e-12);
        assert!((r.c_estimate - 1.0).abs() < 1e-12 && !r.degenerate);

        let diag = LinearDecoder::new(Tensor::matrix(2, 2, vec![1.0, 0.0, 0.0, 2.0]).unwrap(), 1).unwrap();
        let r = metric_condition_report(&diag, &pts).unwrap();
        assert!((r.lambda_min - 1.0).abs() < 1e-12 && (r.lambda_max - 4.0).abs() < 1e-12);

        let flat = LinearDecoder::new(Tensor::matrix(2, 2, vec![1.0, 0.0, 2.0, 0.0]).unwrap(), 1).unwrap();
        let r = metric_condition_report(&flat, &pts).unwrap();
        assert!(r.degenerate && r.lambda_min.abs() < 1e-10 && r.c_estimate.is_infinite());
        assert!(metric_condition_report(&id, &[]).is_err());
    }

    #[test]
    fn h1_examples() {
        assert!((h1_inner_product(|_| 1.0, |_| 1.0, 1e-3) - 1.0).abs() < 1e-12);
        assert!((h1_inner_product(|t| t, |t| t, 1e-3) - 1.0).abs() < 1e-12);
        assert!(h1_inner_product(|_| 1.0, |t| t, 1e-3).abs() < 1e-12);
        let s = h1_inner_product(|t| t * t, |t| t * t, 1e-4);
        assert!((s - 4.0 / 3.0).abs() < 1e-6);
    }
}
