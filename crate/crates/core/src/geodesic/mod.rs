//! Geodesic transport between fibers.
//!
//! A path is expanded on the Faber–Schauder basis,
//! `γ(t) = (1 − t)·c₀ + t·e + Σ c_{j,k} s_{j,k}(t)`, where `c₀` is the start
//! point and `e = γ(1)` the endpoint. `c₀` and the base block of `e` are
//! fixed, so every iterate satisfies the boundary conditions bit-exactly;
//! the fiber block of `e` and the hat coefficients are optimized.

mod basis;

use std::fmt::Write as _;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub use basis::{basis_eval, FaberSchauderBasis};

use crate::autodiff::{Tape, Tensor};
use crate::error::{Error, Result};
use crate::geometry::{energy_on_tape, path_length, segment_energies, Decoder, LatentPoint};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    #[default]
    Rmsprop,
    Adam,
    GradientDescent,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SolverConfig {
    /// Basis depth `N`: hats of levels `0..N`.
    pub depth: u32,
    /// Time step of the energy Riemann sum; a negative power of two.
    pub dt: f64,
    /// Weight of `‖γ(1) − naive endpoint‖²`.
    pub lambda_reg: f64,
    pub learning_rate: f64,
    pub max_iterations: usize,
    /// Relative improvement over `window` iterations below which the solve
    /// counts as converged.
    pub tolerance: f64,
    pub window: usize,
    pub optimizer: OptimizerKind,
}

impl Default for SolverConfig {
    fn default() -> Self {
        SolverConfig {
            depth: 6,
            dt: 1.0 / 256.0,
            lambda_reg: 0.0,
            learning_rate: 1e-2,
            max_iterations: 2000,
            tolerance: 1e-6,
            window: 50,
            optimizer: OptimizerKind::Rmsprop,
        }
    }
}

impl SolverConfig {
    pub fn validate(&self) -> Result<()> {
        let steps = 1.0 / self.dt;
        let is_pow2 = self.dt > 0.0 && steps.fract() == 0.0 && (steps as u64).is_power_of_two();
        if !is_pow2 {
            return Err(Error::Config(format!("dt must be a negative power of two, got {}", self.dt)));
        }
        if self.depth > 16 || (1u64 << self.depth) as f64 > steps {
            return Err(Error::Config(format!(
                "depth {} needs dt <= 2^-{}, got {}",
                self.depth, self.depth, self.dt
            )));
        }
        if !(self.lambda_reg >= 0.0 && self.lambda_reg.is_finite()) {
            return Err(Error::Config(format!("lambda_reg must be >= 0, got {}", self.lambda_reg)));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config(format!("learning_rate must be > 0, got {}", self.learning_rate)));
        }
        if !(self.tolerance >= 0.0) || self.window == 0 {
            return Err(Error::Config("tolerance must be >= 0 and window > 0".into()));
        }
        Ok(())
    }

    pub fn steps(&self) -> usize {
        (1.0 / self.dt).round() as usize
    }

    pub fn times(&self) -> Vec<f64> {
        let k = self.steps();
        (0..=k).map(|i| i as f64 * self.dt).collect()
    }
}

/// Coefficients of a path in the Faber–Schauder expansion.
#[derive(Clone, Debug, PartialEq)]
pub struct GeodesicPath {
    pub basis: FaberSchauderBasis,
    /// `γ(0)`.
    pub start: Vec<f64>,
    /// `γ(1)`.
    pub end: Vec<f64>,
    /// One row of `m+n` coefficients per hat, in [`FaberSchauderBasis::indices`] order.
    pub interior: Vec<Vec<f64>>,
}

impl GeodesicPath {
    /// Straight segment from `start` to `end`.
    pub fn straight(basis: FaberSchauderBasis, start: Vec<f64>, end: Vec<f64>) -> Self {
        let l = start.len();
        GeodesicPath {
            basis,
            interior: vec![vec![0.0; l]; basis.interior_count()],
            start,
            end,
        }
    }

    /// Coefficient of `s₀`.
    pub fn c0(&self) -> &[f64] {
        &self.start
    }

    /// Coefficient of `s₁`, `γ(1) − γ(0)`.
    pub fn c1(&self) -> Vec<f64> {
        self.end.iter().zip(&self.start).map(|(e, s)| e - s).collect()
    }

    /// `(2^N + 1)(m+n)`.
    pub fn coefficient_count(&self) -> usize {
        self.basis.count() * self.start.len()
    }

    pub fn eval(&self, t: f64) -> Vec<f64> {
        let mut z: Vec<f64> = self
            .start
            .iter()
            .zip(&self.end)
            .map(|(s, e)| (1.0 - t) * s + t * e)
            .collect();
        for (i, row) in self.interior.iter().enumerate() {
            let s = self.basis.eval(i + 2, t);
            if s != 0.0 {
                for (zj, cj) in z.iter_mut().zip(row) {
                    *zj += s * cj;
                }
            }
        }
        z
    }

    /// Samples at `times` as a `T×(m+n)` matrix, computed exactly as the
    /// solver does.
    pub fn sample(&self, times: &[f64]) -> Tensor {
        let l = self.start.len();
        let lin: Vec<f64> = times.iter().flat_map(|&t| [1.0 - t, t]).collect();
        let ends: Vec<f64> = self.start.iter().chain(&self.end).copied().collect();
        let mut out = crate::autodiff::matmul(&lin, &ends, times.len(), 2, l);
        if !self.interior.is_empty() {
            let s = self.basis.interior_matrix(times);
            let c: Vec<f64> = self.interior.iter().flatten().copied().collect();
            let hats = crate::autodiff::matmul(s.data(), &c, times.len(), self.interior.len(), l);
            for (o, h) in out.iter_mut().zip(hats) {
                *o += h;
            }
        }
        Tensor::from_parts(vec![times.len(), l], out)
    }
}

/// `(f₁, b₂)`: the fiber coordinate carried over unchanged.
pub fn naive_transport(start: &LatentPoint, b2: &[f64]) -> LatentPoint {
    LatentPoint::new(start.f.clone(), b2.to_vec())
}

/// `(max − min) / mean` of the segment energies; `0` for an all-zero
/// vector and for an empty one.
pub fn constant_speed_residual(segment_energies: &[f64]) -> f64 {
    if segment_energies.is_empty() {
        return 0.0;
    }
    let (lo, hi, sum) = segment_energies
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY, 0.0), |(lo, hi, s), &v| (lo.min(v), hi.max(v), s + v));
    if hi == 0.0 {
        return 0.0;
    }
    let mean = sum / segment_energies.len() as f64;
    if mean == 0.0 {
        return f64::INFINITY;
    }
    (hi - lo) / mean
}

/// Path samples of a finished solve.
#[derive(Clone, Debug, PartialEq)]
pub struct PathTrace {
    pub times: Vec<f64>,
    /// `T×(m+n)`.
    pub points: Tensor,
    pub segment_energies: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TransportResult {
    pub start: LatentPoint,
    /// `γ(1)`; its base block is `b₂` exactly.
    pub endpoint: LatentPoint,
    /// `E_Δt` of the returned path.
    pub energy: f64,
    /// `E_Δt + λ_reg‖γ(1) − naive‖²`.
    pub loss: f64,
    /// Energy of the straight naive-transport path the solve started from.
    pub initial_energy: f64,
    pub segment_energies: Vec<f64>,
    pub residual: f64,
    pub length: f64,
    pub iterations: usize,
    pub converged: bool,
    /// Iterations whose sampled path left the fiber cube `[-1, 1]^m`
    /// (only counted for decoders with a bounded fiber).
    pub boundary_excursions: usize,
    pub path: GeodesicPath,
    pub trace: PathTrace,
}

struct Stepper {
    kind: OptimizerKind,
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

impl Stepper {
    fn new(kind: OptimizerKind, n: usize) -> Self {
        Stepper {
            kind,
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
        }
    }

    fn step(&mut self, x: &mut [f64], g: &[f64], lr: f64) {
        const EPS: f64 = 1e-8;
        self.t += 1;
        match self.kind {
            OptimizerKind::GradientDescent => {
                for (xi, gi) in x.iter_mut().zip(g) {
                    *xi -= lr * gi;
                }
            }
            OptimizerKind::Rmsprop => {
                for ((xi, gi), vi) in x.iter_mut().zip(g).zip(&mut self.v) {
                    *vi = 0.9 * *vi + 0.1 * gi * gi;
                    *xi -= lr * gi / (vi.sqrt() + EPS);
                }
            }
            OptimizerKind::Adam => {
                let c1 = 1.0 - 0.9f64.powi(self.t);
                let c2 = 1.0 - 0.999f64.powi(self.t);
                for (((xi, gi), mi), vi) in x.iter_mut().zip(g).zip(&mut self.m).zip(&mut self.v) {
                    *mi = 0.9 * *mi + 0.1 * gi;
                    *vi = 0.999 * *vi + 0.001 * gi * gi;
                    *xi -= lr * (*mi / c1) / ((*vi / c2).sqrt() + EPS);
                }
            }
        }
    }
}

/// Everything fixed during one solve.
struct Problem<'a> {
    decoder: &'a dyn Decoder,
    config: &'a SolverConfig,
    start: Vec<f64>,
    b2: Vec<f64>,
    naive_f: Vec<f64>,
    lin: Tensor,
    hats: Tensor,
    m: usize,
    l: usize,
}

impl Problem<'_> {
    /// Loss, its gradient and the sampled path for the free variables
    /// `x = (e_f, interior)`.
    fn evaluate(&self, x: &[f64]) -> Result<(f64, f64, Vec<f64>, Tensor)> {
        let (m, l) = (self.m, self.l);
        let h = self.hats.cols();
        let mut tape = Tape::new();
        let ef = (m > 0).then(|| tape.parameter(Tensor::from_parts(vec![1, m], x[..m].to_vec())));
        let b2 = tape.constant(Tensor::from_parts(vec![1, l - m], self.b2.clone()));
        let end = match ef {
            Some(ef) if l > m => tape.concat(&[ef, b2], 1)?,
            Some(ef) => ef,
            None => b2,
        };
        let c0 = tape.constant(Tensor::from_parts(vec![1, l], self.start.clone()));
        let ends = tape.concat(&[c0, end], 0)?;
        let lin = tape.constant(self.lin.clone());
        let straight = tape.matmul(lin, ends)?;
        let interior = tape.parameter(Tensor::from_parts(vec![h, l], x[m..].to_vec()));
        let hats = tape.constant(self.hats.clone());
        let bumps = tape.matmul(hats, interior)?;
        let path = tape.add(straight, bumps)?;
        let energy = energy_on_tape(&mut tape, self.decoder, path, self.config.dt)?;
        let loss = match ef {
            Some(ef) if self.config.lambda_reg > 0.0 => {
                let naive = tape.constant(Tensor::from_parts(vec![1, m], self.naive_f.clone()));
                let d = tape.sub(ef, naive)?;
                let r = tape.squared_norm(d)?;
                let r = tape.scale(r, self.config.lambda_reg)?;
                tape.add(energy, r)?
            }
            _ => energy,
        };
        let e = tape.value(energy).data()[0];
        let value = tape.value(loss).data()[0];
        let mut grads = tape.backward(loss)?;
        let mut g = Vec::with_capacity(x.len());
        if let Some(ef) = ef {
            g.extend_from_slice(grads.take(ef).data());
        }
        g.extend_from_slice(grads.take(interior).data());
        Ok((value, e, g, tape.value(path).clone()))
    }

    fn path_from(&self, x: &[f64]) -> GeodesicPath {
        let (m, l) = (self.m, self.l);
        let end: Vec<f64> = x[..m].iter().chain(&self.b2).copied().collect();
        let basis = FaberSchauderBasis { depth: self.config.depth };
        let n = basis.interior_count();
        let interior = if n == 0 {
            Vec::new()
        } else {
            x[m..].chunks(l).map(|c| c.to_vec()).collect()
        };
        GeodesicPath {
            basis,
            start: self.start.clone(),
            end,
            interior,
        }
    }
}

fn outside_cube(path: &Tensor, m: usize) -> bool {
    (0..path.rows()).any(|r| path.row(r)[..m].iter().any(|v| v.abs() > 1.0))
}

/// Minimizes `E_Δt(γ) + λ_reg‖γ(1) − (f₁, b₂)‖²` over paths from `start`
/// to the fiber over `b2`, starting from the straight naive-transport path.
///
/// The step size is halved (and the best iterate restored) whenever the
/// loss increases. Non-convergence is reported through
/// [`TransportResult::converged`]; only non-finite values are errors.
pub fn solve_geodesic(
    decoder: &dyn Decoder,
    start: &LatentPoint,
    b2: &[f64],
    config: &SolverConfig,
) -> Result<TransportResult> {
    config.validate()?;
    let m = decoder.fiber_dim();
    let l = decoder.latent_dim();
    if start.f.len() != m || start.b.len() != l - m || b2.len() != l - m {
        return Err(Error::shape(
            "solve_geodesic",
            format!(
                "start ({}, {}) and b₂ of length {} for (m, n) = ({m}, {})",
                start.f.len(),
                start.b.len(),
                b2.len(),
                l - m
            ),
        ));
    }
    if start.to_vec().iter().chain(b2).any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("transport endpoints".into()));
    }
    let basis = FaberSchauderBasis::new(config.depth)?;
    let times = config.times();
    let lin = Tensor::from_parts(vec![times.len(), 2], times.iter().flat_map(|&t| [1.0 - t, t]).collect());
    let hats = basis.interior_matrix(&times);
    let problem = Problem {
        decoder,
        config,
        start: start.to_vec(),
        b2: b2.to_vec(),
        naive_f: start.f.clone(),
        lin,
        hats,
        m,
        l,
    };

    let n_free = m + problem.hats.cols() * l;
    let mut x = vec![0.0; n_free];
    x[..m].copy_from_slice(&start.f);
    let mut best_x = x.clone();
    let mut best_grad = vec![0.0; n_free];
    let mut best = f64::INFINITY;
    let mut initial_energy = f64::NAN;
    let mut history: Vec<f64> = Vec::with_capacity(config.max_iterations + 1);
    let mut stepper = Stepper::new(config.optimizer, n_free);
    let mut lr = config.learning_rate;
    let mut converged = false;
    let mut excursions = 0;
    let mut iterations = 0;
    let check_boundary = decoder.bounded_fiber();

    for it in 0..=config.max_iterations {
        let (loss, energy, grad, path) = problem.evaluate(&x)?;
        if !loss.is_finite() || grad.iter().any(|g| !g.is_finite()) {
            return Err(Error::NonFinite(format!("geodesic loss {loss} at iteration {it}")));
        }
        if it == 0 {
            initial_energy = energy;
        }
        if check_boundary && outside_cube(&path, m) {
            excursions += 1;
        }
        iterations = it;
        if loss <= best {
            best = loss;
            best_x.copy_from_slice(&x);
            best_grad = grad;
        } else {
            // Overshoot: fall back to the best iterate with a smaller step.
            x.copy_from_slice(&best_x);
            lr *= 0.5;
        }
        history.push(best);
        if best == 0.0 {
            converged = true;
            break;
        }
        if history.len() > config.window {
            let old = history[history.len() - 1 - config.window];
            if (old - best) <= config.tolerance * old.abs() {
                converged = true;
                break;
            }
        }
        if it == config.max_iterations {
            break;
        }
        stepper.step(&mut x, &best_grad, lr);
    }

    let path = problem.path_from(&best_x);
    let points = path.sample(&times);
    let seg = segment_energies(decoder, &points, config.dt)?;
    let energy: f64 = seg.iter().sum();
    let reg: f64 = best_x[..m]
        .iter()
        .zip(&start.f)
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>()
        * config.lambda_reg;
    if !converged {
        log::info!("geodesic solve stopped after {iterations} iterations without converging");
    }
    Ok(TransportResult {
        start: start.clone(),
        endpoint: LatentPoint::new(best_x[..m].to_vec(), b2.to_vec()),
        energy,
        loss: energy + reg,
        initial_energy,
        residual: constant_speed_residual(&seg),
        length: path_length(&seg, config.dt),
        segment_energies: seg.clone(),
        iterations,
        converged,
        boundary_excursions: excursions,
        path,
        trace: PathTrace {
            times,
            points,
            segment_energies: seg,
        },
    })
}

/// Solves one geodesic per start point, in parallel; output order follows
/// input order. A failed solve yields an `Err` entry without aborting the
/// others.
pub fn correspondence_map(
    decoder: &dyn Decoder,
    starts: &[LatentPoint],
    b2: &[f64],
    config: &SolverConfig,
) -> Vec<Result<TransportResult>> {
    if let Some(first) = starts.first() {
        if starts.iter().any(|s| s.b != first.b) {
            log::warn!("correspondence starts do not share one base point");
        }
    }
    starts
        .par_iter()
        .map(|s| solve_geodesic(decoder, s, b2, config))
        .collect()
}

/// Decoded frames at `frames` equally spaced times in `[0, 1]`; a single
/// frame is the start.
pub fn interpolate(decoder: &dyn Decoder, result: &TransportResult, frames: usize) -> Result<Vec<Vec<f64>>> {
    if frames == 0 {
        return Ok(Vec::new());
    }
    let times: Vec<f64> = if frames == 1 {
        vec![0.0]
    } else {
        (0..frames).map(|i| i as f64 / (frames - 1) as f64).collect()
    };
    let z = result.path.sample(&times);
    let y = decoder.decode_rows(&z)?;
    Ok((0..frames).map(|i| y.row(i).to_vec()).collect())
}

/// `t,z_0,…,z_{m+n−1},seg_energy`; the energy column of row `k` is the
/// segment from `t_k` to `t_{k+1}` (0 on the last row).
pub fn path_trace_csv(result: &TransportResult) -> String {
    let l = result.start.dim();
    let mut s = String::from("t");
    for i in 0..l {
        let _ = write!(s, ",z_{i}");
    }
    s.push_str(",seg_energy\n");
    let tr = &result.trace;
    for (k, t) in tr.times.iter().enumerate() {
        let _ = write!(s, "{t}");
        for v in tr.points.row(k) {
            let _ = write!(s, ",{v}");
        }
        let e = tr.segment_energies.get(k).copied().unwrap_or(0.0);
        let _ = writeln!(s, ",{e}");
    }
    s
}

/// Header of [`correspondence_csv`] for fiber dimension `m`.
pub fn correspondence_header(m: usize) -> String {
    let mut s = String::new();
    for i in 0..m {
        let _ = write!(s, "start_f_{i},");
    }
    for i in 0..m {
        let _ = write!(s, "end_f_{i},");
    }
    s.push_str("energy,residual,converged\n");
    s
}

/// `start_f…, end_f…, energy, residual, converged`, one row per result.
pub fn correspondence_csv(m: usize, results: &[TransportResult]) -> String {
    let mut s = correspondence_header(m);
    for r in results {
        for v in r.start.f.iter().chain(&r.endpoint.f) {
            let _ = write!(s, "{v},");
        }
        let _ = writeln!(s, "{},{},{}", r.energy, r.residual, r.converged);
    }
    s
}
