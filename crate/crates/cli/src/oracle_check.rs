use std::f64::consts::FRAC_PI_2;
use std::path::PathBuf;

use clap::{Args, ValueEnum};
use fibrae::autodiff::Tensor;
use fibrae::data_io::write_atomic;
use fibrae::geodesic::{solve_geodesic, SolverConfig};
use fibrae::geometry::{IdentityDecoder, LatentPoint, LinearDecoder, SphereDecoder};
use fibrae::oracle::{grid_geodesic_oracle, linear_transport_oracle, sphere_geodesic_oracle, LinearDecoderSpec};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde_json::json;

use crate::{CmdResult, Failure};

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Suite {
    /// Random linear decoders against the closed-form transport.
    Linear,
    /// Sphere chart against spherical trigonometry.
    Sphere,
    /// Lattice shortest paths against known lengths and the solver.
    Grid,
}

#[derive(Args, Debug)]
pub struct OracleCheckArgs {
    #[arg(long, value_enum)]
    suite: Suite,
    /// Random cases per suite.
    #[arg(long, default_value_t = 10)]
    cases: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Optional JSON report.
    #[arg(long)]
    out: Option<PathBuf>,
}

struct Case {
    name: String,
    pass: bool,
    detail: String,
}

fn tight() -> SolverConfig {
    SolverConfig {
        tolerance: 1e-10,
        max_iterations: 20_000,
        ..SolverConfig::default()
    }
}

fn linear_suite(rng: &mut ChaCha8Rng, cases: usize) -> Result<Vec<Case>, Failure> {
    let tol = 1e-3;
    let mut out = Vec::with_capacity(cases);
    for i in 0..cases {
        let m = rng.random_range(1..=2);
        let n = rng.random_range(1..=2);
        let d = rng.random_range(m + n..=16);
        let a: Vec<f64> = (0..d * (m + n)).map(|_| StandardNormal.sample(&mut *rng)).collect();
        let a = Tensor::matrix(d, m + n, a)?;
        let f1: Vec<f64> = (0..m).map(|_| rng.random_range(-0.5..0.5)).collect();
        let b1: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
        let b2: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
        let spec = LinearDecoderSpec {
            a: a.clone(),
            fiber_dim: m,
        };
        let (f_exact, e_exact) = linear_transport_oracle(&spec, &f1, &b1, &b2)?;
        let r = solve_geodesic(&LinearDecoder::new(a, m)?, &LatentPoint::new(f1, b1), &b2, &tight())?;
        let err = r
            .endpoint
            .f
            .iter()
            .zip(&f_exact)
            .map(|(x, y)| (x - y).powi(2))
            .sum::<f64>()
            .sqrt();
        let scale = f_exact.iter().map(|v| v * v).sum::<f64>().sqrt().max(1.0);
        let (f_rel, e_rel) = (err / scale, (r.energy - e_exact).abs() / e_exact.max(1e-300));
        out.push(Case {
            name: format!("linear {i} (D={d}, m={m}, n={n})"),
            pass: f_rel < tol && e_rel < tol,
            detail: format!("endpoint error {f_rel:.2e}, energy error {e_rel:.2e}, tolerance {tol:.0e}"),
        });
    }
    Ok(out)
}

fn sphere_suite(rng: &mut ChaCha8Rng, cases: usize) -> Result<Vec<Case>, Failure> {
    let tol = 2e-2;
    let mut starts = vec![(0.0, 0.0, FRAC_PI_2)];
    for _ in 0..cases.saturating_sub(1) {
        starts.push((rng.random_range(-0.8..0.8), 0.0, rng.random_range(-1.2..1.2)));
    }
    let mut out = Vec::with_capacity(starts.len());
    for (u1, v1, v2) in starts {
        let (u2, exact) = sphere_geodesic_oracle(u1, v1, v2)?;
        let r = solve_geodesic(&SphereDecoder, &LatentPoint::new(vec![u1], vec![v1]), &[v2], &tight())?;
        let len_err = if exact > 0.0 { (r.length - exact).abs() / exact } else { r.length };
        let u_err = (r.endpoint.f[0] - u2).abs();
        out.push(Case {
            name: format!("sphere ({u1:.3}, {v1:.3}) -> v = {v2:.3}"),
            pass: len_err < tol && u_err < tol,
            detail: format!("length error {len_err:.2e}, foot point error {u_err:.2e}, tolerance {tol:.0e}"),
        });
    }
    Ok(out)
}

fn grid_suite(rng: &mut ChaCha8Rng, cases: usize) -> Result<Vec<Case>, Failure> {
    let mut out = Vec::new();
    let id = IdentityDecoder {
        fiber_dim: 1,
        base_dim: 1,
    };
    for i in 0..cases {
        let start = LatentPoint::new(vec![rng.random_range(-0.5..0.5)], vec![rng.random_range(-1.0..1.0)]);
        let b2 = [rng.random_range(-1.0..1.0)];
        let g = grid_geodesic_oracle(&id, &start, &b2, 32)?;
        let exact = (b2[0] - start.b[0]).abs();
        let rel = if exact > 0.0 { (g.length - exact).abs() / exact } else { g.length };
        out.push(Case {
            name: format!("identity {i}"),
            pass: rel < 0.05,
            detail: format!("lattice length {:.5} vs {exact:.5}, error {rel:.2e}, tolerance 5e-2", g.length),
        });
    }
    for (u1, v2) in [(0.0, FRAC_PI_2), (0.4, 1.0)] {
        let start = LatentPoint::new(vec![u1], vec![0.0]);
        let g = grid_geodesic_oracle(&SphereDecoder, &start, &[v2], 48)?;
        let (_, exact) = sphere_geodesic_oracle(u1, 0.0, v2)?;
        let rel = (g.length - exact).abs() / exact;
        let r = solve_geodesic(&SphereDecoder, &start, &[v2], &SolverConfig::default())?;
        let ratio = r.length / g.length;
        out.push(Case {
            name: format!("sphere lattice ({u1:.2}, 0) -> v = {v2:.3}"),
            pass: rel < 0.05 && ratio <= 1.05,
            detail: format!("lattice error {rel:.2e} (tolerance 5e-2), solver/lattice ratio {ratio:.4} (<= 1.05)"),
        });
    }
    Ok(out)
}

pub fn run(args: OracleCheckArgs) -> CmdResult {
    let mut rng = ChaCha8Rng::seed_from_u64(args.seed);
    let cases = match args.suite {
        Suite::Linear => linear_suite(&mut rng, args.cases)?,
        Suite::Sphere => sphere_suite(&mut rng, args.cases)?,
        Suite::Grid => grid_suite(&mut rng, args.cases)?,
    };
    for c in &cases {
        println!("{} {}: {}", if c.pass { "PASS" } else { "FAIL" }, c.name, c.detail);
    }
    let failed = cases.iter().filter(|c| !c.pass).count();
    println!("{} passed, {failed} failed", cases.len() - failed);
    if let Some(path) = &args.out {
        let report = json!({
            "suite": format!("{:?}", args.suite).to_lowercase(),
            "seed": args.seed,
            "passed": cases.len() - failed,
            "failed": failed,
            "cases": cases.iter().map(|c| json!({"name": c.name, "pass": c.pass, "detail": c.detail})).collect::<Vec<_>>(),
        });
        let text = serde_json::to_string_pretty(&report).map_err(|e| Failure::Usage(e.to_string()))? + "\n";
        write_atomic(path, text.as_bytes())?;
    }
    if failed > 0 {
        return Err(Failure::Numerical(format!("{failed} oracle case(s) failed")));
    }
    Ok(())
}
