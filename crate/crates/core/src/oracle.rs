//! Independent ground truths for transport: closed-form linear decoders, the
//! round sphere, and shortest paths on a latent lattice.

use nalgebra::{DMatrix, DVector};
use petgraph::algo::dijkstra;
use petgraph::graph::{NodeIndex, UnGraph};

use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::geometry::{Decoder, LatentPoint};

/// `Ψ(f, b) = A_f f + A_b b` with `A = [A_f | A_b]` of shape `D×(m+n)`.
#[derive(Clone, Debug, PartialEq)]
pub struct LinearDecoderSpec {
    pub a: Tensor,
    pub fiber_dim: usize,
}

/// Optimal endpoint fiber coordinate and energy for a linear decoder.
///
/// The metric is constant, so the geodesic is a straight segment and the
/// free endpoint solves a least-squares problem:
/// `Δf = −(A_fᵀA_f)⁻¹A_fᵀA_b(b₂ − b₁)`, energy `‖A_f Δf + A_b Δb‖²`.
pub fn linear_transport_oracle(spec: &LinearDecoderSpec, f1: &[f64], b1: &[f64], b2: &[f64]) -> Result<(Vec<f64>, f64)> {
    let (d, l) = spec.a.dims2();
    let m = spec.fiber_dim;
    if f1.len() != m || b1.len() != l - m || b2.len() != l - m {
        return Err(Error::shape("linear_transport_oracle", "point sizes differ from the matrix split"));
    }
    let a = DMatrix::from_row_slice(d, l, spec.a.data());
    let af = a.columns(0, m).into_owned();
    let ab = a.columns(m, l - m).into_owned();
    let db = DVector::from_iterator(l - m, b2.iter().zip(b1).map(|(x, y)| x - y));
    let gram = af.transpose() * &af;
    let ev = gram.clone().symmetric_eigenvalues();
    let (lo, hi) = ev.iter().fold((f64::INFINITY, 0.0f64), |(lo, hi), &v| (lo.min(v), hi.max(v)));
    if !(lo > 1e-12 * hi.max(1.0)) {
        return Err(Error::Singular(format!("A_fᵀA_f has eigenvalues in [{lo:e}, {hi:e}]")));
    }
    let chol = gram
        .cholesky()
        .ok_or_else(|| Error::Singular("A_fᵀA_f is not positive definite".into()))?;
    let rhs = af.transpose() * (&ab * &db);
    let df = -chol.solve(&rhs);
    let residual = &af * &df + &ab * &db;
    let f2 = f1.iter().zip(df.iter()).map(|(f, d)| f + d).collect();
    Ok((f2, residual.norm_squared()))
}

/// Foot point `u₂` on the meridian `v = v₂` closest to `(u₁, v₁)` and the
/// great-circle distance to it, for `Ψ(u, v) = (cos u cos v, cos u sin v, sin u)`.
pub fn sphere_geodesic_oracle(u1: f64, v1: f64, v2: f64) -> Result<(f64, f64)> {
    let dv = v2 - v1;
    if u1.abs() >= std::f64::consts::FRAC_PI_2 - 0.2 || dv.abs() > std::f64::consts::FRAC_PI_2 + 1e-12 {
        return Err(Error::OutOfRange {
            what: "sphere chart",
            detail: format!("u₁ = {u1}, v₂ − v₁ = {dv}"),
        });
    }
    let u2 = u1.sin().atan2(u1.cos() * dv.cos());
    let length = (u1.cos() * dv.sin().abs()).min(1.0).asin();
    Ok((u2, length))
}

#[derive(Clone, Debug, PartialEq)]
pub struct GridGeodesic {
    pub endpoint: LatentPoint,
    /// Length of the shortest lattice path, summing `‖Ψ(a) − Ψ(b)‖` over its
    /// edges.
    pub length: f64,
    /// Shortest length to any other node of the target fiber; infinite when
    /// there is none.
    pub runner_up_length: f64,
}

pub const MAX_GRID_RESOLUTION: usize = 64;

/// Shortest path on a lattice over the latent box from `start` to the fiber
/// over `b2`, with edges between all 8 (2-D) or 26 (3-D) neighbors.
///
/// All axes share one spacing `h` so that the diagonal moves are the same
/// in every plane: `h = max|b₂ − b₁| / resolution` (or `1/resolution` when
/// the base does not move). Each base axis runs from `b₁` to `b₂` in
/// `round(|Δb|/h)` cells, stretched slightly so that `b₂` is a node. Fiber
/// axes carry nodes `f₁ + k·h`, `|k| ≤ resolution`, clipped to `[-1, 1]`.
pub fn grid_geodesic_oracle(
    decoder: &dyn Decoder,
    start: &LatentPoint,
    b2: &[f64],
    resolution: usize,
) -> Result<GridGeodesic> {
    let m = decoder.fiber_dim();
    let l = decoder.latent_dim();
    if l > 3 {
        return Err(Error::InvalidInput(format!("grid oracle needs dim M <= 3, got {l}")));
    }
    if resolution < 2 || resolution > MAX_GRID_RESOLUTION {
        return Err(Error::OutOfRange {
            what: "grid resolution",
            detail: format!("{resolution} not in 2..={MAX_GRID_RESOLUTION}"),
        });
    }
    if start.f.len() != m || start.b.len() != l - m || b2.len() != l - m {
        return Err(Error::shape("grid_geodesic_oracle", "point sizes differ from the decoder"));
    }
    let span = start.b.iter().zip(b2).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
    let h = if span > 0.0 { span } else { 1.0 } / resolution as f64;
    let r = resolution as i64;
    // Per axis: node coordinates, index of the start, and index of the target
    // (base axes only).
    let mut axes: Vec<(Vec<f64>, usize, Option<usize>)> = Vec::with_capacity(l);
    for &f in &start.f {
        let lo = (((-1.0 - f) / h - 1e-9).ceil() as i64).max(-r);
        let hi = (((1.0 - f) / h + 1e-9).floor() as i64).min(r);
        let values: Vec<f64> = (lo..=hi).map(|k| f + k as f64 * h).collect();
        axes.push((values, (-lo) as usize, None));
    }
    for (&b, &t) in start.b.iter().zip(b2) {
        if b == t {
            axes.push((vec![b], 0, Some(0)));
        } else {
            let cells = ((t - b).abs() / h).round().max(1.0) as usize;
            let values = (0..=cells)
                .map(|k| if k == cells { t } else { b + (t - b) * k as f64 / cells as f64 })
                .collect();
            axes.push((values, 0, Some(cells)));
        }
    }
    let sizes: Vec<usize> = axes.iter().map(|a| a.0.len()).collect();
    let total: usize = sizes.iter().product();
    let unravel = |mut i: usize| -> Vec<usize> {
        let mut idx = vec![0; l];
        for ax in (0..l).rev() {
            idx[ax] = i % sizes[ax];
            i /= sizes[ax];
        }
        idx
    };
    let ravel = |idx: &[usize]| idx.iter().zip(&sizes).fold(0, |acc, (&i, &s)| acc * s + i);

    let coords: Vec<f64> = (0..total)
        .flat_map(|i| {
            let idx = unravel(i);
            (0..l).map(move |ax| idx[ax]).collect::<Vec<_>>()
        })
        .enumerate()
        .map(|(flat, k)| axes[flat % l].0[k])
        .collect();
    let decoded = decoder.decode_rows(&Tensor::matrix(total, l, coords.clone())?)?;

    // Offsets in {-1, 0, 1}^l that are lexicographically positive, so each
    // undirected edge is added once.
    let offsets: Vec<Vec<i64>> = (0..3usize.pow(l as u32))
        .map(|mut c| {
            (0..l)
                .map(|_| {
                    let o = (c % 3) as i64 - 1;
                    c /= 3;
                    o
                })
                .collect::<Vec<i64>>()
        })
        .filter(|o| o.iter().find(|&&v| v != 0).is_some_and(|&v| v > 0))
        .collect();

    let mut graph: UnGraph<(), f64> = UnGraph::with_capacity(total, total * offsets.len());
    for _ in 0..total {
        graph.add_node(());
    }
    for i in 0..total {
        let idx = unravel(i);
        for off in &offsets {
            let nb: Option<Vec<usize>> = idx
                .iter()
                .zip(off)
                .zip(&sizes)
                .map(|((&a, &o), &s)| {
                    let v = a as i64 + o;
                    (v >= 0 && v < s as i64).then_some(v as usize)
                })
                .collect();
            if let Some(nb) = nb {
                let j = ravel(&nb);
                let w = decoded
                    .row(i)
                    .iter()
                    .zip(decoded.row(j))
                    .map(|(a, b)| (a - b) * (a - b))
                    .sum::<f64>()
                    .sqrt();
                graph.add_edge(NodeIndex::new(i), NodeIndex::new(j), w);
            }
        }
    }
    let source: Vec<usize> = axes.iter().map(|a| a.1).collect();
    let dist = dijkstra(&graph, NodeIndex::new(ravel(&source)), None, |e| *e.weight());

    let mut best: Option<(f64, usize)> = None;
    let mut runner_up = f64::INFINITY;
    for (i, d) in dist.iter().map(|(n, d)| (n.index(), *d)) {
        let idx = unravel(i);
        let on_target = axes.iter().zip(&idx).all(|(a, &k)| a.2.is_none_or(|t| t == k));
        if !on_target {
            continue;
        }
        match best {
            Some((bd, bi)) if (d, i) >= (bd, bi) => runner_up = runner_up.min(d),
            Some((bd, _)) => {
                runner_up = runner_up.min(bd);
                best = Some((d, i));
            }
            None => best = Some((d, i)),
        }
    }
    let (length, node) = best.ok_or_else(|| Error::InvalidInput("target fiber unreachable".into()))?;
    let z = &coords[node * l..(node + 1) * l];
    let mut endpoint = LatentPoint::from_slice(z, m);
    endpoint.b = b2.to_vec();
    Ok(GridGeodesic {
        endpoint,
        length,
        runner_up_length: runner_up,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{IdentityDecoder, SphereDecoder};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn linear_examples() {
        let spec = LinearDecoderSpec {
            a: Tensor::matrix(2, 2, vec![1.0, 1.0, 0.0, 1.0]).unwrap(),
            fiber_dim: 1,
        };
        let (f2, e) = linear_transport_oracle(&spec, &[0.2], &[0.0], &[1.0]).unwrap();
        assert!((f2[0] + 0.8).abs() < 1e-12 && (e - 1.0).abs() < 1e-12);
        // dense search over the free endpoint
        let best = (0..=4000)
            .map(|i| -2.0 + i as f64 * 1e-3)
            .map(|f| ((f + 1.0 - 0.2).powi(2) + 1.0, f))
            .fold((f64::INFINITY, 0.0), |a, b| if b.0 < a.0 { b } else { a });
        assert!((best.1 - f2[0]).abs() < 1e-3);

        let block = LinearDecoderSpec {
            a: Tensor::matrix(2, 2, vec![1.0, 0.0, 0.0, 2.0]).unwrap(),
            fiber_dim: 1,
        };
        let (f2, _) = linear_transport_oracle(&block, &[0.2], &[0.0], &[1.0]).unwrap();
        assert_eq!(f2, vec![0.2]);
        let (f2, e) = linear_transport_oracle(&spec, &[0.2], &[0.4], &[0.4]).unwrap();
        assert_eq!((f2, e), (vec![0.2], 0.0));

        let singular = LinearDecoderSpec {
            a: Tensor::matrix(2, 2, vec![0.0, 1.0, 0.0, 1.0]).unwrap(),
            fiber_dim: 1,
        };
        assert!(matches!(linear_transport_oracle(&singular, &[0.0], &[0.0], &[1.0]), Err(Error::Singular(_))));
    }

    #[test]
    fn linear_oracle_beats_naive_path() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..1000 {
            let (d, m, n) = (rng.random_range(3..8), rng.random_range(1..3), rng.random_range(1..3));
            let a = Tensor::matrix(d, m + n, (0..d * (m + n)).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();
            let spec = LinearDecoderSpec { a: a.clone(), fiber_dim: m };
            let f1: Vec<f64> = (0..m).map(|_| rng.random_range(-1.0..1.0)).collect();
            let b1: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
            let b2: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
            let Ok((_, e)) = linear_transport_oracle(&spec, &f1, &b1, &b2) else { continue };
            let naive: f64 = (0..d)
                .map(|r| (0..n).map(|j| a.get(r, m + j) * (b2[j] - b1[j])).sum::<f64>().powi(2))
                .sum();
            assert!(e <= naive + 1e-12);
        }
    }

    #[test]
    fn sphere_examples() {
        let (u2, len) = sphere_geodesic_oracle(0.0, 0.0, std::f64::consts::FRAC_PI_2).unwrap();
        assert!(u2.abs() < 1e-15 && (len - std::f64::consts::FRAC_PI_2).abs() < 1e-15);
        assert_eq!(sphere_geodesic_oracle(0.4, 0.3, 0.3).unwrap(), (0.4, 0.0));
        let a = sphere_geodesic_oracle(0.5, 0.1, 0.9).unwrap().1;
        let b = sphere_geodesic_oracle(-0.5, 0.1, 0.9).unwrap().1;
        assert_eq!(a, b);
        assert!(sphere_geodesic_oracle(1.5, 0.0, 0.1).is_err());
    }

    #[test]
    fn grid_oracle_examples() {
        let id = IdentityDecoder { fiber_dim: 1, base_dim: 1 };
        let start = LatentPoint::new(vec![0.1], vec![0.0]);
        let g = grid_geodesic_oracle(&id, &start, &[0.8], 32).unwrap();
        assert!((g.length - 0.8).abs() / 0.8 < 0.05);
        assert_eq!(g.endpoint.b, vec![0.8]);
        let g = grid_geodesic_oracle(&id, &start, &[0.0], 32).unwrap();
        assert_eq!(g.length, 0.0);
        assert_eq!(g.endpoint, start);
        assert!(grid_geodesic_oracle(&id, &start, &[0.8], 65).is_err());
    }

    #[test]
    fn grid_agrees_with_sphere() {
        let start = LatentPoint::new(vec![0.0], vec![0.0]);
        let g = grid_geodesic_oracle(&SphereDecoder, &start, &[std::f64::consts::FRAC_PI_2], 48).unwrap();
        let (_, exact) = sphere_geodesic_oracle(0.0, 0.0, std::f64::consts::FRAC_PI_2).unwrap();
        assert!((g.length - exact).abs() / exact < 0.05, "{} vs {exact}", g.length);
    }
}
