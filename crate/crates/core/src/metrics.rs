//! Mixing metrics for labeled point clouds: the local inverse Simpson index
//! (LISI) and the between/within split of the total variance.

use rayon::prelude::*;
use serde::Serialize;

use crate::autodiff::Tensor;
use crate::error::{Error, Result};

pub const DEFAULT_PERPLEXITY: f64 = 30.0;

/// Points with one integer group label each.
#[derive(Clone, Debug, PartialEq)]
pub struct LabeledCloud {
    /// `N×d`.
    pub points: Tensor,
    pub labels: Vec<usize>,
    /// Number of groups `Z`; every label is below it.
    pub groups: usize,
}

impl LabeledCloud {
    pub fn new(points: Tensor, labels: Vec<usize>) -> Result<Self> {
        if points.rank() != 2 {
            return Err(Error::shape("labeled_cloud", "points must be an N×d matrix"));
        }
        if labels.len() != points.rows() {
            return Err(Error::shape(
                "labeled_cloud",
                format!("{} points, {} labels", points.rows(), labels.len()),
            ));
        }
        let groups = labels.iter().max().map_or(0, |m| m + 1);
        Ok(LabeledCloud { points, labels, groups })
    }

    /// Builds a cloud from string labels, numbering them by first appearance.
    pub fn from_names(points: Tensor, names: &[String]) -> Result<Self> {
        let mut seen: Vec<&String> = Vec::new();
        let labels = names
            .iter()
            .map(|n| match seen.iter().position(|s| *s == n) {
                Some(i) => i,
                None => {
                    seen.push(n);
                    seen.len() - 1
                }
            })
            .collect();
        LabeledCloud::new(points, labels)
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Gaussian weights over squared distances `d` whose entropy is
/// `log(perplexity)`; `None` when the distances are all equal and the
/// bandwidth is unidentifiable.
fn entropy_weights(d: &[f64], perplexity: f64) -> Option<Vec<f64>> {
    let lo = d.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = d.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if hi - lo <= 1e-12 * hi.max(1.0) {
        return None;
    }
    let target = perplexity.ln();
    let (mut beta, mut beta_lo, mut beta_hi) = (1.0, 0.0, f64::INFINITY);
    let mut w = vec![0.0; d.len()];
    for _ in 0..50 {
        let mut sum = 0.0;
        let mut weighted = 0.0;
        for (wi, &di) in w.iter_mut().zip(d) {
            *wi = (-beta * (di - lo)).exp();
            sum += *wi;
            weighted += (di - lo) * *wi;
        }
        let entropy = sum.ln() + beta * weighted / sum;
        w.iter_mut().for_each(|v| *v /= sum);
        let gap = entropy - target;
        if gap.abs() < 1e-5 {
            break;
        }
        if gap > 0.0 {
            beta_lo = beta;
            beta = if beta_hi.is_finite() { (beta + beta_hi) / 2.0 } else { beta * 2.0 };
        } else {
            beta_hi = beta;
            beta = (beta + beta_lo) / 2.0;
        }
    }
    Some(w)
}

/// Per-point LISI with a Gaussian kernel over the `3·perplexity` nearest
/// neighbors; every score lies in `[1, Z]`.
pub fn lisi(cloud: &LabeledCloud, perplexity: f64) -> Result<Vec<f64>> {
    let n = cloud.len();
    if !(perplexity > 1.0) {
        return Err(Error::InvalidInput(format!("perplexity must exceed 1, got {perplexity}")));
    }
    if (n as f64) <= perplexity {
        return Err(Error::InvalidInput(format!("LISI needs more than {perplexity} points, got {n}")));
    }
    let k = ((3.0 * perplexity) as usize).min(n - 1);
    let scores: Vec<(f64, bool)> = (0..n)
        .into_par_iter()
        .map(|i| {
            let xi = cloud.points.row(i);
            let mut nb: Vec<(f64, usize)> = (0..n)
                .filter(|&j| j != i)
                .map(|j| (sq_dist(xi, cloud.points.row(j)), j))
                .collect();
            nb.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
            nb.truncate(k);
            let d: Vec<f64> = nb.iter().map(|p| p.0).collect();
            let mut p = vec![0.0; cloud.groups];
            match entropy_weights(&d, perplexity) {
                Some(w) => {
                    for (wj, &(_, j)) in w.iter().zip(&nb) {
                        p[cloud.labels[j]] += wj;
                    }
                    (1.0 / p.iter().map(|v| v * v).sum::<f64>(), false)
                }
                None => {
                    for &(_, j) in &nb {
                        p[cloud.labels[j]] = 1.0;
                    }
                    (p.iter().sum(), true)
                }
            }
        })
        .collect();
    let ties = scores.iter().filter(|s| s.1).count();
    if ties > 0 {
        log::warn!("{ties} point(s) have equidistant neighborhoods; LISI set to the label count there");
    }
    Ok(scores.into_iter().map(|s| s.0).collect())
}

/// Total variance split into between-group and within-group parts, each
/// group weighted by its share `|G_j|/N`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct WardDecomposition {
    pub total: f64,
    pub between: f64,
    pub within: f64,
}

/// Group-averaged variants with every group weighted `1/Z` regardless of its
/// size; these do not add up to the total when sizes differ.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct UnweightedWard {
    pub between: f64,
    pub within: f64,
}

struct GroupStats {
    size: usize,
    mean: Vec<f64>,
    variance: f64,
}

fn group_stats(cloud: &LabeledCloud) -> (Vec<f64>, f64, Vec<GroupStats>) {
    let (n, d) = cloud.points.dims2();
    let mut mean = vec![0.0; d];
    let mut sums = vec![vec![0.0; d]; cloud.groups];
    let mut sizes = vec![0usize; cloud.groups];
    for i in 0..n {
        let g = cloud.labels[i];
        sizes[g] += 1;
        for (c, v) in cloud.points.row(i).iter().enumerate() {
            mean[c] += v;
            sums[g][c] += v;
        }
    }
    mean.iter_mut().for_each(|v| *v /= n as f64);
    let total = (0..n).map(|i| sq_dist(cloud.points.row(i), &mean)).sum::<f64>() / n as f64;
    let mut stats: Vec<GroupStats> = sums
        .into_iter()
        .zip(&sizes)
        .map(|(s, &size)| GroupStats {
            size,
            mean: s.into_iter().map(|v| v / size.max(1) as f64).collect(),
            variance: 0.0,
        })
        .collect();
    for i in 0..n {
        let g = &mut stats[cloud.labels[i]];
        g.variance += sq_dist(cloud.points.row(i), &g.mean);
    }
    for g in &mut stats {
        g.variance /= g.size.max(1) as f64;
    }
    stats.retain(|g| g.size > 0);
    (mean, total, stats)
}

pub fn ward_decomposition(cloud: &LabeledCloud) -> Result<WardDecomposition> {
    if cloud.is_empty() {
        return Err(Error::InvalidInput("empty point cloud".into()));
    }
    let n = cloud.len() as f64;
    let (mean, total, stats) = group_stats(cloud);
    let between = stats.iter().map(|g| g.size as f64 / n * sq_dist(&g.mean, &mean)).sum();
    let within = stats.iter().map(|g| g.size as f64 / n * g.variance).sum();
    Ok(WardDecomposition { total, between, within })
}

pub fn ward_unweighted(cloud: &LabeledCloud) -> Result<UnweightedWard> {
    if cloud.is_empty() {
        return Err(Error::InvalidInput("empty point cloud".into()));
    }
    let (mean, _, stats) = group_stats(cloud);
    let z = stats.len() as f64;
    Ok(UnweightedWard {
        between: stats.iter().map(|g| sq_dist(&g.mean, &mean)).sum::<f64>() / z,
        within: stats.iter().map(|g| g.variance).sum::<f64>() / z,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct LisiSummary {
    pub mean: f64,
    pub std: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub per_point: Option<Vec<f64>>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct GroupingReport {
    pub lisi: LisiSummary,
    pub ward: WardDecomposition,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub ward_unweighted: Option<UnweightedWard>,
}

/// LISI summary and variance split of one labeling.
pub fn grouping_report(
    cloud: &LabeledCloud,
    perplexity: f64,
    per_point: bool,
    unweighted: bool,
) -> Result<GroupingReport> {
    let scores = lisi(cloud, perplexity)?;
    let n = scores.len() as f64;
    let mean = scores.iter().sum::<f64>() / n;
    let std = (scores.iter().map(|s| (s - mean) * (s - mean)).sum::<f64>() / n).sqrt();
    Ok(GroupingReport {
        lisi: LisiSummary {
            mean,
            std,
            per_point: per_point.then_some(scores),
        },
        ward: ward_decomposition(cloud)?,
        ward_unweighted: if unweighted { Some(ward_unweighted(cloud)?) } else { None },
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_cloud(seed: u64, n: usize, d: usize, z: usize) -> LabeledCloud {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let pts = (0..n * d).map(|_| rng.random_range(-3.0..3.0)).collect();
        let labels = (0..n).map(|_| rng.random_range(0..z)).collect();
        LabeledCloud::new(Tensor::matrix(n, d, pts).unwrap(), labels).unwrap()
    }

    #[test]
    fn ward_examples() {
        let c = LabeledCloud::new(Tensor::matrix(2, 1, vec![0.0, 2.0]).unwrap(), vec![0, 1]).unwrap();
        let w = ward_decomposition(&c).unwrap();
        assert_eq!((w.total, w.between, w.within), (1.0, 1.0, 0.0));
        let c = LabeledCloud::new(c.points.clone(), vec![0, 0]).unwrap();
        let w = ward_decomposition(&c).unwrap();
        assert_eq!(w.between, 0.0);
        assert_eq!(w.within, w.total);
    }

    #[test]
    fn unweighted_split_differs_for_unequal_groups() {
        let c = LabeledCloud::new(Tensor::matrix(3, 1, vec![0.0, 0.0, 3.0]).unwrap(), vec![0, 0, 1]).unwrap();
        let w = ward_decomposition(&c).unwrap();
        let u = ward_unweighted(&c).unwrap();
        assert!((w.total - w.between - w.within).abs() < 1e-12);
        assert!((w.total - u.between - u.within).abs() > 0.1);
    }

    #[test]
    fn lisi_single_label_and_range() {
        let mut c = random_cloud(1, 120, 3, 4);
        let scores = lisi(&c, 30.0).unwrap();
        assert!(scores.iter().all(|&s| (1.0 - 1e-12..=4.0 + 1e-12).contains(&s)));
        c.labels.iter_mut().for_each(|l| *l = 0);
        c.groups = 1;
        assert!(lisi(&c, 30.0).unwrap().iter().all(|&s| (s - 1.0).abs() < 1e-12));
    }

    #[test]
    fn lisi_interleaved_lattice_is_two() {
        let n = 500;
        let pts = (0..n).map(|i| i as f64 * 0.01).collect();
        let c = LabeledCloud::new(Tensor::matrix(n, 1, pts).unwrap(), (0..n).map(|i| i % 2).collect()).unwrap();
        let s = lisi(&c, DEFAULT_PERPLEXITY).unwrap();
        let mean = s.iter().sum::<f64>() / n as f64;
        assert!((mean - 2.0).abs() < 0.1, "{mean}");
    }

    #[test]
    fn lisi_rejects_small_clouds_and_handles_ties() {
        let c = random_cloud(2, 20, 2, 2);
        assert!(lisi(&c, 30.0).is_err());
        assert!(lisi(&c, 1.0).is_err());
        let same = LabeledCloud::new(Tensor::zeros(&[10, 2]), (0..10).map(|i| i % 3).collect()).unwrap();
        assert!(lisi(&same, 3.0).unwrap().iter().all(|&s| s == 3.0));
    }

    #[test]
    fn lisi_is_rigid_motion_invariant() {
        let c = random_cloud(3, 80, 2, 3);
        let (s, co) = (0.3f64.sin(), 0.3f64.cos());
        let moved: Vec<f64> = (0..80)
            .flat_map(|i| {
                let p = c.points.row(i);
                [co * p[0] - s * p[1] + 5.0, s * p[0] + co * p[1] - 2.0]
            })
            .collect();
        let m = LabeledCloud::new(Tensor::matrix(80, 2, moved).unwrap(), c.labels.clone()).unwrap();
        for (a, b) in lisi(&c, 10.0).unwrap().iter().zip(lisi(&m, 10.0).unwrap()) {
            assert!((a - b).abs() < 1e-8);
        }
    }

    #[test]
    fn report_json_shape() {
        let c = random_cloud(4, 60, 2, 2);
        let r = grouping_report(&c, 10.0, false, true).unwrap();
        let v = serde_json::to_value(&r).unwrap();
        assert!(v["lisi"]["mean"].is_number() && v["lisi"].get("per_point").is_none());
        assert!(v["ward"]["between"].is_number() && v["ward_unweighted"]["within"].is_number());
    }

    proptest! {
        #[test]
        fn ward_identity_holds(seed in 0u64..1000, n in 1usize..60, d in 1usize..5, z in 1usize..6) {
            let c = random_cloud(seed, n, d, z);
            let w = ward_decomposition(&c).unwrap();
            prop_assert!((w.total - w.between - w.within).abs() < 1e-10);
        }
    }
}
