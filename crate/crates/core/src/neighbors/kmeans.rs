use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::matrix::Matrix;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KMeansConfig {
    pub clusters: usize,
    pub seed: u64,
    pub max_iter: usize,
    /// Converged once the summed squared centroid shift drops to
    /// `rel_tol * mean per-feature variance` of the data.
    pub rel_tol: f64,
}

impl KMeansConfig {
    pub fn new(clusters: usize, seed: u64) -> Self {
        Self {
            clusters,
            seed,
            max_iter: 100,
            rel_tol: 1e-4,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Clustering {
    pub centroids: Matrix,
    pub assignments: Vec<usize>,
    /// Sum of squared distances from each point to its assigned centroid.
    pub inertia: f64,
    pub iterations_run: usize,
    /// Inertia after the initial assignment and after every Lloyd step.
    pub inertia_history: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClusterSummary {
    pub cluster: usize,
    pub centroid: Vec<f32>,
    pub majority_label: u32,
    /// Share of the cluster's points carrying `majority_label`, in (0, 1].
    pub majority_fraction: f64,
    pub size: usize,
}

/// Centroids are kept in `f64` while fitting.
struct Centers {
    dim: usize,
    data: Vec<f64>,
}

impl Centers {
    fn get(&self, c: usize) -> &[f64] {
        &self.data[c * self.dim..(c + 1) * self.dim]
    }

    fn len(&self) -> usize {
        self.data.len() / self.dim
    }
}

fn sq_dist(point: &[f32], center: &[f64]) -> f64 {
    point
        .iter()
        .zip(center)
        .map(|(&p, &c)| {
            let d = f64::from(p) - c;
            d * d
        })
        .sum()
}

/// Nearest center for every point (lowest center index on ties) and the
/// squared distance to it.
fn assign(points: &Matrix, centers: &Centers) -> Vec<(usize, f64)> {
    (0..points.rows())
        .into_par_iter()
        .map(|i| {
            let p = points.row(i);
            let mut best = (0, sq_dist(p, centers.get(0)));
            for c in 1..centers.len() {
                let d = sq_dist(p, centers.get(c));
                if d < best.1 {
                    best = (c, d);
                }
            }
            best
        })
        .collect()
}

fn plus_plus_init(points: &Matrix, clusters: usize, rng: &mut ChaCha8Rng) -> Centers {
    let n = points.rows();
    let dim = points.cols();
    let to_f64 = |i: usize| points.row(i).iter().map(|&v| f64::from(v));
    let mut data = Vec::with_capacity(clusters * dim);
    data.extend(to_f64(rng.random_range(0..n)));
    let mut centers = Centers { dim, data };
    let mut nearest: Vec<f64> = (0..n)
        .map(|i| sq_dist(points.row(i), centers.get(0)))
        .collect();
    while centers.len() < clusters {
        let total: f64 = nearest.iter().sum();
        let pick = if total > 0.0 {
            let target = rng.random::<f64>() * total;
            let mut acc = 0.0;
            let mut chosen = None;
            for (i, &w) in nearest.iter().enumerate() {
                acc += w;
                if w > 0.0 && acc > target {
                    chosen = Some(i);
                    break;
                }
            }
            // Rounding can leave `acc` just below `target`.
            chosen.unwrap_or_else(|| nearest.iter().rposition(|&w| w > 0.0).unwrap())
        } else {
            rng.random_range(0..n)
        };
        centers.data.extend(to_f64(pick));
        let newest = centers.len() - 1;
        for (i, d) in nearest.iter_mut().enumerate() {
            *d = d.min(sq_dist(points.row(i), centers.get(newest)));
        }
    }
    centers
}

/// Means of the assigned points. An empty cluster is moved onto the point
/// currently farthest from its own center; a point is used at most once.
fn update(points: &Matrix, labels: &[(usize, f64)], clusters: usize) -> Centers {
    let dim = points.cols();
    let mut sums = vec![0.0f64; clusters * dim];
    let mut counts = vec![0usize; clusters];
    for (i, &(c, _)) in labels.iter().enumerate() {
        counts[c] += 1;
        for (s, &v) in sums[c * dim..(c + 1) * dim].iter_mut().zip(points.row(i)) {
            *s += f64::from(v);
        }
    }
    let mut dist: Vec<f64> = labels.iter().map(|&(_, d)| d).collect();
    for c in 0..clusters {
        let slot = &mut sums[c * dim..(c + 1) * dim];
        if counts[c] > 0 {
            let n = counts[c] as f64;
            slot.iter_mut().for_each(|s| *s /= n);
        } else {
            let mut far = 0;
            for (i, &d) in dist.iter().enumerate() {
                if d > dist[far] {
                    far = i;
                }
            }
            for (s, &v) in slot.iter_mut().zip(points.row(far)) {
                *s = f64::from(v);
            }
            dist[far] = f64::NEG_INFINITY;
        }
    }
    Centers { dim, data: sums }
}

fn mean_feature_variance(points: &Matrix) -> f64 {
    let n = points.rows() as f64;
    let d = points.cols();
    let mut mean = vec![0.0f64; d];
    for r in points.iter_rows() {
        mean.iter_mut()
            .zip(r)
            .for_each(|(m, &v)| *m += f64::from(v));
    }
    mean.iter_mut().for_each(|m| *m /= n);
    let mut var = 0.0;
    for r in points.iter_rows() {
        var += r
            .iter()
            .zip(&mean)
            .map(|(&v, m)| (f64::from(v) - m).powi(2))
            .sum::<f64>();
    }
    var / (n * d as f64)
}

/// Lloyd's algorithm with k-means++ seeding.
///
/// Stops when assignments no longer change, when the squared centroid shift
/// falls below the tolerance, or after `max_iter` update steps.
pub fn kmeans_fit(points: &Matrix, cfg: &KMeansConfig) -> Result<Clustering> {
    let n = points.rows();
    if cfg.clusters == 0 {
        return Err(Error::arg("cluster count must be at least 1"));
    }
    if cfg.clusters > n {
        return Err(Error::arg(format!(
            "cannot form {} clusters from {n} points",
            cfg.clusters
        )));
    }
    if points.cols() == 0 {
        return Err(Error::arg("points have zero dimension"));
    }
    if points.as_slice().iter().any(|v| !v.is_finite()) {
        return Err(Error::arg("points must be finite"));
    }

    let tol = cfg.rel_tol * mean_feature_variance(points);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut centers = plus_plus_init(points, cfg.clusters, &mut rng);
    let mut labels = assign(points, &centers);
    let inertia_of = |l: &[(usize, f64)]| l.iter().map(|&(_, d)| d).sum::<f64>();
    let mut history = vec![inertia_of(&labels)];
    let mut iterations_run = 0;

    for iter in 1..=cfg.max_iter {
        let next = update(points, &labels, cfg.clusters);
        let shift: f64 = next
            .data
            .iter()
            .zip(&centers.data)
            .map(|(a, b)| (a - b) * (a - b))
            .sum();
        centers = next;
        let relabeled = assign(points, &centers);
        let changed = relabeled.iter().zip(&labels).any(|(a, b)| a.0 != b.0);
        labels = relabeled;
        history.push(inertia_of(&labels));
        iterations_run = iter;
        if !changed || shift <= tol {
            break;
        }
    }

    let centroids = Matrix::new(
        cfg.clusters,
        points.cols(),
        centers.data.iter().map(|&v| v as f32).collect(),
    )?;
    Ok(Clustering {
        centroids,
        assignments: labels.iter().map(|&(c, _)| c).collect(),
        inertia: *history.last().unwrap(),
        iterations_run,
        inertia_history: history,
    })
}

/// Majority label and its share for every non-empty cluster. Label ties go
/// to the lower label.
pub fn cluster_summary(clustering: &Clustering, labels: &[u32]) -> Result<Vec<ClusterSummary>> {
    if labels.len() != clustering.assignments.len() {
        return Err(Error::arg(format!(
            "{} labels for {} clustered points",
            labels.len(),
            clustering.assignments.len()
        )));
    }
    let k = clustering.centroids.rows();
    let mut counts: Vec<BTreeMap<u32, usize>> = vec![BTreeMap::new(); k];
    for (&c, &l) in clustering.assignments.iter().zip(labels) {
        *counts[c].entry(l).or_default() += 1;
    }
    Ok(counts
        .iter()
        .enumerate()
        .filter_map(|(cluster, hist)| {
            let size: usize = hist.values().sum();
            // BTreeMap iterates labels ascending, so `>` keeps the lowest on ties.
            let (label, count) =
                hist.iter()
                    .fold(None, |best: Option<(u32, usize)>, (&l, &c)| match best {
                        Some((_, bc)) if bc >= c => best,
                        _ => Some((l, c)),
                    })?;
            Some(ClusterSummary {
                cluster,
                centroid: clustering.centroids.row(cluster).to_vec(),
                majority_label: label,
                majority_fraction: count as f64 / size as f64,
                size,
            })
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand_distr::{Distribution, StandardNormal};

    #[test]
    fn distinct_points_each_get_a_cluster() {
        let pts =
            Matrix::from_rows(&[[0.0f32, 0.0], [5.0, 1.0], [-3.0, 2.0], [7.5, -4.0]]).unwrap();
        let c = kmeans_fit(&pts, &KMeansConfig::new(4, 3)).unwrap();
        assert_eq!(c.inertia, 0.0);
        let mut cents: Vec<Vec<f32>> = c.centroids.iter_rows().map(<[f32]>::to_vec).collect();
        let mut rows: Vec<Vec<f32>> = pts.iter_rows().map(<[f32]>::to_vec).collect();
        cents.sort_by(|a, b| a.partial_cmp(b).unwrap());
        rows.sort_by(|a, b| a.partial_cmp(b).unwrap());
        assert_eq!(cents, rows);
    }

    #[test]
    fn two_blobs_recover_sample_means() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let n = 200;
        let true_means = [[-10.0f64, 0.0, 5.0], [10.0, 3.0, -5.0]];
        let mut rows = Vec::new();
        for m in &true_means {
            for _ in 0..n {
                let r: Vec<f32> = m
                    .iter()
                    .map(|&c| {
                        let z: f64 = StandardNormal.sample(&mut rng);
                        (c + z) as f32
                    })
                    .collect();
                rows.push(r);
            }
        }
        let pts = Matrix::from_rows(&rows).unwrap();
        let c = kmeans_fit(&pts, &KMeansConfig::new(2, 1)).unwrap();
        let bound = 3.0 / (n as f64).sqrt();
        for (b, m) in true_means.iter().enumerate() {
            // Sample mean of each true blob.
            let mut sm = [0.0f64; 3];
            for r in &rows[b * n..(b + 1) * n] {
                sm.iter_mut()
                    .zip(r)
                    .for_each(|(s, &v)| *s += f64::from(v) / n as f64);
            }
            let nearest = (0..2)
                .map(|j| c.centroids.row(j))
                .min_by(|x, y| sq_dist(x, m).total_cmp(&sq_dist(y, m)))
                .unwrap();
            for (got, want) in nearest.iter().zip(&sm) {
                assert!((f64::from(*got) - want).abs() < bound);
            }
            for (got, want) in nearest.iter().zip(m) {
                assert!((f64::from(*got) - want).abs() < bound);
            }
        }
    }

    #[test]
    fn deterministic_for_seed() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let data: Vec<f32> = (0..300).map(|_| rng.random_range(-1.0..1.0)).collect();
        let pts = Matrix::new(100, 3, data).unwrap();
        let a = kmeans_fit(&pts, &KMeansConfig::new(7, 9)).unwrap();
        let b = kmeans_fit(&pts, &KMeansConfig::new(7, 9)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn inertia_never_increases() {
        for seed in 0..20 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let data: Vec<f32> = (0..400).map(|_| rng.random_range(-3.0..3.0)).collect();
            let pts = Matrix::new(200, 2, data).unwrap();
            let c = kmeans_fit(&pts, &KMeansConfig::new(12, seed)).unwrap();
            for w in c.inertia_history.windows(2) {
                assert!(w[1] <= w[0], "seed {seed}: {:?}", c.inertia_history);
            }
        }
    }

    #[test]
    fn duplicate_points_with_too_many_clusters() {
        let pts = Matrix::from_rows(&[[1.0f32], [1.0], [1.0], [2.0]]).unwrap();
        let c = kmeans_fit(&pts, &KMeansConfig::new(3, 0)).unwrap();
        assert_eq!(c.inertia, 0.0);
        let s = cluster_summary(&c, &[0, 0, 1, 1]).unwrap();
        let total: usize = s.iter().map(|x| x.size).sum();
        assert_eq!(total, 4);
        assert!(s.iter().all(|x| x.majority_fraction > 0.0));
    }

    #[test]
    fn too_many_clusters_is_argument_error() {
        let pts = Matrix::zeros(3, 2);
        assert!(matches!(
            kmeans_fit(&pts, &KMeansConfig::new(4, 0)),
            Err(Error::Argument(_))
        ));
        assert!(kmeans_fit(&pts, &KMeansConfig::new(0, 0)).is_err());
    }

    fn one_cluster(n: usize) -> Clustering {
        Clustering {
            centroids: Matrix::zeros(1, 1),
            assignments: vec![0; n],
            inertia: 0.0,
            iterations_run: 0,
            inertia_history: vec![0.0],
        }
    }

    #[test]
    fn summary_counts_majority() {
        let s = cluster_summary(&one_cluster(3), &[0, 0, 1]).unwrap();
        assert_eq!(s[0].majority_label, 0);
        assert_eq!(s[0].majority_fraction, 2.0 / 3.0);
        assert_eq!(s[0].size, 3);
    }

    #[test]
    fn summary_tie_prefers_lower_label() {
        let s = cluster_summary(&one_cluster(4), &[3, 1, 3, 1]).unwrap();
        assert_eq!(s[0].majority_label, 1);
        assert_eq!(s[0].majority_fraction, 0.5);
    }

    #[test]
    fn single_label_corpus_is_pure() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let data: Vec<f32> = (0..100).map(|_| rng.random_range(-1.0..1.0)).collect();
        let pts = Matrix::new(50, 2, data).unwrap();
        let c = kmeans_fit(&pts, &KMeansConfig::new(5, 5)).unwrap();
        let s = cluster_summary(&c, &[4; 50]).unwrap();
        assert!(s
            .iter()
            .all(|x| x.majority_fraction == 1.0 && x.majority_label == 4));
    }

    #[test]
    fn summary_length_mismatch() {
        assert!(cluster_summary(&one_cluster(3), &[0, 1]).is_err());
    }
}
