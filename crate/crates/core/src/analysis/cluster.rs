use std::collections::BTreeMap;

use rand::RngExt;

use super::{check_matrix, rows, AnalysisError, Result};
use crate::seed;

pub const KMEANS_MAX_ITER: usize = 300;

#[derive(Debug, Clone, PartialEq)]
pub struct KMeansResult {
    pub assignments: Vec<usize>,
    /// `[k, d]`, row-major.
    pub centroids: Vec<f64>,
    pub inertia: f64,
    /// Inertia after each assignment step.
    pub inertia_log: Vec<f64>,
    pub iterations: usize,
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Lloyd's algorithm with k-means++ seeding.
///
/// Rows are visited in a canonical (lexicographic) order, so the result does
/// not depend on input row order: assignments follow the rows and cluster
/// numbering is fixed by the seeding sequence.
pub fn kmeans(x: &[f64], d: usize, k: usize, seed: u64) -> Result<KMeansResult> {
    let n = check_matrix(x, d)?;
    if k == 0 || n < k {
        return Err(AnalysisError::TooFewSamples { need: k.max(1), got: n });
    }
    let row = |i: usize| &x[i * d..(i + 1) * d];
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| {
        row(a)
            .iter()
            .zip(row(b))
            .map(|(p, q)| p.total_cmp(q))
            .find(|o| o.is_ne())
            .unwrap_or(std::cmp::Ordering::Equal)
    });
    let distinct = 1 + order.windows(2).filter(|w| row(w[0]) != row(w[1])).count();
    if distinct < k {
        return Err(AnalysisError::TooFewDistinct { distinct, k });
    }

    // k-means++: first center uniform, then proportional to squared distance.
    let mut rng = seed::derived_rng(seed, &[seed::tag("kmeans")]);
    let mut centroids = Vec::with_capacity(k * d);
    let first = order[rng.random_range(0..n)];
    centroids.extend_from_slice(row(first));
    let mut nearest: Vec<f64> = order.iter().map(|&i| sq_dist(row(i), row(first))).collect();
    for _ in 1..k {
        let total: f64 = nearest.iter().sum();
        let mut target = rng.random::<f64>() * total;
        let mut pick = order.len() - 1;
        for (pos, &w) in nearest.iter().enumerate() {
            if w > 0.0 && target < w {
                pick = pos;
                break;
            }
            target -= w;
        }
        // guard against rounding landing on an existing center
        if nearest[pick] == 0.0 {
            pick = nearest
                .iter()
                .enumerate()
                .max_by(|a, b| a.1.total_cmp(b.1))
                .map(|(p, _)| p)
                .expect("non-empty");
        }
        let c = row(order[pick]).to_vec();
        for (pos, &i) in order.iter().enumerate() {
            nearest[pos] = nearest[pos].min(sq_dist(row(i), &c));
        }
        centroids.extend(c);
    }

    let mut assignments = vec![usize::MAX; n];
    let mut inertia_log = Vec::new();
    let mut iterations = 0;
    loop {
        let mut changed = false;
        let mut inertia = 0.0;
        for &i in &order {
            let (best, dist) = rows(&centroids, d)
                .enumerate()
                .map(|(c, cen)| (c, sq_dist(row(i), cen)))
                .min_by(|a, b| a.1.total_cmp(&b.1))
                .expect("k >= 1");
            if assignments[i] != best {
                assignments[i] = best;
                changed = true;
            }
            inertia += dist;
        }
        inertia_log.push(inertia);
        if !changed || iterations == KMEANS_MAX_ITER {
            break;
        }
        iterations += 1;
        let mut sums = vec![0.0; k * d];
        let mut counts = vec![0usize; k];
        for &i in &order {
            let c = assignments[i];
            counts[c] += 1;
            for (s, v) in sums[c * d..(c + 1) * d].iter_mut().zip(row(i)) {
                *s += v;
            }
        }
        for c in 0..k {
            // an empty cluster keeps its previous centroid
            if counts[c] > 0 {
                for j in 0..d {
                    centroids[c * d + j] = sums[c * d + j] / counts[c] as f64;
                }
            }
        }
    }
    Ok(KMeansResult {
        assignments,
        centroids,
        inertia: *inertia_log.last().expect("at least one pass"),
        inertia_log,
        iterations,
    })
}

/// Cluster-vs-true-interval table after mode alignment.
#[derive(Debug, Clone, PartialEq)]
pub struct ConfusionMatrix {
    /// Distinct true interval lengths, ascending.
    pub labels: Vec<f64>,
    /// `counts[true][aligned]`.
    pub counts: Vec<Vec<usize>>,
    /// Label index each cluster maps to; `None` for empty clusters.
    pub cluster_to_label: Vec<Option<usize>>,
    pub empty_clusters: Vec<usize>,
}

impl ConfusionMatrix {
    pub fn total(&self) -> usize {
        self.counts.iter().flatten().sum()
    }

    /// Fraction of samples whose aligned cluster label equals their true label.
    pub fn purity(&self) -> f64 {
        let diag: usize = (0..self.labels.len()).map(|i| self.counts[i][i]).sum();
        diag as f64 / self.total() as f64
    }

    /// Tab-separated grid with interval labels as header row and column.
    pub fn to_tsv(&self) -> String {
        let mut s = String::from("true\\cluster");
        for l in &self.labels {
            s.push_str(&format!("\t{l}"));
        }
        s.push('\n');
        for (l, row) in self.labels.iter().zip(&self.counts) {
            s.push_str(&l.to_string());
            for c in row {
                s.push_str(&format!("\t{c}"));
            }
            s.push('\n');
        }
        s
    }
}

/// Maps each of `k` clusters to the modal true interval among its members
/// (ties go to the smaller interval) and tabulates true vs aligned label.
pub fn align_confusion(assignments: &[usize], k: usize, true_intervals: &[f64]) -> Result<ConfusionMatrix> {
    if assignments.len() != true_intervals.len() {
        return Err(AnalysisError::LengthMismatch(assignments.len(), true_intervals.len()));
    }
    if assignments.is_empty() {
        return Err(AnalysisError::TooFewSamples { need: 1, got: 0 });
    }
    if let Some(&bad) = assignments.iter().find(|&&a| a >= k) {
        return Err(AnalysisError::InvalidArgument(format!("cluster {bad} >= k = {k}")));
    }
    if true_intervals.iter().any(|v| !v.is_finite()) {
        return Err(AnalysisError::NonFinite);
    }
    let mut labels: Vec<f64> = true_intervals.to_vec();
    labels.sort_by(f64::total_cmp);
    labels.dedup();
    let label_index = |v: f64| labels.iter().position(|&l| l == v).expect("label collected");

    let mut members: Vec<BTreeMap<usize, usize>> = vec![BTreeMap::new(); k];
    for (&a, &t) in assignments.iter().zip(true_intervals) {
        *members[a].entry(label_index(t)).or_default() += 1;
    }
    // BTreeMap iterates ascending label index, so keeping the first maximum
    // resolves ties toward the smaller interval.
    let cluster_to_label: Vec<Option<usize>> = members
        .iter()
        .map(|m| {
            m.iter()
                .fold(None, |best: Option<(usize, usize)>, (&l, &c)| match best {
                    Some((_, bc)) if bc >= c => best,
                    _ => Some((l, c)),
                })
                .map(|(l, _)| l)
        })
        .collect();
    let empty_clusters = (0..k).filter(|&c| cluster_to_label[c].is_none()).collect();
    let mut counts = vec![vec![0; labels.len()]; labels.len()];
    for (&a, &t) in assignments.iter().zip(true_intervals) {
        let aligned = cluster_to_label[a].expect("cluster has a member");
        counts[label_index(t)][aligned] += 1;
    }
    Ok(ConfusionMatrix {
        labels,
        counts,
        cluster_to_label,
        empty_clusters,
    })
}

#[cfg(test)]
mod tests {
    use rand::seq::SliceRandom;
    use rand_distr::{Distribution, StandardNormal};

    use super::*;

    fn blobs(per: usize, spread: f64, s: u64) -> (Vec<f64>, Vec<f64>) {
        let mut rng = seed::rng(s);
        let mut x = Vec::new();
        let mut truth = Vec::new();
        for b in 0..5 {
            for _ in 0..per {
                for j in 0..3 {
                    let z: f64 = StandardNormal.sample(&mut rng);
                    let center = if j == b % 3 { 20.0 * (1 + b / 3) as f64 } else { 0.0 };
                    x.push(center + spread * z);
                }
                truth.push((b + 1) as f64);
            }
        }
        (x, truth)
    }

    #[test]
    fn single_cluster_is_the_mean() {
        let x = [1.0, 2.0, 3.0, 6.0, 5.0, 1.0];
        let r = kmeans(&x, 2, 1, 0).unwrap();
        assert!((r.centroids[0] - 3.0).abs() < 1e-12);
        assert!((r.centroids[1] - 3.0).abs() < 1e-12);
    }

    #[test]
    fn separated_blobs_recovered() {
        let (x, truth) = blobs(100, 0.5, 1);
        let r = kmeans(&x, 3, 5, 3).unwrap();
        let cm = align_confusion(&r.assignments, 5, &truth).unwrap();
        assert_eq!(cm.purity(), 1.0);
        assert!(r.inertia_log.windows(2).all(|w| w[1] <= w[0] + 1e-9));
    }

    #[test]
    fn row_permutation_does_not_matter() {
        let (x, truth) = blobs(40, 4.0, 2);
        let a = kmeans(&x, 3, 5, 9).unwrap();
        let mut perm: Vec<usize> = (0..truth.len()).collect();
        perm.shuffle(&mut seed::rng(5));
        let xp: Vec<f64> = perm.iter().flat_map(|&i| x[i * 3..i * 3 + 3].to_vec()).collect();
        let tp: Vec<f64> = perm.iter().map(|&i| truth[i]).collect();
        let b = kmeans(&xp, 3, 5, 9).unwrap();
        assert_eq!(a.inertia, b.inertia);
        assert_eq!(
            align_confusion(&a.assignments, 5, &truth).unwrap(),
            align_confusion(&b.assignments, 5, &tp).unwrap()
        );
    }

    #[test]
    fn too_few_distinct_points() {
        let x = [1.0, 1.0, 1.0, 2.0];
        assert_eq!(
            kmeans(&x, 1, 3, 0),
            Err(AnalysisError::TooFewDistinct { distinct: 2, k: 3 })
        );
    }

    #[test]
    fn identity_assignment_is_diagonal() {
        let truth = [1.0, 2.0, 3.0, 1.0, 2.0, 3.0];
        let a = [0, 1, 2, 0, 1, 2];
        let cm = align_confusion(&a, 3, &truth).unwrap();
        assert_eq!(cm.purity(), 1.0);
        assert_eq!(cm.counts, vec![vec![2, 0, 0], vec![0, 2, 0], vec![0, 0, 2]]);
    }

    #[test]
    fn shared_mode_leaves_a_column_empty() {
        let truth = [1.0, 1.0, 2.0, 1.0, 2.0];
        let a = [0, 0, 0, 1, 1];
        let cm = align_confusion(&a, 2, &truth).unwrap();
        // cluster 1 ties 1-1 and goes to the smaller interval
        assert_eq!(cm.cluster_to_label, vec![Some(0), Some(0)]);
        assert_eq!(cm.counts, vec![vec![3, 0], vec![2, 0]]);
        assert!(cm.purity() < 1.0);
        let cm = align_confusion(&[0, 0], 3, &[1.0, 2.0]).unwrap();
        assert_eq!(cm.empty_clusters, vec![1, 2]);
    }
}
