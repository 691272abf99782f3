//! Embedding-quality analysis: intra/inter-class cosine statistics and k-means
//! cluster accuracy.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use rand::seq::index::sample;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::neural::dot;
use crate::seed::{derive_indexed, rng_from};

/// Pair count above which cosine statistics are estimated from a sample.
pub const DEFAULT_PAIR_CAP: usize = 1_000_000;
pub const KMEANS_MAX_ITERS: usize = 100;
pub const KMEANS_TOL: f64 = 1e-6;

pub fn cosine(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::Shape(format!(
            "cosine of vectors of length {} and {}",
            a.len(),
            b.len()
        )));
    }
    let na = dot(a, a).sqrt();
    let nb = dot(b, b).sqrt();
    if na == 0.0 || nb == 0.0 {
        return Err(Error::Numeric("cosine of a zero vector".into()));
    }
    Ok((dot(a, b) / (na * nb)).clamp(-1.0, 1.0))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CosineGapReport {
    pub intra: f64,
    pub inter: f64,
    pub delta: f64,
    pub intra_pairs: usize,
    pub inter_pairs: usize,
    /// Whether the pairs were a seeded sample rather than all pairs.
    pub sampled: bool,
    pub cap: usize,
    pub seed: u64,
}

/// Index of the `r`-th unordered pair `(i, j)`, `i < j`, in lexicographic order.
fn pair_at(mut r: usize, n: usize) -> (usize, usize) {
    let mut i = 0;
    loop {
        let row = n - 1 - i;
        if r < row {
            return (i, i + 1 + r);
        }
        r -= row;
        i += 1;
    }
}

/// Mean cosine over same-label and different-label pairs. Above `cap` total
/// pairs, `cap` pairs are drawn without replacement using `seed`.
pub fn intra_inter_stats<V: AsRef<[f64]>, S: AsRef<str>>(
    embeddings: &[V],
    labels: &[S],
    cap: usize,
    seed: u64,
) -> Result<CosineGapReport> {
    let n = embeddings.len();
    if n != labels.len() {
        return Err(Error::Argument(format!(
            "{n} embeddings but {} labels",
            labels.len()
        )));
    }
    if n < 2 {
        return Err(Error::Evaluation("need at least 2 labelled points".into()));
    }
    let unit: Vec<Vec<f64>> = embeddings
        .iter()
        .map(|v| {
            let v = v.as_ref();
            let norm = dot(v, v).sqrt();
            if norm == 0.0 {
                Err(Error::Numeric("cosine of a zero vector".into()))
            } else {
                Ok(v.iter().map(|x| x / norm).collect())
            }
        })
        .collect::<Result<_>>()?;
    let dim = unit[0].len();
    if unit.iter().any(|u| u.len() != dim) {
        return Err(Error::Shape("embeddings differ in length".into()));
    }
    let total = n * (n - 1) / 2;
    let (mut intra, mut inter) = (0.0, 0.0);
    let (mut n_intra, mut n_inter) = (0usize, 0usize);
    let mut visit = |i: usize, j: usize| {
        let c = dot(&unit[i], &unit[j]).clamp(-1.0, 1.0);
        if labels[i].as_ref() == labels[j].as_ref() {
            intra += c;
            n_intra += 1;
        } else {
            inter += c;
            n_inter += 1;
        }
    };
    let sampled = total > cap;
    if sampled {
        let mut rng = rng_from(seed);
        let mut picks = sample(&mut rng, total, cap).into_vec();
        picks.sort_unstable();
        for r in picks {
            let (i, j) = pair_at(r, n);
            visit(i, j);
        }
    } else {
        for i in 0..n {
            for j in i + 1..n {
                visit(i, j);
            }
        }
    }
    if n_intra == 0 {
        return Err(Error::Evaluation("no same-label pair".into()));
    }
    if n_inter == 0 {
        return Err(Error::Evaluation("no different-label pair".into()));
    }
    let intra = intra / n_intra as f64;
    let inter = inter / n_inter as f64;
    Ok(CosineGapReport {
        intra,
        inter,
        delta: intra - inter,
        intra_pairs: n_intra,
        inter_pairs: n_inter,
        sampled,
        cap,
        seed,
    })
}

/// The `m` most frequent labels, ties broken lexicographically.
pub fn top_m_labels<S: AsRef<str>>(labels: &[S], m: usize) -> Vec<String> {
    let mut counts: BTreeMap<&str, usize> = BTreeMap::new();
    for l in labels {
        *counts.entry(l.as_ref()).or_default() += 1;
    }
    let mut ranked: Vec<(&str, usize)> = counts.into_iter().collect();
    ranked.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(b.0)));
    ranked
        .into_iter()
        .take(m)
        .map(|(l, _)| l.to_string())
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct KMeansResult {
    pub assignments: Vec<usize>,
    pub centers: Vec<Vec<f64>>,
    /// Within-cluster sum of squares after each iteration.
    pub inertia: Vec<f64>,
    pub iterations: usize,
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn nearest(point: &[f64], centers: &[Vec<f64>]) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (c, center) in centers.iter().enumerate() {
        let d = sq_dist(point, center);
        if d < best.1 {
            best = (c, d);
        }
    }
    best
}

fn kmeans_pp<V: AsRef<[f64]>>(points: &[V], n: usize, seed: u64) -> Vec<Vec<f64>> {
    let mut rng = rng_from(seed);
    let m = points.len();
    let mut centers = vec![points[rng.random_range(0..m)].as_ref().to_vec()];
    let mut d2: Vec<f64> = points
        .iter()
        .map(|p| sq_dist(p.as_ref(), &centers[0]))
        .collect();
    while centers.len() < n {
        let total: f64 = d2.iter().sum();
        let pick = if total > 0.0 {
            let target = rng.random::<f64>() * total;
            let mut acc = 0.0;
            let mut pick = m - 1;
            for (i, d) in d2.iter().enumerate() {
                acc += d;
                if acc > target && *d > 0.0 {
                    pick = i;
                    break;
                }
            }
            pick
        } else {
            rng.random_range(0..m)
        };
        let c = points[pick].as_ref().to_vec();
        for (d, p) in d2.iter_mut().zip(points) {
            *d = d.min(sq_dist(p.as_ref(), &c));
        }
        centers.push(c);
    }
    centers
}

/// Lloyd's algorithm from seeded k-means++ centers. Stops when no center moves
/// by `KMEANS_TOL` or after `KMEANS_MAX_ITERS` iterations. A cluster left empty
/// takes the point farthest from its current center.
pub fn kmeans<V: AsRef<[f64]>>(points: &[V], n: usize, seed: u64) -> Result<KMeansResult> {
    let m = points.len();
    if n == 0 {
        return Err(Error::Argument("cluster count must be at least 1".into()));
    }
    if n > m {
        return Err(Error::Argument(format!(
            "{n} clusters requested for {m} points"
        )));
    }
    let dim = points[0].as_ref().len();
    if points.iter().any(|p| p.as_ref().len() != dim) {
        return Err(Error::Shape("points differ in length".into()));
    }
    let mut centers = kmeans_pp(points, n, seed);
    let mut assignments = vec![0usize; m];
    let mut inertia = Vec::new();
    let mut iterations = 0;
    while iterations < KMEANS_MAX_ITERS {
        iterations += 1;
        let mut dists = vec![0.0; m];
        let mut sizes = vec![0usize; n];
        for (i, p) in points.iter().enumerate() {
            let (c, d) = nearest(p.as_ref(), &centers);
            assignments[i] = c;
            dists[i] = d;
            sizes[c] += 1;
        }
        for empty in 0..n {
            if sizes[empty] > 0 {
                continue;
            }
            let far = (0..m)
                .filter(|&i| sizes[assignments[i]] > 1)
                .fold(None, |best: Option<usize>, i| match best {
                    Some(b) if dists[b] >= dists[i] => Some(b),
                    _ => Some(i),
                })
                .expect("n <= m leaves a cluster with two points");
            sizes[assignments[far]] -= 1;
            assignments[far] = empty;
            sizes[empty] = 1;
            dists[far] = 0.0;
        }
        let mut next = vec![vec![0.0; dim]; n];
        for (i, p) in points.iter().enumerate() {
            crate::neural::axpy(1.0, p.as_ref(), &mut next[assignments[i]]);
        }
        for (c, center) in next.iter_mut().enumerate() {
            let inv = 1.0 / sizes[c] as f64;
            center.iter_mut().for_each(|x| *x *= inv);
        }
        let shift = centers
            .iter()
            .zip(&next)
            .map(|(a, b)| sq_dist(a, b).sqrt())
            .fold(0.0, f64::max);
        centers = next;
        inertia.push(
            points
                .iter()
                .zip(&assignments)
                .map(|(p, &c)| sq_dist(p.as_ref(), &centers[c]))
                .sum(),
        );
        if shift < KMEANS_TOL {
            break;
        }
    }
    Ok(KMeansResult {
        assignments,
        centers,
        inertia,
        iterations,
    })
}

/// `counts[i][j]`: points with label `labels[i]` assigned to cluster `j`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    pub labels: Vec<String>,
    pub counts: Vec<Vec<u64>>,
}

impl ConfusionMatrix {
    pub fn from_counts(counts: Vec<Vec<u64>>) -> Self {
        let labels = (0..counts.len()).map(|i| i.to_string()).collect();
        Self { labels, counts }
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().flatten().sum()
    }
}

pub fn confusion_matrix<S: AsRef<str>>(
    labels: &[S],
    assignments: &[usize],
    universe: &[String],
    n: usize,
) -> Result<ConfusionMatrix> {
    if labels.len() != assignments.len() {
        return Err(Error::Argument(format!(
            "{} labels but {} assignments",
            labels.len(),
            assignments.len()
        )));
    }
    if labels.is_empty() {
        return Err(Error::Argument("confusion matrix of no points".into()));
    }
    let index: BTreeMap<&str, usize> = universe
        .iter()
        .enumerate()
        .map(|(i, l)| (l.as_str(), i))
        .collect();
    let mut counts = vec![vec![0u64; n]; universe.len()];
    for (l, &a) in labels.iter().zip(assignments) {
        let row = *index.get(l.as_ref()).ok_or_else(|| {
            Error::Data(format!("label `{}` not in the label universe", l.as_ref()))
        })?;
        if a >= n {
            return Err(Error::Argument(format!(
                "cluster {a} out of range for {n} clusters"
            )));
        }
        counts[row][a] += 1;
    }
    Ok(ConfusionMatrix {
        labels: universe.to_vec(),
        counts,
    })
}

/// Best cluster per label: argmax of the row, ties to the smallest index.
pub fn best_clusters(c: &ConfusionMatrix) -> Vec<usize> {
    c.counts
        .iter()
        .map(|row| {
            row.iter()
                .enumerate()
                .fold(0, |b, (j, v)| if *v > row[b] { j } else { b })
        })
        .collect()
}

/// Sum over labels of the normalised count in the label's best cluster. The
/// integer sum is divided once so the value is exact.
pub fn cluster_accuracy(c: &ConfusionMatrix) -> Result<f64> {
    let total = c.total();
    if total == 0 {
        return Err(Error::Argument(
            "cluster accuracy of an all-zero matrix".into(),
        ));
    }
    let best = best_clusters(c);
    let hit: u64 = c.counts.iter().zip(&best).map(|(row, &j)| row[j]).sum();
    Ok(hit as f64 / total as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AccuracyPoint {
    pub n: usize,
    pub acc: f64,
    pub iterations: usize,
}

/// Cluster the points bearing the `m` most frequent labels for each cluster
/// count and report accuracy.
pub fn accuracy_curve<V: AsRef<[f64]>, S: AsRef<str>>(
    embeddings: &[V],
    labels: &[S],
    m: usize,
    n_values: &[usize],
    seed: u64,
) -> Result<Vec<AccuracyPoint>> {
    if embeddings.len() != labels.len() {
        return Err(Error::Argument(
            "embeddings and labels differ in count".into(),
        ));
    }
    let universe = top_m_labels(labels, m);
    let keep: Vec<usize> = (0..labels.len())
        .filter(|&i| universe.iter().any(|u| u == labels[i].as_ref()))
        .collect();
    let points: Vec<&[f64]> = keep.iter().map(|&i| embeddings[i].as_ref()).collect();
    let kept_labels: Vec<&str> = keep.iter().map(|&i| labels[i].as_ref()).collect();
    n_values
        .iter()
        .map(|&n| {
            let km = kmeans(&points, n, derive_indexed(seed, "kmeans", n as u64))?;
            let c = confusion_matrix(&kept_labels, &km.assignments, &universe, n)?;
            Ok(AccuracyPoint {
                n,
                acc: cluster_accuracy(&c)?,
                iterations: km.iterations,
            })
        })
        .collect()
}

/// One row per (variant, level) with intra, inter and delta.
pub fn cosine_gap_csv(rows: &[(String, String, CosineGapReport)]) -> String {
    let mut out = String::from("variant,level,intra,inter,delta,intra_pairs,inter_pairs,sampled\n");
    for (variant, level, r) in rows {
        let _ = writeln!(
            out,
            "{variant},{level},{},{},{},{},{},{}",
            r.intra, r.inter, r.delta, r.intra_pairs, r.inter_pairs, r.sampled
        );
    }
    out
}

/// One row per (variant, n).
pub fn accuracy_csv(rows: &[(String, Vec<AccuracyPoint>)]) -> String {
    let mut out = String::from("variant,n,acc\n");
    for (variant, points) in rows {
        for p in points {
            let _ = writeln!(out, "{variant},{},{}", p.n, p.acc);
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cosine_examples() {
        assert_eq!(cosine(&[0.3, 0.4], &[0.3, 0.4]).unwrap(), 1.0);
        assert_eq!(cosine(&[1.0, 0.0], &[0.0, 1.0]).unwrap(), 0.0);
        assert_eq!(cosine(&[1.0, 0.0], &[-1.0, 0.0]).unwrap(), -1.0);
        assert!(matches!(
            cosine(&[0.0, 0.0], &[1.0, 0.0]),
            Err(Error::Numeric(_))
        ));
    }

    #[test]
    fn gap_examples() {
        let pts = [vec![1.0, 0.0], vec![1.0, 0.0], vec![0.0, 1.0]];
        let r = intra_inter_stats(&pts, &["A", "A", "B"], DEFAULT_PAIR_CAP, 0).unwrap();
        assert_eq!((r.intra, r.inter, r.delta), (1.0, 0.0, 1.0));
        assert_eq!((r.intra_pairs, r.inter_pairs), (1, 2));
        let same = vec![vec![2.0, 1.0]; 4];
        let r = intra_inter_stats(&same, &["A", "A", "B", "C"], DEFAULT_PAIR_CAP, 0).unwrap();
        assert!(
            (r.intra - 1.0).abs() < 1e-12 && (r.inter - 1.0).abs() < 1e-12 && r.delta.abs() < 1e-12
        );
        assert!(matches!(
            intra_inter_stats(&pts, &["A", "B", "C"], DEFAULT_PAIR_CAP, 0),
            Err(Error::Evaluation(_))
        ));
    }

    #[test]
    fn pair_indexing_enumerates_lexicographically() {
        let n = 6;
        let mut r = 0;
        for i in 0..n {
            for j in i + 1..n {
                assert_eq!(pair_at(r, n), (i, j));
                r += 1;
            }
        }
    }

    #[test]
    fn sampled_stats_are_seeded() {
        let pts: Vec<Vec<f64>> = (0..40)
            .map(|i| vec![(i as f64).sin(), (i as f64).cos() + 2.0])
            .collect();
        let labels: Vec<String> = (0..40).map(|i| format!("l{}", i % 4)).collect();
        let a = intra_inter_stats(&pts, &labels, 100, 7).unwrap();
        let b = intra_inter_stats(&pts, &labels, 100, 7).unwrap();
        assert_eq!(a, b);
        assert!(a.sampled);
        assert_eq!(a.intra_pairs + a.inter_pairs, 100);
    }

    #[test]
    fn kmeans_examples() {
        let pts = [
            vec![0.0, 0.0],
            vec![0.0, 0.1],
            vec![10.0, 10.0],
            vec![10.0, 10.1],
        ];
        let r = kmeans(&pts, 2, 0).unwrap();
        let a = &r.assignments;
        assert_eq!(a[0], a[1]);
        assert_eq!(a[2], a[3]);
        assert_ne!(a[0], a[2]);
        let own = kmeans(&pts, 4, 3).unwrap();
        let mut ids = own.assignments.clone();
        ids.sort_unstable();
        assert_eq!(ids, vec![0, 1, 2, 3]);
        assert_eq!(kmeans(&pts, 2, 9).unwrap(), kmeans(&pts, 2, 9).unwrap());
        assert!(matches!(kmeans(&pts, 5, 0), Err(Error::Argument(_))));
    }

    #[test]
    fn kmeans_repairs_duplicates() {
        let pts = vec![vec![1.0, 1.0]; 5];
        let r = kmeans(&pts, 5, 1).unwrap();
        let mut ids = r.assignments.clone();
        ids.sort_unstable();
        assert_eq!(ids, vec![0, 1, 2, 3, 4]);
    }

    #[test]
    fn confusion_and_accuracy_examples() {
        let universe = vec!["A".to_string(), "B".to_string()];
        let c = confusion_matrix(&["A", "A", "B"], &[0, 0, 1], &universe, 2).unwrap();
        assert_eq!(c.counts, vec![vec![2, 0], vec![0, 1]]);
        assert!(matches!(
            confusion_matrix(&["C"], &[0], &universe, 2),
            Err(Error::Data(_))
        ));
        assert!(confusion_matrix::<&str>(&[], &[], &universe, 2).is_err());
        let acc = |m: Vec<Vec<u64>>| cluster_accuracy(&ConfusionMatrix::from_counts(m)).unwrap();
        assert_eq!(acc(vec![vec![5, 0], vec![0, 5]]), 1.0);
        assert_eq!(acc(vec![vec![3, 1], vec![0, 4]]), 0.875);
        assert_eq!(acc(vec![vec![5, 0], vec![5, 0]]), 1.0);
        assert!(cluster_accuracy(&ConfusionMatrix::from_counts(vec![vec![0, 0]])).is_err());
    }

    #[test]
    fn top_labels_by_frequency_then_name() {
        let labels = ["b", "a", "c", "b", "a", "d"];
        assert_eq!(top_m_labels(&labels, 3), vec!["a", "b", "c"]);
    }

    #[test]
    fn accuracy_curve_reports_each_n() {
        let pts: Vec<Vec<f64>> = (0..30)
            .map(|i| vec![(i % 3) as f64 * 10.0, (i as f64 * 0.1).sin()])
            .collect();
        let labels: Vec<String> = (0..30).map(|i| format!("u{}", i % 3)).collect();
        let curve = accuracy_curve(&pts, &labels, 3, &[3, 6], 0).unwrap();
        assert_eq!(curve.len(), 2);
        assert_eq!(curve[0].acc, 1.0);
        assert!(accuracy_csv(&[("a".into(), curve)]).starts_with("variant,n,acc\na,3,1\n"));
    }
}
