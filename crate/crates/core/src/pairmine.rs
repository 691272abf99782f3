//! Positive / negative pair identification inside one mini-batch.
//!
//! Two strategies are provided:
//!
//! * [`knn_graph_pairs`]: undirected k-nearest-neighbour graph; edges are
//!   positives and every other pair is negative (optionally capped per point).
//! * [`topk_global_pairs`]: over the fully connected batch graph, the `k`
//!   shortest pairs are positives and `k` pairs drawn uniformly from the rest are
//!   negatives. This keeps rare units from being forced onto their nearest
//!   foreign neighbours and frequent units from being split.
//!
//! Distances are Euclidean. All ties are broken lexicographically by
//! `(distance, i, j)`, so mining is a pure function of inputs and seed.

use std::collections::BTreeSet;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use rand::seq::index::sample;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seed::rng_from;

/// Unordered pair of batch positions, stored with `i < j`.
pub type Pair = (usize, usize);

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct PairSets {
    pub positives: Vec<Pair>,
    pub negatives: Vec<Pair>,
    pub k: usize,
}

impl PairSets {
    pub fn len(&self) -> usize {
        self.positives.len() + self.negatives.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Check index bounds, ordering, duplicates and disjointness for a batch of
    /// `n` points.
    pub fn validate(&self, n: usize) -> Result<()> {
        let mut seen = BTreeSet::new();
        for (list, name) in [(&self.positives, "positive"), (&self.negatives, "negative")] {
            for &(i, j) in list {
                if i >= j || j >= n {
                    return Err(Error::Argument(format!(
                        "{name} pair ({i}, {j}) invalid for batch of {n}"
                    )));
                }
                if !seen.insert((i, j)) {
                    return Err(Error::Argument(format!("pair ({i}, {j}) listed twice")));
                }
            }
        }
        Ok(())
    }
}

/// Symmetric Euclidean distance matrix with an evaluation counter.
#[derive(Debug, Clone, PartialEq)]
pub struct DistanceMatrix {
    n: usize,
    values: Vec<f64>,
    evaluations: u64,
}

impl DistanceMatrix {
    pub fn n(&self) -> usize {
        self.n
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.values[i * self.n + j]
    }

    /// Number of vector-pair distance computations performed.
    pub fn evaluations(&self) -> u64 {
        self.evaluations
    }

    pub fn to_rows(&self) -> Vec<Vec<f64>> {
        self.values.chunks(self.n).map(<[f64]>::to_vec).collect()
    }

    /// All unordered pairs sorted by `(distance, i, j)`.
    fn sorted_pairs(&self) -> Vec<Pair> {
        let mut pairs = all_pairs(self.n);
        pairs.sort_by(|a, b| {
            self.get(a.0, a.1)
                .total_cmp(&self.get(b.0, b.1))
                .then(a.cmp(b))
        });
        pairs
    }
}

pub(crate) fn all_pairs(n: usize) -> Vec<Pair> {
    let mut out = Vec::with_capacity(n * n.saturating_sub(1) / 2);
    for i in 0..n {
        for j in i + 1..n {
            out.push((i, j));
        }
    }
    out
}

pub fn euclidean(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt()
}

pub fn pairwise_distances<V: AsRef<[f64]>>(vectors: &[V]) -> Result<DistanceMatrix> {
    let n = vectors.len();
    if n < 2 {
        return Err(Error::Argument(format!("need at least 2 vectors, got {n}")));
    }
    let d = vectors[0].as_ref().len();
    if let Some(bad) = vectors.iter().position(|v| v.as_ref().len() != d) {
        return Err(Error::Shape(format!(
            "vector {bad} has dimension {}, expected {d}",
            vectors[bad].as_ref().len()
        )));
    }
    let mut values = vec![0.0; n * n];
    for i in 0..n {
        for j in i + 1..n {
            let dist = euclidean(vectors[i].as_ref(), vectors[j].as_ref());
            values[i * n + j] = dist;
            values[j * n + i] = dist;
        }
    }
    Ok(DistanceMatrix {
        n,
        values,
        evaluations: (n * (n - 1) / 2) as u64,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum MiningMode {
    KnnGraph,
    #[default]
    TopkGlobal,
}

impl std::fmt::Display for MiningMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            MiningMode::KnnGraph => "knn_graph",
            MiningMode::TopkGlobal => "topk_global",
        })
    }
}

/// Negative selection for the k-NN graph strategy.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum KnnNegatives {
    /// Every non-edge pair.
    #[default]
    All,
    /// At most `k` seeded non-edge partners per point.
    CapPerPoint,
}

fn knn_positive_set(dist: &DistanceMatrix, k: usize) -> Result<BTreeSet<Pair>> {
    let n = dist.n();
    if k == 0 || k + 1 > n {
        return Err(Error::Argument(format!(
            "k = {k} out of range for batch of {n}"
        )));
    }
    let mut positives = BTreeSet::new();
    let mut order: Vec<usize> = Vec::with_capacity(n - 1);
    for i in 0..n {
        order.clear();
        order.extend((0..n).filter(|&j| j != i));
        order.sort_by(|&a, &b| dist.get(i, a).total_cmp(&dist.get(i, b)).then(a.cmp(&b)));
        for &j in &order[..k] {
            positives.insert((i.min(j), i.max(j)));
        }
    }
    Ok(positives)
}

/// k-NN graph mining on a precomputed distance matrix.
pub fn knn_graph_from_distances(
    dist: &DistanceMatrix,
    k: usize,
    negatives: KnnNegatives,
    seed: u64,
) -> Result<PairSets> {
    let n = dist.n();
    let positive_set = knn_positive_set(dist, k)?;
    let negatives = match negatives {
        KnnNegatives::All => all_pairs(n)
            .into_iter()
            .filter(|p| !positive_set.contains(p))
            .collect(),
        KnnNegatives::CapPerPoint => {
            let mut rng = rng_from(seed);
            let mut chosen = BTreeSet::new();
            for i in 0..n {
                let candidates: Vec<Pair> = (0..n)
                    .filter(|&j| j != i)
                    .map(|j| (i.min(j), i.max(j)))
                    .filter(|p| !positive_set.contains(p))
                    .collect();
                let take = k.min(candidates.len());
                for idx in sample(&mut rng, candidates.len(), take) {
                    chosen.insert(candidates[idx]);
                }
            }
            chosen.into_iter().collect()
        }
    };
    Ok(PairSets {
        positives: positive_set.into_iter().collect(),
        negatives,
        k,
    })
}

/// Undirected k-NN graph positives; all remaining pairs negative.
pub fn knn_graph_pairs<V: AsRef<[f64]>>(vectors: &[V], k: usize) -> Result<PairSets> {
    knn_graph_from_distances(&pairwise_distances(vectors)?, k, KnnNegatives::All, 0)
}

/// Global top-k mining on a precomputed distance matrix.
pub fn topk_global_from_distances(dist: &DistanceMatrix, k: usize, seed: u64) -> Result<PairSets> {
    let n = dist.n();
    let total = n * (n - 1) / 2;
    if k == 0 || 2 * k > total {
        return Err(Error::Argument(format!(
            "k = {k} needs {} pairs, batch of {n} has {total}",
            2 * k
        )));
    }
    let ranked = dist.sorted_pairs();
    let mut positives = ranked[..k].to_vec();
    positives.sort_unstable();
    let positive_set: BTreeSet<Pair> = positives.iter().copied().collect();
    let rest: Vec<Pair> = all_pairs(n)
        .into_iter()
        .filter(|p| !positive_set.contains(p))
        .collect();
    let mut negatives: Vec<Pair> = sample(&mut rng_from(seed), rest.len(), k)
        .into_iter()
        .map(|idx| rest[idx])
        .collect();
    negatives.sort_unstable();
    Ok(PairSets {
        positives,
        negatives,
        k,
    })
}

/// `k` shortest pairs as positives, `k` seeded uniform draws from the rest as
/// negatives.
pub fn topk_global_pairs<V: AsRef<[f64]>>(vectors: &[V], k: usize, seed: u64) -> Result<PairSets> {
    topk_global_from_distances(&pairwise_distances(vectors)?, k, seed)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MiningConfig {
    pub mode: MiningMode,
    pub k: usize,
    pub knn_negatives: KnnNegatives,
}

impl Default for MiningConfig {
    fn default() -> Self {
        Self {
            mode: MiningMode::TopkGlobal,
            k: 16,
            knn_negatives: KnnNegatives::All,
        }
    }
}

/// Pairs mined for one batch together with the distance work it took.
#[derive(Debug, Clone, PartialEq)]
pub struct MinedBatch {
    pub pairs: PairSets,
    pub distance_evaluations: u64,
}

pub fn mine<V: AsRef<[f64]>>(vectors: &[V], cfg: &MiningConfig, seed: u64) -> Result<MinedBatch> {
    let dist = pairwise_distances(vectors)?;
    let pairs = match cfg.mode {
        MiningMode::KnnGraph => knn_graph_from_distances(&dist, cfg.k, cfg.knn_negatives, seed)?,
        MiningMode::TopkGlobal => topk_global_from_distances(&dist, cfg.k, seed)?,
    };
    Ok(MinedBatch {
        pairs,
        distance_evaluations: dist.evaluations(),
    })
}

/// One audit record: corpus indices of the batch and the mined pairs as batch
/// positions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairDumpRecord {
    pub batch: Vec<usize>,
    pub positives: Vec<Pair>,
    pub negatives: Vec<Pair>,
}

pub fn write_pair_dump(path: impl AsRef<Path>, records: &[PairDumpRecord]) -> Result<()> {
    let path = path.as_ref();
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    for r in records {
        let line = serde_json::to_string(r).expect("pair records always serialize");
        writeln!(w, "{line}").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn line(xs: &[f64]) -> Vec<Vec<f64>> {
        xs.iter().map(|&x| vec![x]).collect()
    }

    #[test]
    fn three_four_five() {
        let d = pairwise_distances(&[vec![0.0, 0.0], vec![3.0, 4.0]]).unwrap();
        assert_eq!(d.get(0, 1), 5.0);
        assert_eq!(d.get(1, 0), 5.0);
        assert_eq!(d.get(0, 0), 0.0);
        assert_eq!(d.evaluations(), 1);
    }

    #[test]
    fn distance_errors() {
        assert!(matches!(
            pairwise_distances(&[vec![1.0]]),
            Err(Error::Argument(_))
        ));
        assert!(matches!(
            pairwise_distances(&[vec![1.0], vec![1.0, 2.0]]),
            Err(Error::Shape(_))
        ));
    }

    #[test]
    fn knn_two_clusters_on_a_line() {
        let p = knn_graph_pairs(&line(&[0.0, 1.0, 10.0, 11.0]), 1).unwrap();
        assert_eq!(p.positives, vec![(0, 1), (2, 3)]);
        assert_eq!(p.negatives, vec![(0, 2), (0, 3), (1, 2), (1, 3)]);
        p.validate(4).unwrap();
    }

    #[test]
    fn knn_complete_graph() {
        let p = knn_graph_pairs(&line(&[0.0, 2.0, 5.0, 9.0]), 3).unwrap();
        assert_eq!(p.positives, all_pairs(4));
        assert!(p.negatives.is_empty());
    }

    #[test]
    fn knn_coincident_points_dedup() {
        let p = knn_graph_pairs(&line(&[4.0, 4.0, 7.0]), 1).unwrap();
        assert_eq!(p.positives.iter().filter(|&&q| q == (0, 1)).count(), 1);
        assert!(p.positives.contains(&(0, 1)));
        // Point 2's nearest is point 0 by the index tie-break.
        assert_eq!(p.positives, vec![(0, 1), (0, 2)]);
    }

    #[test]
    fn knn_k_out_of_range() {
        assert!(matches!(
            knn_graph_pairs(&line(&[0.0, 1.0]), 2),
            Err(Error::Argument(_))
        ));
        assert!(matches!(
            knn_graph_pairs(&line(&[0.0, 1.0]), 0),
            Err(Error::Argument(_))
        ));
    }

    #[test]
    fn knn_negative_cap() {
        let pts = line(&[0.0, 1.0, 2.0, 10.0, 11.0, 12.0, 30.0]);
        let dist = pairwise_distances(&pts).unwrap();
        let capped = knn_graph_from_distances(&dist, 1, KnnNegatives::CapPerPoint, 3).unwrap();
        capped.validate(7).unwrap();
        assert!(capped.negatives.len() <= 7);
        let full = knn_graph_from_distances(&dist, 1, KnnNegatives::All, 3).unwrap();
        assert_eq!(capped.positives, full.positives);
        assert!(capped.negatives.iter().all(|p| full.negatives.contains(p)));
    }

    #[test]
    fn topk_two_clusters_on_a_line() {
        let p = topk_global_pairs(&line(&[0.0, 1.0, 10.0, 11.0]), 2, 5).unwrap();
        assert_eq!(p.positives, vec![(0, 1), (2, 3)]);
        assert_eq!(p.negatives.len(), 2);
        for n in &p.negatives {
            assert!([(0, 2), (1, 2), (0, 3), (1, 3)].contains(n));
        }
        assert_eq!(
            p,
            topk_global_pairs(&line(&[0.0, 1.0, 10.0, 11.0]), 2, 5).unwrap()
        );
    }

    #[test]
    fn topk_exhausts_all_pairs() {
        let p = topk_global_pairs(&line(&[0.0, 1.5, 3.0, 7.0]), 3, 0).unwrap();
        let mut all: Vec<Pair> = p.positives.iter().chain(&p.negatives).copied().collect();
        all.sort_unstable();
        assert_eq!(all, all_pairs(4));
        assert!(matches!(
            topk_global_pairs(&line(&[0.0, 1.5, 3.0, 7.0]), 4, 0),
            Err(Error::Argument(_))
        ));
    }

    #[test]
    fn dump_writes_one_line_per_batch() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("pairs.jsonl");
        let rec = PairDumpRecord {
            batch: vec![4, 2],
            positives: vec![(0, 1)],
            negatives: vec![],
        };
        write_pair_dump(&p, &[rec.clone(), rec]).unwrap();
        let text = std::fs::read_to_string(&p).unwrap();
        assert_eq!(text.lines().count(), 2);
        assert!(text.starts_with("{\"batch\":[4,2],\"positives\":[[0,1]]"));
    }
}
