//! Query-by-example spoken term detection over embedded documents.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;

use rand::seq::IndexedRandom;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::evalcluster::cosine;
use crate::seed::{derive_seed, rng_from};

/// Per-term score `max_d tf(t, d) * ln(N / df(t))`, keyed by term.
pub fn tfidf_scores<S: AsRef<str>>(transcripts: &[Vec<S>]) -> BTreeMap<String, f64> {
    let n_docs = transcripts.len() as f64;
    let mut df: BTreeMap<&str, usize> = BTreeMap::new();
    let mut tfs: Vec<BTreeMap<&str, usize>> = Vec::with_capacity(transcripts.len());
    for doc in transcripts {
        let mut tf: BTreeMap<&str, usize> = BTreeMap::new();
        for t in doc {
            *tf.entry(t.as_ref()).or_default() += 1;
        }
        for t in tf.keys() {
            *df.entry(t).or_default() += 1;
        }
        tfs.push(tf);
    }
    let mut scores: BTreeMap<String, f64> = BTreeMap::new();
    for tf in &tfs {
        for (t, &count) in tf {
            let idf = (n_docs / df[t] as f64).ln();
            let s = count as f64 * idf;
            let e = scores.entry(t.to_string()).or_insert(s);
            if s > *e {
                *e = s;
            }
        }
    }
    scores
}

/// The `q` terms with the highest tf-idf score, ties broken lexicographically.
pub fn tfidf_select_queries<S: AsRef<str>>(
    transcripts: &[Vec<S>],
    q: usize,
) -> Result<Vec<String>> {
    if transcripts.is_empty() || transcripts.iter().all(Vec::is_empty) {
        return Err(Error::Argument("no transcripts".into()));
    }
    if q == 0 {
        return Err(Error::Argument("query count must be at least 1".into()));
    }
    let scores = tfidf_scores(transcripts);
    if q > scores.len() {
        return Err(Error::Argument(format!(
            "{q} queries requested from a vocabulary of {}",
            scores.len()
        )));
    }
    let mut ranked: Vec<(String, f64)> = scores.into_iter().collect();
    ranked.sort_by(|a, b| b.1.total_cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
    Ok(ranked.into_iter().take(q).map(|(t, _)| t).collect())
}

/// Mean of the `min(k, |doc|)` highest cosines between the query and the
/// document's words.
pub fn relevance_score<V: AsRef<[f64]>>(query: &[f64], doc: &[V], k: usize) -> Result<f64> {
    if doc.is_empty() {
        return Err(Error::Argument("empty document".into()));
    }
    if k == 0 {
        return Err(Error::Argument("top_k must be at least 1".into()));
    }
    let mut cos: Vec<f64> = doc
        .iter()
        .map(|w| cosine(w.as_ref(), query))
        .collect::<Result<_>>()?;
    // Stable sort keeps document order among equal cosines.
    cos.sort_by(|a, b| b.total_cmp(a));
    let k = k.min(cos.len());
    Ok(cos[..k].iter().sum::<f64>() / k as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Document {
    pub id: String,
    /// `(word token, embedding)` in document order.
    pub words: Vec<(String, Vec<f64>)>,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct DocumentIndex {
    pub documents: Vec<Document>,
}

impl DocumentIndex {
    pub fn new(documents: Vec<Document>) -> Result<Self> {
        let mut dim = None;
        for d in &documents {
            if d.words.is_empty() {
                return Err(Error::Data(format!("document `{}` is empty", d.id)));
            }
            for (_, v) in &d.words {
                if *dim.get_or_insert(v.len()) != v.len() {
                    return Err(Error::Dimension(format!(
                        "document `{}` mixes embedding sizes",
                        d.id
                    )));
                }
            }
        }
        Ok(Self { documents })
    }

    pub fn transcripts(&self) -> Vec<Vec<&str>> {
        self.documents
            .iter()
            .map(|d| d.words.iter().map(|(t, _)| t.as_str()).collect())
            .collect()
    }

    /// Ids of documents whose transcript contains `term`.
    pub fn containing(&self, term: &str) -> BTreeSet<String> {
        self.documents
            .iter()
            .filter(|d| d.words.iter().any(|(t, _)| t == term))
            .map(|d| d.id.clone())
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuerySpec {
    pub term: String,
    pub embedding: Vec<f64>,
    pub relevant: BTreeSet<String>,
}

/// Documents by descending relevance score, ties by document id.
pub fn rank_documents(
    query: &QuerySpec,
    index: &DocumentIndex,
    k: usize,
) -> Result<Vec<(String, f64)>> {
    if index.documents.is_empty() {
        return Err(Error::Argument("empty document index".into()));
    }
    let mut scored: Vec<(String, f64)> = index
        .documents
        .iter()
        .map(|d| {
            let words: Vec<&[f64]> = d.words.iter().map(|(_, v)| v.as_slice()).collect();
            Ok((d.id.clone(), relevance_score(&query.embedding, &words, k)?))
        })
        .collect::<Result<_>>()?;
    scored.sort_by(|a, b| b.1.total_cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
    Ok(scored)
}

/// Average precision of one ranking, or `None` if nothing is relevant.
pub fn average_precision<S: AsRef<str>>(ranking: &[S], relevant: &BTreeSet<String>) -> Option<f64> {
    if relevant.is_empty() {
        return None;
    }
    let mut hits = 0usize;
    let mut sum = 0.0;
    for (r, id) in ranking.iter().enumerate() {
        if relevant.contains(id.as_ref()) {
            hits += 1;
            sum += hits as f64 / (r + 1) as f64;
        }
    }
    Some(sum / relevant.len() as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MapReport {
    pub map: f64,
    pub evaluated: usize,
    /// Queries skipped because their relevant set was empty.
    pub excluded: usize,
}

pub fn mean_average_precision<S: AsRef<str>>(
    rankings: &[Vec<S>],
    relevant: &[BTreeSet<String>],
) -> Result<MapReport> {
    if rankings.len() != relevant.len() {
        return Err(Error::Argument(format!(
            "{} rankings but {} relevant sets",
            rankings.len(),
            relevant.len()
        )));
    }
    let mut sum = 0.0;
    let mut evaluated = 0;
    let mut excluded = 0;
    for (q, (ranking, rel)) in rankings.iter().zip(relevant).enumerate() {
        match average_precision(ranking, rel) {
            Some(ap) => {
                sum += ap;
                evaluated += 1;
            }
            None => {
                log::warn!("query {q} has no relevant document; excluded");
                excluded += 1;
            }
        }
    }
    if evaluated == 0 {
        return Err(Error::Evaluation("no query has a relevant document".into()));
    }
    Ok(MapReport {
        map: sum / evaluated as f64,
        evaluated,
        excluded,
    })
}

/// MAP of every query at one `top_k`.
pub fn evaluate_queries(
    queries: &[QuerySpec],
    index: &DocumentIndex,
    k: usize,
) -> Result<MapReport> {
    let mut rankings = Vec::with_capacity(queries.len());
    for q in queries {
        rankings.push(
            rank_documents(q, index, k)?
                .into_iter()
                .map(|(id, _)| id)
                .collect::<Vec<_>>(),
        );
    }
    let relevant: Vec<BTreeSet<String>> = queries.iter().map(|q| q.relevant.clone()).collect();
    mean_average_precision(&rankings, &relevant)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RetrievalConfig {
    pub n_documents: usize,
    pub n_topics: usize,
    /// Probability that a segment lands in a document of its unit's topic.
    pub topic_affinity: f64,
    pub n_queries: usize,
    pub top_k: Vec<usize>,
}

impl Default for RetrievalConfig {
    fn default() -> Self {
        Self {
            n_documents: 24,
            n_topics: 4,
            topic_affinity: 0.8,
            n_queries: 10,
            top_k: vec![1, 5, 10, 20, 40],
        }
    }
}

impl RetrievalConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_documents == 0 || self.n_topics == 0 || self.n_topics > self.n_documents {
            return Err(Error::Config(
                "retrieval needs 1 <= n_topics <= n_documents".into(),
            ));
        }
        if !(0.0..=1.0).contains(&self.topic_affinity) {
            return Err(Error::Config(
                "retrieval.topic_affinity must lie in [0, 1]".into(),
            ));
        }
        if self.n_queries == 0 || self.top_k.is_empty() || self.top_k.contains(&0) {
            return Err(Error::Config(
                "retrieval needs queries and positive top_k values".into(),
            ));
        }
        Ok(())
    }
}

/// Document layout over segment indices, shared by every embedding variant.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetrievalTask {
    /// `(document id, segment indices)`.
    pub documents: Vec<(String, Vec<usize>)>,
    /// `(term, segment index of the query realization)`.
    pub queries: Vec<(String, usize)>,
}

/// Build a topical document collection from labelled segments. Units are
/// split into topics; each segment goes to a random document of its unit's
/// topic with probability `topic_affinity`, otherwise to any document. One
/// realization per unit is held out as a query example and never placed in a
/// document. Queries are the top tf-idf terms of the resulting transcripts.
pub fn build_retrieval_task<S: AsRef<str>>(
    labels: &[S],
    cfg: &RetrievalConfig,
    seed: u64,
) -> Result<RetrievalTask> {
    cfg.validate()?;
    let mut by_unit: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
    for (i, l) in labels.iter().enumerate() {
        by_unit.entry(l.as_ref()).or_default().push(i);
    }
    let mut rng = rng_from(derive_seed(seed, "retrieval/reserve"));
    let mut reserved: BTreeMap<&str, usize> = BTreeMap::new();
    let mut pool = Vec::new();
    for (unit, idx) in &by_unit {
        if idx.len() < 2 {
            pool.extend(idx.iter().copied());
            continue;
        }
        let pick = rng.random_range(0..idx.len());
        reserved.insert(unit, idx[pick]);
        pool.extend(
            idx.iter()
                .enumerate()
                .filter(|(p, _)| *p != pick)
                .map(|(_, &i)| i),
        );
    }
    pool.sort_unstable();

    let units: Vec<&str> = by_unit.keys().copied().collect();
    let topic_of = |unit: &str| units.binary_search(&unit).expect("known unit") % cfg.n_topics;
    let docs_of_topic: Vec<Vec<usize>> = (0..cfg.n_topics)
        .map(|t| {
            (0..cfg.n_documents)
                .filter(|d| d % cfg.n_topics == t)
                .collect()
        })
        .collect();
    let mut rng = rng_from(derive_seed(seed, "retrieval/assign"));
    let mut members = vec![Vec::new(); cfg.n_documents];
    for &i in &pool {
        let doc = if rng.random::<f64>() < cfg.topic_affinity {
            *docs_of_topic[topic_of(labels[i].as_ref())]
                .choose(&mut rng)
                .expect("every topic owns a document")
        } else {
            rng.random_range(0..cfg.n_documents)
        };
        members[doc].push(i);
    }
    let documents: Vec<(String, Vec<usize>)> = members
        .into_iter()
        .enumerate()
        .filter(|(_, m)| !m.is_empty())
        .map(|(d, m)| (format!("doc{d:03}"), m))
        .collect();
    if documents.is_empty() {
        return Err(Error::Data(
            "no segments left for retrieval documents".into(),
        ));
    }

    let transcripts: Vec<Vec<&str>> = documents
        .iter()
        .map(|(_, m)| m.iter().map(|&i| labels[i].as_ref()).collect())
        .collect();
    let scores = tfidf_scores(&transcripts);
    let mut ranked: Vec<(String, f64)> = scores
        .into_iter()
        .filter(|(t, _)| reserved.contains_key(t.as_str()))
        .collect();
    ranked.sort_by(|a, b| b.1.total_cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
    if ranked.len() < cfg.n_queries {
        return Err(Error::Argument(format!(
            "{} queries requested but only {} terms have a held-out realization",
            cfg.n_queries,
            ranked.len()
        )));
    }
    let queries = ranked
        .into_iter()
        .take(cfg.n_queries)
        .map(|(t, _)| {
            let seg = reserved[t.as_str()];
            (t, seg)
        })
        .collect();
    Ok(RetrievalTask { documents, queries })
}

impl RetrievalTask {
    /// Materialise the index and queries for one set of segment embeddings.
    pub fn instantiate<S: AsRef<str>>(
        &self,
        labels: &[S],
        embeddings: &[Vec<f64>],
    ) -> Result<(DocumentIndex, Vec<QuerySpec>)> {
        if labels.len() != embeddings.len() {
            return Err(Error::Argument(
                "labels and embeddings differ in count".into(),
            ));
        }
        let documents = self
            .documents
            .iter()
            .map(|(id, m)| Document {
                id: id.clone(),
                words: m
                    .iter()
                    .map(|&i| (labels[i].as_ref().to_string(), embeddings[i].clone()))
                    .collect(),
            })
            .collect();
        let index = DocumentIndex::new(documents)?;
        let queries = self
            .queries
            .iter()
            .map(|(term, seg)| QuerySpec {
                term: term.clone(),
                embedding: embeddings[*seg].clone(),
                relevant: index.containing(term),
            })
            .collect();
        Ok((index, queries))
    }
}

/// Rows `variant,top_k,map`; when variants `a`, `b` and `d` are all present,
/// difference rows `d-a` and `d-b` follow.
pub fn retrieval_csv(rows: &[(String, usize, f64)]) -> String {
    let mut out = String::from("variant,top_k,map\n");
    for (v, k, m) in rows {
        let _ = writeln!(out, "{v},{k},{m}");
    }
    let lookup = |v: &str, k: usize| rows.iter().find(|r| r.0 == v && r.1 == k).map(|r| r.2);
    let ks: BTreeSet<usize> = rows.iter().map(|r| r.1).collect();
    for base in ["a", "b"] {
        for &k in &ks {
            if let (Some(d), Some(b)) = (lookup("d", k), lookup(base, k)) {
                let _ = writeln!(out, "d-{base},{k},{}", d - b);
            }
        }
    }
    out
}
