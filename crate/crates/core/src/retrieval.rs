//! Lexical retrieval of clean/vulnerable pairs.
//!
//! Each cluster of the searched pool gets its own BM25 index. Every query is
//! matched with its best document in every cluster, each cluster's matches are
//! ranked by score, and pairs are then drawn round-robin across clusters
//! (largest cluster first) so the selection covers every cluster before it
//! takes a second pair from any of them.

use std::collections::{HashMap, HashSet};
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::clustering::ClusterAssignment;
use crate::corpus::{CodeSample, Label};
use crate::rng::SplitMix64;

pub const DEFAULT_K1: f64 = 1.2;
pub const DEFAULT_B: f64 = 0.75;

#[derive(Debug, Error, PartialEq)]
pub enum RetrievalError {
    #[error("cannot index an empty document list")]
    EmptyIndex,
    #[error("document `{0}` is not in the index")]
    UnknownDoc(String),
    #[error("duplicate document id `{0}`")]
    DuplicateDoc(String),
    #[error("N and G must be positive")]
    ZeroRequest,
    #[error("request asks for {requested} clusters but the assignment has {actual}")]
    GroupMismatch { requested: usize, actual: usize },
    #[error("corpus sample `{0}` has no cluster assignment")]
    Unassigned(String),
    #[error("{direction} expects {expected:?} {role}, but `{id}` is not")]
    WrongLabel {
        direction: Direction,
        expected: Label,
        role: &'static str,
        id: String,
    },
    #[error("only {available} candidate pairs for {requested} requested")]
    InsufficientPairs { requested: usize, available: usize },
}

/// Lowercased maximal runs of alphanumeric characters, in order.
pub fn tokenize(code: &str) -> Vec<String> {
    code.split(|c: char| !c.is_alphanumeric())
        .filter(|t| !t.is_empty())
        .map(str::to_lowercase)
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Bm25Params {
    pub k1: f64,
    pub b: f64,
}

impl Default for Bm25Params {
    fn default() -> Self {
        Self {
            k1: DEFAULT_K1,
            b: DEFAULT_B,
        }
    }
}

/// Okapi BM25 over one document collection.
#[derive(Debug, Clone)]
pub struct Bm25Index {
    doc_ids: Vec<String>,
    doc_term_counts: Vec<HashMap<String, u32>>,
    doc_lengths: Vec<usize>,
    avg_doc_length: f64,
    df: HashMap<String, usize>,
    postings: HashMap<String, Vec<(usize, u32)>>,
    position: HashMap<String, usize>,
    params: Bm25Params,
}

impl Bm25Index {
    pub fn build<'a, I>(docs: I, params: Bm25Params) -> Result<Self, RetrievalError>
    where
        I: IntoIterator<Item = &'a CodeSample>,
    {
        Self::from_texts(docs.into_iter().map(|d| (d.id.as_str(), d.code.as_str())), params)
    }

    pub fn from_texts<'a, I>(docs: I, params: Bm25Params) -> Result<Self, RetrievalError>
    where
        I: IntoIterator<Item = (&'a str, &'a str)>,
    {
        let mut index = Self {
            doc_ids: Vec::new(),
            doc_term_counts: Vec::new(),
            doc_lengths: Vec::new(),
            avg_doc_length: 0.0,
            df: HashMap::new(),
            postings: HashMap::new(),
            position: HashMap::new(),
            params,
        };
        for (id, text) in docs {
            let slot = index.doc_ids.len();
            if index.position.insert(id.to_owned(), slot).is_some() {
                return Err(RetrievalError::DuplicateDoc(id.to_owned()));
            }
            let tokens = tokenize(text);
            let mut counts: HashMap<String, u32> = HashMap::new();
            for t in &tokens {
                *counts.entry(t.clone()).or_default() += 1;
            }
            // Sorted so postings are built in a platform-independent order.
            let mut terms: Vec<(&String, &u32)> = counts.iter().collect();
            terms.sort_unstable();
            for (term, &tf) in terms {
                *index.df.entry(term.clone()).or_default() += 1;
                index.postings.entry(term.clone()).or_default().push((slot, tf));
            }
            index.doc_ids.push(id.to_owned());
            index.doc_lengths.push(tokens.len());
            index.doc_term_counts.push(counts);
        }
        if index.doc_ids.is_empty() {
            return Err(RetrievalError::EmptyIndex);
        }
        index.avg_doc_length = index.doc_lengths.iter().sum::<usize>() as f64 / index.doc_ids.len() as f64;
        Ok(index)
    }

    pub fn len(&self) -> usize {
        self.doc_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.doc_ids.is_empty()
    }

    pub fn doc_ids(&self) -> &[String] {
        &self.doc_ids
    }

    pub fn doc_lengths(&self) -> &[usize] {
        &self.doc_lengths
    }

    pub fn avg_doc_length(&self) -> f64 {
        self.avg_doc_length
    }

    pub fn df(&self) -> &HashMap<String, usize> {
        &self.df
    }

    pub fn term_count(&self, doc: &str, term: &str) -> Option<u32> {
        let &slot = self.position.get(doc)?;
        Some(self.doc_term_counts[slot].get(term).copied().unwrap_or(0))
    }

    pub fn params(&self) -> Bm25Params {
        self.params
    }

    /// `ln(1 + (N - df + 0.5) / (df + 0.5))`, always positive.
    pub fn idf(&self, term: &str) -> f64 {
        let n = self.doc_ids.len() as f64;
        let df = self.df.get(term).copied().unwrap_or(0) as f64;
        (1.0 + (n - df + 0.5) / (df + 0.5)).ln()
    }

    fn term_weight(&self, idf: f64, tf: u32, slot: usize) -> f64 {
        let Bm25Params { k1, b } = self.params;
        let tf = f64::from(tf);
        let norm = 1.0 - b + b * self.doc_lengths[slot] as f64 / self.avg_doc_length;
        idf * tf * (k1 + 1.0) / (tf + k1 * norm)
    }

    /// BM25 score of one document. Every query token occurrence contributes
    /// its term's weight; terms the index has never seen contribute 0.
    pub fn score(&self, query: &[String], doc: &str) -> Result<f64, RetrievalError> {
        let &slot = self
            .position
            .get(doc)
            .ok_or_else(|| RetrievalError::UnknownDoc(doc.to_owned()))?;
        let counts = &self.doc_term_counts[slot];
        let mut total = 0.0;
        for term in query {
            if let Some(&tf) = counts.get(term) {
                total += self.term_weight(self.idf(term), tf, slot);
            }
        }
        Ok(total)
    }

    /// Scores of every document, in index order.
    pub fn score_all(&self, query: &[String]) -> Vec<f64> {
        let mut scores = vec![0.0; self.doc_ids.len()];
        for term in query {
            let Some(postings) = self.postings.get(term) else {
                continue;
            };
            let idf = self.idf(term);
            for &(slot, tf) in postings {
                scores[slot] += self.term_weight(idf, tf, slot);
            }
        }
        scores
    }

    /// Best-scoring document; the earliest document wins ties, so an index
    /// always returns a hit, possibly with score 0.
    pub fn search_top1(&self, query_code: &str) -> (&str, f64) {
        self.best_match(&tokenize(query_code), None)
            .expect("index holds at least one document")
    }

    /// Like [`Bm25Index::search_top1`] but never returns the document `exclude`.
    pub fn best_match(&self, query: &[String], exclude: Option<&str>) -> Option<(&str, f64)> {
        let skip = exclude.and_then(|id| self.position.get(id)).copied();
        let mut best: Option<(usize, f64)> = None;
        for (slot, score) in self.score_all(query).into_iter().enumerate() {
            if Some(slot) == skip {
                continue;
            }
            if best.is_none_or(|(_, s)| score > s) {
                best = Some((slot, score));
            }
        }
        best.map(|(slot, s)| (self.doc_ids[slot].as_str(), s))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Direction {
    /// Clean queries searched against clustered vulnerable samples.
    Injection,
    /// Vulnerable queries searched against clustered clean samples.
    Extension,
}

impl Direction {
    pub fn query_label(self) -> Label {
        match self {
            Direction::Injection => Label::Clean,
            Direction::Extension => Label::Vulnerable,
        }
    }

    pub fn corpus_label(self) -> Label {
        match self {
            Direction::Injection => Label::Vulnerable,
            Direction::Extension => Label::Clean,
        }
    }
}

impl fmt::Display for Direction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Direction::Injection => "injection",
            Direction::Extension => "extension",
        })
    }
}

impl FromStr for Direction {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "injection" => Ok(Direction::Injection),
            "extension" => Ok(Direction::Extension),
            other => Err(format!("unknown direction `{other}`")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetrievedPair {
    pub clean_id: String,
    pub vul_id: String,
    pub score: f64,
    #[serde(rename = "cluster")]
    pub cluster_id: usize,
    pub direction: Direction,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RetrievalRequest {
    pub n: usize,
    pub groups: usize,
    pub direction: Direction,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Retrieved {
    pub pairs: Vec<RetrievedPair>,
    /// Query/document combinations skipped because both carry the same id.
    pub self_pairs_skipped: usize,
}

struct Candidate<'a> {
    query: &'a str,
    doc: &'a str,
    score: f64,
}

fn check_labels(samples: &[&CodeSample], expected: Label, direction: Direction, role: &'static str) -> Result<(), RetrievalError> {
    match samples.iter().find(|s| s.label != expected) {
        Some(bad) => Err(RetrievalError::WrongLabel {
            direction,
            expected,
            role,
            id: bad.id.clone(),
        }),
        None => Ok(()),
    }
}

fn make_pair(direction: Direction, query: &str, doc: &str, score: f64, cluster_id: usize) -> RetrievedPair {
    let (clean_id, vul_id) = match direction {
        Direction::Injection => (query, doc),
        Direction::Extension => (doc, query),
    };
    RetrievedPair {
        clean_id: clean_id.to_owned(),
        vul_id: vul_id.to_owned(),
        score,
        cluster_id,
        direction,
    }
}

/// Clustered pair retrieval.
///
/// `queries` are searched against `corpus`, whose samples must all carry a
/// cluster in `assignment`. Ties: equal scores keep the earliest document of a
/// cluster and the earliest query within a cluster's ranking; clusters of equal
/// size keep ascending cluster id. A query is never paired with a document of
/// the same id.
pub fn retrieve_pairs(
    queries: &[&CodeSample],
    corpus: &[&CodeSample],
    assignment: &ClusterAssignment,
    req: &RetrievalRequest,
) -> Result<Retrieved, RetrievalError> {
    retrieve_pairs_with(queries, corpus, assignment, req, Bm25Params::default())
}

pub fn retrieve_pairs_with(
    queries: &[&CodeSample],
    corpus: &[&CodeSample],
    assignment: &ClusterAssignment,
    req: &RetrievalRequest,
    params: Bm25Params,
) -> Result<Retrieved, RetrievalError> {
    if req.n == 0 || req.groups == 0 {
        return Err(RetrievalError::ZeroRequest);
    }
    if req.groups != assignment.groups {
        return Err(RetrievalError::GroupMismatch {
            requested: req.groups,
            actual: assignment.groups,
        });
    }
    check_labels(queries, req.direction.query_label(), req.direction, "queries")?;
    check_labels(corpus, req.direction.corpus_label(), req.direction, "corpus samples")?;

    let groups = req.groups;
    let lookup = assignment.lookup();
    let mut members: Vec<Vec<&CodeSample>> = vec![Vec::new(); groups];
    for doc in corpus {
        let &cluster = lookup
            .get(doc.id.as_str())
            .ok_or_else(|| RetrievalError::Unassigned(doc.id.clone()))?;
        members[cluster].push(doc);
    }
    let indices: Vec<Option<Bm25Index>> = members
        .iter()
        .map(|docs| {
            if docs.is_empty() {
                Ok(None)
            } else {
                Bm25Index::build(docs.iter().copied(), params).map(Some)
            }
        })
        .collect::<Result<_, _>>()?;

    let mut clustered: Vec<Vec<Candidate>> = (0..groups).map(|_| Vec::with_capacity(queries.len())).collect();
    let mut self_pairs_skipped = 0;
    for query in queries {
        let tokens = tokenize(&query.code);
        for (cluster, index) in indices.iter().enumerate() {
            let Some(index) = index else { continue };
            if index.position.contains_key(&query.id) {
                self_pairs_skipped += 1;
                tracing::debug!(id = %query.id, cluster, "skipping self pair");
            }
            if let Some((doc, score)) = index.best_match(&tokens, Some(&query.id)) {
                clustered[cluster].push(Candidate {
                    query: &query.id,
                    doc,
                    score,
                });
            }
        }
    }

    for list in &mut clustered {
        // stable: equal scores keep query order
        list.sort_by(|a, b| b.score.total_cmp(&a.score));
    }
    let mut order: Vec<usize> = (0..groups).collect();
    order.sort_by(|&a, &b| members[b].len().cmp(&members[a].len()).then(a.cmp(&b)));

    let available: usize = clustered.iter().map(Vec::len).sum();
    if available < req.n {
        return Err(RetrievalError::InsufficientPairs {
            requested: req.n,
            available,
        });
    }

    let mut pairs = Vec::with_capacity(req.n);
    let mut i = 0;
    while pairs.len() < req.n {
        let cluster = order[i % groups];
        if let Some(c) = clustered[cluster].get(i / groups) {
            pairs.push(make_pair(req.direction, c.query, c.doc, c.score, cluster));
        }
        i += 1;
    }
    Ok(Retrieved {
        pairs,
        self_pairs_skipped,
    })
}

/// Retrieval-free baseline: `n` distinct random (query, document) pairs.
/// Queries are visited in a seeded permutation (cycling when `n` exceeds the
/// query count), each matched with a uniformly drawn document. Scores are 0
/// and every pair is reported in cluster 0.
pub fn random_pairs(
    queries: &[&CodeSample],
    corpus: &[&CodeSample],
    n: usize,
    direction: Direction,
    seed: u64,
) -> Result<Vec<RetrievedPair>, RetrievalError> {
    if n == 0 {
        return Err(RetrievalError::ZeroRequest);
    }
    check_labels(queries, direction.query_label(), direction, "queries")?;
    check_labels(corpus, direction.corpus_label(), direction, "corpus samples")?;
    let available = queries.len() * corpus.len();
    if available < n {
        return Err(RetrievalError::InsufficientPairs { requested: n, available });
    }
    let mut rng = SplitMix64::new(seed);
    let mut order: Vec<&CodeSample> = queries.to_vec();
    let len = order.len();
    rng.partial_shuffle(&mut order, len);

    let mut used = HashSet::new();
    let mut pairs = Vec::with_capacity(n);
    let mut i = 0;
    while pairs.len() < n {
        let query = order[i % len];
        i += 1;
        let taken = used.iter().filter(|(q, _): &&(&str, &str)| *q == query.id).count();
        if taken == corpus.len() {
            continue;
        }
        let doc = loop {
            let d = corpus[rng.below(corpus.len() as u64) as usize];
            if !used.contains(&(query.id.as_str(), d.id.as_str())) {
                break d;
            }
        };
        used.insert((query.id.as_str(), doc.id.as_str()));
        pairs.push(make_pair(direction, &query.id, &doc.id, 0.0, 0));
    }
    Ok(pairs)
}
