//! Similarity scoring and exact top-k retrieval.
//!
//! Scores are raw metric values. Cosine and inner product rank higher scores
//! first; the three distances rank lower scores first. Exact score ties are
//! broken by ascending sample id, so every retrieval is a deterministic total
//! order.

use std::cmp::Ordering;
use std::collections::BinaryHeap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::embedstore::EmbeddingStore;
use crate::num::Scalar;

#[derive(Debug, Error, PartialEq)]
pub enum RetrievalError {
    #[error("dimension mismatch: {left} vs {right}")]
    Dimension { left: usize, right: usize },
    #[error("vectors must be non-empty")]
    EmptyVector,
    #[error("cosine similarity is undefined for a zero vector")]
    UndefinedCosine,
    #[error("unknown query id {0:?}")]
    UnknownQuery(String),
    #[error("unknown similarity metric {0:?}")]
    UnknownMetric(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SimilarityMetric {
    Cosine,
    InnerProduct,
    Euclidean,
    Manhattan,
    Chebyshev,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Polarity {
    HigherIsBetter,
    LowerIsBetter,
}

impl SimilarityMetric {
    pub const ALL: [SimilarityMetric; 5] = [
        SimilarityMetric::Cosine,
        SimilarityMetric::InnerProduct,
        SimilarityMetric::Euclidean,
        SimilarityMetric::Manhattan,
        SimilarityMetric::Chebyshev,
    ];

    pub fn polarity(self) -> Polarity {
        match self {
            SimilarityMetric::Cosine | SimilarityMetric::InnerProduct => Polarity::HigherIsBetter,
            _ => Polarity::LowerIsBetter,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            SimilarityMetric::Cosine => "cosine",
            SimilarityMetric::InnerProduct => "inner_product",
            SimilarityMetric::Euclidean => "euclidean",
            SimilarityMetric::Manhattan => "manhattan",
            SimilarityMetric::Chebyshev => "chebyshev",
        }
    }

    /// Orders two scores so that `Less` means `a` ranks ahead of `b`.
    pub fn compare<T: Scalar>(self, a: T, b: T) -> Ordering {
        let ord = a.partial_cmp(&b).unwrap_or(Ordering::Equal);
        match self.polarity() {
            Polarity::HigherIsBetter => ord.reverse(),
            Polarity::LowerIsBetter => ord,
        }
    }
}

impl fmt::Display for SimilarityMetric {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for SimilarityMetric {
    type Err = RetrievalError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let key = s.trim().to_ascii_lowercase().replace(['-', ' '], "_");
        match key.as_str() {
            "cosine" => Ok(SimilarityMetric::Cosine),
            "inner_product" | "inner" | "dot" => Ok(SimilarityMetric::InnerProduct),
            "euclidean" | "l2" => Ok(SimilarityMetric::Euclidean),
            "manhattan" | "l1" => Ok(SimilarityMetric::Manhattan),
            "chebyshev" | "linf" => Ok(SimilarityMetric::Chebyshev),
            _ => Err(RetrievalError::UnknownMetric(s.to_owned())),
        }
    }
}

fn dot<T: Scalar>(u: &[T], v: &[T]) -> T {
    u.iter().zip(v).fold(T::zero(), |acc, (&a, &b)| acc + a * b)
}

fn sq_norm<T: Scalar>(u: &[T]) -> T {
    dot(u, u)
}

fn raw_score<T: Scalar>(
    metric: SimilarityMetric,
    u: &[T],
    v: &[T],
    u_norm: T,
    v_norm: T,
) -> Result<T, RetrievalError> {
    let pairs = u.iter().zip(v);
    Ok(match metric {
        SimilarityMetric::Cosine => {
            if u_norm.is_zero() || v_norm.is_zero() {
                return Err(RetrievalError::UndefinedCosine);
            }
            dot(u, v) / (u_norm * v_norm)
        }
        SimilarityMetric::InnerProduct => dot(u, v),
        SimilarityMetric::Euclidean => pairs
            .fold(T::zero(), |acc, (&a, &b)| {
                let d = a - b;
                acc + d * d
            })
            .sqrt(),
        SimilarityMetric::Manhattan => pairs.fold(T::zero(), |acc, (&a, &b)| acc + (a - b).abs()),
        SimilarityMetric::Chebyshev => {
            pairs.fold(T::zero(), |acc, (&a, &b)| acc.max((a - b).abs()))
        }
    })
}

/// Scores one pair of vectors under `metric`.
pub fn score<T: Scalar>(metric: SimilarityMetric, u: &[T], v: &[T]) -> Result<T, RetrievalError> {
    if u.len() != v.len() {
        return Err(RetrievalError::Dimension {
            left: u.len(),
            right: v.len(),
        });
    }
    if u.is_empty() {
        return Err(RetrievalError::EmptyVector);
    }
    let (un, vn) = if metric == SimilarityMetric::Cosine {
        (sq_norm(u).sqrt(), sq_norm(v).sqrt())
    } else {
        (T::zero(), T::zero())
    };
    raw_score(metric, u, v, un, vn)
}

/// A retrieved exemplar. `rank` starts at 1.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Neighbor<T> {
    pub sample_id: String,
    pub score: T,
    pub rank: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Retrieval<T> {
    pub metric: SimilarityMetric,
    pub neighbors: Vec<Neighbor<T>>,
    pub requested_k: usize,
    /// Set when fewer than `requested_k` candidates were available.
    pub capped: bool,
}

impl<T> Retrieval<T> {
    pub fn ids(&self) -> Vec<&str> {
        self.neighbors
            .iter()
            .map(|n| n.sample_id.as_str())
            .collect()
    }

    pub fn warning(&self) -> Option<String> {
        self.capped.then(|| {
            format!(
                "requested k={} but only {} candidates available",
                self.requested_k,
                self.neighbors.len()
            )
        })
    }
}

/// Heap entry ordered so that the worst candidate is the maximum.
struct Ranked<T> {
    score: T,
    row: usize,
    metric: SimilarityMetric,
}

impl<T: Scalar> Ord for Ranked<T> {
    fn cmp(&self, other: &Self) -> Ordering {
        self.metric
            .compare(self.score, other.score)
            .then(self.row.cmp(&other.row))
    }
}

impl<T: Scalar> PartialOrd for Ranked<T> {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl<T: Scalar> PartialEq for Ranked<T> {
    fn eq(&self, other: &Self) -> bool {
        self.cmp(other) == Ordering::Equal
    }
}

impl<T: Scalar> Eq for Ranked<T> {}

fn top_k<T: Scalar>(
    store: &EmbeddingStore<T>,
    query: &[T],
    k: usize,
    metric: SimilarityMetric,
    excluded: &[bool],
) -> Result<Retrieval<T>, RetrievalError> {
    if query.len() != store.dim() {
        return Err(RetrievalError::Dimension {
            left: query.len(),
            right: store.dim(),
        });
    }
    let available = excluded.iter().filter(|&&x| !x).count();
    let take = k.min(available);
    let q_norm = sq_norm(query).sqrt();

    let mut heap: BinaryHeap<Ranked<T>> = BinaryHeap::with_capacity(take + 1);
    if take > 0 {
        for (row, (_, v)) in store.iter().enumerate() {
            if excluded[row] {
                continue;
            }
            let v_norm = if metric == SimilarityMetric::Cosine {
                sq_norm(v).sqrt()
            } else {
                T::zero()
            };
            let cand = Ranked {
                score: raw_score(metric, query, v, q_norm, v_norm)?,
                row,
                metric,
            };
            if heap.len() < take {
                heap.push(cand);
            } else if heap.peek().is_some_and(|worst| cand < *worst) {
                heap.pop();
                heap.push(cand);
            }
        }
    }
    let neighbors = heap
        .into_sorted_vec()
        .into_iter()
        .enumerate()
        .map(|(i, r)| Neighbor {
            sample_id: store.ids()[r.row].clone(),
            score: r.score,
            rank: i + 1,
        })
        .collect();
    Ok(Retrieval {
        metric,
        neighbors,
        requested_k: k,
        capped: k > available,
    })
}

/// Leave-one-out retrieval: the `k` best entries of `store` other than
/// `query_id` itself. Asking for more than `len - 1` caps and flags the
/// result instead of failing.
pub fn retrieve<T: Scalar>(
    store: &EmbeddingStore<T>,
    query_id: &str,
    k: usize,
    metric: SimilarityMetric,
) -> Result<Retrieval<T>, RetrievalError> {
    let row = store
        .position(query_id)
        .ok_or_else(|| RetrievalError::UnknownQuery(query_id.to_owned()))?;
    let mut excluded = vec![false; store.len()];
    excluded[row] = true;
    top_k(store, store.row(row), k, metric, &excluded)
}

/// Retrieval for an arbitrary query vector; ids in `exclude_ids` are never
/// returned. Unknown ids in the exclusion list are ignored.
pub fn retrieve_by_vector<T: Scalar>(
    store: &EmbeddingStore<T>,
    query: &[T],
    k: usize,
    metric: SimilarityMetric,
    exclude_ids: &[&str],
) -> Result<Retrieval<T>, RetrievalError> {
    let mut excluded = vec![false; store.len()];
    for id in exclude_ids {
        if let Some(row) = store.position(id) {
            excluded[row] = true;
        }
    }
    top_k(store, query, k, metric, &excluded)
}
