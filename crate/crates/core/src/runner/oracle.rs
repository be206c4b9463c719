//! Brute-force nearest-neighbour reference, written independently of the
//! retriever.

use crate::corpus::DatasetManifest;
use crate::retriever::SimilarityMetric;
use crate::Store;

fn metric_value(metric: SimilarityMetric, u: &[f64], v: &[f64]) -> f64 {
    match metric {
        SimilarityMetric::Cosine => {
            let mut uv = 0.0;
            let mut uu = 0.0;
            let mut vv = 0.0;
            for i in 0..u.len() {
                uv += u[i] * v[i];
                uu += u[i] * u[i];
                vv += v[i] * v[i];
            }
            uv / (uu.sqrt() * vv.sqrt())
        }
        SimilarityMetric::InnerProduct => (0..u.len()).map(|i| u[i] * v[i]).sum(),
        SimilarityMetric::Euclidean => (0..u.len())
            .map(|i| (u[i] - v[i]) * (u[i] - v[i]))
            .sum::<f64>()
            .sqrt(),
        SimilarityMetric::Manhattan => (0..u.len()).map(|i| (u[i] - v[i]).abs()).sum(),
        SimilarityMetric::Chebyshev => (0..u.len())
            .map(|i| (u[i] - v[i]).abs())
            .fold(0.0, f64::max),
    }
}

fn beats(metric: SimilarityMetric, a: f64, b: f64) -> bool {
    match metric {
        SimilarityMetric::Cosine | SimilarityMetric::InnerProduct => a > b,
        _ => a < b,
    }
}

/// Leave-one-out 1-NN accuracy over the manifest samples present in `store`.
/// Exact score ties go to the smaller sample id.
pub fn oracle_1nn(store: &Store, manifest: &DatasetManifest, metric: SimilarityMetric) -> f64 {
    let covered: Vec<(&str, &str, &[f64])> = manifest
        .samples
        .iter()
        .filter_map(|s| Some((s.id.as_str(), s.label()?, store.get(&s.id)?)))
        .collect();
    if covered.is_empty() {
        return 0.0;
    }
    let mut correct = 0usize;
    for (i, (_, gold, q)) in covered.iter().enumerate() {
        let mut best: Option<(f64, &str, &str)> = None;
        for (j, (id, label, v)) in covered.iter().enumerate() {
            if i == j {
                continue;
            }
            let s = metric_value(metric, q, v);
            let take = match best {
                None => true,
                Some((bs, bid, _)) => beats(metric, s, bs) || (s == bs && *id < bid),
            };
            if take {
                best = Some((s, id, label));
            }
        }
        if best.is_some_and(|(_, _, label)| label == *gold) {
            correct += 1;
        }
    }
    correct as f64 / covered.len() as f64
}
