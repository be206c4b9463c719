//! Brute-force references shared by the property and acceptance suites.

use std::cmp::Ordering;
use std::collections::HashMap;

use num_rational::Ratio;
use raicl::evalkit::MacroOver;
use raicl::retriever::score;
use raicl::{SimilarityMetric, Store};

pub type Exact = Ratio<i128>;

fn higher_is_better(metric: SimilarityMetric) -> bool {
    matches!(
        metric,
        SimilarityMetric::Cosine | SimilarityMetric::InnerProduct
    )
}

/// Scores every candidate not in `exclude` and fully sorts them; ties fall
/// back to ascending id.
pub fn full_sort(
    store: &Store,
    query: &[f64],
    exclude: &[&str],
    metric: SimilarityMetric,
) -> Vec<(String, f64)> {
    let higher = higher_is_better(metric);
    let mut all: Vec<(String, f64)> = store
        .iter()
        .filter(|(id, _)| !exclude.contains(id))
        .map(|(id, v)| (id.to_owned(), score(metric, query, v).unwrap()))
        .collect();
    all.sort_by(|a, b| {
        let by_score = if higher {
            b.1.partial_cmp(&a.1)
        } else {
            a.1.partial_cmp(&b.1)
        };
        by_score
            .unwrap_or(Ordering::Equal)
            .then_with(|| a.0.cmp(&b.0))
    });
    all
}

pub fn full_sort_ids(
    store: &Store,
    query_id: &str,
    k: usize,
    metric: SimilarityMetric,
) -> Vec<String> {
    full_sort(store, store.get(query_id).unwrap(), &[query_id], metric)
        .into_iter()
        .take(k)
        .map(|(id, _)| id)
        .collect()
}

/// Leave-one-out majority vote over the `k` nearest neighbours; ties go to
/// the tied label whose best neighbour ranks highest.
pub fn knn_majority_accuracy(
    store: &Store,
    gold: &HashMap<String, String>,
    k: usize,
    metric: SimilarityMetric,
) -> f64 {
    let mut correct = 0;
    for id in store.ids() {
        let nn = full_sort_ids(store, id, k, metric);
        let mut votes: Vec<(&str, usize, usize)> = Vec::new();
        for (rank, n) in nn.iter().enumerate() {
            let label = gold[n].as_str();
            match votes.iter_mut().find(|(l, _, _)| *l == label) {
                Some(v) => v.1 += 1,
                None => votes.push((label, 1, rank)),
            }
        }
        let winner = votes
            .iter()
            .max_by(|a, b| a.1.cmp(&b.1).then(b.2.cmp(&a.2)))
            .unwrap()
            .0;
        if winner == gold[id] {
            correct += 1;
        }
    }
    correct as f64 / store.len() as f64
}

fn frac(num: usize, den: usize) -> Exact {
    if den == 0 {
        Exact::from_integer(0)
    } else {
        Exact::new(num as i128, den as i128)
    }
}

/// Accuracy, micro P/R/F1 and macro P/R/F1 by direct counting. Classes are
/// indices; `None` is an unparsed prediction.
pub fn count_metrics(
    classes: usize,
    pairs: &[(usize, Option<usize>)],
    macro_over: MacroOver,
) -> [Exact; 7] {
    let n = pairs.len();
    let correct = pairs.iter().filter(|(g, p)| Some(*g) == *p).count();
    let (mut ps, mut rs, mut fs) = (Vec::new(), Vec::new(), Vec::new());
    for class in 0..classes {
        let present = pairs.iter().any(|(g, p)| *g == class || *p == Some(class));
        if macro_over == MacroOver::PresentClasses && !present {
            continue;
        }
        let tp = pairs
            .iter()
            .filter(|(g, p)| *g == class && *p == Some(class))
            .count();
        let predicted = pairs.iter().filter(|(_, p)| *p == Some(class)).count();
        let actual = pairs.iter().filter(|(g, _)| *g == class).count();
        let p = frac(tp, predicted);
        let r = frac(tp, actual);
        let zero = Exact::from_integer(0);
        fs.push(if p + r == zero {
            zero
        } else {
            Exact::from_integer(2) * p * r / (p + r)
        });
        ps.push(p);
        rs.push(r);
    }
    let mean = |v: &[Exact]| {
        if v.is_empty() {
            Exact::from_integer(0)
        } else {
            v.iter().sum::<Exact>() / Exact::from_integer(v.len() as i128)
        }
    };
    let acc = frac(correct, n);
    [acc, acc, acc, acc, mean(&ps), mean(&rs), mean(&fs)]
}
