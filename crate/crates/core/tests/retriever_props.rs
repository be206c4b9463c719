mod common;

use common::oracles::full_sort_ids;
use proptest::prelude::*;
use raicl::embedstore::{EmbeddingRecord, EmbeddingStore, LoadMode, Modality};
use raicl::retriever::{retrieve, retrieve_by_vector, score};
use raicl::{SimilarityMetric, Store};

use SimilarityMetric::*;

/// Small integer coordinates so duplicated vectors and exact ties are common.
fn grid_vector(dim: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-2i32..=2, dim).prop_map(|v| {
        let mut v: Vec<f64> = v.into_iter().map(f64::from).collect();
        if v.iter().all(|&x| x == 0.0) {
            v[0] = 1.0;
        }
        v
    })
}

fn store_strategy(mode: LoadMode) -> impl Strategy<Value = Store> {
    (1usize..6, 2usize..40).prop_flat_map(move |(dim, n)| {
        prop::collection::vec(grid_vector(dim), n).prop_map(move |rows| {
            let records = rows
                .into_iter()
                .enumerate()
                .map(|(i, vector)| EmbeddingRecord {
                    sample_id: format!("id{i:03}"),
                    encoder_id: "grid".into(),
                    modality: Modality::Image,
                    dim,
                    vector,
                });
            EmbeddingStore::from_records(records, mode).unwrap()
        })
    })
}

fn metric_strategy() -> impl Strategy<Value = SimilarityMetric> {
    prop::sample::select(SimilarityMetric::ALL.to_vec())
}

fn pair(dim: usize) -> impl Strategy<Value = (Vec<f64>, Vec<f64>)> {
    (
        prop::collection::vec(-10.0f64..10.0, dim),
        prop::collection::vec(-10.0f64..10.0, dim),
    )
}

proptest! {
    #[test]
    fn matches_full_sort_oracle(
        store in store_strategy(LoadMode::Raw),
        metric in metric_strategy(),
        k in 0usize..12,
        q in any::<prop::sample::Index>(),
    ) {
        let query = store.ids()[q.index(store.len())].clone();
        let got = retrieve(&store, &query, k, metric).unwrap();
        prop_assert_eq!(got.ids(), full_sort_ids(&store, &query, k, metric));
        prop_assert_eq!(got.capped, k > store.len() - 1);
        let ranks: Vec<usize> = got.neighbors.iter().map(|n| n.rank).collect();
        prop_assert_eq!(ranks, (1..=got.neighbors.len()).collect::<Vec<_>>());
    }

    #[test]
    fn deterministic(store in store_strategy(LoadMode::Normalize), metric in metric_strategy()) {
        let q = store.ids()[0].clone();
        prop_assert_eq!(retrieve(&store, &q, 5, metric).unwrap(), retrieve(&store, &q, 5, metric).unwrap());
    }

    #[test]
    fn by_vector_honors_exclusions(store in store_strategy(LoadMode::Normalize), metric in metric_strategy()) {
        let q = store.row(0).to_vec();
        let excluded: Vec<&str> = store.ids().iter().step_by(2).map(String::as_str).collect();
        let got = retrieve_by_vector(&store, &q, store.len(), metric, &excluded).unwrap();
        prop_assert_eq!(got.neighbors.len(), store.len() - excluded.len());
        prop_assert!(got.ids().iter().all(|id| !excluded.contains(id)));
    }

    #[test]
    fn unit_sphere_coherence(store in store_strategy(LoadMode::Normalize)) {
        for (_, u) in store.iter().take(5) {
            for (_, v) in store.iter() {
                let c = score(Cosine, u, v).unwrap();
                let ip = score(InnerProduct, u, v).unwrap();
                prop_assert!((c - ip).abs() <= 1e-9);
            }
        }
    }

    #[test]
    fn norm_chain(p in (1usize..32).prop_flat_map(pair)) {
        let (u, v) = p;
        let linf = score(Chebyshev, &u, &v).unwrap();
        let l2 = score(Euclidean, &u, &v).unwrap();
        let l1 = score(Manhattan, &u, &v).unwrap();
        prop_assert!(linf <= l2 && l2 <= l1, "{linf} {l2} {l1}");
    }

    #[test]
    fn distance_axioms(p in (1usize..16).prop_flat_map(pair), collapse in any::<bool>()) {
        let (u, v) = p;
        let v = if collapse { u.clone() } else { v };
        for m in [Euclidean, Manhattan, Chebyshev] {
            let d = score(m, &u, &v).unwrap();
            prop_assert_eq!(d, score(m, &v, &u).unwrap());
            prop_assert!(d >= 0.0);
            prop_assert_eq!(d == 0.0, u == v);
        }
        prop_assert_eq!(score(InnerProduct, &u, &v).unwrap(), score(InnerProduct, &v, &u).unwrap());
    }
}

#[test]
fn hand_examples() {
    assert_eq!(
        score(Cosine, &[3.0, 4.0], &[4.0, 3.0]).unwrap(),
        24.0 / 25.0
    );
    assert_eq!(score(Euclidean, &[0.0, 0.0], &[3.0, 4.0]).unwrap(), 5.0);
    assert_eq!(score(Manhattan, &[0.0, 0.0], &[3.0, 4.0]).unwrap(), 7.0);
    assert_eq!(score(Chebyshev, &[0.0, 0.0], &[3.0, 4.0]).unwrap(), 4.0);
    assert_eq!(score(InnerProduct, &[1.0, 2.0], &[3.0, 4.0]).unwrap(), 11.0);
}
