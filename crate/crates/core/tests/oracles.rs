//! Property tests against brute-force and third-party oracles.

use std::collections::BTreeSet;

use modfill::graph::{project_item_graph, InteractionLog, ItemGraph, ProjectionOptions};
use modfill::modality::{apply_masking, FeatureMatrix, ModalityMask, ModalityStore, Observation};
use modfill::retrieval::{acs, query_anchors, retrieve_anchors, RetrievalConfig};
use modfill::spectral::{eigen_decompose_symmetric, laplacian_pe, normalized_laplacian};
use ndarray::Array2;
use proptest::prelude::*;

fn edge_set(g: &ItemGraph) -> BTreeSet<(usize, usize)> {
    (0..g.n())
        .flat_map(|a| g.neighbors(a).iter().map(move |&b| (a, b as usize)))
        .filter(|&(a, b)| a < b)
        .collect()
}

fn find(parent: &mut [usize], x: usize) -> usize {
    if parent[x] != x {
        let root = find(parent, parent[x]);
        parent[x] = root;
    }
    parent[x]
}

fn union_find_components(n: usize, edges: &[(usize, usize)], members: &BTreeSet<usize>) -> usize {
    let mut parent: Vec<usize> = (0..n).collect();
    for &(a, b) in edges {
        if members.contains(&a) && members.contains(&b) {
            let (ra, rb) = (find(&mut parent, a), find(&mut parent, b));
            parent[ra] = rb;
        }
    }
    members.iter().filter(|&&v| find(&mut parent, v) == v).count()
}

fn graph_strategy(max_n: usize) -> impl Strategy<Value = (usize, Vec<(usize, usize)>)> {
    (1..=max_n).prop_flat_map(|n| (Just(n), prop::collection::vec((0..n, 0..n), 0..3 * n)))
}

fn store_from(n: usize, values: &[f32], dim: usize) -> ModalityStore {
    let f = FeatureMatrix::new(n, dim, values[..n * dim].to_vec()).unwrap();
    ModalityStore::new(vec![("a".into(), f.clone()), ("b".into(), f)]).unwrap()
}

fn cos32(a: &[f32], b: &[f32]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| *x as f64 * *y as f64).sum();
    let na: f64 = a.iter().map(|x| (*x as f64).powi(2)).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| (*x as f64).powi(2)).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        dot / (na * nb)
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn projection_matches_pairwise_user_scan(
        entries in prop::collection::vec((0usize..6, 0usize..10), 1..40),
        min_degree in 0usize..4,
        cap in 1usize..6,
    ) {
        let log = InteractionLog::from_dense(entries.iter().copied()).unwrap();
        let opts = ProjectionOptions { max_user_items: cap, min_degree };
        let g = project_item_graph(&log, opts).unwrap();
        let mut expected = BTreeSet::new();
        for u in 0..log.n_users() {
            let items: BTreeSet<usize> = entries.iter().filter(|e| e.0 == u).map(|e| e.1).collect();
            if items.len() > cap || items.len() < min_degree {
                continue;
            }
            for &a in &items {
                for &b in &items {
                    if a < b {
                        expected.insert((a, b));
                    }
                }
            }
        }
        prop_assert_eq!(g.n(), log.n_items());
        prop_assert_eq!(edge_set(&g), expected);
    }

    #[test]
    fn induced_components_match_union_find((n, edges) in graph_strategy(15), pick in prop::collection::vec(any::<bool>(), 15)) {
        let g = ItemGraph::from_edges(n, edges.iter().copied()).unwrap();
        let members: BTreeSet<usize> = (0..n).filter(|&v| pick[v]).collect();
        let nodes: Vec<usize> = members.iter().copied().collect();
        prop_assert_eq!(g.induced_component_count(&nodes), union_find_components(n, &edges, &members));
        if !nodes.is_empty() {
            prop_assert_eq!(g.is_connected_subset(&nodes).unwrap(), union_find_components(n, &edges, &members) == 1);
        }
    }

    #[test]
    fn cache_round_trip((n, edges) in graph_strategy(20)) {
        let g = ItemGraph::from_edges(n, edges).unwrap();
        let mut buf = Vec::new();
        g.write_cache(&mut buf).unwrap();
        prop_assert_eq!(ItemGraph::read_cache(&mut buf.as_slice()).unwrap(), g);
    }

    #[test]
    fn acs_covers_anchors_within_each_component((n, edges) in graph_strategy(12), raw in prop::collection::vec(0usize..12, 1..4)) {
        let g = ItemGraph::from_edges(n, edges.iter().copied()).unwrap();
        let anchors: BTreeSet<usize> = raw.iter().map(|a| a % n).collect();
        let anchors: Vec<usize> = anchors.into_iter().collect();
        let out = acs(&g, &anchors).unwrap();
        prop_assert!(anchors.iter().all(|a| out.nodes.contains(a)));
        let labels = g.component_labels();
        let distinct: BTreeSet<usize> = anchors.iter().map(|&a| labels[a]).collect();
        prop_assert_eq!(out.components, distinct.len());
        prop_assert_eq!(g.induced_component_count(&out.nodes), distinct.len());
    }

    #[test]
    fn anchors_match_full_sort(
        values in prop::collection::vec(-3i8..=3, 60),
        observed in prop::collection::vec(any::<bool>(), 20),
        k in 1usize..8,
    ) {
        let n = 20;
        let data: Vec<f32> = values.iter().map(|&v| v as f32).collect();
        let store = store_from(n, &data, 3);
        let rows: Vec<Vec<bool>> = observed.iter().map(|&o| vec![o, true]).collect();
        let mask = ModalityMask::from_rows(&rows).unwrap();
        let query = (0..n).find(|&i| observed[i]);
        prop_assume!(query.is_some());
        let q = query.unwrap();
        let got = retrieve_anchors(&store, &mask, q, 0, k).unwrap();
        let mut all: Vec<(f64, usize)> = (0..n)
            .filter(|&j| j != q && observed[j])
            .map(|j| (cos32(store.row(0, q), store.row(0, j)), j))
            .collect();
        all.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap().then(a.1.cmp(&b.1)));
        all.truncate(k);
        prop_assert_eq!(got.anchors, all.iter().map(|x| x.1).collect::<Vec<_>>());
        for (s, e) in got.scores.iter().zip(&all) {
            prop_assert!((s - e.0).abs() < 1e-9);
        }
    }

    #[test]
    fn eigenvalues_match_nalgebra((n, edges) in graph_strategy(20)) {
        let mut adj = Array2::zeros((n, n));
        for &(a, b) in &edges {
            if a != b {
                adj[[a, b]] = 1.0;
                adj[[b, a]] = 1.0;
            }
        }
        let lap = normalized_laplacian(&adj).unwrap();
        let ours = eigen_decompose_symmetric(&lap, 1e-12).unwrap().values;
        let mut theirs: Vec<f64> = nalgebra::DMatrix::from_fn(n, n, |r, c| lap[[r, c]])
            .symmetric_eigen()
            .eigenvalues
            .iter()
            .copied()
            .collect();
        theirs.sort_by(f64::total_cmp);
        for (a, b) in ours.iter().zip(&theirs) {
            prop_assert!((a - b).abs() < 1e-9, "{ours:?} vs {theirs:?}");
        }
    }

    #[test]
    fn laplacian_pe_has_requested_width((n, edges) in graph_strategy(12), k in 0usize..6) {
        let mut adj = Array2::zeros((n, n));
        for &(a, b) in &edges {
            if a != b {
                adj[[a, b]] = 1.0;
                adj[[b, a]] = 1.0;
            }
        }
        let pe = laplacian_pe(&adj, k).unwrap();
        prop_assert_eq!(pe.vectors.shape(), &[n, k]);
        prop_assert!(pe.vectors.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn masking_keeps_one_modality_and_hits_target(n in 1usize..200, m in 1usize..4, frac in 0.0f64..1.0, seed in any::<u64>()) {
        let rate = frac * (m - 1) as f64 / m as f64;
        let mask = apply_masking(n, m, rate, seed).unwrap();
        prop_assert!((0..n).all(|i| !mask.observed_modalities(i).is_empty()));
        let target = ((rate * (n * m) as f64).round() as usize).min(n * (m - 1));
        prop_assert_eq!(mask.masked_slots(), target);
        prop_assert_eq!(apply_masking(n, m, rate, seed).unwrap(), mask);
    }
}

#[test]
fn multi_modality_anchors_take_best_score_per_item() {
    let data: Vec<f32> = vec![1.0, 0.0, 0.9, 0.1, 0.0, 1.0, 0.7, 0.7];
    let store = store_from(4, &data, 2);
    let mask = ModalityMask::all_observed(4, 2);
    let cfg = RetrievalConfig {
        k: 4,
        ..RetrievalConfig::default()
    };
    let set = query_anchors(&store, &mask, 0, &cfg).unwrap();
    assert_eq!(set.anchors, vec![1, 3]);
    assert_eq!(set.modalities, vec![0, 1]);
}
