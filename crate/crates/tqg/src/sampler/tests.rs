use super::*;
use crate::quotient::tests::{grid_free_graph, sensor_set};
use crate::quotient::{build_quotient, match_sensors, prune_clusters};

/// Quotient where every sensor sits on a road node and roads also carry one
/// satellite per sensor, giving 2-member clusters.
fn two_member_city() -> (crate::osm::RoadGraph, SensorSet, QuotientGraph) {
    // sensors on a path: roots at x = 0,1,2,3; satellites offset by 0.004
    let mut coords = Vec::new();
    let mut edges = Vec::new();
    for i in 0..4 {
        coords.push((i as f64, 0.0)); // root i
    }
    for i in 0..4 {
        coords.push((i as f64 + 0.004, 0.0)); // satellite i at index 4+i
        edges.push((i, 4 + i));
    }
    for i in 0..3 {
        edges.push((i, i + 1));
    }
    let road = grid_free_graph(&coords, &edges);
    let sensors = sensor_set(&[(0.0, 0.0), (1.0, 0.0), (2.0, 0.0), (3.0, 0.0)]);
    let clusters = match_sensors(&road, &sensors).unwrap();
    let q = build_quotient(&road, &clusters);
    (road, sensors, q)
}

fn singleton_city() -> (crate::osm::RoadGraph, SensorSet, QuotientGraph) {
    let road = grid_free_graph(&[(0.0, 0.0), (1.0, 0.0), (2.0, 0.0)], &[(0, 1), (1, 2)]);
    let sensors = sensor_set(&[(0.0, 0.0), (1.0, 0.0), (2.0, 0.0)]);
    let clusters = match_sensors(&road, &sensors).unwrap();
    let q = build_quotient(&road, &clusters);
    (road, sensors, q)
}

// ---------------------------------------------------------------------------
// sample_representatives
// ---------------------------------------------------------------------------

#[test]
fn singleton_clusters_force_the_root() {
    let (_, _, q) = singleton_city();
    for seed in [0u64, 1, 99, 12345] {
        let s = sample_representatives(&q, seed);
        assert_eq!(s.representative_of, q.clusters.root_of);
    }
}

#[test]
fn same_seed_gives_identical_draw() {
    let (_, _, q) = two_member_city();
    assert_eq!(
        sample_representatives(&q, 7),
        sample_representatives(&q, 7)
    );
}

#[test]
fn draws_are_uniform_over_cluster_members() {
    // chi-squared over 10k draws on a size-2 cluster per sensor
    let (_, _, q) = two_member_city();
    let k = q.members[0].len();
    assert_eq!(k, 2);
    let draws = 10_000;
    let mut counts = vec![0usize; k];
    for seed in 0..draws {
        let s = sample_representatives(&q, seed as u64);
        let idx = q.members[0]
            .iter()
            .position(|&m| m == s.representative_of[0])
            .unwrap();
        counts[idx] += 1;
    }
    let expected = draws as f64 / k as f64;
    let chi2: f64 = counts
        .iter()
        .map(|&c| (c as f64 - expected).powi(2) / expected)
        .sum();
    // df = 1; p > 0.01 means chi2 below the 0.99 quantile 6.635
    assert!(chi2 < 6.635, "chi2 {chi2:.2} suggests a biased draw");
}

// ---------------------------------------------------------------------------
// bfs_subgraph
// ---------------------------------------------------------------------------

#[test]
fn isolated_root_yields_single_node_subgraph() {
    let road = grid_free_graph(&[(0.0, 0.0), (5.0, 5.0), (5.1, 5.0)], &[(1, 2)]);
    let sensors = sensor_set(&[(0.0, 0.0), (5.0, 5.0), (5.1, 5.0)]);
    let clusters = match_sensors(&road, &sensors).unwrap();
    let q = build_quotient(&road, &clusters);
    let s = bfs_subgraph(&q, 0, 64).unwrap();
    assert_eq!(s.nodes, vec![0]);
    assert_eq!(s.adj, vec![false]);
}

#[test]
fn path_graph_truncates_to_first_nodes() {
    let coords: Vec<(f64, f64)> = (0..10).map(|i| (i as f64, 0.0)).collect();
    let edges: Vec<(usize, usize)> = (0..9).map(|i| (i, i + 1)).collect();
    let road = grid_free_graph(&coords, &edges);
    let sensors = sensor_set(&coords);
    let clusters = match_sensors(&road, &sensors).unwrap();
    let q = build_quotient(&road, &clusters);
    let s = bfs_subgraph(&q, 0, 3).unwrap();
    assert_eq!(s.nodes, vec![0, 1, 2]);
    // induced path adjacency
    assert!(s.has_edge(0, 1) && s.has_edge(1, 2) && !s.has_edge(0, 2));
    // root at index 0 even from the middle
    let s = bfs_subgraph(&q, 5, 3).unwrap();
    assert_eq!(s.nodes[0], 5);
    assert_eq!(s.nodes, vec![5, 4, 6]);
}

#[test]
fn unknown_root_is_an_error() {
    let (_, _, q) = singleton_city();
    assert!(matches!(
        bfs_subgraph(&q, 99, 3),
        Err(Error::UnknownRoot(_))
    ));
}

/// Independent FIFO BFS with the same expansion contract but different
/// bookkeeping (head-indexed Vec, no early break).
fn oracle_bfs_order(q: &QuotientGraph, root: usize) -> Vec<usize> {
    let mut seen = std::collections::HashSet::new();
    let mut list = vec![root];
    seen.insert(root);
    let mut head = 0;
    while head < list.len() {
        let u = list[head];
        head += 1;
        for v in 0..q.n() {
            if q.has_edge(u, v) && seen.insert(v) {
                list.push(v);
            }
        }
    }
    list
}

#[test]
fn bfs_matches_independent_reimplementation_on_random_graphs() {
    use crate::nn::derive_rng;
    use rand::Rng;
    let mut rng = derive_rng(300, &[4]);
    for _ in 0..20 {
        let (road, sensors) = crate::quotient::tests::random_instance(&mut rng, 100, 10);
        let clusters = match_sensors(&road, &sensors).unwrap();
        let q = build_quotient(&road, &clusters);
        let root = rng.random_range(0..q.n());
        for n_max in [1, 2, 3, 5, 100] {
            let got = bfs_subgraph(&q, root, n_max).unwrap();
            let oracle = oracle_bfs_order(&q, root);
            let expected: Vec<usize> = oracle.into_iter().take(n_max).collect();
            assert_eq!(got.nodes, expected);
        }
    }
}

// ---------------------------------------------------------------------------
// make_pair
// ---------------------------------------------------------------------------

fn pair_setup(
    road: &crate::osm::RoadGraph,
    spec: &FeatureSpec,
) -> (AmenityIndex, ScalerBounds) {
    let index = AmenityIndex::build(&[], spec.amenity_radius);
    let ids: Vec<i64> = road.nodes().iter().map(|n| n.id).collect();
    let raw = crate::features::extract_raw_features_indexed(road, &index, &ids, spec).unwrap();
    let bounds = crate::features::fit_scaler(&raw);
    (index, bounds)
}

#[test]
fn singleton_clusters_give_identical_views() {
    let (road, _, q) = singleton_city();
    let spec = FeatureSpec::with_count(5).unwrap();
    let (index, bounds) = pair_setup(&road, &spec);
    let pair = make_pair(&q, &road, &index, &spec, &bounds, 1, 64, 42).unwrap();
    assert_eq!(pair.f1, pair.f2);
    assert_eq!(pair.reps1, pair.reps2);
}

#[test]
fn views_share_topology_and_differ_in_features() {
    let (road, _, q) = two_member_city();
    let spec = FeatureSpec::new(
        vec![crate::features::FeatureName::X, crate::features::FeatureName::Y],
        0.005,
    )
    .unwrap();
    let (index, bounds) = pair_setup(&road, &spec);
    let mut saw_difference = false;
    for seed in 0..8 {
        let pair = make_pair(&q, &road, &index, &spec, &bounds, 0, 64, seed).unwrap();
        // topology invariance is exact for every pair
        assert_eq!(pair.subgraph.len(), 4);
        if pair.f1 != pair.f2 {
            saw_difference = true;
        }
    }
    // 8 seeds × 4 two-member clusters: all-equal draws have probability 2⁻³²
    assert!(saw_difference);
}

#[test]
fn same_seed_gives_bit_identical_pair() {
    let (road, _, q) = two_member_city();
    let spec = FeatureSpec::with_count(5).unwrap();
    let (index, bounds) = pair_setup(&road, &spec);
    let a = make_pair(&q, &road, &index, &spec, &bounds, 2, 64, 77).unwrap();
    let b = make_pair(&q, &road, &index, &spec, &bounds, 2, 64, 77).unwrap();
    assert_eq!(a.f1.data(), b.f1.data());
    assert_eq!(a.f2.data(), b.f2.data());
    assert_eq!(a.subgraph, b.subgraph);
}

#[test]
fn representatives_stay_within_epsilon_after_pruning() {
    let (road, sensors, q) = two_member_city();
    let eps = 0.01;
    let pruned = prune_clusters(&q, &road, &sensors, eps);
    for seed in 0..20 {
        let draw = sample_representatives(&pruned, seed);
        for (s, &rep) in draw.representative_of.iter().enumerate() {
            let node = &road.nodes()[rep];
            let sensor = sensors.get(s);
            let d = ((node.lon - sensor.lon).powi(2) + (node.lat - sensor.lat).powi(2)).sqrt();
            assert!(d < eps || pruned.clusters.root_of[s] == rep);
        }
    }
}

#[test]
fn pair_dump_writes_adjacency_and_features() {
    let (road, sensors, q) = two_member_city();
    let spec = FeatureSpec::with_count(2).unwrap();
    let (index, bounds) = pair_setup(&road, &spec);
    let pair = make_pair(&q, &road, &index, &spec, &bounds, 1, 3, 5).unwrap();
    let dir = tempfile::tempdir().unwrap();
    write_pair_csv(&pair, &sensors, &spec, dir.path(), "pair1").unwrap();
    let adjacency = std::fs::read_to_string(dir.path().join("pair1_adjacency.csv")).unwrap();
    assert!(adjacency.starts_with("u_sensor_id,v_sensor_id\n"));
    let features = std::fs::read_to_string(dir.path().join("pair1_features.csv")).unwrap();
    assert!(features.starts_with("sensor_id,view,maxspeed,amenities\n"));
    // 2 views × 3 nodes
    assert_eq!(features.lines().count(), 1 + 6);
}
