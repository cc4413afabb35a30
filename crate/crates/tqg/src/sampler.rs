//! Contrastive positive pairs: per-cluster representative draws plus BFS
//! truncation to a rooted subgraph of at most N nodes.
//!
//! Both views of a pair share the BFS node set and adjacency — cluster node
//! selection changes feature rows, never topology — so the pair is a
//! topology-preserving augmentation by construction.

use std::path::Path;

use rand::Rng;

use crate::features::{
    apply_scaler, extract_raw_features_indexed, AmenityIndex, FeatureSpec, ScalerBounds,
};
use crate::nn::{derive_rng, Tensor2};
use crate::osm::{fmt_f64, write_csv, RoadGraph};
use crate::quotient::QuotientGraph;
use crate::sensors::SensorSet;
use crate::{Error, Result};

/// One road-node representative per sensor cluster; topology is the parent
/// quotient's.
#[derive(Clone, Debug, PartialEq)]
pub struct SampledQuotient {
    /// sensor idx → chosen road node idx
    pub representative_of: Vec<usize>,
}

/// Rooted subgraph: `nodes[0]` is the root, `adj` is the induced local
/// adjacency in `nodes` order.
#[derive(Clone, Debug, PartialEq)]
pub struct Subgraph {
    pub nodes: Vec<usize>,
    pub adj: Vec<bool>,
}

impl Subgraph {
    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn has_edge(&self, i: usize, j: usize) -> bool {
        self.adj[i * self.nodes.len() + j]
    }
}

/// A positive pair: shared topology, two feature views extracted at two
/// independent representative draws.
#[derive(Clone, Debug)]
pub struct SubgraphPair {
    pub root: usize,
    pub subgraph: Subgraph,
    pub f1: Tensor2,
    pub f2: Tensor2,
    /// representatives backing each view, in subgraph node order
    pub reps1: Vec<usize>,
    pub reps2: Vec<usize>,
}

/// Uniformly draw one surviving cluster member per sensor. Deterministic in
/// the seed; sensors are drawn in canonical order from one stream.
pub fn sample_representatives(q: &QuotientGraph, rng_seed: u64) -> SampledQuotient {
    let mut rng = derive_rng(rng_seed, &[0x5a5a]);
    let representative_of = q
        .members
        .iter()
        .map(|members| {
            debug_assert!(!members.is_empty(), "cluster must contain its root");
            members[rng.random_range(0..members.len())]
        })
        .collect();
    SampledQuotient { representative_of }
}

/// First `n_max` sensors reached by FIFO BFS from `root`, neighbors expanded
/// in ascending sensor order; the induced adjacency is restricted to the
/// selected nodes. A component smaller than `n_max` is returned whole (an
/// isolated root yields a single-node subgraph).
pub fn bfs_subgraph(q: &QuotientGraph, root: usize, n_max: usize) -> Result<Subgraph> {
    if root >= q.n() {
        return Err(Error::UnknownRoot(root.to_string()));
    }
    assert!(n_max >= 1, "n_max must be at least 1");
    let mut visited = vec![false; q.n()];
    let mut order = Vec::new();
    let mut queue = std::collections::VecDeque::new();
    visited[root] = true;
    queue.push_back(root);
    while let Some(u) = queue.pop_front() {
        order.push(u);
        if order.len() == n_max {
            break;
        }
        for &v in q.neighbors(u) {
            if !visited[v] {
                visited[v] = true;
                queue.push_back(v);
            }
        }
    }

    // induced adjacency via neighbor lists: O(E + k), not O(k·n)
    let k = order.len();
    let mut local = vec![usize::MAX; q.n()];
    for (li, &u) in order.iter().enumerate() {
        local[u] = li;
    }
    let mut adj = vec![false; k * k];
    for (li, &u) in order.iter().enumerate() {
        for &v in q.neighbors(u) {
            let lj = local[v];
            if lj != usize::MAX && lj != li {
                adj[li * k + lj] = true;
            }
        }
    }
    Ok(Subgraph { nodes: order, adj })
}

/// Build one contrastive pair rooted at `root`: two representative draws
/// (streams split from `rng_seed` by root and view), one shared BFS node
/// set, and min-max-scaled features per view.
#[allow(clippy::too_many_arguments)]
pub fn make_pair(
    q: &QuotientGraph,
    road: &RoadGraph,
    amenities: &AmenityIndex,
    spec: &FeatureSpec,
    bounds: &ScalerBounds,
    root: usize,
    n_max: usize,
    rng_seed: u64,
) -> Result<SubgraphPair> {
    let subgraph = bfs_subgraph(q, root, n_max)?;
    let draw1 = sample_representatives(q, derive_seed(rng_seed, root, 1));
    let draw2 = sample_representatives(q, derive_seed(rng_seed, root, 2));
    let (f1, reps1) = view_features(road, amenities, spec, bounds, &subgraph, &draw1)?;
    let (f2, reps2) = view_features(road, amenities, spec, bounds, &subgraph, &draw2)?;
    Ok(SubgraphPair {
        root,
        subgraph,
        f1,
        f2,
        reps1,
        reps2,
    })
}

fn derive_seed(base: u64, root: usize, view: u64) -> u64 {
    use rand::RngCore;
    derive_rng(base, &[root as u64, view]).next_u64()
}

fn view_features(
    road: &RoadGraph,
    amenities: &AmenityIndex,
    spec: &FeatureSpec,
    bounds: &ScalerBounds,
    subgraph: &Subgraph,
    draw: &SampledQuotient,
) -> Result<(Tensor2, Vec<usize>)> {
    let reps: Vec<usize> = subgraph
        .nodes
        .iter()
        .map(|&s| draw.representative_of[s])
        .collect();
    let ids: Vec<i64> = reps.iter().map(|&r| road.nodes()[r].id).collect();
    let raw = extract_raw_features_indexed(road, amenities, &ids, spec)?;
    let scaled = apply_scaler(&raw, bounds)?;
    Ok((scaled.values, reps))
}

/// Inspection dump: `{stem}_adjacency.csv` (local edge list as sensor ids)
/// and `{stem}_features.csv` (one row per view per node).
pub fn write_pair_csv(
    pair: &SubgraphPair,
    sensors: &SensorSet,
    spec: &FeatureSpec,
    dir: &Path,
    stem: &str,
) -> Result<()> {
    let k = pair.subgraph.len();
    let mut edge_rows = Vec::new();
    for i in 0..k {
        for j in (i + 1)..k {
            if pair.subgraph.has_edge(i, j) {
                edge_rows.push(vec![
                    sensors.get(pair.subgraph.nodes[i]).id.clone(),
                    sensors.get(pair.subgraph.nodes[j]).id.clone(),
                ]);
            }
        }
    }
    write_csv(
        &dir.join(format!("{stem}_adjacency.csv")),
        &["u_sensor_id", "v_sensor_id"],
        edge_rows.into_iter(),
    )?;

    let mut header = vec!["sensor_id".to_string(), "view".to_string()];
    header.extend(spec.names().iter().map(|n| n.as_str().to_string()));
    let header_refs: Vec<&str> = header.iter().map(|s| s.as_str()).collect();
    let mut rows = Vec::new();
    for (view, f) in [(1, &pair.f1), (2, &pair.f2)] {
        for i in 0..k {
            let mut row = vec![
                sensors.get(pair.subgraph.nodes[i]).id.clone(),
                view.to_string(),
            ];
            row.extend(f.row(i).iter().map(|&v| fmt_f64(v)));
            rows.push(row);
        }
    }
    write_csv(
        &dir.join(format!("{stem}_features.csv")),
        &header_refs,
        rows.into_iter(),
    )
}

#[cfg(test)]
mod tests;
