//! Sensor-to-road matching, the cluster equivalence relation, quotient-graph
//! construction and ε-pruning.
//!
//! Every sensor claims a distinct *root* road node (its nearest unclaimed
//! node, sensors processed in canonical order). Every road node then joins
//! the cluster of the nearest root, which makes the relation a genuine
//! partition. The quotient graph connects two sensor classes iff some road
//! edge crosses between their clusters; intra-cluster edges vanish, so there
//! are no self-loops.

use std::path::Path;

use crate::osm::{fmt_f64, write_csv, RoadGraph};
use crate::sensors::SensorSet;
use crate::{Error, Result};

/// Distance used for matching and pruning. Euclidean on raw (lon, lat)
/// degrees is the default; haversine (meters) is available behind this flag.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum DistanceMetric {
    #[default]
    EuclideanDegrees,
    HaversineMeters,
}

impl DistanceMetric {
    pub fn distance(&self, a: (f64, f64), b: (f64, f64)) -> f64 {
        match self {
            DistanceMetric::EuclideanDegrees => {
                let (dx, dy) = (a.0 - b.0, a.1 - b.1);
                (dx * dx + dy * dy).sqrt()
            }
            DistanceMetric::HaversineMeters => haversine_m(a, b),
        }
    }
}

fn haversine_m(a: (f64, f64), b: (f64, f64)) -> f64 {
    const R: f64 = 6_371_000.0;
    let (lon1, lat1) = (a.0.to_radians(), a.1.to_radians());
    let (lon2, lat2) = (b.0.to_radians(), b.1.to_radians());
    let dlat = lat2 - lat1;
    let dlon = lon2 - lon1;
    let h = (dlat / 2.0).sin().powi(2) + lat1.cos() * lat2.cos() * (dlon / 2.0).sin().powi(2);
    2.0 * R * h.sqrt().asin()
}

/// The equivalence relation: each sensor's root road node, and each road
/// node's owning sensor. Indices refer to `RoadGraph::nodes()` order and
/// `SensorSet` order. `cluster_of` is `None` for nodes removed by pruning.
#[derive(Clone, Debug, PartialEq)]
pub struct ClusterAssignment {
    pub root_of: Vec<usize>,
    pub cluster_of: Vec<Option<usize>>,
}

/// Sensor-indexed quotient of the road graph.
#[derive(Clone, Debug, PartialEq)]
pub struct QuotientGraph {
    n: usize,
    adj: Vec<bool>,
    /// ascending neighbor lists mirroring `adj`, for O(V+E) traversals
    neighbor_lists: Vec<Vec<usize>>,
    /// road-edge count witnessing each quotient edge (diagnostics)
    multiplicity: Vec<u32>,
    pub clusters: ClusterAssignment,
    /// per sensor: surviving road-node indices, ascending; always contains the root
    pub members: Vec<Vec<usize>>,
    /// lon/lat of each sensor's root road node
    pub root_pos: Vec<(f64, f64)>,
}

impl QuotientGraph {
    pub fn n(&self) -> usize {
        self.n
    }

    pub fn has_edge(&self, i: usize, j: usize) -> bool {
        self.adj[i * self.n + j]
    }

    pub fn adjacency(&self) -> &[bool] {
        &self.adj
    }

    pub fn multiplicity(&self, i: usize, j: usize) -> u32 {
        self.multiplicity[i * self.n + j]
    }

    /// Neighbor indices of sensor `i`, ascending.
    pub fn neighbors(&self, i: usize) -> &[usize] {
        &self.neighbor_lists[i]
    }

    pub fn degree(&self, i: usize) -> usize {
        self.neighbor_lists[i].len()
    }

    pub fn edge_count(&self) -> usize {
        (0..self.n)
            .map(|i| self.neighbor_lists[i].iter().filter(|&&j| j > i).count())
            .sum()
    }

    pub fn isolated_nodes(&self) -> Vec<usize> {
        (0..self.n).filter(|&i| self.degree(i) == 0).collect()
    }
}

/// Match each sensor to its nearest road node (distinct roots enforced in
/// sensor order: a claimed node pushes the later sensor to its next-nearest
/// unclaimed one), then assign every road node to the nearest root's cluster.
pub fn match_sensors(road: &RoadGraph, sensors: &SensorSet) -> Result<ClusterAssignment> {
    match_sensors_with(road, sensors, DistanceMetric::default())
}

pub fn match_sensors_with(
    road: &RoadGraph,
    sensors: &SensorSet,
    metric: DistanceMetric,
) -> Result<ClusterAssignment> {
    let n_roads = road.nodes().len();
    let n_sensors = sensors.len();
    if n_roads < n_sensors {
        return Err(Error::NotEnoughRoadNodes {
            roads: n_roads,
            sensors: n_sensors,
        });
    }

    let mut claimed = vec![false; n_roads];
    let mut root_of = Vec::with_capacity(n_sensors);
    for sensor in sensors.iter() {
        let spos = (sensor.lon, sensor.lat);
        let mut best: Option<(f64, usize)> = None;
        for (idx, node) in road.nodes().iter().enumerate() {
            if claimed[idx] {
                continue;
            }
            let d = metric.distance(spos, (node.lon, node.lat));
            if best.map_or(true, |(bd, _)| d < bd) {
                best = Some((d, idx));
            }
        }
        let (_, idx) = best.expect("unclaimed road node must exist");
        claimed[idx] = true;
        root_of.push(idx);
    }

    let mut cluster_of = Vec::with_capacity(n_roads);
    for node in road.nodes() {
        let npos = (node.lon, node.lat);
        let mut best = (f64::INFINITY, 0usize);
        for (s, &root_idx) in root_of.iter().enumerate() {
            let root = &road.nodes()[root_idx];
            let d = metric.distance(npos, (root.lon, root.lat));
            if d < best.0 {
                best = (d, s);
            }
        }
        cluster_of.push(Some(best.1));
    }

    Ok(ClusterAssignment { root_of, cluster_of })
}

/// Quotient adjacency over the clusters: an undirected edge between classes
/// `[u]` and `[v]` iff some road edge connects their clusters, `u ≠ v`.
pub fn build_quotient(road: &RoadGraph, clusters: &ClusterAssignment) -> QuotientGraph {
    build_quotient_with(road, clusters, false)
}

/// Directed variant: keeps road-edge direction instead of symmetrizing.
pub fn build_quotient_with(
    road: &RoadGraph,
    clusters: &ClusterAssignment,
    directed: bool,
) -> QuotientGraph {
    let n = clusters.root_of.len();
    let mut adj = vec![false; n * n];
    let mut multiplicity = vec![0u32; n * n];
    for edge in road.edges() {
        let ui = road.node_index(edge.u).expect("validated endpoint");
        let vi = road.node_index(edge.v).expect("validated endpoint");
        let (Some(cu), Some(cv)) = (clusters.cluster_of[ui], clusters.cluster_of[vi]) else {
            continue;
        };
        if cu == cv {
            continue;
        }
        adj[cu * n + cv] = true;
        multiplicity[cu * n + cv] += 1;
        if !directed {
            adj[cv * n + cu] = true;
            multiplicity[cv * n + cu] += 1;
        }
    }

    let mut members = vec![Vec::new(); n];
    for (node_idx, cluster) in clusters.cluster_of.iter().enumerate() {
        if let Some(c) = cluster {
            members[*c].push(node_idx);
        }
    }
    let root_pos = clusters
        .root_of
        .iter()
        .map(|&r| (road.nodes()[r].lon, road.nodes()[r].lat))
        .collect();

    let neighbor_lists = (0..n)
        .map(|i| (0..n).filter(|&j| adj[i * n + j]).collect())
        .collect();

    QuotientGraph {
        n,
        adj,
        neighbor_lists,
        multiplicity,
        clusters: clusters.clone(),
        members,
        root_pos,
    }
}

/// Remove road nodes at distance ≥ ε from their cluster's *sensor* (the root
/// always survives), then recompute the quotient over surviving nodes.
pub fn prune_clusters(
    q: &QuotientGraph,
    road: &RoadGraph,
    sensors: &SensorSet,
    epsilon: f64,
) -> QuotientGraph {
    prune_clusters_with(q, road, sensors, epsilon, DistanceMetric::default())
}

pub fn prune_clusters_with(
    q: &QuotientGraph,
    road: &RoadGraph,
    sensors: &SensorSet,
    epsilon: f64,
    metric: DistanceMetric,
) -> QuotientGraph {
    debug_assert!(epsilon > 0.0, "epsilon must be positive");
    let mut clusters = q.clusters.clone();
    for (node_idx, slot) in clusters.cluster_of.iter_mut().enumerate() {
        let Some(c) = *slot else { continue };
        if clusters.root_of[c] == node_idx {
            continue; // roots are always retained
        }
        let node = &road.nodes()[node_idx];
        let sensor = sensors.get(c);
        let d = metric.distance((node.lon, node.lat), (sensor.lon, sensor.lat));
        if d >= epsilon {
            *slot = None;
        }
    }
    build_quotient(road, &clusters)
}

/// Edge-list export: `u_sensor_id,v_sensor_id`, one row per undirected edge,
/// ordered by sensor indices.
pub fn write_quotient_csv(q: &QuotientGraph, sensors: &SensorSet, path: &Path) -> Result<()> {
    let mut rows = Vec::new();
    for i in 0..q.n() {
        for j in (i + 1)..q.n() {
            if q.has_edge(i, j) {
                rows.push(vec![sensors.get(i).id.clone(), sensors.get(j).id.clone()]);
            }
        }
    }
    write_csv(path, &["u_sensor_id", "v_sensor_id"], rows.into_iter())
}

/// Cluster export: `road_node_id,sensor_id,dist_deg,is_root`, surviving
/// members only, sorted by road node id. The distance is to the sensor.
pub fn write_clusters_csv(
    q: &QuotientGraph,
    road: &RoadGraph,
    sensors: &SensorSet,
    path: &Path,
) -> Result<()> {
    let metric = DistanceMetric::EuclideanDegrees;
    let mut rows: Vec<(i64, Vec<String>)> = Vec::new();
    for (s, members) in q.members.iter().enumerate() {
        for &node_idx in members {
            let node = &road.nodes()[node_idx];
            let sensor = sensors.get(s);
            let d = metric.distance((node.lon, node.lat), (sensor.lon, sensor.lat));
            rows.push((
                node.id,
                vec![
                    node.id.to_string(),
                    sensor.id.clone(),
                    fmt_f64(d),
                    (q.clusters.root_of[s] == node_idx).to_string(),
                ],
            ));
        }
    }
    rows.sort();
    write_csv(
        path,
        &["road_node_id", "sensor_id", "dist_deg", "is_root"],
        rows.into_iter().map(|(_, r)| r),
    )
}
