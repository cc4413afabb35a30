//! Spatial-context feature matrices: direct edge/node attributes gathered by
//! u/v node-edge pairing (max over incident edges) plus the derived amenity
//! count, min-max scaled to [0,1].

use std::collections::HashMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::nn::Tensor2;
use crate::osm::{fmt_f64, write_csv, Amenity, RoadGraph};
use crate::{Error, Result};

/// The fixed feature order for the F = 1..5 ablation. The F=2 baseline is
/// {maxspeed, amenities}, the least-noisy pair.
pub const FEATURE_ORDER: [FeatureName; 5] = [
    FeatureName::Maxspeed,
    FeatureName::Amenities,
    FeatureName::Lanes,
    FeatureName::X,
    FeatureName::Y,
];

pub const DEFAULT_AMENITY_RADIUS: f64 = 0.005;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FeatureName {
    Maxspeed,
    Amenities,
    Lanes,
    X,
    Y,
}

impl FeatureName {
    pub fn as_str(&self) -> &'static str {
        match self {
            FeatureName::Maxspeed => "maxspeed",
            FeatureName::Amenities => "amenities",
            FeatureName::Lanes => "lanes",
            FeatureName::X => "x",
            FeatureName::Y => "y",
        }
    }
}

#[derive(Clone, Debug)]
pub struct FeatureSpec {
    names: Vec<FeatureName>,
    pub amenity_radius: f64,
}

impl FeatureSpec {
    pub fn new(names: Vec<FeatureName>, amenity_radius: f64) -> Result<Self> {
        if names.is_empty() {
            return Err(Error::ParameterOutOfRange("feature list is empty".into()));
        }
        let mut seen = std::collections::HashSet::new();
        for n in &names {
            if !seen.insert(*n) {
                return Err(Error::ParameterOutOfRange(format!(
                    "duplicate feature `{}`",
                    n.as_str()
                )));
            }
        }
        Ok(FeatureSpec {
            names,
            amenity_radius,
        })
    }

    /// First `f` features of the canonical order.
    pub fn with_count(f: usize) -> Result<Self> {
        if f == 0 || f > FEATURE_ORDER.len() {
            return Err(Error::ParameterOutOfRange(format!(
                "feature count {f} outside 1..={}",
                FEATURE_ORDER.len()
            )));
        }
        FeatureSpec::new(FEATURE_ORDER[..f].to_vec(), DEFAULT_AMENITY_RADIUS)
    }

    pub fn names(&self) -> &[FeatureName] {
        &self.names
    }

    pub fn count(&self) -> usize {
        self.names.len()
    }
}

impl Default for FeatureSpec {
    fn default() -> Self {
        FeatureSpec::with_count(2).unwrap()
    }
}

/// N×F feature rows aligned with a caller-supplied node order.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureMatrix {
    pub values: Tensor2,
    pub node_ids: Vec<i64>,
}

/// Per-feature (min, max) fitted over a feature population. Constant columns
/// (min == max) are flagged and scale to 0.
#[derive(Clone, Debug, PartialEq)]
pub struct ScalerBounds {
    pub per_column: Vec<(f64, f64)>,
}

impl ScalerBounds {
    pub fn is_constant(&self, col: usize) -> bool {
        let (lo, hi) = self.per_column[col];
        lo == hi
    }
}

/// Bucket grid over amenity points; cells are radius-sized so a range query
/// touches at most 3×3 cells.
pub struct AmenityIndex {
    radius: f64,
    cells: HashMap<(i64, i64), Vec<(f64, f64)>>,
}

impl AmenityIndex {
    pub fn build(amenities: &[Amenity], radius: f64) -> Self {
        assert!(radius > 0.0, "amenity radius must be positive");
        let mut cells: HashMap<(i64, i64), Vec<(f64, f64)>> = HashMap::new();
        for a in amenities {
            let key = Self::cell(a.point.lon, a.point.lat, radius);
            cells.entry(key).or_default().push((a.point.lon, a.point.lat));
        }
        AmenityIndex { radius, cells }
    }

    fn cell(lon: f64, lat: f64, radius: f64) -> (i64, i64) {
        ((lon / radius).floor() as i64, (lat / radius).floor() as i64)
    }

    /// Number of amenity points with Euclidean degree distance < radius.
    pub fn count_near(&self, lon: f64, lat: f64) -> usize {
        let (cx, cy) = Self::cell(lon, lat, self.radius);
        let r2 = self.radius * self.radius;
        let mut count = 0;
        for dx in -1..=1 {
            for dy in -1..=1 {
                if let Some(points) = self.cells.get(&(cx + dx, cy + dy)) {
                    for &(px, py) in points {
                        let (ix, iy) = (px - lon, py - lat);
                        if ix * ix + iy * iy < r2 {
                            count += 1;
                        }
                    }
                }
            }
        }
        count
    }
}

/// Raw (unscaled) features for `node_ids` in the given order. Edge-borne
/// features take the max over all incident edges where the value is present
/// and default to 0 when every incident edge lacks it.
pub fn extract_raw_features(
    road: &RoadGraph,
    amenities: &[Amenity],
    node_ids: &[i64],
    spec: &FeatureSpec,
) -> Result<FeatureMatrix> {
    let index = AmenityIndex::build(amenities, spec.amenity_radius);
    extract_raw_features_indexed(road, &index, node_ids, spec)
}

/// Same as [`extract_raw_features`] with a prebuilt amenity index, for
/// callers extracting many small matrices.
pub fn extract_raw_features_indexed(
    road: &RoadGraph,
    amenities: &AmenityIndex,
    node_ids: &[i64],
    spec: &FeatureSpec,
) -> Result<FeatureMatrix> {
    let f = spec.count();
    let mut values = Tensor2::zeros(node_ids.len(), f);
    for (row, &id) in node_ids.iter().enumerate() {
        let idx = road.node_index(id).ok_or(Error::UnknownNodeId(id))?;
        let node = &road.nodes()[idx];
        for (col, name) in spec.names().iter().enumerate() {
            values[(row, col)] = match name {
                FeatureName::Maxspeed => max_incident(road, idx, |e| e.maxspeed),
                FeatureName::Lanes => max_incident(road, idx, |e| e.lanes.map(|l| l as f64)),
                FeatureName::Amenities => amenities.count_near(node.lon, node.lat) as f64,
                FeatureName::X => node.lon,
                FeatureName::Y => node.lat,
            };
        }
    }
    Ok(FeatureMatrix {
        values,
        node_ids: node_ids.to_vec(),
    })
}

fn max_incident(
    road: &RoadGraph,
    node_idx: usize,
    get: impl Fn(&crate::osm::RoadEdge) -> Option<f64>,
) -> f64 {
    road.incident_edges(node_idx)
        .iter()
        .filter_map(|&e| get(&road.edges()[e]))
        .fold(0.0, f64::max)
}

/// Column-wise (min, max) over the rows of `raw`.
pub fn fit_scaler(raw: &FeatureMatrix) -> ScalerBounds {
    let (n, f) = raw.values.shape();
    assert!(n >= 1, "scaler needs at least one row");
    let mut per_column = vec![(f64::INFINITY, f64::NEG_INFINITY); f];
    for i in 0..n {
        for j in 0..f {
            let v = raw.values[(i, j)];
            per_column[j].0 = per_column[j].0.min(v);
            per_column[j].1 = per_column[j].1.max(v);
        }
    }
    ScalerBounds { per_column }
}

/// `x' = (x − min)/(max − min)`, clamped to [0,1] for out-of-fit values;
/// constant columns map to 0.
pub fn apply_scaler(raw: &FeatureMatrix, bounds: &ScalerBounds) -> Result<FeatureMatrix> {
    let (n, f) = raw.values.shape();
    if bounds.per_column.len() != f {
        return Err(Error::DimensionMismatch(format!(
            "scaler fitted on {} columns, matrix has {f}",
            bounds.per_column.len()
        )));
    }
    let mut values = Tensor2::zeros(n, f);
    for j in 0..f {
        let (lo, hi) = bounds.per_column[j];
        let span = hi - lo;
        for i in 0..n {
            values[(i, j)] = if span == 0.0 {
                0.0
            } else {
                ((raw.values[(i, j)] - lo) / span).clamp(0.0, 1.0)
            };
        }
    }
    Ok(FeatureMatrix {
        values,
        node_ids: raw.node_ids.clone(),
    })
}

/// Feature CSV export: `road_node_id,<feature names…>`.
pub fn write_features_csv(m: &FeatureMatrix, spec: &FeatureSpec, path: &Path) -> Result<()> {
    let mut header = vec!["road_node_id".to_string()];
    header.extend(spec.names().iter().map(|n| n.as_str().to_string()));
    let header_refs: Vec<&str> = header.iter().map(|s| s.as_str()).collect();
    write_csv(
        path,
        &header_refs,
        (0..m.node_ids.len()).map(|i| {
            let mut row = vec![m.node_ids[i].to_string()];
            row.extend(m.values.row(i).iter().map(|&v| fmt_f64(v)));
            row
        }),
    )
}
