//! OpenStreetMap XML ingestion and the road-graph CSV interchange format.
//!
//! Only `highway`-tagged ways become road edges; every way is a polyline and
//! contributes one edge per consecutive node pair. `oneway=yes` ways produce
//! a single directed edge per pair, everything else two antiparallel edges.
//! Unparseable tag values (`maxspeed="signals"`) are treated as absent — real
//! OSM data is noisy.

use std::collections::{HashMap, HashSet};
use std::fs::File;
use std::io::BufRead;
use std::path::Path;

use quick_xml::events::{BytesStart, Event};
use quick_xml::Reader;

use crate::{Error, Result};

pub const MPH_TO_KMH: f64 = 1.609344;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RoadNode {
    pub id: i64,
    /// degrees (x)
    pub lon: f64,
    /// degrees (y)
    pub lat: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RoadEdge {
    pub u: i64,
    pub v: i64,
    /// km/h
    pub maxspeed: Option<f64>,
    pub lanes: Option<u32>,
    /// meters
    pub length: Option<f64>,
    pub oneway: bool,
    pub highway: String,
    pub name: Option<String>,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AmenityPoint {
    pub id: i64,
    pub lon: f64,
    pub lat: f64,
}

#[derive(Clone, Debug)]
pub struct Amenity {
    pub point: AmenityPoint,
    pub kind: String,
}

/// Lat/lon envelope used to restrict parsing.
#[derive(Clone, Copy, Debug)]
pub struct BBox {
    pub min_lon: f64,
    pub min_lat: f64,
    pub max_lon: f64,
    pub max_lat: f64,
}

impl BBox {
    pub fn contains(&self, lon: f64, lat: f64) -> bool {
        lon >= self.min_lon && lon <= self.max_lon && lat >= self.min_lat && lat <= self.max_lat
    }
}

/// Directed multigraph of road nodes and attribute-carrying edges.
#[derive(Clone, Debug)]
pub struct RoadGraph {
    nodes: Vec<RoadNode>,
    edges: Vec<RoadEdge>,
    directed: bool,
    id_index: HashMap<i64, usize>,
    /// per node: indices of incident edges (as u or v)
    incident: Vec<Vec<usize>>,
}

impl RoadGraph {
    pub fn new(nodes: Vec<RoadNode>, edges: Vec<RoadEdge>, directed: bool) -> Result<Self> {
        let mut id_index = HashMap::with_capacity(nodes.len());
        for (i, n) in nodes.iter().enumerate() {
            if id_index.insert(n.id, i).is_some() {
                return Err(Error::DuplicateNodeId(n.id));
            }
        }
        let mut incident = vec![Vec::new(); nodes.len()];
        for (e, edge) in edges.iter().enumerate() {
            let ui = *id_index
                .get(&edge.u)
                .ok_or(Error::DanglingNodeRef(edge.u))?;
            let vi = *id_index
                .get(&edge.v)
                .ok_or(Error::DanglingNodeRef(edge.v))?;
            incident[ui].push(e);
            if ui != vi {
                incident[vi].push(e);
            }
        }
        Ok(RoadGraph {
            nodes,
            edges,
            directed,
            id_index,
            incident,
        })
    }

    pub fn nodes(&self) -> &[RoadNode] {
        &self.nodes
    }

    pub fn edges(&self) -> &[RoadEdge] {
        &self.edges
    }

    pub fn directed(&self) -> bool {
        self.directed
    }

    pub fn node_index(&self, id: i64) -> Option<usize> {
        self.id_index.get(&id).copied()
    }

    pub fn incident_edges(&self, node_idx: usize) -> &[usize] {
        &self.incident[node_idx]
    }
}

// ---------------------------------------------------------------------------
// OSM XML parsing
// ---------------------------------------------------------------------------

struct RawNode {
    id: i64,
    lon: f64,
    lat: f64,
    amenity: Option<String>,
}

struct RawWay {
    refs: Vec<i64>,
    tags: HashMap<String, String>,
}

/// Parse an OSM XML extract into a road graph plus the amenity point set.
///
/// With a `bbox`, elements fully outside the envelope are dropped: amenity
/// nodes outside it, and ways none of whose nodes fall inside it. Nodes
/// referenced by a kept way are always retained so no edge dangles.
pub fn parse_osm_xml(
    input: impl BufRead,
    bbox: Option<BBox>,
) -> Result<(RoadGraph, Vec<Amenity>)> {
    let mut reader = Reader::from_reader(input);
    reader.config_mut().trim_text(true);

    let mut nodes: Vec<RawNode> = Vec::new();
    let mut ways: Vec<RawWay> = Vec::new();
    let mut current_node: Option<RawNode> = None;
    let mut current_way: Option<RawWay> = None;

    let mut buf = Vec::new();
    loop {
        let event = reader
            .read_event_into(&mut buf)
            .map_err(|e| Error::MalformedXml(e.to_string()))?;
        // self-closing elements arrive as Event::Empty
        let self_closing = matches!(event, Event::Empty(_));
        match event {
            Event::Start(e) | Event::Empty(e) => {
                match e.name().as_ref() {
                    b"node" => {
                        let node = parse_node_start(&e)?;
                        if self_closing {
                            nodes.push(node);
                        } else {
                            current_node = Some(node);
                        }
                    }
                    b"way" => {
                        let way = RawWay {
                            refs: Vec::new(),
                            tags: HashMap::new(),
                        };
                        if self_closing {
                            ways.push(way);
                        } else {
                            current_way = Some(way);
                        }
                    }
                    b"nd" => {
                        if let Some(way) = current_way.as_mut() {
                            let r = get_attr(&e, b"ref")?
                                .ok_or_else(|| Error::MalformedXml("<nd> without ref".into()))?;
                            let id: i64 = r
                                .parse()
                                .map_err(|_| Error::MalformedXml(format!("bad nd ref `{r}`")))?;
                            way.refs.push(id);
                        }
                    }
                    b"tag" => {
                        let k = get_attr(&e, b"k")?;
                        let v = get_attr(&e, b"v")?;
                        if let (Some(k), Some(v)) = (k, v) {
                            if let Some(way) = current_way.as_mut() {
                                way.tags.insert(k, v);
                            } else if let Some(node) = current_node.as_mut() {
                                if k == "amenity" {
                                    node.amenity = Some(v);
                                }
                            }
                        }
                    }
                    _ => {}
                }
            }
            Event::End(e) => match e.name().as_ref() {
                b"node" => {
                    if let Some(n) = current_node.take() {
                        nodes.push(n);
                    }
                }
                b"way" => {
                    if let Some(w) = current_way.take() {
                        ways.push(w);
                    }
                }
                _ => {}
            },
            Event::Eof => break,
            _ => {}
        }
        buf.clear();
    }

    assemble_graph(nodes, ways, bbox)
}

pub fn parse_osm_file(path: &Path, bbox: Option<BBox>) -> Result<(RoadGraph, Vec<Amenity>)> {
    let f = File::open(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    parse_osm_xml(std::io::BufReader::new(f), bbox)
}

fn parse_node_start(e: &BytesStart) -> Result<RawNode> {
    let id = require_attr(e, b"id")?;
    let lat = require_attr(e, b"lat")?;
    let lon = require_attr(e, b"lon")?;
    Ok(RawNode {
        id: id
            .parse()
            .map_err(|_| Error::MalformedXml(format!("bad node id `{id}`")))?,
        lon: lon
            .parse()
            .map_err(|_| Error::MalformedXml(format!("bad lon `{lon}`")))?,
        lat: lat
            .parse()
            .map_err(|_| Error::MalformedXml(format!("bad lat `{lat}`")))?,
        amenity: None,
    })
}

fn get_attr(e: &BytesStart, name: &[u8]) -> Result<Option<String>> {
    for attr in e.attributes() {
        let attr = attr.map_err(|err| Error::MalformedXml(err.to_string()))?;
        if attr.key.as_ref() == name {
            let v = attr
                .unescape_value()
                .map_err(|err| Error::MalformedXml(err.to_string()))?;
            return Ok(Some(v.into_owned()));
        }
    }
    Ok(None)
}

fn require_attr(e: &BytesStart, name: &[u8]) -> Result<String> {
    get_attr(e, name)?.ok_or_else(|| {
        Error::MalformedXml(format!(
            "<{}> missing attribute `{}`",
            String::from_utf8_lossy(e.name().as_ref()),
            String::from_utf8_lossy(name)
        ))
    })
}

fn assemble_graph(
    nodes: Vec<RawNode>,
    ways: Vec<RawWay>,
    bbox: Option<BBox>,
) -> Result<(RoadGraph, Vec<Amenity>)> {
    let by_id: HashMap<i64, &RawNode> = nodes.iter().map(|n| (n.id, n)).collect();
    let inside = |n: &RawNode| bbox.map_or(true, |b| b.contains(n.lon, n.lat));

    let mut road_node_ids: Vec<i64> = Vec::new();
    let mut seen: HashSet<i64> = HashSet::new();
    let mut edges: Vec<RoadEdge> = Vec::new();

    for way in &ways {
        let highway = match way.tags.get("highway") {
            Some(h) => h.clone(),
            None => continue,
        };
        // a way entirely outside the bbox is dropped
        let mut any_inside = way.refs.is_empty();
        for r in &way.refs {
            let node = by_id.get(r).ok_or(Error::DanglingNodeRef(*r))?;
            if inside(node) {
                any_inside = true;
            }
        }
        if !any_inside {
            continue;
        }
        for r in &way.refs {
            if seen.insert(*r) {
                road_node_ids.push(*r);
            }
        }

        let maxspeed = way.tags.get("maxspeed").and_then(|v| parse_maxspeed(v));
        let lanes = way.tags.get("lanes").and_then(|v| parse_lanes(v));
        let oneway = way
            .tags
            .get("oneway")
            .map(|v| matches!(v.as_str(), "yes" | "true" | "1"))
            .unwrap_or(false);
        let name = way.tags.get("name").cloned();

        for pair in way.refs.windows(2) {
            let (a, b) = (pair[0], pair[1]);
            let proto = RoadEdge {
                u: a,
                v: b,
                maxspeed,
                lanes,
                length: None,
                oneway,
                highway: highway.clone(),
                name: name.clone(),
            };
            if oneway {
                edges.push(proto);
            } else {
                let mut back = proto.clone();
                back.u = b;
                back.v = a;
                edges.push(proto);
                edges.push(back);
            }
        }
    }

    let road_nodes: Vec<RoadNode> = road_node_ids
        .iter()
        .map(|id| {
            let n = by_id[id];
            RoadNode {
                id: n.id,
                lon: n.lon,
                lat: n.lat,
            }
        })
        .collect();

    let amenities: Vec<Amenity> = nodes
        .iter()
        .filter(|n| n.amenity.is_some() && inside(n))
        .map(|n| Amenity {
            point: AmenityPoint {
                id: n.id,
                lon: n.lon,
                lat: n.lat,
            },
            kind: n.amenity.clone().unwrap(),
        })
        .collect();

    Ok((RoadGraph::new(road_nodes, edges, true)?, amenities))
}

/// Parse a maxspeed tag into km/h. Bare numbers are km/h, `50 mph` converts
/// at 1.609344, an explicit `km/h` suffix is accepted. Anything else (or a
/// non-positive value) is absent.
pub fn parse_maxspeed(value: &str) -> Option<f64> {
    let v = value.trim();
    let (num, factor) = if let Some(stripped) = v.strip_suffix("mph") {
        (stripped.trim(), MPH_TO_KMH)
    } else if let Some(stripped) = v.strip_suffix("km/h") {
        (stripped.trim(), 1.0)
    } else {
        (v, 1.0)
    };
    let parsed: f64 = num.parse().ok()?;
    let kmh = parsed * factor;
    (kmh > 0.0).then_some(kmh)
}

/// Parse a lanes tag. Lane lists like `2;3` reduce by maximum; anything
/// unparseable or < 1 is absent.
pub fn parse_lanes(value: &str) -> Option<u32> {
    value
        .split(';')
        .filter_map(|part| part.trim().parse::<u32>().ok())
        .filter(|&n| n >= 1)
        .max()
}

// ---------------------------------------------------------------------------
// CSV interchange
// ---------------------------------------------------------------------------

const NODES_HEADER: [&str; 3] = ["id", "lon", "lat"];
const EDGES_HEADER: [&str; 8] = [
    "u", "v", "maxspeed", "lanes", "length", "oneway", "highway", "name",
];

/// Write a road graph as two CSV files, rows sorted (nodes by id, edges by
/// the full field tuple starting with (u, v)) so output is deterministic.
pub fn write_road_csv(g: &RoadGraph, nodes_csv: &Path, edges_csv: &Path) -> Result<()> {
    let mut node_rows: Vec<[String; 3]> = g
        .nodes()
        .iter()
        .map(|n| [n.id.to_string(), fmt_f64(n.lon), fmt_f64(n.lat)])
        .collect();
    node_rows.sort();
    write_csv(nodes_csv, &NODES_HEADER, node_rows.iter().map(|r| r.to_vec()))?;

    let mut edge_rows: Vec<(i64, i64, Vec<String>)> = g
        .edges()
        .iter()
        .map(|e| {
            let row = vec![
                e.u.to_string(),
                e.v.to_string(),
                e.maxspeed.map(fmt_f64).unwrap_or_default(),
                e.lanes.map(|l| l.to_string()).unwrap_or_default(),
                e.length.map(fmt_f64).unwrap_or_default(),
                if e.oneway { "true" } else { "false" }.to_string(),
                e.highway.clone(),
                e.name.clone().unwrap_or_default(),
            ];
            (e.u, e.v, row)
        })
        .collect();
    edge_rows.sort();
    write_csv(edges_csv, &EDGES_HEADER, edge_rows.into_iter().map(|r| r.2))?;
    Ok(())
}

/// Load a road graph from the CSV pair written by [`write_road_csv`].
pub fn load_road_csv(nodes_csv: &Path, edges_csv: &Path) -> Result<RoadGraph> {
    let mut nodes = Vec::new();
    for (line, record) in read_csv(nodes_csv, &NODES_HEADER)? {
        nodes.push(RoadNode {
            id: parse_cell(&record[0], line, "id")?,
            lon: parse_cell(&record[1], line, "lon")?,
            lat: parse_cell(&record[2], line, "lat")?,
        });
    }
    let mut edges = Vec::new();
    for (line, record) in read_csv(edges_csv, &EDGES_HEADER)? {
        edges.push(RoadEdge {
            u: parse_cell(&record[0], line, "u")?,
            v: parse_cell(&record[1], line, "v")?,
            maxspeed: parse_opt_cell(&record[2], line, "maxspeed")?,
            lanes: parse_opt_cell(&record[3], line, "lanes")?,
            length: parse_opt_cell(&record[4], line, "length")?,
            oneway: match record[5].as_str() {
                "true" => true,
                "false" => false,
                other => {
                    return Err(Error::BadNumericCell {
                        row: line,
                        column: "oneway".into(),
                        value: other.into(),
                    })
                }
            },
            highway: record[6].clone(),
            name: (!record[7].is_empty()).then(|| record[7].clone()),
        });
    }
    RoadGraph::new(nodes, edges, true)
}

pub(crate) fn fmt_f64(v: f64) -> String {
    format!("{v}")
}

pub(crate) fn write_csv(
    path: &Path,
    header: &[&str],
    rows: impl Iterator<Item = Vec<String>>,
) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    let mut w = csv::WriterBuilder::new()
        .terminator(csv::Terminator::Any(b'\n'))
        .from_writer(file);
    let wrap = |e: csv::Error| Error::io(path.display().to_string(), std::io::Error::other(e));
    w.write_record(header).map_err(wrap)?;
    for row in rows {
        w.write_record(&row).map_err(wrap)?;
    }
    w.flush()
        .map_err(|e| Error::io(path.display().to_string(), e))?;
    Ok(())
}

/// Read a CSV with an exact (ordered) header, yielding (line, cells) pairs.
pub(crate) fn read_csv(path: &Path, header: &[&str]) -> Result<Vec<(usize, Vec<String>)>> {
    let file = File::open(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    let mut r = csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(false)
        .from_reader(file);
    let found = r
        .headers()
        .map_err(|e| Error::MissingColumn(header[0].into(), format!("{}: {e}", path.display())))?
        .clone();
    for (i, expected) in header.iter().enumerate() {
        if found.get(i) != Some(expected) {
            return Err(Error::MissingColumn(
                expected.to_string(),
                path.display().to_string(),
            ));
        }
    }
    if found.len() != header.len() {
        return Err(Error::MissingColumn(
            format!("unexpected extra column `{}`", &found[header.len()]),
            path.display().to_string(),
        ));
    }
    let mut rows = Vec::new();
    for (idx, record) in r.records().enumerate() {
        let record = record.map_err(|e| {
            Error::io(path.display().to_string(), std::io::Error::other(e))
        })?;
        let line = record
            .position()
            .map(|p| p.line() as usize)
            .unwrap_or(idx + 2);
        rows.push((line, record.iter().map(|s| s.to_string()).collect()));
    }
    Ok(rows)
}

fn parse_cell<T: std::str::FromStr>(cell: &str, row: usize, column: &str) -> Result<T> {
    cell.parse().map_err(|_| Error::BadNumericCell {
        row,
        column: column.into(),
        value: cell.into(),
    })
}

fn parse_opt_cell<T: std::str::FromStr>(cell: &str, row: usize, column: &str) -> Result<Option<T>> {
    if cell.is_empty() {
        return Ok(None);
    }
    parse_cell(cell, row, column).map(Some)
}
