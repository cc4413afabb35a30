//! Seeded synthetic city: a dense amenity-rich core with rush-hour speed
//! dips, sparse fast suburbs with flat profiles, and a road graph whose
//! clusters all have several members so pair augmentation is non-degenerate.
//! One suburb sensor is left without road connections to mirror the isolated
//! quotient node seen in real sensor networks.

use std::path::Path;

use chrono::{Duration, NaiveDate, NaiveDateTime};
use rand::Rng;

use crate::osm::{
    fmt_f64, read_csv, write_csv, Amenity, AmenityPoint, RoadEdge, RoadGraph, RoadNode,
};
use crate::sensors::{Sensor, SensorSet, SpeedSeries};
use crate::nn::derive_rng;
use crate::{Error, Result};

pub const STEPS_PER_DAY: usize = 288; // 5-minute resolution

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Archetype {
    Core,
    Suburb,
}

impl Archetype {
    pub fn as_str(&self) -> &'static str {
        match self {
            Archetype::Core => "core",
            Archetype::Suburb => "suburb",
        }
    }
}

#[derive(Clone, Debug)]
pub struct SyntheticCity {
    pub road: RoadGraph,
    pub sensors: SensorSet,
    pub amenities: Vec<Amenity>,
    pub speeds: SpeedSeries,
    pub archetypes: Vec<Archetype>,
}

/// Pure function of its arguments: the same seed always builds the same city.
pub fn generate_city(
    seed: u64,
    n_sensors: usize,
    n_road_nodes: usize,
    days: usize,
) -> Result<SyntheticCity> {
    if n_sensors < 4 {
        return Err(Error::ParameterOutOfRange(format!(
            "need at least 4 sensors, got {n_sensors}"
        )));
    }
    if n_road_nodes < 3 * n_sensors {
        return Err(Error::ParameterOutOfRange(format!(
            "need n_road_nodes >= 3*n_sensors ({} < {})",
            n_road_nodes,
            3 * n_sensors
        )));
    }

    let n_core = n_sensors.div_ceil(2);
    let n_suburb = n_sensors - n_core;
    let side = (n_core as f64).sqrt().ceil() as usize;
    let spacing = 0.02;

    // sensors: core grid first, then the suburb ring; the last suburb sensor
    // stays road-isolated
    let mut positions: Vec<(f64, f64)> = Vec::with_capacity(n_sensors);
    let mut archetypes = Vec::with_capacity(n_sensors);
    for i in 0..n_core {
        let (gx, gy) = (i % side, i / side);
        positions.push((gx as f64 * spacing, gy as f64 * spacing));
        archetypes.push(Archetype::Core);
    }
    let center = ((side - 1) as f64 * spacing / 2.0, (side - 1) as f64 * spacing / 2.0);
    let ring_radius = (side as f64 * spacing) / 2.0 + 0.15;
    for k in 0..n_suburb {
        let angle = 2.0 * std::f64::consts::PI * k as f64 / n_suburb as f64;
        positions.push((
            center.0 + ring_radius * angle.cos(),
            center.1 + ring_radius * angle.sin(),
        ));
        archetypes.push(Archetype::Suburb);
    }
    let sensors = SensorSet::new(
        positions
            .iter()
            .enumerate()
            .map(|(i, &(lon, lat))| Sensor {
                id: format!("S{i:03}"),
                lon,
                lat,
            })
            .collect(),
    )?;

    // road nodes: one root per sensor plus satellites, all within the default
    // pruning radius of their sensor
    let mut rng_nodes = derive_rng(seed, &[1]);
    let mut nodes = Vec::with_capacity(n_road_nodes);
    let root_id = |s: usize| (s + 1) as i64;
    for (s, &(lon, lat)) in positions.iter().enumerate() {
        nodes.push(RoadNode {
            id: root_id(s),
            lon: lon + 0.0005,
            lat: lat + 0.0003,
        });
    }
    let n_satellites = n_road_nodes - n_sensors;
    let mut satellite_ids: Vec<Vec<i64>> = vec![Vec::new(); n_sensors];
    for k in 0..n_satellites {
        let s = k % n_sensors;
        let (lon, lat) = positions[s];
        let r = rng_nodes.random_range(0.0015..0.004);
        let theta = rng_nodes.random_range(0.0..2.0 * std::f64::consts::PI);
        let id = 10_000 + k as i64;
        nodes.push(RoadNode {
            id,
            lon: lon + r * theta.cos(),
            lat: lat + r * theta.sin(),
        });
        satellite_ids[s].push(id);
    }

    // sensor-level intended topology: 4-neighbor grid in the core, a ring
    // over the suburbs (minus the isolated one), one gateway per suburb
    let mut sensor_edges: Vec<(usize, usize)> = Vec::new();
    for i in 0..n_core {
        let (gx, gy) = (i % side, i / side);
        if gx + 1 < side && i + 1 < n_core && (i + 1) % side != 0 {
            sensor_edges.push((i, i + 1));
        }
        if gy + 1 < side && i + side < n_core {
            sensor_edges.push((i, i + side));
        }
    }
    let connected_suburbs = n_suburb.saturating_sub(1);
    for k in 0..connected_suburbs {
        let a = n_core + k;
        let b = n_core + (k + 1) % connected_suburbs.max(1);
        if connected_suburbs > 1 && a != b {
            sensor_edges.push((a, b));
        }
        // gateway to the nearest core sensor
        let (sx, sy) = positions[a];
        let nearest_core = (0..n_core)
            .min_by(|&i, &j| {
                let di = (positions[i].0 - sx).powi(2) + (positions[i].1 - sy).powi(2);
                let dj = (positions[j].0 - sx).powi(2) + (positions[j].1 - sy).powi(2);
                di.partial_cmp(&dj).unwrap()
            })
            .unwrap();
        sensor_edges.push((a, nearest_core));
    }

    let mut rng_attrs = derive_rng(seed, &[2]);
    let mut edges = Vec::new();
    let mut push_road = |u: i64, v: i64, arch: Archetype, rng: &mut rand_chacha::ChaCha8Rng| {
        let (maxspeed, lanes, highway) = match arch {
            Archetype::Core => (
                40.0 + 5.0 * rng.random_range(0..3) as f64,
                Some(2 + rng.random_range(0..2)),
                "residential",
            ),
            Archetype::Suburb => (
                90.0 + 10.0 * rng.random_range(0..3) as f64,
                Some(1 + rng.random_range(0..2)),
                "trunk",
            ),
        };
        for (a, b) in [(u, v), (v, u)] {
            edges.push(RoadEdge {
                u: a,
                v: b,
                maxspeed: Some(maxspeed),
                lanes,
                length: None,
                oneway: false,
                highway: highway.into(),
                name: None,
            });
        }
    };
    for (s, sats) in satellite_ids.iter().enumerate() {
        for &sat in sats {
            push_road(root_id(s), sat, archetypes[s], &mut rng_attrs);
        }
    }
    for &(a, b) in &sensor_edges {
        let arch = if archetypes[a] == Archetype::Core && archetypes[b] == Archetype::Core {
            Archetype::Core
        } else {
            Archetype::Suburb
        };
        push_road(root_id(a), root_id(b), arch, &mut rng_attrs);
    }
    let road = RoadGraph::new(nodes, edges, true)?;

    // amenities: plentiful near core sensors, nearly absent in suburbs
    let mut rng_am = derive_rng(seed, &[3]);
    let mut amenities = Vec::new();
    let mut amenity_id = 100_000;
    for (s, &(lon, lat)) in positions.iter().enumerate() {
        let count = match archetypes[s] {
            Archetype::Core => 6 + rng_am.random_range(0..5),
            Archetype::Suburb => rng_am.random_range(0..2),
        };
        for _ in 0..count {
            let r = rng_am.random_range(0.0..0.003);
            let theta = rng_am.random_range(0.0..2.0 * std::f64::consts::PI);
            amenities.push(Amenity {
                point: AmenityPoint {
                    id: amenity_id,
                    lon: lon + r * theta.cos(),
                    lat: lat + r * theta.sin(),
                },
                kind: "shop".into(),
            });
            amenity_id += 1;
        }
    }

    // speeds: archetype daily profile plus seeded noise
    let mut rng_speed = derive_rng(seed, &[4]);
    let total = days * STEPS_PER_DAY;
    let t0: NaiveDateTime = NaiveDate::from_ymd_opt(2024, 1, 1)
        .unwrap()
        .and_hms_opt(0, 0, 0)
        .unwrap();
    let timestamps: Vec<NaiveDateTime> = (0..total)
        .map(|t| t0 + Duration::minutes(5 * t as i64))
        .collect();
    let mut values = Vec::with_capacity(total * n_sensors);
    for t in 0..total {
        let hour = (t % STEPS_PER_DAY) as f64 * 5.0 / 60.0;
        for arch in archetypes.iter() {
            let base = match arch {
                Archetype::Core => {
                    let dip = |center: f64, width: f64, depth: f64| {
                        depth * (-((hour - center) / width).powi(2)).exp()
                    };
                    45.0 - dip(8.5, 1.3, 18.0) - dip(17.5, 1.5, 15.0)
                }
                Archetype::Suburb => 95.0,
            };
            values.push(base + rng_speed.random_range(-2.0..2.0));
        }
    }
    let speeds = SpeedSeries::new(timestamps, n_sensors, values);

    Ok(SyntheticCity {
        road,
        sensors,
        amenities,
        speeds,
        archetypes,
    })
}

pub const CITY_FILES: [&str; 6] = [
    "road_nodes.csv",
    "road_edges.csv",
    "sensors.csv",
    "amenities.csv",
    "speeds.csv",
    "archetypes.csv",
];

const AMENITY_HEADER: [&str; 4] = ["id", "lon", "lat", "kind"];

/// Write the city as the standard dataset directory layout.
pub fn write_city(city: &SyntheticCity, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir.display().to_string(), e))?;
    crate::osm::write_road_csv(
        &city.road,
        &dir.join("road_nodes.csv"),
        &dir.join("road_edges.csv"),
    )?;
    crate::sensors::write_sensors(&city.sensors, &dir.join("sensors.csv"))?;
    write_amenities(&city.amenities, &dir.join("amenities.csv"))?;
    crate::sensors::write_speeds(&city.speeds, &city.sensors, &dir.join("speeds.csv"))?;
    write_csv(
        &dir.join("archetypes.csv"),
        &["sensor_id", "archetype"],
        city.sensors
            .iter()
            .zip(&city.archetypes)
            .map(|(s, a)| vec![s.id.clone(), a.as_str().to_string()]),
    )
}

pub fn write_amenities(amenities: &[Amenity], path: &Path) -> Result<()> {
    write_csv(
        path,
        &AMENITY_HEADER,
        amenities.iter().map(|a| {
            vec![
                a.point.id.to_string(),
                fmt_f64(a.point.lon),
                fmt_f64(a.point.lat),
                a.kind.clone(),
            ]
        }),
    )
}

pub fn load_amenities(path: &Path) -> Result<Vec<Amenity>> {
    let mut out = Vec::new();
    for (line, record) in read_csv(path, &AMENITY_HEADER)? {
        let parse = |cell: &str, column: &str| -> Result<f64> {
            cell.parse().map_err(|_| Error::BadNumericCell {
                row: line,
                column: column.into(),
                value: cell.into(),
            })
        };
        out.push(Amenity {
            point: AmenityPoint {
                id: record[0].parse().map_err(|_| Error::BadNumericCell {
                    row: line,
                    column: "id".into(),
                    value: record[0].clone(),
                })?,
                lon: parse(&record[1], "lon")?,
                lat: parse(&record[2], "lat")?,
            },
            kind: record[3].clone(),
        });
    }
    Ok(out)
}
