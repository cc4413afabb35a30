//! Traffic-sensor locations and speed time series, with temporal splits.

use std::path::Path;

use chrono::NaiveDateTime;

use crate::osm::{fmt_f64, read_csv, write_csv};
use crate::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct Sensor {
    pub id: String,
    pub lon: f64,
    pub lat: f64,
}

/// Ordered sensor list. The file order is canonical and reused everywhere
/// downstream: quotient node order, feature rows, embedding rows, speed
/// columns.
#[derive(Clone, Debug, PartialEq)]
pub struct SensorSet {
    sensors: Vec<Sensor>,
}

impl SensorSet {
    pub fn new(sensors: Vec<Sensor>) -> Result<Self> {
        let mut seen = std::collections::HashSet::new();
        for s in &sensors {
            if !seen.insert(s.id.clone()) {
                return Err(Error::DuplicateSensorId(s.id.clone()));
            }
        }
        Ok(SensorSet { sensors })
    }

    pub fn len(&self) -> usize {
        self.sensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sensors.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &Sensor> {
        self.sensors.iter()
    }

    pub fn get(&self, idx: usize) -> &Sensor {
        &self.sensors[idx]
    }

    pub fn index_of(&self, id: &str) -> Option<usize> {
        self.sensors.iter().position(|s| s.id == id)
    }
}

/// Speed matrix: `values[t * n + i]` is sensor i at timestamp t, NaN for
/// missing cells. Timestamps are strictly increasing with a constant step.
#[derive(Clone, Debug, PartialEq)]
pub struct SpeedSeries {
    pub timestamps: Vec<NaiveDateTime>,
    pub n_sensors: usize,
    values: Vec<f64>,
}

impl SpeedSeries {
    pub fn new(timestamps: Vec<NaiveDateTime>, n_sensors: usize, values: Vec<f64>) -> Self {
        assert_eq!(values.len(), timestamps.len() * n_sensors);
        SpeedSeries {
            timestamps,
            n_sensors,
            values,
        }
    }

    pub fn len(&self) -> usize {
        self.timestamps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.timestamps.is_empty()
    }

    pub fn value(&self, t: usize, sensor: usize) -> f64 {
        self.values[t * self.n_sensors + sensor]
    }

    pub fn row(&self, t: usize) -> &[f64] {
        &self.values[t * self.n_sensors..(t + 1) * self.n_sensors]
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    fn slice(&self, range: std::ops::Range<usize>) -> SpeedSeries {
        SpeedSeries {
            timestamps: self.timestamps[range.clone()].to_vec(),
            n_sensors: self.n_sensors,
            values: self.values[range.start * self.n_sensors..range.end * self.n_sensors].to_vec(),
        }
    }
}

/// Train/val/test fractions; must be positive and sum to 1.
#[derive(Clone, Copy, Debug)]
pub struct SplitSpec {
    pub train: f64,
    pub val: f64,
    pub test: f64,
}

impl SplitSpec {
    pub fn new(train: f64, val: f64, test: f64) -> Result<Self> {
        if train <= 0.0 || val <= 0.0 || test <= 0.0 {
            return Err(Error::ParameterOutOfRange(
                "split fractions must be positive".into(),
            ));
        }
        if ((train + val + test) - 1.0).abs() > 1e-12 {
            return Err(Error::ParameterOutOfRange(format!(
                "split fractions sum to {}, expected 1",
                train + val + test
            )));
        }
        Ok(SplitSpec { train, val, test })
    }
}

impl Default for SplitSpec {
    /// The 70/10/20 split used throughout.
    fn default() -> Self {
        SplitSpec {
            train: 0.7,
            val: 0.1,
            test: 0.2,
        }
    }
}

const SENSOR_HEADER: [&str; 3] = ["sensor_id", "lon", "lat"];

/// Load sensors from a `sensor_id,lon,lat` CSV, preserving file order.
pub fn load_sensors(csv: &Path) -> Result<SensorSet> {
    let mut sensors = Vec::new();
    for (line, record) in read_csv(csv, &SENSOR_HEADER)? {
        sensors.push(Sensor {
            id: record[0].clone(),
            lon: parse_num(&record[1], line, "lon")?,
            lat: parse_num(&record[2], line, "lat")?,
        });
    }
    SensorSet::new(sensors)
}

pub fn write_sensors(sensors: &SensorSet, csv: &Path) -> Result<()> {
    write_csv(
        csv,
        &SENSOR_HEADER,
        sensors
            .iter()
            .map(|s| vec![s.id.clone(), fmt_f64(s.lon), fmt_f64(s.lat)]),
    )
}

/// Load a wide speed CSV (first column `timestamp`, one column per sensor id)
/// and reorder columns into SensorSet order. Empty cells become NaN.
pub fn load_speeds(csv: &Path, sensors: &SensorSet) -> Result<SpeedSeries> {
    let file = std::fs::File::open(csv).map_err(|e| Error::io(csv.display().to_string(), e))?;
    let mut r = csv::ReaderBuilder::new().has_headers(true).from_reader(file);
    let header = r
        .headers()
        .map_err(|e| Error::MissingColumn("timestamp".into(), format!("{}: {e}", csv.display())))?
        .clone();
    if header.get(0) != Some("timestamp") {
        return Err(Error::MissingColumn(
            "timestamp".into(),
            csv.display().to_string(),
        ));
    }
    // column k (1-based in file) feeds sensor slot `dest[k-1]`
    let mut dest = Vec::with_capacity(header.len().saturating_sub(1));
    let mut covered = vec![false; sensors.len()];
    for col in header.iter().skip(1) {
        match sensors.index_of(col) {
            Some(i) => {
                dest.push(i);
                covered[i] = true;
            }
            None => return Err(Error::UnknownSensorColumn(col.to_string())),
        }
    }
    if let Some(missing) = covered.iter().position(|&c| !c) {
        return Err(Error::MissingColumn(
            sensors.get(missing).id.clone(),
            csv.display().to_string(),
        ));
    }

    let n = sensors.len();
    let mut timestamps = Vec::new();
    let mut values = Vec::new();
    for (idx, record) in r.records().enumerate() {
        let record =
            record.map_err(|e| Error::io(csv.display().to_string(), std::io::Error::other(e)))?;
        let line = record.position().map(|p| p.line() as usize).unwrap_or(idx + 2);
        let ts = parse_timestamp(record.get(0).unwrap_or(""), line)?;
        timestamps.push(ts);
        let mut row = vec![f64::NAN; n];
        for (k, cell) in record.iter().skip(1).enumerate() {
            if !cell.is_empty() && cell != "NaN" {
                row[dest[k]] = parse_num(cell, line, &header[k + 1])?;
            }
        }
        values.extend_from_slice(&row);
    }

    check_uniform_step(&timestamps)?;
    Ok(SpeedSeries::new(timestamps, n, values))
}

pub fn write_speeds(series: &SpeedSeries, sensors: &SensorSet, csv: &Path) -> Result<()> {
    let mut header = vec!["timestamp".to_string()];
    header.extend(sensors.iter().map(|s| s.id.clone()));
    let header_refs: Vec<&str> = header.iter().map(|s| s.as_str()).collect();
    write_csv(
        csv,
        &header_refs,
        (0..series.len()).map(|t| {
            let mut row = vec![series.timestamps[t].format("%Y-%m-%dT%H:%M:%S").to_string()];
            row.extend(series.row(t).iter().map(|&v| {
                if v.is_nan() {
                    String::new()
                } else {
                    fmt_f64(v)
                }
            }));
            row
        }),
    )
}

fn parse_timestamp(cell: &str, line: usize) -> Result<NaiveDateTime> {
    for fmt in ["%Y-%m-%dT%H:%M:%S", "%Y-%m-%d %H:%M:%S"] {
        if let Ok(ts) = NaiveDateTime::parse_from_str(cell, fmt) {
            return Ok(ts);
        }
    }
    Err(Error::BadNumericCell {
        row: line,
        column: "timestamp".into(),
        value: cell.into(),
    })
}

fn check_uniform_step(timestamps: &[NaiveDateTime]) -> Result<()> {
    if timestamps.len() < 2 {
        return Ok(());
    }
    let step = (timestamps[1] - timestamps[0]).num_seconds();
    if step <= 0 {
        return Err(Error::NonUniformTimestep {
            row: 2,
            expected: 1,
            got: step,
        });
    }
    for (i, pair) in timestamps.windows(2).enumerate() {
        let got = (pair[1] - pair[0]).num_seconds();
        if got != step {
            return Err(Error::NonUniformTimestep {
                row: i + 2,
                expected: step,
                got,
            });
        }
    }
    Ok(())
}

/// Contiguous, ordered, non-overlapping train/val/test slices:
/// `⌊f_train·T⌋ / ⌊f_val·T⌋ / remainder` rows. Empty slices are an error.
pub fn temporal_split(
    series: &SpeedSeries,
    spec: SplitSpec,
) -> Result<(SpeedSeries, SpeedSeries, SpeedSeries)> {
    let total = series.len();
    if total < 3 {
        return Err(Error::TooShort(format!(
            "{total} timestamps; need at least 3 for a split"
        )));
    }
    let n_train = (spec.train * total as f64).floor() as usize;
    let n_val = (spec.val * total as f64).floor() as usize;
    let n_test = total - n_train - n_val;
    for (name, n) in [("train", n_train), ("val", n_val), ("test", n_test)] {
        if n == 0 {
            return Err(Error::TooShort(format!(
                "{name} split is empty for {total} timestamps"
            )));
        }
    }
    Ok((
        series.slice(0..n_train),
        series.slice(n_train..n_train + n_val),
        series.slice(n_train + n_val..total),
    ))
}

fn parse_num(cell: &str, row: usize, column: &str) -> Result<f64> {
    cell.parse().map_err(|_| Error::BadNumericCell {
        row,
        column: column.into(),
        value: cell.into(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use chrono::NaiveDate;

    fn ts(h: u32, m: u32) -> NaiveDateTime {
        NaiveDate::from_ymd_opt(2024, 1, 1)
            .unwrap()
            .and_hms_opt(h, m, 0)
            .unwrap()
    }

    fn write_tmp(content: &str) -> (tempfile::TempDir, std::path::PathBuf) {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("f.csv");
        std::fs::write(&p, content).unwrap();
        (dir, p)
    }

    #[test]
    fn sensors_load_in_file_order() {
        let (_d, p) = write_tmp("sensor_id,lon,lat\nB,1.0,2.0\nA,3.5,4.5\nC,0,0\n");
        let s = load_sensors(&p).unwrap();
        assert_eq!(s.len(), 3);
        assert_eq!(s.get(0).id, "B");
        assert_eq!(s.get(1).id, "A");
        assert_eq!(s.get(2).lat, 0.0);
    }

    #[test]
    fn duplicate_sensor_id_is_rejected() {
        let (_d, p) = write_tmp("sensor_id,lon,lat\nA,1,2\nA,3,4\n");
        assert!(matches!(
            load_sensors(&p),
            Err(Error::DuplicateSensorId(id)) if id == "A"
        ));
    }

    #[test]
    fn speeds_small_matrix() {
        let sensors = SensorSet::new(vec![
            Sensor { id: "A".into(), lon: 0.0, lat: 0.0 },
            Sensor { id: "B".into(), lon: 1.0, lat: 1.0 },
        ])
        .unwrap();
        let (_d, p) = write_tmp(
            "timestamp,A,B\n2024-01-01T00:00:00,10,20\n2024-01-01T00:05:00,11,21\n",
        );
        let s = load_speeds(&p, &sensors).unwrap();
        assert_eq!(s.len(), 2);
        assert_eq!(s.value(0, 0), 10.0);
        assert_eq!(s.value(1, 1), 21.0);
    }

    #[test]
    fn permuted_columns_land_in_sensor_order() {
        let sensors = SensorSet::new(vec![
            Sensor { id: "A".into(), lon: 0.0, lat: 0.0 },
            Sensor { id: "B".into(), lon: 1.0, lat: 1.0 },
        ])
        .unwrap();
        let (_d, p) = write_tmp(
            "timestamp,B,A\n2024-01-01T00:00:00,20,10\n2024-01-01T00:05:00,21,11\n",
        );
        let s = load_speeds(&p, &sensors).unwrap();
        assert_eq!(s.value(0, 0), 10.0);
        assert_eq!(s.value(0, 1), 20.0);
        assert_eq!(s.value(1, 0), 11.0);
    }

    #[test]
    fn missing_cells_become_nan_and_round_trip() {
        let sensors = SensorSet::new(vec![
            Sensor { id: "A".into(), lon: 0.0, lat: 0.0 },
            Sensor { id: "B".into(), lon: 1.0, lat: 1.0 },
        ])
        .unwrap();
        let (_d, p) = write_tmp(
            "timestamp,A,B\n2024-01-01T00:00:00,10,\n2024-01-01T00:05:00,,21\n",
        );
        let s = load_speeds(&p, &sensors).unwrap();
        assert!(s.value(0, 1).is_nan());
        assert!(s.value(1, 0).is_nan());

        let dir = tempfile::tempdir().unwrap();
        let out = dir.path().join("speeds.csv");
        write_speeds(&s, &sensors, &out).unwrap();
        let again = load_speeds(&out, &sensors).unwrap();
        assert_eq!(again.timestamps, s.timestamps);
        for (a, b) in again.values().iter().zip(s.values()) {
            assert!(a == b || (a.is_nan() && b.is_nan()));
        }
    }

    #[test]
    fn ten_minute_gap_is_non_uniform() {
        let sensors = SensorSet::new(vec![Sensor { id: "A".into(), lon: 0.0, lat: 0.0 }]).unwrap();
        let (_d, p) = write_tmp(
            "timestamp,A\n2024-01-01T00:00:00,1\n2024-01-01T00:05:00,2\n2024-01-01T00:15:00,3\n",
        );
        assert!(matches!(
            load_speeds(&p, &sensors),
            Err(Error::NonUniformTimestep { expected: 300, got: 600, .. })
        ));
    }

    #[test]
    fn unknown_speed_column_is_rejected() {
        let sensors = SensorSet::new(vec![Sensor { id: "A".into(), lon: 0.0, lat: 0.0 }]).unwrap();
        let (_d, p) = write_tmp("timestamp,A,Z\n2024-01-01T00:00:00,1,2\n");
        assert!(matches!(
            load_speeds(&p, &sensors),
            Err(Error::UnknownSensorColumn(c)) if c == "Z"
        ));
    }

    fn series_of_len(total: usize) -> SpeedSeries {
        let timestamps: Vec<NaiveDateTime> =
            (0..total).map(|i| ts(0, 0) + chrono::Duration::minutes(5 * i as i64)).collect();
        let values: Vec<f64> = (0..total).map(|i| i as f64).collect();
        SpeedSeries::new(timestamps, 1, values)
    }

    #[test]
    fn split_sizes_follow_floor_arithmetic() {
        let s = series_of_len(10);
        let (train, val, test) = temporal_split(&s, SplitSpec::default()).unwrap();
        assert_eq!((train.len(), val.len(), test.len()), (7, 1, 2));

        let s = series_of_len(100);
        let (train, val, test) = temporal_split(&s, SplitSpec::default()).unwrap();
        assert_eq!((train.len(), val.len(), test.len()), (70, 10, 20));
    }

    #[test]
    fn split_concatenation_reproduces_series() {
        let s = series_of_len(23);
        let (train, val, test) = temporal_split(&s, SplitSpec::default()).unwrap();
        let mut timestamps = train.timestamps.clone();
        timestamps.extend(&val.timestamps);
        timestamps.extend(&test.timestamps);
        assert_eq!(timestamps, s.timestamps);
        let mut values = train.values().to_vec();
        values.extend(val.values());
        values.extend(test.values());
        assert_eq!(values, s.values());
    }

    #[test]
    fn empty_split_is_too_short() {
        let s = series_of_len(3);
        // ⌊3·0.7⌋ = 2, ⌊3·0.1⌋ = 0 → empty val
        assert!(matches!(
            temporal_split(&s, SplitSpec::default()),
            Err(Error::TooShort(_))
        ));
        let s2 = series_of_len(2);
        assert!(matches!(
            temporal_split(&s2, SplitSpec::default()),
            Err(Error::TooShort(_))
        ));
    }

    #[test]
    fn split_spec_validates() {
        assert!(SplitSpec::new(0.7, 0.1, 0.2).is_ok());
        assert!(SplitSpec::new(0.7, 0.0, 0.3).is_err());
        assert!(SplitSpec::new(0.7, 0.2, 0.2).is_err());
    }
}
