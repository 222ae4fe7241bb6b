//! CSV ingestion and export.
//!
//! Floats are written with Rust's shortest round-trip formatting so a file
//! written here reads back bit-exactly.

use std::collections::HashMap;
use std::path::Path;
use std::sync::Arc;

use chrono::{DateTime, NaiveDateTime, SecondsFormat, TimeZone, Utc};

use crate::error::{Error, Result};
use crate::metrics::{FieldTestRow, FieldTestTable};
use crate::riskmap::RiskMap;
use crate::griddata::{
    validate_windows, Observation, ObservationCategory, ObservationLog, ParkGrid, PatrolDataset, TimeCellMatrix, TimeWindow,
    Waypoint, WaypointTrack,
};

pub fn parse_timestamp(s: &str) -> Result<f64> {
    let s = s.trim();
    let dt: DateTime<Utc> = if let Ok(dt) = DateTime::parse_from_rfc3339(s) {
        dt.with_timezone(&Utc)
    } else if let Ok(naive) = NaiveDateTime::parse_from_str(s, "%Y-%m-%dT%H:%M:%S%.f") {
        Utc.from_utc_datetime(&naive)
    } else if let Ok(date) = chrono::NaiveDate::parse_from_str(s, "%Y-%m-%d") {
        Utc.from_utc_datetime(&date.and_hms_opt(0, 0, 0).unwrap())
    } else {
        return Err(Error::Timestamp(s.to_string()));
    };
    Ok(dt.timestamp() as f64 + dt.timestamp_subsec_nanos() as f64 * 1e-9)
}

pub fn format_timestamp(secs: f64) -> String {
    let whole = secs.floor();
    let nanos = ((secs - whole) * 1e9).round().min(999_999_999.0) as u32;
    match Utc.timestamp_opt(whole as i64, nanos).single() {
        Some(dt) => dt.to_rfc3339_opts(SecondsFormat::AutoSi, true),
        None => format!("{secs}"),
    }
}

fn parse_f64(field: &str, what: &str) -> Result<f64> {
    field
        .trim()
        .parse::<f64>()
        .map_err(|_| Error::InvalidInput(format!("cannot parse {what} from {field:?}")))
}

fn parse_usize(field: &str, what: &str) -> Result<usize> {
    field
        .trim()
        .parse::<usize>()
        .map_err(|_| Error::InvalidInput(format!("cannot parse {what} from {field:?}")))
}

fn parse_flag(field: &str, what: &str) -> Result<bool> {
    match field.trim() {
        "1" | "true" | "True" | "TRUE" => Ok(true),
        "0" | "false" | "False" | "FALSE" => Ok(false),
        other => Err(Error::InvalidInput(format!("cannot parse {what} from {other:?}"))),
    }
}

/// Reads `cell_id,x,y,mask,is_post,<features...>`.
pub fn read_cells_csv(path: impl AsRef<Path>, cell_size_km: f64) -> Result<ParkGrid> {
    let mut rdr = csv::Reader::from_path(path)?;
    let headers = rdr.headers()?.clone();
    let expected = ["cell_id", "x", "y", "mask", "is_post"];
    if headers.len() < expected.len()
        || headers.iter().zip(expected).any(|(h, e)| h.trim() != e)
    {
        return Err(Error::InvalidInput(format!(
            "cells.csv header must start with {}",
            expected.join(",")
        )));
    }
    let names: Vec<String> = headers.iter().skip(5).map(|h| h.trim().to_string()).collect();
    let mut rows = Vec::new();
    for rec in rdr.records() {
        let rec = rec?;
        let id = parse_usize(&rec[0], "cell_id")?;
        let x = parse_usize(&rec[1], "x")?;
        let y = parse_usize(&rec[2], "y")?;
        let mask = parse_flag(&rec[3], "mask")?;
        let post = parse_flag(&rec[4], "is_post")?;
        let feats = rec
            .iter()
            .skip(5)
            .map(|f| parse_f64(f, "feature"))
            .collect::<Result<Vec<_>>>()?;
        rows.push((id, x, y, mask, post, feats));
    }
    let width = rows.iter().map(|r| r.1 + 1).max().unwrap_or(0);
    let height = rows.iter().map(|r| r.2 + 1).max().unwrap_or(0);
    if rows.len() != width * height {
        return Err(Error::InvalidGrid(format!(
            "{} cells listed for a {width}×{height} grid",
            rows.len()
        )));
    }
    let n = width * height;
    let mut features = vec![Vec::new(); n];
    let mut mask = vec![false; n];
    let mut seen = vec![false; n];
    let mut posts = Vec::new();
    for (id, x, y, m, post, feats) in rows {
        if id != y * width + x || seen[id] {
            return Err(Error::InvalidGrid(format!("cell_id {id} does not match ({x},{y})")));
        }
        seen[id] = true;
        features[id] = feats;
        mask[id] = m;
        if post {
            posts.push(id);
        }
    }
    posts.sort_unstable();
    ParkGrid::new(width, height, cell_size_km, features, names, posts, mask)
}

pub fn write_cells_csv(path: impl AsRef<Path>, grid: &ParkGrid) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    let mut header = vec!["cell_id".to_string(), "x".into(), "y".into(), "mask".into(), "is_post".into()];
    header.extend(grid.feature_names().iter().cloned());
    w.write_record(&header)?;
    for cell in 0..grid.num_cells() {
        let (x, y) = grid.cell_xy(cell);
        let mut rec = vec![
            cell.to_string(),
            x.to_string(),
            y.to_string(),
            (grid.is_masked(cell) as u8).to_string(),
            (grid.patrol_posts().contains(&cell) as u8).to_string(),
        ];
        rec.extend(grid.features(cell).iter().map(|v| v.to_string()));
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}

/// Tracks grouped by patrol id in first-appearance order. Points are sorted
/// by time; repeated timestamps within a track are dropped and counted.
pub fn read_waypoints_csv(path: impl AsRef<Path>) -> Result<(Vec<WaypointTrack>, usize)> {
    let mut rdr = csv::Reader::from_path(path)?;
    let mut order: Vec<String> = Vec::new();
    let mut groups: HashMap<String, Vec<Waypoint>> = HashMap::new();
    for rec in rdr.records() {
        let rec = rec?;
        if rec.len() < 4 {
            return Err(Error::InvalidInput("waypoints.csv rows need 4 fields".into()));
        }
        let id = rec[0].trim().to_string();
        let p = Waypoint {
            x_km: parse_f64(&rec[1], "x_km")?,
            y_km: parse_f64(&rec[2], "y_km")?,
            timestamp: parse_timestamp(&rec[3])?,
        };
        if !groups.contains_key(&id) {
            order.push(id.clone());
        }
        groups.entry(id).or_default().push(p);
    }
    let mut dropped = 0;
    let mut tracks = Vec::with_capacity(order.len());
    for id in order {
        let mut pts = groups.remove(&id).unwrap();
        pts.sort_by(|a, b| a.timestamp.total_cmp(&b.timestamp));
        let before = pts.len();
        pts.dedup_by(|b, a| b.timestamp == a.timestamp);
        dropped += before - pts.len();
        tracks.push(WaypointTrack::new(id, pts)?);
    }
    Ok((tracks, dropped))
}

pub fn write_waypoints_csv(path: impl AsRef<Path>, tracks: &[WaypointTrack]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["patrol_id", "x_km", "y_km", "timestamp_iso8601"])?;
    for track in tracks {
        for p in track.points() {
            w.write_record([
                track.patrol_id().to_string(),
                p.x_km.to_string(),
                p.y_km.to_string(),
                format_timestamp(p.timestamp),
            ])?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn read_observations_csv(path: impl AsRef<Path>) -> Result<ObservationLog> {
    let mut rdr = csv::Reader::from_path(path)?;
    let mut records = Vec::new();
    for rec in rdr.records() {
        let rec = rec?;
        if rec.len() < 4 {
            return Err(Error::InvalidInput("observations.csv rows need 4 fields".into()));
        }
        let category = match rec[3].trim() {
            "poaching" => ObservationCategory::Poaching,
            "non_poaching" => ObservationCategory::NonPoaching,
            other => {
                return Err(Error::InvalidInput(format!("unknown observation category {other:?}")))
            }
        };
        records.push(Observation {
            x_km: parse_f64(&rec[0], "x_km")?,
            y_km: parse_f64(&rec[1], "y_km")?,
            timestamp: parse_timestamp(&rec[2])?,
            category,
        });
    }
    Ok(ObservationLog { records })
}

pub fn write_observations_csv(path: impl AsRef<Path>, log: &ObservationLog) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["x_km", "y_km", "timestamp_iso8601", "category"])?;
    for r in &log.records {
        let cat = match r.category {
            ObservationCategory::Poaching => "poaching",
            ObservationCategory::NonPoaching => "non_poaching",
        };
        w.write_record([
            r.x_km.to_string(),
            r.y_km.to_string(),
            format_timestamp(r.timestamp),
            cat.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// Writes `t,cell_id,effort_km,label,prev_effort_km,<features...>` for every
/// masked cell and window.
pub fn write_dataset_csv(path: impl AsRef<Path>, ds: &PatrolDataset) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    let mut header = vec![
        "t".to_string(),
        "cell_id".into(),
        "effort_km".into(),
        "label".into(),
        "prev_effort_km".into(),
    ];
    header.extend(ds.grid().feature_names().iter().cloned());
    w.write_record(&header)?;
    for r in ds.rows() {
        let mut rec = vec![
            r.t.to_string(),
            r.cell.to_string(),
            r.effort.to_string(),
            (r.label as u8).to_string(),
            ds.prev_effort().get(r.t, r.cell).to_string(),
        ];
        rec.extend(ds.grid().features(r.cell).iter().map(|v| v.to_string()));
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}

/// Reads a dataset exported by [`write_dataset_csv`]. Feature columns are
/// taken from the grid; unlisted cells get zero effort.
pub fn read_dataset_csv(path: impl AsRef<Path>, grid: Arc<ParkGrid>) -> Result<PatrolDataset> {
    let mut rdr = csv::Reader::from_path(path)?;
    let mut rows = Vec::new();
    let mut num_t = 0;
    for rec in rdr.records() {
        let rec = rec?;
        if rec.len() < 5 {
            return Err(Error::InvalidInput("dataset.csv rows need at least 5 fields".into()));
        }
        let t = parse_usize(&rec[0], "t")?;
        let cell = parse_usize(&rec[1], "cell_id")?;
        if cell >= grid.num_cells() {
            return Err(Error::InvalidInput(format!("cell_id {cell} outside the grid")));
        }
        let effort = parse_f64(&rec[2], "effort_km")?;
        let label = parse_flag(&rec[3], "label")? as u8;
        let prev = parse_f64(&rec[4], "prev_effort_km")?;
        num_t = num_t.max(t + 1);
        rows.push((t, cell, effort, label, prev));
    }
    let n = grid.num_cells();
    let mut effort = TimeCellMatrix::zeros(num_t, n);
    let mut labels = TimeCellMatrix::zeros(num_t, n);
    let mut prev = TimeCellMatrix::zeros(num_t, n);
    for (t, cell, e, l, p) in rows {
        effort.set(t, cell, e);
        labels.set(t, cell, l);
        prev.set(t, cell, p);
    }
    PatrolDataset::from_parts(grid, effort, labels, prev)
}

#[derive(serde::Deserialize, serde::Serialize)]
struct FieldTestRecord {
    #[serde(default)]
    trial: String,
    group: String,
    obs_cells: u64,
    patrolled_cells: u64,
    effort_km: f64,
}

/// Reads `[trial,]group,obs_cells,patrolled_cells,effort_km`. Rows keep file
/// order; the trial column, when present, is informational.
pub fn read_fieldtest_csv(path: impl AsRef<Path>) -> Result<FieldTestTable> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_path(path)?;
    let rows = rdr
        .deserialize::<FieldTestRecord>()
        .map(|r| {
            r.map(|r| FieldTestRow {
                group: r.group,
                obs_cells: r.obs_cells,
                patrolled_cells: r.patrolled_cells,
                effort_km: r.effort_km,
            })
        })
        .collect::<std::result::Result<Vec<_>, _>>()?;
    FieldTestTable::new(rows)
}

/// `start,end` as ISO-8601 timestamps, one window per row in time order.
pub fn write_windows_csv(path: impl AsRef<Path>, windows: &[TimeWindow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["start", "end"])?;
    for win in windows {
        w.write_record([format_timestamp(win.start), format_timestamp(win.end)])?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_windows_csv(path: impl AsRef<Path>) -> Result<Vec<TimeWindow>> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_path(path)?;
    let mut out = Vec::new();
    for rec in rdr.records() {
        let rec = rec?;
        if rec.len() != 2 {
            return Err(Error::InvalidInput(format!("window row {:?} needs start,end", rec)));
        }
        out.push(TimeWindow::new(parse_timestamp(&rec[0])?, parse_timestamp(&rec[1])?));
    }
    validate_windows(&out)?;
    Ok(out)
}

/// Reads the `cell_id,effort_level,prob,var` layout written by
/// [`RiskMap::write_csv`]. Every cell must list the same levels in the same
/// order; empty values mark cells outside the mask.
pub fn read_riskmap_csv(path: impl AsRef<Path>) -> Result<RiskMap> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_path(path)?;
    let headers = rdr.headers()?.clone();
    if headers.iter().collect::<Vec<_>>() != ["cell_id", "effort_level", "prob", "var"] {
        return Err(Error::InvalidInput(format!("riskmap header {headers:?} is not cell_id,effort_level,prob,var")));
    }
    let mut levels: Vec<f64> = Vec::new();
    let mut cells: Vec<Option<Vec<(f64, f64)>>> = Vec::new();
    let mut current: Option<(usize, Vec<f64>, Vec<Option<(f64, f64)>>)> = None;
    let finish = |cur: (usize, Vec<f64>, Vec<Option<(f64, f64)>>),
                      levels: &mut Vec<f64>,
                      cells: &mut Vec<Option<Vec<(f64, f64)>>>|
     -> Result<()> {
        let (id, lv, vals) = cur;
        if id != cells.len() {
            return Err(Error::InvalidInput(format!("riskmap cell {id} out of order (expected {})", cells.len())));
        }
        if cells.is_empty() {
            *levels = lv;
        } else if lv != *levels {
            return Err(Error::InvalidInput(format!("riskmap cell {id} lists different effort levels")));
        }
        let entry = if vals.iter().all(Option::is_none) {
            None
        } else {
            Some(
                vals.into_iter()
                    .collect::<Option<Vec<_>>>()
                    .ok_or_else(|| Error::InvalidInput(format!("riskmap cell {id} has missing values")))?,
            )
        };
        cells.push(entry);
        Ok(())
    };
    for rec in rdr.records() {
        let rec = rec?;
        let id = parse_usize(&rec[0], "cell_id")?;
        let level = parse_f64(&rec[1], "effort_level")?;
        let value = match (rec[2].is_empty(), rec[3].is_empty()) {
            (true, true) => None,
            (false, false) => Some((parse_f64(&rec[2], "prob")?, parse_f64(&rec[3], "var")?)),
            _ => return Err(Error::InvalidInput(format!("riskmap cell {id}: prob and var must both be set or empty"))),
        };
        if current.as_ref().map_or(true, |c| c.0 != id) {
            if let Some(done) = current.take() {
                finish(done, &mut levels, &mut cells)?;
            }
            current = Some((id, Vec::new(), Vec::new()));
        }
        let cur = current.as_mut().expect("set above");
        cur.1.push(level);
        cur.2.push(value);
    }
    if let Some(done) = current.take() {
        finish(done, &mut levels, &mut cells)?;
    }
    RiskMap::new(levels, cells)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::griddata::assemble_dataset;

    #[test]
    fn timestamps_round_trip() {
        let t = parse_timestamp("2017-03-01T12:30:00Z").unwrap();
        assert_eq!(format_timestamp(t), "2017-03-01T12:30:00Z");
        assert_eq!(parse_timestamp("2017-03-01").unwrap(), parse_timestamp("2017-03-01T00:00:00Z").unwrap());
        assert!(parse_timestamp("yesterday").is_err());
    }

    #[test]
    fn cells_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let grid = crate::griddata::tests::open_grid(3, 2, 2);
        let p = dir.path().join("cells.csv");
        write_cells_csv(&p, &grid).unwrap();
        assert_eq!(read_cells_csv(&p, 1.0).unwrap(), grid);
    }

    #[test]
    fn dataset_round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let grid = Arc::new(crate::griddata::tests::open_grid(2, 2, 1));
        let effort = TimeCellMatrix::from_vec(2, 4, vec![0.1 + 0.2, 1.0 / 3.0, 0.0, 2.5, 1e-17, 7.0, 3.3, 0.0]).unwrap();
        let labels = TimeCellMatrix::from_vec(2, 4, vec![1, 0, 0, 1, 0, 1, 0, 0]).unwrap();
        let ds = assemble_dataset(Arc::clone(&grid), effort, labels).unwrap();
        let p = dir.path().join("dataset.csv");
        write_dataset_csv(&p, &ds).unwrap();
        let back = read_dataset_csv(&p, grid).unwrap();
        assert_eq!(back.effort(), ds.effort());
        assert_eq!(back.labels(), ds.labels());
        assert_eq!(back.prev_effort(), ds.prev_effort());
    }

    #[test]
    fn fieldtest_reads_with_or_without_trial() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("fieldtest.csv");
        std::fs::write(&p, "trial,group,obs_cells,patrolled_cells,effort_km\n1,High,6,18,71.6\n1,Low,2,10,12.6\n").unwrap();
        let t = read_fieldtest_csv(&p).unwrap();
        assert_eq!(t.rows.len(), 2);
        assert_eq!(t.rows[0].group, "High");
        assert_eq!(t.rows[1].patrolled_cells, 10);
        std::fs::write(&p, "group,obs_cells,patrolled_cells,effort_km\nHigh,19,18,1.0\n").unwrap();
        assert!(read_fieldtest_csv(&p).is_err());
    }

    #[test]
    fn riskmap_round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let rm = RiskMap::new(
            vec![0.0, 0.7, 1.0 / 3.0 + 1.0],
            vec![Some(vec![(0.1, 0.0), (0.2 + 0.1, 1e-9), (0.9, 0.25)]), None, Some(vec![(0.0, 0.5); 3])],
        )
        .unwrap();
        let p = dir.path().join("riskmap.csv");
        rm.write_csv(&p).unwrap();
        assert_eq!(read_riskmap_csv(&p).unwrap(), rm);
        std::fs::write(&p, "cell_id,effort_level,prob,var\n0,0,0.1,0\n0,1,0.2,0\n1,0,0.1,0\n1,2,0.1,0\n").unwrap();
        assert!(read_riskmap_csv(&p).is_err());
    }

    #[test]
    fn windows_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("windows.csv");
        let w = crate::griddata::consecutive_windows(parse_timestamp("2015-01-01").unwrap(), 90.0 * 86_400.0, 3);
        write_windows_csv(&p, &w).unwrap();
        assert_eq!(read_windows_csv(&p).unwrap(), w);
        std::fs::write(&p, "start,end\n2015-02-01,2015-01-01\n").unwrap();
        assert!(read_windows_csv(&p).is_err());
    }
}
