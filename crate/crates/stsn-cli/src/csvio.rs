//! CSV parsers for the three ingestion formats, with line-numbered errors,
//! and the ISO-8601 timestamp reader.

use std::path::Path;

use stsn_core::civil::CivilTime;
use stsn_core::features::{Event, EventKind, TrajPoint};

use crate::error::{data_err, CliError};

/// Parses `YYYY-MM-DDTHH:MM[:SS]` with optional `Z` or `+HH:MM`/`-HH:MM`
/// offset (a space may replace the `T`). Returns Unix seconds.
pub fn parse_timestamp(s: &str) -> Result<i64, String> {
    let s = s.trim();
    let bad = || format!("malformed timestamp {s:?}");
    let (date, rest) = s.split_at_checked(10).ok_or_else(bad)?;
    let mut it = date.split('-');
    let year: i64 = it.next().and_then(|v| v.parse().ok()).ok_or_else(bad)?;
    let month: u32 = it.next().and_then(|v| v.parse().ok()).ok_or_else(bad)?;
    let day: u32 = it.next().and_then(|v| v.parse().ok()).ok_or_else(bad)?;
    if it.next().is_some() || !(1..=12).contains(&month) || !(1..=31).contains(&day) {
        return Err(bad());
    }
    let rest = rest
        .strip_prefix('T')
        .or_else(|| rest.strip_prefix(' '))
        .ok_or_else(bad)?;

    // Split the clock from an optional offset suffix.
    let (clock, offset_secs) = if let Some(c) = rest.strip_suffix('Z') {
        (c, 0i64)
    } else if let Some(idx) = rest.rfind(['+', '-']).filter(|&i| i >= 5) {
        let (c, off) = rest.split_at(idx);
        let sign: i64 = if off.starts_with('-') { -1 } else { 1 };
        let body = &off[1..];
        let (oh, om) = body.split_once(':').ok_or_else(bad)?;
        let oh: i64 = oh.parse().map_err(|_| bad())?;
        let om: i64 = om.parse().map_err(|_| bad())?;
        (c, sign * (oh * 3600 + om * 60))
    } else {
        (rest, 0i64)
    };

    let mut parts = clock.split(':');
    let hour: u32 = parts.next().and_then(|v| v.parse().ok()).ok_or_else(bad)?;
    let minute: u32 = parts.next().and_then(|v| v.parse().ok()).ok_or_else(bad)?;
    let second: i64 = match parts.next() {
        Some(v) => v.parse().map_err(|_| bad())?,
        None => 0,
    };
    if parts.next().is_some() || hour > 23 || minute > 59 || !(0..60).contains(&second) {
        return Err(bad());
    }
    let civil = CivilTime {
        year,
        month,
        day,
        hour,
        minute,
    };
    Ok(civil.epoch_minutes() * 60 + second - offset_secs)
}

fn read_lines(path: &Path) -> Result<Vec<String>, CliError> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| data_err(format!("cannot read {}: {e}", path.display())))?;
    Ok(text.lines().map(|l| l.to_string()).collect())
}

fn split_fields<'l>(
    path: &Path,
    lineno: usize,
    line: &'l str,
    want: usize,
) -> Result<Vec<&'l str>, CliError> {
    let fields: Vec<&str> = line.split(',').map(|f| f.trim()).collect();
    if fields.len() != want {
        return Err(data_err(format!(
            "{} line {lineno}: expected {want} fields, got {}",
            path.display(),
            fields.len()
        )));
    }
    Ok(fields)
}

fn parse_f64(path: &Path, lineno: usize, what: &str, s: &str) -> Result<f64, CliError> {
    s.parse()
        .map_err(|_| data_err(format!("{} line {lineno}: bad {what} {s:?}", path.display())))
}

/// Trajectory CSV: header `vehicle_id,timestamp,lat,lon`, rows sorted within
/// each vehicle. Returns per-vehicle point sequences in order of first
/// appearance.
pub fn read_trajectories(path: &Path) -> Result<Vec<(String, Vec<TrajPoint>)>, CliError> {
    let lines = read_lines(path)?;
    expect_header(path, &lines, "vehicle_id,timestamp,lat,lon")?;
    let mut order: Vec<String> = Vec::new();
    let mut by_vehicle: std::collections::BTreeMap<String, Vec<TrajPoint>> =
        Default::default();
    for (i, line) in lines.iter().enumerate().skip(1) {
        if line.trim().is_empty() {
            continue;
        }
        let lineno = i + 1;
        let f = split_fields(path, lineno, line, 4)?;
        let t = parse_timestamp(f[1])
            .map_err(|e| data_err(format!("{} line {lineno}: {e}", path.display())))?;
        let point = TrajPoint {
            t,
            lat: parse_f64(path, lineno, "lat", f[2])?,
            lon: parse_f64(path, lineno, "lon", f[3])?,
        };
        if !by_vehicle.contains_key(f[0]) {
            order.push(f[0].to_string());
        }
        by_vehicle.entry(f[0].to_string()).or_default().push(point);
    }
    Ok(order
        .into_iter()
        .map(|v| {
            let pts = by_vehicle.remove(&v).unwrap();
            (v, pts)
        })
        .collect())
}

/// Event CSV: header `kind,timestamp,lat,lon`, kind in {pickup, dropoff}.
pub fn read_events(path: &Path) -> Result<Vec<Event>, CliError> {
    let lines = read_lines(path)?;
    expect_header(path, &lines, "kind,timestamp,lat,lon")?;
    let mut events = Vec::new();
    for (i, line) in lines.iter().enumerate().skip(1) {
        if line.trim().is_empty() {
            continue;
        }
        let lineno = i + 1;
        let f = split_fields(path, lineno, line, 4)?;
        let kind = match f[0] {
            "pickup" => EventKind::Pickup,
            "dropoff" => EventKind::Dropoff,
            other => {
                return Err(data_err(format!(
                    "{} line {lineno}: kind {other:?} not pickup|dropoff",
                    path.display()
                )))
            }
        };
        let t = parse_timestamp(f[1])
            .map_err(|e| data_err(format!("{} line {lineno}: {e}", path.display())))?;
        events.push(Event {
            kind,
            t,
            lat: parse_f64(path, lineno, "lat", f[2])?,
            lon: parse_f64(path, lineno, "lon", f[3])?,
        });
    }
    Ok(events)
}

/// POI CSV: header `category,lat,lon`.
pub fn read_pois(path: &Path) -> Result<Vec<(String, f64, f64)>, CliError> {
    let lines = read_lines(path)?;
    expect_header(path, &lines, "category,lat,lon")?;
    let mut pois = Vec::new();
    for (i, line) in lines.iter().enumerate().skip(1) {
        if line.trim().is_empty() {
            continue;
        }
        let lineno = i + 1;
        let f = split_fields(path, lineno, line, 3)?;
        pois.push((
            f[0].to_string(),
            parse_f64(path, lineno, "lat", f[1])?,
            parse_f64(path, lineno, "lon", f[2])?,
        ));
    }
    Ok(pois)
}

fn expect_header(path: &Path, lines: &[String], want: &str) -> Result<(), CliError> {
    let got = lines
        .first()
        .map(|l| l.replace(' ', ""))
        .unwrap_or_default();
    if got != want {
        return Err(data_err(format!(
            "{} line 1: expected header {want:?}, got {got:?}",
            path.display()
        )));
    }
    Ok(())
}

/// Writes per-vehicle trajectories in the ingestion CSV format.
pub fn write_trajectory_csv(
    path: &Path,
    trajectories: &[Vec<TrajPoint>],
) -> Result<(), CliError> {
    let mut csv = String::from("vehicle_id,timestamp,lat,lon\n");
    for (v, points) in trajectories.iter().enumerate() {
        for p in points {
            csv.push_str(&format!(
                "v{v},{},{},{}\n",
                format_timestamp(p.t),
                p.lat,
                p.lon
            ));
        }
    }
    std::fs::write(path, csv)?;
    Ok(())
}

/// Formats Unix seconds as `YYYY-MM-DDTHH:MM:SS` (UTC).
pub fn format_timestamp(t: i64) -> String {
    let civil = CivilTime::from_epoch_minutes(t.div_euclid(60));
    let secs = t.rem_euclid(60);
    format!(
        "{:04}-{:02}-{:02}T{:02}:{:02}:{:02}",
        civil.year, civil.month, civil.day, civil.hour, civil.minute, secs
    )
}
