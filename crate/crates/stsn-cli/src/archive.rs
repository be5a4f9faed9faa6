//! Feature archive on disk: one tensor file per interval in the checkpoint
//! encoding, a POI tensor file, a plain-text manifest and (for synthetic
//! data) the redundancy ground-truth CSV.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use stsn_core::dataset::IntervalSeries;
use stsn_core::grid::GridSpec;
use stsn_core::synthcity::SynthCity;
use stsn_core::tensor::Tensor;

use crate::checkpoint::{read_entries, write_entries, Entries};
use crate::error::{data_err, CliError};

pub const MANIFEST: &str = "manifest.txt";

fn interval_file(dir: &Path, id: i64) -> PathBuf {
    dir.join(format!("interval_{id}.stsn"))
}

fn write_tensor(path: &Path, name: &str, tensor: &Tensor) -> Result<(), CliError> {
    let mut entries = Entries::new();
    entries.insert(name.into(), tensor.clone());
    write_entries(path, &entries)
}

fn read_tensor(path: &Path, name: &str) -> Result<Tensor, CliError> {
    let mut entries = read_entries(path)?;
    entries
        .remove(name)
        .ok_or_else(|| data_err(format!("{}: missing entry {name}", path.display())))
}

/// Optional interval-range annotations carried by the manifest.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct Ranges {
    pub train_start: Option<i64>,
    pub train_end: Option<i64>,
    pub test_start: Option<i64>,
    pub test_end: Option<i64>,
}

pub fn write_archive(
    dir: &Path,
    series: &IntervalSeries,
    ranges: &Ranges,
) -> Result<(), CliError> {
    std::fs::create_dir_all(dir)?;
    for (i, img) in series.images.iter().enumerate() {
        let id = series.first_interval + i as i64;
        write_tensor(&interval_file(dir, id), "x", img)?;
    }
    write_tensor(&dir.join("poi.stsn"), "poi", &series.poi)?;

    let mut m = String::new();
    let grid = &series.grid;
    m.push_str(&format!("lat_min={}\n", grid.lat_min));
    m.push_str(&format!("lat_max={}\n", grid.lat_max));
    m.push_str(&format!("lon_min={}\n", grid.lon_min));
    m.push_str(&format!("lon_max={}\n", grid.lon_max));
    m.push_str(&format!("rows={}\n", grid.rows));
    m.push_str(&format!("cols={}\n", grid.cols));
    m.push_str(&format!("regions={}\n", grid.regions()));
    m.push_str(&format!("cell_meters={}\n", grid.cell_meters));
    m.push_str(&format!("channels={}\n", series.channel_names.join(",")));
    m.push_str(&format!(
        "poi_categories={}\n",
        series.poi_categories.join(",")
    ));
    m.push_str(&format!("first_interval={}\n", series.first_interval));
    m.push_str(&format!("intervals={}\n", series.images.len()));
    m.push_str(&format!(
        "utc_offset_minutes={}\n",
        series.utc_offset_minutes
    ));
    // Informational normalizer stats over the training span when declared,
    // otherwise over the whole series; training refits on its own split.
    let fit_end = ranges
        .train_end
        .unwrap_or(series.first_interval + series.images.len() as i64);
    let span = series
        .images
        .iter()
        .enumerate()
        .filter(|(i, _)| series.first_interval + (*i as i64) < fit_end)
        .map(|(_, t)| t);
    if let Ok(norm) = stsn_core::features::Normalizer::fit(span) {
        m.push_str(&format!(
            "norm_min={}\n",
            norm.min.iter().map(f64::to_string).collect::<Vec<_>>().join(",")
        ));
        m.push_str(&format!(
            "norm_max={}\n",
            norm.max.iter().map(f64::to_string).collect::<Vec<_>>().join(",")
        ));
    }
    for (key, value) in [
        ("train_start", ranges.train_start),
        ("train_end", ranges.train_end),
        ("test_start", ranges.test_start),
        ("test_end", ranges.test_end),
    ] {
        if let Some(v) = value {
            m.push_str(&format!("{key}={v}\n"));
        }
    }
    std::fs::write(dir.join(MANIFEST), m)?;
    Ok(())
}

/// Redundancy ground truth CSV: `region_index,label,source_id,scale`.
pub fn write_labels(dir: &Path, city: &SynthCity) -> Result<(), CliError> {
    let mut csv = String::from("region_index,label,source_id,scale\n");
    for (i, label) in city.labels.iter().enumerate() {
        csv.push_str(&format!(
            "{i},{},{},{}\n",
            label.as_str(),
            city.source_id[i],
            city.scale[i]
        ));
    }
    std::fs::write(dir.join("labels.csv"), csv)?;
    Ok(())
}

pub fn read_manifest(dir: &Path) -> Result<BTreeMap<String, String>, CliError> {
    let path = dir.join(MANIFEST);
    let text = std::fs::read_to_string(&path)
        .map_err(|e| data_err(format!("cannot read {}: {e}", path.display())))?;
    let mut map = BTreeMap::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| data_err(format!("{} line {}: not key=value", path.display(), i + 1)))?;
        map.insert(k.to_string(), v.to_string());
    }
    Ok(map)
}

fn manifest_get<'m>(
    map: &'m BTreeMap<String, String>,
    dir: &Path,
    key: &str,
) -> Result<&'m str, CliError> {
    map.get(key)
        .map(|s| s.as_str())
        .ok_or_else(|| data_err(format!("{}: manifest missing {key}", dir.display())))
}

/// Loads the archive back into memory.
pub fn read_archive(dir: &Path) -> Result<(IntervalSeries, Ranges), CliError> {
    let map = read_manifest(dir)?;
    let get = |k: &str| manifest_get(&map, dir, k);
    let parse_f = |k: &str| -> Result<f64, CliError> {
        get(k)?
            .parse()
            .map_err(|_| data_err(format!("manifest {k} not a number")))
    };
    let parse_i = |k: &str| -> Result<i64, CliError> {
        get(k)?
            .parse()
            .map_err(|_| data_err(format!("manifest {k} not an integer")))
    };
    let grid = GridSpec::new(
        parse_f("lat_min")?,
        parse_f("lat_max")?,
        parse_f("lon_min")?,
        parse_f("lon_max")?,
        parse_i("rows")? as usize,
        parse_i("cols")? as usize,
        parse_f("cell_meters")?,
    )
    .map_err(|e| data_err(format!("manifest grid: {e}")))?;
    let first_interval = parse_i("first_interval")?;
    let count = parse_i("intervals")? as usize;
    let mut images = Vec::with_capacity(count);
    for i in 0..count {
        let id = first_interval + i as i64;
        images.push(read_tensor(&interval_file(dir, id), "x")?);
    }
    let poi = read_tensor(&dir.join("poi.stsn"), "poi")?;
    let opt_i = |k: &str| -> Result<Option<i64>, CliError> {
        match map.get(k) {
            Some(v) => v
                .parse()
                .map(Some)
                .map_err(|_| data_err(format!("manifest {k} not an integer"))),
            None => Ok(None),
        }
    };
    let ranges = Ranges {
        train_start: opt_i("train_start")?,
        train_end: opt_i("train_end")?,
        test_start: opt_i("test_start")?,
        test_end: opt_i("test_end")?,
    };
    let series = IntervalSeries {
        grid,
        first_interval,
        images,
        channel_names: get("channels")?.split(',').map(str::to_string).collect(),
        poi,
        poi_categories: get("poi_categories")?
            .split(',')
            .map(str::to_string)
            .collect(),
        utc_offset_minutes: parse_i("utc_offset_minutes")? as i32,
    };
    Ok((series, ranges))
}
