//! Flat key=value run configuration.
//!
//! Sources merge in order: built-in defaults, then the `--config` file, then
//! command-line `--set`/dedicated flags (later wins). Unknown keys are
//! rejected. The effective configuration is echoed to the run directory so
//! a run can be reproduced from its own output.

use std::collections::BTreeMap;
use std::path::Path;

use stsn_core::model::{ModelConfig, ReadoutPool};
use stsn_core::synthcity::SyntheticCitySpec;
use stsn_core::training::TrainConfig;

use crate::error::{config_err, CliError};

/// (key, default, help) table; the single source of truth for known keys.
pub const KNOWN_KEYS: &[(&str, &str, &str)] = &[
    ("rows", "20", "grid rows H"),
    ("cols", "20", "grid cols W"),
    ("channels", "3", "measurement channels M"),
    ("poi_channels", "10", "POI category channels P"),
    ("d", "128", "feature dimension"),
    ("resnet_blocks", "3", "residual blocks m per encoder"),
    ("kernel", "3", "conv kernel size (odd)"),
    ("scpe_levels", "3", "position-embedding hierarchy levels"),
    ("scpe_branch", "4", "cells merged per hierarchy step"),
    ("heads", "8", "attention heads"),
    ("spatial_layers", "2", "spatial encoder layers"),
    ("temporal_layers", "2", "temporal encoder layers"),
    ("ffn_mult", "4", "FFN width multiplier"),
    ("readout", "token", "sequence pooling: token | mean"),
    ("closeness", "4", "closeness intervals"),
    ("period", "3", "period intervals"),
    ("trend", "2", "trend intervals"),
    ("period_span", "24", "period offset in intervals"),
    ("trend_span", "168", "trend offset in intervals"),
    ("keep_ratio", "1.0", "region keep ratio (0,1]"),
    ("gumbel_tau", "1.0", "Gumbel-Softmax temperature"),
    ("alpha", "0.3", "self-distillation loss weight"),
    ("lr", "0.001", "learning rate"),
    ("weight_decay", "0.01", "AdamW decoupled weight decay"),
    ("max_epochs", "500", "epoch cap"),
    ("patience", "30", "early-stopping patience"),
    ("batch_size", "16", "mini-batch size"),
    ("seed", "42", "root RNG seed"),
    ("val_fraction", "0.2", "chronological validation fraction"),
    ("log_timing", "true", "record wall-clock seconds in the metric log"),
    ("sample_stride", "1", "use every k-th viable target interval"),
    ("data_dir", "", "feature archive directory"),
    ("out_dir", "run", "output directory"),
    ("utc_offset_minutes", "0", "fixed UTC offset for civil time"),
    ("train_start", "", "first training target interval (default: manifest)"),
    ("train_end", "", "one past last training target (default: manifest)"),
    ("test_start", "", "first test target interval (default: manifest)"),
    ("test_end", "", "one past last test target (default: manifest)"),
    ("lat_min", "", "ingest grid bounds"),
    ("lat_max", "", "ingest grid bounds"),
    ("lon_min", "", "ingest grid bounds"),
    ("lon_max", "", "ingest grid bounds"),
    ("cell_meters", "500", "nominal cell size (metadata)"),
    ("synth_rows", "20", "synthetic grid rows"),
    ("synth_cols", "20", "synthetic grid cols"),
    ("synth_sources", "3", "shared source patterns"),
    ("synth_unique", "4", "regions with private patterns"),
    ("synth_empty_rows", "", "empty-block rows (default: ceil(rows/3))"),
    ("synth_empty_cols", "", "empty-block cols (default: ceil(cols/3))"),
    ("synth_noise", "0.0", "additive noise std in counts"),
    ("synth_train_hours", "1008", "synthetic training span"),
    ("synth_test_hours", "168", "synthetic test span"),
    ("synth_amplitude", "50.0", "synthetic base magnitude"),
];

#[derive(Clone, Debug)]
pub struct RunConfig {
    values: BTreeMap<String, String>,
}

impl Default for RunConfig {
    fn default() -> Self {
        let values = KNOWN_KEYS
            .iter()
            .map(|(k, d, _)| (k.to_string(), d.to_string()))
            .collect();
        RunConfig { values }
    }
}

impl RunConfig {
    pub fn set(&mut self, key: &str, value: &str) -> Result<(), CliError> {
        if !KNOWN_KEYS.iter().any(|(k, _, _)| *k == key) {
            return Err(config_err(format!("unknown key {key:?}")));
        }
        self.values.insert(key.to_string(), value.to_string());
        Ok(())
    }

    /// Parses `key=value` lines; `#` starts a comment, blank lines ignored.
    pub fn merge_text(&mut self, text: &str, origin: &str) -> Result<(), CliError> {
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let Some((key, value)) = line.split_once('=') else {
                return Err(config_err(format!(
                    "{origin} line {}: expected key=value, got {line:?}",
                    lineno + 1
                )));
            };
            self.set(key.trim(), value.trim())
                .map_err(|e| config_err(format!("{origin} line {}: {e}", lineno + 1)))?;
        }
        Ok(())
    }

    pub fn merge_file(&mut self, path: &Path) -> Result<(), CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| config_err(format!("cannot read config {}: {e}", path.display())))?;
        self.merge_text(&text, &path.display().to_string())
    }

    pub fn get(&self, key: &str) -> &str {
        self.values
            .get(key)
            .unwrap_or_else(|| panic!("key {key} missing from defaults table"))
    }

    pub fn has(&self, key: &str) -> bool {
        !self.get(key).is_empty()
    }

    pub fn usize_of(&self, key: &str) -> Result<usize, CliError> {
        self.get(key)
            .parse()
            .map_err(|_| config_err(format!("{key}={:?} is not a non-negative integer", self.get(key))))
    }

    pub fn i64_of(&self, key: &str) -> Result<i64, CliError> {
        self.get(key)
            .parse()
            .map_err(|_| config_err(format!("{key}={:?} is not an integer", self.get(key))))
    }

    pub fn i32_of(&self, key: &str) -> Result<i32, CliError> {
        self.get(key)
            .parse()
            .map_err(|_| config_err(format!("{key}={:?} is not an integer", self.get(key))))
    }

    pub fn f64_of(&self, key: &str) -> Result<f64, CliError> {
        self.get(key)
            .parse()
            .map_err(|_| config_err(format!("{key}={:?} is not a number", self.get(key))))
    }

    pub fn u64_of(&self, key: &str) -> Result<u64, CliError> {
        self.get(key)
            .parse()
            .map_err(|_| config_err(format!("{key}={:?} is not an unsigned integer", self.get(key))))
    }

    pub fn bool_of(&self, key: &str) -> Result<bool, CliError> {
        match self.get(key) {
            "true" | "1" | "yes" => Ok(true),
            "false" | "0" | "no" => Ok(false),
            other => Err(config_err(format!("{key}={other:?} is not a boolean"))),
        }
    }

    /// Optional interval bound: empty string means "take it from the
    /// archive manifest".
    pub fn opt_i64(&self, key: &str) -> Result<Option<i64>, CliError> {
        if self.has(key) {
            Ok(Some(self.i64_of(key)?))
        } else {
            Ok(None)
        }
    }

    pub fn model_config(&self) -> Result<ModelConfig, CliError> {
        let readout = match self.get("readout") {
            "token" => ReadoutPool::Token,
            "mean" => ReadoutPool::Mean,
            other => return Err(config_err(format!("readout={other:?}, want token|mean"))),
        };
        let cfg = ModelConfig {
            rows: self.usize_of("rows")?,
            cols: self.usize_of("cols")?,
            channels: self.usize_of("channels")?,
            poi_channels: self.usize_of("poi_channels")?,
            d: self.usize_of("d")?,
            resnet_blocks: self.usize_of("resnet_blocks")?,
            kernel: self.usize_of("kernel")?,
            scpe_levels: self.usize_of("scpe_levels")?,
            scpe_branch: self.usize_of("scpe_branch")?,
            heads: self.usize_of("heads")?,
            spatial_layers: self.usize_of("spatial_layers")?,
            temporal_layers: self.usize_of("temporal_layers")?,
            ffn_mult: self.usize_of("ffn_mult")?,
            closeness: self.usize_of("closeness")?,
            period: self.usize_of("period")?,
            trend: self.usize_of("trend")?,
            period_span: self.i64_of("period_span")?,
            trend_span: self.i64_of("trend_span")?,
            keep_ratio: self.f64_of("keep_ratio")?,
            gumbel_tau: self.f64_of("gumbel_tau")?,
            readout,
        };
        cfg.validate()
            .map_err(|e| config_err(format!("{e}")))?;
        Ok(cfg)
    }

    pub fn train_config(&self) -> Result<TrainConfig, CliError> {
        let cfg = TrainConfig {
            alpha: self.f64_of("alpha")?,
            lr: self.f64_of("lr")?,
            weight_decay: self.f64_of("weight_decay")?,
            max_epochs: self.usize_of("max_epochs")?,
            patience: self.usize_of("patience")?,
            batch_size: self.usize_of("batch_size")?,
            seed: self.u64_of("seed")?,
            val_fraction: self.f64_of("val_fraction")?,
        };
        cfg.validate().map_err(|e| config_err(format!("{e}")))?;
        Ok(cfg)
    }

    pub fn synth_spec(&self) -> Result<SyntheticCitySpec, CliError> {
        let rows = self.usize_of("synth_rows")?;
        let cols = self.usize_of("synth_cols")?;
        let empty_rows = if self.has("synth_empty_rows") {
            self.usize_of("synth_empty_rows")?
        } else {
            rows.div_ceil(3)
        };
        let empty_cols = if self.has("synth_empty_cols") {
            self.usize_of("synth_empty_cols")?
        } else {
            cols.div_ceil(3)
        };
        Ok(SyntheticCitySpec {
            rows,
            cols,
            shared_sources: self.usize_of("synth_sources")?,
            unique_regions: self.usize_of("synth_unique")?,
            empty_rows,
            empty_cols,
            noise: self.f64_of("synth_noise")?,
            train_hours: self.usize_of("synth_train_hours")?,
            test_hours: self.usize_of("synth_test_hours")?,
            amplitude: self.f64_of("synth_amplitude")?,
            seed: self.u64_of("seed")?,
        })
    }

    /// Canonical echo: sorted `key=value` lines, one per key.
    pub fn echo(&self) -> String {
        let mut out = String::new();
        for (k, v) in &self.values {
            out.push_str(k);
            out.push('=');
            out.push_str(v);
            out.push('\n');
        }
        out
    }
}
