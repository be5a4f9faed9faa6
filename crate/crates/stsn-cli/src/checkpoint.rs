//! Checkpoint binary format.
//!
//! Layout: magic bytes `STSN`, format version u32, entry count u32, then per
//! entry: name length u16 + UTF-8 name, dtype tag u8 (0 = f32), rank u8,
//! dims u32 each, raw little-endian f32 payload. All integers little-endian.
//! Model parameters keep their canonical names; optimizer state lives under
//! the `opt.` prefix, normalizer stats under `norm.` / `poi_norm.`, run
//! metadata under `meta.`.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use stsn_core::features::Normalizer;
use stsn_core::params::ParamSet;
use stsn_core::tensor::Tensor;
use stsn_core::training::AdamW;

use crate::error::{data_err, CliError};

pub const MAGIC: [u8; 4] = *b"STSN";
pub const VERSION: u32 = 1;
const DTYPE_F32: u8 = 0;

/// Everything a run needs to resume or evaluate: parameters, optimizer
/// moments, best-epoch metadata, the fitted normalizers and the effective
/// config text.
#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub params: ParamSet,
    pub opt: AdamW,
    pub epoch: usize,
    pub best_val_rmse: f64,
    pub normalizer: Normalizer,
    pub poi_normalizer: Normalizer,
    pub config_echo: String,
}

/// Ordered name -> tensor image of the file.
pub type Entries = BTreeMap<String, Tensor>;

pub fn write_entries(path: &Path, entries: &Entries) -> Result<(), CliError> {
    let mut buf: Vec<u8> = Vec::new();
    buf.extend_from_slice(&MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    buf.extend_from_slice(&(entries.len() as u32).to_le_bytes());
    for (name, tensor) in entries {
        let name_bytes = name.as_bytes();
        buf.extend_from_slice(&(name_bytes.len() as u16).to_le_bytes());
        buf.extend_from_slice(name_bytes);
        buf.push(DTYPE_F32);
        buf.push(tensor.rank() as u8);
        for &d in tensor.shape() {
            buf.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for &v in tensor.data() {
            buf.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    let mut file = std::fs::File::create(path)?;
    file.write_all(&buf)?;
    Ok(())
}

pub fn read_entries(path: &Path) -> Result<Entries, CliError> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)
        .map_err(|e| data_err(format!("cannot open {}: {e}", path.display())))?
        .read_to_end(&mut bytes)?;
    let mut pos = 0usize;
    let take = |pos: &mut usize, n: usize| -> Result<&[u8], CliError> {
        if *pos + n > bytes.len() {
            return Err(data_err(format!("{}: truncated at byte {}", path.display(), *pos)));
        }
        let s = &bytes[*pos..*pos + n];
        *pos += n;
        Ok(s)
    };
    if take(&mut pos, 4)? != MAGIC {
        return Err(data_err(format!("{}: bad magic", path.display())));
    }
    let version = u32::from_le_bytes(take(&mut pos, 4)?.try_into().unwrap());
    if version != VERSION {
        return Err(data_err(format!(
            "{}: unsupported version {version}",
            path.display()
        )));
    }
    let count = u32::from_le_bytes(take(&mut pos, 4)?.try_into().unwrap());
    let mut entries = Entries::new();
    for _ in 0..count {
        let name_len = u16::from_le_bytes(take(&mut pos, 2)?.try_into().unwrap()) as usize;
        let name = String::from_utf8(take(&mut pos, name_len)?.to_vec())
            .map_err(|_| data_err(format!("{}: non-UTF8 entry name", path.display())))?;
        let dtype = take(&mut pos, 1)?[0];
        if dtype != DTYPE_F32 {
            return Err(data_err(format!("{}: unknown dtype {dtype}", path.display())));
        }
        let rank = take(&mut pos, 1)?[0] as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(u32::from_le_bytes(take(&mut pos, 4)?.try_into().unwrap()) as usize);
        }
        let numel: usize = shape.iter().product();
        let raw = take(&mut pos, numel * 4)?;
        let data: Vec<f64> = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
            .collect();
        let tensor = Tensor::new(shape, data)
            .map_err(|e| data_err(format!("{}: entry {name}: {e}", path.display())))?;
        entries.insert(name, tensor);
    }
    if pos != bytes.len() {
        return Err(data_err(format!(
            "{}: {} trailing bytes",
            path.display(),
            bytes.len() - pos
        )));
    }
    Ok(entries)
}

fn vec_tensor(values: &[f64]) -> Tensor {
    Tensor::new(vec![values.len()], values.to_vec()).expect("vector tensor")
}

/// UTF-8 text stored as one byte per f32 element; exact for all byte values.
fn text_tensor(text: &str) -> Tensor {
    Tensor::new(
        vec![text.len()],
        text.bytes().map(|b| b as f64).collect(),
    )
    .expect("text tensor")
}

fn tensor_text(t: &Tensor) -> String {
    t.data().iter().map(|&v| v as u8 as char).collect()
}

pub fn save(path: &Path, ckpt: &Checkpoint) -> Result<(), CliError> {
    let mut entries = Entries::new();
    for (name, param) in ckpt.params.iter() {
        entries.insert(name.clone(), param.tensor.clone());
    }
    for (name, m) in &ckpt.opt.m {
        entries.insert(format!("opt.m.{name}"), vec_tensor(m));
    }
    for (name, v) in &ckpt.opt.v {
        entries.insert(format!("opt.v.{name}"), vec_tensor(v));
    }
    entries.insert("opt.step".into(), Tensor::scalar(ckpt.opt.step_count as f64));
    entries.insert("opt.lr".into(), Tensor::scalar(ckpt.opt.lr));
    entries.insert(
        "opt.weight_decay".into(),
        Tensor::scalar(ckpt.opt.weight_decay),
    );
    entries.insert("meta.epoch".into(), Tensor::scalar(ckpt.epoch as f64));
    entries.insert(
        "meta.best_val_rmse".into(),
        Tensor::scalar(ckpt.best_val_rmse),
    );
    entries.insert("meta.config.utf8".into(), text_tensor(&ckpt.config_echo));
    entries.insert("norm.min".into(), vec_tensor(&ckpt.normalizer.min));
    entries.insert("norm.max".into(), vec_tensor(&ckpt.normalizer.max));
    entries.insert("poi_norm.min".into(), vec_tensor(&ckpt.poi_normalizer.min));
    entries.insert("poi_norm.max".into(), vec_tensor(&ckpt.poi_normalizer.max));
    write_entries(path, &entries)
}

pub fn load(path: &Path) -> Result<Checkpoint, CliError> {
    let mut entries = read_entries(path)?;
    let mut need = |name: &str| -> Result<Tensor, CliError> {
        entries
            .remove(name)
            .ok_or_else(|| data_err(format!("{}: missing entry {name}", path.display())))
    };
    let step = need("opt.step")?.item() as u64;
    let lr = need("opt.lr")?.item();
    let weight_decay = need("opt.weight_decay")?.item();
    let epoch = need("meta.epoch")?.item() as usize;
    let best_val_rmse = need("meta.best_val_rmse")?.item();
    let config_echo = tensor_text(&need("meta.config.utf8")?);
    let normalizer = Normalizer {
        min: need("norm.min")?.into_data(),
        max: need("norm.max")?.into_data(),
    };
    let poi_normalizer = Normalizer {
        min: need("poi_norm.min")?.into_data(),
        max: need("poi_norm.max")?.into_data(),
    };

    let mut opt = AdamW::new(lr, weight_decay);
    opt.step_count = step;
    let mut params = ParamSet::new();
    for (name, tensor) in entries {
        if let Some(pname) = name.strip_prefix("opt.m.") {
            opt.m.insert(pname.to_string(), tensor.into_data());
        } else if let Some(pname) = name.strip_prefix("opt.v.") {
            opt.v.insert(pname.to_string(), tensor.into_data());
        } else if name.contains(".running_") {
            params.insert_buffer(&name, tensor);
        } else {
            params.insert(&name, tensor);
        }
    }
    Ok(Checkpoint {
        params,
        opt,
        epoch,
        best_val_rmse,
        normalizer,
        poi_normalizer,
        config_echo,
    })
}
