//! Named parameter store shared by model construction, the optimizer and
//! checkpointing.

use alloc::collections::BTreeMap;
use alloc::string::{String, ToString};
use alloc::vec::Vec;

use crate::fmath;
use crate::rng::Rng;
use crate::tape::{BnStats, Tape, Var};
use crate::tensor::Tensor;

/// One named entry. Non-trainable entries (batch-norm running statistics)
/// are checkpointed but never updated by the optimizer.
#[derive(Clone, Debug, PartialEq)]
pub struct Param {
    pub tensor: Tensor,
    pub trainable: bool,
}

/// Ordered name -> tensor map. BTreeMap keeps iteration deterministic, which
/// the reproducibility contract relies on.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamSet {
    entries: BTreeMap<String, Param>,
}

impl ParamSet {
    pub fn new() -> Self {
        ParamSet {
            entries: BTreeMap::new(),
        }
    }

    pub fn insert(&mut self, name: &str, tensor: Tensor) {
        self.entries.insert(
            name.to_string(),
            Param {
                tensor,
                trainable: true,
            },
        );
    }

    pub fn insert_buffer(&mut self, name: &str, tensor: Tensor) {
        self.entries.insert(
            name.to_string(),
            Param {
                tensor,
                trainable: false,
            },
        );
    }

    pub fn get(&self, name: &str) -> &Tensor {
        &self
            .entries
            .get(name)
            .unwrap_or_else(|| panic!("unknown parameter {name}"))
            .tensor
    }

    pub fn get_mut(&mut self, name: &str) -> &mut Tensor {
        &mut self
            .entries
            .get_mut(name)
            .unwrap_or_else(|| panic!("unknown parameter {name}"))
            .tensor
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.contains_key(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Param)> {
        self.entries.iter()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.entries.keys()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Total number of trainable scalars.
    pub fn trainable_scalars(&self) -> usize {
        self.entries
            .values()
            .filter(|p| p.trainable)
            .map(|p| p.tensor.len())
            .sum()
    }

    /// Batch-norm running stats stored as `<prefix>.running_mean/var`.
    pub fn bn_stats(&self, prefix: &str) -> BnStats {
        BnStats {
            mean: self.get(&alloc::format!("{prefix}.running_mean")).data().to_vec(),
            var: self.get(&alloc::format!("{prefix}.running_var")).data().to_vec(),
        }
    }

    pub fn set_bn_stats(&mut self, prefix: &str, stats: &BnStats) {
        self.get_mut(&alloc::format!("{prefix}.running_mean"))
            .data_mut()
            .copy_from_slice(&stats.mean);
        self.get_mut(&alloc::format!("{prefix}.running_var"))
            .data_mut()
            .copy_from_slice(&stats.var);
    }
}

/// Caches one tape leaf per parameter while building a forward graph.
/// `trainable: false` binds every parameter as a constant, which is how the
/// gradient-blocked teacher pass shares weights without receiving gradient.
pub struct Binder<'p> {
    params: &'p ParamSet,
    bound: BTreeMap<String, Var>,
    trainable: bool,
}

impl<'p> Binder<'p> {
    pub fn new(params: &'p ParamSet, trainable: bool) -> Self {
        Binder {
            params,
            bound: BTreeMap::new(),
            trainable,
        }
    }

    pub fn params(&self) -> &ParamSet {
        self.params
    }

    pub fn var(&mut self, tape: &mut Tape, name: &str) -> Var {
        if let Some(v) = self.bound.get(name) {
            return *v;
        }
        let entry = self
            .params
            .entries
            .get(name)
            .unwrap_or_else(|| panic!("unknown parameter {name}"));
        let mut t = entry.tensor.clone();
        t.requires_grad = self.trainable && entry.trainable;
        let v = tape.leaf(t);
        self.bound.insert(name.to_string(), v);
        v
    }

    /// Gradients of all bound-and-reached parameters; every trainable
    /// parameter of the set appears, unreachable ones as zero tensors.
    pub fn collect_grads(&self, tape: &Tape) -> BTreeMap<String, Tensor> {
        let mut out = BTreeMap::new();
        for (name, param) in self.params.entries.iter() {
            if !param.trainable {
                continue;
            }
            let grad = self
                .bound
                .get(name)
                .and_then(|v| tape.grad(*v))
                .unwrap_or_else(|| Tensor::zeros(param.tensor.shape()));
            out.insert(name.clone(), grad);
        }
        out
    }
}

/// He-normal init for convolution weights `[Cout, Cin, k, k]`.
pub fn he_normal(shape: &[usize], rng: &mut Rng) -> Tensor {
    let fan_in: usize = shape[1..].iter().product();
    let std = fmath::sqrt(2.0 / fan_in as f64);
    Tensor::from_fn(shape, |_| rng.normal() * std)
}

/// Xavier-uniform init for linear weights `[in, out]`.
pub fn xavier_uniform(shape: &[usize], rng: &mut Rng) -> Tensor {
    let (fan_in, fan_out) = (shape[0], shape[1]);
    let a = fmath::sqrt(6.0 / (fan_in + fan_out) as f64);
    Tensor::from_fn(shape, |_| rng.uniform(-a, a))
}

/// N(0, 0.02) init for embeddings and readout tokens.
pub fn embedding_init(shape: &[usize], rng: &mut Rng) -> Tensor {
    Tensor::from_fn(shape, |_| rng.normal() * 0.02)
}

/// Inserts a linear layer (`<prefix>.weight` `[in, out]`, `<prefix>.bias`
/// `[out]`).
pub fn insert_linear(params: &mut ParamSet, prefix: &str, d_in: usize, d_out: usize, rng: &mut Rng) {
    params.insert(
        &alloc::format!("{prefix}.weight"),
        xavier_uniform(&[d_in, d_out], rng),
    );
    params.insert(&alloc::format!("{prefix}.bias"), Tensor::zeros(&[d_out]));
}

/// Inserts a conv layer (`weight` `[Cout, Cin, k, k]`, `bias` `[Cout]`).
pub fn insert_conv(
    params: &mut ParamSet,
    prefix: &str,
    c_in: usize,
    c_out: usize,
    k: usize,
    rng: &mut Rng,
) {
    params.insert(
        &alloc::format!("{prefix}.weight"),
        he_normal(&[c_out, c_in, k, k], rng),
    );
    params.insert(&alloc::format!("{prefix}.bias"), Tensor::zeros(&[c_out]));
}

/// Conv weight without a bias, for convolutions feeding batch norm: the
/// per-channel mean subtraction cancels a bias exactly, leaving it a
/// parameter with identically zero gradient in training mode.
pub fn insert_conv_no_bias(
    params: &mut ParamSet,
    prefix: &str,
    c_in: usize,
    c_out: usize,
    k: usize,
    rng: &mut Rng,
) {
    params.insert(
        &alloc::format!("{prefix}.weight"),
        he_normal(&[c_out, c_in, k, k], rng),
    );
}

/// Inserts batch-norm affine parameters plus running-stat buffers.
pub fn insert_bn(params: &mut ParamSet, prefix: &str, channels: usize) {
    params.insert(&alloc::format!("{prefix}.gamma"), Tensor::full(&[channels], 1.0));
    params.insert(&alloc::format!("{prefix}.beta"), Tensor::zeros(&[channels]));
    params.insert_buffer(
        &alloc::format!("{prefix}.running_mean"),
        Tensor::zeros(&[channels]),
    );
    params.insert_buffer(
        &alloc::format!("{prefix}.running_var"),
        Tensor::full(&[channels], 1.0),
    );
}

/// Collects a `Vec` of (name, tensor) pairs; convenient for tests.
pub fn snapshot(params: &ParamSet) -> Vec<(String, Tensor)> {
    params
        .iter()
        .map(|(n, p)| (n.clone(), p.tensor.clone()))
        .collect()
}
