//! Reverse-mode automatic differentiation over a linear tape.
//!
//! Operations evaluate eagerly and record a node per result. The tape is a
//! DAG in topological (creation) order: every input of a node has a smaller
//! id, so `backward` is a single reverse sweep that visits each node exactly
//! once. Gradients accumulate into per-node buffers and are read back through
//! [`Tape::grad`].

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::fmath;
use crate::tensor::{dims_str, numel, shape_err, Tensor, TensorError};

/// Handle to a tape node.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(pub(crate) usize);

/// Batch-norm mode: batch statistics vs frozen running statistics.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BnMode {
    Train,
    Eval,
}

/// Per-channel running statistics for batch normalisation. Owned by the
/// parameter store, never part of the graph.
#[derive(Clone, Debug, PartialEq)]
pub struct BnStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

impl BnStats {
    pub fn identity(channels: usize) -> Self {
        BnStats {
            mean: vec![0.0; channels],
            var: vec![1.0; channels],
        }
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

fn gelu_scalar(x: f64) -> f64 {
    0.5 * x * (1.0 + fmath::tanh(GELU_C * (x + GELU_A * x * x * x)))
}

fn gelu_grad_scalar(x: f64) -> f64 {
    let u = GELU_C * (x + GELU_A * x * x * x);
    let t = fmath::tanh(u);
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
}

/// Primitive kinds with their backward-rule payloads.
#[derive(Clone, Debug)]
enum Op {
    Leaf,
    MatMul,
    AddBias,
    Conv2d {
        pad: usize,
    },
    BatchNorm {
        // Normalised activations and inverse stddev saved for backward;
        // `train` selects the batch-statistic chain rule.
        xhat: Vec<f64>,
        invstd: Vec<f64>,
        train: bool,
    },
    LayerNorm {
        xhat: Vec<f64>,
        invstd: Vec<f64>,
    },
    Gelu,
    Tanh,
    Abs,
    Softmax {
        axis: usize,
    },
    LogSoftmax {
        axis: usize,
    },
    ElemAdd,
    ElemMul,
    ScalarMul {
        factor: f64,
    },
    Concat {
        axis: usize,
    },
    Slice {
        axis: usize,
        start: usize,
    },
    Mean {
        axis: Option<usize>,
    },
    Sum {
        axis: Option<usize>,
    },
    Lookup {
        indices: Vec<usize>,
    },
    Reshape,
    Transpose2d,
}

struct Node {
    op: Op,
    inputs: Vec<Var>,
    value: Tensor,
    requires_grad: bool,
    grad: Option<Vec<f64>>,
}

/// Gradient tape. One tape per forward/backward pass.
pub struct Tape {
    nodes: Vec<Node>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

/// Splits a shape at `axis` into (outer, lane, inner) extents for lane-wise
/// iteration: element (o, l, i) lives at `(o * lane + l) * inner + i`.
fn lanes(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer: usize = shape[..axis].iter().product();
    let lane = shape[axis];
    let inner: usize = shape[axis + 1..].iter().product();
    (outer, lane, inner)
}

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Inserts a tensor as a graph leaf. Gradient tracking follows the
    /// tensor's `requires_grad` flag.
    pub fn leaf(&mut self, value: Tensor) -> Var {
        let requires_grad = value.requires_grad;
        self.push(Op::Leaf, vec![], value, requires_grad)
    }

    /// Inserts a constant (never receives gradient).
    pub fn constant(&mut self, mut value: Tensor) -> Var {
        value.requires_grad = false;
        self.push(Op::Leaf, vec![], value, false)
    }

    pub fn scalar(&mut self, v: f64) -> Var {
        self.constant(Tensor::scalar(v))
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    /// Gradient of the given node from the last `backward`, if any reached it.
    pub fn grad(&self, v: Var) -> Option<Tensor> {
        let node = &self.nodes[v.0];
        node.grad.as_ref().map(|g| {
            Tensor::new(node.value.shape().to_vec(), g.clone()).expect("grad matches value shape")
        })
    }

    fn push(&mut self, op: Op, inputs: Vec<Var>, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            op,
            inputs,
            value,
            requires_grad,
            grad: None,
        });
        Var(self.nodes.len() - 1)
    }

    fn check_finite(&self, op: &'static str, vars: &[Var]) -> Result<(), TensorError> {
        for v in vars {
            if self.nodes[v.0].value.validate().is_err() {
                return Err(TensorError::NonFiniteInput { op });
            }
        }
        Ok(())
    }

    fn any_grad(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    // ── Primitives ──────────────────────────────────────────────────────

    /// `[m,k] @ [k,n] -> [m,n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.check_finite("matmul", &[a, b])?;
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(shape_err(
                "matmul",
                format!("{} @ {}", dims_str(sa), dims_str(sb)),
            ));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![0.0; m * n];
        {
            let da = self.value(a).data();
            let db = self.value(b).data();
            for i in 0..m {
                for l in 0..k {
                    let ail = da[i * k + l];
                    if ail == 0.0 {
                        continue;
                    }
                    let brow = &db[l * n..(l + 1) * n];
                    let orow = &mut out[i * n..(i + 1) * n];
                    for j in 0..n {
                        orow[j] += ail * brow[j];
                    }
                }
            }
        }
        let rg = self.any_grad(&[a, b]);
        let value = Tensor::new(vec![m, n], out).expect("matmul shape");
        Ok(self.push(Op::MatMul, vec![a, b], value, rg))
    }

    /// Adds a length-`c` bias vector to every row of `[r,c]`.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var, TensorError> {
        self.check_finite("add_bias", &[x, bias])?;
        let (sx, sb) = (self.value(x).shape(), self.value(bias).shape());
        if sx.len() != 2 || sb.len() != 1 || sb[0] != sx[1] {
            return Err(shape_err(
                "add_bias",
                format!("{} + {}", dims_str(sx), dims_str(sb)),
            ));
        }
        let (r, c) = (sx[0], sx[1]);
        let mut out = vec![0.0; r * c];
        {
            let dx = self.value(x).data();
            let db = self.value(bias).data();
            for i in 0..r {
                for j in 0..c {
                    out[i * c + j] = dx[i * c + j] + db[j];
                }
            }
        }
        let rg = self.any_grad(&[x, bias]);
        let value = Tensor::new(vec![r, c], out).expect("add_bias shape");
        Ok(self.push(Op::AddBias, vec![x, bias], value, rg))
    }

    /// 2-D convolution, stride 1, zero same-padding: `[Cin,H,W]` with weights
    /// `[Cout,Cin,k,k]` (k odd) and bias `[Cout]` gives `[Cout,H,W]`.
    pub fn conv2d(&mut self, x: Var, weight: Var, bias: Var) -> Result<Var, TensorError> {
        self.check_finite("conv2d", &[x, weight, bias])?;
        let (sx, sw, sb) = (
            self.value(x).shape().to_vec(),
            self.value(weight).shape().to_vec(),
            self.value(bias).shape().to_vec(),
        );
        let ok = sx.len() == 3
            && sw.len() == 4
            && sb.len() == 1
            && sw[1] == sx[0]
            && sw[2] == sw[3]
            && sw[2] % 2 == 1
            && sb[0] == sw[0];
        if !ok {
            return Err(shape_err(
                "conv2d",
                format!(
                    "input {} weight {} bias {}",
                    dims_str(&sx),
                    dims_str(&sw),
                    dims_str(&sb)
                ),
            ));
        }
        let (cin, h, w) = (sx[0], sx[1], sx[2]);
        let (cout, k) = (sw[0], sw[2]);
        let pad = k / 2;
        let mut out = vec![0.0; cout * h * w];
        {
            let dx = self.value(x).data();
            let dw = self.value(weight).data();
            let db = self.value(bias).data();
            for co in 0..cout {
                let obase = co * h * w;
                for v in out[obase..obase + h * w].iter_mut() {
                    *v = db[co];
                }
                for ci in 0..cin {
                    let ibase = ci * h * w;
                    for ky in 0..k {
                        for kx in 0..k {
                            let wv = dw[((co * cin + ci) * k + ky) * k + kx];
                            if wv == 0.0 {
                                continue;
                            }
                            let oy_lo = pad.saturating_sub(ky);
                            let oy_hi = (h + pad - ky).min(h);
                            let ox_lo = pad.saturating_sub(kx);
                            let ox_hi = (w + pad - kx).min(w);
                            for oy in oy_lo..oy_hi {
                                let iy = oy + ky - pad;
                                let irow = ibase + iy * w;
                                let orow = obase + oy * w;
                                for ox in ox_lo..ox_hi {
                                    out[orow + ox] += wv * dx[irow + ox + kx - pad];
                                }
                            }
                        }
                    }
                }
            }
        }
        let rg = self.any_grad(&[x, weight, bias]);
        let value = Tensor::new(vec![cout, h, w], out).expect("conv2d shape");
        Ok(self.push(Op::Conv2d { pad }, vec![x, weight, bias], value, rg))
    }

    /// Per-channel batch normalisation over `[C,H,W]`. Train mode normalises
    /// by this image's spatial statistics and returns the updated running
    /// stats (momentum-blended, unbiased variance); eval mode normalises by
    /// the stored running stats.
    #[allow(clippy::too_many_arguments)]
    pub fn batch_norm2d(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        stats: &BnStats,
        mode: BnMode,
        eps: f64,
        momentum: f64,
    ) -> Result<(Var, Option<BnStats>), TensorError> {
        self.check_finite("batch_norm2d", &[x, gamma, beta])?;
        let sx = self.value(x).shape().to_vec();
        let c = *sx.first().unwrap_or(&0);
        let ok = sx.len() == 3
            && self.value(gamma).shape() == [c]
            && self.value(beta).shape() == [c]
            && stats.mean.len() == c
            && stats.var.len() == c;
        if !ok {
            return Err(shape_err(
                "batch_norm2d",
                format!(
                    "input {} gamma {} beta {}",
                    dims_str(&sx),
                    dims_str(self.value(gamma).shape()),
                    dims_str(self.value(beta).shape())
                ),
            ));
        }
        let (h, w) = (sx[1], sx[2]);
        let n = h * w;
        let mut xhat = vec![0.0; c * n];
        let mut invstd = vec![0.0; c];
        let mut out = vec![0.0; c * n];
        let mut updated = None;
        {
            let dx = self.value(x).data();
            let dg = self.value(gamma).data();
            let db = self.value(beta).data();
            match mode {
                BnMode::Train => {
                    let mut next = stats.clone();
                    for ch in 0..c {
                        let sl = &dx[ch * n..(ch + 1) * n];
                        let mean = sl.iter().sum::<f64>() / n as f64;
                        let var = sl.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>()
                            / n as f64;
                        let inv = 1.0 / fmath::sqrt(var + eps);
                        invstd[ch] = inv;
                        for (i, &v) in sl.iter().enumerate() {
                            let xh = (v - mean) * inv;
                            xhat[ch * n + i] = xh;
                            out[ch * n + i] = dg[ch] * xh + db[ch];
                        }
                        let unbiased = if n > 1 {
                            var * n as f64 / (n as f64 - 1.0)
                        } else {
                            var
                        };
                        next.mean[ch] = (1.0 - momentum) * next.mean[ch] + momentum * mean;
                        next.var[ch] = (1.0 - momentum) * next.var[ch] + momentum * unbiased;
                    }
                    updated = Some(next);
                }
                BnMode::Eval => {
                    for ch in 0..c {
                        let inv = 1.0 / fmath::sqrt(stats.var[ch] + eps);
                        invstd[ch] = inv;
                        for i in 0..n {
                            let xh = (dx[ch * n + i] - stats.mean[ch]) * inv;
                            xhat[ch * n + i] = xh;
                            out[ch * n + i] = dg[ch] * xh + db[ch];
                        }
                    }
                }
            }
        }
        let rg = self.any_grad(&[x, gamma, beta]);
        let value = Tensor::new(sx, out).expect("batch_norm2d shape");
        let var = self.push(
            Op::BatchNorm {
                xhat,
                invstd,
                train: mode == BnMode::Train,
            },
            vec![x, gamma, beta],
            value,
            rg,
        );
        Ok((var, updated))
    }

    /// Layer normalisation over the last dimension with affine parameters.
    pub fn layer_norm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        eps: f64,
    ) -> Result<Var, TensorError> {
        self.check_finite("layer_norm", &[x, gamma, beta])?;
        let sx = self.value(x).shape().to_vec();
        let last = *sx.last().unwrap_or(&0);
        if sx.is_empty()
            || self.value(gamma).shape() != [last]
            || self.value(beta).shape() != [last]
        {
            return Err(shape_err(
                "layer_norm",
                format!(
                    "input {} gamma {} beta {}",
                    dims_str(&sx),
                    dims_str(self.value(gamma).shape()),
                    dims_str(self.value(beta).shape())
                ),
            ));
        }
        let rows = numel(&sx) / last;
        let mut xhat = vec![0.0; rows * last];
        let mut invstd = vec![0.0; rows];
        let mut out = vec![0.0; rows * last];
        {
            let dx = self.value(x).data();
            let dg = self.value(gamma).data();
            let db = self.value(beta).data();
            for r in 0..rows {
                let sl = &dx[r * last..(r + 1) * last];
                let mean = sl.iter().sum::<f64>() / last as f64;
                let var =
                    sl.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / last as f64;
                let inv = 1.0 / fmath::sqrt(var + eps);
                invstd[r] = inv;
                for (i, &v) in sl.iter().enumerate() {
                    let xh = (v - mean) * inv;
                    xhat[r * last + i] = xh;
                    out[r * last + i] = dg[i] * xh + db[i];
                }
            }
        }
        let rg = self.any_grad(&[x, gamma, beta]);
        let value = Tensor::new(sx, out).expect("layer_norm shape");
        Ok(self.push(
            Op::LayerNorm { xhat, invstd },
            vec![x, gamma, beta],
            value,
            rg,
        ))
    }

    /// GELU with the tanh approximation.
    pub fn gelu(&mut self, x: Var) -> Result<Var, TensorError> {
        self.check_finite("gelu", &[x])?;
        let value = self.value(x).map(gelu_scalar);
        let rg = self.any_grad(&[x]);
        Ok(self.push(Op::Gelu, vec![x], value, rg))
    }

    pub fn tanh(&mut self, x: Var) -> Result<Var, TensorError> {
        self.check_finite("tanh", &[x])?;
        let value = self.value(x).map(fmath::tanh);
        let rg = self.any_grad(&[x]);
        Ok(self.push(Op::Tanh, vec![x], value, rg))
    }

    /// Element-wise absolute value; subgradient 0 at exact zeros.
    pub fn abs(&mut self, x: Var) -> Result<Var, TensorError> {
        self.check_finite("abs", &[x])?;
        let value = self.value(x).map(fmath::abs);
        let rg = self.any_grad(&[x]);
        Ok(self.push(Op::Abs, vec![x], value, rg))
    }

    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var, TensorError> {
        self.softmax_impl(x, axis, false)
    }

    pub fn log_softmax(&mut self, x: Var, axis: usize) -> Result<Var, TensorError> {
        self.softmax_impl(x, axis, true)
    }

    fn softmax_impl(&mut self, x: Var, axis: usize, log: bool) -> Result<Var, TensorError> {
        let opname: &'static str = if log { "log_softmax" } else { "softmax" };
        self.check_finite(opname, &[x])?;
        let sx = self.value(x).shape().to_vec();
        if axis >= sx.len() {
            return Err(shape_err(
                opname,
                format!("axis {axis} out of range for {}", dims_str(&sx)),
            ));
        }
        let (outer, lane, inner) = lanes(&sx, axis);
        let dx = self.value(x).data().to_vec();
        let mut out = vec![0.0; dx.len()];
        for o in 0..outer {
            for i in 0..inner {
                let idx = |l: usize| (o * lane + l) * inner + i;
                let mut maxv = f64::NEG_INFINITY;
                for l in 0..lane {
                    maxv = maxv.max(dx[idx(l)]);
                }
                let mut sum = 0.0;
                for l in 0..lane {
                    sum += fmath::exp(dx[idx(l)] - maxv);
                }
                if log {
                    let lse = maxv + fmath::ln(sum);
                    for l in 0..lane {
                        out[idx(l)] = dx[idx(l)] - lse;
                    }
                } else {
                    for l in 0..lane {
                        out[idx(l)] = fmath::exp(dx[idx(l)] - maxv) / sum;
                    }
                }
            }
        }
        let rg = self.any_grad(&[x]);
        let value = Tensor::new(sx, out).expect("softmax shape");
        let op = if log {
            Op::LogSoftmax { axis }
        } else {
            Op::Softmax { axis }
        };
        Ok(self.push(op, vec![x], value, rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.check_finite("elem_add", &[a, b])?;
        if self.value(a).shape() != self.value(b).shape() {
            return Err(shape_err(
                "elem_add",
                format!(
                    "{} vs {}",
                    dims_str(self.value(a).shape()),
                    dims_str(self.value(b).shape())
                ),
            ));
        }
        let data: Vec<f64> = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x + y)
            .collect();
        let value = Tensor::new(self.value(a).shape().to_vec(), data).expect("elem_add shape");
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(Op::ElemAdd, vec![a, b], value, rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.check_finite("elem_mul", &[a, b])?;
        if self.value(a).shape() != self.value(b).shape() {
            return Err(shape_err(
                "elem_mul",
                format!(
                    "{} vs {}",
                    dims_str(self.value(a).shape()),
                    dims_str(self.value(b).shape())
                ),
            ));
        }
        let data: Vec<f64> = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x * y)
            .collect();
        let value = Tensor::new(self.value(a).shape().to_vec(), data).expect("elem_mul shape");
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(Op::ElemMul, vec![a, b], value, rg))
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Result<Var, TensorError> {
        self.check_finite("scalar_mul", &[x])?;
        if !factor.is_finite() {
            return Err(TensorError::NonFiniteInput { op: "scalar_mul" });
        }
        let value = self.value(x).map(|v| v * factor);
        let rg = self.any_grad(&[x]);
        Ok(self.push(Op::ScalarMul { factor }, vec![x], value, rg))
    }

    /// `a - b`, composed from scalar-mul and add.
    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let nb = self.scale(b, -1.0)?;
        self.add(a, nb)
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var, TensorError> {
        if parts.is_empty() {
            return Err(shape_err("concat", "no inputs".into()));
        }
        self.check_finite("concat", parts)?;
        let first = self.value(parts[0]).shape().to_vec();
        if axis >= first.len() {
            return Err(shape_err(
                "concat",
                format!("axis {axis} out of range for {}", dims_str(&first)),
            ));
        }
        let mut total_lane = 0;
        for p in parts {
            let s = self.value(*p).shape();
            if s.len() != first.len()
                || s.iter()
                    .zip(&first)
                    .enumerate()
                    .any(|(i, (a, b))| i != axis && a != b)
            {
                return Err(shape_err(
                    "concat",
                    format!("{} vs {}", dims_str(s), dims_str(&first)),
                ));
            }
            total_lane += s[axis];
        }
        let mut shape = first.clone();
        shape[axis] = total_lane;
        let (outer, _, inner) = lanes(&shape, axis);
        let mut out = vec![0.0; numel(&shape)];
        let mut offset = 0;
        for p in parts {
            let s = self.value(*p).shape();
            let plane = s[axis];
            let pd = self.value(*p).data();
            for o in 0..outer {
                for l in 0..plane {
                    let src = (o * plane + l) * inner;
                    let dst = (o * total_lane + offset + l) * inner;
                    out[dst..dst + inner].copy_from_slice(&pd[src..src + inner]);
                }
            }
            offset += plane;
        }
        let rg = self.any_grad(parts);
        let value = Tensor::new(shape, out).expect("concat shape");
        Ok(self.push(Op::Concat { axis }, parts.to_vec(), value, rg))
    }

    /// Contiguous sub-range of length `len` starting at `start` along `axis`.
    pub fn slice(
        &mut self,
        x: Var,
        axis: usize,
        start: usize,
        len: usize,
    ) -> Result<Var, TensorError> {
        self.check_finite("slice", &[x])?;
        let sx = self.value(x).shape().to_vec();
        if axis >= sx.len() || start + len > sx[axis] || len == 0 {
            return Err(shape_err(
                "slice",
                format!("[{start}, {start}+{len}) on axis {axis} of {}", dims_str(&sx)),
            ));
        }
        let (outer, lane, inner) = lanes(&sx, axis);
        let mut shape = sx.clone();
        shape[axis] = len;
        let mut out = vec![0.0; numel(&shape)];
        {
            let dx = self.value(x).data();
            for o in 0..outer {
                for l in 0..len {
                    let src = (o * lane + start + l) * inner;
                    let dst = (o * len + l) * inner;
                    out[dst..dst + inner].copy_from_slice(&dx[src..src + inner]);
                }
            }
        }
        let rg = self.any_grad(&[x]);
        let value = Tensor::new(shape, out).expect("slice shape");
        Ok(self.push(Op::Slice { axis, start }, vec![x], value, rg))
    }

    /// Mean over one axis (removed from the shape) or over all elements
    /// (`None`, producing a `[1]` scalar).
    pub fn mean(&mut self, x: Var, axis: Option<usize>) -> Result<Var, TensorError> {
        self.reduce(x, axis, true)
    }

    pub fn sum(&mut self, x: Var, axis: Option<usize>) -> Result<Var, TensorError> {
        self.reduce(x, axis, false)
    }

    fn reduce(&mut self, x: Var, axis: Option<usize>, mean: bool) -> Result<Var, TensorError> {
        let opname: &'static str = if mean { "mean" } else { "sum" };
        self.check_finite(opname, &[x])?;
        let sx = self.value(x).shape().to_vec();
        let (shape, out) = match axis {
            None => {
                let s: f64 = self.value(x).data().iter().sum();
                let v = if mean {
                    s / self.value(x).len() as f64
                } else {
                    s
                };
                (vec![1], vec![v])
            }
            Some(a) => {
                if a >= sx.len() {
                    return Err(shape_err(
                        opname,
                        format!("axis {a} out of range for {}", dims_str(&sx)),
                    ));
                }
                let (outer, lane, inner) = lanes(&sx, a);
                let mut shape: Vec<usize> = sx.clone();
                shape.remove(a);
                if shape.is_empty() {
                    shape.push(1);
                }
                let mut out = vec![0.0; outer * inner];
                let dx = self.value(x).data();
                for o in 0..outer {
                    for l in 0..lane {
                        let base = (o * lane + l) * inner;
                        for i in 0..inner {
                            out[o * inner + i] += dx[base + i];
                        }
                    }
                }
                if mean {
                    for v in out.iter_mut() {
                        *v /= lane as f64;
                    }
                }
                (shape, out)
            }
        };
        let rg = self.any_grad(&[x]);
        let value = Tensor::new(shape, out).expect("reduce shape");
        let op = if mean {
            Op::Mean { axis }
        } else {
            Op::Sum { axis }
        };
        Ok(self.push(op, vec![x], value, rg))
    }

    /// Gathers rows of a rank-2 tensor. Gradient scatter-adds into the source
    /// rows; indices may repeat.
    pub fn gather_rows(&mut self, x: Var, indices: &[usize]) -> Result<Var, TensorError> {
        self.check_finite("gather_rows", &[x])?;
        let sx = self.value(x).shape().to_vec();
        if sx.len() != 2 {
            return Err(shape_err(
                "gather_rows",
                format!("need rank 2, got {}", dims_str(&sx)),
            ));
        }
        let (rows, cols) = (sx[0], sx[1]);
        for &i in indices {
            if i >= rows {
                return Err(TensorError::IndexOutOfRange {
                    index: i,
                    len: rows,
                });
            }
        }
        let dx = self.value(x).data();
        let mut out = vec![0.0; indices.len() * cols];
        for (r, &i) in indices.iter().enumerate() {
            out[r * cols..(r + 1) * cols].copy_from_slice(&dx[i * cols..(i + 1) * cols]);
        }
        let rg = self.any_grad(&[x]);
        let value = Tensor::new(vec![indices.len(), cols], out).expect("gather shape");
        Ok(self.push(
            Op::Lookup {
                indices: indices.to_vec(),
            },
            vec![x],
            value,
            rg,
        ))
    }

    /// Embedding-dictionary lookup: same gather as [`Tape::gather_rows`], the
    /// table being a learnable `[entries, width]` tensor.
    pub fn embedding_lookup(&mut self, table: Var, ids: &[usize]) -> Result<Var, TensorError> {
        self.gather_rows(table, ids)
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var, TensorError> {
        self.check_finite("reshape", &[x])?;
        if numel(shape) != self.value(x).len() {
            return Err(shape_err(
                "reshape",
                format!(
                    "{} -> {} changes element count",
                    dims_str(self.value(x).shape()),
                    dims_str(shape)
                ),
            ));
        }
        let value =
            Tensor::new(shape.to_vec(), self.value(x).data().to_vec()).expect("reshape shape");
        let rg = self.any_grad(&[x]);
        Ok(self.push(Op::Reshape, vec![x], value, rg))
    }

    pub fn transpose2d(&mut self, x: Var) -> Result<Var, TensorError> {
        self.check_finite("transpose2d", &[x])?;
        let sx = self.value(x).shape().to_vec();
        if sx.len() != 2 {
            return Err(shape_err(
                "transpose2d",
                format!("need rank 2, got {}", dims_str(&sx)),
            ));
        }
        let (r, c) = (sx[0], sx[1]);
        let dx = self.value(x).data();
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = dx[i * c + j];
            }
        }
        let rg = self.any_grad(&[x]);
        let value = Tensor::new(vec![c, r], out).expect("transpose shape");
        Ok(self.push(Op::Transpose2d, vec![x], value, rg))
    }

    /// Replicates a `[1,c]` row to `[n,c]` via multiplication by a constant
    /// ones column, so the backward pass accumulates the row gradient n ways.
    pub fn broadcast_rows(&mut self, row: Var, n: usize) -> Result<Var, TensorError> {
        let s = self.value(row).shape();
        if s.len() != 2 || s[0] != 1 {
            return Err(shape_err(
                "broadcast_rows",
                format!("need [1,c], got {}", dims_str(s)),
            ));
        }
        let ones = self.constant(Tensor::full(&[n, 1], 1.0));
        self.matmul(ones, row)
    }

    /// Broadcasts a `[k,1]` column across `c` columns.
    pub fn broadcast_cols(&mut self, col: Var, c: usize) -> Result<Var, TensorError> {
        let s = self.value(col).shape();
        if s.len() != 2 || s[1] != 1 {
            return Err(shape_err(
                "broadcast_cols",
                format!("need [k,1], got {}", dims_str(s)),
            ));
        }
        let ones = self.constant(Tensor::full(&[1, c], 1.0));
        self.matmul(col, ones)
    }

    // ── Backward ────────────────────────────────────────────────────────

    /// Reverse sweep from a scalar loss. Fills gradient buffers for every
    /// node on a path from a `requires_grad` leaf to the loss.
    pub fn backward(&mut self, loss: Var) -> Result<(), TensorError> {
        if self.value(loss).len() != 1 {
            return Err(TensorError::NonScalarLoss);
        }
        for node in self.nodes.iter_mut() {
            node.grad = None;
        }
        self.nodes[loss.0].grad = Some(vec![1.0]);
        for id in (0..=loss.0).rev() {
            if !self.nodes[id].requires_grad || self.nodes[id].grad.is_none() {
                continue;
            }
            let grad = self.nodes[id].grad.take().expect("grad present");
            self.step_backward(id, &grad);
            self.nodes[id].grad = Some(grad);
        }
        Ok(())
    }

    fn accum(&mut self, v: Var, contrib: Vec<f64>) {
        let node = &mut self.nodes[v.0];
        if !node.requires_grad {
            return;
        }
        match node.grad.as_mut() {
            Some(g) => {
                for (a, b) in g.iter_mut().zip(contrib) {
                    *a += b;
                }
            }
            None => node.grad = Some(contrib),
        }
    }

    fn needs_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn step_backward(&mut self, id: usize, dy: &[f64]) {
        let inputs = self.nodes[id].inputs.clone();
        match &self.nodes[id].op {
            Op::Leaf => {}
            Op::MatMul => {
                let (a, b) = (inputs[0], inputs[1]);
                let sa = self.value(a).shape().to_vec();
                let sb = self.value(b).shape().to_vec();
                let (m, k, n) = (sa[0], sa[1], sb[1]);
                if self.needs_grad(a) {
                    let db = self.value(b).data();
                    let mut da = vec![0.0; m * k];
                    for i in 0..m {
                        for l in 0..k {
                            let mut acc = 0.0;
                            let dyrow = &dy[i * n..(i + 1) * n];
                            let brow = &db[l * n..(l + 1) * n];
                            for j in 0..n {
                                acc += dyrow[j] * brow[j];
                            }
                            da[i * k + l] = acc;
                        }
                    }
                    self.accum(a, da);
                }
                if self.needs_grad(b) {
                    let da = self.value(a).data();
                    let mut dbg = vec![0.0; k * n];
                    for i in 0..m {
                        for l in 0..k {
                            let ail = da[i * k + l];
                            if ail == 0.0 {
                                continue;
                            }
                            let dyrow = &dy[i * n..(i + 1) * n];
                            let brow = &mut dbg[l * n..(l + 1) * n];
                            for j in 0..n {
                                brow[j] += ail * dyrow[j];
                            }
                        }
                    }
                    self.accum(b, dbg);
                }
            }
            Op::AddBias => {
                let (x, bias) = (inputs[0], inputs[1]);
                let s = self.value(x).shape().to_vec();
                let (r, c) = (s[0], s[1]);
                if self.needs_grad(x) {
                    self.accum(x, dy.to_vec());
                }
                if self.needs_grad(bias) {
                    let mut db = vec![0.0; c];
                    for i in 0..r {
                        for j in 0..c {
                            db[j] += dy[i * c + j];
                        }
                    }
                    self.accum(bias, db);
                }
            }
            Op::Conv2d { pad } => {
                let pad = *pad;
                let (x, weight, bias) = (inputs[0], inputs[1], inputs[2]);
                let sx = self.value(x).shape().to_vec();
                let sw = self.value(weight).shape().to_vec();
                let (cin, h, w) = (sx[0], sx[1], sx[2]);
                let (cout, k) = (sw[0], sw[2]);
                if self.needs_grad(bias) {
                    let mut db = vec![0.0; cout];
                    for co in 0..cout {
                        db[co] = dy[co * h * w..(co + 1) * h * w].iter().sum();
                    }
                    self.accum(bias, db);
                }
                if self.needs_grad(weight) {
                    let dx = self.value(x).data();
                    let mut dw = vec![0.0; cout * cin * k * k];
                    for co in 0..cout {
                        let obase = co * h * w;
                        for ci in 0..cin {
                            let ibase = ci * h * w;
                            for ky in 0..k {
                                for kx in 0..k {
                                    let oy_lo = pad.saturating_sub(ky);
                                    let oy_hi = (h + pad - ky).min(h);
                                    let ox_lo = pad.saturating_sub(kx);
                                    let ox_hi = (w + pad - kx).min(w);
                                    let mut acc = 0.0;
                                    for oy in oy_lo..oy_hi {
                                        let iy = oy + ky - pad;
                                        for ox in ox_lo..ox_hi {
                                            acc += dy[obase + oy * w + ox]
                                                * dx[ibase + iy * w + ox + kx - pad];
                                        }
                                    }
                                    dw[((co * cin + ci) * k + ky) * k + kx] = acc;
                                }
                            }
                        }
                    }
                    self.accum(weight, dw);
                }
                if self.needs_grad(x) {
                    let dwv = self.value(weight).data().to_vec();
                    let mut dxg = vec![0.0; cin * h * w];
                    for co in 0..cout {
                        let obase = co * h * w;
                        for ci in 0..cin {
                            let ibase = ci * h * w;
                            for ky in 0..k {
                                for kx in 0..k {
                                    let wv = dwv[((co * cin + ci) * k + ky) * k + kx];
                                    if wv == 0.0 {
                                        continue;
                                    }
                                    let oy_lo = pad.saturating_sub(ky);
                                    let oy_hi = (h + pad - ky).min(h);
                                    let ox_lo = pad.saturating_sub(kx);
                                    let ox_hi = (w + pad - kx).min(w);
                                    for oy in oy_lo..oy_hi {
                                        let iy = oy + ky - pad;
                                        for ox in ox_lo..ox_hi {
                                            dxg[ibase + iy * w + ox + kx - pad] +=
                                                wv * dy[obase + oy * w + ox];
                                        }
                                    }
                                }
                            }
                        }
                    }
                    self.accum(x, dxg);
                }
            }
            Op::BatchNorm {
                xhat,
                invstd,
                train,
            } => {
                let xhat = xhat.clone();
                let invstd = invstd.clone();
                let train = *train;
                let (x, gamma, beta) = (inputs[0], inputs[1], inputs[2]);
                let s = self.value(x).shape().to_vec();
                let (c, n) = (s[0], s[1] * s[2]);
                let gvals = self.value(gamma).data().to_vec();
                if self.needs_grad(beta) {
                    let mut db = vec![0.0; c];
                    for ch in 0..c {
                        db[ch] = dy[ch * n..(ch + 1) * n].iter().sum();
                    }
                    self.accum(beta, db);
                }
                if self.needs_grad(gamma) {
                    let mut dg = vec![0.0; c];
                    for ch in 0..c {
                        dg[ch] = (0..n).map(|i| dy[ch * n + i] * xhat[ch * n + i]).sum();
                    }
                    self.accum(gamma, dg);
                }
                if self.needs_grad(x) {
                    let mut dx = vec![0.0; c * n];
                    for ch in 0..c {
                        if train {
                            let mut sum_dxhat = 0.0;
                            let mut sum_dxhat_xhat = 0.0;
                            for i in 0..n {
                                let dxh = dy[ch * n + i] * gvals[ch];
                                sum_dxhat += dxh;
                                sum_dxhat_xhat += dxh * xhat[ch * n + i];
                            }
                            let nf = n as f64;
                            for i in 0..n {
                                let dxh = dy[ch * n + i] * gvals[ch];
                                dx[ch * n + i] = invstd[ch] / nf
                                    * (nf * dxh - sum_dxhat - xhat[ch * n + i] * sum_dxhat_xhat);
                            }
                        } else {
                            for i in 0..n {
                                dx[ch * n + i] = dy[ch * n + i] * gvals[ch] * invstd[ch];
                            }
                        }
                    }
                    self.accum(x, dx);
                }
            }
            Op::LayerNorm { xhat, invstd } => {
                let xhat = xhat.clone();
                let invstd = invstd.clone();
                let (x, gamma, beta) = (inputs[0], inputs[1], inputs[2]);
                let s = self.value(x).shape().to_vec();
                let last = *s.last().unwrap();
                let rows = numel(&s) / last;
                let gvals = self.value(gamma).data().to_vec();
                if self.needs_grad(beta) {
                    let mut db = vec![0.0; last];
                    for r in 0..rows {
                        for i in 0..last {
                            db[i] += dy[r * last + i];
                        }
                    }
                    self.accum(beta, db);
                }
                if self.needs_grad(gamma) {
                    let mut dg = vec![0.0; last];
                    for r in 0..rows {
                        for i in 0..last {
                            dg[i] += dy[r * last + i] * xhat[r * last + i];
                        }
                    }
                    self.accum(gamma, dg);
                }
                if self.needs_grad(x) {
                    let mut dx = vec![0.0; rows * last];
                    let nf = last as f64;
                    for r in 0..rows {
                        let mut sum_dxhat = 0.0;
                        let mut sum_dxhat_xhat = 0.0;
                        for i in 0..last {
                            let dxh = dy[r * last + i] * gvals[i];
                            sum_dxhat += dxh;
                            sum_dxhat_xhat += dxh * xhat[r * last + i];
                        }
                        for i in 0..last {
                            let dxh = dy[r * last + i] * gvals[i];
                            dx[r * last + i] = invstd[r] / nf
                                * (nf * dxh - sum_dxhat - xhat[r * last + i] * sum_dxhat_xhat);
                        }
                    }
                    self.accum(x, dx);
                }
            }
            Op::Gelu => {
                let x = inputs[0];
                if self.needs_grad(x) {
                    let contrib: Vec<f64> = self
                        .value(x)
                        .data()
                        .iter()
                        .zip(dy)
                        .map(|(&v, &g)| g * gelu_grad_scalar(v))
                        .collect();
                    self.accum(x, contrib);
                }
            }
            Op::Tanh => {
                let x = inputs[0];
                if self.needs_grad(x) {
                    let contrib: Vec<f64> = self.nodes[id]
                        .value
                        .data()
                        .iter()
                        .zip(dy)
                        .map(|(&y, &g)| g * (1.0 - y * y))
                        .collect();
                    self.accum(x, contrib);
                }
            }
            Op::Abs => {
                let x = inputs[0];
                if self.needs_grad(x) {
                    let contrib: Vec<f64> = self
                        .value(x)
                        .data()
                        .iter()
                        .zip(dy)
                        .map(|(&v, &g)| {
                            if v > 0.0 {
                                g
                            } else if v < 0.0 {
                                -g
                            } else {
                                0.0
                            }
                        })
                        .collect();
                    self.accum(x, contrib);
                }
            }
            Op::Softmax { axis } => {
                let axis = *axis;
                let x = inputs[0];
                if self.needs_grad(x) {
                    let y = self.nodes[id].value.data().to_vec();
                    let s = self.nodes[id].value.shape().to_vec();
                    let (outer, lane, inner) = lanes(&s, axis);
                    let mut dx = vec![0.0; y.len()];
                    for o in 0..outer {
                        for i in 0..inner {
                            let idx = |l: usize| (o * lane + l) * inner + i;
                            let mut dot = 0.0;
                            for l in 0..lane {
                                dot += dy[idx(l)] * y[idx(l)];
                            }
                            for l in 0..lane {
                                dx[idx(l)] = y[idx(l)] * (dy[idx(l)] - dot);
                            }
                        }
                    }
                    self.accum(x, dx);
                }
            }
            Op::LogSoftmax { axis } => {
                let axis = *axis;
                let x = inputs[0];
                if self.needs_grad(x) {
                    let y = self.nodes[id].value.data().to_vec();
                    let s = self.nodes[id].value.shape().to_vec();
                    let (outer, lane, inner) = lanes(&s, axis);
                    let mut dx = vec![0.0; y.len()];
                    for o in 0..outer {
                        for i in 0..inner {
                            let idx = |l: usize| (o * lane + l) * inner + i;
                            let mut sum_dy = 0.0;
                            for l in 0..lane {
                                sum_dy += dy[idx(l)];
                            }
                            for l in 0..lane {
                                dx[idx(l)] = dy[idx(l)] - fmath::exp(y[idx(l)]) * sum_dy;
                            }
                        }
                    }
                    self.accum(x, dx);
                }
            }
            Op::ElemAdd => {
                let (a, b) = (inputs[0], inputs[1]);
                if self.needs_grad(a) {
                    self.accum(a, dy.to_vec());
                }
                if self.needs_grad(b) {
                    self.accum(b, dy.to_vec());
                }
            }
            Op::ElemMul => {
                let (a, b) = (inputs[0], inputs[1]);
                if self.needs_grad(a) {
                    let contrib: Vec<f64> = self
                        .value(b)
                        .data()
                        .iter()
                        .zip(dy)
                        .map(|(&v, &g)| g * v)
                        .collect();
                    self.accum(a, contrib);
                }
                if self.needs_grad(b) {
                    let contrib: Vec<f64> = self
                        .value(a)
                        .data()
                        .iter()
                        .zip(dy)
                        .map(|(&v, &g)| g * v)
                        .collect();
                    self.accum(b, contrib);
                }
            }
            Op::ScalarMul { factor } => {
                let factor = *factor;
                let x = inputs[0];
                if self.needs_grad(x) {
                    self.accum(x, dy.iter().map(|g| g * factor).collect());
                }
            }
            Op::Concat { axis } => {
                let axis = *axis;
                let s = self.nodes[id].value.shape().to_vec();
                let (outer, total_lane, inner) = lanes(&s, axis);
                let mut offset = 0;
                for p in inputs {
                    let plane = self.value(p).shape()[axis];
                    if self.needs_grad(p) {
                        let mut dp = vec![0.0; self.value(p).len()];
                        for o in 0..outer {
                            for l in 0..plane {
                                let src = (o * total_lane + offset + l) * inner;
                                let dst = (o * plane + l) * inner;
                                dp[dst..dst + inner].copy_from_slice(&dy[src..src + inner]);
                            }
                        }
                        self.accum(p, dp);
                    }
                    offset += plane;
                }
            }
            Op::Slice { axis, start } => {
                let (axis, start) = (*axis, *start);
                let x = inputs[0];
                if self.needs_grad(x) {
                    let sx = self.value(x).shape().to_vec();
                    let (outer, lane, inner) = lanes(&sx, axis);
                    let len = self.nodes[id].value.shape()[axis];
                    let mut dx = vec![0.0; self.value(x).len()];
                    for o in 0..outer {
                        for l in 0..len {
                            let dst = (o * lane + start + l) * inner;
                            let src = (o * len + l) * inner;
                            dx[dst..dst + inner].copy_from_slice(&dy[src..src + inner]);
                        }
                    }
                    self.accum(x, dx);
                }
            }
            Op::Mean { axis } | Op::Sum { axis } => {
                let mean = matches!(self.nodes[id].op, Op::Mean { .. });
                let axis = *axis;
                let x = inputs[0];
                if self.needs_grad(x) {
                    let sx = self.value(x).shape().to_vec();
                    let n = numel(&sx);
                    let mut dx = vec![0.0; n];
                    match axis {
                        None => {
                            let g = if mean { dy[0] / n as f64 } else { dy[0] };
                            for v in dx.iter_mut() {
                                *v = g;
                            }
                        }
                        Some(a) => {
                            let (outer, lane, inner) = lanes(&sx, a);
                            let scale = if mean { 1.0 / lane as f64 } else { 1.0 };
                            for o in 0..outer {
                                for l in 0..lane {
                                    let base = (o * lane + l) * inner;
                                    for i in 0..inner {
                                        dx[base + i] = dy[o * inner + i] * scale;
                                    }
                                }
                            }
                        }
                    }
                    self.accum(x, dx);
                }
            }
            Op::Lookup { indices } => {
                let indices = indices.clone();
                let x = inputs[0];
                if self.needs_grad(x) {
                    let cols = self.value(x).shape()[1];
                    let mut dx = vec![0.0; self.value(x).len()];
                    for (r, &i) in indices.iter().enumerate() {
                        for j in 0..cols {
                            dx[i * cols + j] += dy[r * cols + j];
                        }
                    }
                    self.accum(x, dx);
                }
            }
            Op::Reshape => {
                let x = inputs[0];
                if self.needs_grad(x) {
                    self.accum(x, dy.to_vec());
                }
            }
            Op::Transpose2d => {
                let x = inputs[0];
                if self.needs_grad(x) {
                    let sx = self.value(x).shape().to_vec();
                    let (r, c) = (sx[0], sx[1]);
                    let mut dx = vec![0.0; r * c];
                    for i in 0..r {
                        for j in 0..c {
                            dx[i * c + j] = dy[j * r + i];
                        }
                    }
                    self.accum(x, dx);
                }
            }
        }
    }
}
