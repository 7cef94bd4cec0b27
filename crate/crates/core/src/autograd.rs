//! Reverse-mode automatic differentiation over [`Tensor`] values.
//!
//! A [`Graph`] is an append-only arena. Every operation pushes one node holding
//! its forward value and an [`Op`] record naming its inputs plus whatever it
//! saved for the backward pass (argmax rows, dropout masks, normalized
//! activations). Node creation order is a topological order, so
//! [`Graph::backward`] is a single reverse sweep.
//!
//! Graph ops use the `[.., K, C]` convention: the second-to-last axis indexes
//! skeleton nodes and the last axis indexes channels. Leading axes (usually the
//! batch) are flattened.

use std::collections::BTreeMap;

use rand::Rng;

use crate::error::{Error, Result};
use crate::tensor::{dot, gemm_nn, gemm_nt, gemm_tn, node_layout, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Train,
    Infer,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Elementwise {
    Relu,
    Sigmoid,
    Add,
    Multiply,
    Scale(f64),
}

/// Per-channel running statistics of a batch-norm layer.
#[derive(Clone, Debug, PartialEq)]
pub struct RunningStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

impl RunningStats {
    pub fn identity(channels: usize) -> Self {
        Self {
            mean: vec![0.0; channels],
            var: vec![1.0; channels],
        }
    }
}

pub const BN_MOMENTUM: f64 = 0.1;
pub const BN_EPS: f64 = 1e-5;

#[derive(Debug)]
enum Op {
    MatMul(Var, Var),
    Transpose(Var),
    Reshape(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Relu(Var),
    Sigmoid(Var),
    GroupMax {
        input: Var,
        /// Fine row chosen for every output entry, laid out like the output.
        argmax: Vec<u32>,
    },
    DuplicateExpand {
        input: Var,
        pairs: Vec<(usize, usize)>,
    },
    BatchNorm {
        input: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
        batch_stats: bool,
    },
    Dropout {
        input: Var,
        mask: Vec<f64>,
    },
    Concat(Vec<Var>),
    MeanNodes(Var),
    ExpandNodes(Var),
    NodeMix {
        adj: Var,
        input: Var,
    },
    NodeMatMul {
        input: Var,
        weights: Var,
    },
    MaskedSoftmax {
        logits: Var,
        mask: Vec<bool>,
    },
    Sum(Var),
    Mean(Var),
}

struct Node {
    value: Tensor,
    op: Option<Op>,
    requires_grad: bool,
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Gradients of a scalar root with respect to every leaf that requires them.
#[derive(Debug, Default)]
pub struct GradientMap {
    grads: BTreeMap<Var, Tensor>,
}

impl GradientMap {
    pub fn get(&self, leaf: Var) -> Option<&Tensor> {
        self.grads.get(&leaf)
    }

    /// Gradient for `leaf`, or zeros shaped like it if the root never reached it.
    pub fn get_or_zeros(&self, graph: &Graph, leaf: Var) -> Tensor {
        self.grads
            .get(&leaf)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(graph.value(leaf).shape()))
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (Var, &Tensor)> {
        self.grads.iter().map(|(v, t)| (*v, t))
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: None,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn param(&mut self, value: Tensor) -> Var {
        self.leaf(value, true)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn is_leaf(&self, v: Var) -> bool {
        self.nodes[v.0].op.is_none()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor, op: Op, inputs: &[Var]) -> Var {
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            op: Some(op),
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn data(&self, v: Var) -> &[f64] {
        self.nodes[v.0].value.data()
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        let (m, k, k2, n) = match (sa, sb) {
            ([m, k], [k2, n]) => (*m, *k, *k2, *n),
            _ => {
                return Err(Error::shape(
                    "matmul",
                    format!("expected 2-d operands, got {sa:?} and {sb:?}"),
                ))
            }
        };
        if k != k2 {
            return Err(Error::shape(
                "matmul",
                format!("inner dimensions differ: {sa:?} x {sb:?}"),
            ));
        }
        let mut out = vec![0.0; m * n];
        gemm_nn(self.data(a), self.data(b), &mut out, m, k, n);
        let value = Tensor::new(vec![m, n], out)?;
        Ok(self.push(value, Op::MatMul(a, b), &[a, b]))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let (m, n) = match self.shape(a) {
            [m, n] => (*m, *n),
            s => {
                return Err(Error::shape(
                    "transpose",
                    format!("expected 2-d, got {s:?}"),
                ))
            }
        };
        let src = self.data(a);
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = src[i * n + j];
            }
        }
        let value = Tensor::new(vec![n, m], out)?;
        Ok(self.push(value, Op::Transpose(a), &[a]))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(a).clone().reshaped(shape)?;
        Ok(self.push(value, Op::Reshape(a), &[a]))
    }

    /// Dispatches the pointwise kinds by name.
    pub fn elementwise(&mut self, kind: Elementwise, inputs: &[Var]) -> Result<Var> {
        let arity = match kind {
            Elementwise::Add | Elementwise::Multiply => 2,
            _ => 1,
        };
        if inputs.len() != arity {
            return Err(Error::Contract(format!(
                "{kind:?} takes {arity} inputs, got {}",
                inputs.len()
            )));
        }
        match kind {
            Elementwise::Relu => Ok(self.relu(inputs[0])),
            Elementwise::Sigmoid => Ok(self.sigmoid(inputs[0])),
            Elementwise::Add => self.add(inputs[0], inputs[1]),
            Elementwise::Multiply => self.mul(inputs[0], inputs[1]),
            Elementwise::Scale(s) => Ok(self.scale(inputs[0], s)),
        }
    }

    fn broadcast_kind(&self, op: &'static str, a: Var, b: Var) -> Result<bool> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa == sb {
            Ok(false)
        } else if sb.len() == 1 && sa.last() == sb.last() {
            Ok(true)
        } else {
            Err(Error::shape(
                op,
                format!("cannot combine {sa:?} with {sb:?}"),
            ))
        }
    }

    /// `a + b`, where `b` may also be a per-channel vector matching `a`'s last axis.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let bcast = self.broadcast_kind("add", a, b)?;
        let (xa, xb) = (self.data(a), self.data(b));
        let out: Vec<f64> = if bcast {
            let c = xb.len();
            xa.iter().enumerate().map(|(i, v)| v + xb[i % c]).collect()
        } else {
            xa.iter().zip(xb).map(|(x, y)| x + y).collect()
        };
        let value = Tensor::new(self.shape(a).to_vec(), out)?;
        Ok(self.push(value, Op::Add(a, b), &[a, b]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape(
                "sub",
                format!("{:?} vs {:?}", self.shape(a), self.shape(b)),
            ));
        }
        let out = self
            .data(a)
            .iter()
            .zip(self.data(b))
            .map(|(x, y)| x - y)
            .collect();
        let value = Tensor::new(self.shape(a).to_vec(), out)?;
        Ok(self.push(value, Op::Sub(a, b), &[a, b]))
    }

    /// `a * b` pointwise, where `b` may also be a per-channel vector.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let bcast = self.broadcast_kind("multiply", a, b)?;
        let (xa, xb) = (self.data(a), self.data(b));
        let out: Vec<f64> = if bcast {
            let c = xb.len();
            xa.iter().enumerate().map(|(i, v)| v * xb[i % c]).collect()
        } else {
            xa.iter().zip(xb).map(|(x, y)| x * y).collect()
        };
        let value = Tensor::new(self.shape(a).to_vec(), out)?;
        Ok(self.push(value, Op::Mul(a, b), &[a, b]))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let out = self.data(a).iter().map(|v| v * s).collect();
        let value = Tensor::new(self.shape(a).to_vec(), out).expect("same shape");
        self.push(value, Op::Scale(a, s), &[a])
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let out = self.data(a).iter().map(|&v| v.max(0.0)).collect();
        let value = Tensor::new(self.shape(a).to_vec(), out).expect("same shape");
        self.push(value, Op::Relu(a), &[a])
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let out = self.data(a).iter().map(|&v| sigmoid(v)).collect();
        let value = Tensor::new(self.shape(a).to_vec(), out).expect("same shape");
        self.push(value, Op::Sigmoid(a), &[a])
    }

    /// Pairwise max pooling over node groups: `[.., K, C] -> [.., K/2, C]`.
    pub fn group_max(&mut self, x: Var, pairs: &[(usize, usize)]) -> Result<Var> {
        let (lead, k, c) = node_layout(self.shape(x), "group_max")?;
        validate_pairs(pairs, k)?;
        let kc = pairs.len();
        let src = self.data(x);
        let mut out = vec![0.0; lead * kc * c];
        let mut argmax = vec![0u32; lead * kc * c];
        for l in 0..lead {
            for (g, &(a, b)) in pairs.iter().enumerate() {
                let (lo, hi) = if a < b { (a, b) } else { (b, a) };
                let rlo = &src[(l * k + lo) * c..(l * k + lo + 1) * c];
                let rhi = &src[(l * k + hi) * c..(l * k + hi + 1) * c];
                let base = (l * kc + g) * c;
                for ch in 0..c {
                    // ties go to the lower node index
                    let (v, idx) = if rhi[ch] > rlo[ch] {
                        (rhi[ch], hi)
                    } else {
                        (rlo[ch], lo)
                    };
                    out[base + ch] = v;
                    argmax[base + ch] = idx as u32;
                }
            }
        }
        let mut shape = self.shape(x).to_vec();
        let n = shape.len();
        shape[n - 2] = kc;
        let value = Tensor::new(shape, out)?;
        Ok(self.push(value, Op::GroupMax { input: x, argmax }, &[x]))
    }

    /// Copies every coarse node row onto both fine members of its pair:
    /// `[.., K/2, C] -> [.., K, C]`.
    pub fn duplicate_expand(&mut self, y: Var, pairs: &[(usize, usize)]) -> Result<Var> {
        let (lead, kc, c) = node_layout(self.shape(y), "duplicate_expand")?;
        if kc != pairs.len() {
            return Err(Error::Validation(format!(
                "duplicate_expand: input has {kc} coarse nodes but group map has {} pairs",
                pairs.len()
            )));
        }
        let k = 2 * kc;
        validate_pairs(pairs, k)?;
        let src = self.data(y);
        let mut out = vec![0.0; lead * k * c];
        for l in 0..lead {
            for (g, &(a, b)) in pairs.iter().enumerate() {
                let row = &src[(l * kc + g) * c..(l * kc + g + 1) * c];
                out[(l * k + a) * c..(l * k + a + 1) * c].copy_from_slice(row);
                out[(l * k + b) * c..(l * k + b + 1) * c].copy_from_slice(row);
            }
        }
        let mut shape = self.shape(y).to_vec();
        let n = shape.len();
        shape[n - 2] = k;
        let value = Tensor::new(shape, out)?;
        Ok(self.push(
            value,
            Op::DuplicateExpand {
                input: y,
                pairs: pairs.to_vec(),
            },
            &[y],
        ))
    }

    /// Batch normalization over every axis but the last.
    ///
    /// In train mode the batch statistics normalize the input and the updated
    /// running statistics are returned alongside the output; infer mode uses
    /// `running` as is.
    pub fn batch_norm(
        &mut self,
        x: Var,
        gain: Var,
        bias: Var,
        running: &RunningStats,
        mode: Mode,
    ) -> Result<(Var, Option<RunningStats>)> {
        let shape = self.shape(x).to_vec();
        let c = *shape
            .last()
            .ok_or_else(|| Error::shape("batch_norm", "scalar input"))?;
        if self.shape(gain) != [c] || self.shape(bias) != [c] {
            return Err(Error::shape(
                "batch_norm",
                format!(
                    "input {shape:?} with gain {:?} and bias {:?}",
                    self.shape(gain),
                    self.shape(bias)
                ),
            ));
        }
        if running.mean.len() != c || running.var.len() != c {
            return Err(Error::shape(
                "batch_norm",
                format!(
                    "running stats sized {} for {c} channels",
                    running.mean.len()
                ),
            ));
        }
        let src = self.data(x);
        let rows = src.len() / c;
        let (mean, var, update) = match mode {
            Mode::Train => {
                if rows < 2 {
                    return Err(Error::InsufficientStatistics(rows));
                }
                let mut mean = vec![0.0; c];
                for row in src.chunks_exact(c) {
                    for (m, v) in mean.iter_mut().zip(row) {
                        *m += v;
                    }
                }
                mean.iter_mut().for_each(|m| *m /= rows as f64);
                let mut var = vec![0.0; c];
                for row in src.chunks_exact(c) {
                    for ((s, v), m) in var.iter_mut().zip(row).zip(&mean) {
                        *s += (v - m) * (v - m);
                    }
                }
                var.iter_mut().for_each(|s| *s /= rows as f64);
                let unbias = rows as f64 / (rows as f64 - 1.0);
                let updated = RunningStats {
                    mean: running
                        .mean
                        .iter()
                        .zip(&mean)
                        .map(|(r, m)| (1.0 - BN_MOMENTUM) * r + BN_MOMENTUM * m)
                        .collect(),
                    var: running
                        .var
                        .iter()
                        .zip(&var)
                        .map(|(r, v)| (1.0 - BN_MOMENTUM) * r + BN_MOMENTUM * v * unbias)
                        .collect(),
                };
                (mean, var, Some(updated))
            }
            Mode::Infer => (running.mean.clone(), running.var.clone(), None),
        };
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + BN_EPS).sqrt()).collect();
        let (g, b) = (self.data(gain), self.data(bias));
        let mut xhat = vec![0.0; src.len()];
        let mut out = vec![0.0; src.len()];
        for (r, row) in src.chunks_exact(c).enumerate() {
            for ch in 0..c {
                let h = (row[ch] - mean[ch]) * inv_std[ch];
                xhat[r * c + ch] = h;
                out[r * c + ch] = h * g[ch] + b[ch];
            }
        }
        let value = Tensor::new(shape, out)?;
        let v = self.push(
            value,
            Op::BatchNorm {
                input: x,
                gain,
                bias,
                xhat,
                inv_std,
                batch_stats: mode == Mode::Train,
            },
            &[x, gain, bias],
        );
        Ok((v, update))
    }

    /// Inverted dropout: in train mode each entry is zeroed with probability
    /// `p` and survivors are scaled by `1 / (1 - p)`. Identity in infer mode.
    pub fn dropout<R: Rng + ?Sized>(
        &mut self,
        x: Var,
        p: f64,
        mode: Mode,
        rng: &mut R,
    ) -> Result<Var> {
        if !(0.0..1.0).contains(&p) {
            return Err(Error::Validation(format!(
                "dropout probability must be in [0, 1), got {p}"
            )));
        }
        let n = self.value(x).len();
        let mask: Vec<f64> = if mode == Mode::Infer || p == 0.0 {
            vec![1.0; n]
        } else {
            let keep = 1.0 / (1.0 - p);
            (0..n)
                .map(|_| if rng.gen::<f64>() < p { 0.0 } else { keep })
                .collect()
        };
        let out = self.data(x).iter().zip(&mask).map(|(v, m)| v * m).collect();
        let value = Tensor::new(self.shape(x).to_vec(), out)?;
        Ok(self.push(value, Op::Dropout { input: x, mask }, &[x]))
    }

    /// Concatenates along the channel (last) axis, in argument order.
    pub fn concat_channels(&mut self, inputs: &[Var]) -> Result<Var> {
        let first = *inputs
            .first()
            .ok_or_else(|| Error::Contract("concat_channels of nothing".into()))?;
        let lead_shape = {
            let s = self.shape(first);
            s[..s.len() - 1].to_vec()
        };
        let mut widths = Vec::with_capacity(inputs.len());
        for &v in inputs {
            let s = self.shape(v);
            if s.len() != lead_shape.len() + 1 || s[..s.len() - 1] != lead_shape[..] {
                return Err(Error::shape(
                    "concat_channels",
                    format!("{:?} does not match leading axes {lead_shape:?}", s),
                ));
            }
            widths.push(*s.last().unwrap());
        }
        let total: usize = widths.iter().sum();
        let rows: usize = lead_shape.iter().product();
        let mut out = vec![0.0; rows * total];
        let mut off = 0;
        for (&v, &w) in inputs.iter().zip(&widths) {
            let src = self.data(v);
            for r in 0..rows {
                out[r * total + off..r * total + off + w].copy_from_slice(&src[r * w..(r + 1) * w]);
            }
            off += w;
        }
        let mut shape = lead_shape;
        shape.push(total);
        let value = Tensor::new(shape, out)?;
        Ok(self.push(value, Op::Concat(inputs.to_vec()), inputs))
    }

    /// Average over the node axis: `[K, C] -> [C]`, `[B, K, C] -> [B, C]`.
    pub fn mean_over_nodes(&mut self, f: Var) -> Result<Var> {
        let (lead, k, c) = node_layout(self.shape(f), "mean_over_nodes")?;
        let src = self.data(f);
        let mut out = vec![0.0; lead * c];
        for l in 0..lead {
            let o = &mut out[l * c..(l + 1) * c];
            for n in 0..k {
                for (acc, v) in o.iter_mut().zip(&src[(l * k + n) * c..(l * k + n + 1) * c]) {
                    *acc += v;
                }
            }
            o.iter_mut().for_each(|v| *v /= k as f64);
        }
        let shape = if self.shape(f).len() == 2 {
            vec![c]
        } else {
            vec![lead, c]
        };
        let value = Tensor::new(shape, out)?;
        Ok(self.push(value, Op::MeanNodes(f), &[f]))
    }

    /// Repeats a per-sample channel vector over `k` nodes: `[C] -> [k, C]`,
    /// `[B, C] -> [B, k, C]`.
    pub fn expand_nodes(&mut self, s: Var, k: usize) -> Result<Var> {
        let shape = self.shape(s).to_vec();
        let (lead, c, out_shape) = match shape[..] {
            [c] => (1, c, vec![k, c]),
            [b, c] => (b, c, vec![b, k, c]),
            _ => return Err(Error::shape("expand_nodes", format!("got {shape:?}"))),
        };
        if k == 0 {
            return Err(Error::shape("expand_nodes", "zero nodes"));
        }
        let src = self.data(s);
        let mut out = Vec::with_capacity(lead * k * c);
        for l in 0..lead {
            for _ in 0..k {
                out.extend_from_slice(&src[l * c..(l + 1) * c]);
            }
        }
        let value = Tensor::new(out_shape, out)?;
        Ok(self.push(value, Op::ExpandNodes(s), &[s]))
    }

    /// Node aggregation `out[.., i, :] = sum_j adj[i, j] * x[.., j, :]`.
    pub fn node_mix(&mut self, adj: Var, x: Var) -> Result<Var> {
        let (lead, k, c) = node_layout(self.shape(x), "node_mix")?;
        if self.shape(adj) != [k, k] {
            return Err(Error::shape(
                "node_mix",
                format!("adjacency {:?} for {k} nodes", self.shape(adj)),
            ));
        }
        let (a, src) = (self.data(adj), self.data(x));
        let mut out = vec![0.0; lead * k * c];
        for l in 0..lead {
            let block = &src[l * k * c..(l + 1) * k * c];
            gemm_nn(a, block, &mut out[l * k * c..(l + 1) * k * c], k, k, c);
        }
        let value = Tensor::new(self.shape(x).to_vec(), out)?;
        Ok(self.push(value, Op::NodeMix { adj, input: x }, &[adj, x]))
    }

    /// Per-node linear maps: `x [.., K, Cin]` with `weights [K, Cin, Cout]`
    /// gives `out[.., j, :] = x[.., j, :] * weights[j]`.
    pub fn node_matmul(&mut self, x: Var, weights: Var) -> Result<Var> {
        let (lead, k, cin) = node_layout(self.shape(x), "node_matmul")?;
        let cout = match self.shape(weights) {
            [wk, wi, wo] if *wk == k && *wi == cin => *wo,
            s => {
                return Err(Error::shape(
                    "node_matmul",
                    format!("weights {s:?} for input {:?}", self.shape(x)),
                ))
            }
        };
        let (src, w) = (self.data(x), self.data(weights));
        let mut out = vec![0.0; lead * k * cout];
        for l in 0..lead {
            for j in 0..k {
                let xr = &src[(l * k + j) * cin..(l * k + j + 1) * cin];
                let wj = &w[j * cin * cout..(j + 1) * cin * cout];
                gemm_nn(
                    xr,
                    wj,
                    &mut out[(l * k + j) * cout..(l * k + j + 1) * cout],
                    1,
                    cin,
                    cout,
                );
            }
        }
        let mut shape = self.shape(x).to_vec();
        let n = shape.len();
        shape[n - 1] = cout;
        let value = Tensor::new(shape, out)?;
        Ok(self.push(value, Op::NodeMatMul { input: x, weights }, &[x, weights]))
    }

    /// Row-wise softmax of `logits [K, K]` restricted to the support of `mask`;
    /// entries outside the support are exactly zero.
    pub fn masked_softmax(&mut self, logits: Var, mask: &[bool]) -> Result<Var> {
        let (r, c) = match self.shape(logits) {
            [r, c] => (*r, *c),
            s => return Err(Error::shape("masked_softmax", format!("got {s:?}"))),
        };
        if mask.len() != r * c {
            return Err(Error::shape(
                "masked_softmax",
                format!("mask of {} entries for [{r}, {c}]", mask.len()),
            ));
        }
        let src = self.data(logits);
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            let row_mask = &mask[i * c..(i + 1) * c];
            if !row_mask.iter().any(|&m| m) {
                return Err(Error::Validation(format!(
                    "masked_softmax: row {i} has empty support"
                )));
            }
            let row = &src[i * c..(i + 1) * c];
            let max = row
                .iter()
                .zip(row_mask)
                .filter(|(_, &m)| m)
                .map(|(&v, _)| v)
                .fold(f64::NEG_INFINITY, f64::max);
            let mut total = 0.0;
            for j in 0..c {
                if row_mask[j] {
                    let e = (row[j] - max).exp();
                    out[i * c + j] = e;
                    total += e;
                }
            }
            out[i * c..(i + 1) * c].iter_mut().for_each(|v| *v /= total);
        }
        let value = Tensor::new(vec![r, c], out)?;
        Ok(self.push(
            value,
            Op::MaskedSoftmax {
                logits,
                mask: mask.to_vec(),
            },
            &[logits],
        ))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.data(a).iter().sum();
        self.push(Tensor::scalar(s), Op::Sum(a), &[a])
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let d = self.data(a);
        let s = d.iter().sum::<f64>() / d.len() as f64;
        self.push(Tensor::scalar(s), Op::Mean(a), &[a])
    }

    /// Reverse sweep from a scalar root. Every node is visited at most once.
    pub fn backward(&self, root: Var) -> Result<GradientMap> {
        if !self.value(root).is_scalar() {
            return Err(Error::Contract(format!(
                "backward needs a scalar root, got shape {:?}",
                self.shape(root)
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; root.0 + 1];
        grads[root.0] = Some(vec![1.0]);
        let mut out = GradientMap::default();
        for i in (0..=root.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            match &node.op {
                None => {
                    let t = Tensor::new(node.value.shape().to_vec(), g)?;
                    out.grads.insert(Var(i), t);
                }
                Some(op) => {
                    let mut acc = Accumulator {
                        nodes: &self.nodes,
                        grads: &mut grads,
                    };
                    acc.backprop(op, &node.value, &g);
                }
            }
        }
        Ok(out)
    }
}

struct Accumulator<'a> {
    nodes: &'a [Node],
    grads: &'a mut Vec<Option<Vec<f64>>>,
}

impl<'a> Accumulator<'a> {
    fn val(&self, v: Var) -> &'a [f64] {
        let nodes: &'a [Node] = self.nodes;
        nodes[v.0].value.data()
    }

    fn shape(&self, v: Var) -> &'a [usize] {
        let nodes: &'a [Node] = self.nodes;
        nodes[v.0].value.shape()
    }

    /// Gradient buffer for `v`, or `None` when nothing upstream needs it.
    fn slot(&mut self, v: Var) -> Option<&mut Vec<f64>> {
        let node = &self.nodes[v.0];
        if !node.requires_grad {
            return None;
        }
        let n = node.value.len();
        Some(self.grads[v.0].get_or_insert_with(|| vec![0.0; n]))
    }

    fn backprop(&mut self, op: &Op, out: &Tensor, g: &[f64]) {
        match op {
            Op::MatMul(a, b) => {
                let (m, k) = (self.shape(*a)[0], self.shape(*a)[1]);
                let n = self.shape(*b)[1];
                let (av, bv) = (self.val(*a), self.val(*b));
                if let Some(ga) = self.slot(*a) {
                    gemm_nt(g, bv, ga, m, n, k);
                }
                if let Some(gb) = self.slot(*b) {
                    gemm_tn(av, g, gb, m, k, n);
                }
            }
            Op::Transpose(a) => {
                let (m, n) = (self.shape(*a)[0], self.shape(*a)[1]);
                if let Some(ga) = self.slot(*a) {
                    for i in 0..m {
                        for j in 0..n {
                            ga[i * n + j] += g[j * m + i];
                        }
                    }
                }
            }
            Op::Reshape(a) | Op::Sum(a) | Op::Mean(a) | Op::Scale(a, _) => {
                let factor = match op {
                    Op::Scale(_, s) => *s,
                    Op::Mean(a) => 1.0 / self.val(*a).len() as f64,
                    _ => 1.0,
                };
                let reduce = matches!(op, Op::Sum(_) | Op::Mean(_));
                if let Some(ga) = self.slot(*a) {
                    if reduce {
                        ga.iter_mut().for_each(|v| *v += g[0] * factor);
                    } else {
                        ga.iter_mut().zip(g).for_each(|(v, gi)| *v += gi * factor);
                    }
                }
            }
            Op::Add(a, b) | Op::Sub(a, b) => {
                let sign = if matches!(op, Op::Sub(..)) { -1.0 } else { 1.0 };
                if let Some(ga) = self.slot(*a) {
                    ga.iter_mut().zip(g).for_each(|(v, gi)| *v += gi);
                }
                if let Some(gb) = self.slot(*b) {
                    let c = gb.len();
                    for (i, gi) in g.iter().enumerate() {
                        gb[i % c] += sign * gi;
                    }
                }
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.val(*a), self.val(*b));
                let c = bv.len();
                if let Some(ga) = self.slot(*a) {
                    for (i, gi) in g.iter().enumerate() {
                        ga[i] += gi * bv[i % c];
                    }
                }
                if let Some(gb) = self.slot(*b) {
                    for (i, gi) in g.iter().enumerate() {
                        gb[i % c] += gi * av[i];
                    }
                }
            }
            Op::Relu(a) => {
                let y = out.data();
                if let Some(ga) = self.slot(*a) {
                    for ((v, gi), yi) in ga.iter_mut().zip(g).zip(y) {
                        if *yi > 0.0 {
                            *v += gi;
                        }
                    }
                }
            }
            Op::Sigmoid(a) => {
                let y = out.data();
                if let Some(ga) = self.slot(*a) {
                    for ((v, gi), yi) in ga.iter_mut().zip(g).zip(y) {
                        *v += gi * yi * (1.0 - yi);
                    }
                }
            }
            Op::GroupMax { input, argmax } => {
                let (lead, k, c) = node_layout(self.shape(*input), "group_max").unwrap();
                let kc = k / 2;
                if let Some(ga) = self.slot(*input) {
                    for l in 0..lead {
                        for grp in 0..kc {
                            let base = (l * kc + grp) * c;
                            for ch in 0..c {
                                let row = argmax[base + ch] as usize;
                                ga[(l * k + row) * c + ch] += g[base + ch];
                            }
                        }
                    }
                }
            }
            Op::DuplicateExpand { input, pairs } => {
                let (lead, kc, c) = node_layout(self.shape(*input), "duplicate_expand").unwrap();
                let k = 2 * kc;
                if let Some(ga) = self.slot(*input) {
                    for l in 0..lead {
                        for (grp, &(a, b)) in pairs.iter().enumerate() {
                            let dst = &mut ga[(l * kc + grp) * c..(l * kc + grp + 1) * c];
                            let ra = &g[(l * k + a) * c..(l * k + a + 1) * c];
                            let rb = &g[(l * k + b) * c..(l * k + b + 1) * c];
                            for ((d, x), y) in dst.iter_mut().zip(ra).zip(rb) {
                                *d += x + y;
                            }
                        }
                    }
                }
            }
            Op::BatchNorm {
                input,
                gain,
                bias,
                xhat,
                inv_std,
                batch_stats,
            } => {
                let c = inv_std.len();
                let rows = g.len() / c;
                let mut sum_g = vec![0.0; c];
                let mut sum_gx = vec![0.0; c];
                for r in 0..rows {
                    for ch in 0..c {
                        let gi = g[r * c + ch];
                        sum_g[ch] += gi;
                        sum_gx[ch] += gi * xhat[r * c + ch];
                    }
                }
                let gv = self.val(*gain);
                if let Some(gx) = self.slot(*input) {
                    if *batch_stats {
                        let n = rows as f64;
                        for r in 0..rows {
                            for ch in 0..c {
                                let i = r * c + ch;
                                gx[i] += gv[ch] * inv_std[ch] / n
                                    * (n * g[i] - sum_g[ch] - xhat[i] * sum_gx[ch]);
                            }
                        }
                    } else {
                        for r in 0..rows {
                            for ch in 0..c {
                                gx[r * c + ch] += g[r * c + ch] * gv[ch] * inv_std[ch];
                            }
                        }
                    }
                }
                if let Some(gg) = self.slot(*gain) {
                    gg.iter_mut().zip(&sum_gx).for_each(|(v, s)| *v += s);
                }
                if let Some(gb) = self.slot(*bias) {
                    gb.iter_mut().zip(&sum_g).for_each(|(v, s)| *v += s);
                }
            }
            Op::Dropout { input, mask } => {
                if let Some(ga) = self.slot(*input) {
                    for ((v, gi), m) in ga.iter_mut().zip(g).zip(mask) {
                        *v += gi * m;
                    }
                }
            }
            Op::Concat(inputs) => {
                let total = *out.shape().last().unwrap();
                let rows = g.len() / total;
                let mut off = 0;
                for &v in inputs {
                    let w = *self.shape(v).last().unwrap();
                    if let Some(gv) = self.slot(v) {
                        for r in 0..rows {
                            for (d, s) in gv[r * w..(r + 1) * w]
                                .iter_mut()
                                .zip(&g[r * total + off..r * total + off + w])
                            {
                                *d += s;
                            }
                        }
                    }
                    off += w;
                }
            }
            Op::MeanNodes(f) => {
                let (lead, k, c) = node_layout(self.shape(*f), "mean_over_nodes").unwrap();
                if let Some(gf) = self.slot(*f) {
                    let inv = 1.0 / k as f64;
                    for l in 0..lead {
                        for n in 0..k {
                            for ch in 0..c {
                                gf[(l * k + n) * c + ch] += g[l * c + ch] * inv;
                            }
                        }
                    }
                }
            }
            Op::ExpandNodes(s) => {
                let c = *self.shape(*s).last().unwrap();
                let lead = self.val(*s).len() / c;
                let k = out.len() / (lead * c);
                if let Some(gs) = self.slot(*s) {
                    for l in 0..lead {
                        for n in 0..k {
                            for ch in 0..c {
                                gs[l * c + ch] += g[(l * k + n) * c + ch];
                            }
                        }
                    }
                }
            }
            Op::NodeMix { adj, input } => {
                let (lead, k, c) = node_layout(self.shape(*input), "node_mix").unwrap();
                let (a, x) = (self.val(*adj), self.val(*input));
                if let Some(ga) = self.slot(*adj) {
                    for l in 0..lead {
                        let gb = &g[l * k * c..(l + 1) * k * c];
                        let xb = &x[l * k * c..(l + 1) * k * c];
                        gemm_nt(gb, xb, ga, k, c, k);
                    }
                }
                if let Some(gx) = self.slot(*input) {
                    for l in 0..lead {
                        let gb = &g[l * k * c..(l + 1) * k * c];
                        gemm_tn(a, gb, &mut gx[l * k * c..(l + 1) * k * c], k, k, c);
                    }
                }
            }
            Op::NodeMatMul { input, weights } => {
                let (lead, k, cin) = node_layout(self.shape(*input), "node_matmul").unwrap();
                let cout = self.shape(*weights)[2];
                let (x, w) = (self.val(*input), self.val(*weights));
                if let Some(gx) = self.slot(*input) {
                    for l in 0..lead {
                        for j in 0..k {
                            let gr = &g[(l * k + j) * cout..(l * k + j + 1) * cout];
                            let wj = &w[j * cin * cout..(j + 1) * cin * cout];
                            let dst = &mut gx[(l * k + j) * cin..(l * k + j + 1) * cin];
                            for (p, d) in dst.iter_mut().enumerate() {
                                *d += dot(gr, &wj[p * cout..(p + 1) * cout]);
                            }
                        }
                    }
                }
                if let Some(gw) = self.slot(*weights) {
                    for l in 0..lead {
                        for j in 0..k {
                            let gr = &g[(l * k + j) * cout..(l * k + j + 1) * cout];
                            let xr = &x[(l * k + j) * cin..(l * k + j + 1) * cin];
                            gemm_tn(
                                xr,
                                gr,
                                &mut gw[j * cin * cout..(j + 1) * cin * cout],
                                1,
                                cin,
                                cout,
                            );
                        }
                    }
                }
            }
            Op::MaskedSoftmax { logits, mask } => {
                let c = self.shape(*logits)[1];
                let y = out.data();
                if let Some(gl) = self.slot(*logits) {
                    for (i, yrow) in y.chunks_exact(c).enumerate() {
                        let grow = &g[i * c..(i + 1) * c];
                        let inner = dot(yrow, grow);
                        for j in 0..c {
                            if mask[i * c + j] {
                                gl[i * c + j] += yrow[j] * (grow[j] - inner);
                            }
                        }
                    }
                }
            }
        }
    }
}

pub(crate) fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

/// Checks that `pairs` is a perfect pairing of `0..k`.
pub(crate) fn validate_pairs(pairs: &[(usize, usize)], k: usize) -> Result<()> {
    if !k.is_multiple_of(2) || pairs.len() * 2 != k {
        return Err(Error::Validation(format!(
            "{} pairs cannot partition {k} nodes",
            pairs.len()
        )));
    }
    let mut seen = vec![false; k];
    for &(a, b) in pairs {
        for i in [a, b] {
            if i >= k || seen[i] {
                return Err(Error::Validation(format!(
                    "groups are not a partition of 0..{k}: index {i} out of range or repeated"
                )));
            }
            seen[i] = true;
        }
    }
    Ok(())
}
