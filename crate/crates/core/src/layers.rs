//! Graph convolutions, node-wise linear maps, conv blocks and the
//! squeeze-and-excitation block.
//!
//! The free functions are the raw operators over graph values; the structs own
//! [`ParamId`]s into a [`ParamStore`] and wire those operators together.

use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::params::{BufferId, Forward, Initializer, ParamId, ParamStore};
use crate::skeleton::GraphScale;
use crate::tensor::{node_layout, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ConvKind {
    Vanilla,
    Semantic,
    Preaggr,
}

impl std::str::FromStr for ConvKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "vanilla" => Ok(Self::Vanilla),
            "semantic" => Ok(Self::Semantic),
            "preaggr" => Ok(Self::Preaggr),
            other => Err(Error::Config(format!(
                "unknown conv kind `{other}` (expected vanilla, semantic or preaggr)"
            ))),
        }
    }
}

/// `x [.., Cin] * w [Cin, Cout]` applied to every row.
fn rowwise_linear(g: &mut Graph, x: Var, w: Var) -> Result<Var> {
    let shape = g.shape(x).to_vec();
    let cin = *shape.last().unwrap();
    let rows = g.value(x).len() / cin;
    let cout = match g.shape(w) {
        [wi, wo] if *wi == cin => *wo,
        s => {
            return Err(Error::shape(
                "linear",
                format!("weight {s:?} for input {shape:?}"),
            ))
        }
    };
    let flat = g.reshape(x, &[rows, cin])?;
    let y = g.matmul(flat, w)?;
    let mut out_shape = shape;
    *out_shape.last_mut().unwrap() = cout;
    g.reshape(y, &out_shape)
}

/// `adj * x * w + b` per sample.
pub fn gconv_vanilla(g: &mut Graph, x: Var, adj: Var, w: Var, b: Var) -> Result<Var> {
    node_layout(g.shape(x), "gconv_vanilla")?;
    let xw = rowwise_linear(g, x, w)?;
    let mixed = g.node_mix(adj, xw)?;
    g.add(mixed, b)
}

/// Learnable adjacency: a row-wise softmax of `logits` over the support of
/// `mask` (the skeleton's `A + I`) replaces the fixed normalized adjacency.
pub fn gconv_semantic(
    g: &mut Graph,
    x: Var,
    mask: &[bool],
    logits: Var,
    w: Var,
    b: Var,
) -> Result<Var> {
    node_layout(g.shape(x), "gconv_semantic")?;
    let effective = g.masked_softmax(logits, mask)?;
    let xw = rowwise_linear(g, x, w)?;
    let mixed = g.node_mix(effective, xw)?;
    g.add(mixed, b)
}

/// Pre-aggregation convolution. Every node is transformed with its own weight
/// before aggregation, and self-connections use a separate weight set:
/// `out_i = sum_{j != i} adj[i, j] x_j W_nb[j] + adj[i, i] x_i W_self[i] + b`.
///
/// Both weight stacks are `[K, Cin, Cout]`.
pub fn gconv_preaggr(
    g: &mut Graph,
    x: Var,
    adj: &Tensor,
    w_neighbors: Var,
    w_self: Var,
    b: Var,
) -> Result<Var> {
    let (_, k, _) = node_layout(g.shape(x), "gconv_preaggr")?;
    for w in [w_neighbors, w_self] {
        if g.shape(w).len() != 3 || g.shape(w)[0] != k {
            return Err(Error::Validation(format!(
                "gconv_preaggr: expected {k} per-node weight matrices, got shape {:?}",
                g.shape(w)
            )));
        }
    }
    if adj.shape() != [k, k] {
        return Err(Error::shape(
            "gconv_preaggr",
            format!("adjacency {:?} for {k} nodes", adj.shape()),
        ));
    }
    let (off, diag) = split_diagonal(adj);
    let off = g.constant(off);
    let diag = g.constant(diag);
    let m_nb = g.node_matmul(x, w_neighbors)?;
    let m_self = g.node_matmul(x, w_self)?;
    let a = g.node_mix(off, m_nb)?;
    let s = g.node_mix(diag, m_self)?;
    let sum = g.add(a, s)?;
    g.add(sum, b)
}

fn split_diagonal(adj: &Tensor) -> (Tensor, Tensor) {
    let k = adj.shape()[0];
    let mut off = adj.clone();
    let mut diag = Tensor::zeros(&[k, k]);
    for i in 0..k {
        diag.set(&[i, i], adj.at(&[i, i]));
        off.set(&[i, i], 0.0);
    }
    (off, diag)
}

/// Shared linear map at every node (a 1x1 convolution).
pub fn node_linear(g: &mut Graph, x: Var, w: Var, b: Var) -> Result<Var> {
    let y = rowwise_linear(g, x, w)?;
    g.add(y, b)
}

/// Squeeze-and-excitation over channels: `z` is the node average of `f`,
/// `s = sigmoid(W2 relu(W1 z))`, and every channel of `f` is scaled by `s`.
/// `w1` is `[C/r, C]`, `w2` is `[C, C/r]`.
pub fn se_block(g: &mut Graph, f: Var, w1: Var, w2: Var) -> Result<Var> {
    let (lead, k, c) = node_layout(g.shape(f), "se_block")?;
    match (g.shape(w1), g.shape(w2)) {
        ([r1, c1], [c2, r2]) if *c1 == c && *c2 == c && r1 == r2 => {}
        (s1, s2) => {
            return Err(Error::shape(
                "se_block",
                format!("W1 {s1:?}, W2 {s2:?} for {c} channels"),
            ))
        }
    }
    let batched = g.shape(f).len() == 3;
    let z = g.mean_over_nodes(f)?;
    let z = if batched { z } else { g.reshape(z, &[1, c])? };
    let w1t = g.transpose(w1)?;
    let h = g.matmul(z, w1t)?;
    let h = g.relu(h);
    let w2t = g.transpose(w2)?;
    let pre = g.matmul(h, w2t)?;
    debug_assert_eq!(g.shape(pre), [lead, c]);
    let s = g.sigmoid(pre);
    let s = if batched { s } else { g.reshape(s, &[c])? };
    let s = g.expand_nodes(s, k)?;
    g.mul(f, s)
}

#[derive(Clone, Debug, PartialEq)]
enum ConvParams {
    Vanilla {
        w: ParamId,
        b: ParamId,
    },
    Semantic {
        w: ParamId,
        b: ParamId,
        logits: ParamId,
    },
    Preaggr {
        w_neighbors: ParamId,
        w_self: ParamId,
        b: ParamId,
    },
}

/// A graph convolution bound to one skeleton scale.
#[derive(Clone, Debug, PartialEq)]
pub struct GraphConv {
    pub kind: ConvKind,
    pub in_channels: usize,
    pub out_channels: usize,
    scale: GraphScale,
    params: ConvParams,
}

impl GraphConv {
    pub fn init(
        store: &mut ParamStore,
        init: &mut Initializer,
        name: &str,
        kind: ConvKind,
        scale: &GraphScale,
        cin: usize,
        cout: usize,
    ) -> Self {
        let k = scale.node_count;
        let params = match kind {
            ConvKind::Vanilla => ConvParams::Vanilla {
                w: store.add(
                    format!("{name}.weight"),
                    init.weight(&[cin, cout], cin, cout),
                ),
                b: store.add(format!("{name}.bias"), Tensor::zeros(&[cout])),
            },
            ConvKind::Semantic => ConvParams::Semantic {
                w: store.add(
                    format!("{name}.weight"),
                    init.weight(&[cin, cout], cin, cout),
                ),
                b: store.add(format!("{name}.bias"), Tensor::zeros(&[cout])),
                logits: store.add(format!("{name}.adjacency_logits"), Tensor::zeros(&[k, k])),
            },
            ConvKind::Preaggr => ConvParams::Preaggr {
                w_neighbors: store.add(
                    format!("{name}.weight_neighbors"),
                    init.weight(&[k, cin, cout], cin, cout),
                ),
                w_self: store.add(
                    format!("{name}.weight_self"),
                    init.weight(&[k, cin, cout], cin, cout),
                ),
                b: store.add(format!("{name}.bias"), Tensor::zeros(&[cout])),
            },
        };
        Self {
            kind,
            in_channels: cin,
            out_channels: cout,
            scale: scale.clone(),
            params,
        }
    }

    pub fn node_count(&self) -> usize {
        self.scale.node_count
    }

    pub fn forward(&self, fwd: &mut Forward<'_>, x: Var) -> Result<Var> {
        check_input(
            fwd.graph,
            x,
            self.scale.node_count,
            self.in_channels,
            "graph conv",
        )?;
        match self.params {
            ConvParams::Vanilla { w, b } => {
                let adj = fwd.graph.constant(self.scale.adjacency.clone());
                let (w, b) = (fwd.param(w), fwd.param(b));
                gconv_vanilla(fwd.graph, x, adj, w, b)
            }
            ConvParams::Semantic { w, b, logits } => {
                let (w, b, logits) = (fwd.param(w), fwd.param(b), fwd.param(logits));
                gconv_semantic(fwd.graph, x, &self.scale.support_mask(), logits, w, b)
            }
            ConvParams::Preaggr {
                w_neighbors,
                w_self,
                b,
            } => {
                let (wn, ws, b) = (fwd.param(w_neighbors), fwd.param(w_self), fwd.param(b));
                gconv_preaggr(fwd.graph, x, &self.scale.adjacency, wn, ws, b)
            }
        }
    }
}

fn check_input(g: &Graph, x: Var, nodes: usize, channels: usize, what: &'static str) -> Result<()> {
    let (_, k, c) = node_layout(g.shape(x), what)?;
    if k != nodes || c != channels {
        return Err(Error::shape(
            what,
            format!(
                "expected {nodes} nodes x {channels} channels, got {:?}",
                g.shape(x)
            ),
        ));
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq)]
pub struct NodeLinear {
    pub in_channels: usize,
    pub out_channels: usize,
    w: ParamId,
    b: ParamId,
}

impl NodeLinear {
    pub fn init(
        store: &mut ParamStore,
        init: &mut Initializer,
        name: &str,
        cin: usize,
        cout: usize,
    ) -> Self {
        Self {
            in_channels: cin,
            out_channels: cout,
            w: store.add(
                format!("{name}.weight"),
                init.weight(&[cin, cout], cin, cout),
            ),
            b: store.add(format!("{name}.bias"), Tensor::zeros(&[cout])),
        }
    }

    pub fn forward(&self, fwd: &mut Forward<'_>, x: Var) -> Result<Var> {
        let (w, b) = (fwd.param(self.w), fwd.param(self.b));
        node_linear(fwd.graph, x, w, b)
    }

    pub fn bias(&self) -> ParamId {
        self.b
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BatchNorm {
    gain: ParamId,
    bias: ParamId,
    running: BufferId,
}

impl BatchNorm {
    pub fn init(
        store: &mut ParamStore,
        init: &mut Initializer,
        name: &str,
        channels: usize,
    ) -> Self {
        Self {
            gain: store.add(format!("{name}.gain"), init.constant(&[channels], 1.0)),
            bias: store.add(format!("{name}.bias"), Tensor::zeros(&[channels])),
            running: store.add_running(channels),
        }
    }

    pub fn forward(&self, fwd: &mut Forward<'_>, x: Var) -> Result<Var> {
        let (gain, bias) = (fwd.param(self.gain), fwd.param(self.bias));
        let running = fwd.running(self.running).clone();
        let mode = fwd.mode;
        let (y, update) = fwd.graph.batch_norm(x, gain, bias, &running, mode)?;
        if let Some(stats) = update {
            fwd.push_running_update(self.running, stats);
        }
        Ok(y)
    }
}

/// Graph conv, batch norm, ReLU, then dropout (train mode only).
#[derive(Clone, Debug, PartialEq)]
pub struct ConvBlock {
    pub conv: GraphConv,
    bn: BatchNorm,
    pub dropout_p: f64,
}

impl ConvBlock {
    #[allow(clippy::too_many_arguments)]
    pub fn init(
        store: &mut ParamStore,
        init: &mut Initializer,
        name: &str,
        kind: ConvKind,
        scale: &GraphScale,
        cin: usize,
        cout: usize,
        dropout_p: f64,
    ) -> Self {
        let conv = GraphConv::init(store, init, &format!("{name}.conv"), kind, scale, cin, cout);
        let bn = BatchNorm::init(store, init, &format!("{name}.bn"), cout);
        Self {
            conv,
            bn,
            dropout_p,
        }
    }

    pub fn forward(&self, fwd: &mut Forward<'_>, x: Var) -> Result<Var> {
        let y = self.conv.forward(fwd, x)?;
        let y = self.bn.forward(fwd, y)?;
        let y = fwd.graph.relu(y);
        if self.dropout_p > 0.0 {
            fwd.dropout(y, self.dropout_p)
        } else {
            Ok(y)
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SeBlock {
    pub channels: usize,
    pub reduction: usize,
    w1: ParamId,
    w2: ParamId,
}

impl SeBlock {
    pub fn init(
        store: &mut ParamStore,
        init: &mut Initializer,
        name: &str,
        channels: usize,
        reduction: usize,
    ) -> Result<Self> {
        if reduction == 0 || !channels.is_multiple_of(reduction) {
            return Err(Error::Config(format!(
                "SE block: {channels} channels not divisible by reduction ratio {reduction}"
            )));
        }
        let r = channels / reduction;
        Ok(Self {
            channels,
            reduction,
            w1: store.add(
                format!("{name}.w1"),
                init.weight(&[r, channels], channels, r),
            ),
            w2: store.add(
                format!("{name}.w2"),
                init.weight(&[channels, r], r, channels),
            ),
        })
    }

    pub fn forward(&self, fwd: &mut Forward<'_>, f: Var) -> Result<Var> {
        let (w1, w2) = (fwd.param(self.w1), fwd.param(self.w2));
        se_block(fwd.graph, f, w1, w2)
    }
}
