//! The graph hourglass: an encoder over the 16, 8 and 4 node scales, a decoder
//! back up, and additive skips between matching scales.
//!
//! Channels widen as the graph coarsens. The widening happens in the last
//! block before each pool, so every skip joins tensors of equal width:
//!
//! ```text
//! e1 = conv@16(x: C -> C_mid)         p1 = pool(e1)
//! e2 = conv@8(p1: C_mid -> C_low)     p2 = pool(e2)
//! m  = conv@4(p2: C_low -> C_low)
//! d2 = conv@8(unpool(m) + e2: C_low -> C_mid)
//! out = conv@16(unpool(d2) + e1: C_mid -> C)
//! ```

use serde::{Deserialize, Serialize};

use crate::autograd::Var;
use crate::error::{Error, Result};
use crate::layers::{ConvBlock, ConvKind};
use crate::params::{Forward, Initializer, ParamStore};
use crate::skeleton::{GraphScale, SkeletonSpec, SCALE_NODES};
use crate::tensor::node_layout;

/// Channel widths at the 16, 8 and 4 node scales.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChannelLadder {
    pub outer: usize,
    pub mid: usize,
    pub low: usize,
}

impl ChannelLadder {
    /// `(C, 3C/2, 2C)`; `(64, 96, 128)` for 64 channels.
    pub fn for_channels(c: usize) -> Self {
        Self {
            outer: c,
            mid: c * 3 / 2,
            low: c * 2,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Hourglass {
    pub ladder: ChannelLadder,
    encode_fine: Vec<ConvBlock>,
    encode_mid: Vec<ConvBlock>,
    bottleneck: Vec<ConvBlock>,
    decode_mid: Vec<ConvBlock>,
    decode_fine: Vec<ConvBlock>,
    pool_fine: Vec<(usize, usize)>,
    pool_mid: Vec<(usize, usize)>,
}

/// A run of `count` blocks; the first maps `cin -> cout` when `widen_first`,
/// otherwise the last does.
#[allow(clippy::too_many_arguments)]
fn stage(
    store: &mut ParamStore,
    init: &mut Initializer,
    name: &str,
    kind: ConvKind,
    scale: &GraphScale,
    (cin, cout): (usize, usize),
    count: usize,
    widen_first: bool,
    dropout: f64,
) -> Vec<ConvBlock> {
    (0..count)
        .map(|i| {
            let changes = if widen_first { i == 0 } else { i + 1 == count };
            let (a, b) = if changes {
                (cin, cout)
            } else if widen_first {
                (cout, cout)
            } else {
                (cin, cin)
            };
            ConvBlock::init(
                store,
                init,
                &format!("{name}.{i}"),
                kind,
                scale,
                a,
                b,
                dropout,
            )
        })
        .collect()
}

impl Hourglass {
    #[allow(clippy::too_many_arguments)]
    pub fn init(
        store: &mut ParamStore,
        init: &mut Initializer,
        name: &str,
        kind: ConvKind,
        ladder: ChannelLadder,
        skeleton: &SkeletonSpec,
        blocks_per_scale: usize,
        dropout: f64,
    ) -> Result<Self> {
        let ChannelLadder { outer, mid, low } = ladder;
        if outer == 0 || mid == 0 || low == 0 {
            return Err(Error::Config(format!(
                "hourglass widths must be positive, got {ladder:?}"
            )));
        }
        if blocks_per_scale == 0 {
            return Err(Error::Config("blocks_per_scale must be at least 1".into()));
        }
        let [s16, s8, s4] = [
            &skeleton.scales[0],
            &skeleton.scales[1],
            &skeleton.scales[2],
        ];
        let n = blocks_per_scale;
        Ok(Self {
            ladder,
            encode_fine: stage(
                store,
                init,
                &format!("{name}.enc16"),
                kind,
                s16,
                (outer, mid),
                n,
                false,
                dropout,
            ),
            encode_mid: stage(
                store,
                init,
                &format!("{name}.enc8"),
                kind,
                s8,
                (mid, low),
                n,
                false,
                dropout,
            ),
            bottleneck: stage(
                store,
                init,
                &format!("{name}.mid4"),
                kind,
                s4,
                (low, low),
                n,
                true,
                dropout,
            ),
            decode_mid: stage(
                store,
                init,
                &format!("{name}.dec8"),
                kind,
                s8,
                (low, mid),
                n,
                false,
                dropout,
            ),
            decode_fine: stage(
                store,
                init,
                &format!("{name}.dec16"),
                kind,
                s16,
                (mid, outer),
                n,
                false,
                dropout,
            ),
            pool_fine: skeleton.pool_maps[0].pairs.clone(),
            pool_mid: skeleton.pool_maps[1].pairs.clone(),
        })
    }

    pub fn forward(&self, fwd: &mut Forward<'_>, x: Var) -> Result<Var> {
        let (_, k, c) = node_layout(fwd.graph.shape(x), "hourglass")?;
        if k != SCALE_NODES[0] || c != self.ladder.outer {
            return Err(Error::shape(
                "hourglass",
                format!(
                    "input: expected {} nodes x {} channels, got {:?}",
                    SCALE_NODES[0],
                    self.ladder.outer,
                    fwd.graph.shape(x)
                ),
            ));
        }
        let e1 = run(fwd, &self.encode_fine, x, "encoder@16")?;
        let p1 = fwd
            .graph
            .group_max(e1, &self.pool_fine)
            .map_err(at("pool 16->8"))?;
        let e2 = run(fwd, &self.encode_mid, p1, "encoder@8")?;
        let p2 = fwd
            .graph
            .group_max(e2, &self.pool_mid)
            .map_err(at("pool 8->4"))?;
        let m = run(fwd, &self.bottleneck, p2, "bottleneck@4")?;
        let u2 = fwd
            .graph
            .duplicate_expand(m, &self.pool_mid)
            .map_err(at("unpool 4->8"))?;
        let u2 = fwd.graph.add(u2, e2).map_err(at("skip@8"))?;
        let d2 = run(fwd, &self.decode_mid, u2, "decoder@8")?;
        let u1 = fwd
            .graph
            .duplicate_expand(d2, &self.pool_fine)
            .map_err(at("unpool 8->16"))?;
        let u1 = fwd.graph.add(u1, e1).map_err(at("skip@16"))?;
        run(fwd, &self.decode_fine, u1, "decoder@16")
    }
}

fn run(
    fwd: &mut Forward<'_>,
    blocks: &[ConvBlock],
    mut x: Var,
    stage: &'static str,
) -> Result<Var> {
    for block in blocks {
        x = block.forward(fwd, x).map_err(at(stage))?;
    }
    fwd.trace_nodes(fwd.graph.shape(x)[fwd.graph.shape(x).len() - 2]);
    Ok(x)
}

fn at(stage: &'static str) -> impl Fn(Error) -> Error {
    move |e| match e {
        Error::Shape { op, detail } => Error::Shape {
            op,
            detail: format!("{stage}: {detail}"),
        },
        other => other,
    }
}
