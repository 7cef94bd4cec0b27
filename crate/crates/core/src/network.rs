//! Full models: the stacked graph hourglass and the sequential residual
//! baseline. Both map `[B, 16, 2]` inputs to `[B, 16, 3]` predictions.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Mode, Var};
use crate::error::{Error, Result};
use crate::hourglass::{ChannelLadder, Hourglass};
use crate::layers::{ConvBlock, ConvKind, GraphConv, NodeLinear, SeBlock};
use crate::params::{Forward, Initializer, ParamStore};
use crate::skeleton::{SkeletonSpec, FINE_JOINTS};
use crate::tensor::{node_layout, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Architecture {
    Graphsh,
    Seqres,
}

impl std::str::FromStr for Architecture {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "graphsh" => Ok(Self::Graphsh),
            "seqres" => Ok(Self::Seqres),
            other => Err(Error::Config(format!(
                "unknown architecture `{other}` (expected graphsh or seqres)"
            ))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NetworkConfig {
    pub architecture: Architecture,
    /// Number of stacked hourglasses.
    pub stacks: usize,
    pub channels: usize,
    pub conv_kind: ConvKind,
    pub se_ratio: usize,
    pub dropout: f64,
    pub blocks_per_scale: usize,
    /// Hourglass widths at 8 and 4 nodes; `3C/2` and `2C` when unset.
    pub mid_channels: Option<usize>,
    pub low_channels: Option<usize>,
    /// Follow the input graph conv with batch norm and ReLU.
    pub pre_layer_activation: bool,
    pub seqres_depth: usize,
    pub seqres_channels: usize,
}

impl Default for NetworkConfig {
    fn default() -> Self {
        Self {
            architecture: Architecture::Graphsh,
            stacks: 4,
            channels: 64,
            conv_kind: ConvKind::Preaggr,
            se_ratio: 8,
            dropout: 0.25,
            blocks_per_scale: 1,
            mid_channels: None,
            low_channels: None,
            pre_layer_activation: false,
            seqres_depth: 4,
            seqres_channels: 128,
        }
    }
}

impl NetworkConfig {
    pub fn seqres() -> Self {
        Self {
            architecture: Architecture::Seqres,
            ..Self::default()
        }
    }

    pub fn ladder(&self) -> ChannelLadder {
        let base = ChannelLadder::for_channels(self.channels);
        ChannelLadder {
            outer: self.channels,
            mid: self.mid_channels.unwrap_or(base.mid),
            low: self.low_channels.unwrap_or(base.low),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::Config(msg));
        if !(0.0..1.0).contains(&self.dropout) {
            return fail(format!("dropout must be in [0, 1), got {}", self.dropout));
        }
        match self.architecture {
            Architecture::Graphsh => {
                let l = self.ladder();
                if self.stacks == 0 || self.channels == 0 || l.mid == 0 || l.low == 0 {
                    return fail("stacks and channel widths must be positive".into());
                }
                if !self.channels.is_multiple_of(self.stacks) {
                    return fail(format!(
                        "channels ({}) must be divisible by stacks ({})",
                        self.channels, self.stacks
                    ));
                }
                if self.se_ratio == 0 || !self.channels.is_multiple_of(self.se_ratio) {
                    return fail(format!(
                        "channels ({}) must be divisible by se_ratio ({})",
                        self.channels, self.se_ratio
                    ));
                }
                if self.blocks_per_scale == 0 {
                    return fail("blocks_per_scale must be at least 1".into());
                }
            }
            Architecture::Seqres => {
                if self.seqres_depth == 0 || self.seqres_channels == 0 {
                    return fail("seqres_depth and seqres_channels must be positive".into());
                }
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
enum PreLayer {
    Bare(GraphConv),
    Block(ConvBlock),
}

impl PreLayer {
    #[allow(clippy::too_many_arguments)]
    fn init(
        store: &mut ParamStore,
        init: &mut Initializer,
        config: &NetworkConfig,
        skeleton: &SkeletonSpec,
        cout: usize,
    ) -> Self {
        let fine = skeleton.fine();
        if config.pre_layer_activation {
            Self::Block(ConvBlock::init(
                store,
                init,
                "pre",
                config.conv_kind,
                fine,
                2,
                cout,
                0.0,
            ))
        } else {
            Self::Bare(GraphConv::init(
                store,
                init,
                "pre",
                config.conv_kind,
                fine,
                2,
                cout,
            ))
        }
    }

    fn forward(&self, fwd: &mut Forward<'_>, x: Var) -> Result<Var> {
        match self {
            Self::Bare(conv) => conv.forward(fwd, x),
            Self::Block(block) => block.forward(fwd, x),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
enum Body {
    Graphsh {
        pre: PreLayer,
        hourglasses: Vec<Hourglass>,
        heads: Vec<NodeLinear>,
        se: SeBlock,
        out: NodeLinear,
    },
    Seqres {
        pre: PreLayer,
        blocks: Vec<(ConvBlock, ConvBlock)>,
        out: NodeLinear,
    },
}

/// Predictions plus the per-stack channel-reduced features (GraphSH only).
#[derive(Clone, Debug)]
pub struct ForwardOutput {
    pub prediction: Var,
    pub intermediates: Vec<Var>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub config: NetworkConfig,
    pub skeleton: SkeletonSpec,
    pub params: ParamStore,
    body: Body,
}

impl Model {
    pub fn new(config: NetworkConfig, skeleton: SkeletonSpec, seed: u64) -> Result<Self> {
        Self::with_initializer(config, skeleton, &mut Initializer::new(seed))
    }

    pub fn with_initializer(
        config: NetworkConfig,
        skeleton: SkeletonSpec,
        init: &mut Initializer,
    ) -> Result<Self> {
        config.validate()?;
        let mut store = ParamStore::new();
        let body = match config.architecture {
            Architecture::Graphsh => {
                let c = config.channels;
                let pre = PreLayer::init(&mut store, init, &config, &skeleton, c);
                let mut hourglasses = Vec::with_capacity(config.stacks);
                let mut heads = Vec::with_capacity(config.stacks);
                for i in 0..config.stacks {
                    hourglasses.push(Hourglass::init(
                        &mut store,
                        init,
                        &format!("hourglass{i}"),
                        config.conv_kind,
                        config.ladder(),
                        &skeleton,
                        config.blocks_per_scale,
                        config.dropout,
                    )?);
                    heads.push(NodeLinear::init(
                        &mut store,
                        init,
                        &format!("head{i}"),
                        c,
                        c / config.stacks,
                    ));
                }
                let se = SeBlock::init(&mut store, init, "se", c, config.se_ratio)?;
                let out = NodeLinear::init(&mut store, init, "out", c, 3);
                Body::Graphsh {
                    pre,
                    hourglasses,
                    heads,
                    se,
                    out,
                }
            }
            Architecture::Seqres => {
                let c = config.seqres_channels;
                let fine = skeleton.fine();
                let pre = PreLayer::init(&mut store, init, &config, &skeleton, c);
                let blocks = (0..config.seqres_depth)
                    .map(|i| {
                        let mut block = |j: usize| {
                            let name = format!("res{i}.{j}");
                            ConvBlock::init(
                                &mut store,
                                init,
                                &name,
                                config.conv_kind,
                                fine,
                                c,
                                c,
                                config.dropout,
                            )
                        };
                        (block(0), block(1))
                    })
                    .collect();
                let out = NodeLinear::init(&mut store, init, "out", c, 3);
                Body::Seqres { pre, blocks, out }
            }
        };
        Ok(Self {
            config,
            skeleton,
            params: store,
            body,
        })
    }

    /// Exact number of learnable scalars.
    pub fn count_params(&self) -> usize {
        self.params.count_scalars()
    }

    pub fn forward(&self, fwd: &mut Forward<'_>, x: Var) -> Result<ForwardOutput> {
        let (_, k, c) = node_layout(fwd.graph.shape(x), "model")?;
        if k != FINE_JOINTS || c != 2 {
            return Err(Error::shape(
                "model",
                format!(
                    "expected {FINE_JOINTS} joints x 2 coordinates, got {:?}",
                    fwd.graph.shape(x)
                ),
            ));
        }
        match &self.body {
            Body::Graphsh {
                pre,
                hourglasses,
                heads,
                se,
                out,
            } => {
                let mut h = pre.forward(fwd, x)?;
                let mut intermediates = Vec::with_capacity(heads.len());
                for (hg, head) in hourglasses.iter().zip(heads) {
                    h = hg.forward(fwd, h)?;
                    intermediates.push(head.forward(fwd, h)?);
                }
                let fused = fwd.graph.concat_channels(&intermediates)?;
                let fused = se.forward(fwd, fused)?;
                let prediction = out.forward(fwd, fused)?;
                Ok(ForwardOutput {
                    prediction,
                    intermediates,
                })
            }
            Body::Seqres { pre, blocks, out } => {
                let mut h = pre.forward(fwd, x)?;
                for (a, b) in blocks {
                    let r = a.forward(fwd, h)?;
                    let r = b.forward(fwd, r)?;
                    h = fwd.graph.add(h, r)?;
                }
                let prediction = out.forward(fwd, h)?;
                Ok(ForwardOutput {
                    prediction,
                    intermediates: Vec::new(),
                })
            }
        }
    }

    /// Infer-mode prediction for `[B, 16, 2]` (or `[16, 2]`) inputs.
    pub fn predict(&self, inputs: &Tensor) -> Result<Tensor> {
        let mut graph = Graph::new();
        // dropout is inactive in infer mode, so the seed is irrelevant
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let params: Vec<Var> = self
            .params
            .values()
            .iter()
            .map(|t| graph.constant(t.clone()))
            .collect();
        let mut fwd = Forward::with_params(&mut graph, params, &self.params, Mode::Infer, &mut rng);
        let x = fwd.graph.constant(inputs.clone());
        let out = self.forward(&mut fwd, x)?;
        Ok(graph.value(out.prediction).clone())
    }
}

#[cfg(test)]
mod tests {
    use rand::Rng;

    use super::*;
    use crate::skeleton::build_default_skeleton;

    fn input(b: usize, seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_fn(&[b, 16, 2], |_| rng.gen_range(-1.0..1.0))
    }

    fn small(kind: ConvKind) -> NetworkConfig {
        NetworkConfig {
            stacks: 2,
            channels: 16,
            conv_kind: kind,
            ..NetworkConfig::default()
        }
    }

    #[test]
    fn default_graphsh_preaggr_count() {
        let m = Model::new(NetworkConfig::default(), build_default_skeleton(), 0).unwrap();
        let per_hourglass = 2
            * (16 * 64 * 96 + 8 * 96 * 128 + 4 * 128 * 128 + 8 * 128 * 96 + 16 * 96 * 64)
            + 3 * (96 + 128 + 128 + 96 + 64);
        let pre = 2 * 16 * 2 * 64 + 64;
        let heads = 4 * (64 * 16 + 16);
        let se = 2 * 8 * 64;
        let out = 64 * 3 + 3;
        assert_eq!(m.count_params(), 4 * per_hourglass + pre + heads + se + out);
        assert_eq!(m.count_params(), 3_685_699);
    }

    #[test]
    fn seqres_preaggr_count() {
        let m = Model::new(NetworkConfig::seqres(), build_default_skeleton(), 0).unwrap();
        let block = 2 * 16 * 128 * 128 + 3 * 128;
        let expect = (2 * 16 * 2 * 128 + 128) + 8 * block + (128 * 3 + 3);
        assert_eq!(m.count_params(), expect);
    }

    #[test]
    fn more_stacks_more_params() {
        let sk = build_default_skeleton();
        let a = Model::new(small(ConvKind::Vanilla), sk.clone(), 0).unwrap();
        let cfg = NetworkConfig {
            stacks: 4,
            ..small(ConvKind::Vanilla)
        };
        let b = Model::new(cfg, sk, 0).unwrap();
        assert!(b.count_params() > a.count_params());
    }

    #[test]
    fn config_divisibility_is_enforced() {
        let sk = build_default_skeleton();
        for cfg in [
            NetworkConfig {
                stacks: 3,
                ..NetworkConfig::default()
            },
            NetworkConfig {
                se_ratio: 5,
                ..NetworkConfig::default()
            },
            NetworkConfig {
                dropout: 1.0,
                ..NetworkConfig::default()
            },
        ] {
            assert!(matches!(
                Model::new(cfg, sk.clone(), 0),
                Err(Error::Config(_))
            ));
        }
    }

    #[test]
    fn output_and_intermediate_shapes() {
        let sk = build_default_skeleton();
        for kind in [ConvKind::Vanilla, ConvKind::Semantic, ConvKind::Preaggr] {
            let model = Model::new(small(kind), sk.clone(), 1).unwrap();
            let mut rng = ChaCha8Rng::seed_from_u64(0);
            let mut g = Graph::new();
            let mut fwd = Forward::new(&mut g, &model.params, Mode::Train, &mut rng);
            let x = fwd.graph.constant(input(3, 2));
            let out = model.forward(&mut fwd, x).unwrap();
            assert_eq!(fwd.graph.shape(out.prediction), [3, 16, 3]);
            assert_eq!(out.intermediates.len(), 2);
            for f in &out.intermediates {
                assert_eq!(fwd.graph.shape(*f), [3, 16, 8]);
            }
            assert_eq!(fwd.node_trace(), [16, 8, 4, 8, 16, 16, 8, 4, 8, 16]);
        }
    }

    #[test]
    fn zero_model_on_zero_input_outputs_head_bias() {
        let sk = build_default_skeleton();
        let mut model =
            Model::with_initializer(small(ConvKind::Preaggr), sk, &mut Initializer::zeros())
                .unwrap();
        let bias_id = match &model.body {
            Body::Graphsh { out, .. } => out.bias(),
            Body::Seqres { .. } => unreachable!(),
        };
        *model.params.get_mut(bias_id) = Tensor::new(vec![3], vec![1.5, -2.0, 0.25]).unwrap();
        let pred = model.predict(&Tensor::zeros(&[2, 16, 2])).unwrap();
        for row in pred.data().chunks(3) {
            assert_eq!(row, [1.5, -2.0, 0.25]);
        }
    }

    #[test]
    fn zero_residual_branch_is_identity() {
        // One SeqRes block whose convs are all zero adds nothing to the skip.
        let sk = build_default_skeleton();
        let cfg = NetworkConfig {
            seqres_depth: 1,
            seqres_channels: 8,
            conv_kind: ConvKind::Vanilla,
            ..NetworkConfig::seqres()
        };
        let mut model = Model::new(cfg, sk, 2).unwrap();
        let pre_out = {
            let Body::Seqres { pre, .. } = &model.body else {
                unreachable!()
            };
            let mut rng = ChaCha8Rng::seed_from_u64(0);
            let mut g = Graph::new();
            let mut fwd = Forward::new(&mut g, &model.params, Mode::Infer, &mut rng);
            let x = fwd.graph.constant(input(2, 3));
            let h = pre.forward(&mut fwd, x).unwrap();
            fwd.value(h).clone()
        };
        let names: Vec<String> = model.params.names().to_vec();
        for (id, name) in model
            .params
            .ids()
            .collect::<Vec<_>>()
            .into_iter()
            .zip(names)
        {
            if name.starts_with("res0.") {
                let t = model.params.get_mut(id);
                *t = Tensor::zeros(t.shape());
            }
        }
        let Body::Seqres { pre, blocks, .. } = &model.body else {
            unreachable!()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut g = Graph::new();
        let mut fwd = Forward::new(&mut g, &model.params, Mode::Infer, &mut rng);
        let x = fwd.graph.constant(input(2, 3));
        let h = pre.forward(&mut fwd, x).unwrap();
        let r = blocks[0].0.forward(&mut fwd, h).unwrap();
        let r = blocks[0].1.forward(&mut fwd, r).unwrap();
        let y = fwd.graph.add(h, r).unwrap();
        assert_eq!(fwd.value(y), &pre_out);
    }

    #[test]
    fn infer_forward_is_deterministic_and_batch_order_equivariant() {
        let model = Model::new(small(ConvKind::Semantic), build_default_skeleton(), 4).unwrap();
        let x = input(4, 5);
        let a = model.predict(&x).unwrap();
        assert_eq!(a, model.predict(&x).unwrap());
        let order = [2, 0, 3, 1];
        let permuted = Tensor::from_fn(&[4, 16, 2], |i| x.data()[order[i / 32] * 32 + i % 32]);
        let b = model.predict(&permuted).unwrap();
        for (slot, &src) in order.iter().enumerate() {
            assert_eq!(
                &b.data()[slot * 48..(slot + 1) * 48],
                &a.data()[src * 48..(src + 1) * 48]
            );
        }
    }

    #[test]
    fn every_parameter_is_connected_in_infer_mode() {
        let seqres = NetworkConfig {
            seqres_channels: 16,
            seqres_depth: 2,
            ..NetworkConfig::seqres()
        };
        for cfg in [
            small(ConvKind::Vanilla),
            small(ConvKind::Semantic),
            small(ConvKind::Preaggr),
            seqres,
        ] {
            let model = Model::new(cfg, build_default_skeleton(), 6).unwrap();
            let mut rng = ChaCha8Rng::seed_from_u64(0);
            let mut g = Graph::new();
            let mut fwd = Forward::new(&mut g, &model.params, Mode::Infer, &mut rng);
            let x = fwd.graph.constant(input(3, 7));
            let out = model.forward(&mut fwd, x).unwrap();
            let w = fwd
                .graph
                .constant(Tensor::from_fn(&[3, 16, 3], |i| (i as f64 * 0.37).sin()));
            let p = fwd.graph.mul(out.prediction, w).unwrap();
            let loss = fwd.graph.sum(p);
            let params = fwd.params().to_vec();
            let grads = g.backward(loss).unwrap();
            for (v, name) in params.iter().zip(model.params.names()) {
                let gr = grads.get_or_zeros(&g, *v);
                assert!(
                    gr.data().iter().any(|x| *x != 0.0),
                    "zero gradient for {name}"
                );
            }
        }
    }

    #[test]
    fn rejects_wrong_joint_count() {
        let model = Model::new(small(ConvKind::Vanilla), build_default_skeleton(), 0).unwrap();
        assert!(matches!(
            model.predict(&Tensor::zeros(&[1, 15, 2])),
            Err(Error::Shape { .. })
        ));
    }

    #[test]
    fn same_seed_same_parameters() {
        let sk = build_default_skeleton();
        let a = Model::new(small(ConvKind::Preaggr), sk.clone(), 9).unwrap();
        let b = Model::new(small(ConvKind::Preaggr), sk.clone(), 9).unwrap();
        let c = Model::new(small(ConvKind::Preaggr), sk, 10).unwrap();
        assert_eq!(a, b);
        assert_ne!(a.params, c.params);
    }

    #[test]
    fn config_round_trips_through_toml() {
        let cfg = NetworkConfig {
            mid_channels: Some(80),
            ..NetworkConfig::seqres()
        };
        let text = toml::to_string(&cfg).unwrap();
        assert_eq!(toml::from_str::<NetworkConfig>(&text).unwrap(), cfg);
        assert!(toml::from_str::<NetworkConfig>("stack = 3").is_err());
    }
}
