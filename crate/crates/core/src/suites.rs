//! Finite-difference gradient suites over every differentiable operation, the
//! layers, the hourglass module and full models with an MSE loss.
//!
//! Each case reduces its output to a scalar through a fixed random projection
//! so that every output entry contributes a distinct weight.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autograd::{Elementwise, Graph, Mode, RunningStats, Var};
use crate::error::{Error, Result};
use crate::gradcheck::{gradcheck_inputs, Coords, GradCheckReport, DEFAULT_STEP};
use crate::hourglass::{ChannelLadder, Hourglass};
use crate::layers::{self, ConvBlock, ConvKind};
use crate::network::{Model, NetworkConfig};
use crate::params::{Forward, Initializer, ParamStore};
use crate::skeleton::build_default_skeleton;
use crate::tensor::Tensor;
use crate::training::mse_loss;

pub const MODULES: [&str; 4] = ["tensor", "layers", "hourglass", "network"];
pub const TOLERANCE: f64 = 1e-4;

#[derive(Clone, Debug)]
pub struct SuiteResult {
    pub module: &'static str,
    pub name: String,
    pub report: GradCheckReport,
}

impl SuiteResult {
    pub fn passed(&self) -> bool {
        self.report.max_rel_error < TOLERANCE
    }
}

fn uniform(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    Tensor::from_fn(shape, |_| rng.gen_range(-1.0..1.0))
}

/// Entries bounded away from zero, for kinked functions.
fn away_from_zero(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    Tensor::from_fn(shape, |_| {
        let m = rng.gen_range(0.05..1.0);
        if rng.gen_bool(0.5) {
            m
        } else {
            -m
        }
    })
}

/// `sum(y * R)` with `R` fixed by `seed` and the shape of `y`.
fn project(g: &mut Graph, y: Var, seed: u64) -> Result<Var> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let r = g.constant(uniform(&mut rng, g.shape(y)));
    let p = g.mul(y, r)?;
    Ok(g.sum(p))
}

struct Runner {
    module: &'static str,
    seed: u64,
    rng: ChaCha8Rng,
    results: Vec<SuiteResult>,
}

impl Runner {
    fn new(module: &'static str, seed: u64) -> Self {
        Self {
            module,
            seed,
            rng: ChaCha8Rng::seed_from_u64(seed),
            results: Vec::new(),
        }
    }

    fn case<F>(&mut self, name: &str, inputs: Vec<Tensor>, coords: Coords, f: F) -> Result<()>
    where
        F: Fn(&mut Graph, &[Var]) -> Result<Var>,
    {
        let seed = self.seed;
        let report = gradcheck_inputs(
            |g, v| {
                let y = f(g, v)?;
                if g.value(y).is_scalar() {
                    Ok(y)
                } else {
                    project(g, y, seed)
                }
            },
            &inputs,
            DEFAULT_STEP,
            coords,
        )?;
        self.results.push(SuiteResult {
            module: self.module,
            name: name.to_string(),
            report,
        });
        Ok(())
    }

    fn u(&mut self, shape: &[usize]) -> Tensor {
        uniform(&mut self.rng, shape)
    }

    fn nz(&mut self, shape: &[usize]) -> Tensor {
        away_from_zero(&mut self.rng, shape)
    }
}

fn tensor_suite(seed: u64) -> Result<Vec<SuiteResult>> {
    let mut r = Runner::new("tensor", seed);
    let all = Coords::All;
    let pairs = build_default_skeleton().pool_maps[0].pairs.clone();
    let mask = build_default_skeleton().scales[1].support_mask();

    let (a, b) = (r.u(&[3, 4]), r.u(&[4, 5]));
    r.case("matmul", vec![a, b], all, |g, v| g.matmul(v[0], v[1]))?;
    let a = r.u(&[3, 4]);
    r.case("transpose", vec![a], all, |g, v| g.transpose(v[0]))?;
    let a = r.u(&[2, 6]);
    r.case("reshape", vec![a], all, |g, v| g.reshape(v[0], &[3, 4]))?;
    let (a, b) = (r.u(&[2, 3, 4]), r.u(&[2, 3, 4]));
    r.case("add", vec![a, b], all, |g, v| g.add(v[0], v[1]))?;
    let (a, b) = (r.u(&[2, 3, 4]), r.u(&[4]));
    r.case("add_broadcast", vec![a, b], all, |g, v| g.add(v[0], v[1]))?;
    let (a, b) = (r.u(&[3, 4]), r.u(&[3, 4]));
    r.case("sub", vec![a, b], all, |g, v| g.sub(v[0], v[1]))?;
    let (a, b) = (r.u(&[3, 4]), r.u(&[3, 4]));
    r.case("multiply", vec![a, b], all, |g, v| g.mul(v[0], v[1]))?;
    let (a, b) = (r.u(&[2, 3, 4]), r.u(&[4]));
    r.case("multiply_broadcast", vec![a, b], all, |g, v| {
        g.mul(v[0], v[1])
    })?;
    let a = r.u(&[5]);
    r.case("scale", vec![a], all, |g, v| Ok(g.scale(v[0], -1.7)))?;
    let a = r.nz(&[4, 5]);
    r.case("relu", vec![a], all, |g, v| {
        g.elementwise(Elementwise::Relu, v)
    })?;
    let a = r.u(&[4, 5]);
    r.case("sigmoid", vec![a], all, |g, v| {
        g.elementwise(Elementwise::Sigmoid, v)
    })?;
    let a = r.u(&[2, 16, 3]);
    r.case("group_max", vec![a], all, |g, v| g.group_max(v[0], &pairs))?;
    let a = r.u(&[2, 8, 3]);
    r.case("duplicate_expand", vec![a], all, |g, v| {
        g.duplicate_expand(v[0], &pairs)
    })?;
    let (x, gain, bias) = (r.u(&[3, 4, 5]), r.u(&[5]), r.u(&[5]));
    r.case("batch_norm_train", vec![x, gain, bias], all, |g, v| {
        Ok(
            g.batch_norm(v[0], v[1], v[2], &RunningStats::identity(5), Mode::Train)?
                .0,
        )
    })?;
    let running = RunningStats {
        mean: (0..5).map(|i| i as f64 * 0.1).collect(),
        var: (0..5).map(|i| 0.5 + i as f64 * 0.2).collect(),
    };
    let (x, gain, bias) = (r.u(&[3, 4, 5]), r.u(&[5]), r.u(&[5]));
    r.case("batch_norm_infer", vec![x, gain, bias], all, |g, v| {
        Ok(g.batch_norm(v[0], v[1], v[2], &running, Mode::Infer)?.0)
    })?;
    let x = r.u(&[4, 6]);
    r.case("dropout", vec![x], all, |g, v| {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        g.dropout(v[0], 0.3, Mode::Train, &mut rng)
    })?;
    let (a, b) = (r.u(&[2, 4, 3]), r.u(&[2, 4, 2]));
    r.case("concat_channels", vec![a, b], all, |g, v| {
        g.concat_channels(v)
    })?;
    let a = r.u(&[2, 5, 3]);
    r.case("mean_over_nodes", vec![a], all, |g, v| {
        g.mean_over_nodes(v[0])
    })?;
    let a = r.u(&[2, 3]);
    r.case("expand_nodes", vec![a], all, |g, v| g.expand_nodes(v[0], 4))?;
    let (adj, x) = (r.u(&[4, 4]), r.u(&[2, 4, 3]));
    r.case("node_mix", vec![adj, x], all, |g, v| g.node_mix(v[0], v[1]))?;
    let (x, w) = (r.u(&[2, 4, 3]), r.u(&[4, 3, 2]));
    r.case("node_matmul", vec![x, w], all, |g, v| {
        g.node_matmul(v[0], v[1])
    })?;
    let logits = r.u(&[8, 8]);
    r.case("masked_softmax", vec![logits], all, |g, v| {
        g.masked_softmax(v[0], &mask)
    })?;
    let a = r.u(&[3, 4]);
    r.case("sum", vec![a], all, |g, v| Ok(g.sum(v[0])))?;
    let a = r.u(&[3, 4]);
    r.case("mean", vec![a], all, |g, v| Ok(g.mean(v[0])))?;
    let (p, t) = (r.u(&[2, 16, 3]), r.u(&[2, 16, 3]));
    r.case("mse_loss", vec![p, t], all, |g, v| mse_loss(g, v[0], v[1]))?;
    Ok(r.results)
}

fn layers_suite(seed: u64) -> Result<Vec<SuiteResult>> {
    let mut r = Runner::new("layers", seed);
    let all = Coords::All;
    let skeleton = build_default_skeleton();
    let scale = skeleton.scales[1].clone();
    let adj = scale.adjacency.clone();
    let mask = scale.support_mask();

    let (x, w, b) = (r.u(&[2, 8, 3]), r.u(&[3, 4]), r.u(&[4]));
    r.case("gconv_vanilla", vec![x, w, b], all, |g, v| {
        let a = g.constant(adj.clone());
        layers::gconv_vanilla(g, v[0], a, v[1], v[2])
    })?;
    let (x, m, w, b) = (r.u(&[2, 8, 3]), r.u(&[8, 8]), r.u(&[3, 4]), r.u(&[4]));
    r.case("gconv_semantic", vec![x, m, w, b], all, |g, v| {
        layers::gconv_semantic(g, v[0], &mask, v[1], v[2], v[3])
    })?;
    let (x, wn, ws, b) = (r.u(&[2, 8, 3]), r.u(&[8, 3, 4]), r.u(&[8, 3, 4]), r.u(&[4]));
    r.case("gconv_preaggr", vec![x, wn, ws, b], all, |g, v| {
        layers::gconv_preaggr(g, v[0], &adj, v[1], v[2], v[3])
    })?;
    let (x, w, b) = (r.u(&[2, 16, 4]), r.u(&[4, 3]), r.u(&[3]));
    r.case("node_linear", vec![x, w, b], all, |g, v| {
        layers::node_linear(g, v[0], v[1], v[2])
    })?;
    let (f, w1, w2) = (r.u(&[2, 16, 16]), r.u(&[2, 16]), r.u(&[16, 2]));
    r.case("se_block", vec![f, w1, w2], all, |g, v| {
        layers::se_block(g, v[0], v[1], v[2])
    })?;

    for kind in [ConvKind::Vanilla, ConvKind::Semantic, ConvKind::Preaggr] {
        let mut store = ParamStore::new();
        let block = ConvBlock::init(
            &mut store,
            &mut Initializer::new(seed),
            "blk",
            kind,
            skeleton.fine(),
            3,
            5,
            0.25,
        );
        let mut inputs = vec![r.u(&[3, 16, 3])];
        inputs.extend(store.values().iter().cloned());
        r.case(
            &format!("conv_block_{kind:?}").to_lowercase(),
            inputs,
            all,
            |g, v| {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let mut fwd =
                    Forward::with_params(g, v[1..].to_vec(), &store, Mode::Train, &mut rng);
                block.forward(&mut fwd, v[0])
            },
        )?;
    }
    Ok(r.results)
}

fn hourglass_suite(seed: u64) -> Result<Vec<SuiteResult>> {
    let mut r = Runner::new("hourglass", seed);
    let skeleton = build_default_skeleton();
    for kind in [ConvKind::Vanilla, ConvKind::Semantic, ConvKind::Preaggr] {
        let mut store = ParamStore::new();
        let hg = Hourglass::init(
            &mut store,
            &mut Initializer::new(seed),
            "hg",
            kind,
            ChannelLadder::for_channels(4),
            &skeleton,
            1,
            0.25,
        )?;
        let mut inputs = vec![r.u(&[2, 16, 4])];
        inputs.extend(store.values().iter().cloned());
        let coords = Coords::Sample {
            per_input: 16,
            seed,
        };
        r.case(
            &format!("hourglass_{kind:?}").to_lowercase(),
            inputs,
            coords,
            |g, v| {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let mut fwd =
                    Forward::with_params(g, v[1..].to_vec(), &store, Mode::Train, &mut rng);
                hg.forward(&mut fwd, v[0])
            },
        )?;
    }
    Ok(r.results)
}

fn network_suite(seed: u64) -> Result<Vec<SuiteResult>> {
    let mut r = Runner::new("network", seed);
    let skeleton = build_default_skeleton();
    let configs = [
        (
            "graphsh_mse",
            NetworkConfig {
                stacks: 2,
                channels: 8,
                ..NetworkConfig::default()
            },
        ),
        (
            "seqres_mse",
            NetworkConfig {
                seqres_depth: 2,
                seqres_channels: 8,
                ..NetworkConfig::seqres()
            },
        ),
    ];
    for (name, cfg) in configs {
        let model = Model::new(cfg, skeleton.clone(), seed)?;
        let target = r.u(&[2, 16, 3]);
        let mut inputs = vec![r.u(&[2, 16, 2])];
        inputs.extend(model.params.values().iter().cloned());
        let coords = Coords::Sample { per_input: 8, seed };
        r.case(name, inputs, coords, |g, v| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut fwd =
                Forward::with_params(g, v[1..].to_vec(), &model.params, Mode::Train, &mut rng);
            let out = model.forward(&mut fwd, v[0])?;
            let t = fwd.graph.constant(target.clone());
            mse_loss(fwd.graph, out.prediction, t)
        })?;
    }
    Ok(r.results)
}

/// Runs one module's suites (`tensor`, `layers`, `hourglass`, `network`) at `seed`.
pub fn run_module(module: &str, seed: u64) -> Result<Vec<SuiteResult>> {
    match module {
        "tensor" => tensor_suite(seed),
        "layers" => layers_suite(seed),
        "hourglass" => hourglass_suite(seed),
        "network" => network_suite(seed),
        other => Err(Error::Config(format!(
            "unknown gradcheck module `{other}` (expected one of {})",
            MODULES.join(", ")
        ))),
    }
}

pub fn run_all(seed: u64) -> Result<Vec<SuiteResult>> {
    let mut out = Vec::new();
    for m in MODULES {
        out.extend(run_module(m, seed)?);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_suite_passes_at_one_seed() {
        let results = run_all(0).unwrap();
        assert!(results.len() > 30);
        for r in &results {
            assert!(r.passed(), "{}::{} {:?}", r.module, r.name, r.report);
        }
    }

    #[test]
    fn unknown_module_is_rejected() {
        assert!(run_module("optimizer", 0).is_err());
    }
}
