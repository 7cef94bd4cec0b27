//! Shared fixtures for the criterion benches.

use graphsh::data::{Normalizer, PoseSample};
use graphsh::network::{Model, NetworkConfig};
use graphsh::skeleton::build_default_skeleton;
use graphsh::synth::{synth_generate, Camera};
use graphsh::Tensor;

/// A model plus one standardized batch of synthetic inputs and targets.
pub struct Fixture {
    pub model: Model,
    pub inputs: Tensor,
    pub targets: Tensor,
}

pub fn fixture(config: NetworkConfig, batch: usize) -> Fixture {
    let data = synth_generate(batch, 0, Camera::default())
        .expect("synthetic data")
        .dataset;
    let norm = Normalizer::fit(&data).expect("normalizer");
    let refs: Vec<&PoseSample> = data.samples.iter().collect();
    Fixture {
        model: Model::new(config, build_default_skeleton(), 0).expect("valid config"),
        inputs: norm.inputs(&refs),
        targets: norm.targets(&refs),
    }
}

/// Named configurations: a reduced GraphSH, the default GraphSH and the
/// default SeqRes.
pub fn configs() -> Vec<(&'static str, NetworkConfig)> {
    vec![
        (
            "graphsh_n2_c32",
            NetworkConfig {
                stacks: 2,
                channels: 32,
                ..NetworkConfig::default()
            },
        ),
        ("graphsh_default", NetworkConfig::default()),
        ("seqres_default", NetworkConfig::seqres()),
    ]
}
