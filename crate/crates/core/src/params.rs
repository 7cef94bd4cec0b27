//! Parameter storage, initialization and per-forward binding.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autograd::{Graph, Mode, RunningStats, Var};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct BufferId(usize);

/// Learnable tensors in declaration order, plus batch-norm running statistics
/// (which are state, not parameters).
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    values: Vec<Tensor>,
    running: Vec<RunningStats>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> ParamId {
        self.names.push(name.into());
        self.values.push(value);
        ParamId(self.values.len() - 1)
    }

    pub fn add_running(&mut self, channels: usize) -> BufferId {
        self.running.push(RunningStats::identity(channels));
        BufferId(self.running.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.values[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.values[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.values.len()).map(ParamId)
    }

    pub fn values(&self) -> &[Tensor] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [Tensor] {
        &mut self.values
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn running(&self, id: BufferId) -> &RunningStats {
        &self.running[id.0]
    }

    pub fn running_all(&self) -> &[RunningStats] {
        &self.running
    }

    pub fn running_all_mut(&mut self) -> &mut [RunningStats] {
        &mut self.running
    }

    /// Number of scalar learnable parameters.
    pub fn count_scalars(&self) -> usize {
        self.values.iter().map(Tensor::len).sum()
    }

    pub fn apply_running_updates(&mut self, updates: Vec<(BufferId, RunningStats)>) {
        for (id, stats) in updates {
            self.running[id.0] = stats;
        }
    }
}

/// Draws initial values. Weights are uniform in `+-sqrt(6 / (fan_in + fan_out))`.
pub struct Initializer {
    rng: ChaCha8Rng,
    zero: bool,
}

impl Initializer {
    pub fn new(seed: u64) -> Self {
        Self {
            rng: ChaCha8Rng::seed_from_u64(seed),
            zero: false,
        }
    }

    /// Every weight zero (gains included); for structural tests.
    pub fn zeros() -> Self {
        Self {
            rng: ChaCha8Rng::seed_from_u64(0),
            zero: true,
        }
    }

    pub fn weight(&mut self, shape: &[usize], fan_in: usize, fan_out: usize) -> Tensor {
        if self.zero {
            return Tensor::zeros(shape);
        }
        let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
        let rng = &mut self.rng;
        Tensor::from_fn(shape, |_| rng.gen_range(-bound..bound))
    }

    pub fn constant(&mut self, shape: &[usize], value: f64) -> Tensor {
        if self.zero {
            Tensor::zeros(shape)
        } else {
            Tensor::full(shape, value)
        }
    }
}

/// State for one forward pass: the graph, parameter leaves, mode and dropout RNG.
pub struct Forward<'a> {
    pub graph: &'a mut Graph,
    params: Vec<Var>,
    store: &'a ParamStore,
    pub mode: Mode,
    rng: &'a mut ChaCha8Rng,
    running_updates: Vec<(BufferId, RunningStats)>,
    node_trace: Vec<usize>,
}

impl<'a> Forward<'a> {
    /// Binds every parameter of `store` as a gradient-requiring leaf.
    pub fn new(
        graph: &'a mut Graph,
        store: &'a ParamStore,
        mode: Mode,
        rng: &'a mut ChaCha8Rng,
    ) -> Self {
        let params = store
            .values
            .iter()
            .map(|t| graph.param(t.clone()))
            .collect();
        Self::with_params(graph, params, store, mode, rng)
    }

    /// Uses caller-provided leaves (one per parameter, in store order).
    pub fn with_params(
        graph: &'a mut Graph,
        params: Vec<Var>,
        store: &'a ParamStore,
        mode: Mode,
        rng: &'a mut ChaCha8Rng,
    ) -> Self {
        assert_eq!(params.len(), store.len(), "one leaf per parameter");
        Self {
            graph,
            params,
            store,
            mode,
            rng,
            running_updates: Vec::new(),
            node_trace: Vec::new(),
        }
    }

    pub fn param(&self, id: ParamId) -> Var {
        self.params[id.0]
    }

    pub fn params(&self) -> &[Var] {
        &self.params
    }

    pub fn running(&self, id: BufferId) -> &RunningStats {
        self.store.running(id)
    }

    pub fn rng(&mut self) -> &mut ChaCha8Rng {
        self.rng
    }

    /// Inverted dropout with this pass's mode and RNG.
    pub fn dropout(&mut self, x: Var, p: f64) -> crate::Result<Var> {
        self.graph.dropout(x, p, self.mode, &mut *self.rng)
    }

    pub(crate) fn push_running_update(&mut self, id: BufferId, stats: RunningStats) {
        self.running_updates.push((id, stats));
    }

    pub fn take_running_updates(&mut self) -> Vec<(BufferId, RunningStats)> {
        std::mem::take(&mut self.running_updates)
    }

    pub(crate) fn trace_nodes(&mut self, nodes: usize) {
        self.node_trace.push(nodes);
    }

    /// Node counts seen by successive hourglass stages.
    pub fn node_trace(&self) -> &[usize] {
        &self.node_trace
    }

    pub fn value(&self, v: Var) -> &Tensor {
        self.graph.value(v)
    }
}
