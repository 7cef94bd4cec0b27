//! Loss, Adam, the step-decay schedule and the training loop.
//!
//! The training log is tab-separated with the header
//! `iter\tlr\tloss\tval_mpjpe`: one row per evaluation, where `loss` is the
//! mean training batch loss since the previous row and `val_mpjpe` is in
//! millimeters.

use std::io::Write;
use std::path::PathBuf;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Mode, Var};
use crate::data::{epoch_order, Normalizer, PoseDataset, PoseSample};
use crate::error::{Error, Result};
use crate::evaluation::evaluate;
use crate::model_io::{serialize_checkpoint, Checkpoint, SavedModel};
use crate::network::Model;
use crate::params::Forward;
use crate::tensor::Tensor;

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub decay_factor: f64,
    pub decay_every: u64,
    pub batch_size: usize,
    /// Required; 0 means unset.
    pub max_iterations: u64,
    pub seed: u64,
    pub eval_every: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-4,
            decay_factor: 0.92,
            decay_every: 20_000,
            batch_size: 256,
            max_iterations: 0,
            seed: 0,
            eval_every: 1000,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: &str| Err(Error::Config(m.into()));
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return fail("learning_rate must be positive");
        }
        if !(self.decay_factor > 0.0 && self.decay_factor <= 1.0) {
            return fail("decay_factor must be in (0, 1]");
        }
        if self.decay_every == 0 || self.batch_size == 0 || self.eval_every == 0 {
            return fail("decay_every, batch_size and eval_every must be positive");
        }
        if self.max_iterations == 0 {
            return fail("max_iterations must be set");
        }
        Ok(())
    }
}

/// `base * decay^floor(iteration / decay_every)`.
pub fn lr_at(iteration: u64, config: &TrainConfig) -> f64 {
    let steps = (iteration / config.decay_every) as i32;
    config.learning_rate * config.decay_factor.powi(steps)
}

/// Mean squared error over every entry.
pub fn mse_loss(g: &mut Graph, pred: Var, target: Var) -> Result<Var> {
    if g.shape(pred) != g.shape(target) {
        return Err(Error::shape(
            "mse_loss",
            format!(
                "prediction {:?} vs target {:?}",
                g.shape(pred),
                g.shape(target)
            ),
        ));
    }
    let d = g.sub(pred, target)?;
    let sq = g.mul(d, d)?;
    Ok(g.mean(sq))
}

#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub step: u64,
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
}

impl AdamState {
    pub fn new(params: &[Tensor]) -> Self {
        let zeros = || params.iter().map(|t| Tensor::zeros(t.shape())).collect();
        Self {
            step: 0,
            m: zeros(),
            v: zeros(),
        }
    }
}

/// One bias-corrected Adam update. Every gradient is checked before any
/// parameter changes.
pub fn adam_step(
    params: &mut [Tensor],
    grads: &[Tensor],
    names: &[String],
    state: &mut AdamState,
    lr: f64,
) -> Result<()> {
    if grads.len() != params.len() || state.m.len() != params.len() {
        return Err(Error::Contract(format!(
            "{} parameters, {} gradients, {} moment tensors",
            params.len(),
            grads.len(),
            state.m.len()
        )));
    }
    for (i, (p, g)) in params.iter().zip(grads).enumerate() {
        if p.shape() != g.shape() {
            return Err(Error::shape(
                "adam_step",
                format!("parameter {:?} vs gradient {:?}", p.shape(), g.shape()),
            ));
        }
        if !g.all_finite() {
            let name = names.get(i).cloned().unwrap_or_else(|| format!("#{i}"));
            return Err(Error::NonFiniteGradient(name));
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let c1 = 1.0 - ADAM_BETA1.powi(t);
    let c2 = 1.0 - ADAM_BETA2.powi(t);
    for ((p, g), (m, v)) in params
        .iter_mut()
        .zip(grads)
        .zip(state.m.iter_mut().zip(state.v.iter_mut()))
    {
        for (((pv, &gv), mv), vv) in p
            .data_mut()
            .iter_mut()
            .zip(g.data())
            .zip(m.data_mut())
            .zip(v.data_mut())
        {
            *mv = ADAM_BETA1 * *mv + (1.0 - ADAM_BETA1) * gv;
            *vv = ADAM_BETA2 * *vv + (1.0 - ADAM_BETA2) * gv * gv;
            let mhat = *mv / c1;
            let vhat = *vv / c2;
            *pv -= lr * mhat / (vhat.sqrt() + ADAM_EPS);
        }
    }
    Ok(())
}

/// Loss and parameter gradients for one batch in train mode. Batch-norm
/// running statistics of `model` are updated.
pub fn train_step_gradients(
    model: &mut Model,
    inputs: &Tensor,
    targets: &Tensor,
    rng: &mut ChaCha8Rng,
) -> Result<(f64, Vec<Tensor>)> {
    let mut graph = Graph::new();
    let (loss_var, params, updates) = {
        let mut fwd = Forward::new(&mut graph, &model.params, Mode::Train, rng);
        let x = fwd.graph.constant(inputs.clone());
        let y = fwd.graph.constant(targets.clone());
        let out = model.forward(&mut fwd, x)?;
        let loss = mse_loss(fwd.graph, out.prediction, y)?;
        let updates = fwd.take_running_updates();
        (loss, fwd.params().to_vec(), updates)
    };
    let loss = graph.value(loss_var).item();
    let grads = graph.backward(loss_var)?;
    let grads = params
        .iter()
        .map(|&p| grads.get_or_zeros(&graph, p))
        .collect();
    model.params.apply_running_updates(updates);
    Ok((loss, grads))
}

/// Infer-mode MSE over a whole dataset in standardized units.
pub fn dataset_loss(model: &Model, data: &PoseDataset, normalizer: &Normalizer) -> Result<f64> {
    let mut total = 0.0;
    let mut count = 0usize;
    for chunk in data.samples.chunks(256) {
        let refs: Vec<&PoseSample> = chunk.iter().collect();
        let pred = model.predict(&normalizer.inputs(&refs))?;
        let target = normalizer.targets(&refs);
        total += pred
            .data()
            .iter()
            .zip(target.data())
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>();
        count += pred.len();
    }
    Ok(total / count.max(1) as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HistoryEntry {
    pub iteration: u64,
    pub lr: f64,
    pub loss: f64,
    pub val_mpjpe: f64,
}

impl HistoryEntry {
    pub fn log_line(&self) -> String {
        format!(
            "{}\t{}\t{}\t{}",
            self.iteration, self.lr, self.loss, self.val_mpjpe
        )
    }
}

pub const LOG_HEADER: &str = "iter\tlr\tloss\tval_mpjpe";

#[derive(Default)]
pub struct TrainOptions<'a> {
    /// Written whenever validation MPJPE improves.
    pub checkpoint_path: Option<PathBuf>,
    pub log: Option<&'a mut dyn Write>,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    /// Parameters after the last iteration.
    pub model: Model,
    pub history: Vec<HistoryEntry>,
    /// State at the best validation MPJPE.
    pub best: Checkpoint,
}

/// Trains `model` on `train_set`, validating on `val_set` every
/// `config.eval_every` iterations.
pub fn train(
    mut model: Model,
    train_set: &PoseDataset,
    val_set: &PoseDataset,
    normalizer: &Normalizer,
    config: &TrainConfig,
    mut options: TrainOptions<'_>,
) -> Result<TrainOutcome> {
    config.validate()?;
    if train_set.is_empty() {
        return Err(Error::Validation("training set is empty".into()));
    }
    if val_set.is_empty() {
        return Err(Error::Validation("validation set is empty".into()));
    }
    let mut adam = AdamState::new(model.params.values());
    let names = model.params.names().to_vec();
    let mut dropout_rng = ChaCha8Rng::seed_from_u64(config.seed);
    dropout_rng.set_stream(u64::MAX);

    if let Some(log) = options.log.as_deref_mut() {
        writeln!(log, "{LOG_HEADER}")?;
    }

    let mut history = Vec::new();
    let mut best: Option<Checkpoint> = None;
    let mut window_loss = 0.0;
    let mut window_len = 0u64;
    let mut iteration = 0u64;
    let mut epoch = 0u64;
    'outer: loop {
        let order = epoch_order(train_set.len(), config.seed, epoch);
        epoch += 1;
        for batch in order.chunks(config.batch_size) {
            if iteration == config.max_iterations {
                break 'outer;
            }
            let refs: Vec<&PoseSample> = batch.iter().map(|&i| &train_set.samples[i]).collect();
            let (loss, grads) = train_step_gradients(
                &mut model,
                &normalizer.inputs(&refs),
                &normalizer.targets(&refs),
                &mut dropout_rng,
            )?;
            if !loss.is_finite() {
                return Err(Error::NonFiniteLoss {
                    iteration: iteration as usize,
                });
            }
            let lr = lr_at(iteration, config);
            adam_step(model.params.values_mut(), &grads, &names, &mut adam, lr)?;
            iteration += 1;
            window_loss += loss;
            window_len += 1;

            if iteration.is_multiple_of(config.eval_every) {
                let report = evaluate(&model, val_set, Some(normalizer))?;
                let entry = HistoryEntry {
                    iteration,
                    lr,
                    loss: window_loss / window_len as f64,
                    val_mpjpe: report.overall_mpjpe_mm,
                };
                window_loss = 0.0;
                window_len = 0;
                if let Some(log) = options.log.as_deref_mut() {
                    writeln!(log, "{}", entry.log_line())?;
                }
                let improved = best
                    .as_ref()
                    .is_none_or(|b| entry.val_mpjpe < b.best_val_mpjpe);
                if improved {
                    let ckpt = Checkpoint {
                        saved: SavedModel {
                            model: model.clone(),
                            normalizer: Some(normalizer.clone()),
                        },
                        adam: adam.clone(),
                        iteration,
                        best_val_mpjpe: entry.val_mpjpe,
                    };
                    if let Some(path) = &options.checkpoint_path {
                        std::fs::write(path, serialize_checkpoint(&ckpt))?;
                    }
                    best = Some(ckpt);
                }
                history.push(entry);
            }
        }
    }

    // fewer iterations than eval_every: keep the final state as "best"
    let best = match best {
        Some(b) => b,
        None => {
            let report = evaluate(&model, val_set, Some(normalizer))?;
            let ckpt = Checkpoint {
                saved: SavedModel {
                    model: model.clone(),
                    normalizer: Some(normalizer.clone()),
                },
                adam: adam.clone(),
                iteration,
                best_val_mpjpe: report.overall_mpjpe_mm,
            };
            if let Some(path) = &options.checkpoint_path {
                std::fs::write(path, serialize_checkpoint(&ckpt))?;
            }
            ckpt
        }
    };
    Ok(TrainOutcome {
        model,
        history,
        best,
    })
}

#[cfg(test)]
mod tests {
    use rand::Rng;

    use super::*;
    use crate::gradcheck::{gradcheck_inputs, Coords, DEFAULT_STEP};
    use crate::layers::ConvKind;
    use crate::network::NetworkConfig;
    use crate::skeleton::build_default_skeleton;
    use crate::synth::{synth_generate, Camera};

    fn tiny_model(seed: u64) -> Model {
        let cfg = NetworkConfig {
            stacks: 1,
            channels: 8,
            conv_kind: ConvKind::Vanilla,
            ..NetworkConfig::default()
        };
        Model::new(cfg, build_default_skeleton(), seed).unwrap()
    }

    #[test]
    fn mse_values() {
        let mut g = Graph::new();
        let t = Tensor::from_fn(&[2, 16, 3], |i| i as f64 * 0.1);
        let a = g.constant(t.clone());
        let b = g.constant(t.clone());
        let l = mse_loss(&mut g, a, b).unwrap();
        assert_eq!(g.value(l).item(), 0.0);
        let c = g.constant(Tensor::from_fn(&[2, 16, 3], |i| i as f64 * 0.1 + 1.0));
        let l = mse_loss(&mut g, c, b).unwrap();
        assert!((g.value(l).item() - 1.0).abs() < 1e-12);
        let d = g.constant(Tensor::zeros(&[2, 16, 2]));
        assert!(mse_loss(&mut g, d, b).is_err());
    }

    #[test]
    fn mse_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let p = Tensor::from_fn(&[2, 16, 3], |_| rng.gen_range(-1.0..1.0));
        let t = Tensor::from_fn(&[2, 16, 3], |_| rng.gen_range(-1.0..1.0));
        let mut g = Graph::new();
        let pv = g.param(p.clone());
        let tv = g.constant(t.clone());
        let l = mse_loss(&mut g, pv, tv).unwrap();
        let grad = g.backward(l).unwrap().get_or_zeros(&g, pv);
        for ((gv, a), b) in grad.data().iter().zip(p.data()).zip(t.data()) {
            assert!((gv - 2.0 * (a - b) / 96.0).abs() < 1e-15);
        }
        let r = gradcheck_inputs(
            |g, v| mse_loss(g, v[0], v[1]),
            &[p, t],
            DEFAULT_STEP,
            Coords::All,
        )
        .unwrap();
        assert!(r.max_rel_error < 1e-6);
    }

    #[test]
    fn schedule() {
        let c = TrainConfig::default();
        assert_eq!(lr_at(0, &c), 1e-4);
        assert_eq!(lr_at(19_999, &c), 1e-4);
        assert!((lr_at(20_000, &c) - 9.2e-5).abs() < 1e-18);
        assert!((lr_at(45_000, &c) - 1e-4 * 0.92 * 0.92).abs() < 1e-18);
    }

    #[test]
    fn adam_zero_gradient_and_first_step() {
        let mut p = vec![Tensor::full(&[3], 2.0)];
        let mut s = AdamState::new(&p);
        s.m[0] = Tensor::full(&[3], 0.5);
        s.v[0] = Tensor::full(&[3], 0.25);
        let names = vec!["w".to_string()];
        adam_step(&mut p, &[Tensor::zeros(&[3])], &names, &mut s, 1e-3).unwrap();
        assert!(s.m[0].data().iter().all(|v| (*v - 0.45).abs() < 1e-15));
        assert!(s.v[0].data().iter().all(|v| (*v - 0.24975).abs() < 1e-15));

        let mut p = vec![Tensor::scalar(1.0)];
        let mut s = AdamState::new(&p);
        adam_step(&mut p, &[Tensor::scalar(-3.7)], &names, &mut s, 1e-3).unwrap();
        assert!((p[0].item() - (1.0 + 1e-3)).abs() < 1e-10);
        assert_eq!(s.step, 1);

        let mut p = vec![Tensor::scalar(1.0)];
        let mut s = AdamState::new(&p);
        adam_step(&mut p, &[Tensor::zeros(&[1])], &names, &mut s, 1e-3).unwrap();
        assert_eq!(p[0].item(), 1.0);
    }

    #[test]
    fn adam_rejects_non_finite_gradient_by_name() {
        let mut p = vec![Tensor::scalar(1.0), Tensor::scalar(2.0)];
        let mut s = AdamState::new(&p);
        let names = vec!["a".to_string(), "layer.weight".to_string()];
        let err = adam_step(
            &mut p,
            &[Tensor::scalar(1.0), Tensor::scalar(f64::INFINITY)],
            &names,
            &mut s,
            1e-3,
        )
        .unwrap_err();
        assert!(matches!(err, Error::NonFiniteGradient(ref n) if n == "layer.weight"));
        assert_eq!(p[0].item(), 1.0);
        assert_eq!(s.step, 0);
    }

    #[test]
    fn tiny_lr_descends_on_a_fixed_batch() {
        let data = synth_generate(16, 0, Camera::default()).unwrap().dataset;
        let norm = Normalizer::fit(&data).unwrap();
        let refs: Vec<&PoseSample> = data.samples.iter().collect();
        let (x, y) = (norm.inputs(&refs), norm.targets(&refs));
        let cfg = NetworkConfig {
            dropout: 0.0,
            ..tiny_model(1).config
        };
        let mut model = Model::new(cfg, build_default_skeleton(), 1).unwrap();
        let mut adam = AdamState::new(model.params.values());
        let names = model.params.names().to_vec();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut prev = f64::INFINITY;
        for _ in 0..10 {
            let (loss, grads) = train_step_gradients(&mut model, &x, &y, &mut rng).unwrap();
            assert!(loss <= prev + 1e-12, "{loss} > {prev}");
            prev = loss;
            adam_step(model.params.values_mut(), &grads, &names, &mut adam, 1e-7).unwrap();
        }
    }

    #[test]
    fn train_history_and_determinism() {
        let data = synth_generate(24, 1, Camera::default()).unwrap().dataset;
        let (tr, va) = (
            data.subset(&(0..16).collect::<Vec<_>>()),
            data.subset(&(16..24).collect::<Vec<_>>()),
        );
        let norm = Normalizer::fit(&tr).unwrap();
        let cfg = TrainConfig {
            batch_size: 8,
            max_iterations: 25,
            eval_every: 10,
            learning_rate: 1e-3,
            ..TrainConfig::default()
        };
        let run = || {
            let mut log = Vec::new();
            let out = train(
                tiny_model(2),
                &tr,
                &va,
                &norm,
                &cfg,
                TrainOptions {
                    checkpoint_path: None,
                    log: Some(&mut log),
                },
            )
            .unwrap();
            (out, log)
        };
        let (a, log_a) = run();
        let (b, log_b) = run();
        assert_eq!(a.history.len(), 2);
        assert!(a.history[0].loss.is_finite() && a.history[0].loss > 0.0);
        assert_eq!(log_a, log_b);
        assert_eq!(serialize_checkpoint(&a.best), serialize_checkpoint(&b.best));
        assert_eq!(a.model, b.model);
        let text = String::from_utf8(log_a).unwrap();
        assert!(text.starts_with(LOG_HEADER));
        assert_eq!(text.lines().count(), 3);
    }

    #[test]
    fn empty_training_set_is_rejected() {
        let data = synth_generate(4, 1, Camera::default()).unwrap().dataset;
        let norm = Normalizer::fit(&data).unwrap();
        let cfg = TrainConfig {
            max_iterations: 1,
            ..TrainConfig::default()
        };
        let err = train(
            tiny_model(0),
            &PoseDataset::default(),
            &data,
            &norm,
            &cfg,
            TrainOptions::default(),
        );
        assert!(matches!(err, Err(Error::Validation(_))));
        let unset = TrainConfig::default();
        let err = train(
            tiny_model(0),
            &data,
            &data,
            &norm,
            &unset,
            TrainOptions::default(),
        );
        assert!(matches!(err, Err(Error::Config(_))));
    }

    #[test]
    fn evaluation_does_not_mutate() {
        let data = synth_generate(8, 1, Camera::default()).unwrap().dataset;
        let norm = Normalizer::fit(&data).unwrap();
        let model = tiny_model(3);
        let before = model.clone();
        evaluate(&model, &data, Some(&norm)).unwrap();
        dataset_loss(&model, &data, &norm).unwrap();
        assert_eq!(model, before);
    }
}
