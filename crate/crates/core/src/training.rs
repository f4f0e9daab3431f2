//! Losses for soft and hard attention, Adam, and the epoch loop.

use std::fmt::Write as _;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{NodeId, ParamStore, Tape};
use crate::data::{EvalView, TrainingSample, TrainingView};
use crate::error::{Result, SdcError};
use crate::fcam::{AttentionMode, FcamModel};
use crate::metrics::{self, EvalRecord};
use crate::par::Execution;
use crate::tensor::Tensor;

pub const DEFAULT_LEARNING_RATE: f64 = 0.0005;
pub const DEFAULT_BATCH_SIZE: usize = 32;

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub learning_rate: f64,
    /// Weight of the mean attention entropy added to the loss.
    pub lambda: f64,
    /// `None` trains on the full training set each step.
    pub batch_size: Option<usize>,
    pub epochs: usize,
    /// Drives minibatch shuffling.
    pub seed: u64,
    /// Evaluate every this many epochs; the last epoch is always evaluated.
    pub log_every: usize,
    pub exec: Execution,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: DEFAULT_LEARNING_RATE,
            lambda: 0.0,
            batch_size: Some(DEFAULT_BATCH_SIZE),
            epochs: 200,
            seed: 0,
            log_every: 1,
            exec: Execution::Parallel,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !self.learning_rate.is_finite() || self.learning_rate <= 0.0 {
            return Err(SdcError::Config(format!(
                "learning rate must be positive, got {}",
                self.learning_rate
            )));
        }
        if !self.lambda.is_finite() || self.lambda < 0.0 {
            return Err(SdcError::Config(format!("lambda must be non-negative, got {}", self.lambda)));
        }
        if self.epochs < 1 {
            return Err(SdcError::Config("epochs must be at least 1".into()));
        }
        if self.batch_size == Some(0) {
            return Err(SdcError::Config("batch size must be at least 1".into()));
        }
        if self.log_every < 1 {
            return Err(SdcError::Config("log_every must be at least 1".into()));
        }
        Ok(())
    }
}

/// A recorded batch loss.
#[derive(Debug)]
pub struct BatchLoss {
    pub tape: Tape,
    pub loss: NodeId,
    /// `[batch, m]` attention weights.
    pub alpha: NodeId,
    /// Rows pushed through the classification network.
    pub classifier_rows: usize,
}

fn batch_inputs(model: &FcamModel, batch: &[TrainingSample<'_>]) -> Result<(Tensor, usize)> {
    let d = model.segment_dim();
    let first = batch
        .first()
        .ok_or_else(|| SdcError::Contract("loss of an empty batch".into()))?;
    let m = first.segments.len() / d;
    let mut flat = Vec::with_capacity(batch.len() * m * d);
    for s in batch {
        if s.segments.len() != m * d || m == 0 {
            return Err(SdcError::Dimension {
                op: "batch",
                left: vec![m * d],
                right: vec![s.segments.len()],
            });
        }
        if s.label >= model.num_classes() {
            return Err(SdcError::Index {
                what: "label",
                index: s.label,
                len: model.num_classes(),
            });
        }
        flat.extend_from_slice(s.segments);
    }
    Ok((Tensor::new(vec![batch.len() * m, d], flat)?, m))
}

fn add_entropy(tape: &mut Tape, loss: NodeId, alpha: NodeId, lambda: f64) -> Result<NodeId> {
    if lambda == 0.0 {
        return Ok(loss);
    }
    let ent = tape.entropy(alpha)?;
    let ent = tape.mean(ent)?;
    let ent = tape.scale(ent, lambda)?;
    tape.add(loss, ent)
}

/// Mean over the batch of `CE(g(sum_j alpha_j phi(x_j)), y) + lambda * Ent(alpha)`.
pub fn loss_soft(model: &FcamModel, params: &ParamStore, batch: &[TrainingSample<'_>], lambda: f64) -> Result<BatchLoss> {
    let (x, m) = batch_inputs(model, batch)?;
    let n = batch.len();
    let mut tape = Tape::new();
    let x = tape.input(x);
    let focus = model.record_focus(&mut tape, x, params)?;
    let alpha = model.record_attention(&mut tape, focus.scores, n, m)?;
    let attended = tape.weighted_sum(alpha, focus.features)?;
    let logits = model.record_classify(&mut tape, attended, params)?;
    let labels: Vec<usize> = batch.iter().map(|s| s.label).collect();
    let ce = tape.cross_entropy(logits, &labels)?;
    let ce = tape.mean(ce)?;
    let loss = add_entropy(&mut tape, ce, alpha, lambda)?;
    Ok(BatchLoss {
        tape,
        loss,
        alpha,
        classifier_rows: n,
    })
}

/// Mean over the batch of `sum_j alpha_j CE(g(phi(x_j)), y)`, plus the
/// entropy term when `lambda > 0`.
///
/// The focus network receives gradient only through the weights `alpha_j`;
/// segment features reach `g` as constants.
pub fn loss_hard(model: &FcamModel, params: &ParamStore, batch: &[TrainingSample<'_>], lambda: f64) -> Result<BatchLoss> {
    let (x, m) = batch_inputs(model, batch)?;
    let n = batch.len();
    let mut tape = Tape::new();
    let x = tape.input(x);
    let focus = model.record_focus(&mut tape, x, params)?;
    let alpha = model.record_attention(&mut tape, focus.scores, n, m)?;
    let features = if focus.features == x {
        x
    } else {
        let detached = tape.value(focus.features).clone();
        tape.input(detached)
    };
    let logits = model.record_classify(&mut tape, features, params)?;
    let labels: Vec<usize> = batch.iter().flat_map(|s| std::iter::repeat_n(s.label, m)).collect();
    let ce = tape.cross_entropy(logits, &labels)?;
    let ce = tape.reshape(ce, vec![n, m])?;
    let weighted = tape.mul(alpha, ce)?;
    let total = tape.sum(weighted)?;
    let loss = tape.scale(total, 1.0 / n as f64)?;
    let loss = add_entropy(&mut tape, loss, alpha, lambda)?;
    Ok(BatchLoss {
        tape,
        loss,
        alpha,
        classifier_rows: n * m,
    })
}

/// The loss matching the model's attention mode.
pub fn batch_loss(model: &FcamModel, params: &ParamStore, batch: &[TrainingSample<'_>], lambda: f64) -> Result<BatchLoss> {
    match model.config().mode {
        AttentionMode::Soft => loss_soft(model, params, batch, lambda),
        AttentionMode::Hard => loss_hard(model, params, batch, lambda),
    }
}

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPSILON: f64 = 1e-8;

#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    step: u64,
    first: Vec<Tensor>,
    second: Vec<Tensor>,
}

impl AdamState {
    pub fn new(params: &ParamStore) -> Self {
        let zeros: Vec<Tensor> = params.ids().map(|id| Tensor::zeros(params.value(id).shape())).collect();
        AdamState {
            beta1: ADAM_BETA1,
            beta2: ADAM_BETA2,
            epsilon: ADAM_EPSILON,
            step: 0,
            first: zeros.clone(),
            second: zeros,
        }
    }

    pub fn step(&self) -> u64 {
        self.step
    }
}

/// One bias-corrected Adam update from the accumulated gradients. Nothing is
/// modified if any gradient entry is non-finite.
pub fn adam_step(params: &mut ParamStore, state: &mut AdamState, lr: f64) -> Result<()> {
    if state.first.len() != params.len() {
        return Err(SdcError::Contract(format!(
            "optimizer tracks {} parameters, store has {}",
            state.first.len(),
            params.len()
        )));
    }
    for id in params.ids() {
        if let Some(i) = params.grad(id).data().iter().position(|g| !g.is_finite()) {
            return Err(SdcError::NonFinite {
                location: format!("gradient of {}[{i}] at step {}", params.name(id), state.step + 1),
            });
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let (b1, b2, eps) = (state.beta1, state.beta2, state.epsilon);
    let c1 = 1.0 - b1.powi(t);
    let c2 = 1.0 - b2.powi(t);
    let ids: Vec<_> = params.ids().collect();
    for id in ids {
        let (value, grad) = params.value_and_grad_mut(id);
        let m = state.first[id.index()].data_mut();
        let v = state.second[id.index()].data_mut();
        for (((theta, g), m), v) in value.data_mut().iter_mut().zip(grad.data()).zip(m).zip(v) {
            *m = b1 * *m + (1.0 - b1) * g;
            *v = b2 * *v + (1.0 - b2) * g * g;
            *theta -= lr * (*m / c1) / ((*v / c2).sqrt() + eps);
        }
    }
    Ok(())
}

/// Per-epoch training dynamics.
#[derive(Clone, Debug, PartialEq)]
pub struct DynamicsRecord {
    pub epoch: usize,
    pub train_acc: f64,
    pub test_acc: f64,
    pub ft: f64,
    pub ftpt: f64,
    pub ffpt: f64,
    pub ftpf: f64,
    pub ffpf: f64,
    /// Mean training loss over the epoch.
    pub loss: f64,
}

pub const DYNAMICS_HEADER: &str = "epoch,train_acc,test_acc,ft,ftpt,ffpt,ftpf,ffpf,loss";

#[derive(Clone, Debug, Default, PartialEq)]
pub struct DynamicsLog {
    pub records: Vec<DynamicsRecord>,
}

impl DynamicsLog {
    pub fn last(&self) -> Option<&DynamicsRecord> {
        self.records.last()
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from(DYNAMICS_HEADER);
        out.push('\n');
        for r in &self.records {
            let _ = writeln!(
                out,
                "{},{},{},{},{},{},{},{},{}",
                r.epoch, r.train_acc, r.test_acc, r.ft, r.ftpt, r.ffpt, r.ftpf, r.ffpf, r.loss
            );
        }
        out
    }

    pub fn from_csv(text: &str) -> Result<Self> {
        let mut lines = text.lines();
        match lines.next() {
            Some(h) if h.trim() == DYNAMICS_HEADER => {}
            other => {
                return Err(SdcError::Schema(format!(
                    "dynamics header {other:?} does not match {DYNAMICS_HEADER:?}"
                )))
            }
        }
        let mut records = Vec::new();
        for (i, line) in lines.enumerate().filter(|(_, l)| !l.trim().is_empty()) {
            let bad = || SdcError::Schema(format!("dynamics row {} is malformed: {line:?}", i + 1));
            let fields: Vec<&str> = line.split(',').collect();
            if fields.len() != 9 {
                return Err(bad());
            }
            let f = |k: usize| fields[k].trim().parse::<f64>().map_err(|_| bad());
            records.push(DynamicsRecord {
                epoch: fields[0].trim().parse().map_err(|_| bad())?,
                train_acc: f(1)?,
                test_acc: f(2)?,
                ft: f(3)?,
                ftpt: f(4)?,
                ffpt: f(5)?,
                ftpf: f(6)?,
                ffpf: f(7)?,
                loss: f(8)?,
            });
        }
        Ok(DynamicsLog { records })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_csv()).map_err(|e| SdcError::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| SdcError::io(path, e))?;
        DynamicsLog::from_csv(&text)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainOutcome {
    pub log: DynamicsLog,
    /// Evaluation of `monitor` after the final epoch.
    pub final_records: Vec<EvalRecord>,
    pub steps: u64,
    /// Instances seen by the optimizer, summed over epochs.
    pub instances_seen: u64,
    /// Classification-network rows evaluated by the loss.
    pub classifier_evals: u64,
}

fn check_dims(model: &FcamModel, what: &str, d: usize, k: usize) -> Result<()> {
    if d != model.segment_dim() || k != model.num_classes() {
        return Err(SdcError::Config(format!(
            "{what} has d={d}, k={k} but the model expects d={}, k={}",
            model.segment_dim(),
            model.num_classes()
        )));
    }
    Ok(())
}

fn training_accuracy(model: &FcamModel, view: &TrainingView<'_>, exec: Execution) -> Result<f64> {
    let segments: Vec<&[f64]> = view.iter().map(|s| s.segments).collect();
    let inferences = model.infer_many(&segments, exec)?;
    let correct = inferences
        .iter()
        .zip(view.iter())
        .filter(|(inf, s)| inf.predicted() == s.label)
        .count();
    Ok(correct as f64 / view.len() as f64)
}

/// Trains `model` in place with Adam. The optimizer only ever sees
/// `train`; `monitor` is evaluated between epochs to fill the log.
pub fn train(
    model: &mut FcamModel,
    train: TrainingView<'_>,
    monitor: EvalView<'_>,
    config: &TrainConfig,
) -> Result<TrainOutcome> {
    config.validate()?;
    check_dims(model, "training data", train.dims().d, train.dims().k)?;
    check_dims(model, "monitor data", monitor.dims().d, monitor.dims().k)?;
    if train.is_empty() || monitor.is_empty() {
        return Err(SdcError::Config("training and monitor sets must be non-empty".into()));
    }

    let batch_size = config.batch_size.unwrap_or(train.len()).min(train.len());
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut adam = AdamState::new(model.params());
    let mut log = DynamicsLog::default();
    let mut outcome_records = Vec::new();
    let (mut instances_seen, mut classifier_evals) = (0u64, 0u64);

    for epoch in 1..=config.epochs {
        if batch_size < train.len() {
            order.shuffle(&mut rng);
        }
        let mut loss_sum = 0.0;
        for chunk in order.chunks(batch_size) {
            let batch: Vec<TrainingSample<'_>> = chunk.iter().map(|&i| train.get(i)).collect();
            let recorded = batch_loss(model, model.params(), &batch, config.lambda)?;
            let loss = recorded.tape.value(recorded.loss).item();
            if !loss.is_finite() {
                return Err(SdcError::NonFinite {
                    location: format!("loss at epoch {epoch}, step {}", adam.step() + 1),
                });
            }
            loss_sum += loss * batch.len() as f64;
            instances_seen += batch.len() as u64;
            classifier_evals += recorded.classifier_rows as u64;
            let params = model.params_mut();
            params.zero_grads();
            recorded.tape.backward(recorded.loss, params)?;
            adam_step(params, &mut adam, config.learning_rate)?;
        }

        if epoch % config.log_every == 0 || epoch == config.epochs {
            let records = metrics::evaluate(model, &monitor, config.exec)?;
            let q = metrics::quadrants(&records)?;
            log.records.push(DynamicsRecord {
                epoch,
                train_acc: training_accuracy(model, &train, config.exec)?,
                test_acc: metrics::accuracy(&records)?,
                ft: metrics::ft(&records)?,
                ftpt: q.ftpt,
                ffpt: q.ffpt,
                ftpf: q.ftpf,
                ffpf: q.ffpf,
                loss: loss_sum / train.len() as f64,
            });
            if epoch == config.epochs {
                outcome_records = records;
            }
        }
    }
    Ok(TrainOutcome {
        log,
        final_records: outcome_records,
        steps: adam.step(),
        instances_seen,
        classifier_evals,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::attention::{entropy, ActivationKind};
    use crate::autodiff::{grad_check, grad_check_where};
    use crate::data::presets::Preset;
    use crate::data::{make_dataset, Split};
    use crate::fcam::{FcamConfig, NetworkSpec, Nonlinearity};
    use proptest::prelude::*;
    use rand::Rng;

    fn config(activation: ActivationKind, layer: usize, mode: AttentionMode) -> FcamConfig {
        let focus = NetworkSpec::new(vec![2, 6, 5, 1], Nonlinearity::Tanh);
        let width = [2, 6, 5][layer];
        FcamConfig {
            focus,
            classify: NetworkSpec::new(vec![width, 4, 3], Nonlinearity::Tanh),
            activation,
            averaging_layer: layer,
            mode,
        }
    }

    fn random_batch(rng: &mut ChaCha8Rng, n: usize, m: usize) -> Vec<(Vec<f64>, usize)> {
        (0..n)
            .map(|_| {
                let segs = (0..m * 2).map(|_| rng.random_range(-2.0..2.0)).collect();
                (segs, rng.random_range(0..3))
            })
            .collect()
    }

    fn samples(raw: &[(Vec<f64>, usize)]) -> Vec<TrainingSample<'_>> {
        raw.iter()
            .map(|(s, y)| TrainingSample {
                segments: s,
                label: *y,
            })
            .collect()
    }

    fn cross_entropy(probs: &[f64], y: usize) -> f64 {
        -probs[y].ln()
    }

    #[test]
    fn soft_loss_with_zero_lambda_is_cross_entropy() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let model = FcamModel::new(config(ActivationKind::Softmax, 1, AttentionMode::Soft), &mut rng).unwrap();
        let raw = random_batch(&mut rng, 5, 9);
        let batch = samples(&raw);
        let got = loss_soft(&model, model.params(), &batch, 0.0).unwrap();
        let want: f64 = raw.iter().map(|(s, y)| cross_entropy(&model.forward(s).unwrap(), *y)).sum::<f64>() / 5.0;
        assert!((got.tape.value(got.loss).item() - want).abs() < 1e-12);
    }

    #[test]
    fn uniform_attention_adds_lambda_ln_m() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut model = FcamModel::new(config(ActivationKind::Softmax, 0, AttentionMode::Soft), &mut rng).unwrap();
        let (w, _) = *model.focus_layers().last().unwrap();
        model.params_mut().value_mut(w).fill(0.0);
        let raw = random_batch(&mut rng, 3, 9);
        let batch = samples(&raw);
        let plain = loss_soft(&model, model.params(), &batch, 0.0).unwrap();
        let reg = loss_soft(&model, model.params(), &batch, 0.003).unwrap();
        let delta = reg.tape.value(reg.loss).item() - plain.tape.value(plain.loss).item();
        assert!((delta - 0.003 * 9f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn hard_loss_with_one_hot_alpha_is_patch_cross_entropy() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut cfg = config(ActivationKind::Sparsemax, 0, AttentionMode::Hard);
        cfg.focus = NetworkSpec::linear(2, 1);
        let mut model = FcamModel::new(cfg, &mut rng).unwrap();
        let (w, b) = model.focus_layers()[0];
        model.params_mut().value_mut(w).data_mut().copy_from_slice(&[1.0, 1.0]);
        model.params_mut().value_mut(b).fill(0.0);
        let mut segs = vec![0.0; 18];
        segs[8] = 5.0;
        segs[9] = 5.0;
        let raw = vec![(segs.clone(), 2)];
        let got = loss_hard(&model, model.params(), &samples(&raw), 0.0).unwrap();
        let want = cross_entropy(&model.classify_feature(&[5.0, 5.0]).unwrap(), 2);
        assert!((got.tape.value(got.loss).item() - want).abs() < 1e-12);
        assert_eq!(got.classifier_rows, 9);
    }

    #[test]
    fn hard_loss_on_identical_patches_matches_soft() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let hard = FcamModel::new(config(ActivationKind::Softmax, 2, AttentionMode::Hard), &mut rng).unwrap();
        let mut soft_cfg = hard.config().clone();
        soft_cfg.mode = AttentionMode::Soft;
        let soft = FcamModel::from_params(soft_cfg, hard.params().clone()).unwrap();
        let seg = [0.7, -1.3];
        let raw = vec![(seg.repeat(9), 1)];
        let h = loss_hard(&hard, hard.params(), &samples(&raw), 0.0).unwrap();
        let s = loss_soft(&soft, soft.params(), &samples(&raw), 0.0).unwrap();
        assert!((h.tape.value(h.loss).item() - s.tape.value(s.loss).item()).abs() < 1e-12);
    }

    /// Shifts a random instance until every activation is away from its
    /// kinks: ReLU pre-activations, sparsemax support changes, argmax ties.
    fn gradient_case(seed: u64, activation: ActivationKind, layer: usize, mode: AttentionMode) -> (FcamModel, Vec<(Vec<f64>, usize)>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let model = FcamModel::new(config(activation, layer, mode), &mut rng).unwrap();
        loop {
            let raw = random_batch(&mut rng, 2, 9);
            let safe = raw.iter().all(|(s, _)| {
                let z = model.focus_scores(s).unwrap();
                let alpha = activation.apply(&z);
                let tau_gap = if activation == ActivationKind::Sparsemax {
                    let (tau, _) = crate::attention::sparsemax_threshold(&z);
                    z.iter().map(|v| (v - tau).abs()).fold(f64::INFINITY, f64::min)
                } else {
                    1.0
                };
                tau_gap > 1e-3 && alpha.iter().all(|a| a.is_finite())
            });
            if safe {
                return (model, raw);
            }
        }
    }

    #[test]
    fn soft_loss_gradients_match_finite_differences() {
        for (i, activation) in [
            ActivationKind::Softmax,
            ActivationKind::Sparsemax,
            ActivationKind::SphericalSoftmax,
        ]
        .into_iter()
        .enumerate()
        {
            for layer in [0, 2] {
                for lambda in [0.0, 0.003] {
                    let (mut model, raw) = gradient_case(10 + i as u64, activation, layer, AttentionMode::Soft);
                    let batch = samples(&raw);
                    let m2 = model.clone();
                    let err = grad_check(
                        |p| {
                            let l = loss_soft(&m2, p, &batch, lambda)?;
                            Ok((l.tape, l.loss))
                        },
                        model.params_mut(),
                        1e-5,
                    )
                    .unwrap();
                    assert!(err <= 1e-4, "{activation} layer {layer} lambda {lambda}: {err}");
                }
            }
        }
    }

    #[test]
    fn hard_loss_gradients_match_finite_differences() {
        let (mut model, raw) = gradient_case(20, ActivationKind::Softmax, 0, AttentionMode::Hard);
        let batch = samples(&raw);
        let m2 = model.clone();
        let build = |p: &ParamStore| {
            let l = loss_hard(&m2, p, &batch, 0.0)?;
            Ok((l.tape, l.loss))
        };
        assert!(grad_check(build, model.params_mut(), 1e-5).unwrap() <= 1e-4);

        // at layer 2 the features are constants for the loss gradient, so only
        // parameters that do not shape them are comparable with differences
        let (mut model, raw) = gradient_case(21, ActivationKind::Softmax, 2, AttentionMode::Hard);
        let batch = samples(&raw);
        let m2 = model.clone();
        let build = |p: &ParamStore| {
            let l = loss_hard(&m2, p, &batch, 0.0)?;
            Ok((l.tape, l.loss))
        };
        let err = grad_check_where(build, model.params_mut(), 1e-6, |name| {
            name.starts_with("classify") || name.starts_with("focus.2")
        })
        .unwrap();
        assert!(err <= 1e-4, "{err}");
    }

    #[test]
    fn soft_loss_is_permutation_invariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let model = FcamModel::new(config(ActivationKind::Softmax, 1, AttentionMode::Soft), &mut rng).unwrap();
        let raw = random_batch(&mut rng, 1, 9);
        let mut perm: Vec<usize> = (0..9).collect();
        perm.shuffle(&mut rng);
        let permuted: Vec<f64> = perm.iter().flat_map(|&j| raw[0].0[2 * j..2 * j + 2].to_vec()).collect();
        let raw_p = vec![(permuted, raw[0].1)];
        let a = loss_soft(&model, model.params(), &samples(&raw), 0.01).unwrap();
        let b = loss_soft(&model, model.params(), &samples(&raw_p), 0.01).unwrap();
        assert!((a.tape.value(a.loss).item() - b.tape.value(b.loss).item()).abs() <= 1e-12);
    }

    fn scalar_store(theta: f64) -> (ParamStore, crate::autodiff::ParamId) {
        let mut p = ParamStore::new();
        let id = p.add("theta", Tensor::vector(vec![theta]));
        (p, id)
    }

    #[test]
    fn adam_zero_gradient_leaves_parameters() {
        let (mut p, id) = scalar_store(1.5);
        let mut state = AdamState::new(&p);
        adam_step(&mut p, &mut state, 0.1).unwrap();
        assert_eq!(p.value(id).data(), &[1.5]);
        assert_eq!(state.step(), 1);
    }

    #[test]
    fn adam_first_step_moves_by_lr() {
        let mut p = ParamStore::new();
        let id = p.add("w", Tensor::vector(vec![0.0; 4]));
        p.grad_mut(id).data_mut().copy_from_slice(&[3.0, -0.2, 1e3, -7.0]);
        let mut state = AdamState::new(&p);
        adam_step(&mut p, &mut state, 0.01).unwrap();
        for (v, sign) in p.value(id).data().iter().zip([-1.0, 1.0, -1.0, 1.0]) {
            assert!((v - sign * 0.01).abs() < 1e-8, "{v}");
        }
    }

    #[test]
    fn adam_matches_scalar_simulation_on_quadratic() {
        let (mut p, id) = scalar_store(0.0);
        let mut state = AdamState::new(&p);
        let (mut theta, mut m, mut v) = (0.0f64, 0.0f64, 0.0f64);
        let mut converged_at = None;
        for t in 1..=2000 {
            let g = 2.0 * (p.value(id).item() - 5.0);
            p.grad_mut(id).data_mut()[0] = g;
            adam_step(&mut p, &mut state, 0.05).unwrap();

            let gs = 2.0 * (theta - 5.0);
            m = 0.9 * m + 0.1 * gs;
            v = 0.999 * v + 0.001 * gs * gs;
            let mh = m / (1.0 - 0.9f64.powi(t));
            let vh = v / (1.0 - 0.999f64.powi(t));
            theta -= 0.05 * mh / (vh.sqrt() + 1e-8);
            assert!((p.value(id).item() - theta).abs() < 1e-12);
            if converged_at.is_none() && (theta - 5.0).abs() < 0.01 {
                converged_at = Some(t);
            }
        }
        assert!((p.value(id).item() - 5.0).abs() < 0.01);
        assert!(converged_at.is_some());
    }

    #[test]
    fn adam_rejects_non_finite_gradients() {
        let mut p = ParamStore::new();
        p.add("ok", Tensor::vector(vec![1.0]));
        let bad = p.add("focus.0.w", Tensor::vector(vec![1.0, 2.0]));
        p.grad_mut(bad).data_mut()[1] = f64::NAN;
        let mut state = AdamState::new(&p);
        let err = adam_step(&mut p, &mut state, 0.1).unwrap_err().to_string();
        assert!(err.contains("focus.0.w[1]"), "{err}");
        assert_eq!(p.value(bad).data(), &[1.0, 2.0]);
        assert_eq!(state.step(), 0);
    }

    fn em_model(seed: u64, activation: ActivationKind) -> FcamModel {
        let cfg = FcamConfig {
            focus: NetworkSpec::new(vec![2, 8, 1], Nonlinearity::Relu),
            classify: NetworkSpec::linear(2, 3),
            activation,
            averaging_layer: 0,
            mode: AttentionMode::Soft,
        };
        FcamModel::new(cfg, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap()
    }

    #[test]
    fn one_epoch_one_record_and_determinism() {
        let ds = make_dataset(&Preset::SynthAppendixD.config(), 60, 0.5, 7).unwrap();
        let cfg = TrainConfig {
            epochs: 1,
            batch_size: Some(8),
            ..TrainConfig::default()
        };
        let mut model = em_model(1, ActivationKind::Softmax);
        let out = train(&mut model, ds.training_view(Split::Train), ds.eval_view(Split::Test), &cfg).unwrap();
        assert_eq!(out.log.records.len(), 1);
        assert_eq!(out.steps, 4);
        assert_eq!(out.instances_seen, 30);

        let cfg = TrainConfig { epochs: 5, ..cfg };
        let run = |exec| {
            let mut model = em_model(1, ActivationKind::Softmax);
            let out = train(
                &mut model,
                ds.training_view(Split::Train),
                ds.eval_view(Split::Test),
                &TrainConfig { exec, ..cfg.clone() },
            )
            .unwrap();
            (model, out.log)
        };
        let (m1, l1) = run(Execution::Parallel);
        let (m2, l2) = run(Execution::Sequential);
        assert_eq!(l1, l2);
        assert_eq!(m1, m2);
        assert_eq!(DynamicsLog::from_csv(&l1.to_csv()).unwrap(), l1);
        for r in &l1.records {
            let sum = r.ftpt + r.ffpt + r.ftpf + r.ffpf;
            assert!((sum - 1.0).abs() <= 1e-9);
            assert!((r.ft - (r.ftpt + r.ftpf)).abs() <= 1e-12);
        }
    }

    #[test]
    fn rejects_bad_config_and_dims() {
        let ds = make_dataset(&Preset::ErrorMode3.config(), 20, 0.0, 0).unwrap();
        let mut model = em_model(0, ActivationKind::Softmax);
        let view = ds.eval_view(Split::All);
        let err = train(&mut model, view.as_training(), view, &TrainConfig::default()).unwrap_err();
        assert!(err.is_config(), "{err}");
        let ds = make_dataset(&Preset::ErrorMode1.config(), 20, 0.0, 0).unwrap();
        let view = ds.eval_view(Split::All);
        for bad in [
            TrainConfig { epochs: 0, ..TrainConfig::default() },
            TrainConfig { learning_rate: 0.0, ..TrainConfig::default() },
            TrainConfig { lambda: -1.0, ..TrainConfig::default() },
        ] {
            assert!(train(&mut model, view.as_training(), view, &bad).unwrap_err().is_config());
        }
    }

    #[test]
    fn large_lambda_lowers_attention_entropy() {
        let ds = make_dataset(&Preset::SynthAppendixD.config(), 200, 0.5, 3).unwrap();
        let mean_ent = |lambda: f64| {
            let mut model = em_model(4, ActivationKind::Softmax);
            let cfg = TrainConfig {
                epochs: 20,
                lambda,
                learning_rate: 0.01,
                log_every: 20,
                ..TrainConfig::default()
            };
            let out = train(&mut model, ds.training_view(Split::Train), ds.eval_view(Split::Test), &cfg).unwrap();
            out.final_records.iter().map(|r| entropy(&r.alpha)).sum::<f64>() / out.final_records.len() as f64
        };
        let (base, reg) = (mean_ent(0.0), mean_ent(10.0));
        assert!(reg < base, "lambda=10: {reg}, lambda=0: {base}");
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]
        #[test]
        fn dynamics_csv_round_trips(values in prop::collection::vec(0.0f64..1.0, 8), epoch in 1usize..1000) {
            let r = DynamicsRecord {
                epoch,
                train_acc: values[0],
                test_acc: values[1],
                ft: values[2],
                ftpt: values[3],
                ffpt: values[4],
                ftpf: values[5],
                ffpf: values[6],
                loss: values[7] * 10.0,
            };
            let log = DynamicsLog { records: vec![r] };
            prop_assert_eq!(DynamicsLog::from_csv(&log.to_csv()).unwrap(), log);
        }
    }
}
