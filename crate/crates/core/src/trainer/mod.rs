//! The alternating pruning loop, plus plain classification training for
//! pretraining and finetuning.
//!
//! Epochs are numbered from 0. Even epochs update only the pruner (the
//! main network is bound without gradients, so its parameters cannot
//! change); odd epochs update both networks. The loss of every step is the
//! cross-entropy of the masked main network plus `lambda` times the ℓ1 norm
//! of all channel weights produced in the same forward pass.

mod config;
mod sgd;


use rand::seq::SliceRandom;
use rand::RngCore;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::data::{augment, stream_rng, Dataset, Stream};
use crate::error::{Error, Result};
use crate::model::{
    build_pruner_network, derive_inference_mask, tie_mask_vars, ChannelWeights, MainNetwork, MaskGroup,
    ParameterSet, PrunerNetwork,
};
use crate::tensor::Tensor;

pub use config::{PruneConfig, TrainConfig};
pub use sgd::Sgd;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Phase {
    /// Pruner parameters only, main network frozen.
    Pruner,
    /// Both networks.
    Joint,
    /// Classification only, no masks.
    Classify,
}

/// One line of the metrics log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub phase: Phase,
    pub loss: f64,
    pub accuracy: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sigmoid_scale: Option<f64>,
    /// Mean of every channel weight, averaged over batches.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mean_weight: Option<f64>,
    /// Per layer, the share of weights below the threshold, averaged over
    /// batches.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fraction_below_threshold: Option<Vec<f64>>,
}

impl EpochMetrics {
    pub fn to_json_line(&self) -> String {
        serde_json::to_string(self).expect("metrics serialize")
    }
}

/// Everything the pruning loop owns between epochs.
#[derive(Clone, Debug)]
pub struct TrainState {
    /// Number of completed epochs.
    pub epoch: usize,
    pub main: MainNetwork,
    pub pruner: PrunerNetwork,
    pub scale: f64,
    pub groups: Vec<MaskGroup>,
    pub history: Vec<EpochMetrics>,
    main_opt: Sgd,
    pruner_opt: Sgd,
}

impl TrainState {
    /// Starts from a pretrained main network; the pruner's trunk is a copy
    /// of the main trunk and its heads are freshly initialised.
    pub fn new(main: MainNetwork, config: &PruneConfig) -> Result<Self> {
        config.validate()?;
        let spec = main.spec().clone();
        let mut rng = stream_rng(config.seed, Stream::HeadInit, 0);
        let pp = ParameterSet::init_pruner(
            &spec,
            main.params(),
            config.head_bias_init,
            config.head_init_range,
            &mut rng,
        )?;
        let pruner = build_pruner_network(spec.clone(), pp)?;
        Ok(TrainState {
            epoch: 0,
            groups: spec.mask_groups(),
            main,
            pruner,
            scale: config.scale_at(0),
            history: Vec::new(),
            main_opt: Sgd::new(config.momentum),
            pruner_opt: Sgd::new(config.momentum),
        })
    }

    /// Share of the most recent epoch's channel weights below threshold,
    /// over all layers.
    pub fn sparsity(&self) -> Option<f64> {
        let last = self.history.last()?.fraction_below_threshold.as_ref()?;
        let counts = self.main.spec().filter_counts();
        let total: usize = counts.iter().sum();
        Some(last.iter().zip(&counts).map(|(f, &n)| f * n as f64).sum::<f64>() / total as f64)
    }
}

/// Cross-entropy of `logits` plus `lambda` times the ℓ1 norm of `weights`.
pub fn joint_loss(tape: &mut Tape, logits: Var, labels: &[usize], weights: &[Var], lambda: f64) -> Result<Var> {
    if !(lambda >= 0.0) {
        return Err(Error::invalid("joint_loss", format!("lambda must be non-negative, got {lambda}")));
    }
    let xent = tape.softmax_cross_entropy(logits, labels)?;
    if lambda == 0.0 {
        return Ok(xent);
    }
    let l1 = tape.l1_norm(weights);
    let penalty = tape.mul_scalar(l1, lambda);
    tape.add(xent, penalty)
}

struct Forward {
    tape: Tape,
    loss: Var,
    logits: Var,
    weights: Vec<Var>,
    main_bound: crate::model::BoundParams,
    pruner_bound: crate::model::BoundParams,
}

#[allow(clippy::too_many_arguments)]
fn joint_forward(
    main: &MainNetwork,
    pruner: &PrunerNetwork,
    groups: &[MaskGroup],
    x: Tensor,
    labels: &[usize],
    scale: f64,
    lambda: f64,
    train_main: bool,
) -> Result<Forward> {
    let mut tape = Tape::new();
    let main_bound = main.params().bind(&mut tape, train_main);
    let pruner_bound = pruner.params().bind(&mut tape, true);
    let xv = tape.constant(x);
    let heads = pruner.forward(&mut tape, &pruner_bound, xv, scale)?;
    let weights = tie_mask_vars(&tape, &heads, groups)?;
    let logits = main.forward(&mut tape, &main_bound, xv, Some(&weights))?;
    let loss = joint_loss(&mut tape, logits, labels, &weights, lambda)?;
    Ok(Forward {
        tape,
        loss,
        logits,
        weights,
        main_bound,
        pruner_bound,
    })
}

/// Joint loss of one batch at the given parameters, without updating.
pub fn batch_joint_loss(
    main: &MainNetwork,
    pruner: &PrunerNetwork,
    groups: &[MaskGroup],
    x: &Tensor,
    labels: &[usize],
    scale: f64,
    lambda: f64,
) -> Result<f64> {
    let f = joint_forward(main, pruner, groups, x.clone(), labels, scale, lambda, false)?;
    Ok(f.tape.value(f.loss).item())
}

fn count_correct(logits: &Tensor, labels: &[usize]) -> usize {
    let classes = logits.shape()[1];
    logits
        .data()
        .chunks(classes)
        .zip(labels)
        .filter(|(row, &y)| {
            let mut best = 0;
            for (k, v) in row.iter().enumerate() {
                if *v > row[best] {
                    best = k;
                }
            }
            best == y
        })
        .count()
}

/// Batches of record indices for one epoch.
fn epoch_batches(data: &Dataset, seed: u64, epoch: usize, samples: Option<usize>, batch: usize) -> Vec<Vec<usize>> {
    let mut order = data.epoch_order(seed, epoch as u64);
    if let Some(n) = samples {
        order.truncate(n);
    }
    order.chunks(batch).map(<[usize]>::to_vec).collect()
}

fn load_batch(data: &Dataset, idx: &[usize], aug: bool, seed: u64, epoch: usize, b: usize) -> (Tensor, Vec<usize>) {
    let (x, y) = data.batch(idx);
    if aug {
        let s = stream_rng(seed, Stream::Augment, ((epoch as u64) << 32) | b as u64).next_u64();
        (augment(&x, s), y)
    } else {
        (x, y)
    }
}

#[derive(Default)]
struct Accum {
    loss: f64,
    correct: usize,
    seen: usize,
    batches: usize,
    mean_weight: f64,
    below: Vec<f64>,
}

impl Accum {
    fn add_weights(&mut self, weights: &[&[f64]], threshold: f64) {
        if self.below.is_empty() {
            self.below = vec![0.0; weights.len()];
        }
        let total: usize = weights.iter().map(|w| w.len()).sum();
        let sum: f64 = weights.iter().flat_map(|w| w.iter()).sum();
        self.mean_weight += sum / total as f64;
        for (acc, w) in self.below.iter_mut().zip(weights) {
            *acc += w.iter().filter(|&&v| v < threshold).count() as f64 / w.len() as f64;
        }
    }

    fn finish(self, epoch: usize, phase: Phase, scale: Option<f64>) -> EpochMetrics {
        let nb = self.batches.max(1) as f64;
        let masked = !self.below.is_empty();
        EpochMetrics {
            epoch,
            phase,
            loss: self.loss / self.seen.max(1) as f64,
            accuracy: self.correct as f64 / self.seen.max(1) as f64,
            sigmoid_scale: scale,
            mean_weight: masked.then(|| self.mean_weight / nb),
            fraction_below_threshold: masked.then(|| self.below.iter().map(|b| b / nb).collect()),
        }
    }
}

fn masked_epoch(state: &mut TrainState, data: &Dataset, config: &PruneConfig, phase: Phase) -> Result<EpochMetrics> {
    let epoch = state.epoch;
    let want_even = phase == Phase::Pruner;
    if epoch.is_multiple_of(2) != want_even {
        return Err(Error::invalid(
            if want_even { "pruner_epoch" } else { "joint_epoch" },
            format!("epoch {epoch} has the wrong parity"),
        ));
    }
    state.scale = config.scale_at(epoch);
    let train_main = phase == Phase::Joint;
    let lr = if train_main { config.lr_joint } else { config.lr_pruner };
    let mut acc = Accum::default();
    for (b, idx) in epoch_batches(data, config.seed, epoch, config.samples_per_epoch, config.batch_size)
        .iter()
        .enumerate()
    {
        let (x, y) = load_batch(data, idx, config.augment, config.seed, epoch, b);
        let f = joint_forward(
            &state.main,
            &state.pruner,
            &state.groups,
            x,
            &y,
            state.scale,
            config.lambda,
            train_main,
        )?;
        let loss = f.tape.value(f.loss).item();
        if !loss.is_finite() {
            return Err(Error::Diverged { epoch, batch: b });
        }
        let grads = f.tape.backward(f.loss)?;
        state
            .pruner_opt
            .step(state.pruner.params_mut(), &f.pruner_bound, &f.tape, &grads, lr)?;
        if train_main {
            state
                .main_opt
                .step(state.main.params_mut(), &f.main_bound, &f.tape, &grads, lr)?;
        }
        acc.loss += loss * y.len() as f64;
        acc.correct += count_correct(f.tape.value(f.logits), &y);
        acc.seen += y.len();
        acc.batches += 1;
        let w: Vec<&[f64]> = f.weights.iter().map(|&v| f.tape.value(v).data()).collect();
        acc.add_weights(&w, config.threshold);
    }
    state.epoch += 1;
    let m = acc.finish(epoch, phase, Some(state.scale));
    state.history.push(m.clone());
    Ok(m)
}

/// Even epoch: one pass over `data` updating only the pruner.
pub fn pruner_epoch(state: &mut TrainState, data: &Dataset, config: &PruneConfig) -> Result<EpochMetrics> {
    masked_epoch(state, data, config, Phase::Pruner)
}

/// Odd epoch: one pass over `data` updating both networks.
pub fn joint_epoch(state: &mut TrainState, data: &Dataset, config: &PruneConfig) -> Result<EpochMetrics> {
    masked_epoch(state, data, config, Phase::Joint)
}

/// Fixed calibration batches drawn from the training split.
pub fn calibration_batches(data: &Dataset, config: &PruneConfig) -> Vec<Tensor> {
    let mut order: Vec<usize> = (0..data.len()).collect();
    order.shuffle(&mut stream_rng(config.seed, Stream::Calibration, 0));
    order.truncate(config.calibration_batches * config.batch_size);
    order.chunks(config.batch_size).map(|c| data.batch(c).0).collect()
}

/// Alternates pruner and joint epochs until `config.epochs` are done, then
/// averages the pruner's output over the calibration batches into the
/// final mask. `on_epoch` sees every epoch's metrics as they complete.
pub fn run_pruning(
    state: &mut TrainState,
    data: &Dataset,
    config: &PruneConfig,
    mut on_epoch: impl FnMut(&EpochMetrics),
) -> Result<Vec<ChannelWeights>> {
    config.validate()?;
    while state.epoch < config.epochs {
        let m = if state.epoch.is_multiple_of(2) {
            pruner_epoch(state, data, config)?
        } else {
            joint_epoch(state, data, config)?
        };
        on_epoch(&m);
    }
    let calib = calibration_batches(data, config);
    derive_inference_mask(&state.pruner, &calib, state.scale, &state.groups)
}

/// Share of all mask entries below `threshold`.
pub fn fraction_below(mask: &[ChannelWeights], threshold: f64) -> f64 {
    let total: usize = mask.iter().map(ChannelWeights::len).sum();
    let below = mask
        .iter()
        .flat_map(|m| m.values.iter())
        .filter(|&&v| v < threshold)
        .count();
    below as f64 / total.max(1) as f64
}

/// Plain SGD on the classification loss with no masks. Used for
/// pretraining and for finetuning a rewritten network.
pub fn train_classifier(
    net: &mut MainNetwork,
    data: &Dataset,
    config: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochMetrics),
) -> Result<Vec<EpochMetrics>> {
    config.validate()?;
    let mut opt = Sgd::new(config.momentum);
    let mut history = Vec::with_capacity(config.epochs);
    for epoch in 0..config.epochs {
        let mut acc = Accum::default();
        for (b, idx) in epoch_batches(data, config.seed, epoch, config.samples_per_epoch, config.batch_size)
            .iter()
            .enumerate()
        {
            let (x, y) = load_batch(data, idx, config.augment, config.seed, epoch, b);
            let mut tape = Tape::new();
            let bound = net.params().bind(&mut tape, true);
            let xv = tape.constant(x);
            let logits = net.forward(&mut tape, &bound, xv, None)?;
            let loss = tape.softmax_cross_entropy(logits, &y)?;
            let lv = tape.value(loss).item();
            if !lv.is_finite() {
                return Err(Error::Diverged { epoch, batch: b });
            }
            let grads = tape.backward(loss)?;
            opt.step(net.params_mut(), &bound, &tape, &grads, config.lr)?;
            acc.loss += lv * y.len() as f64;
            acc.correct += count_correct(tape.value(logits), &y);
            acc.seen += y.len();
            acc.batches += 1;
        }
        let m = acc.finish(epoch, Phase::Classify, None);
        on_epoch(&m);
        history.push(m);
    }
    Ok(history)
}

/// Finetunes a rewritten network; identical to [`train_classifier`].
pub fn finetune(
    net: &mut MainNetwork,
    data: &Dataset,
    config: &TrainConfig,
    on_epoch: impl FnMut(&EpochMetrics),
) -> Result<Vec<EpochMetrics>> {
    train_classifier(net, data, config, on_epoch)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub loss: f64,
    pub accuracy: f64,
    pub count: usize,
}

/// Mean cross-entropy and top-1 accuracy over `data`, in record order.
pub fn evaluate(
    net: &MainNetwork,
    data: &Dataset,
    mask: Option<&[ChannelWeights]>,
    batch_size: usize,
) -> Result<Evaluation> {
    if batch_size == 0 {
        return Err(Error::Config("batch_size must be positive".into()));
    }
    let mut loss = 0.0;
    let mut correct = 0;
    let idx: Vec<usize> = (0..data.len()).collect();
    for chunk in idx.chunks(batch_size) {
        let (x, y) = data.batch(chunk);
        let mut tape = Tape::new();
        let bound = net.params().bind(&mut tape, false);
        let xv = tape.constant(x);
        let mvars = mask.map(|ms| ms.iter().map(|m| tape.constant(m.to_tensor())).collect::<Vec<_>>());
        let logits = net.forward(&mut tape, &bound, xv, mvars.as_deref())?;
        let l = tape.softmax_cross_entropy(logits, &y)?;
        loss += tape.value(l).item() * y.len() as f64;
        correct += count_correct(tape.value(logits), &y);
    }
    let n = data.len().max(1) as f64;
    Ok(Evaluation {
        loss: loss / n,
        accuracy: correct as f64 / n,
        count: data.len(),
    })
}
