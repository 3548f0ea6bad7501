//! Weight and architecture optimizers, the alternating search loop and
//! fixed-network training.

use std::collections::BTreeMap;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::autodiff::Tape;
use crate::data::{Batch, Loader};
use crate::error::{Error, Result};
use crate::genotype::Genotype;
use crate::metrics::ConfusionMatrix;
use crate::params::{Frame, Mode, ParamStore};
use crate::search_space::AlphaParams;
use crate::seed;
use crate::supernet::{NetMode, NetworkConfig, SuperNet};
use crate::tensor::{Real, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum Schedule {
    /// `lr0 · (1 + cos(π e / epochs)) / 2`
    Cosine,
    /// `lr0 · gamma^e`
    Exponential {
        gamma: f64,
    },
    Constant,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WeightOptConfig {
    pub lr0: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub epochs: usize,
    pub schedule: Schedule,
    pub batch_size: usize,
    pub grad_clip: Option<f64>,
}

impl WeightOptConfig {
    pub fn search() -> Self {
        WeightOptConfig {
            lr0: 0.025,
            momentum: 0.9,
            weight_decay: 3e-4,
            epochs: 50,
            schedule: Schedule::Cosine,
            batch_size: 64,
            grad_clip: Some(5.0),
        }
    }

    pub fn final_training() -> Self {
        WeightOptConfig {
            lr0: 0.1,
            momentum: 0.9,
            weight_decay: 3e-4,
            epochs: 150,
            schedule: Schedule::Exponential { gamma: 0.97 },
            batch_size: 64,
            grad_clip: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lr0 > 0.0 && self.lr0.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "lr0 must be positive, got {}",
                self.lr0
            )));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::InvalidArgument(format!(
                "momentum must lie in [0, 1), got {}",
                self.momentum
            )));
        }
        if !(self.weight_decay >= 0.0) {
            return Err(Error::InvalidArgument("weight_decay must be non-negative".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::InvalidArgument("batch_size must be positive".into()));
        }
        if let Some(c) = self.grad_clip {
            if !(c > 0.0) {
                return Err(Error::InvalidArgument("grad_clip must be positive".into()));
            }
        }
        if let Schedule::Exponential { gamma } = self.schedule {
            if !(gamma > 0.0) {
                return Err(Error::InvalidArgument("schedule gamma must be positive".into()));
            }
        }
        Ok(())
    }

    /// Learning rate used throughout `epoch` (0-based).
    pub fn lr(&self, epoch: usize) -> f64 {
        match self.schedule {
            Schedule::Cosine => {
                let t = epoch as f64 / self.epochs.max(1) as f64;
                self.lr0 * (1.0 + (std::f64::consts::PI * t).cos()) / 2.0
            }
            Schedule::Exponential { gamma } => self.lr0 * gamma.powi(epoch as i32),
            Schedule::Constant => self.lr0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ArchLoss {
    Validation,
    Training,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ArchOptimizer {
    Adam,
    Sgd,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ArchOptConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub optimizer: ArchOptimizer,
    /// Which half supplies the batches for the coefficient updates.
    pub loss: ArchLoss,
}

impl Default for ArchOptConfig {
    fn default() -> Self {
        ArchOptConfig {
            lr: 3e-4,
            weight_decay: 1e-3,
            beta1: 0.5,
            beta2: 0.999,
            eps: 1e-8,
            optimizer: ArchOptimizer::Adam,
            loss: ArchLoss::Validation,
        }
    }
}

impl ArchOptConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "arch lr must be non-negative, got {}",
                self.lr
            )));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::InvalidArgument("beta1 and beta2 must lie in [0, 1)".into()));
        }
        if !(self.eps > 0.0) || !(self.weight_decay >= 0.0) {
            return Err(Error::InvalidArgument(
                "eps must be positive and weight_decay non-negative".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub train_acc: f64,
    pub val_loss: Option<f64>,
    pub val_acc: Option<f64>,
    pub lr: f64,
    pub seconds: f64,
}

impl EpochRecord {
    /// Equality ignoring wall time.
    pub fn same_values(&self, other: &EpochRecord) -> bool {
        EpochRecord {
            seconds: 0.0,
            ..self.clone()
        } == EpochRecord {
            seconds: 0.0,
            ..other.clone()
        }
    }
}

/// Momentum buffers keyed by parameter name.
#[derive(Clone, Debug, Default)]
pub struct SgdState<T> {
    pub velocity: BTreeMap<String, Tensor<T>>,
}

fn check_grads<T: Real>(store: &ParamStore<T>) -> Result<()> {
    for (name, p) in store.iter() {
        if !p.grad.is_finite() {
            return Err(Error::NonFinite(format!("gradient of {name}")));
        }
    }
    Ok(())
}

pub fn grad_norm<T: Real>(store: &ParamStore<T>) -> f64 {
    store
        .iter()
        .flat_map(|(_, p)| p.grad.data().iter())
        .map(|g| {
            let g = g.to_f64_lossy();
            g * g
        })
        .sum::<f64>()
        .sqrt()
}

/// One momentum step with coupled weight decay at `lr(epoch)`, after
/// optional global-norm clipping of the stored gradients.
pub fn sgd_step<T: Real>(
    store: &mut ParamStore<T>,
    state: &mut SgdState<T>,
    config: &WeightOptConfig,
    epoch: usize,
) -> Result<()> {
    check_grads(store)?;
    let lr = T::lit(config.lr(epoch));
    let momentum = T::lit(config.momentum);
    let wd = T::lit(config.weight_decay);
    let scale = match config.grad_clip {
        Some(max) => {
            let norm = grad_norm(store);
            if norm > max {
                T::lit(max / (norm + 1e-6))
            } else {
                T::one()
            }
        }
        None => T::one(),
    };
    for (name, p) in store.iter_mut() {
        if !p.requires_grad {
            continue;
        }
        let v = state
            .velocity
            .entry(name.to_string())
            .or_insert_with(|| p.value.zeros_like());
        for ((w, &g), v) in p.value.data_mut().iter_mut().zip(p.grad.data()).zip(v.data_mut()) {
            *v = momentum * *v + (g * scale + wd * *w);
            *w -= lr * *v;
        }
    }
    Ok(())
}

/// First and second moment estimates.
#[derive(Clone, Debug, Default)]
pub struct AdamState<T> {
    pub step: u64,
    pub m: BTreeMap<String, Tensor<T>>,
    pub v: BTreeMap<String, Tensor<T>>,
}

/// Adaptive-moment step with decoupled weight decay (or plain SGD with
/// coupled decay when configured).
pub fn adam_step<T: Real>(store: &mut ParamStore<T>, state: &mut AdamState<T>, config: &ArchOptConfig) -> Result<()> {
    check_grads(store)?;
    let lr = config.lr;
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - config.beta1.powi(t);
    let bc2 = 1.0 - config.beta2.powi(t);
    let (b1, b2) = (T::lit(config.beta1), T::lit(config.beta2));
    for (name, p) in store.iter_mut() {
        if !p.requires_grad {
            continue;
        }
        match config.optimizer {
            ArchOptimizer::Sgd => {
                for (w, &g) in p.value.data_mut().iter_mut().zip(p.grad.data()) {
                    *w -= T::lit(lr) * (g + T::lit(config.weight_decay) * *w);
                }
            }
            ArchOptimizer::Adam => {
                let m = state.m.entry(name.to_string()).or_insert_with(|| p.value.zeros_like());
                let v = state.v.entry(name.to_string()).or_insert_with(|| p.value.zeros_like());
                let decay = T::one() - T::lit(lr * config.weight_decay);
                for (((w, &g), m), v) in p
                    .value
                    .data_mut()
                    .iter_mut()
                    .zip(p.grad.data())
                    .zip(m.data_mut())
                    .zip(v.data_mut())
                {
                    *m = b1 * *m + (T::one() - b1) * g;
                    *v = b2 * *v + (T::one() - b2) * g * g;
                    let m_hat = *m / T::lit(bc1);
                    let v_hat = *v / T::lit(bc2);
                    *w = *w * decay - T::lit(lr) * m_hat / (v_hat.sqrt() + T::lit(config.eps));
                }
            }
        }
    }
    Ok(())
}

/// Loss and hit count of one batch.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepOutcome {
    pub loss: f64,
    pub correct: usize,
    pub count: usize,
}

fn argmax_rows<T: Real>(logits: &Tensor<T>) -> Vec<usize> {
    let k = logits.dims()[1];
    logits
        .data()
        .chunks(k)
        .map(|row| {
            let mut best = 0;
            for (j, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = j;
                }
            }
            best
        })
        .collect()
}

fn hits(pred: &[usize], labels: &[usize]) -> usize {
    pred.iter().zip(labels).filter(|(p, l)| p == l).count()
}

/// Forward and backward on one batch, then one weight update. Batch-norm
/// running statistics are refreshed when the network is in training mode.
pub fn weight_step<T: Real>(
    net: &mut SuperNet<T>,
    alphas: Option<&AlphaParams<T>>,
    batch: &Batch<T>,
    state: &mut SgdState<T>,
    config: &WeightOptConfig,
    epoch: usize,
) -> Result<StepOutcome> {
    let tape = Tape::new();
    let frame = Frame::new(&tape, &net.params);
    let bound = alphas.map(|a| a.bind_frozen(&tape)).transpose()?;
    let x = tape.constant(batch.images.clone());
    let logits = net.forward(&frame, bound.as_ref(), x)?;
    let loss = tape.cross_entropy(logits, &batch.labels)?;
    let out = frame.finish();
    drop(bound);
    tape.backward(loss)?;
    let loss_value = tape.value(loss).item()?.to_f64_lossy();
    let correct = hits(&argmax_rows(&tape.value(logits)), &batch.labels);
    net.params.zero_grad();
    net.params.accumulate_grads(&tape, &out.vars)?;
    net.params.apply_stats(out.stats)?;
    sgd_step(&mut net.params, state, config, epoch)?;
    Ok(StepOutcome {
        loss: loss_value,
        correct,
        count: batch.labels.len(),
    })
}

/// First-order gradient of the batch loss with respect to the coefficients
/// at the current weights, followed by one coefficient update. Weights and
/// running statistics are left untouched.
pub fn arch_step<T: Real>(
    net: &SuperNet<T>,
    alphas: &mut AlphaParams<T>,
    batch: &Batch<T>,
    state: &mut AdamState<T>,
    config: &ArchOptConfig,
) -> Result<StepOutcome> {
    if !net.is_relaxed() {
        return Err(Error::InvalidArgument(
            "architecture steps need a relaxed network".into(),
        ));
    }
    let tape = Tape::new();
    let frame = Frame::frozen(&tape, &net.params);
    let bound = alphas.bind(&tape)?;
    let x = tape.constant(batch.images.clone());
    let logits = net.forward(&frame, Some(&bound), x)?;
    let loss = tape.cross_entropy(logits, &batch.labels)?;
    let vars = bound.frame.finish().vars;
    tape.backward(loss)?;
    let loss_value = tape.value(loss).item()?.to_f64_lossy();
    let correct = hits(&argmax_rows(&tape.value(logits)), &batch.labels);
    alphas.store.zero_grad();
    alphas.store.accumulate_grads(&tape, &vars)?;
    adam_step(&mut alphas.store, state, config)?;
    Ok(StepOutcome {
        loss: loss_value,
        correct,
        count: batch.labels.len(),
    })
}

/// Evaluation-mode pass over a whole loader.
#[derive(Clone, Debug)]
pub struct Evaluation {
    pub loss: f64,
    pub accuracy: f64,
    pub confusion: ConfusionMatrix,
}

pub fn evaluate<T: Real>(
    net: &mut SuperNet<T>,
    alphas: Option<&AlphaParams<T>>,
    loader: &Loader,
    class_names: &[String],
    batch_size: usize,
) -> Result<Evaluation> {
    if loader.is_empty() {
        return Err(Error::InvalidArgument("evaluation on an empty split".into()));
    }
    let previous = net.params.mode();
    net.set_mode(Mode::Eval);
    let mut confusion = ConfusionMatrix::new(class_names.to_vec());
    let mut loss_sum = 0.0;
    let result = (|| -> Result<()> {
        for batch in loader.sequential::<T>(batch_size)? {
            let tape = Tape::new();
            let frame = Frame::frozen(&tape, &net.params);
            let bound = alphas.map(|a| a.bind_frozen(&tape)).transpose()?;
            let x = tape.constant(batch.images);
            let logits = net.forward(&frame, bound.as_ref(), x)?;
            let loss = tape.cross_entropy(logits, &batch.labels)?;
            loss_sum += tape.value(loss).item()?.to_f64_lossy() * batch.labels.len() as f64;
            confusion.accumulate(&batch.labels, &argmax_rows(&tape.value(logits)))?;
        }
        Ok(())
    })();
    net.set_mode(previous);
    result?;
    let total = confusion.total() as f64;
    Ok(Evaluation {
        loss: loss_sum / total,
        accuracy: confusion.trace() as f64 / total,
        confusion,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SearchConfig {
    pub network: NetworkConfig,
    pub weights: WeightOptConfig,
    pub arch: ArchOptConfig,
}

pub struct SearchOutcome<T> {
    /// Coefficients at the end of every epoch.
    pub trajectory: Vec<AlphaParams<T>>,
    pub records: Vec<EpochRecord>,
    pub best: AlphaParams<T>,
    pub best_epoch: usize,
    pub net: SuperNet<T>,
}

/// Alternating search. Each training batch drives one weight step and is
/// followed by one coefficient step on the next batch of an independently
/// shuffled stream (the held-out half by default). `on_epoch` sees every
/// record together with the coefficients at that point.
pub fn search<T: Real>(
    config: &SearchConfig,
    train: &Loader,
    val: &Loader,
    class_names: &[String],
    run_seed: u64,
    mut on_epoch: impl FnMut(&EpochRecord, &AlphaParams<T>) -> Result<()>,
) -> Result<SearchOutcome<T>> {
    config.weights.validate()?;
    config.arch.validate()?;
    if train.is_empty() || val.is_empty() {
        return Err(Error::InvalidArgument(
            "search needs non-empty training and validation halves".into(),
        ));
    }
    let mut net = SuperNet::<T>::build(&config.network, NetMode::Relaxed, &mut seed::rng(run_seed, "init"))?;
    let mut alphas = AlphaParams::<T>::random(config.network.operator_mask.clone(), &mut seed::rng(run_seed, "alpha"))?;
    let train_seed = seed::sub_seed(run_seed, "shuffle.train");
    let arch_seed = seed::sub_seed(run_seed, "shuffle.arch");
    let arch_source = match config.arch.loss {
        ArchLoss::Validation => val,
        ArchLoss::Training => train,
    };
    let bs = config.weights.batch_size;
    let mut sgd = SgdState::default();
    let mut adam = AdamState::default();
    let mut records = Vec::with_capacity(config.weights.epochs);
    let mut trajectory = Vec::with_capacity(config.weights.epochs);
    let mut best: Option<(f64, usize, AlphaParams<T>)> = None;
    for epoch in 0..config.weights.epochs {
        let start = Instant::now();
        net.set_mode(Mode::Train);
        let train_batches = train.batches::<T>(bs, train_seed, epoch, false)?;
        let arch_batches = arch_source.batches::<T>(bs, arch_seed, epoch, false)?;
        let (mut loss_sum, mut correct, mut count) = (0.0, 0, 0);
        for (i, batch) in train_batches.iter().enumerate() {
            let out = weight_step(&mut net, Some(&alphas), batch, &mut sgd, &config.weights, epoch)?;
            loss_sum += out.loss * out.count as f64;
            correct += out.correct;
            count += out.count;
            arch_step(
                &net,
                &mut alphas,
                &arch_batches[i % arch_batches.len()],
                &mut adam,
                &config.arch,
            )?;
        }
        let eval = evaluate(&mut net, Some(&alphas), val, class_names, bs)?;
        let record = EpochRecord {
            epoch,
            train_loss: loss_sum / count as f64,
            train_acc: correct as f64 / count as f64,
            val_loss: Some(eval.loss),
            val_acc: Some(eval.accuracy),
            lr: config.weights.lr(epoch),
            seconds: start.elapsed().as_secs_f64(),
        };
        on_epoch(&record, &alphas)?;
        if best.as_ref().is_none_or(|(acc, _, _)| eval.accuracy > *acc) {
            best = Some((eval.accuracy, epoch, alphas.clone()));
        }
        trajectory.push(alphas.clone());
        records.push(record);
    }
    let (best_epoch, best) = match best {
        Some((_, e, a)) => (e, a),
        None => (0, alphas.clone()),
    };
    Ok(SearchOutcome {
        trajectory,
        records,
        best,
        best_epoch,
        net,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub network: NetworkConfig,
    pub weights: WeightOptConfig,
    pub augment: bool,
}

/// Trains the fixed network of `genotype` from scratch. When `val` is given
/// it is evaluated after every epoch.
pub fn train_fixed<T: Real>(
    genotype: &Genotype,
    config: &TrainConfig,
    train: &Loader,
    val: Option<&Loader>,
    class_names: &[String],
    run_seed: u64,
    mut on_epoch: impl FnMut(&EpochRecord) -> Result<()>,
) -> Result<(SuperNet<T>, Vec<EpochRecord>)> {
    config.weights.validate()?;
    if train.is_empty() {
        return Err(Error::InvalidArgument("training split is empty".into()));
    }
    let mut net = SuperNet::<T>::build(
        &config.network,
        NetMode::Fixed(genotype.clone()),
        &mut seed::rng(run_seed, "init"),
    )?;
    let shuffle = seed::sub_seed(run_seed, "shuffle.train");
    let mut sgd = SgdState::default();
    let mut records = Vec::with_capacity(config.weights.epochs);
    for epoch in 0..config.weights.epochs {
        let start = Instant::now();
        net.set_mode(Mode::Train);
        let (mut loss_sum, mut correct, mut count) = (0.0, 0, 0);
        for batch in train.batches::<T>(config.weights.batch_size, shuffle, epoch, config.augment)? {
            let out = weight_step(&mut net, None, &batch, &mut sgd, &config.weights, epoch)?;
            loss_sum += out.loss * out.count as f64;
            correct += out.correct;
            count += out.count;
        }
        let eval = val
            .map(|v| evaluate(&mut net, None, v, class_names, config.weights.batch_size))
            .transpose()?;
        let record = EpochRecord {
            epoch,
            train_loss: loss_sum / count as f64,
            train_acc: correct as f64 / count as f64,
            val_loss: eval.as_ref().map(|e| e.loss),
            val_acc: eval.as_ref().map(|e| e.accuracy),
            lr: config.weights.lr(epoch),
            seconds: start.elapsed().as_secs_f64(),
        };
        on_epoch(&record)?;
        records.push(record);
    }
    net.set_mode(Mode::Eval);
    Ok((net, records))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn one_param(w: f64, g: f64) -> ParamStore<f64> {
        let mut s = ParamStore::new();
        s.insert("w", Tensor::from_vec([1], vec![w]).unwrap()).unwrap();
        s.get_mut("w").unwrap().grad = Tensor::from_vec([1], vec![g]).unwrap();
        s
    }

    fn plain(lr: f64, momentum: f64, wd: f64) -> WeightOptConfig {
        WeightOptConfig {
            lr0: lr,
            momentum,
            weight_decay: wd,
            epochs: 1,
            schedule: Schedule::Constant,
            batch_size: 1,
            grad_clip: None,
        }
    }

    #[test]
    fn plain_sgd() {
        let mut s = one_param(1.0, 1.0);
        sgd_step(&mut s, &mut SgdState::default(), &plain(0.1, 0.0, 0.0), 0).unwrap();
        assert!((s.value("w").unwrap().data()[0] - 0.9).abs() < 1e-15);
    }

    #[test]
    fn momentum_unrolled() {
        let mut s = one_param(0.0, 2.0);
        let cfg = plain(0.01, 0.9, 0.0);
        let mut st = SgdState::default();
        sgd_step(&mut s, &mut st, &cfg, 0).unwrap();
        let after_first = s.value("w").unwrap().data()[0];
        sgd_step(&mut s, &mut st, &cfg, 0).unwrap();
        let second = after_first - s.value("w").unwrap().data()[0];
        assert!((second - 1.9 * 0.01 * 2.0).abs() < 1e-15);
    }

    #[test]
    fn nan_gradient_aborts() {
        let mut s = one_param(1.0, f64::NAN);
        let err = sgd_step(&mut s, &mut SgdState::default(), &plain(0.1, 0.0, 0.0), 0).unwrap_err();
        assert!(matches!(err, Error::NonFinite(m) if m.contains("w")));
        let mut s = one_param(1.0, f64::INFINITY);
        assert!(adam_step(&mut s, &mut AdamState::default(), &ArchOptConfig::default()).is_err());
    }

    #[test]
    fn schedules() {
        let search = WeightOptConfig::search();
        assert_eq!(search.lr(0), 0.025);
        assert!(search.lr(49) < 1e-3 * 0.025);
        let fin = WeightOptConfig::final_training();
        for e in 0..150 {
            assert!((fin.lr(e) - 0.1 * 0.97f64.powi(e as i32)).abs() < 1e-12);
        }
    }

    #[test]
    fn adam_zero_gradient_is_identity() {
        let mut s = one_param(0.7, 0.0);
        let cfg = ArchOptConfig {
            weight_decay: 0.0,
            ..ArchOptConfig::default()
        };
        adam_step(&mut s, &mut AdamState::default(), &cfg).unwrap();
        assert_eq!(s.value("w").unwrap().data()[0], 0.7);
    }

    #[test]
    fn adam_constant_gradient_saturates_to_lr() {
        let cfg = ArchOptConfig {
            weight_decay: 0.0,
            ..ArchOptConfig::default()
        };
        let mut s = one_param(0.0, 0.5);
        let mut st = AdamState::default();
        let mut last = 0.0;
        for _ in 0..2000 {
            let before = s.value("w").unwrap().data()[0];
            adam_step(&mut s, &mut st, &cfg).unwrap();
            last = s.value("w").unwrap().data()[0] - before;
        }
        assert!(last < 0.0);
        assert!((last.abs() - cfg.lr).abs() < 1e-9);
    }
}
