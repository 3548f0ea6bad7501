//! Named parameter storage and per-step binding onto a tape.
//!
//! Parameters persist across optimization steps in a [`ParamStore`]. Each
//! forward pass builds a fresh [`Tape`]; a [`Frame`] attaches every stored
//! parameter to it as a leaf and collects batch-norm statistics produced
//! along the way. After `backward`, [`ParamStore::accumulate_grads`] copies
//! leaf gradients back into the store.

use std::cell::RefCell;
use std::collections::BTreeMap;

use rand::Rng;
use rand_distr::{Distribution, Normal, Uniform};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::ops::norm::BN_MOMENTUM;
use crate::ops::BatchStats;
use crate::tensor::{Real, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum Mode {
    #[default]
    Train,
    Eval,
}

#[derive(Clone, Debug)]
pub struct Param<T> {
    pub value: Tensor<T>,
    pub grad: Tensor<T>,
    pub requires_grad: bool,
}

/// Trainable parameters plus non-trainable buffers (running statistics),
/// both keyed by unique names and iterated in lexicographic order.
#[derive(Clone, Debug, Default)]
pub struct ParamStore<T> {
    params: BTreeMap<String, Param<T>>,
    buffers: BTreeMap<String, Tensor<T>>,
    mode: Mode,
}

impl<T: Real> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore {
            params: BTreeMap::new(),
            buffers: BTreeMap::new(),
            mode: Mode::Train,
        }
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor<T>) -> Result<()> {
        let name = name.into();
        if self.params.contains_key(&name) || self.buffers.contains_key(&name) {
            return Err(Error::InvalidArgument(format!("duplicate parameter name {name}")));
        }
        let grad = value.zeros_like();
        self.params.insert(
            name,
            Param {
                value,
                grad,
                requires_grad: true,
            },
        );
        Ok(())
    }

    pub fn insert_buffer(&mut self, name: impl Into<String>, value: Tensor<T>) -> Result<()> {
        let name = name.into();
        if self.params.contains_key(&name) || self.buffers.contains_key(&name) {
            return Err(Error::InvalidArgument(format!("duplicate buffer name {name}")));
        }
        self.buffers.insert(name, value);
        Ok(())
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn set_mode(&mut self, mode: Mode) {
        self.mode = mode;
    }

    pub fn get(&self, name: &str) -> Option<&Param<T>> {
        self.params.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Param<T>> {
        self.params.get_mut(name)
    }

    pub fn value(&self, name: &str) -> Result<&Tensor<T>> {
        self.params
            .get(name)
            .map(|p| &p.value)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown parameter {name}")))
    }

    pub fn buffer(&self, name: &str) -> Result<&Tensor<T>> {
        self.buffers
            .get(name)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown buffer {name}")))
    }

    pub fn buffer_mut(&mut self, name: &str) -> Option<&mut Tensor<T>> {
        self.buffers.get_mut(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Param<T>)> {
        self.params.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Param<T>)> {
        self.params.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn buffers(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.buffers.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    /// Number of scalar trainable weights.
    pub fn count(&self) -> usize {
        self.params.values().map(|p| p.value.numel()).sum()
    }

    /// Scalar count of parameters whose name satisfies `pred`.
    pub fn count_where(&self, pred: impl Fn(&str) -> bool) -> usize {
        self.params
            .iter()
            .filter(|(k, _)| pred(k))
            .map(|(_, p)| p.value.numel())
            .sum()
    }

    pub fn zero_grad(&mut self) {
        for p in self.params.values_mut() {
            p.grad.data_mut().fill(T::zero());
        }
    }

    /// Adds the tape gradients of every bound parameter into the store.
    pub fn accumulate_grads(&mut self, tape: &Tape<T>, vars: &BTreeMap<String, Var>) -> Result<()> {
        for (name, &var) in vars {
            let Some(param) = self.params.get_mut(name) else {
                return Err(Error::Invariant(format!("bound parameter {name} vanished")));
            };
            if let Some(g) = tape.grad(var) {
                param.grad.add_assign(&g)?;
            }
        }
        Ok(())
    }

    /// Blends batch statistics into the running buffers with momentum 0.1.
    pub fn apply_stats(&mut self, stats: Vec<(String, BatchStats<T>)>) -> Result<()> {
        let m = T::lit(BN_MOMENTUM);
        for (prefix, s) in stats {
            for (suffix, batch) in [("running_mean", &s.mean), ("running_var", &s.var)] {
                let name = format!("{prefix}.{suffix}");
                let buf = self
                    .buffers
                    .get_mut(&name)
                    .ok_or_else(|| Error::Invariant(format!("missing buffer {name}")))?;
                for (r, &b) in buf.data_mut().iter_mut().zip(batch) {
                    *r = (T::one() - m) * *r + m * b;
                }
            }
        }
        Ok(())
    }

    /// Registers `(gamma, beta)` when `affine`, and running statistics, for a
    /// batch-norm layer over `channels` channels.
    pub fn add_batch_norm(&mut self, prefix: &str, channels: usize, affine: bool) -> Result<()> {
        if affine {
            self.insert(format!("{prefix}.weight"), Tensor::ones([channels])?)?;
            self.insert(format!("{prefix}.bias"), Tensor::zeros([channels])?)?;
        }
        self.insert_buffer(format!("{prefix}.running_mean"), Tensor::zeros([channels])?)?;
        self.insert_buffer(format!("{prefix}.running_var"), Tensor::ones([channels])?)?;
        Ok(())
    }

    /// Registers a convolution kernel with uniform `±1/√fan_in` initialization.
    pub fn add_conv<R: Rng>(&mut self, name: &str, dims: [usize; 4], rng: &mut R) -> Result<()> {
        let fan_in = dims[1] * dims[2] * dims[3];
        self.insert(name, uniform_init(dims.to_vec(), fan_in, rng)?)
    }

    /// Registers `name.weight (out, in)` and `name.bias (out)`.
    pub fn add_linear<R: Rng>(&mut self, name: &str, inputs: usize, outputs: usize, rng: &mut R) -> Result<()> {
        self.insert(
            format!("{name}.weight"),
            uniform_init(vec![outputs, inputs], inputs, rng)?,
        )?;
        self.insert(format!("{name}.bias"), uniform_init(vec![outputs], inputs, rng)?)
    }
}

pub fn uniform_init<T: Real, R: Rng>(dims: Vec<usize>, fan_in: usize, rng: &mut R) -> Result<Tensor<T>> {
    let bound = 1.0 / (fan_in as f64).sqrt();
    let dist = Uniform::new_inclusive(-bound, bound).expect("finite bound");
    let n = dims.iter().product();
    Tensor::from_vec(dims, (0..n).map(|_| T::lit(dist.sample(rng))).collect())
}

pub fn normal_init<T: Real, R: Rng>(dims: Vec<usize>, std: f64, rng: &mut R) -> Result<Tensor<T>> {
    let dist = Normal::new(0.0, std).map_err(|e| Error::InvalidArgument(e.to_string()))?;
    let n = dims.iter().product();
    Tensor::from_vec(dims, (0..n).map(|_| T::lit(dist.sample(rng))).collect())
}

/// One forward pass worth of parameter bindings on a tape.
pub struct Frame<'a, T: Real> {
    tape: &'a Tape<T>,
    store: &'a ParamStore<T>,
    vars: BTreeMap<String, Var>,
    stats: RefCell<Vec<(String, BatchStats<T>)>>,
}

/// What a frame leaves behind once the forward pass is over.
pub struct FrameOutput<T> {
    pub vars: BTreeMap<String, Var>,
    pub stats: Vec<(String, BatchStats<T>)>,
}

impl<'a, T: Real> Frame<'a, T> {
    pub fn new(tape: &'a Tape<T>, store: &'a ParamStore<T>) -> Self {
        let vars = store
            .params
            .iter()
            .map(|(name, p)| (name.clone(), tape.leaf(p.value.clone(), p.requires_grad)))
            .collect();
        Frame {
            tape,
            store,
            vars,
            stats: RefCell::new(Vec::new()),
        }
    }

    /// Binds every parameter as a constant leaf, so no weight gradients are
    /// computed.
    pub fn frozen(tape: &'a Tape<T>, store: &'a ParamStore<T>) -> Self {
        let vars = store
            .params
            .iter()
            .map(|(name, p)| (name.clone(), tape.constant(p.value.clone())))
            .collect();
        Frame {
            tape,
            store,
            vars,
            stats: RefCell::new(Vec::new()),
        }
    }

    /// Binds only the parameters whose names start with `prefix`.
    pub fn with_prefix(tape: &'a Tape<T>, store: &'a ParamStore<T>, prefix: &str) -> Self {
        let vars = store
            .params
            .range(prefix.to_string()..)
            .take_while(|(name, _)| name.starts_with(prefix))
            .map(|(name, p)| (name.clone(), tape.leaf(p.value.clone(), p.requires_grad)))
            .collect();
        Frame {
            tape,
            store,
            vars,
            stats: RefCell::new(Vec::new()),
        }
    }

    pub fn tape(&self) -> &'a Tape<T> {
        self.tape
    }

    pub fn mode(&self) -> Mode {
        self.store.mode
    }

    pub fn param(&self, name: &str) -> Result<Var> {
        self.vars
            .get(name)
            .copied()
            .ok_or_else(|| Error::InvalidArgument(format!("unknown parameter {name}")))
    }

    pub fn vars(&self) -> &BTreeMap<String, Var> {
        &self.vars
    }

    /// Applies the batch-norm layer registered under `prefix`.
    pub fn batch_norm(&self, prefix: &str, x: Var, affine: bool) -> Result<Var> {
        let affine = if affine {
            Some((
                self.param(&format!("{prefix}.weight"))?,
                self.param(&format!("{prefix}.bias"))?,
            ))
        } else {
            None
        };
        match self.store.mode {
            Mode::Train => {
                let (y, stats) = self.tape.batch_norm_train(x, affine)?;
                self.stats.borrow_mut().push((prefix.to_string(), stats));
                Ok(y)
            }
            Mode::Eval => {
                let mean = self.store.buffer(&format!("{prefix}.running_mean"))?;
                let var = self.store.buffer(&format!("{prefix}.running_var"))?;
                self.tape.batch_norm_eval(x, affine, mean.data(), var.data())
            }
        }
    }

    pub fn finish(self) -> FrameOutput<T> {
        FrameOutput {
            vars: self.vars,
            stats: self.stats.into_inner(),
        }
    }
}
