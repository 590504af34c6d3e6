use std::hash::{DefaultHasher, Hasher};

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::autodiff::{BnMode, ChannelStats, Gradients, Graph, Scalar, Tensor, Var, BN_MOMENTUM};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ParamRole {
    ConvWeight,
    ConvBias,
    BnGamma,
    BnBeta,
    LinearWeight,
    LinearBias,
}

impl ParamRole {
    pub fn is_bn_affine(self) -> bool {
        matches!(self, ParamRole::BnGamma | ParamRole::BnBeta)
    }

    pub fn tag(self) -> &'static str {
        match self {
            ParamRole::ConvWeight => "conv_weight",
            ParamRole::ConvBias => "conv_bias",
            ParamRole::BnGamma => "bn_gamma",
            ParamRole::BnBeta => "bn_beta",
            ParamRole::LinearWeight => "linear_weight",
            ParamRole::LinearBias => "linear_bias",
        }
    }

    pub fn from_tag(tag: &str) -> Option<Self> {
        Some(match tag {
            "conv_weight" => ParamRole::ConvWeight,
            "conv_bias" => ParamRole::ConvBias,
            "bn_gamma" => ParamRole::BnGamma,
            "bn_beta" => ParamRole::BnBeta,
            "linear_weight" => ParamRole::LinearWeight,
            "linear_bias" => ParamRole::LinearBias,
            _ => return None,
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Param<S> {
    pub name: String,
    pub role: ParamRole,
    pub value: Tensor<S>,
    pub trainable: bool,
}

/// Running statistics of one batch-norm layer.
#[derive(Debug, Clone, PartialEq)]
pub struct BnState {
    pub name: String,
    pub running: ChannelStats,
}

impl BnState {
    pub fn new(name: impl Into<String>, channels: usize) -> Self {
        Self {
            name: name.into(),
            running: ChannelStats {
                mean: vec![0.0; channels],
                var: vec![1.0; channels],
            },
        }
    }

    /// `running <- (1 - m) running + m batch`.
    pub fn absorb(&mut self, batch: &ChannelStats) {
        let m = BN_MOMENTUM;
        for (r, b) in self.running.mean.iter_mut().zip(&batch.mean) {
            *r = (1.0 - m) * *r + m * b;
        }
        for (r, b) in self.running.var.iter_mut().zip(&batch.var) {
            *r = (1.0 - m) * *r + m * b;
        }
    }
}

/// Parameters plus batch-norm running statistics of one network.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamSet<S> {
    pub params: Vec<Param<S>>,
    pub bn: Vec<BnState>,
}

impl<S: Scalar> Default for ParamSet<S> {
    fn default() -> Self {
        Self {
            params: Vec::new(),
            bn: Vec::new(),
        }
    }
}

impl<S: Scalar> ParamSet<S> {
    pub(crate) fn add(&mut self, name: String, role: ParamRole, value: Tensor<S>) -> usize {
        self.params.push(Param {
            name,
            role,
            value,
            trainable: true,
        });
        self.params.len() - 1
    }

    pub(crate) fn add_bn(&mut self, name: String, channels: usize) -> (usize, usize, usize) {
        let gamma = self.add(
            format!("{name}.gamma"),
            ParamRole::BnGamma,
            Tensor::full(&[channels], S::one()),
        );
        let beta = self.add(format!("{name}.beta"), ParamRole::BnBeta, Tensor::zeros(&[channels]));
        self.bn.push(BnState::new(name, channels));
        (gamma, beta, self.bn.len() - 1)
    }

    pub fn count(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    pub fn trainable_count(&self) -> usize {
        self.params.iter().filter(|p| p.trainable).map(|p| p.value.len()).sum()
    }

    pub fn set_trainable(&mut self, pred: impl Fn(usize, &Param<S>) -> bool) {
        for i in 0..self.params.len() {
            let t = pred(i, &self.params[i]);
            self.params[i].trainable = t;
        }
    }

    pub fn find(&self, name: &str) -> Option<&Param<S>> {
        self.params.iter().find(|p| p.name == name)
    }

    pub fn find_mut(&mut self, name: &str) -> Option<&mut Param<S>> {
        self.params.iter_mut().find(|p| p.name == name)
    }

    /// Registers every parameter on the tape: trainable ones as gradient
    /// leaves, frozen ones as constants.
    pub fn register(&self, g: &mut Graph<S>) -> Vec<Var> {
        self.params
            .iter()
            .map(|p| {
                if p.trainable {
                    g.param(p.value.clone())
                } else {
                    g.constant(p.value.clone())
                }
            })
            .collect()
    }

    /// Hash over the bit patterns of the selected parameters.
    pub fn checksum(&self, select: impl Fn(&Param<S>) -> bool) -> u64 {
        let mut h = DefaultHasher::new();
        for p in self.params.iter().filter(|p| select(p)) {
            h.write(p.name.as_bytes());
            for v in p.value.data() {
                h.write_u64(v.as_f64().to_bits());
            }
        }
        h.finish()
    }

    /// Hash over running statistics of every batch-norm layer.
    pub fn bn_stats_checksum(&self) -> u64 {
        let mut h = DefaultHasher::new();
        for b in &self.bn {
            for v in b.running.mean.iter().chain(&b.running.var) {
                h.write_u64(v.to_bits());
            }
        }
        h.finish()
    }

    pub fn cast<T: Scalar>(&self) -> ParamSet<T> {
        ParamSet {
            params: self
                .params
                .iter()
                .map(|p| Param {
                    name: p.name.clone(),
                    role: p.role,
                    value: p.value.cast(),
                    trainable: p.trainable,
                })
                .collect(),
            bn: self.bn.clone(),
        }
    }

    /// Copies values and running statistics from `other`, which must have
    /// the same layout. Trainability flags are kept.
    pub fn load_from(&mut self, other: &ParamSet<S>) -> Result<()> {
        if other.params.len() != self.params.len() || other.bn.len() != self.bn.len() {
            return Err(Error::Shape("parameter sets have different layouts".into()));
        }
        for (dst, src) in self.params.iter_mut().zip(&other.params) {
            if dst.name != src.name || dst.value.shape() != src.value.shape() {
                return Err(Error::Shape(format!(
                    "parameter {} {:?} does not match {} {:?}",
                    dst.name,
                    dst.value.shape(),
                    src.name,
                    src.value.shape()
                )));
            }
            dst.value = src.value.clone();
        }
        for (dst, src) in self.bn.iter_mut().zip(&other.bn) {
            if dst.name != src.name || dst.running.mean.len() != src.running.mean.len() {
                return Err(Error::Shape(format!(
                    "batch-norm layer {} does not match {}",
                    dst.name, src.name
                )));
            }
            dst.running = src.running.clone();
        }
        Ok(())
    }
}

/// He (fan-in) normal initialization.
pub(crate) fn he_normal<S: Scalar, R: Rng>(shape: &[usize], fan_in: usize, rng: &mut R) -> Tensor<S> {
    let std = (2.0 / fan_in as f64).sqrt();
    let normal = Normal::new(0.0, std).expect("positive std");
    let len = shape.iter().product();
    let data = (0..len).map(|_| S::of(normal.sample(rng))).collect();
    Tensor::new(shape.to_vec(), data).expect("sized to shape")
}

/// Leaves registered for one forward pass, indexed like [`ParamSet::params`].
#[derive(Debug, Clone)]
pub struct Leaves(pub Vec<Var>);

impl Leaves {
    pub fn get(&self, i: usize) -> Var {
        self.0[i]
    }
}

/// Plain SGD with momentum and L2 weight decay on trainable parameters.
#[derive(Debug, Clone)]
pub struct Sgd {
    pub momentum: f64,
    pub weight_decay: f64,
    velocity: Vec<Option<Vec<f64>>>,
}

impl Sgd {
    pub fn new(momentum: f64, weight_decay: f64) -> Self {
        Self {
            momentum,
            weight_decay,
            velocity: Vec::new(),
        }
    }

    /// Applies one update. Parameters that are frozen, or that received no
    /// gradient from this loss, are left bit-identical.
    pub fn step<S: Scalar>(&mut self, set: &mut ParamSet<S>, leaves: &Leaves, grads: &Gradients<S>, lr: f64) {
        if self.velocity.len() < set.params.len() {
            self.velocity.resize(set.params.len(), None);
        }
        for (i, p) in set.params.iter_mut().enumerate() {
            if !p.trainable {
                continue;
            }
            let Some(grad) = grads.get(leaves.get(i)) else { continue };
            let vel = self.velocity[i].get_or_insert_with(|| vec![0.0; grad.len()]);
            for ((w, g), v) in p.value.data_mut().iter_mut().zip(grad.data()).zip(vel.iter_mut()) {
                let d = g.as_f64() + self.weight_decay * w.as_f64();
                *v = self.momentum * *v + d;
                *w = S::of(w.as_f64() - lr * *v);
            }
        }
    }
}

/// Polynomial decay `base * (1 - iter / max_iter)^power`.
pub fn poly_lr(base: f64, iter: usize, max_iter: usize, power: f64) -> f64 {
    if max_iter == 0 {
        return base;
    }
    let frac = (iter.min(max_iter) as f64) / max_iter as f64;
    base * (1.0 - frac).powf(power)
}

/// Runs a batch-norm layer and folds batch statistics into its running state.
pub(crate) fn bn_apply<S: Scalar>(
    g: &mut Graph<S>,
    x: Var,
    gamma: Var,
    beta: Var,
    state: &mut BnState,
    mode: BnMode,
) -> Result<Var> {
    let (y, stats) = g.batch_norm(x, gamma, beta, &state.running, mode, crate::autodiff::BN_EPS)?;
    if let Some(stats) = stats {
        state.absorb(&stats);
    }
    Ok(y)
}
