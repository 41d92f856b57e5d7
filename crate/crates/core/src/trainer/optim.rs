//! Optimizers and the step learning-rate schedule.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::layers::Param;
use crate::tensor::{Element, Tensor};

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPSILON: f64 = 1e-8;

/// Piecewise-constant schedule: `base` divided by every divisor whose
/// milestone epoch has been reached (epochs are 0-based).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LrSchedule {
    pub base: f64,
    pub milestones: Vec<(usize, f64)>,
}

impl LrSchedule {
    pub fn new(base: f64, milestones: Vec<(usize, f64)>) -> Result<Self> {
        if !(base.is_finite() && base > 0.0) {
            return Err(Error::Config(format!("base learning rate must be positive, got {base}")));
        }
        for w in milestones.windows(2) {
            if w[1].0 <= w[0].0 {
                return Err(Error::Config("learning-rate milestones must be strictly increasing".into()));
            }
        }
        if let Some(&(e, d)) = milestones.iter().find(|(_, d)| !(d.is_finite() && *d >= 1.0)) {
            return Err(Error::Config(format!("milestone divisor at epoch {e} must be >= 1, got {d}")));
        }
        Ok(Self { base, milestones })
    }

    pub fn lr(&self, epoch: usize) -> f64 {
        self.milestones
            .iter()
            .filter(|(m, _)| epoch >= *m)
            .fold(self.base, |lr, (_, d)| lr / d)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase", tag = "kind")]
pub enum OptimizerKind {
    Adam,
    Sgd { momentum: f64 },
}

/// Updates a parameter list in place from the gradients stored alongside it.
pub trait Optimizer<E: Element> {
    fn step(&mut self, params: &mut [&mut Param<E>], lr: f64) -> Result<()>;
}

pub fn make_optimizer<E: Element>(kind: OptimizerKind) -> Box<dyn Optimizer<E>> {
    match kind {
        OptimizerKind::Adam => Box::new(Adam::new()),
        OptimizerKind::Sgd { momentum } => Box::new(Sgd::new(momentum)),
    }
}

/// Bias-corrected Adam. Moments are kept in `f64` regardless of `E`.
#[derive(Debug, Clone, Default)]
pub struct Adam {
    pub t: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new() -> Self {
        Self::default()
    }
}

fn check_state<E: Element>(state: &mut Vec<Vec<f64>>, params: &[&mut Param<E>]) -> Result<()> {
    if state.is_empty() {
        *state = params.iter().map(|p| vec![0.0; p.value.len()]).collect();
    }
    if state.len() != params.len() {
        return Err(Error::Shape(format!(
            "optimizer state has {} slots, got {} parameters",
            state.len(),
            params.len()
        )));
    }
    for (s, p) in state.iter().zip(params) {
        if s.len() != p.value.len() || p.grad.shape() != p.value.shape() {
            return Err(Error::Shape(format!(
                "parameter {}: value {:?}, gradient {:?}, state of {} entries",
                p.name,
                p.value.shape(),
                p.grad.shape(),
                s.len()
            )));
        }
    }
    Ok(())
}

impl<E: Element> Optimizer<E> for Adam {
    fn step(&mut self, params: &mut [&mut Param<E>], lr: f64) -> Result<()> {
        check_state(&mut self.m, params)?;
        check_state(&mut self.v, params)?;
        self.t += 1;
        let c1 = 1.0 - ADAM_BETA1.powi(self.t as i32);
        let c2 = 1.0 - ADAM_BETA2.powi(self.t as i32);
        for ((p, m), v) in params.iter_mut().zip(&mut self.m).zip(&mut self.v) {
            let grad = p.grad.data();
            for (((w, &g), m), v) in p.value.data_mut().iter_mut().zip(grad).zip(m.iter_mut()).zip(v.iter_mut()) {
                let g = g.widen();
                *m = ADAM_BETA1 * *m + (1.0 - ADAM_BETA1) * g;
                *v = ADAM_BETA2 * *v + (1.0 - ADAM_BETA2) * g * g;
                let update = lr * (*m / c1) / ((*v / c2).sqrt() + ADAM_EPSILON);
                *w = E::lit(w.widen() - update);
            }
        }
        Ok(())
    }
}

/// SGD with heavy-ball momentum (`momentum = 0` is plain SGD).
#[derive(Debug, Clone)]
pub struct Sgd {
    pub momentum: f64,
    velocity: Vec<Vec<f64>>,
}

impl Sgd {
    pub fn new(momentum: f64) -> Self {
        Self {
            momentum,
            velocity: Vec::new(),
        }
    }
}

impl<E: Element> Optimizer<E> for Sgd {
    fn step(&mut self, params: &mut [&mut Param<E>], lr: f64) -> Result<()> {
        check_state(&mut self.velocity, params)?;
        for (p, vel) in params.iter_mut().zip(&mut self.velocity) {
            let grad = p.grad.data();
            for ((w, &g), v) in p.value.data_mut().iter_mut().zip(grad).zip(vel.iter_mut()) {
                *v = self.momentum * *v + g.widen();
                *w = E::lit(w.widen() - lr * *v);
            }
        }
        Ok(())
    }
}

/// Single Adam step on free-standing tensors; `state` is `(t, m, v)`.
pub fn adam_step(params: &mut [Tensor], grads: &[Tensor], state: &mut Adam, lr: f64) -> Result<()> {
    if params.len() != grads.len() {
        return Err(Error::Shape(format!("{} parameters but {} gradients", params.len(), grads.len())));
    }
    let mut wrapped: Vec<Param<f64>> = Vec::with_capacity(params.len());
    for (p, g) in params.iter().zip(grads) {
        if p.shape() != g.shape() {
            return Err(Error::Shape(format!("parameter {:?} vs gradient {:?}", p.shape(), g.shape())));
        }
        wrapped.push(Param {
            name: "tensor",
            value: p.clone(),
            grad: g.clone(),
        });
    }
    let mut refs: Vec<&mut Param<f64>> = wrapped.iter_mut().collect();
    state.step(&mut refs, lr)?;
    for (dst, src) in params.iter_mut().zip(wrapped) {
        *dst = src.value;
    }
    Ok(())
}
