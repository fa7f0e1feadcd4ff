//! Optimiser, learning-rate schedule, training loop and evaluation.

use std::sync::mpsc::{sync_channel, Receiver};
use std::thread::JoinHandle;

use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, ParamStore};
use crate::error::{Error, Result};
use crate::flow::{sequence_loss, FlowNet};
use crate::synth::{generate, Metrics, MetricsAccumulator, SceneParams, SceneSpec, SyntheticSample};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OptimConfig {
    pub lr: f64,
    /// First-moment decay; 0 gives a momentum-free update.
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    /// Fraction of steps spent warming up.
    pub warmup: f64,
    /// Global gradient-norm clip; 0 disables clipping.
    pub clip: f64,
}

impl Default for OptimConfig {
    fn default() -> Self {
        Self {
            lr: 2.5e-4,
            beta1: 0.0,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 1e-5,
            warmup: 0.05,
            clip: 1.0,
        }
    }
}

/// One-cycle schedule: linear warm-up to `peak`, then linear decay to
/// `peak / 1000` at `total`.
pub fn one_cycle(step: usize, total: usize, peak: f64, warmup: f64) -> f64 {
    let total = total.max(1) as f64;
    let up = (warmup * total).max(1.0);
    let s = step as f64;
    let floor = peak * 1e-3;
    if s < up {
        floor + (peak - floor) * s / up
    } else {
        let t = ((s - up) / (total - up).max(1.0)).min(1.0);
        peak + (floor - peak) * t
    }
}

/// AdamW with decoupled weight decay.
#[derive(Clone, Debug)]
pub struct AdamW {
    pub cfg: OptimConfig,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    t: i32,
}

impl AdamW {
    pub fn new(cfg: OptimConfig, store: &ParamStore) -> Self {
        let zeros = || store.iter().map(|p| vec![0.0; p.value.len()]).collect();
        Self {
            cfg,
            m: zeros(),
            v: zeros(),
            t: 0,
        }
    }

    /// Applies the accumulated gradients at learning rate `lr`. Returns the
    /// gradient norm before clipping.
    pub fn step(&mut self, store: &mut ParamStore, lr: f64) -> f64 {
        let norm = store.grad_norm();
        let scale = if self.cfg.clip > 0.0 && norm > self.cfg.clip {
            self.cfg.clip / norm
        } else {
            1.0
        };
        self.t += 1;
        let c = &self.cfg;
        let bc1 = 1.0 - c.beta1.powi(self.t);
        let bc2 = 1.0 - c.beta2.powi(self.t);
        for ((p, m), v) in store.iter_mut().zip(&mut self.m).zip(&mut self.v) {
            let (value, grad) = (p.value.data_mut(), p.grad.data());
            for i in 0..value.len() {
                let g = grad[i] * scale;
                m[i] = c.beta1 * m[i] + (1.0 - c.beta1) * g;
                v[i] = c.beta2 * v[i] + (1.0 - c.beta2) * g * g;
                let update = (m[i] / bc1) / ((v[i] / bc2).sqrt() + c.eps);
                value[i] -= lr * (update + c.weight_decay * value[i]);
            }
        }
        norm
    }
}

/// Where training pairs come from.
pub enum DataSource {
    /// Cycles through a fixed set.
    Fixed(Vec<SyntheticSample>),
    /// Fresh scenes rendered on a worker thread, seeds `base, base+1, …`.
    Stream {
        rx: Receiver<Result<SyntheticSample>>,
        worker: Option<JoinHandle<()>>,
    },
}

impl DataSource {
    pub fn stream(params: SceneParams, base: u64, count: usize) -> Self {
        let (tx, rx) = sync_channel(4);
        let worker = std::thread::spawn(move || {
            for i in 0..count as u64 {
                let sample = generate(&SceneSpec::random(&params, base + i));
                if tx.send(sample).is_err() {
                    break;
                }
            }
        });
        Self::Stream {
            rx,
            worker: Some(worker),
        }
    }

    fn next(&mut self, step: usize) -> Result<SyntheticSample> {
        match self {
            Self::Fixed(set) => Ok(set[step % set.len()].clone()),
            Self::Stream { rx, .. } => rx
                .recv()
                .map_err(|_| Error::Config("sample stream ended early".into()))?,
        }
    }
}

impl Drop for DataSource {
    fn drop(&mut self) {
        if let Self::Stream { rx, worker } = self {
            // a closed receiver makes the producer's pending send fail
            drop(std::mem::replace(rx, sync_channel(0).1));
            if let Some(w) = worker.take() {
                let _ = w.join();
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub steps: usize,
    pub gamma: f64,
    /// Evaluate every this many steps (and after the last); 0 only at the end.
    pub eval_every: usize,
    pub optim: OptimConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 2000,
            gamma: 0.8,
            eval_every: 500,
            optim: OptimConfig::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum Event {
    Step { step: usize, loss: f64, lr: f64, grad_norm: f64 },
    Eval { step: usize, metrics: Metrics },
}

/// Whether to continue after an event.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Control {
    Continue,
    Stop,
}

/// One forward/backward pass on `sample`; gradients are left in `store`.
pub fn loss_and_grad(model: &FlowNet, store: &mut ParamStore, sample: &SyntheticSample, gamma: f64) -> Result<f64> {
    store.zero_grad();
    let g = Graph::new();
    let out = model.forward(&g, store, &sample.img1, &sample.img2)?;
    let loss = sequence_loss(&out.predictions, &sample.flow, &sample.valid, gamma)?;
    g.backward(loss);
    store.accumulate(&g);
    Ok(loss.value().data()[0])
}

/// Pixel-pooled metrics of the final prediction over `samples`.
pub fn evaluate(model: &FlowNet, store: &ParamStore, samples: &[SyntheticSample]) -> Result<Metrics> {
    let mut acc = MetricsAccumulator::default();
    for s in samples {
        let pred = model.predict(store, &s.img1, &s.img2)?;
        acc.add(&pred, &s.flow, &s.valid)?;
    }
    acc.finish("evaluate")
}

/// Runs `cfg.steps` optimiser steps, reporting every step and evaluation
/// to `on_event`.
pub fn train(
    model: &FlowNet,
    store: &mut ParamStore,
    cfg: &TrainConfig,
    data: &mut DataSource,
    eval_set: &[SyntheticSample],
    mut on_event: impl FnMut(&Event) -> Result<Control>,
) -> Result<()> {
    let mut opt = AdamW::new(cfg.optim.clone(), store);
    for step in 0..cfg.steps {
        let sample = data.next(step)?;
        let loss = loss_and_grad(model, store, &sample, cfg.gamma)?;
        if !loss.is_finite() {
            return Err(Error::NonFinite { step });
        }
        let lr = one_cycle(step, cfg.steps, cfg.optim.lr, cfg.optim.warmup);
        let grad_norm = opt.step(store, lr);
        let mut control = on_event(&Event::Step {
            step,
            loss,
            lr,
            grad_norm,
        })?;
        let done = step + 1 == cfg.steps;
        let due = cfg.eval_every > 0 && (step + 1) % cfg.eval_every == 0;
        if !eval_set.is_empty() && (due || done) {
            let metrics = evaluate(model, store, eval_set)?;
            let c = on_event(&Event::Eval { step: step + 1, metrics })?;
            if c == Control::Stop {
                control = c;
            }
        }
        if control == Control::Stop {
            break;
        }
    }
    Ok(())
}

/// Copies `values` into a store by parameter name.
pub fn assign(store: &mut ParamStore, values: &[(String, Tensor)]) -> Result<()> {
    if values.len() != store.len() {
        return Err(Error::Config(format!(
            "checkpoint holds {} tensors, model has {}",
            values.len(),
            store.len()
        )));
    }
    for (name, t) in values {
        let id = store
            .find(name)
            .ok_or_else(|| Error::Config(format!("checkpoint tensor {name:?} not in model")))?;
        if store.value(id).shape() != t.shape() {
            return Err(Error::Config(format!("checkpoint tensor {name:?} has the wrong shape")));
        }
        *store.value_mut(id) = t.clone();
    }
    Ok(())
}
