//! Central finite-difference checks of reverse-mode gradients.
//!
//! A checked function maps leaf inputs (and the parameters of a
//! [`ParamStore`]) to an output tensor `y`. The scalar probed is
//! `Σ r ⊙ y` for a fixed random `r`, so every output element contributes.
//! Each scalar input is perturbed by `±eps` and the error reported is
//! `|analytic − numeric| / max(|analytic|, |numeric|, floor)`.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autograd::{Graph, ParamStore, Var};
use crate::error::Result;
use crate::tensor::Tensor;

#[derive(Clone, Debug)]
pub struct GradCheckConfig {
    pub eps: f64,
    pub tolerance: f64,
    /// Magnitude below which errors are measured absolutely.
    pub floor: f64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        Self {
            eps: 1e-5,
            tolerance: 1e-4,
            floor: 1e-3,
        }
    }
}

impl GradCheckConfig {
    pub fn with_tolerance(mut self, tolerance: f64) -> Self {
        self.tolerance = tolerance;
        self
    }
}

#[derive(Clone, Debug)]
pub struct CheckResult {
    pub name: String,
    pub max_rel_error: f64,
    pub checked: usize,
    pub tolerance: f64,
    /// Location of the worst entry, e.g. `input 0[17]` or `param gca.q.weight[3]`.
    pub worst_at: String,
}

impl CheckResult {
    pub fn passed(&self) -> bool {
        self.max_rel_error < self.tolerance
    }
}

fn probe_loss<'g>(g: &'g Graph, out: Var<'g>, seed: u64) -> Var<'g> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let r = Tensor::rand_uniform(&out.shape(), -1.0, 1.0, &mut rng);
    out.mul(g.constant(r)).sum()
}

/// Checks gradients of `f` with respect to every element of `inputs` and
/// of every parameter in `store`.
pub fn check<F>(
    name: &str,
    store: &mut ParamStore,
    inputs: &[Tensor],
    f: F,
    cfg: &GradCheckConfig,
    seed: u64,
) -> Result<CheckResult>
where
    F: for<'g> Fn(&'g Graph, &ParamStore, &[Var<'g>]) -> Result<Var<'g>>,
{
    let eval = |store: &ParamStore, inputs: &[Tensor]| -> Result<f64> {
        let g = Graph::new();
        let leaves: Vec<_> = inputs.iter().map(|t| g.constant(t.clone())).collect();
        let out = f(&g, store, &leaves)?;
        let loss = probe_loss(&g, out, seed);
        let v = loss.value().data()[0];
        Ok(v)
    };

    // analytic
    let g = Graph::new();
    let leaves: Vec<_> = inputs.iter().map(|t| g.leaf(t.clone())).collect();
    let out = f(&g, store, &leaves)?;
    g.backward(probe_loss(&g, out, seed));
    let input_grads: Vec<Tensor> = leaves
        .iter()
        .zip(inputs)
        .map(|(v, t)| v.grad().unwrap_or_else(|| Tensor::zeros(t.shape())))
        .collect();
    store.zero_grad();
    store.accumulate(&g);
    drop(g);

    let mut worst = (0.0f64, String::from("-"));
    let mut checked = 0usize;
    let mut record = |a: f64, n: f64, at: String| {
        let err = (a - n).abs() / a.abs().max(n.abs()).max(cfg.floor);
        if err > worst.0 || err.is_nan() {
            worst = (if err.is_nan() { f64::INFINITY } else { err }, at);
        }
        checked += 1;
    };

    let mut work = inputs.to_vec();
    for (i, grad) in input_grads.iter().enumerate() {
        for j in 0..work[i].len() {
            let orig = work[i].data()[j];
            work[i].data_mut()[j] = orig + cfg.eps;
            let plus = eval(store, &work)?;
            work[i].data_mut()[j] = orig - cfg.eps;
            let minus = eval(store, &work)?;
            work[i].data_mut()[j] = orig;
            record(grad.data()[j], (plus - minus) / (2.0 * cfg.eps), format!("input {i}[{j}]"));
        }
    }

    let analytic: Vec<(String, Tensor)> = store.iter().map(|p| (p.name.clone(), p.grad.clone())).collect();
    for (pi, (pname, grad)) in analytic.iter().enumerate() {
        for j in 0..grad.len() {
            let orig = store.iter().nth(pi).unwrap().value.data()[j];
            set_param(store, pi, j, orig + cfg.eps);
            let plus = eval(store, inputs)?;
            set_param(store, pi, j, orig - cfg.eps);
            let minus = eval(store, inputs)?;
            set_param(store, pi, j, orig);
            record(grad.data()[j], (plus - minus) / (2.0 * cfg.eps), format!("param {pname}[{j}]"));
        }
    }

    Ok(CheckResult {
        name: name.to_string(),
        max_rel_error: worst.0,
        checked,
        tolerance: cfg.tolerance,
        worst_at: worst.1,
    })
}

fn set_param(store: &mut ParamStore, index: usize, j: usize, v: f64) {
    store.iter_mut().nth(index).unwrap().value.data_mut()[j] = v;
}
