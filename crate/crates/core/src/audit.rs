//! Registry of finite-difference gradient checks, one per differentiable
//! operator, run by the `gradcheck` command.

use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autograd::{ParamStore, PadMode};
use crate::error::Result;
use crate::flow::{build_corr, sequence_loss};
use crate::gaussian::{amplitude, deform, GaussianKernelSpec, LearnableGaussianKernel};
use crate::gcl::{Gcl, GclConfig};
use crate::ggam::{Ggam, GgamConfig, GgamMode};
use crate::gradcheck::{check, CheckResult, GradCheckConfig};
use crate::nn::{Init, LayerNorm, Linear};
use crate::tensor::Tensor;

pub type ProbeFn = fn(&GradCheckConfig, u64) -> Result<CheckResult>;

pub struct Probe {
    pub name: &'static str,
    pub run: ProbeFn,
}

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn randn(shape: &[usize], r: &mut ChaCha8Rng) -> Tensor {
    Tensor::randn(shape, 1.0, r)
}

/// Replaces every parameter with `N(0, 0.25)` noise so no check runs at a
/// degenerate zero initialisation.
fn randomize(store: &mut ParamStore, r: &mut ChaCha8Rng) {
    for p in store.iter_mut() {
        p.value = Tensor::randn(p.value.shape(), 0.5, r);
    }
}

fn matmul(cfg: &GradCheckConfig, seed: u64) -> Result<CheckResult> {
    let mut r = rng(seed);
    let inputs = [randn(&[3, 4], &mut r), randn(&[4, 5], &mut r)];
    check("matmul", &mut ParamStore::new(), &inputs, |_, _, x| x[0].matmul(x[1]), cfg, seed)
}

fn softmax(cfg: &GradCheckConfig, seed: u64) -> Result<CheckResult> {
    let mut r = rng(seed);
    let inputs = [randn(&[3, 5, 2], &mut r)];
    check("softmax", &mut ParamStore::new(), &inputs, |_, _, x| Ok(x[0].softmax(1)), cfg, seed)
}

fn layer_norm(cfg: &GradCheckConfig, seed: u64) -> Result<CheckResult> {
    let mut r = rng(seed);
    let mut store = ParamStore::new();
    let ln = LayerNorm::new(&mut store, "norm", 4);
    randomize(&mut store, &mut r);
    let inputs = [randn(&[3, 4], &mut r)];
    check("layer_norm", &mut store, &inputs, |g, s, x| ln.forward(g, s, x[0]), cfg, seed)
}

fn linear(cfg: &GradCheckConfig, seed: u64) -> Result<CheckResult> {
    let mut r = rng(seed);
    let mut store = ParamStore::new();
    let lin = Linear::new(&mut store, "linear", 4, 3, Init::FanIn(1.0), seed);
    randomize(&mut store, &mut r);
    let inputs = [randn(&[5, 4], &mut r)];
    check("linear", &mut store, &inputs, |g, s, x| lin.tokens(g, s, x[0]), cfg, seed)
}

fn unfold(cfg: &GradCheckConfig, seed: u64) -> Result<CheckResult> {
    let mut r = rng(seed);
    let inputs = [randn(&[2, 4, 5], &mut r)];
    check("unfold", &mut ParamStore::new(), &inputs, |_, _, x| x[0].unfold(3, PadMode::Zero), cfg, seed)
}

fn bilinear_sample(cfg: &GradCheckConfig, seed: u64) -> Result<CheckResult> {
    let mut r = rng(seed);
    let coords = Tensor::rand_uniform(&[2, 12], -0.8, 4.8, &mut r);
    // keep every coordinate off the integer grid, where the sampler has kinks
    let coords = coords.map(|v| if (v - v.round()).abs() < 0.05 { v + 0.1 } else { v });
    let inputs = [randn(&[2, 4, 5], &mut r), coords];
    check("bilinear_sample", &mut ParamStore::new(), &inputs, |_, _, x| x[0].bilinear_sample(x[1]), cfg, seed)
}

fn materialize(cfg: &GradCheckConfig, seed: u64) -> Result<CheckResult> {
    let mut r = rng(seed);
    let mut store = ParamStore::new();
    let kernel = LearnableGaussianKernel::new(&mut store, "kernel", GaussianKernelSpec::new(3, 1.2)?);
    randomize(&mut store, &mut r);
    let inputs = [randn(&[3, 3], &mut r)];
    check("materialize", &mut store, &inputs, |g, s, x| Ok(kernel.materialize(g, s).mul(x[0])), cfg, seed)
}

fn deform_kernel(cfg: &GradCheckConfig, seed: u64) -> Result<CheckResult> {
    let mut r = rng(seed);
    let spec = GaussianKernelSpec::new(3, 0.9)?;
    let inputs = [Tensor::randn(&[2, 9, 6], 0.7, &mut r)];
    check("deform", &mut ParamStore::new(), &inputs, |_, _, x| deform(&spec, x[0]), cfg, seed)
}

fn amplitude_map(cfg: &GradCheckConfig, seed: u64) -> Result<CheckResult> {
    let mut r = rng(seed);
    let mut store = ParamStore::new();
    let theta = Linear::new(&mut store, "theta", 3, 9, Init::FanIn(1.0), seed);
    let lambda = store.add("lambda", Tensor::scalar(0.0));
    randomize(&mut store, &mut r);
    let inputs = [randn(&[3, 2, 3], &mut r)];
    check(
        "amplitude",
        &mut store,
        &inputs,
        |g, s, x| amplitude(g, s, x[0], &theta, g.param(s, lambda)),
        cfg,
        seed,
    )
}

fn gcl_layer(seed: u64) -> Result<(ParamStore, Gcl)> {
    let mut store = ParamStore::new();
    let gcl = Gcl::new(&mut store, "gcl", GclConfig::new(4, 2, 3, 1.0)?, seed)?;
    randomize(&mut store, &mut rng(seed + 1));
    Ok((store, gcl))
}

fn gca(cfg: &GradCheckConfig, seed: u64) -> Result<CheckResult> {
    let (mut store, gcl) = gcl_layer(seed)?;
    let inputs = [randn(&[4, 4, 5], &mut rng(seed + 2))];
    check("gca", &mut store, &inputs, |g, s, x| gcl.gca(g, s, x[0]), cfg, seed)
}

fn gcl_block(cfg: &GradCheckConfig, seed: u64) -> Result<CheckResult> {
    let (mut store, gcl) = gcl_layer(seed)?;
    let inputs = [randn(&[4, 4, 4], &mut rng(seed + 2))];
    check("gcl_block", &mut store, &inputs, |g, s, x| gcl.block(g, s, x[0]), cfg, seed)
}

fn aggregation(name: &str, mode: GgamMode, cfg: &GradCheckConfig, seed: u64) -> Result<CheckResult> {
    let mut store = ParamStore::new();
    let gcfg = GgamConfig {
        channels: 3,
        window: 3,
        sigma: 1.0,
        mode,
    };
    let m = Ggam::new(&mut store, "ggam", gcfg, seed)?;
    let mut r = rng(seed + 1);
    randomize(&mut store, &mut r);
    let inputs = [randn(&[3, 4, 5], &mut r), randn(&[3, 4, 5], &mut r)];
    check(name, &mut store, &inputs, |g, s, x| m.forward(g, s, x[0], x[1]), cfg, seed)
}

fn ggac(cfg: &GradCheckConfig, seed: u64) -> Result<CheckResult> {
    aggregation("ggac", GgamMode::Ggac, cfg, seed)
}

fn ggad(cfg: &GradCheckConfig, seed: u64) -> Result<CheckResult> {
    aggregation("ggad", GgamMode::Ggad, cfg, seed)
}

fn lookup(cfg: &GradCheckConfig, seed: u64) -> Result<CheckResult> {
    let mut r = rng(seed);
    let inputs = [randn(&[3, 4, 4], &mut r), randn(&[3, 4, 4], &mut r)];
    let flow = Tensor::rand_uniform(&[2, 4, 4], -1.7, 1.7, &mut r);
    check(
        "lookup",
        &mut ParamStore::new(),
        &inputs,
        |_, _, x| build_corr(x[0], x[1], 2)?.lookup(&flow, 1),
        cfg,
        seed,
    )
}

fn loss(cfg: &GradCheckConfig, seed: u64) -> Result<CheckResult> {
    let mut r = rng(seed);
    let gt = randn(&[2, 3, 4], &mut r);
    let valid = Tensor::rand_uniform(&[3, 4], 0.0, 1.0, &mut r).map(|v| if v < 0.75 { 1.0 } else { 0.0 });
    // predictions are kept away from the target, where |·| is not smooth
    let near = |r: &mut ChaCha8Rng| {
        let d = Tensor::rand_uniform(&[2, 3, 4], 0.1, 1.0, r);
        let sign = Tensor::rand_uniform(&[2, 3, 4], -1.0, 1.0, r);
        let mut p = gt.clone();
        for ((p, d), s) in p.data_mut().iter_mut().zip(d.data()).zip(sign.data()) {
            *p += d * s.signum();
        }
        p
    };
    let inputs = [near(&mut r), near(&mut r), near(&mut r)];
    check(
        "sequence_loss",
        &mut ParamStore::new(),
        &inputs,
        |_, _, x| sequence_loss(x, &gt, &valid, 0.8),
        cfg,
        seed,
    )
}

/// Every registered operator check.
pub fn suite() -> Vec<Probe> {
    let p = |name, run| Probe { name, run };
    vec![
        p("matmul", matmul as ProbeFn),
        p("softmax", softmax),
        p("layer_norm", layer_norm),
        p("linear", linear),
        p("unfold", unfold),
        p("bilinear_sample", bilinear_sample),
        p("materialize", materialize),
        p("deform", deform_kernel),
        p("amplitude", amplitude_map),
        p("gca", gca),
        p("gcl_block", gcl_block),
        p("ggac", ggac),
        p("ggad", ggad),
        p("lookup", lookup),
        p("sequence_loss", loss),
    ]
}

#[derive(Clone, Debug)]
pub struct Outcome {
    pub name: String,
    /// `Err` holds the message of a check that could not run.
    pub result: std::result::Result<CheckResult, String>,
    pub seconds: f64,
}

impl Outcome {
    pub fn passed(&self) -> bool {
        matches!(&self.result, Ok(r) if r.passed())
    }

    /// One report line: status, name, worst relative error and its location.
    pub fn line(&self) -> String {
        let status = if self.passed() { "PASS" } else { "FAIL" };
        match &self.result {
            Ok(r) => format!(
                "{status} {:<16} max_rel_err={:.3e} tol={:.0e} checked={} worst={} ({:.2}s)",
                self.name, r.max_rel_error, r.tolerance, r.checked, r.worst_at, self.seconds
            ),
            Err(e) => format!("{status} {:<16} error: {e}", self.name),
        }
    }
}

pub fn run(probes: &[Probe], cfg: &GradCheckConfig, seed: u64) -> Vec<Outcome> {
    probes
        .iter()
        .map(|p| {
            let start = Instant::now();
            let result = (p.run)(cfg, seed).map_err(|e| e.to_string());
            Outcome {
                name: p.name.to_string(),
                result,
                seconds: start.elapsed().as_secs_f64(),
            }
        })
        .collect()
}
