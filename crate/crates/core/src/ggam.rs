//! Gaussian-guided aggregation of motion features.
//!
//! Three kernels of increasing flexibility weight each pixel's `k×k`
//! neighbourhood of embedded motion features `ρ(f_m)`:
//!
//! * `Smooth`: the fixed Gaussian window.
//! * `Ggac`: the window times context weights `F(f_c)`, a per-pixel softmax
//!   over the window of similarities between `φ(f_c)` at the centre and
//!   `θ(f_c)` at each neighbour.
//! * `Ggad`: `amplitude(f_m) ⊙ deform(offsets(f_m)) ⊙ F(f_c)`, where the
//!   Gaussian is re-evaluated at learned displacements and scaled by
//!   `1 + ϑ(f_m)·λ`.
//!
//! With zero offsets and `λ = 0` the deformable kernel is exactly the
//! context kernel, which is how the module is initialised.

use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, ParamId, ParamStore, Var};
use crate::error::{shape_err, Error, Result};
use crate::gaussian::{amplitude, deform, expand_kernel, GaussianKernelSpec};
use crate::nn::{Init, Linear};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GgamMode {
    Smooth,
    Ggac,
    Ggad,
}

impl std::str::FromStr for GgamMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "smooth" => Ok(Self::Smooth),
            "ggac" => Ok(Self::Ggac),
            "ggad" => Ok(Self::Ggad),
            _ => Err(Error::Config(format!("unknown aggregation mode {s:?}"))),
        }
    }
}

impl std::fmt::Display for GgamMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Smooth => "smooth",
            Self::Ggac => "ggac",
            Self::Ggad => "ggad",
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GgamConfig {
    pub channels: usize,
    pub window: usize,
    pub sigma: f64,
    pub mode: GgamMode,
}

/// `Σ_i G(p_i − p) · f_m(p_i)` over each pixel's window, zero-padded.
pub fn gaussian_smooth<'g>(f_m: Var<'g>, spec: &GaussianKernelSpec) -> Result<Var<'g>> {
    let s = f_m.shape();
    if s.len() != 3 {
        return Err(shape_err("gaussian_smooth", &s, &[3]));
    }
    let kernel = f_m.graph().constant(expand_kernel(spec, s[1], s[2]));
    kernel.local_aggregate(f_m, spec.k)
}

#[derive(Clone, Debug)]
pub struct Ggam {
    pub cfg: GgamConfig,
    pub spec: GaussianKernelSpec,
    pub rho: Linear,
    pub theta: Option<Linear>,
    pub phi: Option<Linear>,
    pub offset_head: Option<Linear>,
    pub amp_head: Option<Linear>,
    pub lambda: Option<ParamId>,
}

impl Ggam {
    pub fn new(store: &mut ParamStore, name: &str, cfg: GgamConfig, seed: u64) -> Result<Self> {
        let spec = GaussianKernelSpec::new(cfg.window, cfg.sigma)?;
        let c = cfg.channels;
        let kk = spec.taps();
        let mut lin = |part: &str, cout, init| Linear::new(store, &format!("{name}.{part}"), c, cout, init, seed);
        let rho = lin("rho", c, Init::FanIn(1.0));
        let with_context = cfg.mode != GgamMode::Smooth;
        let deformable = cfg.mode == GgamMode::Ggad;
        let theta = with_context.then(|| lin("theta", c, Init::FanIn(1.0)));
        let phi = with_context.then(|| lin("phi", c, Init::FanIn(1.0)));
        let offset_head = deformable.then(|| lin("offset", 2 * kk, Init::Zeros));
        // λ starts at 0, so a zero amplitude head would have no gradient.
        let amp_head = deformable.then(|| lin("amplitude", kk, Init::FanIn(1.0)));
        let lambda = deformable.then(|| store.add(format!("{name}.lambda"), Tensor::scalar(0.0)));
        Ok(Self {
            cfg,
            spec,
            rho,
            theta,
            phi,
            offset_head,
            amp_head,
            lambda,
        })
    }

    fn dims(&self, x: &Var<'_>) -> Result<(usize, usize)> {
        let s = x.shape();
        if s.len() != 3 || s[0] != self.cfg.channels {
            return Err(shape_err("ggam", &s, &[self.cfg.channels]));
        }
        Ok((s[1], s[2]))
    }

    /// `F(f_c)`: `K×N`, each column a softmax over the window.
    pub fn context_weights<'g>(&self, g: &'g Graph, store: &ParamStore, f_c: Var<'g>) -> Result<Var<'g>> {
        self.dims(&f_c)?;
        let (Some(theta), Some(phi)) = (&self.theta, &self.phi) else {
            return Err(Error::Config("context weights need ggac or ggad mode".into()));
        };
        let keys = theta.pointwise(g, store, f_c)?;
        let query = phi.pointwise(g, store, f_c)?;
        let c = self.cfg.channels as f64;
        Ok(query.local_dot(keys, self.spec.k)?.scale(1.0 / c.sqrt()).softmax(0))
    }

    /// Learned `(dy, dx)` displacements of every window sample, `2×K×N`.
    pub fn offsets<'g>(&self, g: &'g Graph, store: &ParamStore, f_m: Var<'g>) -> Result<Var<'g>> {
        let (h, w) = self.dims(&f_m)?;
        let head = self
            .offset_head
            .as_ref()
            .ok_or_else(|| Error::Config("offsets need ggad mode".into()))?;
        Ok(head.pointwise(g, store, f_m)?.reshape(&[2, self.spec.taps(), h * w]))
    }

    /// The `K×N` aggregation kernel for the configured mode. `context` may
    /// carry precomputed [`Ggam::context_weights`].
    pub fn kernel<'g>(
        &self,
        g: &'g Graph,
        store: &ParamStore,
        f_c: Var<'g>,
        f_m: Var<'g>,
        context: Option<Var<'g>>,
    ) -> Result<Var<'g>> {
        let (h, w) = self.dims(&f_m)?;
        if self.dims(&f_c)? != (h, w) {
            return Err(shape_err("ggam", &f_c.shape(), &f_m.shape()));
        }
        let context = || match context {
            Some(c) => Ok(c),
            None => self.context_weights(g, store, f_c),
        };
        match self.cfg.mode {
            GgamMode::Smooth => Ok(g.constant(expand_kernel(&self.spec, h, w))),
            GgamMode::Ggac => Ok(g.constant(expand_kernel(&self.spec, h, w)).mul(context()?)),
            GgamMode::Ggad => {
                let amp_head = self.amp_head.as_ref().expect("ggad amplitude head");
                let lambda = g.param(store, self.lambda.expect("ggad lambda"));
                let amp = amplitude(g, store, f_m, amp_head, lambda)?;
                let warped = deform(&self.spec, self.offsets(g, store, f_m)?)?;
                Ok(amp.mul(warped).mul(context()?))
            }
        }
    }

    /// Aggregates `ρ(f_m)` with the mode's kernel.
    pub fn forward<'g>(&self, g: &'g Graph, store: &ParamStore, f_c: Var<'g>, f_m: Var<'g>) -> Result<Var<'g>> {
        self.forward_cached(g, store, f_c, f_m, None)
    }

    pub fn forward_cached<'g>(
        &self,
        g: &'g Graph,
        store: &ParamStore,
        f_c: Var<'g>,
        f_m: Var<'g>,
        context: Option<Var<'g>>,
    ) -> Result<Var<'g>> {
        let kernel = self.kernel(g, store, f_c, f_m, context)?;
        let embedded = self.rho.pointwise(g, store, f_m)?;
        kernel.local_aggregate(embedded, self.spec.k)
    }

    /// The `k×k` weight window applied at pixel `(y, x)`.
    pub fn attn_export(
        &self,
        store: &ParamStore,
        f_c: &Tensor,
        f_m: &Tensor,
        (y, x): (usize, usize),
    ) -> Result<Tensor> {
        let (_, h, w) = (f_m.shape()[0], f_m.shape()[1], f_m.shape()[2]);
        if y >= h || x >= w {
            return Err(Error::OutOfBounds {
                y,
                x,
                height: h,
                width: w,
            });
        }
        let g = Graph::new();
        let kernel = self
            .kernel(&g, store, g.constant(f_c.clone()), g.constant(f_m.clone()), None)?
            .value();
        let n = h * w;
        let kk = self.spec.taps();
        let col = (0..kk).map(|l| kernel.data()[l * n + y * w + x]).collect();
        Tensor::new(&[self.spec.k, self.spec.k], col)
    }
}
