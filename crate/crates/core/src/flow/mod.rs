//! A small recurrent optical-flow network.
//!
//! Features of both frames come from a shared strided-conv encoder, a
//! separate encoder provides the context map and the initial hidden state,
//! and an all-pairs correlation pyramid is sampled around the current flow
//! at every iteration. The sampled correlation and the flow are encoded
//! into motion features, optionally refined by a Gaussian-constrained
//! attention block and aggregated by the Gaussian-guided module, then fed
//! to a convolutional GRU whose head emits a residual flow.

mod corr;
mod loss;

pub use corr::{build_corr, CorrPyramid};
pub use loss::sequence_loss;

use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, ParamStore, Var};
use crate::error::{shape_err, Error, Result};
use crate::gcl::{Gcl, GclConfig};
use crate::ggam::{Ggam, GgamConfig, GgamMode};
use crate::nn::{Conv2d, Init, Linear};
use crate::tensor::Tensor;

/// Uniform-init gain giving He variance `2 / fan_in`.
const RELU_GAIN: f64 = 2.449_489_742_783_178;

/// How the aggregated motion features reach the GRU.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Fusion {
    /// As extra input channels next to the context and motion features.
    #[default]
    Concat,
    /// As the elementwise product with the motion features.
    Product,
}

/// Parses `off` or a [`GgamMode`] name.
pub fn parse_ggam(s: &str) -> Result<Option<GgamMode>> {
    match s {
        "off" => Ok(None),
        _ => s.parse().map(Some),
    }
}

pub fn ggam_name(mode: Option<GgamMode>) -> String {
    mode.map_or_else(|| "off".to_string(), |m| m.to_string())
}

mod ggam_setting {
    use super::*;
    use serde::{Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &Option<GgamMode>, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&ggam_name(*v))
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Option<GgamMode>, D::Error> {
        let s = String::deserialize(d)?;
        parse_ggam(&s).map_err(serde::de::Error::custom)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    /// Power of two between input and working resolution.
    pub factor: usize,
    pub channels: usize,
    pub iters: usize,
    pub radius: usize,
    pub levels: usize,
    pub use_gcl: bool,
    #[serde(with = "ggam_setting")]
    pub ggam: Option<GgamMode>,
    pub window: usize,
    pub sigma: f64,
    pub heads: usize,
    pub fusion: Fusion,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            factor: 4,
            channels: 64,
            iters: 6,
            radius: 3,
            levels: 2,
            use_gcl: true,
            ggam: Some(GgamMode::Ggad),
            window: 9,
            sigma: 3.0,
            heads: 1,
            fusion: Fusion::Concat,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let err = |m: String| Err(Error::Config(m));
        if self.factor < 2 || !self.factor.is_power_of_two() {
            return err(format!("downsample factor {} is not a power of two ≥ 2", self.factor));
        }
        if self.iters == 0 {
            return err("at least one iteration is required".into());
        }
        if self.levels == 0 {
            return err("at least one correlation level is required".into());
        }
        if self.channels < 4 || self.channels % 2 != 0 {
            return err(format!("channel count {} must be even and ≥ 4", self.channels));
        }
        GclConfig::new(self.channels, self.heads, self.window, self.sigma)?;
        Ok(())
    }

    /// Input extents must be multiples of this.
    pub fn stride(&self) -> usize {
        self.factor << (self.levels - 1)
    }

    pub fn correlation_taps(&self) -> usize {
        self.levels * (2 * self.radius + 1).pow(2)
    }
}

/// Strided 3×3 conv stack, one stride-2 stage per factor of two, then a
/// 3×3 and a 1×1 layer at working resolution.
#[derive(Clone, Debug)]
pub struct Encoder {
    pub stages: Vec<Conv2d>,
    pub out: Linear,
}

impl Encoder {
    pub fn new(store: &mut ParamStore, name: &str, cfg: &ModelConfig, out_dim: usize, seed: u64) -> Self {
        let c = cfg.channels;
        let mut stages = Vec::new();
        let mut cin = 3;
        for i in 0..cfg.factor.trailing_zeros() {
            let cout = if i == 0 { c / 2 } else { c };
            stages.push(Conv2d::new(store, &format!("{name}.down{i}"), cin, cout, 3, 2, Init::FanIn(RELU_GAIN), seed));
            cin = cout;
        }
        stages.push(Conv2d::new(store, &format!("{name}.mix"), cin, c, 3, 1, Init::FanIn(RELU_GAIN), seed));
        let out = Linear::new(store, &format!("{name}.out"), c, out_dim, Init::FanIn(1.0), seed);
        Self { stages, out }
    }

    pub fn forward<'g>(&self, g: &'g Graph, store: &ParamStore, img: Var<'g>) -> Result<Var<'g>> {
        let mut x = img.scale(2.0).add_scalar(-1.0);
        for conv in &self.stages {
            x = conv.forward(g, store, x)?.relu();
        }
        self.out.pointwise(g, store, x)
    }
}

/// Sum of 1×1 maps of the hidden state, the recurrent input and, when the
/// aggregation module is on, its output (added last).
#[derive(Clone, Debug)]
pub struct Gate {
    pub hidden: Linear,
    pub input: Linear,
    pub aggregated: Option<Linear>,
}

impl Gate {
    fn new(store: &mut ParamStore, name: &str, c: usize, cin: usize, with_agg: bool, seed: u64) -> Self {
        let lin = |store: &mut ParamStore, part: &str, cin| {
            Linear::new(store, &format!("{name}.{part}"), cin, c, Init::FanIn(1.0), seed)
        };
        Self {
            hidden: lin(store, "hidden", c),
            input: lin(store, "input", cin),
            aggregated: with_agg.then(|| lin(store, "aggregated", c)),
        }
    }

    fn forward<'g>(
        &self,
        g: &'g Graph,
        store: &ParamStore,
        h: Var<'g>,
        x: Var<'g>,
        a: Option<Var<'g>>,
    ) -> Result<Var<'g>> {
        let mut s = self.hidden.pointwise(g, store, h)?.add(self.input.pointwise(g, store, x)?);
        if let (Some(lin), Some(a)) = (&self.aggregated, a) {
            s = s.add(lin.pointwise(g, store, a)?);
        }
        Ok(s)
    }
}

#[derive(Clone, Debug)]
pub struct Gru {
    pub update: Gate,
    pub reset: Gate,
    pub candidate: Gate,
}

impl Gru {
    fn step<'g>(
        &self,
        g: &'g Graph,
        store: &ParamStore,
        h: Var<'g>,
        x: Var<'g>,
        a: Option<Var<'g>>,
    ) -> Result<Var<'g>> {
        let z = self.update.forward(g, store, h, x, a)?.sigmoid();
        let r = self.reset.forward(g, store, h, x, a)?.sigmoid();
        let q = self.candidate.forward(g, store, r.mul(h), x, a)?.tanh();
        Ok(h.add(z.mul(q.sub(h))))
    }
}

/// Everything one forward pass produces.
pub struct FlowOutput<'g> {
    /// Full-resolution flow after each iteration.
    pub predictions: Vec<Var<'g>>,
    /// Working-resolution flow after each iteration.
    pub coarse: Vec<Var<'g>>,
    pub deltas: Vec<Var<'g>>,
    pub context: Var<'g>,
    /// Motion features entering the aggregation module, per iteration.
    pub motion: Vec<Var<'g>>,
}

#[derive(Clone, Debug)]
pub struct FlowNet {
    pub cfg: ModelConfig,
    pub features: Encoder,
    pub context: Encoder,
    pub corr_embed: Linear,
    pub flow_embed: Conv2d,
    pub motion_mix: Conv2d,
    pub gcl: Option<Gcl>,
    pub ggam: Option<Ggam>,
    pub gru: Gru,
    pub head_hidden: Conv2d,
    pub head_out: Conv2d,
}

impl FlowNet {
    pub fn new(store: &mut ParamStore, cfg: ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let c = cfg.channels;
        let with_agg = cfg.ggam.is_some();
        let gcl = if cfg.use_gcl {
            let gcfg = GclConfig::new(c, cfg.heads, cfg.window, cfg.sigma)?;
            Some(Gcl::new(store, "gcl", gcfg, seed)?)
        } else {
            None
        };
        let ggam = match cfg.ggam {
            Some(mode) => {
                let gcfg = GgamConfig {
                    channels: c,
                    window: cfg.window,
                    sigma: cfg.sigma,
                    mode,
                };
                Some(Ggam::new(store, "ggam", gcfg, seed)?)
            }
            None => None,
        };
        Ok(Self {
            features: Encoder::new(store, "features", &cfg, c, seed),
            context: Encoder::new(store, "context", &cfg, 2 * c, seed),
            corr_embed: Linear::new(store, "motion.corr", cfg.correlation_taps(), c, Init::FanIn(RELU_GAIN), seed),
            flow_embed: Conv2d::new(store, "motion.flow", 2, c / 2, 3, 1, Init::FanIn(RELU_GAIN), seed),
            motion_mix: Conv2d::new(store, "motion.mix", c + c / 2, c - 2, 3, 1, Init::FanIn(RELU_GAIN), seed),
            gcl,
            ggam,
            gru: Gru {
                update: Gate::new(store, "gru.update", c, 2 * c, with_agg, seed),
                reset: Gate::new(store, "gru.reset", c, 2 * c, with_agg, seed),
                candidate: Gate::new(store, "gru.candidate", c, 2 * c, with_agg, seed),
            },
            head_hidden: Conv2d::new(store, "head.hidden", c, c, 3, 1, Init::FanIn(RELU_GAIN), seed),
            head_out: Conv2d::new(store, "head.out", c, 2, 3, 1, Init::Zeros, seed),
            cfg,
        })
    }

    fn check_images(&self, img1: &Tensor, img2: &Tensor) -> Result<(usize, usize)> {
        let s = img1.shape();
        if s.len() != 3 || s[0] != 3 || img2.shape() != s {
            return Err(shape_err("flow_net", s, img2.shape()));
        }
        let stride = self.cfg.stride();
        if s[1] % stride != 0 || s[2] % stride != 0 {
            return Err(Error::Config(format!(
                "image extents {}x{} must be multiples of {stride}",
                s[1], s[2]
            )));
        }
        Ok((s[1], s[2]))
    }

    /// Encodes the flow and the sampled correlation into `c` motion
    /// channels, the last two of which are the flow itself.
    fn motion_features<'g>(
        &self,
        g: &'g Graph,
        store: &ParamStore,
        corr: Var<'g>,
        flow: Var<'g>,
    ) -> Result<Var<'g>> {
        let cf = self.corr_embed.pointwise(g, store, corr)?.relu();
        let ff = self.flow_embed.forward(g, store, flow)?.relu();
        let m = self.motion_mix.forward(g, store, Var::concat(&[cf, ff]))?.relu();
        Ok(Var::concat(&[m, flow]))
    }

    pub fn forward<'g>(
        &self,
        g: &'g Graph,
        store: &ParamStore,
        img1: &Tensor,
        img2: &Tensor,
    ) -> Result<FlowOutput<'g>> {
        let (ih, iw) = self.check_images(img1, img2)?;
        let c = self.cfg.channels;
        let f1 = self.features.forward(g, store, g.constant(img1.clone()))?;
        let f2 = self.features.forward(g, store, g.constant(img2.clone()))?;
        let ctx = self.context.forward(g, store, g.constant(img1.clone()))?;
        let mut hidden = ctx.slice0(0..c).tanh();
        let f_c = ctx.slice0(c..2 * c).relu();
        let shape = f1.shape();
        let (h, w) = (shape[1], shape[2]);
        let pyramid = build_corr(f1, f2, self.cfg.levels)?;
        let context_weights = match &self.ggam {
            Some(m) if m.cfg.mode != GgamMode::Smooth => Some(m.context_weights(g, store, f_c)?),
            _ => None,
        };

        let mut flow = Tensor::zeros(&[2, h, w]);
        let mut out = FlowOutput {
            predictions: Vec::with_capacity(self.cfg.iters),
            coarse: Vec::with_capacity(self.cfg.iters),
            deltas: Vec::with_capacity(self.cfg.iters),
            context: f_c,
            motion: Vec::with_capacity(self.cfg.iters),
        };
        for _ in 0..self.cfg.iters {
            let sampled = pyramid.lookup(&flow, self.cfg.radius)?;
            let current = g.constant(flow);
            let mut f_m = self.motion_features(g, store, sampled, current)?;
            if let Some(gcl) = &self.gcl {
                f_m = gcl.block(g, store, f_m)?;
            }
            out.motion.push(f_m);
            let aggregated = match &self.ggam {
                Some(m) => {
                    let a = m.forward_cached(g, store, f_c, f_m, context_weights)?;
                    Some(match self.cfg.fusion {
                        Fusion::Concat => a,
                        Fusion::Product => a.mul(f_m),
                    })
                }
                None => None,
            };
            hidden = self.gru.step(g, store, hidden, Var::concat(&[f_c, f_m]), aggregated)?;
            let delta = self.head_hidden.forward(g, store, hidden)?.relu();
            let delta = self.head_out.forward(g, store, delta)?;
            let next = current.add(delta);
            out.deltas.push(delta);
            out.coarse.push(next);
            out.predictions.push(next.resize_bilinear(ih, iw).scale(self.cfg.factor as f64));
            flow = next.value().as_ref().clone();
        }
        Ok(out)
    }

    /// Final full-resolution flow.
    pub fn predict(&self, store: &ParamStore, img1: &Tensor, img2: &Tensor) -> Result<Tensor> {
        let g = Graph::new();
        let out = self.forward(&g, store, img1, img2)?;
        let last = out.predictions.last().expect("at least one iteration");
        Ok(last.value().as_ref().clone())
    }
}
