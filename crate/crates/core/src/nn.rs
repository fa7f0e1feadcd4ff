//! Parameter-holding building blocks shared by the attention layers and the
//! flow model.
//!
//! Every tensor is initialised from an RNG keyed on `(seed, name)`, so a
//! parameter's initial value does not depend on which other layers exist.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autograd::{Graph, ParamId, ParamStore, Var};
use crate::error::Result;
use crate::tensor::Tensor;

/// RNG for the parameter `name` under model seed `seed`.
pub fn param_rng(seed: u64, name: &str) -> ChaCha8Rng {
    // FNV-1a: stable across platforms and toolchains.
    let mut h: u64 = 0xcbf2_9ce4_8422_2325 ^ seed.wrapping_mul(0x9e37_79b9_7f4a_7c15);
    for b in name.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    ChaCha8Rng::seed_from_u64(h)
}

/// Weight initialisation scheme.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Init {
    /// Uniform in `±gain / sqrt(fan_in)`.
    FanIn(f64),
    Zeros,
}

fn init_tensor(shape: &[usize], fan_in: usize, init: Init, seed: u64, name: &str) -> Tensor {
    match init {
        Init::Zeros => Tensor::zeros(shape),
        Init::FanIn(gain) => {
            let bound = gain / (fan_in as f64).sqrt();
            Tensor::rand_uniform(shape, -bound, bound, &mut param_rng(seed, name))
        }
    }
}

/// Affine map `cin → cout`, usable on token rows or channel-first maps.
#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
}

impl Linear {
    pub fn new(store: &mut ParamStore, name: &str, cin: usize, cout: usize, init: Init, seed: u64) -> Self {
        let wname = format!("{name}.weight");
        let w = init_tensor(&[cin, cout], cin, init, seed, &wname);
        Self {
            weight: store.add(wname, w),
            bias: store.add(format!("{name}.bias"), Tensor::zeros(&[cout])),
        }
    }

    /// `x[..., cin]` → `x[..., cout]`.
    pub fn tokens<'g>(&self, g: &'g Graph, store: &ParamStore, x: Var<'g>) -> Result<Var<'g>> {
        x.linear(g.param(store, self.weight), g.param(store, self.bias))
    }

    /// `cin×h×w` → `cout×h×w`.
    pub fn pointwise<'g>(&self, g: &'g Graph, store: &ParamStore, x: Var<'g>) -> Result<Var<'g>> {
        x.pointwise(g.param(store, self.weight), g.param(store, self.bias))
    }
}

#[derive(Clone, Debug)]
pub struct Conv2d {
    pub weight: ParamId,
    pub bias: ParamId,
    pub stride: usize,
    pub pad: usize,
}

impl Conv2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        cin: usize,
        cout: usize,
        kernel: usize,
        stride: usize,
        init: Init,
        seed: u64,
    ) -> Self {
        let wname = format!("{name}.weight");
        let w = init_tensor(&[cout, cin, kernel, kernel], cin * kernel * kernel, init, seed, &wname);
        Self {
            weight: store.add(wname, w),
            bias: store.add(format!("{name}.bias"), Tensor::zeros(&[cout])),
            stride,
            pad: kernel / 2,
        }
    }

    pub fn forward<'g>(&self, g: &'g Graph, store: &ParamStore, x: Var<'g>) -> Result<Var<'g>> {
        x.conv2d(
            g.param(store, self.weight),
            g.param(store, self.bias),
            self.stride,
            self.pad,
        )
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gain: ParamId,
    pub bias: ParamId,
    pub eps: f64,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, c: usize) -> Self {
        Self {
            gain: store.add(format!("{name}.gain"), Tensor::ones(&[c])),
            bias: store.add(format!("{name}.bias"), Tensor::zeros(&[c])),
            eps: 1e-5,
        }
    }

    /// Normalises token rows `N×c`.
    pub fn forward<'g>(&self, g: &'g Graph, store: &ParamStore, x: Var<'g>) -> Result<Var<'g>> {
        x.layer_norm(g.param(store, self.gain), g.param(store, self.bias), self.eps)
    }
}

/// `c×h×w` → `N×c` token rows.
pub fn to_tokens(x: Var<'_>) -> Var<'_> {
    let s = x.shape();
    x.reshape(&[s[0], s[1] * s[2]]).transpose()
}

/// `N×c` token rows → `c×h×w`.
pub fn from_tokens(t: Var<'_>, h: usize, w: usize) -> Var<'_> {
    let c = t.shape()[1];
    t.transpose().reshape(&[c, h, w])
}
