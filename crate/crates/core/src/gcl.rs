//! Gaussian-constrained attention and the pre-norm transformer block
//! wrapping it.
//!
//! Every pixel attends to its `k×k` neighbourhood. Before the softmax the
//! scaled dot-product logits are multiplied elementwise by a learnable
//! Gaussian window, so the mask reshapes the logits rather than the
//! normalised weights.

use crate::autograd::{Graph, ParamStore, Var};
use crate::error::{shape_err, Error, Result};
use crate::gaussian::{GaussianKernelSpec, LearnableGaussianKernel};
use crate::nn::{from_tokens, to_tokens, Init, LayerNorm, Linear};

#[derive(Clone, Debug, PartialEq)]
pub struct GclConfig {
    pub channels: usize,
    pub heads: usize,
    pub window: usize,
    pub sigma: f64,
    pub ffn_ratio: usize,
    /// One mask per head instead of a single shared one.
    pub per_head_mask: bool,
}

impl GclConfig {
    pub fn new(channels: usize, heads: usize, window: usize, sigma: f64) -> Result<Self> {
        let cfg = Self {
            channels,
            heads,
            window,
            sigma,
            ffn_ratio: 4,
            per_head_mask: false,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.heads == 0 || self.channels % self.heads != 0 {
            return Err(Error::Config(format!(
                "{} channels not divisible by {} heads",
                self.channels, self.heads
            )));
        }
        GaussianKernelSpec::new(self.window, self.sigma)?;
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.channels / self.heads
    }
}

/// Attention of one query over its neighbourhood:
/// `softmax(mask ⊙ keys·q / √d) · values`.
///
/// `q_p` is `[d]`, `keys` and `values` are `K×d`, `mask` is `[K]`.
pub fn gca_pixel<'g>(q_p: Var<'g>, keys: Var<'g>, values: Var<'g>, mask: Var<'g>) -> Result<Var<'g>> {
    let d = q_p.len();
    let kk = keys.shape()[0];
    if keys.shape() != [kk, d] || values.shape() != [kk, d] || mask.len() != kk {
        return Err(shape_err("gca_pixel", &keys.shape(), &values.shape()));
    }
    let logits = keys.matmul(q_p.reshape(&[d, 1]))?.reshape(&[kk]);
    let attn = mask.mul(logits.scale(1.0 / (d as f64).sqrt())).softmax(0);
    Ok(values.transpose().matmul(attn.reshape(&[kk, 1]))?.reshape(&[d]))
}

/// Gaussian-masked neighbourhood attention for one head on `d×h×w` maps.
/// `mask` holds the `K` window values. Returns the attended values and the
/// `K×N` post-softmax weights.
pub fn gaussian_local_attention<'g>(
    q: Var<'g>,
    k: Var<'g>,
    v: Var<'g>,
    mask: Var<'g>,
    window: usize,
) -> Result<(Var<'g>, Var<'g>)> {
    let s = q.shape();
    let d = s[0];
    let n = s[1] * s[2];
    let logits = q.local_dot(k, window)?.scale(1.0 / (d as f64).sqrt());
    let m = mask.reshape(&[window * window]).broadcast_cols(n);
    let attn = m.mul(logits).softmax(0);
    Ok((attn.local_aggregate(v, window)?, attn))
}

#[derive(Clone, Debug)]
pub struct Gcl {
    pub cfg: GclConfig,
    pub norm1: LayerNorm,
    pub query: Linear,
    pub key: Linear,
    pub value: Linear,
    pub proj: Linear,
    pub norm2: LayerNorm,
    pub ffn_in: Linear,
    pub ffn_out: Linear,
    pub masks: Vec<LearnableGaussianKernel>,
}

impl Gcl {
    pub fn new(store: &mut ParamStore, name: &str, cfg: GclConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let c = cfg.channels;
        let hidden = c * cfg.ffn_ratio;
        let spec = GaussianKernelSpec::new(cfg.window, cfg.sigma)?;
        let n_masks = if cfg.per_head_mask { cfg.heads } else { 1 };
        let lin = |store: &mut ParamStore, part: &str, cin, cout| {
            Linear::new(store, &format!("{name}.{part}"), cin, cout, Init::FanIn(1.0), seed)
        };
        Ok(Self {
            norm1: LayerNorm::new(store, &format!("{name}.norm1"), c),
            query: lin(store, "query", c, c),
            key: lin(store, "key", c, c),
            value: lin(store, "value", c, c),
            proj: lin(store, "proj", c, c),
            norm2: LayerNorm::new(store, &format!("{name}.norm2"), c),
            ffn_in: lin(store, "ffn_in", c, hidden),
            ffn_out: lin(store, "ffn_out", hidden, c),
            masks: (0..n_masks)
                .map(|i| LearnableGaussianKernel::new(store, &format!("{name}.mask{i}"), spec))
                .collect(),
            cfg,
        })
    }

    fn mask_for(&self, head: usize) -> &LearnableGaussianKernel {
        &self.masks[head.min(self.masks.len() - 1)]
    }

    /// Multi-head attention on token rows `N×c`, returning `N×c` and the
    /// per-head `K×N` weights.
    fn attend_tokens<'g>(
        &self,
        g: &'g Graph,
        store: &ParamStore,
        tokens: Var<'g>,
        h: usize,
        w: usize,
    ) -> Result<(Var<'g>, Vec<Var<'g>>)> {
        let d = self.cfg.head_dim();
        let proj = |l: &Linear| -> Result<Var<'g>> { Ok(from_tokens(l.tokens(g, store, tokens)?, h, w)) };
        let (q, k, v) = (proj(&self.query)?, proj(&self.key)?, proj(&self.value)?);
        let mut heads = Vec::with_capacity(self.cfg.heads);
        let mut weights = Vec::with_capacity(self.cfg.heads);
        for i in 0..self.cfg.heads {
            let r = i * d..(i + 1) * d;
            let mask = self.mask_for(i).materialize(g, store);
            let (out, attn) = gaussian_local_attention(
                q.slice0(r.clone()),
                k.slice0(r.clone()),
                v.slice0(r),
                mask,
                self.cfg.window,
            )?;
            heads.push(out);
            weights.push(attn);
        }
        let merged = to_tokens(Var::concat(&heads));
        Ok((self.proj.tokens(g, store, merged)?, weights))
    }

    /// Attention on an already normalised `c×h×w` map.
    pub fn gca<'g>(&self, g: &'g Graph, store: &ParamStore, x: Var<'g>) -> Result<Var<'g>> {
        Ok(self.gca_with_weights(g, store, x)?.0)
    }

    /// [`Gcl::gca`] plus each head's post-softmax `K×N` weights.
    pub fn gca_with_weights<'g>(
        &self,
        g: &'g Graph,
        store: &ParamStore,
        x: Var<'g>,
    ) -> Result<(Var<'g>, Vec<Var<'g>>)> {
        let (_, h, w) = self.check_input(&x)?;
        let (out, weights) = self.attend_tokens(g, store, to_tokens(x), h, w)?;
        Ok((from_tokens(out, h, w), weights))
    }

    /// `x̂ = GCA(LN(x)) + x`, `y = FFN(LN(x̂)) + x̂` with a GELU feed-forward.
    pub fn block<'g>(&self, g: &'g Graph, store: &ParamStore, x: Var<'g>) -> Result<Var<'g>> {
        let (_, h, w) = self.check_input(&x)?;
        let t = to_tokens(x);
        let (att, _) = self.attend_tokens(g, store, self.norm1.forward(g, store, t)?, h, w)?;
        let t = att.add(t);
        let ff = self.norm2.forward(g, store, t)?;
        let ff = self.ffn_in.tokens(g, store, ff)?.gelu();
        let t = self.ffn_out.tokens(g, store, ff)?.add(t);
        Ok(from_tokens(t, h, w))
    }

    fn check_input(&self, x: &Var<'_>) -> Result<(usize, usize, usize)> {
        let s = x.shape();
        if s.len() != 3 || s[0] != self.cfg.channels {
            return Err(shape_err("gcl", &s, &[self.cfg.channels]));
        }
        Ok((s[0], s[1], s[2]))
    }
}
