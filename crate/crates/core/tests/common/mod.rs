//! Loop-based reference implementations used as test oracles. They read
//! raw parameter tensors and share no code with the vectorised operators.
#![allow(dead_code)]

use gauss_flow::gcl::Gcl;
use gauss_flow::ggam::{Ggam, GgamMode};
use gauss_flow::nn::{LayerNorm, Linear};
use gauss_flow::{ParamStore, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Replaces every parameter with `N(0, std²)` noise.
pub fn randomize(store: &mut ParamStore, seed: u64, std: f64) {
    let mut r = rng(seed);
    for p in store.iter_mut() {
        p.value = Tensor::randn(p.value.shape(), std, &mut r);
    }
}

fn px(t: &Tensor, c: usize, y: isize, x: isize) -> f64 {
    let (h, w) = (t.shape()[1] as isize, t.shape()[2] as isize);
    if y < 0 || x < 0 || y >= h || x >= w {
        0.0
    } else {
        t.at(&[c, y as usize, x as usize])
    }
}

/// Applies `x·W + b` at every pixel of a `cin×h×w` map.
pub fn affine_map(store: &ParamStore, lin: &Linear, x: &Tensor) -> Tensor {
    let w = store.value(lin.weight);
    let b = store.value(lin.bias);
    let (cin, cout) = (w.shape()[0], w.shape()[1]);
    let (h, wd) = (x.shape()[1], x.shape()[2]);
    let mut out = Tensor::zeros(&[cout, h, wd]);
    for y in 0..h {
        for xx in 0..wd {
            for o in 0..cout {
                let mut s = b.data()[o];
                for i in 0..cin {
                    s += x.at(&[i, y, xx]) * w.at(&[i, o]);
                }
                out.set(&[o, y, xx], s);
            }
        }
    }
    out
}

pub fn layer_norm_map(store: &ParamStore, ln: &LayerNorm, x: &Tensor) -> Tensor {
    let (c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let gain = store.value(ln.gain);
    let bias = store.value(ln.bias);
    let mut out = Tensor::zeros(x.shape());
    for y in 0..h {
        for xx in 0..w {
            let v: Vec<f64> = (0..c).map(|i| x.at(&[i, y, xx])).collect();
            let mean = v.iter().sum::<f64>() / c as f64;
            let var = v.iter().map(|a| (a - mean).powi(2)).sum::<f64>() / c as f64;
            for i in 0..c {
                let n = (v[i] - mean) / (var + ln.eps).sqrt();
                out.set(&[i, y, xx], n * gain.data()[i] + bias.data()[i]);
            }
        }
    }
    out
}

pub fn gaussian(dy: f64, dx: f64, sigma: f64, amp: f64) -> f64 {
    amp * (-(dx * dx + dy * dy) / (2.0 * sigma * sigma)).exp()
}

/// Window offsets in row-major order.
pub fn offsets(k: usize) -> Vec<(isize, isize)> {
    let r = (k / 2) as isize;
    let mut v = Vec::new();
    for dy in -r..=r {
        for dx in -r..=r {
            v.push((dy, dx));
        }
    }
    v
}

/// Masked neighbourhood attention over already-projected `q, k, v`
/// (`c×h×w`), split into `heads`; `masks[head]` is the flattened window.
pub fn local_attention(q: &Tensor, k: &Tensor, v: &Tensor, masks: &[Vec<f64>], heads: usize, win: usize) -> Tensor {
    let (c, h, w) = (q.shape()[0], q.shape()[1], q.shape()[2]);
    let d = c / heads;
    let offs = offsets(win);
    let mut out = Tensor::zeros(q.shape());
    for y in 0..h as isize {
        for x in 0..w as isize {
            for head in 0..heads {
                let mask = &masks[head.min(masks.len() - 1)];
                let ch = head * d..(head + 1) * d;
                let logits: Vec<f64> = offs
                    .iter()
                    .enumerate()
                    .map(|(l, &(dy, dx))| {
                        let dot: f64 = ch
                            .clone()
                            .map(|i| px(q, i, y, x) * px(k, i, y + dy, x + dx))
                            .sum();
                        mask[l] * dot / (d as f64).sqrt()
                    })
                    .collect();
                let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let e: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
                let z: f64 = e.iter().sum();
                for i in ch {
                    let s: f64 = offs
                        .iter()
                        .enumerate()
                        .map(|(l, &(dy, dx))| e[l] / z * px(v, i, y + dy, x + dx))
                        .sum();
                    out.set(&[i, y as usize, x as usize], s);
                }
            }
        }
    }
    out
}

pub fn gcl_masks(store: &ParamStore, gcl: &Gcl) -> Vec<Vec<f64>> {
    gcl.masks
        .iter()
        .map(|m| {
            let s = m.spec;
            let delta = store.value(m.delta);
            offsets(s.k)
                .iter()
                .enumerate()
                .map(|(l, &(dy, dx))| gaussian(dy as f64, dx as f64, s.sigma, 1.0) + delta.data()[l])
                .collect()
        })
        .collect()
}

pub fn gca(store: &ParamStore, gcl: &Gcl, x: &Tensor) -> Tensor {
    let q = affine_map(store, &gcl.query, x);
    let k = affine_map(store, &gcl.key, x);
    let v = affine_map(store, &gcl.value, x);
    let att = local_attention(&q, &k, &v, &gcl_masks(store, gcl), gcl.cfg.heads, gcl.cfg.window);
    affine_map(store, &gcl.proj, &att)
}

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + ((2.0 / std::f64::consts::PI).sqrt() * (x + 0.044715 * x.powi(3))).tanh())
}

pub fn gcl_block(store: &ParamStore, gcl: &Gcl, x: &Tensor) -> Tensor {
    let a = gca(store, gcl, &layer_norm_map(store, &gcl.norm1, x));
    let xh = add(&a, x);
    let f = affine_map(store, &gcl.ffn_in, &layer_norm_map(store, &gcl.norm2, &xh)).map(gelu);
    add(&affine_map(store, &gcl.ffn_out, &f), &xh)
}

pub fn add(a: &Tensor, b: &Tensor) -> Tensor {
    let d = a.data().iter().zip(b.data()).map(|(x, y)| x + y).collect();
    Tensor::new(a.shape(), d).unwrap()
}

/// `c×h×w` convolution of each channel with the Gaussian window.
pub fn gaussian_conv(x: &Tensor, k: usize, sigma: f64) -> Tensor {
    let (c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let r = (k / 2) as isize;
    let mut out = Tensor::zeros(x.shape());
    for ch in 0..c {
        for y in 0..h as isize {
            for xx in 0..w as isize {
                let mut s = 0.0;
                for yy in y - r..=y + r {
                    for xj in xx - r..=xx + r {
                        s += gaussian((yy - y) as f64, (xj - xx) as f64, sigma, 1.0) * px(x, ch, yy, xj);
                    }
                }
                out.set(&[ch, y as usize, xx as usize], s);
            }
        }
    }
    out
}

/// Context weights `K×N` by explicit loops.
pub fn context_weights(store: &ParamStore, m: &Ggam, f_c: &Tensor) -> Tensor {
    let th = affine_map(store, m.theta.as_ref().unwrap(), f_c);
    let ph = affine_map(store, m.phi.as_ref().unwrap(), f_c);
    let (c, h, w) = (f_c.shape()[0], f_c.shape()[1], f_c.shape()[2]);
    let offs = offsets(m.cfg.window);
    let mut out = Tensor::zeros(&[offs.len(), h * w]);
    for y in 0..h as isize {
        for x in 0..w as isize {
            let sims: Vec<f64> = offs
                .iter()
                .map(|&(dy, dx)| {
                    (0..c).map(|i| px(&th, i, y + dy, x + dx) * px(&ph, i, y, x)).sum::<f64>() / (c as f64).sqrt()
                })
                .collect();
            let max = sims.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = sims.iter().map(|s| (s - max).exp()).sum();
            for (l, s) in sims.iter().enumerate() {
                out.set(&[l, y as usize * w + x as usize], (s - max).exp() / z);
            }
        }
    }
    out
}

/// Full module output by triple loop over (pixel, offset, channel).
pub fn ggam(store: &ParamStore, m: &Ggam, f_c: &Tensor, f_m: &Tensor) -> Tensor {
    let (c, h, w) = (f_m.shape()[0], f_m.shape()[1], f_m.shape()[2]);
    let (k, sigma) = (m.cfg.window, m.cfg.sigma);
    let offs = offsets(k);
    let kk = offs.len();
    let rho = affine_map(store, &m.rho, f_m);
    let ctx = (m.cfg.mode != GgamMode::Smooth).then(|| context_weights(store, m, f_c));
    let (off, amp) = if m.cfg.mode == GgamMode::Ggad {
        (
            Some(affine_map(store, m.offset_head.as_ref().unwrap(), f_m)),
            Some(affine_map(store, m.amp_head.as_ref().unwrap(), f_m)),
        )
    } else {
        (None, None)
    };
    let lambda = m.lambda.map(|l| store.value(l).data()[0]).unwrap_or(0.0);
    let mut out = Tensor::zeros(f_m.shape());
    for y in 0..h {
        for x in 0..w {
            let n = y * w + x;
            for ch in 0..c {
                let mut s = 0.0;
                for (l, &(dy, dx)) in offs.iter().enumerate() {
                    let mut wgt = match &off {
                        Some(o) => gaussian(
                            dy as f64 + o.at(&[l, y, x]),
                            dx as f64 + o.at(&[kk + l, y, x]),
                            sigma,
                            1.0,
                        ),
                        None => gaussian(dy as f64, dx as f64, sigma, 1.0),
                    };
                    if let Some(a) = &amp {
                        wgt *= 1.0 + a.at(&[l, y, x]) * lambda;
                    }
                    if let Some(cw) = &ctx {
                        wgt *= cw.at(&[l, n]);
                    }
                    s += wgt * px(&rho, ch, y as isize + dy, x as isize + dx);
                }
                out.set(&[ch, y, x], s);
            }
        }
    }
    out
}

/// Max |a − b| over pixels at distance ≥ `margin` from every border.
pub fn interior_diff(a: &Tensor, b: &Tensor, margin: usize) -> f64 {
    let (c, h, w) = (a.shape()[0], a.shape()[1], a.shape()[2]);
    let mut m = 0.0f64;
    for ch in 0..c {
        for y in margin..h.saturating_sub(margin) {
            for x in margin..w.saturating_sub(margin) {
                m = m.max((a.at(&[ch, y, x]) - b.at(&[ch, y, x])).abs());
            }
        }
    }
    m
}

/// `c×h×w` window of `t` starting at `(y0, x0)`.
pub fn crop(t: &Tensor, y0: usize, x0: usize, h: usize, w: usize) -> Tensor {
    let c = t.shape()[0];
    let mut out = Tensor::zeros(&[c, h, w]);
    for ch in 0..c {
        for y in 0..h {
            for x in 0..w {
                out.set(&[ch, y, x], t.at(&[ch, y0 + y, x0 + x]));
            }
        }
    }
    out
}

/// Runs `f` on two crops of a larger random map offset by `(sy, sx)` and
/// returns the largest difference between the overlapping outputs,
/// ignoring pixels within `margin` of either crop's border.
pub fn shift_mismatch(
    c: usize,
    h: usize,
    w: usize,
    (sy, sx): (usize, usize),
    margin: usize,
    seed: u64,
    f: impl Fn(&Tensor) -> Tensor,
) -> f64 {
    let big = Tensor::randn(&[c, h + sy, w + sx], 1.0, &mut rng(seed));
    let a = f(&crop(&big, 0, 0, h, w));
    let b = f(&crop(&big, sy, sx, h, w));
    let mut worst = 0.0f64;
    for ch in 0..a.shape()[0] {
        for y in (sy + margin)..h.saturating_sub(margin) {
            for x in (sx + margin)..w.saturating_sub(margin) {
                worst = worst.max((a.at(&[ch, y, x]) - b.at(&[ch, y - sy, x - sx])).abs());
            }
        }
    }
    worst
}

/// Channels `from..to` of a `c×h×w` map.
pub fn crop_channels(t: &Tensor, from: usize, to: usize) -> Tensor {
    let plane = t.shape()[1] * t.shape()[2];
    let data = t.data()[from * plane..to * plane].to_vec();
    Tensor::new(&[to - from, t.shape()[1], t.shape()[2]], data).unwrap()
}

/// Mean endpoint error over valid pixels.
pub fn epe(pred: &Tensor, gt: &Tensor, valid: &Tensor) -> f64 {
    let (h, w) = (gt.shape()[1], gt.shape()[2]);
    let (mut sum, mut count) = (0.0, 0);
    for y in 0..h {
        for x in 0..w {
            if valid.at(&[y, x]) != 0.0 {
                let du = pred.at(&[0, y, x]) - gt.at(&[0, y, x]);
                let dv = pred.at(&[1, y, x]) - gt.at(&[1, y, x]);
                sum += (du * du + dv * dv).sqrt();
                count += 1;
            }
        }
    }
    sum / count as f64
}

/// Percentage of valid pixels with error above both 3 px and 5% of the
/// ground-truth magnitude.
pub fn f1_all(pred: &Tensor, gt: &Tensor, valid: &Tensor) -> f64 {
    let (h, w) = (gt.shape()[1], gt.shape()[2]);
    let (mut bad, mut count) = (0, 0);
    for y in 0..h {
        for x in 0..w {
            if valid.at(&[y, x]) != 0.0 {
                let du = pred.at(&[0, y, x]) - gt.at(&[0, y, x]);
                let dv = pred.at(&[1, y, x]) - gt.at(&[1, y, x]);
                let e = (du * du + dv * dv).sqrt();
                let m = (gt.at(&[0, y, x]).powi(2) + gt.at(&[1, y, x]).powi(2)).sqrt();
                if e > 3.0 && e > 0.05 * m {
                    bad += 1;
                }
                count += 1;
            }
        }
    }
    100.0 * bad as f64 / count as f64
}

/// EPE over valid pixels with ground-truth magnitude in `[lo, hi)`.
pub fn epe_bin(pred: &Tensor, gt: &Tensor, valid: &Tensor, lo: f64, hi: f64) -> Option<f64> {
    let mut mask = valid.clone();
    let (h, w) = (gt.shape()[1], gt.shape()[2]);
    for y in 0..h {
        for x in 0..w {
            let m = (gt.at(&[0, y, x]).powi(2) + gt.at(&[1, y, x]).powi(2)).sqrt();
            if m < lo || m >= hi {
                mask.set(&[y, x], 0.0);
            }
        }
    }
    (mask.sum() > 0.0).then(|| epe(pred, gt, &mask))
}
