//! Operators on channel-first `c×h×w` feature maps.
//!
//! Neighbourhood offsets are enumerated row-major over the `k×k` window:
//! offset index `l` is `(dy + r) * k + (dx + r)` with `r = k / 2`. Samples
//! that fall outside the image read as zero.

use super::gemm::gemm;
use super::Var;
use crate::error::{shape_err, Error, Result};
use crate::tensor::Tensor;

/// Border handling for windowed operators.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum PadMode {
    #[default]
    Zero,
}

/// `(dy, dx)` displacement of every window offset, in offset-index order.
pub fn window_offsets(k: usize) -> Vec<(isize, isize)> {
    let r = (k / 2) as isize;
    (-r..=r)
        .flat_map(|dy| (-r..=r).map(move |dx| (dy, dx)))
        .collect()
}

pub(crate) fn check_window(k: usize) -> Result<()> {
    if k == 0 || k % 2 == 0 {
        return Err(Error::Config(format!("window size must be odd and positive, got {k}")));
    }
    Ok(())
}

/// Range of `x` such that `x + d` stays inside `0..n`.
#[inline]
fn valid_range(n: usize, d: isize) -> std::ops::Range<usize> {
    let lo = (-d).max(0) as usize;
    let hi = (n as isize - d).clamp(0, n as isize) as usize;
    lo.min(hi)..hi
}

impl<'g> Var<'g> {
    /// Extracts each pixel's `k×k` neighbourhood: `c×h×w` → `c×K×N`.
    pub fn unfold(self, k: usize, pad: PadMode) -> Result<Var<'g>> {
        check_window(k)?;
        let PadMode::Zero = pad;
        let x = self.value();
        let (c, h, w) = x.chw();
        let offs = window_offsets(k);
        let kk = offs.len();
        let n = h * w;
        let mut out = vec![0.0; c * kk * n];
        let src = x.data();
        for ch in 0..c {
            for (l, &(dy, dx)) in offs.iter().enumerate() {
                let dst = &mut out[(ch * kk + l) * n..(ch * kk + l + 1) * n];
                for y in valid_range(h, dy) {
                    let sy = (y as isize + dy) as usize;
                    for xx in valid_range(w, dx) {
                        dst[y * w + xx] = src[(ch * h + sy) * w + (xx as isize + dx) as usize];
                    }
                }
            }
        }
        Ok(self.op(
            &[self],
            Tensor::from_parts(vec![c, kk, n], out),
            Box::new(move |ctx| {
                let mut g = vec![0.0; c * h * w];
                for ch in 0..c {
                    for (l, &(dy, dx)) in offs.iter().enumerate() {
                        let go = &ctx.grad[(ch * kk + l) * n..(ch * kk + l + 1) * n];
                        for y in valid_range(h, dy) {
                            let sy = (y as isize + dy) as usize;
                            for xx in valid_range(w, dx) {
                                g[(ch * h + sy) * w + (xx as isize + dx) as usize] += go[y * w + xx];
                            }
                        }
                    }
                }
                vec![Some(g)]
            }),
        ))
    }

    /// Window similarities: `out[l, n] = Σ_c q[c, n] · key[c, n + offset_l]`,
    /// giving `K×N` from two `c×h×w` maps.
    pub fn local_dot(self, key: Var<'g>, k: usize) -> Result<Var<'g>> {
        check_window(k)?;
        let (q, kv) = (self.value(), key.value());
        if q.shape() != kv.shape() || q.rank() != 3 {
            return Err(shape_err("local_dot", q.shape(), kv.shape()));
        }
        let (c, h, w) = q.chw();
        let offs = window_offsets(k);
        let n = h * w;
        let mut out = vec![0.0; offs.len() * n];
        for (l, &(dy, dx)) in offs.iter().enumerate() {
            let dst = &mut out[l * n..(l + 1) * n];
            let xs = valid_range(w, dx);
            for ch in 0..c {
                let qc = &q.data()[ch * n..(ch + 1) * n];
                let kc = &kv.data()[ch * n..(ch + 1) * n];
                for y in valid_range(h, dy) {
                    let sy = (y as isize + dy) as usize;
                    let row = &mut dst[y * w..(y + 1) * w];
                    let qrow = &qc[y * w..(y + 1) * w];
                    let krow = &kc[sy * w..(sy + 1) * w];
                    for x in xs.clone() {
                        row[x] += qrow[x] * krow[(x as isize + dx) as usize];
                    }
                }
            }
        }
        Ok(self.op(
            &[self, key],
            Tensor::from_parts(vec![offs.len(), n], out),
            Box::new(move |ctx| {
                let (q, kv) = (ctx.inputs[0].data(), ctx.inputs[1].data());
                let mut gq = vec![0.0; c * n];
                let mut gk = vec![0.0; c * n];
                for (l, &(dy, dx)) in offs.iter().enumerate() {
                    let go = &ctx.grad[l * n..(l + 1) * n];
                    let xs = valid_range(w, dx);
                    for ch in 0..c {
                        for y in valid_range(h, dy) {
                            let sy = (y as isize + dy) as usize;
                            for x in xs.clone() {
                                let g = go[y * w + x];
                                let src = ch * n + sy * w + (x as isize + dx) as usize;
                                let dst = ch * n + y * w + x;
                                gq[dst] += g * kv[src];
                                gk[src] += g * q[dst];
                            }
                        }
                    }
                }
                vec![Some(gq), Some(gk)]
            }),
        ))
    }

    /// Weighted neighbourhood sum: `out[c, n] = Σ_l weights[l, n] · v[c, n + offset_l]`.
    /// `self` holds the `K×N` weights, `values` is `c×h×w`.
    pub fn local_aggregate(self, values: Var<'g>, k: usize) -> Result<Var<'g>> {
        check_window(k)?;
        let (wt, v) = (self.value(), values.value());
        let offs = window_offsets(k);
        if v.rank() != 3 || wt.shape() != [offs.len(), v.shape()[1] * v.shape()[2]] {
            return Err(shape_err("local_aggregate", wt.shape(), v.shape()));
        }
        let (c, h, w) = v.chw();
        let n = h * w;
        let mut out = vec![0.0; c * n];
        for ch in 0..c {
            let vc = &v.data()[ch * n..(ch + 1) * n];
            let oc = &mut out[ch * n..(ch + 1) * n];
            for (l, &(dy, dx)) in offs.iter().enumerate() {
                let wl = &wt.data()[l * n..(l + 1) * n];
                let xs = valid_range(w, dx);
                for y in valid_range(h, dy) {
                    let sy = (y as isize + dy) as usize;
                    for x in xs.clone() {
                        oc[y * w + x] += wl[y * w + x] * vc[sy * w + (x as isize + dx) as usize];
                    }
                }
            }
        }
        Ok(self.op(
            &[self, values],
            Tensor::from_parts(vec![c, h, w], out),
            Box::new(move |ctx| {
                let (wt, v) = (ctx.inputs[0].data(), ctx.inputs[1].data());
                let mut gw = vec![0.0; offs.len() * n];
                let mut gv = vec![0.0; c * n];
                for ch in 0..c {
                    let go = &ctx.grad[ch * n..(ch + 1) * n];
                    for (l, &(dy, dx)) in offs.iter().enumerate() {
                        let xs = valid_range(w, dx);
                        for y in valid_range(h, dy) {
                            let sy = (y as isize + dy) as usize;
                            for x in xs.clone() {
                                let p = y * w + x;
                                let s = ch * n + sy * w + (x as isize + dx) as usize;
                                gw[l * n + p] += go[p] * v[s];
                                gv[s] += go[p] * wt[l * n + p];
                            }
                        }
                    }
                }
                vec![Some(gw), Some(gv)]
            }),
        ))
    }

    /// Bilinear sampling of `c×h×w` at `M` positions given as a `2×M`
    /// tensor of `(y, x)` rows. Taps outside the grid contribute zero.
    pub fn bilinear_sample(self, coords: Var<'g>) -> Result<Var<'g>> {
        let (x, p) = (self.value(), coords.value());
        if x.rank() != 3 || p.rank() != 2 || p.shape()[0] != 2 {
            return Err(shape_err("bilinear_sample", x.shape(), p.shape()));
        }
        let (c, h, w) = x.chw();
        let m = p.shape()[1];
        let mut out = vec![0.0; c * m];
        for j in 0..m {
            for (idx, wgt, _, _) in taps(p.data()[j], p.data()[m + j], h, w) {
                for ch in 0..c {
                    out[ch * m + j] += wgt * x.data()[ch * h * w + idx];
                }
            }
        }
        Ok(self.op(
            &[self, coords],
            Tensor::from_parts(vec![c, m], out),
            Box::new(move |ctx| {
                let (x, p) = (ctx.inputs[0].data(), ctx.inputs[1].data());
                let mut gx = ctx.needs(0).then(|| vec![0.0; c * h * w]);
                let mut gp = ctx.needs(1).then(|| vec![0.0; 2 * m]);
                for j in 0..m {
                    for (idx, wgt, dwy, dwx) in taps(p[j], p[m + j], h, w) {
                        for ch in 0..c {
                            let g = ctx.grad[ch * m + j];
                            if let Some(gx) = gx.as_mut() {
                                gx[ch * h * w + idx] += g * wgt;
                            }
                            if let Some(gp) = gp.as_mut() {
                                let v = x[ch * h * w + idx];
                                gp[j] += g * dwy * v;
                                gp[m + j] += g * dwx * v;
                            }
                        }
                    }
                }
                vec![gx, gp]
            }),
        ))
    }

    /// 2-D convolution of `cin×h×w` with `cout×cin×kh×kw` weights.
    pub fn conv2d(self, weight: Var<'g>, bias: Var<'g>, stride: usize, pad: usize) -> Result<Var<'g>> {
        let (x, wv, bv) = (self.value(), weight.value(), bias.value());
        if x.rank() != 3 || wv.rank() != 4 || wv.shape()[1] != x.shape()[0] || bv.len() != wv.shape()[0] {
            return Err(shape_err("conv2d", x.shape(), wv.shape()));
        }
        if stride == 0 {
            return Err(Error::Config("conv2d stride must be positive".into()));
        }
        let geo = ConvGeometry::new(x.shape(), wv.shape(), stride, pad)?;
        let cols = geo.im2col(x.data());
        let (cout, rows, npix) = (wv.shape()[0], geo.rows(), geo.out_pixels());
        let mut y: Vec<f64> = bv.data().iter().flat_map(|&b| std::iter::repeat_n(b, npix)).collect();
        gemm(cout, rows, npix, 1.0, wv.data(), false, &cols, false, 1.0, &mut y);
        Ok(self.op(
            &[self, weight, bias],
            Tensor::from_parts(vec![cout, geo.oh, geo.ow], y),
            Box::new(move |ctx| {
                let (x, w) = (ctx.inputs[0].data(), ctx.inputs[1].data());
                let gx = ctx.needs(0).then(|| {
                    let mut gcols = vec![0.0; rows * npix];
                    gemm(rows, cout, npix, 1.0, w, true, ctx.grad, false, 0.0, &mut gcols);
                    geo.col2im(&gcols)
                });
                let gw = ctx.needs(1).then(|| {
                    let cols = geo.im2col(x);
                    let mut g = vec![0.0; cout * rows];
                    gemm(cout, npix, rows, 1.0, ctx.grad, false, &cols, true, 0.0, &mut g);
                    g
                });
                let gb = ctx
                    .needs(2)
                    .then(|| ctx.grad.chunks(npix).map(|r| r.iter().sum()).collect());
                vec![gx, gw, gb]
            }),
        ))
    }

    /// 2×2 average pooling of a `c×h×w` map with even `h`, `w`.
    pub fn avg_pool2(self) -> Result<Var<'g>> {
        let x = self.value();
        let (c, h, w) = x.chw();
        if h % 2 != 0 || w % 2 != 0 {
            return Err(Error::Config(format!("avg_pool2 needs even extents, got {h}x{w}")));
        }
        let (oh, ow) = (h / 2, w / 2);
        let mut out = vec![0.0; c * oh * ow];
        for ch in 0..c {
            for y in 0..oh {
                for xx in 0..ow {
                    let b = ch * h * w + 2 * y * w + 2 * xx;
                    let s = x.data()[b] + x.data()[b + 1] + x.data()[b + w] + x.data()[b + w + 1];
                    out[(ch * oh + y) * ow + xx] = 0.25 * s;
                }
            }
        }
        Ok(self.op(
            &[self],
            Tensor::from_parts(vec![c, oh, ow], out),
            Box::new(move |ctx| {
                let mut g = vec![0.0; c * h * w];
                for ch in 0..c {
                    for y in 0..oh {
                        for xx in 0..ow {
                            let v = 0.25 * ctx.grad[(ch * oh + y) * ow + xx];
                            let b = ch * h * w + 2 * y * w + 2 * xx;
                            g[b] += v;
                            g[b + 1] += v;
                            g[b + w] += v;
                            g[b + w + 1] += v;
                        }
                    }
                }
                vec![Some(g)]
            }),
        ))
    }

    /// Bilinear resize of `c×h×w` to `c×oh×ow` (half-pixel centres,
    /// border-clamped).
    pub fn resize_bilinear(self, oh: usize, ow: usize) -> Var<'g> {
        let x = self.value();
        let (c, h, w) = x.chw();
        let ys = resize_taps(h, oh);
        let xs = resize_taps(w, ow);
        let mut out = vec![0.0; c * oh * ow];
        for ch in 0..c {
            let src = &x.data()[ch * h * w..(ch + 1) * h * w];
            for (oy, &(y0, y1, fy)) in ys.iter().enumerate() {
                for (ox, &(x0, x1, fx)) in xs.iter().enumerate() {
                    out[(ch * oh + oy) * ow + ox] = (1.0 - fy) * ((1.0 - fx) * src[y0 * w + x0] + fx * src[y0 * w + x1])
                        + fy * ((1.0 - fx) * src[y1 * w + x0] + fx * src[y1 * w + x1]);
                }
            }
        }
        self.op(
            &[self],
            Tensor::from_parts(vec![c, oh, ow], out),
            Box::new(move |ctx| {
                let mut g = vec![0.0; c * h * w];
                for ch in 0..c {
                    let gs = &mut g[ch * h * w..(ch + 1) * h * w];
                    for (oy, &(y0, y1, fy)) in ys.iter().enumerate() {
                        for (ox, &(x0, x1, fx)) in xs.iter().enumerate() {
                            let v = ctx.grad[(ch * oh + oy) * ow + ox];
                            gs[y0 * w + x0] += v * (1.0 - fy) * (1.0 - fx);
                            gs[y0 * w + x1] += v * (1.0 - fy) * fx;
                            gs[y1 * w + x0] += v * fy * (1.0 - fx);
                            gs[y1 * w + x1] += v * fy * fx;
                        }
                    }
                }
                vec![Some(g)]
            }),
        )
    }
}

/// Up to four `(flat index, weight, dweight/dy, dweight/dx)` taps of a
/// bilinear sample at `(y, x)`; taps outside `h×w` are dropped.
pub(crate) fn taps(y: f64, x: f64, h: usize, w: usize) -> impl Iterator<Item = (usize, f64, f64, f64)> {
    let y0 = y.floor();
    let x0 = x.floor();
    let (fy, fx) = (y - y0, x - x0);
    let (y0, x0) = (y0 as isize, x0 as isize);
    [
        (y0, x0, (1.0 - fy) * (1.0 - fx), -(1.0 - fx), -(1.0 - fy)),
        (y0, x0 + 1, (1.0 - fy) * fx, -fx, 1.0 - fy),
        (y0 + 1, x0, fy * (1.0 - fx), 1.0 - fx, -fy),
        (y0 + 1, x0 + 1, fy * fx, fx, fy),
    ]
    .into_iter()
    .filter(move |&(ty, tx, ..)| ty >= 0 && tx >= 0 && (ty as usize) < h && (tx as usize) < w)
    .map(move |(ty, tx, wgt, dy, dx)| (ty as usize * w + tx as usize, wgt, dy, dx))
}

fn resize_taps(n: usize, out: usize) -> Vec<(usize, usize, f64)> {
    let ratio = n as f64 / out as f64;
    (0..out)
        .map(|o| {
            let s = ((o as f64 + 0.5) * ratio - 0.5).clamp(0.0, (n - 1) as f64);
            let i0 = s.floor() as usize;
            let i1 = (i0 + 1).min(n - 1);
            (i0, i1, s - i0 as f64)
        })
        .collect()
}

#[derive(Clone, Copy)]
struct ConvGeometry {
    cin: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    oh: usize,
    ow: usize,
}

impl ConvGeometry {
    fn new(x: &[usize], wt: &[usize], stride: usize, pad: usize) -> Result<Self> {
        let (cin, h, w) = (x[0], x[1], x[2]);
        let (kh, kw) = (wt[2], wt[3]);
        if h + 2 * pad < kh || w + 2 * pad < kw {
            return Err(shape_err("conv2d", x, wt));
        }
        let oh = (h + 2 * pad - kh) / stride + 1;
        let ow = (w + 2 * pad - kw) / stride + 1;
        Ok(Self { cin, h, w, kh, kw, stride, pad, oh, ow })
    }

    fn rows(&self) -> usize {
        self.cin * self.kh * self.kw
    }

    fn out_pixels(&self) -> usize {
        self.oh * self.ow
    }

    fn source(&self, oy: usize, ky: usize, ox: usize, kx: usize) -> Option<usize> {
        let sy = (oy * self.stride + ky) as isize - self.pad as isize;
        let sx = (ox * self.stride + kx) as isize - self.pad as isize;
        (sy >= 0 && sx >= 0 && (sy as usize) < self.h && (sx as usize) < self.w)
            .then(|| sy as usize * self.w + sx as usize)
    }

    fn im2col(&self, x: &[f64]) -> Vec<f64> {
        let np = self.out_pixels();
        let mut cols = vec![0.0; self.rows() * np];
        for ci in 0..self.cin {
            let plane = &x[ci * self.h * self.w..(ci + 1) * self.h * self.w];
            for ky in 0..self.kh {
                for kx in 0..self.kw {
                    let row = (ci * self.kh + ky) * self.kw + kx;
                    let dst = &mut cols[row * np..(row + 1) * np];
                    for oy in 0..self.oh {
                        for ox in 0..self.ow {
                            if let Some(s) = self.source(oy, ky, ox, kx) {
                                dst[oy * self.ow + ox] = plane[s];
                            }
                        }
                    }
                }
            }
        }
        cols
    }

    fn col2im(&self, cols: &[f64]) -> Vec<f64> {
        let np = self.out_pixels();
        let mut x = vec![0.0; self.cin * self.h * self.w];
        for ci in 0..self.cin {
            for ky in 0..self.kh {
                for kx in 0..self.kw {
                    let row = (ci * self.kh + ky) * self.kw + kx;
                    let src = &cols[row * np..(row + 1) * np];
                    for oy in 0..self.oh {
                        for ox in 0..self.ow {
                            if let Some(s) = self.source(oy, ky, ox, kx) {
                                x[ci * self.h * self.w + s] += src[oy * self.ow + ox];
                            }
                        }
                    }
                }
            }
        }
        x
    }
}
