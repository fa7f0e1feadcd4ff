//! All-pairs correlation pyramid and windowed lookup.

use crate::autograd::spatial::taps;
use crate::autograd::Var;
use crate::error::{shape_err, Result};
use crate::tensor::Tensor;

/// Correlation of every first-frame pixel with every second-frame pixel,
/// at successively 2×-pooled second-frame resolutions. Level `l` is
/// `N × (h_l·w_l)`.
#[derive(Clone, Debug)]
pub struct CorrPyramid<'g> {
    pub levels: Vec<Var<'g>>,
    pub dims: Vec<(usize, usize)>,
    pub height: usize,
    pub width: usize,
}

/// `corr(i, j) = ⟨f1(i), f2(j)⟩ / √c` for `c×h×w` features. Coarser levels
/// correlate against average-pooled `f2`, which by linearity equals pooling
/// the finer volume over its second-frame axes.
pub fn build_corr<'g>(f1: Var<'g>, f2: Var<'g>, levels: usize) -> Result<CorrPyramid<'g>> {
    let s = f1.shape();
    if s.len() != 3 || f2.shape() != s {
        return Err(shape_err("build_corr", &s, &f2.shape()));
    }
    let (c, h, w) = (s[0], s[1], s[2]);
    let lhs = f1.reshape(&[c, h * w]).transpose().scale(1.0 / (c as f64).sqrt());
    let mut target = f2;
    let mut out = Vec::with_capacity(levels);
    let mut dims = Vec::with_capacity(levels);
    for l in 0..levels {
        if l > 0 {
            target = target.avg_pool2()?;
        }
        let t = target.shape();
        out.push(lhs.matmul(target.reshape(&[c, t[1] * t[2]]))?);
        dims.push((t[1], t[2]));
    }
    Ok(CorrPyramid {
        levels: out,
        dims,
        height: h,
        width: w,
    })
}

impl<'g> CorrPyramid<'g> {
    /// Bilinear samples of each pixel's correlation row around
    /// `pixel + flow`, at integer offsets in `[−r, r]²` (row-major, `dy`
    /// outer) on every level. Level `l` uses coordinates divided by `2^l`.
    /// Out-of-range samples read 0. `flow` is `2×h×w` (`u`, `v`) and is
    /// treated as a constant. Returns `(levels·(2r+1)²)×h×w`.
    pub fn lookup(&self, flow: &Tensor, radius: usize) -> Result<Var<'g>> {
        let (h, w) = (self.height, self.width);
        if flow.shape() != [2, h, w] {
            return Err(shape_err("lookup", flow.shape(), &[2, h, w]));
        }
        let parts: Vec<Var<'g>> = self
            .levels
            .iter()
            .zip(&self.dims)
            .enumerate()
            .map(|(l, (&corr, &dims))| lookup_level(corr, dims, flow, radius, (1u32 << l) as f64, (h, w)))
            .collect();
        let k = (2 * radius + 1).pow(2);
        Ok(Var::concat(&parts).reshape(&[self.levels.len() * k, h, w]))
    }
}

/// Per-output `(row offset into corr, taps)` sampling plan for one level.
fn plan(flow: &Tensor, radius: usize, scale: f64, (h, w): (usize, usize), (hl, wl): (usize, usize)) -> Vec<Vec<(usize, f64)>> {
    let n = h * w;
    let r = radius as isize;
    let m = hl * wl;
    let mut out = Vec::with_capacity((2 * radius + 1).pow(2) * n);
    for dy in -r..=r {
        for dx in -r..=r {
            for i in 0..n {
                let (y, x) = ((i / w) as f64, (i % w) as f64);
                let cy = (y + flow.data()[n + i]) / scale + dy as f64;
                let cx = (x + flow.data()[i]) / scale + dx as f64;
                out.push(taps(cy, cx, hl, wl).map(|(j, wgt, _, _)| (i * m + j, wgt)).collect());
            }
        }
    }
    out
}

fn lookup_level<'g>(
    corr: Var<'g>,
    dims: (usize, usize),
    flow: &Tensor,
    radius: usize,
    scale: f64,
    hw: (usize, usize),
) -> Var<'g> {
    let plan = plan(flow, radius, scale, hw, dims);
    let value = {
        let c = corr.value();
        let data = plan
            .iter()
            .map(|t| t.iter().map(|&(j, wgt)| wgt * c.data()[j]).sum())
            .collect();
        Tensor::new(&[plan.len()], data).expect("lookup plan length")
    };
    let len = corr.len();
    corr.graph().custom(
        &[corr],
        value,
        Box::new(move |ctx| {
            let mut g = vec![0.0; len];
            for (t, &go) in plan.iter().zip(ctx.grad) {
                for &(j, wgt) in t {
                    g[j] += wgt * go;
                }
            }
            vec![Some(g)]
        }),
    )
}
