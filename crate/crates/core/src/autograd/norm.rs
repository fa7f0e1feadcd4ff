use super::Var;
use crate::error::{shape_err, Result};
use crate::tensor::Tensor;

/// Splits `shape` around `axis` into (outer, extent, inner) strides.
fn around(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

impl<'g> Var<'g> {
    /// Softmax along `axis`, stabilised by subtracting the slice maximum.
    pub fn softmax(self, axis: usize) -> Var<'g> {
        let x = self.value();
        assert!(axis < x.rank(), "softmax axis {axis} out of range for {:?}", x.shape());
        let (outer, len, inner) = around(x.shape(), axis);
        let xd = x.data();
        let mut y = vec![0.0; x.len()];
        for o in 0..outer {
            for i in 0..inner {
                let base = o * len * inner + i;
                let max = (0..len)
                    .map(|l| xd[base + l * inner])
                    .fold(f64::NEG_INFINITY, f64::max);
                let mut total = 0.0;
                for l in 0..len {
                    let e = (xd[base + l * inner] - max).exp();
                    y[base + l * inner] = e;
                    total += e;
                }
                for l in 0..len {
                    y[base + l * inner] /= total;
                }
            }
        }
        self.op(
            &[self],
            Tensor::from_parts(x.shape().to_vec(), y),
            Box::new(move |ctx| {
                let y = ctx.output.data();
                let g = ctx.grad;
                let mut gx = vec![0.0; y.len()];
                for o in 0..outer {
                    for i in 0..inner {
                        let base = o * len * inner + i;
                        let dot: f64 = (0..len)
                            .map(|l| g[base + l * inner] * y[base + l * inner])
                            .sum();
                        for l in 0..len {
                            let at = base + l * inner;
                            gx[at] = y[at] * (g[at] - dot);
                        }
                    }
                }
                vec![Some(gx)]
            }),
        )
    }

    /// Layer normalisation over the trailing axis with affine `gain`, `bias`.
    pub fn layer_norm(self, gain: Var<'g>, bias: Var<'g>, eps: f64) -> Result<Var<'g>> {
        let (x, gv, bv) = (self.value(), gain.value(), bias.value());
        let c = *x.shape().last().unwrap_or(&0);
        if c == 0 || gv.len() != c || bv.len() != c {
            return Err(shape_err("layer_norm", x.shape(), gv.shape()));
        }
        assert!(eps > 0.0, "layer_norm eps must be positive");
        let stats = row_stats(x.data(), c, eps);
        let mut y = vec![0.0; x.len()];
        for (r, row) in x.data().chunks(c).enumerate() {
            let (mean, rstd) = stats[r];
            for j in 0..c {
                y[r * c + j] = (row[j] - mean) * rstd * gv.data()[j] + bv.data()[j];
            }
        }
        Ok(self.op(
            &[self, gain, bias],
            Tensor::from_parts(x.shape().to_vec(), y),
            Box::new(move |ctx| {
                let (x, gain) = (ctx.inputs[0].data(), ctx.inputs[1].data());
                let g = ctx.grad;
                let mut gx = vec![0.0; x.len()];
                let mut gg = vec![0.0; c];
                let mut gb = vec![0.0; c];
                let inv_c = 1.0 / c as f64;
                for (r, row) in x.chunks(c).enumerate() {
                    let (mean, rstd) = stats[r];
                    let go = &g[r * c..(r + 1) * c];
                    let mut sum_d = 0.0;
                    let mut sum_dx = 0.0;
                    for j in 0..c {
                        let xhat = (row[j] - mean) * rstd;
                        let d = go[j] * gain[j];
                        sum_d += d;
                        sum_dx += d * xhat;
                        gg[j] += go[j] * xhat;
                        gb[j] += go[j];
                    }
                    for j in 0..c {
                        let xhat = (row[j] - mean) * rstd;
                        let d = go[j] * gain[j];
                        gx[r * c + j] = rstd * (d - inv_c * sum_d - xhat * inv_c * sum_dx);
                    }
                }
                vec![Some(gx), Some(gg), Some(gb)]
            }),
        ))
    }
}

fn row_stats(x: &[f64], c: usize, eps: f64) -> Vec<(f64, f64)> {
    x.chunks(c)
        .map(|row| {
            let mean = row.iter().sum::<f64>() / c as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
            (mean, 1.0 / (var + eps).sqrt())
        })
        .collect()
}
