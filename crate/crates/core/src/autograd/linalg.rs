use super::gemm::gemm;
use super::Var;
use crate::error::{shape_err, Result};
use crate::tensor::Tensor;

impl<'g> Var<'g> {
    /// Matrix product of `m×p` and `p×n` operands.
    pub fn matmul(self, rhs: Var<'g>) -> Result<Var<'g>> {
        let (a, b) = (self.value(), rhs.value());
        if a.rank() != 2 || b.rank() != 2 || a.shape()[1] != b.shape()[0] {
            return Err(shape_err("matmul", a.shape(), b.shape()));
        }
        let (m, k, n) = (a.shape()[0], a.shape()[1], b.shape()[1]);
        let mut c = vec![0.0; m * n];
        gemm(m, k, n, 1.0, a.data(), false, b.data(), false, 0.0, &mut c);
        Ok(self.op(
            &[self, rhs],
            Tensor::from_parts(vec![m, n], c),
            Box::new(move |ctx| {
                let (a, b) = (ctx.inputs[0].data(), ctx.inputs[1].data());
                let ga = ctx.needs(0).then(|| {
                    let mut g = vec![0.0; m * k];
                    gemm(m, n, k, 1.0, ctx.grad, false, b, true, 0.0, &mut g);
                    g
                });
                let gb = ctx.needs(1).then(|| {
                    let mut g = vec![0.0; k * n];
                    gemm(k, m, n, 1.0, a, true, ctx.grad, false, 0.0, &mut g);
                    g
                });
                vec![ga, gb]
            }),
        ))
    }

    /// Affine map over the trailing axis: `x[..., cin] · w[cin, cout] + b[cout]`.
    pub fn linear(self, w: Var<'g>, b: Var<'g>) -> Result<Var<'g>> {
        let (x, wv, bv) = (self.value(), w.value(), b.value());
        let cin = *x.shape().last().unwrap_or(&0);
        if wv.rank() != 2 || wv.shape()[0] != cin || bv.len() != wv.shape()[1] {
            return Err(shape_err("linear", x.shape(), wv.shape()));
        }
        let cout = wv.shape()[1];
        let rows = x.len() / cin.max(1);
        let mut y: Vec<f64> = bv.data().iter().copied().cycle().take(rows * cout).collect();
        gemm(rows, cin, cout, 1.0, x.data(), false, wv.data(), false, 1.0, &mut y);
        let mut shape = x.shape().to_vec();
        *shape.last_mut().unwrap() = cout;
        Ok(self.op(
            &[self, w, b],
            Tensor::from_parts(shape, y),
            Box::new(move |ctx| {
                let (x, w) = (ctx.inputs[0].data(), ctx.inputs[1].data());
                let gx = ctx.needs(0).then(|| {
                    let mut g = vec![0.0; rows * cin];
                    gemm(rows, cout, cin, 1.0, ctx.grad, false, w, true, 0.0, &mut g);
                    g
                });
                let gw = ctx.needs(1).then(|| {
                    let mut g = vec![0.0; cin * cout];
                    gemm(cin, rows, cout, 1.0, x, true, ctx.grad, false, 0.0, &mut g);
                    g
                });
                let gb = ctx.needs(2).then(|| {
                    let mut g = vec![0.0; cout];
                    for row in ctx.grad.chunks(cout) {
                        g.iter_mut().zip(row).for_each(|(a, b)| *a += b);
                    }
                    g
                });
                vec![gx, gw, gb]
            }),
        ))
    }

    /// Per-pixel affine map on a channel-first `cin×h×w` map with
    /// `w[cin, cout]`, `b[cout]`. Equivalent to a 1×1 convolution.
    pub fn pointwise(self, w: Var<'g>, b: Var<'g>) -> Result<Var<'g>> {
        let (x, wv, bv) = (self.value(), w.value(), b.value());
        if x.rank() < 2
            || wv.rank() != 2
            || wv.shape()[0] != x.shape()[0]
            || bv.len() != wv.shape()[1]
        {
            return Err(shape_err("pointwise", x.shape(), wv.shape()));
        }
        let cin = x.shape()[0];
        let cout = wv.shape()[1];
        let n = x.len() / cin;
        let mut y: Vec<f64> = bv
            .data()
            .iter()
            .flat_map(|&b| std::iter::repeat_n(b, n))
            .collect();
        gemm(cout, cin, n, 1.0, wv.data(), true, x.data(), false, 1.0, &mut y);
        let mut shape = x.shape().to_vec();
        shape[0] = cout;
        Ok(self.op(
            &[self, w, b],
            Tensor::from_parts(shape, y),
            Box::new(move |ctx| {
                let (x, w) = (ctx.inputs[0].data(), ctx.inputs[1].data());
                let gx = ctx.needs(0).then(|| {
                    let mut g = vec![0.0; cin * n];
                    gemm(cin, cout, n, 1.0, w, false, ctx.grad, false, 0.0, &mut g);
                    g
                });
                let gw = ctx.needs(1).then(|| {
                    let mut g = vec![0.0; cin * cout];
                    gemm(cin, n, cout, 1.0, x, false, ctx.grad, true, 0.0, &mut g);
                    g
                });
                let gb = ctx
                    .needs(2)
                    .then(|| ctx.grad.chunks(n).map(|r| r.iter().sum()).collect());
                vec![gx, gw, gb]
            }),
        ))
    }
}
