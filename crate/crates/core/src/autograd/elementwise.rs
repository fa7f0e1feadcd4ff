//! Elementwise arithmetic, activations, reductions and shape plumbing.

use std::ops::Range;

use super::Var;
use crate::tensor::Tensor;

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

impl<'g> Var<'g> {
    fn map_unary(self, f: impl Fn(f64) -> f64, df: fn(f64, f64) -> f64) -> Var<'g> {
        let out = self.value().map(f);
        self.op(
            &[self],
            out,
            Box::new(move |ctx| {
                let x = ctx.inputs[0].data();
                let y = ctx.output.data();
                let g = ctx
                    .grad
                    .iter()
                    .zip(x.iter().zip(y))
                    .map(|(g, (&x, &y))| g * df(x, y))
                    .collect();
                vec![Some(g)]
            }),
        )
    }

    fn zip_same(self, other: Var<'g>, op: &'static str) -> (std::rc::Rc<Tensor>, std::rc::Rc<Tensor>) {
        let (a, b) = (self.value(), other.value());
        assert_eq!(
            a.shape(),
            b.shape(),
            "{op}: shapes {:?} and {:?} differ",
            a.shape(),
            b.shape()
        );
        (a, b)
    }

    pub fn add(self, other: Var<'g>) -> Var<'g> {
        let (a, b) = self.zip_same(other, "add");
        let data = a.data().iter().zip(b.data()).map(|(x, y)| x + y).collect();
        let out = Tensor::from_parts(a.shape().to_vec(), data);
        self.op(
            &[self, other],
            out,
            Box::new(|ctx| vec![Some(ctx.grad.to_vec()), Some(ctx.grad.to_vec())]),
        )
    }

    pub fn sub(self, other: Var<'g>) -> Var<'g> {
        let (a, b) = self.zip_same(other, "sub");
        let data = a.data().iter().zip(b.data()).map(|(x, y)| x - y).collect();
        let out = Tensor::from_parts(a.shape().to_vec(), data);
        self.op(
            &[self, other],
            out,
            Box::new(|ctx| {
                let neg = ctx.needs(1).then(|| ctx.grad.iter().map(|g| -g).collect());
                vec![Some(ctx.grad.to_vec()), neg]
            }),
        )
    }

    /// Hadamard product.
    pub fn mul(self, other: Var<'g>) -> Var<'g> {
        let (a, b) = self.zip_same(other, "mul");
        let data = a.data().iter().zip(b.data()).map(|(x, y)| x * y).collect();
        let out = Tensor::from_parts(a.shape().to_vec(), data);
        self.op(
            &[self, other],
            out,
            Box::new(|ctx| {
                let (a, b) = (ctx.inputs[0].data(), ctx.inputs[1].data());
                let ga = ctx
                    .needs(0)
                    .then(|| ctx.grad.iter().zip(b).map(|(g, y)| g * y).collect());
                let gb = ctx
                    .needs(1)
                    .then(|| ctx.grad.iter().zip(a).map(|(g, x)| g * x).collect());
                vec![ga, gb]
            }),
        )
    }

    pub fn scale(self, s: f64) -> Var<'g> {
        let out = self.value().map(|v| v * s);
        self.op(
            &[self],
            out,
            Box::new(move |ctx| vec![Some(ctx.grad.iter().map(|g| g * s).collect())]),
        )
    }

    pub fn add_scalar(self, s: f64) -> Var<'g> {
        let out = self.value().map(|v| v + s);
        self.op(&[self], out, Box::new(|ctx| vec![Some(ctx.grad.to_vec())]))
    }

    /// Multiplies every element by a single-element variable.
    pub fn mul_scalar(self, s: Var<'g>) -> Var<'g> {
        assert_eq!(s.len(), 1, "mul_scalar expects a single-element factor");
        let k = s.value().data()[0];
        let out = self.value().map(|v| v * k);
        self.op(
            &[self, s],
            out,
            Box::new(|ctx| {
                let k = ctx.inputs[1].data()[0];
                let gx = ctx.needs(0).then(|| ctx.grad.iter().map(|g| g * k).collect());
                let gs = ctx.needs(1).then(|| {
                    vec![ctx
                        .grad
                        .iter()
                        .zip(ctx.inputs[0].data())
                        .map(|(g, x)| g * x)
                        .sum()]
                });
                vec![gx, gs]
            }),
        )
    }

    pub fn relu(self) -> Var<'g> {
        self.map_unary(|x| x.max(0.0), |x, _| if x > 0.0 { 1.0 } else { 0.0 })
    }

    pub fn sigmoid(self) -> Var<'g> {
        self.map_unary(|x| 1.0 / (1.0 + (-x).exp()), |_, y| y * (1.0 - y))
    }

    pub fn tanh(self) -> Var<'g> {
        self.map_unary(f64::tanh, |_, y| 1.0 - y * y)
    }

    pub fn exp(self) -> Var<'g> {
        self.map_unary(f64::exp, |_, y| y)
    }

    pub fn abs(self) -> Var<'g> {
        self.map_unary(f64::abs, |x, _| x.signum() * (x != 0.0) as u8 as f64)
    }

    /// GELU, tanh approximation.
    pub fn gelu(self) -> Var<'g> {
        self.map_unary(
            |x| 0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh()),
            |x, _| {
                let u = GELU_C * (x + 0.044715 * x * x * x);
                let t = u.tanh();
                let du = GELU_C * (1.0 + 3.0 * 0.044715 * x * x);
                0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du
            },
        )
    }

    /// Sum of all elements, as a `[1]` tensor.
    pub fn sum(self) -> Var<'g> {
        let v = self.value();
        let n = v.len();
        let out = Tensor::scalar(v.sum());
        self.op(&[self], out, Box::new(move |ctx| vec![Some(vec![ctx.grad[0]; n])]))
    }

    pub fn mean(self) -> Var<'g> {
        let n = self.len() as f64;
        self.sum().scale(1.0 / n)
    }

    pub fn reshape(self, shape: &[usize]) -> Var<'g> {
        let out = self
            .value()
            .reshape(shape)
            .unwrap_or_else(|e| panic!("reshape: {e}"));
        self.op(&[self], out, Box::new(|ctx| vec![Some(ctx.grad.to_vec())]))
    }

    /// Transpose of a matrix.
    pub fn transpose(self) -> Var<'g> {
        let v = self.value();
        assert_eq!(v.rank(), 2, "transpose expects a matrix, got {:?}", v.shape());
        let (m, n) = (v.shape()[0], v.shape()[1]);
        let out = Tensor::from_parts(vec![n, m], transpose_buf(v.data(), m, n));
        self.op(
            &[self],
            out,
            Box::new(move |ctx| vec![Some(transpose_buf(ctx.grad, n, m))]),
        )
    }

    /// Concatenation along the first axis.
    pub fn concat(parts: &[Var<'g>]) -> Var<'g> {
        assert!(!parts.is_empty(), "concat of nothing");
        let values: Vec<_> = parts.iter().map(|p| p.value()).collect();
        let tail = values[0].shape()[1..].to_vec();
        let mut lead = 0;
        let mut data = Vec::new();
        let mut sizes = Vec::with_capacity(parts.len());
        for v in &values {
            assert_eq!(&v.shape()[1..], &tail[..], "concat: trailing extents differ");
            lead += v.shape()[0];
            sizes.push(v.len());
            data.extend_from_slice(v.data());
        }
        let mut shape = vec![lead];
        shape.extend(&tail);
        parts[0].op(
            parts,
            Tensor::from_parts(shape, data),
            Box::new(move |ctx| {
                let mut at = 0;
                sizes
                    .iter()
                    .enumerate()
                    .map(|(i, &s)| {
                        let g = ctx.needs(i).then(|| ctx.grad[at..at + s].to_vec());
                        at += s;
                        g
                    })
                    .collect()
            }),
        )
    }

    /// Rows `range` of the first axis.
    pub fn slice0(self, range: Range<usize>) -> Var<'g> {
        let v = self.value();
        assert!(range.end <= v.shape()[0], "slice0 out of range");
        let inner: usize = v.shape()[1..].iter().product();
        let mut shape = v.shape().to_vec();
        shape[0] = range.len();
        let out = Tensor::from_parts(shape, v.data()[range.start * inner..range.end * inner].to_vec());
        let total = v.len();
        self.op(
            &[self],
            out,
            Box::new(move |ctx| {
                let mut g = vec![0.0; total];
                g[range.start * inner..range.end * inner].copy_from_slice(ctx.grad);
                vec![Some(g)]
            }),
        )
    }

    /// Repeats a length-`k` vector into the columns of a `k×n` matrix.
    pub fn broadcast_cols(self, n: usize) -> Var<'g> {
        let v = self.value();
        let k = v.len();
        let data = v.data().iter().flat_map(|&x| std::iter::repeat_n(x, n)).collect();
        let out = Tensor::from_parts(vec![k, n], data);
        self.op(
            &[self],
            out,
            Box::new(move |ctx| {
                vec![Some(ctx.grad.chunks(n).map(|row| row.iter().sum()).collect())]
            }),
        )
    }
}

pub(crate) fn transpose_buf(src: &[f64], m: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            out[j * m + i] = src[i * n + j];
        }
    }
    out
}
