//! Gaussian window machinery: the analytic isotropic 2-D Gaussian, the
//! learnable discrete kernel used as an attention mask, the spatially
//! expanded kernel, its deformable re-evaluation and the amplitude operator.
//!
//! Offsets within a `k×k` window follow [`window_offsets`]; per-pixel
//! kernels are stored as `K×N` matrices (`K = k²` offsets, `N = h·w` pixels).

use crate::autograd::{window_offsets, Graph, ParamId, ParamStore, Var};
use crate::error::{Error, Result};
use crate::nn::Linear;
use crate::tensor::Tensor;

/// Window size, spread and static amplitude of an isotropic Gaussian
/// centred on the middle of a `k×k` window.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GaussianKernelSpec {
    pub k: usize,
    pub sigma: f64,
    pub amplitude: f64,
}

impl GaussianKernelSpec {
    pub fn new(k: usize, sigma: f64) -> Result<Self> {
        if k == 0 || k % 2 == 0 {
            return Err(Error::Config(format!("kernel window must be odd, got {k}")));
        }
        if !(sigma > 0.0 && sigma.is_finite()) {
            return Err(Error::Config(format!("sigma must be positive, got {sigma}")));
        }
        Ok(Self {
            k,
            sigma,
            amplitude: 1.0,
        })
    }

    pub fn with_amplitude(mut self, amplitude: f64) -> Self {
        self.amplitude = amplitude;
        self
    }

    /// Number of window offsets, `k²`.
    pub fn taps(&self) -> usize {
        self.k * self.k
    }

    /// Window centre `(x₀, y₀)` in window coordinates.
    pub fn center(&self) -> (f64, f64) {
        let r = (self.k / 2) as f64;
        (r, r)
    }

    /// Gaussian at displacement `(dy, dx)` from the centre.
    #[inline]
    pub fn at_offset(&self, dy: f64, dx: f64) -> f64 {
        let s2 = 2.0 * self.sigma * self.sigma;
        self.amplitude * (-(dx * dx / s2 + dy * dy / s2)).exp()
    }

    /// The discretised `k×k` window with zero delta.
    pub fn window(&self) -> Tensor {
        let data = window_offsets(self.k)
            .into_iter()
            .map(|(dy, dx)| self.at_offset(dy as f64, dx as f64))
            .collect();
        Tensor::from_parts(vec![self.k, self.k], data)
    }
}

/// `A·exp(−((x−x₀)²/2σ² + (y−y₀)²/2σ²))` in window coordinates.
pub fn gauss2d(spec: &GaussianKernelSpec, x: f64, y: f64) -> f64 {
    let (x0, y0) = spec.center();
    spec.at_offset(y - y0, x - x0)
}

/// Discrete Gaussian plus a learnable additive `k×k` matrix, zero at init.
#[derive(Clone, Debug)]
pub struct LearnableGaussianKernel {
    pub spec: GaussianKernelSpec,
    pub delta: ParamId,
}

impl LearnableGaussianKernel {
    pub fn new(store: &mut ParamStore, name: &str, spec: GaussianKernelSpec) -> Self {
        let delta = store.add(format!("{name}.delta"), Tensor::zeros(&[spec.k, spec.k]));
        Self { spec, delta }
    }

    /// `window + delta` as a `k×k` variable.
    pub fn materialize<'g>(&self, g: &'g Graph, store: &ParamStore) -> Var<'g> {
        g.constant(self.spec.window()).add(g.param(store, self.delta))
    }
}

/// The window replicated at every pixel: `K×N` with identical columns.
pub fn expand_kernel(spec: &GaussianKernelSpec, h: usize, w: usize) -> Tensor {
    let n = h * w;
    let data = window_offsets(spec.k)
        .into_iter()
        .flat_map(|(dy, dx)| std::iter::repeat_n(spec.at_offset(dy as f64, dx as f64), n))
        .collect();
    Tensor::from_parts(vec![spec.taps(), n], data)
}

/// Re-evaluates the Gaussian at displaced sample positions. `offsets` is
/// `2×K×N` with `(dy, dx)` planes; the result is `K×N` with entry
/// `G(offset_l + Δ_{l,n})`.
pub fn deform<'g>(spec: &GaussianKernelSpec, offsets: Var<'g>) -> Result<Var<'g>> {
    let o = offsets.value();
    let kk = spec.taps();
    if o.rank() != 3 || o.shape()[0] != 2 || o.shape()[1] != kk {
        return Err(crate::error::shape_err("deform", o.shape(), &[2, kk]));
    }
    let n = o.shape()[2];
    let offs = window_offsets(spec.k);
    let spec = *spec;
    let (oy, ox) = o.data().split_at(kk * n);
    let mut out = vec![0.0; kk * n];
    for (l, &(dy, dx)) in offs.iter().enumerate() {
        for j in 0..n {
            let i = l * n + j;
            out[i] = spec.at_offset(dy as f64 + oy[i], dx as f64 + ox[i]);
        }
    }
    Ok(offsets.graph().custom(
        &[offsets],
        Tensor::from_parts(vec![kk, n], out),
        Box::new(move |ctx| {
            let (oy, ox) = ctx.inputs[0].data().split_at(kk * n);
            let val = ctx.output.data();
            let inv = 1.0 / (spec.sigma * spec.sigma);
            let mut g = vec![0.0; 2 * kk * n];
            for (l, &(dy, dx)) in offs.iter().enumerate() {
                for j in 0..n {
                    let i = l * n + j;
                    let gv = ctx.grad[i] * val[i] * inv;
                    g[i] = -gv * (dy as f64 + oy[i]);
                    g[kk * n + i] = -gv * (dx as f64 + ox[i]);
                }
            }
            vec![Some(g)]
        }),
    ))
}

/// `1 + ϑ(f_m)·λ` reshaped to `K×N`, where `theta` maps `c → K` per pixel
/// and `lambda` is a single-element variable.
pub fn amplitude<'g>(
    g: &'g Graph,
    store: &ParamStore,
    f_m: Var<'g>,
    theta: &Linear,
    lambda: Var<'g>,
) -> Result<Var<'g>> {
    let s = f_m.shape();
    let t = theta.pointwise(g, store, f_m)?;
    let kk = t.shape()[0];
    Ok(t.reshape(&[kk, s[1] * s[2]]).mul_scalar(lambda).add_scalar(1.0))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{check, GradCheckConfig};
    use crate::nn::Init;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn spec(k: usize, sigma: f64) -> GaussianKernelSpec {
        GaussianKernelSpec::new(k, sigma).unwrap()
    }

    #[test]
    fn gauss2d_peak_and_unit_step() {
        let s = spec(5, 1.0);
        assert_eq!(gauss2d(&s, 2.0, 2.0), 1.0);
        assert!((gauss2d(&s, 3.0, 2.0) - (-0.5f64).exp()).abs() < 1e-15);
        assert!((gauss2d(&s, 3.0, 2.0) - 0.60653).abs() < 1e-5);
        for (a, b) in [(0.3, -1.2), (1.0, 2.0), (-0.7, 0.1)] {
            assert!((gauss2d(&s, 2.0 + a, 2.0 + b) - gauss2d(&s, 2.0 - a, 2.0 - b)).abs() < 1e-15);
        }
    }

    #[test]
    fn spec_rejects_even_window_and_bad_sigma() {
        assert!(GaussianKernelSpec::new(4, 1.0).is_err());
        assert!(GaussianKernelSpec::new(3, 0.0).is_err());
        assert!(GaussianKernelSpec::new(3, f64::NAN).is_err());
    }

    #[test]
    fn materialize_initial_window() {
        let mut store = ParamStore::new();
        let kern = LearnableGaussianKernel::new(&mut store, "g", spec(3, 1.0));
        let g = Graph::new();
        let m = kern.materialize(&g, &store).value();
        assert_eq!(m.at(&[1, 1]), 1.0);
        for idx in [[0, 1], [1, 0], [1, 2], [2, 1]] {
            assert_eq!(m.at(&idx), (-0.5f64).exp());
        }
        // isotropy: invariant under rotation by 90° and reflection
        for i in 0..3 {
            for j in 0..3 {
                assert_eq!(m.at(&[i, j]), m.at(&[j, 2 - i]));
                assert_eq!(m.at(&[i, j]), m.at(&[i, 2 - j]));
            }
        }
    }

    #[test]
    fn materialize_to_all_ones() {
        let mut store = ParamStore::new();
        let s = spec(5, 1.3);
        let kern = LearnableGaussianKernel::new(&mut store, "g", s);
        *store.value_mut(kern.delta) = s.window().map(|v| 1.0 - v);
        let g = Graph::new();
        let m = kern.materialize(&g, &store).value();
        assert!(m.data().iter().all(|&v| (v - 1.0).abs() < 1e-15));
    }

    #[test]
    fn materialize_jacobian_is_identity() {
        let mut store = ParamStore::new();
        let s = spec(3, 0.8);
        let kern = LearnableGaussianKernel::new(&mut store, "g", s);
        let r = check(
            "materialize",
            &mut store,
            &[],
            |g, st, _| Ok(kern.materialize(g, st)),
            &GradCheckConfig::default(),
            3,
        )
        .unwrap();
        assert!(r.passed(), "{r:?}");
        // d(out)/d(delta) = I: the gradient of Σ r⊙out is r itself.
        let g = Graph::new();
        let out = kern.materialize(&g, &store);
        let r = Tensor::rand_uniform(&[3, 3], -1.0, 1.0, &mut ChaCha8Rng::seed_from_u64(9));
        g.backward(out.mul(g.constant(r.clone())).sum());
        store.zero_grad();
        store.accumulate(&g);
        assert_eq!(store.grad(kern.delta), &r);
    }

    #[test]
    fn expand_kernel_columns() {
        let s = spec(3, 1.0);
        let e = expand_kernel(&s, 4, 5);
        assert_eq!(e.shape(), &[9, 20]);
        for l in 0..9 {
            let row = &e.data()[l * 20..(l + 1) * 20];
            assert!(row.iter().all(|&v| v == row[0]));
            assert!(row[0] <= e.at(&[4, 0]));
        }
        assert_eq!(e.at(&[4, 7]), 1.0);
    }

    #[test]
    fn expand_kernel_wide_sigma_limit() {
        let k = 5;
        let s = spec(k, 10.0 * k as f64);
        let e = expand_kernel(&s, 2, 2);
        let col: f64 = (0..k * k).map(|l| e.at(&[l, 0])).sum();
        let target = (k * k) as f64 * s.amplitude;
        assert!((col - target).abs() / target < 0.01, "{col} vs {target}");
    }

    #[test]
    fn deform_identity_and_collapse() {
        let s = spec(3, 1.1).with_amplitude(0.7);
        let (h, w) = (3, 4);
        let n = h * w;
        let g = Graph::new();
        let zero = g.constant(Tensor::zeros(&[2, 9, n]));
        let d = deform(&s, zero).unwrap().value();
        assert_eq!(*d, expand_kernel(&s, h, w));

        let mut to_center = Tensor::zeros(&[2, 9, n]);
        for (l, (dy, dx)) in window_offsets(3).into_iter().enumerate() {
            for j in 0..n {
                to_center.set(&[0, l, j], -dy as f64);
                to_center.set(&[1, l, j], -dx as f64);
            }
        }
        let d = deform(&s, g.constant(to_center)).unwrap().value();
        assert!(d.data().iter().all(|&v| v == 0.7));
    }

    #[test]
    fn deform_gradient() {
        let s = spec(3, 0.9);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let off = Tensor::randn(&[2, 9, 6], 0.7, &mut rng);
        let r = check(
            "deform",
            &mut ParamStore::new(),
            &[off],
            |_, _, x| deform(&s, x[0]),
            &GradCheckConfig::default(),
            1,
        )
        .unwrap();
        assert!(r.passed(), "{r:?}");
    }

    #[test]
    fn amplitude_cases() {
        let mut store = ParamStore::new();
        let theta = Linear::new(&mut store, "theta", 3, 9, Init::FanIn(1.0), 5);
        let lam = store.add("lambda", Tensor::scalar(0.0));
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let fm = Tensor::randn(&[3, 2, 3], 1.0, &mut rng);

        let g = Graph::new();
        let a = amplitude(&g, &store, g.constant(fm.clone()), &theta, g.param(&store, lam)).unwrap();
        assert_eq!(a.shape(), vec![9, 6]);
        assert!(a.value().data().iter().all(|&v| v == 1.0));

        // ϑ ≡ 1 via zero weights and unit bias
        let mut s2 = store.clone();
        s2.value_mut(theta.weight).data_mut().fill(0.0);
        s2.value_mut(theta.bias).data_mut().fill(1.0);
        *s2.value_mut(lam) = Tensor::scalar(0.5);
        let g = Graph::new();
        let a = amplitude(&g, &s2, g.constant(fm.clone()), &theta, g.param(&s2, lam)).unwrap();
        assert!(a.value().data().iter().all(|&v| v == 1.5));

        // lower bound 1 − |λ|·max|ϑ|
        *store.value_mut(lam) = Tensor::scalar(-0.3);
        let g = Graph::new();
        let t = theta.pointwise(&g, &store, g.constant(fm.clone())).unwrap().value();
        let bound = 1.0 - 0.3 * t.data().iter().fold(0.0f64, |m, v| m.max(v.abs()));
        let a = amplitude(&g, &store, g.constant(fm.clone()), &theta, g.param(&store, lam)).unwrap();
        assert!(a.value().data().iter().all(|&v| v >= bound - 1e-15));

        *store.value_mut(lam) = Tensor::scalar(0.37);
        let cfg = GradCheckConfig::default().with_tolerance(1e-5);
        let r = check(
            "amplitude",
            &mut store,
            &[fm],
            |g, st, x| amplitude(g, st, x[0], &theta, g.param(st, lam)),
            &cfg,
            2,
        )
        .unwrap();
        assert!(r.passed(), "{r:?}");
    }
}
