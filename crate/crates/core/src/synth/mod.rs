//! Layered synthetic scenes with analytic ground-truth flow.
//!
//! A scene is a stack of textured layers, back to front. Layer 0 covers the
//! whole canvas; the others are polygons. Each layer moves by its own
//! similarity transform between the two frames, so the flow at a pixel is
//! `A(p) − p` for the topmost layer covering `p` in the first frame.

mod flo;
mod image;
mod metrics;

pub use flo::{decode_flo, encode_flo, read_flo, write_flo};
pub use image::{flow_to_color, read_ppm, write_pgm, write_ppm};
pub use metrics::{epe, epe_binned, f1_all, BinnedEpe, Metrics, MetricsAccumulator};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Similarity transform `p ↦ anchor + scale·R(rotation)·(p − anchor) + translation`,
/// in `(x, y)` pixel coordinates.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Motion {
    pub translation: (f64, f64),
    pub rotation: f64,
    pub scale: f64,
    pub anchor: (f64, f64),
}

impl Motion {
    pub fn translation(dx: f64, dy: f64) -> Self {
        Self {
            translation: (dx, dy),
            rotation: 0.0,
            scale: 1.0,
            anchor: (0.0, 0.0),
        }
    }

    pub fn identity() -> Self {
        Self::translation(0.0, 0.0)
    }

    pub fn apply(&self, (x, y): (f64, f64)) -> (f64, f64) {
        let (s, c) = self.rotation.sin_cos();
        let (px, py) = (x - self.anchor.0, y - self.anchor.1);
        (
            self.anchor.0 + self.scale * (c * px - s * py) + self.translation.0,
            self.anchor.1 + self.scale * (s * px + c * py) + self.translation.1,
        )
    }

    pub fn invert(&self, (x, y): (f64, f64)) -> (f64, f64) {
        let (s, c) = self.rotation.sin_cos();
        let qx = (x - self.translation.0 - self.anchor.0) / self.scale;
        let qy = (y - self.translation.1 - self.anchor.1) / self.scale;
        (self.anchor.0 + c * qx + s * qy, self.anchor.1 - s * qx + c * qy)
    }
}

/// Smooth colour field: a base colour plus sinusoidal gratings and
/// Gaussian blobs, clamped to `[0, 1]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Texture {
    pub base: [f64; 3],
    /// `(kx, ky, phase, amplitude per channel)`
    pub gratings: Vec<(f64, f64, f64, [f64; 3])>,
    /// `(cx, cy, radius, amplitude per channel)`
    pub blobs: Vec<(f64, f64, f64, [f64; 3])>,
}

impl Texture {
    pub fn random(rng: &mut impl Rng, width: f64, height: f64) -> Self {
        let base = [0; 3].map(|_| rng.random_range(0.35..0.65));
        let gratings = (0..3)
            .map(|_| {
                let period = rng.random_range(10.0..28.0);
                let angle = rng.random_range(0.0..std::f64::consts::PI);
                let k = std::f64::consts::TAU / period;
                let amp = [0; 3].map(|_| rng.random_range(-0.06..0.06));
                (k * angle.cos(), k * angle.sin(), rng.random_range(0.0..std::f64::consts::TAU), amp)
            })
            .collect();
        let blobs = (0..8)
            .map(|_| {
                let amp = [0; 3].map(|_| rng.random_range(-0.1..0.1));
                (
                    rng.random_range(-8.0..width + 8.0),
                    rng.random_range(-8.0..height + 8.0),
                    rng.random_range(3.0..8.0),
                    amp,
                )
            })
            .collect();
        Self { base, gratings, blobs }
    }

    pub fn flat(color: [f64; 3]) -> Self {
        Self {
            base: color,
            gratings: Vec::new(),
            blobs: Vec::new(),
        }
    }

    pub fn sample(&self, x: f64, y: f64) -> [f64; 3] {
        let mut c = self.base;
        for &(kx, ky, phase, amp) in &self.gratings {
            let s = (kx * x + ky * y + phase).sin();
            for i in 0..3 {
                c[i] += amp[i] * s;
            }
        }
        for &(cx, cy, r, amp) in &self.blobs {
            let d2 = (x - cx).powi(2) + (y - cy).powi(2);
            let e = (-d2 / (2.0 * r * r)).exp();
            for i in 0..3 {
                c[i] += amp[i] * e;
            }
        }
        c.map(|v| v.clamp(0.0, 1.0))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum Shape {
    Full,
    /// Vertices in `(x, y)`; filled with the even-odd rule.
    Polygon(Vec<(f64, f64)>),
}

impl Shape {
    pub fn contains(&self, (x, y): (f64, f64)) -> bool {
        let Shape::Polygon(v) = self else {
            return true;
        };
        let mut inside = false;
        let mut j = v.len() - 1;
        for i in 0..v.len() {
            let ((xi, yi), (xj, yj)) = (v[i], v[j]);
            if (yi > y) != (yj > y) && x < (xj - xi) * (y - yi) / (yj - yi) + xi {
                inside = !inside;
            }
            j = i;
        }
        inside
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Layer {
    pub texture: Texture,
    pub shape: Shape,
    pub motion: Motion,
}

/// Ranges for random scenes.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneParams {
    pub height: usize,
    pub width: usize,
    /// Polygon layers on top of the background.
    pub layers: usize,
    /// Largest translation magnitude of the background, in pixels.
    pub max_motion: f64,
    /// Largest extra translation of a polygon relative to the background.
    pub max_relative_motion: f64,
    pub max_rotation: f64,
    pub max_scale: f64,
}

impl SceneParams {
    /// Motions up to 48 px on a 96×128 canvas.
    pub fn large(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            layers: 2,
            max_motion: 44.0,
            max_relative_motion: 8.0,
            max_rotation: 0.05,
            max_scale: 0.05,
        }
    }

    /// Background-only scenes with small smooth motion.
    pub fn gentle(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            layers: 0,
            max_motion: 6.0,
            max_relative_motion: 0.0,
            max_rotation: 0.03,
            max_scale: 0.03,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneSpec {
    pub height: usize,
    pub width: usize,
    /// Back to front; the first layer is the background.
    pub layers: Vec<Layer>,
    pub seed: u64,
}

impl SceneSpec {
    /// A background plus `params.layers` polygons, all drawn from `seed`.
    pub fn random(params: &SceneParams, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (w, h) = (params.width as f64, params.height as f64);
        let motion = |rng: &mut ChaCha8Rng, max_t: f64, base: (f64, f64)| {
            let mag = max_t * rng.random::<f64>();
            let dir = rng.random_range(0.0..std::f64::consts::TAU);
            Motion {
                translation: (base.0 + mag * dir.cos(), base.1 + mag * dir.sin()),
                rotation: rng.random_range(-1.0..=1.0) * params.max_rotation,
                scale: 1.0 + rng.random_range(-1.0..=1.0) * params.max_scale,
                anchor: (rng.random_range(0.0..w), rng.random_range(0.0..h)),
            }
        };
        let background = motion(&mut rng, params.max_motion, (0.0, 0.0));
        let mut layers = vec![Layer {
            texture: Texture::random(&mut rng, w, h),
            shape: Shape::Full,
            motion: background,
        }];
        for _ in 0..params.layers {
            let (cx, cy) = (rng.random_range(0.15 * w..0.85 * w), rng.random_range(0.15 * h..0.85 * h));
            let radius = rng.random_range(0.12..0.3) * w.min(h);
            let n = rng.random_range(3..8);
            let start = rng.random_range(0.0..std::f64::consts::TAU);
            let vertices = (0..n)
                .map(|i| {
                    let a = start + std::f64::consts::TAU * i as f64 / n as f64;
                    let r = radius * rng.random_range(0.6..1.0);
                    (cx + r * a.cos(), cy + r * a.sin())
                })
                .collect();
            let mut m = motion(&mut rng, params.max_relative_motion, background.translation);
            m.anchor = (cx, cy);
            layers.push(Layer {
                texture: Texture::random(&mut rng, w, h),
                shape: Shape::Polygon(vertices),
                motion: m,
            });
        }
        Self {
            height: params.height,
            width: params.width,
            layers,
            seed,
        }
    }

    /// One full-canvas textured layer moving by `motion`.
    pub fn single(height: usize, width: usize, motion: Motion, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Self {
            height,
            width,
            layers: vec![Layer {
                texture: Texture::random(&mut rng, width as f64, height as f64),
                shape: Shape::Full,
                motion,
            }],
            seed,
        }
    }

    fn in_canvas(&self, (x, y): (f64, f64)) -> bool {
        x >= 0.0 && y >= 0.0 && x <= (self.width - 1) as f64 && y <= (self.height - 1) as f64
    }

    /// Topmost layer covering `p` in the first frame.
    fn top_first(&self, p: (f64, f64)) -> usize {
        (0..self.layers.len())
            .rev()
            .find(|&i| self.layers[i].shape.contains(p))
            .unwrap_or(0)
    }

    /// Topmost layer covering `q` in the second frame.
    fn top_second(&self, q: (f64, f64)) -> usize {
        (0..self.layers.len())
            .rev()
            .find(|&i| {
                let l = &self.layers[i];
                l.shape.contains(l.motion.invert(q))
            })
            .unwrap_or(0)
    }
}

/// A rendered frame pair. Flows are `2×h×w` (`u` then `v`), masks `h×w`
/// with entries 0 or 1.
#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticSample {
    pub img1: Tensor,
    pub img2: Tensor,
    pub flow: Tensor,
    /// 0 where a polygon layer carries the pixel off the canvas. The
    /// background extends past the canvas, so its pixels stay valid.
    pub valid: Tensor,
    /// 1 where a different layer covers the flow target in the second frame.
    pub occluded: Tensor,
    /// Topmost layer index per pixel of the second frame.
    pub labels2: Vec<usize>,
    /// Topmost layer index per pixel of the first frame.
    pub labels1: Vec<usize>,
}

pub fn generate(spec: &SceneSpec) -> Result<SyntheticSample> {
    if spec.layers.is_empty() {
        return Err(Error::Config("scene needs at least one layer".into()));
    }
    if spec.height == 0 || spec.width == 0 {
        return Err(Error::Config("scene canvas is empty".into()));
    }
    let (h, w) = (spec.height, spec.width);
    let n = h * w;
    let mut img1 = Tensor::zeros(&[3, h, w]);
    let mut img2 = Tensor::zeros(&[3, h, w]);
    let mut flow = Tensor::zeros(&[2, h, w]);
    let mut valid = Tensor::zeros(&[h, w]);
    let mut occluded = Tensor::zeros(&[h, w]);
    let mut labels1 = vec![0; n];
    let mut labels2 = vec![0; n];
    for y in 0..h {
        for x in 0..w {
            let p = (x as f64, y as f64);
            let i = y * w + x;

            let top = spec.top_first(p);
            labels1[i] = top;
            let layer = &spec.layers[top];
            let c = layer.texture.sample(p.0, p.1);
            let q = layer.motion.apply(p);
            let (u, v) = (q.0 - p.0, q.1 - p.1);
            flow.data_mut()[i] = u;
            flow.data_mut()[n + i] = v;
            let exited = layer.shape != Shape::Full && !spec.in_canvas(q);
            valid.data_mut()[i] = f64::from(u8::from(!exited));
            occluded.data_mut()[i] = f64::from(u8::from(spec.top_second(q) != top));

            let top2 = spec.top_second(p);
            labels2[i] = top2;
            let l2 = &spec.layers[top2];
            let src = l2.motion.invert(p);
            let c2 = l2.texture.sample(src.0, src.1);
            for ch in 0..3 {
                img1.data_mut()[ch * n + i] = c[ch];
                img2.data_mut()[ch * n + i] = c2[ch];
            }
        }
    }
    Ok(SyntheticSample {
        img1,
        img2,
        flow,
        valid,
        occluded,
        labels2,
        labels1,
    })
}

impl SyntheticSample {
    pub fn height(&self) -> usize {
        self.flow.shape()[1]
    }

    pub fn width(&self) -> usize {
        self.flow.shape()[2]
    }

    /// Mean per-channel `|img2(p + flow) − img1(p)|` over valid, unoccluded
    /// pixels whose target lies in the canvas and whose four bilinear taps in the second frame all show the
    /// same layer as `p`. Returns the residuals and the pixel count.
    pub fn brightness_residual(&self) -> ([f64; 3], usize) {
        let (h, w) = (self.height(), self.width());
        let n = h * w;
        let mut sum = [0.0; 3];
        let mut count = 0;
        for y in 0..h {
            for x in 0..w {
                let i = y * w + x;
                if self.valid.data()[i] == 0.0 || self.occluded.data()[i] != 0.0 {
                    continue;
                }
                let qx = x as f64 + self.flow.data()[i];
                let qy = y as f64 + self.flow.data()[n + i];
                if qx < 0.0 || qy < 0.0 || qx > (w - 1) as f64 || qy > (h - 1) as f64 {
                    continue;
                }
                let (x0, y0) = (qx.floor() as usize, qy.floor() as usize);
                let (x1, y1) = ((x0 + 1).min(w - 1), (y0 + 1).min(h - 1));
                let taps = [(y0, x0), (y0, x1), (y1, x0), (y1, x1)];
                if taps.iter().any(|&(ty, tx)| self.labels2[ty * w + tx] != self.labels1[i]) {
                    continue;
                }
                let (fx, fy) = (qx - x0 as f64, qy - y0 as f64);
                for (ch, s) in sum.iter_mut().enumerate() {
                    let at = |ty: usize, tx: usize| self.img2.data()[ch * n + ty * w + tx];
                    let warped = (1.0 - fy) * ((1.0 - fx) * at(y0, x0) + fx * at(y0, x1))
                        + fy * ((1.0 - fx) * at(y1, x0) + fx * at(y1, x1));
                    *s += (warped - self.img1.data()[ch * n + i]).abs();
                }
                count += 1;
            }
        }
        (sum.map(|s| s / count.max(1) as f64), count)
    }
}

/// Deterministic stream of random scenes: sample `i` uses seed `base + i`.
pub fn corpus(params: &SceneParams, base: u64, count: usize) -> Result<Vec<SyntheticSample>> {
    (0..count as u64)
        .map(|i| generate(&SceneSpec::random(params, base + i)))
        .collect()
}
