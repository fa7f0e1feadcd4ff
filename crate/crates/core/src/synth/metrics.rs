//! Endpoint-error metrics over `2×h×w` flow fields and `h×w` masks.

use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};
use crate::tensor::Tensor;

fn check(op: &'static str, pred: &Tensor, gt: &Tensor, valid: &Tensor) -> Result<usize> {
    let s = gt.shape();
    if s.len() != 3 || s[0] != 2 || pred.shape() != s {
        return Err(shape_err(op, pred.shape(), s));
    }
    if valid.shape() != &s[1..] {
        return Err(shape_err(op, valid.shape(), &s[1..]));
    }
    Ok(s[1] * s[2])
}

/// `(endpoint error, gt magnitude)` for every valid pixel.
fn errors<'a>(pred: &'a Tensor, gt: &'a Tensor, valid: &'a Tensor, n: usize) -> impl Iterator<Item = (f64, f64)> + 'a {
    (0..n).filter(move |&i| valid.data()[i] != 0.0).map(move |i| {
        let (p, g) = (pred.data(), gt.data());
        let e = (p[i] - g[i]).hypot(p[n + i] - g[n + i]);
        (e, g[i].hypot(g[n + i]))
    })
}

/// Mean endpoint error over valid pixels.
pub fn epe(pred: &Tensor, gt: &Tensor, valid: &Tensor) -> Result<f64> {
    let mut acc = MetricsAccumulator::default();
    acc.add(pred, gt, valid)?;
    Ok(acc.finish("epe")?.epe)
}

/// Percentage of valid pixels whose error exceeds both 3 px and 5% of the
/// ground-truth magnitude.
pub fn f1_all(pred: &Tensor, gt: &Tensor, valid: &Tensor) -> Result<f64> {
    let mut acc = MetricsAccumulator::default();
    acc.add(pred, gt, valid)?;
    Ok(acc.finish("f1_all")?.f1_all)
}

/// EPE split by ground-truth magnitude. Empty bins are `None`.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct BinnedEpe {
    pub s0_10: Option<f64>,
    pub s10_40: Option<f64>,
    pub s40_plus: Option<f64>,
}

pub fn epe_binned(pred: &Tensor, gt: &Tensor, valid: &Tensor) -> Result<BinnedEpe> {
    let mut acc = MetricsAccumulator::default();
    acc.add(pred, gt, valid)?;
    Ok(acc.binned())
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub epe: f64,
    pub f1_all: f64,
    pub bins: BinnedEpe,
    pub pixels: usize,
}

/// Pools pixels across any number of samples, so corpus metrics weight
/// every valid pixel equally.
#[derive(Clone, Debug, Default)]
pub struct MetricsAccumulator {
    sum: f64,
    outliers: usize,
    count: usize,
    bins: [(f64, usize); 3],
}

impl MetricsAccumulator {
    pub fn add(&mut self, pred: &Tensor, gt: &Tensor, valid: &Tensor) -> Result<()> {
        let n = check("metrics", pred, gt, valid)?;
        for (e, mag) in errors(pred, gt, valid, n) {
            self.sum += e;
            self.count += 1;
            if e > 3.0 && e > 0.05 * mag {
                self.outliers += 1;
            }
            let bin = match mag {
                m if m < 10.0 => 0,
                m if m < 40.0 => 1,
                _ => 2,
            };
            self.bins[bin].0 += e;
            self.bins[bin].1 += 1;
        }
        Ok(())
    }

    fn binned(&self) -> BinnedEpe {
        let mean = |(s, c): (f64, usize)| (c > 0).then(|| s / c as f64);
        BinnedEpe {
            s0_10: mean(self.bins[0]),
            s10_40: mean(self.bins[1]),
            s40_plus: mean(self.bins[2]),
        }
    }

    pub fn finish(&self, context: &'static str) -> Result<Metrics> {
        if self.count == 0 {
            return Err(Error::EmptyMask { context });
        }
        Ok(Metrics {
            epe: self.sum / self.count as f64,
            f1_all: 100.0 * self.outliers as f64 / self.count as f64,
            bins: self.binned(),
            pixels: self.count,
        })
    }
}
