use crate::autograd::Var;
use crate::error::{shape_err, Error, Result};
use crate::tensor::Tensor;

/// `Σ_i γ^(T−i) · mean over valid pixels of (|Δu| + |Δv|)` for predictions
/// `i = 1..T`, so the last prediction has weight 1.
pub fn sequence_loss<'g>(predictions: &[Var<'g>], gt: &Tensor, valid: &Tensor, gamma: f64) -> Result<Var<'g>> {
    let first = predictions
        .first()
        .ok_or_else(|| Error::Config("sequence loss needs at least one prediction".into()))?;
    if !(gamma > 0.0 && gamma <= 1.0) {
        return Err(Error::Config(format!("loss decay {gamma} outside (0, 1]")));
    }
    let s = gt.shape();
    if s.len() != 3 || s[0] != 2 || valid.shape() != &s[1..] {
        return Err(shape_err("sequence_loss", s, valid.shape()));
    }
    let count = valid.data().iter().filter(|&&v| v != 0.0).count();
    if count == 0 {
        return Err(Error::EmptyMask {
            context: "sequence_loss",
        });
    }
    let g = first.graph();
    let mask = g.constant(Tensor::new(s, valid.data().repeat(2))?);
    let target = g.constant(gt.clone());
    let t = predictions.len();
    let mut total: Option<Var<'g>> = None;
    for (i, p) in predictions.iter().enumerate() {
        if p.shape() != s {
            return Err(shape_err("sequence_loss", &p.shape(), s));
        }
        let weight = gamma.powi((t - 1 - i) as i32) / count as f64;
        let term = p.sub(target).abs().mul(mask).sum().scale(weight);
        total = Some(match total {
            Some(acc) => acc.add(term),
            None => term,
        });
    }
    Ok(total.expect("non-empty predictions"))
}
