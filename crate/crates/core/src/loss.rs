//! Training objectives.
//!
//! * Background regression: `½ Σ_i ‖b_i − s_i‖²_F`, summed (not averaged)
//!   over the batch.
//! * Segmentation: binary cross-entropy summed over included pixels, with
//!   the prediction clamped to `[1e-7, 1 − 1e-7]` before the logs.

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

pub const PROB_CLAMP: f64 = 1e-7;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum Reduction {
    /// The objective as trained.
    #[default]
    Sum,
    /// Sum divided by the number of included pixels; for scale-free logging.
    Mean,
}

pub fn background_loss<T: Scalar>(b: &Tensor<T>, s: &Tensor<T>) -> Result<f64> {
    b.expect_shape(s.shape(), "background_loss")?;
    Ok(0.5
        * b.data()
            .iter()
            .zip(s.data())
            .map(|(&x, &y)| {
                let d = x.as_f64() - y.as_f64();
                d * d
            })
            .sum::<f64>())
}

/// Gradient of [`background_loss`] with respect to `b`, times `upstream`.
pub fn background_loss_grad<T: Scalar>(b: &Tensor<T>, s: &Tensor<T>, upstream: f64) -> Tensor<T> {
    let mut g = b.clone();
    for (v, &t) in g.data_mut().iter_mut().zip(s.data()) {
        *v = T::from_f64_lossy((v.as_f64() - t.as_f64()) * upstream);
    }
    g
}

fn check_seg<T: Scalar>(pred: &Tensor<T>, target: &Tensor<T>, include: Option<&Tensor<T>>) -> Result<()> {
    pred.expect_shape(target.shape(), "segmentation_loss")?;
    if let Some(m) = include {
        pred.expect_shape(m.shape(), "segmentation_loss (include mask)")?;
    }
    Ok(())
}

fn included_count<T: Scalar>(pred: &Tensor<T>, include: Option<&Tensor<T>>) -> f64 {
    match include {
        Some(m) => m.data().iter().filter(|v| v.as_f64() != 0.0).count() as f64,
        None => pred.len() as f64,
    }
}

#[inline]
fn clamp_prob(p: f64) -> f64 {
    p.clamp(PROB_CLAMP, 1.0 - PROB_CLAMP)
}

/// Binary cross-entropy between `pred` (probabilities) and `target`
/// (0/1 labels). Pixels where `include` is zero contribute nothing.
pub fn segmentation_loss<T: Scalar>(
    pred: &Tensor<T>,
    target: &Tensor<T>,
    include: Option<&Tensor<T>>,
    reduction: Reduction,
) -> Result<f64> {
    check_seg(pred, target, include)?;
    let mut total = 0.0f64;
    for (i, (&p, &t)) in pred.data().iter().zip(target.data()).enumerate() {
        if include.is_some_and(|m| m.data()[i].as_f64() == 0.0) {
            continue;
        }
        let (p, t) = (clamp_prob(p.as_f64()), t.as_f64());
        total -= t * p.ln() + (1.0 - t) * (1.0 - p).ln();
    }
    Ok(match reduction {
        Reduction::Sum => total,
        Reduction::Mean => total / included_count(pred, include).max(1.0),
    })
}

pub fn segmentation_loss_grad<T: Scalar>(
    pred: &Tensor<T>,
    target: &Tensor<T>,
    include: Option<&Tensor<T>>,
    reduction: Reduction,
    upstream: f64,
) -> Tensor<T> {
    let scale = match reduction {
        Reduction::Sum => upstream,
        Reduction::Mean => upstream / included_count(pred, include).max(1.0),
    };
    let mut g = pred.clone();
    for (i, (v, &t)) in g.data_mut().iter_mut().zip(target.data()).enumerate() {
        let p = v.as_f64();
        let excluded = include.is_some_and(|m| m.data()[i].as_f64() == 0.0);
        // Clamping zeroes the derivative outside the open interval.
        *v = if excluded || !(PROB_CLAMP..=1.0 - PROB_CLAMP).contains(&p) {
            T::zero()
        } else {
            let t = t.as_f64();
            T::from_f64_lossy(scale * (-t / p + (1.0 - t) / (1.0 - p)))
        };
    }
    g
}

/// Rejects a loss value that is not finite.
pub fn ensure_finite(value: f64, context: &str) -> Result<f64> {
    if value.is_finite() {
        Ok(value)
    } else {
        Err(Error::NonFinite {
            context: context.to_string(),
            index: 0,
        })
    }
}
