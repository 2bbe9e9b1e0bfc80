//! Reconstruction and adversarial losses with exact analytic gradients.
//!
//! The reconstruction loss is per-pixel, per-class binary cross-entropy
//! averaged over the pixel count. The discriminator's adversarial loss is
//!
//!   L_adv = -(1/N) sum[ log D(fake) + log(1 - D(real)) ]
//!
//! which the discriminator MAXIMIZES: at its optimum D(fake) -> 0 and
//! D(real) -> 1, so D estimates probability-of-real. This is the reverse
//! pairing of the usual GAN value function; the `standard_gan` convention
//! (D descends on BCE with real=1/fake=0 labels) is available as an
//! alternative and leads to the same fixed point. The generator always
//! descends on -(1/N) sum log D(fake).
//!
//! Probabilities are clamped to [1e-7, 1 - 1e-7] before any log, so no
//! loss or gradient can produce NaN/Inf for inputs in [0, 1]. N means the
//! total pixel count in L_rec and the batch size in L_adv.

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

pub const PROB_CLAMP: f64 = 1e-7;

/// How the discriminator objective is read; see module docs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum GanConvention {
    /// Ascent on L_adv as written: pairs log D(fake) with log(1 - D(real)).
    #[default]
    PaperMinimax,
    /// Descent on the usual BCE: pairs log D(real) with log(1 - D(fake)).
    StandardGan,
}

/// Scalar losses recorded at each training step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossBreakdown {
    pub rec: f64,
    pub adv_d: f64,
    pub adv_g: f64,
    pub total_g: f64,
}

impl LossBreakdown {
    pub fn all_finite(&self) -> bool {
        self.rec.is_finite()
            && self.adv_d.is_finite()
            && self.adv_g.is_finite()
            && self.total_g.is_finite()
    }
}

fn clamp<T: Scalar>(p: T) -> T {
    let lo = T::from_c(PROB_CLAMP);
    let hi = T::one() - lo;
    if p < lo {
        lo
    } else if p > hi {
        hi
    } else {
        p
    }
}

/// Per-pixel, per-class binary cross-entropy, averaged over pixels:
/// L_rec = -(1/N) sum_pixels sum_classes [y log p + (1-y) log(1-p)]
/// with N = total pixel count. Returns the loss and its gradient w.r.t.
/// the probability map.
pub fn reconstruction_loss<T: Scalar>(
    prob_map: &Tensor<T>,
    one_hot: &Tensor<T>,
) -> Result<(T, Tensor<T>)> {
    if prob_map.shape() != one_hot.shape() {
        return Err(Error::shape(format!(
            "prob map {:?} vs one-hot {:?}",
            prob_map.shape(),
            one_hot.shape()
        )));
    }
    let (n, _c, h, w) = prob_map.dims4()?;
    let pixels = T::from_c((n * h * w) as f64);
    let mut loss = T::zero();
    let mut grad = prob_map.zeros_like();
    for (i, (&p, &y)) in prob_map.data().iter().zip(one_hot.data()).enumerate() {
        let p = clamp(p);
        loss -= y * p.ln() + (T::one() - y) * (T::one() - p).ln();
        grad.data_mut()[i] = -(y / p - (T::one() - y) / (T::one() - p)) / pixels;
    }
    Ok((loss / pixels, grad))
}

/// Discriminator objective value and its gradients w.r.t. the fake and
/// real score tensors. The value is what D maximizes under the default
/// convention (the training loop negates for its descent step).
pub fn discriminator_loss<T: Scalar>(
    d_fake: &Tensor<T>,
    d_real: &Tensor<T>,
    convention: GanConvention,
) -> Result<(T, Tensor<T>, Tensor<T>)> {
    if d_fake.shape() != d_real.shape() {
        return Err(Error::shape(format!(
            "score batch mismatch: {:?} vs {:?}",
            d_fake.shape(),
            d_real.shape()
        )));
    }
    let n = T::from_c(d_fake.len() as f64);
    let mut loss = T::zero();
    let mut grad_fake = d_fake.zeros_like();
    let mut grad_real = d_real.zeros_like();
    for i in 0..d_fake.len() {
        let df = clamp(d_fake.data()[i]);
        let dr = clamp(d_real.data()[i]);
        match convention {
            GanConvention::PaperMinimax => {
                loss -= df.ln() + (T::one() - dr).ln();
                grad_fake.data_mut()[i] = -(T::one() / df) / n;
                grad_real.data_mut()[i] = (T::one() / (T::one() - dr)) / n;
            }
            GanConvention::StandardGan => {
                loss -= dr.ln() + (T::one() - df).ln();
                grad_fake.data_mut()[i] = (T::one() / (T::one() - df)) / n;
                grad_real.data_mut()[i] = -(T::one() / dr) / n;
            }
        }
    }
    Ok((loss / n, grad_fake, grad_real))
}

/// Generator adversarial term: -(1/N) sum log D(fake). The generator
/// descends on this, pushing D(fake) toward 1. The gradient per element
/// is -1/(N * d_fake).
pub fn generator_adversarial_loss<T: Scalar>(d_fake: &Tensor<T>) -> Result<(T, Tensor<T>)> {
    let n = T::from_c(d_fake.len() as f64);
    let mut loss = T::zero();
    let mut grad = d_fake.zeros_like();
    for i in 0..d_fake.len() {
        let df = clamp(d_fake.data()[i]);
        loss -= df.ln();
        grad.data_mut()[i] = -(T::one() / df) / n;
    }
    Ok((loss / n, grad))
}

/// adv_g + lambda * rec.
pub fn total_generator_objective(adv_g: f64, rec: f64, lambda: f64) -> Result<f64> {
    if lambda < 0.0 {
        return Err(Error::config(format!("lambda must be >= 0, got {lambda}")));
    }
    Ok(adv_g + lambda * rec)
}
