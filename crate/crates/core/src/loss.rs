//! Soft-Dice training loss. Per image the smoothed Dice coefficient is
//!
//! ```text
//! sDSC = (2 * sum(p * g) + sigma) / (sum(p) + sum(g) + sigma)
//! ```
//!
//! over the foreground-probability plane `p` and the 0/1 reference `g`;
//! the batch loss is `1 - mean(sDSC)`. The smoothing term keeps empty
//! masks well-defined and the gradient finite everywhere.

use crate::error::{Error, Result};
use crate::tape::{Tape, Var};
use crate::tensor::{Scalar, Tensor};

/// Smoothing constant used across the lab unless a config overrides it.
pub const DEFAULT_SIGMA: f64 = 1.0;

/// Scalar loss plus the per-image coefficients it was averaged from.
#[derive(Clone, Debug)]
pub struct LossValue<T> {
    pub loss: T,
    pub per_image_sdsc: Vec<T>,
}

/// Attach the soft-Dice loss to `probs` (`[N, 2, H, W]`, channel 1 =
/// foreground) against constant `labels` (`[N, 1, H, W]`, strictly 0/1).
pub fn soft_dice_loss<T: Scalar>(
    tape: &mut Tape<T>,
    probs: Var,
    labels: &Tensor<T>,
    sigma: T,
) -> Result<(Var, LossValue<T>)> {
    if let Some(bad) = labels
        .data()
        .iter()
        .find(|&&v| v != T::zero() && v != T::one())
    {
        return Err(Error::Validation(format!(
            "labels must be exactly 0 or 1, found {bad}"
        )));
    }
    {
        let p = tape.value(probs)?;
        if let Some(bad) = p
            .data()
            .iter()
            .find(|&&v| !(v >= T::zero() && v <= T::one()))
        {
            return Err(Error::Validation(format!(
                "probabilities must lie in [0, 1], found {bad}"
            )));
        }
    }
    let (var, sdsc) = tape.soft_dice(probs, labels, sigma)?;
    let loss = tape.value(var)?.item()?;
    Ok((
        var,
        LossValue {
            loss,
            per_image_sdsc: sdsc,
        },
    ))
}

/// Soft-Dice coefficient of one image given its foreground-probability
/// plane and 0/1 mask, outside any tape. Used for validation scoring.
pub fn soft_dice_coefficient<T: Scalar>(fg: &[T], mask: &[T], sigma: T) -> Result<T> {
    if fg.len() != mask.len() {
        return Err(Error::Shape(format!(
            "probability plane has {} elements, mask has {}",
            fg.len(),
            mask.len()
        )));
    }
    if !(sigma > T::zero()) {
        return Err(Error::Validation(format!(
            "smoothing must be positive, got {sigma}"
        )));
    }
    if let Some(bad) = mask.iter().find(|&&v| v != T::zero() && v != T::one()) {
        return Err(Error::Validation(format!(
            "mask must be exactly 0 or 1, found {bad}"
        )));
    }
    let mut inter = T::zero();
    let mut psum = T::zero();
    let mut gsum = T::zero();
    for (&p, &g) in fg.iter().zip(mask) {
        inter = inter + p * g;
        psum = psum + p;
        gsum = gsum + g;
    }
    let two = T::from_f64(2.0);
    Ok((two * inter + sigma) / (psum + gsum + sigma))
}
