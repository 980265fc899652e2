//! The three training losses. Tensor versions stay on the autodiff graph; the
//! `*_value` helpers evaluate them for typed inputs.

use candle_core::Tensor;

use crate::critics::Critics;
use crate::error::{Error, Result};
use crate::generator::FaceImage;
use crate::nn;

/// Total (summed, not averaged) absolute difference.
pub fn l1_loss(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    if a.dims() != b.dims() {
        return Err(Error::Shape(format!(
            "L1 operands differ: {:?} vs {:?}",
            a.dims(),
            b.dims()
        )));
    }
    Ok((a - b)?.abs()?.sum_all()?)
}

/// `-log p(identity)` from `(1, k)` classifier logits.
pub fn classifier_loss(logits: &Tensor, identity: usize) -> Result<Tensor> {
    let k = logits.dims().last().copied().unwrap_or(0);
    if identity >= k {
        return Err(Error::InvalidInput(format!(
            "identity {identity} out of range for {k} classes"
        )));
    }
    Ok(nn::log_softmax(logits)?.flatten_all()?.get(identity)?.neg()?)
}

/// Binary cross-entropy of `sigmoid(logit)` against `label`, evaluated through
/// softplus so it stays finite however saturated the head is.
pub fn discriminator_loss(logit: &Tensor, real: bool) -> Result<Tensor> {
    let z = logit.flatten_all()?;
    let z = if real { z.neg()? } else { z };
    Ok(nn::softplus(&z)?.sum_all()?)
}

pub fn l1_value(a: &FaceImage, b: &FaceImage) -> Result<f64> {
    nn::scalar(&l1_loss(a.tensor(), &b.tensor().to_dtype(a.tensor().dtype())?)?)
}

pub fn classifier_loss_value(f: &FaceImage, identity: usize, critics: &Critics) -> Result<f64> {
    let x = f.batch(critics.trunk_params().dtype())?;
    nn::scalar(&classifier_loss(&critics.cls_logits(&x)?, identity)?)
}

pub fn discriminator_loss_value(f: &FaceImage, real: bool, critics: &Critics) -> Result<f64> {
    let x = f.batch(critics.trunk_params().dtype())?;
    nn::scalar(&discriminator_loss(&critics.disc_logits(&x)?, real)?)
}
