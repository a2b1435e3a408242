use crate::autograd::Grads;
use crate::error::{Error, Result};
use crate::tensor::Scalar;

/// Rescale `grads` in place so their global L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_gradients<T: Scalar>(grads: &mut Grads<T>, max_norm: f64) -> Result<f64> {
    let norm = grads.global_norm();
    if !norm.is_finite() {
        return Err(Error::NonFinite(format!("gradient norm {norm}")));
    }
    if norm > max_norm {
        grads.scale(T::from_f64(max_norm / norm));
    }
    Ok(norm)
}
