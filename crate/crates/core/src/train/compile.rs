use std::sync::Arc;

use crate::model::{EncoderPlan, Model};
use crate::tensor::Scalar;

/// Precompute the encoder's window permutations, masks and relative-position
/// tables, and run q/k/v as one fused projection. Parameters are untouched,
/// so checkpoints and optimizer state are shared with the uncompiled model.
pub fn compile_hook<T: Scalar>(mut model: Model<T>) -> Model<T> {
    let plan = EncoderPlan::new(&model.config.encoder, true);
    model.set_plan(Some(Arc::new(plan)));
    model
}
