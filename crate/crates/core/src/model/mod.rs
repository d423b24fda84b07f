//! Model schemas, optimizers and the training/serving split.
//!
//! Everything here is a pure function of its inputs. Master and slave
//! shards own the mutable tables and call into this module per feature.

mod optim;
mod predict;
mod schema;
mod slot;

pub use optim::{ftrl_apply, ftrl_update, ftrl_weight, sgd_apply, sgd_update, FtrlCoordinate};
pub use predict::{
    gradient_of_sample, logloss, predict, score, sigmoid, transform_for_serving, SlotMap,
};
pub use schema::{
    HyperParams, MatrixRole, MatrixSpec, ModelSchema, SchemaKind, View, FM_INIT_STD, MATRIX_N,
    MATRIX_V, MATRIX_W, MATRIX_Z,
};
pub use slot::{ParameterSlot, Sample};

use crate::error::Result;

/// Applies one feature's gradients with the schema's optimizer.
pub fn apply_gradients(
    schema: &ModelSchema,
    slot: &mut ParameterSlot,
    gradients: &ParameterSlot,
    feature_id: u64,
) -> Result<()> {
    match schema.kind() {
        SchemaKind::LrFtrl => {
            let g = gradients.scalar(MATRIX_W).ok_or_else(|| {
                crate::Error::InvalidSlot("LR gradient needs a width-1 \"w\" entry".into())
            })?;
            ftrl_apply(schema.hyper(), slot, g, feature_id)
        }
        SchemaKind::FmSgd => sgd_apply(schema.hyper(), slot, gradients, feature_id),
    }
}

/// True when an FTRL slot's `w` is exactly what `z` and `n` imply.
pub fn ftrl_slot_consistent(hp: &HyperParams, slot: &ParameterSlot) -> bool {
    match FtrlCoordinate::from_slot(slot) {
        Ok(c) => ftrl_weight(hp, c.z, c.n).to_bits() == c.w.to_bits(),
        Err(_) => false,
    }
}
