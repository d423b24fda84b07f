//! Per-coordinate optimizers.

use super::schema::{HyperParams, MATRIX_N, MATRIX_W, MATRIX_Z};
use super::slot::ParameterSlot;
use crate::error::{Error, Result};

/// FTRL-Proximal state of one coordinate.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct FtrlCoordinate {
    pub z: f64,
    pub n: f64,
    pub w: f64,
}

impl FtrlCoordinate {
    pub fn from_slot(slot: &ParameterSlot) -> Result<Self> {
        let get = |name: &str| {
            slot.scalar(name)
                .ok_or_else(|| Error::InvalidSlot(format!("FTRL slot needs width-1 {name:?}")))
        };
        Ok(FtrlCoordinate {
            z: get(MATRIX_Z)?,
            n: get(MATRIX_N)?,
            w: get(MATRIX_W)?,
        })
    }

    pub fn write_to(&self, slot: &mut ParameterSlot) {
        slot.insert(MATRIX_Z, vec![self.z]);
        slot.insert(MATRIX_N, vec![self.n]);
        slot.insert(MATRIX_W, vec![self.w]);
    }

    /// One update with gradient `g`. `w` is re-derived from the new `z`, `n`.
    pub fn step(&self, hp: &HyperParams, g: f64) -> Option<FtrlCoordinate> {
        let n_new = self.n + g * g;
        let sigma = (n_new.sqrt() - self.n.sqrt()) / hp.alpha;
        let z_new = self.z + g - sigma * self.w;
        let w_new = ftrl_weight(hp, z_new, n_new);
        let next = FtrlCoordinate {
            z: z_new,
            n: n_new,
            w: w_new,
        };
        (next.z.is_finite() && next.n.is_finite() && next.w.is_finite()).then_some(next)
    }
}

/// Closed-form weight from the accumulators; exactly zero inside the L1 ball.
pub fn ftrl_weight(hp: &HyperParams, z: f64, n: f64) -> f64 {
    if z.abs() <= hp.lambda1 {
        0.0
    } else {
        -(z - z.signum() * hp.lambda1) / ((hp.beta + n.sqrt()) / hp.alpha + hp.lambda2)
    }
}

/// FTRL-Proximal update of an LR slot; the slot is left untouched on overflow.
pub fn ftrl_update(hp: &HyperParams, slot: &ParameterSlot, gradient: f64) -> Result<ParameterSlot> {
    let mut out = slot.clone();
    ftrl_apply(hp, &mut out, gradient, 0)?;
    Ok(out)
}

/// In-place variant used on the master's hot path.
pub fn ftrl_apply(hp: &HyperParams, slot: &mut ParameterSlot, gradient: f64, feature_id: u64) -> Result<()> {
    if !gradient.is_finite() {
        return Err(Error::NumericOverflow { feature_id });
    }
    let cur = FtrlCoordinate::from_slot(slot)?;
    let next = cur
        .step(hp, gradient)
        .ok_or(Error::NumericOverflow { feature_id })?;
    next.write_to(slot);
    Ok(())
}

/// Plain SGD on every matrix: `value -= eta * gradient`.
pub fn sgd_update(
    hp: &HyperParams,
    slot: &ParameterSlot,
    gradients: &ParameterSlot,
) -> Result<ParameterSlot> {
    let mut out = slot.clone();
    sgd_apply(hp, &mut out, gradients, 0)?;
    Ok(out)
}

pub fn sgd_apply(
    hp: &HyperParams,
    slot: &mut ParameterSlot,
    gradients: &ParameterSlot,
    feature_id: u64,
) -> Result<()> {
    // Validate everything before touching the slot.
    let mut updated = Vec::with_capacity(gradients.matrix_count());
    for (name, grad) in gradients.iter() {
        let cur = slot
            .get(name)
            .ok_or_else(|| Error::InvalidSlot(format!("gradient for unknown matrix {name:?}")))?;
        if cur.len() != grad.len() {
            return Err(Error::InvalidSlot(format!(
                "gradient width {} != slot width {} for {name:?}",
                grad.len(),
                cur.len()
            )));
        }
        let next: Vec<f64> = cur
            .iter()
            .zip(grad)
            .map(|(v, g)| v - hp.sgd_eta * g)
            .collect();
        if next.iter().any(|v| !v.is_finite()) {
            return Err(Error::NumericOverflow { feature_id });
        }
        updated.push((name.to_string(), next));
    }
    for (name, next) in updated {
        slot.insert(name, next);
    }
    Ok(())
}
