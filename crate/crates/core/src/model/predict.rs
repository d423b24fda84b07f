//! Scoring, loss gradients and the training→serving projection.

use std::collections::HashMap;

use super::schema::{ModelSchema, SchemaKind, View, MATRIX_V, MATRIX_W};
use super::slot::{ParameterSlot, Sample};
use crate::error::{Error, Result};

/// Feature id → parameter slot.
pub type SlotMap = HashMap<u64, ParameterSlot>;

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Raw model score (logit). Missing features score as zero-valued slots.
pub fn score(schema: &ModelSchema, slots: &SlotMap, sample: &Sample, view: View) -> Result<f64> {
    for (id, _) in &sample.features {
        if let Some(slot) = slots.get(id) {
            schema.validate_slot(slot, view)?;
        }
    }
    let w_of = |id: u64| {
        slots
            .get(&id)
            .and_then(|s| s.scalar(MATRIX_W))
            .unwrap_or(0.0)
    };
    let linear: f64 = sample.features.iter().map(|&(id, x)| w_of(id) * x).sum();
    match schema.kind() {
        SchemaKind::LrFtrl => Ok(linear),
        SchemaKind::FmSgd => {
            let k = schema.hyper().fm_k;
            let mut pair = 0.0;
            for f in 0..k {
                let mut sum = 0.0;
                let mut sum_sq = 0.0;
                for &(id, x) in &sample.features {
                    if let Some(v) = slots.get(&id).and_then(|s| s.get(MATRIX_V)) {
                        let t = v[f] * x;
                        sum += t;
                        sum_sq += t * t;
                    }
                }
                pair += sum * sum - sum_sq;
            }
            Ok(linear + 0.5 * pair)
        }
    }
}

/// Click probability in (0, 1).
pub fn predict(schema: &ModelSchema, slots: &SlotMap, sample: &Sample, view: View) -> Result<f64> {
    score(schema, slots, sample, view).map(sigmoid)
}

/// Drops training-only matrices; values are copied unchanged.
pub fn transform_for_serving(schema: &ModelSchema, slot: &ParameterSlot) -> Result<ParameterSlot> {
    let mut out = ParameterSlot::new();
    for (name, values) in slot.iter() {
        let spec = schema
            .matrix(name)
            .ok_or_else(|| Error::InvalidSlot(format!("unknown matrix {name:?}")))?;
        if spec.role.is_served() {
            out.insert(name, values.to_vec());
        }
    }
    Ok(out)
}

/// Logistic-loss gradients for every feature present in `sample`.
///
/// LR slots get `{"w": [(p - y) x]}`; FM slots additionally get the latent
/// gradient `(p - y) (x_i Σ_j v_jf x_j - v_if x_i²)`.
pub fn gradient_of_sample(
    schema: &ModelSchema,
    slots: &SlotMap,
    sample: &Sample,
    prediction: f64,
) -> HashMap<u64, ParameterSlot> {
    let residual = prediction - sample.label_f64();
    let mut out = HashMap::with_capacity(sample.features.len());
    match schema.kind() {
        SchemaKind::LrFtrl => {
            for &(id, x) in &sample.features {
                out.insert(id, ParameterSlot::new().with(MATRIX_W, vec![residual * x]));
            }
        }
        SchemaKind::FmSgd => {
            let k = schema.hyper().fm_k;
            let zeros = vec![0.0; k];
            let v_of = |id: u64| -> &[f64] {
                slots
                    .get(&id)
                    .and_then(|s| s.get(MATRIX_V))
                    .unwrap_or(&zeros)
            };
            let mut sums = vec![0.0; k];
            for &(id, x) in &sample.features {
                for (s, v) in sums.iter_mut().zip(v_of(id)) {
                    *s += v * x;
                }
            }
            for &(id, x) in &sample.features {
                let v = v_of(id);
                let gv: Vec<f64> = (0..k)
                    .map(|f| residual * (x * sums[f] - v[f] * x * x))
                    .collect();
                out.insert(
                    id,
                    ParameterSlot::new()
                        .with(MATRIX_W, vec![residual * x])
                        .with(MATRIX_V, gv),
                );
            }
        }
    }
    out
}

/// Negative log-likelihood with the probability clamped away from 0 and 1.
pub fn logloss(label: u8, p: f64) -> f64 {
    let p = p.clamp(1e-15, 1.0 - 1e-15);
    if label == 1 {
        -p.ln()
    } else {
        -(1.0 - p).ln()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::HyperParams;

    fn lr() -> ModelSchema {
        ModelSchema::lr_ftrl(HyperParams::default()).unwrap()
    }

    fn fm(k: usize) -> ModelSchema {
        ModelSchema::fm_sgd(HyperParams {
            fm_k: k,
            ..Default::default()
        })
        .unwrap()
    }

    #[test]
    fn empty_model_predicts_half() {
        let s = Sample::new(1, vec![(1, 1.0), (7, 3.0)]).unwrap();
        assert_eq!(predict(&lr(), &SlotMap::new(), &s, View::Serving).unwrap(), 0.5);
    }

    #[test]
    fn lr_single_weight() {
        let mut slots = SlotMap::new();
        slots.insert(3, ParameterSlot::new().with("w", vec![2.0]));
        let s = Sample::new(1, vec![(3, 1.0)]).unwrap();
        let p = predict(&lr(), &slots, &s, View::Serving).unwrap();
        assert!((p - 0.880_797_077_977_882_3).abs() < 1e-12);
    }

    #[test]
    fn fm_pairwise_term() {
        let mut slots = SlotMap::new();
        for id in [1, 2] {
            slots.insert(
                id,
                ParameterSlot::new().with("w", vec![0.0]).with("v", vec![1.0, 0.0]),
            );
        }
        let s = Sample::new(1, vec![(1, 1.0), (2, 1.0)]).unwrap();
        let p = predict(&fm(2), &slots, &s, View::Training).unwrap();
        assert!((p - 0.731_058_578_630_004_9).abs() < 1e-12);
    }

    #[test]
    fn mismatched_slot_is_an_error() {
        let mut slots = SlotMap::new();
        slots.insert(3, ParameterSlot::new().with("w", vec![2.0, 1.0]));
        let s = Sample::new(1, vec![(3, 1.0)]).unwrap();
        assert!(matches!(
            predict(&lr(), &slots, &s, View::Serving),
            Err(Error::InvalidSlot(_))
        ));
    }

    #[test]
    fn transform_examples() {
        let schema = lr();
        let slot = ParameterSlot::new()
            .with("z", vec![1.0])
            .with("n", vec![1.0])
            .with("w", vec![-0.05]);
        assert_eq!(
            transform_for_serving(&schema, &slot).unwrap(),
            ParameterSlot::new().with("w", vec![-0.05])
        );
        let zero = schema.zero_slot(View::Training);
        assert_eq!(
            transform_for_serving(&schema, &zero).unwrap(),
            ParameterSlot::new().with("w", vec![0.0])
        );
        let f = fm(2);
        let slot = ParameterSlot::new().with("w", vec![1.0]).with("v", vec![1.0, 2.0]);
        assert_eq!(transform_for_serving(&f, &slot).unwrap(), slot);
    }

    #[test]
    fn lr_gradient_sign() {
        let s1 = Sample::new(1, vec![(3, 2.0)]).unwrap();
        let g = gradient_of_sample(&lr(), &SlotMap::new(), &s1, 0.5);
        assert_eq!(g[&3].scalar("w"), Some(-1.0));
        let s0 = Sample::new(0, vec![(3, 2.0)]).unwrap();
        let g = gradient_of_sample(&lr(), &SlotMap::new(), &s0, 0.5);
        assert_eq!(g[&3].scalar("w"), Some(1.0));
    }

    #[test]
    fn gradient_vanishes_at_label() {
        let s = Sample::new(1, vec![(3, 2.0), (4, -1.0)]).unwrap();
        let g = gradient_of_sample(&lr(), &SlotMap::new(), &s, 1.0);
        assert!(g.values().all(|slot| slot.scalar("w") == Some(0.0)));
        assert_eq!(g.len(), 2);
    }

    #[test]
    fn logloss_of_half() {
        assert!((logloss(1, 0.5) - std::f64::consts::LN_2).abs() < 1e-15);
        assert!((logloss(0, 0.5) - std::f64::consts::LN_2).abs() < 1e-15);
    }
}
