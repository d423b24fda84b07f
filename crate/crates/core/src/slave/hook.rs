use crate::error::Result;
use crate::model::{ModelSchema, ParameterSlot, View};
use crate::plog::UpdateRecord;

/// Model conversion applied to every UPSERT before it lands in a serving
/// table. An error quarantines the record; consumption continues.
pub trait TransformHook: Send + Sync {
    fn transform(&self, schema: &ModelSchema, record: &UpdateRecord) -> Result<ParameterSlot>;
}

/// Masters already emit the serving view, so the default hook only checks it.
#[derive(Clone, Copy, Debug, Default)]
pub struct IdentityHook;

impl TransformHook for IdentityHook {
    fn transform(&self, schema: &ModelSchema, record: &UpdateRecord) -> Result<ParameterSlot> {
        schema.validate_slot(&record.payload, View::Serving)?;
        Ok(record.payload.clone())
    }
}

/// Multiplies every value by a constant. Used to show the hook's output is
/// what gets served.
#[derive(Clone, Copy, Debug)]
pub struct ScaleHook(pub f64);

impl TransformHook for ScaleHook {
    fn transform(&self, schema: &ModelSchema, record: &UpdateRecord) -> Result<ParameterSlot> {
        let mut out = IdentityHook.transform(schema, record)?;
        let names: Vec<String> = out.names().map(str::to_string).collect();
        for name in names {
            if let Some(v) = out.get_mut(&name) {
                v.iter_mut().for_each(|x| *x *= self.0);
            }
        }
        Ok(out)
    }
}
