use serde::{Deserialize, Serialize};

use super::slot::ParameterSlot;
use crate::error::{Error, Result};

pub const MATRIX_Z: &str = "z";
pub const MATRIX_N: &str = "n";
pub const MATRIX_W: &str = "w";
pub const MATRIX_V: &str = "v";

/// Standard deviation of the deterministic latent-factor initialization.
pub const FM_INIT_STD: f64 = 0.01;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SchemaKind {
    LrFtrl,
    FmSgd,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MatrixRole {
    TrainOnly,
    ServeOnly,
    Shared,
}

impl MatrixRole {
    pub fn is_served(self) -> bool {
        !matches!(self, MatrixRole::TrainOnly)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MatrixSpec {
    pub name: String,
    pub role: MatrixRole,
    pub width: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HyperParams {
    pub alpha: f64,
    pub beta: f64,
    pub lambda1: f64,
    pub lambda2: f64,
    pub sgd_eta: f64,
    pub fm_k: usize,
}

impl Default for HyperParams {
    fn default() -> Self {
        HyperParams {
            alpha: 0.1,
            beta: 1.0,
            lambda1: 0.1,
            lambda2: 0.1,
            sgd_eta: 0.05,
            fm_k: 4,
        }
    }
}

impl HyperParams {
    pub fn validate(&self) -> Result<()> {
        let bad = |what: &str| Err(Error::InvalidHyperParams(what.to_string()));
        if !(self.alpha.is_finite() && self.alpha > 0.0) {
            return bad("alpha must be finite and > 0");
        }
        if !(self.beta.is_finite() && self.beta >= 0.0) {
            return bad("beta must be finite and >= 0");
        }
        if !(self.lambda1.is_finite() && self.lambda1 >= 0.0) {
            return bad("lambda1 must be finite and >= 0");
        }
        if !(self.lambda2.is_finite() && self.lambda2 >= 0.0) {
            return bad("lambda2 must be finite and >= 0");
        }
        if !(self.sgd_eta.is_finite() && self.sgd_eta > 0.0) {
            return bad("sgd_eta must be finite and > 0");
        }
        if self.fm_k == 0 {
            return bad("fm_k must be >= 1");
        }
        Ok(())
    }
}

/// Which set of matrices a slot is expected to carry.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum View {
    Training,
    Serving,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelSchema {
    kind: SchemaKind,
    matrices: Vec<MatrixSpec>,
    hyper: HyperParams,
}

impl ModelSchema {
    pub fn new(kind: SchemaKind, hyper: HyperParams) -> Result<Self> {
        match kind {
            SchemaKind::LrFtrl => Self::lr_ftrl(hyper),
            SchemaKind::FmSgd => Self::fm_sgd(hyper),
        }
    }

    /// Logistic regression trained with FTRL-Proximal: `z`, `n` train-only, `w` served.
    pub fn lr_ftrl(hyper: HyperParams) -> Result<Self> {
        hyper.validate()?;
        let m = |name: &str, role| MatrixSpec {
            name: name.to_string(),
            role,
            width: 1,
        };
        Ok(ModelSchema {
            kind: SchemaKind::LrFtrl,
            matrices: vec![
                m(MATRIX_Z, MatrixRole::TrainOnly),
                m(MATRIX_N, MatrixRole::TrainOnly),
                m(MATRIX_W, MatrixRole::ServeOnly),
            ],
            hyper,
        })
    }

    /// Factorization machine trained with plain SGD: `w` and `v` both shared.
    pub fn fm_sgd(hyper: HyperParams) -> Result<Self> {
        hyper.validate()?;
        Ok(ModelSchema {
            kind: SchemaKind::FmSgd,
            matrices: vec![
                MatrixSpec {
                    name: MATRIX_W.to_string(),
                    role: MatrixRole::Shared,
                    width: 1,
                },
                MatrixSpec {
                    name: MATRIX_V.to_string(),
                    role: MatrixRole::Shared,
                    width: hyper.fm_k,
                },
            ],
            hyper,
        })
    }

    pub fn kind(&self) -> SchemaKind {
        self.kind
    }

    pub fn hyper(&self) -> &HyperParams {
        &self.hyper
    }

    pub fn matrices(&self) -> &[MatrixSpec] {
        &self.matrices
    }

    pub fn matrix(&self, name: &str) -> Option<&MatrixSpec> {
        self.matrices.iter().find(|m| m.name == name)
    }

    pub fn view_matrices(&self, view: View) -> impl Iterator<Item = &MatrixSpec> {
        self.matrices
            .iter()
            .filter(move |m| view == View::Training || m.role.is_served())
    }

    /// All-zero slot for the given view.
    pub fn zero_slot(&self, view: View) -> ParameterSlot {
        let mut slot = ParameterSlot::new();
        for m in self.view_matrices(view) {
            slot.insert(m.name.clone(), vec![0.0; m.width]);
        }
        slot
    }

    /// Training slot a feature starts from on first touch.
    ///
    /// Zero for LR. FM latent factors get a small pseudo-random value derived
    /// from the feature id, so pulls of absent ids and first pushes agree.
    pub fn initial_slot(&self, feature_id: u64) -> ParameterSlot {
        let mut slot = self.zero_slot(View::Training);
        if self.kind == SchemaKind::FmSgd {
            if let Some(v) = slot.get_mut(MATRIX_V) {
                let mut state = feature_id ^ 0x9E37_79B9_7F4A_7C15;
                for x in v.iter_mut() {
                    *x = FM_INIT_STD * unit_normal(&mut state);
                }
            }
        }
        slot
    }

    /// Checks that `slot` holds exactly the matrices of `view` with the declared
    /// widths and finite values.
    pub fn validate_slot(&self, slot: &ParameterSlot, view: View) -> Result<()> {
        for (name, values) in slot.iter() {
            let spec = self
                .matrix(name)
                .ok_or_else(|| Error::InvalidSlot(format!("unknown matrix {name:?}")))?;
            if view == View::Serving && !spec.role.is_served() {
                return Err(Error::InvalidSlot(format!(
                    "training-only matrix {name:?} in serving slot"
                )));
            }
            if values.len() != spec.width {
                return Err(Error::InvalidSlot(format!(
                    "matrix {name:?} has width {}, schema says {}",
                    values.len(),
                    spec.width
                )));
            }
            if values.iter().any(|v| !v.is_finite()) {
                return Err(Error::InvalidSlot(format!("non-finite value in {name:?}")));
            }
        }
        for m in self.view_matrices(view) {
            if slot.get(&m.name).is_none() {
                return Err(Error::InvalidSlot(format!("missing matrix {:?}", m.name)));
            }
        }
        Ok(())
    }
}

// splitmix64 + Box-Muller; deterministic per feature id.
fn unit_normal(state: &mut u64) -> f64 {
    let mut next = || {
        *state = state.wrapping_add(0x9E37_79B9_7F4A_7C15);
        let mut z = *state;
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        z ^= z >> 31;
        ((z >> 11) as f64 + 0.5) / (1u64 << 53) as f64
    };
    let u1 = next();
    let u2 = next();
    (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
}
