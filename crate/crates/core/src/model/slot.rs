use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Per-feature parameter values, one vector per matrix name.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ParameterSlot {
    values: BTreeMap<String, Vec<f64>>,
}

impl ParameterSlot {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with(mut self, name: impl Into<String>, values: Vec<f64>) -> Self {
        self.values.insert(name.into(), values);
        self
    }

    pub fn insert(&mut self, name: impl Into<String>, values: Vec<f64>) -> Option<Vec<f64>> {
        self.values.insert(name.into(), values)
    }

    pub fn get(&self, name: &str) -> Option<&[f64]> {
        self.values.get(name).map(Vec::as_slice)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Vec<f64>> {
        self.values.get_mut(name)
    }

    pub fn remove(&mut self, name: &str) -> Option<Vec<f64>> {
        self.values.remove(name)
    }

    /// Single scalar of a width-1 matrix.
    pub fn scalar(&self, name: &str) -> Option<f64> {
        match self.get(name) {
            Some([x]) => Some(*x),
            _ => None,
        }
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &[f64])> {
        self.values.iter().map(|(k, v)| (k.as_str(), v.as_slice()))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.values.keys().map(String::as_str)
    }

    pub fn matrix_count(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn is_finite(&self) -> bool {
        self.values.values().flatten().all(|v| v.is_finite())
    }

    /// Exact bitwise equality, so `-0.0 != 0.0` and NaN payloads are compared too.
    pub fn bit_eq(&self, other: &ParameterSlot) -> bool {
        self.values.len() == other.values.len()
            && self.values.iter().zip(other.values.iter()).all(|(a, b)| {
                a.0 == b.0
                    && a.1.len() == b.1.len()
                    && a.1.iter().zip(b.1).all(|(x, y)| x.to_bits() == y.to_bits())
            })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Sample {
    pub label: u8,
    pub features: Vec<(u64, f64)>,
}

impl Sample {
    pub fn new(label: u8, features: Vec<(u64, f64)>) -> Result<Self> {
        let s = Sample { label, features };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        if self.label > 1 {
            return Err(Error::InvalidSlot(format!("label {} not in {{0,1}}", self.label)));
        }
        let mut ids: Vec<u64> = self.features.iter().map(|f| f.0).collect();
        ids.sort_unstable();
        if ids.windows(2).any(|w| w[0] == w[1]) {
            return Err(Error::InvalidSlot("duplicate feature id in sample".into()));
        }
        if self.features.iter().any(|f| !f.1.is_finite()) {
            return Err(Error::InvalidSlot("non-finite feature value".into()));
        }
        Ok(())
    }

    pub fn label_f64(&self) -> f64 {
        f64::from(self.label)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sample_rejects_duplicates() {
        assert!(Sample::new(1, vec![(1, 1.0), (1, 2.0)]).is_err());
        assert!(Sample::new(2, vec![(1, 1.0)]).is_err());
        assert!(Sample::new(0, vec![(1, f64::INFINITY)]).is_err());
        assert!(Sample::new(0, vec![(1, 1.0), (2, 1.0)]).is_ok());
    }

    #[test]
    fn bit_eq_distinguishes_signed_zero() {
        let a = ParameterSlot::new().with("w", vec![0.0]);
        let b = ParameterSlot::new().with("w", vec![-0.0]);
        assert_eq!(a, b);
        assert!(!a.bit_eq(&b));
        assert!(a.bit_eq(&a.clone()));
    }
}
