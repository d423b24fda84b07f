//! Reproducible synthetic click stream.
//!
//! Feature ids are Zipf-distributed over the vocabulary (rank `r` is id
//! `r - 1`); labels are Bernoulli draws from a hidden logistic model.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Zipf};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{sigmoid, Sample};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CorruptionMode {
    /// Every label from the start sample on is inverted.
    LabelFlip,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Corruption {
    pub start_sample: u64,
    pub mode: CorruptionMode,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct WorkloadSpec {
    pub num_features: u64,
    pub zipf_s: f64,
    pub features_per_sample: usize,
    pub seed: u64,
    /// Standard deviation of the hidden per-feature weights.
    pub weight_std: f64,
    pub bias: f64,
    /// Trainer-side pacing; 0 means as fast as possible.
    pub samples_per_second: u64,
    pub corruption: Option<Corruption>,
}

impl Default for WorkloadSpec {
    fn default() -> Self {
        WorkloadSpec {
            num_features: 100_000,
            zipf_s: 1.2,
            features_per_sample: 10,
            seed: 1,
            weight_std: 1.0,
            bias: -0.5,
            samples_per_second: 0,
            corruption: None,
        }
    }
}

impl WorkloadSpec {
    pub fn validate(&self) -> Result<()> {
        if self.num_features == 0 || self.features_per_sample == 0 {
            return Err(Error::Config("num_features and features_per_sample must be >= 1".into()));
        }
        if self.features_per_sample as u64 > self.num_features {
            return Err(Error::Config("features_per_sample exceeds num_features".into()));
        }
        if !(self.zipf_s.is_finite() && self.zipf_s >= 0.0) {
            return Err(Error::Config(format!("zipf_s must be >= 0, got {}", self.zipf_s)));
        }
        if !(self.weight_std.is_finite() && self.weight_std >= 0.0 && self.bias.is_finite()) {
            return Err(Error::Config("weight_std and bias must be finite".into()));
        }
        Ok(())
    }
}

pub struct SampleStream {
    spec: WorkloadSpec,
    rng: ChaCha8Rng,
    zipf: Zipf<f64>,
    weights: Vec<f64>,
    next: u64,
}

impl SampleStream {
    pub fn new(spec: WorkloadSpec) -> Result<Self> {
        spec.validate()?;
        let mut wrng = ChaCha8Rng::seed_from_u64(spec.seed ^ 0x5eed_0f_4ea1);
        let normal = Normal::new(0.0, spec.weight_std).map_err(|e| Error::Config(e.to_string()))?;
        let weights = (0..spec.num_features).map(|_| normal.sample(&mut wrng)).collect();
        let zipf = Zipf::new(spec.num_features as f64, spec.zipf_s).map_err(|e| Error::Config(e.to_string()))?;
        Ok(SampleStream {
            rng: ChaCha8Rng::seed_from_u64(spec.seed),
            spec,
            zipf,
            weights,
            next: 0,
        })
    }

    pub fn spec(&self) -> &WorkloadSpec {
        &self.spec
    }

    /// Index of the next sample.
    pub fn position(&self) -> u64 {
        self.next
    }

    pub fn hidden_weight(&self, id: u64) -> f64 {
        self.weights[id as usize]
    }

    /// Click probability under the hidden model (before any corruption).
    pub fn true_probability(&self, sample: &Sample) -> f64 {
        let s: f64 = sample.features.iter().map(|&(id, x)| self.hidden_weight(id) * x).sum();
        sigmoid(s + self.spec.bias)
    }

    pub fn is_corrupted(&self, index: u64) -> bool {
        self.spec.corruption.is_some_and(|c| index >= c.start_sample)
    }

    pub fn next_sample(&mut self) -> (u64, Sample) {
        let index = self.next;
        self.next += 1;
        // Distinct ids: redraw repeats.
        let k = self.spec.features_per_sample;
        let mut features: Vec<(u64, f64)> = Vec::with_capacity(k);
        while features.len() < k {
            let id = self.zipf.sample(&mut self.rng) as u64 - 1;
            if !features.iter().any(|f| f.0 == id) {
                features.push((id, 1.0));
            }
        }
        let mut sample = Sample { label: 0, features };
        let p = self.true_probability(&sample);
        let mut label = u8::from(self.rng.random::<f64>() < p);
        if self.is_corrupted(index) {
            label = 1 - label;
        }
        sample.label = label;
        (index, sample)
    }

    pub fn next_batch(&mut self, n: usize) -> Vec<(u64, Sample)> {
        (0..n).map(|_| self.next_sample()).collect()
    }
}

impl Iterator for SampleStream {
    type Item = (u64, Sample);

    fn next(&mut self) -> Option<Self::Item> {
        Some(self.next_sample())
    }
}
