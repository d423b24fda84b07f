//! Update-to-visible latency measured with sentinel features.
//!
//! A prober pushes a gradient for a feature nobody else touches and a
//! poller watches the owning slave shard until the weight turns non-zero.

use std::collections::HashMap;
use std::sync::atomic::{AtomicBool, Ordering};
use std::time::{Duration, Instant};

use parking_lot::Mutex;
use serde::{Deserialize, Serialize};

use super::config::FreshnessConfig;
use crate::client::ClusterClient;
use crate::error::Result;
use crate::model::{gradient_of_sample, ModelSchema, Sample, SlotMap, MATRIX_W};

/// First sentinel id; far above any workload vocabulary.
pub const SENTINEL_BASE: u64 = 1 << 48;

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct FreshnessStats {
    pub label: String,
    pub probes: usize,
    pub timeouts: usize,
    pub p50_ms: f64,
    pub p99_ms: f64,
    pub max_ms: f64,
    pub mean_ms: f64,
    pub samples_ms: Vec<f64>,
}

/// Nearest-rank percentile of an ascending slice.
pub fn percentile(sorted: &[f64], q: f64) -> f64 {
    if sorted.is_empty() {
        return f64::NAN;
    }
    let rank = (q * sorted.len() as f64).ceil().max(1.0) as usize;
    sorted[rank.min(sorted.len()) - 1]
}

impl FreshnessStats {
    pub fn from_samples(label: &str, mut samples_ms: Vec<f64>, timeouts: usize) -> Self {
        samples_ms.sort_by(f64::total_cmp);
        let n = samples_ms.len();
        FreshnessStats {
            label: label.into(),
            probes: n + timeouts,
            timeouts,
            p50_ms: percentile(&samples_ms, 0.50),
            p99_ms: percentile(&samples_ms, 0.99),
            max_ms: samples_ms.last().copied().unwrap_or(f64::NAN),
            mean_ms: if n == 0 { f64::NAN } else { samples_ms.iter().sum::<f64>() / n as f64 },
            samples_ms,
        }
    }
}

/// Sends `cfg.probes` sentinel updates `cfg.probe_interval_ms` apart and
/// measures when each becomes visible on the serving side.
pub fn measure_freshness(
    label: &str,
    pusher: &ClusterClient,
    poller: &ClusterClient,
    schema: &ModelSchema,
    cfg: &FreshnessConfig,
    first_id: u64,
) -> Result<FreshnessStats> {
    let outstanding: Mutex<HashMap<u64, Instant>> = Mutex::default();
    let seen: Mutex<Vec<f64>> = Mutex::default();
    let timeouts = Mutex::new(0usize);
    let sending = AtomicBool::new(true);
    let timeout = Duration::from_millis(cfg.timeout_ms);

    let sent: Result<()> = std::thread::scope(|s| {
        s.spawn(|| loop {
            let ids: Vec<u64> = outstanding.lock().keys().copied().collect();
            if ids.is_empty() {
                if !sending.load(Ordering::Acquire) {
                    return;
                }
                std::thread::sleep(Duration::from_micros(200));
                continue;
            }
            if let Ok(got) = poller.pull_serving(&ids) {
                let now = Instant::now();
                let mut out = outstanding.lock();
                for (id, slot) in got {
                    if slot.scalar(MATRIX_W).is_some_and(|w| w != 0.0) {
                        if let Some(t0) = out.remove(&id) {
                            seen.lock().push(now.duration_since(t0).as_secs_f64() * 1e3);
                        }
                    }
                }
                out.retain(|_, t0| {
                    let late = now.duration_since(*t0) > timeout;
                    if late {
                        *timeouts.lock() += 1;
                    }
                    !late
                });
            }
            std::thread::sleep(Duration::from_micros(200));
        });

        let result = (|| {
            for i in 0..cfg.probes as u64 {
                let id = first_id + i;
                let sample = Sample {
                    label: 1,
                    features: vec![(id, 1.0)],
                };
                let grad = gradient_of_sample(schema, &SlotMap::new(), &sample, 0.5)
                    .remove(&id)
                    .expect("sentinel gradient");
                let t0 = Instant::now();
                outstanding.lock().insert(id, t0);
                pusher.push(&[(id, grad)])?;
                std::thread::sleep(Duration::from_millis(cfg.probe_interval_ms));
            }
            Ok(())
        })();
        sending.store(false, Ordering::Release);
        if result.is_err() {
            outstanding.lock().clear();
        }
        result
    });
    sent?;
    Ok(FreshnessStats::from_samples(label, seen.into_inner(), timeouts.into_inner()))
}
