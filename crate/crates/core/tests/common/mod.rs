//! Reference implementations shared by the oracle and acceptance targets.
//!
//! Each check returns a one-line summary on success and a description of
//! the first disagreement otherwise.

#![allow(dead_code)]

use std::collections::HashMap;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;

use proptest::prelude::*;
use proptest::test_runner::{Config, TestRunner};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use weips_core::master::{Collector, DirtyEntry};
use weips_core::model::{
    ftrl_update, gradient_of_sample, logloss, predict, HyperParams, ModelSchema, ParameterSlot, Sample, SlotMap,
    View,
};
use weips_core::monitor::auc;
use weips_core::plog::codec::{decode_record, encode_record, Reader};
use weips_core::plog::UpdateRecord;

pub type Check = Result<String, String>;

pub fn rel_close(a: f64, b: f64, tol: f64) -> bool {
    (a - b).abs() <= tol * a.abs().max(b.abs()).max(f64::MIN_POSITIVE)
}

fn ftrl_w(hp: &HyperParams, z: f64, n: f64) -> f64 {
    if z.abs() <= hp.lambda1 {
        0.0
    } else {
        (z.signum() * hp.lambda1 - z) / ((hp.beta + n.sqrt()) / hp.alpha + hp.lambda2)
    }
}

/// FTRL-Proximal per coordinate, written out from the textbook recurrences.
pub fn ftrl_reference(hp: &HyperParams, z: f64, n: f64, g: f64) -> (f64, f64, f64) {
    let sigma = ((n + g * g).sqrt() - n.sqrt()) / hp.alpha;
    let z = z + g - sigma * ftrl_w(hp, z, n);
    let n = n + g * g;
    (z, n, ftrl_w(hp, z, n))
}

/// Random hyperparameters and gradient sequences against the reference.
pub fn ftrl_check(cases: usize, tol: f64) -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut worst = 0.0f64;
    let mut steps = 0;
    for case in 0..cases {
        let hp = HyperParams {
            alpha: rng.random_range(0.01..1.0),
            beta: rng.random_range(0.0..2.0),
            lambda1: rng.random_range(0.0..1.0),
            lambda2: rng.random_range(0.0..1.0),
            ..HyperParams::default()
        };
        let (mut z, mut n) = (0.0, 0.0);
        let mut slot = ParameterSlot::new()
            .with("z", vec![0.0])
            .with("n", vec![0.0])
            .with("w", vec![0.0]);
        for _ in 0..rng.random_range(1..20) {
            let g = rng.random_range(-3.0..3.0);
            let (rz, rn, rw) = ftrl_reference(&hp, z, n, g);
            (z, n) = (rz, rn);
            slot = ftrl_update(&hp, &slot, g).map_err(|e| format!("case {case}: {e}"))?;
            steps += 1;
            for (name, want) in [("z", rz), ("n", rn), ("w", rw)] {
                let got = slot.scalar(name).unwrap_or(f64::NAN);
                if !rel_close(got, want, tol) {
                    return Err(format!("case {case}: {name} = {got}, reference {want}"));
                }
                if want != 0.0 {
                    worst = worst.max((got - want).abs() / want.abs());
                }
            }
        }
    }
    Ok(format!("{cases} cases, {steps} steps, max rel err {worst:.1e}"))
}

fn loss_of(schema: &ModelSchema, slots: &SlotMap, s: &Sample) -> f64 {
    logloss(s.label, predict(schema, slots, s, View::Training).unwrap())
}

/// Central differences of the log loss against every analytic gradient entry.
fn fd_case(schema: &ModelSchema, rng: &mut ChaCha8Rng, tol: f64) -> Result<f64, String> {
    let k = schema.hyper().fm_k;
    let ids: Vec<u64> = (0..6).map(|i| i * 13 + rng.random_range(0..13)).collect();
    let sample = Sample::new(
        rng.random_range(0..2),
        ids.iter().map(|&id| (id, rng.random_range(-1.5..1.5))).collect(),
    )
    .map_err(|e| e.to_string())?;
    let mut slots = SlotMap::new();
    for &id in &ids {
        let mut slot = schema.initial_slot(id);
        for name in ["w", "v"] {
            if let Some(v) = slot.get_mut(name) {
                v.iter_mut().for_each(|x| *x = rng.random_range(-0.5..0.5));
            }
        }
        slots.insert(id, slot);
    }
    let p = predict(schema, &slots, &sample, View::Training).map_err(|e| e.to_string())?;
    let grads = gradient_of_sample(schema, &slots, &sample, p);
    let h = 1e-6;
    let mut worst = 0.0f64;
    for &id in &ids {
        for (name, width) in [("w", 1), ("v", k)] {
            let Some(analytic) = grads[&id].get(name).map(<[f64]>::to_vec) else {
                continue;
            };
            if analytic.len() != width {
                return Err(format!("{name} of {id} has width {}", analytic.len()));
            }
            for (j, a) in analytic.iter().enumerate() {
                let bump = |d: f64| {
                    let mut s = slots.clone();
                    s.get_mut(&id).unwrap().get_mut(name).unwrap()[j] += d;
                    loss_of(schema, &s, &sample)
                };
                let fd = (bump(h) - bump(-h)) / (2.0 * h);
                worst = worst.max((fd - a).abs());
                if (fd - a).abs() > tol {
                    return Err(format!("{name}[{j}] of {id}: finite difference {fd}, analytic {a}"));
                }
            }
        }
    }
    Ok(worst)
}

pub fn fd_check(cases: usize, tol: f64) -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let lr = ModelSchema::lr_ftrl(HyperParams::default()).unwrap();
    let fm = ModelSchema::fm_sgd(HyperParams::default()).unwrap();
    let mut worst = 0.0f64;
    for _ in 0..cases {
        worst = worst.max(fd_case(&lr, &mut rng, tol)?);
        worst = worst.max(fd_case(&fm, &mut rng, tol)?);
    }
    Ok(format!("{cases} LR + {cases} FM samples, max abs err {worst:.1e}"))
}

pub fn auc_brute_force(pairs: &[(u8, f64)]) -> Option<f64> {
    let pos: Vec<f64> = pairs.iter().filter(|p| p.0 == 1).map(|p| p.1).collect();
    let neg: Vec<f64> = pairs.iter().filter(|p| p.0 == 0).map(|p| p.1).collect();
    if pos.is_empty() || neg.is_empty() {
        return None;
    }
    let mut wins = 0.0;
    for p in &pos {
        for n in &neg {
            wins += if p > n {
                1.0
            } else if p == n {
                0.5
            } else {
                0.0
            };
        }
    }
    Some(wins / (pos.len() * neg.len()) as f64)
}

pub fn auc_check(cases: usize, max_n: usize) -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for case in 0..cases {
        let n = rng.random_range(1..=max_n);
        // Coarse scores so ties are common.
        let levels = rng.random_range(2..50);
        let pairs: Vec<(u8, f64)> = (0..n)
            .map(|_| (rng.random_range(0..2), rng.random_range(0..levels) as f64 / levels as f64))
            .collect();
        let (a, b) = (auc(&pairs), auc_brute_force(&pairs));
        let same = match (a, b) {
            (Some(a), Some(b)) => (a - b).abs() <= 1e-12,
            (a, b) => a == b,
        };
        if !same {
            return Err(format!("case {case} (n = {n}): {a:?} vs pair count {b:?}"));
        }
    }
    Ok(format!("{cases} cases, n <= {max_n}, exact"))
}

pub fn arb_slot() -> impl Strategy<Value = ParameterSlot> {
    prop::collection::btree_map("[a-z]{1,6}", prop::collection::vec(any::<f64>(), 0..6), 0..4).prop_map(|m| {
        let mut s = ParameterSlot::new();
        for (k, v) in m {
            s.insert(k, v);
        }
        s
    })
}

pub fn arb_record() -> impl Strategy<Value = UpdateRecord> {
    ("[a-zA-Z0-9_.-]{0,12}", any::<u64>(), any::<bool>(), any::<u32>(), arb_slot(), any::<u64>()).prop_map(
        |(model, id, upsert, shard, payload, epoch)| {
            let model: Arc<str> = Arc::from(model.as_str());
            if upsert {
                UpdateRecord::upsert(model, shard, id, payload, epoch)
            } else {
                UpdateRecord::delete(model, shard, id, epoch)
            }
        },
    )
}

pub fn same_record(a: &UpdateRecord, b: &UpdateRecord) -> bool {
    a.feature_id == b.feature_id
        && a.op == b.op
        && a.model_id == b.model_id
        && a.source_shard == b.source_shard
        && a.epoch == b.epoch
        && a.payload.bit_eq(&b.payload)
}

pub fn record_round_trip(r: &UpdateRecord) -> Result<(), String> {
    let mut buf = Vec::new();
    encode_record(r, &mut buf);
    let mut rd = Reader::new(&buf);
    let back = decode_record(&mut rd).map_err(|e| e.to_string())?;
    if !rd.is_empty() {
        return Err("trailing bytes".into());
    }
    if !same_record(r, &back) {
        return Err(format!("{r:?} came back as {back:?}"));
    }
    Ok(())
}

pub fn record_check(cases: u32) -> Check {
    let mut runner = TestRunner::new(Config {
        cases,
        failure_persistence: None,
        ..Config::default()
    });
    runner
        .run(&arb_record(), |r| {
            record_round_trip(&r).map_err(proptest::test_runner::TestCaseError::fail)
        })
        .map_err(|e| e.to_string())?;
    Ok(format!("{cases} generated records, bit-exact"))
}

/// `producers` threads enqueue `per` distinct ids each against one drainer.
pub fn collector_check(producers: u64, per: u64) -> Check {
    // Small queue so producers hit backpressure.
    let c = Collector::new(4096);
    let done = AtomicBool::new(false);
    let drained = std::thread::scope(|s| {
        let drainer = s.spawn(|| {
            let mut counts: HashMap<u64, u32> = HashMap::with_capacity((producers * per) as usize);
            let mut buf = Vec::new();
            loop {
                let finished = done.load(Ordering::Acquire);
                buf.clear();
                c.drain_into(&mut buf, 10_000);
                for e in &buf {
                    *counts.entry(e.feature_id).or_default() += 1;
                }
                if finished && buf.is_empty() && c.is_empty() {
                    return counts;
                }
            }
        });
        let handles: Vec<_> = (0..producers)
            .map(|p| {
                let c = &c;
                s.spawn(move || {
                    for i in 0..per {
                        let id = p * per + i;
                        c.collect(if i % 10 == 0 { DirtyEntry::delete(id) } else { DirtyEntry::upsert(id) });
                    }
                })
            })
            .collect();
        for h in handles {
            h.join().unwrap();
        }
        done.store(true, Ordering::Release);
        drainer.join().unwrap()
    });
    let total = producers * per;
    if drained.len() as u64 != total {
        return Err(format!("{} distinct ids drained, {total} enqueued", drained.len()));
    }
    if let Some((id, n)) = drained.iter().find(|(_, &n)| n != 1) {
        return Err(format!("id {id} drained {n} times"));
    }
    let st = c.stats();
    if st.upserts_enqueued + st.deletes_enqueued != total
        || st.upserts_drained != st.upserts_enqueued
        || st.deletes_drained != st.deletes_enqueued
        || st.deletes_drained != total / 10
    {
        return Err(format!("counters disagree: {st:?}"));
    }
    Ok(format!(
        "{producers} x {per} entries, each drained once, {} backpressure waits",
        st.backpressure_waits
    ))
}
