//! CSV and text output of a finished run.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::Serialize;

use super::run::RunArtifacts;
use crate::error::{Error, Result};

pub const RUN_JSON: &str = "run.json";

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct TimelineEntry {
    pub at_ms: u64,
    pub source: &'static str,
    pub kind: String,
    pub detail: String,
}

/// Scheduler events and injected faults in clock order.
pub fn timeline(a: &RunArtifacts) -> Vec<TimelineEntry> {
    let mut out: Vec<TimelineEntry> = a
        .events
        .iter()
        .map(|e| TimelineEntry {
            at_ms: e.at_ms,
            source: "scheduler",
            kind: e.kind.clone(),
            detail: e.detail.clone(),
        })
        .chain(a.faults.iter().map(|f| TimelineEntry {
            at_ms: f.at_ms,
            source: "fault",
            kind: f.action.clone(),
            detail: format!("after {} samples: {}", f.at_samples, f.outcome),
        }))
        .collect();
    out.sort_by_key(|e| e.at_ms);
    out
}

fn write_csv<T: Serialize>(path: &Path, rows: impl IntoIterator<Item = T>) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(std::io::Error::from)?;
    for row in rows {
        w.serialize(row).map_err(std::io::Error::from)?;
    }
    w.flush()?;
    Ok(())
}

#[derive(Serialize)]
struct FreshnessRow<'a> {
    gather: &'a str,
    probe: usize,
    latency_ms: f64,
}

#[derive(Serialize)]
struct SyncRow<'a> {
    gather: &'a str,
    incarnation: usize,
    drained: u64,
    emitted: u64,
    record_bytes: u64,
    appends: u64,
    append_failures: u64,
}

#[derive(Serialize)]
struct MetricRow {
    window_id: u64,
    version: u64,
    count: u64,
    logloss: f64,
    auc: Option<f64>,
    timestamp_ms: u64,
}

/// Writes run.json, metrics.csv, timeline.csv, summary.txt and, when
/// measured, freshness.csv and sync.csv into `out`.
pub fn write_report(a: &RunArtifacts, out: &Path) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(out)?;
    let mut written = Vec::new();
    let mut emit = |name: &str| {
        let p = out.join(name);
        written.push(p.clone());
        p
    };
    std::fs::write(emit(RUN_JSON), serde_json::to_vec_pretty(a)?)?;
    write_csv(
        &emit("metrics.csv"),
        a.metrics.iter().map(|m| MetricRow {
            window_id: m.window_id,
            version: m.version,
            count: m.count,
            logloss: m.logloss,
            auc: m.auc,
            timestamp_ms: m.timestamp_ms,
        }),
    )?;
    write_csv(&emit("timeline.csv"), timeline(a))?;
    if let Some(f) = &a.freshness {
        write_csv(
            &emit("freshness.csv"),
            f.samples_ms.iter().enumerate().map(|(i, &ms)| FreshnessRow {
                gather: &f.label,
                probe: i,
                latency_ms: ms,
            }),
        )?;
    }
    if let Some(s) = &a.sync {
        write_csv(
            &emit("sync.csv"),
            s.per_shard.iter().enumerate().map(|(i, st)| SyncRow {
                gather: &s.gather,
                incarnation: i,
                drained: st.collector.upserts_drained + st.collector.deletes_drained + st.recovery_entries,
                emitted: st.records_emitted,
                record_bytes: st.record_bytes,
                appends: st.appends,
                append_failures: st.append_failures,
            }),
        )?;
    }
    std::fs::write(emit("summary.txt"), summary(a))?;
    Ok(written)
}

/// Reads the run.json in `dir` (or the file itself).
pub fn load_artifacts(path: &Path) -> Result<RunArtifacts> {
    let file = if path.is_dir() { path.join(RUN_JSON) } else { path.to_path_buf() };
    let bytes = std::fs::read(&file)
        .map_err(|e| Error::Config(format!("cannot read {}: {e}", file.display())))?;
    Ok(serde_json::from_slice(&bytes)?)
}

pub fn summary(a: &RunArtifacts) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "model           {}", a.model_id);
    let _ = writeln!(s, "run dir         {}", a.run_dir.display());
    let _ = writeln!(s, "gather          {}", a.gather);
    let _ = writeln!(s, "samples         {}", a.samples_trained);
    let _ = writeln!(s, "wall time       {:.1} s", a.wall_ms as f64 / 1e3);
    let _ = writeln!(s, "cluster clock   {:.1} s", a.clock_ms as f64 / 1e3);
    let _ = writeln!(s, "versions        {:?} (serving {:?})", a.versions, a.active_version);
    if let Some(last) = a.metrics.last() {
        let _ = writeln!(
            s,
            "metrics         {} windows, last logloss {:.5} auc {}",
            a.metrics.len(),
            last.logloss,
            last.auc.map_or("n/a".into(), |x| format!("{x:.5}"))
        );
    }
    if let Some(f) = &a.freshness {
        let _ = writeln!(
            s,
            "freshness       {} probes ({} timed out): p50 {:.2} ms, p99 {:.2} ms, max {:.2} ms",
            f.probes, f.timeouts, f.p50_ms, f.p99_ms, f.max_ms
        );
    }
    if let Some(y) = &a.sync {
        let _ = writeln!(
            s,
            "sync            drained {} emitted {} dedup ratio {:.3} ({:.1}% emitted), {} record bytes",
            y.drained,
            y.emitted,
            y.dedup_ratio,
            100.0 * y.emitted_fraction(),
            y.record_bytes
        );
        if a.samples_trained > 0 {
            let _ = writeln!(
                s,
                "bandwidth       {:.1} bytes/sample",
                y.record_bytes as f64 / a.samples_trained as f64
            );
        }
    }
    if let Some(c) = &a.consistency {
        let _ = writeln!(
            s,
            "consistency     {} ({} replicas, {} params, {} mismatches)",
            if c.passed() { "PASS" } else { "FAIL" },
            c.replicas_checked,
            c.params_checked,
            c.mismatches.len()
        );
    }
    let t = timeline(a);
    let _ = writeln!(s, "timeline        {} entries", t.len());
    for e in t {
        let _ = writeln!(s, "  {:>10} ms  {:<9} {:<24} {}", e.at_ms, e.source, e.kind, e.detail);
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::harness::faults::InjectedFault;
    use crate::scheduler::Event;

    #[test]
    fn timeline_merges_and_files_round_trip() {
        let a = RunArtifacts {
            model_id: "m".into(),
            events: vec![Event {
                at_ms: 30,
                model_id: "m".into(),
                kind: "failover".into(),
                detail: "master 0".into(),
            }],
            faults: vec![InjectedFault {
                at_samples: 5,
                at_ms: 10,
                action: "kill-master(0)".into(),
                outcome: "killed".into(),
            }],
            ..Default::default()
        };
        let t = timeline(&a);
        assert_eq!(t.iter().map(|e| e.source).collect::<Vec<_>>(), ["fault", "scheduler"]);
        let dir = tempfile::tempdir().unwrap();
        let files = write_report(&a, dir.path()).unwrap();
        assert!(files.iter().all(|f| f.exists()));
        assert_eq!(load_artifacts(dir.path()).unwrap(), a);
        assert!(summary(&a).contains("kill-master(0)"));
    }
}
