//! Progressive validation and the domino-downgrade decision.
//!
//! Trainers score every sample against the pre-update model, accumulate
//! `(label, prediction)` into fixed-size windows and publish one
//! [`MetricSample`] per window. [`should_downgrade`] compares the mean
//! logloss of the last `smooth_k` windows with a baseline; averaging over
//! several windows is what keeps a single noisy window from firing.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{logloss, predict, ModelSchema, Sample, SlotMap, View};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricSample {
    pub window_id: u64,
    /// Latest complete checkpoint version while the window was filled.
    pub version: u64,
    pub count: u64,
    pub logloss: f64,
    /// `None` when the window held a single class.
    pub auc: Option<f64>,
    pub timestamp_ms: u64,
}

/// Open window of `(label, prediction)` pairs.
#[derive(Clone, Debug, Default)]
pub struct Accumulator {
    pairs: Vec<(u8, f64)>,
    loss_sum: f64,
    next_window: u64,
}

impl Accumulator {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn starting_at(window_id: u64) -> Self {
        Accumulator {
            next_window: window_id,
            ..Default::default()
        }
    }

    pub fn add(&mut self, label: u8, prediction: f64) {
        self.pairs.push((label, prediction));
        self.loss_sum += logloss(label, prediction);
    }

    pub fn count(&self) -> usize {
        self.pairs.len()
    }

    pub fn next_window_id(&self) -> u64 {
        self.next_window
    }

    /// Folds another trainer's open window into this one.
    pub fn merge(&mut self, other: &mut Accumulator) {
        self.pairs.append(&mut other.pairs);
        self.loss_sum += other.loss_sum;
        other.loss_sum = 0.0;
    }

    /// Emits the window once it holds at least `window_size` pairs and resets.
    pub fn close_window(&mut self, window_size: usize, version: u64, timestamp_ms: u64) -> Option<MetricSample> {
        if self.pairs.is_empty() || self.pairs.len() < window_size {
            return None;
        }
        let count = self.pairs.len() as u64;
        let sample = MetricSample {
            window_id: self.next_window,
            version,
            count,
            logloss: self.loss_sum / count as f64,
            auc: auc(&self.pairs),
            timestamp_ms,
        };
        self.pairs.clear();
        self.loss_sum = 0.0;
        self.next_window += 1;
        Some(sample)
    }
}

/// AUC by the rank statistic with midranks for ties; `None` for one class.
pub fn auc(pairs: &[(u8, f64)]) -> Option<f64> {
    let pos = pairs.iter().filter(|p| p.0 == 1).count();
    let neg = pairs.len() - pos;
    if pos == 0 || neg == 0 {
        return None;
    }
    let mut order: Vec<usize> = (0..pairs.len()).collect();
    order.sort_by(|&a, &b| pairs[a].1.total_cmp(&pairs[b].1));
    let mut rank_sum_pos = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && pairs[order[j + 1]].1 == pairs[order[i]].1 {
            j += 1;
        }
        // Ranks i+1 ..= j+1 share their mean.
        let mid = (i + j) as f64 / 2.0 + 1.0;
        rank_sum_pos += mid * order[i..=j].iter().filter(|&&k| pairs[k].0 == 1).count() as f64;
        i = j + 1;
    }
    let (p, n) = (pos as f64, neg as f64);
    Some((rank_sum_pos - p * (p + 1.0) / 2.0) / (p * n))
}

/// Scores `sample` against the current (pre-update) parameters and records it.
pub fn progressive_validate(
    schema: &ModelSchema,
    slots: &SlotMap,
    sample: &Sample,
    acc: &mut Accumulator,
) -> Result<f64> {
    let p = predict(schema, slots, sample, View::Training)?;
    acc.add(sample.label, p);
    Ok(p)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum Baseline {
    /// Mean logloss of the `m` windows before the last `smooth_k`.
    TrailingMean { m: usize },
    Fixed { value: f64 },
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TriggerConfig {
    pub window_size: usize,
    pub smooth_k: usize,
    pub ratio: f64,
    pub baseline: Baseline,
}

impl Default for TriggerConfig {
    fn default() -> Self {
        TriggerConfig {
            window_size: 1000,
            smooth_k: 5,
            ratio: 1.2,
            baseline: Baseline::TrailingMean { m: 20 },
        }
    }
}

impl TriggerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.window_size == 0 || self.smooth_k == 0 {
            return Err(Error::Config("window_size and smooth_k must be positive".into()));
        }
        if !(self.ratio > 1.0) {
            return Err(Error::Config(format!("ratio must exceed 1, got {}", self.ratio)));
        }
        if let Baseline::TrailingMean { m: 0 } = self.baseline {
            return Err(Error::Config("baseline m must be positive".into()));
        }
        Ok(())
    }

    /// Windows needed before a decision can be made.
    pub fn required_history(&self) -> usize {
        match self.baseline {
            Baseline::TrailingMean { m } => self.smooth_k + m,
            Baseline::Fixed { .. } => self.smooth_k,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Decision {
    pub trigger: bool,
    pub reason: String,
    pub recent_mean: Option<f64>,
    pub baseline: Option<f64>,
}

fn mean(xs: impl Iterator<Item = f64>) -> f64 {
    let (s, n) = xs.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    s / n as f64
}

fn baseline_of(history: &[MetricSample], cfg: &TriggerConfig) -> Option<f64> {
    match cfg.baseline {
        Baseline::Fixed { value } => Some(value),
        Baseline::TrailingMean { m } => {
            let end = history.len().checked_sub(cfg.smooth_k)?;
            let start = end.checked_sub(m)?;
            Some(mean(history[start..end].iter().map(|s| s.logloss)))
        }
    }
}

/// Triggers iff mean logloss of the last `smooth_k` windows exceeds `ratio * baseline`.
pub fn should_downgrade(history: &[MetricSample], cfg: &TriggerConfig) -> Decision {
    if history.len() < cfg.required_history() {
        return Decision {
            trigger: false,
            reason: "warming-up".into(),
            recent_mean: None,
            baseline: None,
        };
    }
    let b = baseline_of(history, cfg).expect("history length checked");
    let recent = mean(history[history.len() - cfg.smooth_k..].iter().map(|s| s.logloss));
    let limit = cfg.ratio * b;
    let trigger = recent > limit;
    Decision {
        trigger,
        reason: format!(
            "mean logloss of last {} windows {recent:.4} {} {:.2} x baseline {b:.4} = {limit:.4}",
            cfg.smooth_k,
            if trigger { ">" } else { "<=" },
            cfg.ratio
        ),
        recent_mean: Some(recent),
        baseline: Some(b),
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum StrategyKind {
    Latest,
    BestMetric,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MetricKind {
    Logloss,
    Auc,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct VersionStrategy {
    pub kind: StrategyKind,
    pub metric: MetricKind,
}

impl Default for VersionStrategy {
    fn default() -> Self {
        VersionStrategy {
            kind: StrategyKind::Latest,
            metric: MetricKind::Logloss,
        }
    }
}

/// Picks the rollback target among versions older than `degraded`.
///
/// LATEST takes the newest; BEST_METRIC the best mean metric over each
/// version's windows (versions without windows are skipped), ties going to
/// the newer version.
pub fn select_version(
    candidates: &[(u64, Vec<MetricSample>)],
    degraded: Option<u64>,
    strategy: VersionStrategy,
) -> Result<u64> {
    let eligible = candidates
        .iter()
        .filter(|(v, _)| degraded.is_none_or(|d| *v < d));
    let picked = match strategy.kind {
        StrategyKind::Latest => eligible.map(|(v, _)| *v).max(),
        StrategyKind::BestMetric => {
            let scored = eligible.filter_map(|(v, hist)| {
                let score = match strategy.metric {
                    // Lower logloss is better; negate so that larger wins.
                    MetricKind::Logloss if !hist.is_empty() => -mean(hist.iter().map(|s| s.logloss)),
                    MetricKind::Auc => {
                        let aucs: Vec<f64> = hist.iter().filter_map(|s| s.auc).collect();
                        if aucs.is_empty() {
                            return None;
                        }
                        mean(aucs.into_iter())
                    }
                    _ => return None,
                };
                Some((score, *v))
            });
            scored
                .max_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)))
                .map(|(_, v)| v)
        }
    };
    picked.ok_or_else(|| Error::DowngradeAborted("no eligible checkpoint version".into()))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DowngradePlan {
    pub decision: Decision,
    /// First window of the degraded run.
    pub onset_window: u64,
    pub degraded_version: u64,
    pub target_version: u64,
}

/// Full decision: trigger check, degradation onset, and target selection
/// among `complete_versions`.
///
/// The onset is the earliest window of the run of over-threshold windows
/// that ends inside the last `smooth_k`; every version at or after the one in
/// effect at the onset is treated as degraded.
pub fn plan_downgrade(
    history: &[MetricSample],
    cfg: &TriggerConfig,
    complete_versions: &[u64],
    strategy: VersionStrategy,
) -> Result<Option<DowngradePlan>> {
    let decision = should_downgrade(history, cfg);
    if !decision.trigger {
        return Ok(None);
    }
    let limit = cfg.ratio * decision.baseline.expect("set when triggered");
    let recent_start = history.len() - cfg.smooth_k;
    let first_bad = (recent_start..history.len())
        .find(|&i| history[i].logloss > limit)
        .expect("a mean above the limit has a member above it");
    let mut onset = first_bad;
    while onset > 0 && history[onset - 1].logloss > limit {
        onset -= 1;
    }
    let degraded = history[onset].version;
    let candidates: Vec<(u64, Vec<MetricSample>)> = complete_versions
        .iter()
        .map(|&v| (v, history.iter().filter(|s| s.version == v).cloned().collect()))
        .collect();
    let target = select_version(&candidates, Some(degraded), strategy)?;
    Ok(Some(DowngradePlan {
        decision,
        onset_window: history[onset].window_id,
        degraded_version: degraded,
        target_version: target,
    }))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::HyperParams;

    fn hist(losses: &[f64]) -> Vec<MetricSample> {
        losses
            .iter()
            .enumerate()
            .map(|(i, &l)| MetricSample {
                window_id: i as u64,
                version: 0,
                count: 1000,
                logloss: l,
                auc: None,
                timestamp_ms: 0,
            })
            .collect()
    }

    fn cfg(k: usize) -> TriggerConfig {
        TriggerConfig {
            smooth_k: k,
            baseline: Baseline::TrailingMean { m: 20 },
            ..Default::default()
        }
    }

    fn with_tail(tail: &[f64]) -> Vec<MetricSample> {
        let mut l = vec![0.30; 20];
        l.extend_from_slice(tail);
        hist(&l)
    }

    #[test]
    fn empty_model_contribution() {
        let schema = ModelSchema::lr_ftrl(HyperParams::default()).unwrap();
        let mut acc = Accumulator::new();
        let s = Sample::new(1, vec![(1, 1.0)]).unwrap();
        let p = progressive_validate(&schema, &SlotMap::new(), &s, &mut acc).unwrap();
        assert_eq!(p, 0.5);
        let w = acc.close_window(1, 0, 0).unwrap();
        assert!((w.logloss - std::f64::consts::LN_2).abs() < 1e-12);
        assert_eq!(w.auc, None);
    }

    #[test]
    fn auc_examples() {
        assert_eq!(auc(&[(1, 0.9), (0, 0.1)]), Some(1.0));
        assert_eq!(auc(&[(1, 0.5), (0, 0.5)]), Some(0.5));
        assert_eq!(auc(&[(1, 0.5), (1, 0.7)]), None);
        assert_eq!(auc(&[(0, 0.9), (1, 0.1)]), Some(0.0));
    }

    #[test]
    fn close_window_rules() {
        let mut acc = Accumulator::new();
        acc.add(1, 1.0 - 1e-9);
        assert!(acc.close_window(2, 0, 0).is_none());
        let w = acc.close_window(1, 3, 7).unwrap();
        assert!(w.logloss < 2e-9 && w.logloss > 0.0);
        assert_eq!((w.window_id, w.version, w.count), (0, 3, 1));
        acc.add(0, 0.2);
        assert_eq!(acc.close_window(1, 3, 8).unwrap().window_id, 1);
    }

    #[test]
    fn merge_is_additive() {
        let mut a = Accumulator::new();
        let mut b = Accumulator::new();
        a.add(1, 0.9);
        b.add(0, 0.1);
        a.merge(&mut b);
        assert_eq!(b.count(), 0);
        let w = a.close_window(2, 0, 0).unwrap();
        assert_eq!(w.auc, Some(1.0));
        assert!((w.logloss - (-(0.9f64).ln())).abs() < 1e-12);
    }

    #[test]
    fn trigger_examples() {
        let d = should_downgrade(&with_tail(&[0.31, 0.50, 0.29, 0.30, 0.28]), &cfg(5));
        assert!(!d.trigger, "{}", d.reason);
        assert!((d.baseline.unwrap() - 0.30).abs() < 1e-12);
        assert!(should_downgrade(&with_tail(&[0.40; 5]), &cfg(5)).trigger);

        let outlier = with_tail(&[0.30, 0.30, 0.30, 0.30, 0.50]);
        assert!(!should_downgrade(&outlier, &cfg(5)).trigger);
        let mut l = vec![0.30; 24];
        l.push(0.50);
        assert!(should_downgrade(&hist(&l), &cfg(1)).trigger);
    }

    #[test]
    fn warming_up() {
        let d = should_downgrade(&hist(&[0.9; 24]), &cfg(5));
        assert!(!d.trigger);
        assert_eq!(d.reason, "warming-up");
        let fixed = TriggerConfig {
            baseline: Baseline::Fixed { value: 0.3 },
            ..cfg(5)
        };
        assert!(should_downgrade(&hist(&[0.4; 5]), &fixed).trigger);
    }

    #[test]
    fn selection_examples() {
        let latest = VersionStrategy::default();
        let c = |v: u64, l: &[f64]| {
            let mut h = hist(l);
            h.iter_mut().for_each(|s| s.version = v);
            (v, h)
        };
        let cands = vec![c(3, &[]), c(5, &[]), c(7, &[])];
        assert_eq!(select_version(&cands, Some(7), latest).unwrap(), 5);

        let best = VersionStrategy {
            kind: StrategyKind::BestMetric,
            metric: MetricKind::Logloss,
        };
        assert_eq!(select_version(&[c(3, &[0.30]), c(5, &[0.35])], None, best).unwrap(), 3);
        assert_eq!(select_version(&[c(3, &[0.30]), c(5, &[0.30])], None, best).unwrap(), 5);
        assert!(matches!(
            select_version(&[c(3, &[0.3])], Some(3), latest),
            Err(Error::DowngradeAborted(_))
        ));
    }

    #[test]
    fn plan_finds_onset_before_smoothing_window() {
        let mut h = with_tail(&[0.31, 0.45, 0.44, 0.46, 0.45, 0.47, 0.44]);
        for (i, s) in h.iter_mut().enumerate() {
            s.version = (i as u64) / 5 + 1;
        }
        let plan = plan_downgrade(&h, &cfg(5), &[1, 2, 3, 4, 5], VersionStrategy::default())
            .unwrap()
            .unwrap();
        assert_eq!(plan.onset_window, 21);
        assert_eq!(plan.degraded_version, 5);
        assert_eq!(plan.target_version, 4);
    }
}
