//! Presentation attack detection metrics: per-instrument APCER with
//! worst-case aggregation, BPCER, ACER and HTER.
//!
//! Rates are fractions in `[0, 1]`. Conversion to percent is left to callers.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::datamodel::{AttackType, Label};
use crate::scoring::{decide, ScoreRecord};
use crate::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub apcer_per_pai: BTreeMap<AttackType, f64>,
    pub apcer: f64,
    pub bpcer: f64,
    pub acer: f64,
    pub hter: Option<f64>,
    pub threshold: f64,
    /// Sample counts keyed by `"live"` and by every attack type.
    pub counts: BTreeMap<String, usize>,
}

/// Error counts at one threshold.
#[derive(Default)]
struct Tally {
    live: usize,
    live_rejected: usize,
    per_pai: BTreeMap<AttackType, (usize, usize)>,
}

impl Tally {
    fn spoof_total(&self) -> usize {
        self.per_pai.values().map(|(n, _)| n).sum()
    }

    fn spoof_accepted(&self) -> usize {
        self.per_pai.values().map(|(_, a)| a).sum()
    }
}

fn check_record(r: &ScoreRecord) -> Result<()> {
    match r.label {
        Label::Spoof if r.attack_type.is_live() => Err(Error::UnknownPai(format!(
            "spoof record {} carries the live tag",
            r.sample_id
        ))),
        Label::Live if !r.attack_type.is_live() => Err(Error::UnknownPai(format!(
            "live record {} carries attack tag {}",
            r.sample_id, r.attack_type
        ))),
        _ if !r.score.is_finite() => Err(Error::Config(format!(
            "record {} has non-finite score",
            r.sample_id
        ))),
        _ => Ok(()),
    }
}

fn tally(records: &[ScoreRecord], threshold: f64) -> Result<Tally> {
    let mut t = Tally::default();
    for r in records {
        check_record(r)?;
        let decided = decide(r.score, threshold);
        match r.label {
            Label::Live => {
                t.live += 1;
                if decided.is_spoof() {
                    t.live_rejected += 1;
                }
            }
            Label::Spoof => {
                let e = t.per_pai.entry(r.attack_type.clone()).or_default();
                e.0 += 1;
                if decided.is_live() {
                    e.1 += 1;
                }
            }
        }
    }
    if t.live == 0 {
        return Err(Error::MissingClass("no live records".into()));
    }
    if t.per_pai.is_empty() {
        return Err(Error::MissingClass("no spoof records".into()));
    }
    Ok(t)
}

fn rate(num: usize, den: usize) -> f64 {
    num as f64 / den as f64
}

pub fn compute_acer_report(records: &[ScoreRecord], threshold: f64) -> Result<MetricsReport> {
    let t = tally(records, threshold)?;
    let apcer_per_pai: BTreeMap<AttackType, f64> = t
        .per_pai
        .iter()
        .map(|(k, (n, a))| (k.clone(), rate(*a, *n)))
        .collect();
    let apcer = apcer_per_pai.values().copied().fold(0.0, f64::max);
    let bpcer = rate(t.live_rejected, t.live);
    let hter = (bpcer + rate(t.spoof_accepted(), t.spoof_total())) / 2.0;
    let mut counts = BTreeMap::new();
    counts.insert(AttackType::LIVE.to_string(), t.live);
    for (k, (n, _)) in &t.per_pai {
        counts.insert(k.to_string(), *n);
    }
    Ok(MetricsReport {
        apcer_per_pai,
        apcer,
        bpcer,
        acer: (apcer + bpcer) / 2.0,
        hter: Some(hter),
        threshold,
        counts,
    })
}

/// Mean of the false rejection rate (live decided spoof) and the false
/// acceptance rate (any attack decided live, instruments pooled).
pub fn compute_hter(records: &[ScoreRecord], threshold: f64) -> Result<f64> {
    let t = tally(records, threshold)?;
    Ok((rate(t.live_rejected, t.live) + rate(t.spoof_accepted(), t.spoof_total())) / 2.0)
}

/// Equal-error threshold on development records.
///
/// Candidates are the midpoints between adjacent distinct sorted scores; the
/// one minimising `|FRR - FAR|` wins, ties going to the lower threshold. When
/// every score is identical that score is returned.
pub fn select_threshold(dev_records: &[ScoreRecord]) -> Result<f64> {
    for r in dev_records {
        check_record(r)?;
    }
    let mut live: Vec<f64> = Vec::new();
    let mut spoof: Vec<f64> = Vec::new();
    for r in dev_records {
        match r.label {
            Label::Live => live.push(r.score),
            Label::Spoof => spoof.push(r.score),
        }
    }
    if live.is_empty() || spoof.is_empty() {
        return Err(Error::MissingClass(
            "threshold selection needs live and spoof records".into(),
        ));
    }
    live.sort_by(f64::total_cmp);
    spoof.sort_by(f64::total_cmp);
    let mut all: Vec<f64> = live.iter().chain(&spoof).copied().collect();
    all.sort_by(f64::total_cmp);
    all.dedup();
    if all.len() == 1 {
        return Ok(all[0]);
    }
    let (nl, ns) = (live.len() as i128, spoof.len() as i128);
    let mut best: Option<(i128, f64)> = None;
    for pair in all.windows(2) {
        let t = pair[0] + (pair[1] - pair[0]) / 2.0;
        // live rejected: score >= t; spoof accepted: score < t
        let rejected = (live.len() - live.partition_point(|s| *s < t)) as i128;
        let accepted = spoof.partition_point(|s| *s < t) as i128;
        let gap = (rejected * ns - accepted * nl).abs();
        if best.is_none_or(|(g, _)| gap < g) {
            best = Some((gap, t));
        }
    }
    Ok(best.expect("at least one candidate").1)
}

impl MetricsReport {
    /// Plain `key = value` document, one entry per line.
    pub fn to_key_value(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "threshold = {}", self.threshold);
        let _ = writeln!(s, "apcer = {}", self.apcer);
        let _ = writeln!(s, "bpcer = {}", self.bpcer);
        let _ = writeln!(s, "acer = {}", self.acer);
        if let Some(h) = self.hter {
            let _ = writeln!(s, "hter = {h}");
        }
        for (k, v) in &self.apcer_per_pai {
            let _ = writeln!(s, "apcer.{k} = {v}");
        }
        for (k, v) in &self.counts {
            let _ = writeln!(s, "count.{k} = {v}");
        }
        s
    }

    /// Writes the key-value document to `path` and, if given, JSON to `json_path`.
    pub fn write(&self, path: impl AsRef<Path>, json_path: Option<&Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_key_value()).map_err(|e| Error::io(path, e))?;
        if let Some(j) = json_path {
            let body = serde_json::to_string_pretty(self).expect("report serialises");
            fs::write(j, body).map_err(|e| Error::io(j, e))?;
        }
        Ok(())
    }
}
