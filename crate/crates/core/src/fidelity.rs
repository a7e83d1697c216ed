//! Distribution distances, violation rates, type breakdowns and the n-gram
//! memorization audit between a reference and a synthesized dataset.

use std::collections::{BTreeMap, HashMap};
use std::fmt::Write as _;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::state_machine::{replay, validate_dataset, StateMachineDef, TopLevel};
use crate::trace::{interarrivals, EventType, TraceDataset};

/// Two-sample Kolmogorov–Smirnov statistic, evaluated exactly at every
/// merged sample point.
pub fn max_y_distance(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::Empty("max y-distance needs two non-empty samples"));
    }
    if a.iter().chain(b).any(|v| v.is_nan()) {
        return Err(Error::Invariant("NaN in distance sample".into()));
    }
    let mut a = a.to_vec();
    let mut b = b.to_vec();
    a.sort_by(f64::total_cmp);
    b.sort_by(f64::total_cmp);
    let (na, nb) = (a.len() as f64, b.len() as f64);
    let (mut i, mut j) = (0, 0);
    let mut d: f64 = 0.0;
    while i < a.len() || j < b.len() {
        let x = match (a.get(i), b.get(j)) {
            (Some(x), Some(y)) => x.min(*y),
            (Some(x), None) => *x,
            (None, Some(y)) => *y,
            (None, None) => unreachable!(),
        };
        while i < a.len() && a[i] <= x {
            i += 1;
        }
        while j < b.len() && b[j] <= x {
            j += 1;
        }
        d = d.max((i as f64 / na - j as f64 / nb).abs());
    }
    Ok(d)
}

/// Per-UE mean sojourn time in `top`; UEs without a completed sojourn there
/// are left out.
pub fn per_ue_average_sojourns(ds: &TraceDataset, def: &StateMachineDef, top: TopLevel) -> Vec<f64> {
    ds.streams()
        .par_iter()
        .filter_map(|s| {
            let r = replay(s, def);
            let v = r.sojourns.get(top);
            (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
        })
        .collect()
}

/// Distance per top-level state; `None` when either side has no sojourns.
pub fn sojourn_distance(
    real: &TraceDataset,
    synth: &TraceDataset,
    def: &StateMachineDef,
) -> Result<BTreeMap<TopLevel, Option<f64>>> {
    if real.is_empty() || synth.is_empty() {
        return Err(Error::Empty("sojourn distance needs non-empty datasets"));
    }
    [TopLevel::Connected, TopLevel::Idle]
        .into_iter()
        .map(|top| {
            let a = per_ue_average_sojourns(real, def, top);
            let b = per_ue_average_sojourns(synth, def, top);
            let d = if a.is_empty() || b.is_empty() {
                None
            } else {
                Some(max_y_distance(&a, &b)?)
            };
            Ok((top, d))
        })
        .collect()
}

fn counts(ds: &TraceDataset, ev: Option<EventType>) -> Vec<f64> {
    ds.streams()
        .iter()
        .map(|s| match ev {
            None => s.len() as f64,
            Some(e) => s.count_of(e) as f64,
        })
        .collect()
}

/// Flow-length distances keyed `"all"`, `"SRV_REQ"` and the generation's
/// release event.
pub fn flow_length_distance(real: &TraceDataset, synth: &TraceDataset) -> Result<BTreeMap<String, f64>> {
    if real.is_empty() || synth.is_empty() {
        return Err(Error::Empty("flow-length distance needs non-empty datasets"));
    }
    let rel = real.generation().release_event();
    let mut out = BTreeMap::new();
    out.insert("all".to_string(), max_y_distance(&counts(real, None), &counts(synth, None))?);
    for e in [EventType::SrvReq, rel] {
        out.insert(e.to_string(), max_y_distance(&counts(real, Some(e)), &counts(synth, Some(e)))?);
    }
    Ok(out)
}

fn shares(ds: &TraceDataset) -> Vec<f64> {
    let vocab = ds.generation().vocabulary();
    let mut c = vec![0usize; vocab.len()];
    for s in ds.streams() {
        for e in s.event_types() {
            c[ds.generation().index_of(e).expect("dataset vocabulary checked")] += 1;
        }
    }
    let total = ds.total_events() as f64;
    c.into_iter().map(|v| v as f64 / total).collect()
}

/// `synth share − real share` for every event type of the vocabulary.
pub fn breakdown_diff(real: &TraceDataset, synth: &TraceDataset) -> Result<BTreeMap<EventType, f64>> {
    if real.total_events() == 0 || synth.total_events() == 0 {
        return Err(Error::Empty("breakdown needs non-empty datasets"));
    }
    if real.generation() != synth.generation() {
        return Err(Error::Config("breakdown across generations".into()));
    }
    let (r, s) = (shares(real), shares(synth));
    Ok(real
        .generation()
        .vocabulary()
        .iter()
        .enumerate()
        .map(|(i, e)| (*e, s[i] - r[i]))
        .collect())
}

/// Real n-grams bucketed by event-type sequence; each bucket is sorted by the
/// first interarrival.
struct GramIndex {
    n: usize,
    buckets: HashMap<Vec<EventType>, Vec<f64>>,
}

impl GramIndex {
    fn build(real: &TraceDataset, n: usize) -> Self {
        let mut raw: HashMap<Vec<EventType>, Vec<Vec<f64>>> = HashMap::new();
        for s in real.streams() {
            let types: Vec<EventType> = s.event_types().collect();
            let ia = interarrivals(s);
            for start in 0..s.len().saturating_sub(n - 1) {
                raw.entry(types[start..start + n].to_vec())
                    .or_default()
                    .push(ia[start..start + n].to_vec());
            }
        }
        let buckets = raw
            .into_iter()
            .map(|(k, mut grams)| {
                grams.sort_by(|a, b| a[0].total_cmp(&b[0]));
                (k, grams.concat())
            })
            .collect();
        GramIndex { n, buckets }
    }

    fn within(t: f64, r: f64, eps: f64) -> bool {
        if r == 0.0 {
            return t == 0.0;
        }
        let q = t / r;
        (1.0 - eps) < q && q < 1.0 + eps
    }

    fn contains(&self, types: &[EventType], ia: &[f64], eps: f64) -> bool {
        let Some(flat) = self.buckets.get(types) else {
            return false;
        };
        let n = self.n;
        let count = flat.len() / n;
        let first = |i: usize| flat[i * n];
        let t0 = ia[0];
        // Candidate range for the first interarrival.
        let (lo, hi) = if t0 == 0.0 {
            (0.0, 0.0)
        } else {
            (t0 / (1.0 + eps), t0 / (1.0 - eps))
        };
        let start = partition(count, |i| first(i) < lo);
        let end = partition(count, |i| first(i) <= hi);
        (start..end).any(|i| {
            let g = &flat[i * n..(i + 1) * n];
            g.iter().zip(ia).all(|(r, t)| Self::within(*t, *r, eps))
        })
    }
}

/// First index in `0..n` for which `pred` is false (`pred` must be monotone).
fn partition(n: usize, pred: impl Fn(usize) -> bool) -> usize {
    let (mut lo, mut hi) = (0, n);
    while lo < hi {
        let mid = (lo + hi) / 2;
        if pred(mid) {
            lo = mid + 1;
        } else {
            hi = mid;
        }
    }
    lo
}

/// Fraction of synthesized length-`n` windows that repeat a real window: same
/// event types and every interarrival ratio inside `(1 − ε, 1 + ε)`.
pub fn memorization(real: &TraceDataset, synth: &TraceDataset, n: usize, eps: f64) -> Result<f64> {
    if n == 0 {
        return Err(Error::Config("n-gram length must be at least 1".into()));
    }
    if !(eps > 0.0 && eps < 1.0) {
        return Err(Error::Config(format!("tolerance {eps} must lie in (0, 1)")));
    }
    let index = GramIndex::build(real, n);
    let (hits, total) = synth
        .streams()
        .par_iter()
        .map(|s| {
            let types: Vec<EventType> = s.event_types().collect();
            let ia = interarrivals(s);
            let windows = s.len().saturating_sub(n - 1);
            let hits = (0..windows)
                .filter(|&k| index.contains(&types[k..k + n], &ia[k..k + n], eps))
                .count();
            (hits, windows)
        })
        .reduce(|| (0, 0), |a, b| (a.0 + b.0, a.1 + b.1));
    if total == 0 {
        return Err(Error::Empty("synthesized dataset has no n-grams of this length"));
    }
    Ok(hits as f64 / total as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MemoParams {
    pub n: usize,
    pub epsilon: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MemorizationEntry {
    pub n: usize,
    pub epsilon: f64,
    pub repeated_fraction: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FidelityReport {
    pub event_violation_rate: f64,
    pub stream_violation_rate: f64,
    /// `null` marks a state with no sojourns on one side.
    pub sojourn_ks: BTreeMap<TopLevel, Option<f64>>,
    pub flow_length_ks: BTreeMap<String, f64>,
    pub breakdown_diff: BTreeMap<EventType, f64>,
    pub memorization: Vec<MemorizationEntry>,
}

impl FidelityReport {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn to_table(&self) -> String {
        let pct = |v: f64| format!("{:8.3}%", 100.0 * v);
        let mut s = String::new();
        let _ = writeln!(s, "{:<32}{}", "event violation rate", pct(self.event_violation_rate));
        let _ = writeln!(s, "{:<32}{}", "stream violation rate", pct(self.stream_violation_rate));
        for (k, v) in &self.sojourn_ks {
            let cell = v.map_or_else(|| format!("{:>9}", "n/a"), pct);
            let _ = writeln!(s, "{:<32}{cell}", format!("sojourn KS {k}"));
        }
        for (k, v) in &self.flow_length_ks {
            let _ = writeln!(s, "{:<32}{}", format!("flow length KS {k}"), pct(*v));
        }
        for (k, v) in &self.breakdown_diff {
            let _ = writeln!(s, "{:<32}{:+8.3}%", format!("breakdown diff {k}"), 100.0 * v);
        }
        for m in &self.memorization {
            let _ = writeln!(
                s,
                "{:<32}{}",
                format!("memorization n={} eps={}", m.n, m.epsilon),
                pct(m.repeated_fraction)
            );
        }
        s
    }
}

pub fn full_report(
    real: &TraceDataset,
    synth: &TraceDataset,
    def: &StateMachineDef,
    memo: &[MemoParams],
) -> Result<FidelityReport> {
    if real.generation() != synth.generation() || def.generation() != real.generation() {
        return Err(Error::Config("real, synthesized and state machine generations differ".into()));
    }
    let v = validate_dataset(synth, def).map_err(|e| e.in_metric("violations"))?;
    Ok(FidelityReport {
        event_violation_rate: v.event_violation_rate,
        stream_violation_rate: v.stream_violation_rate,
        sojourn_ks: sojourn_distance(real, synth, def).map_err(|e| e.in_metric("sojourn_ks"))?,
        flow_length_ks: flow_length_distance(real, synth).map_err(|e| e.in_metric("flow_length_ks"))?,
        breakdown_diff: breakdown_diff(real, synth).map_err(|e| e.in_metric("breakdown_diff"))?,
        memorization: memo
            .iter()
            .map(|m| {
                Ok(MemorizationEntry {
                    n: m.n,
                    epsilon: m.epsilon,
                    repeated_fraction: memorization(real, synth, m.n, m.epsilon).map_err(|e| e.in_metric("memorization"))?,
                })
            })
            .collect::<Result<_>>()?,
    })
}
