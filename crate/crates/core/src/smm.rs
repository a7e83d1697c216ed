//! Semi-Markov baseline generator: one model per device type, fit on a trace
//! or authored by hand, sampled by random walk on the transition table.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::Path;

use rand::Rng;
use rand_distr::{Distribution, Exp, LogNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::ecdf::EmpiricalCdf;
use crate::error::{Error, Result};
use crate::rng::{derive_seed, random_ue_id, sample_weighted, seeded};
use crate::state_machine::{bootstrap_state, walk, StateMachineDef, UeState};
use crate::trace::{DeviceType, Event, EventType, Generation, Stream, TraceDataset};

pub const SMM_FORMAT: &str = "ctlplane-smm";
pub const SMM_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SmmEdge {
    pub event: EventType,
    pub dest: UeState,
    pub probability: f64,
    /// Sorted sojourn samples (seconds spent in the source state before `event`).
    pub sojourn: EmpiricalCdf,
    /// True when no sample was observed for this edge and the state's pooled
    /// samples were substituted.
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub imputed: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InitialEntry {
    pub event: EventType,
    pub state: UeState,
    pub probability: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SemiMarkovModel {
    pub format: String,
    pub version: u32,
    pub generation: Generation,
    pub device_type: DeviceType,
    /// Distribution over bootstrap events and the states they lead to.
    pub initial: Vec<InitialEntry>,
    pub states: BTreeMap<UeState, Vec<SmmEdge>>,
    /// Per-event geometric termination probability.
    pub stop_probability: f64,
    /// Streams also end at the first event past this many seconds.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub capture_window: Option<f64>,
    /// States with no observed exits that were given a uniform distribution.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub uniform_fallback: Vec<UeState>,
}

impl SemiMarkovModel {
    /// Checks the model against `def`: edges exist, categoricals sum to one,
    /// sojourn samples are non-negative.
    pub fn validate(&self, def: &StateMachineDef) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.format != SMM_FORMAT || self.version != SMM_VERSION {
            return bad(format!(
                "unsupported model format {} v{} (expected {SMM_FORMAT} v{SMM_VERSION})",
                self.format, self.version
            ));
        }
        if self.generation != def.generation() {
            return bad(format!(
                "model is {} but state machine is {}",
                self.generation,
                def.generation()
            ));
        }
        if !(0.0..=1.0).contains(&self.stop_probability) {
            return bad(format!("stop_probability {} outside [0,1]", self.stop_probability));
        }
        let sum: f64 = self.initial.iter().map(|e| e.probability).sum();
        if self.initial.is_empty() || (sum - 1.0).abs() > 1e-9 {
            return bad(format!("initial distribution sums to {sum}"));
        }
        for e in &self.initial {
            if def.bootstrap_target(e.event) != Some(e.state) {
                return bad(format!("initial entry {} does not lead to {}", e.event, e.state));
            }
        }
        for (s, edges) in &self.states {
            if edges.is_empty() {
                continue;
            }
            let sum: f64 = edges.iter().map(|e| e.probability).sum();
            if (sum - 1.0).abs() > 1e-9 || edges.iter().any(|e| e.probability < 0.0) {
                return bad(format!("transition probabilities of {s} sum to {sum}"));
            }
            for e in edges {
                if def.next(*s, e.event) != Some(e.dest) {
                    return bad(format!("{s} --{}--> {} is not a legal transition", e.event, e.dest));
                }
                if e.probability > 0.0 && e.sojourn.is_empty() {
                    return bad(format!("{s} --{}--> has no sojourn samples", e.event));
                }
                if e.sojourn.samples().iter().any(|x| !x.is_finite() || *x < 0.0) {
                    return bad(format!("{s} --{}--> has a negative sojourn sample", e.event));
                }
            }
        }
        Ok(())
    }

    pub fn probability(&self, state: UeState, event: EventType) -> f64 {
        self.states
            .get(&state)
            .and_then(|edges| edges.iter().find(|e| e.event == event))
            .map_or(0.0, |e| e.probability)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let text = serde_json::to_string_pretty(self)?;
        fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    /// Human-readable table of the transition probabilities and sojourn medians.
    pub fn summary(&self) -> String {
        use std::fmt::Write as _;
        let mut out = format!(
            "SMM {} {} stop_p={:.4}{}\n",
            self.generation,
            self.device_type,
            self.stop_probability,
            self.capture_window
                .map(|w| format!(" window={w}s"))
                .unwrap_or_default()
        );
        for e in &self.initial {
            let _ = writeln!(out, "  init {:<12} -> {:<24} p={:.4}", e.event, e.state, e.probability);
        }
        for (s, edges) in &self.states {
            for e in edges {
                let median = e.sojourn.quantile(0.5).unwrap_or(f64::NAN);
                let _ = writeln!(
                    out,
                    "  {:<24} {:<12} -> {:<24} p={:.4} n={} median={:.3}s{}{}",
                    s.to_string(),
                    e.event,
                    e.dest.to_string(),
                    e.probability,
                    e.sojourn.len(),
                    median,
                    if e.imputed { " (imputed)" } else { "" },
                    if self.uniform_fallback.contains(s) { " (uniform)" } else { "" },
                );
            }
        }
        out
    }
}

/// Fits transition probabilities, per-edge sojourn samples, the bootstrap
/// distribution and the stop probability. Violating events are skipped.
pub fn fit_smm(dataset: &TraceDataset, def: &StateMachineDef) -> Result<SemiMarkovModel> {
    if dataset.is_empty() {
        return Err(Error::Empty("cannot fit a semi-Markov model on an empty dataset"));
    }
    if dataset.generation() != def.generation() {
        return Err(Error::Config("dataset and state machine generations differ".into()));
    }

    let mut counts: BTreeMap<(UeState, EventType), usize> = BTreeMap::new();
    let mut samples: BTreeMap<(UeState, EventType), Vec<f64>> = BTreeMap::new();
    let mut initial: BTreeMap<(EventType, UeState), usize> = BTreeMap::new();
    let mut devices: BTreeMap<DeviceType, usize> = BTreeMap::new();

    for s in dataset.streams() {
        *devices.entry(s.device_type()).or_default() += 1;
        let ev = s.events();
        let Some((state, bi)) = bootstrap_state(s, def) else {
            continue;
        };
        *initial.entry((ev[bi].event_type, state)).or_default() += 1;
        let mut last_t = ev[bi].timestamp;
        walk(s, def, |step| {
            if step.to.is_some() {
                let t = ev[step.index].timestamp;
                let key = (step.from, step.event);
                *counts.entry(key).or_default() += 1;
                samples.entry(key).or_default().push(t - last_t);
                last_t = t;
            }
        });
    }

    let initial_total: usize = initial.values().sum();
    if initial_total == 0 {
        return Err(Error::Empty("no stream contains a bootstrap event"));
    }
    let initial = initial
        .into_iter()
        .map(|((event, state), c)| InitialEntry {
            event,
            state,
            probability: c as f64 / initial_total as f64,
        })
        .collect();

    let all_samples: Vec<f64> = samples.values().flatten().copied().collect();
    let mut states = BTreeMap::new();
    let mut uniform_fallback = Vec::new();
    for &state in def.states() {
        let legal = def.edges_from(state);
        let total: usize = legal.iter().map(|(e, _)| counts.get(&(state, *e)).copied().unwrap_or(0)).sum();
        let pooled: Vec<f64> = legal
            .iter()
            .filter_map(|(e, _)| samples.get(&(state, *e)))
            .flatten()
            .copied()
            .collect();
        if total == 0 {
            uniform_fallback.push(state);
        }
        let edges = legal
            .iter()
            .map(|(event, dest)| {
                let c = counts.get(&(state, *event)).copied().unwrap_or(0);
                let own = samples.get(&(state, *event)).cloned().unwrap_or_default();
                let imputed = own.is_empty();
                let sojourn = if !imputed {
                    own
                } else if !pooled.is_empty() {
                    pooled.clone()
                } else if !all_samples.is_empty() {
                    all_samples.clone()
                } else {
                    vec![0.0]
                };
                SmmEdge {
                    event: *event,
                    dest: *dest,
                    probability: if total == 0 {
                        1.0 / legal.len() as f64
                    } else {
                        c as f64 / total as f64
                    },
                    sojourn: EmpiricalCdf::new(sojourn),
                    imputed,
                }
            })
            .collect();
        states.insert(state, edges);
    }
    if !uniform_fallback.is_empty() {
        log::warn!("states without observed exits use uniform transitions: {uniform_fallback:?}");
    }

    let device_type = devices
        .into_iter()
        .max_by_key(|(_, c)| *c)
        .map(|(d, _)| d)
        .unwrap_or(DeviceType::Phone);
    let mean_len = dataset.mean_flow_length().unwrap_or(1.0);

    Ok(SemiMarkovModel {
        format: SMM_FORMAT.into(),
        version: SMM_VERSION,
        generation: dataset.generation(),
        device_type,
        initial,
        states,
        stop_probability: (1.0 / mean_len).min(1.0),
        capture_window: None,
        uniform_fallback,
    })
}

/// Random walk for stream `index`; its RNG depends only on `(seed, index)`.
pub fn generate_smm_stream(model: &SemiMarkovModel, max_len: usize, seed: u64, index: u64) -> Stream {
    let mut rng = seeded(derive_seed(seed, index));
    let ue_id = random_ue_id(&mut rng);
    let weights: Vec<f64> = model.initial.iter().map(|e| e.probability).collect();
    let init = &model.initial[sample_weighted(&mut rng, &weights)];
    let mut state = init.state;
    let mut t = 0.0;
    let mut events = vec![Event::new(0.0, init.event)];
    while events.len() < max_len {
        if model.stop_probability > 0.0 && rng.random::<f64>() < model.stop_probability {
            break;
        }
        let Some(edges) = model.states.get(&state).filter(|e| !e.is_empty()) else {
            break;
        };
        let w: Vec<f64> = edges.iter().map(|e| e.probability).collect();
        let edge = &edges[sample_weighted(&mut rng, &w)];
        let dwell = edge.sojourn.quantile(rng.random::<f64>()).unwrap_or(0.0);
        t += dwell;
        if model.capture_window.is_some_and(|w| t > w) {
            break;
        }
        events.push(Event::new(t, edge.event));
        state = edge.dest;
    }
    Stream::new(ue_id, model.device_type, events).expect("walks produce ordered, non-empty streams")
}

pub fn generate_smm(model: &SemiMarkovModel, n_streams: usize, max_len: usize, seed: u64) -> Result<TraceDataset> {
    if max_len == 0 {
        return Err(Error::Config("max_len must be at least 1".into()));
    }
    if model.initial.is_empty() {
        return Err(Error::Config("model has no initial distribution".into()));
    }
    let streams = (0..n_streams as u64)
        .into_par_iter()
        .map(|i| generate_smm_stream(model, max_len, seed, i))
        .collect();
    TraceDataset::new(model.generation, streams)
}

/// Sojourn law of one hand-authored edge.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase", deny_unknown_fields)]
pub enum SojournSpec {
    Constant(f64),
    Exponential { mean: f64 },
    LogNormal { median: f64, sigma: f64 },
    Samples(Vec<f64>),
}

impl SojournSpec {
    fn materialize<R: Rng>(&self, n: usize, rng: &mut R) -> Result<Vec<f64>> {
        let v = match self {
            SojournSpec::Constant(c) => vec![*c],
            SojournSpec::Exponential { mean } => {
                let d = Exp::new(1.0 / mean)
                    .map_err(|e| Error::Config(format!("exponential mean {mean}: {e}")))?;
                (0..n).map(|_| d.sample(rng)).collect()
            }
            SojournSpec::LogNormal { median, sigma } => {
                let d = LogNormal::new(median.ln(), *sigma)
                    .map_err(|e| Error::Config(format!("lognormal({median}, {sigma}): {e}")))?;
                (0..n).map(|_| d.sample(rng)).collect()
            }
            SojournSpec::Samples(s) => s.clone(),
        };
        if v.is_empty() || v.iter().any(|x| !x.is_finite() || *x < 0.0) {
            return Err(Error::Config("sojourn samples must be finite and non-negative".into()));
        }
        Ok(v)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TransitionSpec {
    pub from: UeState,
    pub event: EventType,
    pub weight: f64,
    pub sojourn: SojournSpec,
}

/// Hand-authored semi-Markov model; parametric sojourn laws are expanded into
/// sample sets when materialized.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SmmSpec {
    pub generation: Generation,
    pub device_type: DeviceType,
    /// Weights over bootstrap events.
    pub initial: BTreeMap<EventType, f64>,
    pub transitions: Vec<TransitionSpec>,
    #[serde(default)]
    pub stop_probability: f64,
    #[serde(default)]
    pub capture_window: Option<f64>,
    #[serde(default = "default_samples_per_edge")]
    pub samples_per_edge: usize,
}

fn default_samples_per_edge() -> usize {
    4096
}

impl SmmSpec {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }

    pub fn materialize(&self, def: &StateMachineDef, seed: u64) -> Result<SemiMarkovModel> {
        if def.generation() != self.generation {
            return Err(Error::Config("spec and state machine generations differ".into()));
        }
        let mut rng = seeded(seed);

        let total: f64 = self.initial.values().sum();
        if !(total > 0.0) || self.initial.values().any(|w| *w < 0.0) {
            return Err(Error::Config("initial weights must be non-negative with a positive sum".into()));
        }
        let mut initial = Vec::new();
        for (event, w) in &self.initial {
            let state = def.bootstrap_target(*event).ok_or_else(|| {
                Error::Config(format!("{event} cannot start a stream (not a bootstrap event)"))
            })?;
            if *w > 0.0 {
                initial.push(InitialEntry {
                    event: *event,
                    state,
                    probability: w / total,
                });
            }
        }

        let mut by_state: BTreeMap<UeState, Vec<&TransitionSpec>> = BTreeMap::new();
        for t in &self.transitions {
            if def.next(t.from, t.event).is_none() {
                return Err(Error::Config(format!("{} --{}--> is not a legal transition", t.from, t.event)));
            }
            if !(t.weight >= 0.0) {
                return Err(Error::Config(format!("negative weight on {} --{}-->", t.from, t.event)));
            }
            by_state.entry(t.from).or_default().push(t);
        }

        let mut states = BTreeMap::new();
        for (state, ts) in &by_state {
            let total: f64 = ts.iter().map(|t| t.weight).sum();
            if !(total > 0.0) {
                continue;
            }
            let mut edges = Vec::new();
            for t in ts {
                edges.push(SmmEdge {
                    event: t.event,
                    dest: def.next(*state, t.event).expect("checked above"),
                    probability: t.weight / total,
                    sojourn: EmpiricalCdf::new(t.sojourn.materialize(self.samples_per_edge, &mut rng)?),
                    imputed: false,
                });
            }
            states.insert(*state, edges);
        }

        // Every state a walk can reach needs a way out.
        let mut seen = BTreeSet::new();
        let mut todo: Vec<UeState> = initial.iter().map(|e| e.state).collect();
        while let Some(s) = todo.pop() {
            if !seen.insert(s) {
                continue;
            }
            let edges = states
                .get(&s)
                .ok_or_else(|| Error::Config(format!("reachable state {s} has no outgoing transitions")))?;
            todo.extend(edges.iter().filter(|e| e.probability > 0.0).map(|e| e.dest));
        }

        let model = SemiMarkovModel {
            format: SMM_FORMAT.into(),
            version: SMM_VERSION,
            generation: self.generation,
            device_type: self.device_type,
            initial,
            states,
            stop_probability: self.stop_probability,
            capture_window: self.capture_window,
            uniform_fallback: Vec::new(),
        };
        model.validate(def)?;
        Ok(model)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::state_machine::{build_state_machine, validate_dataset};
    use crate::trace::interarrivals;
    use EventType::*;

    fn stream(events: &[(f64, EventType)]) -> Stream {
        Stream::new(
            "u",
            DeviceType::Phone,
            events.iter().map(|(t, e)| Event::new(*t, *e)).collect(),
        )
        .unwrap()
    }

    fn toy_spec() -> SmmSpec {
        serde_json::from_str(
            r#"{
              "generation": "4g",
              "device_type": "phone",
              "initial": {"SRV_REQ": 0.8, "ATCH": 0.2},
              "stop_probability": 0.05,
              "samples_per_edge": 500,
              "transitions": [
                {"from": "DEREGISTERED", "event": "ATCH", "weight": 1, "sojourn": {"exponential": {"mean": 60}}},
                {"from": "SRV_REQ_S", "event": "S1_CONN_REL", "weight": 0.7, "sojourn": {"lognormal": {"median": 10, "sigma": 0.5}}},
                {"from": "SRV_REQ_S", "event": "HO", "weight": 0.2, "sojourn": {"constant": 3}},
                {"from": "SRV_REQ_S", "event": "DTCH", "weight": 0.1, "sojourn": {"samples": [5, 6, 7]}},
                {"from": "HO_S", "event": "TAU", "weight": 1, "sojourn": {"constant": 1}},
                {"from": "TAU_S_CONN", "event": "S1_CONN_REL", "weight": 1, "sojourn": {"constant": 4}},
                {"from": "S1_REL_S_1", "event": "SRV_REQ", "weight": 0.9, "sojourn": {"lognormal": {"median": 40, "sigma": 1}}},
                {"from": "S1_REL_S_1", "event": "TAU", "weight": 0.1, "sojourn": {"constant": 100}},
                {"from": "TAU_S_IDLE", "event": "S1_CONN_REL", "weight": 1, "sojourn": {"constant": 2}},
                {"from": "S1_REL_S_2", "event": "SRV_REQ", "weight": 1, "sojourn": {"constant": 30}}
              ]
            }"#,
        )
        .unwrap()
    }

    #[test]
    fn fit_counts_transitions_out_of_connected() {
        let def = build_state_machine(Generation::Lte);
        let ds = TraceDataset::new(
            Generation::Lte,
            vec![
                stream(&[(0.0, SrvReq), (1.0, S1ConnRel)]),
                stream(&[(0.0, SrvReq), (1.0, S1ConnRel)]),
                stream(&[(0.0, SrvReq), (3.0, Ho)]),
            ],
        )
        .unwrap();
        let m = fit_smm(&ds, &def).unwrap();
        assert!((m.probability(UeState::SrvReqS, S1ConnRel) - 2.0 / 3.0).abs() < 1e-12);
        assert!((m.probability(UeState::SrvReqS, Ho) - 1.0 / 3.0).abs() < 1e-12);
        assert!((m.stop_probability - 0.5).abs() < 1e-12);
        m.validate(&def).unwrap();
        // Unobserved states fall back to uniform exits.
        assert!(m.uniform_fallback.contains(&UeState::Deregistered));
        assert_eq!(m.probability(UeState::Deregistered, Atch), 1.0);
    }

    #[test]
    fn single_transition_gets_all_mass() {
        let def = build_state_machine(Generation::Lte);
        let ds = TraceDataset::new(Generation::Lte, vec![stream(&[(0.0, SrvReq), (2.0, S1ConnRel)])]).unwrap();
        let m = fit_smm(&ds, &def).unwrap();
        assert_eq!(m.probability(UeState::SrvReqS, S1ConnRel), 1.0);
        assert_eq!(m.states[&UeState::SrvReqS].iter().find(|e| e.event == S1ConnRel).unwrap().sojourn.samples(), &[2.0]);
    }

    #[test]
    fn fitted_sojourn_ecdf_steps() {
        let def = build_state_machine(Generation::Lte);
        let ds = TraceDataset::new(
            Generation::Lte,
            vec![
                stream(&[(0.0, SrvReq), (1.0, S1ConnRel)]),
                stream(&[(0.0, SrvReq), (1.0, S1ConnRel)]),
                stream(&[(0.0, SrvReq), (3.0, S1ConnRel)]),
            ],
        )
        .unwrap();
        let m = fit_smm(&ds, &def).unwrap();
        let edge = m.states[&UeState::SrvReqS].iter().find(|e| e.event == S1ConnRel).unwrap();
        let steps = edge.sojourn.steps();
        assert_eq!(steps.len(), 2);
        assert_eq!(steps[0].0, 1.0);
        assert!((steps[0].1 - 2.0 / 3.0).abs() < 1e-12);
        assert_eq!(steps[1], (3.0, 1.0));
    }

    #[test]
    fn fit_skips_violations() {
        let def = build_state_machine(Generation::Lte);
        // The second S1_CONN_REL is illegal; the SRV_REQ dwell is measured from
        // the last accepted event.
        let ds = TraceDataset::new(
            Generation::Lte,
            vec![stream(&[(0.0, SrvReq), (1.0, S1ConnRel), (2.0, S1ConnRel), (5.0, SrvReq)])],
        )
        .unwrap();
        let m = fit_smm(&ds, &def).unwrap();
        let e = m.states[&UeState::S1RelS1].iter().find(|e| e.event == SrvReq).unwrap();
        assert_eq!(e.sojourn.samples(), &[4.0]);
        assert_eq!(e.probability, 1.0);
    }

    #[test]
    fn degenerate_cycle_is_deterministic() {
        let def = build_state_machine(Generation::Lte);
        let spec: SmmSpec = serde_json::from_str(
            r#"{
              "generation": "4g", "device_type": "phone",
              "initial": {"SRV_REQ": 1},
              "transitions": [
                {"from": "SRV_REQ_S", "event": "S1_CONN_REL", "weight": 1, "sojourn": {"constant": 2}},
                {"from": "S1_REL_S_1", "event": "SRV_REQ", "weight": 1, "sojourn": {"constant": 2}}
              ]
            }"#,
        )
        .unwrap();
        let m = spec.materialize(&def, 0).unwrap();
        let ds = generate_smm(&m, 3, 7, 11).unwrap();
        for s in ds.streams() {
            assert_eq!(s.len(), 7);
            assert_eq!(interarrivals(s), vec![0.0, 2.0, 2.0, 2.0, 2.0, 2.0, 2.0]);
            let kinds: Vec<_> = s.event_types().collect();
            assert_eq!(kinds[..3], [SrvReq, S1ConnRel, SrvReq]);
        }
    }

    #[test]
    fn generation_is_seeded_and_clean() {
        let def = build_state_machine(Generation::Lte);
        let m = toy_spec().materialize(&def, 5).unwrap();
        let a = generate_smm(&m, 200, 100, 42).unwrap();
        let b = generate_smm(&m, 200, 100, 42).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, generate_smm(&m, 200, 100, 43).unwrap());
        let v = validate_dataset(&a, &def).unwrap();
        assert_eq!(v.event_violation_rate, 0.0);
        assert_eq!(v.stream_violation_rate, 0.0);
        // Stream i does not depend on how many streams are requested.
        let c = generate_smm(&m, 10, 100, 42).unwrap();
        assert_eq!(c.streams(), &a.streams()[..10]);
    }

    #[test]
    fn sampled_sojourns_come_from_the_sample_set() {
        let def = build_state_machine(Generation::Lte);
        let m = toy_spec().materialize(&def, 5).unwrap();
        let ds = generate_smm(&m, 300, 50, 1).unwrap();
        let mut all: Vec<f64> = m.states.values().flatten().flat_map(|e| e.sojourn.samples().to_vec()).collect();
        all.sort_by(f64::total_cmp);
        for s in ds.streams() {
            for d in interarrivals(s).into_iter().skip(1) {
                // Differences of cumulative timestamps carry rounding error.
                let near = all.iter().any(|x| (x - d).abs() <= 1e-9 * x.abs().max(1.0));
                assert!(near, "{d} not a fitted sample");
            }
        }
    }

    #[test]
    fn capture_window_bounds_timestamps() {
        let def = build_state_machine(Generation::Lte);
        let mut spec = toy_spec();
        spec.capture_window = Some(120.0);
        spec.stop_probability = 0.0;
        let m = spec.materialize(&def, 5).unwrap();
        let ds = generate_smm(&m, 100, 500, 9).unwrap();
        assert!(ds.streams().iter().all(|s| s.events().last().unwrap().timestamp <= 120.0));
    }

    #[test]
    fn materialize_rejects_illegal_edges_and_dead_ends() {
        let def = build_state_machine(Generation::Lte);
        let mut spec = toy_spec();
        spec.transitions.push(TransitionSpec {
            from: UeState::S1RelS1,
            event: Ho,
            weight: 1.0,
            sojourn: SojournSpec::Constant(1.0),
        });
        assert!(spec.materialize(&def, 0).is_err());

        let mut spec = toy_spec();
        spec.transitions.retain(|t| t.from != UeState::TauSIdle);
        let err = spec.materialize(&def, 0).unwrap_err();
        assert!(err.to_string().contains("TAU_S_IDLE"), "{err}");

        let mut spec = toy_spec();
        spec.initial.insert(Tau, 1.0);
        assert!(spec.materialize(&def, 0).is_err());
    }

    #[test]
    fn model_json_round_trip() {
        let def = build_state_machine(Generation::Lte);
        let m = toy_spec().materialize(&def, 5).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.json");
        m.save(&p).unwrap();
        let back = SemiMarkovModel::load(&p).unwrap();
        assert_eq!(back, m);
        back.validate(&def).unwrap();
        assert!(m.summary().contains("S1_CONN_REL"));
    }

    #[test]
    fn refit_recovers_probabilities() {
        let def = build_state_machine(Generation::Lte);
        let m = toy_spec().materialize(&def, 5).unwrap();
        let ds = generate_smm(&m, 3000, 500, 77).unwrap();
        let refit = fit_smm(&ds, &def).unwrap();
        for (s, edges) in &m.states {
            for e in edges {
                let p = refit.probability(*s, e.event);
                assert!((p - e.probability).abs() < 0.03, "{s} {}: {p} vs {}", e.event, e.probability);
            }
        }
    }
}
