//! Two-level hierarchical UE state machines and trace replay.

use std::collections::BTreeMap;
use std::fmt::{self, Write as _};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::trace::{EventType, Generation, Stream, TraceDataset};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum TopLevel {
    #[serde(rename = "DEREGISTERED")]
    Deregistered,
    #[serde(rename = "CONNECTED")]
    Connected,
    #[serde(rename = "IDLE")]
    Idle,
}

impl TopLevel {
    pub fn as_str(self) -> &'static str {
        match self {
            TopLevel::Deregistered => "DEREGISTERED",
            TopLevel::Connected => "CONNECTED",
            TopLevel::Idle => "IDLE",
        }
    }
}

impl fmt::Display for TopLevel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// A UE state: the top-level state plus, for CONNECTED and IDLE, its sub-state.
/// Each variant is a leaf of the hierarchy, so a sub-state can never be
/// attached to the wrong top-level state.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum UeState {
    #[serde(rename = "DEREGISTERED")]
    Deregistered,
    #[serde(rename = "SRV_REQ_S")]
    SrvReqS,
    #[serde(rename = "HO_S")]
    HoS,
    #[serde(rename = "TAU_S_CONN")]
    TauSConn,
    #[serde(rename = "S1_REL_S_1")]
    S1RelS1,
    #[serde(rename = "S1_REL_S_2")]
    S1RelS2,
    #[serde(rename = "TAU_S_IDLE")]
    TauSIdle,
    #[serde(rename = "AN_REL_S")]
    AnRelS,
}

impl UeState {
    pub fn top_level(self) -> TopLevel {
        use UeState::*;
        match self {
            Deregistered => TopLevel::Deregistered,
            SrvReqS | HoS | TauSConn => TopLevel::Connected,
            S1RelS1 | S1RelS2 | TauSIdle | AnRelS => TopLevel::Idle,
        }
    }

    pub fn sub_state(self) -> Option<&'static str> {
        match self {
            UeState::Deregistered => None,
            other => Some(other.name()),
        }
    }

    pub fn name(self) -> &'static str {
        use UeState::*;
        match self {
            Deregistered => "DEREGISTERED",
            SrvReqS => "SRV_REQ_S",
            HoS => "HO_S",
            TauSConn => "TAU_S_CONN",
            S1RelS1 => "S1_REL_S_1",
            S1RelS2 => "S1_REL_S_2",
            TauSIdle => "TAU_S_IDLE",
            AnRelS => "AN_REL_S",
        }
    }

    /// Label used in violation breakdowns: both S1 release sub-states report as
    /// `S1_REL_S` and every CONNECTED sub-state as `CONNECTED`.
    pub fn report_label(self) -> &'static str {
        use UeState::*;
        match self {
            S1RelS1 | S1RelS2 => "S1_REL_S",
            SrvReqS | HoS | TauSConn => "CONNECTED",
            other => other.name(),
        }
    }
}

impl fmt::Display for UeState {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.top_level() {
            TopLevel::Deregistered => f.write_str("DEREGISTERED"),
            top => write!(f, "{top}/{}", self.name()),
        }
    }
}

/// Transition table of one generation. A missing `(state, event)` key is a
/// semantic violation.
#[derive(Debug, Clone)]
pub struct StateMachineDef {
    generation: Generation,
    states: &'static [UeState],
    table: BTreeMap<(UeState, EventType), UeState>,
}

pub fn build_state_machine(generation: Generation) -> StateMachineDef {
    use EventType::*;
    use UeState::*;

    let mut table = BTreeMap::new();
    let states: &'static [UeState] = match generation {
        Generation::Lte => {
            let connected = [SrvReqS, HoS, TauSConn];
            let idle = [S1RelS1, S1RelS2, TauSIdle];
            table.insert((Deregistered, Atch), SrvReqS);
            for s in connected {
                table.insert((s, S1ConnRel), S1RelS1);
                table.insert((s, Dtch), Deregistered);
                table.insert((s, Ho), HoS);
                table.insert((s, Tau), TauSConn);
            }
            for s in idle {
                table.insert((s, SrvReq), SrvReqS);
                table.insert((s, Dtch), Deregistered);
                table.insert((s, Tau), TauSIdle);
            }
            // The signaling connection opened by an idle-mode TAU is released again.
            table.insert((TauSIdle, S1ConnRel), S1RelS2);
            &[Deregistered, SrvReqS, HoS, TauSConn, S1RelS1, S1RelS2, TauSIdle]
        }
        Generation::Nr => {
            table.insert((Deregistered, Register), SrvReqS);
            for s in [SrvReqS, HoS] {
                table.insert((s, AnRel), AnRelS);
                table.insert((s, Deregister), Deregistered);
                table.insert((s, Ho), HoS);
            }
            table.insert((AnRelS, SrvReq), SrvReqS);
            table.insert((AnRelS, Deregister), Deregistered);
            &[Deregistered, SrvReqS, HoS, AnRelS]
        }
    };
    StateMachineDef {
        generation,
        states,
        table,
    }
}

impl StateMachineDef {
    pub fn generation(&self) -> Generation {
        self.generation
    }

    pub fn states(&self) -> &'static [UeState] {
        self.states
    }

    pub fn next(&self, state: UeState, event: EventType) -> Option<UeState> {
        self.table.get(&(state, event)).copied()
    }

    /// Legal `(event, destination)` pairs leaving `state`, in vocabulary order.
    pub fn edges_from(&self, state: UeState) -> Vec<(EventType, UeState)> {
        self.generation
            .vocabulary()
            .iter()
            .filter_map(|e| self.next(state, *e).map(|d| (*e, d)))
            .collect()
    }

    pub fn transitions(&self) -> impl Iterator<Item = ((UeState, EventType), UeState)> + '_ {
        self.table.iter().map(|(k, v)| (*k, *v))
    }

    /// Destination of an event whose target state does not depend on the source.
    pub fn bootstrap_target(&self, event: EventType) -> Option<UeState> {
        use EventType::*;
        match (self.generation, event) {
            (Generation::Lte, Atch) | (Generation::Nr, Register) => Some(UeState::SrvReqS),
            (Generation::Lte, Dtch) | (Generation::Nr, Deregister) => Some(UeState::Deregistered),
            (_, SrvReq) => Some(UeState::SrvReqS),
            (_, Ho) => Some(UeState::HoS),
            _ => None,
        }
    }

    /// Text dump of the full table, one `state, event -> state|VIOLATION` row each.
    pub fn report(&self) -> String {
        let mut out = String::new();
        for s in self.states {
            for e in self.generation.vocabulary() {
                let dest = self
                    .next(*s, *e)
                    .map(|d| d.to_string())
                    .unwrap_or_else(|| "VIOLATION".to_string());
                let _ = writeln!(out, "{s}, {e} -> {dest}");
            }
        }
        out
    }
}

/// Finds the first event whose destination state is source-independent.
pub fn bootstrap_state(stream: &Stream, def: &StateMachineDef) -> Option<(UeState, usize)> {
    stream
        .event_types()
        .enumerate()
        .find_map(|(i, e)| def.bootstrap_target(e).map(|s| (s, i)))
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Sojourns {
    pub connected: Vec<f64>,
    pub idle: Vec<f64>,
}

impl Sojourns {
    pub fn get(&self, top: TopLevel) -> &[f64] {
        match top {
            TopLevel::Connected => &self.connected,
            TopLevel::Idle => &self.idle,
            TopLevel::Deregistered => &[],
        }
    }

    fn push(&mut self, top: TopLevel, d: f64) {
        match top {
            TopLevel::Connected => self.connected.push(d),
            TopLevel::Idle => self.idle.push(d),
            TopLevel::Deregistered => {}
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ReplayResult {
    pub bootstrap_index: Option<usize>,
    pub violating_event_count: usize,
    pub total_counted_events: usize,
    pub per_pair_violations: BTreeMap<(UeState, EventType), usize>,
    pub sojourns: Sojourns,
}

/// One step of a replay: the accepted transition, or `None` on a violation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ReplayStep {
    pub index: usize,
    pub from: UeState,
    pub event: EventType,
    pub to: Option<UeState>,
}

/// Walks a stream from its bootstrap event, calling `visit` for every counted
/// event. Returns the bootstrap state and index.
pub fn walk<F>(stream: &Stream, def: &StateMachineDef, mut visit: F) -> Option<(UeState, usize)>
where
    F: FnMut(ReplayStep),
{
    let (start, bi) = bootstrap_state(stream, def)?;
    let mut state = start;
    for (k, ev) in stream.events().iter().enumerate().skip(bi + 1) {
        let to = def.next(state, ev.event_type);
        visit(ReplayStep {
            index: k,
            from: state,
            event: ev.event_type,
            to,
        });
        if let Some(next) = to {
            state = next;
        }
    }
    Some((start, bi))
}

pub fn replay(stream: &Stream, def: &StateMachineDef) -> ReplayResult {
    let mut res = ReplayResult::default();
    let events = stream.events();

    let Some((_, bi)) = bootstrap_state(stream, def) else {
        return res;
    };
    res.bootstrap_index = Some(bi);
    res.total_counted_events = events.len() - bi - 1;

    // An HO bootstrap lands inside CONNECTED without entering it, so that
    // first interval is left-censored and not recorded.
    let mut entered_at = match events[bi].event_type {
        EventType::Ho => None,
        _ => Some(events[bi].timestamp),
    };
    walk(stream, def, |step| match step.to {
        None => {
            res.violating_event_count += 1;
            *res.per_pair_violations.entry((step.from, step.event)).or_default() += 1;
        }
        Some(to) => {
            let (a, b) = (step.from.top_level(), to.top_level());
            if a != b {
                let t = events[step.index].timestamp;
                if let Some(t0) = entered_at {
                    res.sojourns.push(a, t - t0);
                }
                entered_at = Some(t);
            }
        }
    });
    res
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ViolationSummary {
    pub event_violation_rate: f64,
    pub stream_violation_rate: f64,
    /// Counts keyed by `"<state label>,<event>"` using [`UeState::report_label`].
    pub per_pair: BTreeMap<String, usize>,
}

pub fn validate_dataset(dataset: &TraceDataset, def: &StateMachineDef) -> Result<ViolationSummary> {
    if dataset.is_empty() {
        return Err(Error::Empty("violation rates of an empty dataset"));
    }
    let mut violating = 0usize;
    let mut counted = 0usize;
    let mut bad_streams = 0usize;
    let mut per_pair = BTreeMap::new();
    for s in dataset.streams() {
        let r = replay(s, def);
        violating += r.violating_event_count;
        counted += r.total_counted_events;
        if r.violating_event_count > 0 {
            bad_streams += 1;
        }
        for ((st, ev), c) in r.per_pair_violations {
            *per_pair
                .entry(format!("{},{}", st.report_label(), ev))
                .or_default() += c;
        }
    }
    Ok(ViolationSummary {
        event_violation_rate: if counted == 0 {
            0.0
        } else {
            violating as f64 / counted as f64
        },
        stream_violation_rate: bad_streams as f64 / dataset.len() as f64,
        per_pair,
    })
}
