//! Trace data types, JSONL trace I/O and per-dataset statistics.

use std::collections::BTreeMap;
use std::fmt;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Radio generation; fixes the event vocabulary.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Generation {
    #[serde(rename = "4g")]
    Lte,
    #[serde(rename = "5g")]
    Nr,
}

impl Generation {
    pub fn vocabulary(self) -> &'static [EventType] {
        use EventType::*;
        match self {
            Generation::Lte => &[Atch, Dtch, SrvReq, S1ConnRel, Ho, Tau],
            Generation::Nr => &[Register, Deregister, SrvReq, AnRel, Ho],
        }
    }

    pub fn vocab_size(self) -> usize {
        self.vocabulary().len()
    }

    /// Position of `event` in this generation's vocabulary.
    pub fn index_of(self, event: EventType) -> Option<usize> {
        self.vocabulary().iter().position(|e| *e == event)
    }

    /// The event that releases the signaling connection (CONNECTED -> IDLE).
    pub fn release_event(self) -> EventType {
        match self {
            Generation::Lte => EventType::S1ConnRel,
            Generation::Nr => EventType::AnRel,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Generation::Lte => "4g",
            Generation::Nr => "5g",
        }
    }
}

impl fmt::Display for Generation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Generation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "4g" | "lte" => Ok(Generation::Lte),
            "5g" | "nr" => Ok(Generation::Nr),
            other => Err(Error::Config(format!("unknown generation {other:?} (expected 4g or 5g)"))),
        }
    }
}

/// Control-plane event types of both generations. `SRV_REQ` and `HO` are shared.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum EventType {
    #[serde(rename = "ATCH")]
    Atch,
    #[serde(rename = "DTCH")]
    Dtch,
    #[serde(rename = "SRV_REQ")]
    SrvReq,
    #[serde(rename = "S1_CONN_REL")]
    S1ConnRel,
    #[serde(rename = "HO")]
    Ho,
    #[serde(rename = "TAU")]
    Tau,
    #[serde(rename = "REGISTER")]
    Register,
    #[serde(rename = "DEREGISTER")]
    Deregister,
    #[serde(rename = "AN_REL")]
    AnRel,
}

impl EventType {
    pub const ALL: [EventType; 9] = [
        EventType::Atch,
        EventType::Dtch,
        EventType::SrvReq,
        EventType::S1ConnRel,
        EventType::Ho,
        EventType::Tau,
        EventType::Register,
        EventType::Deregister,
        EventType::AnRel,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            EventType::Atch => "ATCH",
            EventType::Dtch => "DTCH",
            EventType::SrvReq => "SRV_REQ",
            EventType::S1ConnRel => "S1_CONN_REL",
            EventType::Ho => "HO",
            EventType::Tau => "TAU",
            EventType::Register => "REGISTER",
            EventType::Deregister => "DEREGISTER",
            EventType::AnRel => "AN_REL",
        }
    }

    /// Parses an event-type token, accepting only members of `generation`'s vocabulary.
    pub fn parse(token: &str, generation: Generation) -> Result<Self> {
        EventType::ALL
            .iter()
            .copied()
            .find(|e| e.as_str() == token && generation.index_of(*e).is_some())
            .ok_or_else(|| Error::UnknownEventType {
                token: token.to_string(),
                generation: generation.to_string(),
            })
    }
}

impl fmt::Display for EventType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DeviceType {
    Phone,
    ConnectedCar,
    Tablet,
}

impl DeviceType {
    pub fn as_str(self) -> &'static str {
        match self {
            DeviceType::Phone => "phone",
            DeviceType::ConnectedCar => "connected_car",
            DeviceType::Tablet => "tablet",
        }
    }
}

impl fmt::Display for DeviceType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for DeviceType {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "phone" => Ok(DeviceType::Phone),
            "connected_car" => Ok(DeviceType::ConnectedCar),
            "tablet" => Ok(DeviceType::Tablet),
            other => Err(Error::Config(format!("unknown device type {other:?}"))),
        }
    }
}

/// One control event; `timestamp` is seconds since the stream's epoch.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Event {
    pub timestamp: f64,
    pub event_type: EventType,
}

impl Event {
    pub fn new(timestamp: f64, event_type: EventType) -> Self {
        Self {
            timestamp,
            event_type,
        }
    }
}

/// Event sequence of a single UE. Non-empty, timestamps finite, non-negative
/// and non-decreasing.
#[derive(Debug, Clone, PartialEq)]
pub struct Stream {
    ue_id: String,
    device_type: DeviceType,
    events: Vec<Event>,
}

impl Stream {
    pub fn new(ue_id: impl Into<String>, device_type: DeviceType, events: Vec<Event>) -> Result<Self> {
        let ue_id = ue_id.into();
        if events.is_empty() {
            return Err(Error::InvalidStream {
                ue_id,
                reason: "stream has no events".into(),
            });
        }
        for (i, ev) in events.iter().enumerate() {
            if !ev.timestamp.is_finite() || ev.timestamp < 0.0 {
                return Err(Error::InvalidStream {
                    ue_id,
                    reason: format!("event {i} has invalid timestamp {}", ev.timestamp),
                });
            }
            if i > 0 && ev.timestamp < events[i - 1].timestamp {
                return Err(Error::Ordering {
                    ue_id,
                    index: i,
                    prev: events[i - 1].timestamp,
                    next: ev.timestamp,
                });
            }
        }
        Ok(Self {
            ue_id,
            device_type,
            events,
        })
    }

    pub fn ue_id(&self) -> &str {
        &self.ue_id
    }

    pub fn device_type(&self) -> DeviceType {
        self.device_type
    }

    pub fn events(&self) -> &[Event] {
        &self.events
    }

    pub fn len(&self) -> usize {
        self.events.len()
    }

    pub fn is_empty(&self) -> bool {
        self.events.is_empty()
    }

    pub fn event_types(&self) -> impl Iterator<Item = EventType> + '_ {
        self.events.iter().map(|e| e.event_type)
    }

    pub fn count_of(&self, event_type: EventType) -> usize {
        self.event_types().filter(|e| *e == event_type).count()
    }
}

/// Time since the previous event; the first entry is always zero.
pub fn interarrivals(stream: &Stream) -> Vec<f64> {
    let ev = stream.events();
    let mut out = Vec::with_capacity(ev.len());
    out.push(0.0);
    out.extend(ev.windows(2).map(|w| w[1].timestamp - w[0].timestamp));
    out
}

#[derive(Debug, Clone, PartialEq)]
pub struct TraceDataset {
    generation: Generation,
    streams: Vec<Stream>,
}

impl TraceDataset {
    pub fn new(generation: Generation, streams: Vec<Stream>) -> Result<Self> {
        for s in &streams {
            if let Some(e) = s.event_types().find(|e| generation.index_of(*e).is_none()) {
                return Err(Error::UnknownEventType {
                    token: e.to_string(),
                    generation: generation.to_string(),
                });
            }
        }
        Ok(Self { generation, streams })
    }

    pub fn empty(generation: Generation) -> Self {
        Self {
            generation,
            streams: Vec::new(),
        }
    }

    pub fn generation(&self) -> Generation {
        self.generation
    }

    pub fn streams(&self) -> &[Stream] {
        &self.streams
    }

    pub fn into_streams(self) -> Vec<Stream> {
        self.streams
    }

    pub fn len(&self) -> usize {
        self.streams.len()
    }

    pub fn is_empty(&self) -> bool {
        self.streams.is_empty()
    }

    pub fn total_events(&self) -> usize {
        self.streams.iter().map(Stream::len).sum()
    }

    pub fn mean_flow_length(&self) -> Option<f64> {
        if self.streams.is_empty() {
            None
        } else {
            Some(self.total_events() as f64 / self.streams.len() as f64)
        }
    }

    /// Splits off the last `n` streams (e.g. a validation split).
    pub fn split_tail(mut self, n: usize) -> (TraceDataset, TraceDataset) {
        let at = self.streams.len().saturating_sub(n);
        let tail = self.streams.split_off(at);
        let generation = self.generation;
        (self, TraceDataset { generation, streams: tail })
    }
}

/// Distribution of the first event type across the streams of a dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InitialEventDistribution(BTreeMap<EventType, f64>);

impl InitialEventDistribution {
    pub fn new(probs: BTreeMap<EventType, f64>) -> Result<Self> {
        if probs.values().any(|p| !p.is_finite() || *p < 0.0) {
            return Err(Error::Config("initial event probabilities must be non-negative".into()));
        }
        let total: f64 = probs.values().sum();
        if (total - 1.0).abs() > 1e-9 {
            return Err(Error::Config(format!(
                "initial event probabilities sum to {total}, expected 1"
            )));
        }
        Ok(Self(probs))
    }

    pub fn probability(&self, event_type: EventType) -> f64 {
        self.0.get(&event_type).copied().unwrap_or(0.0)
    }

    /// Probabilities in `generation`'s vocabulary order.
    pub fn weights(&self, generation: Generation) -> Vec<f64> {
        generation
            .vocabulary()
            .iter()
            .map(|e| self.probability(*e))
            .collect()
    }

    pub fn iter(&self) -> impl Iterator<Item = (EventType, f64)> + '_ {
        self.0.iter().map(|(e, p)| (*e, *p))
    }
}

pub fn initial_event_distribution(dataset: &TraceDataset) -> Result<InitialEventDistribution> {
    if dataset.is_empty() {
        return Err(Error::Empty("initial event distribution of an empty dataset"));
    }
    let mut counts: BTreeMap<EventType, usize> = BTreeMap::new();
    for s in dataset.streams() {
        *counts.entry(s.events()[0].event_type).or_default() += 1;
    }
    let n = dataset.len() as f64;
    let probs = counts.into_iter().map(|(e, c)| (e, c as f64 / n)).collect();
    Ok(InitialEventDistribution(probs))
}

#[derive(Serialize, Deserialize)]
struct StreamRecord<'a> {
    #[serde(borrow)]
    ue_id: std::borrow::Cow<'a, str>,
    device_type: DeviceType,
    events: Vec<(f64, std::borrow::Cow<'a, str>)>,
}

/// Parses one JSONL stream record. `line` is 1-based and used for diagnostics.
pub fn parse_stream_line(text: &str, line: usize, generation: Generation) -> Result<Stream> {
    let rec: StreamRecord = serde_json::from_str(text).map_err(|e| Error::Parse {
        line,
        message: e.to_string(),
    })?;
    let mut events = Vec::with_capacity(rec.events.len());
    for (t, name) in &rec.events {
        events.push(Event::new(*t, EventType::parse(name, generation)?));
    }
    Stream::new(rec.ue_id.into_owned(), rec.device_type, events).map_err(|e| match e {
        Error::InvalidStream { ue_id, reason } => Error::InvalidStream {
            ue_id,
            reason: format!("{reason} (line {line})"),
        },
        other => other,
    })
}

pub fn load_trace(path: impl AsRef<Path>, generation: Generation) -> Result<TraceDataset> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut streams = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        streams.push(parse_stream_line(&line, i + 1, generation)?);
    }
    Ok(TraceDataset { generation, streams })
}

pub fn write_trace<W: Write>(dataset: &TraceDataset, mut out: W) -> std::io::Result<()> {
    for s in dataset.streams() {
        let rec = StreamRecord {
            ue_id: s.ue_id().into(),
            device_type: s.device_type(),
            events: s
                .events()
                .iter()
                .map(|e| (e.timestamp, e.event_type.as_str().into()))
                .collect(),
        };
        serde_json::to_writer(&mut out, &rec)?;
        out.write_all(b"\n")?;
    }
    out.flush()
}

pub fn save_trace(dataset: &TraceDataset, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    write_trace(dataset, BufWriter::new(file)).map_err(|e| Error::io(path, e))
}
