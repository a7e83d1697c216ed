//! Multi-modal tokens: scaled interarrival ‖ one-hot event type ‖ one-hot stop flag.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::trace::{interarrivals, DeviceType, Event, Generation, Stream, TraceDataset};

/// Interarrival scaling parameters; `scaler_min`/`scaler_max` live in the
/// `ln(1 + t)` domain.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TokenizerConfig {
    pub generation: Generation,
    pub scaler_min: f64,
    pub scaler_max: f64,
}

impl TokenizerConfig {
    pub fn vocab_size(&self) -> usize {
        self.generation.vocab_size()
    }

    pub fn d_token(&self) -> usize {
        1 + self.vocab_size() + 2
    }

    fn degenerate(&self) -> bool {
        !(self.scaler_max > self.scaler_min)
    }

    /// Maps seconds to `[0, 1]`; values past the fitted range clamp.
    pub fn scale(&self, t: f64) -> f64 {
        if self.degenerate() {
            return 0.0;
        }
        ((t.max(0.0).ln_1p() - self.scaler_min) / (self.scaler_max - self.scaler_min)).clamp(0.0, 1.0)
    }

    pub fn unscale(&self, x: f64) -> f64 {
        if self.degenerate() {
            return self.scaler_min.exp_m1();
        }
        let x = x.clamp(0.0, 1.0);
        (x * (self.scaler_max - self.scaler_min) + self.scaler_min).exp_m1().max(0.0)
    }

    /// True when `t` lies above the fitted range and would clamp.
    pub fn out_of_range(&self, t: f64) -> bool {
        t.ln_1p() > self.scaler_max
    }
}

/// Fits the log-domain bounds over every interarrival, leading zeros included.
pub fn fit_scaler(dataset: &TraceDataset) -> Result<TokenizerConfig> {
    if dataset.is_empty() {
        return Err(Error::Empty("cannot fit a scaler on an empty dataset"));
    }
    let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
    for s in dataset.streams() {
        for t in interarrivals(s) {
            let v = t.ln_1p();
            lo = lo.min(v);
            hi = hi.max(v);
        }
    }
    Ok(TokenizerConfig {
        generation: dataset.generation(),
        scaler_min: lo,
        scaler_max: hi,
    })
}

/// One token as `d_token` reals.
#[derive(Debug, Clone, PartialEq)]
pub struct Token(Vec<f64>);

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TokenFields {
    pub arrival: f64,
    pub event: usize,
    pub stop: bool,
}

impl Token {
    pub fn from_fields(fields: TokenFields, vocab_size: usize) -> Self {
        let mut v = vec![0.0; 1 + vocab_size + 2];
        v[0] = fields.arrival;
        v[1 + fields.event] = 1.0;
        v[1 + vocab_size + usize::from(fields.stop)] = 1.0;
        Token(v)
    }

    pub fn from_values(values: Vec<f64>) -> Self {
        Token(values)
    }

    pub fn values(&self) -> &[f64] {
        &self.0
    }

    /// Reads the three fields back, checking that both one-hot blocks are valid.
    pub fn fields(&self, vocab_size: usize, index: usize) -> Result<TokenFields> {
        let bad = |reason: String| Error::MalformedToken { index, reason };
        if self.0.len() != 1 + vocab_size + 2 {
            return Err(bad(format!("expected {} values, got {}", 1 + vocab_size + 2, self.0.len())));
        }
        let arrival = self.0[0];
        if !(0.0..=1.0).contains(&arrival) {
            return Err(bad(format!("scaled interarrival {arrival} outside [0,1]")));
        }
        let one_hot = |block: &[f64], name: &str| -> Result<usize> {
            let ones: Vec<usize> = block
                .iter()
                .enumerate()
                .filter(|(_, v)| **v == 1.0)
                .map(|(i, _)| i)
                .collect();
            let zeros = block.iter().filter(|v| **v == 0.0).count();
            if ones.len() != 1 || zeros != block.len() - 1 {
                return Err(bad(format!("{name} block is not one-hot: {block:?}")));
            }
            Ok(ones[0])
        };
        let event = one_hot(&self.0[1..1 + vocab_size], "event")?;
        let stop = one_hot(&self.0[1 + vocab_size..], "stop")? == 1;
        Ok(TokenFields { arrival, event, stop })
    }
}

/// Field view of a stream, scaled but not yet expanded into token vectors.
pub fn stream_fields(stream: &Stream, cfg: &TokenizerConfig) -> Result<Vec<TokenFields>> {
    let last = stream.len() - 1;
    interarrivals(stream)
        .into_iter()
        .zip(stream.events())
        .enumerate()
        .map(|(k, (t, ev))| {
            let event = cfg.generation.index_of(ev.event_type).ok_or_else(|| Error::UnknownEventType {
                token: ev.event_type.to_string(),
                generation: cfg.generation.to_string(),
            })?;
            Ok(TokenFields {
                arrival: if k == 0 { 0.0 } else { cfg.scale(t) },
                event,
                stop: k == last,
            })
        })
        .collect()
}

/// Encodes a training stream. Length-1 streams carry no next-token target and
/// are rejected.
pub fn encode_stream(stream: &Stream, cfg: &TokenizerConfig) -> Result<Vec<Token>> {
    if stream.len() < 2 {
        return Err(Error::InvalidStream {
            ue_id: stream.ue_id().to_string(),
            reason: "streams of length 1 are excluded from training".into(),
        });
    }
    let v = cfg.vocab_size();
    Ok(stream_fields(stream, cfg)?
        .into_iter()
        .map(|f| Token::from_fields(f, v))
        .collect())
}

/// Rebuilds a stream; timestamps are `start_time` plus the cumulative sum of
/// unscaled interarrivals (the first token's interarrival is ignored).
pub fn decode_stream(
    tokens: &[Token],
    cfg: &TokenizerConfig,
    start_time: f64,
    ue_id: impl Into<String>,
    device_type: DeviceType,
) -> Result<Stream> {
    let vocab = cfg.generation.vocabulary();
    let mut t = start_time;
    let mut events = Vec::with_capacity(tokens.len());
    for (k, tok) in tokens.iter().enumerate() {
        let f = tok.fields(vocab.len(), k)?;
        if k > 0 {
            t += cfg.unscale(f.arrival);
        }
        events.push(Event::new(t, vocab[f.event]));
    }
    Stream::new(ue_id, device_type, events)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::trace::EventType;
    use proptest::prelude::*;
    use std::f64::consts::E;

    fn stream(events: &[(f64, EventType)]) -> Stream {
        Stream::new(
            "u",
            DeviceType::Phone,
            events.iter().map(|(t, e)| Event::new(*t, *e)).collect(),
        )
        .unwrap()
    }

    fn ds(streams: Vec<Stream>) -> TraceDataset {
        TraceDataset::new(Generation::Lte, streams).unwrap()
    }

    #[test]
    fn scaler_bounds_in_log_domain() {
        let cfg = fit_scaler(&ds(vec![stream(&[(0.0, EventType::SrvReq), (E - 1.0, EventType::S1ConnRel)])])).unwrap();
        assert_eq!(cfg.scaler_min, 0.0);
        assert!((cfg.scaler_max - 1.0).abs() < 1e-12);
        assert_eq!(cfg.d_token(), 9);

        let flat = ds(vec![stream(&[(0.0, EventType::SrvReq), (0.0, EventType::S1ConnRel)])]);
        let cfg = fit_scaler(&flat).unwrap();
        assert_eq!((cfg.scaler_min, cfg.scaler_max), (0.0, 0.0));
        assert_eq!(cfg.scale(5.0), 0.0);
        assert_eq!(cfg.unscale(0.7), 0.0);
        assert_eq!(fit_scaler(&flat).unwrap(), cfg);
    }

    #[test]
    fn scale_boundaries() {
        let cfg = TokenizerConfig {
            generation: Generation::Lte,
            scaler_min: 0.0,
            scaler_max: 1000f64.ln_1p(),
        };
        assert_eq!(cfg.scale(0.0), 0.0);
        assert_eq!(cfg.scale(1000.0), 1.0);
        assert_eq!(cfg.scale(1e9), 1.0);
        assert!(cfg.out_of_range(1e9));
        assert!(!cfg.out_of_range(1000.0));
    }

    #[test]
    fn encode_sets_first_and_last_fields() {
        let s = stream(&[(0.0, EventType::SrvReq), (3.5, EventType::S1ConnRel)]);
        let cfg = fit_scaler(&ds(vec![s.clone()])).unwrap();
        let toks = encode_stream(&s, &cfg).unwrap();
        assert_eq!(toks.len(), 2);
        let f0 = toks[0].fields(6, 0).unwrap();
        let f1 = toks[1].fields(6, 1).unwrap();
        assert_eq!((f0.arrival, f0.stop, f0.event), (0.0, false, 2));
        assert_eq!((f1.arrival, f1.stop, f1.event), (1.0, true, 3));
        assert_eq!(toks[0].values().len(), 9);
    }

    #[test]
    fn length_one_streams_are_rejected() {
        let s = stream(&[(0.0, EventType::SrvReq)]);
        let cfg = fit_scaler(&ds(vec![s.clone()])).unwrap();
        assert!(encode_stream(&s, &cfg).is_err());
    }

    #[test]
    fn decode_rejects_bad_one_hot() {
        let cfg = TokenizerConfig {
            generation: Generation::Lte,
            scaler_min: 0.0,
            scaler_max: 1.0,
        };
        let good = Token::from_fields(TokenFields { arrival: 0.0, event: 0, stop: false }, 6);
        let mut v = good.values().to_vec();
        v[2] = 1.0;
        let err = decode_stream(&[good, Token::from_values(v)], &cfg, 0.0, "x", DeviceType::Phone).unwrap_err();
        match err {
            Error::MalformedToken { index, .. } => assert_eq!(index, 1),
            other => panic!("unexpected {other:?}"),
        }
    }

    proptest! {
        #[test]
        fn scale_round_trip_and_monotone(a in 0.0f64..5000.0, b in 0.0f64..5000.0) {
            let cfg = TokenizerConfig { generation: Generation::Lte, scaler_min: 0.0, scaler_max: 5000f64.ln_1p() };
            let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
            prop_assert!(cfg.scale(lo) <= cfg.scale(hi));
            if hi > 0.0 {
                let back = cfg.unscale(cfg.scale(hi));
                prop_assert!(((back - hi) / hi).abs() < 1e-9, "{} -> {}", hi, back);
            }
        }

        #[test]
        fn decode_inverts_encode(
            kinds in prop::collection::vec(0usize..6, 2..30),
            gaps in prop::collection::vec(0.001f64..3000.0, 30),
        ) {
            let vocab = Generation::Lte.vocabulary();
            let mut t = 0.0;
            let ev: Vec<Event> = kinds.iter().enumerate().map(|(i, k)| {
                if i > 0 { t += gaps[i]; }
                Event::new(t, vocab[*k])
            }).collect();
            let s = Stream::new("u", DeviceType::Phone, ev).unwrap();
            let cfg = fit_scaler(&ds(vec![s.clone()])).unwrap();
            let toks = encode_stream(&s, &cfg).unwrap();
            for (k, tok) in toks.iter().enumerate() {
                let v = tok.values();
                let ev_sum: f64 = v[1..7].iter().sum();
                let stop_sum: f64 = v[7..9].iter().sum();
                prop_assert_eq!(ev_sum, 1.0);
                prop_assert_eq!(stop_sum, 1.0);
                prop_assert!(tok.fields(6, k).is_ok());
            }
            let back = decode_stream(&toks, &cfg, 0.0, "u", DeviceType::Phone).unwrap();
            prop_assert!(back.event_types().eq(s.event_types()));
            for (x, y) in back.events().iter().zip(s.events()) {
                prop_assert!((x.timestamp - y.timestamp).abs() <= 1e-8 * y.timestamp.max(1.0));
            }
        }
    }
}
