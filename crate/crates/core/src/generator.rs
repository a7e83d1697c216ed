//! Autoregressive stream synthesis from a checkpoint.

use rand_distr::{Distribution, Normal};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::model::network::{decode_step, Batch, KvCache};
use crate::model::{Checkpoint, Model};
use crate::rng::{derive_seed, random_ue_id, sample_weighted, seeded, SeededRng};
use crate::tokenizer::{TokenFields, TokenizerConfig};
use crate::trace::{DeviceType, Event, InitialEventDistribution, Stream, TraceDataset};

/// Streams decoded together in lockstep.
pub const LOCKSTEP_CHUNK: usize = 64;

/// Next-token distribution parameters for one sequence.
#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    pub event_logits: Vec<f64>,
    pub arrival_mean: f64,
    pub arrival_std: Option<f64>,
    pub stop_logits: [f64; 2],
}

/// Incremental next-token predictor over a set of independent sequences.
pub trait StepPredictor {
    fn max_context(&self) -> usize;

    /// Discards all state and opens `n` empty sequences.
    fn reset(&mut self, n: usize);

    /// Appends `tokens[r]` to sequence `active[r]` and predicts each one's next token.
    fn step(&mut self, active: &[usize], tokens: &[TokenFields]) -> Vec<Prediction>;
}

/// KV-cached decoder over a model's f32 weights.
pub struct ModelPredictor<'a> {
    model: &'a Model,
    caches: Vec<KvCache<f32>>,
}

impl<'a> ModelPredictor<'a> {
    pub fn new(model: &'a Model) -> Self {
        ModelPredictor {
            model,
            caches: Vec::new(),
        }
    }
}

impl StepPredictor for ModelPredictor<'_> {
    fn max_context(&self) -> usize {
        self.model.config().max_context
    }

    fn reset(&mut self, n: usize) {
        self.caches = (0..n).map(|_| KvCache::new(self.model.config())).collect();
    }

    fn step(&mut self, active: &[usize], tokens: &[TokenFields]) -> Vec<Prediction> {
        let m = self.model;
        let batch = Batch::<f32>::from_fields(&[tokens], m.config().vocab_size());
        let out = decode_step(m.config(), m.layout(), m.params(), &mut self.caches, active, &batch.x);
        (0..active.len())
            .map(|r| Prediction {
                event_logits: out.event_logits_at(r).iter().map(|v| f64::from(*v)).collect(),
                arrival_mean: f64::from(out.arrival_mean(r)),
                arrival_std: out.arrival_std(r).map(f64::from),
                stop_logits: {
                    let s = out.stop_logits_at(r);
                    [f64::from(s[0]), f64::from(s[1])]
                },
            })
            .collect()
    }
}

#[derive(Debug, Clone, Copy)]
pub struct SamplingConfig<'a> {
    pub tokenizer: &'a TokenizerConfig,
    pub initial: &'a InitialEventDistribution,
    pub device_type: DeviceType,
    /// Softmax temperature for the event and stop fields.
    pub temperature: f64,
}

fn sample_logits(rng: &mut SeededRng, logits: &[f64], temperature: f64) -> usize {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let w: Vec<f64> = logits.iter().map(|l| ((l - max) / temperature).exp()).collect();
    sample_weighted(rng, &w)
}

fn sample_arrival(rng: &mut SeededRng, p: &Prediction) -> f64 {
    let x = match p.arrival_std {
        Some(sigma) => Normal::new(p.arrival_mean, sigma)
            .map(|n| n.sample(rng))
            .unwrap_or(p.arrival_mean),
        None => p.arrival_mean,
    };
    if x.is_nan() {
        0.0
    } else {
        x.clamp(0.0, 1.0)
    }
}

struct Pending {
    rng: SeededRng,
    ue_id: String,
    tokens: Vec<TokenFields>,
    done: bool,
}

/// Generates one stream per seed, decoding all of them in lockstep.
pub fn generate_with<P: StepPredictor>(pred: &mut P, cfg: &SamplingConfig, seeds: &[u64]) -> Result<Vec<Stream>> {
    if !(cfg.temperature > 0.0) {
        return Err(Error::Config(format!("temperature must be positive, got {}", cfg.temperature)));
    }
    let tok = cfg.tokenizer;
    let vocab = tok.generation.vocabulary();
    let init_w = cfg.initial.weights(tok.generation);
    if init_w.iter().sum::<f64>() <= 0.0 {
        return Err(Error::Config("initial event distribution has no mass in this vocabulary".into()));
    }
    let max_len = pred.max_context();
    let mut st: Vec<Pending> = seeds
        .iter()
        .map(|s| {
            let mut rng = seeded(*s);
            let ue_id = random_ue_id(&mut rng);
            let event = sample_weighted(&mut rng, &init_w);
            Pending {
                rng,
                ue_id,
                tokens: vec![TokenFields {
                    arrival: 0.0,
                    event,
                    stop: false,
                }],
                done: max_len <= 1,
            }
        })
        .collect();

    pred.reset(st.len());
    let mut active: Vec<usize> = (0..st.len()).filter(|i| !st[*i].done).collect();
    let mut feed: Vec<TokenFields> = active.iter().map(|i| st[*i].tokens[0]).collect();
    while !active.is_empty() {
        let preds = pred.step(&active, &feed);
        for (i, p) in active.iter().zip(&preds) {
            let s = &mut st[*i];
            let event = sample_logits(&mut s.rng, &p.event_logits, cfg.temperature);
            let arrival = sample_arrival(&mut s.rng, p);
            let stop = sample_logits(&mut s.rng, &p.stop_logits, cfg.temperature) == 1;
            s.tokens.push(TokenFields { arrival, event, stop });
            s.done = stop || s.tokens.len() >= max_len;
        }
        active.retain(|i| !st[*i].done);
        feed = active.iter().map(|i| *st[*i].tokens.last().unwrap()).collect();
    }

    st.into_iter()
        .map(|s| {
            let mut t = 0.0;
            let events = s
                .tokens
                .iter()
                .enumerate()
                .map(|(k, f)| {
                    if k > 0 {
                        t += tok.unscale(f.arrival);
                    }
                    Event::new(t, vocab[f.event])
                })
                .collect();
            Stream::new(s.ue_id, cfg.device_type, events)
        })
        .collect()
}

fn sampling(ckpt: &Checkpoint, device_type: DeviceType, temperature: f64) -> SamplingConfig<'_> {
    SamplingConfig {
        tokenizer: &ckpt.tokenizer,
        initial: &ckpt.initial,
        device_type,
        temperature,
    }
}

pub fn generate_stream(ckpt: &Checkpoint, seed: u64) -> Result<Stream> {
    let mut pred = ModelPredictor::new(&ckpt.model);
    let mut out = generate_with(&mut pred, &sampling(ckpt, ckpt.device_type, 1.0), &[seed])?;
    Ok(out.pop().expect("one stream per seed"))
}

/// Stream `i` is seeded with `derive_seed(seed, i)`; chunks of
/// [`LOCKSTEP_CHUNK`] streams are decoded in parallel.
pub fn generate_dataset(ckpt: &Checkpoint, n_streams: usize, device_type: DeviceType, seed: u64) -> Result<TraceDataset> {
    generate_dataset_with(ckpt, n_streams, device_type, seed, 1.0)
}

pub fn generate_dataset_with(
    ckpt: &Checkpoint,
    n_streams: usize,
    device_type: DeviceType,
    seed: u64,
    temperature: f64,
) -> Result<TraceDataset> {
    if n_streams == 0 {
        return Err(Error::Config("n_streams must be at least 1".into()));
    }
    let cfg = sampling(ckpt, device_type, temperature);
    let seeds: Vec<u64> = (0..n_streams as u64).map(|i| derive_seed(seed, i)).collect();
    let chunks: Vec<Vec<Stream>> = seeds
        .par_chunks(LOCKSTEP_CHUNK)
        .map(|chunk| generate_with(&mut ModelPredictor::new(&ckpt.model), &cfg, chunk))
        .collect::<Result<_>>()?;
    TraceDataset::new(ckpt.tokenizer.generation, chunks.into_iter().flatten().collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::checkpoint::Checkpoint;
    use crate::model::{init_model, ModelConfig};
    use crate::model::network;
    use crate::trace::{EventType, Generation};

    struct Stub {
        stop: bool,
        max_context: usize,
    }

    impl StepPredictor for Stub {
        fn max_context(&self) -> usize {
            self.max_context
        }
        fn reset(&mut self, _n: usize) {}
        fn step(&mut self, active: &[usize], _tokens: &[TokenFields]) -> Vec<Prediction> {
            let s = if self.stop { [-50.0, 50.0] } else { [50.0, -50.0] };
            active
                .iter()
                .map(|_| Prediction {
                    event_logits: vec![0.0; 6],
                    arrival_mean: 0.5,
                    arrival_std: Some(2.0),
                    stop_logits: s,
                })
                .collect()
        }
    }

    fn tok() -> TokenizerConfig {
        TokenizerConfig {
            generation: Generation::Lte,
            scaler_min: 0.0,
            scaler_max: 6.0,
        }
    }

    fn init() -> InitialEventDistribution {
        InitialEventDistribution::new([(EventType::SrvReq, 0.6), (EventType::Atch, 0.1), (EventType::Ho, 0.3)].into())
            .unwrap()
    }

    #[test]
    fn always_stop_ends_after_first_generated_token() {
        let (t, i) = (tok(), init());
        let cfg = SamplingConfig {
            tokenizer: &t,
            initial: &i,
            device_type: DeviceType::Phone,
            temperature: 1.0,
        };
        let out = generate_with(&mut Stub { stop: true, max_context: 500 }, &cfg, &[1, 2, 3]).unwrap();
        assert!(out.iter().all(|s| s.len() == 2));
    }

    #[test]
    fn never_stop_runs_to_max_context() {
        let (t, i) = (tok(), init());
        let cfg = SamplingConfig {
            tokenizer: &t,
            initial: &i,
            device_type: DeviceType::Phone,
            temperature: 1.0,
        };
        let out = generate_with(&mut Stub { stop: false, max_context: 500 }, &cfg, &[7, 8]).unwrap();
        assert!(out.iter().all(|s| s.len() == 500));
        // Wide sigma forces clamping; timestamps stay monotone and finite.
        for s in &out {
            assert!(s.events().windows(2).all(|w| w[0].timestamp <= w[1].timestamp));
            assert!(s.events().last().unwrap().timestamp <= 499.0 * 6f64.exp());
        }
    }

    fn small_ckpt() -> Checkpoint {
        let cfg = ModelConfig {
            d_model: 16,
            n_blocks: 2,
            mlp_hidden: 32,
            n_heads: 2,
            max_context: 30,
            head_hidden: 8,
            ..ModelConfig::default()
        };
        Checkpoint::new(init_model(&cfg, 9).unwrap(), tok(), init(), DeviceType::Tablet).unwrap()
    }

    #[test]
    fn same_seed_same_stream() {
        let c = small_ckpt();
        let a = generate_stream(&c, 42).unwrap();
        let b = generate_stream(&c, 42).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.ue_id().len(), 32);
        assert!(a.len() >= 2 && a.len() <= 30);
    }

    #[test]
    fn dataset_bounds_and_unique_ids() {
        let c = small_ckpt();
        let ds = generate_dataset(&c, 150, DeviceType::Phone, 3).unwrap();
        assert_eq!(ds.len(), 150);
        assert!(ds.streams().iter().all(|s| (1..=30).contains(&s.len())));
        let ids: std::collections::BTreeSet<_> = ds.streams().iter().map(|s| s.ue_id()).collect();
        assert_eq!(ids.len(), 150);
        assert_eq!(ds, generate_dataset(&c, 150, DeviceType::Phone, 3).unwrap());
    }

    #[test]
    fn lockstep_matches_single_stream_decoding() {
        let c = small_ckpt();
        let ds = generate_dataset(&c, 70, DeviceType::Tablet, 11).unwrap();
        for i in [0usize, 5, 63, 64, 69] {
            let s = generate_stream(&c, derive_seed(11, i as u64)).unwrap();
            assert_eq!(s.event_types().collect::<Vec<_>>(), ds.streams()[i].event_types().collect::<Vec<_>>());
            for (a, b) in s.events().iter().zip(ds.streams()[i].events()) {
                assert!((a.timestamp - b.timestamp).abs() <= 1e-6 * a.timestamp.max(1.0));
            }
        }
    }

    #[test]
    fn first_event_follows_initial_distribution() {
        let c = small_ckpt();
        let n = 20_000;
        let mut counts = [0usize; 6];
        let (t, i) = (tok(), init());
        let cfg = SamplingConfig {
            tokenizer: &t,
            initial: &i,
            device_type: DeviceType::Phone,
            temperature: 1.0,
        };
        let seeds: Vec<u64> = (0..n).map(|k| derive_seed(5, k)).collect();
        for s in generate_with(&mut Stub { stop: true, max_context: 4 }, &cfg, &seeds).unwrap() {
            counts[Generation::Lte.index_of(s.events()[0].event_type).unwrap()] += 1;
        }
        for (k, e) in Generation::Lte.vocabulary().iter().enumerate() {
            let p = counts[k] as f64 / n as f64;
            assert!((p - c.initial.probability(*e)).abs() < 0.01, "{e}: {p}");
        }
    }

    #[test]
    fn incremental_decoding_matches_full_forward() {
        let c = small_ckpt();
        let m = &c.model;
        let toks: Vec<TokenFields> = (0..12)
            .map(|k| TokenFields { arrival: (k as f64 * 0.37) % 1.0, event: k % 6, stop: false })
            .collect();
        let p64: Vec<f64> = m.params().iter().map(|v| f64::from(*v)).collect();
        let full = network::forward(m.config(), m.layout(), &p64, &Batch::<f64>::from_fields(&[&toks], 6)).0;
        let mut caches = vec![KvCache::<f64>::new(m.config())];
        for (k, t) in toks.iter().enumerate() {
            let x = Batch::<f64>::from_fields(&[[*t]], 6).x;
            let o = decode_step(m.config(), m.layout(), &p64, &mut caches, &[0], &x);
            for (a, b) in o.event_logits.iter().zip(full.event_logits_at(k)) {
                assert!((a - b).abs() < 1e-12);
            }
            assert!((o.arrival[1] - full.arrival[k * 2 + 1]).abs() < 1e-12);
        }
    }
}
