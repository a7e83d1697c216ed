use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use ctlplane_core::fidelity::{per_ue_average_sojourns, MemoParams};
use ctlplane_core::generator::generate_dataset_with;
use ctlplane_core::model::gradcheck::grad_check;
use ctlplane_core::model::select::select_checkpoint;
use ctlplane_core::rng::derive_seed;
use ctlplane_core::smm::{generate_smm, SemiMarkovModel, SmmSpec};
use ctlplane_core::state_machine::TopLevel;
use ctlplane_core::tokenizer::{fit_scaler, TokenFields};
use ctlplane_core::{
    build_state_machine, finetune, fit_smm, full_report, init_model, initial_event_distribution, load_trace,
    memorization, save_trace, train, Checkpoint, DeviceType, Generation, LossWeights, ModelConfig, TraceDataset,
};
use serde::Serialize;

mod config;

use config::RunConfig;

#[derive(Parser)]
#[command(name = "ctlplane", version, about = "Control-plane trace synthesis and fidelity evaluation")]
struct Cli {
    /// Seed for every stochastic step (default 0; for training, the config's seed).
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads (default: available cores). Results do not depend on it.
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Simulate ground-truth streams from a hand-authored spec or a fitted SMM.
    Simulate(SimulateArgs),
    /// Fit a semi-Markov model to a trace.
    FitSmm(FitSmmArgs),
    /// Train a model from scratch and write periodic checkpoints.
    Train(TrainArgs),
    /// Continue training a checkpoint on a new trace with a fresh optimizer.
    Finetune(FinetuneArgs),
    /// Synthesize streams from a checkpoint.
    Generate(GenerateArgs),
    /// Compute the fidelity report of a synthesized trace against a real one.
    Evaluate(EvaluateArgs),
    /// Run the n-gram memorization audit.
    Memcheck(MemcheckArgs),
    /// Compare analytic gradients with finite differences on a small model.
    Gradcheck(GradcheckArgs),
    /// Pick a checkpoint by rank-summing fidelity metrics on a validation trace.
    SelectCheckpoint(SelectArgs),
    /// Print the default run configuration as JSON.
    PrintConfig,
}

#[derive(Clone, Copy, ValueEnum)]
enum Format {
    Json,
    Table,
}

#[derive(Args)]
struct SimulateArgs {
    /// Hand-authored SMM spec (JSON).
    #[arg(long, conflicts_with = "smm", required_unless_present = "smm")]
    spec: Option<PathBuf>,
    /// Fitted SMM written by `fit-smm`.
    #[arg(long)]
    smm: Option<PathBuf>,
    /// Number of streams.
    #[arg(long)]
    n: usize,
    /// Maximum events per stream.
    #[arg(long, default_value_t = 500)]
    max_len: usize,
    /// Output trace (JSONL).
    #[arg(long)]
    out: PathBuf,
    /// Also write the materialized model here.
    #[arg(long)]
    model_out: Option<PathBuf>,
}

#[derive(Args)]
struct FitSmmArgs {
    #[arg(long)]
    trace: PathBuf,
    /// Generation of the trace.
    #[arg(long, default_value = "4g")]
    gen: Generation,
    /// Output model (JSON).
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct TrainOverrides {
    /// Run configuration (JSON with optional `model` and `train` sections).
    #[arg(long)]
    config: Option<PathBuf>,
    /// Epochs K.
    #[arg(long)]
    epochs: Option<usize>,
    /// Checkpoint interval N in epochs.
    #[arg(long = "ckpt-every")]
    ckpt_every: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    batch_size: Option<usize>,
}

impl TrainOverrides {
    fn resolve(&self, seed: Option<u64>) -> Result<RunConfig> {
        let mut cfg = RunConfig::load(self.config.as_deref())?;
        if let Some(v) = self.epochs {
            cfg.train.epochs = v;
        }
        if let Some(v) = self.ckpt_every {
            cfg.train.checkpoint_every = v;
        }
        if let Some(v) = self.lr {
            cfg.train.lr = v;
        }
        if let Some(v) = self.batch_size {
            cfg.train.batch_size = v;
        }
        if let Some(s) = seed {
            cfg.train.seed = s;
        }
        Ok(cfg)
    }
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    trace: PathBuf,
    #[arg(long, default_value = "4g")]
    gen: Generation,
    /// Output directory for checkpoints and the training history.
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    overrides: TrainOverrides,
}

#[derive(Args)]
struct FinetuneArgs {
    /// Starting checkpoint.
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    trace: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    overrides: TrainOverrides,
}

#[derive(Args)]
struct GenerateArgs {
    #[arg(long)]
    ckpt: PathBuf,
    /// Number of streams.
    #[arg(long)]
    n: usize,
    #[arg(long)]
    out: PathBuf,
    /// Device type tag (default: the checkpoint's).
    #[arg(long)]
    device_type: Option<DeviceType>,
    /// Softmax temperature for event and stop sampling.
    #[arg(long, default_value_t = 1.0)]
    temperature: f64,
}

#[derive(Args)]
struct EvaluateArgs {
    #[arg(long)]
    real: PathBuf,
    #[arg(long)]
    synth: PathBuf,
    #[arg(long, default_value = "4g")]
    gen: Generation,
    /// Memorization settings as `n:epsilon`; repeatable.
    #[arg(long = "memo", value_parser = parse_memo)]
    memo: Vec<MemoParams>,
    #[arg(long, value_enum, default_value = "json")]
    format: Format,
    /// Also write the JSON report here.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Write per-UE samples behind each CDF metric into this directory.
    #[arg(long)]
    samples_dir: Option<PathBuf>,
}

#[derive(Args)]
struct MemcheckArgs {
    #[arg(long)]
    real: PathBuf,
    #[arg(long)]
    synth: PathBuf,
    #[arg(long, default_value = "4g")]
    gen: Generation,
    /// n-gram length.
    #[arg(short, long, default_value_t = 20)]
    n: usize,
    /// Relative tolerance.
    #[arg(long, default_value_t = 0.1)]
    epsilon: f64,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct GradcheckArgs {
    #[arg(long, default_value_t = 16)]
    d_model: usize,
    #[arg(long, default_value_t = 1)]
    n_blocks: usize,
    #[arg(long, default_value_t = 2)]
    n_heads: usize,
    #[arg(long, default_value_t = 64)]
    mlp_hidden: usize,
    /// Tokens in the checked sequence.
    #[arg(long, default_value_t = 8)]
    seq_len: usize,
    /// Scalar interarrival head instead of mean and deviation.
    #[arg(long)]
    no_distribution_head: bool,
    /// Fail when the maximum relative error exceeds this.
    #[arg(long, default_value_t = 1e-4)]
    max_error: f64,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct SelectArgs {
    /// Candidate checkpoints.
    #[arg(long, num_args = 1.., required = true)]
    ckpts: Vec<PathBuf>,
    /// Validation trace.
    #[arg(long)]
    validation: PathBuf,
    /// Streams generated per checkpoint.
    #[arg(long, default_value_t = 1000)]
    n: usize,
    /// Copy the selected checkpoint here.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Write the per-checkpoint scores here.
    #[arg(long)]
    scores_out: Option<PathBuf>,
}

fn parse_memo(s: &str) -> Result<MemoParams, String> {
    let (n, e) = s.split_once(':').ok_or_else(|| format!("expected n:epsilon, got {s:?}"))?;
    Ok(MemoParams {
        n: n.parse().map_err(|e| format!("bad n in {s:?}: {e}"))?,
        epsilon: e.parse().map_err(|e| format!("bad epsilon in {s:?}: {e}"))?,
    })
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    fs::write(path, text + "\n").with_context(|| format!("writing {}", path.display()))
}

fn majority_device(ds: &TraceDataset) -> DeviceType {
    let mut counts = std::collections::BTreeMap::new();
    for s in ds.streams() {
        *counts.entry(s.device_type()).or_insert(0usize) += 1;
    }
    counts.into_iter().max_by_key(|(d, c)| (*c, std::cmp::Reverse(*d))).map_or(DeviceType::Phone, |(d, _)| d)
}

fn save_outcome(out: &Path, outcome: &ctlplane_core::TrainOutcome) -> Result<()> {
    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    for c in &outcome.checkpoints {
        let p = out.join(format!("ckpt_epoch{:04}.bin", c.epoch));
        c.save(&p)?;
        log::info!("wrote {}", p.display());
    }
    write_json(&out.join("history.json"), &outcome.history)
}

fn simulate(seed: u64, a: SimulateArgs) -> Result<()> {
    let model = match (&a.spec, &a.smm) {
        (Some(p), _) => {
            let spec = SmmSpec::load(p)?;
            spec.materialize(&build_state_machine(spec.generation), seed)?
        }
        (None, Some(p)) => {
            let m = SemiMarkovModel::load(p)?;
            m.validate(&build_state_machine(m.generation))?;
            m
        }
        (None, None) => bail!("pass --spec or --smm"),
    };
    let ds = generate_smm(&model, a.n, a.max_len, seed)?;
    save_trace(&ds, &a.out)?;
    if let Some(p) = &a.model_out {
        model.save(p)?;
    }
    log::info!("simulated {} streams, {} events", ds.len(), ds.total_events());
    Ok(())
}

fn run_train(seed: Option<u64>, a: TrainArgs) -> Result<()> {
    let cfg = a.overrides.resolve(seed)?;
    let ds = load_trace(&a.trace, a.gen)?;
    let tok = fit_scaler(&ds)?;
    let model_cfg = ModelConfig {
        d_token: tok.d_token(),
        ..cfg.model
    };
    let start = Checkpoint::new(
        init_model(&model_cfg, cfg.train.seed)?,
        tok,
        initial_event_distribution(&ds)?,
        majority_device(&ds),
    )?;
    log::info!("training {} parameters on {} streams", start.model.param_count(), ds.len());
    let outcome = train(&start, &ds, &cfg.train)?;
    save_outcome(&a.out, &outcome)
}

fn run_finetune(seed: Option<u64>, a: FinetuneArgs) -> Result<()> {
    let cfg = a.overrides.resolve(seed)?;
    let ckpt = Checkpoint::load(&a.ckpt)?;
    let ds = load_trace(&a.trace, ckpt.tokenizer.generation)?;
    let outcome = finetune(&ckpt, &ds, &cfg.train)?;
    save_outcome(&a.out, &outcome)
}

fn generate(seed: u64, a: GenerateArgs) -> Result<()> {
    let ckpt = Checkpoint::load(&a.ckpt)?;
    let device = a.device_type.unwrap_or(ckpt.device_type);
    let ds = generate_dataset_with(&ckpt, a.n, device, seed, a.temperature)?;
    save_trace(&ds, &a.out)?;
    log::info!("generated {} streams, {} events", ds.len(), ds.total_events());
    Ok(())
}

#[derive(Serialize)]
struct CdfSamples {
    metric: String,
    real: Vec<f64>,
    synth: Vec<f64>,
}

fn evaluate(a: EvaluateArgs) -> Result<()> {
    let real = load_trace(&a.real, a.gen)?;
    let synth = load_trace(&a.synth, a.gen)?;
    let def = build_state_machine(a.gen);
    let report = full_report(&real, &synth, &def, &a.memo)?;
    if let Some(p) = &a.out {
        write_json(p, &report)?;
    }
    if let Some(dir) = &a.samples_dir {
        fs::create_dir_all(dir)?;
        for top in [TopLevel::Connected, TopLevel::Idle] {
            let s = CdfSamples {
                metric: format!("average sojourn {top}"),
                real: per_ue_average_sojourns(&real, &def, top),
                synth: per_ue_average_sojourns(&synth, &def, top),
            };
            write_json(&dir.join(format!("sojourn_{}.json", top.as_str().to_lowercase())), &s)?;
        }
        let lens = |d: &TraceDataset| d.streams().iter().map(|s| s.len() as f64).collect();
        let s = CdfSamples {
            metric: "flow length".into(),
            real: lens(&real),
            synth: lens(&synth),
        };
        write_json(&dir.join("flow_length.json"), &s)?;
    }
    match a.format {
        Format::Json => println!("{}", report.to_json()?),
        Format::Table => print!("{}", report.to_table()),
    }
    Ok(())
}

#[derive(Serialize)]
struct MemcheckReport {
    n: usize,
    epsilon: f64,
    repeated_fraction: f64,
}

fn memcheck(a: MemcheckArgs) -> Result<()> {
    let real = load_trace(&a.real, a.gen)?;
    let synth = load_trace(&a.synth, a.gen)?;
    let r = MemcheckReport {
        n: a.n,
        epsilon: a.epsilon,
        repeated_fraction: memorization(&real, &synth, a.n, a.epsilon)?,
    };
    if let Some(p) = &a.out {
        write_json(p, &r)?;
    }
    println!("{}", serde_json::to_string_pretty(&r)?);
    Ok(())
}

/// Deterministic value in `[0, 1)` for gradient-check inputs.
fn unit(seed: u64, index: u64) -> f64 {
    (derive_seed(seed, index) >> 11) as f64 / (1u64 << 53) as f64
}

fn gradcheck(seed: u64, a: GradcheckArgs) -> Result<()> {
    let cfg = ModelConfig {
        d_model: a.d_model,
        n_blocks: a.n_blocks,
        n_heads: a.n_heads,
        mlp_hidden: a.mlp_hidden,
        max_context: a.seq_len.max(2),
        head_hidden: 16,
        distribution_head: !a.no_distribution_head,
        ..ModelConfig::default()
    };
    let model = init_model(&cfg, seed)?;
    let vocab = cfg.vocab_size();
    let tokens: Vec<TokenFields> = (0..cfg.max_context)
        .map(|k| TokenFields {
            arrival: if k == 0 { 0.0 } else { unit(seed, 2 * k as u64) },
            event: (unit(seed, 2 * k as u64 + 1) * vocab as f64) as usize,
            stop: k + 1 == cfg.max_context,
        })
        .collect();
    let started = std::time::Instant::now();
    let r = grad_check(&model, &tokens, &LossWeights::default())?;
    log::info!("checked {} parameters in {:.2?}", r.parameters, started.elapsed());
    if let Some(p) = &a.out {
        write_json(p, &r)?;
    }
    println!("{}", serde_json::to_string_pretty(&r)?);
    if !(r.max_rel_error < a.max_error) {
        bail!("max relative error {:.3e} exceeds {:.1e} ({})", r.max_rel_error, a.max_error, r.worst_tensor);
    }
    Ok(())
}

fn select(seed: u64, a: SelectArgs) -> Result<()> {
    let ckpts = a.ckpts.iter().map(Checkpoint::load).collect::<Result<Vec<_>, _>>()?;
    let gen = ckpts[0].tokenizer.generation;
    if ckpts.iter().any(|c| c.tokenizer.generation != gen) {
        bail!("checkpoints mix generations");
    }
    let validation = load_trace(&a.validation, gen)?;
    let sel = select_checkpoint(&ckpts, &validation, a.n, seed)?;
    log::info!("selected {} (epoch {})", a.ckpts[sel.index].display(), sel.epoch);
    if let Some(p) = &a.out {
        fs::copy(&a.ckpts[sel.index], p).with_context(|| format!("copying to {}", p.display()))?;
    }
    #[derive(Serialize)]
    struct Out<'a> {
        selected: &'a Path,
        epoch: usize,
        scores: &'a [ctlplane_core::model::select::CheckpointScore],
    }
    let out = Out {
        selected: &a.ckpts[sel.index],
        epoch: sel.epoch,
        scores: &sel.scores,
    };
    if let Some(p) = &a.scores_out {
        write_json(p, &out)?;
    }
    println!("{}", serde_json::to_string_pretty(&out)?);
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    let seed = cli.seed.unwrap_or(0);
    match cli.command {
        Command::Simulate(a) => simulate(seed, a),
        Command::FitSmm(a) => {
            let ds = load_trace(&a.trace, a.gen)?;
            let m = fit_smm(&ds, &build_state_machine(a.gen))?;
            m.save(&a.out)?;
            eprint!("{}", m.summary());
            Ok(())
        }
        Command::Train(a) => run_train(cli.seed, a),
        Command::Finetune(a) => run_finetune(cli.seed, a),
        Command::Generate(a) => generate(seed, a),
        Command::Evaluate(a) => evaluate(a),
        Command::Memcheck(a) => memcheck(a),
        Command::Gradcheck(a) => gradcheck(seed, a),
        Command::SelectCheckpoint(a) => select(seed, a),
        Command::PrintConfig => {
            println!("{}", serde_json::to_string_pretty(&RunConfig::default())?);
            Ok(())
        }
    }
}

fn main() -> std::process::ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .target(env_logger::Target::Stderr)
        .init();
    let cli = Cli::parse();
    if let Some(n) = cli.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            eprintln!("error: cannot configure {n} threads: {e}");
            return std::process::ExitCode::FAILURE;
        }
    }
    match run(cli) {
        Ok(()) => std::process::ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            std::process::ExitCode::FAILURE
        }
    }
}
