//! Control-plane traffic synthesis: trace types, 3GPP-style UE state
//! machines, a semi-Markov baseline, a small decoder-only transformer and
//! fidelity metrics for comparing synthesized traces with reference traces.

pub mod ecdf;
pub mod error;
pub mod fidelity;
pub mod generator;
pub mod model;
pub mod rng;
pub mod smm;
pub mod state_machine;
pub mod tokenizer;
pub mod trace;

pub use error::{Error, Result};
pub use fidelity::{full_report, max_y_distance, memorization, FidelityReport, MemoParams};
pub use generator::{generate_dataset, generate_stream};
pub use model::gradcheck::{grad_check, GradCheckReport};
pub use model::select::{select_checkpoint, Selection};
pub use model::{
    evaluate_loss, finetune, init_model, train, Checkpoint, LossWeights, Model, ModelConfig, TrainConfig, TrainOutcome,
};
pub use smm::{fit_smm, generate_smm, SemiMarkovModel, SmmSpec};
pub use state_machine::{build_state_machine, replay, validate_dataset, StateMachineDef, UeState};
pub use tokenizer::{fit_scaler, TokenizerConfig};
pub use trace::{
    initial_event_distribution, load_trace, save_trace, DeviceType, Event, EventType, Generation,
    InitialEventDistribution, Stream, TraceDataset,
};
