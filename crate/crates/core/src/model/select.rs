//! Rank-sum checkpoint selection over fidelity metrics.

use serde::{Deserialize, Serialize};

use super::checkpoint::Checkpoint;
use crate::error::{Error, Result};
use crate::fidelity::{breakdown_diff, flow_length_distance, sojourn_distance};
use crate::generator::generate_dataset;
use crate::state_machine::{build_state_machine, validate_dataset, TopLevel};
use crate::trace::TraceDataset;

pub const METRICS: [&str; 8] = [
    "event_violation_rate",
    "stream_violation_rate",
    "sojourn_ks_connected",
    "sojourn_ks_idle",
    "flow_length_ks_all",
    "flow_length_ks_srv_req",
    "flow_length_ks_release",
    "mean_abs_breakdown_diff",
];

/// Fraction of checkpoints kept before taking the earliest.
pub const TOP_FRACTION: f64 = 0.2;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CheckpointScore {
    pub epoch: usize,
    /// One value per entry of [`METRICS`]; `None` is not applicable and ranks last.
    pub metrics: Vec<Option<f64>>,
    pub rank_sum: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Selection {
    pub index: usize,
    pub epoch: usize,
    pub scores: Vec<CheckpointScore>,
}

/// Fidelity metrics (lower is better) of `n_streams` generated streams against `validation`.
pub fn checkpoint_metrics(ckpt: &Checkpoint, validation: &TraceDataset, n_streams: usize, seed: u64) -> Result<Vec<Option<f64>>> {
    let def = build_state_machine(validation.generation());
    let synth = generate_dataset(ckpt, n_streams, ckpt.device_type, seed)?;
    let v = validate_dataset(&synth, &def)?;
    let soj = sojourn_distance(validation, &synth, &def)?;
    let flow = flow_length_distance(validation, &synth)?;
    let bd = breakdown_diff(validation, &synth)?;
    let rel = validation.generation().release_event().to_string();
    Ok(vec![
        Some(v.event_violation_rate),
        Some(v.stream_violation_rate),
        soj[&TopLevel::Connected],
        soj[&TopLevel::Idle],
        Some(flow["all"]),
        Some(flow["SRV_REQ"]),
        Some(flow[&rel]),
        Some(bd.values().map(|d| d.abs()).sum::<f64>() / bd.len() as f64),
    ])
}

/// Competition ranks (1 = best, ties share the better rank); `None` ranks after every value.
fn ranks(values: &[Option<f64>]) -> Vec<usize> {
    let defined = values.iter().filter(|v| v.is_some()).count();
    values
        .iter()
        .map(|v| match v {
            Some(x) => 1 + values.iter().filter(|o| matches!(o, Some(y) if y < x)).count(),
            None => 1 + defined,
        })
        .collect()
}

/// Index of the selected entry: rank per metric, sum ranks, keep the
/// `ceil(20%)` smallest sums and return the earliest epoch among them.
pub fn select_by_scores(epochs: &[usize], metrics: &[Vec<Option<f64>>]) -> Result<(usize, Vec<usize>)> {
    if epochs.is_empty() || epochs.len() != metrics.len() {
        return Err(Error::Empty("checkpoint selection needs at least one scored checkpoint"));
    }
    let width = metrics[0].len();
    if metrics.iter().any(|m| m.len() != width) {
        return Err(Error::Shape("ragged metric table".into()));
    }
    let mut sums = vec![0usize; epochs.len()];
    for j in 0..width {
        let col: Vec<Option<f64>> = metrics.iter().map(|m| m[j]).collect();
        for (s, r) in sums.iter_mut().zip(ranks(&col)) {
            *s += r;
        }
    }
    let keep = ((epochs.len() as f64 * TOP_FRACTION).ceil() as usize).max(1);
    let mut order: Vec<usize> = (0..epochs.len()).collect();
    order.sort_by_key(|&i| (sums[i], epochs[i]));
    let best = order[..keep].iter().copied().min_by_key(|&i| epochs[i]).expect("keep >= 1");
    Ok((best, sums))
}

pub fn select_checkpoint(ckpts: &[Checkpoint], validation: &TraceDataset, n_streams: usize, seed: u64) -> Result<Selection> {
    if ckpts.is_empty() {
        return Err(Error::Empty("no checkpoints to select from"));
    }
    if ckpts.len() == 1 {
        return Ok(Selection {
            index: 0,
            epoch: ckpts[0].epoch,
            scores: Vec::new(),
        });
    }
    let metrics = ckpts
        .iter()
        .map(|c| checkpoint_metrics(c, validation, n_streams, seed))
        .collect::<Result<Vec<_>>>()?;
    let epochs: Vec<usize> = ckpts.iter().map(|c| c.epoch).collect();
    let (index, sums) = select_by_scores(&epochs, &metrics)?;
    let scores = epochs
        .iter()
        .zip(metrics)
        .zip(sums)
        .map(|((e, m), s)| CheckpointScore {
            epoch: *e,
            metrics: m,
            rank_sum: s,
        })
        .collect();
    Ok(Selection {
        index,
        epoch: ckpts[index].epoch,
        scores,
    })
}
