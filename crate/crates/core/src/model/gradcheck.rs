//! Finite-difference verification of the analytic backward pass in f64.

use serde::{Deserialize, Serialize};

use super::loss::{loss_and_grads, loss_terms, next_token_targets, LossWeights};
use super::network::{self, Batch};
use super::Model;
use crate::error::{Error, Result};
use crate::tokenizer::TokenFields;

pub const FD_STEP: f64 = 1e-4;
/// Lower bound on the relative-error denominator, so that gradients at the
/// level of finite-difference noise do not dominate the maximum.
pub const DENOM_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub worst_tensor: String,
    pub worst_index: usize,
    pub parameters: usize,
}

fn params64(model: &Model) -> Vec<f64> {
    model.params().iter().map(|v| f64::from(*v)).collect()
}

fn loss_at(model: &Model, p: &[f64], batch: &Batch<f64>, targets: &[Option<TokenFields>], w: &LossWeights) -> Result<f64> {
    let (out, _) = network::forward(model.config(), model.layout(), p, batch);
    Ok(loss_terms(&out, targets)?.total(w))
}

fn setup(model: &Model, tokens: &[TokenFields]) -> Result<(Batch<f64>, Vec<Option<TokenFields>>)> {
    if tokens.len() < 2 {
        return Err(Error::Empty("gradient check needs at least two tokens"));
    }
    if tokens.len() > model.config().max_context {
        return Err(Error::Shape("gradient check input exceeds max_context".into()));
    }
    Ok((Batch::from_fields(&[tokens], model.config().vocab_size()), next_token_targets(tokens)))
}

/// Analytic gradient of the weighted loss w.r.t. every parameter, in f64.
pub fn analytic_gradients(model: &Model, tokens: &[TokenFields], w: &LossWeights) -> Result<Vec<f64>> {
    let (batch, targets) = setup(model, tokens)?;
    let p = params64(model);
    let (out, cache) = network::forward(model.config(), model.layout(), &p, &batch);
    let (_, hg) = loss_and_grads(&out, &targets, w)?;
    let mut g = vec![0.0; p.len()];
    network::backward(model.config(), model.layout(), &p, &batch, &cache, &hg, &mut g);
    Ok(g)
}

/// Compares analytic gradients against central differences for every
/// parameter and returns the largest relative error.
pub fn grad_check(model: &Model, tokens: &[TokenFields], w: &LossWeights) -> Result<GradCheckReport> {
    let analytic = analytic_gradients(model, tokens, w)?;
    let (batch, targets) = setup(model, tokens)?;
    let mut p = params64(model);
    let mut worst = (0.0f64, 0usize);
    for i in 0..p.len() {
        let mut central = |h: f64| -> Result<f64> {
            let orig = p[i];
            p[i] = orig + h;
            let up = loss_at(model, &p, &batch, &targets, w)?;
            p[i] = orig - h;
            let down = loss_at(model, &p, &batch, &targets, w)?;
            p[i] = orig;
            Ok((up - down) / (2.0 * h))
        };
        // Richardson step: cancels the h^2 truncation term of the central
        // difference, which otherwise swamps gradients below about 1e-5.
        let coarse = central(FD_STEP)?;
        let numeric = (4.0 * central(FD_STEP / 2.0)? - coarse) / 3.0;
        let a = analytic[i];
        let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(DENOM_FLOOR);
        if rel > worst.0 || rel.is_nan() {
            worst = (rel, i);
        }
    }
    let tensor = model
        .layout()
        .tensors
        .iter()
        .find(|t| t.range().contains(&worst.1))
        .map(|t| t.name.clone())
        .unwrap_or_default();
    Ok(GradCheckReport {
        max_rel_error: worst.0,
        worst_tensor: tensor,
        worst_index: worst.1,
        parameters: p.len(),
    })
}
