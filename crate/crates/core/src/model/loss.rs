//! Mixed next-token loss: cross-entropy for the categorical fields and
//! Gaussian NLL (or squared error) for the interarrival.

use serde::{Deserialize, Serialize};

use super::network::{HeadGrads, HeadOutputs, SIGMA_FLOOR};
use super::scalar::Scalar;
use crate::error::{Error, Result};
use crate::tokenizer::TokenFields;

const HALF_LN_2PI: f64 = 0.918_938_533_204_672_8;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossWeights {
    pub event: f64,
    pub arrival: f64,
    pub stop: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            event: 1.0,
            arrival: 1.0,
            stop: 1.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let w = [self.event, self.arrival, self.stop];
        if w.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(Error::Config(format!("loss weights must be finite and non-negative: {w:?}")));
        }
        if w.iter().all(|v| *v == 0.0) {
            return Err(Error::Config("loss weights are all zero".into()));
        }
        Ok(())
    }
}

/// Per-field mean losses over the unmasked positions.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub event: f64,
    pub arrival: f64,
    pub stop: f64,
    pub positions: usize,
}

impl LossBreakdown {
    pub fn total(&self, w: &LossWeights) -> f64 {
        w.event * self.event + w.arrival * self.arrival + w.stop * self.stop
    }

    /// Position-weighted mean of several breakdowns.
    pub fn merge(parts: &[LossBreakdown]) -> LossBreakdown {
        let n: usize = parts.iter().map(|p| p.positions).sum();
        if n == 0 {
            return LossBreakdown::default();
        }
        let avg = |f: fn(&LossBreakdown) -> f64| parts.iter().map(|p| f(p) * p.positions as f64).sum::<f64>() / n as f64;
        LossBreakdown {
            event: avg(|p| p.event),
            arrival: avg(|p| p.arrival),
            stop: avg(|p| p.stop),
            positions: n,
        }
    }
}

/// Teacher-forcing targets for one sequence: position `k` predicts token
/// `k + 1`; the last position has no target.
pub fn next_token_targets(seq: &[TokenFields]) -> Vec<Option<TokenFields>> {
    let mut t: Vec<_> = seq.iter().skip(1).copied().map(Some).collect();
    if !seq.is_empty() {
        t.push(None);
    }
    t
}

/// Cross-entropy of `target` under `logits`; writes `softmax - onehot` into `grad`.
fn cross_entropy(logits: &[f64], target: usize, grad: &mut [f64]) -> f64 {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let sum: f64 = logits.iter().map(|l| (l - max).exp()).sum();
    let lse = max + sum.ln();
    for (g, l) in grad.iter_mut().zip(logits) {
        *g = (l - lse).exp();
    }
    grad[target] -= 1.0;
    lse - logits[target]
}

pub fn loss<T: Scalar>(out: &HeadOutputs<T>, targets: &[Option<TokenFields>], w: &LossWeights) -> Result<f64> {
    Ok(loss_terms(out, targets)?.total(w))
}

pub fn loss_terms<T: Scalar>(out: &HeadOutputs<T>, targets: &[Option<TokenFields>]) -> Result<LossBreakdown> {
    evaluate(out, targets, None).map(|(b, _)| b)
}

pub(crate) fn loss_and_grads<T: Scalar>(
    out: &HeadOutputs<T>,
    targets: &[Option<TokenFields>],
    w: &LossWeights,
) -> Result<(LossBreakdown, HeadGrads<T>)> {
    evaluate(out, targets, Some(w)).map(|(b, g)| (b, g.expect("gradients requested")))
}

fn evaluate<T: Scalar>(
    out: &HeadOutputs<T>,
    targets: &[Option<TokenFields>],
    w: Option<&LossWeights>,
) -> Result<(LossBreakdown, Option<HeadGrads<T>>)> {
    if targets.len() != out.rows {
        return Err(Error::Shape(format!("{} targets for {} output rows", targets.len(), out.rows)));
    }
    let v = out.vocab;
    let aw = out.arrival_width();
    let positions = targets.iter().filter(|t| t.is_some()).count();
    let mut grads = w.map(|_| HeadGrads {
        event: vec![T::zero(); out.rows * v],
        arrival: vec![T::zero(); out.rows * aw],
        stop: vec![T::zero(); out.rows * 2],
    });
    let mut b = LossBreakdown {
        positions,
        ..Default::default()
    };
    if positions == 0 {
        return Ok((b, grads));
    }
    let inv = 1.0 / positions as f64;
    let mut logits = vec![0.0; v.max(2)];
    let mut g = vec![0.0; v.max(2)];

    for (k, tgt) in targets.iter().enumerate() {
        let Some(tgt) = tgt else { continue };
        if tgt.event >= v {
            return Err(Error::Shape(format!("target event index {} outside vocabulary of {v}", tgt.event)));
        }

        logits.clear();
        logits.extend(out.event_logits_at(k).iter().map(|x| x.to_f64().unwrap()));
        g.resize(v, 0.0);
        b.event += cross_entropy(&logits, tgt.event, &mut g);
        if let (Some(gr), Some(w)) = (grads.as_mut(), w) {
            for (dst, src) in gr.event[k * v..(k + 1) * v].iter_mut().zip(&g) {
                *dst = T::lit(w.event * inv * src);
            }
        }

        logits.clear();
        logits.extend(out.stop_logits_at(k).iter().map(|x| x.to_f64().unwrap()));
        g.resize(2, 0.0);
        b.stop += cross_entropy(&logits, usize::from(tgt.stop), &mut g);
        if let (Some(gr), Some(w)) = (grads.as_mut(), w) {
            for (dst, src) in gr.stop[k * 2..k * 2 + 2].iter_mut().zip(&g) {
                *dst = T::lit(w.stop * inv * src);
            }
        }

        let mu = out.arrival_mean(k).to_f64().unwrap();
        let x = tgt.arrival;
        match out.arrival_std(k).map(|s| s.to_f64().unwrap()) {
            Some(sigma) => {
                if !(sigma > 0.0) {
                    return Err(Error::Invariant(format!("non-positive sigma {sigma} at position {k}")));
                }
                let z = (x - mu) / sigma;
                b.arrival += HALF_LN_2PI + sigma.ln() + 0.5 * z * z;
                if let (Some(gr), Some(w)) = (grads.as_mut(), w) {
                    let s = w.arrival * inv;
                    let d_mu = -(x - mu) / (sigma * sigma);
                    let d_sigma = 1.0 / sigma - (x - mu) * (x - mu) / (sigma * sigma * sigma);
                    // sigma = softplus(r) + floor, and softplus'(r) = 1 - exp(-softplus(r)).
                    let d_raw = d_sigma * -(-(sigma - SIGMA_FLOOR)).exp_m1();
                    gr.arrival[k * 2] = T::lit(s * d_mu);
                    gr.arrival[k * 2 + 1] = T::lit(s * d_raw);
                }
            }
            None => {
                b.arrival += (x - mu) * (x - mu);
                if let (Some(gr), Some(w)) = (grads.as_mut(), w) {
                    gr.arrival[k] = T::lit(w.arrival * inv * 2.0 * (mu - x));
                }
            }
        }
    }
    b.event *= inv;
    b.stop *= inv;
    b.arrival *= inv;
    Ok((b, grads))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn outputs(rows: usize, mu: f64, sigma: f64) -> HeadOutputs<f64> {
        HeadOutputs {
            rows,
            vocab: 6,
            distribution: true,
            event_logits: vec![0.0; rows * 6],
            arrival: (0..rows).flat_map(|_| [mu, sigma]).collect(),
            stop_logits: vec![0.3, -0.2].repeat(rows),
        }
    }

    fn target(arrival: f64, event: usize) -> Option<TokenFields> {
        Some(TokenFields {
            arrival,
            event,
            stop: false,
        })
    }

    #[test]
    fn uniform_logits_give_ln_vocab() {
        let b = loss_terms(&outputs(3, 0.5, 1.0), &[target(0.5, 0), target(0.5, 3), None]).unwrap();
        assert!((b.event - 6f64.ln()).abs() < 1e-12);
        assert_eq!(b.positions, 2);
    }

    #[test]
    fn exact_mean_with_unit_sigma() {
        let b = loss_terms(&outputs(1, 0.25, 1.0), &[target(0.25, 1)]).unwrap();
        assert!((b.arrival - 0.5 * (2.0 * std::f64::consts::PI).ln()).abs() < 1e-12);
    }

    #[test]
    fn loss_is_linear_in_weights() {
        let out = outputs(2, 0.1, 0.4);
        let t = [target(0.7, 2), None];
        let w1 = LossWeights::default();
        let w3 = LossWeights { event: 3.0, ..w1 };
        let l1 = loss(&out, &t, &w1).unwrap();
        let l3 = loss(&out, &t, &w3).unwrap();
        let ce = loss_terms(&out, &t).unwrap().event;
        assert!((l3 - (l1 + 2.0 * ce)).abs() < 1e-12);
    }

    #[test]
    fn non_positive_sigma_is_rejected() {
        let err = loss_terms(&outputs(1, 0.0, 0.0), &[target(0.0, 0)]).unwrap_err();
        assert!(matches!(err, Error::Invariant(_)));
    }

    #[test]
    fn scalar_head_uses_squared_error() {
        let out = HeadOutputs {
            rows: 1,
            vocab: 6,
            distribution: false,
            event_logits: vec![0.0; 6],
            arrival: vec![0.2],
            stop_logits: vec![0.0, 0.0],
        };
        let b = loss_terms(&out, &[target(0.5, 0)]).unwrap();
        assert!((b.arrival - 0.09).abs() < 1e-12);
        assert!((b.stop - 2f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn weights_validation() {
        assert!(LossWeights { event: 0.0, arrival: 0.0, stop: 0.0 }.validate().is_err());
        assert!(LossWeights { event: -1.0, arrival: 1.0, stop: 1.0 }.validate().is_err());
        assert!(LossWeights { event: 0.0, arrival: 0.0, stop: 1.0 }.validate().is_ok());
    }

    #[test]
    fn targets_shift_by_one() {
        let f = |e| TokenFields { arrival: 0.0, event: e, stop: false };
        let t = next_token_targets(&[f(0), f(1), f(2)]);
        assert_eq!(t, vec![Some(f(1)), Some(f(2)), None]);
    }
}
