//! Batched forward pass with activation cache, and the matching backward pass.
//!
//! A batch packs several sequences row-wise; position-wise layers run as one
//! GEMM over all rows, attention runs per sequence.

use std::ops::Range;

use super::layout::{HeadIdx, Layout, LinearIdx, NormIdx};
use super::ops::{gelu, gelu_grad, layer_norm, layer_norm_backward, linear, linear_backward, softplus};
use super::scalar::Scalar;
use super::ModelConfig;
use crate::tokenizer::TokenFields;

/// Floor added to the softplus output so the predicted deviation stays positive.
pub const SIGMA_FLOOR: f64 = 1e-4;

pub struct Batch<T> {
    /// `rows × d_token` token matrix.
    pub x: Vec<T>,
    /// Row range of each packed sequence.
    pub seqs: Vec<Range<usize>>,
}

impl<T: Scalar> Batch<T> {
    pub fn rows(&self) -> usize {
        self.seqs.last().map_or(0, |r| r.end)
    }

    pub fn from_fields<S: AsRef<[TokenFields]>>(seqs: &[S], vocab: usize) -> Self {
        let d_token = vocab + 3;
        let mut x = Vec::new();
        let mut ranges = Vec::with_capacity(seqs.len());
        for s in seqs {
            let start = x.len() / d_token;
            for f in s.as_ref() {
                let mut row = vec![T::zero(); d_token];
                row[0] = T::lit(f.arrival);
                row[1 + f.event] = T::one();
                row[1 + vocab + usize::from(f.stop)] = T::one();
                x.extend(row);
            }
            ranges.push(start..x.len() / d_token);
        }
        Batch { x, seqs: ranges }
    }

    pub fn from_values(rows: &[&[f64]], d_token: usize) -> Self {
        let mut x = Vec::with_capacity(rows.len() * d_token);
        for r in rows {
            x.extend(r.iter().map(|v| T::lit(*v)));
        }
        Batch {
            x,
            seqs: vec![0..rows.len()],
        }
    }
}

/// Per-row head outputs.
#[derive(Debug, Clone, PartialEq)]
pub struct HeadOutputs<T> {
    pub rows: usize,
    pub vocab: usize,
    pub distribution: bool,
    /// `rows × vocab`.
    pub event_logits: Vec<T>,
    /// `rows × 2` (mean, std) with a distribution head, else `rows × 1`.
    pub arrival: Vec<T>,
    /// `rows × 2`.
    pub stop_logits: Vec<T>,
}

impl<T: Scalar> HeadOutputs<T> {
    pub fn len(&self) -> usize {
        self.rows
    }

    pub fn is_empty(&self) -> bool {
        self.rows == 0
    }

    pub fn arrival_width(&self) -> usize {
        if self.distribution {
            2
        } else {
            1
        }
    }

    pub fn event_logits_at(&self, k: usize) -> &[T] {
        &self.event_logits[k * self.vocab..(k + 1) * self.vocab]
    }

    pub fn stop_logits_at(&self, k: usize) -> &[T] {
        &self.stop_logits[k * 2..k * 2 + 2]
    }

    /// Predicted mean (or point value for the scalar head).
    pub fn arrival_mean(&self, k: usize) -> T {
        self.arrival[k * self.arrival_width()]
    }

    pub fn arrival_std(&self, k: usize) -> Option<T> {
        self.distribution.then(|| self.arrival[k * 2 + 1])
    }
}

/// Gradients of the loss w.r.t. the raw (pre-transform) head outputs.
pub struct HeadGrads<T> {
    pub event: Vec<T>,
    pub arrival: Vec<T>,
    pub stop: Vec<T>,
}

pub(crate) struct NormCache<T> {
    xhat: Vec<T>,
    rstd: Vec<T>,
}

struct BlockCache<T> {
    h1: Vec<T>,
    ln1: NormCache<T>,
    qkv: Vec<T>,
    probs: Vec<T>,
    attn: Vec<T>,
    ln2: NormCache<T>,
    h2: Vec<T>,
    fc: Vec<T>,
    act: Vec<T>,
}

pub(crate) struct HeadCache<T> {
    pre: Vec<T>,
    act: Vec<T>,
}

pub struct Cache<T> {
    blocks: Vec<BlockCache<T>>,
    lnf: NormCache<T>,
    z: Vec<T>,
    heads: Vec<HeadCache<T>>,
}

pub(crate) fn run_norm<T: Scalar>(p: &[T], idx: &NormIdx, x: &[T], n: usize) -> (Vec<T>, NormCache<T>) {
    let rows = x.len() / n;
    let mut y = vec![T::zero(); x.len()];
    let mut cache = NormCache {
        xhat: vec![T::zero(); x.len()],
        rstd: vec![T::zero(); rows],
    };
    layer_norm(x, &p[idx.g.clone()], &p[idx.b.clone()], n, &mut y, &mut cache.xhat, &mut cache.rstd);
    (y, cache)
}

pub(crate) fn run_linear<T: Scalar>(p: &[T], idx: &LinearIdx, x: &[T]) -> Vec<T> {
    let rows = x.len() / idx.n_in;
    let mut y = vec![T::zero(); rows * idx.n_out];
    linear(x, &p[idx.w.clone()], &p[idx.b.clone()], rows, idx.n_in, idx.n_out, &mut y);
    y
}

pub(crate) fn run_head<T: Scalar>(p: &[T], idx: &HeadIdx, z: &[T]) -> (Vec<T>, HeadCache<T>) {
    let pre = run_linear(p, &idx.hidden, z);
    let act: Vec<T> = pre.iter().map(|v| gelu(*v)).collect();
    let out = run_linear(p, &idx.out, &act);
    (out, HeadCache { pre, act })
}

fn attention_scale<T: Scalar>(cfg: &ModelConfig) -> T {
    T::one() / T::lit(cfg.head_dim() as f64).sqrt()
}

/// Causal multi-head attention over each packed sequence.
fn attention<T: Scalar>(cfg: &ModelConfig, qkv: &[T], seqs: &[Range<usize>], rows: usize) -> (Vec<T>, Vec<T>) {
    let d = cfg.d_model;
    let dh = cfg.head_dim();
    let scale = attention_scale::<T>(cfg);
    let mut out = vec![T::zero(); rows * d];
    let probs_len: usize = seqs.iter().map(|s| cfg.n_heads * s.len() * s.len()).sum();
    let mut probs = vec![T::zero(); probs_len];
    let mut off = 0;
    for s in seqs {
        let l = s.len();
        for h in 0..cfg.n_heads {
            let p = &mut probs[off..off + l * l];
            for i in 0..l {
                let q = &qkv[(s.start + i) * 3 * d + h * dh..][..dh];
                let row = &mut p[i * l..i * l + i + 1];
                let mut max = T::neg_infinity();
                for (j, slot) in row.iter_mut().enumerate() {
                    let k = &qkv[(s.start + j) * 3 * d + d + h * dh..][..dh];
                    let v = q.iter().zip(k).map(|(a, b)| *a * *b).sum::<T>() * scale;
                    *slot = v;
                    max = max.max(v);
                }
                let mut sum = T::zero();
                for slot in row.iter_mut() {
                    *slot = (*slot - max).exp();
                    sum = sum + *slot;
                }
                for slot in row.iter_mut() {
                    *slot = *slot / sum;
                }
                let o = &mut out[(s.start + i) * d + h * dh..][..dh];
                for (j, pij) in row.iter().enumerate() {
                    let v = &qkv[(s.start + j) * 3 * d + 2 * d + h * dh..][..dh];
                    for (oc, vc) in o.iter_mut().zip(v) {
                        *oc = *oc + *pij * *vc;
                    }
                }
            }
            off += l * l;
        }
    }
    (out, probs)
}

fn attention_backward<T: Scalar>(
    cfg: &ModelConfig,
    qkv: &[T],
    probs: &[T],
    d_out: &[T],
    seqs: &[Range<usize>],
    rows: usize,
) -> Vec<T> {
    let d = cfg.d_model;
    let dh = cfg.head_dim();
    let scale = attention_scale::<T>(cfg);
    let mut dqkv = vec![T::zero(); rows * 3 * d];
    let mut off = 0;
    let mut dp = Vec::new();
    for s in seqs {
        let l = s.len();
        for h in 0..cfg.n_heads {
            let p = &probs[off..off + l * l];
            for i in 0..l {
                let ri = s.start + i;
                let go = &d_out[ri * d + h * dh..][..dh];
                dp.clear();
                for j in 0..=i {
                    let v = &qkv[(s.start + j) * 3 * d + 2 * d + h * dh..][..dh];
                    dp.push(go.iter().zip(v).map(|(a, b)| *a * *b).sum::<T>());
                }
                let pi = &p[i * l..i * l + i + 1];
                let dot: T = pi.iter().zip(&dp).map(|(a, b)| *a * *b).sum();
                for j in 0..=i {
                    let rj = s.start + j;
                    // dV_j += p_ij * dO_i
                    for c in 0..dh {
                        let idx = rj * 3 * d + 2 * d + h * dh + c;
                        dqkv[idx] = dqkv[idx] + pi[j] * go[c];
                    }
                    let ds = pi[j] * (dp[j] - dot) * scale;
                    if ds == T::zero() {
                        continue;
                    }
                    for c in 0..dh {
                        let k = qkv[rj * 3 * d + d + h * dh + c];
                        let q = qkv[ri * 3 * d + h * dh + c];
                        let qi = ri * 3 * d + h * dh + c;
                        dqkv[qi] = dqkv[qi] + ds * k;
                        let ki = rj * 3 * d + d + h * dh + c;
                        dqkv[ki] = dqkv[ki] + ds * q;
                    }
                }
            }
            off += l * l;
        }
    }
    dqkv
}

fn head_outputs<T: Scalar>(cfg: &ModelConfig, rows: usize, raw: [Vec<T>; 3]) -> HeadOutputs<T> {
    let [event_logits, mut arrival, stop_logits] = raw;
    if cfg.distribution_head {
        let floor = T::lit(SIGMA_FLOOR);
        for r in 0..rows {
            arrival[r * 2 + 1] = softplus(arrival[r * 2 + 1]) + floor;
        }
    }
    HeadOutputs {
        rows,
        vocab: cfg.vocab_size(),
        distribution: cfg.distribution_head,
        event_logits,
        arrival,
        stop_logits,
    }
}

pub fn forward<T: Scalar>(cfg: &ModelConfig, lay: &Layout, p: &[T], batch: &Batch<T>) -> (HeadOutputs<T>, Cache<T>) {
    let rows = batch.rows();
    let d = cfg.d_model;

    let mut x = run_linear(p, &lay.input, &batch.x);
    let pos = &p[lay.pos.clone()];
    for s in &batch.seqs {
        for (k, r) in s.clone().enumerate() {
            for c in 0..d {
                x[r * d + c] = x[r * d + c] + pos[k * d + c];
            }
        }
    }

    let mut blocks = Vec::with_capacity(lay.blocks.len());
    for b in &lay.blocks {
        let (h1, ln1) = run_norm(p, &b.ln1, &x, d);
        let qkv = run_linear(p, &b.qkv, &h1);
        let (attn, probs) = attention(cfg, &qkv, &batch.seqs, rows);
        let o = run_linear(p, &b.proj, &attn);
        for (xv, ov) in x.iter_mut().zip(&o) {
            *xv = *xv + *ov;
        }
        let (h2, ln2) = run_norm(p, &b.ln2, &x, d);
        let fc = run_linear(p, &b.fc, &h2);
        let act: Vec<T> = fc.iter().map(|v| gelu(*v)).collect();
        let m = run_linear(p, &b.out, &act);
        for (xv, mv) in x.iter_mut().zip(&m) {
            *xv = *xv + *mv;
        }
        blocks.push(BlockCache {
            h1,
            ln1,
            qkv,
            probs,
            attn,
            ln2,
            h2,
            fc,
            act,
        });
    }

    let (z, lnf) = run_norm(p, &lay.final_norm, &x, d);
    let mut heads = Vec::with_capacity(3);
    let mut raw: [Vec<T>; 3] = Default::default();
    for (slot, idx) in raw.iter_mut().zip(lay.heads()) {
        let (out, cache) = run_head(p, idx, &z);
        *slot = out;
        heads.push(cache);
    }
    (head_outputs(cfg, rows, raw), Cache { blocks, lnf, z, heads })
}

/// Splits a contiguous weight+bias range out of the gradient buffer.
fn wb_mut<'a, T>(g: &'a mut [T], idx: &LinearIdx) -> (&'a mut [T], &'a mut [T]) {
    debug_assert_eq!(idx.w.end, idx.b.start);
    g[idx.w.start..idx.b.end].split_at_mut(idx.w.len())
}

fn gb_mut<'a, T>(g: &'a mut [T], idx: &NormIdx) -> (&'a mut [T], &'a mut [T]) {
    debug_assert_eq!(idx.g.end, idx.b.start);
    g[idx.g.start..idx.b.end].split_at_mut(idx.g.len())
}

fn lin_back<T: Scalar>(p: &[T], grads: &mut [T], idx: &LinearIdx, x: &[T], dy: &[T], want_dx: bool) -> Vec<T> {
    let rows = x.len() / idx.n_in;
    let (dw, db) = wb_mut(grads, idx);
    if want_dx {
        let mut dx = vec![T::zero(); rows * idx.n_in];
        linear_backward(x, &p[idx.w.clone()], dy, rows, idx.n_in, idx.n_out, dw, db, Some(&mut dx));
        dx
    } else {
        linear_backward(x, &p[idx.w.clone()], dy, rows, idx.n_in, idx.n_out, dw, db, None);
        Vec::new()
    }
}

/// Accumulates parameter gradients into `grads` given gradients of the loss
/// w.r.t. the raw head outputs.
pub fn backward<T: Scalar>(
    cfg: &ModelConfig,
    lay: &Layout,
    p: &[T],
    batch: &Batch<T>,
    cache: &Cache<T>,
    d_heads: &HeadGrads<T>,
    grads: &mut [T],
) {
    let rows = batch.rows();
    let d = cfg.d_model;

    let mut dz = vec![T::zero(); rows * d];
    for ((idx, hc), draw) in lay
        .heads()
        .into_iter()
        .zip(&cache.heads)
        .zip([&d_heads.event, &d_heads.arrival, &d_heads.stop])
    {
        let mut dact = lin_back(p, grads, &idx.out, &hc.act, draw, true);
        for (g, pre) in dact.iter_mut().zip(&hc.pre) {
            *g = *g * gelu_grad(*pre);
        }
        let dzh = lin_back(p, grads, &idx.hidden, &cache.z, &dact, true);
        for (a, b) in dz.iter_mut().zip(&dzh) {
            *a = *a + *b;
        }
    }

    let mut dx = vec![T::zero(); rows * d];
    {
        let (dg, db) = gb_mut(grads, &lay.final_norm);
        layer_norm_backward(&dz, &cache.lnf.xhat, &cache.lnf.rstd, &p[lay.final_norm.g.clone()], d, &mut dx, dg, db);
    }

    for (b, bc) in lay.blocks.iter().zip(&cache.blocks).rev() {
        // MLP branch: x_out = x_mid + out(gelu(fc(ln2(x_mid))))
        let mut dact = lin_back(p, grads, &b.out, &bc.act, &dx, true);
        for (g, pre) in dact.iter_mut().zip(&bc.fc) {
            *g = *g * gelu_grad(*pre);
        }
        let dh2 = lin_back(p, grads, &b.fc, &bc.h2, &dact, true);
        {
            let (dg, db) = gb_mut(grads, &b.ln2);
            layer_norm_backward(&dh2, &bc.ln2.xhat, &bc.ln2.rstd, &p[b.ln2.g.clone()], d, &mut dx, dg, db);
        }
        // Attention branch: x_mid = x_in + proj(attn(qkv(ln1(x_in))))
        let dattn = lin_back(p, grads, &b.proj, &bc.attn, &dx, true);
        let dqkv = attention_backward(cfg, &bc.qkv, &bc.probs, &dattn, &batch.seqs, rows);
        let dh1 = lin_back(p, grads, &b.qkv, &bc.h1, &dqkv, true);
        {
            let (dg, db) = gb_mut(grads, &b.ln1);
            layer_norm_backward(&dh1, &bc.ln1.xhat, &bc.ln1.rstd, &p[b.ln1.g.clone()], d, &mut dx, dg, db);
        }
    }

    {
        let dpos = &mut grads[lay.pos.clone()];
        for s in &batch.seqs {
            for (k, r) in s.clone().enumerate() {
                for c in 0..d {
                    dpos[k * d + c] = dpos[k * d + c] + dx[r * d + c];
                }
            }
        }
    }
    lin_back(p, grads, &lay.input, &batch.x, &dx, false);
}

/// Keys and values of every past position of one sequence, per block.
#[derive(Debug, Clone)]
pub struct KvCache<T> {
    k: Vec<Vec<T>>,
    v: Vec<Vec<T>>,
    len: usize,
}

impl<T: Scalar> KvCache<T> {
    pub fn new(cfg: &ModelConfig) -> Self {
        KvCache {
            k: vec![Vec::new(); cfg.n_blocks],
            v: vec![Vec::new(); cfg.n_blocks],
            len: 0,
        }
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }
}

/// Feeds one new token to each sequence in `active` (row `r` of `x` belongs to
/// `caches[active[r]]`) and returns the next-token head outputs per row.
///
/// Panics if a sequence is already at `max_context`.
pub fn decode_step<T: Scalar>(
    cfg: &ModelConfig,
    lay: &Layout,
    p: &[T],
    caches: &mut [KvCache<T>],
    active: &[usize],
    x: &[T],
) -> HeadOutputs<T> {
    let rows = active.len();
    let d = cfg.d_model;
    let dh = cfg.head_dim();
    let scale = attention_scale::<T>(cfg);

    let mut h = run_linear(p, &lay.input, x);
    let pos = &p[lay.pos.clone()];
    for (r, s) in active.iter().enumerate() {
        let k = caches[*s].len;
        assert!(k < cfg.max_context, "sequence exceeds max_context");
        for c in 0..d {
            h[r * d + c] = h[r * d + c] + pos[k * d + c];
        }
    }

    let mut scores = Vec::new();
    for (bi, b) in lay.blocks.iter().enumerate() {
        let (h1, _) = run_norm(p, &b.ln1, &h, d);
        let qkv = run_linear(p, &b.qkv, &h1);
        let mut attn = vec![T::zero(); rows * d];
        for (r, s) in active.iter().enumerate() {
            let cache = &mut caches[*s];
            let row = &qkv[r * 3 * d..(r + 1) * 3 * d];
            cache.k[bi].extend_from_slice(&row[d..2 * d]);
            cache.v[bi].extend_from_slice(&row[2 * d..]);
            let n = cache.len + 1;
            for hd in 0..cfg.n_heads {
                let q = &row[hd * dh..(hd + 1) * dh];
                scores.clear();
                let mut max = T::neg_infinity();
                for j in 0..n {
                    let k = &cache.k[bi][j * d + hd * dh..][..dh];
                    let v = q.iter().zip(k).map(|(a, b)| *a * *b).sum::<T>() * scale;
                    max = max.max(v);
                    scores.push(v);
                }
                let mut sum = T::zero();
                for v in scores.iter_mut() {
                    *v = (*v - max).exp();
                    sum = sum + *v;
                }
                let o = &mut attn[r * d + hd * dh..][..dh];
                for (j, w) in scores.iter().enumerate() {
                    let w = *w / sum;
                    let v = &cache.v[bi][j * d + hd * dh..][..dh];
                    for (oc, vc) in o.iter_mut().zip(v) {
                        *oc = *oc + w * *vc;
                    }
                }
            }
        }
        let o = run_linear(p, &b.proj, &attn);
        for (a, b) in h.iter_mut().zip(&o) {
            *a = *a + *b;
        }
        let (h2, _) = run_norm(p, &b.ln2, &h, d);
        let act: Vec<T> = run_linear(p, &b.fc, &h2).into_iter().map(gelu).collect();
        let m = run_linear(p, &b.out, &act);
        for (a, b) in h.iter_mut().zip(&m) {
            *a = *a + *b;
        }
    }
    for s in active {
        caches[*s].len += 1;
    }

    let (z, _) = run_norm(p, &lay.final_norm, &h, d);
    let mut raw: [Vec<T>; 3] = Default::default();
    for (slot, idx) in raw.iter_mut().zip(lay.heads()) {
        *slot = run_head(p, idx, &z).0;
    }
    head_outputs(cfg, rows, raw)
}
