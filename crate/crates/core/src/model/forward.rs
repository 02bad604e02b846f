//! Batched forward pass with a tape, the matching backward pass and the loss.
//!
//! Layers are pre-norm: `x + drop(sublayer(norm(x)))`. Both stacks end in a
//! layer norm. Logits are the final decoder states times the embedding
//! transposed.

use super::params::{Attention, DecoderLayer, EncoderLayer, FeedForward, LayerNorm, Linear, Params, Transformer};
use super::tensor::{axpy, dot, gemm, Mat, Scalar};
use super::{ModelConfig, ModelError};
use crate::rng::DetRng;
use crate::sampler::Vocab;
use crate::sampler::Batch;

pub const LN_EPS: f64 = 1e-5;
pub(crate) const DROPOUT_DOMAIN: &str = "dropout";

/// Randomness of one training step. Absent at evaluation time.
#[derive(Debug, Clone)]
pub struct Noise {
    rng: DetRng,
    dropout: f64,
    attention: f64,
    activation: f64,
    layer_drop: f64,
}

#[derive(Clone, Copy)]
enum Rate {
    Residual,
    Attention,
    Activation,
}

impl Noise {
    pub fn new(config: &ModelConfig, seed: u64, step: u64) -> Self {
        Self {
            rng: DetRng::new(seed, DROPOUT_DOMAIN, step),
            dropout: config.dropout,
            attention: config.attention_dropout,
            activation: config.activation_dropout,
            layer_drop: config.layer_drop,
        }
    }

    fn mask<T: Scalar>(&mut self, n: usize, rate: Rate) -> Option<Vec<T>> {
        let p = match rate {
            Rate::Residual => self.dropout,
            Rate::Attention => self.attention,
            Rate::Activation => self.activation,
        };
        if p <= 0.0 {
            return None;
        }
        let keep = T::of(1.0 / (1.0 - p));
        Some((0..n).map(|_| if self.rng.unit_f64() < p { T::zero() } else { keep }).collect())
    }

    fn skip_layer(&mut self) -> bool {
        self.layer_drop > 0.0 && self.rng.unit_f64() < self.layer_drop
    }
}

fn draw<T: Scalar>(noise: &mut Option<Noise>, n: usize, rate: Rate) -> Option<Vec<T>> {
    noise.as_mut().and_then(|z| z.mask(n, rate))
}

fn apply<T: Scalar>(x: &mut [T], mask: &Option<Vec<T>>) {
    if let Some(m) = mask {
        for (a, &k) in x.iter_mut().zip(m) {
            *a = *a * k;
        }
    }
}

pub(crate) fn linear_fwd<T: Scalar>(l: &Linear<T>, x: &Mat<T>) -> Mat<T> {
    let (i, o) = l.dims();
    assert_eq!(x.cols, i);
    let mut y = Mat::zeros(x.rows, o);
    for r in 0..x.rows {
        y.row_mut(r).copy_from_slice(&l.bias.data);
    }
    gemm(&x.data, x.shape(), false, &l.weight.data, (i, o), false, &mut y.data, T::one());
    y
}

fn linear_bwd<T: Scalar>(l: &Linear<T>, g: &mut Linear<T>, x: &Mat<T>, dy: &Mat<T>) -> Mat<T> {
    let (i, o) = l.dims();
    gemm(&x.data, x.shape(), true, &dy.data, dy.shape(), false, &mut g.weight.data, T::one());
    for r in 0..dy.rows {
        axpy(T::one(), dy.row(r), &mut g.bias.data);
    }
    let mut dx = Mat::zeros(dy.rows, i);
    gemm(&dy.data, dy.shape(), false, &l.weight.data, (i, o), true, &mut dx.data, T::zero());
    dx
}

#[derive(Debug, Clone)]
pub(crate) struct LnCache<T> {
    xhat: Mat<T>,
    rstd: Vec<T>,
}

pub(crate) fn ln_fwd<T: Scalar>(n: &LayerNorm<T>, x: &Mat<T>) -> (Mat<T>, LnCache<T>) {
    let d = x.cols;
    let inv_d = T::of(1.0 / d as f64);
    let eps = T::of(LN_EPS);
    let mut y = Mat::zeros(x.rows, d);
    let mut xhat = Mat::zeros(x.rows, d);
    let mut rstd = Vec::with_capacity(x.rows);
    for r in 0..x.rows {
        let row = x.row(r);
        let mean = row.iter().fold(T::zero(), |a, &v| a + v) * inv_d;
        let var = row.iter().fold(T::zero(), |a, &v| a + (v - mean) * (v - mean)) * inv_d;
        let rs = T::one() / (var + eps).sqrt();
        rstd.push(rs);
        let xh = xhat.row_mut(r);
        for c in 0..d {
            xh[c] = (row[c] - mean) * rs;
        }
        let xr = &xhat.data[r * d..(r + 1) * d];
        for (c, out) in y.row_mut(r).iter_mut().enumerate() {
            *out = xr[c] * n.gain.data[c] + n.shift.data[c];
        }
    }
    (y, LnCache { xhat, rstd })
}

fn ln_bwd<T: Scalar>(n: &LayerNorm<T>, g: &mut LayerNorm<T>, c: &LnCache<T>, dy: &Mat<T>) -> Mat<T> {
    let d = dy.cols;
    let inv_d = T::of(1.0 / d as f64);
    let mut dx = Mat::zeros(dy.rows, d);
    let mut dxhat = vec![T::zero(); d];
    for r in 0..dy.rows {
        let dyr = dy.row(r);
        let xh = c.xhat.row(r);
        let mut mean_d = T::zero();
        let mut mean_dx = T::zero();
        for k in 0..d {
            g.gain.data[k] = g.gain.data[k] + dyr[k] * xh[k];
            g.shift.data[k] = g.shift.data[k] + dyr[k];
            dxhat[k] = dyr[k] * n.gain.data[k];
            mean_d = mean_d + dxhat[k];
            mean_dx = mean_dx + dxhat[k] * xh[k];
        }
        mean_d = mean_d * inv_d;
        mean_dx = mean_dx * inv_d;
        let rs = c.rstd[r];
        let out = dx.row_mut(r);
        for k in 0..d {
            out[k] = rs * (dxhat[k] - mean_d - xh[k] * mean_dx);
        }
    }
    dx
}

/// Geometry of one attention call.
#[derive(Debug, Clone, Copy)]
pub(crate) struct AttnShape<'a> {
    pub batch: usize,
    pub lq: usize,
    pub lk: usize,
    pub heads: usize,
    /// `batch * lk`; false marks PAD keys.
    pub key_valid: &'a [bool],
    pub causal: bool,
}

#[derive(Debug, Clone)]
struct AttnCache<T> {
    q: Mat<T>,
    k: Mat<T>,
    v: Mat<T>,
    /// `[batch, heads, lq, lk]` before dropout; masked entries are zero.
    probs: Vec<T>,
    drop: Option<Vec<T>>,
    ctx: Mat<T>,
}

/// Masked softmax of `scores[..limit]` in place; entries with `valid == false`
/// become zero. Returns false when no key is visible.
pub(crate) fn masked_softmax<T: Scalar>(scores: &mut [T], valid: &[bool]) -> bool {
    let mut max = T::neg_infinity();
    for (s, &ok) in scores.iter().zip(valid) {
        if ok && *s > max {
            max = *s;
        }
    }
    if max == T::neg_infinity() {
        scores.iter_mut().for_each(|s| *s = T::zero());
        return false;
    }
    let mut sum = T::zero();
    for (s, &ok) in scores.iter_mut().zip(valid) {
        *s = if ok { (*s - max).exp() } else { T::zero() };
        sum = sum + *s;
    }
    let inv = T::one() / sum;
    scores.iter_mut().for_each(|s| *s = *s * inv);
    true
}

fn attn_fwd<T: Scalar>(
    p: &Attention<T>,
    xq: &Mat<T>,
    xkv: &Mat<T>,
    s: AttnShape<'_>,
    noise: &mut Option<Noise>,
) -> (Mat<T>, AttnCache<T>) {
    let d = xq.cols;
    let dh = d / s.heads;
    let scale = T::of(1.0 / (dh as f64).sqrt());
    let q = linear_fwd(&p.query, xq);
    let k = linear_fwd(&p.key, xkv);
    let v = linear_fwd(&p.value, xkv);
    let mut probs = vec![T::zero(); s.batch * s.heads * s.lq * s.lk];
    let mut visible = vec![false; s.lk];
    for b in 0..s.batch {
        let kv_valid = &s.key_valid[b * s.lk..(b + 1) * s.lk];
        for h in 0..s.heads {
            for i in 0..s.lq {
                let qi = &q.data[(b * s.lq + i) * d + h * dh..][..dh];
                let limit = if s.causal { (i + 1).min(s.lk) } else { s.lk };
                let row = &mut probs[((b * s.heads + h) * s.lq + i) * s.lk..][..s.lk];
                for j in 0..s.lk {
                    visible[j] = j < limit && kv_valid[j];
                    if visible[j] {
                        row[j] = dot(qi, &k.data[(b * s.lk + j) * d + h * dh..][..dh]) * scale;
                    }
                }
                masked_softmax(row, &visible);
            }
        }
    }
    let drop = draw(noise, probs.len(), Rate::Attention);
    let mut ctx = Mat::zeros(s.batch * s.lq, d);
    for b in 0..s.batch {
        for h in 0..s.heads {
            for i in 0..s.lq {
                let base = ((b * s.heads + h) * s.lq + i) * s.lk;
                let out = &mut ctx.data[(b * s.lq + i) * d + h * dh..][..dh];
                for j in 0..s.lk {
                    let mut pj = probs[base + j];
                    if let Some(m) = &drop {
                        pj = pj * m[base + j];
                    }
                    if pj != T::zero() {
                        axpy(pj, &v.data[(b * s.lk + j) * d + h * dh..][..dh], out);
                    }
                }
            }
        }
    }
    let out = linear_fwd(&p.output, &ctx);
    (out, AttnCache { q, k, v, probs, drop, ctx })
}

/// Returns gradients with respect to the query input and the key/value input.
fn attn_bwd<T: Scalar>(
    p: &Attention<T>,
    g: &mut Attention<T>,
    c: &AttnCache<T>,
    xq: &Mat<T>,
    xkv: &Mat<T>,
    s: AttnShape<'_>,
    dout: &Mat<T>,
) -> (Mat<T>, Mat<T>) {
    let d = xq.cols;
    let dh = d / s.heads;
    let scale = T::of(1.0 / (dh as f64).sqrt());
    let dctx = linear_bwd(&p.output, &mut g.output, &c.ctx, dout);
    let mut dq = Mat::zeros(c.q.rows, d);
    let mut dk = Mat::zeros(c.k.rows, d);
    let mut dv = Mat::zeros(c.v.rows, d);
    let mut dp = vec![T::zero(); s.lk];
    for b in 0..s.batch {
        for h in 0..s.heads {
            for i in 0..s.lq {
                let base = ((b * s.heads + h) * s.lq + i) * s.lk;
                let probs = &c.probs[base..base + s.lk];
                let qrow = (b * s.lq + i) * d + h * dh;
                let g_ctx = &dctx.data[qrow..qrow + dh];
                let mut weighted = T::zero();
                for j in 0..s.lk {
                    dp[j] = T::zero();
                    if probs[j] == T::zero() {
                        continue;
                    }
                    let krow = (b * s.lk + j) * d + h * dh;
                    let keep = c.drop.as_ref().map_or(T::one(), |m| m[base + j]);
                    dp[j] = dot(g_ctx, &c.v.data[krow..krow + dh]) * keep;
                    axpy(probs[j] * keep, g_ctx, &mut dv.data[krow..krow + dh]);
                    weighted = weighted + dp[j] * probs[j];
                }
                for j in 0..s.lk {
                    if probs[j] == T::zero() {
                        continue;
                    }
                    let ds = probs[j] * (dp[j] - weighted) * scale;
                    let krow = (b * s.lk + j) * d + h * dh;
                    axpy(ds, &c.k.data[krow..krow + dh], &mut dq.data[qrow..qrow + dh]);
                    axpy(ds, &c.q.data[qrow..qrow + dh], &mut dk.data[krow..krow + dh]);
                }
            }
        }
    }
    let dxq = linear_bwd(&p.query, &mut g.query, xq, &dq);
    let mut dxkv = linear_bwd(&p.key, &mut g.key, xkv, &dk);
    dxkv.add_assign(&linear_bwd(&p.value, &mut g.value, xkv, &dv));
    (dxq, dxkv)
}

#[derive(Debug, Clone)]
struct FfnCache<T> {
    pre: Mat<T>,
    act: Mat<T>,
    drop: Option<Vec<T>>,
}

fn ffn_fwd<T: Scalar>(p: &FeedForward<T>, x: &Mat<T>, noise: &mut Option<Noise>) -> (Mat<T>, FfnCache<T>) {
    let pre = linear_fwd(&p.up, x);
    let mut act = pre.clone();
    act.data.iter_mut().for_each(|v| *v = v.max(T::zero()));
    let drop = draw(noise, act.data.len(), Rate::Activation);
    apply(&mut act.data, &drop);
    let out = linear_fwd(&p.down, &act);
    (out, FfnCache { pre, act, drop })
}

fn ffn_bwd<T: Scalar>(p: &FeedForward<T>, g: &mut FeedForward<T>, c: &FfnCache<T>, x: &Mat<T>, dy: &Mat<T>) -> Mat<T> {
    let mut dact = linear_bwd(&p.down, &mut g.down, &c.act, dy);
    apply(&mut dact.data, &c.drop);
    for (dv, &pre) in dact.data.iter_mut().zip(&c.pre.data) {
        if pre <= T::zero() {
            *dv = T::zero();
        }
    }
    linear_bwd(&p.up, &mut g.up, x, &dact)
}

/// Encoder output, embedding dropout mask, per-layer caches (`None` for
/// dropped layers) and the final norm cache.
type EncoderPass<T> = (Mat<T>, Option<Vec<T>>, Vec<Option<EncCache<T>>>, LnCache<T>);

#[derive(Debug, Clone)]
struct EncCache<T> {
    ln1: LnCache<T>,
    a1: Mat<T>,
    attn: AttnCache<T>,
    drop1: Option<Vec<T>>,
    ln2: LnCache<T>,
    a2: Mat<T>,
    ffn: FfnCache<T>,
    drop2: Option<Vec<T>>,
}

fn enc_layer_fwd<T: Scalar>(
    p: &EncoderLayer<T>,
    x: &mut Mat<T>,
    s: AttnShape<'_>,
    noise: &mut Option<Noise>,
) -> EncCache<T> {
    let (a1, ln1) = ln_fwd(&p.attn_norm, x);
    let (mut o, attn) = attn_fwd(&p.attn, &a1, &a1, s, noise);
    let drop1 = draw(noise, o.data.len(), Rate::Residual);
    apply(&mut o.data, &drop1);
    x.add_assign(&o);
    let (a2, ln2) = ln_fwd(&p.ffn_norm, x);
    let (mut f, ffn) = ffn_fwd(&p.ffn, &a2, noise);
    let drop2 = draw(noise, f.data.len(), Rate::Residual);
    apply(&mut f.data, &drop2);
    x.add_assign(&f);
    EncCache { ln1, a1, attn, drop1, ln2, a2, ffn, drop2 }
}

/// `dx` enters as the gradient of the layer output and leaves as the gradient
/// of its input.
fn enc_layer_bwd<T: Scalar>(p: &EncoderLayer<T>, g: &mut EncoderLayer<T>, c: &EncCache<T>, s: AttnShape<'_>, dx: &mut Mat<T>) {
    let mut df = dx.clone();
    apply(&mut df.data, &c.drop2);
    let da2 = ffn_bwd(&p.ffn, &mut g.ffn, &c.ffn, &c.a2, &df);
    dx.add_assign(&ln_bwd(&p.ffn_norm, &mut g.ffn_norm, &c.ln2, &da2));
    let mut dattn = dx.clone();
    apply(&mut dattn.data, &c.drop1);
    let (mut da1, dkv) = attn_bwd(&p.attn, &mut g.attn, &c.attn, &c.a1, &c.a1, s, &dattn);
    da1.add_assign(&dkv);
    dx.add_assign(&ln_bwd(&p.attn_norm, &mut g.attn_norm, &c.ln1, &da1));
}

#[derive(Debug, Clone)]
struct DecCache<T> {
    ln1: LnCache<T>,
    a1: Mat<T>,
    self_attn: AttnCache<T>,
    drop1: Option<Vec<T>>,
    ln2: LnCache<T>,
    a2: Mat<T>,
    cross_attn: AttnCache<T>,
    drop2: Option<Vec<T>>,
    ln3: LnCache<T>,
    a3: Mat<T>,
    ffn: FfnCache<T>,
    drop3: Option<Vec<T>>,
}

fn dec_layer_fwd<T: Scalar>(
    p: &DecoderLayer<T>,
    x: &mut Mat<T>,
    memory: &Mat<T>,
    self_shape: AttnShape<'_>,
    cross_shape: AttnShape<'_>,
    noise: &mut Option<Noise>,
) -> DecCache<T> {
    let (a1, ln1) = ln_fwd(&p.self_norm, x);
    let (mut o, self_attn) = attn_fwd(&p.self_attn, &a1, &a1, self_shape, noise);
    let drop1 = draw(noise, o.data.len(), Rate::Residual);
    apply(&mut o.data, &drop1);
    x.add_assign(&o);
    let (a2, ln2) = ln_fwd(&p.cross_norm, x);
    let (mut o, cross_attn) = attn_fwd(&p.cross_attn, &a2, memory, cross_shape, noise);
    let drop2 = draw(noise, o.data.len(), Rate::Residual);
    apply(&mut o.data, &drop2);
    x.add_assign(&o);
    let (a3, ln3) = ln_fwd(&p.ffn_norm, x);
    let (mut f, ffn) = ffn_fwd(&p.ffn, &a3, noise);
    let drop3 = draw(noise, f.data.len(), Rate::Residual);
    apply(&mut f.data, &drop3);
    x.add_assign(&f);
    DecCache { ln1, a1, self_attn, drop1, ln2, a2, cross_attn, drop2, ln3, a3, ffn, drop3 }
}

#[allow(clippy::too_many_arguments)]
fn dec_layer_bwd<T: Scalar>(
    p: &DecoderLayer<T>,
    g: &mut DecoderLayer<T>,
    c: &DecCache<T>,
    memory: &Mat<T>,
    self_shape: AttnShape<'_>,
    cross_shape: AttnShape<'_>,
    dx: &mut Mat<T>,
    dmemory: &mut Mat<T>,
) {
    let mut df = dx.clone();
    apply(&mut df.data, &c.drop3);
    let da3 = ffn_bwd(&p.ffn, &mut g.ffn, &c.ffn, &c.a3, &df);
    dx.add_assign(&ln_bwd(&p.ffn_norm, &mut g.ffn_norm, &c.ln3, &da3));

    let mut dcross = dx.clone();
    apply(&mut dcross.data, &c.drop2);
    let (da2, dmem) = attn_bwd(&p.cross_attn, &mut g.cross_attn, &c.cross_attn, &c.a2, memory, cross_shape, &dcross);
    dmemory.add_assign(&dmem);
    dx.add_assign(&ln_bwd(&p.cross_norm, &mut g.cross_norm, &c.ln2, &da2));

    let mut dself = dx.clone();
    apply(&mut dself.data, &c.drop1);
    let (mut da1, dkv) = attn_bwd(&p.self_attn, &mut g.self_attn, &c.self_attn, &c.a1, &c.a1, self_shape, &dself);
    da1.add_assign(&dkv);
    dx.add_assign(&ln_bwd(&p.self_norm, &mut g.self_norm, &c.ln1, &da1));
}

/// Everything the backward pass needs from one forward pass.
#[derive(Debug, Clone)]
pub struct Tape<T> {
    batch: usize,
    src_len: usize,
    tgt_len: usize,
    src_ids: Vec<u32>,
    tgt_ids: Vec<u32>,
    src_valid: Vec<bool>,
    tgt_valid: Vec<bool>,
    enc_embed_drop: Option<Vec<T>>,
    dec_embed_drop: Option<Vec<T>>,
    /// `None` marks a layer skipped by layer drop.
    enc: Vec<Option<EncCache<T>>>,
    enc_norm: LnCache<T>,
    memory: Mat<T>,
    dec: Vec<Option<DecCache<T>>>,
    dec_norm: LnCache<T>,
    dec_out: Mat<T>,
}

impl<T: Scalar> Transformer<T> {
    /// `sqrt(d) * E[id] + position(t)` for every row of an id matrix.
    pub(crate) fn embed(&self, ids: &[u32], len: usize) -> Mat<T> {
        let d = self.config.d_model;
        let scale = T::of((d as f64).sqrt());
        let rows = ids.len();
        let mut x = Mat::zeros(rows, d);
        for (r, &id) in ids.iter().enumerate() {
            let e = &self.params.embedding.data[id as usize * d..][..d];
            let pos = self.position(r % len);
            let out = x.row_mut(r);
            for c in 0..d {
                out[c] = e[c] * scale + pos[c];
            }
        }
        x
    }

    pub(crate) fn check_ids(&self, ids: &[u32]) -> Result<(), ModelError> {
        let v = self.config.vocab_size as u32;
        match ids.iter().find(|&&id| id >= v) {
            Some(&id) => Err(ModelError::InvalidConfig(format!("token id {id} outside vocabulary of {v}"))),
            None => Ok(()),
        }
    }

    pub(crate) fn check_lengths(&self, src_len: usize, tgt_len: usize) -> Result<(), ModelError> {
        if src_len > self.config.max_source_len {
            return Err(ModelError::LengthExceeded { side: "source", len: src_len, max: self.config.max_source_len });
        }
        if tgt_len > self.config.max_target_len {
            return Err(ModelError::LengthExceeded { side: "target", len: tgt_len, max: self.config.max_target_len });
        }
        Ok(())
    }

    /// Encoder stack over a padded id matrix; returns the normed memory.
    fn encode_tape(
        &self,
        src: &[u32],
        batch: usize,
        src_len: usize,
        src_valid: &[bool],
        noise: &mut Option<Noise>,
    ) -> EncoderPass<T> {
        let heads = self.config.heads;
        let mut x = self.embed(src, src_len);
        let embed_drop = draw(noise, x.data.len(), Rate::Residual);
        apply(&mut x.data, &embed_drop);
        let shape = AttnShape { batch, lq: src_len, lk: src_len, heads, key_valid: src_valid, causal: false };
        let mut caches = Vec::with_capacity(self.params.encoder.len());
        for layer in &self.params.encoder {
            if noise.as_mut().is_some_and(|z| z.skip_layer()) {
                caches.push(None);
                continue;
            }
            caches.push(Some(enc_layer_fwd(layer, &mut x, shape, noise)));
        }
        let (memory, norm) = ln_fwd(&self.params.encoder_norm, &x);
        (memory, embed_drop, caches, norm)
    }

    /// Encoder output for a padded batch, no dropout.
    pub(crate) fn encode_batch(&self, src: &[u32], batch: usize, src_len: usize) -> (Mat<T>, Vec<bool>) {
        let valid: Vec<bool> = src.iter().map(|&t| t != Vocab::PAD).collect();
        let (memory, ..) = self.encode_tape(src, batch, src_len, &valid, &mut None);
        (memory, valid)
    }

    /// Full teacher-forced pass. With `noise`, dropout and layer drop are
    /// active; without, the pass is deterministic.
    pub fn forward(&self, batch: &Batch, mut noise: Option<Noise>) -> Result<(Mat<T>, Tape<T>), ModelError> {
        self.check_lengths(batch.src_len, batch.tgt_len)?;
        self.check_ids(&batch.src)?;
        self.check_ids(&batch.tgt_in)?;
        let heads = self.config.heads;
        let src_valid: Vec<bool> = batch.src.iter().map(|&t| t != Vocab::PAD).collect();
        let tgt_valid: Vec<bool> = batch.tgt_in.iter().map(|&t| t != Vocab::PAD).collect();
        let (memory, enc_embed_drop, enc, enc_norm) =
            self.encode_tape(&batch.src, batch.size, batch.src_len, &src_valid, &mut noise);

        let mut x = self.embed(&batch.tgt_in, batch.tgt_len.max(1));
        let dec_embed_drop = draw(&mut noise, x.data.len(), Rate::Residual);
        apply(&mut x.data, &dec_embed_drop);
        let self_shape = AttnShape {
            batch: batch.size,
            lq: batch.tgt_len,
            lk: batch.tgt_len,
            heads,
            key_valid: &tgt_valid,
            causal: true,
        };
        let cross_shape = AttnShape {
            batch: batch.size,
            lq: batch.tgt_len,
            lk: batch.src_len,
            heads,
            key_valid: &src_valid,
            causal: false,
        };
        let mut dec = Vec::with_capacity(self.params.decoder.len());
        for layer in &self.params.decoder {
            if noise.as_mut().is_some_and(|z| z.skip_layer()) {
                dec.push(None);
                continue;
            }
            dec.push(Some(dec_layer_fwd(layer, &mut x, &memory, self_shape, cross_shape, &mut noise)));
        }
        let (dec_out, dec_norm) = ln_fwd(&self.params.decoder_norm, &x);
        let logits = self.project(&dec_out);
        let tape = Tape {
            batch: batch.size,
            src_len: batch.src_len,
            tgt_len: batch.tgt_len,
            src_ids: batch.src.clone(),
            tgt_ids: batch.tgt_in.clone(),
            src_valid,
            tgt_valid,
            enc_embed_drop,
            dec_embed_drop,
            enc,
            enc_norm,
            memory,
            dec,
            dec_norm,
            dec_out,
        };
        Ok((logits, tape))
    }

    /// Hidden states times the embedding transposed.
    pub(crate) fn project(&self, hidden: &Mat<T>) -> Mat<T> {
        let v = self.config.vocab_size;
        let d = self.config.d_model;
        let mut logits = Mat::zeros(hidden.rows, v);
        gemm(&hidden.data, hidden.shape(), false, &self.params.embedding.data, (v, d), true, &mut logits.data, T::zero());
        logits
    }

    /// Deterministic logits `[batch * tgt_len, vocab]`.
    pub fn logits(&self, batch: &Batch) -> Result<Mat<T>, ModelError> {
        Ok(self.forward(batch, None)?.0)
    }

    /// Logits for one source and a teacher-forced decoder input
    /// (BOS followed by the gold prefix).
    pub fn forward_single(&self, source: &[u32], decoder_input: &[u32]) -> Result<Mat<T>, ModelError> {
        let mut target = decoder_input.to_vec();
        target.push(Vocab::EOS);
        self.logits(&Batch::from_pairs(&[(source, &target)]))
    }

    /// Parameter gradients given the gradient of the loss with respect to the
    /// logits.
    pub fn backward(&self, tape: &Tape<T>, dlogits: &Mat<T>) -> Params<T> {
        let cfg = &self.config;
        let d = cfg.d_model;
        let v = cfg.vocab_size;
        let heads = cfg.heads;
        let mut g = Params::zeros(cfg);

        gemm(&dlogits.data, dlogits.shape(), true, &tape.dec_out.data, tape.dec_out.shape(), false, &mut g.embedding.data, T::one());
        let mut dh = Mat::zeros(dlogits.rows, d);
        gemm(&dlogits.data, dlogits.shape(), false, &self.params.embedding.data, (v, d), false, &mut dh.data, T::zero());
        let mut dx = ln_bwd(&self.params.decoder_norm, &mut g.decoder_norm, &tape.dec_norm, &dh);

        let self_shape = AttnShape {
            batch: tape.batch,
            lq: tape.tgt_len,
            lk: tape.tgt_len,
            heads,
            key_valid: &tape.tgt_valid,
            causal: true,
        };
        let cross_shape = AttnShape {
            batch: tape.batch,
            lq: tape.tgt_len,
            lk: tape.src_len,
            heads,
            key_valid: &tape.src_valid,
            causal: false,
        };
        let mut dmemory = Mat::zeros(tape.memory.rows, d);
        for (i, cache) in tape.dec.iter().enumerate().rev() {
            if let Some(c) = cache {
                dec_layer_bwd(&self.params.decoder[i], &mut g.decoder[i], c, &tape.memory, self_shape, cross_shape, &mut dx, &mut dmemory);
            }
        }
        apply(&mut dx.data, &tape.dec_embed_drop);
        self.scatter_embedding(&mut g, &tape.tgt_ids, &dx);

        let mut dx = ln_bwd(&self.params.encoder_norm, &mut g.encoder_norm, &tape.enc_norm, &dmemory);
        let enc_shape = AttnShape {
            batch: tape.batch,
            lq: tape.src_len,
            lk: tape.src_len,
            heads,
            key_valid: &tape.src_valid,
            causal: false,
        };
        for (i, cache) in tape.enc.iter().enumerate().rev() {
            if let Some(c) = cache {
                enc_layer_bwd(&self.params.encoder[i], &mut g.encoder[i], c, enc_shape, &mut dx);
            }
        }
        apply(&mut dx.data, &tape.enc_embed_drop);
        self.scatter_embedding(&mut g, &tape.src_ids, &dx);
        g
    }

    fn scatter_embedding(&self, g: &mut Params<T>, ids: &[u32], dx: &Mat<T>) {
        let d = self.config.d_model;
        let scale = T::of((d as f64).sqrt());
        for (r, &id) in ids.iter().enumerate() {
            axpy(scale, dx.row(r), &mut g.embedding.data[id as usize * d..][..d]);
        }
    }

    /// Loss and gradients of one batch. `denominator` is the number of gold
    /// tokens the loss is averaged over, which exceeds this batch's own count
    /// when it is one slice of a larger batch.
    pub fn loss_and_grads(&self, batch: &Batch, noise: Option<Noise>, denominator: usize) -> Result<(f64, Params<T>), ModelError> {
        let (logits, tape) = self.forward(batch, noise)?;
        let (loss, dlogits) = cross_entropy(&logits, &batch.tgt_out, denominator);
        Ok((loss, self.backward(&tape, &dlogits)))
    }
}

/// Summed token cross-entropy divided by `denominator`, over positions whose
/// gold id is not PAD, and its gradient with respect to the logits.
pub fn cross_entropy<T: Scalar>(logits: &Mat<T>, gold: &[u32], denominator: usize) -> (f64, Mat<T>) {
    assert_eq!(logits.rows, gold.len());
    let mut grad = Mat::zeros(logits.rows, logits.cols);
    if denominator == 0 {
        return (0.0, grad);
    }
    let inv = T::of(1.0 / denominator as f64);
    let mut total = 0.0;
    for (r, &y) in gold.iter().enumerate() {
        if y == Vocab::PAD {
            continue;
        }
        let row = logits.row(r);
        let max = row.iter().fold(T::neg_infinity(), |a, &b| a.max(b));
        let sum = row.iter().fold(T::zero(), |a, &b| a + (b - max).exp());
        let log_z = max + sum.ln();
        total += (log_z - row[y as usize]).as_f64();
        let out = grad.row_mut(r);
        for (c, o) in out.iter_mut().enumerate() {
            *o = (row[c] - log_z).exp() * inv;
        }
        out[y as usize] = out[y as usize] - inv;
    }
    (total / denominator as f64, grad)
}

/// Mean cross-entropy of a batch without dropout.
pub fn batch_loss<T: Scalar>(model: &Transformer<T>, batch: &Batch) -> Result<f64, ModelError> {
    let logits = model.logits(batch)?;
    Ok(cross_entropy(&logits, &batch.tgt_out, batch.target_tokens()).0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::init_model;

    pub(crate) fn tiny_config() -> ModelConfig {
        ModelConfig {
            enc_layers: 2,
            dec_layers: 2,
            d_model: 8,
            d_ffn: 8,
            heads: 2,
            dropout: 0.1,
            attention_dropout: 0.1,
            activation_dropout: 0.1,
            layer_drop: 0.2,
            max_source_len: 16,
            max_target_len: 16,
            vocab_size: 12,
        }
    }

    #[test]
    fn softmax_masks_and_normalizes() {
        let mut s = vec![1.0f64, 2.0, 3.0];
        assert!(masked_softmax(&mut s, &[true, false, true]));
        assert_eq!(s[1], 0.0);
        assert!((s[0] + s[2] - 1.0).abs() < 1e-12);
        let mut none = vec![1.0f64];
        assert!(!masked_softmax(&mut none, &[false]));
        assert_eq!(none[0], 0.0);
    }

    #[test]
    fn cross_entropy_of_uniform_logits() {
        let logits = Mat::<f64>::zeros(3, 4);
        let (loss, grad) = cross_entropy(&logits, &[5 % 4, 0, 2], 2);
        assert!((loss - 4f64.ln()).abs() < 1e-12);
        assert!(grad.row(1).iter().all(|&g| g == 0.0));
        assert!((grad.row(0).iter().sum::<f64>()).abs() < 1e-12);
    }

    #[test]
    fn eval_forward_is_deterministic() {
        let m = init_model::<f32>(&tiny_config(), 12, 9).unwrap();
        let b = Batch::from_pairs(&[(&[4, 5, 6, 2], &[1, 7, 8, 2]), (&[4, 2], &[1, 9, 2])]);
        assert_eq!(m.logits(&b).unwrap(), m.logits(&b).unwrap());
    }

    #[test]
    fn over_long_source_rejected() {
        let m = init_model::<f32>(&tiny_config(), 12, 9).unwrap();
        let src = vec![4u32; 17];
        let b = Batch::from_pairs(&[(&src, &[1, 2])]);
        assert!(matches!(m.logits(&b), Err(ModelError::LengthExceeded { side: "source", .. })));
    }

    #[test]
    fn out_of_vocab_id_rejected() {
        let m = init_model::<f32>(&tiny_config(), 12, 9).unwrap();
        let b = Batch::from_pairs(&[(&[40, 2], &[1, 2])]);
        assert!(matches!(m.logits(&b), Err(ModelError::InvalidConfig(_))));
    }
}
