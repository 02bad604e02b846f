//! Greedy decoding with cached keys and values.

use super::forward::{linear_fwd, ln_fwd, masked_softmax};
use super::params::{Attention, FeedForward, Transformer};
use super::tensor::{axpy, dot, Mat, Scalar};
use super::ModelError;
use crate::sampler::Vocab;
use crate::sampler::{decode_target, Batch};

/// One generated form.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Decoded {
    /// Generated ids without the final EOS.
    pub ids: Vec<u32>,
    pub form: String,
    /// No EOS within the length limit.
    pub truncated: bool,
}

impl Decoded {
    pub fn is_empty(&self) -> bool {
        self.form.is_empty()
    }
}

/// Incremental decoder over a fixed batch of encoded sources.
pub(crate) struct DecodeState<'m, T> {
    model: &'m Transformer<T>,
    batch: usize,
    capacity: usize,
    src_len: usize,
    src_valid: Vec<bool>,
    cross_k: Vec<Mat<T>>,
    cross_v: Vec<Mat<T>>,
    /// Per layer `[batch, capacity, d]`.
    self_k: Vec<Vec<T>>,
    self_v: Vec<Vec<T>>,
    step: usize,
}

fn ffn_eval<T: Scalar>(p: &FeedForward<T>, x: &Mat<T>) -> Mat<T> {
    let mut h = linear_fwd(&p.up, x);
    h.data.iter_mut().for_each(|v| *v = v.max(T::zero()));
    linear_fwd(&p.down, &h)
}

impl<'m, T: Scalar> DecodeState<'m, T> {
    pub(crate) fn new(model: &'m Transformer<T>, sources: &[&[u32]], capacity: usize) -> Result<Self, ModelError> {
        let pairs: Vec<(&[u32], &[u32])> = sources.iter().map(|s| (*s, &[][..])).collect();
        let padded = Batch::from_pairs(&pairs);
        model.check_lengths(padded.src_len, capacity)?;
        model.check_ids(&padded.src)?;
        let (memory, src_valid) = model.encode_batch(&padded.src, padded.size, padded.src_len);
        let d = model.config.d_model;
        let layers = &model.params.decoder;
        Ok(Self {
            model,
            batch: padded.size,
            capacity,
            src_len: padded.src_len,
            src_valid,
            cross_k: layers.iter().map(|l| linear_fwd(&l.cross_attn.key, &memory)).collect(),
            cross_v: layers.iter().map(|l| linear_fwd(&l.cross_attn.value, &memory)).collect(),
            self_k: layers.iter().map(|_| vec![T::zero(); padded.size * capacity * d]).collect(),
            self_v: layers.iter().map(|_| vec![T::zero(); padded.size * capacity * d]).collect(),
            step: 0,
        })
    }

    /// Feeds one token per sequence; returns logits `[batch, vocab]` for the
    /// next position.
    pub(crate) fn step(&mut self, tokens: &[u32]) -> Mat<T> {
        assert_eq!(tokens.len(), self.batch);
        assert!(self.step < self.capacity, "decode capacity exhausted");
        let m = self.model;
        let d = m.config.d_model;
        let heads = m.config.heads;
        let dh = d / heads;
        let scale = T::of(1.0 / (dh as f64).sqrt());
        let t = self.step;
        let emb_scale = T::of((d as f64).sqrt());
        let mut x = Mat::zeros(self.batch, d);
        for (b, &id) in tokens.iter().enumerate() {
            let e = &m.params.embedding.data[id as usize * d..][..d];
            let pos = m.position(t);
            let out = x.row_mut(b);
            for c in 0..d {
                out[c] = e[c] * emb_scale + pos[c];
            }
        }
        let mut scores = vec![T::zero(); self.src_len.max(t + 1)];
        for (l, layer) in m.params.decoder.iter().enumerate() {
            let a = ln_fwd(&layer.self_norm, &x).0;
            let sa: &Attention<T> = &layer.self_attn;
            let q = linear_fwd(&sa.query, &a);
            let k = linear_fwd(&sa.key, &a);
            let v = linear_fwd(&sa.value, &a);
            for b in 0..self.batch {
                let at = (b * self.capacity + t) * d;
                self.self_k[l][at..at + d].copy_from_slice(k.row(b));
                self.self_v[l][at..at + d].copy_from_slice(v.row(b));
            }
            let all = vec![true; t + 1];
            let mut ctx = Mat::zeros(self.batch, d);
            for b in 0..self.batch {
                for h in 0..heads {
                    let qh = &q.row(b)[h * dh..(h + 1) * dh];
                    let row = &mut scores[..t + 1];
                    for (j, s) in row.iter_mut().enumerate() {
                        let at = (b * self.capacity + j) * d + h * dh;
                        *s = dot(qh, &self.self_k[l][at..at + dh]) * scale;
                    }
                    masked_softmax(row, &all);
                    let out = &mut ctx.row_mut(b)[h * dh..(h + 1) * dh];
                    for (j, &p) in row.iter().enumerate() {
                        let at = (b * self.capacity + j) * d + h * dh;
                        axpy(p, &self.self_v[l][at..at + dh], out);
                    }
                }
            }
            x.add_assign(&linear_fwd(&sa.output, &ctx));

            let a = ln_fwd(&layer.cross_norm, &x).0;
            let q = linear_fwd(&layer.cross_attn.query, &a);
            let mut ctx = Mat::zeros(self.batch, d);
            for b in 0..self.batch {
                let valid = &self.src_valid[b * self.src_len..(b + 1) * self.src_len];
                for h in 0..heads {
                    let qh = &q.row(b)[h * dh..(h + 1) * dh];
                    let row = &mut scores[..self.src_len];
                    for (j, s) in row.iter_mut().enumerate() {
                        *s = if valid[j] {
                            dot(qh, &self.cross_k[l].row(b * self.src_len + j)[h * dh..(h + 1) * dh]) * scale
                        } else {
                            T::zero()
                        };
                    }
                    masked_softmax(row, valid);
                    let out = &mut ctx.row_mut(b)[h * dh..(h + 1) * dh];
                    for (j, &p) in row.iter().enumerate() {
                        if p != T::zero() {
                            axpy(p, &self.cross_v[l].row(b * self.src_len + j)[h * dh..(h + 1) * dh], out);
                        }
                    }
                }
            }
            x.add_assign(&linear_fwd(&layer.cross_attn.output, &ctx));

            let a = ln_fwd(&layer.ffn_norm, &x).0;
            x.add_assign(&ffn_eval(&layer.ffn, &a));
        }
        self.step += 1;
        let h = ln_fwd(&m.params.decoder_norm, &x).0;
        m.project(&h)
    }
}

/// Highest logit among allowed ids; ties go to the lower id.
fn argmax_allowed<T: Scalar>(row: &[T], allowed: &[bool]) -> u32 {
    let mut best = None;
    for (i, (&v, &ok)) in row.iter().zip(allowed).enumerate() {
        if ok && best.is_none_or(|(_, b)| v > b) {
            best = Some((i, v));
        }
    }
    best.map_or(Vocab::EOS, |(i, _)| i as u32)
}

impl<T: Scalar> Transformer<T> {
    /// Greedy decoding of several sources together. `allowed[id]` says
    /// whether `id` may be emitted; at most `max_len` tokens are generated.
    pub fn greedy_batch(&self, sources: &[&[u32]], max_len: usize, allowed: &[bool]) -> Result<Vec<(Vec<u32>, bool)>, ModelError> {
        assert_eq!(allowed.len(), self.config.vocab_size);
        if sources.is_empty() {
            return Ok(Vec::new());
        }
        let max_len = max_len.min(self.config.max_target_len);
        let mut state = DecodeState::new(self, sources, max_len.max(1))?;
        let mut tokens = vec![Vocab::BOS; sources.len()];
        let mut out: Vec<Vec<u32>> = vec![Vec::new(); sources.len()];
        let mut finished = vec![false; sources.len()];
        for _ in 0..max_len {
            let logits = state.step(&tokens);
            for b in 0..sources.len() {
                if finished[b] {
                    continue;
                }
                let next = argmax_allowed(logits.row(b), allowed);
                if next == Vocab::EOS {
                    finished[b] = true;
                } else {
                    out[b].push(next);
                }
                tokens[b] = next;
            }
            if finished.iter().all(|&f| f) {
                break;
            }
        }
        Ok(out.into_iter().zip(finished).map(|(ids, f)| (ids, !f)).collect())
    }
}

/// Output mask: characters and EOS only.
pub fn output_mask(vocab: &Vocab) -> Vec<bool> {
    (0..vocab.len() as u32).map(|id| vocab.output_allowed(id)).collect()
}

/// Greedy decoding of a single encoded source.
pub fn decode_greedy<T: Scalar>(
    model: &Transformer<T>,
    vocab: &Vocab,
    source: &[u32],
    max_len: usize,
) -> Result<Decoded, ModelError> {
    Ok(decode_many(model, vocab, &[source], max_len, 1)?.remove(0))
}

/// Greedy decoding of many sources, `chunk` at a time, in input order.
pub fn decode_many<T: Scalar>(
    model: &Transformer<T>,
    vocab: &Vocab,
    sources: &[&[u32]],
    max_len: usize,
    chunk: usize,
) -> Result<Vec<Decoded>, ModelError> {
    if vocab.len() != model.config.vocab_size {
        return Err(ModelError::InvalidConfig(format!(
            "vocabulary has {} entries, model expects {}",
            vocab.len(),
            model.config.vocab_size
        )));
    }
    let allowed = output_mask(vocab);
    let mut out = Vec::with_capacity(sources.len());
    for part in sources.chunks(chunk.max(1)) {
        for (ids, truncated) in model.greedy_batch(part, max_len, &allowed)? {
            let form = decode_target(&ids, vocab);
            out.push(Decoded { ids, form, truncated });
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{init_model, ModelConfig};

    fn cfg() -> ModelConfig {
        ModelConfig {
            enc_layers: 2,
            dec_layers: 2,
            d_model: 16,
            d_ffn: 8,
            heads: 4,
            max_source_len: 12,
            max_target_len: 10,
            ..ModelConfig::monolingual(14)
        }
    }

    #[test]
    fn incremental_matches_full_forward() {
        let m = init_model::<f64>(&cfg(), 14, 2).unwrap();
        let sources: [&[u32]; 2] = [&[5, 6, 7, 12, 2], &[8, 12, 2]];
        let prefixes: [&[u32]; 2] = [&[1, 4, 9, 10], &[1, 11, 6, 5]];
        let mut state = DecodeState::new(&m, &sources, 4).unwrap();
        for t in 0..4 {
            let step = state.step(&[prefixes[0][t], prefixes[1][t]]);
            for b in 0..2 {
                let full = m.forward_single(sources[b], prefixes[b]).unwrap();
                for (x, y) in step.row(b).iter().zip(full.row(t)) {
                    assert!((x - y).abs() < 1e-9, "b={b} t={t}");
                }
            }
        }
    }

    #[test]
    fn batching_does_not_change_results() {
        let m = init_model::<f32>(&cfg(), 14, 4).unwrap();
        let allowed: Vec<bool> = (0..14).map(|i| i == 2 || (4..10).contains(&i)).collect();
        let sources: [&[u32]; 3] = [&[5, 6, 7, 12, 2], &[8, 12, 2], &[4, 4, 4, 4, 4, 13, 2]];
        let together = m.greedy_batch(&sources, 10, &allowed).unwrap();
        for (i, s) in sources.iter().enumerate() {
            assert_eq!(m.greedy_batch(&[s], 10, &allowed).unwrap()[0], together[i]);
        }
        for (ids, _) in &together {
            assert!(ids.iter().all(|&id| allowed[id as usize] && id != 2));
        }
    }

    #[test]
    fn eos_only_mask_gives_empty_output() {
        let m = init_model::<f32>(&cfg(), 14, 4).unwrap();
        let mut allowed = vec![false; 14];
        allowed[2] = true;
        let out = m.greedy_batch(&[&[5, 2]], 10, &allowed).unwrap();
        assert_eq!(out[0], (vec![], false));
    }

    #[test]
    fn no_eos_is_truncated() {
        let m = init_model::<f32>(&cfg(), 14, 4).unwrap();
        let mut allowed = vec![false; 14];
        allowed[5] = true;
        let out = m.greedy_batch(&[&[5, 2]], 3, &allowed).unwrap();
        assert_eq!(out[0], (vec![5, 5, 5], true));
    }

    #[test]
    fn argmax_ties_pick_lower_id() {
        assert_eq!(argmax_allowed(&[1.0f32, 3.0, 3.0], &[true, true, true]), 1);
        assert_eq!(argmax_allowed(&[1.0f32, 3.0, 3.0], &[true, false, true]), 2);
    }
}
