//! Vocabulary, example encoding and temperature-balanced epochs.
//!
//! A training example's source is the lemma's characters, the language-id
//! token, the tag tokens and EOS; its target is BOS, the form's characters and
//! EOS. Corpora of different sizes are balanced by repeating each one an
//! integer number of times so that language `i` contributes roughly
//! `q_i = n_i^M / sum_j n_j^M` of an epoch.

mod vocab;

use std::collections::BTreeMap;

use thiserror::Error;

use crate::rng::DetRng;
use crate::triples::{Triple, TripleSet};

pub use vocab::{Token, Vocab};

const SHUFFLE_DOMAIN: &str = "epoch-shuffle";

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SamplerError {
    #[error("no training data")]
    EmptyTrain,
    #[error("no corpora given")]
    EmptyCorpusSet,
    #[error("corpus {0:?} has size 0")]
    EmptyCorpus(String),
    #[error("temperature {0} outside [0, 1]")]
    BadTemperature(f64),
    #[error("batch size must be positive")]
    BadBatchSize,
    #[error("malformed vocabulary: {0}")]
    BadVocab(String),
}

/// One triple as token ids.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EncodedExample {
    pub source: Vec<u32>,
    pub target: Vec<u32>,
    pub language: String,
    /// Loss weight; every type counts once.
    pub weight: u32,
}

/// Source ids: lemma characters, language id, tags, EOS. Unknown symbols
/// (including an unknown language) become UNK.
pub fn encode_source<S: AsRef<str>>(lemma: &str, tags: &[S], language: &str, vocab: &Vocab) -> Vec<u32> {
    let mut ids: Vec<u32> = lemma.chars().map(|c| vocab.char_id(c)).collect();
    ids.push(vocab.lang_id(language).unwrap_or(Vocab::UNK));
    ids.extend(tags.iter().map(|t| vocab.tag_id(t.as_ref())));
    ids.push(Vocab::EOS);
    ids
}

/// Target ids: BOS, form characters, EOS.
pub fn encode_target(form: &str, vocab: &Vocab) -> Vec<u32> {
    std::iter::once(Vocab::BOS)
        .chain(form.chars().map(|c| vocab.char_id(c)))
        .chain(std::iter::once(Vocab::EOS))
        .collect()
}

pub fn encode(triple: &Triple, vocab: &Vocab) -> EncodedExample {
    EncodedExample {
        source: encode_source(&triple.lemma, &triple.tags, &triple.language, vocab),
        target: encode_target(&triple.form, vocab),
        language: triple.language.clone(),
        weight: 1,
    }
}

/// Encodes every triple of a set in canonical order.
pub fn encode_set(set: &TripleSet, vocab: &Vocab) -> Vec<EncodedExample> {
    set.iter().map(|t| encode(&t.to_triple(set.language()), vocab)).collect()
}

/// Inverse of [`encode_source`]: `(lemma, language, tags)`, or `None` if the
/// layout is broken or an UNK is present.
pub fn decode_source(ids: &[u32], vocab: &Vocab) -> Option<(String, String, Vec<String>)> {
    let (last, body) = ids.split_last()?;
    if *last != Vocab::EOS {
        return None;
    }
    let mut lemma = String::new();
    let mut language = None;
    let mut tags = Vec::new();
    for &id in body {
        match (vocab.token(id)?, &language) {
            (Token::Char(c), None) => lemma.push(*c),
            (Token::Lang(l), None) => language = Some(l.clone()),
            (Token::Tag(t), Some(_)) => tags.push(t.clone()),
            _ => return None,
        }
    }
    Some((lemma, language?, tags))
}

/// Characters of a generated id sequence, stopping at EOS.
pub fn decode_target(ids: &[u32], vocab: &Vocab) -> String {
    ids.iter()
        .take_while(|&&id| id != Vocab::EOS)
        .filter_map(|&id| match vocab.token(id) {
            Some(Token::Char(c)) => Some(*c),
            _ => None,
        })
        .collect()
}

/// `q_i = n_i^M / sum_j n_j^M`.
pub fn sampling_weights(
    corpus_sizes: &BTreeMap<String, usize>,
    temperature: f64,
) -> Result<BTreeMap<String, f64>, SamplerError> {
    if corpus_sizes.is_empty() {
        return Err(SamplerError::EmptyCorpusSet);
    }
    if !(0.0..=1.0).contains(&temperature) {
        return Err(SamplerError::BadTemperature(temperature));
    }
    if let Some((lang, _)) = corpus_sizes.iter().find(|(_, &n)| n == 0) {
        return Err(SamplerError::EmptyCorpus(lang.clone()));
    }
    let scaled: BTreeMap<&String, f64> = corpus_sizes
        .iter()
        .map(|(l, &n)| (l, (n as f64).powf(temperature)))
        .collect();
    let z: f64 = scaled.values().sum();
    Ok(scaled.into_iter().map(|(l, s)| (l.clone(), s / z)).collect())
}

/// Repetition factor per corpus: `max(1, round(q_i * N / n_i))`.
pub fn upsample_plan(
    corpus_sizes: &BTreeMap<String, usize>,
    temperature: f64,
) -> Result<BTreeMap<String, usize>, SamplerError> {
    let q = sampling_weights(corpus_sizes, temperature)?;
    let total: usize = corpus_sizes.values().sum();
    Ok(corpus_sizes
        .iter()
        .map(|(l, &n)| {
            let r = (q[l] * total as f64 / n as f64).round();
            (l.clone(), (r as usize).max(1))
        })
        .collect())
}

#[derive(Debug, Clone, PartialEq)]
pub struct SamplerConfig {
    pub temperature: f64,
    pub batch_size: usize,
    pub seed: u64,
}

impl SamplerConfig {
    pub fn monolingual(seed: u64) -> Self {
        Self { temperature: 0.5, batch_size: 512, seed }
    }

    pub fn multilingual(seed: u64) -> Self {
        Self { temperature: 0.5, batch_size: 1024, seed }
    }
}

/// Padded id matrices for one batch. Decoder input is the target without its
/// last token; the gold output is the target without BOS.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Batch {
    pub size: usize,
    pub src_len: usize,
    pub tgt_len: usize,
    /// `size * src_len`, row-major, PAD-filled.
    pub src: Vec<u32>,
    /// `size * tgt_len`
    pub tgt_in: Vec<u32>,
    /// `size * tgt_len`
    pub tgt_out: Vec<u32>,
}

impl Batch {
    pub fn from_examples<'a, I>(examples: I) -> Self
    where
        I: IntoIterator<Item = &'a EncodedExample>,
    {
        let examples: Vec<&EncodedExample> = examples.into_iter().collect();
        let pairs: Vec<(&[u32], &[u32])> = examples
            .iter()
            .map(|e| (e.source.as_slice(), e.target.as_slice()))
            .collect();
        Self::from_pairs(&pairs)
    }

    /// Builds a batch from `(source, full target)` id slices.
    pub fn from_pairs(pairs: &[(&[u32], &[u32])]) -> Self {
        let size = pairs.len();
        let src_len = pairs.iter().map(|p| p.0.len()).max().unwrap_or(0);
        let tgt_len = pairs.iter().map(|p| p.1.len().saturating_sub(1)).max().unwrap_or(0);
        let mut src = vec![Vocab::PAD; size * src_len];
        let mut tgt_in = vec![Vocab::PAD; size * tgt_len];
        let mut tgt_out = vec![Vocab::PAD; size * tgt_len];
        for (b, (s, t)) in pairs.iter().enumerate() {
            src[b * src_len..b * src_len + s.len()].copy_from_slice(s);
            if t.len() > 1 {
                let n = t.len() - 1;
                tgt_in[b * tgt_len..b * tgt_len + n].copy_from_slice(&t[..n]);
                tgt_out[b * tgt_len..b * tgt_len + n].copy_from_slice(&t[1..]);
            }
        }
        Self { size, src_len, tgt_len, src, tgt_in, tgt_out }
    }

    /// Number of non-PAD gold positions.
    pub fn target_tokens(&self) -> usize {
        self.tgt_out.iter().filter(|&&t| t != Vocab::PAD).count()
    }

    /// Consecutive row slices of at most `rows` examples, each re-padded to
    /// its own maximum lengths.
    pub fn split_rows(&self, rows: usize) -> Vec<Batch> {
        assert!(rows > 0);
        if self.size <= rows {
            return vec![self.clone()];
        }
        let used = |ids: &[u32]| ids.iter().rposition(|&t| t != Vocab::PAD).map_or(0, |p| p + 1);
        (0..self.size)
            .step_by(rows)
            .map(|start| {
                let end = (start + rows).min(self.size);
                let src_rows: Vec<&[u32]> = (start..end).map(|b| &self.src[b * self.src_len..(b + 1) * self.src_len]).collect();
                let tgt_rows: Vec<usize> = (start..end).collect();
                let src_len = src_rows.iter().map(|r| used(r)).max().unwrap_or(0);
                let tgt_len = tgt_rows
                    .iter()
                    .map(|&b| used(&self.tgt_out[b * self.tgt_len..(b + 1) * self.tgt_len]))
                    .max()
                    .unwrap_or(0);
                let size = end - start;
                let mut out = Batch {
                    size,
                    src_len,
                    tgt_len,
                    src: Vec::with_capacity(size * src_len),
                    tgt_in: Vec::with_capacity(size * tgt_len),
                    tgt_out: Vec::with_capacity(size * tgt_len),
                };
                for (i, &b) in tgt_rows.iter().enumerate() {
                    out.src.extend_from_slice(&src_rows[i][..src_len]);
                    let t0 = b * self.tgt_len;
                    out.tgt_in.extend_from_slice(&self.tgt_in[t0..t0 + tgt_len]);
                    out.tgt_out.extend_from_slice(&self.tgt_out[t0..t0 + tgt_len]);
                }
                out
            })
            .collect()
    }
}

/// Upsampled training pool from which shuffled epochs are cut.
#[derive(Debug, Clone)]
pub struct EpochPlan {
    examples: Vec<EncodedExample>,
    /// Pool entries as indices into `examples`, corpora repeated.
    pool: Vec<usize>,
    pub repeats: BTreeMap<String, usize>,
    pub config: SamplerConfig,
}

impl EpochPlan {
    pub fn new(train: &[&TripleSet], vocab: &Vocab, config: SamplerConfig) -> Result<Self, SamplerError> {
        if config.batch_size == 0 {
            return Err(SamplerError::BadBatchSize);
        }
        let mut by_lang: BTreeMap<String, &TripleSet> = BTreeMap::new();
        for set in train.iter().filter(|s| !s.is_empty()) {
            by_lang.insert(set.language().to_owned(), set);
        }
        if by_lang.is_empty() {
            return Err(SamplerError::EmptyTrain);
        }
        let sizes: BTreeMap<String, usize> = by_lang.iter().map(|(l, s)| (l.clone(), s.len())).collect();
        let repeats = upsample_plan(&sizes, config.temperature)?;
        let mut examples = Vec::new();
        let mut pool = Vec::new();
        for (lang, set) in &by_lang {
            let start = examples.len();
            examples.extend(encode_set(set, vocab));
            for _ in 0..repeats[lang] {
                pool.extend(start..examples.len());
            }
        }
        Ok(Self { examples, pool, repeats, config })
    }

    pub fn pool_len(&self) -> usize {
        self.pool.len()
    }

    pub fn batches_per_epoch(&self) -> usize {
        self.pool.len().div_ceil(self.config.batch_size)
    }

    pub fn examples(&self) -> &[EncodedExample] {
        &self.examples
    }

    /// Shuffled pool for `epoch`; a fresh stream per epoch index.
    pub fn epoch_order(&self, epoch: u64) -> Vec<usize> {
        let mut order = self.pool.clone();
        DetRng::new(self.config.seed, SHUFFLE_DOMAIN, epoch).shuffle(&mut order);
        order
    }

    pub fn batches(&self, epoch: u64) -> Vec<Batch> {
        self.epoch_order(epoch)
            .chunks(self.config.batch_size)
            .map(|chunk| Batch::from_examples(chunk.iter().map(|&i| &self.examples[i])))
            .collect()
    }
}

/// Batches for one epoch of the given training sets.
pub fn build_epoch(
    train: &[&TripleSet],
    vocab: &Vocab,
    config: &SamplerConfig,
    epoch: u64,
) -> Result<Vec<Batch>, SamplerError> {
    Ok(EpochPlan::new(train, vocab, config.clone())?.batches(epoch))
}
