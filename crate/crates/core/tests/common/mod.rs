//! Helpers shared by the integration test targets.
#![allow(dead_code)]

use inflect_core::model::{init_model, ModelConfig, Transformer};
use inflect_core::rng::DetRng;
use inflect_core::sampler::Batch;
use inflect_core::Vocab;

pub const TINY_VOCAB: usize = 12;

/// Two encoder and two decoder layers at width 8, no regularization.
pub fn tiny_config() -> ModelConfig {
    ModelConfig {
        enc_layers: 2,
        dec_layers: 2,
        d_model: 8,
        d_ffn: 8,
        heads: 2,
        dropout: 0.0,
        attention_dropout: 0.0,
        activation_dropout: 0.0,
        layer_drop: 0.0,
        max_source_len: 16,
        max_target_len: 16,
        vocab_size: TINY_VOCAB,
    }
}

/// A seeded f64 model whose biases and norm parameters are also nonzero, so
/// every parameter path carries gradient.
pub fn tiny_model(seed: u64) -> Transformer<f64> {
    let mut model = init_model::<f64>(&tiny_config(), TINY_VOCAB, seed).unwrap();
    let mut rng = DetRng::new(seed, "test-jitter", 0);
    for t in model.params.tensors_mut() {
        for x in &mut t.data {
            *x += rng.symmetric(0.2);
        }
    }
    model
}

/// Three rows of different lengths, so both sides carry padding.
pub fn tiny_batch() -> Batch {
    let bos = Vocab::BOS;
    let eos = Vocab::EOS;
    let pairs: Vec<(Vec<u32>, Vec<u32>)> = vec![
        (vec![4, 5, 6, 10, eos], vec![bos, 4, 5, 7, eos]),
        (vec![8, 9, 11, eos], vec![bos, 9, eos]),
        (vec![5, 4, 7, 7, 6, 11, eos], vec![bos, 5, 4, 7, 8, 6, eos]),
    ];
    let refs: Vec<(&[u32], &[u32])> = pairs.iter().map(|(s, t)| (s.as_slice(), t.as_slice())).collect();
    Batch::from_pairs(&refs)
}

/// Loss at the current parameters, without dropout.
fn loss(model: &Transformer<f64>, batch: &Batch) -> f64 {
    let (l, _) = model.loss_and_grads(batch, None, batch.target_tokens()).unwrap();
    l
}

/// Per-block largest elementwise relative error between analytic and
/// central-difference gradients. Relative error is
/// `|a - n| / max(|a|, |n|, floor)`.
pub fn gradient_check(seed: u64, step: f64, floor: f64) -> Vec<(String, f64)> {
    let mut model = tiny_model(seed);
    let batch = tiny_batch();
    let (_, analytic) = model.loss_and_grads(&batch, None, batch.target_tokens()).unwrap();
    let analytic: Vec<(String, Vec<f64>)> = analytic.named().into_iter().map(|(n, t)| (n, t.data.clone())).collect();
    let mut out = Vec::with_capacity(analytic.len());
    for (block, (name, grad)) in analytic.iter().enumerate() {
        let mut worst: f64 = 0.0;
        for (i, &a) in grad.iter().enumerate() {
            let original = model.params.tensors_mut()[block].data[i];
            model.params.tensors_mut()[block].data[i] = original + step;
            let up = loss(&model, &batch);
            model.params.tensors_mut()[block].data[i] = original - step;
            let down = loss(&model, &batch);
            model.params.tensors_mut()[block].data[i] = original;
            let numeric = (up - down) / (2.0 * step);
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(floor);
            worst = worst.max(rel);
        }
        out.push((name.clone(), worst));
    }
    out
}

/// A random set over a small alphabet with `lemmas` lemmas, 1 to 4 triples
/// each and heavy-tailed counts. About a fifth of forms equal their lemma.
pub fn skewed_set(seed: u64, lemmas: usize) -> inflect_core::TripleSet {
    const TAGS: [&str; 5] = ["UPOS=NOUN", "Number=Plur", "Case=Gen", "UPOS=VERB", "Tense=Past"];
    let mut rng = DetRng::new(seed, "test-sets", lemmas as u64);
    let mut set = inflect_core::TripleSet::new("xx");
    let mut names = std::collections::BTreeSet::new();
    while names.len() < lemmas {
        let len = 2 + rng.below(6) as usize;
        names.insert((0..len).map(|_| (b'a' + rng.below(12) as u8) as char).collect::<String>());
    }
    for lemma in names {
        let scale = 1 + rng.below(1000).pow(2) / 1000;
        for k in 0..1 + rng.below(4) {
            let tags = [TAGS[rng.below(5) as usize], TAGS[(k as usize) % 5]];
            let form = if rng.below(5) == 0 { lemma.clone() } else { format!("{lemma}{}", ["s", "en", "a", "ir"][k as usize]) };
            set.add(&lemma, &tags, &form, 1 + scale * (1 + rng.below(3))).unwrap();
        }
    }
    set
}
