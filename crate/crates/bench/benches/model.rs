use std::hint::black_box;

use criterion::{criterion_group, criterion_main, Criterion};
use inflect_core::model::{decode_many, init_model, ModelConfig, Noise};
use inflect_core::sampler::{encode_set, Batch};
use inflect_core::synthetic::{generate_language, SyntheticConfig};
use inflect_core::Vocab;

fn model_benches(c: &mut Criterion) {
    let set = generate_language(&SyntheticConfig::new("sx", 64, 4));
    let vocab = Vocab::build(&[&set]).unwrap();
    let examples = encode_set(&set, &vocab);
    let config = ModelConfig::monolingual(vocab.len());
    let model = init_model::<f32>(&config, vocab.len(), 0).unwrap();
    let batch = Batch::from_examples(examples.iter().take(32));
    let tokens = batch.target_tokens();

    let mut group = c.benchmark_group("transformer");
    group.sample_size(10);
    group.bench_function("forward_backward_batch32", |b| {
        b.iter(|| model.loss_and_grads(black_box(&batch), Some(Noise::new(&config, 0, 0)), tokens).unwrap())
    });
    let sources: Vec<&[u32]> = examples.iter().take(64).map(|e| e.source.as_slice()).collect();
    group.bench_function("greedy_decode_64", |b| {
        b.iter(|| decode_many(&model, &vocab, black_box(&sources), 12, 64).unwrap())
    });
    group.finish();
}

criterion_group!(benches, model_benches);
criterion_main!(benches);
