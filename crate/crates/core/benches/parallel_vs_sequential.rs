use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};

use ffn_lens::corpus::{make_prefixes, toy, Vocabulary};
use ffn_lens::instrument::{capture, Binding, CaptureMode};
use ffn_lens::model::{training_sentences, ModelConfig, TrainConfig, Trainer, TransformerModel};
use ffn_lens::par::Execution;
use ffn_lens::probe::{build_probe_dataset, per_detector_accuracy, train_layer_probe, ProbeConfig};

fn modes() -> Vec<(&'static str, Execution)> {
    vec![
        ("sequential", Execution::Sequential),
        #[cfg(feature = "parallel")]
        ("parallel", Execution::Parallel),
    ]
}

fn config() -> ModelConfig {
    ModelConfig {
        n_layers: 4,
        d_model: 32,
        n_heads: 2,
        d_ff: 128,
        vocab_size: 400,
        max_seq_len: 64,
        seed: 1,
    }
}

fn bench(c: &mut Criterion) {
    let pairs = toy::generate(200, 3);
    let vocab = Vocabulary::train(&pairs, 400).unwrap();
    let sentences = training_sentences(&pairs, &vocab);
    let model = TransformerModel::init(config()).unwrap();
    let prefixes: Vec<_> = pairs[..40]
        .iter()
        .flat_map(|p| make_prefixes(p, &vocab, true))
        .filter(|p| p.token_ids.len() <= 64)
        .collect();
    let binding = Binding {
        model_hash: model.sha256(),
        vocab_hash: vocab.sha256(),
    };
    let dump = capture(&model, &prefixes, CaptureMode::PerSentence, binding.clone(), Execution::Sequential).unwrap();
    let ds = build_probe_dataset(&dump, 0, 5).unwrap();

    let mut g = c.benchmark_group("train_step");
    g.sample_size(10);
    for (name, exec) in modes() {
        g.bench_function(BenchmarkId::from_parameter(name), |b| {
            let mut m = model.clone();
            let cfg = TrainConfig {
                batch_size: 16,
                ..TrainConfig::default()
            };
            let mut t = Trainer::new(&mut m, &sentences, cfg, None).unwrap().with_execution(exec);
            b.iter(|| t.step().unwrap());
        });
    }
    g.finish();

    let mut g = c.benchmark_group("capture");
    g.sample_size(10);
    for (name, exec) in modes() {
        g.bench_function(BenchmarkId::from_parameter(name), |b| {
            b.iter(|| capture(&model, &prefixes, CaptureMode::PerSentence, binding.clone(), exec).unwrap());
        });
    }
    g.finish();

    let mut g = c.benchmark_group("probe");
    g.sample_size(10);
    let short = ProbeConfig {
        epochs: 50,
        ..ProbeConfig::default()
    };
    for (name, exec) in modes() {
        g.bench_function(BenchmarkId::new("layer_probe", name), |b| {
            b.iter(|| train_layer_probe(&ds, &short, exec).unwrap());
        });
        g.bench_function(BenchmarkId::new("per_detector", name), |b| {
            b.iter(|| per_detector_accuracy(&ds, exec));
        });
    }
    g.finish();
}

criterion_group!(benches, bench);
criterion_main!(benches);
