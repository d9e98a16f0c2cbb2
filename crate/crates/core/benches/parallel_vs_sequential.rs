use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use whisperfuse::acoustic::{AcousticConfig, ToyAcoustic};
use whisperfuse::config::ModelConfig;
use whisperfuse::exec::Exec;
use whisperfuse::fusion::Path;
use whisperfuse::init_bridge::AdapterInit;
use whisperfuse::lm::ToyLm;
use whisperfuse::numerics::Tensor;
use whisperfuse::optim::batch_gradient;
use whisperfuse::params::{ParamSet, Phase};
use whisperfuse::prompt::{build_prompt, build_sample, PromptSample};
use whisperfuse::tokenizer::CharTokenizer;

fn fixture() -> (ToyLm, Vec<(PromptSample, Tensor)>) {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let config = ModelConfig::default();
    let strong = ToyAcoustic::new(&AcousticConfig::strong(8, config.audio_len), &mut rng);
    let mut lm = ToyLm::new(&config, &mut rng).unwrap();
    lm.attach_acoustic(&strong, AdapterInit::Bridge, &mut rng).unwrap();
    lm.set_phase(Phase::Adapt);
    let tok = CharTokenizer::lm();
    let hyps: Vec<String> =
        ["show me flights from boston to denver", "show me flight from austin to denver", "show me flights from boston to dallas"]
            .map(String::from)
            .to_vec();
    let prompt = build_prompt(&hyps, "v1").unwrap();
    let items = (0..8)
        .map(|_| {
            let sample = build_sample(&tok, &prompt, "show me flights from boston to denver", true).unwrap();
            (sample, Tensor::randn(&[1, config.audio_len, config.audio_width], 1.0, &mut rng))
        })
        .collect();
    (lm, items)
}

fn bench(c: &mut Criterion) {
    let (lm, items) = fixture();
    let mut group = c.benchmark_group("batch_gradient");
    group.sample_size(10);
    let mut modes = vec![("sequential", Exec::Sequential)];
    #[cfg(feature = "parallel")]
    modes.push(("parallel", Exec::Parallel));
    for (name, exec) in modes {
        group.bench_with_input(BenchmarkId::new(name, items.len()), &exec, |b, &exec| {
            b.iter(|| batch_gradient(exec, &items, |(s, h)| lm.loss_and_grads(s, Some(h), Path::Fused)).unwrap())
        });
    }
    group.finish();
}

criterion_group!(benches, bench);
criterion_main!(benches);
