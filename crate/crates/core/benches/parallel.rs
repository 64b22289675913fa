use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use ppvae_core::corpus::{build_vocabulary, encode_text, tokenize, TokenSequence};
use ppvae_core::evaluation::distinct_n;
use ppvae_core::par::Exec;
use ppvae_core::pretrain::{PretrainConfig, PretrainVae};
use ppvae_core::rng;
use ppvae_core::synthetic::{self, SyntheticConfig};
use ppvae_core::tensor::{matmul, Mat};

const POLICIES: [(&str, Exec); 2] = [("sequential", Exec::Sequential), ("parallel", Exec::Parallel)];

fn bench_matmul(c: &mut Criterion) {
    let mut group = c.benchmark_group("matmul");
    for n in [128usize, 512] {
        let a: Mat<f32> = rng::normal_mat(&mut rng::stream(0, "a"), n, n);
        let b: Mat<f32> = rng::normal_mat(&mut rng::stream(0, "b"), n, n);
        for (name, exec) in POLICIES {
            group.bench_with_input(BenchmarkId::new(name, n), &n, |bench, _| {
                bench.iter(|| matmul(exec, &a, false, &b, false).unwrap())
            });
        }
    }
    group.finish();
}

fn fixture() -> (PretrainVae<f32>, Vec<TokenSequence>) {
    let corpus = synthetic::generate(&SyntheticConfig { unlabeled: 512, per_condition: 1, ..Default::default() });
    let toks: Vec<Vec<String>> = corpus.unlabeled.iter().map(|s| tokenize(s)).collect();
    let vocab = build_vocabulary(&toks, 1000).unwrap();
    let seqs = toks.iter().map(|t| encode_text(t, &vocab, 15)).collect();
    (PretrainVae::new(PretrainConfig::small(), vocab.len()).unwrap(), seqs)
}

fn bench_model(c: &mut Criterion) {
    let (model, seqs) = fixture();
    let z: Mat<f32> = rng::normal_mat(&mut rng::stream(0, "z"), 256, model.d_g());
    let mut group = c.benchmark_group("model");
    group.sample_size(10);
    for (name, exec) in POLICIES {
        group.bench_function(BenchmarkId::new("greedy_decode_256", name), |b| {
            b.iter(|| model.greedy_decode_with(exec, &z, 15).unwrap())
        });
        group.bench_function(BenchmarkId::new("encode_512", name), |b| {
            b.iter(|| model.encode_global_with(exec, &seqs).unwrap())
        });
    }
    group.finish();
}

fn bench_distinct(c: &mut Criterion) {
    let corpus = synthetic::generate(&SyntheticConfig { unlabeled: 10_000, per_condition: 1, ..Default::default() });
    c.bench_function("distinct_2_10k", |b| b.iter(|| distinct_n(&corpus.unlabeled, 2).unwrap()));
}

criterion_group!(benches, bench_matmul, bench_model, bench_distinct);
criterion_main!(benches);
