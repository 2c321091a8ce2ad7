use criterion::{criterion_group, criterion_main, BatchSize, Criterion};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::hint::black_box;

use socvae::entmax::{entmax15, entmax15_bisect, pad_batch};
use socvae::map::{roi_graph_search, RoiConfig};
use socvae::model::{Model, ModelConfig, PreparedScene, Variant};
use socvae::world::{generate, merge_map, ScenarioTemplate, Template};

fn score_rows(n: usize, d: usize) -> Vec<Vec<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    (0..n).map(|_| (0..d).map(|_| rng.random_range(-3.0..3.0)).collect()).collect()
}

fn entmax(c: &mut Criterion) {
    let rows = score_rows(256, 8);
    c.bench_function("entmax15 sorted d=8", |b| {
        b.iter(|| rows.iter().map(|r| entmax15(black_box(r)).unwrap()[0]).sum::<f64>())
    });
    c.bench_function("entmax15 bisection d=8", |b| {
        b.iter(|| rows.iter().map(|r| entmax15_bisect(black_box(r), 60).unwrap()[0]).sum::<f64>())
    });
    let ragged: Vec<Vec<f64>> = score_rows(256, 8).into_iter().enumerate().map(|(i, r)| r[..1 + i % 8].to_vec()).collect();
    c.bench_function("padded batch 256 rows", |b| {
        b.iter(|| pad_batch(black_box(&ragged)).unwrap().entmax_rows().unwrap())
    });
}

fn training_step(c: &mut Criterion) {
    let scenes: Vec<PreparedScene> = generate(&ScenarioTemplate::new(Template::Merge), 40, 1)
        .unwrap()
        .iter()
        .map(|s| PreparedScene::new(s).unwrap())
        .collect();
    let batch: Vec<&PreparedScene> = scenes.iter().collect();
    let mut group = c.benchmark_group("loss and gradients, 40 merge scenes");
    group.sample_size(10);
    for hidden in [32, 64] {
        let mut cfg = ModelConfig::driving(Variant::SocialCvae);
        cfg.hidden = hidden;
        let model = Model::new(cfg, 0).unwrap();
        group.bench_function(format!("hidden {hidden}"), |b| {
            b.iter(|| model.loss_and_grads(black_box(&batch), 1).unwrap().0.total)
        });
    }
    group.finish();
}

fn roi(c: &mut Criterion) {
    let map = merge_map();
    let config = RoiConfig::new(60.0, 1.0).unwrap();
    c.bench_function("roi search on merge map", |b| {
        b.iter_batched(|| [40.0, 0.0], |x| roi_graph_search(x, config, &map).len(), BatchSize::SmallInput)
    });
}

criterion_group!(benches, entmax, training_step, roi);
criterion_main!(benches);
