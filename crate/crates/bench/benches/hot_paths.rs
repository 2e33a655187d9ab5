//! Timings for the three costs that dominate a training run: special
//! functions inside the loss, the factored forward, and attack crafting.

use std::hint::black_box;

use criterion::{criterion_group, criterion_main, Criterion};
use edens_core::data::gen_two_moons;
use edens_core::ensemble::{Architecture, BaselineNet, EnsembleNet};
use edens_core::numerics::{digamma, lgamma, RngStream};
use edens_core::attacks::{run_attack, AttackSpec};
use edens_core::tensor::Array;

const BATCH: usize = 64;
const MEMBERS: usize = 4;
const RANK: usize = 2;

fn fixtures() -> (EnsembleNet, Array, Vec<usize>) {
    let mut rng = RngStream::from_seed(17);
    let baseline = BaselineNet::init(Architecture::mlp(2, 2), &mut rng).unwrap();
    let net = EnsembleNet::init_from_pretrained(&baseline, MEMBERS, RANK, 0.1, &mut rng).unwrap();
    let ds = gen_two_moons(BATCH, 0.1, &mut rng).unwrap();
    let (x, y) = ds.slice(0, BATCH).unwrap();
    (net, x, y)
}

fn bench_special(c: &mut Criterion) {
    // Same 200-point grid the accuracy checks sweep.
    let grid: Vec<f64> = (1..=200).map(|i| 0.1 + (50.0 - 0.1) * i as f64 / 200.0).collect();
    c.bench_function("lgamma_grid_200", |b| {
        b.iter(|| {
            let mut acc = 0.0;
            for &x in &grid {
                acc += lgamma(black_box(x)).unwrap();
            }
            acc
        })
    });
    c.bench_function("digamma_grid_200", |b| {
        b.iter(|| {
            let mut acc = 0.0;
            for &x in &grid {
                acc += digamma(black_box(x)).unwrap();
            }
            acc
        })
    });
}

fn bench_forward(c: &mut Criterion) {
    let (net, x, _) = fixtures();
    c.bench_function("grouped_forward_b64_m4", |b| {
        b.iter(|| net.all_member_logits(black_box(&x)).unwrap())
    });
    c.bench_function("materialized_forward_b64_m4", |b| {
        b.iter(|| {
            (0..MEMBERS)
                .map(|m| net.materialized_logits(m, black_box(&x)).unwrap())
                .collect::<Vec<_>>()
        })
    });
}

fn bench_attack(c: &mut Criterion) {
    let (net, x, y) = fixtures();
    let fgsm = AttackSpec::fgsm(8.0 / 255.0);
    c.bench_function("fgsm_step_b64_m4", |b| {
        b.iter(|| {
            let mut rng = RngStream::from_seed(3);
            run_attack(black_box(&net), &x, &y, &fgsm, &mut rng).unwrap()
        })
    });
}

criterion_group!(benches, bench_special, bench_forward, bench_attack);
criterion_main!(benches);
