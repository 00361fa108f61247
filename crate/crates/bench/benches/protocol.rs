//! Wall-clock cost of the moving parts: a whole market run end to end, the
//! attestation pool model, and dataset sealing at a realistic table size.

use std::hint::black_box;

use criterion::{criterion_group, criterion_main, Criterion};
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha20Rng;
use sealmarket_core::actors::Paradigm;
use sealmarket_core::crypto::{KeyRole, SymmetricKey, NONCE_LEN};
use sealmarket_core::dataset::{open_capsule, seal_dataset, OwnerDataset};
use sealmarket_core::harness::run_scenario;
use sealmarket_core::harness::scenario::{random_adversary, ScenarioConfig};
use sealmarket_core::metrics::attestation_makespan_ms;

fn market_runs(c: &mut Criterion) {
    let mut g = c.benchmark_group("market");
    g.bench_function("honest_brokered", |b| {
        b.iter(|| run_scenario(black_box(ScenarioConfig::default())))
    });
    g.bench_function("honest_per_owner", |b| {
        b.iter(|| {
            run_scenario(black_box(ScenarioConfig {
                paradigm: Paradigm::PerOwner,
                ..ScenarioConfig::default()
            }))
        })
    });
    let mut adversarial = ScenarioConfig {
        seed: 11,
        ..ScenarioConfig::default()
    };
    adversarial.adversary = random_adversary(11, &adversarial);
    g.bench_function("random_adversary", |b| {
        b.iter(|| run_scenario(black_box(adversarial.clone())))
    });
    g.finish();
}

fn sealing(c: &mut Criterion) {
    let mut rng = ChaCha20Rng::seed_from_u64(3);
    let ds = OwnerDataset::generate("t0", 1_000, 8, &mut rng);
    let key = SymmetricKey::generate(&mut rng, KeyRole::Data);
    let mut nonce = [0u8; NONCE_LEN];
    rng.fill_bytes(&mut nonce);
    let capsule = seal_dataset(&ds, &key, nonce).expect("data key seals");

    let mut g = c.benchmark_group("sealing");
    g.bench_function("seal_1000x8", |b| {
        b.iter(|| seal_dataset(black_box(&ds), &key, nonce).unwrap())
    });
    g.bench_function("open_1000x8", |b| {
        b.iter(|| open_capsule(black_box(&capsule), &key).unwrap())
    });
    g.finish();
}

fn attestation(c: &mut Criterion) {
    c.bench_function("attestation_makespan_160_quotes_64_workers", |b| {
        b.iter(|| attestation_makespan_ms(black_box(160), black_box(64), black_box(600)))
    });
}

criterion_group!(benches, market_runs, sealing, attestation);
criterion_main!(benches);
