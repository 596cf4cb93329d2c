//! Scratch probe for end-to-end convergence tuning. Run with
//! `cargo test --test e2e_probe -- --ignored --nocapture`.

use std::time::Instant;

use scamod::forge::{generate, Role, TracePreset};
use scamod::network::ModularNetwork;
use scamod::presets::Arch;
use scamod::sca::{converged_at, guessing_entropy, predict_in_chunks, LeakageModel, StopPolicy};
use scamod::train::{fit, TrainConfig};

fn run_one(seed: u64, desync: u32, epochs: usize) -> (usize, Option<usize>, f64, ModularNetwork) {
    let key = 0x2a;
    let mut cfg = TracePreset::Tiny.config(key, Role::Profiling);
    cfg.desync_threshold = desync;
    let profiling = generate(&cfg, seed).unwrap();

    let mut net = Arch::Tiny.build(700, 1e-3, seed ^ 0xabcd).unwrap();
    let mut opt = scamod::optim::AdamConfig::default();
    opt.lr = 2e-3;
    let tc = TrainConfig {
        epochs,
        batch_size: 128,
        optimizer: opt,
        stop: Some(StopPolicy {
            rank_threshold: 0.5,
            persistence_fraction: 0.5,
            patience_epochs: 3,
        }),
        n_experiments: 10,
        seed,
        ..Default::default()
    };
    let t0 = Instant::now();
    let report = fit(&mut net, &profiling, &tc).unwrap();
    let dt = t0.elapsed().as_secs_f64();
    let conv_by_epoch: Vec<String> = report
        .epochs
        .iter()
        .map(|e| e.converged_at.map_or("-".to_string(), |t| t.to_string()))
        .collect();
    println!("  validation converged_at per epoch: {}", conv_by_epoch.join(" "));

    let mut acfg = TracePreset::Tiny.config(key, Role::Attack);
    acfg.desync_threshold = desync;
    let attack = generate(&acfg, seed.wrapping_add(77)).unwrap();
    let probs = predict_in_chunks(&net.truncated(), &attack).unwrap();
    let ge = guessing_entropy(
        &probs,
        &attack.plaintexts,
        key as usize,
        &LeakageModel::identity(0),
        20,
        seed,
    )
    .unwrap();
    let conv = converged_at(&ge, 0.5, 0.5);
    println!(
        "seed {seed} desync {desync}: epochs {} (stopped {:?}), final GE {:.2}, attack converged_at {:?}, last-epoch losses ce {:.3} mse {:.5}, {dt:.1}s",
        report.epochs_run(),
        report.stopped_epoch,
        ge.final_rank(),
        conv,
        report.epochs.last().map(|e| e.ce).unwrap_or(f64::NAN),
        report.epochs.last().map(|e| e.mse).unwrap_or(f64::NAN),
    );
    (report.epochs_run(), conv, ge.final_rank(), net)
}

#[test]
#[ignore]
fn probe_desync0() {
    for seed in 1..=2 {
        run_one(seed, 0, 30);
    }
}

#[test]
#[ignore]
fn probe_desync50() {
    for seed in 1..=2 {
        run_one(seed, 50, 40);
    }
}
