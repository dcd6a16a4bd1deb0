// Randomized invariants shared by the property suite and the acceptance run.

use gmt_core::config::RunConfig;
use gmt_core::corpus::TokenWindowStream;
use gmt_core::diagnostics::state_checksum;
use gmt_core::maintenance::{
    maintenance_step, merge_similar_centroids, reset_dead_centroids, write_back, MaintenanceConfig,
};
use gmt_core::memory_cell::{memory_cell_forward, CellSettings, CentroidBank};
use gmt_core::model::{BlockKind, ForwardOptions, Model, ModelConfig};
use gmt_core::numerics::l2_norm;
use gmt_core::training::{decode_checkpoint, encode_checkpoint, Trainer};
use gmt_core::{Matrix, Tape};
use proptest::prelude::*;
use proptest::test_runner::TestCaseError;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn assert_stochastic(m: &Matrix, what: &str) {
    for (i, row) in m.row_iter().enumerate() {
        let s: f64 = row.iter().sum();
        assert!((s - 1.0).abs() < 1e-12, "{what} row {i} sums to {s}");
        assert!(
            row.iter().all(|&x| x >= 0.0),
            "{what} row {i} has a negative entry"
        );
    }
}

fn assert_unit_rows(bank: &CentroidBank, what: &str) {
    for (i, row) in bank.centroids.row_iter().enumerate() {
        let n = l2_norm(row);
        assert!((n - 1.0).abs() < 1e-12, "{what}: centroid {i} has norm {n}");
    }
}

fn small_model(rng: &mut ChaCha8Rng) -> Model {
    let heads = rng.gen_range(1..=2);
    let config = ModelConfig {
        n_layers: rng.gen_range(1..=2),
        hidden: heads * rng.gen_range(2..=4),
        n_heads: heads,
        nav_dim: rng.gen_range(1..=3),
        n_slots: rng.gen_range(2..=5),
        max_seq_len: 6,
        vocab_size: 9,
        ..ModelConfig::toy()
    };
    Model::new(config, rng.gen())
        .unwrap()
        .jittered(0.3, rng.gen())
}

fn random_bank(rng: &mut ChaCha8Rng) -> CentroidBank {
    let f = rng.gen_range(2..=10);
    let h = rng.gen_range(2..=8);
    let mut bank = CentroidBank::new(f, h, rng);
    bank.momentum = rng.gen_range(-3.0..5.0);
    bank.age = (0..f).map(|_| rng.gen_range(0..300)).collect();
    bank.usage = (0..f)
        .map(|_| {
            if rng.gen_bool(0.3) {
                0.0
            } else {
                rng.gen_range(0.0..0.5)
            }
        })
        .collect();
    // Plant near-duplicates so merges have work to do.
    for i in 1..f {
        if rng.gen_bool(0.3) {
            let src = bank.centroids.row(i - 1).to_vec();
            let noise = rng.gen_range(0.0..0.1);
            let row = bank.centroids.row_mut(i);
            for (c, s) in row.iter_mut().zip(src) {
                *c = s + noise * rng.gen_range(-1.0..1.0);
            }
        }
    }
    bank.normalize_rows();
    bank
}

pub fn routing_distributions_are_stochastic(seed: u64) -> Result<(), TestCaseError> {
    let case = super::cell_case(seed);
    let mut tape = Tape::new();
    let vars = case.cell.bind(&mut tape);
    let h = case.cell.bank.hidden();
    let x = tape.constant(case.z.clone());
    let ln2 = (
        tape.constant(Matrix::filled(1, h, 1.0)),
        tape.constant(Matrix::zeros(1, h)),
    );
    let settings = CellSettings {
        tau: case.tau,
        eps_grav: case.eps_grav,
        ln_eps: case.ln_eps,
        displacement_scale: 1.0,
    };
    let r = memory_cell_forward(&mut tape, x, ln2, &vars, settings, None).unwrap();
    assert_stochastic(tape.value(r.w_src), "w_src");
    assert_stochastic(tape.value(r.w_edge), "w_edge");
    assert_stochastic(tape.value(r.w_tgt), "w_tgt");
    let p = tape.value(r.transitions);
    assert_stochastic(p, "P");
    for i in 0..p.rows() {
        prop_assert_eq!(p.get(i, i), 0.0);
    }
    Ok(())
}

pub fn source_routing_ignores_token_scale(seed: u64) -> Result<(), TestCaseError> {
    use gmt_core::memory_cell::{normalized_centroids, source_routing};
    let scale = 10f64.powf(ChaCha8Rng::seed_from_u64(!seed).gen_range(-3.0..3.0));
    let case = super::cell_case(seed);
    let mut tape = Tape::new();
    let vars = case.cell.bind(&mut tape);
    let ct = normalized_centroids(&mut tape, &vars, case.ln_eps).unwrap();
    let z = tape.constant(case.z.clone());
    let zs = tape.constant(case.z.map(|v| v * scale));
    let a = source_routing(&mut tape, z, ct, case.tau, case.eps_grav).unwrap();
    let b = source_routing(&mut tape, zs, ct, case.tau, case.eps_grav).unwrap();
    prop_assert!(tape.value(a).max_abs_diff(tape.value(b)) < 1e-9);
    Ok(())
}

pub fn centroids_stay_unit_norm(seed: u64) -> Result<(), TestCaseError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut bank = random_bank(&mut rng);
    let (f, h) = (bank.slots(), bank.hidden());
    let t = rng.gen_range(1..=12);
    let states = Matrix::randn(t, h, 2.0, &mut rng);
    let w = Matrix::from_fn(t, f, |_, _| rng.gen_range(0.0..1.0));
    write_back(&mut bank, &states, &w, 1e-6).unwrap();
    assert_unit_rows(&bank, "write_back");
    let pool = Matrix::randn(rng.gen_range(0..6), h, 1.0, &mut rng);
    reset_dead_centroids(&mut bank, &pool, 1e-3, &mut rng).unwrap();
    assert_unit_rows(&bank, "reset");
    merge_similar_centroids(&mut bank, &pool, 0.9, 50, &mut rng).unwrap();
    assert_unit_rows(&bank, "merge");
    maintenance_step(
        &mut bank,
        &pool,
        &MaintenanceConfig::default(),
        0,
        0,
        &mut rng,
    )
    .unwrap();
    assert_unit_rows(&bank, "maintenance");
    Ok(())
}

pub fn healthy_bank_maintenance_is_noop(seed: u64) -> Result<(), TestCaseError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut bank = random_bank(&mut rng);
    let h = bank.hidden();
    let config = MaintenanceConfig {
        a_cool: 100,
        ..MaintenanceConfig::default()
    };
    let pool = Matrix::randn(rng.gen_range(0..6), h, 1.0, &mut rng);
    if rng.gen_bool(0.5) {
        // Heal every slot: no dead usage, no mature duplicates.
        let f = bank.slots();
        bank.usage = vec![1.0 / f as f64; f];
        bank.age = vec![0; f];
        let before = bank.clone();
        let report = maintenance_step(&mut bank, &pool, &config, 1, 0, &mut rng).unwrap();
        prop_assert_eq!((report.resets, report.merges), (0, 0));
        prop_assert_eq!(&bank, &before);
    } else {
        maintenance_step(&mut bank, &pool, &config, 1, 0, &mut rng).unwrap();
        let once = bank.clone();
        let report = maintenance_step(&mut bank, &pool, &config, 2, 0, &mut rng).unwrap();
        prop_assert_eq!((report.resets, report.merges), (0, 0));
        prop_assert_eq!(&bank, &once);
    }
    Ok(())
}

pub fn logits_are_causal(seed: u64) -> Result<(), TestCaseError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let model = small_model(&mut rng);
    let t = rng.gen_range(2..=model.config.max_seq_len);
    let v = model.config.vocab_size;
    let mut ids: Vec<usize> = (0..t).map(|_| rng.gen_range(0..v)).collect();
    let tau = rng.gen_range(0.1..=1.0);
    let before = model.logits(&ids, tau).unwrap();
    let k = rng.gen_range(0..t);
    ids[k] = (ids[k] + rng.gen_range(1..v)) % v;
    let after = model.logits(&ids, tau).unwrap();
    for i in 0..k {
        let same = before
            .row(i)
            .iter()
            .zip(after.row(i))
            .all(|(a, b)| a.to_bits() == b.to_bits());
        prop_assert!(same, "position {} changed after editing position {}", i, k);
    }
    Ok(())
}

pub fn frozen_forward_is_pure(seed: u64) -> Result<(), TestCaseError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let model = small_model(&mut rng);
    let checksum = state_checksum(&model);
    let t = rng.gen_range(1..=model.config.max_seq_len);
    let ids: Vec<usize> = (0..t)
        .map(|_| rng.gen_range(0..model.config.vocab_size))
        .collect();
    let opts = ForwardOptions::frozen(rng.gen_range(0.1..=1.0));
    let first = {
        let mut tape = Tape::new();
        let vars = model.bind(&mut tape);
        let out = model
            .forward(&mut tape, &vars, &ids, 1, &opts, None)
            .unwrap();
        tape.value(out.logits).clone()
    };
    let mut copy = model.clone();
    let mut tape = Tape::new();
    let vars = copy.bind(&mut tape);
    let out = copy
        .forward_adaptive(&mut tape, &vars, &ids, 1, &opts, None)
        .unwrap();
    let second = tape.value(out.logits);
    prop_assert!(first
        .data()
        .iter()
        .zip(second.data())
        .all(|(a, b)| a.to_bits() == b.to_bits()));
    prop_assert_eq!(state_checksum(&model), checksum.clone());
    prop_assert_eq!(state_checksum(&copy), checksum);
    Ok(())
}

pub fn checkpoint_round_trip_is_bit_exact(seed: u64) -> Result<(), TestCaseError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut config = RunConfig::default();
    config.model = if rng.gen_bool(0.5) {
        ModelConfig::toy()
    } else {
        ModelConfig {
            block_kind: BlockKind::DenseFfn,
            ffn_hidden: 5,
            ..ModelConfig::toy()
        }
    };
    config.train.seed = rng.gen();
    config.train.batch_size = 2;
    config.train.accum_steps = 1;
    config.train.warmup_steps = 1;
    config.train.total_steps = 4;
    let ids: Vec<usize> = (0..40).map(|_| rng.gen_range(0..11)).collect();
    let stream = TokenWindowStream::from_ids(&ids, 11, 10, "toy").unwrap();
    let mut trainer = Trainer::new(config, stream.window_count(3)).unwrap();
    for _ in 0..rng.gen_range(0..3) {
        trainer.train_step(&stream).unwrap();
    }
    if rng.gen_bool(0.5) {
        trainer.best_val = Some(rng.gen_range(0.0..5.0));
    }
    let ckpt = trainer.checkpoint();
    let bytes = encode_checkpoint(&ckpt).unwrap();
    let back = decode_checkpoint(&bytes, Some(&ckpt.meta.config_hash)).unwrap();
    prop_assert_eq!(encode_checkpoint(&back).unwrap(), bytes);
    prop_assert_eq!(back, ckpt);
    Ok(())
}

pub fn optimizer_updates_keep_unit_centroids(seed: u64) -> Result<(), TestCaseError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut config = RunConfig::default();
    config.model = ModelConfig::toy();
    config.train.seed = rng.gen();
    config.train.peak_lr = rng.gen_range(1e-4..1e-1);
    config.train.batch_size = 2;
    config.train.accum_steps = 1;
    config.train.warmup_steps = 1;
    config.train.total_steps = 3;
    config.maintenance.k_maint = 1;
    let ids: Vec<usize> = (0..30).map(|_| rng.gen_range(0..11)).collect();
    let stream = TokenWindowStream::from_ids(&ids, 11, 10, "toy").unwrap();
    let mut trainer = Trainer::new(config, stream.window_count(3)).unwrap();
    for _ in 0..2 {
        trainer.train_step(&stream).unwrap();
        for block in &trainer.model.blocks {
            assert_unit_rows(&block.memory().unwrap().bank, "train step");
        }
    }
    Ok(())
}

/// Every property with its name, in a fixed order.
pub const ALL: &[(&str, fn(u64) -> Result<(), TestCaseError>)] = &[
    (
        "routing_distributions_are_stochastic",
        routing_distributions_are_stochastic,
    ),
    (
        "source_routing_ignores_token_scale",
        source_routing_ignores_token_scale,
    ),
    ("centroids_stay_unit_norm", centroids_stay_unit_norm),
    (
        "healthy_bank_maintenance_is_noop",
        healthy_bank_maintenance_is_noop,
    ),
    ("logits_are_causal", logits_are_causal),
    ("frozen_forward_is_pure", frozen_forward_is_pure),
    (
        "checkpoint_round_trip_is_bit_exact",
        checkpoint_round_trip_is_bit_exact,
    ),
    (
        "optimizer_updates_keep_unit_centroids",
        optimizer_updates_keep_unit_centroids,
    ),
];
