mod common;

use std::sync::atomic::AtomicBool;

use common::*;
use danp::checkpoint::*;
use danp::datagen::{GeneratorKind, GeneratorSpec};
use danp::diffgrid::ParamStore;
use danp::models::{BaseHead, ModelSpec};
use danp::train::*;
use danp::Error;

fn small_cfg(seed: u64) -> TrainConfig {
    TrainConfig {
        epochs: 2,
        tasks_per_epoch: 16,
        batch_size: 4,
        validation_tasks: 4,
        num_targets: 12,
        ..TrainConfig::desk_scale(
            GeneratorSpec::default_for(GeneratorKind::Sawtooth, seed),
            seed,
        )
    }
}

#[test]
fn init_is_seeded_finite_and_bounded() {
    let spec = small_spec(2, BaseHead::ConvGnp);
    let a = init_params(&spec, &mut rng(1)).unwrap();
    let b = init_params(&spec, &mut rng(1)).unwrap();
    let c = init_params(&spec, &mut rng(2)).unwrap();
    assert_eq!(a, b);
    assert_ne!(a, c);
    assert!(a
        .iter()
        .all(|(_, arr)| arr.data.iter().all(|v| v.is_finite() && v.abs() < 10.0)));
    let full = init_params(
        &ModelSpec::danp(spec.schedule, BaseHead::ConvGnp),
        &mut rng(1),
    )
    .unwrap();
    assert!(full
        .iter()
        .all(|(_, arr)| arr.data.iter().all(|v| v.is_finite() && v.abs() < 10.0)));
}

#[test]
fn one_layer_per_batch_and_nonzero_update() {
    let cfg = small_cfg(3);
    let mut state = TrainState::init(small_spec(3, BaseHead::ConvGnp), 3).unwrap();
    let mut seen = std::collections::BTreeSet::new();
    for _ in 0..12 {
        let batch = sample_batch(&mut state, &cfg).unwrap();
        let report = train_step(&mut state, &cfg, &batch, LayerChoice::Random).unwrap();
        assert!(report.masked_layers.iter().all(|&f| f == report.layer));
        assert_eq!(report.masked_layers.len(), batch.len());
        assert!(report.update_norm > 0.0);
        seen.insert(report.layer);
    }
    assert!(seen.len() > 1, "layer never varied: {seen:?}");
    assert!(seen.iter().all(|&f| f <= 3));
}

#[test]
fn fixed_batch_loss_decreases() {
    let cfg = TrainConfig {
        learning_rate: 3e-3,
        ..small_cfg(4)
    };
    let mut state = TrainState::init(small_spec(1, BaseHead::ConvGnp), 4).unwrap();
    let batch = sample_batch(&mut state, &cfg).unwrap();
    let first = train_step(&mut state, &cfg, &batch, LayerChoice::Fixed(0))
        .unwrap()
        .loss;
    let mut last = first;
    for _ in 0..99 {
        last = train_step(&mut state, &cfg, &batch, LayerChoice::Fixed(0))
            .unwrap()
            .loss;
    }
    assert!(last < first, "{first} -> {last}");
}

#[test]
fn fixed_layer_trajectories_reproduce() {
    let cfg = small_cfg(5);
    let run = || {
        let mut state = TrainState::init(small_spec(2, BaseHead::ConvGnp), 5).unwrap();
        for f in [2, 0, 1] {
            let batch = sample_batch(&mut state, &cfg).unwrap();
            train_step(&mut state, &cfg, &batch, LayerChoice::Fixed(f)).unwrap();
        }
        checkpoint_to_bytes(&state)
    };
    assert_eq!(run(), run());
}

#[test]
fn non_finite_loss_names_layer_and_task() {
    let cfg = small_cfg(6);
    let mut state = TrainState::init(small_spec(1, BaseHead::ConvCnp), 6).unwrap();
    let batch = sample_batch(&mut state, &cfg).unwrap();
    let mut params: ParamStore = state.params().clone();
    let i = params.index_of("head1.b").unwrap();
    params.by_index_mut(i).data[0] = f64::NAN;
    state.model = state.model.with_params(params).unwrap();
    match train_step(&mut state, &cfg, &batch, LayerChoice::Fixed(1)) {
        Err(Error::Numerical(msg)) => {
            assert!(msg.contains("layer 1"), "{msg}");
            let seed: u64 = msg
                .rsplit("task seed ")
                .next()
                .unwrap()
                .trim_end_matches(')')
                .parse()
                .unwrap();
            assert!(batch.iter().any(|b| b.task_seed == seed), "{msg}");
        }
        other => panic!("unexpected {other:?}"),
    }
}

#[test]
fn ar_baseline_sees_large_contexts() {
    let mut cfg = small_cfg(7);
    cfg.context_range = (0, 80);
    cfg.batch_size = 200;
    let mut state = TrainState::init(small_spec(0, BaseHead::ConvCnp), 7).unwrap();
    let batch = sample_batch(&mut state, &cfg).unwrap();
    let sizes: Vec<usize> = batch.iter().map(|b| b.task.task.context.len()).collect();
    assert!(sizes.iter().all(|&n| n <= 80));
    assert!(sizes.iter().any(|&n| n > 30));
}

#[test]
fn training_run_is_reproducible_and_validates() {
    let cfg = small_cfg(8);
    let spec = small_spec(2, BaseHead::ConvGnp);
    let mut events = 0;
    let a = train_run(spec, &cfg, None, |_| events += 1).unwrap();
    let b = train_run(spec, &cfg, None, |_| {}).unwrap();
    assert_eq!(events, 3);
    assert_eq!(a.log.len(), 3);
    assert_eq!(a.log[0].step, 0);
    assert_eq!(a.final_state.step, 8);
    assert_eq!(
        checkpoint_to_bytes(&a.final_state),
        checkpoint_to_bytes(&b.final_state)
    );
    assert_eq!(format_log(&a.log), format_log(&b.log));
    assert!(a.log.iter().any(|r| r.nll == a.best.nll));
}

#[test]
fn stop_flag_ends_the_run_early() {
    let stop = AtomicBool::new(true);
    let out = train_run(
        small_spec(1, BaseHead::ConvGnp),
        &small_cfg(9),
        Some(&stop),
        |_| {},
    )
    .unwrap();
    assert!(out.interrupted);
    assert_eq!(out.final_state.step, 0);
}

#[test]
fn checkpoint_round_trip_is_byte_exact() {
    let cfg = small_cfg(10);
    let mut state = TrainState::init(small_spec(2, BaseHead::ConvGnp), 10).unwrap();
    let batch = sample_batch(&mut state, &cfg).unwrap();
    train_step(&mut state, &cfg, &batch, LayerChoice::Random).unwrap();
    let bytes = checkpoint_to_bytes(&state);
    let loaded = checkpoint_from_bytes(&bytes).unwrap();
    assert_eq!(checkpoint_to_bytes(&loaded.state), bytes);

    let t = sawtooth_task(1, 5, 9);
    let before = state
        .model
        .predict(0, &t.context, &[], &t.target_xs())
        .unwrap();
    let after = loaded
        .model()
        .predict(0, &t.context, &[], &t.target_xs())
        .unwrap();
    assert_eq!(before, after);

    // The restored RNG continues the same stream.
    let mut s2 = loaded.state.clone();
    let b1 = sample_batch(&mut state, &cfg).unwrap();
    let b2 = sample_batch(&mut s2, &cfg).unwrap();
    assert_eq!(
        b1.iter().map(|b| b.task_seed).collect::<Vec<_>>(),
        b2.iter().map(|b| b.task_seed).collect::<Vec<_>>()
    );

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("model.ckpt");
    checkpoint_save(&state, &path).unwrap();
    assert_eq!(
        checkpoint_to_bytes(&checkpoint_load(&path).unwrap().state),
        checkpoint_to_bytes(&state)
    );
}

#[test]
fn damaged_checkpoints_fail_distinctly() {
    let state = TrainState::init(small_spec(1, BaseHead::ConvCnp), 11).unwrap();
    let bytes = checkpoint_to_bytes(&state);

    let mut bad_magic = bytes.clone();
    bad_magic[0] = b'X';
    assert_eq!(
        checkpoint_from_bytes(&bad_magic).unwrap_err(),
        CheckpointError::BadMagic
    );

    let mut bad_version = bytes.clone();
    bad_version[8] = 9;
    assert!(matches!(
        checkpoint_from_bytes(&bad_version).unwrap_err(),
        CheckpointError::Version { found: 9, .. }
    ));

    let mut bad_hash = bytes.clone();
    bad_hash[12] ^= 0xff;
    assert_eq!(
        checkpoint_from_bytes(&bad_hash).unwrap_err(),
        CheckpointError::HashMismatch
    );

    for cut in [4, 30, bytes.len() / 2, bytes.len() - 1] {
        assert_eq!(
            checkpoint_from_bytes(&bytes[..cut]).unwrap_err(),
            CheckpointError::Truncated,
            "cut {cut}"
        );
    }

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("bad.ckpt");
    std::fs::write(&path, &bad_magic).unwrap();
    assert!(matches!(
        checkpoint_load(&path),
        Err(Error::Checkpoint { .. })
    ));
}
