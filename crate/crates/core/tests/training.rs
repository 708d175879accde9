mod common;

use common::tiny_setup;
use fpmine_core::encoders::{generate_synthetic_dataset, EncoderConfig, SyntheticConfig};
use fpmine_core::evaluation::{evaluate_split, negative_evidence_report};
use fpmine_core::model::{Model, BOUNDARY, PHI, THETA};
use fpmine_core::training::{Checkpoint, LogRecord, TrainConfig, Trainer};
use fpmine_core::{Branches, Error};

fn small_setup() -> (fpmine_core::Dataset, TrainConfig) {
    let ds = generate_synthetic_dataset(3, 12, 4, &SyntheticConfig::default()).unwrap();
    let mut config = TrainConfig {
        epochs: 3,
        batch_size: 8,
        val_fraction: 0.25,
        eval_every: 1,
        ..TrainConfig::default()
    };
    config.model.encoder = EncoderConfig::default().with_dataset_dims(&ds.dims);
    (ds, config)
}

#[test]
fn identical_runs_give_identical_checkpoints_and_metrics() {
    let (ds, config) = small_setup();
    let run = || {
        let mut t = Trainer::new(&ds, config.clone()).unwrap();
        t.run().unwrap();
        let r = evaluate_split(&t.model, &ds, t.val_indices(), t.model.fusion()).unwrap();
        (t.checkpoint().to_bytes().unwrap(), r.recall)
    };
    let (a, ra) = run();
    let (b, rb) = run();
    assert_eq!(a, b);
    assert_eq!(ra, rb);
}

#[test]
fn resuming_from_a_checkpoint_matches_an_uninterrupted_run() {
    let (ds, config) = small_setup();
    let mut straight = Trainer::new(&ds, config.clone()).unwrap();
    straight.run().unwrap();

    let mut first = Trainer::new(&ds, config).unwrap();
    let midway = first.batches_per_epoch() as u64 + 2;
    first.run_until(midway).unwrap();
    let bytes = first.checkpoint().to_bytes().unwrap();
    drop(first);
    let ckpt = Checkpoint::from_bytes(&bytes).unwrap();
    assert_eq!(ckpt.step, midway);
    let mut resumed = Trainer::from_checkpoint(&ds, ckpt).unwrap();
    resumed.run().unwrap();

    assert_eq!(
        resumed.checkpoint().to_bytes().unwrap(),
        straight.checkpoint().to_bytes().unwrap()
    );
}

#[test]
fn checkpoint_files_round_trip_and_reject_corruption() {
    let (ds, config) = small_setup();
    let mut t = Trainer::new(&ds, config).unwrap();
    t.run_until(3).unwrap();
    let ckpt = t.checkpoint();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("ckpt.bin");
    ckpt.save(&path).unwrap();
    assert_eq!(Checkpoint::load(&path).unwrap(), ckpt);

    let bytes = ckpt.to_bytes().unwrap();
    assert!(matches!(Checkpoint::from_bytes(&bytes[..bytes.len() - 3]), Err(Error::Data(_))));
    let mut bad = bytes.clone();
    bad[0] = b'X';
    assert!(matches!(Checkpoint::from_bytes(&bad), Err(Error::Data(_))));
}

#[test]
fn zero_epochs_leave_the_initial_model() {
    let (ds, mut config) = small_setup();
    config.epochs = 0;
    let mut t = Trainer::new(&ds, config.clone()).unwrap();
    t.run().unwrap();
    assert_eq!(t.step, 0);
    let init = Model::init(config.model.clone(), config.seed).unwrap();
    assert_eq!(t.checkpoint().params, init.params);
}

#[test]
fn disabling_mining_silences_its_losses_and_scores() {
    let (ds, mut config) = small_setup();
    config.model.branches = Branches {
        global: true,
        local: true,
        fpm: false,
    };
    let mut t = Trainer::new(&ds, config.clone()).unwrap();
    let init = t.model.params.clone();
    t.run().unwrap();
    for rec in &t.log {
        if let LogRecord::Step { loss, .. } = rec {
            assert_eq!(loss.l_m, 0.0);
            assert_eq!(loss.l_mm, 0.0);
            assert_eq!(loss.l_r_localneg, 0.0);
        }
    }
    assert_eq!(t.model.params.get(THETA).unwrap(), init.get(THETA).unwrap());
    assert_eq!(t.model.params.get(PHI).unwrap(), init.get(PHI).unwrap());
    for s in ds.samples.iter().take(5) {
        let b = t.model.breakdown(&ds.samples[0], s).unwrap();
        assert_eq!(b.s_neg, 0.0);
    }
    assert!(matches!(
        negative_evidence_report(&t.model, &ds, 0, 1),
        Err(Error::Config(_))
    ));
}

#[test]
fn log_records_steps_epochs_and_validation() {
    let (ds, config) = small_setup();
    let mut t = Trainer::new(&ds, config.clone()).unwrap();
    t.run().unwrap();
    let steps = t.log.iter().filter(|r| matches!(r, LogRecord::Step { .. })).count();
    assert_eq!(steps as u64, t.total_steps());
    let epochs: Vec<_> = t
        .log
        .iter()
        .filter_map(|r| match r {
            LogRecord::Epoch { validation, .. } => Some(validation.clone()),
            _ => None,
        })
        .collect();
    assert_eq!(epochs.len(), config.epochs);
    assert!(epochs.iter().all(|v| v.as_ref().is_some_and(|m| m.contains_key("r1"))));
    let line = serde_json::to_string(&t.log[0]).unwrap();
    assert!(line.starts_with("{\"kind\":\"step\""));
}

#[test]
fn learnable_boundary_is_trained_and_logged() {
    let (ds, mut config) = small_setup();
    config.model.learnable_boundary = true;
    let mut t = Trainer::new(&ds, config).unwrap();
    assert_eq!(t.model.boundary(), 0.0);
    t.run().unwrap();
    assert!(t.model.params.contains(BOUNDARY));
    assert_ne!(t.model.boundary(), 0.0);
    let logged = t.log.iter().rev().find_map(|r| match r {
        LogRecord::Epoch { boundary, .. } => Some(*boundary),
        _ => None,
    });
    assert_eq!(logged, Some(t.model.boundary()));
}

#[test]
fn mismatched_encoder_dimensions_are_rejected() {
    let (ds, mut config) = small_setup();
    config.model.encoder.image_raw_dim += 1;
    assert!(matches!(Trainer::new(&ds, config), Err(Error::Config(_))));
}

#[test]
fn untrained_report_is_well_formed() {
    let (ds, config) = tiny_setup(4);
    let model = Model::init(config.model, 0).unwrap();
    let r = negative_evidence_report(&model, &ds, 0, 3).unwrap();
    assert_eq!(r.words.len(), ds.samples[3].text_len);
    for w in &r.words {
        assert!((-1.0..=0.0).contains(&w.masked));
        assert!(w.region < 3);
        assert_eq!(w.masked, w.score.min(0.0));
    }
}
