mod common;

use bodyscene::dataset::VersionedDataset;
use bodyscene::nets::{InitConfig, InputMode, ModelSpec, Network, Topology};
use bodyscene::synth::{generate_dataset_in_memory, mix_seed, SynthConfig};
use bodyscene::train::{train, FrameIndex, TrainConfig};
use bodyscene::Error;
use common::tiny_spec;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use statrs::distribution::{ChiSquared, ContinuousCDF};
use tensorcore::checkpoint;

fn dataset(num_classes: usize, clips_per_class: usize, frames: usize) -> VersionedDataset {
    let config = SynthConfig {
        num_classes,
        clips_per_class,
        frames_per_clip: frames,
        ..SynthConfig::default()
    };
    let (manifest, clips) = generate_dataset_in_memory(&config).unwrap();
    VersionedDataset::build(&manifest, &clips).unwrap()
}

fn quick(epochs: usize, seed: u64) -> TrainConfig {
    TrainConfig {
        epochs,
        batches_per_epoch: 10,
        batch_size: 8,
        seed,
        ..TrainConfig::default()
    }
}

#[test]
fn zero_epochs_return_the_initialisation() {
    let data = dataset(3, 4, 3);
    let spec = tiny_spec(Topology::DomainNet, 3);
    let config = quick(0, 5);
    let trained = train(&spec, &config, &data).unwrap();
    assert_eq!(trained.best_epoch, 0);
    assert!(trained.history.is_empty());
    let fresh = Network::<f32>::init(&spec, config.init, mix_seed(5, 0x1717)).unwrap();
    assert_eq!(trained.network.params, fresh.params);
}

#[test]
fn same_seed_gives_bit_identical_checkpoints() {
    let data = dataset(3, 4, 3);
    for topology in [Topology::Baseline, Topology::DomainNet] {
        let spec = tiny_spec(topology, 3);
        let bytes = |seed| {
            let net = train(&spec, &quick(2, seed), &data).unwrap().network;
            checkpoint::to_bytes(&spec.hash(), &net.params)
        };
        let a = bytes(9);
        assert_eq!(a, bytes(9), "{topology}");
        assert_ne!(a, bytes(10), "{topology}");
    }
}

#[test]
fn first_batch_loss_is_chance_level_under_near_zero_init() {
    let data = dataset(4, 4, 3);
    let k = 4.0f64;
    for (topology, terms) in [(Topology::Baseline, 1.0), (Topology::DomainNet, 3.0)] {
        let spec = ModelSpec::new(topology, InputMode::Frames, 4);
        let config = TrainConfig {
            epochs: 1,
            batches_per_epoch: 1,
            batch_size: 16,
            init: InitConfig {
                gain: 1e-3,
                ..InitConfig::default()
            },
            ..TrainConfig::default()
        };
        let loss = train(&spec, &config, &data).unwrap().history[0].loss;
        let want = terms * k.ln();
        assert!(
            (loss - want).abs() <= 0.05 * want,
            "{topology}: {loss} vs {want}"
        );
    }
}

#[test]
fn training_fits_the_training_frames() {
    let data = dataset(3, 6, 4);
    let spec = ModelSpec::new(Topology::Baseline, InputMode::Frames, 3);
    let config = TrainConfig {
        epochs: 4,
        batches_per_epoch: 25,
        batch_size: 16,
        seed: 1,
        ..TrainConfig::default()
    };
    let trained = train(&spec, &config, &data).unwrap();
    let last = trained.history.last().unwrap();
    assert!(last.train_accuracy >= 0.9, "{:?}", trained.history);
    assert!(trained
        .history
        .iter()
        .all(|r| r.loss.is_finite() && r.max_grad_norm > 0.0));
}

#[test]
fn sampler_balances_classes_of_unequal_size() {
    let index = FrameIndex::new(2, [(0, 0, 10), (1, 1, 1000)]).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let small = index
        .sample_batch(10_000, &mut rng)
        .iter()
        .filter(|s| s.label == 0)
        .count();
    assert!((4850..=5150).contains(&small), "{small}");
}

fn chi_square_p(counts: &[usize]) -> f64 {
    let n: usize = counts.iter().sum();
    let e = n as f64 / counts.len() as f64;
    let stat: f64 = counts.iter().map(|&c| (c as f64 - e).powi(2) / e).sum();
    1.0 - ChiSquared::new((counts.len() - 1) as f64)
        .unwrap()
        .cdf(stat)
}

#[test]
fn sampler_is_uniform_over_classes_and_frames() {
    let sizes = [10usize, 100, 1000];
    let index = FrameIndex::new(3, sizes.iter().enumerate().map(|(c, &n)| (c, c, n))).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let draws = index.sample_batch(100_000, &mut rng);
    let mut per_class = [0usize; 3];
    let mut per_frame: Vec<Vec<usize>> = sizes.iter().map(|&n| vec![0; n]).collect();
    for s in &draws {
        assert_eq!(s.clip, s.label);
        per_class[s.label] += 1;
        per_frame[s.label][s.frame] += 1;
    }
    let p = chi_square_p(&per_class);
    assert!(p > 0.01, "class counts {per_class:?}, p = {p}");
    for (c, counts) in per_frame.iter().enumerate() {
        let p = chi_square_p(counts);
        assert!(p > 0.01, "class {c} frames, p = {p}");
    }
}

#[test]
fn sampler_requires_every_class() {
    let err = FrameIndex::new(3, [(0, 0, 4), (1, 2, 4)]).unwrap_err();
    assert!(err.to_string().contains("category 1"), "{err}");
}

#[test]
fn invalid_training_configs_are_rejected() {
    let data = dataset(3, 4, 3);
    let spec = tiny_spec(Topology::Baseline, 3);
    for config in [
        TrainConfig {
            batch_size: 0,
            ..quick(1, 0)
        },
        TrainConfig {
            learning_rate: 0.0,
            ..quick(1, 0)
        },
        TrainConfig {
            momentum: 1.0,
            ..quick(1, 0)
        },
        TrainConfig {
            clip_grad_norm: Some(0.0),
            ..quick(1, 0)
        },
    ] {
        assert!(
            matches!(train(&spec, &config, &data), Err(Error::Config(_))),
            "{config:?}"
        );
    }
    let wrong_k = tiny_spec(Topology::Baseline, 4);
    assert!(train(&wrong_k, &quick(1, 0), &data).is_err());
}

#[test]
fn best_epoch_is_reported_from_history() {
    let data = dataset(3, 6, 3);
    let trained = train(&tiny_spec(Topology::Baseline, 3), &quick(3, 2), &data).unwrap();
    assert_eq!(trained.history.len(), 3);
    let best = trained.best_epoch;
    assert!((1..=3).contains(&best));
    let acc = |e: usize| trained.history[e - 1].val_accuracy.unwrap();
    assert!(trained
        .history
        .iter()
        .all(|r| r.val_accuracy.unwrap() <= acc(best)));
    assert!(trained.history[best..]
        .iter()
        .all(|r| r.val_accuracy.unwrap() < acc(best)));
}
