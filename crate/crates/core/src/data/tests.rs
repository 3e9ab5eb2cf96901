use super::*;
use crate::optim::OptimConfig;
use crate::tensor::Tape;
use crate::vit::{patchify, TaskHead, ViTConfig, ViTParams};

fn small_spec() -> DataSpec {
    DataSpec {
        seed: 9,
        train_images: 40,
        eval_images: 16,
        image_size: 16,
        channels: 1,
        class_count: 8,
    }
}

fn vit(head: TaskHead) -> ViTConfig {
    ViTConfig {
        image_size: 16,
        patch_size: 4,
        channels: 1,
        depth: 2,
        heads: 2,
        dim: 16,
        mlp_ratio: 2,
        decoder: Default::default(),
        task_head: head,
    }
}

fn params(epochs: usize) -> TrainParams {
    TrainParams {
        epochs,
        batch_size: 8,
        seed: 5,
        optim: OptimConfig::default(),
    }
}

#[test]
fn same_seed_same_bytes() {
    let a = generate(&small_spec(), Split::Train).unwrap();
    let b = generate(&small_spec(), Split::Train).unwrap();
    assert_eq!(a, b);
    let other = generate(
        &DataSpec {
            seed: 10,
            ..small_spec()
        },
        Split::Train,
    )
    .unwrap();
    assert_ne!(a.images, other.images);
}

#[test]
fn prefix_is_reproducible_alone() {
    let full = generate(&small_spec(), Split::Train).unwrap();
    let short = generate(
        &DataSpec {
            train_images: 10,
            ..small_spec()
        },
        Split::Train,
    )
    .unwrap();
    assert_eq!(short.images[..], full.images[..short.images.len()]);
}

#[test]
fn splits_differ() {
    let train = generate(&small_spec(), Split::Train).unwrap();
    let eval = generate(&small_spec(), Split::Eval).unwrap();
    assert_eq!(eval.len(), 16);
    assert_ne!(train.images[..eval.images.len()], eval.images[..]);
    assert_eq!(eval.header.split, Split::Eval);
}

#[test]
fn class_histogram_is_balanced() {
    let spec = DataSpec {
        train_images: 43,
        class_count: 5,
        ..small_spec()
    };
    let d = generate(&spec, Split::Train).unwrap();
    let h = d.class_histogram();
    assert_eq!(h.iter().sum::<usize>(), 43);
    assert!(h.iter().max().unwrap() - h.iter().min().unwrap() <= 1, "{h:?}");
}

#[test]
fn pixels_map_into_unit_interval() {
    let d = generate(&small_spec(), Split::Train).unwrap();
    let x = d.images::<f64>(&[0, 39]).unwrap();
    assert_eq!(x.shape(), &[2, 1, 16, 16]);
    assert!(x.data().iter().all(|v| (-1.0..=1.0).contains(v)));
    assert_eq!(x.data()[0], d.images[0] as f64 / 127.5 - 1.0);
    assert!(matches!(d.images::<f64>(&[40]), Err(Error::Index { .. })));
}

#[test]
fn file_round_trip_is_byte_exact() {
    let d = generate(&small_spec(), Split::Eval).unwrap();
    let bytes = d.to_bytes().unwrap();
    let back = Dataset::from_reader(&bytes[..]).unwrap();
    assert_eq!(back, d);
    assert_eq!(back.to_bytes().unwrap(), bytes);

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("eval.bin");
    d.save(&path).unwrap();
    assert_eq!(std::fs::read(&path).unwrap(), bytes);
    assert_eq!(Dataset::load(&path).unwrap(), d);
}

#[test]
fn malformed_files_are_rejected() {
    let d = generate(&small_spec(), Split::Train).unwrap();
    let bytes = d.to_bytes().unwrap();
    let split = bytes.iter().position(|&b| b == b'\n').unwrap();
    let body = &bytes[split..];

    let mut header: serde_json::Value = serde_json::from_slice(&bytes[..split]).unwrap();
    header["format_version"] = 7.into();
    let mut wrong = serde_json::to_vec(&header).unwrap();
    wrong.extend_from_slice(body);
    assert!(matches!(
        Dataset::from_reader(&wrong[..]),
        Err(Error::FormatVersion { found: 7, expected: 1 })
    ));

    assert!(matches!(
        Dataset::from_reader(&bytes[..bytes.len() - 1]),
        Err(Error::Format(_))
    ));

    let mut bad_label = bytes.clone();
    let last = bad_label.len() - 2;
    bad_label[last] = 200;
    assert!(matches!(Dataset::from_reader(&bad_label[..]), Err(Error::Format(_))));
}

#[test]
fn generator_rejects_bad_specs() {
    for spec in [
        DataSpec {
            class_count: 0,
            ..small_spec()
        },
        DataSpec {
            class_count: 9,
            ..small_spec()
        },
        DataSpec {
            train_images: 3,
            ..small_spec()
        },
        DataSpec {
            image_size: 0,
            ..small_spec()
        },
    ] {
        assert!(generate(&spec, Split::Train).is_err(), "{spec:?}");
    }
}

#[test]
fn epoch_order_is_a_seeded_permutation() {
    let a = epoch_order(3, 0, 50);
    let mut sorted = a.clone();
    sorted.sort_unstable();
    assert_eq!(sorted, (0..50).collect::<Vec<_>>());
    assert_eq!(a, epoch_order(3, 0, 50));
    assert_ne!(a, epoch_order(3, 1, 50));
    let p = probe_indices(1, 50, 8);
    assert_eq!(p.len(), 8);
    assert_eq!(p, probe_indices(1, 50, 8));
}

#[test]
fn zero_epochs_return_frozen_initialization() {
    let data = generate(&small_spec(), Split::Train).unwrap();
    let config = vit(TaskHead::Classify(8));
    let (p, log) = pretrain_supervised_teacher::<f64>(&config, &data, &params(0)).unwrap();
    assert!(p.is_frozen());
    assert!(log.epoch_loss.is_empty());
    let init = ViTParams::<f64>::init(&config, 5).unwrap();
    for ((_, a), (_, b)) in p.named_tensors().iter().zip(init.named_tensors()) {
        assert_eq!(*a, b);
    }
    let mut p = p;
    assert!(matches!(p.named_tensors_mut(), Err(Error::Frozen)));
}

#[test]
fn teachers_need_matching_heads() {
    let data = generate(&small_spec(), Split::Train).unwrap();
    assert!(pretrain_supervised_teacher::<f64>(&vit(TaskHead::Classify(3)), &data, &params(1)).is_err());
    assert!(pretrain_supervised_teacher::<f64>(&vit(TaskHead::Reconstruct), &data, &params(1)).is_err());
    assert!(
        pretrain_mim_teacher::<f64>(&vit(TaskHead::None), &data, &ReconTask::default(), &params(1)).is_err()
    );
    let bad_ratio = ReconTask {
        mask_ratio: 1.0,
        ..Default::default()
    };
    assert!(pretrain_mim_teacher::<f64>(&vit(TaskHead::Reconstruct), &data, &bad_ratio, &params(1)).is_err());
}

#[test]
fn normalized_targets_have_zero_mean_unit_variance() {
    let data = generate(&small_spec(), Split::Train).unwrap();
    let patches = patchify(&data.images::<f64>(&[0, 1, 2]).unwrap(), &vit(TaskHead::None)).unwrap();
    let t = normalized_patch_targets(&patches);
    for row in t.data().chunks_exact(16) {
        let mean = row.iter().sum::<f64>() / 16.0;
        let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 16.0;
        assert!(mean.abs() < 1e-12);
        // eps 1e-6 in the denominator keeps flat patches finite.
        assert!(var <= 1.0 + 1e-12 && !(1e-6..=0.9).contains(&var), "{var}");
    }
}

#[test]
fn autoencoding_loss_at_init_is_target_variance() {
    let data = generate(&small_spec(), Split::Train).unwrap();
    let config = vit(TaskHead::Reconstruct);
    let idx: Vec<usize> = (0..16).collect();
    let patches = patchify(&data.images::<f64>(&idx).unwrap(), &config).unwrap();
    let p = ViTParams::<f64>::init(&config, 1).unwrap();
    for target in [ReconTarget::Normalized, ReconTarget::Raw] {
        let t = target.of(&patches);
        let mean_sq = t.data().iter().map(|v| v * v).sum::<f64>() / t.len() as f64;
        let mut tape = Tape::new();
        let bound = p.bind(&mut tape, false);
        let none = vec![Vec::new(); 16];
        let loss = recon_loss(&mut tape, &bound, &config, &patches, &none, target).unwrap();
        let loss = tape.value(loss).item().unwrap();
        // A small-init head predicts nearly zero, so the MSE is the second
        // moment of the targets (their variance for normalized targets).
        assert!((loss / mean_sq - 1.0).abs() < 0.1, "{target:?}: {loss} vs {mean_sq}");
    }
}

#[test]
fn reconstruction_loss_decreases() {
    let data = generate(&small_spec(), Split::Train).unwrap();
    let recon = ReconTask {
        mask_ratio: 0.5,
        target: ReconTarget::Raw,
        mask_block: 2,
    };
    let (_, log) = pretrain_mim_teacher::<f64>(&vit(TaskHead::Reconstruct), &data, &recon, &params(8)).unwrap();
    let first = log.epoch_loss[0];
    let last = *log.epoch_loss.last().unwrap();
    assert!(last < 0.8 * first, "{:?}", log.epoch_loss);
}

#[test]
fn supervised_teacher_fits_its_training_set() {
    // 4 layers, 8 classes, 2k images, at most 20 epochs.
    let spec = DataSpec {
        train_images: 2000,
        image_size: 32,
        ..small_spec()
    };
    let data = generate(&spec, Split::Train).unwrap();
    let config = ViTConfig {
        depth: 4,
        heads: 4,
        dim: 64,
        image_size: 32,
        ..vit(TaskHead::Classify(8))
    };
    let train = TrainParams {
        epochs: 20,
        batch_size: 32,
        seed: 5,
        optim: OptimConfig {
            lr: 3e-3,
            ..Default::default()
        },
    };
    let (p, log) = pretrain_supervised_teacher::<f32>(&config, &data, &train).unwrap();
    let all: Vec<usize> = (0..data.len()).collect();
    let acc = accuracy(&p, &data, &all).unwrap();
    let regressions = log.epoch_loss.windows(2).filter(|w| w[1] > w[0]).count();
    assert!(regressions <= 1, "losses {:?}", log.epoch_loss);
    assert!(acc > 0.9, "train accuracy {acc}, losses {:?}", log.epoch_loss);

    // Attention widens with depth.
    let eval = generate(&spec, Split::Eval).unwrap();
    let probes = eval.images::<f32>(&(0..eval.len()).collect::<Vec<_>>()).unwrap();
    let stats = crate::diagnostics::model_report(&p, &probes, false, 16).unwrap();
    let first = stats.layers[0].mean_dist_patch();
    let last = stats.layers[3].mean_dist_patch();
    assert!(last > first, "distance {first} -> {last}");
}
