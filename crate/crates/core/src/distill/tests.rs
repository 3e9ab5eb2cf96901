use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::data::{generate, DataSpec, Split};
use crate::masking::{progressive_mask, StageRecord};
use crate::optim::OptimConfig;
use crate::tensor::gradcheck::{max_relative_error, numeric_grads, DEFAULT_STEP};
use crate::tensor::RowSelect;
use crate::vit::checkpoint::{to_bytes, CheckpointMeta};

fn tiny(depth: usize, heads: usize) -> ViTConfig {
    ViTConfig {
        image_size: 8,
        patch_size: 4,
        channels: 1,
        depth,
        heads,
        dim: 8,
        mlp_ratio: 2,
        decoder: DecoderKind::None,
        task_head: TaskHead::None,
    }
}

fn spiced(config: &ViTConfig, seed: u64) -> ViTParams {
    let mut p = ViTParams::init(config, seed).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    for (_, t) in p.named_tensors_mut().unwrap() {
        for v in t.data_mut() {
            *v += rng.gen_range(-0.4..0.4);
        }
    }
    p
}

fn teachers(config: &ViTConfig) -> TeacherBundle {
    let tc = spiced(&config.with_head(TaskHead::Classify(4)), 11).freeze();
    let tm = spiced(&config.with_head(TaskHead::Reconstruct), 12).freeze();
    TeacherBundle::new(tc, tm).unwrap()
}

fn images(config: &ViTConfig, batch: usize, seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let len = batch * config.channels * config.image_size * config.image_size;
    let data: Vec<f64> = (0..len).map(|_| rng.gen_range(-1.0..1.0)).collect();
    Tensor::from_f64(
        vec![batch, config.channels, config.image_size, config.image_size],
        &data,
    )
    .unwrap()
}

fn mask_keeping(n: usize, kept: &[usize]) -> TokenMask {
    let dropped = (0..n).filter(|i| !kept.contains(i)).collect();
    TokenMask::from_history(
        n,
        vec![StageRecord {
            layer: 0,
            dropped,
            clamped: false,
        }],
    )
    .unwrap()
}

fn sl1(d: f64) -> f64 {
    if d.abs() < 1.0 {
        0.5 * d * d
    } else {
        d.abs() - 0.5
    }
}

/// Loss from raw traces with explicit index loops.
fn oracle_loss(
    teachers: &TeacherBundle,
    student: &ViTParams,
    patches: &Tensor,
    kept: &[Vec<usize>],
    config: &DistillConfig,
) -> (f64, f64, Vec<f64>) {
    let c = student.config();
    let (n, d, h) = (c.tokens(), c.dim, c.heads);
    let tc = teachers.feature.infer(patches, &ForwardOptions::traced()).unwrap();
    let tm = teachers.relation.infer(patches, &ForwardOptions::traced()).unwrap();
    let s = student
        .infer(
            patches,
            &ForwardOptions {
                keep: Some(RowSelect::PerBatch(kept.to_vec())),
                trace: true,
                ..Default::default()
            },
        )
        .unwrap();
    let k = kept[0].len();

    let t_out = tc.layers[config.feature_layer - 1].output.data();
    let s_out = s.layers[config.feature_layer - 1].output.data();
    let mut feature = 0.0;
    for (b, rows) in kept.iter().enumerate() {
        for (i, &src) in rows.iter().enumerate() {
            for j in 0..d {
                feature += sl1(s_out[(b * k + i) * d + j] - t_out[(b * n + src) * d + j]);
            }
        }
    }
    feature /= (kept.len() * k * d) as f64;

    let relations: Vec<f64> = config
        .relation_layers
        .iter()
        .map(|&l| {
            let t = tm.layers[l - 1].relation.data();
            let s = s.layers[l - 1].relation.data();
            let mut sum = 0.0;
            for (b, rows) in kept.iter().enumerate() {
                for head in 0..h {
                    for (i, &qi) in rows.iter().enumerate() {
                        for (j, &kj) in rows.iter().enumerate() {
                            let sv = s[((b * h + head) * k + i) * k + j];
                            let tv = t[((b * h + head) * n + qi) * n + kj];
                            sum += sl1(sv - tv);
                        }
                    }
                }
            }
            sum / (kept.len() * h * k * k) as f64
        })
        .collect();
    let total = feature + config.alpha * relations.iter().sum::<f64>();
    (total, feature, relations)
}

fn config_for(depth: usize) -> DistillConfig {
    DistillConfig {
        alpha: 0.7,
        feature_layer: depth,
        relation_layers: vec![depth - 1, 1],
        schedule: None,
        decoder: DecoderKind::None,
    }
}

#[test]
fn loss_matches_loop_oracle_under_per_image_masks() {
    let c = tiny(3, 1);
    let t = teachers(&c);
    let student = spiced(&c, 3);
    let patches = patchify(&images(&c, 2, 4), &c).unwrap();
    let config = config_for(3);
    let kept = vec![vec![0, 2], vec![1, 3]];
    let masks = kept.iter().map(|k| mask_keeping(4, k)).collect();
    let targets = targets_with_masks(&t, &patches, Some(masks), &config).unwrap();
    let got = loss_against(&student, &patches, &targets, &config).unwrap();
    let (total, feature, relations) = oracle_loss(&t, &student, &patches, &kept, &config);
    assert!((got.total - total).abs() < 1e-12, "{} vs {total}", got.total);
    assert!((got.feature_term - feature).abs() < 1e-12);
    for (g, w) in got.relation_terms.iter().zip(&relations) {
        assert!((g - w).abs() < 1e-12);
    }
    assert_eq!(got.tokens_used, 2);
    assert_eq!(got.keep_ratio, 0.5);
}

#[test]
fn unmasked_loss_matches_loop_oracle() {
    let c = tiny(3, 2);
    let t = teachers(&c);
    let student = spiced(&c, 5);
    let patches = patchify(&images(&c, 3, 6), &c).unwrap();
    let config = config_for(3);
    let got = hybrid_loss(&student, &t, &patches, &config).unwrap();
    let all = vec![(0..4).collect::<Vec<_>>(); 3];
    let (total, _, _) = oracle_loss(&t, &student, &patches, &all, &config);
    assert!((got.total - total).abs() < 1e-12);
    assert_eq!(got.keep_ratio, 1.0);
}

#[test]
fn computed_masks_come_from_the_relation_teacher() {
    let c = ViTConfig {
        image_size: 16,
        ..tiny(3, 2)
    };
    let t = teachers(&c);
    let imgs = images(&c, 3, 7);
    let patches = patchify(&imgs, &c).unwrap();
    let schedule = MaskSchedule::for_depth(3, 0.3).unwrap();
    let config = DistillConfig {
        schedule: Some(schedule.clone()),
        ..config_for(3)
    };
    let targets = compute_targets(&t, &patches, &config).unwrap();
    let expected = progressive_mask(&t.relation, &imgs, &schedule).unwrap();
    assert_eq!(targets.masks.as_ref().unwrap(), &expected);
    // 16 -> 12 -> 9 -> 7
    assert_eq!(targets.tokens(), 7);
    assert_eq!(targets.features.shape(), &[3, 7, 8]);
    assert_eq!(targets.relations[0].shape(), &[3, 2, 7, 7]);
}

#[test]
fn alpha_zero_reports_relations_without_applying_them() {
    let c = tiny(3, 2);
    let t = teachers(&c);
    let student = spiced(&c, 8);
    let patches = patchify(&images(&c, 2, 9), &c).unwrap();
    let config = DistillConfig {
        alpha: 0.0,
        ..config_for(3)
    };
    let got = hybrid_loss(&student, &t, &patches, &config).unwrap();
    assert_eq!(got.total, got.feature_term);
    assert!(got.relation_terms.iter().all(|&r| r > 0.0));
}

#[test]
fn teacher_bundle_checks_structure() {
    let c = tiny(2, 2);
    let tc = ViTParams::<f64>::init(&c, 1).unwrap().freeze();
    let deeper = ViTParams::<f64>::init(&tiny(3, 2), 2).unwrap().freeze();
    assert!(matches!(
        TeacherBundle::new(tc.clone(), deeper),
        Err(Error::Asymmetric(_))
    ));
    let thawed = ViTParams::<f64>::init(&c, 3).unwrap();
    assert!(matches!(
        TeacherBundle::new(tc.clone(), thawed),
        Err(Error::Contract(_))
    ));
    let bundle = TeacherBundle::new(tc.clone(), tc).unwrap();
    assert!(matches!(
        bundle.check_student(&tiny(2, 1)),
        Err(Error::Asymmetric(_))
    ));
}

#[test]
fn config_validation() {
    let ok = config_for(3);
    ok.validate(3).unwrap();
    for bad in [
        DistillConfig {
            alpha: -1.0,
            ..ok.clone()
        },
        DistillConfig {
            alpha: f64::NAN,
            ..ok.clone()
        },
        DistillConfig {
            feature_layer: 0,
            ..ok.clone()
        },
        DistillConfig {
            relation_layers: vec![4],
            ..ok.clone()
        },
        DistillConfig {
            schedule: Some(MaskSchedule::new(vec![3], 0.3).unwrap()),
            ..ok.clone()
        },
    ] {
        assert!(bad.validate(3).is_err(), "{bad:?}");
    }
    let d = DistillConfig::for_depth(6).unwrap();
    assert_eq!(d.relation_layers, vec![5, 4]);
    assert_eq!(d.schedule.unwrap().update_layers, vec![0, 2, 4]);
}

#[test]
fn gradients_match_finite_differences_with_linear_decoder() {
    let c = tiny(2, 2);
    let t = teachers(&c);
    let config = DistillConfig {
        alpha: 1.0,
        feature_layer: 2,
        relation_layers: vec![1],
        schedule: Some(MaskSchedule::for_depth(2, 0.3).unwrap()),
        decoder: DecoderKind::Linear,
    };
    let student = spiced(&config.student_config(&c), 21);
    let patches = patchify(&images(&c, 2, 22), &c).unwrap();
    let targets = compute_targets(&t, &patches, &config).unwrap();
    assert_eq!(targets.tokens(), 3);

    let mut tape = Tape::new();
    let bound = student.bind(&mut tape, true);
    let vars = hybrid_loss_vars(&mut tape, &bound, student.config(), &patches, &targets, &config).unwrap();
    let mut grads = tape.backward(vars.total).unwrap();
    let analytic: Vec<Tensor> = bound.vars().into_iter().map(|v| grads.take(v)).collect();

    let inputs: Vec<Tensor> = student.named_tensors().into_iter().map(|(_, t)| t.clone()).collect();
    let numeric = numeric_grads(&inputs, DEFAULT_STEP, |values| {
        let mut probe = student.clone();
        for ((_, slot), v) in probe.named_tensors_mut()?.into_iter().zip(values) {
            *slot = v.clone();
        }
        Ok(loss_against(&probe, &patches, &targets, &config)?.total)
    })
    .unwrap();
    for ((name, _), (a, n)) in student.named_tensors().iter().zip(analytic.iter().zip(&numeric)) {
        let err = max_relative_error(a, n);
        assert!(err < 1e-4, "{name}: relative error {err:e}");
    }
}

fn tiny_data(c: &ViTConfig) -> Dataset {
    let spec = DataSpec {
        seed: 3,
        train_images: 12,
        eval_images: 4,
        image_size: c.image_size,
        channels: c.channels,
        class_count: 4,
    };
    generate(&spec, Split::Train).unwrap()
}

fn run(
    t: &TeacherBundle,
    data: &Dataset,
    student: &ViTParams,
    config: &DistillConfig,
    lr: f64,
) -> (Vec<StepRecord>, Vec<u8>) {
    let train = TrainParams {
        epochs: 2,
        batch_size: 5,
        seed: 4,
        optim: OptimConfig {
            lr,
            lr_min: 0.0,
            ..Default::default()
        },
    };
    let cache = TargetCache::build(t, data, config, 4).unwrap();
    let mut log = Vec::new();
    let out = distill(student.clone(), t, data, &cache, config, &train, |r, _| {
        log.push(r.clone());
        Ok(())
    })
    .unwrap();
    (log, to_bytes(&out, &CheckpointMeta::default()).unwrap())
}

fn masked_config() -> DistillConfig {
    DistillConfig {
        alpha: 1.0,
        feature_layer: 3,
        relation_layers: vec![2, 1],
        schedule: Some(MaskSchedule::for_depth(3, 0.3).unwrap()),
        decoder: DecoderKind::None,
    }
}

fn wide() -> ViTConfig {
    ViTConfig {
        image_size: 16,
        ..tiny(3, 2)
    }
}

#[test]
fn alpha_zero_run_is_the_feature_only_run() {
    let c = wide();
    let t = teachers(&c);
    let data = tiny_data(&c);
    let student = ViTParams::init(&c, 30).unwrap();
    let hybrid = DistillConfig {
        alpha: 0.0,
        ..masked_config()
    };
    let (a_log, a_bytes) = run(&t, &data, &student, &hybrid, 1e-2);
    let (b_log, b_bytes) = run(&t, &data, &student, &hybrid.feature_only(), 1e-2);
    let totals = |log: &[StepRecord]| log.iter().map(|r| r.total.to_bits()).collect::<Vec<_>>();
    assert_eq!(a_log.len(), 6);
    assert_eq!(totals(&a_log), totals(&b_log));
    assert_eq!(a_bytes, b_bytes);
    assert!(a_log.iter().all(|r| r.relation_terms.len() == 2));
    assert!(b_log.iter().all(|r| r.relation_terms.is_empty()));
}

#[test]
fn zero_drop_schedule_is_the_unmasked_run() {
    let c = wide();
    let t = teachers(&c);
    let data = tiny_data(&c);
    let student = ViTParams::init(&c, 31).unwrap();
    let k0 = DistillConfig {
        schedule: Some(MaskSchedule::for_depth(3, 0.0).unwrap()),
        ..masked_config()
    };
    let unmasked = DistillConfig {
        schedule: None,
        ..masked_config()
    };
    let (a_log, a_bytes) = run(&t, &data, &student, &k0, 1e-2);
    let (b_log, b_bytes) = run(&t, &data, &student, &unmasked, 1e-2);
    let totals = |log: &[StepRecord]| log.iter().map(|r| r.total.to_bits()).collect::<Vec<_>>();
    assert_eq!(totals(&a_log), totals(&b_log));
    assert_eq!(a_bytes, b_bytes);
    assert_eq!(a_log[0].sample_mask.as_deref(), Some(&(0..16).collect::<Vec<_>>()[..]));
    assert!(b_log[0].sample_mask.is_none());
}

#[test]
fn self_distillation_starts_at_zero() {
    let c = wide();
    let t = teachers(&c);
    let student = t.feature.transplant(&c, 0).unwrap();
    let config = DistillConfig {
        alpha: 0.0,
        schedule: None,
        ..masked_config()
    };
    let patches = patchify(&images(&c, 3, 40), &c).unwrap();
    let loss = hybrid_loss(&student, &t, &patches, &config).unwrap();
    assert_eq!(loss.total, 0.0);
    assert!(loss.relation_terms.iter().all(|&r| r > 0.0));
}

#[test]
fn zero_lr_keeps_student_and_teachers_fixed() {
    let c = wide();
    let t = teachers(&c);
    let before_c = to_bytes(&t.feature, &CheckpointMeta::default()).unwrap();
    let before_m = to_bytes(&t.relation, &CheckpointMeta::default()).unwrap();
    let data = tiny_data(&c);
    let student = ViTParams::init(&c, 32).unwrap();
    let (log, bytes) = run(&t, &data, &student, &masked_config(), 0.0);
    assert!(log.iter().all(|r| r.lr == 0.0 && r.total > 0.0));
    assert_eq!(bytes, to_bytes(&student, &CheckpointMeta::default()).unwrap());
    assert_eq!(before_c, to_bytes(&t.feature, &CheckpointMeta::default()).unwrap());
    assert_eq!(before_m, to_bytes(&t.relation, &CheckpointMeta::default()).unwrap());
}

#[test]
fn cached_targets_equal_fresh_targets() {
    let c = wide();
    let t = teachers(&c);
    let data = tiny_data(&c);
    let config = masked_config();
    let cache = TargetCache::build(&t, &data, &config, 5).unwrap();
    let pick = [7, 0, 11, 3];
    let fresh = compute_targets(&t, &patchify(&data.images(&pick).unwrap(), &c).unwrap(), &config).unwrap();
    assert_eq!(cache.batch(&pick).unwrap(), fresh);
}

#[test]
fn training_lowers_the_loss() {
    let c = wide();
    let t = teachers(&c);
    let data = tiny_data(&c);
    let student = ViTParams::init(&c, 33).unwrap();
    let config = masked_config();
    let cache = TargetCache::build(&t, &data, &config, 12).unwrap();
    let all: Vec<usize> = (0..12).collect();
    let patches = patchify(&data.images(&all).unwrap(), &c).unwrap();
    let targets = cache.batch(&all).unwrap();
    let before = loss_against(&student, &patches, &targets, &config).unwrap().total;
    let train = TrainParams {
        epochs: 15,
        batch_size: 6,
        seed: 1,
        optim: OptimConfig {
            lr: 5e-3,
            ..Default::default()
        },
    };
    let trained = distill(student, &t, &data, &cache, &config, &train, |_, _| Ok(())).unwrap();
    let after = loss_against(&trained, &patches, &targets, &config).unwrap().total;
    assert!(after < 0.7 * before, "{before} -> {after}");
}
