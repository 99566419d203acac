//! Downstream protocol behavior: fold hygiene, freezing, learning,
//! chance-level starts, cross-validation determinism, and the comparison
//! runners, all at micro scale.

use std::collections::BTreeSet;

use hico_core::data::{generate_dataset, DatasetManifest};
use hico_core::encoder::{BackboneConfig, TinyFpn};
use hico_core::eval::{
    compute_metrics, convergence_compare, convergence_csv, cross_validate, finetune, fold_splits,
    prepare_backbone, run_ablation, sweep, AblationSpec, FinetuneConfig, PretrainKind, SweepAxis,
    TrainableScope,
};
use hico_core::rng;
use hico_core::trainer::{PretrainConfig, TermToggles, TrainMode};
use hico_core::Error;

fn micro_dataset(seed: u64, num_videos: usize) -> hico_core::data::Dataset {
    let manifest = DatasetManifest {
        seed,
        num_videos,
        num_classes: 3,
        frames_per_video: 4,
        image_size: 16,
        ..DatasetManifest::default()
    };
    generate_dataset(&manifest).unwrap()
}

fn micro_backbone() -> BackboneConfig {
    BackboneConfig {
        stem_channels: 4,
        stage_channels: [4, 4, 4, 4],
        fpn_channels: 4,
        embed_dim: 4,
        num_classes: 3,
        input_hw: 16,
        stem_downsample: false,
        ..BackboneConfig::default()
    }
}

fn micro_pretrain(seed: u64) -> PretrainConfig {
    PretrainConfig {
        epochs: 1,
        batch_size: 4,
        backbone: micro_backbone(),
        seed,
        ..PretrainConfig::default()
    }
}

fn micro_finetune(seed: u64) -> FinetuneConfig {
    FinetuneConfig {
        epochs: 2,
        folds: 2,
        batch_size: 8,
        seed,
        scope: TrainableScope::Full,
        ..FinetuneConfig::default()
    }
}

fn fresh_model(seed: u64) -> TinyFpn {
    TinyFpn::new(micro_backbone(), seed).unwrap()
}

#[test]
fn folds_partition_the_videos() {
    let ds = micro_dataset(11, 13);
    let splits = fold_splits(&ds, 5, 3).unwrap();
    assert_eq!(splits.len(), 5);
    let all: BTreeSet<u32> = ds.videos.iter().map(|v| v.video_id).collect();
    let mut seen = BTreeSet::new();
    let mut sizes = Vec::new();
    for split in &splits {
        for id in &split.test_ids {
            assert!(seen.insert(*id), "video {id} tested in two folds");
        }
        sizes.push(split.test_ids.len());
        // train and test are complementary within each fold
        let train: BTreeSet<u32> = split.train_ids.iter().copied().collect();
        let test: BTreeSet<u32> = split.test_ids.iter().copied().collect();
        assert!(train.is_disjoint(&test));
        let union: BTreeSet<u32> = train.union(&test).copied().collect();
        assert_eq!(union, all);
    }
    assert_eq!(seen, all);
    let (min, max) = (sizes.iter().min().unwrap(), sizes.iter().max().unwrap());
    assert!(max - min <= 1, "test fold sizes {sizes:?} differ by more than one");
}

#[test]
fn folds_are_deterministic_and_seed_sensitive() {
    let ds = micro_dataset(11, 10);
    let a = fold_splits(&ds, 5, 3).unwrap();
    let b = fold_splits(&ds, 5, 3).unwrap();
    assert_eq!(a, b);
    let c = fold_splits(&ds, 5, 4).unwrap();
    assert_ne!(a, c, "different fold seeds should shuffle differently");
}

#[test]
fn folds_reject_degenerate_requests() {
    let ds = micro_dataset(11, 4);
    assert!(matches!(fold_splits(&ds, 1, 0), Err(Error::ConfigError(_))));
    assert!(matches!(fold_splits(&ds, 5, 0), Err(Error::ConfigError(_))));
}

#[test]
fn linear_probe_leaves_backbone_untouched() {
    let ds = micro_dataset(21, 8);
    let model = fresh_model(77);
    let before: Vec<(String, Vec<f64>)> = model
        .named_parameters()
        .into_iter()
        .map(|p| (p.name, p.value.data().to_vec()))
        .collect();
    let cfg = FinetuneConfig { scope: TrainableScope::LinearProbe, ..micro_finetune(5) };
    let ids: Vec<u32> = ds.videos.iter().map(|v| v.video_id).collect();
    let out = finetune(&model, &ds, &ids[..6], &ids[6..], &cfg).unwrap();
    for (name, data) in before {
        if hico_core::encoder::is_task_head(&name) {
            continue; // dropped downstream
        }
        let after = out.model.backbone.param(&name).unwrap();
        assert_eq!(after.data(), data.as_slice(), "parameter moved under linear_probe: {name}");
    }
}

#[test]
fn last3_scope_freezes_exactly_the_early_layers() {
    let ds = micro_dataset(22, 8);
    let model = fresh_model(78);
    let cfg = FinetuneConfig { scope: TrainableScope::LastThree, ..micro_finetune(6) };
    let ids: Vec<u32> = ds.videos.iter().map(|v| v.video_id).collect();
    let out = finetune(&model, &ds, &ids[..6], &ids[6..], &cfg).unwrap();
    let mut frozen_checked = 0;
    let mut moved = 0;
    for p in model.named_parameters() {
        if hico_core::encoder::is_task_head(&p.name) {
            continue;
        }
        let after = out.model.backbone.param(&p.name).unwrap();
        if hico_core::encoder::in_last3_scope(&p.name) {
            if after.data() != p.value.data() {
                moved += 1;
            }
        } else {
            assert_eq!(after.data(), p.value.data(), "should be frozen under last3: {}", p.name);
            frozen_checked += 1;
        }
    }
    assert!(frozen_checked > 0);
    assert!(moved > 0, "no last3 parameter moved at all");
}

#[test]
fn full_scope_moves_the_stem() {
    let ds = micro_dataset(23, 8);
    let model = fresh_model(79);
    let ids: Vec<u32> = ds.videos.iter().map(|v| v.video_id).collect();
    let out = finetune(&model, &ds, &ids[..6], &ids[6..], &micro_finetune(7)).unwrap();
    let before = model.param("stem.conv1.w").unwrap();
    let after = out.model.backbone.param("stem.conv1.w").unwrap();
    assert_ne!(before.data(), after.data());
}

#[test]
fn finetune_memorizes_its_training_videos() {
    // Train and evaluate on the same videos: optimization should beat
    // chance comfortably even from a random backbone.
    let ds = micro_dataset(30, 9);
    let model = fresh_model(80);
    let ids: Vec<u32> = ds.videos.iter().map(|v| v.video_id).collect();
    let cfg = FinetuneConfig { epochs: 8, ..micro_finetune(8) };
    let out = finetune(&model, &ds, &ids, &ids, &cfg).unwrap();
    assert_eq!(out.epoch_accuracy.len(), cfg.epochs + 1);
    let last = *out.epoch_accuracy.last().unwrap();
    assert!(
        last > 0.55,
        "memorization accuracy {last} not clearly above chance (1/3): {:?}",
        out.epoch_accuracy
    );
    assert_eq!(out.report.accuracy, last);
}

#[test]
fn fresh_head_starts_at_chance() {
    // Before any fine-tuning the head is random: accuracy over many frames
    // should sit near 1/num_classes for a scratch backbone.
    let ds = micro_dataset(31, 24);
    let ids: Vec<u32> = ds.videos.iter().map(|v| v.video_id).collect();
    let cfg = FinetuneConfig { epochs: 1, ..micro_finetune(9) };
    let mut offsets = Vec::new();
    for seed in 0..3 {
        let model = fresh_model(90 + seed);
        let out = finetune(&model, &ds, &ids[..4], &ids[4..], &cfg).unwrap();
        offsets.push((out.epoch_accuracy[0] - 1.0 / 3.0).abs());
    }
    let median = {
        let mut o = offsets.clone();
        o.sort_by(|a, b| a.partial_cmp(b).unwrap());
        o[o.len() / 2]
    };
    assert!(median <= 0.15, "pre-training accuracy too far from chance: {offsets:?}");
}

#[test]
fn finetune_rejects_bad_setups() {
    let ds = micro_dataset(32, 6);
    let model = fresh_model(81);
    let ids: Vec<u32> = ds.videos.iter().map(|v| v.video_id).collect();
    let cfg = micro_finetune(10);
    assert!(matches!(
        finetune(&model, &ds, &[], &ids, &cfg),
        Err(Error::ConfigError(_))
    ));
    assert!(matches!(
        finetune(&model, &ds, &ids, &[], &cfg),
        Err(Error::ConfigError(_))
    ));
    let bad = FinetuneConfig { lr: 0.0, ..cfg };
    assert!(matches!(finetune(&model, &ds, &ids[..3], &ids[3..], &bad), Err(Error::ConfigError(_))));
    let bad = FinetuneConfig { folds: 1, ..cfg };
    assert!(matches!(finetune(&model, &ds, &ids[..3], &ids[3..], &bad), Err(Error::ConfigError(_))));
    // size mismatch between backbone input and dataset frames
    let small = TinyFpn::new(BackboneConfig { input_hw: 8, ..micro_backbone() }, 5).unwrap();
    assert!(matches!(
        finetune(&small, &ds, &ids[..3], &ids[3..], &cfg),
        Err(Error::ConfigError(_))
    ));
}

#[test]
fn cross_validation_is_thread_count_invariant() {
    let ds = micro_dataset(40, 8);
    let model = fresh_model(82);
    let serial = cross_validate(&model, &ds, &FinetuneConfig { threads: 1, ..micro_finetune(11) }).unwrap();
    let parallel = cross_validate(&model, &ds, &FinetuneConfig { threads: 3, ..micro_finetune(11) }).unwrap();
    assert_eq!(serial.folds.len(), 2);
    assert_eq!(serial.mean_accuracy, parallel.mean_accuracy);
    assert_eq!(serial.std_accuracy, parallel.std_accuracy);
    for (a, b) in serial.folds.iter().zip(&parallel.folds) {
        assert_eq!(a.confusion, b.confusion);
        assert_eq!(a.accuracy, b.accuracy);
        assert_eq!(a.fold, b.fold);
    }
}

#[test]
fn cross_validation_aggregates_folds() {
    let ds = micro_dataset(41, 8);
    let model = fresh_model(83);
    let cv = cross_validate(&model, &ds, &micro_finetune(12)).unwrap();
    let accs: Vec<f64> = cv.folds.iter().map(|r| r.accuracy).collect();
    let mean = accs.iter().sum::<f64>() / accs.len() as f64;
    assert!((cv.mean_accuracy - mean).abs() < 1e-15);
    assert!(cv.mean_accuracy >= 0.0 && cv.mean_accuracy <= 1.0);
    assert!(cv.std_accuracy >= 0.0);
    // fold indices recorded in order
    for (k, r) in cv.folds.iter().enumerate() {
        assert_eq!(r.fold, k);
    }
}

#[test]
fn cross_validation_rejects_too_few_videos() {
    let ds = micro_dataset(42, 3);
    let model = fresh_model(84);
    let cfg = FinetuneConfig { folds: 5, ..micro_finetune(13) };
    assert!(matches!(cross_validate(&model, &ds, &cfg), Err(Error::ConfigError(_))));
}

#[test]
fn scratch_backbone_matches_pretrain_initialization() {
    // "scratch" must mean the very same random init a pretraining run
    // would have started from, so comparisons isolate the pretraining.
    let pre_ds = micro_dataset(50, 8);
    let pre_cfg = micro_pretrain(123);
    let scratch = prepare_backbone(PretrainKind::Scratch, &pre_ds, &pre_cfg).unwrap();
    let reference = TinyFpn::new(pre_cfg.backbone, rng::derive(pre_cfg.seed, "model-init")).unwrap();
    for p in reference.named_parameters() {
        assert_eq!(scratch.param(&p.name).unwrap().data(), p.value.data(), "differs: {}", p.name);
    }
}

#[test]
fn prepared_backbones_differ_by_kind() {
    let pre_ds = micro_dataset(51, 8);
    let pre_cfg = micro_pretrain(124);
    let scratch = prepare_backbone(PretrainKind::Scratch, &pre_ds, &pre_cfg).unwrap();
    let hico = prepare_backbone(PretrainKind::Hico, &pre_ds, &pre_cfg).unwrap();
    let vanilla = prepare_backbone(PretrainKind::VanillaCl, &pre_ds, &pre_cfg).unwrap();
    let probe = "stage5.conv1.w";
    assert_ne!(scratch.param(probe).unwrap().data(), hico.param(probe).unwrap().data());
    assert_ne!(hico.param(probe).unwrap().data(), vanilla.param(probe).unwrap().data());
}

#[test]
fn convergence_rows_cover_every_kind_and_epoch() {
    let pre_ds = micro_dataset(52, 8);
    let down_ds = micro_dataset(53, 8);
    let pre_cfg = micro_pretrain(125);
    let fine_cfg = micro_finetune(14);
    let kinds = [PretrainKind::Scratch, PretrainKind::Hico];
    let rows = convergence_compare(&kinds, &pre_ds, &down_ds, &pre_cfg, &fine_cfg).unwrap();
    assert_eq!(rows.len(), kinds.len() * (fine_cfg.epochs + 1));
    for kind in kinds {
        let epochs: Vec<usize> = rows.iter().filter(|r| r.kind == kind).map(|r| r.epoch).collect();
        assert_eq!(epochs, (0..=fine_cfg.epochs).collect::<Vec<_>>());
    }
    let csv = convergence_csv(&rows);
    assert!(csv.starts_with("mode,epoch,accuracy\n"));
    assert_eq!(csv.lines().count(), rows.len() + 1);
    assert!(csv.lines().nth(1).unwrap().starts_with("scratch,0,"));
}

#[test]
fn ablation_rejects_an_all_off_row() {
    let pre_ds = micro_dataset(54, 8);
    let down_ds = micro_dataset(55, 8);
    let specs = [AblationSpec { toggles: TermToggles::none(), soften: false }];
    let err = run_ablation(&specs, &pre_ds, &down_ds, &micro_pretrain(126), &micro_finetune(15));
    assert!(matches!(err, Err(Error::ConfigError(_))));
}

#[test]
fn gg_only_ablation_row_equals_vanilla_pretraining() {
    // The gg-only toggle set with softening must land on the identical
    // downstream numbers as the plain two-view baseline mode.
    let pre_ds = micro_dataset(56, 8);
    let down_ds = micro_dataset(57, 8);
    let pre_cfg = micro_pretrain(127);
    let fine_cfg = micro_finetune(16);
    let specs = [AblationSpec { toggles: TermToggles::only_gg(), soften: true }];
    let rows = run_ablation(&specs, &pre_ds, &down_ds, &pre_cfg, &fine_cfg).unwrap();
    assert_eq!(rows.len(), 1);
    assert_eq!(rows[0].spec.label(), "gg+soften");

    let vanilla_cfg = PretrainConfig { mode: TrainMode::VanillaCl, ..pre_cfg };
    let vanilla = prepare_backbone(PretrainKind::VanillaCl, &pre_ds, &vanilla_cfg).unwrap();
    let vanilla_cv = cross_validate(&vanilla, &down_ds, &fine_cfg).unwrap();
    assert_eq!(rows[0].cv.mean_accuracy, vanilla_cv.mean_accuracy);
    assert_eq!(rows[0].cv.mean_macro_f1, vanilla_cv.mean_macro_f1);
    for (a, b) in rows[0].cv.folds.iter().zip(&vanilla_cv.folds) {
        assert_eq!(a.confusion, b.confusion);
    }
}

#[test]
fn sweep_varies_exactly_one_knob() {
    let pre_ds = micro_dataset(58, 8);
    let down_ds = micro_dataset(59, 8);
    let pre_cfg = micro_pretrain(128);
    let fine_cfg = micro_finetune(17);
    let rows = sweep(SweepAxis::BatchSize, &[2.0, 4.0], &pre_ds, &down_ds, &pre_cfg, &fine_cfg).unwrap();
    assert_eq!(rows.len(), 2);
    assert_eq!(rows[0].value, 2.0);
    assert_eq!(rows[1].value, 4.0);
    assert!(rows.iter().all(|r| r.axis == SweepAxis::BatchSize));
    // invalid axis values are rejected up front
    assert!(sweep(SweepAxis::BatchSize, &[1.5], &pre_ds, &down_ds, &pre_cfg, &fine_cfg).is_err());
    assert!(sweep(SweepAxis::LabelRate, &[1.5], &pre_ds, &down_ds, &pre_cfg, &fine_cfg).is_err());
    assert!(sweep(SweepAxis::LabelRate, &[], &pre_ds, &down_ds, &pre_cfg, &fine_cfg).is_err());
}

#[test]
fn per_frame_evaluation_counts_every_frame_once() {
    let ds = micro_dataset(60, 6);
    let mut model =
        hico_core::eval::FinetuneModel::new(fresh_model(85), ds.manifest.num_classes, 7).unwrap();
    let ids: Vec<u32> = ds.videos.iter().map(|v| v.video_id).collect();
    let (preds, labels) = hico_core::eval::evaluate_accuracy(&mut model, &ds, &ids, 4).unwrap();
    assert_eq!(preds.len(), ds.videos.len() * ds.manifest.frames_per_video);
    assert_eq!(labels.len(), preds.len());
    let r = compute_metrics(&preds, &labels, ds.manifest.num_classes).unwrap();
    assert!(r.accuracy >= 0.0 && r.accuracy <= 1.0);
}
