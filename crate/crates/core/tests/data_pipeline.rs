mod common;

use std::collections::BTreeMap;
use std::path::Path;

use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use weaksurg::encoder::CamStack;
use weaksurg::metrics::{ch_iou, coco_thresholds, instance_ap, isi_iou, mc_iou, ApOutcome, InstanceFrame, SemanticFrame};
use weaksurg::pseudomask::{cam_to_seed, seed_to_instances, LabelMap};
use weaksurg::sampler::{crop_labels, sample_local_crops, sample_pair, uncertain_mask, CropConfig};
use weaksurg::synthvid::{
    generate_clip, generate_dataset, instances_from_id_map, read_dataset, write_dataset, ClipSpec, ObjectSpec, ShapeKind,
    SynthConfig,
};
use weaksurg::Error;

fn small_config(seed: u64) -> SynthConfig {
    SynthConfig {
        num_clips: 2,
        num_frames: 4,
        image_size: 32,
        num_classes: 3,
        min_objects: 1,
        max_objects: 2,
        seed,
    }
}

fn tree_digest(root: &Path) -> BTreeMap<String, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for entry in std::fs::read_dir(&dir).unwrap() {
            let p = entry.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                let rel = p.strip_prefix(root).unwrap().to_string_lossy().into_owned();
                out.insert(rel, std::fs::read(&p).unwrap());
            }
        }
    }
    out
}

#[test]
fn static_square_of_class_three() {
    let spec = ClipSpec {
        seed: 0,
        num_frames: 3,
        image_size: 64,
        num_classes: 4,
        objects: vec![ObjectSpec {
            class_id: 3,
            shape: ShapeKind::Square,
            x: 32.0,
            y: 32.0,
            angle: 0.0,
            length: 10.0,
            width: 10.0,
            vx: 0.0,
            vy: 0.0,
            omega: 0.0,
            drift_rate: 0.0,
        }],
    };
    let clip = generate_clip(&spec).unwrap();
    for f in 0..3 {
        assert_eq!(clip.presence[f], vec![0, 0, 0, 1]);
        assert_eq!(clip.gt_instances[f].len(), 1);
        assert_eq!(clip.gt_instances[f][0].class_id, 3);
        assert_eq!(clip.gt_instances[f][0].mask.area(), 100);
    }
}

#[test]
fn id_map_with_two_ids_gives_two_instances() {
    let ids = [0u16, 1, 1, 2, 0, 2];
    let classes = BTreeMap::from([(1u32, 0usize), (2, 2)]);
    let inst = instances_from_id_map(&ids, 3, 2, &classes).unwrap();
    assert_eq!(inst.len(), 2);
    assert_eq!((inst[0].id, inst[0].class_id, inst[0].mask.area()), (1, 0, 2));
    assert_eq!((inst[1].id, inst[1].class_id, inst[1].mask.area()), (2, 2, 2));
    assert_eq!(instances_from_id_map(&[3], 1, 1, &classes), Err(3));
}

#[test]
fn written_tree_round_trips_and_is_reproducible() {
    let data = generate_dataset(&small_config(11)).unwrap();
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    write_dataset(&data, a.path()).unwrap();
    write_dataset(&generate_dataset(&small_config(11)).unwrap(), b.path()).unwrap();
    assert_eq!(read_dataset(a.path()).unwrap(), data);
    assert_eq!(tree_digest(a.path()), tree_digest(b.path()));
}

#[test]
fn missing_frame_error_names_the_file() {
    let data = generate_dataset(&small_config(5)).unwrap();
    let dir = tempfile::tempdir().unwrap();
    write_dataset(&data, dir.path()).unwrap();
    let victim = dir.path().join("clips").join(&data.clips[1].id).join("frames").join("000002.png");
    std::fs::remove_file(&victim).unwrap();
    match read_dataset(dir.path()) {
        Err(Error::Io { path, .. }) => assert!(path.ends_with("000002.png"), "{}", path.display()),
        other => panic!("expected an I/O error, got {other:?}"),
    }
}

#[test]
fn zero_clips_is_a_config_error() {
    let cfg = SynthConfig {
        num_clips: 0,
        ..small_config(0)
    };
    assert!(matches!(generate_dataset(&cfg), Err(Error::Config(_))));
}

fn cam_strategy(classes: usize, size: usize) -> impl Strategy<Value = CamStack> {
    prop::collection::vec(0.0f64..=1.0, classes * size * size).prop_map(move |px| CamStack::from_pixels(classes, size, px))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn labels_are_sound(seed in 0u64..10_000) {
        let data = generate_dataset(&small_config(seed)).unwrap();
        for clip in &data.clips {
            for f in 0..clip.len() {
                let gt = &clip.gt_instances[f];
                let mut covered = vec![false; 32 * 32];
                for inst in gt {
                    prop_assert!(inst.mask.area() > 0);
                    prop_assert_eq!(clip.instance_classes.get(&inst.id), Some(&inst.class_id));
                    for (c, &b) in covered.iter_mut().zip(&inst.mask.bits) {
                        prop_assert!(!(b && *c), "instances overlap");
                        *c |= b;
                    }
                }
                for c in 0..data.num_classes {
                    let visible = gt.iter().any(|i| i.class_id == c);
                    prop_assert_eq!(clip.presence[f][c] == 1, visible);
                }
            }
        }
    }
}

proptest! {
    #[test]
    fn pairs_stay_in_the_clip(len in 2usize..40, max_gap in 1usize..10, seed: u64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for _ in 0..20 {
            let p = sample_pair(0, len, max_gap, &mut rng).unwrap();
            prop_assert!(p.reference < len && p.target < len);
            prop_assert!(p.gap != 0 && p.gap.unsigned_abs() <= max_gap);
            prop_assert_eq!(p.target as isize - p.reference as isize, p.gap);
        }
    }

    #[test]
    fn crops_fit_and_labels_respect_presence(
        cam in cam_strategy(3, 16),
        presence in prop::collection::vec(0u8..=1, 3),
        size in 1usize..=16,
        seed: u64,
    ) {
        let frame = image::RgbImage::new(16, 16);
        let cfg = CropConfig { crop_size: size, num_crops: 3, ..CropConfig::default() };
        let region = uncertain_mask(&cam, cfg.uncertain_low, cfg.uncertain_high);
        let set = sample_local_crops(&frame, &region, &cam, &presence, &cfg, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
        prop_assert_eq!(set.crops.len(), 3);
        for (bx, labels) in set.boxes.iter().zip(&set.pseudo_presence) {
            prop_assert!(bx.x0 + bx.size <= 16 && bx.y0 + bx.size <= 16);
            prop_assert_eq!(labels, &crop_labels(&cam, &presence, bx, &cfg));
            for (l, p) in labels.iter().zip(&presence) {
                prop_assert!(l <= p);
            }
        }
    }

    #[test]
    fn instances_partition_the_seed(
        cam in cam_strategy(3, 12),
        presence in prop::collection::vec(0u8..=1, 3),
        threshold in 0.0f64..1.0,
    ) {
        let seed = cam_to_seed(&cam, &presence, threshold);
        for &l in &seed.labels {
            prop_assert!(l == 0 || presence[l as usize - 1] == 1);
        }
        let inst = seed_to_instances(&seed, &cam, 0.0);
        let painted = LabelMap::from_instances(12, 12, &inst);
        prop_assert_eq!(&painted, &seed);
        let total: usize = inst.iter().map(|i| i.mask.area()).sum();
        prop_assert_eq!(total, seed.labels.iter().filter(|&&l| l != 0).count());
    }

    #[test]
    fn semantic_metrics_are_bounded(
        pred in prop::collection::vec(0u8..=3, 64),
        gt in prop::collection::vec(0u8..=3, 64),
    ) {
        let frame = SemanticFrame {
            pred: LabelMap { width: 8, height: 8, labels: pred },
            gt: LabelMap { width: 8, height: 8, labels: gt.clone() },
        };
        for v in [ch_iou(&[frame.clone()], 3).value, isi_iou(&[frame.clone()], 3).value, mc_iou(&[frame.clone()], 3).value]
            .into_iter()
            .flatten()
        {
            prop_assert!((0.0..=100.0).contains(&v));
        }
        let perfect = SemanticFrame { pred: frame.gt.clone(), gt: frame.gt };
        if gt.iter().any(|&l| l != 0) {
            prop_assert_eq!(ch_iou(&[perfect.clone()], 3).value, Some(100.0));
            prop_assert_eq!(isi_iou(&[perfect.clone()], 3).value, Some(100.0));
            prop_assert_eq!(mc_iou(&[perfect], 3).value, Some(100.0));
        } else {
            prop_assert_eq!(ch_iou(&[perfect], 3).value, None);
        }
    }

    #[test]
    fn perfect_instances_score_full_ap(
        labels in prop::collection::vec(0u8..=2, 64),
        scores in prop::collection::vec(0.0f64..1.0, 2),
    ) {
        let gt_map = LabelMap { width: 8, height: 8, labels };
        let cam = CamStack::from_pixels(2, 8, [scores[0]; 64].into_iter().chain([scores[1]; 64]).collect());
        let gt = seed_to_instances(&gt_map, &cam, 0.0);
        let frames = [InstanceFrame { pred: gt.clone(), gt: gt.clone() }];
        match instance_ap(&frames, 2, &coco_thresholds()) {
            ApOutcome::NoGt => prop_assert!(gt.is_empty()),
            ApOutcome::Defined(r) => {
                prop_assert_eq!(r.ap50, 100.0);
                prop_assert_eq!(r.map, 100.0);
            }
        }
    }
}
