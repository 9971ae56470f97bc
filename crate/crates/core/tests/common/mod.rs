#![allow(dead_code)]

use std::path::PathBuf;

use ndarray::Array2;
use rand::Rng;
use weaksurg::autograd::{Graph, Mat, Var};
use weaksurg::metrics::InstanceFrame;
use weaksurg::nn::{Bound, ParamStore};
use weaksurg::pseudomask::LabelMap;
use weaksurg::synthvid::{generate_dataset, Dataset, SynthConfig};
use weaksurg::trainer::TrainConfig;

pub fn rand_mat<R: Rng>(rng: &mut R, rows: usize, cols: usize) -> Mat {
    Array2::from_shape_simple_fn((rows, cols), || rng.gen_range(-1.0..1.0))
}

/// Relative error between two gradients, measured on whole tensors.
pub fn rel_err(a: &Mat, b: &Mat) -> f64 {
    let diff = (a - b).mapv(|v| v * v).sum().sqrt();
    let scale = a.mapv(|v| v * v).sum().sqrt().max(b.mapv(|v| v * v).sum().sqrt());
    if scale < 1e-12 {
        diff
    } else {
        diff / scale
    }
}

const H: f64 = 1e-5;

/// Worst relative error between backprop and central differences over all
/// `inputs`, each bound as a trainable leaf.
pub fn gradcheck(inputs: &[Mat], f: impl Fn(&mut Graph, &[Var]) -> Var) -> f64 {
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|m| g.param(m.clone())).collect();
    let out = f(&mut g, &vars);
    let grads = g.backward(out);
    let eval = |xs: &[Mat]| {
        let mut g = Graph::inference();
        let vs: Vec<Var> = xs.iter().map(|m| g.constant(m.clone())).collect();
        let o = f(&mut g, &vs);
        g.scalar(o)
    };
    let mut worst: f64 = 0.0;
    for (k, v) in vars.iter().enumerate() {
        let analytic = grads.get(*v).cloned().unwrap_or_else(|| Array2::zeros(inputs[k].dim()));
        let mut numeric = Array2::zeros(inputs[k].dim());
        let mut xs = inputs.to_vec();
        for idx in ndarray::indices(inputs[k].dim()) {
            let x0 = xs[k][idx];
            xs[k][idx] = x0 + H;
            let up = eval(&xs);
            xs[k][idx] = x0 - H;
            let down = eval(&xs);
            xs[k][idx] = x0;
            numeric[idx] = (up - down) / (2.0 * H);
        }
        worst = worst.max(rel_err(&analytic, &numeric));
    }
    worst
}

/// Same as [`gradcheck`] but over named parameters of a store.
pub fn gradcheck_params(store: &ParamStore, names: &[&str], f: impl Fn(&mut Graph, &Bound) -> Var) -> f64 {
    let mut g = Graph::new();
    let bound = store.bind(&mut g);
    let out = f(&mut g, &bound);
    let grads = g.backward(out);
    let eval = |s: &ParamStore| {
        let mut g = Graph::inference();
        let b = s.bind(&mut g);
        let o = f(&mut g, &b);
        g.scalar(o)
    };
    let mut worst: f64 = 0.0;
    for name in names {
        let id = store.index_of(name).unwrap_or_else(|| panic!("no parameter {name}"));
        let analytic = grads.get(bound.get(id)).cloned().expect("parameter has a gradient");
        let mut s = store.clone();
        let mut numeric = Array2::zeros(store.value(id).dim());
        for idx in ndarray::indices(store.value(id).dim()) {
            let x0 = s.value(id)[idx];
            s.value_mut(id)[idx] = x0 + H;
            let up = eval(&s);
            s.value_mut(id)[idx] = x0 - H;
            let down = eval(&s);
            s.value_mut(id)[idx] = x0;
            numeric[idx] = (up - down) / (2.0 * H);
        }
        worst = worst.max(rel_err(&analytic, &numeric));
    }
    worst
}

pub fn random_label_map<R: Rng>(rng: &mut R, w: usize, h: usize, num_classes: usize) -> LabelMap {
    // a few rectangles over background, so classes are spatially coherent
    let mut m = LabelMap::background(w, h);
    for _ in 0..rng.gen_range(0..4) {
        let c = rng.gen_range(1..=num_classes) as u8;
        let (x0, y0) = (rng.gen_range(0..w), rng.gen_range(0..h));
        let (x1, y1) = (rng.gen_range(x0..w) + 1, rng.gen_range(y0..h) + 1);
        for y in y0..y1 {
            for x in x0..x1 {
                m.labels[y * w + x] = c;
            }
        }
    }
    // plus some salt
    for _ in 0..rng.gen_range(0..6) {
        let i = rng.gen_range(0..w * h);
        m.labels[i] = rng.gen_range(0..=num_classes) as u8;
    }
    m
}

/// Pixel-loop IoU of class `c` (1-based label) between two maps.
fn brute_iou(pred: &LabelMap, gt: &LabelMap, label: u8) -> (usize, usize, usize) {
    let (mut inter, mut union, mut in_gt) = (0, 0, 0);
    for y in 0..gt.height {
        for x in 0..gt.width {
            let p = pred.get(x, y) == label;
            let g = gt.get(x, y) == label;
            inter += (p && g) as usize;
            union += (p || g) as usize;
            in_gt += g as usize;
        }
    }
    (inter, union, in_gt)
}

fn frame_mean(frames: &[(LabelMap, LabelMap)], c: usize, with_pred: bool) -> Option<f64> {
    let mut per_frame = Vec::new();
    for (p, g) in frames {
        let mut ious = Vec::new();
        for label in 1..=c as u8 {
            let (inter, union, in_gt) = brute_iou(p, g, label);
            let active = in_gt > 0 || (with_pred && union > 0);
            if active {
                ious.push(inter as f64 / union as f64);
            }
        }
        if !ious.is_empty() {
            per_frame.push(ious.iter().sum::<f64>() / ious.len() as f64);
        }
    }
    (!per_frame.is_empty()).then(|| 100.0 * per_frame.iter().sum::<f64>() / per_frame.len() as f64)
}

pub fn oracle_ch_iou(frames: &[(LabelMap, LabelMap)], c: usize) -> Option<f64> {
    frame_mean(frames, c, false)
}

pub fn oracle_isi_iou(frames: &[(LabelMap, LabelMap)], c: usize) -> Option<f64> {
    frame_mean(frames, c, true)
}

pub fn oracle_mc_iou(frames: &[(LabelMap, LabelMap)], c: usize) -> Option<f64> {
    let mut ious = Vec::new();
    for label in 1..=c as u8 {
        let (mut inter, mut union) = (0, 0);
        for (p, g) in frames {
            let (i, u, _) = brute_iou(p, g, label);
            inter += i;
            union += u;
        }
        if union > 0 {
            ious.push(100.0 * (inter as f64 / union as f64));
        }
    }
    (!ious.is_empty()).then(|| ious.iter().sum::<f64>() / ious.len() as f64)
}

/// AP of one class at one IoU threshold: greedy matching in score order,
/// then the 101-point interpolated precision (max precision at recall ≥ r).
fn oracle_class_ap(frames: &[InstanceFrame], class_id: usize, thr: f64) -> Option<f64> {
    let num_gt: usize = frames.iter().map(|f| f.gt.iter().filter(|g| g.class_id == class_id).count()).sum();
    if num_gt == 0 {
        return None;
    }
    let mut dets: Vec<(f64, usize, usize)> = Vec::new();
    for (fi, f) in frames.iter().enumerate() {
        for (pi, p) in f.pred.iter().enumerate() {
            if p.class_id == class_id {
                dets.push((p.score, fi, pi));
            }
        }
    }
    dets.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap());
    let mut taken: Vec<Vec<bool>> = frames.iter().map(|f| vec![false; f.gt.len()]).collect();
    let mut points = Vec::new();
    let mut tp = 0;
    for (k, &(_, fi, pi)) in dets.iter().enumerate() {
        let p = &frames[fi].pred[pi];
        let mut best = None;
        let mut best_iou = thr;
        for (gi, gt) in frames[fi].gt.iter().enumerate() {
            if gt.class_id != class_id || taken[fi][gi] {
                continue;
            }
            let mut inter = 0;
            let mut union = 0;
            for (&a, &b) in p.mask.bits.iter().zip(&gt.mask.bits) {
                inter += (a && b) as usize;
                union += (a || b) as usize;
            }
            let iou = if union == 0 { 0.0 } else { inter as f64 / union as f64 };
            if iou >= best_iou && (best.is_none() || iou > best_iou) {
                best = Some(gi);
                best_iou = iou;
            }
        }
        if let Some(gi) = best {
            taken[fi][gi] = true;
            tp += 1;
        }
        points.push((tp as f64 / num_gt as f64, tp as f64 / (k + 1) as f64));
    }
    let mut total = 0.0;
    for r in 0..=100 {
        let r = r as f64 / 100.0;
        let p = points
            .iter()
            .filter(|(rec, _)| *rec >= r - 1e-12)
            .map(|(_, prec)| *prec)
            .fold(0.0, f64::max);
        total += p;
    }
    Some(total / 101.0)
}

/// `(AP50, AP75, mAP)` in percent; `None` when no class has GT.
pub fn oracle_ap(frames: &[InstanceFrame], c: usize) -> Option<(f64, f64, f64)> {
    let classes: Vec<usize> = (0..c)
        .filter(|&k| frames.iter().any(|f| f.gt.iter().any(|g| g.class_id == k)))
        .collect();
    if classes.is_empty() {
        return None;
    }
    let at = |t: f64| {
        100.0 * classes.iter().map(|&k| oracle_class_ap(frames, k, t).unwrap()).sum::<f64>() / classes.len() as f64
    };
    let thresholds: Vec<f64> = (0..10).map(|i| 0.5 + 0.05 * i as f64).collect();
    let map = thresholds.iter().map(|&t| at(t)).sum::<f64>() / 10.0;
    Some((at(0.5), at(0.75), map))
}

pub fn workspace_root() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../..")
}

/// The checked-in desk-scale benchmark configuration.
pub fn benchmark_config() -> TrainConfig {
    TrainConfig::from_file(&workspace_root().join("configs/benchmark.toml")).expect("benchmark config")
}

pub const BENCH_IMAGE_SIZE: usize = 64;

/// 32 training clips of 16 frames, fixed generation seed.
pub fn benchmark_train() -> Dataset {
    generate_dataset(&SynthConfig {
        num_clips: 32,
        num_frames: 16,
        image_size: BENCH_IMAGE_SIZE,
        seed: 7,
        ..Default::default()
    })
    .expect("train split")
}

/// 16 held-out clips.
pub fn benchmark_val() -> Dataset {
    generate_dataset(&SynthConfig {
        num_clips: 16,
        num_frames: 16,
        image_size: BENCH_IMAGE_SIZE,
        seed: 1000,
        ..Default::default()
    })
    .expect("validation split")
}

/// A small dataset and a micro training config that runs in well under a second per step.
pub fn tiny_setup(clips: usize) -> (Dataset, TrainConfig) {
    let data = generate_dataset(&SynthConfig {
        num_clips: clips,
        num_frames: 6,
        image_size: 32,
        num_classes: 3,
        min_objects: 1,
        max_objects: 2,
        seed: 3,
    })
    .expect("tiny dataset");
    let mut cfg = TrainConfig {
        epochs: 2,
        batch_size: 2,
        crop_size: 16,
        window: 3,
        num_crops: 2,
        ..Default::default()
    };
    cfg.model.patch_size = 8;
    cfg.model.embed_dim = 16;
    cfg.model.depth = 2;
    cfg.model.heads = 2;
    cfg.model.mlp_ratio = 2;
    cfg.model.projection_dim = 8;
    (data, cfg)
}

/// Cosine similarities between `n` random tokens and `k` random prototypes in
/// `d` dimensions, the kind of scores Sinkhorn sees in training.
pub fn random_cosine_scores<R: Rng>(rng: &mut R, n: usize, k: usize, d: usize) -> Mat {
    let normal = rand_distr::StandardNormal;
    let mut unit = |rows: usize| {
        let mut m: Mat = Array2::from_shape_simple_fn((rows, d), || rng.sample::<f64, _>(normal));
        for mut r in m.rows_mut() {
            let z = r.mapv(|v| v * v).sum().sqrt();
            r /= z;
        }
        m
    };
    let z = unit(n);
    let c = unit(k);
    z.dot(&c.t())
}
