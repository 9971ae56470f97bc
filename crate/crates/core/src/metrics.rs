//! Semantic (Ch_IoU, ISI_IoU, mcIoU) and instance (AP50/AP75/mAP) metrics.
//!
//! All values are percentages. A metric with nothing to average over is
//! `None` rather than a made-up number.

use serde::{Deserialize, Serialize};

use crate::pseudomask::{InstanceSet, LabelMap};

#[derive(Clone, Debug, PartialEq)]
pub struct SemanticFrame {
    pub pred: LabelMap,
    pub gt: LabelMap,
}

/// Pixel counts for one class in one frame.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
struct Counts {
    pred: usize,
    gt: usize,
    inter: usize,
}

impl Counts {
    fn union(&self) -> usize {
        self.pred + self.gt - self.inter
    }

    fn iou(&self) -> f64 {
        let u = self.union();
        if u == 0 {
            0.0
        } else {
            self.inter as f64 / u as f64
        }
    }
}

fn class_counts(frame: &SemanticFrame, num_classes: usize) -> Vec<Counts> {
    assert_eq!(frame.pred.labels.len(), frame.gt.labels.len(), "prediction and GT sizes differ");
    let mut counts = vec![Counts::default(); num_classes + 1];
    for (&p, &g) in frame.pred.labels.iter().zip(&frame.gt.labels) {
        let (p, g) = (p as usize, g as usize);
        counts[p].pred += 1;
        counts[g].gt += 1;
        if p == g {
            counts[p].inter += 1;
        }
    }
    counts.remove(0);
    counts
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FrameMean {
    pub value: Option<f64>,
    pub frames_used: usize,
    pub frames_skipped: usize,
}

fn per_frame_mean(frames: &[SemanticFrame], num_classes: usize, include_pred: bool) -> FrameMean {
    let mut total = 0.0;
    let mut used = 0;
    let mut skipped = 0;
    for f in frames {
        let counts = class_counts(f, num_classes);
        let active: Vec<&Counts> = counts
            .iter()
            .filter(|c| c.gt > 0 || (include_pred && c.pred > 0))
            .collect();
        if active.is_empty() {
            skipped += 1;
            continue;
        }
        total += active.iter().map(|c| c.iou()).sum::<f64>() / active.len() as f64;
        used += 1;
    }
    FrameMean {
        value: (used > 0).then(|| 100.0 * total / used as f64),
        frames_used: used,
        frames_skipped: skipped,
    }
}

/// Mean over frames of the mean IoU over classes present in that frame's GT.
pub fn ch_iou(frames: &[SemanticFrame], num_classes: usize) -> FrameMean {
    per_frame_mean(frames, num_classes, false)
}

/// Like [`ch_iou`] but each frame averages over classes in GT ∪ prediction.
pub fn isi_iou(frames: &[SemanticFrame], num_classes: usize) -> FrameMean {
    per_frame_mean(frames, num_classes, true)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassIou {
    pub value: Option<f64>,
    /// Per class, IoU from dataset-aggregated counts; `None` if never seen.
    pub per_class: Vec<Option<f64>>,
    pub excluded_classes: Vec<usize>,
}

/// Per-class IoU from pixel counts summed over all frames, then averaged over classes.
pub fn mc_iou(frames: &[SemanticFrame], num_classes: usize) -> ClassIou {
    let mut agg = vec![Counts::default(); num_classes];
    for f in frames {
        for (a, c) in agg.iter_mut().zip(class_counts(f, num_classes)) {
            a.pred += c.pred;
            a.gt += c.gt;
            a.inter += c.inter;
        }
    }
    let per_class: Vec<Option<f64>> = agg
        .iter()
        .map(|c| (c.union() > 0).then(|| 100.0 * c.iou()))
        .collect();
    let present: Vec<f64> = per_class.iter().flatten().copied().collect();
    ClassIou {
        value: (!present.is_empty()).then(|| present.iter().sum::<f64>() / present.len() as f64),
        excluded_classes: (0..num_classes).filter(|&c| per_class[c].is_none()).collect(),
        per_class,
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct InstanceFrame {
    pub pred: InstanceSet,
    pub gt: InstanceSet,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ApReport {
    pub ap50: f64,
    pub ap75: f64,
    pub map: f64,
    /// Per class, AP averaged over all thresholds; `None` for classes without GT.
    pub per_class: Vec<Option<f64>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum ApOutcome {
    Defined(ApReport),
    /// No ground-truth instance of any class.
    NoGt,
}

/// IoU thresholds 0.50, 0.55, …, 0.95.
pub fn coco_thresholds() -> Vec<f64> {
    (0..10).map(|i| (50 + 5 * i) as f64 / 100.0).collect()
}

/// 101-point interpolated AP of one class at one threshold.
fn class_ap(frames: &[InstanceFrame], class_id: usize, thr: f64) -> f64 {
    let mut preds: Vec<(f64, usize, usize)> = Vec::new();
    let mut num_gt = 0;
    for (fi, f) in frames.iter().enumerate() {
        num_gt += f.gt.iter().filter(|g| g.class_id == class_id).count();
        for (pi, p) in f.pred.iter().enumerate() {
            if p.class_id == class_id {
                preds.push((p.score, fi, pi));
            }
        }
    }
    if num_gt == 0 {
        return 0.0;
    }
    // highest score first; stable on ties
    preds.sort_by(|a, b| b.0.total_cmp(&a.0));

    let mut matched: Vec<Vec<bool>> = frames.iter().map(|f| vec![false; f.gt.len()]).collect();
    let mut tp = 0usize;
    let mut precision = Vec::with_capacity(preds.len());
    let mut recall = Vec::with_capacity(preds.len());
    for (k, &(_, fi, pi)) in preds.iter().enumerate() {
        let p = &frames[fi].pred[pi];
        let mut best: Option<(usize, f64)> = None;
        for (gi, g) in frames[fi].gt.iter().enumerate() {
            if g.class_id != class_id || matched[fi][gi] {
                continue;
            }
            let iou = p.mask.iou(&g.mask);
            if iou >= thr && best.map_or(true, |(_, b)| iou > b) {
                best = Some((gi, iou));
            }
        }
        if let Some((gi, _)) = best {
            matched[fi][gi] = true;
            tp += 1;
        }
        precision.push(tp as f64 / (k + 1) as f64);
        recall.push(tp as f64 / num_gt as f64);
    }
    // precision envelope
    for i in (0..precision.len().saturating_sub(1)).rev() {
        precision[i] = precision[i].max(precision[i + 1]);
    }
    let mut total = 0.0;
    for r in 0..=100 {
        let r = r as f64 / 100.0;
        let idx = recall.partition_point(|&x| x < r);
        if idx < precision.len() {
            total += precision[idx];
        }
    }
    total / 101.0
}

pub fn instance_ap(frames: &[InstanceFrame], num_classes: usize, thresholds: &[f64]) -> ApOutcome {
    let has_gt: Vec<bool> = (0..num_classes)
        .map(|c| frames.iter().any(|f| f.gt.iter().any(|g| g.class_id == c)))
        .collect();
    let classes: Vec<usize> = (0..num_classes).filter(|&c| has_gt[c]).collect();
    if classes.is_empty() {
        return ApOutcome::NoGt;
    }
    let mean_at = |thr: f64| classes.iter().map(|&c| class_ap(frames, c, thr)).sum::<f64>() / classes.len() as f64;
    let per_class = (0..num_classes)
        .map(|c| {
            has_gt[c].then(|| {
                100.0 * thresholds.iter().map(|&t| class_ap(frames, c, t)).sum::<f64>() / thresholds.len() as f64
            })
        })
        .collect();
    ApOutcome::Defined(ApReport {
        ap50: 100.0 * mean_at(0.5),
        ap75: 100.0 * mean_at(0.75),
        map: 100.0 * thresholds.iter().map(|&t| mean_at(t)).sum::<f64>() / thresholds.len() as f64,
        per_class,
    })
}

/// Mean over classes (with at least one positive) of the non-interpolated
/// average precision of per-frame scores. Returns a fraction in [0, 1].
pub fn classification_map(scores: &[Vec<f64>], labels: &[Vec<u8>]) -> Option<f64> {
    let num_classes = labels.first()?.len();
    let mut aps = Vec::new();
    for c in 0..num_classes {
        let positives = labels.iter().filter(|l| l[c] == 1).count();
        if positives == 0 {
            continue;
        }
        let mut order: Vec<usize> = (0..scores.len()).collect();
        order.sort_by(|&a, &b| scores[b][c].total_cmp(&scores[a][c]));
        let mut tp = 0usize;
        let mut ap = 0.0;
        for (rank, &i) in order.iter().enumerate() {
            if labels[i][c] == 1 {
                tp += 1;
                ap += tp as f64 / (rank + 1) as f64;
            }
        }
        aps.push(ap / positives as f64);
    }
    (!aps.is_empty()).then(|| aps.iter().sum::<f64>() / aps.len() as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SemanticReport {
    pub ch_iou: FrameMean,
    pub isi_iou: FrameMean,
    pub mc_iou: ClassIou,
}

pub fn semantic_report(frames: &[SemanticFrame], num_classes: usize) -> SemanticReport {
    SemanticReport {
        ch_iou: ch_iou(frames, num_classes),
        isi_iou: isi_iou(frames, num_classes),
        mc_iou: mc_iou(frames, num_classes),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pseudomask::{Instance, Mask};

    fn map(w: usize, h: usize, f: impl Fn(usize, usize) -> u8) -> LabelMap {
        let mut m = LabelMap::background(w, h);
        for y in 0..h {
            for x in 0..w {
                m.labels[y * w + x] = f(x, y);
            }
        }
        m
    }

    #[test]
    fn perfect_prediction_scores_100() {
        let gt = map(8, 8, |x, y| ((x / 4) + (y / 4) * 2) as u8);
        let frames = vec![SemanticFrame { pred: gt.clone(), gt }];
        assert_eq!(ch_iou(&frames, 3).value, Some(100.0));
        assert_eq!(isi_iou(&frames, 3).value, Some(100.0));
        assert_eq!(mc_iou(&frames, 3).value, Some(100.0));
    }

    #[test]
    fn half_frame_overprediction() {
        let gt = map(8, 8, |x, _| (x < 4) as u8);
        let pred = map(8, 8, |_, _| 1);
        let r = ch_iou(&[SemanticFrame { pred, gt }], 1);
        assert!((r.value.unwrap() - 50.0).abs() < 1e-12);
    }

    #[test]
    fn shifted_square_iou_is_one_third() {
        let gt = map(20, 10, |x, _| (x < 10) as u8);
        let pred = map(20, 10, |x, _| (5..15).contains(&x) as u8);
        let r = ch_iou(&[SemanticFrame { pred, gt }], 1);
        assert!((r.value.unwrap() - 100.0 / 3.0).abs() < 1e-9);
    }

    #[test]
    fn hallucinated_class_halves_isi() {
        let gt = map(8, 8, |x, _| (x < 4) as u8);
        let pred = map(8, 8, |x, y| if x < 4 { 1 } else if y == 0 { 2 } else { 0 });
        let frames = vec![SemanticFrame { pred, gt }];
        assert!((isi_iou(&frames, 2).value.unwrap() - 50.0).abs() < 1e-12);
        assert!((ch_iou(&frames, 2).value.unwrap() - 100.0).abs() < 1e-12);
    }

    #[test]
    fn empty_gt_frames_are_skipped() {
        let empty = map(4, 4, |_, _| 0);
        let frames = vec![SemanticFrame {
            pred: map(4, 4, |_, _| 1),
            gt: empty.clone(),
        }];
        let ch = ch_iou(&frames, 1);
        assert_eq!((ch.value, ch.frames_skipped), (None, 1));
        assert_eq!(isi_iou(&frames, 1).value, Some(0.0));
        let none = vec![SemanticFrame {
            pred: empty.clone(),
            gt: empty,
        }];
        assert_eq!(isi_iou(&none, 1).frames_skipped, 1);
        assert_eq!(mc_iou(&none, 1).excluded_classes, vec![0]);
    }

    #[test]
    fn mc_iou_aggregates_counts() {
        // frame A: inter 10, union 20; frame B: inter 0, union 10
        let a = SemanticFrame {
            gt: map(20, 1, |x, _| (x < 15) as u8),
            pred: map(20, 1, |x, _| (5..20).contains(&x) as u8),
        };
        let b = SemanticFrame {
            gt: map(10, 1, |x, _| (x < 5) as u8),
            pred: map(10, 1, |x, _| (x >= 5) as u8),
        };
        let frames = vec![a, b];
        let r = mc_iou(&frames, 1);
        assert!((r.value.unwrap() - 100.0 / 3.0).abs() < 1e-9);
        assert!((ch_iou(&frames, 1).value.unwrap() - 25.0).abs() < 1e-9);

        let miss = SemanticFrame {
            gt: map(4, 1, |x, _| if x < 2 { 1 } else { 2 }),
            pred: map(4, 1, |x, _| if x < 2 { 1 } else { 0 }),
        };
        assert!((mc_iou(&[miss], 2).value.unwrap() - 50.0).abs() < 1e-12);
    }

    fn inst(class_id: usize, score: f64, mask: Mask) -> Instance {
        Instance {
            id: 1,
            class_id,
            score,
            mask,
        }
    }

    fn unwrap(o: ApOutcome) -> ApReport {
        match o {
            ApOutcome::Defined(r) => r,
            ApOutcome::NoGt => panic!("no gt"),
        }
    }

    #[test]
    fn exact_match_ap_is_100() {
        let m = Mask::from_fn(8, 8, |x, _| x < 3);
        let frames = vec![InstanceFrame {
            pred: vec![inst(0, 0.7, m.clone())],
            gt: vec![inst(0, 1.0, m)],
        }];
        let r = unwrap(instance_ap(&frames, 2, &coco_thresholds()));
        assert_eq!((r.ap50, r.ap75, r.map), (100.0, 100.0, 100.0));
    }

    #[test]
    fn iou_sixty_straddles_thresholds() {
        let gt = Mask::from_fn(10, 1, |x, _| x < 10);
        let pred = Mask::from_fn(10, 1, |x, _| x < 6);
        let frames = vec![InstanceFrame {
            pred: vec![inst(0, 0.9, pred)],
            gt: vec![inst(0, 1.0, gt)],
        }];
        let r = unwrap(instance_ap(&frames, 1, &coco_thresholds()));
        assert_eq!((r.ap50, r.ap75), (100.0, 0.0));
        // thresholds 0.50, 0.55, 0.60 pass
        assert!((r.map - 30.0).abs() < 1e-9);
    }

    #[test]
    fn wrong_high_score_halves_precision() {
        let gt = Mask::from_fn(8, 8, |x, _| x < 4);
        let wrong = Mask::from_fn(8, 8, |x, _| x >= 4);
        let frames = vec![InstanceFrame {
            pred: vec![inst(0, 0.9, wrong), inst(0, 0.8, gt.clone())],
            gt: vec![inst(0, 1.0, gt)],
        }];
        let r = unwrap(instance_ap(&frames, 1, &coco_thresholds()));
        assert!((r.ap50 - 50.0).abs() < 1e-9);
    }

    #[test]
    fn classification_map_examples() {
        let labels = vec![vec![1, 0], vec![0, 1], vec![1, 1]];
        let perfect = vec![vec![0.9, 0.1], vec![0.2, 0.8], vec![0.7, 0.6]];
        assert_eq!(classification_map(&perfect, &labels), Some(1.0));
        // class 0 ranks [neg, pos, pos], class 1 ranks [pos, pos, neg]
        let scores = vec![vec![0.5, 0.9], vec![0.9, 0.8], vec![0.4, 0.7]];
        let labels = vec![vec![1, 1], vec![0, 1], vec![1, 0]];
        let want = ((0.5 + 2.0 / 3.0) / 2.0 + 1.0) / 2.0;
        assert!((classification_map(&scores, &labels).unwrap() - want).abs() < 1e-12);
        assert_eq!(classification_map(&[], &[]), None);
    }

    #[test]
    fn no_ground_truth_is_flagged() {
        let frames = vec![InstanceFrame {
            pred: vec![inst(0, 0.9, Mask::from_fn(2, 2, |_, _| true))],
            gt: vec![],
        }];
        assert_eq!(instance_ap(&frames, 1, &coco_thresholds()), ApOutcome::NoGt);
    }
}
