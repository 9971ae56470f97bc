//! Staged evaluation: CAM seeds and connectivity-based pseudo masks.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::encoder::{extract_cam, CamStack, Encoder};
use crate::error::{Error, Result};
use crate::metrics::{coco_thresholds, instance_ap, semantic_report, ApOutcome, InstanceFrame, SemanticFrame, SemanticReport};
use crate::nn::ParamStore;
use crate::pseudomask::{cam_to_seed, refine, seed_to_instances, IdentityRefiner, InstanceSet, LabelMap, PseudoMaskConfig, Refiner};
use crate::synthvid::{Clip, Dataset};
use crate::trainer::parallel_map;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    CamSeed,
    PseudoMask,
}

impl FromStr for Stage {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "cam_seed" => Ok(Stage::CamSeed),
            "pseudo_mask" => Ok(Stage::PseudoMask),
            other => Err(Error::Usage(format!("unknown stage {other:?}; expected cam_seed or pseudo_mask"))),
        }
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Stage::CamSeed => "cam_seed",
            Stage::PseudoMask => "pseudo_mask",
        })
    }
}

/// Where per-frame CAMs come from.
pub trait CamSource: Sync {
    fn name(&self) -> &str;

    fn cam(&self, clip: &Clip, frame: usize) -> Result<CamStack>;
}

pub struct ModelCams<'a> {
    pub encoder: &'a Encoder,
    pub params: &'a ParamStore,
}

impl CamSource for ModelCams<'_> {
    fn name(&self) -> &str {
        "model"
    }

    fn cam(&self, clip: &Clip, frame: usize) -> Result<CamStack> {
        Ok(extract_cam(&self.encoder.encode_frame(self.params, &clip.frames[frame])?))
    }
}

/// CAMs equal to 1 on each class's ground-truth pixels and 0 elsewhere.
pub struct OracleCams {
    pub num_classes: usize,
}

impl CamSource for OracleCams {
    fn name(&self) -> &str {
        "oracle"
    }

    fn cam(&self, clip: &Clip, frame: usize) -> Result<CamStack> {
        let gt = gt_label_map(clip, frame);
        let n = gt.width * gt.height;
        let mut pixels = vec![0.0; self.num_classes * n];
        for (i, &l) in gt.labels.iter().enumerate() {
            if l > 0 {
                pixels[(l as usize - 1) * n + i] = 1.0;
            }
        }
        Ok(CamStack::from_pixels(self.num_classes, gt.width, pixels))
    }
}

pub fn gt_label_map(clip: &Clip, frame: usize) -> LabelMap {
    let (w, h) = clip.frames[frame].dimensions();
    LabelMap::from_instances(w as usize, h as usize, &clip.gt_instances[frame])
}

/// Everything derived from one frame's CAM.
#[derive(Clone, Debug, PartialEq)]
pub struct FramePrediction {
    pub cam: CamStack,
    pub seed: LabelMap,
    /// Present for the pseudo-mask stage.
    pub instances: Option<InstanceSet>,
}

pub fn predict_frame(
    source: &dyn CamSource,
    clip: &Clip,
    frame: usize,
    stage: Stage,
    cfg: &PseudoMaskConfig,
    refiner: &dyn Refiner,
) -> Result<FramePrediction> {
    let cam = source.cam(clip, frame)?;
    let seed = cam_to_seed(&cam, &clip.presence[frame], cfg.bg_threshold);
    let instances = match stage {
        Stage::CamSeed => None,
        Stage::PseudoMask => Some(refine(
            refiner,
            seed_to_instances(&seed, &cam, cfg.min_area_frac),
            &clip.frames[frame],
        )),
    };
    Ok(FramePrediction { cam, seed, instances })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassRow {
    pub class_id: usize,
    pub name: String,
    pub mc_iou: Option<f64>,
    pub ap: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub stage: Stage,
    pub cam_source: String,
    pub refiner: Option<String>,
    pub frames: usize,
    pub semantic: SemanticReport,
    pub instance: Option<ApOutcome>,
    pub per_class: Vec<ClassRow>,
}

impl EvalReport {
    pub fn ch_iou(&self) -> Option<f64> {
        self.semantic.ch_iou.value
    }

    pub fn ap50(&self) -> Option<f64> {
        match &self.instance {
            Some(ApOutcome::Defined(r)) => Some(r.ap50),
            _ => None,
        }
    }

    pub fn write_json(&self, path: &Path) -> Result<()> {
        let body = serde_json::to_string_pretty(self).expect("report serializes");
        std::fs::write(path, body).map_err(|e| Error::io(path, e))
    }

    /// Multi-line human-readable summary.
    pub fn summary(&self) -> String {
        let fmt = |v: Option<f64>| v.map_or_else(|| "n/a".to_string(), |v| format!("{v:.2}"));
        let s = &self.semantic;
        let mut out = format!(
            "stage {} ({} CAMs, {} frames)\n  Ch_IoU {}  ISI_IoU {}  mcIoU {}  (frames skipped: {})\n",
            self.stage,
            self.cam_source,
            self.frames,
            fmt(s.ch_iou.value),
            fmt(s.isi_iou.value),
            fmt(s.mc_iou.value),
            s.ch_iou.frames_skipped,
        );
        match &self.instance {
            Some(ApOutcome::Defined(r)) => {
                out.push_str(&format!("  AP50 {:.2}  AP75 {:.2}  mAP {:.2}\n", r.ap50, r.ap75, r.map));
            }
            Some(ApOutcome::NoGt) => out.push_str("  AP undefined: no ground-truth instances\n"),
            None => {}
        }
        out.push_str("  class            IoU      AP\n");
        for row in &self.per_class {
            out.push_str(&format!("  {:<14} {:>6} {:>7}\n", row.name, fmt(row.mc_iou), fmt(row.ap)));
        }
        out
    }
}

fn frame_jobs(data: &Dataset) -> Vec<(usize, usize)> {
    data.clips
        .iter()
        .enumerate()
        .flat_map(|(ci, c)| (0..c.frames.len()).map(move |f| (ci, f)))
        .collect()
}

pub fn evaluate_with(
    source: &dyn CamSource,
    data: &Dataset,
    stage: Stage,
    cfg: &PseudoMaskConfig,
    refiner: &(dyn Refiner + Sync),
) -> Result<EvalReport> {
    let jobs = frame_jobs(data);
    if jobs.is_empty() {
        return Err(Error::EmptyDataset("nothing to evaluate".into()));
    }
    let preds = parallel_map(&jobs, |&(ci, f)| predict_frame(source, &data.clips[ci], f, stage, cfg, refiner))?;
    let c = data.num_classes;
    let mut semantic = Vec::with_capacity(jobs.len());
    let mut instance = Vec::new();
    for (&(ci, f), p) in jobs.iter().zip(preds) {
        let clip = &data.clips[ci];
        let gt = gt_label_map(clip, f);
        let pred = match &p.instances {
            Some(inst) => LabelMap::from_instances(gt.width, gt.height, inst),
            None => p.seed,
        };
        semantic.push(crate::metrics::SemanticFrame { pred, gt });
        if let Some(inst) = p.instances {
            instance.push(InstanceFrame {
                pred: inst,
                gt: clip.gt_instances[f].clone(),
            });
        }
    }
    let semantic_frames: &[SemanticFrame] = &semantic;
    let sem = semantic_report(semantic_frames, c);
    let inst = (stage == Stage::PseudoMask).then(|| instance_ap(&instance, c, &coco_thresholds()));
    let ap_per_class = match &inst {
        Some(ApOutcome::Defined(r)) => r.per_class.clone(),
        _ => vec![None; c],
    };
    let per_class = (0..c)
        .map(|k| ClassRow {
            class_id: k,
            name: data.class_names.get(k).cloned().unwrap_or_else(|| format!("class{k}")),
            mc_iou: sem.mc_iou.per_class[k],
            ap: ap_per_class[k],
        })
        .collect();
    Ok(EvalReport {
        stage,
        cam_source: source.name().to_string(),
        refiner: (stage == Stage::PseudoMask).then(|| refiner.name().to_string()),
        frames: jobs.len(),
        semantic: sem,
        instance: inst,
        per_class,
    })
}

/// Evaluate a trained checkpoint on `data`.
pub fn evaluate_stage(ckpt: &Checkpoint, data: &Dataset, stage: Stage) -> Result<EvalReport> {
    let (encoder, params) = ckpt.model()?;
    if encoder.cfg.num_classes != data.num_classes || encoder.cfg.image_size != data.image_size {
        return Err(Error::Config(format!(
            "checkpoint expects {} classes at {} px, dataset has {} at {} px",
            encoder.cfg.num_classes, encoder.cfg.image_size, data.num_classes, data.image_size
        )));
    }
    let source = ModelCams {
        encoder: &encoder,
        params: &params,
    };
    evaluate_with(&source, data, stage, &ckpt.pseudo_mask, &IdentityRefiner)
}

/// Confidence of one written pseudo instance.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InstanceScore {
    pub id: u32,
    pub class_id: usize,
    pub score: f64,
}

/// Write pseudo masks in the dataset mask layout
/// (`clips/<id>/masks/%06d.png`) plus a `scores.json` per clip.
pub fn write_pseudo_masks(
    source: &dyn CamSource,
    data: &Dataset,
    cfg: &PseudoMaskConfig,
    refiner: &(dyn Refiner + Sync),
    root: &Path,
) -> Result<usize> {
    let mut written = 0;
    for clip in &data.clips {
        let dir = root.join("clips").join(&clip.id).join("masks");
        std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        let mut scores: BTreeMap<String, Vec<InstanceScore>> = BTreeMap::new();
        for f in 0..clip.frames.len() {
            let p = predict_frame(source, clip, f, Stage::PseudoMask, cfg, refiner)?;
            let inst = p.instances.unwrap_or_default();
            let (w, h) = clip.frames[f].dimensions();
            let mut img = image::ImageBuffer::<image::Luma<u16>, Vec<u16>>::new(w, h);
            for i in &inst {
                for (k, &on) in i.mask.bits.iter().enumerate() {
                    if on {
                        img.put_pixel((k % w as usize) as u32, (k / w as usize) as u32, image::Luma([i.id as u16]));
                    }
                }
            }
            let name = format!("{f:06}.png");
            let path = dir.join(&name);
            img.save(&path).map_err(|e| Error::io(&path, e))?;
            scores.insert(
                name,
                inst.iter()
                    .map(|i| InstanceScore {
                        id: i.id,
                        class_id: i.class_id,
                        score: i.score,
                    })
                    .collect(),
            );
            written += 1;
        }
        let path = root.join("clips").join(&clip.id).join("scores.json");
        std::fs::write(&path, serde_json::to_string_pretty(&scores).expect("json")).map_err(|e| Error::io(&path, e))?;
    }
    Ok(written)
}
