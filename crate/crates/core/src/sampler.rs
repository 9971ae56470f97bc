//! Temporal pair selection and CAM-guided local crops.

use image::RgbImage;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::encoder::CamStack;
use crate::error::{Error, Result};
use crate::pseudomask::Mask;
use crate::synthvid::Clip;

/// Reference frame `t` and target frame `T` of one clip, `gap = T − t`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct FramePair {
    pub clip: usize,
    pub reference: usize,
    pub target: usize,
    pub gap: isize,
}

impl FramePair {
    pub fn ref_frame<'a>(&self, clip: &'a Clip) -> &'a RgbImage {
        &clip.frames[self.reference]
    }

    pub fn target_frame<'a>(&self, clip: &'a Clip) -> &'a RgbImage {
        &clip.frames[self.target]
    }

    pub fn ref_presence<'a>(&self, clip: &'a Clip) -> &'a [u8] {
        &clip.presence[self.reference]
    }

    pub fn target_presence<'a>(&self, clip: &'a Clip) -> &'a [u8] {
        &clip.presence[self.target]
    }
}

/// Uniform target frame, uniform |gap| in `1..=max_gap` with a random sign.
/// A reference that falls outside the clip flips direction, then clamps.
pub fn sample_pair<R: Rng>(clip_index: usize, clip_len: usize, max_gap: usize, rng: &mut R) -> Result<FramePair> {
    if clip_len < 2 {
        return Err(Error::Config(format!("clip {clip_index} has {clip_len} frame(s); pairs need two")));
    }
    if max_gap == 0 {
        return Err(Error::Config("max_gap must be at least 1".into()));
    }
    let target = rng.gen_range(0..clip_len) as isize;
    let mag = rng.gen_range(1..=max_gap) as isize;
    let forward: bool = rng.gen();
    let last = clip_len as isize - 1;
    // reference = target - gap
    let mut gap = if forward { mag } else { -mag };
    if !(0..=last).contains(&(target - gap)) {
        gap = -gap;
    }
    let reference = if (0..=last).contains(&(target - gap)) {
        target - gap
    } else if last - target >= target {
        (target + mag).min(last)
    } else {
        (target - mag).max(0)
    };
    let gap = target - reference;
    debug_assert!(gap != 0);
    Ok(FramePair {
        clip: clip_index,
        reference: reference as usize,
        target: target as usize,
        gap,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CropConfig {
    pub num_crops: usize,
    pub crop_size: usize,
    pub uncertain_low: f64,
    pub uncertain_high: f64,
    /// A crop is labelled with class c when at least `label_fraction` of its
    /// pixels have CAM_c ≥ `label_threshold`.
    pub label_threshold: f64,
    pub label_fraction: f64,
}

impl Default for CropConfig {
    fn default() -> Self {
        CropConfig {
            num_crops: 4,
            crop_size: 48,
            uncertain_low: 0.35,
            uncertain_high: 0.55,
            label_threshold: 0.5,
            label_fraction: 0.05,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct UncertainRegion {
    pub mask: Mask,
    /// True when no pixel fell in the band and the whole frame was used.
    pub fallback: bool,
}

/// Pixels whose max-over-classes CAM lies in `[low, high]`.
pub fn uncertain_mask(cam: &CamStack, low: f64, high: f64) -> UncertainRegion {
    let s = cam.image_size;
    let max = cam.max_map();
    let mask = Mask {
        width: s,
        height: s,
        bits: max.iter().map(|&v| (low..=high).contains(&v)).collect(),
    };
    if mask.area() == 0 {
        log::debug!("no uncertain pixels in band [{low}, {high}]; using full frame");
        return UncertainRegion {
            mask: Mask::from_fn(s, s, |_, _| true),
            fallback: true,
        };
    }
    UncertainRegion { mask, fallback: false }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CropBox {
    pub x0: usize,
    pub y0: usize,
    pub size: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LocalCropSet {
    pub crops: Vec<RgbImage>,
    pub boxes: Vec<CropBox>,
    /// L × C
    pub pseudo_presence: Vec<Vec<u8>>,
}

/// Draw `cfg.num_crops` crops centred on uncertain pixels and label each
/// from the CAM, gated by the frame's image-level labels.
pub fn sample_local_crops<R: Rng>(
    frame: &RgbImage,
    uncertain: &UncertainRegion,
    cam: &CamStack,
    presence: &[u8],
    cfg: &CropConfig,
    rng: &mut R,
) -> Result<LocalCropSet> {
    let (w, h) = (frame.width() as usize, frame.height() as usize);
    if cfg.crop_size == 0 || cfg.crop_size > w || cfg.crop_size > h {
        return Err(Error::Config(format!("crop size {} does not fit a {w}×{h} frame", cfg.crop_size)));
    }
    let candidates: Vec<usize> = uncertain
        .mask
        .bits
        .iter()
        .enumerate()
        .filter_map(|(i, &b)| b.then_some(i))
        .collect();
    let size = cfg.crop_size;
    let mut out = LocalCropSet {
        crops: Vec::with_capacity(cfg.num_crops),
        boxes: Vec::with_capacity(cfg.num_crops),
        pseudo_presence: Vec::with_capacity(cfg.num_crops),
    };
    for _ in 0..cfg.num_crops {
        let centre = candidates[rng.gen_range(0..candidates.len())];
        let (cx, cy) = (centre % w, centre / w);
        let x0 = cx.saturating_sub(size / 2).min(w - size);
        let y0 = cy.saturating_sub(size / 2).min(h - size);
        let bx = CropBox { x0, y0, size };
        out.pseudo_presence.push(crop_labels(cam, presence, &bx, cfg));
        out.crops.push(image::imageops::crop_imm(frame, x0 as u32, y0 as u32, size as u32, size as u32).to_image());
        out.boxes.push(bx);
    }
    Ok(out)
}

pub fn crop_labels(cam: &CamStack, presence: &[u8], bx: &CropBox, cfg: &CropConfig) -> Vec<u8> {
    let area = (bx.size * bx.size) as f64;
    (0..cam.num_classes)
        .map(|c| {
            if presence.get(c).copied().unwrap_or(0) == 0 {
                return 0;
            }
            let mut hot = 0usize;
            for y in bx.y0..bx.y0 + bx.size {
                for x in bx.x0..bx.x0 + bx.size {
                    if cam.pixel(c, x, y) >= cfg.label_threshold {
                        hot += 1;
                    }
                }
            }
            (hot as f64 / area >= cfg.label_fraction) as u8
        })
        .collect()
}
