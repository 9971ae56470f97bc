//! Dense label maps, instance sets, and the CAM → seed → instance pipeline.

use std::collections::VecDeque;

use serde::{Deserialize, Serialize};

use crate::encoder::CamStack;

/// Binary mask in row-major order.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Mask {
    pub width: usize,
    pub height: usize,
    pub bits: Vec<bool>,
}

impl Mask {
    pub fn empty(width: usize, height: usize) -> Self {
        Mask {
            width,
            height,
            bits: vec![false; width * height],
        }
    }

    pub fn from_fn(width: usize, height: usize, f: impl Fn(usize, usize) -> bool) -> Self {
        let mut bits = Vec::with_capacity(width * height);
        for y in 0..height {
            for x in 0..width {
                bits.push(f(x, y));
            }
        }
        Mask {
            width,
            height,
            bits,
        }
    }

    pub fn get(&self, x: usize, y: usize) -> bool {
        self.bits[y * self.width + x]
    }

    pub fn set(&mut self, x: usize, y: usize, v: bool) {
        self.bits[y * self.width + x] = v;
    }

    pub fn area(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    pub fn intersection(&self, other: &Mask) -> usize {
        self.bits
            .iter()
            .zip(&other.bits)
            .filter(|(&a, &b)| a && b)
            .count()
    }

    pub fn iou(&self, other: &Mask) -> f64 {
        let inter = self.intersection(other);
        let union = self.area() + other.area() - inter;
        if union == 0 {
            0.0
        } else {
            inter as f64 / union as f64
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Instance {
    /// Instance id within the frame or clip (1-based, 0 is background).
    pub id: u32,
    /// Zero-based instrument class.
    pub class_id: usize,
    pub score: f64,
    pub mask: Mask,
}

pub type InstanceSet = Vec<Instance>;

/// Per-pixel class ids: 0 is background, `c + 1` is instrument class `c`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabelMap {
    pub width: usize,
    pub height: usize,
    pub labels: Vec<u8>,
}

impl LabelMap {
    pub fn background(width: usize, height: usize) -> Self {
        LabelMap {
            width,
            height,
            labels: vec![0; width * height],
        }
    }

    pub fn get(&self, x: usize, y: usize) -> u8 {
        self.labels[y * self.width + x]
    }

    /// Paint instance masks in order; later instances win on overlap.
    pub fn from_instances(width: usize, height: usize, instances: &[Instance]) -> Self {
        let mut map = Self::background(width, height);
        for inst in instances {
            for (l, &b) in map.labels.iter_mut().zip(&inst.mask.bits) {
                if b {
                    *l = inst.class_id as u8 + 1;
                }
            }
        }
        map
    }

    pub fn class_mask(&self, class_id: usize) -> Mask {
        let target = class_id as u8 + 1;
        Mask {
            width: self.width,
            height: self.height,
            bits: self.labels.iter().map(|&l| l == target).collect(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PseudoMaskConfig {
    pub bg_threshold: f64,
    pub min_area_frac: f64,
}

impl Default for PseudoMaskConfig {
    fn default() -> Self {
        PseudoMaskConfig {
            bg_threshold: 0.3,
            min_area_frac: 0.001,
        }
    }
}

/// Threshold and arg-max the image-resolution CAM into a seed label map.
///
/// Classes whose `presence` entry is zero never receive pixels. Ties go to
/// the lower class id.
pub fn cam_to_seed(cam: &CamStack, presence: &[u8], bg_threshold: f64) -> LabelMap {
    let (w, h) = (cam.image_size, cam.image_size);
    let mut map = LabelMap::background(w, h);
    for y in 0..h {
        for x in 0..w {
            let mut best = 0.0f64;
            let mut best_c = None;
            for c in 0..cam.num_classes {
                if presence.get(c).copied().unwrap_or(0) == 0 {
                    continue;
                }
                let v = cam.pixel(c, x, y);
                if best_c.is_none() || v > best {
                    best = v;
                    best_c = Some(c);
                }
            }
            if let Some(c) = best_c {
                if best >= bg_threshold {
                    map.labels[y * w + x] = c as u8 + 1;
                }
            }
        }
    }
    map
}

/// 8-connected components of one class id, in raster order of first pixel.
pub fn connected_components(map: &LabelMap, label: u8) -> Vec<Vec<usize>> {
    let (w, h) = (map.width, map.height);
    let mut seen = vec![false; w * h];
    let mut comps = Vec::new();
    let mut queue = VecDeque::new();
    for start in 0..w * h {
        if seen[start] || map.labels[start] != label {
            continue;
        }
        seen[start] = true;
        queue.push_back(start);
        let mut comp = Vec::new();
        while let Some(p) = queue.pop_front() {
            comp.push(p);
            let (px, py) = ((p % w) as isize, (p / w) as isize);
            for dy in -1..=1isize {
                for dx in -1..=1isize {
                    let (nx, ny) = (px + dx, py + dy);
                    if nx < 0 || ny < 0 || nx >= w as isize || ny >= h as isize {
                        continue;
                    }
                    let q = ny as usize * w + nx as usize;
                    if !seen[q] && map.labels[q] == label {
                        seen[q] = true;
                        queue.push_back(q);
                    }
                }
            }
        }
        comp.sort_unstable();
        comps.push(comp);
    }
    comps
}

/// Split each class of the seed into connected instances.
///
/// Components smaller than `min_area_frac` of the image are dropped. Each
/// instance is scored by the mean CAM value of its class over its pixels.
pub fn seed_to_instances(seed: &LabelMap, cam: &CamStack, min_area_frac: f64) -> InstanceSet {
    let (w, h) = (seed.width, seed.height);
    let min_area = min_area_frac * (w * h) as f64;
    let mut out = Vec::new();
    let mut next_id = 1u32;
    for c in 0..cam.num_classes {
        for comp in connected_components(seed, c as u8 + 1) {
            if (comp.len() as f64) < min_area {
                continue;
            }
            let mut mask = Mask::empty(w, h);
            let mut total = 0.0;
            for &p in &comp {
                mask.bits[p] = true;
                total += cam.pixel(c, p % w, p / w);
            }
            out.push(Instance {
                id: next_id,
                class_id: c,
                score: total / comp.len() as f64,
                mask,
            });
            next_id += 1;
        }
    }
    out
}

/// Post-hoc mask refinement backend.
pub trait Refiner {
    fn name(&self) -> &str;

    fn refine(&self, instances: InstanceSet, frame: &image::RgbImage) -> crate::Result<InstanceSet>;
}

#[derive(Clone, Copy, Debug, Default)]
pub struct IdentityRefiner;

impl Refiner for IdentityRefiner {
    fn name(&self) -> &str {
        "identity"
    }

    fn refine(&self, instances: InstanceSet, _frame: &image::RgbImage) -> crate::Result<InstanceSet> {
        Ok(instances)
    }
}

/// Run `refiner`, falling back to the unrefined masks if it fails.
pub fn refine(refiner: &dyn Refiner, instances: InstanceSet, frame: &image::RgbImage) -> InstanceSet {
    match refiner.refine(instances.clone(), frame) {
        Ok(refined) => refined,
        Err(e) => {
            log::warn!("refiner {} unavailable ({e}); keeping raw masks", refiner.name());
            instances
        }
    }
}
