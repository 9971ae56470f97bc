use std::collections::BTreeMap;

use image::{Rgb, RgbImage};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::{Clip, ClipSpec, ObjectSpec, ShapeKind};
use crate::pseudomask::{Instance, Mask};

#[derive(Clone, Copy, PartialEq)]
enum Part {
    Shaft,
    Tip,
}

/// Hue bound for the per-object colour random walk, degrees.
const MAX_HUE_DRIFT: f64 = 24.0;

pub(super) fn render_clip(spec: &ClipSpec) -> Clip {
    let size = spec.image_size;
    let s = size as f64;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let background = Background::new(&mut rng, s);

    // Colour drift per object per frame.
    let step = Normal::new(0.0, 1.0).expect("unit normal");
    let drifts: Vec<Vec<(f64, f64)>> = spec
        .objects
        .iter()
        .map(|o| {
            let mut hue = 0.0f64;
            let mut val = 0.0f64;
            (0..spec.num_frames)
                .map(|_| {
                    let out = (hue, val);
                    hue = (hue + o.drift_rate * step.sample(&mut rng)).clamp(-MAX_HUE_DRIFT, MAX_HUE_DRIFT);
                    val = (val + 0.02 * step.sample(&mut rng)).clamp(-0.12, 0.12);
                    out
                })
                .collect()
        })
        .collect();

    let noise = Normal::new(0.0, 3.0).expect("noise");
    let mut frames = Vec::with_capacity(spec.num_frames);
    let mut presence = Vec::with_capacity(spec.num_frames);
    let mut gt_instances = Vec::with_capacity(spec.num_frames);

    for f in 0..spec.num_frames {
        let poses: Vec<Pose> = spec.objects.iter().map(|o| Pose::at(o, f, s)).collect();
        let mut owner = vec![0u32; size * size];
        let mut img = RgbImage::new(size as u32, size as u32);
        for y in 0..size {
            for x in 0..size {
                let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
                let mut rgb = background.color(px, py, f as f64);
                for (k, (o, pose)) in spec.objects.iter().zip(&poses).enumerate() {
                    let (u, v) = pose.local(px, py);
                    if let Some(part) = classify_point(o, u, v) {
                        owner[y * size + x] = k as u32 + 1;
                        rgb = object_color(o, part, u, drifts[k][f], spec.num_classes);
                    }
                }
                let px_rgb = rgb.map(|c| (c * 255.0 + noise.sample(&mut rng)).round().clamp(0.0, 255.0) as u8);
                img.put_pixel(x as u32, y as u32, Rgb(px_rgb));
            }
        }

        let mut insts = Vec::new();
        let mut pres = vec![0u8; spec.num_classes];
        for (k, o) in spec.objects.iter().enumerate() {
            let id = k as u32 + 1;
            let mask = Mask {
                width: size,
                height: size,
                bits: owner.iter().map(|&w| w == id).collect(),
            };
            if mask.area() > 0 {
                pres[o.class_id] = 1;
                insts.push(Instance {
                    id,
                    class_id: o.class_id,
                    score: 1.0,
                    mask,
                });
            }
        }
        frames.push(img);
        presence.push(pres);
        gt_instances.push(insts);
    }

    let instance_classes: BTreeMap<u32, usize> = spec
        .objects
        .iter()
        .enumerate()
        .map(|(k, o)| (k as u32 + 1, o.class_id))
        .collect();

    Clip {
        id: format!("seed{}", spec.seed),
        frames,
        presence,
        gt_instances,
        instance_classes,
    }
}

struct Pose {
    cx: f64,
    cy: f64,
    cos: f64,
    sin: f64,
}

impl Pose {
    fn at(o: &ObjectSpec, frame: usize, s: f64) -> Self {
        let t = frame as f64;
        let margin = 0.1 * s;
        let angle = o.angle + o.omega * t;
        Pose {
            cx: reflect(o.x + o.vx * t, margin, s - margin),
            cy: reflect(o.y + o.vy * t, margin, s - margin),
            cos: angle.cos(),
            sin: angle.sin(),
        }
    }

    /// Image point → object frame (u along the shaft towards the tip).
    fn local(&self, px: f64, py: f64) -> (f64, f64) {
        let (dx, dy) = (px - self.cx, py - self.cy);
        (dx * self.cos + dy * self.sin, -dx * self.sin + dy * self.cos)
    }
}

/// Fold `p` into `[lo, hi]` as if bouncing between two walls.
fn reflect(p: f64, lo: f64, hi: f64) -> f64 {
    let span = hi - lo;
    let t = (p - lo).rem_euclid(2.0 * span);
    lo + if t > span { 2.0 * span - t } else { t }
}

fn seg_dist(u: f64, v: f64, a: (f64, f64), b: (f64, f64)) -> f64 {
    let (dx, dy) = (b.0 - a.0, b.1 - a.1);
    let len2 = dx * dx + dy * dy;
    let t = if len2 > 0.0 {
        (((u - a.0) * dx + (v - a.1) * dy) / len2).clamp(0.0, 1.0)
    } else {
        0.0
    };
    let (qx, qy) = (a.0 + t * dx, a.1 + t * dy);
    ((u - qx).powi(2) + (v - qy).powi(2)).sqrt()
}

fn classify_point(o: &ObjectSpec, u: f64, v: f64) -> Option<Part> {
    let w = o.width;
    let half = o.length / 2.0;
    if o.shape == ShapeKind::Square {
        let hw = o.width / 2.0;
        return (-half <= u && u < half && -hw <= v && v < hw).then_some(Part::Shaft);
    }
    let u0 = half;
    let tip = match o.shape {
        ShapeKind::Jaw => {
            seg_dist(u, v, (u0, 0.0), (u0 + 1.8 * w, 0.9 * w)) < 0.35 * w
                || seg_dist(u, v, (u0, 0.0), (u0 + 1.8 * w, -0.9 * w)) < 0.35 * w
        }
        ShapeKind::Hook => {
            seg_dist(u, v, (u0, 0.0), (u0 + 1.3 * w, 0.0)) < 0.32 * w
                || seg_dist(u, v, (u0 + 1.3 * w, 0.0), (u0 + 1.3 * w, 1.1 * w)) < 0.32 * w
        }
        ShapeKind::Disc => (u - u0 - 0.8 * w).hypot(v) < 1.05 * w,
        ShapeKind::Fork => [(-1.0, 1.8), (0.0, 2.1), (1.0, 1.8)]
            .iter()
            .any(|&(dv, du)| seg_dist(u, v, (u0, 0.0), (u0 + du * w, dv * w)) < 0.27 * w),
        ShapeKind::Ring => {
            let r = (u - u0 - 1.0 * w).hypot(v);
            (0.45 * w..1.15 * w).contains(&r)
        }
        ShapeKind::Blade => {
            let du = u - u0;
            (0.0..2.3 * w).contains(&du) && v.abs() < 0.85 * w * (1.0 - du / (2.3 * w))
        }
        ShapeKind::Paddle => {
            let (a, b) = (1.4 * w, 0.7 * w);
            ((u - u0 - 1.2 * w) / a).powi(2) + (v / b).powi(2) < 1.0
        }
        ShapeKind::Square => unreachable!(),
    };
    if tip {
        Some(Part::Tip)
    } else if seg_dist(u, v, (-half, 0.0), (half, 0.0)) < w / 2.0 {
        Some(Part::Shaft)
    } else {
        None
    }
}

/// Base hue for a class, spread over [40°, 320°] to stay clear of the red tissue.
fn class_hue(class_id: usize, num_classes: usize) -> f64 {
    if num_classes <= 1 {
        return 180.0;
    }
    40.0 + 280.0 * class_id as f64 / (num_classes - 1) as f64
}

fn object_color(o: &ObjectSpec, part: Part, u: f64, drift: (f64, f64), num_classes: usize) -> [f64; 3] {
    let hue = class_hue(o.class_id, num_classes) + drift.0;
    match part {
        Part::Tip => hsv_to_rgb(hue, 0.85, (0.92 + drift.1).clamp(0.0, 1.0)),
        Part::Shaft => {
            // metallic shaft, faintly tinted, with banding along its axis
            let band = 0.06 * (u / (0.6 * o.width)).sin();
            hsv_to_rgb(hue, 0.22, (0.78 + band + drift.1).clamp(0.0, 1.0))
        }
    }
}

struct Background {
    waves: Vec<(f64, f64, f64, f64)>,
    pan: (f64, f64),
}

impl Background {
    fn new(rng: &mut ChaCha8Rng, s: f64) -> Self {
        let waves = (0..4)
            .map(|_| {
                let theta: f64 = rng.gen_range(0.0..std::f64::consts::TAU);
                let freq = rng.gen_range(1.0..4.0) * std::f64::consts::TAU / s;
                (freq * theta.cos(), freq * theta.sin(), rng.gen_range(0.0..std::f64::consts::TAU), rng.gen_range(0.3..1.0))
            })
            .collect();
        let pan = (rng.gen_range(-0.4..0.4), rng.gen_range(-0.4..0.4));
        Background { waves, pan }
    }

    fn color(&self, x: f64, y: f64, t: f64) -> [f64; 3] {
        let (x, y) = (x + self.pan.0 * t, y + self.pan.1 * t);
        let total: f64 = self.waves.iter().map(|w| w.3).sum();
        let n = self
            .waves
            .iter()
            .map(|&(kx, ky, ph, amp)| amp * (kx * x + ky * y + ph).sin())
            .sum::<f64>()
            / total;
        let hue = (355.0 + 10.0 * n).rem_euclid(360.0);
        hsv_to_rgb(hue, 0.6 + 0.1 * n, 0.55 + 0.15 * n)
    }
}

pub(crate) fn hsv_to_rgb(h: f64, s: f64, v: f64) -> [f64; 3] {
    let h = h.rem_euclid(360.0) / 60.0;
    let c = v * s;
    let x = c * (1.0 - (h % 2.0 - 1.0).abs());
    let (r, g, b) = match h as u32 {
        0 => (c, x, 0.0),
        1 => (x, c, 0.0),
        2 => (0.0, c, x),
        3 => (0.0, x, c),
        4 => (x, 0.0, c),
        _ => (c, 0.0, x),
    };
    let m = v - c;
    [r + m, g + m, b + m]
}
