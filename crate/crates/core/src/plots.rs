//! Static per-frame panels: frame, CAM overlays, seed and instances.

use image::{Rgb, RgbImage};

use crate::evaluate::FramePrediction;
use crate::synthvid::render::hsv_to_rgb;

const GAP: u32 = 2;

fn class_colour(class_id: usize) -> Rgb<u8> {
    let [r, g, b] = hsv_to_rgb(class_id as f64 * 360.0 / 7.0 + 200.0, 0.8, 1.0);
    Rgb([(r * 255.0) as u8, (g * 255.0) as u8, (b * 255.0) as u8])
}

/// Blue → red ramp for v in [0, 1].
fn heat(v: f64) -> [f64; 3] {
    let v = v.clamp(0.0, 1.0);
    hsv_to_rgb(240.0 * (1.0 - v), 1.0, 1.0)
}

/// Frame, one CAM overlay per class present in `presence`, the seed, and the
/// instances (if any), side by side.
pub fn render_panel(frame: &RgbImage, pred: &FramePrediction, presence: &[u8]) -> RgbImage {
    let (w, h) = frame.dimensions();
    let present: Vec<usize> = (0..presence.len()).filter(|&c| presence[c] == 1).collect();
    let tiles = 2 + present.len() as u32 + pred.instances.is_some() as u32;
    let mut out = RgbImage::from_pixel(tiles * w + (tiles - 1) * GAP, h, Rgb([255, 255, 255]));
    let mut x0 = 0;
    let mut next = |out: &mut RgbImage, tile: &RgbImage| {
        image::imageops::replace(out, tile, x0 as i64, 0);
        x0 += w + GAP;
    };
    next(&mut out, frame);

    for &c in &present {
        let tile = RgbImage::from_fn(w, h, |x, y| {
            let p = frame.get_pixel(x, y).0;
            let hc = heat(pred.cam.pixel(c, x as usize, y as usize));
            let mix = |a: u8, b: f64| (0.45 * a as f64 + 0.55 * 255.0 * b) as u8;
            Rgb([mix(p[0], hc[0]), mix(p[1], hc[1]), mix(p[2], hc[2])])
        });
        next(&mut out, &tile);
    }

    let seed = RgbImage::from_fn(w, h, |x, y| match pred.seed.get(x as usize, y as usize) {
        0 => Rgb([0, 0, 0]),
        l => class_colour(l as usize - 1),
    });
    next(&mut out, &seed);

    if let Some(instances) = &pred.instances {
        let mut tile = RgbImage::new(w, h);
        for (k, inst) in instances.iter().enumerate() {
            let [r, g, b] = hsv_to_rgb(k as f64 * 137.5, 0.7, 0.95);
            let colour = Rgb([(r * 255.0) as u8, (g * 255.0) as u8, (b * 255.0) as u8]);
            for (i, &on) in inst.mask.bits.iter().enumerate() {
                if on {
                    tile.put_pixel(i as u32 % w, i as u32 / w, colour);
                }
            }
        }
        next(&mut out, &tile);
    }
    out
}
