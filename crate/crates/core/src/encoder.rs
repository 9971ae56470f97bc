//! Multi-class-token vision transformer.
//!
//! The token sequence is `[class_0 .. class_{C-1}, background, patch_0 .. patch_{N-1}]`.
//! Instrument class tokens feed the classifier; the background token only
//! acts as an extra clustering prototype. CAMs fuse class-to-patch attention
//! from the late layers with a per-patch class score map, refined once by
//! patch-to-patch attention.

use image::RgbImage;
use ndarray::{s, Array2};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Mat, Var};
use crate::error::{Error, Result};
use crate::nn::{randn, Bound, LayerNorm, Linear, ParamStore};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EncoderConfig {
    pub image_size: usize,
    pub patch_size: usize,
    pub embed_dim: usize,
    pub depth: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
    pub num_classes: usize,
    pub projection_dim: usize,
    /// Prototype softmax temperature.
    pub proto_temperature: f64,
    pub use_pos_embed: bool,
    /// Patch-affinity refinement steps applied to the raw CAM.
    pub cam_affinity_steps: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig {
            image_size: 128,
            patch_size: 8,
            embed_dim: 192,
            depth: 6,
            heads: 3,
            mlp_ratio: 4,
            num_classes: 7,
            projection_dim: 64,
            proto_temperature: 0.1,
            use_pos_embed: true,
            cam_affinity_steps: 1,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.patch_size == 0 || self.image_size % self.patch_size != 0 {
            return bad(format!(
                "image_size {} not divisible by patch_size {}",
                self.image_size, self.patch_size
            ));
        }
        if self.heads == 0 || self.embed_dim % self.heads != 0 {
            return bad(format!("embed_dim {} not divisible by heads {}", self.embed_dim, self.heads));
        }
        if self.depth == 0 || self.num_classes == 0 || self.projection_dim == 0 || self.mlp_ratio == 0 {
            return bad("depth, num_classes, projection_dim and mlp_ratio must be positive".into());
        }
        if !(self.proto_temperature > 0.0) {
            return bad("proto_temperature must be positive".into());
        }
        Ok(())
    }

    pub fn grid(&self) -> usize {
        self.image_size / self.patch_size
    }

    pub fn num_patches(&self) -> usize {
        self.grid() * self.grid()
    }

    /// First layer whose attention feeds the CAM (the last half of the stack).
    pub fn cam_first_layer(&self) -> usize {
        self.depth - self.depth.div_ceil(2)
    }
}

/// Patchified image ready for the encoder.
#[derive(Clone, Debug, PartialEq)]
pub struct FrameInput {
    /// N × (patch² · 3), normalised pixel values.
    pub patches: Mat,
    pub grid_h: usize,
    pub grid_w: usize,
    /// Maps the full-frame position grid onto this input's patches (crops only).
    pub pos_interp: Option<Mat>,
}

fn normalize_pixel(v: u8) -> f64 {
    (v as f64 / 255.0 - 0.5) / 0.25
}

fn patchify(img: &RgbImage, x0: usize, y0: usize, w: usize, h: usize, patch: usize) -> Mat {
    let (gw, gh) = (w / patch, h / patch);
    let mut out = Array2::zeros((gw * gh, patch * patch * 3));
    for gy in 0..gh {
        for gx in 0..gw {
            let row = gy * gw + gx;
            let mut k = 0;
            for py in 0..patch {
                for px in 0..patch {
                    let p = img.get_pixel((x0 + gx * patch + px) as u32, (y0 + gy * patch + py) as u32);
                    for ch in 0..3 {
                        out[[row, k]] = normalize_pixel(p.0[ch]);
                        k += 1;
                    }
                }
            }
        }
    }
    out
}

impl FrameInput {
    pub fn from_frame(img: &RgbImage, cfg: &EncoderConfig) -> Result<Self> {
        let (w, h) = (img.width() as usize, img.height() as usize);
        if w != cfg.image_size || h != cfg.image_size {
            return Err(Error::Config(format!(
                "frame is {w}×{h}, encoder expects {0}×{0}",
                cfg.image_size
            )));
        }
        Ok(FrameInput {
            patches: patchify(img, 0, 0, w, h, cfg.patch_size),
            grid_h: h / cfg.patch_size,
            grid_w: w / cfg.patch_size,
            pos_interp: None,
        })
    }

    /// Square crop at pixel offset `(x0, y0)`; its patches get position
    /// embeddings bilinearly sampled at their true location in the frame.
    pub fn from_crop(img: &RgbImage, x0: usize, y0: usize, size: usize, cfg: &EncoderConfig) -> Result<Self> {
        let p = cfg.patch_size;
        if size % p != 0 || size == 0 {
            return Err(Error::Config(format!("crop size {size} not a multiple of patch size {p}")));
        }
        if x0 + size > img.width() as usize || y0 + size > img.height() as usize {
            return Err(Error::Config("crop exceeds frame".into()));
        }
        let g = size / p;
        let full = cfg.grid();
        let mut interp = Array2::zeros((g * g, full * full));
        for a in 0..g {
            for b in 0..g {
                let gx = (x0 as f64 + (b as f64 + 0.5) * p as f64) / p as f64 - 0.5;
                let gy = (y0 as f64 + (a as f64 + 0.5) * p as f64) / p as f64 - 0.5;
                for (idx, wgt) in bilinear_taps(gx, gy, full, full) {
                    interp[[a * g + b, idx]] += wgt;
                }
            }
        }
        Ok(FrameInput {
            patches: patchify(img, x0, y0, size, size, p),
            grid_h: g,
            grid_w: g,
            pos_interp: Some(interp),
        })
    }

    pub fn num_patches(&self) -> usize {
        self.patches.nrows()
    }
}

/// Four bilinear taps at fractional grid coordinate `(gx, gy)`, clamped to the grid.
fn bilinear_taps(gx: f64, gy: f64, w: usize, h: usize) -> [(usize, f64); 4] {
    let gx = gx.clamp(0.0, (w - 1) as f64);
    let gy = gy.clamp(0.0, (h - 1) as f64);
    let (x0, y0) = (gx.floor() as usize, gy.floor() as usize);
    let (x1, y1) = ((x0 + 1).min(w - 1), (y0 + 1).min(h - 1));
    let (fx, fy) = (gx - x0 as f64, gy - y0 as f64);
    [
        (y0 * w + x0, (1.0 - fx) * (1.0 - fy)),
        (y0 * w + x1, fx * (1.0 - fy)),
        (y1 * w + x0, (1.0 - fx) * fy),
        (y1 * w + x1, fx * fy),
    ]
}

#[derive(Clone, Copy, Debug)]
struct Block {
    ln1: LayerNorm,
    qkv: Linear,
    proj: Linear,
    ln2: LayerNorm,
    fc1: Linear,
    fc2: Linear,
}

/// Parameter handles of the encoder; the tensors live in a [`ParamStore`].
#[derive(Clone, Debug)]
pub struct Encoder {
    pub cfg: EncoderConfig,
    patch_embed: Linear,
    pos_embed: usize,
    class_tokens: usize,
    blocks: Vec<Block>,
    norm: LayerNorm,
    head_w: usize,
    head_b: usize,
    patch_head: Linear,
    proj_patch: Linear,
    proj_local: Linear,
    proj_global: Linear,
}

/// Graph handles for one encoded frame.
pub struct TokenVars {
    /// (C+1) × d; row C is the background token.
    pub class_tokens: Var,
    /// N × d
    pub patch_tokens: Var,
    /// Per layer, head-averaged (C+1+N)² attention.
    pub attention: Vec<Mat>,
    pub grid_h: usize,
    pub grid_w: usize,
}

/// Encoder output for one frame.
#[derive(Clone, Debug, PartialEq)]
pub struct TokenBundle {
    pub class_tokens: Mat,
    pub patch_tokens: Mat,
    /// Per-patch class scores from the patch head, N × C.
    pub patch_logits: Mat,
    pub attention: Vec<Mat>,
    pub num_classes: usize,
    pub grid_h: usize,
    pub grid_w: usize,
    pub patch_size: usize,
    pub cam_first_layer: usize,
    pub cam_affinity_steps: usize,
}

impl TokenBundle {
    pub fn num_patches(&self) -> usize {
        self.patch_tokens.nrows()
    }
}

pub const PROJECTION_PREFIX_LOCAL: &str = "proj_local";
pub const PROJECTION_PREFIX_GLOBAL: &str = "proj_global";
pub const NORM_EPS: f64 = 1e-8;

impl Encoder {
    pub fn new<R: Rng>(cfg: EncoderConfig, rng: &mut R) -> Result<(Self, ParamStore)> {
        cfg.validate()?;
        let mut st = ParamStore::new();
        let d = cfg.embed_dim;
        let std = 0.02;
        let patch_dim = cfg.patch_size * cfg.patch_size * 3;
        let patch_embed = Linear::new(&mut st, "patch_embed", patch_dim, d, (1.0 / patch_dim as f64).sqrt(), true, rng);
        let pos_embed = st.add("pos_embed", randn((cfg.num_patches(), d), std, rng), true);
        let class_tokens = st.add("class_tokens", randn((cfg.num_classes + 1, d), std, rng), true);
        let hidden = d * cfg.mlp_ratio;
        let blocks = (0..cfg.depth)
            .map(|i| Block {
                ln1: LayerNorm::new(&mut st, &format!("blocks.{i}.ln1"), d),
                qkv: Linear::new(&mut st, &format!("blocks.{i}.qkv"), d, 3 * d, std, true, rng),
                proj: Linear::new(&mut st, &format!("blocks.{i}.proj"), d, d, std, true, rng),
                ln2: LayerNorm::new(&mut st, &format!("blocks.{i}.ln2"), d),
                fc1: Linear::new(&mut st, &format!("blocks.{i}.fc1"), d, hidden, std, true, rng),
                fc2: Linear::new(&mut st, &format!("blocks.{i}.fc2"), hidden, d, std, true, rng),
            })
            .collect();
        let norm = LayerNorm::new(&mut st, "norm", d);
        let head_w = st.add("head.weight", randn((cfg.num_classes, d), std, rng), true);
        let head_b = st.add("head.bias", Array2::zeros((1, cfg.num_classes)), true);
        let patch_head = Linear::new(&mut st, "patch_head", d, cfg.num_classes, std, true, rng);
        let proj_std = (1.0 / d as f64).sqrt();
        let proj_patch = Linear::new(&mut st, "proj_patch", d, cfg.projection_dim, proj_std, true, rng);
        let proj_local = Linear::new(&mut st, PROJECTION_PREFIX_LOCAL, d, cfg.projection_dim, proj_std, true, rng);
        let proj_global = Linear::new(&mut st, PROJECTION_PREFIX_GLOBAL, d, cfg.projection_dim, proj_std, false, rng);
        // the momentum head starts as a copy of the local head
        *st.value_mut(proj_global.w) = st.value(proj_local.w).clone();
        *st.value_mut(proj_global.b) = st.value(proj_local.b).clone();
        let enc = Encoder {
            cfg,
            patch_embed,
            pos_embed,
            class_tokens,
            blocks,
            norm,
            head_w,
            head_b,
            patch_head,
            proj_patch,
            proj_local,
            proj_global,
        };
        Ok((enc, st))
    }

    /// Parameter ids of the local and momentum class projection heads, paired.
    pub fn ema_pairs(&self) -> [(usize, usize); 2] {
        [
            (self.proj_local.w, self.proj_global.w),
            (self.proj_local.b, self.proj_global.b),
        ]
    }

    pub fn head_weight_id(&self) -> (usize, usize) {
        (self.head_w, self.head_b)
    }

    pub fn forward(&self, g: &mut Graph, p: &Bound, input: &FrameInput) -> Result<TokenVars> {
        let cfg = &self.cfg;
        let d = cfg.embed_dim;
        if input.patches.ncols() != cfg.patch_size * cfg.patch_size * 3 {
            return Err(Error::Config("patch dimension does not match encoder".into()));
        }
        let x = g.constant(input.patches.clone());
        let mut tokens = self.patch_embed.forward(g, p, x);
        if cfg.use_pos_embed {
            let pos = match &input.pos_interp {
                Some(m) => {
                    let mv = g.constant(m.clone());
                    g.matmul(mv, p.get(self.pos_embed))
                }
                None => {
                    if input.num_patches() != cfg.num_patches() {
                        return Err(Error::Config(format!(
                            "{} patches but encoder grid has {}",
                            input.num_patches(),
                            cfg.num_patches()
                        )));
                    }
                    p.get(self.pos_embed)
                }
            };
            tokens = g.add(tokens, pos);
        }
        let mut h = g.concat_rows(&[p.get(self.class_tokens), tokens]);

        let heads = cfg.heads;
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut attention = Vec::with_capacity(cfg.depth);
        for blk in &self.blocks {
            let y = blk.ln1.forward(g, p, h);
            let qkv = blk.qkv.forward(g, p, y);
            let mut outs = Vec::with_capacity(heads);
            let mut att_mean: Option<Mat> = None;
            for hd in 0..heads {
                let q = g.slice_cols(qkv, hd * dh, (hd + 1) * dh);
                let k = g.slice_cols(qkv, d + hd * dh, d + (hd + 1) * dh);
                let v = g.slice_cols(qkv, 2 * d + hd * dh, 2 * d + (hd + 1) * dh);
                let logits = g.matmul_nt(q, k);
                let logits = g.scale(logits, scale);
                let att = g.softmax_rows(logits);
                match &mut att_mean {
                    Some(m) => *m += g.value(att),
                    None => att_mean = Some(g.value(att).clone()),
                }
                outs.push(g.matmul(att, v));
            }
            attention.push(att_mean.expect("at least one head") / heads as f64);
            let cat = if heads == 1 { outs[0] } else { g.concat_cols(&outs) };
            let o = blk.proj.forward(g, p, cat);
            h = g.add(h, o);
            let y = blk.ln2.forward(g, p, h);
            let y = blk.fc1.forward(g, p, y);
            let y = g.gelu(y);
            let y = blk.fc2.forward(g, p, y);
            h = g.add(h, y);
        }
        let h = self.norm.forward(g, p, h);
        let nc = cfg.num_classes + 1;
        let total = g.shape(h).0;
        let class_tokens = g.slice_rows(h, 0, nc);
        let patch_tokens = g.slice_rows(h, nc, total);
        if g.value(h).iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric("encoder activations".into()));
        }
        Ok(TokenVars {
            class_tokens,
            patch_tokens,
            attention,
            grid_h: input.grid_h,
            grid_w: input.grid_w,
        })
    }

    /// One logit per instrument class from its own class token (1 × C).
    pub fn classify(&self, g: &mut Graph, p: &Bound, class_tokens: Var) -> Var {
        let inst = g.slice_rows(class_tokens, 0, self.cfg.num_classes);
        let prod = g.mul(inst, p.get(self.head_w));
        let col = g.row_sums(prod);
        let row = g.transpose(col);
        g.add(row, p.get(self.head_b))
    }

    /// Per-patch class scores, N × C.
    pub fn patch_logits(&self, g: &mut Graph, p: &Bound, patch_tokens: Var) -> Var {
        self.patch_head.forward(g, p, patch_tokens)
    }

    /// Globally pooled patch scores, 1 × C.
    pub fn patch_pooled_logits(&self, g: &mut Graph, p: &Bound, patch_tokens: Var) -> Var {
        let s = self.patch_logits(g, p, patch_tokens);
        g.col_means(s)
    }

    /// Cosine similarity of projected patch tokens to projected prototypes
    /// (all C+1 class tokens), N × (C+1).
    pub fn prototype_scores(&self, g: &mut Graph, p: &Bound, patch_tokens: Var, class_tokens: Var) -> Var {
        let z = self.proj_patch.forward(g, p, patch_tokens);
        let z = g.l2_normalize_rows(z, NORM_EPS);
        let c = self.proj_patch.forward(g, p, class_tokens);
        let c = g.l2_normalize_rows(c, NORM_EPS);
        g.matmul_nt(z, c)
    }

    /// Prototype-softmax probabilities, N × (C+1); returns `(scores, probs)`.
    pub fn project_patch(&self, g: &mut Graph, p: &Bound, patch_tokens: Var, class_tokens: Var) -> (Var, Var) {
        let scores = self.prototype_scores(g, p, patch_tokens, class_tokens);
        let logits = g.scale(scores, 1.0 / self.cfg.proto_temperature);
        (scores, g.softmax_rows(logits))
    }

    /// `P^l` on the C instrument class tokens, rows L2-normalised.
    pub fn project_class_local(&self, g: &mut Graph, p: &Bound, class_tokens: Var) -> Var {
        let inst = g.slice_rows(class_tokens, 0, self.cfg.num_classes);
        let y = self.proj_local.forward(g, p, inst);
        g.l2_normalize_rows(y, NORM_EPS)
    }

    /// `P^g` (momentum head, never trained by gradient) on the C instrument class tokens.
    pub fn project_class_global(&self, g: &mut Graph, p: &Bound, class_tokens: Var) -> Var {
        let inst = g.slice_rows(class_tokens, 0, self.cfg.num_classes);
        let y = self.proj_global.forward(g, p, inst);
        g.l2_normalize_rows(y, NORM_EPS)
    }

    /// Inference pass producing a value-only bundle.
    pub fn encode(&self, store: &ParamStore, input: &FrameInput) -> Result<TokenBundle> {
        let mut g = Graph::inference();
        let p = store.bind(&mut g);
        let t = self.forward(&mut g, &p, input)?;
        let logits = self.patch_logits(&mut g, &p, t.patch_tokens);
        Ok(self.bundle(&g, &t, g.value(logits).clone()))
    }

    pub fn encode_frame(&self, store: &ParamStore, frame: &RgbImage) -> Result<TokenBundle> {
        self.encode(store, &FrameInput::from_frame(frame, &self.cfg)?)
    }

    /// Value snapshot of `t` given its patch logits.
    pub fn bundle(&self, g: &Graph, t: &TokenVars, patch_logits: Mat) -> TokenBundle {
        TokenBundle {
            class_tokens: g.value(t.class_tokens).clone(),
            patch_tokens: g.value(t.patch_tokens).clone(),
            patch_logits,
            attention: t.attention.clone(),
            num_classes: self.cfg.num_classes,
            grid_h: t.grid_h,
            grid_w: t.grid_w,
            patch_size: self.cfg.patch_size,
            cam_first_layer: self.cfg.cam_first_layer(),
            cam_affinity_steps: self.cfg.cam_affinity_steps,
        }
    }

    /// Class logits of a bundle (value-only path).
    pub fn classify_bundle(&self, store: &ParamStore, bundle: &TokenBundle) -> Result<Vec<f64>> {
        let mut g = Graph::inference();
        let p = store.bind(&mut g);
        let ct = g.constant(bundle.class_tokens.clone());
        let logits = self.classify(&mut g, &p, ct);
        let out: Vec<f64> = g.value(logits).iter().copied().collect();
        if out.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric("classification logits".into()));
        }
        Ok(out)
    }
}

/// Per-class activation maps in [0, 1] at patch and image resolution.
#[derive(Clone, Debug, PartialEq)]
pub struct CamStack {
    pub num_classes: usize,
    pub grid_h: usize,
    pub grid_w: usize,
    /// C × grid_h × grid_w, row-major.
    pub maps: Vec<f64>,
    pub image_size: usize,
    /// C × image_size × image_size, row-major.
    pub pixels: Vec<f64>,
}

impl CamStack {
    /// A CAM given directly at image resolution (e.g. built from ground truth).
    pub fn from_pixels(num_classes: usize, image_size: usize, pixels: Vec<f64>) -> Self {
        assert_eq!(pixels.len(), num_classes * image_size * image_size);
        CamStack {
            num_classes,
            grid_h: image_size,
            grid_w: image_size,
            maps: pixels.clone(),
            image_size,
            pixels,
        }
    }

    pub fn pixel(&self, class_id: usize, x: usize, y: usize) -> f64 {
        self.pixels[(class_id * self.image_size + y) * self.image_size + x]
    }

    pub fn patch(&self, class_id: usize, gx: usize, gy: usize) -> f64 {
        self.maps[(class_id * self.grid_h + gy) * self.grid_w + gx]
    }

    /// Max over classes at each pixel.
    pub fn max_map(&self) -> Vec<f64> {
        let n = self.image_size * self.image_size;
        (0..n)
            .map(|i| {
                (0..self.num_classes)
                    .map(|c| self.pixels[c * n + i])
                    .fold(0.0, f64::max)
            })
            .collect()
    }
}

/// Min–max normalise in place; constant input becomes all zeros.
pub fn min_max_normalize(values: &mut [f64]) {
    let lo = values.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let range = hi - lo;
    if !(range > 1e-12 * hi.abs().max(lo.abs()).max(1e-300)) || !range.is_finite() {
        values.iter_mut().for_each(|v| *v = 0.0);
        return;
    }
    values.iter_mut().for_each(|v| *v = (*v - lo) / range);
}

/// Raw (pre-normalisation) CAM of each class on the patch grid, C × N.
pub fn raw_cam(bundle: &TokenBundle) -> Mat {
    let c = bundle.num_classes;
    let n = bundle.num_patches();
    let off = c + 1;
    let layers = &bundle.attention[bundle.cam_first_layer..];
    let mut cls_att: Mat = Array2::zeros((c, n));
    let mut affinity: Mat = Array2::zeros((n, n));
    for a in layers {
        cls_att += &a.slice(s![0..c, off..off + n]);
        affinity += &a.slice(s![off..off + n, off..off + n]);
    }
    cls_att /= layers.len() as f64;
    for mut row in affinity.rows_mut() {
        let z = row.sum();
        if z > 0.0 {
            row /= z;
        }
    }
    let scores = bundle.patch_logits.t().mapv(|v| v.max(0.0));
    let mut fused = cls_att * scores;
    // out_i = Σ_j A_ij fused_j
    for _ in 0..bundle.cam_affinity_steps {
        fused = fused.dot(&affinity.t());
    }
    fused
}

pub fn extract_cam(bundle: &TokenBundle) -> CamStack {
    let raw = raw_cam(bundle);
    cam_from_raw(raw, bundle.grid_h, bundle.grid_w, bundle.patch_size)
}

/// Normalise a C × N raw map and upsample it to image resolution.
pub fn cam_from_raw(raw: Mat, grid_h: usize, grid_w: usize, patch_size: usize) -> CamStack {
    let c = raw.nrows();
    let mut maps = Vec::with_capacity(raw.len());
    for row in raw.rows() {
        let mut v: Vec<f64> = row.to_vec();
        min_max_normalize(&mut v);
        maps.extend(v);
    }
    let size = grid_w * patch_size;
    debug_assert_eq!(grid_h, grid_w, "square grids only");
    let mut pixels = vec![0.0; c * size * size];
    for cls in 0..c {
        let m = &maps[cls * grid_h * grid_w..(cls + 1) * grid_h * grid_w];
        for y in 0..size {
            let gy = (y as f64 + 0.5) / patch_size as f64 - 0.5;
            for x in 0..size {
                let gx = (x as f64 + 0.5) / patch_size as f64 - 0.5;
                let v: f64 = bilinear_taps(gx, gy, grid_w, grid_h).iter().map(|&(i, w)| w * m[i]).sum();
                pixels[(cls * size + y) * size + x] = v;
            }
        }
    }
    CamStack {
        num_classes: c,
        grid_h,
        grid_w,
        maps,
        image_size: size,
        pixels,
    }
}
