//! Training loop and configuration.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::checkpoint::Checkpoint;
use crate::encoder::{extract_cam, Encoder, EncoderConfig, FrameInput};
use crate::error::{Error, Result};
use crate::losses::{
    build_contrast_masks, ctsc_loss, ema_update, mlsm_loss, pter_loss, sinkhorn_assign, sinkhorn_assign_masked, spatial_similarity,
    LossWeights, NeighborhoodMask, RowMeta,
};
use crate::metrics::classification_map;
use crate::nn::{cosine_lr, Adam, ParamStore};
use crate::pseudomask::PseudoMaskConfig;
use crate::sampler::{sample_local_crops, sample_pair, uncertain_mask, CropConfig};
use crate::synthvid::Dataset;

/// Architecture knobs; image size and class count come from the dataset.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub patch_size: usize,
    pub embed_dim: usize,
    pub depth: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
    pub projection_dim: usize,
    pub use_pos_embed: bool,
    pub cam_affinity_steps: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        let e = EncoderConfig::default();
        ModelConfig {
            patch_size: e.patch_size,
            embed_dim: e.embed_dim,
            depth: e.depth,
            heads: e.heads,
            mlp_ratio: e.mlp_ratio,
            projection_dim: e.projection_dim,
            use_pos_embed: e.use_pos_embed,
            cam_affinity_steps: e.cam_affinity_steps,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub warmup_epochs: usize,
    /// Frame pairs drawn from each clip per epoch.
    pub pairs_per_clip: usize,
    pub max_gap: usize,
    pub num_crops: usize,
    pub crop_size: usize,
    pub tau_sim: f64,
    pub tau_ctsc: f64,
    pub tau_proto: f64,
    pub sinkhorn_epsilon: f64,
    pub sinkhorn_iters: usize,
    /// Side of the square propagation window, in patches.
    pub window: usize,
    pub ema_momentum: f64,
    pub bg_threshold: f64,
    pub uncertain_low: f64,
    pub uncertain_high: f64,
    pub crop_label_threshold: f64,
    pub crop_label_fraction: f64,
    pub min_area_frac: f64,
    pub loss_weights: LossWeights,
    pub seed: u64,
    pub enable_pter: bool,
    pub enable_ctsc: bool,
    /// Cluster reference patches only onto the background token and the
    /// tokens of classes present in the reference frame.
    pub pter_label_gated: bool,
    /// Evaluate train classification mAP every this many epochs (0: last epoch only).
    pub map_every: usize,
    pub model: ModelConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 5e-4,
            weight_decay: 0.01,
            batch_size: 8,
            epochs: 30,
            warmup_epochs: 1,
            pairs_per_clip: 1,
            max_gap: 4,
            num_crops: 4,
            crop_size: 48,
            tau_sim: 0.07,
            tau_ctsc: 0.1,
            tau_proto: 0.1,
            sinkhorn_epsilon: 0.05,
            sinkhorn_iters: 3,
            window: 7,
            ema_momentum: 0.999,
            bg_threshold: 0.3,
            uncertain_low: 0.35,
            uncertain_high: 0.55,
            crop_label_threshold: 0.5,
            crop_label_fraction: 0.05,
            min_area_frac: 0.001,
            loss_weights: LossWeights::default(),
            seed: 0,
            enable_pter: true,
            enable_ctsc: true,
            pter_label_gated: false,
            map_every: 1,
            model: ModelConfig::default(),
        }
    }
}

impl TrainConfig {
    /// Load from a `.toml` or `.json` file.
    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let ext = path.extension().and_then(|e| e.to_str()).unwrap_or("");
        let cfg: TrainConfig = match ext {
            "json" => serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?,
            "toml" => toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?,
            other => return Err(Error::Config(format!("unsupported config extension {other:?}; use .toml or .json"))),
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("learning_rate", self.learning_rate),
            ("tau_sim", self.tau_sim),
            ("tau_ctsc", self.tau_ctsc),
            ("tau_proto", self.tau_proto),
            ("sinkhorn_epsilon", self.sinkhorn_epsilon),
        ];
        for (name, v) in positive {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("{name} must be positive, got {v}")));
            }
        }
        let counts = [
            ("batch_size", self.batch_size),
            ("epochs", self.epochs),
            ("pairs_per_clip", self.pairs_per_clip),
            ("max_gap", self.max_gap),
            ("num_crops", self.num_crops),
            ("crop_size", self.crop_size),
            ("sinkhorn_iters", self.sinkhorn_iters),
            ("window", self.window),
        ];
        for (name, v) in counts {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be at least 1")));
            }
        }
        if self.window % 2 == 0 {
            return Err(Error::Config(format!("window must be odd, got {}", self.window)));
        }
        if !(0.0..=1.0).contains(&self.ema_momentum) {
            return Err(Error::Config(format!("ema_momentum {} outside [0, 1]", self.ema_momentum)));
        }
        if !(0.0 <= self.uncertain_low && self.uncertain_low <= self.uncertain_high && self.uncertain_high <= 1.0) {
            return Err(Error::Config("uncertainty band must satisfy 0 ≤ low ≤ high ≤ 1".into()));
        }
        if self.weight_decay < 0.0 {
            return Err(Error::Config("weight_decay must be non-negative".into()));
        }
        Ok(())
    }

    pub fn encoder_config(&self, image_size: usize, num_classes: usize) -> EncoderConfig {
        let m = &self.model;
        EncoderConfig {
            image_size,
            patch_size: m.patch_size,
            embed_dim: m.embed_dim,
            depth: m.depth,
            heads: m.heads,
            mlp_ratio: m.mlp_ratio,
            num_classes,
            projection_dim: m.projection_dim,
            proto_temperature: self.tau_proto,
            use_pos_embed: m.use_pos_embed,
            cam_affinity_steps: m.cam_affinity_steps,
        }
    }

    pub fn crop_config(&self) -> CropConfig {
        CropConfig {
            num_crops: self.num_crops,
            crop_size: self.crop_size,
            uncertain_low: self.uncertain_low,
            uncertain_high: self.uncertain_high,
            label_threshold: self.crop_label_threshold,
            label_fraction: self.crop_label_fraction,
        }
    }

    pub fn pseudo_mask_config(&self) -> PseudoMaskConfig {
        PseudoMaskConfig {
            bg_threshold: self.bg_threshold,
            min_area_frac: self.min_area_frac,
        }
    }
}

/// Losses of one optimizer step. Disabled components are absent.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: u64,
    pub epoch: usize,
    pub lr: f64,
    pub cls: f64,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub pter: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub ctsc: Option<f64>,
    /// Positive pairs in the contrastive batch; 0 means the term was skipped.
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub ctsc_positives: Option<usize>,
    pub overall: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Train-split classification mAP as a fraction.
    pub train_map: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StageSnapshot {
    pub epoch: usize,
    pub stage: String,
    pub ch_iou: Option<f64>,
    pub ap50: Option<f64>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub steps: Vec<StepRecord>,
    pub epochs: Vec<EpochRecord>,
    pub snapshots: Vec<StageSnapshot>,
}

impl RunRecord {
    /// One JSON object per step.
    pub fn steps_jsonl(&self) -> String {
        let mut out = String::new();
        for s in &self.steps {
            out.push_str(&serde_json::to_string(s).expect("step record serializes"));
            out.push('\n');
        }
        out
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let steps = dir.join("run.jsonl");
        std::fs::write(&steps, self.steps_jsonl()).map_err(|e| Error::io(&steps, e))?;
        let summary = dir.join("run_summary.json");
        let body = serde_json::json!({ "epochs": self.epochs, "snapshots": self.snapshots });
        std::fs::write(&summary, serde_json::to_string_pretty(&body).expect("json")).map_err(|e| Error::io(&summary, e))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Phase {
    Idle,
    Backward,
    Stepped,
}

/// Resumable training state over one dataset.
pub struct Trainer<'a> {
    cfg: TrainConfig,
    data: &'a Dataset,
    encoder: Encoder,
    params: ParamStore,
    opt: Adam,
    rng: ChaCha8Rng,
    /// Separate stream so that crop draws never shift the pair sequence.
    crop_rng: ChaCha8Rng,
    step: u64,
    window: NeighborhoodMask,
    phase: Phase,
}

fn check_dataset(data: &Dataset) -> Result<()> {
    if data.clips.is_empty() {
        return Err(Error::EmptyDataset("no clips".into()));
    }
    if let Some(c) = data.clips.iter().find(|c| c.frames.len() < 2) {
        return Err(Error::Config(format!("clip {} has fewer than two frames", c.id)));
    }
    Ok(())
}

impl<'a> Trainer<'a> {
    pub fn new(cfg: TrainConfig, data: &'a Dataset) -> Result<Self> {
        cfg.validate()?;
        check_dataset(data)?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let (encoder, params) = Encoder::new(cfg.encoder_config(data.image_size, data.num_classes), &mut rng)?;
        let opt = Adam::new(&params, cfg.weight_decay);
        let mut crop_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        crop_rng.set_stream(1);
        Self::assemble(cfg, data, encoder, params, opt, rng, crop_rng, 0)
    }

    fn assemble(
        cfg: TrainConfig,
        data: &'a Dataset,
        encoder: Encoder,
        params: ParamStore,
        opt: Adam,
        rng: ChaCha8Rng,
        crop_rng: ChaCha8Rng,
        step: u64,
    ) -> Result<Self> {
        let window = NeighborhoodMask::new(encoder.cfg.grid(), cfg.window)?;
        Ok(Trainer {
            cfg,
            data,
            encoder,
            params,
            opt,
            rng,
            crop_rng,
            step,
            window,
            phase: Phase::Idle,
        })
    }

    /// Continue from a checkpoint; the dataset must match the one it was trained on.
    pub fn resume(ckpt: Checkpoint, data: &'a Dataset) -> Result<Self> {
        check_dataset(data)?;
        let Some(state) = ckpt.trainer.clone() else {
            return Err(ckpt.error("no trainer state; cannot resume"));
        };
        if ckpt.encoder_config.num_classes != data.num_classes || ckpt.encoder_config.image_size != data.image_size {
            return Err(ckpt.error("dataset class count or image size differs from the checkpoint"));
        }
        let (encoder, params) = ckpt.model()?;
        if state.optimizer.step != state.step {
            return Err(ckpt.error("optimizer and trainer step counters disagree"));
        }
        Self::assemble(
            state.config,
            data,
            encoder,
            params,
            state.optimizer,
            state.rng,
            state.crop_rng,
            state.step,
        )
    }

    pub fn config(&self) -> &TrainConfig {
        &self.cfg
    }

    pub fn encoder(&self) -> &Encoder {
        &self.encoder
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn steps_per_epoch(&self) -> u64 {
        let pairs = self.data.clips.len() * self.cfg.pairs_per_clip;
        pairs.div_ceil(self.cfg.batch_size) as u64
    }

    pub fn total_steps(&self) -> u64 {
        self.steps_per_epoch() * self.cfg.epochs as u64
    }

    pub fn is_done(&self) -> bool {
        self.step >= self.total_steps()
    }

    pub fn epoch(&self) -> usize {
        (self.step / self.steps_per_epoch()) as usize
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint::new(
            &self.encoder,
            &self.params,
            Some(crate::checkpoint::TrainerState {
                config: self.cfg.clone(),
                optimizer: self.opt.clone(),
                rng: self.rng.clone(),
                crop_rng: self.crop_rng.clone(),
                step: self.step,
            }),
        )
    }

    /// Clip indices of the current step's batch. Each epoch visits every clip
    /// `pairs_per_clip` times in an order fixed by the seed and epoch.
    fn batch_clips(&self) -> Vec<usize> {
        let n = self.data.clips.len();
        let spe = self.steps_per_epoch();
        let epoch = self.step / spe;
        let pos = (self.step % spe) as usize;
        let mut order: Vec<usize> = (0..n * self.cfg.pairs_per_clip).map(|i| i % n).collect();
        let mut shuffle_rng = ChaCha8Rng::seed_from_u64(self.cfg.seed ^ epoch.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(1));
        order.shuffle(&mut shuffle_rng);
        let start = pos * self.cfg.batch_size;
        order[start..(start + self.cfg.batch_size).min(order.len())].to_vec()
    }

    /// One optimizer step over a batch of frame pairs.
    pub fn train_step(&mut self) -> Result<StepRecord> {
        assert_eq!(self.phase, Phase::Idle, "train_step re-entered mid-step");
        let clips = self.batch_clips();
        let mut pairs = Vec::with_capacity(clips.len());
        for &ci in &clips {
            pairs.push(sample_pair(ci, self.data.clips[ci].frames.len(), self.cfg.max_gap, &mut self.rng)?);
        }

        let mut g = Graph::new();
        let p = self.params.bind(&mut g);
        let b = pairs.len() as f64;
        let mut cls_terms = Vec::new();
        let mut pter_terms = Vec::new();
        let mut local_rows: Vec<Var> = Vec::new();
        let mut local_meta = Vec::new();
        let mut global_rows: Vec<Var> = Vec::new();
        let mut global_meta = Vec::new();
        let c = self.data.num_classes;
        let ecfg = self.encoder.cfg.clone();

        for (bi, pair) in pairs.iter().enumerate() {
            let clip = &self.data.clips[pair.clip];
            let tgt_presence = pair.target_presence(clip);
            let tgt = self.encoder.forward(&mut g, &p, &FrameInput::from_frame(pair.target_frame(clip), &ecfg)?)?;
            let logits = self.encoder.classify(&mut g, &p, tgt.class_tokens);
            let l_tok = mlsm_loss(&mut g, logits, tgt_presence);
            let pooled = self.encoder.patch_pooled_logits(&mut g, &p, tgt.patch_tokens);
            let l_patch = mlsm_loss(&mut g, pooled, tgt_presence);
            cls_terms.push(g.add(l_tok, l_patch));

            if !(self.cfg.enable_pter || self.cfg.enable_ctsc) {
                continue;
            }
            let reference = self.encoder.forward(&mut g, &p, &FrameInput::from_frame(pair.ref_frame(clip), &ecfg)?)?;

            if self.cfg.enable_pter {
                let scores = self.encoder.prototype_scores(&mut g, &p, reference.patch_tokens, reference.class_tokens);
                let (eps, iters) = (self.cfg.sinkhorn_epsilon, self.cfg.sinkhorn_iters);
                let assign = if self.cfg.pter_label_gated {
                    let mut allowed: Vec<bool> = pair.ref_presence(clip).iter().map(|&v| v == 1).collect();
                    allowed.push(true);
                    sinkhorn_assign_masked(g.value(scores), &allowed, eps, iters)?
                } else {
                    sinkhorn_assign(g.value(scores), eps, iters)?
                };
                let z_ref = g.detach(reference.patch_tokens);
                let f = spatial_similarity(&mut g, z_ref, tgt.patch_tokens, self.cfg.tau_sim);
                let f = self.window.apply(&mut g, f);
                let (_, q_tgt) = self.encoder.project_patch(&mut g, &p, tgt.patch_tokens, tgt.class_tokens);
                pter_terms.push(pter_loss(&mut g, &assign, f, q_tgt));
            }

            if self.cfg.enable_ctsc {
                let ref_logits = self.encoder.patch_logits(&mut g, &p, reference.patch_tokens);
                let bundle = self.encoder.bundle(&g, &reference, g.value(ref_logits).clone());
                let cam = extract_cam(&bundle);
                let region = uncertain_mask(&cam, self.cfg.uncertain_low, self.cfg.uncertain_high);
                let crops = sample_local_crops(
                    pair.ref_frame(clip),
                    &region,
                    &cam,
                    pair.ref_presence(clip),
                    &self.cfg.crop_config(),
                    &mut self.crop_rng,
                )?;
                for (bx, labels) in crops.boxes.iter().zip(&crops.pseudo_presence) {
                    let input = FrameInput::from_crop(pair.ref_frame(clip), bx.x0, bx.y0, bx.size, &ecfg)?;
                    let local = self.encoder.forward(&mut g, &p, &input)?;
                    local_rows.push(self.encoder.project_class_local(&mut g, &p, local.class_tokens));
                    local_meta.extend((0..c).map(|k| RowMeta {
                        class_of: k,
                        image_of: bi,
                        valid: labels[k] == 1,
                    }));
                }
                global_rows.push(self.encoder.project_class_global(&mut g, &p, tgt.class_tokens));
                global_meta.extend((0..c).map(|k| RowMeta {
                    class_of: k,
                    image_of: bi,
                    valid: tgt_presence[k] == 1,
                }));
            }
        }

        let cls_sum = g.add_n(&cls_terms);
        let cls = g.scale(cls_sum, 1.0 / b);
        let w = self.cfg.loss_weights;
        let mut total = g.scale(cls, w.cls);
        let mut pter = None;
        if self.cfg.enable_pter {
            let s = g.add_n(&pter_terms);
            let v = g.scale(s, 1.0 / b);
            let weighted = g.scale(v, w.pter);
            total = g.add(total, weighted);
            pter = Some(v);
        }
        let mut ctsc = None;
        let mut positives = None;
        if self.cfg.enable_ctsc {
            let xl = g.concat_rows(&local_rows);
            let xg = g.concat_rows(&global_rows);
            let (pos, denom) = build_contrast_masks(&local_meta, &global_meta);
            let (v, count) = ctsc_loss(&mut g, xl, xg, &pos, &denom, self.cfg.tau_ctsc);
            if count == 0 {
                log::debug!("step {}: no contrastive positives", self.step);
            }
            let weighted = g.scale(v, w.ctsc);
            total = g.add(total, weighted);
            ctsc = Some(v);
            positives = Some(count);
        }

        let record = StepRecord {
            step: self.step,
            epoch: self.epoch(),
            lr: self.current_lr(),
            cls: g.scalar(cls),
            pter: pter.map(|v| g.scalar(v)),
            ctsc: ctsc.map(|v| g.scalar(v)),
            ctsc_positives: positives,
            overall: g.scalar(total),
        };
        for (name, v) in [("cls", Some(record.cls)), ("pter", record.pter), ("ctsc", record.ctsc)] {
            if let Some(v) = v {
                if !v.is_finite() {
                    return Err(Error::Numeric(format!("{name} loss is {v} at step {}", self.step)));
                }
            }
        }

        let grads = g.backward(total);
        self.phase = Phase::Backward;
        let lr = record.lr;
        self.opt.step(&mut self.params, &p, &grads, lr);
        self.phase = Phase::Stepped;
        self.momentum_update()?;
        self.step += 1;
        Ok(record)
    }

    fn current_lr(&self) -> f64 {
        let warmup = self.steps_per_epoch() * self.cfg.warmup_epochs as u64;
        cosine_lr(self.cfg.learning_rate, self.step, warmup, self.total_steps())
    }

    fn momentum_update(&mut self) -> Result<()> {
        assert_eq!(self.phase, Phase::Stepped, "momentum update must follow the optimizer step");
        for (local, global) in self.encoder.ema_pairs() {
            let l = self.params.value(local).clone();
            ema_update(&mut [self.params.value_mut(global)], &[&l], self.cfg.ema_momentum)?;
        }
        self.phase = Phase::Idle;
        Ok(())
    }

    /// Classification mAP (fraction) of the current model over every frame.
    pub fn classification_map(&self) -> Result<Option<f64>> {
        let (scores, labels) = frame_scores(&self.encoder, &self.params, self.data)?;
        Ok(classification_map(&scores, &labels))
    }

    /// Train to completion, reporting each step to `on_step`.
    pub fn run(&mut self, mut on_step: impl FnMut(&StepRecord)) -> Result<RunRecord> {
        let mut record = RunRecord::default();
        let spe = self.steps_per_epoch();
        while !self.is_done() {
            let s = self.train_step()?;
            on_step(&s);
            record.steps.push(s);
            if self.step % spe == 0 {
                let epoch = (self.step / spe) as usize - 1;
                let last = self.is_done();
                let due = self.cfg.map_every > 0 && (epoch + 1) % self.cfg.map_every == 0;
                let train_map = if due || last { self.classification_map()? } else { None };
                if let Some(m) = train_map {
                    log::info!("epoch {epoch}: train mAP {:.4}", m);
                }
                record.epochs.push(EpochRecord { epoch, train_map });
            }
        }
        Ok(record)
    }
}

/// Per-frame class logits and presence labels over the whole dataset.
pub fn frame_scores(encoder: &Encoder, params: &ParamStore, data: &Dataset) -> Result<(Vec<Vec<f64>>, Vec<Vec<u8>>)> {
    let jobs: Vec<(usize, usize)> = data
        .clips
        .iter()
        .enumerate()
        .flat_map(|(ci, c)| (0..c.frames.len()).map(move |f| (ci, f)))
        .collect();
    let scores = parallel_map(&jobs, |&(ci, f)| {
        let bundle = encoder.encode_frame(params, &data.clips[ci].frames[f])?;
        encoder.classify_bundle(params, &bundle)
    })?;
    let labels = jobs.iter().map(|&(ci, f)| data.clips[ci].presence[f].clone()).collect();
    Ok((scores, labels))
}

/// Worker count from `WEAKSURG_NUM_WORKERS`, default 1.
pub fn num_workers() -> usize {
    std::env::var("WEAKSURG_NUM_WORKERS")
        .ok()
        .and_then(|v| v.parse::<usize>().ok())
        .filter(|&n| n > 0)
        .unwrap_or(1)
}

/// Order-preserving map over `items` on up to [`num_workers`] threads.
pub(crate) fn parallel_map<T: Sync, U: Send>(items: &[T], f: impl Fn(&T) -> Result<U> + Sync) -> Result<Vec<U>> {
    let workers = num_workers().min(items.len()).max(1);
    if workers == 1 {
        return items.iter().map(&f).collect();
    }
    let chunk = items.len().div_ceil(workers);
    let parts: Vec<Result<Vec<U>>> = std::thread::scope(|s| {
        let handles: Vec<_> = items
            .chunks(chunk)
            .map(|part| s.spawn(|| part.iter().map(&f).collect::<Result<Vec<U>>>()))
            .collect();
        handles.into_iter().map(|h| h.join().expect("worker panicked")).collect()
    });
    let mut out = Vec::with_capacity(items.len());
    for p in parts {
        out.extend(p?);
    }
    Ok(out)
}

/// Train from scratch and return the final checkpoint and run record.
pub fn train(cfg: TrainConfig, data: &Dataset) -> Result<(Checkpoint, RunRecord)> {
    let mut trainer = Trainer::new(cfg, data)?;
    let record = trainer.run(|s| log::debug!("step {} overall {:.5}", s.step, s.overall))?;
    Ok((trainer.checkpoint(), record))
}
