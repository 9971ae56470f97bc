//! Single-file JSON checkpoints.

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::encoder::{Encoder, EncoderConfig};
use crate::error::{Error, Result};
use crate::nn::{Adam, ParamStore};
use crate::pseudomask::PseudoMaskConfig;
use crate::trainer::TrainConfig;

pub const FORMAT_VERSION: &str = "weaksurg-ckpt/1";

/// Everything needed to continue training bit-for-bit.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainerState {
    pub config: TrainConfig,
    pub optimizer: Adam,
    pub rng: ChaCha8Rng,
    pub crop_rng: ChaCha8Rng,
    pub step: u64,
}

/// Momentum head bookkeeping; its tensors are stored with the other parameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EmaHead {
    pub rho: f64,
    pub params: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format: String,
    pub encoder_config: EncoderConfig,
    pub params: ParamStore,
    pub ema: EmaHead,
    pub pseudo_mask: PseudoMaskConfig,
    pub trainer: Option<TrainerState>,
}

impl Checkpoint {
    pub fn new(encoder: &Encoder, params: &ParamStore, trainer: Option<TrainerState>) -> Self {
        let ema = EmaHead {
            rho: trainer.as_ref().map_or(1.0, |t| t.config.ema_momentum),
            params: encoder.ema_pairs().iter().map(|&(_, gid)| params.name(gid).to_string()).collect(),
        };
        Checkpoint {
            format: FORMAT_VERSION.to_string(),
            encoder_config: encoder.cfg.clone(),
            params: params.clone(),
            ema,
            pseudo_mask: trainer
                .as_ref()
                .map_or_else(PseudoMaskConfig::default, |t| t.config.pseudo_mask_config()),
            trainer,
        }
    }

    pub(crate) fn error(&self, message: impl Into<String>) -> Error {
        Error::Checkpoint {
            version: self.format.clone(),
            message: message.into(),
        }
    }

    /// Rebuild the encoder and check that the stored tensors fit it.
    pub fn model(&self) -> Result<(Encoder, ParamStore)> {
        let (encoder, fresh) = Encoder::new(self.encoder_config.clone(), &mut ChaCha8Rng::seed_from_u64(0))
            .map_err(|e| self.error(e.to_string()))?;
        fresh.check_compatible(&self.params).map_err(|e| self.error(e.to_string()))?;
        Ok((encoder, self.params.clone()))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        let body = serde_json::to_string(self).map_err(|e| self.error(e.to_string()))?;
        std::fs::write(path, body).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let raw: serde_json::Value = serde_json::from_str(&text).map_err(|e| Error::Checkpoint {
            version: "unknown".into(),
            message: format!("{}: not valid JSON ({e})", path.display()),
        })?;
        let version = raw.get("format").and_then(|v| v.as_str()).unwrap_or("missing").to_string();
        if version != FORMAT_VERSION {
            return Err(Error::Checkpoint {
                message: format!("{}: expected format {FORMAT_VERSION}", path.display()),
                version,
            });
        }
        let ckpt: Checkpoint = serde_json::from_value(raw).map_err(|e| Error::Checkpoint {
            version: version.clone(),
            message: format!("{}: {e}", path.display()),
        })?;
        ckpt.model()?;
        Ok(ckpt)
    }
}
