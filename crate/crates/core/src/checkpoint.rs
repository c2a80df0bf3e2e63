//! Versioned JSON checkpoint holding the model, the marker state, and
//! (optionally) the optimizer/schedule state needed for exact resume.

use std::path::Path;

use serde::{Deserialize, Serialize};
use splatmark_autograd::{Real, Tensor};

use crate::amc::AmcState;
use crate::decoder::{DecoderConfig, DecoderParams};
use crate::embedder::{EmbedderConfig, EmbedderParams};
use crate::error::{Error, Result};
use crate::losses::Schedule;
use crate::model::WatermarkModel;
use crate::pipeline::TrainConfig;

pub const CHECKPOINT_FORMAT: &str = "splatmark-checkpoint";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TensorData {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

impl TensorData {
    pub fn from_tensor<T: Real>(t: &Tensor<T>) -> Self {
        Self { shape: t.shape().to_vec(), data: t.to_f64_vec() }
    }

    pub fn to_tensor<T: Real>(&self) -> Result<Tensor<T>> {
        if self.shape.iter().product::<usize>() != self.data.len() {
            return Err(Error::Format("tensor shape/data mismatch in checkpoint".into()));
        }
        Ok(Tensor::from_f64_slice(&self.shape, &self.data))
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AmcData {
    pub omega_raw: Vec<f64>,
    pub gamma: f64,
    pub trainable: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainState {
    pub next_iter: u64,
    pub adam_t: u64,
    pub adam_m: Vec<TensorData>,
    pub adam_v: Vec<TensorData>,
    pub schedule: Schedule,
    pub config: TrainConfig,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format: String,
    pub version: u32,
    pub lb: usize,
    pub sh_order: usize,
    pub embedder_cfg: EmbedderConfig,
    pub decoder_cfg: DecoderConfig,
    pub amc: AmcData,
    pub embedder: Vec<TensorData>,
    pub decoder: Vec<TensorData>,
    pub train_state: Option<TrainState>,
}

impl Checkpoint {
    pub fn from_model<T: Real>(
        model: &WatermarkModel<T>,
        train_state: Option<TrainState>,
    ) -> Self {
        Self {
            format: CHECKPOINT_FORMAT.to_string(),
            version: CHECKPOINT_VERSION,
            lb: model.lb,
            sh_order: model.sh_order,
            embedder_cfg: model.embedder_cfg.clone(),
            decoder_cfg: model.decoder_cfg.clone(),
            amc: AmcData {
                omega_raw: model.amc.omega_raw.to_f64_vec(),
                gamma: Real::as_f64(model.amc.gamma),
                trainable: model.amc.trainable,
            },
            embedder: model.embedder.tensors().iter().map(|t| TensorData::from_tensor(t)).collect(),
            decoder: model.decoder.tensors().iter().map(|t| TensorData::from_tensor(t)).collect(),
            train_state,
        }
    }

    pub fn to_model<T: Real>(&self) -> Result<WatermarkModel<T>> {
        if self.format != CHECKPOINT_FORMAT {
            return Err(Error::Format(format!("not a model checkpoint: \"{}\"", self.format)));
        }
        if self.version != CHECKPOINT_VERSION {
            return Err(Error::Format(format!(
                "checkpoint version {} unsupported (expected {CHECKPOINT_VERSION})",
                self.version
            )));
        }
        self.embedder_cfg.validate()?;
        self.decoder_cfg.validate()?;
        // build skeleton params with the right shapes, then overwrite
        let mut model = WatermarkModel::<T>::init(
            self.lb,
            self.sh_order,
            self.embedder_cfg.clone(),
            self.decoder_cfg.clone(),
            AmcState::new([0.0; 5], self.amc.gamma, self.amc.trainable)?,
            0,
        )?;
        model.amc.omega_raw =
            Tensor::from_f64_slice(&[self.amc.omega_raw.len()], &self.amc.omega_raw);
        restore(&mut model.embedder.tensors_mut(), &self.embedder, "embedder")?;
        restore(&mut model.decoder.tensors_mut(), &self.decoder, "decoder")?;
        Ok(model)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let json = serde_json::to_string(self)
            .map_err(|e| Error::Format(format!("checkpoint serialization failed: {e}")))?;
        std::fs::write(path.as_ref(), json)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let text = std::fs::read_to_string(path.as_ref())?;
        let ckpt: Checkpoint = serde_json::from_str(&text)
            .map_err(|e| Error::Format(format!("checkpoint parse failed: {e}")))?;
        if ckpt.format != CHECKPOINT_FORMAT {
            return Err(Error::Format(format!("not a model checkpoint: \"{}\"", ckpt.format)));
        }
        Ok(ckpt)
    }
}

fn restore<T: Real>(
    targets: &mut [&mut Tensor<T>],
    source: &[TensorData],
    what: &str,
) -> Result<()> {
    if targets.len() != source.len() {
        return Err(Error::Format(format!(
            "{what} tensor count mismatch: checkpoint has {}, model needs {}",
            source.len(),
            targets.len()
        )));
    }
    for (dst, src) in targets.iter_mut().zip(source) {
        let t: Tensor<T> = src.to_tensor()?;
        if t.shape() != dst.shape() {
            return Err(Error::Format(format!(
                "{what} tensor shape mismatch: {:?} vs {:?}",
                t.shape(),
                dst.shape()
            )));
        }
        **dst = t;
    }
    Ok(())
}

/// Build embedder params purely from checkpoint data (used by `to_model`).
pub fn embedder_from_data<T: Real>(
    cfg: &EmbedderConfig,
    sh_order: usize,
    lb: usize,
    data: &[TensorData],
) -> Result<EmbedderParams<T>> {
    let mut rng = crate::rng::derive(0, crate::rng::Stream::Init, 0);
    let mut params = EmbedderParams::init(cfg, sh_order, lb, &mut rng);
    restore(&mut params.tensors_mut(), data, "embedder")?;
    Ok(params)
}

/// Build decoder params purely from checkpoint data.
pub fn decoder_from_data<T: Real>(
    cfg: &DecoderConfig,
    data: &[TensorData],
) -> Result<DecoderParams<T>> {
    let mut rng = crate::rng::derive(0, crate::rng::Stream::Init, 0);
    let mut params = DecoderParams::init(cfg, &mut rng);
    restore(&mut params.tensors_mut(), data, "decoder")?;
    Ok(params)
}

/// Standalone decoder-pretraining output: decoder weights plus the length
/// they were trained for.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PretrainCheckpoint {
    pub format: String,
    pub version: u32,
    pub lb: usize,
    pub decoder_cfg: DecoderConfig,
    pub decoder: Vec<TensorData>,
    pub clean_accuracy: f64,
}

pub const PRETRAIN_FORMAT: &str = "splatmark-pretrained-decoder";

impl PretrainCheckpoint {
    pub fn new<T: Real>(
        cfg: &DecoderConfig,
        params: &DecoderParams<T>,
        clean_accuracy: f64,
    ) -> Self {
        Self {
            format: PRETRAIN_FORMAT.to_string(),
            version: CHECKPOINT_VERSION,
            lb: cfg.lb,
            decoder_cfg: cfg.clone(),
            decoder: params.tensors().iter().map(|t| TensorData::from_tensor(t)).collect(),
            clean_accuracy,
        }
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let json = serde_json::to_string(self)
            .map_err(|e| Error::Format(format!("serialization failed: {e}")))?;
        std::fs::write(path.as_ref(), json)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let text = std::fs::read_to_string(path.as_ref())?;
        let ckpt: PretrainCheckpoint = serde_json::from_str(&text)
            .map_err(|e| Error::Format(format!("parse failed: {e}")))?;
        if ckpt.format != PRETRAIN_FORMAT {
            return Err(Error::Format(format!(
                "not a pretrained-decoder checkpoint: \"{}\"",
                ckpt.format
            )));
        }
        Ok(ckpt)
    }

    pub fn params<T: Real>(&self) -> Result<DecoderParams<T>> {
        decoder_from_data(&self.decoder_cfg, &self.decoder)
    }
}
