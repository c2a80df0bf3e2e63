//! Convolutional message decoder: conv blocks over the rendered image,
//! a head conv to l_b channels, global mean pooling, and a final linear
//! layer. Also hosts the throwaway 2D encoder used only for decoder
//! pretraining.

use rand::Rng;
use serde::{Deserialize, Serialize};
use splatmark_autograd::conv::{conv2d, mean_spatial};
use splatmark_autograd::ops::{add, chw_to_hwc, clamp, concat_rows, hwc_to_chw, linear, relu, reshape, scale, tanh};
use splatmark_autograd::{real, Real, Tape, Tensor, Var};

use crate::embedder::Message;
use crate::error::{Error, Result};

/// Smallest image the conv stack accepts.
pub const MIN_IMAGE_SIDE: usize = 32;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecoderConfig {
    pub num_conv_blocks: usize,
    pub channels: usize,
    pub lb: usize,
}

impl DecoderConfig {
    pub fn new(num_conv_blocks: usize, channels: usize, lb: usize) -> Result<Self> {
        let cfg = Self { num_conv_blocks, channels, lb };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn with_lb(lb: usize) -> Self {
        Self { num_conv_blocks: 7, channels: 64, lb }
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_conv_blocks < 3 {
            return Err(Error::Config("num_conv_blocks must be >= 3".into()));
        }
        if self.channels < 8 {
            return Err(Error::Config("channels must be >= 8".into()));
        }
        Ok(())
    }

    /// The first three blocks downsample by 2 (desk-scale cost control);
    /// a 32x32 input still leaves a 4x4 map for the head.
    pub fn stride(&self, block: usize) -> usize {
        if block < 3 && block < self.num_conv_blocks {
            2
        } else {
            1
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConvParams<T: Real> {
    pub w: Tensor<T>,
    pub b: Tensor<T>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DecoderParams<T: Real> {
    pub convs: Vec<ConvParams<T>>,
    pub head: ConvParams<T>,
    pub fc_w: Tensor<T>,
    pub fc_b: Tensor<T>,
}

fn conv_init<T: Real, R: Rng>(
    c_out: usize,
    c_in: usize,
    k: usize,
    rng: &mut R,
) -> ConvParams<T> {
    let fan_in = c_in * k * k;
    let std = (2.0 / fan_in as f64).sqrt();
    let mut w = Tensor::zeros(&[c_out, c_in, k, k]);
    for v in w.data_mut() {
        let x: f64 = rng.sample(rand_distr::StandardNormal);
        *v = real(x * std);
    }
    ConvParams { w, b: Tensor::zeros(&[c_out]) }
}

impl<T: Real> DecoderParams<T> {
    pub fn init<R: Rng>(cfg: &DecoderConfig, rng: &mut R) -> Self {
        let mut convs = Vec::with_capacity(cfg.num_conv_blocks);
        let mut c_in = 3;
        for _ in 0..cfg.num_conv_blocks {
            convs.push(conv_init(cfg.channels, c_in, 3, rng));
            c_in = cfg.channels;
        }
        let head = conv_init(cfg.lb, cfg.channels, 3, rng);
        let std = (1.0 / cfg.lb as f64).sqrt();
        let mut fc_w = Tensor::zeros(&[cfg.lb, cfg.lb]);
        for v in fc_w.data_mut() {
            let x: f64 = rng.sample(rand_distr::StandardNormal);
            *v = real(x * std);
        }
        Self { convs, head, fc_w, fc_b: Tensor::zeros(&[cfg.lb]) }
    }

    pub fn tensors(&self) -> Vec<&Tensor<T>> {
        let mut out = Vec::new();
        for c in &self.convs {
            out.extend([&c.w, &c.b]);
        }
        out.extend([&self.head.w, &self.head.b, &self.fc_w, &self.fc_b]);
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor<T>> {
        let mut out = Vec::new();
        for c in &mut self.convs {
            out.extend([&mut c.w, &mut c.b]);
        }
        out.extend([&mut self.head.w, &mut self.head.b, &mut self.fc_w, &mut self.fc_b]);
        out
    }
}

pub struct DecoderVars<'t, T: Real> {
    pub convs: Vec<[Var<'t, T>; 2]>,
    pub head: [Var<'t, T>; 2],
    pub fc_w: Var<'t, T>,
    pub fc_b: Var<'t, T>,
}

impl<'t, T: Real> DecoderVars<'t, T> {
    pub fn new(tape: &'t Tape<T>, params: &DecoderParams<T>, trainable: bool) -> Self {
        let lift = |t: &Tensor<T>| {
            if trainable {
                tape.leaf(t.clone())
            } else {
                tape.constant(t.clone())
            }
        };
        Self {
            convs: params.convs.iter().map(|c| [lift(&c.w), lift(&c.b)]).collect(),
            head: [lift(&params.head.w), lift(&params.head.b)],
            fc_w: lift(&params.fc_w),
            fc_b: lift(&params.fc_b),
        }
    }

    pub fn all(&self) -> Vec<Var<'t, T>> {
        let mut out = Vec::new();
        for c in &self.convs {
            out.extend_from_slice(c);
        }
        out.extend_from_slice(&self.head);
        out.extend([self.fc_w, self.fc_b]);
        out
    }
}

/// Soft logits for each message bit from an `[H,W,3]` image variable.
pub fn decode_var<'t, T: Real>(
    tape: &'t Tape<T>,
    image: Var<'t, T>,
    cfg: &DecoderConfig,
    params: &DecoderVars<'t, T>,
) -> Result<Var<'t, T>> {
    let shape = {
        let v = tape.value(image);
        v.shape().to_vec()
    };
    if shape.len() != 3 || shape[2] != 3 {
        return Err(Error::Shape(format!("decoder expects [H,W,3], got {shape:?}")));
    }
    if shape[0] < MIN_IMAGE_SIDE || shape[1] < MIN_IMAGE_SIDE {
        return Err(Error::Shape(format!(
            "image {}x{} below the {MIN_IMAGE_SIDE}x{MIN_IMAGE_SIDE} receptive-field minimum",
            shape[0], shape[1]
        )));
    }
    let mut x = hwc_to_chw(image);
    for (i, [w, b]) in params.convs.iter().enumerate() {
        x = relu(conv2d(x, *w, *b, cfg.stride(i), 1));
    }
    let x = conv2d(x, params.head[0], params.head[1], 1, 1);
    let pooled = reshape(mean_spatial(x), &[1, cfg.lb]);
    Ok(reshape(linear(pooled, params.fc_w, params.fc_b), &[cfg.lb]))
}

/// Decode an image tensor with fixed parameters (scratch tape inside).
pub fn decode_plain<T: Real>(
    image: &Tensor<T>,
    cfg: &DecoderConfig,
    params: &DecoderParams<T>,
) -> Result<Tensor<T>> {
    let tape: Tape<T> = Tape::new();
    let img = tape.constant(image.clone());
    let vars = DecoderVars::new(&tape, params, false);
    let logits = decode_var(&tape, img, cfg, &vars)?;
    Ok(logits.value_clone())
}

/// Threshold squashed logits at 0.5 into hard bits.
pub fn logits_to_bits<T: Real>(logits: &Tensor<T>) -> Vec<u8> {
    logits.data().iter().map(|&v| if v > T::zero() { 1 } else { 0 }).collect()
}

/// Per-bit confidence: the squashed probability of the decided bit.
pub fn logits_to_confidence<T: Real>(logits: &Tensor<T>) -> Vec<f64> {
    logits
        .data()
        .iter()
        .map(|&v| {
            let p = 1.0 / (1.0 + (-Real::as_f64(v)).exp());
            p.max(1.0 - p)
        })
        .collect()
}

// ---------------------------------------------------------------------------
// throwaway 2D encoder for decoder pretraining
// ---------------------------------------------------------------------------

/// Additive-residual image encoder conditioned on the message, used only to
/// pretrain the decoder. Not part of the shipped embedding pipeline.
#[derive(Debug, Clone)]
pub struct Encoder2dParams<T: Real> {
    pub conv1: ConvParams<T>,
    pub conv2: ConvParams<T>,
    pub conv3: ConvParams<T>,
    pub lb: usize,
}

pub const ENCODER2D_CHANNELS: usize = 32;
/// Residual amplitude bound of the pretraining encoder.
pub const ENCODER2D_RESIDUAL: f64 = 0.12;

impl<T: Real> Encoder2dParams<T> {
    pub fn init<R: Rng>(lb: usize, rng: &mut R) -> Self {
        Self {
            conv1: conv_init(ENCODER2D_CHANNELS, 3 + lb, 3, rng),
            conv2: conv_init(ENCODER2D_CHANNELS, ENCODER2D_CHANNELS, 3, rng),
            conv3: conv_init(3, ENCODER2D_CHANNELS, 3, rng),
            lb,
        }
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor<T>> {
        vec![
            &mut self.conv1.w,
            &mut self.conv1.b,
            &mut self.conv2.w,
            &mut self.conv2.b,
            &mut self.conv3.w,
            &mut self.conv3.b,
        ]
    }
}

pub struct Encoder2dVars<'t, T: Real> {
    pub convs: [[Var<'t, T>; 2]; 3],
    pub lb: usize,
}

impl<'t, T: Real> Encoder2dVars<'t, T> {
    pub fn new(tape: &'t Tape<T>, params: &Encoder2dParams<T>, trainable: bool) -> Self {
        let lift = |t: &Tensor<T>| {
            if trainable {
                tape.leaf(t.clone())
            } else {
                tape.constant(t.clone())
            }
        };
        Self {
            convs: [
                [lift(&params.conv1.w), lift(&params.conv1.b)],
                [lift(&params.conv2.w), lift(&params.conv2.b)],
                [lift(&params.conv3.w), lift(&params.conv3.b)],
            ],
            lb: params.lb,
        }
    }

    pub fn all(&self) -> Vec<Var<'t, T>> {
        self.convs.iter().flatten().copied().collect()
    }
}

/// Watermark an image in 2D: broadcast the message as extra channels, run a
/// small conv stack, add a bounded residual.
pub fn encode2d_var<'t, T: Real>(
    tape: &'t Tape<T>,
    image: Var<'t, T>,
    msg: &Message,
    enc: &Encoder2dVars<'t, T>,
) -> Result<Var<'t, T>> {
    let (h, w) = {
        let v = tape.value(image);
        let s = v.shape();
        (s[0], s[1])
    };
    if msg.len() != enc.lb {
        return Err(Error::Config(format!(
            "message length {} does not match encoder length {}",
            msg.len(),
            enc.lb
        )));
    }
    let chw = hwc_to_chw(image);
    let pm = msg.to_pm_one::<T>();
    let mut msg_planes = Tensor::zeros(&[enc.lb, h, w]);
    for (bit, chunk) in msg_planes.data_mut().chunks_mut(h * w).enumerate() {
        for v in chunk.iter_mut() {
            *v = pm.data()[bit];
        }
    }
    // stack image and message channels into [3+lb, H, W]
    let img2 = reshape(chw, &[3, h * w]);
    let msg2 = reshape(tape.constant(msg_planes), &[enc.lb, h * w]);
    let x = reshape(concat_rows(img2, msg2), &[3 + enc.lb, h, w]);

    let x = relu(conv2d(x, enc.convs[0][0], enc.convs[0][1], 1, 1));
    let x = relu(conv2d(x, enc.convs[1][0], enc.convs[1][1], 1, 1));
    let res = tanh(conv2d(x, enc.convs[2][0], enc.convs[2][1], 1, 1));
    let res = scale(res, real::<T>(ENCODER2D_RESIDUAL));
    Ok(clamp(add(image, chw_to_hwc(res)), 0.0, 1.0))
}
