//! Joint training: marker perturbation, residual embedding, rendering from
//! sampled poses, optional distortion, decoding, and one adaptive-gradient
//! step per iteration on embedder, decoder, and marker amplitudes.

use std::path::Path;

use serde::{Deserialize, Serialize};
use splatmark_autograd::ops::{add, scale};
use splatmark_autograd::optim::Adam;
use splatmark_autograd::{real, Real, Tape, Tensor, Var};

use crate::amc::{perturb_var, AmcState};
use crate::camera::{sample_train_camera, PoseDefaults};
use crate::checkpoint::{Checkpoint, TensorData, TrainState};
use crate::cloud::{denorm_affine, feature_dim, normalize, GaussianCloud};
use crate::decoder::{decode_var, DecoderConfig, DecoderParams, DecoderVars, Encoder2dParams, Encoder2dVars, encode2d_var};
use crate::distortion::{keep_indices_3d, sample_distortion, DistortionKind, DistortionPhase, DistortionSpec, distort2d_var};
use crate::embedder::{embed_features_var, EmbedderConfig, EmbedderVars, Message};
use crate::error::{Error, Result};
use crate::losses::{loss_img_var, loss_msg_var, PerceptualLoss, RandomFilterPerceptual, Schedule};
use crate::metrics::bit_accuracy;
use crate::model::WatermarkModel;
use crate::render::{render, render_var};
use crate::rng::{derive, Stream};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub lb: usize,
    pub sh_order: usize,
    pub learning_rate: f64,
    pub poses_per_iter: usize,
    pub seed: u64,
    /// Stage boundaries scale from the full-scale schedule by this factor.
    pub desk_factor: f64,
    /// Explicit iteration budget; defaults to the schedule length.
    pub iterations: Option<u64>,
    /// Continue into the robust phase after stage 3.
    pub distortion_phase: bool,
    /// Sample one 3D and one 2D distortion per step instead of one overall.
    pub compose_distortions: bool,
    pub gamma: f64,
    pub omega_init: [f64; 5],
    pub amc_trainable: bool,
    pub freeze_omega_until_stage3: bool,
    pub train_size: usize,
    pub camera_radius: f64,
    pub fov_y_deg: f64,
    pub background: [f64; 3],
    pub perceptual_weight: f64,
    pub embedder: EmbedderConfig,
    pub decoder_blocks: usize,
    pub decoder_channels: usize,
    pub log_every: u64,
    pub checkpoint_every: Option<u64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lb: 16,
            sh_order: 0,
            learning_rate: 1e-4,
            poses_per_iter: 4,
            seed: 0,
            desk_factor: 1.0 / 40.0,
            iterations: None,
            distortion_phase: false,
            compose_distortions: false,
            gamma: 0.4,
            omega_init: [0.01, 0.5, 0.1, 1.0, 1.0],
            amc_trainable: true,
            freeze_omega_until_stage3: false,
            train_size: 64,
            camera_radius: 2.5,
            fov_y_deg: 50.0,
            background: [1.0, 1.0, 1.0],
            perceptual_weight: 1.0,
            embedder: EmbedderConfig::default(),
            decoder_blocks: 7,
            decoder_channels: 64,
            log_every: 50,
            checkpoint_every: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.poses_per_iter < 1 {
            return Err(Error::Config("poses_per_iter must be >= 1".into()));
        }
        if self.learning_rate <= 0.0 {
            return Err(Error::Config("learning_rate must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.gamma) {
            return Err(Error::Config("gamma must lie in [0,1]".into()));
        }
        self.embedder.validate()?;
        self.decoder_cfg().validate()?;
        Ok(())
    }

    pub fn decoder_cfg(&self) -> DecoderConfig {
        DecoderConfig {
            num_conv_blocks: self.decoder_blocks,
            channels: self.decoder_channels,
            lb: self.lb,
        }
    }

    pub fn schedule(&self) -> Result<Schedule> {
        Schedule::from_desk_factor(self.desk_factor)
    }

    pub fn pose_defaults<T: Real>(&self, eval_size: usize) -> PoseDefaults<T> {
        PoseDefaults {
            radius: real(self.camera_radius),
            fov_y_deg: real(self.fov_y_deg),
            train_size: self.train_size,
            eval_size,
            target: [T::zero(); 3],
        }
    }

    pub fn background_t<T: Real>(&self) -> [T; 3] {
        [real(self.background[0]), real(self.background[1]), real(self.background[2])]
    }

    pub fn total_iterations(&self) -> Result<u64> {
        let sched = self.schedule()?;
        Ok(self.iterations.unwrap_or(if self.distortion_phase {
            sched.total_with_distortion()
        } else {
            sched.iter3
        }))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LogRow {
    pub iter: u64,
    pub loss_img: f64,
    pub loss_msg: f64,
    pub total: f64,
    pub w_img: f64,
    pub w_msg: f64,
    pub omega: [f64; 5],
    pub train_bit_acc: f64,
}

pub fn logs_to_csv(rows: &[LogRow]) -> String {
    let mut out = String::from(
        "iter,loss_img,loss_msg,total,w_img,w_msg,omega_position,omega_scale,omega_rotation,omega_opacity,omega_color,train_bit_acc\n",
    );
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{},{},{},{},{},{},{},{},{}\n",
            r.iter,
            r.loss_img,
            r.loss_msg,
            r.total,
            r.w_img,
            r.w_msg,
            r.omega[0],
            r.omega[1],
            r.omega[2],
            r.omega[3],
            r.omega[4],
            r.train_bit_acc
        ));
    }
    out
}

pub struct TrainOutcome<T: Real> {
    pub model: WatermarkModel<T>,
    pub checkpoint: Checkpoint,
    pub logs: Vec<LogRow>,
}

struct StepResult {
    loss_img: f64,
    loss_msg: f64,
    total: f64,
    bit_acc: f64,
}

/// One training iteration: builds the forward graph for a single cloud and
/// message, runs backward, and applies one Adam step.
#[allow(clippy::too_many_arguments)]
fn train_step<T: Real>(
    model: &mut WatermarkModel<T>,
    adam: &mut Adam<T>,
    cloud: &GaussianCloud<T>,
    config: &TrainConfig,
    schedule: &Schedule,
    perceptual: &dyn PerceptualLoss<T>,
    iter: u64,
) -> Result<StepResult> {
    let (w_img, w_msg) = schedule.weights_at(iter);
    let phase = if config.distortion_phase && schedule.in_distortion_phase(iter) {
        DistortionPhase::Robust
    } else {
        DistortionPhase::NoDistortion
    };
    let msg = Message::random(config.lb, &mut derive(config.seed, Stream::Message, iter))?;
    let mut amc_rng = derive(config.seed, Stream::AmcNoise, iter);
    let mut pose_rng = derive(config.seed, Stream::Pose, iter);
    let mut dist_rng = derive(config.seed, Stream::Distortion, iter);

    let norm = normalize(cloud)?;
    let d_g = feature_dim(config.sh_order);
    let n = norm.len();
    let bg = config.background_t::<T>();
    let defaults = config.pose_defaults::<T>(config.train_size);

    let tape: Tape<T> = Tape::new();
    let omega_trainable = model.amc.trainable
        && !(config.freeze_omega_until_stage3 && iter < schedule.iter2);
    let omega_var = if omega_trainable {
        tape.leaf(model.amc.omega_raw.clone())
    } else {
        tape.constant(model.amc.omega_raw.clone())
    };
    let emb_vars = EmbedderVars::new(&tape, &model.embedder, true);
    let dec_vars = DecoderVars::new(&tape, &model.decoder, true);
    let decoder_cfg = config.decoder_cfg();

    // 3D encoding: perturb, embed, add residual
    let x = tape.constant(norm.features.clone());
    let (x_tilde, _pert) = perturb_var(
        &tape,
        x,
        omega_var,
        config.sh_order,
        real(config.gamma),
        &mut amc_rng,
    );
    let delta = embed_features_var(
        &tape,
        x_tilde,
        &msg,
        &config.embedder,
        &emb_vars,
        config.sh_order,
        config.lb,
    )?;
    let x_hat = add(x_tilde, delta);

    // denormalize on the tape: per-column affine then validity clamps
    let (col_scale, col_offset) = denorm_affine(&norm.params);
    let mut scale_m = Tensor::zeros(&[n, d_g]);
    let mut offset_m = Tensor::zeros(&[n, d_g]);
    for r in 0..n {
        scale_m.row_mut(r).copy_from_slice(&col_scale);
        offset_m.row_mut(r).copy_from_slice(&col_offset);
    }
    use splatmark_autograd::ops::{add_const, clamp, clamp_min, mul_const, reshape, slice_cols};
    let raw = add_const(mul_const(x_hat, &scale_m), &offset_m);
    let positions = slice_cols(raw, 0, 3);
    let scales_v = clamp_min(slice_cols(raw, 3, 6), crate::cloud::SCALE_FLOOR);
    let rotations = slice_cols(raw, 6, 10);
    let opacities = clamp(reshape(slice_cols(raw, 10, 11), &[n]), 0.0, 1.0);
    let sh = slice_cols(raw, 11, d_g);

    // one distortion decision per iteration
    let (spec3d, spec2d) = if phase == DistortionPhase::NoDistortion {
        (DistortionSpec::identity(), DistortionSpec::identity())
    } else if config.compose_distortions {
        let threes = [DistortionKind::Identity, DistortionKind::Dropout3d, DistortionKind::Cropout3d];
        let twos = [
            DistortionKind::Identity,
            DistortionKind::Crop2d,
            DistortionKind::Dropout2d,
            DistortionKind::Jpeg2d,
            DistortionKind::Rotate2d,
            DistortionKind::Noise2d,
        ];
        use rand::Rng;
        let k3 = threes[dist_rng.gen_range(0..threes.len())];
        let k2 = twos[dist_rng.gen_range(0..twos.len())];
        (DistortionSpec::new(k3), DistortionSpec::new(k2))
    } else {
        let s = sample_distortion(&mut dist_rng, phase);
        if s.kind.is_3d() {
            (s, DistortionSpec::identity())
        } else {
            (DistortionSpec::identity(), s)
        }
    };

    // distorted cloud for the message path (shared across poses)
    let msg_cloud = if spec3d.kind != DistortionKind::Identity {
        let pos_vals = tape.value_clone(positions);
        let (keep, _degenerate) = keep_indices_3d(&pos_vals, &spec3d, &mut dist_rng)?;
        use splatmark_autograd::ops::gather_rows;
        let op_rows: Vec<usize> = keep.clone();
        (
            gather_rows(positions, &keep),
            gather_rows(scales_v, &keep),
            gather_rows(rotations, &keep),
            reshape(gather_rows(reshape(opacities, &[n, 1]), &keep), &[keep.len()]),
            gather_rows(sh, &op_rows),
        )
    } else {
        (positions, scales_v, rotations, opacities, sh)
    };

    let inv_poses = real::<T>(1.0 / config.poses_per_iter as f64);
    let mut loss_img_acc: Option<Var<'_, T>> = None;
    let mut loss_msg_acc: Option<Var<'_, T>> = None;
    let mut acc_sum = 0.0;
    for _ in 0..config.poses_per_iter {
        let cam = sample_train_camera(&defaults, &mut pose_rng);
        let target = render(cloud, &cam, bg);
        let img_wm = render_var(
            &tape, positions, scales_v, rotations, opacities, sh, config.sh_order, &cam, bg,
        );
        let l_img = loss_img_var(
            &tape,
            img_wm,
            &target.data,
            perceptual,
            real(config.perceptual_weight),
        )?;

        let img_msg = if spec3d.kind != DistortionKind::Identity {
            render_var(
                &tape, msg_cloud.0, msg_cloud.1, msg_cloud.2, msg_cloud.3, msg_cloud.4,
                config.sh_order, &cam, bg,
            )
        } else {
            img_wm
        };
        let img_dis = distort2d_var(
            &tape,
            img_msg,
            Some(&target.data),
            &spec2d,
            bg,
            &mut dist_rng,
        )?;
        let logits = decode_var(&tape, img_dis, &decoder_cfg, &dec_vars)?;
        let l_msg = loss_msg_var(&tape, &msg, logits)?;
        acc_sum += bit_accuracy(&msg, &tape.value(logits))?;

        loss_img_acc = Some(match loss_img_acc {
            Some(acc) => add(acc, l_img),
            None => l_img,
        });
        loss_msg_acc = Some(match loss_msg_acc {
            Some(acc) => add(acc, l_msg),
            None => l_msg,
        });
    }
    let mean_img = scale(loss_img_acc.expect("at least one pose"), inv_poses);
    let mean_msg = scale(loss_msg_acc.expect("at least one pose"), inv_poses);
    let total = add(
        scale(mean_img, real(w_img)),
        scale(mean_msg, real(w_msg)),
    );

    let loss_img_v = Real::as_f64(mean_img.value_clone().data()[0]);
    let loss_msg_v = Real::as_f64(mean_msg.value_clone().data()[0]);
    let total_v = Real::as_f64(total.value_clone().data()[0]);
    if !total_v.is_finite() {
        return Err(Error::Diverged(format!(
            "non-finite loss at iteration {iter}: loss_img={loss_img_v}, loss_msg={loss_msg_v}, \
             message={}, N={n}, distortion=({}, {})",
            msg.as_string(),
            spec3d.kind.name(),
            spec2d.kind.name()
        )));
    }
    tape.backward(total);

    // collect gradients in optimizer order: embedder, decoder, omega
    let mut grads: Vec<Option<Tensor<T>>> = Vec::new();
    for v in emb_vars.all() {
        grads.push(Some(v.grad().unwrap_or_else(|| Tensor::zeros(&v.shape()))));
    }
    for v in dec_vars.all() {
        grads.push(Some(v.grad().unwrap_or_else(|| Tensor::zeros(&v.shape()))));
    }
    grads.push(if omega_trainable {
        Some(
            omega_var
                .grad()
                .unwrap_or_else(|| Tensor::zeros(&[5])),
        )
    } else {
        None
    });

    adam.step(&mut model.tensors_mut(), &grads);

    Ok(StepResult {
        loss_img: loss_img_v,
        loss_msg: loss_msg_v,
        total: total_v,
        bit_acc: acc_sum / config.poses_per_iter as f64,
    })
}

/// Full training run. `init_decoder` seeds the decoder with pretrained
/// weights; `resume` continues an interrupted run exactly (the stored config
/// and optimizer state take precedence).
pub fn train<T: Real>(
    clouds: &[GaussianCloud<T>],
    config: &TrainConfig,
    init_decoder: Option<DecoderParams<T>>,
    resume: Option<&Checkpoint>,
    out_path: Option<&Path>,
) -> Result<TrainOutcome<T>> {
    if clouds.is_empty() {
        return Err(Error::Config("training needs at least one cloud".into()));
    }
    let (mut model, mut adam, config, schedule, start_iter) = match resume {
        Some(ckpt) => {
            let state = ckpt.train_state.as_ref().ok_or_else(|| {
                Error::Model("checkpoint has no training state to resume".into())
            })?;
            let model: WatermarkModel<T> = ckpt.to_model()?;
            let config = state.config.clone();
            config.validate()?;
            let schedule = state.schedule.clone();
            let mut adam =
                Adam::new(real(config.learning_rate), &model.tensor_shapes());
            let m: Result<Vec<Tensor<T>>> =
                state.adam_m.iter().map(|t| t.to_tensor()).collect();
            let v: Result<Vec<Tensor<T>>> =
                state.adam_v.iter().map(|t| t.to_tensor()).collect();
            adam.restore(state.adam_t, m?, v?);
            (model, adam, config, schedule, state.next_iter)
        }
        None => {
            config.validate()?;
            let amc = AmcState::new(config.omega_init, config.gamma, config.amc_trainable)?;
            let mut model = WatermarkModel::init(
                config.lb,
                config.sh_order,
                config.embedder.clone(),
                config.decoder_cfg(),
                amc,
                config.seed,
            )?;
            if let Some(dec) = init_decoder {
                for (dst, src) in model.decoder.tensors_mut().into_iter().zip(dec.tensors()) {
                    if dst.shape() != src.shape() {
                        return Err(Error::Config(
                            "pretrained decoder shape does not match the configured decoder"
                                .into(),
                        ));
                    }
                    *dst = src.clone();
                }
            }
            let schedule = config.schedule()?;
            let adam = Adam::new(real(config.learning_rate), &model.tensor_shapes());
            (model, adam, config.clone(), schedule, 0u64)
        }
    };

    for cloud in clouds {
        if cloud.sh_order != config.sh_order {
            return Err(Error::Config(format!(
                "cloud sh order {} does not match config sh order {}",
                cloud.sh_order, config.sh_order
            )));
        }
    }

    let total = config.total_iterations()?;
    let perceptual = RandomFilterPerceptual::<T>::default();
    let mut logs = Vec::new();

    for iter in start_iter..total {
        use rand::Rng;
        let cloud_idx =
            derive(config.seed, Stream::Data, iter).gen_range(0..clouds.len());
        let step = train_step(
            &mut model,
            &mut adam,
            &clouds[cloud_idx],
            &config,
            &schedule,
            &perceptual,
            iter,
        )?;
        let (w_img, w_msg) = schedule.weights_at(iter);
        if iter % config.log_every == 0 || iter + 1 == total {
            let omega = model.amc.omega();
            logs.push(LogRow {
                iter,
                loss_img: step.loss_img,
                loss_msg: step.loss_msg,
                total: step.total,
                w_img,
                w_msg,
                omega: [
                    Real::as_f64(omega[0]),
                    Real::as_f64(omega[1]),
                    Real::as_f64(omega[2]),
                    Real::as_f64(omega[3]),
                    Real::as_f64(omega[4]),
                ],
                train_bit_acc: step.bit_acc,
            });
        }
        if let (Some(path), Some(every)) = (out_path, config.checkpoint_every) {
            if every > 0 && (iter + 1) % every == 0 && iter + 1 < total {
                let ckpt = snapshot(&model, &adam, &config, &schedule, iter + 1);
                ckpt.save(path)?;
            }
        }
    }

    let checkpoint = snapshot(&model, &adam, &config, &schedule, total);
    if let Some(path) = out_path {
        checkpoint.save(path)?;
    }
    Ok(TrainOutcome { model, checkpoint, logs })
}

fn snapshot<T: Real>(
    model: &WatermarkModel<T>,
    adam: &Adam<T>,
    config: &TrainConfig,
    schedule: &Schedule,
    next_iter: u64,
) -> Checkpoint {
    let (t, m, v) = adam.state();
    Checkpoint::from_model(
        model,
        Some(TrainState {
            next_iter,
            adam_t: t,
            adam_m: m.iter().map(TensorData::from_tensor).collect(),
            adam_v: v.iter().map(TensorData::from_tensor).collect(),
            schedule: schedule.clone(),
            config: config.clone(),
        }),
    )
}

// ---------------------------------------------------------------------------
// decoder pretraining (HiDDeN-style 2D stage)
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PretrainConfig {
    pub lb: usize,
    pub steps: u64,
    pub batch: usize,
    pub learning_rate: f64,
    pub seed: u64,
    pub decoder_blocks: usize,
    pub decoder_channels: usize,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            lb: 16,
            steps: 2_000,
            batch: 2,
            learning_rate: 1e-3,
            seed: 0,
            decoder_blocks: 7,
            decoder_channels: 64,
        }
    }
}

/// Jointly train a throwaway 2D encoder and the decoder on message
/// reconstruction over a rendered-image corpus. Returns the decoder weights
/// and the clean-image bit accuracy measured after training.
pub fn pretrain_decoder<T: Real>(
    corpus: &[Tensor<T>],
    cfg: &PretrainConfig,
) -> Result<(DecoderParams<T>, f64)> {
    if corpus.is_empty() {
        return Err(Error::Config("pretraining corpus is empty".into()));
    }
    if corpus.len() < cfg.batch {
        return Err(Error::Config(format!(
            "corpus of {} images is smaller than the batch size {}",
            corpus.len(),
            cfg.batch
        )));
    }
    let decoder_cfg = DecoderConfig {
        num_conv_blocks: cfg.decoder_blocks,
        channels: cfg.decoder_channels,
        lb: cfg.lb,
    };
    decoder_cfg.validate()?;
    let mut init_rng = derive(cfg.seed, Stream::Init, 1);
    let mut encoder = Encoder2dParams::<T>::init(cfg.lb, &mut init_rng);
    let mut decoder = DecoderParams::<T>::init(&decoder_cfg, &mut init_rng);

    let shapes: Vec<Vec<usize>> = encoder
        .tensors_mut()
        .iter()
        .map(|t| t.shape().to_vec())
        .chain(decoder.tensors().iter().map(|t| t.shape().to_vec()))
        .collect();
    let mut adam = Adam::new(real(cfg.learning_rate), &shapes);

    for step in 0..cfg.steps {
        use rand::Rng;
        let mut rng = derive(cfg.seed, Stream::Data, step);
        let tape: Tape<T> = Tape::new();
        let enc_vars = Encoder2dVars::new(&tape, &encoder, true);
        let dec_vars = DecoderVars::new(&tape, &decoder, true);
        let mut loss_acc: Option<Var<'_, T>> = None;
        for _ in 0..cfg.batch {
            let img = &corpus[rng.gen_range(0..corpus.len())];
            let msg = Message::random(cfg.lb, &mut rng)?;
            let image = tape.constant(img.clone());
            let wm = encode2d_var(&tape, image, &msg, &enc_vars)?;
            let logits = decode_var(&tape, wm, &decoder_cfg, &dec_vars)?;
            let l = loss_msg_var(&tape, &msg, logits)?;
            loss_acc = Some(match loss_acc {
                Some(acc) => add(acc, l),
                None => l,
            });
        }
        let loss = scale(loss_acc.expect("batch >= 1"), real(1.0 / cfg.batch as f64));
        let loss_v = Real::as_f64(loss.value_clone().data()[0]);
        if !loss_v.is_finite() {
            return Err(Error::Diverged(format!("pretraining diverged at step {step}")));
        }
        tape.backward(loss);

        let mut grads: Vec<Option<Tensor<T>>> = Vec::new();
        for v in enc_vars.all().into_iter().chain(dec_vars.all()) {
            grads.push(Some(v.grad().unwrap_or_else(|| Tensor::zeros(&v.shape()))));
        }
        let mut params = encoder.tensors_mut();
        params.extend(decoder.tensors_mut());
        adam.step(&mut params, &grads);
    }

    // clean-image accuracy with the trained pair
    let eval_n = corpus.len().min(100);
    let mut rng = derive(cfg.seed, Stream::Eval, 0);
    let mut total_acc = 0.0;
    for i in 0..eval_n {
        use rand::Rng;
        let _ = rng.gen_range(0..2); // keep draw pattern stable if extended
        let msg = Message::random(cfg.lb, &mut rng)?;
        let tape: Tape<T> = Tape::new();
        let enc_vars = Encoder2dVars::new(&tape, &encoder, false);
        let dec_vars = DecoderVars::new(&tape, &decoder, false);
        let image = tape.constant(corpus[i].clone());
        let wm = encode2d_var(&tape, image, &msg, &enc_vars)?;
        let logits = decode_var(&tape, wm, &decoder_cfg, &dec_vars)?;
        total_acc += bit_accuracy(&msg, &tape.value(logits))?;
    }
    Ok((decoder, total_acc / eval_n as f64))
}

/// Deterministic corpus of clean renders for pretraining.
pub fn render_corpus<T: Real>(
    clouds: &[GaussianCloud<T>],
    count: usize,
    config: &TrainConfig,
) -> Result<Vec<Tensor<T>>> {
    if clouds.is_empty() {
        return Err(Error::Config("corpus rendering needs at least one cloud".into()));
    }
    let defaults = config.pose_defaults::<T>(config.train_size);
    let bg = config.background_t::<T>();
    let mut out = Vec::with_capacity(count);
    let mut rng = derive(config.seed, Stream::Data, u64::MAX);
    for i in 0..count {
        let cam = sample_train_camera(&defaults, &mut rng);
        out.push(render(&clouds[i % clouds.len()], &cam, bg).data);
    }
    Ok(out)
}
