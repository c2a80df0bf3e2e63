//! The trained artifact: embedder, decoder, and marker amplitudes, plus the
//! single-forward-pass embedding entry point.

use splatmark_autograd::ops::add;
use splatmark_autograd::{Real, Tape, Tensor};

use crate::amc::{perturb, AmcState};
use crate::cloud::{denormalize, normalize, GaussianCloud, NormalizedCloud};
use crate::decoder::{decode_plain, DecoderConfig, DecoderParams};
use crate::embedder::{embed_features_var, EmbedderConfig, EmbedderParams, EmbedderVars, Message};
use crate::error::{Error, Result};
use crate::rng::{derive, Stream};

#[derive(Debug, Clone)]
pub struct WatermarkModel<T: Real> {
    pub lb: usize,
    pub sh_order: usize,
    pub embedder_cfg: EmbedderConfig,
    pub embedder: EmbedderParams<T>,
    pub decoder_cfg: DecoderConfig,
    pub decoder: DecoderParams<T>,
    pub amc: AmcState<T>,
}

impl<T: Real> WatermarkModel<T> {
    pub fn init(
        lb: usize,
        sh_order: usize,
        embedder_cfg: EmbedderConfig,
        decoder_cfg: DecoderConfig,
        amc: AmcState<T>,
        seed: u64,
    ) -> Result<Self> {
        embedder_cfg.validate()?;
        decoder_cfg.validate()?;
        if decoder_cfg.lb != lb {
            return Err(Error::Config(format!(
                "decoder lb {} does not match model lb {lb}",
                decoder_cfg.lb
            )));
        }
        let mut rng = derive(seed, Stream::Init, 0);
        let embedder = EmbedderParams::init(&embedder_cfg, sh_order, lb, &mut rng);
        let decoder = DecoderParams::init(&decoder_cfg, &mut rng);
        Ok(Self { lb, sh_order, embedder_cfg, embedder, decoder_cfg, decoder, amc })
    }

    /// Every trainable tensor in optimizer order: embedder, decoder, then
    /// the marker amplitudes.
    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor<T>> {
        let mut out = self.embedder.tensors_mut();
        out.extend(self.decoder.tensors_mut());
        out.push(&mut self.amc.omega_raw);
        out
    }

    pub fn tensor_shapes(&self) -> Vec<Vec<usize>> {
        let mut shapes: Vec<Vec<usize>> =
            self.embedder.tensors().iter().map(|t| t.shape().to_vec()).collect();
        shapes.extend(self.decoder.tensors().iter().map(|t| t.shape().to_vec()));
        shapes.push(self.amc.omega_raw.shape().to_vec());
        shapes
    }

    fn check_message(&self, msg: &Message) -> Result<()> {
        if msg.len() != self.lb {
            return Err(Error::Config(format!(
                "message length {} does not match checkpoint length {}",
                msg.len(),
                self.lb
            )));
        }
        Ok(())
    }

    /// Perturbed normalized features for a cloud under a given seed, shared
    /// by embedding and by tests that need the intermediate.
    pub fn perturbed_features(
        &self,
        norm: &NormalizedCloud<T>,
        seed: u64,
    ) -> NormalizedCloud<T> {
        let mut rng = derive(seed, Stream::AmcNoise, 0);
        let (out, _) = perturb(norm, &self.amc, &mut rng);
        out
    }

    /// Single forward pass: normalize, apply the seeded marker perturbation,
    /// add the message residual, denormalize with validity clamps. No
    /// parameter is written.
    pub fn embed(&self, cloud: &GaussianCloud<T>, msg: &Message, seed: u64) -> Result<GaussianCloud<T>> {
        self.check_message(msg)?;
        if cloud.sh_order != self.sh_order {
            return Err(Error::Config(format!(
                "cloud sh order {} does not match model sh order {}",
                cloud.sh_order, self.sh_order
            )));
        }
        let norm = normalize(cloud)?;
        let perturbed = self.perturbed_features(&norm, seed);

        let tape: Tape<T> = Tape::new();
        let x = tape.constant(perturbed.features.clone());
        let vars = EmbedderVars::new(&tape, &self.embedder, false);
        let delta = embed_features_var(
            &tape,
            x,
            msg,
            &self.embedder_cfg,
            &vars,
            self.sh_order,
            self.lb,
        )?;
        let x_hat = add(x, delta);
        let features = tape.value_clone(x_hat);
        denormalize(&NormalizedCloud { features, params: norm.params })
    }

    /// Soft logits from an image tensor.
    pub fn decode(&self, image: &Tensor<T>) -> Result<Tensor<T>> {
        decode_plain(image, &self.decoder_cfg, &self.decoder)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::amc::default_amc;
    use crate::synth::{synth_cloud, ObjectKind, SynthSpec};

    fn model() -> WatermarkModel<f64> {
        WatermarkModel::init(
            8,
            0,
            EmbedderConfig::default(),
            DecoderConfig::with_lb(8),
            default_amc(),
            42,
        )
        .unwrap()
    }

    #[test]
    fn embed_is_deterministic_per_seed() {
        let m = model();
        let spec = SynthSpec::new(ObjectKind::SphereShell, 200, 1).unwrap();
        let cloud = synth_cloud::<f64>(&spec);
        let msg = Message::parse("10110100").unwrap();
        let a = m.embed(&cloud, &msg, 7).unwrap();
        let b = m.embed(&cloud, &msg, 7).unwrap();
        assert_eq!(a, b);
        let c = m.embed(&cloud, &msg, 8).unwrap();
        assert_ne!(a.positions, c.positions);
    }

    #[test]
    fn embed_preserves_count_and_validity() {
        let m = model();
        let spec = SynthSpec::new(ObjectKind::EllipsoidCluster, 300, 2).unwrap();
        let cloud = synth_cloud::<f64>(&spec);
        let msg = Message::parse("01011001").unwrap();
        let out = m.embed(&cloud, &msg, 3).unwrap();
        assert_eq!(out.len(), cloud.len());
        assert!(out.opacities.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
        assert!(out.scales.data().iter().all(|&v| v > 0.0));
        for r in 0..out.len() {
            let q = out.rotations.row(r);
            let n: f64 = q.iter().map(|v| v * v).sum::<f64>().sqrt();
            assert!((n - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn embed_rejects_wrong_message_length() {
        let m = model();
        let spec = SynthSpec::new(ObjectKind::SphereShell, 100, 3).unwrap();
        let cloud = synth_cloud::<f64>(&spec);
        let msg = Message::parse("1011").unwrap();
        match m.embed(&cloud, &msg, 0) {
            Err(Error::Config(text)) => {
                assert!(text.contains('4') && text.contains('8'), "{text}");
            }
            other => panic!("expected config error, got {other:?}"),
        }
    }
}
