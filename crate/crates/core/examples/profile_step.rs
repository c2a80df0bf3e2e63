//! Timing breakdown of one training step's components.

use splatmark_autograd::ops::mean_all;
use splatmark_autograd::{Tape, Tensor};
use splatmark_core::camera::{sample_train_camera, PoseDefaults};
use splatmark_core::decoder::{decode_var, DecoderConfig, DecoderParams, DecoderVars};
use splatmark_core::render::{render, render_var};
use splatmark_core::rng::{derive, Stream};
use splatmark_core::synth::{synth_cloud, ObjectKind, SynthSpec};

fn main() {
    let cloud = synth_cloud::<f32>(&SynthSpec::new(ObjectKind::SphereShell, 300, 0).unwrap());
    let defaults = PoseDefaults::<f32>::default();
    let mut rng = derive(0, Stream::Pose, 0);
    let cam = sample_train_camera(&defaults, &mut rng);
    let bg = [1.0f32; 3];

    let reps = 20;

    let t0 = std::time::Instant::now();
    for _ in 0..reps {
        let _ = render(&cloud, &cam, bg);
    }
    println!("plain render:        {:6.1} ms", t0.elapsed().as_secs_f64() * 1000.0 / reps as f64);

    let t0 = std::time::Instant::now();
    for _ in 0..reps {
        let tape: Tape<f32> = Tape::new();
        let p = tape.leaf(cloud.positions.clone());
        let s = tape.leaf(cloud.scales.clone());
        let q = tape.leaf(cloud.rotations.clone());
        let o = tape.leaf(cloud.opacities.clone());
        let c = tape.leaf(cloud.sh_coeffs.clone());
        let img = render_var(&tape, p, s, q, o, c, 0, &cam, bg);
        tape.backward(mean_all(img));
    }
    println!("render fwd+bwd:      {:6.1} ms", t0.elapsed().as_secs_f64() * 1000.0 / reps as f64);

    let cfg = DecoderConfig::with_lb(8);
    let params = DecoderParams::<f32>::init(&cfg, &mut derive(0, Stream::Init, 0));
    let img_t = {
        let img = render(&cloud, &cam, bg);
        img.data
    };

    let t0 = std::time::Instant::now();
    for _ in 0..reps {
        let tape: Tape<f32> = Tape::new();
        let vars = DecoderVars::new(&tape, &params, false);
        let img = tape.constant(img_t.clone());
        let logits = decode_var(&tape, img, &cfg, &vars).unwrap();
        let _ = logits.value_clone();
    }
    println!("decoder fwd:         {:6.1} ms", t0.elapsed().as_secs_f64() * 1000.0 / reps as f64);

    let t0 = std::time::Instant::now();
    for _ in 0..reps {
        let tape: Tape<f32> = Tape::new();
        let vars = DecoderVars::new(&tape, &params, true);
        let img = tape.constant(img_t.clone());
        let logits = decode_var(&tape, img, &cfg, &vars).unwrap();
        tape.backward(mean_all(logits));
    }
    println!("decoder fwd+bwd:     {:6.1} ms", t0.elapsed().as_secs_f64() * 1000.0 / reps as f64);

    let perc = splatmark_core::losses::RandomFilterPerceptual::<f32>::default();
    let t0 = std::time::Instant::now();
    for _ in 0..reps {
        let tape: Tape<f32> = Tape::new();
        let a = tape.leaf(img_t.clone());
        let l = splatmark_core::losses::loss_img_var(&tape, a, &img_t, &perc, 1.0).unwrap();
        tape.backward(l);
    }
    println!("img loss fwd+bwd:    {:6.1} ms", t0.elapsed().as_secs_f64() * 1000.0 / reps as f64);

    // embedder
    let norm = splatmark_core::cloud::normalize(&cloud).unwrap();
    let ecfg = splatmark_core::embedder::EmbedderConfig::default();
    let eparams = splatmark_core::embedder::EmbedderParams::<f32>::init(
        &ecfg, 0, 8, &mut derive(0, Stream::Init, 2),
    );
    let msg = splatmark_core::embedder::Message::parse("10110100").unwrap();
    let t0 = std::time::Instant::now();
    for _ in 0..reps {
        let tape: Tape<f32> = Tape::new();
        let vars = splatmark_core::embedder::EmbedderVars::new(&tape, &eparams, true);
        let x = tape.constant(norm.features.clone());
        let d = splatmark_core::embedder::embed_features_var(&tape, x, &msg, &ecfg, &vars, 0, 8)
            .unwrap();
        tape.backward(mean_all(d));
    }
    println!("embedder fwd+bwd:    {:6.1} ms", t0.elapsed().as_secs_f64() * 1000.0 / reps as f64);
}
