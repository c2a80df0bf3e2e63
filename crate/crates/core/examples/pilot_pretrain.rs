//! Pilot: 2D pretraining convergence, then joint training from that init.

use splatmark_core::pipeline::{pretrain_decoder, render_corpus, train, PretrainConfig, TrainConfig};
use splatmark_core::synth::{synth_cloud, ObjectKind, SynthSpec};

fn main() {
    let steps: u64 = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(800);
    let joint: u64 = std::env::args().nth(2).and_then(|s| s.parse().ok()).unwrap_or(0);

    let clouds: Vec<_> = (0..8)
        .map(|i| {
            let kind = ObjectKind::ALL[i % 3];
            synth_cloud::<f32>(&SynthSpec::new(kind, 300, i as u64).unwrap())
        })
        .collect();

    let config = TrainConfig { lb: 8, seed: 1, ..TrainConfig::default() };
    let t0 = std::time::Instant::now();
    let corpus = render_corpus(&clouds, 500, &config).unwrap();
    println!("corpus: {} images in {:.1}s", corpus.len(), t0.elapsed().as_secs_f64());

    let pcfg = PretrainConfig { lb: 8, steps, seed: 3, ..PretrainConfig::default() };
    let t0 = std::time::Instant::now();
    let (dec, acc) = pretrain_decoder(&corpus, &pcfg).unwrap();
    println!(
        "pretrain {} steps in {:.1}s -> clean acc {:.2}%",
        steps,
        t0.elapsed().as_secs_f64(),
        acc
    );

    if joint > 0 {
        let config = TrainConfig {
            lb: 8,
            seed: 1,
            iterations: Some(joint),
            log_every: 100,
            ..TrainConfig::default()
        };
        let t0 = std::time::Instant::now();
        let outcome = train(&clouds, &config, Some(dec), None, None).unwrap();
        println!("joint {} iters in {:.1}s", joint, t0.elapsed().as_secs_f64());
        for row in outcome.logs.iter().rev().take(8).rev() {
            println!(
                "iter {:5}  img {:.5}  msg {:.5}  acc {:5.1}%  omega {:.3?}",
                row.iter, row.loss_img, row.loss_msg, row.train_bit_acc, row.omega
            );
        }
    }
}
