//! Pilot run: time per iteration and loss trajectory on a tiny config.

use splatmark_core::pipeline::{train, TrainConfig};
use splatmark_core::synth::{synth_cloud, ObjectKind, SynthSpec};

fn main() {
    let n_clouds: usize = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(4);
    let n_prims: usize = std::env::args().nth(2).and_then(|s| s.parse().ok()).unwrap_or(300);
    let iters: u64 = std::env::args().nth(3).and_then(|s| s.parse().ok()).unwrap_or(200);

    let clouds: Vec<_> = (0..n_clouds)
        .map(|i| {
            let kind = ObjectKind::ALL[i % 3];
            synth_cloud::<f32>(&SynthSpec::new(kind, n_prims, i as u64).unwrap())
        })
        .collect();

    let config = TrainConfig {
        lb: 8,
        seed: 1,
        iterations: Some(iters),
        log_every: 20,
        ..TrainConfig::default()
    };

    let t0 = std::time::Instant::now();
    let outcome = train(&clouds, &config, None, None, None).unwrap();
    let dt = t0.elapsed().as_secs_f64();
    println!(
        "{} iters in {:.1}s = {:.1} ms/iter",
        iters,
        dt,
        1000.0 * dt / iters as f64
    );
    for row in &outcome.logs {
        println!(
            "iter {:5}  img {:.5}  msg {:.5}  acc {:5.1}%  w=({:.2},{:.1})  omega {:.3?}",
            row.iter, row.loss_img, row.loss_msg, row.train_bit_acc, row.w_img, row.w_msg, row.omega
        );
    }
}
