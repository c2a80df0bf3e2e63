//! Renderer correctness against closed-form oracles and finite differences.
//!
//! The oracles mirror the compositing semantics exactly (weight cutoff,
//! opacity cap) but are written as independent scalar formulas per pixel.

use splatmark_autograd::gradcheck::{max_rel_error, numeric_grads};
use splatmark_autograd::ops::mean_all;
use splatmark_autograd::{Tape, Tensor};
use splatmark_core::camera::Camera;
use splatmark_core::cloud::GaussianCloud;
use splatmark_core::render::{render, render_var, ALPHA_MAX, COV2D_EPS, WEIGHT_CUTOFF};
use splatmark_core::synth::SH_C0;

fn dc_for_color(rgb: [f64; 3]) -> Vec<f64> {
    rgb.iter().map(|c| (c - 0.5) / SH_C0).collect()
}

fn single_gaussian(scale: f64, opacity: f64, rgb: [f64; 3]) -> GaussianCloud<f64> {
    GaussianCloud::new(
        Tensor::zeros(&[1, 3]),
        Tensor::new(&[1, 3], vec![scale; 3]),
        Tensor::new(&[1, 4], vec![1.0, 0.0, 0.0, 0.0]),
        Tensor::new(&[1], vec![opacity]),
        Tensor::new(&[1, 3], dc_for_color(rgb)),
        0,
    )
    .unwrap()
}

fn head_on_camera(size: usize) -> Camera<f64> {
    Camera::new(0.0, 0.0, 2.5, 50.0, size, size, [0.0; 3]).unwrap()
}

/// Closed-form color of a single on-axis isotropic splat at pixel (x, y).
fn single_splat_oracle(
    cam: &Camera<f64>,
    scale: f64,
    opacity: f64,
    rgb: [f64; 3],
    bg: [f64; 3],
    x: usize,
    y: usize,
) -> [f64; 3] {
    let f = cam.focal();
    let z = cam.radius;
    let sigma2 = (f * scale / z).powi(2) + COV2D_EPS;
    let dx = (x as f64 + 0.5) - cam.width as f64 * 0.5;
    let dy = (y as f64 + 0.5) - cam.height as f64 * 0.5;
    let g = (-0.5 * (dx * dx + dy * dy) / sigma2).exp();
    let alpha_eff = if g < WEIGHT_CUTOFF { 0.0 } else { (opacity * g).min(ALPHA_MAX) };
    [
        rgb[0] * alpha_eff + bg[0] * (1.0 - alpha_eff),
        rgb[1] * alpha_eff + bg[1] * (1.0 - alpha_eff),
        rgb[2] * alpha_eff + bg[2] * (1.0 - alpha_eff),
    ]
}

#[test]
fn empty_cloud_renders_background() {
    let cloud = GaussianCloud::<f64>::new(
        Tensor::zeros(&[0, 3]),
        Tensor::zeros(&[0, 3]),
        Tensor::zeros(&[0, 4]),
        Tensor::zeros(&[0]),
        Tensor::zeros(&[0, 3]),
        0,
    )
    .unwrap();
    let cam = head_on_camera(32);
    let img = render(&cloud, &cam, [0.2, 0.4, 0.6]);
    for px in img.data.data().chunks(3) {
        assert_eq!(px, &[0.2, 0.4, 0.6]);
    }
}

#[test]
fn single_splat_matches_closed_form_profile() {
    let cam = head_on_camera(64);
    // sigma_px = f*s/z ~ 16 px so the center pixel weight stays ~1
    let scale = 16.0 * cam.radius / cam.focal();
    let rgb = [0.9, 0.6, 0.3];
    let bg = [0.0, 0.0, 0.0];
    let cloud = single_gaussian(scale, 1.0, rgb);
    let img = render(&cloud, &cam, bg);

    for y in 0..64 {
        for x in 0..64 {
            let expect = single_splat_oracle(&cam, scale, 1.0, rgb, bg, x, y);
            let got = img.pixel(y, x);
            for c in 0..3 {
                assert!(
                    (got[c] - expect[c]).abs() < 1e-3,
                    "pixel ({x},{y}) ch {c}: {} vs {}",
                    got[c],
                    expect[c]
                );
            }
        }
    }
    // center pixels reproduce the primitive color to 1e-3 at opacity 1
    let center = img.pixel(32, 32);
    for c in 0..3 {
        assert!((center[c] - rgb[c]).abs() < 1e-3);
    }
    // intensity falls off along the scanline through the center
    let mut prev = img.pixel(32, 32)[0];
    for x in 33..64 {
        let v = img.pixel(32, x)[0];
        assert!(v <= prev + 1e-12, "profile not monotone at x={x}");
        prev = v;
    }
}

#[test]
fn two_splat_compositing_matches_hand_blend() {
    let cam = head_on_camera(64);
    let f = cam.focal();
    let (a, b) = (0.6, 0.7);
    let c1 = [0.85, 0.2, 0.3];
    let c2 = [0.1, 0.7, 0.9];
    let bg = [1.0, 1.0, 1.0];
    let s = 12.0 * cam.radius / f;
    // camera sits on +x looking back: +x offset is closer to the camera
    let positions = Tensor::new(&[2, 3], vec![0.3, 0.0, 0.0, 0.0, 0.0, 0.0]);
    let mut shs = dc_for_color(c1);
    shs.extend(dc_for_color(c2));
    let cloud = GaussianCloud::new(
        positions,
        Tensor::new(&[2, 3], vec![s; 6]),
        Tensor::new(&[2, 4], vec![1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0]),
        Tensor::new(&[2], vec![a, b]),
        Tensor::new(&[2, 3], shs),
        0,
    )
    .unwrap();
    let img = render(&cloud, &cam, bg);

    let z1 = cam.radius - 0.3;
    let z2 = cam.radius;
    let g = |z: f64| {
        let sigma2 = (f * s / z).powi(2) + COV2D_EPS;
        // center pixels are offset 0.5 px from the projected center
        (-0.5 * (0.25 + 0.25) / sigma2).exp()
    };
    let (a1, a2) = (a * g(z1), b * g(z2));
    let got = img.pixel(32, 32);
    for ch in 0..3 {
        let expect =
            c1[ch] * a1 + c2[ch] * a2 * (1.0 - a1) + bg[ch] * (1.0 - a1) * (1.0 - a2);
        assert!(
            (got[ch] - expect).abs() < 1e-5,
            "ch {ch}: {} vs {expect}",
            got[ch]
        );
    }
}

#[test]
fn storage_order_does_not_change_the_image() {
    let cam = head_on_camera(48);
    let n = 40;
    let mut rng_state = 123u64;
    let mut next = move || {
        rng_state = rng_state.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
        ((rng_state >> 11) as f64) / ((1u64 << 53) as f64)
    };
    let positions = Tensor::new(&[n, 3], (0..n * 3).map(|_| next() * 1.6 - 0.8).collect());
    let scales = Tensor::new(&[n, 3], (0..n * 3).map(|_| 0.05 + 0.2 * next()).collect());
    let rotations = Tensor::new(&[n, 4], (0..n * 4).map(|_| next() * 2.0 - 1.0).collect());
    let opacities = Tensor::new(&[n], (0..n).map(|_| 0.2 + 0.7 * next()).collect());
    let sh = Tensor::new(&[n, 3], (0..n * 3).map(|_| next() * 2.0 - 1.0).collect());
    let cloud = GaussianCloud::new(positions, scales, rotations, opacities, sh, 0).unwrap();

    let img = render(&cloud, &cam, [1.0; 3]);
    let perm: Vec<usize> = (0..n).rev().collect();
    let img2 = render(&cloud.select(&perm).unwrap(), &cam, [1.0; 3]);
    for (p, q) in img.data.data().iter().zip(img2.data.data()) {
        assert!((p - q).abs() < 1e-6);
    }
    // output range invariant
    for &v in img.data.data() {
        assert!((0.0..=1.0).contains(&v) && v.is_finite());
    }
}

/// Gradient check scene: three broad overlapping Gaussians that cover the
/// whole 32x32 frame, keeping every pixel far from the weight cutoff and the
/// opacity cap so central differences see a smooth function.
fn gradcheck_scene() -> (Vec<Tensor<f64>>, Camera<f64>) {
    let cam = Camera::new(20.0, 30.0, 2.5, 50.0, 32, 32, [0.0; 3]).unwrap();
    let positions = Tensor::new(
        &[3, 3],
        vec![0.05, -0.1, 0.08, 0.4, 0.25, -0.2, -0.3, -0.2, 0.3],
    );
    let scales = Tensor::new(&[3, 3], vec![1.9, 2.1, 1.8, 2.2, 1.7, 2.0, 1.8, 2.0, 2.3]);
    let rotations = Tensor::new(
        &[3, 4],
        vec![0.9, 0.2, -0.3, 0.1, 0.7, -0.4, 0.5, 0.2, 0.8, 0.3, 0.4, -0.2],
    );
    let opacities = Tensor::new(&[3], vec![0.55, 0.7, 0.65]);
    let sh = Tensor::new(
        &[3, 3],
        dc_for_color([0.7, 0.4, 0.55])
            .into_iter()
            .chain(dc_for_color([0.35, 0.6, 0.45]))
            .chain(dc_for_color([0.5, 0.45, 0.65]))
            .collect(),
    );
    (vec![positions, scales, rotations, opacities, sh], cam)
}

fn render_mean_loss(inputs: &[Tensor<f64>], cam: &Camera<f64>) -> f64 {
    let tape: Tape<f64> = Tape::new();
    let vars: Vec<_> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
    let img = render_var(
        &tape, vars[0], vars[1], vars[2], vars[3], vars[4], 0, cam, [0.3, 0.3, 0.3],
    );
    mean_all(img).value_clone().data()[0]
}

#[test]
fn analytic_gradients_match_finite_differences_for_all_groups() {
    let start = std::time::Instant::now();
    let (inputs, cam) = gradcheck_scene();

    let tape: Tape<f64> = Tape::new();
    let vars: Vec<_> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
    let img = render_var(
        &tape, vars[0], vars[1], vars[2], vars[3], vars[4], 0, &cam, [0.3, 0.3, 0.3],
    );
    let loss = mean_all(img);
    tape.backward(loss);

    let mut f = |x: &[Tensor<f64>]| render_mean_loss(x, &cam);
    let numeric = numeric_grads(&mut f, &inputs, 1e-4);

    let names = ["position", "scale", "rotation", "opacity", "color"];
    for (i, name) in names.iter().enumerate() {
        let analytic = tape.grad(vars[i]).unwrap();
        let err = max_rel_error(&analytic, &numeric[i], 1e-6);
        println!("gradcheck {name}: max rel err {err:.3e}");
        assert!(err < 1e-3, "{name} gradient mismatch: {err}");
    }
    assert!(start.elapsed().as_secs() < 60, "gradcheck exceeded 1 minute");
}

#[test]
fn sh_order_two_gradients_match_finite_differences() {
    let cam = Camera::new(15.0, 50.0, 2.5, 50.0, 24, 24, [0.0; 3]).unwrap();
    let sh_dim = 3 * 9;
    let positions = Tensor::new(&[2, 3], vec![0.1, -0.05, 0.0, -0.2, 0.15, 0.1]);
    let scales = Tensor::new(&[2, 3], vec![1.9, 2.0, 2.1, 2.0, 1.8, 2.2]);
    let rotations =
        Tensor::new(&[2, 4], vec![0.9, 0.1, -0.2, 0.2, 0.8, -0.3, 0.4, 0.1]);
    let opacities = Tensor::new(&[2], vec![0.6, 0.5]);
    let mut shv = vec![0.0; 2 * sh_dim];
    for (i, v) in shv.iter_mut().enumerate() {
        // DC close to mid gray, higher bands small so the color clamp
        // stays inactive
        *v = if i % sh_dim < 3 { 0.2 } else { 0.03 * ((i % 7) as f64 - 3.0) };
    }
    let sh = Tensor::new(&[2, sh_dim], shv);
    let inputs = vec![positions, scales, rotations, opacities, sh];

    let runner = |x: &[Tensor<f64>]| {
        let tape: Tape<f64> = Tape::new();
        let vars: Vec<_> = x.iter().map(|t| tape.leaf(t.clone())).collect();
        let img = render_var(
            &tape, vars[0], vars[1], vars[2], vars[3], vars[4], 2, &cam, [0.5; 3],
        );
        mean_all(img).value_clone().data()[0]
    };
    let mut f = runner;
    let numeric = numeric_grads(&mut f, &inputs, 1e-4);

    let tape: Tape<f64> = Tape::new();
    let vars: Vec<_> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
    let img = render_var(
        &tape, vars[0], vars[1], vars[2], vars[3], vars[4], 2, &cam, [0.5; 3],
    );
    tape.backward(mean_all(img));
    for i in 0..5 {
        let analytic = tape.grad(vars[i]).unwrap();
        let err = max_rel_error(&analytic, &numeric[i], 1e-6);
        assert!(err < 1e-3, "input {i} mismatch at sh order 2: {err}");
    }
}

#[test]
fn scale_sensitivity_exceeds_color_sensitivity() {
    // one small splat; loss responds to relative scale changes about twice
    // as strongly as to relative color changes
    let cam = head_on_camera(64);
    let scale = 3.0 * cam.radius / cam.focal(); // sigma ~ 3 px
    let cloud = single_gaussian(scale, 0.8, [0.85, 0.75, 0.8]);
    let bg = [0.0; 3];
    let rel = 1e-3;

    let mean_of = |c: &GaussianCloud<f64>| {
        let img = render(c, &cam, bg);
        img.data.data().iter().sum::<f64>() / img.data.numel() as f64
    };

    let mut plus = cloud.clone();
    plus.scales.data_mut().iter_mut().for_each(|v| *v *= 1.0 + rel);
    let mut minus = cloud.clone();
    minus.scales.data_mut().iter_mut().for_each(|v| *v *= 1.0 - rel);
    let scale_sens = (mean_of(&plus) - mean_of(&minus)).abs() / (2.0 * rel);

    let mut plus = cloud.clone();
    plus.sh_coeffs.data_mut().iter_mut().for_each(|v| *v *= 1.0 + rel);
    let mut minus = cloud.clone();
    minus.sh_coeffs.data_mut().iter_mut().for_each(|v| *v *= 1.0 - rel);
    let color_sens = (mean_of(&plus) - mean_of(&minus)).abs() / (2.0 * rel);

    assert!(
        scale_sens > color_sens,
        "scale {scale_sens} vs color {color_sens}"
    );
}
