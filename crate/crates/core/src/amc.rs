//! Adaptive marker control: masked Gaussian perturbation of the normalized
//! features, with one learnable non-negative amplitude per property group.

use rand::Rng;
use rand_distr::StandardNormal;
use splatmark_autograd::ops::{add, concat_cols, mul_scalar_var, reshape, slice_cols, softplus};
use splatmark_autograd::{real, Real, Tape, Tensor, Var};

use crate::cloud::{feature_dim, NormalizedCloud, GROUPS};
use crate::error::{Error, Result};

/// Amplitudes are stored pre-softplus so they stay non-negative while still
/// reaching (numerically exact) zero at -inf.
#[derive(Debug, Clone, PartialEq)]
pub struct AmcState<T: Real> {
    pub omega_raw: Tensor<T>,
    pub gamma: T,
    pub trainable: bool,
}

fn softplus_scalar<T: Real>(x: T) -> T {
    if x > real(30.0) {
        x
    } else if x < real(-30.0) {
        x.exp()
    } else {
        x.exp().ln_1p()
    }
}

fn softplus_inv(y: f64) -> f64 {
    if y == 0.0 {
        f64::NEG_INFINITY
    } else if y > 30.0 {
        y
    } else {
        (y.exp() - 1.0).ln()
    }
}

impl<T: Real> AmcState<T> {
    pub fn new(omega: [f64; 5], gamma: f64, trainable: bool) -> Result<Self> {
        if !(0.0..=1.0).contains(&gamma) {
            return Err(Error::Config(format!("gamma {gamma} outside [0,1]")));
        }
        if omega.iter().any(|&w| w < 0.0) {
            return Err(Error::Config("omega amplitudes must be non-negative".into()));
        }
        let raw: Vec<T> = omega.iter().map(|&w| real(softplus_inv(w))).collect();
        Ok(Self { omega_raw: Tensor::new(&[5], raw), gamma: real(gamma), trainable })
    }

    /// Current amplitudes, in property-group order.
    pub fn omega(&self) -> [T; 5] {
        let mut out = [T::zero(); 5];
        for (o, &r) in out.iter_mut().zip(self.omega_raw.data()) {
            *o = softplus_scalar(r);
        }
        out
    }
}

/// Paper defaults: position 0.01, scale 0.5, rotation 0.1, opacity 1.0,
/// color 1.0; selection ratio 0.4; amplitudes learnable.
pub fn default_amc<T: Real>() -> AmcState<T> {
    AmcState::new([0.01, 0.5, 0.1, 1.0, 1.0], 0.4, true).expect("defaults valid")
}

/// One draw of marker noise: dense N(0,1) noise, a Bernoulli(gamma) primitive
/// mask, and the resulting delta.
#[derive(Debug, Clone)]
pub struct Perturbation<T: Real> {
    pub noise: Tensor<T>,
    pub mask: Vec<bool>,
    pub delta: Tensor<T>,
}

/// Noise and mask draw shared by the plain and on-tape paths. Draw order is
/// fixed: all noise entries row-major, then the mask.
pub fn draw_noise<T: Real, R: Rng>(
    n: usize,
    d_g: usize,
    gamma: T,
    rng: &mut R,
) -> (Tensor<T>, Vec<bool>) {
    let mut noise = Tensor::zeros(&[n, d_g]);
    for v in noise.data_mut() {
        let x: f64 = rng.sample(StandardNormal);
        *v = real(x);
    }
    let g = Real::as_f64(gamma);
    let mask = (0..n).map(|_| rng.gen_range(0.0..1.0) < g).collect();
    (noise, mask)
}

fn masked_noise<T: Real>(noise: &Tensor<T>, mask: &[bool]) -> Tensor<T> {
    let mut out = noise.clone();
    for (r, &keep) in mask.iter().enumerate() {
        if !keep {
            for v in out.row_mut(r) {
                *v = T::zero();
            }
        }
    }
    out
}

/// Perturb a normalized cloud: X~ = X + Delta with
/// Delta[i,j] = omega[group(j)] * P[i,j] * m[i]. Features are not re-clamped
/// here; validity is restored at denormalization.
pub fn perturb<T: Real, R: Rng>(
    norm: &NormalizedCloud<T>,
    state: &AmcState<T>,
    rng: &mut R,
) -> (NormalizedCloud<T>, Perturbation<T>) {
    let n = norm.len();
    let d_g = norm.feature_dim();
    let (noise, mask) = draw_noise(n, d_g, state.gamma, rng);
    let omega = state.omega();
    let mut delta = masked_noise(&noise, &mask);
    for g in GROUPS {
        let cols = g.columns(norm.params.sh_order);
        let w = omega[g.index()];
        for r in 0..n {
            for v in &mut delta.row_mut(r)[cols.clone()] {
                *v = *v * w;
            }
        }
    }
    let mut features = norm.features.clone();
    features.add_assign(&delta);
    (
        NormalizedCloud { features, params: norm.params.clone() },
        Perturbation { noise, mask, delta },
    )
}

/// On-tape perturbation. `omega_raw` is a `[5]` leaf when training the
/// amplitudes; gradients flow into it through the softplus.
pub fn perturb_var<'t, T: Real, R: Rng>(
    tape: &'t Tape<T>,
    features: Var<'t, T>,
    omega_raw: Var<'t, T>,
    sh_order: usize,
    gamma: T,
    rng: &mut R,
) -> (Var<'t, T>, Perturbation<T>) {
    let (n, d_g) = {
        let v = tape.value(features);
        (v.rows(), v.cols())
    };
    debug_assert_eq!(d_g, feature_dim(sh_order));
    let (noise, mask) = draw_noise(n, d_g, gamma, rng);
    let masked = masked_noise(&noise, &mask);

    let omega = softplus(reshape(omega_raw, &[1, 5]));
    let mut parts = Vec::with_capacity(5);
    for g in GROUPS {
        let cols = g.columns(sh_order);
        let mut part = Tensor::zeros(&[n, cols.len()]);
        for r in 0..n {
            part.row_mut(r).copy_from_slice(&masked.row(r)[cols.clone()]);
        }
        let w_g = reshape(slice_cols(omega, g.index(), g.index() + 1), &[1]);
        parts.push(mul_scalar_var(tape.constant(part), w_g));
    }
    let delta = concat_cols(&parts);
    let perturbation =
        Perturbation { noise, mask, delta: tape.value_clone(delta) };
    (add(features, delta), perturbation)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cloud::{normalize, PropertyGroup};
    use crate::rng::{derive, Stream};
    use crate::synth::{synth_cloud, ObjectKind, SynthSpec};

    fn norm_cloud(n: usize, seed: u64) -> NormalizedCloud<f64> {
        let spec = SynthSpec::new(ObjectKind::SphereShell, n.max(50), seed).unwrap();
        let mut cloud = synth_cloud::<f64>(&spec);
        if n < cloud.len() {
            cloud = cloud.select(&(0..n).collect::<Vec<_>>()).unwrap();
        }
        normalize(&cloud).unwrap()
    }

    #[test]
    fn defaults_match_reported_values() {
        let amc: AmcState<f64> = default_amc();
        let omega = amc.omega();
        assert!((omega[0] - 0.01).abs() < 1e-9, "position");
        assert!((omega[1] - 0.5).abs() < 1e-9, "scale");
        assert!((omega[2] - 0.1).abs() < 1e-9, "rotation");
        assert!((omega[3] - 1.0).abs() < 1e-9, "opacity");
        assert!((omega[4] - 1.0).abs() < 1e-9, "color");
        assert_eq!(amc.gamma, 0.4);
        assert!(amc.trainable);
    }

    #[test]
    fn gamma_zero_is_identity() {
        let norm = norm_cloud(80, 1);
        let amc = AmcState::new([0.5; 5], 0.0, false).unwrap();
        let mut rng = derive(1, Stream::AmcNoise, 0);
        let (out, pert) = perturb(&norm, &amc, &mut rng);
        assert_eq!(out.features, norm.features);
        assert!(pert.delta.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn zero_omega_is_identity_for_any_gamma() {
        let norm = norm_cloud(80, 2);
        let amc = AmcState::new([0.0; 5], 1.0, false).unwrap();
        let mut rng = derive(2, Stream::AmcNoise, 0);
        let (out, _) = perturb(&norm, &amc, &mut rng);
        assert_eq!(out.features, norm.features);
    }

    #[test]
    fn color_only_noise_statistics() {
        let n = 10_000;
        let norm = norm_cloud(n, 3);
        let omega_color = 0.7;
        let amc = AmcState::new([0.0, 0.0, 0.0, 0.0, omega_color], 1.0, false).unwrap();
        let mut rng = derive(3, Stream::AmcNoise, 0);
        let (out, pert) = perturb(&norm, &amc, &mut rng);
        // only color columns change
        for g in GROUPS {
            if g == PropertyGroup::Color {
                continue;
            }
            let cols = g.columns(0);
            for r in 0..n {
                for c in cols.clone() {
                    assert_eq!(out.features.at2(r, c), norm.features.at2(r, c));
                }
            }
        }
        // column-wise std of the color delta is within 5% of omega
        let cols = PropertyGroup::Color.columns(0);
        for c in cols {
            let mut sum = 0.0;
            let mut sum2 = 0.0;
            for r in 0..n {
                let v = pert.delta.at2(r, c);
                sum += v;
                sum2 += v * v;
            }
            let var = sum2 / n as f64 - (sum / n as f64).powi(2);
            let std = var.sqrt();
            assert!(
                (std - omega_color).abs() / omega_color < 0.05,
                "column {c} std {std}"
            );
        }
    }

    #[test]
    fn mask_density_within_binomial_bound() {
        let n = 10_000;
        let norm = norm_cloud(n, 4);
        let gamma = 0.4;
        let amc = AmcState::new([1.0; 5], gamma, false).unwrap();
        let mut rng = derive(4, Stream::AmcNoise, 0);
        let (_, pert) = perturb(&norm, &amc, &mut rng);
        let density =
            pert.mask.iter().filter(|&&m| m).count() as f64 / n as f64;
        let bound = 3.0 * (gamma * (1.0 - gamma) / n as f64).sqrt();
        assert!((density - gamma).abs() < bound, "density {density}");
        // masked-off rows are exactly zero
        for (r, &m) in pert.mask.iter().enumerate() {
            if !m {
                assert!(pert.delta.row(r).iter().all(|&v| v == 0.0));
            }
        }
    }

    #[test]
    fn same_seed_reproduces_perturbation() {
        let norm = norm_cloud(100, 5);
        let amc: AmcState<f64> = default_amc();
        let (a, pa) = perturb(&norm, &amc, &mut derive(9, Stream::AmcNoise, 7));
        let (b, pb) = perturb(&norm, &amc, &mut derive(9, Stream::AmcNoise, 7));
        assert_eq!(a.features, b.features);
        assert_eq!(pa.noise, pb.noise);
        assert_eq!(pa.mask, pb.mask);
    }

    #[test]
    fn tape_path_matches_plain_path() {
        let norm = norm_cloud(60, 6);
        let amc: AmcState<f64> = default_amc();
        let (plain, _) = perturb(&norm, &amc, &mut derive(11, Stream::AmcNoise, 3));

        let tape: Tape<f64> = Tape::new();
        let features = tape.constant(norm.features.clone());
        let omega_raw = tape.leaf(amc.omega_raw.clone());
        let (out, _) = perturb_var(
            &tape,
            features,
            omega_raw,
            0,
            amc.gamma,
            &mut derive(11, Stream::AmcNoise, 3),
        );
        let got = tape.value_clone(out);
        for (a, b) in got.data().iter().zip(plain.features.data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn omega_receives_gradient_on_tape() {
        let norm = norm_cloud(60, 8);
        let amc: AmcState<f64> = default_amc();
        let tape: Tape<f64> = Tape::new();
        let features = tape.constant(norm.features.clone());
        let omega_raw = tape.leaf(amc.omega_raw.clone());
        let (out, _) = perturb_var(
            &tape,
            features,
            omega_raw,
            0,
            amc.gamma,
            &mut derive(12, Stream::AmcNoise, 0),
        );
        let loss = splatmark_autograd::ops::mean_all(splatmark_autograd::ops::mul(out, out));
        tape.backward(loss);
        let g = tape.grad(omega_raw).unwrap();
        assert!(g.data().iter().any(|&v| v != 0.0));
    }
}
