//! Synthetic desk-scale objects: clouds sampled on simple surfaces with
//! smooth color fields, deterministic per seed.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;
use splatmark_autograd::{real, Real, Tensor};

use crate::cloud::GaussianCloud;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ObjectKind {
    SphereShell,
    EllipsoidCluster,
    BoxSurface,
}

impl ObjectKind {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "sphere-shell" => Ok(Self::SphereShell),
            "ellipsoid-cluster" => Ok(Self::EllipsoidCluster),
            "box-surface" => Ok(Self::BoxSurface),
            other => Err(Error::Config(format!("unknown object kind \"{other}\""))),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Self::SphereShell => "sphere-shell",
            Self::EllipsoidCluster => "ellipsoid-cluster",
            Self::BoxSurface => "box-surface",
        }
    }

    pub const ALL: [ObjectKind; 3] =
        [Self::SphereShell, Self::EllipsoidCluster, Self::BoxSurface];
}

#[derive(Debug, Clone)]
pub struct SynthSpec {
    pub kind: ObjectKind,
    pub count: usize,
    pub seed: u64,
}

impl SynthSpec {
    pub fn new(kind: ObjectKind, count: usize, seed: u64) -> Result<Self> {
        if count < 50 {
            return Err(Error::Config(format!(
                "primitive count {count} below minimum 50"
            )));
        }
        Ok(Self { kind, count, seed })
    }
}

/// Smooth per-cloud color field: slowly varying sinusoids of position with
/// random phases, mapped to [0.15, 0.85].
struct ColorField {
    freq: [[f64; 3]; 3],
    phase: [f64; 3],
}

impl ColorField {
    fn new(rng: &mut impl Rng) -> Self {
        let mut freq = [[0.0; 3]; 3];
        for row in freq.iter_mut() {
            for f in row.iter_mut() {
                *f = rng.gen_range(0.8..2.2);
            }
        }
        let mut phase = [0.0; 3];
        for p in phase.iter_mut() {
            *p = rng.gen_range(0.0..std::f64::consts::TAU);
        }
        Self { freq, phase }
    }

    fn eval(&self, p: [f64; 3]) -> [f64; 3] {
        let mut rgb = [0.0; 3];
        for c in 0..3 {
            let s = self.freq[c][0] * p[0] + self.freq[c][1] * p[1] + self.freq[c][2] * p[2];
            rgb[c] = 0.5 + 0.35 * (s + self.phase[c]).sin();
        }
        rgb
    }
}

fn unit_dir(rng: &mut impl Rng) -> [f64; 3] {
    loop {
        let v = [
            rng.gen_range(-1.0..1.0),
            rng.gen_range(-1.0..1.0),
            rng.gen_range(-1.0..1.0),
        ];
        let n2: f64 = v.iter().map(|x| x * x).sum();
        if n2 > 1e-4 && n2 <= 1.0 {
            let n = n2.sqrt();
            return [v[0] / n, v[1] / n, v[2] / n];
        }
    }
}

fn random_quat(rng: &mut impl Rng) -> [f64; 4] {
    loop {
        let q = [
            rng.gen_range(-1.0..1.0),
            rng.gen_range(-1.0..1.0),
            rng.gen_range(-1.0..1.0),
            rng.gen_range(-1.0..1.0),
        ];
        let n2: f64 = q.iter().map(|x| x * x).sum();
        if n2 > 1e-4 && n2 <= 1.0 {
            let n = n2.sqrt();
            return [q[0] / n, q[1] / n, q[2] / n, q[3] / n];
        }
    }
}

/// SH DC coefficient producing the given linear color at order 0:
/// color = 0.5 + C0 * dc  =>  dc = (color - 0.5) / C0.
pub const SH_C0: f64 = 0.282_094_791_773_878_14;

pub fn synth_cloud<T: Real>(spec: &SynthSpec) -> GaussianCloud<T> {
    let mut rng = ChaCha12Rng::seed_from_u64(spec.seed);
    let n = spec.count;
    let field = ColorField::new(&mut rng);

    // surface points
    let mut pts = Vec::with_capacity(n);
    match spec.kind {
        ObjectKind::SphereShell => {
            let radius = 1.0;
            for _ in 0..n {
                let d = unit_dir(&mut rng);
                let r = radius + rng.gen_range(-0.015..0.015);
                pts.push([d[0] * r, d[1] * r, d[2] * r]);
            }
        }
        ObjectKind::EllipsoidCluster => {
            let k = rng.gen_range(3..=5);
            let mut centers = Vec::new();
            let mut axes = Vec::new();
            for _ in 0..k {
                centers.push([
                    rng.gen_range(-0.45..0.45),
                    rng.gen_range(-0.45..0.45),
                    rng.gen_range(-0.45..0.45),
                ]);
                axes.push([
                    rng.gen_range(0.25..0.55),
                    rng.gen_range(0.25..0.55),
                    rng.gen_range(0.25..0.55),
                ]);
            }
            for i in 0..n {
                let e = i % k;
                let d = unit_dir(&mut rng);
                pts.push([
                    centers[e][0] + axes[e][0] * d[0],
                    centers[e][1] + axes[e][1] * d[1],
                    centers[e][2] + axes[e][2] * d[2],
                ]);
            }
        }
        ObjectKind::BoxSurface => {
            let half = [0.8, 0.65, 0.5];
            for _ in 0..n {
                let face = rng.gen_range(0..6usize);
                let axis = face / 2;
                let sign = if face % 2 == 0 { 1.0 } else { -1.0 };
                let mut p = [
                    rng.gen_range(-half[0]..half[0]),
                    rng.gen_range(-half[1]..half[1]),
                    rng.gen_range(-half[2]..half[2]),
                ];
                p[axis] = sign * half[axis];
                pts.push(p);
            }
        }
    }

    // approximate inter-point spacing on the surface drives the scales
    let area = match spec.kind {
        ObjectKind::SphereShell => 4.0 * std::f64::consts::PI,
        ObjectKind::EllipsoidCluster => 4.0 * std::f64::consts::PI * 0.16 * 4.0,
        ObjectKind::BoxSurface => 2.0 * (0.8 * 0.65 + 0.65 * 0.5 + 0.8 * 0.5) * 4.0,
    };
    let spacing = (area / n as f64).sqrt();

    let mut positions = Tensor::zeros(&[n, 3]);
    let mut scales = Tensor::zeros(&[n, 3]);
    let mut rotations = Tensor::zeros(&[n, 4]);
    let mut opacities = Tensor::zeros(&[n]);
    let mut sh = Tensor::zeros(&[n, 3]);
    for i in 0..n {
        for a in 0..3 {
            positions.set2(i, a, real(pts[i][a]));
            scales.set2(i, a, real(spacing * rng.gen_range(0.5..1.4)));
        }
        let q = random_quat(&mut rng);
        for a in 0..4 {
            rotations.set2(i, a, real(q[a]));
        }
        opacities.data_mut()[i] = real(rng.gen_range(0.6..1.0));
        let rgb = field.eval(pts[i]);
        for c in 0..3 {
            sh.set2(i, c, real((rgb[c] - 0.5) / SH_C0));
        }
    }
    GaussianCloud::new(positions, scales, rotations, opacities, sh, 0)
        .expect("synthetic cloud is consistent")
}
