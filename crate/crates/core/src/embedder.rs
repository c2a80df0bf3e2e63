//! Point-based residual embedding network: voxel grouping over normalized
//! positions, pooled cell features, per-point MLPs, and a saturated,
//! group-rescaled residual head.

use rand::Rng;
use serde::{Deserialize, Serialize};
use splatmark_autograd::ops::{concat_cols, gather_rows, linear, mul_const, relu, segment_max, tanh};
use splatmark_autograd::{real, Real, Tape, Tensor, Var};

use crate::cloud::{feature_dim, GROUPS};
use crate::error::{Error, Result};

pub const MESSAGE_LENGTHS: [usize; 6] = [4, 8, 16, 32, 64, 128];

/// Binary watermark payload.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Message {
    bits: Vec<u8>,
}

impl Message {
    pub fn new(bits: Vec<u8>) -> Result<Self> {
        if !MESSAGE_LENGTHS.contains(&bits.len()) {
            return Err(Error::Config(format!(
                "message length {} not in {:?}",
                bits.len(),
                MESSAGE_LENGTHS
            )));
        }
        if bits.iter().any(|&b| b > 1) {
            return Err(Error::Config("message bits must be 0 or 1".into()));
        }
        Ok(Self { bits })
    }

    pub fn parse(s: &str) -> Result<Self> {
        let bits: Result<Vec<u8>> = s
            .chars()
            .map(|c| match c {
                '0' => Ok(0),
                '1' => Ok(1),
                other => Err(Error::Config(format!("invalid message character '{other}'"))),
            })
            .collect();
        Self::new(bits?)
    }

    pub fn random<R: Rng>(len: usize, rng: &mut R) -> Result<Self> {
        let bits = (0..len).map(|_| rng.gen_range(0..2u8)).collect();
        Self::new(bits)
    }

    pub fn len(&self) -> usize {
        self.bits.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bits.is_empty()
    }

    pub fn bits(&self) -> &[u8] {
        &self.bits
    }

    pub fn as_string(&self) -> String {
        self.bits.iter().map(|b| if *b == 1 { '1' } else { '0' }).collect()
    }

    /// Bits as 0/1 scalars.
    pub fn to_zero_one<T: Real>(&self) -> Tensor<T> {
        Tensor::new(
            &[self.bits.len()],
            self.bits.iter().map(|&b| real(b as f64)).collect(),
        )
    }

    /// Bits mapped to {-1, +1} for zero-centered network inputs.
    pub fn to_pm_one<T: Real>(&self) -> Tensor<T> {
        Tensor::new(
            &[self.bits.len()],
            self.bits.iter().map(|&b| real(b as f64 * 2.0 - 1.0)).collect(),
        )
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbedderConfig {
    pub num_blocks: usize,
    pub hidden_dim: usize,
    /// Voxel edge length in normalized coordinates ([-1,1] cube).
    pub cell_size: f64,
    /// Residual rescale factors per property group (position, scale,
    /// rotation, opacity, color).
    pub rescale: [f64; 5],
}

impl Default for EmbedderConfig {
    fn default() -> Self {
        Self {
            num_blocks: 2,
            hidden_dim: 64,
            cell_size: 0.25,
            rescale: [0.02, 0.05, 0.05, 0.2, 0.2],
        }
    }
}

impl EmbedderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_blocks < 1 {
            return Err(Error::Config("num_blocks must be >= 1".into()));
        }
        if self.hidden_dim < 8 {
            return Err(Error::Config("hidden_dim must be >= 8".into()));
        }
        if self.cell_size <= 0.0 || self.cell_size > 2.0 {
            return Err(Error::Config("cell_size must lie in (0, 2]".into()));
        }
        if self.rescale.iter().any(|&r| r <= 0.0) {
            return Err(Error::Config("rescale factors must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BlockParams<T: Real> {
    pub cell_w: Tensor<T>,
    pub cell_b: Tensor<T>,
    pub point_w: Tensor<T>,
    pub point_b: Tensor<T>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EmbedderParams<T: Real> {
    pub blocks: Vec<BlockParams<T>>,
    pub head_w: Tensor<T>,
    pub head_b: Tensor<T>,
}

fn he_init<T: Real, R: Rng>(shape: &[usize], fan_in: usize, gain: f64, rng: &mut R) -> Tensor<T> {
    let std = gain * (1.0 / fan_in as f64).sqrt();
    let mut t = Tensor::zeros(shape);
    for v in t.data_mut() {
        let x: f64 = rng.sample(rand_distr::StandardNormal);
        *v = real(x * std);
    }
    t
}

impl<T: Real> EmbedderParams<T> {
    pub fn init<R: Rng>(cfg: &EmbedderConfig, sh_order: usize, lb: usize, rng: &mut R) -> Self {
        let d_g = feature_dim(sh_order);
        let h = cfg.hidden_dim;
        let mut blocks = Vec::with_capacity(cfg.num_blocks);
        let mut in_dim = d_g + lb;
        for _ in 0..cfg.num_blocks {
            blocks.push(BlockParams {
                cell_w: he_init(&[in_dim, h], in_dim, std::f64::consts::SQRT_2, rng),
                cell_b: Tensor::zeros(&[h]),
                point_w: he_init(&[in_dim + h, h], in_dim + h, std::f64::consts::SQRT_2, rng),
                point_b: Tensor::zeros(&[h]),
            });
            in_dim = h;
        }
        Self {
            blocks,
            head_w: he_init(&[h, d_g], h, 0.5, rng),
            head_b: Tensor::zeros(&[d_g]),
        }
    }

    pub fn tensors(&self) -> Vec<&Tensor<T>> {
        let mut out = Vec::new();
        for b in &self.blocks {
            out.extend([&b.cell_w, &b.cell_b, &b.point_w, &b.point_b]);
        }
        out.extend([&self.head_w, &self.head_b]);
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor<T>> {
        let mut out = Vec::new();
        for b in &mut self.blocks {
            out.extend([&mut b.cell_w, &mut b.cell_b, &mut b.point_w, &mut b.point_b]);
        }
        out.extend([&mut self.head_w, &mut self.head_b]);
        out
    }
}

/// Parameter tensors lifted onto a tape: leaves when training, constants at
/// embedding time.
pub struct EmbedderVars<'t, T: Real> {
    pub blocks: Vec<[Var<'t, T>; 4]>,
    pub head_w: Var<'t, T>,
    pub head_b: Var<'t, T>,
}

impl<'t, T: Real> EmbedderVars<'t, T> {
    pub fn new(
        tape: &'t Tape<T>,
        params: &EmbedderParams<T>,
        trainable: bool,
    ) -> Self {
        let lift = |t: &Tensor<T>| {
            if trainable {
                tape.leaf(t.clone())
            } else {
                tape.constant(t.clone())
            }
        };
        Self {
            blocks: params
                .blocks
                .iter()
                .map(|b| [lift(&b.cell_w), lift(&b.cell_b), lift(&b.point_w), lift(&b.point_b)])
                .collect(),
            head_w: lift(&params.head_w),
            head_b: lift(&params.head_b),
        }
    }

    pub fn all(&self) -> Vec<Var<'t, T>> {
        let mut out = Vec::new();
        for b in &self.blocks {
            out.extend_from_slice(b);
        }
        out.extend([self.head_w, self.head_b]);
        out
    }
}

/// Deterministic voxel assignment over normalized positions: returns compact
/// segment ids (sorted by voxel key) and the segment count.
pub fn voxel_segments<T: Real>(features: &Tensor<T>, cell_size: f64) -> (Vec<usize>, usize) {
    let n = features.rows();
    let cells_per_axis = (2.0 / cell_size).ceil() as i64;
    let mut keys = Vec::with_capacity(n);
    for r in 0..n {
        let p = &features.row(r)[0..3];
        let mut key = 0i64;
        for &c in p {
            let idx = (((Real::as_f64(c) + 1.0) / cell_size).floor() as i64)
                .clamp(0, cells_per_axis - 1);
            key = key * cells_per_axis + idx;
        }
        keys.push(key);
    }
    let mut sorted: Vec<i64> = keys.clone();
    sorted.sort_unstable();
    sorted.dedup();
    let seg = keys
        .iter()
        .map(|k| sorted.binary_search(k).expect("key present"))
        .collect();
    (seg, sorted.len())
}

/// The residual head: delta in [-rescale, rescale] per group column.
pub fn embed_features_var<'t, T: Real>(
    tape: &'t Tape<T>,
    x_tilde: Var<'t, T>,
    msg: &Message,
    cfg: &EmbedderConfig,
    params: &EmbedderVars<'t, T>,
    sh_order: usize,
    lb: usize,
) -> Result<Var<'t, T>> {
    if msg.len() != lb {
        return Err(Error::Config(format!(
            "message length {} does not match the trained length {lb}",
            msg.len()
        )));
    }
    let (n, d_g) = {
        let v = tape.value(x_tilde);
        (v.rows(), v.cols())
    };
    if d_g != feature_dim(sh_order) {
        return Err(Error::Shape(format!(
            "feature width {d_g} does not match sh order {sh_order}"
        )));
    }
    let (seg, n_cells) = {
        let v = tape.value(x_tilde);
        voxel_segments(&v, cfg.cell_size)
    };

    // replicate the +-1 message across primitives
    let pm = msg.to_pm_one::<T>();
    let mut msg_rows = Tensor::zeros(&[n, lb]);
    for r in 0..n {
        msg_rows.row_mut(r).copy_from_slice(pm.data());
    }

    let mut f = concat_cols(&[x_tilde, tape.constant(msg_rows)]);
    for [cw, cb, pw, pb] in &params.blocks {
        let pooled = segment_max(f, &seg, n_cells);
        let cell = relu(linear(pooled, *cw, *cb));
        let back = gather_rows(cell, &seg);
        f = relu(linear(concat_cols(&[f, back]), *pw, *pb));
    }
    let raw = tanh(linear(f, params.head_w, params.head_b));

    let mut scale_cols = Tensor::zeros(&[n, d_g]);
    for g in GROUPS {
        let cols = g.columns(sh_order);
        let s = real::<T>(cfg.rescale[g.index()]);
        for r in 0..n {
            for v in &mut scale_cols.row_mut(r)[cols.clone()] {
                *v = s;
            }
        }
    }
    Ok(mul_const(raw, &scale_cols))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cloud::normalize;
    use crate::rng::{derive, Stream};
    use crate::synth::{synth_cloud, ObjectKind, SynthSpec};
    use splatmark_autograd::ops::{mean_all, mul};

    fn setup(n: usize, seed: u64) -> (Tensor<f64>, EmbedderConfig, EmbedderParams<f64>) {
        let spec = SynthSpec::new(ObjectKind::SphereShell, n.max(50), seed).unwrap();
        let mut cloud = synth_cloud::<f64>(&spec);
        if n < cloud.len() {
            cloud = cloud.select(&(0..n).collect::<Vec<_>>()).unwrap();
        }
        let norm = normalize(&cloud).unwrap();
        let cfg = EmbedderConfig::default();
        let params = EmbedderParams::init(&cfg, 0, 8, &mut derive(seed, Stream::Init, 0));
        (norm.features, cfg, params)
    }

    #[test]
    fn residual_shape_and_saturation_bound() {
        for n in [1usize, 3, 120] {
            let (features, cfg, params) = setup(n, 21);
            let tape: Tape<f64> = Tape::new();
            let x = tape.constant(features);
            let pv = EmbedderVars::new(&tape, &params, false);
            let msg = Message::parse("10110100").unwrap();
            let delta = embed_features_var(&tape, x, &msg, &cfg, &pv, 0, 8).unwrap();
            let v = tape.value_clone(delta);
            assert_eq!(v.shape(), &[n, feature_dim(0)]);
            for g in GROUPS {
                let bound = cfg.rescale[g.index()];
                for r in 0..n {
                    for c in g.columns(0) {
                        assert!(v.at2(r, c).abs() <= bound);
                    }
                }
            }
        }
    }

    #[test]
    fn delta_depends_on_the_message() {
        let (features, cfg, params) = setup(90, 22);
        let tape: Tape<f64> = Tape::new();
        let pv = EmbedderVars::new(&tape, &params, false);
        let x = tape.constant(features.clone());
        let m1 = Message::parse("10110100").unwrap();
        let m2 = Message::parse("10110101").unwrap();
        let d1 = embed_features_var(&tape, x, &m1, &cfg, &pv, 0, 8).unwrap();
        let x2 = tape.constant(features);
        let d2 = embed_features_var(&tape, x2, &m2, &cfg, &pv, 0, 8).unwrap();
        let v1 = tape.value_clone(d1);
        let v2 = tape.value_clone(d2);
        let max_diff = v1
            .data()
            .iter()
            .zip(v2.data())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        assert!(max_diff > 0.0, "residual must be message-dependent");
    }

    #[test]
    fn permutation_equivariance() {
        let n = 100;
        let (features, cfg, params) = setup(n, 23);
        let msg = Message::parse("01100011").unwrap();
        let tape: Tape<f64> = Tape::new();
        let pv = EmbedderVars::new(&tape, &params, false);
        let x = tape.constant(features.clone());
        let d = embed_features_var(&tape, x, &msg, &cfg, &pv, 0, 8).unwrap();
        let base = tape.value_clone(d);

        let perm: Vec<usize> = (0..n).map(|i| (i * 37 + 11) % n).collect();
        let mut permuted = Tensor::zeros(&[n, features.cols()]);
        for (dst, &src) in perm.iter().enumerate() {
            permuted.row_mut(dst).copy_from_slice(features.row(src));
        }
        let xp = tape.constant(permuted);
        let dp = embed_features_var(&tape, xp, &msg, &cfg, &pv, 0, 8).unwrap();
        let got = tape.value_clone(dp);
        for (dst, &src) in perm.iter().enumerate() {
            for c in 0..features.cols() {
                assert!(
                    (got.at2(dst, c) - base.at2(src, c)).abs() < 1e-12,
                    "row {dst} col {c}"
                );
            }
        }
    }

    #[test]
    fn message_length_mismatch_is_config_error() {
        let (features, cfg, params) = setup(60, 24);
        let tape: Tape<f64> = Tape::new();
        let pv = EmbedderVars::new(&tape, &params, false);
        let x = tape.constant(features);
        let msg = Message::parse("1011").unwrap();
        assert!(matches!(
            embed_features_var(&tape, x, &msg, &cfg, &pv, 0, 8),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn gradients_reach_every_parameter_tensor() {
        let (features, cfg, params) = setup(80, 25);
        let tape: Tape<f64> = Tape::new();
        let pv = EmbedderVars::new(&tape, &params, true);
        let x = tape.constant(features);
        let msg = Message::parse("10110100").unwrap();
        let delta = embed_features_var(&tape, x, &msg, &cfg, &pv, 0, 8).unwrap();
        let loss = mean_all(mul(delta, delta));
        tape.backward(loss);
        assert!(loss.value_clone().data()[0] > 0.0);
        for (i, var) in pv.all().into_iter().enumerate() {
            let g = var.grad().expect("gradient present");
            assert!(
                g.data().iter().any(|&v| v != 0.0),
                "parameter tensor {i} received no gradient"
            );
        }
    }
}
