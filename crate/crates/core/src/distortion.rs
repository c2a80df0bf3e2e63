//! Differentiable distortion layer: 3D primitive removal on clouds and 2D
//! degradations on rendered images. Sampled uniformly during robust
//! training, applied with explicit specs during evaluation.

use rand::Rng;
use serde::{Deserialize, Serialize};
use splatmark_autograd::ops::{add_const, clamp, mul_const};
use splatmark_autograd::tape::BackwardOp;
use splatmark_autograd::{real, Real, Tape, Tensor, Var};

use crate::cloud::GaussianCloud;
use crate::error::{Error, Result};
use crate::image::RenderedImage;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum DistortionKind {
    Identity,
    Crop2d,
    Dropout2d,
    Jpeg2d,
    Rotate2d,
    Noise2d,
    Dropout3d,
    Cropout3d,
}

impl DistortionKind {
    pub fn name(self) -> &'static str {
        match self {
            Self::Identity => "identity",
            Self::Crop2d => "crop2d",
            Self::Dropout2d => "dropout2d",
            Self::Jpeg2d => "jpeg2d",
            Self::Rotate2d => "rotate2d",
            Self::Noise2d => "noise2d",
            Self::Dropout3d => "dropout3d",
            Self::Cropout3d => "cropout3d",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Ok(match s {
            "identity" => Self::Identity,
            "crop2d" => Self::Crop2d,
            "dropout2d" => Self::Dropout2d,
            "jpeg2d" => Self::Jpeg2d,
            "rotate2d" => Self::Rotate2d,
            "noise2d" => Self::Noise2d,
            "dropout3d" => Self::Dropout3d,
            "cropout3d" => Self::Cropout3d,
            other => return Err(Error::Config(format!("unknown distortion \"{other}\""))),
        })
    }

    pub fn is_3d(self) -> bool {
        matches!(self, Self::Dropout3d | Self::Cropout3d)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DistortionSpec {
    pub kind: DistortionKind,
    /// Retained area/volume fraction for the crop kinds.
    pub crop_ratio: f64,
    /// Removal probability for the dropout kinds.
    pub dropout_p: f64,
    /// JPEG quality.
    pub quality: u8,
    /// Rotation bound in degrees (sampled uniformly in [-max, +max]).
    pub max_angle_deg: f64,
    /// Additive Gaussian noise sigma.
    pub sigma: f64,
}

impl DistortionSpec {
    pub fn new(kind: DistortionKind) -> Self {
        // paper-table parameters as defaults
        Self {
            kind,
            crop_ratio: 0.4,
            dropout_p: match kind {
                DistortionKind::Dropout3d => 0.2,
                _ => 0.1,
            },
            quality: 50,
            max_angle_deg: 30.0,
            sigma: 0.06,
        }
    }

    pub fn identity() -> Self {
        Self::new(DistortionKind::Identity)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.crop_ratio > 0.0 && self.crop_ratio <= 1.0) {
            return Err(Error::Config(format!("crop ratio {} outside (0,1]", self.crop_ratio)));
        }
        if !(0.0..=1.0).contains(&self.dropout_p) {
            return Err(Error::Config(format!("dropout p {} outside [0,1]", self.dropout_p)));
        }
        if !(1..=100).contains(&self.quality) {
            return Err(Error::Config(format!("JPEG quality {} outside [1,100]", self.quality)));
        }
        if self.sigma < 0.0 {
            return Err(Error::Config("noise sigma must be non-negative".into()));
        }
        Ok(())
    }
}

/// Training phases for the sampler.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DistortionPhase {
    NoDistortion,
    Robust,
}

pub const ROBUST_KINDS: [DistortionKind; 8] = [
    DistortionKind::Identity,
    DistortionKind::Crop2d,
    DistortionKind::Dropout2d,
    DistortionKind::Jpeg2d,
    DistortionKind::Rotate2d,
    DistortionKind::Noise2d,
    DistortionKind::Dropout3d,
    DistortionKind::Cropout3d,
];

/// Uniform over identity plus the seven distortion kinds at their
/// paper-table parameters.
pub fn sample_distortion<R: Rng>(rng: &mut R, phase: DistortionPhase) -> DistortionSpec {
    match phase {
        DistortionPhase::NoDistortion => DistortionSpec::identity(),
        DistortionPhase::Robust => {
            let kind = ROBUST_KINDS[rng.gen_range(0..ROBUST_KINDS.len())];
            DistortionSpec::new(kind)
        }
    }
}

// ---------------------------------------------------------------------------
// 3D distortions
// ---------------------------------------------------------------------------

/// Row indices kept by a 3D distortion, plus the degeneracy flag set when
/// everything was removed and the nearest-to-centroid primitive was retained.
pub fn keep_indices_3d<T: Real, R: Rng>(
    positions: &Tensor<T>,
    spec: &DistortionSpec,
    rng: &mut R,
) -> Result<(Vec<usize>, bool)> {
    spec.validate()?;
    let n = positions.rows();
    let mut keep: Vec<usize> = match spec.kind {
        DistortionKind::Identity => (0..n).collect(),
        DistortionKind::Dropout3d => (0..n)
            .filter(|_| rng.gen_range(0.0..1.0) >= spec.dropout_p)
            .collect(),
        DistortionKind::Cropout3d => {
            let mut lo = [T::infinity(); 3];
            let mut hi = [T::neg_infinity(); 3];
            for i in 0..n {
                let p = positions.row(i);
                for a in 0..3 {
                    lo[a] = lo[a].min(p[a]);
                    hi[a] = hi[a].max(p[a]);
                }
            }
            let ratio = real::<T>(spec.crop_ratio.powf(1.0 / 3.0));
            let mut box_lo = [T::zero(); 3];
            let mut box_hi = [T::zero(); 3];
            for a in 0..3 {
                let extent = hi[a] - lo[a];
                let side = extent * ratio;
                // center constrained so the box stays inside the bounding box
                let slack = extent - side;
                let c = lo[a]
                    + side * real(0.5)
                    + slack * real::<T>(rng.gen_range(0.0..1.0));
                box_lo[a] = c - side * real(0.5);
                box_hi[a] = c + side * real(0.5);
            }
            (0..n)
                .filter(|&i| {
                    let p = positions.row(i);
                    (0..3).all(|a| p[a] >= box_lo[a] && p[a] <= box_hi[a])
                })
                .collect()
        }
        other => {
            return Err(Error::Config(format!(
                "{} is not a 3D distortion",
                other.name()
            )))
        }
    };
    let mut degenerate = false;
    if keep.is_empty() {
        degenerate = true;
        let mut c = [T::zero(); 3];
        for i in 0..n {
            let p = positions.row(i);
            for a in 0..3 {
                c[a] += p[a];
            }
        }
        for v in c.iter_mut() {
            *v = *v / real(n as f64);
        }
        let mut best = 0usize;
        let mut best_d = T::infinity();
        for i in 0..n {
            let p = positions.row(i);
            let d = (0..3).map(|a| (p[a] - c[a]) * (p[a] - c[a])).fold(T::zero(), |x, y| x + y);
            if d < best_d {
                best_d = d;
                best = i;
            }
        }
        keep = vec![best];
    }
    Ok((keep, degenerate))
}

/// Apply a 3D spec (or identity) to a plain cloud.
pub fn distort3d<T: Real, R: Rng>(
    cloud: &GaussianCloud<T>,
    spec: &DistortionSpec,
    rng: &mut R,
) -> Result<(GaussianCloud<T>, bool)> {
    if spec.kind == DistortionKind::Identity {
        return Ok((cloud.clone(), false));
    }
    let (keep, degenerate) = keep_indices_3d(&cloud.positions, spec, rng)?;
    Ok((cloud.select(&keep)?, degenerate))
}

// ---------------------------------------------------------------------------
// 2D distortions (on-tape)
// ---------------------------------------------------------------------------

fn image_dims<T: Real>(tape: &Tape<T>, image: Var<'_, T>) -> Result<(usize, usize)> {
    let v = tape.value(image);
    let s = v.shape();
    if s.len() != 3 || s[2] != 3 {
        return Err(Error::Shape(format!("expected [H,W,3] image, got {s:?}")));
    }
    Ok((s[0], s[1]))
}

/// Apply a 2D spec to an image variable. `image_in` (the clean render of the
/// original cloud) is required by dropout2d only.
pub fn distort2d_var<'t, T: Real, R: Rng>(
    tape: &'t Tape<T>,
    image_wm: Var<'t, T>,
    image_in: Option<&Tensor<T>>,
    spec: &DistortionSpec,
    background: [T; 3],
    rng: &mut R,
) -> Result<Var<'t, T>> {
    spec.validate()?;
    let (h, w) = image_dims(tape, image_wm)?;
    match spec.kind {
        DistortionKind::Identity => Ok(image_wm),
        DistortionKind::Crop2d => {
            let area = spec.crop_ratio * (h * w) as f64;
            let side = (area.sqrt().round() as usize).clamp(1, h.min(w));
            let y0 = rng.gen_range(0..=(h - side));
            let x0 = rng.gen_range(0..=(w - side));
            let mut mask = Tensor::zeros(&[h, w, 3]);
            let mut bg_fill = Tensor::zeros(&[h, w, 3]);
            for y in 0..h {
                for x in 0..w {
                    let inside = y >= y0 && y < y0 + side && x >= x0 && x < x0 + side;
                    for c in 0..3 {
                        let idx = (y * w + x) * 3 + c;
                        mask.data_mut()[idx] = if inside { T::one() } else { T::zero() };
                        bg_fill.data_mut()[idx] =
                            if inside { T::zero() } else { background[c] };
                    }
                }
            }
            Ok(add_const(mul_const(image_wm, &mask), &bg_fill))
        }
        DistortionKind::Dropout2d => {
            let image_in = image_in.ok_or_else(|| {
                Error::Config("dropout2d requires the clean render".into())
            })?;
            if image_in.shape() != [h, w, 3] {
                return Err(Error::Shape("dropout2d image shape mismatch".into()));
            }
            let mut keep = Tensor::zeros(&[h, w, 3]);
            let mut fill = Tensor::zeros(&[h, w, 3]);
            for px in 0..h * w {
                let replace = rng.gen_range(0.0..1.0) < spec.dropout_p;
                for c in 0..3 {
                    let idx = px * 3 + c;
                    keep.data_mut()[idx] = if replace { T::zero() } else { T::one() };
                    fill.data_mut()[idx] =
                        if replace { image_in.data()[idx] } else { T::zero() };
                }
            }
            Ok(add_const(mul_const(image_wm, &keep), &fill))
        }
        DistortionKind::Jpeg2d => {
            let masked = jpeg_surrogate(tape, image_wm, spec.quality)?;
            Ok(clamp(masked, 0.0, 1.0))
        }
        DistortionKind::Rotate2d => {
            let angle = rng.gen_range(-spec.max_angle_deg..=spec.max_angle_deg);
            Ok(rotate_bilinear(tape, image_wm, angle, background))
        }
        DistortionKind::Noise2d => {
            if spec.sigma == 0.0 {
                return Ok(image_wm);
            }
            let mut noise = Tensor::zeros(&[h, w, 3]);
            for v in noise.data_mut() {
                let x: f64 = rng.sample(rand_distr::StandardNormal);
                *v = real(x * spec.sigma);
            }
            Ok(clamp(add_const(image_wm, &noise), 0.0, 1.0))
        }
        other => Err(Error::Config(format!("{} is not a 2D distortion", other.name()))),
    }
}

/// Plain-image wrapper around the differentiable path.
pub fn distort2d<T: Real, R: Rng>(
    image_wm: &RenderedImage<T>,
    image_in: Option<&RenderedImage<T>>,
    spec: &DistortionSpec,
    background: [T; 3],
    rng: &mut R,
) -> Result<RenderedImage<T>> {
    let tape: Tape<T> = Tape::new();
    let img = tape.constant(image_wm.data.clone());
    let out = distort2d_var(
        &tape,
        img,
        image_in.map(|i| &i.data),
        spec,
        background,
        rng,
    )?;
    RenderedImage::new(image_wm.height, image_wm.width, tape.value_clone(out))
}

// ---------------------------------------------------------------------------
// JPEG surrogate: 8x8 blockwise DCT with quality-scaled coefficient masking
// ---------------------------------------------------------------------------

#[rustfmt::skip]
const JPEG_LUMA_TABLE: [f64; 64] = [
    16.0, 11.0, 10.0, 16.0,  24.0,  40.0,  51.0,  61.0,
    12.0, 12.0, 14.0, 19.0,  26.0,  58.0,  60.0,  55.0,
    14.0, 13.0, 16.0, 24.0,  40.0,  57.0,  69.0,  56.0,
    14.0, 17.0, 22.0, 29.0,  51.0,  87.0,  80.0,  62.0,
    18.0, 22.0, 37.0, 56.0,  68.0, 109.0, 103.0,  77.0,
    24.0, 35.0, 55.0, 64.0,  81.0, 104.0, 113.0,  92.0,
    49.0, 64.0, 78.0, 87.0, 103.0, 121.0, 120.0, 101.0,
    72.0, 92.0, 95.0, 98.0, 112.0, 100.0, 103.0,  99.0,
];

/// Quantization steps for a quality setting, standard scaling rule.
pub fn jpeg_steps(quality: u8) -> [f64; 64] {
    let q = quality.clamp(1, 100) as f64;
    let scale = if q < 50.0 { 5000.0 / q } else { 200.0 - 2.0 * q };
    let mut steps = [0.0; 64];
    for (s, &t) in steps.iter_mut().zip(JPEG_LUMA_TABLE.iter()) {
        *s = ((t * scale + 50.0) / 100.0).floor().clamp(1.0, 255.0);
    }
    steps
}

fn dct_matrix() -> [f64; 64] {
    let mut d = [0.0; 64];
    for k in 0..8 {
        let ck = if k == 0 { (1.0f64 / 8.0).sqrt() } else { 0.5 };
        for n in 0..8 {
            d[k * 8 + n] =
                ck * (std::f64::consts::PI * (2.0 * n as f64 + 1.0) * k as f64 / 16.0).cos();
        }
    }
    d
}

/// forward 2D DCT of an 8x8 block: D X D^T
fn dct2(block: &[f64; 64], d: &[f64; 64], out: &mut [f64; 64]) {
    let mut tmp = [0.0; 64];
    for i in 0..8 {
        for j in 0..8 {
            let mut acc = 0.0;
            for k in 0..8 {
                acc += d[i * 8 + k] * block[k * 8 + j];
            }
            tmp[i * 8 + j] = acc;
        }
    }
    for i in 0..8 {
        for j in 0..8 {
            let mut acc = 0.0;
            for k in 0..8 {
                acc += tmp[i * 8 + k] * d[j * 8 + k];
            }
            out[i * 8 + j] = acc;
        }
    }
}

/// inverse 2D DCT: D^T C D
fn idct2(coeff: &[f64; 64], d: &[f64; 64], out: &mut [f64; 64]) {
    let mut tmp = [0.0; 64];
    for i in 0..8 {
        for j in 0..8 {
            let mut acc = 0.0;
            for k in 0..8 {
                acc += d[k * 8 + i] * coeff[k * 8 + j];
            }
            tmp[i * 8 + j] = acc;
        }
    }
    for i in 0..8 {
        for j in 0..8 {
            let mut acc = 0.0;
            for k in 0..8 {
                acc += tmp[i * 8 + k] * d[k * 8 + j];
            }
            out[i * 8 + j] = acc;
        }
    }
}

struct JpegBackward<T> {
    masks: Vec<u8>, // one bit per coefficient of each processed block
    h: usize,
    w: usize,
    _marker: std::marker::PhantomData<T>,
}

/// Apply the masked-DCT map; shared by forward (with mask construction) and
/// backward (mask fixed) because the map is self-adjoint.
fn jpeg_apply<T: Real>(
    data: &[T],
    h: usize,
    w: usize,
    quality: u8,
    masks: Option<&[u8]>,
    out_masks: Option<&mut Vec<u8>>,
    shift: bool,
) -> Vec<T> {
    let d = dct_matrix();
    let steps = jpeg_steps(quality);
    let mut out: Vec<T> = data.to_vec();
    let mut collected = out_masks;
    let (bh, bw) = (h / 8, w / 8);
    let mut block = [0.0f64; 64];
    let mut coeff = [0.0f64; 64];
    let mut back = [0.0f64; 64];
    let mut block_idx = 0usize;
    for c in 0..3 {
        for by in 0..bh {
            for bx in 0..bw {
                for y in 0..8 {
                    for x in 0..8 {
                        let idx = (((by * 8 + y) * w) + bx * 8 + x) * 3 + c;
                        let v = Real::as_f64(data[idx]);
                        block[y * 8 + x] = if shift { v * 255.0 - 128.0 } else { v * 255.0 };
                    }
                }
                dct2(&block, &d, &mut coeff);
                match masks {
                    Some(m) => {
                        for (i, cv) in coeff.iter_mut().enumerate() {
                            if m[block_idx * 64 + i] == 0 {
                                *cv = 0.0;
                            }
                        }
                    }
                    None => {
                        if let Some(store) = collected.as_deref_mut() {
                            for (i, cv) in coeff.iter_mut().enumerate() {
                                let keep = steps[i] <= 2.0 * cv.abs();
                                store.push(u8::from(keep));
                                if !keep {
                                    *cv = 0.0;
                                }
                            }
                        }
                    }
                }
                idct2(&coeff, &d, &mut back);
                for y in 0..8 {
                    for x in 0..8 {
                        let idx = (((by * 8 + y) * w) + bx * 8 + x) * 3 + c;
                        let v = back[y * 8 + x];
                        out[idx] = real(if shift { (v + 128.0) / 255.0 } else { v / 255.0 });
                    }
                }
                block_idx += 1;
            }
        }
    }
    out
}

impl<T: Real> BackwardOp<T> for JpegBackward<T> {
    fn backward(
        &self,
        g: &Tensor<T>,
        _inputs: &[&Tensor<T>],
        _out: &Tensor<T>,
        needs: &[bool],
    ) -> Vec<Option<Tensor<T>>> {
        let d = needs[0].then(|| {
            // the masked transform is self-adjoint up to the affine shift,
            // which contributes nothing to the gradient
            let data =
                jpeg_apply::<T>(g.data(), self.h, self.w, 50, Some(&self.masks), None, false);
            Tensor::new(&[self.h, self.w, 3], data)
        });
        vec![d]
    }
}

/// Differentiable JPEG stand-in. Trailing rows/columns that do not fill an
/// 8x8 block pass through unchanged.
pub fn jpeg_surrogate<'t, T: Real>(
    tape: &'t Tape<T>,
    image: Var<'t, T>,
    quality: u8,
) -> Result<Var<'t, T>> {
    let (h, w) = image_dims(tape, image)?;
    if h < 8 || w < 8 {
        return Err(Error::Shape(format!("image {h}x{w} smaller than a JPEG block")));
    }
    let (value, masks) = {
        let v = tape.value(image);
        let mut masks = Vec::with_capacity((h / 8) * (w / 8) * 64 * 3);
        let data = jpeg_apply(v.data(), h, w, quality, None, Some(&mut masks), true);
        (Tensor::new(&[h, w, 3], data), masks)
    };
    Ok(tape.custom(
        &[image],
        value,
        Box::new(JpegBackward::<T> { masks, h, w, _marker: std::marker::PhantomData }),
    ))
}

// ---------------------------------------------------------------------------
// bilinear rotation
// ---------------------------------------------------------------------------

struct RotateBackward {
    // per output pixel: 4 (source pixel index or MAX, weight)
    taps: Vec<[(u32, f64); 4]>,
    h: usize,
    w: usize,
}

impl<T: Real> BackwardOp<T> for RotateBackward {
    fn backward(
        &self,
        g: &Tensor<T>,
        _inputs: &[&Tensor<T>],
        _out: &Tensor<T>,
        needs: &[bool],
    ) -> Vec<Option<Tensor<T>>> {
        let d = needs[0].then(|| {
            let mut t = Tensor::zeros(&[self.h, self.w, 3]);
            for (px, taps) in self.taps.iter().enumerate() {
                for &(src, wgt) in taps {
                    if src == u32::MAX || wgt == 0.0 {
                        continue;
                    }
                    let wgt = real::<T>(wgt);
                    for c in 0..3 {
                        t.data_mut()[src as usize * 3 + c] += g.data()[px * 3 + c] * wgt;
                    }
                }
            }
            t
        });
        vec![d]
    }
}

/// Rotate about the image center with bilinear resampling; out-of-frame
/// samples use the background color.
pub fn rotate_bilinear<'t, T: Real>(
    tape: &'t Tape<T>,
    image: Var<'t, T>,
    angle_deg: f64,
    background: [T; 3],
) -> Var<'t, T> {
    let (h, w) = {
        let v = tape.value(image);
        (v.shape()[0], v.shape()[1])
    };
    let theta = angle_deg.to_radians();
    let (sin, cos) = theta.sin_cos();
    let cy = h as f64 * 0.5;
    let cx = w as f64 * 0.5;

    let mut taps = vec![[(u32::MAX, 0.0f64); 4]; h * w];
    let mut value = Tensor::zeros(&[h, w, 3]);
    {
        let v = tape.value(image);
        let src_data = v.data();
        for y in 0..h {
            for x in 0..w {
                // inverse map: rotate the output pixel center by -theta
                let ox = x as f64 + 0.5 - cx;
                let oy = y as f64 + 0.5 - cy;
                let sx = cos * ox + sin * oy + cx - 0.5;
                let sy = -sin * ox + cos * oy + cy - 0.5;
                let x0 = sx.floor();
                let y0 = sy.floor();
                let fx = sx - x0;
                let fy = sy - y0;
                let corners = [
                    (x0, y0, (1.0 - fx) * (1.0 - fy)),
                    (x0 + 1.0, y0, fx * (1.0 - fy)),
                    (x0, y0 + 1.0, (1.0 - fx) * fy),
                    (x0 + 1.0, y0 + 1.0, fx * fy),
                ];
                let mut px = [0.0f64; 3];
                let slot = &mut taps[y * w + x];
                for (i, &(cxp, cyp, wgt)) in corners.iter().enumerate() {
                    let inside =
                        cxp >= 0.0 && cxp < w as f64 && cyp >= 0.0 && cyp < h as f64;
                    if inside {
                        let src = cyp as usize * w + cxp as usize;
                        slot[i] = (src as u32, wgt);
                        for c in 0..3 {
                            px[c] += wgt * Real::as_f64(src_data[src * 3 + c]);
                        }
                    } else {
                        for c in 0..3 {
                            px[c] += wgt * Real::as_f64(background[c]);
                        }
                    }
                }
                for c in 0..3 {
                    value.data_mut()[(y * w + x) * 3 + c] = real(px[c]);
                }
            }
        }
    }
    tape.custom(&[image], value, Box::new(RotateBackward { taps, h, w }))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{derive, Stream};
    use crate::synth::{synth_cloud, ObjectKind, SynthSpec};
    use splatmark_autograd::ops::mean_all;

    fn random_image(h: usize, w: usize, seed: u64) -> Tensor<f64> {
        let mut rng = derive(seed, Stream::Data, 1);
        Tensor::new(&[h, w, 3], (0..h * w * 3).map(|_| rng.gen_range(0.0..1.0)).collect())
    }

    #[test]
    fn identity_is_bit_exact() {
        let img = RenderedImage::new(32, 32, random_image(32, 32, 1)).unwrap();
        let out = distort2d(
            &img,
            None,
            &DistortionSpec::identity(),
            [1.0; 3],
            &mut derive(1, Stream::Distortion, 0),
        )
        .unwrap();
        assert_eq!(out.data, img.data);
    }

    #[test]
    fn zero_sigma_noise_is_identity() {
        let img = RenderedImage::new(32, 32, random_image(32, 32, 2)).unwrap();
        let mut spec = DistortionSpec::new(DistortionKind::Noise2d);
        spec.sigma = 0.0;
        let out =
            distort2d(&img, None, &spec, [1.0; 3], &mut derive(2, Stream::Distortion, 0))
                .unwrap();
        assert_eq!(out.data, img.data);
    }

    #[test]
    fn full_dropout_replaces_with_clean_image() {
        let wm = RenderedImage::new(32, 32, random_image(32, 32, 3)).unwrap();
        let clean = RenderedImage::new(32, 32, random_image(32, 32, 4)).unwrap();
        let mut spec = DistortionSpec::new(DistortionKind::Dropout2d);
        spec.dropout_p = 1.0;
        let out = distort2d(
            &wm,
            Some(&clean),
            &spec,
            [1.0; 3],
            &mut derive(3, Stream::Distortion, 0),
        )
        .unwrap();
        assert_eq!(out.data, clean.data);
    }

    #[test]
    fn zero_rotation_is_identity_within_tolerance() {
        let img = RenderedImage::new(32, 32, random_image(32, 32, 5)).unwrap();
        let tape: Tape<f64> = Tape::new();
        let v = tape.constant(img.data.clone());
        let out = rotate_bilinear(&tape, v, 0.0, [0.0; 3]);
        for (a, b) in tape.value_clone(out).data().iter().zip(img.data.data()) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn dropout3d_survivor_count_within_binomial_bound() {
        let spec3 = SynthSpec::new(ObjectKind::SphereShell, 10_000, 6).unwrap();
        let cloud = synth_cloud::<f64>(&spec3);
        let spec = DistortionSpec::new(DistortionKind::Dropout3d);
        assert_eq!(spec.dropout_p, 0.2);
        let (out, degenerate) =
            distort3d(&cloud, &spec, &mut derive(6, Stream::Distortion, 0)).unwrap();
        assert!(!degenerate);
        let expected = 8_000.0;
        let bound = 3.0 * (10_000.0f64 * 0.2 * 0.8).sqrt();
        assert!(
            ((out.len() as f64) - expected).abs() < bound,
            "survivors {}",
            out.len()
        );
    }

    #[test]
    fn full_volume_cropout_keeps_everything() {
        let spec3 = SynthSpec::new(ObjectKind::BoxSurface, 500, 7).unwrap();
        let cloud = synth_cloud::<f64>(&spec3);
        let mut spec = DistortionSpec::new(DistortionKind::Cropout3d);
        spec.crop_ratio = 1.0;
        let (out, degenerate) =
            distort3d(&cloud, &spec, &mut derive(7, Stream::Distortion, 0)).unwrap();
        assert!(!degenerate);
        assert_eq!(out.len(), cloud.len());
        assert_eq!(out.positions, cloud.positions);
    }

    #[test]
    fn all_removed_retains_nearest_to_centroid() {
        let spec3 = SynthSpec::new(ObjectKind::SphereShell, 60, 8).unwrap();
        let cloud = synth_cloud::<f64>(&spec3);
        let mut spec = DistortionSpec::new(DistortionKind::Dropout3d);
        spec.dropout_p = 1.0;
        let (out, degenerate) =
            distort3d(&cloud, &spec, &mut derive(8, Stream::Distortion, 0)).unwrap();
        assert!(degenerate);
        assert_eq!(out.len(), 1);
    }

    #[test]
    fn sampler_frequencies_and_parameters() {
        let mut rng = derive(9, Stream::Distortion, 0);
        assert_eq!(
            sample_distortion(&mut rng, DistortionPhase::NoDistortion).kind,
            DistortionKind::Identity
        );
        let mut counts = std::collections::HashMap::new();
        for _ in 0..8000 {
            let s = sample_distortion(&mut rng, DistortionPhase::Robust);
            *counts.entry(s.kind.name()).or_insert(0usize) += 1;
            if s.kind == DistortionKind::Jpeg2d {
                assert_eq!(s.quality, 50);
            }
            if s.kind == DistortionKind::Dropout3d {
                assert_eq!(s.dropout_p, 0.2);
            }
        }
        for kind in ROBUST_KINDS {
            let freq = counts[kind.name()] as f64 / 8000.0;
            assert!((freq - 0.125).abs() < 0.02, "{}: {freq}", kind.name());
        }
    }

    #[test]
    fn jpeg_quality_table_scaling() {
        let s50 = jpeg_steps(50);
        assert_eq!(s50[0], 16.0);
        let s90 = jpeg_steps(90);
        assert!(s90[0] < s50[0]);
        let s10 = jpeg_steps(10);
        assert!(s10[0] > s50[0]);
    }

    #[test]
    fn every_2d_kind_is_differentiable() {
        let kinds = [
            DistortionKind::Crop2d,
            DistortionKind::Dropout2d,
            DistortionKind::Jpeg2d,
            DistortionKind::Rotate2d,
            DistortionKind::Noise2d,
        ];
        let clean = random_image(32, 32, 10);
        for kind in kinds {
            let tape: Tape<f64> = Tape::new();
            let img = tape.leaf(random_image(32, 32, 11));
            let spec = DistortionSpec::new(kind);
            let mut rng = derive(12, Stream::Distortion, kind as u64);
            let out =
                distort2d_var(&tape, img, Some(&clean), &spec, [0.5; 3], &mut rng).unwrap();
            tape.backward(mean_all(out));
            let g = tape.grad(img).unwrap();
            assert!(
                g.data().iter().all(|v| v.is_finite()),
                "{}: non-finite gradient",
                kind.name()
            );
            assert!(
                g.data().iter().any(|&v| v != 0.0),
                "{}: gradient vanished everywhere",
                kind.name()
            );
        }
    }

    #[test]
    fn fixed_seed_is_deterministic_for_all_kinds() {
        let clean = RenderedImage::new(32, 32, random_image(32, 32, 13)).unwrap();
        let img = RenderedImage::new(32, 32, random_image(32, 32, 14)).unwrap();
        for kind in ROBUST_KINDS {
            if kind.is_3d() {
                continue;
            }
            let spec = DistortionSpec::new(kind);
            let a = distort2d(
                &img,
                Some(&clean),
                &spec,
                [0.5; 3],
                &mut derive(15, Stream::Distortion, kind as u64),
            )
            .unwrap();
            let b = distort2d(
                &img,
                Some(&clean),
                &spec,
                [0.5; 3],
                &mut derive(15, Stream::Distortion, kind as u64),
            )
            .unwrap();
            assert_eq!(a.data, b.data, "{}", kind.name());
        }
    }

    #[test]
    fn jpeg_gradient_matches_finite_differences() {
        let img0 = random_image(16, 16, 16);
        let mut f = |x: &[Tensor<f64>]| {
            let tape: Tape<f64> = Tape::new();
            let img = tape.leaf(x[0].clone());
            let spec = DistortionSpec::new(DistortionKind::Jpeg2d);
            let mut rng = derive(17, Stream::Distortion, 0);
            let out = distort2d_var(&tape, img, None, &spec, [0.5; 3], &mut rng).unwrap();
            mean_all(out).value_clone().data()[0]
        };
        let numeric = splatmark_autograd::gradcheck::numeric_grads(&mut f, &[img0.clone()], 1e-5);
        let tape: Tape<f64> = Tape::new();
        let img = tape.leaf(img0);
        let spec = DistortionSpec::new(DistortionKind::Jpeg2d);
        let mut rng = derive(17, Stream::Distortion, 0);
        let out = distort2d_var(&tape, img, None, &spec, [0.5; 3], &mut rng).unwrap();
        tape.backward(mean_all(out));
        let analytic = tape.grad(img).unwrap();
        let err = splatmark_autograd::gradcheck::max_rel_error(&analytic, &numeric[0], 1e-7);
        assert!(err < 1e-4, "jpeg gradient mismatch: {err}");
    }
}
