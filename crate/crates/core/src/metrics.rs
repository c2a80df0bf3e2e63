//! Image-quality and message-recovery metrics.

use splatmark_autograd::{real, Real, Tensor};

use crate::embedder::Message;
use crate::error::{Error, Result};

/// PSNR cap reported for (near-)identical images.
pub const PSNR_CAP: f64 = 99.0;

pub fn mse<T: Real>(a: &Tensor<T>, b: &Tensor<T>) -> Result<T> {
    if a.shape() != b.shape() {
        return Err(Error::Shape(format!(
            "mse shape mismatch: {:?} vs {:?}",
            a.shape(),
            b.shape()
        )));
    }
    let mut acc = T::zero();
    for (&x, &y) in a.data().iter().zip(b.data()) {
        acc += (x - y) * (x - y);
    }
    Ok(acc / real(a.numel() as f64))
}

/// Peak signal-to-noise ratio in dB for images in [0,1], capped at 99 dB.
pub fn psnr<T: Real>(a: &Tensor<T>, b: &Tensor<T>) -> Result<f64> {
    let m = Real::as_f64(mse(a, b)?);
    if m <= 0.0 {
        return Ok(PSNR_CAP);
    }
    Ok((10.0 * (1.0 / m).log10()).min(PSNR_CAP))
}

/// Mean SSIM over valid 11x11 windows with the standard Gaussian window
/// (sigma 1.5) and constants K1 = 0.01, K2 = 0.03; channels averaged.
pub fn ssim<T: Real>(a: &Tensor<T>, b: &Tensor<T>) -> Result<f64> {
    if a.shape() != b.shape() {
        return Err(Error::Shape(format!(
            "ssim shape mismatch: {:?} vs {:?}",
            a.shape(),
            b.shape()
        )));
    }
    let s = a.shape();
    if s.len() != 3 || s[2] != 3 {
        return Err(Error::Shape(format!("ssim expects [H,W,3], got {s:?}")));
    }
    let (h, w) = (s[0], s[1]);
    const WIN: usize = 11;
    if h < WIN || w < WIN {
        return Err(Error::Shape(format!("image {h}x{w} smaller than the 11x11 window")));
    }
    let window = gaussian_window(WIN, 1.5);
    let c1 = 0.01f64 * 0.01;
    let c2 = 0.03f64 * 0.03;

    let mut total = 0.0;
    let mut count = 0usize;
    let da = a.data();
    let db = b.data();
    for ch in 0..3 {
        for y0 in 0..=(h - WIN) {
            for x0 in 0..=(w - WIN) {
                let mut mu_a = 0.0;
                let mut mu_b = 0.0;
                let mut aa = 0.0;
                let mut bb = 0.0;
                let mut ab = 0.0;
                for wy in 0..WIN {
                    for wx in 0..WIN {
                        let wgt = window[wy * WIN + wx];
                        let idx = (((y0 + wy) * w) + (x0 + wx)) * 3 + ch;
                        let va = Real::as_f64(da[idx]);
                        let vb = Real::as_f64(db[idx]);
                        mu_a += wgt * va;
                        mu_b += wgt * vb;
                        aa += wgt * va * va;
                        bb += wgt * vb * vb;
                        ab += wgt * va * vb;
                    }
                }
                let var_a = aa - mu_a * mu_a;
                let var_b = bb - mu_b * mu_b;
                let cov = ab - mu_a * mu_b;
                let num = (2.0 * mu_a * mu_b + c1) * (2.0 * cov + c2);
                let den = (mu_a * mu_a + mu_b * mu_b + c1) * (var_a + var_b + c2);
                total += num / den;
                count += 1;
            }
        }
    }
    Ok(total / count as f64)
}

fn gaussian_window(size: usize, sigma: f64) -> Vec<f64> {
    let half = (size as f64 - 1.0) / 2.0;
    let mut w = vec![0.0; size * size];
    let mut sum = 0.0;
    for y in 0..size {
        for x in 0..size {
            let dy = y as f64 - half;
            let dx = x as f64 - half;
            let v = (-(dx * dx + dy * dy) / (2.0 * sigma * sigma)).exp();
            w[y * size + x] = v;
            sum += v;
        }
    }
    for v in &mut w {
        *v /= sum;
    }
    w
}

/// Percent of bits recovered after thresholding the squashed logits at 0.5.
pub fn bit_accuracy<T: Real>(msg: &Message, logits: &Tensor<T>) -> Result<f64> {
    if logits.numel() != msg.len() {
        return Err(Error::Shape(format!(
            "logit length {} does not match message length {}",
            logits.numel(),
            msg.len()
        )));
    }
    let bits = crate::decoder::logits_to_bits(logits);
    let matching = bits.iter().zip(msg.bits()).filter(|(a, b)| a == b).count();
    Ok(100.0 * matching as f64 / msg.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{derive, Stream};
    use rand::Rng;

    #[test]
    fn bit_accuracy_examples() {
        let msg = Message::parse("1011010011010010").unwrap();
        let perfect: Vec<f64> =
            msg.bits().iter().map(|&b| if b == 1 { 5.0 } else { -5.0 }).collect();
        assert_eq!(bit_accuracy(&msg, &Tensor::new(&[16], perfect.clone())).unwrap(), 100.0);
        let inverted: Vec<f64> = perfect.iter().map(|v| -v).collect();
        assert_eq!(bit_accuracy(&msg, &Tensor::new(&[16], inverted)).unwrap(), 0.0);
        let mut one_off = perfect;
        one_off[3] = -one_off[3];
        assert_eq!(bit_accuracy(&msg, &Tensor::new(&[16], one_off)).unwrap(), 93.75);
    }

    #[test]
    fn psnr_examples() {
        let a = Tensor::full(&[16, 16, 3], 0.0f64);
        let b = Tensor::full(&[16, 16, 3], 0.5f64);
        let got = psnr(&a, &b).unwrap();
        assert!((got - 6.020_599_913_279_624).abs() < 1e-3);
        assert_eq!(psnr(&a, &a).unwrap(), PSNR_CAP);
        let c = Tensor::full(&[8, 8, 3], 0.0f64);
        assert!(psnr(&a, &c).is_err());
    }

    #[test]
    fn ssim_identity_and_noise() {
        let mut rng = derive(5, Stream::Data, 0);
        let a = Tensor::new(
            &[24, 24, 3],
            (0..24 * 24 * 3).map(|_| rng.gen_range(0.0..1.0)).collect(),
        );
        assert!((ssim(&a, &a).unwrap() - 1.0).abs() < 1e-12);
        let mut b = a.clone();
        for v in b.data_mut() {
            *v += rng.gen_range(-1e-4..1e-4);
        }
        assert!(ssim(&a, &b).unwrap() > 0.999);
    }
}
