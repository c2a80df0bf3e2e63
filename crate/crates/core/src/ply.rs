//! PLY persistence in the de-facto 3DGS layout (binary little endian,
//! float32 properties: x y z nx ny nz f_dc_* f_rest_* opacity scale_* rot_*).
//!
//! Internally the cloud stores activated values; this module converts at the
//! boundary: opacity logit <-> sigmoid, log scale <-> exp, quaternion
//! normalization. Color coefficients are stored verbatim; `f_rest` uses the
//! channel-major order standard tooling writes.

use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use splatmark_autograd::{real, Real, Tensor};

use crate::cloud::GaussianCloud;
use crate::error::{Error, Result};

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn logit(x: f64) -> f64 {
    let x = x.clamp(1e-6, 1.0 - 1e-6);
    (x / (1.0 - x)).ln()
}

pub fn load_ply<T: Real>(path: impl AsRef<Path>) -> Result<GaussianCloud<T>> {
    let file = std::fs::File::open(path.as_ref())?;
    let mut reader = BufReader::new(file);

    let mut line = String::new();
    reader.read_line(&mut line)?;
    if line.trim() != "ply" {
        return Err(Error::Format("not a PLY file".into()));
    }
    let mut names: Vec<String> = Vec::new();
    let mut count: Option<usize> = None;
    let mut binary_le = false;
    loop {
        line.clear();
        if reader.read_line(&mut line)? == 0 {
            return Err(Error::Format("unexpected end of header".into()));
        }
        let line = line.trim();
        if line == "end_header" {
            break;
        }
        let mut parts = line.split_whitespace();
        match parts.next() {
            Some("format") => {
                binary_le = parts.next() == Some("binary_little_endian");
            }
            Some("element") => {
                if parts.next() == Some("vertex") {
                    count = parts
                        .next()
                        .and_then(|s| s.parse().ok())
                        .or(Some(0));
                } else if count.is_some() {
                    return Err(Error::Format(
                        "elements after vertex are not supported".into(),
                    ));
                }
            }
            Some("property") => {
                let ty = parts.next().unwrap_or("");
                if ty != "float" && ty != "float32" {
                    return Err(Error::Format(format!(
                        "unsupported property type \"{ty}\" (float32 only)"
                    )));
                }
                if let Some(name) = parts.next() {
                    names.push(name.to_string());
                }
            }
            _ => {}
        }
    }
    if !binary_le {
        return Err(Error::Format("expected binary_little_endian format".into()));
    }
    let n = count.ok_or_else(|| Error::Format("missing vertex element".into()))?;

    let find = |name: &str| -> Result<usize> {
        names
            .iter()
            .position(|p| p == name)
            .ok_or_else(|| Error::MissingProperty(name.to_string()))
    };
    let ix = [find("x")?, find("y")?, find("z")?];
    let idc = [find("f_dc_0")?, find("f_dc_1")?, find("f_dc_2")?];
    let iop = find("opacity")?;
    let isc = [find("scale_0")?, find("scale_1")?, find("scale_2")?];
    let irot = [find("rot_0")?, find("rot_1")?, find("rot_2")?, find("rot_3")?];
    let n_rest = names.iter().filter(|p| p.starts_with("f_rest_")).count();
    if n_rest % 3 != 0 {
        return Err(Error::Format(format!("f_rest count {n_rest} not divisible by 3")));
    }
    let coeffs_per_channel = n_rest / 3; // (k+1)^2 - 1
    let bands = coeffs_per_channel + 1;
    let sh_order = (bands as f64).sqrt() as usize;
    if sh_order * sh_order != bands {
        return Err(Error::Format(format!(
            "f_rest count {n_rest} does not correspond to a square SH band count"
        )));
    }
    let sh_order = sh_order - 1;
    let mut irest = Vec::with_capacity(n_rest);
    for i in 0..n_rest {
        irest.push(find(&format!("f_rest_{i}"))?);
    }

    let stride = names.len();
    let mut raw = vec![0u8; n * stride * 4];
    reader.read_exact(&mut raw).map_err(|_| {
        Error::Format(format!("file too short for {n} vertices with {stride} properties"))
    })?;
    let fetch = |row: usize, prop: usize| -> f64 {
        let o = (row * stride + prop) * 4;
        f32::from_le_bytes([raw[o], raw[o + 1], raw[o + 2], raw[o + 3]]) as f64
    };

    let sh_dim = 3 * bands;
    let mut positions = Tensor::zeros(&[n, 3]);
    let mut scales = Tensor::zeros(&[n, 3]);
    let mut rotations = Tensor::zeros(&[n, 4]);
    let mut opacities = Tensor::zeros(&[n]);
    let mut sh = Tensor::zeros(&[n, sh_dim]);
    for r in 0..n {
        for a in 0..3 {
            positions.set2(r, a, real(fetch(r, ix[a])));
            scales.set2(r, a, real(fetch(r, isc[a]).exp()));
        }
        for a in 0..4 {
            rotations.set2(r, a, real(fetch(r, irot[a])));
        }
        opacities.data_mut()[r] = real(sigmoid(fetch(r, iop)));
        for ch in 0..3 {
            // band 0 from f_dc, remaining bands channel-major in f_rest
            sh.set2(r, ch, real(fetch(r, idc[ch])));
            for b in 1..bands {
                let v = fetch(r, irest[ch * coeffs_per_channel + (b - 1)]);
                sh.set2(r, b * 3 + ch, real(v));
            }
        }
    }
    if positions.has_nan()
        || scales.has_nan()
        || rotations.has_nan()
        || opacities.has_nan()
        || sh.has_nan()
    {
        return Err(Error::Data("PLY contains NaN or infinite values".into()));
    }
    GaussianCloud::new(positions, scales, rotations, opacities, sh, sh_order)
}

pub fn save_ply<T: Real>(cloud: &GaussianCloud<T>, path: impl AsRef<Path>) -> Result<()> {
    let n = cloud.len();
    let bands = (cloud.sh_order + 1) * (cloud.sh_order + 1);
    let n_rest = 3 * (bands - 1);

    let file = std::fs::File::create(path.as_ref())?;
    let mut w = BufWriter::new(file);
    writeln!(w, "ply")?;
    writeln!(w, "format binary_little_endian 1.0")?;
    writeln!(w, "element vertex {n}")?;
    for name in ["x", "y", "z", "nx", "ny", "nz"] {
        writeln!(w, "property float {name}")?;
    }
    for i in 0..3 {
        writeln!(w, "property float f_dc_{i}")?;
    }
    for i in 0..n_rest {
        writeln!(w, "property float f_rest_{i}")?;
    }
    writeln!(w, "property float opacity")?;
    for i in 0..3 {
        writeln!(w, "property float scale_{i}")?;
    }
    for i in 0..4 {
        writeln!(w, "property float rot_{i}")?;
    }
    writeln!(w, "end_header")?;

    let put = |buf: &mut Vec<u8>, v: f64| buf.extend_from_slice(&(v as f32).to_le_bytes());
    let mut buf = Vec::with_capacity((17 + n_rest) * 4);
    for r in 0..n {
        buf.clear();
        for a in 0..3 {
            put(&mut buf, Real::as_f64(cloud.positions.at2(r, a)));
        }
        for _ in 0..3 {
            put(&mut buf, 0.0); // normals, unused
        }
        for ch in 0..3 {
            put(&mut buf, Real::as_f64(cloud.sh_coeffs.at2(r, ch)));
        }
        for ch in 0..3 {
            for b in 1..bands {
                put(&mut buf, Real::as_f64(cloud.sh_coeffs.at2(r, b * 3 + ch)));
            }
        }
        put(&mut buf, logit(Real::as_f64(cloud.opacities.data()[r])));
        for a in 0..3 {
            put(&mut buf, Real::as_f64(cloud.scales.at2(r, a)).max(1e-12).ln());
        }
        for a in 0..4 {
            put(&mut buf, Real::as_f64(cloud.rotations.at2(r, a)));
        }
        w.write_all(&buf)?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha12Rng;

    fn random_cloud(n: usize, sh_order: usize, seed: u64) -> GaussianCloud<f64> {
        let mut rng = ChaCha12Rng::seed_from_u64(seed);
        let sh_dim = 3 * (sh_order + 1) * (sh_order + 1);
        GaussianCloud::new(
            Tensor::new(&[n, 3], (0..n * 3).map(|_| rng.gen_range(-2.0..2.0)).collect()),
            Tensor::new(&[n, 3], (0..n * 3).map(|_| rng.gen_range(0.01..0.5)).collect()),
            Tensor::new(&[n, 4], (0..n * 4).map(|_| rng.gen_range(-1.0..1.0)).collect()),
            Tensor::new(&[n], (0..n).map(|_| rng.gen_range(0.05..0.95)).collect()),
            Tensor::new(&[n, sh_dim], (0..n * sh_dim).map(|_| rng.gen_range(-1.0..1.0)).collect()),
            sh_order,
        )
        .unwrap()
    }

    #[test]
    fn round_trip_preserves_fields() {
        for sh_order in [0usize, 1, 3] {
            let cloud = random_cloud(5, sh_order, 42 + sh_order as u64);
            let dir = tempfile::tempdir().unwrap();
            let path = dir.path().join("c.ply");
            save_ply(&cloud, &path).unwrap();
            let back: GaussianCloud<f64> = load_ply(&path).unwrap();
            assert_eq!(back.sh_order, sh_order);
            assert_eq!(back.len(), 5);
            let close = |a: &[f64], b: &[f64], tol: f64| {
                a.iter().zip(b).all(|(x, y)| (x - y).abs() < tol)
            };
            assert!(close(cloud.positions.data(), back.positions.data(), 1e-5));
            assert!(close(cloud.scales.data(), back.scales.data(), 1e-5));
            assert!(close(cloud.rotations.data(), back.rotations.data(), 1e-5));
            assert!(close(cloud.opacities.data(), back.opacities.data(), 1e-5));
            assert!(close(cloud.sh_coeffs.data(), back.sh_coeffs.data(), 1e-5));
        }
    }

    #[test]
    fn zero_opacity_logit_loads_as_half() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.ply");
        let mut cloud = random_cloud(1, 0, 7);
        cloud.opacities.data_mut()[0] = 0.5; // logit(0.5) = 0
        save_ply(&cloud, &path).unwrap();
        let back: GaussianCloud<f64> = load_ply(&path).unwrap();
        assert!((back.opacities.data()[0] - 0.5).abs() < 1e-7);
    }

    #[test]
    fn missing_property_is_named() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("broken.ply");
        let mut text = String::from("ply\nformat binary_little_endian 1.0\nelement vertex 0\n");
        for name in ["x", "y", "z", "f_dc_0", "f_dc_1", "f_dc_2", "opacity", "scale_0",
            "scale_1", "scale_2", "rot_0", "rot_1", "rot_2"]
        {
            text.push_str(&format!("property float {name}\n"));
        }
        text.push_str("end_header\n");
        std::fs::write(&path, text).unwrap();
        match load_ply::<f64>(&path) {
            Err(Error::MissingProperty(p)) => assert_eq!(p, "rot_3"),
            other => panic!("expected missing rot_3, got {other:?}"),
        }
    }

    #[test]
    fn nan_field_is_a_data_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("nan.ply");
        let cloud = random_cloud(1, 0, 8);
        save_ply(&cloud, &path).unwrap();
        // corrupt the first float of the payload (x of the first vertex)
        let mut bytes = std::fs::read(&path).unwrap();
        let header_end = bytes
            .windows(11)
            .position(|w| w == b"end_header\n")
            .unwrap()
            + 11;
        bytes[header_end..header_end + 4].copy_from_slice(&f32::NAN.to_le_bytes());
        std::fs::write(&path, bytes).unwrap();
        assert!(matches!(load_ply::<f64>(&path), Err(Error::Data(_))));
    }

    #[test]
    fn ascii_ply_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ascii.ply");
        std::fs::write(&path, "ply\nformat ascii 1.0\nelement vertex 0\nend_header\n")
            .unwrap();
        assert!(matches!(load_ply::<f64>(&path), Err(Error::Format(_))));
    }
}
