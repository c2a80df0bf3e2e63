//! Differentiable forward splatting: EWA-style projection of 3D Gaussians
//! followed by front-to-back alpha compositing, with a hand-derived backward
//! pass w.r.t. every primitive property.

pub mod sh;

use rayon::prelude::*;
use splatmark_autograd::tape::BackwardOp;
use splatmark_autograd::{real, Real, Tape, Tensor, Var};

use crate::camera::Camera;
use crate::cloud::{quat_to_rot, GaussianCloud};
use crate::image::RenderedImage;

/// Diagonal regularizer added to the projected 2D covariance (px^2).
pub const COV2D_EPS: f64 = 0.3;
/// Contributions with footprint weight below this are skipped.
pub const WEIGHT_CUTOFF: f64 = 1.0 / 255.0;
/// Per-splat opacity cap keeping (1 - alpha') bounded away from zero.
pub const ALPHA_MAX: f64 = 0.9995;
/// Transmittance early-stop threshold.
pub const T_MIN: f64 = 1e-4;
/// Footprint bounding-box radius in units of the largest 2D std deviation.
/// 3.4 sigma covers every pixel above `WEIGHT_CUTOFF` (which needs 3.33).
const BB_SIGMA: f64 = 3.4;

#[derive(Debug, Clone)]
struct Splat<T: Real> {
    prim: usize,
    t: [T; 3],
    u: T,
    v: T,
    /// Inverse 2D covariance (conic), packed (a, b, c) for [[a,b],[b,c]].
    conic: [T; 3],
    /// Camera-space 3D covariance.
    cov_cam: [[T; 3]; 3],
    /// Perspective Jacobian entries (j00, j02, j11, j12).
    j: [T; 4],
    alpha: T,
    color: [T; 3],
    /// Per-channel: true when the [0,1] color clamp was inactive.
    color_live: [bool; 3],
    /// View direction (unit) and 1/|mu - eye| for SH backward.
    dir: [T; 3],
    inv_dist: T,
    /// Inclusive-exclusive pixel bounds (x0, x1, y0, y1).
    bb: [usize; 4],
}

struct CameraFrame<T: Real> {
    rot: [[T; 3]; 3],
    eye: [T; 3],
    focal: T,
    cx: T,
    cy: T,
    z_near: T,
    width: usize,
    height: usize,
}

impl<T: Real> CameraFrame<T> {
    fn new(camera: &Camera<T>) -> Self {
        let (rot, eye) = camera.world_to_camera();
        Self {
            rot,
            eye,
            focal: camera.focal(),
            cx: real::<T>(camera.width as f64 * 0.5),
            cy: real::<T>(camera.height as f64 * 0.5),
            z_near: (camera.radius * real(1e-3)).max(real(1e-6)),
            width: camera.width,
            height: camera.height,
        }
    }
}

struct Properties<'a, T: Real> {
    positions: &'a Tensor<T>,
    scales: &'a Tensor<T>,
    rotations: &'a Tensor<T>,
    opacities: &'a Tensor<T>,
    sh_coeffs: &'a Tensor<T>,
    sh_order: usize,
}

fn mat3_mul<T: Real>(a: &[[T; 3]; 3], b: &[[T; 3]; 3]) -> [[T; 3]; 3] {
    let mut out = [[T::zero(); 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            let mut acc = T::zero();
            for k in 0..3 {
                acc += a[i][k] * b[k][j];
            }
            out[i][j] = acc;
        }
    }
    out
}

fn project<T: Real>(props: &Properties<'_, T>, frame: &CameraFrame<T>) -> Vec<Splat<T>> {
    let n = props.positions.rows();
    let mut splats: Vec<Splat<T>> = (0..n)
        .into_par_iter()
        .filter_map(|i| project_one(props, frame, i))
        .collect();
    // stable front-to-back order; ties break on primitive index
    splats.sort_by(|a, b| {
        a.t[2].partial_cmp(&b.t[2]).unwrap().then(a.prim.cmp(&b.prim))
    });
    splats
}

fn project_one<T: Real>(
    props: &Properties<'_, T>,
    frame: &CameraFrame<T>,
    i: usize,
) -> Option<Splat<T>> {
    let p = props.positions.row(i);
    let rel = [p[0] - frame.eye[0], p[1] - frame.eye[1], p[2] - frame.eye[2]];
    let r = &frame.rot;
    let t = [
        r[0][0] * rel[0] + r[0][1] * rel[1] + r[0][2] * rel[2],
        r[1][0] * rel[0] + r[1][1] * rel[1] + r[1][2] * rel[2],
        r[2][0] * rel[0] + r[2][1] * rel[1] + r[2][2] * rel[2],
    ];
    if t[2] <= frame.z_near {
        return None;
    }
    let f = frame.focal;
    let inv_z = T::one() / t[2];
    let u = f * t[0] * inv_z + frame.cx;
    let v = f * t[1] * inv_z + frame.cy;

    // normalized quaternion -> world covariance factor B = R_q * diag(s)
    let qrow = props.rotations.row(i);
    let qn = {
        let norm = (qrow[0] * qrow[0]
            + qrow[1] * qrow[1]
            + qrow[2] * qrow[2]
            + qrow[3] * qrow[3])
            .sqrt();
        if norm < real(1e-12) {
            [T::one(), T::zero(), T::zero(), T::zero()]
        } else {
            [qrow[0] / norm, qrow[1] / norm, qrow[2] / norm, qrow[3] / norm]
        }
    };
    let rq = quat_to_rot(qn);
    let s = props.scales.row(i);
    // M = R_wc * R_q * diag(s); camera covariance = M M^T
    let rwq = mat3_mul(r, &rq);
    let mut m = [[T::zero(); 3]; 3];
    for a in 0..3 {
        for b in 0..3 {
            m[a][b] = rwq[a][b] * s[b];
        }
    }
    let mut cov_cam = [[T::zero(); 3]; 3];
    for a in 0..3 {
        for b in 0..3 {
            let mut acc = T::zero();
            for k in 0..3 {
                acc += m[a][k] * m[b][k];
            }
            cov_cam[a][b] = acc;
        }
    }

    // perspective Jacobian rows: [f/z, 0, -f x / z^2], [0, f/z, -f y / z^2]
    let j00 = f * inv_z;
    let j02 = -f * t[0] * inv_z * inv_z;
    let j11 = f * inv_z;
    let j12 = -f * t[1] * inv_z * inv_z;
    // cov2d = J cov_cam J^T + eps I
    let row0 = [
        j00 * cov_cam[0][0] + j02 * cov_cam[2][0],
        j00 * cov_cam[0][1] + j02 * cov_cam[2][1],
        j00 * cov_cam[0][2] + j02 * cov_cam[2][2],
    ];
    let row1 = [
        j11 * cov_cam[1][0] + j12 * cov_cam[2][0],
        j11 * cov_cam[1][1] + j12 * cov_cam[2][1],
        j11 * cov_cam[1][2] + j12 * cov_cam[2][2],
    ];
    let eps = real::<T>(COV2D_EPS);
    let a = row0[0] * j00 + row0[2] * j02 + eps;
    let b = row1[0] * j00 + row1[2] * j02;
    let c = row1[1] * j11 + row1[2] * j12 + eps;

    let det = a * c - b * b;
    let inv_det = T::one() / det;
    let conic = [c * inv_det, -b * inv_det, a * inv_det];

    // bounding box from the largest eigenvalue
    let half_trace = (a + c) * real(0.5);
    let disc = (half_trace * half_trace - det).max(T::zero()).sqrt();
    let radius = real::<T>(BB_SIGMA) * (half_trace + disc).max(T::zero()).sqrt();
    let x0 = Real::as_f64(u - radius).floor().max(0.0) as usize;
    let x1 = (Real::as_f64(u + radius).ceil().max(0.0) as usize).min(frame.width);
    let y0 = Real::as_f64(v - radius).floor().max(0.0) as usize;
    let y1 = (Real::as_f64(v + radius).ceil().max(0.0) as usize).min(frame.height);
    if x0 >= x1 || y0 >= y1 {
        return None;
    }

    // view-dependent color, clamped into [0,1]
    let dist = (rel[0] * rel[0] + rel[1] * rel[1] + rel[2] * rel[2]).sqrt();
    let inv_dist = T::one() / dist;
    let dir = [rel[0] * inv_dist, rel[1] * inv_dist, rel[2] * inv_dist];
    let basis = sh::basis(props.sh_order, dir);
    let coeffs = props.sh_coeffs.row(i);
    let half = real::<T>(0.5);
    let mut color = [T::zero(); 3];
    let mut color_live = [false; 3];
    for ch in 0..3 {
        let mut acc = half;
        for (b_idx, &bv) in basis.iter().enumerate() {
            acc += bv * coeffs[b_idx * 3 + ch];
        }
        color_live[ch] = acc > T::zero() && acc < T::one();
        color[ch] = acc.max(T::zero()).min(T::one());
    }

    Some(Splat {
        prim: i,
        t,
        u,
        v,
        conic,
        cov_cam,
        j: [j00, j02, j11, j12],
        alpha: props.opacities.data()[i].max(T::zero()).min(T::one()),
        color,
        color_live,
        dir,
        inv_dist,
        bb: [x0, x1, y0, y1],
    })
}

/// Per-pixel contributor record: splat index (into the sorted splat list)
/// and its footprint weight at the pixel.
#[derive(Debug, Clone, Copy)]
struct Contribution<T> {
    splat: u32,
    weight: T,
}

pub struct RenderCache<T: Real> {
    splats: Vec<Splat<T>>,
    contributions: Vec<Vec<Contribution<T>>>,
    background: [T; 3],
    width: usize,
    height: usize,
    n: usize,
    sh_order: usize,
    frame_rot: [[T; 3]; 3],
    focal: T,
}

fn composite<T: Real>(
    splats: &[Splat<T>],
    frame: &CameraFrame<T>,
    background: [T; 3],
    keep_lists: bool,
) -> (Tensor<T>, Vec<Vec<Contribution<T>>>) {
    let (w, h) = (frame.width, frame.height);
    // bucket splats by the rows they touch; append order preserves depth order
    let mut rows: Vec<Vec<u32>> = vec![Vec::new(); h];
    for (si, s) in splats.iter().enumerate() {
        for row in rows.iter_mut().take(s.bb[3]).skip(s.bb[2]) {
            row.push(si as u32);
        }
    }
    let cutoff = real::<T>(WEIGHT_CUTOFF);
    let alpha_max = real::<T>(ALPHA_MAX);
    let t_min = real::<T>(T_MIN);
    let half = real::<T>(0.5);

    let mut data = Tensor::zeros(&[h, w, 3]);
    let mut lists: Vec<Vec<Contribution<T>>> =
        if keep_lists { vec![Vec::new(); h * w] } else { Vec::new() };

    let list_chunks: Vec<(usize, &mut [Vec<Contribution<T>>])> = if keep_lists {
        lists.chunks_mut(w).enumerate().collect()
    } else {
        Vec::new()
    };

    if keep_lists {
        data.data_mut()
            .par_chunks_mut(w * 3)
            .zip(list_chunks.into_par_iter())
            .enumerate()
            .for_each(|(y, (row_px, (_, row_lists)))| {
                composite_row(
                    splats, &rows[y], y, w, background, cutoff, alpha_max, t_min, half,
                    row_px,
                    Some(row_lists),
                );
            });
    } else {
        data.data_mut().par_chunks_mut(w * 3).enumerate().for_each(|(y, row_px)| {
            composite_row(
                splats, &rows[y], y, w, background, cutoff, alpha_max, t_min, half, row_px,
                None,
            );
        });
    }
    (data, lists)
}

#[allow(clippy::too_many_arguments)]
fn composite_row<T: Real>(
    splats: &[Splat<T>],
    row_bucket: &[u32],
    y: usize,
    w: usize,
    background: [T; 3],
    cutoff: T,
    alpha_max: T,
    t_min: T,
    half: T,
    row_px: &mut [T],
    mut row_lists: Option<&mut [Vec<Contribution<T>>]>,
) {
    let py = real::<T>(y as f64) + half;
    for x in 0..w {
        let px = real::<T>(x as f64) + half;
        let mut transmittance = T::one();
        let mut rgb = [T::zero(); 3];
        for &si in row_bucket {
            let s = &splats[si as usize];
            if x < s.bb[0] || x >= s.bb[1] {
                continue;
            }
            let dx = px - s.u;
            let dy = py - s.v;
            let q = s.conic[0] * dx * dx
                + (s.conic[1] + s.conic[1]) * dx * dy
                + s.conic[2] * dy * dy;
            let weight = (-half * q).exp();
            if weight < cutoff {
                continue;
            }
            let alpha_eff = (s.alpha * weight).max(T::zero()).min(alpha_max);
            for ch in 0..3 {
                rgb[ch] += s.color[ch] * alpha_eff * transmittance;
            }
            if let Some(lists) = row_lists.as_deref_mut() {
                lists[x].push(Contribution { splat: si, weight });
            }
            transmittance *= T::one() - alpha_eff;
            if transmittance < t_min {
                break;
            }
        }
        for ch in 0..3 {
            row_px[x * 3 + ch] = rgb[ch] + background[ch] * transmittance;
        }
    }
}

/// Render without retaining gradient state.
pub fn render<T: Real>(
    cloud: &GaussianCloud<T>,
    camera: &Camera<T>,
    background: [T; 3],
) -> RenderedImage<T> {
    let frame = CameraFrame::new(camera);
    let props = Properties {
        positions: &cloud.positions,
        scales: &cloud.scales,
        rotations: &cloud.rotations,
        opacities: &cloud.opacities,
        sh_coeffs: &cloud.sh_coeffs,
        sh_order: cloud.sh_order,
    };
    let splats = project(&props, &frame);
    let (data, _) = composite(&splats, &frame, background, false);
    RenderedImage::new(camera.height, camera.width, data).expect("composite shape")
}

/// Differentiable render: property tensors in, `[H,W,3]` image out, with
/// gradients for all five property groups.
#[allow(clippy::too_many_arguments)]
pub fn render_var<'t, T: Real>(
    tape: &'t Tape<T>,
    positions: Var<'t, T>,
    scales: Var<'t, T>,
    rotations: Var<'t, T>,
    opacities: Var<'t, T>,
    sh_coeffs: Var<'t, T>,
    sh_order: usize,
    camera: &Camera<T>,
    background: [T; 3],
) -> Var<'t, T> {
    let frame = CameraFrame::new(camera);
    let (value, cache) = {
        let vp = tape.value(positions);
        let vs = tape.value(scales);
        let vr = tape.value(rotations);
        let vo = tape.value(opacities);
        let vc = tape.value(sh_coeffs);
        let props = Properties {
            positions: &vp,
            scales: &vs,
            rotations: &vr,
            opacities: &vo,
            sh_coeffs: &vc,
            sh_order,
        };
        let splats = project(&props, &frame);
        let (data, lists) = composite(&splats, &frame, background, true);
        let cache = RenderCache {
            splats,
            contributions: lists,
            background,
            width: frame.width,
            height: frame.height,
            n: vp.rows(),
            sh_order,
            frame_rot: frame.rot,
            focal: frame.focal,
        };
        (data, cache)
    };
    tape.custom(
        &[positions, scales, rotations, opacities, sh_coeffs],
        value,
        Box::new(RenderBackward { cache }),
    )
}

struct RenderBackward<T: Real> {
    cache: RenderCache<T>,
}

/// Gradient slots accumulated per splat during the pixel sweep:
/// (du, dv, dConic[3], dAlpha, dColor[3]).
#[derive(Clone, Copy)]
struct SplatGrad<T: Real> {
    du: T,
    dv: T,
    dconic: [T; 3],
    dalpha: T,
    dcolor: [T; 3],
}

impl<T: Real> SplatGrad<T> {
    fn zero() -> Self {
        Self {
            du: T::zero(),
            dv: T::zero(),
            dconic: [T::zero(); 3],
            dalpha: T::zero(),
            dcolor: [T::zero(); 3],
        }
    }
    fn add(&mut self, o: &Self) {
        self.du += o.du;
        self.dv += o.dv;
        for k in 0..3 {
            self.dconic[k] += o.dconic[k];
            self.dcolor[k] += o.dcolor[k];
        }
        self.dalpha += o.dalpha;
    }
}

impl<T: Real> BackwardOp<T> for RenderBackward<T> {
    fn backward(
        &self,
        grad_out: &Tensor<T>,
        inputs: &[&Tensor<T>],
        _output: &Tensor<T>,
        _needs: &[bool],
    ) -> Vec<Option<Tensor<T>>> {
        let cache = &self.cache;
        let (w, h) = (cache.width, cache.height);
        let ns = cache.splats.len();
        let half = real::<T>(0.5);
        let alpha_max = real::<T>(ALPHA_MAX);

        // phase 1: per-pixel reverse compositing, accumulated over row bands
        // in deterministic order
        let bands: Vec<Vec<SplatGrad<T>>> = (0..h)
            .into_par_iter()
            .map(|y| {
                let mut acc = vec![SplatGrad::zero(); ns];
                let py = real::<T>(y as f64) + half;
                let mut entries: Vec<(u32, T, T, T)> = Vec::new(); // splat, weight, alpha_eff, T_before
                for x in 0..w {
                    let list = &cache.contributions[y * w + x];
                    if list.is_empty() {
                        continue;
                    }
                    let px = real::<T>(x as f64) + half;
                    let go = &grad_out.data()[(y * w + x) * 3..(y * w + x) * 3 + 3];

                    entries.clear();
                    let mut transmittance = T::one();
                    for c in list {
                        let s = &cache.splats[c.splat as usize];
                        let alpha_eff =
                            (s.alpha * c.weight).max(T::zero()).min(alpha_max);
                        entries.push((c.splat, c.weight, alpha_eff, transmittance));
                        transmittance *= T::one() - alpha_eff;
                    }
                    // suffix color: contributions behind the current one plus
                    // the background term
                    let mut suffix = [
                        cache.background[0] * transmittance,
                        cache.background[1] * transmittance,
                        cache.background[2] * transmittance,
                    ];
                    for &(si, weight, alpha_eff, t_before) in entries.iter().rev() {
                        let s = &cache.splats[si as usize];
                        let g = &mut acc[si as usize];
                        let mut dalpha_eff = T::zero();
                        for ch in 0..3 {
                            // dC/dcolor = alpha_eff * T_i
                            g.dcolor[ch] += go[ch] * alpha_eff * t_before;
                            // dC/dalpha_eff = color * T_i - suffix/(1-alpha_eff)
                            dalpha_eff += go[ch]
                                * (s.color[ch] * t_before
                                    - suffix[ch] / (T::one() - alpha_eff));
                        }
                        // alpha_eff = clamp(alpha * weight, 0, max)
                        let raw = s.alpha * weight;
                        if raw > T::zero() && raw < alpha_max {
                            g.dalpha += dalpha_eff * weight;
                            let dweight = dalpha_eff * s.alpha;
                            // weight = exp(-q/2); dq = -weight/2 * dweight^-1
                            let dq = -half * weight * dweight;
                            let dx = px - s.u;
                            let dy = py - s.v;
                            // q = a dx^2 + 2 b dx dy + c dy^2
                            g.dconic[0] += dq * dx * dx;
                            g.dconic[1] += dq * (dx * dy + dx * dy);
                            g.dconic[2] += dq * dy * dy;
                            // d q / d u = -2 (a dx + b dy)
                            let two = T::one() + T::one();
                            g.du += dq * (-two) * (s.conic[0] * dx + s.conic[1] * dy);
                            g.dv += dq * (-two) * (s.conic[1] * dx + s.conic[2] * dy);
                        }
                        // update suffix to include this contribution
                        for ch in 0..3 {
                            suffix[ch] += s.color[ch] * alpha_eff * t_before;
                        }
                    }
                }
                acc
            })
            .collect();
        let mut acc = vec![SplatGrad::<T>::zero(); ns];
        for band in bands {
            for (a, b) in acc.iter_mut().zip(band.iter()) {
                a.add(b);
            }
        }

        // phase 2: per-splat projection backward
        let n = cache.n;
        let scales = inputs[1];
        let rotations = inputs[2];
        let sh_coeffs = inputs[4];
        let grads: Vec<(usize, [T; 3], [T; 3], [T; 4], T, Vec<T>)> = cache
            .splats
            .par_iter()
            .zip(acc.par_iter())
            .map(|(s, g)| splat_backward(cache, scales, rotations, sh_coeffs, s, g))
            .collect();

        let sh_dim = 3 * (cache.sh_order + 1) * (cache.sh_order + 1);
        let mut dpos = Tensor::zeros(&[n, 3]);
        let mut dscale = Tensor::zeros(&[n, 3]);
        let mut drot = Tensor::zeros(&[n, 4]);
        let mut dop = Tensor::zeros(&[n]);
        let mut dsh = Tensor::zeros(&[n, sh_dim]);
        for (prim, dp, ds, dq, da, dshrow) in grads {
            for a in 0..3 {
                dpos.row_mut(prim)[a] += dp[a];
                dscale.row_mut(prim)[a] += ds[a];
            }
            for a in 0..4 {
                drot.row_mut(prim)[a] += dq[a];
            }
            dop.data_mut()[prim] += da;
            for (slot, v) in dsh.row_mut(prim).iter_mut().zip(dshrow) {
                *slot += v;
            }
        }
        vec![Some(dpos), Some(dscale), Some(drot), Some(dop), Some(dsh)]
    }
}

fn splat_backward<T: Real>(
    cache: &RenderCache<T>,
    scales: &Tensor<T>,
    rotations: &Tensor<T>,
    sh_coeffs: &Tensor<T>,
    s: &Splat<T>,
    g: &SplatGrad<T>,
) -> (usize, [T; 3], [T; 3], [T; 4], T, Vec<T>) {
    let two = real::<T>(2.0);
    let rot = &cache.frame_rot;
    let f = cache.focal;

    // conic = cov2d^{-1}: dCov2d = -A * dConic * A (all symmetric).
    // dconic[1] is packed (it sums both off-diagonal slots), so the
    // full-matrix gradient carries half of it in each entry.
    let a = [s.conic[0], s.conic[1], s.conic[2]];
    let gb = g.dconic[1] * real::<T>(0.5);
    let gm = [[g.dconic[0], gb], [gb, g.dconic[2]]];
    let am = [[a[0], a[1]], [a[1], a[2]]];
    let mut ga = [[T::zero(); 2]; 2];
    for i in 0..2 {
        for j in 0..2 {
            ga[i][j] = gm[i][0] * am[0][j] + gm[i][1] * am[1][j];
        }
    }
    let mut dcov2d = [[T::zero(); 2]; 2];
    for i in 0..2 {
        for j in 0..2 {
            dcov2d[i][j] = -(am[i][0] * ga[0][j] + am[i][1] * ga[1][j]);
        }
    }

    // cov2d = J cov_cam J^T (+ eps I): dCovCam = J^T dCov2d J
    let j00 = s.j[0];
    let j02 = s.j[1];
    let j11 = s.j[2];
    let j12 = s.j[3];
    // J as 2x3: [[j00,0,j02],[0,j11,j12]]
    let jm = [[j00, T::zero(), j02], [T::zero(), j11, j12]];
    let mut dcov_cam = [[T::zero(); 3]; 3];
    for p in 0..3 {
        for q in 0..3 {
            let mut acc = T::zero();
            for i in 0..2 {
                for jx in 0..2 {
                    acc += jm[i][p] * dcov2d[i][jx] * jm[jx][q];
                }
            }
            dcov_cam[p][q] = acc;
        }
    }
    // dJ = 2 dCov2d J covCam
    let mut jc = [[T::zero(); 3]; 2];
    for i in 0..2 {
        for q in 0..3 {
            let mut acc = T::zero();
            for p in 0..3 {
                acc += jm[i][p] * s.cov_cam[p][q];
            }
            jc[i][q] = acc;
        }
    }
    let mut dj = [[T::zero(); 3]; 2];
    for i in 0..2 {
        for q in 0..3 {
            dj[i][q] = two * (dcov2d[i][0] * jc[0][q] + dcov2d[i][1] * jc[1][q]);
        }
    }

    // chain J and the projected center into camera-space position t
    let (tx, ty, tz) = (s.t[0], s.t[1], s.t[2]);
    let inv_z = T::one() / tz;
    let inv_z2 = inv_z * inv_z;
    let inv_z3 = inv_z2 * inv_z;
    let mut dt = [T::zero(); 3];
    // u = f tx/tz + cx ; v = f ty/tz + cy
    dt[0] += g.du * f * inv_z;
    dt[2] += g.du * (-f * tx * inv_z2);
    dt[1] += g.dv * f * inv_z;
    dt[2] += g.dv * (-f * ty * inv_z2);
    // J entries
    dt[2] += dj[0][0] * (-f * inv_z2); // j00 = f/z
    dt[0] += dj[0][2] * (-f * inv_z2); // j02 = -f x / z^2
    dt[2] += dj[0][2] * (two * f * tx * inv_z3);
    dt[2] += dj[1][1] * (-f * inv_z2); // j11
    dt[1] += dj[1][2] * (-f * inv_z2); // j12
    dt[2] += dj[1][2] * (two * f * ty * inv_z3);

    // t = R (mu - eye): dmu = R^T dt
    let mut dmu = [
        rot[0][0] * dt[0] + rot[1][0] * dt[1] + rot[2][0] * dt[2],
        rot[0][1] * dt[0] + rot[1][1] * dt[1] + rot[2][1] * dt[2],
        rot[0][2] * dt[0] + rot[1][2] * dt[1] + rot[2][2] * dt[2],
    ];

    // cov_cam = (R R_q S)(R R_q S)^T. Work in world space:
    // dCovW = R^T dCovCam R, then dB = 2 dCovW B with B = R_q diag(s).
    let mut dcov_w = [[T::zero(); 3]; 3];
    for p in 0..3 {
        for q in 0..3 {
            let mut accv = T::zero();
            for i in 0..3 {
                for jx in 0..3 {
                    accv += rot[i][p] * dcov_cam[i][jx] * rot[jx][q];
                }
            }
            dcov_w[p][q] = accv;
        }
    }
    let qrow = rotations.row(s.prim);
    let qnorm = (qrow[0] * qrow[0]
        + qrow[1] * qrow[1]
        + qrow[2] * qrow[2]
        + qrow[3] * qrow[3])
        .sqrt();
    let qn = if qnorm < real(1e-12) {
        [T::one(), T::zero(), T::zero(), T::zero()]
    } else {
        [qrow[0] / qnorm, qrow[1] / qnorm, qrow[2] / qnorm, qrow[3] / qnorm]
    };
    let rq = quat_to_rot(qn);
    let srow = scales.row(s.prim);
    let mut b = [[T::zero(); 3]; 3];
    for i in 0..3 {
        for jx in 0..3 {
            b[i][jx] = rq[i][jx] * srow[jx];
        }
    }
    let mut db = [[T::zero(); 3]; 3];
    for i in 0..3 {
        for jx in 0..3 {
            let mut accv = T::zero();
            for k in 0..3 {
                accv += dcov_w[i][k] * b[k][jx];
            }
            db[i][jx] = two * accv;
        }
    }
    let mut dscale = [T::zero(); 3];
    let mut drq = [[T::zero(); 3]; 3];
    for jx in 0..3 {
        for i in 0..3 {
            dscale[jx] += rq[i][jx] * db[i][jx];
            drq[i][jx] = db[i][jx] * srow[jx];
        }
    }
    // rotation matrix -> quaternion (normalized), then through normalization
    let (qw, qx, qy, qz) = (qn[0], qn[1], qn[2], qn[3]);
    let four = real::<T>(4.0);
    let mut dqn = [T::zero(); 4];
    // row 0
    dqn[2] += -four * qy * drq[0][0];
    dqn[3] += -four * qz * drq[0][0];
    dqn[0] += -two * qz * drq[0][1];
    dqn[1] += two * qy * drq[0][1];
    dqn[2] += two * qx * drq[0][1];
    dqn[3] += -two * qw * drq[0][1];
    dqn[0] += two * qy * drq[0][2];
    dqn[1] += two * qz * drq[0][2];
    dqn[2] += two * qw * drq[0][2];
    dqn[3] += two * qx * drq[0][2];
    // row 1
    dqn[0] += two * qz * drq[1][0];
    dqn[1] += two * qy * drq[1][0];
    dqn[2] += two * qx * drq[1][0];
    dqn[3] += two * qw * drq[1][0];
    dqn[1] += -four * qx * drq[1][1];
    dqn[3] += -four * qz * drq[1][1];
    dqn[0] += -two * qx * drq[1][2];
    dqn[1] += -two * qw * drq[1][2];
    dqn[2] += two * qz * drq[1][2];
    dqn[3] += two * qy * drq[1][2];
    // row 2
    dqn[0] += -two * qy * drq[2][0];
    dqn[1] += two * qz * drq[2][0];
    dqn[2] += -two * qw * drq[2][0];
    dqn[3] += two * qx * drq[2][0];
    dqn[0] += two * qx * drq[2][1];
    dqn[1] += two * qw * drq[2][1];
    dqn[2] += two * qz * drq[2][1];
    dqn[3] += two * qy * drq[2][1];
    dqn[1] += -four * qx * drq[2][2];
    dqn[2] += -four * qy * drq[2][2];
    let mut dq = [T::zero(); 4];
    if qnorm >= real(1e-12) {
        let dot = dqn[0] * qn[0] + dqn[1] * qn[1] + dqn[2] * qn[2] + dqn[3] * qn[3];
        for i in 0..4 {
            dq[i] = (dqn[i] - dot * qn[i]) / qnorm;
        }
    }

    // SH color backward: coefficients linearly, direction through mu
    let bands = (cache.sh_order + 1) * (cache.sh_order + 1);
    let mut dsh = vec![T::zero(); 3 * bands];
    let basis = sh::basis(cache.sh_order, s.dir);
    for ch in 0..3 {
        if !s.color_live[ch] {
            continue;
        }
        let gch = g.dcolor[ch];
        for (b_idx, &bv) in basis.iter().enumerate() {
            dsh[b_idx * 3 + ch] = gch * bv;
        }
    }
    if cache.sh_order > 0 {
        let jac = sh::basis_jacobian(cache.sh_order, s.dir);
        let coeffs = sh_coeffs.row(s.prim);
        let mut ddir = [T::zero(); 3];
        for ch in 0..3 {
            if !s.color_live[ch] {
                continue;
            }
            let gch = g.dcolor[ch];
            for (b_idx, j3) in jac.iter().enumerate() {
                let cval = coeffs[b_idx * 3 + ch];
                for axis in 0..3 {
                    ddir[axis] += gch * cval * j3[axis];
                }
            }
        }
        // dir = rel/|rel|: dmu += (I - dir dir^T)/|rel| * ddir
        let dot = ddir[0] * s.dir[0] + ddir[1] * s.dir[1] + ddir[2] * s.dir[2];
        for axis in 0..3 {
            dmu[axis] += (ddir[axis] - dot * s.dir[axis]) * s.inv_dist;
        }
    }

    (s.prim, dmu, dscale, dq, g.dalpha, dsh)
}
