//! Gaussian cloud data model: property storage, covariance construction,
//! and the [-1,1] feature normalization used by the embedding path.

use splatmark_autograd::{real, Real, Tensor};

use crate::error::{Error, Result};

/// The five property groups, in feature-column order.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PropertyGroup {
    Position,
    Scale,
    Rotation,
    Opacity,
    Color,
}

pub const GROUPS: [PropertyGroup; 5] = [
    PropertyGroup::Position,
    PropertyGroup::Scale,
    PropertyGroup::Rotation,
    PropertyGroup::Opacity,
    PropertyGroup::Color,
];

impl PropertyGroup {
    pub fn index(self) -> usize {
        match self {
            PropertyGroup::Position => 0,
            PropertyGroup::Scale => 1,
            PropertyGroup::Rotation => 2,
            PropertyGroup::Opacity => 3,
            PropertyGroup::Color => 4,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            PropertyGroup::Position => "position",
            PropertyGroup::Scale => "scale",
            PropertyGroup::Rotation => "rotation",
            PropertyGroup::Opacity => "opacity",
            PropertyGroup::Color => "color",
        }
    }

    /// Column range of this group in a feature matrix for SH order `k`.
    pub fn columns(self, sh_order: usize) -> std::ops::Range<usize> {
        let c = 3 * (sh_order + 1) * (sh_order + 1);
        match self {
            PropertyGroup::Position => 0..3,
            PropertyGroup::Scale => 3..6,
            PropertyGroup::Rotation => 6..10,
            PropertyGroup::Opacity => 10..11,
            PropertyGroup::Color => 11..11 + c,
        }
    }
}

/// Feature width for SH order `k`: 3 + 3 + 4 + 1 + 3(k+1)^2.
pub fn feature_dim(sh_order: usize) -> usize {
    11 + 3 * (sh_order + 1) * (sh_order + 1)
}

/// Minimum scale kept after denormalization, preventing singular covariances.
pub const SCALE_FLOOR: f64 = 1e-6;

/// A 3DGS asset: N primitives with activated (directly usable) properties.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianCloud<T: Real> {
    pub positions: Tensor<T>,
    pub scales: Tensor<T>,
    pub rotations: Tensor<T>,
    pub opacities: Tensor<T>,
    pub sh_coeffs: Tensor<T>,
    pub sh_order: usize,
}

impl<T: Real> GaussianCloud<T> {
    pub fn new(
        positions: Tensor<T>,
        scales: Tensor<T>,
        rotations: Tensor<T>,
        opacities: Tensor<T>,
        sh_coeffs: Tensor<T>,
        sh_order: usize,
    ) -> Result<Self> {
        let n = positions.rows();
        let sh_dim = 3 * (sh_order + 1) * (sh_order + 1);
        if positions.shape() != [n, 3]
            || scales.shape() != [n, 3]
            || rotations.shape() != [n, 4]
            || opacities.shape() != [n]
            || sh_coeffs.shape() != [n, sh_dim]
        {
            return Err(Error::Shape(format!(
                "inconsistent property shapes for N={n}, sh_order={sh_order}"
            )));
        }
        let mut cloud =
            Self { positions, scales, rotations, opacities, sh_coeffs, sh_order };
        cloud.renormalize_rotations();
        cloud.clamp_validity();
        Ok(cloud)
    }

    pub fn len(&self) -> usize {
        self.positions.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn renormalize_rotations(&mut self) {
        for r in 0..self.rotations.rows() {
            let row = self.rotations.row_mut(r);
            let n = (row[0] * row[0] + row[1] * row[1] + row[2] * row[2] + row[3] * row[3])
                .sqrt();
            if n < real(1e-12) {
                row.copy_from_slice(&[T::one(), T::zero(), T::zero(), T::zero()]);
            } else {
                for v in row {
                    *v = *v / n;
                }
            }
        }
    }

    fn clamp_validity(&mut self) {
        let floor = real::<T>(SCALE_FLOOR);
        for v in self.scales.data_mut() {
            if *v < floor {
                *v = floor;
            }
        }
        for v in self.opacities.data_mut() {
            *v = v.max(T::zero()).min(T::one());
        }
    }

    /// 3D covariance of one primitive: R S S^T R^T.
    pub fn covariance(&self, index: usize) -> Result<[[T; 3]; 3]> {
        if index >= self.len() {
            return Err(Error::Bounds { index, len: self.len() });
        }
        let q = self.rotations.row(index);
        let s = self.scales.row(index);
        let r = quat_to_rot([q[0], q[1], q[2], q[3]]);
        // M = R * diag(s); Sigma = M M^T
        let mut m = [[T::zero(); 3]; 3];
        for i in 0..3 {
            for j in 0..3 {
                m[i][j] = r[i][j] * s[j];
            }
        }
        let mut sigma = [[T::zero(); 3]; 3];
        for i in 0..3 {
            for j in 0..3 {
                let mut acc = T::zero();
                for k in 0..3 {
                    acc += m[i][k] * m[j][k];
                }
                sigma[i][j] = acc;
            }
        }
        Ok(sigma)
    }

    /// Concatenate all properties into an [N, d_g] feature matrix
    /// (position | scale | rotation | opacity | color), unnormalized.
    pub fn to_features(&self) -> Tensor<T> {
        let n = self.len();
        let d = feature_dim(self.sh_order);
        let sh_dim = self.sh_coeffs.cols();
        let mut f = Tensor::zeros(&[n, d]);
        for i in 0..n {
            let row = f.row_mut(i);
            row[0..3].copy_from_slice(self.positions.row(i));
            row[3..6].copy_from_slice(self.scales.row(i));
            row[6..10].copy_from_slice(self.rotations.row(i));
            row[10] = self.opacities.data()[i];
            row[11..11 + sh_dim].copy_from_slice(self.sh_coeffs.row(i));
        }
        f
    }

    /// Inverse of `to_features`, applying the validity clamps from `new`.
    pub fn from_features(features: &Tensor<T>, sh_order: usize) -> Result<Self> {
        let d = feature_dim(sh_order);
        if features.shape().len() != 2 || features.cols() != d {
            return Err(Error::Shape(format!(
                "feature matrix has {:?}, expected [N, {d}]",
                features.shape()
            )));
        }
        let n = features.rows();
        let sh_dim = d - 11;
        let mut positions = Tensor::zeros(&[n, 3]);
        let mut scales = Tensor::zeros(&[n, 3]);
        let mut rotations = Tensor::zeros(&[n, 4]);
        let mut opacities = Tensor::zeros(&[n]);
        let mut sh = Tensor::zeros(&[n, sh_dim]);
        for i in 0..n {
            let row = features.row(i);
            positions.row_mut(i).copy_from_slice(&row[0..3]);
            scales.row_mut(i).copy_from_slice(&row[3..6]);
            rotations.row_mut(i).copy_from_slice(&row[6..10]);
            opacities.data_mut()[i] = row[10];
            sh.row_mut(i).copy_from_slice(&row[11..11 + sh_dim]);
        }
        Self::new(positions, scales, rotations, opacities, sh, sh_order)
    }

    pub fn bounding_box(&self) -> ([T; 3], [T; 3]) {
        let mut lo = [T::infinity(); 3];
        let mut hi = [T::neg_infinity(); 3];
        for i in 0..self.len() {
            let p = self.positions.row(i);
            for a in 0..3 {
                lo[a] = lo[a].min(p[a]);
                hi[a] = hi[a].max(p[a]);
            }
        }
        (lo, hi)
    }

    pub fn centroid(&self) -> [T; 3] {
        let n = real::<T>(self.len() as f64);
        let mut c = [T::zero(); 3];
        for i in 0..self.len() {
            let p = self.positions.row(i);
            for a in 0..3 {
                c[a] += p[a];
            }
        }
        for a in 0..3 {
            c[a] = c[a] / n;
        }
        c
    }

    /// Keep only the rows in `keep` (in the given order).
    pub fn select(&self, keep: &[usize]) -> Result<Self> {
        let gather2 = |t: &Tensor<T>| {
            let mut out = Tensor::zeros(&[keep.len(), t.cols()]);
            for (dst, &src) in keep.iter().enumerate() {
                out.row_mut(dst).copy_from_slice(t.row(src));
            }
            out
        };
        let mut op = Tensor::zeros(&[keep.len()]);
        for (dst, &src) in keep.iter().enumerate() {
            op.data_mut()[dst] = self.opacities.data()[src];
        }
        Self::new(
            gather2(&self.positions),
            gather2(&self.scales),
            gather2(&self.rotations),
            op,
            gather2(&self.sh_coeffs),
            self.sh_order,
        )
    }
}

/// Rotation matrix from a unit quaternion (w, x, y, z).
pub fn quat_to_rot<T: Real>(q: [T; 4]) -> [[T; 3]; 3] {
    let (w, x, y, z) = (q[0], q[1], q[2], q[3]);
    let two = real::<T>(2.0);
    [
        [
            T::one() - two * (y * y + z * z),
            two * (x * y - w * z),
            two * (x * z + w * y),
        ],
        [
            two * (x * y + w * z),
            T::one() - two * (x * x + z * z),
            two * (y * z - w * x),
        ],
        [
            two * (x * z - w * y),
            two * (y * z + w * x),
            T::one() - two * (x * x + y * y),
        ],
    ]
}

/// Affine parameters of the [-1,1] normalization: one (min, max) pair per
/// feature column, organized by the property-group column layout. Columns
/// where max == min are degenerate; they map to zero and denormalize back to
/// the recorded value, which keeps single-primitive clouds exactly
/// round-trippable.
#[derive(Debug, Clone, PartialEq)]
pub struct NormParams<T: Real> {
    pub ranges: Vec<(T, T)>,
    pub degenerate: Vec<bool>,
    pub sh_order: usize,
}

impl<T: Real> NormParams<T> {
    /// True when every column of the group is degenerate.
    pub fn group_degenerate(&self, group: PropertyGroup) -> bool {
        group.columns(self.sh_order).all(|c| self.degenerate[c])
    }
}

/// A cloud mapped into [-1,1] per property group.
#[derive(Debug, Clone)]
pub struct NormalizedCloud<T: Real> {
    pub features: Tensor<T>,
    pub params: NormParams<T>,
}

impl<T: Real> NormalizedCloud<T> {
    pub fn len(&self) -> usize {
        self.features.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn feature_dim(&self) -> usize {
        self.features.cols()
    }
}

/// Map every feature column affinely into [-1,1] using per-cloud min/max.
pub fn normalize<T: Real>(cloud: &GaussianCloud<T>) -> Result<NormalizedCloud<T>> {
    if cloud.is_empty() {
        return Err(Error::Shape("cannot normalize an empty cloud".into()));
    }
    let features = cloud.to_features();
    let d = features.cols();
    let mut ranges = Vec::with_capacity(d);
    let mut degenerate = Vec::with_capacity(d);
    for c in 0..d {
        let mut lo = T::infinity();
        let mut hi = T::neg_infinity();
        for r in 0..features.rows() {
            let v = features.at2(r, c);
            lo = lo.min(v);
            hi = hi.max(v);
        }
        degenerate.push(hi == lo);
        ranges.push((lo, hi));
    }
    let params = NormParams { ranges, degenerate, sh_order: cloud.sh_order };
    let mut out = features;
    apply_normalization(&mut out, &params);
    Ok(NormalizedCloud { features: out, params })
}

fn apply_normalization<T: Real>(features: &mut Tensor<T>, params: &NormParams<T>) {
    let two = real::<T>(2.0);
    for r in 0..features.rows() {
        for (c, v) in features.row_mut(r).iter_mut().enumerate() {
            let (lo, hi) = params.ranges[c];
            *v = if params.degenerate[c] {
                T::zero()
            } else {
                two * (*v - lo) / (hi - lo) - T::one()
            };
        }
    }
}

/// Inverse affine map plus validity clamps (unit quaternions, opacity in
/// [0,1], scale floor). Degenerate columns return their recorded value.
pub fn denormalize<T: Real>(norm: &NormalizedCloud<T>) -> Result<GaussianCloud<T>> {
    let d = feature_dim(norm.params.sh_order);
    if norm.features.cols() != d || norm.params.ranges.len() != d {
        return Err(Error::Shape(format!(
            "feature width {} does not match norm params (d_g = {d})",
            norm.features.cols()
        )));
    }
    let mut raw = norm.features.clone();
    let half = real::<T>(0.5);
    for r in 0..raw.rows() {
        for (c, v) in raw.row_mut(r).iter_mut().enumerate() {
            let (lo, hi) = norm.params.ranges[c];
            *v = if norm.params.degenerate[c] {
                lo
            } else {
                (*v + T::one()) * half * (hi - lo) + lo
            };
        }
    }
    GaussianCloud::from_features(&raw, norm.params.sh_order)
}

/// Per-column affine coefficients (scale, offset) of the denormalization,
/// for building the inverse map on a tape: raw = feature * scale + offset.
pub fn denorm_affine<T: Real>(params: &NormParams<T>) -> (Vec<T>, Vec<T>) {
    let half = real::<T>(0.5);
    let mut scales = Vec::with_capacity(params.ranges.len());
    let mut offsets = Vec::with_capacity(params.ranges.len());
    for (c, &(lo, hi)) in params.ranges.iter().enumerate() {
        if params.degenerate[c] {
            scales.push(T::zero());
            offsets.push(lo);
        } else {
            scales.push((hi - lo) * half);
            offsets.push((hi + lo) * half);
        }
    }
    (scales, offsets)
}
