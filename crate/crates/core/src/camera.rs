//! Pinhole orbit camera and pose sampling.

use rand::Rng;
use splatmark_autograd::{real, Real};

use crate::error::{Error, Result};

/// Orbit camera: position on a sphere around `target`, looking at it.
#[derive(Debug, Clone, PartialEq)]
pub struct Camera<T: Real> {
    pub elevation_deg: T,
    pub azimuth_deg: T,
    pub radius: T,
    pub fov_y_deg: T,
    pub width: usize,
    pub height: usize,
    pub target: [T; 3],
}

impl<T: Real> Camera<T> {
    pub fn new(
        elevation_deg: T,
        azimuth_deg: T,
        radius: T,
        fov_y_deg: T,
        width: usize,
        height: usize,
        target: [T; 3],
    ) -> Result<Self> {
        if width < 8 || height < 8 {
            return Err(Error::Config(format!(
                "image size {width}x{height} below 8x8 minimum"
            )));
        }
        if radius <= T::zero() {
            return Err(Error::Config("camera radius must be positive".into()));
        }
        if fov_y_deg <= T::zero() || fov_y_deg >= real(180.0) {
            return Err(Error::Config("fov_y must lie in (0, 180) degrees".into()));
        }
        Ok(Self { elevation_deg, azimuth_deg, radius, fov_y_deg, width, height, target })
    }

    pub fn eye(&self) -> [T; 3] {
        let e = self.elevation_deg.to_radians();
        let a = self.azimuth_deg.to_radians();
        let (ce, se) = (e.cos(), e.sin());
        let (ca, sa) = (a.cos(), a.sin());
        [
            self.target[0] + self.radius * ce * ca,
            self.target[1] + self.radius * ce * sa,
            self.target[2] + self.radius * se,
        ]
    }

    /// World-to-camera rotation, rows = camera axes (x right, y down,
    /// z forward). Falls back to a y-up frame near the poles.
    pub fn world_to_camera(&self) -> ([[T; 3]; 3], [T; 3]) {
        let eye = self.eye();
        let mut fwd = [
            self.target[0] - eye[0],
            self.target[1] - eye[1],
            self.target[2] - eye[2],
        ];
        normalize3(&mut fwd);
        let up = if fwd[2].abs() > real(0.999_9) {
            [T::zero(), T::one(), T::zero()]
        } else {
            [T::zero(), T::zero(), T::one()]
        };
        let mut right = cross(fwd, up);
        normalize3(&mut right);
        let down = cross(fwd, right);
        // rows: x_cam = right, y_cam = -? down is fwd x right which points
        // opposite to `up`, i.e. screen-down. Image y grows downward.
        ([right, down, fwd], eye)
    }

    /// Focal length in pixels (square pixels, vertical fov).
    pub fn focal(&self) -> T {
        let half = self.fov_y_deg.to_radians() * real(0.5);
        real::<T>(self.height as f64) * real::<T>(0.5) / half.tan()
    }
}

fn normalize3<T: Real>(v: &mut [T; 3]) {
    let n = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
    for x in v.iter_mut() {
        *x = *x / n;
    }
}

fn cross<T: Real>(a: [T; 3], b: [T; 3]) -> [T; 3] {
    [
        a[1] * b[2] - a[2] * b[1],
        a[2] * b[0] - a[0] * b[2],
        a[0] * b[1] - a[1] * b[0],
    ]
}

/// Defaults shared by pose sampling and the synthetic dataset: objects are
/// built around the origin with unit-ish extent.
#[derive(Debug, Clone)]
pub struct PoseDefaults<T: Real> {
    pub radius: T,
    pub fov_y_deg: T,
    pub train_size: usize,
    pub eval_size: usize,
    pub target: [T; 3],
}

impl<T: Real> Default for PoseDefaults<T> {
    fn default() -> Self {
        Self {
            radius: real(2.5),
            fov_y_deg: real(50.0),
            train_size: 64,
            eval_size: 128,
            target: [T::zero(); 3],
        }
    }
}

pub const EVAL_POSE_COUNT: usize = 40;

/// Training pose: elevation uniform in [-90, 90], azimuth uniform in [0, 360).
pub fn sample_train_camera<T: Real, R: Rng>(
    defaults: &PoseDefaults<T>,
    rng: &mut R,
) -> Camera<T> {
    let elev = real::<T>(rng.gen_range(-90.0..=90.0));
    let azim = real::<T>(rng.gen_range(0.0..360.0));
    Camera::new(
        elev,
        azim,
        defaults.radius,
        defaults.fov_y_deg,
        defaults.train_size,
        defaults.train_size,
        defaults.target,
    )
    .expect("defaults are valid")
}

/// Evaluation pose r of 40: azimuth 9 deg * r, elevation spread evenly over
/// [-5, 5] so the grid is deterministic.
pub fn eval_camera<T: Real>(defaults: &PoseDefaults<T>, index: usize) -> Result<Camera<T>> {
    if index >= EVAL_POSE_COUNT {
        return Err(Error::Bounds { index, len: EVAL_POSE_COUNT });
    }
    let azim = real::<T>(9.0 * index as f64);
    let elev = real::<T>(-5.0 + 10.0 * index as f64 / (EVAL_POSE_COUNT - 1) as f64);
    Camera::new(
        elev,
        azim,
        defaults.radius,
        defaults.fov_y_deg,
        defaults.eval_size,
        defaults.eval_size,
        defaults.target,
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha12Rng;

    #[test]
    fn eval_grid_azimuths() {
        let d = PoseDefaults::<f64>::default();
        assert_eq!(eval_camera(&d, 0).unwrap().azimuth_deg, 0.0);
        assert_eq!(eval_camera(&d, 39).unwrap().azimuth_deg, 351.0);
        assert!(eval_camera(&d, 40).is_err());
        for r in 0..EVAL_POSE_COUNT {
            let c = eval_camera(&d, r).unwrap();
            assert!((-5.0..=5.0).contains(&c.elevation_deg));
        }
    }

    #[test]
    fn train_sampling_ranges() {
        let d = PoseDefaults::<f64>::default();
        let mut rng = ChaCha12Rng::seed_from_u64(0);
        for _ in 0..1000 {
            let c = sample_train_camera(&d, &mut rng);
            assert!((-90.0..=90.0).contains(&c.elevation_deg));
            assert!((0.0..360.0).contains(&c.azimuth_deg));
        }
    }

    #[test]
    fn camera_frame_is_orthonormal() {
        let d = PoseDefaults::<f64>::default();
        let cam = Camera::new(30.0, 120.0, d.radius, d.fov_y_deg, 64, 64, d.target).unwrap();
        let (r, eye) = cam.world_to_camera();
        for i in 0..3 {
            for j in 0..3 {
                let dot: f64 = (0..3).map(|k| r[i][k] * r[j][k]).sum();
                let expect = if i == j { 1.0 } else { 0.0 };
                assert!((dot - expect).abs() < 1e-12);
            }
        }
        // target maps to +z axis at distance radius
        let t = [
            r[0][0] * (0.0 - eye[0]) + r[0][1] * (0.0 - eye[1]) + r[0][2] * (0.0 - eye[2]),
            r[1][0] * (0.0 - eye[0]) + r[1][1] * (0.0 - eye[1]) + r[1][2] * (0.0 - eye[2]),
            r[2][0] * (0.0 - eye[0]) + r[2][1] * (0.0 - eye[1]) + r[2][2] * (0.0 - eye[2]),
        ];
        assert!(t[0].abs() < 1e-12 && t[1].abs() < 1e-12);
        assert!((t[2] - d.radius).abs() < 1e-12);
    }

    #[test]
    fn rejects_invalid_cameras() {
        assert!(Camera::<f64>::new(0.0, 0.0, 2.0, 50.0, 4, 64, [0.0; 3]).is_err());
        assert!(Camera::<f64>::new(0.0, 0.0, -1.0, 50.0, 64, 64, [0.0; 3]).is_err());
        assert!(Camera::<f64>::new(0.0, 0.0, 2.0, 181.0, 64, 64, [0.0; 3]).is_err());
    }
}
