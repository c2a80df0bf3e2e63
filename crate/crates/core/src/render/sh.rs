//! Real spherical-harmonic color evaluation (orders 0..=3) with analytic
//! derivatives w.r.t. coefficients and view direction.

use splatmark_autograd::{real, Real};

pub const C0: f64 = 0.282_094_791_773_878_14;
const C1: f64 = 0.488_602_511_902_919_9;
const C2: [f64; 5] = [
    1.092_548_430_592_079_2,
    -1.092_548_430_592_079_2,
    0.315_391_565_252_520_05,
    -1.092_548_430_592_079_2,
    0.546_274_215_296_039_6,
];
const C3: [f64; 7] = [
    -0.590_043_589_926_643_5,
    2.890_611_442_640_554,
    -0.457_045_799_464_465_8,
    0.373_176_332_590_115_4,
    -0.457_045_799_464_465_8,
    1.445_305_721_320_277,
    -0.590_043_589_926_643_5,
];

/// Basis values for direction `d` (unit vector), `(order+1)^2` entries.
pub fn basis<T: Real>(order: usize, d: [T; 3]) -> Vec<T> {
    let (x, y, z) = (d[0], d[1], d[2]);
    let mut b = Vec::with_capacity((order + 1) * (order + 1));
    b.push(real(C0));
    if order >= 1 {
        let c1 = real::<T>(C1);
        b.push(-c1 * y);
        b.push(c1 * z);
        b.push(-c1 * x);
    }
    if order >= 2 {
        let (xx, yy, zz) = (x * x, y * y, z * z);
        b.push(real::<T>(C2[0]) * x * y);
        b.push(real::<T>(C2[1]) * y * z);
        b.push(real::<T>(C2[2]) * (real::<T>(2.0) * zz - xx - yy));
        b.push(real::<T>(C2[3]) * x * z);
        b.push(real::<T>(C2[4]) * (xx - yy));
    }
    if order >= 3 {
        let (xx, yy, zz) = (x * x, y * y, z * z);
        let three = real::<T>(3.0);
        let four = real::<T>(4.0);
        let two = real::<T>(2.0);
        b.push(real::<T>(C3[0]) * y * (three * xx - yy));
        b.push(real::<T>(C3[1]) * x * y * z);
        b.push(real::<T>(C3[2]) * y * (four * zz - xx - yy));
        b.push(real::<T>(C3[3]) * z * (two * zz - three * xx - three * yy));
        b.push(real::<T>(C3[4]) * x * (four * zz - xx - yy));
        b.push(real::<T>(C3[5]) * z * (xx - yy));
        b.push(real::<T>(C3[6]) * x * (xx - three * yy));
    }
    b
}

/// Jacobian of the basis w.r.t. the direction: rows match `basis`, columns
/// are (d/dx, d/dy, d/dz).
pub fn basis_jacobian<T: Real>(order: usize, d: [T; 3]) -> Vec<[T; 3]> {
    let (x, y, z) = (d[0], d[1], d[2]);
    let zero = T::zero();
    let mut j: Vec<[T; 3]> = Vec::with_capacity((order + 1) * (order + 1));
    j.push([zero, zero, zero]);
    if order >= 1 {
        let c1 = real::<T>(C1);
        j.push([zero, -c1, zero]);
        j.push([zero, zero, c1]);
        j.push([-c1, zero, zero]);
    }
    if order >= 2 {
        let two = real::<T>(2.0);
        let four = real::<T>(4.0);
        let c = |i: usize| real::<T>(C2[i]);
        j.push([c(0) * y, c(0) * x, zero]);
        j.push([zero, c(1) * z, c(1) * y]);
        j.push([-two * c(2) * x, -two * c(2) * y, four * c(2) * z]);
        j.push([c(3) * z, zero, c(3) * x]);
        j.push([two * c(4) * x, -two * c(4) * y, zero]);
    }
    if order >= 3 {
        let (xx, yy, zz) = (x * x, y * y, z * z);
        let two = real::<T>(2.0);
        let three = real::<T>(3.0);
        let four = real::<T>(4.0);
        let six = real::<T>(6.0);
        let eight = real::<T>(8.0);
        let c = |i: usize| real::<T>(C3[i]);
        j.push([six * c(0) * x * y, c(0) * (three * xx - three * yy), zero]);
        j.push([c(1) * y * z, c(1) * x * z, c(1) * x * y]);
        j.push([
            -two * c(2) * x * y,
            c(2) * (four * zz - xx - three * yy),
            eight * c(2) * y * z,
        ]);
        j.push([
            -six * c(3) * x * z,
            -six * c(3) * y * z,
            c(3) * (six * zz - three * xx - three * yy),
        ]);
        j.push([
            c(4) * (four * zz - three * xx - yy),
            -two * c(4) * x * y,
            eight * c(4) * x * z,
        ]);
        j.push([two * c(5) * x * z, -two * c(5) * y * z, c(5) * (xx - yy)]);
        j.push([c(6) * (three * xx - three * yy), -six * c(6) * x * y, zero]);
    }
    j
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn jacobian_matches_finite_differences() {
        let d = [0.36f64, -0.48, 0.8]; // unit
        for order in 0..=3 {
            let jac = basis_jacobian(order, d);
            let h = 1e-6;
            for axis in 0..3 {
                let mut dp = d;
                dp[axis] += h;
                let mut dm = d;
                dm[axis] -= h;
                let bp = basis(order, dp);
                let bm = basis(order, dm);
                for (row, (p, m)) in bp.iter().zip(bm.iter()).enumerate() {
                    let fd = (p - m) / (2.0 * h);
                    assert!(
                        (jac[row][axis] - fd).abs() < 1e-6,
                        "order {order} row {row} axis {axis}: {} vs {fd}",
                        jac[row][axis]
                    );
                }
            }
        }
    }

    #[test]
    fn order_zero_is_constant() {
        let b = basis::<f64>(0, [1.0, 0.0, 0.0]);
        assert_eq!(b.len(), 1);
        assert!((b[0] - C0).abs() < 1e-15);
    }
}
