//! Real spherical harmonics up to degree 3 for view-dependent color.
//!
//! Colors are stored as 16 coefficients per channel (layout: coefficient-major,
//! RGB innermost, 48 floats total) and evaluated as
//! `color(dir) = sum_k c_k * Y_k(dir) + 0.5` with no clamping; exporters clamp
//! to `[0, 1]` when quantizing.

use crate::float::{cast, Float};
use crate::math::Vec3;

pub const SH_COEFFS: usize = 16;
pub const SH_VALUES: usize = SH_COEFFS * 3;
/// `Y_0`: constant term of the basis.
pub const SH_C0: f64 = 0.28209479177387814;

const C1: f64 = 0.4886025119029199;
const C2: [f64; 5] = [
    1.0925484305920792,
    -1.0925484305920792,
    0.31539156525252005,
    -1.0925484305920792,
    0.5462742152960396,
];
const C3: [f64; 7] = [
    -0.5900435899266435,
    2.890611442640554,
    -0.4570457994644658,
    0.3731763325901154,
    -0.4570457994644658,
    1.445305721320277,
    -0.5900435899266435,
];

/// Number of coefficients active at a given degree (0..=3).
pub fn coeffs_for_degree(degree: usize) -> usize {
    (degree + 1) * (degree + 1)
}

/// Evaluates the 16 basis functions at a unit direction. Entries beyond
/// `coeffs_for_degree(degree)` are zero.
pub fn eval_basis<T: Float>(dir: &Vec3<T>, degree: usize) -> [T; SH_COEFFS] {
    let (x, y, z) = (dir[0], dir[1], dir[2]);
    let mut b = [T::zero(); SH_COEFFS];
    b[0] = cast(SH_C0);
    if degree >= 1 {
        let c1 = cast::<T>(C1);
        b[1] = -c1 * y;
        b[2] = c1 * z;
        b[3] = -c1 * x;
    }
    if degree >= 2 {
        let (xx, yy, zz) = (x * x, y * y, z * z);
        b[4] = cast::<T>(C2[0]) * x * y;
        b[5] = cast::<T>(C2[1]) * y * z;
        b[6] = cast::<T>(C2[2]) * (cast::<T>(2.0) * zz - xx - yy);
        b[7] = cast::<T>(C2[3]) * x * z;
        b[8] = cast::<T>(C2[4]) * (xx - yy);
    }
    if degree >= 3 {
        let (xx, yy, zz) = (x * x, y * y, z * z);
        let three = cast::<T>(3.0);
        let four = cast::<T>(4.0);
        b[9] = cast::<T>(C3[0]) * y * (three * xx - yy);
        b[10] = cast::<T>(C3[1]) * x * y * z;
        b[11] = cast::<T>(C3[2]) * y * (four * zz - xx - yy);
        b[12] = cast::<T>(C3[3]) * z * (cast::<T>(2.0) * zz - three * xx - three * yy);
        b[13] = cast::<T>(C3[4]) * x * (four * zz - xx - yy);
        b[14] = cast::<T>(C3[5]) * z * (xx - yy);
        b[15] = cast::<T>(C3[6]) * x * (xx - three * yy);
    }
    b
}

/// Component-wise gradients `dY_k/d(x,y,z)` treating the direction entries as
/// free variables (the unit-normalization Jacobian is applied by the caller).
pub fn eval_basis_grad<T: Float>(dir: &Vec3<T>, degree: usize) -> [[T; 3]; SH_COEFFS] {
    let (x, y, z) = (dir[0], dir[1], dir[2]);
    let zero = T::zero();
    let mut g = [[zero; 3]; SH_COEFFS];
    if degree >= 1 {
        let c1 = cast::<T>(C1);
        g[1] = [zero, -c1, zero];
        g[2] = [zero, zero, c1];
        g[3] = [-c1, zero, zero];
    }
    if degree >= 2 {
        let two = cast::<T>(2.0);
        let c = |i: usize| cast::<T>(C2[i]);
        g[4] = [c(0) * y, c(0) * x, zero];
        g[5] = [zero, c(1) * z, c(1) * y];
        g[6] = [-two * c(2) * x, -two * c(2) * y, cast::<T>(4.0) * c(2) * z];
        g[7] = [c(3) * z, zero, c(3) * x];
        g[8] = [two * c(4) * x, -two * c(4) * y, zero];
    }
    if degree >= 3 {
        let (xx, yy, zz) = (x * x, y * y, z * z);
        let two = cast::<T>(2.0);
        let three = cast::<T>(3.0);
        let four = cast::<T>(4.0);
        let six = cast::<T>(6.0);
        let eight = cast::<T>(8.0);
        let c = |i: usize| cast::<T>(C3[i]);
        g[9] = [c(0) * six * x * y, c(0) * (three * xx - three * yy), zero];
        g[10] = [c(1) * y * z, c(1) * x * z, c(1) * x * y];
        g[11] = [-c(2) * two * x * y, c(2) * (four * zz - xx - three * yy), c(2) * eight * y * z];
        g[12] = [-c(3) * six * x * z, -c(3) * six * y * z, c(3) * (six * zz - three * xx - three * yy)];
        g[13] = [c(4) * (four * zz - three * xx - yy), -c(4) * two * x * y, c(4) * eight * x * z];
        g[14] = [c(5) * two * x * z, -c(5) * two * y * z, c(5) * (xx - yy)];
        g[15] = [c(6) * (three * xx - three * yy), -c(6) * six * x * y, zero];
    }
    g
}

/// Evaluates RGB color from 48 coefficients (`[coeff][channel]` layout).
pub fn eval_color<T: Float>(coeffs: &[T], dir: &Vec3<T>, degree: usize) -> [T; 3] {
    debug_assert_eq!(coeffs.len(), SH_VALUES);
    let b = eval_basis(dir, degree);
    let half = cast::<T>(0.5);
    let mut out = [half; 3];
    for k in 0..coeffs_for_degree(degree) {
        for ch in 0..3 {
            out[ch] += coeffs[k * 3 + ch] * b[k];
        }
    }
    out
}

/// DC coefficient that evaluates to the given channel value under
/// [`eval_color`] with all higher orders zero.
pub fn dc_from_channel<T: Float>(value: T) -> T {
    (value - cast::<T>(0.5)) / cast::<T>(SH_C0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;

    fn random_dir(rng: &mut ChaCha8Rng) -> Vec3<f64> {
        loop {
            let v = Vec3::new(
                rng.gen::<f64>() * 2.0 - 1.0,
                rng.gen::<f64>() * 2.0 - 1.0,
                rng.gen::<f64>() * 2.0 - 1.0,
            );
            let n = v.norm();
            if n > 1e-3 {
                return v / n;
            }
        }
    }

    #[test]
    fn basis_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let h = 1e-6;
        for _ in 0..20 {
            let d = random_dir(&mut rng);
            let g = eval_basis_grad(&d, 3);
            for axis in 0..3 {
                let mut dp = d;
                dp[axis] += h;
                let mut dm = d;
                dm[axis] -= h;
                let bp = eval_basis(&dp, 3);
                let bm = eval_basis(&dm, 3);
                for k in 0..SH_COEFFS {
                    let fd = (bp[k] - bm[k]) / (2.0 * h);
                    let err = (fd - g[k][axis]).abs();
                    assert!(err < 1e-6, "coeff {k} axis {axis}: fd {fd} vs {}", g[k][axis]);
                }
            }
        }
    }

    #[test]
    fn dc_round_trip_reproduces_color() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..20 {
            let rgb = [rng.gen::<f64>(), rng.gen::<f64>(), rng.gen::<f64>()];
            let mut coeffs = vec![0.0f64; SH_VALUES];
            for ch in 0..3 {
                coeffs[ch] = dc_from_channel(rgb[ch]);
            }
            let dir = random_dir(&mut rng);
            let out = eval_color(&coeffs, &dir, 0);
            for ch in 0..3 {
                assert!((out[ch] - rgb[ch]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn degree_truncation_zeroes_higher_orders() {
        let d = Vec3::new(0.3f64, -0.5, 0.81).normalize();
        let b = eval_basis(&d, 1);
        assert!(b[4..].iter().all(|&v| v == 0.0));
        assert!(b[1..4].iter().any(|&v| v != 0.0));
    }
}
