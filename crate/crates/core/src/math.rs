//! Quaternions, rigid transforms and small-matrix helpers shared by the
//! field, rasterizer and geometry modules.
//!
//! Conventions: quaternions are stored `(w, x, y, z)`; rotation matrices act
//! on column vectors; rigid transforms map points as `R * p + t`.

use nalgebra::{Matrix3, Matrix4, Vector3};

use crate::error::{Error, Result};
use crate::float::{cast, Float};

pub type Vec3<T> = Vector3<T>;
pub type Mat3<T> = Matrix3<T>;

/// Rotation quaternion, scalar-first storage. Not forced to unit norm:
/// optimizers perturb the raw components and re-normalize after each step,
/// so all consumers normalize on use.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Quat<T> {
    pub w: T,
    pub x: T,
    pub y: T,
    pub z: T,
}

impl<T: Float> Quat<T> {
    pub fn new(w: T, x: T, y: T, z: T) -> Self {
        Self { w, x, y, z }
    }

    pub fn identity() -> Self {
        Self::new(T::one(), T::zero(), T::zero(), T::zero())
    }

    pub fn norm(&self) -> T {
        (self.w * self.w + self.x * self.x + self.y * self.y + self.z * self.z).sqrt()
    }

    pub fn normalized(&self) -> Self {
        let n = self.norm();
        if n <= T::zero() {
            return Self::identity();
        }
        Self::new(self.w / n, self.x / n, self.y / n, self.z / n)
    }

    /// Hamilton product `self * rhs` (applies `rhs` first).
    pub fn mul(&self, rhs: &Quat<T>) -> Quat<T> {
        Quat::new(
            self.w * rhs.w - self.x * rhs.x - self.y * rhs.y - self.z * rhs.z,
            self.w * rhs.x + self.x * rhs.w + self.y * rhs.z - self.z * rhs.y,
            self.w * rhs.y - self.x * rhs.z + self.y * rhs.w + self.z * rhs.x,
            self.w * rhs.z + self.x * rhs.y - self.y * rhs.x + self.z * rhs.w,
        )
    }

    /// Rotation matrix of the normalized quaternion.
    pub fn rotation_matrix(&self) -> Mat3<T> {
        let q = self.normalized();
        let (w, x, y, z) = (q.w, q.x, q.y, q.z);
        let two = cast::<T>(2.0);
        Mat3::new(
            T::one() - two * (y * y + z * z),
            two * (x * y - w * z),
            two * (x * z + w * y),
            two * (x * y + w * z),
            T::one() - two * (x * x + z * z),
            two * (y * z - w * x),
            two * (x * z - w * y),
            two * (y * z + w * x),
            T::one() - two * (x * x + y * y),
        )
    }

    /// Pulls a gradient w.r.t. the rotation matrix back to the raw (possibly
    /// non-unit) quaternion components, through the normalization.
    pub fn backprop_rotation(&self, d_rot: &Mat3<T>) -> [T; 4] {
        let n = self.norm();
        let q = self.normalized();
        let (w, x, y, z) = (q.w, q.x, q.y, q.z);
        let two = cast::<T>(2.0);

        // dR/d(unit q): four 3x3 matrices.
        let zero = T::zero();
        let dw = Mat3::new(zero, -z, y, z, zero, -x, -y, x, zero) * two;
        let dx = Mat3::new(zero, y, z, y, -two * x, -w, z, w, -two * x) * two;
        let dy = Mat3::new(-two * y, x, w, x, zero, z, -w, z, -two * y) * two;
        let dz = Mat3::new(-two * z, -w, x, w, -two * z, y, x, y, zero) * two;

        let dot = |m: &Mat3<T>| -> T {
            let mut s = T::zero();
            for i in 0..3 {
                for j in 0..3 {
                    s += m[(i, j)] * d_rot[(i, j)];
                }
            }
            s
        };
        let g_unit = [dot(&dw), dot(&dx), dot(&dy), dot(&dz)];

        // Through normalization: d(unit)/d(raw) = (I - q q^T) / n.
        let qv = [w, x, y, z];
        let gq: T = (0..4).map(|i| g_unit[i] * qv[i]).sum();
        let mut out = [T::zero(); 4];
        for i in 0..4 {
            out[i] = (g_unit[i] - qv[i] * gq) / n;
        }
        out
    }
}

/// Rigid transform `p -> R p + t` with `R` orthonormal.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RigidTransform<T> {
    pub rotation: Mat3<T>,
    pub translation: Vec3<T>,
}

impl<T: Float> RigidTransform<T> {
    pub fn identity() -> Self {
        Self { rotation: Mat3::identity(), translation: Vec3::zeros() }
    }

    pub fn new(rotation: Mat3<T>, translation: Vec3<T>) -> Self {
        Self { rotation, translation }
    }

    /// Builds from a 4x4 row-major homogeneous matrix, validating that the
    /// upper-left block is a proper rotation (orthonormal within `tol`,
    /// det = +1) and the last row is `[0 0 0 1]`.
    pub fn from_matrix4_rows(rows: &[T; 16], tol: T) -> Result<Self> {
        let m = Matrix4::from_row_slice(rows);
        let r = m.fixed_view::<3, 3>(0, 0).into_owned();
        let rtr = r.transpose() * r;
        let mut err = T::zero();
        for i in 0..3 {
            for j in 0..3 {
                let target = if i == j { T::one() } else { T::zero() };
                err = err.max((rtr[(i, j)] - target).abs());
            }
        }
        if err > tol {
            return Err(Error::InvariantViolation(format!(
                "pose rotation not orthonormal (max |R^T R - I| = {:.3e})",
                err.to_f64_cfg()
            )));
        }
        let bottom = [m[(3, 0)], m[(3, 1)], m[(3, 2)], m[(3, 3)] - T::one()];
        if bottom.iter().any(|v| v.abs() > tol) {
            return Err(Error::InvariantViolation("pose last row is not [0 0 0 1]".into()));
        }
        if r.determinant() < T::zero() {
            return Err(Error::InvariantViolation(
                "pose rotation is a reflection (det = -1)".into(),
            ));
        }
        Ok(Self { rotation: r, translation: Vec3::new(m[(0, 3)], m[(1, 3)], m[(2, 3)]) })
    }

    pub fn to_matrix4_rows(&self) -> [T; 16] {
        let r = &self.rotation;
        let t = &self.translation;
        [
            r[(0, 0)], r[(0, 1)], r[(0, 2)], t[0],
            r[(1, 0)], r[(1, 1)], r[(1, 2)], t[1],
            r[(2, 0)], r[(2, 1)], r[(2, 2)], t[2],
            T::zero(), T::zero(), T::zero(), T::one(),
        ]
    }

    #[inline]
    pub fn apply(&self, p: &Vec3<T>) -> Vec3<T> {
        self.rotation * p + self.translation
    }

    pub fn inverse(&self) -> Self {
        let rt = self.rotation.transpose();
        Self { rotation: rt, translation: -(rt * self.translation) }
    }

    /// `self ∘ rhs`: applies `rhs` first.
    pub fn compose(&self, rhs: &RigidTransform<T>) -> Self {
        Self {
            rotation: self.rotation * rhs.rotation,
            translation: self.rotation * rhs.translation + self.translation,
        }
    }

    /// Quaternion of the rotation block (scalar-first), for composing with
    /// per-primitive orientations.
    pub fn rotation_quat(&self) -> Quat<T> {
        let r = &self.rotation;
        let trace = r[(0, 0)] + r[(1, 1)] + r[(2, 2)];
        let quarter = cast::<T>(0.25);
        if trace > T::zero() {
            let s = (trace + T::one()).sqrt() * cast::<T>(2.0);
            Quat::new(
                quarter * s,
                (r[(2, 1)] - r[(1, 2)]) / s,
                (r[(0, 2)] - r[(2, 0)]) / s,
                (r[(1, 0)] - r[(0, 1)]) / s,
            )
            .normalized()
        } else if r[(0, 0)] > r[(1, 1)] && r[(0, 0)] > r[(2, 2)] {
            let s = (T::one() + r[(0, 0)] - r[(1, 1)] - r[(2, 2)]).sqrt() * cast::<T>(2.0);
            Quat::new(
                (r[(2, 1)] - r[(1, 2)]) / s,
                quarter * s,
                (r[(0, 1)] + r[(1, 0)]) / s,
                (r[(0, 2)] + r[(2, 0)]) / s,
            )
            .normalized()
        } else if r[(1, 1)] > r[(2, 2)] {
            let s = (T::one() + r[(1, 1)] - r[(0, 0)] - r[(2, 2)]).sqrt() * cast::<T>(2.0);
            Quat::new(
                (r[(0, 2)] - r[(2, 0)]) / s,
                (r[(0, 1)] + r[(1, 0)]) / s,
                quarter * s,
                (r[(1, 2)] + r[(2, 1)]) / s,
            )
            .normalized()
        } else {
            let s = (T::one() + r[(2, 2)] - r[(0, 0)] - r[(1, 1)]).sqrt() * cast::<T>(2.0);
            Quat::new(
                (r[(1, 0)] - r[(0, 1)]) / s,
                (r[(0, 2)] + r[(2, 0)]) / s,
                (r[(1, 2)] + r[(2, 1)]) / s,
                quarter * s,
            )
            .normalized()
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;

    fn random_quat(rng: &mut ChaCha8Rng) -> Quat<f64> {
        Quat::new(
            rng.gen::<f64>() * 2.0 - 1.0,
            rng.gen::<f64>() * 2.0 - 1.0,
            rng.gen::<f64>() * 2.0 - 1.0,
            rng.gen::<f64>() * 2.0 - 1.0,
        )
    }

    fn rel_err(a: f64, b: f64) -> f64 {
        (a - b).abs() / a.abs().max(b.abs()).max(1e-8)
    }

    #[test]
    fn rotation_matrix_is_orthonormal() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..50 {
            let r = random_quat(&mut rng).rotation_matrix();
            let e = (r.transpose() * r - Mat3::identity()).abs().max();
            assert!(e < 1e-12, "R^T R != I, err {e}");
            assert!((r.determinant() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn rotation_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..20 {
            let q = random_quat(&mut rng);
            // Random linear functional of R.
            let w: Vec<f64> = (0..9).map(|_| rng.gen::<f64>() * 2.0 - 1.0).collect();
            let f = |q: &Quat<f64>| -> f64 {
                let r = q.rotation_matrix();
                let mut s = 0.0;
                for i in 0..3 {
                    for j in 0..3 {
                        s += w[i * 3 + j] * r[(i, j)];
                    }
                }
                s
            };
            let d_rot = Mat3::from_fn(|i, j| w[i * 3 + j]);
            let grad = q.backprop_rotation(&d_rot);
            let h = 1e-6;
            let comps = [q.w, q.x, q.y, q.z];
            for k in 0..4 {
                let mut plus = comps;
                plus[k] += h;
                let mut minus = comps;
                minus[k] -= h;
                let qp = Quat::new(plus[0], plus[1], plus[2], plus[3]);
                let qm = Quat::new(minus[0], minus[1], minus[2], minus[3]);
                let fd = (f(&qp) - f(&qm)) / (2.0 * h);
                assert!(
                    rel_err(fd, grad[k]) < 1e-5,
                    "component {k}: fd {fd} vs analytic {}",
                    grad[k]
                );
            }
        }
    }

    #[test]
    fn quat_product_composes_rotations() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..20 {
            let a = random_quat(&mut rng).normalized();
            let b = random_quat(&mut rng).normalized();
            let err = (a.mul(&b).rotation_matrix() - a.rotation_matrix() * b.rotation_matrix())
                .abs()
                .max();
            assert!(err < 1e-12);
        }
    }

    #[test]
    fn rotation_quat_round_trips() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..50 {
            let q = random_quat(&mut rng).normalized();
            let r = q.rotation_matrix();
            let t = RigidTransform::new(r, Vec3::new(0.0, 0.0, 0.0));
            let back = t.rotation_quat().rotation_matrix();
            let err = (back - r).abs().max();
            assert!(err < 1e-9, "round trip err {err}");
        }
    }

    #[test]
    fn transform_inverse_and_compose() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..20 {
            let t = RigidTransform::new(
                random_quat(&mut rng).rotation_matrix(),
                Vec3::new(rng.gen(), rng.gen(), rng.gen()),
            );
            let p = Vec3::new(rng.gen(), rng.gen(), rng.gen());
            let round = t.inverse().apply(&t.apply(&p));
            assert!((round - p).norm() < 1e-12);
            let composed = t.compose(&t.inverse());
            assert!((composed.rotation - Mat3::identity()).abs().max() < 1e-12);
            assert!(composed.translation.norm() < 1e-12);
        }
    }

    #[test]
    fn pose_validation_rejects_sheared_matrix() {
        let mut rows = [0.0f64; 16];
        rows[0] = 1.0;
        rows[5] = 1.0;
        rows[10] = 1.0;
        rows[15] = 1.0;
        rows[1] = 0.01; // shear
        let r = RigidTransform::from_matrix4_rows(&rows, 1e-5);
        assert!(r.is_err());
        rows[1] = 0.0;
        assert!(RigidTransform::from_matrix4_rows(&rows, 1e-5).is_ok());
    }
}
