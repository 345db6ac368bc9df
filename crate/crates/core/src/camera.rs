//! Pinhole cameras and posed RGB-D views.
//!
//! Coordinate conventions:
//! - camera frame: `x` right, `y` down, `z` forward (optical axis);
//! - `pose` maps camera coordinates to world coordinates (`R p_cam + t`);
//! - continuous image coordinates `(u, v)` relate to the camera frame by
//!   `u = fx * x/z + cx`, `v = fy * y/z + cy`;
//! - the pixel at `(row, col)` is sampled at its center `(col + 0.5, row + 0.5)`.

use crate::error::{Error, Result};
use crate::float::{cast, Float};
use crate::image::Image;
use crate::math::{RigidTransform, Vec3};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Intrinsics<T> {
    pub fx: T,
    pub fy: T,
    pub cx: T,
    pub cy: T,
}

impl<T: Float> Intrinsics<T> {
    pub fn validate(&self) -> Result<()> {
        if !(self.fx > T::zero()) || !(self.fy > T::zero()) {
            return Err(Error::BadIntrinsics(format!(
                "focal lengths must be positive (fx = {}, fy = {})",
                self.fx.to_f64_cfg(),
                self.fy.to_f64_cfg()
            )));
        }
        for v in [self.fx, self.fy, self.cx, self.cy] {
            if !v.is_finite() {
                return Err(Error::BadIntrinsics("non-finite intrinsics".into()));
            }
        }
        Ok(())
    }

    /// Projects a camera-frame point to continuous image coordinates.
    #[inline]
    pub fn project(&self, p: &Vec3<T>) -> (T, T) {
        (self.fx * p[0] / p[2] + self.cx, self.fy * p[1] / p[2] + self.cy)
    }

    /// Camera-frame point of a pixel center at the given depth (camera z).
    #[inline]
    pub fn backproject_px(&self, row: usize, col: usize, depth: T) -> Vec3<T> {
        let u = cast::<T>(col as f64) + cast::<T>(0.5);
        let v = cast::<T>(row as f64) + cast::<T>(0.5);
        Vec3::new((u - self.cx) * depth / self.fx, (v - self.cy) * depth / self.fy, depth)
    }
}

/// One posed RGB-D view. `rgb` is `h x w x 3` in `[0, 1]`; `depth` is
/// `h x w x 1` in meters with `0` marking invalid pixels.
#[derive(Debug, Clone)]
pub struct CameraView<T> {
    pub intrinsics: Intrinsics<T>,
    /// Camera-to-world pose.
    pub pose: RigidTransform<T>,
    pub rgb: Image<T>,
    pub depth: Image<T>,
    /// Depth readings at or beyond this range are treated as invalid.
    pub max_range: T,
}

impl<T: Float> CameraView<T> {
    pub fn height(&self) -> usize {
        self.depth.height()
    }
    pub fn width(&self) -> usize {
        self.depth.width()
    }

    pub fn validate(&self) -> Result<()> {
        self.intrinsics.validate()?;
        if !self.rgb.same_shape(&Image::<T>::zeros(self.height(), self.width(), 3)) {
            return Err(Error::ShapeMismatch(format!(
                "rgb is {}x{}x{} but depth is {}x{}",
                self.rgb.height(),
                self.rgb.width(),
                self.rgb.channels(),
                self.height(),
                self.width()
            )));
        }
        for &d in self.depth.data() {
            if d < T::zero() || !d.is_finite() {
                return Err(Error::InvariantViolation("negative or non-finite depth".into()));
            }
        }
        Ok(())
    }

    /// World-space camera center.
    pub fn center(&self) -> Vec3<T> {
        self.pose.translation
    }

    /// World-to-camera transform.
    pub fn world_to_camera(&self) -> RigidTransform<T> {
        self.pose.inverse()
    }

    #[inline]
    pub fn depth_valid(&self, row: usize, col: usize) -> bool {
        let d = self.depth.at(row, col);
        d > T::zero() && d < self.max_range
    }
}

pub fn default_max_range<T: Float>() -> T {
    cast::<T>(10.0)
}
