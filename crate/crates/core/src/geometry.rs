//! Depth-map geometry: back-projection into world point clouds, Sobel
//! surface normals, and assembly of the colored + oriented cloud handed to
//! the grasp filter.

use crate::camera::{CameraView, Intrinsics};
use crate::error::{Error, Result};
use crate::field::GaussianField;
use crate::float::{cast, Float};
use crate::image::Image;
use crate::math::{RigidTransform, Vec3};
use crate::query::{largest_component, Localization, REPROJECTION_MIN_ALPHA};
use crate::raster::{self, ChannelSet, RasterConfig, RenderCamera};
use crate::sh::SH_C0;

/// World-frame point cloud with optional per-point colors and unit normals.
#[derive(Debug, Clone, Default)]
pub struct PointCloud<T> {
    pub points: Vec<Vec3<T>>,
    pub colors: Option<Vec<[T; 3]>>,
    pub normals: Option<Vec<Vec3<T>>>,
}

impl<T: Float> PointCloud<T> {
    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn validate(&self) -> Result<()> {
        if let Some(c) = &self.colors {
            if c.len() != self.points.len() {
                return Err(Error::ShapeMismatch(format!(
                    "{} colors for {} points",
                    c.len(),
                    self.points.len()
                )));
            }
        }
        if let Some(ns) = &self.normals {
            if ns.len() != self.points.len() {
                return Err(Error::ShapeMismatch(format!(
                    "{} normals for {} points",
                    ns.len(),
                    self.points.len()
                )));
            }
            for n in ns {
                if (n.norm() - T::one()).abs() > cast::<T>(1e-5) {
                    return Err(Error::InvariantViolation(format!(
                        "normal with norm {} is not unit",
                        n.norm().to_f64_cfg()
                    )));
                }
            }
        }
        Ok(())
    }
}

/// Back-projects the valid (optionally masked) depth pixels of a view into a
/// world-frame cloud, carrying the view's colors along.
pub fn backproject<T: Float>(
    view: &CameraView<T>,
    mask: Option<&[bool]>,
) -> Result<PointCloud<T>> {
    let (h, w) = (view.height(), view.width());
    if let Some(m) = mask {
        if m.len() != h * w {
            return Err(Error::ShapeMismatch(format!(
                "mask has {} entries for a {h}x{w} view",
                m.len()
            )));
        }
    }
    let mut points = Vec::new();
    let mut colors = Vec::new();
    for row in 0..h {
        for col in 0..w {
            if !view.depth_valid(row, col) {
                continue;
            }
            if let Some(m) = mask {
                if !m[row * w + col] {
                    continue;
                }
            }
            let p_cam = view.intrinsics.backproject_px(row, col, view.depth.at(row, col));
            points.push(view.pose.apply(&p_cam));
            let px = view.rgb.px(row, col);
            colors.push([px[0], px[1], px[2]]);
        }
    }
    if points.is_empty() {
        return Err(Error::NoValidDepth);
    }
    Ok(PointCloud { points, colors: Some(colors), normals: None })
}

const SOBEL: [[i32; 3]; 3] = [[-1, 0, 1], [-2, 0, 2], [-1, 0, 1]];

/// World-frame surface normals of a depth map via Sobel derivatives of the
/// back-projected camera-frame point grid.
///
/// A pixel is valid only when its full 3x3 neighborhood carries valid depth
/// (`0 < d < max_range`); invalid pixels yield a zero normal. Normals are
/// oriented toward the camera before rotation into the world frame.
pub fn normals_from_depth<T: Float>(
    depth: &Image<T>,
    intrinsics: &Intrinsics<T>,
    pose: &RigidTransform<T>,
    max_range: T,
) -> Result<Image<T>> {
    if depth.channels() != 1 {
        return Err(Error::ShapeMismatch(format!(
            "depth map has {} channels",
            depth.channels()
        )));
    }
    let (h, w) = (depth.height(), depth.width());
    let valid = |r: usize, c: usize| -> bool {
        let d = depth.at(r, c);
        d > T::zero() && d < max_range
    };
    let mut out = Image::zeros(h, w, 3);
    let mut any = false;
    for row in 1..h.saturating_sub(1) {
        'px: for col in 1..w - 1 {
            let mut grid = [[Vec3::zeros(); 3]; 3];
            for (dr, grow) in grid.iter_mut().enumerate() {
                for (dc, g) in grow.iter_mut().enumerate() {
                    let (r, c) = (row + dr - 1, col + dc - 1);
                    if !valid(r, c) {
                        continue 'px;
                    }
                    *g = intrinsics.backproject_px(r, c, depth.at(r, c));
                }
            }
            let mut d_du = Vec3::zeros();
            let mut d_dv = Vec3::zeros();
            for dr in 0..3 {
                for dc in 0..3 {
                    let ku = cast::<T>(SOBEL[dr][dc] as f64);
                    let kv = cast::<T>(SOBEL[dc][dr] as f64);
                    d_du += grid[dr][dc] * ku;
                    d_dv += grid[dr][dc] * kv;
                }
            }
            let n = d_du.cross(&d_dv);
            let len = n.norm();
            if len <= cast::<T>(1e-12) {
                continue;
            }
            let mut n = n / len;
            // Point the normal at the camera (origin of the camera frame).
            if n.dot(&grid[1][1]) > T::zero() {
                n = -n;
            }
            let n_world = pose.rotation * n;
            out.px_mut(row, col).copy_from_slice(&[n_world[0], n_world[1], n_world[2]]);
            any = true;
        }
    }
    if !any {
        return Err(Error::NoValidNeighborhood);
    }
    Ok(out)
}

/// Alpha-compensated depth of a render: `depth / alpha` where alpha exceeds
/// the re-projection gate, zero (invalid) elsewhere.
pub fn expected_depth<T: Float>(depth: &Image<T>, alpha: &Image<T>) -> Image<T> {
    let (h, w) = (depth.height(), depth.width());
    let gate = cast::<T>(REPROJECTION_MIN_ALPHA);
    let mut out = Image::zeros(h, w, 1);
    for row in 0..h {
        for col in 0..w {
            let a = alpha.at(row, col);
            if a > gate {
                out.set(row, col, depth.at(row, col) / a);
            }
        }
    }
    out
}

/// Assembles the cloud handed to the grasp filter: the queried object's
/// surface points re-projected from each view's rendered depth (colored by
/// the rendered image, oriented by Sobel normals of the rendered depth),
/// plus every primitive mean as scene context (colored by the base band of
/// its harmonics, oriented along its smallest axis).
///
/// Object pixels whose neighborhood supports no Sobel normal are dropped, so
/// the object-point count never exceeds the masked pixel count.
pub fn build_grasp_cloud<T: Float>(
    field: &GaussianField<T>,
    cams: &[RenderCamera<T>],
    loc: &Localization<T>,
    cfg: &RasterConfig,
) -> Result<PointCloud<T>> {
    if cams.len() != loc.mask2d.len() {
        return Err(Error::ShapeMismatch(format!(
            "{} cameras for {} localized views",
            cams.len(),
            loc.mask2d.len()
        )));
    }
    let mut cloud = PointCloud {
        points: Vec::new(),
        colors: Some(Vec::new()),
        normals: Some(Vec::new()),
    };
    let channels = ChannelSet { color: true, depth: true, ..Default::default() };
    let huge = cast::<T>(1e12);
    for (cam, mask) in cams.iter().zip(&loc.mask2d) {
        if !mask.iter().any(|&m| m) {
            continue;
        }
        let comp = largest_component(mask, cam.height, cam.width);
        let cache = raster::project(field, cam, cfg);
        let (out, _) = raster::render_forward(field, cam, channels, &cache, cfg);
        let depth = expected_depth(out.depth.as_ref().unwrap(), &out.alpha);
        let normals = match normals_from_depth(&depth, &cam.intrinsics, &cam.pose, huge) {
            Ok(n) => n,
            Err(Error::NoValidNeighborhood) => continue,
            Err(e) => return Err(e),
        };
        let rgb = out.color.as_ref().unwrap();
        for row in 0..cam.height {
            for col in 0..cam.width {
                if !comp[row * cam.width + col] {
                    continue;
                }
                let z = depth.at(row, col);
                if z <= T::zero() {
                    continue;
                }
                let n = normals.px(row, col);
                let n = Vec3::new(n[0], n[1], n[2]);
                if n.norm() < cast::<T>(0.5) {
                    continue; // no valid Sobel neighborhood
                }
                cloud.points.push(cam.pose.apply(&cam.intrinsics.backproject_px(row, col, z)));
                let px = rgb.px(row, col);
                cloud
                    .colors
                    .as_mut()
                    .unwrap()
                    .push([clamp01(px[0]), clamp01(px[1]), clamp01(px[2])]);
                cloud.normals.as_mut().unwrap().push(n);
            }
        }
    }
    if cloud.points.is_empty() {
        return Err(Error::NoValidPixels);
    }
    let c0 = cast::<T>(SH_C0);
    let half = cast::<T>(0.5);
    for i in 0..field.len() {
        cloud.points.push(field.means[i]);
        let sh = field.sh_of(i);
        cloud.colors.as_mut().unwrap().push([
            clamp01(sh[0] * c0 + half),
            clamp01(sh[1] * c0 + half),
            clamp01(sh[2] * c0 + half),
        ]);
        let rot = field.rotations[i].rotation_matrix();
        let s = field.scales[i];
        let mut k_min = 0;
        for k in 1..3 {
            if s[k] < s[k_min] {
                k_min = k;
            }
        }
        cloud.normals.as_mut().unwrap().push(Vec3::new(
            rot[(0, k_min)],
            rot[(1, k_min)],
            rot[(2, k_min)],
        ));
    }
    Ok(cloud)
}

#[inline]
fn clamp01<T: Float>(v: T) -> T {
    v.max(T::zero()).min(T::one())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::camera::default_max_range;
    use crate::math::{Mat3, Quat};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn test_view(depth: Image<f64>, pose: RigidTransform<f64>) -> CameraView<f64> {
        let (h, w) = (depth.height(), depth.width());
        CameraView {
            intrinsics: Intrinsics { fx: 40.0, fy: 42.0, cx: w as f64 / 2.0, cy: h as f64 / 2.0 },
            pose,
            rgb: Image::zeros(h, w, 3),
            depth,
            max_range: default_max_range(),
        }
    }

    fn random_pose(rng: &mut impl Rng) -> RigidTransform<f64> {
        let q = Quat::new(
            rng.gen_range(-1.0..1.0),
            rng.gen_range(-1.0..1.0),
            rng.gen_range(-1.0..1.0),
            rng.gen_range(-1.0..1.0),
        );
        RigidTransform::new(
            q.rotation_matrix(),
            Vec3::new(rng.gen_range(-2.0..2.0), rng.gen_range(-2.0..2.0), rng.gen_range(-2.0..2.0)),
        )
    }

    #[test]
    fn principal_point_backprojects_on_the_axis() {
        // 10x10 view, cx = cy = 5: pixel (4, 4) has center (4.5, 4.5), so use
        // intrinsics with half-pixel centers to land exactly on the axis.
        let mut depth = Image::zeros(10, 10, 1);
        depth.set(4, 4, 1.0);
        depth.set(4, 6, 1.0);
        let mut view = test_view(depth, RigidTransform::identity());
        view.intrinsics.cx = 4.5;
        view.intrinsics.cy = 4.5;
        view.intrinsics.fx = 2.0;
        view.intrinsics.fy = 2.0;
        let cloud = backproject(&view, None).unwrap();
        assert_eq!(cloud.len(), 2);
        // Pixel at the principal point at depth 1 is the optical axis point.
        assert!((cloud.points[0] - Vec3::new(0.0, 0.0, 1.0)).norm() < 1e-12);
        // Two pixels right of it: u - cx = 2 = fx, so x/z = 1.
        assert!((cloud.points[1] - Vec3::new(1.0, 0.0, 1.0)).norm() < 1e-12);
    }

    #[test]
    fn backprojection_matches_the_pinhole_model_under_any_pose() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        for _ in 0..20 {
            let h = 6;
            let w = 7;
            let mut depth = Image::zeros(h, w, 1);
            for v in depth.data_mut().iter_mut() {
                *v = rng.gen_range(0.2..4.0);
            }
            let view = test_view(depth, random_pose(&mut rng));
            let cloud = backproject(&view, None).unwrap();
            assert_eq!(cloud.len(), h * w);
            let mut i = 0;
            for row in 0..h {
                for col in 0..w {
                    let d = view.depth.at(row, col);
                    let x = (col as f64 + 0.5 - view.intrinsics.cx) * d / view.intrinsics.fx;
                    let y = (row as f64 + 0.5 - view.intrinsics.cy) * d / view.intrinsics.fy;
                    let want = view.pose.rotation * Vec3::new(x, y, d) + view.pose.translation;
                    assert!((cloud.points[i] - want).norm() < 1e-9);
                    i += 1;
                }
            }
        }
    }

    #[test]
    fn masked_and_invalid_pixels_are_skipped() {
        let mut depth = Image::zeros(3, 3, 1);
        depth.set(0, 0, 1.0);
        depth.set(1, 1, 2.0);
        depth.set(2, 2, 100.0); // beyond max range
        let view = test_view(depth, RigidTransform::identity());
        assert_eq!(backproject(&view, None).unwrap().len(), 2);
        let mut mask = vec![false; 9];
        mask[4] = true;
        assert_eq!(backproject(&view, Some(&mask)).unwrap().len(), 1);
        mask[4] = false;
        assert!(matches!(backproject(&view, Some(&mask)), Err(Error::NoValidDepth)));
        let empty = test_view(Image::zeros(3, 3, 1), RigidTransform::identity());
        assert!(matches!(backproject(&empty, None), Err(Error::NoValidDepth)));
    }

    #[test]
    fn flat_depth_yields_normals_facing_the_camera() {
        let depth = Image::from_vec(8, 8, 1, vec![2.0f64; 64]);
        let intr = Intrinsics { fx: 30.0, fy: 30.0, cx: 4.0, cy: 4.0 };
        let normals =
            normals_from_depth(&depth, &intr, &RigidTransform::identity(), 10.0).unwrap();
        let n = normals.px(3, 3);
        assert!((n[0]).abs() < 1e-12 && (n[1]).abs() < 1e-12);
        assert!((n[2] + 1.0).abs() < 1e-12, "camera-facing normal, got {n:?}");
        // Border pixels lack a full neighborhood.
        assert_eq!(normals.px(0, 3), &[0.0, 0.0, 0.0]);
        assert_eq!(normals.px(3, 7), &[0.0, 0.0, 0.0]);
    }

    #[test]
    fn tilted_plane_normal_is_recovered_within_half_a_degree() {
        // Plane x + z = 3 in the camera frame: unit normal (1, 0, 1)/sqrt(2),
        // flipped toward the camera to (-1, 0, -1)/sqrt(2).
        let (h, w) = (12, 12);
        let intr = Intrinsics { fx: 60.0f64, fy: 60.0, cx: 6.0, cy: 6.0 };
        let mut depth = Image::zeros(h, w, 1);
        for row in 0..h {
            for col in 0..w {
                let xz = (col as f64 + 0.5 - intr.cx) / intr.fx;
                depth.set(row, col, 3.0 / (1.0 + xz));
            }
        }
        let normals =
            normals_from_depth(&depth, &intr, &RigidTransform::identity(), 10.0).unwrap();
        let want = Vec3::new(-1.0, 0.0, -1.0) / 2.0f64.sqrt();
        for row in 2..h - 2 {
            for col in 2..w - 2 {
                let n = normals.px(row, col);
                let n = Vec3::new(n[0], n[1], n[2]);
                let angle = n.dot(&want).clamp(-1.0, 1.0).acos();
                assert!(angle < 0.5f64.to_radians(), "{:.4} deg off", angle.to_degrees());
            }
        }
    }

    #[test]
    fn normals_rotate_into_the_world_frame() {
        let depth = Image::from_vec(6, 6, 1, vec![1.5f64; 36]);
        let intr = Intrinsics { fx: 25.0, fy: 25.0, cx: 3.0, cy: 3.0 };
        // 90-degree rotation about x: camera -z maps to world +y.
        let rot = Mat3::new(1.0, 0.0, 0.0, 0.0, 0.0, -1.0, 0.0, 1.0, 0.0);
        let pose = RigidTransform::new(rot, Vec3::new(5.0, 0.0, 0.0));
        let normals = normals_from_depth(&depth, &intr, &pose, 10.0).unwrap();
        let n = normals.px(3, 3);
        assert!((Vec3::new(n[0], n[1], n[2]) - Vec3::new(0.0, 1.0, 0.0)).norm() < 1e-12);
    }

    #[test]
    fn depth_holes_invalidate_their_neighborhood() {
        let mut depth = Image::from_vec(7, 7, 1, vec![2.0f64; 49]);
        depth.set(3, 3, 0.0);
        let intr = Intrinsics { fx: 30.0, fy: 30.0, cx: 3.5, cy: 3.5 };
        let normals =
            normals_from_depth(&depth, &intr, &RigidTransform::identity(), 10.0).unwrap();
        for row in 2..=4 {
            for col in 2..=4 {
                assert_eq!(normals.px(row, col), &[0.0, 0.0, 0.0], "({row},{col})");
            }
        }
        assert!(normals.px(1, 1)[2] < -0.9);
        // All-invalid depth reports the dedicated error.
        let err = normals_from_depth(
            &Image::<f64>::zeros(5, 5, 1),
            &intr,
            &RigidTransform::identity(),
            10.0,
        )
        .unwrap_err();
        assert!(matches!(err, Error::NoValidNeighborhood));
    }

    #[test]
    fn expected_depth_divides_by_alpha_above_the_gate() {
        let depth = Image::from_vec(1, 3, 1, vec![1.0f64, 2.0, 3.0]);
        let alpha = Image::from_vec(1, 3, 1, vec![0.5f64, 0.8, 1.0]);
        let e = expected_depth(&depth, &alpha);
        assert_eq!(e.at(0, 0), 0.0); // at the gate, not above it
        assert!((e.at(0, 1) - 2.5).abs() < 1e-12);
        assert!((e.at(0, 2) - 3.0).abs() < 1e-12);
    }

    #[test]
    fn point_cloud_validation_checks_lengths_and_unit_normals() {
        let mut cloud = PointCloud::<f64> {
            points: vec![Vec3::zeros(), Vec3::new(1.0, 0.0, 0.0)],
            colors: Some(vec![[0.5; 3]; 2]),
            normals: Some(vec![Vec3::new(0.0, 0.0, 1.0); 2]),
        };
        cloud.validate().unwrap();
        cloud.normals.as_mut().unwrap()[1] = Vec3::new(0.0, 0.0, 0.9);
        assert!(matches!(cloud.validate(), Err(Error::InvariantViolation(_))));
        cloud.normals = None;
        cloud.colors.as_mut().unwrap().pop();
        assert!(matches!(cloud.validate(), Err(Error::ShapeMismatch(_))));
    }
}
