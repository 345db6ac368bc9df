//! The Gaussian field: a flat collection of anisotropic 3D Gaussian
//! primitives with color, opacity and latent features, plus construction
//! from RGB-D views and rigid subset edits.

use std::collections::HashMap;

use rand::prelude::*;
use rand_chacha::ChaCha8Rng;

use crate::camera::CameraView;
use crate::error::{Error, Result};
use crate::float::{cast, Float};
use crate::hull::ConvexHull;
use crate::math::{Mat3, Quat, RigidTransform, Vec3};
use crate::sh::{dc_from_channel, SH_VALUES};

/// Scale clamp applied at initialization: primitives start between 1 mm and
/// 10 cm in radius regardless of sampling density.
pub const INIT_SCALE_MIN: f64 = 1e-3;
pub const INIT_SCALE_MAX: f64 = 0.1;
const INIT_OPACITY: f64 = 0.5;

/// Structure-of-arrays Gaussian field. Row `i` across all arrays describes
/// one primitive; `sh` holds 48 floats per primitive (16 coefficients,
/// RGB innermost) and `features` holds `d_latent` floats per primitive.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianField<T> {
    pub means: Vec<Vec3<T>>,
    pub rotations: Vec<Quat<T>>,
    pub scales: Vec<Vec3<T>>,
    pub opacities: Vec<T>,
    pub sh: Vec<T>,
    pub features: Vec<T>,
    pub d_latent: usize,
}

impl<T: Float> GaussianField<T> {
    pub fn empty(d_latent: usize) -> Self {
        Self {
            means: Vec::new(),
            rotations: Vec::new(),
            scales: Vec::new(),
            opacities: Vec::new(),
            sh: Vec::new(),
            features: Vec::new(),
            d_latent,
        }
    }

    pub fn len(&self) -> usize {
        self.means.len()
    }

    pub fn is_empty(&self) -> bool {
        self.means.is_empty()
    }

    pub fn sh_of(&self, i: usize) -> &[T] {
        &self.sh[i * SH_VALUES..(i + 1) * SH_VALUES]
    }

    pub fn feature_of(&self, i: usize) -> &[T] {
        &self.features[i * self.d_latent..(i + 1) * self.d_latent]
    }

    /// World-frame covariance `R S S^T R^T` of one primitive.
    pub fn covariance(&self, i: usize) -> Mat3<T> {
        let r = self.rotations[i].rotation_matrix();
        let s = self.scales[i];
        let d = Mat3::from_diagonal(&Vec3::new(s[0] * s[0], s[1] * s[1], s[2] * s[2]));
        r * d * r.transpose()
    }

    /// Checks the structural invariants (array lengths, positive scales,
    /// opacity range, near-unit rotations and latent features).
    pub fn validate(&self) -> Result<()> {
        let n = self.len();
        if self.rotations.len() != n
            || self.scales.len() != n
            || self.opacities.len() != n
            || self.sh.len() != n * SH_VALUES
            || self.features.len() != n * self.d_latent
        {
            return Err(Error::InvariantViolation("field arrays disagree on length".into()));
        }
        let tol = cast::<T>(1e-6);
        for i in 0..n {
            if !(self.scales[i].iter().all(|s| *s > T::zero())) {
                return Err(Error::InvariantViolation(format!("non-positive scale at {i}")));
            }
            if !(self.opacities[i] > T::zero() && self.opacities[i] < T::one()) {
                return Err(Error::InvariantViolation(format!("opacity out of (0,1) at {i}")));
            }
            if (self.rotations[i].norm() - T::one()).abs() > tol {
                return Err(Error::InvariantViolation(format!("non-unit rotation at {i}")));
            }
            let f = self.feature_of(i);
            let norm = f.iter().map(|v| *v * *v).sum::<T>().sqrt();
            if (norm - T::one()).abs() > tol {
                return Err(Error::InvariantViolation(format!("non-unit latent feature at {i}")));
            }
        }
        Ok(())
    }

    /// Keeps only the rows selected by `keep` (parallel to primitives).
    pub fn retain(&mut self, keep: &[bool]) {
        assert_eq!(keep.len(), self.len());
        let mut w = 0;
        for r in 0..self.len() {
            if keep[r] {
                self.means[w] = self.means[r];
                self.rotations[w] = self.rotations[r];
                self.scales[w] = self.scales[r];
                self.opacities[w] = self.opacities[r];
                for k in 0..SH_VALUES {
                    self.sh[w * SH_VALUES + k] = self.sh[r * SH_VALUES + k];
                }
                for k in 0..self.d_latent {
                    self.features[w * self.d_latent + k] = self.features[r * self.d_latent + k];
                }
                w += 1;
            }
        }
        self.means.truncate(w);
        self.rotations.truncate(w);
        self.scales.truncate(w);
        self.opacities.truncate(w);
        self.sh.truncate(w * SH_VALUES);
        self.features.truncate(w * self.d_latent);
    }
}

/// Back-projects every valid depth pixel of every view into a world point
/// with its RGB color, in view order then row-major pixel order.
pub fn backproject_views<T: Float>(views: &[CameraView<T>]) -> (Vec<Vec3<T>>, Vec<[T; 3]>) {
    let mut pts = Vec::new();
    let mut colors = Vec::new();
    for view in views {
        for row in 0..view.height() {
            for col in 0..view.width() {
                if !view.depth_valid(row, col) {
                    continue;
                }
                let p_cam = view.intrinsics.backproject_px(row, col, view.depth.at(row, col));
                pts.push(view.pose.apply(&p_cam));
                let px = view.rgb.px(row, col);
                colors.push([px[0], px[1], px[2]]);
            }
        }
    }
    (pts, colors)
}

/// Builds a field from posed RGB-D views: back-project, voxel-downsample to
/// `target_count` (within ±10% when reachable), then initialize per-primitive
/// attributes (DC color from the pixel, isotropic scale from local spacing,
/// opacity 0.5, random unit rotation and latent feature).
pub fn init_from_rgbd<T: Float>(
    views: &[CameraView<T>],
    target_count: usize,
    d_latent: usize,
    seed: u64,
) -> Result<GaussianField<T>> {
    assert!(target_count >= 1, "target_count must be >= 1");
    for v in views {
        v.validate()?;
    }
    let (pts, colors) = backproject_views(views);
    if pts.is_empty() {
        return Err(Error::NoValidDepth);
    }

    let (pts, colors) = downsample_to_target(&pts, &colors, target_count);
    let n = pts.len();
    let scales = local_spacing_scales(&pts);

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut field = GaussianField::empty(d_latent);
    field.means = pts;
    field.scales = scales.iter().map(|&s| Vec3::new(s, s, s)).collect();
    field.opacities = vec![cast::<T>(INIT_OPACITY); n];
    field.rotations = (0..n).map(|_| random_unit_quat(&mut rng)).collect();
    field.sh = vec![T::zero(); n * SH_VALUES];
    for i in 0..n {
        for ch in 0..3 {
            field.sh[i * SH_VALUES + ch] = dc_from_channel(colors[i][ch]);
        }
    }
    field.features = Vec::with_capacity(n * d_latent);
    for _ in 0..n {
        let f = random_unit_vec::<T>(&mut rng, d_latent);
        field.features.extend_from_slice(&f);
    }
    Ok(field)
}

pub fn random_unit_quat<T: Float>(rng: &mut ChaCha8Rng) -> Quat<T> {
    loop {
        let q = Quat::new(
            cast::<T>(rng.gen::<f64>() * 2.0 - 1.0),
            cast::<T>(rng.gen::<f64>() * 2.0 - 1.0),
            cast::<T>(rng.gen::<f64>() * 2.0 - 1.0),
            cast::<T>(rng.gen::<f64>() * 2.0 - 1.0),
        );
        let n = q.norm().to_f64_cfg();
        if n > 1e-3 && n < 1.0 {
            return q.normalized();
        }
    }
}

pub fn random_unit_vec<T: Float>(rng: &mut ChaCha8Rng, dim: usize) -> Vec<T> {
    loop {
        let v: Vec<f64> = (0..dim).map(|_| rng.gen::<f64>() * 2.0 - 1.0).collect();
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if n > 1e-3 {
            return v.into_iter().map(|x| cast::<T>(x / n)).collect();
        }
    }
}

/// Voxel-grid downsampling to `target` points within ±10% when the input is
/// large enough, searching the voxel edge length by bisection. Voxel
/// centroids are emitted in first-seen order, so the result is deterministic
/// for a fixed input order.
fn downsample_to_target<T: Float>(
    pts: &[Vec3<T>],
    colors: &[[T; 3]],
    target: usize,
) -> (Vec<Vec3<T>>, Vec<[T; 3]>) {
    if pts.len() <= target || target == 0 {
        return (pts.to_vec(), colors.to_vec());
    }
    let lo_bound = 0.9 * target as f64;
    let hi_bound = 1.1 * target as f64;

    let mut origin = pts[0];
    for p in pts {
        for k in 0..3 {
            origin[k] = origin[k].min(p[k]);
        }
    }
    let mut lo = 1e-5f64; // meters: finer than any sensible sensor grid
    // Slightly past the diagonal: one voxel holds the whole cloud.
    let mut hi = (bbox_diag(pts) * 1.01).max(1e-3);
    let mut best_voxel = hi;
    let mut best_gap = f64::INFINITY;
    for _ in 0..60 {
        let mid = 0.5 * (lo + hi);
        let count = count_voxels(pts, &origin, mid) as f64;
        let gap = (count - target as f64).abs();
        if gap < best_gap {
            best_gap = gap;
            best_voxel = mid;
        }
        if count >= lo_bound && count <= hi_bound {
            best_voxel = mid;
            break;
        }
        if count > target as f64 {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    voxel_centroids(pts, colors, &origin, best_voxel)
}

fn bbox_diag<T: Float>(pts: &[Vec3<T>]) -> f64 {
    let mut lo = pts[0];
    let mut hi = pts[0];
    for p in pts {
        for k in 0..3 {
            lo[k] = lo[k].min(p[k]);
            hi[k] = hi[k].max(p[k]);
        }
    }
    (hi - lo).norm().to_f64_cfg()
}

/// Grid cell of a point; the grid is anchored at `origin` (the cloud's bbox
/// minimum) so a voxel larger than the bbox collapses everything into one
/// cell.
fn voxel_key<T: Float>(p: &Vec3<T>, origin: &Vec3<T>, voxel: f64) -> (i64, i64, i64) {
    (
        ((p[0] - origin[0]).to_f64_cfg() / voxel).floor() as i64,
        ((p[1] - origin[1]).to_f64_cfg() / voxel).floor() as i64,
        ((p[2] - origin[2]).to_f64_cfg() / voxel).floor() as i64,
    )
}

fn count_voxels<T: Float>(pts: &[Vec3<T>], origin: &Vec3<T>, voxel: f64) -> usize {
    let mut set = std::collections::HashSet::with_capacity(pts.len());
    for p in pts {
        set.insert(voxel_key(p, origin, voxel));
    }
    set.len()
}

fn voxel_centroids<T: Float>(
    pts: &[Vec3<T>],
    colors: &[[T; 3]],
    origin: &Vec3<T>,
    voxel: f64,
) -> (Vec<Vec3<T>>, Vec<[T; 3]>) {
    let mut index: HashMap<(i64, i64, i64), usize> = HashMap::with_capacity(pts.len());
    let mut sums: Vec<(Vec3<T>, [T; 3], usize)> = Vec::new();
    for (p, c) in pts.iter().zip(colors) {
        let key = voxel_key(p, origin, voxel);
        match index.get(&key) {
            Some(&slot) => {
                let e = &mut sums[slot];
                e.0 += *p;
                for ch in 0..3 {
                    e.1[ch] += c[ch];
                }
                e.2 += 1;
            }
            None => {
                index.insert(key, sums.len());
                sums.push((*p, *c, 1));
            }
        }
    }
    let mut out_p = Vec::with_capacity(sums.len());
    let mut out_c = Vec::with_capacity(sums.len());
    for (sum_p, sum_c, cnt) in sums {
        let inv = T::one() / cast::<T>(cnt as f64);
        out_p.push(sum_p * inv);
        out_c.push([sum_c[0] * inv, sum_c[1] * inv, sum_c[2] * inv]);
    }
    (out_p, out_c)
}

/// Isotropic initial scale per point: mean distance to the 3 nearest
/// neighbors, clamped to `[INIT_SCALE_MIN, INIT_SCALE_MAX]`. Uses a uniform
/// grid for the neighbor search.
fn local_spacing_scales<T: Float>(pts: &[Vec3<T>]) -> Vec<T> {
    let n = pts.len();
    let fallback = cast::<T>(0.01);
    if n <= 3 {
        return vec![fallback; n];
    }
    let mut lo = pts[0];
    let mut hi = pts[0];
    for p in pts {
        for k in 0..3 {
            lo[k] = lo[k].min(p[k]);
            hi[k] = hi[k].max(p[k]);
        }
    }
    // Cell size from the bbox diagonal, not its volume: planar or linear
    // clouds have zero volume but still need cells on the order of the
    // point spacing.
    let ext = hi - lo;
    let diag = ext.norm().to_f64_cfg().max(1e-9);
    let cell = (diag / (n as f64).cbrt()).max(1e-9);

    let key = |p: &Vec3<T>| -> (i64, i64, i64) {
        (
            (p[0].to_f64_cfg() / cell).floor() as i64,
            (p[1].to_f64_cfg() / cell).floor() as i64,
            (p[2].to_f64_cfg() / cell).floor() as i64,
        )
    };
    let mut grid: HashMap<(i64, i64, i64), Vec<u32>> = HashMap::with_capacity(n);
    for (i, p) in pts.iter().enumerate() {
        grid.entry(key(p)).or_default().push(i as u32);
    }

    let mut out = Vec::with_capacity(n);
    for (i, p) in pts.iter().enumerate() {
        let (cx, cy, cz) = key(p);
        let mut best = [f64::INFINITY; 3]; // three smallest squared distances
        let mut found = 0usize;
        let mut ring = 1i64;
        loop {
            // Scan the cube of cells within `ring` of the center (full cube
            // each time keeps the code simple; rings are small in practice).
            for dx in -ring..=ring {
                for dy in -ring..=ring {
                    for dz in -ring..=ring {
                        if ring > 1 && dx.abs() < ring && dy.abs() < ring && dz.abs() < ring {
                            continue; // interior cells already scanned
                        }
                        if let Some(cellv) = grid.get(&(cx + dx, cy + dy, cz + dz)) {
                            for &j in cellv {
                                if j as usize == i {
                                    continue;
                                }
                                let d2 = (pts[j as usize] - p).norm_squared().to_f64_cfg();
                                if d2 < best[2] {
                                    best[2] = d2;
                                    if best[2] < best[1] {
                                        best.swap(1, 2);
                                    }
                                    if best[1] < best[0] {
                                        best.swap(0, 1);
                                    }
                                    found += 1;
                                }
                            }
                        }
                    }
                }
            }
            // Stop once three neighbors are found and the next ring cannot
            // contain anything closer than the current third-nearest. Every
            // point lies within the bbox diagonal, so that bounds the search.
            let ring_reach = (ring as f64) * cell;
            if (found >= 3 && best[2].sqrt() <= ring_reach) || ring_reach > diag + cell {
                break;
            }
            ring += 1;
        }
        let mean = if best[2].is_finite() {
            (best[0].sqrt() + best[1].sqrt() + best[2].sqrt()) / 3.0
        } else if best[0].is_finite() {
            // fewer than 3 neighbors in range: average what we have
            let mut s = 0.0;
            let mut c = 0.0;
            for b in best.iter().filter(|b| b.is_finite()) {
                s += b.sqrt();
                c += 1.0;
            }
            s / c
        } else {
            0.01
        };
        out.push(cast::<T>(mean.clamp(INIT_SCALE_MIN, INIT_SCALE_MAX)));
    }
    out
}

/// Indices of primitives whose means lie inside the hull (boundary-inclusive).
pub fn select_by_hull<T: Float>(field: &GaussianField<T>, hull: &ConvexHull<T>) -> Vec<usize> {
    (0..field.len()).filter(|&i| hull.contains(&field.means[i])).collect()
}

/// Rigidly moves every primitive whose mean lies inside the hull: means map
/// through the motion and orientations pre-compose with its rotation. SH
/// coefficients and latent features ride along unchanged. Returns how many
/// primitives moved (0 is a warning condition for callers, not an error).
pub fn transform_subset<T: Float>(
    field: &mut GaussianField<T>,
    hull: &ConvexHull<T>,
    motion: &RigidTransform<T>,
) -> usize {
    let q_motion = motion.rotation_quat();
    let mut moved = 0;
    for i in 0..field.len() {
        if hull.contains(&field.means[i]) {
            field.means[i] = motion.apply(&field.means[i]);
            field.rotations[i] = q_motion.mul(&field.rotations[i]);
            moved += 1;
        }
    }
    moved
}
