//! Tile-based differentiable rasterization of the Gaussian field.
//!
//! Forward: primitives project to 2D Gaussians (local affine approximation of
//! the pinhole projection), are binned into screen tiles, depth-sorted per
//! tile and alpha-composited front to back. Rendered channels: SH color,
//! latent feature, camera-frame depth, world-frame normal, plus accumulated
//! alpha.
//!
//! Backward: analytic gradients of any scalar loss on the rendered channels
//! with respect to every primitive attribute, replaying compositing per tile
//! in reverse order. Per-tile partial gradients merge in tile order, so sums
//! are independent of thread scheduling.
//!
//! Compositing semantics (shared with [`render_reference`]):
//! - per-splat alpha `a = min(0.99, opacity * exp(-m/2))` where `m` is the
//!   squared Mahalanobis distance under the inflated 2D covariance;
//! - splats contribute only within their 3-sigma ellipse (`m <= 9`);
//! - compositing stops once transmittance drops below `1e-4`;
//! - splats whose raw 2D covariance determinant is below `1e-12` are skipped
//!   and counted as degenerate.

use rayon::prelude::*;

use crate::camera::{CameraView, Intrinsics};
use crate::error::{Error, Result};
use crate::field::GaussianField;
use crate::float::{cast, Float};
use crate::image::Image;
use crate::math::{Mat3, RigidTransform, Vec3};
use crate::sh;

pub const NEAR_PLANE: f64 = 0.01;
pub const COV2D_INFLATION: f64 = 0.3;
pub const ALPHA_MAX: f64 = 0.99;
pub const TRANSMITTANCE_STOP: f64 = 1e-4;
/// Squared Mahalanobis cutoff: contributions end at the 3-sigma ellipse.
pub const MAHALANOBIS_SQ_CUTOFF: f64 = 9.0;
pub const DEGENERATE_DET_EPS: f64 = 1e-12;

#[derive(Debug, Clone, Copy)]
pub struct RasterConfig {
    /// Square tile edge in pixels; one of 8, 16, 32.
    pub tile_size: usize,
    /// Active spherical-harmonics degree (0..=3).
    pub sh_degree: usize,
}

impl Default for RasterConfig {
    fn default() -> Self {
        Self { tile_size: 16, sh_degree: 3 }
    }
}

impl RasterConfig {
    pub fn validate(&self) {
        assert!(
            matches!(self.tile_size, 8 | 16 | 32),
            "tile_size must be 8, 16 or 32 (got {})",
            self.tile_size
        );
        assert!(self.sh_degree <= 3, "sh_degree must be 0..=3");
    }
}

/// Camera for rendering: pose + intrinsics + output resolution.
#[derive(Debug, Clone, Copy)]
pub struct RenderCamera<T> {
    pub intrinsics: Intrinsics<T>,
    /// Camera-to-world pose.
    pub pose: RigidTransform<T>,
    pub width: usize,
    pub height: usize,
}

impl<T: Float> RenderCamera<T> {
    pub fn of_view(view: &CameraView<T>) -> Self {
        Self {
            intrinsics: view.intrinsics,
            pose: view.pose,
            width: view.width(),
            height: view.height(),
        }
    }
}

/// Which output channels to produce / differentiate.
#[derive(Debug, Clone, Copy, Default)]
pub struct ChannelSet {
    pub color: bool,
    pub feature: bool,
    pub depth: bool,
    pub normal: bool,
}

impl ChannelSet {
    pub fn all() -> Self {
        Self { color: true, feature: true, depth: true, normal: true }
    }
    pub fn color_only() -> Self {
        Self { color: true, ..Self::default() }
    }
}

/// One projected (visible, non-degenerate) primitive.
#[derive(Debug, Clone, Copy)]
pub struct Splat<T> {
    pub prim: u32,
    pub mean2d: [T; 2],
    /// Inverse inflated 2D covariance `[[a, b], [b, c]]` stored `(a, b, c)`.
    pub conic: [T; 3],
    pub depth: T,
    pub p_cam: Vec3<T>,
    pub radius: T,
}

/// Projection output: visible splats plus depth-sorted per-tile index lists.
#[derive(Debug, Clone)]
pub struct SplatCache<T> {
    pub splats: Vec<Splat<T>>,
    pub tile_size: usize,
    pub tiles_x: usize,
    pub tiles_y: usize,
    pub width: usize,
    pub height: usize,
    /// `tile_offsets[t]..tile_offsets[t+1]` indexes `tile_entries` for tile t.
    pub tile_offsets: Vec<usize>,
    /// Splat indices per tile, sorted ascending by depth (ties by index).
    pub tile_entries: Vec<u32>,
    /// Primitives skipped because their raw 2D covariance was degenerate.
    pub degenerate_count: usize,
}

/// Rendered images. Channels not requested are `None`; `alpha` is always
/// produced. `feature` has `d_latent` channels.
#[derive(Debug, Clone)]
pub struct RenderOutput<T> {
    pub color: Option<Image<T>>,
    pub feature: Option<Image<T>>,
    pub depth: Option<Image<T>>,
    pub normal: Option<Image<T>>,
    pub alpha: Image<T>,
    pub degenerate_count: usize,
}

/// Per-pixel compositing state retained for the backward pass.
#[derive(Debug, Clone)]
pub struct ForwardState<T> {
    channels: ChannelSet,
    /// Transmittance left after compositing each pixel.
    final_t: Vec<T>,
    /// How many tile-list entries each pixel consumed before stopping.
    n_contrib: Vec<u32>,
    /// Per-splat SH color payload (empty unless the color channel is active).
    colors: Vec<[T; 3]>,
    /// Per-splat world normal payload (empty unless normal channel active).
    normals: Vec<[T; 3]>,
    /// Axis of smallest scale and orientation sign behind each normal payload.
    normal_axis: Vec<(u8, i8)>,
}

/// Per-primitive gradients. Rows align with the field's primitives;
/// primitives culled at projection receive zeros.
#[derive(Debug, Clone)]
pub struct FieldGradients<T> {
    pub means: Vec<Vec3<T>>,
    pub rotations: Vec<[T; 4]>,
    pub scales: Vec<Vec3<T>>,
    pub opacities: Vec<T>,
    pub sh: Vec<T>,
    pub features: Vec<T>,
}

impl<T: Float> FieldGradients<T> {
    pub fn zeros(n: usize, d_latent: usize) -> Self {
        Self {
            means: vec![Vec3::zeros(); n],
            rotations: vec![[T::zero(); 4]; n],
            scales: vec![Vec3::zeros(); n],
            opacities: vec![T::zero(); n],
            sh: vec![T::zero(); n * sh::SH_VALUES],
            features: vec![T::zero(); n * d_latent],
        }
    }
}

/// Per-pixel gradients of the loss w.r.t. rendered channels. Shapes must
/// match the render resolution; channels may be omitted.
#[derive(Debug, Clone, Default)]
pub struct ChannelGrads<T> {
    pub color: Option<Image<T>>,
    pub feature: Option<Image<T>>,
    pub depth: Option<Image<T>>,
    pub normal: Option<Image<T>>,
}

/// Projects all primitives into screen space and builds depth-sorted tile
/// lists. Primitives at or behind the near plane, off screen, or with a
/// degenerate raw 2D covariance are excluded (the latter counted).
pub fn project<T: Float>(
    field: &GaussianField<T>,
    cam: &RenderCamera<T>,
    cfg: &RasterConfig,
) -> SplatCache<T> {
    cfg.validate();
    let ts = cfg.tile_size;
    let tiles_x = cam.width.div_ceil(ts);
    let tiles_y = cam.height.div_ceil(ts);
    let w2c = cam.pose.inverse();
    let near = cast::<T>(NEAR_PLANE);
    let det_eps = cast::<T>(DEGENERATE_DET_EPS);

    let mut splats = Vec::new();
    let mut degenerate = 0usize;
    for i in 0..field.len() {
        let p_cam = w2c.apply(&field.means[i]);
        let z = p_cam[2];
        if z <= near {
            continue;
        }
        let (cov_raw, _v) = cov2d_raw(field, i, &w2c, &cam.intrinsics, &p_cam);
        let det_raw = cov_raw[0] * cov_raw[2] - cov_raw[1] * cov_raw[1];
        if det_raw < det_eps {
            degenerate += 1;
            continue;
        }
        let a = cov_raw[0] + cast::<T>(COV2D_INFLATION);
        let b = cov_raw[1];
        let c = cov_raw[2] + cast::<T>(COV2D_INFLATION);
        let det = a * c - b * b;
        let conic = [c / det, -b / det, a / det];
        let mid = (a + c) * cast::<T>(0.5);
        let disc = (mid * mid - det).max(T::zero());
        let lam_max = mid + disc.sqrt();
        let radius = cast::<T>(3.0) * lam_max.sqrt();
        let (u, v) = cam.intrinsics.project(&p_cam);
        // Half a pixel of padding keeps tile coverage a strict superset of
        // the 3-sigma ellipse under floating-point rounding.
        let r_cover = radius.to_f64_cfg() + 0.5;
        let uf = u.to_f64_cfg();
        let vf = v.to_f64_cfg();
        if uf + r_cover < 0.0
            || vf + r_cover < 0.0
            || uf - r_cover > cam.width as f64
            || vf - r_cover > cam.height as f64
        {
            continue;
        }
        splats.push(Splat {
            prim: i as u32,
            mean2d: [u, v],
            conic,
            depth: z,
            p_cam,
            radius,
        });
    }

    // Bin into tiles: count, prefix-sum, fill, then sort each tile by depth.
    let n_tiles = tiles_x * tiles_y;
    let mut counts = vec![0usize; n_tiles];
    let ranges: Vec<[usize; 4]> =
        splats.iter().map(|s| tile_range(s, ts, tiles_x, tiles_y)).collect();
    for r in &ranges {
        for ty in r[2]..r[3] {
            for tx in r[0]..r[1] {
                counts[ty * tiles_x + tx] += 1;
            }
        }
    }
    let mut tile_offsets = vec![0usize; n_tiles + 1];
    for t in 0..n_tiles {
        tile_offsets[t + 1] = tile_offsets[t] + counts[t];
    }
    let mut fill = tile_offsets.clone();
    let mut tile_entries = vec![0u32; tile_offsets[n_tiles]];
    for (sid, r) in ranges.iter().enumerate() {
        for ty in r[2]..r[3] {
            for tx in r[0]..r[1] {
                let t = ty * tiles_x + tx;
                tile_entries[fill[t]] = sid as u32;
                fill[t] += 1;
            }
        }
    }
    for t in 0..n_tiles {
        let seg = &mut tile_entries[tile_offsets[t]..tile_offsets[t + 1]];
        seg.sort_by(|&a, &b| {
            let da = splats[a as usize].depth;
            let db = splats[b as usize].depth;
            da.partial_cmp(&db).unwrap().then(a.cmp(&b))
        });
    }

    SplatCache {
        splats,
        tile_size: ts,
        tiles_x,
        tiles_y,
        width: cam.width,
        height: cam.height,
        tile_offsets,
        tile_entries,
        degenerate_count: degenerate,
    }
}

/// Raw (uninflated) 2D covariance `(a, b, c)` and the camera-frame 3D
/// covariance of primitive `i`.
fn cov2d_raw<T: Float>(
    field: &GaussianField<T>,
    i: usize,
    w2c: &RigidTransform<T>,
    intr: &Intrinsics<T>,
    p_cam: &Vec3<T>,
) -> ([T; 3], Mat3<T>) {
    let r = field.rotations[i].rotation_matrix();
    let s = field.scales[i];
    let d = Mat3::from_diagonal(&Vec3::new(s[0] * s[0], s[1] * s[1], s[2] * s[2]));
    let sigma = r * d * r.transpose();
    let v = w2c.rotation * sigma * w2c.rotation.transpose();
    let (j0, j1) = proj_jacobian_rows(intr, p_cam);
    let vj0 = v * j0;
    let vj1 = v * j1;
    ([j0.dot(&vj0), j0.dot(&vj1), j1.dot(&vj1)], v)
}

/// Rows of the 2x3 projection Jacobian at a camera-frame point.
#[inline]
fn proj_jacobian_rows<T: Float>(intr: &Intrinsics<T>, p: &Vec3<T>) -> (Vec3<T>, Vec3<T>) {
    let z = p[2];
    let zz = z * z;
    (
        Vec3::new(intr.fx / z, T::zero(), -intr.fx * p[0] / zz),
        Vec3::new(T::zero(), intr.fy / z, -intr.fy * p[1] / zz),
    )
}

fn tile_range<T: Float>(s: &Splat<T>, ts: usize, tiles_x: usize, tiles_y: usize) -> [usize; 4] {
    let r = s.radius.to_f64_cfg() + 0.5;
    let u = s.mean2d[0].to_f64_cfg();
    let v = s.mean2d[1].to_f64_cfg();
    let clampf = |x: f64, hi: usize| -> usize { (x.max(0.0) as usize).min(hi) };
    let x0 = clampf((u - r) / ts as f64, tiles_x.saturating_sub(1));
    let y0 = clampf((v - r) / ts as f64, tiles_y.saturating_sub(1));
    let x1 = (clampf((u + r) / ts as f64, tiles_x.saturating_sub(1)) + 1).min(tiles_x);
    let y1 = (clampf((v + r) / ts as f64, tiles_y.saturating_sub(1)) + 1).min(tiles_y);
    [x0, x1, y0, y1]
}

/// Per-splat payloads for the active channels.
fn splat_payloads<T: Float>(
    field: &GaussianField<T>,
    cache: &SplatCache<T>,
    cam: &RenderCamera<T>,
    channels: ChannelSet,
    sh_degree: usize,
) -> (Vec<[T; 3]>, Vec<[T; 3]>, Vec<(u8, i8)>) {
    let cam_pos = cam.pose.translation;
    let mut colors = Vec::new();
    let mut normals = Vec::new();
    let mut axes = Vec::new();
    if channels.color {
        colors = cache
            .splats
            .iter()
            .map(|s| {
                let i = s.prim as usize;
                let v = field.means[i] - cam_pos;
                let n = v.norm();
                let dir = if n > T::zero() { v / n } else { Vec3::new(T::zero(), T::zero(), T::one()) };
                sh::eval_color(field.sh_of(i), &dir, sh_degree)
            })
            .collect();
    }
    if channels.normal {
        normals = Vec::with_capacity(cache.splats.len());
        axes = Vec::with_capacity(cache.splats.len());
        for s in &cache.splats {
            let i = s.prim as usize;
            let sc = field.scales[i];
            let mut k = 0usize;
            if sc[1] < sc[k] {
                k = 1;
            }
            if sc[2] < sc[k] {
                k = 2;
            }
            let r = field.rotations[i].rotation_matrix();
            let n = Vec3::new(r[(0, k)], r[(1, k)], r[(2, k)]);
            let toward = cam_pos - field.means[i];
            let sign: i8 = if n.dot(&toward) < T::zero() { -1 } else { 1 };
            let sn = if sign < 0 { -n } else { n };
            normals.push([sn[0], sn[1], sn[2]]);
            axes.push((k as u8, sign));
        }
    }
    (colors, normals, axes)
}

/// Forward render. Returns the requested channels plus the state needed by
/// [`render_backward`].
pub fn render_forward<T: Float>(
    field: &GaussianField<T>,
    cam: &RenderCamera<T>,
    channels: ChannelSet,
    cache: &SplatCache<T>,
    cfg: &RasterConfig,
) -> (RenderOutput<T>, ForwardState<T>) {
    cfg.validate();
    let (h, w) = (cam.height, cam.width);
    let d = field.d_latent;
    let (colors, normals, axes) = splat_payloads(field, cache, cam, channels, cfg.sh_degree);

    let ts = cache.tile_size;
    let n_tiles = cache.tiles_x * cache.tiles_y;
    let t_stop = cast::<T>(TRANSMITTANCE_STOP);
    let cutoff = cast::<T>(MAHALANOBIS_SQ_CUTOFF / 2.0);
    let alpha_max = cast::<T>(ALPHA_MAX);

    struct TileOut<T> {
        x0: usize,
        y0: usize,
        tw: usize,
        th: usize,
        color: Vec<T>,
        feature: Vec<T>,
        depth: Vec<T>,
        normal: Vec<T>,
        alpha: Vec<T>,
        final_t: Vec<T>,
        n_contrib: Vec<u32>,
    }

    let tile_outs: Vec<TileOut<T>> = (0..n_tiles)
        .into_par_iter()
        .map(|t| {
            let tx = t % cache.tiles_x;
            let ty = t / cache.tiles_x;
            let x0 = tx * ts;
            let y0 = ty * ts;
            let tw = ts.min(w - x0);
            let th = ts.min(h - y0);
            let list = &cache.tile_entries[cache.tile_offsets[t]..cache.tile_offsets[t + 1]];
            let mut out = TileOut::<T> {
                x0,
                y0,
                tw,
                th,
                color: if channels.color { vec![T::zero(); tw * th * 3] } else { Vec::new() },
                feature: if channels.feature { vec![T::zero(); tw * th * d] } else { Vec::new() },
                depth: if channels.depth { vec![T::zero(); tw * th] } else { Vec::new() },
                normal: if channels.normal { vec![T::zero(); tw * th * 3] } else { Vec::new() },
                alpha: vec![T::zero(); tw * th],
                final_t: vec![T::one(); tw * th],
                n_contrib: vec![0u32; tw * th],
            };
            for py in 0..th {
                for px in 0..tw {
                    let ux = cast::<T>((x0 + px) as f64 + 0.5);
                    let uy = cast::<T>((y0 + py) as f64 + 0.5);
                    let pi = py * tw + px;
                    let mut t_cur = T::one();
                    let mut seen = 0u32;
                    for (k, &sid) in list.iter().enumerate() {
                        if t_cur < t_stop {
                            break;
                        }
                        seen = (k + 1) as u32;
                        let s = &cache.splats[sid as usize];
                        let dx = ux - s.mean2d[0];
                        let dy = uy - s.mean2d[1];
                        let m =
                            cast::<T>(0.5) * (s.conic[0] * dx * dx + s.conic[2] * dy * dy)
                                + s.conic[1] * dx * dy;
                        if m > cutoff || m < T::zero() {
                            continue;
                        }
                        let alpha =
                            (field.opacities[s.prim as usize] * (-m).exp()).min(alpha_max);
                        let wgt = alpha * t_cur;
                        if channels.color {
                            let c = &colors[sid as usize];
                            let o = &mut out.color[pi * 3..pi * 3 + 3];
                            for ch in 0..3 {
                                o[ch] += c[ch] * wgt;
                            }
                        }
                        if channels.feature {
                            let f = field.feature_of(s.prim as usize);
                            let o = &mut out.feature[pi * d..(pi + 1) * d];
                            for ch in 0..d {
                                o[ch] += f[ch] * wgt;
                            }
                        }
                        if channels.depth {
                            out.depth[pi] += s.depth * wgt;
                        }
                        if channels.normal {
                            let nrm = &normals[sid as usize];
                            let o = &mut out.normal[pi * 3..pi * 3 + 3];
                            for ch in 0..3 {
                                o[ch] += nrm[ch] * wgt;
                            }
                        }
                        t_cur *= T::one() - alpha;
                    }
                    out.final_t[pi] = t_cur;
                    out.n_contrib[pi] = seen;
                    out.alpha[pi] = T::one() - t_cur;
                }
            }
            out
        })
        .collect();

    // Stitch tiles into full images (disjoint regions; sequential copy).
    let mut color = channels.color.then(|| Image::zeros(h, w, 3));
    let mut feature = channels.feature.then(|| Image::zeros(h, w, d));
    let mut depth = channels.depth.then(|| Image::zeros(h, w, 1));
    let mut normal = channels.normal.then(|| Image::zeros(h, w, 3));
    let mut alpha = Image::zeros(h, w, 1);
    let mut final_t = vec![T::one(); h * w];
    let mut n_contrib = vec![0u32; h * w];
    for to in tile_outs {
        for py in 0..to.th {
            let row = to.y0 + py;
            for px in 0..to.tw {
                let col = to.x0 + px;
                let pi = py * to.tw + px;
                if let Some(img) = color.as_mut() {
                    img.px_mut(row, col).copy_from_slice(&to.color[pi * 3..pi * 3 + 3]);
                }
                if let Some(img) = feature.as_mut() {
                    img.px_mut(row, col).copy_from_slice(&to.feature[pi * d..(pi + 1) * d]);
                }
                if let Some(img) = depth.as_mut() {
                    img.set(row, col, to.depth[pi]);
                }
                if let Some(img) = normal.as_mut() {
                    img.px_mut(row, col).copy_from_slice(&to.normal[pi * 3..pi * 3 + 3]);
                }
                alpha.set(row, col, to.alpha[pi]);
                final_t[row * w + col] = to.final_t[pi];
                n_contrib[row * w + col] = to.n_contrib[pi];
            }
        }
    }

    (
        RenderOutput {
            color,
            feature,
            depth,
            normal,
            alpha,
            degenerate_count: cache.degenerate_count,
        },
        ForwardState { channels, final_t, n_contrib, colors, normals, normal_axis: axes },
    )
}

/// Reference compositor: per pixel, sorts *all* visible splats by depth and
/// composites with the exact semantics of [`render_forward`], with no tiling.
/// Used to validate the tile machinery.
pub fn render_reference<T: Float>(
    field: &GaussianField<T>,
    cam: &RenderCamera<T>,
    channels: ChannelSet,
    cfg: &RasterConfig,
) -> RenderOutput<T> {
    let cache = project(field, cam, cfg);
    let (colors, normals, _) = splat_payloads(field, &cache, cam, channels, cfg.sh_degree);
    let d = field.d_latent;
    let mut order: Vec<u32> = (0..cache.splats.len() as u32).collect();
    order.sort_by(|&a, &b| {
        let da = cache.splats[a as usize].depth;
        let db = cache.splats[b as usize].depth;
        da.partial_cmp(&db).unwrap().then(a.cmp(&b))
    });

    let (h, w) = (cam.height, cam.width);
    let t_stop = cast::<T>(TRANSMITTANCE_STOP);
    let cutoff = cast::<T>(MAHALANOBIS_SQ_CUTOFF / 2.0);
    let alpha_max = cast::<T>(ALPHA_MAX);
    let mut color = channels.color.then(|| Image::zeros(h, w, 3));
    let mut feature = channels.feature.then(|| Image::zeros(h, w, d));
    let mut depth = channels.depth.then(|| Image::zeros(h, w, 1));
    let mut normal = channels.normal.then(|| Image::zeros(h, w, 3));
    let mut alpha_img = Image::zeros(h, w, 1);

    for row in 0..h {
        for col in 0..w {
            let ux = cast::<T>(col as f64 + 0.5);
            let uy = cast::<T>(row as f64 + 0.5);
            let mut t_cur = T::one();
            for &sid in &order {
                if t_cur < t_stop {
                    break;
                }
                let s = &cache.splats[sid as usize];
                let dx = ux - s.mean2d[0];
                let dy = uy - s.mean2d[1];
                let m = cast::<T>(0.5) * (s.conic[0] * dx * dx + s.conic[2] * dy * dy)
                    + s.conic[1] * dx * dy;
                if m > cutoff || m < T::zero() {
                    continue;
                }
                let alpha = (field.opacities[s.prim as usize] * (-m).exp()).min(alpha_max);
                let wgt = alpha * t_cur;
                if let Some(img) = color.as_mut() {
                    let c = &colors[sid as usize];
                    let o = img.px_mut(row, col);
                    for ch in 0..3 {
                        o[ch] += c[ch] * wgt;
                    }
                }
                if let Some(img) = feature.as_mut() {
                    let f = field.feature_of(s.prim as usize);
                    let o = img.px_mut(row, col);
                    for ch in 0..d {
                        o[ch] += f[ch] * wgt;
                    }
                }
                if let Some(img) = depth.as_mut() {
                    let v = img.at(row, col) + s.depth * wgt;
                    img.set(row, col, v);
                }
                if let Some(img) = normal.as_mut() {
                    let nv = &normals[sid as usize];
                    let o = img.px_mut(row, col);
                    for ch in 0..3 {
                        o[ch] += nv[ch] * wgt;
                    }
                }
                t_cur *= T::one() - alpha;
            }
            alpha_img.set(row, col, T::one() - t_cur);
        }
    }
    RenderOutput {
        color,
        feature,
        depth,
        normal,
        alpha: alpha_img,
        degenerate_count: cache.degenerate_count,
    }
}

// Instance-gradient layout inside the per-tile scratch buffers.
const IG_MEAN2D: usize = 0; // 2
const IG_CONIC: usize = 2; // 3 (symmetric d/dA00, d/dA01, d/dA11)
const IG_OPACITY: usize = 5; // 1
const IG_COLOR: usize = 6; // 3
const IG_DEPTH: usize = 9; // 1
const IG_NORMAL: usize = 10; // 3
const IG_FEAT: usize = 13; // d

/// Backward pass: given per-pixel gradients of a scalar loss w.r.t. the
/// rendered channels, accumulates gradients for every primitive attribute.
pub fn render_backward<T: Float>(
    field: &GaussianField<T>,
    cam: &RenderCamera<T>,
    cache: &SplatCache<T>,
    state: &ForwardState<T>,
    grads: &ChannelGrads<T>,
    cfg: &RasterConfig,
) -> Result<FieldGradients<T>> {
    cfg.validate();
    let (h, w) = (cam.height, cam.width);
    let d = field.d_latent;
    let channels = state.channels;
    check_shape(&grads.color, channels.color, h, w, 3, "color")?;
    check_shape(&grads.feature, channels.feature, h, w, d, "feature")?;
    check_shape(&grads.depth, channels.depth, h, w, 1, "depth")?;
    check_shape(&grads.normal, channels.normal, h, w, 3, "normal")?;

    let stride = IG_FEAT + d;
    let ts = cache.tile_size;
    let n_tiles = cache.tiles_x * cache.tiles_y;
    let cutoff = cast::<T>(MAHALANOBIS_SQ_CUTOFF / 2.0);
    let alpha_max = cast::<T>(ALPHA_MAX);

    // Per tile: walk each pixel's contributor list in reverse, rebuilding
    // transmittance and suffix payload sums. Output is a dense per-entry
    // gradient buffer aligned with the tile's entry list.
    let tile_grads: Vec<Vec<T>> = (0..n_tiles)
        .into_par_iter()
        .map(|t| {
            let list = &cache.tile_entries[cache.tile_offsets[t]..cache.tile_offsets[t + 1]];
            let mut acc = vec![T::zero(); list.len() * stride];
            if list.is_empty() {
                return acc;
            }
            let tx = t % cache.tiles_x;
            let ty = t / cache.tiles_x;
            let x0 = tx * ts;
            let y0 = ty * ts;
            let tw = ts.min(w - x0);
            let th = ts.min(h - y0);
            // Feature suffix sums, allocated once and reset per pixel.
            let mut sfx_feat = vec![T::zero(); d];
            for py in 0..th {
                for px in 0..tw {
                    let row = y0 + py;
                    let col = x0 + px;
                    let n_c = state.n_contrib[row * w + col] as usize;
                    if n_c == 0 {
                        continue;
                    }
                    let g_color = grads.color.as_ref().map(|g| g.px(row, col));
                    let g_feat = grads.feature.as_ref().map(|g| g.px(row, col));
                    let g_depth = grads.depth.as_ref().map(|g| g.at(row, col));
                    let g_normal = grads.normal.as_ref().map(|g| g.px(row, col));
                    // Skip pixels with no incoming gradient.
                    let any = g_color.map_or(false, |g| g.iter().any(|v| *v != T::zero()))
                        || g_feat.map_or(false, |g| g.iter().any(|v| *v != T::zero()))
                        || g_depth.map_or(false, |v| v != T::zero())
                        || g_normal.map_or(false, |g| g.iter().any(|v| *v != T::zero()));
                    if !any {
                        continue;
                    }
                    let ux = cast::<T>(col as f64 + 0.5);
                    let uy = cast::<T>(row as f64 + 0.5);
                    let mut t_cur = state.final_t[row * w + col];
                    // Suffix sums of composited payload past the current splat.
                    let mut sfx_color = [T::zero(); 3];
                    let mut sfx_depth = T::zero();
                    let mut sfx_normal = [T::zero(); 3];
                    for v in sfx_feat.iter_mut() {
                        *v = T::zero();
                    }
                    for k in (0..n_c).rev() {
                        let sid = list[k] as usize;
                        let s = &cache.splats[sid];
                        let dx = ux - s.mean2d[0];
                        let dy = uy - s.mean2d[1];
                        let m = cast::<T>(0.5)
                            * (s.conic[0] * dx * dx + s.conic[2] * dy * dy)
                            + s.conic[1] * dx * dy;
                        if m > cutoff || m < T::zero() {
                            continue;
                        }
                        let opacity = field.opacities[s.prim as usize];
                        let g_exp = (-m).exp();
                        let alpha_un = opacity * g_exp;
                        let clamped = alpha_un > alpha_max;
                        let alpha = if clamped { alpha_max } else { alpha_un };
                        let one_m = T::one() - alpha;
                        let t_before = t_cur / one_m;
                        let wgt = alpha * t_before;
                        let a = &mut acc[k * stride..(k + 1) * stride];
                        let mut dalpha = T::zero();
                        if let Some(g) = g_color {
                            let c = &state.colors[sid];
                            for ch in 0..3 {
                                a[IG_COLOR + ch] += g[ch] * wgt;
                                dalpha += g[ch] * (c[ch] * t_before - sfx_color[ch] / one_m);
                                sfx_color[ch] += wgt * c[ch];
                            }
                        }
                        if let Some(g) = g_feat {
                            let f = field.feature_of(s.prim as usize);
                            for ch in 0..d {
                                a[IG_FEAT + ch] += g[ch] * wgt;
                                dalpha += g[ch] * (f[ch] * t_before - sfx_feat[ch] / one_m);
                                sfx_feat[ch] += wgt * f[ch];
                            }
                        }
                        if let Some(g) = g_depth {
                            a[IG_DEPTH] += g * wgt;
                            dalpha += g * (s.depth * t_before - sfx_depth / one_m);
                            sfx_depth += wgt * s.depth;
                        }
                        if let Some(g) = g_normal {
                            let nv = &state.normals[sid];
                            for ch in 0..3 {
                                a[IG_NORMAL + ch] += g[ch] * wgt;
                                dalpha += g[ch] * (nv[ch] * t_before - sfx_normal[ch] / one_m);
                                sfx_normal[ch] += wgt * nv[ch];
                            }
                        }
                        if !clamped {
                            a[IG_OPACITY] += dalpha * g_exp;
                            let dm = -alpha * dalpha;
                            // dm/d(mean2d) = +(A d), dm/d(delta) = A d.
                            let adx = s.conic[0] * dx + s.conic[1] * dy;
                            let ady = s.conic[1] * dx + s.conic[2] * dy;
                            a[IG_MEAN2D] -= dm * adx;
                            a[IG_MEAN2D + 1] -= dm * ady;
                            let half = cast::<T>(0.5);
                            a[IG_CONIC] += dm * half * dx * dx;
                            a[IG_CONIC + 1] += dm * half * dx * dy;
                            a[IG_CONIC + 2] += dm * half * dy * dy;
                        }
                        t_cur = t_before;
                    }
                }
            }
            acc
        })
        .collect();

    // Merge tile contributions per splat in tile order (deterministic).
    let mut per_splat = vec![T::zero(); cache.splats.len() * stride];
    for (t, acc) in tile_grads.iter().enumerate() {
        let list = &cache.tile_entries[cache.tile_offsets[t]..cache.tile_offsets[t + 1]];
        for (k, &sid) in list.iter().enumerate() {
            let src = &acc[k * stride..(k + 1) * stride];
            let dst = &mut per_splat[sid as usize * stride..(sid as usize + 1) * stride];
            for (dv, sv) in dst.iter_mut().zip(src) {
                *dv += *sv;
            }
        }
    }

    // Chain per-splat image-space gradients into primitive attributes.
    let w2c = cam.pose.inverse();
    let cam_pos = cam.pose.translation;
    let active_coeffs = sh::coeffs_for_degree(cfg.sh_degree);
    let rows: Vec<(u32, Vec3<T>, [T; 4], Vec3<T>, T, Vec<T>, Vec<T>)> = cache
        .splats
        .par_iter()
        .enumerate()
        .map(|(sid, s)| {
            let i = s.prim as usize;
            let a = &per_splat[sid * stride..(sid + 1) * stride];
            let d_mean2d = [a[IG_MEAN2D], a[IG_MEAN2D + 1]];
            // Full-matrix gradient w.r.t. the conic (symmetric).
            let d_conic = nalgebra::Matrix2::new(
                a[IG_CONIC],
                a[IG_CONIC + 1],
                a[IG_CONIC + 1],
                a[IG_CONIC + 2],
            );

            let rot = field.rotations[i].rotation_matrix();
            let sc = field.scales[i];
            let dmat = Mat3::from_diagonal(&Vec3::new(sc[0] * sc[0], sc[1] * sc[1], sc[2] * sc[2]));
            let sigma = rot * dmat * rot.transpose();
            let v = w2c.rotation * sigma * w2c.rotation.transpose();
            let (j0, j1) = proj_jacobian_rows(&cam.intrinsics, &s.p_cam);
            // Reassemble the inflated 2D covariance and its inverse.
            let c00 = j0.dot(&(v * j0)) + cast::<T>(COV2D_INFLATION);
            let c01 = j0.dot(&(v * j1));
            let c11 = j1.dot(&(v * j1)) + cast::<T>(COV2D_INFLATION);
            let det = c00 * c11 - c01 * c01;
            let conic = nalgebra::Matrix2::new(c11 / det, -c01 / det, -c01 / det, c00 / det);

            // dL/dC = -A (dL/dA) A.
            let d_cov = -(conic * d_conic * conic);
            // dL/dV = J^T dL/dC J with J rows j0, j1.
            let j = nalgebra::Matrix2x3::from_rows(&[j0.transpose(), j1.transpose()]);
            let d_v = j.transpose() * d_cov * j;
            // dL/dSigma = W^T dL/dV W.
            let d_sigma = w2c.rotation.transpose() * d_v * w2c.rotation;
            // dL/dJ = 2 dL/dC J V (dL/dC is symmetric).
            let d_j = d_cov * (j * v) * cast::<T>(2.0);

            // Projection-mean and Jacobian terms into the camera-frame point.
            let z = s.p_cam[2];
            let zz = z * z;
            let zzz = zz * z;
            let fx = cam.intrinsics.fx;
            let fy = cam.intrinsics.fy;
            let mut d_pcam = Vec3::new(
                d_mean2d[0] * fx / z,
                d_mean2d[1] * fy / z,
                -d_mean2d[0] * fx * s.p_cam[0] / zz - d_mean2d[1] * fy * s.p_cam[1] / zz,
            );
            d_pcam[0] += d_j[(0, 2)] * (-fx / zz);
            d_pcam[1] += d_j[(1, 2)] * (-fy / zz);
            d_pcam[2] += d_j[(0, 0)] * (-fx / zz)
                + d_j[(1, 1)] * (-fy / zz)
                + d_j[(0, 2)] * (cast::<T>(2.0) * fx * s.p_cam[0] / zzz)
                + d_j[(1, 2)] * (cast::<T>(2.0) * fy * s.p_cam[1] / zzz);
            d_pcam[2] += a[IG_DEPTH];

            let mut d_mean = w2c.rotation.transpose() * d_pcam;

            // SH color payload: coefficients and view-direction term.
            let mut d_sh = vec![T::zero(); sh::SH_VALUES];
            let d_color = [a[IG_COLOR], a[IG_COLOR + 1], a[IG_COLOR + 2]];
            if state.channels.color {
                let vdir = field.means[i] - cam_pos;
                let r_norm = vdir.norm();
                let dir = vdir / r_norm;
                let basis = sh::eval_basis(&dir, cfg.sh_degree);
                let basis_g = sh::eval_basis_grad(&dir, cfg.sh_degree);
                let coeffs = field.sh_of(i);
                let mut d_dir = Vec3::zeros();
                for k in 0..active_coeffs {
                    let mut along = T::zero();
                    for ch in 0..3 {
                        d_sh[k * 3 + ch] = d_color[ch] * basis[k];
                        along += d_color[ch] * coeffs[k * 3 + ch];
                    }
                    d_dir += Vec3::new(basis_g[k][0], basis_g[k][1], basis_g[k][2]) * along;
                }
                d_mean += (d_dir - dir * dir.dot(&d_dir)) / r_norm;
            }

            // Rotation gradient: covariance term plus normal payload column.
            let mut d_rot = (d_sigma + d_sigma.transpose()) * rot * dmat;
            if state.channels.normal {
                let (axis, sign) = state.normal_axis[sid];
                let sgn = cast::<T>(sign as f64);
                for rr in 0..3 {
                    d_rot[(rr, axis as usize)] += sgn * a[IG_NORMAL + rr];
                }
            }
            let d_quat = field.rotations[i].backprop_rotation(&d_rot);

            // Scale gradient from Sigma = R diag(s^2) R^T.
            let rtgr = rot.transpose() * d_sigma * rot;
            let d_scale = Vec3::new(
                cast::<T>(2.0) * sc[0] * rtgr[(0, 0)],
                cast::<T>(2.0) * sc[1] * rtgr[(1, 1)],
                cast::<T>(2.0) * sc[2] * rtgr[(2, 2)],
            );

            let d_feat: Vec<T> = a[IG_FEAT..IG_FEAT + d].to_vec();
            (s.prim, d_mean, d_quat, d_scale, a[IG_OPACITY], d_sh, d_feat)
        })
        .collect();

    let mut out = FieldGradients::zeros(field.len(), d);
    for (prim, d_mean, d_quat, d_scale, d_opac, d_sh, d_feat) in rows {
        let i = prim as usize;
        out.means[i] += d_mean;
        for k in 0..4 {
            out.rotations[i][k] += d_quat[k];
        }
        out.scales[i] += d_scale;
        out.opacities[i] += d_opac;
        for k in 0..sh::SH_VALUES {
            out.sh[i * sh::SH_VALUES + k] += d_sh[k];
        }
        for k in 0..d {
            out.features[i * d + k] += d_feat[k];
        }
    }
    Ok(out)
}

pub(crate) fn check_shape<T: Float>(
    img: &Option<Image<T>>,
    active: bool,
    h: usize,
    w: usize,
    c: usize,
    name: &str,
) -> Result<()> {
    if let Some(img) = img {
        if !active {
            return Err(Error::ShapeMismatch(format!(
                "{name} gradient provided but channel was not rendered"
            )));
        }
        if img.height() != h || img.width() != w || img.channels() != c {
            return Err(Error::ShapeMismatch(format!(
                "{name} gradient is {}x{}x{}, expected {}x{}x{}",
                img.height(),
                img.width(),
                img.channels(),
                h,
                w,
                c
            )));
        }
    }
    Ok(())
}
