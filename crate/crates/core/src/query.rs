//! Open-vocabulary querying: per-pixel relevance of rendered feature maps
//! against a query embedding, threshold-mask localization in 2D, and
//! re-projection into a 3D bbox + convex hull.

use rayon::prelude::*;

use crate::efd::Decoder;
use crate::error::{Error, Result};
use crate::float::{cast, Float};
use crate::hull::{convex_hull, ConvexHull};
use crate::image::Image;
use crate::math::Vec3;
use crate::raster::{self, ChannelSet, RasterConfig, RenderCamera};

pub const DEFAULT_RELEVANCE_THRESHOLD: f64 = 0.85;
/// Pixels with accumulated alpha at or below this carry too little surface
/// evidence to re-project.
pub const REPROJECTION_MIN_ALPHA: f64 = 0.5;

/// A query embedding plus the canonical-phrase embeddings it competes with.
#[derive(Debug, Clone)]
pub struct QueryEmbeddings<T> {
    pub query: Vec<T>,
    pub canonical: Vec<Vec<T>>,
}

impl<T: Float> QueryEmbeddings<T> {
    pub fn validate(&self) -> Result<()> {
        if self.canonical.is_empty() {
            return Err(Error::DegenerateInput("canonical embedding list is empty".into()));
        }
        for (name, v) in std::iter::once(("query", &self.query))
            .chain(self.canonical.iter().map(|c| ("canonical", c)))
        {
            if v.len() != self.query.len() {
                return Err(Error::ShapeMismatch(format!(
                    "{name} embedding length {} != query length {}",
                    v.len(),
                    self.query.len()
                )));
            }
            // Accumulate in f64: a 512-wide f32 sum drifts past any
            // tolerance tight enough to be useful.
            let n = v.iter().map(|x| x.to_f64_cfg().powi(2)).sum::<f64>().sqrt();
            if (n - 1.0).abs() > 1e-4 {
                return Err(Error::InvariantViolation(format!(
                    "{name} embedding norm {n} is not unit"
                )));
            }
        }
        Ok(())
    }
}

/// Pairwise-softmax relevance: the minimum over canonicals of
/// `exp(q) / (exp(q) + exp(c_i))`, which equals `sigmoid(q - max_i c_i)`.
pub fn relevance_from_dots<T: Float>(query_dot: T, canonical_dots: &[T]) -> T {
    let mut c_max = canonical_dots[0];
    for c in &canonical_dots[1..] {
        if *c > c_max {
            c_max = *c;
        }
    }
    sigmoid(query_dot - c_max)
}

#[inline]
fn sigmoid<T: Float>(t: T) -> T {
    T::one() / (T::one() + (-t).exp())
}

/// Straightforward relevance of one latent vector: decode, dot, softmax.
/// Degenerate decodes (zero output) score 0.
pub fn relevance_naive<T: Float>(
    decoder: &Decoder<T>,
    latent: &[T],
    embeddings: &QueryEmbeddings<T>,
) -> T {
    let trace = decoder.forward_trace(latent);
    if trace.degenerate {
        return T::zero();
    }
    let dot = |a: &[T], b: &[T]| -> T { a.iter().zip(b).map(|(x, y)| *x * *y).sum() };
    let q = dot(&trace.psi, &embeddings.query);
    let cs: Vec<T> = embeddings.canonical.iter().map(|c| dot(&trace.psi, c)).collect();
    relevance_from_dots(q, &cs)
}

/// Precomputed relevance evaluator.
///
/// Avoids materializing the `d_clip` decoder output per pixel: with
/// `h = relu(W1 x + b1)` and `y = W2 h + b2`,
/// `y . t = (W2' t) . h + b2 . t` and
/// `|y|^2 = h' (W2'W2) h + 2 (W2' b2) . h + |b2|^2`,
/// so only `hidden`-sized dot products and one `hidden x hidden` quadratic
/// form (restricted to the ReLU-active coordinates) remain per pixel.
pub struct RelevanceEvaluator<T> {
    w1: Vec<T>,
    b1: Vec<T>,
    d_latent: usize,
    hidden: usize,
    /// Gram matrix `W2' W2`, row-major `hidden x hidden`.
    gram: Vec<T>,
    /// `W2' b2`.
    w2t_b2: Vec<T>,
    b2_sq: T,
    /// `W2' query` and `b2 . query`.
    wq: Vec<T>,
    bq: T,
    /// Per canonical: `W2' c` and `b2 . c`.
    wc: Vec<Vec<T>>,
    bc: Vec<T>,
}

impl<T: Float> RelevanceEvaluator<T> {
    pub fn new(decoder: &Decoder<T>, embeddings: &QueryEmbeddings<T>) -> Result<Self> {
        embeddings.validate()?;
        if embeddings.query.len() != decoder.d_clip {
            return Err(Error::ShapeMismatch(format!(
                "embeddings have dimension {} but decoder outputs {}",
                embeddings.query.len(),
                decoder.d_clip
            )));
        }
        let hidden = decoder.hidden;
        let mut gram = vec![T::zero(); hidden * hidden];
        for r in 0..decoder.d_clip {
            let row = &decoder.w2[r * hidden..(r + 1) * hidden];
            for i in 0..hidden {
                let ri = row[i];
                if ri == T::zero() {
                    continue;
                }
                let g = &mut gram[i * hidden..(i + 1) * hidden];
                for (j, w) in row.iter().enumerate() {
                    g[j] += ri * *w;
                }
            }
        }
        let project = |v: &[T]| -> (Vec<T>, T) {
            let mut out = vec![T::zero(); hidden];
            let mut bias = T::zero();
            for r in 0..decoder.d_clip {
                let row = &decoder.w2[r * hidden..(r + 1) * hidden];
                for j in 0..hidden {
                    out[j] += row[j] * v[r];
                }
                bias += decoder.b2[r] * v[r];
            }
            (out, bias)
        };
        let (w2t_b2, b2_sq) = {
            let (v, _) = project(&decoder.b2);
            let sq: T = decoder.b2.iter().map(|x| *x * *x).sum();
            (v, sq)
        };
        let (wq, bq) = project(&embeddings.query);
        let mut wc = Vec::new();
        let mut bc = Vec::new();
        for c in &embeddings.canonical {
            let (v, b) = project(c);
            wc.push(v);
            bc.push(b);
        }
        Ok(Self {
            w1: decoder.w1.clone(),
            b1: decoder.b1.clone(),
            d_latent: decoder.d_latent,
            hidden,
            gram,
            w2t_b2,
            b2_sq,
            wq,
            bq,
            wc,
            bc,
        })
    }

    /// Relevance of one latent vector. `scratch` must hold `hidden` values
    /// and `active` indexes; both are overwritten.
    fn eval_with(&self, x: &[T], h: &mut [T], active: &mut Vec<usize>) -> T {
        debug_assert_eq!(x.len(), self.d_latent);
        active.clear();
        for i in 0..self.hidden {
            let row = &self.w1[i * self.d_latent..(i + 1) * self.d_latent];
            let mut acc = self.b1[i];
            for (w, xv) in row.iter().zip(x) {
                acc += *w * *xv;
            }
            if acc > T::zero() {
                h[i] = acc;
                active.push(i);
            } else {
                h[i] = T::zero();
            }
        }
        // |y|^2 over active coordinates only.
        let mut quad = T::zero();
        for &j in active.iter() {
            let hj = h[j];
            let g = &self.gram[j * self.hidden..(j + 1) * self.hidden];
            let mut inner = T::zero();
            for &i in active.iter() {
                inner += g[i] * h[i];
            }
            quad += hj * inner;
        }
        let mut cross = T::zero();
        for &j in active.iter() {
            cross += self.w2t_b2[j] * h[j];
        }
        let norm_sq = quad + cross + cross + self.b2_sq;
        if norm_sq.to_f64_cfg() <= 1e-24 {
            return T::zero();
        }
        let norm = norm_sq.sqrt();
        let mut q = self.bq;
        for &j in active.iter() {
            q += self.wq[j] * h[j];
        }
        let mut c_max = T::min_value().unwrap_or(-T::one() / cast::<T>(1e-30));
        for (wc, bc) in self.wc.iter().zip(&self.bc) {
            let mut ci = *bc;
            for &j in active.iter() {
                ci += wc[j] * h[j];
            }
            if ci > c_max {
                c_max = ci;
            }
        }
        sigmoid((q - c_max) / norm)
    }

    pub fn eval(&self, latent: &[T]) -> T {
        let mut h = vec![T::zero(); self.hidden];
        let mut active = Vec::with_capacity(self.hidden);
        self.eval_with(latent, &mut h, &mut active)
    }

    /// Relevance map of a rendered feature image, parallel over rows.
    pub fn relevance_map(&self, feat: &Image<T>) -> Result<Image<T>> {
        if feat.channels() != self.d_latent {
            return Err(Error::ShapeMismatch(format!(
                "feature map has {} channels, evaluator expects {}",
                feat.channels(),
                self.d_latent
            )));
        }
        let (h, w) = (feat.height(), feat.width());
        let mut out = Image::zeros(h, w, 1);
        out.data_mut()
            .par_chunks_mut(w)
            .enumerate()
            .for_each(|(row, line)| {
                let mut hbuf = vec![T::zero(); self.hidden];
                let mut active = Vec::with_capacity(self.hidden);
                for (col, px) in line.iter_mut().enumerate() {
                    *px = self.eval_with(feat.px(row, col), &mut hbuf, &mut active);
                }
            });
        Ok(out)
    }
}

/// Result of localizing a query across one or more views.
#[derive(Debug, Clone)]
pub struct Localization<T> {
    /// Per-view relevance maps, in input view order.
    pub relevance: Vec<Image<T>>,
    /// Per-view raw threshold masks (`relevance >= threshold`).
    pub mask2d: Vec<Vec<bool>>,
    /// Merged world points re-projected from the largest connected
    /// component of each view's mask.
    pub points: Vec<Vec3<T>>,
    pub bbox_min: Vec3<T>,
    pub bbox_max: Vec3<T>,
    pub hull: ConvexHull<T>,
}

/// Largest 8-connected true-component of a boolean mask; ties broken by the
/// component containing the earliest row-major pixel.
pub fn largest_component(mask: &[bool], h: usize, w: usize) -> Vec<bool> {
    assert_eq!(mask.len(), h * w);
    let mut label = vec![usize::MAX; h * w];
    let mut best: Option<(usize, usize)> = None; // (size, component id)
    let mut n_comp = 0usize;
    let mut stack = Vec::new();
    for start in 0..h * w {
        if !mask[start] || label[start] != usize::MAX {
            continue;
        }
        let id = n_comp;
        n_comp += 1;
        let mut size = 0usize;
        stack.push(start);
        label[start] = id;
        while let Some(p) = stack.pop() {
            size += 1;
            let (r, c) = (p / w, p % w);
            for dr in -1isize..=1 {
                for dc in -1isize..=1 {
                    if dr == 0 && dc == 0 {
                        continue;
                    }
                    let (nr, nc) = (r as isize + dr, c as isize + dc);
                    if nr < 0 || nc < 0 || nr >= h as isize || nc >= w as isize {
                        continue;
                    }
                    let q = nr as usize * w + nc as usize;
                    if mask[q] && label[q] == usize::MAX {
                        label[q] = id;
                        stack.push(q);
                    }
                }
            }
        }
        // Earlier components win ties because `start` scans row-major.
        if best.map_or(true, |(bs, _)| size > bs) {
            best = Some((size, id));
        }
    }
    match best {
        None => vec![false; h * w],
        Some((_, id)) => label.iter().map(|&l| l == id).collect(),
    }
}

/// World points of masked pixels with enough surface evidence. Rendered
/// depth is an alpha-weighted partial sum, so the expected surface depth is
/// `depth / alpha`; pixels with alpha <= [`REPROJECTION_MIN_ALPHA`] are
/// skipped.
pub fn surface_points<T: Float>(
    depth: &Image<T>,
    alpha: &Image<T>,
    mask: &[bool],
    cam: &RenderCamera<T>,
) -> Vec<Vec3<T>> {
    let (h, w) = (depth.height(), depth.width());
    let min_alpha = cast::<T>(REPROJECTION_MIN_ALPHA);
    let mut out = Vec::new();
    for row in 0..h {
        for col in 0..w {
            if !mask[row * w + col] {
                continue;
            }
            let a = alpha.at(row, col);
            if a <= min_alpha {
                continue;
            }
            let z = depth.at(row, col) / a;
            if z <= T::zero() {
                continue;
            }
            out.push(cam.pose.apply(&cam.intrinsics.backproject_px(row, col, z)));
        }
    }
    out
}

/// Renders feature + depth per view, thresholds relevance, and merges the
/// re-projected object points into one bbox + hull.
pub fn localize<T: Float>(
    field: &crate::field::GaussianField<T>,
    cams: &[RenderCamera<T>],
    decoder: &Decoder<T>,
    embeddings: &QueryEmbeddings<T>,
    threshold: T,
    cfg: &RasterConfig,
) -> Result<Localization<T>> {
    if cams.is_empty() {
        return Err(Error::DegenerateInput("localize needs at least one view".into()));
    }
    let eval = RelevanceEvaluator::new(decoder, embeddings)?;
    let channels = ChannelSet { feature: true, depth: true, ..Default::default() };
    let mut relevance = Vec::new();
    let mut mask2d = Vec::new();
    let mut points = Vec::new();
    for cam in cams {
        let cache = raster::project(field, cam, cfg);
        let (out, _) = raster::render_forward(field, cam, channels, &cache, cfg);
        let rel = eval.relevance_map(out.feature.as_ref().unwrap())?;
        let mask: Vec<bool> = rel.data().iter().map(|v| *v >= threshold).collect();
        if mask.iter().any(|&m| m) {
            let comp = largest_component(&mask, cam.height, cam.width);
            points.extend(surface_points(
                out.depth.as_ref().unwrap(),
                &out.alpha,
                &comp,
                cam,
            ));
        }
        relevance.push(rel);
        mask2d.push(mask);
    }
    if points.is_empty() {
        return Err(Error::EmptyQueryResult);
    }
    let mut bbox_min = points[0];
    let mut bbox_max = points[0];
    for p in &points[1..] {
        for k in 0..3 {
            bbox_min[k] = bbox_min[k].min(p[k]);
            bbox_max[k] = bbox_max[k].max(p[k]);
        }
    }
    let hull = match convex_hull(&points) {
        Ok(hull) => hull,
        // Too few or coplanar points: fall back to the inflated bbox.
        Err(Error::DegenerateInput(_)) => {
            let diag = (bbox_max - bbox_min).norm();
            let pad = diag * cast::<T>(1e-6) + cast::<T>(1e-4);
            let lo = bbox_min - Vec3::new(pad, pad, pad);
            let hi = bbox_max + Vec3::new(pad, pad, pad);
            let corners: Vec<Vec3<T>> = (0..8)
                .map(|k| {
                    Vec3::new(
                        if k & 1 == 0 { lo[0] } else { hi[0] },
                        if k & 2 == 0 { lo[1] } else { hi[1] },
                        if k & 4 == 0 { lo[2] } else { hi[2] },
                    )
                })
                .collect();
            convex_hull(&corners)?
        }
        Err(e) => return Err(e),
    };
    Ok(Localization { relevance, mask2d, points, bbox_min, bbox_max, hull })
}

/// Row-major-first argmax pixel of a single-channel map.
pub fn argmax_pixel<T: Float>(map: &Image<T>) -> (usize, usize) {
    let (h, w) = (map.height(), map.width());
    let mut best = (0usize, 0usize);
    let mut best_v = map.at(0, 0);
    for row in 0..h {
        for col in 0..w {
            let v = map.at(row, col);
            if v > best_v {
                best_v = v;
                best = (row, col);
            }
        }
    }
    best
}

/// True iff the highest-relevance pixel (row-major tie-break) lies in the
/// ground-truth mask.
pub fn localization_hit<T: Float>(relevance: &Image<T>, gt_mask: &[bool]) -> Result<bool> {
    if gt_mask.len() != relevance.height() * relevance.width() {
        return Err(Error::ShapeMismatch(format!(
            "mask has {} entries for a {}x{} relevance map",
            gt_mask.len(),
            relevance.height(),
            relevance.width()
        )));
    }
    let (r, c) = argmax_pixel(relevance);
    Ok(gt_mask[r * relevance.width() + c])
}
