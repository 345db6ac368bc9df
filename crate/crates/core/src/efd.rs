//! Feature distillation: a small MLP decodes per-pixel latent features into
//! the embedding space of the per-mask instance embeddings, supervised by a
//! contrastive term (latents of the same mask should agree) and a
//! distillation term (decoded latents should match the mask's embedding).

use std::collections::BTreeMap;

use rand::Rng;

use crate::error::{Error, Result};
use crate::float::{cast, Float};
use crate::image::Image;

pub const DEFAULT_D_LATENT: usize = 16;
pub const DECODER_HIDDEN: usize = 128;
pub const DEFAULT_D_CLIP: usize = 512;
/// Pixel pairs drawn per view for the contrastive term.
pub const DEFAULT_CONTRASTIVE_PAIRS: usize = 4096;
/// Pixels drawn per mask per view for the distillation term.
pub const DEFAULT_DISTILL_PER_MASK: usize = 8;
/// Masks smaller than this cannot form a distinct pixel pair.
pub const MIN_MASK_AREA: usize = 2;
const NORM_EPS: f64 = 1e-12;

/// Integer instance-id map; id 0 marks unannotated pixels.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct InstanceMap {
    data: Vec<u32>,
    h: usize,
    w: usize,
}

impl InstanceMap {
    pub fn new(h: usize, w: usize, data: Vec<u32>) -> Self {
        assert_eq!(data.len(), h * w, "instance map buffer size mismatch");
        Self { data, h, w }
    }

    pub fn height(&self) -> usize {
        self.h
    }
    pub fn width(&self) -> usize {
        self.w
    }

    #[inline]
    pub fn id(&self, row: usize, col: usize) -> u32 {
        self.data[row * self.w + col]
    }

    pub fn data(&self) -> &[u32] {
        &self.data
    }

    /// Pixel area of every non-zero id, ordered by id.
    pub fn areas(&self) -> BTreeMap<u32, usize> {
        let mut areas = BTreeMap::new();
        for &id in &self.data {
            if id != 0 {
                *areas.entry(id).or_insert(0) += 1;
            }
        }
        areas
    }

    /// Row-major pixel list of one mask.
    pub fn pixels_of(&self, id: u32) -> Vec<(usize, usize)> {
        let mut out = Vec::new();
        for row in 0..self.h {
            for col in 0..self.w {
                if self.id(row, col) == id {
                    out.push((row, col));
                }
            }
        }
        out
    }
}

/// Two-layer ReLU MLP mapping latent features to unit vectors in the
/// instance-embedding space.
#[derive(Debug, Clone, PartialEq)]
pub struct Decoder<T> {
    /// `hidden x d_latent`, row-major.
    pub w1: Vec<T>,
    pub b1: Vec<T>,
    /// `d_clip x hidden`, row-major.
    pub w2: Vec<T>,
    pub b2: Vec<T>,
    pub d_latent: usize,
    pub hidden: usize,
    pub d_clip: usize,
}

/// Cached activations of one decoder evaluation.
#[derive(Debug, Clone)]
pub struct DecodeTrace<T> {
    pub h: Vec<T>,
    pub y: Vec<T>,
    pub y_norm: T,
    pub psi: Vec<T>,
    /// Output norm collapsed to ~0; `psi` is the zero vector.
    pub degenerate: bool,
}

#[derive(Debug, Clone)]
pub struct DecoderGrads<T> {
    pub w1: Vec<T>,
    pub b1: Vec<T>,
    pub w2: Vec<T>,
    pub b2: Vec<T>,
}

impl<T: Float> DecoderGrads<T> {
    pub fn zeros(d: &Decoder<T>) -> Self {
        Self {
            w1: vec![T::zero(); d.w1.len()],
            b1: vec![T::zero(); d.b1.len()],
            w2: vec![T::zero(); d.w2.len()],
            b2: vec![T::zero(); d.b2.len()],
        }
    }

    pub fn add(&mut self, other: &Self) {
        for (a, b) in self.w1.iter_mut().zip(&other.w1) {
            *a += *b;
        }
        for (a, b) in self.b1.iter_mut().zip(&other.b1) {
            *a += *b;
        }
        for (a, b) in self.w2.iter_mut().zip(&other.w2) {
            *a += *b;
        }
        for (a, b) in self.b2.iter_mut().zip(&other.b2) {
            *a += *b;
        }
    }
}

impl<T: Float> Decoder<T> {
    /// Kaiming-uniform weights (`+-sqrt(6/fan_in)`), zero biases.
    pub fn init(d_latent: usize, hidden: usize, d_clip: usize, rng: &mut impl Rng) -> Self {
        let bound1 = (6.0 / d_latent as f64).sqrt();
        let bound2 = (6.0 / hidden as f64).sqrt();
        let w1 = (0..hidden * d_latent)
            .map(|_| cast::<T>(rng.gen_range(-bound1..bound1)))
            .collect();
        let w2 = (0..d_clip * hidden)
            .map(|_| cast::<T>(rng.gen_range(-bound2..bound2)))
            .collect();
        Self {
            w1,
            b1: vec![T::zero(); hidden],
            w2,
            b2: vec![T::zero(); d_clip],
            d_latent,
            hidden,
            d_clip,
        }
    }

    pub fn param_count(&self) -> usize {
        self.w1.len() + self.b1.len() + self.w2.len() + self.b2.len()
    }

    /// Forward pass with cached activations.
    pub fn forward_trace(&self, x: &[T]) -> DecodeTrace<T> {
        assert_eq!(x.len(), self.d_latent, "decoder input dimension mismatch");
        let mut h = vec![T::zero(); self.hidden];
        for (i, hv) in h.iter_mut().enumerate() {
            let row = &self.w1[i * self.d_latent..(i + 1) * self.d_latent];
            let mut acc = self.b1[i];
            for (w, xv) in row.iter().zip(x) {
                acc += *w * *xv;
            }
            *hv = acc.max(T::zero());
        }
        let mut y = vec![T::zero(); self.d_clip];
        for (i, yv) in y.iter_mut().enumerate() {
            let row = &self.w2[i * self.hidden..(i + 1) * self.hidden];
            let mut acc = self.b2[i];
            for (w, hv) in row.iter().zip(&h) {
                acc += *w * *hv;
            }
            *yv = acc;
        }
        let norm_sq: T = y.iter().map(|v| *v * *v).sum();
        let y_norm = norm_sq.sqrt();
        let degenerate = y_norm.to_f64_cfg() < NORM_EPS;
        let psi = if degenerate {
            vec![T::zero(); self.d_clip]
        } else {
            y.iter().map(|v| *v / y_norm).collect()
        };
        DecodeTrace { h, y, y_norm, psi, degenerate }
    }

    /// Normalized embedding of one latent vector (zero if degenerate).
    pub fn decode(&self, x: &[T]) -> Vec<T> {
        self.forward_trace(x).psi
    }

    /// Backward through normalize -> linear -> ReLU -> linear. Returns the
    /// input gradient; parameter gradients accumulate into `grads`.
    /// Degenerate traces propagate nothing.
    pub fn backward(
        &self,
        x: &[T],
        trace: &DecodeTrace<T>,
        d_psi: &[T],
        grads: &mut DecoderGrads<T>,
    ) -> Vec<T> {
        assert_eq!(d_psi.len(), self.d_clip);
        if trace.degenerate {
            return vec![T::zero(); self.d_latent];
        }
        // psi = y / |y|: d_y = (d_psi - psi (psi . d_psi)) / |y|.
        let along: T = trace.psi.iter().zip(d_psi).map(|(p, g)| *p * *g).sum();
        let d_y: Vec<T> = trace
            .psi
            .iter()
            .zip(d_psi)
            .map(|(p, g)| (*g - *p * along) / trace.y_norm)
            .collect();
        self.backward_from_raw(x, trace, &d_y, grads)
    }

    /// Backward from a gradient on the un-normalized decoder output `y`.
    pub fn backward_from_raw(
        &self,
        x: &[T],
        trace: &DecodeTrace<T>,
        d_y: &[T],
        grads: &mut DecoderGrads<T>,
    ) -> Vec<T> {
        assert_eq!(d_y.len(), self.d_clip);
        let mut d_h = vec![T::zero(); self.hidden];
        for i in 0..self.d_clip {
            let gy = d_y[i];
            grads.b2[i] += gy;
            let row = &mut grads.w2[i * self.hidden..(i + 1) * self.hidden];
            let wrow = &self.w2[i * self.hidden..(i + 1) * self.hidden];
            for j in 0..self.hidden {
                row[j] += gy * trace.h[j];
                d_h[j] += gy * wrow[j];
            }
        }
        let mut d_x = vec![T::zero(); self.d_latent];
        for j in 0..self.hidden {
            if trace.h[j] <= T::zero() {
                continue;
            }
            let gh = d_h[j];
            grads.b1[j] += gh;
            let row = &mut grads.w1[j * self.d_latent..(j + 1) * self.d_latent];
            let wrow = &self.w1[j * self.d_latent..(j + 1) * self.d_latent];
            for k in 0..self.d_latent {
                row[k] += gh * x[k];
                d_x[k] += gh * wrow[k];
            }
        }
        d_x
    }
}

/// Pixel samples backing one view's feature supervision.
#[derive(Debug, Clone, Default)]
pub struct FeatureSamples {
    /// Same-mask pixel pairs `(r1, c1, r2, c2)` for the contrastive term.
    pub pairs: Vec<(usize, usize, usize, usize)>,
    /// `(row, col, mask id)` pixels for the distillation term.
    pub distill: Vec<(usize, usize, u32)>,
}

/// Largest-remainder apportionment of `total` slots by mask area; ties on
/// equal remainders favor the smaller id.
pub fn apportion_pairs(areas: &BTreeMap<u32, usize>, total: usize) -> BTreeMap<u32, usize> {
    let sum: usize = areas.values().sum();
    let mut quotas: BTreeMap<u32, usize> = BTreeMap::new();
    if sum == 0 || total == 0 {
        return quotas;
    }
    let mut remainders: Vec<(f64, u32)> = Vec::new();
    let mut assigned = 0usize;
    for (&id, &area) in areas {
        let exact = total as f64 * area as f64 / sum as f64;
        let floor = exact.floor() as usize;
        quotas.insert(id, floor);
        assigned += floor;
        remainders.push((exact - floor as f64, id));
    }
    // Distribute leftovers to the largest remainders, smaller id first.
    remainders.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap().then(a.1.cmp(&b.1)));
    for k in 0..total.saturating_sub(assigned) {
        let id = remainders[k % remainders.len()].1;
        *quotas.get_mut(&id).unwrap() += 1;
    }
    quotas
}

/// Draws the contrastive pairs and distillation pixels for one view.
/// Eligible masks have a non-zero id, an embedding, and area >=
/// [`MIN_MASK_AREA`]. Errors with [`Error::NoMasks`] when none qualify.
pub fn sample_supervision<T: Float>(
    map: &InstanceMap,
    embeddings: &BTreeMap<u32, Vec<T>>,
    n_pairs: usize,
    per_mask: usize,
    rng: &mut impl Rng,
) -> Result<FeatureSamples> {
    let mut areas = map.areas();
    areas.retain(|id, area| embeddings.contains_key(id) && *area >= MIN_MASK_AREA);
    if areas.is_empty() {
        return Err(Error::NoMasks);
    }
    let quotas = apportion_pairs(&areas, n_pairs);
    let mut out = FeatureSamples::default();
    for (&id, &quota) in &quotas {
        if quota == 0 {
            continue;
        }
        let px = map.pixels_of(id);
        for _ in 0..quota {
            let a = rng.gen_range(0..px.len());
            let b = loop {
                let b = rng.gen_range(0..px.len());
                if b != a {
                    break b;
                }
            };
            out.pairs.push((px[a].0, px[a].1, px[b].0, px[b].1));
        }
    }
    for &id in areas.keys() {
        let px = map.pixels_of(id);
        if px.len() >= per_mask {
            // Partial Fisher-Yates draw without replacement.
            let mut pool: Vec<usize> = (0..px.len()).collect();
            for k in 0..per_mask {
                let j = rng.gen_range(k..pool.len());
                pool.swap(k, j);
                let (r, c) = px[pool[k]];
                out.distill.push((r, c, id));
            }
        } else {
            for _ in 0..per_mask {
                let (r, c) = px[rng.gen_range(0..px.len())];
                out.distill.push((r, c, id));
            }
        }
    }
    Ok(out)
}

/// Contrastive loss `1 - mean(dot(F(u), F(v)))` over same-mask pixel pairs
/// of the raw rendered feature map, with its gradient image.
pub fn contrastive_loss<T: Float>(
    feat: &Image<T>,
    pairs: &[(usize, usize, usize, usize)],
) -> Result<(T, Image<T>)> {
    if pairs.is_empty() {
        return Err(Error::NoMasks);
    }
    let d = feat.channels();
    let inv_n = T::one() / cast::<T>(pairs.len() as f64);
    let mut mean_dot = T::zero();
    let mut grad = Image::zeros(feat.height(), feat.width(), d);
    for &(r1, c1, r2, c2) in pairs {
        let u = feat.px(r1, c1);
        let v = feat.px(r2, c2);
        let mut dot = T::zero();
        for ch in 0..d {
            dot += u[ch] * v[ch];
        }
        mean_dot += dot;
        // d(1 - mean dot)/dF(u) = -v / n and symmetrically for v.
        {
            let gu = grad.px_mut(r1, c1);
            for ch in 0..d {
                gu[ch] -= v[ch] * inv_n;
            }
        }
        let gv = grad.px_mut(r2, c2);
        for ch in 0..d {
            gv[ch] -= u[ch] * inv_n;
        }
    }
    Ok((T::one() - mean_dot * inv_n, grad))
}

/// Distillation loss `1 - mean(dot(decode(F(p)), embedding(mask(p))))` over
/// sampled pixels. Returns the feature-map gradient and accumulates decoder
/// parameter gradients. With `normalize` unset the raw decoder output is
/// dotted against the target instead of its unit-normalized form.
pub fn distill_loss<T: Float>(
    feat: &Image<T>,
    decoder: &Decoder<T>,
    samples: &[(usize, usize, u32)],
    embeddings: &BTreeMap<u32, Vec<T>>,
    normalize: bool,
) -> Result<(T, Image<T>, DecoderGrads<T>)> {
    if samples.is_empty() {
        return Err(Error::NoMasks);
    }
    let d = feat.channels();
    if d != decoder.d_latent {
        return Err(Error::ShapeMismatch(format!(
            "feature map has {d} channels but decoder expects {}",
            decoder.d_latent
        )));
    }
    let inv_k = T::one() / cast::<T>(samples.len() as f64);
    let mut mean_dot = T::zero();
    let mut grad = Image::zeros(feat.height(), feat.width(), d);
    let mut dgrads = DecoderGrads::zeros(decoder);
    for &(row, col, id) in samples {
        let target = embeddings.get(&id).ok_or(Error::MissingTargetFeature(id))?;
        if target.len() != decoder.d_clip {
            return Err(Error::ShapeMismatch(format!(
                "embedding for mask {id} has length {} but decoder outputs {}",
                target.len(),
                decoder.d_clip
            )));
        }
        let x = feat.px(row, col);
        let trace = decoder.forward_trace(x);
        let out = if normalize { &trace.psi } else { &trace.y };
        let mut dot = T::zero();
        for ch in 0..decoder.d_clip {
            dot += out[ch] * target[ch];
        }
        mean_dot += dot;
        let d_out: Vec<T> = target.iter().map(|t| -*t * inv_k).collect();
        let d_x = if normalize {
            decoder.backward(x, &trace, &d_out, &mut dgrads)
        } else {
            decoder.backward_from_raw(x, &trace, &d_out, &mut dgrads)
        };
        let g = grad.px_mut(row, col);
        for ch in 0..d {
            g[ch] += d_x[ch];
        }
    }
    Ok((T::one() - mean_dot * inv_k, grad, dgrads))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rel_err(a: f64, b: f64) -> f64 {
        (a - b).abs() / a.abs().max(b.abs()).max(1e-8)
    }

    fn random_feat(h: usize, w: usize, d: usize, seed: u64) -> Image<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Image::from_vec(h, w, d, (0..h * w * d).map(|_| rng.gen_range(-0.8..0.8)).collect())
    }

    #[test]
    fn decoder_outputs_unit_vectors() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let dec = Decoder::<f64>::init(8, 32, 24, &mut rng);
        for seed in 0..10u64 {
            let mut r2 = ChaCha8Rng::seed_from_u64(seed + 50);
            let x: Vec<f64> = (0..8).map(|_| r2.gen_range(-1.0..1.0)).collect();
            let psi = dec.decode(&x);
            let n: f64 = psi.iter().map(|v| v * v).sum::<f64>().sqrt();
            assert!((n - 1.0).abs() < 1e-12, "norm {n}");
        }
    }

    #[test]
    fn zero_latent_with_zero_biases_decodes_degenerate() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let dec = Decoder::<f64>::init(8, 32, 24, &mut rng);
        let trace = dec.forward_trace(&vec![0.0; 8]);
        assert!(trace.degenerate);
        assert!(trace.psi.iter().all(|v| *v == 0.0));
        // Backward through a degenerate trace is a no-op.
        let mut g = DecoderGrads::zeros(&dec);
        let dx = dec.backward(&vec![0.0; 8], &trace, &vec![1.0; 24], &mut g);
        assert!(dx.iter().all(|v| *v == 0.0));
        assert!(g.w1.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn decoder_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let dec = Decoder::<f64>::init(5, 11, 7, &mut rng);
        let x: Vec<f64> = (0..5).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let w: Vec<f64> = (0..7).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let loss = |d: &Decoder<f64>, x: &[f64]| -> f64 {
            d.decode(x).iter().zip(&w).map(|(p, wv)| p * wv).sum()
        };
        let trace = dec.forward_trace(&x);
        let mut grads = DecoderGrads::zeros(&dec);
        let d_x = dec.backward(&x, &trace, &w, &mut grads);
        let h = 1e-6;

        for k in 0..x.len() {
            let mut xp = x.clone();
            xp[k] += h;
            let mut xm = x.clone();
            xm[k] -= h;
            let fd = (loss(&dec, &xp) - loss(&dec, &xm)) / (2.0 * h);
            assert!(rel_err(fd, d_x[k]) < 1e-5 || (fd - d_x[k]).abs() < 1e-9, "d_x[{k}]");
        }
        let probe = |get: &dyn Fn(&Decoder<f64>) -> f64, set: &dyn Fn(&mut Decoder<f64>, f64), analytic: f64, name: String| {
            let mut dp = dec.clone();
            set(&mut dp, get(&dec) + h);
            let mut dm = dec.clone();
            set(&mut dm, get(&dec) - h);
            let fd = (loss(&dp, &x) - loss(&dm, &x)) / (2.0 * h);
            assert!(
                rel_err(fd, analytic) < 1e-5 || (fd - analytic).abs() < 1e-9,
                "{name}: fd {fd} vs {analytic}"
            );
        };
        let mut rng2 = ChaCha8Rng::seed_from_u64(17);
        for _ in 0..20 {
            let i = rng2.gen_range(0..dec.w1.len());
            probe(&|d| d.w1[i], &|d, v| d.w1[i] = v, grads.w1[i], format!("w1[{i}]"));
            let j = rng2.gen_range(0..dec.w2.len());
            probe(&|d| d.w2[j], &|d, v| d.w2[j] = v, grads.w2[j], format!("w2[{j}]"));
            let k = rng2.gen_range(0..dec.b1.len());
            probe(&|d| d.b1[k], &|d, v| d.b1[k] = v, grads.b1[k], format!("b1[{k}]"));
            let l = rng2.gen_range(0..dec.b2.len());
            probe(&|d| d.b2[l], &|d, v| d.b2[l] = v, grads.b2[l], format!("b2[{l}]"));
        }
    }

    #[test]
    fn apportionment_follows_largest_remainders() {
        let mut areas = BTreeMap::new();
        areas.insert(1u32, 300usize);
        areas.insert(2u32, 100usize);
        let q = apportion_pairs(&areas, 4);
        assert_eq!(q[&1], 3);
        assert_eq!(q[&2], 1);
        // Quotas always sum to the requested total.
        let mut areas2 = BTreeMap::new();
        for (id, a) in [(3u32, 7usize), (5, 13), (9, 11), (12, 2)] {
            areas2.insert(id, a);
        }
        for total in [1usize, 5, 17, 100] {
            let q = apportion_pairs(&areas2, total);
            assert_eq!(q.values().sum::<usize>(), total, "total {total}");
        }
        // Equal areas, one leftover slot: the smaller id wins the tie.
        let mut areas3 = BTreeMap::new();
        areas3.insert(4u32, 50usize);
        areas3.insert(7u32, 50usize);
        let q = apportion_pairs(&areas3, 3);
        assert_eq!(q[&4], 2);
        assert_eq!(q[&7], 1);
    }

    fn two_mask_map() -> InstanceMap {
        // 6x6: left half id 1 (18 px), right 2x2 corner id 2 (4 px).
        let mut data = vec![0u32; 36];
        for row in 0..6 {
            for col in 0..3 {
                data[row * 6 + col] = 1;
            }
        }
        for row in 0..2 {
            for col in 4..6 {
                data[row * 6 + col] = 2;
            }
        }
        InstanceMap::new(6, 6, data)
    }

    fn unit_embedding(d: usize, axis: usize) -> Vec<f64> {
        let mut v = vec![0.0; d];
        v[axis] = 1.0;
        v
    }

    #[test]
    fn sampling_respects_masks_and_counts() {
        let map = two_mask_map();
        let mut embeds = BTreeMap::new();
        embeds.insert(1u32, unit_embedding(6, 0));
        embeds.insert(2u32, unit_embedding(6, 1));
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let s = sample_supervision(&map, &embeds, 10, 8, &mut rng).unwrap();
        assert_eq!(s.pairs.len(), 10);
        for &(r1, c1, r2, c2) in &s.pairs {
            assert_eq!(map.id(r1, c1), map.id(r2, c2));
            assert_ne!(map.id(r1, c1), 0);
            assert!((r1, c1) != (r2, c2), "pair pixels must be distinct");
        }
        // 8 distill pixels per mask, for both masks; the 4-px mask resamples.
        assert_eq!(s.distill.len(), 16);
        for &(r, c, id) in &s.distill {
            assert_eq!(map.id(r, c), id);
        }
        assert_eq!(s.distill.iter().filter(|(_, _, id)| *id == 2).count(), 8);
    }

    #[test]
    fn masks_without_embeddings_are_not_sampled() {
        let map = two_mask_map();
        let mut embeds = BTreeMap::new();
        embeds.insert(2u32, unit_embedding(6, 1));
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let s = sample_supervision(&map, &embeds, 6, 4, &mut rng).unwrap();
        for &(r1, c1, ..) in &s.pairs {
            assert_eq!(map.id(r1, c1), 2);
        }
        let empty: BTreeMap<u32, Vec<f64>> = BTreeMap::new();
        assert!(matches!(
            sample_supervision(&map, &empty, 6, 4, &mut rng),
            Err(Error::NoMasks)
        ));
    }

    #[test]
    fn contrastive_loss_and_gradients() {
        let feat = random_feat(6, 6, 4, 6);
        let pairs = vec![(0, 0, 1, 1), (2, 3, 4, 5), (0, 0, 5, 5)];
        let (v, grad) = contrastive_loss(&feat, &pairs).unwrap();
        // Identical unit features everywhere would give loss ~0; random
        // sub-unit features stay in [1 - 1, 1 + 1].
        assert!((0.0..=2.0).contains(&v));
        let h = 1e-6;
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..20 {
            let q = rng.gen_range(0..feat.data().len());
            let mut fp = feat.clone();
            fp.data_mut()[q] += h;
            let mut fm = feat.clone();
            fm.data_mut()[q] -= h;
            let fd = (contrastive_loss(&fp, &pairs).unwrap().0
                - contrastive_loss(&fm, &pairs).unwrap().0)
                / (2.0 * h);
            let a = grad.data()[q];
            assert!(rel_err(fd, a) < 1e-6 || (fd - a).abs() < 1e-10, "{fd} vs {a}");
        }
    }

    #[test]
    fn identical_unit_features_minimize_contrastive() {
        let mut feat = Image::<f64>::zeros(4, 4, 3);
        for row in 0..4 {
            for col in 0..4 {
                feat.px_mut(row, col).copy_from_slice(&[1.0, 0.0, 0.0]);
            }
        }
        let (v, _) = contrastive_loss(&feat, &[(0, 0, 1, 1), (2, 2, 3, 3)]).unwrap();
        assert!(v.abs() < 1e-12);
    }

    #[test]
    fn distill_loss_and_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let dec = Decoder::<f64>::init(4, 9, 6, &mut rng);
        let feat = random_feat(5, 5, 4, 9);
        let mut embeds = BTreeMap::new();
        embeds.insert(1u32, unit_embedding(6, 2));
        embeds.insert(2u32, unit_embedding(6, 4));
        let samples = vec![(0usize, 0usize, 1u32), (1, 2, 2), (3, 4, 1), (4, 4, 2)];
        for normalize in [true, false] {
            let (v, grad, dgrads) =
                distill_loss(&feat, &dec, &samples, &embeds, normalize).unwrap();
            if normalize {
                assert!((0.0..=2.0).contains(&v));
            }

            let h = 1e-6;
            for _ in 0..15 {
                let q = rng.gen_range(0..feat.data().len());
                let mut fp = feat.clone();
                fp.data_mut()[q] += h;
                let mut fm = feat.clone();
                fm.data_mut()[q] -= h;
                let fd = (distill_loss(&fp, &dec, &samples, &embeds, normalize).unwrap().0
                    - distill_loss(&fm, &dec, &samples, &embeds, normalize).unwrap().0)
                    / (2.0 * h);
                let a = grad.data()[q];
                assert!(
                    rel_err(fd, a) < 1e-5 || (fd - a).abs() < 1e-9,
                    "feat[{q}] norm={normalize}: {fd} vs {a}"
                );
            }
            for _ in 0..15 {
                let i = rng.gen_range(0..dec.w1.len());
                let mut dp = dec.clone();
                dp.w1[i] += h;
                let mut dm = dec.clone();
                dm.w1[i] -= h;
                let fd = (distill_loss(&feat, &dp, &samples, &embeds, normalize).unwrap().0
                    - distill_loss(&feat, &dm, &samples, &embeds, normalize).unwrap().0)
                    / (2.0 * h);
                let a = dgrads.w1[i];
                assert!(
                    rel_err(fd, a) < 1e-5 || (fd - a).abs() < 1e-9,
                    "w1[{i}] norm={normalize}: {fd} vs {a}"
                );
            }
        }
    }

    #[test]
    fn distill_missing_embedding_is_reported() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let dec = Decoder::<f64>::init(4, 9, 6, &mut rng);
        let feat = random_feat(3, 3, 4, 11);
        let embeds: BTreeMap<u32, Vec<f64>> = BTreeMap::new();
        let err = distill_loss(&feat, &dec, &[(0, 0, 7)], &embeds, true).unwrap_err();
        assert!(matches!(err, Error::MissingTargetFeature(7)));
    }
}
