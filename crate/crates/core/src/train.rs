//! Field optimization: seeded view sampling, the five render-supervised
//! loss terms, per-attribute Adam, and parameter projections that keep the
//! field valid between steps.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::camera::CameraView;
use crate::efd::{self, Decoder, DecoderGrads, InstanceMap};
use crate::error::{Error, Result};
use crate::field::GaussianField;
use crate::float::{cast, Float};
use crate::geometry::normals_from_depth;
use crate::image::Image;
use crate::loss;
use crate::raster::{self, ChannelGrads, ChannelSet, RasterConfig, RenderCamera};
use crate::sh::SH_VALUES;

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-15;
/// Opacities are clamped to `[OPACITY_MIN, 1 - OPACITY_MIN]` after each step.
pub const OPACITY_MIN: f64 = 1e-4;
pub const SCALE_MIN: f64 = 1e-6;
/// With pruning enabled, primitives dimmer than this are dropped every
/// [`PRUNE_INTERVAL`] iterations.
pub const PRUNE_OPACITY_THRESHOLD: f64 = 0.005;
pub const PRUNE_INTERVAL: usize = 500;
/// The active harmonics degree grows by one every this many iterations.
pub const SH_DEGREE_INTERVAL: usize = 1000;
/// The position learning rate decays exponentially to this fraction of its
/// initial value over the configured iteration count.
pub const MEANS_LR_FINAL_FRACTION: f64 = 0.01;

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub iterations: usize,
    pub lr_means: f64,
    pub lr_rotation: f64,
    pub lr_scales: f64,
    pub lr_opacity: f64,
    pub lr_sh: f64,
    pub lr_latent: f64,
    pub lr_decoder: f64,
    pub lambda_rgb: f64,
    pub lambda_depth: f64,
    pub lambda_normal: f64,
    pub lambda_contrastive: f64,
    pub lambda_distill: f64,
    /// Contrastive pixel-pair budget per iteration.
    pub contrastive_pairs: usize,
    /// Distillation pixels drawn per mask per iteration.
    pub distill_per_mask: usize,
    /// Dot the unit-normalized decoder output against the target (the
    /// default) rather than the raw output.
    pub distill_normalize: bool,
    pub seed: u64,
    /// Few-view refinement: a tenth of the iterations at the fully decayed
    /// position learning rate and full harmonics degree.
    pub fine_tune: bool,
    pub prune: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            iterations: 3000,
            lr_means: 1.6e-4,
            lr_rotation: 1e-3,
            lr_scales: 5e-3,
            lr_opacity: 5e-2,
            lr_sh: 2.5e-3,
            lr_latent: 2.5e-3,
            lr_decoder: 1e-3,
            lambda_rgb: 1.0,
            lambda_depth: 0.5,
            lambda_normal: 0.05,
            lambda_contrastive: 0.1,
            lambda_distill: 0.1,
            contrastive_pairs: efd::DEFAULT_CONTRASTIVE_PAIRS,
            distill_per_mask: efd::DEFAULT_DISTILL_PER_MASK,
            distill_normalize: true,
            seed: 0,
            fine_tune: false,
            prune: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("lr_means", self.lr_means),
            ("lr_rotation", self.lr_rotation),
            ("lr_scales", self.lr_scales),
            ("lr_opacity", self.lr_opacity),
            ("lr_sh", self.lr_sh),
            ("lr_latent", self.lr_latent),
            ("lr_decoder", self.lr_decoder),
            ("lambda_rgb", self.lambda_rgb),
            ("lambda_depth", self.lambda_depth),
            ("lambda_normal", self.lambda_normal),
            ("lambda_contrastive", self.lambda_contrastive),
            ("lambda_distill", self.lambda_distill),
        ] {
            if !(v >= 0.0) || !v.is_finite() {
                return Err(Error::InvariantViolation(format!("{name} = {v} must be >= 0")));
            }
        }
        if self.lambda_contrastive > 0.0 && self.contrastive_pairs == 0 {
            return Err(Error::InvariantViolation(
                "contrastive term enabled with a zero pair budget".into(),
            ));
        }
        if self.lambda_distill > 0.0 && self.distill_per_mask == 0 {
            return Err(Error::InvariantViolation(
                "distillation term enabled with zero pixels per mask".into(),
            ));
        }
        Ok(())
    }

    /// Optimization steps actually run: a tenth (rounded up) when
    /// fine-tuning.
    pub fn steps(&self) -> usize {
        if self.fine_tune {
            self.iterations.div_ceil(10)
        } else {
            self.iterations
        }
    }

    /// Exponentially decayed position learning rate at an iteration.
    /// Fine-tuning always uses the fully decayed value.
    pub fn lr_means_at(&self, iteration: usize) -> f64 {
        let progress = if self.fine_tune || self.iterations == 0 {
            1.0
        } else {
            (iteration as f64 / self.iterations as f64).min(1.0)
        };
        self.lr_means * MEANS_LR_FINAL_FRACTION.powf(progress)
    }

    /// Harmonics degree active at an iteration (grows from 0 during
    /// training; fine-tuning starts fully grown).
    pub fn sh_degree_at(&self, iteration: usize) -> usize {
        if self.fine_tune {
            3
        } else {
            (iteration / SH_DEGREE_INTERVAL).min(3)
        }
    }

    /// Parses `key = value` lines; `#` starts a comment, unknown keys are
    /// rejected, missing keys keep their defaults.
    pub fn parse_str(text: &str, origin: &str) -> Result<Self> {
        let mut cfg = Self::default();
        let bad = |line: usize, detail: String| Error::ParseError {
            path: origin.to_string(),
            detail: format!("line {}: {detail}", line + 1),
        };
        for (ln, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| bad(ln, format!("expected `key = value`, got `{line}`")))?;
            let (key, value) = (key.trim(), value.trim());
            let f = || {
                value
                    .parse::<f64>()
                    .map_err(|e| bad(ln, format!("bad number `{value}` for {key}: {e}")))
            };
            let u = || {
                value
                    .parse::<usize>()
                    .map_err(|e| bad(ln, format!("bad count `{value}` for {key}: {e}")))
            };
            let b = || {
                value
                    .parse::<bool>()
                    .map_err(|e| bad(ln, format!("bad flag `{value}` for {key}: {e}")))
            };
            match key {
                "iterations" => cfg.iterations = u()?,
                "lr_means" => cfg.lr_means = f()?,
                "lr_rotation" => cfg.lr_rotation = f()?,
                "lr_scales" => cfg.lr_scales = f()?,
                "lr_opacity" => cfg.lr_opacity = f()?,
                "lr_sh" => cfg.lr_sh = f()?,
                "lr_latent" => cfg.lr_latent = f()?,
                "lr_decoder" => cfg.lr_decoder = f()?,
                "lambda_rgb" => cfg.lambda_rgb = f()?,
                "lambda_depth" => cfg.lambda_depth = f()?,
                "lambda_normal" => cfg.lambda_normal = f()?,
                "lambda_contrastive" => cfg.lambda_contrastive = f()?,
                "lambda_distill" => cfg.lambda_distill = f()?,
                "contrastive_pairs" => cfg.contrastive_pairs = u()?,
                "distill_per_mask" => cfg.distill_per_mask = u()?,
                "distill_normalize" => cfg.distill_normalize = b()?,
                "seed" => {
                    cfg.seed = value
                        .parse::<u64>()
                        .map_err(|e| bad(ln, format!("bad seed `{value}`: {e}")))?
                }
                "fine_tune" => cfg.fine_tune = b()?,
                "prune" => cfg.prune = b()?,
                other => return Err(bad(ln, format!("unknown key `{other}`"))),
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_text(&self) -> String {
        format!(
            "iterations = {}\n\
             lr_means = {}\n\
             lr_rotation = {}\n\
             lr_scales = {}\n\
             lr_opacity = {}\n\
             lr_sh = {}\n\
             lr_latent = {}\n\
             lr_decoder = {}\n\
             lambda_rgb = {}\n\
             lambda_depth = {}\n\
             lambda_normal = {}\n\
             lambda_contrastive = {}\n\
             lambda_distill = {}\n\
             contrastive_pairs = {}\n\
             distill_per_mask = {}\n\
             distill_normalize = {}\n\
             seed = {}\n\
             fine_tune = {}\n\
             prune = {}\n",
            self.iterations,
            self.lr_means,
            self.lr_rotation,
            self.lr_scales,
            self.lr_opacity,
            self.lr_sh,
            self.lr_latent,
            self.lr_decoder,
            self.lambda_rgb,
            self.lambda_depth,
            self.lambda_normal,
            self.lambda_contrastive,
            self.lambda_distill,
            self.contrastive_pairs,
            self.distill_per_mask,
            self.distill_normalize,
            self.seed,
            self.fine_tune,
            self.prune
        )
    }
}

/// Loss values of one iteration. `total` is the lambda-weighted sum of the
/// terms; `valid_depth_px` counts the sampled view's valid depth pixels.
#[derive(Debug, Clone, PartialEq)]
pub struct LossReport<T> {
    pub iteration: usize,
    pub view: usize,
    pub rgb: T,
    pub depth: T,
    pub normal: T,
    pub contrastive: T,
    pub distill: T,
    pub total: T,
    pub valid_depth_px: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DivergenceReport {
    /// Iteration whose total loss went non-finite.
    pub iteration: usize,
}

#[derive(Debug)]
pub struct TrainResult<T> {
    pub field: GaussianField<T>,
    pub decoder: Decoder<T>,
    pub reports: Vec<LossReport<T>>,
    /// Set when optimization aborted; `field`/`decoder` then hold the last
    /// state whose loss was finite.
    pub diverged: Option<DivergenceReport>,
}

/// Supervision for training: views with, when the feature terms are active,
/// per-view instance maps and per-instance target embeddings.
pub struct TrainInputs<'a, T> {
    pub views: &'a [CameraView<T>],
    pub instances: &'a [InstanceMap],
    pub embeddings: &'a BTreeMap<u32, Vec<T>>,
}

struct Adam<T> {
    m: Vec<T>,
    v: Vec<T>,
}

impl<T: Float> Adam<T> {
    fn new(n: usize) -> Self {
        Self { m: vec![T::zero(); n], v: vec![T::zero(); n] }
    }

    /// Update for one parameter; `bc1`/`bc2` are the bias corrections
    /// `1 - beta^t`.
    #[inline]
    fn delta(&mut self, idx: usize, g: T, lr: T, bc1: T, bc2: T) -> T {
        let b1 = cast::<T>(ADAM_BETA1);
        let b2 = cast::<T>(ADAM_BETA2);
        let m = self.m[idx] * b1 + g * (T::one() - b1);
        let v = self.v[idx] * b2 + g * g * (T::one() - b2);
        self.m[idx] = m;
        self.v[idx] = v;
        let m_hat = m / bc1;
        let v_hat = v / bc2;
        lr * m_hat / (v_hat.sqrt() + cast::<T>(ADAM_EPS))
    }

    /// Drops the moment rows of pruned primitives.
    fn retain(&mut self, keep: &[bool], stride: usize) {
        let mut w = 0;
        for (r, &k) in keep.iter().enumerate() {
            if k {
                for s in 0..stride {
                    self.m[w * stride + s] = self.m[r * stride + s];
                    self.v[w * stride + s] = self.v[r * stride + s];
                }
                w += 1;
            }
        }
        self.m.truncate(w * stride);
        self.v.truncate(w * stride);
    }
}

fn scale_image<T: Float>(mut img: Image<T>, s: T) -> Image<T> {
    for v in img.data_mut().iter_mut() {
        *v *= s;
    }
    img
}

/// Optimizes a field (and decoder) against posed RGB-D supervision.
///
/// Each iteration renders one uniformly sampled view, evaluates the enabled
/// loss terms, backpropagates through the rasterizer, applies one Adam step
/// per attribute group, and projects parameters back onto their valid sets
/// (unit rotations, unit latents, clamped opacities and scales). A
/// non-finite total aborts and returns the last finite state.
pub fn train<T: Float>(
    mut field: GaussianField<T>,
    mut decoder: Decoder<T>,
    inputs: &TrainInputs<'_, T>,
    cfg: &TrainConfig,
) -> Result<TrainResult<T>> {
    cfg.validate()?;
    if inputs.views.is_empty() {
        return Err(Error::DegenerateInput("training needs at least one view".into()));
    }
    let use_feature = cfg.lambda_contrastive > 0.0 || cfg.lambda_distill > 0.0;
    if use_feature && inputs.instances.len() != inputs.views.len() {
        return Err(Error::ShapeMismatch(format!(
            "{} instance maps for {} views",
            inputs.instances.len(),
            inputs.views.len()
        )));
    }
    if cfg.lambda_distill > 0.0 && decoder.d_latent != field.d_latent {
        return Err(Error::ShapeMismatch(format!(
            "decoder expects {}-dim latents, field stores {}",
            decoder.d_latent, field.d_latent
        )));
    }
    let channels = ChannelSet {
        color: cfg.lambda_rgb > 0.0,
        feature: use_feature,
        depth: cfg.lambda_depth > 0.0,
        normal: cfg.lambda_normal > 0.0,
    };

    // Normal supervision comes from the observed depth, fixed per view.
    let normal_targets: Vec<Image<T>> = if cfg.lambda_normal > 0.0 {
        inputs
            .views
            .iter()
            .map(|v| normals_from_depth(&v.depth, &v.intrinsics, &v.pose, v.max_range))
            .collect::<Result<_>>()?
    } else {
        Vec::new()
    };

    let n = field.len();
    let mut ad_means = Adam::new(3 * n);
    let mut ad_rot = Adam::new(4 * n);
    let mut ad_scales = Adam::new(3 * n);
    let mut ad_opacity = Adam::new(n);
    let mut ad_sh = Adam::new(SH_VALUES * n);
    let mut ad_feat = Adam::new(field.d_latent * n);
    let mut ad_decoder = Adam::new(decoder.param_count());

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut reports = Vec::new();
    let mut snapshot: Option<(GaussianField<T>, Decoder<T>)> = None;
    let steps = cfg.steps();

    for it in 0..steps {
        let view_idx = rng.gen_range(0..inputs.views.len());
        let view = &inputs.views[view_idx];
        let cam = RenderCamera::of_view(view);
        let rcfg = RasterConfig { sh_degree: cfg.sh_degree_at(it), ..Default::default() };

        let cache = raster::project(&field, &cam, &rcfg);
        let (out, state) = raster::render_forward(&field, &cam, channels, &cache, &rcfg);

        let mut grads = ChannelGrads::default();
        let mut decoder_grads: Option<DecoderGrads<T>> = None;
        let mut term_rgb = T::zero();
        let mut term_depth = T::zero();
        let mut term_normal = T::zero();
        let mut term_contrastive = T::zero();
        let mut term_distill = T::zero();

        if cfg.lambda_rgb > 0.0 {
            let (v, g) = loss::photometric_loss(out.color.as_ref().unwrap(), &view.rgb)?;
            term_rgb = v;
            grads.color = Some(scale_image(g, cast::<T>(cfg.lambda_rgb)));
        }
        if cfg.lambda_depth > 0.0 {
            let (v, g) =
                loss::depth_loss(out.depth.as_ref().unwrap(), &view.depth, view.max_range)?;
            term_depth = v;
            grads.depth = Some(scale_image(g, cast::<T>(cfg.lambda_depth)));
        }
        if cfg.lambda_normal > 0.0 {
            let (v, g) =
                loss::normal_loss(out.normal.as_ref().unwrap(), &normal_targets[view_idx])?;
            term_normal = v;
            grads.normal = Some(scale_image(g, cast::<T>(cfg.lambda_normal)));
        }
        if use_feature {
            let samples = efd::sample_supervision(
                &inputs.instances[view_idx],
                inputs.embeddings,
                cfg.contrastive_pairs,
                cfg.distill_per_mask,
                &mut rng,
            )?;
            let feat = out.feature.as_ref().unwrap();
            let mut feat_grad = Image::zeros(feat.height(), feat.width(), feat.channels());
            if cfg.lambda_contrastive > 0.0 {
                let (v, g) = efd::contrastive_loss(feat, &samples.pairs)?;
                term_contrastive = v;
                let l = cast::<T>(cfg.lambda_contrastive);
                for (acc, gv) in feat_grad.data_mut().iter_mut().zip(g.data()) {
                    *acc += l * *gv;
                }
            }
            if cfg.lambda_distill > 0.0 {
                let (v, g, mut dg) = efd::distill_loss(
                    feat,
                    &decoder,
                    &samples.distill,
                    inputs.embeddings,
                    cfg.distill_normalize,
                )?;
                term_distill = v;
                let l = cast::<T>(cfg.lambda_distill);
                for (acc, gv) in feat_grad.data_mut().iter_mut().zip(g.data()) {
                    *acc += l * *gv;
                }
                for set in [&mut dg.w1, &mut dg.b1, &mut dg.w2, &mut dg.b2] {
                    for gv in set.iter_mut() {
                        *gv *= l;
                    }
                }
                decoder_grads = Some(dg);
            }
            grads.feature = Some(feat_grad);
        }

        let total = cast::<T>(cfg.lambda_rgb) * term_rgb
            + cast::<T>(cfg.lambda_depth) * term_depth
            + cast::<T>(cfg.lambda_normal) * term_normal
            + cast::<T>(cfg.lambda_contrastive) * term_contrastive
            + cast::<T>(cfg.lambda_distill) * term_distill;

        if !total.is_finite() {
            let (field, decoder) = snapshot.unwrap_or((field, decoder));
            return Ok(TrainResult {
                field,
                decoder,
                reports,
                diverged: Some(DivergenceReport { iteration: it }),
            });
        }
        snapshot = Some((field.clone(), decoder.clone()));

        let valid_depth_px = (0..view.height() * view.width())
            .filter(|&p| view.depth_valid(p / view.width(), p % view.width()))
            .count();
        reports.push(LossReport {
            iteration: it,
            view: view_idx,
            rgb: term_rgb,
            depth: term_depth,
            normal: term_normal,
            contrastive: term_contrastive,
            distill: term_distill,
            total,
            valid_depth_px,
        });

        let fg = raster::render_backward(&field, &cam, &cache, &state, &grads, &rcfg)?;

        let t = it + 1;
        let bc1 = T::one() - cast::<T>(ADAM_BETA1.powi(t as i32));
        let bc2 = T::one() - cast::<T>(ADAM_BETA2.powi(t as i32));
        let lr_means = cast::<T>(cfg.lr_means_at(it));
        let lr_rot = cast::<T>(cfg.lr_rotation);
        let lr_scales = cast::<T>(cfg.lr_scales);
        let lr_op = cast::<T>(cfg.lr_opacity);
        let lr_sh = cast::<T>(cfg.lr_sh);
        let lr_feat = cast::<T>(cfg.lr_latent);

        let op_min = cast::<T>(OPACITY_MIN);
        let op_max = T::one() - op_min;
        let s_min = cast::<T>(SCALE_MIN);
        let tiny = cast::<T>(1e-12);

        for i in 0..field.len() {
            let mut touched = false;
            for k in 0..3 {
                let d = ad_means.delta(3 * i + k, fg.means[i][k], lr_means, bc1, bc2);
                field.means[i][k] -= d;
            }
            let q = &mut field.rotations[i];
            let gq = fg.rotations[i];
            let dq = [
                ad_rot.delta(4 * i, gq[0], lr_rot, bc1, bc2),
                ad_rot.delta(4 * i + 1, gq[1], lr_rot, bc1, bc2),
                ad_rot.delta(4 * i + 2, gq[2], lr_rot, bc1, bc2),
                ad_rot.delta(4 * i + 3, gq[3], lr_rot, bc1, bc2),
            ];
            if dq.iter().any(|d| *d != T::zero()) {
                q.w -= dq[0];
                q.x -= dq[1];
                q.y -= dq[2];
                q.z -= dq[3];
                // Projection back to the unit sphere only when moved, so
                // untouched primitives stay bit-identical.
                if q.norm() > tiny {
                    *q = q.normalized();
                } else {
                    *q = crate::math::Quat::identity();
                }
                touched = true;
            }
            for k in 0..3 {
                let d = ad_scales.delta(3 * i + k, fg.scales[i][k], lr_scales, bc1, bc2);
                if d != T::zero() {
                    field.scales[i][k] = (field.scales[i][k] - d).max(s_min);
                }
            }
            let dop = ad_opacity.delta(i, fg.opacities[i], lr_op, bc1, bc2);
            if dop != T::zero() {
                field.opacities[i] = (field.opacities[i] - dop).clamp(op_min, op_max);
            }
            for k in 0..SH_VALUES {
                let idx = SH_VALUES * i + k;
                field.sh[idx] -= ad_sh.delta(idx, fg.sh[idx], lr_sh, bc1, bc2);
            }
            let d_lat = field.d_latent;
            let mut moved = false;
            for k in 0..d_lat {
                let idx = d_lat * i + k;
                let d = ad_feat.delta(idx, fg.features[idx], lr_feat, bc1, bc2);
                if d != T::zero() {
                    field.features[idx] -= d;
                    moved = true;
                }
            }
            if moved {
                let row = &mut field.features[d_lat * i..d_lat * (i + 1)];
                let norm: T = row.iter().map(|v| *v * *v).sum::<T>().sqrt();
                if norm > tiny {
                    for v in row.iter_mut() {
                        *v /= norm;
                    }
                } else {
                    row[0] = T::one();
                    for v in row[1..].iter_mut() {
                        *v = T::zero();
                    }
                }
            }
            let _ = touched;
        }

        if let Some(dg) = decoder_grads {
            let lr = cast::<T>(cfg.lr_decoder);
            let mut off = 0;
            for (params, gs) in [
                (&mut decoder.w1, &dg.w1),
                (&mut decoder.b1, &dg.b1),
                (&mut decoder.w2, &dg.w2),
                (&mut decoder.b2, &dg.b2),
            ] {
                for (p, g) in params.iter_mut().zip(gs) {
                    *p -= ad_decoder.delta(off, *g, lr, bc1, bc2);
                    off += 1;
                }
            }
        }

        if cfg.prune && t % PRUNE_INTERVAL == 0 && t < steps {
            let keep: Vec<bool> = field
                .opacities
                .iter()
                .map(|o| o.to_f64_cfg() >= PRUNE_OPACITY_THRESHOLD)
                .collect();
            if keep.iter().any(|k| !k) && keep.iter().any(|k| *k) {
                field.retain(&keep);
                ad_means.retain(&keep, 3);
                ad_rot.retain(&keep, 4);
                ad_scales.retain(&keep, 3);
                ad_opacity.retain(&keep, 1);
                ad_sh.retain(&keep, SH_VALUES);
                ad_feat.retain(&keep, field.d_latent);
            }
        }
    }

    Ok(TrainResult { field, decoder, reports, diverged: None })
}
