//! Supervision terms on rendered images, each returning its value together
//! with the gradient image w.r.t. the rendered input.

use crate::error::{Error, Result};
use crate::float::{cast, Float};
use crate::image::Image;
use crate::ssim;

pub const PHOTOMETRIC_L1_WEIGHT: f64 = 0.8;
pub const PHOTOMETRIC_SSIM_WEIGHT: f64 = 0.2;

/// `0.8 * L1 + 0.2 * (1 - SSIM)` between a rendered and an observed color
/// image, averaged over all pixels and channels. Always non-negative.
pub fn photometric_loss<T: Float>(
    rendered: &Image<T>,
    observed: &Image<T>,
) -> Result<(T, Image<T>)> {
    if !rendered.same_shape(observed) {
        return Err(Error::ShapeMismatch(format!(
            "photometric operands are {}x{}x{} vs {}x{}x{}",
            rendered.height(),
            rendered.width(),
            rendered.channels(),
            observed.height(),
            observed.width(),
            observed.channels()
        )));
    }
    let n = rendered.data().len();
    let inv_n = T::one() / cast::<T>(n as f64);
    let wl1 = cast::<T>(PHOTOMETRIC_L1_WEIGHT);
    let wss = cast::<T>(PHOTOMETRIC_SSIM_WEIGHT);

    let mut l1 = T::zero();
    let mut grad = Image::zeros(rendered.height(), rendered.width(), rendered.channels());
    {
        let gd = grad.data_mut();
        for (q, (r, o)) in rendered.data().iter().zip(observed.data()).enumerate() {
            let d = *r - *o;
            l1 += d.abs();
            let sign = if d > T::zero() {
                T::one()
            } else if d < T::zero() {
                -T::one()
            } else {
                T::zero()
            };
            gd[q] = wl1 * sign * inv_n;
        }
    }
    l1 *= inv_n;

    let s = ssim::ssim_mean(rendered, observed)?;
    let ds = ssim::ssim_backward(rendered, observed, -wss)?;
    for (g, d) in grad.data_mut().iter_mut().zip(ds.data()) {
        *g += *d;
    }
    Ok((wl1 * l1 + wss * (T::one() - s), grad))
}

/// Mean absolute depth error over pixels whose observed depth is valid
/// (positive and below `max_range`). Errors with [`Error::NoValidPixels`]
/// when no pixel qualifies.
pub fn depth_loss<T: Float>(
    rendered: &Image<T>,
    observed: &Image<T>,
    max_range: T,
) -> Result<(T, Image<T>)> {
    if !rendered.same_shape(observed) || rendered.channels() != 1 {
        return Err(Error::ShapeMismatch("depth operands must be matching 1-channel".into()));
    }
    let mut m = 0usize;
    for &d in observed.data() {
        if d > T::zero() && d < max_range {
            m += 1;
        }
    }
    if m == 0 {
        return Err(Error::NoValidPixels);
    }
    let inv_m = T::one() / cast::<T>(m as f64);
    let mut total = T::zero();
    let mut grad = Image::zeros(rendered.height(), rendered.width(), 1);
    let gd = grad.data_mut();
    for (q, (r, o)) in rendered.data().iter().zip(observed.data()).enumerate() {
        if *o > T::zero() && *o < max_range {
            let d = *r - *o;
            total += d.abs();
            gd[q] = if d > T::zero() {
                inv_m
            } else if d < T::zero() {
                -inv_m
            } else {
                T::zero()
            };
        }
    }
    Ok((total * inv_m, grad))
}

/// Per-pixel `||n_hat - n||^2 + (1 - n_hat . n)` against unit target
/// normals, averaged over valid targets (non-zero vectors). Rendered
/// normals are alpha-weighted sums of unit vectors, so their norm is <= 1
/// and every per-pixel term is non-negative.
pub fn normal_loss<T: Float>(
    rendered: &Image<T>,
    target: &Image<T>,
) -> Result<(T, Image<T>)> {
    if !rendered.same_shape(target) || rendered.channels() != 3 {
        return Err(Error::ShapeMismatch("normal operands must be matching 3-channel".into()));
    }
    let (h, w) = (rendered.height(), rendered.width());
    let mut m = 0usize;
    for row in 0..h {
        for col in 0..w {
            let t = target.px(row, col);
            if t.iter().any(|v| *v != T::zero()) {
                m += 1;
            }
        }
    }
    if m == 0 {
        return Err(Error::NoValidPixels);
    }
    let inv_m = T::one() / cast::<T>(m as f64);
    let two = cast::<T>(2.0);
    let mut total = T::zero();
    let mut grad = Image::zeros(h, w, 3);
    for row in 0..h {
        for col in 0..w {
            let t = target.px(row, col);
            if t.iter().all(|v| *v == T::zero()) {
                continue;
            }
            let r = rendered.px(row, col);
            let mut dot = T::zero();
            let mut dist2 = T::zero();
            for ch in 0..3 {
                let d = r[ch] - t[ch];
                dist2 += d * d;
                dot += r[ch] * t[ch];
            }
            total += dist2 + T::one() - dot;
            let g = grad.px_mut(row, col);
            for ch in 0..3 {
                g[ch] = (two * (r[ch] - t[ch]) - t[ch]) * inv_m;
            }
        }
    }
    Ok((total * inv_m, grad))
}
