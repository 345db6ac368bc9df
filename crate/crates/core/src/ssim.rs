//! Structural similarity (SSIM) with an analytic backward pass.
//!
//! Windowed statistics use an 11x11 Gaussian (sigma 1.5) and symmetric
//! boundary reflection (index -1 maps back to 0). Stabilizers C1 = 0.01^2,
//! C2 = 0.03^2 assume images in [0, 1].

use crate::error::{Error, Result};
use crate::float::{cast, Float};
use crate::image::Image;

pub const WINDOW_RADIUS: usize = 5;
pub const WINDOW_SIGMA: f64 = 1.5;
pub const C1: f64 = 0.01 * 0.01;
pub const C2: f64 = 0.03 * 0.03;

/// Normalized 1D Gaussian window taps.
fn window_1d<T: Float>() -> [T; 2 * WINDOW_RADIUS + 1] {
    let mut w = [0.0f64; 2 * WINDOW_RADIUS + 1];
    let mut sum = 0.0;
    for (i, v) in w.iter_mut().enumerate() {
        let d = i as f64 - WINDOW_RADIUS as f64;
        *v = (-d * d / (2.0 * WINDOW_SIGMA * WINDOW_SIGMA)).exp();
        sum += *v;
    }
    let mut out = [T::zero(); 2 * WINDOW_RADIUS + 1];
    for i in 0..w.len() {
        out[i] = cast::<T>(w[i] / sum);
    }
    out
}

/// Symmetric reflection: -1 -> 0, n -> n-1. Repeats until in range, so it
/// also handles images smaller than the window.
#[inline]
fn reflect(mut p: isize, n: usize) -> usize {
    let n = n as isize;
    loop {
        if p < 0 {
            p = -p - 1;
        } else if p >= n {
            p = 2 * n - p - 1;
        } else {
            return p as usize;
        }
    }
}

/// Per-pixel window statistics of two images.
struct Stats<T> {
    mu_x: Vec<T>,
    mu_y: Vec<T>,
    var_x: Vec<T>,
    var_y: Vec<T>,
    cov_xy: Vec<T>,
}

fn window_stats<T: Float>(x: &Image<T>, y: &Image<T>) -> Stats<T> {
    let (h, w, c) = (x.height(), x.width(), x.channels());
    let g = window_1d::<T>();
    let n = h * w * c;
    let mut st = Stats {
        mu_x: vec![T::zero(); n],
        mu_y: vec![T::zero(); n],
        var_x: vec![T::zero(); n],
        var_y: vec![T::zero(); n],
        cov_xy: vec![T::zero(); n],
    };
    let xd = x.data();
    let yd = y.data();
    for row in 0..h {
        for col in 0..w {
            for ch in 0..c {
                let o = (row * w + col) * c + ch;
                let mut mx = T::zero();
                let mut my = T::zero();
                let mut sxx = T::zero();
                let mut syy = T::zero();
                let mut sxy = T::zero();
                for (di, gi) in g.iter().enumerate() {
                    let rr = reflect(row as isize + di as isize - WINDOW_RADIUS as isize, h);
                    for (dj, gj) in g.iter().enumerate() {
                        let cc =
                            reflect(col as isize + dj as isize - WINDOW_RADIUS as isize, w);
                        let wt = *gi * *gj;
                        let xv = xd[(rr * w + cc) * c + ch];
                        let yv = yd[(rr * w + cc) * c + ch];
                        mx += wt * xv;
                        my += wt * yv;
                        sxx += wt * xv * xv;
                        syy += wt * yv * yv;
                        sxy += wt * xv * yv;
                    }
                }
                st.mu_x[o] = mx;
                st.mu_y[o] = my;
                st.var_x[o] = sxx - mx * mx;
                st.var_y[o] = syy - my * my;
                st.cov_xy[o] = sxy - mx * my;
            }
        }
    }
    st
}

fn check_pair<T: Float>(x: &Image<T>, y: &Image<T>) -> Result<()> {
    if !x.same_shape(y) {
        return Err(Error::ShapeMismatch(format!(
            "ssim operands are {}x{}x{} vs {}x{}x{}",
            x.height(),
            x.width(),
            x.channels(),
            y.height(),
            y.width(),
            y.channels()
        )));
    }
    Ok(())
}

/// Mean SSIM over all pixels and channels.
pub fn ssim_mean<T: Float>(x: &Image<T>, y: &Image<T>) -> Result<T> {
    check_pair(x, y)?;
    let st = window_stats(x, y);
    let c1 = cast::<T>(C1);
    let c2 = cast::<T>(C2);
    let two = cast::<T>(2.0);
    let n = st.mu_x.len();
    let mut total = T::zero();
    for o in 0..n {
        let n1 = two * st.mu_x[o] * st.mu_y[o] + c1;
        let n2 = two * st.cov_xy[o] + c2;
        let d1 = st.mu_x[o] * st.mu_x[o] + st.mu_y[o] * st.mu_y[o] + c1;
        let d2 = st.var_x[o] + st.var_y[o] + c2;
        total += (n1 * n2) / (d1 * d2);
    }
    Ok(total / cast::<T>(n as f64))
}

/// Gradient of `upstream * ssim_mean(x, y)` with respect to `x`.
pub fn ssim_backward<T: Float>(x: &Image<T>, y: &Image<T>, upstream: T) -> Result<Image<T>> {
    check_pair(x, y)?;
    let (h, w, c) = (x.height(), x.width(), x.channels());
    let st = window_stats(x, y);
    let g = window_1d::<T>();
    let c1 = cast::<T>(C1);
    let c2 = cast::<T>(C2);
    let two = cast::<T>(2.0);
    let n = st.mu_x.len();
    let scale = upstream / cast::<T>(n as f64);

    // Partials of the per-center SSIM value w.r.t. its window statistics.
    let mut d_mu = vec![T::zero(); n];
    let mut d_var = vec![T::zero(); n];
    let mut d_cov = vec![T::zero(); n];
    for o in 0..n {
        let mx = st.mu_x[o];
        let my = st.mu_y[o];
        let n1 = two * mx * my + c1;
        let n2 = two * st.cov_xy[o] + c2;
        let d1 = mx * mx + my * my + c1;
        let d2 = st.var_x[o] + st.var_y[o] + c2;
        let dd = d1 * d2;
        d_mu[o] = scale * (two * my * n2 / dd - two * mx * n1 * n2 / (d1 * dd));
        d_var[o] = scale * (-(n1 * n2) / (dd * d2));
        d_cov[o] = scale * (two * n1 / dd);
    }

    // Scatter through the same reflected taps the forward pass used.
    let xd = x.data();
    let yd = y.data();
    let mut grad = Image::zeros(h, w, c);
    let gd = grad.data_mut();
    for row in 0..h {
        for col in 0..w {
            for ch in 0..c {
                let o = (row * w + col) * c + ch;
                for (di, gi) in g.iter().enumerate() {
                    let rr = reflect(row as isize + di as isize - WINDOW_RADIUS as isize, h);
                    for (dj, gj) in g.iter().enumerate() {
                        let cc =
                            reflect(col as isize + dj as isize - WINDOW_RADIUS as isize, w);
                        let wt = *gi * *gj;
                        let q = (rr * w + cc) * c + ch;
                        gd[q] += wt
                            * (d_mu[o]
                                + d_var[o] * two * (xd[q] - st.mu_x[o])
                                + d_cov[o] * (yd[q] - st.mu_y[o]));
                    }
                }
            }
        }
    }
    Ok(grad)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_image(h: usize, w: usize, c: usize, seed: u64) -> Image<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Image::from_vec(h, w, c, (0..h * w * c).map(|_| rng.gen_range(0.0..1.0)).collect())
    }

    #[test]
    fn identical_images_have_ssim_one() {
        let x = random_image(16, 13, 3, 4);
        let s = ssim_mean(&x, &x).unwrap();
        assert!((s - 1.0).abs() < 1e-12, "ssim(x, x) = {s}");
    }

    #[test]
    fn constant_images_match_the_closed_form() {
        let c1v = 0.3;
        let c2v = 0.7;
        let x = Image::from_vec(12, 12, 1, vec![c1v; 144]);
        let y = Image::from_vec(12, 12, 1, vec![c2v; 144]);
        let want = (2.0 * c1v * c2v + C1) / (c1v * c1v + c2v * c2v + C1);
        let s = ssim_mean(&x, &y).unwrap();
        assert!((s - want).abs() < 1e-12, "{s} vs {want}");
    }

    #[test]
    fn ssim_is_symmetric_and_bounded() {
        for seed in 0..5 {
            let x = random_image(14, 10, 3, seed);
            let y = random_image(14, 10, 3, seed + 100);
            let a = ssim_mean(&x, &y).unwrap();
            let b = ssim_mean(&y, &x).unwrap();
            assert!((a - b).abs() < 1e-12);
            assert!((-1.0..=1.0).contains(&a));
        }
    }

    #[test]
    fn backward_matches_finite_differences() {
        let x = random_image(9, 8, 3, 1);
        let y = random_image(9, 8, 3, 2);
        let grad = ssim_backward(&x, &y, 1.0).unwrap();
        let h = 1e-6;
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..40 {
            let q = rng.gen_range(0..x.data().len());
            let mut xp = x.clone();
            xp.data_mut()[q] += h;
            let mut xm = x.clone();
            xm.data_mut()[q] -= h;
            let fd = (ssim_mean(&xp, &y).unwrap() - ssim_mean(&xm, &y).unwrap()) / (2.0 * h);
            let a = grad.data()[q];
            let err = (fd - a).abs() / fd.abs().max(a.abs()).max(1e-8);
            assert!(err < 1e-4, "pixel {q}: fd {fd} vs analytic {a} (rel {err})");
        }
    }

    #[test]
    fn mismatched_shapes_are_rejected() {
        let x = random_image(8, 8, 3, 1);
        let y = random_image(8, 9, 3, 2);
        assert!(matches!(ssim_mean(&x, &y), Err(crate::error::Error::ShapeMismatch(_))));
        assert!(matches!(ssim_backward(&x, &y, 1.0), Err(crate::error::Error::ShapeMismatch(_))));
    }
}
