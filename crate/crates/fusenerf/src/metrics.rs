//! Image quality metrics: PSNR and SSIM.

use crate::error::{Error, Result};
use crate::img::FloatImage;

/// Reported instead of infinity when the mean squared error is zero.
pub const PSNR_REPORT_CAP_DB: f64 = 99.0;

/// Peak signal-to-noise ratio in decibels: `10 log10(max^2 / MSE)`. Returns
/// `f64::INFINITY` on identical images; reports cap that to
/// [`PSNR_REPORT_CAP_DB`].
pub fn psnr(a: &FloatImage, b: &FloatImage, max_value: f64) -> Result<f64> {
    if !a.same_shape(b) {
        return Err(Error::Contract(format!(
            "psnr: image shapes differ ({}x{}x{} vs {}x{}x{})",
            a.width, a.height, a.channels, b.width, b.height, b.channels
        )));
    }
    if max_value <= 0.0 {
        return Err(Error::Contract("psnr: max_value must be positive".into()));
    }
    let mse = a
        .data
        .iter()
        .zip(&b.data)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        / a.data.len() as f64;
    if mse == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(10.0 * (max_value * max_value / mse).log10())
}

/// Cap an infinite PSNR for tabular reports.
pub fn psnr_for_report(db: f64) -> f64 {
    if db.is_finite() {
        db
    } else {
        PSNR_REPORT_CAP_DB
    }
}

const SSIM_WINDOW: usize = 11;
const SSIM_SIGMA: f64 = 1.5;
const SSIM_K1: f64 = 0.01;
const SSIM_K2: f64 = 0.03;

/// Mean local structural similarity over an 11x11 Gaussian window
/// (sigma 1.5), constants `C1 = (0.01 L)^2`, `C2 = (0.03 L)^2` for dynamic
/// range `L`. Multi-channel images average the per-channel scores.
pub fn ssim(a: &FloatImage, b: &FloatImage, dynamic_range: f64) -> Result<f64> {
    if !a.same_shape(b) {
        return Err(Error::Contract("ssim: image shapes differ".into()));
    }
    if a.width < SSIM_WINDOW || a.height < SSIM_WINDOW {
        return Err(Error::Contract(format!(
            "ssim: image {}x{} smaller than the {SSIM_WINDOW}x{SSIM_WINDOW} window",
            a.width, a.height
        )));
    }
    let kernel = gaussian_kernel();
    let c1 = (SSIM_K1 * dynamic_range).powi(2);
    let c2 = (SSIM_K2 * dynamic_range).powi(2);

    let mut total = 0.0;
    let mut count = 0usize;
    for ch in 0..a.channels {
        let plane_a = channel_plane(a, ch);
        let plane_b = channel_plane(b, ch);
        let out_w = a.width - SSIM_WINDOW + 1;
        let out_h = a.height - SSIM_WINDOW + 1;
        for oy in 0..out_h {
            for ox in 0..out_w {
                let mut mu_x = 0.0;
                let mut mu_y = 0.0;
                let mut xx = 0.0;
                let mut yy = 0.0;
                let mut xy = 0.0;
                for ky in 0..SSIM_WINDOW {
                    for kx in 0..SSIM_WINDOW {
                        let w = kernel[ky * SSIM_WINDOW + kx];
                        let x = plane_a[(oy + ky) * a.width + ox + kx];
                        let y = plane_b[(oy + ky) * a.width + ox + kx];
                        mu_x += w * x;
                        mu_y += w * y;
                        xx += w * x * x;
                        yy += w * y * y;
                        xy += w * x * y;
                    }
                }
                let var_x = xx - mu_x * mu_x;
                let var_y = yy - mu_y * mu_y;
                let cov = xy - mu_x * mu_y;
                let s = ((2.0 * mu_x * mu_y + c1) * (2.0 * cov + c2))
                    / ((mu_x * mu_x + mu_y * mu_y + c1) * (var_x + var_y + c2));
                total += s;
                count += 1;
            }
        }
    }
    Ok(total / count as f64)
}

fn channel_plane(img: &FloatImage, ch: usize) -> Vec<f64> {
    img.data.iter().skip(ch).step_by(img.channels).copied().collect()
}

fn gaussian_kernel() -> Vec<f64> {
    let half = (SSIM_WINDOW / 2) as f64;
    let mut k = vec![0.0; SSIM_WINDOW * SSIM_WINDOW];
    let mut sum = 0.0;
    for y in 0..SSIM_WINDOW {
        for x in 0..SSIM_WINDOW {
            let dx = x as f64 - half;
            let dy = y as f64 - half;
            let v = (-(dx * dx + dy * dy) / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
            k[y * SSIM_WINDOW + x] = v;
            sum += v;
        }
    }
    for v in &mut k {
        *v /= sum;
    }
    k
}

#[cfg(test)]
mod tests {
    use super::*;

    fn image_with(w: usize, h: usize, f: impl Fn(usize, usize) -> f64) -> FloatImage {
        let mut img = FloatImage::new(w, h, 1);
        for y in 0..h {
            for x in 0..w {
                img.data[y * w + x] = f(x, y);
            }
        }
        img
    }

    #[test]
    fn identical_images_hit_the_cap() {
        let img = image_with(16, 16, |x, y| ((x * 7 + y) % 11) as f64 / 10.0);
        let db = psnr(&img, &img, 1.0).unwrap();
        assert!(db.is_infinite());
        assert_eq!(psnr_for_report(db), 99.0);
    }

    #[test]
    fn psnr_formula_exact_values() {
        // MSE 0.01 over range [0, 1] -> 20 dB; MSE 0.0001 -> 40 dB
        let a = image_with(10, 10, |_, _| 0.0);
        let b = image_with(10, 10, |_, _| 0.1);
        assert!((psnr(&a, &b, 1.0).unwrap() - 20.0).abs() < 1e-12);
        let c = image_with(10, 10, |_, _| 0.01);
        assert!((psnr(&a, &c, 1.0).unwrap() - 40.0).abs() < 1e-12);
    }

    #[test]
    fn psnr_shape_mismatch_rejected() {
        let a = image_with(4, 4, |_, _| 0.0);
        let b = image_with(5, 4, |_, _| 0.0);
        assert!(psnr(&a, &b, 1.0).is_err());
    }

    #[test]
    fn ssim_self_similarity_is_one() {
        let img = image_with(20, 15, |x, y| ((x as f64).sin() + (y as f64).cos()) / 4.0 + 0.5);
        let s = ssim(&img, &img, 1.0).unwrap();
        assert!((s - 1.0).abs() < 1e-12);
    }

    #[test]
    fn ssim_constant_images_closed_form() {
        // mu_x = 0, mu_y = 1, zero variance: SSIM = C1 / (1 + C1)
        let a = image_with(11, 11, |_, _| 0.0);
        let b = image_with(11, 11, |_, _| 1.0);
        let c1 = 0.01f64.powi(2);
        let expect = c1 / (1.0 + c1);
        let s = ssim(&a, &b, 1.0).unwrap();
        assert!((s - expect).abs() < 1e-9, "{s} vs {expect}");
        assert!((expect - 9.999e-5).abs() < 1e-8);
    }

    #[test]
    fn ssim_is_symmetric() {
        let a = image_with(14, 13, |x, y| ((x * 3 + y * 5) % 17) as f64 / 16.0);
        let b = image_with(14, 13, |x, y| ((x + y * 2) % 13) as f64 / 12.0);
        let left = ssim(&a, &b, 1.0).unwrap();
        let right = ssim(&b, &a, 1.0).unwrap();
        assert_eq!(left.to_bits(), right.to_bits());
    }

    #[test]
    fn ssim_small_image_rejected() {
        let a = image_with(10, 11, |_, _| 0.5);
        assert!(ssim(&a, &a, 1.0).is_err());
    }
}
