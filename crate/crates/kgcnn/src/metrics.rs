//! Full-reference image quality metrics: PSNR, SSIM, UIQI, GMSD.
//!
//! PSNR is computed over all RGB channels; SSIM, UIQI and GMSD operate on
//! BT.601 luminance. The evaluation protocol measures after a PNG
//! quantization round trip, so scores reflect exactly what was saved.

use std::path::Path;

use crate::error::{Error, Result};
use crate::imgcore::{load_png, ImageTensor};

/// Sentinel PSNR for identical images: finite and sortable.
pub const PSNR_IDENTICAL: f64 = 99.0;

/// GMS constant for intensities in [0, 1].
const GMSD_C: f64 = 0.0026;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MetricReport {
    pub psnr: f64,
    pub ssim: f64,
    pub uiqi: f64,
    pub gmsd: f64,
}

fn check_same_shape(x: &ImageTensor, y: &ImageTensor) -> Result<()> {
    if (x.height, x.width, x.channels) != (y.height, y.width, y.channels) {
        return Err(Error::shape("metric operands differ in shape".to_string()));
    }
    Ok(())
}

/// `10 log10(1 / MSE)` over all channels; identical images return 99.0 dB.
pub fn psnr(x: &ImageTensor, y: &ImageTensor) -> Result<f64> {
    check_same_shape(x, y)?;
    let mse: f64 = x
        .data
        .iter()
        .zip(y.data.iter())
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>()
        / x.data.len() as f64;
    if mse == 0.0 {
        return Ok(PSNR_IDENTICAL);
    }
    Ok(10.0 * (1.0 / mse).log10())
}

fn gaussian_window(size: usize, sigma: f64) -> Vec<f64> {
    let c = (size / 2) as f64;
    let mut w = vec![0.0; size * size];
    let mut sum = 0.0;
    for i in 0..size {
        for j in 0..size {
            let dy = i as f64 - c;
            let dx = j as f64 - c;
            let v = (-(dx * dx + dy * dy) / (2.0 * sigma * sigma)).exp();
            w[i * size + j] = v;
            sum += v;
        }
    }
    for v in &mut w {
        *v /= sum;
    }
    w
}

/// Mean local SSIM over luminance: 11x11 Gaussian window with sigma 1.5,
/// K1 = 0.01, K2 = 0.03, dynamic range 1.
pub fn ssim(x: &ImageTensor, y: &ImageTensor) -> Result<f64> {
    check_same_shape(x, y)?;
    const WIN: usize = 11;
    if x.height < WIN || x.width < WIN {
        return Err(Error::shape(format!("SSIM needs at least {WIN}x{WIN} images")));
    }
    let lx = x.luminance();
    let ly = y.luminance();
    let w = gaussian_window(WIN, 1.5);
    let c1 = (0.01f64).powi(2);
    let c2 = (0.03f64).powi(2);
    let (h, wid) = (x.height, x.width);
    let mut total = 0.0;
    let mut count = 0usize;
    for oy in 0..=h - WIN {
        for ox in 0..=wid - WIN {
            let mut mx = 0.0;
            let mut my = 0.0;
            let mut sxx = 0.0;
            let mut syy = 0.0;
            let mut sxy = 0.0;
            for i in 0..WIN {
                for j in 0..WIN {
                    let wv = w[i * WIN + j];
                    let a = lx.data[(oy + i) * wid + ox + j];
                    let b = ly.data[(oy + i) * wid + ox + j];
                    mx += wv * a;
                    my += wv * b;
                    sxx += wv * a * a;
                    syy += wv * b * b;
                    sxy += wv * a * b;
                }
            }
            let vx = sxx - mx * mx;
            let vy = syy - my * my;
            let cov = sxy - mx * my;
            let s = ((2.0 * mx * my + c1) * (2.0 * cov + c2))
                / ((mx * mx + my * my + c1) * (vx + vy + c2));
            total += s;
            count += 1;
        }
    }
    Ok(total / count as f64)
}

/// Universal image quality index over luminance: sliding 8x8 windows,
/// unbiased variances, with the limit conventions for degenerate windows.
pub fn uiqi(x: &ImageTensor, y: &ImageTensor) -> Result<f64> {
    check_same_shape(x, y)?;
    const WIN: usize = 8;
    if x.height < WIN || x.width < WIN {
        return Err(Error::shape(format!("UIQI needs at least {WIN}x{WIN} images")));
    }
    let lx = x.luminance();
    let ly = y.luminance();
    let (h, wid) = (x.height, x.width);
    let n = (WIN * WIN) as f64;
    let mut total = 0.0;
    let mut count = 0usize;
    for oy in 0..=h - WIN {
        for ox in 0..=wid - WIN {
            let mut sx = 0.0;
            let mut sy = 0.0;
            let mut sxx = 0.0;
            let mut syy = 0.0;
            let mut sxy = 0.0;
            for i in 0..WIN {
                for j in 0..WIN {
                    let a = lx.data[(oy + i) * wid + ox + j];
                    let b = ly.data[(oy + i) * wid + ox + j];
                    sx += a;
                    sy += b;
                    sxx += a * a;
                    syy += b * b;
                    sxy += a * b;
                }
            }
            let mx = sx / n;
            let my = sy / n;
            let vx = (sxx - n * mx * mx) / (n - 1.0);
            let vy = (syy - n * my * my) / (n - 1.0);
            let cov = (sxy - n * mx * my) / (n - 1.0);
            let var_term = vx + vy;
            let mean_term = mx * mx + my * my;
            let q = if var_term < 1e-12 && mean_term < 1e-12 {
                // Both factors vanish: identical flat windows score 1.
                1.0
            } else if var_term < 1e-12 || mean_term < 1e-12 {
                0.0
            } else {
                4.0 * cov * mx * my / (var_term * mean_term)
            };
            total += q;
            count += 1;
        }
    }
    Ok(total / count as f64)
}

/// Prewitt gradient magnitude on a luminance plane, zero-padded.
fn prewitt_magnitude(l: &ImageTensor) -> Vec<f64> {
    let (h, w) = (l.height, l.width);
    let at = |i: isize, j: isize| -> f64 {
        if i < 0 || j < 0 || i >= h as isize || j >= w as isize {
            0.0
        } else {
            l.data[i as usize * w + j as usize]
        }
    };
    let mut mag = vec![0.0; h * w];
    for i in 0..h as isize {
        for j in 0..w as isize {
            let gx = (at(i - 1, j + 1) + at(i, j + 1) + at(i + 1, j + 1)
                - at(i - 1, j - 1)
                - at(i, j - 1)
                - at(i + 1, j - 1))
                / 3.0;
            let gy = (at(i + 1, j - 1) + at(i + 1, j) + at(i + 1, j + 1)
                - at(i - 1, j - 1)
                - at(i - 1, j)
                - at(i - 1, j + 1))
                / 3.0;
            mag[(i as usize) * w + j as usize] = (gx * gx + gy * gy).sqrt();
        }
    }
    mag
}

/// Gradient magnitude similarity deviation; 0 for identical inputs,
/// smaller is better.
pub fn gmsd(x: &ImageTensor, y: &ImageTensor) -> Result<f64> {
    check_same_shape(x, y)?;
    let gx = prewitt_magnitude(&x.luminance());
    let gy = prewitt_magnitude(&y.luminance());
    let n = gx.len() as f64;
    let mut gms = Vec::with_capacity(gx.len());
    for (a, b) in gx.iter().zip(gy.iter()) {
        gms.push((2.0 * a * b + GMSD_C) / (a * a + b * b + GMSD_C));
    }
    let mean = gms.iter().sum::<f64>() / n;
    let var = gms.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    Ok(var.sqrt())
}

/// Compute all four metrics on two saved PNGs, i.e. after quantization.
pub fn evaluate_protocol(derained: &Path, reference: &Path) -> Result<MetricReport> {
    let a = load_png(derained)?;
    let b = load_png(reference)?;
    Ok(MetricReport {
        psnr: psnr(&a, &b)?,
        ssim: ssim(&a, &b)?,
        uiqi: uiqi(&a, &b)?,
        gmsd: gmsd(&a, &b)?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::imgcore::save_png;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_image(h: usize, w: usize, c: usize, seed: u64) -> ImageTensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data = (0..h * w * c).map(|_| rng.gen::<f64>()).collect();
        ImageTensor::from_data(h, w, c, data).unwrap()
    }

    #[test]
    fn psnr_values() {
        let x = random_image(16, 16, 3, 1);
        assert_eq!(psnr(&x, &x).unwrap(), PSNR_IDENTICAL);

        let zero = ImageTensor::zeros(8, 8, 1);
        let half = ImageTensor::from_data(8, 8, 1, vec![0.5; 64]).unwrap();
        let db = psnr(&zero, &half).unwrap();
        assert!((db - 6.0206).abs() < 1e-3, "psnr {db}");
    }

    #[test]
    fn ssim_identity_and_extreme() {
        let x = random_image(16, 16, 1, 2);
        assert!((ssim(&x, &x).unwrap() - 1.0).abs() < 1e-12);

        let zeros = ImageTensor::zeros(16, 16, 1);
        let ones = ImageTensor::from_data(16, 16, 1, vec![1.0; 256]).unwrap();
        let c1 = 0.0001;
        let expect = c1 / (1.0 + c1);
        let got = ssim(&zeros, &ones).unwrap();
        assert!((got - expect).abs() < 1e-12, "{got} vs {expect}");
    }

    /// Independent per-window double-loop SSIM oracle.
    fn ssim_oracle(x: &ImageTensor, y: &ImageTensor) -> f64 {
        let lx = x.luminance();
        let ly = y.luminance();
        let w = gaussian_window(11, 1.5);
        let (c1, c2) = (0.0001, 0.0009);
        let (h, wid) = (x.height, x.width);
        let mut vals = Vec::new();
        for oy in 0..=h - 11 {
            for ox in 0..=wid - 11 {
                let mut mx = 0.0;
                let mut my = 0.0;
                for i in 0..11 {
                    for j in 0..11 {
                        mx += w[i * 11 + j] * lx.data[(oy + i) * wid + ox + j];
                        my += w[i * 11 + j] * ly.data[(oy + i) * wid + ox + j];
                    }
                }
                let mut vx = 0.0;
                let mut vy = 0.0;
                let mut cov = 0.0;
                for i in 0..11 {
                    for j in 0..11 {
                        let a = lx.data[(oy + i) * wid + ox + j] - mx;
                        let b = ly.data[(oy + i) * wid + ox + j] - my;
                        vx += w[i * 11 + j] * a * a;
                        vy += w[i * 11 + j] * b * b;
                        cov += w[i * 11 + j] * a * b;
                    }
                }
                vals.push(
                    ((2.0 * mx * my + c1) * (2.0 * cov + c2))
                        / ((mx * mx + my * my + c1) * (vx + vy + c2)),
                );
            }
        }
        vals.iter().sum::<f64>() / vals.len() as f64
    }

    #[test]
    fn ssim_matches_oracle() {
        for seed in [3, 4, 5] {
            let x = random_image(32, 32, 3, seed);
            let y = random_image(32, 32, 3, seed + 100);
            let fast = ssim(&x, &y).unwrap();
            let slow = ssim_oracle(&x, &y);
            assert!((fast - slow).abs() < 1e-8, "{fast} vs {slow}");
        }
    }

    /// Independent double-loop UIQI oracle over raw (non-centered) sums.
    fn uiqi_oracle(x: &ImageTensor, y: &ImageTensor) -> f64 {
        let lx = x.luminance();
        let ly = y.luminance();
        let (h, wid) = (x.height, x.width);
        let n = 64.0;
        let mut vals = Vec::new();
        for oy in 0..=h - 8 {
            for ox in 0..=wid - 8 {
                let mut xs = Vec::new();
                let mut ys = Vec::new();
                for i in 0..8 {
                    for j in 0..8 {
                        xs.push(lx.data[(oy + i) * wid + ox + j]);
                        ys.push(ly.data[(oy + i) * wid + ox + j]);
                    }
                }
                let mx = xs.iter().sum::<f64>() / n;
                let my = ys.iter().sum::<f64>() / n;
                let vx = xs.iter().map(|a| (a - mx) * (a - mx)).sum::<f64>() / (n - 1.0);
                let vy = ys.iter().map(|a| (a - my) * (a - my)).sum::<f64>() / (n - 1.0);
                let cov = xs
                    .iter()
                    .zip(ys.iter())
                    .map(|(a, b)| (a - mx) * (b - my))
                    .sum::<f64>()
                    / (n - 1.0);
                let vt = vx + vy;
                let mt = mx * mx + my * my;
                vals.push(if vt < 1e-12 && mt < 1e-12 {
                    1.0
                } else if vt < 1e-12 || mt < 1e-12 {
                    0.0
                } else {
                    4.0 * cov * mx * my / (vt * mt)
                });
            }
        }
        vals.iter().sum::<f64>() / vals.len() as f64
    }

    #[test]
    fn uiqi_identity_and_affine_penalty() {
        let x = random_image(24, 24, 1, 6);
        assert!((uiqi(&x, &x).unwrap() - 1.0).abs() < 1e-10);

        let y_data: Vec<f64> = x.data.iter().map(|v| 0.5 + v / 2.0).collect();
        let y = ImageTensor::from_data(24, 24, 1, y_data).unwrap();
        assert!(uiqi(&x, &y).unwrap() < 1.0);
    }

    #[test]
    fn uiqi_matches_oracle() {
        for seed in [7, 8, 9] {
            let x = random_image(24, 24, 3, seed);
            let y = random_image(24, 24, 3, seed + 50);
            let fast = uiqi(&x, &y).unwrap();
            let slow = uiqi_oracle(&x, &y);
            assert!((fast - slow).abs() < 1e-8, "{fast} vs {slow}");
        }
    }

    #[test]
    fn gmsd_identity_and_offset_invariance() {
        let x = random_image(16, 16, 1, 10);
        assert_eq!(gmsd(&x, &x).unwrap(), 0.0);

        // An offset leaves interior gradients unchanged; only the
        // zero-padded one-pixel border reacts, so the score stays small.
        let off: Vec<f64> = x.data.iter().map(|v| v + 0.05).collect();
        let y_off = ImageTensor::from_data(16, 16, 1, off).unwrap();
        let gx = prewitt_magnitude(&x.luminance());
        let gy = prewitt_magnitude(&y_off.luminance());
        for i in 1..15 {
            for j in 1..15 {
                assert!((gx[i * 16 + j] - gy[i * 16 + j]).abs() < 1e-12);
            }
        }
        // Gain changes gradients everywhere.
        let y_data: Vec<f64> = x.data.iter().map(|v| v * 0.5 + 0.1).collect();
        let y = ImageTensor::from_data(16, 16, 1, y_data).unwrap();
        assert!(gmsd(&x, &y).unwrap() > 0.0);
    }

    /// Direct transcription of the GMSD formula used as the oracle.
    fn gmsd_oracle(x: &ImageTensor, y: &ImageTensor) -> f64 {
        let gx = prewitt_magnitude(&x.luminance());
        let gy = prewitt_magnitude(&y.luminance());
        let gms: Vec<f64> = gx
            .iter()
            .zip(gy.iter())
            .map(|(a, b)| (2.0 * a * b + GMSD_C) / (a * a + b * b + GMSD_C))
            .collect();
        let mean = gms.iter().sum::<f64>() / gms.len() as f64;
        (gms.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / gms.len() as f64).sqrt()
    }

    #[test]
    fn gmsd_matches_oracle() {
        for seed in [11, 12, 13] {
            let x = random_image(16, 16, 3, seed);
            let y = random_image(16, 16, 3, seed + 30);
            let fast = gmsd(&x, &y).unwrap();
            let slow = gmsd_oracle(&x, &y);
            assert!((fast - slow).abs() < 1e-10);
        }
    }

    #[test]
    fn metrics_are_symmetric() {
        let x = random_image(16, 16, 3, 20);
        let y = random_image(16, 16, 3, 21);
        assert!((psnr(&x, &y).unwrap() - psnr(&y, &x).unwrap()).abs() < 1e-12);
        assert!((ssim(&x, &y).unwrap() - ssim(&y, &x).unwrap()).abs() < 1e-12);
        assert!((uiqi(&x, &y).unwrap() - uiqi(&y, &x).unwrap()).abs() < 1e-12);
        assert!((gmsd(&x, &y).unwrap() - gmsd(&y, &x).unwrap()).abs() < 1e-12);
    }

    #[test]
    fn protocol_identity_fixture() {
        let dir = tempfile::tempdir().unwrap();
        let img = random_image(32, 32, 3, 30);
        let p1 = dir.path().join("a.png");
        let p2 = dir.path().join("b.png");
        save_png(&img, &p1).unwrap();
        save_png(&img, &p2).unwrap();
        let r = evaluate_protocol(&p1, &p2).unwrap();
        assert_eq!(r.psnr, PSNR_IDENTICAL);
        assert!((r.ssim - 1.0).abs() < 1e-12);
        assert!((r.uiqi - 1.0).abs() < 1e-10);
        assert_eq!(r.gmsd, 0.0);
    }

    #[test]
    fn quantization_bound() {
        // Max quantization error is 0.5/255, so PSNR of a save/load round
        // trip is at least 10*log10(255^2/0.25) > 48 dB.
        let dir = tempfile::tempdir().unwrap();
        for seed in [40, 41] {
            let img = random_image(24, 24, 3, seed);
            let p = dir.path().join("x.png");
            save_png(&img, &p).unwrap();
            let back = load_png(&p).unwrap();
            assert!(psnr(&back, &img).unwrap() >= 48.0);
        }
    }
}
