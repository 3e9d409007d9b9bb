//! Motion blur kernels, raindrop masks, and synthetic rainy images.
//!
//! A rainy observation is built by adding `R = K(theta, l) (x) M` to the
//! luminance channel of a clean image, where `M` is a sparse blurred drop
//! mask and `K` the point spread function of a line segment.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::imgcore::{rgb_to_yuv, yuv_to_rgb, ImageTensor};

pub const THETA_MIN: f64 = 45.0;
pub const THETA_MAX: f64 = 135.0;
pub const LENGTH_MIN: f64 = 15.0;
pub const LENGTH_MAX: f64 = 30.0;
pub const SNR_MIN: f64 = 0.9;
pub const SNR_MAX: f64 = 1.0;
pub const SIGMA_MIN: f64 = 0.2;
pub const SIGMA_MAX: f64 = 0.5;

/// Kernel size used everywhere; smallest odd size covering length <= 30.
pub const KERNEL_SIZE: usize = 31;

/// p x p non-negative, sum-one point spread function of a line segment.
#[derive(Debug, Clone)]
pub struct MotionKernel {
    pub size: usize,
    pub theta: f64,
    pub length: f64,
    pub weights: Vec<f64>,
}

/// Drop mask: sparse impulses blurred with a small Gaussian, values in [0,1].
#[derive(Debug, Clone)]
pub struct RainMask {
    pub height: usize,
    pub width: usize,
    pub values: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RainParams {
    /// Degrees counterclockwise from horizontal; 90 = vertical streaks.
    pub theta: f64,
    pub length: f64,
    pub mask_snr: f64,
    pub mask_sigma: f64,
    pub seed: u64,
}

/// Rasterize the centered line segment of `length` at angle `theta` with
/// perpendicular-distance anti-aliasing, then normalize to sum one.
pub fn make_motion_kernel(theta: f64, length: f64, p: usize) -> Result<MotionKernel> {
    if p % 2 == 0 {
        return Err(Error::invalid(format!("kernel size {p} must be odd")));
    }
    if length < 1.0 {
        return Err(Error::invalid(format!("length {length} must be >= 1")));
    }
    let center = (p / 2) as f64;
    let rad = theta.to_radians();
    let (dx, dy) = (rad.cos(), rad.sin());
    // Half-extent (l-1)/2 covers l unit cells along the segment.
    let half = (length - 1.0) / 2.0;
    let mut weights = vec![0.0; p * p];
    for i in 0..p {
        for j in 0..p {
            // x right, y up: row i increasing downward maps to negative y.
            let x = j as f64 - center;
            let y = center - i as f64;
            let t = (x * dx + y * dy).clamp(-half, half);
            let (px, py) = (x - t * dx, y - t * dy);
            let dist = (px * px + py * py).sqrt();
            weights[i * p + j] = (1.0 - dist).max(0.0);
        }
    }
    let sum: f64 = weights.iter().sum();
    if sum <= 0.0 {
        return Err(Error::Numeric("motion kernel rasterized to all zeros".to_string()));
    }
    for w in &mut weights {
        *w /= sum;
    }
    Ok(MotionKernel { size: p, theta, length, weights })
}

/// Impulses with probability `1 - snr` per pixel, blurred by a normalized
/// Gaussian of std `sigma` truncated at radius `ceil(3 sigma)`.
pub fn make_rain_mask(
    height: usize,
    width: usize,
    snr: f64,
    sigma: f64,
    rng: &mut impl Rng,
) -> Result<RainMask> {
    if height == 0 || width == 0 {
        return Err(Error::invalid("mask dimensions must be positive"));
    }
    if !(0.0..=1.0).contains(&snr) {
        return Err(Error::invalid(format!("snr {snr} outside [0,1]")));
    }
    if sigma <= 0.0 {
        return Err(Error::invalid(format!("sigma {sigma} must be positive")));
    }
    let drop_p = 1.0 - snr;
    let mut values = vec![0.0; height * width];
    for v in &mut values {
        if rng.gen::<f64>() < drop_p {
            *v = 1.0;
        }
    }
    let g = gaussian_kernel(sigma);
    let img = ImageTensor::from_data(height, width, 1, values)?;
    let mut blurred = conv2d_same(&img, &g.weights, g.size)?;
    blurred.clamp01();
    Ok(RainMask { height, width, values: blurred.data })
}

struct SquareKernel {
    size: usize,
    weights: Vec<f64>,
}

fn gaussian_kernel(sigma: f64) -> SquareKernel {
    let radius = (3.0 * sigma).ceil() as usize;
    let size = 2 * radius + 1;
    let mut weights = vec![0.0; size * size];
    let mut sum = 0.0;
    for i in 0..size {
        for j in 0..size {
            let dy = i as f64 - radius as f64;
            let dx = j as f64 - radius as f64;
            let w = (-(dx * dx + dy * dy) / (2.0 * sigma * sigma)).exp();
            weights[i * size + j] = w;
            sum += w;
        }
    }
    for w in &mut weights {
        *w /= sum;
    }
    SquareKernel { size, weights }
}

/// True 2-D convolution (kernel flipped) with zero padding, same output size.
pub fn convolve_same(img: &ImageTensor, kernel: &MotionKernel) -> Result<ImageTensor> {
    conv2d_same(img, &kernel.weights, kernel.size)
}

fn conv2d_same(img: &ImageTensor, weights: &[f64], k: usize) -> Result<ImageTensor> {
    if img.channels != 1 {
        return Err(Error::shape("convolve_same expects a single-channel image".to_string()));
    }
    if k > img.height || k > img.width {
        return Err(Error::shape(format!(
            "kernel {k}x{k} larger than image {}x{}",
            img.height, img.width
        )));
    }
    let (h, w) = (img.height, img.width);
    let r = (k / 2) as isize;
    let mut out = vec![0.0; h * w];
    for oy in 0..h as isize {
        for ox in 0..w as isize {
            let mut acc = 0.0;
            for ky in 0..k as isize {
                let iy = oy + r - ky;
                if iy < 0 || iy >= h as isize {
                    continue;
                }
                for kx in 0..k as isize {
                    let ix = ox + r - kx;
                    if ix < 0 || ix >= w as isize {
                        continue;
                    }
                    acc += weights[(ky * k as isize + kx) as usize]
                        * img.data[(iy * w as isize + ix) as usize];
                }
            }
            out[(oy * w as isize + ox) as usize] = acc;
        }
    }
    ImageTensor::from_data(h, w, 1, out)
}

/// Sample simulation parameters from their uniform ranges.
pub fn sample_rain_params(rng: &mut impl Rng) -> RainParams {
    RainParams {
        theta: rng.gen_range(THETA_MIN..=THETA_MAX),
        length: rng.gen_range(LENGTH_MIN..=LENGTH_MAX),
        mask_snr: rng.gen_range(SNR_MIN..=SNR_MAX),
        mask_sigma: rng.gen_range(SIGMA_MIN..=SIGMA_MAX),
        seed: rng.gen(),
    }
}

/// Simulation output with all intermediates kept for supervision.
pub struct RainyImage {
    pub rainy: ImageTensor,
    /// `rainy - background` on RGB; non-negative, includes clamping effects.
    pub streaks: ImageTensor,
    pub kernel: MotionKernel,
    pub mask: RainMask,
}

/// Add `K (x) M` to the Y channel of an RGB background, clamp, convert back.
pub fn synthesize_rainy(background: &ImageTensor, params: &RainParams) -> Result<RainyImage> {
    if background.channels != 3 {
        return Err(Error::shape("background must be RGB".to_string()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(params.seed);
    let mask = make_rain_mask(
        background.height,
        background.width,
        params.mask_snr,
        params.mask_sigma,
        &mut rng,
    )?;
    let kernel = make_motion_kernel(params.theta, params.length, KERNEL_SIZE)?;
    let mask_img =
        ImageTensor::from_data(mask.height, mask.width, 1, mask.values.clone())?;
    let rain = convolve_same(&mask_img, &kernel)?;

    let mut yuv = rgb_to_yuv(background)?;
    let n = background.height * background.width;
    for p in 0..n {
        let y = yuv.data[3 * p] + rain.data[p];
        yuv.data[3 * p] = y.min(1.0);
    }
    let mut rainy = yuv_to_rgb(&yuv)?;
    rainy.clamp01();

    let mut streaks = ImageTensor::zeros(background.height, background.width, 3);
    for (s, (r, b)) in streaks
        .data
        .iter_mut()
        .zip(rainy.data.iter().zip(background.data.iter()))
    {
        *s = r - b;
    }
    Ok(RainyImage { rainy, streaks, kernel, mask })
}
