//! Guided-filter smoothing and the additive texture/structure split.
//!
//! The rainy image is decomposed as `O = O_S + O_T` where the structure
//! component is the self-guided filter output and the texture component is
//! the residual. Rain streaks live in the texture component.

use crate::error::{Error, Result};
use crate::imgcore::ImageTensor;

#[derive(Debug, Clone, Copy)]
pub struct GuidedFilterConfig {
    pub radius: usize,
    /// Regularization in squared-intensity units.
    pub epsilon: f64,
}

impl Default for GuidedFilterConfig {
    fn default() -> Self {
        GuidedFilterConfig { radius: 15, epsilon: 1.0 }
    }
}

/// Windowed mean over a `(2r+1)^2` neighborhood, edge windows truncated,
/// O(1) per pixel via an integral image.
pub fn box_filter(img: &ImageTensor, radius: usize) -> Result<ImageTensor> {
    if img.channels != 1 {
        return Err(Error::shape("box_filter expects a single-channel image".to_string()));
    }
    if img.height == 0 || img.width == 0 {
        return Err(Error::shape("empty image".to_string()));
    }
    if radius == 0 {
        return Err(Error::invalid("radius must be >= 1"));
    }
    let (h, w) = (img.height, img.width);
    // integral[(i, j)] = sum of img[0..i, 0..j]
    let mut integral = vec![0.0; (h + 1) * (w + 1)];
    for i in 0..h {
        let mut row_sum = 0.0;
        for j in 0..w {
            row_sum += img.data[i * w + j];
            integral[(i + 1) * (w + 1) + (j + 1)] = integral[i * (w + 1) + (j + 1)] + row_sum;
        }
    }
    let r = radius as isize;
    let mut out = vec![0.0; h * w];
    for i in 0..h as isize {
        let y0 = (i - r).max(0) as usize;
        let y1 = ((i + r + 1).min(h as isize)) as usize;
        for j in 0..w as isize {
            let x0 = (j - r).max(0) as usize;
            let x1 = ((j + r + 1).min(w as isize)) as usize;
            let sum = integral[y1 * (w + 1) + x1] - integral[y0 * (w + 1) + x1]
                - integral[y1 * (w + 1) + x0]
                + integral[y0 * (w + 1) + x0];
            out[(i as usize) * w + j as usize] = sum / ((y1 - y0) * (x1 - x0)) as f64;
        }
    }
    ImageTensor::from_data(h, w, 1, out)
}

/// Single-channel guided filter of `input` steered by `guide`.
pub fn guided_filter(
    input: &ImageTensor,
    guide: &ImageTensor,
    cfg: &GuidedFilterConfig,
) -> Result<ImageTensor> {
    if input.channels != 1 || guide.channels != 1 {
        return Err(Error::shape("guided_filter expects single-channel images".to_string()));
    }
    if (input.height, input.width) != (guide.height, guide.width) {
        return Err(Error::shape("input and guide sizes differ".to_string()));
    }
    if cfg.epsilon <= 0.0 {
        return Err(Error::invalid("epsilon must be positive"));
    }
    let n = input.height * input.width;
    let mul = |a: &ImageTensor, b: &ImageTensor| {
        let data = a.data.iter().zip(b.data.iter()).map(|(x, y)| x * y).collect();
        ImageTensor::from_data(a.height, a.width, 1, data).unwrap()
    };

    let mean_i = box_filter(input, cfg.radius)?;
    let mean_g = box_filter(guide, cfg.radius)?;
    let corr_gi = box_filter(&mul(guide, input), cfg.radius)?;
    let corr_gg = box_filter(&mul(guide, guide), cfg.radius)?;

    let mut a = vec![0.0; n];
    let mut b = vec![0.0; n];
    for p in 0..n {
        let cov = corr_gi.data[p] - mean_g.data[p] * mean_i.data[p];
        let var = corr_gg.data[p] - mean_g.data[p] * mean_g.data[p];
        a[p] = cov / (var + cfg.epsilon);
        b[p] = mean_i.data[p] - a[p] * mean_g.data[p];
    }
    let a_img = ImageTensor::from_data(input.height, input.width, 1, a)?;
    let b_img = ImageTensor::from_data(input.height, input.width, 1, b)?;
    let mean_a = box_filter(&a_img, cfg.radius)?;
    let mean_b = box_filter(&b_img, cfg.radius)?;

    let data = (0..n)
        .map(|p| mean_a.data[p] * guide.data[p] + mean_b.data[p])
        .collect();
    ImageTensor::from_data(input.height, input.width, 1, data)
}

/// Per-channel self-guided split `img = structure + texture`.
/// The texture component may be negative.
pub fn split_texture(
    img: &ImageTensor,
    cfg: &GuidedFilterConfig,
) -> Result<(ImageTensor, ImageTensor)> {
    let mut structure = ImageTensor::zeros(img.height, img.width, img.channels);
    for ch in 0..img.channels {
        let plane = img.channel(ch);
        let smooth = guided_filter(&plane, &plane, cfg)?;
        structure.set_channel(ch, &smooth);
    }
    let texture_data = img
        .data
        .iter()
        .zip(structure.data.iter())
        .map(|(o, s)| o - s)
        .collect();
    let texture = ImageTensor::from_data(img.height, img.width, img.channels, texture_data)?;
    Ok((structure, texture))
}
