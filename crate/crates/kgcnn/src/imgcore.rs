//! Image representation, PNG I/O, color-space conversion and patch handling.
//!
//! All intensities are 64-bit reals, nominally in `[0, 1]`. PNG quantization
//! is `round(x * 255)` after clamping, so a save/load round trip is the
//! identity on already-quantized tensors.

use std::path::Path;

use crate::error::{Error, Result};

/// H x W x C image, row-major `(h, w, c)`, channels 1 or 3.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageTensor {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub data: Vec<f64>,
}

impl ImageTensor {
    pub fn zeros(height: usize, width: usize, channels: usize) -> Self {
        ImageTensor { height, width, channels, data: vec![0.0; height * width * channels] }
    }

    pub fn from_data(height: usize, width: usize, channels: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != height * width * channels {
            return Err(Error::shape(format!(
                "data length {} != {}x{}x{}",
                data.len(),
                height,
                width,
                channels
            )));
        }
        Ok(ImageTensor { height, width, channels, data })
    }

    #[inline]
    pub fn idx(&self, row: usize, col: usize, ch: usize) -> usize {
        (row * self.width + col) * self.channels + ch
    }

    #[inline]
    pub fn get(&self, row: usize, col: usize, ch: usize) -> f64 {
        self.data[self.idx(row, col, ch)]
    }

    #[inline]
    pub fn set(&mut self, row: usize, col: usize, ch: usize, v: f64) {
        let i = self.idx(row, col, ch);
        self.data[i] = v;
    }

    pub fn clamp01(&mut self) {
        for v in &mut self.data {
            *v = v.clamp(0.0, 1.0);
        }
    }

    /// Extract one channel as a single-channel image.
    pub fn channel(&self, ch: usize) -> ImageTensor {
        let mut out = ImageTensor::zeros(self.height, self.width, 1);
        for r in 0..self.height {
            for c in 0..self.width {
                out.data[r * self.width + c] = self.get(r, c, ch);
            }
        }
        out
    }

    pub fn set_channel(&mut self, ch: usize, plane: &ImageTensor) {
        assert_eq!(plane.channels, 1);
        assert_eq!((plane.height, plane.width), (self.height, self.width));
        for r in 0..self.height {
            for c in 0..self.width {
                self.set(r, c, ch, plane.data[r * self.width + c]);
            }
        }
    }

    /// Crop a `size_h x size_w` window with its top-left at `(row, col)`.
    pub fn crop(&self, row: usize, col: usize, size_h: usize, size_w: usize) -> Result<ImageTensor> {
        if row + size_h > self.height || col + size_w > self.width {
            return Err(Error::shape("crop window exceeds image bounds".to_string()));
        }
        let mut out = ImageTensor::zeros(size_h, size_w, self.channels);
        for r in 0..size_h {
            let src = self.idx(row + r, col, 0);
            let dst = (r * size_w) * self.channels;
            out.data[dst..dst + size_w * self.channels]
                .copy_from_slice(&self.data[src..src + size_w * self.channels]);
        }
        Ok(out)
    }

    /// BT.601 luminance of an RGB image, or a copy for grayscale.
    pub fn luminance(&self) -> ImageTensor {
        if self.channels == 1 {
            return self.clone();
        }
        let mut out = ImageTensor::zeros(self.height, self.width, 1);
        for r in 0..self.height {
            for c in 0..self.width {
                out.data[r * self.width + c] =
                    0.299 * self.get(r, c, 0) + 0.587 * self.get(r, c, 1) + 0.114 * self.get(r, c, 2);
            }
        }
        out
    }
}

/// A patch cut from a parent image, remembering where it came from.
#[derive(Debug, Clone)]
pub struct Patch {
    pub row: usize,
    pub col: usize,
    pub tensor: ImageTensor,
}

pub fn load_png(path: &Path) -> Result<ImageTensor> {
    let img = image::open(path).map_err(|e| Error::Decode {
        path: path.to_path_buf(),
        reason: e.to_string(),
    })?;
    match img {
        image::DynamicImage::ImageLuma8(buf) => {
            let (w, h) = (buf.width() as usize, buf.height() as usize);
            let data = buf.into_raw().iter().map(|&u| u as f64 / 255.0).collect();
            ImageTensor::from_data(h, w, 1, data)
        }
        image::DynamicImage::ImageRgb8(buf) => {
            let (w, h) = (buf.width() as usize, buf.height() as usize);
            let data = buf.into_raw().iter().map(|&u| u as f64 / 255.0).collect();
            ImageTensor::from_data(h, w, 3, data)
        }
        other => Err(Error::Decode {
            path: path.to_path_buf(),
            reason: format!("unsupported color type {:?} (need 8-bit gray or RGB, no alpha)", other.color()),
        }),
    }
}

/// Clamp to `[0, 1]`, quantize `round(x * 255)`, write as 8-bit PNG.
pub fn save_png(img: &ImageTensor, path: &Path) -> Result<()> {
    let quantize = |x: f64| (x.clamp(0.0, 1.0) * 255.0).round() as u8;
    let (w, h) = (img.width as u32, img.height as u32);
    match img.channels {
        1 => {
            let raw: Vec<u8> = img.data.iter().map(|&x| quantize(x)).collect();
            let buf = image::GrayImage::from_raw(w, h, raw)
                .ok_or_else(|| Error::shape("gray buffer size".to_string()))?;
            buf.save(path).map_err(|e| Error::Io(std::io::Error::other(e.to_string())))
        }
        3 => {
            let raw: Vec<u8> = img.data.iter().map(|&x| quantize(x)).collect();
            let buf = image::RgbImage::from_raw(w, h, raw)
                .ok_or_else(|| Error::shape("rgb buffer size".to_string()))?;
            buf.save(path).map_err(|e| Error::Io(std::io::Error::other(e.to_string())))
        }
        c => Err(Error::invalid(format!("cannot save {c}-channel image"))),
    }
}

// Offset-free full-range BT.601. The inverse is computed from the forward
// matrix so the round trip closes to machine precision.
const KR: f64 = 0.299;
const KG: f64 = 0.587;
const KB: f64 = 0.114;

fn yuv_forward_matrix() -> [[f64; 3]; 3] {
    let su = 0.5 / (1.0 - KB);
    let sv = 0.5 / (1.0 - KR);
    [
        [KR, KG, KB],
        [-KR * su, -KG * su, (1.0 - KB) * su],
        [(1.0 - KR) * sv, -KG * sv, -KB * sv],
    ]
}

fn invert3(m: [[f64; 3]; 3]) -> [[f64; 3]; 3] {
    let det = m[0][0] * (m[1][1] * m[2][2] - m[1][2] * m[2][1])
        - m[0][1] * (m[1][0] * m[2][2] - m[1][2] * m[2][0])
        + m[0][2] * (m[1][0] * m[2][1] - m[1][1] * m[2][0]);
    let inv_det = 1.0 / det;
    let mut inv = [[0.0; 3]; 3];
    inv[0][0] = (m[1][1] * m[2][2] - m[1][2] * m[2][1]) * inv_det;
    inv[0][1] = (m[0][2] * m[2][1] - m[0][1] * m[2][2]) * inv_det;
    inv[0][2] = (m[0][1] * m[1][2] - m[0][2] * m[1][1]) * inv_det;
    inv[1][0] = (m[1][2] * m[2][0] - m[1][0] * m[2][2]) * inv_det;
    inv[1][1] = (m[0][0] * m[2][2] - m[0][2] * m[2][0]) * inv_det;
    inv[1][2] = (m[0][2] * m[1][0] - m[0][0] * m[1][2]) * inv_det;
    inv[2][0] = (m[1][0] * m[2][1] - m[1][1] * m[2][0]) * inv_det;
    inv[2][1] = (m[0][1] * m[2][0] - m[0][0] * m[2][1]) * inv_det;
    inv[2][2] = (m[0][0] * m[1][1] - m[0][1] * m[1][0]) * inv_det;
    inv
}

fn apply_matrix(img: &ImageTensor, m: &[[f64; 3]; 3]) -> Result<ImageTensor> {
    if img.channels != 3 {
        return Err(Error::shape(format!("need 3 channels, got {}", img.channels)));
    }
    let mut out = ImageTensor::zeros(img.height, img.width, 3);
    for p in 0..img.height * img.width {
        let a = img.data[3 * p];
        let b = img.data[3 * p + 1];
        let c = img.data[3 * p + 2];
        for (row, mr) in m.iter().enumerate() {
            out.data[3 * p + row] = mr[0] * a + mr[1] * b + mr[2] * c;
        }
    }
    Ok(out)
}

pub fn rgb_to_yuv(img: &ImageTensor) -> Result<ImageTensor> {
    apply_matrix(img, &yuv_forward_matrix())
}

pub fn yuv_to_rgb(img: &ImageTensor) -> Result<ImageTensor> {
    apply_matrix(img, &invert3(yuv_forward_matrix()))
}

/// Grid of patch origins at multiples of `stride`; the last row/column is
/// snapped inward so the whole axis is covered.
fn grid_positions(dim: usize, size: usize, stride: usize) -> Vec<usize> {
    let mut pos = Vec::new();
    let mut p = 0;
    while p + size <= dim {
        pos.push(p);
        p += stride;
    }
    let last = dim - size;
    if *pos.last().unwrap() != last {
        pos.push(last);
    }
    pos
}

pub fn extract_patches(img: &ImageTensor, size: usize, stride: usize) -> Result<Vec<Patch>> {
    if size > img.height || size > img.width {
        return Err(Error::shape(format!(
            "image {}x{} smaller than patch size {}",
            img.height, img.width, size
        )));
    }
    if stride == 0 {
        return Err(Error::invalid("stride must be positive"));
    }
    let rows = grid_positions(img.height, size, stride);
    let cols = grid_positions(img.width, size, stride);
    let mut patches = Vec::with_capacity(rows.len() * cols.len());
    for &r in &rows {
        for &c in &cols {
            patches.push(Patch { row: r, col: c, tensor: img.crop(r, c, size, size)? });
        }
    }
    Ok(patches)
}

/// Reassemble processed patches; overlaps are averaged with uniform weights.
pub fn stitch_patches(
    patches: &[(usize, usize, ImageTensor)],
    height: usize,
    width: usize,
    channels: usize,
) -> Result<ImageTensor> {
    let mut sum = vec![0.0; height * width * channels];
    let mut count = vec![0u32; height * width];
    for (row, col, t) in patches {
        if t.channels != channels || row + t.height > height || col + t.width > width {
            return Err(Error::shape("patch does not fit target image".to_string()));
        }
        for r in 0..t.height {
            for c in 0..t.width {
                let dst = ((row + r) * width + (col + c)) * channels;
                let src = (r * t.width + c) * channels;
                for ch in 0..channels {
                    sum[dst + ch] += t.data[src + ch];
                }
                count[(row + r) * width + (col + c)] += 1;
            }
        }
    }
    if count.iter().any(|&c| c == 0) {
        return Err(Error::shape("stitch leaves uncovered pixels".to_string()));
    }
    for p in 0..height * width {
        let k = count[p] as f64;
        for ch in 0..channels {
            sum[p * channels + ch] /= k;
        }
    }
    ImageTensor::from_data(height, width, channels, sum)
}
