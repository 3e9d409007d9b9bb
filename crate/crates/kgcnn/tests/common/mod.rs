//! Shared helpers for integration tests: a procedural clean-image corpus
//! with smooth, natural-ish structure.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use kgcnn::imgcore::{save_png, ImageTensor};

/// Smooth random RGB image: per-channel sinusoid mixture over a gradient.
pub fn clean_image(height: usize, width: usize, seed: u64) -> ImageTensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut img = ImageTensor::zeros(height, width, 3);
    for ch in 0..3 {
        let base = rng.gen_range(0.25..0.65);
        let amp1 = rng.gen_range(0.08..0.2);
        let amp2 = rng.gen_range(0.05..0.15);
        // Low frequencies keep the background in the structure channel of
        // the guided-filter split, so the texture channel is streaks plus
        // mild residue rather than grating patterns that mimic streaks.
        let fx = rng.gen_range(0.004..0.02);
        let fy = rng.gen_range(0.004..0.02);
        let ph1 = rng.gen_range(0.0..std::f64::consts::TAU);
        let ph2 = rng.gen_range(0.0..std::f64::consts::TAU);
        let slope = rng.gen_range(-0.15..0.15);
        for i in 0..height {
            for j in 0..width {
                let v = base
                    + amp1 * (std::f64::consts::TAU * fx * j as f64 + ph1).sin()
                    + amp2 * (std::f64::consts::TAU * fy * i as f64 + ph2).cos()
                    + slope * (i + j) as f64 / (height + width) as f64;
                img.set(i, j, ch, v.clamp(0.0, 1.0));
            }
        }
    }
    img
}

pub fn make_corpus(count: usize, height: usize, width: usize, seed: u64) -> Vec<ImageTensor> {
    (0..count).map(|i| clean_image(height, width, seed.wrapping_add(i as u64))).collect()
}

/// Write a corpus as `img00.png`, `img01.png`, ... into `dir`.
#[allow(dead_code)]
pub fn write_corpus(dir: &Path, count: usize, height: usize, width: usize, seed: u64) {
    std::fs::create_dir_all(dir).unwrap();
    for (i, img) in make_corpus(count, height, width, seed).iter().enumerate() {
        save_png(img, &dir.join(format!("img{i:02}.png"))).unwrap();
    }
}
