//! Network assembly, training on synthesized patches, and the end-to-end
//! kernel-guided deraining pipeline.
//!
//! The parameter net regresses normalized `(theta, length)` from a 64x64
//! texture patch. The derain net maps the texture patch, concatenated with
//! stretched kernel coefficients, to the streak patch. Deraining subtracts
//! the stitched streak prediction from the rainy image.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::decompose::{split_texture, GuidedFilterConfig};
use crate::error::{Error, Result};
use crate::imgcore::{extract_patches, stitch_patches, ImageTensor};
use crate::kernelspace::{project, PcaBasis};
use crate::nn::{
    adam_step, backward, forward, frobenius_loss, init_state, AdamConfig, LayerSpec, Mode,
    NetState, Tensor4,
};
use crate::parallel::map_indexed;
use crate::rainsim::{
    make_motion_kernel, sample_rain_params, synthesize_rainy, KERNEL_SIZE, LENGTH_MAX, LENGTH_MIN,
    THETA_MAX, THETA_MIN,
};

/// Network input patch side length.
pub const PATCH_SIZE: usize = 64;
/// Patch stride at inference; overlaps smooth per-patch kernel estimates.
pub const INFER_STRIDE: usize = 48;

/// Canonical derain depth (number of convolutions) and filter width.
pub const DERAIN_DEPTH: usize = 26;
pub const DERAIN_FILTERS: usize = 36;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AblationMode {
    /// Degradation maps from the true (training) or estimated (inference) kernel.
    Full,
    /// All-zero degradation maps; trained and run without guidance.
    ZeroKernel,
    /// Identical schedule to `ZeroKernel` but kept as a separate artifact.
    DerainOnly,
}

impl AblationMode {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "full" => Ok(AblationMode::Full),
            "zero-kernel" | "zero_kernel" => Ok(AblationMode::ZeroKernel),
            "derain-only" | "derain_only" => Ok(AblationMode::DerainOnly),
            _ => Err(Error::invalid(format!("unknown mode '{s}'"))),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            AblationMode::Full => "full",
            AblationMode::ZeroKernel => "zero-kernel",
            AblationMode::DerainOnly => "derain-only",
        }
    }

    fn uses_guidance(&self) -> bool {
        matches!(self, AblationMode::Full)
    }
}

#[derive(Debug, Clone)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch: usize,
    pub lr: f64,
    pub seed: u64,
    pub mode: AblationMode,
    pub depth: usize,
    pub filters: usize,
    pub parallel: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 50,
            batch: 8,
            lr: 0.01,
            seed: 0,
            mode: AblationMode::Full,
            depth: DERAIN_DEPTH,
            filters: DERAIN_FILTERS,
            parallel: crate::parallel::default_parallel(),
        }
    }
}

/// Six-layer parameter net: four conv+pool stages then two fully-connected
/// layers, 64x64x3 in, 2 values out.
pub fn param_net_spec() -> Vec<LayerSpec> {
    vec![
        LayerSpec::Conv3x3 { in_ch: 3, out_ch: 8 },
        LayerSpec::Relu,
        LayerSpec::AvgPool2,
        LayerSpec::Conv3x3 { in_ch: 8, out_ch: 16 },
        LayerSpec::Relu,
        LayerSpec::AvgPool2,
        LayerSpec::Conv3x3 { in_ch: 16, out_ch: 32 },
        LayerSpec::Relu,
        LayerSpec::AvgPool2,
        LayerSpec::Conv3x3 { in_ch: 32, out_ch: 32 },
        LayerSpec::Relu,
        LayerSpec::AvgPool2,
        LayerSpec::FullyConnected { in_dim: 32 * 4 * 4, out_dim: 32 },
        LayerSpec::Relu,
        LayerSpec::FullyConnected { in_dim: 32, out_dim: 2 },
    ]
}

/// Residual derain net with `depth` convolutions of width `filters`,
/// guided by `t` external channels after the first convolution.
///
/// Layout: conv+relu, concat, conv+bn+relu, (depth-4)/2 residual blocks of
/// two conv+bn+relu layers, one more conv+bn+relu, and a linear final conv.
pub fn derain_net_spec(depth: usize, filters: usize, t: usize) -> Result<Vec<LayerSpec>> {
    if depth < 4 || depth % 2 != 0 {
        return Err(Error::invalid(format!("depth {depth} must be even and >= 4")));
    }
    if filters == 0 || t == 0 {
        return Err(Error::invalid("filters and guidance dimension must be positive"));
    }
    let blocks = (depth - 4) / 2;
    let f = filters;
    let mut spec = vec![
        LayerSpec::Conv3x3 { in_ch: 3, out_ch: f },
        LayerSpec::Relu,
        LayerSpec::ConcatExternal { ch: t },
        LayerSpec::Conv3x3 { in_ch: f + t, out_ch: f },
        LayerSpec::BatchNorm { ch: f },
        LayerSpec::Relu,
    ];
    for _ in 0..blocks {
        spec.extend_from_slice(&[
            LayerSpec::ResidualBegin,
            LayerSpec::Conv3x3 { in_ch: f, out_ch: f },
            LayerSpec::BatchNorm { ch: f },
            LayerSpec::Relu,
            LayerSpec::Conv3x3 { in_ch: f, out_ch: f },
            LayerSpec::BatchNorm { ch: f },
            LayerSpec::Relu,
            LayerSpec::ResidualEnd,
        ]);
    }
    spec.extend_from_slice(&[
        LayerSpec::Conv3x3 { in_ch: f, out_ch: f },
        LayerSpec::BatchNorm { ch: f },
        LayerSpec::Relu,
        LayerSpec::Conv3x3 { in_ch: f, out_ch: 3 },
    ]);
    debug_assert_eq!(
        spec.iter().filter(|l| matches!(l, LayerSpec::Conv3x3 { .. })).count(),
        depth
    );
    Ok(spec)
}

/// Guidance dimension a derain spec was built for.
pub fn guidance_dim(spec: &[LayerSpec]) -> Result<usize> {
    spec.iter()
        .find_map(|l| match l {
            LayerSpec::ConcatExternal { ch } => Some(*ch),
            _ => None,
        })
        .ok_or_else(|| Error::invalid("spec has no concat layer"))
}

/// Affine map of (theta, length) onto the unit square.
pub fn normalize_params(theta: f64, length: f64) -> [f64; 2] {
    [
        (theta - THETA_MIN) / (THETA_MAX - THETA_MIN),
        (length - LENGTH_MIN) / (LENGTH_MAX - LENGTH_MIN),
    ]
}

pub fn denormalize_params(v: [f64; 2]) -> (f64, f64) {
    (
        THETA_MIN + v[0] * (THETA_MAX - THETA_MIN),
        LENGTH_MIN + v[1] * (LENGTH_MAX - LENGTH_MIN),
    )
}

/// One training sample: texture patch, regression label, streak target,
/// and the true kernel's PCA coefficients.
#[derive(Debug, Clone)]
pub struct Sample {
    pub texture: ImageTensor,
    pub label: [f64; 2],
    pub streak: ImageTensor,
    pub coeffs: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct Dataset {
    pub samples: Vec<Sample>,
    /// PCA dimension of the coefficient vectors.
    pub dim: usize,
}

/// Synthesize a dataset from in-memory clean RGB images.
pub fn build_training_set_from_images(
    clean: &[ImageTensor],
    n_patches: usize,
    rng: &mut ChaCha8Rng,
    pca: &PcaBasis,
    gf: &GuidedFilterConfig,
) -> Result<Dataset> {
    if n_patches > 0 && clean.is_empty() {
        return Err(Error::invalid("empty clean image corpus"));
    }
    let mut samples = Vec::with_capacity(n_patches);
    for _ in 0..n_patches {
        let img = &clean[rng.gen_range(0..clean.len())];
        if img.channels != 3 || img.height < PATCH_SIZE || img.width < PATCH_SIZE {
            return Err(Error::invalid("clean images must be RGB and at least 64x64"));
        }
        let row = rng.gen_range(0..=img.height - PATCH_SIZE);
        let col = rng.gen_range(0..=img.width - PATCH_SIZE);
        let crop = img.crop(row, col, PATCH_SIZE, PATCH_SIZE)?;
        let params = sample_rain_params(rng);
        let sim = synthesize_rainy(&crop, &params)?;
        let (_, texture) = split_texture(&sim.rainy, gf)?;
        let coeffs = project(&sim.kernel, pca)?;
        samples.push(Sample {
            texture,
            label: normalize_params(params.theta, params.length),
            streak: sim.streaks,
            coeffs,
        });
    }
    Ok(Dataset { samples, dim: pca.dim })
}

/// Synthesize a dataset from a directory of clean PNGs (sorted by name so
/// the same seed always yields the same data).
pub fn build_training_set(
    clean_dir: &Path,
    n_patches: usize,
    rng: &mut ChaCha8Rng,
    pca: &PcaBasis,
    gf: &GuidedFilterConfig,
) -> Result<Dataset> {
    let images = load_clean_dir(clean_dir)?;
    build_training_set_from_images(&images, n_patches, rng, pca, gf)
}

pub fn load_clean_dir(dir: &Path) -> Result<Vec<ImageTensor>> {
    let mut paths: Vec<_> = std::fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().map(|e| e == "png").unwrap_or(false))
        .collect();
    paths.sort();
    if paths.is_empty() {
        return Err(Error::invalid(format!("no PNG files in {}", dir.display())));
    }
    paths.iter().map(|p| crate::imgcore::load_png(p)).collect()
}

fn patches_to_tensor(patches: &[&ImageTensor]) -> Tensor4 {
    let n = patches.len();
    let (h, w, c) = (patches[0].height, patches[0].width, patches[0].channels);
    let mut t = Tensor4::zeros(n, h, w, c);
    for (i, p) in patches.iter().enumerate() {
        t.data[i * p.data.len()..(i + 1) * p.data.len()].copy_from_slice(&p.data);
    }
    t
}

fn coeffs_to_maps(coeffs: &[&[f64]], h: usize, w: usize, t: usize) -> Tensor4 {
    let n = coeffs.len();
    let mut out = Tensor4::zeros(n, h, w, t);
    for (i, c) in coeffs.iter().enumerate() {
        debug_assert_eq!(c.len(), t);
        for p in 0..h * w {
            let off = (i * h * w + p) * t;
            out.data[off..off + t].copy_from_slice(c);
        }
    }
    out
}

fn check_finite(loss: f64, what: &str) -> Result<()> {
    if !loss.is_finite() {
        return Err(Error::Numeric(format!("{what} training diverged: loss {loss}")));
    }
    Ok(())
}

/// Train the parameter net with Adam on normalized (theta, length) labels.
/// Returns the trained state and per-epoch mean training loss.
pub fn train_param_net(ds: &Dataset, cfg: &TrainConfig) -> Result<(NetState, Vec<f64>)> {
    if ds.samples.is_empty() {
        return Err(Error::invalid("empty dataset"));
    }
    let spec = param_net_spec();
    let mut init_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    init_rng.set_stream(STREAM_INIT);
    let mut state = init_state(&spec, &mut init_rng);
    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    shuffle_rng.set_stream(STREAM_SHUFFLE);
    let adam = AdamConfig::with_lr(cfg.lr);
    let mut history = Vec::with_capacity(cfg.epochs);
    let mut order: Vec<usize> = (0..ds.samples.len()).collect();
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut shuffle_rng);
        let mut epoch_loss = 0.0;
        let mut batches = 0usize;
        for chunk in order.chunks(cfg.batch.max(1)) {
            let patches: Vec<&ImageTensor> = chunk.iter().map(|&i| &ds.samples[i].texture).collect();
            let x = patches_to_tensor(&patches);
            let mut target = Tensor4::zeros(chunk.len(), 1, 1, 2);
            for (bi, &i) in chunk.iter().enumerate() {
                target.data[2 * bi] = ds.samples[i].label[0];
                target.data[2 * bi + 1] = ds.samples[i].label[1];
            }
            let (y, tape) = forward(&spec, &mut state, &x, None, Mode::Train, cfg.parallel)?;
            let (loss, grad) = frobenius_loss(&y, &target)?;
            check_finite(loss, "parameter-net")?;
            let (grads, _) = backward(&spec, &state, tape.as_ref().unwrap(), &grad, cfg.parallel)?;
            adam_step(&mut state, &grads, &adam)?;
            epoch_loss += loss;
            batches += 1;
        }
        let mean = epoch_loss / batches.max(1) as f64;
        log::info!("param-net epoch {epoch}: loss {mean:.6}");
        history.push(mean);
    }
    Ok((state, history))
}

/// Train the derain net. Supervision always uses ground-truth kernels; the
/// zero-kernel and derain-only modes feed all-zero degradation maps.
pub fn train_derain_net(ds: &Dataset, cfg: &TrainConfig) -> Result<(NetState, Vec<f64>)> {
    if ds.samples.is_empty() {
        return Err(Error::invalid("empty dataset"));
    }
    let spec = derain_net_spec(cfg.depth, cfg.filters, ds.dim)?;
    let mut init_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    init_rng.set_stream(STREAM_INIT);
    let mut state = init_state(&spec, &mut init_rng);
    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    shuffle_rng.set_stream(STREAM_SHUFFLE);
    let adam = AdamConfig::with_lr(cfg.lr);
    let zeros = vec![0.0; ds.dim];
    let mut history = Vec::with_capacity(cfg.epochs);
    let mut order: Vec<usize> = (0..ds.samples.len()).collect();
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut shuffle_rng);
        let mut epoch_loss = 0.0;
        let mut batches = 0usize;
        for chunk in order.chunks(cfg.batch.max(2)) {
            if chunk.len() < 2 {
                // Batchnorm needs at least two samples in training mode.
                continue;
            }
            let patches: Vec<&ImageTensor> = chunk.iter().map(|&i| &ds.samples[i].texture).collect();
            let x = patches_to_tensor(&patches);
            let coeffs: Vec<&[f64]> = chunk
                .iter()
                .map(|&i| {
                    if cfg.mode.uses_guidance() {
                        ds.samples[i].coeffs.as_slice()
                    } else {
                        zeros.as_slice()
                    }
                })
                .collect();
            let ext = coeffs_to_maps(&coeffs, PATCH_SIZE, PATCH_SIZE, ds.dim);
            let targets: Vec<&ImageTensor> = chunk.iter().map(|&i| &ds.samples[i].streak).collect();
            let target = patches_to_tensor(&targets);
            let (y, tape) = forward(&spec, &mut state, &x, Some(&ext), Mode::Train, cfg.parallel)?;
            let (loss, grad) = frobenius_loss(&y, &target)?;
            check_finite(loss, "derain-net")?;
            let (grads, _) = backward(&spec, &state, tape.as_ref().unwrap(), &grad, cfg.parallel)?;
            adam_step(&mut state, &grads, &adam)?;
            epoch_loss += loss;
            batches += 1;
        }
        let mean = epoch_loss / batches.max(1) as f64;
        log::info!("derain-net[{}] epoch {epoch}: loss {mean:.6}", cfg.mode.name());
        history.push(mean);
    }
    Ok((state, history))
}

/// Predict normalized parameters for one texture patch, clamped to [0,1].
pub fn predict_params(
    spec: &[LayerSpec],
    state: &NetState,
    texture: &ImageTensor,
    parallel: bool,
) -> Result<[f64; 2]> {
    let x = patches_to_tensor(&[texture]);
    let mut s = state.clone();
    let (y, _) = forward(spec, &mut s, &x, None, Mode::Infer, parallel)?;
    Ok([y.data[0].clamp(0.0, 1.0), y.data[1].clamp(0.0, 1.0)])
}

/// Estimate (theta, length) and build the corresponding kernel.
pub fn estimate_kernel(
    texture: &ImageTensor,
    spec: &[LayerSpec],
    state: &NetState,
    parallel: bool,
) -> Result<(f64, f64, crate::rainsim::MotionKernel)> {
    let norm = predict_params(spec, state, texture, parallel)?;
    let (theta, length) = denormalize_params(norm);
    let kernel = make_motion_kernel(theta, length, KERNEL_SIZE)?;
    Ok((theta, length, kernel))
}

pub struct DerainOutput {
    pub derained: ImageTensor,
    /// Stitched streak prediction, clamped to be non-negative.
    pub streaks: ImageTensor,
}

/// Full pipeline on one rainy image: per 64x64 patch (stride 48) split the
/// texture, estimate the kernel, stretch its coefficients, run the derain
/// net, stitch the streaks, and subtract.
#[allow(clippy::too_many_arguments)]
pub fn derain_image(
    rainy: &ImageTensor,
    param_spec: &[LayerSpec],
    param_state: &NetState,
    derain_spec: &[LayerSpec],
    derain_state: &NetState,
    pca: &PcaBasis,
    mode: AblationMode,
    gf: &GuidedFilterConfig,
    parallel: bool,
) -> Result<DerainOutput> {
    if rainy.height < PATCH_SIZE || rainy.width < PATCH_SIZE {
        return Err(Error::shape("image smaller than the 64x64 patch size".to_string()));
    }
    let t = guidance_dim(derain_spec)?;
    if mode.uses_guidance() && t != pca.dim {
        return Err(Error::shape(format!(
            "derain net expects {t} guidance channels but the basis has {}",
            pca.dim
        )));
    }
    let patches = extract_patches(rainy, PATCH_SIZE, INFER_STRIDE)?;
    let results = map_indexed(patches.len(), parallel, |i| -> Result<(usize, usize, ImageTensor)> {
        let patch = &patches[i];
        let (_, texture) = split_texture(&patch.tensor, gf)?;
        let coeffs = if mode.uses_guidance() {
            let (_, _, kernel) = estimate_kernel(&texture, param_spec, param_state, false)?;
            project(&kernel, pca)?
        } else {
            vec![0.0; t]
        };
        let ext = coeffs_to_maps(&[&coeffs], PATCH_SIZE, PATCH_SIZE, t);
        let x = patches_to_tensor(&[&texture]);
        let mut s = derain_state.clone();
        let (y, _) = forward(derain_spec, &mut s, &x, Some(&ext), Mode::Infer, false)?;
        let streak =
            ImageTensor::from_data(PATCH_SIZE, PATCH_SIZE, 3, y.data)?;
        Ok((patch.row, patch.col, streak))
    });
    let mut parts = Vec::with_capacity(results.len());
    for r in results {
        parts.push(r?);
    }
    let mut streaks = stitch_patches(&parts, rainy.height, rainy.width, 3)?;
    for v in &mut streaks.data {
        if *v < 0.0 {
            *v = 0.0;
        }
    }
    let mut derained = ImageTensor::zeros(rainy.height, rainy.width, 3);
    for (d, (r, s)) in derained
        .data
        .iter_mut()
        .zip(rainy.data.iter().zip(streaks.data.iter()))
    {
        *d = (r - s).clamp(0.0, 1.0);
    }
    Ok(DerainOutput { derained, streaks })
}

// Seed policy: one master seed, split into per-purpose ChaCha streams.
pub const STREAM_DATA: u64 = 0;
pub const STREAM_INIT: u64 = 1;
pub const STREAM_SHUFFLE: u64 = 2;
pub const STREAM_EVAL: u64 = 3;

/// RNG for a given purpose derived from the master seed.
pub fn stream_rng(master_seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(master_seed);
    rng.set_stream(stream);
    rng
}
