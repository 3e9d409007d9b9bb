//! Subcommand dispatch, configuration merging, and artifact IO for the
//! `kgcnn` binary.
//!
//! Every option can come from a flag or from a `key = value` config file
//! (`--config`); flags win. Unknown keys are hard errors. Exit codes:
//! 0 success, 1 usage error, 2 runtime error.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use clap::{Args, Parser, Subcommand};

use crate::decompose::{split_texture, GuidedFilterConfig};
use crate::error::Error;
use crate::imgcore::{load_png, save_png, ImageTensor};
use crate::kernelspace::{fit_pca, load_basis, sample_kernel_family, save_basis};
use crate::metrics::{gmsd, psnr, ssim, uiqi, MetricReport};
use crate::nn::{init_state, load_checkpoint, save_checkpoint, LayerSpec, NetState};
use crate::pipeline::{
    build_training_set_from_images, derain_image, derain_net_spec, load_clean_dir, param_net_spec,
    stream_rng, AblationMode, Dataset, DerainOutput, TrainConfig, DERAIN_DEPTH, DERAIN_FILTERS,
    STREAM_DATA, STREAM_INIT,
};
use crate::rainsim::{sample_rain_params, synthesize_rainy, KERNEL_SIZE};

#[derive(Debug)]
enum CliError {
    Usage(String),
    Runtime(Error),
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        CliError::Runtime(e)
    }
}

type CResult<T> = std::result::Result<T, CliError>;

fn usage(msg: impl Into<String>) -> CliError {
    CliError::Usage(msg.into())
}

#[derive(Parser, Debug)]
#[command(
    name = "kgcnn",
    version,
    about = "Kernel-guided single-image rain streak removal"
)]
struct Cli {
    /// Config file with `key = value` lines; flags override its entries.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Worker threads for data-parallel stages (1 forces sequential).
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    cmd: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Synthesize rainy/streak image pairs from clean PNGs.
    Simulate(SimulateArgs),
    /// Split an image into structure and texture with a guided filter.
    Decompose(DecomposeArgs),
    /// Fit the kernel PCA basis on a (theta, length) grid.
    FitPca(FitPcaArgs),
    /// Train the parameter net or the derain net.
    Train(TrainArgs),
    /// Remove rain streaks from one image.
    Derain(DerainArgs),
    /// Compute PSNR/SSIM/UIQI/GMSD over paired directories.
    Eval(EvalArgs),
    /// Train all three modes on one dataset and compare them.
    Ablate(AblateArgs),
}

/// Parse `key = value` lines; `#` starts a comment, blank lines ignored.
fn parse_config_file(path: &Path) -> CResult<Vec<(String, String)>> {
    let text = std::fs::read_to_string(path).map_err(Error::from)?;
    let mut pairs = Vec::new();
    for (lineno, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| usage(format!("config line {}: expected key = value", lineno + 1)))?;
        pairs.push((k.trim().to_string(), v.trim().to_string()));
    }
    Ok(pairs)
}

/// Fill `slot` from a config value unless a flag already set it.
fn fill<T: FromStr>(slot: &mut Option<T>, key: &str, value: &str) -> CResult<()> {
    if slot.is_none() {
        let parsed = value
            .parse::<T>()
            .map_err(|_| usage(format!("config key '{key}': cannot parse '{value}'")))?;
        *slot = Some(parsed);
    }
    Ok(())
}

fn require<T>(slot: Option<T>, key: &str) -> CResult<T> {
    slot.ok_or_else(|| usage(format!("missing required option '{key}' (flag or config file)")))
}

trait Merge {
    fn merge(&mut self, key: &str, value: &str) -> CResult<()>;
}

fn apply_config<M: Merge>(args: &mut M, config: Option<&PathBuf>) -> CResult<()> {
    if let Some(path) = config {
        for (k, v) in parse_config_file(path)? {
            args.merge(&k, &v)?;
        }
    }
    Ok(())
}

fn unknown_key(key: &str) -> CliError {
    usage(format!("unknown config key '{key}'"))
}

// ---------------------------------------------------------------- simulate

#[derive(Args, Debug)]
struct SimulateArgs {
    /// Directory of clean RGB PNGs.
    #[arg(long)]
    input: Option<PathBuf>,
    /// Output directory for `_rainy.png`, `_streaks.png`, `_params.txt`.
    #[arg(long)]
    output: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
}

impl Merge for SimulateArgs {
    fn merge(&mut self, key: &str, value: &str) -> CResult<()> {
        match key {
            "input" => fill(&mut self.input, key, value),
            "output" => fill(&mut self.output, key, value),
            "seed" => fill(&mut self.seed, key, value),
            _ => Err(unknown_key(key)),
        }
    }
}

fn png_stem(path: &Path) -> String {
    path.file_stem().unwrap_or_default().to_string_lossy().into_owned()
}

fn sorted_pngs(dir: &Path) -> CResult<Vec<PathBuf>> {
    let mut paths: Vec<_> = std::fs::read_dir(dir)
        .map_err(Error::from)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().map(|e| e == "png").unwrap_or(false))
        .collect();
    paths.sort();
    if paths.is_empty() {
        return Err(usage(format!("no PNG files in {}", dir.display())));
    }
    Ok(paths)
}

fn run_simulate(mut a: SimulateArgs, config: Option<&PathBuf>) -> CResult<()> {
    apply_config(&mut a, config)?;
    let input = require(a.input, "input")?;
    let output = require(a.output, "output")?;
    let seed = a.seed.unwrap_or(0);
    log::info!("simulate: input={} output={} seed={seed}", input.display(), output.display());

    std::fs::create_dir_all(&output).map_err(Error::from)?;
    for (i, path) in sorted_pngs(&input)?.iter().enumerate() {
        let clean = load_png(path)?;
        let mut rng = stream_rng(seed, i as u64);
        let params = sample_rain_params(&mut rng);
        let sim = synthesize_rainy(&clean, &params)?;
        let stem = png_stem(path);
        save_png(&sim.rainy, &output.join(format!("{stem}_rainy.png")))?;
        save_png(&sim.streaks, &output.join(format!("{stem}_streaks.png")))?;
        let sidecar = format!(
            "theta = {}\nlength = {}\nsnr = {}\nsigma = {}\nseed = {}\n",
            params.theta, params.length, params.mask_snr, params.mask_sigma, params.seed
        );
        std::fs::write(output.join(format!("{stem}_params.txt")), sidecar)
            .map_err(Error::from)?;
        log::info!("simulated {stem}: theta={:.2} length={:.2}", params.theta, params.length);
    }
    Ok(())
}

// --------------------------------------------------------------- decompose

#[derive(Args, Debug)]
struct DecomposeArgs {
    /// Input PNG.
    #[arg(long)]
    input: Option<PathBuf>,
    /// Output directory; defaults to the input's directory.
    #[arg(long)]
    output: Option<PathBuf>,
    #[arg(long)]
    radius: Option<usize>,
    #[arg(long)]
    epsilon: Option<f64>,
}

impl Merge for DecomposeArgs {
    fn merge(&mut self, key: &str, value: &str) -> CResult<()> {
        match key {
            "input" => fill(&mut self.input, key, value),
            "output" => fill(&mut self.output, key, value),
            "radius" => fill(&mut self.radius, key, value),
            "epsilon" => fill(&mut self.epsilon, key, value),
            _ => Err(unknown_key(key)),
        }
    }
}

fn run_decompose(mut a: DecomposeArgs, config: Option<&PathBuf>) -> CResult<()> {
    apply_config(&mut a, config)?;
    let input = require(a.input, "input")?;
    let output = a
        .output
        .unwrap_or_else(|| input.parent().unwrap_or(Path::new(".")).to_path_buf());
    let gf = GuidedFilterConfig {
        radius: a.radius.unwrap_or(GuidedFilterConfig::default().radius),
        epsilon: a.epsilon.unwrap_or(GuidedFilterConfig::default().epsilon),
    };
    log::info!("decompose: input={} radius={} epsilon={}", input.display(), gf.radius, gf.epsilon);

    let img = load_png(&input)?;
    let (structure, texture) = split_texture(&img, &gf)?;
    std::fs::create_dir_all(&output).map_err(Error::from)?;
    let stem = png_stem(&input);
    save_png(&structure, &output.join(format!("{stem}_structure.png")))?;
    // Texture is signed; shift to [0,1] for visualization only.
    let mut vis = texture.clone();
    for v in &mut vis.data {
        *v = (*v + 1.0) / 2.0;
    }
    save_png(&vis, &output.join(format!("{stem}_texture.png")))?;
    Ok(())
}

// ----------------------------------------------------------------- fit-pca

#[derive(Args, Debug)]
struct FitPcaArgs {
    /// Number of grid steps along theta.
    #[arg(long)]
    theta_steps: Option<usize>,
    /// Number of grid steps along length.
    #[arg(long)]
    length_steps: Option<usize>,
    /// Cumulative energy fraction to retain.
    #[arg(long)]
    energy: Option<f64>,
    /// Output basis file.
    #[arg(long)]
    out: Option<PathBuf>,
}

impl Merge for FitPcaArgs {
    fn merge(&mut self, key: &str, value: &str) -> CResult<()> {
        match key {
            "theta_steps" => fill(&mut self.theta_steps, key, value),
            "length_steps" => fill(&mut self.length_steps, key, value),
            "energy" => fill(&mut self.energy, key, value),
            "out" => fill(&mut self.out, key, value),
            _ => Err(unknown_key(key)),
        }
    }
}

fn run_fit_pca(mut a: FitPcaArgs, config: Option<&PathBuf>) -> CResult<()> {
    apply_config(&mut a, config)?;
    let theta_steps = a.theta_steps.unwrap_or(91);
    let length_steps = a.length_steps.unwrap_or(16);
    let energy = a.energy.unwrap_or(0.99);
    let out = require(a.out, "out")?;
    log::info!("fit-pca: grid {theta_steps}x{length_steps}, energy target {energy}");

    let family = sample_kernel_family(theta_steps, length_steps, KERNEL_SIZE)?;
    let basis = fit_pca(&family, energy)?;
    log::info!(
        "fitted basis: dim {} of {}, energy kept {:.6}",
        basis.dim,
        family.len(),
        basis.energy_kept
    );
    save_basis(&basis, &out)?;
    Ok(())
}

// ------------------------------------------------------------------- train

#[derive(Args, Debug)]
struct TrainArgs {
    /// Which network to train: `param` or `derain`.
    #[arg(long)]
    net: Option<String>,
    /// Guidance mode: full | zero-kernel | derain-only.
    #[arg(long)]
    mode: Option<String>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    /// Derain-net convolution count (even, >= 4).
    #[arg(long)]
    depth: Option<usize>,
    /// Derain-net filter width.
    #[arg(long)]
    filters: Option<usize>,
    /// Number of training patches to synthesize.
    #[arg(long)]
    patches: Option<usize>,
    /// Directory of clean PNGs.
    #[arg(long)]
    data: Option<PathBuf>,
    /// Fitted PCA basis file.
    #[arg(long)]
    pca: Option<PathBuf>,
    /// Output checkpoint path.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Optional per-epoch loss CSV.
    #[arg(long)]
    history: Option<PathBuf>,
}

impl Merge for TrainArgs {
    fn merge(&mut self, key: &str, value: &str) -> CResult<()> {
        match key {
            "net" => fill(&mut self.net, key, value),
            "mode" => fill(&mut self.mode, key, value),
            "epochs" => fill(&mut self.epochs, key, value),
            "batch" => fill(&mut self.batch, key, value),
            "lr" => fill(&mut self.lr, key, value),
            "seed" => fill(&mut self.seed, key, value),
            "depth" => fill(&mut self.depth, key, value),
            "filters" => fill(&mut self.filters, key, value),
            "patches" => fill(&mut self.patches, key, value),
            "data" => fill(&mut self.data, key, value),
            "pca" => fill(&mut self.pca, key, value),
            "out" => fill(&mut self.out, key, value),
            "history" => fill(&mut self.history, key, value),
            _ => Err(unknown_key(key)),
        }
    }
}

struct TrainResolved {
    net: String,
    cfg: TrainConfig,
    patches: usize,
    data: PathBuf,
    pca: PathBuf,
    out: PathBuf,
    history: Option<PathBuf>,
}

fn resolve_train(mut a: TrainArgs, config: Option<&PathBuf>, parallel: bool) -> CResult<TrainResolved> {
    apply_config(&mut a, config)?;
    let net = a.net.unwrap_or_else(|| "derain".to_string());
    if net != "param" && net != "derain" {
        return Err(usage(format!("--net must be 'param' or 'derain', got '{net}'")));
    }
    let mode = match &a.mode {
        Some(s) => AblationMode::parse(s).map_err(|e| usage(e.to_string()))?,
        None => AblationMode::Full,
    };
    let cfg = TrainConfig {
        epochs: a.epochs.unwrap_or(50),
        batch: a.batch.unwrap_or(8),
        lr: a.lr.unwrap_or(0.01),
        seed: a.seed.unwrap_or(0),
        mode,
        depth: a.depth.unwrap_or(DERAIN_DEPTH),
        filters: a.filters.unwrap_or(DERAIN_FILTERS),
        parallel,
    };
    Ok(TrainResolved {
        net,
        cfg,
        patches: a.patches.unwrap_or(500),
        data: require(a.data, "data")?,
        pca: require(a.pca, "pca")?,
        out: require(a.out, "out")?,
        history: a.history,
    })
}

fn write_history(path: &Path, losses: &[f64]) -> CResult<()> {
    let mut csv = String::from("epoch,loss\n");
    for (i, l) in losses.iter().enumerate() {
        let _ = writeln!(csv, "{i},{l}");
    }
    std::fs::write(path, csv).map_err(Error::from)?;
    Ok(())
}

fn build_dataset(r: &TrainResolved) -> CResult<(Dataset, crate::kernelspace::PcaBasis)> {
    let pca = load_basis(&r.pca)?;
    let images = load_clean_dir(&r.data)?;
    let mut rng = stream_rng(r.cfg.seed, STREAM_DATA);
    let ds = build_training_set_from_images(
        &images,
        r.patches,
        &mut rng,
        &pca,
        &GuidedFilterConfig::default(),
    )?;
    Ok((ds, pca))
}

fn run_train(a: TrainArgs, config: Option<&PathBuf>, parallel: bool) -> CResult<()> {
    let r = resolve_train(a, config, parallel)?;
    log::info!(
        "train: net={} mode={} epochs={} batch={} lr={} seed={} depth={} filters={} patches={}",
        r.net,
        r.cfg.mode.name(),
        r.cfg.epochs,
        r.cfg.batch,
        r.cfg.lr,
        r.cfg.seed,
        r.cfg.depth,
        r.cfg.filters,
        r.patches
    );
    let (ds, _pca) = build_dataset(&r)?;
    let (spec, state, losses) = if r.net == "param" {
        let (state, losses) = crate::pipeline::train_param_net(&ds, &r.cfg)?;
        (param_net_spec(), state, losses)
    } else {
        let (state, losses) = crate::pipeline::train_derain_net(&ds, &r.cfg)?;
        (derain_net_spec(r.cfg.depth, r.cfg.filters, ds.dim)?, state, losses)
    };
    if let (Some(first), Some(last)) = (losses.first(), losses.last()) {
        log::info!("loss: initial {first:.6}, final {last:.6}");
    }
    save_checkpoint(&spec, &state, &r.out)?;
    if let Some(h) = &r.history {
        write_history(h, &losses)?;
    }
    Ok(())
}

// ------------------------------------------------------------------ derain

#[derive(Args, Debug)]
struct DerainArgs {
    /// Parameter-net checkpoint (required in full mode).
    #[arg(long)]
    param: Option<PathBuf>,
    /// Derain-net checkpoint.
    #[arg(long)]
    derain: Option<PathBuf>,
    /// Fitted PCA basis file.
    #[arg(long)]
    pca: Option<PathBuf>,
    /// Guidance mode: full | zero-kernel | derain-only.
    #[arg(long)]
    mode: Option<String>,
    /// Also write the predicted streak layer.
    #[arg(long)]
    dump_streaks: Option<PathBuf>,
    /// Rainy input PNG.
    input: Option<PathBuf>,
    /// Derained output PNG.
    output: Option<PathBuf>,
}

impl Merge for DerainArgs {
    fn merge(&mut self, key: &str, value: &str) -> CResult<()> {
        match key {
            "param" => fill(&mut self.param, key, value),
            "derain" => fill(&mut self.derain, key, value),
            "pca" => fill(&mut self.pca, key, value),
            "mode" => fill(&mut self.mode, key, value),
            "dump_streaks" => fill(&mut self.dump_streaks, key, value),
            "input" => fill(&mut self.input, key, value),
            "output" => fill(&mut self.output, key, value),
            _ => Err(unknown_key(key)),
        }
    }
}

/// Load the parameter net when guidance needs it; otherwise a stand-in
/// empty net that is never invoked.
fn load_param_net(
    path: Option<&PathBuf>,
    mode: AblationMode,
) -> CResult<(Vec<LayerSpec>, NetState)> {
    if mode == AblationMode::Full {
        let p = path.ok_or_else(|| usage("full mode requires --param"))?;
        Ok(load_checkpoint(p)?)
    } else {
        let mut rng = stream_rng(0, STREAM_INIT);
        Ok((Vec::new(), init_state(&[], &mut rng)))
    }
}

fn run_derain(mut a: DerainArgs, config: Option<&PathBuf>, parallel: bool) -> CResult<()> {
    apply_config(&mut a, config)?;
    let mode = match &a.mode {
        Some(s) => AblationMode::parse(s).map_err(|e| usage(e.to_string()))?,
        None => AblationMode::Full,
    };
    let input = require(a.input, "input")?;
    let output = require(a.output, "output")?;
    let derain_ckpt = require(a.derain, "derain")?;
    let pca = load_basis(&require(a.pca, "pca")?)?;
    log::info!("derain: mode={} input={}", mode.name(), input.display());

    let (param_spec, param_state) = load_param_net(a.param.as_ref(), mode)?;
    let (derain_spec, derain_state) = load_checkpoint(&derain_ckpt)?;
    let rainy = load_png(&input)?;
    let out = derain_image(
        &rainy,
        &param_spec,
        &param_state,
        &derain_spec,
        &derain_state,
        &pca,
        mode,
        &GuidedFilterConfig::default(),
        parallel,
    )?;
    save_png(&out.derained, &output)?;
    if let Some(s) = &a.dump_streaks {
        save_png(&out.streaks, s)?;
    }
    Ok(())
}

// -------------------------------------------------------------------- eval

#[derive(Args, Debug)]
struct EvalArgs {
    /// Directory of reference (clean) PNGs.
    #[arg(long)]
    reference: Option<PathBuf>,
    /// Directory of test (derained) PNGs, paired by sorted order.
    #[arg(long)]
    test: Option<PathBuf>,
    /// Output CSV path; stdout when omitted.
    #[arg(long)]
    out: Option<PathBuf>,
}

impl Merge for EvalArgs {
    fn merge(&mut self, key: &str, value: &str) -> CResult<()> {
        match key {
            "reference" => fill(&mut self.reference, key, value),
            "test" => fill(&mut self.test, key, value),
            "out" => fill(&mut self.out, key, value),
            _ => Err(unknown_key(key)),
        }
    }
}

fn report_for(a: &ImageTensor, b: &ImageTensor) -> CResult<MetricReport> {
    Ok(MetricReport {
        psnr: psnr(a, b)?,
        ssim: ssim(a, b)?,
        uiqi: uiqi(a, b)?,
        gmsd: gmsd(a, b)?,
    })
}

fn metrics_csv(rows: &[(String, MetricReport)]) -> String {
    let mut csv = String::from("image,psnr,ssim,uiqi,gmsd\n");
    let n = rows.len().max(1) as f64;
    let mut sums = [0.0; 4];
    for (name, r) in rows {
        let _ = writeln!(csv, "{name},{:.6},{:.6},{:.6},{:.6}", r.psnr, r.ssim, r.uiqi, r.gmsd);
        sums[0] += r.psnr;
        sums[1] += r.ssim;
        sums[2] += r.uiqi;
        sums[3] += r.gmsd;
    }
    let _ = writeln!(
        csv,
        "(average value),{:.6},{:.6},{:.6},{:.6}",
        sums[0] / n,
        sums[1] / n,
        sums[2] / n,
        sums[3] / n
    );
    csv
}

fn run_eval(mut a: EvalArgs, config: Option<&PathBuf>) -> CResult<()> {
    apply_config(&mut a, config)?;
    let reference = require(a.reference, "reference")?;
    let test = require(a.test, "test")?;
    log::info!("eval: reference={} test={}", reference.display(), test.display());

    let refs = sorted_pngs(&reference)?;
    let tests = sorted_pngs(&test)?;
    if refs.len() != tests.len() {
        return Err(usage(format!(
            "directory sizes differ: {} reference vs {} test images",
            refs.len(),
            tests.len()
        )));
    }
    let mut rows = Vec::with_capacity(refs.len());
    for (r, t) in refs.iter().zip(tests.iter()) {
        let a_img = load_png(t)?;
        let b_img = load_png(r)?;
        rows.push((png_stem(t), report_for(&a_img, &b_img)?));
    }
    let csv = metrics_csv(&rows);
    match &a.out {
        Some(path) => std::fs::write(path, csv).map_err(Error::from)?,
        None => print!("{csv}"),
    }
    Ok(())
}

// ------------------------------------------------------------------ ablate

#[derive(Args, Debug)]
struct AblateArgs {
    /// Directory of clean PNGs; the last `holdout` are held out for eval.
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    pca: Option<PathBuf>,
    /// Output directory for checkpoints and the comparison CSV.
    #[arg(long)]
    out_dir: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    /// Parameter-net learning rate; the derain nets use `--lr`.
    #[arg(long)]
    param_lr: Option<f64>,
    #[arg(long)]
    depth: Option<usize>,
    #[arg(long)]
    filters: Option<usize>,
    #[arg(long)]
    patches: Option<usize>,
    /// Number of clean images reserved for evaluation.
    #[arg(long)]
    holdout: Option<usize>,
    /// Center-crop held-out images to this square size to bound runtime.
    #[arg(long)]
    eval_size: Option<usize>,
}

impl Merge for AblateArgs {
    fn merge(&mut self, key: &str, value: &str) -> CResult<()> {
        match key {
            "data" => fill(&mut self.data, key, value),
            "pca" => fill(&mut self.pca, key, value),
            "out_dir" => fill(&mut self.out_dir, key, value),
            "seed" => fill(&mut self.seed, key, value),
            "epochs" => fill(&mut self.epochs, key, value),
            "batch" => fill(&mut self.batch, key, value),
            "lr" => fill(&mut self.lr, key, value),
            "param_lr" => fill(&mut self.param_lr, key, value),
            "depth" => fill(&mut self.depth, key, value),
            "filters" => fill(&mut self.filters, key, value),
            "patches" => fill(&mut self.patches, key, value),
            "holdout" => fill(&mut self.holdout, key, value),
            "eval_size" => fill(&mut self.eval_size, key, value),
            _ => Err(unknown_key(key)),
        }
    }
}

fn center_crop(img: &ImageTensor, size: usize) -> crate::error::Result<ImageTensor> {
    let s = size.min(img.height).min(img.width);
    img.crop((img.height - s) / 2, (img.width - s) / 2, s, s)
}

/// Synthesize one held-out rainy image per clean image, derain it with the
/// given nets, and average metrics against the clean references.
#[allow(clippy::too_many_arguments)]
pub(crate) fn evaluate_holdout(
    clean: &[ImageTensor],
    seed: u64,
    param_spec: &[LayerSpec],
    param_state: &NetState,
    derain_spec: &[LayerSpec],
    derain_state: &NetState,
    pca: &crate::kernelspace::PcaBasis,
    mode: AblationMode,
    parallel: bool,
) -> crate::error::Result<MetricReport> {
    let gf = GuidedFilterConfig::default();
    let mut sums = [0.0; 4];
    for (i, img) in clean.iter().enumerate() {
        let mut rng = stream_rng(seed, crate::pipeline::STREAM_EVAL + i as u64);
        let params = sample_rain_params(&mut rng);
        let sim = synthesize_rainy(img, &params)?;
        let DerainOutput { derained, .. } = derain_image(
            &sim.rainy,
            param_spec,
            param_state,
            derain_spec,
            derain_state,
            pca,
            mode,
            &gf,
            parallel,
        )?;
        sums[0] += psnr(&derained, img)?;
        sums[1] += ssim(&derained, img)?;
        sums[2] += uiqi(&derained, img)?;
        sums[3] += gmsd(&derained, img)?;
    }
    let n = clean.len().max(1) as f64;
    Ok(MetricReport {
        psnr: sums[0] / n,
        ssim: sums[1] / n,
        uiqi: sums[2] / n,
        gmsd: sums[3] / n,
    })
}

fn run_ablate(mut a: AblateArgs, config: Option<&PathBuf>, parallel: bool) -> CResult<()> {
    apply_config(&mut a, config)?;
    let data = require(a.data, "data")?;
    let pca_path = require(a.pca, "pca")?;
    let out_dir = require(a.out_dir, "out_dir")?;
    let seed = a.seed.unwrap_or(0);
    let holdout = a.holdout.unwrap_or(10);
    let eval_size = a.eval_size.unwrap_or(96);
    let base_cfg = TrainConfig {
        epochs: a.epochs.unwrap_or(50),
        batch: a.batch.unwrap_or(8),
        lr: a.lr.unwrap_or(0.01),
        seed,
        mode: AblationMode::Full,
        depth: a.depth.unwrap_or(DERAIN_DEPTH),
        filters: a.filters.unwrap_or(DERAIN_FILTERS),
        parallel,
    };
    let patches = a.patches.unwrap_or(500);
    log::info!(
        "ablate: seed={seed} epochs={} batch={} depth={} filters={} patches={patches} holdout={holdout}",
        base_cfg.epochs,
        base_cfg.batch,
        base_cfg.depth,
        base_cfg.filters
    );

    let pca = load_basis(&pca_path)?;
    let images = load_clean_dir(&data)?;
    if images.len() <= holdout {
        return Err(usage(format!(
            "need more than {holdout} clean images, found {}",
            images.len()
        )));
    }
    let split = images.len() - holdout;
    let train_images = &images[..split];
    let held: Vec<ImageTensor> = images[split..]
        .iter()
        .map(|img| center_crop(img, eval_size))
        .collect::<crate::error::Result<_>>()?;

    let mut rng = stream_rng(seed, STREAM_DATA);
    let ds = build_training_set_from_images(
        train_images,
        patches,
        &mut rng,
        &pca,
        &GuidedFilterConfig::default(),
    )?;

    std::fs::create_dir_all(&out_dir).map_err(Error::from)?;
    let param_cfg = TrainConfig { lr: a.param_lr.unwrap_or(0.001), ..base_cfg.clone() };
    let (param_state, param_losses) = crate::pipeline::train_param_net(&ds, &param_cfg)?;
    let param_spec = param_net_spec();
    save_checkpoint(&param_spec, &param_state, &out_dir.join("param.kgcn"))?;
    if let (Some(f), Some(l)) = (param_losses.first(), param_losses.last()) {
        log::info!("param-net loss: initial {f:.6}, final {l:.6}");
    }

    let mut rows = Vec::new();
    // Baseline: the rainy images themselves, via a zeroed derain net.
    {
        let spec = derain_net_spec(4, 1, pca.dim)?;
        let mut zero_state = init_state(&spec, &mut stream_rng(seed, STREAM_INIT));
        for layer in &mut zero_state.layers {
            for p in &mut layer.params {
                p.value.iter_mut().for_each(|v| *v = 0.0);
            }
        }
        let report = evaluate_holdout(
            &held,
            seed,
            &param_spec,
            &param_state,
            &spec,
            &zero_state,
            &pca,
            AblationMode::ZeroKernel,
            parallel,
        )?;
        rows.push(("rainy".to_string(), report));
    }
    for mode in [AblationMode::Full, AblationMode::ZeroKernel, AblationMode::DerainOnly] {
        let cfg = TrainConfig { mode, ..base_cfg.clone() };
        let (state, losses) = crate::pipeline::train_derain_net(&ds, &cfg)?;
        let spec = derain_net_spec(cfg.depth, cfg.filters, ds.dim)?;
        save_checkpoint(&spec, &state, &out_dir.join(format!("{}.kgcn", mode.name())))?;
        if let (Some(f), Some(l)) = (losses.first(), losses.last()) {
            log::info!("derain-net[{}] loss: initial {f:.6}, final {l:.6}", mode.name());
        }
        let report = evaluate_holdout(
            &held, seed, &param_spec, &param_state, &spec, &state, &pca, mode, parallel,
        )?;
        log::info!("{}: held-out psnr {:.3} dB", mode.name(), report.psnr);
        rows.push((mode.name().to_string(), report));
    }
    let mut csv = String::from("mode,psnr,ssim,uiqi,gmsd\n");
    for (name, r) in &rows {
        let _ = writeln!(csv, "{name},{:.6},{:.6},{:.6},{:.6}", r.psnr, r.ssim, r.uiqi, r.gmsd);
    }
    std::fs::write(out_dir.join("ablation.csv"), csv).map_err(Error::from)?;
    Ok(())
}

// ---------------------------------------------------------------- dispatch

fn configure_threads(threads: Option<usize>) -> bool {
    #[cfg(feature = "parallel")]
    {
        if let Some(n) = threads {
            if n == 1 {
                return false;
            }
            if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
                log::warn!("thread pool already initialized: {e}");
            }
            return true;
        }
        crate::parallel::default_parallel()
    }
    #[cfg(not(feature = "parallel"))]
    {
        let _ = threads;
        false
    }
}

/// Parse argv and run; returns the process exit code.
pub fn run<I, S>(argv: I) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind;
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
            let _ = e.print();
            return code;
        }
    };
    let _ =
        env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
            .try_init();
    let parallel = configure_threads(cli.threads);
    let config = cli.config.as_ref();
    let result = match cli.cmd {
        Command::Simulate(a) => run_simulate(a, config),
        Command::Decompose(a) => run_decompose(a, config),
        Command::FitPca(a) => run_fit_pca(a, config),
        Command::Train(a) => run_train(a, config, parallel),
        Command::Derain(a) => run_derain(a, config, parallel),
        Command::Eval(a) => run_eval(a, config),
        Command::Ablate(a) => run_ablate(a, config, parallel),
    };
    match result {
        Ok(()) => 0,
        Err(CliError::Usage(msg)) => {
            eprintln!("error: {msg}");
            1
        }
        Err(CliError::Runtime(e)) => {
            eprintln!("error: {e}");
            2
        }
    }
}
