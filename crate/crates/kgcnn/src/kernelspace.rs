//! PCA over the motion-kernel family and dimensionality stretching.
//!
//! Kernels are vectorized, projected onto a low-dimensional orthonormal
//! basis, and the coefficient vector is replicated across the spatial grid
//! as degradation maps that a convolutional net can consume.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use nalgebra::{DMatrix, SymmetricEigen};

use crate::error::{Error, Result};
use crate::rainsim::{make_motion_kernel, MotionKernel, LENGTH_MAX, LENGTH_MIN, THETA_MAX, THETA_MIN};

/// Hard cap on the retained dimension.
pub const MAX_DIM: usize = 162;

const MAGIC: &[u8; 4] = b"KGPB";
const VERSION: u32 = 1;

#[derive(Debug, Clone)]
pub struct PcaBasis {
    /// Kernel side length; vectors live in R^{p^2}.
    pub kernel_size: usize,
    /// p^2 mean vector of the fitting family.
    pub mean: Vec<f64>,
    /// t x p^2 orthonormal rows, row-major.
    pub components: Vec<f64>,
    pub dim: usize,
    /// Fraction of eigenvalue mass retained; NaN for a basis loaded from disk.
    pub energy_kept: f64,
}

/// m x n x t tensor whose slice j is constant at coefficient j.
#[derive(Debug, Clone)]
pub struct DegradationMap {
    pub height: usize,
    pub width: usize,
    pub depth: usize,
    /// Row-major (h, w, t), channels innermost.
    pub data: Vec<f64>,
}

/// Regular (theta, length) grid over the simulation ranges.
pub fn sample_kernel_family(
    theta_steps: usize,
    length_steps: usize,
    p: usize,
) -> Result<Vec<MotionKernel>> {
    if theta_steps < 2 || length_steps < 2 {
        return Err(Error::invalid("need at least 2 steps per axis"));
    }
    let mut family = Vec::with_capacity(theta_steps * length_steps);
    for it in 0..theta_steps {
        let theta = THETA_MIN + (THETA_MAX - THETA_MIN) * it as f64 / (theta_steps - 1) as f64;
        for il in 0..length_steps {
            let length =
                LENGTH_MIN + (LENGTH_MAX - LENGTH_MIN) * il as f64 / (length_steps - 1) as f64;
            family.push(make_motion_kernel(theta, length, p)?);
        }
    }
    Ok(family)
}

/// Fit a PCA basis keeping the smallest dimension whose cumulative eigenvalue
/// fraction reaches `energy_threshold`, capped at [`MAX_DIM`].
pub fn fit_pca(kernels: &[MotionKernel], energy_threshold: f64) -> Result<PcaBasis> {
    if kernels.len() < 2 {
        return Err(Error::invalid("need at least 2 kernels"));
    }
    if !(0.0 < energy_threshold && energy_threshold <= 1.0) {
        return Err(Error::invalid("energy threshold must be in (0, 1]"));
    }
    let p = kernels[0].size;
    let d = p * p;
    let n = kernels.len();
    if kernels.iter().any(|k| k.size != p) {
        return Err(Error::shape("kernels must share one size".to_string()));
    }

    let mut mean = vec![0.0; d];
    for k in kernels {
        for (m, w) in mean.iter_mut().zip(k.weights.iter()) {
            *m += w;
        }
    }
    for m in &mut mean {
        *m /= n as f64;
    }

    // Centered data, rows = samples.
    let x = DMatrix::from_fn(n, d, |i, j| kernels[i].weights[j] - mean[j]);

    // Eigenvalues of the scatter matrix, descending, with matching directions.
    let (mut eigvals, mut eigvecs): (Vec<f64>, Vec<Vec<f64>>) = if n >= d {
        let scatter = x.transpose() * &x;
        let eig = SymmetricEigen::new(scatter);
        let mut pairs: Vec<(f64, Vec<f64>)> = (0..d)
            .map(|i| (eig.eigenvalues[i], eig.eigenvectors.column(i).iter().copied().collect()))
            .collect();
        pairs.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap());
        pairs.into_iter().unzip()
    } else {
        // Gram route: eigenvectors u of X X^T lift to X^T u / sqrt(lambda).
        let gram = &x * x.transpose();
        let eig = SymmetricEigen::new(gram);
        let mut pairs: Vec<(f64, Vec<f64>)> = Vec::with_capacity(n);
        for i in 0..n {
            let lambda = eig.eigenvalues[i];
            if lambda <= 1e-12 {
                pairs.push((lambda.max(0.0), vec![0.0; d]));
                continue;
            }
            let u = eig.eigenvectors.column(i);
            let v = x.transpose() * u / lambda.sqrt();
            pairs.push((lambda, v.iter().copied().collect()));
        }
        pairs.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap());
        pairs.into_iter().unzip()
    };
    eigvals.iter_mut().for_each(|l| *l = l.max(0.0));

    let total: f64 = eigvals.iter().sum();
    if total <= 1e-14 {
        return Err(Error::Numeric("degenerate kernel family: zero variance".to_string()));
    }
    let mut kept = 0.0;
    let mut dim = 0;
    for &l in &eigvals {
        if kept / total >= energy_threshold || dim == MAX_DIM {
            break;
        }
        kept += l;
        dim += 1;
    }
    let energy_kept = kept / total;

    let mut components = Vec::with_capacity(dim * d);
    for v in eigvecs.drain(..dim) {
        components.extend_from_slice(&v);
    }
    Ok(PcaBasis { kernel_size: p, mean, components, dim, energy_kept })
}

/// Coefficients of a kernel in the basis: `components * (vec(k) - mean)`.
pub fn project(kernel: &MotionKernel, basis: &PcaBasis) -> Result<Vec<f64>> {
    let d = basis.kernel_size * basis.kernel_size;
    if kernel.size != basis.kernel_size {
        return Err(Error::shape(format!(
            "kernel size {} != basis size {}",
            kernel.size, basis.kernel_size
        )));
    }
    let mut coeffs = vec![0.0; basis.dim];
    for (t, c) in coeffs.iter_mut().enumerate() {
        let row = &basis.components[t * d..(t + 1) * d];
        *c = row
            .iter()
            .zip(kernel.weights.iter().zip(basis.mean.iter()))
            .map(|(r, (w, m))| r * (w - m))
            .sum();
    }
    Ok(coeffs)
}

/// Reconstruct the vectorized kernel `mean + components^T * coeffs`.
pub fn reconstruct(coeffs: &[f64], basis: &PcaBasis) -> Vec<f64> {
    let d = basis.kernel_size * basis.kernel_size;
    let mut out = basis.mean.clone();
    for (t, &c) in coeffs.iter().enumerate() {
        let row = &basis.components[t * d..(t + 1) * d];
        for (o, r) in out.iter_mut().zip(row.iter()) {
            *o += c * r;
        }
    }
    out
}

/// Replicate a coefficient vector across an m x n grid.
pub fn stretch(coeffs: &[f64], height: usize, width: usize) -> Result<DegradationMap> {
    if coeffs.is_empty() {
        return Err(Error::invalid("empty coefficient vector"));
    }
    let t = coeffs.len();
    let mut data = vec![0.0; height * width * t];
    for p in 0..height * width {
        data[p * t..(p + 1) * t].copy_from_slice(coeffs);
    }
    Ok(DegradationMap { height, width, depth: t, data })
}

/// Versioned binary basis file: magic, version, p, t, mean, components
/// (little-endian 64-bit reals).
pub fn save_basis(basis: &PcaBasis, path: &Path) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    w.write_all(&(basis.kernel_size as u32).to_le_bytes())?;
    w.write_all(&(basis.dim as u32).to_le_bytes())?;
    for v in basis.mean.iter().chain(basis.components.iter()) {
        w.write_all(&v.to_le_bytes())?;
    }
    w.flush()?;
    Ok(())
}

pub fn load_basis(path: &Path) -> Result<PcaBasis> {
    let mut r = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(Error::Format("not a KGPB basis file".to_string()));
    }
    let mut u32buf = [0u8; 4];
    r.read_exact(&mut u32buf)?;
    let version = u32::from_le_bytes(u32buf);
    if version != VERSION {
        return Err(Error::Format(format!("unsupported basis version {version}")));
    }
    r.read_exact(&mut u32buf)?;
    let p = u32::from_le_bytes(u32buf) as usize;
    r.read_exact(&mut u32buf)?;
    let dim = u32::from_le_bytes(u32buf) as usize;
    let d = p * p;
    let mut read_f64s = |count: usize| -> Result<Vec<f64>> {
        let mut out = Vec::with_capacity(count);
        let mut buf = [0u8; 8];
        for _ in 0..count {
            r.read_exact(&mut buf)?;
            out.push(f64::from_le_bytes(buf));
        }
        Ok(out)
    };
    let mean = read_f64s(d)?;
    let components = read_f64s(dim * d)?;
    Ok(PcaBasis { kernel_size: p, mean, components, dim, energy_kept: f64::NAN })
}
