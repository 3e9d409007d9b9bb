//! Layer primitives: forward and backward passes.
//!
//! Convolutions use the cross-correlation convention (no kernel flip), same
//! zero padding, weights laid out `[ky][kx][ci][co]` with `co` contiguous so
//! the inner loops vectorize.

use crate::parallel::{for_each_chunk_mut, map_indexed};

use super::tensor::Tensor4;

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.9;

// ---------------------------------------------------------------------------
// conv3x3

pub fn conv3x3_forward(
    x: &Tensor4,
    weights: &[f64],
    bias: &[f64],
    out_ch: usize,
    parallel: bool,
) -> Tensor4 {
    let (n, h, w, cin) = (x.n, x.h, x.w, x.c);
    let cout = out_ch;
    debug_assert_eq!(weights.len(), 9 * cin * cout);
    let mut out = Tensor4::zeros(n, h, w, cout);
    let in_len = x.sample_len();
    let out_len = h * w * cout;
    let xdata = &x.data;
    for_each_chunk_mut(&mut out.data, out_len, parallel, |s, out_s| {
        let xs = &xdata[s * in_len..(s + 1) * in_len];
        for px in 0..h * w {
            out_s[px * cout..(px + 1) * cout].copy_from_slice(bias);
        }
        for y in 0..h {
            for ky in 0..3usize {
                let iy = y as isize + ky as isize - 1;
                if iy < 0 || iy >= h as isize {
                    continue;
                }
                let iy = iy as usize;
                for xcol in 0..w {
                    let out_off = (y * w + xcol) * cout;
                    for kx in 0..3usize {
                        let ix = xcol as isize + kx as isize - 1;
                        if ix < 0 || ix >= w as isize {
                            continue;
                        }
                        let in_off = (iy * w + ix as usize) * cin;
                        let wbase = (ky * 3 + kx) * cin * cout;
                        for ci in 0..cin {
                            let xv = xs[in_off + ci];
                            if xv == 0.0 {
                                continue;
                            }
                            let wrow = &weights[wbase + ci * cout..wbase + (ci + 1) * cout];
                            let orow = &mut out_s[out_off..out_off + cout];
                            for (o, wv) in orow.iter_mut().zip(wrow.iter()) {
                                *o += xv * wv;
                            }
                        }
                    }
                }
            }
        }
    });
    out
}

/// Returns (grad_x, grad_w, grad_b).
pub fn conv3x3_backward(
    x: &Tensor4,
    weights: &[f64],
    out_ch: usize,
    grad_y: &Tensor4,
    parallel: bool,
) -> (Tensor4, Vec<f64>, Vec<f64>) {
    let (n, h, w, cin) = (x.n, x.h, x.w, x.c);
    let cout = out_ch;
    let in_len = x.sample_len();
    let out_len = h * w * cout;

    // Per-sample partials, reduced sequentially in index order so results do
    // not depend on the scheduling of the parallel pass.
    let partials = map_indexed(n, parallel, |s| {
        let xs = &x.data[s * in_len..(s + 1) * in_len];
        let gys = &grad_y.data[s * out_len..(s + 1) * out_len];
        let mut gx = vec![0.0; in_len];
        let mut gw = vec![0.0; 9 * cin * cout];
        let mut gb = vec![0.0; cout];
        for px in 0..h * w {
            for co in 0..cout {
                gb[co] += gys[px * cout + co];
            }
        }
        for y in 0..h {
            for ky in 0..3usize {
                let iy = y as isize + ky as isize - 1;
                if iy < 0 || iy >= h as isize {
                    continue;
                }
                let iy = iy as usize;
                for xcol in 0..w {
                    let gy_off = (y * w + xcol) * cout;
                    let gy_row = &gys[gy_off..gy_off + cout];
                    for kx in 0..3usize {
                        let ix = xcol as isize + kx as isize - 1;
                        if ix < 0 || ix >= w as isize {
                            continue;
                        }
                        let in_off = (iy * w + ix as usize) * cin;
                        let wbase = (ky * 3 + kx) * cin * cout;
                        for ci in 0..cin {
                            let wrow = &weights[wbase + ci * cout..wbase + (ci + 1) * cout];
                            let mut dot = 0.0;
                            for (g, wv) in gy_row.iter().zip(wrow.iter()) {
                                dot += g * wv;
                            }
                            gx[in_off + ci] += dot;
                            let xv = xs[in_off + ci];
                            if xv != 0.0 {
                                let gw_row = &mut gw[wbase + ci * cout..wbase + (ci + 1) * cout];
                                for (gwv, g) in gw_row.iter_mut().zip(gy_row.iter()) {
                                    *gwv += xv * g;
                                }
                            }
                        }
                    }
                }
            }
        }
        (gx, gw, gb)
    });

    let mut grad_x = Tensor4::zeros(n, h, w, cin);
    let mut grad_w = vec![0.0; 9 * cin * cout];
    let mut grad_b = vec![0.0; cout];
    for (s, (gx, gw, gb)) in partials.into_iter().enumerate() {
        grad_x.data[s * in_len..(s + 1) * in_len].copy_from_slice(&gx);
        for (a, b) in grad_w.iter_mut().zip(gw.iter()) {
            *a += b;
        }
        for (a, b) in grad_b.iter_mut().zip(gb.iter()) {
            *a += b;
        }
    }
    (grad_x, grad_w, grad_b)
}

// ---------------------------------------------------------------------------
// relu

pub fn relu_forward(x: &Tensor4) -> Tensor4 {
    let mut y = x.clone();
    for v in &mut y.data {
        if *v < 0.0 {
            *v = 0.0;
        }
    }
    y
}

pub fn relu_backward(x: &Tensor4, grad_y: &Tensor4) -> Tensor4 {
    let mut gx = grad_y.clone();
    for (g, &xv) in gx.data.iter_mut().zip(x.data.iter()) {
        if xv <= 0.0 {
            *g = 0.0;
        }
    }
    gx
}

// ---------------------------------------------------------------------------
// batch normalization

pub struct BnCache {
    pub xhat: Tensor4,
    pub inv_std: Vec<f64>,
}

/// Training-mode batchnorm. Returns the output, the cache needed for the
/// backward pass, and the biased batch mean/variance per channel.
pub fn batchnorm_forward_train(
    x: &Tensor4,
    gamma: &[f64],
    beta: &[f64],
) -> (Tensor4, BnCache, Vec<f64>, Vec<f64>) {
    let c = x.c;
    let count = (x.n * x.h * x.w) as f64;
    let mut mean = vec![0.0; c];
    let mut var = vec![0.0; c];
    for px in 0..x.data.len() / c {
        for ch in 0..c {
            mean[ch] += x.data[px * c + ch];
        }
    }
    for m in &mut mean {
        *m /= count;
    }
    for px in 0..x.data.len() / c {
        for ch in 0..c {
            let d = x.data[px * c + ch] - mean[ch];
            var[ch] += d * d;
        }
    }
    for v in &mut var {
        *v /= count;
    }
    let inv_std: Vec<f64> = var.iter().map(|&v| 1.0 / (v + BN_EPS).sqrt()).collect();
    let mut xhat = Tensor4::zeros(x.n, x.h, x.w, c);
    let mut y = Tensor4::zeros(x.n, x.h, x.w, c);
    for px in 0..x.data.len() / c {
        for ch in 0..c {
            let xh = (x.data[px * c + ch] - mean[ch]) * inv_std[ch];
            xhat.data[px * c + ch] = xh;
            y.data[px * c + ch] = gamma[ch] * xh + beta[ch];
        }
    }
    (y, BnCache { xhat, inv_std }, mean, var)
}

pub fn batchnorm_forward_infer(
    x: &Tensor4,
    gamma: &[f64],
    beta: &[f64],
    running_mean: &[f64],
    running_var: &[f64],
) -> Tensor4 {
    let c = x.c;
    let mut y = Tensor4::zeros(x.n, x.h, x.w, c);
    let inv_std: Vec<f64> = running_var.iter().map(|&v| 1.0 / (v + BN_EPS).sqrt()).collect();
    for px in 0..x.data.len() / c {
        for ch in 0..c {
            y.data[px * c + ch] =
                gamma[ch] * (x.data[px * c + ch] - running_mean[ch]) * inv_std[ch] + beta[ch];
        }
    }
    y
}

/// Returns (grad_x, grad_gamma, grad_beta).
pub fn batchnorm_backward(
    cache: &BnCache,
    gamma: &[f64],
    grad_y: &Tensor4,
) -> (Tensor4, Vec<f64>, Vec<f64>) {
    let c = grad_y.c;
    let count = (grad_y.n * grad_y.h * grad_y.w) as f64;
    let mut g_gamma = vec![0.0; c];
    let mut g_beta = vec![0.0; c];
    for px in 0..grad_y.data.len() / c {
        for ch in 0..c {
            let g = grad_y.data[px * c + ch];
            g_gamma[ch] += g * cache.xhat.data[px * c + ch];
            g_beta[ch] += g;
        }
    }
    let mut gx = Tensor4::zeros(grad_y.n, grad_y.h, grad_y.w, c);
    for px in 0..grad_y.data.len() / c {
        for ch in 0..c {
            let g = grad_y.data[px * c + ch];
            let xh = cache.xhat.data[px * c + ch];
            gx.data[px * c + ch] = gamma[ch] * cache.inv_std[ch]
                * (g - g_beta[ch] / count - xh * g_gamma[ch] / count);
        }
    }
    (gx, g_gamma, g_beta)
}

// ---------------------------------------------------------------------------
// 2x mean pooling

pub fn avgpool2_forward(x: &Tensor4) -> Tensor4 {
    let (n, h, w, c) = (x.n, x.h, x.w, x.c);
    let (oh, ow) = (h / 2, w / 2);
    let mut y = Tensor4::zeros(n, oh, ow, c);
    for s in 0..n {
        for oy in 0..oh {
            for ox in 0..ow {
                for ch in 0..c {
                    let mut acc = 0.0;
                    for dy in 0..2 {
                        for dx in 0..2 {
                            acc += x.data[((s * h + 2 * oy + dy) * w + 2 * ox + dx) * c + ch];
                        }
                    }
                    y.data[((s * oh + oy) * ow + ox) * c + ch] = acc / 4.0;
                }
            }
        }
    }
    y
}

pub fn avgpool2_backward(in_h: usize, in_w: usize, grad_y: &Tensor4) -> Tensor4 {
    let (n, oh, ow, c) = (grad_y.n, grad_y.h, grad_y.w, grad_y.c);
    let mut gx = Tensor4::zeros(n, in_h, in_w, c);
    for s in 0..n {
        for oy in 0..oh {
            for ox in 0..ow {
                for ch in 0..c {
                    let g = grad_y.data[((s * oh + oy) * ow + ox) * c + ch] / 4.0;
                    for dy in 0..2 {
                        for dx in 0..2 {
                            gx.data[((s * in_h + 2 * oy + dy) * in_w + 2 * ox + dx) * c + ch] = g;
                        }
                    }
                }
            }
        }
    }
    gx
}

// ---------------------------------------------------------------------------
// fully connected

/// Input is flattened per sample; output shape (n, 1, 1, out_dim).
pub fn fc_forward(x: &Tensor4, weights: &[f64], bias: &[f64], out_dim: usize) -> Tensor4 {
    let n = x.n;
    let mut y = Tensor4::zeros(n, 1, 1, out_dim);
    for s in 0..n {
        let xs = x.sample(s);
        let ys = &mut y.data[s * out_dim..(s + 1) * out_dim];
        ys.copy_from_slice(bias);
        for (i, &xv) in xs.iter().enumerate() {
            if xv == 0.0 {
                continue;
            }
            let wrow = &weights[i * out_dim..(i + 1) * out_dim];
            for (o, wv) in ys.iter_mut().zip(wrow.iter()) {
                *o += xv * wv;
            }
        }
    }
    y
}

/// Returns (grad_x, grad_w, grad_b); grad_x has the input's 4-D shape.
pub fn fc_backward(
    x: &Tensor4,
    weights: &[f64],
    out_dim: usize,
    grad_y: &Tensor4,
) -> (Tensor4, Vec<f64>, Vec<f64>) {
    let n = x.n;
    let in_dim = x.sample_len();
    let mut gx = Tensor4::zeros(x.n, x.h, x.w, x.c);
    let mut gw = vec![0.0; in_dim * out_dim];
    let mut gb = vec![0.0; out_dim];
    for s in 0..n {
        let xs = x.sample(s);
        let gys = &grad_y.data[s * out_dim..(s + 1) * out_dim];
        for (b, g) in gb.iter_mut().zip(gys.iter()) {
            *b += g;
        }
        let gxs = &mut gx.data[s * in_dim..(s + 1) * in_dim];
        for i in 0..in_dim {
            let wrow = &weights[i * out_dim..(i + 1) * out_dim];
            let mut dot = 0.0;
            for (g, wv) in gys.iter().zip(wrow.iter()) {
                dot += g * wv;
            }
            gxs[i] = dot;
            let xv = xs[i];
            if xv != 0.0 {
                let gw_row = &mut gw[i * out_dim..(i + 1) * out_dim];
                for (gwv, g) in gw_row.iter_mut().zip(gys.iter()) {
                    *gwv += xv * g;
                }
            }
        }
    }
    (gx, gw, gb)
}

// ---------------------------------------------------------------------------
// channel concatenation

pub fn concat_forward(x: &Tensor4, ext: &Tensor4) -> Tensor4 {
    debug_assert_eq!((x.n, x.h, x.w), (ext.n, ext.h, ext.w));
    let c = x.c + ext.c;
    let mut y = Tensor4::zeros(x.n, x.h, x.w, c);
    let pixels = x.n * x.h * x.w;
    for px in 0..pixels {
        y.data[px * c..px * c + x.c].copy_from_slice(&x.data[px * x.c..(px + 1) * x.c]);
        y.data[px * c + x.c..(px + 1) * c].copy_from_slice(&ext.data[px * ext.c..(px + 1) * ext.c]);
    }
    y
}

/// Gradient w.r.t. the image half only; the external maps are inputs, not
/// trainable activations.
pub fn concat_backward(first_ch: usize, grad_y: &Tensor4) -> Tensor4 {
    let c = grad_y.c;
    let mut gx = Tensor4::zeros(grad_y.n, grad_y.h, grad_y.w, first_ch);
    let pixels = grad_y.n * grad_y.h * grad_y.w;
    for px in 0..pixels {
        gx.data[px * first_ch..(px + 1) * first_ch]
            .copy_from_slice(&grad_y.data[px * c..px * c + first_ch]);
    }
    gx
}
