//! Layer chains: specs, state, forward/backward, loss.

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};

use super::layers;
use super::tensor::Tensor4;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LayerSpec {
    Conv3x3 { in_ch: usize, out_ch: usize },
    Relu,
    BatchNorm { ch: usize },
    AvgPool2,
    FullyConnected { in_dim: usize, out_dim: usize },
    ResidualBegin,
    ResidualEnd,
    ConcatExternal { ch: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Infer,
}

/// One trainable array together with its Adam moments.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamTensor {
    pub value: Vec<f64>,
    pub m: Vec<f64>,
    pub v: Vec<f64>,
}

impl ParamTensor {
    fn new(value: Vec<f64>) -> Self {
        let len = value.len();
        ParamTensor { value, m: vec![0.0; len], v: vec![0.0; len] }
    }
}

/// Per-layer trainable parameters plus non-trainable running statistics.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerState {
    pub params: Vec<ParamTensor>,
    pub running: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct NetState {
    pub layers: Vec<LayerState>,
    pub step: u64,
}

/// Gradients aligned with `NetState`: `[layer][param][element]`.
pub type Gradients = Vec<Vec<Vec<f64>>>;

enum LayerCache {
    Conv { input: Tensor4 },
    Relu { input: Tensor4 },
    BatchNorm(layers::BnCache),
    AvgPool { in_h: usize, in_w: usize },
    Fc { input: Tensor4 },
    Concat { first_ch: usize },
    None,
}

/// Activation record from a training-mode forward pass.
pub struct Tape {
    caches: Vec<LayerCache>,
}

/// He-normal init for conv/fc, unit scale / zero shift for batchnorm.
pub fn init_state(spec: &[LayerSpec], rng: &mut impl Rng) -> NetState {
    let layers = spec
        .iter()
        .map(|l| match *l {
            LayerSpec::Conv3x3 { in_ch, out_ch } => {
                let std = (2.0 / (9 * in_ch) as f64).sqrt();
                let normal = Normal::new(0.0, std).unwrap();
                let w = (0..9 * in_ch * out_ch).map(|_| normal.sample(rng)).collect();
                LayerState {
                    params: vec![ParamTensor::new(w), ParamTensor::new(vec![0.0; out_ch])],
                    running: vec![],
                }
            }
            LayerSpec::FullyConnected { in_dim, out_dim } => {
                let std = (2.0 / in_dim as f64).sqrt();
                let normal = Normal::new(0.0, std).unwrap();
                let w = (0..in_dim * out_dim).map(|_| normal.sample(rng)).collect();
                LayerState {
                    params: vec![ParamTensor::new(w), ParamTensor::new(vec![0.0; out_dim])],
                    running: vec![],
                }
            }
            LayerSpec::BatchNorm { ch } => LayerState {
                params: vec![ParamTensor::new(vec![1.0; ch]), ParamTensor::new(vec![0.0; ch])],
                running: vec![vec![0.0; ch], vec![1.0; ch]],
            },
            _ => LayerState { params: vec![], running: vec![] },
        })
        .collect();
    NetState { layers, step: 0 }
}

/// Number of trainable parameters, a pure function of the spec.
pub fn param_count(spec: &[LayerSpec]) -> usize {
    spec.iter()
        .map(|l| match *l {
            LayerSpec::Conv3x3 { in_ch, out_ch } => 9 * in_ch * out_ch + out_ch,
            LayerSpec::FullyConnected { in_dim, out_dim } => in_dim * out_dim + out_dim,
            LayerSpec::BatchNorm { ch } => 2 * ch,
            _ => 0,
        })
        .sum()
}

fn validate(spec: &[LayerSpec], state: &NetState, external: Option<&Tensor4>) -> Result<()> {
    if spec.len() != state.layers.len() {
        return Err(Error::shape("spec/state layer count mismatch".to_string()));
    }
    let has_concat = spec.iter().any(|l| matches!(l, LayerSpec::ConcatExternal { .. }));
    if has_concat != external.is_some() {
        return Err(Error::invalid(
            "external maps must be provided exactly when the spec has a concat layer",
        ));
    }
    let mut depth = 0i32;
    for l in spec {
        match l {
            LayerSpec::ResidualBegin => depth += 1,
            LayerSpec::ResidualEnd => {
                depth -= 1;
                if depth < 0 {
                    return Err(Error::invalid("residual_end without matching begin"));
                }
            }
            _ => {}
        }
    }
    if depth != 0 {
        return Err(Error::invalid("unclosed residual block"));
    }
    Ok(())
}

/// Run the chain. `Train` mode records a tape and updates batchnorm running
/// statistics; `Infer` mode uses the stored statistics and returns no tape.
pub fn forward(
    spec: &[LayerSpec],
    state: &mut NetState,
    x: &Tensor4,
    external: Option<&Tensor4>,
    mode: Mode,
    parallel: bool,
) -> Result<(Tensor4, Option<Tape>)> {
    validate(spec, state, external)?;
    let mut caches: Vec<LayerCache> = Vec::with_capacity(spec.len());
    let mut cur = x.clone();
    let mut residual_stack: Vec<Tensor4> = Vec::new();
    for (li, layer) in spec.iter().enumerate() {
        let ls = &mut state.layers[li];
        match *layer {
            LayerSpec::Conv3x3 { in_ch, out_ch } => {
                if cur.c != in_ch {
                    return Err(Error::shape(format!(
                        "conv layer {li}: input has {} channels, spec says {in_ch}",
                        cur.c
                    )));
                }
                let y = layers::conv3x3_forward(
                    &cur,
                    &ls.params[0].value,
                    &ls.params[1].value,
                    out_ch,
                    parallel,
                );
                caches.push(LayerCache::Conv { input: std::mem::replace(&mut cur, y) });
            }
            LayerSpec::Relu => {
                let y = layers::relu_forward(&cur);
                caches.push(LayerCache::Relu { input: std::mem::replace(&mut cur, y) });
            }
            LayerSpec::BatchNorm { ch } => {
                if cur.c != ch {
                    return Err(Error::shape(format!("batchnorm layer {li} channel mismatch")));
                }
                match mode {
                    Mode::Train => {
                        if cur.n < 2 {
                            return Err(Error::invalid(
                                "batchnorm training mode needs batch >= 2",
                            ));
                        }
                        let (y, cache, mean, var) = layers::batchnorm_forward_train(
                            &cur,
                            &ls.params[0].value,
                            &ls.params[1].value,
                        );
                        for (r, &b) in ls.running[0].iter_mut().zip(mean.iter()) {
                            *r = layers::BN_MOMENTUM * *r + (1.0 - layers::BN_MOMENTUM) * b;
                        }
                        for (r, &b) in ls.running[1].iter_mut().zip(var.iter()) {
                            *r = layers::BN_MOMENTUM * *r + (1.0 - layers::BN_MOMENTUM) * b;
                        }
                        caches.push(LayerCache::BatchNorm(cache));
                        cur = y;
                    }
                    Mode::Infer => {
                        cur = layers::batchnorm_forward_infer(
                            &cur,
                            &ls.params[0].value,
                            &ls.params[1].value,
                            &ls.running[0],
                            &ls.running[1],
                        );
                        caches.push(LayerCache::None);
                    }
                }
            }
            LayerSpec::AvgPool2 => {
                if cur.h % 2 != 0 || cur.w % 2 != 0 {
                    return Err(Error::shape("avgpool2 needs even spatial dims".to_string()));
                }
                let (in_h, in_w) = (cur.h, cur.w);
                cur = layers::avgpool2_forward(&cur);
                caches.push(LayerCache::AvgPool { in_h, in_w });
            }
            LayerSpec::FullyConnected { in_dim, out_dim } => {
                if cur.sample_len() != in_dim {
                    return Err(Error::shape(format!(
                        "fc layer {li}: input size {} != {in_dim}",
                        cur.sample_len()
                    )));
                }
                let y = layers::fc_forward(&cur, &ls.params[0].value, &ls.params[1].value, out_dim);
                caches.push(LayerCache::Fc { input: std::mem::replace(&mut cur, y) });
            }
            LayerSpec::ResidualBegin => {
                residual_stack.push(cur.clone());
                caches.push(LayerCache::None);
            }
            LayerSpec::ResidualEnd => {
                let saved = residual_stack
                    .pop()
                    .ok_or_else(|| Error::invalid("residual_end without begin"))?;
                if !saved.same_shape(&cur) {
                    return Err(Error::shape("residual join shape mismatch".to_string()));
                }
                for (a, b) in cur.data.iter_mut().zip(saved.data.iter()) {
                    *a += b;
                }
                caches.push(LayerCache::None);
            }
            LayerSpec::ConcatExternal { ch } => {
                let ext = external.ok_or_else(|| Error::invalid("missing external maps"))?;
                if ext.c != ch {
                    return Err(Error::shape(format!(
                        "external maps have {} channels, spec says {ch}",
                        ext.c
                    )));
                }
                if (ext.n, ext.h, ext.w) != (cur.n, cur.h, cur.w) {
                    return Err(Error::shape("external map spatial shape mismatch".to_string()));
                }
                let first_ch = cur.c;
                cur = layers::concat_forward(&cur, ext);
                caches.push(LayerCache::Concat { first_ch });
            }
        }
    }
    let tape = match mode {
        Mode::Train => Some(Tape { caches }),
        Mode::Infer => None,
    };
    Ok((cur, tape))
}

/// Reverse pass over a recorded tape. Returns parameter gradients and the
/// gradient with respect to the chain input.
pub fn backward(
    spec: &[LayerSpec],
    state: &NetState,
    tape: &Tape,
    grad_out: &Tensor4,
    parallel: bool,
) -> Result<(Gradients, Tensor4)> {
    if spec.len() != tape.caches.len() {
        return Err(Error::shape("tape/spec length mismatch".to_string()));
    }
    let mut grads: Gradients = state
        .layers
        .iter()
        .map(|ls| ls.params.iter().map(|p| vec![0.0; p.value.len()]).collect())
        .collect();
    let mut cur = grad_out.clone();
    let mut residual_grads: Vec<Tensor4> = Vec::new();
    for li in (0..spec.len()).rev() {
        let ls = &state.layers[li];
        match (&spec[li], &tape.caches[li]) {
            (LayerSpec::Conv3x3 { out_ch, .. }, LayerCache::Conv { input }) => {
                let (gx, gw, gb) =
                    layers::conv3x3_backward(input, &ls.params[0].value, *out_ch, &cur, parallel);
                grads[li][0] = gw;
                grads[li][1] = gb;
                cur = gx;
            }
            (LayerSpec::Relu, LayerCache::Relu { input }) => {
                cur = layers::relu_backward(input, &cur);
            }
            (LayerSpec::BatchNorm { .. }, LayerCache::BatchNorm(cache)) => {
                let (gx, gg, gb) = layers::batchnorm_backward(cache, &ls.params[0].value, &cur);
                grads[li][0] = gg;
                grads[li][1] = gb;
                cur = gx;
            }
            (LayerSpec::AvgPool2, LayerCache::AvgPool { in_h, in_w }) => {
                cur = layers::avgpool2_backward(*in_h, *in_w, &cur);
            }
            (LayerSpec::FullyConnected { out_dim, .. }, LayerCache::Fc { input }) => {
                let (gx, gw, gb) = layers::fc_backward(input, &ls.params[0].value, *out_dim, &cur);
                grads[li][0] = gw;
                grads[li][1] = gb;
                cur = gx;
            }
            (LayerSpec::ResidualBegin, _) => {
                let extra = residual_grads
                    .pop()
                    .ok_or_else(|| Error::invalid("residual gradient stack underflow"))?;
                for (a, b) in cur.data.iter_mut().zip(extra.data.iter()) {
                    *a += b;
                }
            }
            (LayerSpec::ResidualEnd, _) => {
                residual_grads.push(cur.clone());
            }
            (LayerSpec::ConcatExternal { .. }, LayerCache::Concat { first_ch }) => {
                cur = layers::concat_backward(*first_ch, &cur);
            }
            _ => return Err(Error::invalid("tape does not match spec")),
        }
    }
    Ok((grads, cur))
}

/// Mean over the batch of the squared Frobenius norm of `pred - target`.
/// Returns the scalar loss and its gradient `2 (pred - target) / batch`.
pub fn frobenius_loss(pred: &Tensor4, target: &Tensor4) -> Result<(f64, Tensor4)> {
    if !pred.same_shape(target) {
        return Err(Error::shape("loss operands differ in shape".to_string()));
    }
    let batch = pred.n as f64;
    let mut loss = 0.0;
    let mut grad = Tensor4::zeros(pred.n, pred.h, pred.w, pred.c);
    for (g, (p, t)) in grad.data.iter_mut().zip(pred.data.iter().zip(target.data.iter())) {
        let d = p - t;
        loss += d * d;
        *g = 2.0 * d / batch;
    }
    Ok((loss / batch, grad))
}
