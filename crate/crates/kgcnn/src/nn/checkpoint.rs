//! Checkpoint files: magic "KGCN", version, layer spec, then parameters,
//! Adam moments and running statistics as little-endian 64-bit reals in
//! spec order.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::SeedableRng;

use crate::error::{Error, Result};

use super::engine::{LayerSpec, NetState};

const MAGIC: &[u8; 4] = b"KGCN";
const VERSION: u32 = 1;

fn layer_tag(l: &LayerSpec) -> (u8, u32, u32) {
    match *l {
        LayerSpec::Conv3x3 { in_ch, out_ch } => (0, in_ch as u32, out_ch as u32),
        LayerSpec::Relu => (1, 0, 0),
        LayerSpec::BatchNorm { ch } => (2, ch as u32, 0),
        LayerSpec::AvgPool2 => (3, 0, 0),
        LayerSpec::FullyConnected { in_dim, out_dim } => (4, in_dim as u32, out_dim as u32),
        LayerSpec::ResidualBegin => (5, 0, 0),
        LayerSpec::ResidualEnd => (6, 0, 0),
        LayerSpec::ConcatExternal { ch } => (7, ch as u32, 0),
    }
}

fn layer_from_tag(tag: u8, a: u32, b: u32) -> Result<LayerSpec> {
    Ok(match tag {
        0 => LayerSpec::Conv3x3 { in_ch: a as usize, out_ch: b as usize },
        1 => LayerSpec::Relu,
        2 => LayerSpec::BatchNorm { ch: a as usize },
        3 => LayerSpec::AvgPool2,
        4 => LayerSpec::FullyConnected { in_dim: a as usize, out_dim: b as usize },
        5 => LayerSpec::ResidualBegin,
        6 => LayerSpec::ResidualEnd,
        7 => LayerSpec::ConcatExternal { ch: a as usize },
        t => return Err(Error::Format(format!("unknown layer tag {t}"))),
    })
}

pub fn save_checkpoint(spec: &[LayerSpec], state: &NetState, path: &Path) -> Result<()> {
    if spec.len() != state.layers.len() {
        return Err(Error::shape("spec/state mismatch".to_string()));
    }
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    w.write_all(&(spec.len() as u32).to_le_bytes())?;
    for l in spec {
        let (tag, a, b) = layer_tag(l);
        w.write_all(&[tag])?;
        w.write_all(&a.to_le_bytes())?;
        w.write_all(&b.to_le_bytes())?;
    }
    w.write_all(&state.step.to_le_bytes())?;
    for ls in &state.layers {
        for p in &ls.params {
            for v in p.value.iter().chain(p.m.iter()).chain(p.v.iter()) {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        for r in &ls.running {
            for v in r {
                w.write_all(&v.to_le_bytes())?;
            }
        }
    }
    w.flush()?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<(Vec<LayerSpec>, NetState)> {
    let mut r = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(Error::Format("not a KGCN checkpoint".to_string()));
    }
    let mut u32buf = [0u8; 4];
    r.read_exact(&mut u32buf)?;
    let version = u32::from_le_bytes(u32buf);
    if version != VERSION {
        return Err(Error::Format(format!("unsupported checkpoint version {version}")));
    }
    r.read_exact(&mut u32buf)?;
    let n_layers = u32::from_le_bytes(u32buf) as usize;
    let mut spec = Vec::with_capacity(n_layers);
    for _ in 0..n_layers {
        let mut tag = [0u8; 1];
        r.read_exact(&mut tag)?;
        r.read_exact(&mut u32buf)?;
        let a = u32::from_le_bytes(u32buf);
        r.read_exact(&mut u32buf)?;
        let b = u32::from_le_bytes(u32buf);
        spec.push(layer_from_tag(tag[0], a, b)?);
    }
    let mut u64buf = [0u8; 8];
    r.read_exact(&mut u64buf)?;
    let step = u64::from_le_bytes(u64buf);

    // Rebuild the state skeleton from the spec, then fill values in order.
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);
    let mut state = super::engine::init_state(&spec, &mut rng);
    state.step = step;
    let mut read_into = |buf: &mut [f64]| -> Result<()> {
        let mut b = [0u8; 8];
        for v in buf.iter_mut() {
            r.read_exact(&mut b)?;
            *v = f64::from_le_bytes(b);
        }
        Ok(())
    };
    for ls in &mut state.layers {
        for p in &mut ls.params {
            read_into(&mut p.value)?;
            read_into(&mut p.m)?;
            read_into(&mut p.v)?;
        }
        for rvec in &mut ls.running {
            read_into(rvec)?;
        }
    }
    Ok((spec, state))
}
