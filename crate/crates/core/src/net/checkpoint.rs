//! Binary model checkpoints.
//!
//! Layout (little-endian): magic `CDLM`, version `u32`, input length `u64`,
//! activation top-k `u64` (0 = none), layer count `u32`, then per layer a
//! kind record, an optional quantizer record, the 8-bit exemption flag and
//! the master weights. A CRC32 of everything before it closes the file.

use std::path::Path;

use crate::error::{Error, Result};
use crate::wire::{Reader, Writer};

use super::{Conv2dShape, Layer, LayerKind, LayerQuantParams, Model, Padding, Tensor};

pub const MAGIC: &[u8; 4] = b"CDLM";
pub const VERSION: u32 = 1;

const KIND_DENSE: u8 = 0;
const KIND_CONV: u8 = 1;
const KIND_RELU: u8 = 2;
const KIND_FLATTEN: u8 = 3;

pub fn encode(model: &Model) -> Vec<u8> {
    let mut w = Writer::new();
    w.bytes(MAGIC);
    w.u32(VERSION);
    w.u64(model.input_len() as u64);
    w.u64(model.act_topk().unwrap_or(0) as u64);
    w.u32(model.layers().len() as u32);
    for layer in model.layers() {
        match layer.kind {
            LayerKind::Dense { inputs, outputs } => {
                w.u8(KIND_DENSE);
                w.u64(inputs as u64);
                w.u64(outputs as u64);
            }
            LayerKind::Conv2d(c) => {
                w.u8(KIND_CONV);
                for v in [c.in_channels, c.out_channels, c.kernel, c.stride, c.in_h, c.in_w] {
                    w.u64(v as u64);
                }
                w.u8(match c.padding {
                    Padding::Valid => 0,
                    Padding::Same => 1,
                });
            }
            LayerKind::Relu => w.u8(KIND_RELU),
            LayerKind::Flatten => w.u8(KIND_FLATTEN),
        }
        match &layer.quant {
            None => w.u8(0),
            Some(qp) => {
                w.u8(1);
                for v in [qp.log_q, qp.log_s, qp.log_alpha, qp.log_beta] {
                    w.f64(v);
                }
                w.u8(qp.weight_bits);
                w.u8(qp.act_bits);
            }
        }
        w.u8(layer.exempt_8bit as u8);
        w.u32(layer.weights.shape().len() as u32);
        for &d in layer.weights.shape() {
            w.u64(d as u64);
        }
        w.u64(layer.weights.len() as u64);
        for &v in layer.weights.data() {
            w.f64(v);
        }
    }
    w.finish()
}

fn flag(r: &mut Reader<'_>) -> Result<bool> {
    let at = r.offset();
    match r.u8()? {
        0 => Ok(false),
        1 => Ok(true),
        v => Err(Error::codec(at, format!("invalid flag byte {v}"))),
    }
}

fn dim(r: &mut Reader<'_>) -> Result<usize> {
    let at = r.offset();
    let v = r.u64()?;
    usize::try_from(v)
        .ok()
        .filter(|&v| v <= u32::MAX as usize)
        .ok_or_else(|| Error::codec(at, format!("dimension {v} out of range")))
}

pub fn decode(data: &[u8]) -> Result<Model> {
    let mut r = Reader::open(data)?;
    if r.bytes(4)? != MAGIC {
        return Err(Error::codec(0, "not a model checkpoint (bad magic)"));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(Error::codec(4, format!("unsupported checkpoint version {version}")));
    }
    let input_len = dim(&mut r)?;
    let topk = dim(&mut r)?;
    let n_layers = r.u32()? as usize;
    let mut layers = Vec::new();
    for _ in 0..n_layers {
        let at = r.offset();
        let kind = match r.u8()? {
            KIND_DENSE => LayerKind::Dense {
                inputs: dim(&mut r)?,
                outputs: dim(&mut r)?,
            },
            KIND_CONV => {
                let mut v = [0usize; 6];
                for x in &mut v {
                    *x = dim(&mut r)?;
                }
                let padding = if flag(&mut r)? { Padding::Same } else { Padding::Valid };
                LayerKind::Conv2d(Conv2dShape {
                    in_channels: v[0],
                    out_channels: v[1],
                    kernel: v[2],
                    stride: v[3],
                    padding,
                    in_h: v[4],
                    in_w: v[5],
                })
            }
            KIND_RELU => LayerKind::Relu,
            KIND_FLATTEN => LayerKind::Flatten,
            t => return Err(Error::codec(at, format!("unknown layer kind {t}"))),
        };
        let quant = if flag(&mut r)? {
            let at = r.offset();
            let logs = [r.f64()?, r.f64()?, r.f64()?, r.f64()?];
            if logs.iter().any(|v| !v.is_finite()) {
                return Err(Error::codec(at, "non-finite quantizer parameter"));
            }
            Some(LayerQuantParams {
                log_q: logs[0],
                log_s: logs[1],
                log_alpha: logs[2],
                log_beta: logs[3],
                weight_bits: r.u8()?,
                act_bits: r.u8()?,
            })
        } else {
            None
        };
        let exempt_8bit = flag(&mut r)?;
        let rank = r.u32()? as usize;
        if rank > 8 {
            return Err(Error::codec(r.offset(), format!("tensor rank {rank} too large")));
        }
        let shape = (0..rank).map(|_| dim(&mut r)).collect::<Result<Vec<_>>>()?;
        let n = r.len(8)?;
        let data = (0..n).map(|_| r.f64()).collect::<Result<Vec<_>>>()?;
        let weights = Tensor::new(shape, data).map_err(|e| Error::codec(r.offset(), e.to_string()))?;
        layers.push(Layer {
            kind,
            weights,
            quant,
            exempt_8bit,
        });
    }
    r.expect_end()?;
    Model::from_layers(input_len, layers, (topk > 0).then_some(topk))
}

pub fn save(model: &Model, path: &Path) -> Result<()> {
    crate::util::write_atomic(path, &encode(model))
}

pub fn load(path: &Path) -> Result<Model> {
    decode(&std::fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::net::arch;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn model() -> Model {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut m = Model::init(784, &arch::mnist_cnn(), Some(5), &mut rng).unwrap();
        m.set_uniform_quant(LayerQuantParams::new(0.05, 0.2, 500.0, 500.0, 4, 4).unwrap());
        m.stage_mut(0).exempt_8bit = true;
        m
    }

    #[test]
    fn round_trip_is_exact() {
        let m = model();
        assert_eq!(decode(&encode(&m)).unwrap(), m);
    }

    #[test]
    fn any_flipped_byte_is_rejected() {
        let bytes = encode(&model());
        for i in [0, 5, 17, bytes.len() / 2, bytes.len() - 1] {
            let mut bad = bytes.clone();
            bad[i] ^= 0x10;
            assert!(matches!(decode(&bad), Err(Error::Codec { .. })), "byte {i}");
        }
        assert!(decode(&bytes[..bytes.len() - 3]).is_err());
    }
}
