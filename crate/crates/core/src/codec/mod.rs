//! Entropy coding of quantized symbol streams and the average-bits metrics.

mod bits;
mod format;
mod huffman;

pub use bits::{BitReader, BitWriter};
pub use format::{summarize, BitsSummary, CompressedLayer, CompressedModel, MAGIC, VERSION};
pub use huffman::{build_codebook, decode_layer, encode_layer, histogram, Codebook, MAX_CODE_LEN};

use rand::Rng;

use crate::error::{Error, Result};
use crate::net::{Model, Mode};

/// Samples every weight through `Q_p` and Huffman-codes each layer.
pub fn compress_model<R: Rng + ?Sized>(model: &Model, bits: u8, rng: &mut R) -> Result<CompressedModel> {
    let snap = model.quantize_weights(Mode::Cdl, rng)?;
    let layers = snap
        .layers
        .iter()
        .enumerate()
        .map(|(l, sl)| CompressedLayer::encode(model.quant(l)?.weight_grid()?, &sl.symbols))
        .collect::<Result<Vec<_>>>()?;
    Ok(CompressedModel { bits, layers })
}

/// Codes the activations produced by inference over `inputs` (one sample
/// per entry) with `Q_p` quantization, one codebook per activation layer.
pub fn activation_bits<R: Rng + ?Sized>(model: &Model, inputs: &[&[f64]], rng: &mut R) -> Result<BitsSummary> {
    if inputs.is_empty() {
        return Err(Error::Empty("activation batch"));
    }
    let snap = model.quantize_weights(Mode::Cdl, rng)?;
    let mut streams: Vec<Vec<i32>> = vec![Vec::new(); model.act_widths().len()];
    for x in inputs {
        let trace = model.forward(&snap, x, 0, rng)?;
        for (s, act) in streams.iter_mut().zip(&trace.acts) {
            s.extend_from_slice(&act.symbols);
        }
    }
    let mut layers = Vec::with_capacity(streams.len());
    for (l, s) in streams.iter().enumerate() {
        let layer = CompressedLayer::encode(model.quant(l)?.act_grid()?, s)?;
        layers.push((
            layer.count as u64,
            layer.payload_bits,
            8 * layer.codebook.serialized_bytes() as u64,
        ));
    }
    Ok(summarize(layers))
}
