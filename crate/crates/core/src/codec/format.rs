//! `CDLZ` compressed-model files.
//!
//! Little-endian layout:
//!
//! | field            | type          |
//! |------------------|---------------|
//! | magic `CDLZ`     | 4 bytes       |
//! | version          | u32           |
//! | nominal bits b   | u8            |
//! | layer count      | u32           |
//! | per layer:       |               |
//! | · step           | f64           |
//! | · signedness     | u8 (0 signed, 1 unsigned) |
//! | · bits           | u8            |
//! | · symbol count   | u64           |
//! | · codebook size  | u32           |
//! | · codebook       | (i32 symbol, u8 length) pairs |
//! | · payload bits   | u64           |
//! | · payload        | ⌈bits/8⌉ bytes, MSB-first |
//! | CRC32            | u32 over all preceding bytes |

use std::path::Path;

use crate::error::{Error, Result};
use crate::quant::{QuantGrid, Signedness};
use crate::wire::{Reader, Writer};

use super::huffman::{build_codebook, decode_layer, encode_layer, Codebook};

pub const MAGIC: &[u8; 4] = b"CDLZ";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct CompressedLayer {
    pub grid: QuantGrid,
    pub count: usize,
    pub codebook: Codebook,
    pub payload: Vec<u8>,
    pub payload_bits: u64,
}

impl CompressedLayer {
    /// Codes one layer's symbols with a codebook built from their histogram.
    pub fn encode(grid: QuantGrid, symbols: &[i32]) -> Result<Self> {
        for &s in symbols {
            if s < grid.min_index() || s > grid.max_index() {
                return Err(Error::Input(format!(
                    "symbol {s} outside the {}-bit grid",
                    grid.bits()
                )));
            }
        }
        let codebook = build_codebook(symbols)?;
        let (payload, payload_bits) = encode_layer(symbols, &codebook)?;
        Ok(Self {
            grid,
            count: symbols.len(),
            codebook,
            payload,
            payload_bits,
        })
    }

    pub fn symbols(&self) -> Result<Vec<i32>> {
        decode_layer(&self.payload, self.payload_bits, &self.codebook, self.count)
    }

    pub fn values(&self) -> Result<Vec<f64>> {
        Ok(self
            .symbols()?
            .into_iter()
            .map(|s| s as f64 * self.grid.step())
            .collect())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CompressedModel {
    pub bits: u8,
    pub layers: Vec<CompressedLayer>,
}

/// Payload-only averages, with side information reported separately.
#[derive(Clone, Copy, Debug, Default, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct BitsSummary {
    pub symbols: u64,
    pub payload_bits: u64,
    pub overhead_bits: u64,
    /// `Σ payload bits / Σ count`.
    pub avg_bits: f64,
    /// Same, including codebook tables.
    pub avg_bits_with_overhead: f64,
}

/// `Σ_l |v_l|·b_l / Σ_l |v_l|` over `(count, payload_bits, overhead_bits)`.
pub fn summarize(layers: impl IntoIterator<Item = (u64, u64, u64)>) -> BitsSummary {
    let mut s = BitsSummary::default();
    for (n, bits, over) in layers {
        s.symbols += n;
        s.payload_bits += bits;
        s.overhead_bits += over;
    }
    if s.symbols > 0 {
        s.avg_bits = s.payload_bits as f64 / s.symbols as f64;
        s.avg_bits_with_overhead = (s.payload_bits + s.overhead_bits) as f64 / s.symbols as f64;
    }
    s
}

impl CompressedModel {
    pub fn metrics(&self) -> BitsSummary {
        summarize(self.layers.iter().map(|l| {
            (
                l.count as u64,
                l.payload_bits,
                8 * l.codebook.serialized_bytes() as u64,
            )
        }))
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = Writer::new();
        w.bytes(MAGIC);
        w.u32(VERSION);
        w.u8(self.bits);
        w.u32(self.layers.len() as u32);
        for l in &self.layers {
            w.f64(l.grid.step());
            w.u8(match l.grid.signedness() {
                Signedness::Signed => 0,
                Signedness::Unsigned => 1,
            });
            w.u8(l.grid.bits());
            w.u64(l.count as u64);
            w.u32(l.codebook.len() as u32);
            for &(s, len) in l.codebook.entries() {
                w.i32(s);
                w.u8(len);
            }
            w.u64(l.payload_bits);
            w.bytes(&l.payload);
        }
        w.finish()
    }

    /// Parses and fully decodes every layer.
    pub fn from_bytes(data: &[u8]) -> Result<Self> {
        let mut r = Reader::open(data)?;
        if r.bytes(4)? != MAGIC {
            return Err(Error::codec(0, "not a compressed model (bad magic)"));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::codec(4, format!("unsupported version {version}")));
        }
        let bits = r.u8()?;
        let n_layers = r.u32()? as usize;
        let mut layers = Vec::new();
        for li in 0..n_layers {
            let at = r.offset();
            let step = r.f64()?;
            let signedness = match r.u8()? {
                0 => Signedness::Signed,
                1 => Signedness::Unsigned,
                v => return Err(Error::codec(at + 8, format!("bad signedness {v}"))),
            };
            let lbits = r.u8()?;
            let grid = QuantGrid::new(lbits, step, signedness)
                .map_err(|e| Error::codec(at, format!("layer {li}: {e}")))?;
            let count_at = r.offset();
            let count = r.u64()?;
            let book_at = r.offset();
            let n_entries = r.u32()? as usize;
            if n_entries > r.remaining() / 5 {
                return Err(Error::codec(book_at, "codebook larger than file"));
            }
            let mut pairs = Vec::with_capacity(n_entries);
            for _ in 0..n_entries {
                pairs.push((r.i32()?, r.u8()?));
            }
            let codebook = Codebook::from_lengths(&pairs)
                .map_err(|e| Error::codec(book_at, format!("layer {li}: {e}")))?;
            let bits_at = r.offset();
            let payload_bits = r.u64()?;
            let n_bytes = payload_bits.div_ceil(8);
            if n_bytes > r.remaining() as u64 {
                return Err(Error::codec(bits_at, "payload longer than file"));
            }
            let payload_at = r.offset();
            let payload = r.bytes(n_bytes as usize)?.to_vec();
            // Every codeword takes at least one bit.
            if count > payload_bits {
                return Err(Error::codec(count_at, format!("{count} symbols in {payload_bits} bits")));
            }
            let layer = CompressedLayer {
                grid,
                count: count as usize,
                codebook,
                payload,
                payload_bits,
            };
            let symbols = layer
                .symbols()
                .map_err(|e| Error::codec(payload_at, format!("layer {li}: {e}")))?;
            if let Some(s) = symbols.iter().find(|&&s| s < grid.min_index() || s > grid.max_index()) {
                return Err(Error::codec(book_at, format!("layer {li}: symbol {s} off grid")));
            }
            layers.push(layer);
        }
        r.expect_end()?;
        Ok(Self { bits, layers })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        crate::util::write_atomic(path, &self.to_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> CompressedModel {
        let g1 = QuantGrid::signed(4, 0.125).unwrap();
        let g2 = QuantGrid::unsigned(3, 0.5).unwrap();
        CompressedModel {
            bits: 4,
            layers: vec![
                CompressedLayer::encode(g1, &[-8, 0, 0, 1, 7, 0, -1, 0]).unwrap(),
                CompressedLayer::encode(g2, &[3; 17]).unwrap(),
            ],
        }
    }

    #[test]
    fn round_trip_and_determinism() {
        let m = sample();
        let bytes = m.to_bytes();
        assert_eq!(bytes, sample().to_bytes());
        let back = CompressedModel::from_bytes(&bytes).unwrap();
        assert_eq!(back.layers[0].symbols().unwrap(), vec![-8, 0, 0, 1, 7, 0, -1, 0]);
        assert_eq!(back.layers[1].values().unwrap(), vec![1.5; 17]);
        assert_eq!(back.to_bytes(), bytes);
        assert_eq!(back.metrics(), m.metrics());
    }

    #[test]
    fn off_grid_symbols_rejected() {
        let g = QuantGrid::signed(2, 1.0).unwrap();
        assert!(CompressedLayer::encode(g, &[2]).is_err());
    }

    #[test]
    fn corruption_reports_offset() {
        let bytes = sample().to_bytes();
        let mut bad = bytes.clone();
        let n = bad.len();
        bad[n - 6] ^= 1;
        match CompressedModel::from_bytes(&bad) {
            Err(Error::Codec { offset, .. }) => assert_eq!(offset, n - 4),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn weighted_mean_of_layers() {
        let s = summarize([(100, 200, 0), (100, 400, 0)]);
        assert_eq!(s.avg_bits, 3.0);
    }
}
