//! Canonical Huffman codes over grid-index symbols.

use std::cmp::Reverse;
use std::collections::{BTreeMap, BinaryHeap, HashMap};

use crate::error::{Error, Result};

use super::bits::{BitReader, BitWriter};

pub const MAX_CODE_LEN: u8 = 64;

/// Canonical prefix code. Codewords are implied by `(symbol, length)` pairs
/// sorted by length, then symbol.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Codebook {
    /// `(symbol, code length)` in canonical order.
    entries: Vec<(i32, u8)>,
    codes: HashMap<i32, (u64, u8)>,
    /// Source histogram, ascending by symbol. Empty for deserialized books.
    histogram: Vec<(i32, u64)>,
    /// Per length: (first code, first entry index, count).
    table: Vec<(u64, usize, usize)>,
}

/// Histogram of a symbol stream, ascending by symbol.
pub fn histogram(symbols: &[i32]) -> Vec<(i32, u64)> {
    let mut h = BTreeMap::new();
    for &s in symbols {
        *h.entry(s).or_insert(0u64) += 1;
    }
    h.into_iter().collect()
}

/// Huffman code lengths for `freqs` (ascending symbols, all counts > 0).
/// Among equal weights the subtree holding the lower symbol is merged first.
fn code_lengths(freqs: &[(i32, u64)]) -> Result<Vec<u8>> {
    let n = freqs.len();
    if n == 1 {
        return Ok(vec![1]);
    }
    let mut parent = vec![usize::MAX; 2 * n - 1];
    let mut heap = BinaryHeap::with_capacity(n);
    for (i, &(_, f)) in freqs.iter().enumerate() {
        heap.push(Reverse((f as u128, i, i)));
    }
    let mut next = n;
    while heap.len() > 1 {
        let Reverse((fa, ka, a)) = heap.pop().expect("len > 1");
        let Reverse((fb, kb, b)) = heap.pop().expect("len > 1");
        parent[a] = next;
        parent[b] = next;
        heap.push(Reverse((fa + fb, ka.min(kb), next)));
        next += 1;
    }
    let mut depth = vec![0u32; 2 * n - 1];
    for node in (0..2 * n - 2).rev() {
        depth[node] = depth[parent[node]] + 1;
    }
    depth[..n]
        .iter()
        .map(|&d| {
            u8::try_from(d)
                .ok()
                .filter(|&d| d <= MAX_CODE_LEN)
                .ok_or_else(|| Error::Consistency(format!("code length {d} exceeds {MAX_CODE_LEN}")))
        })
        .collect()
}

impl Codebook {
    /// Builds the canonical code for an empirical histogram.
    pub fn from_histogram(hist: &[(i32, u64)]) -> Result<Self> {
        if hist.is_empty() {
            return Err(Error::Empty("symbol stream"));
        }
        let mut hist = hist.to_vec();
        hist.sort_unstable();
        if hist.windows(2).any(|w| w[0].0 == w[1].0) {
            return Err(Error::Input("duplicate symbol in histogram".into()));
        }
        if hist.iter().any(|&(_, f)| f == 0) {
            return Err(Error::Input("zero count in histogram".into()));
        }
        let lens = code_lengths(&hist)?;
        let pairs: Vec<(i32, u8)> = hist.iter().map(|&(s, _)| s).zip(lens).collect();
        let mut book = Self::from_lengths(&pairs)?;
        book.histogram = hist;
        Ok(book)
    }

    /// Reconstructs the canonical code from `(symbol, length)` pairs.
    pub fn from_lengths(pairs: &[(i32, u8)]) -> Result<Self> {
        if pairs.is_empty() {
            return Err(Error::Empty("codebook"));
        }
        let mut entries = pairs.to_vec();
        entries.sort_unstable_by_key(|&(s, l)| (l, s));
        if let Some(&(s, l)) = entries.iter().find(|&&(_, l)| l == 0 || l > MAX_CODE_LEN) {
            return Err(Error::Input(format!("symbol {s} has invalid code length {l}")));
        }
        // Kraft sum in units of 2^-MAX_CODE_LEN; must not exceed 1.
        let mut kraft: u128 = 0;
        for &(_, l) in &entries {
            kraft += 1u128 << (MAX_CODE_LEN - l);
        }
        if kraft > 1u128 << MAX_CODE_LEN {
            return Err(Error::Input("code lengths violate the Kraft inequality".into()));
        }
        let max_len = entries.last().expect("nonempty").1 as usize;
        let mut table = vec![(0u64, 0usize, 0usize); max_len + 1];
        let mut codes = HashMap::with_capacity(entries.len());
        let mut code: u64 = 0;
        let mut prev_len = entries[0].1;
        for (i, &(s, l)) in entries.iter().enumerate() {
            if i > 0 {
                code = (code + 1) << (l - prev_len);
            }
            prev_len = l;
            let t = &mut table[l as usize];
            if t.2 == 0 {
                *t = (code, i, 0);
            }
            t.2 += 1;
            if codes.insert(s, (code, l)).is_some() {
                return Err(Error::Input(format!("duplicate symbol {s} in codebook")));
            }
        }
        Ok(Self {
            entries,
            codes,
            histogram: Vec::new(),
            table,
        })
    }

    pub fn entries(&self) -> &[(i32, u8)] {
        &self.entries
    }

    pub fn histogram(&self) -> &[(i32, u64)] {
        &self.histogram
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn code(&self, symbol: i32) -> Option<(u64, u8)> {
        self.codes.get(&symbol).copied()
    }

    /// Kraft sum `Σ 2^(−len)`, counting the unused sibling of a lone
    /// one-bit codeword as padding.
    pub fn kraft_sum(&self) -> f64 {
        if self.entries.len() == 1 {
            return 1.0;
        }
        self.entries.iter().map(|&(_, l)| (-(l as f64)).exp2()).sum()
    }

    /// Mean code length under the source histogram.
    pub fn average_length(&self) -> f64 {
        let total: u64 = self.histogram.iter().map(|&(_, f)| f).sum();
        if total == 0 {
            return 0.0;
        }
        let bits: u64 = self
            .histogram
            .iter()
            .map(|&(s, f)| f * self.codes[&s].1 as u64)
            .sum();
        bits as f64 / total as f64
    }

    /// `Σ_s count(s)·len(s)` for a histogram.
    pub fn payload_bits(&self, hist: &[(i32, u64)]) -> Result<u64> {
        hist.iter()
            .map(|&(s, f)| {
                self.code(s)
                    .map(|(_, l)| f * l as u64)
                    .ok_or_else(|| Error::Input(format!("symbol {s} not in codebook")))
            })
            .sum()
    }

    /// Bytes taken by the serialized `(symbol, length)` table.
    pub fn serialized_bytes(&self) -> usize {
        4 + 5 * self.entries.len()
    }

    fn decode_one(&self, r: &mut BitReader<'_>) -> Result<i32> {
        let start = r.position();
        let mut code: u64 = 0;
        for len in 1..self.table.len() {
            let bit = r.read_bit().ok_or_else(|| {
                Error::Input(format!("payload truncated inside codeword at bit {start}"))
            })?;
            code = (code << 1) | bit as u64;
            let (first, idx, count) = self.table[len];
            if count > 0 && code >= first && code - first < count as u64 {
                return Ok(self.entries[idx + (code - first) as usize].0);
            }
        }
        Err(Error::Input(format!("invalid codeword at bit {start}")))
    }
}

/// Canonical Huffman code from the stream's own histogram.
pub fn build_codebook(symbols: &[i32]) -> Result<Codebook> {
    Codebook::from_histogram(&histogram(symbols))
}

/// Returns the packed payload and its length in bits.
pub fn encode_layer(symbols: &[i32], book: &Codebook) -> Result<(Vec<u8>, u64)> {
    let mut w = BitWriter::new();
    for &s in symbols {
        let (code, len) = book
            .code(s)
            .ok_or_else(|| Error::Input(format!("symbol {s} not in codebook")))?;
        w.write(code, len);
    }
    let bits = w.bit_len();
    Ok((w.into_bytes(), bits))
}

pub fn decode_layer(payload: &[u8], bit_len: u64, book: &Codebook, count: usize) -> Result<Vec<i32>> {
    let mut r = BitReader::new(payload, bit_len)?;
    let mut out = Vec::with_capacity(count);
    for _ in 0..count {
        out.push(book.decode_one(&mut r)?);
    }
    if r.remaining() != 0 {
        return Err(Error::Input(format!("{} unread payload bits", r.remaining())));
    }
    Ok(out)
}
