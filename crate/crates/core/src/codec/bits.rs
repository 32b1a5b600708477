//! MSB-first bit packing.

use crate::error::{Error, Result};

#[derive(Clone, Debug, Default)]
pub struct BitWriter {
    bytes: Vec<u8>,
    /// Bits already used in the last byte (0 means byte-aligned).
    used: u8,
    len: u64,
}

impl BitWriter {
    pub fn new() -> Self {
        Self::default()
    }

    /// Appends the low `n` bits of `code`, most significant first.
    pub fn write(&mut self, code: u64, n: u8) {
        debug_assert!(n <= 64);
        for i in (0..n).rev() {
            let bit = (code >> i) & 1;
            if self.used == 0 {
                self.bytes.push(0);
            }
            if bit == 1 {
                *self.bytes.last_mut().expect("pushed above") |= 0x80 >> self.used;
            }
            self.used = (self.used + 1) % 8;
        }
        self.len += n as u64;
    }

    pub fn bit_len(&self) -> u64 {
        self.len
    }

    /// Padding bits in the last byte are zero.
    pub fn into_bytes(self) -> Vec<u8> {
        self.bytes
    }
}

#[derive(Clone, Debug)]
pub struct BitReader<'a> {
    bytes: &'a [u8],
    pos: u64,
    len: u64,
}

impl<'a> BitReader<'a> {
    pub fn new(bytes: &'a [u8], bit_len: u64) -> Result<Self> {
        if bit_len.div_ceil(8) != bytes.len() as u64 {
            return Err(Error::Input(format!(
                "{bit_len} bits need {} bytes, got {}",
                bit_len.div_ceil(8),
                bytes.len()
            )));
        }
        Ok(Self {
            bytes,
            pos: 0,
            len: bit_len,
        })
    }

    pub fn position(&self) -> u64 {
        self.pos
    }

    pub fn remaining(&self) -> u64 {
        self.len - self.pos
    }

    pub fn read_bit(&mut self) -> Option<u8> {
        if self.pos >= self.len {
            return None;
        }
        let byte = self.bytes[(self.pos / 8) as usize];
        let bit = (byte >> (7 - (self.pos % 8))) & 1;
        self.pos += 1;
        Some(bit)
    }
}
