use alloc::vec;
use alloc::vec::Vec;

use crate::error::{AmesError, Result};

/// Row-wise bit-packed ±1 codes. Bit set means +1; bits are stored
/// most-significant-bit first within each byte.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BinaryCodeMatrix {
    rows: usize,
    bits: usize,
    packed: Vec<u8>,
}

impl BinaryCodeMatrix {
    pub fn new(bits: usize) -> Result<Self> {
        if bits == 0 || !bits.is_multiple_of(8) {
            return Err(AmesError::Config("code length must be a positive multiple of 8"));
        }
        Ok(Self { rows: 0, bits, packed: Vec::new() })
    }

    pub fn from_packed(rows: usize, bits: usize, packed: Vec<u8>) -> Result<Self> {
        let mut m = Self::new(bits)?;
        if packed.len() != rows * bits / 8 {
            return Err(AmesError::Shape { what: "packed code bytes", expected: rows * bits / 8, got: packed.len() });
        }
        m.rows = rows;
        m.packed = packed;
        Ok(m)
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn bits(&self) -> usize {
        self.bits
    }

    pub fn bytes_per_row(&self) -> usize {
        self.bits / 8
    }

    pub fn as_bytes(&self) -> &[u8] {
        &self.packed
    }

    pub fn row_bytes(&self, i: usize) -> &[u8] {
        let b = self.bytes_per_row();
        &self.packed[i * b..(i + 1) * b]
    }

    /// Appends a row; non-negative values map to +1.
    pub fn push_signs(&mut self, values: &[f64]) -> Result<()> {
        if values.len() != self.bits {
            return Err(AmesError::Shape { what: "code length", expected: self.bits, got: values.len() });
        }
        self.packed.extend(pack_signs(values));
        self.rows += 1;
        Ok(())
    }

    /// Row `i` as ±1 reals.
    pub fn unpack_row(&self, i: usize) -> Vec<f64> {
        unpack_signs(self.row_bytes(i), self.bits)
    }

    /// First `rows` rows.
    pub fn prefix(&self, rows: usize) -> Self {
        let b = self.bytes_per_row();
        Self { rows, bits: self.bits, packed: self.packed[..rows * b].to_vec() }
    }
}

pub fn pack_signs(values: &[f64]) -> Vec<u8> {
    let mut out = vec![0u8; values.len().div_ceil(8)];
    for (i, v) in values.iter().enumerate() {
        if *v >= 0.0 {
            out[i / 8] |= 0x80 >> (i % 8);
        }
    }
    out
}

pub fn unpack_signs(bytes: &[u8], bits: usize) -> Vec<f64> {
    (0..bits).map(|i| if bytes[i / 8] & (0x80 >> (i % 8)) != 0 { 1.0 } else { -1.0 }).collect()
}

/// Hamming distance between two packed codes of equal length.
pub fn hamming(a: &[u8], b: &[u8]) -> u32 {
    a.iter().zip(b).map(|(x, y)| (x ^ y).count_ones()).sum()
}
