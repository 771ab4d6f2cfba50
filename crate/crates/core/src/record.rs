//! One image's descriptors in storage form.

use alloc::vec::Vec;

use half::f16;

use crate::codec::{pq_decode, pq_encode, BinaryCodeMatrix, PqCodebook, Projection};
use crate::error::{AmesError, Result};
use crate::numerics::Matrix;

/// Global descriptor encoding.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum GlobalEncoding {
    Fp16,
    /// Product quantization with the given sub-space dimension (1, 4 or 8).
    Pq(usize),
}

impl GlobalEncoding {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "fp16" => Ok(Self::Fp16),
            "pq1" => Ok(Self::Pq(1)),
            "pq4" => Ok(Self::Pq(4)),
            "pq8" => Ok(Self::Pq(8)),
            _ => Err(AmesError::Config("global encoding must be fp16, pq1, pq4 or pq8")),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Self::Fp16 => "fp16",
            Self::Pq(1) => "pq1",
            Self::Pq(4) => "pq4",
            Self::Pq(8) => "pq8",
            Self::Pq(_) => "pq?",
        }
    }

    /// Bytes per global descriptor of dimension `dim`.
    pub fn bytes(&self, dim: usize) -> Result<usize> {
        match *self {
            Self::Fp16 => Ok(2 * dim),
            Self::Pq(s) if matches!(s, 1 | 4 | 8) => {
                if !dim.is_multiple_of(s) {
                    return Err(AmesError::Config("global dim is not divisible by the PQ sub-space dim"));
                }
                Ok(dim / s)
            }
            Self::Pq(_) => Err(AmesError::Config("PQ sub-space dim must be 1, 4 or 8")),
        }
    }
}

/// Local descriptor encoding.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum LocalEncoding {
    Fp16,
    Bin,
}

impl LocalEncoding {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "fp16" => Ok(Self::Fp16),
            "bin" => Ok(Self::Bin),
            _ => Err(AmesError::Config("local encoding must be fp16 or bin")),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Self::Fp16 => "fp16",
            Self::Bin => "bin",
        }
    }

    /// Bytes per local descriptor of dimension `dim`.
    pub fn bytes(&self, dim: usize) -> Result<usize> {
        match self {
            Self::Fp16 => Ok(2 * dim),
            Self::Bin if dim.is_multiple_of(8) => Ok(dim / 8),
            Self::Bin => Err(AmesError::Config("binary local dim must be a multiple of 8")),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum GlobalPayload {
    Fp16(Vec<f16>),
    Pq(Vec<u8>),
}

#[derive(Clone, Debug, PartialEq)]
pub enum LocalPayload {
    Fp16 { dim: usize, values: Vec<f16> },
    Bin(BinaryCodeMatrix),
}

impl LocalPayload {
    pub fn rows(&self) -> usize {
        match self {
            LocalPayload::Fp16 { dim, values } => values.len() / (*dim).max(1),
            LocalPayload::Bin(c) => c.rows(),
        }
    }

    pub fn dim(&self) -> usize {
        match self {
            LocalPayload::Fp16 { dim, .. } => *dim,
            LocalPayload::Bin(c) => c.bits(),
        }
    }

    pub fn encoding(&self) -> LocalEncoding {
        match self {
            LocalPayload::Fp16 { .. } => LocalEncoding::Fp16,
            LocalPayload::Bin(_) => LocalEncoding::Bin,
        }
    }

    /// The first `rows` descriptors.
    pub fn prefix(&self, rows: usize) -> Self {
        match self {
            LocalPayload::Fp16 { dim, values } => LocalPayload::Fp16 { dim: *dim, values: values[..rows * dim].to_vec() },
            LocalPayload::Bin(c) => LocalPayload::Bin(c.prefix(rows)),
        }
    }
}

/// Strength-ordered local descriptors plus the global descriptor of one image.
#[derive(Clone, Debug, PartialEq)]
pub struct DescriptorRecord {
    pub id: u64,
    pub global: GlobalPayload,
    /// Non-increasing, one per local row.
    pub strengths: Vec<f16>,
    pub locals: LocalPayload,
}

impl DescriptorRecord {
    pub fn validate(&self) -> Result<()> {
        if self.strengths.len() != self.locals.rows() {
            return Err(AmesError::Shape { what: "strength count", expected: self.locals.rows(), got: self.strengths.len() });
        }
        if self.strengths.windows(2).any(|w| w[0] < w[1]) {
            return Err(AmesError::Encoding("strengths must be non-increasing"));
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.locals.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Global descriptor as reals (PQ codes are decoded with `codebook`).
    pub fn global_vector(&self, codebook: Option<&PqCodebook>) -> Result<Vec<f64>> {
        match &self.global {
            GlobalPayload::Fp16(v) => Ok(v.iter().map(|x| x.to_f64()).collect()),
            GlobalPayload::Pq(code) => {
                let cb = codebook.ok_or(AmesError::Config("PQ global needs a codebook"))?;
                pq_decode(code, cb)
            }
        }
    }

    /// First `rows` fp16 locals as a real matrix.
    pub fn local_matrix(&self, rows: usize) -> Result<Matrix> {
        let rows = self.check_rows(rows)?;
        match &self.locals {
            LocalPayload::Fp16 { dim, values } => Matrix::from_vec(rows, *dim, values[..rows * dim].iter().map(|v| v.to_f64()).collect()),
            LocalPayload::Bin(c) => {
                let mut data = Vec::with_capacity(rows * c.bits());
                for r in 0..rows {
                    data.extend(c.unpack_row(r));
                }
                Matrix::from_vec(rows, c.bits(), data)
            }
        }
    }

    /// Model input tokens for the first `rows` locals. Binary codes go
    /// through the re-mapping; fp16 locals are used as they are when
    /// `projected`, and through the projection otherwise.
    pub fn tokens(&self, rows: usize, projection: &Projection, projected: bool) -> Result<Matrix> {
        let rows = self.check_rows(rows)?;
        match (&self.locals, projection) {
            (LocalPayload::Bin(c), Projection::Binary(b)) => b.remap_codes(c, rows),
            (LocalPayload::Bin(_), Projection::Fp(_)) => Err(AmesError::Config("binary locals need a binary codec")),
            (LocalPayload::Fp16 { .. }, _) if projected => self.local_matrix(rows),
            (LocalPayload::Fp16 { .. }, p) => p.project(&self.local_matrix(rows)?),
        }
    }

    fn check_rows(&self, rows: usize) -> Result<usize> {
        if rows == 0 || rows > self.len() {
            return Err(AmesError::LengthOutOfRange { got: rows, min: 1, max: self.len() });
        }
        Ok(rows)
    }
}

/// Record restricted to its `len` strongest locals.
pub fn slice_top(record: &DescriptorRecord, len: usize) -> Result<DescriptorRecord> {
    record.check_rows(len)?;
    Ok(DescriptorRecord { id: record.id, global: record.global.clone(), strengths: record.strengths[..len].to_vec(), locals: record.locals.prefix(len) })
}

/// How `encode_record` stores descriptors.
#[derive(Clone, Copy, Debug)]
pub struct RecordEncoder<'a> {
    pub codebook: Option<&'a PqCodebook>,
    /// `None` stores raw locals as fp16; an fp projection stores projected
    /// fp16 tokens; a binary codec stores packed codes.
    pub projection: Option<&'a Projection>,
}

impl RecordEncoder<'_> {
    pub fn global_encoding(&self) -> GlobalEncoding {
        self.codebook.map_or(GlobalEncoding::Fp16, |cb| GlobalEncoding::Pq(cb.sub_dim()))
    }

    pub fn local_encoding(&self) -> LocalEncoding {
        match self.projection {
            Some(Projection::Binary(_)) => LocalEncoding::Bin,
            _ => LocalEncoding::Fp16,
        }
    }

    /// Builds a record from strength-ordered raw locals.
    pub fn encode(&self, id: u64, global: &[f64], locals: &Matrix, strengths: &[f64]) -> Result<DescriptorRecord> {
        if strengths.len() != locals.rows() {
            return Err(AmesError::Shape { what: "strength count", expected: locals.rows(), got: strengths.len() });
        }
        let global = match self.codebook {
            Some(cb) => GlobalPayload::Pq(pq_encode(global, cb)?),
            None => GlobalPayload::Fp16(global.iter().map(|&v| f16::from_f64(v)).collect()),
        };
        let locals = match self.projection {
            None => fp16_payload(locals),
            Some(p @ Projection::Fp(_)) => fp16_payload(&p.project(locals)?),
            Some(Projection::Binary(b)) => LocalPayload::Bin(b.encode(locals)?),
        };
        let record = DescriptorRecord { id, global, strengths: strengths.iter().map(|&s| f16::from_f64(s)).collect(), locals };
        record.validate()?;
        Ok(record)
    }
}

fn fp16_payload(m: &Matrix) -> LocalPayload {
    LocalPayload::Fp16 { dim: m.cols(), values: m.as_slice().iter().map(|&v| f16::from_f64(v)).collect() }
}
