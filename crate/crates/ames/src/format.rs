//! Little-endian binary files for checkpoints, binarization codecs and PQ
//! codebooks. Every file starts with an 8-byte magic and a u32 version.

use std::fs;
use std::io::{self, Read, Write};
use std::path::Path;

use ames_core::codec::{BinaryCodec, FpProjection, PqCodebook, Projection};
use ames_core::model::{AmesParams, ModelConfig};
use ames_core::numerics::{Linear, Matrix};

use crate::error::{Error, Result};

pub const PARAMS_MAGIC: &[u8; 8] = b"AMESPARM";
pub const CODEC_MAGIC: &[u8; 8] = b"AMESBCDC";
pub const CODEBOOK_MAGIC: &[u8; 8] = b"AMESPQCB";
pub const VERSION: u32 = 1;

const KIND_FP: u32 = 0;
const KIND_BINARY: u32 = 1;

pub(crate) struct Writer<W: Write> {
    inner: W,
}

impl<W: Write> Writer<W> {
    pub fn new(inner: W) -> Self {
        Self { inner }
    }

    pub fn bytes(&mut self, b: &[u8]) -> io::Result<()> {
        self.inner.write_all(b)
    }

    pub fn u8(&mut self, v: u8) -> io::Result<()> {
        self.bytes(&[v])
    }

    pub fn u32(&mut self, v: u32) -> io::Result<()> {
        self.bytes(&v.to_le_bytes())
    }

    pub fn u64(&mut self, v: u64) -> io::Result<()> {
        self.bytes(&v.to_le_bytes())
    }

    pub fn f64(&mut self, v: f64) -> io::Result<()> {
        self.bytes(&v.to_le_bytes())
    }

    pub fn f64s(&mut self, v: &[f64]) -> io::Result<()> {
        for x in v {
            self.f64(*x)?;
        }
        Ok(())
    }

    pub fn into_inner(self) -> W {
        self.inner
    }
}

pub(crate) struct Reader<R: Read> {
    inner: R,
    what: &'static str,
}

impl<R: Read> Reader<R> {
    pub fn new(inner: R, what: &'static str) -> Self {
        Self { inner, what }
    }

    pub fn bytes(&mut self, buf: &mut [u8]) -> Result<()> {
        self.inner.read_exact(buf).map_err(|e| match e.kind() {
            io::ErrorKind::UnexpectedEof => Error::Format(format!("{}: truncated file", self.what)),
            _ => Error::Io(e),
        })
    }

    pub fn array<const N: usize>(&mut self) -> Result<[u8; N]> {
        let mut b = [0u8; N];
        self.bytes(&mut b)?;
        Ok(b)
    }

    pub fn u8(&mut self) -> Result<u8> {
        Ok(self.array::<1>()?[0])
    }

    pub fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.array()?))
    }

    pub fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.array()?))
    }

    pub fn usize(&mut self) -> Result<usize> {
        usize::try_from(self.u64()?).map_err(|_| Error::Format(format!("{}: size overflow", self.what)))
    }

    pub fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.array()?))
    }

    pub fn f64s(&mut self, n: usize) -> Result<Vec<f64>> {
        (0..n).map(|_| self.f64()).collect()
    }

    pub fn preamble(&mut self, magic: &[u8; 8]) -> Result<()> {
        if &self.array::<8>()? != magic {
            return Err(Error::Format(format!("{}: bad magic", self.what)));
        }
        let v = self.u32()?;
        if v != VERSION {
            return Err(Error::Format(format!("{}: unsupported version {v}", self.what)));
        }
        Ok(())
    }

    /// Fails unless the input is exhausted.
    pub fn finish(mut self) -> Result<()> {
        let mut b = [0u8; 1];
        match self.inner.read(&mut b)? {
            0 => Ok(()),
            _ => Err(Error::Format(format!("{}: trailing bytes", self.what))),
        }
    }
}

fn write_file(path: &Path, data: Vec<u8>) -> Result<()> {
    fs::write(path, data).map_err(|e| Error::Path(path.display().to_string(), e))
}

fn read_file(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::Path(path.display().to_string(), e))
}

/// Checkpoint bytes: config, projection kind, then every tensor as f64 in
/// the canonical visiting order.
pub fn params_to_bytes(params: &AmesParams) -> Vec<u8> {
    let mut w = Writer::new(Vec::new());
    let c = params.config;
    let io = (|| -> io::Result<()> {
        w.bytes(PARAMS_MAGIC)?;
        w.u32(VERSION)?;
        for v in [c.input_dim, c.dim, c.depth, c.heads, c.hidden] {
            w.u64(v as u64)?;
        }
        match &params.projection {
            Projection::Fp(_) => {
                w.u32(KIND_FP)?;
                w.f64(0.0)?;
            }
            Projection::Binary(b) => {
                w.u32(KIND_BINARY)?;
                w.f64(b.delta)?;
            }
        }
        let flat = params.to_flat();
        w.u64(flat.len() as u64)?;
        w.f64s(&flat)
    })();
    io.expect("writing to memory");
    w.into_inner()
}

pub fn params_from_bytes(data: &[u8]) -> Result<AmesParams> {
    let mut r = Reader::new(data, "checkpoint");
    r.preamble(PARAMS_MAGIC)?;
    let config = ModelConfig { input_dim: r.usize()?, dim: r.usize()?, depth: r.usize()?, heads: r.usize()?, hidden: r.usize()? };
    config.validate()?;
    let kind = r.u32()?;
    let delta = r.f64()?;
    let projection = match kind {
        KIND_FP => Projection::Fp(FpProjection { linear: Linear::zeros(config.input_dim, config.dim) }),
        KIND_BINARY => Projection::Binary(BinaryCodec::new(Matrix::zeros(config.input_dim, config.dim), delta)?),
        k => return Err(Error::Format(format!("checkpoint: unknown projection kind {k}"))),
    };
    let mut params = AmesParams::zeros(config, projection);
    let n = r.usize()?;
    if n != params.num_parameters() {
        return Err(Error::Format(format!("checkpoint: {n} values for a model with {}", params.num_parameters())));
    }
    params.load_flat(&r.f64s(n)?)?;
    r.finish()?;
    Ok(params)
}

pub fn save_params(path: &Path, params: &AmesParams) -> Result<()> {
    write_file(path, params_to_bytes(params))
}

pub fn load_params(path: &Path) -> Result<AmesParams> {
    params_from_bytes(&read_file(path)?)
}

/// Binarization weights and relaxation width of a fitted codec.
pub fn save_codec(path: &Path, weight: &Matrix, delta: f64) -> Result<()> {
    let mut w = Writer::new(Vec::new());
    (|| -> io::Result<()> {
        w.bytes(CODEC_MAGIC)?;
        w.u32(VERSION)?;
        w.u64(weight.rows() as u64)?;
        w.u64(weight.cols() as u64)?;
        w.f64(delta)?;
        w.f64s(weight.as_slice())
    })()
    .expect("writing to memory");
    write_file(path, w.into_inner())
}

pub fn load_codec(path: &Path) -> Result<(Matrix, f64)> {
    let data = read_file(path)?;
    let mut r = Reader::new(data.as_slice(), "codec");
    r.preamble(CODEC_MAGIC)?;
    let (rows, cols) = (r.usize()?, r.usize()?);
    let delta = r.f64()?;
    let weight = Matrix::from_vec(rows, cols, r.f64s(rows * cols)?)?;
    r.finish()?;
    Ok((weight, delta))
}

pub fn save_codebook(path: &Path, cb: &PqCodebook) -> Result<()> {
    let mut w = Writer::new(Vec::new());
    (|| -> io::Result<()> {
        w.bytes(CODEBOOK_MAGIC)?;
        w.u32(VERSION)?;
        w.u64(cb.dim() as u64)?;
        w.u64(cb.sub_dim() as u64)?;
        w.f64s(cb.centroids())
    })()
    .expect("writing to memory");
    write_file(path, w.into_inner())
}

pub fn load_codebook(path: &Path) -> Result<PqCodebook> {
    let data = read_file(path)?;
    let mut r = Reader::new(data.as_slice(), "codebook");
    r.preamble(CODEBOOK_MAGIC)?;
    let (dim, sub_dim) = (r.usize()?, r.usize()?);
    let n = dim.checked_mul(ames_core::codec::pq::CENTROIDS).ok_or_else(|| Error::Format("codebook: size overflow".into()))?;
    let cb = PqCodebook::from_centroids(dim, sub_dim, r.f64s(n)?)?;
    r.finish()?;
    Ok(cb)
}
