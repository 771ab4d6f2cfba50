//! Descriptor store files.
//!
//! Layout: a 64-byte header, an id table of `count × (u64 id, u64 offset)`
//! and the records, each `[global][l_max × fp16 strength][l_max locals]`.
//! Every record holds exactly `l_max` locals, so all records have the same
//! size and a prefix of `L` locals is one contiguous read.

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use ames_core::codec::{pq_decode, BinaryCodeMatrix, PqCodebook, Projection};
use ames_core::numerics::Matrix;
use ames_core::record::{DescriptorRecord, GlobalEncoding, GlobalPayload, LocalEncoding, LocalPayload};
use ames_core::retrieval::Database;
use half::f16;

use crate::error::{Error, Result};
use crate::format::{Reader, Writer};

pub const STORE_MAGIC: &[u8; 8] = b"AMESSTOR";
pub const STORE_VERSION: u32 = 1;
pub const HEADER_BYTES: usize = 64;
pub const ID_ENTRY_BYTES: usize = 16;

const FLAG_PROJECTED: u32 = 1;

/// Everything in the header except the record count.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct StoreLayout {
    pub global_dim: usize,
    /// Local descriptor dimension (code length for binary locals).
    pub dim: usize,
    pub l_max: usize,
    pub global: GlobalEncoding,
    pub local: LocalEncoding,
    /// Fp16 locals already passed through the model projection.
    pub projected: bool,
}

impl StoreLayout {
    pub fn global_bytes(&self) -> Result<usize> {
        Ok(self.global.bytes(self.global_dim)?)
    }

    pub fn local_bytes(&self) -> Result<usize> {
        Ok(self.local.bytes(self.dim)?)
    }

    pub fn record_bytes(&self) -> Result<usize> {
        Ok(self.global_bytes()? + self.l_max * (2 + self.local_bytes()?))
    }

    /// Size of a store holding `count` records.
    pub fn file_bytes(&self, count: usize) -> Result<usize> {
        Ok(HEADER_BYTES + count * (ID_ENTRY_BYTES + self.record_bytes()?))
    }

    fn validate(&self) -> Result<()> {
        if self.global_dim == 0 || self.dim == 0 || self.l_max == 0 {
            return Err(Error::Input("store dimensions must be positive".into()));
        }
        self.record_bytes()?;
        if self.local == LocalEncoding::Bin && self.projected {
            return Err(Error::Input("binary locals cannot carry the projected flag".into()));
        }
        Ok(())
    }

    fn check(&self, r: &DescriptorRecord) -> Result<()> {
        r.validate()?;
        let bad = |what: &str| Err(Error::Input(format!("record {}: {what} does not match the store header", r.id)));
        match (&r.global, self.global) {
            (GlobalPayload::Fp16(v), GlobalEncoding::Fp16) if v.len() == self.global_dim => {}
            (GlobalPayload::Pq(c), GlobalEncoding::Pq(s)) if c.len() * s == self.global_dim => {}
            _ => return bad("global payload"),
        }
        if r.locals.encoding() != self.local || r.locals.dim() != self.dim {
            return bad("local encoding");
        }
        if r.len() != self.l_max {
            return bad("local count");
        }
        Ok(())
    }
}

fn encoding_tag(g: GlobalEncoding) -> u8 {
    match g {
        GlobalEncoding::Fp16 => 0,
        GlobalEncoding::Pq(s) => s as u8,
    }
}

fn parse_global_tag(t: u8) -> Result<GlobalEncoding> {
    match t {
        0 => Ok(GlobalEncoding::Fp16),
        1 | 4 | 8 => Ok(GlobalEncoding::Pq(t as usize)),
        _ => Err(Error::Format(format!("store: unknown global encoding {t}"))),
    }
}

fn parse_local_tag(t: u8) -> Result<LocalEncoding> {
    match t {
        0 => Ok(LocalEncoding::Fp16),
        1 => Ok(LocalEncoding::Bin),
        _ => Err(Error::Format(format!("store: unknown local encoding {t}"))),
    }
}

fn encode_header(layout: &StoreLayout, count: usize) -> Vec<u8> {
    let mut w = Writer::new(Vec::with_capacity(HEADER_BYTES));
    (|| -> std::io::Result<()> {
        w.bytes(STORE_MAGIC)?;
        w.u32(STORE_VERSION)?;
        w.u32(if layout.projected { FLAG_PROJECTED } else { 0 })?;
        w.u64(count as u64)?;
        w.u64(layout.global_dim as u64)?;
        w.u64(layout.dim as u64)?;
        w.u64(layout.l_max as u64)?;
        w.u8(encoding_tag(layout.global))?;
        w.u8(match layout.local {
            LocalEncoding::Fp16 => 0,
            LocalEncoding::Bin => 1,
        })
    })()
    .expect("writing to memory");
    let mut out = w.into_inner();
    out.resize(HEADER_BYTES, 0);
    out
}

fn encode_record(r: &DescriptorRecord, out: &mut Vec<u8>) {
    match &r.global {
        GlobalPayload::Fp16(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
        GlobalPayload::Pq(c) => out.extend_from_slice(c),
    }
    r.strengths.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes()));
    match &r.locals {
        LocalPayload::Fp16 { values, .. } => values.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
        LocalPayload::Bin(c) => out.extend_from_slice(c.as_bytes()),
    }
}

/// Writes `records` in the given order. Ids must be unique.
pub fn write_store(path: &Path, layout: &StoreLayout, records: &[DescriptorRecord]) -> Result<()> {
    layout.validate()?;
    let mut seen = HashMap::with_capacity(records.len());
    for (k, r) in records.iter().enumerate() {
        layout.check(r)?;
        if seen.insert(r.id, k).is_some() {
            return Err(Error::Input(format!("duplicate image id {}", r.id)));
        }
    }
    let record_bytes = layout.record_bytes()?;
    let file = File::create(path).map_err(|e| Error::Path(path.display().to_string(), e))?;
    let mut out = BufWriter::new(file);
    out.write_all(&encode_header(layout, records.len()))?;
    let base = (HEADER_BYTES + records.len() * ID_ENTRY_BYTES) as u64;
    for (k, r) in records.iter().enumerate() {
        out.write_all(&r.id.to_le_bytes())?;
        out.write_all(&(base + (k * record_bytes) as u64).to_le_bytes())?;
    }
    let mut buf = Vec::with_capacity(record_bytes);
    for r in records {
        buf.clear();
        encode_record(r, &mut buf);
        debug_assert_eq!(buf.len(), record_bytes);
        out.write_all(&buf)?;
    }
    out.flush()?;
    Ok(())
}

/// An open store. Only the header and id table are held in memory; records
/// are read on demand with positioned reads, so a shared reference can be
/// used from several threads.
#[derive(Debug)]
pub struct Store {
    layout: StoreLayout,
    file: File,
    ids: Vec<u64>,
    offsets: Vec<u64>,
    index: HashMap<u64, usize>,
}

impl Store {
    pub fn open(path: &Path) -> Result<Self> {
        let file = File::open(path).map_err(|e| Error::Path(path.display().to_string(), e))?;
        let size = file.metadata()?.len();
        let mut head = [0u8; HEADER_BYTES];
        read_exact_at(&file, &mut head, 0).map_err(|_| Error::Format("store: truncated header".into()))?;
        let mut r = Reader::new(&head[..], "store");
        if &r.array::<8>()? != STORE_MAGIC {
            return Err(Error::Format("store: bad magic".into()));
        }
        let version = r.u32()?;
        if version != STORE_VERSION {
            return Err(Error::Format(format!("store: unsupported version {version}")));
        }
        let flags = r.u32()?;
        let count = r.usize()?;
        let (global_dim, dim, l_max) = (r.usize()?, r.usize()?, r.usize()?);
        let global = parse_global_tag(r.u8()?)?;
        let local = parse_local_tag(r.u8()?)?;
        let layout = StoreLayout { global_dim, dim, l_max, global, local, projected: flags & FLAG_PROJECTED != 0 };
        layout.validate().map_err(|e| Error::Format(format!("store: {e}")))?;
        let expected = count
            .checked_mul(ID_ENTRY_BYTES + layout.record_bytes()?)
            .and_then(|b| b.checked_add(HEADER_BYTES))
            .ok_or_else(|| Error::Format("store: size overflow".into()))?;
        if size != expected as u64 {
            return Err(Error::Format(format!("store: {size} bytes, header implies {expected}")));
        }
        let mut table = vec![0u8; count * ID_ENTRY_BYTES];
        read_exact_at(&file, &mut table, HEADER_BYTES as u64)?;
        let mut ids = Vec::with_capacity(count);
        let mut offsets = Vec::with_capacity(count);
        let mut index = HashMap::with_capacity(count);
        let record_bytes = layout.record_bytes()? as u64;
        for (k, e) in table.chunks_exact(ID_ENTRY_BYTES).enumerate() {
            let id = u64::from_le_bytes(e[..8].try_into().expect("8 bytes"));
            let off = u64::from_le_bytes(e[8..].try_into().expect("8 bytes"));
            if off < (HEADER_BYTES + count * ID_ENTRY_BYTES) as u64 || off + record_bytes > size {
                return Err(Error::Format(format!("store: record {id} offset out of range")));
            }
            if index.insert(id, k).is_some() {
                return Err(Error::Format(format!("store: duplicate id {id}")));
            }
            ids.push(id);
            offsets.push(off);
        }
        Ok(Self { layout, file, ids, offsets, index })
    }

    pub fn layout(&self) -> &StoreLayout {
        &self.layout
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn ids(&self) -> &[u64] {
        &self.ids
    }

    /// Position of `id` in the id table.
    pub fn position(&self, id: u64) -> Option<usize> {
        self.index.get(&id).copied()
    }

    fn read(&self, index: usize, start: usize, len: usize) -> Result<Vec<u8>> {
        let mut buf = vec![0u8; len];
        read_exact_at(&self.file, &mut buf, self.offsets[index] + start as u64)?;
        Ok(buf)
    }

    pub fn global_payload(&self, index: usize) -> Result<GlobalPayload> {
        let n = self.layout.global_bytes()?;
        let b = self.read(index, 0, n)?;
        Ok(match self.layout.global {
            GlobalEncoding::Fp16 => GlobalPayload::Fp16(fp16s(&b)),
            GlobalEncoding::Pq(_) => GlobalPayload::Pq(b),
        })
    }

    /// Record at `index` restricted to its `rows` strongest locals.
    pub fn record_prefix(&self, index: usize, rows: usize) -> Result<DescriptorRecord> {
        let l = &self.layout;
        if rows == 0 || rows > l.l_max {
            return Err(ames_core::AmesError::LengthOutOfRange { got: rows, min: 1, max: l.l_max }.into());
        }
        let g = l.global_bytes()?;
        let lb = l.local_bytes()?;
        let strengths = fp16s(&self.read(index, g, 2 * rows)?);
        let locals = self.read(index, g + 2 * l.l_max, rows * lb)?;
        let locals = match l.local {
            LocalEncoding::Fp16 => LocalPayload::Fp16 { dim: l.dim, values: fp16s(&locals) },
            LocalEncoding::Bin => LocalPayload::Bin(BinaryCodeMatrix::from_packed(rows, l.dim, locals)?),
        };
        Ok(DescriptorRecord { id: self.ids[index], global: self.global_payload(index)?, strengths, locals })
    }

    pub fn record(&self, index: usize) -> Result<DescriptorRecord> {
        self.record_prefix(index, self.layout.l_max)
    }

    pub fn get(&self, id: u64) -> Result<DescriptorRecord> {
        let k = self.position(id).ok_or_else(|| Error::Input(format!("id {id} not in store")))?;
        self.record(k)
    }

    /// Every record in id-table order.
    pub fn records(&self) -> Result<Vec<DescriptorRecord>> {
        (0..self.len()).map(|k| self.record(k)).collect()
    }
}

fn fp16s(b: &[u8]) -> Vec<f16> {
    b.chunks_exact(2).map(|c| f16::from_le_bytes([c[0], c[1]])).collect()
}

#[cfg(unix)]
fn read_exact_at(file: &File, buf: &mut [u8], offset: u64) -> std::io::Result<()> {
    std::os::unix::fs::FileExt::read_exact_at(file, buf, offset)
}

#[cfg(windows)]
fn read_exact_at(file: &File, mut buf: &mut [u8], mut offset: u64) -> std::io::Result<()> {
    use std::os::windows::fs::FileExt;
    while !buf.is_empty() {
        match file.seek_read(buf, offset)? {
            0 => return Err(std::io::ErrorKind::UnexpectedEof.into()),
            n => {
                buf = &mut buf[n..];
                offset += n as u64;
            }
        }
    }
    Ok(())
}

/// A store seen through a model: globals are decoded (PQ codes with the
/// codebook) and locals turned into model tokens.
pub struct StoreDatabase<'a> {
    pub store: &'a Store,
    pub projection: &'a Projection,
    pub codebook: Option<&'a PqCodebook>,
}

impl<'a> StoreDatabase<'a> {
    pub fn new(store: &'a Store, projection: &'a Projection, codebook: Option<&'a PqCodebook>) -> Result<Self> {
        let l = store.layout();
        if matches!(l.global, GlobalEncoding::Pq(_)) && codebook.is_none() {
            return Err(Error::Input("store has PQ globals; a codebook is required".into()));
        }
        let expected = match (l.local, l.projected) {
            (LocalEncoding::Fp16, false) => projection.input_dim(),
            _ => projection.output_dim(),
        };
        if l.dim != expected {
            return Err(Error::Input(format!("store local dim {} does not fit the model (expected {expected})", l.dim)));
        }
        if l.local == LocalEncoding::Bin && !projection.is_binary() {
            return Err(Error::Input("binary store needs a binary model".into()));
        }
        Ok(Self { store, projection, codebook })
    }
}

impl Database for StoreDatabase<'_> {
    fn len(&self) -> usize {
        self.store.len()
    }

    fn id(&self, index: usize) -> u64 {
        self.store.ids[index]
    }

    fn global(&self, index: usize) -> ames_core::Result<Vec<f64>> {
        match self.store.global_payload(index).map_err(core_error)? {
            GlobalPayload::Fp16(v) => Ok(v.iter().map(|x| x.to_f64()).collect()),
            GlobalPayload::Pq(code) => pq_decode(&code, self.codebook.ok_or(ames_core::AmesError::Config("PQ global needs a codebook"))?),
        }
    }

    fn local_count(&self, _index: usize) -> usize {
        self.store.layout.l_max
    }

    fn tokens(&self, index: usize, len: usize) -> ames_core::Result<Matrix> {
        let r = self.store.record_prefix(index, len).map_err(core_error)?;
        r.tokens(len, self.projection, self.store.layout.projected)
    }
}

fn core_error(e: Error) -> ames_core::AmesError {
    match e {
        Error::Core(e) => e,
        _ => ames_core::AmesError::Encoding("store read failed"),
    }
}
