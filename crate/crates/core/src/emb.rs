//! The `.emb` embedding container.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! "EMB1"            4 bytes magic
//! dim               u32
//! count             u64
//! count times:
//!   id_len          u16
//!   id              id_len bytes of UTF-8
//!   values          dim x f32
//! ```
//!
//! A file may hold several tables back to back; checkpoints use this to
//! store tensors of different widths in one file.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use indexmap::IndexMap;

use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"EMB1";

/// Id-keyed dense f32 vectors of a shared dimension. Insertion order is
/// preserved and is the on-disk order.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingTable {
    dim: usize,
    entries: IndexMap<String, Vec<f32>>,
}

impl EmbeddingTable {
    pub fn new(dim: usize) -> Result<Self> {
        if dim == 0 || dim > u32::MAX as usize {
            return Err(Error::InvalidDim(dim as u32));
        }
        Ok(Self {
            dim,
            entries: IndexMap::new(),
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn insert(&mut self, id: impl Into<String>, values: Vec<f32>) -> Result<()> {
        let id = id.into();
        if values.len() != self.dim {
            return Err(Error::DimMismatch {
                id,
                expected: self.dim,
                got: values.len(),
            });
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite(id));
        }
        if id.len() > u16::MAX as usize {
            return Err(Error::IdTooLong(id));
        }
        if self.entries.contains_key(&id) {
            return Err(Error::DuplicateId(id));
        }
        self.entries.insert(id, values);
        Ok(())
    }

    /// Inserts an f64 vector, rounding to f32.
    pub fn insert_f64(&mut self, id: impl Into<String>, values: &[f64]) -> Result<()> {
        self.insert(id, values.iter().map(|&v| v as f32).collect())
    }

    pub fn get(&self, id: &str) -> Option<&[f32]> {
        self.entries.get(id).map(Vec::as_slice)
    }

    pub fn get_f64(&self, id: &str) -> Option<Vec<f64>> {
        self.get(id).map(|v| v.iter().map(|&x| x as f64).collect())
    }

    pub fn contains(&self, id: &str) -> bool {
        self.entries.contains_key(id)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &[f32])> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v.as_slice()))
    }

    pub fn ids(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    pub fn write_to<W: Write>(&self, w: &mut W) -> std::io::Result<()> {
        w.write_all(MAGIC)?;
        w.write_all(&(self.dim as u32).to_le_bytes())?;
        w.write_all(&(self.entries.len() as u64).to_le_bytes())?;
        for (id, values) in &self.entries {
            w.write_all(&(id.len() as u16).to_le_bytes())?;
            w.write_all(id.as_bytes())?;
            for v in values {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(16 + self.len() * (2 + 16 + 4 * self.dim));
        self.write_to(&mut out).expect("writing to a Vec cannot fail");
        out
    }

    /// Reads one table. Returns `Ok(None)` on a clean end of stream before
    /// the magic bytes.
    pub fn read_from<R: Read>(r: &mut R) -> Result<Option<Self>> {
        let mut magic = [0u8; 4];
        let got = read_up_to(r, &mut magic)?;
        if got == 0 {
            return Ok(None);
        }
        if got < 4 {
            return Err(Error::Truncated("magic".into()));
        }
        if &magic != MAGIC {
            return Err(Error::BadMagic(magic));
        }
        let dim = u32::from_le_bytes(read_array(r, "header dim")?);
        if dim == 0 {
            return Err(Error::InvalidDim(dim));
        }
        let count = u64::from_le_bytes(read_array(r, "header count")?);
        let mut table = EmbeddingTable::new(dim as usize)?;
        let mut row = vec![0u8; 4 * dim as usize];
        for n in 0..count {
            let id_len = u16::from_le_bytes(read_array(r, &format!("id length of row {n}"))?);
            let mut id = vec![0u8; id_len as usize];
            read_exact(r, &mut id, &format!("id of row {n}"))?;
            let id = String::from_utf8(id).map_err(|_| Error::InvalidArgument(format!("row {n}: id is not UTF-8")))?;
            read_exact(r, &mut row, &format!("values of row {n} (declared count {count})"))?;
            let values = row
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect();
            table.insert(id, values)?;
        }
        Ok(Some(table))
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut cursor = bytes;
        let table = Self::read_from(&mut cursor)?.ok_or_else(|| Error::Truncated("empty input".into()))?;
        if !cursor.is_empty() {
            return Err(Error::InvalidArgument(format!(
                "{} trailing bytes after declared count",
                cursor.len()
            )));
        }
        Ok(table)
    }
}

fn read_up_to<R: Read>(r: &mut R, buf: &mut [u8]) -> Result<usize> {
    let mut filled = 0;
    while filled < buf.len() {
        match r.read(&mut buf[filled..]) {
            Ok(0) => break,
            Ok(n) => filled += n,
            Err(e) if e.kind() == std::io::ErrorKind::Interrupted => {}
            Err(e) => return Err(Error::io("<stream>", e)),
        }
    }
    Ok(filled)
}

fn read_exact<R: Read>(r: &mut R, buf: &mut [u8], what: &str) -> Result<()> {
    if read_up_to(r, buf)? < buf.len() {
        return Err(Error::Truncated(what.to_string()));
    }
    Ok(())
}

fn read_array<const N: usize, R: Read>(r: &mut R, what: &str) -> Result<[u8; N]> {
    let mut buf = [0u8; N];
    read_exact(r, &mut buf, what)?;
    Ok(buf)
}

pub fn write_embedding_table(table: &EmbeddingTable, path: impl AsRef<Path>) -> Result<()> {
    write_tables(std::slice::from_ref(table), path)
}

pub fn read_embedding_table(path: impl AsRef<Path>) -> Result<EmbeddingTable> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    EmbeddingTable::from_bytes(&bytes)
}

/// Writes several tables back to back, via a temporary file renamed into
/// place.
pub fn write_tables(tables: &[EmbeddingTable], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let tmp = path.with_extension("emb.tmp");
    {
        let file = File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
        let mut w = BufWriter::new(file);
        for t in tables {
            t.write_to(&mut w).map_err(|e| Error::io(&tmp, e))?;
        }
        w.flush().map_err(|e| Error::io(&tmp, e))?;
    }
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn read_tables(path: impl AsRef<Path>) -> Result<Vec<EmbeddingTable>> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut r = BufReader::new(file);
    let mut out = Vec::new();
    while let Some(t) = EmbeddingTable::read_from(&mut r)? {
        out.push(t);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn two_by_two() -> EmbeddingTable {
        let mut t = EmbeddingTable::new(2).unwrap();
        t.insert("a", vec![1.0, 0.0]).unwrap();
        t.insert("b", vec![0.0, 1.0]).unwrap();
        t
    }

    #[test]
    fn round_trip_small() {
        let t = two_by_two();
        let bytes = t.to_bytes();
        assert_eq!(&bytes[..4], b"EMB1");
        assert_eq!(u32::from_le_bytes(bytes[4..8].try_into().unwrap()), 2);
        assert_eq!(u64::from_le_bytes(bytes[8..16].try_into().unwrap()), 2);
        // 16 header + 2 * (2 + 1 + 8)
        assert_eq!(bytes.len(), 16 + 2 * 11);
        let back = EmbeddingTable::from_bytes(&bytes).unwrap();
        assert_eq!(back, t);
        assert_eq!(back.to_bytes(), bytes);
    }

    #[test]
    fn declared_count_larger_than_rows_is_truncation() {
        let mut bytes = two_by_two().to_bytes();
        bytes[8..16].copy_from_slice(&3u64.to_le_bytes());
        match EmbeddingTable::from_bytes(&bytes) {
            Err(Error::Truncated(msg)) => assert!(msg.contains("row 2"), "{msg}"),
            other => panic!("expected truncation, got {other:?}"),
        }
    }

    #[test]
    fn bad_magic_and_zero_dim() {
        let mut bytes = two_by_two().to_bytes();
        bytes[3] = b'2';
        assert!(matches!(EmbeddingTable::from_bytes(&bytes), Err(Error::BadMagic(_))));
        let mut bytes = two_by_two().to_bytes();
        bytes[4..8].copy_from_slice(&0u32.to_le_bytes());
        assert!(matches!(EmbeddingTable::from_bytes(&bytes), Err(Error::InvalidDim(0))));
        assert!(EmbeddingTable::new(0).is_err());
    }

    #[test]
    fn rejects_nan_duplicates_and_wrong_width() {
        let mut t = EmbeddingTable::new(2).unwrap();
        assert!(matches!(t.insert("x", vec![f32::NAN, 0.0]), Err(Error::NonFinite(_))));
        assert!(matches!(t.insert("x", vec![0.0]), Err(Error::DimMismatch { .. })));
        t.insert("x", vec![0.0, 0.0]).unwrap();
        assert!(matches!(t.insert("x", vec![1.0, 0.0]), Err(Error::DuplicateId(_))));
    }

    #[test]
    fn step_diagram_scale_round_trip() {
        let dim = 1024;
        let mut t = EmbeddingTable::new(dim).unwrap();
        for row in 0..8263usize {
            let values = (0..dim)
                .map(|k| ((row * 31 + k * 7) % 1000) as f32 / 1000.0 - 0.5)
                .collect();
            t.insert(format!("step-{row:05}"), values).unwrap();
        }
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("steps.emb");
        write_embedding_table(&t, &path).unwrap();
        let back = read_embedding_table(&path).unwrap();
        assert_eq!(back.len(), 8263);
        assert_eq!(back.dim(), 1024);
        assert_eq!(std::fs::read(&path).unwrap(), back.to_bytes());
        assert_eq!(back, t);
    }

    #[test]
    fn multi_table_file() {
        let a = two_by_two();
        let mut b = EmbeddingTable::new(1).unwrap();
        b.insert("s", vec![0.5]).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("multi.emb");
        write_tables(&[a.clone(), b.clone()], &path).unwrap();
        assert_eq!(read_tables(&path).unwrap(), vec![a, b]);
        // A single-table read refuses the trailing second table.
        assert!(read_embedding_table(&path).is_err());
    }
}
