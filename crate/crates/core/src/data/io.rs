//! `TDS1` dataset files.
//!
//! Little-endian: magic `TDS1`, u32 N, u32 C, u32 H, u32 W, u32 classes,
//! N·C·H·W f32 values, N u16 labels. Distilled sets append a manifest block:
//! magic `TDSM`, u64 iteration, u32 hash length, hash bytes (ASCII).

use std::fs;
use std::path::Path;

use super::LabeledDataset;
use crate::models::InputShape;
use crate::{Error, Result};

const MAGIC: &[u8; 4] = b"TDS1";
const MANIFEST_MAGIC: &[u8; 4] = b"TDSM";
const HEADER_LEN: usize = 4 + 5 * 4;

/// Provenance block carried by distilled-dataset files.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DatasetManifest {
    pub config_hash: String,
    pub iteration: u64,
}

pub fn encode_dataset(data: &LabeledDataset, manifest: Option<&DatasetManifest>) -> Result<Vec<u8>> {
    if data.classes > u16::MAX as usize + 1 {
        return Err(Error::Data(format!("{} classes do not fit u16 labels", data.classes)));
    }
    let s = data.shape;
    let mut out = Vec::with_capacity(HEADER_LEN + data.images.len() * 4 + data.len() * 2);
    out.extend_from_slice(MAGIC);
    for v in [data.len(), s.channels, s.height, s.width, data.classes] {
        let v = u32::try_from(v).map_err(|_| Error::Data(format!("extent {v} exceeds u32")))?;
        out.extend_from_slice(&v.to_le_bytes());
    }
    for &v in &data.images {
        out.extend_from_slice(&(v as f32).to_le_bytes());
    }
    for &l in &data.labels {
        out.extend_from_slice(&(l as u16).to_le_bytes());
    }
    if let Some(m) = manifest {
        out.extend_from_slice(MANIFEST_MAGIC);
        out.extend_from_slice(&m.iteration.to_le_bytes());
        out.extend_from_slice(&(m.config_hash.len() as u32).to_le_bytes());
        out.extend_from_slice(m.config_hash.as_bytes());
    }
    Ok(out)
}

pub(crate) struct Reader<'a> {
    pub(crate) path: &'a Path,
    pub(crate) bytes: &'a [u8],
    pub(crate) pos: usize,
}

impl<'a> Reader<'a> {
    pub(crate) fn new(path: &'a Path, bytes: &'a [u8]) -> Self {
        Reader { path, bytes, pos: 0 }
    }

    pub(crate) fn fail(&self, detail: impl Into<String>) -> Error {
        Error::Format { path: self.path.to_path_buf(), offset: self.pos as u64, detail: detail.into() }
    }

    pub(crate) fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let remaining = self.bytes.len() - self.pos;
        if remaining < n {
            return Err(self.fail(format!(
                "truncated {what}: expected {n} bytes, found {remaining} (file length {})",
                self.bytes.len()
            )));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    pub(crate) fn magic(&mut self, magic: &[u8; 4]) -> Result<()> {
        let got = self.take(4, "magic")?;
        if got != magic {
            self.pos -= 4;
            return Err(self.fail(format!(
                "bad magic {:?}, expected {:?}",
                String::from_utf8_lossy(got),
                String::from_utf8_lossy(magic)
            )));
        }
        Ok(())
    }

    pub(crate) fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    pub(crate) fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }

    pub(crate) fn f32s(&mut self, n: usize, what: &str) -> Result<Vec<f32>> {
        let raw = self.take(n * 4, what)?;
        Ok(raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect())
    }

    pub(crate) fn done(&self) -> bool {
        self.pos == self.bytes.len()
    }
}

pub fn decode_dataset(path: &Path, bytes: &[u8]) -> Result<(LabeledDataset, Option<DatasetManifest>)> {
    let mut r = Reader::new(path, bytes);
    r.magic(MAGIC)?;
    let n = r.u32("sample count")? as usize;
    let c = r.u32("channels")? as usize;
    let h = r.u32("height")? as usize;
    let w = r.u32("width")? as usize;
    let classes = r.u32("class count")? as usize;
    if n == 0 || c == 0 || h == 0 || w == 0 || classes == 0 {
        return Err(Error::Format {
            path: path.to_path_buf(),
            offset: 4,
            detail: format!("degenerate header N={n} C={c} H={h} W={w} classes={classes}"),
        });
    }
    let body = n * (c * h * w * 4 + 2);
    let available = bytes.len() - HEADER_LEN;
    if available < body {
        return Err(r.fail(format!(
            "length mismatch: header promises {body} body bytes, file has {available}"
        )));
    }
    let images: Vec<f64> = r.f32s(n * c * h * w, "images")?.into_iter().map(f64::from).collect();
    let raw = r.take(n * 2, "labels")?;
    let labels: Vec<usize> = raw.chunks_exact(2).map(|b| u16::from_le_bytes([b[0], b[1]]) as usize).collect();
    let label_start = HEADER_LEN + n * c * h * w * 4;
    if let Some(k) = labels.iter().position(|&l| l >= classes) {
        return Err(Error::Format {
            path: path.to_path_buf(),
            offset: (label_start + 2 * k) as u64,
            detail: format!("label {} outside {classes} classes", labels[k]),
        });
    }
    let manifest = if r.done() {
        None
    } else {
        r.magic(MANIFEST_MAGIC)?;
        let iteration = r.u64("manifest iteration")?;
        let len = r.u32("manifest hash length")? as usize;
        let hash = r.take(len, "manifest hash")?;
        let config_hash = String::from_utf8(hash.to_vec()).map_err(|_| r.fail("manifest hash is not UTF-8"))?;
        if !r.done() {
            return Err(r.fail("trailing bytes after manifest"));
        }
        Some(DatasetManifest { config_hash, iteration })
    };
    let shape = InputShape { channels: c, height: h, width: w };
    Ok((LabeledDataset { images, shape, labels, classes }, manifest))
}

/// Hex SHA-256 of the encoded dataset, used to key derived artifacts.
pub fn dataset_digest(data: &LabeledDataset) -> Result<String> {
    Ok(crate::sha256_hex(&encode_dataset(data, None)?))
}

pub fn write_dataset(path: &Path, data: &LabeledDataset, manifest: Option<&DatasetManifest>) -> Result<()> {
    let bytes = encode_dataset(data, manifest)?;
    crate::write_atomic(path, &bytes)
}

pub fn read_dataset(path: &Path) -> Result<(LabeledDataset, Option<DatasetManifest>)> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_dataset(path, &bytes)
}
