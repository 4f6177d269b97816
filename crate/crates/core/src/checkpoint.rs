//! Versioned binary container for named f32 tensors.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic        8 bytes   "EMBRECK\0"
//! version      u32       FORMAT_VERSION
//! flags        u32       presence bits (FLAG_*)
//! n_meta       u32
//!   key_len    u16, key bytes (UTF-8)
//!   val_len    u32, value bytes (UTF-8)
//! n_sections   u32
//!   name_len   u16, name bytes (UTF-8)
//!   rank       u8
//!   dims       u32 x rank
//!   data       f32 x prod(dims), row-major
//! ```
//!
//! Metadata keys are written in sorted order, sections in insertion order, so
//! equal contents always serialize to equal bytes.

use std::collections::BTreeMap;
use std::path::Path;

use ndarray::{Array1, Array2};

use crate::error::{Error, Result};

pub const MAGIC: &[u8; 8] = b"EMBRECK\0";
pub const FORMAT_VERSION: u32 = 1;

pub const FLAG_CF: u32 = 1 << 0;
pub const FLAG_BACKBONE: u32 = 1 << 1;
pub const FLAG_LORA: u32 = 1 << 2;
pub const FLAG_PROJECTORS: u32 = 1 << 3;

#[derive(Debug, Clone, PartialEq)]
pub struct Section {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

impl Section {
    /// Raw little-endian payload, for byte-level comparisons.
    pub fn payload_bytes(&self) -> Vec<u8> {
        self.data.iter().flat_map(|v| v.to_le_bytes()).collect()
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TensorFile {
    pub flags: u32,
    pub meta: BTreeMap<String, String>,
    pub sections: Vec<Section>,
}

impl TensorFile {
    pub fn new(flags: u32) -> Self {
        TensorFile {
            flags,
            ..Default::default()
        }
    }

    pub fn has(&self, flag: u32) -> bool {
        self.flags & flag != 0
    }

    pub fn set_meta(&mut self, key: &str, value: impl ToString) {
        self.meta.insert(key.to_owned(), value.to_string());
    }

    pub fn meta(&self, key: &str) -> Option<&str> {
        self.meta.get(key).map(String::as_str)
    }

    pub fn meta_parse<T: std::str::FromStr>(&self, key: &str) -> Result<T> {
        let raw = self
            .meta(key)
            .ok_or_else(|| Error::invalid(format!("checkpoint metadata lacks {key}")))?;
        raw.parse()
            .map_err(|_| Error::invalid(format!("checkpoint metadata {key}={raw} is malformed")))
    }

    pub fn section(&self, name: &str) -> Option<&Section> {
        self.sections.iter().find(|s| s.name == name)
    }

    pub fn sections_with_prefix<'a>(
        &'a self,
        prefix: &'a str,
    ) -> impl Iterator<Item = &'a Section> {
        self.sections
            .iter()
            .filter(move |s| s.name.starts_with(prefix))
    }

    pub fn push(&mut self, name: impl Into<String>, shape: Vec<usize>, data: Vec<f32>) {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        self.sections.push(Section {
            name: name.into(),
            shape,
            data,
        });
    }

    pub fn push_matrix(&mut self, name: impl Into<String>, m: &Array2<f64>) {
        let shape = vec![m.nrows(), m.ncols()];
        self.push(name, shape, m.iter().map(|&v| v as f32).collect());
    }

    pub fn push_vector(&mut self, name: impl Into<String>, v: &Array1<f64>) {
        self.push(name, vec![v.len()], v.iter().map(|&x| x as f32).collect());
    }

    fn require(&self, name: &str) -> Result<&Section> {
        self.section(name)
            .ok_or_else(|| Error::invalid(format!("checkpoint lacks section {name}")))
    }

    pub fn matrix(&self, name: &str) -> Result<Array2<f64>> {
        let s = self.require(name)?;
        if s.shape.len() != 2 {
            return Err(Error::Shape {
                what: "checkpoint matrix",
                expected: "rank 2".into(),
                got: format!("{:?}", s.shape),
            });
        }
        let data = s.data.iter().map(|&v| f64::from(v)).collect();
        Ok(Array2::from_shape_vec((s.shape[0], s.shape[1]), data).expect("validated shape"))
    }

    pub fn vector(&self, name: &str) -> Result<Array1<f64>> {
        let s = self.require(name)?;
        if s.shape.len() != 1 {
            return Err(Error::Shape {
                what: "checkpoint vector",
                expected: "rank 1".into(),
                got: format!("{:?}", s.shape),
            });
        }
        Ok(s.data.iter().map(|&v| f64::from(v)).collect())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&self.flags.to_le_bytes());
        out.extend_from_slice(&(self.meta.len() as u32).to_le_bytes());
        for (k, v) in &self.meta {
            out.extend_from_slice(&(k.len() as u16).to_le_bytes());
            out.extend_from_slice(k.as_bytes());
            out.extend_from_slice(&(v.len() as u32).to_le_bytes());
            out.extend_from_slice(v.as_bytes());
        }
        out.extend_from_slice(&(self.sections.len() as u32).to_le_bytes());
        for s in &self.sections {
            out.extend_from_slice(&(s.name.len() as u16).to_le_bytes());
            out.extend_from_slice(s.name.as_bytes());
            out.push(s.shape.len() as u8);
            for &d in &s.shape {
                out.extend_from_slice(&(d as u32).to_le_bytes());
            }
            for v in &s.data {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> std::result::Result<Self, String> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(8)? != MAGIC {
            return Err("bad magic".into());
        }
        let version = r.u32()?;
        if version != FORMAT_VERSION {
            return Err(format!("unsupported format version {version}"));
        }
        let flags = r.u32()?;
        let mut meta = BTreeMap::new();
        for _ in 0..r.u32()? {
            let klen = r.u16()? as usize;
            let key = r.string(klen)?;
            let vlen = r.u32()? as usize;
            let value = r.string(vlen)?;
            meta.insert(key, value);
        }
        let n_sections = r.u32()?;
        let mut sections = Vec::with_capacity(n_sections as usize);
        for _ in 0..n_sections {
            let nlen = r.u16()? as usize;
            let name = r.string(nlen)?;
            let rank = r.take(1)?[0] as usize;
            let shape = (0..rank)
                .map(|_| r.u32().map(|d| d as usize))
                .collect::<std::result::Result<Vec<_>, _>>()?;
            let count: usize = shape.iter().product();
            let raw = r.take(count * 4)?;
            let data = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect();
            sections.push(Section { name, shape, data });
        }
        if r.pos != bytes.len() {
            return Err(format!("{} trailing bytes", bytes.len() - r.pos));
        }
        Ok(TensorFile {
            flags,
            meta,
            sections,
        })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes())
            .map_err(|e| Error::io(format!("writing {}", path.display()), e))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let bytes =
            std::fs::read(path).map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
        Self::from_bytes(&bytes).map_err(|message| Error::Checkpoint {
            path: path.to_owned(),
            message,
        })
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> std::result::Result<&'a [u8], String> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| format!("truncated at byte {}", self.pos))?;
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u16(&mut self) -> std::result::Result<u16, String> {
        let b = self.take(2)?;
        Ok(u16::from_le_bytes([b[0], b[1]]))
    }

    fn u32(&mut self) -> std::result::Result<u32, String> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn string(&mut self, n: usize) -> std::result::Result<String, String> {
        let raw = self.take(n)?;
        String::from_utf8(raw.to_vec()).map_err(|_| "invalid UTF-8 in name".to_owned())
    }
}
