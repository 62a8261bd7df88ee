//! Binary checkpoint format.
//!
//! ```text
//! "BDKD" | u32 version | u32 len, arch descriptor (UTF-8)
//! repeated: u32 len, name (UTF-8) | u8 dtype | u32 rank | u32 extents.. | values (LE)
//! ```

use std::path::Path;

use crate::error::{Error, Result};
use crate::nn::Module;

pub const MAGIC: &[u8; 4] = b"BDKD";
pub const VERSION: u32 = 1;

/// Stored element type.
#[derive(Clone, Debug, PartialEq)]
pub enum Values {
    F64(Vec<f64>),
    F32(Vec<f32>),
    U8(Vec<u8>),
}

impl Values {
    fn tag(&self) -> u8 {
        match self {
            Values::F64(_) => 0,
            Values::F32(_) => 1,
            Values::U8(_) => 2,
        }
    }

    pub fn len(&self) -> usize {
        match self {
            Values::F64(v) => v.len(),
            Values::F32(v) => v.len(),
            Values::U8(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Floating values widened to `f64`; `None` for byte records.
    pub fn to_f64(&self) -> Option<Vec<f64>> {
        match self {
            Values::F64(v) => Some(v.clone()),
            Values::F32(v) => Some(v.iter().map(|&x| f64::from(x)).collect()),
            Values::U8(_) => None,
        }
    }
}

/// Storage precision for floating-point records.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum Precision {
    #[default]
    F64,
    F32,
}

impl std::str::FromStr for Precision {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "f64" | "float64" => Ok(Precision::F64),
            "f32" | "float32" => Ok(Precision::F32),
            _ => Err(Error::Config(format!("precision must be f32 or f64, got {s:?}"))),
        }
    }
}

impl Precision {
    pub fn store(self, v: &[f64]) -> Values {
        match self {
            Precision::F64 => Values::F64(v.to_vec()),
            Precision::F32 => Values::F32(v.iter().map(|&x| x as f32).collect()),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Record {
    pub name: String,
    pub shape: Vec<usize>,
    pub values: Values,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub version: u32,
    pub arch: String,
    pub records: Vec<Record>,
}

fn put_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn put_str(out: &mut Vec<u8>, s: &str) {
    put_u32(out, s.len() as u32);
    out.extend_from_slice(s.as_bytes());
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Reader<'a> {
    fn err(&self, msg: impl Into<String>) -> Error {
        Error::Parse { path: self.path.to_path_buf(), offset: self.pos as u64, msg: msg.into() }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        match end {
            Some(end) => {
                let s = &self.bytes[self.pos..end];
                self.pos = end;
                Ok(s)
            }
            None => Err(self.err(format!("truncated: need {n} bytes, {} left", self.bytes.len() - self.pos))),
        }
    }

    fn u32(&mut self) -> Result<u32> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn string(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        let start = self.pos;
        let b = self.take(n)?;
        String::from_utf8(b.to_vec()).map_err(|_| Error::Parse { path: self.path.to_path_buf(), offset: start as u64, msg: "invalid UTF-8".into() })
    }
}

impl Checkpoint {
    pub fn new(arch: impl Into<String>) -> Self {
        Checkpoint { version: VERSION, arch: arch.into(), records: Vec::new() }
    }

    pub fn push(&mut self, name: impl Into<String>, shape: &[usize], values: Values) {
        self.records.push(Record { name: name.into(), shape: shape.to_vec(), values });
    }

    pub fn get(&self, name: &str) -> Option<&Record> {
        self.records.iter().find(|r| r.name == name)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        put_u32(&mut out, self.version);
        put_str(&mut out, &self.arch);
        for r in &self.records {
            put_str(&mut out, &r.name);
            out.push(r.values.tag());
            put_u32(&mut out, r.shape.len() as u32);
            for &d in &r.shape {
                put_u32(&mut out, d as u32);
            }
            match &r.values {
                Values::F64(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
                Values::F32(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
                Values::U8(v) => out.extend_from_slice(v),
            }
        }
        out
    }

    /// Parses checkpoint bytes; `path` only labels errors.
    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0, path };
        if r.take(4)? != MAGIC {
            return Err(Error::Parse { path: path.to_path_buf(), offset: 0, msg: "expected magic BDKD".into() });
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::Parse { path: path.to_path_buf(), offset: 4, msg: format!("unsupported version {version}") });
        }
        let arch = r.string()?;
        let mut records = Vec::new();
        while r.pos < bytes.len() {
            let name = r.string()?;
            let tag_at = r.pos;
            let tag = r.take(1)?[0];
            let rank = r.u32()? as usize;
            let shape = (0..rank).map(|_| r.u32().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
            let n: usize = shape.iter().product();
            let values = match tag {
                0 => Values::F64(r.take(n * 8)?.chunks(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect()),
                1 => Values::F32(r.take(n * 4)?.chunks(4).map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes"))).collect()),
                2 => Values::U8(r.take(n)?.to_vec()),
                t => return Err(Error::Parse { path: path.to_path_buf(), offset: tag_at as u64, msg: format!("unknown dtype tag {t}") }),
            };
            records.push(Record { name, shape, values });
        }
        Ok(Checkpoint { version, arch, records })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Checkpoint::from_bytes(&bytes, path)
    }

    /// Adds every parameter and buffer of `m` under `prefix`.
    pub fn push_module(&mut self, prefix: &str, m: &dyn Module, precision: Precision) {
        m.visit_params(&mut |p| self.push(format!("{prefix}{}", p.name), p.shape(), precision.store(p.value())));
        m.visit_buffers(&mut |name, v| self.push(format!("{prefix}{name}"), &[v.len()], precision.store(v)));
    }

    fn floats(&self, name: &str, expect: usize) -> Result<Vec<f64>> {
        let r = self.get(name).ok_or_else(|| Error::Config(format!("checkpoint lacks {name}")))?;
        let v = r.values.to_f64().ok_or_else(|| Error::Config(format!("checkpoint record {name} is not floating point")))?;
        if v.len() != expect {
            return Err(Error::Config(format!("checkpoint record {name} has {} values, expected {expect}", v.len())));
        }
        Ok(v)
    }

    /// Overwrites every parameter and buffer of `m` from records under
    /// `prefix`.
    pub fn restore_module(&self, prefix: &str, m: &mut dyn Module) -> Result<()> {
        let mut err = None;
        m.visit_params_mut(&mut |p| {
            if err.is_none() {
                match self.floats(&format!("{prefix}{}", p.name), p.numel()) {
                    Ok(v) => *p.value_mut() = v,
                    Err(e) => err = Some(e),
                }
            }
        });
        m.visit_buffers_mut(&mut |name, buf| {
            if err.is_none() {
                match self.floats(&format!("{prefix}{name}"), buf.len()) {
                    Ok(v) => *buf = v,
                    Err(e) => err = Some(e),
                }
            }
        });
        err.map_or(Ok(()), Err)
    }

    /// Adds optimizer velocities, named after the parameters they track.
    pub fn push_velocity(&mut self, prefix: &str, m: &dyn Module, velocity: &[Vec<f64>], precision: Precision) {
        let mut i = 0;
        m.visit_params(&mut |p| {
            self.push(format!("{prefix}{}", p.name), p.shape(), precision.store(&velocity[i]));
            i += 1;
        });
    }

    pub fn restore_velocity(&self, prefix: &str, m: &dyn Module, velocity: &mut [Vec<f64>]) -> Result<()> {
        let mut i = 0;
        let mut err = None;
        m.visit_params(&mut |p| {
            if err.is_none() {
                match self.floats(&format!("{prefix}{}", p.name), p.numel()) {
                    Ok(v) => velocity[i] = v,
                    Err(e) => err = Some(e),
                }
            }
            i += 1;
        });
        err.map_or(Ok(()), Err)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bytes_round_trip() {
        let mut c = Checkpoint::new("arch x");
        c.push("a", &[2, 2], Values::F64(vec![1.0, -2.5, f64::MIN_POSITIVE, 3.0]));
        c.push("b", &[3], Values::F32(vec![0.1, 0.2, 0.3]));
        c.push("meta", &[2], Values::U8(vec![7, 9]));
        c.push("scalar", &[], Values::F64(vec![4.0]));
        let bytes = c.to_bytes();
        assert_eq!(&bytes[..4], b"BDKD");
        let back = Checkpoint::from_bytes(&bytes, Path::new("mem")).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.to_bytes(), bytes);
    }

    #[test]
    fn truncation_and_bad_magic() {
        let mut c = Checkpoint::new("x");
        c.push("a", &[2], Values::F64(vec![1.0, 2.0]));
        let bytes = c.to_bytes();
        assert!(matches!(Checkpoint::from_bytes(&bytes[..bytes.len() - 1], Path::new("m")), Err(Error::Parse { .. })));
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(Checkpoint::from_bytes(&bad, Path::new("m")), Err(Error::Parse { offset: 0, .. })));
    }
}
