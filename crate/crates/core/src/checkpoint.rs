//! Binary checkpoint format.
//!
//! Layout (little endian): magic `LOCOCKPT`, format version `u32`, dtype
//! string, iteration `u64`, learning rate `f64`, resolved config TOML, init
//! scheme, parameter groups (name, then per tensor name/rows/cols/values),
//! optional Adam state, optional runtime JSON, and a trailing CRC-32 of all
//! preceding bytes. Strings are `u32` length prefixed.

use std::io::Write;
use std::path::Path;

use crate::autodiff::Real;
use crate::nets::{GroupKind, Param, ParamGroup, ParamStore};
use crate::optim::{Adam, AdamState};
use crate::{Error, Result};

pub const MAGIC: &[u8; 8] = b"LOCOCKPT";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint<T> {
    pub config_toml: String,
    pub iteration: u64,
    pub lr: f64,
    pub store: ParamStore<T>,
    pub adam: Option<Adam>,
    pub runtime: Option<String>,
}

struct Writer(Vec<u8>);

impl Writer {
    fn u8(&mut self, v: u8) {
        self.0.push(v);
    }
    fn u32(&mut self, v: u32) {
        self.0.extend(v.to_le_bytes());
    }
    fn u64(&mut self, v: u64) {
        self.0.extend(v.to_le_bytes());
    }
    fn f64(&mut self, v: f64) {
        self.0.extend(v.to_le_bytes());
    }
    fn str(&mut self, s: &str) {
        self.u32(s.len() as u32);
        self.0.extend(s.as_bytes());
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(Error::Checkpoint(format!("truncated checkpoint at byte {}", self.pos)));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }
    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }
    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
    fn len(&mut self) -> Result<usize> {
        let n = self.u64()? as usize;
        if n > self.buf.len() {
            return Err(Error::Checkpoint(format!("implausible length {n}")));
        }
        Ok(n)
    }
    fn str(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|e| Error::Checkpoint(e.to_string()))
    }
}

fn write_value<T: Real>(w: &mut Writer, v: T) {
    if T::NAME == "f32" {
        w.0.extend((v.to_f64() as f32).to_le_bytes());
    } else {
        w.f64(v.to_f64());
    }
}

fn read_value<T: Real>(r: &mut Reader<'_>) -> Result<T> {
    if T::NAME == "f32" {
        Ok(T::of(f32::from_le_bytes(r.take(4)?.try_into().unwrap()) as f64))
    } else {
        Ok(T::of(r.f64()?))
    }
}

fn group(name: &str) -> Result<GroupKind> {
    GroupKind::from_name(name).ok_or_else(|| Error::Checkpoint(format!("unknown parameter group '{name}'")))
}

impl<T: Real> Checkpoint<T> {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = Writer(Vec::new());
        w.0.extend(MAGIC);
        w.u32(FORMAT_VERSION);
        w.str(T::NAME);
        w.u64(self.iteration);
        w.f64(self.lr);
        w.str(&self.config_toml);
        w.str(&self.store.init);
        w.u32(self.store.groups.len() as u32);
        for g in &self.store.groups {
            w.str(g.kind.name());
            w.u32(g.params.len() as u32);
            for p in &g.params {
                w.str(&p.name);
                w.u64(p.rows as u64);
                w.u64(p.cols as u64);
                for &v in &p.data {
                    write_value(&mut w, v);
                }
            }
        }
        match &self.adam {
            None => w.u8(0),
            Some(a) => {
                w.u8(1);
                w.f64(a.beta1);
                w.f64(a.beta2);
                w.f64(a.eps);
                w.u32(a.groups.len() as u32);
                for s in &a.groups {
                    w.str(s.kind.name());
                    w.u64(s.step);
                    w.u32(s.m.len() as u32);
                    for (m, v) in s.m.iter().zip(&s.v) {
                        w.u64(m.len() as u64);
                        m.iter().chain(v).for_each(|&x| w.f64(x));
                    }
                }
            }
        }
        match &self.runtime {
            None => w.u8(0),
            Some(s) => {
                w.u8(1);
                w.u64(s.len() as u64);
                w.0.extend(s.as_bytes());
            }
        }
        let crc = crc32fast::hash(&w.0);
        w.u32(crc);
        w.0
    }

    pub fn from_bytes(buf: &[u8]) -> Result<Self> {
        if buf.len() < MAGIC.len() + 8 || &buf[..8] != MAGIC {
            return Err(Error::Checkpoint("not a checkpoint file (bad magic)".into()));
        }
        let (body, tail) = buf.split_at(buf.len() - 4);
        let stored = u32::from_le_bytes(tail.try_into().unwrap());
        if crc32fast::hash(body) != stored {
            return Err(Error::Checkpoint("checksum mismatch, file is corrupt or partially written".into()));
        }
        let mut r = Reader { buf: body, pos: 8 };
        let version = r.u32()?;
        if version != FORMAT_VERSION {
            return Err(Error::Checkpoint(format!(
                "format version {version} is not supported (expected {FORMAT_VERSION})"
            )));
        }
        let dtype = r.str()?;
        if dtype != T::NAME {
            return Err(Error::Checkpoint(format!("checkpoint holds {dtype} values, loader expects {}", T::NAME)));
        }
        let iteration = r.u64()?;
        let lr = r.f64()?;
        let config_toml = r.str()?;
        let init = r.str()?;
        let ng = r.u32()?;
        let mut groups = Vec::new();
        for _ in 0..ng {
            let kind = group(&r.str()?)?;
            let np = r.u32()?;
            let mut params = Vec::new();
            for _ in 0..np {
                let name = r.str()?;
                let rows = r.len()?;
                let cols = r.len()?;
                let data = (0..rows * cols).map(|_| read_value::<T>(&mut r)).collect::<Result<Vec<T>>>()?;
                params.push(Param { name, rows, cols, data });
            }
            groups.push(ParamGroup { kind, params });
        }
        let adam = match r.u8()? {
            0 => None,
            _ => {
                let (beta1, beta2, eps) = (r.f64()?, r.f64()?, r.f64()?);
                let n = r.u32()?;
                let mut gs = Vec::new();
                for _ in 0..n {
                    let kind = group(&r.str()?)?;
                    let step = r.u64()?;
                    let np = r.u32()?;
                    let (mut m, mut v) = (Vec::new(), Vec::new());
                    for _ in 0..np {
                        let len = r.len()?;
                        m.push((0..len).map(|_| r.f64()).collect::<Result<Vec<_>>>()?);
                        v.push((0..len).map(|_| r.f64()).collect::<Result<Vec<_>>>()?);
                    }
                    gs.push(AdamState { kind, step, m, v });
                }
                Some(Adam { beta1, beta2, eps, groups: gs })
            }
        };
        let runtime = match r.u8()? {
            0 => None,
            _ => {
                let n = r.len()?;
                Some(String::from_utf8(r.take(n)?.to_vec()).map_err(|e| Error::Checkpoint(e.to_string()))?)
            }
        };
        if r.pos != body.len() {
            return Err(Error::Checkpoint(format!("{} trailing bytes", body.len() - r.pos)));
        }
        let store = ParamStore { groups, init };
        store.check_partition().map_err(|e| Error::Checkpoint(e.to_string()))?;
        Ok(Self { config_toml, iteration, lr, store, adam, runtime })
    }

    /// Write via a temporary file and rename, so readers never see a
    /// partial checkpoint.
    pub fn save(&self, path: &Path) -> Result<()> {
        let tmp = path.with_extension("tmp");
        {
            let mut f = std::fs::File::create(&tmp)?;
            f.write_all(&self.to_bytes())?;
            f.sync_all()?;
        }
        std::fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let buf = std::fs::read(path)
            .map_err(|e| Error::Checkpoint(format!("cannot read checkpoint {}: {e}", path.display())))?;
        Self::from_bytes(&buf)
    }
}
