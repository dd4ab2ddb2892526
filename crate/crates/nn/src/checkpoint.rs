//! Self-describing checkpoint container.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic    8 bytes  "PXRLCKPT"
//! version  u32
//! count    u32
//! entries  count × { name_len u32, name utf-8, kind u8, payload }
//! checksum u64      FNV-1a over everything before it
//! ```
//!
//! Payloads: `F32` = `ndim u32, dims u64×ndim, f32×numel`; `U64`/`F64` =
//! `len u64` followed by the values; `Bytes` = `len u64` followed by raw bytes.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use crate::params::ParamStore;
use crate::real::Real;
use crate::tensor::Tensor;
use crate::{NnError, Result};

const MAGIC: &[u8; 8] = b"PXRLCKPT";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub enum Entry {
    F32 { shape: Vec<usize>, data: Vec<f32> },
    U64(Vec<u64>),
    F64(Vec<f64>),
    Bytes(Vec<u8>),
}

impl Entry {
    fn kind(&self) -> u8 {
        match self {
            Entry::F32 { .. } => 0,
            Entry::U64(_) => 1,
            Entry::F64(_) => 2,
            Entry::Bytes(_) => 3,
        }
    }
}

/// Name → entry map, serialized in name order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Container {
    entries: BTreeMap<String, Entry>,
}

fn corrupt(msg: impl Into<String>) -> NnError {
    NnError::Checkpoint(msg.into())
}

struct Fnv(u64);

impl Fnv {
    fn new() -> Self {
        Fnv(0xcbf29ce484222325)
    }
    fn eat(&mut self, bytes: &[u8]) {
        for &b in bytes {
            self.0 ^= b as u64;
            self.0 = self.0.wrapping_mul(0x100000001b3);
        }
    }
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(corrupt("unexpected end of checkpoint"));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }
    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
    fn len(&mut self, elem: usize) -> Result<usize> {
        let n = self.u64()? as usize;
        if n.checked_mul(elem).is_none_or(|b| b > self.buf.len() - self.pos) {
            return Err(corrupt("entry length exceeds file"));
        }
        Ok(n)
    }
}

impl Container {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, entry: Entry) {
        self.entries.insert(name.into(), entry);
    }

    pub fn get(&self, name: &str) -> Option<&Entry> {
        self.entries.get(name)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    fn missing(name: &str) -> NnError {
        corrupt(format!("missing entry `{name}`"))
    }

    pub fn tensor(&self, name: &str) -> Result<(&[usize], &[f32])> {
        match self.get(name) {
            Some(Entry::F32 { shape, data }) => Ok((shape, data)),
            Some(_) => Err(corrupt(format!("entry `{name}` is not a tensor"))),
            None => Err(Self::missing(name)),
        }
    }

    pub fn u64s(&self, name: &str) -> Result<&[u64]> {
        match self.get(name) {
            Some(Entry::U64(v)) => Ok(v),
            Some(_) => Err(corrupt(format!("entry `{name}` is not u64"))),
            None => Err(Self::missing(name)),
        }
    }

    pub fn f64s(&self, name: &str) -> Result<&[f64]> {
        match self.get(name) {
            Some(Entry::F64(v)) => Ok(v),
            Some(_) => Err(corrupt(format!("entry `{name}` is not f64"))),
            None => Err(Self::missing(name)),
        }
    }

    pub fn bytes(&self, name: &str) -> Result<&[u8]> {
        match self.get(name) {
            Some(Entry::Bytes(v)) => Ok(v),
            Some(_) => Err(corrupt(format!("entry `{name}` is not bytes"))),
            None => Err(Self::missing(name)),
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.entries.len() as u32).to_le_bytes());
        for (name, entry) in &self.entries {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.push(entry.kind());
            match entry {
                Entry::F32 { shape, data } => {
                    out.extend_from_slice(&(shape.len() as u32).to_le_bytes());
                    for &d in shape {
                        out.extend_from_slice(&(d as u64).to_le_bytes());
                    }
                    data.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes()));
                }
                Entry::U64(v) => {
                    out.extend_from_slice(&(v.len() as u64).to_le_bytes());
                    v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes()));
                }
                Entry::F64(v) => {
                    out.extend_from_slice(&(v.len() as u64).to_le_bytes());
                    v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes()));
                }
                Entry::Bytes(v) => {
                    out.extend_from_slice(&(v.len() as u64).to_le_bytes());
                    out.extend_from_slice(v);
                }
            }
        }
        let mut h = Fnv::new();
        h.eat(&out);
        out.extend_from_slice(&h.0.to_le_bytes());
        out
    }

    pub fn from_bytes(buf: &[u8]) -> Result<Self> {
        if buf.len() < 24 || &buf[..8] != MAGIC {
            return Err(corrupt("not a checkpoint file"));
        }
        let (body, tail) = buf.split_at(buf.len() - 8);
        let mut h = Fnv::new();
        h.eat(body);
        if h.0 != u64::from_le_bytes(tail.try_into().unwrap()) {
            return Err(corrupt("checksum mismatch"));
        }
        let mut c = Cursor { buf: body, pos: 8 };
        let version = c.u32()?;
        if version != FORMAT_VERSION {
            return Err(NnError::Version { found: version, expected: FORMAT_VERSION });
        }
        let count = c.u32()?;
        let mut entries = BTreeMap::new();
        for _ in 0..count {
            let name_len = c.u32()? as usize;
            let name = std::str::from_utf8(c.take(name_len)?)
                .map_err(|_| corrupt("entry name is not utf-8"))?
                .to_string();
            let kind = c.take(1)?[0];
            let entry = match kind {
                0 => {
                    let ndim = c.u32()? as usize;
                    let shape = (0..ndim).map(|_| c.u64().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
                    let n: usize = shape.iter().product();
                    let raw = c.take(n.checked_mul(4).ok_or_else(|| corrupt("tensor too large"))?)?;
                    let data = raw.chunks_exact(4).map(|b| f32::from_le_bytes(b.try_into().unwrap())).collect();
                    Entry::F32 { shape, data }
                }
                1 => {
                    let n = c.len(8)?;
                    Entry::U64((0..n).map(|_| c.u64()).collect::<Result<_>>()?)
                }
                2 => {
                    let n = c.len(8)?;
                    Entry::F64((0..n).map(|_| c.u64().map(f64::from_bits)).collect::<Result<_>>()?)
                }
                3 => {
                    let n = c.len(1)?;
                    Entry::Bytes(c.take(n)?.to_vec())
                }
                k => return Err(corrupt(format!("unknown entry kind {k}"))),
            };
            entries.insert(name, entry);
        }
        if c.pos != body.len() {
            return Err(corrupt("trailing bytes after entries"));
        }
        Ok(Self { entries })
    }

    pub fn write_to(&self, mut w: impl Write) -> Result<()> {
        w.write_all(&self.to_bytes())?;
        Ok(())
    }

    pub fn read_from(mut r: impl Read) -> Result<Self> {
        let mut buf = Vec::new();
        r.read_to_end(&mut buf)?;
        Self::from_bytes(&buf)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}

fn tensor_entry<T: Real>(t: &Tensor<T>) -> Entry {
    Entry::F32 { shape: t.shape().to_vec(), data: t.data().iter().map(|x| x.as_f64() as f32).collect() }
}

fn read_tensor<T: Real>(c: &Container, name: &str, expect: &[usize]) -> Result<Tensor<T>> {
    let (shape, data) = c.tensor(name)?;
    if shape != expect {
        return Err(NnError::Layout(format!("`{name}` has shape {shape:?}, expected {expect:?}")));
    }
    Tensor::new(shape, data.iter().map(|&x| T::lit(x as f64)).collect())
}

impl<T: Real> ParamStore<T> {
    /// Writes values, Adam moments and the Adam step under `prefix/`.
    pub fn export(&self, prefix: &str, c: &mut Container) {
        for id in self.ids() {
            let name = self.name(id);
            c.insert(format!("{prefix}/param/{name}"), tensor_entry(self.get(id)));
            c.insert(format!("{prefix}/adam_m/{name}"), tensor_entry(self.adam().first_moment(id)));
            c.insert(format!("{prefix}/adam_v/{name}"), tensor_entry(self.adam().second_moment(id)));
        }
        c.insert(format!("{prefix}/adam_step"), Entry::U64(vec![self.adam().step()]));
        let names = self.ids().map(|id| self.name(id)).collect::<Vec<_>>().join("\n");
        c.insert(format!("{prefix}/names"), Entry::Bytes(names.into_bytes()));
    }

    /// Restores what [`ParamStore::export`] wrote. The stored layout must match
    /// this store's names and shapes exactly.
    pub fn import(&mut self, prefix: &str, c: &Container) -> Result<()> {
        let names = String::from_utf8_lossy(c.bytes(&format!("{prefix}/names"))?).into_owned();
        let mine = self.ids().map(|id| self.name(id).to_string()).collect::<Vec<_>>().join("\n");
        if names != mine {
            return Err(NnError::Layout(format!("parameter names under `{prefix}` do not match")));
        }
        let mut state = self.new_adam_state();
        let mut values = Vec::with_capacity(self.len());
        for id in self.ids() {
            let name = self.name(id).to_string();
            let shape = self.get(id).shape().to_vec();
            values.push(read_tensor(c, &format!("{prefix}/param/{name}"), &shape)?);
            state.m[id.0] = read_tensor(c, &format!("{prefix}/adam_m/{name}"), &shape)?;
            state.v[id.0] = read_tensor(c, &format!("{prefix}/adam_v/{name}"), &shape)?;
        }
        state.step = *c
            .u64s(&format!("{prefix}/adam_step"))?
            .first()
            .ok_or_else(|| corrupt("empty adam step"))?;
        for (id, v) in self.ids().collect::<Vec<_>>().into_iter().zip(values) {
            *self.get_mut(id) = v;
        }
        self.replace_adam(state);
        self.zero_grad();
        Ok(())
    }

    /// Exports an extra optimizer state sharing this store's layout.
    pub fn export_adam_state(&self, state: &crate::params::AdamState<T>, prefix: &str, c: &mut Container) {
        for id in self.ids() {
            let name = self.name(id);
            c.insert(format!("{prefix}/m/{name}"), tensor_entry(state.first_moment(id)));
            c.insert(format!("{prefix}/v/{name}"), tensor_entry(state.second_moment(id)));
        }
        c.insert(format!("{prefix}/step"), Entry::U64(vec![state.step()]));
    }

    pub fn import_adam_state(&self, prefix: &str, c: &Container) -> Result<crate::params::AdamState<T>> {
        let mut state = self.new_adam_state();
        for id in self.ids() {
            let name = self.name(id);
            let shape = self.get(id).shape().to_vec();
            state.m[id.0] = read_tensor(c, &format!("{prefix}/m/{name}"), &shape)?;
            state.v[id.0] = read_tensor(c, &format!("{prefix}/v/{name}"), &shape)?;
        }
        state.step = *c.u64s(&format!("{prefix}/step"))?.first().ok_or_else(|| corrupt("empty step"))?;
        Ok(state)
    }
}
