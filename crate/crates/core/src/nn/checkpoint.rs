//! `PFCK` tensor container.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! "PFCK" | u32 version=1 | u32 count
//! count x { u16 name_len | name (utf-8) | u8 rank | rank x u32 dim | f32 data }
//! ```
//!
//! Hyperparameters travel in a JSON sidecar next to the binary file.

use std::fs;
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::Serialize;

use super::{ParamStore, Tensor};
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"PFCK";
pub const VERSION: u32 = 1;

/// Ordered list of named f32 tensors.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Checkpoint {
    pub entries: Vec<(String, Tensor<f32>)>,
}

impl Checkpoint {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn from_store(store: &ParamStore<f32>) -> Self {
        Checkpoint {
            entries: store
                .iter()
                .map(|(n, t)| (n.to_string(), t.clone()))
                .collect(),
        }
    }

    pub fn push(&mut self, name: impl Into<String>, t: Tensor<f32>) {
        self.entries.push((name.into(), t));
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<f32>> {
        self.entries.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn require(&self, name: &str) -> Result<&Tensor<f32>> {
        self.get(name)
            .ok_or_else(|| Error::config(format!("checkpoint has no entry {name:?}")))
    }

    /// Overwrite every store entry from the checkpoint; names and shapes must match.
    pub fn restore_into(&self, store: &mut ParamStore<f32>) -> Result<()> {
        let names: Vec<String> = store.names().to_vec();
        for name in names {
            let t = self.require(&name)?;
            store.set(&name, t.clone())?;
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(self.entries.len() as u32).to_le_bytes());
        for (name, t) in &self.entries {
            let nb = name.as_bytes();
            if nb.len() > u16::MAX as usize {
                return Err(Error::config(format!("entry name too long: {name}")));
            }
            if t.rank() > u8::MAX as usize {
                return Err(Error::dim(format!("rank too large for {name}")));
            }
            out.extend_from_slice(&(nb.len() as u16).to_le_bytes());
            out.extend_from_slice(nb);
            out.push(t.rank() as u8);
            for &d in t.shape() {
                let d =
                    u32::try_from(d).map_err(|_| Error::dim(format!("dim too large in {name}")))?;
                out.extend_from_slice(&d.to_le_bytes());
            }
            for x in t.data() {
                out.extend_from_slice(&x.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::new(bytes);
        let magic = r.take(4)?;
        if magic != MAGIC {
            return Err(Error::format(0, "bad magic, expected PFCK"));
        }
        let at = r.pos;
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::format(at, format!("unsupported version {version}")));
        }
        let count = r.u32()? as usize;
        let mut entries = Vec::with_capacity(count.min(1 << 16));
        for _ in 0..count {
            let len = r.u16()? as usize;
            let at = r.pos;
            let name = std::str::from_utf8(r.take(len)?)
                .map_err(|_| Error::format(at, "entry name is not utf-8"))?
                .to_string();
            let rank = r.u8()? as usize;
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(r.u32()? as usize);
            }
            let at = r.pos;
            let n = shape
                .iter()
                .try_fold(1usize, |acc, &d| acc.checked_mul(d))
                .ok_or_else(|| Error::format(at, "tensor size overflows"))?;
            let raw = r.take(
                n.checked_mul(4)
                    .ok_or_else(|| Error::format(at, "tensor size overflows"))?,
            )?;
            let data = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect();
            entries.push((name, Tensor::new(&shape, data)?));
        }
        if r.pos != bytes.len() {
            return Err(Error::format(r.pos, "trailing bytes after last entry"));
        }
        Ok(Checkpoint { entries })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

/// `model.pfck` -> `model.pfck.json`.
pub fn sidecar_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".json");
    PathBuf::from(s)
}

pub fn write_sidecar<M: Serialize>(path: &Path, meta: &M) -> Result<()> {
    let side = sidecar_path(path);
    let text = serde_json::to_string_pretty(meta)?;
    fs::write(&side, text).map_err(|e| Error::io(side, e))
}

pub fn read_sidecar<M: DeserializeOwned>(path: &Path) -> Result<M> {
    let side = sidecar_path(path);
    let text = fs::read_to_string(&side).map_err(|e| Error::io(&side, e))?;
    serde_json::from_str(&text).map_err(|e| Error::config(format!("{}: {e}", side.display())))
}

pub(crate) struct Reader<'a> {
    bytes: &'a [u8],
    pub(crate) pos: usize,
}

impl<'a> Reader<'a> {
    pub(crate) fn new(bytes: &'a [u8]) -> Self {
        Reader { bytes, pos: 0 }
    }

    pub(crate) fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| {
                Error::format(
                    self.pos,
                    format!(
                        "truncated: need {n} bytes, {} left",
                        self.bytes.len() - self.pos
                    ),
                )
            })?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    pub(crate) fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    pub(crate) fn u16(&mut self) -> Result<u16> {
        let b = self.take(2)?;
        Ok(u16::from_le_bytes([b[0], b[1]]))
    }

    pub(crate) fn u32(&mut self) -> Result<u32> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    pub(crate) fn f32(&mut self) -> Result<f32> {
        let b = self.take(4)?;
        Ok(f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    pub(crate) fn f32s(&mut self, n: usize) -> Result<Vec<f32>> {
        let at = self.pos;
        let len = n
            .checked_mul(4)
            .ok_or_else(|| Error::format(at, "length overflows"))?;
        Ok(self
            .take(len)?
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect())
    }

    pub(crate) fn remaining(&self) -> usize {
        self.bytes.len() - self.pos
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Checkpoint {
        let mut c = Checkpoint::new();
        c.push(
            "a.weight",
            Tensor::new(&[2, 3], vec![1.0, -2.0, 3.5, 0.0, f32::MIN_POSITIVE, 7.0]).unwrap(),
        );
        c.push("b", Tensor::new(&[1], vec![0.25]).unwrap());
        c
    }

    #[test]
    fn exact_layout() {
        let mut c = Checkpoint::new();
        c.push("w", Tensor::new(&[2], vec![1.0, -1.0]).unwrap());
        let b = c.to_bytes().unwrap();
        let mut want = b"PFCK".to_vec();
        want.extend_from_slice(&1u32.to_le_bytes());
        want.extend_from_slice(&1u32.to_le_bytes());
        want.extend_from_slice(&1u16.to_le_bytes());
        want.push(b'w');
        want.push(1);
        want.extend_from_slice(&2u32.to_le_bytes());
        want.extend_from_slice(&1.0f32.to_le_bytes());
        want.extend_from_slice(&(-1.0f32).to_le_bytes());
        assert_eq!(b, want);
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let c = sample();
        assert_eq!(Checkpoint::from_bytes(&c.to_bytes().unwrap()).unwrap(), c);
    }

    #[test]
    fn bad_magic_and_truncation() {
        let mut b = sample().to_bytes().unwrap();
        let short = &b[..b.len() - 3];
        match Checkpoint::from_bytes(short) {
            Err(Error::Format { offset, .. }) => assert!(offset > 12),
            other => panic!("{other:?}"),
        }
        b[1] = b'X';
        assert!(matches!(
            Checkpoint::from_bytes(&b),
            Err(Error::Format { offset: 0, .. })
        ));
    }

    #[test]
    fn wrong_version() {
        let mut b = sample().to_bytes().unwrap();
        b[4] = 2;
        assert!(matches!(
            Checkpoint::from_bytes(&b),
            Err(Error::Format { offset: 4, .. })
        ));
    }

    #[test]
    fn sidecar_name() {
        assert_eq!(
            sidecar_path(Path::new("/x/m.pfck")),
            PathBuf::from("/x/m.pfck.json")
        );
    }
}
