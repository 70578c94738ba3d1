//! Named-tensor container files.
//!
//! Layout (little-endian): 4-byte magic, u32 version, u32 tensor count, then
//! per tensor a u16 name length, the UTF-8 name, a u8 rank, u32 dims and f32
//! values. The same layout backs several magics.

use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};
use crate::numerics::{ParamStore, Real, Tensor};

pub const CHECKPOINT_MAGIC: [u8; 4] = *b"SOFC";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TensorTable {
    pub entries: Vec<(String, Tensor<f32>)>,
}

impl TensorTable {
    pub fn push(&mut self, name: impl Into<String>, t: Tensor<f32>) {
        self.entries.push((name.into(), t));
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<f32>> {
        self.entries.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn require(&self, name: &str) -> Result<&Tensor<f32>> {
        self.get(name)
            .ok_or_else(|| Error::Format(format!("missing tensor {name}")))
    }

    pub fn push_text(&mut self, name: &str, text: &str) {
        let bytes: Vec<f32> = text.bytes().map(f32::from).collect();
        let n = bytes.len();
        self.push(name, Tensor::new(&[n], bytes).expect("text tensor"));
    }

    pub fn text(&self, name: &str) -> Result<String> {
        let bytes = self
            .require(name)?
            .data()
            .iter()
            .map(|&v| {
                if (0.0..=255.0).contains(&v) && v.fract() == 0.0 {
                    Ok(v as u8)
                } else {
                    Err(Error::Corruption(format!("{name} holds a non-byte value {v}")))
                }
            })
            .collect::<Result<Vec<u8>>>()?;
        String::from_utf8(bytes).map_err(|e| Error::Corruption(format!("{name}: {e}")))
    }

    pub fn push_store<T: Real>(&mut self, store: &ParamStore<T>, prefix: &str) {
        for (name, t) in store.iter() {
            self.push(format!("{prefix}{name}"), t.cast());
        }
    }

    /// Copies every tensor named `{prefix}{param}` into `store`.
    pub fn fill_store<T: Real>(&self, store: &mut ParamStore<T>, prefix: &str) -> Result<()> {
        for id in store.ids().collect::<Vec<_>>() {
            let name = format!("{prefix}{}", store.name(id));
            let t = self.require(&name)?;
            store.set(id, t.cast())?;
        }
        Ok(())
    }

    pub fn to_bytes(&self, magic: [u8; 4]) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        out.extend_from_slice(&magic);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.entries.len() as u32).to_le_bytes());
        for (name, t) in &self.entries {
            let nb = name.as_bytes();
            let len = u16::try_from(nb.len()).map_err(|_| Error::invalid(format!("tensor name too long: {name}")))?;
            let rank = u8::try_from(t.ndim()).map_err(|_| Error::invalid(format!("rank of {name} too large")))?;
            out.extend_from_slice(&len.to_le_bytes());
            out.extend_from_slice(nb);
            out.push(rank);
            for &d in t.shape() {
                let d = u32::try_from(d).map_err(|_| Error::invalid(format!("dimension of {name} too large")))?;
                out.extend_from_slice(&d.to_le_bytes());
            }
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8], magic: [u8; 4]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        let found = r.take(4)?;
        if found != magic {
            return Err(Error::Format(format!(
                "expected magic {:?}, found {:?}",
                String::from_utf8_lossy(&magic),
                String::from_utf8_lossy(found)
            )));
        }
        let version = r.u32()?;
        if version != FORMAT_VERSION {
            return Err(Error::Version {
                found: version,
                expected: FORMAT_VERSION,
            });
        }
        let count = r.u32()? as usize;
        let mut table = Self::default();
        for _ in 0..count {
            let len = u16::from_le_bytes(r.take(2)?.try_into().unwrap()) as usize;
            let name = std::str::from_utf8(r.take(len)?)
                .map_err(|e| Error::Corruption(format!("tensor name: {e}")))?
                .to_string();
            let rank = r.take(1)?[0] as usize;
            let shape = (0..rank).map(|_| r.u32().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
            let n: usize = shape.iter().product();
            let raw = r.take(n.checked_mul(4).ok_or_else(|| Error::Corruption("tensor size overflow".into()))?)?;
            let data = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                .collect();
            table.push(name, Tensor::new(&shape, data)?);
        }
        if r.pos != bytes.len() {
            return Err(Error::Corruption(format!(
                "{} trailing bytes after the last tensor",
                bytes.len() - r.pos
            )));
        }
        Ok(table)
    }

    /// Writes through a temporary sibling file and renames it into place.
    pub fn save(&self, path: &Path, magic: [u8; 4]) -> Result<()> {
        let bytes = self.to_bytes(magic)?;
        let tmp = path.with_extension("partial");
        let mut f = std::fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
        f.write_all(&bytes).map_err(|e| Error::io(&tmp, e))?;
        f.sync_all().map_err(|e| Error::io(&tmp, e))?;
        std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path, magic: [u8; 4]) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes, magic)
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or_else(|| {
            Error::Corruption(format!(
                "file truncated: wanted {n} bytes at offset {}, {} available",
                self.pos,
                self.bytes.len() - self.pos
            ))
        })?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> TensorTable {
        let mut t = TensorTable::default();
        t.push("a", Tensor::new(&[2, 2], vec![1.0, -0.0, f32::MIN_POSITIVE, 3.5]).unwrap());
        t.push("scalar", Tensor::scalar(7.25));
        t.push_text("meta/config", "width=8\nname=é\n");
        t
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let t = sample();
        let bytes = t.to_bytes(CHECKPOINT_MAGIC).unwrap();
        let back = TensorTable::from_bytes(&bytes, CHECKPOINT_MAGIC).unwrap();
        assert_eq!(back.to_bytes(CHECKPOINT_MAGIC).unwrap(), bytes);
        assert_eq!(back.text("meta/config").unwrap(), "width=8\nname=é\n");
        let bits = |t: &TensorTable| t.get("a").unwrap().data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&back), bits(&t));
    }

    #[test]
    fn rejects_bad_magic_version_and_truncation() {
        let bytes = sample().to_bytes(CHECKPOINT_MAGIC).unwrap();
        let mut bad = bytes.clone();
        bad[..4].copy_from_slice(b"XXXX");
        assert!(matches!(TensorTable::from_bytes(&bad, CHECKPOINT_MAGIC), Err(Error::Format(_))));
        let mut ver = bytes.clone();
        ver[4] = 9;
        assert!(matches!(
            TensorTable::from_bytes(&ver, CHECKPOINT_MAGIC),
            Err(Error::Version { found: 9, expected: 1 })
        ));
        for cut in [3, 10, 20, bytes.len() - 1] {
            assert!(matches!(
                TensorTable::from_bytes(&bytes[..cut], CHECKPOINT_MAGIC),
                Err(Error::Corruption(_)) | Err(Error::Format(_))
            ));
        }
        assert!(matches!(TensorTable::from_bytes(&bytes, *b"SOFG"), Err(Error::Format(_))));
    }

    #[test]
    fn failed_load_leaves_no_partial_state() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("x.sofc");
        sample().save(&p, CHECKPOINT_MAGIC).unwrap();
        let bytes = std::fs::read(&p).unwrap();
        std::fs::write(&p, &bytes[..bytes.len() - 6]).unwrap();
        assert!(matches!(TensorTable::load(&p, CHECKPOINT_MAGIC), Err(Error::Corruption(_))));
    }
}
