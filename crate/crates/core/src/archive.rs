//! Named-array archive: the on-disk container for models, ground truth and
//! checkpoints.
//!
//! A single file of named, shape-tagged dense arrays with a versioned header.
//! All floats are little-endian f64; integer arrays (indices) are i64.
//!
//! ```text
//! magic   8 bytes  "FACEARC\0"
//! version u32
//! count   u32
//! entry*  name_len u32, name bytes, dtype u8 (0=f64, 1=i64),
//!         ndim u32, dims u64*ndim, payload
//! ```

use crate::error::{Error, Result};
use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

const MAGIC: &[u8; 8] = b"FACEARC\0";
const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub enum ArrayData {
    F64(Vec<f64>),
    I64(Vec<i64>),
}

#[derive(Debug, Clone, PartialEq)]
pub struct ArrayEntry {
    pub dims: Vec<usize>,
    pub data: ArrayData,
}

impl ArrayEntry {
    pub fn len(&self) -> usize {
        match &self.data {
            ArrayData::F64(v) => v.len(),
            ArrayData::I64(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// An ordered map of named arrays. Iteration order is name order, which makes
/// writes deterministic.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Archive {
    entries: BTreeMap<String, ArrayEntry>,
}

impl Archive {
    pub fn new() -> Self {
        Archive::default()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(|s| s.as_str())
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.contains_key(name)
    }

    pub fn insert_f64(&mut self, name: &str, dims: Vec<usize>, data: Vec<f64>) {
        assert_eq!(dims.iter().product::<usize>(), data.len(), "{name}: dims/len mismatch");
        self.entries.insert(
            name.to_string(),
            ArrayEntry { dims, data: ArrayData::F64(data) },
        );
    }

    pub fn insert_i64(&mut self, name: &str, dims: Vec<usize>, data: Vec<i64>) {
        assert_eq!(dims.iter().product::<usize>(), data.len(), "{name}: dims/len mismatch");
        self.entries.insert(
            name.to_string(),
            ArrayEntry { dims, data: ArrayData::I64(data) },
        );
    }

    pub fn insert_scalar(&mut self, name: &str, value: f64) {
        self.insert_f64(name, vec![1], vec![value]);
    }

    pub fn get(&self, name: &str) -> Option<&ArrayEntry> {
        self.entries.get(name)
    }

    pub fn f64_entry(&self, path: &Path, name: &str) -> Result<(&[usize], &[f64])> {
        match self.entries.get(name) {
            Some(ArrayEntry { dims, data: ArrayData::F64(v) }) => Ok((dims, v)),
            Some(_) => Err(Error::archive(path, format!("`{name}` is not an f64 array"))),
            None => Err(Error::archive(path, format!("missing array `{name}`"))),
        }
    }

    pub fn i64_entry(&self, path: &Path, name: &str) -> Result<(&[usize], &[i64])> {
        match self.entries.get(name) {
            Some(ArrayEntry { dims, data: ArrayData::I64(v) }) => Ok((dims, v)),
            Some(_) => Err(Error::archive(path, format!("`{name}` is not an i64 array"))),
            None => Err(Error::archive(path, format!("missing array `{name}`"))),
        }
    }

    pub fn scalar(&self, path: &Path, name: &str) -> Result<f64> {
        let (_, v) = self.f64_entry(path, name)?;
        if v.len() != 1 {
            return Err(Error::archive(path, format!("`{name}` is not a scalar")));
        }
        Ok(v[0])
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = std::io::BufWriter::new(file);
        let io = |e| Error::io(path, e);
        w.write_all(MAGIC).map_err(io)?;
        w.write_all(&VERSION.to_le_bytes()).map_err(io)?;
        w.write_all(&(self.entries.len() as u32).to_le_bytes()).map_err(io)?;
        for (name, entry) in &self.entries {
            w.write_all(&(name.len() as u32).to_le_bytes()).map_err(io)?;
            w.write_all(name.as_bytes()).map_err(io)?;
            let dtype: u8 = match &entry.data {
                ArrayData::F64(_) => 0,
                ArrayData::I64(_) => 1,
            };
            w.write_all(&[dtype]).map_err(io)?;
            w.write_all(&(entry.dims.len() as u32).to_le_bytes()).map_err(io)?;
            for &d in &entry.dims {
                w.write_all(&(d as u64).to_le_bytes()).map_err(io)?;
            }
            match &entry.data {
                ArrayData::F64(v) => {
                    for x in v {
                        w.write_all(&x.to_le_bytes()).map_err(io)?;
                    }
                }
                ArrayData::I64(v) => {
                    for x in v {
                        w.write_all(&x.to_le_bytes()).map_err(io)?;
                    }
                }
            }
        }
        w.flush().map_err(io)
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        let mut r = std::io::BufReader::new(file);
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic).map_err(|e| Error::io(path, e))?;
        if &magic != MAGIC {
            return Err(Error::archive(path, "bad magic; not a facefit archive"));
        }
        let version = read_u32(&mut r, path)?;
        if version != VERSION {
            return Err(Error::archive(path, format!("unsupported version {version}")));
        }
        let count = read_u32(&mut r, path)? as usize;
        let mut entries = BTreeMap::new();
        for _ in 0..count {
            let name_len = read_u32(&mut r, path)? as usize;
            if name_len > 4096 {
                return Err(Error::archive(path, "implausible name length"));
            }
            let mut name_bytes = vec![0u8; name_len];
            r.read_exact(&mut name_bytes).map_err(|e| Error::io(path, e))?;
            let name = String::from_utf8(name_bytes)
                .map_err(|_| Error::archive(path, "non-utf8 array name"))?;
            let mut dtype = [0u8; 1];
            r.read_exact(&mut dtype).map_err(|e| Error::io(path, e))?;
            let ndim = read_u32(&mut r, path)? as usize;
            if ndim > 8 {
                return Err(Error::archive(path, format!("`{name}`: implausible rank {ndim}")));
            }
            let mut dims = Vec::with_capacity(ndim);
            for _ in 0..ndim {
                let mut b = [0u8; 8];
                r.read_exact(&mut b).map_err(|e| Error::io(path, e))?;
                dims.push(u64::from_le_bytes(b) as usize);
            }
            let total: usize = dims.iter().product();
            if total > 1 << 32 {
                return Err(Error::archive(path, format!("`{name}`: implausible size")));
            }
            let data = match dtype[0] {
                0 => {
                    let mut v = Vec::with_capacity(total);
                    let mut b = [0u8; 8];
                    for _ in 0..total {
                        r.read_exact(&mut b).map_err(|e| Error::io(path, e))?;
                        v.push(f64::from_le_bytes(b));
                    }
                    ArrayData::F64(v)
                }
                1 => {
                    let mut v = Vec::with_capacity(total);
                    let mut b = [0u8; 8];
                    for _ in 0..total {
                        r.read_exact(&mut b).map_err(|e| Error::io(path, e))?;
                        v.push(i64::from_le_bytes(b));
                    }
                    ArrayData::I64(v)
                }
                other => {
                    return Err(Error::archive(path, format!("`{name}`: unknown dtype {other}")));
                }
            };
            entries.insert(name, ArrayEntry { dims, data });
        }
        Ok(Archive { entries })
    }
}

fn read_u32(r: &mut impl Read, path: &Path) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b).map_err(|e| Error::io(path, e))?;
    Ok(u32::from_le_bytes(b))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_is_bitwise() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.arc");
        let mut arc = Archive::new();
        arc.insert_f64("weights", vec![2, 3], vec![1.5, -2.25, 0.0, f64::MIN_POSITIVE, 1e300, -0.5]);
        arc.insert_i64("indices", vec![4], vec![0, -1, 7, i64::MAX]);
        arc.insert_scalar("iteration", 42.0);
        arc.write(&path).unwrap();
        let back = Archive::read(&path).unwrap();
        assert_eq!(back, arc);
    }

    #[test]
    fn writes_are_deterministic() {
        let dir = tempfile::tempdir().unwrap();
        let mut arc = Archive::new();
        arc.insert_f64("b", vec![2], vec![1.0, 2.0]);
        arc.insert_f64("a", vec![1], vec![3.0]);
        let p1 = dir.path().join("1.arc");
        let p2 = dir.path().join("2.arc");
        arc.write(&p1).unwrap();
        arc.write(&p2).unwrap();
        assert_eq!(std::fs::read(&p1).unwrap(), std::fs::read(&p2).unwrap());
    }

    #[test]
    fn missing_array_is_reported_by_name() {
        let arc = Archive::new();
        let err = arc.f64_entry(Path::new("x.arc"), "weights").unwrap_err();
        assert!(err.to_string().contains("weights"));
    }

    #[test]
    fn rejects_garbage() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.arc");
        std::fs::write(&path, b"not an archive at all").unwrap();
        assert!(Archive::read(&path).is_err());
    }
}
