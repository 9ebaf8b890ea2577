//! "ETCN" model container.
//!
//! Layout, little-endian throughout:
//!
//! ```text
//! magic    b"ETCN"
//! version  u32 = 1
//! meta     u32 byte length, then UTF-8 "key=value" lines
//! count    u32 number of tensors
//! tensor*  u32 name length, UTF-8 name,
//!          u8 dtype (0 = real32, 1 = int8, 2 = int32),
//!          u32 rank, rank x u32 dims, raw element data
//! ```

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"ETCN";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub enum TensorData {
    Real32(Vec<f32>),
    Int8(Vec<i8>),
    Int32(Vec<i32>),
}

impl TensorData {
    pub fn dtype_code(&self) -> u8 {
        match self {
            TensorData::Real32(_) => 0,
            TensorData::Int8(_) => 1,
            TensorData::Int32(_) => 2,
        }
    }

    pub fn len(&self) -> usize {
        match self {
            TensorData::Real32(v) => v.len(),
            TensorData::Int8(v) => v.len(),
            TensorData::Int32(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub name: String,
    pub dims: Vec<usize>,
    pub data: TensorData,
}

/// Ordered metadata plus named tensors.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Container {
    pub meta: BTreeMap<String, String>,
    pub tensors: Vec<Tensor>,
}

impl Container {
    pub fn set_meta(&mut self, key: &str, value: impl ToString) {
        self.meta.insert(key.to_string(), value.to_string());
    }

    pub fn meta_str(&self, key: &str) -> Result<&str> {
        self.meta
            .get(key)
            .map(String::as_str)
            .ok_or_else(|| Error::Container(format!("missing metadata key {key:?}")))
    }

    pub fn meta_parse<T: std::str::FromStr>(&self, key: &str) -> Result<T> {
        let raw = self.meta_str(key)?;
        raw.parse()
            .map_err(|_| Error::Container(format!("metadata {key}={raw:?} is malformed")))
    }

    pub fn is_quantized(&self) -> bool {
        self.meta.get("quantized").map(String::as_str) == Some("1")
    }

    pub fn push(&mut self, name: impl Into<String>, dims: Vec<usize>, data: TensorData) {
        self.tensors.push(Tensor {
            name: name.into(),
            dims,
            data,
        });
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.iter().find(|t| t.name == name)
    }

    pub fn has(&self, name: &str) -> bool {
        self.get(name).is_some()
    }

    fn typed<'a, T>(
        &'a self,
        name: &str,
        pick: impl Fn(&'a TensorData) -> Option<&'a Vec<T>>,
        what: &str,
    ) -> Result<&'a [T]> {
        let t = self
            .get(name)
            .ok_or_else(|| Error::Container(format!("missing tensor {name:?}")))?;
        pick(&t.data)
            .map(Vec::as_slice)
            .ok_or_else(|| Error::Container(format!("tensor {name:?} is not {what}")))
    }

    pub fn real32(&self, name: &str) -> Result<&[f32]> {
        self.typed(
            name,
            |d| {
                if let TensorData::Real32(v) = d {
                    Some(v)
                } else {
                    None
                }
            },
            "real32",
        )
    }

    pub fn int8(&self, name: &str) -> Result<&[i8]> {
        self.typed(
            name,
            |d| {
                if let TensorData::Int8(v) = d {
                    Some(v)
                } else {
                    None
                }
            },
            "int8",
        )
    }

    pub fn int32(&self, name: &str) -> Result<&[i32]> {
        self.typed(
            name,
            |d| {
                if let TensorData::Int32(v) = d {
                    Some(v)
                } else {
                    None
                }
            },
            "int32",
        )
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        let meta: String = self
            .meta
            .iter()
            .map(|(k, v)| format!("{k}={v}\n"))
            .collect();
        put_bytes(&mut out, meta.as_bytes());
        out.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        for t in &self.tensors {
            put_bytes(&mut out, t.name.as_bytes());
            out.push(t.data.dtype_code());
            out.extend_from_slice(&(t.dims.len() as u32).to_le_bytes());
            for &d in &t.dims {
                out.extend_from_slice(&(d as u32).to_le_bytes());
            }
            match &t.data {
                TensorData::Real32(v) => v
                    .iter()
                    .for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
                TensorData::Int8(v) => out.extend(v.iter().map(|&x| x as u8)),
                TensorData::Int32(v) => v
                    .iter()
                    .for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4).ok() != Some(MAGIC.as_slice()) {
            return Err(Error::Container(
                "bad magic/length: not an ETCN container".into(),
            ));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::Container(format!(
                "unsupported container version {version}"
            )));
        }
        let meta_len = r.u32()? as usize;
        let meta_raw = std::str::from_utf8(r.take(meta_len)?)
            .map_err(|_| Error::Container("metadata is not UTF-8".into()))?;
        let mut meta = BTreeMap::new();
        for line in meta_raw.lines().filter(|l| !l.is_empty()) {
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Container(format!("metadata line {line:?} lacks '='")))?;
            meta.insert(k.to_string(), v.to_string());
        }
        let count = r.u32()? as usize;
        let mut tensors = Vec::with_capacity(count.min(1024));
        for _ in 0..count {
            let name_len = r.u32()? as usize;
            let name = std::str::from_utf8(r.take(name_len)?)
                .map_err(|_| Error::Container("tensor name is not UTF-8".into()))?
                .to_string();
            let dtype = r.take(1)?[0];
            let rank = r.u32()? as usize;
            if rank > 8 {
                return Err(Error::Container(format!("tensor {name:?} has rank {rank}")));
            }
            let dims: Vec<usize> = (0..rank)
                .map(|_| r.u32().map(|d| d as usize))
                .collect::<Result<_>>()?;
            let n: usize = dims.iter().product();
            let data = match dtype {
                0 => TensorData::Real32(
                    r.take(n.checked_mul(4).ok_or_else(too_big)?)?
                        .chunks_exact(4)
                        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                        .collect(),
                ),
                1 => TensorData::Int8(r.take(n)?.iter().map(|&b| b as i8).collect()),
                2 => TensorData::Int32(
                    r.take(n.checked_mul(4).ok_or_else(too_big)?)?
                        .chunks_exact(4)
                        .map(|c| i32::from_le_bytes(c.try_into().unwrap()))
                        .collect(),
                ),
                other => {
                    return Err(Error::Container(format!(
                        "tensor {name:?} has unknown dtype {other}"
                    )))
                }
            };
            tensors.push(Tensor { name, dims, data });
        }
        if r.pos != bytes.len() {
            return Err(Error::Container("bad magic/length: trailing bytes".into()));
        }
        Ok(Self { meta, tensors })
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

fn too_big() -> Error {
    Error::Container("tensor size overflows".into())
}

fn put_bytes(out: &mut Vec<u8>, b: &[u8]) {
    out.extend_from_slice(&(b.len() as u32).to_le_bytes());
    out.extend_from_slice(b);
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| {
                Error::Container(format!("bad magic/length: truncated at byte {}", self.pos))
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
    use proptest::prelude::*;

    fn sample() -> Container {
        let mut c = Container::default();
        c.set_meta("quantized", 0);
        c.set_meta("input_len", 140);
        c.push(
            "a.weight",
            vec![2, 3],
            TensorData::Real32(vec![0.5, -1.0, 2.0, 3.0, 4.0, 1e-9]),
        );
        c.push("a.q", vec![3], TensorData::Int8(vec![-128, 0, 127]));
        c.push("a.b", vec![1], TensorData::Int32(vec![i32::MIN]));
        c
    }

    #[test]
    fn header_layout() {
        let b = sample().to_bytes();
        assert_eq!(&b[..4], b"ETCN");
        assert_eq!(u32::from_le_bytes(b[4..8].try_into().unwrap()), 1);
    }

    #[test]
    fn rejects_bad_inputs() {
        let good = sample().to_bytes();
        let err = Container::from_bytes(&good[..good.len() - 3]).unwrap_err();
        assert!(err.to_string().contains("bad magic/length"));
        assert!(Container::from_bytes(b"NOPE")
            .unwrap_err()
            .to_string()
            .contains("bad magic"));
        let mut v2 = good.clone();
        v2[4] = 2;
        assert!(Container::from_bytes(&v2)
            .unwrap_err()
            .to_string()
            .contains("version 2"));
        let mut extra = good;
        extra.push(0);
        assert!(Container::from_bytes(&extra).is_err());
    }

    #[test]
    fn typed_access() {
        let c = sample();
        assert_eq!(c.int8("a.q").unwrap(), &[-128, 0, 127]);
        assert!(c.real32("a.q").is_err());
        assert!(c.int32("missing").is_err());
        assert_eq!(c.meta_parse::<usize>("input_len").unwrap(), 140);
    }

    proptest! {
        #[test]
        fn round_trip(
            reals in proptest::collection::vec(any::<f32>().prop_filter("finite", |v| v.is_finite()), 0..40),
            ints in proptest::collection::vec(any::<i8>(), 0..40),
            wide in proptest::collection::vec(any::<i32>(), 0..40),
            key in "[a-z_]{1,12}",
            val in "[ -~&&[^=]]{0,20}",
        ) {
            let mut c = Container::default();
            c.set_meta(&key, val.trim());
            c.push("r", vec![reals.len()], TensorData::Real32(reals));
            c.push("i", vec![ints.len()], TensorData::Int8(ints));
            c.push("w", vec![1, wide.len()], TensorData::Int32(wide));
            let back = Container::from_bytes(&c.to_bytes()).unwrap();
            prop_assert_eq!(back, c);
        }
    }
}
