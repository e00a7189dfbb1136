//! `SINOTN01` tensor files: named f32 arrays, little-endian, row-major.
//!
//! ```text
//! "SINOTN01"  u32 count
//! per entry:  u32 name_len, name bytes, u32 ndim, u32 dims[ndim], f32 values[prod(dims)]
//! ```

use std::path::Path;

use indexmap::IndexMap;

use super::write_atomic;
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 8] = b"SINOTN01";

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    pub dims: Vec<usize>,
    pub values: Vec<f32>,
}

impl Tensor {
    pub fn new(dims: Vec<usize>, values: Vec<f32>) -> Result<Self> {
        let n: usize = dims.iter().product();
        if n != values.len() {
            return Err(Error::shape(format!("dims {dims:?} hold {n} values, got {}", values.len())));
        }
        Ok(Tensor { dims, values })
    }

    pub fn from_f64(dims: Vec<usize>, values: impl IntoIterator<Item = f64>) -> Result<Self> {
        Self::new(dims, values.into_iter().map(|v| v as f32).collect())
    }

    pub fn to_f64(&self) -> Vec<f64> {
        self.values.iter().map(|&v| f64::from(v)).collect()
    }
}

/// Ordered, uniquely named tensors.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct TensorContainer {
    pub entries: IndexMap<String, Tensor>,
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> std::result::Result<&'a [u8], String> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| format!("truncated at byte {} (wanted {n} more)", self.pos))?;
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u32(&mut self) -> std::result::Result<usize, String> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")) as usize)
    }
}

fn u32_field(v: usize, what: &str) -> Result<[u8; 4]> {
    u32::try_from(v).map(u32::to_le_bytes).map_err(|_| Error::invalid(format!("{what} {v} exceeds u32")))
}

impl TensorContainer {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor) -> Result<()> {
        let name = name.into();
        if self.entries.contains_key(&name) {
            return Err(Error::invalid(format!("duplicate tensor name {name:?}")));
        }
        self.entries.insert(name, t);
        Ok(())
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.entries.get(name).ok_or_else(|| Error::invalid(format!("no tensor named {name:?}")))
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&u32_field(self.entries.len(), "entry count")?);
        for (name, t) in &self.entries {
            out.extend_from_slice(&u32_field(name.len(), "name length")?);
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&u32_field(t.dims.len(), "rank")?);
            for &d in &t.dims {
                out.extend_from_slice(&u32_field(d, "dimension")?);
            }
            for v in &t.values {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    /// `path` is only used in error messages.
    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        Self::parse(bytes).map_err(|detail| Error::Format { path: path.to_path_buf(), detail })
    }

    fn parse(bytes: &[u8]) -> std::result::Result<Self, String> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(8)? != MAGIC {
            return Err("bad magic (expected SINOTN01)".into());
        }
        let count = r.u32()?;
        let mut out = TensorContainer::new();
        for _ in 0..count {
            let len = r.u32()?;
            let name = std::str::from_utf8(r.take(len)?).map_err(|e| format!("tensor name is not UTF-8: {e}"))?;
            let ndim = r.u32()?;
            let dims = (0..ndim).map(|_| r.u32()).collect::<std::result::Result<Vec<_>, _>>()?;
            let n = dims
                .iter()
                .try_fold(1usize, |a, &d| a.checked_mul(d))
                .ok_or_else(|| format!("tensor {name:?} size overflows"))?;
            let raw = r.take(n.checked_mul(4).ok_or("tensor byte size overflows")?)?;
            let values = raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes"))).collect();
            out.insert(name, Tensor { dims, values }).map_err(|e| e.to_string())?;
        }
        if r.pos != bytes.len() {
            return Err(format!("{} trailing bytes after the last entry", bytes.len() - r.pos));
        }
        Ok(out)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        write_atomic(path, &self.to_bytes()?)
    }

    pub fn read(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes, path)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn sample() -> TensorContainer {
        let mut c = TensorContainer::new();
        c.insert("a", Tensor::new(vec![2, 3], vec![1.0, -2.5, 0.0, f32::MIN_POSITIVE, 3.25e7, -0.0]).unwrap()).unwrap();
        c.insert("scalarish", Tensor::new(vec![], vec![7.0]).unwrap()).unwrap();
        c
    }

    #[test]
    fn layout_matches_header_arithmetic() {
        let bytes = sample().to_bytes().unwrap();
        assert_eq!(&bytes[..8], b"SINOTN01");
        assert_eq!(u32::from_le_bytes(bytes[8..12].try_into().unwrap()), 2);
        // magic + count + ("a": 4 + 1 + 4 + 2*4 + 6*4) + ("scalarish": 4 + 9 + 4 + 0 + 4)
        assert_eq!(bytes.len(), 8 + 4 + (4 + 1 + 4 + 8 + 24) + (4 + 9 + 4 + 4));
        assert_eq!(f32::from_le_bytes(bytes[29..33].try_into().unwrap()), 1.0);
    }

    #[test]
    fn corrupt_inputs_are_rejected() {
        let p = Path::new("x.tns");
        let bytes = sample().to_bytes().unwrap();
        assert!(TensorContainer::from_bytes(&bytes[..bytes.len() - 1], p).is_err());
        let mut extra = bytes.clone();
        extra.push(0);
        assert!(TensorContainer::from_bytes(&extra, p).is_err());
        let mut magic = bytes.clone();
        magic[0] = b'X';
        assert!(matches!(TensorContainer::from_bytes(&magic, p), Err(Error::Format { .. })));
        let mut c = sample();
        assert!(c.insert("a", Tensor::new(vec![1], vec![0.0]).unwrap()).is_err());
    }

    #[test]
    fn write_then_read_from_disk() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.tns");
        sample().write(&path).unwrap();
        assert_eq!(TensorContainer::read(&path).unwrap(), sample());
    }

    fn tensor() -> impl Strategy<Value = Tensor> {
        prop::collection::vec(0usize..5, 0..4).prop_flat_map(|dims| {
            let n: usize = dims.iter().product();
            prop::collection::vec(any::<u32>().prop_map(f32::from_bits), n)
                .prop_map(move |values| Tensor { dims: dims.clone(), values })
        })
    }

    proptest! {
        #[test]
        fn round_trip_is_bit_exact(
            entries in prop::collection::vec(("[a-z.\u{e9}0-9]{1,12}", tensor()), 0..6)
        ) {
            let mut c = TensorContainer::new();
            for (name, t) in entries {
                if !c.entries.contains_key(&name) {
                    c.insert(name, t).unwrap();
                }
            }
            let bytes = c.to_bytes().unwrap();
            let back = TensorContainer::from_bytes(&bytes, Path::new("p")).unwrap();
            prop_assert_eq!(back.entries.len(), c.entries.len());
            for ((na, a), (nb, b)) in c.entries.iter().zip(&back.entries) {
                prop_assert_eq!(na, nb);
                prop_assert_eq!(&a.dims, &b.dims);
                let bits_a: Vec<u32> = a.values.iter().map(|v| v.to_bits()).collect();
                let bits_b: Vec<u32> = b.values.iter().map(|v| v.to_bits()).collect();
                prop_assert_eq!(bits_a, bits_b);
            }
            prop_assert_eq!(back.to_bytes().unwrap(), bytes);
        }
    }
}
