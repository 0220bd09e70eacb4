//! Weight archive files.
//!
//! Layout, byte by byte:
//!
//! ```text
//! RGBTW1 <index_len>\n          ASCII header line, index_len in decimal
//! <index>                       exactly index_len bytes of UTF-8
//! <payload>                     little-endian floats, to end of file
//! ```
//!
//! The index holds one line per tensor, `name\tdtype\tdims\toffset\n`, where
//! `dtype` is `f32` or `f64`, `dims` is a comma-separated list of sizes and
//! `offset` is the byte offset of the tensor inside the payload. Tensors are
//! stored row-major. Names are unique and contain no tabs or newlines.
//!
//! Foundation tensors use the bare names of [`FoundationWeights::visit`];
//! prompter tensors live under the `prompter/` namespace.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use crate::foundation::{Foundation, FoundationWeights};
use crate::graph::Tensor;
use crate::params::{Param, Shape};
use crate::{Error, Result};

const MAGIC: &str = "RGBTW1";

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DType {
    F32,
    F64,
}

impl DType {
    pub fn size(self) -> usize {
        match self {
            DType::F32 => 4,
            DType::F64 => 8,
        }
    }

    fn as_str(self) -> &'static str {
        match self {
            DType::F32 => "f32",
            DType::F64 => "f64",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ArchiveEntry {
    pub dtype: DType,
    pub dims: Vec<usize>,
    pub offset: usize,
}

impl ArchiveEntry {
    pub fn numel(&self) -> usize {
        self.dims.iter().product()
    }

    pub fn byte_len(&self) -> usize {
        self.numel() * self.dtype.size()
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct WeightArchive {
    entries: BTreeMap<String, ArchiveEntry>,
    /// Insertion order, kept so written files are stable and readable.
    order: Vec<String>,
    payload: Vec<u8>,
}

impl WeightArchive {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.order.len()
    }

    pub fn is_empty(&self) -> bool {
        self.order.is_empty()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.order.iter().map(String::as_str)
    }

    pub fn entry(&self, name: &str) -> Option<&ArchiveEntry> {
        self.entries.get(name)
    }

    pub fn insert(&mut self, name: &str, t: &Tensor, dtype: DType) -> Result<()> {
        self.insert_dims(name, &[t.nrows(), t.ncols()], t.iter().copied(), dtype)
    }

    /// Stores raw values under explicit dims; used for tensors that are not
    /// naturally two-dimensional.
    pub fn insert_dims(
        &mut self,
        name: &str,
        dims: &[usize],
        values: impl Iterator<Item = f64>,
        dtype: DType,
    ) -> Result<()> {
        if name.is_empty() || name.contains(['\t', '\n']) {
            return Err(Error::Archive(format!("invalid tensor name {name:?}")));
        }
        if self.entries.contains_key(name) {
            return Err(Error::Archive(format!("duplicate tensor {name}")));
        }
        let offset = self.payload.len();
        let mut count = 0;
        for v in values {
            match dtype {
                DType::F32 => self.payload.extend_from_slice(&(v as f32).to_le_bytes()),
                DType::F64 => self.payload.extend_from_slice(&v.to_le_bytes()),
            }
            count += 1;
        }
        let entry = ArchiveEntry { dtype, dims: dims.to_vec(), offset };
        if count != entry.numel() {
            self.payload.truncate(offset);
            return Err(Error::Archive(format!("{name}: {count} values for dims {dims:?}")));
        }
        self.entries.insert(name.to_string(), entry);
        self.order.push(name.to_string());
        Ok(())
    }

    /// Raw values of a tensor, widened to `f64`.
    pub fn values(&self, name: &str) -> Result<Vec<f64>> {
        let e = self.entries.get(name).ok_or_else(|| Error::MissingTensor(name.to_string()))?;
        let bytes = &self.payload[e.offset..e.offset + e.byte_len()];
        Ok(match e.dtype {
            DType::F32 => bytes.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64).collect(),
            DType::F64 => bytes.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect(),
        })
    }

    /// Reads a tensor that must have `expected` shape. A one-dimensional
    /// `[n]` entry is accepted for an expected `[1, n]` row vector.
    pub fn tensor(&self, name: &str, expected: Shape) -> Result<Tensor> {
        let e = self.entries.get(name).ok_or_else(|| Error::MissingTensor(name.to_string()))?;
        let ok = e.dims == expected || (expected[0] == 1 && e.dims == [expected[1]]);
        if !ok {
            return Err(Error::TensorShape {
                name: name.to_string(),
                expected: expected.to_vec(),
                found: e.dims.clone(),
            });
        }
        let v = self.values(name)?;
        Ok(Tensor::from_shape_vec((expected[0], expected[1]), v).expect("element count checked"))
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut index = String::new();
        for name in &self.order {
            let e = &self.entries[name];
            let dims: Vec<String> = e.dims.iter().map(|d| d.to_string()).collect();
            index.push_str(&format!("{name}\t{}\t{}\t{}\n", e.dtype.as_str(), dims.join(","), e.offset));
        }
        let mut out = format!("{MAGIC} {}\n", index.len()).into_bytes();
        out.extend_from_slice(index.as_bytes());
        out.extend_from_slice(&self.payload);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let nl = bytes.iter().position(|&b| b == b'\n').ok_or_else(|| Error::Truncated("no header line".into()))?;
        let header = std::str::from_utf8(&bytes[..nl]).map_err(|_| Error::Archive("header is not UTF-8".into()))?;
        let index_len: usize = match header.split_once(' ') {
            Some((MAGIC, n)) => n.parse().map_err(|_| Error::Archive(format!("bad index length {n:?}")))?,
            _ => return Err(Error::Archive(format!("bad header {header:?}"))),
        };
        let index_start = nl + 1;
        let payload_start = index_start + index_len;
        if bytes.len() < payload_start {
            return Err(Error::Truncated(format!(
                "index needs {index_len} bytes, file has {}",
                bytes.len() - index_start
            )));
        }
        let index = std::str::from_utf8(&bytes[index_start..payload_start])
            .map_err(|_| Error::Archive("index is not UTF-8".into()))?;
        let payload = bytes[payload_start..].to_vec();

        let mut archive = WeightArchive { payload, ..Default::default() };
        for (i, line) in index.lines().enumerate() {
            let fields: Vec<&str> = line.split('\t').collect();
            let [name, dtype, dims, offset] = fields[..] else {
                return Err(Error::Archive(format!("index line {}: expected 4 fields", i + 1)));
            };
            let dtype = match dtype {
                "f32" => DType::F32,
                "f64" => DType::F64,
                other => return Err(Error::Archive(format!("{name}: unsupported dtype {other}"))),
            };
            let dims = if dims.is_empty() {
                Vec::new()
            } else {
                dims.split(',')
                    .map(|d| d.parse::<usize>())
                    .collect::<std::result::Result<Vec<_>, _>>()
                    .map_err(|_| Error::Archive(format!("{name}: bad dims {dims:?}")))?
            };
            let offset: usize = offset.parse().map_err(|_| Error::Archive(format!("{name}: bad offset {offset:?}")))?;
            let entry = ArchiveEntry { dtype, dims, offset };
            if offset + entry.byte_len() > archive.payload.len() {
                return Err(Error::Truncated(format!(
                    "{name} needs bytes {}..{}, payload has {}",
                    offset,
                    offset + entry.byte_len(),
                    archive.payload.len()
                )));
            }
            if archive.entries.insert(name.to_string(), entry).is_some() {
                return Err(Error::Archive(format!("duplicate tensor {name}")));
            }
            archive.order.push(name.to_string());
        }
        Ok(archive)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }

    /// Builds a parameter tree by reading every tensor a traversal asks
    /// for. Reports the first missing or mis-shaped tensor.
    pub fn read_tree<Q>(&self, map: impl FnOnce(&mut dyn FnMut(&str, &Shape) -> Param) -> Q) -> Result<Q> {
        let mut err = None;
        let tree = map(&mut |name, shape| match self.tensor(name, *shape) {
            Ok(t) => Param::new(t),
            Err(e) => {
                err.get_or_insert(e);
                Param::new(Tensor::zeros((0, 0)))
            }
        });
        err.map_or(Ok(tree), Err)
    }
}

pub fn load_archive(path: &Path) -> Result<WeightArchive> {
    WeightArchive::load(path)
}

/// Single-precision archive of every foundation tensor.
pub fn foundation_archive(f: &Foundation) -> WeightArchive {
    let mut a = WeightArchive::new();
    f.weights.visit("", &mut |name, p| a.insert(name, p, DType::F32).expect("foundation names are unique"));
    a
}

/// Replaces the foundation weights with archive contents. The foundation is
/// left untouched if any tensor is missing or mis-shaped.
pub fn apply_archive(archive: &WeightArchive, foundation: &mut Foundation) -> Result<()> {
    let plan = FoundationWeights::plan(&foundation.cfg);
    foundation.weights = archive.read_tree(|f| plan.map_named("", f))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::foundation::FoundationConfig;

    fn toy() -> Foundation {
        Foundation::random(FoundationConfig::toy(), 3).unwrap()
    }

    #[test]
    fn round_trip_is_bitwise() {
        let f = toy();
        let bytes = foundation_archive(&f).to_bytes();
        let mut g = Foundation::random(FoundationConfig::toy(), 99).unwrap();
        assert_ne!(g.checksum(), f.checksum());
        apply_archive(&WeightArchive::from_bytes(&bytes).unwrap(), &mut g).unwrap();
        let mut pairs = Vec::new();
        f.weights.visit("", &mut |n, p| pairs.push((n.to_string(), p.clone())));
        let mut i = 0;
        g.weights.visit("", &mut |n, p| {
            assert_eq!(n, pairs[i].0);
            for (a, b) in p.iter().zip(pairs[i].1.iter()) {
                assert_eq!(a.to_bits(), b.to_bits(), "{n}");
            }
            i += 1;
        });
    }

    fn rebuild_without(a: &WeightArchive, skip: &str, replace: Option<(&[usize], usize)>) -> WeightArchive {
        let mut out = WeightArchive::new();
        for name in a.names() {
            let e = a.entry(name).unwrap();
            if name == skip {
                if let Some((dims, n)) = replace {
                    out.insert_dims(name, dims, std::iter::repeat_n(0.5, n), DType::F32).unwrap();
                }
                continue;
            }
            out.insert_dims(name, &e.dims, a.values(name).unwrap().into_iter(), e.dtype).unwrap();
        }
        out
    }

    #[test]
    fn missing_tensor_is_named() {
        let a = rebuild_without(&foundation_archive(&toy()), "blocks.2.qkv.weight", None);
        let mut f = toy();
        let before = f.checksum();
        let err = apply_archive(&a, &mut f).unwrap_err();
        assert_eq!(err.to_string(), "missing tensor blocks.2.qkv.weight");
        assert_eq!(f.checksum(), before);
    }

    #[test]
    fn shape_mismatch_names_both_shapes() {
        // The toy norm gamma is [1, 16]; store a 7-element vector instead.
        let a = rebuild_without(&foundation_archive(&toy()), "norm.gamma", Some((&[7], 7)));
        let err = apply_archive(&a, &mut toy()).unwrap_err();
        match err {
            Error::TensorShape { name, expected, found } => {
                assert_eq!(name, "norm.gamma");
                assert_eq!(expected, vec![1, 16]);
                assert_eq!(found, vec![7]);
            }
            other => panic!("unexpected {other}"),
        }
    }

    #[test]
    fn one_dimensional_bias_is_accepted() {
        let f = toy();
        let src = foundation_archive(&f);
        let vals = src.values("norm.beta").unwrap();
        let mut a = rebuild_without(&src, "norm.beta", None);
        a.insert_dims("norm.beta", &[16], vals.into_iter(), DType::F32).unwrap();
        let mut g = toy();
        apply_archive(&a, &mut g).unwrap();
        assert_eq!(g.checksum(), f.checksum());
    }

    #[test]
    fn truncated_payload_is_detected() {
        let bytes = foundation_archive(&toy()).to_bytes();
        let err = WeightArchive::from_bytes(&bytes[..bytes.len() - 3]).unwrap_err();
        assert!(matches!(err, Error::Truncated(_)), "{err}");
        let err = WeightArchive::from_bytes(&bytes[..20]).unwrap_err();
        assert!(matches!(err, Error::Truncated(_)), "{err}");
    }

    #[test]
    fn header_is_checked() {
        assert!(matches!(WeightArchive::from_bytes(b"NOPE 0\n"), Err(Error::Archive(_))));
    }

    #[test]
    fn f64_entries_round_trip() {
        let t = Tensor::from_shape_vec((1, 3), vec![0.1, -1e-300, std::f64::consts::PI]).unwrap();
        let mut a = WeightArchive::new();
        a.insert("prompter/x", &t, DType::F64).unwrap();
        let b = WeightArchive::from_bytes(&a.to_bytes()).unwrap();
        assert_eq!(b.tensor("prompter/x", [1, 3]).unwrap(), t);
        assert!(a.insert("prompter/x", &t, DType::F64).is_err());
    }
}
