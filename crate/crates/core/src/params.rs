//! Named parameter storage, the checkpoint archive format, and the
//! [`Session`] that binds parameters into a [`Graph`].
//!
//! Archive layout (all integers little-endian):
//!
//! ```text
//! magic  b"AVFP"
//! u32    format version
//! u32    metadata length, then that many UTF-8 bytes (model config JSON)
//! u32    tensor count
//! per tensor:
//!   u32 name length, name bytes
//!   u8  kind (0 = learnable, 1 = learnable without weight decay, 2 = buffer)
//!   u32 rows, u32 cols
//!   rows*cols f64 values, row-major
//! u64    FNV-1a checksum of every preceding byte
//! ```

use std::collections::HashMap;
use std::io::Write;
use std::path::Path;
use std::sync::Arc;

use ndarray::Array2;
use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::autograd::{Gradients, Graph, Mat, Var};
use crate::error::{Error, Result};

pub const ARCHIVE_MAGIC: &[u8; 4] = b"AVFP";
pub const ARCHIVE_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub usize);

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamKind {
    /// Learnable, subject to weight decay.
    Weight,
    /// Learnable, exempt from weight decay (biases, normalization gains).
    NoDecay,
    /// Non-learnable state (running statistics).
    Buffer,
}

impl ParamKind {
    fn code(self) -> u8 {
        match self {
            ParamKind::Weight => 0,
            ParamKind::NoDecay => 1,
            ParamKind::Buffer => 2,
        }
    }

    fn from_code(c: u8) -> Result<Self> {
        match c {
            0 => Ok(ParamKind::Weight),
            1 => Ok(ParamKind::NoDecay),
            2 => Ok(ParamKind::Buffer),
            other => Err(Error::Decode(format!("unknown tensor kind {other}"))),
        }
    }

    pub fn learnable(self) -> bool {
        !matches!(self, ParamKind::Buffer)
    }
}

/// Versioned archive of every tensor of a model, addressable by
/// hierarchical dotted name (`encoder.viseme.block0.attn.qkv.w`).
#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    names: Vec<String>,
    kinds: Vec<ParamKind>,
    values: Vec<Arc<Mat>>,
    index: HashMap<String, ParamId>,
    metadata: String,
}

impl PartialEq for ParamStore {
    /// Bitwise equality of names, kinds, metadata and values.
    fn eq(&self, other: &Self) -> bool {
        self.names == other.names
            && self.kinds == other.kinds
            && self.metadata == other.metadata
            && self.values.len() == other.values.len()
            && self.values.iter().zip(&other.values).all(|(a, b)| {
                a.dim() == b.dim() && a.iter().zip(b.iter()).all(|(x, y)| x.to_bits() == y.to_bits())
            })
    }
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn metadata(&self) -> &str {
        &self.metadata
    }

    pub fn set_metadata(&mut self, meta: impl Into<String>) {
        self.metadata = meta.into();
    }

    /// Register a tensor. Panics on duplicate names: layouts are built by code.
    pub fn register(&mut self, name: impl Into<String>, kind: ParamKind, value: Mat) -> ParamId {
        let name = name.into();
        assert!(!self.index.contains_key(&name), "duplicate parameter name `{name}`");
        let id = ParamId(self.values.len());
        self.index.insert(name.clone(), id);
        self.names.push(name);
        self.kinds.push(kind);
        self.values.push(Arc::new(value));
        id
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied()
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn kind(&self, id: ParamId) -> ParamKind {
        self.kinds[id.0]
    }

    pub fn get(&self, id: ParamId) -> &Mat {
        &self.values[id.0]
    }

    pub fn get_by_name(&self, name: &str) -> Option<&Mat> {
        self.id(name).map(|id| self.get(id))
    }

    pub(crate) fn shared(&self, id: ParamId) -> Arc<Mat> {
        Arc::clone(&self.values[id.0])
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Mat {
        Arc::make_mut(&mut self.values[id.0])
    }

    pub fn set(&mut self, id: ParamId, value: Mat) {
        assert_eq!(self.values[id.0].dim(), value.dim(), "set: shape of `{}` changed", self.names[id.0]);
        self.values[id.0] = Arc::new(value);
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.values.len()).map(ParamId)
    }

    pub fn learnable_ids(&self) -> impl Iterator<Item = ParamId> + '_ {
        self.ids().filter(|&id| self.kind(id).learnable())
    }

    pub fn n_learnable_scalars(&self) -> usize {
        self.learnable_ids().map(|id| self.get(id).len()).sum()
    }

    /// Every tensor finite?
    pub fn check_finite(&self) -> Result<()> {
        for id in self.ids() {
            if self.get(id).iter().any(|x| !x.is_finite()) {
                return Err(Error::NonFinite(format!("tensor `{}`", self.name(id))));
            }
        }
        Ok(())
    }

    /// Copy values for every name present in `other`, requiring identical
    /// layouts.
    pub fn load_values_from(&mut self, other: &ParamStore) -> Result<()> {
        for id in self.ids().collect::<Vec<_>>() {
            let name = self.name(id).to_string();
            let src = other.get_by_name(&name).ok_or_else(|| Error::MissingTensor(name.clone()))?;
            if src.dim() != self.get(id).dim() {
                return Err(Error::Shape(format!(
                    "tensor `{name}`: archive has {:?}, model expects {:?}",
                    src.dim(),
                    self.get(id).dim()
                )));
            }
            self.values[id.0] = Arc::new(src.clone());
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(ARCHIVE_MAGIC);
        out.extend_from_slice(&ARCHIVE_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.metadata.len() as u32).to_le_bytes());
        out.extend_from_slice(self.metadata.as_bytes());
        out.extend_from_slice(&(self.values.len() as u32).to_le_bytes());
        for id in self.ids() {
            let name = self.name(id).as_bytes();
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name);
            out.push(self.kind(id).code());
            let v = self.get(id);
            out.extend_from_slice(&(v.nrows() as u32).to_le_bytes());
            out.extend_from_slice(&(v.ncols() as u32).to_le_bytes());
            for x in v.iter() {
                out.extend_from_slice(&x.to_le_bytes());
            }
        }
        let sum = fnv1a(&out);
        out.extend_from_slice(&sum.to_le_bytes());
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 12 {
            return Err(Error::Decode("archive shorter than its header".into()));
        }
        if &bytes[..4] != ARCHIVE_MAGIC {
            return Err(Error::Decode("bad magic".into()));
        }
        let mut r = Reader { buf: bytes, pos: 4 };
        let version = r.u32()?;
        if version != ARCHIVE_VERSION {
            return Err(Error::Version {
                found: version,
                expected: ARCHIVE_VERSION,
            });
        }
        // magic, version, metadata length, tensor count, checksum
        if bytes.len() < 24 {
            return Err(Error::Decode("truncated archive".into()));
        }
        let body_len = bytes.len() - 8;
        let stored = u64::from_le_bytes(bytes[body_len..].try_into().expect("8 bytes"));
        if fnv1a(&bytes[..body_len]) != stored {
            return Err(Error::Decode("checksum mismatch (truncated or corrupt archive)".into()));
        }
        let r = &mut Reader {
            buf: &bytes[..body_len],
            pos: 8,
        };
        let meta_len = r.u32()? as usize;
        let metadata = String::from_utf8(r.take(meta_len)?.to_vec())
            .map_err(|_| Error::Decode("metadata is not UTF-8".into()))?;
        let count = r.u32()? as usize;
        let mut store = ParamStore::new();
        store.metadata = metadata;
        for _ in 0..count {
            let nlen = r.u32()? as usize;
            let name = String::from_utf8(r.take(nlen)?.to_vec())
                .map_err(|_| Error::Decode("tensor name is not UTF-8".into()))?;
            let kind = ParamKind::from_code(r.take(1)?[0])?;
            let rows = r.u32()? as usize;
            let cols = r.u32()? as usize;
            let raw = r.take(rows.checked_mul(cols).and_then(|n| n.checked_mul(8)).ok_or_else(|| {
                Error::Decode(format!("tensor `{name}` size overflows"))
            })?)?;
            let data: Vec<f64> = raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect();
            if store.index.contains_key(&name) {
                return Err(Error::Decode(format!("duplicate tensor `{name}`")));
            }
            let value = Array2::from_shape_vec((rows, cols), data).map_err(|e| Error::Decode(e.to_string()))?;
            store.register(name, kind, value);
        }
        if r.pos != r.buf.len() {
            return Err(Error::Decode("trailing bytes after last tensor".into()));
        }
        Ok(store)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(&self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl Reader<'_> {
    fn take(&mut self, n: usize) -> Result<&[u8]> {
        if self.pos + n > self.buf.len() {
            return Err(Error::Decode("unexpected end of archive".into()));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }
}

fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    h
}

/// Gaussian initialization with standard deviation `std`.
pub fn normal_init(rng: &mut impl Rng, rows: usize, cols: usize, std: f64) -> Mat {
    let dist = Normal::new(0.0, std).expect("valid std");
    Array2::from_shape_fn((rows, cols), |_| dist.sample(rng))
}

/// Whether normalization layers use batch statistics or stored running
/// statistics.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// One forward pass: a graph plus the parameters bound into it.
pub struct Session<'p> {
    pub graph: Graph,
    store: &'p ParamStore,
    bound: Vec<Option<Var>>,
    pub mode: Mode,
    track_grads: bool,
    running_updates: Vec<(ParamId, Mat)>,
}

impl<'p> Session<'p> {
    pub fn new(store: &'p ParamStore, mode: Mode) -> Self {
        Self {
            graph: Graph::new(),
            store,
            bound: vec![None; store.len()],
            mode,
            track_grads: true,
            running_updates: Vec::new(),
        }
    }

    /// Session whose parameters never require gradients.
    pub fn inference(store: &'p ParamStore) -> Self {
        let mut s = Self::new(store, Mode::Eval);
        s.track_grads = false;
        s
    }

    pub fn store(&self) -> &'p ParamStore {
        self.store
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.bound[id.0] {
            return v;
        }
        let rg = self.track_grads && self.store.kind(id).learnable();
        let v = self.graph.input_shared(self.store.shared(id), rg);
        self.bound[id.0] = Some(v);
        v
    }

    pub fn constant(&mut self, value: Mat) -> Var {
        self.graph.constant(value)
    }

    pub fn value(&self, v: Var) -> &Mat {
        self.graph.value(v)
    }

    /// Record a new value for a running-statistics buffer; applied by the
    /// trainer after the step.
    pub fn push_running_update(&mut self, id: ParamId, value: Mat) {
        self.running_updates.push((id, value));
    }

    pub fn take_running_updates(&mut self) -> Vec<(ParamId, Mat)> {
        std::mem::take(&mut self.running_updates)
    }

    /// Gradients of bound learnable parameters.
    pub fn param_grads(&self, grads: &mut Gradients) -> Vec<(ParamId, Mat)> {
        let mut out = Vec::new();
        for (i, v) in self.bound.iter().enumerate() {
            if let Some(v) = v {
                if let Some(g) = grads.take(*v) {
                    out.push((ParamId(i), g));
                }
            }
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn sample_store() -> ParamStore {
        let mut s = ParamStore::new();
        s.set_metadata("{\"k\":1}");
        s.register("a.w", ParamKind::Weight, array![[1.0, -2.5], [3.25, f64::MIN_POSITIVE]]);
        s.register("a.b", ParamKind::NoDecay, array![[0.1, 0.2]]);
        s.register("bn.running_var", ParamKind::Buffer, array![[1.0]]);
        s
    }

    #[test]
    fn archive_round_trip_is_bitwise() {
        let s = sample_store();
        let back = ParamStore::from_bytes(&s.to_bytes()).unwrap();
        assert_eq!(s, back);
    }

    #[test]
    fn truncated_archive_is_a_decode_error() {
        let bytes = sample_store().to_bytes();
        for cut in [0, 3, 11, 20, bytes.len() / 2, bytes.len() - 1] {
            let err = ParamStore::from_bytes(&bytes[..cut]).unwrap_err();
            assert!(matches!(err, Error::Decode(_)), "cut {cut}: {err}");
        }
    }

    #[test]
    fn version_mismatch_is_explicit() {
        let mut bytes = sample_store().to_bytes();
        bytes[4..8].copy_from_slice(&7u32.to_le_bytes());
        assert!(matches!(
            ParamStore::from_bytes(&bytes),
            Err(Error::Version { found: 7, expected: 1 })
        ));
    }

    #[test]
    fn missing_tensor_reported_by_name() {
        let small = sample_store();
        let mut big = sample_store();
        big.register("extra", ParamKind::Weight, array![[0.0]]);
        let err = big.load_values_from(&small).unwrap_err();
        assert!(matches!(err, Error::MissingTensor(n) if n == "extra"));
    }

    #[test]
    fn session_binds_parameters_once() {
        let s = sample_store();
        let mut sess = Session::new(&s, Mode::Train);
        let a = sess.param(ParamId(0));
        let b = sess.param(ParamId(0));
        assert_eq!(a, b);
        let buf = sess.param(ParamId(2));
        let m = sess.graph.matmul(a, a);
        let t = sess.graph.sum_all(m);
        let u = sess.graph.sum_all(buf);
        let tot = sess.graph.add(t, u);
        let mut grads = sess.graph.backward(tot);
        let pg = sess.param_grads(&mut grads);
        assert_eq!(pg.len(), 1);
        assert_eq!(pg[0].0, ParamId(0));
    }
}
