//! `clover-v1` tensor archive.
//!
//! Layout:
//!
//! ```text
//! [u64 LE: header length N][N bytes UTF-8 JSON][zero pad to 64][payload]
//! ```
//!
//! The JSON object maps each tensor name to
//! `{"dtype": "f64", "shape": [..], "offset": o, "length": l}` and carries a
//! `"meta"` entry. Offsets are relative to the payload start, which begins at
//! the first 64-byte boundary after the header; every offset is a multiple of
//! 64 and `length = 8 · product(shape)`. Values are little-endian binary64.
//! Keys are written in lexicographic order, so identical content gives
//! identical bytes.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::{json, Map, Value};

use crate::attention::{AttentionWeights, CloverFactors, DecomposeMode, Dims, QkFactors, QrHead, RopeSpec, SvdHead};
use crate::error::{ArchiveError, Error, Result};
use crate::tensor::Tensor;

pub const FORMAT_VERSION: &str = "clover-v1";
pub const ALIGN: usize = 64;
const META_KEY: &str = "meta";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ArchiveMeta {
    pub version: String,
    /// `weights`, `factors` or `train-state`.
    pub kind: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dims: Option<Dims>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mode: Option<DecomposeMode>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mask: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rope: Option<RopeSpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ranks_qk: Option<Vec<usize>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ranks_vo: Option<Vec<usize>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub qk_augmented: Option<bool>,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub extra: BTreeMap<String, String>,
}

impl ArchiveMeta {
    pub fn new(kind: &str) -> Self {
        Self {
            version: FORMAT_VERSION.into(),
            kind: kind.into(),
            dims: None,
            mode: None,
            mask: None,
            rope: None,
            ranks_qk: None,
            ranks_vo: None,
            qk_augmented: None,
            extra: BTreeMap::new(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Archive {
    pub meta: ArchiveMeta,
    pub tensors: BTreeMap<String, Tensor>,
}

impl Archive {
    pub fn new(meta: ArchiveMeta) -> Self {
        Self {
            meta,
            tensors: BTreeMap::new(),
        }
    }

    /// Adds a tensor; names must be unique, non-empty and not `"meta"`.
    pub fn insert(&mut self, name: &str, t: Tensor) -> Result<(), ArchiveError> {
        check_name(name)?;
        if self.tensors.contains_key(name) {
            return Err(ArchiveError::DuplicateName(name.into()));
        }
        self.tensors.insert(name.into(), t);
        Ok(())
    }

    pub fn get(&self, name: &str) -> Result<&Tensor, ArchiveError> {
        self.tensors
            .get(name)
            .ok_or_else(|| ArchiveError::Malformed(format!("missing tensor {name:?}")))
    }

    /// Builds an archive from a list that may contain duplicate names.
    pub fn from_list(meta: ArchiveMeta, tensors: Vec<(String, Tensor)>) -> Result<Self, ArchiveError> {
        let mut a = Self::new(meta);
        for (name, t) in tensors {
            a.insert(&name, t)?;
        }
        Ok(a)
    }
}

fn check_name(name: &str) -> Result<(), ArchiveError> {
    if name.is_empty() || name == META_KEY {
        return Err(ArchiveError::Malformed(format!("invalid tensor name {name:?}")));
    }
    Ok(())
}

fn align_up(n: usize) -> usize {
    n.div_ceil(ALIGN) * ALIGN
}

/// Serializes an archive to bytes.
pub fn encode(archive: &Archive) -> Result<Vec<u8>, ArchiveError> {
    if archive.meta.version != FORMAT_VERSION {
        return Err(ArchiveError::Version {
            found: archive.meta.version.clone(),
            expected: FORMAT_VERSION,
        });
    }
    let mut header = Map::new();
    let mut offset = 0usize;
    let mut layout = Vec::with_capacity(archive.tensors.len());
    for (name, t) in &archive.tensors {
        check_name(name)?;
        if !t.is_finite() {
            return Err(ArchiveError::NonFinite { name: name.clone() });
        }
        let length = 8 * t.numel();
        header.insert(
            name.clone(),
            json!({"dtype": "f64", "shape": t.shape(), "offset": offset, "length": length}),
        );
        layout.push((offset, t));
        offset = align_up(offset + length);
    }
    let meta = serde_json::to_value(&archive.meta).map_err(|e| ArchiveError::Malformed(e.to_string()))?;
    header.insert(META_KEY.into(), meta);
    let header = serde_json::to_vec(&Value::Object(header)).map_err(|e| ArchiveError::Malformed(e.to_string()))?;

    let payload_start = align_up(8 + header.len());
    let mut out = Vec::with_capacity(payload_start + offset);
    out.extend_from_slice(&(header.len() as u64).to_le_bytes());
    out.extend_from_slice(&header);
    out.resize(payload_start, 0);
    for (off, t) in layout {
        out.resize(payload_start + off, 0);
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

#[derive(Deserialize)]
struct Entry {
    dtype: String,
    shape: Vec<usize>,
    offset: usize,
    length: usize,
}

/// Header object with keys in file order, so repeated keys stay visible.
struct HeaderEntries(Vec<(String, Value)>);

impl<'de> Deserialize<'de> for HeaderEntries {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        struct V;
        impl<'de> serde::de::Visitor<'de> for V {
            type Value = HeaderEntries;
            fn expecting(&self, f: &mut std::fmt::Formatter) -> std::fmt::Result {
                f.write_str("a JSON object")
            }
            fn visit_map<A: serde::de::MapAccess<'de>>(self, mut map: A) -> Result<HeaderEntries, A::Error> {
                let mut out = Vec::new();
                while let Some(pair) = map.next_entry()? {
                    out.push(pair);
                }
                Ok(HeaderEntries(out))
            }
        }
        d.deserialize_map(V)
    }
}

/// Parses and fully validates archive bytes.
pub fn decode(bytes: &[u8]) -> Result<Archive, ArchiveError> {
    if bytes.len() < 8 {
        return Err(ArchiveError::Truncated(format!(
            "{} bytes, no header length",
            bytes.len()
        )));
    }
    let header_len = u64::from_le_bytes(bytes[..8].try_into().expect("8 bytes")) as usize;
    let header_end = 8usize
        .checked_add(header_len)
        .filter(|&end| end <= bytes.len())
        .ok_or_else(|| ArchiveError::Truncated(format!("header of {header_len} bytes exceeds file")))?;
    let HeaderEntries(pairs) = serde_json::from_slice(&bytes[8..header_end])
        .map_err(|e| ArchiveError::Malformed(format!("header json: {e}")))?;
    let mut header = Map::new();
    for (name, value) in pairs {
        if header.insert(name.clone(), value).is_some() {
            return Err(ArchiveError::DuplicateName(name));
        }
    }
    let meta = header
        .remove(META_KEY)
        .ok_or_else(|| ArchiveError::Malformed("missing meta".into()))?;
    let version = meta.get("version").and_then(Value::as_str).unwrap_or_default();
    if version != FORMAT_VERSION {
        return Err(ArchiveError::Version {
            found: version.into(),
            expected: FORMAT_VERSION,
        });
    }
    let meta: ArchiveMeta = serde_json::from_value(meta).map_err(|e| ArchiveError::Malformed(format!("meta: {e}")))?;

    let payload_start = align_up(header_end);
    let mut entries = Vec::with_capacity(header.len());
    for (name, value) in header {
        check_name(&name)?;
        let e: Entry = serde_json::from_value(value).map_err(|e| ArchiveError::Malformed(format!("{name}: {e}")))?;
        if e.dtype != "f64" {
            return Err(ArchiveError::Malformed(format!(
                "{name}: unsupported dtype {:?}",
                e.dtype
            )));
        }
        let numel = e.shape.iter().try_fold(1usize, |acc, &x| acc.checked_mul(x));
        if numel.and_then(|n| n.checked_mul(8)) != Some(e.length) {
            return Err(ArchiveError::Malformed(format!(
                "{name}: length {} does not match shape {:?}",
                e.length, e.shape
            )));
        }
        if !e.offset.is_multiple_of(ALIGN) {
            return Err(ArchiveError::Malformed(format!(
                "{name}: offset {} not {ALIGN}-byte aligned",
                e.offset
            )));
        }
        let end = payload_start
            .checked_add(e.offset)
            .and_then(|s| s.checked_add(e.length))
            .filter(|&end| end <= bytes.len());
        if end.is_none() {
            return Err(ArchiveError::Truncated(format!(
                "{name}: bytes [{}, +{}) past end of {}-byte payload",
                e.offset,
                e.length,
                bytes.len().saturating_sub(payload_start)
            )));
        }
        entries.push((name, e));
    }

    let mut by_offset: Vec<&(String, Entry)> = entries.iter().filter(|(_, e)| e.length > 0).collect();
    by_offset.sort_by_key(|(_, e)| e.offset);
    for pair in by_offset.windows(2) {
        let (a, b) = (pair[0], pair[1]);
        if a.1.offset + a.1.length > b.1.offset {
            return Err(ArchiveError::Overlap {
                first: a.0.clone(),
                second: b.0.clone(),
            });
        }
    }

    let mut tensors = BTreeMap::new();
    for (name, e) in entries {
        let start = payload_start + e.offset;
        let data: Vec<f64> = bytes[start..start + e.length]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        if data.iter().any(|v| !v.is_finite()) {
            return Err(ArchiveError::NonFinite { name });
        }
        let t = Tensor::new(&e.shape, data).map_err(|err| ArchiveError::Malformed(err.to_string()))?;
        tensors.insert(name, t);
    }
    Ok(Archive { meta, tensors })
}

/// Writes `bytes` to a temporary file next to `path`, then renames it into place.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let io = |source| Error::Io {
        path: path.to_path_buf(),
        source,
    };
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(io)?;
    tmp.write_all(bytes).map_err(io)?;
    tmp.flush().map_err(io)?;
    tmp.persist(path).map_err(|e| io(e.error))?;
    Ok(())
}

pub fn write_archive(path: &Path, archive: &Archive) -> Result<()> {
    let bytes = encode(archive)?;
    write_atomic(path, &bytes).map_err(|e| match e {
        Error::Io { path, source } => ArchiveError::Io { path, source }.into(),
        other => other,
    })
}

pub fn read_archive(path: &Path) -> Result<Archive> {
    let bytes = std::fs::read(path).map_err(|source| ArchiveError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    Ok(decode(&bytes)?)
}

fn expect_kind(a: &Archive, kinds: &[&str]) -> Result<Dims> {
    if !kinds.contains(&a.meta.kind.as_str()) {
        return Err(Error::invalid(format!(
            "expected a {} archive, found {:?}",
            kinds.join("/"),
            a.meta.kind
        )));
    }
    a.meta
        .dims
        .ok_or_else(|| ArchiveError::Malformed("meta.dims missing".into()).into())
}

impl From<&AttentionWeights> for Archive {
    fn from(w: &AttentionWeights) -> Self {
        let mut meta = ArchiveMeta::new("weights");
        meta.dims = Some(w.dims);
        let mut a = Archive::new(meta);
        let fields = [
            ("w_q", Some(&w.w_q)),
            ("w_k", Some(&w.w_k)),
            ("w_v", Some(&w.w_v)),
            ("w_o", Some(&w.w_o)),
            ("b_q", w.b_q.as_ref()),
            ("b_k", w.b_k.as_ref()),
            ("b_v", w.b_v.as_ref()),
            ("b_o", w.b_o.as_ref()),
        ];
        for (name, t) in fields {
            if let Some(t) = t {
                a.tensors.insert(name.into(), t.clone());
            }
        }
        a
    }
}

pub fn weights_from_archive(a: &Archive) -> Result<AttentionWeights> {
    let dims = expect_kind(a, &["weights"])?;
    let opt = |name: &str| a.tensors.get(name).cloned();
    let w = AttentionWeights {
        dims,
        w_q: a.get("w_q")?.clone(),
        w_k: a.get("w_k")?.clone(),
        w_v: a.get("w_v")?.clone(),
        w_o: a.get("w_o")?.clone(),
        b_q: opt("b_q"),
        b_k: opt("b_k"),
        b_v: opt("b_v"),
        b_o: opt("b_o"),
    };
    w.validate()?;
    Ok(w)
}

/// Pads per-head SVD factors to the largest rank: `u: [h, D', r]`,
/// `s: [h, r]`, `v: [h, r, D']`.
fn pack_svd(heads: &[SvdHead], rows: usize) -> Result<(Tensor, Tensor, Tensor)> {
    let r = heads.iter().map(SvdHead::rank).max().unwrap_or(0);
    let u = Tensor::stack(&heads.iter().map(|h| h.u.pad_cols(r)).collect::<Vec<_>>())?;
    let s = Tensor::stack(
        &heads
            .iter()
            .map(|h| {
                let mut s = h.s.clone();
                s.resize(r, 0.0);
                Tensor::new(&[r], s)
            })
            .collect::<Result<Vec<_>>>()?,
    )?;
    let v = Tensor::stack(&heads.iter().map(|h| h.v.pad_rows(r)).collect::<Vec<_>>())?;
    debug_assert_eq!(u.shape()[1], rows);
    Ok((u, s, v))
}

fn unpack_svd(u: &Tensor, s: &Tensor, v: &Tensor, ranks: &[usize]) -> Result<Vec<SvdHead>> {
    if u.ndim() != 3 || s.ndim() != 2 || v.ndim() != 3 || u.shape()[0] != ranks.len() {
        return Err(ArchiveError::Malformed("svd factor tensors have wrong rank".into()).into());
    }
    ranks
        .iter()
        .enumerate()
        .map(|(i, &r)| {
            let (ui, si, vi) = (u.index_outer(i), s.index_outer(i), v.index_outer(i));
            if r > ui.cols() {
                return Err(ArchiveError::Malformed(format!("rank {r} exceeds stored width {}", ui.cols())).into());
            }
            Ok(SvdHead {
                u: ui.columns(0, r),
                s: si.data()[..r].to_vec(),
                v: vi.row_range(0, r),
            })
        })
        .collect()
}

/// Stacks head-wise `r_i × r_i` matrices, zero-padded to the largest rank.
fn pack_square(ms: &[Tensor]) -> Result<Tensor> {
    let r = ms.iter().map(Tensor::rows).max().unwrap_or(0);
    Tensor::stack(&ms.iter().map(|m| m.pad_cols(r).pad_rows(r)).collect::<Vec<_>>())
}

fn unpack_square(t: &Tensor, ranks: &[usize]) -> Vec<Tensor> {
    ranks
        .iter()
        .enumerate()
        .map(|(i, &r)| t.index_outer(i).row_range(0, r).columns(0, r))
        .collect()
}

impl TryFrom<&CloverFactors> for Archive {
    type Error = Error;

    fn try_from(f: &CloverFactors) -> Result<Self> {
        let mut a = Archive::new(ArchiveMeta::new("factors"));
        write_factors(f, &mut a)?;
        Ok(a)
    }
}

/// Adds the factor tensors and meta fields to `a`.
pub fn write_factors(f: &CloverFactors, a: &mut Archive) -> Result<()> {
    a.meta.dims = Some(f.dims);
    a.meta.mode = Some(f.mode());
    a.meta.ranks_qk = Some(f.qk_ranks());
    a.meta.ranks_vo = Some(f.vo_ranks());
    a.meta.qk_augmented = Some(f.qk_augmented());
    match &f.qk {
        QkFactors::Svd { heads, .. } => {
            let (u, s, v) = pack_svd(heads, f.qk_input_dim())?;
            a.insert("qk.u", u)?;
            a.insert("qk.s", s)?;
            a.insert("qk.v", v)?;
        }
        QkFactors::Qr { heads } => {
            a.insert(
                "qk.q_q",
                Tensor::stack(&heads.iter().map(|h| h.q_q.clone()).collect::<Vec<_>>())?,
            )?;
            a.insert(
                "qk.r_q",
                Tensor::stack(&heads.iter().map(|h| h.r_q.clone()).collect::<Vec<_>>())?,
            )?;
            a.insert(
                "qk.q_k",
                Tensor::stack(&heads.iter().map(|h| h.q_k.clone()).collect::<Vec<_>>())?,
            )?;
            a.insert(
                "qk.r_k",
                Tensor::stack(&heads.iter().map(|h| h.r_k.clone()).collect::<Vec<_>>())?,
            )?;
        }
    }
    let (u, s, v) = pack_svd(&f.vo, f.dims.model)?;
    a.insert("vo.u", u)?;
    a.insert("vo.s", s)?;
    a.insert("vo.v", v)?;
    if let Some(b) = &f.folded_b_o {
        a.insert("vo.b_o", b.clone())?;
    }
    if let Some(t) = &f.trainable_s_qk {
        a.insert("train.s_qk", pack_square(t)?)?;
    }
    if let Some(t) = &f.trainable_s_vo {
        a.insert("train.s_vo", pack_square(t)?)?;
    }
    Ok(())
}

pub fn factors_from_archive(a: &Archive) -> Result<CloverFactors> {
    let dims = expect_kind(a, &["factors", "train-state"])?;
    let missing = |what: &str| Error::from(ArchiveError::Malformed(format!("meta.{what} missing")));
    let mode = a.meta.mode.ok_or_else(|| missing("mode"))?;
    let ranks_qk = a.meta.ranks_qk.clone().ok_or_else(|| missing("ranks_qk"))?;
    let ranks_vo = a.meta.ranks_vo.clone().ok_or_else(|| missing("ranks_vo"))?;
    if ranks_qk.len() != dims.heads || ranks_vo.len() != dims.heads {
        return Err(ArchiveError::Malformed("rank vectors do not match head count".into()).into());
    }
    let qk = match mode {
        DecomposeMode::SvdBoth => QkFactors::Svd {
            heads: unpack_svd(a.get("qk.u")?, a.get("qk.s")?, a.get("qk.v")?, &ranks_qk)?,
            augmented: a.meta.qk_augmented.unwrap_or(false),
        },
        DecomposeMode::QrQkSvdVo => {
            let (qq, rq, qk, rk) = (a.get("qk.q_q")?, a.get("qk.r_q")?, a.get("qk.q_k")?, a.get("qk.r_k")?);
            if [qq, rq, qk, rk]
                .iter()
                .any(|t| t.ndim() != 3 || t.shape()[0] != dims.heads)
            {
                return Err(ArchiveError::Malformed("qr factor tensors have wrong shape".into()).into());
            }
            QkFactors::Qr {
                heads: (0..dims.heads)
                    .map(|i| QrHead {
                        q_q: qq.index_outer(i),
                        r_q: rq.index_outer(i),
                        q_k: qk.index_outer(i),
                        r_k: rk.index_outer(i),
                    })
                    .collect(),
            }
        }
    };
    let f = CloverFactors {
        dims,
        qk,
        vo: unpack_svd(a.get("vo.u")?, a.get("vo.s")?, a.get("vo.v")?, &ranks_vo)?,
        folded_b_o: a.tensors.get("vo.b_o").cloned(),
        trainable_s_qk: a.tensors.get("train.s_qk").map(|t| unpack_square(t, &ranks_qk)),
        trainable_s_vo: a.tensors.get("train.s_vo").map(|t| unpack_square(t, &ranks_vo)),
    };
    f.validate()?;
    Ok(f)
}
