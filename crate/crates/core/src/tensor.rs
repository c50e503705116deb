//! Dense row-major `f64` tensors and the handful of kernels attention needs.
//!
//! Tensors are immutable once built: every operation returns a new value.
//! Matrix multiply uses a fixed `i-k-j` loop nest so results are
//! bit-reproducible for a given build.

use std::fmt;

use crate::error::{Error, Result};

#[derive(Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Tensor{:?}", self.shape)?;
        if self.data.len() <= 16 {
            write!(f, " {:?}", self.data)?;
        }
        Ok(())
    }
}

impl Tensor {
    /// Builds a tensor, checking that `data` holds exactly `product(shape)` values.
    ///
    /// Zero extents are accepted; they show up as rank-0 heads after pruning.
    pub fn new(shape: &[usize], data: Vec<f64>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if data.len() != numel {
            return Err(Error::invalid(format!(
                "tensor of shape {shape:?} needs {numel} values, got {}",
                data.len()
            )));
        }
        Ok(Self {
            shape: shape.to_vec(),
            data,
        })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let numel = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![0.0; numel],
        }
    }

    pub fn eye(n: usize) -> Self {
        Self::from_fn(&[n, n], |idx| if idx[0] == idx[1] { 1.0 } else { 0.0 })
    }

    /// First `cols` columns of the `rows × rows` identity.
    pub fn eye_slab(rows: usize, cols: usize) -> Self {
        Self::from_fn(&[rows, cols], |idx| if idx[0] == idx[1] { 1.0 } else { 0.0 })
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(&[usize]) -> f64) -> Self {
        let numel: usize = shape.iter().product();
        let mut data = Vec::with_capacity(numel);
        let mut idx = vec![0usize; shape.len()];
        for _ in 0..numel {
            data.push(f(&idx));
            for axis in (0..shape.len()).rev() {
                idx[axis] += 1;
                if idx[axis] < shape[axis] {
                    break;
                }
                idx[axis] = 0;
            }
        }
        Self {
            shape: shape.to_vec(),
            data,
        }
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::invalid("ragged rows"));
        }
        Self::new(&[rows.len(), cols], rows.concat())
    }

    pub fn diag(values: &[f64]) -> Self {
        Self::from_fn(&[values.len(), values.len()], |idx| {
            if idx[0] == idx[1] {
                values[idx[0]]
            } else {
                0.0
            }
        })
    }

    /// Standard normal entries scaled by `std`.
    pub fn randn(shape: &[usize], std: f64, rng: &mut Rng) -> Self {
        Self::from_fn(shape, |_| std * rng.normal())
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn ndim(&self) -> usize {
        self.shape.len()
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn rows(&self) -> usize {
        self.shape[self.shape.len() - 2]
    }

    pub fn cols(&self) -> usize {
        self.shape[self.shape.len() - 1]
    }

    fn offset(&self, idx: &[usize]) -> usize {
        debug_assert_eq!(idx.len(), self.shape.len());
        idx.iter().zip(&self.shape).fold(0, |acc, (&i, &extent)| {
            debug_assert!(i < extent);
            acc * extent + i
        })
    }

    pub fn at(&self, idx: &[usize]) -> f64 {
        self.data[self.offset(idx)]
    }

    /// Element `(i, j)` of a 2-D tensor.
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.shape[1] + j]
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let c = self.cols();
        &self.data[i * c..(i + 1) * c]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Self> {
        if shape.iter().product::<usize>() != self.numel() {
            return Err(Error::shape("reshape", &self.shape, shape));
        }
        Ok(Self {
            shape: shape.to_vec(),
            data: self.data.clone(),
        })
    }

    fn expect_matrix(&self, op: &'static str) -> Result<(usize, usize)> {
        if self.ndim() != 2 {
            return Err(Error::invalid(format!(
                "{op} expects a matrix, got shape {:?}",
                self.shape
            )));
        }
        Ok((self.shape[0], self.shape[1]))
    }

    pub fn transpose(&self) -> Self {
        let (m, n) = (self.shape[0], self.shape[1]);
        assert_eq!(self.ndim(), 2, "transpose expects a matrix");
        let mut data = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                data[j * m + i] = self.data[i * n + j];
            }
        }
        Self {
            shape: vec![n, m],
            data,
        }
    }

    pub fn matmul(&self, other: &Tensor) -> Result<Tensor> {
        matmul(self, other)
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn scale(&self, factor: f64) -> Self {
        self.map(|v| v * factor)
    }

    fn zip_with(&self, other: &Tensor, op: &'static str, f: impl Fn(f64, f64) -> f64) -> Result<Self> {
        if self.shape != other.shape {
            return Err(Error::shape(op, &self.shape, &other.shape));
        }
        Ok(Self {
            shape: self.shape.clone(),
            data: self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect(),
        })
    }

    pub fn add(&self, other: &Tensor) -> Result<Self> {
        self.zip_with(other, "add", |a, b| a + b)
    }

    pub fn sub(&self, other: &Tensor) -> Result<Self> {
        self.zip_with(other, "sub", |a, b| a - b)
    }

    /// Adds `row` to every row of a 2-D tensor.
    pub fn add_row(&self, row: &[f64]) -> Result<Self> {
        let (_, n) = self.expect_matrix("add_row")?;
        if row.len() != n {
            return Err(Error::shape("add_row", &self.shape, &[row.len()]));
        }
        let mut out = self.clone();
        for chunk in out.data.chunks_mut(n) {
            for (v, b) in chunk.iter_mut().zip(row) {
                *v += b;
            }
        }
        Ok(out)
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    /// Largest absolute elementwise difference; `INFINITY` when shapes differ.
    pub fn max_abs_diff(&self, other: &Tensor) -> f64 {
        if self.shape != other.shape {
            return f64::INFINITY;
        }
        self.data
            .iter()
            .zip(&other.data)
            .fold(0.0, |m, (a, b)| m.max((a - b).abs()))
    }

    /// Slice along the leading axis: `[a, rest..] -> [rest..]`.
    pub fn index_outer(&self, i: usize) -> Self {
        let inner: usize = self.shape[1..].iter().product();
        Self {
            shape: self.shape[1..].to_vec(),
            data: self.data[i * inner..(i + 1) * inner].to_vec(),
        }
    }

    /// Stacks equally shaped tensors along a new leading axis.
    pub fn stack(parts: &[Tensor]) -> Result<Self> {
        let Some(first) = parts.first() else {
            return Err(Error::invalid("cannot stack zero tensors"));
        };
        let mut shape = vec![parts.len()];
        shape.extend_from_slice(&first.shape);
        let mut data = Vec::with_capacity(first.numel() * parts.len());
        for p in parts {
            if p.shape != first.shape {
                return Err(Error::shape("stack", &first.shape, &p.shape));
            }
            data.extend_from_slice(&p.data);
        }
        Ok(Self { shape, data })
    }

    /// Columns `[start, end)` of a 2-D tensor.
    pub fn columns(&self, start: usize, end: usize) -> Self {
        let (m, n) = (self.shape[0], self.shape[1]);
        Self::from_fn(&[m, end - start], |idx| self.data[idx[0] * n + start + idx[1]])
    }

    /// Rows `[start, end)` of a 2-D tensor.
    pub fn row_range(&self, start: usize, end: usize) -> Self {
        let n = self.shape[1];
        Self {
            shape: vec![end - start, n],
            data: self.data[start * n..end * n].to_vec(),
        }
    }

    /// Pads a 2-D tensor with zero columns up to `cols`.
    pub fn pad_cols(&self, cols: usize) -> Self {
        let (m, n) = (self.shape[0], self.shape[1]);
        Self::from_fn(&[m, cols], |idx| {
            if idx[1] < n {
                self.data[idx[0] * n + idx[1]]
            } else {
                0.0
            }
        })
    }

    /// Pads a 2-D tensor with zero rows up to `rows`.
    pub fn pad_rows(&self, rows: usize) -> Self {
        let mut data = self.data.clone();
        data.resize(rows * self.shape[1], 0.0);
        Self {
            shape: vec![rows, self.shape[1]],
            data,
        }
    }

    /// Appends a column of ones: `[m, n] -> [m, n + 1]`.
    pub fn append_ones_col(&self) -> Self {
        let (m, n) = (self.shape[0], self.shape[1]);
        Self::from_fn(&[m, n + 1], |idx| {
            if idx[1] < n {
                self.data[idx[0] * n + idx[1]]
            } else {
                1.0
            }
        })
    }

    /// Little-endian bytes of the payload, used for checksums and archives.
    pub fn to_le_bytes(&self) -> Vec<u8> {
        self.data.iter().flat_map(|v| v.to_le_bytes()).collect()
    }
}

/// Matrix product of `a: m×k` and `b: k×n`.
pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (m, k) = a.expect_matrix("matmul")?;
    let (k2, n) = b.expect_matrix("matmul")?;
    if k != k2 {
        return Err(Error::shape("matmul", &a.shape, &b.shape));
    }
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let out_row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let aip = a.data[i * k + p];
            let b_row = &b.data[p * n..(p + 1) * n];
            for (o, &bv) in out_row.iter_mut().zip(b_row) {
                *o += aip * bv;
            }
        }
    }
    Ok(Tensor {
        shape: vec![m, n],
        data: out,
    })
}

/// Which key positions each query position may attend to.
#[derive(Clone, Debug, PartialEq, Default)]
pub enum MaskSpec {
    #[default]
    None,
    /// Key `j` visible to query `i` iff `j <= i`.
    Causal,
    /// Causal, restricted to the `width` most recent keys: `i - width < j <= i`.
    SlidingWindow(usize),
    /// Row-major `n × n` grid, `true` = allowed.
    Explicit { n: usize, allowed: Vec<bool> },
}

impl MaskSpec {
    pub fn allows(&self, query: usize, key: usize) -> bool {
        match self {
            MaskSpec::None => true,
            MaskSpec::Causal => key <= query,
            MaskSpec::SlidingWindow(width) => key <= query && query - key < *width,
            MaskSpec::Explicit { n, allowed } => allowed[query * n + key],
        }
    }

    pub fn validate(&self, n_query: usize, n_key: usize) -> Result<()> {
        match self {
            MaskSpec::SlidingWindow(0) => Err(Error::invalid("sliding window width must be positive")),
            MaskSpec::Explicit { n, allowed } => {
                if *n != n_query || *n != n_key || allowed.len() != n * n {
                    return Err(Error::shape(
                        "mask",
                        &[*n, allowed.len() / n.max(&1)],
                        &[n_query, n_key],
                    ));
                }
                for row in 0..*n {
                    if !allowed[row * n..(row + 1) * n].iter().any(|&a| a) {
                        return Err(Error::EmptySoftmaxRow { row });
                    }
                }
                Ok(())
            }
            _ => Ok(()),
        }
    }

    /// Parses `none`, `causal` or `window:W`.
    pub fn parse(text: &str) -> Result<Self> {
        match text {
            "none" => Ok(MaskSpec::None),
            "causal" => Ok(MaskSpec::Causal),
            other => match other.strip_prefix("window:").map(str::parse::<usize>) {
                Some(Ok(w)) if w > 0 => Ok(MaskSpec::SlidingWindow(w)),
                _ => Err(Error::invalid(format!("unknown mask {other:?}"))),
            },
        }
    }

    pub fn label(&self) -> String {
        match self {
            MaskSpec::None => "none".into(),
            MaskSpec::Causal => "causal".into(),
            MaskSpec::SlidingWindow(w) => format!("window:{w}"),
            MaskSpec::Explicit { .. } => "explicit".into(),
        }
    }
}

/// Row softmax over the last axis of `[.., n_query, n_key]` logits.
///
/// Masked positions are exactly zero. Rows are shifted by their max over
/// allowed positions before exponentiation.
pub fn softmax_rows(logits: &Tensor, mask: &MaskSpec) -> Result<Tensor> {
    if logits.ndim() < 2 {
        return Err(Error::invalid("softmax_rows needs at least two axes"));
    }
    let (nq, nk) = (logits.rows(), logits.cols());
    mask.validate(nq, nk)?;
    let mut out = vec![0.0; logits.numel()];
    for (r, (src, dst)) in logits.data.chunks(nk.max(1)).zip(out.chunks_mut(nk.max(1))).enumerate() {
        let query = r % nq;
        let mut max = f64::NEG_INFINITY;
        for (key, &v) in src.iter().enumerate() {
            if mask.allows(query, key) {
                max = max.max(v);
            }
        }
        if max == f64::NEG_INFINITY {
            return Err(Error::EmptySoftmaxRow { row: r });
        }
        let mut total = 0.0;
        for (key, (&v, o)) in src.iter().zip(dst.iter_mut()).enumerate() {
            if mask.allows(query, key) {
                *o = (v - max).exp();
                total += *o;
            }
        }
        for o in dst.iter_mut() {
            *o /= total;
        }
    }
    Ok(Tensor {
        shape: logits.shape.clone(),
        data: out,
    })
}

/// Seedable SplitMix64 stream with Box–Muller normals.
///
/// SplitMix64 is counter based: output `k` depends only on `seed + k·γ`.
#[derive(Clone, Debug)]
pub struct Rng {
    state: u64,
    spare: Option<f64>,
}

impl Rng {
    pub fn new(seed: u64) -> Self {
        Self {
            state: seed,
            spare: None,
        }
    }

    /// Independent stream for a sub-task, e.g. one example in a batch.
    pub fn derive(seed: u64, index: u64) -> Self {
        let mut mixer = Self::new(seed ^ index.wrapping_mul(0xD1B5_4A32_D192_ED03));
        Self::new(mixer.next_u64())
    }

    pub fn next_u64(&mut self) -> u64 {
        self.state = self.state.wrapping_add(0x9E37_79B9_7F4A_7C15);
        let mut z = self.state;
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        z ^ (z >> 31)
    }

    /// Uniform on `[0, 1)` with 53 random bits.
    pub fn uniform(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    pub fn below(&mut self, bound: usize) -> usize {
        (self.uniform() * bound as f64) as usize % bound.max(1)
    }

    pub fn normal(&mut self) -> f64 {
        if let Some(z) = self.spare.take() {
            return z;
        }
        let u1 = 1.0 - self.uniform();
        let u2 = self.uniform();
        let radius = (-2.0 * u1.ln()).sqrt();
        let angle = std::f64::consts::TAU * u2;
        self.spare = Some(radius * angle.sin());
        radius * angle.cos()
    }

    /// Fisher–Yates permutation of `0..n`.
    pub fn permutation(&mut self, n: usize) -> Vec<usize> {
        let mut p: Vec<usize> = (0..n).collect();
        for i in (1..n).rev() {
            let j = self.below(i + 1);
            p.swap(i, j);
        }
        p
    }
}
