//! Reference multi-head attention in plain and factored form.
//!
//! Plain weights follow the per-head layout `w_q, w_k, w_v: [D, h, r]` and
//! `w_o: [h, r, D]`. The inner extent `r` is normally the head dimension `d`
//! but may be smaller after pruning and merge-back; the logit scale is always
//! `1/√d` with `d` taken from [`Dims`].

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::orthonormality_error;
use crate::tensor::{matmul, softmax_rows, MaskSpec, Rng, Tensor};

/// Orthonormality tolerance for factor bases.
pub const BASIS_TOL: f64 = 1e-10;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Dims {
    /// Residual stream width `D`.
    #[serde(rename = "D")]
    pub model: usize,
    /// Number of heads `h`.
    #[serde(rename = "h")]
    pub heads: usize,
    /// Nominal head dimension `d`; sets the `1/√d` logit scale.
    #[serde(rename = "d")]
    pub head: usize,
}

impl Dims {
    pub fn new(model: usize, heads: usize, head: usize) -> Self {
        Self { model, heads, head }
    }

    pub fn logit_scale(&self) -> f64 {
        1.0 / (self.head as f64).sqrt()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RopeSpec {
    pub enabled: bool,
    pub base: f64,
}

impl Default for RopeSpec {
    fn default() -> Self {
        Self {
            enabled: false,
            base: 10_000.0,
        }
    }
}

impl RopeSpec {
    pub fn enabled(base: f64) -> Self {
        Self { enabled: true, base }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AttentionWeights {
    pub dims: Dims,
    pub w_q: Tensor,
    pub w_k: Tensor,
    pub w_v: Tensor,
    pub w_o: Tensor,
    pub b_q: Option<Tensor>,
    pub b_k: Option<Tensor>,
    pub b_v: Option<Tensor>,
    pub b_o: Option<Tensor>,
}

impl AttentionWeights {
    /// Unbiased weights; attach biases with the public fields and re-run
    /// [`AttentionWeights::validate`].
    pub fn new(dims: Dims, w_q: Tensor, w_k: Tensor, w_v: Tensor, w_o: Tensor) -> Result<Self> {
        let w = Self {
            dims,
            w_q,
            w_k,
            w_v,
            w_o,
            b_q: None,
            b_k: None,
            b_v: None,
            b_o: None,
        };
        w.validate()?;
        Ok(w)
    }

    pub fn qk_inner(&self) -> usize {
        self.w_q.shape()[2]
    }

    pub fn vo_inner(&self) -> usize {
        self.w_v.shape()[2]
    }

    pub fn has_qk_bias(&self) -> bool {
        self.b_q.is_some() || self.b_k.is_some()
    }

    pub fn validate(&self) -> Result<()> {
        let Dims { model, heads, head } = self.dims;
        if model == 0 || heads == 0 || head == 0 {
            return Err(Error::invalid(format!("dims must be positive, got {:?}", self.dims)));
        }
        let rq = *self.w_q.shape().get(2).unwrap_or(&0);
        let rv = *self.w_v.shape().get(2).unwrap_or(&0);
        let expect = |name: &str, t: &Tensor, shape: &[usize]| -> Result<()> {
            if t.shape() != shape {
                return Err(Error::invalid(format!(
                    "{name} has shape {:?}, expected {shape:?}",
                    t.shape()
                )));
            }
            if !t.is_finite() {
                return Err(Error::invalid(format!("{name} has non-finite entries")));
            }
            Ok(())
        };
        expect("w_q", &self.w_q, &[model, heads, rq])?;
        expect("w_k", &self.w_k, &[model, heads, rq])?;
        expect("w_v", &self.w_v, &[model, heads, rv])?;
        expect("w_o", &self.w_o, &[heads, rv, model])?;
        if rq > head || rv > head {
            return Err(Error::invalid(format!(
                "inner extents ({rq}, {rv}) exceed head dimension {head}"
            )));
        }
        if let Some(b) = &self.b_q {
            expect("b_q", b, &[heads, rq])?;
        }
        if let Some(b) = &self.b_k {
            expect("b_k", b, &[heads, rq])?;
        }
        if let Some(b) = &self.b_v {
            expect("b_v", b, &[heads, rv])?;
        }
        if let Some(b) = &self.b_o {
            expect("b_o", b, &[model])?;
        }
        Ok(())
    }

    fn in_slab(t: &Tensor, head: usize) -> Tensor {
        let [model, heads, r] = [t.shape()[0], t.shape()[1], t.shape()[2]];
        Tensor::from_fn(&[model, r], |ix| t.data()[(ix[0] * heads + head) * r + ix[1]])
    }

    /// `w_q[:, head, :]` as a `D×r` matrix.
    pub fn q_slab(&self, head: usize) -> Tensor {
        Self::in_slab(&self.w_q, head)
    }

    pub fn k_slab(&self, head: usize) -> Tensor {
        Self::in_slab(&self.w_k, head)
    }

    pub fn v_slab(&self, head: usize) -> Tensor {
        Self::in_slab(&self.w_v, head)
    }

    /// `w_o[head]` as an `r×D` matrix.
    pub fn o_slab(&self, head: usize) -> Tensor {
        self.w_o.index_outer(head)
    }

    /// Packs per-head `D×r` slabs back into a `[D, h, r]` tensor.
    pub fn pack_in_slabs(slabs: &[Tensor]) -> Result<Tensor> {
        let heads = slabs.len();
        let first = slabs.first().ok_or_else(|| Error::invalid("no heads"))?;
        let (model, r) = (first.shape()[0], first.shape()[1]);
        for s in slabs {
            if s.shape() != first.shape() {
                return Err(Error::shape("pack_in_slabs", first.shape(), s.shape()));
            }
        }
        Ok(Tensor::from_fn(&[model, heads, r], |ix| slabs[ix[1]].get(ix[0], ix[2])))
    }

    /// Reorders heads; used to check head-permutation invariance.
    pub fn permute_heads(&self, order: &[usize]) -> Result<Self> {
        let slabs = |f: &dyn Fn(usize) -> Tensor| -> Vec<Tensor> { order.iter().map(|&i| f(i)).collect() };
        let rows = |b: &Option<Tensor>| -> Result<Option<Tensor>> {
            b.as_ref()
                .map(|b| Tensor::stack(&order.iter().map(|&i| b.index_outer(i)).collect::<Vec<_>>()))
                .transpose()
        };
        let w = Self {
            dims: self.dims,
            w_q: Self::pack_in_slabs(&slabs(&|i| self.q_slab(i)))?,
            w_k: Self::pack_in_slabs(&slabs(&|i| self.k_slab(i)))?,
            w_v: Self::pack_in_slabs(&slabs(&|i| self.v_slab(i)))?,
            w_o: Tensor::stack(&slabs(&|i| self.o_slab(i)))?,
            b_q: rows(&self.b_q)?,
            b_k: rows(&self.b_k)?,
            b_v: rows(&self.b_v)?,
            b_o: self.b_o.clone(),
        };
        w.validate()?;
        Ok(w)
    }
}

/// Options for [`random_weights`].
#[derive(Clone, Debug, Default)]
pub struct SynthOptions {
    /// Per-head rank of every projection slab; `None` gives full rank `d`.
    pub head_rank: Option<usize>,
    /// Attach all four biases.
    pub bias: bool,
    /// Standard deviation of isotropic noise added after construction.
    pub noise: f64,
}

/// Random attention weights with entries of scale `1/√D`.
///
/// With `head_rank = Some(k)` each projection slab is a product of two
/// Gaussian factors through a `k`-dimensional bottleneck, so the absorbed
/// `W_QK` and `W_VO` have rank `k` while every inner dimension keeps a
/// comparable column norm.
pub fn random_weights(dims: Dims, opts: &SynthOptions, rng: &mut Rng) -> Result<AttentionWeights> {
    let Dims { model, heads, head } = dims;
    let std = 1.0 / (model as f64).sqrt();
    if let Some(k) = opts.head_rank {
        if k == 0 || k > head {
            return Err(Error::invalid(format!("head rank {k} must lie in 1..={head}")));
        }
    }
    let slab = |rows: usize, cols: usize, rng: &mut Rng| -> Tensor {
        match opts.head_rank {
            Some(k) if k < head => {
                let left = Tensor::randn(&[rows, k], std, rng);
                let right = Tensor::randn(&[k, cols], 1.0 / (k as f64).sqrt(), rng);
                matmul(&left, &right).expect("bottleneck shapes agree")
            }
            _ => Tensor::randn(&[rows, cols], std, rng),
        }
    };
    let in_proj = |rng: &mut Rng| -> Result<Tensor> {
        let slabs: Vec<Tensor> = (0..heads).map(|_| slab(model, head, rng)).collect();
        AttentionWeights::pack_in_slabs(&slabs)
    };
    let w_q = in_proj(rng)?;
    let w_k = in_proj(rng)?;
    let w_v = in_proj(rng)?;
    let o_slabs: Vec<Tensor> = (0..heads)
        .map(|_| match opts.head_rank {
            Some(k) if k < head => {
                let left = Tensor::randn(&[head, k], 1.0 / (k as f64).sqrt(), rng);
                let right = Tensor::randn(&[k, model], std, rng);
                matmul(&left, &right).expect("bottleneck shapes agree")
            }
            _ => Tensor::randn(&[head, model], std, rng),
        })
        .collect();
    let w_o = Tensor::stack(&o_slabs)?;
    let noisy = |t: Tensor, rng: &mut Rng| -> Tensor {
        if opts.noise > 0.0 {
            t.add(&Tensor::randn(t.shape(), opts.noise, rng)).expect("same shape")
        } else {
            t
        }
    };
    let mut w = AttentionWeights {
        dims,
        w_q: noisy(w_q, rng),
        w_k: noisy(w_k, rng),
        w_v: noisy(w_v, rng),
        w_o: noisy(w_o, rng),
        b_q: None,
        b_k: None,
        b_v: None,
        b_o: None,
    };
    if opts.bias {
        w.b_q = Some(Tensor::randn(&[heads, head], 0.5, rng));
        w.b_k = Some(Tensor::randn(&[heads, head], 0.5, rng));
        w.b_v = Some(Tensor::randn(&[heads, head], 0.5, rng));
        w.b_o = Some(Tensor::randn(&[model], 0.5, rng));
    }
    w.validate()?;
    Ok(w)
}

/// Rotates consecutive coordinate pairs `(2j, 2j+1)` of row `p` by
/// `p·base^(−2j/d)`; `inverse` rotates the other way.
pub fn rope_rotate(m: &Tensor, base: f64, inverse: bool) -> Result<Tensor> {
    let (n, d) = (m.rows(), m.cols());
    if d % 2 != 0 {
        return Err(Error::invalid(format!("RoPE needs an even head dimension, got {d}")));
    }
    let sign = if inverse { -1.0 } else { 1.0 };
    let mut out = m.data().to_vec();
    for pos in 0..n {
        for j in 0..d / 2 {
            let theta = sign * pos as f64 * base.powf(-2.0 * j as f64 / d as f64);
            let (sin, cos) = theta.sin_cos();
            let (a, b) = (out[pos * d + 2 * j], out[pos * d + 2 * j + 1]);
            out[pos * d + 2 * j] = a * cos - b * sin;
            out[pos * d + 2 * j + 1] = a * sin + b * cos;
        }
    }
    Tensor::new(&[n, d], out)
}

/// RoPE over a `[b, h, n, d]` query or key tensor.
pub fn rope_apply(t: &Tensor, base: f64) -> Result<Tensor> {
    if t.ndim() != 4 {
        return Err(Error::invalid(format!(
            "rope_apply expects [b, h, n, d], got {:?}",
            t.shape()
        )));
    }
    let [b, h, n, d] = [t.shape()[0], t.shape()[1], t.shape()[2], t.shape()[3]];
    let mut data = Vec::with_capacity(t.numel());
    for block in 0..b * h {
        let m = Tensor::new(&[n, d], t.data()[block * n * d..(block + 1) * n * d].to_vec())?;
        data.extend(rope_rotate(&m, base, false)?.into_data());
    }
    Tensor::new(t.shape(), data)
}

fn check_input(x: &Tensor, model: usize) -> Result<(usize, usize)> {
    if x.ndim() != 3 || x.shape()[2] != model {
        return Err(Error::shape("attention input", x.shape(), &[0, 0, model]));
    }
    Ok((x.shape()[0], x.shape()[1]))
}

/// Sequence `item` of a `[b, n, D]` batch as an `n×D` matrix.
pub fn batch_item(x: &Tensor, item: usize) -> Tensor {
    x.index_outer(item)
}

/// Scaled pre-softmax logits of one head on one `n×D` sequence.
pub fn plain_head_logits(x: &Tensor, w: &AttentionWeights, head: usize, rope: &RopeSpec) -> Result<Tensor> {
    let mut q = matmul(x, &w.q_slab(head))?;
    let mut k = matmul(x, &w.k_slab(head))?;
    if let Some(b) = &w.b_q {
        q = q.add_row(b.index_outer(head).data())?;
    }
    if let Some(b) = &w.b_k {
        k = k.add_row(b.index_outer(head).data())?;
    }
    if rope.enabled {
        q = rope_rotate(&q, rope.base, false)?;
        k = rope_rotate(&k, rope.base, false)?;
    }
    Ok(matmul(&q, &k.transpose())?.scale(w.dims.logit_scale()))
}

/// Plain multi-head attention forward: `[b, n, D] -> [b, n, D]`.
pub fn mha_forward(x: &Tensor, w: &AttentionWeights, mask: &MaskSpec, rope: &RopeSpec) -> Result<Tensor> {
    w.validate()?;
    let (batch, n) = check_input(x, w.dims.model)?;
    mask.validate(n, n)?;
    let mut out = Vec::with_capacity(x.numel());
    for item in 0..batch {
        let xb = batch_item(x, item);
        let mut y = Tensor::zeros(&[n, w.dims.model]);
        for head in 0..w.dims.heads {
            let attn = softmax_rows(&plain_head_logits(&xb, w, head, rope)?, mask)?;
            let mut v = matmul(&xb, &w.v_slab(head))?;
            if let Some(b) = &w.b_v {
                v = v.add_row(b.index_outer(head).data())?;
            }
            let head_out = matmul(&matmul(&attn, &v)?, &w.o_slab(head))?;
            y = y.add(&head_out)?;
        }
        if let Some(b) = &w.b_o {
            y = y.add_row(b.data())?;
        }
        out.extend(y.into_data());
    }
    Tensor::new(x.shape(), out)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum DecomposeMode {
    /// SVD of both absorbed products.
    #[serde(rename = "svd")]
    SvdBoth,
    /// Per-head QR of `w_q`, `w_k` (RoPE-compatible); SVD of `W_VO`.
    #[serde(rename = "qr")]
    QrQkSvdVo,
}

impl DecomposeMode {
    pub fn label(self) -> &'static str {
        match self {
            DecomposeMode::SvdBoth => "svd",
            DecomposeMode::QrQkSvdVo => "qr",
        }
    }

    pub fn parse(text: &str) -> Result<Self> {
        match text {
            "svd" => Ok(DecomposeMode::SvdBoth),
            "qr" => Ok(DecomposeMode::QrQkSvdVo),
            other => Err(Error::invalid(format!("unknown mode {other:?}"))),
        }
    }
}

/// One head of a thin SVD: `u: D'×r`, `s: r`, `v: r×D'`.
#[derive(Clone, Debug, PartialEq)]
pub struct SvdHead {
    pub u: Tensor,
    pub s: Vec<f64>,
    pub v: Tensor,
}

impl SvdHead {
    pub fn rank(&self) -> usize {
        self.s.len()
    }
}

/// One head of the QR path: `w_q = q_q·r_q`, `w_k = q_k·r_k`.
#[derive(Clone, Debug, PartialEq)]
pub struct QrHead {
    pub q_q: Tensor,
    pub r_q: Tensor,
    pub q_k: Tensor,
    pub r_k: Tensor,
}

#[derive(Clone, Debug, PartialEq)]
pub enum QkFactors {
    /// `augmented` means the bases act on `[x, 1]` (query/key biases folded in).
    Svd {
        heads: Vec<SvdHead>,
        augmented: bool,
    },
    Qr {
        heads: Vec<QrHead>,
    },
}

/// Orthonormal bases plus singular values (or triangular factors) for both
/// projection pairs of one attention layer.
#[derive(Clone, Debug, PartialEq)]
pub struct CloverFactors {
    pub dims: Dims,
    pub qk: QkFactors,
    pub vo: Vec<SvdHead>,
    /// `b_o + Σ_i b_v[i]·w_o[i]`.
    pub folded_b_o: Option<Tensor>,
    /// Full `r×r` head-wise matrices replacing `diag(s_qk)` when present.
    pub trainable_s_qk: Option<Vec<Tensor>>,
    /// Full `r×r` head-wise matrices replacing `diag(s_vo)` when present.
    pub trainable_s_vo: Option<Vec<Tensor>>,
}

impl CloverFactors {
    pub fn mode(&self) -> DecomposeMode {
        match self.qk {
            QkFactors::Svd { .. } => DecomposeMode::SvdBoth,
            QkFactors::Qr { .. } => DecomposeMode::QrQkSvdVo,
        }
    }

    pub fn qk_augmented(&self) -> bool {
        matches!(self.qk, QkFactors::Svd { augmented: true, .. })
    }

    pub fn qk_ranks(&self) -> Vec<usize> {
        match &self.qk {
            QkFactors::Svd { heads, .. } => heads.iter().map(SvdHead::rank).collect(),
            QkFactors::Qr { heads } => heads.iter().map(|h| h.r_q.rows()).collect(),
        }
    }

    pub fn vo_ranks(&self) -> Vec<usize> {
        self.vo.iter().map(SvdHead::rank).collect()
    }

    /// The QK mixing matrix of `head`: trainable if attached, else `diag(s)`.
    pub fn s_qk_matrix(&self, head: usize) -> Option<Tensor> {
        let QkFactors::Svd { heads, .. } = &self.qk else {
            return None;
        };
        Some(match &self.trainable_s_qk {
            Some(t) => t[head].clone(),
            None => Tensor::diag(&heads[head].s),
        })
    }

    pub fn s_vo_matrix(&self, head: usize) -> Tensor {
        match &self.trainable_s_vo {
            Some(t) => t[head].clone(),
            None => Tensor::diag(&self.vo[head].s),
        }
    }

    /// Attaches `diag(s)` as the trainable matrices where none are present.
    pub fn with_trainable(mut self) -> Self {
        if let QkFactors::Svd { heads, .. } = &self.qk {
            if self.trainable_s_qk.is_none() {
                self.trainable_s_qk = Some(heads.iter().map(|h| Tensor::diag(&h.s)).collect());
            }
        }
        if self.trainable_s_vo.is_none() {
            self.trainable_s_vo = Some(self.vo.iter().map(|h| Tensor::diag(&h.s)).collect());
        }
        self
    }

    /// Tensors never updated by training, in a fixed order.
    pub fn frozen_tensors(&self) -> Vec<&Tensor> {
        let mut out = Vec::new();
        match &self.qk {
            QkFactors::Svd { heads, .. } => {
                for h in heads {
                    out.push(&h.u);
                    out.push(&h.v);
                }
            }
            QkFactors::Qr { heads } => {
                for h in heads {
                    out.push(&h.q_q);
                    out.push(&h.q_k);
                }
            }
        }
        for h in &self.vo {
            out.push(&h.u);
            out.push(&h.v);
        }
        if let Some(b) = &self.folded_b_o {
            out.push(b);
        }
        out
    }

    pub fn qk_input_dim(&self) -> usize {
        self.dims.model + usize::from(self.qk_augmented())
    }

    pub fn validate(&self) -> Result<()> {
        let Dims { model, heads, head } = self.dims;
        let check_svd = |pair: &str, h: &SvdHead, rows: usize, i: usize| -> Result<()> {
            let r = h.rank();
            if r > head {
                return Err(Error::invalid(format!("{pair} head {i}: rank {r} exceeds d = {head}")));
            }
            if h.u.shape() != [rows, r] || h.v.shape() != [r, rows] {
                return Err(Error::invalid(format!(
                    "{pair} head {i}: u {:?} / v {:?} inconsistent with rank {r} and input dim {rows}",
                    h.u.shape(),
                    h.v.shape()
                )));
            }
            if h.s.iter().any(|&s| s.is_nan() || s < 0.0) || h.s.windows(2).any(|w| w[0] < w[1]) {
                return Err(Error::invalid(format!(
                    "{pair} head {i}: singular values not sorted nonnegative"
                )));
            }
            if r > 0 {
                let eu = orthonormality_error(&h.u);
                let ev = orthonormality_error(&h.v.transpose());
                if eu > BASIS_TOL || ev > BASIS_TOL {
                    return Err(Error::invalid(format!(
                        "{pair} head {i}: bases not orthonormal ({eu:e}, {ev:e})"
                    )));
                }
            }
            Ok(())
        };
        let check_trainable = |name: &str, t: &Option<Vec<Tensor>>, ranks: &[usize]| -> Result<()> {
            if let Some(t) = t {
                if t.len() != heads || t.iter().zip(ranks).any(|(m, &r)| m.shape() != [r, r]) {
                    return Err(Error::invalid(format!(
                        "{name} shapes do not match head ranks {ranks:?}"
                    )));
                }
            }
            Ok(())
        };
        match &self.qk {
            QkFactors::Svd { heads: hs, .. } => {
                if hs.len() != heads {
                    return Err(Error::invalid("qk head count mismatch"));
                }
                for (i, h) in hs.iter().enumerate() {
                    check_svd("qk", h, self.qk_input_dim(), i)?;
                }
            }
            QkFactors::Qr { heads: hs } => {
                if hs.len() != heads {
                    return Err(Error::invalid("qk head count mismatch"));
                }
                for (i, h) in hs.iter().enumerate() {
                    for (q, r) in [(&h.q_q, &h.r_q), (&h.q_k, &h.r_k)] {
                        if q.shape() != [model, head] || r.shape() != [head, head] {
                            return Err(Error::invalid(format!("qr head {i}: bad factor shapes")));
                        }
                        if orthonormality_error(q) > BASIS_TOL {
                            return Err(Error::invalid(format!("qr head {i}: basis not orthonormal")));
                        }
                        for a in 0..head {
                            for b in 0..a {
                                if r.get(a, b) != 0.0 {
                                    return Err(Error::invalid(format!("qr head {i}: r not upper triangular")));
                                }
                            }
                        }
                    }
                }
                if self.trainable_s_qk.is_some() {
                    return Err(Error::invalid("qr mode trains r_q/r_k directly, not s_qk"));
                }
            }
        }
        if self.vo.len() != heads {
            return Err(Error::invalid("vo head count mismatch"));
        }
        for (i, h) in self.vo.iter().enumerate() {
            check_svd("vo", h, model, i)?;
        }
        check_trainable("trainable_s_qk", &self.trainable_s_qk, &self.qk_ranks())?;
        check_trainable("trainable_s_vo", &self.trainable_s_vo, &self.vo_ranks())?;
        if let Some(b) = &self.folded_b_o {
            if b.shape() != [model] {
                return Err(Error::invalid("folded_b_o must have shape [D]"));
            }
        }
        Ok(())
    }
}

/// Intermediates of one factored head on one sequence, kept for backprop.
#[derive(Clone, Debug)]
pub struct HeadTrace {
    pub qk: QkTrace,
    /// Softmax output, `n×n`.
    pub attn: Tensor,
    /// `x·u_vo`, `n×r_vo`.
    pub v_proj: Tensor,
    /// `x·u_vo·S_vo`, `n×r_vo`.
    pub v_mixed: Tensor,
}

#[derive(Clone, Debug)]
pub enum QkTrace {
    /// `left = x'·u_qk`, `right = x'·v_qkᵀ`.
    Svd { left: Tensor, right: Tensor },
    /// Pre-RoPE bases `x·q_q`, `x·q_k`, and post-RoPE queries/keys.
    Qr {
        xq: Tensor,
        xk: Tensor,
        q: Tensor,
        k: Tensor,
    },
}

/// Forward of one factored head on an `n×D` sequence.
pub(crate) fn factored_head(
    x: &Tensor,
    x_aug: &Tensor,
    f: &CloverFactors,
    head: usize,
    mask: &MaskSpec,
    rope: &RopeSpec,
) -> Result<(Tensor, HeadTrace)> {
    let scale = f.dims.logit_scale();
    let (logits, qk) = match &f.qk {
        QkFactors::Svd { heads, .. } => {
            let h = &heads[head];
            let left = matmul(x_aug, &h.u)?;
            let right = matmul(x_aug, &h.v.transpose())?;
            let s = f.s_qk_matrix(head).expect("svd mode");
            let logits = matmul(&matmul(&left, &s)?, &right.transpose())?.scale(scale);
            (logits, QkTrace::Svd { left, right })
        }
        QkFactors::Qr { heads } => {
            let h = &heads[head];
            let xq = matmul(x, &h.q_q)?;
            let xk = matmul(x, &h.q_k)?;
            let mut q = matmul(&xq, &h.r_q)?;
            let mut k = matmul(&xk, &h.r_k)?;
            if rope.enabled {
                q = rope_rotate(&q, rope.base, false)?;
                k = rope_rotate(&k, rope.base, false)?;
            }
            let logits = matmul(&q, &k.transpose())?.scale(scale);
            (logits, QkTrace::Qr { xq, xk, q, k })
        }
    };
    let attn = softmax_rows(&logits, mask)?;
    let vo = &f.vo[head];
    let v_proj = matmul(x, &vo.u)?;
    let v_mixed = matmul(&v_proj, &f.s_vo_matrix(head))?;
    let out = matmul(&matmul(&attn, &v_mixed)?, &vo.v)?;
    Ok((
        out,
        HeadTrace {
            qk,
            attn,
            v_proj,
            v_mixed,
        },
    ))
}

pub(crate) fn check_factored_compat(f: &CloverFactors, rope: &RopeSpec) -> Result<()> {
    if rope.enabled && f.mode() == DecomposeMode::SvdBoth {
        return Err(Error::invalid(
            "RoPE sits between the query and key projections; use qr mode factors",
        ));
    }
    if rope.enabled && !f.dims.head.is_multiple_of(2) {
        return Err(Error::invalid("RoPE needs an even head dimension"));
    }
    Ok(())
}

/// Factored forward with per-sequence, per-head traces.
pub(crate) fn factored_forward_traced(
    x: &Tensor,
    f: &CloverFactors,
    mask: &MaskSpec,
    rope: &RopeSpec,
) -> Result<(Tensor, Vec<Vec<HeadTrace>>)> {
    check_factored_compat(f, rope)?;
    let (batch, n) = check_input(x, f.dims.model)?;
    mask.validate(n, n)?;
    let mut out = Vec::with_capacity(x.numel());
    let mut traces = Vec::with_capacity(batch);
    for item in 0..batch {
        let xb = batch_item(x, item);
        let x_aug = if f.qk_augmented() {
            xb.append_ones_col()
        } else {
            xb.clone()
        };
        let mut y = Tensor::zeros(&[n, f.dims.model]);
        let mut item_traces = Vec::with_capacity(f.dims.heads);
        for head in 0..f.dims.heads {
            let (h_out, trace) = factored_head(&xb, &x_aug, f, head, mask, rope)?;
            y = y.add(&h_out)?;
            item_traces.push(trace);
        }
        if let Some(b) = &f.folded_b_o {
            y = y.add_row(b.data())?;
        }
        out.extend(y.into_data());
        traces.push(item_traces);
    }
    Ok((Tensor::new(x.shape(), out)?, traces))
}

/// Factored multi-head attention forward: `[b, n, D] -> [b, n, D]`.
pub fn mha_forward_factored(x: &Tensor, f: &CloverFactors, mask: &MaskSpec, rope: &RopeSpec) -> Result<Tensor> {
    f.validate()?;
    factored_forward_traced(x, f, mask, rope).map(|(y, _)| y)
}
