//! Absorb-decompose transform and everything built on it.
//!
//! Each head's `w_q·w_kᵀ` and `w_v·w_o` are absorbed into rank-`≤ d`
//! products and re-factored into orthonormal bases and singular values.
//! Directions with (near) zero singular value can then be dropped without
//! changing the layer's output.

use std::io::Write;
use std::path::Path;

use serde::Serialize;

use crate::attention::{
    mha_forward, mha_forward_factored, AttentionWeights, CloverFactors, DecomposeMode, Dims, QkFactors, QrHead,
    RopeSpec, SvdHead,
};
use crate::error::{Error, Result};
use crate::linalg::{householder_qr, product_svd};
use crate::tensor::{MaskSpec, Rng, Tensor};

/// Singular values at or below this fraction of the head's largest one
/// count as exact zeros.
pub const EXACT_ZERO_REL: f64 = 1e-12;

/// A head's absorbed product kept in factored form: `W = left · right`.
#[derive(Clone, Debug, PartialEq)]
pub struct LowRankPair {
    /// `D'×r`
    pub left: Tensor,
    /// `r×D'`
    pub right: Tensor,
}

impl LowRankPair {
    pub fn product(&self) -> Tensor {
        self.left.matmul(&self.right).expect("pair shapes agree")
    }
}

/// Per-head `(w_q slab, w_k slabᵀ)` pairs. With query/key biases the slabs
/// gain a last row holding the bias, acting on `[x, 1]`.
pub fn absorb_qk(w: &AttentionWeights) -> Result<(Vec<LowRankPair>, bool)> {
    w.validate()?;
    let augmented = w.has_qk_bias();
    let r = w.qk_inner();
    let with_bias = |slab: Tensor, b: &Option<Tensor>, head: usize| -> Tensor {
        if !augmented {
            return slab;
        }
        let row = b
            .as_ref()
            .map_or_else(|| vec![0.0; r], |b| b.index_outer(head).into_data());
        let mut data = slab.into_data();
        data.extend(row);
        Tensor::new(&[w.dims.model + 1, r], data).expect("augmented slab shape")
    };
    let pairs = (0..w.dims.heads)
        .map(|head| LowRankPair {
            left: with_bias(w.q_slab(head), &w.b_q, head),
            right: with_bias(w.k_slab(head), &w.b_k, head).transpose(),
        })
        .collect();
    Ok((pairs, augmented))
}

/// Per-head `(w_v slab, w_o slab)` pairs and the output bias with `b_v`
/// folded in (attention rows sum to one, so `A·1·b_vᵀ·w_o = 1·b_vᵀ·w_o`).
pub fn absorb_vo(w: &AttentionWeights) -> Result<(Vec<LowRankPair>, Option<Tensor>)> {
    w.validate()?;
    let pairs = (0..w.dims.heads)
        .map(|head| LowRankPair {
            left: w.v_slab(head),
            right: w.o_slab(head),
        })
        .collect();
    let folded = match (&w.b_o, &w.b_v) {
        (None, None) => None,
        (b_o, b_v) => {
            let mut acc = b_o.clone().unwrap_or_else(|| Tensor::zeros(&[w.dims.model]));
            if let Some(b_v) = b_v {
                for head in 0..w.dims.heads {
                    let row = b_v.index_outer(head).reshape(&[1, w.vo_inner()])?;
                    let contrib = row.matmul(&w.o_slab(head))?.reshape(&[w.dims.model])?;
                    acc = acc.add(&contrib)?;
                }
            }
            Some(acc)
        }
    };
    Ok((pairs, folded))
}

fn svd_heads(pairs: &[LowRankPair], pair: &'static str) -> Result<Vec<SvdHead>> {
    pairs
        .iter()
        .enumerate()
        .map(|(head, p)| {
            product_svd(&p.left, &p.right)
                .map(|f| SvdHead { u: f.u, s: f.s, v: f.v })
                .map_err(|e| Error::Decomposition {
                    pair,
                    head,
                    source: Box::new(e),
                })
        })
        .collect()
}

/// Absorbs and decomposes both projection pairs of a layer.
pub fn decompose_factors(w: &AttentionWeights, mode: DecomposeMode) -> Result<CloverFactors> {
    let (vo_pairs, folded_b_o) = absorb_vo(w)?;
    let vo = svd_heads(&vo_pairs, "vo")?;
    let qk = match mode {
        DecomposeMode::SvdBoth => {
            let (pairs, augmented) = absorb_qk(w)?;
            QkFactors::Svd {
                heads: svd_heads(&pairs, "qk")?,
                augmented,
            }
        }
        DecomposeMode::QrQkSvdVo => {
            if w.has_qk_bias() {
                return Err(Error::invalid("qr mode does not support query/key biases"));
            }
            if w.qk_inner() != w.dims.head {
                return Err(Error::invalid("qr mode needs full-width query/key slabs"));
            }
            let heads = (0..w.dims.heads)
                .map(|head| {
                    let wrap = |e| Error::Decomposition {
                        pair: "qk",
                        head,
                        source: Box::new(e),
                    };
                    let q = householder_qr(&w.q_slab(head)).map_err(wrap)?;
                    let k = householder_qr(&w.k_slab(head)).map_err(wrap)?;
                    Ok(QrHead {
                        q_q: q.q,
                        r_q: q.r,
                        q_k: k.q,
                        r_k: k.r,
                    })
                })
                .collect::<Result<Vec<_>>>()?;
            QkFactors::Qr { heads }
        }
    };
    let f = CloverFactors {
        dims: w.dims,
        qk,
        vo,
        folded_b_o,
        trainable_s_qk: None,
        trainable_s_vo: None,
    };
    f.validate()?;
    Ok(f)
}

/// Retained ranks and parameter counts after spectral pruning.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct PruneStats {
    pub per_head_rank_qk: Vec<usize>,
    pub per_head_rank_vo: Vec<usize>,
    pub params_before_qk: usize,
    pub params_after_qk: usize,
    pub params_before_vo: usize,
    pub params_after_vo: usize,
    pub reduction_qk_pct: f64,
    pub reduction_vo_pct: f64,
    pub reduction_total_pct: f64,
}

impl PruneStats {
    pub fn params_before(&self) -> usize {
        self.params_before_qk + self.params_before_vo
    }

    pub fn params_after(&self) -> usize {
        self.params_after_qk + self.params_after_vo
    }

    /// Human-readable summary table.
    pub fn table(&self) -> String {
        let mut out = String::from("head  rank_qk  rank_vo\n");
        for (i, (q, v)) in self.per_head_rank_qk.iter().zip(&self.per_head_rank_vo).enumerate() {
            out += &format!("{i:>4}  {q:>7}  {v:>7}\n");
        }
        out += &format!(
            "qk params {} -> {} ({:.2}% pruned)\nvo params {} -> {} ({:.2}% pruned)\ntotal     {} -> {} ({:.2}% pruned)\n",
            self.params_before_qk,
            self.params_after_qk,
            self.reduction_qk_pct,
            self.params_before_vo,
            self.params_after_vo,
            self.reduction_vo_pct,
            self.params_before(),
            self.params_after(),
            self.reduction_total_pct,
        );
        out
    }

    /// One row per head plus a `total` row.
    pub fn write_csv<W: Write>(&self, layer: usize, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["layer", "head", "rank_qk", "rank_vo", "params_qk", "params_vo"])?;
        let heads = self.per_head_rank_qk.len();
        let qk_unit = self
            .params_after_qk
            .checked_div(self.per_head_rank_qk.iter().sum())
            .unwrap_or(0);
        let vo_unit = self
            .params_after_vo
            .checked_div(self.per_head_rank_vo.iter().sum())
            .unwrap_or(0);
        for head in 0..heads {
            let (rq, rv) = (self.per_head_rank_qk[head], self.per_head_rank_vo[head]);
            w.write_record([
                layer.to_string(),
                head.to_string(),
                rq.to_string(),
                rv.to_string(),
                (rq * qk_unit).to_string(),
                (rv * vo_unit).to_string(),
            ])?;
        }
        w.write_record([
            layer.to_string(),
            "total".into(),
            self.per_head_rank_qk.iter().sum::<usize>().to_string(),
            self.per_head_rank_vo.iter().sum::<usize>().to_string(),
            self.params_after_qk.to_string(),
            self.params_after_vo.to_string(),
        ])?;
        w.flush().map_err(|e| Error::Csv(e.into()))?;
        Ok(())
    }
}

fn reduction_pct(before: usize, after: usize) -> f64 {
    if before == 0 {
        0.0
    } else {
        100.0 * (before - after) as f64 / before as f64
    }
}

fn truncate(h: &SvdHead, threshold: f64) -> SvdHead {
    let keep = h.s.iter().take_while(|&&s| s > threshold).count();
    SvdHead {
        u: h.u.columns(0, keep),
        s: h.s[..keep].to_vec(),
        v: h.v.row_range(0, keep),
    }
}

/// Drops singular triples with `s <= threshold` from each head.
///
/// Each retained direction costs `2·D' + 1` parameters (one `u` column,
/// one `v` row, one singular value).
pub fn prune_factors(f: &CloverFactors, threshold_qk: f64, threshold_vo: f64) -> Result<(CloverFactors, PruneStats)> {
    if [threshold_qk, threshold_vo].iter().any(|t| t.is_nan() || *t < 0.0) {
        return Err(Error::invalid("pruning thresholds must be nonnegative"));
    }
    let QkFactors::Svd { heads, augmented } = &f.qk else {
        return Err(Error::invalid("qr mode factors carry no singular values to prune"));
    };
    if f.trainable_s_qk.is_some() || f.trainable_s_vo.is_some() {
        return Err(Error::invalid(
            "prune before attaching trainable singular-value matrices",
        ));
    }
    let qk: Vec<SvdHead> = heads.iter().map(|h| truncate(h, threshold_qk)).collect();
    let vo: Vec<SvdHead> = f.vo.iter().map(|h| truncate(h, threshold_vo)).collect();

    let qk_unit = 2 * f.qk_input_dim() + 1;
    let vo_unit = 2 * f.dims.model + 1;
    let count = |hs: &[SvdHead], unit: usize| hs.iter().map(|h| h.rank() * unit).sum::<usize>();
    let params_before_qk = count(heads, qk_unit);
    let params_before_vo = count(&f.vo, vo_unit);
    let params_after_qk = count(&qk, qk_unit);
    let params_after_vo = count(&vo, vo_unit);
    let stats = PruneStats {
        per_head_rank_qk: qk.iter().map(SvdHead::rank).collect(),
        per_head_rank_vo: vo.iter().map(SvdHead::rank).collect(),
        params_before_qk,
        params_after_qk,
        params_before_vo,
        params_after_vo,
        reduction_qk_pct: reduction_pct(params_before_qk, params_after_qk),
        reduction_vo_pct: reduction_pct(params_before_vo, params_after_vo),
        reduction_total_pct: reduction_pct(params_before_qk + params_before_vo, params_after_qk + params_after_vo),
    };
    let pruned = CloverFactors {
        qk: QkFactors::Svd {
            heads: qk,
            augmented: *augmented,
        },
        vo,
        ..f.clone()
    };
    pruned.validate()?;
    Ok((pruned, stats))
}

/// Per-head Euclidean norms of each inner dimension for the QK and VO
/// pairs, in index order. QK concatenates the `w_q` and `w_k` columns (and
/// bias entries); VO concatenates the `w_v` column (and `b_v` entry) with
/// the matching `w_o` row.
pub fn dimension_norms(w: &AttentionWeights) -> (Vec<Vec<f64>>, Vec<Vec<f64>>) {
    let col_sq = |t: &Tensor, j: usize| (0..t.rows()).map(|i| t.get(i, j).powi(2)).sum::<f64>();
    let bias_sq = |b: &Option<Tensor>, head: usize, j: usize| b.as_ref().map_or(0.0, |b| b.at(&[head, j]).powi(2));
    let mut qk = Vec::with_capacity(w.dims.heads);
    let mut vo = Vec::with_capacity(w.dims.heads);
    for head in 0..w.dims.heads {
        let (q, k) = (w.q_slab(head), w.k_slab(head));
        qk.push(
            (0..w.qk_inner())
                .map(|j| (col_sq(&q, j) + col_sq(&k, j) + bias_sq(&w.b_q, head, j) + bias_sq(&w.b_k, head, j)).sqrt())
                .collect(),
        );
        let (v, o) = (w.v_slab(head), w.o_slab(head));
        vo.push(
            (0..w.vo_inner())
                .map(|j| {
                    let row: f64 = o.row(j).iter().map(|x| x * x).sum();
                    (col_sq(&v, j) + row + bias_sq(&w.b_v, head, j)).sqrt()
                })
                .collect(),
        );
    }
    (qk, vo)
}

/// Indices of the `keep` largest scores, ties resolved toward lower index.
fn top_indices(scores: &[f64], keep: usize) -> Vec<bool> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    let mut kept = vec![false; scores.len()];
    for &i in &order[..keep] {
        kept[i] = true;
    }
    kept
}

/// Norm-based baseline: within each head, zero the inner dimensions with
/// the smallest Euclidean norm so that `keep_fraction` of them remain.
pub fn vanilla_prune(w: &AttentionWeights, keep_fraction: f64) -> Result<AttentionWeights> {
    w.validate()?;
    if !(keep_fraction > 0.0 && keep_fraction <= 1.0) {
        return Err(Error::invalid(format!("keep_fraction {keep_fraction} outside (0, 1]")));
    }
    let keep_of = |r: usize| -> Result<usize> {
        let k = (keep_fraction * r as f64).round() as usize;
        if k == 0 {
            return Err(Error::invalid(format!(
                "keep_fraction {keep_fraction} retains no dimension of {r}"
            )));
        }
        Ok(k.min(r))
    };
    let (kq, kv) = (keep_of(w.qk_inner())?, keep_of(w.vo_inner())?);
    let (qk_norms, vo_norms) = dimension_norms(w);
    let qk_keep: Vec<Vec<bool>> = qk_norms.iter().map(|s| top_indices(s, kq)).collect();
    let vo_keep: Vec<Vec<bool>> = vo_norms.iter().map(|s| top_indices(s, kv)).collect();

    // [D, h, r] and [h, r] share the trailing (head, inner) index pair.
    let mask_in = |t: &Tensor, keep: &[Vec<bool>]| {
        let (h, r) = (t.shape()[t.ndim() - 2], t.shape()[t.ndim() - 1]);
        Tensor::from_fn(t.shape(), |ix| {
            let (head, j) = (ix[ix.len() - 2], ix[ix.len() - 1]);
            debug_assert!(head < h && j < r);
            if keep[head][j] {
                t.at(ix)
            } else {
                0.0
            }
        })
    };
    let mask_out = |t: &Tensor, keep: &[Vec<bool>]| {
        Tensor::from_fn(t.shape(), |ix| if keep[ix[0]][ix[1]] { t.at(ix) } else { 0.0 })
    };
    let out = AttentionWeights {
        dims: w.dims,
        w_q: mask_in(&w.w_q, &qk_keep),
        w_k: mask_in(&w.w_k, &qk_keep),
        w_v: mask_in(&w.w_v, &vo_keep),
        w_o: mask_out(&w.w_o, &vo_keep),
        b_q: w.b_q.as_ref().map(|b| mask_in(b, &qk_keep)),
        b_k: w.b_k.as_ref().map(|b| mask_in(b, &qk_keep)),
        b_v: w.b_v.as_ref().map(|b| mask_in(b, &vo_keep)),
        b_o: w.b_o.clone(),
    };
    out.validate()?;
    Ok(out)
}

fn max_rank(ranks: &[usize]) -> usize {
    ranks.iter().copied().max().unwrap_or(0)
}

/// Folds singular values (or triangular factors) back into plain attention
/// weights. Heads with smaller rank are padded with zero columns.
pub fn merge_back(f: &CloverFactors) -> Result<AttentionWeights> {
    f.validate()?;
    let Dims { model, heads, .. } = f.dims;
    let mut b_q = None;
    let mut b_k = None;
    let (q_slabs, k_slabs): (Vec<Tensor>, Vec<Tensor>) = match &f.qk {
        QkFactors::Svd { heads: hs, augmented } => {
            let r = max_rank(&f.qk_ranks());
            let mut qs = Vec::with_capacity(heads);
            let mut ks = Vec::with_capacity(heads);
            for (i, h) in hs.iter().enumerate() {
                let s = f.s_qk_matrix(i).expect("svd mode");
                qs.push(h.u.matmul(&s)?.pad_cols(r));
                ks.push(h.v.transpose().pad_cols(r));
            }
            if *augmented {
                let split = |slabs: Vec<Tensor>| -> (Vec<Tensor>, Tensor) {
                    let bias: Vec<Tensor> = slabs
                        .iter()
                        .map(|s| s.row_range(model, model + 1).reshape(&[r]).expect("row"))
                        .collect();
                    let body = slabs.iter().map(|s| s.row_range(0, model)).collect();
                    (body, Tensor::stack(&bias).expect("equal shapes"))
                };
                let (qb, bq) = split(qs);
                let (kb, bk) = split(ks);
                b_q = Some(bq);
                b_k = Some(bk);
                (qb, kb)
            } else {
                (qs, ks)
            }
        }
        QkFactors::Qr { heads: hs } => {
            let qs = hs.iter().map(|h| h.q_q.matmul(&h.r_q)).collect::<Result<Vec<_>>>()?;
            let ks = hs.iter().map(|h| h.q_k.matmul(&h.r_k)).collect::<Result<Vec<_>>>()?;
            (qs, ks)
        }
    };
    let r_vo = max_rank(&f.vo_ranks());
    let v_slabs =
        f.vo.iter()
            .enumerate()
            .map(|(i, h)| Ok(h.u.matmul(&f.s_vo_matrix(i))?.pad_cols(r_vo)))
            .collect::<Result<Vec<_>>>()?;
    let o_slabs: Vec<Tensor> = f.vo.iter().map(|h| h.v.pad_rows(r_vo)).collect();
    let w = AttentionWeights {
        dims: f.dims,
        w_q: AttentionWeights::pack_in_slabs(&q_slabs)?,
        w_k: AttentionWeights::pack_in_slabs(&k_slabs)?,
        w_v: AttentionWeights::pack_in_slabs(&v_slabs)?,
        w_o: Tensor::stack(&o_slabs)?,
        b_q,
        b_k,
        b_v: None,
        b_o: f.folded_b_o.clone(),
    };
    w.validate()?;
    Ok(w)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Projection {
    Q,
    K,
    V,
    O,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum CountMethod {
    /// RoPE-compatible layout: triangular `R_q`, `R_k` plus full `S_vo`.
    CloverQr,
    /// Full `S_qk` and `S_vo`.
    CloverSvd,
    Lora(usize),
    Dora(usize),
    Full,
}

impl CountMethod {
    /// Parses `clover`, `clover-svd`, `lora:R`, `dora:R` or `full`.
    pub fn parse(text: &str) -> Result<Self> {
        let rank = |s: &str| {
            s.parse::<usize>()
                .map_err(|_| Error::invalid(format!("bad rank in {text:?}")))
        };
        match text {
            "clover" | "clover-qr" => Ok(Self::CloverQr),
            "clover-svd" => Ok(Self::CloverSvd),
            "full" => Ok(Self::Full),
            _ => {
                if let Some(r) = text.strip_prefix("lora:") {
                    Ok(Self::Lora(rank(r)?))
                } else if let Some(r) = text.strip_prefix("dora:") {
                    Ok(Self::Dora(rank(r)?))
                } else {
                    Err(Error::invalid(format!("unknown method {text:?}")))
                }
            }
        }
    }
}

/// Trainable and frozen parameter counts for one attention layer.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ParamReport {
    pub method: String,
    pub trainable: usize,
    pub frozen: usize,
    pub formula: String,
    /// Alternative readings of the same method, `(label, trainable, formula)`.
    pub alternatives: Vec<(String, usize, String)>,
}

impl std::fmt::Display for ParamReport {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        writeln!(f, "method     {}", self.method)?;
        writeln!(f, "trainable  {}  = {}", self.trainable, self.formula)?;
        writeln!(f, "frozen     {}", self.frozen)?;
        for (label, n, formula) in &self.alternatives {
            writeln!(f, "alt {label}: {n}  = {formula}")?;
        }
        Ok(())
    }
}

pub const QKV: [Projection; 3] = [Projection::Q, Projection::K, Projection::V];
pub const QKVO: [Projection; 4] = [Projection::Q, Projection::K, Projection::V, Projection::O];

/// Closed-form parameter counts. Only attention projection matrices are
/// counted; biases, embeddings and MLPs are excluded. `targets` applies to
/// the adapter methods and `full`.
pub fn count_params(dims: Dims, method: CountMethod, targets: &[Projection]) -> ParamReport {
    let Dims {
        model: dm,
        heads: h,
        head: d,
    } = dims;
    let proj = dm * h * d;
    let total = 4 * proj;
    let tri = d * (d + 1) / 2;
    let t = targets.len();
    match method {
        CountMethod::CloverQr => ParamReport {
            method: "clover (qr-qk, svd-vo)".into(),
            trainable: 2 * h * tri + h * d * d,
            frozen: 4 * proj,
            formula: format!("2·h·d(d+1)/2 + h·d² = 2·{h}·{tri} + {h}·{}", d * d),
            alternatives: vec![(
                "with full S_qk".into(),
                2 * h * tri + 2 * h * d * d,
                format!("2·h·d(d+1)/2 + 2·h·d² = 2·{h}·{tri} + 2·{h}·{}", d * d),
            )],
        },
        CountMethod::CloverSvd => ParamReport {
            method: "clover (svd-both)".into(),
            trainable: 2 * h * d * d,
            frozen: 4 * proj,
            formula: format!("2·h·d² = 2·{h}·{}", d * d),
            alternatives: vec![],
        },
        CountMethod::Lora(r) => ParamReport {
            method: format!("lora:{r}"),
            trainable: t * r * (dm + h * d),
            frozen: total,
            formula: format!("targets·r·(D + h·d) = {t}·{r}·({dm} + {})", h * d),
            alternatives: vec![],
        },
        CountMethod::Dora(r) => ParamReport {
            method: format!("dora:{r}"),
            trainable: t * (r * (dm + h * d) + dm),
            frozen: total,
            formula: format!("targets·(r·(D + h·d) + D) = {t}·({r}·({dm} + {}) + {dm})", h * d),
            alternatives: vec![],
        },
        CountMethod::Full => ParamReport {
            method: "full".into(),
            trainable: t * proj,
            frozen: total - t * proj,
            formula: format!("targets·D·h·d = {t}·{dm}·{h}·{d}"),
            alternatives: vec![],
        },
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct HeadSpectrum {
    pub layer: usize,
    pub head: usize,
    pub sv_qk: Vec<f64>,
    pub sv_vo: Vec<f64>,
    pub norm_qk: Vec<f64>,
    pub norm_vo: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Default, Serialize)]
pub struct SpectrumReport {
    pub heads: Vec<HeadSpectrum>,
}

/// Singular values of every head's `W_QK` and `W_VO` next to the sorted
/// per-dimension norms used by [`vanilla_prune`].
pub fn spectrum_report(w: &AttentionWeights, layer: usize) -> Result<SpectrumReport> {
    let f = decompose_factors(w, DecomposeMode::SvdBoth)?;
    let (qk_norms, vo_norms) = dimension_norms(w);
    let QkFactors::Svd { heads: qk, .. } = &f.qk else {
        unreachable!("svd mode requested")
    };
    let sorted = |mut v: Vec<f64>| {
        v.sort_by(|a, b| b.total_cmp(a));
        v
    };
    let heads = (0..w.dims.heads)
        .map(|head| HeadSpectrum {
            layer,
            head,
            sv_qk: qk[head].s.clone(),
            sv_vo: f.vo[head].s.clone(),
            norm_qk: sorted(qk_norms[head].clone()),
            norm_vo: sorted(vo_norms[head].clone()),
        })
        .collect();
    Ok(SpectrumReport { heads })
}

/// Floats written with 17 significant digits.
pub fn format_float(v: f64) -> String {
    format!("{v:.16e}")
}

impl SpectrumReport {
    pub fn extend(&mut self, other: SpectrumReport) {
        self.heads.extend(other.heads);
    }

    /// Rows `layer,head,index,value,kind` with `kind ∈ {sv_qk, sv_vo, norm_qk, norm_vo}`.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["layer", "head", "index", "value", "kind"])?;
        for h in &self.heads {
            for (kind, values) in [
                ("sv_qk", &h.sv_qk),
                ("sv_vo", &h.sv_vo),
                ("norm_qk", &h.norm_qk),
                ("norm_vo", &h.norm_vo),
            ] {
                for (i, v) in values.iter().enumerate() {
                    w.write_record([
                        h.layer.to_string(),
                        h.head.to_string(),
                        i.to_string(),
                        format_float(*v),
                        kind.into(),
                    ])?;
                }
            }
        }
        w.flush().map_err(|e| Error::Csv(e.into()))?;
        Ok(())
    }

    pub fn save_csv(&self, path: &Path) -> Result<()> {
        let mut buf = Vec::new();
        self.write_csv(&mut buf)?;
        crate::archive::write_atomic(path, &buf)
    }
}

/// Probe configuration for [`verify_equivalence`].
#[derive(Clone, Debug)]
pub struct ProbeSpec {
    pub seed: u64,
    pub batch: usize,
    pub seq_len: usize,
}

impl Default for ProbeSpec {
    fn default() -> Self {
        Self {
            seed: 0x5EED,
            batch: 2,
            seq_len: 8,
        }
    }
}

/// Max-abs difference between plain and factored forwards on seeded random inputs.
pub fn verify_equivalence(
    w: &AttentionWeights,
    f: &CloverFactors,
    mask: &MaskSpec,
    rope: &RopeSpec,
    probe: &ProbeSpec,
) -> Result<f64> {
    if w.dims.model != f.dims.model || w.dims.heads != f.dims.heads {
        return Err(Error::invalid(format!(
            "weights {:?} and factors {:?} disagree",
            w.dims, f.dims
        )));
    }
    let mut rng = Rng::new(probe.seed);
    let x = Tensor::randn(&[probe.batch, probe.seq_len, w.dims.model], 1.0, &mut rng);
    let plain = mha_forward(&x, w, mask, rope)?;
    let factored = mha_forward_factored(&x, f, mask, rope)?;
    Ok(plain.max_abs_diff(&factored))
}

#[cfg(test)]
#[allow(clippy::needless_range_loop)]
mod tests {
    use super::*;
    use crate::attention::{plain_head_logits, random_weights, SynthOptions};
    use crate::linalg::jacobi_svd;

    fn weights(dims: Dims, seed: u64, opts: SynthOptions) -> AttentionWeights {
        random_weights(dims, &opts, &mut Rng::new(seed)).unwrap()
    }

    fn probe_x(dims: Dims, seed: u64) -> Tensor {
        Tensor::randn(&[2, 6, dims.model], 1.0, &mut Rng::new(seed))
    }

    fn slab_weights(dims: Dims) -> AttentionWeights {
        let slab = Tensor::eye_slab(dims.model, dims.head);
        let slabs = vec![slab.clone(); dims.heads];
        let w_in = AttentionWeights::pack_in_slabs(&slabs).unwrap();
        let w_o = Tensor::stack(&vec![slab.transpose(); dims.heads]).unwrap();
        AttentionWeights::new(dims, w_in.clone(), w_in.clone(), w_in, w_o).unwrap()
    }

    #[test]
    fn absorb_qk_examples() {
        let dims = Dims::new(8, 2, 3);
        let (pairs, aug) = absorb_qk(&slab_weights(dims)).unwrap();
        assert!(!aug);
        let projector = Tensor::diag(&[1.0, 1.0, 1.0, 0.0, 0.0, 0.0, 0.0, 0.0]);
        for p in &pairs {
            assert_eq!(p.product(), projector);
        }
        let mut w = weights(dims, 1, SynthOptions::default());
        w.w_k = Tensor::zeros(w.w_k.shape());
        for p in absorb_qk(&w).unwrap().0 {
            assert_eq!(p.product(), Tensor::zeros(&[8, 8]));
        }
    }

    #[test]
    fn absorb_qk_matches_explicit_product() {
        let dims = Dims::new(16, 2, 4);
        let w = weights(dims, 2, SynthOptions::default());
        let (pairs, _) = absorb_qk(&w).unwrap();
        for head in 0..2 {
            let q = w.q_slab(head);
            let k = w.k_slab(head);
            let mut oracle = Tensor::zeros(&[16, 16]).into_data();
            for a in 0..16 {
                for b in 0..16 {
                    oracle[a * 16 + b] = (0..4).map(|j| q.get(a, j) * k.get(b, j)).sum();
                }
            }
            let oracle = Tensor::new(&[16, 16], oracle).unwrap();
            assert!(pairs[head].product().max_abs_diff(&oracle) <= 1e-14);
        }
    }

    #[test]
    fn absorb_vo_bias_folding() {
        let dims = Dims::new(4, 1, 4);
        let mut w = slab_weights(dims);
        w.b_o = Some(Tensor::new(&[4], vec![0.5, -1.0, 2.0, 0.0]).unwrap());
        assert_eq!(absorb_vo(&w).unwrap().1, w.b_o);
        w.b_v = Some(Tensor::new(&[1, 4], vec![1.0, 0.0, 0.0, 0.0]).unwrap());
        let folded = absorb_vo(&w).unwrap().1.unwrap();
        assert_eq!(folded.data(), &[1.5, -1.0, 2.0, 0.0]);
    }

    #[test]
    fn folded_bias_forward_equivalence() {
        let dims = Dims::new(8, 2, 4);
        let w = weights(
            dims,
            3,
            SynthOptions {
                bias: true,
                ..Default::default()
            },
        );
        let (_, folded) = absorb_vo(&w).unwrap();
        let mut moved = w.clone();
        moved.b_v = None;
        moved.b_o = folded;
        let x = probe_x(dims, 4);
        for mask in [MaskSpec::None, MaskSpec::Causal] {
            let a = mha_forward(&x, &w, &mask, &RopeSpec::default()).unwrap();
            let b = mha_forward(&x, &moved, &mask, &RopeSpec::default()).unwrap();
            assert!(a.max_abs_diff(&b) <= 1e-12);
        }
    }

    #[test]
    fn decompose_orthonormal_slabs_gives_unit_spectrum() {
        let f = decompose_factors(&slab_weights(Dims::new(8, 2, 3)), DecomposeMode::SvdBoth).unwrap();
        let QkFactors::Svd { heads, .. } = &f.qk else { panic!() };
        for h in heads.iter().chain(&f.vo) {
            for s in &h.s {
                assert!((s - 1.0).abs() <= 1e-15);
            }
        }
    }

    #[test]
    fn duplicated_value_column_drops_rank() {
        let dims = Dims::new(8, 1, 4);
        let mut w = weights(dims, 5, SynthOptions::default());
        let mut v = w.w_v.data().to_vec();
        for a in 0..8 {
            v[a * 4 + 3] = v[a * 4 + 2];
        }
        w.w_v = Tensor::new(w.w_v.shape(), v).unwrap();
        let f = decompose_factors(&w, DecomposeMode::SvdBoth).unwrap();
        assert!(f.vo[0].s[3] <= 1e-12, "{:?}", f.vo[0].s);
    }

    #[test]
    fn factored_forward_is_lossless() {
        for (bias, mask) in [
            (false, MaskSpec::None),
            (true, MaskSpec::Causal),
            (true, MaskSpec::SlidingWindow(3)),
        ] {
            let dims = Dims::new(16, 2, 4);
            let w = weights(
                dims,
                6,
                SynthOptions {
                    bias,
                    ..Default::default()
                },
            );
            let f = decompose_factors(&w, DecomposeMode::SvdBoth).unwrap();
            assert_eq!(f.qk_augmented(), bias);
            let x = probe_x(dims, 7);
            let a = mha_forward(&x, &w, &mask, &RopeSpec::default()).unwrap();
            let b = mha_forward_factored(&x, &f, &mask, &RopeSpec::default()).unwrap();
            assert!(a.max_abs_diff(&b) <= 1e-10);
        }
    }

    #[test]
    fn qr_mode_with_rope_is_lossless() {
        let dims = Dims::new(16, 2, 4);
        let w = weights(dims, 8, SynthOptions::default());
        let f = decompose_factors(&w, DecomposeMode::QrQkSvdVo).unwrap();
        let x = probe_x(dims, 9);
        let rope = RopeSpec::enabled(10_000.0);
        let a = mha_forward(&x, &w, &MaskSpec::Causal, &rope).unwrap();
        let b = mha_forward_factored(&x, &f, &MaskSpec::Causal, &rope).unwrap();
        assert!(a.max_abs_diff(&b) <= 1e-10);
        let svd = decompose_factors(&w, DecomposeMode::SvdBoth).unwrap();
        assert!(mha_forward_factored(&x, &svd, &MaskSpec::None, &rope).is_err());
        let mut biased = w.clone();
        biased.b_q = Some(Tensor::zeros(&[2, 4]));
        assert!(decompose_factors(&biased, DecomposeMode::QrQkSvdVo).is_err());
    }

    #[test]
    fn trainable_diagonal_matches_diagonal_path() {
        let dims = Dims::new(8, 2, 4);
        let w = weights(
            dims,
            10,
            SynthOptions {
                bias: true,
                ..Default::default()
            },
        );
        let f = decompose_factors(&w, DecomposeMode::SvdBoth).unwrap();
        let t = f.clone().with_trainable();
        let x = probe_x(dims, 11);
        let a = mha_forward_factored(&x, &f, &MaskSpec::Causal, &RopeSpec::default()).unwrap();
        let b = mha_forward_factored(&x, &t, &MaskSpec::Causal, &RopeSpec::default()).unwrap();
        assert!(a.max_abs_diff(&b) <= 1e-12);
    }

    #[test]
    fn identity_like_factors_reduce_to_plain_attention() {
        let dims = Dims::new(6, 1, 2);
        let slab = Tensor::eye_slab(6, 2);
        let head = SvdHead {
            u: slab.clone(),
            s: vec![1.0, 1.0],
            v: slab.transpose(),
        };
        let f = CloverFactors {
            dims,
            qk: QkFactors::Svd {
                heads: vec![head.clone()],
                augmented: false,
            },
            vo: vec![head],
            folded_b_o: None,
            trainable_s_qk: None,
            trainable_s_vo: None,
        };
        let w = merge_back(&f).unwrap();
        assert_eq!(w.q_slab(0), slab);
        let x = probe_x(dims, 12);
        let a = mha_forward(&x, &w, &MaskSpec::None, &RopeSpec::default()).unwrap();
        let b = mha_forward_factored(&x, &f, &MaskSpec::None, &RopeSpec::default()).unwrap();
        assert!(a.max_abs_diff(&b) <= 1e-15);
    }

    #[test]
    fn null_prune_is_bit_identical() {
        let dims = Dims::new(8, 2, 4);
        let w = weights(dims, 13, SynthOptions::default());
        let f = decompose_factors(&w, DecomposeMode::SvdBoth).unwrap();
        let (p, stats) = prune_factors(&f, 0.0, 0.0).unwrap();
        assert_eq!(stats.per_head_rank_qk, vec![4, 4]);
        assert_eq!(stats.params_after(), stats.params_before());
        let x = probe_x(dims, 14);
        let a = mha_forward_factored(&x, &f, &MaskSpec::None, &RopeSpec::default()).unwrap();
        let b = mha_forward_factored(&x, &p, &MaskSpec::None, &RopeSpec::default()).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn constructed_rank_prunes_to_half() {
        let dims = Dims::new(16, 2, 4);
        let w = weights(
            dims,
            15,
            SynthOptions {
                head_rank: Some(2),
                ..Default::default()
            },
        );
        let f = decompose_factors(&w, DecomposeMode::SvdBoth).unwrap();
        let (p, stats) = prune_factors(&f, 1e-12, 1e-12).unwrap();
        assert_eq!(stats.per_head_rank_qk, vec![2, 2]);
        assert_eq!(stats.per_head_rank_vo, vec![2, 2]);
        assert_eq!(stats.reduction_qk_pct, 50.0);
        assert_eq!(stats.reduction_total_pct, 50.0);
        assert_eq!(stats.params_before_qk, 2 * 4 * 33);
        let x = probe_x(dims, 16);
        let a = mha_forward(&x, &w, &MaskSpec::None, &RopeSpec::default()).unwrap();
        let b = mha_forward_factored(&x, &p, &MaskSpec::None, &RopeSpec::default()).unwrap();
        assert!(a.max_abs_diff(&b) <= 1e-10);
    }

    #[test]
    fn threshold_band_is_insensitive_above_noise_floor() {
        let dims = Dims::new(16, 2, 4);
        let w = weights(
            dims,
            17,
            SynthOptions {
                head_rank: Some(2),
                noise: 1e-4,
                bias: false,
            },
        );
        let f = decompose_factors(&w, DecomposeMode::SvdBoth).unwrap();
        let (_, loose) = prune_factors(&f, 1e-3, 1e-3).unwrap();
        let (_, reference) = prune_factors(&f, 5e-3, 6e-3).unwrap();
        assert_eq!(loose.per_head_rank_qk, reference.per_head_rank_qk);
        assert_eq!(loose.per_head_rank_vo, reference.per_head_rank_vo);
        assert_eq!(reference.per_head_rank_qk, vec![2, 2]);
    }

    #[test]
    fn prune_rejects_bad_input() {
        let dims = Dims::new(8, 1, 4);
        let w = weights(dims, 18, SynthOptions::default());
        let f = decompose_factors(&w, DecomposeMode::SvdBoth).unwrap();
        assert!(prune_factors(&f, -1.0, 0.0).is_err());
        let qr = decompose_factors(&w, DecomposeMode::QrQkSvdVo).unwrap();
        assert!(prune_factors(&qr, 0.0, 0.0).is_err());
    }

    #[test]
    fn vanilla_prune_examples() {
        let dims = Dims::new(8, 2, 4);
        let w = weights(
            dims,
            19,
            SynthOptions {
                bias: true,
                ..Default::default()
            },
        );
        assert_eq!(vanilla_prune(&w, 1.0).unwrap(), w);
        let mut tiny = w.clone();
        let mut q = tiny.w_q.data().to_vec();
        let mut k = tiny.w_k.data().to_vec();
        for a in 0..8 {
            q[(a * 2) * 4 + 1] *= 1e-9;
            k[(a * 2) * 4 + 1] *= 1e-9;
        }
        tiny.w_q = Tensor::new(tiny.w_q.shape(), q).unwrap();
        tiny.w_k = Tensor::new(tiny.w_k.shape(), k).unwrap();
        tiny.b_q = None;
        tiny.b_k = None;
        let p = vanilla_prune(&tiny, 0.75).unwrap();
        let slab = p.q_slab(0);
        assert!((0..8).all(|a| slab.get(a, 1) == 0.0));
        assert!((0..8).any(|a| slab.get(a, 0) != 0.0));
        assert!(vanilla_prune(&w, 0.0).is_err());
        assert!(vanilla_prune(&w, 0.1).is_err());
    }

    #[test]
    fn vanilla_is_lossy_where_spectral_is_lossless() {
        let dims = Dims::new(16, 2, 4);
        let w = weights(
            dims,
            20,
            SynthOptions {
                head_rank: Some(2),
                ..Default::default()
            },
        );
        let x = probe_x(dims, 21);
        let base = mha_forward(&x, &w, &MaskSpec::None, &RopeSpec::default()).unwrap();
        let vanilla = mha_forward(
            &x,
            &vanilla_prune(&w, 0.5).unwrap(),
            &MaskSpec::None,
            &RopeSpec::default(),
        )
        .unwrap();
        let f = decompose_factors(&w, DecomposeMode::SvdBoth).unwrap();
        let (p, _) = prune_factors(&f, 1e-12, 1e-12).unwrap();
        let spectral = mha_forward_factored(&x, &p, &MaskSpec::None, &RopeSpec::default()).unwrap();
        assert!(base.max_abs_diff(&vanilla) >= 1e-2, "{}", base.max_abs_diff(&vanilla));
        assert!(base.max_abs_diff(&spectral) <= 1e-10);
    }

    #[test]
    fn merge_back_round_trip_and_shapes() {
        let dims = Dims::new(16, 2, 4);
        for bias in [false, true] {
            let w = weights(
                dims,
                22,
                SynthOptions {
                    bias,
                    ..Default::default()
                },
            );
            let f = decompose_factors(&w, DecomposeMode::SvdBoth).unwrap();
            let merged = merge_back(&f).unwrap();
            let x = probe_x(dims, 23);
            let a = mha_forward(&x, &w, &MaskSpec::Causal, &RopeSpec::default()).unwrap();
            let b = mha_forward(&x, &merged, &MaskSpec::Causal, &RopeSpec::default()).unwrap();
            assert!(a.max_abs_diff(&b) <= 1e-10);
        }
        let w = weights(
            dims,
            24,
            SynthOptions {
                head_rank: Some(3),
                ..Default::default()
            },
        );
        let f = decompose_factors(&w, DecomposeMode::SvdBoth).unwrap();
        let (p, _) = prune_factors(&f, 1e-12, 1e-12).unwrap();
        let merged = merge_back(&p).unwrap();
        assert_eq!(merged.qk_inner(), 3);
        assert_eq!(merged.vo_inner(), 3);
        let qr = decompose_factors(&w, DecomposeMode::QrQkSvdVo).unwrap();
        let merged = merge_back(&qr).unwrap();
        let x = probe_x(dims, 25);
        let rope = RopeSpec::enabled(10_000.0);
        let a = mha_forward(&x, &w, &MaskSpec::None, &rope).unwrap();
        let b = mha_forward(&x, &merged, &MaskSpec::None, &rope).unwrap();
        assert!(a.max_abs_diff(&b) <= 1e-10);
    }

    #[test]
    fn scaling_s_scales_logits() {
        let dims = Dims::new(8, 2, 4);
        let w = weights(dims, 26, SynthOptions::default());
        let f = decompose_factors(&w, DecomposeMode::SvdBoth).unwrap().with_trainable();
        let mut g = f.clone();
        let t = g.trainable_s_qk.as_mut().unwrap();
        t[1] = t[1].scale(2.0);
        let (a, b) = (merge_back(&f).unwrap(), merge_back(&g).unwrap());
        let x = probe_x(dims, 27).index_outer(0);
        let rope = RopeSpec::default();
        let la = plain_head_logits(&x, &a, 1, &rope).unwrap();
        let lb = plain_head_logits(&x, &b, 1, &rope).unwrap();
        assert_eq!(la.scale(2.0), lb);
        assert_eq!(
            plain_head_logits(&x, &a, 0, &rope).unwrap(),
            plain_head_logits(&x, &b, 0, &rope).unwrap()
        );
    }

    #[test]
    fn count_params_examples() {
        let llama = Dims::new(4096, 32, 128);
        let clover = count_params(llama, CountMethod::CloverQr, &QKV);
        assert_eq!(clover.trainable, 1_052_672);
        assert_eq!(clover.alternatives[0].1, 1_052_672 + 32 * 128 * 128);
        assert_eq!(count_params(llama, CountMethod::Lora(64), &QKV).trainable, 1_572_864);
        assert_eq!(count_params(llama, CountMethod::Lora(0), &QKV).trainable, 0);
        assert_eq!(
            count_params(llama, CountMethod::Dora(64), &QKV).trainable,
            1_572_864 + 3 * 4096
        );
        assert_eq!(
            count_params(Dims::new(8, 2, 4), CountMethod::Full, &QKVO).trainable,
            256
        );
        assert_eq!(CountMethod::parse("lora:64").unwrap(), CountMethod::Lora(64));
        assert!(CountMethod::parse("lora:x").is_err());
    }

    #[test]
    fn spectrum_examples() {
        let dims = Dims::new(8, 2, 4);
        let r = spectrum_report(&slab_weights(dims), 0).unwrap();
        for h in &r.heads {
            assert!(h.sv_qk.iter().all(|s| (s - 1.0).abs() <= 1e-15));
            assert!(h.norm_qk.iter().all(|n| (n - 2f64.sqrt()).abs() <= 1e-15));
            assert_eq!(h.norm_qk.len(), 4);
        }
        let w = weights(
            Dims::new(16, 2, 4),
            28,
            SynthOptions {
                head_rank: Some(2),
                ..Default::default()
            },
        );
        let r = spectrum_report(&w, 3).unwrap();
        for h in &r.heads {
            assert_eq!(h.sv_qk.iter().filter(|&&s| s > 1e-12).count(), 2);
            assert_eq!(h.sv_vo.iter().filter(|&&s| s > 1e-12).count(), 2);
            assert!(h.norm_qk.iter().chain(&h.norm_vo).all(|&n| n > 1e-3));
        }
        let mut zero = slab_weights(dims);
        for t in [&mut zero.w_q, &mut zero.w_k, &mut zero.w_v, &mut zero.w_o] {
            *t = Tensor::zeros(t.shape());
        }
        let r = spectrum_report(&zero, 0).unwrap();
        for h in &r.heads {
            assert!(h
                .sv_qk
                .iter()
                .chain(&h.sv_vo)
                .chain(&h.norm_qk)
                .chain(&h.norm_vo)
                .all(|&v| v == 0.0));
        }
        let mut csv = Vec::new();
        r.write_csv(&mut csv).unwrap();
        let text = String::from_utf8(csv).unwrap();
        assert!(text.starts_with("layer,head,index,value,kind\n"));
        assert_eq!(text.lines().count(), 1 + 2 * 4 * 4);
    }

    #[test]
    fn explicit_product_rank_bound() {
        let dims = Dims::new(16, 2, 4);
        let w = weights(
            dims,
            29,
            SynthOptions {
                bias: true,
                ..Default::default()
            },
        );
        let (pairs, _) = absorb_qk(&w).unwrap();
        for p in pairs {
            let s = jacobi_svd(&p.product()).unwrap().s;
            assert!(s.iter().filter(|&&v| v > 1e-12).count() <= 4);
        }
    }
}
