//! Fine-tuning that touches only the head-wise mixing matrices.
//!
//! Orthonormal bases stay frozen. The trainable coordinates are the full
//! `S_qk`/`S_vo` matrices (svd mode) or the upper triangles of `R_q`/`R_k`
//! plus `S_vo` (qr mode), and optionally a vocabulary readout for the
//! recall task. Gradients are analytic; [`finite_diff_check`] compares them
//! with fourth-order central differences.

use std::path::Path;

use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::archive::{write_factors, Archive, ArchiveMeta};
use crate::attention::{
    factored_forward_traced, mha_forward, rope_rotate, AttentionWeights, CloverFactors, Dims, HeadTrace, QkFactors,
    QkTrace, RopeSpec,
};
use crate::error::{ArchiveError, Error, Result};
use crate::tensor::{matmul, MaskSpec, Rng, Tensor};

/// Which parameter groups receive updates.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub struct TrainableSet {
    /// `S_qk` in svd mode, `R_q` and `R_k` in qr mode.
    pub qk: bool,
    pub vo: bool,
}

impl TrainableSet {
    pub const ALL: Self = Self { qk: true, vo: true };
    pub const VO_ONLY: Self = Self { qk: false, vo: true };
}

/// Attention factors plus the trainable bookkeeping around them.
#[derive(Clone, Debug, PartialEq)]
pub struct FactoredModel {
    pub factors: CloverFactors,
    pub mask: MaskSpec,
    pub rope: RopeSpec,
    pub trainable: TrainableSet,
    /// `D×V` vocabulary readout, trained whenever present.
    pub readout: Option<Tensor>,
}

/// Gradients of the factored forward with respect to the mixing matrices.
/// Entries are `None` for groups the factors do not carry.
#[derive(Clone, Debug, PartialEq)]
pub struct FactorGrads {
    pub s_qk: Option<Vec<Tensor>>,
    pub r_q: Option<Vec<Tensor>>,
    pub r_k: Option<Vec<Tensor>>,
    pub s_vo: Vec<Tensor>,
}

/// Intermediates from [`forward_cached`], consumed by [`factored_backward`].
#[derive(Clone, Debug)]
pub struct ForwardCache {
    input_shape: Vec<usize>,
    traces: Vec<Vec<HeadTrace>>,
}

/// Factored forward that keeps what the backward pass needs.
pub fn forward_cached(
    x: &Tensor,
    f: &CloverFactors,
    mask: &MaskSpec,
    rope: &RopeSpec,
) -> Result<(Tensor, ForwardCache)> {
    let (y, traces) = factored_forward_traced(x, f, mask, rope)?;
    Ok((
        y,
        ForwardCache {
            input_shape: x.shape().to_vec(),
            traces,
        },
    ))
}

/// Analytic gradients of `⟨upstream, forward(x)⟩` with respect to the
/// mixing matrices. Frozen bases get no gradient. Triangular factors only
/// ever receive upper-triangle entries.
pub fn factored_backward(
    x: &Tensor,
    f: &CloverFactors,
    rope: &RopeSpec,
    cache: &ForwardCache,
    upstream: &Tensor,
) -> Result<FactorGrads> {
    if cache.input_shape != x.shape() || upstream.shape() != x.shape() {
        return Err(Error::shape("factored_backward", &cache.input_shape, upstream.shape()));
    }
    if cache.traces.len() != x.shape()[0] {
        return Err(Error::invalid("forward cache does not match the batch"));
    }
    let Dims { heads, .. } = f.dims;
    let scale = f.dims.logit_scale();
    let svd_mode = matches!(f.qk, QkFactors::Svd { .. });
    let zeros_like = |ranks: &[usize]| -> Vec<Tensor> { ranks.iter().map(|&r| Tensor::zeros(&[r, r])).collect() };
    let mut s_qk = zeros_like(&f.qk_ranks());
    let mut r_q = zeros_like(&f.qk_ranks());
    let mut r_k = zeros_like(&f.qk_ranks());
    let mut s_vo = zeros_like(&f.vo_ranks());

    for (item, item_traces) in cache.traces.iter().enumerate() {
        let g = upstream.index_outer(item);
        for head in 0..heads {
            let t = &item_traces[head];
            let vo = &f.vo[head];
            let d_h = matmul(&g, &vo.v.transpose())?;
            let d_z = matmul(&t.attn.transpose(), &d_h)?;
            s_vo[head] = s_vo[head].add(&matmul(&t.v_proj.transpose(), &d_z)?)?;

            let d_a = matmul(&d_h, &t.v_mixed.transpose())?;
            let d_logits = softmax_backward(&t.attn, &d_a);
            match &t.qk {
                QkTrace::Svd { left, right } => {
                    let g_s = matmul(&matmul(&left.transpose(), &d_logits)?, right)?.scale(scale);
                    s_qk[head] = s_qk[head].add(&g_s)?;
                }
                QkTrace::Qr { xq, xk, q, k } => {
                    let mut d_q = matmul(&d_logits, k)?.scale(scale);
                    let mut d_k = matmul(&d_logits.transpose(), q)?.scale(scale);
                    if rope.enabled {
                        d_q = rope_rotate(&d_q, rope.base, true)?;
                        d_k = rope_rotate(&d_k, rope.base, true)?;
                    }
                    r_q[head] = r_q[head].add(&upper_product(xq, &d_q))?;
                    r_k[head] = r_k[head].add(&upper_product(xk, &d_k))?;
                }
            }
        }
    }
    Ok(FactorGrads {
        s_qk: (svd_mode && f.trainable_s_qk.is_some()).then_some(s_qk),
        r_q: (!svd_mode).then_some(r_q),
        r_k: (!svd_mode).then_some(r_k),
        s_vo,
    })
}

/// `dL = A ⊙ (dA − rowsum(A ⊙ dA))`; masked entries have `A = 0`.
fn softmax_backward(attn: &Tensor, d_attn: &Tensor) -> Tensor {
    let n = attn.cols();
    let mut out = vec![0.0; attn.numel()];
    for i in 0..attn.rows() {
        let (a, da) = (attn.row(i), d_attn.row(i));
        let inner: f64 = a.iter().zip(da).map(|(p, g)| p * g).sum();
        for j in 0..n {
            out[i * n + j] = a[j] * (da[j] - inner);
        }
    }
    Tensor::new(attn.shape(), out).expect("same shape")
}

/// Upper triangle (diagonal included) of `aᵀ·b`; lower entries are never formed.
fn upper_product(a: &Tensor, b: &Tensor) -> Tensor {
    let (n, d) = (a.rows(), a.cols());
    let mut out = vec![0.0; d * d];
    for j in 0..d {
        for k in j..d {
            out[j * d + k] = (0..n).map(|p| a.get(p, j) * b.get(p, k)).sum();
        }
    }
    Tensor::new(&[d, d], out).expect("square")
}

/// Training targets for one batch.
#[derive(Clone, Debug, PartialEq)]
pub enum Targets {
    /// `[b, n, D]` regression targets, scored with mean squared error.
    Regression(Tensor),
    /// Class index per sequence, read out at the last position.
    Classes(Vec<usize>),
}

#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    pub x: Tensor,
    pub targets: Targets,
}

/// Loss of an attention output, its gradient, and the readout gradient.
fn loss_from_output(y: &Tensor, targets: &Targets, readout: Option<&Tensor>) -> Result<(f64, Tensor, Option<Tensor>)> {
    match targets {
        Targets::Regression(t) => {
            if t.shape() != y.shape() {
                return Err(Error::shape("regression targets", t.shape(), y.shape()));
            }
            let diff = y.sub(t)?;
            let count = diff.numel() as f64;
            let loss = diff.data().iter().map(|v| v * v).sum::<f64>() / count;
            Ok((loss, diff.scale(2.0 / count), None))
        }
        Targets::Classes(classes) => {
            let readout = readout.ok_or_else(|| Error::invalid("classification targets need a readout"))?;
            let [b, n, dm] = [y.shape()[0], y.shape()[1], y.shape()[2]];
            if classes.len() != b || readout.rows() != dm {
                return Err(Error::shape(
                    "classification",
                    &[classes.len(), dm],
                    &[b, readout.rows()],
                ));
            }
            let vocab = readout.cols();
            let mut loss = 0.0;
            let mut d_y = vec![0.0; y.numel()];
            let mut d_readout = Tensor::zeros(readout.shape());
            for (item, &class) in classes.iter().enumerate() {
                let last = Tensor::new(&[1, dm], y.index_outer(item).row(n - 1).to_vec())?;
                let logits = matmul(&last, readout)?;
                let max = logits.data().iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let exp: Vec<f64> = logits.data().iter().map(|l| (l - max).exp()).collect();
                let total: f64 = exp.iter().sum();
                loss += total.ln() + max - logits.data()[class];
                let mut d_logits: Vec<f64> = exp.iter().map(|e| e / total / b as f64).collect();
                d_logits[class] -= 1.0 / b as f64;
                let d_logits = Tensor::new(&[1, vocab], d_logits)?;
                d_readout = d_readout.add(&matmul(&last.transpose(), &d_logits)?)?;
                let d_last = matmul(&d_logits, &readout.transpose())?;
                let base = (item * n + n - 1) * dm;
                d_y[base..base + dm].copy_from_slice(d_last.data());
            }
            Ok((loss / b as f64, Tensor::new(y.shape(), d_y)?, Some(d_readout)))
        }
    }
}

/// Loss of the plain (unfactored) layer on a batch.
pub fn plain_loss(
    w: &AttentionWeights,
    batch: &Batch,
    mask: &MaskSpec,
    rope: &RopeSpec,
    readout: Option<&Tensor>,
) -> Result<f64> {
    let y = mha_forward(&batch.x, w, mask, rope)?;
    Ok(loss_from_output(&y, &batch.targets, readout)?.0)
}

/// One block of trainable coordinates inside the flat parameter vector.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Block {
    SQk(usize),
    RQ(usize),
    RK(usize),
    SVo(usize),
    Readout,
}

impl FactoredModel {
    /// Wraps factors for training, attaching `diag(s)` as the initial
    /// trainable matrices so step 0 reproduces the decomposed layer.
    pub fn new(factors: CloverFactors, mask: MaskSpec, rope: RopeSpec, trainable: TrainableSet) -> Result<Self> {
        let factors = factors.with_trainable();
        factors.validate()?;
        crate::attention::check_factored_compat(&factors, &rope)?;
        Ok(Self {
            factors,
            mask,
            rope,
            trainable,
            readout: None,
        })
    }

    pub fn with_readout(mut self, readout: Tensor) -> Self {
        self.readout = Some(readout);
        self
    }

    fn blocks(&self) -> Vec<Block> {
        let mut out = Vec::new();
        for head in 0..self.factors.dims.heads {
            if self.trainable.qk {
                match self.factors.qk {
                    QkFactors::Svd { .. } => out.push(Block::SQk(head)),
                    QkFactors::Qr { .. } => {
                        out.push(Block::RQ(head));
                        out.push(Block::RK(head));
                    }
                }
            }
            if self.trainable.vo {
                out.push(Block::SVo(head));
            }
        }
        if self.readout.is_some() {
            out.push(Block::Readout);
        }
        out
    }

    fn block_tensor(&self, b: Block) -> &Tensor {
        let f = &self.factors;
        match b {
            Block::SQk(h) => &f.trainable_s_qk.as_ref().expect("attached")[h],
            Block::SVo(h) => &f.trainable_s_vo.as_ref().expect("attached")[h],
            Block::RQ(h) | Block::RK(h) => {
                let QkFactors::Qr { heads } = &f.qk else { unreachable!() };
                if matches!(b, Block::RQ(_)) {
                    &heads[h].r_q
                } else {
                    &heads[h].r_k
                }
            }
            Block::Readout => self.readout.as_ref().expect("present"),
        }
    }

    fn block_tensor_mut(&mut self, b: Block) -> &mut Tensor {
        let f = &mut self.factors;
        match b {
            Block::SQk(h) => &mut f.trainable_s_qk.as_mut().expect("attached")[h],
            Block::SVo(h) => &mut f.trainable_s_vo.as_mut().expect("attached")[h],
            Block::RQ(h) | Block::RK(h) => {
                let QkFactors::Qr { heads } = &mut f.qk else {
                    unreachable!()
                };
                if matches!(b, Block::RQ(_)) {
                    &mut heads[h].r_q
                } else {
                    &mut heads[h].r_k
                }
            }
            Block::Readout => self.readout.as_mut().expect("present"),
        }
    }

    /// Flat indices into a block's data that are trainable.
    fn block_coords(t: &Tensor, b: Block) -> Vec<usize> {
        match b {
            Block::RQ(_) | Block::RK(_) => {
                let d = t.cols();
                (0..d).flat_map(|j| (j..d).map(move |k| j * d + k)).collect()
            }
            _ => (0..t.numel()).collect(),
        }
    }

    pub fn num_parameters(&self) -> usize {
        self.blocks()
            .into_iter()
            .map(|b| Self::block_coords(self.block_tensor(b), b).len())
            .sum()
    }

    pub fn parameters(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.num_parameters());
        for b in self.blocks() {
            let t = self.block_tensor(b);
            out.extend(Self::block_coords(t, b).into_iter().map(|i| t.data()[i]));
        }
        out
    }

    pub fn set_parameters(&mut self, params: &[f64]) -> Result<()> {
        if params.len() != self.num_parameters() {
            return Err(Error::invalid(format!(
                "expected {} parameters, got {}",
                self.num_parameters(),
                params.len()
            )));
        }
        let mut cursor = 0;
        for b in self.blocks() {
            let t = self.block_tensor(b);
            let coords = Self::block_coords(t, b);
            let mut data = t.data().to_vec();
            for i in coords {
                data[i] = params[cursor];
                cursor += 1;
            }
            let shape = t.shape().to_vec();
            *self.block_tensor_mut(b) = Tensor::new(&shape, data)?;
        }
        Ok(())
    }

    fn flatten_grads(&self, g: &FactorGrads, readout: Option<&Tensor>) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.num_parameters());
        for b in self.blocks() {
            let t = match b {
                Block::SQk(h) => &g.s_qk.as_ref().expect("svd grads")[h],
                Block::RQ(h) => &g.r_q.as_ref().expect("qr grads")[h],
                Block::RK(h) => &g.r_k.as_ref().expect("qr grads")[h],
                Block::SVo(h) => &g.s_vo[h],
                Block::Readout => readout.expect("readout grad"),
            };
            out.extend(Self::block_coords(t, b).into_iter().map(|i| t.data()[i]));
        }
        out
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        Ok(forward_cached(x, &self.factors, &self.mask, &self.rope)?.0)
    }

    pub fn loss(&self, batch: &Batch) -> Result<f64> {
        let y = self.forward(&batch.x)?;
        Ok(loss_from_output(&y, &batch.targets, self.readout.as_ref())?.0)
    }

    /// Loss and the gradient over [`FactoredModel::parameters`].
    pub fn loss_and_grad(&self, batch: &Batch) -> Result<(f64, Vec<f64>)> {
        let (y, cache) = forward_cached(&batch.x, &self.factors, &self.mask, &self.rope)?;
        let (loss, d_y, d_readout) = loss_from_output(&y, &batch.targets, self.readout.as_ref())?;
        let grads = factored_backward(&batch.x, &self.factors, &self.rope, &cache, &d_y)?;
        Ok((loss, self.flatten_grads(&grads, d_readout.as_ref())))
    }

    /// SHA-256 over every frozen tensor.
    pub fn frozen_checksum(&self) -> String {
        let mut h = Sha256::new();
        for t in self.factors.frozen_tensors() {
            h.update(t.to_le_bytes());
        }
        let trainable = self.trainable;
        // Untrained groups are frozen too.
        if !trainable.qk {
            match &self.factors.qk {
                QkFactors::Svd { .. } => {
                    for t in self.factors.trainable_s_qk.iter().flatten() {
                        h.update(t.to_le_bytes());
                    }
                }
                QkFactors::Qr { heads } => {
                    for head in heads {
                        h.update(head.r_q.to_le_bytes());
                        h.update(head.r_k.to_le_bytes());
                    }
                }
            }
        }
        if !trainable.vo {
            for t in self.factors.trainable_s_vo.iter().flatten() {
                h.update(t.to_le_bytes());
            }
        }
        h.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }
}

/// A differentiable scalar function of a flat parameter vector.
pub trait Objective {
    fn parameters(&self) -> Vec<f64>;
    fn loss_at(&self, params: &[f64]) -> Result<f64>;
    fn gradient_at(&self, params: &[f64]) -> Result<Vec<f64>>;
}

/// A model evaluated on one fixed batch.
pub struct BatchObjective<'a> {
    pub model: &'a FactoredModel,
    pub batch: &'a Batch,
}

impl BatchObjective<'_> {
    fn at(&self, params: &[f64]) -> Result<FactoredModel> {
        let mut m = self.model.clone();
        m.set_parameters(params)?;
        Ok(m)
    }
}

impl Objective for BatchObjective<'_> {
    fn parameters(&self) -> Vec<f64> {
        self.model.parameters()
    }

    fn loss_at(&self, params: &[f64]) -> Result<f64> {
        self.at(params)?.loss(self.batch)
    }

    fn gradient_at(&self, params: &[f64]) -> Result<Vec<f64>> {
        Ok(self.at(params)?.loss_and_grad(self.batch)?.1)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    /// Worst `|analytic − numeric| / max(|analytic|, |numeric|, GRAD_DENOM_FLOOR)`.
    pub max_rel_error: f64,
    pub max_abs_error: f64,
    pub coords_checked: usize,
}

/// Keeps the relative error defined where both gradients vanish.
pub const GRAD_DENOM_FLOOR: f64 = 1e-8;

/// Compares `obj`'s gradient with the fourth-order central difference
/// `(−f(x+2ε) + 8f(x+ε) − 8f(x−ε) + f(x−2ε)) / 12ε` on up to `max_coords`
/// coordinates (all of them when there are fewer), sampled with `seed`.
pub fn finite_diff_check(obj: &dyn Objective, eps: f64, max_coords: usize, seed: u64) -> Result<GradCheckReport> {
    if !(1e-7..=1e-3).contains(&eps) {
        return Err(Error::invalid(format!(
            "finite-difference step {eps} outside [1e-7, 1e-3]"
        )));
    }
    let params = obj.parameters();
    let analytic = obj.gradient_at(&params)?;
    let mut coords: Vec<usize> = (0..params.len()).collect();
    if params.len() > max_coords {
        coords = Rng::new(seed).permutation(params.len());
        coords.truncate(max_coords);
        coords.sort_unstable();
    }
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        max_abs_error: 0.0,
        coords_checked: coords.len(),
    };
    let mut probe = params.clone();
    for i in coords {
        let mut at = |step: f64| -> Result<f64> {
            probe[i] = params[i] + step;
            let v = obj.loss_at(&probe);
            probe[i] = params[i];
            v
        };
        let numeric = (-at(2.0 * eps)? + 8.0 * at(eps)? - 8.0 * at(-eps)? + at(-2.0 * eps)?) / (12.0 * eps);
        let abs = (analytic[i] - numeric).abs();
        report.max_abs_error = report.max_abs_error.max(abs);
        let denom = analytic[i].abs().max(numeric.abs()).max(GRAD_DENOM_FLOOR);
        report.max_rel_error = report.max_rel_error.max(abs / denom);
    }
    Ok(report)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub enum TaskKind {
    #[serde(rename = "recall")]
    AssociativeRecall,
    #[serde(rename = "regress")]
    SequenceRegression,
}

impl TaskKind {
    pub fn parse(text: &str) -> Result<Self> {
        match text {
            "recall" => Ok(Self::AssociativeRecall),
            "regress" => Ok(Self::SequenceRegression),
            other => Err(Error::invalid(format!("unknown task {other:?}"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub struct TaskDims {
    pub batch: usize,
    pub seq_len: usize,
    pub model: usize,
}

/// How the regression teacher's mixing matrices relate to the student's.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Teacher {
    /// Teacher equals the student at initialization.
    Identical,
    /// Every trainable matrix multiplied by a constant.
    Scaled(f64),
    /// Gaussian noise of this relative size added to every trainable matrix.
    Perturbed(f64),
}

#[derive(Clone, Debug, PartialEq)]
enum TaskData {
    Regression {
        teacher: Box<FactoredModel>,
    },
    Recall {
        pairs: usize,
        token_emb: Tensor,
        prev_emb: Tensor,
    },
}

/// Seeded toy task; every batch regenerates bit-identically from
/// `(seed, index)`.
#[derive(Clone, Debug, PartialEq)]
pub struct ToyTask {
    pub kind: TaskKind,
    pub seed: u64,
    pub dims: TaskDims,
    data: TaskData,
}

/// Builds a toy task. Regression needs the student `base` so that its
/// teacher shares the same frozen bases; recall ignores it.
pub fn make_toy_task(
    kind: TaskKind,
    seed: u64,
    dims: TaskDims,
    base: Option<&FactoredModel>,
    teacher: Teacher,
) -> Result<ToyTask> {
    if dims.batch == 0 || dims.batch > 8 || dims.seq_len == 0 || dims.seq_len > 32 || dims.model == 0 || dims.model > 32
    {
        return Err(Error::invalid(format!(
            "toy task dims {dims:?} outside b <= 8, n <= 32, D <= 32"
        )));
    }
    let mut rng = Rng::derive(seed, u64::MAX);
    let data = match kind {
        TaskKind::SequenceRegression => {
            let base = base.ok_or_else(|| Error::invalid("regression task needs student factors"))?;
            if base.factors.dims.model != dims.model {
                return Err(Error::invalid("task width differs from the model"));
            }
            let mut model = base.clone();
            model.trainable = TrainableSet::ALL;
            model.readout = None;
            let params = model.parameters();
            let rms = (params.iter().map(|p| p * p).sum::<f64>() / params.len().max(1) as f64).sqrt();
            let moved: Vec<f64> = match teacher {
                Teacher::Identical => params,
                Teacher::Scaled(c) => params.iter().map(|p| p * c).collect(),
                Teacher::Perturbed(c) => params.iter().map(|p| p + c * rms * rng.normal()).collect(),
            };
            model.set_parameters(&moved)?;
            TaskData::Regression {
                teacher: Box::new(model),
            }
        }
        TaskKind::AssociativeRecall => {
            if dims.seq_len < 3 || dims.seq_len.is_multiple_of(2) {
                return Err(Error::invalid("recall needs an odd sequence length >= 3"));
            }
            let pairs = (dims.seq_len - 1) / 2;
            TaskData::Recall {
                pairs,
                token_emb: Tensor::randn(&[2 * pairs, dims.model], 1.0, &mut rng),
                prev_emb: Tensor::randn(&[2 * pairs, dims.model], 1.0, &mut rng),
            }
        }
    };
    Ok(ToyTask { kind, seed, dims, data })
}

impl ToyTask {
    /// Number of output classes for recall (`0` for regression).
    pub fn num_classes(&self) -> usize {
        match &self.data {
            TaskData::Recall { pairs, .. } => *pairs,
            TaskData::Regression { .. } => 0,
        }
    }

    /// Small random readout for the recall task.
    pub fn initial_readout(&self) -> Option<Tensor> {
        match &self.data {
            TaskData::Recall { pairs, .. } => {
                let mut rng = Rng::derive(self.seed, u64::MAX - 1);
                Some(Tensor::randn(&[self.dims.model, *pairs], 0.1, &mut rng))
            }
            TaskData::Regression { .. } => None,
        }
    }

    pub fn batch(&self, index: u64) -> Result<Batch> {
        let TaskDims { batch, seq_len, model } = self.dims;
        match &self.data {
            TaskData::Regression { teacher } => {
                let mut rng = Rng::derive(self.seed, index);
                let x = Tensor::randn(&[batch, seq_len, model], 1.0, &mut rng);
                let y = teacher.forward(&x)?;
                Ok(Batch {
                    x,
                    targets: Targets::Regression(y),
                })
            }
            TaskData::Recall {
                pairs,
                token_emb,
                prev_emb,
            } => {
                let mut x = Vec::with_capacity(batch * seq_len * model);
                let mut classes = Vec::with_capacity(batch);
                for item in 0..batch {
                    let mut rng = Rng::derive(self.seed, index.wrapping_mul(1 << 16).wrapping_add(item as u64));
                    // keys 0..pairs, values pairs..2·pairs
                    let keys = rng.permutation(*pairs);
                    let values: Vec<usize> = (0..*pairs).map(|_| rng.below(*pairs)).collect();
                    let query = rng.below(*pairs);
                    let mut tokens = Vec::with_capacity(seq_len);
                    for (k, v) in keys.iter().zip(&values) {
                        tokens.push(*k);
                        tokens.push(pairs + v);
                    }
                    tokens.push(keys[query]);
                    classes.push(values[query]);
                    for (pos, &tok) in tokens.iter().enumerate() {
                        for c in 0..model {
                            let prev = if pos > 0 { prev_emb.get(tokens[pos - 1], c) } else { 0.0 };
                            x.push(token_emb.get(tok, c) + prev);
                        }
                    }
                }
                Ok(Batch {
                    x: Tensor::new(&[batch, seq_len, model], x)?,
                    targets: Targets::Classes(classes),
                })
            }
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum OptimizerKind {
    Sgd,
    Adam { beta1: f64, beta2: f64, eps: f64 },
}

impl OptimizerKind {
    pub const ADAM: Self = Self::Adam {
        beta1: 0.9,
        beta2: 0.999,
        eps: 1e-8,
    };

    pub fn label(&self) -> &'static str {
        match self {
            Self::Sgd => "sgd",
            Self::Adam { .. } => "adam",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TrainConfig {
    pub steps: usize,
    pub lr: f64,
    pub optimizer: OptimizerKind,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct LossRecord {
    pub step: usize,
    pub loss: f64,
    pub grad_norm: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainState {
    pub model: FactoredModel,
    pub step: usize,
    pub first_moment: Vec<f64>,
    pub second_moment: Vec<f64>,
    /// Loss before each update, plus one final entry after the last update.
    pub history: Vec<LossRecord>,
    pub frozen_checksum: String,
}

impl TrainState {
    pub fn initial_loss(&self) -> f64 {
        self.history.first().map_or(f64::NAN, |r| r.loss)
    }

    pub fn final_loss(&self) -> f64 {
        self.history.last().map_or(f64::NAN, |r| r.loss)
    }

    /// Rows `step,loss,grad_norm`.
    pub fn write_loss_csv<W: std::io::Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["step", "loss", "grad_norm"])?;
        for r in &self.history {
            w.write_record([
                r.step.to_string(),
                crate::transform::format_float(r.loss),
                crate::transform::format_float(r.grad_norm),
            ])?;
        }
        w.flush().map_err(|e| Error::Csv(e.into()))?;
        Ok(())
    }

    pub fn save_loss_csv(&self, path: &Path) -> Result<()> {
        let mut buf = Vec::new();
        self.write_loss_csv(&mut buf)?;
        crate::archive::write_atomic(path, &buf)
    }

    pub fn to_archive(&self) -> Result<Archive> {
        let mut a = Archive::new(ArchiveMeta::new("train-state"));
        write_factors(&self.model.factors, &mut a)?;
        a.meta.mask = Some(self.model.mask.label());
        a.meta.rope = Some(self.model.rope);
        let extra = &mut a.meta.extra;
        extra.insert("step".into(), self.step.to_string());
        extra.insert("trainable_qk".into(), self.model.trainable.qk.to_string());
        extra.insert("trainable_vo".into(), self.model.trainable.vo.to_string());
        extra.insert("frozen_sha256".into(), self.frozen_checksum.clone());
        if let Some(r) = &self.model.readout {
            a.insert("train.readout", r.clone())?;
        }
        let p = self.first_moment.len();
        a.insert("optim.m", Tensor::new(&[p], self.first_moment.clone())?)?;
        a.insert("optim.v", Tensor::new(&[p], self.second_moment.clone())?)?;
        let hist: Vec<f64> = self
            .history
            .iter()
            .flat_map(|r| [r.step as f64, r.loss, r.grad_norm])
            .collect();
        a.insert("history", Tensor::new(&[self.history.len(), 3], hist)?)?;
        Ok(a)
    }

    pub fn from_archive(a: &Archive) -> Result<Self> {
        if a.meta.kind != "train-state" {
            return Err(Error::invalid(format!(
                "expected a train-state archive, found {:?}",
                a.meta.kind
            )));
        }
        let factors = crate::archive::factors_from_archive(a)?;
        let field = |key: &str| -> Result<&String> {
            a.meta
                .extra
                .get(key)
                .ok_or_else(|| ArchiveError::Malformed(format!("meta.extra.{key} missing")).into())
        };
        let flag = |key: &str| -> Result<bool> {
            field(key)?
                .parse()
                .map_err(|_| ArchiveError::Malformed(format!("meta.extra.{key} not a bool")).into())
        };
        let mask = MaskSpec::parse(a.meta.mask.as_deref().unwrap_or("none"))?;
        let model = FactoredModel {
            factors,
            mask,
            rope: a.meta.rope.unwrap_or_default(),
            trainable: TrainableSet {
                qk: flag("trainable_qk")?,
                vo: flag("trainable_vo")?,
            },
            readout: a.tensors.get("train.readout").cloned(),
        };
        let hist = a.get("history")?;
        if hist.ndim() != 2 || hist.cols() != 3 {
            return Err(ArchiveError::Malformed("history must be [steps, 3]".into()).into());
        }
        let history = (0..hist.rows())
            .map(|i| LossRecord {
                step: hist.get(i, 0) as usize,
                loss: hist.get(i, 1),
                grad_norm: hist.get(i, 2),
            })
            .collect();
        Ok(Self {
            step: field("step")?
                .parse()
                .map_err(|_| ArchiveError::Malformed("meta.extra.step not an integer".into()))?,
            first_moment: a.get("optim.m")?.data().to_vec(),
            second_moment: a.get("optim.v")?.data().to_vec(),
            history,
            frozen_checksum: field("frozen_sha256")?.clone(),
            model,
        })
    }
}

/// Full-batch training on `task.batch(0)`.
///
/// Aborts if the loss stops being finite or any frozen tensor changes.
pub fn train_toy(model: FactoredModel, task: &ToyTask, cfg: &TrainConfig) -> Result<TrainState> {
    if cfg.steps == 0 {
        return Err(Error::invalid("steps must be at least 1"));
    }
    if cfg.lr.is_nan() || cfg.lr < 0.0 {
        return Err(Error::invalid("learning rate must be nonnegative"));
    }
    if task.dims.model != model.factors.dims.model {
        return Err(Error::invalid("task width differs from the model"));
    }
    let batch = task.batch(0)?;
    let checksum = model.frozen_checksum();
    let p = model.num_parameters();
    let mut state = TrainState {
        model,
        step: 0,
        first_moment: vec![0.0; p],
        second_moment: vec![0.0; p],
        history: Vec::with_capacity(cfg.steps + 1),
        frozen_checksum: checksum,
    };
    let mut params = state.model.parameters();
    for step in 0..=cfg.steps {
        let (loss, grad) = state.model.loss_and_grad(&batch)?;
        if !loss.is_finite() {
            return Err(Error::Diverged { step, loss });
        }
        let grad_norm = grad.iter().map(|g| g * g).sum::<f64>().sqrt();
        state.history.push(LossRecord { step, loss, grad_norm });
        if state.model.frozen_checksum() != state.frozen_checksum {
            return Err(Error::FrozenMutated { step });
        }
        if step == cfg.steps {
            break;
        }
        match cfg.optimizer {
            OptimizerKind::Sgd => {
                for (w, g) in params.iter_mut().zip(&grad) {
                    *w -= cfg.lr * g;
                }
            }
            OptimizerKind::Adam { beta1, beta2, eps } => {
                let t = (state.step + 1) as i32;
                let (c1, c2) = (1.0 - beta1.powi(t), 1.0 - beta2.powi(t));
                for i in 0..p {
                    let m = &mut state.first_moment[i];
                    let v = &mut state.second_moment[i];
                    *m = beta1 * *m + (1.0 - beta1) * grad[i];
                    *v = beta2 * *v + (1.0 - beta2) * grad[i] * grad[i];
                    params[i] -= cfg.lr * (*m / c1) / ((*v / c2).sqrt() + eps);
                }
            }
        }
        state.model.set_parameters(&params)?;
        state.step += 1;
    }
    Ok(state)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::attention::{random_weights, DecomposeMode, SynthOptions};
    use crate::transform::{decompose_factors, merge_back};

    fn model(
        dims: Dims,
        mode: DecomposeMode,
        rope: RopeSpec,
        mask: MaskSpec,
        seed: u64,
    ) -> (AttentionWeights, FactoredModel) {
        let w = random_weights(dims, &SynthOptions::default(), &mut Rng::new(seed)).unwrap();
        let f = decompose_factors(&w, mode).unwrap();
        (w, FactoredModel::new(f, mask, rope, TrainableSet::ALL).unwrap())
    }

    fn regression(m: &FactoredModel, seed: u64, teacher: Teacher) -> ToyTask {
        let dims = TaskDims {
            batch: 2,
            seq_len: 5,
            model: m.factors.dims.model,
        };
        make_toy_task(TaskKind::SequenceRegression, seed, dims, Some(m), teacher).unwrap()
    }

    struct Quadratic {
        a: Tensor,
        b: Vec<f64>,
    }

    impl Objective for Quadratic {
        fn parameters(&self) -> Vec<f64> {
            vec![0.3, -0.7, 1.1]
        }
        fn loss_at(&self, p: &[f64]) -> Result<f64> {
            let r: Vec<f64> = (0..3)
                .map(|i| (0..3).map(|j| self.a.get(i, j) * p[j]).sum::<f64>() - self.b[i])
                .collect();
            Ok(0.5 * r.iter().map(|v| v * v).sum::<f64>())
        }
        fn gradient_at(&self, p: &[f64]) -> Result<Vec<f64>> {
            let r: Vec<f64> = (0..3)
                .map(|i| (0..3).map(|j| self.a.get(i, j) * p[j]).sum::<f64>() - self.b[i])
                .collect();
            Ok((0..3).map(|j| (0..3).map(|i| self.a.get(i, j) * r[i]).sum()).collect())
        }
    }

    #[test]
    fn quadratic_gradcheck_is_exact() {
        let q = Quadratic {
            a: Tensor::randn(&[3, 3], 1.0, &mut Rng::new(1)),
            b: vec![0.5, -1.0, 2.0],
        };
        let r = finite_diff_check(&q, 1e-3, 200, 0).unwrap();
        assert!(r.max_rel_error <= 1e-9, "{r:?}");
        assert!(finite_diff_check(&q, 1e-1, 200, 0).is_err());
        assert!(finite_diff_check(&q, 1e-8, 200, 0).is_err());
    }

    #[test]
    fn zero_upstream_gives_zero_gradients() {
        let (_, m) = model(
            Dims::new(8, 2, 4),
            DecomposeMode::SvdBoth,
            RopeSpec::default(),
            MaskSpec::Causal,
            2,
        );
        let x = Tensor::randn(&[2, 4, 8], 1.0, &mut Rng::new(3));
        let (_, cache) = forward_cached(&x, &m.factors, &m.mask, &m.rope).unwrap();
        let g = factored_backward(&x, &m.factors, &m.rope, &cache, &Tensor::zeros(x.shape())).unwrap();
        for t in g.s_qk.unwrap().iter().chain(&g.s_vo) {
            assert!(t.data().iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn single_token_vo_gradient_closed_form() {
        // n = 1: y = x·u·S·v, so ∂⟨G, y⟩/∂S = (x·u)ᵀ·(G·vᵀ).
        let (_, m) = model(
            Dims::new(8, 1, 4),
            DecomposeMode::SvdBoth,
            RopeSpec::default(),
            MaskSpec::None,
            4,
        );
        let mut rng = Rng::new(5);
        let x = Tensor::randn(&[1, 1, 8], 1.0, &mut rng);
        let up = Tensor::randn(&[1, 1, 8], 1.0, &mut rng);
        let (_, cache) = forward_cached(&x, &m.factors, &m.mask, &m.rope).unwrap();
        let g = factored_backward(&x, &m.factors, &m.rope, &cache, &up).unwrap();
        let vo = &m.factors.vo[0];
        let xu = matmul(&x.index_outer(0), &vo.u).unwrap();
        let gv = matmul(&up.index_outer(0), &vo.v.transpose()).unwrap();
        let expect = matmul(&xu.transpose(), &gv).unwrap();
        assert!(g.s_vo[0].max_abs_diff(&expect) <= 1e-14);
        // Softmax over a single key has zero Jacobian.
        assert!(g.s_qk.unwrap()[0].max_abs() == 0.0);
    }

    #[test]
    fn gradients_match_finite_differences() {
        let cases = [
            (DecomposeMode::SvdBoth, RopeSpec::default(), MaskSpec::Causal),
            (DecomposeMode::QrQkSvdVo, RopeSpec::default(), MaskSpec::None),
            (
                DecomposeMode::QrQkSvdVo,
                RopeSpec::enabled(100.0),
                MaskSpec::SlidingWindow(3),
            ),
        ];
        for (i, (mode, rope, mask)) in cases.into_iter().enumerate() {
            let (_, m) = model(Dims::new(8, 2, 4), mode, rope, mask, 10 + i as u64);
            let task = regression(&m, 20 + i as u64, Teacher::Perturbed(0.5));
            let batch = task.batch(0).unwrap();
            let r = finite_diff_check(
                &BatchObjective {
                    model: &m,
                    batch: &batch,
                },
                1e-3,
                200,
                0,
            )
            .unwrap();
            assert!(r.max_rel_error <= 1e-6, "{mode:?} {r:?}");
            assert_eq!(r.coords_checked, m.num_parameters());
        }
    }

    #[test]
    fn recall_gradients_include_readout() {
        let dims = TaskDims {
            batch: 3,
            seq_len: 7,
            model: 8,
        };
        let task = make_toy_task(TaskKind::AssociativeRecall, 3, dims, None, Teacher::Identical).unwrap();
        let (_, m) = model(
            Dims::new(8, 2, 4),
            DecomposeMode::SvdBoth,
            RopeSpec::default(),
            MaskSpec::Causal,
            6,
        );
        let m = m.with_readout(task.initial_readout().unwrap());
        assert_eq!(m.num_parameters(), 2 * 16 + 2 * 16 + 8 * 3);
        let batch = task.batch(0).unwrap();
        let r = finite_diff_check(
            &BatchObjective {
                model: &m,
                batch: &batch,
            },
            1e-3,
            500,
            0,
        )
        .unwrap();
        assert!(r.max_rel_error <= 1e-6, "{r:?}");
    }

    #[test]
    fn triangular_structure_is_preserved() {
        let (_, m) = model(
            Dims::new(8, 2, 4),
            DecomposeMode::QrQkSvdVo,
            RopeSpec::enabled(10_000.0),
            MaskSpec::Causal,
            7,
        );
        assert_eq!(m.num_parameters(), 2 * (10 + 10 + 16));
        let task = regression(&m, 8, Teacher::Perturbed(0.3));
        let state = train_toy(
            m,
            &task,
            &TrainConfig {
                steps: 20,
                lr: 1e-2,
                optimizer: OptimizerKind::ADAM,
            },
        )
        .unwrap();
        let QkFactors::Qr { heads } = &state.model.factors.qk else {
            panic!()
        };
        for h in heads {
            for r in [&h.r_q, &h.r_k] {
                for a in 0..4 {
                    for b in 0..a {
                        assert_eq!(r.get(a, b), 0.0);
                    }
                }
            }
        }
    }

    #[test]
    fn step_zero_reproduces_plain_layer() {
        let (w, m) = model(
            Dims::new(8, 2, 4),
            DecomposeMode::SvdBoth,
            RopeSpec::default(),
            MaskSpec::Causal,
            9,
        );
        let task = regression(&m, 10, Teacher::Scaled(2.0));
        let batch = task.batch(0).unwrap();
        let plain = plain_loss(&w, &batch, &m.mask, &m.rope, None).unwrap();
        assert!((m.loss(&batch).unwrap() - plain).abs() <= 1e-10);
        assert!(plain > 0.0);
    }

    #[test]
    fn self_teacher_has_zero_loss() {
        let (_, m) = model(
            Dims::new(8, 2, 4),
            DecomposeMode::SvdBoth,
            RopeSpec::default(),
            MaskSpec::None,
            11,
        );
        let task = regression(&m, 12, Teacher::Identical);
        assert_eq!(m.loss(&task.batch(0).unwrap()).unwrap(), 0.0);
    }

    #[test]
    fn batches_regenerate_identically() {
        let dims = TaskDims {
            batch: 4,
            seq_len: 9,
            model: 16,
        };
        let a = make_toy_task(TaskKind::AssociativeRecall, 77, dims, None, Teacher::Identical).unwrap();
        let b = make_toy_task(TaskKind::AssociativeRecall, 77, dims, None, Teacher::Identical).unwrap();
        assert_eq!(a.batch(3).unwrap(), b.batch(3).unwrap());
        assert_ne!(a.batch(3).unwrap(), a.batch(4).unwrap());
        assert!(make_toy_task(
            TaskKind::AssociativeRecall,
            1,
            TaskDims { seq_len: 8, ..dims },
            None,
            Teacher::Identical
        )
        .is_err());
        assert!(make_toy_task(
            TaskKind::AssociativeRecall,
            1,
            TaskDims { batch: 9, ..dims },
            None,
            Teacher::Identical
        )
        .is_err());
    }

    #[test]
    fn zero_learning_rate_changes_nothing() {
        let (_, m) = model(
            Dims::new(8, 2, 4),
            DecomposeMode::SvdBoth,
            RopeSpec::default(),
            MaskSpec::None,
            13,
        );
        let task = regression(&m, 14, Teacher::Perturbed(0.3));
        let before = m.parameters();
        let state = train_toy(
            m,
            &task,
            &TrainConfig {
                steps: 5,
                lr: 0.0,
                optimizer: OptimizerKind::ADAM,
            },
        )
        .unwrap();
        assert_eq!(state.model.parameters(), before);
        assert!(state.history.windows(2).all(|w| w[0].loss == w[1].loss));
        assert_eq!(state.history.len(), 6);
    }

    #[test]
    fn regression_training_reduces_loss_tenfold() {
        let (_, m) = model(
            Dims::new(16, 2, 4),
            DecomposeMode::SvdBoth,
            RopeSpec::default(),
            MaskSpec::None,
            15,
        );
        let task = regression(&m, 16, Teacher::Perturbed(0.3));
        let state = train_toy(
            m,
            &task,
            &TrainConfig {
                steps: 500,
                lr: 1e-2,
                optimizer: OptimizerKind::ADAM,
            },
        )
        .unwrap();
        assert!(
            state.final_loss() <= 0.1 * state.initial_loss(),
            "{} -> {}",
            state.initial_loss(),
            state.final_loss()
        );
    }

    #[test]
    fn larger_trainable_set_fits_at_least_as_well() {
        let cfg = TrainConfig {
            steps: 500,
            lr: 1e-2,
            optimizer: OptimizerKind::ADAM,
        };
        let (_, full) = model(
            Dims::new(16, 2, 4),
            DecomposeMode::QrQkSvdVo,
            RopeSpec::enabled(10_000.0),
            MaskSpec::Causal,
            25,
        );
        let task = regression(&full, 26, Teacher::Perturbed(0.3));
        let vo_only = FactoredModel {
            trainable: TrainableSet::VO_ONLY,
            ..full.clone()
        };
        assert!(vo_only.num_parameters() < full.num_parameters());
        let small = train_toy(vo_only, &task, &cfg).unwrap();
        let large = train_toy(full, &task, &cfg).unwrap();
        assert_eq!(small.initial_loss(), large.initial_loss());
        assert!(large.final_loss() <= small.final_loss(), "{} > {}", large.final_loss(), small.final_loss());
    }

    #[test]
    fn recall_training_reduces_loss() {
        let dims = TaskDims {
            batch: 8,
            seq_len: 9,
            model: 16,
        };
        let task = make_toy_task(TaskKind::AssociativeRecall, 5, dims, None, Teacher::Identical).unwrap();
        let (_, m) = model(
            Dims::new(16, 2, 4),
            DecomposeMode::SvdBoth,
            RopeSpec::default(),
            MaskSpec::Causal,
            17,
        );
        let m = m.with_readout(task.initial_readout().unwrap());
        let state = train_toy(
            m,
            &task,
            &TrainConfig {
                steps: 200,
                lr: 1e-2,
                optimizer: OptimizerKind::ADAM,
            },
        )
        .unwrap();
        assert!(state.final_loss() < state.initial_loss());
    }

    #[test]
    fn sgd_descends() {
        let (_, m) = model(
            Dims::new(8, 2, 4),
            DecomposeMode::SvdBoth,
            RopeSpec::default(),
            MaskSpec::None,
            18,
        );
        let task = regression(&m, 19, Teacher::Perturbed(0.3));
        let state = train_toy(
            m,
            &task,
            &TrainConfig {
                steps: 50,
                lr: 0.05,
                optimizer: OptimizerKind::Sgd,
            },
        )
        .unwrap();
        assert!(state.final_loss() < state.initial_loss());
    }

    #[test]
    fn divergence_is_reported() {
        let (_, m) = model(
            Dims::new(8, 2, 4),
            DecomposeMode::SvdBoth,
            RopeSpec::default(),
            MaskSpec::None,
            20,
        );
        let task = regression(&m, 21, Teacher::Perturbed(0.3));
        let err = train_toy(
            m,
            &task,
            &TrainConfig {
                steps: 200,
                lr: 1e200,
                optimizer: OptimizerKind::Sgd,
            },
        )
        .unwrap_err();
        assert!(matches!(err, Error::Diverged { .. }), "{err}");
    }

    #[test]
    fn merge_after_training_preserves_function() {
        let (_, m) = model(
            Dims::new(8, 2, 4),
            DecomposeMode::SvdBoth,
            RopeSpec::default(),
            MaskSpec::Causal,
            22,
        );
        let task = regression(&m, 23, Teacher::Perturbed(0.3));
        let state = train_toy(
            m,
            &task,
            &TrainConfig {
                steps: 30,
                lr: 1e-2,
                optimizer: OptimizerKind::ADAM,
            },
        )
        .unwrap();
        let held_out = task.batch(1).unwrap();
        let merged = merge_back(&state.model.factors).unwrap();
        let a = state.model.forward(&held_out.x).unwrap();
        let b = mha_forward(&held_out.x, &merged, &state.model.mask, &state.model.rope).unwrap();
        assert!(a.max_abs_diff(&b) <= 1e-10);
    }

    #[test]
    fn train_state_round_trips_through_archive() {
        let dims = TaskDims {
            batch: 2,
            seq_len: 5,
            model: 8,
        };
        let task = make_toy_task(TaskKind::AssociativeRecall, 1, dims, None, Teacher::Identical).unwrap();
        let (_, m) = model(
            Dims::new(8, 2, 4),
            DecomposeMode::QrQkSvdVo,
            RopeSpec::enabled(10_000.0),
            MaskSpec::Causal,
            24,
        );
        let m = m.with_readout(task.initial_readout().unwrap());
        let state = train_toy(
            m,
            &task,
            &TrainConfig {
                steps: 3,
                lr: 1e-2,
                optimizer: OptimizerKind::ADAM,
            },
        )
        .unwrap();
        let bytes = crate::archive::encode(&state.to_archive().unwrap()).unwrap();
        let back = TrainState::from_archive(&crate::archive::decode(&bytes).unwrap()).unwrap();
        assert_eq!(back, state);
    }
}
