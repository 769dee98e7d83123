//! Candidate assembly and contrastive losses.
//!
//! A [`CandidateMatrix`] holds cosine scores of every query row against
//! `[in-batch tails | pre-batch queue | optional self column]`. Row `i`'s
//! positive is always column `i`. Cells excluded as false negatives carry
//! `valid = false` and are left out of every sum, so their gradient is
//! exactly zero.

use std::collections::VecDeque;
use std::fmt;
use std::str::FromStr;

use ndarray::Array2;
use thiserror::Error;

use crate::kg::{EntityId, KnowledgeGraph, Triple};
use crate::scalar::{dot, Scalar};

#[derive(Debug, Error, PartialEq, Eq)]
pub enum ContrastiveError {
    #[error("embedding dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("batch is inconsistent: {0}")]
    BadBatch(&'static str),
    #[error("unknown loss kind {0:?} (expected infonce, margin or margin_tau)")]
    UnknownLoss(String),
}

/// Where a candidate column comes from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Provenance {
    InBatch,
    PreBatch,
    SelfNegative,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossConfig {
    /// Additive margin subtracted from the positive score.
    pub gamma: f64,
    /// Hinge margin of the margin losses.
    pub lambda: f64,
    /// Multiplier on pre-batch scores before temperature scaling.
    pub pre_batch_weight: f64,
    /// Lower clamp on the learnable temperature.
    pub tau_floor: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            gamma: 0.02,
            lambda: 0.8,
            pre_batch_weight: 0.5,
            tau_floor: 1e-3,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default)]
pub enum LossKind {
    #[default]
    InfoNce,
    Margin,
    MarginTau,
}

impl LossKind {
    pub const ALL: [LossKind; 3] = [LossKind::InfoNce, LossKind::Margin, LossKind::MarginTau];

    pub fn as_str(self) -> &'static str {
        match self {
            LossKind::InfoNce => "infonce",
            LossKind::Margin => "margin",
            LossKind::MarginTau => "margin_tau",
        }
    }
}

impl fmt::Display for LossKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for LossKind {
    type Err = ContrastiveError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "infonce" => Ok(LossKind::InfoNce),
            "margin" => Ok(LossKind::Margin),
            "margin_tau" | "margin-tau" => Ok(LossKind::MarginTau),
            other => Err(ContrastiveError::UnknownLoss(other.to_owned())),
        }
    }
}

/// One training step's embeddings. Row `i`'s positive is `tail_embs[i]`.
#[derive(Debug, Clone)]
pub struct TrainingBatch<S> {
    pub rows: Vec<Triple>,
    pub hr_embs: Vec<Vec<S>>,
    pub tail_embs: Vec<Vec<S>>,
    /// Head texts encoded by the candidate tower; present iff self-negatives are on.
    pub self_embs: Option<Vec<Vec<S>>>,
}

impl<S: Scalar> TrainingBatch<S> {
    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    fn validate(&self) -> Result<usize, ContrastiveError> {
        let b = self.rows.len();
        if self.hr_embs.len() != b || self.tail_embs.len() != b {
            return Err(ContrastiveError::BadBatch("row/embedding count mismatch"));
        }
        if self.self_embs.as_ref().is_some_and(|s| s.len() != b) {
            return Err(ContrastiveError::BadBatch("self-embedding count mismatch"));
        }
        let dim = self.hr_embs.first().map_or(0, Vec::len);
        let all = self
            .hr_embs
            .iter()
            .chain(&self.tail_embs)
            .chain(self.self_embs.iter().flatten());
        for v in all {
            if v.len() != dim {
                return Err(ContrastiveError::DimensionMismatch {
                    expected: dim,
                    got: v.len(),
                });
            }
        }
        Ok(dim)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct QueueEntry<S> {
    pub embedding: Vec<S>,
    pub entity: EntityId,
}

/// FIFO of frozen candidate embeddings from previous batches.
#[derive(Debug, Clone, PartialEq)]
pub struct PreBatchQueue<S> {
    capacity: usize,
    entries: VecDeque<QueueEntry<S>>,
}

impl<S: Scalar> PreBatchQueue<S> {
    /// Queue holding `pre_batches` batches of `batch_size` entries.
    pub fn new(pre_batches: usize, batch_size: usize) -> Self {
        Self::with_capacity(pre_batches * batch_size)
    }

    pub fn with_capacity(capacity: usize) -> Self {
        Self {
            capacity,
            entries: VecDeque::with_capacity(capacity),
        }
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Oldest first.
    pub fn entries(&self) -> impl ExactSizeIterator<Item = &QueueEntry<S>> {
        self.entries.iter()
    }

    /// Appends copies of `embeddings`, evicting the oldest beyond capacity.
    pub fn push(&mut self, embeddings: &[Vec<S>], entities: &[EntityId]) {
        debug_assert_eq!(embeddings.len(), entities.len());
        if self.capacity == 0 {
            return;
        }
        for (e, &id) in embeddings.iter().zip(entities) {
            if self.entries.len() == self.capacity {
                self.entries.pop_front();
            }
            self.entries.push_back(QueueEntry {
                embedding: e.clone(),
                entity: id,
            });
        }
    }
}

/// Scores `B × C`, per-column provenance and validity mask.
#[derive(Debug, Clone, PartialEq)]
pub struct CandidateMatrix<S> {
    pub scores: Array2<S>,
    pub provenance: Vec<Provenance>,
    /// `false` = excluded from the loss. The diagonal of the in-batch block is
    /// the positive and is always `true`.
    pub valid: Array2<bool>,
}

impl<S: Scalar> CandidateMatrix<S> {
    pub fn rows(&self) -> usize {
        self.scores.nrows()
    }

    pub fn cols(&self) -> usize {
        self.scores.ncols()
    }

    pub fn is_negative(&self, row: usize, col: usize) -> bool {
        col != row && self.valid[[row, col]]
    }

    pub fn negative_count(&self, row: usize) -> usize {
        (0..self.cols()).filter(|&c| self.is_negative(row, c)).count()
    }

    /// Keeps only the first `max` usable negatives of each row (column order).
    pub fn limit_negatives(&mut self, max: usize) {
        for row in 0..self.rows() {
            let mut kept = 0;
            for col in 0..self.cols() {
                if self.is_negative(row, col) {
                    if kept < max {
                        kept += 1;
                    } else {
                        self.valid[[row, col]] = false;
                    }
                }
            }
        }
    }

    fn weight(&self, col: usize, cfg: &LossConfig) -> S {
        match self.provenance[col] {
            Provenance::PreBatch => S::of(cfg.pre_batch_weight),
            _ => S::one(),
        }
    }
}

/// Cosine scores `hr_embs · candidatesᵀ` for unit-norm inputs.
pub fn score_matrix<S: Scalar>(
    hr_embs: &[Vec<S>],
    candidates: &[Vec<S>],
) -> Result<Array2<S>, ContrastiveError> {
    let dim = hr_embs.first().or(candidates.first()).map_or(0, Vec::len);
    for v in hr_embs.iter().chain(candidates) {
        if v.len() != dim {
            return Err(ContrastiveError::DimensionMismatch {
                expected: dim,
                got: v.len(),
            });
        }
    }
    Ok(Array2::from_shape_fn(
        (hr_embs.len(), candidates.len()),
        |(i, j)| dot(&hr_embs[i], &candidates[j]),
    ))
}

/// Which negative sources contribute.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CandidateOptions {
    /// When off, the off-diagonal in-batch cells are masked; positives stay.
    pub in_batch: bool,
    pub self_negatives: bool,
}

impl Default for CandidateOptions {
    fn default() -> Self {
        Self {
            in_batch: true,
            self_negatives: true,
        }
    }
}

/// Builds the candidate matrix for a batch. A candidate entity `e` is masked
/// for row `(h, r, t)` when `e == t` (other than the positive itself) or
/// `(h, r, e)` is a known training triple.
pub fn assemble_candidates<S: Scalar>(
    g: &KnowledgeGraph,
    batch: &TrainingBatch<S>,
    queue: &PreBatchQueue<S>,
    opts: CandidateOptions,
) -> Result<CandidateMatrix<S>, ContrastiveError> {
    let dim = batch.validate()?;
    let b = batch.len();
    let use_sn = opts.self_negatives;
    if use_sn && batch.self_embs.is_none() {
        return Err(ContrastiveError::BadBatch(
            "self-negatives requested without self embeddings",
        ));
    }
    for e in queue.entries() {
        if e.embedding.len() != dim {
            return Err(ContrastiveError::DimensionMismatch {
                expected: dim,
                got: e.embedding.len(),
            });
        }
    }
    let q = queue.len();
    let cols = b + q + usize::from(use_sn);
    let mut provenance = vec![Provenance::InBatch; b];
    provenance.extend(std::iter::repeat_n(Provenance::PreBatch, q));
    if use_sn {
        provenance.push(Provenance::SelfNegative);
    }
    let col_entity = |col: usize, row: usize| -> EntityId {
        if col < b {
            batch.rows[col].tail
        } else if col < b + q {
            queue.entries[col - b].entity
        } else {
            batch.rows[row].head
        }
    };
    let col_embedding = |col: usize, row: usize| -> &[S] {
        if col < b {
            &batch.tail_embs[col]
        } else if col < b + q {
            &queue.entries[col - b].embedding
        } else {
            &batch.self_embs.as_ref().expect("checked above")[row]
        }
    };
    let known = g.train_index();
    let mut scores = Array2::<S>::zeros((b, cols));
    let mut valid = Array2::from_elem((b, cols), true);
    for (i, row) in batch.rows.iter().enumerate() {
        let hr = &batch.hr_embs[i];
        for col in 0..cols {
            scores[[i, col]] = dot(hr, col_embedding(col, i));
            if col == i {
                continue;
            }
            let e = col_entity(col, i);
            let masked = (col < b && !opts.in_batch)
                || e == row.tail
                || known.contains(&Triple::new(row.head, row.relation, e));
            valid[[i, col]] = !masked;
        }
    }
    Ok(CandidateMatrix {
        scores,
        provenance,
        valid,
    })
}

/// Loss value with gradients w.r.t. every score and the log inverse temperature.
#[derive(Debug, Clone, PartialEq)]
pub struct LossOutput<S> {
    pub loss: S,
    pub grad_scores: Array2<S>,
    pub grad_log_inv_tau: S,
}

/// `τ = max(exp(-log_inv_tau), tau_floor)`; second value is `d(1/τ)/d log_inv_tau`.
fn inverse_temperature<S: Scalar>(log_inv_tau: S, tau_floor: f64) -> (S, S) {
    let tau = (-log_inv_tau).exp();
    let floor = S::of(tau_floor);
    if tau < floor {
        (S::one() / floor, S::zero())
    } else {
        let inv = log_inv_tau.exp();
        (inv, inv)
    }
}

/// InfoNCE with additive margin: per row
/// `-log softmax([(φ⁺ - γ)/τ, w_j φ_j / τ ...])[0]`, averaged over rows.
pub fn infonce_loss<S: Scalar>(
    m: &CandidateMatrix<S>,
    cfg: &LossConfig,
    log_inv_tau: S,
) -> LossOutput<S> {
    let (b, c) = m.scores.dim();
    let (inv_tau, dinv) = inverse_temperature(log_inv_tau, cfg.tau_floor);
    let gamma = S::of(cfg.gamma);
    let per_row = S::one() / S::of(b.max(1) as f64);
    let mut grad = Array2::<S>::zeros((b, c));
    let mut total = S::zero();
    let mut d_inv_tau = S::zero();
    let mut cols: Vec<usize> = Vec::with_capacity(c);
    let mut pre: Vec<S> = Vec::with_capacity(c);
    for i in 0..b {
        // logit = inv_tau * pre_logit; the positive goes first.
        cols.clear();
        pre.clear();
        cols.push(i);
        pre.push(m.scores[[i, i]] - gamma);
        for j in 0..c {
            if m.is_negative(i, j) {
                cols.push(j);
                pre.push(m.weight(j, cfg) * m.scores[[i, j]]);
            }
        }
        let max = pre
            .iter()
            .map(|&a| a * inv_tau)
            .fold(S::neg_infinity(), S::max);
        let denom: S = pre.iter().map(|&a| (a * inv_tau - max).exp()).sum();
        let lse = max + denom.ln();
        total += lse - pre[0] * inv_tau;
        for (k, (&j, &a)) in cols.iter().zip(&pre).enumerate() {
            let p = (a * inv_tau - lse).exp();
            let delta = if k == 0 { p - S::one() } else { p };
            let w = if k == 0 { S::one() } else { m.weight(j, cfg) };
            grad[[i, j]] = delta * w * inv_tau * per_row;
            d_inv_tau += delta * a;
        }
    }
    LossOutput {
        loss: total * per_row,
        grad_scores: grad,
        grad_log_inv_tau: d_inv_tau * dinv * per_row,
    }
}

/// Mean hinge `max(0, λ + φ_neg - φ⁺)` over usable negatives, averaged over rows.
pub fn margin_loss<S: Scalar>(m: &CandidateMatrix<S>, cfg: &LossConfig) -> LossOutput<S> {
    let (b, c) = m.scores.dim();
    let lambda = S::of(cfg.lambda);
    let per_row = S::one() / S::of(b.max(1) as f64);
    let mut grad = Array2::<S>::zeros((b, c));
    let mut total = S::zero();
    for i in 0..b {
        let negs: Vec<usize> = (0..c).filter(|&j| m.is_negative(i, j)).collect();
        if negs.is_empty() {
            continue;
        }
        let w = per_row / S::of(negs.len() as f64);
        let pos = m.scores[[i, i]];
        let mut row = S::zero();
        for &j in &negs {
            let s = lambda + m.scores[[i, j]] - pos;
            if s > S::zero() {
                row += s;
                grad[[i, j]] += w;
                grad[[i, i]] -= w;
            }
        }
        total += row / S::of(negs.len() as f64);
    }
    LossOutput {
        loss: total * per_row,
        grad_scores: grad,
        grad_log_inv_tau: S::zero(),
    }
}

/// Per-row `softmax(hinge / τ)` over each row's usable negatives, in column
/// order.
pub fn margin_tau_weights<S: Scalar>(m: &CandidateMatrix<S>, cfg: &LossConfig, tau: S) -> Vec<Vec<S>> {
    let lambda = S::of(cfg.lambda);
    (0..m.rows())
        .map(|i| {
            let pos = m.scores[[i, i]];
            let hinge: Vec<S> = (0..m.cols())
                .filter(|&j| m.is_negative(i, j))
                .map(|j| (lambda + m.scores[[i, j]] - pos).max(S::zero()))
                .collect();
            if hinge.is_empty() {
                Vec::new()
            } else {
                self_adversarial_weights(hinge.into_iter(), tau)
            }
        })
        .collect()
}

/// Hinge terms weighted by the given per-row weights (see
/// [`margin_tau_weights`]), which are treated as constants.
pub fn weighted_hinge_loss<S: Scalar>(
    m: &CandidateMatrix<S>,
    cfg: &LossConfig,
    weights: &[Vec<S>],
) -> LossOutput<S> {
    let (b, c) = m.scores.dim();
    let lambda = S::of(cfg.lambda);
    let per_row = S::one() / S::of(b.max(1) as f64);
    let mut grad = Array2::<S>::zeros((b, c));
    let mut total = S::zero();
    for (i, row_w) in weights.iter().enumerate().take(b) {
        let pos = m.scores[[i, i]];
        let negs = (0..c).filter(|&j| m.is_negative(i, j));
        for (j, &w) in negs.zip(row_w) {
            let s = (lambda + m.scores[[i, j]] - pos).max(S::zero());
            total += w * s;
            if s > S::zero() {
                grad[[i, j]] += w * per_row;
                grad[[i, i]] -= w * per_row;
            }
        }
    }
    LossOutput {
        loss: total * per_row,
        grad_scores: grad,
        grad_log_inv_tau: S::zero(),
    }
}

/// Hinge terms weighted by `softmax(s / τ)`; the weights are held constant
/// when differentiating.
pub fn margin_tau_loss<S: Scalar>(
    m: &CandidateMatrix<S>,
    cfg: &LossConfig,
    tau: S,
) -> LossOutput<S> {
    weighted_hinge_loss(m, cfg, &margin_tau_weights(m, cfg, tau))
}

/// `softmax(s / τ)`.
pub fn self_adversarial_weights<S: Scalar>(s: impl Iterator<Item = S> + Clone, tau: S) -> Vec<S> {
    let max = s.clone().fold(S::neg_infinity(), S::max);
    let exps: Vec<S> = s.map(|x| ((x - max) / tau).exp()).collect();
    let z: S = exps.iter().copied().sum();
    exps.into_iter().map(|e| e / z).collect()
}

/// Dispatches on `kind`. `margin_tau` is the fixed temperature of the
/// margin-τ loss; InfoNCE uses the learnable `log_inv_tau`.
pub fn compute_loss<S: Scalar>(
    kind: LossKind,
    m: &CandidateMatrix<S>,
    cfg: &LossConfig,
    log_inv_tau: S,
    margin_tau: S,
) -> LossOutput<S> {
    match kind {
        LossKind::InfoNce => infonce_loss(m, cfg, log_inv_tau),
        LossKind::Margin => margin_loss(m, cfg),
        LossKind::MarginTau => margin_tau_loss(m, cfg, margin_tau),
    }
}

/// Gradients of the loss w.r.t. the batch embeddings. Pre-batch columns are
/// frozen and receive nothing.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingGrads<S> {
    pub hr: Vec<Vec<S>>,
    pub tail: Vec<Vec<S>>,
    pub self_: Option<Vec<Vec<S>>>,
}

pub fn backprop_scores<S: Scalar>(
    m: &CandidateMatrix<S>,
    grad_scores: &Array2<S>,
    batch: &TrainingBatch<S>,
    queue: &PreBatchQueue<S>,
) -> EmbeddingGrads<S> {
    let b = batch.len();
    let dim = batch.hr_embs.first().map_or(0, Vec::len);
    let mut hr = vec![vec![S::zero(); dim]; b];
    let mut tail = vec![vec![S::zero(); dim]; b];
    let mut self_ = batch.self_embs.as_ref().map(|_| vec![vec![S::zero(); dim]; b]);
    let axpy = |dst: &mut [S], a: S, x: &[S]| {
        for (d, &v) in dst.iter_mut().zip(x) {
            *d += a * v;
        }
    };
    for i in 0..b {
        for (j, prov) in m.provenance.iter().enumerate() {
            let gij = grad_scores[[i, j]];
            if gij == S::zero() {
                continue;
            }
            match prov {
                Provenance::InBatch => {
                    axpy(&mut hr[i], gij, &batch.tail_embs[j]);
                    axpy(&mut tail[j], gij, &batch.hr_embs[i]);
                }
                Provenance::PreBatch => {
                    axpy(&mut hr[i], gij, &queue.entries[j - b].embedding);
                }
                Provenance::SelfNegative => {
                    let selfs = batch.self_embs.as_ref().expect("self column needs embeddings");
                    axpy(&mut hr[i], gij, &selfs[i]);
                    if let Some(s) = self_.as_mut() {
                        axpy(&mut s[i], gij, &batch.hr_embs[i]);
                    }
                }
            }
        }
    }
    EmbeddingGrads { hr, tail, self_ }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kg::{GraphBuilder, Split};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn unit(v: Vec<f64>) -> Vec<f64> {
        let n = dot(&v, &v).sqrt();
        v.into_iter().map(|x| x / n).collect()
    }

    fn random_unit(rng: &mut ChaCha8Rng, d: usize) -> Vec<f64> {
        unit((0..d).map(|_| rng.gen_range(-1.0..1.0)).collect())
    }

    /// Matrix with explicit scores; all cells valid unless listed in `masked`.
    fn matrix(scores: Vec<Vec<f64>>, prov: Vec<Provenance>, masked: &[(usize, usize)]) -> CandidateMatrix<f64> {
        let b = scores.len();
        let c = scores[0].len();
        let flat: Vec<f64> = scores.into_iter().flatten().collect();
        let mut valid = Array2::from_elem((b, c), true);
        for &(i, j) in masked {
            valid[[i, j]] = false;
        }
        CandidateMatrix {
            scores: Array2::from_shape_vec((b, c), flat).unwrap(),
            provenance: prov,
            valid,
        }
    }

    fn ib(n: usize) -> Vec<Provenance> {
        vec![Provenance::InBatch; n]
    }

    fn cfg0() -> LossConfig {
        LossConfig {
            gamma: 0.0,
            pre_batch_weight: 1.0,
            ..LossConfig::default()
        }
    }

    #[test]
    fn score_matrix_examples() {
        let a = unit(vec![1.0, 2.0, 3.0]);
        let s = score_matrix(std::slice::from_ref(&a), std::slice::from_ref(&a)).unwrap();
        assert!((s[[0, 0]] - 1.0).abs() < 1e-15);
        let s = score_matrix(&[vec![1.0, 0.0]], &[vec![0.0, 1.0], vec![-1.0, 0.0]]).unwrap();
        assert_eq!(s[[0, 0]], 0.0);
        assert_eq!(s[[0, 1]], -1.0);
        assert!(score_matrix(&[vec![1.0, 0.0]], &[vec![1.0]]).is_err());
    }

    fn graph(n: usize, train: &[(usize, usize)]) -> KnowledgeGraph {
        let mut b = GraphBuilder::new();
        for i in 0..n {
            b.entity(format!("e{i}"), format!("E{i}"), "").unwrap();
        }
        b.relation("r", "r", "").unwrap();
        for &(h, t) in train {
            b.triple(Split::Train, format!("e{h}"), "r", format!("e{t}"));
        }
        b.build().unwrap()
    }

    fn batch_for(g: &KnowledgeGraph, rows: &[(usize, usize)], d: usize, sn: bool, seed: u64) -> TrainingBatch<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let rows: Vec<Triple> = rows
            .iter()
            .map(|&(h, t)| g.resolve(&format!("e{h}"), "r", &format!("e{t}")).unwrap())
            .collect();
        let b = rows.len();
        TrainingBatch {
            rows,
            hr_embs: (0..b).map(|_| random_unit(&mut rng, d)).collect(),
            tail_embs: (0..b).map(|_| random_unit(&mut rng, d)).collect(),
            self_embs: sn.then(|| (0..b).map(|_| random_unit(&mut rng, d)).collect()),
        }
    }

    #[test]
    fn shared_positive_is_masked_in_other_row() {
        let g = graph(6, &[(0, 5), (1, 5), (2, 3)]);
        let batch = batch_for(&g, &[(0, 5), (1, 5), (2, 3)], 4, false, 1);
        let m = assemble_candidates(&g, &batch, &PreBatchQueue::with_capacity(0), CandidateOptions { in_batch: true, self_negatives: false }).unwrap();
        assert!(!m.valid[[0, 1]]);
        assert!(!m.valid[[1, 0]]);
        assert!(m.valid[[0, 2]]);
        assert_eq!(m.negative_count(0), 1);
        assert_eq!(m.negative_count(2), 2);
    }

    #[test]
    fn self_column_masked_for_reflexive_fact() {
        let g = graph(4, &[(0, 1), (0, 0), (2, 3)]);
        let batch = batch_for(&g, &[(0, 1), (2, 3)], 4, true, 2);
        let m = assemble_candidates(&g, &batch, &PreBatchQueue::with_capacity(0), CandidateOptions::default()).unwrap();
        assert_eq!(m.cols(), 3);
        assert_eq!(m.provenance[2], Provenance::SelfNegative);
        assert!(!m.valid[[0, 2]]);
        assert!(m.valid[[1, 2]]);
        // self column score is dot(hr_i, self_i)
        let s = batch.self_embs.as_ref().unwrap();
        assert!((m.scores[[1, 2]] - dot(&batch.hr_embs[1], &s[1])).abs() < 1e-15);
    }

    #[test]
    fn pre_batch_known_tail_is_masked() {
        let g = graph(6, &[(0, 1), (0, 4), (2, 3)]);
        let batch = batch_for(&g, &[(0, 1), (2, 3)], 4, false, 3);
        let mut q = PreBatchQueue::new(1, 2);
        let e4 = g.entity_id("e4").unwrap();
        let e5 = g.entity_id("e5").unwrap();
        q.push(&[unit(vec![1.0, 0.0, 0.0, 1.0]), unit(vec![0.0, 1.0, 1.0, 0.0])], &[e4, e5]);
        let m = assemble_candidates(&g, &batch, &q, CandidateOptions { in_batch: true, self_negatives: false }).unwrap();
        assert_eq!(m.provenance, vec![Provenance::InBatch, Provenance::InBatch, Provenance::PreBatch, Provenance::PreBatch]);
        assert!(!m.valid[[0, 2]]);
        assert!(m.valid[[0, 3]]);
        assert!(m.valid[[1, 2]]);
    }

    #[test]
    fn count_law_small() {
        for b in [4usize, 16] {
            for p in 0..3usize {
                let n = b * (p + 2);
                let g = graph(n, &[]);
                let rows: Vec<(usize, usize)> = (0..b).map(|i| (i, b + i)).collect();
                // rows are not training facts here; the law only needs distinct entities
                let batch = batch_for(&g, &rows, 4, true, 4);
                let mut q = PreBatchQueue::new(p, b);
                for k in 0..p {
                    let ids: Vec<EntityId> = (0..b).map(|i| EntityId((2 * b + k * b + i) as u32)).collect();
                    q.push(&batch.tail_embs, &ids);
                }
                let m = assemble_candidates(&g, &batch, &q, CandidateOptions::default()).unwrap();
                for i in 0..b {
                    assert_eq!(m.negative_count(i), (p + 1) * b);
                }
            }
        }
    }

    #[test]
    fn infonce_examples() {
        let m = matrix(vec![vec![1.0, 0.0]], ib(2), &[]);
        let out = infonce_loss(&m, &cfg0(), (1.0f64 / 0.05).ln());
        let expect = (1.0 + (-20.0f64).exp()).ln();
        assert!((out.loss - expect).abs() < 1e-15);
        assert!((expect - 2.061e-9).abs() < 1e-12);
        for tau in [0.05, 0.5, 2.0] {
            let m = matrix(vec![vec![0.3, 0.3]], ib(2), &[]);
            let out = infonce_loss(&m, &cfg0(), (1.0f64 / tau).ln());
            assert!((out.loss - 2.0f64.ln()).abs() < 1e-12);
        }
    }

    #[test]
    fn fully_masked_row_contributes_zero() {
        let m = matrix(vec![vec![0.2, 0.9], vec![0.1, 0.4]], ib(2), &[(0, 1)]);
        let out = infonce_loss(&m, &cfg0(), 3.0);
        let alone = matrix(vec![vec![0.4, 0.1]], ib(2), &[]);
        let row1 = infonce_loss(&alone, &cfg0(), 3.0).loss;
        assert!((out.loss - row1 / 2.0).abs() < 1e-12);
        assert_eq!(out.grad_scores[[0, 0]], 0.0);
        assert_eq!(out.grad_scores[[0, 1]], 0.0);
    }

    fn random_matrix(rng: &mut ChaCha8Rng, b: usize, c: usize) -> CandidateMatrix<f64> {
        let mut prov = ib(b);
        let pb = c - b - 1;
        prov.extend(std::iter::repeat_n(Provenance::PreBatch, pb));
        prov.push(Provenance::SelfNegative);
        let scores: Vec<Vec<f64>> = (0..b).map(|_| (0..c).map(|_| rng.gen_range(-1.0..1.0)).collect()).collect();
        let mut masked = Vec::new();
        for i in 0..b {
            for j in 0..c {
                if j != i && rng.gen_bool(0.15) {
                    masked.push((i, j));
                }
            }
        }
        matrix(scores, prov, &masked)
    }

    fn fd_check(loss: impl Fn(&CandidateMatrix<f64>, f64) -> f64, out: &LossOutput<f64>, m: &CandidateMatrix<f64>, theta: f64, check_theta: bool) {
        let h = 1e-4;
        for ((i, j), &g) in out.grad_scores.indexed_iter() {
            let mut p = m.clone();
            p.scores[[i, j]] += h;
            let mut q = m.clone();
            q.scores[[i, j]] -= h;
            let fd = (loss(&p, theta) - loss(&q, theta)) / (2.0 * h);
            // relative tolerance plus a floor for differencing round-off
            let denom = g.abs().max(fd.abs());
            assert!((g - fd).abs() <= 1e-4 * denom + 1e-10, "cell ({i},{j}): {g} vs {fd}");
        }
        if check_theta {
            let fd = (loss(m, theta + h) - loss(m, theta - h)) / (2.0 * h);
            let g = out.grad_log_inv_tau;
            assert!((g - fd).abs() / g.abs().max(fd.abs()).max(1e-7) <= 1e-4, "theta: {g} vs {fd}");
        }
    }

    #[test]
    fn infonce_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let cfg = LossConfig::default();
        for _ in 0..50 {
            let m = random_matrix(&mut rng, 4, 9);
            let theta = rng.gen_range(0.0..3.5);
            let out = infonce_loss(&m, &cfg, theta);
            fd_check(|m, t| infonce_loss(m, &cfg, t).loss, &out, &m, theta, true);
            for i in 0..4 {
                for j in 0..9 {
                    if !m.valid[[i, j]] {
                        assert_eq!(out.grad_scores[[i, j]], 0.0);
                    }
                }
            }
        }
    }

    #[test]
    fn clamped_temperature_has_no_gradient() {
        let m = matrix(vec![vec![0.5, 0.2]], ib(2), &[]);
        let cfg = LossConfig { tau_floor: 0.1, ..LossConfig::default() };
        let out = infonce_loss(&m, &cfg, 10.0);
        assert_eq!(out.grad_log_inv_tau, 0.0);
        let at_floor = infonce_loss(&m, &cfg, (10.0f64).ln());
        assert!((out.loss - at_floor.loss).abs() < 1e-12);
    }

    #[test]
    fn infonce_matches_textbook_cross_entropy() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        for _ in 0..100 {
            let scores: Vec<Vec<f64>> = (0..4).map(|_| (0..4).map(|_| rng.gen_range(-1.0..1.0)).collect()).collect();
            let tau: f64 = rng.gen_range(0.02..1.0);
            let mut expect = 0.0;
            for (i, row) in scores.iter().enumerate() {
                let z: f64 = row.iter().map(|s| (s / tau).exp()).sum();
                expect -= ((scores[i][i] / tau).exp() / z).ln();
            }
            expect /= 4.0;
            let m = matrix(scores, ib(4), &[]);
            let cfg = LossConfig { tau_floor: 1e-6, ..cfg0() };
            let got = infonce_loss(&m, &cfg, (1.0 / tau).ln()).loss;
            assert!((got - expect).abs() < 1e-10, "{got} vs {expect}");
        }
    }

    #[test]
    fn margin_examples() {
        let cfg = LossConfig::default();
        assert_eq!(margin_loss(&matrix(vec![vec![1.0, 0.0]], ib(2), &[]), &cfg).loss, 0.0);
        assert!((margin_loss(&matrix(vec![vec![0.0, 0.0]], ib(2), &[]), &cfg).loss - 0.8).abs() < 1e-15);
        let m = matrix(vec![vec![0.5, 0.4, -0.2]], ib(3), &[]);
        let out = margin_loss(&m, &cfg);
        assert!((out.loss - 0.4).abs() < 1e-12);
        assert_eq!(out.grad_scores[[0, 1]], 0.5);
        assert_eq!(out.grad_scores[[0, 2]], 0.5);
        assert_eq!(out.grad_scores[[0, 0]], -1.0);
        // hinge exactly at zero: no subgradient
        let m = matrix(vec![vec![0.8, 0.0]], ib(2), &[]);
        let out = margin_loss(&m, &cfg);
        assert_eq!(out.loss, 0.0);
        assert_eq!(out.grad_scores[[0, 1]], 0.0);
    }

    #[test]
    fn margin_tau_examples() {
        let cfg = LossConfig::default();
        // equal violations reduce to the plain margin loss
        let m = matrix(vec![vec![0.1, 0.3, 0.3, 0.3]], ib(4), &[]);
        let a = margin_tau_loss(&m, &cfg, 0.05).loss;
        let b = margin_loss(&m, &cfg).loss;
        assert!((a - b).abs() < 1e-12);
        // s = {1.0, 0.0}: near-zero τ puts all weight on the violation
        let m = matrix(vec![vec![0.0, 0.2, -0.9]], ib(3), &[]);
        assert!((margin_tau_loss(&m, &cfg, 1e-4).loss - 1.0).abs() < 1e-12);
        // s = {0.7, 0.1} at τ = 0.05
        let m = matrix(vec![vec![0.5, 0.4, -0.2]], ib(3), &[]);
        let w1 = 1.0 / (1.0 + (-12.0f64).exp());
        let expect = 0.7 * w1 + 0.1 * (1.0 - w1);
        let got = margin_tau_loss(&m, &cfg, 0.05).loss;
        assert!((got - expect).abs() < 1e-12);
        assert!((got - 0.699996).abs() < 1e-6);
    }

    #[test]
    fn margin_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let cfg = LossConfig::default();
        for _ in 0..50 {
            let m = random_matrix(&mut rng, 4, 9);
            let out = margin_loss(&m, &cfg);
            fd_check(|m, _| margin_loss(m, &cfg).loss, &out, &m, 0.0, false);
        }
    }

    /// Margin-τ surrogate with weights frozen at the base point.
    fn frozen_margin_tau(m: &CandidateMatrix<f64>, base: &CandidateMatrix<f64>, cfg: &LossConfig, tau: f64) -> f64 {
        let (b, c) = m.scores.dim();
        let mut total = 0.0;
        for i in 0..b {
            let negs: Vec<usize> = (0..c).filter(|&j| base.is_negative(i, j)).collect();
            if negs.is_empty() {
                continue;
            }
            let s0: Vec<f64> = negs.iter().map(|&j| (cfg.lambda + base.scores[[i, j]] - base.scores[[i, i]]).max(0.0)).collect();
            let w = self_adversarial_weights(s0.iter().copied(), tau);
            for (k, &j) in negs.iter().enumerate() {
                total += w[k] * (cfg.lambda + m.scores[[i, j]] - m.scores[[i, i]]).max(0.0);
            }
        }
        total / b as f64
    }

    #[test]
    fn margin_tau_gradients_match_frozen_weight_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let cfg = LossConfig::default();
        for _ in 0..50 {
            let m = random_matrix(&mut rng, 4, 9);
            let out = margin_tau_loss(&m, &cfg, 0.05);
            assert!((frozen_margin_tau(&m, &m, &cfg, 0.05) - out.loss).abs() < 1e-12);
            fd_check(|p, _| frozen_margin_tau(p, &m, &cfg, 0.05), &out, &m, 0.0, false);
        }
    }

    #[test]
    fn queue_is_fifo_with_capacity() {
        let mut q = PreBatchQueue::<f64>::new(2, 4);
        let embs: Vec<Vec<f64>> = (0..4).map(|i| vec![i as f64]).collect();
        let ids = |k: u32| -> Vec<EntityId> { (0..4).map(|i| EntityId(k * 10 + i)).collect() };
        q.push(&embs, &ids(0));
        assert_eq!(q.len(), 4);
        q.push(&embs, &ids(1));
        q.push(&embs, &ids(2));
        assert_eq!(q.len(), 8);
        let first: Vec<u32> = q.entries().map(|e| e.entity.0).collect();
        assert_eq!(first, vec![10, 11, 12, 13, 20, 21, 22, 23]);
        let mut zero = PreBatchQueue::<f64>::new(0, 4);
        zero.push(&embs, &ids(0));
        assert!(zero.is_empty());
    }

    #[test]
    fn limit_negatives_keeps_first_usable_columns() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut m = random_matrix(&mut rng, 4, 12);
        m.limit_negatives(3);
        for i in 0..4 {
            assert!(m.negative_count(i) <= 3);
            assert!(m.valid[[i, i]]);
        }
    }

    #[test]
    fn backprop_matches_score_definition() {
        let g = graph(8, &[]);
        let batch = batch_for(&g, &[(0, 4), (1, 5), (2, 6)], 5, true, 10);
        let mut q = PreBatchQueue::new(1, 3);
        q.push(&batch.tail_embs, &[EntityId(7), EntityId(3), EntityId(6)]);
        let m = assemble_candidates(&g, &batch, &q, CandidateOptions::default()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let grad = Array2::from_shape_fn(m.scores.dim(), |_| rng.gen_range(-1.0..1.0));
        let eg = backprop_scores(&m, &grad, &batch, &q);
        // Linear functional L = Σ G_ij S_ij; check d/d hr_0[k] directly.
        let f = |b: &TrainingBatch<f64>| {
            let m2 = assemble_candidates(&g, b, &q, CandidateOptions::default()).unwrap();
            (&m2.scores * &grad).sum()
        };
        let h = 1e-6;
        for k in 0..5 {
            let mut p = batch.clone();
            p.hr_embs[0][k] += h;
            let mut n = batch.clone();
            n.hr_embs[0][k] -= h;
            assert!(((f(&p) - f(&n)) / (2.0 * h) - eg.hr[0][k]).abs() < 1e-8);
            let mut p = batch.clone();
            p.tail_embs[1][k] += h;
            let mut n = batch.clone();
            n.tail_embs[1][k] -= h;
            assert!(((f(&p) - f(&n)) / (2.0 * h) - eg.tail[1][k]).abs() < 1e-8);
            let mut p = batch.clone();
            p.self_embs.as_mut().unwrap()[2][k] += h;
            let mut n = batch.clone();
            n.self_embs.as_mut().unwrap()[2][k] -= h;
            assert!(((f(&p) - f(&n)) / (2.0 * h) - eg.self_.as_ref().unwrap()[2][k]).abs() < 1e-8);
        }
    }

    fn permute_pb(m: &CandidateMatrix<f64>, perm: &[usize], b: usize) -> CandidateMatrix<f64> {
        let mut out = m.clone();
        for (dst, &src) in perm.iter().enumerate() {
            for i in 0..m.rows() {
                out.scores[[i, b + dst]] = m.scores[[i, b + src]];
                out.valid[[i, b + dst]] = m.valid[[i, b + src]];
            }
        }
        out
    }

    proptest! {
        #[test]
        fn losses_invariant_to_negative_permutation(seed in any::<u64>(), shift in 1usize..4) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let m = random_matrix(&mut rng, 3, 8);
            let perm: Vec<usize> = (0..4).map(|k| (k + shift) % 4).collect();
            let p = permute_pb(&m, &perm, 3);
            let cfg = LossConfig::default();
            for kind in LossKind::ALL {
                let a = compute_loss(kind, &m, &cfg, 2.5, 0.05).loss;
                let b = compute_loss(kind, &p, &cfg, 2.5, 0.05).loss;
                prop_assert!((a - b).abs() < 1e-12);
            }
        }

        #[test]
        fn masked_cells_get_zero_gradient_and_signs_hold(seed in any::<u64>()) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let m = random_matrix(&mut rng, 4, 9);
            let cfg = LossConfig::default();
            for kind in LossKind::ALL {
                let out = compute_loss(kind, &m, &cfg, 3.0, 0.05);
                for ((i, j), &g) in out.grad_scores.indexed_iter() {
                    if !m.valid[[i, j]] {
                        prop_assert_eq!(g, 0.0);
                    }
                }
            }
            let out = infonce_loss(&m, &cfg, 3.0);
            for i in 0..4 {
                prop_assert!(out.grad_scores[[i, i]] < 0.0);
                for j in 0..9 {
                    if m.is_negative(i, j) {
                        prop_assert!(out.grad_scores[[i, j]] >= 0.0);
                    }
                }
            }
        }

        #[test]
        fn margin_tau_between_mean_and_max(s in prop::collection::vec(-1.0f64..1.0, 1..10), pos in -1.0f64..1.0) {
            let mut row = vec![pos];
            row.extend(&s);
            let c = row.len();
            let m = matrix(vec![row], ib(c), &[]);
            let cfg = LossConfig::default();
            let hinge: Vec<f64> = s.iter().map(|x| (cfg.lambda + x - pos).max(0.0)).collect();
            let mean = hinge.iter().sum::<f64>() / hinge.len() as f64;
            let max = hinge.iter().copied().fold(0.0, f64::max);
            let got = margin_tau_loss(&m, &cfg, 0.05).loss;
            prop_assert!(got <= max + 1e-12);
            prop_assert!(got >= mean - 1e-12);
        }
    }
}
