//! Training loop: batches of `(h, r, t)` rows are encoded by both towers,
//! scored against in-batch / pre-batch / self candidates, and the chosen
//! loss is back-propagated through the encoders into an AdamW update with
//! global-norm clipping and a linear warmup/decay schedule.

use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rayon::prelude::*;
use thiserror::Error;

use crate::checkpoint::CheckpointError;
use crate::contrastive::{
    assemble_candidates, backprop_scores, compute_loss, CandidateOptions, ContrastiveError,
    CandidateMatrix, LossConfig, LossKind, LossOutput, PreBatchQueue, TrainingBatch,
};
use crate::encoder::{
    backward_into, encode_hr, encode_tail, tokenize, EncoderConfig, EncoderError, EncoderParams,
    ForwardRecord, GradientBuffer, Tower, DEFAULT_INIT_TEMPERATURE,
};
use crate::kg::{KgError, KnowledgeGraph, Split, Triple};
use crate::scalar::Scalar;
use crate::seed::SeedStreams;

const BETA1: f64 = 0.9;
const BETA2: f64 = 0.999;
const EPSILON: f64 = 1e-8;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid training config: {0}")]
    InvalidConfig(String),
    #[error("graph must be inverse-augmented before training")]
    NotAugmented,
    #[error("non-finite loss at step {step}")]
    NonFiniteLoss { step: usize },
    #[error("non-finite gradient in {name}")]
    NonFiniteGradient { name: String },
    #[error("non-finite parameter after update in {name}")]
    NonFiniteUpdate { name: String },
    #[error("gradient shape does not match parameters: {0}")]
    ShapeMismatch(String),
    #[error(transparent)]
    Graph(#[from] KgError),
    #[error(transparent)]
    Encoder(#[from] EncoderError),
    #[error(transparent)]
    Contrastive(#[from] ContrastiveError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
}

impl TrainError {
    /// Numeric failures (as opposed to configuration or data problems).
    pub fn is_numeric(&self) -> bool {
        matches!(
            self,
            TrainError::NonFiniteLoss { .. }
                | TrainError::NonFiniteGradient { .. }
                | TrainError::NonFiniteUpdate { .. }
        )
    }
}

/// Enabled negative sources.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NegativeSet {
    pub in_batch: bool,
    pub pre_batch: bool,
    pub self_negative: bool,
}

impl NegativeSet {
    pub const ALL: NegativeSet = NegativeSet {
        in_batch: true,
        pre_batch: true,
        self_negative: true,
    };
    pub const IN_BATCH: NegativeSet = NegativeSet {
        in_batch: true,
        pre_batch: false,
        self_negative: false,
    };
}

impl Default for NegativeSet {
    fn default() -> Self {
        Self::ALL
    }
}

impl fmt::Display for NegativeSet {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let parts: Vec<&str> = [
            (self.in_batch, "ib"),
            (self.pre_batch, "pb"),
            (self.self_negative, "sn"),
        ]
        .iter()
        .filter(|(on, _)| *on)
        .map(|(_, n)| *n)
        .collect();
        f.write_str(&parts.join(","))
    }
}

impl FromStr for NegativeSet {
    type Err = String;

    /// Comma-separated subset of `ib`, `pb`, `sn`. Pre-batch negatives need
    /// in-batch negatives.
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let mut set = NegativeSet {
            in_batch: false,
            pre_batch: false,
            self_negative: false,
        };
        for part in s.split(',').map(str::trim).filter(|p| !p.is_empty()) {
            match part.to_ascii_lowercase().as_str() {
                "ib" => set.in_batch = true,
                "pb" => set.pre_batch = true,
                "sn" => set.self_negative = true,
                other => return Err(format!("unknown negative type {other:?} (expected ib, pb, sn)")),
            }
        }
        if !(set.in_batch || set.pre_batch || set.self_negative) {
            return Err("at least one negative type is required".into());
        }
        if set.pre_batch && !set.in_batch {
            return Err("pre-batch negatives (pb) require in-batch negatives (ib)".into());
        }
        Ok(set)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub epochs: usize,
    pub peak_lr: f64,
    pub warmup_steps: usize,
    pub grad_clip: f64,
    pub weight_decay: f64,
    pub dropout: f64,
    pub loss_kind: LossKind,
    pub loss: LossConfig,
    /// Fixed temperature of the margin-τ loss.
    pub margin_tau_temperature: f64,
    pub init_temperature: f64,
    pub negatives: NegativeSet,
    pub pre_batches: usize,
    /// Caps usable negatives per row by masking the rest.
    pub max_negatives: Option<usize>,
    pub encoder: EncoderConfig,
    pub seed: u64,
    pub threads: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 256,
            epochs: 10,
            peak_lr: 1e-2,
            warmup_steps: 400,
            grad_clip: 10.0,
            weight_decay: 1e-4,
            dropout: 0.1,
            loss_kind: LossKind::InfoNce,
            loss: LossConfig::default(),
            margin_tau_temperature: 0.05,
            init_temperature: DEFAULT_INIT_TEMPERATURE,
            negatives: NegativeSet::ALL,
            pre_batches: 2,
            max_negatives: None,
            encoder: EncoderConfig::default(),
            seed: 42,
            threads: 1,
        }
    }
}

impl TrainConfig {
    #[allow(clippy::neg_cmp_op_on_partial_ord)]
    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: &str| Err(TrainError::InvalidConfig(m.to_owned()));
        if self.batch_size < 2 && self.negatives.in_batch {
            return bad("batch size must be at least 2 with in-batch negatives");
        }
        if self.batch_size == 0 {
            return bad("batch size must be positive");
        }
        if self.negatives.pre_batch && !self.negatives.in_batch {
            return bad("pre-batch negatives require in-batch negatives");
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad("dropout must be in [0, 1)");
        }
        if !(self.peak_lr >= 0.0 && self.peak_lr.is_finite()) {
            return bad("learning rate must be finite and non-negative");
        }
        if !(self.grad_clip > 0.0) {
            return bad("gradient clip must be positive");
        }
        if self.weight_decay < 0.0 {
            return bad("weight decay must be non-negative");
        }
        if self.loss.gamma < 0.0 {
            return bad("additive margin must be non-negative");
        }
        if !(self.loss.lambda > 0.0) {
            return bad("margin-loss margin must be positive");
        }
        if !(self.loss.pre_batch_weight > 0.0 && self.loss.pre_batch_weight <= 1.0) {
            return bad("pre-batch weight must be in (0, 1]");
        }
        if !(self.loss.tau_floor > 0.0) || !(self.init_temperature > 0.0) {
            return bad("temperatures must be positive");
        }
        if !(self.margin_tau_temperature > 0.0) {
            return bad("margin-tau temperature must be positive");
        }
        if self.encoder.buckets < 2 || self.encoder.dim == 0 || self.encoder.max_tokens == 0 {
            return bad("encoder needs >= 2 buckets, dim >= 1 and max_tokens >= 1");
        }
        if self.max_negatives == Some(0) {
            return bad("max negatives must be at least 1");
        }
        Ok(())
    }

    /// Fresh parameters drawn from the `init` stream.
    pub fn init_params<S: Scalar>(&self) -> EncoderParams<S> {
        let mut rng = SeedStreams::new(self.seed).stream("init");
        let mut p = EncoderParams::init(self.encoder.buckets, self.encoder.dim, &mut rng);
        p.log_inv_temperature = S::of((1.0 / self.init_temperature).ln());
        p
    }

    /// Number of optimizer steps for a train split of `rows` triples.
    pub fn steps_per_epoch(&self, rows: usize) -> usize {
        let full = rows / self.batch_size;
        let rest = rows % self.batch_size;
        full + usize::from(rest >= 2 || (rest == 1 && !self.negatives.in_batch))
    }
}

/// Linear warmup from 0 to `peak_lr` over `warmup` steps, then linear decay
/// to 0 at `total_steps`.
pub fn lr_at(step: usize, cfg: &TrainConfig, total_steps: usize) -> f64 {
    let warmup = cfg.warmup_steps.min(total_steps);
    if step < warmup {
        return cfg.peak_lr * step as f64 / warmup as f64;
    }
    if total_steps <= warmup {
        return cfg.peak_lr;
    }
    let remaining = total_steps.saturating_sub(step) as f64;
    cfg.peak_lr * remaining / (total_steps - warmup) as f64
}

/// Scales `g` so its global L2 norm (temperature included) is at most `max_norm`.
pub fn clip_gradients<S: Scalar>(
    mut g: GradientBuffer<S>,
    max_norm: f64,
) -> Result<GradientBuffer<S>, TrainError> {
    if let Some((name, _)) = g.entries().find(|(_, x)| !x.is_finite()) {
        return Err(TrainError::NonFiniteGradient { name });
    }
    let norm = g.norm();
    let max = S::of(max_norm);
    if norm > max {
        g.scale(max / norm);
    }
    Ok(g)
}

/// AdamW moments, dense over every parameter entry.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState<S> {
    pub m_hr: Vec<S>,
    pub v_hr: Vec<S>,
    pub m_tail: Vec<S>,
    pub v_tail: Vec<S>,
    pub m_tau: S,
    pub v_tau: S,
    pub step: u64,
}

impl<S: Scalar> OptimizerState<S> {
    pub fn new(params: &EncoderParams<S>) -> Self {
        let n = params.hr_table.len();
        Self {
            m_hr: vec![S::zero(); n],
            v_hr: vec![S::zero(); n],
            m_tail: vec![S::zero(); n],
            v_tail: vec![S::zero(); n],
            m_tau: S::zero(),
            v_tau: S::zero(),
            step: 0,
        }
    }
}

struct AdamStep<S> {
    lr: S,
    decay: S,
    b1: S,
    b2: S,
    c1: S,
    c2: S,
    eps: S,
}

impl<S: Scalar> AdamStep<S> {
    #[inline]
    fn apply(&self, theta: &mut S, m: &mut S, v: &mut S, g: S, decay: bool) {
        *m = self.b1 * *m + (S::one() - self.b1) * g;
        *v = self.b2 * *v + (S::one() - self.b2) * g * g;
        let m_hat = *m / self.c1;
        let v_hat = *v / self.c2;
        let wd = if decay { self.decay * *theta } else { S::zero() };
        *theta -= self.lr * (m_hat / (v_hat.sqrt() + self.eps) + wd);
    }
}

/// One AdamW step with bias correction and decoupled weight decay (not
/// applied to the temperature).
pub fn apply_update<S: Scalar>(
    params: &mut EncoderParams<S>,
    state: &mut OptimizerState<S>,
    grads: &GradientBuffer<S>,
    lr: f64,
    weight_decay: f64,
) -> Result<(), TrainError> {
    if grads.dim != params.dim || state.m_hr.len() != params.hr_table.len() {
        return Err(TrainError::ShapeMismatch(format!(
            "params {}x{}, gradient dim {}",
            params.buckets, params.dim, grads.dim
        )));
    }
    if let Some(&b) = grads
        .hr
        .keys()
        .chain(grads.tail.keys())
        .find(|&&b| b as usize >= params.buckets)
    {
        return Err(TrainError::ShapeMismatch(format!("bucket {b} out of range")));
    }
    state.step += 1;
    let t = state.step as i32;
    let step = AdamStep {
        lr: S::of(lr),
        decay: S::of(weight_decay),
        b1: S::of(BETA1),
        b2: S::of(BETA2),
        c1: S::one() - S::of(BETA1).powi(t),
        c2: S::one() - S::of(BETA2).powi(t),
        eps: S::of(EPSILON),
    };
    let dim = params.dim;
    let zero = vec![S::zero(); dim];
    for tower in [Tower::Query, Tower::Candidate] {
        let rows = grads.rows(tower);
        let (table, m, v) = match tower {
            Tower::Query => (&mut params.hr_table, &mut state.m_hr, &mut state.v_hr),
            Tower::Candidate => (&mut params.tail_table, &mut state.m_tail, &mut state.v_tail),
        };
        for (b, ((theta, m), v)) in table
            .chunks_mut(dim)
            .zip(m.chunks_mut(dim))
            .zip(v.chunks_mut(dim))
            .enumerate()
        {
            let g = rows.get(&(b as u32)).unwrap_or(&zero);
            for j in 0..dim {
                step.apply(&mut theta[j], &mut m[j], &mut v[j], g[j], true);
            }
            if theta.iter().any(|x| !x.is_finite()) {
                let name = match tower {
                    Tower::Query => "hr_table",
                    Tower::Candidate => "tail_table",
                };
                return Err(TrainError::NonFiniteUpdate {
                    name: format!("{name}[{b}]"),
                });
            }
        }
    }
    step.apply(
        &mut params.log_inv_temperature,
        &mut state.m_tau,
        &mut state.v_tau,
        grads.log_inv_temperature,
        false,
    );
    if !params.log_inv_temperature.is_finite() {
        return Err(TrainError::NonFiniteUpdate {
            name: "log_inv_temperature".into(),
        });
    }
    Ok(())
}

/// One line of the training log.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepRecord {
    pub step: usize,
    pub loss: f64,
    pub lr: f64,
    pub tau: f64,
    /// Cumulative encoder forward passes.
    pub forward_passes: u64,
}

impl fmt::Display for StepRecord {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "step={} loss={} lr={} tau={} fwd={}",
            self.step, self.loss, self.lr, self.tau, self.forward_passes
        )
    }
}

/// Owns parameters, optimizer state and the pre-batch queue for one run.
pub struct Trainer<'g, S: Scalar> {
    graph: &'g KnowledgeGraph,
    cfg: TrainConfig,
    params: EncoderParams<S>,
    optimizer: OptimizerState<S>,
    queue: PreBatchQueue<S>,
    streams: SeedStreams,
    pool: rayon::ThreadPool,
    total_steps: usize,
    step: usize,
    forward_passes: u64,
    log: Vec<StepRecord>,
}

impl<'g, S: Scalar> Trainer<'g, S> {
    pub fn new(
        graph: &'g KnowledgeGraph,
        params: EncoderParams<S>,
        cfg: TrainConfig,
    ) -> Result<Self, TrainError> {
        cfg.validate()?;
        if !graph.is_augmented() {
            return Err(TrainError::NotAugmented);
        }
        if params.buckets != cfg.encoder.buckets || params.dim != cfg.encoder.dim {
            return Err(TrainError::InvalidConfig(format!(
                "parameters are {}x{} but config asks for {}x{}",
                params.buckets, params.dim, cfg.encoder.buckets, cfg.encoder.dim
            )));
        }
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(cfg.threads.max(1))
            .build()
            .map_err(|e| TrainError::InvalidConfig(e.to_string()))?;
        let total_steps = cfg.steps_per_epoch(graph.triples(Split::Train).len()) * cfg.epochs;
        let queue_cap = if cfg.negatives.pre_batch {
            cfg.pre_batches * cfg.batch_size
        } else {
            0
        };
        Ok(Self {
            graph,
            optimizer: OptimizerState::new(&params),
            params,
            queue: PreBatchQueue::with_capacity(queue_cap),
            streams: SeedStreams::new(cfg.seed),
            pool,
            total_steps,
            step: 0,
            forward_passes: 0,
            log: Vec::new(),
            cfg,
        })
    }

    pub fn params(&self) -> &EncoderParams<S> {
        &self.params
    }

    pub fn config(&self) -> &TrainConfig {
        &self.cfg
    }

    pub fn queue(&self) -> &PreBatchQueue<S> {
        &self.queue
    }

    pub fn log(&self) -> &[StepRecord] {
        &self.log
    }

    pub fn forward_passes(&self) -> u64 {
        self.forward_passes
    }

    pub fn total_steps(&self) -> usize {
        self.total_steps
    }

    /// Overrides the schedule length, e.g. when driving `train_step` directly.
    pub fn set_total_steps(&mut self, total: usize) {
        self.total_steps = total;
    }

    pub fn into_params(self) -> EncoderParams<S> {
        self.params
    }

    /// Runs one optimizer step on `rows` and returns its log record.
    pub fn train_step(&mut self, rows: &[Triple]) -> Result<StepRecord, TrainError> {
        let (g, params, cfg, queue, streams, step) =
            (self.graph, &self.params, &self.cfg, &self.queue, &self.streams, self.step as u64);
        let fwd = self
            .pool
            .install(|| forward_batch(g, params, rows, cfg, queue, streams, step))?;
        self.forward_passes += fwd.forward_passes();
        let out = compute_loss(
            self.cfg.loss_kind,
            &fwd.matrix,
            &self.cfg.loss,
            self.params.log_inv_temperature,
            S::of(self.cfg.margin_tau_temperature),
        );
        if !out.loss.is_finite() {
            return Err(TrainError::NonFiniteLoss { step: self.step });
        }
        let grads = backward_batch(&fwd, &out, &self.queue)?;
        let grads = clip_gradients(grads, self.cfg.grad_clip)?;
        let lr = lr_at(self.step, &self.cfg, self.total_steps);
        apply_update(
            &mut self.params,
            &mut self.optimizer,
            &grads,
            lr,
            self.cfg.weight_decay,
        )?;
        if self.cfg.negatives.pre_batch {
            let tails: Vec<_> = rows.iter().map(|t| t.tail).collect();
            self.queue.push(&fwd.batch.tail_embs, &tails);
        }
        self.step += 1;
        let tau = (-self.params.log_inv_temperature.to_f64_lossy())
            .exp()
            .max(self.cfg.loss.tau_floor);
        let record = StepRecord {
            step: self.step,
            loss: out.loss.to_f64_lossy(),
            lr,
            tau,
            forward_passes: self.forward_passes,
        };
        self.log.push(record);
        Ok(record)
    }

    /// Shuffles the train split with the epoch's stream and steps through it.
    pub fn run_epoch(&mut self, epoch: usize) -> Result<(), TrainError> {
        let mut order: Vec<Triple> = self.graph.triples(Split::Train).to_vec();
        order.shuffle(&mut self.streams.indexed("shuffle", &[epoch as u64]));
        let min_batch = if self.cfg.negatives.in_batch { 2 } else { 1 };
        for chunk in order.chunks(self.cfg.batch_size) {
            if chunk.len() < min_batch {
                continue;
            }
            self.train_step(chunk)?;
        }
        Ok(())
    }
}

/// Encoder passes of one training row.
#[derive(Debug, Clone, PartialEq)]
pub struct RowForward<S> {
    pub hr: ForwardRecord<S>,
    pub tail: ForwardRecord<S>,
    /// The head encoded by the candidate tower, when self-negatives are on.
    pub head_as_tail: Option<ForwardRecord<S>>,
}

/// Forward state of one batch: encoder records, embeddings and the scored,
/// masked candidate matrix.
#[derive(Debug, Clone)]
pub struct BatchForward<S> {
    pub rows: Vec<RowForward<S>>,
    pub batch: TrainingBatch<S>,
    pub matrix: CandidateMatrix<S>,
}

impl<S> BatchForward<S> {
    pub fn forward_passes(&self) -> u64 {
        self.rows
            .iter()
            .map(|r| 2 + u64::from(r.head_as_tail.is_some()))
            .sum()
    }
}

/// Encodes `rows` in training mode and assembles the candidate matrix.
/// Dropout masks come from the `("dropout", [step, row, tower])` streams,
/// so the result does not depend on the thread count.
pub fn forward_batch<S: Scalar>(
    g: &KnowledgeGraph,
    params: &EncoderParams<S>,
    rows: &[Triple],
    cfg: &TrainConfig,
    queue: &PreBatchQueue<S>,
    streams: &SeedStreams,
    step: u64,
) -> Result<BatchForward<S>, TrainError> {
    let enc = cfg.encoder;
    let dropout = cfg.dropout;
    let use_sn = cfg.negatives.self_negative;
    let forwards: Vec<RowForward<S>> = rows
        .par_iter()
        .enumerate()
        .map(|(i, t)| -> Result<RowForward<S>, TrainError> {
            let head_text = g.augment_description(t.head, Some(t.tail))?;
            let tail_text = g.augment_description(t.tail, Some(t.head))?;
            let head = tokenize(&head_text, enc.buckets, enc.max_tokens);
            let rel = tokenize(&g.relation(t.relation).description, enc.buckets, enc.max_tokens);
            let tail = tokenize(&tail_text, enc.buckets, enc.max_tokens);
            let rng = |tower: u64| streams.indexed("dropout", &[step, i as u64, tower]);
            let hr = encode_hr(params, &head, &rel, enc.max_tokens, dropout, Some(&mut rng(0)));
            let tail_rec = encode_tail(params, &tail, dropout, Some(&mut rng(1)));
            let head_as_tail = use_sn.then(|| encode_tail(params, &head, dropout, Some(&mut rng(2))));
            Ok(RowForward {
                hr,
                tail: tail_rec,
                head_as_tail,
            })
        })
        .collect::<Result<_, _>>()?;
    let batch = TrainingBatch {
        rows: rows.to_vec(),
        hr_embs: forwards.iter().map(|f| f.hr.output.clone()).collect(),
        tail_embs: forwards.iter().map(|f| f.tail.output.clone()).collect(),
        self_embs: use_sn.then(|| {
            forwards
                .iter()
                .map(|f| f.head_as_tail.as_ref().expect("self-negative pass").output.clone())
                .collect()
        }),
    };
    let opts = CandidateOptions {
        in_batch: cfg.negatives.in_batch,
        self_negatives: use_sn,
    };
    let mut matrix = assemble_candidates(g, &batch, queue, opts)?;
    if let Some(k) = cfg.max_negatives {
        matrix.limit_negatives(k);
    }
    Ok(BatchForward {
        rows: forwards,
        batch,
        matrix,
    })
}

/// Chains `out` back through the candidate matrix and both towers.
pub fn backward_batch<S: Scalar>(
    fwd: &BatchForward<S>,
    out: &LossOutput<S>,
    queue: &PreBatchQueue<S>,
) -> Result<GradientBuffer<S>, TrainError> {
    let emb_grads = backprop_scores(&fwd.matrix, &out.grad_scores, &fwd.batch, queue);
    let dim = fwd.batch.hr_embs.first().map_or(0, Vec::len);
    let mut grads = GradientBuffer::new(dim);
    for (i, f) in fwd.rows.iter().enumerate() {
        backward_into(&f.hr, &emb_grads.hr[i], &mut grads)?;
        backward_into(&f.tail, &emb_grads.tail[i], &mut grads)?;
        if let (Some(rec), Some(g)) = (&f.head_as_tail, &emb_grads.self_) {
            backward_into(rec, &g[i], &mut grads)?;
        }
    }
    grads.log_inv_temperature = out.grad_log_inv_tau;
    Ok(grads)
}

/// Result of a full training run.
#[derive(Debug, Clone)]
pub struct TrainOutcome<S> {
    pub params: EncoderParams<S>,
    pub log: Vec<StepRecord>,
    pub forward_passes: u64,
}

/// Trains for `cfg.epochs` epochs. `on_epoch_end` runs after every epoch
/// (checkpointing goes there).
pub fn train<S: Scalar>(
    g: &KnowledgeGraph,
    params: EncoderParams<S>,
    cfg: &TrainConfig,
    mut on_epoch_end: impl FnMut(usize, &EncoderParams<S>) -> Result<(), TrainError>,
) -> Result<TrainOutcome<S>, TrainError> {
    let mut trainer = Trainer::new(g, params, cfg.clone())?;
    for epoch in 0..cfg.epochs {
        trainer.run_epoch(epoch)?;
        on_epoch_end(epoch, trainer.params())?;
    }
    let log = trainer.log.clone();
    let forward_passes = trainer.forward_passes;
    Ok(TrainOutcome {
        params: trainer.into_params(),
        log,
        forward_passes,
    })
}
