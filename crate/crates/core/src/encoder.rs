//! Hashed-token embedding-bag encoders.
//!
//! Two towers share the same shape but not their parameters: the query tower
//! encodes `head text [SEP] relation text`, the candidate tower encodes entity
//! text. Each tower is `tokens -> table rows -> (dropout) -> mean -> L2 normalize`.
//! [`encode_backward`] replays a recorded forward pass to produce exact
//! gradients for the touched rows.

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::path::Path;
use std::sync::atomic::{AtomicU64, Ordering};

use rand::Rng;
use thiserror::Error;

use crate::kg::{EntityId, KgError, KnowledgeGraph, RelationId};
use crate::scalar::{dot, Scalar};
use crate::seed::fnv1a64;

pub const DEFAULT_BUCKETS: usize = 30_000;
pub const DEFAULT_DIM: usize = 64;
pub const DEFAULT_MAX_TOKENS: usize = 50;
pub const DEFAULT_INIT_TEMPERATURE: f64 = 0.05;
const INIT_RANGE: f64 = 0.05;

#[derive(Debug, Error)]
pub enum EncoderError {
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("no precomputed embedding for {0:?}")]
    MissingEmbedding(String),
    #[error("{path}:{line}: {message}")]
    Parse {
        path: String,
        line: usize,
        message: String,
    },
    #[error("failed to read {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Graph(#[from] KgError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct EncoderConfig {
    pub buckets: usize,
    pub dim: usize,
    pub max_tokens: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            buckets: DEFAULT_BUCKETS,
            dim: DEFAULT_DIM,
            max_tokens: DEFAULT_MAX_TOKENS,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Hash)]
pub struct TokenSequence {
    pub tokens: Vec<u32>,
}

impl TokenSequence {
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }
}

/// Bucket reserved for the query separator; hashing never produces it.
pub fn separator_bucket(buckets: usize) -> u32 {
    (buckets - 1) as u32
}

/// Lowercases, splits on whitespace, hashes each token with FNV-1a into
/// `[0, buckets - 1)` and keeps the first `max_tokens`.
pub fn tokenize(text: &str, buckets: usize, max_tokens: usize) -> TokenSequence {
    let modulus = buckets.saturating_sub(1).max(1) as u64;
    let tokens = text
        .split_whitespace()
        .take(max_tokens)
        .map(|tok| (fnv1a64(tok.to_lowercase().as_bytes()) % modulus) as u32)
        .collect();
    TokenSequence { tokens }
}

/// `h [SEP] r`, truncated to `max_tokens`.
pub fn query_tokens(
    head: &TokenSequence,
    relation: &TokenSequence,
    buckets: usize,
    max_tokens: usize,
) -> TokenSequence {
    let sep = separator_bucket(buckets);
    let tokens = head
        .tokens
        .iter()
        .copied()
        .chain(std::iter::once(sep))
        .chain(relation.tokens.iter().copied())
        .take(max_tokens)
        .collect();
    TokenSequence { tokens }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Tower {
    /// Encodes `(head, relation)` queries.
    Query,
    /// Encodes candidate entities.
    Candidate,
}

/// Trainable parameters: one `buckets × dim` table per tower (row-major) and
/// the log inverse temperature.
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderParams<S> {
    pub buckets: usize,
    pub dim: usize,
    pub hr_table: Vec<S>,
    pub tail_table: Vec<S>,
    pub log_inv_temperature: S,
}

impl<S: Scalar> EncoderParams<S> {
    /// Uniform `[-0.05, 0.05]` entries; temperature starts at 0.05.
    pub fn init<R: Rng>(buckets: usize, dim: usize, rng: &mut R) -> Self {
        Self::init_scaled(buckets, dim, INIT_RANGE, rng)
    }

    pub fn init_scaled<R: Rng>(buckets: usize, dim: usize, range: f64, rng: &mut R) -> Self {
        assert!(buckets >= 2 && dim >= 1, "need at least two buckets and one dimension");
        let mut draw = |n: usize| -> Vec<S> {
            (0..n)
                .map(|_| S::of(rng.gen_range(-range..=range)))
                .collect()
        };
        let hr_table = draw(buckets * dim);
        let tail_table = draw(buckets * dim);
        Self {
            buckets,
            dim,
            hr_table,
            tail_table,
            log_inv_temperature: S::of((1.0 / DEFAULT_INIT_TEMPERATURE).ln()),
        }
    }

    pub fn zeros(buckets: usize, dim: usize) -> Self {
        Self {
            buckets,
            dim,
            hr_table: vec![S::zero(); buckets * dim],
            tail_table: vec![S::zero(); buckets * dim],
            log_inv_temperature: S::zero(),
        }
    }

    pub fn table(&self, tower: Tower) -> &[S] {
        match tower {
            Tower::Query => &self.hr_table,
            Tower::Candidate => &self.tail_table,
        }
    }

    pub fn table_mut(&mut self, tower: Tower) -> &mut [S] {
        match tower {
            Tower::Query => &mut self.hr_table,
            Tower::Candidate => &mut self.tail_table,
        }
    }

    pub fn row(&self, tower: Tower, bucket: u32) -> &[S] {
        let start = bucket as usize * self.dim;
        &self.table(tower)[start..start + self.dim]
    }

    pub fn row_mut(&mut self, tower: Tower, bucket: u32) -> &mut [S] {
        let start = bucket as usize * self.dim;
        let dim = self.dim;
        &mut self.table_mut(tower)[start..start + dim]
    }

    /// Temperature implied by the learnable parameter (unclamped).
    pub fn temperature(&self) -> S {
        (-self.log_inv_temperature).exp()
    }

    pub fn is_finite(&self) -> bool {
        self.log_inv_temperature.is_finite()
            && self.hr_table.iter().chain(&self.tail_table).all(|x| x.is_finite())
    }
}

/// Intermediates of one forward pass, enough to replay it backwards.
#[derive(Debug, Clone, PartialEq)]
pub struct ForwardRecord<S> {
    pub tower: Tower,
    pub tokens: Vec<u32>,
    /// Per-token dropout factor: 0 for dropped rows, `1/(1-p)` for kept ones.
    pub scales: Vec<S>,
    /// Mean-pooled vector before normalization.
    pub pooled: Vec<S>,
    pub norm: S,
    /// Unit-norm output.
    pub output: Vec<S>,
    /// Set when the pooled vector was zero and the basis fallback was used.
    pub fallback: bool,
}

fn basis_vector<S: Scalar>(dim: usize) -> Vec<S> {
    let mut v = vec![S::zero(); dim];
    v[0] = S::one();
    v
}

/// Runs one tower over `tokens`. `dropout` is ignored when `rng` is `None`.
pub fn encode<S: Scalar, R: Rng>(
    params: &EncoderParams<S>,
    tower: Tower,
    tokens: &TokenSequence,
    dropout: f64,
    rng: Option<&mut R>,
) -> ForwardRecord<S> {
    let dim = params.dim;
    let n = tokens.len();
    let scales: Vec<S> = match rng {
        Some(rng) if dropout > 0.0 => {
            let keep = S::of(1.0 / (1.0 - dropout));
            (0..n)
                .map(|_| {
                    if rng.gen::<f64>() < dropout {
                        S::zero()
                    } else {
                        keep
                    }
                })
                .collect()
        }
        _ => vec![S::one(); n],
    };
    let mut pooled = vec![S::zero(); dim];
    if n > 0 {
        let inv_n = S::one() / S::of(n as f64);
        for (&tok, &scale) in tokens.tokens.iter().zip(&scales) {
            if scale == S::zero() {
                continue;
            }
            let w = scale * inv_n;
            for (p, &x) in pooled.iter_mut().zip(params.row(tower, tok)) {
                *p += w * x;
            }
        }
    }
    let norm = dot(&pooled, &pooled).sqrt();
    let (output, fallback) = if norm > S::zero() && norm.is_finite() {
        (pooled.iter().map(|&x| x / norm).collect(), false)
    } else {
        (basis_vector(dim), true)
    };
    ForwardRecord {
        tower,
        tokens: tokens.tokens.clone(),
        scales,
        pooled,
        norm,
        output,
        fallback,
    }
}

/// Candidate-tower encoding.
pub fn encode_tail<S: Scalar, R: Rng>(
    params: &EncoderParams<S>,
    tokens: &TokenSequence,
    dropout: f64,
    rng: Option<&mut R>,
) -> ForwardRecord<S> {
    encode(params, Tower::Candidate, tokens, dropout, rng)
}

/// Query-tower encoding of `head [SEP] relation`.
pub fn encode_hr<S: Scalar, R: Rng>(
    params: &EncoderParams<S>,
    head: &TokenSequence,
    relation: &TokenSequence,
    max_tokens: usize,
    dropout: f64,
    rng: Option<&mut R>,
) -> ForwardRecord<S> {
    let joined = query_tokens(head, relation, params.buckets, max_tokens);
    encode(params, Tower::Query, &joined, dropout, rng)
}

/// Sparse gradient: one entry per touched bucket and tower.
#[derive(Debug, Clone, PartialEq)]
pub struct GradientBuffer<S> {
    pub dim: usize,
    pub hr: BTreeMap<u32, Vec<S>>,
    pub tail: BTreeMap<u32, Vec<S>>,
    pub log_inv_temperature: S,
}

impl<S: Scalar> GradientBuffer<S> {
    pub fn new(dim: usize) -> Self {
        Self {
            dim,
            hr: BTreeMap::new(),
            tail: BTreeMap::new(),
            log_inv_temperature: S::zero(),
        }
    }

    pub fn rows(&self, tower: Tower) -> &BTreeMap<u32, Vec<S>> {
        match tower {
            Tower::Query => &self.hr,
            Tower::Candidate => &self.tail,
        }
    }

    fn rows_mut(&mut self, tower: Tower) -> &mut BTreeMap<u32, Vec<S>> {
        match tower {
            Tower::Query => &mut self.hr,
            Tower::Candidate => &mut self.tail,
        }
    }

    /// Adds `other` into `self` in bucket order.
    pub fn merge(&mut self, other: &GradientBuffer<S>) {
        for tower in [Tower::Query, Tower::Candidate] {
            let dim = self.dim;
            let dst = self.rows_mut(tower);
            for (&b, g) in other.rows(tower) {
                let row = dst.entry(b).or_insert_with(|| vec![S::zero(); dim]);
                for (a, &x) in row.iter_mut().zip(g) {
                    *a += x;
                }
            }
        }
        self.log_inv_temperature += other.log_inv_temperature;
    }

    /// Iterates every stored entry with a label naming its parameter.
    pub fn entries(&self) -> impl Iterator<Item = (String, S)> + '_ {
        fn rows<'a, S: Scalar>(
            name: &'static str,
            map: &'a BTreeMap<u32, Vec<S>>,
        ) -> impl Iterator<Item = (String, S)> + 'a {
            map.iter().flat_map(move |(b, row)| {
                row.iter()
                    .enumerate()
                    .map(move |(j, &x)| (format!("{name}[{b}][{j}]"), x))
            })
        }
        rows("hr_table", &self.hr)
            .chain(rows("tail_table", &self.tail))
            .chain(std::iter::once((
                "log_inv_temperature".to_owned(),
                self.log_inv_temperature,
            )))
    }

    pub fn squared_norm(&self) -> S {
        let rows: S = self
            .hr
            .values()
            .chain(self.tail.values())
            .map(|r| dot(r, r))
            .sum();
        rows + self.log_inv_temperature * self.log_inv_temperature
    }

    pub fn norm(&self) -> S {
        self.squared_norm().sqrt()
    }

    pub fn scale(&mut self, factor: S) {
        for row in self.hr.values_mut().chain(self.tail.values_mut()) {
            for x in row.iter_mut() {
                *x *= factor;
            }
        }
        self.log_inv_temperature *= factor;
    }
}

/// Accumulates the gradient of `⟨upstream, output⟩` w.r.t. the touched rows
/// of the record's table into `grads`.
pub fn backward_into<S: Scalar>(
    record: &ForwardRecord<S>,
    upstream: &[S],
    grads: &mut GradientBuffer<S>,
) -> Result<(), EncoderError> {
    if upstream.len() != record.output.len() {
        return Err(EncoderError::DimensionMismatch {
            expected: record.output.len(),
            got: upstream.len(),
        });
    }
    if grads.dim != record.output.len() {
        return Err(EncoderError::DimensionMismatch {
            expected: grads.dim,
            got: record.output.len(),
        });
    }
    if record.fallback || record.tokens.is_empty() {
        return Ok(());
    }
    // d out / d pooled = (I - u uᵀ) / ‖x‖
    let u = &record.output;
    let radial = dot(u, upstream);
    let g_pooled: Vec<S> = upstream
        .iter()
        .zip(u)
        .map(|(&g, &ui)| (g - radial * ui) / record.norm)
        .collect();
    let inv_n = S::one() / S::of(record.tokens.len() as f64);
    let dim = grads.dim;
    let rows = grads.rows_mut(record.tower);
    for (&tok, &scale) in record.tokens.iter().zip(&record.scales) {
        let row = rows.entry(tok).or_insert_with(|| vec![S::zero(); dim]);
        let w = scale * inv_n;
        for (a, &g) in row.iter_mut().zip(&g_pooled) {
            *a += w * g;
        }
    }
    Ok(())
}

/// Gradient of `⟨upstream, output⟩` for one recorded forward pass.
pub fn encode_backward<S: Scalar>(
    params: &EncoderParams<S>,
    record: &ForwardRecord<S>,
    upstream: &[S],
) -> Result<GradientBuffer<S>, EncoderError> {
    if record.output.len() != params.dim {
        return Err(EncoderError::DimensionMismatch {
            expected: params.dim,
            got: record.output.len(),
        });
    }
    let mut grads = GradientBuffer::new(params.dim);
    backward_into(record, upstream, &mut grads)?;
    Ok(grads)
}

/// Evaluation-side encoder seam. Implementations return unit vectors of
/// length [`Encoder::dim`].
pub trait Encoder<S: Scalar>: Sync {
    fn dim(&self) -> usize;

    /// Candidate embedding of an entity.
    fn encode_entity(&self, g: &KnowledgeGraph, e: EntityId) -> Result<Vec<S>, EncoderError>;

    /// Relation-aware query embedding for `(head, relation, ?)`.
    fn encode_query(
        &self,
        g: &KnowledgeGraph,
        head: EntityId,
        relation: RelationId,
    ) -> Result<Vec<S>, EncoderError>;
}

impl<S: Scalar, E: Encoder<S> + ?Sized> Encoder<S> for &E {
    fn dim(&self) -> usize {
        (**self).dim()
    }

    fn encode_entity(&self, g: &KnowledgeGraph, e: EntityId) -> Result<Vec<S>, EncoderError> {
        (**self).encode_entity(g, e)
    }

    fn encode_query(
        &self,
        g: &KnowledgeGraph,
        head: EntityId,
        relation: RelationId,
    ) -> Result<Vec<S>, EncoderError> {
        (**self).encode_query(g, head, relation)
    }
}

/// The embedding-bag encoder in eval mode (no dropout).
#[derive(Debug, Clone, Copy)]
pub struct ReferenceEncoder<'a, S> {
    pub params: &'a EncoderParams<S>,
    pub max_tokens: usize,
}

impl<'a, S: Scalar> ReferenceEncoder<'a, S> {
    pub fn new(params: &'a EncoderParams<S>, max_tokens: usize) -> Self {
        Self { params, max_tokens }
    }

    fn tokens(&self, text: &str) -> TokenSequence {
        tokenize(text, self.params.buckets, self.max_tokens)
    }
}

impl<S: Scalar> Encoder<S> for ReferenceEncoder<'_, S> {
    fn dim(&self) -> usize {
        self.params.dim
    }

    fn encode_entity(&self, g: &KnowledgeGraph, e: EntityId) -> Result<Vec<S>, EncoderError> {
        let text = g.augment_description(e, None)?;
        let rec = encode_tail::<S, rand_chacha::ChaCha8Rng>(self.params, &self.tokens(&text), 0.0, None);
        Ok(rec.output)
    }

    fn encode_query(
        &self,
        g: &KnowledgeGraph,
        head: EntityId,
        relation: RelationId,
    ) -> Result<Vec<S>, EncoderError> {
        let h = self.tokens(&g.augment_description(head, None)?);
        let r = self.tokens(&g.relation(relation).description);
        let rec = encode_hr::<S, rand_chacha::ChaCha8Rng>(self.params, &h, &r, self.max_tokens, 0.0, None);
        Ok(rec.output)
    }
}

/// Wraps an encoder and tallies every forward pass.
#[derive(Debug)]
pub struct CountingEncoder<E> {
    inner: E,
    count: AtomicU64,
}

impl<E> CountingEncoder<E> {
    pub fn new(inner: E) -> Self {
        Self {
            inner,
            count: AtomicU64::new(0),
        }
    }

    pub fn count(&self) -> u64 {
        self.count.load(Ordering::Relaxed)
    }

    pub fn into_inner(self) -> E {
        self.inner
    }
}

impl<S: Scalar, E: Encoder<S>> Encoder<S> for CountingEncoder<E> {
    fn dim(&self) -> usize {
        self.inner.dim()
    }

    fn encode_entity(&self, g: &KnowledgeGraph, e: EntityId) -> Result<Vec<S>, EncoderError> {
        self.count.fetch_add(1, Ordering::Relaxed);
        self.inner.encode_entity(g, e)
    }

    fn encode_query(
        &self,
        g: &KnowledgeGraph,
        head: EntityId,
        relation: RelationId,
    ) -> Result<Vec<S>, EncoderError> {
        self.count.fetch_add(1, Ordering::Relaxed);
        self.inner.encode_query(g, head, relation)
    }
}

/// Serves vectors read from `entity_id<TAB>v1 ... vd` files.
///
/// Query vectors are optional and come from a second file with lines
/// `head_id<TAB>relation_id<TAB>v1 ... vd`.
#[derive(Debug, Clone, Default)]
pub struct PrecomputedEncoder<S> {
    dim: usize,
    entities: HashMap<String, Vec<S>>,
    queries: HashMap<(String, String), Vec<S>>,
}

const UNIT_TOLERANCE: f64 = 1e-4;

fn parse_vector<S: Scalar>(
    text: &str,
    path: &str,
    line: usize,
) -> Result<Vec<S>, EncoderError> {
    let v: Vec<S> = text
        .split_whitespace()
        .map(|x| {
            x.parse::<S>().map_err(|_| EncoderError::Parse {
                path: path.to_owned(),
                line,
                message: format!("invalid number {x:?}"),
            })
        })
        .collect::<Result<_, _>>()?;
    let norm = dot(&v, &v).sqrt().to_f64_lossy();
    if v.is_empty() || (norm - 1.0).abs() > UNIT_TOLERANCE {
        return Err(EncoderError::Parse {
            path: path.to_owned(),
            line,
            message: format!("vector is not unit norm (norm {norm})"),
        });
    }
    Ok(v)
}

impl<S: Scalar> PrecomputedEncoder<S> {
    pub fn from_entity_file(path: &Path) -> Result<Self, EncoderError> {
        let name = path.display().to_string();
        let text = fs::read_to_string(path).map_err(|source| EncoderError::Io {
            path: name.clone(),
            source,
        })?;
        let mut out = Self::default();
        for (i, line) in text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
            let (id, rest) = line.split_once('\t').ok_or_else(|| EncoderError::Parse {
                path: name.clone(),
                line: i + 1,
                message: "expected entity_id<TAB>vector".into(),
            })?;
            let v = parse_vector::<S>(rest, &name, i + 1)?;
            out.check_dim(v.len(), &name, i + 1)?;
            out.entities.insert(id.to_owned(), v);
        }
        Ok(out)
    }

    pub fn with_query_file(mut self, path: &Path) -> Result<Self, EncoderError> {
        let name = path.display().to_string();
        let text = fs::read_to_string(path).map_err(|source| EncoderError::Io {
            path: name.clone(),
            source,
        })?;
        for (i, line) in text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
            let mut parts = line.splitn(3, '\t');
            let (Some(h), Some(r), Some(rest)) = (parts.next(), parts.next(), parts.next()) else {
                return Err(EncoderError::Parse {
                    path: name,
                    line: i + 1,
                    message: "expected head_id<TAB>relation_id<TAB>vector".into(),
                });
            };
            let v = parse_vector::<S>(rest, &name, i + 1)?;
            self.check_dim(v.len(), &name, i + 1)?;
            self.queries.insert((h.to_owned(), r.to_owned()), v);
        }
        Ok(self)
    }

    /// Builds the plugin from in-memory entity vectors.
    pub fn from_entities(entities: HashMap<String, Vec<S>>) -> Result<Self, EncoderError> {
        let mut out = Self::default();
        for (id, v) in entities {
            out.check_dim(v.len(), &id, 0)?;
            out.entities.insert(id, v);
        }
        Ok(out)
    }

    fn check_dim(&mut self, len: usize, path: &str, line: usize) -> Result<(), EncoderError> {
        if self.dim == 0 {
            self.dim = len;
        }
        if len != self.dim {
            return Err(EncoderError::Parse {
                path: path.to_owned(),
                line,
                message: format!("expected {} values, found {len}", self.dim),
            });
        }
        Ok(())
    }
}

impl<S: Scalar> Encoder<S> for PrecomputedEncoder<S> {
    fn dim(&self) -> usize {
        self.dim
    }

    fn encode_entity(&self, g: &KnowledgeGraph, e: EntityId) -> Result<Vec<S>, EncoderError> {
        let id = &g.entity(e).id;
        self.entities
            .get(id)
            .cloned()
            .ok_or_else(|| EncoderError::MissingEmbedding(id.clone()))
    }

    fn encode_query(
        &self,
        g: &KnowledgeGraph,
        head: EntityId,
        relation: RelationId,
    ) -> Result<Vec<S>, EncoderError> {
        let key = (g.entity(head).id.clone(), g.relation(relation).id.clone());
        self.queries
            .get(&key)
            .cloned()
            .ok_or_else(|| EncoderError::MissingEmbedding(format!("{}\t{}", key.0, key.1)))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scalar::l2_norm;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    type NoRng = ChaCha8Rng;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    #[test]
    fn tokenize_examples() {
        let a = tokenize("New York", 1000, 50);
        assert_eq!(a.len(), 2);
        assert_eq!(a, tokenize("new york", 1000, 50));
        assert!(tokenize("", 1000, 50).is_empty());
        let long: Vec<String> = (0..60).map(|i| format!("w{i}")).collect();
        let full = tokenize(&long.join(" "), 1000, 100);
        let cut = tokenize(&long.join(" "), 1000, 50);
        assert_eq!(cut.len(), 50);
        assert_eq!(cut.tokens[..], full.tokens[..50]);
        // separator never produced by hashing
        let many: Vec<String> = (0..5000).map(|i| format!("t{i}")).collect();
        assert!(tokenize(&many.join(" "), 7, 5000).tokens.iter().all(|&b| b < 6));
    }

    #[test]
    fn identical_rows_give_normalized_row() {
        let mut p = EncoderParams::<f64>::zeros(8, 3);
        for b in 0..8 {
            p.row_mut(Tower::Candidate, b).copy_from_slice(&[1.0, 2.0, 2.0]);
        }
        let rec = encode_tail::<f64, NoRng>(&p, &TokenSequence { tokens: vec![1, 4, 4] }, 0.0, None);
        for (x, e) in rec.output.iter().zip([1.0 / 3.0, 2.0 / 3.0, 2.0 / 3.0]) {
            assert!((x - e).abs() < 1e-15);
        }
    }

    #[test]
    fn empty_sequence_falls_back_to_first_basis_vector() {
        let p = EncoderParams::<f64>::init(16, 4, &mut rng(1));
        let rec = encode_tail::<f64, NoRng>(&p, &TokenSequence::default(), 0.0, None);
        assert_eq!(rec.output, vec![1.0, 0.0, 0.0, 0.0]);
        assert!(rec.fallback);
        let g = encode_backward(&p, &rec, &[1.0, 1.0, 1.0, 1.0]).unwrap();
        assert!(g.tail.is_empty());
    }

    #[test]
    fn query_concatenation_length() {
        let p = EncoderParams::<f64>::init(64, 4, &mut rng(2));
        let h = TokenSequence { tokens: vec![1, 2, 3] };
        let r = TokenSequence { tokens: vec![4, 5] };
        let rec = encode_hr::<f64, NoRng>(&p, &h, &r, 50, 0.0, None);
        assert_eq!(rec.tokens, vec![1, 2, 3, 63, 4, 5]);
        let again = encode_hr::<f64, NoRng>(&p, &h, &r, 50, 0.0, None);
        assert_eq!(rec.output, again.output);
        let other = encode_hr::<f64, NoRng>(&p, &h, &TokenSequence { tokens: vec![6, 7] }, 50, 0.0, None);
        assert_ne!(rec.output, other.output);
        let cut = encode_hr::<f64, NoRng>(&p, &h, &r, 4, 0.0, None);
        assert_eq!(cut.tokens, vec![1, 2, 3, 63]);
    }

    #[test]
    fn outputs_have_unit_norm_with_dropout() {
        let p = EncoderParams::<f64>::init(256, 16, &mut rng(3));
        let mut r = rng(4);
        for len in 1..30 {
            let toks = TokenSequence { tokens: (0..len).map(|i| (i * 7 % 255) as u32).collect() };
            let rec = encode_tail(&p, &toks, 0.1, Some(&mut r));
            assert!((l2_norm(&rec.output) - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn dropout_scales_survivors() {
        let p = EncoderParams::<f64>::init(32, 4, &mut rng(5));
        let toks = TokenSequence { tokens: (0..20).collect() };
        let rec = encode_tail(&p, &toks, 0.5, Some(&mut rng(6)));
        assert!(rec.scales.iter().all(|&s| s == 0.0 || s == 2.0));
        assert!(rec.scales.contains(&0.0));
    }

    #[test]
    fn zero_upstream_gives_zero_magnitude() {
        let p = EncoderParams::<f64>::init(32, 4, &mut rng(7));
        let rec = encode_tail::<f64, NoRng>(&p, &TokenSequence { tokens: vec![1, 2] }, 0.0, None);
        let g = encode_backward(&p, &rec, &[0.0; 4]).unwrap();
        assert_eq!(g.norm(), 0.0);
        assert_eq!(g.tail.len(), 2);
        assert!(g.hr.is_empty());
    }

    #[test]
    fn radial_upstream_is_annihilated() {
        let p = EncoderParams::<f64>::init(32, 6, &mut rng(8));
        let rec = encode_tail::<f64, NoRng>(&p, &TokenSequence { tokens: vec![3, 9, 11] }, 0.0, None);
        let up: Vec<f64> = rec.output.iter().map(|x| 2.5 * x).collect();
        let g = encode_backward(&p, &rec, &up).unwrap();
        assert!(g.norm() < 1e-12);
    }

    #[test]
    fn backward_rejects_mismatched_dimensions() {
        let p = EncoderParams::<f64>::init(32, 4, &mut rng(9));
        let rec = encode_tail::<f64, NoRng>(&p, &TokenSequence { tokens: vec![1] }, 0.0, None);
        assert!(matches!(
            encode_backward(&p, &rec, &[1.0; 3]),
            Err(EncoderError::DimensionMismatch { .. })
        ));
    }

    /// Central finite differences of `⟨w, encode(params)⟩` against the
    /// analytic gradient, over every entry of every touched row.
    fn check_fd(seed: u64, dim: usize, tokens: Vec<u32>, dropout: f64) -> f64 {
        let mut r = rng(seed);
        let p = EncoderParams::<f64>::init_scaled(40, dim, 1.0, &mut r);
        let w: Vec<f64> = (0..dim).map(|_| r.gen_range(-1.0..1.0)).collect();
        let toks = TokenSequence { tokens };
        let run = |p: &EncoderParams<f64>| {
            let rec = encode_tail(p, &toks, dropout, Some(&mut rng(seed ^ 0xd0)));
            dot(&rec.output, &w)
        };
        let rec = encode_tail(&p, &toks, dropout, Some(&mut rng(seed ^ 0xd0)));
        let g = encode_backward(&p, &rec, &w).unwrap();
        let h = 1e-4;
        let mut worst: f64 = 0.0;
        for (&b, row) in &g.tail {
            #[allow(clippy::needless_range_loop)]
            for j in 0..dim {
                let mut plus = p.clone();
                plus.row_mut(Tower::Candidate, b)[j] += h;
                let mut minus = p.clone();
                minus.row_mut(Tower::Candidate, b)[j] -= h;
                let fd = (run(&plus) - run(&minus)) / (2.0 * h);
                let denom = row[j].abs().max(fd.abs());
                if denom > 1e-7 {
                    worst = worst.max((row[j] - fd).abs() / denom);
                } else {
                    assert!((row[j] - fd).abs() < 1e-9);
                }
            }
        }
        worst
    }

    #[test]
    fn analytic_gradient_matches_finite_differences() {
        assert!(check_fd(11, 8, vec![1, 5, 7, 5, 30], 0.0) <= 1e-4);
        for seed in 0..100 {
            let dim = 2 + (seed as usize % 15);
            let toks: Vec<u32> = (0..(1 + seed % 7)).map(|i| ((seed * 13 + i * 5) % 39) as u32).collect();
            let err = check_fd(seed, dim, toks, if seed % 2 == 0 { 0.0 } else { 0.3 });
            assert!(err <= 1e-4, "seed {seed}: relative error {err}");
        }
    }

    #[test]
    fn pre_normalization_gradient_is_orthogonal_to_pooled() {
        let mut r = rng(12);
        for _ in 0..50 {
            let p = EncoderParams::<f64>::init(32, 8, &mut r);
            let toks = TokenSequence { tokens: vec![r.gen_range(0..31), r.gen_range(0..31), 4] };
            let rec = encode_tail::<f64, NoRng>(&p, &toks, 0.0, None);
            let up: Vec<f64> = (0..8).map(|_| r.gen_range(-1.0..1.0)).collect();
            let radial = dot(&rec.output, &up);
            let g_pooled: Vec<f64> = up.iter().zip(&rec.output).map(|(g, u)| (g - radial * u) / rec.norm).collect();
            assert!(dot(&g_pooled, &rec.pooled).abs() < 1e-10);
        }
    }

    #[test]
    fn precomputed_plugin_reads_vectors() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("emb.tsv");
        fs::write(&path, "a\t0.6 0.8\nb\t1 0\n").unwrap();
        let enc = PrecomputedEncoder::<f64>::from_entity_file(&path).unwrap();
        assert_eq!(enc.dim(), 2);
        fs::write(&path, "a\t0.6 0.8\nb\t1 0 0\n").unwrap();
        assert!(PrecomputedEncoder::<f64>::from_entity_file(&path).is_err());
        fs::write(&path, "a\t3 4\n").unwrap();
        assert!(PrecomputedEncoder::<f64>::from_entity_file(&path).is_err());
    }

    #[test]
    fn f32_encoding_is_unit_norm() {
        let p = EncoderParams::<f32>::init(64, 8, &mut rng(13));
        let rec = encode_tail::<f32, NoRng>(&p, &tokenize("a b c", 64, 50), 0.0, None);
        assert!((l2_norm(&rec.output) - 1.0).abs() < 1e-6);
    }
}
