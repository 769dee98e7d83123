//! Filtered entity ranking.
//!
//! Every entity is encoded once by the candidate tower into an
//! [`EntityEmbeddingIndex`]. Each test triple `(h, r, t)` is ranked twice:
//! as `(h, r, ?)` and, through the inverse relation, as `(t, r⁻¹, ?)`.
//! Known true answers other than the target are removed before ranking, and
//! ties count half (`rank = 1 + #greater + #equal / 2`).

use std::collections::{BTreeMap, BTreeSet};

use ndarray::Array2;
use rayon::prelude::*;
use serde::Serialize;
use thiserror::Error;

use crate::encoder::{CountingEncoder, Encoder, EncoderError};
use crate::kg::{EntityId, KgError, KnowledgeGraph, RelationCategory, RelationId, Split, Triple};
use crate::scalar::{dot, Scalar};

pub const DEFAULT_ALPHA: f64 = 0.05;
pub const DEFAULT_HOPS: usize = 2;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("graph must be inverse-augmented for evaluation")]
    NotAugmented,
    #[error("k must be ≥ 1")]
    ZeroK,
    #[error("encoder returned a {got}-dimensional vector, index is {expected}-dimensional")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("re-ranking weight must be non-negative and hop count >= 1")]
    BadRerank,
    #[error(transparent)]
    Graph(#[from] KgError),
    #[error(transparent)]
    Encoder(#[from] EncoderError),
}

/// Candidate-tower embeddings of all entities, one unit row per entity.
#[derive(Debug, Clone, PartialEq)]
pub struct EntityEmbeddingIndex<S> {
    pub ids: Vec<EntityId>,
    pub matrix: Array2<S>,
}

impl<S: Scalar> EntityEmbeddingIndex<S> {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.matrix.ncols()
    }

    pub fn row(&self, e: EntityId) -> &[S] {
        self.matrix
            .row(e.index())
            .to_slice()
            .expect("index matrix is standard layout")
    }

    /// Cosine score of every entity against `query`.
    pub fn scores(&self, query: &[S]) -> Vec<S> {
        self.matrix
            .outer_iter()
            .map(|row| dot(row.as_slice().expect("standard layout"), query))
            .collect()
    }
}

/// Encodes every entity once with `enc`.
pub fn build_index<S: Scalar, E: Encoder<S>>(
    g: &KnowledgeGraph,
    enc: &E,
) -> Result<EntityEmbeddingIndex<S>, EvalError> {
    let dim = enc.dim();
    let ids: Vec<EntityId> = g.entity_ids().collect();
    let rows: Vec<Vec<S>> = ids
        .par_iter()
        .map(|&e| enc.encode_entity(g, e))
        .collect::<Result<_, _>>()?;
    let mut matrix = Array2::<S>::zeros((ids.len(), dim));
    for (i, v) in rows.iter().enumerate() {
        if v.len() != dim {
            return Err(EvalError::DimensionMismatch {
                expected: dim,
                got: v.len(),
            });
        }
        matrix.row_mut(i).iter_mut().zip(v).for_each(|(d, &x)| *d = x);
    }
    Ok(EntityEmbeddingIndex { ids, matrix })
}

/// Graph-neighborhood boost.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RerankConfig {
    pub alpha: f64,
    pub hops: usize,
}

impl Default for RerankConfig {
    fn default() -> Self {
        Self {
            alpha: DEFAULT_ALPHA,
            hops: DEFAULT_HOPS,
        }
    }
}

impl RerankConfig {
    fn validate(&self) -> Result<(), EvalError> {
        if self.alpha >= 0.0 && self.alpha.is_finite() && self.hops >= 1 {
            Ok(())
        } else {
            Err(EvalError::BadRerank)
        }
    }

    fn is_active(rr: Option<&RerankConfig>) -> bool {
        rr.is_some_and(|r| r.alpha > 0.0)
    }
}

/// Adds `alpha` to the score of every entity in `neighbors`.
pub fn rerank_scores<S: Scalar>(
    mut scores: Vec<S>,
    neighbors: &BTreeSet<EntityId>,
    alpha: f64,
) -> Vec<S> {
    let a = S::of(alpha);
    for e in neighbors {
        if let Some(s) = scores.get_mut(e.index()) {
            *s += a;
        }
    }
    scores
}

fn apply_rerank<S: Scalar>(
    g: &KnowledgeGraph,
    scores: Vec<S>,
    head: EntityId,
    rr: Option<&RerankConfig>,
) -> Result<Vec<S>, EvalError> {
    match rr {
        Some(cfg) if cfg.alpha > 0.0 => {
            cfg.validate()?;
            // heads without training edges have an empty neighborhood
            let hood = g.k_hop_neighbors(head, cfg.hops)?;
            Ok(rerank_scores(scores, &hood, cfg.alpha))
        }
        Some(cfg) => cfg.validate().map(|_| scores),
        None => Ok(scores),
    }
}

/// Mean-tie filtered rank of `target`. `known` lists (sorted by index) the
/// candidates to discard; the target itself is never discarded.
pub fn filtered_rank<S: Scalar>(scores: &[S], target: EntityId, known: &[EntityId]) -> f64 {
    let ts = scores[target.index()];
    let mut greater = 0usize;
    let mut equal = 0usize;
    let mut k = 0;
    for (i, &s) in scores.iter().enumerate() {
        while k < known.len() && known[k].index() < i {
            k += 1;
        }
        if i == target.index() || (k < known.len() && known[k].index() == i) {
            continue;
        }
        if s > ts {
            greater += 1;
        } else if s == ts {
            equal += 1;
        }
    }
    1.0 + greater as f64 + equal as f64 / 2.0
}

/// Filtered rank of `triple.tail` for the query embedding `query`.
pub fn rank_with_query<S: Scalar>(
    g: &KnowledgeGraph,
    idx: &EntityEmbeddingIndex<S>,
    query: &[S],
    triple: &Triple,
    rr: Option<&RerankConfig>,
) -> Result<f64, EvalError> {
    if query.len() != idx.dim() {
        return Err(EvalError::DimensionMismatch {
            expected: idx.dim(),
            got: query.len(),
        });
    }
    let scores = apply_rerank(g, idx.scores(query), triple.head, rr)?;
    let known = g.filter_index().tails(triple.head, triple.relation);
    Ok(filtered_rank(&scores, triple.tail, known))
}

fn check_ids(g: &KnowledgeGraph, t: &Triple) -> Result<(), EvalError> {
    for e in [t.head, t.tail] {
        if e.index() >= g.num_entities() {
            return Err(KgError::UnknownEntity(format!("#{}", e.0)).into());
        }
    }
    if t.relation.index() >= g.num_relations() {
        return Err(KgError::UnknownRelation(format!("#{}", t.relation.0)).into());
    }
    Ok(())
}

/// Filtered rank of `triple.tail` for the tail-prediction query `(h, r, ?)`.
pub fn rank_one<S: Scalar, E: Encoder<S>>(
    g: &KnowledgeGraph,
    idx: &EntityEmbeddingIndex<S>,
    enc: &E,
    triple: &Triple,
    rr: Option<&RerankConfig>,
) -> Result<f64, EvalError> {
    check_ids(g, triple)?;
    let query = enc.encode_query(g, triple.head, triple.relation)?;
    rank_with_query(g, idx, &query, triple, rr)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Direction {
    /// `(h, r, ?)`
    Tail,
    /// `(t, r⁻¹, ?)`
    Head,
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize)]
pub struct Metrics {
    pub mrr: f64,
    pub hits1: f64,
    pub hits3: f64,
    pub hits10: f64,
}

impl Metrics {
    pub fn from_ranks(ranks: impl IntoIterator<Item = f64>) -> Self {
        let mut n = 0usize;
        let mut m = Metrics::default();
        for r in ranks {
            n += 1;
            m.mrr += 1.0 / r;
            m.hits1 += f64::from(u8::from(r <= 1.0));
            m.hits3 += f64::from(u8::from(r <= 3.0));
            m.hits10 += f64::from(u8::from(r <= 10.0));
        }
        if n > 0 {
            let n = n as f64;
            m.mrr /= n;
            m.hits1 /= n;
            m.hits3 /= n;
            m.hits10 /= n;
        }
        m
    }

    fn mean(a: &Metrics, b: &Metrics) -> Metrics {
        Metrics {
            mrr: (a.mrr + b.mrr) / 2.0,
            hits1: (a.hits1 + b.hits1) / 2.0,
            hits3: (a.hits3 + b.hits3) / 2.0,
            hits10: (a.hits10 + b.hits10) / 2.0,
        }
    }
}

/// One ranked query.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RankedQuery {
    /// The forward test triple this query came from.
    pub triple: Triple,
    pub direction: Direction,
    pub rank: f64,
    /// Category of the forward relation; `None` if it never occurs in training.
    pub category: Option<RelationCategory>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RankingResult {
    pub queries: Vec<RankedQuery>,
    pub tail: Metrics,
    pub head: Metrics,
    /// Mean of the two directional metric sets.
    pub overall: Metrics,
    pub forward_passes: u64,
    /// Whether a non-zero neighborhood boost was applied.
    pub reranked: bool,
}

impl RankingResult {
    pub fn from_queries(queries: Vec<RankedQuery>, forward_passes: u64, reranked: bool) -> Self {
        let by = |d: Direction| {
            Metrics::from_ranks(queries.iter().filter(|q| q.direction == d).map(|q| q.rank))
        };
        let tail = by(Direction::Tail);
        let head = by(Direction::Head);
        Self {
            overall: Metrics::mean(&tail, &head),
            tail,
            head,
            queries,
            forward_passes,
            reranked,
        }
    }

    pub fn report(&self) -> EvalReport {
        EvalReport {
            mrr: self.overall.mrr,
            hits1: self.overall.hits1,
            hits3: self.overall.hits3,
            hits10: self.overall.hits10,
            tail: self.tail,
            head: self.head,
            by_category: breakdown_by_category(self)
                .into_iter()
                .map(|(c, m)| (c.as_str().to_owned(), m))
                .collect(),
            forward_passes: self.forward_passes,
            reranked: self.reranked,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct CategoryMetrics {
    /// Number of ranked queries (both directions) in the group.
    pub queries: usize,
    pub mrr: f64,
}

/// Serialized evaluation report.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EvalReport {
    pub mrr: f64,
    pub hits1: f64,
    pub hits3: f64,
    pub hits10: f64,
    pub tail: Metrics,
    pub head: Metrics,
    pub by_category: BTreeMap<String, CategoryMetrics>,
    pub forward_passes: u64,
    pub reranked: bool,
}

/// Ranks every forward test triple in both directions.
pub fn evaluate<S: Scalar, E: Encoder<S>>(
    g: &KnowledgeGraph,
    idx: &EntityEmbeddingIndex<S>,
    enc: &E,
    rr: Option<&RerankConfig>,
) -> Result<RankingResult, EvalError> {
    if !g.is_augmented() {
        return Err(EvalError::NotAugmented);
    }
    if let Some(cfg) = rr {
        cfg.validate()?;
    }
    let categories = g.relation_categories();
    let forward: Vec<Triple> = g
        .triples(Split::Test)
        .iter()
        .filter(|t| !g.relation(t.relation).is_inverse)
        .copied()
        .collect();
    let counted = CountingEncoder::new(enc);
    let queries: Vec<RankedQuery> = forward
        .par_iter()
        .flat_map_iter(|t| {
            let inv = g.inverse_of(t.relation).expect("augmented graph");
            let category = categories.get(&t.relation).copied();
            [
                (Direction::Tail, *t),
                (Direction::Head, Triple::new(t.tail, inv, t.head)),
            ]
            .into_iter()
            .map(move |(direction, q)| (direction, q, *t, category))
        })
        .map(|(direction, q, t, category)| {
            rank_one(g, idx, &counted, &q, rr).map(|rank| RankedQuery {
                triple: t,
                direction,
                rank,
                category,
            })
        })
        .collect::<Result<_, _>>()?;
    Ok(RankingResult::from_queries(
        queries,
        counted.count(),
        RerankConfig::is_active(rr),
    ))
}

/// Builds the index and evaluates; `forward_passes` covers both stages.
pub fn run_evaluation<S: Scalar, E: Encoder<S>>(
    g: &KnowledgeGraph,
    enc: &E,
    rr: Option<&RerankConfig>,
) -> Result<(EntityEmbeddingIndex<S>, RankingResult), EvalError> {
    let counted = CountingEncoder::new(enc);
    let idx = build_index(g, &counted)?;
    let mut result = evaluate(g, &idx, &counted, rr)?;
    result.forward_passes = counted.count();
    Ok((idx, result))
}

/// MRR per forward-relation category; empty groups are omitted.
pub fn breakdown_by_category(result: &RankingResult) -> BTreeMap<RelationCategory, CategoryMetrics> {
    let mut groups: BTreeMap<RelationCategory, (usize, f64)> = BTreeMap::new();
    for q in &result.queries {
        if let Some(c) = q.category {
            let e = groups.entry(c).or_default();
            e.0 += 1;
            e.1 += 1.0 / q.rank;
        }
    }
    groups
        .into_iter()
        .map(|(c, (n, sum))| {
            (
                c,
                CategoryMetrics {
                    queries: n,
                    mrr: sum / n as f64,
                },
            )
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct Prediction<S> {
    pub entity: EntityId,
    pub score: S,
    /// `(h, r, entity)` is a known triple.
    pub known: bool,
}

/// Unfiltered top-`k` answers for `(head, relation, ?)`, best first; ties
/// go to the smaller entity id.
pub fn predict_topk<S: Scalar, E: Encoder<S>>(
    g: &KnowledgeGraph,
    idx: &EntityEmbeddingIndex<S>,
    enc: &E,
    head: EntityId,
    relation: RelationId,
    k: usize,
    rr: Option<&RerankConfig>,
) -> Result<Vec<Prediction<S>>, EvalError> {
    if k == 0 {
        return Err(EvalError::ZeroK);
    }
    check_ids(g, &Triple::new(head, relation, head))?;
    let query = enc.encode_query(g, head, relation)?;
    if query.len() != idx.dim() {
        return Err(EvalError::DimensionMismatch {
            expected: idx.dim(),
            got: query.len(),
        });
    }
    let scores = apply_rerank(g, idx.scores(&query), head, rr)?;
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| {
        scores[b]
            .partial_cmp(&scores[a])
            .unwrap_or(std::cmp::Ordering::Equal)
            .then_with(|| g.entities()[a].id.cmp(&g.entities()[b].id))
    });
    Ok(order
        .into_iter()
        .take(k)
        .map(|i| {
            let e = EntityId(i as u32);
            Prediction {
                entity: e,
                score: scores[i],
                known: g.is_known_triple(&Triple::new(head, relation, e)),
            }
        })
        .collect())
}
