//! Knowledge graph storage: entities, relations, split triples and the
//! indexes built over them (undirected train adjacency, known-triple filter).
//!
//! Ids from the input files are interned into dense [`EntityId`] /
//! [`RelationId`] indices. The graph is immutable once built; the only
//! transformation is [`KnowledgeGraph::add_inverse_triples`], which returns
//! a new graph.

use std::collections::{BTreeSet, HashMap, HashSet, VecDeque};
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use serde::Serialize;
use thiserror::Error;

/// Threshold on mean tails-per-head / heads-per-tail separating "1" from "n".
pub const CARDINALITY_THRESHOLD: f64 = 1.5;

/// Descriptions with at least this many whitespace tokens are not augmented
/// with neighbor names.
pub const SHORT_DESCRIPTION_TOKENS: usize = 20;

const INVERSE_PREFIX: &str = "inverse ";
const INVERSE_ID_SUFFIX: &str = "^-1";

#[derive(Debug, Error)]
pub enum KgError {
    #[error("failed to read {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}:{line}: {message}")]
    Parse {
        path: PathBuf,
        line: usize,
        message: String,
    },
    #[error("triples reference unknown ids: {}", .ids.join(", "))]
    UnknownIds { ids: Vec<String> },
    #[error("duplicate {kind} id {id:?}")]
    DuplicateId { kind: &'static str, id: String },
    #[error("entity {0:?} has an empty name")]
    EmptyName(String),
    #[error("graph already contains inverse triples")]
    AlreadyAugmented,
    #[error("inverse relation id {0:?} collides with an existing relation")]
    InverseIdCollision(String),
    #[error("unknown entity {0:?}")]
    UnknownEntity(String),
    #[error("unknown relation {0:?}")]
    UnknownRelation(String),
    #[error("relation {0:?} has no training triples")]
    NoTrainOccurrences(String),
    #[error("hop count must be at least 1")]
    ZeroHops,
}

pub type Result<T, E = KgError> = std::result::Result<T, E>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct EntityId(pub u32);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct RelationId(pub u32);

impl EntityId {
    pub fn index(self) -> usize {
        self.0 as usize
    }
}

impl RelationId {
    pub fn index(self) -> usize {
        self.0 as usize
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Entity {
    pub id: String,
    pub name: String,
    pub description: String,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Relation {
    pub id: String,
    pub description: String,
    pub is_inverse: bool,
    /// Forward relation id, set iff `is_inverse`.
    pub forward_id: Option<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Triple {
    pub head: EntityId,
    pub relation: RelationId,
    pub tail: EntityId,
}

impl Triple {
    pub fn new(head: EntityId, relation: RelationId, tail: EntityId) -> Self {
        Self {
            head,
            relation,
            tail,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Split {
    Train,
    Valid,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Valid, Split::Test];

    fn slot(self) -> usize {
        match self {
            Split::Train => 0,
            Split::Valid => 1,
            Split::Test => 2,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize)]
pub enum RelationCategory {
    #[serde(rename = "1-1")]
    OneToOne,
    #[serde(rename = "1-n")]
    OneToMany,
    #[serde(rename = "n-1")]
    ManyToOne,
    #[serde(rename = "n-n")]
    ManyToMany,
}

impl RelationCategory {
    pub fn as_str(self) -> &'static str {
        match self {
            RelationCategory::OneToOne => "1-1",
            RelationCategory::OneToMany => "1-n",
            RelationCategory::ManyToOne => "n-1",
            RelationCategory::ManyToMany => "n-n",
        }
    }

    fn from_cardinalities(tails_per_head: f64, heads_per_tail: f64, threshold: f64) -> Self {
        match (tails_per_head >= threshold, heads_per_tail >= threshold) {
            (false, false) => RelationCategory::OneToOne,
            (true, false) => RelationCategory::OneToMany,
            (false, true) => RelationCategory::ManyToOne,
            (true, true) => RelationCategory::ManyToMany,
        }
    }
}

impl fmt::Display for RelationCategory {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Summary of what loading did, serialized as one JSON object.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct LoadReport {
    pub train: usize,
    pub valid: usize,
    pub test: usize,
    /// Exact duplicates dropped within a split.
    pub deduplicated: usize,
    /// Triples present in more than one split (kept).
    pub cross_split_duplicates: usize,
    pub unknown_ids: usize,
}

/// Membership set over known triples, keyed by query `(head, relation)`.
#[derive(Debug, Clone, Default)]
pub struct FilterIndex {
    tails: HashMap<(EntityId, RelationId), Vec<EntityId>>,
    len: usize,
}

impl FilterIndex {
    fn from_triples<'a>(triples: impl IntoIterator<Item = &'a Triple>) -> Self {
        let mut sets: HashMap<(EntityId, RelationId), BTreeSet<EntityId>> = HashMap::new();
        for t in triples {
            sets.entry((t.head, t.relation)).or_default().insert(t.tail);
        }
        let len = sets.values().map(BTreeSet::len).sum();
        let tails = sets
            .into_iter()
            .map(|(k, v)| (k, v.into_iter().collect()))
            .collect();
        Self { tails, len }
    }

    pub fn contains(&self, t: &Triple) -> bool {
        self.tails
            .get(&(t.head, t.relation))
            .is_some_and(|v| v.binary_search(&t.tail).is_ok())
    }

    /// Known tails for the query `(head, relation)`, sorted by index.
    pub fn tails(&self, head: EntityId, relation: RelationId) -> &[EntityId] {
        self.tails
            .get(&(head, relation))
            .map(Vec::as_slice)
            .unwrap_or(&[])
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }
}

/// Paths of the five dataset files.
#[derive(Debug, Clone)]
pub struct DatasetPaths {
    pub train: PathBuf,
    pub valid: PathBuf,
    pub test: PathBuf,
    pub entities: PathBuf,
    pub relations: PathBuf,
}

#[derive(Debug, Clone)]
pub struct KnowledgeGraph {
    entities: Vec<Entity>,
    entity_index: HashMap<String, EntityId>,
    relations: Vec<Relation>,
    relation_index: HashMap<String, RelationId>,
    splits: [Vec<Triple>; 3],
    /// Undirected view of the train split: (relation, neighbor) per entity.
    adjacency: Vec<Vec<(RelationId, EntityId)>>,
    /// Distinct undirected train neighbors, self excluded, sorted by entity id string.
    neighbors: Vec<Vec<EntityId>>,
    filter: FilterIndex,
    train_filter: FilterIndex,
    augmented: bool,
    report: LoadReport,
}

/// Incremental constructor working on string ids.
#[derive(Debug, Default)]
pub struct GraphBuilder {
    entities: Vec<Entity>,
    entity_index: HashMap<String, EntityId>,
    relations: Vec<Relation>,
    relation_index: HashMap<String, RelationId>,
    raw: [Vec<(String, String, String)>; 3],
}

impl GraphBuilder {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn entity(
        &mut self,
        id: impl Into<String>,
        name: impl Into<String>,
        description: impl Into<String>,
    ) -> Result<&mut Self> {
        let id = id.into();
        let name = name.into();
        if name.trim().is_empty() {
            return Err(KgError::EmptyName(id));
        }
        if self.entity_index.contains_key(&id) {
            return Err(KgError::DuplicateId { kind: "entity", id });
        }
        let idx = EntityId(self.entities.len() as u32);
        self.entity_index.insert(id.clone(), idx);
        self.entities.push(Entity {
            id,
            name,
            description: description.into(),
        });
        Ok(self)
    }

    /// Adds a forward relation. An empty description falls back to `name`.
    pub fn relation(
        &mut self,
        id: impl Into<String>,
        name: impl Into<String>,
        description: impl Into<String>,
    ) -> Result<&mut Self> {
        let id = id.into();
        if self.relation_index.contains_key(&id) {
            return Err(KgError::DuplicateId {
                kind: "relation",
                id,
            });
        }
        let description = description.into();
        let description = if description.trim().is_empty() {
            name.into()
        } else {
            description
        };
        let idx = RelationId(self.relations.len() as u32);
        self.relation_index.insert(id.clone(), idx);
        self.relations.push(Relation {
            id,
            description,
            is_inverse: false,
            forward_id: None,
        });
        Ok(self)
    }

    pub fn triple(
        &mut self,
        split: Split,
        head: impl Into<String>,
        relation: impl Into<String>,
        tail: impl Into<String>,
    ) -> &mut Self {
        self.raw[split.slot()].push((head.into(), relation.into(), tail.into()));
        self
    }

    pub fn build(self) -> Result<KnowledgeGraph> {
        let mut unknown = BTreeSet::new();
        let mut unknown_refs = 0usize;
        let mut report = LoadReport::default();
        let mut splits: [Vec<Triple>; 3] = Default::default();
        for (slot, raw) in self.raw.iter().enumerate() {
            let mut seen = HashSet::new();
            for (h, r, t) in raw {
                let head = self.entity_index.get(h);
                let rel = self.relation_index.get(r);
                let tail = self.entity_index.get(t);
                let mut bad = false;
                for (id, ok) in [(h, head.is_some()), (r, rel.is_some()), (t, tail.is_some())] {
                    if !ok {
                        unknown.insert(id.clone());
                        bad = true;
                    }
                }
                if bad {
                    unknown_refs += 1;
                    continue;
                }
                let triple = Triple::new(*head.unwrap(), *rel.unwrap(), *tail.unwrap());
                if seen.insert(triple) {
                    splits[slot].push(triple);
                } else {
                    report.deduplicated += 1;
                }
            }
        }
        if !unknown.is_empty() {
            return Err(KgError::UnknownIds {
                ids: unknown.into_iter().collect(),
            });
        }
        debug_assert_eq!(unknown_refs, 0);
        let mut in_split: HashMap<Triple, usize> = HashMap::new();
        for split in &splits {
            for t in split {
                *in_split.entry(*t).or_default() += 1;
            }
        }
        report.cross_split_duplicates = in_split.values().filter(|&&c| c > 1).count();
        report.train = splits[0].len();
        report.valid = splits[1].len();
        report.test = splits[2].len();
        Ok(KnowledgeGraph::assemble(
            self.entities,
            self.entity_index,
            self.relations,
            self.relation_index,
            splits,
            false,
            report,
        ))
    }
}

impl KnowledgeGraph {
    pub fn builder() -> GraphBuilder {
        GraphBuilder::new()
    }

    fn assemble(
        entities: Vec<Entity>,
        entity_index: HashMap<String, EntityId>,
        relations: Vec<Relation>,
        relation_index: HashMap<String, RelationId>,
        splits: [Vec<Triple>; 3],
        augmented: bool,
        report: LoadReport,
    ) -> Self {
        let n = entities.len();
        let mut adjacency: Vec<Vec<(RelationId, EntityId)>> = vec![Vec::new(); n];
        for t in &splits[0] {
            adjacency[t.head.index()].push((t.relation, t.tail));
            if t.head != t.tail {
                adjacency[t.tail.index()].push((t.relation, t.head));
            }
        }
        let neighbors = adjacency
            .iter()
            .enumerate()
            .map(|(e, adj)| {
                let mut ns: Vec<EntityId> = adj
                    .iter()
                    .map(|&(_, x)| x)
                    .filter(|x| x.index() != e)
                    .collect::<BTreeSet<_>>()
                    .into_iter()
                    .collect();
                ns.sort_by(|a, b| entities[a.index()].id.cmp(&entities[b.index()].id));
                ns
            })
            .collect();
        let filter = FilterIndex::from_triples(splits.iter().flatten());
        let train_filter = FilterIndex::from_triples(&splits[0]);
        Self {
            entities,
            entity_index,
            relations,
            relation_index,
            splits,
            adjacency,
            neighbors,
            filter,
            train_filter,
            augmented,
            report,
        }
    }

    pub fn num_entities(&self) -> usize {
        self.entities.len()
    }

    pub fn num_relations(&self) -> usize {
        self.relations.len()
    }

    pub fn entity(&self, e: EntityId) -> &Entity {
        &self.entities[e.index()]
    }

    pub fn relation(&self, r: RelationId) -> &Relation {
        &self.relations[r.index()]
    }

    pub fn entities(&self) -> &[Entity] {
        &self.entities
    }

    pub fn relations(&self) -> &[Relation] {
        &self.relations
    }

    pub fn entity_ids(&self) -> impl ExactSizeIterator<Item = EntityId> {
        (0..self.entities.len() as u32).map(EntityId)
    }

    pub fn entity_id(&self, id: &str) -> Result<EntityId> {
        self.entity_index
            .get(id)
            .copied()
            .ok_or_else(|| KgError::UnknownEntity(id.to_owned()))
    }

    pub fn relation_id(&self, id: &str) -> Result<RelationId> {
        self.relation_index
            .get(id)
            .copied()
            .ok_or_else(|| KgError::UnknownRelation(id.to_owned()))
    }

    /// Resolves a string-id triple.
    pub fn resolve(&self, head: &str, relation: &str, tail: &str) -> Result<Triple> {
        Ok(Triple::new(
            self.entity_id(head)?,
            self.relation_id(relation)?,
            self.entity_id(tail)?,
        ))
    }

    pub fn triples(&self, split: Split) -> &[Triple] {
        &self.splits[split.slot()]
    }

    pub fn is_augmented(&self) -> bool {
        self.augmented
    }

    pub fn load_report(&self) -> &LoadReport {
        &self.report
    }

    pub fn adjacency(&self, e: EntityId) -> &[(RelationId, EntityId)] {
        &self.adjacency[e.index()]
    }

    /// Distinct one-hop train neighbors (undirected), sorted by entity id.
    pub fn neighbors(&self, e: EntityId) -> &[EntityId] {
        &self.neighbors[e.index()]
    }

    /// Known triples over train ∪ valid ∪ test.
    pub fn filter_index(&self) -> &FilterIndex {
        &self.filter
    }

    /// Known triples over the train split only.
    pub fn train_index(&self) -> &FilterIndex {
        &self.train_filter
    }

    pub fn is_known_triple(&self, t: &Triple) -> bool {
        self.filter.contains(t)
    }

    /// Inverse of relation `r`, once the graph is augmented.
    pub fn inverse_of(&self, r: RelationId) -> Option<RelationId> {
        if !self.augmented {
            return None;
        }
        let n = self.relations.len() / 2;
        let i = r.index();
        Some(RelationId(if i < n { i + n } else { i - n } as u32))
    }

    /// Returns a new graph where every `(h, r, t)` in every split is joined
    /// by `(t, r⁻¹, h)`. Inverse relations carry the `"inverse "` description
    /// prefix and the id `"<id>^-1"`.
    pub fn add_inverse_triples(&self) -> Result<KnowledgeGraph> {
        if self.augmented || self.relations.iter().any(|r| r.is_inverse) {
            return Err(KgError::AlreadyAugmented);
        }
        let n = self.relations.len() as u32;
        let mut relations = self.relations.clone();
        let mut relation_index = self.relation_index.clone();
        for (i, r) in self.relations.iter().enumerate() {
            let inv_id = format!("{}{INVERSE_ID_SUFFIX}", r.id);
            if relation_index.contains_key(&inv_id) {
                return Err(KgError::InverseIdCollision(inv_id));
            }
            relation_index.insert(inv_id.clone(), RelationId(n + i as u32));
            relations.push(Relation {
                id: inv_id,
                description: format!("{INVERSE_PREFIX}{}", r.description),
                is_inverse: true,
                forward_id: Some(r.id.clone()),
            });
        }
        let splits = self.splits.clone().map(|split| {
            let inverse: Vec<Triple> = split
                .iter()
                .map(|t| Triple::new(t.tail, RelationId(t.relation.0 + n), t.head))
                .collect();
            split.into_iter().chain(inverse).collect::<Vec<_>>()
        });
        let mut report = self.report.clone();
        report.train = splits[0].len();
        report.valid = splits[1].len();
        report.test = splits[2].len();
        Ok(KnowledgeGraph::assemble(
            self.entities.clone(),
            self.entity_index.clone(),
            relations,
            relation_index,
            splits,
            true,
            report,
        ))
    }

    /// Entities at undirected train-graph distance 1..=k from `e`.
    pub fn k_hop_neighbors(&self, e: EntityId, k: usize) -> Result<BTreeSet<EntityId>> {
        if e.index() >= self.entities.len() {
            return Err(KgError::UnknownEntity(format!("#{}", e.0)));
        }
        if k == 0 {
            return Err(KgError::ZeroHops);
        }
        let mut dist: HashMap<EntityId, usize> = HashMap::from([(e, 0)]);
        let mut frontier = VecDeque::from([e]);
        let mut out = BTreeSet::new();
        while let Some(v) = frontier.pop_front() {
            let d = dist[&v];
            if d == k {
                continue;
            }
            for &w in &self.neighbors[v.index()] {
                if let std::collections::hash_map::Entry::Vacant(slot) = dist.entry(w) {
                    slot.insert(d + 1);
                    out.insert(w);
                    frontier.push_back(w);
                }
            }
        }
        Ok(out)
    }

    /// Cardinality class of `r` with the default threshold.
    pub fn classify_relation(&self, r: RelationId) -> Result<RelationCategory> {
        self.classify_relation_with(r, CARDINALITY_THRESHOLD)
    }

    pub fn classify_relation_with(
        &self,
        r: RelationId,
        threshold: f64,
    ) -> Result<RelationCategory> {
        if r.index() >= self.relations.len() {
            return Err(KgError::UnknownRelation(format!("#{}", r.0)));
        }
        let mut tails_of: HashMap<EntityId, usize> = HashMap::new();
        let mut heads_of: HashMap<EntityId, usize> = HashMap::new();
        for t in self.triples(Split::Train).iter().filter(|t| t.relation == r) {
            *tails_of.entry(t.head).or_default() += 1;
            *heads_of.entry(t.tail).or_default() += 1;
        }
        if tails_of.is_empty() {
            return Err(KgError::NoTrainOccurrences(self.relations[r.index()].id.clone()));
        }
        let count: usize = tails_of.values().sum();
        let tph = count as f64 / tails_of.len() as f64;
        let hpt = count as f64 / heads_of.len() as f64;
        Ok(RelationCategory::from_cardinalities(tph, hpt, threshold))
    }

    /// Categories of every relation seen in training; forward relations only.
    pub fn relation_categories(&self) -> HashMap<RelationId, RelationCategory> {
        (0..self.relations.len() as u32)
            .map(RelationId)
            .filter(|r| !self.relations[r.index()].is_inverse)
            .filter_map(|r| self.classify_relation(r).ok().map(|c| (r, c)))
            .collect()
    }

    /// Text fed to the encoders for entity `e`.
    ///
    /// Short descriptions are followed by the names of one-hop train
    /// neighbors, sorted by id, with `exclude` left out.
    pub fn augment_description(&self, e: EntityId, exclude: Option<EntityId>) -> Result<String> {
        let entity = self
            .entities
            .get(e.index())
            .ok_or_else(|| KgError::UnknownEntity(format!("#{}", e.0)))?;
        if entity.description.split_whitespace().count() >= SHORT_DESCRIPTION_TOKENS {
            return Ok(entity.description.clone());
        }
        let mut text = if entity.description.trim().is_empty() {
            entity.name.clone()
        } else {
            entity.description.clone()
        };
        for &n in &self.neighbors[e.index()] {
            if Some(n) == exclude {
                continue;
            }
            text.push(' ');
            text.push_str(&self.entities[n.index()].name);
        }
        Ok(text)
    }
}

fn read_lines(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|source| KgError::Io {
        path: path.to_owned(),
        source,
    })
}

fn data_lines(text: &str) -> impl Iterator<Item = (usize, &str)> {
    text.lines()
        .enumerate()
        .map(|(i, l)| (i + 1, l.trim_end_matches('\r')))
        .filter(|(_, l)| !l.trim().is_empty())
}

fn parse_descriptions(path: &Path) -> Result<Vec<(usize, String, String, String)>> {
    let text = read_lines(path)?;
    data_lines(&text)
        .map(|(line, l)| {
            let fields: Vec<&str> = l.splitn(3, '\t').collect();
            if fields.len() < 2 {
                return Err(KgError::Parse {
                    path: path.to_owned(),
                    line,
                    message: format!(
                        "expected id<TAB>name<TAB>description, found {} field(s)",
                        fields.len()
                    ),
                });
            }
            Ok((
                line,
                fields[0].to_owned(),
                fields[1].to_owned(),
                fields.get(2).copied().unwrap_or("").to_owned(),
            ))
        })
        .collect()
}

fn parse_triples(path: &Path) -> Result<Vec<(String, String, String)>> {
    let text = read_lines(path)?;
    data_lines(&text)
        .map(|(line, l)| {
            let fields: Vec<&str> = l.split('\t').collect();
            match fields.as_slice() {
                [h, r, t] => Ok(((*h).to_owned(), (*r).to_owned(), (*t).to_owned())),
                _ => Err(KgError::Parse {
                    path: path.to_owned(),
                    line,
                    message: format!(
                        "expected head<TAB>relation<TAB>tail, found {} field(s)",
                        fields.len()
                    ),
                }),
            }
        })
        .collect()
}

/// Loads and validates a dataset. The returned graph is not inverse-augmented.
pub fn load_graph(paths: &DatasetPaths) -> Result<KnowledgeGraph> {
    let mut b = GraphBuilder::new();
    for (line, id, name, desc) in parse_descriptions(&paths.entities)? {
        b.entity(id, name, desc).map_err(|e| KgError::Parse {
            path: paths.entities.clone(),
            line,
            message: e.to_string(),
        })?;
    }
    for (line, id, name, desc) in parse_descriptions(&paths.relations)? {
        b.relation(id, name, desc).map_err(|e| KgError::Parse {
            path: paths.relations.clone(),
            line,
            message: e.to_string(),
        })?;
    }
    for (split, path) in [
        (Split::Train, &paths.train),
        (Split::Valid, &paths.valid),
        (Split::Test, &paths.test),
    ] {
        for (h, r, t) in parse_triples(path)? {
            b.triple(split, h, r, t);
        }
    }
    b.build()
}
