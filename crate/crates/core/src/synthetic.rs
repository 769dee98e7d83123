//! Generated graphs with a learnable text pattern.
//!
//! Entities form a `groups × slots` grid. Entity `(x, y)` is named `gx<x>`
//! and described as `gx<x> sy<y>`; relation `r` sends `(x, y)` to `(x, r)` for every `y != r`.
//! The tail's description is therefore fully determined by the head's group
//! token and the relation.

use std::fs;
use std::io::{self, Write as _};
use std::path::Path;

use rand::seq::SliceRandom;

use crate::kg::{DatasetPaths, GraphBuilder, KgError, KnowledgeGraph, Split};
use crate::seed::SeedStreams;

#[derive(Debug, Clone, PartialEq)]
pub struct PatternKgConfig {
    pub groups: usize,
    /// Slots per group; also the number of relations.
    pub slots: usize,
    pub valid_fraction: f64,
    pub test_fraction: f64,
    /// Extra tokens shared by every entity of a group, raising the textual
    /// overlap between a head and the other members of its group.
    pub group_filler: usize,
    /// Give every entity its own name token instead of its group token.
    /// Neighbor names then appear in augmented descriptions as entity-specific
    /// tokens.
    pub unique_names: bool,
    pub seed: u64,
}

impl Default for PatternKgConfig {
    fn default() -> Self {
        Self {
            groups: 25,
            slots: 8,
            valid_fraction: 0.1,
            test_fraction: 0.1,
            group_filler: 0,
            unique_names: false,
            seed: 7,
        }
    }
}

pub fn entity_id(x: usize, y: usize) -> String {
    format!("e{x}_{y}")
}

pub fn relation_id(r: usize) -> String {
    format!("r{r}")
}

/// Builds the graph (not inverse-augmented). Every entity keeps at least one
/// training edge.
pub fn pattern_kg(cfg: &PatternKgConfig) -> Result<KnowledgeGraph, KgError> {
    let mut b = GraphBuilder::new();
    for x in 0..cfg.groups {
        for y in 0..cfg.slots {
            let mut desc = format!("gx{x} sy{y}");
            for f in 0..cfg.group_filler {
                desc.push_str(&format!(" g{x}w{f}"));
            }
            let name = if cfg.unique_names {
                format!("n{x}_{y}")
            } else {
                format!("gx{x}")
            };
            b.entity(entity_id(x, y), name, desc)?;
        }
    }
    for r in 0..cfg.slots {
        b.relation(relation_id(r), format!("rel{r}"), format!("rel{r}"))?;
    }
    let mut triples = Vec::new();
    for x in 0..cfg.groups {
        for y in 0..cfg.slots {
            for r in (0..cfg.slots).filter(|&r| r != y) {
                triples.push((x, y, r));
            }
        }
    }
    let mut rng = SeedStreams::new(cfg.seed).stream("synthetic-split");
    triples.shuffle(&mut rng);
    let n = triples.len();
    let n_test = (n as f64 * cfg.test_fraction).round() as usize;
    let n_valid = (n as f64 * cfg.valid_fraction).round() as usize;
    let mut out_degree = vec![0usize; cfg.groups * cfg.slots];
    let mut held = Vec::new();
    let mut train = Vec::new();
    for &(x, y, r) in &triples {
        // keep the first edge of every head in training
        let head = x * cfg.slots + y;
        if held.len() < n_test + n_valid && out_degree[head] > 0 {
            held.push((x, y, r));
        } else {
            out_degree[head] += 1;
            train.push((x, y, r));
        }
    }
    for (i, &(x, y, r)) in held.iter().enumerate() {
        let split = if i < n_test { Split::Test } else { Split::Valid };
        b.triple(split, entity_id(x, y), relation_id(r), entity_id(x, r));
    }
    for &(x, y, r) in &train {
        b.triple(Split::Train, entity_id(x, y), relation_id(r), entity_id(x, r));
    }
    b.build()
}

/// Writes the forward part of `g` as the five TSV files under `dir`.
pub fn write_dataset(g: &KnowledgeGraph, dir: &Path) -> io::Result<DatasetPaths> {
    fs::create_dir_all(dir)?;
    let paths = DatasetPaths {
        train: dir.join("train.tsv"),
        valid: dir.join("valid.tsv"),
        test: dir.join("test.tsv"),
        entities: dir.join("entities.tsv"),
        relations: dir.join("relations.tsv"),
    };
    let mut f = io::BufWriter::new(fs::File::create(&paths.entities)?);
    for e in g.entities() {
        writeln!(f, "{}\t{}\t{}", e.id, e.name, e.description)?;
    }
    f.flush()?;
    let mut f = io::BufWriter::new(fs::File::create(&paths.relations)?);
    for r in g.relations().iter().filter(|r| !r.is_inverse) {
        writeln!(f, "{}\t{}\t{}", r.id, r.description, r.description)?;
    }
    f.flush()?;
    for (split, path) in [
        (Split::Train, &paths.train),
        (Split::Valid, &paths.valid),
        (Split::Test, &paths.test),
    ] {
        let mut f = io::BufWriter::new(fs::File::create(path)?);
        for t in g.triples(split) {
            if g.relation(t.relation).is_inverse {
                continue;
            }
            writeln!(
                f,
                "{}\t{}\t{}",
                g.entity(t.head).id,
                g.relation(t.relation).id,
                g.entity(t.tail).id
            )?;
        }
        f.flush()?;
    }
    Ok(paths)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kg::load_graph;

    #[test]
    fn default_shape() {
        let g = pattern_kg(&PatternKgConfig::default()).unwrap();
        assert_eq!(g.num_entities(), 200);
        assert_eq!(g.num_relations(), 8);
        let total: usize = Split::ALL.iter().map(|&s| g.triples(s).len()).sum();
        assert_eq!(total, 200 * 7);
        assert_eq!(g.triples(Split::Test).len(), 140);
        assert_eq!(g.triples(Split::Valid).len(), 140);
        for e in g.entity_ids() {
            assert!(!g.neighbors(e).is_empty());
        }
    }

    #[test]
    fn tail_follows_pattern() {
        let g = pattern_kg(&PatternKgConfig::default()).unwrap();
        for s in Split::ALL {
            for t in g.triples(s) {
                let head = &g.entity(t.head).description;
                let tail = &g.entity(t.tail).description;
                let r = &g.relation(t.relation).id[1..];
                assert_eq!(head.split(' ').next(), tail.split(' ').next());
                assert_eq!(tail.split(' ').nth(1).unwrap(), format!("sy{r}"));
            }
        }
    }

    #[test]
    fn same_seed_same_split() {
        let cfg = PatternKgConfig::default();
        let a = pattern_kg(&cfg).unwrap();
        let b = pattern_kg(&cfg).unwrap();
        assert_eq!(a.triples(Split::Test), b.triples(Split::Test));
    }

    #[test]
    fn written_files_load_back() {
        let dir = tempfile::tempdir().unwrap();
        let g = pattern_kg(&PatternKgConfig {
            groups: 3,
            slots: 3,
            group_filler: 2,
            ..Default::default()
        })
        .unwrap();
        let paths = write_dataset(&g, dir.path()).unwrap();
        let back = load_graph(&paths).unwrap();
        assert_eq!(back.num_entities(), 9);
        for s in Split::ALL {
            assert_eq!(back.triples(s), g.triples(s));
        }
        assert_eq!(back.entity(back.entity_id("e1_2").unwrap()).description, "gx1 sy2 g1w0 g1w1");
    }
}
