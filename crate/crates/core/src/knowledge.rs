//! Offline commonsense knowledge: relation triples and word embeddings.
//!
//! The snapshot is a TSV file with columns `relation subject concept weight`
//! and `#` comment lines. Only `AtLocation` and `UsedFor` relations are
//! accepted. The embedding table is a text file whose first line is the
//! dimension, followed by one `token v1 .. vD` line per token.

use std::collections::{HashMap, HashSet};
use std::fmt::Write as _;
use std::path::Path;
use std::sync::Mutex;

use thiserror::Error;

use crate::graph::EdgeKind;

/// Concepts must exceed this weight to be linked into a graph.
pub const MIN_CONCEPT_WEIGHT: f64 = 1.0;

#[derive(Debug, Error)]
pub enum KnowledgeError {
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("line {line}: unknown relation `{relation}` (expected AtLocation or UsedFor)")]
    UnknownRelation { line: usize, relation: String },
}

#[derive(Debug, Clone, PartialEq)]
pub struct Triple {
    pub relation: EdgeKind,
    pub subject: String,
    pub concept: String,
    pub weight: f64,
}

/// Immutable set of (relation, subject, concept, weight) triples.
#[derive(Debug, Clone, Default)]
pub struct KnowledgeSnapshot {
    triples: Vec<Triple>,
    keys: HashMap<(EdgeKind, String, String), usize>,
    by_subject: HashMap<(EdgeKind, String), Vec<usize>>,
}

impl KnowledgeSnapshot {
    pub fn new() -> Self {
        Self::default()
    }

    /// Insert a triple; a repeated (relation, subject, concept) key overwrites
    /// the earlier weight in place.
    pub fn insert(&mut self, triple: Triple) {
        assert!(triple.relation.is_semantic(), "knowledge triples must be semantic");
        let key = (triple.relation, triple.subject.clone(), triple.concept.clone());
        if let Some(&idx) = self.keys.get(&key) {
            self.triples[idx].weight = triple.weight;
            return;
        }
        let idx = self.triples.len();
        self.by_subject
            .entry((triple.relation, triple.subject.clone()))
            .or_default()
            .push(idx);
        self.keys.insert(key, idx);
        self.triples.push(triple);
    }

    pub fn triples(&self) -> &[Triple] {
        &self.triples
    }

    pub fn len(&self) -> usize {
        self.triples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.triples.is_empty()
    }

    /// Concepts related to `subject` with weight above [`MIN_CONCEPT_WEIGHT`],
    /// by descending weight, ties broken by concept token.
    pub fn query(&self, subject: &str, relation: EdgeKind) -> Vec<(String, f64)> {
        let Some(indices) = self.by_subject.get(&(relation, subject.to_string())) else {
            return Vec::new();
        };
        let mut out: Vec<(String, f64)> = indices
            .iter()
            .map(|&i| &self.triples[i])
            .filter(|t| t.weight > MIN_CONCEPT_WEIGHT)
            .map(|t| (t.concept.clone(), t.weight))
            .collect();
        out.sort_by(|a, b| b.1.total_cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
        out
    }

    /// Every distinct subject and concept token.
    pub fn tokens(&self) -> Vec<String> {
        let mut set: Vec<String> = self
            .triples
            .iter()
            .flat_map(|t| [t.subject.clone(), t.concept.clone()])
            .collect::<HashSet<_>>()
            .into_iter()
            .collect();
        set.sort();
        set
    }

    pub fn parse(text: &str) -> Result<Self, KnowledgeError> {
        let mut snapshot = KnowledgeSnapshot::new();
        for (i, raw) in text.lines().enumerate() {
            let line = i + 1;
            let trimmed = raw.trim_end_matches('\r');
            if trimmed.trim().is_empty() || trimmed.starts_with('#') {
                continue;
            }
            let cols: Vec<&str> = trimmed.split('\t').collect();
            if cols.len() != 4 {
                return Err(KnowledgeError::Parse {
                    line,
                    message: format!("expected 4 tab-separated columns, found {}", cols.len()),
                });
            }
            let relation = match cols[0] {
                "AtLocation" => EdgeKind::AtLocation,
                "UsedFor" => EdgeKind::UsedFor,
                other => {
                    return Err(KnowledgeError::UnknownRelation {
                        line,
                        relation: other.to_string(),
                    })
                }
            };
            let weight: f64 = cols[3].trim().parse().map_err(|_| KnowledgeError::Parse {
                line,
                message: format!("invalid weight `{}`", cols[3]),
            })?;
            if !(weight.is_finite() && weight > 0.0) {
                return Err(KnowledgeError::Parse {
                    line,
                    message: format!("weight must be positive, got {weight}"),
                });
            }
            if cols[1].is_empty() || cols[2].is_empty() {
                return Err(KnowledgeError::Parse {
                    line,
                    message: "empty subject or concept".into(),
                });
            }
            snapshot.insert(Triple {
                relation,
                subject: cols[1].to_string(),
                concept: cols[2].to_string(),
                weight,
            });
        }
        Ok(snapshot)
    }

    pub fn to_tsv(&self) -> String {
        let mut out = String::from("# relation\tsubject\tconcept\tweight\n");
        for t in &self.triples {
            let _ = writeln!(out, "{}\t{}\t{}\t{}", t.relation, t.subject, t.concept, t.weight);
        }
        out
    }
}

pub fn load_snapshot(path: impl AsRef<Path>) -> Result<KnowledgeSnapshot, KnowledgeError> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|source| KnowledgeError::Io {
        path: path.display().to_string(),
        source,
    })?;
    KnowledgeSnapshot::parse(&text)
}

pub fn write_snapshot(path: impl AsRef<Path>, snapshot: &KnowledgeSnapshot) -> Result<(), KnowledgeError> {
    let path = path.as_ref();
    std::fs::write(path, snapshot.to_tsv()).map_err(|source| KnowledgeError::Io {
        path: path.display().to_string(),
        source,
    })
}

/// Token → vector lookup with a zero-vector fallback for unknown tokens.
#[derive(Debug)]
pub struct EmbeddingTable {
    dim: usize,
    order: Vec<String>,
    entries: HashMap<String, Vec<f64>>,
    zeros: Vec<f64>,
    warned: Mutex<HashSet<String>>,
}

impl Clone for EmbeddingTable {
    fn clone(&self) -> Self {
        Self {
            dim: self.dim,
            order: self.order.clone(),
            entries: self.entries.clone(),
            zeros: self.zeros.clone(),
            warned: Mutex::new(HashSet::new()),
        }
    }
}

impl EmbeddingTable {
    pub fn new(dim: usize) -> Self {
        assert!(dim > 0, "embedding dimension must be positive");
        Self {
            dim,
            order: Vec::new(),
            entries: HashMap::new(),
            zeros: vec![0.0; dim],
            warned: Mutex::new(HashSet::new()),
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.order.len()
    }

    pub fn is_empty(&self) -> bool {
        self.order.is_empty()
    }

    pub fn contains(&self, token: &str) -> bool {
        self.entries.contains_key(token)
    }

    pub fn tokens(&self) -> &[String] {
        &self.order
    }

    /// Panics if `vector.len() != dim`.
    pub fn insert(&mut self, token: impl Into<String>, vector: Vec<f64>) {
        assert_eq!(vector.len(), self.dim, "embedding length mismatch");
        let token = token.into();
        if !self.entries.contains_key(&token) {
            self.order.push(token.clone());
        }
        self.entries.insert(token, vector);
    }

    pub fn embed(&self, token: &str) -> &[f64] {
        match self.entries.get(token) {
            Some(v) => v,
            None => {
                let mut warned = self.warned.lock().unwrap_or_else(|e| e.into_inner());
                if warned.insert(token.to_string()) {
                    log::warn!("token `{token}` not in embedding table; using zero vector");
                }
                &self.zeros
            }
        }
    }

    pub fn parse(text: &str) -> Result<Self, KnowledgeError> {
        let mut lines = text.lines().enumerate();
        let dim = loop {
            match lines.next() {
                Some((_, l)) if l.trim().is_empty() => continue,
                Some((i, l)) => {
                    break l.trim().parse::<usize>().ok().filter(|&d| d > 0).ok_or_else(|| {
                        KnowledgeError::Parse {
                            line: i + 1,
                            message: format!("expected positive dimension, found `{l}`"),
                        }
                    })?
                }
                None => {
                    return Err(KnowledgeError::Parse {
                        line: 1,
                        message: "empty embedding file".into(),
                    })
                }
            }
        };
        let mut table = EmbeddingTable::new(dim);
        for (i, l) in lines {
            if l.trim().is_empty() {
                continue;
            }
            let mut parts = l.split_whitespace();
            let token = parts.next().unwrap_or_default();
            let values = parts
                .map(|p| p.parse::<f64>())
                .collect::<Result<Vec<_>, _>>()
                .map_err(|e| KnowledgeError::Parse {
                    line: i + 1,
                    message: format!("invalid real: {e}"),
                })?;
            if values.len() != dim {
                return Err(KnowledgeError::Parse {
                    line: i + 1,
                    message: format!("expected {dim} values for `{token}`, found {}", values.len()),
                });
            }
            table.insert(token, values);
        }
        Ok(table)
    }

    pub fn to_text(&self) -> String {
        let mut out = format!("{}\n", self.dim);
        for token in &self.order {
            out.push_str(token);
            for v in &self.entries[token] {
                let _ = write!(out, " {v}");
            }
            out.push('\n');
        }
        out
    }
}

pub fn load_embeddings(path: impl AsRef<Path>) -> Result<EmbeddingTable, KnowledgeError> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|source| KnowledgeError::Io {
        path: path.display().to_string(),
        source,
    })?;
    EmbeddingTable::parse(&text)
}

pub fn write_embeddings(path: impl AsRef<Path>, table: &EmbeddingTable) -> Result<(), KnowledgeError> {
    let path = path.as_ref();
    std::fs::write(path, table.to_text()).map_err(|source| KnowledgeError::Io {
        path: path.display().to_string(),
        source,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    const FIXTURE: &str = include_str!("../fixtures/knowledge.tsv");

    #[test]
    fn loads_documented_lines() {
        let kb = KnowledgeSnapshot::parse("AtLocation\tbed\tapartment\t2.0\nUsedFor\tbed\tresting\t1.5\n").unwrap();
        assert_eq!(kb.len(), 2);
        assert_eq!(kb.query("bed", EdgeKind::AtLocation), vec![("apartment".to_string(), 2.0)]);
        assert_eq!(kb.query("bed", EdgeKind::UsedFor), vec![("resting".to_string(), 1.5)]);
    }

    #[test]
    fn rejects_unsupported_relation() {
        let err = KnowledgeSnapshot::parse("# header\nPartOf\tleg\tchair\t1.0\n").unwrap_err();
        assert!(matches!(err, KnowledgeError::UnknownRelation { line: 2, .. }));
    }

    #[test]
    fn malformed_line_reports_line_number() {
        let err = KnowledgeSnapshot::parse("AtLocation\tbed\tapartment\t2.0\nUsedFor\tbed\n").unwrap_err();
        assert!(matches!(err, KnowledgeError::Parse { line: 2, .. }));
        let err = KnowledgeSnapshot::parse("UsedFor\tbed\tsleep\tabc\n").unwrap_err();
        assert!(matches!(err, KnowledgeError::Parse { line: 1, .. }));
        let err = KnowledgeSnapshot::parse("UsedFor\tbed\tsleep\t-1\n").unwrap_err();
        assert!(matches!(err, KnowledgeError::Parse { line: 1, .. }));
    }

    #[test]
    fn duplicates_last_wins() {
        let kb = KnowledgeSnapshot::parse(
            "UsedFor\tbed\tsleep\t1.2\nUsedFor\tbed\tnap\t3.0\nUsedFor\tbed\tsleep\t4.0\n",
        )
        .unwrap();
        assert_eq!(kb.len(), 2);
        assert_eq!(kb.query("bed", EdgeKind::UsedFor)[0], ("sleep".to_string(), 4.0));
    }

    #[test]
    fn weight_threshold_is_strict() {
        let kb = KnowledgeSnapshot::parse(
            "AtLocation\tlamp\ta\t0.5\nAtLocation\tlamp\tb\t1.0\nAtLocation\tlamp\tc\t1.2\n",
        )
        .unwrap();
        assert_eq!(kb.query("lamp", EdgeKind::AtLocation), vec![("c".to_string(), 1.2)]);
        assert!(kb.query("unicorn", EdgeKind::AtLocation).is_empty());
    }

    #[test]
    fn query_order_matches_reference_sort() {
        let kb = KnowledgeSnapshot::parse(
            "UsedFor\tx\tzeta\t2.0\nUsedFor\tx\talpha\t2.0\nUsedFor\tx\tmid\t3.5\nUsedFor\tx\tbeta\t2.0\n",
        )
        .unwrap();
        let got = kb.query("x", EdgeKind::UsedFor);
        // reference: stable bubble sort on (−weight, token)
        let mut reference: Vec<(String, f64)> = kb
            .triples()
            .iter()
            .filter(|t| t.subject == "x" && t.weight > 1.0)
            .map(|t| (t.concept.clone(), t.weight))
            .collect();
        for i in 0..reference.len() {
            for j in 0..reference.len() - 1 - i {
                let (a, b) = (&reference[j], &reference[j + 1]);
                if a.1 < b.1 || (a.1 == b.1 && a.0 > b.0) {
                    reference.swap(j, j + 1);
                }
            }
        }
        assert_eq!(got, reference);
        assert_eq!(got[0].0, "mid");
        assert_eq!(got[1].0, "alpha");
    }

    #[test]
    fn fixture_never_returns_weak_concepts() {
        let kb = KnowledgeSnapshot::parse(FIXTURE).unwrap();
        assert!(kb.len() >= 200);
        let subjects: HashSet<&str> = kb.triples().iter().map(|t| t.subject.as_str()).collect();
        assert!(subjects.len() >= 40);
        for s in subjects {
            for rel in [EdgeKind::AtLocation, EdgeKind::UsedFor] {
                assert!(kb.query(s, rel).iter().all(|(_, w)| *w > 1.0));
            }
        }
    }

    #[test]
    fn snapshot_tsv_round_trip_is_stable() {
        let kb = KnowledgeSnapshot::parse(FIXTURE).unwrap();
        let first = kb.to_tsv();
        let second = KnowledgeSnapshot::parse(&first).unwrap().to_tsv();
        assert_eq!(first, second);
    }

    #[test]
    fn embedding_lookup_and_oov() {
        let table = EmbeddingTable::parse("3\nbed 0.1 -0.2 0.3\nsofa 1 2 3\n").unwrap();
        assert_eq!(table.embed("bed"), &[0.1, -0.2, 0.3]);
        assert_eq!(table.embed("unicorn"), &[0.0, 0.0, 0.0]);
        assert_eq!(table.embed("unicorn"), &[0.0, 0.0, 0.0]);
        assert_eq!(table.embed("bed").to_vec(), table.embed("bed").to_vec());
        let again = EmbeddingTable::parse(&table.to_text()).unwrap();
        assert_eq!(again.to_text(), table.to_text());
    }

    #[test]
    fn embedding_dimension_mismatch() {
        let err = EmbeddingTable::parse("3\nbed 0.1 0.2\n").unwrap_err();
        assert!(matches!(err, KnowledgeError::Parse { line: 2, .. }));
        assert!(EmbeddingTable::parse("zero\n").is_err());
    }
}
