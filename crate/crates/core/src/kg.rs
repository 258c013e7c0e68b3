//! Knowledge-graph store and context-path enumeration.
//!
//! Triples are read from a three-column TSV file. A tail wrapped in double
//! quotes (`"1910"`) is a literal; anything else is an entity id. Literals are
//! valid path endpoints but have no outgoing edges.

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Relation-id and label prefix used for reversed edges.
pub const INVERSE_PREFIX: &str = "inverse:";

/// Returns true when a node key denotes a literal (`"..."`).
pub fn is_literal(node: &str) -> bool {
    node.len() >= 2 && node.starts_with('"') && node.ends_with('"')
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Triple {
    pub head: String,
    pub relation: String,
    pub tail: String,
}

/// Immutable, indexed triple store.
#[derive(Debug, Clone)]
pub struct KnowledgeGraph {
    entities: BTreeSet<String>,
    relations: BTreeSet<String>,
    triples: BTreeSet<Triple>,
    entity_labels: BTreeMap<String, String>,
    relation_labels: BTreeMap<String, String>,
    adjacency: BTreeMap<String, Vec<(String, String)>>,
    inverse_adjacency: BTreeMap<String, Vec<(String, String)>>,
}

impl KnowledgeGraph {
    /// Builds a graph from triples and a label table. Ids without a label
    /// fall back to the id itself.
    pub fn from_triples(
        triples: impl IntoIterator<Item = Triple>,
        labels: impl IntoIterator<Item = (String, String)>,
    ) -> Result<Self> {
        let triples: BTreeSet<Triple> = triples.into_iter().collect();
        if triples.is_empty() {
            return Err(Error::NoTriples);
        }
        let labels: BTreeMap<String, String> = labels.into_iter().collect();

        let mut entities = BTreeSet::new();
        let mut relations = BTreeSet::new();
        let mut adjacency: BTreeMap<String, Vec<(String, String)>> = BTreeMap::new();
        let mut inverse_adjacency: BTreeMap<String, Vec<(String, String)>> = BTreeMap::new();
        for t in &triples {
            if is_literal(&t.head) {
                return Err(Error::invalid(format!("literal `{}` used as triple head", t.head)));
            }
            entities.insert(t.head.clone());
            relations.insert(t.relation.clone());
            if !is_literal(&t.tail) {
                entities.insert(t.tail.clone());
                inverse_adjacency
                    .entry(t.tail.clone())
                    .or_default()
                    .push((format!("{INVERSE_PREFIX}{}", t.relation), t.head.clone()));
            }
            adjacency
                .entry(t.head.clone())
                .or_default()
                .push((t.relation.clone(), t.tail.clone()));
        }
        // BTreeSet iteration already yields (relation, tail) sorted per head.
        for edges in inverse_adjacency.values_mut() {
            edges.sort();
        }

        let label_of = |id: &String| labels.get(id).cloned().unwrap_or_else(|| id.clone());
        let entity_labels = entities.iter().map(|e| (e.clone(), label_of(e))).collect();
        let relation_labels = relations.iter().map(|r| (r.clone(), label_of(r))).collect();

        Ok(Self {
            entities,
            relations,
            triples,
            entity_labels,
            relation_labels,
            adjacency,
            inverse_adjacency,
        })
    }

    /// Loads `head \t relation \t tail` triples and `id \t label` labels.
    pub fn load(triples_file: &Path, labels_file: &Path) -> Result<Self> {
        let triples_text =
            std::fs::read_to_string(triples_file).map_err(|e| Error::io(triples_file, e))?;
        let labels_text =
            std::fs::read_to_string(labels_file).map_err(|e| Error::io(labels_file, e))?;
        let triples = parse_triples(&triples_text, &triples_file.display().to_string())?;
        let labels = parse_labels(&labels_text, &labels_file.display().to_string())?;
        Self::from_triples(triples, labels)
    }

    pub fn entities(&self) -> &BTreeSet<String> {
        &self.entities
    }

    pub fn relations(&self) -> &BTreeSet<String> {
        &self.relations
    }

    pub fn triples(&self) -> &BTreeSet<Triple> {
        &self.triples
    }

    pub fn contains_entity(&self, id: &str) -> bool {
        self.entities.contains(id)
    }

    pub fn has_triple(&self, head: &str, relation: &str, tail: &str) -> bool {
        self.triples.contains(&Triple {
            head: head.to_string(),
            relation: relation.to_string(),
            tail: tail.to_string(),
        })
    }

    /// Forward edges `(relation, tail)` of an entity in sorted order.
    pub fn outgoing(&self, entity: &str) -> &[(String, String)] {
        self.adjacency.get(entity).map(Vec::as_slice).unwrap_or(&[])
    }

    /// Reversed edges `(inverse:relation, head)` pointing into an entity.
    pub fn incoming(&self, entity: &str) -> &[(String, String)] {
        self.inverse_adjacency
            .get(entity)
            .map(Vec::as_slice)
            .unwrap_or(&[])
    }

    /// Display label of an entity, relation, or literal node.
    pub fn label(&self, id: &str) -> String {
        if is_literal(id) {
            return id[1..id.len() - 1].to_string();
        }
        if let Some(rel) = id.strip_prefix(INVERSE_PREFIX) {
            return format!("{INVERSE_PREFIX}{}", self.label(rel));
        }
        self.entity_labels
            .get(id)
            .or_else(|| self.relation_labels.get(id))
            .cloned()
            .unwrap_or_else(|| id.to_string())
    }

    pub fn entity_labels(&self) -> &BTreeMap<String, String> {
        &self.entity_labels
    }

    /// Writes the graph back out as TSV, the inverse of [`KnowledgeGraph::load`].
    pub fn to_tsv(&self) -> (String, String) {
        let mut triples = String::new();
        for t in &self.triples {
            triples.push_str(&format!("{}\t{}\t{}\n", t.head, t.relation, t.tail));
        }
        let mut labels = String::new();
        for (id, label) in self.entity_labels.iter().chain(self.relation_labels.iter()) {
            labels.push_str(&format!("{id}\t{label}\n"));
        }
        (triples, labels)
    }
}

fn parse_triples(text: &str, file: &str) -> Result<Vec<Triple>> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let cols: Vec<&str> = line.split('\t').collect();
        if cols.len() != 3 {
            return Err(Error::Parse {
                file: file.to_string(),
                line: i + 1,
                message: format!("expected 3 tab-separated columns, found {}", cols.len()),
            });
        }
        out.push(Triple {
            head: cols[0].to_string(),
            relation: cols[1].to_string(),
            tail: cols[2].to_string(),
        });
    }
    if out.is_empty() {
        return Err(Error::NoTriples);
    }
    Ok(out)
}

fn parse_labels(text: &str, file: &str) -> Result<Vec<(String, String)>> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let cols: Vec<&str> = line.split('\t').collect();
        if cols.len() != 2 {
            return Err(Error::Parse {
                file: file.to_string(),
                line: i + 1,
                message: format!("expected 2 tab-separated columns, found {}", cols.len()),
            });
        }
        out.push((cols[0].to_string(), cols[1].to_string()));
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum PathLabel {
    Positive,
    Negative,
    #[default]
    Unlabeled,
}

/// A 1-3 hop directed path anchored at a context entity.
///
/// Equality, ordering and hashing look at the anchor and steps only; the
/// label is annotation.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(into = "PathRecord", try_from = "PathRecord")]
pub struct ContextPath {
    pub anchor: String,
    /// `(relation, node)` steps; the first step leaves `anchor`.
    pub steps: Vec<(String, String)>,
    pub label: PathLabel,
}

impl ContextPath {
    fn key(&self) -> (&str, &[(String, String)]) {
        (&self.anchor, &self.steps)
    }
}

impl PartialEq for ContextPath {
    fn eq(&self, other: &Self) -> bool {
        self.key() == other.key()
    }
}
impl Eq for ContextPath {}
impl PartialOrd for ContextPath {
    fn partial_cmp(&self, other: &Self) -> Option<std::cmp::Ordering> {
        Some(self.cmp(other))
    }
}
impl Ord for ContextPath {
    fn cmp(&self, other: &Self) -> std::cmp::Ordering {
        self.key().cmp(&other.key())
    }
}
impl std::hash::Hash for ContextPath {
    fn hash<H: std::hash::Hasher>(&self, state: &mut H) {
        self.key().hash(state)
    }
}

impl ContextPath {
    pub fn new(anchor: impl Into<String>, steps: Vec<(String, String)>) -> Self {
        Self {
            anchor: anchor.into(),
            steps,
            label: PathLabel::Unlabeled,
        }
    }

    pub fn endpoint(&self) -> &str {
        self.steps.last().map(|(_, n)| n.as_str()).unwrap_or(&self.anchor)
    }

    pub fn hops(&self) -> usize {
        self.steps.len()
    }

    pub fn label(&self) -> PathLabel {
        self.label
    }

    pub fn set_label(&mut self, label: PathLabel) {
        self.label = label;
    }

    /// Node sequence: anchor followed by every step target.
    pub fn nodes(&self) -> impl Iterator<Item = &str> {
        std::iter::once(self.anchor.as_str()).chain(self.steps.iter().map(|(_, n)| n.as_str()))
    }

    /// Checks hop count, connectivity against the graph, and acyclicity.
    pub fn validate(&self, graph: &KnowledgeGraph) -> Result<()> {
        if self.steps.is_empty() || self.steps.len() > 3 {
            return Err(Error::invalid(format!("path has {} hops", self.steps.len())));
        }
        let mut source = self.anchor.as_str();
        for (rel, node) in &self.steps {
            let ok = match rel.strip_prefix(INVERSE_PREFIX) {
                Some(fwd) => graph.has_triple(node, fwd, source),
                None => graph.has_triple(source, rel, node),
            };
            if !ok {
                return Err(Error::invalid(format!("no edge {source} -{rel}-> {node}")));
            }
            source = node;
        }
        let mut seen = HashSet::new();
        if !self.nodes().all(|n| seen.insert(n)) {
            return Err(Error::invalid("path revisits a node"));
        }
        Ok(())
    }
}

impl fmt::Display for ContextPath {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "[{}", self.anchor)?;
        for (r, n) in &self.steps {
            write!(f, " {r} {n}")?;
        }
        write!(f, "]")
    }
}

/// JSON Lines form of a path.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PathRecord {
    pub anchor: String,
    pub steps: Vec<(String, String)>,
    pub endpoint: String,
    #[serde(default)]
    pub label: PathLabel,
}

impl From<ContextPath> for PathRecord {
    fn from(p: ContextPath) -> Self {
        PathRecord {
            endpoint: p.endpoint().to_string(),
            label: p.label(),
            anchor: p.anchor,
            steps: p.steps,
        }
    }
}

impl TryFrom<PathRecord> for ContextPath {
    type Error = String;

    fn try_from(r: PathRecord) -> std::result::Result<Self, String> {
        let mut p = ContextPath::new(r.anchor, r.steps);
        if p.steps.is_empty() {
            return Err("path without steps".into());
        }
        if p.endpoint() != r.endpoint {
            return Err(format!("endpoint `{}` does not match last step", r.endpoint));
        }
        p.set_label(r.label);
        Ok(p)
    }
}

/// Enumerates every simple forward path of 1..=`max_hops` hops from each
/// context entity, ordered by anchor and then by step sequence.
pub fn extract_context_paths<'a, I>(
    graph: &KnowledgeGraph,
    context_entities: I,
    max_hops: usize,
) -> Result<Vec<ContextPath>>
where
    I: IntoIterator<Item = &'a String>,
{
    extract_context_paths_with(graph, context_entities, max_hops, false)
}

/// As [`extract_context_paths`], optionally also walking reversed edges.
pub fn extract_context_paths_with<'a, I>(
    graph: &KnowledgeGraph,
    context_entities: I,
    max_hops: usize,
    include_inverse: bool,
) -> Result<Vec<ContextPath>>
where
    I: IntoIterator<Item = &'a String>,
{
    if !(1..=3).contains(&max_hops) {
        return Err(Error::invalid(format!("max_hops must be 1, 2 or 3, got {max_hops}")));
    }
    let anchors: BTreeSet<&String> = context_entities.into_iter().collect();
    for a in &anchors {
        if !graph.contains_entity(a) {
            return Err(Error::UnknownEntity((*a).clone()));
        }
    }

    let mut out = Vec::new();
    for anchor in anchors {
        let mut visited = vec![anchor.as_str()];
        let mut steps = Vec::new();
        walk(graph, anchor, &mut visited, &mut steps, max_hops, include_inverse, &mut out);
    }
    Ok(out)
}

fn walk<'g>(
    graph: &'g KnowledgeGraph,
    anchor: &str,
    visited: &mut Vec<&'g str>,
    steps: &mut Vec<(String, String)>,
    max_hops: usize,
    include_inverse: bool,
    out: &mut Vec<ContextPath>,
) {
    let source = *visited.last().expect("visited starts with the anchor");
    if is_literal(source) {
        return;
    }
    let forward = graph.outgoing(source).iter();
    let edges: Vec<&'g (String, String)> = if include_inverse {
        let mut all: Vec<_> = forward.chain(graph.incoming(source).iter()).collect();
        all.sort();
        all
    } else {
        forward.collect()
    };
    for (rel, node) in edges {
        if visited.contains(&node.as_str()) {
            continue;
        }
        steps.push((rel.clone(), node.clone()));
        out.push(ContextPath::new(anchor, steps.clone()));
        if steps.len() < max_hops {
            visited.push(node.as_str());
            walk(graph, anchor, visited, steps, max_hops, include_inverse, out);
            visited.pop();
        }
        steps.pop();
    }
}

/// Splits paths into positives (endpoint is a gold answer) and negatives,
/// writing the label onto each path.
pub fn label_paths(
    paths: Vec<ContextPath>,
    gold_answers: &HashSet<String>,
) -> (Vec<ContextPath>, Vec<ContextPath>) {
    let mut positives = Vec::new();
    let mut negatives = Vec::new();
    for mut p in paths {
        if gold_answers.contains(p.endpoint()) {
            p.set_label(PathLabel::Positive);
            positives.push(p);
        } else {
            p.set_label(PathLabel::Negative);
            negatives.push(p);
        }
    }
    (positives, negatives)
}

/// Renders a path as a sentence: anchor label, then relation and node labels.
pub fn verbalize_path(path: &ContextPath, graph: &KnowledgeGraph) -> String {
    let mut parts = vec![graph.label(&path.anchor)];
    for (rel, node) in &path.steps {
        parts.push(graph.label(rel));
        parts.push(graph.label(node));
    }
    parts.join(" ")
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(h: &str, r: &str, tl: &str) -> Triple {
        Triple {
            head: h.into(),
            relation: r.into(),
            tail: tl.into(),
        }
    }

    fn toy() -> KnowledgeGraph {
        KnowledgeGraph::from_triples(
            vec![t("e1", "r1", "e2"), t("e2", "r2", "e3"), t("e2", "r3", "e4")],
            vec![],
        )
        .unwrap()
    }

    fn ctx(ids: &[&str]) -> Vec<String> {
        ids.iter().map(|s| s.to_string()).collect()
    }

    fn render(paths: &[ContextPath]) -> Vec<String> {
        paths.iter().map(|p| p.to_string()).collect()
    }

    #[test]
    fn load_counts_and_errors() {
        let dir = tempfile::tempdir().unwrap();
        let tf = dir.path().join("t.tsv");
        let lf = dir.path().join("l.tsv");
        std::fs::write(&tf, "e1\tr1\te2\ne2\tr2\te3\n").unwrap();
        std::fs::write(&lf, "e1\tOne\n").unwrap();
        let g = KnowledgeGraph::load(&tf, &lf).unwrap();
        assert_eq!(g.entities().len(), 3);
        assert_eq!(g.relations().len(), 2);
        assert_eq!(g.triples().len(), 2);
        assert_eq!(g.label("e1"), "One");
        assert_eq!(g.label("e2"), "e2");

        std::fs::write(&tf, "").unwrap();
        assert!(matches!(KnowledgeGraph::load(&tf, &lf), Err(Error::NoTriples)));
        assert_eq!(KnowledgeGraph::load(&tf, &lf).unwrap_err().to_string(), "no triples");

        std::fs::write(&tf, "e1\tr1\n").unwrap();
        match KnowledgeGraph::load(&tf, &lf) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 1),
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn adjacency_matches_triples() {
        let g = toy();
        let mut from_adj = BTreeSet::new();
        for e in g.entities() {
            for (r, tl) in g.outgoing(e) {
                assert!(from_adj.insert(t(e, r, tl)), "duplicate edge");
            }
        }
        assert_eq!(&from_adj, g.triples());
    }

    #[test]
    fn extraction_examples() {
        let g = toy();
        let one = extract_context_paths(&g, &ctx(&["e1"]), 1).unwrap();
        assert_eq!(render(&one), vec!["[e1 r1 e2]"]);
        let two = extract_context_paths(&g, &ctx(&["e1"]), 2).unwrap();
        assert_eq!(
            render(&two),
            vec!["[e1 r1 e2]", "[e1 r1 e2 r2 e3]", "[e1 r1 e2 r3 e4]"]
        );
        assert!(extract_context_paths(&g, &ctx(&[]), 3).unwrap().is_empty());
        match extract_context_paths(&g, &ctx(&["zz"]), 2) {
            Err(Error::UnknownEntity(id)) => assert_eq!(id, "zz"),
            other => panic!("{other:?}"),
        }
        assert!(extract_context_paths(&g, &ctx(&["e1"]), 4).is_err());
        for p in &two {
            p.validate(&g).unwrap();
        }
    }

    #[test]
    fn cycles_are_not_revisited() {
        let g = KnowledgeGraph::from_triples(
            vec![t("a", "r", "b"), t("b", "r", "a"), t("b", "s", "c"), t("c", "s", "a")],
            vec![],
        )
        .unwrap();
        let paths = extract_context_paths(&g, &ctx(&["a"]), 3).unwrap();
        assert_eq!(render(&paths), vec!["[a r b]", "[a r b s c]"]);
    }

    #[test]
    fn literals_are_endpoints_only() {
        let g = KnowledgeGraph::from_triples(
            vec![t("a", "year", "\"1910\""), t("a", "r", "b"), t("b", "year", "\"1920\"")],
            vec![("year".into(), "published".into())],
        )
        .unwrap();
        assert_eq!(g.entities().len(), 2);
        let paths = extract_context_paths(&g, &ctx(&["a"]), 3).unwrap();
        assert_eq!(paths.len(), 3);
        let p = paths.iter().find(|p| p.endpoint() == "\"1910\"").unwrap();
        assert_eq!(verbalize_path(p, &g), "a published 1910");
    }

    #[test]
    fn inverse_edges_behind_flag() {
        let g = toy();
        let fwd = extract_context_paths(&g, &ctx(&["e3"]), 2).unwrap();
        assert!(fwd.is_empty());
        let inv = extract_context_paths_with(&g, &ctx(&["e3"]), 2, true).unwrap();
        assert_eq!(
            render(&inv),
            vec!["[e3 inverse:r2 e2]", "[e3 inverse:r2 e2 inverse:r1 e1]", "[e3 inverse:r2 e2 r3 e4]"]
        );
        for p in &inv {
            p.validate(&g).unwrap();
        }
        assert_eq!(g.label("inverse:r2"), "inverse:r2");
    }

    #[test]
    fn labeling_examples() {
        let g = toy();
        let paths = extract_context_paths(&g, &ctx(&["e1"]), 2).unwrap();
        let gold: HashSet<String> = ["e3".to_string()].into();
        let (pos, neg) = label_paths(paths.clone(), &gold);
        assert_eq!(render(&pos), vec!["[e1 r1 e2 r2 e3]"]);
        assert_eq!(neg.len(), 2);
        assert!(pos.iter().all(|p| p.label() == PathLabel::Positive));
        assert!(neg.iter().all(|p| p.label() == PathLabel::Negative));

        let (pos, neg) = label_paths(paths.clone(), &HashSet::new());
        assert!(pos.is_empty());
        assert_eq!(neg.len(), 3);

        let gold: HashSet<String> = ["e2".to_string(), "e4".to_string()].into();
        let (pos, _) = label_paths(paths, &gold);
        assert_eq!(render(&pos), vec!["[e1 r1 e2]", "[e1 r1 e2 r3 e4]"]);
    }

    #[test]
    fn verbalization_examples() {
        let g = KnowledgeGraph::from_triples(
            vec![t("e1", "r1", "e2"), t("e2", "r2", "e3"), t("e1", "r1", "Q7")],
            vec![
                ("e1".into(), "Secret Garden".into()),
                ("r1".into(), "author".into()),
                ("e2".into(), "F. H. Burnett".into()),
                ("r2".into(), "birthplace".into()),
                ("e3".into(), "Manchester".into()),
            ],
        )
        .unwrap();
        let p1 = ContextPath::new("e1", vec![("r1".into(), "e2".into())]);
        let p2 = ContextPath::new("e1", vec![("r1".into(), "e2".into()), ("r2".into(), "e3".into())]);
        let p3 = ContextPath::new("e1", vec![("r1".into(), "Q7".into())]);
        assert_eq!(verbalize_path(&p1, &g), "Secret Garden author F. H. Burnett");
        assert_eq!(
            verbalize_path(&p2, &g),
            "Secret Garden author F. H. Burnett birthplace Manchester"
        );
        assert_eq!(verbalize_path(&p3, &g), "Secret Garden author Q7");
    }

    #[test]
    fn path_json_shape() {
        let mut p = ContextPath::new("e1", vec![("r1".into(), "e2".into())]);
        p.set_label(PathLabel::Positive);
        let v = serde_json::to_value(&p).unwrap();
        assert_eq!(
            v,
            serde_json::json!({"anchor":"e1","steps":[["r1","e2"]],"endpoint":"e2","label":"positive"})
        );
        let back: ContextPath = serde_json::from_value(v).unwrap();
        assert_eq!(back, p);
        assert_eq!(back.label(), PathLabel::Positive);
    }
}
