//! Heterogeneous scene graphs.
//!
//! A spatial graph holds one node per observed object plus the target node
//! (always last), fully connected by proximity edges. Enriching it with a
//! knowledge snapshot adds concept nodes linked to objects by `AtLocation`
//! and `UsedFor` edges.

use std::collections::{BTreeSet, HashMap};
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::SceneRecord;
use crate::geometry::Point2;
use crate::knowledge::KnowledgeSnapshot;

/// Distance value carried by edges whose length is not measurable.
pub const UNKNOWN_DISTANCE: f64 = -1.0;

/// Fewest observed objects that pin down a 2D position.
pub const MIN_ANCHORS: usize = 3;

#[derive(Debug, Error, PartialEq)]
pub enum GraphError {
    #[error("scene `{scene}` has {found} observed objects, at least {MIN_ANCHORS} are required")]
    TooFewAnchors { scene: String, found: usize },
    #[error("scene `{scene}` has no target of category `{category}`")]
    UnknownTarget { scene: String, category: String },
    #[error("node {0} does not exist")]
    InvalidNode(usize),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum EdgeKind {
    Proximity,
    AtLocation,
    UsedFor,
}

impl EdgeKind {
    pub const ALL: [EdgeKind; 3] = [EdgeKind::Proximity, EdgeKind::AtLocation, EdgeKind::UsedFor];
    pub const SEMANTIC: [EdgeKind; 2] = [EdgeKind::AtLocation, EdgeKind::UsedFor];

    pub fn index(self) -> usize {
        match self {
            EdgeKind::Proximity => 0,
            EdgeKind::AtLocation => 1,
            EdgeKind::UsedFor => 2,
        }
    }

    pub fn is_semantic(self) -> bool {
        self != EdgeKind::Proximity
    }

    /// Case-insensitive name lookup (`proximity`, `atlocation`, `usedfor`).
    pub fn parse(name: &str) -> Option<EdgeKind> {
        match name.trim().to_ascii_lowercase().as_str() {
            "proximity" => Some(EdgeKind::Proximity),
            "atlocation" => Some(EdgeKind::AtLocation),
            "usedfor" => Some(EdgeKind::UsedFor),
            _ => None,
        }
    }
}

impl fmt::Display for EdgeKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            EdgeKind::Proximity => "Proximity",
            EdgeKind::AtLocation => "AtLocation",
            EdgeKind::UsedFor => "UsedFor",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EdgeFeature {
    pub kind: EdgeKind,
    /// Metres, or [`UNKNOWN_DISTANCE`].
    pub distance: f64,
}

impl EdgeFeature {
    /// `[proximity, at_location, used_for, distance]`.
    pub fn to_array(&self) -> [f64; 4] {
        let mut v = [0.0; 4];
        v[self.kind.index()] = 1.0;
        v[3] = self.distance;
        v
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ObjectNode {
    pub category: String,
    pub position: Option<Point2>,
    pub observed: bool,
    /// Object id in the source record; `None` for the target.
    pub source_id: Option<u32>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConceptNode {
    pub concept: String,
    pub relation_origins: BTreeSet<EdgeKind>,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Node {
    Object(ObjectNode),
    Concept(ConceptNode),
}

impl Node {
    /// Category for objects, concept token for concepts.
    pub fn token(&self) -> &str {
        match self {
            Node::Object(o) => &o.category,
            Node::Concept(c) => &c.concept,
        }
    }

    pub fn as_object(&self) -> Option<&ObjectNode> {
        match self {
            Node::Object(o) => Some(o),
            Node::Concept(_) => None,
        }
    }

    pub fn is_object(&self) -> bool {
        matches!(self, Node::Object(_))
    }
}

/// Undirected edge stored once with `a < b`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Edge {
    pub a: usize,
    pub b: usize,
    pub feature: EdgeFeature,
}

#[derive(Debug, Clone)]
pub struct SpatialCommonsenseGraph {
    nodes: Vec<Node>,
    edges: Vec<Edge>,
    target: usize,
    adjacency: Vec<Vec<usize>>,
}

impl SpatialCommonsenseGraph {
    fn from_parts(nodes: Vec<Node>, edges: Vec<Edge>, target: usize) -> Self {
        let mut adjacency = vec![Vec::new(); nodes.len()];
        for (k, e) in edges.iter().enumerate() {
            adjacency[e.a].push(k);
            adjacency[e.b].push(k);
        }
        for (i, list) in adjacency.iter_mut().enumerate() {
            list.sort_by_key(|&k| {
                let e = &edges[k];
                (if e.a == i { e.b } else { e.a }, e.feature.kind)
            });
        }
        Self { nodes, edges, target, adjacency }
    }

    pub fn nodes(&self) -> &[Node] {
        &self.nodes
    }

    pub fn edges(&self) -> &[Edge] {
        &self.edges
    }

    pub fn node(&self, id: usize) -> Result<&Node, GraphError> {
        self.nodes.get(id).ok_or(GraphError::InvalidNode(id))
    }

    pub fn target(&self) -> usize {
        self.target
    }

    pub fn target_category(&self) -> &str {
        self.nodes[self.target].token()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Object nodes, target included.
    pub fn object_count(&self) -> usize {
        self.nodes.iter().filter(|n| n.is_object()).count()
    }

    pub fn concept_count(&self) -> usize {
        self.nodes.len() - self.object_count()
    }

    /// Observed object node ids in ascending order.
    pub fn anchors(&self) -> Vec<usize> {
        self.nodes
            .iter()
            .enumerate()
            .filter_map(|(i, n)| match n {
                Node::Object(o) if o.observed => Some(i),
                _ => None,
            })
            .collect()
    }

    /// Neighbours of `id` sorted by neighbour id (then edge kind for parallel
    /// edges of different kinds).
    pub fn neighbourhood(&self, id: usize) -> Result<Vec<(usize, EdgeFeature)>, GraphError> {
        let list = self.adjacency.get(id).ok_or(GraphError::InvalidNode(id))?;
        Ok(list
            .iter()
            .map(|&k| {
                let e = &self.edges[k];
                (if e.a == id { e.b } else { e.a }, e.feature)
            })
            .collect())
    }

    /// The same graph with node `i` renamed to `perm[i]`.
    ///
    /// Panics if `perm` is not a permutation of `0..len`.
    pub fn relabel(&self, perm: &[usize]) -> SpatialCommonsenseGraph {
        assert_eq!(perm.len(), self.nodes.len());
        let mut slots: Vec<Option<Node>> = vec![None; self.nodes.len()];
        for (old, node) in self.nodes.iter().enumerate() {
            assert!(slots[perm[old]].is_none(), "not a permutation");
            slots[perm[old]] = Some(node.clone());
        }
        let nodes = slots.into_iter().map(|n| n.expect("not a permutation")).collect();
        let edges = self
            .edges
            .iter()
            .map(|e| {
                let (a, b) = (perm[e.a], perm[e.b]);
                Edge { a: a.min(b), b: a.max(b), feature: e.feature }
            })
            .collect();
        SpatialCommonsenseGraph::from_parts(nodes, edges, perm[self.target])
    }

    /// Drop every edge whose kind is not listed, and concept nodes left isolated.
    pub fn restrict(&self, kinds: &[EdgeKind]) -> SpatialCommonsenseGraph {
        let edges: Vec<Edge> =
            self.edges.iter().filter(|e| kinds.contains(&e.feature.kind)).copied().collect();
        let mut keep = vec![false; self.nodes.len()];
        for (i, n) in self.nodes.iter().enumerate() {
            keep[i] = n.is_object();
        }
        for e in &edges {
            keep[e.a] = true;
            keep[e.b] = true;
        }
        let mut remap = vec![usize::MAX; self.nodes.len()];
        let mut nodes = Vec::new();
        for (i, n) in self.nodes.iter().enumerate() {
            if keep[i] {
                remap[i] = nodes.len();
                let mut n = n.clone();
                if let Node::Concept(c) = &mut n {
                    c.relation_origins.retain(|k| kinds.contains(k));
                }
                nodes.push(n);
            }
        }
        let edges = edges
            .into_iter()
            .map(|e| Edge { a: remap[e.a], b: remap[e.b], feature: e.feature })
            .collect();
        SpatialCommonsenseGraph::from_parts(nodes, edges, remap[self.target])
    }
}

/// Object nodes for every observed object (record order) plus the target node
/// last, all pairwise joined by proximity edges.
pub fn build_spatial_graph(
    scene: &SceneRecord,
    target_category: &str,
) -> Result<SpatialCommonsenseGraph, GraphError> {
    if scene.objects.len() < MIN_ANCHORS {
        return Err(GraphError::TooFewAnchors {
            scene: scene.scene_id.clone(),
            found: scene.objects.len(),
        });
    }
    if !scene.targets.iter().any(|t| t.category == target_category) {
        return Err(GraphError::UnknownTarget {
            scene: scene.scene_id.clone(),
            category: target_category.to_string(),
        });
    }
    let mut nodes: Vec<Node> = scene
        .objects
        .iter()
        .map(|o| {
            Node::Object(ObjectNode {
                category: o.category.clone(),
                position: Some(o.position),
                observed: true,
                source_id: Some(o.id),
            })
        })
        .collect();
    let target = nodes.len();
    nodes.push(Node::Object(ObjectNode {
        category: target_category.to_string(),
        position: None,
        observed: false,
        source_id: None,
    }));

    let positions: Vec<Option<Point2>> =
        nodes.iter().map(|n| n.as_object().and_then(|o| o.position)).collect();
    let mut edges = Vec::with_capacity(nodes.len() * (nodes.len() - 1) / 2);
    for a in 0..nodes.len() {
        for b in a + 1..nodes.len() {
            let distance = match (positions[a], positions[b]) {
                (Some(p), Some(q)) => p.distance(&q),
                _ => UNKNOWN_DISTANCE,
            };
            edges.push(Edge { a, b, feature: EdgeFeature { kind: EdgeKind::Proximity, distance } });
        }
    }
    Ok(SpatialCommonsenseGraph::from_parts(nodes, edges, target))
}

/// Link every object node (target included) to the concepts the snapshot
/// returns for each requested relation. One node per concept token.
pub fn enrich_with_commonsense(
    graph: SpatialCommonsenseGraph,
    kb: &KnowledgeSnapshot,
    relations: &[EdgeKind],
) -> SpatialCommonsenseGraph {
    let relations: Vec<EdgeKind> =
        EdgeKind::SEMANTIC.into_iter().filter(|k| relations.contains(k)).collect();
    if relations.is_empty() {
        return graph;
    }
    let SpatialCommonsenseGraph { mut nodes, mut edges, target, .. } = graph;
    let mut concept_ids: HashMap<String, usize> = nodes
        .iter()
        .enumerate()
        .filter_map(|(i, n)| match n {
            Node::Concept(c) => Some((c.concept.clone(), i)),
            Node::Object(_) => None,
        })
        .collect();
    let object_ids: Vec<usize> = (0..nodes.len()).filter(|&i| nodes[i].is_object()).collect();
    for obj in object_ids {
        let category = nodes[obj].token().to_string();
        for &relation in &relations {
            for (concept, _weight) in kb.query(&category, relation) {
                let cid = match concept_ids.get(&concept) {
                    Some(&cid) => cid,
                    None => {
                        let cid = nodes.len();
                        nodes.push(Node::Concept(ConceptNode {
                            concept: concept.clone(),
                            relation_origins: BTreeSet::new(),
                        }));
                        concept_ids.insert(concept, cid);
                        cid
                    }
                };
                if let Node::Concept(c) = &mut nodes[cid] {
                    c.relation_origins.insert(relation);
                }
                edges.push(Edge {
                    a: obj.min(cid),
                    b: obj.max(cid),
                    feature: EdgeFeature { kind: relation, distance: UNKNOWN_DISTANCE },
                });
            }
        }
    }
    SpatialCommonsenseGraph::from_parts(nodes, edges, target)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{SceneObject, TargetSpec};
    use crate::knowledge::KnowledgeSnapshot;

    fn scene(points: &[(f64, f64)]) -> SceneRecord {
        let cats = ["bed", "desk", "chair", "chair", "lamp", "sofa"];
        SceneRecord {
            scene_id: "s0".into(),
            completeness: 0.5,
            objects: points
                .iter()
                .enumerate()
                .map(|(i, &(x, y))| SceneObject {
                    id: i as u32,
                    category: cats[i % cats.len()].into(),
                    position: Point2::new(x, y),
                })
                .collect(),
            targets: vec![TargetSpec { category: "pillow".into(), gt_positions: vec![Point2::new(1.0, 1.0)] }],
        }
    }

    fn check_edge_invariants(g: &SpatialCommonsenseGraph) {
        for e in g.edges() {
            assert!(e.a < e.b);
            let arr = e.feature.to_array();
            assert_eq!(arr[..3].iter().filter(|&&v| v == 1.0).count(), 1);
            assert_eq!(arr[..3].iter().filter(|&&v| v == 0.0).count(), 2);
            let both_observed = [e.a, e.b].iter().all(|&i| {
                matches!(&g.nodes()[i], Node::Object(o) if o.observed)
            });
            if e.feature.kind == EdgeKind::Proximity {
                assert!(g.nodes()[e.a].is_object() && g.nodes()[e.b].is_object());
                if both_observed {
                    assert!(e.feature.distance >= 0.0);
                } else {
                    assert_eq!(e.feature.distance, UNKNOWN_DISTANCE);
                }
            } else {
                assert_ne!(g.nodes()[e.a].is_object(), g.nodes()[e.b].is_object());
                assert_eq!(e.feature.distance, UNKNOWN_DISTANCE);
            }
        }
        let n_o = g.object_count();
        let prox = g.edges().iter().filter(|e| e.feature.kind == EdgeKind::Proximity).count();
        assert_eq!(prox, n_o * (n_o - 1) / 2);
    }

    #[test]
    fn spatial_graph_shape() {
        let g = build_spatial_graph(&scene(&[(0.0, 0.0), (4.0, 0.0), (0.0, 3.0)]), "pillow").unwrap();
        assert_eq!(g.object_count(), 4);
        assert_eq!(g.concept_count(), 0);
        assert_eq!(g.edges().len(), 6);
        assert_eq!(g.target(), 3);
        let e01 = g.edges().iter().find(|e| e.a == 0 && e.b == 1).unwrap();
        assert_eq!(e01.feature.distance, 4.0);
        let target_edges: Vec<_> = g.edges().iter().filter(|e| e.b == 3).collect();
        assert_eq!(target_edges.len(), 3);
        assert!(target_edges.iter().all(|e| e.feature.distance == -1.0));
        check_edge_invariants(&g);
        let nb = g.neighbourhood(3).unwrap();
        assert_eq!(nb.iter().map(|n| n.0).collect::<Vec<_>>(), vec![0, 1, 2]);
        assert!(nb.iter().all(|n| n.1.kind == EdgeKind::Proximity));
    }

    #[test]
    fn spatial_graph_errors() {
        let err = build_spatial_graph(&scene(&[(0.0, 0.0), (4.0, 0.0)]), "pillow").unwrap_err();
        assert!(matches!(err, GraphError::TooFewAnchors { found: 2, .. }));
        let err = build_spatial_graph(&scene(&[(0.0, 0.0), (4.0, 0.0), (0.0, 3.0)]), "piano").unwrap_err();
        assert!(matches!(err, GraphError::UnknownTarget { .. }));
        let g = build_spatial_graph(&scene(&[(0.0, 0.0), (4.0, 0.0), (0.0, 3.0)]), "pillow").unwrap();
        assert_eq!(g.neighbourhood(9), Err(GraphError::InvalidNode(9)));
    }

    #[test]
    fn commonsense_links_and_threshold() {
        let kb = KnowledgeSnapshot::parse(
            "AtLocation\tbed\tapartment\t2.0\nAtLocation\tbed\tmotel\t0.9\nUsedFor\tchair\tseat\t2.5\n\
             UsedFor\tpillow\tsleep\t3.0\nAtLocation\tdesk\tapartment\t1.5\n",
        )
        .unwrap();
        let base = build_spatial_graph(&scene(&[(0.0, 0.0), (4.0, 0.0), (0.0, 3.0), (1.0, 3.0)]), "pillow").unwrap();
        let g = enrich_with_commonsense(base.clone(), &kb, &EdgeKind::SEMANTIC);
        check_edge_invariants(&g);
        let tokens: Vec<&str> = g.nodes()[g.object_count()..].iter().map(|n| n.token()).collect();
        assert_eq!(tokens, vec!["apartment", "seat", "sleep"]);
        // apartment: linked from bed and desk by AtLocation
        let apartment = g.nodes().iter().position(|n| n.token() == "apartment").unwrap();
        let nb = g.neighbourhood(apartment).unwrap();
        assert_eq!(nb.iter().map(|n| n.0).collect::<Vec<_>>(), vec![0, 1]);
        assert!(nb.iter().all(|n| n.1.kind == EdgeKind::AtLocation && n.1.distance == -1.0));
        // both chairs share one seat node
        let seat = g.nodes().iter().position(|n| n.token() == "seat").unwrap();
        assert_eq!(g.neighbourhood(seat).unwrap().len(), 2);
        assert!(g.nodes().iter().all(|n| n.token() != "motel"));
        // target receives semantic edges too
        let sleep = g.nodes().iter().position(|n| n.token() == "sleep").unwrap();
        assert_eq!(g.neighbourhood(sleep).unwrap()[0].0, g.target());
        // proximity edges untouched
        let prox: Vec<_> = g.edges().iter().filter(|e| e.feature.kind == EdgeKind::Proximity).collect();
        assert_eq!(prox.len(), base.edges().len());
        // no relations → unchanged
        let same = enrich_with_commonsense(base.clone(), &kb, &[]);
        assert_eq!(same.edges(), base.edges());
        assert_eq!(same.nodes(), base.nodes());
    }

    #[test]
    fn concept_reached_by_both_relations_is_one_node() {
        let kb = KnowledgeSnapshot::parse("AtLocation\tbed\thome\t2.0\nUsedFor\tdesk\thome\t2.0\n").unwrap();
        let base = build_spatial_graph(&scene(&[(0.0, 0.0), (4.0, 0.0), (0.0, 3.0)]), "pillow").unwrap();
        let g = enrich_with_commonsense(base, &kb, &EdgeKind::SEMANTIC);
        assert_eq!(g.concept_count(), 1);
        match &g.nodes()[4] {
            Node::Concept(c) => assert_eq!(c.relation_origins.len(), 2),
            _ => panic!("expected concept"),
        }
        let only_at = g.restrict(&[EdgeKind::Proximity, EdgeKind::AtLocation]);
        assert_eq!(only_at.concept_count(), 1);
        assert_eq!(only_at.edges().len(), 7);
        let sg = g.restrict(&[EdgeKind::Proximity]);
        assert_eq!(sg.concept_count(), 0);
        assert_eq!(sg.edges().len(), 6);
    }
}
