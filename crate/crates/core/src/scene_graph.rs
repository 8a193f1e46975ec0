//! Predicate-as-node scene graphs.
//!
//! A scene graph holds entity nodes and predicate nodes. Every predicate
//! node links to exactly one subject entity and one object entity, so two
//! entities may carry any number of predicates between them. Nodes share a
//! joint index space: entities first, then predicates, so predicate `j`
//! has joint index `num_entities + j`.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fusion::ScoredGraph;

/// Entity and predicate class names, plus the shared `MASK` slot.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocabulary {
    entity_classes: Vec<String>,
    predicate_classes: Vec<String>,
    entity_index: HashMap<String, usize>,
    predicate_index: HashMap<String, usize>,
}

#[derive(Serialize, Deserialize)]
struct VocabularyRecord {
    entity_classes: Vec<String>,
    predicate_classes: Vec<String>,
}

impl Vocabulary {
    pub fn new(entity_classes: Vec<String>, predicate_classes: Vec<String>) -> Result<Self> {
        let entity_index = index_unique(&entity_classes, "entity")?;
        let predicate_index = index_unique(&predicate_classes, "predicate")?;
        Ok(Self {
            entity_classes,
            predicate_classes,
            entity_index,
            predicate_index,
        })
    }

    pub fn from_names<E, P>(entities: &[E], predicates: &[P]) -> Result<Self>
    where
        E: AsRef<str>,
        P: AsRef<str>,
    {
        Self::new(
            entities.iter().map(|s| s.as_ref().to_string()).collect(),
            predicates.iter().map(|s| s.as_ref().to_string()).collect(),
        )
    }

    pub fn num_entity_classes(&self) -> usize {
        self.entity_classes.len()
    }

    pub fn num_predicate_classes(&self) -> usize {
        self.predicate_classes.len()
    }

    /// Id of the `MASK` class in the joint one-hot space.
    pub fn mask_token(&self) -> usize {
        self.entity_classes.len() + self.predicate_classes.len()
    }

    /// Width of the joint one-hot encoding, `MASK` included.
    pub fn one_hot_dim(&self) -> usize {
        self.mask_token() + 1
    }

    pub fn entity_classes(&self) -> &[String] {
        &self.entity_classes
    }

    pub fn predicate_classes(&self) -> &[String] {
        &self.predicate_classes
    }

    pub fn entity_id(&self, name: &str) -> Option<usize> {
        self.entity_index.get(name).copied()
    }

    pub fn predicate_id(&self, name: &str) -> Option<usize> {
        self.predicate_index.get(name).copied()
    }

    pub fn entity_name(&self, id: usize) -> &str {
        &self.entity_classes[id]
    }

    pub fn predicate_name(&self, id: usize) -> &str {
        &self.predicate_classes[id]
    }

    pub fn to_json(&self) -> serde_json::Value {
        serde_json::to_value(VocabularyRecord {
            entity_classes: self.entity_classes.clone(),
            predicate_classes: self.predicate_classes.clone(),
        })
        .expect("vocabulary serializes")
    }

    pub fn from_json(value: &serde_json::Value) -> Result<Self> {
        let record: VocabularyRecord = serde_json::from_value(value.clone())?;
        Self::new(record.entity_classes, record.predicate_classes)
    }

    pub fn load(path: impl AsRef<std::path::Path>) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_json(&serde_json::from_str(&text)?)
    }

    pub fn save(&self, path: impl AsRef<std::path::Path>) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(&self.to_json())? + "\n")?;
        Ok(())
    }
}

fn index_unique(names: &[String], kind: &str) -> Result<HashMap<String, usize>> {
    let mut index = HashMap::with_capacity(names.len());
    for (i, name) in names.iter().enumerate() {
        if index.insert(name.clone(), i).is_some() {
            return Err(Error::Config(format!("duplicate {kind} class `{name}`")));
        }
    }
    Ok(index)
}

#[derive(Debug, Clone, PartialEq)]
pub struct EntityNode {
    pub class: usize,
    /// Optional normalized box. Carried through serialization, never interpreted.
    pub bbox: Option<[f64; 4]>,
}

impl EntityNode {
    pub fn new(class: usize) -> Self {
        Self { class, bbox: None }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct PredicateNode {
    pub class: usize,
    pub subject: usize,
    pub object: usize,
}

/// Whether a joint node index refers to an entity or a predicate.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NodeKind {
    Entity,
    Predicate,
}

/// An immutable, validated scene graph.
#[derive(Debug, Clone, PartialEq)]
pub struct SceneGraph {
    entities: Vec<EntityNode>,
    predicates: Vec<PredicateNode>,
}

impl SceneGraph {
    /// Builds a graph, checking that every predicate links two distinct,
    /// existing entities and every box lies in the unit hypercube.
    pub fn new(entities: Vec<EntityNode>, predicates: Vec<PredicateNode>) -> Result<Self> {
        for (i, e) in entities.iter().enumerate() {
            if let Some(b) = e.bbox {
                if b.iter().any(|v| !(0.0..=1.0).contains(v)) {
                    return Err(Error::Structure(format!("entity {i} has a box outside [0,1]: {b:?}")));
                }
            }
        }
        for (j, p) in predicates.iter().enumerate() {
            if p.subject >= entities.len() || p.object >= entities.len() {
                return Err(Error::Structure(format!(
                    "predicate {j} links ({}, {}) but only {} entities exist",
                    p.subject,
                    p.object,
                    entities.len()
                )));
            }
            if p.subject == p.object {
                return Err(Error::Structure(format!(
                    "predicate {j} has subject == object ({})",
                    p.subject
                )));
            }
        }
        Ok(Self { entities, predicates })
    }

    pub fn empty() -> Self {
        Self {
            entities: Vec::new(),
            predicates: Vec::new(),
        }
    }

    /// One predicate node per `(subject, predicate_class, object)` triplet, in order.
    pub fn from_triplets(triplets: &[(usize, usize, usize)], entities: Vec<EntityNode>) -> Result<Self> {
        let predicates = triplets
            .iter()
            .map(|&(subject, class, object)| PredicateNode { class, subject, object })
            .collect();
        Self::new(entities, predicates)
    }

    /// `(subject_class, predicate_class, object_class)` per predicate node.
    pub fn to_triplets(&self) -> Vec<(usize, usize, usize)> {
        self.predicates
            .iter()
            .map(|p| (self.entities[p.subject].class, p.class, self.entities[p.object].class))
            .collect()
    }

    pub fn named_triplets(&self, vocab: &Vocabulary) -> Vec<(String, String, String)> {
        self.to_triplets()
            .into_iter()
            .map(|(s, p, o)| {
                (
                    vocab.entity_name(s).to_string(),
                    vocab.predicate_name(p).to_string(),
                    vocab.entity_name(o).to_string(),
                )
            })
            .collect()
    }

    pub fn entities(&self) -> &[EntityNode] {
        &self.entities
    }

    pub fn predicates(&self) -> &[PredicateNode] {
        &self.predicates
    }

    pub fn num_entities(&self) -> usize {
        self.entities.len()
    }

    pub fn num_predicates(&self) -> usize {
        self.predicates.len()
    }

    pub fn num_nodes(&self) -> usize {
        self.entities.len() + self.predicates.len()
    }

    pub fn is_empty(&self) -> bool {
        self.num_nodes() == 0
    }

    pub fn kind(&self, node: usize) -> NodeKind {
        if node < self.entities.len() {
            NodeKind::Entity
        } else {
            NodeKind::Predicate
        }
    }

    /// Class id of a joint node index within its own type's class list.
    pub fn class_of(&self, node: usize) -> usize {
        match self.kind(node) {
            NodeKind::Entity => self.entities[node].class,
            NodeKind::Predicate => self.predicates[node - self.entities.len()].class,
        }
    }

    /// Class ids of all nodes in joint order.
    pub fn node_classes(&self) -> Vec<usize> {
        (0..self.num_nodes()).map(|i| self.class_of(i)).collect()
    }

    /// Same structure, new per-node classes (joint order).
    pub fn with_classes(&self, classes: &[usize]) -> Result<Self> {
        if classes.len() != self.num_nodes() {
            return Err(Error::Contract(format!(
                "expected {} classes, got {}",
                self.num_nodes(),
                classes.len()
            )));
        }
        let ne = self.entities.len();
        let entities = self
            .entities
            .iter()
            .zip(classes)
            .map(|(e, &class)| EntityNode { class, bbox: e.bbox })
            .collect();
        let predicates = self
            .predicates
            .iter()
            .zip(&classes[ne..])
            .map(|(p, &class)| PredicateNode { class, ..*p })
            .collect();
        Ok(Self { entities, predicates })
    }

    /// True when both graphs have the same node counts and links.
    pub fn same_structure(&self, other: &SceneGraph) -> bool {
        self.entities.len() == other.entities.len()
            && self.predicates.len() == other.predicates.len()
            && self
                .predicates
                .iter()
                .zip(&other.predicates)
                .all(|(a, b)| a.subject == b.subject && a.object == b.object)
    }

    /// Checks every class id against a vocabulary.
    pub fn check_vocabulary(&self, vocab: &Vocabulary) -> Result<()> {
        if let Some(e) = self.entities.iter().find(|e| e.class >= vocab.num_entity_classes()) {
            return Err(Error::Structure(format!(
                "entity class {} out of range ({} classes)",
                e.class,
                vocab.num_entity_classes()
            )));
        }
        if let Some(p) = self
            .predicates
            .iter()
            .find(|p| p.class >= vocab.num_predicate_classes())
        {
            return Err(Error::Structure(format!(
                "predicate class {} out of range ({} classes)",
                p.class,
                vocab.num_predicate_classes()
            )));
        }
        Ok(())
    }

    /// Subject and object adjacency over the joint node space.
    pub fn adjacency_masks(&self) -> AdjacencyMasks {
        let n = self.num_nodes();
        let ne = self.entities.len();
        let mut subject = BinaryMatrix::zeros(n);
        let mut object = BinaryMatrix::zeros(n);
        for (j, p) in self.predicates.iter().enumerate() {
            let node = ne + j;
            subject.set_symmetric(node, p.subject);
            object.set_symmetric(node, p.object);
        }
        AdjacencyMasks { subject, object }
    }

    pub fn to_record(&self, vocab: &Vocabulary) -> GraphRecord {
        GraphRecord {
            entities: self
                .entities
                .iter()
                .map(|e| EntityRecord {
                    class: vocab.entity_name(e.class).to_string(),
                    bbox: e.bbox,
                })
                .collect(),
            predicates: self
                .predicates
                .iter()
                .map(|p| PredicateRecord {
                    class: vocab.predicate_name(p.class).to_string(),
                    subject: p.subject,
                    object: p.object,
                })
                .collect(),
        }
    }

    /// Resolves class names; `line` is reported in errors (1-based).
    pub fn from_record(record: &GraphRecord, vocab: &Vocabulary, line: usize) -> Result<Self> {
        let entities = record
            .entities
            .iter()
            .map(|e| {
                let class = vocab.entity_id(&e.class).ok_or_else(|| Error::UnknownClass {
                    line,
                    kind: "entity",
                    class: e.class.clone(),
                })?;
                Ok(EntityNode { class, bbox: e.bbox })
            })
            .collect::<Result<Vec<_>>>()?;
        let predicates = record
            .predicates
            .iter()
            .map(|p| {
                let class = vocab.predicate_id(&p.class).ok_or_else(|| Error::UnknownClass {
                    line,
                    kind: "predicate",
                    class: p.class.clone(),
                })?;
                Ok(PredicateNode {
                    class,
                    subject: p.subject,
                    object: p.object,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Self::new(entities, predicates).map_err(|e| Error::Parse {
            line,
            message: e.to_string(),
        })
    }
}

/// One JSONL line of the corpus format.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GraphRecord {
    pub entities: Vec<EntityRecord>,
    pub predicates: Vec<PredicateRecord>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EntityRecord {
    pub class: String,
    #[serde(rename = "box", default, skip_serializing_if = "Option::is_none")]
    pub bbox: Option<[f64; 4]>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredicateRecord {
    pub class: String,
    pub subject: usize,
    pub object: usize,
}

/// Square 0/1 matrix stored densely.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BinaryMatrix {
    n: usize,
    data: Vec<bool>,
}

impl BinaryMatrix {
    pub fn zeros(n: usize) -> Self {
        Self {
            n,
            data: vec![false; n * n],
        }
    }

    pub fn from_fn(n: usize, f: impl Fn(usize, usize) -> bool) -> Self {
        let mut m = Self::zeros(n);
        for i in 0..n {
            for j in 0..n {
                m.data[i * n + j] = f(i, j);
            }
        }
        m
    }

    fn set_symmetric(&mut self, i: usize, j: usize) {
        self.data[i * self.n + j] = true;
        self.data[j * self.n + i] = true;
    }

    pub fn size(&self) -> usize {
        self.n
    }

    pub fn get(&self, i: usize, j: usize) -> bool {
        self.data[i * self.n + j]
    }

    pub fn as_slice(&self) -> &[bool] {
        &self.data
    }

    pub fn row_count(&self, i: usize) -> usize {
        self.data[i * self.n..(i + 1) * self.n].iter().filter(|&&b| b).count()
    }

    pub fn is_symmetric(&self) -> bool {
        (0..self.n).all(|i| (0..self.n).all(|j| self.get(i, j) == self.get(j, i)))
    }
}

/// Subject-edge and object-edge adjacency over the joint node space.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AdjacencyMasks {
    pub subject: BinaryMatrix,
    pub object: BinaryMatrix,
}

/// Indices kept by [`prune_top_k`], in their original relative order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PruneSelection {
    pub entities: Vec<usize>,
    pub predicates: Vec<usize>,
}

impl PruneSelection {
    /// Picks the `k` most confident predicates (ties to the lower index) and
    /// every entity they reference.
    pub fn top_k(graph: &SceneGraph, predicate_confidence: &[f64], k: usize) -> Self {
        let ne = graph.num_entities();
        let mut order: Vec<usize> = (0..graph.num_predicates()).collect();
        order.sort_by(|&a, &b| {
            predicate_confidence[ne + b]
                .total_cmp(&predicate_confidence[ne + a])
                .then(a.cmp(&b))
        });
        order.truncate(k);
        order.sort_unstable();
        let mut used = vec![false; ne];
        for &j in &order {
            let p = graph.predicates()[j];
            used[p.subject] = true;
            used[p.object] = true;
        }
        Self {
            entities: (0..ne).filter(|&i| used[i]).collect(),
            predicates: order,
        }
    }

    /// Applies the selection to any graph with the same structure.
    pub fn apply(&self, graph: &SceneGraph) -> SceneGraph {
        let mut remap = vec![usize::MAX; graph.num_entities()];
        for (new, &old) in self.entities.iter().enumerate() {
            remap[old] = new;
        }
        let entities = self.entities.iter().map(|&i| graph.entities()[i].clone()).collect();
        let predicates = self
            .predicates
            .iter()
            .map(|&j| {
                let p = graph.predicates()[j];
                PredicateNode {
                    class: p.class,
                    subject: remap[p.subject],
                    object: remap[p.object],
                }
            })
            .collect();
        SceneGraph { entities, predicates }
    }

    /// Joint indices (in the source graph) of every kept node, in pruned joint order.
    pub fn joint_indices(&self, source_entities: usize) -> Vec<usize> {
        self.entities
            .iter()
            .copied()
            .chain(self.predicates.iter().map(|&j| source_entities + j))
            .collect()
    }
}

/// Keeps the `k` most confident predicates and the entities they reference.
pub fn prune_top_k(graph: &ScoredGraph, k: usize) -> SceneGraph {
    PruneSelection::top_k(graph.graph(), graph.confidences(), k).apply(graph.graph())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn vocab() -> Vocabulary {
        Vocabulary::from_names(&["person", "horse", "hat"], &["riding", "on", "wearing"]).unwrap()
    }

    fn person_riding_horse() -> SceneGraph {
        let v = vocab();
        SceneGraph::from_triplets(
            &[(0, v.predicate_id("riding").unwrap(), 1)],
            vec![EntityNode::new(0), EntityNode::new(1)],
        )
        .unwrap()
    }

    #[test]
    fn vocabulary_layout() {
        let v = vocab();
        assert_eq!(v.mask_token(), 6);
        assert_eq!(v.one_hot_dim(), 7);
        assert!(Vocabulary::from_names(&["a", "a"], &["p"]).is_err());
    }

    #[test]
    fn from_triplets_builds_predicate_nodes() {
        let g = person_riding_horse();
        assert_eq!(g.num_entities(), 2);
        assert_eq!(
            g.predicates(),
            &[PredicateNode {
                class: 0,
                subject: 0,
                object: 1
            }]
        );

        let lone = SceneGraph::from_triplets(&[], vec![EntityNode::new(0)]).unwrap();
        assert_eq!((lone.num_entities(), lone.num_predicates()), (1, 0));

        let multi =
            SceneGraph::from_triplets(&[(0, 1, 1), (0, 0, 1)], vec![EntityNode::new(0), EntityNode::new(1)]).unwrap();
        assert_eq!(multi.num_predicates(), 2);
        assert_eq!(multi.to_triplets(), vec![(0, 1, 1), (0, 0, 1)]);
    }

    #[test]
    fn from_triplets_rejects_bad_links() {
        let ents = || vec![EntityNode::new(0), EntityNode::new(1)];
        assert!(matches!(
            SceneGraph::from_triplets(&[(0, 0, 2)], ents()),
            Err(Error::Structure(_))
        ));
        assert!(matches!(
            SceneGraph::from_triplets(&[(1, 0, 1)], ents()),
            Err(Error::Structure(_))
        ));
    }

    #[test]
    fn adjacency_of_single_triplet() {
        let masks = person_riding_horse().adjacency_masks();
        for i in 0..3 {
            for j in 0..3 {
                let s = matches!((i, j), (2, 0) | (0, 2));
                let o = matches!((i, j), (2, 1) | (1, 2));
                assert_eq!(masks.subject.get(i, j), s, "a_s[{i}][{j}]");
                assert_eq!(masks.object.get(i, j), o, "a_o[{i}][{j}]");
            }
        }
    }

    #[test]
    fn adjacency_without_predicates_is_zero() {
        let g = SceneGraph::from_triplets(&[], vec![EntityNode::new(0), EntityNode::new(1)]).unwrap();
        let m = g.adjacency_masks();
        assert!(m.subject.as_slice().iter().all(|&b| !b));
        assert!(m.object.as_slice().iter().all(|&b| !b));
    }

    #[test]
    fn shared_subject_has_two_ones() {
        let g = SceneGraph::from_triplets(
            &[(0, 0, 1), (0, 2, 2)],
            vec![EntityNode::new(0), EntityNode::new(1), EntityNode::new(2)],
        )
        .unwrap();
        let m = g.adjacency_masks();
        assert_eq!(m.subject.row_count(0), 2);
        assert!(m.subject.is_symmetric() && m.object.is_symmetric());
    }

    #[test]
    fn named_triplets() {
        let g = person_riding_horse();
        assert_eq!(
            g.named_triplets(&vocab()),
            vec![("person".into(), "riding".into(), "horse".into())]
        );
        assert!(SceneGraph::from_triplets(&[], vec![]).unwrap().to_triplets().is_empty());
    }

    #[test]
    fn prune_keeps_most_confident() {
        let g = SceneGraph::from_triplets(
            &[(0, 0, 1), (1, 1, 2), (2, 2, 3)],
            (0..4).map(|_| EntityNode::new(0)).collect(),
        )
        .unwrap();
        let mut conf = vec![1.0; 4];
        conf.extend([0.9, 0.2, 0.8]);
        let sel = PruneSelection::top_k(&g, &conf, 2);
        assert_eq!(sel.predicates, vec![0, 2]);
        assert_eq!(sel.entities, vec![0, 1, 2, 3]);
        let pruned = sel.apply(&g);
        assert_eq!(pruned.num_predicates(), 2);

        let sel = PruneSelection::top_k(&g, &conf, 1);
        assert_eq!(sel.entities, vec![0, 1]);

        let empty = PruneSelection::top_k(&g, &conf, 0).apply(&g);
        assert!(empty.is_empty());
    }

    #[test]
    fn prune_ties_prefer_lower_index() {
        let g = SceneGraph::from_triplets(
            &[(0, 0, 1), (1, 1, 2), (2, 2, 0)],
            (0..3).map(|_| EntityNode::new(0)).collect(),
        )
        .unwrap();
        let conf = [1.0, 1.0, 1.0, 0.5, 0.5, 0.5];
        assert_eq!(PruneSelection::top_k(&g, &conf, 2).predicates, vec![0, 1]);
    }

    #[test]
    fn prune_with_large_k_drops_only_isolated_entities() {
        let g = SceneGraph::from_triplets(
            &[(2, 0, 0)],
            vec![EntityNode::new(0), EntityNode::new(1), EntityNode::new(2)],
        )
        .unwrap();
        let pruned = PruneSelection::top_k(&g, &[1.0; 4], 100).apply(&g);
        assert_eq!(pruned.num_entities(), 2);
        assert_eq!(pruned.entities()[0].class, 0);
        assert_eq!(
            pruned.predicates()[0],
            PredicateNode {
                class: 0,
                subject: 1,
                object: 0
            }
        );
    }

    #[test]
    fn record_round_trip_and_unknown_class() {
        let v = vocab();
        let mut g = person_riding_horse();
        g.entities[0].bbox = Some([0.1, 0.2, 0.3, 0.4]);
        let rec = g.to_record(&v);
        let line = serde_json::to_string(&rec).unwrap();
        assert_eq!(
            line,
            r#"{"entities":[{"class":"person","box":[0.1,0.2,0.3,0.4]},{"class":"horse"}],"predicates":[{"class":"riding","subject":0,"object":1}]}"#
        );
        let back = SceneGraph::from_record(&serde_json::from_str(&line).unwrap(), &v, 1).unwrap();
        assert_eq!(back, g);

        let mut bad = rec.clone();
        bad.entities[1].class = "unicorn".into();
        let err = SceneGraph::from_record(&bad, &v, 7).unwrap_err();
        assert!(err.to_string().contains("line 7") && err.to_string().contains("unicorn"));
    }

    #[test]
    fn rejects_box_outside_unit_cube() {
        let e = EntityNode {
            class: 0,
            bbox: Some([0.0, 0.5, 1.2, 0.1]),
        };
        assert!(SceneGraph::new(vec![e], vec![]).is_err());
    }
}
