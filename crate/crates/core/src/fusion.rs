//! Scored graphs and confidence-weighted logit fusion.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scene_graph::{GraphRecord, NodeKind, SceneGraph, Vocabulary};
use crate::tensor::softmax;

/// Index of the largest entry; ties go to the lowest index.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v > values[best] {
            best = i;
        }
    }
    best
}

/// Maximum softmax probability of a logit vector.
pub fn confidence(logits: &[f64]) -> Result<f64> {
    if logits.is_empty() {
        return Err(Error::Contract("confidence of an empty logit vector".into()));
    }
    Ok(softmax(logits).into_iter().fold(0.0, f64::max))
}

/// Confidence-weighted average of two logit vectors.
///
/// ```
/// let fused = glat::fusion::fuse_logits(&[2.0, 0.0], &[0.0, 2.0]).unwrap();
/// assert_eq!(fused, vec![1.0, 1.0]);
/// ```
pub fn fuse_logits(perception: &[f64], commonsense: &[f64]) -> Result<Vec<f64>> {
    if perception.len() != commonsense.len() {
        return Err(Error::Contract(format!(
            "fuse_logits: widths {} and {} differ",
            perception.len(),
            commonsense.len()
        )));
    }
    let qp = confidence(perception)?;
    let qc = confidence(commonsense)?;
    let total = qp + qc;
    Ok(perception
        .iter()
        .zip(commonsense)
        .map(|(lp, lc)| (qp * lp + qc * lc) / total)
        .collect())
}

/// A scene graph with one logit vector per node.
///
/// Entity rows are scored over entity classes and predicate rows over
/// predicate classes. The stored class of every node is the argmax of its row.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoredGraph {
    graph: SceneGraph,
    logits: Vec<Vec<f64>>,
    confidences: Vec<f64>,
}

impl ScoredGraph {
    /// Attaches logits to `structure`, relabelling every node with its argmax class.
    pub fn from_logits(structure: &SceneGraph, logits: Vec<Vec<f64>>) -> Result<Self> {
        if logits.len() != structure.num_nodes() {
            return Err(Error::Contract(format!(
                "{} logit rows for a graph with {} nodes",
                logits.len(),
                structure.num_nodes()
            )));
        }
        let classes: Vec<usize> = logits.iter().map(|row| argmax(row)).collect();
        let graph = structure.with_classes(&classes)?;
        let confidences = logits.iter().map(|row| confidence(row)).collect::<Result<_>>()?;
        Ok(Self {
            graph,
            logits,
            confidences,
        })
    }

    /// One-hot logits scaled by `1 / temperature` at each node's own class.
    pub fn one_hot(graph: &SceneGraph, vocab: &Vocabulary, temperature: f64) -> Self {
        let logits = (0..graph.num_nodes())
            .map(|i| {
                let width = match graph.kind(i) {
                    NodeKind::Entity => vocab.num_entity_classes(),
                    NodeKind::Predicate => vocab.num_predicate_classes(),
                };
                let mut row = vec![0.0; width];
                row[graph.class_of(i)] = 1.0 / temperature;
                row
            })
            .collect();
        Self::from_logits(graph, logits).expect("one-hot rows match the graph")
    }

    pub fn graph(&self) -> &SceneGraph {
        &self.graph
    }

    pub fn logits(&self) -> &[Vec<f64>] {
        &self.logits
    }

    /// Per-node confidence in joint node order.
    pub fn confidences(&self) -> &[f64] {
        &self.confidences
    }

    /// Checks that every row has the width its node type requires.
    pub fn check_vocabulary(&self, vocab: &Vocabulary) -> Result<()> {
        for (i, row) in self.logits.iter().enumerate() {
            let width = match self.graph.kind(i) {
                NodeKind::Entity => vocab.num_entity_classes(),
                NodeKind::Predicate => vocab.num_predicate_classes(),
            };
            if row.len() != width {
                return Err(Error::Contract(format!(
                    "node {i} has {} logits, expected {width}",
                    row.len()
                )));
            }
        }
        Ok(())
    }

    pub fn to_record(&self, vocab: &Vocabulary) -> ScoredRecord {
        ScoredRecord {
            graph: self.graph.to_record(vocab),
            logits: self.logits.clone(),
            provenance: None,
        }
    }

    pub fn from_record(record: &ScoredRecord, vocab: &Vocabulary, line: usize) -> Result<Self> {
        let structure = SceneGraph::from_record(&record.graph, vocab, line)?;
        let scored = Self::from_logits(&structure, record.logits.clone()).map_err(|e| Error::Parse {
            line,
            message: e.to_string(),
        })?;
        scored.check_vocabulary(vocab).map_err(|e| Error::Parse {
            line,
            message: e.to_string(),
        })?;
        Ok(scored)
    }
}

/// JSONL form of a [`ScoredGraph`]: a graph record plus a `logits` array.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoredRecord {
    #[serde(flatten)]
    pub graph: GraphRecord,
    pub logits: Vec<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub provenance: Option<Vec<Provenance>>,
}

/// Which input a fused node's final class agrees with.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Provenance {
    /// Both inputs already had this class.
    Agreement,
    Perception,
    Commonsense,
    /// The fused argmax differs from both inputs.
    Neither,
}

/// Fuses two scored graphs node by node. Structure and boxes come from `perception`.
pub fn fuse_graphs(perception: &ScoredGraph, commonsense: &ScoredGraph) -> Result<ScoredGraph> {
    if !perception.graph.same_structure(&commonsense.graph) {
        return Err(Error::Structure(
            "fuse_graphs: perception and commonsense graphs differ in structure".into(),
        ));
    }
    let logits = perception
        .logits
        .iter()
        .zip(&commonsense.logits)
        .map(|(lp, lc)| fuse_logits(lp, lc))
        .collect::<Result<_>>()?;
    ScoredGraph::from_logits(&perception.graph, logits)
}

/// Per-node provenance of a fused graph.
pub fn provenance(perception: &ScoredGraph, commonsense: &ScoredGraph, fused: &ScoredGraph) -> Vec<Provenance> {
    (0..fused.graph.num_nodes())
        .map(|i| {
            let (p, c, f) = (
                perception.graph.class_of(i),
                commonsense.graph.class_of(i),
                fused.graph.class_of(i),
            );
            match (f == p, f == c) {
                (true, true) => Provenance::Agreement,
                (true, false) => Provenance::Perception,
                (false, true) => Provenance::Commonsense,
                (false, false) => Provenance::Neither,
            }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scene_graph::EntityNode;
    use proptest::prelude::*;

    #[test]
    fn confidence_examples() {
        assert!((confidence(&[0.0; 5]).unwrap() - 0.2).abs() < 1e-15);
        assert!((confidence(&[3f64.ln(), 0.0]).unwrap() - 0.75).abs() < 1e-15);
        assert!(confidence(&[]).is_err());
    }

    #[test]
    fn fuse_examples() {
        let v = [0.3, -1.0, 2.0];
        assert_eq!(fuse_logits(&v, &v).unwrap(), v.to_vec());
        assert_eq!(fuse_logits(&[2.0, 0.0], &[0.0, 2.0]).unwrap(), vec![1.0, 1.0]);

        let fused = fuse_logits(&[3.0, 0.0, 0.0], &[0.0, 1.0, 1.0]).unwrap();
        let e = std::f64::consts::E;
        let (qp, qc) = (e.powi(3) / (e.powi(3) + 2.0), e / (1.0 + 2.0 * e));
        let oracle = [3.0 * qp / (qp + qc), qc / (qp + qc), qc / (qp + qc)];
        for (a, b) in fused.iter().zip(oracle) {
            assert!((a - b).abs() < 1e-12);
        }
        for (a, b) in fused.iter().zip([2.0487, 0.3171, 0.3171]) {
            assert!((a - b).abs() < 1e-4);
        }
        assert!(fuse_logits(&[1.0], &[1.0, 2.0]).is_err());
    }

    #[test]
    fn argmax_ties_go_low() {
        assert_eq!(argmax(&[1.0, 3.0, 3.0]), 1);
        assert_eq!(argmax(&[0.0, 0.0]), 0);
    }

    fn two_node_scored(lp: Vec<Vec<f64>>) -> ScoredGraph {
        let g = SceneGraph::from_triplets(&[(0, 0, 1)], vec![EntityNode::new(0), EntityNode::new(0)]).unwrap();
        ScoredGraph::from_logits(&g, lp).unwrap()
    }

    #[test]
    fn fuse_graphs_identity_and_override() {
        let gp = two_node_scored(vec![vec![2.0, 0.0], vec![0.5, 0.0], vec![0.0, 0.5, 0.0]]);
        assert_eq!(fuse_graphs(&gp, &gp).unwrap(), gp);

        // A flat wrong perception row against a sharp commonsense row.
        let gp = two_node_scored(vec![vec![0.5, 0.0], vec![0.5, 0.0], vec![0.5, 0.0, 0.0]]);
        let gc = two_node_scored(vec![vec![4.0, 0.0], vec![0.0, 4.0], vec![0.0, 0.0, 4.0]]);
        let gf = fuse_graphs(&gp, &gc).unwrap();
        assert_eq!(gf.graph().node_classes(), vec![0, 1, 2]);
        assert_eq!(
            provenance(&gp, &gc, &gf),
            vec![Provenance::Agreement, Provenance::Commonsense, Provenance::Commonsense]
        );
    }

    #[test]
    fn fuse_graphs_rejects_structure_mismatch() {
        let gp = two_node_scored(vec![vec![1.0, 0.0], vec![1.0, 0.0], vec![1.0, 0.0, 0.0]]);
        let other = SceneGraph::from_triplets(&[(1, 0, 0)], vec![EntityNode::new(0), EntityNode::new(0)]).unwrap();
        let gc = ScoredGraph::from_logits(&other, gp.logits().to_vec()).unwrap();
        assert!(matches!(fuse_graphs(&gp, &gc), Err(Error::Structure(_))));
    }

    /// Under the two-temperature simulator a correct commonsense row at the
    /// sharp temperature always overrides a wrong perception row at the flat one.
    #[test]
    fn sharp_commonsense_overrides_flat_perception() {
        for (t_c, t_w) in [(0.25, 2.0), (0.5, 1.0), (0.1, 5.0)] {
            for width in 2..12 {
                let mut lp = vec![0.0; width];
                lp[0] = 1.0 / t_w;
                let mut lc = vec![0.0; width];
                lc[1] = 1.0 / t_c;
                let fused = fuse_logits(&lp, &lc).unwrap();
                assert_eq!(argmax(&fused), 1, "t_c={t_c} t_w={t_w} width={width}");
            }
        }
    }

    #[test]
    fn scored_record_round_trip() {
        let vocab = Vocabulary::from_names(&["a", "b"], &["x", "y", "z"]).unwrap();
        let gp = two_node_scored(vec![vec![0.25, 1.0], vec![2.0, 0.0], vec![0.0, 0.1, 3.5]]);
        let line = serde_json::to_string(&gp.to_record(&vocab)).unwrap();
        let back: ScoredRecord = serde_json::from_str(&line).unwrap();
        assert_eq!(ScoredGraph::from_record(&back, &vocab, 1).unwrap(), gp);
    }

    fn logit_pair() -> impl Strategy<Value = (Vec<f64>, Vec<f64>)> {
        (2usize..8).prop_flat_map(|w| {
            (
                proptest::collection::vec(-20.0f64..20.0, w),
                proptest::collection::vec(-20.0f64..20.0, w),
            )
        })
    }

    proptest! {
        #[test]
        fn fused_is_convex((a, b) in logit_pair()) {
            let f = fuse_logits(&a, &b).unwrap();
            for ((x, y), z) in a.iter().zip(&b).zip(&f) {
                prop_assert!(*z >= x.min(*y) - 1e-12 && *z <= x.max(*y) + 1e-12);
            }
        }

        #[test]
        fn fusion_is_symmetric((a, b) in logit_pair()) {
            prop_assert_eq!(fuse_logits(&a, &b).unwrap(), fuse_logits(&b, &a).unwrap());
        }

        #[test]
        fn fusion_is_shift_covariant((a, b) in logit_pair(), k in -10.0f64..10.0) {
            let f = fuse_logits(&a, &b).unwrap();
            let sa: Vec<f64> = a.iter().map(|v| v + k).collect();
            let sb: Vec<f64> = b.iter().map(|v| v + k).collect();
            let g = fuse_logits(&sa, &sb).unwrap();
            for (x, y) in f.iter().zip(&g) {
                prop_assert!((x + k - y).abs() < 1e-9);
            }
        }

        #[test]
        fn agreement_is_preserved((a, b) in logit_pair()) {
            if argmax(&a) == argmax(&b) {
                prop_assert_eq!(argmax(&fuse_logits(&a, &b).unwrap()), argmax(&a));
            }
        }

        #[test]
        fn confidence_is_shift_invariant(a in proptest::collection::vec(-20.0f64..20.0, 2..8), k in -10.0f64..10.0) {
            let s: Vec<f64> = a.iter().map(|v| v + k).collect();
            prop_assert!((confidence(&a).unwrap() - confidence(&s).unwrap()).abs() < 1e-12);
            let c = confidence(&a).unwrap();
            prop_assert!(c >= 1.0 / a.len() as f64 - 1e-15 && c <= 1.0);
        }
    }
}
