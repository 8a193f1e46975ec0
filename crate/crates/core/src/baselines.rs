//! The triplet-frequency prior and head-composition ablations of GLAT.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::glat::{GlatConfig, MaskedGraph};
use crate::metrics::MaskedPredictor;
use crate::scene_graph::{NodeKind, SceneGraph};

/// Predicate counts per ordered `(subject class, object class)` pair.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct FrequencyTable {
    counts: BTreeMap<(usize, usize), Vec<u64>>,
    totals: Vec<u64>,
    graphs: usize,
    predicate_classes: usize,
}

impl FrequencyTable {
    pub fn new(predicate_classes: usize) -> Self {
        Self {
            counts: BTreeMap::new(),
            totals: vec![0; predicate_classes],
            graphs: 0,
            predicate_classes,
        }
    }

    pub fn add_graph(&mut self, graph: &SceneGraph) {
        self.graphs += 1;
        for p in graph.predicates() {
            let key = (graph.entities()[p.subject].class, graph.entities()[p.object].class);
            let n = self.predicate_classes;
            self.counts.entry(key).or_insert_with(|| vec![0; n])[p.class] += 1;
            self.totals[p.class] += 1;
        }
    }

    /// Per-predicate counts for a pair; `None` if the pair was never seen.
    pub fn counts(&self, subject: usize, object: usize) -> Option<&[u64]> {
        self.counts.get(&(subject, object)).map(Vec::as_slice)
    }

    /// Training count of one `(subject, predicate, object)` triplet.
    pub fn triplet_count(&self, subject: usize, predicate: usize, object: usize) -> u64 {
        self.counts(subject, object).map_or(0, |c| c[predicate])
    }

    pub fn pairs(&self) -> impl Iterator<Item = ((usize, usize), &[u64])> {
        self.counts.iter().map(|(k, v)| (*k, v.as_slice()))
    }

    pub fn graphs_seen(&self) -> usize {
        self.graphs
    }

    pub fn predicate_classes(&self) -> usize {
        self.predicate_classes
    }

    /// Most frequent predicate over the whole corpus, ties to the lowest id.
    pub fn global_mode(&self) -> usize {
        argmax_count(&self.totals)
    }
}

fn argmax_count(counts: &[u64]) -> usize {
    let mut best = 0;
    for (i, &c) in counts.iter().enumerate() {
        if c > counts[best] {
            best = i;
        }
    }
    best
}

/// Exact triplet counts of a corpus.
pub fn build_frequency(corpus: &[SceneGraph], predicate_classes: usize) -> FrequencyTable {
    let mut table = FrequencyTable::new(predicate_classes);
    for g in corpus {
        table.add_graph(g);
    }
    table
}

/// Most frequent predicate for the pair, ties to the lowest id; unseen pairs
/// fall back to [`FrequencyTable::global_mode`].
pub fn frequency_predict(table: &FrequencyTable, subject: usize, object: usize) -> usize {
    match table.counts(subject, object) {
        Some(c) => argmax_count(c),
        None => table.global_mode(),
    }
}

impl MaskedPredictor for FrequencyTable {
    /// Predicts masked predicates only. A predicate whose subject or object is
    /// itself masked gets the global mode.
    fn predict(&self, input: &MaskedGraph) -> Result<Vec<Option<usize>>> {
        let g = input.truth();
        let ne = g.num_entities();
        let masked = |i: usize| input.masked_indices().binary_search(&i).is_ok();
        Ok((0..g.num_nodes())
            .map(|i| match g.kind(i) {
                NodeKind::Entity => None,
                NodeKind::Predicate => {
                    let p = g.predicates()[i - ne];
                    Some(if masked(p.subject) || masked(p.object) {
                        self.global_mode()
                    } else {
                        frequency_predict(self, g.entities()[p.subject].class, g.entities()[p.object].class)
                    })
                }
            })
            .collect())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Ablation {
    /// Every head attends globally.
    GlobalOnly,
    /// Half subject-local, half object-local heads.
    LocalOnly,
    /// As `LocalOnly` with uniform attention over neighbours.
    LocalFixed,
}

impl Ablation {
    pub const ALL: [Ablation; 3] = [Ablation::GlobalOnly, Ablation::LocalOnly, Ablation::LocalFixed];

    pub fn name(self) -> &'static str {
        match self {
            Ablation::GlobalOnly => "global_only",
            Ablation::LocalOnly => "local_only",
            Ablation::LocalFixed => "local_fixed",
        }
    }
}

/// The reference config with its heads recomposed; width, depth, total head
/// count and decoders are unchanged.
pub fn make_ablation(kind: Ablation, config: &GlatConfig) -> Result<GlatConfig> {
    let total = config.total_heads();
    let mut out = config.clone();
    match kind {
        Ablation::GlobalOnly => {
            out.global_heads = total;
            out.subject_heads = 0;
            out.object_heads = 0;
            out.fixed_local_attention = false;
        }
        Ablation::LocalOnly | Ablation::LocalFixed => {
            if total < 2 {
                return Err(Error::Config("local ablations need at least two heads".into()));
            }
            out.global_heads = 0;
            out.subject_heads = total.div_ceil(2);
            out.object_heads = total / 2;
            out.fixed_local_attention = kind == Ablation::LocalFixed;
        }
    }
    out.validate()?;
    Ok(out)
}
