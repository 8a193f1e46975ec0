//! A stand-in for an image-based scene graph model: copies the true structure,
//! flips a fraction of node classes and emits calibrated one-hot logits.

use std::collections::BTreeMap;

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fusion::{fuse_graphs, ScoredGraph};
use crate::glat::GlatModel;
use crate::rng;
use crate::scene_graph::{NodeKind, PruneSelection, SceneGraph, Vocabulary};

const PERCEPTION_STREAM: u64 = 0x9e4c;

fn default_temperature_correct() -> f64 {
    0.25
}

fn default_temperature_wrong() -> f64 {
    2.0
}

fn default_true() -> bool {
    true
}

/// Wrong-class weights per true class, by name. Classes left out fall back to
/// uniform confusion.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ConfusionSpec {
    #[serde(default)]
    pub entities: BTreeMap<String, BTreeMap<String, f64>>,
    #[serde(default)]
    pub predicates: BTreeMap<String, BTreeMap<String, f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoiseConfig {
    /// Probability that a node's class is replaced by a wrong one.
    pub corruption_rate: f64,
    #[serde(default)]
    pub confusion: Option<ConfusionSpec>,
    /// Logit scale is `1 / temperature`; lower means more confident.
    #[serde(default = "default_temperature_correct")]
    pub temperature_correct: f64,
    #[serde(default = "default_temperature_wrong")]
    pub temperature_wrong: f64,
    /// When false, entity classes are always kept (predicate classification).
    #[serde(default = "default_true")]
    pub corrupt_entities: bool,
    #[serde(default)]
    pub seed: u64,
}

impl NoiseConfig {
    pub fn new(corruption_rate: f64) -> Self {
        Self {
            corruption_rate,
            confusion: None,
            temperature_correct: default_temperature_correct(),
            temperature_wrong: default_temperature_wrong(),
            corrupt_entities: true,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.corruption_rate) {
            return Err(Error::Config(format!(
                "corruption_rate must lie in [0, 1], got {}",
                self.corruption_rate
            )));
        }
        for (name, t) in [
            ("temperature_correct", self.temperature_correct),
            ("temperature_wrong", self.temperature_wrong),
        ] {
            if !(t > 0.0 && t.is_finite()) {
                return Err(Error::Config(format!("{name} must be positive, got {t}")));
            }
        }
        Ok(())
    }

    pub fn from_json_str(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text).map_err(|e| Error::Config(format!("noise config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<std::path::Path>) -> Result<Self> {
        Self::from_json_str(&std::fs::read_to_string(path)?)
    }
}

/// Support and sampler over the wrong classes of one true class.
type WrongClasses = (Vec<usize>, WeightedIndex<f64>);

/// A noise config resolved against a vocabulary.
#[derive(Debug, Clone)]
pub struct PerceptionSim {
    config: NoiseConfig,
    vocab: Vocabulary,
    /// Per node type and true class: sampler over wrong classes, `None` if the
    /// type has a single class.
    confusion: [Vec<Option<WrongClasses>>; 2],
}

fn resolve(
    width: usize,
    spec: Option<&BTreeMap<String, BTreeMap<String, f64>>>,
    id: impl Fn(&str) -> Option<usize>,
) -> Result<Vec<Option<WrongClasses>>> {
    let mut rows: Vec<Vec<f64>> = (0..width)
        .map(|c| (0..width).map(|w| if w == c { 0.0 } else { 1.0 }).collect())
        .collect();
    for (from, to) in spec.into_iter().flatten() {
        let c = id(from).ok_or_else(|| Error::Config(format!("confusion: unknown class `{from}`")))?;
        let mut row = vec![0.0; width];
        for (name, &w) in to {
            let t = id(name).ok_or_else(|| Error::Config(format!("confusion: unknown class `{name}`")))?;
            if t == c && w != 0.0 {
                return Err(Error::Config(format!("confusion of `{from}` puts weight on itself")));
            }
            if !(w >= 0.0 && w.is_finite()) {
                return Err(Error::Config(format!("confusion weight {w} is invalid")));
            }
            row[t] = w;
        }
        if row.iter().sum::<f64>() <= 0.0 {
            return Err(Error::Config(format!("confusion of `{from}` has no positive weight")));
        }
        rows[c] = row;
    }
    Ok(rows
        .into_iter()
        .map(|row| {
            let support: Vec<usize> = (0..width).filter(|&w| row[w] > 0.0).collect();
            let weights: Vec<f64> = support.iter().map(|&w| row[w]).collect();
            WeightedIndex::new(weights).ok().map(|d| (support, d))
        })
        .collect())
}

impl PerceptionSim {
    pub fn new(config: NoiseConfig, vocab: &Vocabulary) -> Result<Self> {
        config.validate()?;
        let spec = config.confusion.as_ref();
        let entities = resolve(vocab.num_entity_classes(), spec.map(|s| &s.entities), |n| {
            vocab.entity_id(n)
        })?;
        let predicates = resolve(vocab.num_predicate_classes(), spec.map(|s| &s.predicates), |n| {
            vocab.predicate_id(n)
        })?;
        Ok(Self {
            config,
            vocab: vocab.clone(),
            confusion: [entities, predicates],
        })
    }

    pub fn config(&self) -> &NoiseConfig {
        &self.config
    }

    /// Simulated perception output for one true graph.
    pub fn simulate<R: Rng + ?Sized>(&self, truth: &SceneGraph, rng: &mut R) -> ScoredGraph {
        let cfg = &self.config;
        let logits = (0..truth.num_nodes())
            .map(|i| {
                let kind = truth.kind(i);
                let t = usize::from(kind == NodeKind::Predicate);
                let class = truth.class_of(i);
                let width = match kind {
                    NodeKind::Entity => self.vocab.num_entity_classes(),
                    NodeKind::Predicate => self.vocab.num_predicate_classes(),
                };
                let eligible = kind == NodeKind::Predicate || cfg.corrupt_entities;
                let flip = eligible && rng.random_bool(cfg.corruption_rate);
                let (chosen, temperature) = match (&self.confusion[t][class], flip) {
                    (Some((support, dist)), true) => (support[dist.sample(rng)], cfg.temperature_wrong),
                    _ => (class, cfg.temperature_correct),
                };
                let mut row = vec![0.0; width];
                row[chosen] = 1.0 / temperature;
                row
            })
            .collect();
        ScoredGraph::from_logits(truth, logits).expect("rows match the truth graph")
    }

    /// Graph `i` uses the `(seed, i)` stream.
    pub fn simulate_corpus(&self, truths: &[SceneGraph]) -> Vec<ScoredGraph> {
        truths
            .iter()
            .enumerate()
            .map(|(i, g)| self.simulate(g, &mut rng::stream(self.config.seed, &[PERCEPTION_STREAM, i as u64])))
            .collect()
    }
}

/// Keeps the `k` most confident predicates of a scored graph with their logits.
pub fn prune_scored(graph: &ScoredGraph, k: usize) -> (PruneSelection, ScoredGraph) {
    let sel = PruneSelection::top_k(graph.graph(), graph.confidences(), k);
    let structure = sel.apply(graph.graph());
    let logits = sel
        .joint_indices(graph.graph().num_entities())
        .into_iter()
        .map(|i| graph.logits()[i].clone())
        .collect();
    let pruned = ScoredGraph::from_logits(&structure, logits).expect("selection keeps rows aligned");
    (sel, pruned)
}

/// Perception, commonsense and fused graphs for one image, with the truth
/// restricted to the same pruned nodes.
#[derive(Debug, Clone, PartialEq)]
pub struct SggOutputs {
    pub truth: SceneGraph,
    pub perception: ScoredGraph,
    pub commonsense: ScoredGraph,
    pub fused: ScoredGraph,
}

/// Prunes the perception output to `k` predicates, rewrites its top-1 classes
/// with `model` and fuses the two.
pub fn commonsense_pipeline(
    model: &GlatModel,
    truth: &SceneGraph,
    perception: &ScoredGraph,
    k: usize,
) -> Result<SggOutputs> {
    if !perception.graph().same_structure(truth) {
        return Err(Error::Structure(
            "perception output and truth differ in structure".into(),
        ));
    }
    let (sel, perception) = prune_scored(perception, k);
    let commonsense = model.reconstruct(perception.graph())?;
    let fused = fuse_graphs(&perception, &commonsense)?;
    Ok(SggOutputs {
        truth: sel.apply(truth),
        perception,
        commonsense,
        fused,
    })
}
