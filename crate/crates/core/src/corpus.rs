//! Rule-driven synthetic scene graphs with exact likelihoods and Bayes oracles.
//!
//! # Generative process
//!
//! 1. Draw the number of regular entities uniformly from `[min, max]` and
//!    their classes i.i.d. from the normalized class weights.
//! 2. Each trigger class is present independently with its own probability
//!    and is added as an isolated entity.
//! 3. Shuffle the entity order.
//! 4. Every ordered pair of distinct regular entities with classes `(a, b)`
//!    gets one predicate with probability `rate(a, b)`. Its class is drawn from
//!    the first context rule for `(a, b)` whose trigger is present, else from
//!    the base rule.
//! 5. Shuffle the predicate order.
//!
//! Because every factor is explicit, [`WorldModel::log_likelihood`] is exact
//! and posteriors over a single node's class follow by relabelling.

use std::collections::BTreeMap;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::fusion::argmax;
use crate::rng;
use crate::scene_graph::{EntityNode, GraphRecord, NodeKind, PredicateNode, SceneGraph, Vocabulary};

const CORPUS_STREAM: u64 = 0xc0;
const CEILING_STREAM: u64 = 0xce;

/// JSON form of a world.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WorldSpec {
    pub name: String,
    pub entity_classes: Vec<WeightedClass>,
    #[serde(default)]
    pub triggers: Vec<TriggerSpec>,
    pub predicate_classes: Vec<String>,
    pub regular_entities: SizeRange,
    pub rules: Vec<RuleSpec>,
    #[serde(default)]
    pub context_rules: Vec<ContextRuleSpec>,
    #[serde(default)]
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WeightedClass {
    pub name: String,
    pub weight: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TriggerSpec {
    pub class: String,
    pub probability: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SizeRange {
    pub min: usize,
    pub max: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RuleSpec {
    pub subject: String,
    pub object: String,
    /// Probability that an ordered pair of these classes carries a predicate.
    pub rate: f64,
    pub predicates: BTreeMap<String, f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ContextRuleSpec {
    pub trigger: String,
    pub subject: String,
    pub object: String,
    pub predicates: BTreeMap<String, f64>,
}

#[derive(Debug, Clone, PartialEq)]
struct ContextRule {
    /// Index into the trigger list.
    trigger: usize,
    subject: usize,
    object: usize,
    dist: Vec<f64>,
}

/// A validated world with dense rule tables.
#[derive(Debug, Clone, PartialEq)]
pub struct WorldModel {
    spec: WorldSpec,
    vocab: Vocabulary,
    /// Normalized class probabilities; zero for trigger classes.
    class_prob: Vec<f64>,
    /// `(entity class, presence probability)` per trigger.
    triggers: Vec<(usize, f64)>,
    trigger_of_class: Vec<Option<usize>>,
    sizes: SizeRange,
    /// Row-major `Ce x Ce` edge rates.
    rate: Vec<f64>,
    /// Row-major `Ce x Ce` base predicate distributions.
    base: Vec<Option<Vec<f64>>>,
    context: Vec<ContextRule>,
}

fn check_probability(what: &str, p: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&p) {
        return Err(Error::Config(format!("{what} must lie in [0, 1], got {p}")));
    }
    Ok(())
}

impl WorldModel {
    pub fn from_spec(spec: WorldSpec) -> Result<Self> {
        let entity_names: Vec<String> = spec.entity_classes.iter().map(|c| c.name.clone()).collect();
        let vocab = Vocabulary::new(entity_names, spec.predicate_classes.clone())?;
        let ce = vocab.num_entity_classes();
        let entity = |name: &str| {
            vocab
                .entity_id(name)
                .ok_or_else(|| Error::Config(format!("unknown entity class `{name}`")))
        };

        let mut trigger_of_class = vec![None; ce];
        let mut triggers = Vec::new();
        for t in &spec.triggers {
            let c = entity(&t.class)?;
            check_probability(&format!("trigger `{}` probability", t.class), t.probability)?;
            if trigger_of_class[c].is_some() {
                return Err(Error::Config(format!("trigger `{}` declared twice", t.class)));
            }
            trigger_of_class[c] = Some(triggers.len());
            triggers.push((c, t.probability));
        }

        let mut total = 0.0;
        for (c, wc) in spec.entity_classes.iter().enumerate() {
            if !(wc.weight >= 0.0 && wc.weight.is_finite()) {
                return Err(Error::Config(format!("class `{}` has invalid weight", wc.name)));
            }
            if trigger_of_class[c].is_some() && wc.weight != 0.0 {
                return Err(Error::Config(format!("trigger class `{}` must have weight 0", wc.name)));
            }
            total += wc.weight;
        }
        if total <= 0.0 {
            return Err(Error::Config("no entity class has positive weight".into()));
        }
        let class_prob = spec.entity_classes.iter().map(|c| c.weight / total).collect();

        let SizeRange { min, max } = spec.regular_entities;
        if min == 0 || min > max {
            return Err(Error::Config(format!(
                "regular_entities range [{min}, {max}] must satisfy 1 <= min <= max"
            )));
        }

        let dist = |preds: &BTreeMap<String, f64>, what: &str| -> Result<Vec<f64>> {
            let mut d = vec![0.0; vocab.num_predicate_classes()];
            for (name, &p) in preds {
                let id = vocab
                    .predicate_id(name)
                    .ok_or_else(|| Error::Config(format!("unknown predicate class `{name}`")))?;
                check_probability(&format!("{what} probability"), p)?;
                d[id] = p;
            }
            let s: f64 = d.iter().sum();
            if (s - 1.0).abs() > 1e-9 {
                return Err(Error::Config(format!("{what} distribution sums to {s}, not 1")));
            }
            Ok(d)
        };

        let mut rate = vec![0.0; ce * ce];
        let mut base = vec![None; ce * ce];
        for r in &spec.rules {
            let (s, o) = (entity(&r.subject)?, entity(&r.object)?);
            let what = format!("rule ({}, {})", r.subject, r.object);
            if trigger_of_class[s].is_some() || trigger_of_class[o].is_some() {
                return Err(Error::Config(format!("{what} involves a trigger class")));
            }
            if base[s * ce + o].is_some() {
                return Err(Error::Config(format!("{what} declared twice")));
            }
            check_probability(&format!("{what} rate"), r.rate)?;
            rate[s * ce + o] = r.rate;
            base[s * ce + o] = Some(dist(&r.predicates, &what)?);
        }

        let mut context = Vec::new();
        for r in &spec.context_rules {
            let c = entity(&r.trigger)?;
            let trigger = trigger_of_class[c]
                .ok_or_else(|| Error::Config(format!("context trigger `{}` is not a declared trigger", r.trigger)))?;
            let (s, o) = (entity(&r.subject)?, entity(&r.object)?);
            let what = format!("context rule {} ({}, {})", r.trigger, r.subject, r.object);
            if base[s * ce + o].is_none() {
                return Err(Error::Config(format!("{what} has no base rule")));
            }
            context.push(ContextRule {
                trigger,
                subject: s,
                object: o,
                dist: dist(&r.predicates, &what)?,
            });
        }

        Ok(Self {
            sizes: spec.regular_entities,
            spec,
            vocab,
            class_prob,
            triggers,
            trigger_of_class,
            rate,
            base,
            context,
        })
    }

    pub fn from_json_str(text: &str) -> Result<Self> {
        let spec: WorldSpec = serde_json::from_str(text).map_err(|e| Error::Config(format!("world config: {e}")))?;
        Self::from_spec(spec)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_json_str(&std::fs::read_to_string(path)?)
    }

    pub fn spec(&self) -> &WorldSpec {
        &self.spec
    }

    pub fn vocabulary(&self) -> &Vocabulary {
        &self.vocab
    }

    pub fn num_triggers(&self) -> usize {
        self.triggers.len()
    }

    /// Hex SHA-256 of the canonical JSON of the rules (the seed is excluded).
    pub fn rule_hash(&self) -> String {
        let mut spec = self.spec.clone();
        spec.seed = 0;
        let canonical = serde_json::to_string(&spec).expect("spec serializes");
        hex::encode(Sha256::digest(canonical.as_bytes()))
    }

    fn ce(&self) -> usize {
        self.vocab.num_entity_classes()
    }

    fn is_regular(&self, class: usize) -> bool {
        self.class_prob[class] > 0.0
    }

    fn edge_rate(&self, s: usize, o: usize) -> f64 {
        self.rate[s * self.ce() + o]
    }

    /// Predicate distribution for an ordered class pair given which triggers
    /// are present, or `None` if the pair never carries predicates.
    pub fn predicate_distribution(&self, s: usize, o: usize, present: &[bool]) -> Option<&[f64]> {
        let base = self.base[s * self.ce() + o].as_deref()?;
        for r in &self.context {
            if r.subject == s && r.object == o && present[r.trigger] {
                return Some(&r.dist);
            }
        }
        Some(base)
    }

    fn predicate_prob(&self, s: usize, o: usize, p: usize, present: &[bool]) -> f64 {
        self.predicate_distribution(s, o, present).map_or(0.0, |d| d[p])
    }

    fn size_prob(&self, n: usize) -> f64 {
        if n < self.sizes.min || n > self.sizes.max {
            0.0
        } else {
            1.0 / (self.sizes.max - self.sizes.min + 1) as f64
        }
    }

    /// Every subset of triggers with its prior probability.
    pub fn trigger_configurations(&self) -> Vec<(Vec<bool>, f64)> {
        let k = self.triggers.len();
        (0..1usize << k)
            .map(|mask| {
                let present: Vec<bool> = (0..k).map(|t| mask >> t & 1 == 1).collect();
                let p = self
                    .triggers
                    .iter()
                    .zip(&present)
                    .map(|(&(_, rho), &on)| if on { rho } else { 1.0 - rho })
                    .product();
                (present, p)
            })
            .collect()
    }

    /// Draws one graph.
    pub fn sample_graph<R: Rng + ?Sized>(&self, rng: &mut R) -> SceneGraph {
        let n_regular = rng.random_range(self.sizes.min..=self.sizes.max);
        let classes = WeightedIndex::new(&self.class_prob).expect("validated weights");
        let mut entities: Vec<usize> = (0..n_regular).map(|_| classes.sample(rng)).collect();
        let mut present = vec![false; self.triggers.len()];
        for (t, &(class, rho)) in self.triggers.iter().enumerate() {
            if rng.random_bool(rho) {
                present[t] = true;
                entities.push(class);
            }
        }
        entities.shuffle(rng);

        let mut predicates = Vec::new();
        for (i, &a) in entities.iter().enumerate() {
            for (j, &b) in entities.iter().enumerate() {
                if i == j || !self.is_regular(a) || !self.is_regular(b) {
                    continue;
                }
                let lambda = self.edge_rate(a, b);
                if lambda > 0.0 && rng.random_bool(lambda) {
                    let dist = self.predicate_distribution(a, b, &present).expect("rate implies rule");
                    let p = WeightedIndex::new(dist).expect("validated distribution").sample(rng);
                    predicates.push(PredicateNode {
                        class: p,
                        subject: i,
                        object: j,
                    });
                }
            }
        }
        predicates.shuffle(rng);
        SceneGraph::new(entities.into_iter().map(EntityNode::new).collect(), predicates)
            .expect("sampled graphs are valid")
    }

    /// `n` graphs; graph `i` uses its own stream derived from `(seed, i)`.
    pub fn sample_corpus(&self, n: usize, seed: u64) -> Vec<SceneGraph> {
        (0..n)
            .map(|i| self.sample_graph(&mut rng::stream(seed, &[CORPUS_STREAM, i as u64])))
            .collect()
    }

    /// Natural log of the probability of drawing exactly `graph` (entity and
    /// predicate order included). `-inf` if the world cannot produce it.
    pub fn log_likelihood(&self, graph: &SceneGraph) -> f64 {
        let mut present = vec![false; self.triggers.len()];
        let mut touched = vec![false; graph.num_entities()];
        for p in graph.predicates() {
            touched[p.subject] = true;
            touched[p.object] = true;
        }
        let mut regular = Vec::new();
        let mut lp = 0.0;
        for (i, e) in graph.entities().iter().enumerate() {
            if let Some(t) = self.trigger_of_class[e.class] {
                if present[t] || touched[i] {
                    return f64::NEG_INFINITY;
                }
                present[t] = true;
            } else if self.is_regular(e.class) {
                regular.push(i);
                lp += self.class_prob[e.class].ln();
            } else {
                return f64::NEG_INFINITY;
            }
        }
        let (nr, ne) = (regular.len(), graph.num_entities());
        lp += self.size_prob(nr).ln();
        lp += ln_factorial(nr) - ln_factorial(ne);
        for (&(_, rho), &on) in self.triggers.iter().zip(&present) {
            lp += if on { rho.ln() } else { (1.0 - rho).ln() };
        }

        let mut on_pair: BTreeMap<(usize, usize), Vec<usize>> = BTreeMap::new();
        for p in graph.predicates() {
            on_pair.entry((p.subject, p.object)).or_default().push(p.class);
        }
        let classes: Vec<usize> = graph.entities().iter().map(|e| e.class).collect();
        for &i in &regular {
            for &j in &regular {
                if i == j {
                    continue;
                }
                let lambda = self.edge_rate(classes[i], classes[j]);
                lp += match on_pair.get(&(i, j)).map(Vec::as_slice) {
                    None => (1.0 - lambda).ln(),
                    Some(&[p]) => lambda.ln() + self.predicate_prob(classes[i], classes[j], p, &present).ln(),
                    Some(_) => return f64::NEG_INFINITY,
                };
            }
        }
        lp - ln_factorial(graph.num_predicates())
    }

    /// Posterior over node `node`'s class given every other node and all links.
    pub fn full_posterior(&self, graph: &SceneGraph, node: usize) -> Vec<f64> {
        let width = match graph.kind(node) {
            NodeKind::Entity => self.ce(),
            NodeKind::Predicate => self.vocab.num_predicate_classes(),
        };
        let mut classes = graph.node_classes();
        let logs: Vec<f64> = (0..width)
            .map(|c| {
                classes[node] = c;
                let g = graph.with_classes(&classes).expect("same structure");
                self.log_likelihood(&g)
            })
            .collect();
        normalize_logs(&logs)
    }

    /// Posterior over node `node`'s class for an observer that sees every
    /// regular entity and predicate but no trigger entity.
    ///
    /// This observer knows at least as much as any model restricted to a
    /// node's connected component, because trigger entities are always isolated.
    pub fn local_posterior(&self, graph: &SceneGraph, node: usize) -> Vec<f64> {
        let classes: Vec<usize> = graph.entities().iter().map(|e| e.class).collect();
        let configs = self.trigger_configurations();
        let ne = graph.num_entities();
        let evidence = |cls: &[usize], skip: Option<usize>| -> Vec<f64> {
            configs
                .iter()
                .map(|(present, prior)| {
                    graph
                        .predicates()
                        .iter()
                        .enumerate()
                        .filter(|(q, _)| Some(*q) != skip)
                        .map(|(_, p)| self.predicate_prob(cls[p.subject], cls[p.object], p.class, present))
                        .product::<f64>()
                        * prior
                })
                .collect()
        };

        if node >= ne {
            let q = node - ne;
            let target = graph.predicates()[q];
            let ev = evidence(&classes, Some(q));
            let weights: Vec<f64> = (0..self.vocab.num_predicate_classes())
                .map(|c| {
                    configs
                        .iter()
                        .zip(&ev)
                        .map(|((present, _), e)| {
                            e * self.predicate_prob(classes[target.subject], classes[target.object], c, present)
                        })
                        .sum()
                })
                .collect();
            return normalize(&weights);
        }

        let regular_others: Vec<usize> = (0..ne)
            .filter(|&j| j != node && self.trigger_of_class[classes[j]].is_none())
            .collect();
        let isolated = graph.predicates().iter().all(|p| p.subject != node && p.object != node);

        let mut weights = vec![0.0; self.ce()];
        if isolated {
            let ev = evidence(&classes, None);
            let total: f64 = ev.iter().sum();
            let k = regular_others.len();
            for x in (0..self.ce()).filter(|&x| self.is_regular(x)) {
                let non_edges: f64 = regular_others
                    .iter()
                    .map(|&j| (1.0 - self.edge_rate(x, classes[j])) * (1.0 - self.edge_rate(classes[j], x)))
                    .product();
                weights[x] = self.size_prob(k + 1) * self.class_prob[x] * non_edges * total;
            }
            for (t, &(class, _)) in self.triggers.iter().enumerate() {
                let with_t: f64 = configs
                    .iter()
                    .zip(&ev)
                    .filter(|((present, _), _)| present[t])
                    .map(|(_, e)| e)
                    .sum();
                weights[class] = self.size_prob(k) / (k + 1) as f64 * with_t;
            }
        } else {
            let mut cls = classes.clone();
            for x in (0..self.ce()).filter(|&x| self.is_regular(x)) {
                cls[node] = x;
                let mut w = self.class_prob[x];
                for &j in &regular_others {
                    let out = graph.predicates().iter().any(|p| p.subject == node && p.object == j);
                    let inc = graph.predicates().iter().any(|p| p.subject == j && p.object == node);
                    let (l_out, l_in) = (self.edge_rate(x, classes[j]), self.edge_rate(classes[j], x));
                    w *= if out { l_out } else { 1.0 - l_out };
                    w *= if inc { l_in } else { 1.0 - l_in };
                }
                if w > 0.0 {
                    w *= evidence(&cls, None).iter().sum::<f64>();
                }
                weights[x] = w;
            }
        }
        normalize(&weights)
    }

    /// Pair weights `pi(a) pi(b) rate(a, b)`, normalized over ordered class pairs.
    fn pair_weights(&self) -> Vec<((usize, usize), f64)> {
        let ce = self.ce();
        let mut out = Vec::new();
        for a in 0..ce {
            for b in 0..ce {
                let w = self.class_prob[a] * self.class_prob[b] * self.edge_rate(a, b);
                if w > 0.0 {
                    out.push(((a, b), w));
                }
            }
        }
        let total: f64 = out.iter().map(|p| p.1).sum();
        out.into_iter().map(|(k, w)| (k, w / total)).collect()
    }

    fn predicates_only(&self, role: NodeKind) -> Result<()> {
        if role == NodeKind::Entity {
            return Err(Error::NonEnumerable(
                "entity posteriors depend on whole-graph size combinatorics; use expected_ceilings".into(),
            ));
        }
        if self.pair_weights().is_empty() {
            return Err(Error::NonEnumerable("world produces no predicates".into()));
        }
        Ok(())
    }

    /// Bayes accuracy on a predicate drawn by edge weight, for an observer that
    /// sees only its subject and object classes.
    pub fn local_ceiling(&self, role: NodeKind) -> Result<f64> {
        self.predicates_only(role)?;
        let configs = self.trigger_configurations();
        Ok(self
            .pair_weights()
            .into_iter()
            .map(|((a, b), w)| {
                let mix: Vec<f64> = (0..self.vocab.num_predicate_classes())
                    .map(|c| configs.iter().map(|(t, p)| p * self.predicate_prob(a, b, c, t)).sum())
                    .collect();
                w * mix.iter().copied().fold(0.0, f64::max)
            })
            .sum())
    }

    /// As [`WorldModel::local_ceiling`] for an observer that also knows which
    /// triggers are present.
    pub fn full_ceiling(&self, role: NodeKind) -> Result<f64> {
        self.predicates_only(role)?;
        let configs = self.trigger_configurations();
        Ok(self
            .pair_weights()
            .into_iter()
            .map(|((a, b), w)| {
                w * configs
                    .iter()
                    .map(|(t, p)| {
                        let d = self.predicate_distribution(a, b, t).expect("weighted pairs have rules");
                        p * d.iter().copied().fold(0.0, f64::max)
                    })
                    .sum::<f64>()
            })
            .sum())
    }

    /// Monte Carlo estimate of the Bayes accuracy on a predicate drawn by edge
    /// weight, for an observer that sees the bag of entity classes (triggers
    /// included) but not which entities the predicate links.
    pub fn global_ceiling(&self, role: NodeKind, samples: usize, seed: u64) -> Result<f64> {
        self.predicates_only(role)?;
        let mut rng = rng::stream(seed, &[CEILING_STREAM]);
        let classes = WeightedIndex::new(&self.class_prob).expect("validated weights");
        let cp = self.vocab.num_predicate_classes();
        let (mut acc, mut used) = (0.0, 0usize);
        for _ in 0..samples {
            let n = rng.random_range(self.sizes.min..=self.sizes.max);
            let bag: Vec<usize> = (0..n).map(|_| classes.sample(&mut rng)).collect();
            let present: Vec<bool> = self.triggers.iter().map(|&(_, rho)| rng.random_bool(rho)).collect();
            let mut mix = vec![0.0; cp];
            for (i, &a) in bag.iter().enumerate() {
                for (j, &b) in bag.iter().enumerate() {
                    if i == j {
                        continue;
                    }
                    if let Some(d) = self.predicate_distribution(a, b, &present) {
                        let lambda = self.edge_rate(a, b);
                        for (m, p) in mix.iter_mut().zip(d) {
                            *m += lambda * p;
                        }
                    }
                }
            }
            let total: f64 = mix.iter().sum();
            if total > 0.0 {
                acc += mix.iter().copied().fold(0.0, f64::max) / total;
                used += 1;
            }
        }
        Ok(if used == 0 { 0.0 } else { acc / used as f64 })
    }
}

fn ln_factorial(n: usize) -> f64 {
    (2..=n).map(|k| (k as f64).ln()).sum()
}

fn normalize(weights: &[f64]) -> Vec<f64> {
    let total: f64 = weights.iter().sum();
    if total > 0.0 {
        weights.iter().map(|w| w / total).collect()
    } else {
        vec![1.0 / weights.len() as f64; weights.len()]
    }
}

fn normalize_logs(logs: &[f64]) -> Vec<f64> {
    let max = logs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return vec![1.0 / logs.len() as f64; logs.len()];
    }
    normalize(&logs.iter().map(|l| (l - max).exp()).collect::<Vec<_>>())
}

/// Per-role accuracies, with `None` where a role had no masked nodes.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RoleAccuracy {
    pub entity: Option<f64>,
    pub predicate: Option<f64>,
    pub both: Option<f64>,
}

/// Expected Bayes accuracies at a fixed set of masked positions.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CeilingReport {
    /// Observer without trigger entities.
    pub local: RoleAccuracy,
    /// Observer seeing everything but the target's class.
    pub full: RoleAccuracy,
}

#[derive(Default)]
struct Tally {
    sum: [f64; 2],
    count: [usize; 2],
}

impl Tally {
    fn add(&mut self, kind: NodeKind, value: f64) {
        let k = usize::from(kind == NodeKind::Predicate);
        self.sum[k] += value;
        self.count[k] += 1;
    }

    fn finish(&self) -> RoleAccuracy {
        let ratio = |s: f64, c: usize| (c > 0).then(|| s / c as f64);
        RoleAccuracy {
            entity: ratio(self.sum[0], self.count[0]),
            predicate: ratio(self.sum[1], self.count[1]),
            both: ratio(self.sum[0] + self.sum[1], self.count[0] + self.count[1]),
        }
    }
}

/// Averages `max_c P(c | view)` over the given masked positions of each graph.
pub fn expected_ceilings(world: &WorldModel, graphs: &[SceneGraph], masked: &[Vec<usize>]) -> CeilingReport {
    let (mut local, mut full) = (Tally::default(), Tally::default());
    for (g, nodes) in graphs.iter().zip(masked) {
        for &i in nodes {
            let kind = g.kind(i);
            let peak = |post: Vec<f64>| post.into_iter().fold(0.0, f64::max);
            local.add(kind, peak(world.local_posterior(g, i)));
            full.add(kind, peak(world.full_posterior(g, i)));
        }
    }
    CeilingReport {
        local: local.finish(),
        full: full.finish(),
    }
}

/// Argmax of a posterior, ties to the lowest class id.
pub fn bayes_prediction(posterior: &[f64]) -> usize {
    argmax(posterior)
}

/// Reads a JSONL corpus. Blank lines are skipped; errors carry 1-based line numbers.
pub fn load_corpus(path: impl AsRef<Path>, vocab: &Vocabulary) -> Result<Vec<SceneGraph>> {
    let file = std::fs::File::open(path)?;
    let mut out = Vec::new();
    for (k, line) in BufReader::new(file).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let record: GraphRecord = serde_json::from_str(&line).map_err(|e| Error::Parse {
            line: k + 1,
            message: e.to_string(),
        })?;
        out.push(SceneGraph::from_record(&record, vocab, k + 1)?);
    }
    Ok(out)
}

/// Writes one JSON record per line.
pub fn save_corpus(graphs: &[SceneGraph], vocab: &Vocabulary, path: impl AsRef<Path>) -> Result<()> {
    let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
    for g in graphs {
        serde_json::to_writer(&mut w, &g.to_record(vocab))?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

/// Provenance written next to a generated corpus.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusManifest {
    pub world: String,
    pub seed: u64,
    pub graphs: usize,
    pub rule_hash: String,
}
