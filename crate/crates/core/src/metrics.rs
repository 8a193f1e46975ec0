//! Masked-node accuracy, triplet recall, mean recall and frequency-binned recall.

use std::cell::Cell;
use std::collections::BTreeSet;
use std::fmt::Write as _;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::baselines::FrequencyTable;
use crate::error::{Error, Result};
use crate::fusion::{argmax, ScoredGraph};
use crate::glat::{mask_nodes, ClassCounts, GlatModel, MaskedGraph};
use crate::rng;
use crate::scene_graph::{NodeKind, SceneGraph};

const EVAL_MASK_STREAM: u64 = 0xe7a1;

/// Anything that fills in node classes of a masked graph.
pub trait MaskedPredictor {
    /// One prediction per joint node; `None` where the predictor abstains.
    fn predict(&self, input: &MaskedGraph) -> Result<Vec<Option<usize>>>;
}

impl MaskedPredictor for GlatModel {
    fn predict(&self, input: &MaskedGraph) -> Result<Vec<Option<usize>>> {
        Ok(self.node_logits(input)?.iter().map(|row| Some(argmax(row))).collect())
    }
}

/// Copies the hidden ground truth.
#[derive(Debug, Clone, Copy, Default)]
pub struct TruthOracle;

impl MaskedPredictor for TruthOracle {
    fn predict(&self, input: &MaskedGraph) -> Result<Vec<Option<usize>>> {
        Ok(input.truth().node_classes().into_iter().map(Some).collect())
    }
}

/// Draws every class uniformly from its node type's class set.
#[derive(Debug, Clone)]
pub struct UniformPredictor {
    counts: ClassCounts,
    seed: u64,
    calls: Cell<u64>,
}

impl UniformPredictor {
    pub fn new(counts: ClassCounts, seed: u64) -> Self {
        Self {
            counts,
            seed,
            calls: Cell::new(0),
        }
    }
}

impl MaskedPredictor for UniformPredictor {
    fn predict(&self, input: &MaskedGraph) -> Result<Vec<Option<usize>>> {
        let call = self.calls.get();
        self.calls.set(call + 1);
        let mut rng = rng::stream(self.seed, &[call]);
        let g = input.truth();
        Ok((0..g.num_nodes())
            .map(|i| Some(rng.random_range(0..self.counts.width(g.kind(i)))))
            .collect())
    }
}

/// The evaluation masks for a corpus: graph `i` draws from its own `(seed, i)`
/// stream, so every predictor sees the same masked positions.
pub fn evaluation_masks(corpus: &[SceneGraph], rate: f64, counts: ClassCounts, seed: u64) -> Result<Vec<MaskedGraph>> {
    corpus
        .iter()
        .enumerate()
        .map(|(i, g)| {
            if g.num_nodes() == 0 {
                return Ok(MaskedGraph::unmasked(g, counts));
            }
            mask_nodes(g, rate, counts, &mut rng::stream(seed, &[EVAL_MASK_STREAM, i as u64]))
        })
        .collect()
}

/// Accuracy at masked positions. A field is `None` when no node of that kind
/// was masked or the predictor abstained on one.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MaskedAccuracy {
    pub entity: Option<f64>,
    pub predicate: Option<f64>,
    pub both: Option<f64>,
    pub masked_entities: usize,
    pub masked_predicates: usize,
}

/// Scores `model` on pre-masked graphs.
pub fn masked_accuracy_on(model: &dyn MaskedPredictor, inputs: &[MaskedGraph]) -> Result<MaskedAccuracy> {
    // [entity, predicate] x [correct, total, abstained]
    let mut tally = [[0usize; 3]; 2];
    for input in inputs {
        if input.masked_indices().is_empty() {
            continue;
        }
        let pred = model.predict(input)?;
        if pred.len() != input.num_nodes() {
            return Err(Error::Contract(format!(
                "predictor returned {} classes for {} nodes",
                pred.len(),
                input.num_nodes()
            )));
        }
        let g = input.truth();
        for &i in input.masked_indices() {
            let t = &mut tally[usize::from(g.kind(i) == NodeKind::Predicate)];
            t[1] += 1;
            match pred[i] {
                Some(c) => t[0] += usize::from(c == g.class_of(i)),
                None => t[2] += 1,
            }
        }
    }
    let acc = |t: [usize; 3]| (t[1] > 0 && t[2] == 0).then(|| t[0] as f64 / t[1] as f64);
    let both = [0, 1, 2].map(|k| tally[0][k] + tally[1][k]);
    Ok(MaskedAccuracy {
        entity: acc(tally[0]),
        predicate: acc(tally[1]),
        both: acc(both),
        masked_entities: tally[0][1],
        masked_predicates: tally[1][1],
    })
}

/// Masks `rate` of each graph's nodes and scores the reconstruction there.
pub fn masked_accuracy(
    model: &dyn MaskedPredictor,
    corpus: &[SceneGraph],
    rate: f64,
    counts: ClassCounts,
    seed: u64,
) -> Result<MaskedAccuracy> {
    masked_accuracy_on(model, &evaluation_masks(corpus, rate, counts, seed)?)
}

/// Fraction of nodes whose class in `pred` equals `truth`, pooled over graphs.
/// `kind` restricts the count to one node type.
pub fn node_accuracy(pred: &[&SceneGraph], truth: &[&SceneGraph], kind: Option<NodeKind>) -> Result<f64> {
    let (mut hit, mut total) = (0usize, 0usize);
    for (p, t) in pred.iter().zip(truth) {
        if !p.same_structure(t) {
            return Err(Error::Structure("node_accuracy: structures differ".into()));
        }
        for i in 0..t.num_nodes() {
            if kind.is_none_or(|k| t.kind(i) == k) {
                total += 1;
                hit += usize::from(p.class_of(i) == t.class_of(i));
            }
        }
    }
    Ok(if total == 0 { 0.0 } else { hit as f64 / total as f64 })
}

/// A `(subject class, predicate class, object class)` triple.
pub type TripletClass = (usize, usize, usize);

/// A triplet located on concrete entity indices.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
struct Located {
    subject: usize,
    object: usize,
    classes: TripletClass,
}

fn located(graph: &SceneGraph, j: usize) -> Located {
    let p = graph.predicates()[j];
    Located {
        subject: p.subject,
        object: p.object,
        classes: (
            graph.entities()[p.subject].class,
            p.class,
            graph.entities()[p.object].class,
        ),
    }
}

/// The `k` best predicted triplets, ranked by predicate confidence with ties
/// to the lower predicate index. The graph constraint keeps only the best
/// predicate of each ordered entity pair before truncation.
fn top_k(pred: &ScoredGraph, k: usize, graph_constraint: bool) -> Result<Vec<Located>> {
    if k == 0 {
        return Err(Error::Contract("k must be positive".into()));
    }
    let g = pred.graph();
    let ne = g.num_entities();
    let conf = pred.confidences();
    let mut order: Vec<usize> = (0..g.num_predicates()).collect();
    order.sort_by(|&a, &b| conf[ne + b].total_cmp(&conf[ne + a]).then(a.cmp(&b)));
    let mut seen = BTreeSet::new();
    Ok(order
        .into_iter()
        .map(|j| located(g, j))
        .filter(|t| !graph_constraint || seen.insert((t.subject, t.object)))
        .take(k)
        .collect())
}

/// Which ground-truth predicates are recovered by the top-`k` predictions.
pub fn matched_ground_truth(
    pred: &ScoredGraph,
    gt: &SceneGraph,
    k: usize,
    graph_constraint: bool,
) -> Result<Vec<bool>> {
    let mut pool = top_k(pred, k, graph_constraint)?;
    Ok((0..gt.num_predicates())
        .map(|j| {
            let want = located(gt, j);
            match pool.iter().position(|t| *t == want) {
                Some(pos) => {
                    pool.swap_remove(pos);
                    true
                }
                None => false,
            }
        })
        .collect())
}

/// Fraction of ground-truth triplets recovered; `None` if `gt` has no predicates.
pub fn recall_at_k(pred: &ScoredGraph, gt: &SceneGraph, k: usize, graph_constraint: bool) -> Result<Option<f64>> {
    let hits = matched_ground_truth(pred, gt, k, graph_constraint)?;
    Ok((!hits.is_empty()).then(|| hits.iter().filter(|&&h| h).count() as f64 / hits.len() as f64))
}

/// Mean of per-image recalls over images with at least one ground-truth triplet.
pub fn mean_image_recall(
    preds: &[ScoredGraph],
    gts: &[SceneGraph],
    k: usize,
    graph_constraint: bool,
) -> Result<Option<f64>> {
    check_lengths(preds, gts)?;
    let mut values = Vec::new();
    for (p, g) in preds.iter().zip(gts) {
        if let Some(r) = recall_at_k(p, g, k, graph_constraint)? {
            values.push(r);
        }
    }
    Ok(mean(&values))
}

fn check_lengths(preds: &[ScoredGraph], gts: &[SceneGraph]) -> Result<()> {
    if preds.len() != gts.len() {
        return Err(Error::Contract(format!(
            "{} predictions for {} ground-truth graphs",
            preds.len(),
            gts.len()
        )));
    }
    Ok(())
}

fn mean(values: &[f64]) -> Option<f64> {
    (!values.is_empty()).then(|| values.iter().sum::<f64>() / values.len() as f64)
}

/// Per-predicate-class recall and its mean over classes present in the ground truth.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MeanRecall {
    /// `None` for classes that never occur in the ground truth.
    pub per_class: Vec<Option<f64>>,
    pub mean: Option<f64>,
}

/// Recall per predicate class, averaged over the images containing that class,
/// then over classes.
pub fn mean_recall(
    preds: &[ScoredGraph],
    gts: &[SceneGraph],
    predicate_classes: usize,
    k: usize,
    graph_constraint: bool,
) -> Result<MeanRecall> {
    check_lengths(preds, gts)?;
    let mut per_image: Vec<Vec<f64>> = vec![Vec::new(); predicate_classes];
    for (p, g) in preds.iter().zip(gts) {
        let hits = matched_ground_truth(p, g, k, graph_constraint)?;
        let mut tally = vec![(0usize, 0usize); predicate_classes];
        for (j, &h) in hits.iter().enumerate() {
            let c = g.predicates()[j].class;
            let t = tally
                .get_mut(c)
                .ok_or_else(|| Error::Contract(format!("predicate class {c} outside {predicate_classes} classes")))?;
            t.0 += usize::from(h);
            t.1 += 1;
        }
        for (c, &(hit, total)) in tally.iter().enumerate() {
            if total > 0 {
                per_image[c].push(hit as f64 / total as f64);
            }
        }
    }
    let per_class: Vec<Option<f64>> = per_image.iter().map(|v| mean(v)).collect();
    let present: Vec<f64> = per_class.iter().flatten().copied().collect();
    Ok(MeanRecall {
        mean: mean(&present),
        per_class,
    })
}

/// Number of frequency bins: 1-3, 4-9, 10-27, 28-81, 82-243, 244+.
pub const NUM_BINS: usize = 6;

/// Bin of a training count. Counts of 0 share the rarest bin.
pub fn bin_index(count: u64) -> usize {
    let mut hi = 3u64;
    for b in 0..NUM_BINS - 1 {
        if count <= hi {
            return b;
        }
        hi *= 3;
    }
    NUM_BINS - 1
}

/// Inclusive count range of a bin; the last bin is open-ended.
pub fn bin_range(b: usize) -> (u64, Option<u64>) {
    let lo = if b == 0 { 1 } else { 3u64.pow(b as u32) + 1 };
    let hi = (b + 1 < NUM_BINS).then(|| 3u64.pow(b as u32 + 1));
    (lo, hi)
}

/// How per-bin recall is averaged.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BinAveraging {
    /// Recall per image within the bin, then the mean over images.
    #[default]
    Images,
    /// Matched instances over all instances in the bin.
    Instances,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BinRow {
    pub bin_lo: u64,
    pub bin_hi: Option<u64>,
    pub unique_triplets: usize,
    /// Share of distinct ground-truth triplet classes, in [0, 1].
    pub unique_share: f64,
    pub instances: usize,
    /// Share of ground-truth triplet instances, in [0, 1].
    pub instance_share: f64,
    pub recall: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BinnedRecallReport {
    pub bins: Vec<BinRow>,
    /// Mean recall over bins that hold at least one triplet.
    pub average: Option<f64>,
}

impl BinnedRecallReport {
    /// CSV with columns `bin_lo,bin_hi,unique_triplets,pct_unique,pct_instances,recall`.
    /// The open top bin has an empty `bin_hi`; percentages are 0-100.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("bin_lo,bin_hi,unique_triplets,pct_unique,pct_instances,recall\n");
        for r in &self.bins {
            let hi = r.bin_hi.map(|h| h.to_string()).unwrap_or_default();
            let recall = r.recall.map(|x| format!("{x:.6}")).unwrap_or_default();
            writeln!(
                out,
                "{},{hi},{},{:.4},{:.4},{recall}",
                r.bin_lo,
                r.unique_triplets,
                100.0 * r.unique_share,
                100.0 * r.instance_share,
            )
            .expect("writing to a String");
        }
        out
    }
}

/// Recall split by how often each ground-truth triplet occurred in training.
pub fn binned_recall(
    preds: &[ScoredGraph],
    gts: &[SceneGraph],
    train: &FrequencyTable,
    k: usize,
    graph_constraint: bool,
    averaging: BinAveraging,
) -> Result<BinnedRecallReport> {
    check_lengths(preds, gts)?;
    let mut unique: Vec<BTreeSet<TripletClass>> = vec![BTreeSet::new(); NUM_BINS];
    let mut instances = [0usize; NUM_BINS];
    let mut matched = [0usize; NUM_BINS];
    let mut image_recalls: Vec<Vec<f64>> = vec![Vec::new(); NUM_BINS];
    for (p, g) in preds.iter().zip(gts) {
        let hits = matched_ground_truth(p, g, k, graph_constraint)?;
        let mut tally = [(0usize, 0usize); NUM_BINS];
        for (j, &h) in hits.iter().enumerate() {
            let t = located(g, j).classes;
            let b = bin_index(train.triplet_count(t.0, t.1, t.2));
            unique[b].insert(t);
            instances[b] += 1;
            matched[b] += usize::from(h);
            tally[b].0 += usize::from(h);
            tally[b].1 += 1;
        }
        for (b, &(hit, total)) in tally.iter().enumerate() {
            if total > 0 {
                image_recalls[b].push(hit as f64 / total as f64);
            }
        }
    }
    let total_unique: usize = unique.iter().map(BTreeSet::len).sum();
    let total_instances: usize = instances.iter().sum();
    let share = |n: usize, d: usize| if d == 0 { 0.0 } else { n as f64 / d as f64 };
    let bins: Vec<BinRow> = (0..NUM_BINS)
        .map(|b| {
            let (bin_lo, bin_hi) = bin_range(b);
            let recall = match averaging {
                BinAveraging::Images => mean(&image_recalls[b]),
                BinAveraging::Instances => (instances[b] > 0).then(|| share(matched[b], instances[b])),
            };
            BinRow {
                bin_lo,
                bin_hi,
                unique_triplets: unique[b].len(),
                unique_share: share(unique[b].len(), total_unique),
                instances: instances[b],
                instance_share: share(instances[b], total_instances),
                recall,
            }
        })
        .collect();
    let recalls: Vec<f64> = bins.iter().filter_map(|r| r.recall).collect();
    Ok(BinnedRecallReport {
        average: mean(&recalls),
        bins,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::baselines::build_frequency;
    use crate::scene_graph::{EntityNode, Vocabulary};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn vocab(ce: usize, cp: usize) -> Vocabulary {
        Vocabulary::new(
            (0..ce).map(|i| format!("e{i}")).collect(),
            (0..cp).map(|i| format!("p{i}")).collect(),
        )
        .unwrap()
    }

    fn graph(ents: &[usize], preds: &[(usize, usize, usize)]) -> SceneGraph {
        SceneGraph::from_triplets(preds, ents.iter().map(|&c| EntityNode::new(c)).collect()).unwrap()
    }

    /// Prediction graph with given predicate classes and confidences.
    fn scored(ents: &[usize], preds: &[(usize, usize, usize, f64)], cp: usize) -> ScoredGraph {
        let g = graph(ents, &preds.iter().map(|&(s, p, o, _)| (s, p, o)).collect::<Vec<_>>());
        let mut logits: Vec<Vec<f64>> = ents
            .iter()
            .map(|&c| {
                let mut r = vec![0.0; 4];
                r[c] = 10.0;
                r
            })
            .collect();
        for &(_, p, _, conf) in preds {
            // Confidence `conf` at class `p` out of `cp` classes.
            let other = ((1.0 - conf) / (cp - 1) as f64).ln();
            let mut r = vec![other; cp];
            r[p] = conf.ln();
            logits.push(r);
        }
        ScoredGraph::from_logits(&g, logits).unwrap()
    }

    #[test]
    fn truth_oracle_scores_one() {
        let v = vocab(4, 3);
        let corpus: Vec<SceneGraph> = (0..20)
            .map(|i| graph(&[i % 4, (i + 1) % 4, 2], &[(0, i % 3, 1), (2, 1, 0)]))
            .collect();
        let acc = masked_accuracy(&TruthOracle, &corpus, 0.3, ClassCounts::of(&v), 1).unwrap();
        assert_eq!((acc.entity, acc.predicate, acc.both), (Some(1.0), Some(1.0), Some(1.0)));
        assert_eq!(acc.masked_entities + acc.masked_predicates, 20 * 2);
    }

    #[test]
    fn uniform_predictor_hits_chance() {
        let counts = ClassCounts {
            entities: 5,
            predicates: 4,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let corpus: Vec<SceneGraph> = (0..3000)
            .map(|_| {
                let e: Vec<usize> = (0..3).map(|_| rng.random_range(0..5)).collect();
                graph(&e, &[(0, rng.random_range(0..4), 1), (1, rng.random_range(0..4), 2)])
            })
            .collect();
        let acc = masked_accuracy(&UniformPredictor::new(counts, 7), &corpus, 0.3, counts, 3).unwrap();
        for (value, n, p) in [
            (acc.entity.unwrap(), acc.masked_entities, 0.2),
            (acc.predicate.unwrap(), acc.masked_predicates, 0.25),
        ] {
            let sigma = (p * (1.0 - p) / n as f64).sqrt();
            assert!((value - p).abs() < 3.0 * sigma, "{value} vs {p} over {n}");
        }
    }

    #[test]
    fn evaluation_masks_are_shared_and_seeded() {
        let counts = ClassCounts {
            entities: 3,
            predicates: 2,
        };
        let corpus = vec![graph(&[0, 1, 2], &[(0, 0, 1), (1, 1, 2)]); 5];
        let a = evaluation_masks(&corpus, 0.3, counts, 4).unwrap();
        assert_eq!(a, evaluation_masks(&corpus, 0.3, counts, 4).unwrap());
        assert!(a.iter().all(|m| m.masked_indices().len() == 2));
    }

    #[test]
    fn recall_examples() {
        let gt = graph(&[0, 1, 2], &[(0, 0, 1), (1, 1, 2)]);
        // Only the first ground-truth triplet is predicted correctly.
        let half = scored(&[0, 1, 2], &[(0, 0, 1, 0.9), (1, 2, 2, 0.8)], 3);
        assert_eq!(recall_at_k(&half, &gt, 50, true).unwrap(), Some(0.5));
        let perfect = scored(&[0, 1, 2], &[(0, 0, 1, 0.9), (1, 1, 2, 0.8)], 3);
        assert_eq!(recall_at_k(&perfect, &gt, 50, true).unwrap(), Some(1.0));
        assert_eq!(recall_at_k(&perfect, &gt, 1, true).unwrap(), Some(0.5));
        assert!(recall_at_k(&perfect, &gt, 0, true).is_err());
        assert_eq!(recall_at_k(&perfect, &graph(&[0], &[]), 5, true).unwrap(), None);
    }

    #[test]
    fn constrained_recall_can_exceed_free_recall_below_full_k() {
        // Two guesses on one pair push the correct triplet out of the free top 2.
        let gt = graph(&[0, 1], &[(1, 2, 0)]);
        let pred = scored(&[0, 1], &[(0, 0, 1, 0.9), (0, 1, 1, 0.8), (1, 2, 0, 0.7)], 3);
        assert_eq!(recall_at_k(&pred, &gt, 2, false).unwrap(), Some(0.0));
        assert_eq!(recall_at_k(&pred, &gt, 2, true).unwrap(), Some(1.0));
        assert_eq!(recall_at_k(&pred, &gt, 3, false).unwrap(), Some(1.0));
    }

    #[test]
    fn graph_constraint_keeps_one_predicate_per_pair() {
        let gt = graph(&[0, 1], &[(0, 0, 1), (0, 1, 1)]);
        let pred = scored(&[0, 1], &[(0, 0, 1, 0.9), (0, 1, 1, 0.8)], 3);
        assert_eq!(recall_at_k(&pred, &gt, 10, false).unwrap(), Some(1.0));
        assert_eq!(recall_at_k(&pred, &gt, 10, true).unwrap(), Some(0.5));
    }

    #[test]
    fn mean_recall_examples() {
        let gts = vec![graph(&[0, 1], &[(0, 0, 1)]), graph(&[0, 1], &[(0, 0, 1), (1, 0, 0)])];
        let preds = vec![
            scored(&[0, 1], &[(0, 0, 1, 0.9)], 3),
            scored(&[0, 1], &[(0, 0, 1, 0.9), (1, 2, 0, 0.9)], 3),
        ];
        let mr = mean_recall(&preds, &gts, 3, 50, true).unwrap();
        let r = mean_image_recall(&preds, &gts, 50, true).unwrap();
        assert_eq!(mr.per_class, vec![Some(0.75), None, None]);
        assert_eq!(mr.mean, r);
    }

    #[test]
    fn bin_edges() {
        for (count, bin) in [
            (0, 0),
            (1, 0),
            (3, 0),
            (4, 1),
            (9, 1),
            (10, 2),
            (27, 2),
            (28, 3),
            (81, 3),
            (82, 4),
            (243, 4),
            (244, 5),
            (u64::MAX, 5),
        ] {
            assert_eq!(bin_index(count), bin, "count {count}");
        }
        assert_eq!(bin_range(0), (1, Some(3)));
        assert_eq!(bin_range(2), (10, Some(27)));
        assert_eq!(bin_range(5), (244, None));
    }

    #[test]
    fn binned_report_partitions_and_renders() {
        let train: Vec<SceneGraph> = (0..12)
            .map(|i| graph(&[0, 1], &[(0, (i % 4 != 0) as usize, 1)]))
            .collect();
        let table = build_frequency(&train, 3);
        let gts = vec![graph(&[0, 1], &[(0, 1, 1), (1, 2, 0)]), graph(&[0, 1], &[(0, 0, 1)])];
        let preds = vec![
            scored(&[0, 1], &[(0, 1, 1, 0.9), (1, 0, 0, 0.9)], 3),
            scored(&[0, 1], &[(0, 0, 1, 0.9)], 3),
        ];
        let report = binned_recall(&preds, &gts, &table, 50, true, BinAveraging::Images).unwrap();
        let instances: usize = report.bins.iter().map(|b| b.instances).sum();
        assert_eq!(instances, 3);
        let shares: f64 = report.bins.iter().map(|b| b.instance_share).sum();
        assert!((shares - 1.0).abs() < 1e-9);
        // (e0 p1 e1) seen 9 times, (e0 p0 e1) 3 times, (e1 p2 e0) never.
        assert_eq!(report.bins[1].recall, Some(1.0));
        assert_eq!(report.bins[0].recall, Some(0.5));
        assert_eq!(report.bins[0].unique_triplets, 2);
        let csv = report.to_csv();
        assert!(csv.starts_with("bin_lo,bin_hi,unique_triplets,pct_unique,pct_instances,recall\n1,3,2,"));
        assert_eq!(csv.lines().count(), 1 + NUM_BINS);
    }

    fn naive_recall(pred: &ScoredGraph, gt: &SceneGraph, k: usize, gc: bool) -> Option<f64> {
        let pg = pred.graph();
        let ne = pg.num_entities();
        let n = pg.num_predicates();
        // Rank by repeated selection of the best remaining candidate.
        let mut used = vec![false; n];
        let mut kept: Vec<usize> = Vec::new();
        loop {
            let mut best: Option<usize> = None;
            for j in 0..n {
                if used[j] {
                    continue;
                }
                if best.is_none_or(|b| pred.confidences()[ne + j] > pred.confidences()[ne + b]) {
                    best = Some(j);
                }
            }
            let Some(b) = best else { break };
            used[b] = true;
            let p = pg.predicates()[b];
            let clash = kept.iter().any(|&q| {
                let o = pg.predicates()[q];
                (o.subject, o.object) == (p.subject, p.object)
            });
            if !(gc && clash) {
                kept.push(b);
            }
        }
        kept.truncate(k);
        if gt.num_predicates() == 0 {
            return None;
        }
        let mut taken = vec![false; kept.len()];
        let mut hits = 0;
        for g in gt.predicates() {
            for (slot, &q) in kept.iter().enumerate() {
                let p = pg.predicates()[q];
                let same = !taken[slot]
                    && p.class == g.class
                    && p.subject == g.subject
                    && p.object == g.object
                    && pg.entities()[p.subject].class == gt.entities()[g.subject].class
                    && pg.entities()[p.object].class == gt.entities()[g.object].class;
                if same {
                    taken[slot] = true;
                    hits += 1;
                    break;
                }
            }
        }
        Some(hits as f64 / gt.num_predicates() as f64)
    }

    fn small_case(rng: &mut ChaCha8Rng) -> (ScoredGraph, SceneGraph) {
        let ne = rng.random_range(2..4);
        let ents_t: Vec<usize> = (0..ne).map(|_| rng.random_range(0..2)).collect();
        let ents_p: Vec<usize> = ents_t
            .iter()
            .map(|&c| if rng.random_bool(0.2) { 1 - c } else { c })
            .collect();
        let pick = |rng: &mut ChaCha8Rng| -> Vec<(usize, usize, usize)> {
            (0..rng.random_range(0..=6))
                .filter_map(|_| {
                    let s = rng.random_range(0..ne);
                    let o = rng.random_range(0..ne);
                    (s != o).then(|| (s, rng.random_range(0..3), o))
                })
                .collect()
        };
        let gt_preds = pick(rng);
        let mut pr_preds = gt_preds.clone();
        pr_preds.retain(|_| rng.random_bool(0.7));
        pr_preds.extend(pick(rng));
        pr_preds.truncate(6);
        let with_conf: Vec<(usize, usize, usize, f64)> = pr_preds
            .into_iter()
            // Coarse confidences force ties.
            .map(|(s, p, o)| (s, p, o, [0.4, 0.6, 0.8][rng.random_range(0..3)]))
            .collect();
        (scored(&ents_p, &with_conf, 3), graph(&ents_t, &gt_preds))
    }

    #[test]
    fn recall_matches_naive_matcher() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..100 {
            let (pred, gt) = small_case(&mut rng);
            for k in 1..=7 {
                for gc in [false, true] {
                    assert_eq!(recall_at_k(&pred, &gt, k, gc).unwrap(), naive_recall(&pred, &gt, k, gc));
                }
            }
        }
    }

    #[test]
    fn mean_recall_is_invariant_to_rebalancing() {
        // A predictor whose per-class recall is fixed: it recovers class 0 on
        // every image and never class 1, whatever the class mix.
        let make = |n0: usize, n1: usize| {
            let mut gts = Vec::new();
            let mut preds = Vec::new();
            for (count, class) in [(n0, 0), (n1, 1)] {
                for _ in 0..count {
                    gts.push(graph(&[0, 1], &[(0, class, 1)]));
                    preds.push(scored(&[0, 1], &[(0, 0, 1, 0.9)], 2));
                }
            }
            (preds, gts)
        };
        let (p1, g1) = make(90, 10);
        let (p2, g2) = make(10, 90);
        let a = mean_recall(&p1, &g1, 2, 50, true).unwrap().mean;
        let b = mean_recall(&p2, &g2, 2, 50, true).unwrap().mean;
        assert_eq!(a, Some(0.5));
        assert_eq!(a, b);
        assert_ne!(
            mean_image_recall(&p1, &g1, 50, true).unwrap(),
            mean_image_recall(&p2, &g2, 50, true).unwrap()
        );
    }

    proptest! {
        #[test]
        fn recall_monotone_in_k_and_constraint(seed in any::<u64>()) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let (pred, gt) = small_case(&mut rng);
            let n = pred.graph().num_predicates();
            for gc in [false, true] {
                let mut last = 0.0;
                for k in 1..=8 {
                    if let Some(r) = recall_at_k(&pred, &gt, k, gc).unwrap() {
                        prop_assert!(r >= last);
                        last = r;
                    }
                }
            }
            let k = n.max(1);
            if let (Some(f), Some(c)) = (recall_at_k(&pred, &gt, k, false).unwrap(), recall_at_k(&pred, &gt, k, true).unwrap()) {
                prop_assert!(c <= f);
            }
        }

        #[test]
        fn bins_partition_counts(count in 0u64..100_000) {
            let b = bin_index(count);
            let (lo, hi) = bin_range(b);
            prop_assert!(count.max(1) >= lo);
            prop_assert!(hi.is_none_or(|h| count <= h));
        }
    }

    #[test]
    fn node_accuracy_by_kind() {
        let t = graph(&[0, 1], &[(0, 0, 1)]);
        let p = graph(&[0, 0], &[(0, 0, 1)]);
        assert_eq!(node_accuracy(&[&p], &[&t], None).unwrap(), 2.0 / 3.0);
        assert_eq!(node_accuracy(&[&p], &[&t], Some(NodeKind::Predicate)).unwrap(), 1.0);
    }
}
