//! Masked-reconstruction pretraining and fine-tuning on perception outputs.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{Checkpoint, TrainState};
use crate::error::{Error, Result};
use crate::fusion::argmax;
use crate::glat::{edge_targets, mask_nodes, ClassCounts, Forward, GlatConfig, GlatModel, MaskedGraph};
use crate::optim::{Adam, AdamConfig, Gradients};
use crate::perception::{prune_scored, PerceptionSim};
use crate::rng;
use crate::scene_graph::SceneGraph;
use crate::tensor::{Tape, Var};

const SPLIT_STREAM: u64 = 0x5b17;
const ORDER_STREAM: u64 = 0x0dde;
const MASK_STREAM: u64 = 0x3a5c;
const VAL_STREAM: u64 = 0x7a1d;
const NOISE_STREAM: u64 = 0x2015;
const INIT_STREAM: u64 = 0x1417;

/// Relative weights of the node and edge cross-entropy terms.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub node: f64,
    pub edge: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { node: 1.0, edge: 1.0 }
    }
}

/// `node * mean node CE + edge * mean edge CE`.
///
/// The node term averages over every node: entity rows are scored against
/// entity classes and predicate rows against predicate classes. The edge term
/// averages over every ordered pair and is skipped for single-node graphs.
pub fn joint_loss(tape: &mut Tape, forward: &Forward, truth: &SceneGraph, weights: LossWeights) -> Result<Var> {
    let (ne, np, n) = (truth.num_entities(), truth.num_predicates(), truth.num_nodes());
    let shape = tape.value(forward.entity_logits).shape();
    if shape[0] != ne || tape.value(forward.predicate_logits).rows() != np {
        return Err(Error::Shape {
            op: "joint_loss",
            left: shape,
            right: [ne, np],
        });
    }
    if n == 0 {
        return Err(Error::Contract("joint_loss of an empty graph".into()));
    }
    let entity_targets: Vec<usize> = truth.entities().iter().map(|e| e.class).collect();
    let predicate_targets: Vec<usize> = truth.predicates().iter().map(|p| p.class).collect();
    let ce_e = tape.cross_entropy(forward.entity_logits, &entity_targets)?;
    let ce_p = tape.cross_entropy(forward.predicate_logits, &predicate_targets)?;
    let ce_e = tape.scale(ce_e, weights.node * ne as f64 / n as f64);
    let ce_p = tape.scale(ce_p, weights.node * np as f64 / n as f64);
    let mut loss = tape.add(ce_e, ce_p)?;
    if let Some(edges) = forward.edge_logits {
        if n >= 2 {
            let ce = tape.cross_entropy(edges, &edge_targets(truth))?;
            let ce = tape.scale(ce, weights.edge);
            loss = tape.add(loss, ce)?;
        }
    }
    Ok(loss)
}

/// Loss of one input and, if requested, gradients of every trainable parameter.
pub fn graph_loss(
    model: &GlatModel,
    input: &MaskedGraph,
    weights: LossWeights,
    trainable: impl Fn(&str) -> bool,
    with_gradients: bool,
) -> Result<(f64, Gradients)> {
    let mut tape = Tape::new();
    let b = model.params().bind(&mut tape, |name| with_gradients && trainable(name));
    let f = model.forward(&mut tape, &b, input.truth(), input.tokens(), weights.edge != 0.0)?;
    let loss = joint_loss(&mut tape, &f, input.truth(), weights)?;
    let value = tape.value(loss).item();
    if !with_gradients {
        return Ok((value, Gradients::default()));
    }
    tape.backward(loss)?;
    Ok((value, b.gradients(&tape)))
}

fn default_epochs() -> usize {
    30
}
fn default_lr() -> f64 {
    1e-4
}
fn default_accumulation() -> usize {
    8
}
fn default_validation_fraction() -> f64 {
    0.1
}
fn default_prune_k() -> usize {
    100
}

/// Encoder and decoder sizes; class counts come from the corpus vocabulary.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelSpec {
    pub layers: usize,
    pub global_heads: usize,
    pub subject_heads: usize,
    pub object_heads: usize,
    pub model_dim: usize,
    pub head_dim: usize,
    pub hidden_dim: usize,
    pub mask_rate: f64,
    pub residual: bool,
    pub fixed_local_attention: bool,
}

impl Default for ModelSpec {
    fn default() -> Self {
        Self::from_config(&GlatConfig::desk(ClassCounts {
            entities: 1,
            predicates: 1,
        }))
    }
}

impl ModelSpec {
    pub fn from_config(c: &GlatConfig) -> Self {
        Self {
            layers: c.layers,
            global_heads: c.global_heads,
            subject_heads: c.subject_heads,
            object_heads: c.object_heads,
            model_dim: c.model_dim,
            head_dim: c.head_dim,
            hidden_dim: c.hidden_dim,
            mask_rate: c.mask_rate,
            residual: c.residual,
            fixed_local_attention: c.fixed_local_attention,
        }
    }

    pub fn to_config(&self, counts: ClassCounts) -> Result<GlatConfig> {
        let c = GlatConfig {
            layers: self.layers,
            global_heads: self.global_heads,
            subject_heads: self.subject_heads,
            object_heads: self.object_heads,
            model_dim: self.model_dim,
            head_dim: self.head_dim,
            hidden_dim: self.hidden_dim,
            mask_rate: self.mask_rate,
            entity_classes: counts.entities,
            predicate_classes: counts.predicates,
            residual: self.residual,
            fixed_local_attention: self.fixed_local_attention,
        };
        c.validate()?;
        Ok(c)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    #[serde(default)]
    pub model: ModelSpec,
    #[serde(default = "default_epochs")]
    pub epochs: usize,
    #[serde(default = "default_lr")]
    pub lr: f64,
    /// Graphs per optimizer step.
    #[serde(default = "default_accumulation")]
    pub accumulation: usize,
    #[serde(default = "default_validation_fraction")]
    pub validation_fraction: f64,
    #[serde(default)]
    pub loss_weights: LossWeights,
    /// Update only the decoders.
    #[serde(default)]
    pub freeze_encoder: bool,
    /// Predicates kept per perception output before re-encoding.
    #[serde(default = "default_prune_k")]
    pub prune_k: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        serde_json::from_str("{}").expect("all fields have defaults")
    }
}

impl TrainConfig {
    /// Fine-tuning defaults: 25 epochs at learning rate 1e-5.
    pub fn fine_tune() -> Self {
        Self {
            epochs: 25,
            lr: 1e-5,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return fail(format!("lr must be positive, got {}", self.lr));
        }
        if self.accumulation == 0 {
            return fail("accumulation must be at least 1".into());
        }
        if !(0.0..1.0).contains(&self.validation_fraction) {
            return fail(format!(
                "validation_fraction must lie in [0, 1), got {}",
                self.validation_fraction
            ));
        }
        if self.prune_k == 0 {
            return fail("prune_k must be positive".into());
        }
        let w = self.loss_weights;
        if !(w.node >= 0.0 && w.edge >= 0.0 && w.node + w.edge > 0.0) {
            return fail("loss weights must be nonnegative and not both zero".into());
        }
        Ok(())
    }

    pub fn from_json_str(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text).map_err(|e| Error::Config(format!("train config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<std::path::Path>) -> Result<Self> {
        Self::from_json_str(&std::fs::read_to_string(path)?)
    }
}

/// Where training inputs come from.
#[derive(Debug, Clone)]
pub enum InputSource {
    /// Fresh random masks every epoch.
    Masked { rate: f64 },
    /// Simulated perception outputs, pruned and re-encoded as top-1 tokens.
    Perceived(PerceptionSim),
}

/// One line of the training log.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: Option<f64>,
    pub val_node_acc: Option<f64>,
}

/// Training and validation indices: a seeded shuffle, the first share held out.
/// At least one graph always stays in training.
pub fn split_indices(n: usize, fraction: f64, seed: u64) -> (Vec<usize>, Vec<usize>) {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut rng::stream(seed, &[SPLIT_STREAM]));
    let n_val = ((fraction * n as f64 + 0.5).floor() as usize).min(n.saturating_sub(1));
    let train = idx.split_off(n_val);
    (train, idx)
}

/// Stateful training loop with one optimizer step per [`Trainer::step`].
#[derive(Debug, Clone)]
pub struct Trainer<'a> {
    corpus: &'a [SceneGraph],
    config: TrainConfig,
    source: InputSource,
    seed: u64,
    model: GlatModel,
    adam: Adam,
    train_idx: Vec<usize>,
    val_inputs: Vec<MaskedGraph>,
    order: Vec<usize>,
    state: TrainState,
    best: Option<GlatModel>,
    log: Vec<EpochLog>,
}

impl<'a> Trainer<'a> {
    pub fn new(
        model: GlatModel,
        corpus: &'a [SceneGraph],
        config: TrainConfig,
        source: InputSource,
        seed: u64,
    ) -> Result<Self> {
        config.validate()?;
        let (train_idx, val_idx) = split_indices(corpus.len(), config.validation_fraction, seed);
        let mut t = Self {
            corpus,
            adam: Adam::new(AdamConfig::with_lr(config.lr)),
            config,
            source,
            seed,
            model,
            train_idx,
            val_inputs: Vec::new(),
            order: Vec::new(),
            state: TrainState {
                adam_step: 0,
                epoch: 0,
                cursor: 0,
                loss_sum: 0.0,
                best_loss: None,
            },
            best: None,
            log: Vec::new(),
        };
        if !(0..corpus.len()).any(|i| t.usable(i)) {
            return Err(Error::Contract(
                "training needs a graph that yields a nonempty input".into(),
            ));
        }
        t.val_inputs = val_idx
            .iter()
            .map(|&i| t.input(i, &[VAL_STREAM, i as u64]))
            .collect::<Result<_>>()?;
        t.order = t.epoch_order(0);
        Ok(t)
    }

    /// Continues from a checkpoint written by [`Trainer::checkpoint`].
    pub fn resume(
        ckpt: &Checkpoint,
        best: Option<GlatModel>,
        corpus: &'a [SceneGraph],
        config: TrainConfig,
        source: InputSource,
        seed: u64,
    ) -> Result<Self> {
        let state = ckpt
            .state
            .ok_or_else(|| Error::Contract("checkpoint has no training state".into()))?;
        let model = GlatModel::from_checkpoint(ckpt)?;
        let mut t = Self::new(model, corpus, config, source, seed)?;
        let moments = ckpt.tensors_with_prefix("adam.")?;
        t.adam = Adam::restore(AdamConfig::with_lr(t.config.lr), state.adam_step, &moments);
        t.state = state;
        t.order = t.epoch_order(state.epoch);
        t.best = best;
        Ok(t)
    }

    fn epoch_order(&self, epoch: usize) -> Vec<usize> {
        let mut order = self.train_idx.clone();
        order.shuffle(&mut rng::stream(self.seed, &[ORDER_STREAM, epoch as u64]));
        order
    }

    fn input(&self, i: usize, tags: &[u64]) -> Result<MaskedGraph> {
        let g = &self.corpus[i];
        let counts = self.model.config().counts();
        match &self.source {
            InputSource::Masked { rate } => mask_nodes(
                g,
                *rate,
                counts,
                &mut rng::stream(self.seed, &[&[MASK_STREAM], tags].concat()),
            ),
            InputSource::Perceived(sim) => {
                let mut r = rng::stream(sim.config().seed, &[&[NOISE_STREAM], tags].concat());
                let (sel, perceived) = prune_scored(&sim.simulate(g, &mut r), self.config.prune_k);
                MaskedGraph::from_input(perceived.graph(), &sel.apply(g), counts)
            }
        }
    }

    /// Whether graph `i` yields a nonempty input. Pruning a perceived graph
    /// keeps only entities touched by a predicate.
    fn usable(&self, i: usize) -> bool {
        let g = &self.corpus[i];
        match self.source {
            InputSource::Masked { .. } => g.num_nodes() > 0,
            InputSource::Perceived(_) => g.num_predicates() > 0,
        }
    }

    fn trainable(&self) -> impl Fn(&str) -> bool {
        let freeze = self.config.freeze_encoder;
        move |name: &str| !freeze || name.starts_with("node_decoder") || name.starts_with("edge_decoder")
    }

    pub fn is_done(&self) -> bool {
        self.state.epoch >= self.config.epochs
    }

    pub fn model(&self) -> &GlatModel {
        &self.model
    }

    /// The model with the lowest selection loss, or the current one before any epoch ends.
    pub fn best_model(&self) -> &GlatModel {
        self.best.as_ref().unwrap_or(&self.model)
    }

    pub fn log(&self) -> &[EpochLog] {
        &self.log
    }

    pub fn state(&self) -> TrainState {
        self.state
    }

    /// Consumes up to `accumulation` graphs and applies one optimizer step.
    /// Returns the epoch log when this step finished an epoch.
    pub fn step(&mut self) -> Result<Option<EpochLog>> {
        if self.is_done() {
            return Ok(None);
        }
        let epoch = self.state.epoch;
        let end = (self.state.cursor + self.config.accumulation).min(self.order.len());
        let mut grads = Gradients::default();
        let mut used = 0usize;
        for pos in self.state.cursor..end {
            let i = self.order[pos];
            if !self.usable(i) {
                continue;
            }
            let input = self.input(i, &[epoch as u64, i as u64])?;
            let (loss, g) = graph_loss(&self.model, &input, self.config.loss_weights, self.trainable(), true)?;
            if !loss.is_finite() {
                return Err(Error::Divergence {
                    epoch,
                    step: self.state.adam_step as usize,
                    loss,
                });
            }
            self.state.loss_sum += loss;
            grads.accumulate(g);
            used += 1;
        }
        if used > 0 {
            grads.scale(1.0 / used as f64);
            self.adam.step(self.model.params_mut(), &grads)?;
            self.state.adam_step = self.adam.steps_taken();
        }
        self.state.cursor = end;
        if end < self.order.len() {
            return Ok(None);
        }
        let entry = self.finish_epoch()?;
        Ok(Some(entry))
    }

    fn finish_epoch(&mut self) -> Result<EpochLog> {
        let n = self.order.iter().filter(|&&i| self.usable(i)).count();
        let train_loss = self.state.loss_sum / n.max(1) as f64;
        let (val_loss, val_node_acc) = match evaluate(&self.model, &self.val_inputs, self.config.loss_weights)? {
            Some((l, a)) => (Some(l), Some(a)),
            None => (None, None),
        };
        let selection = val_loss.unwrap_or(train_loss);
        if self.state.best_loss.is_none_or(|b| selection < b) {
            self.state.best_loss = Some(selection);
            self.best = Some(self.model.clone());
        }
        let entry = EpochLog {
            epoch: self.state.epoch,
            train_loss,
            val_loss,
            val_node_acc,
        };
        self.log.push(entry);
        self.state.epoch += 1;
        self.state.cursor = 0;
        self.state.loss_sum = 0.0;
        self.order = self.epoch_order(self.state.epoch);
        Ok(entry)
    }

    /// Runs to the configured number of epochs, reporting each epoch.
    pub fn run(&mut self, mut on_epoch: impl FnMut(&EpochLog)) -> Result<()> {
        while !self.is_done() {
            if let Some(entry) = self.step()? {
                on_epoch(&entry);
            }
        }
        Ok(())
    }

    /// Current parameters, optimizer moments and loop position.
    pub fn checkpoint(&self) -> Checkpoint {
        let mut ckpt = self.model.to_checkpoint();
        let moments: BTreeMap<_, _> = self.adam.state_tensors();
        let extra = Checkpoint::new(serde_json::Value::Null, &moments);
        ckpt.tensors.extend(extra.tensors);
        ckpt.state = Some(self.state);
        ckpt
    }
}

/// Mean loss and node accuracy over inputs: accuracy counts masked nodes, or
/// every node of inputs with nothing masked. `None` for no inputs.
pub fn evaluate(model: &GlatModel, inputs: &[MaskedGraph], weights: LossWeights) -> Result<Option<(f64, f64)>> {
    let (mut loss, mut hit, mut total, mut graphs) = (0.0, 0usize, 0usize, 0usize);
    for input in inputs.iter().filter(|m| m.num_nodes() > 0) {
        loss += graph_loss(model, input, weights, |_| false, false)?.0;
        graphs += 1;
        let logits = model.node_logits(input)?;
        let scored: Vec<usize> = if input.masked_indices().is_empty() {
            (0..input.num_nodes()).collect()
        } else {
            input.masked_indices().to_vec()
        };
        for i in scored {
            total += 1;
            hit += usize::from(argmax(&logits[i]) == input.truth().class_of(i));
        }
    }
    Ok((graphs > 0).then(|| (loss / graphs as f64, hit as f64 / total.max(1) as f64)))
}

/// Result of a complete training run.
#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// Lowest validation loss (training loss if nothing is held out).
    pub best: GlatModel,
    pub last: Checkpoint,
    pub log: Vec<EpochLog>,
}

fn finish(trainer: Trainer<'_>) -> TrainOutcome {
    TrainOutcome {
        best: trainer.best_model().clone(),
        last: trainer.checkpoint(),
        log: trainer.log,
    }
}

/// Seeded initialization of a model for `config` and `counts`.
pub fn initial_model(config: &TrainConfig, counts: ClassCounts, seed: u64) -> Result<GlatModel> {
    let seed: u64 = rng::stream(seed, &[INIT_STREAM]).random();
    GlatModel::new(config.model.to_config(counts)?, seed)
}

/// Masked-reconstruction pretraining from a fresh initialization.
pub fn pretrain(
    corpus: &[SceneGraph],
    counts: ClassCounts,
    config: &TrainConfig,
    seed: u64,
    on_epoch: impl FnMut(&EpochLog),
) -> Result<TrainOutcome> {
    let model = initial_model(config, counts, seed)?;
    pretrain_model(model, corpus, config, seed, on_epoch)
}

/// Pretraining starting from a given model.
pub fn pretrain_model(
    model: GlatModel,
    corpus: &[SceneGraph],
    config: &TrainConfig,
    seed: u64,
    on_epoch: impl FnMut(&EpochLog),
) -> Result<TrainOutcome> {
    let rate = model.config().mask_rate;
    let mut t = Trainer::new(model, corpus, config.clone(), InputSource::Masked { rate }, seed)?;
    t.run(on_epoch)?;
    Ok(finish(t))
}

/// Trains on simulated perception outputs of `corpus` against the true graphs.
pub fn fine_tune(
    model: GlatModel,
    sim: PerceptionSim,
    corpus: &[SceneGraph],
    config: &TrainConfig,
    seed: u64,
    on_epoch: impl FnMut(&EpochLog),
) -> Result<TrainOutcome> {
    let mut t = Trainer::new(model, corpus, config.clone(), InputSource::Perceived(sim), seed)?;
    t.run(on_epoch)?;
    Ok(finish(t))
}
