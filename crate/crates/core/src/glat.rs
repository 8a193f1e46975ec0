//! The global-local attention encoder with node and edge decoders.
//!
//! Nodes live in one joint index space (entities, then predicates) and are
//! embedded from a joint token space:
//!
//! | token                | meaning                 |
//! |----------------------|-------------------------|
//! | `c`                  | entity class `c`        |
//! | `Ce + p`             | predicate class `p`     |
//! | `Ce + Cp`            | the MASK token          |
//!
//! Each layer runs global heads (attention over every node), subject-local
//! heads (restricted to predicate/subject links) and object-local heads
//! (predicate/object links), concatenates them in that order, projects back to
//! the model width and applies a residual ReLU.

use std::collections::BTreeMap;

use rand::seq::index;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::error::{Error, Result};
use crate::fusion::ScoredGraph;
use crate::optim::{Bound, ParamStore};
use crate::rng;
use crate::scene_graph::{AdjacencyMasks, NodeKind, SceneGraph, Vocabulary};
use crate::tensor::{Tape, Tensor, Var};

/// Value written into masked attention logits before the softmax.
pub const MASKED_LOGIT: f64 = -1e9;

const INIT_STREAM: u64 = 0x1a17;

/// Sizes of the entity and predicate class sets.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ClassCounts {
    pub entities: usize,
    pub predicates: usize,
}

impl ClassCounts {
    pub fn of(vocab: &Vocabulary) -> Self {
        Self {
            entities: vocab.num_entity_classes(),
            predicates: vocab.num_predicate_classes(),
        }
    }

    pub fn mask_token(self) -> usize {
        self.entities + self.predicates
    }

    /// Size of the joint token space including MASK.
    pub fn num_tokens(self) -> usize {
        self.entities + self.predicates + 1
    }

    pub fn token(self, kind: NodeKind, class: usize) -> usize {
        match kind {
            NodeKind::Entity => class,
            NodeKind::Predicate => self.entities + class,
        }
    }

    pub fn width(self, kind: NodeKind) -> usize {
        match kind {
            NodeKind::Entity => self.entities,
            NodeKind::Predicate => self.predicates,
        }
    }
}

/// Joint tokens of every node, unmasked.
pub fn tokens(graph: &SceneGraph, counts: ClassCounts) -> Vec<usize> {
    (0..graph.num_nodes())
        .map(|i| counts.token(graph.kind(i), graph.class_of(i)))
        .collect()
}

/// A graph whose masked nodes carry the MASK token. Links are untouched.
#[derive(Debug, Clone, PartialEq)]
pub struct MaskedGraph {
    truth: SceneGraph,
    tokens: Vec<usize>,
    masked: Vec<usize>,
}

impl MaskedGraph {
    /// The graph with nothing masked.
    pub fn unmasked(graph: &SceneGraph, counts: ClassCounts) -> Self {
        Self {
            truth: graph.clone(),
            tokens: tokens(graph, counts),
            masked: Vec::new(),
        }
    }

    /// Masks exactly the given joint node indices.
    pub fn with_mask(graph: &SceneGraph, counts: ClassCounts, masked: &[usize]) -> Result<Self> {
        let mut mg = Self::unmasked(graph, counts);
        let mut masked = masked.to_vec();
        masked.sort_unstable();
        masked.dedup();
        if let Some(&bad) = masked.iter().find(|&&i| i >= graph.num_nodes()) {
            return Err(Error::Contract(format!(
                "mask index {bad} out of range for {} nodes",
                graph.num_nodes()
            )));
        }
        for &i in &masked {
            mg.tokens[i] = counts.mask_token();
        }
        mg.masked = masked;
        Ok(mg)
    }

    /// Uses `input` as the visible tokens while keeping `truth` as the target.
    pub fn from_input(input: &SceneGraph, truth: &SceneGraph, counts: ClassCounts) -> Result<Self> {
        if !input.same_structure(truth) {
            return Err(Error::Structure("input and target graphs differ in structure".into()));
        }
        Ok(Self {
            truth: truth.clone(),
            tokens: tokens(input, counts),
            masked: Vec::new(),
        })
    }

    pub fn truth(&self) -> &SceneGraph {
        &self.truth
    }

    pub fn tokens(&self) -> &[usize] {
        &self.tokens
    }

    /// Sorted joint indices of masked nodes.
    pub fn masked_indices(&self) -> &[usize] {
        &self.masked
    }

    /// Original classes at the masked positions.
    pub fn masked_truth(&self) -> Vec<usize> {
        self.masked.iter().map(|&i| self.truth.class_of(i)).collect()
    }

    pub fn num_nodes(&self) -> usize {
        self.tokens.len()
    }
}

/// Number of nodes masked out of `n` at `rate`: round half up, at least one.
pub fn mask_count(n: usize, rate: f64) -> usize {
    if n == 0 || rate <= 0.0 {
        return 0;
    }
    ((rate * n as f64 + 0.5).floor() as usize).clamp(1, n)
}

/// Masks a uniformly drawn subset of nodes, entities and predicates alike.
pub fn mask_nodes<R: Rng + ?Sized>(
    graph: &SceneGraph,
    rate: f64,
    counts: ClassCounts,
    rng: &mut R,
) -> Result<MaskedGraph> {
    let n = graph.num_nodes();
    if n == 0 {
        return Err(Error::Contract("cannot mask an empty graph".into()));
    }
    let k = mask_count(n, rate);
    let chosen = index::sample(rng, n, k).into_vec();
    MaskedGraph::with_mask(graph, counts, &chosen)
}

/// Attention head families.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HeadKind {
    Global,
    /// Restricted to predicate/subject links.
    Subject,
    /// Restricted to predicate/object links.
    Object,
}

fn default_true() -> bool {
    true
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GlatConfig {
    pub layers: usize,
    pub global_heads: usize,
    pub subject_heads: usize,
    pub object_heads: usize,
    pub model_dim: usize,
    pub head_dim: usize,
    /// Hidden width of both decoders.
    pub hidden_dim: usize,
    pub mask_rate: f64,
    pub entity_classes: usize,
    pub predicate_classes: usize,
    #[serde(default = "default_true")]
    pub residual: bool,
    /// Local heads attend uniformly over neighbours and have no query/key.
    #[serde(default)]
    pub fixed_local_attention: bool,
}

impl GlatConfig {
    /// Six layers of 4 global, 2 subject-local and 2 object-local heads at width 300.
    pub fn reference(counts: ClassCounts) -> Self {
        Self {
            layers: 6,
            global_heads: 4,
            subject_heads: 2,
            object_heads: 2,
            model_dim: 300,
            head_dim: 300 / 8,
            hidden_dim: 300,
            mask_rate: 0.3,
            entity_classes: counts.entities,
            predicate_classes: counts.predicates,
            residual: true,
            fixed_local_attention: false,
        }
    }

    /// Three layers of the same head split at width 64.
    pub fn desk(counts: ClassCounts) -> Self {
        Self {
            layers: 3,
            model_dim: 64,
            head_dim: 8,
            hidden_dim: 64,
            ..Self::reference(counts)
        }
    }

    pub fn counts(&self) -> ClassCounts {
        ClassCounts {
            entities: self.entity_classes,
            predicates: self.predicate_classes,
        }
    }

    pub fn total_heads(&self) -> usize {
        self.global_heads + self.subject_heads + self.object_heads
    }

    /// Heads of one layer in concatenation order.
    pub fn heads(&self) -> Vec<HeadKind> {
        std::iter::repeat_n(HeadKind::Global, self.global_heads)
            .chain(std::iter::repeat_n(HeadKind::Subject, self.subject_heads))
            .chain(std::iter::repeat_n(HeadKind::Object, self.object_heads))
            .collect()
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: &str| Err(Error::Config(m.to_string()));
        if self.total_heads() == 0 {
            return fail("at least one attention head is required");
        }
        if self.model_dim == 0 || self.head_dim == 0 || self.hidden_dim == 0 {
            return fail("model_dim, head_dim and hidden_dim must be positive");
        }
        if !(self.mask_rate > 0.0 && self.mask_rate < 1.0) {
            return fail("mask_rate must lie in (0, 1)");
        }
        if self.entity_classes == 0 || self.predicate_classes == 0 {
            return fail("class counts must be positive");
        }
        Ok(())
    }

    /// Shape of every parameter, keyed by name.
    pub fn parameter_shapes(&self) -> BTreeMap<String, [usize; 2]> {
        let (d, hd, hid) = (self.model_dim, self.head_dim, self.hidden_dim);
        let counts = self.counts();
        let mut shapes = BTreeMap::new();
        shapes.insert("embedding".to_string(), [counts.num_tokens(), d]);
        for l in 0..self.layers {
            for (h, kind) in self.heads().into_iter().enumerate() {
                let projections: &[&str] = if kind != HeadKind::Global && self.fixed_local_attention {
                    &["v"]
                } else {
                    &["q", "k", "v"]
                };
                for p in projections {
                    shapes.insert(format!("layer{l}.head{h}.{p}.weight"), [d, hd]);
                    shapes.insert(format!("layer{l}.head{h}.{p}.bias"), [1, hd]);
                }
            }
            shapes.insert(format!("layer{l}.fuse.weight"), [self.total_heads() * hd, d]);
            shapes.insert(format!("layer{l}.fuse.bias"), [1, d]);
        }
        let classes = counts.entities + counts.predicates;
        shapes.insert("node_decoder.w1".to_string(), [d, hid]);
        shapes.insert("node_decoder.b1".to_string(), [1, hid]);
        shapes.insert("node_decoder.w2".to_string(), [hid, classes]);
        shapes.insert("node_decoder.b2".to_string(), [1, classes]);
        shapes.insert("edge_decoder.w1".to_string(), [2 * d, hid]);
        shapes.insert("edge_decoder.b1".to_string(), [1, hid]);
        shapes.insert("edge_decoder.w2".to_string(), [hid, 3]);
        shapes.insert("edge_decoder.b2".to_string(), [1, 3]);
        shapes
    }
}

/// Edge classes predicted for ordered node pairs.
pub const NO_EDGE: usize = 0;
pub const SUBJECT_EDGE: usize = 1;
pub const OBJECT_EDGE: usize = 2;

/// Ordered pairs `(i, j)` with `i != j`, row-major.
pub fn edge_pairs(n: usize) -> Vec<(usize, usize)> {
    (0..n)
        .flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (i, j)))
        .collect()
}

/// Edge class of every ordered pair: a predicate points at its subject and object.
pub fn edge_targets(graph: &SceneGraph) -> Vec<usize> {
    let ne = graph.num_entities();
    edge_pairs(graph.num_nodes())
        .into_iter()
        .map(|(i, j)| {
            if i < ne {
                return NO_EDGE;
            }
            let p = graph.predicates()[i - ne];
            if j == p.subject {
                SUBJECT_EDGE
            } else if j == p.object {
                OBJECT_EDGE
            } else {
                NO_EDGE
            }
        })
        .collect()
}

/// Tape handles produced by one forward pass.
#[derive(Debug, Clone, Copy)]
pub struct Forward {
    /// Final encoder output, `n x d`.
    pub hidden: Var,
    /// Entity rows over entity classes, `Ne x Ce`.
    pub entity_logits: Var,
    /// Predicate rows over predicate classes, `Np x Cp`.
    pub predicate_logits: Var,
    /// One row of three edge logits per ordered pair, when requested.
    pub edge_logits: Option<Var>,
}

/// Adjacency constants placed on a tape once per forward pass.
struct LocalMask {
    keep: Vec<bool>,
    indicator: Var,
}

struct Context {
    subject: LocalMask,
    object: LocalMask,
    zeros: Option<Var>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GlatModel {
    config: GlatConfig,
    params: ParamStore,
}

impl GlatModel {
    /// Random initialization, uniform in `±1/sqrt(fan_in)` for every tensor.
    pub fn new(config: GlatConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = rng::stream(seed, &[INIT_STREAM]);
        let mut params = ParamStore::new();
        let shapes = config.parameter_shapes();
        for (name, &[rows, cols]) in &shapes {
            let fan_in = match weight_name_for_bias(name) {
                Some(weight) => shapes[&weight][0],
                None => rows,
            };
            let bound = 1.0 / (fan_in as f64).sqrt();
            let t = Tensor::from_fn(rows, cols, |_, _| rng.random_range(-bound..bound));
            params.insert(name.clone(), t);
        }
        Ok(Self { config, params })
    }

    /// Wraps existing parameters after checking every shape.
    pub fn from_params(config: GlatConfig, params: ParamStore) -> Result<Self> {
        config.validate()?;
        let shapes = config.parameter_shapes();
        for (name, shape) in &shapes {
            match params.get(name) {
                Some(t) if t.shape() == *shape => {}
                Some(t) => {
                    return Err(Error::Config(format!(
                        "parameter `{name}` has shape {:?}, config requires {shape:?}",
                        t.shape()
                    )))
                }
                None => return Err(Error::Config(format!("missing parameter `{name}`"))),
            }
        }
        if let Some(extra) = params.names().find(|n| !shapes.contains_key(*n)) {
            return Err(Error::Config(format!("unexpected parameter `{extra}`")));
        }
        Ok(Self { config, params })
    }

    pub fn config(&self) -> &GlatConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    pub fn num_parameters(&self) -> usize {
        self.params.num_scalars()
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let config = serde_json::to_value(&self.config).expect("config serializes");
        Checkpoint::new(config, &self.params.clone().into_map())
    }

    /// Loads parameters, validating every shape against the embedded config.
    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        let config: GlatConfig = serde_json::from_value(ckpt.config.clone())
            .map_err(|e| Error::Config(format!("checkpoint config: {e}")))?;
        let mut params = ParamStore::new();
        for name in config.parameter_shapes().keys() {
            params.insert(
                name.clone(),
                ckpt.tensor(name).map_err(|e| Error::Config(e.to_string()))?,
            );
        }
        Self::from_params(config, params)
    }

    /// Binds all parameters as trainable.
    pub fn bind(&self, tape: &mut Tape) -> Bound {
        self.params.bind(tape, |_| true)
    }

    fn linear(&self, tape: &mut Tape, b: &Bound, x: Var, weight: &str, bias: &str) -> Result<Var> {
        let y = tape.matmul(x, b.var(weight))?;
        tape.add_row(y, b.var(bias))
    }

    /// Initial node features: one embedding row per token.
    pub fn embed(&self, tape: &mut Tape, b: &Bound, tokens: &[usize]) -> Result<Var> {
        let limit = self.config.counts().num_tokens();
        if let Some(&bad) = tokens.iter().find(|&&t| t >= limit) {
            return Err(Error::Contract(format!("token {bad} outside the {limit}-token space")));
        }
        tape.gather_rows(b.var("embedding"), tokens)
    }

    fn context(&self, tape: &mut Tape, masks: &AdjacencyMasks) -> Context {
        let n = masks.subject.size();
        let mut local = |m: &crate::scene_graph::BinaryMatrix| {
            let keep = m.as_slice().to_vec();
            let ind =
                Tensor::from_vec(n, n, keep.iter().map(|&k| f64::from(u8::from(k))).collect()).expect("square mask");
            LocalMask {
                keep,
                indicator: tape.constant(ind),
            }
        };
        let subject = local(&masks.subject);
        let object = local(&masks.object);
        let zeros = self
            .config
            .fixed_local_attention
            .then(|| tape.constant(Tensor::zeros(n, n)));
        Context { subject, object, zeros }
    }

    /// Output of head `h` in layer `l`, `n x head_dim`.
    fn head(
        &self,
        tape: &mut Tape,
        b: &Bound,
        x: Var,
        l: usize,
        h: usize,
        kind: HeadKind,
        ctx: &Context,
    ) -> Result<Var> {
        let p = |s: &str| format!("layer{l}.head{h}.{s}");
        let v = self.linear(tape, b, x, &p("v.weight"), &p("v.bias"))?;
        let scale = 1.0 / (self.config.head_dim as f64).sqrt();
        let scores = |tape: &mut Tape| -> Result<Var> {
            let q = self.linear(tape, b, x, &p("q.weight"), &p("q.bias"))?;
            let k = self.linear(tape, b, x, &p("k.weight"), &p("k.bias"))?;
            let s = tape.matmul_t(q, k)?;
            Ok(tape.scale(s, scale))
        };
        let weights = match kind {
            HeadKind::Global => {
                let s = scores(tape)?;
                tape.row_softmax(s)
            }
            HeadKind::Subject | HeadKind::Object => {
                let mask = if kind == HeadKind::Subject {
                    &ctx.subject
                } else {
                    &ctx.object
                };
                let s = match ctx.zeros {
                    Some(z) => z,
                    None => scores(tape)?,
                };
                let filled = tape.mask_fill(s, &mask.keep, MASKED_LOGIT)?;
                let w = tape.row_softmax(filled);
                tape.mul(w, mask.indicator)?
            }
        };
        tape.matmul(weights, v)
    }

    /// Output of head `h` in layer `l` applied to features `x` under `masks`.
    pub fn head_output(
        &self,
        tape: &mut Tape,
        b: &Bound,
        x: Var,
        l: usize,
        h: usize,
        masks: &AdjacencyMasks,
    ) -> Result<Var> {
        let kind = *self
            .config
            .heads()
            .get(h)
            .ok_or_else(|| Error::Contract(format!("no head {h}")))?;
        let ctx = self.context(tape, masks);
        self.head(tape, b, x, l, h, kind, &ctx)
    }

    fn layer(&self, tape: &mut Tape, b: &Bound, x: Var, l: usize, ctx: &Context) -> Result<Var> {
        let outputs = self
            .config
            .heads()
            .into_iter()
            .enumerate()
            .map(|(h, kind)| self.head(tape, b, x, l, h, kind, ctx))
            .collect::<Result<Vec<_>>>()?;
        let cat = tape.concat_columns(&outputs)?;
        let mut y = self.linear(
            tape,
            b,
            cat,
            &format!("layer{l}.fuse.weight"),
            &format!("layer{l}.fuse.bias"),
        )?;
        if self.config.residual {
            y = tape.add(x, y)?;
        }
        Ok(tape.relu(y))
    }

    /// Embeds `tokens` and runs every encoder layer.
    pub fn encode(&self, tape: &mut Tape, b: &Bound, tokens: &[usize], masks: &AdjacencyMasks) -> Result<Var> {
        if masks.subject.size() != tokens.len() {
            return Err(Error::Contract(format!(
                "{} tokens for {}-node adjacency masks",
                tokens.len(),
                masks.subject.size()
            )));
        }
        let ctx = self.context(tape, masks);
        let mut x = self.embed(tape, b, tokens)?;
        for l in 0..self.config.layers {
            x = self.layer(tape, b, x, l, &ctx)?;
        }
        Ok(x)
    }

    /// Node logits over the joint entity+predicate class space, `n x (Ce + Cp)`.
    pub fn decode_nodes(&self, tape: &mut Tape, b: &Bound, hidden: Var) -> Result<Var> {
        let h = self.linear(tape, b, hidden, "node_decoder.w1", "node_decoder.b1")?;
        let h = tape.relu(h);
        self.linear(tape, b, h, "node_decoder.w2", "node_decoder.b2")
    }

    /// Three edge logits for every ordered pair in [`edge_pairs`] order.
    pub fn decode_edges(&self, tape: &mut Tape, b: &Bound, hidden: Var) -> Result<Var> {
        let n = tape.value(hidden).rows();
        let d = self.config.model_dim;
        let w1 = b.var("edge_decoder.w1");
        let w_first = tape.slice_rows(w1, 0, d)?;
        let w_second = tape.slice_rows(w1, d, 2 * d)?;
        let u = tape.matmul(hidden, w_first)?;
        let v = tape.matmul(hidden, w_second)?;
        let pairs = edge_pairs(n);
        let is: Vec<usize> = pairs.iter().map(|p| p.0).collect();
        let js: Vec<usize> = pairs.iter().map(|p| p.1).collect();
        let ui = tape.gather_rows(u, &is)?;
        let vj = tape.gather_rows(v, &js)?;
        let h = tape.add(ui, vj)?;
        let h = tape.add_row(h, b.var("edge_decoder.b1"))?;
        let h = tape.relu(h);
        self.linear(tape, b, h, "edge_decoder.w2", "edge_decoder.b2")
    }

    /// Full forward pass over a graph's structure with the given input tokens.
    pub fn forward(
        &self,
        tape: &mut Tape,
        b: &Bound,
        graph: &SceneGraph,
        tokens: &[usize],
        with_edges: bool,
    ) -> Result<Forward> {
        let masks = graph.adjacency_masks();
        let hidden = self.encode(tape, b, tokens, &masks)?;
        let nodes = self.decode_nodes(tape, b, hidden)?;
        let (ne, n) = (graph.num_entities(), graph.num_nodes());
        let counts = self.config.counts();
        let ent = tape.slice_rows(nodes, 0, ne)?;
        let entity_logits = tape.slice_columns(ent, 0, counts.entities)?;
        let pred = tape.slice_rows(nodes, ne, n)?;
        let predicate_logits = tape.slice_columns(pred, counts.entities, counts.entities + counts.predicates)?;
        let edge_logits = if with_edges {
            Some(self.decode_edges(tape, b, hidden)?)
        } else {
            None
        };
        Ok(Forward {
            hidden,
            entity_logits,
            predicate_logits,
            edge_logits,
        })
    }

    /// Type-sliced node logits for a masked input, one row per node.
    pub fn node_logits(&self, input: &MaskedGraph) -> Result<Vec<Vec<f64>>> {
        let mut tape = Tape::new();
        let b = self.params.bind(&mut tape, |_| false);
        let f = self.forward(&mut tape, &b, input.truth(), input.tokens(), false)?;
        Ok(tape
            .value(f.entity_logits)
            .to_rows()
            .into_iter()
            .chain(tape.value(f.predicate_logits).to_rows())
            .collect())
    }

    /// Predicted edge class for every ordered pair, in [`edge_pairs`] order.
    pub fn predict_edges(&self, input: &MaskedGraph) -> Result<Vec<usize>> {
        let mut tape = Tape::new();
        let b = self.params.bind(&mut tape, |_| false);
        let f = self.forward(&mut tape, &b, input.truth(), input.tokens(), true)?;
        let edges = tape.value(f.edge_logits.expect("requested"));
        Ok((0..edges.rows()).map(|r| crate::fusion::argmax(edges.row(r))).collect())
    }

    /// Rewrites every node class of `input` without masking. Structure and
    /// node order are kept; predicted edges are ignored.
    pub fn reconstruct(&self, input: &SceneGraph) -> Result<ScoredGraph> {
        let mg = MaskedGraph::unmasked(input, self.config.counts());
        ScoredGraph::from_logits(input, self.node_logits(&mg)?)
    }
}

/// The weight a bias belongs to, or `None` if `name` is not a bias.
fn weight_name_for_bias(name: &str) -> Option<String> {
    if let Some(prefix) = name.strip_suffix(".bias") {
        return Some(format!("{prefix}.weight"));
    }
    let (prefix, last) = name.rsplit_once('.')?;
    let layer = last.strip_prefix('b')?;
    Some(format!("{prefix}.w{layer}"))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scene_graph::{BinaryMatrix, EntityNode};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    const COUNTS: ClassCounts = ClassCounts {
        entities: 4,
        predicates: 3,
    };

    fn small_config() -> GlatConfig {
        GlatConfig {
            layers: 2,
            global_heads: 2,
            subject_heads: 1,
            object_heads: 1,
            model_dim: 8,
            head_dim: 3,
            hidden_dim: 6,
            mask_rate: 0.3,
            entity_classes: COUNTS.entities,
            predicate_classes: COUNTS.predicates,
            residual: true,
            fixed_local_attention: false,
        }
    }

    /// e0 -p0-> e1, e0 -p1-> e2, plus an isolated entity e3.
    fn graph() -> SceneGraph {
        SceneGraph::from_triplets(
            &[(0, 0, 1), (0, 2, 2)],
            vec![
                EntityNode::new(0),
                EntityNode::new(1),
                EntityNode::new(1),
                EntityNode::new(3),
            ],
        )
        .unwrap()
    }

    fn graph_of(n_entities: usize, predicates: usize) -> SceneGraph {
        let entities = (0..n_entities).map(|i| EntityNode::new(i % 4)).collect();
        let triplets: Vec<_> = (0..predicates).map(|j| (0, j % 3, 1 + j % (n_entities - 1))).collect();
        SceneGraph::from_triplets(&triplets, entities).unwrap()
    }

    #[test]
    fn mask_count_examples() {
        assert_eq!(mask_count(10, 0.3), 3);
        assert_eq!(mask_count(3, 0.3), 1);
        assert_eq!(mask_count(5, 0.3), 2);
        assert_eq!(mask_count(0, 0.3), 0);
    }

    #[test]
    fn mask_nodes_examples() {
        let g = graph_of(6, 4);
        let a = mask_nodes(&g, 0.3, COUNTS, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        assert_eq!(a.masked_indices().len(), 3);
        let b = mask_nodes(&g, 0.3, COUNTS, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        assert_eq!(a, b);
        for &i in a.masked_indices() {
            assert_eq!(a.tokens()[i], COUNTS.mask_token());
        }
        assert_eq!(a.truth(), &g);
        let tiny = graph_of(2, 1);
        let m = mask_nodes(&tiny, 0.3, COUNTS, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        assert_eq!(m.masked_indices().len(), 1);
        assert!(mask_nodes(&SceneGraph::empty(), 0.3, COUNTS, &mut ChaCha8Rng::seed_from_u64(0)).is_err());
    }

    #[test]
    fn reference_config_layout() {
        let c = GlatConfig::reference(COUNTS);
        assert_eq!((c.layers, c.model_dim, c.total_heads()), (6, 300, 8));
        assert_eq!(c.heads()[..4], [HeadKind::Global; 4]);
        assert_eq!(c.heads()[4..6], [HeadKind::Subject; 2]);
        assert_eq!(c.heads()[6..], [HeadKind::Object; 2]);
        assert_eq!(c.mask_rate, 0.3);
    }

    #[test]
    fn validation_rejects_degenerate_configs() {
        let mut c = small_config();
        c.global_heads = 0;
        c.subject_heads = 0;
        c.object_heads = 0;
        assert!(matches!(c.validate(), Err(Error::Config(_))));
        let mut c = small_config();
        c.mask_rate = 1.0;
        assert!(c.validate().is_err());
    }

    #[test]
    fn embedding_rows() {
        let model = GlatModel::new(small_config(), 1).unwrap();
        let g = graph();
        let mg = MaskedGraph::with_mask(&g, COUNTS, &[0]).unwrap();
        let mut tape = Tape::new();
        let b = model.bind(&mut tape);
        let x = model.embed(&mut tape, &b, mg.tokens()).unwrap();
        let x = tape.value(x);
        assert_eq!(x.shape(), [g.num_nodes(), 8]);
        // Entities 1 and 2 share class 1.
        assert_eq!(x.row(1), x.row(2));
        let emb = model.params().get("embedding").unwrap();
        assert_eq!(x.row(0), emb.row(COUNTS.mask_token()));
        assert!(model.embed(&mut tape, &b, &[COUNTS.num_tokens()]).is_err());
    }

    /// Runs one head of a model whose first layer is the only one of interest.
    fn run_head(model: &GlatModel, x: Tensor, masks: &AdjacencyMasks, h: usize) -> Tensor {
        let mut tape = Tape::new();
        let b = model.bind(&mut tape);
        let xv = tape.constant(x);
        let ctx = model.context(&mut tape, masks);
        let kind = model.config().heads()[h];
        let out = model.head(&mut tape, &b, xv, 0, h, kind, &ctx).unwrap();
        tape.value(out).clone()
    }

    fn no_edges(n: usize) -> AdjacencyMasks {
        AdjacencyMasks {
            subject: BinaryMatrix::zeros(n),
            object: BinaryMatrix::zeros(n),
        }
    }

    fn random_x(rng: &mut ChaCha8Rng, n: usize, d: usize) -> Tensor {
        Tensor::from_fn(n, d, |_, _| rng.random_range(-1.0..1.0))
    }

    fn affine(x: &Tensor, w: &Tensor, b: &Tensor) -> Vec<Vec<f64>> {
        (0..x.rows())
            .map(|i| {
                (0..w.cols())
                    .map(|j| b.get(0, j) + (0..x.cols()).map(|k| x.get(i, k) * w.get(k, j)).sum::<f64>())
                    .collect()
            })
            .collect()
    }

    #[test]
    fn global_head_matches_direct_attention() {
        let model = GlatModel::new(small_config(), 7).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let x = random_x(&mut rng, 3, 8);
        let out = run_head(&model, x.clone(), &no_edges(3), 0);
        let p = |s: &str| model.params().get(&format!("layer0.head0.{s}")).unwrap();
        let q = affine(&x, p("q.weight"), p("q.bias"));
        let k = affine(&x, p("k.weight"), p("k.bias"));
        let v = affine(&x, p("v.weight"), p("v.bias"));
        for i in 0..3 {
            let logits: Vec<f64> = (0..3)
                .map(|j| q[i].iter().zip(&k[j]).map(|(a, b)| a * b).sum::<f64>() / 3f64.sqrt())
                .collect();
            let z: f64 = logits.iter().map(|l| l.exp()).sum();
            for c in 0..3 {
                let expected: f64 = (0..3).map(|j| logits[j].exp() / z * v[j][c]).sum();
                assert!((out.get(i, c) - expected).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn global_head_degenerate_inputs() {
        let model = GlatModel::new(small_config(), 7).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = random_x(&mut rng, 1, 8);
        let out = run_head(&model, x.clone(), &no_edges(1), 0);
        let p = |s: &str| model.params().get(&format!("layer0.head0.{s}")).unwrap();
        let v = affine(&x, p("v.weight"), p("v.bias"));
        for c in 0..3 {
            assert!((out.get(0, c) - v[0][c]).abs() < 1e-15);
        }
        let row: Vec<f64> = (0..8).map(|_| rng.random_range(-1.0..1.0)).collect();
        let same = Tensor::from_rows(&vec![row; 4]).unwrap();
        let out = run_head(&model, same, &no_edges(4), 1);
        for i in 1..4 {
            assert_eq!(out.row(i), out.row(0));
        }
    }

    #[test]
    fn local_head_examples() {
        let model = GlatModel::new(small_config(), 7).unwrap();
        let g = graph();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x = random_x(&mut rng, g.num_nodes(), 8);
        assert_eq!(
            run_head(&model, x.clone(), &no_edges(g.num_nodes()), 2),
            Tensor::zeros(g.num_nodes(), 3)
        );

        let out = run_head(&model, x.clone(), &g.adjacency_masks(), 2);
        let p = |s: &str| model.params().get(&format!("layer0.head2.{s}")).unwrap();
        let v = affine(&x, p("v.weight"), p("v.bias"));
        // Predicate node 4 has subject 0 as its single subject neighbour.
        assert_eq!(out.row(4), v[0].as_slice());
        assert_eq!(out.row(3), &[0.0; 3]);
    }

    #[test]
    fn local_head_ignores_non_neighbours() {
        let model = GlatModel::new(small_config(), 5).unwrap();
        let g = graph();
        let masks = g.adjacency_masks();
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let x = random_x(&mut rng, g.num_nodes(), 8);
        let base = run_head(&model, x.clone(), &masks, 3);
        let mut changed = x.clone();
        // Node 1 is an object neighbour of predicate 4 only.
        for c in 0..8 {
            changed.set(1, c, 10.0 * rng.random_range(-1.0..1.0));
        }
        let out = run_head(&model, changed, &masks, 3);
        for i in [0, 2, 3, 5] {
            assert_eq!(out.row(i), base.row(i));
        }
        assert_ne!(out.row(4), base.row(4));
    }

    #[test]
    fn zero_fusion_weights_leave_relu_of_input() {
        let mut model = GlatModel::new(small_config(), 3).unwrap();
        for name in ["layer0.fuse.weight", "layer0.fuse.bias"] {
            let t = model.params_mut().get_mut(name).unwrap();
            t.data_mut().iter_mut().for_each(|v| *v = 0.0);
        }
        let g = graph();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = random_x(&mut rng, g.num_nodes(), 8);
        let mut tape = Tape::new();
        let b = model.bind(&mut tape);
        let xv = tape.constant(x.clone());
        let ctx = model.context(&mut tape, &g.adjacency_masks());
        let out = model.layer(&mut tape, &b, xv, 0, &ctx).unwrap();
        let relu: Vec<f64> = x.data().iter().map(|v| v.max(0.0)).collect();
        assert_eq!(tape.value(out).data(), relu.as_slice());
    }

    #[test]
    fn head_order_permutation_is_absorbed_by_fusion_rows() {
        let mut cfg = small_config();
        cfg.subject_heads = 0;
        cfg.object_heads = 0;
        let model = GlatModel::new(cfg.clone(), 11).unwrap();
        let mut swapped = model.clone();
        let hd = cfg.head_dim;
        for suffix in ["q.weight", "q.bias", "k.weight", "k.bias", "v.weight", "v.bias"] {
            let a = model.params().get(&format!("layer0.head0.{suffix}")).unwrap().clone();
            let b = model.params().get(&format!("layer0.head1.{suffix}")).unwrap().clone();
            swapped.params_mut().insert(format!("layer0.head0.{suffix}"), b);
            swapped.params_mut().insert(format!("layer0.head1.{suffix}"), a);
        }
        let w = model.params().get("layer0.fuse.weight").unwrap();
        let permuted = Tensor::from_fn(w.rows(), w.cols(), |i, j| {
            let src = if i < hd { i + hd } else { i - hd };
            w.get(src, j)
        });
        swapped.params_mut().insert("layer0.fuse.weight", permuted);
        let g = graph();
        let mg = MaskedGraph::unmasked(&g, COUNTS);
        let a = model.node_logits(&mg).unwrap();
        let b = swapped.node_logits(&mg).unwrap();
        for (ra, rb) in a.iter().zip(&b) {
            for (x, y) in ra.iter().zip(rb) {
                assert!((x - y).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn zero_layers_encode_to_embedding() {
        let mut cfg = small_config();
        cfg.layers = 0;
        let model = GlatModel::new(cfg, 1).unwrap();
        let g = graph();
        let toks = tokens(&g, COUNTS);
        let mut tape = Tape::new();
        let b = model.bind(&mut tape);
        let x0 = model.embed(&mut tape, &b, &toks).unwrap();
        let xl = model.encode(&mut tape, &b, &toks, &g.adjacency_masks()).unwrap();
        assert_eq!(tape.value(x0), tape.value(xl));
    }

    #[test]
    fn isolated_entity_only_hears_global_heads() {
        let mut model = GlatModel::new(small_config(), 21).unwrap();
        let g = graph();
        let run = |m: &GlatModel, classes: &[usize]| {
            let input = g.with_classes(classes).unwrap();
            m.node_logits(&MaskedGraph::unmasked(&input, COUNTS)).unwrap()[3].clone()
        };
        let original = g.node_classes();
        let mut permuted = original.clone();
        permuted.swap(0, 1);
        permuted[4] = 2;
        permuted[5] = 0;
        assert_ne!(run(&model, &original), run(&model, &permuted));
        for l in 0..2 {
            for h in 0..2 {
                for s in ["v.weight", "v.bias"] {
                    let t = model.params_mut().get_mut(&format!("layer{l}.head{h}.{s}")).unwrap();
                    t.data_mut().iter_mut().for_each(|v| *v = 0.0);
                }
            }
        }
        assert_eq!(run(&model, &original), run(&model, &permuted));
    }

    #[test]
    fn decoder_shapes_and_edge_targets() {
        let model = GlatModel::new(small_config(), 2).unwrap();
        let g = graph();
        let mut tape = Tape::new();
        let b = model.bind(&mut tape);
        let f = model.forward(&mut tape, &b, &g, &tokens(&g, COUNTS), true).unwrap();
        assert_eq!(tape.value(f.entity_logits).shape(), [4, 4]);
        assert_eq!(tape.value(f.predicate_logits).shape(), [2, 3]);
        assert_eq!(tape.value(f.edge_logits.unwrap()).shape(), [6 * 5, 3]);

        let targets = edge_targets(&g);
        let pairs = edge_pairs(6);
        let labelled: Vec<_> = pairs
            .iter()
            .zip(&targets)
            .filter(|(_, &t)| t != NO_EDGE)
            .map(|(&p, &t)| (p, t))
            .collect();
        assert_eq!(
            labelled,
            vec![
                ((4, 0), SUBJECT_EDGE),
                ((4, 1), OBJECT_EDGE),
                ((5, 0), SUBJECT_EDGE),
                ((5, 2), OBJECT_EDGE)
            ]
        );
    }

    #[test]
    fn reconstruct_keeps_structure_and_order() {
        let model = GlatModel::new(small_config(), 13).unwrap();
        let g = graph();
        let out = model.reconstruct(&g).unwrap();
        assert!(out.graph().same_structure(&g));
        let logits = model.node_logits(&MaskedGraph::unmasked(&g, COUNTS)).unwrap();
        for (i, row) in logits.iter().enumerate() {
            assert_eq!(out.graph().class_of(i), crate::fusion::argmax(row));
            let s: f64 = crate::tensor::softmax(row).iter().sum();
            assert!((s - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn checkpoint_round_trip_and_shape_validation() {
        let model = GlatModel::new(small_config(), 4).unwrap();
        let ckpt = model.to_checkpoint();
        let text = ckpt.to_json_string().unwrap();
        let back = GlatModel::from_checkpoint(&Checkpoint::from_json_str(&text).unwrap()).unwrap();
        assert_eq!(back, model);

        let mut bad = ckpt.clone();
        bad.tensors.get_mut("layer0.fuse.bias").unwrap().shape = vec![2, 4];
        bad.tensors.get_mut("layer0.fuse.bias").unwrap().data.truncate(8);
        assert!(matches!(GlatModel::from_checkpoint(&bad), Err(Error::Config(_))));
    }

    #[test]
    fn initialization_is_seeded_and_bounded() {
        let a = GlatModel::new(small_config(), 4).unwrap();
        assert_eq!(a, GlatModel::new(small_config(), 4).unwrap());
        assert_ne!(a, GlatModel::new(small_config(), 5).unwrap());
        let w = a.params().get("layer1.fuse.weight").unwrap();
        let bound = 1.0 / (w.rows() as f64).sqrt();
        assert!(w.data().iter().all(|v| v.abs() <= bound));
        let bias = a.params().get("node_decoder.b2").unwrap();
        assert!(bias.data().iter().all(|v| v.abs() <= 1.0 / 6f64.sqrt()));
    }

    #[test]
    fn fixed_local_heads_drop_query_key() {
        let mut cfg = small_config();
        cfg.fixed_local_attention = true;
        let model = GlatModel::new(cfg, 1).unwrap();
        assert!(model.params().get("layer0.head2.q.weight").is_none());
        assert!(model.params().get("layer0.head0.q.weight").is_some());
    }
}
