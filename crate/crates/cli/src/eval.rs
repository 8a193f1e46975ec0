use std::collections::BTreeMap;

use glat::baselines::build_frequency;
use glat::corpus::{expected_ceilings, load_corpus, CeilingReport, RoleAccuracy, WorldModel};
use glat::glat::ClassCounts;
use glat::metrics::{evaluation_masks, masked_accuracy_on, MaskedAccuracy, MaskedPredictor, TruthOracle};
use glat::perception::{commonsense_pipeline, NoiseConfig, PerceptionSim};
use glat::scene_graph::NodeKind;
use glat::training::{initial_model, InputSource, Trainer};
use glat::{SceneGraph, ScoredGraph, Vocabulary};
use serde::Serialize;

use crate::io::{
    check_vocab, load_checkpoint, load_glat, print_json, read_corpus, tag_checkpoint, CliError, CliResult, Kind,
    LoadedModel, WithPath, KIND_GLAT,
};
use crate::train::{ablated, load_train_config};
use crate::{AblateArgs, EvalMaskArgs, Progress, StatsArgs};

/// Offset from the training corpus seed when a test set is sampled.
const TEST_SEED_OFFSET: u64 = 1;

#[derive(Debug, Serialize)]
struct EvalMaskReport {
    graphs: usize,
    rate: f64,
    seed: u64,
    #[serde(flatten)]
    accuracy: MaskedAccuracy,
}

pub fn eval_mask(a: EvalMaskArgs) -> CliResult<()> {
    check_rate(a.rate)?;
    let (graphs, data) = read_corpus(&a.corpus, a.vocab.vocab.as_deref())?;
    let loaded = load_checkpoint(&a.ckpt)?;
    check_vocab(&a.ckpt, loaded.vocab.as_ref(), &data.vocab)?;
    let counts = ClassCounts::of(&data.vocab);
    let masks = evaluation_masks(&graphs, a.rate, counts, a.seed)?;
    let predictor: Box<dyn MaskedPredictor> = match loaded.model {
        LoadedModel::Glat(m) => {
            if m.config().counts() != counts {
                return Err(CliError::new(Kind::Config, "checkpoint class counts differ from the corpus").at(&a.ckpt));
            }
            Box::new(m)
        }
        LoadedModel::TruthOracle => Box::new(TruthOracle),
    };
    print_json(&EvalMaskReport {
        graphs: graphs.len(),
        rate: a.rate,
        seed: a.seed,
        accuracy: masked_accuracy_on(predictor.as_ref(), &masks)?,
    })
}

fn check_rate(rate: f64) -> CliResult<()> {
    if rate > 0.0 && rate <= 1.0 {
        Ok(())
    } else {
        Err(CliError::new(
            Kind::Config,
            format!("mask rate must lie in (0, 1], got {rate}"),
        ))
    }
}

/// Mean of the defined values, `None` if there are none.
fn mean_of(values: impl IntoIterator<Item = Option<f64>>) -> Option<f64> {
    let v: Vec<f64> = values.into_iter().flatten().collect();
    (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
}

#[derive(Debug, Clone, Copy, Serialize)]
pub struct Scores {
    pub entity: Option<f64>,
    pub predicate: Option<f64>,
    pub both: Option<f64>,
}

impl Scores {
    fn mean(runs: &[MaskedAccuracy]) -> Self {
        Self {
            entity: mean_of(runs.iter().map(|r| r.entity)),
            predicate: mean_of(runs.iter().map(|r| r.predicate)),
            both: mean_of(runs.iter().map(|r| r.both)),
        }
    }

    fn of_roles(runs: &[RoleAccuracy]) -> Self {
        Self {
            entity: mean_of(runs.iter().map(|r| r.entity)),
            predicate: mean_of(runs.iter().map(|r| r.predicate)),
            both: mean_of(runs.iter().map(|r| r.both)),
        }
    }
}

#[derive(Debug, Serialize)]
pub struct MethodRow {
    pub method: String,
    pub mean: Scores,
    pub per_seed: Vec<MaskedAccuracy>,
}

#[derive(Debug, Serialize)]
pub struct Ceilings {
    /// Bayes accuracy on a predicate seen only through its subject and object.
    pub local_predicate: f64,
    /// As `local_predicate`, also knowing which trigger entities are present.
    pub full_predicate: f64,
    /// Bayes accuracy on a predicate from the bag of entity classes, without
    /// links (Monte Carlo).
    pub unlinked_predicate: f64,
    /// Expected Bayes accuracy at the evaluated positions for an observer
    /// blind to trigger entities, averaged over seeds.
    pub local_instances: Scores,
    pub full_instances: Scores,
}

#[derive(Debug, Serialize)]
pub struct AblateReport {
    pub world: String,
    pub train_graphs: usize,
    pub test_graphs: usize,
    pub mask_rate: f64,
    pub seeds: Vec<u64>,
    pub methods: Vec<MethodRow>,
    pub ceilings: Ceilings,
}

pub fn ablate(a: AblateArgs, progress: Progress) -> CliResult<()> {
    if a.seeds == 0 {
        return Err(CliError::new(Kind::Config, "--seeds must be at least 1"));
    }
    let (train, data) = read_corpus(&a.corpus, None)?;
    let manifest = data
        .manifest
        .as_ref()
        .expect("read_corpus without --vocab needs a manifest");
    let (Some(spec), Some(summary)) = (&manifest.world, &manifest.corpus) else {
        return Err(CliError::new(Kind::Config, "ablate needs a corpus written by gen-corpus").at(&a.corpus));
    };
    let world = WorldModel::from_spec(spec.clone()).at(&a.corpus)?;
    let vocab = world.vocabulary().clone();
    let test = match &a.test {
        Some(p) => load_corpus(p, &vocab).at(p)?,
        None => world.sample_corpus(a.test_size, summary.seed.wrapping_add(TEST_SEED_OFFSET)),
    };
    let config = load_train_config(&a.config)?;
    let counts = ClassCounts::of(&vocab);
    let rate = config.model.mask_rate;
    let seeds: Vec<u64> = (0..a.seeds).map(|i| a.seed + i).collect();
    if let Some(dir) = &a.save_dir {
        std::fs::create_dir_all(dir).at(dir)?;
    }

    let table = build_frequency(&train, counts.predicates);
    let mut rows: BTreeMap<&str, Vec<MaskedAccuracy>> = BTreeMap::new();
    let mut instance_ceilings: Vec<CeilingReport> = Vec::new();
    for &seed in &seeds {
        let masks = evaluation_masks(&test, rate, counts, seed)?;
        let positions: Vec<Vec<usize>> = masks.iter().map(|m| m.masked_indices().to_vec()).collect();
        instance_ceilings.push(expected_ceilings(&world, &test, &positions));
        rows.entry("frequency")
            .or_default()
            .push(masked_accuracy_on(&table, &masks)?);
        for &method in &a.methods {
            let cfg = match method.ablation() {
                Some(kind) => ablated(&config, kind, counts)?,
                None => config.clone(),
            };
            let model = initial_model(&cfg, counts, seed)?;
            let mut trainer = Trainer::new(model, &train, cfg, InputSource::Masked { rate }, seed)?;
            trainer.run(|e| {
                progress.emit(serde_json::json!({"method": method.name(), "seed": seed, "epoch": e}));
            })?;
            let best = trainer.best_model();
            let acc = masked_accuracy_on(best, &masks)?;
            progress.emit(serde_json::json!({"method": method.name(), "seed": seed, "accuracy": acc}));
            if let Some(dir) = &a.save_dir {
                let mut ckpt = best.to_checkpoint();
                tag_checkpoint(&mut ckpt, KIND_GLAT, &vocab);
                let path = dir.join(format!("{}-seed{seed}.json", method.name()));
                ckpt.save(&path).at(&path)?;
            }
            rows.entry(method.name()).or_default().push(acc);
        }
    }

    let order = ["frequency", "global_only", "local_only", "local_fixed", "glat"];
    let methods = order
        .iter()
        .filter_map(|name| {
            rows.remove(name).map(|runs| MethodRow {
                method: name.to_string(),
                mean: Scores::mean(&runs),
                per_seed: runs,
            })
        })
        .collect();
    let locals: Vec<RoleAccuracy> = instance_ceilings.iter().map(|c| c.local).collect();
    let fulls: Vec<RoleAccuracy> = instance_ceilings.iter().map(|c| c.full).collect();
    let ceilings = Ceilings {
        local_predicate: world.local_ceiling(NodeKind::Predicate)?,
        full_predicate: world.full_ceiling(NodeKind::Predicate)?,
        unlinked_predicate: world.global_ceiling(NodeKind::Predicate, a.ceiling_samples, a.seed)?,
        local_instances: Scores::of_roles(&locals),
        full_instances: Scores::of_roles(&fulls),
    };
    print_json(&AblateReport {
        world: spec.name.clone(),
        train_graphs: train.len(),
        test_graphs: test.len(),
        mask_rate: rate,
        seeds,
        methods,
        ceilings,
    })
}

/// One slot of a triplet template.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Slot {
    Open,
    Fixed(usize),
}

#[derive(Debug, Clone, Copy)]
struct Template {
    slots: [Slot; 3],
    open: usize,
}

impl Template {
    const OPEN: &'static str = "[X]";

    fn parse(text: &str, vocab: &Vocabulary) -> CliResult<Self> {
        let parts: Vec<&str> = text.split_whitespace().collect();
        let bad = |m: String| CliError::new(Kind::Config, format!("template `{text}`: {m}"));
        if parts.len() != 3 {
            return Err(bad("expected three slots: subject, predicate, object".into()));
        }
        if parts.iter().filter(|&&p| p == Self::OPEN).count() != 1 {
            return Err(bad(format!("exactly one slot must be {}", Self::OPEN)));
        }
        let mut slots = [Slot::Open; 3];
        for (i, part) in parts.iter().enumerate() {
            if *part == Self::OPEN {
                continue;
            }
            let id = if i == 1 {
                vocab.predicate_id(part)
            } else {
                vocab.entity_id(part)
            };
            slots[i] = Slot::Fixed(id.ok_or_else(|| bad(format!("unknown class `{part}`")))?);
        }
        let open = slots.iter().position(|s| *s == Slot::Open).expect("one open slot");
        Ok(Self { slots, open })
    }

    /// The open slot's class for each matching triplet of `graph`.
    fn fill(&self, graph: &SceneGraph, counts: &mut BTreeMap<usize, usize>) -> usize {
        let mut matches = 0;
        for (s, p, o) in graph.to_triplets() {
            let triplet = [s, p, o];
            let fits = self
                .slots
                .iter()
                .zip(triplet)
                .all(|(slot, c)| matches!(slot, Slot::Open) || *slot == Slot::Fixed(c));
            if fits {
                *counts.entry(triplet[self.open]).or_default() += 1;
                matches += 1;
            }
        }
        matches
    }

    fn class_name<'v>(&self, vocab: &'v Vocabulary, id: usize) -> &'v str {
        if self.open == 1 {
            vocab.predicate_name(id)
        } else {
            vocab.entity_name(id)
        }
    }
}

#[derive(Debug, Serialize)]
struct Filler {
    class: String,
    count: usize,
    share: f64,
}

#[derive(Debug, Serialize)]
struct FillerTable {
    matches: usize,
    top: Vec<Filler>,
}

#[derive(Debug, Serialize)]
struct StatsReport {
    template: String,
    /// `masked` or `perception`.
    input: &'static str,
    graphs: usize,
    model: FillerTable,
    /// The same statistics over the model's targets (masked input) or the
    /// perception outputs it read.
    reference: FillerTable,
}

fn refs(graphs: &[SceneGraph]) -> Vec<&SceneGraph> {
    graphs.iter().collect()
}

fn filler_table(template: &Template, graphs: &[&SceneGraph], vocab: &Vocabulary, top: usize) -> FillerTable {
    let mut counts = BTreeMap::new();
    let matches: usize = graphs.iter().map(|g| template.fill(g, &mut counts)).sum();
    let mut ranked: Vec<(usize, usize)> = counts.into_iter().collect();
    ranked.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(&b.0)));
    FillerTable {
        matches,
        top: ranked
            .into_iter()
            .take(top)
            .map(|(id, count)| Filler {
                class: template.class_name(vocab, id).to_string(),
                count,
                share: count as f64 / matches as f64,
            })
            .collect(),
    }
}

pub fn stats(a: StatsArgs) -> CliResult<()> {
    let (graphs, data) = read_corpus(&a.corpus, a.vocab.vocab.as_deref())?;
    let vocab = &data.vocab;
    let template = Template::parse(&a.template, vocab)?;
    let model = load_glat(&a.ckpt, vocab)?;
    let (input, outputs, references): (_, Vec<SceneGraph>, Vec<SceneGraph>) = match &a.noise {
        None => {
            check_rate(a.rate)?;
            let masks = evaluation_masks(&graphs, a.rate, ClassCounts::of(vocab), a.seed)?;
            let outputs = masks
                .iter()
                .map(|m| {
                    Ok(ScoredGraph::from_logits(m.truth(), model.node_logits(m)?)?
                        .graph()
                        .clone())
                })
                .collect::<CliResult<_>>()?;
            ("masked", outputs, graphs.clone())
        }
        Some(path) => {
            let mut noise = NoiseConfig::load(path).at(path)?;
            noise.seed = a.seed;
            let sim = PerceptionSim::new(noise, vocab)?;
            let (mut outputs, mut references) = (Vec::new(), Vec::new());
            for (truth, perceived) in graphs.iter().zip(sim.simulate_corpus(&graphs)) {
                let out = commonsense_pipeline(&model, truth, &perceived, usize::MAX)?;
                outputs.push(out.commonsense.graph().clone());
                references.push(out.perception.graph().clone());
            }
            ("perception", outputs, references)
        }
    };
    print_json(&StatsReport {
        template: a.template.clone(),
        input,
        graphs: graphs.len(),
        model: filler_table(&template, &refs(&outputs), vocab, a.top),
        reference: filler_table(&template, &refs(&references), vocab, a.top),
    })
}
