use std::path::Path;

use glat::baselines::build_frequency;
use glat::corpus::load_corpus;
use glat::fusion::{fuse_graphs, provenance, ScoredRecord};
use glat::metrics::{binned_recall, mean_image_recall, mean_recall, node_accuracy, BinAveraging, BinnedRecallReport};
use glat::perception::{commonsense_pipeline, NoiseConfig, PerceptionSim, SggOutputs};
use glat::scene_graph::NodeKind;
use glat::{GlatModel, SceneGraph, ScoredGraph, Vocabulary};
use serde::Serialize;

use crate::io::{
    load_glat, manifest_path, print_json, read_corpus, read_jsonl, resolve, write_jsonl, CliError, CliResult, Kind,
    Manifest, WithPath,
};
use crate::{EvalSggArgs, FuseArgs, Mode};

/// Labels of the three compared graphs, in report order.
const SOURCES: [&str; 3] = ["perception", "commonsense", "fused"];

#[derive(Debug, Clone, Copy, Serialize)]
pub struct NodeAccuracy {
    pub entity: f64,
    pub predicate: f64,
    pub all: f64,
}

#[derive(Debug, Serialize)]
pub struct SourceAccuracy {
    pub source: &'static str,
    #[serde(flatten)]
    pub accuracy: NodeAccuracy,
}

#[derive(Debug, Serialize)]
pub struct RecallRow {
    pub source: &'static str,
    pub k: usize,
    pub recall: Option<f64>,
    pub mean_recall: Option<f64>,
    pub binned: BinnedRecallReport,
}

#[derive(Debug, Serialize)]
pub struct SggReport {
    pub mode: &'static str,
    pub graph_constraint: bool,
    pub graphs: usize,
    pub noise_seed: u64,
    /// Ground-truth predicates dropped by pruning before re-encoding.
    pub pruned_predicates: usize,
    pub node_accuracy: Vec<SourceAccuracy>,
    pub recall: Vec<RecallRow>,
}

/// In predicate classification the entity labels are given, so the
/// commonsense model may not change them.
fn keep_entities(outputs: &mut SggOutputs) -> glat::Result<()> {
    let ne = outputs.perception.graph().num_entities();
    let mut logits = outputs.commonsense.logits().to_vec();
    logits[..ne].clone_from_slice(&outputs.perception.logits()[..ne]);
    outputs.commonsense = ScoredGraph::from_logits(outputs.commonsense.graph(), logits)?;
    outputs.fused = fuse_graphs(&outputs.perception, &outputs.commonsense)?;
    Ok(())
}

/// Runs perception simulation, commonsense rewriting and fusion on `truths`.
pub fn sgg_outputs(
    model: &GlatModel,
    truths: &[SceneGraph],
    sim: &PerceptionSim,
    mode: Mode,
    prune_k: usize,
) -> CliResult<Vec<SggOutputs>> {
    truths
        .iter()
        .zip(sim.simulate_corpus(truths))
        .map(|(truth, perceived)| {
            let mut out = commonsense_pipeline(model, truth, &perceived, prune_k)?;
            if mode == Mode::Predcls {
                keep_entities(&mut out)?;
            }
            Ok(out)
        })
        .collect()
}

fn accuracy(preds: &[&SceneGraph], truths: &[&SceneGraph]) -> CliResult<NodeAccuracy> {
    Ok(NodeAccuracy {
        entity: node_accuracy(preds, truths, Some(NodeKind::Entity))?,
        predicate: node_accuracy(preds, truths, Some(NodeKind::Predicate))?,
        all: node_accuracy(preds, truths, None)?,
    })
}

fn pick<'a>(out: &'a SggOutputs, source: &str) -> &'a ScoredGraph {
    match source {
        "perception" => &out.perception,
        "commonsense" => &out.commonsense,
        _ => &out.fused,
    }
}

pub fn eval_sgg(a: EvalSggArgs) -> CliResult<()> {
    if a.k.is_empty() || a.k.contains(&0) {
        return Err(CliError::new(Kind::Config, "--k needs positive values"));
    }
    if a.prune_k == 0 {
        return Err(CliError::new(Kind::Config, "--prune-k must be positive"));
    }
    let (truths, data) = read_corpus(&a.corpus, a.vocab.vocab.as_deref())?;
    let vocab = &data.vocab;
    let model = load_glat(&a.ckpt, vocab)?;
    let mut noise = NoiseConfig::load(&a.noise).at(&a.noise)?;
    if let Some(seed) = a.seed {
        noise.seed = seed;
    }
    if a.mode == Mode::Predcls {
        noise.corrupt_entities = false;
    }
    let noise_seed = noise.seed;
    let sim = PerceptionSim::new(noise, vocab)?;
    let outputs = sgg_outputs(&model, &truths, &sim, a.mode, a.prune_k)?;

    let train = match &a.train {
        Some(p) => load_corpus(p, vocab).at(p)?,
        None => truths.clone(),
    };
    let table = build_frequency(&train, vocab.num_predicate_classes());
    let gts: Vec<SceneGraph> = outputs.iter().map(|o| o.truth.clone()).collect();
    let gt_refs: Vec<&SceneGraph> = gts.iter().collect();

    let mut node_acc = Vec::new();
    let mut recall = Vec::new();
    for source in SOURCES {
        let preds: Vec<ScoredGraph> = outputs.iter().map(|o| pick(o, source).clone()).collect();
        let pred_refs: Vec<&SceneGraph> = preds.iter().map(|p| p.graph()).collect();
        node_acc.push(SourceAccuracy {
            source,
            accuracy: accuracy(&pred_refs, &gt_refs)?,
        });
        for &k in &a.k {
            recall.push(RecallRow {
                source,
                k,
                recall: mean_image_recall(&preds, &gts, k, a.graph_constraint)?,
                mean_recall: mean_recall(&preds, &gts, vocab.num_predicate_classes(), k, a.graph_constraint)?.mean,
                binned: binned_recall(&preds, &gts, &table, k, a.graph_constraint, BinAveraging::Images)?,
            });
        }
    }

    if let Some(dir) = &a.csv_dir {
        std::fs::create_dir_all(dir).at(dir)?;
        for row in &recall {
            let path = dir.join(format!("binned-{}-r{}.csv", row.source, row.k));
            std::fs::write(&path, row.binned.to_csv()).at(&path)?;
        }
    }
    if let Some(dir) = &a.dump_dir {
        dump(dir, &outputs, vocab)?;
    }

    let pruned_predicates = truths.iter().map(|t| t.num_predicates()).sum::<usize>()
        - gts.iter().map(|t| t.num_predicates()).sum::<usize>();
    print_json(&SggReport {
        mode: match a.mode {
            Mode::Predcls => "predcls",
            Mode::Sgcls => "sgcls",
        },
        graph_constraint: a.graph_constraint,
        graphs: truths.len(),
        noise_seed,
        pruned_predicates,
        node_accuracy: node_acc,
        recall,
    })
}

/// Writes `truth`, `perception`, `commonsense` and `fused` JSONL files with
/// manifest sidecars.
fn dump(dir: &Path, outputs: &[SggOutputs], vocab: &Vocabulary) -> CliResult<()> {
    std::fs::create_dir_all(dir).at(dir)?;
    let manifest = Manifest::for_vocabulary(vocab);
    let truth: Vec<_> = outputs.iter().map(|o| o.truth.to_record(vocab)).collect();
    let path = dir.join("truth.jsonl");
    write_jsonl(&path, &truth)?;
    manifest.save(&manifest_path(&path))?;
    for source in SOURCES {
        let rows: Vec<ScoredRecord> = outputs.iter().map(|o| pick(o, source).to_record(vocab)).collect();
        let path = dir.join(format!("{source}.jsonl"));
        write_jsonl(&path, &rows)?;
        manifest.save(&manifest_path(&path))?;
    }
    Ok(())
}

fn read_scored(path: &Path, vocab: &Vocabulary) -> CliResult<Vec<ScoredGraph>> {
    let records: Vec<ScoredRecord> = read_jsonl(path)?;
    records
        .iter()
        .enumerate()
        .map(|(i, r)| ScoredGraph::from_record(r, vocab, i + 1).at(path))
        .collect()
}

pub fn fuse(a: FuseArgs) -> CliResult<()> {
    let data = resolve(&a.perception, a.vocab.vocab.as_deref())?;
    let vocab = &data.vocab;
    let perception = read_scored(&a.perception, vocab)?;
    let commonsense = read_scored(&a.commonsense, vocab)?;
    if perception.len() != commonsense.len() {
        return Err(CliError::new(
            Kind::Runtime,
            format!(
                "{} perception graphs but {} commonsense graphs",
                perception.len(),
                commonsense.len()
            ),
        ));
    }
    let mut rows = Vec::with_capacity(perception.len());
    for (i, (p, c)) in perception.iter().zip(&commonsense).enumerate() {
        let fused = fuse_graphs(p, c).map_err(|e| CliError::from(e).at(Path::new(&format!("graph {}", i + 1))))?;
        let mut record = fused.to_record(vocab);
        record.provenance = Some(provenance(p, c, &fused));
        rows.push(record);
    }
    write_jsonl(&a.out, &rows)?;
    Manifest::for_vocabulary(vocab).save(&manifest_path(&a.out))?;
    print_json(&serde_json::json!({ "graphs": rows.len() }))
}
