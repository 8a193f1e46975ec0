use std::fs::OpenOptions;
use std::io::Write;
use std::path::Path;

use glat::baselines::make_ablation;
use glat::checkpoint::Checkpoint;
use glat::glat::ClassCounts;
use glat::perception::{NoiseConfig, PerceptionSim};
use glat::training::{initial_model, InputSource, ModelSpec, TrainConfig, Trainer};
use glat::{GlatModel, Vocabulary};

use crate::io::{
    load_glat, model_from_prefixed, print_json, read_corpus, sidecar, tag_checkpoint, CliResult, WithPath, KIND_GLAT,
};
use crate::{FinetuneArgs, Progress, TrainArgs};

const BEST_PREFIX: &str = "best.";

pub fn state_path(out: &Path) -> std::path::PathBuf {
    sidecar(out, ".state.json")
}

pub fn load_train_config(path: &Path) -> CliResult<TrainConfig> {
    TrainConfig::load(path).at(path)
}

/// Applies an ablation to the model section of `config`.
pub fn ablated(config: &TrainConfig, kind: glat::baselines::Ablation, counts: ClassCounts) -> CliResult<TrainConfig> {
    let model = make_ablation(kind, &config.model.to_config(counts)?)?;
    Ok(TrainConfig {
        model: ModelSpec::from_config(&model),
        ..config.clone()
    })
}

pub fn train(a: TrainArgs, progress: Progress) -> CliResult<()> {
    let (graphs, data) = read_corpus(&a.corpus, a.vocab.vocab.as_deref())?;
    let counts = ClassCounts::of(&data.vocab);
    let mut config = load_train_config(&a.config)?;
    if let Some(kind) = a.ablation {
        config = ablated(&config, kind.into(), counts)?;
    }
    let source = InputSource::Masked {
        rate: config.model.mask_rate,
    };
    let mut trainer = match &a.resume {
        Some(path) => {
            let ckpt = Checkpoint::load(path).at(path)?;
            let model_config = GlatModel::from_checkpoint(&ckpt).at(path)?.config().clone();
            let best = model_from_prefixed(&ckpt, BEST_PREFIX, &model_config).at(path)?;
            Trainer::resume(&ckpt, best, &graphs, config, source, a.seed)?
        }
        None => Trainer::new(initial_model(&config, counts, a.seed)?, &graphs, config, source, a.seed)?,
    };
    run(&mut trainer, progress)?;
    save(&trainer, &a.out, a.log.as_deref(), a.resume.is_some(), &data.vocab)
}

pub fn finetune(a: FinetuneArgs, progress: Progress) -> CliResult<()> {
    let (graphs, data) = read_corpus(&a.corpus, a.vocab.vocab.as_deref())?;
    let mut config = match &a.config {
        Some(p) => load_train_config(p)?,
        None => TrainConfig::fine_tune(),
    };
    config.freeze_encoder |= a.freeze_encoder;
    let model = load_glat(&a.ckpt, &data.vocab)?;
    let noise = NoiseConfig::load(&a.noise).at(&a.noise)?;
    let sim = PerceptionSim::new(noise, &data.vocab)?;
    let mut trainer = Trainer::new(model, &graphs, config, InputSource::Perceived(sim), a.seed)?;
    run(&mut trainer, progress)?;
    save(&trainer, &a.out, a.log.as_deref(), false, &data.vocab)
}

fn run(trainer: &mut Trainer<'_>, progress: Progress) -> CliResult<()> {
    trainer.run(|e| progress.emit(serde_json::to_value(e).expect("log serializes")))?;
    Ok(())
}

/// Writes the best model to `out`, the resumable state beside it and the
/// epoch log.
fn save(trainer: &Trainer<'_>, out: &Path, log: Option<&Path>, append: bool, vocab: &Vocabulary) -> CliResult<()> {
    let mut best = trainer.best_model().to_checkpoint();
    tag_checkpoint(&mut best, KIND_GLAT, vocab);
    best.save(out).at(out)?;

    let mut state = trainer.checkpoint();
    for (name, record) in &best.tensors {
        state.tensors.insert(format!("{BEST_PREFIX}{name}"), record.clone());
    }
    tag_checkpoint(&mut state, KIND_GLAT, vocab);
    let spath = state_path(out);
    state.save(&spath).at(&spath)?;

    if let Some(path) = log {
        let mut file = OpenOptions::new()
            .create(true)
            .write(true)
            .append(append)
            .truncate(!append)
            .open(path)
            .at(path)?;
        for entry in trainer.log() {
            writeln!(file, "{}", serde_json::to_string(entry)?).at(path)?;
        }
    }
    print_json(&serde_json::json!({
        "epochs": trainer.state().epoch,
        "best_loss": trainer.state().best_loss,
        "last": trainer.log().last(),
    }))
}
