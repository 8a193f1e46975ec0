use std::ffi::OsString;
use std::fmt;
use std::io::Write;
use std::path::{Path, PathBuf};

use glat::checkpoint::Checkpoint;
use glat::corpus::{load_corpus, CorpusManifest, WorldSpec};
use glat::optim::ParamStore;
use glat::{GlatConfig, GlatModel, SceneGraph, Vocabulary};
use serde::{Deserialize, Serialize};
use serde_json::Value;

/// Error category, reported as `kind` and mapped to an exit code.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Kind {
    Usage,
    Io,
    Parse,
    Config,
    Runtime,
}

impl Kind {
    pub fn name(self) -> &'static str {
        match self {
            Kind::Usage => "usage",
            Kind::Io => "io",
            Kind::Parse => "parse",
            Kind::Config => "config",
            Kind::Runtime => "runtime",
        }
    }

    pub fn exit_code(self) -> i32 {
        match self {
            Kind::Usage | Kind::Io | Kind::Parse => 2,
            Kind::Config => 3,
            Kind::Runtime => 1,
        }
    }
}

#[derive(Debug)]
pub struct CliError {
    pub kind: Kind,
    pub message: String,
}

impl CliError {
    pub fn new(kind: Kind, message: impl Into<String>) -> Self {
        Self {
            kind,
            message: message.into(),
        }
    }

    /// Prefixes the message with the file it concerns.
    pub fn at(mut self, path: &Path) -> Self {
        self.message = format!("{}: {}", path.display(), self.message);
        self
    }

    /// The single stderr line: `{"error":{"kind":..,"message":..}}`.
    pub fn to_json_line(&self) -> String {
        serde_json::json!({"error": {"kind": self.kind.name(), "message": self.message}}).to_string()
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}: {}", self.kind.name(), self.message)
    }
}

impl From<glat::Error> for CliError {
    fn from(e: glat::Error) -> Self {
        use glat::Error as E;
        let kind = match &e {
            E::Io(_) => Kind::Io,
            E::Json(_) | E::Parse { .. } | E::UnknownClass { .. } => Kind::Parse,
            E::Config(_) => Kind::Config,
            _ => Kind::Runtime,
        };
        Self::new(kind, e.to_string())
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        Self::new(Kind::Io, e.to_string())
    }
}

impl From<serde_json::Error> for CliError {
    fn from(e: serde_json::Error) -> Self {
        Self::new(Kind::Parse, e.to_string())
    }
}

pub type CliResult<T> = Result<T, CliError>;

/// Attaches `path` to any error from loading it.
pub trait WithPath<T> {
    fn at(self, path: &Path) -> CliResult<T>;
}

impl<T, E: Into<CliError>> WithPath<T> for Result<T, E> {
    fn at(self, path: &Path) -> CliResult<T> {
        self.map_err(|e| e.into().at(path))
    }
}

/// `<path><suffix>`, e.g. `corpus.jsonl.manifest.json`.
pub fn sidecar(path: &Path, suffix: &str) -> PathBuf {
    let mut s = OsString::from(path.as_os_str());
    s.push(suffix);
    PathBuf::from(s)
}

pub fn manifest_path(data: &Path) -> PathBuf {
    sidecar(data, ".manifest.json")
}

/// Sidecar describing a JSONL file: its vocabulary and, for generated
/// corpora, the world it came from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub vocabulary: Value,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub corpus: Option<CorpusManifest>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub world: Option<WorldSpec>,
}

impl Manifest {
    pub fn for_vocabulary(vocab: &Vocabulary) -> Self {
        Self {
            vocabulary: vocab.to_json(),
            corpus: None,
            world: None,
        }
    }

    pub fn load(path: &Path) -> CliResult<Self> {
        let text = std::fs::read_to_string(path).at(path)?;
        serde_json::from_str(&text).at(path)
    }

    pub fn save(&self, path: &Path) -> CliResult<()> {
        write_json_pretty(path, self)
    }
}

/// A JSONL data file with its resolved vocabulary.
pub struct Dataset {
    pub vocab: Vocabulary,
    pub manifest: Option<Manifest>,
}

/// Resolves the vocabulary for `data`: `--vocab` if given, otherwise the
/// manifest sidecar.
pub fn resolve(data: &Path, vocab: Option<&Path>) -> CliResult<Dataset> {
    let mpath = manifest_path(data);
    let manifest = if mpath.exists() {
        Some(Manifest::load(&mpath)?)
    } else {
        None
    };
    let vocab = match (vocab, &manifest) {
        (Some(p), _) => Vocabulary::load(p).at(p)?,
        (None, Some(m)) => Vocabulary::from_json(&m.vocabulary).at(&mpath)?,
        (None, None) => {
            return Err(CliError::new(
                Kind::Io,
                format!(
                    "no vocabulary for {}: pass --vocab or keep {} next to it",
                    data.display(),
                    mpath.display()
                ),
            ))
        }
    };
    Ok(Dataset { vocab, manifest })
}

/// Loads a corpus and its vocabulary.
pub fn read_corpus(path: &Path, vocab: Option<&Path>) -> CliResult<(Vec<SceneGraph>, Dataset)> {
    let data = resolve(path, vocab)?;
    let graphs = load_corpus(path, &data.vocab).at(path)?;
    Ok((graphs, data))
}

pub fn write_json_pretty<T: Serialize>(path: &Path, value: &T) -> CliResult<()> {
    let text = serde_json::to_string_pretty(value)? + "\n";
    std::fs::write(path, text).at(path)
}

/// Writes one compact JSON value per line.
pub fn write_jsonl<T: Serialize>(path: &Path, rows: &[T]) -> CliResult<()> {
    let mut out = std::io::BufWriter::new(std::fs::File::create(path).at(path)?);
    for row in rows {
        serde_json::to_writer(&mut out, row)?;
        out.write_all(b"\n").at(path)?;
    }
    out.flush().at(path)
}

/// Parses every nonblank line of a JSONL file.
pub fn read_jsonl<T: for<'de> Deserialize<'de>>(path: &Path) -> CliResult<Vec<T>> {
    let text = std::fs::read_to_string(path).at(path)?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|e| CliError::new(Kind::Parse, format!("line {}: {e}", i + 1)).at(path))
        })
        .collect()
}

/// Prints a report to stdout as pretty JSON. A closed pipe is not an error.
pub fn print_json<T: Serialize>(value: &T) -> CliResult<()> {
    let text = serde_json::to_string_pretty(value)?;
    match writeln!(std::io::stdout().lock(), "{text}") {
        Err(e) if e.kind() == std::io::ErrorKind::BrokenPipe => Ok(()),
        r => Ok(r?),
    }
}

pub const KIND_GLAT: &str = "glat";
pub const KIND_TRUTH_ORACLE: &str = "truth_oracle";

/// A model loaded from a checkpoint file.
pub enum LoadedModel {
    Glat(GlatModel),
    /// Copies the hidden truth; a stub for checking the evaluation path.
    TruthOracle,
}

pub struct LoadedCheckpoint {
    pub model: LoadedModel,
    pub vocab: Option<Vocabulary>,
}

/// Stamps the model kind and vocabulary into a checkpoint's config.
pub fn tag_checkpoint(ckpt: &mut Checkpoint, kind: &str, vocab: &Vocabulary) {
    if let Value::Object(map) = &mut ckpt.config {
        map.insert("kind".into(), Value::String(kind.into()));
        map.insert("vocabulary".into(), vocab.to_json());
    }
}

pub fn load_checkpoint(path: &Path) -> CliResult<LoadedCheckpoint> {
    let ckpt = Checkpoint::load(path).at(path)?;
    let vocab = match ckpt.config.get("vocabulary") {
        Some(v) => Some(Vocabulary::from_json(v).at(path)?),
        None => None,
    };
    let kind = ckpt.config.get("kind").and_then(Value::as_str).unwrap_or(KIND_GLAT);
    let model = match kind {
        KIND_GLAT => LoadedModel::Glat(GlatModel::from_checkpoint(&ckpt).at(path)?),
        KIND_TRUTH_ORACLE => LoadedModel::TruthOracle,
        other => return Err(CliError::new(Kind::Config, format!("unknown model kind `{other}`")).at(path)),
    };
    Ok(LoadedCheckpoint { model, vocab })
}

/// Loads a checkpoint that must hold a GLAT model trained on `vocab`.
pub fn load_glat(path: &Path, vocab: &Vocabulary) -> CliResult<GlatModel> {
    let loaded = load_checkpoint(path)?;
    check_vocab(path, loaded.vocab.as_ref(), vocab)?;
    match loaded.model {
        LoadedModel::Glat(m) => Ok(m),
        LoadedModel::TruthOracle => Err(CliError::new(
            Kind::Config,
            "this command needs a trained GLAT checkpoint, not a truth oracle",
        )
        .at(path)),
    }
}

/// Fails if a checkpoint's vocabulary differs from the data's.
pub fn check_vocab(path: &Path, ckpt: Option<&Vocabulary>, data: &Vocabulary) -> CliResult<()> {
    match ckpt {
        Some(v) if v != data => {
            Err(CliError::new(Kind::Config, "checkpoint vocabulary differs from the corpus vocabulary").at(path))
        }
        _ => Ok(()),
    }
}

/// Extra tensors under `prefix` in a training-state file, rebuilt as a model.
pub fn model_from_prefixed(ckpt: &Checkpoint, prefix: &str, config: &GlatConfig) -> CliResult<Option<GlatModel>> {
    let tensors = ckpt.tensors_with_prefix(prefix)?;
    if tensors.is_empty() {
        return Ok(None);
    }
    let mut params = ParamStore::new();
    for (name, t) in tensors {
        params.insert(&name[prefix.len()..], t);
    }
    Ok(Some(GlatModel::from_params(config.clone(), params)?))
}
