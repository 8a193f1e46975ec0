//! `glat`: corpus generation, training, fusion and evaluation from the shell.
//!
//! Every command is deterministic given its flags. Failures print one JSON
//! line `{"error":{"kind":..,"message":..}}` on stderr and exit with 2 for
//! unreadable or malformed input, 3 for invalid configuration and 1 otherwise.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use glat::baselines::Ablation;

mod eval;
mod gen;
mod io;
mod sgg;
mod train;

use io::{CliError, Kind};

#[derive(Debug, Parser)]
#[command(
    name = "glat",
    version,
    about = "Scene graph commonsense models: train, fuse, evaluate"
)]
struct Cli {
    /// Print progress as JSON lines on stderr.
    #[arg(long, short, global = true)]
    verbose: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Sample a synthetic corpus from a world description.
    GenCorpus(GenCorpusArgs),
    /// Pretrain by masked-node reconstruction.
    Train(TrainArgs),
    /// Fine-tune on simulated perception outputs.
    Finetune(FinetuneArgs),
    /// Masked-node accuracy of a checkpoint.
    EvalMask(EvalMaskArgs),
    /// Train GLAT and its ablations over several seeds and compare them.
    Ablate(AblateArgs),
    /// Perception, commonsense and fused scene graphs: accuracy and recall.
    EvalSgg(EvalSggArgs),
    /// Fuse perception and commonsense scored graphs node by node.
    Fuse(FuseArgs),
    /// Most frequent predictions filling one slot of a triplet template.
    Stats(StatsArgs),
}

#[derive(Debug, Args)]
pub struct GenCorpusArgs {
    #[arg(long)]
    pub world: PathBuf,
    #[arg(long)]
    pub n: usize,
    #[arg(long)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct VocabArg {
    /// Vocabulary JSON; defaults to the data file's manifest sidecar.
    #[arg(long)]
    pub vocab: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub corpus: PathBuf,
    #[arg(long)]
    pub config: PathBuf,
    #[arg(long)]
    pub seed: u64,
    /// Best checkpoint; the resumable state goes to `<out>.state.json`.
    #[arg(long)]
    pub out: PathBuf,
    /// Per-epoch JSONL log.
    #[arg(long)]
    pub log: Option<PathBuf>,
    /// Train an ablated architecture instead of the full model.
    #[arg(long, value_enum)]
    pub ablation: Option<AblationArg>,
    /// Continue from a `.state.json` file.
    #[arg(long)]
    pub resume: Option<PathBuf>,
    #[command(flatten)]
    pub vocab: VocabArg,
}

#[derive(Debug, Args)]
pub struct FinetuneArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    #[arg(long)]
    pub corpus: PathBuf,
    #[arg(long)]
    pub noise: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Training config; defaults to 25 epochs at learning rate 1e-5.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub freeze_encoder: bool,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub log: Option<PathBuf>,
    #[command(flatten)]
    pub vocab: VocabArg,
}

#[derive(Debug, Args)]
pub struct EvalMaskArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    #[arg(long)]
    pub corpus: PathBuf,
    #[arg(long, default_value_t = 0.3)]
    pub rate: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[command(flatten)]
    pub vocab: VocabArg,
}

#[derive(Debug, Args)]
pub struct AblateArgs {
    /// Training corpus written by `gen-corpus`.
    #[arg(long)]
    pub corpus: PathBuf,
    #[arg(long)]
    pub config: PathBuf,
    /// Number of seeds, counted up from `--seed`.
    #[arg(long, default_value_t = 3)]
    pub seeds: u64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Test corpus; sampled from the training corpus's world when absent.
    #[arg(long)]
    pub test: Option<PathBuf>,
    #[arg(long, default_value_t = 1000)]
    pub test_size: usize,
    /// Neural methods to train.
    #[arg(long, value_enum, value_delimiter = ',', default_values_t = MethodArg::ALL)]
    pub methods: Vec<MethodArg>,
    /// Keep every trained checkpoint here.
    #[arg(long)]
    pub save_dir: Option<PathBuf>,
    /// Monte Carlo samples for the global-observer ceiling.
    #[arg(long, default_value_t = 20_000)]
    pub ceiling_samples: usize,
}

#[derive(Debug, Args)]
pub struct EvalSggArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    /// Ground-truth test graphs.
    #[arg(long)]
    pub corpus: PathBuf,
    #[arg(long)]
    pub noise: PathBuf,
    #[arg(long, value_enum, default_value_t = Mode::Sgcls)]
    pub mode: Mode,
    #[arg(long, value_delimiter = ',', default_values_t = vec![50, 100])]
    pub k: Vec<usize>,
    #[arg(long)]
    pub graph_constraint: bool,
    /// Training corpus for the triplet-frequency bins; defaults to `--corpus`.
    #[arg(long)]
    pub train: Option<PathBuf>,
    /// Overrides the noise config's seed.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Predicates kept per perception output before re-encoding.
    #[arg(long, default_value_t = 100)]
    pub prune_k: usize,
    /// Write binned-recall CSV files here.
    #[arg(long)]
    pub csv_dir: Option<PathBuf>,
    /// Write truth, perception, commonsense and fused JSONL files here.
    #[arg(long)]
    pub dump_dir: Option<PathBuf>,
    #[command(flatten)]
    pub vocab: VocabArg,
}

#[derive(Debug, Args)]
pub struct FuseArgs {
    #[arg(long)]
    pub perception: PathBuf,
    #[arg(long)]
    pub commonsense: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[command(flatten)]
    pub vocab: VocabArg,
}

#[derive(Debug, Args)]
pub struct StatsArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    #[arg(long)]
    pub corpus: PathBuf,
    /// Three space-separated slots, one of them `[X]`, e.g. "person [X] horse".
    #[arg(long)]
    pub template: String,
    /// Read the model's input from simulated perception instead of masking.
    #[arg(long)]
    pub noise: Option<PathBuf>,
    #[arg(long, default_value_t = 0.3)]
    pub rate: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 5)]
    pub top: usize,
    #[command(flatten)]
    pub vocab: VocabArg,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
#[value(rename_all = "snake_case")]
pub enum AblationArg {
    GlobalOnly,
    LocalOnly,
    LocalFixed,
}

impl From<AblationArg> for Ablation {
    fn from(a: AblationArg) -> Self {
        match a {
            AblationArg::GlobalOnly => Ablation::GlobalOnly,
            AblationArg::LocalOnly => Ablation::LocalOnly,
            AblationArg::LocalFixed => Ablation::LocalFixed,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
#[value(rename_all = "snake_case")]
pub enum MethodArg {
    GlobalOnly,
    LocalOnly,
    LocalFixed,
    Glat,
}

impl MethodArg {
    pub const ALL: [MethodArg; 4] = [
        MethodArg::GlobalOnly,
        MethodArg::LocalOnly,
        MethodArg::LocalFixed,
        MethodArg::Glat,
    ];

    pub fn ablation(self) -> Option<Ablation> {
        match self {
            MethodArg::GlobalOnly => Some(Ablation::GlobalOnly),
            MethodArg::LocalOnly => Some(Ablation::LocalOnly),
            MethodArg::LocalFixed => Some(Ablation::LocalFixed),
            MethodArg::Glat => None,
        }
    }

    pub fn name(self) -> &'static str {
        self.ablation().map_or("glat", Ablation::name)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Mode {
    /// Entity classes are given; only predicates are perceived.
    Predcls,
    /// Entity and predicate classes are both perceived.
    Sgcls,
}

/// Progress reporting on stderr, enabled by `--verbose`.
#[derive(Debug, Clone, Copy)]
pub struct Progress(bool);

impl Progress {
    pub fn emit(self, value: serde_json::Value) {
        if self.0 {
            eprintln!("{}", serde_json::json!({ "progress": value }));
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if !e.use_stderr() => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let message = e.to_string();
            let first = message.lines().next().unwrap_or("invalid arguments");
            let first = first.strip_prefix("error: ").unwrap_or(first);
            return fail(CliError::new(Kind::Usage, first));
        }
    };
    let progress = Progress(cli.verbose);
    let result = match cli.command {
        Command::GenCorpus(a) => gen::gen_corpus(a),
        Command::Train(a) => train::train(a, progress),
        Command::Finetune(a) => train::finetune(a, progress),
        Command::EvalMask(a) => eval::eval_mask(a),
        Command::Ablate(a) => eval::ablate(a, progress),
        Command::EvalSgg(a) => sgg::eval_sgg(a),
        Command::Fuse(a) => sgg::fuse(a),
        Command::Stats(a) => eval::stats(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => fail(e),
    }
}

fn fail(e: CliError) -> ExitCode {
    eprintln!("{}", e.to_json_line());
    ExitCode::from(e.kind.exit_code() as u8)
}
