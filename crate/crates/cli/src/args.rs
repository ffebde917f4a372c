use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};

#[derive(Parser, Debug)]
#[command(name = "incparse", version, about = "Probe language-model hidden states for incremental parse states")]
pub struct Cli {
    /// Seed for every random choice the command makes.
    #[arg(long, global = true)]
    pub seed: Option<u64>,

    /// Worker threads for per-sentence and per-item work.
    #[arg(long, global = true)]
    pub jobs: Option<usize>,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Read a CoNLL-U treebank into a corpus cache.
    Ingest(IngestArgs),
    /// Write a corpus cache of synthetic grammar sentences.
    Synth(SynthArgs),
    /// Build an embedding store.
    #[command(subcommand)]
    Embed(EmbedCommand),
    /// Train or evaluate incremental parse probes.
    #[command(subcommand)]
    Probe(ProbeCommand),
    /// Decode ranked parses for stored sentences.
    Parse(ParseArgs),
    /// Linear structural probes.
    #[command(subcommand)]
    Structural(StructuralCommand),
    /// NP/Z ambiguity experiments.
    #[command(subcommand)]
    Npz(NpzCommand),
    /// Counterfactual hidden-state perturbations.
    #[command(subcommand)]
    Cfx(CfxCommand),
}

#[derive(Args, Debug)]
pub struct IngestArgs {
    #[arg(long)]
    pub conllu: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value = "train")]
    pub split: String,
}

#[derive(Args, Debug)]
pub struct SynthArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 200)]
    pub sentences: usize,
    #[arg(long, default_value_t = 4)]
    pub min_words: usize,
    #[arg(long, default_value_t = 24)]
    pub max_words: usize,
    #[arg(long, default_value = "train")]
    pub split: String,
}

#[derive(Subcommand, Debug)]
pub enum EmbedCommand {
    /// Fetch hidden states from the model service.
    Export(ExportArgs),
    /// Encode gold trees with the planted encoder.
    Planted(PlantedArgs),
}

#[derive(Args, Debug)]
pub struct ExportArgs {
    #[arg(long)]
    pub corpus: PathBuf,
    /// Inclusive range `a..b` or a comma-separated list.
    #[arg(long, default_value = "0")]
    pub layers: String,
    #[arg(long, env = "INCPARSE_ENDPOINT")]
    pub endpoint: String,
    #[arg(long, default_value = "gpt2")]
    pub model: String,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct PlantedArgs {
    #[arg(long, required = true)]
    pub corpus: Vec<PathBuf>,
    #[arg(long, default_value_t = 1024)]
    pub dim: usize,
    #[arg(long, default_value = "0")]
    pub layers: String,
    #[arg(long)]
    pub out: PathBuf,
}

// Where hidden states come from. The first of store, planted encoder and
// service that is given wins.
#[derive(Args, Debug, Clone, Default)]
pub struct SourceArgs {
    /// Embedding store directory.
    #[arg(long)]
    pub emb: Option<PathBuf>,
    /// Planted encoder of this dimension over the gold trees at hand.
    #[arg(long)]
    pub planted_dim: Option<usize>,
    #[arg(long, env = "INCPARSE_ENDPOINT")]
    pub endpoint: Option<String>,
    #[arg(long, default_value = "gpt2")]
    pub model: String,
    /// Closed-form language model: `uniform:VOCAB` or `mean:LAYER:SCALE`.
    #[arg(long)]
    pub stub_lm: Option<String>,
}

#[derive(Args, Debug, Clone, Copy)]
pub struct BeamArgs {
    #[arg(long, default_value_t = 10)]
    pub k_action: usize,
    #[arg(long, default_value_t = 10)]
    pub k_word: usize,
    #[arg(long, default_value_t = 10)]
    pub k_out: usize,
}

#[derive(Subcommand, Debug)]
pub enum ProbeCommand {
    /// Fit a probe on gold oracle sequences.
    Train(TrainArgs),
    /// Decode a corpus and report parser metrics.
    Eval(EvalArgs),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum ArchArg {
    Gap,
    Map,
    Nap,
    Oracle,
    Uniform,
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    #[arg(long, value_enum)]
    pub arch: ArchArg,
    #[arg(long)]
    pub layer: Option<usize>,
    #[arg(long)]
    pub corpus: PathBuf,
    /// Development corpus for early stopping; defaults to the last tenth of
    /// the training corpus.
    #[arg(long)]
    pub dev: Option<PathBuf>,
    #[command(flatten)]
    pub source: SourceArgs,
    /// JSON training configuration; flags override its fields.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub input_dropout: Option<f64>,
    #[arg(long)]
    pub hidden: Option<usize>,
    #[arg(long)]
    pub out: PathBuf,
    /// Per-epoch log as JSON lines.
    #[arg(long)]
    pub log: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    #[arg(long)]
    pub corpus: PathBuf,
    #[command(flatten)]
    pub source: SourceArgs,
    #[command(flatten)]
    pub beam: BeamArgs,
    /// Also write a one-row TSV summary here.
    #[arg(long)]
    pub tsv: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct ParseArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    #[command(flatten)]
    pub source: SourceArgs,
    /// Sentence to parse; every sentence when omitted.
    #[arg(long)]
    pub sentence_id: Option<String>,
    /// Corpus supplying words and, for the planted encoder, trees.
    #[arg(long)]
    pub corpus: Option<PathBuf>,
    #[command(flatten)]
    pub beam: BeamArgs,
}

#[derive(Subcommand, Debug)]
pub enum StructuralCommand {
    /// Fit a distance or depth projection.
    Train(StructuralTrainArgs),
    /// Score a projection against gold trees.
    Eval(StructuralEvalArgs),
    /// Principal-component coordinates of projected words.
    Pca(StructuralPcaArgs),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum KindArg {
    Distance,
    Depth,
}

#[derive(Args, Debug)]
pub struct StructuralTrainArgs {
    #[arg(long, value_enum, default_value = "distance")]
    pub kind: KindArg,
    #[arg(long, default_value_t = 0)]
    pub layer: usize,
    #[arg(long)]
    pub corpus: PathBuf,
    #[arg(long)]
    pub dev: Option<PathBuf>,
    #[command(flatten)]
    pub source: SourceArgs,
    #[arg(long)]
    pub rank: Option<usize>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct StructuralEvalArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    #[arg(long)]
    pub corpus: PathBuf,
    #[command(flatten)]
    pub source: SourceArgs,
    #[arg(long)]
    pub tsv: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct StructuralPcaArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    #[arg(long)]
    pub corpus: PathBuf,
    #[command(flatten)]
    pub source: SourceArgs,
    #[arg(long)]
    pub sentence_id: Option<String>,
}

#[derive(Subcommand, Debug)]
pub enum NpzCommand {
    /// Analyse the ambiguity items in one of the modes.
    Run(NpzArgs),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum NpzMode {
    Behavior,
    ProbeAction,
    Congruence,
}

#[derive(Args, Debug)]
pub struct NpzArgs {
    #[arg(long, value_enum)]
    pub mode: NpzMode,
    /// JSON-lines item file; the bundled items when omitted.
    #[arg(long)]
    pub corpus: Option<PathBuf>,
    #[arg(long)]
    pub ckpt: Option<PathBuf>,
    /// Defaults to the checkpoint's layer.
    #[arg(long)]
    pub layer: Option<usize>,
    #[command(flatten)]
    pub source: SourceArgs,
    #[arg(long, default_value_t = 10_000)]
    pub resamples: usize,
}

#[derive(Subcommand, Debug)]
pub enum CfxCommand {
    /// Perturb hidden states toward each reading and measure surprisal effects.
    Run(CfxArgs),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum ObjectiveArg {
    Prob,
    Logprob,
}

#[derive(Args, Debug)]
pub struct CfxArgs {
    #[arg(long)]
    pub corpus: Option<PathBuf>,
    #[arg(long)]
    pub ckpt: PathBuf,
    #[arg(long)]
    pub layer: Option<usize>,
    #[arg(long, default_value_t = 1.0)]
    pub epsilon: f64,
    #[arg(long, default_value_t = 8)]
    pub steps: usize,
    #[arg(long, value_enum, default_value = "prob")]
    pub objective: ObjectiveArg,
    #[command(flatten)]
    pub source: SourceArgs,
    #[arg(long, default_value_t = 10_000)]
    pub resamples: usize,
    /// Write perturbed prefix states here as an embedding store.
    #[arg(long)]
    pub dump: Option<PathBuf>,
}
