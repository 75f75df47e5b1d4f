use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};

/// Prompt-tuned diffusion features for semantic keypoint matching.
///
/// Every flag can also be set through a `DIFFMATCH_*` environment variable
/// (shown in each flag's help); explicit flags win.
#[derive(Debug, Parser)]
#[command(name = "diffmatch", version, about, propagate_version = true)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,

    /// Cap on threads used for parallel pair processing.
    #[arg(long, global = true, env = "DIFFMATCH_WORKERS")]
    pub workers: Option<usize>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Optimise a prompt provider on a training split.
    Tune(TuneArgs),
    /// Score predictions with PCK and write a report.
    Eval(EvalArgs),
    /// Predict target keypoints and write them to a CSV file.
    Match(MatchArgs),
    /// Draw predictions side by side, coloured by correctness.
    Visualize(VisualizeArgs),
    /// Compare analytic and finite-difference gradients of the loss.
    GradCheck(GradCheckArgs),
    /// Write a procedurally generated dataset in the canonical format.
    Synth(SynthArgs),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum DatasetKind {
    Spair,
    PfPascal,
    PfWillow,
    Canonical,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Provider {
    Single,
    Class,
    Cpm,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum BackboneKind {
    Toy,
    Real,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Threshold {
    Img,
    Kps,
    Bbox,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum AggregationArg {
    Pair,
    Point,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Matcher {
    /// The tuned (or freshly initialised) prompt with the backbone.
    Model,
    /// Returns the annotated target keypoints; checks the scoring pipeline.
    GroundTruth,
}

#[derive(Debug, Args)]
pub struct DataArgs {
    /// Dataset directory; for `canonical` either a `.jsonl` file or a
    /// directory holding `pairs.jsonl`.
    #[arg(long, env = "DIFFMATCH_DATASET_ROOT")]
    pub dataset_root: Option<PathBuf>,

    #[arg(long, value_enum, default_value = "canonical", env = "DIFFMATCH_DATASET")]
    pub dataset: DatasetKind,

    /// train, val or test (canonical files carry their own split).
    #[arg(long, env = "DIFFMATCH_SPLIT")]
    pub split: Option<String>,
}

#[derive(Debug, Args)]
pub struct ModelArgs {
    /// TOML file with training/inference settings.
    #[arg(long, env = "DIFFMATCH_CONFIG")]
    pub config: Option<PathBuf>,

    #[arg(long, value_enum, env = "DIFFMATCH_PROVIDER")]
    pub provider: Option<Provider>,

    #[arg(long, value_enum, default_value = "toy", env = "DIFFMATCH_BACKBONE")]
    pub backbone: BackboneKind,

    /// Pretrained weights for `--backbone real`.
    #[arg(long, env = "DIFFMATCH_WEIGHTS")]
    pub weights: Option<String>,

    #[arg(long, env = "DIFFMATCH_CHECKPOINT")]
    pub checkpoint: Option<PathBuf>,

    #[arg(long, env = "DIFFMATCH_SEED")]
    pub seed: Option<u64>,

    /// Side of the square working resolution.
    #[arg(long, env = "DIFFMATCH_IMAGE_SIZE")]
    pub image_size: Option<usize>,
}

#[derive(Debug, Args)]
pub struct TuneArgs {
    #[command(flatten)]
    pub data: DataArgs,

    #[command(flatten)]
    pub model: ModelArgs,

    #[arg(long, env = "DIFFMATCH_STEPS")]
    pub steps: Option<usize>,

    /// Split scored every `validate_every` steps; the best provider is
    /// saved as `best.json`.
    #[arg(long, env = "DIFFMATCH_VAL_SPLIT")]
    pub val_split: Option<String>,

    #[arg(long, env = "DIFFMATCH_OUT")]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct ScoreArgs {
    #[arg(long, value_delimiter = ',', default_values_t = diffmatch::evaluation::DEFAULT_ALPHAS, env = "DIFFMATCH_ALPHAS")]
    pub alphas: Vec<f64>,

    #[arg(long, value_enum, default_value = "img", env = "DIFFMATCH_THRESHOLD")]
    pub threshold: Threshold,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[command(flatten)]
    pub data: DataArgs,

    #[command(flatten)]
    pub model: ModelArgs,

    #[command(flatten)]
    pub score: ScoreArgs,

    #[arg(long, value_enum, default_value = "pair", env = "DIFFMATCH_AGGREGATION")]
    pub aggregation: AggregationArg,

    #[arg(long, value_enum, default_value = "model", env = "DIFFMATCH_MATCHER")]
    pub matcher: Matcher,

    #[arg(long, env = "DIFFMATCH_OUT")]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct MatchArgs {
    #[command(flatten)]
    pub data: DataArgs,

    #[command(flatten)]
    pub model: ModelArgs,

    /// Only match these pair ids (repeatable); all pairs by default.
    #[arg(long = "pair")]
    pub pairs: Vec<String>,

    #[arg(long, env = "DIFFMATCH_OUT")]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct VisualizeArgs {
    #[command(flatten)]
    pub data: DataArgs,

    /// CSV written by `match` or `eval`.
    #[arg(long, env = "DIFFMATCH_PREDICTIONS")]
    pub predictions: PathBuf,

    /// Ratio at which a prediction counts as correct.
    #[arg(long, default_value_t = 0.1, env = "DIFFMATCH_ALPHA")]
    pub alpha: f64,

    #[arg(long, value_enum, default_value = "img", env = "DIFFMATCH_THRESHOLD")]
    pub threshold: Threshold,

    /// Working resolution the correctness test is made at.
    #[arg(long, env = "DIFFMATCH_IMAGE_SIZE")]
    pub image_size: Option<usize>,

    #[arg(long, env = "DIFFMATCH_CONFIG")]
    pub config: Option<PathBuf>,

    /// Only draw these pair ids (repeatable).
    #[arg(long = "pair")]
    pub pairs: Vec<String>,

    #[arg(long, env = "DIFFMATCH_OUT")]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct GradCheckArgs {
    #[command(flatten)]
    pub data: DataArgs,

    #[command(flatten)]
    pub model: ModelArgs,

    /// Pairs (from the start of the split) in the checked batch.
    #[arg(long, default_value_t = 2)]
    pub pairs: usize,

    /// Parameter entries probed, spread over all groups.
    #[arg(long, default_value_t = 32)]
    pub entries: usize,

    #[arg(long, default_value_t = 1e-5)]
    pub eps: f64,

    /// Largest acceptable relative error.
    #[arg(long, default_value_t = 1e-4)]
    pub tolerance: f64,

    /// Also write the report as JSON to this file.
    #[arg(long, env = "DIFFMATCH_OUT")]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[arg(long, default_value_t = 8)]
    pub pairs: usize,

    #[arg(long, default_value_t = 64)]
    pub image_size: usize,

    #[arg(long, default_value_t = 8)]
    pub keypoints: usize,

    /// Largest translation between the two images, in pixels.
    #[arg(long, default_value_t = 8)]
    pub max_shift: i32,

    #[arg(long, default_value_t = 7, env = "DIFFMATCH_SEED")]
    pub seed: u64,

    #[arg(long, default_value = "train")]
    pub split: String,

    #[arg(long, env = "DIFFMATCH_OUT")]
    pub out: PathBuf,
}
