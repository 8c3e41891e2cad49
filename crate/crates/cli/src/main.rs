//! `scenecrnn`: synthetic data, training, SVM calibration and evaluation
//! for the attention CRNN scene classifier.

mod commands;
mod features;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use scenecrnn::dsp::FilterKind;
use scenecrnn::layers::ModelKind;

#[derive(Parser, Debug)]
#[command(name = "scenecrnn", version, about = "Acoustic scene classification with an attention CRNN")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Render a synthetic scene dataset (WAVs and manifest).
    Synth(SynthArgs),
    /// Train a network and write its best checkpoint and history.
    Train(TrainArgs),
    /// Fit the calibrated SVM on a trained network's pooled features.
    Calibrate(CalibrateArgs),
    /// Segment and recording level metrics, optionally fusing two models.
    Eval(EvalArgs),
    /// Print the intermediate shapes of a model configuration.
    Inspect(InspectArgs),
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum FeatureArg {
    Logmel,
    Loggam,
}

impl From<FeatureArg> for FilterKind {
    fn from(f: FeatureArg) -> Self {
        match f {
            FeatureArg::Logmel => FilterKind::Mel,
            FeatureArg::Loggam => FilterKind::Gammatone,
        }
    }
}

#[derive(Clone, Copy, Debug, ValueEnum)]
#[value(rename_all = "snake_case")]
enum ModelArg {
    AttCrnn,
    CnnBaseline,
}

impl From<ModelArg> for ModelKind {
    fn from(m: ModelArg) -> Self {
        match m {
            ModelArg::AttCrnn => ModelKind::AttCrnn,
            ModelArg::CnnBaseline => ModelKind::CnnBaseline,
        }
    }
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum SplitArg {
    Train,
    Test,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum KeepArg {
    Best,
    Last,
}

#[derive(Args, Debug)]
struct SynthArgs {
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 4)]
    classes: usize,
    /// Recordings per class.
    #[arg(long, default_value_t = 10)]
    per_class: usize,
    /// Recordings per class held out for testing (0 puts half in each split).
    #[arg(long, default_value_t = 0)]
    test_per_class: usize,
    /// Recording length in seconds.
    #[arg(long, default_value_t = 30.0)]
    duration: f64,
    #[arg(long, default_value_t = 22050)]
    sample_rate: u32,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args, Debug)]
struct DataArgs {
    /// Dataset manifest CSV.
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long, value_enum, default_value_t = FeatureArg::Logmel)]
    features: FeatureArg,
    /// Feature cache directory (default: $SCENECRNN_CACHE or .cache beside the manifest).
    #[arg(long)]
    cache: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct ArchArgs {
    #[arg(long, value_enum, default_value_t = ModelArg::AttCrnn)]
    model: ModelArg,
    /// GRU hidden size.
    #[arg(long, default_value_t = 128)]
    hidden: usize,
    /// Attention layer size.
    #[arg(long, default_value_t = 64)]
    att_size: usize,
    /// Filters of the three conv layers.
    #[arg(long, value_parser = parse_filters, default_value = "64,128,256")]
    conv_channels: [usize; 3],
}

fn parse_filters(s: &str) -> Result<[usize; 3], String> {
    let v: Vec<usize> = s
        .split(',')
        .map(|p| p.trim().parse().map_err(|e| format!("'{p}': {e}")))
        .collect::<Result<_, _>>()?;
    v.try_into().map_err(|v: Vec<usize>| format!("expected three comma-separated sizes, got {}", v.len()))
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[command(flatten)]
    data: DataArgs,
    #[command(flatten)]
    arch: ArchArgs,
    #[arg(long, default_value_t = 500)]
    epochs: usize,
    #[arg(long, default_value_t = 100)]
    batch_size: usize,
    #[arg(long, default_value_t = 1e-4)]
    lr: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 0.25)]
    conv_dropout: f64,
    #[arg(long, default_value_t = 0.1)]
    rnn_dropout: f64,
    /// Checkpoint to write (default: <out>/model.ckpt).
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Which epoch's parameters to keep.
    #[arg(long, value_enum, default_value_t = KeepArg::Best)]
    keep: KeepArg,
    /// Output directory for history.csv.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct CalibrateArgs {
    #[command(flatten)]
    data: DataArgs,
    #[arg(long)]
    checkpoint: PathBuf,
    /// SVM file to write (default: <checkpoint>.svm).
    #[arg(long)]
    svm: Option<PathBuf>,
    /// Hinge-loss trade-off.
    #[arg(long = "svm-c", default_value_t = scenecrnn::calibrate::DEFAULT_C)]
    svm_c: f64,
    #[arg(long, default_value_t = scenecrnn::calibrate::DEFAULT_EPOCHS)]
    svm_epochs: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args, Debug)]
struct EvalArgs {
    #[command(flatten)]
    data: DataArgs,
    #[arg(long)]
    checkpoint: PathBuf,
    /// Calibrated SVM for the first model.
    #[arg(long)]
    svm: Option<PathBuf>,
    /// Second checkpoint fused multiplicatively with the first.
    #[arg(long)]
    fuse_with: Option<PathBuf>,
    /// Feature kind of the second model (default: same as --features).
    #[arg(long, value_enum)]
    fuse_features: Option<FeatureArg>,
    /// Calibrated SVM for the second model.
    #[arg(long)]
    fuse_svm: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = SplitArg::Test)]
    split: SplitArg,
    /// Per-recording predictions CSV.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct InspectArgs {
    #[command(flatten)]
    arch: ArchArgs,
    #[arg(long, default_value_t = 4)]
    classes: usize,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    let res = match cli.command {
        Command::Synth(a) => commands::synth(a),
        Command::Train(a) => commands::train(a),
        Command::Calibrate(a) => commands::calibrate(a),
        Command::Eval(a) => commands::eval(a),
        Command::Inspect(a) => commands::inspect(a),
    };
    match res {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(e.code())
        }
    }
}
