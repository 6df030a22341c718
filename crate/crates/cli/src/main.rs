mod commands;
mod config;
mod dataset;
mod manifest;
mod selftest;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use mpum::network::Strategy;
use mpum::{ErrorKind, Modality};

#[derive(Parser, Debug)]
#[command(name = "mpum", version, about = "Modality-projection segmentation, volumetric metrics and uptake statistics")]
struct Cli {
    #[command(flatten)]
    global: Global,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone, Debug, Default)]
pub struct Global {
    /// JSON run configuration; flags override its values.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Output directory; nothing is written outside it.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Worker thread cap.
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    /// Family-wise significance level.
    #[arg(long, global = true)]
    pub alpha: Option<f64>,
    /// Surface Dice tolerance.
    #[arg(long = "tolerance-mm", global = true)]
    pub tolerance_mm: Option<f64>,
    #[arg(long = "patch-size", global = true)]
    pub patch_size: Option<usize>,
    #[arg(long, global = true)]
    pub strategy: Option<Strategy>,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Write synthetic multi-modality phantoms and their index.
    Synth(SynthArgs),
    /// Resample to isotropic spacing and normalise intensities.
    Preprocess(PreprocessArgs),
    /// Train under a strategy.
    Train(TrainArgs),
    /// Dice and surface Dice of trained models on labelled cases.
    Eval(EvalArgs),
    /// Add categories to a trained model and keep training.
    Finetune(FinetuneArgs),
    /// Segment one volume.
    Predict(PredictArgs),
    /// Controller saliency maps for one volume.
    Saliency(SaliencyArgs),
    /// Pairwise metabolic-correlation comparison between cohorts.
    Analyze(CohortArgs),
    /// Welch test of single-ROI uptake between cohorts.
    OrganTest(OrganArgs),
    /// Embed generated kernels in 2-D.
    VizKernels(VizArgs),
    /// Region volumes and lesion overlap against an atlas.
    VolumeReport(VolumeReportArgs),
    /// Run the built-in invariant checks.
    Selftest,
}

#[derive(Args, Debug)]
pub struct SynthArgs {
    #[arg(long, default_value_t = 4)]
    pub count: usize,
    #[arg(long, default_value_t = 64)]
    pub size: usize,
    #[arg(long, default_value_t = 3)]
    pub categories: usize,
    #[arg(long, value_delimiter = ',', default_value = "CT,MR")]
    pub modalities: Vec<Modality>,
    /// Also paint a lesion category with this name.
    #[arg(long)]
    pub lesion: Option<String>,
}

#[derive(Args, Debug)]
pub struct PreprocessArgs {
    /// A dataset index (or its directory) to process as a whole.
    #[arg(long, conflicts_with = "input")]
    pub cases: Option<PathBuf>,
    /// A single image volume.
    #[arg(long)]
    pub input: Option<PathBuf>,
    #[arg(long)]
    pub labels: Option<PathBuf>,
    #[arg(long)]
    pub modality: Option<Modality>,
    #[arg(long = "spacing-mm", default_value_t = mpum::volume::DEFAULT_SPACING_MM)]
    pub spacing_mm: f64,
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    #[arg(long)]
    pub cases: Option<PathBuf>,
    #[arg(long)]
    pub heldout: Option<PathBuf>,
    #[arg(long)]
    pub steps: Option<usize>,
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub cases: PathBuf,
}

#[derive(Args, Debug)]
pub struct FinetuneArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Cases labelled with the extended category table.
    #[arg(long)]
    pub cases: PathBuf,
    #[arg(long)]
    pub heldout: Option<PathBuf>,
    #[arg(long)]
    pub steps: Option<usize>,
}

#[derive(Args, Debug)]
pub struct PredictArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long)]
    pub modality: Option<Modality>,
}

#[derive(Args, Debug)]
pub struct SaliencyArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long)]
    pub modality: Option<Modality>,
    /// Encoder stage; defaults to the deepest.
    #[arg(long)]
    pub stage: Option<usize>,
    /// Category name; defaults to every category.
    #[arg(long)]
    pub category: Option<String>,
}

#[derive(Args, Debug)]
pub struct CohortArgs {
    /// One table with a `cohort` column holding control and patient rows.
    #[arg(long, conflicts_with_all = ["control", "patient"])]
    pub cohorts: Option<PathBuf>,
    #[arg(long, requires = "patient")]
    pub control: Option<PathBuf>,
    #[arg(long, requires = "control")]
    pub patient: Option<PathBuf>,
    /// JSON map of ROI name to "brain" or "body".
    #[arg(long)]
    pub classes: Option<PathBuf>,
    #[arg(long, value_delimiter = ',')]
    pub exclude: Vec<String>,
    /// Restrict to pair classes (brain-brain, brain-body, body-body).
    #[arg(long = "pair-class", value_delimiter = ',')]
    pub pair_class: Vec<mpum::analytics::PairClass>,
}

#[derive(Args, Debug)]
pub struct OrganArgs {
    #[command(flatten)]
    pub cohorts: CohortArgs,
    /// ROIs to test; defaults to every ROI.
    #[arg(long, value_delimiter = ',')]
    pub roi: Vec<String>,
}

#[derive(Args, Debug)]
pub struct VizArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long, value_delimiter = ',')]
    pub stages: Vec<usize>,
    #[arg(long, value_enum, default_value = "both")]
    pub method: VizMethod,
    #[arg(long, default_value_t = 30.0)]
    pub perplexity: f64,
    #[arg(long, default_value_t = 1000)]
    pub iterations: usize,
}

#[derive(clap::ValueEnum, Clone, Copy, Debug, PartialEq, Eq)]
pub enum VizMethod {
    Pca,
    Tsne,
    Both,
}

#[derive(Args, Debug)]
pub struct VolumeReportArgs {
    #[arg(long)]
    pub lesion: PathBuf,
    #[arg(long)]
    pub atlas: PathBuf,
    /// JSON list naming atlas labels 1, 2, ...
    #[arg(long = "atlas-names")]
    pub atlas_names: Option<PathBuf>,
}

fn exit_code(kind: ErrorKind) -> u8 {
    match kind {
        ErrorKind::Usage => 1,
        ErrorKind::Data => 2,
        ErrorKind::Numerical => 3,
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("MPUM_LOG", "info")).format_timestamp(None).init();
    if let Some(n) = cli.global.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            eprintln!("error: --threads {n}: {e}");
            return ExitCode::from(1);
        }
    }
    match commands::dispatch(&cli.global, &cli.command) {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(e.kind()))
        }
    }
}
