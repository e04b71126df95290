use std::path::PathBuf;
use std::str::FromStr;

use clap::{Args, Parser, Subcommand};
use lmscnet::model::ScaleSelection;
use lmscnet::train::IouAbsent;

#[derive(Debug, Parser)]
#[command(
    name = "lmscnet",
    version,
    about = "Semantic scene completion from sparse voxel grids"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train a model on a dataset manifest.
    Train(TrainArgs),
    /// Score a checkpoint on a dataset at one or more scales.
    Eval(EvalArgs),
    /// Predict a label grid for one occupancy file.
    Infer(InferArgs),
    /// Report parameters, FLOPs and latency per output scale.
    Bench(BenchArgs),
    /// Write a procedural street dataset.
    MakeSynthetic(MakeSyntheticArgs),
    /// Convert a label file to a colored ASCII PLY point set.
    ExportPly(ExportPlyArgs),
}

/// Config-driven commands also accept `--model.KEY`, `--train.KEY` and
/// `--data.manifest` flags; these are split off before parsing.
#[derive(Clone, Debug, Default, Args)]
pub struct TrainArgs {
    /// Flat dotted-key TOML file.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Output directory (key `output`).
    #[arg(long)]
    pub output: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(skip)]
    pub overrides: Vec<(String, String)>,
}

#[derive(Clone, Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub manifest: PathBuf,
    /// Comma-separated output levels, 0 = full resolution.
    #[arg(long, default_value = "0,1,2,3")]
    pub scales: ScaleSelection,
    /// Whether classes absent from prediction and truth count as 0 in mIoU.
    #[arg(long, default_value = "exclude")]
    pub iou_absent: IouAbsent,
    /// Directory for `metrics.txt` and `metrics.json`.
    #[arg(long)]
    pub output: Option<PathBuf>,
}

#[derive(Clone, Debug, Args)]
pub struct InferArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Occupancy bitset matching the model grid.
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long, default_value_t = 0)]
    pub scale: usize,
    #[arg(long)]
    pub output: PathBuf,
    /// Manifest whose label map encodes the output; SemanticKITTI ids
    /// otherwise.
    #[arg(long)]
    pub manifest: Option<PathBuf>,
}

#[derive(Clone, Debug, Default, Args)]
pub struct BenchArgs {
    /// Benchmark a trained model instead of a freshly built one.
    #[arg(long, conflicts_with = "config")]
    pub checkpoint: Option<PathBuf>,
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub scales: Option<ScaleSelection>,
    #[arg(long, default_value_t = lmscnet::train::MIN_REPS)]
    pub reps: usize,
    #[arg(long, default_value_t = lmscnet::train::MIN_WARMUP)]
    pub warmup: usize,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Directory for `bench.json`.
    #[arg(long)]
    pub output: Option<PathBuf>,
    #[arg(skip)]
    pub overrides: Vec<(String, String)>,
}

#[derive(Clone, Debug, Args)]
pub struct MakeSyntheticArgs {
    #[arg(long)]
    pub output: PathBuf,
    #[arg(long, default_value_t = 8)]
    pub count: usize,
    #[arg(long, default_value = "64x64x8")]
    pub dims: Dims,
    #[arg(long, default_value_t = 0.2)]
    pub voxel_size: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Clone, Debug, Args)]
pub struct ExportPlyArgs {
    #[arg(long)]
    pub labels: PathBuf,
    /// Grid of the label file; defaults to the manifest grid.
    #[arg(long)]
    pub dims: Option<Dims>,
    /// Voxel edge in meters; defaults to the manifest's, else 0.2.
    #[arg(long)]
    pub voxel_size: Option<f64>,
    /// Supplies classes, label map and grid origin; SemanticKITTI otherwise.
    #[arg(long)]
    pub manifest: Option<PathBuf>,
    #[arg(long)]
    pub output: PathBuf,
}

/// Grid extents written `NXxNYxNZ`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Dims(pub [usize; 3]);

impl FromStr for Dims {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        let parts: Vec<&str> = s.split('x').collect();
        let bad = || format!("expected NXxNYxNZ, got {s:?}");
        if parts.len() != 3 {
            return Err(bad());
        }
        let mut out = [0; 3];
        for (o, p) in out.iter_mut().zip(parts) {
            *o = p.parse().map_err(|_| bad())?;
        }
        Ok(Dims(out))
    }
}
