use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};

#[derive(Parser, Debug)]
#[command(name = "difftap", version, about = "Diffusion U-Net feature taps, attention-based image-text matching and analyses")]
pub struct Cli {
    /// Sectioned key = value config file.
    #[arg(long, global = true, value_name = "PATH")]
    pub config: Option<PathBuf>,

    /// Override one config key, e.g. `--set itm.trials=1`. Repeatable.
    #[arg(long = "set", global = true, value_name = "SECTION.KEY=VALUE")]
    pub overrides: Vec<String>,

    /// Print the resolved config and exit.
    #[arg(long, global = true)]
    pub print_config: bool,

    /// Root seed (`run.seed`).
    #[arg(long, global = true)]
    pub seed: Option<u64>,

    /// `cpu`, `cuda` or `cuda:N` (`run.device`).
    #[arg(long, global = true)]
    pub device: Option<String>,

    /// Diffusers-layout model directory (`run.model_dir`).
    #[arg(long, global = true, value_name = "DIR")]
    pub model_dir: Option<PathBuf>,

    /// Feature store root (`run.store_path`).
    #[arg(long, global = true, value_name = "DIR")]
    pub store: Option<PathBuf>,

    /// Directory for artifacts (`run.output_dir`).
    #[arg(long, short = 'o', global = true, value_name = "DIR")]
    pub output_dir: Option<PathBuf>,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Run the backbone on one image and store tapped features.
    Extract(ExtractArgs),
    /// Joint PCA maps over stored features.
    Pca(PcaArgs),
    /// Conditional-minus-unconditional PCA and amplified-guidance sweeps.
    Delta(DeltaArgs),
    /// Block-wise or guidance-curve linear CKA.
    Cka(CkaArgs),
    /// Cross-attention image-text matching on a benchmark.
    ItmEval(ItmArgs),
    /// Caption three evaluation splits and report the leakage index.
    LeakageProbe(LeakageArgs),
    /// Shape, gradient and permutation checks of the fusion operators.
    FuseCheck(FuseArgs),
    /// Inspect the feature store.
    Store {
        #[command(subcommand)]
        action: StoreAction,
    },
    /// Validate benchmark data.
    Datasets {
        #[command(subcommand)]
        action: DatasetsAction,
    },
}

#[derive(Args, Debug, Clone, Default)]
pub struct Selection {
    #[arg(long)]
    pub image_id: Option<String>,
    /// Block address, e.g. `U-L1-R1-B0-Cross-Q`.
    #[arg(long)]
    pub block: Option<String>,
    #[arg(long)]
    pub timestep: Option<usize>,
    /// Stored guidance scale (1 conditional, 0 unconditional).
    #[arg(long)]
    pub scale: Option<f64>,
    /// Prompt text; matched through its hash.
    #[arg(long, conflicts_with = "prompt_hash")]
    pub prompt: Option<String>,
    #[arg(long)]
    pub prompt_hash: Option<String>,
    /// Noise seed of the stored pass.
    #[arg(long)]
    pub record_seed: Option<u64>,
}

#[derive(Args, Debug)]
pub struct ExtractArgs {
    #[arg(long)]
    pub image: PathBuf,
    /// Defaults to the file stem.
    #[arg(long)]
    pub image_id: Option<String>,
    #[arg(long, default_value = "")]
    pub prompt: String,
    /// Comma-separated block addresses (`extraction.taps`).
    #[arg(long, value_delimiter = ',')]
    pub taps: Option<Vec<String>>,
    /// Comma-separated timesteps (`extraction.timesteps`).
    #[arg(long, value_delimiter = ',')]
    pub timesteps: Option<Vec<usize>>,
    #[arg(long)]
    pub trials: Option<usize>,
    #[arg(long)]
    pub guidance_scale: Option<f64>,
    /// Also store cross-attention maps.
    #[arg(long)]
    pub capture_attention: bool,
    /// Replace existing records with the same key.
    #[arg(long)]
    pub overwrite: bool,
}

#[derive(Args, Debug)]
pub struct PcaArgs {
    #[command(flatten)]
    pub selection: Selection,
    #[arg(long, default_value_t = 3)]
    pub components: usize,
}

#[derive(Args, Debug)]
pub struct DeltaArgs {
    #[command(flatten)]
    pub selection: Selection,
    /// Guidance scales of the amplified sweep.
    #[arg(long, value_delimiter = ',', default_value = "0,1,4,7")]
    pub scales: Vec<f64>,
    #[arg(long, default_value_t = 3)]
    pub components: usize,
}

#[derive(ValueEnum, Debug, Clone, Copy, PartialEq, Eq)]
pub enum CkaPooling {
    /// One sample per record: the spatial mean.
    Mean,
    /// One sample per spatial position; needs equal grids.
    Flatten,
}

#[derive(Args, Debug)]
pub struct CkaArgs {
    #[command(flatten)]
    pub selection: Selection,
    /// Blocks to compare pairwise.
    #[arg(long, value_delimiter = ',')]
    pub blocks: Vec<String>,
    /// Guidance-curve mode: CKA of unconditional vs amplified features of
    /// `--block` at these scales.
    #[arg(long, value_delimiter = ',')]
    pub guidance_scales: Option<Vec<f64>>,
    #[arg(long, value_enum, default_value_t = CkaPooling::Mean)]
    pub pooling: CkaPooling,
}

#[derive(Args, Debug)]
pub struct ItmArgs {
    /// `mmvp-vlm` or `winoground`.
    #[arg(long)]
    pub benchmark: String,
    /// Benchmark root (defaults to the `datasets` config entry).
    #[arg(long)]
    pub root: Option<PathBuf>,
    #[arg(long, value_delimiter = ',')]
    pub timesteps: Option<Vec<usize>>,
    #[arg(long)]
    pub trials: Option<usize>,
    /// Sum maps over timesteps before one LSE per trial.
    #[arg(long)]
    pub sum_before_pool: bool,
    /// Parallel backend instances (`run.workers`).
    #[arg(long)]
    pub workers: Option<usize>,
    /// Seeded, category-stratified subset of this many records.
    #[arg(long)]
    pub subset: Option<usize>,
}

#[derive(ValueEnum, Debug, Clone, Copy, PartialEq, Eq)]
pub enum SettingArg {
    Matched,
    Nocap,
    Mismatched,
    All,
}

#[derive(Args, Debug)]
pub struct LeakageArgs {
    /// Caption dataset; only `coco-test` is supported.
    #[arg(long, default_value = "coco-test")]
    pub dataset: String,
    #[arg(long)]
    pub root: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = SettingArg::All)]
    pub setting: SettingArg,
    /// Shell command speaking the JSON-lines captioner protocol.
    #[arg(long)]
    pub captioner_cmd: Option<String>,
    #[arg(long)]
    pub subset: Option<usize>,
}

#[derive(Args, Debug)]
pub struct FuseArgs {}

#[derive(Subcommand, Debug)]
pub enum StoreAction {
    /// List records.
    Ls {
        #[command(flatten)]
        selection: Selection,
        /// Only attention records.
        #[arg(long)]
        attention: bool,
    },
    /// Check every payload against its checksum.
    Verify,
    /// Delete payload files no record references.
    Compact,
}

#[derive(Subcommand, Debug)]
pub enum DatasetsAction {
    /// Ingest a benchmark and report its records.
    Validate {
        /// `mmvp-vlm`, `winoground` or `coco-captions`.
        #[arg(long)]
        benchmark: String,
        #[arg(long)]
        root: Option<PathBuf>,
    },
}
