//! Command-line surface and `--config` expansion.

use clap::{Args, Parser, Subcommand, ValueEnum};
use matchflow_core::io::parse_kv;
use std::fmt;
use std::path::PathBuf;
use std::str::FromStr;

#[derive(Parser, Debug)]
#[command(name = "matchflow", version, about = "Matching-pretrained optical flow at desk scale", args_override_self = true)]
pub struct Cli {
    /// Worker threads for batch and validation parallelism (0: one per core).
    #[arg(long, global = true, default_value_t = 0, value_name = "N")]
    pub threads: usize,
    /// key=value file whose entries are read as flags of the subcommand; flags given on the command line win.
    #[arg(long, global = true, value_name = "FILE")]
    pub config: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

pub const SUBCOMMANDS: [&str; 8] = ["pretrain", "finetune", "compare", "infer", "eval", "viz-corr", "gen-data", "selftest"];

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Stage 1: matching pretraining of the feature extractor on synthetic static scenes.
    #[command(args_override_self = true)]
    Pretrain(TrainArgs),
    /// Stage 2: flow training on synthetic layered scenes.
    #[command(args_override_self = true)]
    Finetune(FinetuneArgs),
    /// Pretrained versus from-scratch flow training over several seeds.
    #[command(args_override_self = true)]
    Compare(CompareArgs),
    /// Flow between two P5/P6 images.
    #[command(args_override_self = true)]
    Infer(InferArgs),
    /// Metrics of a predicted .flo against ground truth.
    #[command(args_override_self = true)]
    Eval(EvalArgs),
    /// Mean 11x11 softmax-normalized correlation window around ground-truth targets.
    #[command(args_override_self = true)]
    VizCorr(VizArgs),
    /// Synthetic image pairs with .flo ground truth and occlusion masks.
    #[command(args_override_self = true)]
    GenData(GenArgs),
    /// Gradient checks and oracle equivalences.
    Selftest,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Preset {
    Desk,
    Tiny,
}

/// `HxW` in pixels.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Size(pub usize, pub usize);

impl FromStr for Size {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        let (h, w) = s.split_once(['x', 'X']).ok_or_else(|| format!("`{s}` is not of the form HxW"))?;
        let dim = |d: &str| d.trim().parse::<usize>().ok().filter(|&v| v > 0).ok_or_else(|| format!("bad dimension `{d}` in `{s}`"));
        Ok(Size(dim(h)?, dim(w)?))
    }
}

impl fmt::Display for Size {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}x{}", self.0, self.1)
    }
}

#[derive(Args, Debug, Clone)]
pub struct TrainArgs {
    /// Architecture preset.
    #[arg(long, value_enum)]
    pub model: Option<Preset>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Optimizer steps (stage default when omitted).
    #[arg(long)]
    pub steps: Option<usize>,
    /// Peak learning rate of the one-cycle schedule.
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub batch: Option<usize>,
    /// Validate every N steps (0 disables periodic validation).
    #[arg(long)]
    pub val_every: Option<usize>,
    /// Held-out pairs per validation.
    #[arg(long)]
    pub val_pairs: Option<usize>,
    #[arg(long)]
    pub checkpoint_every: Option<usize>,
    #[arg(long, value_name = "DIR")]
    pub checkpoint_dir: Option<PathBuf>,
    /// Output weights container.
    #[arg(long, value_name = "FILE")]
    pub out: PathBuf,
    /// JSON-lines training log.
    #[arg(long, value_name = "FILE")]
    pub log: Option<PathBuf>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Motion {
    /// Background translation plus one independently moving square.
    Random,
    /// Background translation only.
    Uniform,
}

#[derive(Args, Debug)]
pub struct FinetuneArgs {
    #[command(flatten)]
    pub train: TrainArgs,
    /// Weights to start from; parameters missing from the file keep their seeded initialization.
    #[arg(long, value_name = "FILE")]
    pub init: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = Motion::Random)]
    pub motion: Motion,
    /// Refinement iterations per training sample.
    #[arg(long)]
    pub train_iters: Option<usize>,
}

#[derive(Args, Debug)]
pub struct CompareArgs {
    #[arg(long, value_enum, default_value_t = Preset::Desk)]
    pub model: Preset,
    /// Comma-separated seeds (at least 3).
    #[arg(long, value_delimiter = ',', default_value = "0,1,2,3,4")]
    pub seeds: Vec<u64>,
    #[arg(long)]
    pub pretrain_steps: Option<usize>,
    #[arg(long)]
    pub finetune_steps: Option<usize>,
    /// Coarse AEPE that counts as converged.
    #[arg(long, default_value_t = 0.5)]
    pub threshold: f64,
    /// key=value report file.
    #[arg(long, value_name = "FILE")]
    pub report: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct InferArgs {
    pub image1: PathBuf,
    pub image2: PathBuf,
    #[arg(long, value_name = "FILE")]
    pub weights: PathBuf,
    /// Output .flo file.
    #[arg(long, value_name = "FILE")]
    pub out: PathBuf,
    /// Color-coded flow (.png, otherwise PPM).
    #[arg(long, value_name = "FILE")]
    pub color: Option<PathBuf>,
    /// Tile inputs larger than the training size (default).
    #[arg(long, overrides_with = "no_tile")]
    pub tile: bool,
    /// Resize to multiples of 32 and infer in a single pass.
    #[arg(long, overrides_with = "tile")]
    pub no_tile: bool,
    #[arg(long, default_value = "64x96", value_name = "HxW")]
    pub train_size: Size,
    /// Standard deviation of the patch center weighting.
    #[arg(long, default_value_t = matchflow_core::tile::SIGMA)]
    pub sigma: f64,
    /// Refinement iterations.
    #[arg(long, default_value_t = 12, value_parser = clap::value_parser!(u32).range(1..))]
    pub iters: u32,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Fl {
    And,
    Or,
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    #[arg(long, value_name = "FILE")]
    pub pred: PathBuf,
    #[arg(long, value_name = "FILE")]
    pub gt: PathBuf,
    /// P5/P6 occlusion mask (white = occluded) enabling the region table.
    #[arg(long, value_name = "FILE")]
    pub occ: Option<PathBuf>,
    /// Outlier rule reported as `fl_all`.
    #[arg(long, value_enum, default_value_t = Fl::And)]
    pub fl: Fl,
}

#[derive(Args, Debug)]
pub struct VizArgs {
    /// Weights; a seeded initialization when omitted.
    #[arg(long, value_name = "FILE")]
    pub weights: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = Preset::Desk)]
    pub model: Preset,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// First image; identical synthetic frames when omitted.
    #[arg(long, requires = "image2")]
    pub image1: Option<PathBuf>,
    #[arg(long, requires = "image1")]
    pub image2: Option<PathBuf>,
    /// Ground-truth .flo for the image pair (zero flow when omitted).
    #[arg(long, value_name = "FILE")]
    pub gt: Option<PathBuf>,
    /// Size of the synthetic frames.
    #[arg(long, default_value = "64x96", value_name = "HxW")]
    pub size: Size,
    /// Heatmap image (.png, otherwise PPM).
    #[arg(long, value_name = "FILE")]
    pub out: Option<PathBuf>,
    /// Heatmap pixels per window cell.
    #[arg(long, default_value_t = 16)]
    pub cell: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Kind {
    /// Static scene under a random translation.
    Static,
    /// Translating background with one moving square.
    Flow,
}

#[derive(Args, Debug)]
pub struct GenArgs {
    #[arg(long, value_name = "DIR")]
    pub out: PathBuf,
    #[arg(long, value_enum, default_value_t = Kind::Flow)]
    pub kind: Kind,
    #[arg(long, default_value_t = 4)]
    pub count: u64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value = "64x96", value_name = "HxW")]
    pub size: Size,
    /// Largest motion component in pixels.
    #[arg(long, default_value_t = 8.0)]
    pub max_motion: f64,
}

const GLOBAL_KEYS: [&str; 1] = ["threads"];

fn config_path(argv: &[String]) -> Result<Option<String>, String> {
    for (i, a) in argv.iter().enumerate() {
        if a == "--" {
            break;
        }
        if a == "--config" {
            return argv.get(i + 1).cloned().map(Some).ok_or_else(|| "--config needs a file".to_string());
        }
        if let Some(p) = a.strip_prefix("--config=") {
            return Ok(Some(p.to_string()));
        }
    }
    Ok(None)
}

/// Turns config entries into flags placed right after the subcommand, ahead
/// of the user's own flags; global options go first. `key=true` becomes `--key`, `key=false`
/// becomes `--no-key`.
pub fn expand_config(argv: Vec<String>) -> Result<Vec<String>, String> {
    let Some(path) = config_path(&argv)? else { return Ok(argv) };
    let text = std::fs::read_to_string(&path).map_err(|e| format!("cannot read config {path}: {e}"))?;
    let entries = parse_kv(&text).map_err(|e| format!("{path}: {e}"))?;
    let Some(at) = argv.iter().skip(1).position(|a| SUBCOMMANDS.contains(&a.as_str())).map(|i| i + 2) else {
        return Ok(argv);
    };
    let (mut global, mut flags) = (Vec::new(), Vec::new());
    for (k, v) in entries {
        if k == "config" {
            return Err(format!("{path}: config files cannot include other config files"));
        }
        let dst = if GLOBAL_KEYS.contains(&k.as_str()) { &mut global } else { &mut flags };
        match v.as_str() {
            "true" => dst.push(format!("--{k}")),
            "false" => dst.push(format!("--no-{k}")),
            _ => {
                dst.push(format!("--{k}"));
                dst.push(v);
            }
        }
    }
    let mut out = vec![argv[0].clone()];
    out.extend(global);
    out.extend_from_slice(&argv[1..at]);
    out.extend(flags);
    out.extend_from_slice(&argv[at..]);
    Ok(out)
}
