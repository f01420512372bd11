use std::ops::RangeInclusive;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};
use serde::Serialize;

#[derive(Parser, Debug)]
#[command(name = "stegozoo", version, about = "LSB payload attacks on model zoos and their detection")]
pub struct Cli {
    /// Workspace root; relative paths are resolved against it.
    #[arg(long, global = true, env = "STEGOZOO_HOME", default_value = ".")]
    pub home: PathBuf,

    /// Treat a missing --seed as an error instead of using the default.
    #[arg(long, global = true)]
    pub strict: bool,

    /// Maximum worker threads.
    #[arg(long, global = true)]
    pub jobs: Option<usize>,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Model zoo generation.
    #[command(subcommand)]
    Zoo(ZooCommand),
    /// Embed a payload into every model of a zoo.
    Attack(AttackArgs),
    /// Read the X least significant bits back out of one model.
    Extract(ExtractArgs),
    /// Build per-severity feature datasets.
    Features(FeaturesArgs),
    /// Train or evaluate detectors.
    #[command(subcommand)]
    Detect(DetectCommand),
    /// Print or compare evaluation reports.
    Report(ReportArgs),
    /// Print bit-level views of a model's weights.
    Inspect(InspectArgs),
}

#[derive(Subcommand, Debug)]
pub enum ZooCommand {
    /// Train a zoo of benign models.
    Gen(ZooGenArgs),
}

#[derive(Subcommand, Debug)]
pub enum DetectCommand {
    /// Fit one detector on the training split of one severity.
    Train(DetectTrainArgs),
    /// Run the evaluation protocol over every severity.
    Eval(DetectEvalArgs),
}

#[derive(Args, Debug, Serialize)]
pub struct ZooGenArgs {
    /// Layer widths, optionally with activations: `2-8-8-2` or `2-8-2:relu,softmax`.
    #[arg(long, default_value = "2-8-8-2")]
    pub arch: String,
    #[arg(long, default_value_t = 200)]
    pub count: usize,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long, default_value = "zoo")]
    pub out: PathBuf,
    /// Zoo id used in model ids; defaults to the output directory name.
    #[arg(long)]
    pub id: Option<String>,
    #[arg(long)]
    pub epochs: Option<usize>,
    /// Per-model init noise as a fraction of the fan-in bound.
    #[arg(long)]
    pub init_jitter: Option<f64>,
}

#[derive(Args, Debug, Serialize)]
pub struct AttackArgs {
    #[arg(long, default_value = "zoo")]
    pub zoo: PathBuf,
    /// Number of least significant bits to overwrite.
    #[arg(long, value_parser = clap::value_parser!(u32).range(1..=23), required_unless_present = "sweep", conflicts_with = "sweep")]
    pub x: Option<u32>,
    /// Range of severities, e.g. `1..23`.
    #[arg(long, value_parser = parse_sweep)]
    #[serde(serialize_with = "ser_range")]
    pub sweep: Option<RangeInclusive<u32>>,
    /// Raw payload file.
    #[arg(long, required_unless_present = "payload_seed", conflicts_with = "payload_seed")]
    pub payload: Option<PathBuf>,
    /// Generate a pseudorandom payload from this seed.
    #[arg(long)]
    pub payload_seed: Option<u64>,
    /// Size of a generated payload.
    #[arg(long, default_value_t = 1024)]
    pub payload_bytes: usize,
}

#[derive(Args, Debug, Serialize)]
pub struct ExtractArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long, value_parser = clap::value_parser!(u32).range(1..=23))]
    pub x: u32,
    /// Bits to read; defaults to the full capacity `n_W·X`.
    #[arg(long)]
    pub bits: Option<usize>,
    /// Write the bytes here instead of printing hex.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug, Serialize)]
pub struct FeaturesArgs {
    #[arg(long, default_value = "zoo")]
    pub zoo: PathBuf,
    /// loss, grads or weights.
    #[arg(long)]
    pub kind: String,
    /// Split and autoencoder seed (loss features only).
    #[arg(long)]
    pub seed: Option<u64>,
    /// Defaults to `<zoo>/features/<kind>`.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Autoencoder training epochs.
    #[arg(long)]
    pub ae_epochs: Option<usize>,
    /// Gradient target for the grads feature: zero or uniform.
    #[arg(long, default_value = "zero")]
    pub grad_target: String,
}

#[derive(Args, Debug, Serialize)]
pub struct DetectTrainArgs {
    /// Feature directory from `features`.
    #[arg(long)]
    pub features: PathBuf,
    #[arg(long, value_parser = clap::value_parser!(u32).range(1..=23))]
    pub x: u32,
    /// mean+eps, rf, gb or hgb.
    #[arg(long)]
    pub method: String,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Detector checkpoint path; defaults to `<features>/detectors/<method>-x<X>.sdk`.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug, Serialize)]
pub struct DetectEvalArgs {
    #[arg(long)]
    pub features: PathBuf,
    #[arg(long)]
    pub method: String,
    /// One or more seeds; each adds a full sweep of rows.
    #[arg(long, num_args = 1.., value_delimiter = ',')]
    pub seed: Vec<u64>,
    /// Severities to evaluate; defaults to 1..23.
    #[arg(long, value_parser = parse_sweep)]
    #[serde(serialize_with = "ser_range")]
    pub levels: Option<RangeInclusive<u32>>,
    /// Output directory; defaults to `<features>/eval/<method>`.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug, Serialize)]
pub struct ReportArgs {
    #[arg(required = true)]
    pub reports: Vec<PathBuf>,
    /// Pivot mean F1 by severity with one column per feature/method pair.
    #[arg(long)]
    pub compare: bool,
    /// Also write the joined rows as one CSV.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug, Serialize)]
pub struct InspectArgs {
    #[arg(long)]
    pub model: PathBuf,
    /// Only show this tensor.
    #[arg(long)]
    pub tensor: Option<String>,
    /// Maximum weights to print.
    #[arg(long, default_value_t = 16)]
    pub limit: usize,
    /// Mark the X-LSB region in the mantissa.
    #[arg(long, value_parser = clap::value_parser!(u32).range(1..=23))]
    pub x: Option<u32>,
    /// Compare against a second model, printing changed bits.
    #[arg(long)]
    pub against: Option<PathBuf>,
}

pub fn parse_sweep(s: &str) -> Result<RangeInclusive<u32>, String> {
    let (a, b) = match s.split_once("..") {
        Some((a, b)) => (a, b.strip_prefix('=').unwrap_or(b)),
        None => (s, s),
    };
    let lo: u32 = a.trim().parse().map_err(|_| format!("bad range start {a:?}"))?;
    let hi: u32 = b.trim().parse().map_err(|_| format!("bad range end {b:?}"))?;
    if lo < 1 || hi > 23 || lo > hi {
        return Err(format!("severity range {lo}..{hi} must satisfy 1 <= start <= end <= 23"));
    }
    Ok(lo..=hi)
}

fn ser_range<S: serde::Serializer>(r: &Option<RangeInclusive<u32>>, s: S) -> Result<S::Ok, S::Error> {
    match r {
        Some(r) => s.serialize_some(&format!("{}..{}", r.start(), r.end())),
        None => s.serialize_none(),
    }
}
