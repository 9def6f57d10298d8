use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};
use seven_core::arch::Preset;
use seven_core::data::SplitTag;
use seven_core::train::Variant;

/// Train and evaluate semi-supervised twin verification networks.
#[derive(Debug, Parser)]
#[command(name = "seven", version)]
pub struct Cli {
    /// JSON run configuration.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,

    /// Overrides the configured seed.
    #[arg(long, global = true)]
    pub seed: Option<u64>,

    /// Output directory; overrides the configured one.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,

    /// Worker threads for sweeps and evaluation.
    #[arg(long, global = true)]
    pub threads: Option<usize>,

    /// Root that relative data paths in a config are joined onto.
    #[arg(long, global = true, env = "SEVEN_DATA_DIR")]
    pub data_dir: Option<PathBuf>,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Convert raw images into a sample archive plus a summary.
    Ingest(IngestArgs),
    /// Pair every sample with one positive and one negative partner.
    MakePairs(MakePairsArgs),
    /// Train on the configured data and write a run directory.
    Train(TrainArgs),
    /// Score a checkpoint on a labeled pair manifest.
    Eval(EvalArgs),
    /// Train several variants on shared pairs and tabulate accuracy.
    Ablate(AblateArgs),
    /// Accuracy as a function of the reconstruction weight.
    SweepAlpha(SweepAlphaArgs),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum SourceFormat {
    Idx,
    Images,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum SplitArg {
    Train,
    Test,
}

impl From<SplitArg> for SplitTag {
    fn from(s: SplitArg) -> Self {
        match s {
            SplitArg::Train => SplitTag::Train,
            SplitArg::Test => SplitTag::Test,
        }
    }
}

#[derive(Debug, Args)]
pub struct IngestArgs {
    #[arg(long, value_enum)]
    pub format: SourceFormat,
    /// IDX image file.
    #[arg(long, required_if_eq("format", "idx"))]
    pub images: Option<PathBuf>,
    /// IDX label file.
    #[arg(long, required_if_eq("format", "idx"))]
    pub labels: Option<PathBuf>,
    /// Directory of `<class>/<image>` files.
    #[arg(long, required_if_eq("format", "images"))]
    pub dir: Option<PathBuf>,
    /// Target size as HEIGHTxWIDTH.
    #[arg(long, value_parser = parse_size, default_value = "100x100")]
    pub size: (usize, usize),
    #[arg(long, value_enum, default_value = "train")]
    pub split: SplitArg,
}

#[derive(Debug, Args)]
pub struct MakePairsArgs {
    /// Sample archive written by `ingest`.
    #[arg(long)]
    pub samples: PathBuf,
    /// Keep labels on this many pairs.
    #[arg(long)]
    pub label_budget: Option<usize>,
    /// Draw labeled pairs uniformly instead of balancing pos and neg.
    #[arg(long)]
    pub strict_uniform: bool,
    /// Fail unless these samples share no class with `--samples`.
    #[arg(long)]
    pub disjoint_from: Option<PathBuf>,
    /// Manifest file name inside the output directory.
    #[arg(long, default_value = "pairs.txt")]
    pub name: String,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub variant: Option<Variant>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub alpha: Option<f64>,
    #[arg(long)]
    pub label_budget: Option<usize>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Labeled pair manifest; defaults to the configured test pairs.
    #[arg(long, requires = "samples")]
    pub pairs: Option<PathBuf>,
    /// Sample archive the manifest indexes.
    #[arg(long, requires = "pairs")]
    pub samples: Option<PathBuf>,
    /// Decision threshold; defaults to the checkpoint's.
    #[arg(long)]
    pub tau: Option<f64>,
    /// Also report accuracy on an evenly spaced grid LO:HI:N.
    #[arg(long, value_parser = parse_grid)]
    pub tau_sweep: Option<(f64, f64, usize)>,
    /// Reject checkpoints built for another preset.
    #[arg(long)]
    pub preset: Option<Preset>,
}

#[derive(Debug, Args)]
pub struct AblateArgs {
    #[arg(long, value_delimiter = ',', default_value = "seven,disseven,genseven")]
    pub variants: Vec<Variant>,
    /// Seeds averaged per variant; defaults to the configured seed.
    #[arg(long, value_delimiter = ',')]
    pub seeds: Vec<u64>,
    #[arg(long)]
    pub label_budget: Option<usize>,
}

#[derive(Debug, Args)]
pub struct SweepAlphaArgs {
    #[arg(long, value_delimiter = ',', required = true)]
    pub alphas: Vec<f64>,
    /// One curve per budget; defaults to the configured budget.
    #[arg(long, value_delimiter = ',')]
    pub label_budgets: Vec<usize>,
    /// Score on the test pairs instead of a held-out validation split.
    #[arg(long)]
    pub on_test: bool,
}

fn parse_size(s: &str) -> Result<(usize, usize), String> {
    let (h, w) = s
        .split_once(['x', 'X'])
        .ok_or_else(|| format!("expected HEIGHTxWIDTH, got {s:?}"))?;
    let h: usize = h.trim().parse().map_err(|e| format!("height: {e}"))?;
    let w: usize = w.trim().parse().map_err(|e| format!("width: {e}"))?;
    if h == 0 || w == 0 {
        return Err("size must be positive".into());
    }
    Ok((h, w))
}

fn parse_grid(s: &str) -> Result<(f64, f64, usize), String> {
    let parts: Vec<&str> = s.split(':').collect();
    let [lo, hi, n] = parts.as_slice() else {
        return Err(format!("expected LO:HI:N, got {s:?}"));
    };
    let lo: f64 = lo.parse().map_err(|e| format!("lo: {e}"))?;
    let hi: f64 = hi.parse().map_err(|e| format!("hi: {e}"))?;
    let n: usize = n.parse().map_err(|e| format!("n: {e}"))?;
    Ok((lo, hi, n))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn size_and_grid_parse() {
        assert_eq!(parse_size("28x28"), Ok((28, 28)));
        assert_eq!(parse_size("64X48"), Ok((64, 48)));
        assert!(parse_size("0x5").is_err());
        assert!(parse_size("28").is_err());
        assert_eq!(parse_grid("0.05:0.95:19"), Ok((0.05, 0.95, 19)));
        assert!(parse_grid("0.05:0.95").is_err());
    }

    #[test]
    fn clap_definition_is_consistent() {
        use clap::CommandFactory;
        Cli::command().debug_assert();
    }

    #[test]
    fn lists_split_on_commas() {
        let cli = Cli::try_parse_from(["seven", "ablate", "--variants", "seven,disseven", "--seeds", "1,2,3"]).unwrap();
        let Command::Ablate(a) = cli.command else { panic!() };
        assert_eq!(a.variants, vec![Variant::Seven, Variant::DisSeven]);
        assert_eq!(a.seeds, vec![1, 2, 3]);
    }
}
