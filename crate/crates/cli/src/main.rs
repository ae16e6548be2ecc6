//! `mcdrop`: cluster MC-Dropout samples, report per-instance uncertainty,
//! fit temperature scaling, score cluster detections and generate
//! synthetic scenes.

mod commands;
mod output;
mod svg;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::error::ErrorKind;
use clap::{Args, Parser, Subcommand, ValueEnum};

use mcdrop::clustering::Algorithm;

#[derive(Debug, Parser)]
#[command(name = "mcdrop", version, about = "Epistemic uncertainty from repeated MC-Dropout instance segmentation samples")]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Clone, Args, serde::Serialize)]
pub struct Common {
    /// Root seed; every random stream is derived from it. For `synth`,
    /// overrides the seed in the scene file.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Worker threads for per-image work (default: all cores).
    #[arg(long, global = true)]
    pub jobs: Option<usize>,
    #[arg(long, global = true, default_value = ".")]
    pub out_dir: PathBuf,
    #[arg(long, global = true, value_enum, default_value_t = AlgorithmArg::Bgm)]
    pub algorithm: AlgorithmArg,
    /// Clusters with more members than this are re-split.
    #[arg(long, global = true, default_value_t = 150)]
    pub split_threshold: usize,
    /// Detections with a background score above this are dropped.
    #[arg(long, global = true, default_value_t = 0.45)]
    pub background_threshold: f64,
    /// Mean-mask level at or above which a pixel is in the consensus mask.
    #[arg(long, global = true, default_value_t = 0.5)]
    pub mask_threshold: f64,
    /// Reliability diagram bins.
    #[arg(long, global = true, default_value_t = 10)]
    pub bins: usize,
}

#[derive(Debug, Clone, Copy, ValueEnum, serde::Serialize)]
#[serde(rename_all = "lowercase")]
pub enum AlgorithmArg {
    Bgm,
    Agg,
}

impl From<AlgorithmArg> for Algorithm {
    fn from(a: AlgorithmArg) -> Self {
        match a {
            AlgorithmArg::Bgm => Algorithm::Bgm,
            AlgorithmArg::Agg => Algorithm::Agg,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ModeArg {
    Box,
    Mask,
    Both,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Cluster the detections of one or more sample files.
    Cluster {
        #[arg(required = true)]
        samples: Vec<PathBuf>,
    },
    /// Per-cluster statistics, heatmaps and figures.
    Report {
        #[arg(required = true)]
        samples: Vec<PathBuf>,
        #[arg(long)]
        clusters: PathBuf,
    },
    /// Fit a temperature and compare calibration before and after.
    Calibrate { records: PathBuf },
    /// mAP at IoU 0.5 of cluster detections against ground truth.
    Eval {
        #[arg(required = true)]
        samples: Vec<PathBuf>,
        #[arg(long)]
        clusters: PathBuf,
        #[arg(long)]
        gt: PathBuf,
        #[arg(long, value_enum, default_value_t = ModeArg::Both)]
        mode: ModeArg,
    },
    /// Generate a synthetic scene: samples, ground truth and true labels.
    Synth { spec: PathBuf },
}

const EXIT_USAGE: u8 = 1;
const EXIT_DATA: u8 = 2;

fn check_flags(c: &Common) -> Result<(), String> {
    for (name, v) in [
        ("--background-threshold", c.background_threshold),
        ("--mask-threshold", c.mask_threshold),
    ] {
        if !(0.0..=1.0).contains(&v) {
            return Err(format!("{name} must lie in [0, 1], got {v}"));
        }
    }
    if c.bins == 0 {
        return Err("--bins must be at least 1".into());
    }
    if c.split_threshold == 0 {
        return Err("--split-threshold must be at least 1".into());
    }
    if c.jobs == Some(0) {
        return Err("--jobs must be at least 1".into());
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => ExitCode::SUCCESS,
                _ => ExitCode::from(EXIT_USAGE),
            };
        }
    };
    if let Err(msg) = check_flags(&cli.common) {
        eprintln!("error: {msg}");
        return ExitCode::from(EXIT_USAGE);
    }
    let mut pool = rayon::ThreadPoolBuilder::new();
    if let Some(j) = cli.common.jobs {
        pool = pool.num_threads(j);
    }
    let pool = match pool.build() {
        Ok(p) => p,
        Err(e) => {
            eprintln!("error: {e}");
            return ExitCode::from(EXIT_DATA);
        }
    };
    let c = &cli.common;
    let result = pool.install(|| match &cli.command {
        Command::Cluster { samples } => commands::cluster(c, samples),
        Command::Report { samples, clusters } => commands::report(c, samples, clusters),
        Command::Calibrate { records } => commands::calibrate(c, records),
        Command::Eval {
            samples,
            clusters,
            gt,
            mode,
        } => commands::eval(c, samples, clusters, gt, *mode),
        Command::Synth { spec } => commands::synth(c, spec),
    });
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(EXIT_DATA)
        }
    }
}
