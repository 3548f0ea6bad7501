//! Command-line driver: `search`, `derive`, `train`, `eval`, `ablate` and
//! `export-dot`.

pub mod commands;
pub mod config;
pub mod manifest;

use std::ffi::OsString;
use std::path::PathBuf;

use cellsearch::genotype::{atrous_free_mask, Genotype};
use cellsearch::{Error, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};

use crate::commands::{create_dir, emit, load_dataset};
use crate::config::{resolve, Precision, RunConfig};
use crate::manifest::Recorder;

#[derive(Debug, Parser)]
#[command(
    name = "cellsearch",
    version,
    about = "Differentiable cell search for small-image classification"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

/// Options shared by every command that runs the pipeline.
#[derive(Debug, Clone, Default, Args)]
pub struct RunOptions {
    /// JSON run configuration; omitted keys keep their defaults.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Override one key, e.g. `--set search.epochs=5`. Repeatable.
    #[arg(long = "set", value_name = "SECTION.KEY=VALUE")]
    pub set: Vec<String>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub out_dir: Option<PathBuf>,
    /// Search without the two atrous operators.
    #[arg(long)]
    pub exclude_atrous: bool,
    #[arg(long)]
    pub num_runs: Option<usize>,
    #[arg(long, value_enum)]
    pub precision: Option<Precision>,
}

impl RunOptions {
    pub fn resolve(&self) -> Result<RunConfig> {
        let mut config = resolve(self.config.as_deref(), &self.set)?;
        if let Some(seed) = self.seed {
            config.seed = seed;
        }
        if let Some(dir) = &self.out_dir {
            config.out_dir = dir.clone();
        }
        if let Some(n) = self.num_runs {
            config.num_runs = n;
        }
        if let Some(p) = self.precision {
            config.precision = p;
        }
        if self.exclude_atrous {
            config.network.operator_mask = atrous_free_mask();
        }
        config.validate()?;
        Ok(config)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum AblateMode {
    /// Swap atrous branches of a genotype for separable ones, then train.
    Replace,
    /// Search again without atrous operators, then train.
    Exclude,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Search a cell; writes best.alphas.json, best.genotype.json, curves.csv.
    Search(RunOptions),
    /// Discretize an alphas file into a genotype.
    Derive {
        alphas: PathBuf,
        #[arg(short, long)]
        output: Option<PathBuf>,
    },
    /// Train the fixed network of a genotype and evaluate it on the held-out part.
    Train {
        genotype: PathBuf,
        #[command(flatten)]
        run: RunOptions,
    },
    /// Evaluate a checkpoint on the held-out part of the configured dataset.
    Eval {
        checkpoint: PathBuf,
        #[command(flatten)]
        run: RunOptions,
    },
    /// Atrous ablations.
    Ablate {
        #[arg(long, value_enum)]
        mode: AblateMode,
        /// Genotype to transform (replace mode only).
        genotype: Option<PathBuf>,
        #[command(flatten)]
        run: RunOptions,
    },
    /// Render a genotype as Graphviz DOT.
    ExportDot {
        genotype: PathBuf,
        #[arg(short, long)]
        output: Option<PathBuf>,
    },
}

macro_rules! dispatch {
    ($precision:expr, $f:ident ( $($arg:expr),* )) => {
        match $precision {
            Precision::F32 => commands::$f::<f32>($($arg),*),
            Precision::F64 => commands::$f::<f64>($($arg),*),
        }
    };
}

fn prepared(run: &RunOptions) -> Result<(RunConfig, cellsearch::data::Dataset)> {
    let mut config = run.resolve()?;
    let dataset = load_dataset(&config)?;
    config.network.num_classes = dataset.num_classes();
    config.network.validate()?;
    create_dir(&config.out_dir)?;
    Ok((config, dataset))
}

pub fn execute(cli: Cli, args: Vec<String>) -> Result<()> {
    match cli.command {
        Command::Search(run) => {
            let mut rec = Recorder::new("search", args);
            let (config, dataset) = prepared(&run)?;
            rec.stage("load");
            dispatch!(config.precision, search_into(&config, &dataset, &config.out_dir))?;
            rec.stage("search");
            rec.finish(&config, &config.out_dir)?;
        }
        Command::Derive { alphas, output } => {
            emit(&commands::derive_file(&alphas)?, output.as_deref(), &alphas)?;
        }
        Command::ExportDot { genotype, output } => {
            emit(&commands::export_dot_file(&genotype)?, output.as_deref(), &genotype)?;
        }
        Command::Train { genotype, run } => {
            let mut rec = Recorder::new("train", args);
            let g = Genotype::load(&genotype)?;
            let (config, dataset) = prepared(&run)?;
            rec.stage("load");
            dispatch!(config.precision, train_into(&config, &dataset, &g, &config.out_dir))?;
            rec.stage("train");
            rec.finish(&config, &config.out_dir)?;
        }
        Command::Eval { checkpoint, run } => {
            let mut rec = Recorder::new("eval", args);
            let config = run.resolve()?;
            create_dir(&config.out_dir)?;
            dispatch!(config.precision, eval_into(&config, &checkpoint, &config.out_dir))?;
            rec.stage("eval");
            rec.finish(&config, &config.out_dir)?;
        }
        Command::Ablate { mode, genotype, run } => {
            let mut rec = Recorder::new(
                match mode {
                    AblateMode::Replace => "ablate replace",
                    AblateMode::Exclude => "ablate exclude",
                },
                args,
            );
            match mode {
                AblateMode::Replace => {
                    let path = genotype
                        .ok_or_else(|| Error::InvalidArgument("ablate --mode replace needs a genotype file".into()))?;
                    let g = Genotype::load(&path)?;
                    let (config, dataset) = prepared(&run)?;
                    rec.stage("load");
                    dispatch!(config.precision, ablate_replace(&config, &dataset, &g, &config.out_dir))?;
                    rec.stage("train");
                    rec.finish(&config, &config.out_dir)?;
                }
                AblateMode::Exclude => {
                    let run = RunOptions {
                        exclude_atrous: true,
                        ..run
                    };
                    let (config, dataset) = prepared(&run)?;
                    rec.stage("load");
                    dispatch!(config.precision, ablate_exclude(&config, &dataset, &config.out_dir))?;
                    rec.stage("search and train");
                    rec.finish(&config, &config.out_dir)?;
                }
            }
        }
    }
    Ok(())
}

/// Parses `args` (program name first), runs the command and returns the
/// process exit code. Failures print one `error:` line to stderr.
pub fn main_with<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let args: Vec<OsString> = args.into_iter().map(Into::into).collect();
    let cli = match Cli::try_parse_from(&args) {
        Ok(cli) => cli,
        Err(e) => {
            if matches!(
                e.kind(),
                clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion
            ) {
                print!("{e}");
                return 0;
            }
            let text = e.to_string();
            let first = text.lines().next().unwrap_or("invalid arguments");
            let first = first.strip_prefix("error: ").unwrap_or(first);
            eprintln!("error: {first}");
            return 2;
        }
    };
    let recorded = args.iter().skip(1).map(|a| a.to_string_lossy().into_owned()).collect();
    match execute(cli, recorded) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {}", e.to_string().replace('\n', " "));
            1
        }
    }
}
