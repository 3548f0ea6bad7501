//! Command implementations, generic over the floating-point precision.

use std::fs;
use std::path::{Path, PathBuf};

use cellsearch::checkpoint::{self, CheckpointMeta};
use cellsearch::data::{load_image_dir, split, Dataset, Loader, NormStats, SplitKind, SplitSpec};
use cellsearch::genotype::{ablate_replace_atrous, derive, derive_params, export_dot, AlphasFile, Genotype};
use cellsearch::metrics::{summarize, write_curves_csv, RunSummary};
use cellsearch::optim::{evaluate, search, train_fixed, EpochRecord, SearchConfig, TrainConfig};
use cellsearch::seed::sub_seed;
use cellsearch::tensor::Real;
use cellsearch::{Error, Result};
use serde::{Deserialize, Serialize};

use crate::config::{DataSource, RunConfig};

pub const BEST_ALPHAS: &str = "best.alphas.json";
pub const BEST_GENOTYPE: &str = "best.genotype.json";
pub const CURVES: &str = "curves.csv";
pub const NORM_STATS: &str = "norm_stats.json";
pub const GENOTYPE: &str = "trained.genotype.json";
pub const CHECKPOINT: &str = "checkpoint.ckpt";
pub const CONFUSION: &str = "cm.csv";
pub const REPORT: &str = "report.json";

fn file_err(path: &Path, e: impl ToString) -> Error {
    Error::File {
        path: path.to_path_buf(),
        message: e.to_string(),
    }
}

pub fn create_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(|e| file_err(path, e))
}

fn write(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| file_err(path, e))
}

fn same_file(a: &Path, b: &Path) -> bool {
    matches!((a.canonicalize(), b.canonicalize()), (Ok(x), Ok(y)) if x == y)
}

pub fn load_dataset(config: &RunConfig) -> Result<Dataset> {
    match &config.data {
        DataSource::Synthetic(spec) => spec.generate(),
        DataSource::Dir(root) => load_image_dir(root),
    }
}

fn split_seed(config: &RunConfig) -> u64 {
    sub_seed(config.seed, "split")
}

/// Seed of run `index`; the first run uses the configured seed itself.
pub fn run_seed(seed: u64, index: usize) -> u64 {
    if index == 0 {
        seed
    } else {
        sub_seed(seed, &format!("run/{index}"))
    }
}

/// Loaders for both parts, normalized with statistics of the first.
fn loaders(train: &Dataset, held_out: &Dataset, size: usize) -> Result<(Loader, Loader, NormStats)> {
    let mut train_loader = Loader::new(train, size, NormStats::default())?;
    let stats = train_loader.compute_stats()?;
    train_loader.stats = stats.clone();
    let held_out = Loader::new(held_out, size, stats.clone())?;
    Ok((train_loader, held_out, stats))
}

fn log_epoch(tag: &str, r: &EpochRecord) {
    let val = match (r.val_loss, r.val_acc) {
        (Some(l), Some(a)) => format!(" val_loss {l:.4} val_acc {a:.4}"),
        _ => String::new(),
    };
    eprintln!(
        "{tag} epoch {:>3}: train_loss {:.4} train_acc {:.4}{val} lr {:.6} ({:.1}s)",
        r.epoch, r.train_loss, r.train_acc, r.lr, r.seconds
    );
}

/// Runs the alternating search and writes coefficients, genotype and curves
/// to `out`. Returns the genotype derived from the best-validation snapshot.
pub fn search_into<T: Real>(config: &RunConfig, dataset: &Dataset, out: &Path) -> Result<Genotype> {
    create_dir(out)?;
    let (train, val) = split(
        dataset,
        SplitSpec {
            kind: SplitKind::SearchHalf,
            seed: split_seed(config),
        },
    )?;
    let (train, val, stats) = loaders(&train, &val, config.network.input_size)?;
    stats.save(&out.join(NORM_STATS))?;
    let snapshots = out.join("alphas");
    create_dir(&snapshots)?;
    let search_config = SearchConfig {
        network: config.network.clone(),
        weights: config.search.clone(),
        arch: config.arch.clone(),
    };
    let outcome = search::<T>(
        &search_config,
        &train,
        &val,
        &dataset.class_names,
        config.seed,
        |record, alphas| {
            log_epoch("search", record);
            AlphasFile::from_params(alphas, config.seed)
                .save(&snapshots.join(format!("epoch_{:03}.alphas.json", record.epoch)))
        },
    )?;
    write_curves_csv(&outcome.records, &out.join(CURVES))?;
    let best = AlphasFile::from_params(&outcome.best, config.seed);
    best.save(&out.join(BEST_ALPHAS))?;
    let genotype = derive_params(&outcome.best)?;
    genotype.save(&out.join(BEST_GENOTYPE))?;
    eprintln!("search: best validation epoch {}", outcome.best_epoch);
    Ok(genotype)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunResult {
    pub run: usize,
    pub seed: u64,
    pub final_train_acc: f64,
    pub oa: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub genotype_has_atrous: bool,
    pub operator_mask: Vec<String>,
    pub train_samples: usize,
    pub test_samples: usize,
    pub runs: Vec<RunResult>,
    pub overall_accuracy: RunSummary,
}

/// Trains `num_runs` fixed networks on the training part and evaluates each
/// on the held-out part.
pub fn train_into<T: Real>(
    config: &RunConfig,
    dataset: &Dataset,
    genotype: &Genotype,
    out: &Path,
) -> Result<TrainReport> {
    create_dir(out)?;
    let (train, test) = split(
        dataset,
        SplitSpec {
            kind: SplitKind::TrainRatio(config.train.train_ratio),
            seed: split_seed(config),
        },
    )?;
    let (train_loader, test_loader, stats) = loaders(&train, &test, config.network.input_size)?;
    stats.save(&out.join(NORM_STATS))?;
    genotype.save(&out.join(GENOTYPE))?;
    let train_config = TrainConfig {
        network: config.network.clone(),
        weights: config.train.weights(),
        augment: config.train.augment,
    };
    let mut runs = Vec::with_capacity(config.num_runs);
    for run in 0..config.num_runs {
        let seed = run_seed(config.seed, run);
        let dir = out.join(format!("run_{run}"));
        create_dir(&dir)?;
        let tag = format!("train run {run}");
        let (mut net, records) = train_fixed::<T>(
            genotype,
            &train_config,
            &train_loader,
            Some(&test_loader),
            &dataset.class_names,
            seed,
            |r| {
                log_epoch(&tag, r);
                Ok(())
            },
        )?;
        write_curves_csv(&records, &dir.join(CURVES))?;
        let meta = CheckpointMeta {
            network: config.network.clone(),
            genotype: genotype.clone(),
            norm: stats.clone(),
            class_names: dataset.class_names.clone(),
        };
        checkpoint::save(&dir.join(CHECKPOINT), &net, &meta)?;
        let eval = evaluate(
            &mut net,
            None,
            &test_loader,
            &dataset.class_names,
            config.train.batch_size,
        )?;
        eval.confusion.write_csv(&dir.join(CONFUSION))?;
        eprintln!("{tag}: OA {:.4}", eval.accuracy);
        runs.push(RunResult {
            run,
            seed,
            final_train_acc: records.last().map_or(0.0, |r| r.train_acc),
            oa: eval.accuracy,
        });
    }
    let summary = summarize(&runs.iter().map(|r| r.oa).collect::<Vec<_>>())?;
    let report = TrainReport {
        genotype_has_atrous: genotype.has_atrous(),
        operator_mask: config
            .network
            .operator_mask
            .names()
            .iter()
            .map(|s| s.to_string())
            .collect(),
        train_samples: train.len(),
        test_samples: test.len(),
        runs,
        overall_accuracy: summary,
    };
    write(&out.join(REPORT), &(serde_json::to_string_pretty(&report)? + "\n"))?;
    println!("OA over {} run(s): {}", report.runs.len(), report.overall_accuracy);
    Ok(report)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub checkpoint: PathBuf,
    pub samples: usize,
    pub overall_accuracy: f64,
}

/// Evaluates a checkpoint on the held-out part of the configured dataset.
pub fn eval_into<T: Real>(config: &RunConfig, checkpoint_path: &Path, out: &Path) -> Result<EvalReport> {
    let (mut net, meta) = checkpoint::load::<T>(checkpoint_path)?;
    let dataset = load_dataset(config)?;
    if dataset.class_names != meta.class_names {
        return Err(Error::Checkpoint(format!(
            "checkpoint classes {:?} do not match dataset classes {:?}",
            meta.class_names, dataset.class_names
        )));
    }
    let (_, test) = split(
        &dataset,
        SplitSpec {
            kind: SplitKind::TrainRatio(config.train.train_ratio),
            seed: split_seed(config),
        },
    )?;
    let loader = Loader::new(&test, meta.network.input_size, meta.norm.clone())?;
    create_dir(out)?;
    let eval = evaluate(&mut net, None, &loader, &dataset.class_names, config.train.batch_size)?;
    eval.confusion.write_csv(&out.join(CONFUSION))?;
    let report = EvalReport {
        checkpoint: checkpoint_path.to_path_buf(),
        samples: loader.len(),
        overall_accuracy: eval.accuracy,
    };
    write(&out.join(REPORT), &(serde_json::to_string_pretty(&report)? + "\n"))?;
    println!("OA: {:.4} on {} samples", eval.accuracy, loader.len());
    Ok(report)
}

/// Replace-mode ablation: swap atrous branches for separable ones, then train.
pub fn ablate_replace<T: Real>(
    config: &RunConfig,
    dataset: &Dataset,
    genotype: &Genotype,
    out: &Path,
) -> Result<TrainReport> {
    train_into::<T>(config, dataset, &ablate_replace_atrous(genotype), out)
}

/// Exclude-mode ablation: search without atrous operators, then train the
/// derived genotype. `config` must already carry the reduced mask.
pub fn ablate_exclude<T: Real>(config: &RunConfig, dataset: &Dataset, out: &Path) -> Result<TrainReport> {
    let genotype = search_into::<T>(config, dataset, &out.join("search"))?;
    train_into::<T>(config, dataset, &genotype, &out.join("train"))
}

pub fn derive_file(alphas: &Path) -> Result<String> {
    Ok(derive(&AlphasFile::load(alphas)?)?.to_json())
}

pub fn export_dot_file(genotype: &Path) -> Result<String> {
    Ok(export_dot(&Genotype::load(genotype)?))
}

/// Writes `text` to `output`, or to stdout when no path is given. Refuses to
/// overwrite `input`.
pub fn emit(text: &str, output: Option<&Path>, input: &Path) -> Result<()> {
    match output {
        Some(path) => {
            if same_file(path, input) {
                return Err(Error::InvalidArgument(format!(
                    "output {} would overwrite the input",
                    path.display()
                )));
            }
            if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
                create_dir(parent)?;
            }
            write(path, text)
        }
        None => {
            print!("{text}");
            Ok(())
        }
    }
}
