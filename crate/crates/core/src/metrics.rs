//! Confusion matrices, overall accuracy and multi-run summaries.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::optim::EpochRecord;

/// Raw counts, `counts[true][predicted]`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    pub class_names: Vec<String>,
    pub counts: Vec<Vec<u64>>,
}

impl ConfusionMatrix {
    pub fn new(class_names: Vec<String>) -> Self {
        let k = class_names.len();
        ConfusionMatrix {
            class_names,
            counts: vec![vec![0; k]; k],
        }
    }

    pub fn num_classes(&self) -> usize {
        self.class_names.len()
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().flatten().sum()
    }

    pub fn trace(&self) -> u64 {
        (0..self.num_classes()).map(|i| self.counts[i][i]).sum()
    }

    pub fn row_sums(&self) -> Vec<u64> {
        self.counts.iter().map(|r| r.iter().sum()).collect()
    }

    pub fn accumulate(&mut self, truth: &[usize], predicted: &[usize]) -> Result<()> {
        if truth.len() != predicted.len() {
            return Err(Error::InvalidArgument(format!(
                "{} true labels but {} predictions",
                truth.len(),
                predicted.len()
            )));
        }
        let k = self.num_classes();
        if let Some(&bad) = truth.iter().chain(predicted).find(|&&l| l >= k) {
            return Err(Error::InvalidArgument(format!("label {bad} outside [0, {k})")));
        }
        for (&t, &p) in truth.iter().zip(predicted) {
            self.counts[t][p] += 1;
        }
        Ok(())
    }

    /// Adds another matrix over the same classes.
    pub fn merge(&mut self, other: &ConfusionMatrix) -> Result<()> {
        if other.class_names != self.class_names {
            return Err(Error::InvalidArgument(
                "cannot merge matrices over different classes".into(),
            ));
        }
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            for (x, y) in a.iter_mut().zip(b) {
                *x += y;
            }
        }
        Ok(())
    }

    /// Row-normalized view for presentation; empty rows stay zero.
    pub fn row_normalized(&self) -> Vec<Vec<f64>> {
        self.counts
            .iter()
            .map(|row| {
                let s: u64 = row.iter().sum();
                row.iter()
                    .map(|&c| if s == 0 { 0.0 } else { c as f64 / s as f64 })
                    .collect()
            })
            .collect()
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path).map_err(|e| Error::file(path, e))?;
        let mut header = vec![String::new()];
        header.extend(self.class_names.iter().cloned());
        w.write_record(&header)?;
        for (name, row) in self.class_names.iter().zip(&self.counts) {
            let mut rec = vec![name.clone()];
            rec.extend(row.iter().map(|c| c.to_string()));
            w.write_record(&rec)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_csv(path: &Path) -> Result<Self> {
        let mut r = csv::ReaderBuilder::new()
            .has_headers(true)
            .from_path(path)
            .map_err(|e| Error::file(path, e))?;
        let header = r.headers()?.clone();
        let class_names: Vec<String> = header.iter().skip(1).map(String::from).collect();
        let k = class_names.len();
        let mut counts = Vec::with_capacity(k);
        for (i, rec) in r.records().enumerate() {
            let rec = rec?;
            if rec.len() != k + 1 || rec.get(0) != Some(class_names.get(i).map_or("", String::as_str)) {
                return Err(Error::file(path, format!("malformed confusion-matrix row {}", i + 1)));
            }
            let row = rec
                .iter()
                .skip(1)
                .map(|v| {
                    v.parse::<u64>()
                        .map_err(|e| Error::file(path, format!("row {}: {e}", i + 1)))
                })
                .collect::<Result<Vec<_>>>()?;
            counts.push(row);
        }
        if counts.len() != k {
            return Err(Error::file(path, format!("{} rows for {k} classes", counts.len())));
        }
        Ok(ConfusionMatrix { class_names, counts })
    }
}

/// `trace / total`.
pub fn overall_accuracy(cm: &ConfusionMatrix) -> Result<f64> {
    let total = cm.total();
    if total == 0 {
        return Err(Error::InvalidArgument(
            "overall accuracy of an empty confusion matrix".into(),
        ));
    }
    Ok(cm.trace() as f64 / total as f64)
}

/// Mean and sample standard deviation over repeated runs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub values: Vec<f64>,
    pub mean: f64,
    pub std: f64,
}

impl std::fmt::Display for RunSummary {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{:.3} ± {:.3}", 100.0 * self.mean, 100.0 * self.std)
    }
}

/// Sample (n - 1) standard deviation, defined as 0 for a single run.
pub fn summarize(values: &[f64]) -> Result<RunSummary> {
    if values.is_empty() {
        return Err(Error::InvalidArgument("cannot summarize zero runs".into()));
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let std = if values.len() == 1 {
        0.0
    } else {
        (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
    };
    Ok(RunSummary {
        values: values.to_vec(),
        mean,
        std,
    })
}

pub const CURVES_HEADER: [&str; 7] = [
    "epoch",
    "train_loss",
    "train_acc",
    "val_loss",
    "val_acc",
    "lr",
    "seconds",
];

/// One row per epoch; missing validation values are left empty.
pub fn write_curves_csv(records: &[EpochRecord], path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::file(path, e))?;
    w.write_record(CURVES_HEADER)?;
    let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
    for r in records {
        w.write_record([
            r.epoch.to_string(),
            r.train_loss.to_string(),
            r.train_acc.to_string(),
            opt(r.val_loss),
            opt(r.val_acc),
            r.lr.to_string(),
            format!("{:.3}", r.seconds),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// Writes `contents` to a sibling temporary file and renames it into place.
pub fn write_atomic(path: &Path, contents: &[u8]) -> Result<()> {
    let file_name = path
        .file_name()
        .ok_or_else(|| Error::file(path, "not a file path"))?
        .to_string_lossy();
    let tmp = path.with_file_name(format!(".{file_name}.tmp"));
    fs::write(&tmp, contents).map_err(|e| Error::file(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::file(path, e))
}
