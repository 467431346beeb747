//! Accuracy reports: per-class and class-mean accuracy of one run, and
//! mean ± standard deviation over several runs.

use std::fmt;
use std::str::FromStr;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::classifier::ClassifierState;
use crate::data::DomainDataset;
use crate::error::{Error, Result};

/// Rows are true classes, columns predicted classes.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConfusionMatrix(pub Array2<u64>);

impl ConfusionMatrix {
    pub fn new(num_classes: usize) -> Self {
        ConfusionMatrix(Array2::zeros((num_classes, num_classes)))
    }

    pub fn record(&mut self, truth: usize, predicted: usize) {
        self.0[[truth, predicted]] += 1;
    }

    pub fn total(&self) -> u64 {
        self.0.sum()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassAccuracy {
    pub class_name: String,
    /// Percentage in `[0, 100]`.
    pub accuracy: f64,
    pub correct: u64,
    pub total: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    /// In dataset class order.
    pub per_class_accuracy: Vec<ClassAccuracy>,
    /// Unweighted mean over classes.
    pub mean_accuracy: f64,
    /// Correct predictions over all samples.
    pub overall_accuracy: f64,
    pub n_samples: u64,
    pub run_seed: u64,
}

impl MetricsReport {
    pub fn from_confusion(class_names: &[String], conf: &ConfusionMatrix, run_seed: u64) -> Result<Self> {
        let k = class_names.len();
        if conf.0.dim() != (k, k) {
            return Err(Error::Validation(format!(
                "confusion matrix is {:?} but there are {k} classes",
                conf.0.dim()
            )));
        }
        let mut per_class = Vec::with_capacity(k);
        for (i, name) in class_names.iter().enumerate() {
            let total: u64 = conf.0.row(i).sum();
            if total == 0 {
                return Err(Error::Validation(format!("class `{name}` has no evaluation samples")));
            }
            let correct = conf.0[[i, i]];
            per_class.push(ClassAccuracy {
                class_name: name.clone(),
                accuracy: 100.0 * correct as f64 / total as f64,
                correct,
                total,
            });
        }
        let n = conf.total();
        let correct: u64 = (0..k).map(|i| conf.0[[i, i]]).sum();
        Ok(MetricsReport {
            mean_accuracy: per_class.iter().map(|c| c.accuracy).sum::<f64>() / k as f64,
            overall_accuracy: 100.0 * correct as f64 / n as f64,
            per_class_accuracy: per_class,
            n_samples: n,
            run_seed,
        })
    }

    pub fn class_names(&self) -> Vec<&str> {
        self.per_class_accuracy.iter().map(|c| c.class_name.as_str()).collect()
    }
}

/// Confusion matrix of the classifier's argmax predictions over `dataset`,
/// in sample order.
pub fn confusion_matrix(cm: &ClassifierState, dataset: &DomainDataset, batch_size: usize) -> Result<ConfusionMatrix> {
    if cm.num_classes() != dataset.num_classes() {
        return Err(Error::Validation(format!(
            "classifier has {} classes but {} has {}",
            cm.num_classes(),
            dataset.root.display(),
            dataset.num_classes()
        )));
    }
    if batch_size == 0 {
        return Err(Error::Validation("batch_size must be positive".into()));
    }
    let mut conf = ConfusionMatrix::new(cm.num_classes());
    let idx: Vec<usize> = (0..dataset.len()).collect();
    for chunk in idx.chunks(batch_size) {
        let batch = dataset.load_batch(chunk, cm.input_size())?;
        let labels = batch.labels.as_ref().expect("dataset batches carry labels");
        for (&truth, pred) in labels.iter().zip(cm.predict(&batch)?) {
            conf.record(truth, pred);
        }
    }
    Ok(conf)
}

pub fn evaluate(cm: &ClassifierState, dataset: &DomainDataset, batch_size: usize, run_seed: u64) -> Result<MetricsReport> {
    let conf = confusion_matrix(cm, dataset, batch_size)?;
    MetricsReport::from_confusion(&dataset.class_names, &conf, run_seed)
}

/// Mean and population standard deviation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MeanStd {
    pub mean: f64,
    pub std: f64,
}

impl MeanStd {
    pub fn of(values: &[f64]) -> Self {
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        MeanStd { mean, std: var.sqrt() }
    }
}

impl fmt::Display for MeanStd {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:.2} ± {:.2}", self.mean, self.std)
    }
}

impl FromStr for MeanStd {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::Validation(format!("cannot parse `{s}` as `mean ± std`"));
        let (m, sd) = s.split_once('±').ok_or_else(bad)?;
        Ok(MeanStd {
            mean: m.trim().parse().map_err(|_| bad())?,
            std: sd.trim().parse().map_err(|_| bad())?,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AggregateReport {
    pub class_names: Vec<String>,
    pub per_class: Vec<MeanStd>,
    pub mean: MeanStd,
    pub overall: MeanStd,
    pub n_runs: usize,
    /// Always `"population"`.
    pub std_kind: String,
}

/// Per-class and class-mean accuracy as mean ± population std over runs.
pub fn aggregate_runs(reports: &[MetricsReport]) -> Result<AggregateReport> {
    if reports.len() < 2 {
        return Err(Error::Validation(format!("aggregation needs at least 2 runs, got {}", reports.len())));
    }
    let names = reports[0].class_names();
    for (i, r) in reports.iter().enumerate().skip(1) {
        if r.class_names() != names {
            return Err(Error::Validation(format!("run {i} has a different class set than run 0")));
        }
    }
    let per_class = (0..names.len())
        .map(|c| MeanStd::of(&reports.iter().map(|r| r.per_class_accuracy[c].accuracy).collect::<Vec<_>>()))
        .collect();
    Ok(AggregateReport {
        class_names: names.iter().map(|s| s.to_string()).collect(),
        per_class,
        mean: MeanStd::of(&reports.iter().map(|r| r.mean_accuracy).collect::<Vec<_>>()),
        overall: MeanStd::of(&reports.iter().map(|r| r.overall_accuracy).collect::<Vec<_>>()),
        n_runs: reports.len(),
        std_kind: "population".into(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TableFormat {
    Csv,
    Markdown,
}

impl FromStr for TableFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "csv" => Ok(TableFormat::Csv),
            "markdown" | "md" => Ok(TableFormat::Markdown),
            _ => Err(Error::Config(format!("unknown table format `{s}` (expected csv or markdown)"))),
        }
    }
}

fn header(classes: &[String]) -> Vec<String> {
    let mut h = classes.to_vec();
    h.push("Mean".into());
    h.push("n_runs".into());
    h
}

fn cells(a: &AggregateReport) -> Vec<String> {
    let mut row: Vec<String> = a.per_class.iter().map(|m| m.to_string()).collect();
    row.push(a.mean.to_string());
    row.push(a.n_runs.to_string());
    row
}

/// One row per aggregate: class columns in class order, then `Mean`, then
/// `n_runs`. Cells read `m ± s` with two decimals.
pub fn render_table(rows: &[AggregateReport], format: TableFormat) -> Result<String> {
    let Some(first) = rows.first() else {
        return Err(Error::Validation("nothing to render".into()));
    };
    if rows.iter().any(|r| r.class_names != first.class_names) {
        return Err(Error::Validation("rows have different class sets".into()));
    }
    let head = header(&first.class_names);
    match format {
        TableFormat::Csv => {
            let mut w = csv::Writer::from_writer(Vec::new());
            let write_err = |e: csv::Error| Error::Validation(e.to_string());
            w.write_record(&head).map_err(write_err)?;
            for r in rows {
                w.write_record(cells(r)).map_err(write_err)?;
            }
            let bytes = w.into_inner().map_err(|e| Error::Validation(e.to_string()))?;
            Ok(String::from_utf8(bytes).expect("utf-8 input"))
        }
        TableFormat::Markdown => {
            let line = |v: &[String]| format!("| {} |\n", v.join(" | "));
            let mut s = line(&head);
            s.push_str(&line(&vec!["---".to_string(); head.len()]));
            for r in rows {
                s.push_str(&line(&cells(r)));
            }
            Ok(s)
        }
    }
}

/// A table row read back from [`render_table`] output.
#[derive(Debug, Clone, PartialEq)]
pub struct ParsedRow {
    pub per_class: Vec<MeanStd>,
    pub mean: MeanStd,
    pub n_runs: usize,
}

/// Inverse of [`render_table`]: returns the class names and the rows.
pub fn parse_table(text: &str, format: TableFormat) -> Result<(Vec<String>, Vec<ParsedRow>)> {
    let records: Vec<Vec<String>> = match format {
        TableFormat::Csv => csv::ReaderBuilder::new()
            .has_headers(false)
            .from_reader(text.as_bytes())
            .records()
            .map(|r| r.map(|r| r.iter().map(String::from).collect()))
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| Error::Validation(e.to_string()))?,
        TableFormat::Markdown => text
            .lines()
            .filter(|l| l.trim_start().starts_with('|'))
            .map(|l| {
                l.trim()
                    .trim_matches('|')
                    .split('|')
                    .map(|c| c.trim().to_string())
                    .collect()
            })
            .enumerate()
            .filter(|(i, _)| *i != 1)
            .map(|(_, r)| r)
            .collect(),
    };
    let Some((head, body)) = records.split_first() else {
        return Err(Error::Validation("empty table".into()));
    };
    if head.len() < 3 || head[head.len() - 2] != "Mean" || head[head.len() - 1] != "n_runs" {
        return Err(Error::Validation("table header must end with Mean, n_runs".into()));
    }
    let k = head.len() - 2;
    let rows = body
        .iter()
        .map(|r| {
            if r.len() != head.len() {
                return Err(Error::Validation(format!("row has {} cells, header {}", r.len(), head.len())));
            }
            Ok(ParsedRow {
                per_class: r[..k].iter().map(|c| c.parse()).collect::<Result<_>>()?,
                mean: r[k].parse()?,
                n_runs: r[k + 1]
                    .parse()
                    .map_err(|_| Error::Validation(format!("bad n_runs `{}`", r[k + 1])))?,
            })
        })
        .collect::<Result<_>>()?;
    Ok((head[..k].to_vec(), rows))
}
