//! Evaluation: prediction files, confusion-matrix reports, and multi-seed
//! scenario aggregation. Metrics are recounted from the persisted prediction
//! file rather than in-memory shortcuts, so external tooling can verify them.

use crate::data::{make_benchmark, DomainDataset};
use crate::error::{Error, Result};
use crate::network::ModelParameters;
use crate::specific::{predict, predict_via_c1, Prediction};
use crate::tensor::Tape;
use crate::trainer::{train, TrainConfig};
use serde::{Deserialize, Serialize};
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

pub const REPORT_FORMAT_VERSION: &str = "msadgn-report-v1";

/// One line of the prediction file (JSON lines).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PredictionRow {
    pub index: usize,
    pub label: usize,
    pub weights: Vec<f64>,
    pub logits: Vec<f64>,
}

/// Accuracy and confusion statistics over one labeled dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub format_version: String,
    pub overall_accuracy: f64,
    /// `confusion[true][predicted]` counts.
    pub confusion: Vec<Vec<usize>>,
    pub per_class_accuracy: Vec<f64>,
    pub n_samples: usize,
    pub seed: u64,
    pub config_hash: String,
}

impl EvalReport {
    /// Internal consistency: entries sum to `n_samples` and the accuracy is
    /// the trace ratio.
    pub fn check_consistency(&self) -> Result<()> {
        let total: usize = self.confusion.iter().flatten().sum();
        if total != self.n_samples {
            return Err(Error::Contract(format!(
                "confusion total {total} != n_samples {}",
                self.n_samples
            )));
        }
        let trace: usize = (0..self.confusion.len()).map(|i| self.confusion[i][i]).sum();
        let acc = trace as f64 / self.n_samples as f64;
        if (acc - self.overall_accuracy).abs() > 1e-12 {
            return Err(Error::Contract(format!(
                "accuracy {} != trace ratio {acc}",
                self.overall_accuracy
            )));
        }
        Ok(())
    }
}

/// Run the model over `signals` in chunks, writing one JSON line per sample.
pub fn write_predictions(
    model: &ModelParameters,
    cfg: &TrainConfig,
    ds: &DomainDataset,
    path: &Path,
) -> Result<()> {
    let mut file = fs::File::create(path)?;
    let n = ds.len_signals();
    let chunk = 256;
    let mut start = 0;
    while start < n {
        let end = (start + chunk).min(n);
        let idx: Vec<usize> = (start..end).collect();
        let batch = ds.batch(&idx)?;
        let pred: Prediction = if cfg.ablation.predicts_via_weighted_branch() {
            predict(&batch, model)?
        } else {
            predict_via_c1(&batch, model)?
        };
        for (row, &index) in idx.iter().enumerate() {
            let line = PredictionRow {
                index,
                label: pred.labels[row],
                weights: pred.weights.row(row).to_vec(),
                logits: pred.logits.row(row).to_vec(),
            };
            writeln!(file, "{}", serde_json::to_string(&line)?)?;
        }
        start = end;
    }
    Ok(())
}

/// Build a report by recounting a prediction file against true labels.
pub fn report_from_predictions(
    pred_path: &Path,
    true_labels: &[usize],
    classes: usize,
    seed: u64,
    config_hash: &str,
) -> Result<EvalReport> {
    let reader = BufReader::new(fs::File::open(pred_path)?);
    let mut confusion = vec![vec![0usize; classes]; classes];
    let mut n = 0usize;
    for line in reader.lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let row: PredictionRow = serde_json::from_str(&line)?;
        if row.index >= true_labels.len() {
            return Err(Error::Format(format!(
                "prediction index {} out of range ({} labels)",
                row.index,
                true_labels.len()
            )));
        }
        let truth = true_labels[row.index];
        if truth >= classes || row.label >= classes {
            return Err(Error::Label(format!(
                "class out of range in prediction row {}",
                row.index
            )));
        }
        confusion[truth][row.label] += 1;
        n += 1;
    }
    if n == 0 {
        return Err(Error::Data("prediction file is empty".into()));
    }
    let trace: usize = (0..classes).map(|i| confusion[i][i]).sum();
    let per_class_accuracy = (0..classes)
        .map(|i| {
            let row_total: usize = confusion[i].iter().sum();
            if row_total == 0 {
                f64::NAN
            } else {
                confusion[i][i] as f64 / row_total as f64
            }
        })
        .collect();
    Ok(EvalReport {
        format_version: REPORT_FORMAT_VERSION.to_string(),
        overall_accuracy: trace as f64 / n as f64,
        confusion,
        per_class_accuracy,
        n_samples: n,
        seed,
        config_hash: config_hash.to_string(),
    })
}

/// Predict the labeled `target` and report accuracy. The prediction file is
/// written to `pred_path` and the report is recomputed from it.
pub fn evaluate(
    model: &ModelParameters,
    cfg: &TrainConfig,
    target: &DomainDataset,
    pred_path: &Path,
) -> Result<EvalReport> {
    let labels = target
        .labels()
        .ok_or_else(|| Error::Data("evaluation target must be labeled".into()))?;
    write_predictions(model, cfg, target, pred_path)?;
    let report =
        report_from_predictions(pred_path, labels, cfg.classes, cfg.seed, &cfg.config_hash())?;
    report.check_consistency()?;
    Ok(report)
}

/// Dump shared-extractor embeddings as CSV (one row per sample) for external
/// visualization.
pub fn dump_embeddings(model: &ModelParameters, ds: &DomainDataset, path: &Path) -> Result<()> {
    let mut file = fs::File::create(path)?;
    let n = ds.len_signals();
    let chunk = 256;
    let mut start = 0;
    while start < n {
        let end = (start + chunk).min(n);
        let idx: Vec<usize> = (start..end).collect();
        let emb = Tape::no_grad(|| model.f_shared.forward(&ds.batch(&idx)?))?;
        let d = emb.data();
        let dim = emb.shape()[1];
        for row in 0..idx.len() {
            let cells: Vec<String> =
                d[row * dim..(row + 1) * dim].iter().map(|v| format!("{v}")).collect();
            writeln!(file, "{}", cells.join(","))?;
        }
        start = end;
    }
    Ok(())
}

/// Results of one scenario over several seeds.
#[derive(Debug, Clone, Serialize)]
pub struct RunMatrix {
    pub scenario: String,
    pub entries: Vec<(u64, EvalReport)>,
    pub mean_accuracy: f64,
    pub std_accuracy: f64,
}

impl RunMatrix {
    pub fn from_reports(scenario: String, entries: Vec<(u64, EvalReport)>) -> RunMatrix {
        let accs: Vec<f64> = entries.iter().map(|(_, r)| r.overall_accuracy).collect();
        let mean = accs.iter().sum::<f64>() / accs.len().max(1) as f64;
        let var = if accs.len() > 1 {
            accs.iter().map(|a| (a - mean).powi(2)).sum::<f64>() / (accs.len() - 1) as f64
        } else {
            0.0
        };
        RunMatrix { scenario, entries, mean_accuracy: mean, std_accuracy: var.sqrt() }
    }
}

/// Train once per seed on the benchmark's sources and evaluate on the
/// held-out target. Dataset generation is fixed by `data_seed`; only the
/// training seed varies.
pub fn run_scenario(
    cfg: &TrainConfig,
    data_seed: u64,
    target_domain: usize,
    n_per_class: usize,
    seeds: &[u64],
    work_dir: &Path,
) -> Result<RunMatrix> {
    if seeds.is_empty() {
        return Err(Error::Parameter("need at least one seed".into()));
    }
    let (sources, target) =
        make_benchmark(data_seed, cfg.k_domains, target_domain, n_per_class, cfg.signal_len)?;
    let mut entries = Vec::with_capacity(seeds.len());
    for &seed in seeds {
        let run_cfg = TrainConfig { seed, ..cfg.clone() };
        let (model, _) = train(&run_cfg, &sources)?;
        let pred_path = work_dir.join(format!(
            "predictions_{}_seed{seed}.jsonl",
            run_cfg.ablation
        ));
        let report = evaluate(&model, &run_cfg, &target, &pred_path)?;
        entries.push((seed, report));
    }
    let scenario = format!(
        "{}: sources 1..={}, target {target_domain}",
        cfg.ablation, cfg.k_domains
    );
    Ok(RunMatrix::from_reports(scenario, entries))
}
