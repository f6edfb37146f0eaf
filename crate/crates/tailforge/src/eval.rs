//! Metrics (overall/head/tail top-1), the experiment pipeline driver, the
//! ablation matrix runner, and plot-ready report emission.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::data::{ClassId, Dataset, HeadTailSplit};
use crate::data::split_head_tail;
use crate::error::{Error, Result};
use crate::tensor::argmax;
use crate::train::{
    compute_embeddings, train_phase1, train_phase2, EpochLog, Model, Strategy, TrainConfig,
};
use crate::herding::write_selection_csv;

/// Top-1 accuracy report for one (strategy, seed) run. Accuracies are
/// percentages. On a balanced test set the overall accuracy equals both the
/// sample-weighted and the unweighted mean of per-class accuracies.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub strategy: String,
    pub seed: u64,
    pub head_acc: f64,
    pub tail_acc: f64,
    pub overall_acc: f64,
    pub per_class_accuracy: BTreeMap<ClassId, f64>,
}

/// Per-class top-1 accuracy aggregated into head/tail/overall groups.
/// Boundary classes report with the head group. Every class must have at
/// least one test sample.
pub fn topk1_accuracy(
    predictions: &[ClassId],
    labels: &[ClassId],
    split: &HeadTailSplit,
) -> Result<EvalReport> {
    if predictions.len() != labels.len() {
        return Err(Error::InvalidArgument(format!(
            "{} predictions vs {} labels",
            predictions.len(),
            labels.len()
        )));
    }
    let mut per_class: BTreeMap<ClassId, (u64, u64)> = BTreeMap::new();
    for id in split
        .head_classes()
        .iter()
        .chain(split.tail_classes())
        .chain(split.boundary_classes())
    {
        per_class.insert(*id, (0, 0));
    }
    for (pred, label) in predictions.iter().zip(labels) {
        let entry = per_class.get_mut(label).ok_or_else(|| {
            Error::InvalidArgument(format!("label {label} outside the class split"))
        })?;
        entry.1 += 1;
        if pred == label {
            entry.0 += 1;
        }
    }
    if let Some((id, _)) = per_class.iter().find(|(_, (_, total))| *total == 0) {
        return Err(Error::InvalidArgument(format!(
            "class {id} has zero test samples"
        )));
    }
    let acc_of = |id: &ClassId| {
        let (hits, total) = per_class[id];
        100.0 * hits as f64 / total as f64
    };
    let group_mean = |ids: &[ClassId]| {
        if ids.is_empty() {
            0.0
        } else {
            ids.iter().map(acc_of).sum::<f64>() / ids.len() as f64
        }
    };
    let head_group: Vec<ClassId> = split
        .head_classes()
        .iter()
        .chain(split.boundary_classes())
        .cloned()
        .collect();
    let all: Vec<ClassId> = per_class.keys().cloned().collect();
    Ok(EvalReport {
        strategy: String::new(),
        seed: 0,
        head_acc: group_mean(&head_group),
        tail_acc: group_mean(split.tail_classes()),
        overall_acc: group_mean(&all),
        per_class_accuracy: all.iter().map(|id| (*id, acc_of(id))).collect(),
    })
}

/// Argmax predictions of `model` on the dataset's test split, in manifest
/// order (paired with the returned true labels).
pub fn predict_test(model: &Model, dataset: &Dataset) -> Result<(Vec<ClassId>, Vec<ClassId>)> {
    let test = dataset.test_indices();
    let dim = dataset.input_dim();
    if dim != model.input_dim() {
        return Err(Error::ShapeMismatch(format!(
            "dataset input dim {dim} != model input dim {}",
            model.input_dim()
        )));
    }
    let mut preds = Vec::with_capacity(test.len());
    let mut labels = Vec::with_capacity(test.len());
    for chunk in test.chunks(256) {
        let mut x = Array2::zeros((chunk.len(), dim));
        for (r, &pos) in chunk.iter().enumerate() {
            let s = dataset.sample(pos);
            labels.push(s.class_id);
            for (c, v) in s.payload.flat().iter().enumerate() {
                x[[r, c]] = *v;
            }
        }
        let (logits, _) = model.forward_batch(&x);
        for row in logits.outer_iter() {
            let row_vec: Vec<f64> = row.iter().cloned().collect();
            preds.push(argmax(&row_vec) as ClassId + 1);
        }
    }
    Ok((preds, labels))
}

/// Everything one pipeline run produced.
pub struct PipelineRun {
    pub report: EvalReport,
    pub teacher: Model,
    pub student: Model,
    pub log: Vec<EpochLog>,
    pub ros_fallback: bool,
}

/// Drive one end-to-end run: Phase-I, selection, Phase-II (with per-epoch
/// augmentation), and evaluation of the student on the balanced test set.
/// If `out` is given, writes `teacher.ltt1`, `student.ltt1`,
/// `embeddings.ltt1`, `selection.csv` (when the arm selects), and `log.csv`.
pub fn run_pipeline(dataset: &Dataset, cfg: &TrainConfig, out: Option<&Path>) -> Result<PipelineRun> {
    cfg.validate().map_err(|e| e.in_stage("config"))?;
    let (teacher, mut log) = train_phase1(dataset, cfg).map_err(|e| e.in_stage("phase1"))?;
    let outcome = train_phase2(dataset, &teacher, cfg).map_err(|e| e.in_stage("phase2"))?;
    log.extend(outcome.log.iter().cloned());
    let split = split_head_tail(dataset.distribution());
    let (preds, labels) =
        predict_test(&outcome.model, dataset).map_err(|e| e.in_stage("eval"))?;
    let mut report = topk1_accuracy(&preds, &labels, &split).map_err(|e| e.in_stage("eval"))?;
    report.strategy = cfg.strategy.as_str().to_string();
    report.seed = cfg.seed;
    if let Some(dir) = out {
        fs::create_dir_all(dir)?;
        teacher.save_bundle(&dir.join("teacher.ltt1"))?;
        outcome.model.save_bundle(&dir.join("student.ltt1"))?;
        let embeddings = compute_embeddings(&teacher, dataset)?;
        embeddings.write_ltt1(&dir.join("embeddings.ltt1"))?;
        if !outcome.selection.is_empty() {
            write_selection_csv(&outcome.selection, &dir.join("selection.csv"))?;
        }
        crate::train::write_log_csv(&log, &dir.join("log.csv"))?;
    }
    Ok(PipelineRun {
        report,
        teacher,
        student: outcome.model,
        log,
        ros_fallback: outcome.ros_fallback,
    })
}

/// Results of a (strategy x seed) matrix run.
pub struct BenchOutput {
    pub reports: Vec<EvalReport>,
    pub ros_fallback: bool,
    /// `results.csv` bytes (also written to disk when an out dir is given).
    pub results_csv: String,
    pub results_json: String,
}

/// Run every (strategy, seed) combination on one dataset. Runs share the
/// dataset; only the training seed varies, mirroring repeated-trial
/// reporting. Writes `results.csv` and `results.json` into `out` if given.
pub fn run_bench(
    dataset: &Dataset,
    base_cfg: &TrainConfig,
    strategies: &[Strategy],
    seeds: &[u64],
    out: Option<&Path>,
) -> Result<BenchOutput> {
    if strategies.is_empty() || seeds.is_empty() {
        return Err(Error::InvalidArgument(
            "bench needs at least one strategy and one seed".into(),
        ));
    }
    let mut reports = Vec::new();
    let mut ros_fallback = false;
    for &strategy in strategies {
        for &seed in seeds {
            let mut cfg = base_cfg.clone();
            cfg.strategy = strategy;
            cfg.seed = seed;
            let run = run_pipeline(dataset, &cfg, None)?;
            ros_fallback |= run.ros_fallback;
            reports.push(run.report);
        }
    }
    let results_csv = render_results_csv(&reports)?;
    let results_json = render_results_json(&reports, ros_fallback)?;
    if let Some(dir) = out {
        fs::create_dir_all(dir)?;
        fs::write(dir.join("results.csv"), &results_csv)?;
        fs::write(dir.join("results.json"), &results_json)?;
    }
    Ok(BenchOutput {
        reports,
        ros_fallback,
        results_csv,
        results_json,
    })
}

/// Strategy-level aggregate of per-seed reports: arithmetic means plus the
/// sample standard deviation over seeds (0 for a single run).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MeanRow {
    pub strategy: String,
    pub head_acc: f64,
    pub tail_acc: f64,
    pub overall_acc: f64,
    pub head_std: f64,
    pub tail_std: f64,
    pub overall_std: f64,
}

fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

/// Group reports by strategy (first-appearance order) and compute the
/// aggregate row for each group.
pub fn strategy_means(reports: &[EvalReport]) -> Vec<MeanRow> {
    let mut order: Vec<&str> = Vec::new();
    for r in reports {
        if !order.contains(&r.strategy.as_str()) {
            order.push(&r.strategy);
        }
    }
    order
        .iter()
        .map(|name| {
            let group: Vec<&EvalReport> =
                reports.iter().filter(|r| r.strategy == *name).collect();
            let heads: Vec<f64> = group.iter().map(|r| r.head_acc).collect();
            let tails: Vec<f64> = group.iter().map(|r| r.tail_acc).collect();
            let overalls: Vec<f64> = group.iter().map(|r| r.overall_acc).collect();
            let (head_acc, head_std) = mean_std(&heads);
            let (tail_acc, tail_std) = mean_std(&tails);
            let (overall_acc, overall_std) = mean_std(&overalls);
            MeanRow {
                strategy: name.to_string(),
                head_acc,
                tail_acc,
                overall_acc,
                head_std,
                tail_std,
                overall_std,
            }
        })
        .collect()
}

/// `strategy,seed,head,tail,overall` with one row per run followed by a
/// `mean` row per strategy. Percentages carry 4 decimal places so a read
/// back reproduces the in-memory values.
pub fn render_results_csv(reports: &[EvalReport]) -> Result<String> {
    if reports.is_empty() {
        return Err(Error::InvalidArgument("no reports to emit".into()));
    }
    let mut out = String::from("strategy,seed,head,tail,overall\n");
    for mean in strategy_means(reports) {
        for r in reports.iter().filter(|r| r.strategy == mean.strategy) {
            out.push_str(&format!(
                "{},{},{:.4},{:.4},{:.4}\n",
                r.strategy, r.seed, r.head_acc, r.tail_acc, r.overall_acc
            ));
        }
        out.push_str(&format!(
            "{},mean,{:.4},{:.4},{:.4}\n",
            mean.strategy, mean.head_acc, mean.tail_acc, mean.overall_acc
        ));
    }
    Ok(out)
}

#[derive(Debug, Serialize, Deserialize)]
struct ResultsJson {
    runs: Vec<EvalReport>,
    means: Vec<MeanRow>,
    ros_fallback: bool,
}

pub fn render_results_json(reports: &[EvalReport], ros_fallback: bool) -> Result<String> {
    let doc = ResultsJson {
        runs: reports.to_vec(),
        means: strategy_means(reports),
        ros_fallback,
    };
    serde_json::to_string_pretty(&doc)
        .map(|s| s + "\n")
        .map_err(|e| Error::Io(std::io::Error::other(e)))
}

/// Load the `runs` array back out of a `results.json`.
pub fn read_results_json(path: &Path) -> Result<Vec<EvalReport>> {
    let text = fs::read_to_string(path)?;
    let doc: ResultsJson = serde_json::from_str(&text)
        .map_err(|e| Error::MalformedManifest(format!("{}: {e}", path.display())))?;
    Ok(doc.runs)
}

/// Parsed row of `results.csv`: seed is `None` for mean rows.
pub type ResultsRow = (String, Option<u64>, f64, f64, f64);

pub fn parse_results_csv(text: &str) -> Result<Vec<ResultsRow>> {
    let mut lines = text.lines();
    match lines.next() {
        Some("strategy,seed,head,tail,overall") => {}
        other => {
            return Err(Error::MalformedManifest(format!(
                "bad results.csv header: {other:?}"
            )))
        }
    }
    let mut rows = Vec::new();
    for line in lines {
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 5 {
            return Err(Error::MalformedManifest(format!(
                "bad results row: {line}"
            )));
        }
        let seed = if fields[1] == "mean" {
            None
        } else {
            Some(fields[1].parse().map_err(|_| {
                Error::MalformedManifest(format!("bad seed in results row: {line}"))
            })?)
        };
        let num = |s: &str| -> Result<f64> {
            s.parse()
                .map_err(|_| Error::MalformedManifest(format!("bad number in results row: {line}")))
        };
        rows.push((
            fields[0].to_string(),
            seed,
            num(fields[2])?,
            num(fields[3])?,
            num(fields[4])?,
        ));
    }
    Ok(rows)
}

/// Write `results.csv` + `results.json` for a collection of reports.
pub fn emit_report(reports: &[EvalReport], ros_fallback: bool, out_dir: &Path) -> Result<()> {
    fs::create_dir_all(out_dir)?;
    fs::write(out_dir.join("results.csv"), render_results_csv(reports)?)?;
    fs::write(
        out_dir.join("results.json"),
        render_results_json(reports, ros_fallback)?,
    )?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{synth_gaussian_dataset, ClassDistribution};
    use approx::assert_abs_diff_eq;

    fn split_of(counts: Vec<u64>) -> HeadTailSplit {
        split_head_tail(&ClassDistribution::new("t", counts, 1).unwrap())
    }

    #[test]
    fn accuracy_all_correct_and_all_wrong() {
        let split = split_of(vec![10, 6, 2]);
        let labels = vec![1, 2, 3, 3];
        let r = topk1_accuracy(&labels, &labels, &split).unwrap();
        assert_eq!(
            (r.head_acc, r.tail_acc, r.overall_acc),
            (100.0, 100.0, 100.0)
        );
        let wrong = vec![3, 1, 2, 2];
        let r = topk1_accuracy(&wrong, &labels, &split).unwrap();
        assert_eq!((r.head_acc, r.tail_acc, r.overall_acc), (0.0, 0.0, 0.0));
    }

    #[test]
    fn accuracy_group_means() {
        // 2 head classes at 50% and 100%, 2 tail at 0% and 50%
        let split = split_of(vec![10, 10, 2, 2]);
        let labels = vec![1, 1, 2, 2, 3, 3, 4, 4];
        let preds = vec![1, 2, 2, 2, 1, 1, 4, 1];
        let r = topk1_accuracy(&preds, &labels, &split).unwrap();
        assert_abs_diff_eq!(r.head_acc, 75.0, epsilon = 1e-12);
        assert_abs_diff_eq!(r.tail_acc, 25.0, epsilon = 1e-12);
        assert_abs_diff_eq!(r.overall_acc, 50.0, epsilon = 1e-12);
    }

    #[test]
    fn accuracy_rejects_empty_test_class() {
        let split = split_of(vec![10, 6, 2]);
        let labels = vec![1, 2];
        assert!(topk1_accuracy(&labels, &labels, &split).is_err());
    }

    #[test]
    fn overall_sits_between_head_and_tail() {
        let split = split_of(vec![9, 9, 3, 3]);
        let labels = vec![1, 1, 2, 2, 3, 3, 4, 4];
        let preds = vec![1, 1, 2, 1, 3, 4, 4, 3];
        let r = topk1_accuracy(&preds, &labels, &split).unwrap();
        let lo = r.head_acc.min(r.tail_acc);
        let hi = r.head_acc.max(r.tail_acc);
        assert!(r.overall_acc >= lo - 1e-12 && r.overall_acc <= hi + 1e-12);
    }

    fn report(strategy: &str, seed: u64, head: f64, tail: f64, overall: f64) -> EvalReport {
        EvalReport {
            strategy: strategy.into(),
            seed,
            head_acc: head,
            tail_acc: tail,
            overall_acc: overall,
            per_class_accuracy: BTreeMap::new(),
        }
    }

    #[test]
    fn single_report_mean_row_equals_it() {
        let rs = vec![report("full", 1, 60.1234, 30.9876, 40.5)];
        let csv = render_results_csv(&rs).unwrap();
        let rows = parse_results_csv(&csv).unwrap();
        assert_eq!(rows.len(), 2);
        assert_eq!(rows[0].0, "full");
        assert_eq!(rows[0].1, Some(1));
        assert_eq!(rows[1].1, None);
        assert_abs_diff_eq!(rows[0].2, rows[1].2, epsilon = 1e-12);
    }

    #[test]
    fn csv_round_trip_to_four_decimals_and_mean_recomputation() {
        let rs = vec![
            report("full", 1, 61.034921, 33.11111, 41.0),
            report("full", 2, 63.5, 35.77777, 43.0),
            report("baseline", 1, 65.123456, 20.0, 33.0),
        ];
        let csv = render_results_csv(&rs).unwrap();
        let rows = parse_results_csv(&csv).unwrap();
        for r in &rs {
            let row = rows
                .iter()
                .find(|(s, seed, ..)| s == &r.strategy && *seed == Some(r.seed))
                .unwrap();
            assert!((row.2 - r.head_acc).abs() < 1e-4);
            assert!((row.3 - r.tail_acc).abs() < 1e-4);
            assert!((row.4 - r.overall_acc).abs() < 1e-4);
        }
        // mean row equals the column means of its strategy rows
        let full_mean = rows
            .iter()
            .find(|(s, seed, ..)| s == "full" && seed.is_none())
            .unwrap();
        let expect_head = (61.034921 + 63.5) / 2.0;
        assert!((full_mean.2 - expect_head).abs() < 1e-4);
    }

    #[test]
    fn five_seed_means() {
        let rs: Vec<EvalReport> = (1..=5)
            .map(|s| report("hus", s, 50.0 + s as f64, 20.0, 30.0))
            .collect();
        let means = strategy_means(&rs);
        assert_eq!(means.len(), 1);
        assert_abs_diff_eq!(means[0].head_acc, 53.0, epsilon = 1e-12);
        let csv = render_results_csv(&rs).unwrap();
        assert_eq!(csv.lines().count(), 1 + 5 + 1);
    }

    #[test]
    fn baseline_pipeline_report_equals_teacher_eval() {
        let dist = ClassDistribution::new("p", vec![10, 4, 2], 3).unwrap();
        let ds = synth_gaussian_dataset(&dist, 5, 3.0, 6).unwrap();
        let cfg = TrainConfig {
            epochs_phase1: 8,
            epochs_phase2: 8,
            hidden_dim: 16,
            batch_size: 8,
            seed: 4,
            strategy: Strategy::Baseline,
            ..TrainConfig::default()
        };
        let run = run_pipeline(&ds, &cfg, None).unwrap();
        let split = split_head_tail(ds.distribution());
        let (preds, labels) = predict_test(&run.teacher, &ds).unwrap();
        let direct = topk1_accuracy(&preds, &labels, &split).unwrap();
        assert_eq!(run.report.per_class_accuracy, direct.per_class_accuracy);
        assert_eq!(run.report.overall_acc, direct.overall_acc);
    }

    #[test]
    fn emit_report_to_unwritable_path_is_io_error() {
        let dir = tempfile::tempdir().unwrap();
        let blocker = dir.path().join("file");
        fs::write(&blocker, "x").unwrap();
        let rs = vec![report("full", 1, 60.0, 30.0, 40.0)];
        // a file where a directory must go
        let err = emit_report(&rs, false, &blocker.join("sub")).unwrap_err();
        assert!(matches!(err, Error::Io(_)));
    }

    #[test]
    fn results_json_round_trip() {
        let rs = vec![report("full", 1, 60.0, 30.0, 40.0)];
        let json = render_results_json(&rs, true).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("results.json");
        fs::write(&path, &json).unwrap();
        let back = read_results_json(&path).unwrap();
        assert_eq!(back, rs);
    }
}
