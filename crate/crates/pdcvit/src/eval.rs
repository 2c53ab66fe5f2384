//! Evaluation: accuracy, confusion matrix, one-vs-rest FNR/FPR, feature
//! export, and the three-variant ablation.

use std::fs;
use std::path::Path;

use pdcvit_core::model::PdcVitModel;
use pdcvit_core::pdc::Variant;
use pdcvit_core::Tensor;
use rayon::prelude::*;
use serde::Serialize;

use crate::checkpoint::Checkpoint;
use crate::dataset::{DatasetManifest, Split};
use crate::error::{Error, Result};
use crate::train::{self, EpochStats, TrainConfig};

#[derive(Debug, Clone, Copy)]
pub struct PredictRow {
    pub label: usize,
    pub pred: usize,
    pub loss: f64,
}

/// Eval-mode prediction over items; parallel but order-preserving, reduced
/// sequentially so results are deterministic.
pub fn predict_items(model: &PdcVitModel, items: &[(Tensor, usize)]) -> Result<Vec<PredictRow>> {
    items
        .par_iter()
        .map(|(image, label)| {
            let logits = model.forward_eval(image)?;
            Ok(classify(logits.data(), *label))
        })
        .collect()
}

fn classify(logits: &[f64], label: usize) -> PredictRow {
    let mut pred = 0usize;
    for (i, v) in logits.iter().enumerate() {
        if *v > logits[pred] {
            pred = i;
        }
    }
    // −log softmax(logits)[label] through a max-shifted log-sum-exp.
    let mx = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = logits.iter().map(|v| (v - mx).exp()).sum::<f64>().ln();
    PredictRow { label, pred, loss: lse - (logits[label] - mx) }
}

#[derive(Debug, Clone, Serialize)]
pub struct EvalReport {
    pub classes: Vec<String>,
    pub accuracy: f64,
    /// Rows are true classes, columns predicted.
    pub confusion: Vec<Vec<usize>>,
    pub fnr: Vec<f64>,
    pub fpr: Vec<f64>,
    pub mean_fnr: f64,
    pub mean_fpr: f64,
    pub test_loss: f64,
    pub loss_history: Vec<EpochStats>,
}

impl EvalReport {
    /// Derives every metric from a confusion matrix. FNR and FPR use the
    /// one-vs-rest reduction per class.
    pub fn from_confusion(confusion: Vec<Vec<usize>>, classes: Vec<String>) -> Self {
        let c = confusion.len();
        let total: usize = confusion.iter().map(|row| row.iter().sum::<usize>()).sum();
        let trace: usize = (0..c).map(|i| confusion[i][i]).sum();
        let accuracy = if total == 0 { 0.0 } else { trace as f64 / total as f64 };
        let mut fnr = vec![0.0; c];
        let mut fpr = vec![0.0; c];
        for k in 0..c {
            let tp = confusion[k][k];
            let fn_: usize = (0..c).filter(|&j| j != k).map(|j| confusion[k][j]).sum();
            let fp: usize = (0..c).filter(|&i| i != k).map(|i| confusion[i][k]).sum();
            let tn = total - tp - fn_ - fp;
            fnr[k] = if tp + fn_ == 0 { 0.0 } else { fn_ as f64 / (tp + fn_) as f64 };
            fpr[k] = if fp + tn == 0 { 0.0 } else { fp as f64 / (fp + tn) as f64 };
        }
        let mean_fnr = if c == 0 { 0.0 } else { fnr.iter().sum::<f64>() / c as f64 };
        let mean_fpr = if c == 0 { 0.0 } else { fpr.iter().sum::<f64>() / c as f64 };
        EvalReport {
            classes,
            accuracy,
            confusion,
            fnr,
            fpr,
            mean_fnr,
            mean_fpr,
            test_loss: 0.0,
            loss_history: Vec::new(),
        }
    }

    pub fn from_predictions(rows: &[PredictRow], classes: Vec<String>) -> Self {
        let c = classes.len();
        let mut confusion = vec![vec![0usize; c]; c];
        let mut loss = 0.0;
        for r in rows {
            confusion[r.label][r.pred] += 1;
            loss += r.loss;
        }
        let mut report = Self::from_confusion(confusion, classes);
        report.test_loss = if rows.is_empty() { 0.0 } else { loss / rows.len() as f64 };
        report
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    pub fn render_text(&self) -> String {
        let mut out = String::new();
        out.push_str(&format!("accuracy: {:.4}\n", self.accuracy));
        out.push_str(&format!("test_loss: {:.6}\n", self.test_loss));
        out.push_str("confusion (rows = true, cols = predicted):\n");
        out.push_str("            ");
        for name in &self.classes {
            out.push_str(&format!("{name:>8}"));
        }
        out.push('\n');
        for (i, row) in self.confusion.iter().enumerate() {
            out.push_str(&format!("{:>12}", self.classes[i]));
            for v in row {
                out.push_str(&format!("{v:>8}"));
            }
            out.push('\n');
        }
        out.push_str("per-class FNR / FPR (one-vs-rest):\n");
        for (i, name) in self.classes.iter().enumerate() {
            out.push_str(&format!("{:>12}  fnr {:.4}  fpr {:.4}\n", name, self.fnr[i], self.fpr[i]));
        }
        out.push_str(&format!("mean fnr {:.4}  mean fpr {:.4}\n", self.mean_fnr, self.mean_fpr));
        out
    }

    /// Internal consistency: accuracy equals trace/sum and the rates match a
    /// recomputation from the confusion matrix.
    pub fn check_consistency(&self) -> Result<()> {
        let recomputed = EvalReport::from_confusion(self.confusion.clone(), self.classes.clone());
        let same = self.accuracy == recomputed.accuracy
            && self.fnr == recomputed.fnr
            && self.fpr == recomputed.fpr;
        if same {
            Ok(())
        } else {
            Err(Error::Contract("eval report disagrees with its confusion matrix".into()))
        }
    }
}

/// Evaluates a checkpoint on the manifest's test split.
pub fn evaluate(ckpt: &Checkpoint, manifest: &DatasetManifest) -> Result<EvalReport> {
    if ckpt.classes != manifest.classes {
        return Err(Error::Contract(format!(
            "checkpoint classes {:?} do not match manifest classes {:?}",
            ckpt.classes, manifest.classes
        )));
    }
    let test = train::load_split(manifest, Split::Test, ckpt.train.crop)?;
    if test.is_empty() {
        return Err(Error::Data("test split is empty".into()));
    }
    let rows = predict_items(&ckpt.model, &test)?;
    Ok(EvalReport::from_predictions(&rows, manifest.classes.clone()))
}

/// Writes one CSV row per test item: the label and the final class-token
/// representation, for external embedding/projection tools.
pub fn export_features(ckpt: &Checkpoint, manifest: &DatasetManifest, out_path: &Path) -> Result<()> {
    if ckpt.classes != manifest.classes {
        return Err(Error::Contract(format!(
            "checkpoint classes {:?} do not match manifest classes {:?}",
            ckpt.classes, manifest.classes
        )));
    }
    let test = train::load_split(manifest, Split::Test, ckpt.train.crop)?;
    let features: Vec<(usize, Tensor)> = test
        .par_iter()
        .map(|(image, label)| {
            let (cls, _) = ckpt.model.forward_eval_full(image)?;
            Ok((*label, cls))
        })
        .collect::<Result<_>>()?;
    let dim = features.first().map(|(_, f)| f.numel()).unwrap_or(0);
    let mut out = String::from("label");
    for i in 0..dim {
        out.push_str(&format!(",f{i}"));
    }
    out.push('\n');
    for (label, f) in &features {
        out.push_str(&label.to_string());
        for v in f.data() {
            out.push_str(&format!(",{v}"));
        }
        out.push('\n');
    }
    fs::write(out_path, out)?;
    Ok(())
}

#[derive(Debug, Clone, Serialize)]
pub struct AblationRow {
    pub variant: String,
    pub accuracy: f64,
    pub test_loss: f64,
    pub param_count: usize,
    pub epochs_run: usize,
}

/// Trains and evaluates all three variants under identical seeds and config.
pub fn ablation_run(
    manifest: &DatasetManifest,
    base: &TrainConfig,
    out_dir: &Path,
) -> Result<Vec<AblationRow>> {
    let mut rows = Vec::new();
    for variant in Variant::ALL {
        let mut config = *base;
        config.variant = variant;
        let var_dir = out_dir.join(variant.name());
        let result = train::train(manifest, &config, &var_dir)?;
        let report = evaluate(&result.checkpoint, manifest)?;
        rows.push(AblationRow {
            variant: variant.name().to_string(),
            accuracy: report.accuracy,
            test_loss: report.test_loss,
            param_count: result.checkpoint.model.param_count(),
            epochs_run: result.history.len(),
        });
    }
    Ok(rows)
}

pub fn ablation_table(rows: &[AblationRow]) -> String {
    let mut out = String::from("variant,accuracy,test_loss,param_count,epochs_run\n");
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{},{}\n",
            r.variant, r.accuracy, r.test_loss, r.param_count, r.epochs_run
        ));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn perfect_predictor_metrics() {
        // 3 classes × 10 items, all correct.
        let confusion = vec![vec![10, 0, 0], vec![0, 10, 0], vec![0, 0, 10]];
        let classes = vec!["a".into(), "b".into(), "c".into()];
        let r = EvalReport::from_confusion(confusion, classes);
        assert_eq!(r.accuracy, 1.0);
        assert!(r.fnr.iter().all(|v| *v == 0.0));
        assert!(r.fpr.iter().all(|v| *v == 0.0));
        r.check_consistency().unwrap();
    }

    #[test]
    fn hand_confusion_matrix_is_exact() {
        // FNR_c = FN/(TP+FN), FPR_c = FP/(FP+TN), computed by hand.
        let r = EvalReport::from_confusion(
            vec![vec![8, 2], vec![3, 7]],
            vec!["a".into(), "b".into()],
        );
        assert_eq!(r.accuracy, 0.75);
        assert_eq!(r.fnr, vec![0.2, 0.3]);
        assert_eq!(r.fpr, vec![0.3, 0.2]);
        r.check_consistency().unwrap();
    }

    #[test]
    fn degenerate_always_class_zero() {
        let r = EvalReport::from_confusion(
            vec![vec![10, 0], vec![10, 0]],
            vec!["a".into(), "b".into()],
        );
        assert_eq!(r.accuracy, 0.5);
        assert_eq!(r.fnr, vec![0.0, 1.0]);
        assert_eq!(r.fpr, vec![1.0, 0.0]);
    }

    #[test]
    fn report_serializes_to_json_with_nested_arrays() {
        let r = EvalReport::from_confusion(
            vec![vec![8, 2], vec![3, 7]],
            vec!["a".into(), "b".into()],
        );
        let json = r.to_json();
        let parsed: serde_json::Value = serde_json::from_str(&json).unwrap();
        assert_eq!(parsed["accuracy"], 0.75);
        assert_eq!(parsed["confusion"][0][1], 2);
        assert_eq!(parsed["fnr"][1], 0.3);
    }

    #[test]
    fn classify_picks_argmax_and_loss_matches_lse() {
        let row = classify(&[0.0, 2.0, -1.0], 1);
        assert_eq!(row.pred, 1);
        // Oracle: direct softmax probability.
        let probs: f64 = (0.0f64.exp() + 2.0f64.exp() + (-1.0f64).exp()).ln() - 2.0;
        assert!((row.loss - probs).abs() < 1e-12);
    }
}
