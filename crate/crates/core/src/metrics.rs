//! Confusion matrices, classification reports, one-vs-rest ROC/AUC and
//! bootstrap accuracy intervals.

use std::fmt::Write as _;

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::adversarial::SweepRow;
use crate::error::{Error, Result};
use crate::rng;

pub const DEFAULT_BOOTSTRAP_ITERATIONS: usize = 1000;
/// Two-sided 99% normal quantile.
pub const DEFAULT_Z: f64 = 2.576;

/// `K x K` counts; rows are true classes, columns predictions.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix(pub Vec<Vec<u64>>);

impl ConfusionMatrix {
    pub fn from_rows(rows: Vec<Vec<u64>>) -> Result<Self> {
        let k = rows.len();
        if k == 0 || rows.iter().any(|r| r.len() != k) {
            return Err(Error::InvalidArgument("confusion matrix must be square and nonempty".into()));
        }
        Ok(Self(rows))
    }

    pub fn classes(&self) -> usize {
        self.0.len()
    }

    pub fn total(&self) -> u64 {
        self.0.iter().flatten().sum()
    }

    pub fn trace(&self) -> u64 {
        (0..self.classes()).map(|i| self.0[i][i]).sum()
    }

    pub fn row_sum(&self, i: usize) -> u64 {
        self.0[i].iter().sum()
    }

    pub fn col_sum(&self, j: usize) -> u64 {
        self.0.iter().map(|r| r[j]).sum()
    }

    pub fn accuracy(&self) -> f64 {
        self.trace() as f64 / self.total() as f64
    }
}

pub fn confusion(preds: &[usize], labels: &[usize], classes: usize) -> Result<ConfusionMatrix> {
    if preds.len() != labels.len() {
        return Err(Error::InvalidArgument(format!(
            "{} predictions vs {} labels",
            preds.len(),
            labels.len()
        )));
    }
    let mut m = vec![vec![0u64; classes]; classes];
    for (&p, &l) in preds.iter().zip(labels) {
        if p >= classes || l >= classes {
            return Err(Error::InvalidArgument(format!("class index out of range for {classes} classes")));
        }
        m[l][p] += 1;
    }
    ConfusionMatrix::from_rows(m)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassMetrics {
    pub class: String,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub support: u64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Average {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassificationReport {
    pub per_class: Vec<ClassMetrics>,
    pub accuracy: f64,
    pub macro_avg: Average,
    pub weighted: Average,
    /// `"<class>.<metric>"` entries that hit a zero denominator and were set to 0.
    pub zero_division: Vec<String>,
}

fn ratio(num: u64, den: u64) -> Option<f64> {
    (den > 0).then(|| num as f64 / den as f64)
}

pub fn classification_report(m: &ConfusionMatrix, class_names: &[String]) -> Result<ClassificationReport> {
    let k = m.classes();
    if class_names.len() != k {
        return Err(Error::InvalidArgument(format!("{} class names for a {k}x{k} matrix", class_names.len())));
    }
    let total = m.total();
    if total == 0 {
        return Err(Error::InvalidArgument("confusion matrix is all zero".into()));
    }
    let mut zero_division = Vec::new();
    let mut per_class = Vec::with_capacity(k);
    for (i, name) in class_names.iter().enumerate() {
        let tp = m.0[i][i];
        let mut flag = |metric: &str, v: Option<f64>| {
            v.unwrap_or_else(|| {
                zero_division.push(format!("{name}.{metric}"));
                0.0
            })
        };
        let precision = flag("precision", ratio(tp, m.col_sum(i)));
        let recall = flag("recall", ratio(tp, m.row_sum(i)));
        let f1 = if precision + recall > 0.0 {
            2.0 * precision * recall / (precision + recall)
        } else {
            flag("f1", None)
        };
        per_class.push(ClassMetrics {
            class: name.clone(),
            precision,
            recall,
            f1,
            support: m.row_sum(i),
        });
    }
    let mean = |f: &dyn Fn(&ClassMetrics) -> f64| per_class.iter().map(f).sum::<f64>() / k as f64;
    let wmean = |f: &dyn Fn(&ClassMetrics) -> f64| {
        per_class.iter().map(|c| f(c) * c.support as f64).sum::<f64>() / total as f64
    };
    Ok(ClassificationReport {
        accuracy: m.accuracy(),
        macro_avg: Average {
            precision: mean(&|c| c.precision),
            recall: mean(&|c| c.recall),
            f1: mean(&|c| c.f1),
        },
        weighted: Average {
            precision: wmean(&|c| c.precision),
            recall: wmean(&|c| c.recall),
            f1: wmean(&|c| c.f1),
        },
        per_class,
        zero_division,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RocPoint {
    pub threshold: f64,
    pub fpr: f64,
    pub tpr: f64,
}

/// ROC points from a threshold sweep over the unique scores (descending),
/// starting at `(0, 0)`, plus the trapezoid area. Tied scores move along a
/// diagonal, so ties count one half.
pub fn roc_curve(scores: &[f64], positive: &[bool]) -> Result<(Vec<RocPoint>, f64)> {
    if scores.len() != positive.len() {
        return Err(Error::InvalidArgument("scores and labels differ in length".into()));
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(Error::InvalidArgument("scores contain NaN".into()));
    }
    let p = positive.iter().filter(|&&b| b).count();
    let n = positive.len() - p;
    if p == 0 || n == 0 {
        return Err(Error::InvalidArgument(
            "ROC needs at least one positive and one negative sample".into(),
        ));
    }
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    let mut points = vec![RocPoint {
        threshold: f64::INFINITY,
        fpr: 0.0,
        tpr: 0.0,
    }];
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut auc = 0.0;
    let mut i = 0;
    while i < idx.len() {
        let s = scores[idx[i]];
        while i < idx.len() && scores[idx[i]] == s {
            if positive[idx[i]] {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        let prev = *points.last().unwrap();
        let pt = RocPoint {
            threshold: s,
            fpr: fp as f64 / n as f64,
            tpr: tp as f64 / p as f64,
        };
        auc += (pt.fpr - prev.fpr) * (pt.tpr + prev.tpr) / 2.0;
        points.push(pt);
    }
    Ok((points, auc))
}

/// One-vs-rest ROC for `class` from an `N x K` row-major probability matrix.
pub fn roc_auc(probs: &[f64], classes: usize, labels: &[usize], class: usize) -> Result<(Vec<RocPoint>, f64)> {
    if classes == 0 || probs.len() != labels.len() * classes || class >= classes {
        return Err(Error::InvalidArgument("probability matrix does not match labels".into()));
    }
    let scores: Vec<f64> = probs.chunks(classes).map(|r| r[class]).collect();
    let positive: Vec<bool> = labels.iter().map(|&l| l == class).collect();
    roc_curve(&scores, &positive)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BootstrapCi {
    pub iterations: usize,
    pub mean: f64,
    pub std: f64,
    pub z: f64,
    pub low: f64,
    pub high: f64,
}

/// Interval `[mean - z std, mean + z std]`, ends rounded half-up to 3 decimals.
pub fn ci_from_moments(mean: f64, std: f64, z: f64, iterations: usize) -> BootstrapCi {
    BootstrapCi {
        iterations,
        mean,
        std,
        z,
        low: round_half_up(mean - z * std, 3),
        high: round_half_up(mean + z * std, 3),
    }
}

/// Accuracy over `iterations` resamples with replacement; `std` is the
/// sample standard deviation of those accuracies.
pub fn bootstrap_ci(preds: &[usize], labels: &[usize], iterations: usize, z: f64, seed: u64) -> Result<BootstrapCi> {
    if preds.len() != labels.len() || preds.is_empty() {
        return Err(Error::InvalidArgument("bootstrap needs equal-length, nonempty inputs".into()));
    }
    if iterations < 2 {
        return Err(Error::InvalidArgument("bootstrap needs at least 2 iterations".into()));
    }
    let n = preds.len();
    let accs: Vec<f64> = (0..iterations)
        .into_par_iter()
        .map(|it| {
            let mut r = rng::derive(seed, rng::DOMAIN_BOOTSTRAP, it as u64);
            let correct = (0..n)
                .filter(|_| {
                    let j = r.random_range(0..n);
                    preds[j] == labels[j]
                })
                .count();
            correct as f64 / n as f64
        })
        .collect();
    let mean = accs.iter().sum::<f64>() / iterations as f64;
    let var = accs.iter().map(|a| (a - mean).powi(2)).sum::<f64>() / (iterations - 1) as f64;
    Ok(ci_from_moments(mean, var.sqrt(), z, iterations))
}

/// Half-up rounding to `decimals` places, tolerant of binary
/// representation error at exact halves.
pub fn round_half_up(x: f64, decimals: i32) -> f64 {
    let f = 10f64.powi(decimals);
    let scaled = x * f;
    (scaled + 0.5 + 1e-9).floor() / f
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassRoc {
    pub class: String,
    pub auc: f64,
    pub points: Vec<RocPoint>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub class_names: Vec<String>,
    pub confusion: ConfusionMatrix,
    pub per_class: Vec<ClassMetrics>,
    #[serde(rename = "macro")]
    pub macro_avg: Average,
    pub weighted: Average,
    pub accuracy: f64,
    pub zero_division: Vec<String>,
    /// Classes without both positives and negatives have no curve.
    pub roc: Vec<Option<ClassRoc>>,
    pub bootstrap_ci: BootstrapCi,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub robustness: Option<Vec<SweepRow>>,
}

impl EvalReport {
    /// Builds the full report from labels, predictions and `N x K`
    /// probabilities.
    pub fn build(
        class_names: &[String],
        labels: &[usize],
        preds: &[usize],
        probs: &[f64],
        bootstrap_iterations: usize,
        z: f64,
        seed: u64,
    ) -> Result<Self> {
        let k = class_names.len();
        let m = confusion(preds, labels, k)?;
        let report = classification_report(&m, class_names)?;
        let roc = (0..k)
            .map(|c| {
                roc_auc(probs, k, labels, c).ok().map(|(points, auc)| ClassRoc {
                    class: class_names[c].clone(),
                    auc,
                    points,
                })
            })
            .collect();
        Ok(Self {
            class_names: class_names.to_vec(),
            confusion: m,
            per_class: report.per_class,
            macro_avg: report.macro_avg,
            weighted: report.weighted,
            accuracy: report.accuracy,
            zero_division: report.zero_division,
            roc,
            bootstrap_ci: bootstrap_ci(preds, labels, bootstrap_iterations, z, seed)?,
            robustness: None,
        })
    }

    pub fn to_json(&self) -> Result<String> {
        let mut s = serde_json::to_string_pretty(self)?;
        s.push('\n');
        Ok(s)
    }

    /// Fixed-width precision/recall/F1/support table, 3 decimals.
    pub fn to_text(&self) -> String {
        let r = |v: f64| format!("{:.3}", round_half_up(v, 3));
        let width = self.class_names.iter().map(|c| c.len()).max().unwrap_or(0).max(12);
        let total = self.confusion.total();
        let mut out = String::new();
        let _ = writeln!(out, "{:>width$} {:>10} {:>10} {:>10} {:>10}", "", "precision", "recall", "f1-score", "support");
        out.push('\n');
        for c in &self.per_class {
            let _ = writeln!(
                out,
                "{:>width$} {:>10} {:>10} {:>10} {:>10}",
                c.class,
                r(c.precision),
                r(c.recall),
                r(c.f1),
                c.support
            );
        }
        out.push('\n');
        let _ = writeln!(out, "{:>width$} {:>10} {:>10} {:>10} {:>10}", "accuracy", "", "", r(self.accuracy), total);
        for (name, a) in [("macro avg", self.macro_avg), ("weighted avg", self.weighted)] {
            let _ = writeln!(
                out,
                "{:>width$} {:>10} {:>10} {:>10} {:>10}",
                name,
                r(a.precision),
                r(a.recall),
                r(a.f1),
                total
            );
        }
        out.push('\n');
        for roc in self.roc.iter().flatten() {
            let _ = writeln!(out, "AUC {:<width$} {}", roc.class, r(roc.auc));
        }
        let ci = &self.bootstrap_ci;
        let _ = writeln!(
            out,
            "bootstrap accuracy ({} iterations): mean {} std {:.4} CI [{:.3}, {:.3}] (z = {})",
            ci.iterations,
            r(ci.mean),
            ci.std,
            ci.low,
            ci.high,
            ci.z
        );
        if let Some(rows) = &self.robustness {
            out.push('\n');
            out.push_str(&sweep_table(rows));
        }
        out
    }
}

/// `epsilon accuracy loss [validation_loss]` table.
pub fn sweep_table(rows: &[SweepRow]) -> String {
    let with_val = rows.iter().any(|r| r.validation_loss.is_some());
    let mut out = String::from("epsilon\taccuracy\tloss");
    if with_val {
        out.push_str("\tvalidation_loss");
    }
    out.push('\n');
    for row in rows {
        let _ = write!(out, "{:.2}\t{:.6}\t{:.6}", row.epsilon, row.accuracy, row.loss);
        if let Some(v) = row.validation_loss {
            let _ = write!(out, "\t{v:.6}");
        }
        out.push('\n');
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn names(k: usize) -> Vec<String> {
        (0..k).map(|i| format!("c{i}")).collect()
    }

    #[test]
    fn all_correct_is_diagonal() {
        let m = confusion(&[0, 1, 2, 1], &[0, 1, 2, 1], 3).unwrap();
        assert_eq!(m.0, vec![vec![1, 0, 0], vec![0, 2, 0], vec![0, 0, 1]]);
        let r = classification_report(&m, &names(3)).unwrap();
        assert!(r.per_class.iter().all(|c| c.precision == 1.0 && c.recall == 1.0 && c.f1 == 1.0));
        assert_eq!(r.accuracy, 1.0);
        assert!(confusion(&[0], &[0, 1], 2).is_err());
    }

    #[test]
    fn zero_division_is_flagged() {
        let m = ConfusionMatrix::from_rows(vec![vec![3, 0], vec![2, 0]]).unwrap();
        let r = classification_report(&m, &names(2)).unwrap();
        assert_eq!(r.per_class[1].precision, 0.0);
        assert!(r.zero_division.contains(&"c1.precision".to_string()));
        let zero = ConfusionMatrix::from_rows(vec![vec![0, 0], vec![0, 0]]).unwrap();
        assert!(classification_report(&zero, &names(2)).is_err());
    }

    #[test]
    fn three_class_hand_case() {
        // rows true, cols predicted
        let m = ConfusionMatrix::from_rows(vec![vec![5, 1, 0], vec![2, 3, 1], vec![0, 0, 4]]).unwrap();
        let r = classification_report(&m, &names(3)).unwrap();
        let p = [5.0 / 7.0, 3.0 / 4.0, 4.0 / 5.0];
        let rec = [5.0 / 6.0, 3.0 / 6.0, 1.0];
        for i in 0..3 {
            assert!((r.per_class[i].precision - p[i]).abs() < 1e-12);
            assert!((r.per_class[i].recall - rec[i]).abs() < 1e-12);
            let f1 = 2.0 * p[i] * rec[i] / (p[i] + rec[i]);
            assert!((r.per_class[i].f1 - f1).abs() < 1e-12);
        }
        assert!((r.accuracy - 12.0 / 16.0).abs() < 1e-12);
        assert!((r.macro_avg.precision - p.iter().sum::<f64>() / 3.0).abs() < 1e-12);
        assert!((r.weighted.recall - r.accuracy).abs() < 1e-12);
    }

    #[test]
    fn roc_examples() {
        let (_, auc) = roc_curve(&[0.9, 0.8, 0.1, 0.2], &[true, true, false, false]).unwrap();
        assert_eq!(auc, 1.0);
        let (pts, auc) = roc_curve(&[0.5; 6], &[true, false, true, false, false, true]).unwrap();
        assert_eq!(auc, 0.5);
        assert_eq!(pts.len(), 2);
        assert!(roc_curve(&[0.1, 0.2], &[true, true]).is_err());
    }

    #[test]
    fn bootstrap_perfect_predictor() {
        let ci = bootstrap_ci(&[1; 50], &[1; 50], 200, DEFAULT_Z, 3).unwrap();
        assert_eq!((ci.mean, ci.std, ci.low, ci.high), (1.0, 0.0, 1.0, 1.0));
    }

    #[test]
    fn bootstrap_is_seeded_and_near_binomial() {
        let n = 160;
        let labels = vec![0usize; n];
        let preds: Vec<usize> = (0..n).map(|i| usize::from(i % 10 == 0)).collect();
        let a = bootstrap_ci(&preds, &labels, 1000, DEFAULT_Z, 8).unwrap();
        assert_eq!(a, bootstrap_ci(&preds, &labels, 1000, DEFAULT_Z, 8).unwrap());
        let analytic = (0.9f64 * 0.1 / n as f64).sqrt();
        assert!((a.std - analytic).abs() / analytic < 0.15, "{} vs {analytic}", a.std);
    }

    #[test]
    fn rounding() {
        assert_eq!(round_half_up(0.9355, 2), 0.94);
        assert_eq!(round_half_up(0.0125, 3), 0.013);
        assert_eq!(round_half_up(2.675, 2), 2.68);
        assert_eq!(round_half_up(0.9532416, 3), 0.953);
    }

    #[test]
    fn report_text_and_json_keys() {
        let labels = [0, 0, 1, 1, 2, 2];
        let preds = [0, 1, 1, 1, 2, 0];
        let probs: Vec<f64> = preds
            .iter()
            .flat_map(|&p| (0..3).map(move |c| if c == p { 0.8 } else { 0.1 }))
            .collect();
        let r = EvalReport::build(&names(3), &labels, &preds, &probs, 100, DEFAULT_Z, 1).unwrap();
        let json: serde_json::Value = serde_json::from_str(&r.to_json().unwrap()).unwrap();
        for key in ["confusion", "per_class", "macro", "weighted", "accuracy", "roc", "bootstrap_ci"] {
            assert!(json.get(key).is_some(), "{key}");
        }
        let text = r.to_text();
        assert!(text.contains("precision") && text.contains("weighted avg"));
    }
}
