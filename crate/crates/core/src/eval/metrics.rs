use std::fmt;
use std::fs;
use std::path::Path;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Rows are true classes, columns predicted classes.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConfusionMatrix {
    pub counts: Array2<u64>,
    pub class_names: Vec<String>,
}

pub fn confusion_matrix(y_true: &[usize], y_pred: &[usize], classes: usize) -> Result<ConfusionMatrix> {
    if y_true.len() != y_pred.len() {
        return Err(Error::Contract(format!(
            "{} true labels but {} predictions",
            y_true.len(),
            y_pred.len()
        )));
    }
    let mut counts = Array2::zeros((classes, classes));
    for (&t, &p) in y_true.iter().zip(y_pred) {
        for label in [t, p] {
            if label >= classes {
                return Err(Error::Contract(format!(
                    "label {label} out of range for {classes} classes"
                )));
            }
        }
        counts[[t, p]] += 1;
    }
    Ok(ConfusionMatrix {
        counts,
        class_names: (0..classes).map(|k| k.to_string()).collect(),
    })
}

impl ConfusionMatrix {
    pub fn with_names(mut self, names: &[String]) -> Result<Self> {
        if names.len() != self.classes() {
            return Err(Error::Contract(format!(
                "{} class names for a {}x{} matrix",
                names.len(),
                self.classes(),
                self.classes()
            )));
        }
        self.class_names = names.to_vec();
        Ok(self)
    }

    pub fn classes(&self) -> usize {
        self.counts.nrows()
    }

    pub fn total(&self) -> u64 {
        self.counts.sum()
    }

    pub fn trace(&self) -> u64 {
        self.counts.diag().sum()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassMetrics {
    pub name: String,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub support: u64,
    pub tp: u64,
    pub fp: u64,
    pub fn_: u64,
    /// Metrics whose denominator was zero and were reported as 0.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub undefined: Vec<String>,
}

fn ratio(num: f64, den: f64, name: &str, undefined: &mut Vec<String>) -> f64 {
    if den == 0.0 {
        undefined.push(name.to_string());
        0.0
    } else {
        num / den
    }
}

fn f1_of(precision: f64, recall: f64, undefined: &mut Vec<String>) -> f64 {
    ratio(2.0 * precision * recall, precision + recall, "f1", undefined)
}

pub fn per_class_metrics(cm: &ConfusionMatrix) -> Vec<ClassMetrics> {
    (0..cm.classes())
        .map(|k| {
            let tp = cm.counts[[k, k]];
            let fp = cm.counts.column(k).sum() - tp;
            let fn_ = cm.counts.row(k).sum() - tp;
            let mut undefined = Vec::new();
            let precision = ratio(tp as f64, (tp + fp) as f64, "precision", &mut undefined);
            let recall = ratio(tp as f64, (tp + fn_) as f64, "recall", &mut undefined);
            let f1 = f1_of(precision, recall, &mut undefined);
            ClassMetrics {
                name: cm.class_names[k].clone(),
                precision,
                recall,
                f1,
                support: tp + fn_,
                tp,
                fp,
                fn_,
                undefined,
            }
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Strategy {
    Macro,
    Micro,
    Weighted,
}

impl Strategy {
    pub const ALL: [Strategy; 3] = [Strategy::Macro, Strategy::Micro, Strategy::Weighted];
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Strategy::Macro => "macro",
            Strategy::Micro => "micro",
            Strategy::Weighted => "weighted",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub strategy: Strategy,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub accuracy: f64,
}

pub fn aggregate(per_class: &[ClassMetrics], strategy: Strategy) -> Aggregate {
    let tp: u64 = per_class.iter().map(|m| m.tp).sum();
    let total: u64 = per_class.iter().map(|m| m.support).sum();
    let accuracy = if total == 0 { 0.0 } else { tp as f64 / total as f64 };
    let (precision, recall, f1) = match strategy {
        Strategy::Macro => {
            let k = per_class.len() as f64;
            let mean = |f: fn(&ClassMetrics) -> f64| {
                if per_class.is_empty() {
                    0.0
                } else {
                    per_class.iter().map(f).sum::<f64>() / k
                }
            };
            (mean(|m| m.precision), mean(|m| m.recall), mean(|m| m.f1))
        }
        Strategy::Weighted => {
            let w = |f: fn(&ClassMetrics) -> f64| {
                if total == 0 {
                    0.0
                } else {
                    per_class.iter().map(|m| m.support as f64 * f(m)).sum::<f64>() / total as f64
                }
            };
            (w(|m| m.precision), w(|m| m.recall), w(|m| m.f1))
        }
        Strategy::Micro => {
            let fp: u64 = per_class.iter().map(|m| m.fp).sum();
            let fn_: u64 = per_class.iter().map(|m| m.fn_).sum();
            let mut scratch = Vec::new();
            let p = ratio(tp as f64, (tp + fp) as f64, "precision", &mut scratch);
            let r = ratio(tp as f64, (tp + fn_) as f64, "recall", &mut scratch);
            (p, r, f1_of(p, r, &mut scratch))
        }
    };
    Aggregate {
        strategy,
        precision,
        recall,
        f1,
        accuracy,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub samples: u64,
    pub accuracy: f64,
    pub class_names: Vec<String>,
    pub per_class: Vec<ClassMetrics>,
    pub aggregates: Vec<Aggregate>,
    pub confusion: Vec<Vec<u64>>,
}

impl MetricsReport {
    pub fn from_confusion(cm: &ConfusionMatrix) -> Self {
        let per_class = per_class_metrics(cm);
        let aggregates: Vec<Aggregate> = Strategy::ALL.iter().map(|&s| aggregate(&per_class, s)).collect();
        Self {
            samples: cm.total(),
            accuracy: aggregates[0].accuracy,
            class_names: cm.class_names.clone(),
            per_class,
            aggregates,
            confusion: cm.counts.rows().into_iter().map(|r| r.to_vec()).collect(),
        }
    }

    pub fn aggregate(&self, strategy: Strategy) -> &Aggregate {
        self.aggregates
            .iter()
            .find(|a| a.strategy == strategy)
            .expect("every strategy is reported")
    }

    pub fn confusion_matrix(&self) -> Result<ConfusionMatrix> {
        let k = self.class_names.len();
        let flat: Vec<u64> = self.confusion.iter().flatten().copied().collect();
        let counts = Array2::from_shape_vec((k, k), flat)
            .map_err(|_| Error::Contract("confusion matrix is not square in the class count".into()))?;
        Ok(ConfusionMatrix {
            counts,
            class_names: self.class_names.clone(),
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let json = serde_json::to_string_pretty(self).map_err(|e| Error::format(path, e))?;
        fs::write(path, json + "\n").map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::format(path, e))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn cm(counts: Array2<u64>) -> ConfusionMatrix {
        let k = counts.nrows();
        ConfusionMatrix {
            counts,
            class_names: (0..k).map(|i| format!("c{i}")).collect(),
        }
    }

    #[test]
    fn hand_counts() {
        assert_eq!(
            confusion_matrix(&[0, 1], &[0, 1], 2).unwrap().counts,
            array![[1, 0], [0, 1]]
        );
        assert_eq!(
            confusion_matrix(&[0, 0, 1], &[1, 0, 1], 2).unwrap().counts,
            array![[1, 1], [0, 1]]
        );
    }

    #[test]
    fn contract_errors() {
        assert!(matches!(confusion_matrix(&[0], &[0, 1], 2), Err(Error::Contract(_))));
        assert!(matches!(confusion_matrix(&[0, 2], &[0, 1], 2), Err(Error::Contract(_))));
        assert!(confusion_matrix(&[0], &[3], 2).is_err());
    }

    #[test]
    fn perfect_classifier() {
        let m = per_class_metrics(&cm(array![[3, 0, 0], [0, 2, 0], [0, 0, 5]]));
        for c in &m {
            assert_eq!((c.precision, c.recall, c.f1), (1.0, 1.0, 1.0));
            assert!(c.undefined.is_empty());
        }
    }

    #[test]
    fn two_by_two_hand_arithmetic() {
        let m = per_class_metrics(&cm(array![[5, 5], [0, 10]]));
        assert_eq!((m[0].precision, m[0].recall), (1.0, 0.5));
        assert!((m[0].f1 - 2.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn zero_denominators_are_flagged() {
        // class 1 is never predicted and never present
        let m = per_class_metrics(&cm(array![[4, 0], [0, 0]]));
        assert_eq!((m[1].precision, m[1].recall, m[1].f1), (0.0, 0.0, 0.0));
        assert_eq!(m[1].undefined, ["precision", "recall", "f1"]);
        let empty = MetricsReport::from_confusion(&cm(Array2::zeros((2, 2))));
        assert_eq!(empty.accuracy, 0.0);
    }

    #[test]
    fn identical_classes_give_identical_aggregates() {
        let m = per_class_metrics(&cm(array![[4, 1], [1, 4]]));
        for s in Strategy::ALL {
            let a = aggregate(&m, s);
            assert!(
                (a.precision - 0.8).abs() < 1e-15 && (a.recall - 0.8).abs() < 1e-15,
                "{s}"
            );
            assert!((a.f1 - 0.8).abs() < 1e-15);
        }
    }

    #[test]
    fn report_round_trip() {
        let matrix = cm(array![[4, 1, 0], [2, 3, 1], [0, 0, 7]]);
        let r = MetricsReport::from_confusion(&matrix);
        assert_eq!(r.confusion_matrix().unwrap(), matrix);
        assert_eq!(r.aggregate(Strategy::Micro).recall, r.accuracy);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.json");
        r.save(&path).unwrap();
        assert_eq!(MetricsReport::load(&path).unwrap(), r);
    }

    proptest::proptest! {
        #[test]
        fn relabelling_permutes_per_class_metrics(
            pairs in proptest::collection::vec((0usize..5, 0usize..5), 1..80),
            shift in 1usize..5,
        ) {
            let (t, p): (Vec<_>, Vec<_>) = pairs.iter().copied().unzip();
            let rot = |v: &[usize]| v.iter().map(|c| (c + shift) % 5).collect::<Vec<_>>();
            let a = per_class_metrics(&confusion_matrix(&t, &p, 5).unwrap());
            let b = per_class_metrics(&confusion_matrix(&rot(&t), &rot(&p), 5).unwrap());
            for c in 0..5 {
                let (x, y) = (&a[c], &b[(c + shift) % 5]);
                proptest::prop_assert_eq!((x.tp, x.fp, x.fn_, x.support), (y.tp, y.fp, y.fn_, y.support));
                proptest::prop_assert_eq!((x.precision, x.recall, x.f1), (y.precision, y.recall, y.f1));
            }
            for s in Strategy::ALL {
                let (x, y) = (aggregate(&a, s), aggregate(&b, s));
                proptest::prop_assert!((x.f1 - y.f1).abs() < 1e-12);
            }
        }

        #[test]
        fn counts_are_conserved(pairs in proptest::collection::vec((0usize..7, 0usize..7), 0..80)) {
            let (t, p): (Vec<_>, Vec<_>) = pairs.iter().copied().unzip();
            let cm = confusion_matrix(&t, &p, 7).unwrap();
            proptest::prop_assert_eq!(cm.total(), t.len() as u64);
            let m = per_class_metrics(&cm);
            let fp: u64 = m.iter().map(|c| c.fp).sum();
            let fn_: u64 = m.iter().map(|c| c.fn_).sum();
            proptest::prop_assert_eq!(fp, fn_);
            proptest::prop_assert_eq!(cm.trace() + fp, cm.total());
        }
    }
}
