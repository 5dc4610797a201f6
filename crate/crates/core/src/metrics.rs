//! Multiclass confusion matrix and per-class / macro precision, recall, F1.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// `counts[truth][predicted]`
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConfusionMatrix {
    counts: Vec<Vec<u64>>,
}

impl ConfusionMatrix {
    pub fn from_predictions(truth: &[usize], predicted: &[usize], num_classes: usize) -> Result<Self> {
        if truth.len() != predicted.len() {
            return Err(Error::Shape(format!(
                "{} labels but {} predictions",
                truth.len(),
                predicted.len()
            )));
        }
        let mut counts = vec![vec![0u64; num_classes]; num_classes];
        for (&t, &p) in truth.iter().zip(predicted) {
            if t >= num_classes || p >= num_classes {
                return Err(Error::Domain(format!(
                    "class index out of range for {num_classes} classes"
                )));
            }
            counts[t][p] += 1;
        }
        Ok(Self { counts })
    }

    pub fn num_classes(&self) -> usize {
        self.counts.len()
    }

    pub fn get(&self, truth: usize, predicted: usize) -> u64 {
        self.counts[truth][predicted]
    }

    pub fn true_positives(&self, c: usize) -> u64 {
        self.counts[c][c]
    }

    pub fn false_positives(&self, c: usize) -> u64 {
        self.counts.iter().map(|row| row[c]).sum::<u64>() - self.counts[c][c]
    }

    pub fn false_negatives(&self, c: usize) -> u64 {
        self.counts[c].iter().sum::<u64>() - self.counts[c][c]
    }
}

fn ratio(num: u64, den: u64) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

fn f1(p: f64, r: f64) -> f64 {
    if p + r == 0.0 {
        0.0
    } else {
        2.0 * p * r / (p + r)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClassMetrics {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    /// Test crops whose true class this is.
    pub support: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MacroMetrics {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

/// Per-class and macro-averaged scores. Classes with no test crops score 0
/// and still count toward the macro mean.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tag: Option<String>,
    pub per_class: BTreeMap<String, ClassMetrics>,
    #[serde(rename = "macro")]
    pub macro_avg: MacroMetrics,
}

impl EvalReport {
    pub fn from_confusion(cm: &ConfusionMatrix, class_names: &[String]) -> Result<Self> {
        let n = cm.num_classes();
        if class_names.len() != n {
            return Err(Error::Shape(format!(
                "{} class names for {n} classes",
                class_names.len()
            )));
        }
        let total: u64 = (0..n).map(|c| cm.counts[c].iter().sum::<u64>()).sum();
        if total == 0 {
            return Err(Error::Domain("cannot evaluate an empty test set".into()));
        }
        let mut per_class = BTreeMap::new();
        let (mut sp, mut sr, mut sf) = (0.0, 0.0, 0.0);
        for (c, name) in class_names.iter().enumerate() {
            let tp = cm.true_positives(c);
            let precision = ratio(tp, tp + cm.false_positives(c));
            let recall = ratio(tp, tp + cm.false_negatives(c));
            let m = ClassMetrics {
                precision,
                recall,
                f1: f1(precision, recall),
                support: cm.counts[c].iter().sum(),
            };
            sp += m.precision;
            sr += m.recall;
            sf += m.f1;
            per_class.insert(name.clone(), m);
        }
        let n = n as f64;
        Ok(Self {
            tag: None,
            per_class,
            macro_avg: MacroMetrics {
                precision: sp / n,
                recall: sr / n,
                f1: sf / n,
            },
        })
    }

    pub fn from_predictions(truth: &[usize], predicted: &[usize], class_names: &[String]) -> Result<Self> {
        let cm = ConfusionMatrix::from_predictions(truth, predicted, class_names.len())?;
        Self::from_confusion(&cm, class_names)
    }

    pub fn with_tag(mut self, tag: impl Into<String>) -> Self {
        self.tag = Some(tag.into());
        self
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)? + "\n")
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::parse(path, &e))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn names(n: usize) -> Vec<String> {
        (0..n).map(|c| format!("c{c}")).collect()
    }

    #[test]
    fn two_class_hand_fixture() {
        let r = EvalReport::from_predictions(&[0, 1, 1], &[0, 0, 1], &names(2)).unwrap();
        assert!((r.macro_avg.precision - 0.75).abs() < 1e-12);
        assert!((r.macro_avg.recall - 0.75).abs() < 1e-12);
        assert!((r.macro_avg.f1 - 2.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn perfect_and_constant_predictions() {
        let r = EvalReport::from_predictions(&[0, 1, 2, 1], &[0, 1, 2, 1], &names(3)).unwrap();
        assert_eq!((r.macro_avg.precision, r.macro_avg.recall, r.macro_avg.f1), (1.0, 1.0, 1.0));
        let r = EvalReport::from_predictions(&[0, 0, 1, 1], &[0, 0, 0, 0], &names(2)).unwrap();
        assert!((r.macro_avg.f1 - 1.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn absent_classes_count_as_zero() {
        let r = EvalReport::from_predictions(&[0, 1], &[0, 1], &names(4)).unwrap();
        assert_eq!(r.per_class["c3"].f1, 0.0);
        assert_eq!(r.macro_avg.f1, 0.5);
    }

    #[test]
    fn empty_and_invalid_inputs() {
        assert!(matches!(EvalReport::from_predictions(&[], &[], &names(2)), Err(Error::Domain(_))));
        assert!(EvalReport::from_predictions(&[0], &[5], &names(2)).is_err());
        assert!(EvalReport::from_predictions(&[0, 1], &[0], &names(2)).is_err());
    }

    #[test]
    fn json_round_trip() {
        let r = EvalReport::from_predictions(&[0, 1, 1], &[0, 0, 1], &names(2))
            .unwrap()
            .with_tag("no-pseudo");
        let text = r.to_json().unwrap();
        assert!(text.contains("\"macro\""));
        let back: EvalReport = serde_json::from_str(&text).unwrap();
        assert_eq!(back, r);
    }

    /// Per-class counts straight from the pairs, no matrix.
    fn brute_force(truth: &[usize], pred: &[usize], n: usize) -> (Vec<(f64, f64, f64)>, f64, f64, f64) {
        let mut per = Vec::new();
        for c in 0..n {
            let tp = truth.iter().zip(pred).filter(|(t, p)| **t == c && **p == c).count() as f64;
            let fp = truth.iter().zip(pred).filter(|(t, p)| **t != c && **p == c).count() as f64;
            let fn_ = truth.iter().zip(pred).filter(|(t, p)| **t == c && **p != c).count() as f64;
            let p = if tp + fp > 0.0 { tp / (tp + fp) } else { 0.0 };
            let r = if tp + fn_ > 0.0 { tp / (tp + fn_) } else { 0.0 };
            let f = if p + r > 0.0 { 2.0 * p * r / (p + r) } else { 0.0 };
            per.push((p, r, f));
        }
        let k = n as f64;
        let mp = per.iter().map(|x| x.0).sum::<f64>() / k;
        let mr = per.iter().map(|x| x.1).sum::<f64>() / k;
        let mf = per.iter().map(|x| x.2).sum::<f64>() / k;
        (per, mp, mr, mf)
    }

    proptest! {
        #[test]
        fn matches_brute_force(n in 1usize..8, pairs in prop::collection::vec((0usize..8, 0usize..8), 1..60)) {
            let truth: Vec<usize> = pairs.iter().map(|p| p.0 % n).collect();
            let pred: Vec<usize> = pairs.iter().map(|p| p.1 % n).collect();
            let r = EvalReport::from_predictions(&truth, &pred, &names(n)).unwrap();
            let (per, mp, mr, mf) = brute_force(&truth, &pred, n);
            for (c, (p, rc, f)) in per.iter().enumerate() {
                let m = r.per_class[&format!("c{c}")];
                prop_assert_eq!((m.precision, m.recall, m.f1), (*p, *rc, *f));
            }
            prop_assert_eq!((r.macro_avg.precision, r.macro_avg.recall, r.macro_avg.f1), (mp, mr, mf));
        }
    }
}
