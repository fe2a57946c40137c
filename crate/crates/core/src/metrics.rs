//! Segmentation and classification evaluation.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const MASK_THRESHOLD: f64 = 0.5;

/// Display names by class count.
pub fn class_names(classes: usize) -> Result<&'static [&'static str]> {
    match classes {
        2 => Ok(&["Nev", "Mel"]),
        3 => Ok(&["Nev", "SK", "Mel"]),
        _ => Err(Error::Config(format!("unsupported class count {classes}"))),
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionCounts {
    pub tp: u64,
    pub tn: u64,
    pub fp: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
}

impl ConfusionCounts {
    pub fn total(&self) -> u64 {
        self.tp + self.tn + self.fp + self.fn_
    }
}

/// Pixel counts of a probability map thresholded at `p >= threshold` against
/// a binary ground truth.
pub fn seg_confusion(truth: &[f64], pred: &[f64], threshold: f64) -> Result<ConfusionCounts> {
    if truth.len() != pred.len() {
        return Err(Error::mismatch("seg_confusion", &[truth.len()], &[pred.len()]));
    }
    let mut c = ConfusionCounts::default();
    for (&t, &p) in truth.iter().zip(pred) {
        match (t >= 0.5, p >= threshold) {
            (true, true) => c.tp += 1,
            (true, false) => c.fn_ += 1,
            (false, true) => c.fp += 1,
            (false, false) => c.tn += 1,
        }
    }
    Ok(c)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SegRates {
    pub recall: f64,
    pub specificity: f64,
    pub iou: f64,
}

impl SegRates {
    /// With no lesion pixels in the truth, recall and IoU are 1 when the
    /// prediction is also empty and 0 otherwise. With no background pixels,
    /// specificity is 1.
    pub fn from_counts(c: &ConfusionCounts) -> Self {
        let ratio = |num: u64, den: u64| num as f64 / den as f64;
        let (recall, iou) = if c.tp + c.fn_ == 0 {
            let v = if c.fp == 0 { 1.0 } else { 0.0 };
            (v, v)
        } else {
            (ratio(c.tp, c.tp + c.fn_), ratio(c.tp, c.tp + c.fn_ + c.fp))
        };
        let specificity = if c.tn + c.fp == 0 { 1.0 } else { ratio(c.tn, c.tn + c.fp) };
        SegRates {
            recall,
            specificity,
            iou,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MeanStd {
    pub mean: f64,
    pub std: f64,
}

impl MeanStd {
    /// Mean and population standard deviation.
    pub fn of(values: &[f64]) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::Invalid("mean of an empty set".into()));
        }
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        Ok(MeanStd { mean, std: var.sqrt() })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SegSummary {
    #[serde(rename = "mRc")]
    pub m_rc: MeanStd,
    #[serde(rename = "mSp")]
    pub m_sp: MeanStd,
    #[serde(rename = "mIoU")]
    pub m_iou: MeanStd,
    pub images: usize,
}

/// Per-image rates averaged over the set.
pub fn seg_metrics(per_image: &[SegRates]) -> Result<SegSummary> {
    let col = |f: fn(&SegRates) -> f64| -> Vec<f64> { per_image.iter().map(f).collect() };
    Ok(SegSummary {
        m_rc: MeanStd::of(&col(|r| r.recall))?,
        m_sp: MeanStd::of(&col(|r| r.specificity))?,
        m_iou: MeanStd::of(&col(|r| r.iou))?,
        images: per_image.len(),
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassMetrics {
    pub name: String,
    pub recall: f64,
    pub precision: f64,
    pub f1: f64,
    pub support: u64,
    /// Set when a ratio had a zero denominator and was reported as 0.
    pub undefined: bool,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Averages {
    pub recall: f64,
    pub precision: f64,
    pub f1: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClsReport {
    pub per_class: Vec<ClassMetrics>,
    pub weighted_avg: Averages,
    /// `confusion[predicted][actual]`.
    pub confusion: Vec<Vec<u64>>,
    pub accuracy: f64,
}

/// Confusion matrix with rows indexed by prediction and columns by truth.
pub fn confusion_matrix(preds: &[usize], truths: &[usize], classes: usize) -> Result<Vec<Vec<u64>>> {
    if preds.len() != truths.len() {
        return Err(Error::mismatch("confusion_matrix", &[preds.len()], &[truths.len()]));
    }
    let mut m = vec![vec![0u64; classes]; classes];
    for (&p, &t) in preds.iter().zip(truths) {
        if p >= classes || t >= classes {
            return Err(Error::domain("confusion_matrix", format!("label out of range for {classes} classes")));
        }
        m[p][t] += 1;
    }
    Ok(m)
}

pub fn cls_metrics(preds: &[usize], truths: &[usize], classes: usize) -> Result<ClsReport> {
    if preds.is_empty() {
        return Err(Error::Invalid("no samples to evaluate".into()));
    }
    let names = class_names(classes).map(|n| n.to_vec()).unwrap_or_default();
    cls_metrics_from_confusion(confusion_matrix(preds, truths, classes)?, &names)
}

/// Metrics from a `[predicted][actual]` confusion matrix.
pub fn cls_metrics_from_confusion(confusion: Vec<Vec<u64>>, names: &[&str]) -> Result<ClsReport> {
    let classes = confusion.len();
    if confusion.iter().any(|row| row.len() != classes) {
        return Err(Error::Invalid("confusion matrix must be square".into()));
    }
    let total: u64 = confusion.iter().flatten().sum();
    if total == 0 {
        return Err(Error::Invalid("no samples to evaluate".into()));
    }
    let mut per_class = Vec::with_capacity(classes);
    #[allow(clippy::needless_range_loop)]
    for c in 0..classes {
        let tp = confusion[c][c];
        let support: u64 = (0..classes).map(|p| confusion[p][c]).sum();
        let predicted: u64 = confusion[c].iter().sum();
        let mut undefined = false;
        let mut ratio = |num: u64, den: u64| {
            if den == 0 {
                undefined = true;
                0.0
            } else {
                num as f64 / den as f64
            }
        };
        let recall = ratio(tp, support);
        let precision = ratio(tp, predicted);
        let f1 = if recall + precision > 0.0 {
            2.0 * precision * recall / (precision + recall)
        } else {
            0.0
        };
        per_class.push(ClassMetrics {
            name: names.get(c).map_or_else(|| c.to_string(), |s| s.to_string()),
            recall,
            precision,
            f1,
            support,
            undefined,
        });
    }
    let weighted = |f: fn(&ClassMetrics) -> f64| -> f64 {
        per_class.iter().map(|m| m.support as f64 * f(m)).sum::<f64>() / total as f64
    };
    let weighted_avg = Averages {
        recall: weighted(|m| m.recall),
        precision: weighted(|m| m.precision),
        f1: weighted(|m| m.f1),
    };
    let correct: u64 = (0..classes).map(|c| confusion[c][c]).sum();
    Ok(ClsReport {
        per_class,
        weighted_avg,
        confusion,
        accuracy: correct as f64 / total as f64,
    })
}

/// Index of the largest probability; ties go to the lower index.
pub fn argmax(row: &[f64]) -> usize {
    (0..row.len()).fold(0, |best, i| if row[i] > row[best] { i } else { best })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Roc {
    /// `(false positive rate, true positive rate)` from `(0, 0)` to `(1, 1)`.
    pub points: Vec<(f64, f64)>,
    pub auc: f64,
}

/// ROC by sweeping the threshold down through every distinct score, with the
/// area by the trapezoid rule. Tied scores form one diagonal step, which
/// counts tied positive/negative pairs as one half.
pub fn roc_auc(scores: &[f64], truths: &[bool]) -> Result<Roc> {
    if scores.len() != truths.len() {
        return Err(Error::mismatch("roc_auc", &[scores.len()], &[truths.len()]));
    }
    if scores.iter().any(|s| !s.is_finite()) {
        return Err(Error::NonFinite("roc_auc scores"));
    }
    let pos = truths.iter().filter(|&&t| t).count() as u64;
    let neg = truths.len() as u64 - pos;
    if pos == 0 || neg == 0 {
        return Err(Error::domain("roc_auc", "needs at least one positive and one negative"));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    let mut points = vec![(0.0, 0.0)];
    let (mut tp, mut fp) = (0u64, 0u64);
    // Twice the area, in units of one positive/negative pair.
    let mut area2: u128 = 0;
    let mut i = 0;
    while i < order.len() {
        let s = scores[order[i]];
        let (tp0, fp0) = (tp, fp);
        while i < order.len() && scores[order[i]] == s {
            if truths[order[i]] {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        area2 += (fp - fp0) as u128 * (tp + tp0) as u128;
        points.push((fp as f64 / neg as f64, tp as f64 / pos as f64));
    }
    let auc = area2 as f64 / (2.0 * pos as f64 * neg as f64);
    Ok(Roc { points, auc })
}

/// One-vs-rest ROC per class. Classes absent from (or covering all of) the
/// truth have no curve.
pub fn roc_one_vs_rest(probs: &[Vec<f64>], truths: &[usize], classes: usize) -> Result<Vec<Option<Roc>>> {
    (0..classes)
        .map(|c| {
            let scores: Vec<f64> = probs.iter().map(|p| p[c]).collect();
            let labels: Vec<bool> = truths.iter().map(|&t| t == c).collect();
            match roc_auc(&scores, &labels) {
                Ok(r) => Ok(Some(r)),
                Err(Error::Domain { .. }) => Ok(None),
                Err(e) => Err(e),
            }
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RocEntry {
    pub class: String,
    pub points: Vec<(f64, f64)>,
    pub auc: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct AucSummary {
    pub per_class: Vec<(String, f64)>,
    /// Mean over the classes that have a curve.
    pub macro_avg: Option<f64>,
}

/// Serialized evaluation result.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    #[serde(rename = "mRc")]
    pub m_rc: Option<MeanStd>,
    #[serde(rename = "mSp")]
    pub m_sp: Option<MeanStd>,
    #[serde(rename = "mIoU")]
    pub m_iou: Option<MeanStd>,
    pub per_class: Vec<ClassMetrics>,
    pub weighted_avg: Option<Averages>,
    pub confusion: Vec<Vec<u64>>,
    pub roc: Vec<RocEntry>,
    pub auc: AucSummary,
    /// Samples whose mask was empty, so the whole image was classified.
    #[serde(default)]
    pub degenerate_masks: Vec<String>,
}

impl EvalReport {
    pub fn with_segmentation(mut self, s: &SegSummary) -> Self {
        self.m_rc = Some(s.m_rc);
        self.m_sp = Some(s.m_sp);
        self.m_iou = Some(s.m_iou);
        self
    }

    pub fn with_classification(mut self, cls: &ClsReport, probs: &[Vec<f64>], truths: &[usize]) -> Result<Self> {
        let classes = cls.confusion.len();
        let curves = roc_one_vs_rest(probs, truths, classes)?;
        let mut roc = Vec::new();
        let mut per_class = Vec::new();
        for (c, curve) in curves.into_iter().enumerate() {
            if let Some(r) = curve {
                let name = cls.per_class[c].name.clone();
                per_class.push((name.clone(), r.auc));
                roc.push(RocEntry {
                    class: name,
                    points: r.points,
                    auc: r.auc,
                });
            }
        }
        let macro_avg = (!per_class.is_empty())
            .then(|| per_class.iter().map(|(_, a)| a).sum::<f64>() / per_class.len() as f64);
        self.per_class = cls.per_class.clone();
        self.weighted_avg = Some(cls.weighted_avg);
        self.confusion = cls.confusion.clone();
        self.roc = roc;
        self.auc = AucSummary { per_class, macro_avg };
        Ok(self)
    }

    /// `metric,value` rows.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("metric,value\n");
        let mut row = |k: &str, v: f64| out.push_str(&format!("{k},{v}\n"));
        for (name, ms) in [("mRc", self.m_rc), ("mSp", self.m_sp), ("mIoU", self.m_iou)] {
            if let Some(ms) = ms {
                row(name, ms.mean);
                row(&format!("{name}_std"), ms.std);
            }
        }
        for m in &self.per_class {
            row(&format!("{}_recall", m.name), m.recall);
            row(&format!("{}_precision", m.name), m.precision);
            row(&format!("{}_f1", m.name), m.f1);
        }
        if let Some(w) = self.weighted_avg {
            row("weighted_recall", w.recall);
            row("weighted_precision", w.precision);
            row("weighted_f1", w.f1);
        }
        for (name, auc) in &self.auc.per_class {
            row(&format!("{name}_auc"), *auc);
        }
        if let Some(m) = self.auc.macro_avg {
            row("macro_auc", m);
        }
        if !self.degenerate_masks.is_empty() {
            row("degenerate_masks", self.degenerate_masks.len() as f64);
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sp_is_one_without_background() {
        let c = seg_confusion(&[1.0, 1.0], &[1.0, 0.0], MASK_THRESHOLD).unwrap();
        assert_eq!(SegRates::from_counts(&c).specificity, 1.0);
    }

    #[test]
    fn threshold_is_inclusive() {
        let c = seg_confusion(&[1.0], &[0.5], MASK_THRESHOLD).unwrap();
        assert_eq!(c.tp, 1);
    }

    #[test]
    fn csv_lists_present_metrics() {
        let s = seg_metrics(&[SegRates {
            recall: 1.0,
            specificity: 0.5,
            iou: 0.25,
        }])
        .unwrap();
        let csv = EvalReport::default().with_segmentation(&s).to_csv();
        assert!(csv.contains("mIoU,0.25\n"));
        assert!(!csv.contains("weighted"));
    }
}
