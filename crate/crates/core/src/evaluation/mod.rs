//! Localization and retrieval metrics, and multi-seed summaries.

mod synthetic;

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::bbox::BBox;

pub use synthetic::{generate_synthetic, SyntheticConfig, SyntheticDataset, SyntheticImage};

pub const DEFAULT_CORLOC_IOU: f64 = 0.5;

/// Class key used for images without a class label.
pub const UNLABELED_CLASS: &str = "all";

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum MetricKind {
    CorLoc,
    DetectionRate { iou_threshold: f64 },
    CorRet,
}

impl std::fmt::Display for MetricKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Self::CorLoc => write!(f, "CorLoc"),
            Self::DetectionRate { iou_threshold } => write!(f, "detection rate @ {iou_threshold}"),
            Self::CorRet => write!(f, "CorRet"),
        }
    }
}

/// How the overall value is formed from per-item outcomes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Averaging {
    /// Mean of the per-class values (colocalization).
    ClassMean,
    /// One value over all items (discovery).
    #[default]
    Pooled,
}

/// Percentages in `[0, 100]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub metric_kind: MetricKind,
    pub per_class: BTreeMap<String, f64>,
    pub overall: f64,
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum EvalError {
    #[error("image '{image_id}' has no ground-truth boxes")]
    MissingGroundTruth { image_id: String },
    #[error("image '{image_id}' has no class label")]
    UnlabeledImage { image_id: String },
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct ImageTruth {
    pub boxes: Vec<BBox>,
    pub class_label: Option<String>,
}

/// Ground truth by image id.
pub type GroundTruth = BTreeMap<String, ImageTruth>;

/// Predicted boxes by image id; a missing image has no predictions.
pub type Predictions = BTreeMap<String, Vec<BBox>>;

pub fn iou(a: &BBox, b: &BBox) -> f64 {
    a.iou(b)
}

#[derive(Default)]
struct Tally {
    hits: BTreeMap<String, (usize, usize)>,
}

impl Tally {
    fn add(&mut self, class: &str, hit: bool) {
        let e = self.hits.entry(class.to_string()).or_default();
        e.0 += hit as usize;
        e.1 += 1;
    }

    fn report(self, metric_kind: MetricKind, averaging: Averaging) -> EvalReport {
        let pct = |(h, n): (usize, usize)| if n == 0 { 0.0 } else { 100.0 * h as f64 / n as f64 };
        let per_class: BTreeMap<String, f64> = self.hits.iter().map(|(c, &v)| (c.clone(), pct(v))).collect();
        let overall = match averaging {
            Averaging::ClassMean if !per_class.is_empty() => per_class.values().sum::<f64>() / per_class.len() as f64,
            Averaging::ClassMean => 0.0,
            Averaging::Pooled => pct(self.hits.values().fold((0, 0), |a, b| (a.0 + b.0, a.1 + b.1))),
        };
        EvalReport {
            metric_kind,
            per_class,
            overall,
        }
    }
}

fn class_of(truth: &ImageTruth) -> &str {
    truth.class_label.as_deref().unwrap_or(UNLABELED_CLASS)
}

fn covered(gt: &BBox, predictions: &[BBox], threshold: f64) -> bool {
    predictions.iter().any(|p| iou(p, gt) > threshold)
}

/// Percentage of images where some prediction has IoU above `iou_threshold`
/// with some ground-truth box.
pub fn corloc(
    predictions: &Predictions,
    ground_truth: &GroundTruth,
    iou_threshold: f64,
    averaging: Averaging,
) -> Result<EvalReport, EvalError> {
    let mut tally = Tally::default();
    for (id, truth) in ground_truth {
        if truth.boxes.is_empty() {
            return Err(EvalError::MissingGroundTruth { image_id: id.clone() });
        }
        let preds = predictions.get(id).map_or(&[][..], Vec::as_slice);
        let hit = truth.boxes.iter().any(|g| covered(g, preds, iou_threshold));
        tally.add(class_of(truth), hit);
    }
    Ok(tally.report(MetricKind::CorLoc, averaging))
}

/// Percentage of ground-truth boxes with IoU above `iou_threshold` with some
/// prediction.
pub fn detection_rate(
    predictions: &Predictions,
    ground_truth: &GroundTruth,
    iou_threshold: f64,
    averaging: Averaging,
) -> Result<EvalReport, EvalError> {
    let mut tally = Tally::default();
    for (id, truth) in ground_truth {
        if truth.boxes.is_empty() {
            return Err(EvalError::MissingGroundTruth { image_id: id.clone() });
        }
        let preds = predictions.get(id).map_or(&[][..], Vec::as_slice);
        for g in &truth.boxes {
            tally.add(class_of(truth), covered(g, preds, iou_threshold));
        }
    }
    Ok(tally.report(MetricKind::DetectionRate { iou_threshold }, averaging))
}

/// Mean over images of the share of out-neighbors with the same class.
/// Images without out-edges are left out.
pub fn corret(
    edges: &BTreeMap<String, Vec<String>>,
    class_labels: &BTreeMap<String, String>,
    averaging: Averaging,
) -> Result<EvalReport, EvalError> {
    let label = |id: &String| {
        class_labels
            .get(id)
            .ok_or_else(|| EvalError::UnlabeledImage { image_id: id.clone() })
    };
    let mut shares: BTreeMap<String, Vec<f64>> = BTreeMap::new();
    for (id, out) in edges {
        let class = label(id)?;
        if out.is_empty() {
            continue;
        }
        let mut same = 0;
        for j in out {
            same += (label(j)? == class) as usize;
        }
        shares
            .entry(class.clone())
            .or_default()
            .push(100.0 * same as f64 / out.len() as f64);
    }
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    let per_class: BTreeMap<String, f64> = shares.iter().map(|(c, v)| (c.clone(), mean(v))).collect();
    let overall = if per_class.is_empty() {
        0.0
    } else {
        match averaging {
            Averaging::ClassMean => per_class.values().sum::<f64>() / per_class.len() as f64,
            Averaging::Pooled => mean(&shares.values().flatten().copied().collect::<Vec<_>>()),
        }
    };
    Ok(EvalReport {
        metric_kind: MetricKind::CorRet,
        per_class,
        overall,
    })
}

/// Mean and sample standard deviation of one metric over seeds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedSummary {
    pub values: Vec<f64>,
    pub mean: f64,
    pub std: f64,
}

impl SeedSummary {
    pub fn new(values: Vec<f64>) -> Self {
        let n = values.len();
        let mean = if n == 0 {
            0.0
        } else {
            values.iter().sum::<f64>() / n as f64
        };
        let std = if n < 2 {
            0.0
        } else {
            (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt()
        };
        Self { values, mean, std }
    }
}

impl std::fmt::Display for SeedSummary {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{:.1} ± {:.1}", self.mean, self.std)
    }
}

/// Aligned plain-text table of reports, one column per report.
pub fn format_table(reports: &[EvalReport]) -> String {
    let mut classes: Vec<&String> = reports.iter().flat_map(|r| r.per_class.keys()).collect();
    classes.sort();
    classes.dedup();
    let headers: Vec<String> = reports.iter().map(|r| r.metric_kind.to_string()).collect();
    let first = classes
        .iter()
        .map(|c| c.len())
        .chain(["overall".len(), "class".len()])
        .max()
        .unwrap_or(5);
    let widths: Vec<usize> = headers.iter().map(|h| h.len().max(6)).collect();

    let mut out = format!("{:<first$}", "class");
    for (h, w) in headers.iter().zip(&widths) {
        out.push_str(&format!("  {h:>w$}"));
    }
    out.push('\n');
    let mut row = |name: &str, value: &dyn Fn(&EvalReport) -> Option<f64>| {
        out.push_str(&format!("{name:<first$}"));
        for (r, w) in reports.iter().zip(&widths) {
            match value(r) {
                Some(v) => out.push_str(&format!("  {v:>w$.1}")),
                None => out.push_str(&format!("  {:>w$}", "-")),
            }
        }
        out.push('\n');
    };
    for c in &classes {
        row(c, &|r| r.per_class.get(*c).copied());
    }
    row("overall", &|r| Some(r.overall));
    out
}

/// CSV with header `class,<metric>...`.
pub fn format_csv(reports: &[EvalReport]) -> String {
    let mut classes: Vec<&String> = reports.iter().flat_map(|r| r.per_class.keys()).collect();
    classes.sort();
    classes.dedup();
    let mut out = String::from("class");
    for r in reports {
        out.push(',');
        out.push_str(&r.metric_kind.to_string());
    }
    out.push('\n');
    let cell = |v: Option<f64>| v.map_or(String::new(), |v| format!("{v:.4}"));
    for c in classes {
        out.push_str(c);
        for r in reports {
            out.push(',');
            out.push_str(&cell(r.per_class.get(c).copied()));
        }
        out.push('\n');
    }
    out.push_str("overall");
    for r in reports {
        out.push(',');
        out.push_str(&cell(Some(r.overall)));
    }
    out.push('\n');
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn truth(boxes: Vec<BBox>, class: &str) -> ImageTruth {
        ImageTruth {
            boxes,
            class_label: Some(class.into()),
        }
    }

    #[test]
    fn half_overlap_iou() {
        let a = BBox::new(0.0, 0.0, 10.0, 10.0);
        let b = BBox::new(5.0, 0.0, 15.0, 10.0);
        assert!((iou(&a, &b) - 1.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn corloc_is_strict() {
        let g = BBox::new(0.0, 0.0, 10.0, 10.0);
        // IoU exactly 0.5.
        let p = BBox::new(0.0, 0.0, 10.0, 5.0);
        let gt = GroundTruth::from([("a".into(), truth(vec![g], "x"))]);
        let preds = Predictions::from([("a".into(), vec![p])]);
        assert_eq!(corloc(&preds, &gt, 0.5, Averaging::Pooled).unwrap().overall, 0.0);
    }

    #[test]
    fn class_mean_versus_pooled() {
        let g = BBox::new(0.0, 0.0, 10.0, 10.0);
        let far = BBox::new(50.0, 50.0, 60.0, 60.0);
        let gt = GroundTruth::from([
            ("a".into(), truth(vec![g], "x")),
            ("b".into(), truth(vec![g], "x")),
            ("c".into(), truth(vec![g], "x")),
            ("d".into(), truth(vec![g], "y")),
        ]);
        let preds = Predictions::from([
            ("a".into(), vec![g]),
            ("b".into(), vec![far]),
            ("c".into(), vec![far]),
            ("d".into(), vec![g]),
        ]);
        let pooled = corloc(&preds, &gt, 0.5, Averaging::Pooled).unwrap();
        assert_eq!(pooled.overall, 50.0);
        let mean = corloc(&preds, &gt, 0.5, Averaging::ClassMean).unwrap();
        assert!((mean.overall - (100.0 / 3.0 + 100.0) / 2.0).abs() < 1e-12);
    }

    #[test]
    fn missing_ground_truth_errors() {
        let gt = GroundTruth::from([("a".into(), truth(vec![], "x"))]);
        assert_eq!(
            corloc(&Predictions::new(), &gt, 0.5, Averaging::Pooled),
            Err(EvalError::MissingGroundTruth { image_id: "a".into() })
        );
    }

    #[test]
    fn corret_skips_isolated_images() {
        let labels: BTreeMap<String, String> = [("a", "x"), ("b", "x"), ("c", "y")]
            .map(|(i, c)| (i.into(), c.into()))
            .into();
        let edges = BTreeMap::from([
            ("a".to_string(), vec!["b".to_string(), "c".to_string()]),
            ("b".to_string(), vec!["a".to_string()]),
            ("c".to_string(), vec![]),
        ]);
        let r = corret(&edges, &labels, Averaging::Pooled).unwrap();
        assert_eq!(r.overall, 75.0);
        assert!(!r.per_class.contains_key("y"));
    }

    #[test]
    fn seed_summary_uses_sample_std() {
        let s = SeedSummary::new(vec![1.0, 3.0]);
        assert_eq!(s.mean, 2.0);
        assert!((s.std - 2f64.sqrt()).abs() < 1e-12);
        assert_eq!(SeedSummary::new(vec![4.0]).std, 0.0);
        assert_eq!(s.to_string(), "2.0 ± 1.4");
    }

    #[test]
    fn table_and_csv() {
        let r = EvalReport {
            metric_kind: MetricKind::CorLoc,
            per_class: BTreeMap::from([("cat".into(), 50.0)]),
            overall: 50.0,
        };
        let t = format_table(std::slice::from_ref(&r));
        assert!(t.contains("overall") && t.contains("50.0"));
        assert_eq!(format_csv(&[r]), "class,CorLoc\ncat,50.0000\noverall,50.0000\n");
    }
}
