//! Confusion-count accumulation, the four segmentation metrics, and the
//! comparison-table renderer.
//!
//! Per class the counts are one-vs-rest over pixels. Pixel accuracy is the
//! global correct fraction; recall, IoU, and Dice are macro-averaged over
//! foreground classes (class 0 excluded). A class absent from the ground
//! truth is skipped from the macro average and flagged in the report.

use std::collections::BTreeMap;

use crate::data::LabelMap;
use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConfusionCounts {
    pub num_classes: usize,
    pub tp: Vec<u64>,
    pub fp: Vec<u64>,
    pub fn_: Vec<u64>,
    pub tn: Vec<u64>,
}

impl ConfusionCounts {
    pub fn new(num_classes: usize) -> Self {
        ConfusionCounts {
            num_classes,
            tp: vec![0; num_classes],
            fp: vec![0; num_classes],
            fn_: vec![0; num_classes],
            tn: vec![0; num_classes],
        }
    }

    pub fn total(&self) -> u64 {
        self.tp[0] + self.fp[0] + self.fn_[0] + self.tn[0]
    }

    /// Merge counts from a disjoint pixel set.
    pub fn merge(&mut self, other: &ConfusionCounts) {
        assert_eq!(self.num_classes, other.num_classes);
        for c in 0..self.num_classes {
            self.tp[c] += other.tp[c];
            self.fp[c] += other.fp[c];
            self.fn_[c] += other.fn_[c];
            self.tn[c] += other.tn[c];
        }
    }

    /// Truth contains this class somewhere.
    pub fn class_in_truth(&self, c: usize) -> bool {
        self.tp[c] + self.fn_[c] > 0
    }

    pub fn class_in_pred(&self, c: usize) -> bool {
        self.tp[c] + self.fp[c] > 0
    }
}

/// One-vs-rest confusion counts between predicted and true label maps.
pub fn confusion(pred: &LabelMap, truth: &LabelMap, num_classes: usize) -> Result<ConfusionCounts> {
    if (pred.height, pred.width) != (truth.height, truth.width) {
        return Err(Error::data(format!(
            "confusion shape mismatch: {}x{} vs {}x{}",
            pred.height, pred.width, truth.height, truth.width
        )));
    }
    let mut counts = ConfusionCounts::new(num_classes);
    for (&p, &t) in pred.data.iter().zip(&truth.data) {
        let (p, t) = (p as usize, t as usize);
        if p >= num_classes || t >= num_classes {
            return Err(Error::data(format!(
                "label value {} out of range for {} classes",
                p.max(t),
                num_classes
            )));
        }
        for c in 0..num_classes {
            match (p == c, t == c) {
                (true, true) => counts.tp[c] += 1,
                (true, false) => counts.fp[c] += 1,
                (false, true) => counts.fn_[c] += 1,
                (false, false) => counts.tn[c] += 1,
            }
        }
    }
    Ok(counts)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Averaging {
    /// Unweighted mean over foreground classes present in the truth.
    #[default]
    MacroForeground,
}

fn per_class_metric(counts: &ConfusionCounts, f: impl Fn(u64, u64, u64) -> f64) -> Vec<Option<f64>> {
    (0..counts.num_classes)
        .map(|c| {
            if counts.class_in_truth(c) || counts.class_in_pred(c) {
                Some(f(counts.tp[c], counts.fp[c], counts.fn_[c]))
            } else {
                None
            }
        })
        .collect()
}

fn macro_foreground(values: &[Option<f64>], counts: &ConfusionCounts) -> f64 {
    let mut sum = 0.0;
    let mut n = 0usize;
    for c in 1..counts.num_classes {
        // skip classes missing from the truth entirely
        if counts.class_in_truth(c) {
            if let Some(v) = values[c] {
                sum += v;
                n += 1;
            }
        }
    }
    if n == 0 {
        0.0
    } else {
        sum / n as f64
    }
}

pub fn pixel_accuracy(counts: &ConfusionCounts) -> Result<f64> {
    let total = counts.total();
    if total == 0 {
        return Err(Error::data("pixel accuracy of an empty map"));
    }
    let correct: u64 = counts.tp.iter().sum();
    Ok(correct as f64 / total as f64)
}

pub fn recall_per_class(counts: &ConfusionCounts) -> Vec<Option<f64>> {
    per_class_metric(counts, |tp, _fp, fn_| {
        if tp + fn_ == 0 {
            1.0 // class absent from truth; predicted-only FPs are charged elsewhere
        } else {
            tp as f64 / (tp + fn_) as f64
        }
    })
}

pub fn recall(counts: &ConfusionCounts, _avg: Averaging) -> f64 {
    macro_foreground(&recall_per_class(counts), counts)
}

pub fn iou_per_class(counts: &ConfusionCounts) -> Vec<Option<f64>> {
    per_class_metric(counts, |tp, fp, fn_| {
        if tp + fp + fn_ == 0 {
            1.0
        } else {
            tp as f64 / (tp + fp + fn_) as f64
        }
    })
}

pub fn iou(counts: &ConfusionCounts, _avg: Averaging) -> f64 {
    macro_foreground(&iou_per_class(counts), counts)
}

pub fn dice_per_class(counts: &ConfusionCounts) -> Vec<Option<f64>> {
    per_class_metric(counts, |tp, fp, fn_| {
        if 2 * tp + fp + fn_ == 0 {
            1.0
        } else {
            2.0 * tp as f64 / (2 * tp + fp + fn_) as f64
        }
    })
}

pub fn dice(counts: &ConfusionCounts, _avg: Averaging) -> f64 {
    macro_foreground(&dice_per_class(counts), counts)
}

/// Per-pixel argmax over the channel axis of [C,H,W]; ties go to the
/// lowest class index.
pub fn argmax_labels<T: Scalar>(prob_map: &Tensor<T>) -> Result<LabelMap> {
    let shape = prob_map.shape();
    if shape.len() != 3 {
        return Err(Error::shape(format!(
            "argmax_labels expects [C,H,W], got {:?}",
            shape
        )));
    }
    let (c, h, w) = (shape[0], shape[1], shape[2]);
    let mut labels = LabelMap::new(h, w);
    let hw = h * w;
    for p in 0..hw {
        let mut best = 0usize;
        let mut best_v = prob_map.data()[p];
        for ci in 1..c {
            let v = prob_map.data()[ci * hw + p];
            if v > best_v {
                best_v = v;
                best = ci;
            }
        }
        labels.data[p] = best as u8;
    }
    Ok(labels)
}

/// Metric values for one model run, renderable as a table row or a
/// `key=value` line.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricsReport {
    pub model: String,
    pub pixel_accuracy: f64,
    pub recall: f64,
    pub iou: f64,
    pub dice: f64,
    pub averaging: String,
    /// (class, recall, iou, dice, present-in-truth)
    pub per_class: Vec<(usize, f64, f64, f64, bool)>,
}

impl MetricsReport {
    pub fn from_counts(model: &str, counts: &ConfusionCounts) -> Result<Self> {
        let avg = Averaging::MacroForeground;
        let rec = recall_per_class(counts);
        let io = iou_per_class(counts);
        let di = dice_per_class(counts);
        let per_class = (0..counts.num_classes)
            .map(|c| {
                (
                    c,
                    rec[c].unwrap_or(1.0),
                    io[c].unwrap_or(1.0),
                    di[c].unwrap_or(1.0),
                    counts.class_in_truth(c),
                )
            })
            .collect();
        Ok(MetricsReport {
            model: model.to_string(),
            pixel_accuracy: pixel_accuracy(counts)?,
            recall: recall(counts, avg),
            iou: iou(counts, avg),
            dice: dice(counts, avg),
            averaging: "macro_over_foreground".to_string(),
            per_class,
        })
    }

    /// Machine-readable single line: `model=<name> pa=<f> recall=<f> ...`.
    pub fn to_kv(&self) -> String {
        let mut line = format!(
            "model={} pa={:.6} recall={:.6} iou={:.6} dice={:.6} averaging={}",
            self.model, self.pixel_accuracy, self.recall, self.iou, self.dice, self.averaging
        );
        for (c, r, i, d, present) in &self.per_class {
            line.push_str(&format!(
                " class{c}.recall={r:.6} class{c}.iou={i:.6} class{c}.dice={d:.6} class{c}.present={present}"
            ));
        }
        line
    }

    pub fn parse_kv(line: &str) -> Result<Self> {
        let mut fields = BTreeMap::new();
        let mut model = None;
        let mut averaging = "macro_over_foreground".to_string();
        for field in line.split_whitespace() {
            let (key, value) = field
                .split_once('=')
                .ok_or_else(|| Error::data(format!("bad report field '{field}'")))?;
            match key {
                "model" => model = Some(value.to_string()),
                "averaging" => averaging = value.to_string(),
                _ => {
                    fields.insert(key.to_string(), value.to_string());
                }
            }
        }
        let model = model.ok_or_else(|| Error::data("report line missing model="))?;
        let get = |key: &str| -> Result<f64> {
            fields
                .get(key)
                .ok_or_else(|| Error::data(format!("report line missing {key}=")))?
                .parse()
                .map_err(|_| Error::data(format!("bad value for {key}")))
        };
        let mut per_class = Vec::new();
        for c in 0.. {
            let rk = format!("class{c}.recall");
            if !fields.contains_key(&rk) {
                break;
            }
            let present = fields
                .get(&format!("class{c}.present"))
                .map(|v| v == "true")
                .unwrap_or(true);
            per_class.push((
                c,
                get(&rk)?,
                get(&format!("class{c}.iou"))?,
                get(&format!("class{c}.dice"))?,
                present,
            ));
        }
        Ok(MetricsReport {
            model,
            pixel_accuracy: get("pa")?,
            recall: get("recall")?,
            iou: get("iou")?,
            dice: get("dice")?,
            averaging,
            per_class,
        })
    }

    pub fn column(&self, name: &str) -> Option<f64> {
        match name {
            "pa" => Some(self.pixel_accuracy),
            "recall" => Some(self.recall),
            "iou" => Some(self.iou),
            "dice" => Some(self.dice),
            _ => None,
        }
    }
}

pub const REPORT_COLUMNS: &[&str] = &["pa", "recall", "iou", "dice"];

/// Fixed-width comparison table, one row per report, values to 4 decimals.
pub fn render_table(reports: &[MetricsReport], columns: &[&str]) -> Result<String> {
    if reports.is_empty() {
        return Err(Error::data("no reports to render"));
    }
    for col in columns {
        if !REPORT_COLUMNS.contains(col) {
            return Err(Error::config(format!(
                "unknown column '{col}'; valid columns: {}",
                REPORT_COLUMNS.join(", ")
            )));
        }
    }
    let name_width = reports
        .iter()
        .map(|r| r.model.len())
        .chain(["Model".len()])
        .max()
        .unwrap();
    let col_width = columns.iter().map(|c| c.len()).max().unwrap_or(0).max(6);
    let mut out = String::new();
    out.push_str(&format!("{:<name_width$}", "Model"));
    for col in columns {
        out.push_str(&format!("  {col:>col_width$}"));
    }
    out.push('\n');
    for r in reports {
        out.push_str(&format!("{:<name_width$}", r.model));
        for col in columns {
            let v = r.column(col).unwrap();
            out.push_str(&format!("  {v:>col_width$.4}"));
        }
        out.push('\n');
    }
    Ok(out)
}
