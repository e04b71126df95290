use std::fmt;
use std::io::{self, Write};
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{level_targets, Pair};
use crate::error::{Error, Result};
use crate::model::{LmscNet, ScaleSelection};
use crate::tensor::Tensor;
use crate::voxel::{grid_to_input, ClassTable, FREE};
use crate::Scalar;

/// How classes with an empty IoU denominator enter the mean.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum IouAbsent {
    #[default]
    Exclude,
    Zero,
}

impl FromStr for IouAbsent {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "exclude" => Ok(IouAbsent::Exclude),
            "zero" => Ok(IouAbsent::Zero),
            _ => Err(Error::Config(format!(
                "iou-absent must be exclude or zero, got {s:?}"
            ))),
        }
    }
}

impl fmt::Display for IouAbsent {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            IouAbsent::Exclude => "exclude",
            IouAbsent::Zero => "zero",
        })
    }
}

/// Counts indexed by (prediction, truth) over `n` classes, free included.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ConfusionMatrix {
    n: usize,
    counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn new(num_classes: usize) -> Self {
        ConfusionMatrix {
            n: num_classes,
            counts: vec![0; num_classes * num_classes],
        }
    }

    pub fn num_classes(&self) -> usize {
        self.n
    }

    pub fn get(&self, pred: usize, truth: usize) -> u64 {
        self.counts[pred * self.n + truth]
    }

    /// Add voxel pairs, skipping those whose mask entry is false.
    pub fn accumulate(&mut self, pred: &[u16], truth: &[u16], mask: &[bool]) -> Result<()> {
        if pred.len() != truth.len() || pred.len() != mask.len() {
            return Err(Error::dim(
                "confusion",
                "voxel count",
                truth.len(),
                pred.len(),
            ));
        }
        for ((&p, &t), &m) in pred.iter().zip(truth).zip(mask) {
            if !m {
                continue;
            }
            let (p, t) = (p as usize, t as usize);
            if p >= self.n || t >= self.n {
                return Err(Error::Data(format!(
                    "label pair ({p}, {t}) outside {} classes",
                    self.n
                )));
            }
            self.counts[p * self.n + t] += 1;
        }
        Ok(())
    }

    pub fn merge(&mut self, other: &ConfusionMatrix) {
        assert_eq!(self.n, other.n);
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            *a += b;
        }
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    /// `TP / (TP + FP + FN)`, or `None` when the class is absent from both.
    pub fn class_iou(&self, c: usize) -> Option<f64> {
        let tp = self.get(c, c);
        let pred: u64 = (0..self.n).map(|t| self.get(c, t)).sum();
        let truth: u64 = (0..self.n).map(|p| self.get(p, c)).sum();
        let union = pred + truth - tp;
        (union > 0).then(|| tp as f64 / union as f64)
    }

    /// Binary occupied-vs-free scores `(iou, precision, recall)`. Empty
    /// denominators give 0.
    pub fn completion(&self) -> (f64, f64, f64) {
        let free = FREE as usize;
        let (mut tp, mut fp, mut fne) = (0u64, 0u64, 0u64);
        for p in 0..self.n {
            for t in 0..self.n {
                let c = self.get(p, t);
                match (p != free, t != free) {
                    (true, true) => tp += c,
                    (true, false) => fp += c,
                    (false, true) => fne += c,
                    (false, false) => {}
                }
            }
        }
        let ratio = |a: u64, b: u64| if b == 0 { 0.0 } else { a as f64 / b as f64 };
        (
            ratio(tp, tp + fp + fne),
            ratio(tp, tp + fp),
            ratio(tp, tp + fne),
        )
    }
}

/// Scores of one output level.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScaleMetrics {
    pub level: usize,
    /// One entry per semantic class; `None` when undefined.
    pub class_iou: Vec<Option<f64>>,
    pub miou: f64,
    pub completion_iou: f64,
    pub precision: f64,
    pub recall: f64,
    /// Number of evaluated (known) voxels.
    pub voxels: u64,
}

impl ScaleMetrics {
    pub fn from_confusion(level: usize, cm: &ConfusionMatrix, absent: IouAbsent) -> Self {
        let class_iou: Vec<Option<f64>> = (1..cm.num_classes()).map(|c| cm.class_iou(c)).collect();
        let counted: Vec<f64> = match absent {
            IouAbsent::Exclude => class_iou.iter().flatten().copied().collect(),
            IouAbsent::Zero => class_iou.iter().map(|v| v.unwrap_or(0.0)).collect(),
        };
        let miou = if counted.is_empty() {
            0.0
        } else {
            counted.iter().sum::<f64>() / counted.len() as f64
        };
        let (completion_iou, precision, recall) = cm.completion();
        ScaleMetrics {
            level,
            class_iou,
            miou,
            completion_iou,
            precision,
            recall,
            voxels: cm.total(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub class_names: Vec<String>,
    pub iou_absent: IouAbsent,
    pub scales: Vec<ScaleMetrics>,
}

impl MetricsReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Format(format!("metrics report: {e}")))
    }
}

/// Per-voxel argmax of `[1, C, x, y, z]` logits; ties go to the smaller id.
pub fn argmax_labels<T: Scalar>(logits: &Tensor<T>) -> Result<Vec<u16>> {
    let s = logits.shape();
    if s.len() != 5 || s[0] != 1 {
        return Err(Error::Geometry {
            op: "argmax_labels",
            detail: format!("expected logits of shape [1, C, x, y, z], got {s:?}"),
        });
    }
    let (c, vol) = (s[1], s[2] * s[3] * s[4]);
    let x = logits.data();
    Ok((0..vol)
        .map(|v| {
            let mut best = 0;
            for k in 1..c {
                if x[k * vol + v] > x[best * vol + v] {
                    best = k;
                }
            }
            best as u16
        })
        .collect())
}

/// Score `model` on `data` at each requested level against majority-pooled
/// ground truth. Samples are processed in parallel.
pub fn evaluate<T: Scalar>(
    model: &LmscNet<T>,
    data: &[Pair],
    scales: &ScaleSelection,
    classes: &ClassTable,
    absent: IouAbsent,
) -> Result<MetricsReport> {
    let n = model.config().num_classes + 1;
    if classes.num_classes() != n {
        return Err(Error::Config(format!(
            "class table has {} classes, model predicts {n}",
            classes.num_classes()
        )));
    }
    let levels: Vec<usize> = scales.levels().collect();
    let empty = || vec![ConfusionMatrix::new(n); levels.len()];
    let merged = data
        .par_iter()
        .map(|&(occ, gt)| -> Result<Vec<ConfusionMatrix>> {
            let logits = model.predict(&grid_to_input::<T>(occ), scales)?;
            let mut cms = empty();
            for (cm, l) in cms.iter_mut().zip(&levels) {
                let pred = argmax_labels(&logits[l])?;
                let (truth, mask, _) = level_targets(&[gt], *l)?;
                cm.accumulate(&pred, &truth, &mask)?;
            }
            Ok(cms)
        })
        .try_reduce(empty, |mut a, b| {
            for (x, y) in a.iter_mut().zip(&b) {
                x.merge(y);
            }
            Ok(a)
        })?;
    Ok(MetricsReport {
        class_names: classes.semantic_names().to_vec(),
        iou_absent: absent,
        scales: levels
            .iter()
            .zip(&merged)
            .map(|(&l, cm)| ScaleMetrics::from_confusion(l, cm, absent))
            .collect(),
    })
}

fn pct(v: f64) -> String {
    format!("{:.2}", 100.0 * v)
}

/// Human-readable table: one row per metric, one column per scale, values
/// in percent.
pub fn report_metrics(report: &MetricsReport, sink: &mut dyn Write) -> io::Result<()> {
    let mut rows: Vec<Vec<String>> = Vec::new();
    let mut header = vec!["metric".to_string()];
    header.extend(report.scales.iter().map(|s| format!("1:{}", 1 << s.level)));
    rows.push(header);
    if !report.scales.is_empty() {
        for (i, name) in report.class_names.iter().enumerate() {
            let mut row = vec![name.clone()];
            row.extend(
                report
                    .scales
                    .iter()
                    .map(|s| s.class_iou[i].map_or("-".into(), pct)),
            );
            rows.push(row);
        }
        let summary: [(&str, fn(&ScaleMetrics) -> f64); 4] = [
            ("mIoU", |s| s.miou),
            ("completion IoU", |s| s.completion_iou),
            ("precision", |s| s.precision),
            ("recall", |s| s.recall),
        ];
        for (name, get) in summary {
            let mut row = vec![name.to_string()];
            row.extend(report.scales.iter().map(|s| pct(get(s))));
            rows.push(row);
        }
    }
    let width0 = rows.iter().map(|r| r[0].len()).max().unwrap_or(0);
    for row in rows {
        write!(sink, "{:<width0$}", row[0])?;
        for cell in &row[1..] {
            write!(sink, "  {cell:>8}")?;
        }
        writeln!(sink)?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn argmax_prefers_smaller_id_on_ties() {
        let t = Tensor::<f64>::new(vec![1.0, 0.0, 1.0, 2.0], &[1, 2, 2, 1, 1]).unwrap();
        assert_eq!(argmax_labels(&t).unwrap(), vec![0, 1]);
    }

    #[test]
    fn iou_absent_parses() {
        assert_eq!("zero".parse::<IouAbsent>().unwrap(), IouAbsent::Zero);
        assert!("none".parse::<IouAbsent>().is_err());
    }
}
