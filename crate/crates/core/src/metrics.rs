//! Confusion-matrix based segmentation metrics.
//!
//! `gIoU` weights each class IoU by its ground-truth pixel frequency; `wIoU`
//! weights by inverse frequency, so small classes count as much as large ones.
//! Classes absent from the ground truth carry no weight in either aggregate.

use std::fmt::Write as _;

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConfusionMatrix {
    classes: usize,
    /// Row = ground truth, column = prediction.
    counts: Vec<u64>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ClassScores {
    pub iou: Option<f64>,
    pub precision: Option<f64>,
    pub recall: Option<f64>,
    /// Ground-truth pixel frequency.
    pub frequency: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Aggregate {
    pub giou: f64,
    pub wiou: f64,
    pub mean_iou: f64,
}

impl ConfusionMatrix {
    pub fn new(classes: usize) -> Self {
        Self {
            classes,
            counts: vec![0; classes * classes],
        }
    }

    /// Label value reserved for pixels excluded from evaluation.
    pub fn ignore_label(&self) -> usize {
        self.classes
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn get(&self, truth: usize, pred: usize) -> u64 {
        self.counts[truth * self.classes + pred]
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    /// Adds one image. Ignored ground-truth pixels are skipped whatever the
    /// prediction says.
    pub fn add(&mut self, pred: &[u8], truth: &[u8]) -> Result<()> {
        if pred.len() != truth.len() {
            return Err(Error::Dimension(format!(
                "prediction has {} pixels, ground truth {}",
                pred.len(),
                truth.len()
            )));
        }
        let k = self.classes;
        for (i, (&p, &t)) in pred.iter().zip(truth).enumerate() {
            let (p, t) = (p as usize, t as usize);
            if t == k {
                continue;
            }
            if t > k || p >= k {
                return Err(Error::Label(format!(
                    "pixel {i}: truth {t}, prediction {p} with {k} classes"
                )));
            }
            self.counts[t * k + p] += 1;
        }
        Ok(())
    }

    pub fn merge(&mut self, other: &ConfusionMatrix) -> Result<()> {
        if other.classes != self.classes {
            return Err(Error::Dimension(format!(
                "merging {}-class matrix into {}-class matrix",
                other.classes, self.classes
            )));
        }
        self.counts.iter_mut().zip(&other.counts).for_each(|(a, b)| *a += b);
        Ok(())
    }

    pub fn scores(&self) -> Vec<ClassScores> {
        let k = self.classes;
        let total = self.total() as f64;
        (0..k)
            .map(|c| {
                let tp = self.get(c, c) as f64;
                let gt: f64 = (0..k).map(|p| self.get(c, p) as f64).sum();
                let pr: f64 = (0..k).map(|t| self.get(t, c) as f64).sum();
                let union = gt + pr - tp;
                let ratio = |num: f64, den: f64| (den > 0.0).then(|| num / den);
                ClassScores {
                    iou: ratio(tp, union),
                    precision: ratio(tp, pr),
                    recall: ratio(tp, gt),
                    frequency: if total > 0.0 { gt / total } else { 0.0 },
                }
            })
            .collect()
    }

    /// `None` when no class has ground-truth pixels.
    pub fn aggregate(&self) -> Option<Aggregate> {
        let scores = self.scores();
        let present: Vec<(f64, f64)> = scores
            .iter()
            .filter(|s| s.frequency > 0.0)
            .map(|s| (s.frequency, s.iou.unwrap_or(0.0)))
            .collect();
        if present.is_empty() {
            return None;
        }
        let giou = present.iter().map(|(f, iou)| f * iou).sum::<f64>() / present.iter().map(|(f, _)| f).sum::<f64>();
        let inv: f64 = present.iter().map(|(f, _)| 1.0 / f).sum();
        let wiou = present.iter().map(|(f, iou)| iou / f).sum::<f64>() / inv;
        let defined: Vec<f64> = scores.iter().filter_map(|s| s.iou).collect();
        let mean_iou = defined.iter().sum::<f64>() / defined.len() as f64;
        Some(Aggregate { giou, wiou, mean_iou })
    }

    /// Aligned per-class table followed by the aggregates.
    pub fn report(&self, class_names: &[String]) -> String {
        let mut out = String::new();
        let pct = |v: Option<f64>| v.map_or_else(|| "     -".to_string(), |v| format!("{:6.2}", 100.0 * v));
        let _ = writeln!(out, "{:<12} {:>6} {:>6} {:>6} {:>7}", "class", "IoU", "prec", "recall", "freq%");
        for (c, s) in self.scores().iter().enumerate() {
            let name = class_names.get(c).cloned().unwrap_or_else(|| format!("class_{c}"));
            let _ = writeln!(
                out,
                "{:<12} {} {} {} {:7.3}",
                name,
                pct(s.iou),
                pct(s.precision),
                pct(s.recall),
                100.0 * s.frequency
            );
        }
        match self.aggregate() {
            Some(a) => {
                let _ = writeln!(out, "gIoU {:.2}  wIoU {:.2}  mIoU {:.2}", 100.0 * a.giou, 100.0 * a.wiou, 100.0 * a.mean_iou);
            }
            None => out.push_str("no labelled pixels\n"),
        }
        out
    }
}

/// Convenience for a single image.
pub fn accumulate(pred: &[u8], truth: &[u8], classes: usize) -> Result<ConfusionMatrix> {
    let mut cm = ConfusionMatrix::new(classes);
    cm.add(pred, truth)?;
    Ok(cm)
}
