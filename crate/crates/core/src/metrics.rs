//! Pixel confusion counts and the precision / recall / IoU / F1 scores.

use std::ops::{Add, AddAssign};

use serde::{Deserialize, Serialize};

use crate::{Error, Result};

pub const DEFAULT_THRESHOLD: f64 = 0.5;

/// 1 where `p >= threshold`.
pub fn binarize<T: Copy + Into<f64>>(probs: &[T], threshold: f64) -> Vec<u8> {
    probs.iter().map(|&p| (p.into() >= threshold) as u8).collect()
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ConfusionCounts {
    pub tp: u64,
    pub fp: u64,
    pub fn_: u64,
    pub tn: u64,
}

impl ConfusionCounts {
    pub fn total(&self) -> u64 {
        self.tp + self.fp + self.fn_ + self.tn
    }
}

impl Add for ConfusionCounts {
    type Output = ConfusionCounts;
    fn add(self, o: ConfusionCounts) -> ConfusionCounts {
        ConfusionCounts { tp: self.tp + o.tp, fp: self.fp + o.fp, fn_: self.fn_ + o.fn_, tn: self.tn + o.tn }
    }
}

impl AddAssign for ConfusionCounts {
    fn add_assign(&mut self, o: ConfusionCounts) {
        *self = *self + o;
    }
}

impl std::iter::Sum for ConfusionCounts {
    fn sum<I: Iterator<Item = ConfusionCounts>>(iter: I) -> Self {
        iter.fold(ConfusionCounts::default(), |a, b| a + b)
    }
}

/// Counts for a binary prediction against binary ground truth.
pub fn confusion(pred: &[u8], gt: &[u8]) -> Result<ConfusionCounts> {
    if pred.len() != gt.len() {
        return Err(Error::Shape(format!("prediction has {} pixels, ground truth {}", pred.len(), gt.len())));
    }
    if let Some(v) = pred.iter().chain(gt).find(|&&v| v > 1) {
        return Err(Error::Shape(format!("masks must be binary, found value {v}")));
    }
    let mut c = ConfusionCounts::default();
    for (&p, &g) in pred.iter().zip(gt) {
        match (p, g) {
            (1, 1) => c.tp += 1,
            (1, 0) => c.fp += 1,
            (0, 1) => c.fn_ += 1,
            _ => c.tn += 1,
        }
    }
    Ok(c)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Scores {
    pub precision: f64,
    pub recall: f64,
    pub iou: f64,
    pub f1: f64,
    /// A ratio had a zero denominator and was reported as 0.
    pub degenerate: bool,
}

fn ratio(num: u64, den: u64, flag: &mut bool) -> f64 {
    if den == 0 {
        *flag = true;
        0.0
    } else {
        num as f64 / den as f64
    }
}

pub fn score(c: &ConfusionCounts) -> Scores {
    let mut degenerate = false;
    let precision = ratio(c.tp, c.tp + c.fp, &mut degenerate);
    let recall = ratio(c.tp, c.tp + c.fn_, &mut degenerate);
    let iou = ratio(c.tp, c.tp + c.fp + c.fn_, &mut degenerate);
    let f1 = if precision + recall > 0.0 {
        2.0 * precision * recall / (precision + recall)
    } else {
        degenerate = true;
        0.0
    };
    Scores { precision, recall, iou, f1, degenerate }
}

/// Mean of per-tile scores, skipping degenerate tiles.
pub fn macro_scores(counts: &[ConfusionCounts]) -> Scores {
    let s: Vec<Scores> = counts.iter().map(score).filter(|s| !s.degenerate).collect();
    if s.is_empty() {
        return Scores { degenerate: true, ..Default::default() };
    }
    let n = s.len() as f64;
    Scores {
        precision: s.iter().map(|x| x.precision).sum::<f64>() / n,
        recall: s.iter().map(|x| x.recall).sum::<f64>() / n,
        iou: s.iter().map(|x| x.iou).sum::<f64>() / n,
        f1: s.iter().map(|x| x.f1).sum::<f64>() / n,
        degenerate: false,
    }
}

/// One line of the per-tile confusion CSV.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TileConfusion {
    pub tile_id: String,
    pub tp: u64,
    pub fp: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
    pub tn: u64,
    pub stratum: String,
    pub gsd_cm: u32,
}

impl TileConfusion {
    pub fn counts(&self) -> ConfusionCounts {
        ConfusionCounts { tp: self.tp, fp: self.fp, fn_: self.fn_, tn: self.tn }
    }
}

pub fn write_confusion_csv<W: std::io::Write>(rows: &[TileConfusion], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for r in rows {
        w.serialize(r)?;
    }
    w.flush().map_err(|e| Error::Io { path: "<confusion csv>".into(), source: e })?;
    Ok(())
}

pub fn read_confusion_csv<R: std::io::Read>(input: R) -> Result<Vec<TileConfusion>> {
    let mut r = csv::Reader::from_reader(input);
    Ok(r.deserialize().collect::<std::result::Result<_, _>>()?)
}
