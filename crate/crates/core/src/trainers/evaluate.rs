use serde::{Deserialize, Serialize};

use crate::data::TileSet;
use crate::losses::{combined_loss, LossConfig, MaskPair};
use crate::metrics::{binarize, confusion, macro_scores, score, ConfusionCounts, Scores, TileConfusion, DEFAULT_THRESHOLD};
use crate::models::Model;
use crate::tensor::Scalar;
use crate::Result;

/// Eval-mode predictions on a tile set, scored against its masks.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub pooled: ConfusionCounts,
    pub scores: Scores,
    pub macro_scores: Scores,
    /// Configured loss over every pixel of the set.
    pub loss: f64,
    pub tiles: Vec<TileConfusion>,
}

const EVAL_BATCH: usize = 16;

pub fn evaluate<T: Scalar>(model: &mut Model<T>, set: &TileSet, loss: &LossConfig) -> Result<Evaluation> {
    let mut tiles = Vec::with_capacity(set.len());
    let mut probs_all: Vec<T> = Vec::with_capacity(set.len() * set.size * set.size);
    let mut gt_all: Vec<T> = Vec::with_capacity(probs_all.capacity());
    for idx in set.batches(EVAL_BATCH, None) {
        let (x, y) = set.batch::<T>(&idx);
        let p = model.predict(&x)?;
        let per = set.size * set.size;
        for (k, &i) in idx.iter().enumerate() {
            let tile_p: Vec<f64> = p.data()[k * per..(k + 1) * per].iter().map(|v| v.f64()).collect();
            let c = confusion(&binarize(&tile_p, DEFAULT_THRESHOLD), &set.masks[i])?;
            let meta = &set.tiles[i];
            tiles.push(TileConfusion {
                tile_id: meta.id.clone(),
                tp: c.tp,
                fp: c.fp,
                fn_: c.fn_,
                tn: c.tn,
                stratum: meta.stratum.map_or_else(|| "-".to_string(), |s| s.name().to_string()),
                gsd_cm: meta.gsd_cm,
            });
        }
        probs_all.extend_from_slice(p.data());
        gt_all.extend_from_slice(y.data());
    }
    let counts: Vec<ConfusionCounts> = tiles.iter().map(TileConfusion::counts).collect();
    let pooled: ConfusionCounts = counts.iter().copied().sum();
    let loss = if probs_all.is_empty() { 0.0 } else { combined_loss(loss, MaskPair::new(&gt_all, &probs_all)?).value.f64() };
    Ok(Evaluation { pooled, scores: score(&pooled), macro_scores: macro_scores(&counts), loss, tiles })
}
