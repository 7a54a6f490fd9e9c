use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{mask_path, Manifest, Stratum};
use crate::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MisalignmentRow {
    pub gsd_cm: u32,
    pub stratum: Stratum,
    pub tiles: usize,
    pub mean_iou: f64,
}

/// IoU of two binary masks; two empty masks agree perfectly.
pub fn mask_iou(a: &[u8], b: &[u8]) -> f64 {
    let (mut inter, mut union) = (0usize, 0usize);
    for (&x, &y) in a.iter().zip(b) {
        let (x, y) = (x > 0, y > 0);
        inter += (x && y) as usize;
        union += (x || y) as usize;
    }
    if union == 0 {
        1.0
    } else {
        inter as f64 / union as f64
    }
}

pub(crate) fn read_mask(path: &Path) -> Result<(usize, usize, Vec<u8>)> {
    let img = image::open(path).map_err(|source| Error::Image { path: path.to_path_buf(), source })?.into_luma8();
    let (w, h) = img.dimensions();
    Ok((w as usize, h as usize, img.into_raw().into_iter().map(|v| (v >= 128) as u8).collect()))
}

/// Mean per-tile IoU between the noisy and clean labels, by (gsd, stratum).
pub fn misalignment_stats(manifest: &Manifest, root: &Path) -> Result<Vec<MisalignmentRow>> {
    let mut acc: BTreeMap<(u32, Stratum), (usize, f64)> = BTreeMap::new();
    for t in &manifest.tiles {
        let (Some(stratum), Some(other)) = (t.stratum, t.counterpart) else {
            log::warn!("tile {} has no stratum or paired label; skipped", t.id);
            continue;
        };
        let pair = mask_path(root, t, Some(other));
        if !pair.exists() {
            log::warn!("tile {} is missing its {} mask; skipped", t.id, other.name());
            continue;
        }
        let (_, _, a) = read_mask(&mask_path(root, t, None))?;
        let (_, _, b) = read_mask(&pair)?;
        let e = acc.entry((t.gsd_cm, stratum)).or_insert((0, 0.0));
        e.0 += 1;
        e.1 += mask_iou(&a, &b);
    }
    Ok(acc
        .into_iter()
        .map(|((gsd_cm, stratum), (n, s))| MisalignmentRow { gsd_cm, stratum, tiles: n, mean_iou: s / n as f64 })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn iou_cases() {
        assert_eq!(mask_iou(&[0, 0], &[0, 0]), 1.0);
        assert_eq!(mask_iou(&[1, 1, 0, 0], &[0, 1, 1, 0]), 1.0 / 3.0);
    }
}
