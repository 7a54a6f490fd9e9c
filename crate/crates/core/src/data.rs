//! In-memory tile sets feeding the trainers.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::datagen::{image_path, mask_path, synthesize_role, DatasetConfig, LabelKind, Manifest, Stratum, TileMeta};
use crate::tensor::{Scalar, Shape, Tensor};
use crate::{Error, Result};

/// Images (channel-major, `[0, 1]`) and binary masks of one dataset split.
#[derive(Clone, Debug)]
pub struct TileSet {
    /// `<role>/<split>`, used in records and error messages.
    pub name: String,
    pub role: String,
    pub size: usize,
    pub tiles: Vec<TileMeta>,
    pub images: Vec<Vec<f32>>,
    pub masks: Vec<Vec<u8>>,
}

fn quantize(v: f32) -> f32 {
    (v.clamp(0.0, 1.0) * 255.0).round() / 255.0
}

impl TileSet {
    /// Loads `split` of the dataset rooted at `root`. `label` picks the
    /// counterpart mask instead of the primary one when it differs.
    pub fn load(root: &Path, split: &str, label: Option<LabelKind>) -> Result<TileSet> {
        let manifest = Manifest::load(root)?;
        let size = manifest.tile_size;
        let tiles: Vec<TileMeta> = manifest.split(split).cloned().collect();
        let mut images = Vec::with_capacity(tiles.len());
        let mut masks = Vec::with_capacity(tiles.len());
        for t in &tiles {
            let kind = match label {
                Some(k) if k != t.label_kind => Some(k),
                _ => None,
            };
            let ip = image_path(root, t);
            let img = image::open(&ip).map_err(|source| Error::Image { path: ip.clone(), source })?.to_rgb8();
            if img.width() as usize != size || img.height() as usize != size {
                return Err(Error::Shape(format!("{}: {}x{} image in a {size}-px dataset", ip.display(), img.width(), img.height())));
            }
            let n = size * size;
            let mut chw = vec![0f32; 3 * n];
            for (i, px) in img.pixels().enumerate() {
                for c in 0..3 {
                    chw[c * n + i] = px[c] as f32 / 255.0;
                }
            }
            let (w, h, m) = crate::datagen::read_mask(&mask_path(root, t, kind))?;
            if w != size || h != size {
                return Err(Error::Shape(format!("{}: mask is {w}x{h}", t.id)));
            }
            images.push(chw);
            masks.push(m);
        }
        log::debug!("loaded {} {split} tiles from {}", tiles.len(), root.display());
        Ok(TileSet { name: format!("{}/{split}", manifest.role), role: manifest.role, size, tiles, images, masks })
    }

    /// Generates `split` of `role` without touching the disk. Pixel values are
    /// quantised to 8 bits exactly as a PNG round trip would.
    pub fn synthesize(cfg: &DatasetConfig, role: &str, split: &str) -> Result<TileSet> {
        let mut tiles = Vec::new();
        let mut images = Vec::new();
        let mut masks = Vec::new();
        for t in synthesize_role(cfg, role)?.into_iter().filter(|t| t.meta.split == split) {
            images.push(t.pair.image.iter().map(|&v| quantize(v)).collect());
            masks.push(t.pair.mask);
            tiles.push(t.meta);
        }
        Ok(TileSet { name: format!("{role}/{split}"), role: role.to_string(), size: cfg.tile_size, tiles, images, masks })
    }

    /// Builds a set from explicit buffers.
    pub fn from_parts(name: &str, role: &str, size: usize, tiles: Vec<TileMeta>, images: Vec<Vec<f32>>, masks: Vec<Vec<u8>>) -> Result<TileSet> {
        if tiles.len() != images.len() || tiles.len() != masks.len() {
            return Err(Error::Shape(format!("{} tiles, {} images, {} masks", tiles.len(), images.len(), masks.len())));
        }
        let n = size * size;
        if images.iter().any(|i| i.len() != 3 * n) || masks.iter().any(|m| m.len() != n) {
            return Err(Error::Shape(format!("buffers do not match tile size {size}")));
        }
        Ok(TileSet { name: name.to_string(), role: role.to_string(), size, tiles, images, masks })
    }

    pub fn len(&self) -> usize {
        self.tiles.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tiles.is_empty()
    }

    /// Tiles at the given positions, in order.
    pub fn subset(&self, idx: &[usize]) -> TileSet {
        TileSet {
            name: self.name.clone(),
            role: self.role.clone(),
            size: self.size,
            tiles: idx.iter().map(|&i| self.tiles[i].clone()).collect(),
            images: idx.iter().map(|&i| self.images[i].clone()).collect(),
            masks: idx.iter().map(|&i| self.masks[i].clone()).collect(),
        }
    }

    pub fn stratum(&self, i: usize) -> Option<Stratum> {
        self.tiles[i].stratum
    }

    /// `(images [N,3,S,S], masks [N,1,S,S])` for the given tiles.
    pub fn batch<T: Scalar>(&self, idx: &[usize]) -> (Tensor<T>, Tensor<T>) {
        let s = self.size;
        let mut x = Vec::with_capacity(idx.len() * 3 * s * s);
        let mut y = Vec::with_capacity(idx.len() * s * s);
        for &i in idx {
            x.extend(self.images[i].iter().map(|&v| T::c(v as f64)));
            y.extend(self.masks[i].iter().map(|&v| T::c(v as f64)));
        }
        (Tensor::from_vec(Shape::new(idx.len(), 3, s, s), x), Tensor::from_vec(Shape::new(idx.len(), 1, s, s), y))
    }

    /// Batches covering every tile once; shuffled when `seed` is given.
    pub fn batches(&self, batch_size: usize, seed: Option<u64>) -> Vec<Vec<usize>> {
        let mut order: Vec<usize> = (0..self.len()).collect();
        if let Some(seed) = seed {
            order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        }
        order.chunks(batch_size.max(1)).map(|c| c.to_vec()).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_cfg() -> DatasetConfig {
        let mut cfg = DatasetConfig { tile_size: 32, ..Default::default() };
        cfg.view.off_nadir_tan = 0.0625;
        cfg.t.train = 6;
        cfg.t.val = 2;
        cfg.s.train = 2;
        cfg.s.val = 2;
        cfg.ev.val = 4;
        cfg
    }

    #[test]
    fn disk_and_memory_agree() {
        let cfg = tiny_cfg();
        let dir = tempfile::tempdir().unwrap();
        crate::datagen::build_dataset(&cfg, dir.path(), false).unwrap();
        for (role, split) in [("T", "train"), ("Ev", "val")] {
            let disk = TileSet::load(&dir.path().join(role), split, None).unwrap();
            let mem = TileSet::synthesize(&cfg, role, split).unwrap();
            assert_eq!(disk.tiles, mem.tiles);
            assert_eq!(disk.masks, mem.masks);
            for (a, b) in disk.images.iter().zip(&mem.images) {
                assert!(a.iter().zip(b).all(|(u, v)| (u - v).abs() < 1e-6));
            }
        }
        let clean = TileSet::load(&dir.path().join("T"), "train", Some(LabelKind::Clean)).unwrap();
        let noisy = TileSet::load(&dir.path().join("T"), "train", None).unwrap();
        assert_ne!(clean.masks, noisy.masks);
    }

    #[test]
    fn batches_cover_every_tile() {
        let set = TileSet::synthesize(&tiny_cfg(), "T", "train").unwrap();
        let b = set.batches(4, Some(3));
        assert_eq!(b.iter().map(Vec::len).collect::<Vec<_>>(), vec![4, 2]);
        let mut all: Vec<usize> = b.concat();
        all.sort();
        assert_eq!(all, (0..6).collect::<Vec<_>>());
        let (x, y) = set.batch::<f32>(&b[1]);
        assert_eq!((x.shape(), y.shape()), (Shape::new(2, 3, 32, 32), Shape::new(2, 1, 32, 32)));
    }
}
