use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{
    generate_scene, rasterize_mask, render_tile, LabelKind, RenderOptions, SceneSpec, Stratum, TilePair, ViewGeometry,
    STRATA_THRESHOLDS_M,
};
use crate::error::IoContext;
use crate::geometry::Point;
use crate::nn::hex;
use crate::{Error, Result};

pub const SCHEMA_VERSION: u32 = 1;
pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SceneConfig {
    pub building_count_range: (usize, usize),
    pub footprint_frac: (f64, f64),
    pub max_attempts: usize,
    pub distractor_range: (usize, usize),
}

impl Default for SceneConfig {
    fn default() -> Self {
        SceneConfig { building_count_range: (2, 5), footprint_frac: (0.12, 0.32), max_attempts: 200, distractor_range: (0, 2) }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RoleConfig {
    pub train: usize,
    pub val: usize,
    pub label_kind: LabelKind,
    /// Share of tiles per stratum (low, mid, high, sky).
    pub strata_weights: [f64; 4],
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DatasetConfig {
    pub seed: u64,
    pub tile_size: usize,
    pub gsd_cm: Vec<u32>,
    pub view: ViewGeometry,
    pub render: RenderOptions,
    pub scene: SceneConfig,
    #[serde(rename = "T")]
    pub t: RoleConfig,
    #[serde(rename = "S")]
    pub s: RoleConfig,
    #[serde(rename = "Ev")]
    pub ev: RoleConfig,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        let mixed = [0.4, 0.3, 0.2, 0.1];
        DatasetConfig {
            seed: 0,
            tile_size: 256,
            gsd_cm: super::GSD_CM.to_vec(),
            view: ViewGeometry::default(),
            render: RenderOptions { noise_std: 0.02, ..Default::default() },
            scene: SceneConfig::default(),
            t: RoleConfig { train: 600, val: 60, label_kind: LabelKind::Noisy, strata_weights: mixed },
            s: RoleConfig { train: 120, val: 40, label_kind: LabelKind::Clean, strata_weights: mixed },
            ev: RoleConfig { train: 0, val: 60, label_kind: LabelKind::Clean, strata_weights: [0.25; 4] },
        }
    }
}

impl DatasetConfig {
    pub fn validate(&self) -> Result<()> {
        self.view.validate()?;
        if self.tile_size < 8 {
            return Err(Error::Config(format!("tile_size {} too small", self.tile_size)));
        }
        if self.gsd_cm.is_empty() || self.gsd_cm.contains(&0) {
            return Err(Error::Config("gsd_cm must list positive resolutions".into()));
        }
        if self.ev.train > 0 {
            return Err(Error::Settings("the Ev dataset has no training split".into()));
        }
        for (name, r) in self.roles() {
            let s: f64 = r.strata_weights.iter().sum();
            if r.strata_weights.iter().any(|&w| w < 0.0) || (s - 1.0).abs() > 1e-9 {
                return Err(Error::Config(format!("{name}: strata weights must be non-negative and sum to 1")));
            }
        }
        Ok(())
    }

    pub fn roles(&self) -> [(&'static str, &RoleConfig); 3] {
        [("T", &self.t), ("S", &self.s), ("Ev", &self.ev)]
    }

    pub fn hash(&self) -> String {
        let bytes = serde_json::to_vec(self).expect("config serializes");
        hex(&Sha256::digest(bytes))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TileMeta {
    pub id: String,
    pub split: String,
    pub stratum: Option<Stratum>,
    pub max_height_m: Option<f64>,
    pub label_kind: LabelKind,
    pub gsd_cm: u32,
    /// Label kind of the paired mask written under `masks_<kind>/`, if any.
    pub counterpart: Option<LabelKind>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GeneratorInfo {
    pub seed: u64,
    pub config_hash: String,
    pub tool: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub schema_version: u32,
    pub role: String,
    pub tile_size: usize,
    pub gsd_cm: Vec<u32>,
    pub splits: BTreeMap<String, Vec<String>>,
    pub tiles: Vec<TileMeta>,
    pub strata_thresholds_m: [f64; 3],
    pub view: Option<ViewGeometry>,
    pub generator: GeneratorInfo,
}

impl Manifest {
    pub fn load(root: &Path) -> Result<Manifest> {
        let path = root.join(MANIFEST_FILE);
        let text = fs::read_to_string(&path).at(&path)?;
        Ok(serde_json::from_str(&text)?)
    }

    pub fn save(&self, root: &Path) -> Result<()> {
        let path = root.join(MANIFEST_FILE);
        let tmp = root.join(".manifest.json.tmp");
        let mut text = serde_json::to_string_pretty(self)?;
        text.push('\n');
        fs::write(&tmp, text).at(&tmp)?;
        fs::rename(&tmp, &path).at(&path)
    }

    pub fn split(&self, name: &str) -> impl Iterator<Item = &TileMeta> + '_ {
        let name = name.to_string();
        self.tiles.iter().filter(move |t| t.split == name)
    }

    /// Checks id uniqueness, split consistency and that every referenced file exists.
    pub fn verify(&self, root: &Path) -> Result<()> {
        let mut seen = std::collections::HashSet::new();
        for t in &self.tiles {
            if !seen.insert(&t.id) {
                return Err(Error::Config(format!("duplicate tile id {}", t.id)));
            }
            let mut files = vec![image_path(root, t), mask_path(root, t, None)];
            if let Some(k) = t.counterpart {
                files.push(mask_path(root, t, Some(k)));
            }
            if let Some(missing) = files.iter().find(|p| !p.exists()) {
                return Err(Error::Config(format!("missing tile file {}", missing.display())));
            }
        }
        for (split, ids) in &self.splits {
            for id in ids {
                if !self.tiles.iter().any(|t| &t.id == id && &t.split == split) {
                    return Err(Error::Config(format!("split {split} references unknown tile {id}")));
                }
            }
        }
        Ok(())
    }
}

pub fn image_path(root: &Path, t: &TileMeta) -> PathBuf {
    root.join(&t.split).join("images").join(format!("{}.png", t.id))
}

/// Primary mask when `kind` is `None`, else the counterpart directory for `kind`.
pub fn mask_path(root: &Path, t: &TileMeta, kind: Option<LabelKind>) -> PathBuf {
    let dir = match kind {
        None => "masks".to_string(),
        Some(k) => format!("masks_{}", k.name()),
    };
    root.join(&t.split).join(dir).join(format!("{}.png", t.id))
}

/// The three datasets written by [`build_dataset`].
#[derive(Clone, Debug)]
pub struct DatasetTriple {
    pub t: Manifest,
    pub s: Manifest,
    pub ev: Manifest,
}

/// Largest-remainder apportionment of `n` items over `weights`.
pub(crate) fn apportion(n: usize, weights: &[f64]) -> Vec<usize> {
    let total: f64 = weights.iter().sum();
    let quotas: Vec<f64> = weights.iter().map(|w| w / total * n as f64).collect();
    let mut counts: Vec<usize> = quotas.iter().map(|q| q.floor() as usize).collect();
    let mut rest: Vec<usize> = (0..weights.len()).collect();
    rest.sort_by(|&a, &b| (quotas[b] - quotas[b].floor()).total_cmp(&(quotas[a] - quotas[a].floor())).then(a.cmp(&b)));
    let mut left = n - counts.iter().sum::<usize>();
    for i in rest {
        if left == 0 {
            break;
        }
        counts[i] += 1;
        left -= 1;
    }
    counts
}

pub(crate) fn tile_seed(seed: u64, role: usize, split: usize, index: usize) -> u64 {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update([role as u8, split as u8]);
    h.update((index as u64).to_le_bytes());
    let d = h.finalize();
    u64::from_le_bytes(d[..8].try_into().expect("8 bytes"))
}

/// Renders one tile with both label kinds; the returned pair holds the
/// `label_kind` mask and the second value is its counterpart.
pub fn synth_tile(cfg: &DatasetConfig, seed: u64, stratum: Stratum, gsd_cm: u32, label_kind: LabelKind) -> Result<(TilePair, Vec<u8>)> {
    let gsd = gsd_cm as f64 / 100.0;
    let size = cfg.tile_size;
    let extent = size as f64 * gsd;
    let mut weights = [0.0; 4];
    weights[stratum.index()] = 1.0;
    let spec = SceneSpec {
        extent_m: (extent, extent),
        building_count_range: cfg.scene.building_count_range,
        height_distribution: weights,
        footprint_frac: cfg.scene.footprint_frac,
        max_attempts: cfg.scene.max_attempts,
        distractor_range: cfg.scene.distractor_range,
        seed,
    };
    let scene = generate_scene(&spec)?;
    let origin = Point::new(0.0, 0.0);
    let opts = RenderOptions { noise_seed: seed ^ 0x5eed, ..cfg.render };
    let rendered = render_tile(&scene, &cfg.view, gsd, origin, size, &opts);
    let footprints: Vec<_> = scene.buildings.iter().map(|b| b.footprint.clone()).collect();
    let roofs: Vec<_> = scene.buildings.iter().map(|b| b.roof(&cfg.view)).collect();
    let noisy = rasterize_mask(&footprints, origin, size, gsd);
    let clean = rasterize_mask(&roofs, origin, size, gsd);
    let (mask, other) = match label_kind {
        LabelKind::Noisy => (noisy, clean),
        LabelKind::Clean => (clean, noisy),
    };
    let max_height_m = scene.buildings.iter().map(|b| b.height_m).fold(None, |m: Option<f64>, h| Some(m.map_or(h, |m| m.max(h))));
    let pair = TilePair { size, image: rendered.image, mask, gsd_m: gsd, stratum: Some(stratum), max_height_m, label_kind };
    Ok((pair, other))
}

pub(crate) fn write_png_rgb(path: &Path, size: usize, chw: &[f32]) -> Result<()> {
    let n = size * size;
    let mut buf = Vec::with_capacity(3 * n);
    for i in 0..n {
        for c in 0..3 {
            buf.push((chw[c * n + i].clamp(0.0, 1.0) * 255.0).round() as u8);
        }
    }
    image::save_buffer(path, &buf, size as u32, size as u32, image::ExtendedColorType::Rgb8)
        .map_err(|source| Error::Image { path: path.to_path_buf(), source })
}

pub(crate) fn write_png_mask(path: &Path, width: usize, height: usize, mask: &[u8]) -> Result<()> {
    let buf: Vec<u8> = mask.iter().map(|&v| if v > 0 { 255 } else { 0 }).collect();
    image::save_buffer(path, &buf, width as u32, height as u32, image::ExtendedColorType::L8)
        .map_err(|source| Error::Image { path: path.to_path_buf(), source })
}

/// One generated tile with its metadata and both masks, before it is written.
#[derive(Clone, Debug)]
pub struct SynthTile {
    pub meta: TileMeta,
    pub pair: TilePair,
    pub counterpart: Vec<u8>,
}

fn role_index(name: &str) -> Result<usize> {
    ["T", "S", "Ev"].iter().position(|&r| r == name).ok_or_else(|| Error::Config(format!("unknown dataset role {name:?}")))
}

/// Generates every tile of one role (`T`, `S` or `Ev`) in memory, exactly as
/// [`build_dataset`] would write it.
pub fn synthesize_role(cfg: &DatasetConfig, name: &str) -> Result<Vec<SynthTile>> {
    cfg.validate()?;
    let role_idx = role_index(name)?;
    let rc = cfg.roles()[role_idx].1;
    let mut jobs = Vec::new();
    for (split_idx, (split, count)) in [("train", rc.train), ("val", rc.val)].into_iter().enumerate() {
        let cells: Vec<(Stratum, u32)> = Stratum::ALL.iter().flat_map(|&s| cfg.gsd_cm.iter().map(move |&g| (s, g))).collect();
        let weights: Vec<f64> = cells.iter().map(|(s, _)| rc.strata_weights[s.index()] / cfg.gsd_cm.len() as f64).collect();
        let counts = apportion(count, &weights);
        let mut index = 0;
        for (cell, &k) in cells.iter().zip(&counts) {
            for _ in 0..k {
                jobs.push((split, split_idx, index, cell.0, cell.1));
                index += 1;
            }
        }
    }
    jobs.par_iter()
        .map(|&(split, split_idx, index, stratum, gsd_cm)| -> Result<SynthTile> {
            let seed = tile_seed(cfg.seed, role_idx, split_idx, index);
            let (pair, counterpart) = synth_tile(cfg, seed, stratum, gsd_cm, rc.label_kind)?;
            let meta = TileMeta {
                id: format!("{}-{}-{:05}", name.to_lowercase(), split, index),
                split: split.to_string(),
                stratum: Some(stratum),
                max_height_m: pair.max_height_m,
                label_kind: rc.label_kind,
                gsd_cm,
                counterpart: Some(rc.label_kind.other()),
            };
            Ok(SynthTile { meta, pair, counterpart })
        })
        .collect()
}

fn build_role(cfg: &DatasetConfig, name: &str, root: &Path, force: bool) -> Result<Manifest> {
    if root.join(MANIFEST_FILE).exists() && !force {
        return Err(Error::ManifestExists(root.join(MANIFEST_FILE)));
    }
    let rc = cfg.roles()[role_index(name)?].1;
    for split in ["train", "val"] {
        for sub in ["images".to_string(), "masks".to_string(), format!("masks_{}", rc.label_kind.other().name())] {
            let d = root.join(split).join(sub);
            fs::create_dir_all(&d).at(&d)?;
        }
    }
    let generated = synthesize_role(cfg, name)?;
    generated.par_iter().try_for_each(|t| -> Result<()> {
        write_png_rgb(&image_path(root, &t.meta), t.pair.size, &t.pair.image)?;
        write_png_mask(&mask_path(root, &t.meta, None), t.pair.size, t.pair.size, &t.pair.mask)?;
        write_png_mask(&mask_path(root, &t.meta, t.meta.counterpart), t.pair.size, t.pair.size, &t.counterpart)
    })?;
    let tiles: Vec<TileMeta> = generated.into_iter().map(|t| t.meta).collect();
    let mut splits = BTreeMap::new();
    for t in &tiles {
        splits.entry(t.split.clone()).or_insert_with(Vec::new).push(t.id.clone());
    }
    let manifest = Manifest {
        schema_version: SCHEMA_VERSION,
        role: name.to_string(),
        tile_size: cfg.tile_size,
        gsd_cm: cfg.gsd_cm.clone(),
        splits,
        tiles,
        strata_thresholds_m: STRATA_THRESHOLDS_M,
        view: Some(cfg.view),
        generator: GeneratorInfo { seed: cfg.seed, config_hash: cfg.hash(), tool: "offnadir-datagen".into() },
    };
    manifest.save(root)?;
    log::info!("wrote {} tiles to {}", manifest.tiles.len(), root.display());
    Ok(manifest)
}

/// Generates the noisy-label T, clean-label S and stratified clean-label Ev
/// datasets under `out/{T,S,Ev}`.
pub fn build_dataset(cfg: &DatasetConfig, out: &Path, force: bool) -> Result<DatasetTriple> {
    cfg.validate()?;
    let t = build_role(cfg, "T", &out.join("T"), force)?;
    let s = build_role(cfg, "S", &out.join("S"), force)?;
    let ev = build_role(cfg, "Ev", &out.join("Ev"), force)?;
    Ok(DatasetTriple { t, s, ev })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn apportion_is_exact() {
        assert_eq!(apportion(60, &[0.25; 4]), vec![15; 4]);
        assert_eq!(apportion(10, &[0.4, 0.3, 0.2, 0.1]), vec![4, 3, 2, 1]);
        assert_eq!(apportion(7, &[1.0, 1.0, 1.0]).iter().sum::<usize>(), 7);
    }

    #[test]
    fn tile_seeds_differ() {
        assert_ne!(tile_seed(1, 0, 0, 0), tile_seed(1, 0, 0, 1));
        assert_ne!(tile_seed(1, 0, 0, 0), tile_seed(1, 1, 0, 0));
        assert_eq!(tile_seed(1, 2, 1, 5), tile_seed(1, 2, 1, 5));
    }
}
