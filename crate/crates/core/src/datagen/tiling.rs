use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};

use super::dataset::{write_png_mask, write_png_rgb};
use super::{image_path, mask_path, rasterize_rings, GeneratorInfo, LabelKind, Manifest, TileMeta, SCHEMA_VERSION, STRATA_THRESHOLDS_M};
use crate::error::IoContext;
use crate::geometry::{Point, Polygon};
use crate::nn::hex;
use crate::{Error, Result};

/// Six-parameter affine georeference from an ESRI world file; `c`/`f` locate
/// the centre of the top-left pixel.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct WorldFile {
    pub a: f64,
    pub d: f64,
    pub b: f64,
    pub e: f64,
    pub c: f64,
    pub f: f64,
}

impl WorldFile {
    /// World coordinates to continuous pixel coordinates (pixel corners at integers).
    pub fn to_pixel(&self, p: Point) -> Point {
        Point::new((p.x - self.c) / self.a + 0.5, (p.y - self.f) / self.e + 0.5)
    }
}

fn sidecar_candidates(raster: &Path) -> Vec<PathBuf> {
    let ext = raster.extension().and_then(|e| e.to_str()).unwrap_or("").to_lowercase();
    let mut names = vec!["wld".to_string()];
    if ext.len() >= 2 {
        let b = ext.as_bytes();
        names.insert(0, format!("{}{}w", b[0] as char, b[ext.len() - 1] as char));
    }
    names.into_iter().map(|e| raster.with_extension(e)).collect()
}

pub fn read_world_file(raster: &Path) -> Result<WorldFile> {
    let path = sidecar_candidates(raster)
        .into_iter()
        .find(|p| p.exists())
        .ok_or_else(|| Error::FrameMismatch(format!("{} has no world file sidecar", raster.display())))?;
    let text = fs::read_to_string(&path).at(&path)?;
    let v: Vec<f64> = text
        .split_whitespace()
        .map(|t| t.parse::<f64>())
        .collect::<std::result::Result<_, _>>()
        .map_err(|e| Error::FrameMismatch(format!("{}: {e}", path.display())))?;
    if v.len() != 6 {
        return Err(Error::FrameMismatch(format!("{}: expected 6 values, found {}", path.display(), v.len())));
    }
    Ok(WorldFile { a: v[0], d: v[1], b: v[2], e: v[3], c: v[4], f: v[5] })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TileRasterOptions {
    pub tile_size: usize,
    pub split: String,
    pub label_kind: LabelKind,
    pub role: String,
    pub force: bool,
}

impl Default for TileRasterOptions {
    fn default() -> Self {
        TileRasterOptions { tile_size: 256, split: "train".into(), label_kind: LabelKind::Noisy, role: "T".into(), force: false }
    }
}

fn ring(coords: &Value) -> Option<Polygon> {
    let pts = coords
        .as_array()?
        .iter()
        .map(|c| {
            let c = c.as_array()?;
            Some(Point::new(c.first()?.as_f64()?, c.get(1)?.as_f64()?))
        })
        .collect::<Option<Vec<_>>>()?;
    Some(Polygon::new(pts))
}

/// Features as lists of rings (outer boundary then holes).
fn read_features(path: &Path) -> Result<Vec<Vec<Polygon>>> {
    let text = fs::read_to_string(path).at(path)?;
    let doc: Value = serde_json::from_str(&text)?;
    let bad = |what: &str| Error::Config(format!("{}: {what}", path.display()));
    let features = match doc.get("type").and_then(Value::as_str) {
        Some("FeatureCollection") => doc.get("features").and_then(Value::as_array).cloned().ok_or_else(|| bad("missing features"))?,
        Some("Feature") => vec![doc.clone()],
        _ => return Err(bad("expected a GeoJSON Feature or FeatureCollection")),
    };
    let mut out = Vec::new();
    for f in &features {
        let Some(g) = f.get("geometry").filter(|g| !g.is_null()) else { continue };
        let coords = g.get("coordinates").ok_or_else(|| bad("geometry without coordinates"))?;
        let polys: Vec<&Value> = match g.get("type").and_then(Value::as_str) {
            Some("Polygon") => vec![coords],
            Some("MultiPolygon") => coords.as_array().ok_or_else(|| bad("malformed MultiPolygon"))?.iter().collect(),
            Some(other) => {
                log::warn!("{}: ignoring {other} geometry", path.display());
                continue;
            }
            None => return Err(bad("geometry without type")),
        };
        for p in polys {
            let rings = p
                .as_array()
                .ok_or_else(|| bad("malformed polygon"))?
                .iter()
                .map(|r| ring(r).ok_or_else(|| bad("malformed ring")))
                .collect::<Result<Vec<_>>>()?;
            out.push(rings);
        }
    }
    Ok(out)
}

/// Cuts a georeferenced raster into square tiles and burns the polygon file
/// into matching masks with the pixel-centre rule.
pub fn tile_raster(raster_path: &Path, polygon_file: &Path, gsd_m: f64, out_dir: &Path, opts: &TileRasterOptions) -> Result<Manifest> {
    let wf = read_world_file(raster_path)?;
    if wf.b != 0.0 || wf.d != 0.0 {
        return Err(Error::FrameMismatch("rotated rasters are not supported".into()));
    }
    let rel = |x: f64| (x.abs() - gsd_m).abs() / gsd_m;
    if rel(wf.a) > 1e-6 || rel(wf.e) > 1e-6 {
        return Err(Error::FrameMismatch(format!("raster pixel size ({}, {}) does not match gsd {gsd_m}", wf.a, wf.e)));
    }
    let img = image::open(raster_path).map_err(|source| Error::Image { path: raster_path.to_path_buf(), source })?.into_rgb8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let ts = opts.tile_size;
    let (nx, ny) = (w / ts, h / ts);
    if nx * ts != w || ny * ts != h {
        log::warn!("raster {}x{} is not a multiple of {ts}; partial edge tiles dropped", w, h);
    }

    let features = read_features(polygon_file)?;
    let px: Vec<Vec<Polygon>> = features.iter().map(|rings| rings.iter().map(|r| r.map(|p| wf.to_pixel(p))).collect()).collect();
    if features.is_empty() {
        log::warn!("{} contains no polygon features; masks will be empty", polygon_file.display());
    } else {
        let hits = px.iter().any(|rings| {
            let (x0, y0, x1, y1) = rings[0].bbox();
            x1 > 0.0 && y1 > 0.0 && x0 < w as f64 && y0 < h as f64
        });
        if !hits {
            return Err(Error::FrameMismatch(format!(
                "none of the {} polygons overlaps the raster extent; check that both use the same coordinate frame",
                features.len()
            )));
        }
    }

    let manifest_path = out_dir.join(super::MANIFEST_FILE);
    if manifest_path.exists() && !opts.force {
        return Err(Error::ManifestExists(manifest_path));
    }
    let mut full = vec![0u8; w * h];
    for rings in &px {
        rasterize_rings(rings, w, h, &mut full);
    }
    for sub in ["images", "masks"] {
        let d = out_dir.join(&opts.split).join(sub);
        fs::create_dir_all(&d).at(&d)?;
    }
    let gsd_cm = (gsd_m * 100.0).round() as u32;
    let mut tiles = Vec::new();
    for ty in 0..ny {
        for tx in 0..nx {
            let meta = TileMeta {
                id: format!("r{ty:03}c{tx:03}"),
                split: opts.split.clone(),
                stratum: None,
                max_height_m: None,
                label_kind: opts.label_kind,
                gsd_cm,
                counterpart: None,
            };
            let n = ts * ts;
            let mut chw = vec![0f32; 3 * n];
            let mut mask = vec![0u8; n];
            for r in 0..ts {
                for c in 0..ts {
                    let (gx, gy) = (tx * ts + c, ty * ts + r);
                    let p = img.get_pixel(gx as u32, gy as u32).0;
                    for ch in 0..3 {
                        chw[ch * n + r * ts + c] = p[ch] as f32 / 255.0;
                    }
                    mask[r * ts + c] = full[gy * w + gx];
                }
            }
            write_png_rgb(&image_path(out_dir, &meta), ts, &chw)?;
            write_png_mask(&mask_path(out_dir, &meta, None), ts, ts, &mask)?;
            tiles.push(meta);
        }
    }
    let mut h = Sha256::new();
    h.update(raster_path.to_string_lossy().as_bytes());
    h.update(polygon_file.to_string_lossy().as_bytes());
    h.update(serde_json::to_vec(opts)?);
    h.update(gsd_m.to_le_bytes());
    let mut splits = BTreeMap::new();
    splits.insert(opts.split.clone(), tiles.iter().map(|t| t.id.clone()).collect());
    let manifest = Manifest {
        schema_version: SCHEMA_VERSION,
        role: opts.role.clone(),
        tile_size: ts,
        gsd_cm: vec![gsd_cm],
        splits,
        tiles,
        strata_thresholds_m: STRATA_THRESHOLDS_M,
        view: None,
        generator: GeneratorInfo { seed: 0, config_hash: hex(&h.finalize()), tool: "offnadir-tile-raster".into() },
    };
    manifest.save(out_dir)?;
    Ok(manifest)
}
