//! Synthetic off-nadir scenes, label rasterization and dataset directories.
//!
//! World coordinates are meters with `y` pointing down the image rows, so a
//! tile whose origin is `o` maps world point `p` to pixel `(p - o) / gsd`.

mod dataset;
mod raster;
mod render;
mod scene;
mod stats;
mod tiling;

pub use dataset::{
    build_dataset, synthesize_role, image_path, mask_path, synth_tile, DatasetConfig, DatasetTriple, GeneratorInfo, Manifest, RoleConfig, SceneConfig, SynthTile,
    TileMeta, MANIFEST_FILE, SCHEMA_VERSION,
};
pub(crate) use stats::read_mask;
pub use raster::{displacement_px, project_roof, rasterize_mask, rasterize_rings};
pub use render::{render_tile, Layer, RenderOptions, Rendered};
pub use scene::{generate_scene, GroundPatch, Scene, SceneSpec};
pub use stats::{mask_iou, misalignment_stats, MisalignmentRow};
pub use tiling::{read_world_file, tile_raster, TileRasterOptions, WorldFile};

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::geometry::Polygon;

/// Upper bounds (m) of the low, mid and high classes; anything taller is sky.
pub const STRATA_THRESHOLDS_M: [f64; 3] = [12.0, 30.0, 100.0];
/// Height range sampled for each stratum, lowest to highest.
pub const STRATA_HEIGHT_RANGES_M: [(f64, f64); 4] = [(3.0, 12.0), (12.0, 30.0), (30.0, 100.0), (100.0, 160.0)];
/// Ground sample distances in centimeters.
pub const GSD_CM: [u32; 3] = [30, 60, 120];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stratum {
    Low,
    Mid,
    High,
    Sky,
}

impl Stratum {
    pub const ALL: [Stratum; 4] = [Stratum::Low, Stratum::Mid, Stratum::High, Stratum::Sky];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn of_height(h: f64) -> Stratum {
        match STRATA_THRESHOLDS_M.iter().position(|&t| h <= t) {
            Some(0) => Stratum::Low,
            Some(1) => Stratum::Mid,
            Some(2) => Stratum::High,
            _ => Stratum::Sky,
        }
    }

    pub fn height_range(self) -> (f64, f64) {
        STRATA_HEIGHT_RANGES_M[self.index()]
    }

    pub fn name(self) -> &'static str {
        match self {
            Stratum::Low => "low",
            Stratum::Mid => "mid",
            Stratum::High => "high",
            Stratum::Sky => "sky",
        }
    }
}

impl fmt::Display for Stratum {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Stratum {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        Stratum::ALL.into_iter().find(|k| k.name() == s).ok_or_else(|| format!("unknown stratum {s:?}"))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LabelKind {
    /// Ground footprints, misaligned with displaced roofs.
    Noisy,
    /// Roof outlines as seen by the sensor.
    Clean,
}

impl LabelKind {
    pub fn other(self) -> LabelKind {
        match self {
            LabelKind::Noisy => LabelKind::Clean,
            LabelKind::Clean => LabelKind::Noisy,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            LabelKind::Noisy => "noisy",
            LabelKind::Clean => "clean",
        }
    }
}

/// Off-nadir viewing geometry. Roofs move by `h * off_nadir_tan` meters in
/// direction `(cos azimuth, sin azimuth)`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ViewGeometry {
    pub off_nadir_tan: f64,
    pub azimuth_rad: f64,
}

impl ViewGeometry {
    pub fn nadir() -> Self {
        ViewGeometry { off_nadir_tan: 0.0, azimuth_rad: 0.0 }
    }

    pub fn validate(&self) -> crate::Result<()> {
        if !(self.off_nadir_tan >= 0.0 && self.off_nadir_tan.is_finite()) {
            return Err(crate::Error::Config(format!("off_nadir_tan must be finite and >= 0, got {}", self.off_nadir_tan)));
        }
        if !(0.0..std::f64::consts::TAU).contains(&self.azimuth_rad) {
            return Err(crate::Error::Config(format!("azimuth_rad must lie in [0, 2pi), got {}", self.azimuth_rad)));
        }
        Ok(())
    }
}

impl Default for ViewGeometry {
    fn default() -> Self {
        ViewGeometry { off_nadir_tan: 0.25, azimuth_rad: std::f64::consts::FRAC_PI_4 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BuildingSpec {
    /// Ground footprint in world meters.
    pub footprint: Polygon,
    pub height_m: f64,
    pub roof_albedo: [f64; 3],
    /// Small rooftop structures (plant rooms, stair cores) in world meters, on the footprint frame.
    #[serde(default)]
    pub roof_details: Vec<Polygon>,
}

impl BuildingSpec {
    /// Roof outline in world meters under `view`.
    pub fn roof(&self, view: &ViewGeometry) -> Polygon {
        let d = self.height_m * view.off_nadir_tan;
        self.footprint.translate(d * view.azimuth_rad.cos(), d * view.azimuth_rad.sin())
    }
}

/// One image with its label and metadata, values in `[0, 1]`, channel-major.
#[derive(Clone, Debug, PartialEq)]
pub struct TilePair {
    pub size: usize,
    pub image: Vec<f32>,
    pub mask: Vec<u8>,
    pub gsd_m: f64,
    pub stratum: Option<Stratum>,
    pub max_height_m: Option<f64>,
    pub label_kind: LabelKind,
}
