use rand::distributions::WeightedIndex;
use rand::prelude::Distribution;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{BuildingSpec, Stratum};
use crate::geometry::{Point, Polygon};
use crate::{Error, Result};

const ROOF_PALETTE: [[f64; 3]; 6] = [
    [0.66, 0.36, 0.26],
    [0.60, 0.60, 0.62],
    [0.36, 0.37, 0.41],
    [0.85, 0.84, 0.80],
    [0.30, 0.48, 0.50],
    [0.55, 0.47, 0.38],
];

const GROUND_PALETTE: [[f64; 3]; 3] = [[0.33, 0.42, 0.26], [0.45, 0.41, 0.33], [0.40, 0.40, 0.38]];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneSpec {
    /// Width and height of the scene in meters.
    pub extent_m: (f64, f64),
    pub building_count_range: (usize, usize),
    /// Mixture weights over low, mid, high and sky.
    pub height_distribution: [f64; 4],
    /// Footprint side length as a fraction of the shorter extent.
    pub footprint_frac: (f64, f64),
    /// Placement attempts per requested building.
    pub max_attempts: usize,
    /// Paved patches on the ground coloured like roofs.
    pub distractor_range: (usize, usize),
    pub seed: u64,
}

impl SceneSpec {
    pub fn new(extent_m: (f64, f64), seed: u64) -> Self {
        SceneSpec {
            extent_m,
            building_count_range: (2, 5),
            height_distribution: [0.25; 4],
            footprint_frac: (0.12, 0.32),
            max_attempts: 200,
            distractor_range: (0, 2),
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let (w, h) = self.extent_m;
        if !(w > 0.0 && h > 0.0 && w.is_finite() && h.is_finite()) {
            return Err(Error::Config(format!("scene extent must be positive, got {w} x {h}")));
        }
        let s: f64 = self.height_distribution.iter().sum();
        if self.height_distribution.iter().any(|&p| p < 0.0) || (s - 1.0).abs() > 1e-9 {
            return Err(Error::Config(format!("strata weights must be non-negative and sum to 1, got {s}")));
        }
        let (lo, hi) = self.building_count_range;
        if lo > hi {
            return Err(Error::Config(format!("building_count_range ({lo}, {hi}) is inverted")));
        }
        let (a, b) = self.footprint_frac;
        if !(a > 0.0 && a <= b && b < 1.0) {
            return Err(Error::Config(format!("footprint_frac ({a}, {b}) must satisfy 0 < lo <= hi < 1")));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroundPatch {
    pub polygon: Polygon,
    pub color: [f64; 3],
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Scene {
    pub extent_m: (f64, f64),
    pub buildings: Vec<BuildingSpec>,
    pub ground_color: [f64; 3],
    pub ground_seed: u64,
    pub patches: Vec<GroundPatch>,
}

fn jitter(rng: &mut ChaCha8Rng, c: [f64; 3], amount: f64) -> [f64; 3] {
    let shift = rng.gen_range(-amount..=amount);
    c.map(|v| (v + shift + rng.gen_range(-amount..=amount) * 0.5).clamp(0.02, 0.98))
}

fn random_rect(rng: &mut ChaCha8Rng, spec: &SceneSpec, margin: f64) -> Polygon {
    let (w, h) = spec.extent_m;
    let short = w.min(h);
    let (lo, hi) = spec.footprint_frac;
    let side = rng.gen_range(lo..=hi) * short;
    let aspect = rng.gen_range(0.6..1.6);
    let (bw, bh) = (side, (side * aspect).min(hi * short));
    let angle = rng.gen_range(0.0..std::f64::consts::FRAC_PI_2);
    let r = 0.5 * (bw * bw + bh * bh).sqrt();
    let cx = rng.gen_range((margin + r).min(w / 2.0)..=(w - margin - r).max(w / 2.0));
    let cy = rng.gen_range((margin + r).min(h / 2.0)..=(h - margin - r).max(h / 2.0));
    Polygon::rotated_rect(Point::new(cx, cy), bw, bh, angle)
}

/// Places non-overlapping rectangular buildings and samples their heights
/// from the stratum mixture.
pub fn generate_scene(spec: &SceneSpec) -> Result<Scene> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let (w, h) = spec.extent_m;
    let short = w.min(h);
    let (cmin, cmax) = spec.building_count_range;
    let requested = rng.gen_range(cmin..=cmax);
    let strata = WeightedIndex::new(spec.height_distribution).map_err(|e| Error::Config(e.to_string()))?;
    let gap = 0.02 * short;

    let mut footprints: Vec<Polygon> = Vec::with_capacity(requested);
    let budget = spec.max_attempts.max(1) * requested.max(1);
    let mut attempts = 0;
    while footprints.len() < requested && attempts < budget {
        attempts += 1;
        let cand = random_rect(&mut rng, spec, 0.02 * short);
        let grown = cand.inflate(gap);
        if footprints.iter().all(|f| !f.convex_overlaps(&grown)) {
            footprints.push(cand);
        }
    }
    if footprints.len() < cmin {
        return Err(Error::Placement { placed: footprints.len(), requested, attempts });
    }
    if footprints.len() < requested {
        log::debug!("placed {} of {} buildings", footprints.len(), requested);
    }

    let mut buildings = Vec::with_capacity(footprints.len());
    for footprint in footprints {
        let stratum = Stratum::ALL[strata.sample(&mut rng)];
        let (lo, hi) = stratum.height_range();
        let height_m = lo + (hi - lo) * (1.0 - rng.gen::<f64>());
        let base = ROOF_PALETTE[rng.gen_range(0..ROOF_PALETTE.len())];
        let roof_albedo = jitter(&mut rng, base, 0.05);
        let mut roof_details = Vec::new();
        if height_m > super::STRATA_THRESHOLDS_M[1] {
            let c = footprint.centroid();
            let (x0, y0, x1, y1) = footprint.bbox();
            let size = 0.25 * (x1 - x0).min(y1 - y0);
            for _ in 0..rng.gen_range(1..=3) {
                let p = Point::new(c.x + rng.gen_range(-0.2..0.2) * (x1 - x0), c.y + rng.gen_range(-0.2..0.2) * (y1 - y0));
                let d = Polygon::rotated_rect(p, size * rng.gen_range(0.5..1.0), size * rng.gen_range(0.5..1.0), rng.gen_range(0.0..1.5));
                if d.points.iter().all(|&q| footprint.contains(q)) {
                    roof_details.push(d);
                }
            }
        }
        buildings.push(BuildingSpec { footprint, height_m, roof_albedo, roof_details });
    }

    let base = GROUND_PALETTE[rng.gen_range(0..GROUND_PALETTE.len())];
    let ground_color = jitter(&mut rng, base, 0.04);
    let ground_seed = rng.gen();
    let (dmin, dmax) = spec.distractor_range;
    let n_patches = if dmax > 0 { rng.gen_range(dmin..=dmax) } else { 0 };
    let patches = (0..n_patches)
        .map(|_| {
            let c = Point::new(rng.gen_range(0.0..w), rng.gen_range(0.0..h));
            let len = rng.gen_range(0.3..1.0) * short;
            let wid = rng.gen_range(0.05..0.15) * short;
            let polygon = Polygon::rotated_rect(c, len, wid, rng.gen_range(0.0..std::f64::consts::PI));
            let base = ROOF_PALETTE[rng.gen_range(0..ROOF_PALETTE.len())];
            GroundPatch { polygon, color: jitter(&mut rng, base, 0.08) }
        })
        .collect();
    Ok(Scene { extent_m: spec.extent_m, buildings, ground_color, ground_seed, patches })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datagen::STRATA_THRESHOLDS_M;

    #[test]
    fn zero_count_gives_empty_scene() {
        let mut spec = SceneSpec::new((76.8, 76.8), 1);
        spec.building_count_range = (0, 0);
        assert!(generate_scene(&spec).unwrap().buildings.is_empty());
    }

    #[test]
    fn deterministic_for_seed() {
        let spec = SceneSpec::new((76.8, 76.8), 42);
        let a = serde_json::to_vec(&generate_scene(&spec).unwrap()).unwrap();
        let b = serde_json::to_vec(&generate_scene(&spec).unwrap()).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn sky_only_heights() {
        let mut spec = SceneSpec::new((76.8, 76.8), 9);
        spec.height_distribution = [0.0, 0.0, 0.0, 1.0];
        spec.building_count_range = (4, 6);
        let s = generate_scene(&spec).unwrap();
        assert!(!s.buildings.is_empty());
        assert!(s.buildings.iter().all(|b| b.height_m > STRATA_THRESHOLDS_M[2]));
    }

    #[test]
    fn footprints_are_disjoint_and_simple() {
        for seed in 0..20 {
            let s = generate_scene(&SceneSpec::new((40.0, 40.0), seed)).unwrap();
            for (i, a) in s.buildings.iter().enumerate() {
                assert!(a.footprint.is_simple());
                for b in &s.buildings[i + 1..] {
                    assert!(!a.footprint.convex_overlaps(&b.footprint));
                }
            }
        }
    }

    #[test]
    fn infeasible_density_rejected() {
        let mut spec = SceneSpec::new((10.0, 10.0), 2);
        spec.building_count_range = (40, 40);
        spec.footprint_frac = (0.4, 0.5);
        spec.max_attempts = 5;
        assert!(matches!(generate_scene(&spec), Err(Error::Placement { .. })));
    }
}
