use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{rasterize_rings, Scene, ViewGeometry};
use crate::geometry::{convex_hull, Point, Polygon};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RenderOptions {
    /// Shadow length per meter of height, in meters.
    pub shadow_tan: f64,
    pub sun_azimuth_rad: f64,
    /// Standard deviation of additive Gaussian sensor noise.
    pub noise_std: f64,
    pub noise_seed: u64,
}

impl Default for RenderOptions {
    fn default() -> Self {
        RenderOptions { shadow_tan: 0.3, sun_azimuth_rad: 2.6, noise_std: 0.0, noise_seed: 0 }
    }
}

/// What each pixel shows after rendering.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
#[repr(u8)]
pub enum Layer {
    Ground = 0,
    Shadow = 1,
    Facade = 2,
    Roof = 3,
    RoofDetail = 4,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Rendered {
    pub size: usize,
    /// Channel-major RGB in `[0, 1]`.
    pub image: Vec<f32>,
    pub layers: Vec<Layer>,
}

impl Rendered {
    pub fn rgb(&self, idx: usize) -> [f32; 3] {
        let n = self.size * self.size;
        [self.image[idx], self.image[n + idx], self.image[2 * n + idx]]
    }

    pub fn count(&self, layer: Layer) -> usize {
        self.layers.iter().filter(|&&l| l == layer).count()
    }
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

fn lattice(seed: u64, x: i64, y: i64) -> f64 {
    let h = splitmix(seed ^ splitmix((x as u64).wrapping_mul(0x1f1f_1f1f) ^ (y as u64).rotate_left(29)));
    (h >> 11) as f64 / (1u64 << 53) as f64
}

/// Bilinear value noise in `[0, 1)` with lattice spacing `cell`.
fn value_noise(seed: u64, x: f64, y: f64, cell: f64) -> f64 {
    let (u, v) = (x / cell, y / cell);
    let (x0, y0) = (u.floor(), v.floor());
    let (fx, fy) = (u - x0, v - y0);
    let (sx, sy) = (fx * fx * (3.0 - 2.0 * fx), fy * fy * (3.0 - 2.0 * fy));
    let (i, j) = (x0 as i64, y0 as i64);
    let a = lattice(seed, i, j);
    let b = lattice(seed, i + 1, j);
    let c = lattice(seed, i, j + 1);
    let d = lattice(seed, i + 1, j + 1);
    let top = a + (b - a) * sx;
    let bot = c + (d - c) * sx;
    top + (bot - top) * sy
}

fn to_px(poly: &Polygon, origin: Point, gsd: f64) -> Polygon {
    poly.map(|p| Point::new((p.x - origin.x) / gsd, (p.y - origin.y) / gsd))
}

fn fill(poly: &Polygon, size: usize) -> Vec<u8> {
    let mut m = vec![0u8; size * size];
    rasterize_rings(std::slice::from_ref(poly), size, size, &mut m);
    m
}

/// Draws the scene as seen from `view` at resolution `gsd_m`: textured ground
/// and paved patches, then per building in ascending height a cast shadow,
/// the facade swept between footprint and roof, and the flat roof.
pub fn render_tile(scene: &Scene, view: &ViewGeometry, gsd_m: f64, tile_origin: Point, size: usize, opts: &RenderOptions) -> Rendered {
    let n = size * size;
    let mut rgb = vec![[0f64; 3]; n];
    let mut layers = vec![Layer::Ground; n];
    let seed = scene.ground_seed;

    for r in 0..size {
        for c in 0..size {
            // texture in world units so it does not depend on the resolution's pixel grid
            let wx = tile_origin.x + (c as f64 + 0.5) * gsd_m;
            let wy = tile_origin.y + (r as f64 + 0.5) * gsd_m;
            let coarse = value_noise(seed, wx, wy, 6.0) - 0.5;
            let fine = value_noise(seed ^ 0xabcdef, wx, wy, 1.3) - 0.5;
            let t = 1.0 + 0.35 * coarse + 0.15 * fine;
            rgb[r * size + c] = scene.ground_color.map(|v| v * t);
        }
    }
    for patch in &scene.patches {
        let m = fill(&to_px(&patch.polygon, tile_origin, gsd_m), size);
        for (i, _) in m.iter().enumerate().filter(|(_, &v)| v == 1) {
            let t = 1.0 + 0.06 * (lattice(seed ^ 0x77, i as i64, 3) - 0.5);
            rgb[i] = patch.color.map(|v| v * t);
        }
    }

    let mut order: Vec<usize> = (0..scene.buildings.len()).collect();
    order.sort_by(|&a, &b| scene.buildings[a].height_m.total_cmp(&scene.buildings[b].height_m));
    let (fdx, fdy) = super::displacement_px(1.0, view, gsd_m);
    let (sdx, sdy) = (opts.sun_azimuth_rad.cos() * opts.shadow_tan / gsd_m, opts.sun_azimuth_rad.sin() * opts.shadow_tan / gsd_m);

    for &bi in &order {
        let b = &scene.buildings[bi];
        let h = b.height_m;
        let fp = to_px(&b.footprint, tile_origin, gsd_m);
        let roof = fp.translate(fdx * h, fdy * h);

        let mut shadow_pts = fp.points.clone();
        shadow_pts.extend(fp.translate(sdx * h, sdy * h).points);
        let shadow = fill(&convex_hull(&shadow_pts), size);
        for i in (0..n).filter(|&i| shadow[i] == 1) {
            rgb[i] = rgb[i].map(|v| v * 0.55);
            if layers[i] == Layer::Ground {
                layers[i] = Layer::Shadow;
            }
        }

        let roof_mask = fill(&roof, size);
        let mut sweep = fp.points.clone();
        sweep.extend(roof.points.iter().copied());
        let hull = fill(&convex_hull(&sweep), size);
        let (ux, uy) = {
            let l = (fdx * fdx + fdy * fdy).sqrt().max(1e-12);
            (fdx / l, fdy / l)
        };
        // floors every 3 m of height, projected onto the sweep direction
        let floor_px = 3.0 * view.off_nadir_tan / gsd_m;
        for i in (0..n).filter(|&i| hull[i] == 1 && roof_mask[i] == 0) {
            let (x, y) = ((i % size) as f64 + 0.5, (i / size) as f64 + 0.5);
            let along = x * ux + y * uy;
            let band = if floor_px > 1.5 && (along / floor_px).fract() < 0.35 { 0.8 } else { 1.0 };
            rgb[i] = b.roof_albedo.map(|v| v * 0.55 * band);
            layers[i] = Layer::Facade;
        }

        for i in (0..n).filter(|&i| roof_mask[i] == 1) {
            rgb[i] = b.roof_albedo;
            layers[i] = Layer::Roof;
        }
        for d in &b.roof_details {
            let dm = fill(&to_px(d, tile_origin, gsd_m).translate(fdx * h, fdy * h), size);
            let shade = b.roof_albedo.map(|v| (0.5 * v + 0.35).min(1.0));
            for i in (0..n).filter(|&i| dm[i] == 1) {
                rgb[i] = shade;
                layers[i] = Layer::RoofDetail;
            }
        }
    }

    let mut image = vec![0f32; 3 * n];
    let noise = (opts.noise_std > 0.0).then(|| Normal::new(0.0, opts.noise_std).expect("finite noise std"));
    let mut rng = ChaCha8Rng::seed_from_u64(opts.noise_seed);
    for ch in 0..3 {
        for i in 0..n {
            let mut v = rgb[i][ch];
            if let Some(nd) = &noise {
                v += nd.sample(&mut rng);
            }
            image[ch * n + i] = v.clamp(0.0, 1.0) as f32;
        }
    }
    Rendered { size, image, layers }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datagen::{generate_scene, rasterize_mask, BuildingSpec, SceneSpec};

    fn single(height: f64) -> Scene {
        let fp = Polygon::rotated_rect(Point::new(12.0, 12.0), 6.0, 4.0, 0.3);
        let mut s = generate_scene(&SceneSpec { building_count_range: (0, 0), ..SceneSpec::new((38.4, 38.4), 5) }).unwrap();
        s.buildings.push(BuildingSpec { footprint: fp, height_m: height, roof_albedo: [0.7, 0.3, 0.2], roof_details: vec![] });
        s
    }

    #[test]
    fn nadir_roof_sits_on_footprint() {
        let s = single(20.0);
        let r = render_tile(&s, &ViewGeometry::nadir(), 0.3, Point::new(0.0, 0.0), 128, &RenderOptions::default());
        let fp = rasterize_mask(&[s.buildings[0].footprint.clone()], Point::new(0.0, 0.0), 128, 0.3);
        for i in 0..128 * 128 {
            assert_eq!(r.layers[i] == Layer::Roof, fp[i] == 1);
            if fp[i] == 1 {
                assert_eq!(r.rgb(i), [0.7f32, 0.3, 0.2]);
            }
        }
        assert_eq!(r.count(Layer::Facade), 0);
    }

    #[test]
    fn facade_grows_with_angle() {
        let s = single(40.0);
        let counts: Vec<usize> = [0.05, 0.15, 0.3]
            .iter()
            .map(|&t| {
                let v = ViewGeometry { off_nadir_tan: t, azimuth_rad: 0.8 };
                render_tile(&s, &v, 0.3, Point::new(0.0, 0.0), 128, &RenderOptions::default()).count(Layer::Facade)
            })
            .collect();
        assert!(counts[0] > 0 && counts[0] <= counts[1] && counts[1] <= counts[2], "{counts:?}");
    }

    #[test]
    fn facade_darker_than_roof_and_deterministic() {
        let s = single(40.0);
        let v = ViewGeometry::default();
        let o = RenderOptions { noise_std: 0.02, noise_seed: 4, ..Default::default() };
        let a = render_tile(&s, &v, 0.3, Point::new(0.0, 0.0), 128, &o);
        let b = render_tile(&s, &v, 0.3, Point::new(0.0, 0.0), 128, &o);
        assert_eq!(a, b);
        let clean = render_tile(&s, &v, 0.3, Point::new(0.0, 0.0), 128, &RenderOptions::default());
        let lum = |p: [f32; 3]| p.iter().sum::<f32>();
        let roof = (0..128 * 128).find(|&i| clean.layers[i] == Layer::Roof).unwrap();
        for i in (0..128 * 128).filter(|&i| clean.layers[i] == Layer::Facade) {
            assert!(lum(clean.rgb(i)) < lum(clean.rgb(roof)));
        }
    }
}
