use crate::geometry::{Point, Polygon};

use super::ViewGeometry;

/// Roof displacement in pixels, `h * tan(theta) / gsd` along the azimuth.
pub fn displacement_px(height_m: f64, view: &ViewGeometry, gsd_m: f64) -> (f64, f64) {
    assert!(gsd_m > 0.0, "gsd must be positive");
    let d = height_m * view.off_nadir_tan / gsd_m;
    (d * view.azimuth_rad.cos(), d * view.azimuth_rad.sin())
}

/// Roof outline in pixel coordinates for a footprint given in world meters
/// (world origin mapped to pixel origin).
pub fn project_roof(footprint: &Polygon, height_m: f64, view: &ViewGeometry, gsd_m: f64) -> Polygon {
    let (dx, dy) = displacement_px(height_m, view, gsd_m);
    footprint.map(|p| Point::new(p.x / gsd_m + dx, p.y / gsd_m + dy))
}

/// Binary mask (0/1, row-major) of pixels whose centre lies inside any polygon.
/// Polygons are in world meters; `tile_origin` is the world position of the
/// tile's top-left corner.
pub fn rasterize_mask(polygons: &[Polygon], tile_origin: Point, tile_size_px: usize, gsd_m: f64) -> Vec<u8> {
    let mut mask = vec![0u8; tile_size_px * tile_size_px];
    for poly in polygons {
        let px = poly.map(|p| Point::new((p.x - tile_origin.x) / gsd_m, (p.y - tile_origin.y) / gsd_m));
        fill_even_odd(std::slice::from_ref(&px), tile_size_px, tile_size_px, &mut mask);
    }
    mask
}

/// Rasterizes one feature made of several rings (outer boundary plus holes)
/// in pixel coordinates with the even-odd rule, OR-ing into `mask`.
pub fn rasterize_rings(rings: &[Polygon], width: usize, height: usize, mask: &mut [u8]) {
    fill_even_odd(rings, width, height, mask);
}

fn fill_even_odd(rings: &[Polygon], width: usize, height: usize, mask: &mut [u8]) {
    debug_assert_eq!(mask.len(), width * height);
    let (mut y0, mut y1) = (f64::INFINITY, f64::NEG_INFINITY);
    for r in rings {
        let (_, a, _, b) = r.bbox();
        y0 = y0.min(a);
        y1 = y1.max(b);
    }
    if !y0.is_finite() || !y1.is_finite() {
        return;
    }
    let row_lo = ((y0 - 0.5).ceil().max(0.0)) as usize;
    let row_hi = ((y1 - 0.5).floor().min(height as f64 - 1.0)).max(-1.0);
    if row_hi < 0.0 {
        return;
    }
    let mut xs: Vec<f64> = Vec::new();
    for row in row_lo..=row_hi as usize {
        let y = row as f64 + 0.5;
        xs.clear();
        for ring in rings {
            for (a, b) in ring.edges() {
                if (a.y <= y && b.y > y) || (b.y <= y && a.y > y) {
                    xs.push(a.x + (y - a.y) * (b.x - a.x) / (b.y - a.y));
                }
            }
        }
        xs.sort_by(f64::total_cmp);
        for pair in xs.chunks_exact(2) {
            // centres c = i + 0.5 with pair[0] <= c < pair[1]
            let lo = (pair[0] - 0.5).ceil().max(0.0);
            let hi = ((pair[1] - 0.5).ceil() - 1.0).min(width as f64 - 1.0);
            if hi < lo {
                continue;
            }
            let base = row * width;
            for v in &mut mask[base + lo as usize..=base + hi as usize] {
                *v = 1;
            }
        }
    }
}
