#![allow(dead_code)]

use rescuenet::data::{contains, Polygon, PolygonLabel};
use rescuenet::mask::Mask;
use rescuenet::rng::SplitMix64;

/// Convex polygon with 3-8 vertices on a circle inside a `size` grid,
/// coordinates snapped to quarter pixels so vertices and edges often land
/// exactly on pixel centers.
pub fn random_convex_polygon(rng: &mut SplitMix64, size: f64) -> Polygon {
    let n = 3 + rng.below(6);
    let cx = rng.uniform(0.0, size);
    let cy = rng.uniform(0.0, size);
    let r = rng.uniform(0.5, size / 2.0);
    let mut angles: Vec<f64> = (0..n)
        .map(|_| rng.uniform(0.0, std::f64::consts::TAU))
        .collect();
    angles.sort_by(f64::total_cmp);
    let snap = |v: f64| (v * 4.0).round() / 4.0;
    let mut ring: Vec<(f64, f64)> = angles
        .iter()
        .map(|a| (snap(cx + r * a.cos()), snap(cy + r * a.sin())))
        .collect();
    ring.push(ring[0]);
    Polygon {
        exterior: ring,
        holes: Vec::new(),
    }
}

/// Even-odd oracle over every pixel center, later labels overwriting.
pub fn brute_force_mask(labels: &[PolygonLabel], h: usize, w: usize) -> Mask {
    let mut mask = Mask::background(h, w);
    for l in labels {
        if l.polygon.exterior_area() == 0.0 {
            continue;
        }
        for r in 0..h {
            for c in 0..w {
                if contains(&l.polygon, c as f64 + 0.5, r as f64 + 0.5) {
                    mask.set(r, c, l.mask_value());
                }
            }
        }
    }
    mask
}
