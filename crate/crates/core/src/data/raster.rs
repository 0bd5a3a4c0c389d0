//! Polygon rasterization with the pixel-center, even-odd rule.

use super::wkt::{Point, Polygon};
use crate::mask::{Mask, IGNORE};

/// A building annotation.
#[derive(Clone, Debug, PartialEq)]
pub struct PolygonLabel {
    pub polygon: Polygon,
    /// Damage class 1..=4, or `None` when unclassified.
    pub damage: Option<u8>,
}

impl PolygonLabel {
    pub fn mask_value(&self) -> u8 {
        self.damage.unwrap_or(IGNORE)
    }
}

/// x-coordinate where edge `a-b` crosses the horizontal line at `y`.
fn crossing_x(a: Point, b: Point, y: f64) -> f64 {
    (b.0 - a.0) * (y - a.1) / (b.1 - a.1) + a.0
}

/// Even-odd test of point `(x, y)` against every ring of `polygon`: the
/// number of edges crossing the ray to the right of the point is odd.
pub fn contains(polygon: &Polygon, x: f64, y: f64) -> bool {
    let mut inside = false;
    for ring in polygon.rings() {
        for e in ring.windows(2) {
            let (a, b) = (e[0], e[1]);
            if (a.1 > y) != (b.1 > y) && x < crossing_x(a, b, y) {
                inside = !inside;
            }
        }
    }
    inside
}

/// Burns each label into an `h x w` background mask, in order (later
/// polygons overwrite earlier ones). Pixel `(r, c)` is inside a polygon iff
/// `(c + 0.5, r + 0.5)` is, by the even-odd rule. Polygons with zero
/// exterior area are skipped; their number is returned.
pub fn rasterize_polygons(labels: &[PolygonLabel], h: usize, w: usize) -> (Mask, usize) {
    let mut mask = Mask::background(h, w);
    let mut skipped = 0;
    let mut xs = Vec::new();
    for label in labels {
        let poly = &label.polygon;
        if poly.exterior_area() == 0.0 {
            skipped += 1;
            continue;
        }
        let value = label.mask_value();
        let (ymin, ymax) = poly
            .rings()
            .flatten()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), p| {
                (lo.min(p.1), hi.max(p.1))
            });
        let r0 = (ymin.floor() - 1.0).clamp(0.0, h as f64) as usize;
        let r1 = (ymax.ceil() + 1.0).clamp(0.0, h as f64) as usize;
        for r in r0..r1 {
            let y = r as f64 + 0.5;
            xs.clear();
            for ring in poly.rings() {
                for e in ring.windows(2) {
                    let (a, b) = (e[0], e[1]);
                    if (a.1 > y) != (b.1 > y) {
                        xs.push(crossing_x(a, b, y));
                    }
                }
            }
            xs.sort_unstable_by(f64::total_cmp);
            // A center x is inside iff an odd number of crossings lie
            // strictly to its right, i.e. x in [xs[2k], xs[2k+1]).
            for span in xs.chunks_exact(2) {
                let mut c = (span[0].floor() - 1.0).clamp(0.0, w as f64) as usize;
                while c < w && (c as f64 + 0.5) < span[0] {
                    c += 1;
                }
                while c < w && (c as f64 + 0.5) < span[1] {
                    mask.set(r, c, value);
                    c += 1;
                }
            }
        }
    }
    (mask, skipped)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::wkt::parse_wkt_polygon;

    fn label(wkt: &str, damage: Option<u8>) -> PolygonLabel {
        PolygonLabel {
            polygon: parse_wkt_polygon(wkt).unwrap(),
            damage,
        }
    }

    #[test]
    fn unit_square_on_grid() {
        let l = label("POLYGON ((0 0, 2 0, 2 2, 0 2, 0 0))", Some(2));
        let (m, skipped) = rasterize_polygons(&[l], 4, 4);
        assert_eq!(skipped, 0);
        let set: Vec<(usize, usize)> = (0..4)
            .flat_map(|r| (0..4).map(move |c| (r, c)))
            .filter(|&(r, c)| m.get(r, c) != 0)
            .collect();
        assert_eq!(set, vec![(0, 0), (0, 1), (1, 0), (1, 1)]);
        assert_eq!(m.get(0, 0), 2);
    }

    #[test]
    fn empty_and_degenerate() {
        let (m, s) = rasterize_polygons(&[], 3, 3);
        assert_eq!((m, s), (Mask::background(3, 3), 0));
        let flat = label("POLYGON ((0 0, 2 0, 3 0, 0 0))", Some(1));
        let (m, s) = rasterize_polygons(&[flat], 3, 3);
        assert_eq!((m, s), (Mask::background(3, 3), 1));
    }

    #[test]
    fn unclassified_and_overwrite() {
        let a = label("POLYGON ((0 0, 3 0, 3 3, 0 3, 0 0))", Some(1));
        let b = label("POLYGON ((1 1, 3 1, 3 3, 1 3, 1 1))", None);
        let (m, _) = rasterize_polygons(&[a, b], 3, 3);
        assert_eq!(m.get(0, 0), 1);
        assert_eq!(m.get(2, 2), 255);
    }

    #[test]
    fn hole_is_excluded() {
        let l = label(
            "POLYGON ((0 0, 6 0, 6 6, 0 6, 0 0), (2 2, 4 2, 4 4, 2 4, 2 2))",
            Some(3),
        );
        let (m, _) = rasterize_polygons(&[l], 6, 6);
        assert_eq!(m.get(1, 1), 3);
        assert_eq!(m.get(2, 2), 0);
        assert_eq!(m.get(3, 3), 0);
        assert_eq!(m.get(4, 4), 3);
    }

    #[test]
    fn ring_outside_exterior_uses_even_odd() {
        let l = label(
            "POLYGON ((0 0, 2 0, 2 2, 0 2, 0 0), (0 4, 2 4, 2 6, 0 6, 0 4))",
            Some(1),
        );
        let (m, _) = rasterize_polygons(std::slice::from_ref(&l), 6, 2);
        assert_eq!(m.get(0, 0), 1);
        assert_eq!(m.get(3, 0), 0);
        assert_eq!(m.get(5, 1), 1);
        assert!(contains(&l.polygon, 1.0, 5.0));
    }

    #[test]
    fn clipped_to_image() {
        let l = label("POLYGON ((-5 -5, 50 -5, 50 50, -5 50, -5 -5))", Some(4));
        let (m, _) = rasterize_polygons(&[l], 4, 5);
        assert!(m.data().iter().all(|&v| v == 4));
    }
}
