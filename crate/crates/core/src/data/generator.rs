//! Deterministic synthetic disaster scenes.
//!
//! A scene is a textured ground plane with trees and rectangular buildings
//! (axis-aligned or rotated by angles with rational sine and cosine). The
//! post-disaster image re-renders every building with the visual effect of
//! its damage class. Placement uses only integer draws and exact rational
//! arithmetic on a 1/8-pixel grid, and rendering only basic floating-point
//! operations, so output is identical on every platform.

use clap::ValueEnum;
use serde::{Deserialize, Serialize};

use super::image::RgbImage;
use super::raster::{rasterize_polygons, PolygonLabel};
use super::wkt::Polygon;
use crate::error::{Error, Result};
use crate::mask::Mask;
use rand::RngCore;

use crate::rng::SplitMix64;

/// Visual change applied to a building of one damage class.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DamageEffect {
    /// Added to every roof channel.
    pub brightness: f64,
    /// Fraction of roof pixels replaced by dark debris.
    pub speckle: f64,
    /// Fraction of roof pixels replaced by rubble.
    pub removal: f64,
}

impl DamageEffect {
    pub const NONE: DamageEffect = DamageEffect {
        brightness: 0.0,
        speckle: 0.0,
        removal: 0.0,
    };
}

/// Alternative texture and shape statistics.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum DomainShift {
    /// Sandy, low-contrast ground, no trees, elongated buildings.
    Arid,
    /// Paved ground, no trees, more and smaller buildings, mostly
    /// axis-aligned.
    Urban,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GeneratorConfig {
    /// Side length; a multiple of 8.
    pub image_size: usize,
    /// Inclusive range of buildings per scene.
    pub buildings_per_scene: (usize, usize),
    /// Inclusive range of building side lengths in pixels.
    pub building_size: (usize, usize),
    /// Probabilities of damage classes 1..=4.
    pub class_distribution: [f64; 4],
    /// Effect per damage class 1..=4.
    pub damage_rendering: [DamageEffect; 4],
    pub domain_shift: Option<DomainShift>,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        GeneratorConfig {
            image_size: 64,
            buildings_per_scene: (3, 6),
            building_size: (8, 16),
            class_distribution: [0.4, 0.2, 0.2, 0.2],
            damage_rendering: [
                DamageEffect::NONE,
                DamageEffect {
                    brightness: -0.12,
                    speckle: 0.15,
                    removal: 0.0,
                },
                DamageEffect {
                    brightness: -0.25,
                    speckle: 0.4,
                    removal: 0.35,
                },
                DamageEffect {
                    brightness: 0.0,
                    speckle: 0.0,
                    removal: 1.0,
                },
            ],
            domain_shift: None,
        }
    }
}

/// Placement attempts per building before the scene is declared infeasible.
pub const MAX_PLACEMENT_TRIES: usize = 200;

/// Clearance kept between building bounding boxes, in pixels.
const GAP: f64 = 1.0;

/// `(cos, sin)` pairs with exact rational values.
const ROTATIONS: [(f64, f64); 5] = [
    (1.0, 0.0),
    (0.8, 0.6),
    (0.6, 0.8),
    (12.0 / 13.0, 5.0 / 13.0),
    (5.0 / 13.0, 12.0 / 13.0),
];

impl GeneratorConfig {
    pub fn validate(&self) -> Result<()> {
        if self.image_size == 0 || !self.image_size.is_multiple_of(8) {
            return Err(Error::Config(format!(
                "image_size must be a positive multiple of 8, got {}",
                self.image_size
            )));
        }
        let (bmin, bmax) = self.buildings_per_scene;
        let (smin, smax) = self.building_size;
        if bmin > bmax || smin > smax || smin < 2 {
            return Err(Error::Config(format!(
                "invalid ranges: buildings {bmin}..={bmax}, size {smin}..={smax} (size >= 2)"
            )));
        }
        if smax as f64 + 2.0 * GAP > self.image_size as f64 {
            return Err(Error::Config(format!(
                "building size {smax} does not fit a {} px image",
                self.image_size
            )));
        }
        validate_distribution(&self.class_distribution)?;
        for e in &self.damage_rendering {
            let ok = (0.0..=1.0).contains(&e.speckle)
                && (0.0..=1.0).contains(&e.removal)
                && (-1.0..=1.0).contains(&e.brightness);
            if !ok {
                return Err(Error::Config(format!("invalid damage effect {e:?}")));
            }
        }
        Ok(())
    }

    /// Applies the preset's shape priors.
    fn shape_priors(&self) -> ShapePriors {
        match self.domain_shift {
            None => ShapePriors {
                rotated: 0.3,
                max_aspect_num: 3,
                extra_buildings: 0,
                shrink: 0,
            },
            Some(DomainShift::Arid) => ShapePriors {
                rotated: 0.5,
                max_aspect_num: 4,
                extra_buildings: 0,
                shrink: 0,
            },
            Some(DomainShift::Urban) => ShapePriors {
                rotated: 0.1,
                max_aspect_num: 2,
                extra_buildings: 2,
                shrink: 2,
            },
        }
    }
}

pub fn validate_distribution(p: &[f64]) -> Result<()> {
    if p.len() != 4 {
        return Err(Error::Config(format!(
            "class distribution needs 4 probabilities, got {}",
            p.len()
        )));
    }
    if p.iter().any(|v| !(0.0..=1.0).contains(v)) {
        return Err(Error::Config(format!(
            "class probabilities must lie in [0, 1], got {p:?}"
        )));
    }
    let sum: f64 = p.iter().sum();
    if (sum - 1.0).abs() > 1e-9 {
        return Err(Error::Config(format!(
            "class probabilities must sum to 1, got {sum}"
        )));
    }
    Ok(())
}

struct ShapePriors {
    rotated: f64,
    /// Maximum aspect ratio is `max_aspect_num / 2`.
    max_aspect_num: u64,
    extra_buildings: usize,
    shrink: usize,
}

/// One generated pre/post pair with its labels.
#[derive(Clone, Debug, PartialEq)]
pub struct ScenePair {
    pub scene_id: String,
    pub seed: u64,
    pub pre: RgbImage,
    pub post: RgbImage,
    pub mask: Mask,
    /// Building annotations; empty when the mask was read directly.
    pub labels: Vec<PolygonLabel>,
}

#[derive(Clone, Copy)]
struct Palette {
    ground: [f64; 3],
    ground_texture: f64,
    trees: bool,
}

fn palette(shift: Option<DomainShift>) -> Palette {
    match shift {
        None => Palette {
            ground: [0.30, 0.42, 0.22],
            ground_texture: 0.07,
            trees: true,
        },
        Some(DomainShift::Arid) => Palette {
            ground: [0.72, 0.62, 0.45],
            ground_texture: 0.04,
            trees: false,
        },
        Some(DomainShift::Urban) => Palette {
            ground: [0.40, 0.40, 0.42],
            ground_texture: 0.05,
            trees: false,
        },
    }
}

const ROOFS: [[f64; 3]; 4] = [
    [0.66, 0.66, 0.64],
    [0.66, 0.38, 0.30],
    [0.48, 0.58, 0.72],
    [0.84, 0.82, 0.76],
];
const TREE: [f64; 3] = [0.10, 0.26, 0.09];
const RUBBLE: [f64; 3] = [0.46, 0.39, 0.31];
const SHADOW: f64 = 0.55;

struct Building {
    label: PolygonLabel,
    /// Bounding box `[x0, y0, x1, y1]` in pixel coordinates.
    bbox: [f64; 4],
}

fn quantize(v: f64) -> f64 {
    (v * 8.0).round() / 8.0
}

fn sample_class(rng: &mut SplitMix64, dist: &[f64; 4]) -> u8 {
    let u = rng.next_f64();
    let mut acc = 0.0;
    for (k, &p) in dist.iter().enumerate() {
        acc += p;
        if u < acc {
            return k as u8 + 1;
        }
    }
    // rounding slack: last class with positive probability
    dist.iter().rposition(|&p| p > 0.0).unwrap_or(0) as u8 + 1
}

fn place_buildings(config: &GeneratorConfig, rng: &mut SplitMix64) -> Result<Vec<Building>> {
    let priors = config.shape_priors();
    let size = config.image_size as f64;
    let (bmin, bmax) = config.buildings_per_scene;
    let count = rng.range_inclusive(bmin as u64, bmax as u64) as usize + priors.extra_buildings;
    let (smin, smax) = config.building_size;
    let smax_eff = smax.saturating_sub(priors.shrink).max(smin);
    let mut placed: Vec<Building> = Vec::with_capacity(count);
    for i in 0..count {
        let class = sample_class(rng, &config.class_distribution);
        let mut ok = false;
        for _ in 0..MAX_PLACEMENT_TRIES {
            let w = rng.range_inclusive(smin as u64, smax_eff as u64) as f64;
            let aspect = rng.range_inclusive(2, priors.max_aspect_num) as f64 / 2.0;
            let h = (w / aspect).round().max(2.0);
            let (c, s) = if rng.bernoulli(priors.rotated) {
                let (c, s) = ROTATIONS[1 + rng.below(ROTATIONS.len() - 1)];
                if rng.bernoulli(0.5) {
                    (c, -s)
                } else {
                    (c, s)
                }
            } else {
                ROTATIONS[0]
            };
            let ex = (c.abs() * w + s.abs() * h) / 2.0;
            let ey = (s.abs() * w + c.abs() * h) / 2.0;
            if 2.0 * ex > size || 2.0 * ey > size {
                continue;
            }
            let cx = rng
                .range_inclusive((ex * 8.0).ceil() as u64, ((size - ex) * 8.0).floor() as u64)
                as f64
                / 8.0;
            let cy = rng
                .range_inclusive((ey * 8.0).ceil() as u64, ((size - ey) * 8.0).floor() as u64)
                as f64
                / 8.0;
            let corners = [(-1.0, -1.0), (1.0, -1.0), (1.0, 1.0), (-1.0, 1.0)].map(|(sx, sy)| {
                let (dx, dy) = (sx * w / 2.0, sy * h / 2.0);
                (
                    quantize(cx + c * dx - s * dy),
                    quantize(cy + s * dx + c * dy),
                )
            });
            let bbox = corners.iter().fold(
                [
                    f64::INFINITY,
                    f64::INFINITY,
                    f64::NEG_INFINITY,
                    f64::NEG_INFINITY,
                ],
                |b, &(x, y)| [b[0].min(x), b[1].min(y), b[2].max(x), b[3].max(y)],
            );
            if bbox[0] < 0.0 || bbox[1] < 0.0 || bbox[2] > size || bbox[3] > size {
                continue;
            }
            let clear = placed.iter().all(|p| {
                bbox[0] >= p.bbox[2] + GAP
                    || p.bbox[0] >= bbox[2] + GAP
                    || bbox[1] >= p.bbox[3] + GAP
                    || p.bbox[1] >= bbox[3] + GAP
            });
            if !clear {
                continue;
            }
            let mut ring = corners.to_vec();
            ring.push(corners[0]);
            placed.push(Building {
                label: PolygonLabel {
                    polygon: Polygon {
                        exterior: ring,
                        holes: Vec::new(),
                    },
                    damage: Some(class),
                },
                bbox,
            });
            ok = true;
            break;
        }
        if !ok {
            return Err(Error::Config(format!(
                "cannot place building {} of {count} without overlap after {MAX_PLACEMENT_TRIES} attempts",
                i + 1
            )));
        }
    }
    Ok(placed)
}

/// Smooth noise in `[-1, 1]`: bilinear interpolation of a random grid with
/// `cell`-pixel spacing.
fn value_noise(rng: &mut SplitMix64, size: usize, cell: usize) -> Vec<f64> {
    let g = size / cell + 2;
    let grid: Vec<f64> = (0..g * g).map(|_| rng.uniform(-1.0, 1.0)).collect();
    let mut out = vec![0.0; size * size];
    let cf = cell as f64;
    for r in 0..size {
        let (gy, ty) = (r / cell, (r % cell) as f64 / cf);
        for c in 0..size {
            let (gx, tx) = (c / cell, (c % cell) as f64 / cf);
            let at = |y: usize, x: usize| grid[y * g + x];
            let top = at(gy, gx) * (1.0 - tx) + at(gy, gx + 1) * tx;
            let bot = at(gy + 1, gx) * (1.0 - tx) + at(gy + 1, gx + 1) * tx;
            out[r * size + c] = top * (1.0 - ty) + bot * ty;
        }
    }
    out
}

/// Planar `3 x H x W` canvas in `[0, 1]`.
struct Canvas {
    size: usize,
    px: Vec<f64>,
}

impl Canvas {
    fn idx(&self, ch: usize, p: usize) -> usize {
        ch * self.size * self.size + p
    }

    fn set(&mut self, p: usize, rgb: [f64; 3]) {
        for (ch, v) in rgb.into_iter().enumerate() {
            let i = self.idx(ch, p);
            self.px[i] = v;
        }
    }

    fn scale(&mut self, p: usize, f: f64) {
        for ch in 0..3 {
            let i = self.idx(ch, p);
            self.px[i] *= f;
        }
    }

    fn into_image(self) -> Result<RgbImage> {
        RgbImage::from_unit(self.size, self.size, &self.px)
    }
}

fn ground(config: &GeneratorConfig, rng: &mut SplitMix64) -> Canvas {
    let pal = palette(config.domain_shift);
    let size = config.image_size;
    let jitter: Vec<f64> = (0..3).map(|_| rng.uniform(-0.04, 0.04)).collect();
    let coarse = value_noise(rng, size, 8);
    let mut px = vec![0.0; 3 * size * size];
    for p in 0..size * size {
        let fine = rng.uniform(-0.025, 0.025);
        for ch in 0..3 {
            px[ch * size * size + p] =
                pal.ground[ch] + jitter[ch] + pal.ground_texture * coarse[p] + fine;
        }
    }
    let mut canvas = Canvas { size, px };
    if pal.trees {
        let n = rng.range_inclusive(2, 6);
        for _ in 0..n {
            let cx = rng.uniform(0.0, size as f64);
            let cy = rng.uniform(0.0, size as f64);
            let rad = rng.uniform(1.5, 3.0);
            for r in 0..size {
                for c in 0..size {
                    let (dx, dy) = (c as f64 + 0.5 - cx, r as f64 + 0.5 - cy);
                    if dx * dx + dy * dy <= rad * rad {
                        let v = rng.uniform(-0.03, 0.03);
                        canvas.set(r * size + c, TREE.map(|t| t + v));
                    }
                }
            }
        }
    }
    canvas
}

/// Pixels (row-major indices) of a building's footprint.
fn footprint(mask: &Mask, b: &Building) -> Vec<usize> {
    let w = mask.width();
    let r0 = b.bbox[1].floor().max(0.0) as usize;
    let r1 = (b.bbox[3].ceil() as usize).min(mask.height());
    let c0 = b.bbox[0].floor().max(0.0) as usize;
    let c1 = (b.bbox[2].ceil() as usize).min(w);
    let mut out = Vec::new();
    let (single, _) = rasterize_polygons(std::slice::from_ref(&b.label), mask.height(), w);
    for r in r0..r1 {
        for c in c0..c1 {
            if single.get(r, c) != 0 {
                out.push(r * w + c);
            }
        }
    }
    out
}

/// Darkens ground pixels just below and to the right of the given
/// footprints, once per pixel.
fn cast_shadows<'a>(
    canvas: &mut Canvas,
    occupied: &[bool],
    footprints: impl Iterator<Item = &'a Vec<usize>>,
) {
    let size = canvas.size;
    let mut shadow = vec![false; size * size];
    for &p in footprints.flatten() {
        let (r, c) = (p / size, p % size);
        for (dr, dc) in [(1, 1), (2, 2), (1, 2), (2, 1)] {
            let (rr, cc) = (r + dr, c + dc);
            if rr < size && cc < size && !occupied[rr * size + cc] {
                shadow[rr * size + cc] = true;
            }
        }
    }
    for (q, _) in shadow.iter().enumerate().filter(|(_, &s)| s) {
        canvas.scale(q, SHADOW);
    }
}

/// Generates one scene; a pure function of `(config, seed)`.
pub fn generate_scene(config: &GeneratorConfig, seed: u64, scene_id: &str) -> Result<ScenePair> {
    config.validate()?;
    let size = config.image_size;
    let root = SplitMix64::new(seed);
    let mut layout = root.derive(1);
    let buildings = place_buildings(config, &mut layout)?;
    let labels: Vec<PolygonLabel> = buildings.iter().map(|b| b.label.clone()).collect();
    let (mask, _) = rasterize_polygons(&labels, size, size);

    let pixels: Vec<Vec<usize>> = buildings.iter().map(|b| footprint(&mask, b)).collect();
    let mut occupied = vec![false; size * size];
    for p in pixels.iter().flatten() {
        occupied[*p] = true;
    }

    let mut tex = root.derive(2);
    let base = ground(config, &mut tex);
    let roofs: Vec<[f64; 3]> = buildings
        .iter()
        .map(|_| {
            let r = ROOFS[tex.below(ROOFS.len())];
            let j = tex.uniform(-0.04, 0.04);
            r.map(|v| v + j)
        })
        .collect();
    // per-pixel roof grain, shared by both dates
    let grain: Vec<f64> = (0..size * size).map(|_| tex.uniform(-0.02, 0.02)).collect();

    let mut pre = Canvas {
        size,
        px: base.px.clone(),
    };
    cast_shadows(&mut pre, &occupied, pixels.iter());
    for (b, px) in pixels.iter().enumerate() {
        for &p in px {
            pre.set(p, roofs[b].map(|v| v + grain[p]));
        }
    }

    let mut noise = root.derive(3);
    let mut post = Canvas {
        size,
        px: base.px.clone(),
    };
    for v in post.px.iter_mut() {
        *v += noise.uniform(-0.015, 0.015);
    }
    let standing = pixels.iter().zip(&buildings).filter(|(_, b)| {
        let class = b.label.damage.unwrap_or(1);
        config.damage_rendering[class as usize - 1].removal < 1.0
    });
    cast_shadows(&mut post, &occupied, standing.map(|(px, _)| px));
    for (b, px) in pixels.iter().enumerate() {
        let class = buildings[b].label.damage.unwrap_or(1);
        let effect = config.damage_rendering[class as usize - 1];
        let mut fx = root.derive(100 + b as u64);
        for &p in px {
            let roof = roofs[b].map(|v| v + grain[p] + effect.brightness);
            let value = if fx.bernoulli(effect.removal) {
                let v = fx.uniform(-0.12, 0.12);
                RUBBLE.map(|c| c + v)
            } else if fx.bernoulli(effect.speckle) {
                roof.map(|c| c * 0.45)
            } else {
                roof
            };
            post.set(p, value);
        }
    }

    Ok(ScenePair {
        scene_id: scene_id.to_string(),
        seed,
        pre: pre.into_image()?,
        post: post.into_image()?,
        mask,
        labels,
    })
}

/// Seed of scene `index` in a dataset generated from `base_seed`.
pub fn scene_seed(base_seed: u64, index: usize) -> u64 {
    SplitMix64::new(base_seed).derive(index as u64).next_u64()
}

pub fn scene_name(index: usize) -> String {
    format!("scene_{index:05}")
}

/// `count` scenes named `scene_00000, ...`.
pub fn generate_dataset(
    config: &GeneratorConfig,
    count: usize,
    base_seed: u64,
) -> Result<Vec<ScenePair>> {
    (0..count)
        .map(|i| generate_scene(config, scene_seed(base_seed, i), &scene_name(i)))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn deterministic() {
        let c = GeneratorConfig::default();
        let a = generate_scene(&c, 42, "a").unwrap();
        let b = generate_scene(&c, 42, "a").unwrap();
        assert_eq!(a, b);
        let d = generate_scene(&c, 43, "a").unwrap();
        assert_ne!(a.pre, d.pre);
    }

    #[test]
    fn mask_matches_buildings() {
        let c = GeneratorConfig::default();
        for seed in 0..20 {
            let s = generate_scene(&c, seed, "s").unwrap();
            let (m, skipped) = rasterize_polygons(&s.labels, 64, 64);
            assert_eq!(skipped, 0);
            assert_eq!(m, s.mask);
            let fg = s.mask.data().iter().filter(|&&v| v > 0).count();
            assert!(fg > 0);
        }
    }

    #[test]
    fn no_damage_only_post_close_to_pre() {
        let c = GeneratorConfig {
            class_distribution: [1.0, 0.0, 0.0, 0.0],
            ..GeneratorConfig::default()
        };
        let s = generate_scene(&c, 7, "s").unwrap();
        assert!(s.mask.data().iter().all(|&v| v <= 1));
        let max_diff = s
            .pre
            .data()
            .iter()
            .zip(s.post.data())
            .map(|(&a, &b)| (a as i32 - b as i32).abs())
            .max()
            .unwrap();
        assert!(max_diff <= 5, "{max_diff}");
    }

    #[test]
    fn destroyed_differs_strongly() {
        let c = GeneratorConfig {
            class_distribution: [0.0, 0.0, 0.0, 1.0],
            ..GeneratorConfig::default()
        };
        let s = generate_scene(&c, 9, "s").unwrap();
        let hw = 64 * 64;
        let mean_diff: f64 = (0..hw)
            .filter(|&p| s.mask.data()[p] == 4)
            .map(|p| (s.pre.data()[p] as f64 - s.post.data()[p] as f64).abs())
            .sum::<f64>()
            / s.mask.data().iter().filter(|&&v| v == 4).count() as f64;
        assert!(mean_diff > 20.0, "{mean_diff}");
    }

    #[test]
    fn rejects_bad_configs() {
        let mut c = GeneratorConfig {
            image_size: 60,
            ..GeneratorConfig::default()
        };
        assert!(c.validate().is_err());
        c.image_size = 64;
        c.class_distribution = [0.5, 0.5, 0.2, 0.0];
        assert!(c.validate().is_err());
        let c = GeneratorConfig {
            buildings_per_scene: (60, 60),
            ..GeneratorConfig::default()
        };
        assert!(matches!(generate_scene(&c, 0, "x"), Err(Error::Config(_))));
    }

    #[test]
    fn presets_generate() {
        for shift in [DomainShift::Arid, DomainShift::Urban] {
            let c = GeneratorConfig {
                domain_shift: Some(shift),
                ..GeneratorConfig::default()
            };
            let s = generate_scene(&c, 3, "s").unwrap();
            assert!(s.mask.data().iter().any(|&v| v > 0));
        }
    }
}
