use super::generator::ScenePair;
use super::image::RgbImage;
use crate::error::{Error, Result};
use crate::mask::Mask;
use crate::rng::SplitMix64;
use crate::tensor::Tensor;

/// Stacked crops ready for a forward pass.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    /// `N x 3 x crop x crop`
    pub pre: Tensor<f32>,
    pub post: Tensor<f32>,
    pub masks: Vec<Mask>,
    /// Source scene of each item.
    pub scene_ids: Vec<String>,
}

/// Window and flips applied to one scene.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct CropSpec {
    pub scene: usize,
    pub top: usize,
    pub left: usize,
    pub size: usize,
    pub flip_h: bool,
    pub flip_v: bool,
}

impl CropSpec {
    /// Source `(row, col)` of output pixel `(r, c)`.
    fn source(&self, r: usize, c: usize) -> (usize, usize) {
        let r = if self.flip_v { self.size - 1 - r } else { r };
        let c = if self.flip_h { self.size - 1 - c } else { c };
        (self.top + r, self.left + c)
    }

    pub fn apply_image(&self, img: &RgbImage, out: &mut Vec<f32>) {
        for ch in 0..3 {
            for r in 0..self.size {
                for c in 0..self.size {
                    let (sr, sc) = self.source(r, c);
                    out.push(img.get(ch, sr, sc) as f32 / 255.0);
                }
            }
        }
    }

    pub fn apply_mask(&self, mask: &Mask) -> Mask {
        let mut data = Vec::with_capacity(self.size * self.size);
        for r in 0..self.size {
            for c in 0..self.size {
                let (sr, sc) = self.source(r, c);
                data.push(mask.get(sr, sc));
            }
        }
        Mask::new(self.size, self.size, data).expect("labels copied from a valid mask")
    }
}

/// Assembles a batch from explicit crop specifications.
pub fn assemble(pairs: &[ScenePair], specs: &[CropSpec]) -> Result<Batch> {
    let size = specs
        .first()
        .map(|s| s.size)
        .ok_or_else(|| Error::InvalidInput("empty batch".into()))?;
    let mut pre = Vec::with_capacity(specs.len() * 3 * size * size);
    let mut post = Vec::with_capacity(pre.capacity());
    let mut masks = Vec::with_capacity(specs.len());
    let mut scene_ids = Vec::with_capacity(specs.len());
    for s in specs {
        let pair = pairs
            .get(s.scene)
            .ok_or_else(|| Error::InvalidInput(format!("scene index {} out of range", s.scene)))?;
        let (h, w) = pair.pre.dims();
        if s.size != size || s.top + s.size > h || s.left + s.size > w {
            return Err(Error::InvalidInput(format!(
                "crop {s:?} does not fit scene `{}` of size {h}x{w}",
                pair.scene_id
            )));
        }
        s.apply_image(&pair.pre, &mut pre);
        s.apply_image(&pair.post, &mut post);
        masks.push(s.apply_mask(&pair.mask));
        scene_ids.push(pair.scene_id.clone());
    }
    let n = specs.len();
    Ok(Batch {
        pre: Tensor::new(vec![n, 3, size, size], pre)?,
        post: Tensor::new(vec![n, 3, size, size], post)?,
        masks,
        scene_ids,
    })
}

/// `batch` random `crop x crop` windows (scene, offset, and with `augment`
/// horizontal/vertical flips), determined by `seed`. The same transform is
/// applied to the pre image, post image and mask.
pub fn crop_batch(
    pairs: &[ScenePair],
    crop: usize,
    batch: usize,
    seed: u64,
    augment: bool,
) -> Result<Batch> {
    if pairs.is_empty() || batch == 0 {
        return Err(Error::InvalidInput(
            "need at least one scene and batch >= 1".into(),
        ));
    }
    if crop == 0 || !crop.is_multiple_of(8) {
        return Err(Error::Config(format!(
            "crop {crop} must be a positive multiple of 8"
        )));
    }
    let mut rng = SplitMix64::new(seed);
    let mut specs = Vec::with_capacity(batch);
    for _ in 0..batch {
        let scene = rng.below(pairs.len());
        let (h, w) = pairs[scene].pre.dims();
        if crop > h || crop > w {
            return Err(Error::Config(format!(
                "crop {crop} is larger than scene `{}` ({h}x{w})",
                pairs[scene].scene_id
            )));
        }
        let top = rng.range_inclusive(0, (h - crop) as u64) as usize;
        let left = rng.range_inclusive(0, (w - crop) as u64) as usize;
        let (flip_h, flip_v) = if augment {
            (rng.bernoulli(0.5), rng.bernoulli(0.5))
        } else {
            (false, false)
        };
        specs.push(CropSpec {
            scene,
            top,
            left,
            size: crop,
            flip_h,
            flip_v,
        });
    }
    assemble(pairs, &specs)
}

/// All scenes whole and in order, `chunk` at a time (square scenes).
pub fn full_batches(pairs: &[ScenePair], chunk: usize) -> Result<Vec<Batch>> {
    pairs
        .chunks(chunk.max(1))
        .enumerate()
        .map(|(i, group)| {
            let specs: Vec<CropSpec> = group
                .iter()
                .enumerate()
                .map(|(j, p)| CropSpec {
                    scene: i * chunk.max(1) + j,
                    top: 0,
                    left: 0,
                    size: p.pre.height(),
                    flip_h: false,
                    flip_v: false,
                })
                .collect();
            for p in group {
                if p.pre.height() != p.pre.width() {
                    return Err(Error::InvalidInput(format!(
                        "scene `{}` is not square",
                        p.scene_id
                    )));
                }
            }
            assemble(pairs, &specs)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::generator::{generate_dataset, GeneratorConfig};

    fn scenes() -> Vec<ScenePair> {
        generate_dataset(&GeneratorConfig::default(), 3, 1).unwrap()
    }

    #[test]
    fn full_crop_is_identity() {
        let s = scenes();
        let b = crop_batch(&s[..1], 64, 1, 5, false).unwrap();
        assert_eq!(b.masks[0], s[0].mask);
        let want: Vec<f32> = s[0].pre.to_tensor().into_data();
        assert_eq!(b.pre.data(), &want[..]);
    }

    #[test]
    fn deterministic_and_seeded() {
        let s = scenes();
        let a = crop_batch(&s, 32, 4, 9, true).unwrap();
        assert_eq!(a, crop_batch(&s, 32, 4, 9, true).unwrap());
        assert_ne!(a, crop_batch(&s, 32, 4, 10, true).unwrap());
    }

    #[test]
    fn flip_commutes_with_mask() {
        let s = scenes();
        let spec = CropSpec {
            scene: 0,
            top: 8,
            left: 16,
            size: 24,
            flip_h: true,
            flip_v: false,
        };
        let plain = CropSpec {
            flip_h: false,
            ..spec
        };
        let flipped = spec.apply_mask(&s[0].mask);
        let crop = plain.apply_mask(&s[0].mask);
        for r in 0..24 {
            for c in 0..24 {
                assert_eq!(flipped.get(r, c), crop.get(r, 23 - c));
            }
        }
    }

    #[test]
    fn rejects_oversized_crop() {
        let s = scenes();
        assert!(crop_batch(&s, 72, 1, 0, false).is_err());
        assert!(crop_batch(&s, 20, 1, 0, false).is_err());
    }
}
