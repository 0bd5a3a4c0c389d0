//! Color rendering of label masks.

use crate::data::RgbImage;
use crate::mask::{Mask, IGNORE};

/// Color of each class value: background blue, undamaged green, minor
/// orange, major pink, destroyed red.
pub const PALETTE: [[u8; 3]; 5] = [
    [0, 0, 255],
    [0, 200, 0],
    [255, 165, 0],
    [255, 105, 180],
    [255, 0, 0],
];

/// Color of ignored pixels.
pub const IGNORE_COLOR: [u8; 3] = [0, 0, 0];

pub fn class_color(value: u8) -> Option<[u8; 3]> {
    match value {
        IGNORE => Some(IGNORE_COLOR),
        v => PALETTE.get(v as usize).copied(),
    }
}

pub fn render_mask(mask: &Mask) -> RgbImage {
    let (h, w) = mask.dims();
    let rgb: Vec<u8> = mask
        .data()
        .iter()
        .flat_map(|&v| class_color(v).expect("masks hold valid labels"))
        .collect();
    RgbImage::from_interleaved(h, w, &rgb).expect("three bytes per pixel")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn background_is_solid_blue() {
        let img = render_mask(&Mask::background(3, 4));
        assert!(img.to_interleaved().chunks(3).all(|px| px == [0, 0, 255]));
    }

    #[test]
    fn class_colors() {
        let m = Mask::new(1, 6, vec![0, 1, 2, 3, 4, 255]).unwrap();
        let rgb = render_mask(&m).to_interleaved();
        assert_eq!(&rgb[3..6], &[0, 200, 0]);
        assert_eq!(&rgb[12..15], &[255, 0, 0]);
        assert_eq!(&rgb[15..18], &[0, 0, 0]);
        assert_eq!(class_color(7), None);
    }
}
