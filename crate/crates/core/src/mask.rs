//! Combined per-pixel label maps: 0 = background, 1..=4 = damage class,
//! 255 = ignore.

use crate::error::{Error, Result};

pub const BACKGROUND: u8 = 0;
pub const NUM_CLASSES: usize = 5;
pub const IGNORE: u8 = 255;

pub fn is_valid_label(v: u8) -> bool {
    (v as usize) < NUM_CLASSES || v == IGNORE
}

/// Row-major `height x width` label map.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Mask {
    height: usize,
    width: usize,
    data: Vec<u8>,
}

impl Mask {
    pub fn new(height: usize, width: usize, data: Vec<u8>) -> Result<Self> {
        if data.len() != height * width {
            return Err(Error::InvalidShape {
                shape: vec![height, width],
                reason: format!("mask holds {} values", data.len()),
            });
        }
        if let Some(i) = data.iter().position(|&v| !is_valid_label(v)) {
            return Err(Error::InvalidInput(format!(
                "mask value {} at pixel ({}, {}) is not in {{0..4, 255}}",
                data[i],
                i / width.max(1),
                i % width.max(1)
            )));
        }
        Ok(Mask {
            height,
            width,
            data,
        })
    }

    pub fn background(height: usize, width: usize) -> Self {
        Mask {
            height,
            width,
            data: vec![BACKGROUND; height * width],
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn get(&self, row: usize, col: usize) -> u8 {
        self.data[row * self.width + col]
    }

    pub fn set(&mut self, row: usize, col: usize, value: u8) {
        debug_assert!(is_valid_label(value));
        self.data[row * self.width + col] = value;
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    pub fn into_data(self) -> Vec<u8> {
        self.data
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_out_of_range() {
        assert!(Mask::new(1, 2, vec![0, 5]).is_err());
        assert!(Mask::new(1, 2, vec![4, 255]).is_ok());
        assert!(Mask::new(2, 2, vec![0; 3]).is_err());
    }
}
