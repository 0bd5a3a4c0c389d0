use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// 8-bit RGB image stored channel-major (`3 x H x W`).
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RgbImage {
    height: usize,
    width: usize,
    data: Vec<u8>,
}

impl RgbImage {
    pub fn new(height: usize, width: usize, data: Vec<u8>) -> Result<Self> {
        if data.len() != 3 * height * width {
            return Err(Error::InvalidShape {
                shape: vec![3, height, width],
                reason: format!("image holds {} bytes", data.len()),
            });
        }
        Ok(RgbImage {
            height,
            width,
            data,
        })
    }

    pub fn filled(height: usize, width: usize, rgb: [u8; 3]) -> Self {
        let mut data = Vec::with_capacity(3 * height * width);
        for c in rgb {
            data.extend(std::iter::repeat_n(c, height * width));
        }
        RgbImage {
            height,
            width,
            data,
        }
    }

    /// Quantizes `3 x H x W` values in `[0, 1]` (clamped) to 8 bits.
    pub fn from_unit(height: usize, width: usize, values: &[f64]) -> Result<Self> {
        let data = values.iter().map(|&v| to_u8(v)).collect();
        Self::new(height, width, data)
    }

    /// From row-major interleaved RGB bytes.
    pub fn from_interleaved(height: usize, width: usize, rgb: &[u8]) -> Result<Self> {
        if rgb.len() != 3 * height * width {
            return Err(Error::InvalidShape {
                shape: vec![height, width, 3],
                reason: format!("{} bytes given", rgb.len()),
            });
        }
        let hw = height * width;
        let mut data = vec![0; 3 * hw];
        for (p, px) in rgb.chunks_exact(3).enumerate() {
            for c in 0..3 {
                data[c * hw + p] = px[c];
            }
        }
        Self::new(height, width, data)
    }

    pub fn to_interleaved(&self) -> Vec<u8> {
        let hw = self.height * self.width;
        (0..hw)
            .flat_map(|p| (0..3).map(move |c| (c, p)))
            .map(|(c, p)| self.data[c * hw + p])
            .collect()
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

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    pub fn get(&self, c: usize, row: usize, col: usize) -> u8 {
        self.data[(c * self.height + row) * self.width + col]
    }

    /// `3 x H x W` tensor with values `byte / 255`.
    pub fn to_tensor(&self) -> Tensor<f32> {
        Tensor::new(
            vec![3, self.height, self.width],
            self.data.iter().map(|&b| b as f32 / 255.0).collect(),
        )
        .expect("consistent dims")
    }
}

pub fn to_u8(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}
