use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// RGB image in `[0, 1]`, stored channel-major (`3×H×W`).
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    height: usize,
    width: usize,
    data: Vec<f32>,
}

impl Image {
    pub fn new(height: usize, width: usize, data: Vec<f32>) -> Result<Self> {
        if !height.is_power_of_two() || !width.is_power_of_two() {
            return Err(Error::Invalid(format!(
                "image extents must be powers of two, got {height}x{width}"
            )));
        }
        if data.len() != 3 * height * width {
            return Err(Error::Invalid(format!(
                "{height}x{width}x3 image needs {} values, got {}",
                3 * height * width,
                data.len()
            )));
        }
        if data.iter().any(|v| !v.is_finite() || *v < 0.0 || *v > 1.0) {
            return Err(Error::Invalid("pixel values must lie in [0, 1]".into()));
        }
        Ok(Self { height, width, data })
    }

    /// Builds an image, clamping every channel into `[0, 1]`.
    pub fn from_clamped(height: usize, width: usize, mut data: Vec<f32>) -> Result<Self> {
        for v in &mut data {
            *v = if v.is_nan() { 0.0 } else { v.clamp(0.0, 1.0) };
        }
        Self::new(height, width, data)
    }

    pub fn filled(size: usize, value: f32) -> Result<Self> {
        Self::new(size, size, vec![value; 3 * size * size])
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub(crate) fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    #[inline]
    pub fn get(&self, c: usize, y: usize, x: usize) -> f32 {
        self.data[(c * self.height + y) * self.width + x]
    }

    /// Stacks images into an `[N, 3, H, W]` tensor.
    pub fn batch(images: &[&Image]) -> Result<Tensor<f32>> {
        let first = images
            .first()
            .ok_or_else(|| Error::Invalid("empty image batch".into()))?;
        let mut data = Vec::with_capacity(images.len() * first.data.len());
        for im in images {
            if (im.height, im.width) != (first.height, first.width) {
                return Err(Error::Invalid("images in a batch must share a size".into()));
            }
            data.extend_from_slice(&im.data);
        }
        Tensor::new(&[images.len(), 3, first.height, first.width], data)
    }

    /// Splits an `[N, 3, H, W]` tensor back into images (values clamped).
    pub fn unbatch(t: &Tensor<f32>) -> Result<Vec<Image>> {
        let s = t.shape();
        if s.len() != 4 || s[1] != 3 {
            return Err(Error::Invalid(format!("expected [N,3,H,W], got {s:?}")));
        }
        let per = 3 * s[2] * s[3];
        t.data()
            .chunks(per)
            .map(|c| Image::from_clamped(s[2], s[3], c.to_vec()))
            .collect()
    }

    /// Mean squared difference per scalar.
    pub fn mse(&self, other: &Image) -> f64 {
        assert_eq!(self.data.len(), other.data.len());
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| ((a - b) as f64).powi(2))
            .sum::<f64>()
            / self.data.len() as f64
    }
}
