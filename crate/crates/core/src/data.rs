//! In-memory image sets decoded from a corpus directory.

use std::path::Path;

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::procgen::{read_ppm, Image};
use crate::tensor::Tensor;

/// 8-bit images held in memory (channel-major), decoded to `f32` per batch.
#[derive(Clone, Debug)]
pub struct ImageStore {
    size: usize,
    pixels: Vec<u8>,
    len: usize,
}

impl ImageStore {
    pub fn load(dir: &Path, paths: &[&str], size: usize) -> Result<Self> {
        let per = 3 * size * size;
        let decoded: Vec<Vec<u8>> = paths
            .par_iter()
            .map(|p| -> Result<Vec<u8>> {
                let img = read_ppm(&dir.join(p))?;
                if img.height() != size || img.width() != size {
                    return Err(Error::Format(format!("{p}: expected {size}x{size}, got {}x{}", img.height(), img.width())));
                }
                Ok(img.data().iter().map(|v| (v * 255.0).round() as u8).collect())
            })
            .collect::<Result<_>>()?;
        let mut pixels = Vec::with_capacity(per * paths.len());
        for d in decoded {
            pixels.extend_from_slice(&d);
        }
        Ok(Self {
            size,
            pixels,
            len: paths.len(),
        })
    }

    pub fn from_images(images: &[Image]) -> Result<Self> {
        let size = images
            .first()
            .map(|i| i.height())
            .ok_or_else(|| Error::Invalid("empty image set".into()))?;
        let mut pixels = Vec::with_capacity(images.len() * 3 * size * size);
        for im in images {
            if im.height() != size || im.width() != size {
                return Err(Error::Invalid("images in a store must share a size".into()));
            }
            pixels.extend(im.data().iter().map(|v| (v * 255.0).round() as u8));
        }
        Ok(Self {
            size,
            pixels,
            len: images.len(),
        })
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn size(&self) -> usize {
        self.size
    }

    pub fn image(&self, i: usize) -> Image {
        let per = 3 * self.size * self.size;
        let data = self.pixels[i * per..(i + 1) * per].iter().map(|&b| b as f32 / 255.0).collect();
        Image::new(self.size, self.size, data).expect("stored images are valid")
    }

    /// `[len(idx), 3, S, S]` batch.
    pub fn batch(&self, idx: &[usize]) -> Result<Tensor<f32>> {
        let per = 3 * self.size * self.size;
        let mut data = Vec::with_capacity(idx.len() * per);
        for &i in idx {
            if i >= self.len {
                return Err(Error::Invalid(format!("image index {i} out of {}", self.len)));
            }
            data.extend(self.pixels[i * per..(i + 1) * per].iter().map(|&b| b as f32 / 255.0));
        }
        Tensor::new(&[idx.len(), 3, self.size, self.size], data)
    }
}
