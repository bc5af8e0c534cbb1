//! Fixed photometric transform that turns engine renders into "photos".

use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{rasterize, Image, IdentityRecord, Raster, ViewSpec};
use crate::error::Result;
use crate::seeds::rng_for;

/// The source-domain shift, applied in field order.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DomainShift {
    pub gamma: f32,
    /// Background colour at the top and bottom rows (after gamma).
    pub gradient_top: [f32; 3],
    pub gradient_bottom: [f32; 3],
    pub blur: bool,
    pub noise_sigma: f32,
}

impl Default for DomainShift {
    fn default() -> Self {
        Self {
            gamma: 0.8,
            gradient_top: [0.62, 0.66, 0.74],
            gradient_bottom: [0.22, 0.22, 0.27],
            blur: true,
            noise_sigma: 0.03,
        }
    }
}

impl DomainShift {
    /// Gamma, background gradient, 3×3 box blur, pixel noise, tint, clamp.
    pub fn apply(&self, raster: &Raster, noise_seed: u64, tint: [f32; 3]) -> Result<Image> {
        let img = &raster.image;
        let (h, w) = (img.height(), img.width());
        let n = h * w;
        let mut data: Vec<f32> = img.data().iter().map(|v| v.powf(self.gamma)).collect();

        let flat: Vec<f32> = super::BACKGROUND.iter().map(|&b| (b as f32).powf(self.gamma)).collect();
        for y in 0..h {
            let t = y as f32 / (h - 1).max(1) as f32;
            for c in 0..3 {
                let g = self.gradient_top[c] + (self.gradient_bottom[c] - self.gradient_top[c]) * t;
                for x in 0..w {
                    let i = y * w + x;
                    data[c * n + i] += raster.background_weight[i] * (g - flat[c]);
                }
            }
        }

        if self.blur {
            data = box_blur3(&data, h, w);
        }

        if self.noise_sigma > 0.0 {
            let mut rng = rng_for(noise_seed, "pixel-noise", 0);
            let normal = Normal::new(0.0f32, self.noise_sigma).expect("positive sigma");
            for v in &mut data {
                *v += normal.sample(&mut rng);
            }
        }

        for c in 0..3 {
            for v in &mut data[c * n..(c + 1) * n] {
                *v += tint[c];
            }
        }
        Image::from_clamped(h, w, data)
    }
}

/// 3×3 mean filter per channel with edge replication.
fn box_blur3(data: &[f32], h: usize, w: usize) -> Vec<f32> {
    let n = h * w;
    let mut out = vec![0.0f32; data.len()];
    for c in 0..3 {
        let src = &data[c * n..(c + 1) * n];
        let dst = &mut out[c * n..(c + 1) * n];
        for y in 0..h {
            for x in 0..w {
                let mut acc = 0.0;
                for dy in [-1isize, 0, 1] {
                    let yy = (y as isize + dy).clamp(0, h as isize - 1) as usize;
                    for dx in [-1isize, 0, 1] {
                        let xx = (x as isize + dx).clamp(0, w as isize - 1) as usize;
                        acc += src[yy * w + xx];
                    }
                }
                dst[y * w + x] = acc / 9.0;
            }
        }
    }
    out
}

/// Engine render of one view of `identity`, pushed through the domain shift.
pub fn render_source_view(identity: &IdentityRecord, view: &ViewSpec, size: usize, shift: &DomainShift) -> Result<Image> {
    let p = identity.params_for(view)?;
    let raster = rasterize(&p, size)?;
    shift.apply(&raster, view.photometric_seed, identity.tint)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::procgen::render_engine;

    #[test]
    fn gray_image_passes_gamma_then_blur() {
        let raster = Raster {
            image: Image::filled(16, 0.5).unwrap(),
            background_weight: vec![0.0; 256],
        };
        let shift = DomainShift {
            noise_sigma: 0.0,
            ..Default::default()
        };
        let out = shift.apply(&raster, 0, [0.0; 3]).unwrap();
        let expect = 0.5f32.powf(0.8);
        for c in 0..3 {
            for y in 1..15 {
                for x in 1..15 {
                    assert!((out.get(c, y, x) - expect).abs() < 1e-6);
                }
            }
        }
    }

    #[test]
    fn tint_is_additive() {
        let raster = Raster {
            image: Image::filled(8, 0.5).unwrap(),
            background_weight: vec![0.0; 64],
        };
        let shift = DomainShift {
            noise_sigma: 0.0,
            ..Default::default()
        };
        let out = shift.apply(&raster, 0, [0.05, -0.05, 0.0]).unwrap();
        let base = 0.5f32.powf(0.8);
        assert!((out.get(0, 4, 4) - (base + 0.05)).abs() < 1e-6);
        assert!((out.get(1, 4, 4) - (base - 0.05)).abs() < 1e-6);
    }

    #[test]
    fn views_are_deterministic_and_distinct() {
        let id = IdentityRecord::sample(1, 4, 2);
        let shift = DomainShift::default();
        let a = render_source_view(&id, &id.views[0], 64, &shift).unwrap();
        let b = render_source_view(&id, &id.views[0], 64, &shift).unwrap();
        let c = render_source_view(&id, &id.views[1], 64, &shift).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
    }

    #[test]
    fn shift_moves_pixel_statistics() {
        let id = IdentityRecord::sample(2, 0, 1);
        let p = id.params_for(&id.views[0]).unwrap();
        let engine = render_engine(&p, 64).unwrap();
        let photo = render_source_view(&id, &id.views[0], 64, &DomainShift::default()).unwrap();
        assert!(engine.mse(&photo) > 1e-3);
    }
}
