use serde::{Deserialize, Serialize};

use super::Image;

/// Occlusion band used by the robustness protocol.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MaskRegion {
    Upper,
    Middle,
    Lower,
    /// No-op control region.
    None,
}

impl MaskRegion {
    pub const OCCLUDING: [MaskRegion; 3] = [MaskRegion::Upper, MaskRegion::Middle, MaskRegion::Lower];

    pub fn name(self) -> &'static str {
        match self {
            MaskRegion::Upper => "upper",
            MaskRegion::Middle => "middle",
            MaskRegion::Lower => "lower",
            MaskRegion::None => "none",
        }
    }

    /// `(row0, col0, rows, cols)` of the black rectangle for a `size×size` image.
    ///
    /// At 64×64 the rectangle is 15 rows × 10 columns, centred horizontally,
    /// with its centre row at 22, 32 or 42. Other sizes scale proportionally.
    pub fn rect(self, size: usize) -> Option<(usize, usize, usize, usize)> {
        let centre = match self {
            MaskRegion::Upper => 22.0,
            MaskRegion::Middle => 32.0,
            MaskRegion::Lower => 42.0,
            MaskRegion::None => return None,
        };
        let s = size as f64 / 64.0;
        let rows = ((15.0 * s).round() as usize).max(1);
        let cols = ((10.0 * s).round() as usize).max(1);
        let cy = (centre * s).round() as usize;
        let row0 = cy.saturating_sub(rows / 2).min(size - rows);
        let col0 = (size - cols) / 2;
        Some((row0, col0, rows, cols))
    }
}

/// Copy of `image` with the region's rectangle set to 0 in every channel.
pub fn mask_region(image: &Image, region: MaskRegion) -> Image {
    let mut out = image.clone();
    let Some((r0, c0, rows, cols)) = region.rect(image.height().min(image.width())) else {
        return out;
    };
    let (h, w) = (image.height(), image.width());
    let data = out.data_mut();
    for c in 0..3 {
        for y in r0..r0 + rows {
            let base = (c * h + y) * w;
            data[base + c0..base + c0 + cols].fill(0.0);
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn masks_exactly_450_scalars() {
        let img = Image::filled(64, 0.7).unwrap();
        for region in MaskRegion::OCCLUDING {
            let m = mask_region(&img, region);
            let zeros = m.data().iter().filter(|&&v| v == 0.0).count();
            assert_eq!(zeros, 15 * 10 * 3);
            assert_eq!(mask_region(&m, region), m);
            let changed = img.data().iter().zip(m.data()).filter(|(a, b)| a != b).count();
            assert_eq!(changed, 450);
        }
    }

    #[test]
    fn middle_mask_geometry() {
        let (r0, c0, rows, cols) = MaskRegion::Middle.rect(64).unwrap();
        assert_eq!((rows, cols), (15, 10));
        assert_eq!(r0 + rows / 2, 32);
        // columns 27..37 straddle the midline x = 32 symmetrically
        assert_eq!(c0 * 2 + cols, 64);
    }

    #[test]
    fn none_region_is_a_no_op() {
        let img = Image::filled(64, 0.3).unwrap();
        assert_eq!(mask_region(&img, MaskRegion::None), img);
    }
}
