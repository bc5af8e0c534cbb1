//! Procedural stand-in for the game engine and the synthetic two-domain corpus.
//!
//! The parameter layout is fixed at 32 coordinates: 28 identity attributes
//! followed by 4 nuisance attributes (in-plane rotation, x/y translation,
//! global scale). Every coordinate lives in `[-2.5, 2.5]`.

mod corpus;
mod image;
mod mask;
mod ppm;
mod render;
mod shift;

pub use corpus::{
    build_corpus, corpus_digest, load_ground_truth, CorpusConfig, GroundTruth, Manifest, SourceEntry, Split,
    TargetEntry, MANIFEST_FILE, GROUND_TRUTH_FILE,
};
pub use image::Image;
pub use mask::{mask_region, MaskRegion};
pub use ppm::{decode_ppm, encode_ppm, read_ppm, write_ppm};
pub use render::{rasterize, render_engine, Raster, BACKGROUND};
pub use shift::{render_source_view, DomainShift};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seeds::rng_for;

/// Number of coordinates the procedural engine understands.
pub const PARAM_DIM: usize = 32;
/// Coordinates `0..IDENTITY_DIM` describe the person.
pub const IDENTITY_DIM: usize = 28;
pub const PARAM_LIMIT: f32 = 2.5;
/// Views of one identity only vary nuisance coordinates within this bound.
pub const VIEW_LIMIT: f32 = 1.0;

/// Named indices into a [`ParamVector`].
pub mod layout {
    pub const HEAD_HALF_WIDTH: usize = 0;
    pub const HEAD_HALF_HEIGHT: usize = 1;
    pub const EYE_SPACING: usize = 2;
    pub const EYE_SIZE: usize = 3;
    pub const EYE_HEIGHT: usize = 4;
    pub const EYE_TILT: usize = 5;
    pub const BROW_THICKNESS: usize = 6;
    pub const BROW_TILT: usize = 7;
    pub const NOSE_WIDTH: usize = 8;
    pub const NOSE_LENGTH: usize = 9;
    pub const MOUTH_WIDTH: usize = 10;
    pub const MOUTH_HEIGHT: usize = 11;
    pub const MOUTH_CURVATURE: usize = 12;
    pub const CHIN_OFFSET: usize = 13;
    pub const SKIN_R: usize = 14;
    pub const SKIN_G: usize = 15;
    pub const SKIN_B: usize = 16;
    pub const IRIS_TONE: usize = 17;
    pub const HAIR_BAND_HEIGHT: usize = 18;
    pub const CHEEK_SHADING: usize = 19;
    pub const HAIR_R: usize = 20;
    pub const HAIR_G: usize = 21;
    pub const HAIR_B: usize = 22;
    pub const LIP_TONE: usize = 23;
    pub const BROW_DARKNESS: usize = 24;
    pub const EYE_ASPECT: usize = 25;
    pub const NOSE_SHADE: usize = 26;
    pub const JAW_WIDTH: usize = 27;
    pub const ROTATION: usize = 28;
    pub const TRANSLATE_X: usize = 29;
    pub const TRANSLATE_Y: usize = 30;
    pub const SCALE: usize = 31;
}

/// Bounded renderer parameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ParamVector(Vec<f32>);

impl ParamVector {
    /// Validates length, finiteness and the `[-2.5, 2.5]` range.
    pub fn new(values: Vec<f32>) -> Result<Self> {
        if values.len() != PARAM_DIM {
            return Err(Error::Invalid(format!(
                "parameter vector has {} entries, the engine expects {PARAM_DIM}",
                values.len()
            )));
        }
        for (i, &v) in values.iter().enumerate() {
            if !v.is_finite() || v.abs() > PARAM_LIMIT {
                return Err(Error::ParamRange {
                    index: i,
                    value: v as f64,
                    lo: -PARAM_LIMIT as f64,
                    hi: PARAM_LIMIT as f64,
                });
            }
        }
        Ok(Self(values))
    }

    pub fn zeros() -> Self {
        Self(vec![0.0; PARAM_DIM])
    }

    pub fn values(&self) -> &[f32] {
        &self.0
    }

    pub fn identity_part(&self) -> &[f32] {
        &self.0[..IDENTITY_DIM]
    }

    pub fn nuisance_part(&self) -> &[f32] {
        &self.0[IDENTITY_DIM..]
    }

    /// Joins identity attributes with view nuisance values.
    pub fn compose(identity: &[f32], nuisance: &[f32]) -> Result<Self> {
        let mut v = identity.to_vec();
        v.extend_from_slice(nuisance);
        Self::new(v)
    }

    /// Coordinate `i` normalised to `[-1, 1]`.
    pub(crate) fn unit(&self, i: usize) -> f64 {
        (self.0[i] / PARAM_LIMIT) as f64
    }
}

/// Identity coordinates uniform on `[-2.5, 2.5]`, nuisance on `[-1, 1]`.
pub fn sample_params(seed: u64) -> ParamVector {
    let mut rng = rng_for(seed, "params", 0);
    let values = (0..PARAM_DIM)
        .map(|i| {
            let lim = if i < IDENTITY_DIM { PARAM_LIMIT } else { VIEW_LIMIT };
            rng.gen_range(-lim..=lim)
        })
        .collect();
    ParamVector(values)
}

/// One photo of a synthetic person: nuisance values plus a noise seed.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ViewSpec {
    pub nuisance: [f32; PARAM_DIM - IDENTITY_DIM],
    pub photometric_seed: u64,
}

impl ViewSpec {
    pub fn sample(seed: u64) -> Self {
        let mut rng = rng_for(seed, "view", 0);
        let mut nuisance = [0.0; PARAM_DIM - IDENTITY_DIM];
        for v in &mut nuisance {
            *v = rng.gen_range(-VIEW_LIMIT..=VIEW_LIMIT);
        }
        Self {
            nuisance,
            photometric_seed: rng.gen(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if let Some(i) = self.nuisance.iter().position(|v| !v.is_finite() || v.abs() > VIEW_LIMIT) {
            return Err(Error::ParamRange {
                index: IDENTITY_DIM + i,
                value: self.nuisance[i] as f64,
                lo: -VIEW_LIMIT as f64,
                hi: VIEW_LIMIT as f64,
            });
        }
        Ok(())
    }
}

/// A synthetic person: fixed identity attributes seen through several views.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IdentityRecord {
    pub id: u64,
    pub identity_params: Vec<f32>,
    /// Constant colour cast applied to every photo of this person.
    pub tint: [f32; 3],
    pub views: Vec<ViewSpec>,
}

impl IdentityRecord {
    /// Deterministic identity `id` with `n_views` views derived from `seed`.
    pub fn sample(seed: u64, id: u64, n_views: usize) -> Self {
        let base = sample_params(crate::seeds::sub_seed(seed, "identity", id));
        let mut rng = rng_for(seed, "tint", id);
        let tint = [
            rng.gen_range(-0.05..=0.05),
            rng.gen_range(-0.05..=0.05),
            rng.gen_range(-0.05..=0.05),
        ];
        let views = (0..n_views)
            .map(|v| ViewSpec::sample(crate::seeds::sub_seed(seed, &format!("view-{id}"), v as u64)))
            .collect();
        Self {
            id,
            identity_params: base.identity_part().to_vec(),
            tint,
            views,
        }
    }

    pub fn params_for(&self, view: &ViewSpec) -> Result<ParamVector> {
        view.validate()?;
        ParamVector::compose(&self.identity_params, &view.nuisance)
    }
}
