//! Shared encoder, two-level vector quantizer and parameter regressor.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{Conv, Dense};
use crate::procgen::PARAM_LIMIT;
use crate::seeds::rng_for;
use crate::tensor::{Graph, ParamStore, Real, Tensor, Var};

pub const PERCEPTION_OWNER: &str = "perception";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PerceptionConfig {
    pub image_size: usize,
    pub param_dim: usize,
    pub stem_channels: usize,
    pub code_dim: usize,
    pub codebook_size: usize,
    pub regressor_channels: usize,
}

impl Default for PerceptionConfig {
    fn default() -> Self {
        Self {
            image_size: 64,
            param_dim: crate::procgen::PARAM_DIM,
            stem_channels: 32,
            code_dim: 64,
            codebook_size: 128,
            regressor_channels: 128,
        }
    }
}

impl PerceptionConfig {
    pub fn validate(&self) -> Result<()> {
        if !self.image_size.is_power_of_two() || self.image_size < 16 {
            return Err(Error::Invalid(format!("perception image_size {} must be a power of two ≥ 16", self.image_size)));
        }
        if self.param_dim == 0 || self.stem_channels == 0 || self.code_dim == 0 || self.codebook_size == 0 || self.regressor_channels == 0 {
            return Err(Error::Invalid("perception widths must be positive".into()));
        }
        Ok(())
    }

    /// Side of the bottom latent grid.
    pub fn bottom_size(&self) -> usize {
        self.image_size / 4
    }

    fn regressor_stages(&self) -> usize {
        // bottom grid down to 2×2
        (self.bottom_size() / 2).trailing_zeros() as usize
    }

    pub fn feature_dim(&self) -> usize {
        4 * self.regressor_channels
    }
}

/// Nearest-code assignment of one latent grid.
#[derive(Clone, Debug)]
pub struct QuantizationResult {
    /// Row-major over `[N, H, W]`.
    pub indices: Vec<usize>,
    pub grid: [usize; 3],
    /// Straight-through output, same shape as the latent.
    pub quantized: Var,
    /// Mean over latent elements of `(sg[z] − e)²`.
    pub codebook_loss: Var,
    /// Mean over latent elements of `(sg[e] − z)²`.
    pub commitment_loss: Var,
}

/// Index of the nearest row of `codebook[K,D]` for each row of `z[M,D]`,
/// ties resolved toward the lowest index. Distances are accumulated in `f64`.
pub fn nearest_codes<T: Real>(z: &[T], codebook: &[T], d: usize) -> Vec<usize> {
    let m = z.len() / d;
    let k = codebook.len() / d;
    let z64: Vec<f64> = z.iter().map(|v| v.f64()).collect();
    let e64: Vec<f64> = codebook.iter().map(|v| v.f64()).collect();
    let norms: Vec<f64> = e64.chunks(d).map(|e| e.iter().map(|v| v * v).sum()).collect();
    let mut cross = vec![0.0f64; m * k];
    f64::gemm(m, d, k, &z64, false, &e64, true, &mut cross, false);
    cross
        .chunks(k)
        .map(|row| {
            let mut best = 0;
            let mut best_d = f64::INFINITY;
            for (j, (&c, &n)) in row.iter().zip(&norms).enumerate() {
                let dist = n - 2.0 * c;
                if dist < best_d {
                    best_d = dist;
                    best = j;
                }
            }
            best
        })
        .collect()
}

/// Quantizes `latent[N,D,H,W]` against `codebook[K,D]`.
pub fn quantize<T: Real>(g: &mut Graph<T>, latent: Var, codebook: Var) -> Result<QuantizationResult> {
    let s = g.shape(latent).to_vec();
    let cb = g.shape(codebook).to_vec();
    if cb.len() != 2 || cb[0] == 0 {
        return Err(Error::Invalid(format!("codebook must be a non-empty [K, D] matrix, got {cb:?}")));
    }
    if s.len() != 4 || s[1] != cb[1] {
        return Err(Error::Invalid(format!("latent {s:?} does not match code dimension {}", cb[1])));
    }
    let rows = g.to_rows(latent)?;
    let indices = nearest_codes(g.value(rows).data(), g.value(codebook).data(), cb[1]);
    let m = (indices.len() * cb[1]) as f64;
    let e = g.gather_rows(codebook, &indices)?;

    let z_sg = g.stop_gradient(rows)?;
    let diff = g.sub(z_sg, e)?;
    let sq = g.mul(diff, diff)?;
    let total = g.sum(sq)?;
    let codebook_loss = g.scale(total, 1.0 / m)?;

    let e_sg = g.stop_gradient(e)?;
    let diff = g.sub(e_sg, rows)?;
    let sq = g.mul(diff, diff)?;
    let total = g.sum(sq)?;
    let commitment_loss = g.scale(total, 1.0 / m)?;

    let q = g.straight_through(rows, e)?;
    let quantized = g.from_rows(q, [s[0], s[1], s[2], s[3]])?;
    Ok(QuantizationResult {
        indices,
        grid: [s[0], s[2], s[3]],
        quantized,
        codebook_loss,
        commitment_loss,
    })
}

/// Bottom quantized grid concatenated with the ×2 nearest-upsampled top grid.
pub fn assemble_features<T: Real>(g: &mut Graph<T>, bottom: Var, top: Var) -> Result<Var> {
    let up = g.upsample2(top)?;
    let (sb, su) = (g.shape(bottom), g.shape(up));
    if sb.len() != 4 || su.len() != 4 || sb[0] != su[0] || sb[2..] != su[2..] {
        return Err(Error::Invalid(format!(
            "bottom grid {:?} and upsampled top grid {:?} differ in extent",
            sb, su
        )));
    }
    g.concat_channels(bottom, up)
}

#[derive(Clone, Debug)]
pub struct PerceptionOutput {
    /// `[N, feature_dim]`.
    pub features: Var,
    /// `[N, P]`, strictly inside `(-2.5, 2.5)`.
    pub params: Var,
    pub bottom: QuantizationResult,
    pub top: QuantizationResult,
    /// Sum over both levels.
    pub codebook_loss: Var,
    pub commitment_loss: Var,
}

/// Encoder, codebooks, feature assembly and regressor in one parameter set.
#[derive(Clone, Debug)]
pub struct Perception<T> {
    config: PerceptionConfig,
    params: ParamStore<T>,
    enc1: Conv,
    enc2: Conv,
    enc_top: Conv,
    codebook_bottom: usize,
    codebook_top: usize,
    reg: Vec<Conv>,
    head: Dense,
}

impl<T: Real> Perception<T> {
    pub fn new(config: PerceptionConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = rng_for(seed, "perception-init", 0);
        let mut params = ParamStore::new(PERCEPTION_OWNER);
        let (c1, d) = (config.stem_channels, config.code_dim);
        let enc1 = Conv::new(&mut params, "enc1", 3, c1, 3, 2, &mut rng);
        let enc2 = Conv::new(&mut params, "enc2", c1, d, 3, 2, &mut rng);
        let enc_top = Conv::new(&mut params, "enc_top", d, d, 3, 2, &mut rng);
        let std = 1.0 / (d as f64).sqrt();
        let codebook_bottom = params.push_normal("codebook_bottom", &[config.codebook_size, d], std, &mut rng);
        let codebook_top = params.push_normal("codebook_top", &[config.codebook_size, d], std, &mut rng);
        let mut reg = Vec::new();
        let mut cin = 2 * d;
        for i in 0..config.regressor_stages() {
            reg.push(Conv::new(&mut params, &format!("reg{i}"), cin, config.regressor_channels, 3, 2, &mut rng));
            cin = config.regressor_channels;
        }
        let head = Dense::new(&mut params, "head", config.feature_dim(), config.param_dim, &mut rng);
        Ok(Self {
            config,
            params,
            enc1,
            enc2,
            enc_top,
            codebook_bottom,
            codebook_top,
            reg,
            head,
        })
    }

    pub fn config(&self) -> &PerceptionConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore<T> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.params
    }

    pub fn cast<U: Real>(&self) -> Perception<U> {
        Perception {
            config: self.config.clone(),
            params: self.params.cast(),
            enc1: self.enc1,
            enc2: self.enc2,
            enc_top: self.enc_top,
            codebook_bottom: self.codebook_bottom,
            codebook_top: self.codebook_top,
            reg: self.reg.clone(),
            head: self.head,
        }
    }

    /// Slot indices of the bottom and top codebooks in the parameter store.
    pub fn codebook_slots(&self) -> (usize, usize) {
        (self.codebook_bottom, self.codebook_top)
    }

    /// `image[N,3,S,S] → (bottom[N,D,S/4,S/4], top[N,D,S/8,S/8])`, both pre-quantization.
    pub fn encode(&self, g: &mut Graph<T>, vars: &[Var], images: Var) -> Result<(Var, Var)> {
        let s = g.shape(images);
        let n = self.config.image_size;
        if s.len() != 4 || s[1] != 3 || s[2] != n || s[3] != n {
            return Err(Error::Invalid(format!("perception expects [N, 3, {n}, {n}] images, got {s:?}")));
        }
        let h = self.enc1.apply(g, vars, images)?;
        let h = g.relu(h)?;
        let bottom = self.enc2.apply(g, vars, h)?;
        let h = g.relu(bottom)?;
        let top = self.enc_top.apply(g, vars, h)?;
        Ok((bottom, top))
    }

    /// `features[N,2D,S/4,S/4] → (f[N,F], p[N,P])`.
    pub fn regress(&self, g: &mut Graph<T>, vars: &[Var], features: Var) -> Result<(Var, Var)> {
        let mut h = features;
        for conv in &self.reg {
            h = conv.apply(g, vars, h)?;
            h = g.relu(h)?;
        }
        let f = g.flatten(h)?;
        let raw = self.head.apply(g, vars, f)?;
        let t = g.tanh(raw)?;
        let p = g.scale(t, PARAM_LIMIT as f64)?;
        Ok((f, p))
    }

    pub fn forward_full(&self, g: &mut Graph<T>, vars: &[Var], images: Var) -> Result<PerceptionOutput> {
        let (zb, zt) = self.encode(g, vars, images)?;
        let bottom = quantize(g, zb, vars[self.codebook_bottom])?;
        let top = quantize(g, zt, vars[self.codebook_top])?;
        let grid = assemble_features(g, bottom.quantized, top.quantized)?;
        let (features, params) = self.regress(g, vars, grid)?;
        let codebook_loss = g.add(bottom.codebook_loss, top.codebook_loss)?;
        let commitment_loss = g.add(bottom.commitment_loss, top.commitment_loss)?;
        Ok(PerceptionOutput {
            features,
            params,
            bottom,
            top,
            codebook_loss,
            commitment_loss,
        })
    }

    /// Inference on `[N,3,S,S]` images in chunks of `chunk`: `(f[N,F], p[N,P])`.
    pub fn predict(&self, images: &Tensor<T>, chunk: usize) -> Result<(Tensor<T>, Tensor<T>)> {
        let n = images.shape()[0];
        let (mut fs, mut ps) = (Vec::new(), Vec::new());
        let mut start = 0;
        while start < n {
            let count = chunk.max(1).min(n - start);
            let mut g = Graph::new();
            let vars = self.params.bind(&mut g)?;
            let x = g.input(images.slice_outer(start, count)?)?;
            let out = self.forward_full(&mut g, &vars, x)?;
            fs.push(g.value(out.features).clone());
            ps.push(g.value(out.params).clone());
            start += count;
        }
        Ok((concat_rows(&fs)?, concat_rows(&ps)?))
    }
}

fn concat_rows<T: Real>(parts: &[Tensor<T>]) -> Result<Tensor<T>> {
    let cols = parts[0].shape()[1];
    let rows: usize = parts.iter().map(|t| t.shape()[0]).sum();
    let data = parts.iter().flat_map(|t| t.data().iter().copied()).collect();
    Tensor::new(&[rows, cols], data)
}
