//! Neural stand-in for the engine: parameters → image, differentiable in `p`.

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::data::ImageStore;
use crate::error::{Error, Result};
use crate::nn::{Conv, ConvUp, Dense};
use crate::procgen::{Image, ParamVector};
use crate::seeds::rng_for;
use crate::tensor::{Adam, AdamConfig, Graph, ParamStore, Real, Tensor, Var};

pub const IMITATOR_OWNER: &str = "imitator";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ImitatorConfig {
    pub param_dim: usize,
    pub image_size: usize,
    /// Width of the 4×4 seed grid; the ladder halves it per stage after the first.
    pub base_channels: usize,
}

impl Default for ImitatorConfig {
    fn default() -> Self {
        Self {
            param_dim: crate::procgen::PARAM_DIM,
            image_size: 64,
            base_channels: 128,
        }
    }
}

impl ImitatorConfig {
    pub fn validate(&self) -> Result<()> {
        if self.param_dim == 0 || !self.image_size.is_power_of_two() || self.image_size < 8 || self.base_channels < 8 {
            return Err(Error::Invalid(format!("bad imitator config {self:?}")));
        }
        Ok(())
    }

    /// Output channels of each transposed-conv stage, 4×4 up to full size.
    pub fn ladder(&self) -> Vec<usize> {
        let stages = (self.image_size / 4).trailing_zeros() as usize;
        (0..stages)
            .map(|i| if i == 0 { self.base_channels } else { (self.base_channels >> i).max(8) })
            .collect()
    }
}

/// `p → FC 4×4×C → (ConvT ×2, relu)* → 3×3 conv → sigmoid`.
#[derive(Clone, Debug)]
pub struct ImitatorNet<T> {
    config: ImitatorConfig,
    params: ParamStore<T>,
    fc: Dense,
    ups: Vec<ConvUp>,
    out: Conv,
}

impl<T: Real> ImitatorNet<T> {
    pub fn new(config: ImitatorConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = rng_for(seed, "imitator-init", 0);
        let mut params = ParamStore::new(IMITATOR_OWNER);
        let c0 = config.base_channels;
        let fc = Dense::new(&mut params, "fc", config.param_dim, 16 * c0, &mut rng);
        let mut ups = Vec::new();
        let mut cin = c0;
        for (i, &c) in config.ladder().iter().enumerate() {
            ups.push(ConvUp::new(&mut params, &format!("up{i}"), cin, c, &mut rng));
            cin = c;
        }
        let out = Conv::new(&mut params, "out", cin, 3, 3, 1, &mut rng);
        Ok(Self {
            config,
            params,
            fc,
            ups,
            out,
        })
    }

    pub fn config(&self) -> &ImitatorConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore<T> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.params
    }

    pub fn is_frozen(&self) -> bool {
        self.params.is_frozen()
    }

    pub fn freeze(&mut self) {
        self.params.freeze();
    }

    pub fn digest(&self) -> String {
        self.params.digest()
    }

    pub fn cast<U: Real>(&self) -> ImitatorNet<U> {
        ImitatorNet {
            config: self.config.clone(),
            params: self.params.cast(),
            fc: self.fc,
            ups: self.ups.clone(),
            out: self.out,
        }
    }

    /// `p[N,P] → image[N,3,S,S]`; `vars` come from `self.params().bind(g)`.
    pub fn forward(&self, g: &mut Graph<T>, vars: &[Var], p: Var) -> Result<Var> {
        let s = g.shape(p).to_vec();
        if s.len() != 2 || s[1] != self.config.param_dim {
            return Err(Error::Invalid(format!(
                "imitator expects [N, {}] parameters, got {s:?}",
                self.config.param_dim
            )));
        }
        let h = self.fc.apply(g, vars, p)?;
        let h = g.relu(h)?;
        let mut h = g.reshape(h, &[s[0], self.config.base_channels, 4, 4])?;
        for up in &self.ups {
            h = up.apply(g, vars, h)?;
            h = g.relu(h)?;
        }
        let h = self.out.apply(g, vars, h)?;
        g.sigmoid(h)
    }

    /// Forward pass on a batch of parameter rows, outside any training graph.
    pub fn render_batch(&self, p: &Tensor<T>) -> Result<Tensor<T>> {
        let mut g = Graph::new();
        let vars = self.params.bind(&mut g)?;
        let pv = g.input(p.clone())?;
        let out = self.forward(&mut g, &vars, pv)?;
        Ok(g.value(out).clone())
    }
}

impl ImitatorNet<f32> {
    pub fn imitate(&self, p: &ParamVector) -> Result<Image> {
        let t = Tensor::new(&[1, p.values().len()], p.values().to_vec())?;
        let out = self.render_batch(&t)?;
        Ok(Image::unbatch(&out)?.remove(0))
    }
}

/// Images paired with their generating parameters.
#[derive(Clone, Debug)]
pub struct LabeledSet {
    pub images: ImageStore,
    /// `[N, P]`.
    pub params: Tensor<f32>,
}

impl LabeledSet {
    pub fn new(images: ImageStore, params: &[ParamVector]) -> Result<Self> {
        if images.len() != params.len() || params.is_empty() {
            return Err(Error::Invalid(format!("{} images vs {} parameter vectors", images.len(), params.len())));
        }
        let p = params[0].values().len();
        let data = params.iter().flat_map(|v| v.values().iter().copied()).collect();
        Ok(Self {
            images,
            params: Tensor::new(&[params.len(), p], data)?,
        })
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    pub fn param_rows(&self, idx: &[usize]) -> Result<Tensor<f32>> {
        let p = self.params.shape()[1];
        let mut data = Vec::with_capacity(idx.len() * p);
        for &i in idx {
            data.extend_from_slice(&self.params.data()[i * p..(i + 1) * p]);
        }
        Tensor::new(&[idx.len(), p], data)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ImitatorTrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
}

impl Default for ImitatorTrainConfig {
    fn default() -> Self {
        Self {
            epochs: 30,
            batch_size: 128,
            lr: 3e-4,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLoss {
    pub epoch: usize,
    pub train_mse: f64,
    pub heldout_mse: f64,
}

fn batch_mse(net: &ImitatorNet<f32>, set: &LabeledSet, idx: &[usize]) -> Result<(Graph<f32>, Vec<Var>, Var)> {
    let mut g = Graph::new();
    let vars = net.params.bind(&mut g)?;
    let p = g.input(set.param_rows(idx)?)?;
    let target = g.input(set.images.batch(idx)?)?;
    let out = net.forward(&mut g, &vars, p)?;
    let d = g.sub(out, target)?;
    let sq = g.mul(d, d)?;
    let loss = g.mean(sq)?;
    Ok((g, vars, loss))
}

/// Mean per-pixel squared error of `net` over the whole set.
pub fn mean_mse(net: &ImitatorNet<f32>, set: &LabeledSet, batch_size: usize) -> Result<f64> {
    let idx: Vec<usize> = (0..set.len()).collect();
    let mut total = 0.0;
    for chunk in idx.chunks(batch_size.max(1)) {
        let (g, _, loss) = batch_mse(net, set, chunk)?;
        total += g.value(loss).item() as f64 * chunk.len() as f64;
    }
    Ok(total / set.len() as f64)
}

/// One shuffled pass over `train`; returns the epoch-mean training loss.
pub fn train_epoch(
    net: &mut ImitatorNet<f32>,
    adam: &mut Adam<f32>,
    train: &LabeledSet,
    batch_size: usize,
    seed: u64,
    epoch: usize,
) -> Result<f64> {
    let mut order: Vec<usize> = (0..train.len()).collect();
    order.shuffle(&mut rng_for(seed, "imitator-shuffle", epoch as u64));
    let mut total = 0.0;
    for chunk in order.chunks(batch_size.max(1)) {
        let (g, vars, loss) = batch_mse(net, train, chunk)?;
        let value = g.value(loss).item() as f64;
        if !value.is_finite() {
            return Err(Error::Training(format!("imitator loss diverged in epoch {epoch}")));
        }
        let grads = g.backward(loss)?;
        let gs: Vec<Tensor<f32>> = vars.iter().map(|&v| grads.get(v)).collect();
        adam.step(&mut net.params, &gs)?;
        total += value * chunk.len() as f64;
    }
    Ok(total / train.len() as f64)
}

/// Trains for `cfg.epochs`, calling `on_epoch` after each epoch (checkpoint hook).
///
/// Row 0 of the returned log is the untrained baseline.
pub fn train_imitator(
    net: &mut ImitatorNet<f32>,
    train: &LabeledSet,
    heldout: &LabeledSet,
    cfg: &ImitatorTrainConfig,
    seed: u64,
    mut on_epoch: impl FnMut(&ImitatorNet<f32>, &Adam<f32>, &EpochLoss) -> Result<()>,
) -> Result<Vec<EpochLoss>> {
    if train.is_empty() {
        return Err(Error::Invalid("empty imitator training split".into()));
    }
    let mut adam = Adam::new(
        AdamConfig {
            lr: cfg.lr,
            ..Default::default()
        },
        &net.params,
    );
    let base = mean_mse(net, heldout, cfg.batch_size)?;
    let mut log = vec![EpochLoss {
        epoch: 0,
        train_mse: mean_mse(net, train, cfg.batch_size)?,
        heldout_mse: base,
    }];
    for epoch in 1..=cfg.epochs {
        let train_mse = train_epoch(net, &mut adam, train, cfg.batch_size, seed, epoch)?;
        let row = EpochLoss {
            epoch,
            train_mse,
            heldout_mse: mean_mse(net, heldout, cfg.batch_size)?,
        };
        log::info!("imitator epoch {epoch}: train {train_mse:.5} heldout {:.5}", row.heldout_mse);
        on_epoch(net, &adam, &row)?;
        log.push(row);
    }
    Ok(log)
}
