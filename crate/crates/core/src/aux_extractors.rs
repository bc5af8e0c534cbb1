//! Frozen auxiliary extractors used by the consistency loss: an analytic
//! geometry descriptor and a small identity-embedding network.

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::data::ImageStore;
use crate::error::{Error, Result};
use crate::nn::{Conv, Dense};
use crate::seeds::rng_for;
use crate::tensor::{Adam, AdamConfig, Graph, ParamStore, Real, Tensor, Var};

pub const GEOMETRY_DIM: usize = 12;
pub const EMBED_DIM: usize = 64;
pub const ID_OWNER: &str = "id-extractor";
const LUMA: [f64; 3] = [0.299, 0.587, 0.114];

/// `images[N,3,H,W] → [N,12]`: channel means, channel variances, the three
/// luminance central second moments (minus those of a uniform image) and the
/// luminance fractions of the top/middle/bottom row bands.
pub fn geometry_embed<T: Real>(g: &mut Graph<T>, images: Var) -> Result<Var> {
    let s = g.shape(images).to_vec();
    if s.len() != 4 || s[1] != 3 {
        return Err(Error::Invalid(format!("geometry descriptor expects [N, 3, H, W], got {s:?}")));
    }
    let (n, h, w) = (s[0], s[2], s[3]);
    let hw = (h * w) as f64;

    let sum_hw = g.sum_axes(images, &[2, 3])?;
    let mean = g.scale(sum_hw, 1.0 / hw)?;
    let mean = g.reshape(mean, &[n, 3])?;
    let sq = g.mul(images, images)?;
    let sq = g.sum_axes(sq, &[2, 3])?;
    let sq = g.scale(sq, 1.0 / hw)?;
    let sq = g.reshape(sq, &[n, 3])?;
    let m2 = g.mul(mean, mean)?;
    let var = g.sub(sq, m2)?;

    let luma_w = g.input(Tensor::from_f64(&[1, 3, 1, 1], &LUMA)?)?;
    let l = g.mul(images, luma_w)?;
    let l = g.sum_axes(l, &[1])?;
    let l = g.reshape(l, &[n, h * w])?;
    let mass = g.sum_axes(l, &[1])?;
    let mass = g.add_scalar(mass, 1e-6)?;

    let mut xs = Vec::with_capacity(h * w);
    let mut ys = Vec::with_capacity(h * w);
    for y in 0..h {
        for x in 0..w {
            xs.push((x as f64 + 0.5) / w as f64);
            ys.push((y as f64 + 0.5) / h as f64);
        }
    }
    let weighted = |g: &mut Graph<T>, coord: &[f64]| -> Result<Var> {
        let c = g.input(Tensor::from_f64(&[1, h * w], coord)?)?;
        let lc = g.mul(l, c)?;
        let s = g.sum_axes(lc, &[1])?;
        g.div(s, mass)
    };
    let xx: Vec<f64> = xs.iter().map(|v| v * v).collect();
    let yy: Vec<f64> = ys.iter().map(|v| v * v).collect();
    let xy: Vec<f64> = xs.iter().zip(&ys).map(|(a, b)| a * b).collect();
    let mx = weighted(g, &xs)?;
    let my = weighted(g, &ys)?;
    let exx = weighted(g, &xx)?;
    let eyy = weighted(g, &yy)?;
    let exy = weighted(g, &xy)?;
    let uniform = |k: usize| {
        let mean = (0..k).map(|i| (i as f64 + 0.5) / k as f64).sum::<f64>() / k as f64;
        (0..k).map(|i| ((i as f64 + 0.5) / k as f64 - mean).powi(2)).sum::<f64>() / k as f64
    };
    let central = |g: &mut Graph<T>, e2: Var, a: Var, b: Var, base: f64| -> Result<Var> {
        let ab = g.mul(a, b)?;
        let mu = g.sub(e2, ab)?;
        g.add_scalar(mu, -base)
    };
    let mu20 = central(g, exx, mx, mx, uniform(w))?;
    let mu02 = central(g, eyy, my, my, uniform(h))?;
    let mu11 = central(g, exy, mx, my, 0.0)?;

    let mut bands = Vec::with_capacity(3);
    for k in 0..3 {
        let mask: Vec<f64> = (0..h * w).map(|i| if 3 * (i / w) / h == k { 1.0 } else { 0.0 }).collect();
        bands.push(weighted(g, &mask)?);
    }

    let pieces = [mean, var, mu20, mu02, mu11, bands[0], bands[1], bands[2]];
    let mut out: Option<Var> = None;
    for p in pieces {
        let k = g.shape(p)[1];
        let p4 = g.reshape(p, &[n, k, 1, 1])?;
        out = Some(match out {
            None => p4,
            Some(acc) => g.concat_channels(acc, p4)?,
        });
    }
    g.reshape(out.expect("non-empty"), &[n, GEOMETRY_DIM])
}

/// Geometry descriptors of a batch, outside any training graph.
pub fn geometry_values(images: &Tensor<f32>) -> Result<Tensor<f32>> {
    let mut g = Graph::new();
    let x = g.input(images.clone())?;
    let d = geometry_embed(&mut g, x)?;
    Ok(g.value(d).clone())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct IdNetConfig {
    pub image_size: usize,
    pub channels: [usize; 4],
    pub embed_dim: usize,
}

impl Default for IdNetConfig {
    fn default() -> Self {
        Self {
            image_size: 64,
            channels: [16, 32, 64, 64],
            embed_dim: EMBED_DIM,
        }
    }
}

/// Four stride-2 conv stages, global average pool, linear embedding.
/// The classification head exists only while training.
#[derive(Clone, Debug)]
pub struct IdEmbedNet<T> {
    config: IdNetConfig,
    params: ParamStore<T>,
    convs: Vec<Conv>,
    embed: Dense,
}

impl<T: Real> IdEmbedNet<T> {
    pub fn new(config: IdNetConfig, seed: u64) -> Result<Self> {
        if config.image_size < 16 || !config.image_size.is_power_of_two() || config.embed_dim == 0 {
            return Err(Error::Invalid(format!("bad id-extractor config {config:?}")));
        }
        let mut rng = rng_for(seed, "id-init", 0);
        let mut params = ParamStore::new(ID_OWNER);
        let mut convs = Vec::new();
        let mut cin = 3;
        for (i, &c) in config.channels.iter().enumerate() {
            convs.push(Conv::new(&mut params, &format!("conv{i}"), cin, c, 3, 2, &mut rng));
            cin = c;
        }
        let embed = Dense::new(&mut params, "embed", cin, config.embed_dim, &mut rng);
        Ok(Self {
            config,
            params,
            convs,
            embed,
        })
    }

    pub fn config(&self) -> &IdNetConfig {
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

    pub fn cast<U: Real>(&self) -> IdEmbedNet<U> {
        IdEmbedNet {
            config: self.config.clone(),
            params: self.params.cast(),
            convs: self.convs.clone(),
            embed: self.embed,
        }
    }

    /// `images[N,3,S,S] → [N, embed_dim]`.
    pub fn embed(&self, g: &mut Graph<T>, vars: &[Var], images: Var) -> Result<Var> {
        let s = g.shape(images).to_vec();
        let n = self.config.image_size;
        if s.len() != 4 || s[1] != 3 || s[2] != n || s[3] != n {
            return Err(Error::Invalid(format!("id extractor expects [N, 3, {n}, {n}] images, got {s:?}")));
        }
        let mut h = images;
        for c in &self.convs {
            h = c.apply(g, vars, h)?;
            h = g.relu(h)?;
        }
        let hs = g.shape(h).to_vec();
        let pooled = g.sum_axes(h, &[2, 3])?;
        let pooled = g.scale(pooled, 1.0 / (hs[2] * hs[3]) as f64)?;
        let pooled = g.reshape(pooled, &[hs[0], hs[1]])?;
        self.embed.apply(g, vars, pooled)
    }

    pub fn embed_values(&self, images: &Tensor<T>) -> Result<Tensor<T>> {
        let mut g = Graph::new();
        let vars = self.params.bind(&mut g)?;
        let x = g.input(images.clone())?;
        let e = self.embed(&mut g, &vars, x)?;
        Ok(g.value(e).clone())
    }
}

/// Identity labels attached to images.
#[derive(Clone, Debug)]
pub struct LabeledImages {
    pub images: ImageStore,
    pub labels: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct IdTrainConfig {
    pub max_epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub target_accuracy: f64,
}

impl Default for IdTrainConfig {
    fn default() -> Self {
        Self {
            max_epochs: 80,
            batch_size: 64,
            lr: 1e-3,
            target_accuracy: 0.9,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IdTrainReport {
    pub epochs: usize,
    pub heldout_accuracy: f64,
    pub classes: usize,
}

fn logits(net: &IdEmbedNet<f32>, head: &ParamStore<f32>, g: &mut Graph<f32>, x: Var) -> Result<(Vec<Var>, Vec<Var>, Var)> {
    let vars = net.params.bind(g)?;
    let hv = head.bind(g)?;
    let e = net.embed(g, &vars, x)?;
    let out = g.linear(e, hv[0], hv[1])?;
    Ok((vars, hv, out))
}

fn accuracy(net: &IdEmbedNet<f32>, head: &ParamStore<f32>, set: &LabeledImages) -> Result<f64> {
    let idx: Vec<usize> = (0..set.images.len()).collect();
    let mut correct = 0usize;
    for chunk in idx.chunks(128) {
        let mut g = Graph::new();
        let x = g.input(set.images.batch(chunk)?)?;
        let (_, _, out) = logits(net, head, &mut g, x)?;
        let k = g.shape(out)[1];
        for (row, &i) in g.value(out).data().chunks(k).zip(chunk) {
            let mut best = 0;
            for j in 1..k {
                if row[j] > row[best] {
                    best = j;
                }
            }
            correct += (best == set.labels[i]) as usize;
        }
    }
    Ok(correct as f64 / set.images.len() as f64)
}

/// Trains with softmax cross-entropy until held-out view accuracy reaches
/// the target, then freezes. Missing the target by the epoch cap is an error.
pub fn train_id_extractor(
    config: IdNetConfig,
    train: &LabeledImages,
    heldout: &LabeledImages,
    cfg: &IdTrainConfig,
    seed: u64,
) -> Result<(IdEmbedNet<f32>, IdTrainReport)> {
    let classes = train.labels.iter().chain(&heldout.labels).max().map_or(0, |m| m + 1);
    if classes < 2 || train.labels.len() != train.images.len() || heldout.labels.len() != heldout.images.len() {
        return Err(Error::Invalid("id extractor needs ≥ 2 labelled identities".into()));
    }
    let mut net = IdEmbedNet::<f32>::new(config, seed)?;
    let mut rng = rng_for(seed, "id-head-init", 0);
    let mut head = ParamStore::new("id-head");
    let d = net.config.embed_dim;
    head.push_normal("head.w", &[classes, d], (1.0 / d as f64).sqrt(), &mut rng);
    head.push_zeros("head.b", &[classes]);
    let adam_cfg = AdamConfig {
        lr: cfg.lr,
        ..Default::default()
    };
    let mut adam_net = Adam::new(adam_cfg, &net.params);
    let mut adam_head = Adam::new(adam_cfg, &head);

    let mut acc = accuracy(&net, &head, heldout)?;
    for epoch in 1..=cfg.max_epochs {
        let mut order: Vec<usize> = (0..train.images.len()).collect();
        order.shuffle(&mut rng_for(seed, "id-shuffle", epoch as u64));
        for chunk in order.chunks(cfg.batch_size.max(1)) {
            let mut g = Graph::new();
            let x = g.input(train.images.batch(chunk)?)?;
            let (vars, hv, out) = logits(&net, &head, &mut g, x)?;
            let labels: Vec<usize> = chunk.iter().map(|&i| train.labels[i]).collect();
            let loss = g.softmax_cross_entropy(out, &labels)?;
            let grads = g.backward(loss)?;
            let gn: Vec<Tensor<f32>> = vars.iter().map(|&v| grads.get(v)).collect();
            let gh: Vec<Tensor<f32>> = hv.iter().map(|&v| grads.get(v)).collect();
            adam_net.step(&mut net.params, &gn)?;
            adam_head.step(&mut head, &gh)?;
        }
        acc = accuracy(&net, &head, heldout)?;
        log::info!("id extractor epoch {epoch}: held-out accuracy {acc:.4}");
        if acc >= cfg.target_accuracy {
            net.freeze();
            return Ok((
                net,
                IdTrainReport {
                    epochs: epoch,
                    heldout_accuracy: acc,
                    classes,
                },
            ));
        }
    }
    Err(Error::Training(format!(
        "id extractor reached held-out accuracy {acc:.4} after {} epochs, below the {:.2} target",
        cfg.max_epochs, cfg.target_accuracy
    )))
}
