//! Training losses: restored (param + differ), domain MMD, contrastive and
//! consistency, and their weighted sum.

use std::cmp::Ordering;

use serde::{Deserialize, Serialize};

use crate::aux_extractors::{geometry_embed, IdEmbedNet};
use crate::error::{Error, Result};
use crate::imitator::ImitatorNet;
use crate::perception::{Perception, QuantizationResult};
use crate::tensor::{Graph, Real, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BandwidthRule {
    /// `bandwidths` are absolute σ values.
    Fixed,
    /// `bandwidths` multiply σ where σ² = median pooled squared distance / 2.
    MedianHeuristic,
}

/// Gaussian kernel bandwidth selection for [`mmd_sq`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct KernelSpec {
    pub rule: BandwidthRule,
    pub bandwidths: Vec<f64>,
}

impl Default for KernelSpec {
    fn default() -> Self {
        Self::median()
    }
}

impl KernelSpec {
    pub fn fixed(sigmas: &[f64]) -> Self {
        Self {
            rule: BandwidthRule::Fixed,
            bandwidths: sigmas.to_vec(),
        }
    }

    pub fn median() -> Self {
        Self {
            rule: BandwidthRule::MedianHeuristic,
            bandwidths: vec![1.0],
        }
    }

    /// Median heuristic at {σ/2, σ, 2σ}.
    pub fn median_multi() -> Self {
        Self {
            rule: BandwidthRule::MedianHeuristic,
            bandwidths: vec![0.5, 1.0, 2.0],
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.bandwidths.is_empty() || self.bandwidths.iter().any(|s| !s.is_finite() || *s <= 0.0) {
            return Err(Error::Invalid(format!("kernel bandwidths must be finite and positive: {:?}", self.bandwidths)));
        }
        Ok(())
    }

    /// Resolved σ values for a batch whose pooled pairwise squared distances are `pooled`.
    pub fn sigmas(&self, pooled: &mut [f64]) -> Vec<f64> {
        match self.rule {
            BandwidthRule::Fixed => self.bandwidths.clone(),
            BandwidthRule::MedianHeuristic => {
                let med = median(pooled);
                let base = (med / 2.0).max(1e-12).sqrt();
                self.bandwidths.iter().map(|m| m * base).collect()
            }
        }
    }
}

fn median(v: &mut [f64]) -> f64 {
    if v.is_empty() {
        return 0.0;
    }
    v.sort_by(|a, b| a.total_cmp(b));
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

fn compare_values<T: Real>(g: &Graph<T>, a: Var, b: Var) -> Ordering {
    let (va, vb) = (g.value(a), g.value(b));
    va.shape().cmp(vb.shape()).then_with(|| {
        for (x, y) in va.data().iter().zip(vb.data()) {
            match x.f64().total_cmp(&y.f64()) {
                Ordering::Equal => continue,
                o => return o,
            }
        }
        Ordering::Equal
    })
}

/// Biased squared MMD between the rows of `x[n,d]` and `y[m,d]` under a
/// Gaussian kernel, averaged over the kernel's bandwidths. The bandwidth is a
/// constant of the backward pass.
pub fn mmd_sq<T: Real>(g: &mut Graph<T>, x: Var, y: Var, kernel: &KernelSpec) -> Result<Var> {
    kernel.validate()?;
    let (sx, sy) = (g.shape(x).to_vec(), g.shape(y).to_vec());
    if sx.len() != 2 || sy.len() != 2 || sx[1] != sy[1] {
        return Err(Error::Invalid(format!("mmd sample sets must be [n, d] and [m, d], got {sx:?} and {sy:?}")));
    }
    // fixed argument order makes the estimator bit-symmetric
    let (x, y) = if compare_values(g, x, y) == Ordering::Greater { (y, x) } else { (x, y) };
    let dxx = g.pairwise_sq_dist(x, x)?;
    let dyy = g.pairwise_sq_dist(y, y)?;
    let dxy = g.pairwise_sq_dist(x, y)?;

    let mut pooled = Vec::new();
    for (d, sym) in [(dxx, true), (dyy, true), (dxy, false)] {
        let s = g.shape(d).to_vec();
        let v = g.value(d).data();
        for i in 0..s[0] {
            let j0 = if sym { i + 1 } else { 0 };
            for j in j0..s[1] {
                pooled.push(v[i * s[1] + j].f64());
            }
        }
    }
    let sigmas = kernel.sigmas(&mut pooled);

    let mut acc: Option<Var> = None;
    for &sigma in &sigmas {
        let gamma = -1.0 / (2.0 * sigma * sigma);
        let kmean = |g: &mut Graph<T>, d: Var| -> Result<Var> {
            let z = g.scale(d, gamma)?;
            let k = g.exp(z)?;
            g.mean(k)
        };
        let kxx = kmean(g, dxx)?;
        let kyy = kmean(g, dyy)?;
        let kxy = kmean(g, dxy)?;
        let s = g.add(kxx, kyy)?;
        let c = g.scale(kxy, 2.0)?;
        let term = g.sub(s, c)?;
        acc = Some(match acc {
            None => term,
            Some(a) => g.add(a, term)?,
        });
    }
    let total = g.scale(acc.expect("at least one bandwidth"), 1.0 / sigmas.len() as f64)?;
    // clip rounding below zero
    g.relu(total)
}

/// MMD² over features plus MMD² over parameters.
pub fn loss_domain<T: Real>(g: &mut Graph<T>, f_s: Var, f_t: Var, p_s: Var, p_t: Var, kernel: &KernelSpec) -> Result<Var> {
    let a = mmd_sq(g, f_s, f_t, kernel)?;
    let b = mmd_sq(g, p_s, p_t, kernel)?;
    g.add(a, b)
}

/// One InfoNCE query: row indices into a shared matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct ContrastiveQuery {
    pub query: usize,
    pub positive: usize,
    pub negatives: Vec<usize>,
}

/// Queries for a source sub-batch laid out as `row = identity·2 + view`:
/// each view is a query, its sibling the positive, and the same view of every
/// other identity a negative.
pub fn identity_view_queries(identities: usize) -> Result<Vec<ContrastiveQuery>> {
    if identities < 2 {
        return Err(Error::Invalid(format!("contrastive batch needs ≥ 2 identities, got {identities}")));
    }
    let mut out = Vec::with_capacity(2 * identities);
    for i in 0..identities {
        for v in 0..2 {
            out.push(ContrastiveQuery {
                query: 2 * i + v,
                positive: 2 * i + (1 - v),
                negatives: (0..identities).filter(|&j| j != i).map(|j| 2 * j + v).collect(),
            });
        }
    }
    Ok(out)
}

/// Mean over queries of `−log softmax(s/τ)[positive]` with `s` the raw dot
/// product (or cosine similarity when `normalize`).
pub fn loss_contrastive<T: Real>(
    g: &mut Graph<T>,
    p: Var,
    queries: &[ContrastiveQuery],
    tau: f64,
    normalize: bool,
) -> Result<Var> {
    if !(tau > 0.0) {
        return Err(Error::Invalid(format!("temperature must be positive, got {tau}")));
    }
    let k = queries.first().map(|q| q.negatives.len()).unwrap_or(0);
    if k == 0 || queries.iter().any(|q| q.negatives.len() != k) {
        return Err(Error::Invalid("contrastive loss needs K ≥ 1 negatives, equal for every query".into()));
    }
    let mut qi = Vec::with_capacity(queries.len() * (k + 1));
    let mut ci = Vec::with_capacity(queries.len() * (k + 1));
    for q in queries {
        qi.extend(std::iter::repeat(q.query).take(k + 1));
        ci.push(q.positive);
        ci.extend_from_slice(&q.negatives);
    }
    let qr = g.gather_rows(p, &qi)?;
    let cr = g.gather_rows(p, &ci)?;
    let sims = if normalize {
        g.cosine_similarity(qr, cr)?
    } else {
        let prod = g.mul(qr, cr)?;
        g.sum_axes(prod, &[1])?
    };
    let sims = g.reshape(sims, &[queries.len(), k + 1])?;
    let logits = g.scale(sims, 1.0 / tau)?;
    g.softmax_cross_entropy(logits, &vec![0; queries.len()])
}

/// Mean squared pixel error between the imitator's render of `p` and `images`.
pub fn loss_param<T: Real>(
    g: &mut Graph<T>,
    imitator: &ImitatorNet<T>,
    imitator_vars: &[Var],
    p: Var,
    images: Var,
) -> Result<Var> {
    if !imitator.is_frozen() {
        return Err(Error::NotFrozen(imitator.params().owner().to_string()));
    }
    let rendered = imitator.forward(g, imitator_vars, p)?;
    let d = g.sub(rendered, images)?;
    let sq = g.mul(d, d)?;
    g.mean(sq)
}

/// Σ over levels of `codebook + α·commitment`.
pub fn loss_differ<T: Real>(g: &mut Graph<T>, levels: &[&QuantizationResult], alpha: f64) -> Result<Var> {
    let mut acc: Option<Var> = None;
    for q in levels {
        let c = g.scale(q.commitment_loss, alpha)?;
        let t = g.add(q.codebook_loss, c)?;
        acc = Some(match acc {
            None => t,
            Some(a) => g.add(a, t)?,
        });
    }
    acc.ok_or_else(|| Error::Invalid("loss_differ needs at least one quantization level".into()))
}

pub fn loss_restored<T: Real>(g: &mut Graph<T>, param: Var, differ: Var, beta: f64) -> Result<Var> {
    let d = g.scale(differ, beta)?;
    g.add(param, d)
}

/// `(l3d, lid)` between `images` and the imitator's render of `p`.
pub fn loss_consistency<T: Real>(
    g: &mut Graph<T>,
    images: Var,
    p: Var,
    imitator: &ImitatorNet<T>,
    imitator_vars: &[Var],
    id_net: &IdEmbedNet<T>,
    id_vars: &[Var],
) -> Result<(Var, Var)> {
    if !imitator.is_frozen() {
        return Err(Error::NotFrozen(imitator.params().owner().to_string()));
    }
    let rendered = imitator.forward(g, imitator_vars, p)?;
    consistency_between(g, images, rendered, id_net, id_vars)
}

/// Consistency terms between two image batches of equal shape.
pub fn consistency_between<T: Real>(
    g: &mut Graph<T>,
    images: Var,
    rendered: Var,
    id_net: &IdEmbedNet<T>,
    id_vars: &[Var],
) -> Result<(Var, Var)> {
    if !id_net.is_frozen() {
        return Err(Error::NotFrozen(id_net.params().owner().to_string()));
    }
    let n = g.shape(images)[0] as f64;
    let ga = geometry_embed(g, images)?;
    let gb = geometry_embed(g, rendered)?;
    let d = g.sub(ga, gb)?;
    let sq = g.mul(d, d)?;
    let s = g.sum(sq)?;
    let l3d = g.scale(s, 1.0 / n)?;

    let ea = id_net.embed(g, id_vars, images)?;
    let eb = id_net.embed(g, id_vars, rendered)?;
    let cos = g.cosine_similarity(ea, eb)?;
    let m = g.mean(cos)?;
    let neg = g.scale(m, -1.0)?;
    let lid = g.add_scalar(neg, 1.0)?;
    Ok((l3d, lid))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub restored: f64,
    pub domain: f64,
    pub contrastive: f64,
    pub consistency: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            restored: 1.0,
            domain: 0.01,
            contrastive: 0.02,
            consistency: 0.02,
        }
    }
}

impl LossWeights {
    pub fn combine(&self, restored: f64, domain: f64, contrastive: f64, consistency: f64) -> f64 {
        self.restored * restored + self.domain * domain + self.contrastive * contrastive + self.consistency * consistency
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ObjectiveConfig {
    pub weights: LossWeights,
    pub alpha: f64,
    pub beta: f64,
    pub tau: f64,
    pub kernel: KernelSpec,
    pub normalize_contrastive: bool,
}

impl Default for ObjectiveConfig {
    fn default() -> Self {
        Self {
            weights: LossWeights::default(),
            alpha: 0.25,
            beta: 0.25,
            tau: 0.07,
            kernel: KernelSpec::default(),
            normalize_contrastive: false,
        }
    }
}

impl ObjectiveConfig {
    pub fn validate(&self) -> Result<()> {
        let w = &self.weights;
        if [w.restored, w.domain, w.contrastive, w.consistency, self.alpha, self.beta]
            .iter()
            .any(|v| !v.is_finite() || *v < 0.0)
        {
            return Err(Error::Invalid("loss weights, α and β must be finite and non-negative".into()));
        }
        if !(self.tau > 0.0 && self.tau.is_finite()) {
            return Err(Error::Invalid(format!("τ must be positive, got {}", self.tau)));
        }
        self.kernel.validate()
    }
}

/// Scalar values of every term of one objective evaluation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub restored: f64,
    pub param: f64,
    pub differ: f64,
    pub domain: f64,
    pub contrastive: f64,
    pub consistency_3d: f64,
    pub consistency_id: f64,
    pub total: f64,
    pub weights: LossWeights,
}

impl LossReport {
    pub fn consistency(&self) -> f64 {
        self.consistency_3d + self.consistency_id
    }

    pub fn weighted_sum(&self) -> f64 {
        self.weights
            .combine(self.restored, self.domain, self.contrastive, self.consistency())
    }
}

/// Graph handles of one objective evaluation.
#[derive(Clone, Debug)]
pub struct ObjectiveTerms {
    pub restored: Var,
    pub param: Var,
    pub differ: Var,
    pub domain: Var,
    pub contrastive: Var,
    pub consistency_3d: Var,
    pub consistency_id: Var,
    pub total: Var,
    pub target_params: Var,
    pub source_params: Var,
    pub weights: LossWeights,
}

impl ObjectiveTerms {
    pub fn report<T: Real>(&self, g: &Graph<T>) -> LossReport {
        let v = |x: Var| g.value(x).item().f64();
        LossReport {
            restored: v(self.restored),
            param: v(self.param),
            differ: v(self.differ),
            domain: v(self.domain),
            contrastive: v(self.contrastive),
            consistency_3d: v(self.consistency_3d),
            consistency_id: v(self.consistency_id),
            total: v(self.total),
            weights: self.weights,
        }
    }
}

/// Networks and their bound parameter handles inside one graph.
pub struct Bound<'a, T> {
    pub perception: &'a Perception<T>,
    pub perception_vars: &'a [Var],
    pub imitator: &'a ImitatorNet<T>,
    pub imitator_vars: &'a [Var],
    pub id_net: &'a IdEmbedNet<T>,
    pub id_vars: &'a [Var],
}

/// Full weighted objective on a target batch and a source batch laid out as
/// `identities × 2 views`. Terms with zero weight are evaluated for the
/// report but left out of `total`, so they contribute no gradient.
pub fn full_objective<T: Real>(
    g: &mut Graph<T>,
    nets: &Bound<'_, T>,
    target: Var,
    source: Var,
    identities: usize,
    cfg: &ObjectiveConfig,
) -> Result<ObjectiveTerms> {
    cfg.validate()?;
    let ns = g.shape(source)[0];
    if identities < 2 || ns != 2 * identities {
        return Err(Error::Invalid(format!(
            "source sub-batch must hold 2 views of each of {identities} (≥ 2) identities, got {ns} images"
        )));
    }
    let out_t = nets.perception.forward_full(g, nets.perception_vars, target)?;
    let out_s = nets.perception.forward_full(g, nets.perception_vars, source)?;

    let param = loss_param(g, nets.imitator, nets.imitator_vars, out_t.params, target)?;
    let differ = loss_differ(g, &[&out_t.bottom, &out_t.top], cfg.alpha)?;
    let restored = loss_restored(g, param, differ, cfg.beta)?;
    let domain = loss_domain(g, out_s.features, out_t.features, out_s.params, out_t.params, &cfg.kernel)?;
    let queries = identity_view_queries(identities)?;
    let contrastive = loss_contrastive(g, out_s.params, &queries, cfg.tau, cfg.normalize_contrastive)?;
    let (l3d, lid) = loss_consistency(
        g,
        source,
        out_s.params,
        nets.imitator,
        nets.imitator_vars,
        nets.id_net,
        nets.id_vars,
    )?;
    let consistency = g.add(l3d, lid)?;

    let w = cfg.weights;
    let mut total: Option<Var> = None;
    for (weight, term) in [
        (w.restored, restored),
        (w.domain, domain),
        (w.contrastive, contrastive),
        (w.consistency, consistency),
    ] {
        if weight == 0.0 {
            continue;
        }
        let t = g.scale(term, weight)?;
        total = Some(match total {
            None => t,
            Some(a) => g.add(a, t)?,
        });
    }
    let total = match total {
        Some(t) => t,
        None => g.scale(restored, 0.0)?,
    };
    Ok(ObjectiveTerms {
        restored,
        param,
        differ,
        domain,
        contrastive,
        consistency_3d: l3d,
        consistency_id: lid,
        total,
        target_params: out_t.params,
        source_params: out_s.params,
        weights: w,
    })
}

/// [`mmd_sq`] on plain sample matrices, evaluated in `f64`.
pub fn mmd_sq_values(x: &crate::tensor::Tensor<f32>, y: &crate::tensor::Tensor<f32>, kernel: &KernelSpec) -> Result<f64> {
    let mut g = Graph::<f64>::new();
    let xv = g.input(x.cast())?;
    let yv = g.input(y.cast())?;
    let m = mmd_sq(&mut g, xv, yv, kernel)?;
    Ok(g.value(m).item())
}
