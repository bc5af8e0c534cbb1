use nalgebra::{DMatrix, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

const EIGEN_FLOOR: f64 = 1e-10;

/// Mean-centring plus a full-rank PCA rotation, then a signed square root.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DescriptorPipeline {
    pub mean: Vec<f64>,
    /// Row-major `d×d`; column `j` is the `j`-th principal direction.
    pub rotation: Vec<f64>,
    pub eigenvalues: Vec<f64>,
    pub signed_sqrt: bool,
    /// Which split the pipeline was fitted on.
    pub fitted_on: String,
}

impl DescriptorPipeline {
    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    /// Centred, rotated coordinates before the square root.
    pub fn rotate(&self, x: &[f64]) -> Vec<f64> {
        let d = self.dim();
        (0..d)
            .map(|j| (0..d).map(|i| (x[i] - self.mean[i]) * self.rotation[i * d + j]).sum())
            .collect()
    }

    pub fn column(&self, j: usize) -> Vec<f64> {
        let d = self.dim();
        (0..d).map(|i| self.rotation[i * d + j]).collect()
    }
}

/// Fits the pipeline on training-split descriptors (rows).
pub fn fit_descriptor_pipeline(rows: &[Vec<f64>], fitted_on: &str) -> Result<DescriptorPipeline> {
    if rows.len() < 2 {
        return Err(Error::Invalid("descriptor pipeline needs at least two training descriptors".into()));
    }
    let d = rows[0].len();
    if d == 0 || rows.iter().any(|r| r.len() != d) {
        return Err(Error::Invalid("descriptors must share a positive dimension".into()));
    }
    let n = rows.len() as f64;
    let mean: Vec<f64> = (0..d).map(|j| rows.iter().map(|r| r[j]).sum::<f64>() / n).collect();
    let mut cov = DMatrix::<f64>::zeros(d, d);
    for r in rows {
        for i in 0..d {
            let a = r[i] - mean[i];
            for j in 0..d {
                cov[(i, j)] += a * (r[j] - mean[j]);
            }
        }
    }
    cov /= n - 1.0;
    let eig = SymmetricEigen::new(cov);
    let mut order: Vec<usize> = (0..d).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]).then(a.cmp(&b)));
    let mut rotation = vec![0.0; d * d];
    let mut eigenvalues = Vec::with_capacity(d);
    let mut floored = 0;
    for (j, &k) in order.iter().enumerate() {
        let col = eig.eigenvectors.column(k);
        // largest-magnitude component positive
        let mut big = 0;
        for i in 1..d {
            if col[i].abs() > col[big].abs() {
                big = i;
            }
        }
        let sign = if col[big] < 0.0 { -1.0 } else { 1.0 };
        for i in 0..d {
            rotation[i * d + j] = sign * col[i];
        }
        let ev = eig.eigenvalues[k];
        if ev < EIGEN_FLOOR {
            floored += 1;
        }
        eigenvalues.push(ev.max(EIGEN_FLOOR));
    }
    if floored > 0 {
        log::warn!("descriptor covariance is rank deficient: {floored} eigenvalues floored at {EIGEN_FLOOR:e}");
    }
    Ok(DescriptorPipeline {
        mean,
        rotation,
        eigenvalues,
        signed_sqrt: true,
        fitted_on: fitted_on.to_string(),
    })
}

/// Centre, rotate, then `sign(x)·√|x|` element-wise.
pub fn apply_descriptor(x: &[f64], pipeline: &DescriptorPipeline) -> Vec<f64> {
    let r = pipeline.rotate(x);
    if pipeline.signed_sqrt {
        r.into_iter().map(signed_sqrt).collect()
    } else {
        r
    }
}

pub fn signed_sqrt(x: f64) -> f64 {
    x.signum() * x.abs().sqrt()
}
