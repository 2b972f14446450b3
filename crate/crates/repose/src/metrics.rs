//! Evaluation metrics: PSNR on the 0-255 scale and Fréchet distance between
//! Gaussian fits of embedding sets.
//!
//! The FID embedder is pluggable; the default is the stub extractor's pooled
//! `conv3_1` tap, so absolute values are not comparable to scores computed
//! with the canonical inception embedder. Relative comparisons under one
//! embedder are meaningful.

use thiserror::Error;

use crate::data::ImageTensor;
use crate::tensor::{kernels, Tensor};

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("shape mismatch: {0:?} vs {1:?}")]
    ShapeMismatch(Vec<usize>, Vec<usize>),
    #[error("embedding dimension mismatch: {0} vs {1}")]
    DimMismatch(usize, usize),
    #[error("embedding set is empty")]
    Empty,
}

/// PSNR sentinel for identical images.
pub const PSNR_CAP_DB: f64 = 99.0;

/// Peak signal-to-noise ratio in decibels, computed on the 0-255 scale after
/// mapping [-1,1] to [0,255]. Identical images return the 99 dB cap.
pub fn psnr(a: &ImageTensor, b: &ImageTensor) -> Result<f64, MetricsError> {
    let (ta, tb) = (a.tensor(), b.tensor());
    if ta.shape() != tb.shape() {
        return Err(MetricsError::ShapeMismatch(ta.shape().to_vec(), tb.shape().to_vec()));
    }
    let mut mse = 0.0;
    for (&x, &y) in ta.data().iter().zip(tb.data()) {
        let d = (x - y) * 0.5 * 255.0;
        mse += d * d;
    }
    mse /= ta.len() as f64;
    if mse == 0.0 {
        return Ok(PSNR_CAP_DB);
    }
    Ok((10.0 * (255.0f64 * 255.0 / mse).log10()).min(PSNR_CAP_DB))
}

/// Rows of embedder outputs, one sample per row.
#[derive(Clone, Debug)]
pub struct EmbeddingSet {
    data: Tensor, // [n, d]
}

impl EmbeddingSet {
    pub fn new(rows: Vec<Tensor>) -> Result<EmbeddingSet, MetricsError> {
        if rows.is_empty() {
            return Err(MetricsError::Empty);
        }
        let d = rows[0].len();
        let mut flat = Vec::with_capacity(rows.len() * d);
        for r in &rows {
            if r.len() != d {
                return Err(MetricsError::DimMismatch(d, r.len()));
            }
            flat.extend_from_slice(r.data());
        }
        Ok(EmbeddingSet { data: Tensor::from_vec(&[rows.len(), d], flat) })
    }

    pub fn n(&self) -> usize {
        self.data.shape()[0]
    }

    pub fn dim(&self) -> usize {
        self.data.shape()[1]
    }

    pub fn mean(&self) -> Vec<f64> {
        let (n, d) = (self.n(), self.dim());
        let mut mu = vec![0.0; d];
        for i in 0..n {
            for j in 0..d {
                mu[j] += self.data.at2(i, j);
            }
        }
        for m in mu.iter_mut() {
            *m /= n as f64;
        }
        mu
    }

    /// Sample covariance (n-1 denominator), regularized by `reg * I`.
    pub fn covariance(&self, reg: f64) -> Tensor {
        let (n, d) = (self.n(), self.dim());
        let mu = self.mean();
        let mut cov = Tensor::zeros(&[d, d]);
        {
            let dst = cov.data_mut();
            for i in 0..n {
                for a in 0..d {
                    let xa = self.data.at2(i, a) - mu[a];
                    for b in a..d {
                        dst[a * d + b] += xa * (self.data.at2(i, b) - mu[b]);
                    }
                }
            }
            let denom = if n > 1 { (n - 1) as f64 } else { 1.0 };
            for a in 0..d {
                for b in a..d {
                    dst[a * d + b] /= denom;
                    dst[b * d + a] = dst[a * d + b];
                }
            }
            for a in 0..d {
                dst[a * d + a] += reg;
            }
        }
        cov
    }
}

/// Cyclic Jacobi eigendecomposition of a symmetric matrix.
/// Returns (eigenvalues, eigenvectors as columns).
fn jacobi_eigh(m: &Tensor) -> (Vec<f64>, Tensor) {
    let d = m.shape()[0];
    assert_eq!(m.shape(), &[d, d]);
    let mut a = m.clone();
    let mut v = Tensor::zeros(&[d, d]);
    for i in 0..d {
        v.data_mut()[i * d + i] = 1.0;
    }
    let max_sweeps = 64;
    for _ in 0..max_sweeps {
        let mut off = 0.0;
        for p in 0..d {
            for q in (p + 1)..d {
                off += a.at2(p, q) * a.at2(p, q);
            }
        }
        if off.sqrt() < 1e-12 * (1.0 + a.max_abs()) {
            break;
        }
        for p in 0..d {
            for q in (p + 1)..d {
                let apq = a.at2(p, q);
                if apq.abs() < 1e-300 {
                    continue;
                }
                let (app, aqq) = (a.at2(p, p), a.at2(q, q));
                let theta = 0.5 * (aqq - app) / apq;
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                let ad = a.data_mut();
                for k in 0..d {
                    let akp = ad[k * d + p];
                    let akq = ad[k * d + q];
                    ad[k * d + p] = c * akp - s * akq;
                    ad[k * d + q] = s * akp + c * akq;
                }
                for k in 0..d {
                    let apk = ad[p * d + k];
                    let aqk = ad[q * d + k];
                    ad[p * d + k] = c * apk - s * aqk;
                    ad[q * d + k] = s * apk + c * aqk;
                }
                let vd = v.data_mut();
                for k in 0..d {
                    let vkp = vd[k * d + p];
                    let vkq = vd[k * d + q];
                    vd[k * d + p] = c * vkp - s * vkq;
                    vd[k * d + q] = s * vkp + c * vkq;
                }
            }
        }
    }
    let eig = (0..d).map(|i| a.at2(i, i)).collect();
    (eig, v)
}

/// Symmetric PSD square root via eigendecomposition (negative eigenvalues
/// from roundoff clamp to zero).
fn sqrtm_psd(m: &Tensor) -> Tensor {
    let d = m.shape()[0];
    let (eig, v) = jacobi_eigh(m);
    // v * diag(sqrt(eig)) * v^T
    let mut scaled = v.clone();
    {
        let sd = scaled.data_mut();
        for j in 0..d {
            let s = eig[j].max(0.0).sqrt();
            for i in 0..d {
                sd[i * d + j] *= s;
            }
        }
    }
    let vt = kernels::transpose2d(&v);
    kernels::matmul(&scaled, &vt)
}

fn trace(m: &Tensor) -> f64 {
    let d = m.shape()[0];
    (0..d).map(|i| m.at2(i, i)).sum()
}

/// Fréchet distance between Gaussian fits of two embedding sets:
/// `|mu_r - mu_f|^2 + tr(S_r + S_f - 2 (S_r S_f)^{1/2})`, covariances
/// regularized by `1e-6 I`. The cross term is computed through the
/// symmetrized product `S_r^{1/2} S_f S_r^{1/2}`, and the result is clamped
/// at zero against roundoff.
pub fn fid(real: &EmbeddingSet, fake: &EmbeddingSet) -> Result<f64, MetricsError> {
    if real.dim() != fake.dim() {
        return Err(MetricsError::DimMismatch(real.dim(), fake.dim()));
    }
    let reg = 1e-6;
    let (mu_r, mu_f) = (real.mean(), fake.mean());
    let mean_term: f64 = mu_r.iter().zip(&mu_f).map(|(a, b)| (a - b) * (a - b)).sum();
    let (cov_r, cov_f) = (real.covariance(reg), fake.covariance(reg));
    let root_r = sqrtm_psd(&cov_r);
    // symmetrized product: S_r^{1/2} S_f S_r^{1/2}
    let inner = kernels::matmul(&kernels::matmul(&root_r, &cov_f), &root_r);
    // enforce exact symmetry before the second root
    let d = inner.shape()[0];
    let mut sym = inner.clone();
    {
        let sd = sym.data_mut();
        for i in 0..d {
            for j in (i + 1)..d {
                let m = 0.5 * (sd[i * d + j] + sd[j * d + i]);
                sd[i * d + j] = m;
                sd[j * d + i] = m;
            }
        }
    }
    let cross = sqrtm_psd(&sym);
    let value = mean_term + trace(&cov_r) + trace(&cov_f) - 2.0 * trace(&cross);
    Ok(value.max(0.0))
}
