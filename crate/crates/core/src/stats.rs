//! Finite-difference and Monte-Carlo oracles.
//!
//! These are the independent checks everything else is verified against, so
//! they stay deliberately plain: central differences with a caller-chosen
//! step, and two-pass sample covariance with the unbiased `n−1` divisor.
//! Monte-Carlo loops derive one sub-stream per sample index and reduce in
//! index order, so estimates are bit-identical for any thread count.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::gradvec::GradVector;
use crate::rng::RngStream;
use crate::tensor::Tensor;
use crate::{Error, Result};

/// Central-difference gradient of a scalar function of a vector.
pub fn finite_diff_grad(
    f: impl Fn(&Tensor) -> Result<f64>,
    point: &Tensor,
    step: f64,
) -> Result<Tensor> {
    assert!(step > 0.0, "step must be positive");
    let mut out = Vec::with_capacity(point.len());
    let mut x = point.clone();
    for k in 0..point.len() {
        let orig = x.data()[k];
        x.data_mut()[k] = orig + step;
        let fp = f(&x)?;
        x.data_mut()[k] = orig - step;
        let fm = f(&x)?;
        x.data_mut()[k] = orig;
        if !fp.is_finite() || !fm.is_finite() {
            return Err(Error::NonFinite(format!("finite_diff_grad coordinate {k}")));
        }
        out.push((fp - fm) / (2.0 * step));
    }
    Ok(Tensor::new(point.shape().to_vec(), out))
}

/// Symmetrized central-difference Hessian of a scalar function of a vector.
pub fn finite_diff_hessian(
    f: impl Fn(&Tensor) -> Result<f64>,
    point: &Tensor,
    step: f64,
) -> Result<Tensor> {
    assert!(step > 0.0, "step must be positive");
    let n = point.len();
    let mut x = point.clone();
    let f0 = f(&x)?;
    let mut h = vec![0.0; n * n];
    for i in 0..n {
        let oi = x.data()[i];
        x.data_mut()[i] = oi + step;
        let fp = f(&x)?;
        x.data_mut()[i] = oi - step;
        let fm = f(&x)?;
        x.data_mut()[i] = oi;
        h[i * n + i] = (fp - 2.0 * f0 + fm) / (step * step);
        for j in (i + 1)..n {
            let oj = x.data()[j];
            x.data_mut()[i] = oi + step;
            x.data_mut()[j] = oj + step;
            let fpp = f(&x)?;
            x.data_mut()[j] = oj - step;
            let fpm = f(&x)?;
            x.data_mut()[i] = oi - step;
            let fmm = f(&x)?;
            x.data_mut()[j] = oj + step;
            let fmp = f(&x)?;
            x.data_mut()[i] = oi;
            x.data_mut()[j] = oj;
            let v = (fpp - fpm - fmp + fmm) / (4.0 * step * step);
            h[i * n + j] = v;
            h[j * n + i] = v;
        }
    }
    let out = Tensor::matrix(n, n, h);
    out.check_finite("finite_diff_hessian")?;
    Ok(out)
}

/// How a covariance estimate stores its second moments.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum CovMode {
    /// Full `d × d` matrix. Refused above the configured dimension cap.
    Full,
    /// Per-coordinate variances plus their sum; all the identity checks in
    /// this crate compare traces, so this is the default for large models.
    DiagTrace,
}

/// Default dimension above which full covariance matrices are refused.
pub const FULL_COV_DIM_CAP: usize = 2048;

/// Sample mean and covariance of a vector-valued sampler.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CovarianceEstimate {
    pub sample_count: usize,
    pub mean: GradVector,
    pub diag: Vec<f64>,
    pub trace: f64,
    /// Present only in [`CovMode::Full`].
    pub full: Option<Tensor>,
}

impl CovarianceEstimate {
    pub fn dim(&self) -> usize {
        self.mean.len()
    }
}

/// Monte-Carlo mean/covariance of `sampler` over `n` draws.
///
/// Sample `i` sees `rng.child(i)`, samples are reduced in index order, and
/// the covariance uses the unbiased `n−1` divisor. The estimate is identical
/// for any rayon thread count.
pub fn mc_covariance(
    sampler: impl Fn(&RngStream) -> Result<GradVector> + Sync,
    n: usize,
    rng: &RngStream,
    mode: CovMode,
) -> Result<CovarianceEstimate> {
    mc_covariance_capped(sampler, n, rng, mode, FULL_COV_DIM_CAP)
}

/// [`mc_covariance`] with an explicit full-matrix dimension cap.
pub fn mc_covariance_capped(
    sampler: impl Fn(&RngStream) -> Result<GradVector> + Sync,
    n: usize,
    rng: &RngStream,
    mode: CovMode,
    full_cap: usize,
) -> Result<CovarianceEstimate> {
    if n < 2 {
        return Err(Error::InvalidArgument(
            "mc_covariance needs n >= 2".to_string(),
        ));
    }
    let samples: Vec<GradVector> = (0..n as u64)
        .into_par_iter()
        .map(|i| sampler(&rng.child(i)))
        .collect::<Result<Vec<_>>>()?;

    let d = samples[0].len();
    for s in &samples {
        if s.len() != d {
            return Err(Error::InconsistentSampler {
                first: d,
                got: s.len(),
            });
        }
    }
    if mode == CovMode::Full && d > full_cap {
        return Err(Error::InvalidArgument(format!(
            "full covariance refused for dimension {d} > cap {full_cap}"
        )));
    }

    let mut mean = vec![0.0; d];
    for s in &samples {
        for (m, v) in mean.iter_mut().zip(&s.values) {
            *m += v;
        }
    }
    for m in &mut mean {
        *m /= n as f64;
    }

    let denom = (n - 1) as f64;
    let mut diag = vec![0.0; d];
    let mut full = match mode {
        CovMode::Full => Some(vec![0.0; d * d]),
        CovMode::DiagTrace => None,
    };
    for s in &samples {
        match &mut full {
            Some(fm) => {
                let c: Vec<f64> = s
                    .values
                    .iter()
                    .zip(&mean)
                    .map(|(v, m)| v - m)
                    .collect();
                for i in 0..d {
                    for j in 0..d {
                        fm[i * d + j] += c[i] * c[j];
                    }
                }
            }
            None => {
                for ((dv, v), m) in diag.iter_mut().zip(&s.values).zip(&mean) {
                    let c = v - m;
                    *dv += c * c;
                }
            }
        }
    }
    let full = full.map(|mut fm| {
        for v in &mut fm {
            *v /= denom;
        }
        for i in 0..d {
            diag[i] = fm[i * d + i];
        }
        Tensor::matrix(d, d, fm)
    });
    if full.is_none() {
        for v in &mut diag {
            *v /= denom;
        }
    }
    let trace = diag.iter().sum();

    Ok(CovarianceEstimate {
        sample_count: n,
        mean: GradVector::from_values(samples[0].layout.clone(), mean),
        diag,
        trace,
        full,
    })
}
