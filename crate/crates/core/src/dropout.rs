//! Node dropout, mini-batch dropout (`drop_k`), and noise corrections.
//!
//! A mask draw scales each coordinate of a droppable hidden layer by
//! `1 + η`, where `η = −1` with probability `q` (the unit is dropped) and
//! `η = q/(1−q)` otherwise (the survivor is scaled up). `η` has mean zero
//! and second moment `q/(1−q)`, so dropout leaves the layer unbiased while
//! injecting multiplicative noise.
//!
//! `drop_k` averages the loss over `k` independent mask draws per example,
//! which keeps the expected objective fixed while shrinking the update
//! covariance by `1/k`. The correction procedures restore the `k = 1`
//! covariance by adding mean-zero noise: either the two-draw difference
//! `ξ̃ = ∇ℓ(η₁) − ∇ℓ(η₂)` scaled by `√(½(1−1/k))`, or the analytic noise
//! from [`crate::reg::implicit_noise_sample`] scaled by `√(1−1/k)`.

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::gradvec::GradVector;
use crate::model::{ce_loss, LabeledExample, MlpModel};
use crate::rng::RngStream;
use crate::tensor::Tensor;
use crate::{Error, Result};

/// Dropout probability and the hidden layers it applies to.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DropoutSpec {
    pub q: f64,
    /// Hidden-layer indices in `1..=L`.
    pub sites: Vec<usize>,
}

impl DropoutSpec {
    /// Dropout with probability `q` on every hidden layer of `model`.
    pub fn all_sites(q: f64, model: &MlpModel) -> Self {
        DropoutSpec {
            q,
            sites: (1..=model.hidden_layers()).collect(),
        }
    }

    pub fn validate(&self, model: &MlpModel) -> Result<()> {
        if !(0.0..1.0).contains(&self.q) {
            return Err(Error::InvalidArgument(format!(
                "dropout probability {} outside [0, 1)",
                self.q
            )));
        }
        for &s in &self.sites {
            if s < 1 || s > model.hidden_layers() {
                return Err(Error::InvalidArgument(format!(
                    "dropout site {s} outside 1..={}",
                    model.hidden_layers()
                )));
            }
        }
        Ok(())
    }

    /// The kept-coordinate value `q/(1−q)`.
    pub fn keep_value(&self) -> f64 {
        self.q / (1.0 - self.q)
    }
}

/// One draw of dropout scaling vectors, `η_i` per site.
#[derive(Debug, Clone, PartialEq)]
pub struct MaskSample {
    /// `(site, η)` pairs in ascending site order.
    pub etas: Vec<(usize, Tensor)>,
}

impl MaskSample {
    /// Per-hidden-layer multipliers `1 + η` (length `L`, `None` off-site).
    pub fn scales(&self, model: &MlpModel) -> Result<Vec<Option<Tensor>>> {
        let mut out = vec![None; model.hidden_layers()];
        for (site, eta) in &self.etas {
            if *site < 1 || *site > model.hidden_layers() {
                return Err(Error::ShapeMismatch(format!("mask site {site} out of range")));
            }
            if eta.shape() != [model.hidden_dim(*site)] {
                return Err(Error::ShapeMismatch(format!(
                    "mask at site {site} has shape {:?}, layer width {}",
                    eta.shape(),
                    model.hidden_dim(*site)
                )));
            }
            out[*site - 1] = Some(eta.map(|v| 1.0 + v));
        }
        Ok(out)
    }
}

/// Draw one mask: each coordinate independently `−1` w.p. `q`, `q/(1−q)`
/// otherwise.
pub fn sample_mask(spec: &DropoutSpec, model: &MlpModel, stream: &RngStream) -> Result<MaskSample> {
    spec.validate(model)?;
    let keep = spec.keep_value();
    let mut rng = stream.rng();
    let mut etas = Vec::with_capacity(spec.sites.len());
    let mut sites = spec.sites.clone();
    sites.sort_unstable();
    for site in sites {
        let d = model.hidden_dim(site);
        let data: Vec<f64> = (0..d)
            .map(|_| {
                if rng.random::<f64>() < spec.q {
                    -1.0
                } else {
                    keep
                }
            })
            .collect();
        etas.push((site, Tensor::vector(data)));
    }
    Ok(MaskSample { etas })
}

/// Forward pass with each site's activation replaced by `(1+η)⊙h`.
pub fn dropped_forward(
    model: &MlpModel,
    x: &Tensor,
    mask: &MaskSample,
) -> Result<crate::model::ForwardTrace> {
    let scales = mask.scales(model)?;
    model.forward_scaled(x, &scales)
}

/// Monte-Carlo estimate of the dropout-averaged loss `E_η[ℓ(F(x,η))]`.
///
/// Returns the sample mean and its standard error. Plain averaging, one
/// sub-stream per sample.
pub fn elldrop_mc(
    model: &MlpModel,
    example: &LabeledExample,
    spec: &DropoutSpec,
    n: usize,
    stream: &RngStream,
) -> Result<(f64, f64)> {
    if n < 1 {
        return Err(Error::InvalidArgument("elldrop_mc needs n >= 1".to_string()));
    }
    spec.validate(model)?;
    let losses: Vec<f64> = (0..n as u64)
        .into_par_iter()
        .map(|j| {
            let mask = sample_mask(spec, model, &stream.child(j))?;
            let trace = dropped_forward(model, &example.x, &mask)?;
            Ok(ce_loss(&trace.logits, example.y))
        })
        .collect::<Result<Vec<_>>>()?;
    let mean = losses.iter().sum::<f64>() / n as f64;
    let stderr = if n > 1 {
        let var = losses.iter().map(|l| (l - mean) * (l - mean)).sum::<f64>() / (n - 1) as f64;
        (var / n as f64).sqrt()
    } else {
        0.0
    };
    Ok((mean, stderr))
}

/// Mini-batch dropout gradient with `k` mask draws per example:
/// `∇_W (1/m) Σ_i (1/k) Σ_j ℓ(F(x_i, η_ij))`.
///
/// Masks are independent across both examples and draws; example `i`, draw
/// `j` uses `stream.child(i).child(j)`.
pub fn drop_k_gradient(
    model: &MlpModel,
    batch: &[LabeledExample],
    spec: &DropoutSpec,
    k: usize,
    stream: &RngStream,
) -> Result<GradVector> {
    if batch.is_empty() {
        return Err(Error::EmptyBatch);
    }
    if k < 1 {
        return Err(Error::InvalidArgument("drop_k needs k >= 1".to_string()));
    }
    spec.validate(model)?;
    let m = batch.len() as f64;
    let per_example: Vec<GradVector> = batch
        .par_iter()
        .enumerate()
        .map(|(i, ex)| {
            let ex_stream = stream.child(i as u64);
            let mut acc = GradVector::zeros(model.layout());
            for j in 0..k as u64 {
                let mask = sample_mask(spec, model, &ex_stream.child(j))?;
                let g = model.param_gradient(ex, Some(&mask))?;
                acc.add_scaled(&g, 1.0 / k as f64);
            }
            Ok(acc)
        })
        .collect::<Result<Vec<_>>>()?;
    let mut total = GradVector::zeros(model.layout());
    for g in &per_example {
        total.add_scaled(g, 1.0 / m);
    }
    Ok(total)
}

/// Two-draw surrogate for the dropout gradient fluctuation:
/// `ξ̃ = ∇_W ℓ(F(x,η₁)) − ∇_W ℓ(F(x,η₂))`.
///
/// Mean zero by construction, with covariance exactly twice that of the
/// dropout gradient noise.
pub fn xi_tilde_sample(
    model: &MlpModel,
    example: &LabeledExample,
    spec: &DropoutSpec,
    stream: &RngStream,
) -> Result<GradVector> {
    let m1 = sample_mask(spec, model, &stream.child(0))?;
    let m2 = sample_mask(spec, model, &stream.child(1))?;
    let g1 = model.param_gradient(example, Some(&m1))?;
    let g2 = model.param_gradient(example, Some(&m2))?;
    Ok(g1.sub(&g2))
}

/// Which mean-zero noise restores the `drop_1` covariance.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum NoiseSource {
    /// Two-draw dropout gradient difference, scaled by `√(½(1−1/k))`.
    XiTilde,
    /// Analytic update noise with Rademacher masks, scaled by `√(1−1/k)`
    /// (the `√(q/(1−q))` factor lives inside the noise sample itself).
    XiOurs,
}

/// Whether correction noise is drawn independently per example or shared
/// across the batch.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum NoiseGranularity {
    PerExample,
    PerBatch,
}

impl Default for NoiseGranularity {
    fn default() -> Self {
        NoiseGranularity::PerExample
    }
}

/// `drop_k` gradient plus covariance-restoring noise.
///
/// At `k = 1` the noise scale is zero and this is exactly `drop_1`.
pub fn corrected_drop_k_gradient(
    model: &MlpModel,
    batch: &[LabeledExample],
    spec: &DropoutSpec,
    k: usize,
    source: NoiseSource,
    granularity: NoiseGranularity,
    stream: &RngStream,
) -> Result<GradVector> {
    let base_stream = stream.child(0);
    let noise_stream = stream.child(1);
    let mut g = drop_k_gradient(model, batch, spec, k, &base_stream)?;
    let m = batch.len() as f64;
    let k_factor = 1.0 - 1.0 / k as f64;
    if k_factor == 0.0 || spec.q == 0.0 {
        return Ok(g);
    }
    let scale = match source {
        NoiseSource::XiTilde => (0.5 * k_factor).sqrt(),
        NoiseSource::XiOurs => k_factor.sqrt(),
    };
    let noises: Vec<GradVector> = match granularity {
        NoiseGranularity::PerExample => batch
            .par_iter()
            .enumerate()
            .map(|(i, ex)| {
                let s = noise_stream.child(i as u64);
                match source {
                    NoiseSource::XiTilde => xi_tilde_sample(model, ex, spec, &s),
                    NoiseSource::XiOurs => crate::reg::implicit_noise_sample(model, ex, spec, &s),
                }
            })
            .collect::<Result<Vec<_>>>()?,
        NoiseGranularity::PerBatch => {
            // one shared draw: reuse the same sub-stream for every example
            batch
                .par_iter()
                .map(|ex| match source {
                    NoiseSource::XiTilde => xi_tilde_sample(model, ex, spec, &noise_stream),
                    NoiseSource::XiOurs => {
                        crate::reg::implicit_noise_sample(model, ex, spec, &noise_stream)
                    }
                })
                .collect::<Result<Vec<_>>>()?
        }
    };
    for noise in &noises {
        g.add_scaled(noise, scale / m);
    }
    Ok(g)
}
