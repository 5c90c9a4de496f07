//! Analytic replacements for dropout's two regularization effects.
//!
//! The explicit effect is the second-order Taylor term of the dropout loss
//! gap, keeping only its PSD part:
//!
//! ```text
//! R(F, x) = Σ_i ⟨J_iᵀ H_out J_i, diag(h_i²)⟩
//! ```
//!
//! where `J_i` is the Jacobian of the logits in hidden layer `h_i` and
//! `H_out = diag(p) − ppᵀ`. `R` never sees the true label. Because `H_out`
//! equals the expected outer product of loss Jacobians under a label drawn
//! from the softmax, a single sampled label `ŷ ~ p` gives the unbiased
//! one-Jacobian estimator `Σ_i Ĵ_i diag(h_i²) Ĵ_iᵀ`; its parameter gradient
//! deliberately does not differentiate through the sampling probabilities,
//! which makes the gradient (not the value) a biased estimate.
//!
//! The implicit effect is replaced by the mean-zero update noise
//!
//! ```text
//! ξ(F, x, η) = ∇_W [Σ_i J^ℓ_i (η_i ⊙ h_i)]
//! ```
//!
//! with Rademacher `η_i`, differentiated through both the loss Jacobian and
//! the hidden layer (a double-backward computation on the tape).
//!
//! Two ablation variants replace `H_out`: the loss-Jacobian outer product at
//! the true label (a good approximation only near confident predictions) and
//! the identity matrix (weighting every output coordinate equally), the
//! latter estimated without materializing `J_i` via a Jacobian-vector
//! product against a Rademacher-masked hidden layer.

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dropout::DropoutSpec;
use crate::gradvec::GradVector;
use crate::model::{ce_grad, ce_hessian, LabeledExample, MlpModel, TracedMlp};
use crate::rng::RngStream;
use crate::tape::NodeId;
use crate::tensor::Tensor;
use crate::{Error, Result};

/// A regularizer total with its per-site decomposition.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegularizerValue {
    pub total: f64,
    /// `(site, contribution)` in ascending site order.
    pub per_site: Vec<(usize, f64)>,
}

impl RegularizerValue {
    fn from_sites(per_site: Vec<(usize, f64)>) -> Self {
        let total = per_site.iter().map(|(_, v)| v).sum();
        RegularizerValue { total, per_site }
    }
}

/// Which explicit regularizer the update rule uses.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RegVariant {
    /// `Σ_i ⟨J_iᵀ H_out J_i, diag(h_i²)⟩`, enumerated over all classes.
    ExactHessian,
    /// One-label unbiased estimator (stop-gradient on the sampling law).
    SampledHessian,
    /// Loss-Jacobian outer product at the true label.
    JacobianApprox,
    /// Identity in place of `H_out`, JVP-sampled.
    IdentityHessian,
}

/// How the regularization strengths are derived.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LambdaLinkage {
    /// Use `lambda1`/`lambda2` as given.
    Manual,
    /// `λ₁ = q/(1−q)`, `λ₂ = √(q/(1−q))` — the strengths that match
    /// dropout with probability `q` in practice.
    FromQ,
    /// `λ₁ = q/(2(1−q))` — the raw second-order Taylor coefficient — with
    /// the same `λ₂`.
    FromQHalved,
}

/// Configuration of the combined explicit/implicit update rule.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegularizerConfig {
    pub variant: RegVariant,
    pub linkage: LambdaLinkage,
    #[serde(default)]
    pub lambda1: f64,
    #[serde(default)]
    pub lambda2: f64,
    /// Dropout strength being emulated (drives the linkage).
    pub q: f64,
    /// Regularized sites; `None` means every hidden layer.
    #[serde(default)]
    pub sites: Option<Vec<usize>>,
}

impl RegularizerConfig {
    pub fn q_linked(variant: RegVariant, q: f64) -> Self {
        RegularizerConfig {
            variant,
            linkage: LambdaLinkage::FromQ,
            lambda1: 0.0,
            lambda2: 0.0,
            q,
            sites: None,
        }
    }

    /// Resolve `(λ₁, λ₂)` per the linkage.
    pub fn lambdas(&self) -> (f64, f64) {
        let ratio = self.q / (1.0 - self.q);
        match self.linkage {
            LambdaLinkage::Manual => (self.lambda1, self.lambda2),
            LambdaLinkage::FromQ => (ratio, ratio.sqrt()),
            LambdaLinkage::FromQHalved => (0.5 * ratio, ratio.sqrt()),
        }
    }

    pub fn sites_for(&self, model: &MlpModel) -> Vec<usize> {
        match &self.sites {
            Some(s) => {
                let mut s = s.clone();
                s.sort_unstable();
                s
            }
            None => (1..=model.hidden_layers()).collect(),
        }
    }

    pub fn validate(&self, model: &MlpModel) -> Result<()> {
        if !(0.0..1.0).contains(&self.q) {
            return Err(Error::InvalidArgument(format!("q {} outside [0,1)", self.q)));
        }
        let (l1, l2) = self.lambdas();
        if l1 < 0.0 || l2 < 0.0 {
            return Err(Error::InvalidArgument(
                "regularization strengths must be nonnegative".to_string(),
            ));
        }
        for &s in &self.sites_for(model) {
            if s < 1 || s > model.hidden_layers() {
                return Err(Error::InvalidArgument(format!("site {s} out of range")));
            }
        }
        Ok(())
    }
}

/// Exact explicit regularizer `Σ_i ⟨J_iᵀ H_out J_i, diag(h_i²)⟩` over all
/// hidden layers. Label-free and nonnegative by construction.
pub fn explicit_reg_exact(model: &MlpModel, x: &Tensor) -> Result<RegularizerValue> {
    let sites: Vec<usize> = (1..=model.hidden_layers()).collect();
    explicit_reg_exact_sites(model, x, &sites)
}

/// [`explicit_reg_exact`] restricted to the given sites.
pub fn explicit_reg_exact_sites(
    model: &MlpModel,
    x: &Tensor,
    sites: &[usize],
) -> Result<RegularizerValue> {
    let trace = model.forward_trace(x)?;
    let h_out = ce_hessian(&trace.logits);
    let mut per_site = Vec::with_capacity(sites.len());
    for &i in sites {
        let jac = model.tail_jacobian(&trace, i)?;
        let hj = h_out.matmul(&jac);
        let h = trace.h(i);
        // Σ_k h_k² (Jᵀ H J)_kk without forming the full product
        let mut v = 0.0;
        for k in 0..h.len() {
            let mut diag = 0.0;
            for a in 0..model.classes() {
                diag += jac.at(a, k) * hj.at(a, k);
            }
            v += h.data()[k] * h.data()[k] * diag;
        }
        per_site.push((i, v));
    }
    Ok(RegularizerValue::from_sites(per_site))
}

/// Draw a class from a probability vector by inverse CDF.
pub fn sample_class(probs: &Tensor, stream: &RngStream) -> usize {
    let u: f64 = stream.rng().random();
    let mut cum = 0.0;
    for (i, &p) in probs.data().iter().enumerate() {
        cum += p;
        if u < cum {
            return i;
        }
    }
    probs.len() - 1
}

/// Sampled-regularizer value at a fixed label:
/// `Σ_i Ĵ_i diag(h_i²) Ĵ_iᵀ` with `Ĵ_i` the loss Jacobian for `yhat`.
pub fn explicit_reg_sampled_at(model: &MlpModel, x: &Tensor, yhat: usize) -> Result<f64> {
    let sites: Vec<usize> = (1..=model.hidden_layers()).collect();
    explicit_reg_sampled_at_sites(model, x, yhat, &sites)
}

fn explicit_reg_sampled_at_sites(
    model: &MlpModel,
    x: &Tensor,
    yhat: usize,
    sites: &[usize],
) -> Result<f64> {
    let trace = model.forward_trace(x)?;
    let mut total = 0.0;
    for &i in sites {
        let jl = model.loss_jacobian_hidden(&trace, yhat, i)?;
        let weighted = jl.mul(trace.h(i));
        total += weighted.dot(&weighted);
    }
    Ok(total)
}

/// Unbiased one-sample estimate of [`explicit_reg_exact`]: draw
/// `ŷ ~ softmax(F(x))` and evaluate the loss Jacobian there.
pub fn explicit_reg_sampled(model: &MlpModel, x: &Tensor, stream: &RngStream) -> Result<f64> {
    let trace = model.forward_trace(x)?;
    let yhat = sample_class(&trace.probs, stream);
    explicit_reg_sampled_at(model, x, yhat)
}

/// Deterministic enumeration of the sampled estimator: `Σ_ŷ p_ŷ · value(ŷ)`.
/// Equals [`explicit_reg_exact`] up to roundoff; the oracle for
/// unbiasedness checks.
pub fn explicit_reg_enumerated(model: &MlpModel, x: &Tensor) -> Result<f64> {
    let trace = model.forward_trace(x)?;
    let mut total = 0.0;
    for yhat in 0..model.classes() {
        total += trace.probs.data()[yhat] * explicit_reg_sampled_at(model, x, yhat)?;
    }
    Ok(total)
}

/// Ablation: loss-Jacobian outer product at the true label,
/// `Σ_i J^ℓ_i diag(h_i²) (J^ℓ_i)ᵀ`.
pub fn reg_jacobian_approx(model: &MlpModel, x: &Tensor, y: usize) -> Result<f64> {
    explicit_reg_sampled_at(model, x, y)
}

/// Mode of the identity-Hessian ablation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum IdentityMode {
    Exact,
    Sampled,
}

/// Ablation: identity in place of the loss Hessian.
///
/// Exact mode materializes `Σ_i ⟨J_iᵀ J_i, diag(h_i²)⟩`; sampled mode
/// returns `‖J_i (η_i ⊙ h_i)‖²` with Rademacher `η_i` via a JVP, an
/// unbiased estimate of the exact value.
pub fn reg_identity_hessian(
    model: &MlpModel,
    x: &Tensor,
    stream: &RngStream,
    mode: IdentityMode,
) -> Result<f64> {
    match mode {
        IdentityMode::Exact => reg_identity_hessian_exact(model, x),
        IdentityMode::Sampled => {
            let sites: Vec<usize> = (1..=model.hidden_layers()).collect();
            let etas = rademacher_masks(model, &sites, stream);
            reg_identity_hessian_sampled_with(model, x, &etas)
        }
    }
}

pub fn reg_identity_hessian_exact(model: &MlpModel, x: &Tensor) -> Result<f64> {
    let trace = model.forward_trace(x)?;
    let mut total = 0.0;
    for i in 1..=model.hidden_layers() {
        let jac = model.tail_jacobian(&trace, i)?;
        let h = trace.h(i);
        for k in 0..h.len() {
            let mut col_sq = 0.0;
            for a in 0..model.classes() {
                col_sq += jac.at(a, k) * jac.at(a, k);
            }
            total += h.data()[k] * h.data()[k] * col_sq;
        }
    }
    Ok(total)
}

/// Sampled identity-Hessian value for fixed sign vectors.
pub fn reg_identity_hessian_sampled_with(
    model: &MlpModel,
    x: &Tensor,
    etas: &[(usize, Tensor)],
) -> Result<f64> {
    let trace = model.forward_trace(x)?;
    let mut total = 0.0;
    for (i, eta) in etas {
        let v = eta.mul(trace.h(*i));
        let u = jvp(model, &trace, *i, &v)?;
        total += u.dot(&u);
    }
    Ok(total)
}

/// Jacobian-vector product `J_i(x) · v` by forward accumulation through the
/// tail layers, without materializing `J_i`.
pub fn jvp(model: &MlpModel, trace: &crate::model::ForwardTrace, i: usize, v: &Tensor) -> Result<Tensor> {
    let ell = model.hidden_layers();
    if i < 1 || i > ell {
        return Err(Error::InvalidArgument(format!(
            "layer index {i} out of range 1..={ell}"
        )));
    }
    if v.shape() != [model.hidden_dim(i)] {
        return Err(Error::ShapeMismatch(format!(
            "jvp direction shape {:?}, expected [{}]",
            v.shape(),
            model.hidden_dim(i)
        )));
    }
    let mut u = v.clone();
    for j in i..=ell {
        u = model.weights[j].matvec(&u);
        if j < ell {
            let dz = trace.pre_activations[j].map(|z| model.activations[j].deriv(z));
            u = u.mul(&dz);
        }
    }
    Ok(u)
}

/// Rademacher ±1 vectors for the given sites, one sub-stream per site.
pub fn rademacher_masks(
    model: &MlpModel,
    sites: &[usize],
    stream: &RngStream,
) -> Vec<(usize, Tensor)> {
    let mut sorted = sites.to_vec();
    sorted.sort_unstable();
    sorted
        .iter()
        .enumerate()
        .map(|(idx, &site)| {
            let mut rng = stream.child(idx as u64).rng();
            let data: Vec<f64> = (0..model.hidden_dim(site))
                .map(|_| if rng.random::<bool>() { 1.0 } else { -1.0 })
                .collect();
            (site, Tensor::vector(data))
        })
        .collect()
}

/// Unscaled analytic update noise `∇_W [Σ_i J^ℓ_i (η_i ⊙ h_i)]` for fixed
/// masks, differentiated through both the loss Jacobians and the hidden
/// layers (double backward).
pub fn implicit_noise_with_masks(
    model: &MlpModel,
    example: &LabeledExample,
    etas: &[(usize, Tensor)],
) -> Result<GradVector> {
    let scales = vec![None; model.hidden_layers()];
    let mut traced = model.traced(&example.x, &scales)?;
    let loss = traced.ce_loss_node(example.y);
    let h_ids: Vec<NodeId> = etas.iter().map(|(i, _)| traced.h_id(*i)).collect();
    let ghats = traced.tape.gradient(loss, &h_ids)?;
    let mut scalar: Option<NodeId> = None;
    for (((_, eta), ghat), h_id) in etas.iter().zip(ghats).zip(h_ids) {
        let eta_node = traced.tape.leaf(eta.clone());
        let masked = traced.tape.mul(eta_node, h_id);
        let term = traced.tape.dot(ghat, masked);
        scalar = Some(match scalar {
            Some(s) => traced.tape.add(s, term),
            None => term,
        });
    }
    match scalar {
        Some(s) => traced.param_gradient_of(s),
        None => Ok(GradVector::zeros(model.layout())),
    }
}

/// One draw of the analytic update noise, scaled by `√(q/(1−q))` so its
/// covariance matches the dropout gradient noise at strength `spec.q`.
pub fn implicit_noise_sample(
    model: &MlpModel,
    example: &LabeledExample,
    spec: &DropoutSpec,
    stream: &RngStream,
) -> Result<GradVector> {
    spec.validate(model)?;
    if spec.q == 0.0 || spec.sites.is_empty() {
        return Ok(GradVector::zeros(model.layout()));
    }
    let etas = rademacher_masks(model, &spec.sites, stream);
    let mut g = implicit_noise_with_masks(model, example, &etas)?;
    g.scale(spec.keep_value().sqrt());
    Ok(g)
}

/// Frozen stochastic choices of one regularized example update.
#[derive(Debug, Clone)]
pub struct RegDraw {
    pub yhat: Option<usize>,
    pub etas: Option<Vec<(usize, Tensor)>>,
}

/// Draw whatever stochastic choices the configured variant needs.
pub fn draw_reg_noise(
    model: &MlpModel,
    probs: &Tensor,
    config: &RegularizerConfig,
    stream: &RngStream,
) -> RegDraw {
    match config.variant {
        RegVariant::ExactHessian | RegVariant::JacobianApprox => RegDraw {
            yhat: None,
            etas: None,
        },
        RegVariant::SampledHessian => RegDraw {
            yhat: Some(sample_class(probs, stream)),
            etas: None,
        },
        RegVariant::IdentityHessian => RegDraw {
            yhat: None,
            etas: Some(rademacher_masks(model, &config.sites_for(model), stream)),
        },
    }
}

/// Regularizer value for a frozen draw, by the plain (non-tape) path.
/// This is the function the update gradient is checked against.
pub fn reg_value_with_draw(
    model: &MlpModel,
    example: &LabeledExample,
    config: &RegularizerConfig,
    draw: &RegDraw,
) -> Result<f64> {
    let sites = config.sites_for(model);
    match config.variant {
        RegVariant::ExactHessian => {
            Ok(explicit_reg_exact_sites(model, &example.x, &sites)?.total)
        }
        RegVariant::SampledHessian => {
            let yhat = draw.yhat.expect("sampled variant needs a label draw");
            explicit_reg_sampled_at_sites(model, &example.x, yhat, &sites)
        }
        RegVariant::JacobianApprox => {
            explicit_reg_sampled_at_sites(model, &example.x, example.y, &sites)
        }
        RegVariant::IdentityHessian => {
            let etas = draw.etas.as_ref().expect("identity variant needs masks");
            reg_identity_hessian_sampled_with(model, &example.x, etas)
        }
    }
}

/// Build the regularizer for a frozen draw as a differentiable tape node.
fn reg_node_with_draw(
    traced: &mut TracedMlp,
    model: &MlpModel,
    example: &LabeledExample,
    config: &RegularizerConfig,
    draw: &RegDraw,
) -> Result<NodeId> {
    let sites = config.sites_for(model);
    let site_quadratic = |traced: &mut TracedMlp, label: usize, sites: &[usize]| -> Result<NodeId> {
        let loss = traced.ce_loss_node(label);
        let h_ids: Vec<NodeId> = sites.iter().map(|&i| traced.h_id(i)).collect();
        let ghats = traced.tape.gradient(loss, &h_ids)?;
        let mut acc: Option<NodeId> = None;
        for (ghat, h) in ghats.into_iter().zip(h_ids) {
            let masked = traced.tape.mul(ghat, h);
            let term = traced.tape.dot(masked, masked);
            acc = Some(match acc {
                Some(a) => traced.tape.add(a, term),
                None => term,
            });
        }
        Ok(acc.expect("at least one site"))
    };

    if sites.is_empty() {
        return Ok(traced.tape.scalar(0.0));
    }
    match config.variant {
        RegVariant::ExactHessian => {
            let mut acc: Option<NodeId> = None;
            for a in 0..model.classes() {
                let quad = site_quadratic(traced, a, &sites)?;
                let p_a = traced.prob_node(a);
                let term = traced.tape.mul(p_a, quad);
                acc = Some(match acc {
                    Some(t) => traced.tape.add(t, term),
                    None => term,
                });
            }
            Ok(acc.unwrap())
        }
        RegVariant::SampledHessian => {
            let yhat = draw.yhat.expect("sampled variant needs a label draw");
            site_quadratic(traced, yhat, &sites)
        }
        RegVariant::JacobianApprox => site_quadratic(traced, example.y, &sites),
        RegVariant::IdentityHessian => {
            let etas = draw.etas.as_ref().expect("identity variant needs masks");
            let mut acc: Option<NodeId> = None;
            for (site, eta) in etas {
                let eta_node = traced.tape.leaf(eta.clone());
                let mut u = traced.tape.mul(eta_node, traced.h_id(*site));
                for j in *site..=model.hidden_layers() {
                    u = traced.tape.matvec(traced.weight_ids[j], u);
                    if j < model.hidden_layers() {
                        // act'(z_{j+1}) from the traced nodes
                        let z = traced.z_ids[j];
                        let dz = match model.activations[j] {
                            crate::model::Activation::Tanh => {
                                let h = traced.tape.tanh(z);
                                let h2 = traced.tape.mul(h, h);
                                let ones = traced
                                    .tape
                                    .leaf(Tensor::full(vec![model.hidden_dim(j + 1)], 1.0));
                                traced.tape.sub(ones, h2)
                            }
                            crate::model::Activation::Relu => traced.tape.relu_mask(z),
                        };
                        u = traced.tape.mul(u, dz);
                    }
                }
                let term = traced.tape.dot(u, u);
                acc = Some(match acc {
                    Some(a) => traced.tape.add(a, term),
                    None => term,
                });
            }
            Ok(acc.unwrap())
        }
    }
}

/// Per-example gradient of `ℓ(F(x)) + λ₁ R(F, x)` for a frozen draw.
pub fn regularized_example_gradient(
    model: &MlpModel,
    example: &LabeledExample,
    config: &RegularizerConfig,
    lambda1: f64,
    draw: &RegDraw,
) -> Result<GradVector> {
    let scales = vec![None; model.hidden_layers()];
    let mut traced = model.traced(&example.x, &scales)?;
    let loss = traced.ce_loss_node(example.y);
    let objective = if lambda1 == 0.0 {
        loss
    } else {
        let r = reg_node_with_draw(&mut traced, model, example, config, draw)?;
        let scaled = traced.tape.scale(r, lambda1);
        traced.tape.add(loss, scaled)
    };
    traced.param_gradient_of(objective)
}

/// The combined update of explicit and implicit regularization:
///
/// `g = (1/m) Σ_i ∇_W[ℓ(F(x_i)) + λ₁ R(F,x_i)] + (1/m) Σ_i λ₂ ξ(F,x_i)`
///
/// `ξ` uses raw Rademacher masks; `λ₂` carries the full noise scale, so the
/// `FromQ` linkage reproduces dropout strength `q`.
pub fn combined_update_gradient(
    model: &MlpModel,
    batch: &[LabeledExample],
    config: &RegularizerConfig,
    stream: &RngStream,
) -> Result<GradVector> {
    if batch.is_empty() {
        return Err(Error::EmptyBatch);
    }
    config.validate(model)?;
    let (lambda1, lambda2) = config.lambdas();
    let m = batch.len() as f64;
    let sites = config.sites_for(model);
    let per_example: Vec<GradVector> = batch
        .par_iter()
        .enumerate()
        .map(|(i, ex)| {
            let ex_stream = stream.child(i as u64);
            let trace = model.forward_trace(&ex.x)?;
            let draw = draw_reg_noise(model, &trace.probs, config, &ex_stream.child(0));
            let mut g = regularized_example_gradient(model, ex, config, lambda1, &draw)?;
            if lambda2 > 0.0 && !sites.is_empty() {
                let etas = rademacher_masks(model, &sites, &ex_stream.child(1));
                let noise = implicit_noise_with_masks(model, ex, &etas)?;
                g.add_scaled(&noise, lambda2);
            }
            Ok(g)
        })
        .collect::<Result<Vec<_>>>()?;
    let mut total = GradVector::zeros(model.layout());
    for g in &per_example {
        total.add_scaled(g, 1.0 / m);
    }
    Ok(total)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::Activation;

    /// `F(x) = W·relu(x)` with identity first layer: on positive inputs the
    /// hidden layer equals the input, so the tail Jacobian is exactly `W`.
    fn relu_identity_model(w: Tensor) -> MlpModel {
        let d = w.cols();
        let mut eye = Tensor::zeros(vec![d, d]);
        for i in 0..d {
            eye.set(i, i, 1.0);
        }
        let c = w.rows();
        MlpModel::new(
            vec![d, d, c],
            vec![Activation::Relu],
            vec![eye, w],
            vec![Tensor::zeros(vec![d]), Tensor::zeros(vec![c])],
        )
        .unwrap()
    }

    fn rand_model(seed: u64, dims: Vec<usize>) -> MlpModel {
        let acts = vec![Activation::Tanh; dims.len() - 2];
        MlpModel::random_init(dims, acts, &RngStream::new(seed))
    }

    #[test]
    fn exact_reg_identity_example() {
        // J = I, h = (1,1), p = (1/2,1/2): R = tr(H_out) = 1/2
        let w = Tensor::matrix(2, 2, vec![1.0, 0.0, 0.0, 1.0]);
        let model = relu_identity_model(w);
        let r = explicit_reg_exact(&model, &Tensor::vector(vec![1.0, 1.0])).unwrap();
        assert!((r.total - 0.5).abs() < 1e-12, "total {}", r.total);
    }

    #[test]
    fn exact_reg_zero_hidden() {
        let model = rand_model(3, vec![3, 4, 4, 2]);
        // zero input and zero biases keep every tanh layer at 0
        let r = explicit_reg_exact(&model, &Tensor::vector(vec![0.0, 0.0, 0.0])).unwrap();
        assert_eq!(r.total, 0.0);
    }

    #[test]
    fn exact_reg_saturated_model_vanishes() {
        let mut model = rand_model(5, vec![2, 3, 2]);
        model.biases[1] = Tensor::vector(vec![300.0, 0.0]);
        let r = explicit_reg_exact(&model, &Tensor::vector(vec![0.5, -0.5])).unwrap();
        assert!(r.total.abs() < 1e-10);
    }

    #[test]
    fn exact_reg_nonnegative_and_site_sum() {
        for seed in 0..20 {
            let model = rand_model(seed, vec![3, 5, 4, 3]);
            let x = Tensor::vector(vec![0.3 * seed as f64 % 1.0, -0.4, 0.9]);
            let r = explicit_reg_exact(&model, &x).unwrap();
            assert!(r.total >= -1e-10);
            let site_sum: f64 = r.per_site.iter().map(|(_, v)| v).sum();
            assert!((r.total - site_sum).abs() < 1e-12);
        }
    }

    #[test]
    fn sampled_enumeration_matches_exact() {
        for seed in [1u64, 2, 3] {
            let model = rand_model(seed, vec![4, 6, 5]);
            let x = Tensor::vector(vec![0.2, -0.7, 1.1, 0.4]);
            let exact = explicit_reg_exact(&model, &x).unwrap().total;
            let enumerated = explicit_reg_enumerated(&model, &x).unwrap();
            assert!(
                (exact - enumerated).abs() <= 1e-10 * exact.abs().max(1.0),
                "{exact} vs {enumerated}"
            );
        }
    }

    #[test]
    fn sampled_zero_hidden_any_label() {
        let model = rand_model(7, vec![2, 3, 4]);
        let x = Tensor::vector(vec![0.0, 0.0]);
        for yhat in 0..4 {
            assert_eq!(explicit_reg_sampled_at(&model, &x, yhat).unwrap(), 0.0);
        }
    }

    #[test]
    fn sampled_mc_mean_near_exact() {
        let model = rand_model(11, vec![3, 4, 3]);
        let x = Tensor::vector(vec![0.5, 0.1, -0.3]);
        let exact = explicit_reg_exact(&model, &x).unwrap().total;
        let stream = RngStream::new(13);
        let n = 10_000u64;
        let mut vals = Vec::with_capacity(n as usize);
        for j in 0..n {
            vals.push(explicit_reg_sampled(&model, &x, &stream.child(j)).unwrap());
        }
        let mean: f64 = vals.iter().sum::<f64>() / n as f64;
        let var: f64 =
            vals.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1) as f64;
        let sigma = (var / n as f64).sqrt();
        assert!(
            (mean - exact).abs() <= 4.0 * sigma.max(1e-12),
            "mean {mean} exact {exact} sigma {sigma}"
        );
    }

    #[test]
    fn jacobian_approx_one_hot_vanishes() {
        let mut model = rand_model(17, vec![2, 3, 2]);
        model.biases[1] = Tensor::vector(vec![300.0, 0.0]);
        let v = reg_jacobian_approx(&model, &Tensor::vector(vec![0.4, 0.2]), 0).unwrap();
        assert!(v.abs() < 1e-10);
    }

    #[test]
    fn jacobian_approx_single_site_scalar() {
        // d_1 = 1: the value is exactly (J^ℓ)² h²
        let model = MlpModel::new(
            vec![2, 1, 2],
            vec![Activation::Tanh],
            vec![
                Tensor::matrix(1, 2, vec![0.6, -0.4]),
                Tensor::matrix(2, 1, vec![1.2, -0.8]),
            ],
            vec![Tensor::zeros(vec![1]), Tensor::zeros(vec![2])],
        )
        .unwrap();
        let x = Tensor::vector(vec![0.9, 0.3]);
        let trace = model.forward_trace(&x).unwrap();
        let jl = model.loss_jacobian_hidden(&trace, 1, 1).unwrap();
        let h = trace.h(1).data()[0];
        let expected = jl.data()[0] * jl.data()[0] * h * h;
        let got = reg_jacobian_approx(&model, &x, 1).unwrap();
        assert!((got - expected).abs() < 1e-15);
    }

    #[test]
    fn jacobian_approx_ratio_to_exact_approaches_one() {
        // as confidence in the true label grows, H_out → ĝĝᵀ (at the label)
        let w = Tensor::matrix(2, 2, vec![1.0, -1.0, -1.0, 1.0]);
        let model = relu_identity_model(w);
        let mut prev_err = f64::INFINITY;
        for scale in [1.0, 2.0, 4.0, 8.0] {
            let x = Tensor::vector(vec![scale, 0.5 / scale]);
            let exact = explicit_reg_exact(&model, &x).unwrap().total;
            let approx = reg_jacobian_approx(&model, &x, 0).unwrap();
            let err = (approx / exact - 1.0).abs();
            assert!(err < prev_err, "ratio error should shrink: {err} vs {prev_err}");
            prev_err = err;
        }
        assert!(prev_err < 0.05);
    }

    #[test]
    fn identity_reg_examples() {
        // J = I, h = (1,1) → 2 ; h = 0 → 0
        let w = Tensor::matrix(2, 2, vec![1.0, 0.0, 0.0, 1.0]);
        let model = relu_identity_model(w);
        let v = reg_identity_hessian_exact(&model, &Tensor::vector(vec![1.0, 1.0])).unwrap();
        assert!((v - 2.0).abs() < 1e-12);
        let z = reg_identity_hessian_exact(&model, &Tensor::vector(vec![0.0, 0.0])).unwrap();
        assert_eq!(z, 0.0);
    }

    #[test]
    fn identity_sampled_enumeration_matches_exact() {
        // enumerate all sign vectors of the single width-4 site
        let model = rand_model(19, vec![3, 4, 3]);
        let x = Tensor::vector(vec![0.7, -0.2, 0.5]);
        let exact = reg_identity_hessian_exact(&model, &x).unwrap();
        let d = 4usize;
        let mut acc = 0.0;
        for bits in 0..(1u32 << d) {
            let eta: Vec<f64> = (0..d)
                .map(|k| if bits >> k & 1 == 1 { 1.0 } else { -1.0 })
                .collect();
            acc += reg_identity_hessian_sampled_with(
                &model,
                &x,
                &[(1, Tensor::vector(eta))],
            )
            .unwrap();
        }
        acc /= (1u32 << d) as f64;
        assert!((acc - exact).abs() <= 1e-10, "{acc} vs {exact}");
    }

    #[test]
    fn jvp_matches_dense_jacobian() {
        let model = rand_model(23, vec![3, 5, 4, 3]);
        let x = Tensor::vector(vec![0.1, 0.9, -0.4]);
        let trace = model.forward_trace(&x).unwrap();
        for i in 1..=2 {
            let jac = model.tail_jacobian(&trace, i).unwrap();
            let d = model.hidden_dim(i);
            // v = 0
            let zero = jvp(&model, &trace, i, &Tensor::zeros(vec![d])).unwrap();
            assert!(zero.data().iter().all(|&v| v == 0.0));
            // unit vectors pick out columns
            for k in 0..d {
                let mut e = vec![0.0; d];
                e[k] = 1.0;
                let col = jvp(&model, &trace, i, &Tensor::vector(e)).unwrap();
                for a in 0..model.classes() {
                    assert!((col.data()[a] - jac.at(a, k)).abs() < 1e-12);
                }
            }
            // random direction
            let mut rng = RngStream::new(29).rng();
            use rand::Rng;
            let v = Tensor::vector((0..d).map(|_| rng.random::<f64>() - 0.5).collect());
            let fast = jvp(&model, &trace, i, &v).unwrap();
            let dense = jac.matvec(&v);
            for (a, b) in fast.data().iter().zip(dense.data()) {
                assert!((a - b).abs() <= 1e-10);
            }
        }
    }

    #[test]
    fn implicit_noise_zero_masks_zero() {
        let model = rand_model(31, vec![3, 4, 2]);
        let ex = LabeledExample {
            x: Tensor::vector(vec![0.3, -0.3, 0.6]),
            y: 0,
        };
        let etas = vec![(1usize, Tensor::zeros(vec![4]))];
        let g = implicit_noise_with_masks(&model, &ex, &etas).unwrap();
        assert!(g.values.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn implicit_noise_antisymmetric_in_masks() {
        let model = rand_model(37, vec![3, 4, 4, 2]);
        let ex = LabeledExample {
            x: Tensor::vector(vec![0.5, 0.1, -0.7]),
            y: 1,
        };
        let etas = rademacher_masks(&model, &[1, 2], &RngStream::new(41));
        let flipped: Vec<(usize, Tensor)> = etas
            .iter()
            .map(|(i, e)| (*i, e.scale(-1.0)))
            .collect();
        let g = implicit_noise_with_masks(&model, &ex, &etas).unwrap();
        let gf = implicit_noise_with_masks(&model, &ex, &flipped).unwrap();
        for (a, b) in g.values.iter().zip(&gf.values) {
            assert!((a + b).abs() < 1e-12);
        }
    }

    #[test]
    fn implicit_noise_mean_near_zero() {
        let model = rand_model(43, vec![2, 3, 2]);
        let ex = LabeledExample {
            x: Tensor::vector(vec![0.8, -0.2]),
            y: 0,
        };
        let spec = DropoutSpec::all_sites(0.4, &model);
        let stream = RngStream::new(47);
        let n = 10_000u64;
        let dim = model.param_count();
        let mut mean = vec![0.0; dim];
        let mut sq = vec![0.0; dim];
        for j in 0..n {
            let g = implicit_noise_sample(&model, &ex, &spec, &stream.child(j)).unwrap();
            for (k, v) in g.values.iter().enumerate() {
                mean[k] += v;
                sq[k] += v * v;
            }
        }
        for k in 0..dim {
            let m = mean[k] / n as f64;
            let var = sq[k] / n as f64 - m * m;
            let sigma = (var / n as f64).sqrt();
            assert!(m.abs() <= 4.0 * sigma.max(1e-12), "coord {k}: {m} vs {sigma}");
        }
    }

    #[test]
    fn q_linkage_values() {
        let config = RegularizerConfig::q_linked(RegVariant::ExactHessian, 0.4);
        let (l1, l2) = config.lambdas();
        assert!((l1 - 2.0 / 3.0).abs() < 1e-15);
        assert!((l2 - (2.0f64 / 3.0).sqrt()).abs() < 1e-15);

        let halved = RegularizerConfig {
            linkage: LambdaLinkage::FromQHalved,
            ..config
        };
        let (l1h, _) = halved.lambdas();
        assert!((l1h - 1.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn combined_zero_lambdas_is_plain_gradient() {
        let model = rand_model(53, vec![3, 4, 3]);
        let batch = vec![
            LabeledExample {
                x: Tensor::vector(vec![0.2, 0.4, -0.6]),
                y: 0,
            },
            LabeledExample {
                x: Tensor::vector(vec![-0.1, 0.9, 0.3]),
                y: 2,
            },
        ];
        let config = RegularizerConfig {
            variant: RegVariant::ExactHessian,
            linkage: LambdaLinkage::Manual,
            lambda1: 0.0,
            lambda2: 0.0,
            q: 0.4,
            sites: None,
        };
        let g = combined_update_gradient(&model, &batch, &config, &RngStream::new(59)).unwrap();
        let mut plain = GradVector::zeros(model.layout());
        for ex in &batch {
            plain.add_scaled(&model.param_gradient(ex, None).unwrap(), 0.5);
        }
        for (a, b) in g.values.iter().zip(&plain.values) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn combined_gradient_matches_fd_exact_variant() {
        let model = rand_model(61, vec![3, 4, 3]);
        let ex = LabeledExample {
            x: Tensor::vector(vec![0.4, -0.2, 0.7]),
            y: 1,
        };
        let config = RegularizerConfig {
            variant: RegVariant::ExactHessian,
            linkage: LambdaLinkage::Manual,
            lambda1: 0.5,
            lambda2: 0.0,
            q: 0.4,
            sites: None,
        };
        let stream = RngStream::new(67);
        let g = combined_update_gradient(
            &model,
            std::slice::from_ref(&ex),
            &config,
            &stream,
        )
        .unwrap();
        let point = Tensor::vector(model.params_flat());
        let fd = crate::stats::finite_diff_grad(
            |p| {
                let mut m = model.clone();
                m.set_params_flat(p.data());
                let loss = m.loss(&ex, None)?;
                let r = explicit_reg_exact(&m, &ex.x)?.total;
                Ok(loss + 0.5 * r)
            },
            &point,
            1e-5,
        )
        .unwrap();
        for (a, b) in g.values.iter().zip(fd.data()) {
            assert!(
                (a - b).abs() / b.abs().max(1e-2) < 1e-4,
                "{a} vs {b}"
            );
        }
    }
}
