//! Dropout's two regularization effects, distilled into analytic form.
//!
//! Node dropout changes training in two separable ways: it shifts the
//! *expected* objective (an explicit regularizer equal to the gap between the
//! dropout-averaged loss and the clean loss), and it injects mean-zero noise
//! into every gradient step (an implicit regularizer from update
//! stochasticity alone). This crate implements both effects for small
//! feedforward softmax classifiers, together with their analytic
//! simplifications:
//!
//! * the explicit regularizer `Σ_i ⟨J_iᵀ H_out J_i, diag(h_i²)⟩`, where `J_i`
//!   is the Jacobian of the logits with respect to hidden layer `h_i` and
//!   `H_out = diag(p) − ppᵀ` is the cross-entropy Hessian at the logits;
//! * an unbiased sampled estimator of the same quantity built from a single
//!   loss Jacobian at a label drawn from the softmax;
//! * the analytic update noise `∇_W [Σ_i J^ℓ_i (η_i ⊙ h_i)]` with Rademacher
//!   masks, a drop-in replacement for dropout's gradient noise;
//! * `drop_k` mini-batch dropout (averaging `k` mask draws per example) and
//!   the covariance-restoring noise corrections that make `drop_k` behave
//!   like standard dropout again.
//!
//! Everything numerical is backed by oracles: a reverse-mode tape that
//! supports differentiating through gradients, central finite differences,
//! and deterministic Monte-Carlo estimators with splittable counter-based
//! random streams. The [`verify`] module packages the oracle comparisons as
//! machine-readable reports; [`bound`] computes the ingredients of a
//! norm-based generalization bound for linear softmax models; [`harness`]
//! reproduces the qualitative experiments on synthetic data.

pub mod bound;
pub mod data;
pub mod dropout;
pub mod gradvec;
pub mod harness;
pub mod model;
pub mod reg;
pub mod rng;
pub mod stats;
pub mod tape;
pub mod tensor;
pub mod verify;

mod error;

pub use error::{Error, Result};
pub use gradvec::{GradVector, ParamLayout};
pub use model::{Activation, ForwardTrace, LabeledExample, MlpModel};
pub use rng::RngStream;
pub use tensor::Tensor;
