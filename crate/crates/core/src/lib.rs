//! Learning context-invariant features on synthetic biased datasets.
//!
//! The crate trains small MLP classifiers on data generated from an explicit
//! two-factor process (a class factor and a context factor), where the
//! training split is biased so that each class co-occurs with one dominant
//! context. It implements four trainers over a shared reverse-mode autodiff
//! engine:
//!
//! * plain ERM,
//! * IRM with ground-truth context environments and a dummy-scalar penalty,
//! * LfF-style inverse-probability reweighting driven by a GCE bias model,
//! * IRMCon-IPW: a contrastive context extractor trained with classes as
//!   environments, converted into per-sample debiasing weights.
//!
//! Evaluation is exact-count unbiased accuracy plus frozen-extractor linear
//! probes that measure how much class or context information a feature
//! extractor carries.

pub mod checkpoint;
pub mod data;
pub mod error;
pub mod eval;
pub mod exec;
pub mod losses;
pub mod nn;
pub mod optim;
pub mod pipelines;
pub mod rng;
pub mod tape;
pub mod tensor;

pub use error::{Error, Result};
pub use tape::{Gradients, Tape, Var};
pub use tensor::Tensor;

/// Version string recorded in run manifests.
pub fn code_version() -> String {
    format!("invlab-core {}", env!("CARGO_PKG_VERSION"))
}
