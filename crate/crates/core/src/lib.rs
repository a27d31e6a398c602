//! Kernel-based binary classification of probability distributions that are
//! observed only through finite sample bags.
//!
//! The pipeline embeds each bag into the RKHS of a base kernel
//! ([`kme`]), applies a second-level kernel on that embedding space
//! ([`hilbert_kernel`]) and trains a hinge-loss SVM ([`svm`]). The
//! remaining modules generate synthetic two-stage data ([`synth`]), evaluate
//! theoretical bound expressions ([`bounds`]), run Monte Carlo checks of
//! Gaussian-measure identities ([`whitenoise`]) and drive experiments
//! ([`experiments`]).

pub mod base_kernels;
pub mod bounds;
pub mod error;
pub mod experiments;
pub mod hilbert_kernel;
pub mod kme;
pub mod represent;
pub mod rng;
pub mod stats;
pub mod svm;
pub mod synth;
pub mod whitenoise;

pub use base_kernels::{BaseFamily, BaseKernel};
pub use error::{Error, Result};
pub use hilbert_kernel::{HilbertFamily, HilbertKernel, HolderModulus};
pub use kme::{EmpiricalEmbedding, LabeledBag, SampleSet};
pub use svm::{GramMatrix, SvmModel};
pub use synth::MetaDistribution;
