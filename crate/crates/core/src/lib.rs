//! Lipschitz bounds for residual networks via loop transformation, pairwise
//! certified radii, and certified-radius-maximisation training.
//!
//! Networks are chains of blocks `x ↦ H x + G φ(W x)` ([`ResidualChain`])
//! over matrix-free operators ([`LinOp`]). Bounds come from [`liplt`],
//! certificates from [`certify`], training and attacks from [`crmtrain`].

// `!(x > 0.0)` also rejects NaN
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod certify;
pub mod crmtrain;
pub mod error;
pub mod linop;
pub mod liplt;
pub mod netgraph;
pub mod rng;

pub use certify::{certify_dataset, CertRecord, CertSummary, MarginInfo};
pub use crmtrain::{pgd_attack, train, CrmConfig, GKind, LossTerms, PgdConfig};
pub use error::{LipError, Result};
pub use linop::{LinOp, Matrix, ParamKey, PowerIterConfig, Vector};
pub use liplt::{BoundMethod, BoundReport, PairwiseMode};
pub use netgraph::{
    ActivationKind, ActivationSector, Affine, Dataset, ResidualBlock, ResidualChain,
};
