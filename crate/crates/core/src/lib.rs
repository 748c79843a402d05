//! Measure, model, predict, and mitigate example-level forgetting in
//! continual fine-tuning.
//!
//! The library is organised around the *association matrix* `Z`: an `M × N`
//! record in which entry `z_ij` says how much upstream example `j` was
//! forgotten after fine-tuning on task `i` (increase in log-perplexity for
//! continuous measurements, or a 0/1 exact-match drop for binary ones).
//!
//! - [`matrix`] owns the data model, construction from before/after
//!   performance snapshots, and file I/O (CSV, framed binary, PGM heatmaps).
//! - [`lowrank`] fits rank-`r` factorizations of `Z` (SVD for fully observed
//!   continuous matrices, gradient descent with identity or logistic link
//!   otherwise) and reports goodness of fit (R², F1).
//! - [`completion`] predicts the forgetting row of an unseen task from a
//!   small seed of observed entries (additive, k-NN, matrix-factorization
//!   fold-in, feature regression, residual combination) and runs the
//!   seeded evaluation protocol.
//! - [`stats`] provides the correlation, significance-test, and
//!   random-projection utilities used throughout.
//! - [`replay`] selects replay examples during fine-tuning (ground-truth,
//!   predicted, and baseline strategies) and records traces and cost
//!   ledgers.
//! - [`oracle`] is a self-contained rotated-image continual-learning
//!   testbed: small dense classifiers trained on rotated variants of an
//!   image dataset, producing real forgetting matrices in seconds.

// Matrix products and factorizations dispatch to the system BLAS/LAPACK;
// the explicit reference makes sure the backend is linked into every
// consumer of this crate.
extern crate openblas_src as _;

pub mod completion;
pub mod lowrank;
pub mod matrix;
pub mod oracle;
pub mod replay;
pub mod stats;

pub use matrix::{AssociationMatrix, MatrixKind, PerformanceSnapshot};
