//! Meta-learning laboratory for few-shot sine regression.
//!
//! A task-shared feature network is meta-trained through unrolled
//! hypergradients of an episodic bilevel objective, optionally under four
//! composable regularization strategies, then scored by the transfer-error
//! protocol on fresh meta-test tasks. Companion modules estimate empirical
//! Gaussian/Rademacher complexities and discrepancy divergence, assemble a
//! term-by-term generalization-bound report, and run an online
//! follow-the-meta-leader variant with regret tracking.

pub mod bilevel;
pub mod diagnostics;
pub mod engine;
pub mod eval;
pub mod linalg;
pub mod model;
pub mod online;
pub mod regularizers;
pub mod rng;
pub mod tasks;
