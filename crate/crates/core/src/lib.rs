//! Physics-constrained hybrid semi-supervised learning.
//!
//! Three dense models interact during training: a primary classifier, an
//! exponential-moving-average secondary (teacher) copy of it, and a
//! latent-feature encoder/decoder that maps the primary's last hidden layer
//! onto the physical parameters of a power system. Swing-equation residuals
//! and transient-stability predicates evaluated on those parameters
//! regularize the primary model when labels are scarce.
//!
//! The crate also ships the simulator that produces the training data: a
//! Kron-reduced three-machine model of the WSCC 9-bus system with branch
//! outages as classes.

pub mod cli;
pub mod constraints;
pub mod gridsim;
pub mod hybrid;
pub mod neural;
pub mod numkit;
pub mod trainer;

pub use numkit::{Matrix, NumError, Rng};
