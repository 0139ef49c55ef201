//! Data-driven controller synthesis with formal reach-avoid guarantees.
//!
//! A conditional mean embedding of the transition kernel is learned from
//! samples, abstracted into a finite uncertain MDP whose ambiguity sets are MMD
//! balls around the learned embedding, and solved by robust dynamic programming.

// `!(x > 0.0)` is used on purpose so that NaN is rejected too.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod abstraction;
pub mod cme;
pub mod config;
pub mod errbounds;
pub mod error;
pub mod kernel;
pub mod linalg;
pub mod partition;
pub mod pipeline;
pub mod qclp;
pub mod rdp;
pub mod report;
pub mod sim;

pub use error::{Error, Result};
