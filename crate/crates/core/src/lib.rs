//! Decentralized coordination of offloading agents through per-agent
//! constrained MDPs whose thresholds are tuned on a slow timescale.

// `!(x > 0.0)` checks are meant to reject NaN too
#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

pub mod baselines;
pub mod cmdp;
pub mod coordinator;
pub mod env;
pub mod error;
pub mod harness;
pub mod joint;
pub mod lp;
pub mod ql;
pub mod rng;

pub use error::{DccError, Result};
