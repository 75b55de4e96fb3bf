//! Fluid-particle decomposition for large two-sided crowdsourced-delivery
//! markets: a dual accelerated-gradient master problem over a task-chain
//! traffic assignment, VCG auctions per agent group, and exact LP benchmarks.

pub mod agd;
pub mod auctions;
pub mod bench;
pub mod choice;
pub mod cputime;
pub mod error;
pub mod model;
pub mod mta;
pub mod netio;
pub mod so_lp;
pub mod taskchain;

pub use error::{Error, Result};
