pub mod app;
pub mod bounds;
pub mod divergence;
pub mod error;
pub mod features;
pub mod gmm;
pub mod kernels;
pub mod ledger;
pub mod observability;
pub mod recursion;
pub mod rng;
pub mod samples;
pub mod score;
pub mod sde;
pub mod stats;
pub mod svg;
pub mod store;

pub use error::{LabError, Result};
pub use gmm::{DiffusionSchedule, GaussianMixture};
pub use rng::Stream;
pub use samples::Samples;
