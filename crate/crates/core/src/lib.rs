//! CPU reference implementation of an instance-level human parsing head:
//! RoI pooling, the geometric and context encoding block, decoupled branch
//! layouts, gradient verification and the evaluation metrics.
//!
//! All arithmetic is `f64`. Parallel code paths produce results that are
//! bit-identical for any thread count.

pub mod branch;
pub mod error;
pub mod gce;
pub mod gradcheck;
pub mod metrics;
pub mod params;
pub mod roi;
pub mod tensor;

pub use error::{Error, Result};
pub use params::{seeded_rng, InitScheme, Parameters};
pub use tensor::Tensor;
