//! Exponentially weighted stochastic-gradient samplers for additive
//! potentials, with the brute-force oracles and diagnostics used to check
//! them.
//!
//! ```
//! use ewsg::model::{gaussian_quadratic_model, random_centers, GradientModel};
//! use ewsg::samplers::{run_ewsg, SamplerConfig};
//! use rand::SeedableRng;
//!
//! let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);
//! let model = gaussian_quadratic_model(&random_centers(&mut rng, 50, 2)).unwrap();
//! let cfg = SamplerConfig::new(0.05, 10.0).with_passes(10).with_seed(1);
//! let out = run_ewsg(&model, &cfg, 8).unwrap();
//! assert_eq!(out.final_states.len(), 8);
//! assert_eq!(out.diverged_count, 0);
//! ```

pub mod diagnostics;
pub mod error;
pub mod harness;
mod linalg;
pub mod model;
pub mod oracle;
pub mod samplers;
pub mod weights;

pub use error::{Error, Result};
pub use model::GradientModel;
pub use samplers::{SamplerConfig, SamplerKind};

/// The guide's chapters, compiled so their snippets run as doc-tests.
#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/introduction.md")]
    mod introduction {}
    #[doc = include_str!("../../../book/src/targets.md")]
    mod targets {}
    #[doc = include_str!("../../../book/src/weights.md")]
    mod weights {}
    #[doc = include_str!("../../../book/src/samplers.md")]
    mod samplers {}
    #[doc = include_str!("../../../book/src/variance-reduction.md")]
    mod variance_reduction {}
    #[doc = include_str!("../../../book/src/diagnostics.md")]
    mod diagnostics {}
    #[doc = include_str!("../../../book/src/oracles.md")]
    mod oracles {}
    #[doc = include_str!("../../../book/src/harness.md")]
    mod harness {}
}
