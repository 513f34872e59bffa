//! Desk-scale laboratory for one-shot visual adaptation of vision–language–action
//! policies.
//!
//! The crate is layered bottom-up:
//!
//! - [`tensor`], [`autodiff`], [`linalg`], [`rng`]: dense `f64` arithmetic with
//!   reverse-mode AD, Jacobi SVD and seeded sampling.
//! - [`encoder`]: a tiny vision transformer producing visual token sequences.
//! - [`adapters`]: feature token modulation, low-rank linear adaptation, and the
//!   prompt / full-LoRA baselines.
//! - [`policy`]: flow-matching action expert with timestep-modulated norms,
//!   attention masking, and a discrete action head.
//! - [`scene`]: toy reaching environment, camera perturbations, rasterizer and
//!   the image-corruption pipeline.
//! - [`trainer`]: AdamW, warmup-cosine schedule, clipping, one-shot adaptation.
//! - [`theory`]: executable checks of the drift / affine / low-rank bounds.

pub mod adapters;
pub mod autodiff;
pub mod encoder;
pub mod error;
pub mod gradcheck;
pub mod linalg;
pub mod model;
pub mod params;
pub mod policy;
pub mod rng;
pub mod rollout;
pub mod scene;
pub mod tensor;
pub mod theory;
pub mod trainer;

pub use error::{Error, Result};
pub use tensor::Tensor;
