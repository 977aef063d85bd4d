//! Diffuse jets of sampled maps: difference-quotient jets, their Young
//! measure limits, smooth approximation by patched Taylor polynomials and
//! diffuse-solution checks for fully nonlinear systems.

pub mod cli;
pub mod difference_quotients;
pub mod dsolution_pipeline;
pub mod diffuse_jets;
pub mod error;
pub mod mollifier;
pub mod sampled_fields;
pub mod tensor_frames;
pub mod young_measures;

pub use error::{Error, Result};
