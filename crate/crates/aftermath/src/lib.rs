//! Settlement damage quantification from pre/post-disaster imagery.
//!
//! The crate trains toy-scale versions of two change-detection networks (a
//! residual binary classifier and a pyramid scene parser), converts
//! segmentation masks into built-environment change rates, clusters historical
//! disasters into severity classes, and fits/inverts a multi-linear regression
//! mapping damage fractions to economic loss and deaths.
//!
//! See the `examples/` directory for one runnable walkthrough per capability,
//! or the `aftermath` binary for the same pipeline as subcommands.

pub mod damage;
pub mod data;
pub mod error;
pub mod net;
pub mod severity;
pub mod tensor;

pub use error::{Error, Result};
