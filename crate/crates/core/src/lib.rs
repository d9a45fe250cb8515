//! Fisher-information eigen-distortions for differentiable image models.
//!
//! A model is a [`diffmodel::ModelChain`] with exact forward and reverse
//! derivatives. [`fisher`] finds the most and least noticeable distortions of
//! an image under that model, [`zoo`] holds the concrete models, [`trainer`]
//! fits them to distortion ratings, and [`observer`] checks predicted
//! sensitivities against simulated two-alternative forced-choice observers.

pub mod diffmodel;
pub mod error;
pub mod fisher;
pub mod fixtures;
pub mod io;
pub mod linalg;
pub mod observer;
pub mod tensor;
pub mod trainer;
pub mod zoo;

pub use error::{Error, Result};

pub const TOOL_VERSION: &str = env!("CARGO_PKG_VERSION");
