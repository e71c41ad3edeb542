//! Visual token compression for small multimodal language models.
//!
//! The crate covers the full pipeline at desk scale: a synthetic vision
//! encoder ([`vision`]), region attention pooling ([`sap`]), instruction-
//! conditioned query tokens ([`embq`]), a decoder-only transformer that hosts
//! them ([`model`]), two-stage training ([`trainer`]) and an analytic cost
//! model at published scale ([`cost`]). Everything runs on the small
//! reverse-mode autodiff in [`tensor`].

pub mod cost;
pub mod embq;
pub mod error;
pub mod model;
pub mod sap;
pub mod tensor;
pub mod trainer;
pub mod vision;

pub use error::{Error, Result};
pub use model::{Model, ModelConfig, VisualInput};
pub use tensor::{Tape, Tensor, Var};
pub use vision::VisualGrid;
