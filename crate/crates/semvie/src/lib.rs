//! Auto-regressive text-to-image generation with modality-routed experts.
//!
//! The library implements the full pipeline at desk scale:
//!
//! - [`tensor`]: dense `f32` arrays with reverse-mode automatic differentiation,
//!   the substrate for every model computation.
//! - [`tokenize`]: byte-level text tokenization, a k-means visual codebook that
//!   turns image patches into discrete "vision words", and the merged
//!   multimodal vocabulary.
//! - [`model`]: the modality-routed transformer (a frozen text expert plus a
//!   trainable vision expert around shared causal attention and layer norms,
//!   with dual output heads), and the plain causal text LM that donates the
//!   frozen weights.
//! - [`objectives`]: next-token and next-K-token losses, sampling, and the
//!   decoding loops for image generation, captioning, and super-resolution.
//! - [`training`]: optimizer, learning-rate schedule, staged training,
//!   synthetic dataset generation, and checkpoint serialization.
//! - [`eval`]: per-modality perplexity and oracle-classifier alignment
//!   accuracy over the synthetic caption grammar.

pub mod error;
pub mod eval;
pub mod model;
pub mod objectives;
pub mod rng;
pub mod tensor;
pub mod tokenize;
pub mod training;

pub use error::{Error, Result};
pub use tensor::Tensor;
