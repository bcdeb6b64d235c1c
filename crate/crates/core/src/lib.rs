//! Few-shot classification with a masked-image-modeling ViT backbone and a
//! bi-level adaptive token refinement head.

pub mod batr;
pub mod error;
pub mod fewshot;
pub mod nn;
pub mod numcore;
pub mod tokengraph;
pub mod vit;
pub mod weighting;

pub use error::{Error, Result};
