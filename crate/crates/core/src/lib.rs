//! Weakly supervised semantic segmentation from image-level labels.
//!
//! The crate trains a small patch-attention encoder whose class activation
//! maps are turned into pseudo masks. Features are modelled as a Gaussian
//! field whose variance marks ambiguous regions; those regions are masked
//! out of the final features. Pseudo masks from three sources (thresholded
//! CAMs, colour-aware refinement, attention-affinity random walk) are
//! merged by mutual complementing, and the merged mask supervises both the
//! segmentation head and a contrastive loss on the affinity itself.

pub mod affinity;
pub mod backbone;
pub mod error;
pub mod params;
pub mod pipeline;
pub mod refine;
pub mod seg_head;
pub mod tensor;
pub mod uncertainty;

pub use error::{Error, Result};
pub use tensor::{Tape, Tensor, Var};
