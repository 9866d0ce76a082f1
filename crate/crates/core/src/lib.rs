//! Transformer-based visual object tracking with parameter-efficient
//! multimodal prompt tuning, trained on synthetic clips.

pub mod autodiff;
pub mod bbox;
pub mod data;
pub mod error;
pub mod harness;
pub mod heads;
pub mod inference;
pub mod losses;
pub mod model;
pub mod nn;
pub mod peft;
pub mod task;
pub mod vit;

pub use bbox::BBox;
pub use error::{Error, Result};
pub use task::{Modality, Task};
