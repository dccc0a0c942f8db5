//! Soccer-event detection cascade at desk scale.
//!
//! The library is organized around the processing chain: a VAE reconstruction
//! gate rejects frames that look nothing like the training distribution, a
//! 9-class classifier (cards merged) with a softmax acceptance threshold
//! assigns event or scene classes, a fine-grain attention module splits card
//! frames into yellow vs red, and a temporal aggregator turns per-frame
//! verdicts into deduplicated event occurrences.

pub mod classifier;
pub mod finegrain;
pub mod labels;
pub mod metrics;
pub mod nn;
pub mod pipeline;
pub mod synth;
pub mod vae;

pub use labels::{is_scene_class, merge_card_labels, ClassLabel, EventKind, NineClassView};
pub use nn::Tensor;
