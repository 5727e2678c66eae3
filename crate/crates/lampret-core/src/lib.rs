//! Layout-aware multimodal document pretraining.
//!
//! Documents are parsed into spatially sorted content blocks, encoded by a
//! two-level cascaded transformer (a lower-level multimodal encoder over
//! tokens and image slots, and a higher-level encoder over block
//! representations), pretrained with five objectives (MLM, ITM, block
//! ordering, block-MLM, image fitting), and evaluated on two document
//! completion tasks (text block filling, image suggestion).

pub mod autodiff;
pub mod baselines;
pub mod checkpoint;
pub mod config;
pub mod eval;
pub mod features;
pub mod ingest;
pub mod layout;
pub mod nnet;
pub mod objectives;
pub mod tasks;
pub mod train;

pub use baselines::{AggregatorKind, Modality};
pub use config::{Profile, RunConfig};
pub use layout::{Block, BlockType, BoundingBox, Document, ImageRef};
pub use nnet::ModelConfig;

